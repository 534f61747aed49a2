use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::protocol::CameraMeta;

use super::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedView {
    pub view_index: usize,
    pub camera: CameraMeta,
    /// Indices of earlier plan entries to remap from.
    pub remap_sources: Vec<usize>,
    /// Fuse all painted views before painting this one.
    pub fuse_before: bool,
}

impl PlannedView {
    pub fn azimuth(&self) -> f64 {
        self.camera.azimuth
    }

    pub fn camera(&self) -> Result<Camera> {
        self.camera.to_camera()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPlan {
    pub views: Vec<PlannedView>,
    pub n_facade: usize,
}

impl ViewPlan {
    pub fn azimuths(&self) -> Vec<f64> {
        self.views.iter().map(PlannedView::azimuth).collect()
    }
}

/// Wraps into [0, 360).
pub fn wrap_deg(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w >= 360.0 - 1e-9 {
        0.0
    } else {
        w
    }
}

/// Nearest painted azimuth on each rotational side of `az`; one entry when
/// both sides resolve to the same view.
pub fn nearest_per_side(az: f64, painted: &[(usize, f64)]) -> Vec<usize> {
    let pick = |dist: &dyn Fn(f64) -> f64| {
        painted
            .iter()
            .map(|&(i, b)| (i, dist(b)))
            .filter(|&(_, d)| d > 1e-9)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
    };
    let ccw = pick(&|b| (b - az).rem_euclid(360.0));
    let cw = pick(&|b| (az - b).rem_euclid(360.0));
    let mut out: Vec<usize> = ccw.into_iter().chain(cw).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Front view, then alternating positive and negative increments. The first
/// `n_facade` views chain remaps without fusion; every later view is
/// preceded by a fusion of everything painted so far.
pub fn plan_views(cfg: &PipelineConfig) -> Result<ViewPlan> {
    cfg.validate()?;
    let mut azimuths = vec![0.0];
    let mut k = 1;
    while azimuths.len() < cfg.n_views {
        for sign in [1.0, -1.0] {
            if azimuths.len() < cfg.n_views {
                azimuths.push(wrap_deg(sign * k as f64 * cfg.increment_deg));
            }
        }
        k += 1;
    }
    for (i, a) in azimuths.iter().enumerate() {
        if let Some(j) = azimuths[..i].iter().position(|b| {
            let d = (a - b).rem_euclid(360.0);
            d < 1e-6 || d > 360.0 - 1e-6
        }) {
            return Err(Error::Config(format!(
                "views {j} and {i} share azimuth {a}; reduce the view count or the increment"
            )));
        }
    }
    let n_facade = cfg.n_facade.min(cfg.n_views);
    let mut views = Vec::with_capacity(azimuths.len());
    for (i, &az) in azimuths.iter().enumerate() {
        let cam = Camera::new(az, cfg.elevation, cfg.radius, cfg.fov_y, cfg.resolution)?;
        let painted: Vec<(usize, f64)> = azimuths[..i].iter().copied().enumerate().collect();
        views.push(PlannedView {
            view_index: i,
            camera: CameraMeta::from_camera(&cam),
            remap_sources: nearest_per_side(az, &painted),
            fuse_before: i >= n_facade,
        });
    }
    Ok(ViewPlan { views, n_facade })
}

/// "A photo of {object}, {dir} view", with the modifier as
/// "A photo of a {modifier} {object}, {dir} view".
pub fn build_prompt(object: &str, azimuth: f64, modifier: Option<&str>) -> Result<String> {
    let object = object.trim();
    if object.is_empty() {
        return Err(Error::Config("prompt object is empty".into()));
    }
    let signed = {
        let w = wrap_deg(azimuth);
        if w > 180.0 {
            w - 360.0
        } else {
            w
        }
    };
    let dir = match signed.abs() {
        a if a <= 45.0 => "front",
        a if a < 135.0 => "side",
        _ => "back",
    };
    Ok(match modifier.map(str::trim).filter(|m| !m.is_empty()) {
        Some(m) => format!("A photo of a {m} {object}, {dir} view"),
        None => format!("A photo of {object}, {dir} view"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_order_and_sources() {
        let plan = plan_views(&PipelineConfig::default()).unwrap();
        assert_eq!(
            plan.azimuths(),
            vec![0.0, 40.0, 320.0, 80.0, 280.0, 120.0, 240.0, 160.0, 200.0]
        );
        let fuse: Vec<bool> = plan.views.iter().map(|v| v.fuse_before).collect();
        assert_eq!(
            fuse,
            [false, false, false, false, false, true, true, true, true]
        );
        let az_of = |v: &PlannedView| -> Vec<f64> {
            v.remap_sources
                .iter()
                .map(|&i| plan.views[i].azimuth())
                .collect()
        };
        assert!(plan.views[0].remap_sources.is_empty());
        assert_eq!(az_of(&plan.views[1]), vec![0.0]);
        // 160 is painted before 200, so its far-side neighbour is 240
        assert_eq!(az_of(&plan.views[7]), vec![120.0, 240.0]);
        // the last view has painted neighbours on both sides
        assert_eq!(az_of(&plan.views[8]), vec![240.0, 160.0]);
    }

    #[test]
    fn nearest_side_rule_on_partial_plan() {
        let painted = [(0, 120.0), (1, 200.0), (2, 240.0)];
        assert_eq!(nearest_per_side(160.0, &painted), vec![0, 1]);
        assert_eq!(
            nearest_per_side(160.0, &[(0, 120.0), (2, 240.0)]),
            vec![0, 2]
        );
        assert_eq!(nearest_per_side(10.0, &[(0, 0.0)]), vec![0]);
    }

    #[test]
    fn ablation_plans() {
        let cfg = PipelineConfig {
            n_views: 4,
            increment_deg: 90.0,
            ..Default::default()
        };
        let plan = plan_views(&cfg).unwrap();
        assert_eq!(plan.azimuths(), vec![0.0, 90.0, 270.0, 180.0]);
        assert_eq!(plan.n_facade, 4);
        assert!(plan.views.iter().all(|v| !v.fuse_before));

        let cfg = PipelineConfig {
            n_views: 18,
            increment_deg: 20.0,
            ..Default::default()
        };
        let plan = plan_views(&cfg).unwrap();
        assert_eq!(plan.views.len(), 18);
        assert_eq!(*plan.azimuths().last().unwrap(), 180.0);

        let bad = PipelineConfig {
            n_views: 10,
            ..Default::default()
        };
        assert!(plan_views(&bad).is_err());
    }

    #[test]
    fn prompts() {
        assert_eq!(
            build_prompt("dresser", 0.0, Some("wooden")).unwrap(),
            "A photo of a wooden dresser, front view"
        );
        assert_eq!(
            build_prompt("chair", 180.0, None).unwrap(),
            "A photo of chair, back view"
        );
        assert_eq!(
            build_prompt("dragon", 90.0, Some("red")).unwrap(),
            "A photo of a red dragon, side view"
        );
        assert_eq!(
            build_prompt("chair", 320.0, None).unwrap(),
            "A photo of chair, front view"
        );
        assert_eq!(
            build_prompt("chair", 225.0, None).unwrap(),
            "A photo of chair, back view"
        );
        assert!(build_prompt("  ", 0.0, None).is_err());
    }
}
