//! Static kd-tree for nearest-neighbour queries over 3D points.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Self {
        let mut tree = KdTree {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let (mut lo, mut hi) = (self.points[slice[0]], self.points[slice[0]]);
        for &i in slice {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[start + mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Up to `k` nearest points as `(index, squared distance)`, closest
    /// first; ties are broken by index.
    pub fn nearest(&self, query: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.search(0, query, k, &mut best);
        }
        best
    }

    pub fn nearest_one(&self, query: &Vec3) -> Option<(usize, f64)> {
        self.nearest(query, 1).into_iter().next()
    }

    fn search(&self, node: usize, q: &Vec3, k: usize, best: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    let worse = |&(j, dj): &(usize, f64)| dj > d || (dj == d && j > i);
                    if best.len() < k || best.last().is_some_and(worse) {
                        let pos = best.iter().position(worse).unwrap_or(best.len());
                        best.insert(pos, (i, d));
                        best.truncate(k);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, best);
                if best.len() < k || diff * diff <= best.last().map_or(f64::INFINITY, |b| b.1) {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..2000)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let tree = KdTree::new(pts.clone());
        for _ in 0..200 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let mut brute: Vec<(usize, f64)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            brute.truncate(5);
            assert_eq!(tree.nearest(&q, 5), brute);
        }
    }

    #[test]
    fn duplicates_and_empty() {
        let tree = KdTree::new(vec![Vec3::zeros(); 20]);
        let got = tree.nearest(&Vec3::x(), 3);
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(KdTree::new(vec![]).nearest(&Vec3::x(), 3).is_empty());
    }
}
