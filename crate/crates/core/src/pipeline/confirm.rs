use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the first painted view is approved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfirmMode {
    #[default]
    Auto,
    /// Ask on the terminal until accepted.
    Interactive,
    /// Ask on the terminal, regenerating at most `k` times.
    SeedRetry(usize),
}

impl fmt::Display for ConfirmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfirmMode::Auto => f.write_str("auto"),
            ConfirmMode::Interactive => f.write_str("interactive"),
            ConfirmMode::SeedRetry(k) => write!(f, "seed-retry:{k}"),
        }
    }
}

impl FromStr for ConfirmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ConfirmMode::Auto),
            "interactive" => Ok(ConfirmMode::Interactive),
            _ => s
                .strip_prefix("seed-retry:")
                .and_then(|k| k.parse().ok())
                .map(ConfirmMode::SeedRetry)
                .ok_or_else(|| Error::Config(format!("unknown confirmation mode '{s}'"))),
        }
    }
}

impl Serialize for ConfirmMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConfirmMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Regenerate,
}

/// Decides on the first view after `rejections` earlier rejections. Empty
/// input or end of input accepts.
pub fn confirm_initialization(
    image: &Path,
    mode: ConfirmMode,
    rejections: usize,
    input: &mut dyn BufRead,
    output: &mut dyn Write,
) -> Result<Decision> {
    match mode {
        ConfirmMode::Auto => return Ok(Decision::Accept),
        ConfirmMode::SeedRetry(k) if rejections >= k => return Ok(Decision::Accept),
        _ => {}
    }
    let io_err = |e| Error::io(image, e);
    write!(
        output,
        "First view written to {}. Accept? [Y/n] ",
        image.display()
    )
    .map_err(io_err)?;
    output.flush().map_err(io_err)?;
    let mut line = String::new();
    if input.read_line(&mut line).map_err(io_err)? == 0 {
        warn!("no answer on input; accepting the first view");
        return Ok(Decision::Accept);
    }
    Ok(match line.trim().to_ascii_lowercase().as_str() {
        "n" | "no" | "r" | "retry" => Decision::Regenerate,
        _ => Decision::Accept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ask(mode: ConfirmMode, rejections: usize, answer: &str) -> Decision {
        let mut out = Vec::new();
        confirm_initialization(
            Path::new("v.png"),
            mode,
            rejections,
            &mut answer.as_bytes(),
            &mut out,
        )
        .unwrap()
    }

    #[test]
    fn modes() {
        assert_eq!(ask(ConfirmMode::Auto, 0, "n\n"), Decision::Accept);
        assert_eq!(
            ask(ConfirmMode::Interactive, 5, "n\n"),
            Decision::Regenerate
        );
        assert_eq!(ask(ConfirmMode::Interactive, 0, "y\n"), Decision::Accept);
        assert_eq!(ask(ConfirmMode::Interactive, 0, ""), Decision::Accept);
        assert_eq!(ask(ConfirmMode::SeedRetry(0), 0, "n\n"), Decision::Accept);
        assert_eq!(
            ask(ConfirmMode::SeedRetry(2), 1, "n\n"),
            Decision::Regenerate
        );
        assert_eq!(ask(ConfirmMode::SeedRetry(2), 2, "n\n"), Decision::Accept);
        assert_eq!(
            "seed-retry:3".parse::<ConfirmMode>().unwrap(),
            ConfirmMode::SeedRetry(3)
        );
        assert!("seed-retry:x".parse::<ConfirmMode>().is_err());
    }
}
