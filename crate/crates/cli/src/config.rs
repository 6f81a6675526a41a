use std::collections::BTreeSet;

use serde::Serialize;
use vfm4sdg::distill::{DEFAULT_BETA, DEFAULT_LAMBDA, DEFAULT_LEVELS};
use vfm4sdg::enhance::DEFAULT_HEADS;
use vfm4sdg::metrics::{DEFAULT_IOU_THRESHOLD, DEFAULT_SCORE_THRESHOLD};

use crate::error::CliError;

/// λ values of the reference sensitivity sweep.
pub const LAMBDA_SWEEP: [f64; 7] = [0.1, 0.3, 0.5, 0.8, 1.0, 1.2, 1.5];

/// Validated run settings shared by all subcommands.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub lambda: f64,
    pub levels: BTreeSet<usize>,
    pub beta: f64,
    pub heads: usize,
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            levels: DEFAULT_LEVELS.into_iter().collect(),
            beta: DEFAULT_BETA,
            heads: DEFAULT_HEADS,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::usage(msg));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!(
                "--lambda must be finite and ≥ 0, got {}",
                self.lambda
            ));
        }
        if self.levels.is_empty() {
            return bad("--levels must name at least one level".into());
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad(format!("--beta must be > 0, got {}", self.beta));
        }
        if self.heads == 0 {
            return bad("--heads must be ≥ 1".into());
        }
        for (flag, v) in [
            ("--score-threshold", self.score_threshold),
            ("--iou-threshold", self.iou_threshold),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{flag} must lie in (0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Parses `"2x3"` into `(2, 3)`.
pub fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h
        .trim()
        .parse()
        .map_err(|e| format!("bad height in {s:?}: {e}"))?;
    let w: usize = w
        .trim()
        .parse()
        .map_err(|e| format!("bad width in {s:?}: {e}"))?;
    if h == 0 || w == 0 {
        return Err(format!("grid {s:?} has a zero side"));
    }
    Ok((h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.levels, [0, 1, 2, 3, 4].into());
        assert_eq!(c.beta, 1.0);
        assert_eq!(c.heads, 8);
        assert_eq!(c.score_threshold, 0.5);
        assert_eq!(c.iou_threshold, 0.5);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn invariants() {
        let mut c = RunConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.lambda = 0.0;
        c.levels.clear();
        assert!(c.validate().is_err());
        let c = RunConfig {
            score_threshold: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            iou_threshold: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("2x3"), Ok((2, 3)));
        assert!(parse_grid("0x3").is_err());
        assert!(parse_grid("23").is_err());
    }
}
