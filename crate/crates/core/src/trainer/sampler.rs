//! Random rectangular region boundaries and jittered positives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::graph::GraphIndexRTree;
use crate::prompt::BoundaryPrompt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Side lengths are drawn from `[s_min, s_max]` times the bbox extent.
    pub s_min: f64,
    pub s_max: f64,
    /// Minimum number of spatial tokens inside an accepted boundary.
    pub m_min: usize,
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            s_min: 0.08,
            s_max: 0.25,
            m_min: 10,
            max_retries: 1000,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min > 0.0 && self.s_min <= self.s_max && self.s_max <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sampler sizes need 0 < s_min <= s_max <= 1, got {} and {}",
                self.s_min, self.s_max
            )));
        }
        Ok(())
    }
}

/// Draw an axis-aligned rectangle lying inside `bbox`, rejecting those with
/// fewer than `m_min` spatial tokens.
pub fn sample_region_boundary(
    rng: &mut impl Rng,
    bbox: &Rect,
    config: &SamplerConfig,
    gir: &GraphIndexRTree,
) -> Result<BoundaryPrompt> {
    config.validate()?;
    for _ in 0..config.max_retries.max(1) {
        let w = bbox.width() * rng.random_range(config.s_min..=config.s_max);
        let h = bbox.height() * rng.random_range(config.s_min..=config.s_max);
        let x0 = bbox.min_x + rng.random_range(0.0..=1.0) * (bbox.width() - w);
        let y0 = bbox.min_y + rng.random_range(0.0..=1.0) * (bbox.height() - h);
        let rect = Rect::new(x0, y0, x0 + w, y0 + h);
        if gir.tree().count_in_rect(&rect) >= config.m_min {
            return BoundaryPrompt::rect(rect);
        }
    }
    Err(Error::SamplerExhausted(config.max_retries))
}

/// Translate by `t * (w cos θ, h sin θ)` with `θ` uniform and `t` uniform in
/// `[0, ρ]`, where `w`, `h` are the sides of the boundary's bounding box.
pub fn make_positive(boundary: &BoundaryPrompt, rng: &mut impl Rng, rho: f64) -> BoundaryPrompt {
    let mbr = boundary.mbr();
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let t = if rho > 0.0 { rng.random_range(0.0..=rho) } else { 0.0 };
    boundary.translate(t * mbr.width() * theta.cos(), t * mbr.height() * theta.sin())
}

/// Area of intersection of two rectangles.
pub fn overlap_area(a: &Rect, b: &Rect) -> f64 {
    let w = (a.max_x.min(b.max_x) - a.min_x.max(b.min_x)).max(0.0);
    let h = (a.max_y.min(b.max_y) - a.min_y.max(b.min_y)).max(0.0);
    w * h
}
