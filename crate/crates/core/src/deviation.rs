//! Absolute deviation: the integral of `|f^k − a^k|` along a segment, where
//! `a` linearly interpolates `f(x0)` and `f(x1)`.
//!
//! On each region the integrand is `|c + m t|` for constants `c`, `m` built
//! from frozen-pattern evaluations at the segment endpoints, so the integral
//! is computed exactly by splitting at the sign change.

use serde::{Deserialize, Serialize};

use crate::discovery::{RegionTrace, SegmentTask};
use crate::error::{Error, Result};
use crate::net::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationScore {
    pub path_id: usize,
    pub segment_id: usize,
    /// One non-negative value per logit, in logit × input-distance units.
    pub per_logit: Vec<f64>,
    pub l2: f64,
    pub density: usize,
    /// Computed from a trace that did not terminate normally.
    pub partial: bool,
}

impl DeviationScore {
    pub fn new(path_id: usize, segment_id: usize, per_logit: Vec<f64>, density: usize, partial: bool) -> Self {
        let l2 = l2_norm(&per_logit);
        DeviationScore {
            path_id,
            segment_id,
            per_logit,
            l2,
            density,
            partial,
        }
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Endpoint values of every region's affine component.
#[derive(Debug, Clone)]
pub struct SegmentAffineData {
    /// `f(x0)`.
    pub f0_x0: Vec<f64>,
    /// `f(x1)`.
    pub f1_x1: Vec<f64>,
    /// `f_ε(x0)` per region.
    pub region_x0: Vec<Vec<f64>>,
    /// `f_ε(x1)` per region.
    pub region_x1: Vec<Vec<f64>>,
}

impl SegmentAffineData {
    pub fn compute(net: &Network, task: &SegmentTask, trace: &RegionTrace) -> Result<Self> {
        let f0_x0 = net.logits(&task.x0)?;
        let f1_x1 = net.logits(&task.x1)?;
        let mut region_x0 = Vec::with_capacity(trace.patterns.len());
        let mut region_x1 = Vec::with_capacity(trace.patterns.len());
        for p in &trace.patterns {
            region_x0.push(net.forward_frozen(p, &task.x0)?);
            region_x1.push(net.forward_frozen(p, &task.x1)?);
        }
        Ok(SegmentAffineData {
            f0_x0,
            f1_x1,
            region_x0,
            region_x1,
        })
    }

    /// Offset `c` and slope `m` of `f_ε^k − a^k` as a function of `t`.
    pub fn coefficients(&self, region: usize, logit: usize) -> (f64, f64) {
        let fe0 = self.region_x0[region][logit];
        let fe1 = self.region_x1[region][logit];
        let c = fe0 - self.f0_x0[logit];
        let m = fe1 - fe0 - self.f1_x1[logit] + self.f0_x0[logit];
        (c, m)
    }
}

/// `a(π(t)) = f(x0) + t (f(x1) − f(x0))`.
pub fn interpolant_at(f0_x0: &[f64], f1_x1: &[f64], t: f64) -> Vec<f64> {
    f0_x0
        .iter()
        .zip(f1_x1)
        .map(|(a, b)| a + t * (b - a))
        .collect()
}

/// `∫_{t_a}^{t_b} |c + m t| dt`, exact.
pub fn region_deviation(c: f64, m: f64, t_a: f64, t_b: f64) -> f64 {
    debug_assert!(t_a <= t_b);
    let split = if m == 0.0 {
        t_a
    } else {
        (-c / m).clamp(t_a, t_b)
    };
    let piece = |lo: f64, hi: f64| (c * (hi - lo) + m * (hi - lo) * (hi + lo) / 2.0).abs();
    piece(t_a, split) + piece(split, t_b)
}

/// Per-logit absolute deviation along `task`, using the regions of `trace`.
pub fn absolute_deviation(net: &Network, task: &SegmentTask, trace: &RegionTrace) -> Result<DeviationScore> {
    let data = SegmentAffineData::compute(net, task, trace)?;
    let per_logit = integrate(&data, &trace.boundaries, task.span);
    Ok(DeviationScore::new(0, 0, per_logit, trace.density(), !trace.is_complete()))
}

/// Same as [`absolute_deviation`] for a partition given only by its
/// boundaries; region patterns are re-derived at interval midpoints.
pub fn deviation_on_boundaries(net: &Network, task: &SegmentTask, boundaries: &[f64]) -> Result<Vec<f64>> {
    if boundaries.len() < 2
        || boundaries[0] != 0.0
        || *boundaries.last().expect("non-empty") != 1.0
        || boundaries.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::input("boundaries must increase strictly from 0 to 1"));
    }
    let f0_x0 = net.logits(&task.x0)?;
    let f1_x1 = net.logits(&task.x1)?;
    let mut region_x0 = Vec::with_capacity(boundaries.len() - 1);
    let mut region_x1 = Vec::with_capacity(boundaries.len() - 1);
    for w in boundaries.windows(2) {
        let p = net.pattern(&task.point_at(0.5 * (w[0] + w[1])))?;
        region_x0.push(net.forward_frozen(&p, &task.x0)?);
        region_x1.push(net.forward_frozen(&p, &task.x1)?);
    }
    let data = SegmentAffineData {
        f0_x0,
        f1_x1,
        region_x0,
        region_x1,
    };
    Ok(integrate(&data, boundaries, task.span))
}

fn integrate(data: &SegmentAffineData, boundaries: &[f64], span: f64) -> Vec<f64> {
    let mut per_logit = vec![0.0; data.f0_x0.len()];
    for (region, w) in boundaries.windows(2).enumerate() {
        for (logit, acc) in per_logit.iter_mut().enumerate() {
            let (c, m) = data.coefficients(region, logit);
            *acc += region_deviation(c, m, w[0], w[1]);
        }
    }
    for v in &mut per_logit {
        *v *= span;
    }
    per_logit
}

/// Sums segment scores of one path; `l2` is recomputed on the sum.
pub fn path_deviation(scores: &[DeviationScore]) -> Result<DeviationScore> {
    let first = scores
        .first()
        .ok_or_else(|| Error::input("no segment scores for path"))?;
    let mut per_logit = vec![0.0; first.per_logit.len()];
    let mut density = 0;
    let mut partial = false;
    for s in scores {
        if s.path_id != first.path_id {
            return Err(Error::input(format!(
                "scores mix paths {} and {}",
                first.path_id, s.path_id
            )));
        }
        if s.per_logit.len() != per_logit.len() {
            return Err(Error::input("scores disagree on logit count"));
        }
        for (acc, v) in per_logit.iter_mut().zip(&s.per_logit) {
            *acc += v;
        }
        density += s.density;
        partial |= s.partial;
    }
    Ok(DeviationScore::new(first.path_id, first.segment_id, per_logit, density, partial))
}

/// One JSON-lines record per path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationLine {
    pub path_id: usize,
    pub density: usize,
    pub deviation_l2: f64,
    pub deviation_per_logit: Vec<f64>,
    pub partial: bool,
}

impl From<&DeviationScore> for DeviationLine {
    fn from(s: &DeviationScore) -> Self {
        DeviationLine {
            path_id: s.path_id,
            density: s.density,
            deviation_l2: s.l2,
            deviation_per_logit: s.per_logit.clone(),
            partial: s.partial,
        }
    }
}
