//! Adaptive discovery of the linear regions crossed by a line segment.
//!
//! Starting at `x0`, each step solves for the nearest ReLU hyperplane ahead
//! along the unit direction (one joint forward pass of point and direction),
//! moves exactly onto it and repeats until the traversed region is the one
//! containing `x1`. Every region longer than `tau` along the segment is found;
//! shorter ones are stepped over.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Crossing, Network};
use crate::pattern::ActivationPattern;
use crate::tensor::norm2;

/// Minimum accepted step along the unit direction.
pub const DEFAULT_TAU: f64 = 1e-6;
/// Segments traced per batch.
pub const DEFAULT_BATCH: usize = 1024;

/// A segment `x0 -> x1` to trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTask {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub unit_dir: Vec<f64>,
    /// `‖x1 − x0‖₂`.
    pub span: f64,
    pub tau: f64,
}

impl SegmentTask {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, tau: f64) -> Result<Self> {
        if x0.len() != x1.len() {
            return Err(Error::input(format!(
                "segment endpoints differ in length ({} vs {})",
                x0.len(),
                x1.len()
            )));
        }
        if x0.iter().chain(&x1).any(|v| !v.is_finite()) {
            return Err(Error::input("segment endpoints must be finite"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::input(format!("tau must be positive, got {tau}")));
        }
        let diff: Vec<f64> = x1.iter().zip(&x0).map(|(b, a)| b - a).collect();
        let span = norm2(&diff);
        if !(span > 0.0) {
            return Err(Error::input("segment endpoints coincide"));
        }
        let unit_dir = diff.iter().map(|v| v / span).collect();
        Ok(SegmentTask {
            x0,
            x1,
            unit_dir,
            span,
            tau,
        })
    }

    /// Same segment traversed from `x1` to `x0`.
    pub fn reversed(&self) -> SegmentTask {
        SegmentTask::new(self.x1.clone(), self.x0.clone(), self.tau).expect("valid segment")
    }

    /// Point at distance `s` from `x0` along the unit direction.
    pub fn point_at_distance(&self, s: f64) -> Vec<f64> {
        self.x0
            .iter()
            .zip(&self.unit_dir)
            .map(|(a, u)| a + s * u)
            .collect()
    }

    /// Point at fraction `t` of the span, interpolated between the endpoints.
    pub fn point_at(&self, t: f64) -> Vec<f64> {
        self.x0
            .iter()
            .zip(&self.x1)
            .map(|(a, b)| a + t * (b - a))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Reached the region containing `x1`.
    None,
    /// No hyperplane lies ahead yet the region differs from that of `x1`.
    NoFiniteLambda,
    /// The next hyperplane lies beyond `x1`.
    Overshoot,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::None => "none",
            Termination::NoFiniteLambda => "no_finite_lambda",
            Termination::Overshoot => "overshoot",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossingRecord {
    /// Fraction of the span at which the hyperplane is crossed.
    pub t: f64,
    /// Step length in unit-direction units.
    pub lambda: f64,
    pub pattern_after: ActivationPattern,
    /// ReLU layer ordinal of the crossed hyperplane.
    pub layer: usize,
    pub neuron: usize,
    pub termination: Termination,
}

/// Ordered partition of `[0, 1]` into linear regions.
#[derive(Debug, Clone)]
pub struct RegionTrace {
    /// `0 = t_0 < t_1 < … < t_D = 1`.
    pub boundaries: Vec<f64>,
    pub records: Vec<CrossingRecord>,
    /// Pattern sampled at the midpoint of each interval.
    pub patterns: Vec<ActivationPattern>,
    pub termination: Termination,
    /// `x0` lies within `tau` of a hyperplane it is about to cross.
    pub start_on_boundary: bool,
    pub span: f64,
    pub tau: f64,
}

impl RegionTrace {
    /// Number of regions D.
    pub fn density(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_complete(&self) -> bool {
        self.termination == Termination::None
    }

    /// Interval lengths in t-units.
    pub fn lengths(&self) -> Vec<f64> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Accepted step lengths (unit-direction units), excluding the terminal record.
    pub fn lambdas(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.termination == Termination::None)
            .map(|r| r.lambda)
            .collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.boundaries
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    }
}

/// Nearest hyperplane crossing strictly further than `tau` along `unit_dir`.
///
/// Candidates behind the point, within `tau`, or parallel to the direction are
/// discarded; `lambda` is `+∞` when none remain.
pub fn find_lambda(net: &Network, x: &[f64], unit_dir: &[f64], tau: f64) -> Result<Crossing> {
    let n = norm2(unit_dir);
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!("direction has norm {n}, expected 1")));
    }
    Ok(net.next_crossing(x, unit_dir, tau)?.0)
}

/// Enumerates every region longer than `task.tau` crossed by the segment.
pub fn find_linear_regions(net: &Network, task: &SegmentTask) -> Result<RegionTrace> {
    let SegmentTask {
        x0,
        x1,
        unit_dir,
        span,
        tau,
    } = task;
    let (span, tau) = (*span, *tau);

    let target = net.pattern(x1)?;
    let start = net.pattern(x0)?;
    let (mut next, mut current) = net.next_crossing(x0, unit_dir, tau)?;
    let start_on_boundary = current != start;

    let mut s = 0.0;
    let mut boundaries = vec![0.0];
    let mut records = Vec::new();
    let termination = loop {
        if current == target {
            break Termination::None;
        }
        if !next.is_finite() {
            records.push(terminal_record(next, current.clone(), Termination::NoFiniteLambda));
            break Termination::NoFiniteLambda;
        }
        let s_next = s + next.lambda;
        if s_next >= span - tau {
            // The hyperplane sits at x1 (within tau) or beyond it.
            if s_next > span + tau {
                records.push(terminal_record(next, current.clone(), Termination::Overshoot));
                break Termination::Overshoot;
            }
            break Termination::None;
        }
        s = s_next;
        let x = task.point_at_distance(s);
        let (after, pattern) = net.next_crossing(&x, unit_dir, tau)?;
        let t = s / span;
        boundaries.push(t);
        records.push(CrossingRecord {
            t,
            lambda: next.lambda,
            pattern_after: pattern.clone(),
            layer: next.layer,
            neuron: next.neuron,
            termination: Termination::None,
        });
        next = after;
        current = pattern;
    };
    boundaries.push(1.0);

    let patterns = boundaries
        .windows(2)
        .map(|w| net.pattern(&task.point_at(0.5 * (w[0] + w[1]))))
        .collect::<Result<Vec<_>>>()?;

    Ok(RegionTrace {
        boundaries,
        records,
        patterns,
        termination,
        start_on_boundary,
        span,
        tau,
    })
}

fn terminal_record(c: Crossing, pattern: ActivationPattern, termination: Termination) -> CrossingRecord {
    CrossingRecord {
        t: 1.0,
        lambda: c.lambda,
        pattern_after: pattern,
        layer: c.layer,
        neuron: c.neuron,
        termination,
    }
}

/// Traces `tasks` in batches of `batch_size`, segments within a batch in
/// parallel. Output order matches input order; per-task failures do not
/// affect other tasks.
pub fn trace_batch(
    net: &Network,
    tasks: &[SegmentTask],
    batch_size: usize,
) -> Result<Vec<Result<RegionTrace>>> {
    if tasks.is_empty() {
        return Err(Error::input("no segments to trace"));
    }
    if batch_size == 0 {
        return Err(Error::input("batch size must be at least 1"));
    }
    let mut out = Vec::with_capacity(tasks.len());
    for chunk in tasks.chunks(batch_size) {
        let traced: Vec<Result<RegionTrace>> = chunk
            .par_iter()
            .map(|task| find_linear_regions(net, task))
            .collect();
        out.extend(traced);
    }
    Ok(out)
}

/// One JSON-lines record per traced segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub segment_id: usize,
    pub path_id: usize,
    pub segment_index: usize,
    pub density: usize,
    pub boundaries_t: Vec<f64>,
    /// Non-normal terminations; empty for a complete trace.
    pub terminations: Vec<Termination>,
    pub start_on_boundary: bool,
    pub lambda_min: Option<f64>,
    pub lambda_median: Option<f64>,
    /// Set when tracing failed; the other fields are then empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TraceLine {
    pub fn new(segment_id: usize, path_id: usize, segment_index: usize, trace: &RegionTrace) -> Self {
        let mut lambdas = trace.lambdas();
        lambdas.sort_by(f64::total_cmp);
        TraceLine {
            segment_id,
            path_id,
            segment_index,
            density: trace.density(),
            boundaries_t: trace.boundaries.clone(),
            terminations: match trace.termination {
                Termination::None => Vec::new(),
                other => vec![other],
            },
            start_on_boundary: trace.start_on_boundary,
            lambda_min: lambdas.first().copied(),
            lambda_median: (!lambdas.is_empty()).then(|| lambdas[(lambdas.len() - 1) / 2]),
            error: None,
        }
    }

    pub fn failed(segment_id: usize, path_id: usize, segment_index: usize, error: &Error) -> Self {
        TraceLine {
            segment_id,
            path_id,
            segment_index,
            density: 0,
            boundaries_t: Vec::new(),
            terminations: Vec::new(),
            start_on_boundary: false,
            lambda_min: None,
            lambda_median: None,
            error: Some(error.to_string()),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.terminations.is_empty() && self.error.is_none()
    }
}
