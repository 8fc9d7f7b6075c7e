//! Whole-path measurement: number the segments of a path set, trace them and
//! aggregate density and deviation per path.

use rayon::prelude::*;

use crate::deviation::{deviation_on_boundaries, DeviationScore};
use crate::discovery::{trace_batch, SegmentTask, TraceLine};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::paths::PathSpec;

/// A segment with its global and per-path numbering.
#[derive(Debug, Clone)]
pub struct NumberedSegment {
    pub segment_id: usize,
    pub path_id: usize,
    pub segment_index: usize,
    pub task: SegmentTask,
}

/// Segments of every path in order; `segment_id` counts across paths.
pub fn enumerate_segments(paths: &[PathSpec], tau: f64) -> Result<Vec<NumberedSegment>> {
    let mut out = Vec::new();
    for p in paths {
        for (segment_index, task) in p.segment_tasks(tau)?.into_iter().enumerate() {
            out.push(NumberedSegment {
                segment_id: out.len(),
                path_id: p.path_id,
                segment_index,
                task,
            });
        }
    }
    Ok(out)
}

/// Traces every segment; failed segments yield a line carrying the error.
pub fn trace_lines(net: &Network, segments: &[NumberedSegment], batch: usize) -> Result<Vec<TraceLine>> {
    let tasks: Vec<SegmentTask> = segments.iter().map(|s| s.task.clone()).collect();
    let traces = trace_batch(net, &tasks, batch)?;
    Ok(segments
        .iter()
        .zip(traces)
        .map(|(s, t)| match t {
            Ok(trace) => TraceLine::new(s.segment_id, s.path_id, s.segment_index, &trace),
            Err(e) => TraceLine::failed(s.segment_id, s.path_id, s.segment_index, &e),
        })
        .collect())
}

/// Per-path deviation from previously computed trace lines, in path order.
///
/// A path with a failed segment yields an error entry. Lines that do not
/// line up with `segments` make the whole call fail.
pub fn deviation_from_lines(
    net: &Network,
    segments: &[NumberedSegment],
    lines: &[TraceLine],
) -> Result<Vec<Result<DeviationScore>>> {
    if segments.len() != lines.len() {
        return Err(Error::input(format!(
            "trace has {} segments but the paths define {}",
            lines.len(),
            segments.len()
        )));
    }
    for (s, l) in segments.iter().zip(lines) {
        if (s.segment_id, s.path_id, s.segment_index) != (l.segment_id, l.path_id, l.segment_index) {
            return Err(Error::input(format!(
                "trace line {} (path {}, segment {}) does not match path segment {} (path {}, segment {})",
                l.segment_id, l.path_id, l.segment_index, s.segment_id, s.path_id, s.segment_index
            )));
        }
    }
    let per_segment: Vec<Result<Vec<f64>>> = segments
        .par_iter()
        .zip(lines)
        .map(|(s, l)| match &l.error {
            Some(e) => Err(Error::input(format!("segment {} failed to trace: {e}", s.segment_id))),
            None => deviation_on_boundaries(net, &s.task, &l.boundaries_t),
        })
        .collect();

    let mut out = Vec::new();
    let mut start = 0;
    while start < segments.len() {
        let path_id = segments[start].path_id;
        let mut end = start;
        while end < segments.len() && segments[end].path_id == path_id {
            end += 1;
        }
        out.push(path_score(path_id, &per_segment[start..end], &lines[start..end]));
        start = end;
    }
    Ok(out)
}

fn path_score(path_id: usize, devs: &[Result<Vec<f64>>], lines: &[TraceLine]) -> Result<DeviationScore> {
    let mut per_logit: Vec<f64> = Vec::new();
    for d in devs {
        match d {
            Ok(v) => {
                if per_logit.is_empty() {
                    per_logit = vec![0.0; v.len()];
                }
                for (acc, x) in per_logit.iter_mut().zip(v) {
                    *acc += x;
                }
            }
            Err(e) => return Err(Error::input(format!("path {path_id}: {e}"))),
        }
    }
    let density = lines.iter().map(|l| l.density).sum();
    let partial = lines.iter().any(|l| !l.is_complete());
    Ok(DeviationScore::new(path_id, lines[0].segment_id, per_logit, density, partial))
}

/// Traces every path and returns its density and deviation.
pub fn measure_paths(net: &Network, paths: &[PathSpec], tau: f64, batch: usize) -> Result<Vec<Result<DeviationScore>>> {
    let segments = enumerate_segments(paths, tau)?;
    let lines = trace_lines(net, &segments, batch)?;
    deviation_from_lines(net, &segments, &lines)
}
