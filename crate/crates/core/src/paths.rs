//! Trajectories in input space along which regions are counted.
//!
//! The main construction is a closed loop through `A` translated copies of an
//! image, the copies lying on a circle of radius `r` pixels in translation
//! space. Open chains of whole-pixel shifts, loops through uniform noise with
//! given per-pixel statistics, and circles in the plane of a low-dimensional
//! input are provided for ablations.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discovery::SegmentTask;
use crate::error::{Error, Result};
use crate::model_io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

pub const DEFAULT_RADIUS: f64 = 4.0;
pub const DEFAULT_ANCHORS: usize = 8;
pub const DEFAULT_PATH_COUNT: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    pub path_id: usize,
    pub anchors: Vec<Tensor>,
    /// Whether the last anchor connects back to the first.
    pub closed: bool,
    /// Translation radius in pixels (shift size for open chains).
    pub radius: f64,
    pub base_label: Option<usize>,
}

impl PathSpec {
    pub fn new(path_id: usize, anchors: Vec<Tensor>, closed: bool, radius: f64) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::input(format!("path {path_id}: needs at least two anchors")));
        }
        let shape = anchors[0].shape();
        if anchors.iter().any(|a| a.shape() != shape) {
            return Err(Error::input(format!("path {path_id}: anchors differ in shape")));
        }
        let spec = PathSpec {
            path_id,
            anchors,
            closed,
            radius,
            base_label: None,
        };
        if let Some((a, b)) = spec.segment_indices().into_iter().find(|&(a, b)| spec.anchors[a].bit_eq(&spec.anchors[b])) {
            return Err(Error::input(format!("path {path_id}: anchors {a} and {b} coincide")));
        }
        Ok(spec)
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    /// `(from, to)` anchor indices of every segment, in traversal order.
    pub fn segment_indices(&self) -> Vec<(usize, usize)> {
        let a = self.anchors.len();
        let n = if self.closed { a } else { a - 1 };
        (0..n).map(|i| (i, (i + 1) % a)).collect()
    }

    pub fn segment_tasks(&self, tau: f64) -> Result<Vec<SegmentTask>> {
        self.segment_indices()
            .into_iter()
            .map(|(a, b)| {
                SegmentTask::new(
                    self.anchors[a].data().to_vec(),
                    self.anchors[b].data().to_vec(),
                    tau,
                )
            })
            .collect()
    }
}

/// Translation of anchor `a` on a circle of radius `r` sampled at `count`
/// equally spaced angles, as `(dx, dy)` in pixels. Components within 1e-12
/// of an integer are snapped to it so that axis-aligned anchors are exact
/// pixel shifts.
pub fn circular_shift(r: f64, a: usize, count: usize) -> (f64, f64) {
    let alpha = a as f64 * (2.0 * PI / count as f64);
    let snap = |v: f64| {
        let rounded = v.round();
        if (v - rounded).abs() <= 1e-12 {
            rounded + 0.0
        } else {
            v
        }
    };
    (snap(r * alpha.cos()), snap(r * alpha.sin()))
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Shifts a `[C, H, W]` image by `(dx, dy)` pixels (content moves towards
/// larger column/row indices for positive shifts).
///
/// The image is reflection-padded by `pad` pixels, sampled bilinearly at the
/// shifted positions and cropped back to `H x W`. Shifts larger than the
/// padding are rejected since they would read outside the padded canvas.
pub fn translate_image(img: &Tensor, shift: (f64, f64), pad: usize) -> Result<Tensor> {
    let [c, h, w] = match *img.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::input(format!("expected a [C, H, W] image, got {:?}", img.shape()))),
    };
    let (dx, dy) = shift;
    if !(dx.is_finite() && dy.is_finite()) || dx.abs() > pad as f64 || dy.abs() > pad as f64 {
        return Err(Error::input(format!("shift ({dx}, {dy}) exceeds padding {pad}")));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let src = img.data();
    let mut padded = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - pad as isize, w);
                padded[(ch * ph + y) * pw + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }

    let sample_axis = |pos: f64, len: usize| -> [(usize, f64); 2] {
        let base = pos.floor();
        let frac = pos - base;
        let i0 = (base as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        [(i0, 1.0 - frac), (i1, frac)]
    };

    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        let rows = sample_axis(y as f64 + pad as f64 - dy, ph);
        for x in 0..w {
            let cols = sample_axis(x as f64 + pad as f64 - dx, pw);
            for ch in 0..c {
                let mut acc = 0.0;
                let mut first = true;
                for &(ry, wy) in &rows {
                    for &(cx, wx) in &cols {
                        let weight = wy * wx;
                        if weight == 0.0 {
                            continue;
                        }
                        let v = padded[(ch * ph + ry) * pw + cx];
                        if first && weight == 1.0 {
                            acc = v;
                        } else {
                            acc += weight * v;
                        }
                        first = false;
                    }
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Smallest padding that absorbs a circular translation of radius `r`.
pub fn default_pad(r: f64) -> usize {
    r.ceil().max(0.0) as usize
}

/// One closed path per image through `anchors` circular translations.
///
/// Anchor 0 is the translation at angle 0, i.e. a shift of `(r, 0)`, so no
/// anchor is the untranslated image. Images whose translations coincide
/// (e.g. constant images) are dropped with a warning; the remaining paths keep
/// the index of their source image as `path_id`.
pub fn build_circular_paths(images: &[Tensor], r: f64, anchors: usize, pad: usize) -> Result<Vec<PathSpec>> {
    if images.is_empty() {
        return Err(Error::input("no images to build paths from"));
    }
    if anchors < 2 {
        return Err(Error::input("a closed path needs at least two anchors"));
    }
    let mut paths = Vec::with_capacity(images.len());
    for (id, img) in images.iter().enumerate() {
        let points = (0..anchors)
            .map(|a| translate_image(img, circular_shift(r, a, anchors), pad))
            .collect::<Result<Vec<_>>>()?;
        match PathSpec::new(id, points, true, r) {
            Ok(p) => paths.push(p),
            Err(e) => log::warn!("dropping degenerate path: {e}"),
        }
    }
    Ok(paths)
}

/// Closed paths through translations of uniform noise images whose pixels
/// have the given mean and standard deviation.
pub fn build_noise_paths(
    mean: &Tensor,
    std: &Tensor,
    count: usize,
    r: f64,
    anchors: usize,
    pad: usize,
    seed: u64,
) -> Result<Vec<PathSpec>> {
    if mean.shape() != std.shape() {
        return Err(Error::input("mean and std tensors differ in shape"));
    }
    if std.data().iter().any(|&s| s < 0.0) {
        return Err(Error::input("negative standard deviation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_width = 3f64.sqrt();
    let images = (0..count)
        .map(|_| {
            let data = mean
                .data()
                .iter()
                .zip(std.data())
                .map(|(&m, &s)| m + s * half_width * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            Tensor::new(mean.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    build_circular_paths(&images, r, anchors, pad)
}

/// Open chains through horizontal translates by `0, 1, …, shift_px` pixels.
pub fn build_open_paths(images: &[Tensor], shift_px: usize) -> Result<Vec<PathSpec>> {
    if shift_px < 1 {
        return Err(Error::input("open paths need shift_px >= 1"));
    }
    let mut paths = Vec::with_capacity(images.len());
    for (id, img) in images.iter().enumerate() {
        let points = (0..=shift_px)
            .map(|k| translate_image(img, (k as f64, 0.0), shift_px))
            .collect::<Result<Vec<_>>>()?;
        match PathSpec::new(id, points, false, 1.0) {
            Ok(p) => paths.push(p),
            Err(e) => log::warn!("dropping degenerate path: {e}"),
        }
    }
    Ok(paths)
}

/// Closed loops on circles of radius `r` around each center, in the plane of
/// the first two input coordinates.
pub fn build_orbit_paths(centers: &[Vec<f64>], r: f64, anchors: usize) -> Result<Vec<PathSpec>> {
    if anchors < 2 {
        return Err(Error::input("a closed path needs at least two anchors"));
    }
    if !(r > 0.0) {
        return Err(Error::input("orbit radius must be positive"));
    }
    centers
        .iter()
        .enumerate()
        .map(|(id, c)| {
            if c.len() < 2 {
                return Err(Error::input("orbit centers need at least two coordinates"));
            }
            let points = (0..anchors)
                .map(|a| {
                    let alpha = a as f64 * (2.0 * PI / anchors as f64);
                    let mut p = c.clone();
                    p[0] += r * alpha.cos();
                    p[1] += r * alpha.sin();
                    Tensor::from_vec(p)
                })
                .collect();
            PathSpec::new(id, points, true, r)
        })
        .collect()
}

/// Per-channel `(x − mean) / std` of a `[C, H, W]` tensor.
pub fn normalize_channels(img: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let [c, h, w] = match *img.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::input("normalization expects a [C, H, W] image")),
    };
    if mean.len() != c || std.len() != c || std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::input("need one positive std and one mean per channel"));
    }
    let mut out = img.clone();
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        for v in plane {
            *v = (*v - mean[ch]) / std[ch];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathIndexEntry {
    pub path_id: usize,
    pub anchor_files: Vec<String>,
    pub r: f64,
    #[serde(rename = "A")]
    pub anchor_count: usize,
    pub closed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_label: Option<usize>,
}

pub const INDEX_FILE: &str = "index.json";

/// Writes every anchor as `.rten` into `dir` plus an `index.json` listing them.
pub fn write_paths(dir: impl AsRef<Path>, paths: &[PathSpec]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(paths.len());
    for p in paths {
        let mut files = Vec::with_capacity(p.anchors.len());
        for (a, anchor) in p.anchors.iter().enumerate() {
            let name = format!("path{:05}_a{a:02}.rten", p.path_id);
            write_tensor(anchor, dir.join(&name))?;
            files.push(name);
        }
        entries.push(PathIndexEntry {
            path_id: p.path_id,
            anchor_files: files,
            r: p.radius,
            anchor_count: p.anchors.len(),
            closed: p.closed,
            base_label: p.base_label,
        });
    }
    let index = dir.join(INDEX_FILE);
    let mut text = serde_json::to_vec_pretty(&entries)?;
    text.push(b'\n');
    fs::write(&index, text).map_err(|e| Error::io(&index, e))?;
    Ok(index)
}

/// Reads paths from an index file (or a directory containing `index.json`).
pub fn read_paths(index: impl AsRef<Path>) -> Result<Vec<PathSpec>> {
    let mut index = index.as_ref().to_path_buf();
    if index.is_dir() {
        index = index.join(INDEX_FILE);
    }
    let text = fs::read(&index).map_err(|e| Error::io(&index, e))?;
    let entries: Vec<PathIndexEntry> =
        serde_json::from_slice(&text).map_err(|e| Error::format(&index, e.to_string()))?;
    let dir = index.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            if e.anchor_files.len() != e.anchor_count {
                return Err(Error::format(&index, format!("path {}: A does not match anchor list", e.path_id)));
            }
            let anchors = e
                .anchor_files
                .iter()
                .map(|f| read_tensor(dir.join(f)))
                .collect::<Result<Vec<_>>>()?;
            let mut p = PathSpec::new(e.path_id, anchors, e.closed, e.r)?;
            p.base_label = e.base_label;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|i| (i % w) as f64 + 10.0 * (i / w % h) as f64 + 0.5 * (i / (h * w)) as f64).collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn zero_shift_is_identity() {
        let img = ramp(3, 6, 5);
        let out = translate_image(&img, (0.0, 0.0), 4).unwrap();
        assert!(out.bit_eq(&img));
    }

    #[test]
    fn integer_shift_matches_roll() {
        let img = ramp(2, 5, 7);
        let out = translate_image(&img, (1.0, 0.0), 2).unwrap();
        for ch in 0..2 {
            for y in 0..5 {
                for x in 1..7 {
                    let want = img.data()[(ch * 5 + y) * 7 + x - 1];
                    assert_eq!(out.data()[(ch * 5 + y) * 7 + x], want);
                }
            }
        }
        let down = translate_image(&img, (0.0, -2.0), 2).unwrap();
        for y in 0..3 {
            for x in 0..7 {
                assert_eq!(down.data()[y * 7 + x], img.data()[(y + 2) * 7 + x]);
            }
        }
    }

    #[test]
    fn shift_beyond_pad_rejected() {
        let img = ramp(1, 4, 4);
        assert!(translate_image(&img, (2.5, 0.0), 2).is_err());
        assert!(translate_image(&img, (0.0, 0.0), 0).is_ok());
    }

    #[test]
    fn half_pixel_shift_averages_neighbours() {
        let img = ramp(1, 3, 4);
        let out = translate_image(&img, (0.5, 0.0), 1).unwrap();
        assert!((out.data()[2] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn circular_shift_angles() {
        assert_eq!(circular_shift(4.0, 0, 8), (4.0, 0.0));
        assert_eq!(circular_shift(4.0, 2, 8), (0.0, 4.0));
        assert_eq!(circular_shift(4.0, 4, 8), (-4.0, 0.0));
        let (dx, dy) = circular_shift(4.0, 1, 8);
        assert!((dx - 8f64.sqrt()).abs() < 1e-12 && (dy - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn reflection_padding_has_no_zero_fill() {
        let img = Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        let img = {
            let mut t = img;
            t.data_mut()[4] = 2.0;
            t
        };
        let out = translate_image(&img, (2.0, 1.0), 2).unwrap();
        assert!(out.data().iter().all(|&v| v >= 1.0));
    }

    #[test]
    fn minimal_loop_and_counts() {
        let imgs = vec![ramp(1, 8, 8), ramp(1, 8, 8), ramp(2, 8, 8)];
        let two = build_circular_paths(&imgs[..1], 4.0, 2, 4).unwrap();
        assert_eq!(two[0].segment_indices(), vec![(0, 1), (1, 0)]);
        let paths = build_circular_paths(&imgs, DEFAULT_RADIUS, DEFAULT_ANCHORS, default_pad(DEFAULT_RADIUS)).unwrap();
        let tasks: usize = paths.iter().map(|p| p.segment_tasks(1e-6).unwrap().len()).sum();
        assert_eq!(tasks, 24);
        let last = paths[0].segment_indices().last().copied().unwrap();
        assert_eq!(last.1, 0);
    }

    #[test]
    fn constant_image_dropped() {
        let imgs = vec![Tensor::new(vec![1, 4, 4], vec![0.3; 16]).unwrap(), ramp(1, 4, 4)];
        let paths = build_circular_paths(&imgs, 2.0, 4, 2).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].path_id, 1);
    }

    #[test]
    fn noise_paths_deterministic_and_bounded() {
        let mean = Tensor::new(vec![1, 6, 6], (0..36).map(|i| i as f64 / 36.0).collect()).unwrap();
        let std = Tensor::new(vec![1, 6, 6], vec![0.2; 36]).unwrap();
        let a = build_noise_paths(&mean, &std, 3, 2.0, 4, 2, 11).unwrap();
        let b = build_noise_paths(&mean, &std, 3, 2.0, 4, 2, 11).unwrap();
        assert_eq!(a, b);
        let zero = Tensor::new(vec![1, 6, 6], vec![0.0; 36]).unwrap();
        let flat = Tensor::new(vec![1, 6, 6], vec![0.5; 36]).unwrap();
        assert!(build_noise_paths(&flat, &zero, 2, 2.0, 4, 2, 1).unwrap().is_empty());
    }

    #[test]
    fn open_chain_lengths() {
        let img = ramp(1, 5, 5);
        let one = build_open_paths(std::slice::from_ref(&img), 1).unwrap();
        assert_eq!(one[0].segment_indices().len(), 1);
        let three = build_open_paths(std::slice::from_ref(&img), 3).unwrap();
        assert_eq!(three[0].anchor_count(), 4);
        assert_eq!(three[0].segment_indices().len(), 3);
        assert!(!three[0].closed);
        assert!(build_open_paths(&[img], 0).is_err());
    }

    #[test]
    fn orbit_paths_close() {
        let paths = build_orbit_paths(&[vec![1.0, -1.0]], 0.5, 8).unwrap();
        let p = &paths[0];
        assert_eq!(p.anchors[0].data(), &[1.5, -1.0]);
        assert_eq!(p.segment_indices().len(), 8);
    }

    #[test]
    fn normalization() {
        let img = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let out = normalize_channels(&img, &[2.0, 10.0], &[1.0, 5.0]).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let paths = build_circular_paths(&[ramp(1, 5, 5)], 2.0, 4, 2).unwrap();
        let index = write_paths(dir.path(), &paths).unwrap();
        let back = read_paths(&index).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].anchors.len(), 4);
        assert!(back[0].anchors.iter().zip(&paths[0].anchors).all(|(a, b)| a.bit_eq(b)));
        let json: serde_json::Value = serde_json::from_slice(&fs::read(index).unwrap()).unwrap();
        assert_eq!(json[0]["A"], 4);
        assert_eq!(json[0]["closed"], true);
    }
}
