//! Summary statistics for per-path measures.

use crate::error::{Error, Result};

/// Right-continuous empirical CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct EcdfSummary {
    sorted: Vec<f64>,
}

pub fn ecdf(values: &[f64]) -> Result<EcdfSummary> {
    if values.is_empty() {
        return Err(Error::input("ECDF of an empty sample"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("ECDF sample contains non-finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(EcdfSummary { sorted })
}

impl EcdfSummary {
    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted
    }

    /// Fraction of the sample `<= x`.
    pub fn evaluate(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.n() as f64
    }

    /// Smallest sample value `v` with `evaluate(v) >= q`.
    pub fn quantile(&self, q: f64) -> f64 {
        let n = self.n();
        let k = (q.clamp(0.0, 1.0) * n as f64).ceil() as usize;
        self.sorted[k.clamp(1, n) - 1]
    }

    /// `(value, F(value))` at every distinct sample value, ascending.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.n() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, &v) in self.sorted.iter().enumerate() {
            let f = (i + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 = f,
                _ => out.push((v, f)),
            }
        }
        out
    }
}

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
///
/// Returns [`Error::Input`] when either argument has no rank variance, for
/// which the coefficient is undefined.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!("spearman: lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::input("spearman needs at least two observations"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::input("spearman: non-finite values"));
    }
    pearson(&average_ranks(a), &average_ranks(b))
        .ok_or_else(|| Error::input("spearman undefined: an argument has zero rank variance"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Deviation,
    Density,
}

/// Per-path measures of two training settings over the same paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRun {
    pub path_ids: Vec<usize>,
    pub dev1: Vec<f64>,
    pub dev2: Vec<f64>,
    pub den1: Vec<f64>,
    pub den2: Vec<f64>,
}

impl PairedRun {
    pub fn new(path_ids: Vec<usize>, dev1: Vec<f64>, dev2: Vec<f64>, den1: Vec<f64>, den2: Vec<f64>) -> Result<Self> {
        let n = path_ids.len();
        if [dev1.len(), dev2.len(), den1.len(), den2.len()].iter().any(|&l| l != n) {
            return Err(Error::input("paired run columns differ in length"));
        }
        if n == 0 {
            return Err(Error::input("paired run has no paths"));
        }
        Ok(PairedRun {
            path_ids,
            dev1,
            dev2,
            den1,
            den2,
        })
    }

    /// The same run with the two settings exchanged.
    pub fn swapped(&self) -> PairedRun {
        PairedRun {
            path_ids: self.path_ids.clone(),
            dev1: self.dev2.clone(),
            dev2: self.dev1.clone(),
            den1: self.den2.clone(),
            den2: self.den1.clone(),
        }
    }

    pub fn differences(&self, metric: Metric) -> Vec<f64> {
        let (a, b) = match metric {
            Metric::Deviation => (&self.dev1, &self.dev2),
            Metric::Density => (&self.den1, &self.den2),
        };
        a.iter().zip(b).map(|(x, y)| y - x).collect()
    }
}

/// Fraction of paths where the second setting is strictly larger.
pub fn positive_fraction(run: &PairedRun, metric: Metric) -> f64 {
    let diffs = run.differences(metric);
    diffs.iter().filter(|&&d| d > 0.0).count() as f64 / diffs.len() as f64
}

/// Lower median: element `(n − 1) / 2` of the sorted sample.
pub fn lower_median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::input("median of an empty sample"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[(v.len() - 1) / 2])
}

/// Mean and (population) standard deviation of per-run lower medians.
pub fn median_summary(runs: &[Vec<f64>]) -> Result<(f64, f64)> {
    if runs.is_empty() {
        return Err(Error::input("median summary over zero runs"));
    }
    let medians = runs.iter().map(|r| lower_median(r)).collect::<Result<Vec<_>>>()?;
    let n = medians.len() as f64;
    let mean = medians.iter().sum::<f64>() / n;
    let var = medians.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}
