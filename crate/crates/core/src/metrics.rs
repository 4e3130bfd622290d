//! Sample-based error measures: histogram KL divergence and exact W2.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Substitute mass for reference bins that are empty where `p` is not.
pub const KL_EPSILON: f64 = 1e-8;
/// Largest point count accepted by [`empirical_w2`].
pub const W2_MAX_POINTS: usize = 2000;

/// Regular grid over an axis-aligned box.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    bins: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl GridSpec {
    pub fn new(bins: Vec<usize>, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if bins.is_empty() || bins.len() != lo.len() || lo.len() != hi.len() {
            return Err(Error::invalid("grid needs one bin count and bound pair per dimension"));
        }
        if bins.contains(&0) {
            return Err(Error::invalid("bin counts must be at least 1"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::invalid("grid box is degenerate"));
        }
        Ok(GridSpec { bins, lo, hi })
    }

    /// Bounding box of `reference` (points as columns), padded by 5% of its
    /// extent on each side.
    pub fn around(reference: &Mat, bins: Vec<usize>) -> Result<Self> {
        if reference.cols() == 0 {
            return Err(Error::invalid("reference sample is empty"));
        }
        let d = reference.rows();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..d {
            for &v in reference.row(i) {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
            let pad = 0.05 * (hi[i] - lo[i]).max(1e-12);
            lo[i] -= pad;
            hi[i] += pad;
        }
        GridSpec::new(bins, lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.bins.len()
    }

    pub fn bins(&self) -> &[usize] {
        &self.bins
    }

    pub fn lower(&self) -> &[f64] {
        &self.lo
    }

    pub fn upper(&self) -> &[f64] {
        &self.hi
    }

    pub fn cell_count(&self) -> usize {
        self.bins.iter().product()
    }

    /// Volume of one cell.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim())
            .map(|i| (self.hi[i] - self.lo[i]) / self.bins[i] as f64)
            .product()
    }

    /// Cell centers as columns, first coordinate fastest.
    pub fn centers(&self) -> Mat {
        let total = self.cell_count();
        Mat::from_fn(self.dim(), total, |i, c| {
            let stride: usize = self.bins[..i].iter().product();
            let k = (c / stride) % self.bins[i];
            let w = (self.hi[i] - self.lo[i]) / self.bins[i] as f64;
            self.lo[i] + (k as f64 + 0.5) * w
        })
    }

    /// Normalized histogram of the columns of `points` and the number of
    /// points that fell outside the box (counted in the nearest edge bin).
    pub fn histogram(&self, points: &Mat) -> Result<(Vec<f64>, usize)> {
        if points.rows() != self.dim() {
            return Err(Error::shape("histogram", format!("{}-dim points for a {}-dim grid", points.rows(), self.dim())));
        }
        if points.cols() == 0 {
            return Err(Error::invalid("sample is empty"));
        }
        let mut h = vec![0.0; self.cell_count()];
        let mut outside = 0;
        for k in 0..points.cols() {
            let mut idx = 0;
            let mut stride = 1;
            let mut out = false;
            for i in 0..self.dim() {
                let u = (points[(i, k)] - self.lo[i]) / (self.hi[i] - self.lo[i]);
                if !(0.0..=1.0).contains(&u) {
                    out = true;
                }
                let b = ((u * self.bins[i] as f64).floor().max(0.0) as usize).min(self.bins[i] - 1);
                idx += b * stride;
                stride *= self.bins[i];
            }
            if out {
                outside += 1;
            }
            h[idx] += 1.0;
        }
        let n = points.cols() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        Ok((h, outside))
    }
}

/// `Σ h log(h/h̃)`; bins with `h = 0` add nothing, and empty `h̃` bins
/// under positive `h` count as [`KL_EPSILON`].
pub fn kl_from_histograms(h: &[f64], h_ref: &[f64]) -> Result<f64> {
    if h.len() != h_ref.len() {
        return Err(Error::shape("kl", "histograms differ in length"));
    }
    Ok(h.iter()
        .zip(h_ref)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / if *q > 0.0 { *q } else { KL_EPSILON }).ln())
        .sum())
}

/// Result of [`empirical_kl`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlResult {
    pub value: f64,
    /// Points of either sample that were clamped into edge bins.
    pub out_of_box: usize,
}

/// KL divergence between the normalized grid histograms of `p` and `q`.
pub fn empirical_kl(p: &Mat, q: &Mat, grid: &GridSpec) -> Result<KlResult> {
    let (hp, op) = grid.histogram(p)?;
    let (hq, oq) = grid.histogram(q)?;
    Ok(KlResult {
        value: kl_from_histograms(&hp, &hq)?,
        out_of_box: op + oq,
    })
}

/// Exact minimum-cost perfect matching for an `n x n` row-major cost
/// matrix by successive shortest augmenting paths with potentials.
/// Returns the column assigned to each row.
pub fn linear_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::shape("linear_assignment", "cost matrix is not square"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("assignment costs must be finite"));
    }
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let base = (i0 - 1) * n;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[base + j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    Ok(assign)
}

fn sq_cost(a: &Mat, b: &Mat) -> Vec<f64> {
    let n = a.cols();
    let d = a.rows();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (0..n).map(move |j| (0..d).map(|r| (a[(r, i)] - b[(r, j)]).powi(2)).sum::<f64>())
        })
        .collect()
}

/// `W₂` between the empirical measures of the columns of `a` and `b`.
pub fn empirical_w2(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("empirical_w2", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.cols();
    if n == 0 {
        return Err(Error::invalid("sample is empty"));
    }
    if n > W2_MAX_POINTS {
        return Err(Error::invalid(format!("{n} points exceed the exact assignment limit {W2_MAX_POINTS}")));
    }
    let cost = sq_cost(a, b);
    let assign = linear_assignment(&cost, n)?;
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

/// Machine-readable metric output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub grid: Vec<usize>,
    pub out_of_box: usize,
}
