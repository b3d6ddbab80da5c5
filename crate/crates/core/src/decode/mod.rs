//! Kinematic predictions from a fitted model: the per-bin optimal linear
//! estimator and the Kalman filter with AR(1) or stacked AR(2) dynamics.
//!
//! Each bin's observations enter through their information pair
//! `G_t = B' U_t^{-1} B` and `h_t = B' U_t^{-1} (c_t - β)` over the rows
//! available at that bin. The estimator is `G_t^{-1} h_t`; the filter uses
//! the equivalent information-form update, which needs only `p x p` solves
//! whatever the number of equations.

mod kalman;

use std::num::NonZeroUsize;
use std::path::Path;
use std::str::FromStr;

use lru::LruCache;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::datamodel::{Dataset, Trial, TrialId};
use crate::encode::{invert_with_repair, CovarianceLayout, FittedModel};
use crate::error::{Error, Result};
use crate::featurize::{FeatureCache, TrialFeatures};
use crate::schur::remove_positions;

pub use kalman::{embed_observation, kalman_decode, kalman_decode_with, kf_update, stack_ar2, transition, FilterState};
pub(crate) use kalman::{initial_state, KfKernel};

/// Waveform-block inverses kept per cache.
pub const WAVE_CACHE_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Paradigm {
    Ole,
    Bayes,
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ole" => Ok(Paradigm::Ole),
            "bayes" | "kf" => Ok(Paradigm::Bayes),
            other => Err(Error::Invalid(format!("unknown paradigm {other:?}"))),
        }
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Paradigm::Ole => "ole",
            Paradigm::Bayes => "bayes",
        })
    }
}

/// Kalman filter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KfInit {
    /// Start at the trial's first kinematics row with zero covariance.
    #[default]
    TrueVelocity,
    /// Start at zero with the state noise covariance.
    Zero,
}

/// Count rows available at an early bin, with their projected inverse.
#[derive(Debug, Clone)]
pub(crate) struct CountPattern {
    /// Model indices of the available count rows.
    pub rows: Vec<usize>,
    /// `B' P` over `rows` (`p x rows.len()`), `P` the inverse static block.
    pub q: DMatrix<f64>,
    /// `B' P B`.
    pub g: DMatrix<f64>,
}

/// A fitted model prepared for decoding.
#[derive(Debug, Clone)]
pub struct DecodingModel {
    pub fitted: FittedModel,
    pub(crate) layout: CovarianceLayout,
    /// Coefficient rows, one per equation.
    pub(crate) b: DMatrix<f64>,
    pub(crate) beta: Vec<f64>,
    /// Indexed by `min(t, last)`.
    pub(crate) patterns: Vec<CountPattern>,
    full_rank: bool,
}

impl DecodingModel {
    pub fn new(fitted: FittedModel) -> Result<Self> {
        let n = fitted.equations.len();
        if n == 0 {
            return Err(Error::Model("model has no equations".into()));
        }
        let p = fitted.meta.p;
        let layout = CovarianceLayout::new(
            &fitted.equations,
            &fitted.catalog,
            fitted.meta.bin_width,
            fitted.meta.static_cov,
        )?;
        let b = DMatrix::from_fn(n, p, |i, k| fitted.equations[i].coeff[k]);
        let beta: Vec<f64> = fitted.equations.iter().map(|e| e.intercept).collect();
        let full_rank = b.clone().svd(false, false).rank(1e-12 * b.amax().max(1e-300)) == p;

        let (full_inv, full_repaired) = invert_with_repair(&layout.count_block)?;
        let lags: Vec<usize> = layout.count_rows.iter().map(|&i| fitted.equations[i].spec.lag).collect();
        let last = lags.iter().cloned().max().unwrap_or(0);
        let patterns = (0..=last)
            .map(|t| {
                let missing: Vec<usize> = (0..lags.len()).filter(|&a| lags[a] > t).collect();
                let downdated = if full_repaired && !missing.is_empty() {
                    None
                } else {
                    remove_positions(&full_inv, &missing)
                };
                let (kept, inv) = match downdated {
                    Some(r) => r,
                    None => {
                        let kept: Vec<usize> = (0..lags.len()).filter(|&a| lags[a] <= t).collect();
                        let sub = DMatrix::from_fn(kept.len(), kept.len(), |x, y| {
                            layout.count_block[(kept[x], kept[y])]
                        });
                        (kept, invert_with_repair(&sub)?.0)
                    }
                };
                let rows: Vec<usize> = kept.iter().map(|&a| layout.count_rows[a]).collect();
                let bk = DMatrix::from_fn(rows.len(), p, |x, k| b[(rows[x], k)]);
                let q = bk.transpose() * &inv;
                let g = crate::linalg::symmetrize(&(&q * &bk));
                Ok(CountPattern { rows, q, g })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodingModel {
            fitted,
            layout,
            b,
            beta,
            patterns,
            full_rank,
        })
    }

    pub fn p(&self) -> usize {
        self.fitted.meta.p
    }

    pub fn n_equations(&self) -> usize {
        self.fitted.equations.len()
    }

    /// Whether the stacked coefficient matrix has full column rank.
    pub fn full_rank(&self) -> bool {
        self.full_rank
    }

    pub(crate) fn pattern(&self, t: usize) -> &CountPattern {
        &self.patterns[t.min(self.patterns.len() - 1)]
    }

    /// Information pair and number of rows used at bin `t`.
    pub fn bin_information(&self, features: &TrialFeatures, t: usize, cache: &mut WaveCache) -> Result<BinInfo> {
        let p = self.p();
        let mut g = DMatrix::zeros(p, p);
        let mut h = DVector::zeros(p);
        let eqs = &self.fitted.equations;

        let pat = self.pattern(t);
        if !pat.rows.is_empty() {
            g += &pat.g;
            for (x, &i) in pat.rows.iter().enumerate() {
                let r = eqs[i].observe(features, t).unwrap_or(f64::NAN) - self.beta[i];
                for k in 0..p {
                    h[k] += pat.q[(k, x)] * r;
                }
            }
        }

        let nw = self.layout.n_wave();
        let mut used = pat.rows.len();
        if nw > 0 {
            let mut avail = Vec::with_capacity(nw);
            let mut counts = vec![0u32; nw];
            let mut resid = Vec::with_capacity(nw);
            for (j, &i) in self.layout.wave_rows.iter().enumerate() {
                let eq = &eqs[i];
                if let Some(src) = t.checked_sub(eq.spec.lag) {
                    let c = features.counts(eq.spec.stream.electrode)[src];
                    if c > 0 {
                        counts[j] = c;
                        avail.push(j);
                        resid.push(eq.observe(features, t).unwrap_or(f64::NAN) - self.beta[i]);
                    }
                }
            }
            if !avail.is_empty() {
                let inv = self.wave_inverse(&avail, &counts, cache)?;
                // q = B_w' P  (p x m)
                let m = avail.len();
                let mut q = DMatrix::<f64>::zeros(p, m);
                for a in 0..m {
                    for c in 0..m {
                        let v = inv[(a, c)];
                        let row = self.layout.wave_rows[avail[c]];
                        for k in 0..p {
                            q[(k, a)] += self.b[(row, k)] * v;
                        }
                    }
                }
                for a in 0..m {
                    let row = self.layout.wave_rows[avail[a]];
                    for k in 0..p {
                        h[k] += q[(k, a)] * resid[a];
                        for l in 0..p {
                            g[(k, l)] += q[(k, a)] * self.b[(row, l)];
                        }
                    }
                }
                used += m;
            }
        }
        let g = crate::linalg::symmetrize(&g);
        Ok(BinInfo { g, h, used })
    }

    /// Inverse of the waveform block over the available rows `avail`
    /// (indices into the waveform rows) with observed counts `counts`.
    pub(crate) fn wave_inverse(&self, avail: &[usize], counts: &[u32], cache: &mut WaveCache) -> Result<DMatrix<f64>> {
        let nw = self.layout.n_wave();
        let m = avail.len();
        let k = nw - m;
        let eff = |j: usize, c: u32| self.layout.effective_count(j, c.max(1));
        // Removal from the full inverse costs about k N^2, a fresh factorization m^3 / 3.
        if k > 0 && (k * nw * nw) as f64 > (m * m * m) as f64 / 3.0 {
            let s: Vec<f64> = avail.iter().map(|&j| eff(j, counts[j])).collect();
            let sub = self.layout.waveform_block(avail, &s);
            return Ok(invert_with_repair(&sub)?.0);
        }
        let key: Vec<u32> = if self.fitted.meta.static_cov {
            Vec::new()
        } else {
            counts.iter().map(|&c| c.max(1)).collect()
        };
        let (full, repaired) = match cache.lru.get(&key) {
            Some(entry) => {
                cache.hits += 1;
                entry.clone()
            }
            None => {
                cache.misses += 1;
                let all: Vec<usize> = (0..nw).collect();
                let s: Vec<f64> = all.iter().map(|&j| eff(j, counts[j])).collect();
                let entry = invert_with_repair(&self.layout.waveform_block(&all, &s))?;
                cache.lru.put(key, entry.clone());
                entry
            }
        };
        if k == 0 {
            return Ok(full);
        }
        // A ridge on the full block would leak into the available rows, so
        // a repaired full inverse is never downdated.
        let missing: Vec<usize> = (0..nw).filter(|j| !avail.contains(j)).collect();
        match (!repaired).then(|| remove_positions(&full, &missing)).flatten() {
            Some((_, inv)) => Ok(inv),
            None => {
                let s: Vec<f64> = avail.iter().map(|&j| eff(j, counts[j])).collect();
                Ok(invert_with_repair(&self.layout.waveform_block(avail, &s))?.0)
            }
        }
    }
}

/// Memoized waveform-block inverses keyed by the (zero-filled) count vector.
pub struct WaveCache {
    lru: LruCache<Vec<u32>, (DMatrix<f64>, bool)>,
    pub hits: u64,
    pub misses: u64,
}

impl Default for WaveCache {
    fn default() -> Self {
        WaveCache {
            lru: LruCache::new(NonZeroUsize::new(WAVE_CACHE_CAPACITY).unwrap()),
            hits: 0,
            misses: 0,
        }
    }
}

/// Observation information at one bin.
#[derive(Debug, Clone)]
pub struct BinInfo {
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub used: usize,
}

/// Decoded kinematics for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub kin_hat: DMatrix<f64>,
    pub used_equations: Vec<usize>,
    pub nan_bins: usize,
    /// Smallest eigenvalue of the filtered covariance relative to its
    /// largest entry, over all bins (Kalman filter only; 0 otherwise).
    pub riccati_min_rel_eig: f64,
}

/// Solves `G k = h` by Cholesky; `None` when `G` is numerically singular.
pub(crate) fn solve_information(g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>> {
    let p = g.nrows();
    let scale = (0..p).map(|i| g[(i, i)]).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let ch = g.clone().cholesky()?;
    let l = ch.l_dirty();
    let min_pivot = (0..p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot < 1e-12 * scale {
        return None;
    }
    Some(ch.solve(h))
}

/// Per-bin optimal linear estimate; bins with fewer than `p` informative
/// rows yield NaN.
pub fn ole_decode(model: &DecodingModel, trial: &Trial, features: &TrialFeatures) -> Result<Prediction> {
    let mut cache = WaveCache::default();
    ole_decode_with(model, trial, features, &mut cache)
}

pub fn ole_decode_with(
    model: &DecodingModel,
    trial: &Trial,
    features: &TrialFeatures,
    cache: &mut WaveCache,
) -> Result<Prediction> {
    let p = model.p();
    let n = trial.n_bins();
    let mut kin_hat = DMatrix::from_element(n, p, f64::NAN);
    let mut used_equations = Vec::with_capacity(n);
    let mut nan_bins = 0;
    for t in 0..n {
        let info = model.bin_information(features, t, cache)?;
        used_equations.push(info.used);
        match solve_information(&info.g, &info.h) {
            Some(k) => {
                for c in 0..p {
                    kin_hat[(t, c)] = k[c];
                }
            }
            None => nan_bins += 1,
        }
    }
    if nan_bins > 0 {
        log::debug!("{nan_bins} of {n} bins could not be decoded");
    }
    Ok(Prediction {
        kin_hat,
        used_equations,
        nan_bins,
        riccati_min_rel_eig: 0.0,
    })
}

/// Decodes trials in parallel.
pub fn decode_trials(
    model: &DecodingModel,
    paradigm: Paradigm,
    init: KfInit,
    dataset: &Dataset,
    cache: &FeatureCache,
    ids: &[TrialId],
) -> Result<Vec<Prediction>> {
    ids.par_iter()
        .map(|&id| {
            let trial = dataset.trial(id);
            let features = cache.get(id);
            match paradigm {
                Paradigm::Ole => ole_decode(model, trial, features),
                Paradigm::Bayes => kalman_decode(model, trial, features, init),
            }
        })
        .collect()
}

/// Squared error summed over coordinates, averaged over decodable bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseReport {
    pub mse: f64,
    pub bins: usize,
    pub nan_bins: usize,
}

pub fn evaluate_mse(pred: &Prediction, trial: &Trial) -> Result<MseReport> {
    evaluate_mse_from(pred, trial, 0)
}

/// As [`evaluate_mse`], over bins `start..T` only.
pub fn evaluate_mse_from(pred: &Prediction, trial: &Trial, start: usize) -> Result<MseReport> {
    let truth = &trial.kinematics;
    if pred.kin_hat.shape() != truth.shape() {
        return Err(Error::Invalid(format!(
            "prediction is {:?}, kinematics {:?}",
            pred.kin_hat.shape(),
            truth.shape()
        )));
    }
    let (mut sum, mut bins, mut nan_bins) = (0.0, 0usize, 0usize);
    for t in start..truth.nrows() {
        let row = pred.kin_hat.row(t);
        if row.iter().any(|v| !v.is_finite()) {
            nan_bins += 1;
            continue;
        }
        sum += (0..truth.ncols()).map(|c| (row[c] - truth[(t, c)]).powi(2)).sum::<f64>();
        bins += 1;
    }
    if bins == 0 {
        return Err(Error::AllNan);
    }
    Ok(MseReport {
        mse: sum / bins as f64,
        bins,
        nan_bins,
    })
}

/// Writes `bin,k1_hat,...,kp_hat,k1_true,...,kp_true,used_equations`.
pub fn write_prediction_csv(path: impl AsRef<Path>, pred: &Prediction, trial: &Trial) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let p = trial.p();
    let mut header = vec!["bin".to_string()];
    header.extend((1..=p).map(|k| format!("k{k}_hat")));
    header.extend((1..=p).map(|k| format!("k{k}_true")));
    header.push("used_equations".into());
    w.write_record(&header).map_err(io)?;
    for t in 0..trial.n_bins() {
        let mut rec = vec![t.to_string()];
        rec.extend((0..p).map(|k| format!("{:?}", pred.kin_hat[(t, k)])));
        rec.extend((0..p).map(|k| format!("{:?}", trial.kinematics[(t, k)])));
        rec.push(pred.used_equations[t].to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
