//! Per-fold candidate scoring.
//!
//! A pass decodes a fold's validation trials once for a base model and, in
//! the same sweep over bins, for every option derived from it by adding
//! one equation or removing one equation. Each bin inverts only the base
//! model's covariance; every option's information pair follows from a
//! rank-one Schur update of that inverse, projected onto kinematic space.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::datamodel::{Dataset, FoldPlan, Trial, TrialId};
use crate::decode::{initial_state, solve_information, transition, KfInit, KfKernel, Paradigm};
use crate::encode::{
    catalog_from_residuals, fit_equation_with_residuals, fit_state_model, invert_with_repair, CovarianceLayout,
    EquationSpec, FitData, FitOptions, FittedEquation, StateModel,
};
use crate::error::Result;
use crate::featurize::{FeatureCache, TrialFeatures};
use crate::linalg::symmetrize;
use crate::schur::{project_addition, project_removal};

/// A fitted equation with its training residuals (count streams only).
#[derive(Debug)]
pub(crate) struct CachedFit {
    pub eq: FittedEquation,
    pub residuals: Vec<f64>,
}

/// Training data, validation trials and fitted-equation cache of one fold.
pub(crate) struct FoldContext<'a> {
    pub data: FitData<'a>,
    pub validation: Vec<TrialId>,
    pub state: Option<StateModel>,
    fits: Mutex<HashMap<EquationSpec, Option<Arc<CachedFit>>>>,
}

impl<'a> FoldContext<'a> {
    pub fn new(
        dataset: &'a Dataset,
        cache: &'a FeatureCache,
        plan: &FoldPlan,
        max_lag: usize,
        state_order: Option<usize>,
    ) -> Result<Self> {
        let data = FitData::new(dataset, cache, &dataset.trial_ids(&plan.train_sessions), max_lag);
        let state = match state_order {
            Some(order) => {
                let kins: Vec<&DMatrix<f64>> = data.trials().iter().map(|t| &t.kinematics).collect();
                Some(fit_state_model(&kins, order)?)
            }
            None => None,
        };
        Ok(FoldContext {
            data,
            validation: dataset.trial_ids(&plan.validate_sessions),
            state,
            fits: Mutex::new(HashMap::new()),
        })
    }

    /// Cached fits for `specs`; `None` marks equations this fold cannot fit.
    pub fn fits(&self, specs: &[EquationSpec], opts: &FitOptions) -> Vec<Option<Arc<CachedFit>>> {
        let missing: Vec<EquationSpec> = {
            let map = self.fits.lock().unwrap();
            let mut m: Vec<EquationSpec> = specs.iter().filter(|s| !map.contains_key(s)).copied().collect();
            m.sort();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let fitted: Vec<(EquationSpec, Option<Arc<CachedFit>>)> = missing
                .par_iter()
                .map(|&spec| match fit_equation_with_residuals(spec, &self.data, opts) {
                    Ok((eq, residuals)) => {
                        let residuals = if spec.is_count() { residuals } else { Vec::new() };
                        (spec, Some(Arc::new(CachedFit { eq, residuals })))
                    }
                    Err(e) => {
                        log::warn!("skipping {spec} in this fold: {e}");
                        (spec, None)
                    }
                })
                .collect();
            let mut map = self.fits.lock().unwrap();
            for (spec, fit) in fitted {
                map.insert(spec, fit);
            }
        }
        let map = self.fits.lock().unwrap();
        specs.iter().map(|s| map[s].clone()).collect()
    }
}

/// Options scored by one pass, relative to a base model.
#[derive(Debug, Clone)]
pub(crate) enum Options {
    /// Option 0 is the base; option `k + 1` adds candidate `k`.
    Add(Vec<EquationSpec>),
    /// Option 0 is the base; option `k + 1` drops base equation `idx[k]`.
    Remove(Vec<usize>),
}

impl Options {
    fn len(&self) -> usize {
        1 + match self {
            Options::Add(c) => c.len(),
            Options::Remove(r) => r.len(),
        }
    }
}

/// Scoring settings shared by every pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PassSettings {
    pub paradigm: Paradigm,
    pub init: KfInit,
    pub static_cov: bool,
}

/// Mean validation MSE of each option in this fold.
pub(crate) fn score_fold(
    fold: &FoldContext,
    dataset: &Dataset,
    cache: &FeatureCache,
    base: &[EquationSpec],
    options: &Options,
    opts: &FitOptions,
    settings: PassSettings,
) -> Result<Vec<f64>> {
    let base_fits: Vec<Arc<CachedFit>> = fold.fits(base, opts).into_iter().flatten().collect();
    // Removal indices refer to `base`; map them to the fitted subset.
    let base_pos: Vec<Option<usize>> = {
        let fitted: Vec<EquationSpec> = base_fits.iter().map(|f| f.eq.spec).collect();
        base.iter().map(|s| fitted.iter().position(|x| x == s)).collect()
    };
    let (cand_fits, kind) = match options {
        Options::Add(c) => (fold.fits(c, opts), OptionKind::Add),
        Options::Remove(_) => (Vec::new(), OptionKind::Remove),
    };
    let mut all: Vec<Arc<CachedFit>> = base_fits.clone();
    // Global index of each candidate among `all`, when it could be fitted.
    let cand_index: Vec<Option<usize>> = cand_fits
        .iter()
        .map(|f| {
            f.as_ref().map(|f| {
                all.push(f.clone());
                all.len() - 1
            })
        })
        .collect();
    let removals: Vec<Option<usize>> = match options {
        Options::Remove(idx) => idx.iter().map(|&i| base_pos[i]).collect(),
        Options::Add(_) => Vec::new(),
    };

    let eqs: Vec<FittedEquation> = all.iter().map(|f| f.eq.clone()).collect();
    let counts: Vec<&FittedEquation> = all.iter().filter(|f| f.eq.spec.is_count()).map(|f| &f.eq).collect();
    let residuals: Vec<&[f64]> = all
        .iter()
        .filter(|f| f.eq.spec.is_count())
        .map(|f| f.residuals.as_slice())
        .collect();
    let catalog = catalog_from_residuals(&counts, &residuals, &fold.data.moments);
    let layout = CovarianceLayout::new(&eqs, &catalog, fold.data.bin_width, settings.static_cov)?;
    let mut cpos = vec![usize::MAX; eqs.len()];
    let mut wpos = vec![usize::MAX; eqs.len()];
    for (a, &i) in layout.count_rows.iter().enumerate() {
        cpos[i] = a;
    }
    for (a, &i) in layout.wave_rows.iter().enumerate() {
        wpos[i] = a;
    }
    let pass = Pass {
        eqs: &eqs,
        n_base: base_fits.len(),
        layout: &layout,
        cpos,
        wpos,
        cand_index,
        removals,
        kind,
        p: fold.data.p,
        max_lag: fold.data.max_lag,
        settings,
        state: fold.state.as_ref(),
        n_options: options.len(),
    };
    let per_trial: Vec<Vec<f64>> = fold
        .validation
        .par_iter()
        .map(|&id| pass.trial(dataset.trial(id), cache.get(id), &mut CountPatterns::default()))
        .collect::<Result<_>>()?;
    let mut totals = vec![0.0; pass.n_options];
    for mse in per_trial {
        for (t, m) in totals.iter_mut().zip(mse) {
            *t += m;
        }
    }
    let n = fold.validation.len() as f64;
    Ok(totals.into_iter().map(|t| t / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OptionKind {
    Add,
    Remove,
}

struct Pass<'p> {
    eqs: &'p [FittedEquation],
    n_base: usize,
    layout: &'p CovarianceLayout,
    cpos: Vec<usize>,
    wpos: Vec<usize>,
    cand_index: Vec<Option<usize>>,
    removals: Vec<Option<usize>>,
    kind: OptionKind,
    p: usize,
    max_lag: usize,
    settings: PassSettings,
    state: Option<&'p StateModel>,
    n_options: usize,
}

/// Inverse of the base model's available count block, keyed by the bin's
/// position relative to the largest count lag.
#[derive(Default)]
struct CountPatterns {
    by_t: HashMap<usize, Arc<Block>>,
}

/// An inverted covariance block over some available base rows.
struct Block {
    /// Global equation indices of the rows.
    rows: Vec<usize>,
    inv: DMatrix<f64>,
    /// `B' P`, `p x rows`.
    q: DMatrix<f64>,
    /// Whether the block needed a ridge; such inverses are never updated.
    repaired: bool,
}

impl Block {
    fn new(rows: Vec<usize>, u: &DMatrix<f64>, eqs: &[FittedEquation], p: usize) -> Result<Self> {
        let (inv, repaired) = invert_with_repair(u)?;
        let m = rows.len();
        let mut q = DMatrix::zeros(p, m);
        for a in 0..m {
            for c in 0..m {
                let v = inv[(a, c)];
                let coeff = &eqs[rows[c]].coeff;
                for k in 0..p {
                    q[(k, a)] += coeff[k] * v;
                }
            }
        }
        Ok(Block { rows, inv, q, repaired })
    }
}

/// Base information at one bin plus what the options need.
struct BaseBin {
    g: DMatrix<f64>,
    h: DVector<f64>,
    count: Option<Arc<Block>>,
    wave: Option<Block>,
    /// `P (y - β)` per block.
    rc: Vec<f64>,
    rw: Vec<f64>,
    /// Effective counts of the waveform rows of `all`, by global index.
    s: Vec<f64>,
    /// Centered observations by global index (NaN when unavailable).
    y: Vec<f64>,
    avail: Vec<bool>,
}

impl<'p> Pass<'p> {
    fn count_entry(&self, i: usize, j: usize) -> f64 {
        self.layout.count_block[(self.cpos[i], self.cpos[j])]
    }

    fn wave_entry(&self, i: usize, j: usize, si: f64, sj: f64) -> f64 {
        self.layout.waveform_entry(self.wpos[i], self.wpos[j], si, sj)
    }

    fn base_bin(&self, features: &TrialFeatures, t: usize, patterns: &mut CountPatterns) -> Result<BaseBin> {
        let p = self.p;
        let n = self.eqs.len();
        let mut y = vec![f64::NAN; n];
        let mut s = vec![0.0; n];
        let mut avail = vec![false; n];
        for (i, eq) in self.eqs.iter().enumerate() {
            let Some(src) = t.checked_sub(eq.spec.lag) else {
                continue;
            };
            if eq.spec.is_count() {
                avail[i] = true;
            } else {
                let c = features.counts(eq.spec.stream.electrode)[src];
                if c == 0 {
                    continue;
                }
                avail[i] = true;
                s[i] = self.layout.effective_count(self.wpos[i], c);
            }
            y[i] = eq.observe(features, t).unwrap_or(f64::NAN) - eq.intercept;
        }
        let base_counts: Vec<usize> = (0..self.n_base).filter(|&i| avail[i] && self.eqs[i].spec.is_count()).collect();
        let base_waves: Vec<usize> = (0..self.n_base).filter(|&i| avail[i] && !self.eqs[i].spec.is_count()).collect();

        let count = if base_counts.is_empty() {
            None
        } else {
            let key = base_counts.len();
            Some(match patterns.by_t.get(&key) {
                Some(b) => b.clone(),
                None => {
                    let u = DMatrix::from_fn(key, key, |a, b| self.count_entry(base_counts[a], base_counts[b]));
                    let blk = Arc::new(Block::new(base_counts.clone(), &u, self.eqs, p)?);
                    patterns.by_t.insert(key, blk.clone());
                    blk
                }
            })
        };
        let wave = if base_waves.is_empty() {
            None
        } else {
            let m = base_waves.len();
            let u = DMatrix::from_fn(m, m, |a, b| {
                let (i, j) = (base_waves[a], base_waves[b]);
                self.wave_entry(i, j, s[i], s[j])
            });
            Some(Block::new(base_waves, &u, self.eqs, p)?)
        };

        let mut g = DMatrix::zeros(p, p);
        let mut h = DVector::zeros(p);
        let mut accumulate = |blk: &Block| -> Vec<f64> {
            let m = blk.rows.len();
            for a in 0..m {
                let row = blk.rows[a];
                let coeff = &self.eqs[row].coeff;
                for k in 0..p {
                    h[k] += blk.q[(k, a)] * y[row];
                    for l in 0..p {
                        g[(k, l)] += blk.q[(k, a)] * coeff[l];
                    }
                }
            }
            (0..m)
                .map(|a| (0..m).map(|c| blk.inv[(a, c)] * y[blk.rows[c]]).sum())
                .collect()
        };
        let rc = count.as_deref().map(&mut accumulate).unwrap_or_default();
        let rw = wave.as_ref().map(&mut accumulate).unwrap_or_default();
        Ok(BaseBin {
            g: symmetrize(&g),
            h,
            count,
            wave,
            rc,
            rw,
            s,
            y,
            avail,
        })
    }

    /// Information pair of the option adding equation `k` (global index).
    fn add_one(&self, bin: &BaseBin, k: usize, g: &mut DMatrix<f64>, h: &mut DVector<f64>) {
        let p = self.p;
        let is_count = self.eqs[k].spec.is_count();
        let (blk, r) = if is_count {
            (bin.count.as_deref(), &bin.rc)
        } else {
            (bin.wave.as_ref(), &bin.rw)
        };
        let entry = |j: usize| -> f64 {
            if is_count {
                self.count_entry(k, j)
            } else {
                self.wave_entry(k, j, bin.s[k], bin.s[j])
            }
        };
        if blk.is_some_and(|b| b.repaired) {
            self.rebuild(bin, k, Some(k), g, h);
            return;
        }
        let e = entry(k);
        let coeff = &self.eqs[k].coeff;
        let mut w: Vec<f64> = coeff.clone();
        let mut resid = bin.y[k];
        let mut schur = e;
        if let Some(blk) = blk {
            let m = blk.rows.len();
            let c: Vec<f64> = blk.rows.iter().map(|&j| entry(j)).collect();
            if c.iter().any(|&v| v != 0.0) {
                for a in 0..m {
                    let u: f64 = (0..m).map(|b| blk.inv[(a, b)] * c[b]).sum();
                    schur -= c[a] * u;
                    resid -= c[a] * r[a];
                    for kk in 0..p {
                        w[kk] -= blk.q[(kk, a)] * c[a];
                    }
                }
            }
        }
        if !(schur > 1e-10 * e.abs()) {
            // The augmented block is numerically singular; rebuild it the
            // way the decoder would.
            self.rebuild(bin, k, Some(k), g, h);
            return;
        }
        project_addition(g, h, &w[..p], resid, schur);
    }

    /// Fallback for the rank-one updates: inverts the block holding
    /// equation `k` directly, with `added` appended or `k` dropped.
    fn rebuild(&self, bin: &BaseBin, k: usize, added: Option<usize>, g: &mut DMatrix<f64>, h: &mut DVector<f64>) {
        let is_count = self.eqs[k].spec.is_count();
        let mut rows: Vec<usize> = if is_count {
            bin.count.as_ref().map(|b| b.rows.clone()).unwrap_or_default()
        } else {
            bin.wave.as_ref().map(|b| b.rows.clone()).unwrap_or_default()
        };
        match added {
            Some(a) => rows.push(a),
            None => rows.retain(|&r| r != k),
        }
        let m = rows.len();
        let u = DMatrix::from_fn(m, m, |a, b| {
            let (i, j) = (rows[a], rows[b]);
            if is_count {
                self.count_entry(i, j)
            } else {
                self.wave_entry(i, j, bin.s[i], bin.s[j])
            }
        });
        let Ok(blk) = Block::new(rows, &u, self.eqs, self.p) else {
            return;
        };
        // Replace the old block's contribution with the augmented one.
        let old = if is_count { bin.count.as_deref() } else { bin.wave.as_ref() };
        let mut gg = bin.g.clone();
        let mut hh = bin.h.clone();
        let p = self.p;
        let mut apply = |blk: &Block, sign: f64| {
            for a in 0..blk.rows.len() {
                let row = blk.rows[a];
                for kk in 0..p {
                    hh[kk] += sign * blk.q[(kk, a)] * bin.y[row];
                    for l in 0..p {
                        gg[(kk, l)] += sign * blk.q[(kk, a)] * self.eqs[row].coeff[l];
                    }
                }
            }
        };
        if let Some(old) = old {
            apply(old, -1.0);
        }
        apply(&blk, 1.0);
        *g = symmetrize(&gg);
        *h = hh;
    }

    /// Information pair of the option dropping equation `i` (global index).
    fn remove_one(&self, bin: &BaseBin, i: usize, g: &mut DMatrix<f64>, h: &mut DVector<f64>) {
        let (blk, r) = if self.eqs[i].spec.is_count() {
            (bin.count.as_deref(), &bin.rc)
        } else {
            (bin.wave.as_ref(), &bin.rw)
        };
        let Some(blk) = blk else { return };
        let Some(a) = blk.rows.iter().position(|&x| x == i) else {
            return;
        };
        if blk.repaired {
            self.rebuild(bin, i, None, g, h);
            return;
        }
        let q: Vec<f64> = (0..self.p).map(|k| blk.q[(k, a)]).collect();
        project_removal(g, h, &q, r[a], blk.inv[(a, a)]);
    }

    /// Per-option MSE of one validation trial.
    fn trial(&self, trial: &Trial, features: &TrialFeatures, patterns: &mut CountPatterns) -> Result<Vec<f64>> {
        let p = self.p;
        let n_bins = trial.n_bins();
        let n_opt = self.n_options;
        let mut sums = vec![0.0; n_opt];
        let mut bins = vec![0usize; n_opt];
        let (mut kernel, mut states) = match (self.settings.paradigm, self.state) {
            (Paradigm::Bayes, Some(state)) => {
                let (f, q) = transition(state);
                let init = initial_state(state, trial, self.settings.init);
                (Some(KfKernel::new(&f, &q, p)), vec![init; n_opt])
            }
            _ => (None, Vec::new()),
        };
        let mut g = DMatrix::zeros(p, p);
        let mut h = DVector::zeros(p);
        let mut est = vec![0.0; p];
        for t in 0..n_bins {
            let skip_update = kernel.is_some() && t == 0 && self.settings.init == KfInit::TrueVelocity;
            let bin = if skip_update {
                None
            } else {
                Some(self.base_bin(features, t, patterns)?)
            };
            for o in 0..n_opt {
                let mut finite = true;
                if let Some(bin) = &bin {
                    g.copy_from(&bin.g);
                    h.copy_from(&bin.h);
                    if o > 0 {
                        match self.kind {
                            OptionKind::Add => {
                                if let Some(k) = self.cand_index[o - 1] {
                                    if bin.avail[k] {
                                        self.add_one(bin, k, &mut g, &mut h);
                                    }
                                }
                            }
                            OptionKind::Remove => {
                                if let Some(i) = self.removals[o - 1] {
                                    if bin.avail[i] {
                                        self.remove_one(bin, i, &mut g, &mut h);
                                    }
                                }
                            }
                        }
                    }
                }
                match kernel.as_mut() {
                    Some(kernel) => {
                        let (mean, cov) = &mut states[o];
                        if bin.is_some() {
                            kernel.step(mean, cov, g.as_slice(), h.as_slice(), t > 0);
                        }
                        est.copy_from_slice(&mean[..p]);
                    }
                    None => match solve_information(&g, &h) {
                        Some(k) => est.copy_from_slice(k.as_slice()),
                        None => finite = false,
                    },
                }
                if t >= self.max_lag && finite && est.iter().all(|v| v.is_finite()) {
                    sums[o] += (0..p).map(|c| (est[c] - trial.kinematics[(t, c)]).powi(2)).sum::<f64>();
                    bins[o] += 1;
                }
            }
        }
        Ok(sums
            .into_iter()
            .zip(bins)
            .map(|(s, b)| if b == 0 { f64::INFINITY } else { s / b as f64 })
            .collect())
    }
}
