//! Model search: cross-validated risk, stepwise replacement per stream,
//! greedy pruning and the staged joint search over counts and waveform
//! moments.

mod engine;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::{selection_sessions, Dataset, FoldPlan, TrialId};
use crate::decode::{decode_trials, evaluate_mse_from, DecodingModel, KfInit, Paradigm};
use crate::encode::{
    estimate_noise_catalog, fit_equation, fit_state_model, EquationSpec, FitData, FitOptions, FittedModel, ModelMeta,
};
use crate::error::{Error, Result};
use crate::featurize::{FeatureCache, StreamId, StreamKind, TransformKind, MOMENT_ORDERS};

use engine::{score_fold, FoldContext, Options, PassSettings};

/// The candidate equations offered to the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpace {
    pub n_electrodes: usize,
    pub n_features: usize,
    /// Lags run over `0..=max_lag`.
    pub max_lag: usize,
    /// Offer the square root of the absolute value for waveform streams.
    pub sqrt_waveform_abs: bool,
}

impl ModelSpace {
    pub fn new(dataset: &Dataset, opts: &FitOptions) -> Self {
        ModelSpace {
            n_electrodes: dataset.n_electrodes,
            n_features: dataset.n_features(),
            max_lag: opts.max_lag,
            sqrt_waveform_abs: opts.sqrt_waveform_abs,
        }
    }

    pub fn transforms(&self, stream: StreamId) -> Vec<TransformKind> {
        if stream.is_count() || self.sqrt_waveform_abs {
            TransformKind::ALL.to_vec()
        } else {
            vec![TransformKind::Identity, TransformKind::Ace]
        }
    }

    /// Candidates for one stream, ordered by lag and then transform. This
    /// order breaks ties between equal-risk candidates.
    pub fn candidates(&self, stream: StreamId) -> Vec<EquationSpec> {
        let transforms = self.transforms(stream);
        (0..=self.max_lag)
            .flat_map(|lag| transforms.iter().map(move |&t| EquationSpec::new(stream, lag, t)))
            .collect()
    }

    pub fn streams_per_electrode(&self) -> usize {
        1 + self.n_features * MOMENT_ORDERS
    }

    pub fn candidates_per_electrode(&self) -> usize {
        StreamId::all_for(0, self.n_features)
            .into_iter()
            .map(|s| self.candidates(s).len())
            .sum()
    }

    /// The stream of `kind` on every electrode.
    pub fn family(&self, kind: StreamKind) -> Vec<StreamId> {
        (0..self.n_electrodes).map(|e| StreamId { electrode: e, kind }).collect()
    }

    /// Every waveform-moment stream kind, feature-major.
    pub fn moment_kinds(&self) -> Vec<StreamKind> {
        (0..self.n_features)
            .flat_map(|f| {
                (1..=MOMENT_ORDERS).map(move |m| StreamKind::Moment {
                    feature: f as u8,
                    order: m as u8,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepOrder {
    #[default]
    Ascending,
    /// A fresh seeded shuffle of the electrodes at every sweep.
    Seeded,
}

impl FromStr for SweepOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascending" => Ok(SweepOrder::Ascending),
            "seeded" | "random" => Ok(SweepOrder::Seeded),
            other => Err(Error::Invalid(format!("unknown sweep order {other:?}"))),
        }
    }
}

/// Settings of a model search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub paradigm: Paradigm,
    pub folds: Vec<FoldPlan>,
    pub max_sweeps: usize,
    /// Maximum number of removals per prune; `None` prunes until no
    /// removal helps.
    pub prune_passes: Option<usize>,
    pub rng_seed: u64,
    /// Minimum relative risk improvement for accepting a move.
    pub tolerance: f64,
    pub sweep_order: SweepOrder,
    /// Autoregressive order of the state model (Bayesian decoding).
    pub state_order: usize,
    pub kf_init: KfInit,
    pub static_cov: bool,
    pub fit: FitOptions,
    /// Number of scored candidates re-checked by a full refit.
    pub audit_samples: usize,
}

impl SearchConfig {
    pub fn new(paradigm: Paradigm, folds: Vec<FoldPlan>) -> Self {
        SearchConfig {
            paradigm,
            folds,
            max_sweeps: 10,
            prune_passes: None,
            rng_seed: 0,
            tolerance: 0.0,
            sweep_order: SweepOrder::Ascending,
            state_order: 1,
            kf_init: KfInit::TrueVelocity,
            static_cov: false,
            fit: FitOptions::default(),
            audit_samples: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(Error::Invalid("max_sweeps must be at least 1".into()));
        }
        if self.folds.is_empty() {
            return Err(Error::Invalid("at least one fold is required".into()));
        }
        if !(self.tolerance >= 0.0 && self.tolerance < 1.0) {
            return Err(Error::Invalid(format!("tolerance {} outside [0, 1)", self.tolerance)));
        }
        if !(1..=2).contains(&self.state_order) {
            return Err(Error::Invalid(format!("state order {} must be 1 or 2", self.state_order)));
        }
        Ok(())
    }

    fn state_order(&self) -> Option<usize> {
        (self.paradigm == Paradigm::Bayes).then_some(self.state_order)
    }

    fn settings(&self) -> PassSettings {
        PassSettings {
            paradigm: self.paradigm,
            init: self.kf_init,
            static_cov: self.static_cov,
        }
    }
}

/// Cross-validated risk of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    /// Mean over folds of the mean validation-trial MSE.
    pub cv_risk: f64,
    pub per_trial_mse: BTreeMap<TrialId, f64>,
    pub fold_risks: Vec<f64>,
    pub n_equations: usize,
    /// Validation bins the decoder could not estimate.
    pub nan_bins: usize,
}

/// Rejects models holding two equations for the same stream.
pub fn check_model(specs: &[EquationSpec]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in specs {
        if !seen.insert(s.stream) {
            return Err(Error::Model(format!("stream {} appears more than once", s.stream)));
        }
    }
    Ok(())
}

fn canonical(mut specs: Vec<EquationSpec>) -> Vec<EquationSpec> {
    specs.sort();
    specs
}

/// Fits `specs` on `ids`, skipping equations that cannot be fitted.
pub fn fit_selected(
    specs: &[EquationSpec],
    dataset: &Dataset,
    cache: &FeatureCache,
    ids: &[TrialId],
    config: &SearchConfig,
) -> Result<FittedModel> {
    let data = FitData::new(dataset, cache, ids, config.fit.max_lag);
    fit_on(specs, &data, config)
}

fn fit_on(specs: &[EquationSpec], data: &FitData, config: &SearchConfig) -> Result<FittedModel> {
    let fitted: Vec<_> = specs.par_iter().map(|&s| (s, fit_equation(s, data, &config.fit))).collect();
    let mut equations = Vec::with_capacity(specs.len());
    for (spec, fit) in fitted {
        match fit {
            Ok(eq) => equations.push(eq),
            Err(e) => log::warn!("skipping {spec}: {e}"),
        }
    }
    if equations.is_empty() {
        return Err(Error::Model("no equation of the model could be fitted".into()));
    }
    let catalog = estimate_noise_catalog(&equations, data)?;
    let state = match config.state_order() {
        Some(order) => {
            let kins: Vec<&DMatrix<f64>> = data.trials().iter().map(|t| &t.kinematics).collect();
            Some(fit_state_model(&kins, order)?)
        }
        None => None,
    };
    Ok(FittedModel {
        meta: ModelMeta {
            bin_width: data.bin_width,
            p: data.p,
            n_electrodes: data.n_electrodes,
            n_features: data.n_features,
            max_lag: data.max_lag,
            static_cov: config.static_cov,
        },
        equations,
        catalog,
        state,
    })
}

/// Per-trial MSE of `fitted` over `ids`, scored from bin `max_lag` on.
/// Trials without any decodable bin score infinity.
pub fn trial_mse(
    fitted: FittedModel,
    dataset: &Dataset,
    cache: &FeatureCache,
    ids: &[TrialId],
    config: &SearchConfig,
) -> Result<(BTreeMap<TrialId, f64>, usize)> {
    let start = fitted.meta.max_lag;
    let model = DecodingModel::new(fitted)?;
    let preds = decode_trials(&model, config.paradigm, config.kf_init, dataset, cache, ids)?;
    let mut out = BTreeMap::new();
    let mut nan_bins = 0;
    for (&id, pred) in ids.iter().zip(&preds) {
        let mse = match evaluate_mse_from(pred, dataset.trial(id), start) {
            Ok(r) => {
                nan_bins += r.nan_bins;
                r.mse
            }
            Err(Error::AllNan) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        out.insert(id, mse);
    }
    Ok((out, nan_bins))
}

/// Cross-validated risk by refitting and decoding every fold from scratch.
pub fn cv_risk(specs: &[EquationSpec], dataset: &Dataset, cache: &FeatureCache, config: &SearchConfig) -> Result<RiskReport> {
    if specs.is_empty() {
        return Err(Error::Model("model has no equations".into()));
    }
    check_model(specs)?;
    config.validate()?;
    let folds: Vec<(f64, BTreeMap<TrialId, f64>, usize)> = config
        .folds
        .par_iter()
        .map(|plan| {
            let train = dataset.trial_ids(&plan.train_sessions);
            let validate = dataset.trial_ids(&plan.validate_sessions);
            let fitted = fit_selected(specs, dataset, cache, &train, config)?;
            let (mse, nan) = trial_mse(fitted, dataset, cache, &validate, config)?;
            let mean = mse.values().sum::<f64>() / mse.len() as f64;
            Ok((mean, mse, nan))
        })
        .collect::<Result<_>>()?;
    let mut report = RiskReport {
        cv_risk: 0.0,
        per_trial_mse: BTreeMap::new(),
        fold_risks: Vec::new(),
        n_equations: specs.len(),
        nan_bins: 0,
    };
    for (mean, mse, nan) in folds {
        report.fold_risks.push(mean);
        report.per_trial_mse.extend(mse);
        report.nan_bins += nan;
    }
    report.cv_risk = report.fold_risks.iter().sum::<f64>() / report.fold_risks.len() as f64;
    if !report.cv_risk.is_finite() {
        return Err(Error::Model("every fold is degenerate for this model".into()));
    }
    Ok(report)
}

/// Fits on the selection sessions and scores the held-out test trials.
pub fn test_mse(
    specs: &[EquationSpec],
    dataset: &Dataset,
    cache: &FeatureCache,
    config: &SearchConfig,
) -> Result<BTreeMap<TrialId, f64>> {
    let train = dataset.trial_ids(&selection_sessions(&config.folds));
    let test = dataset.trial_ids(&config.folds[0].test_sessions);
    if test.is_empty() {
        return Err(Error::Invalid("the fold plan has no test trials".into()));
    }
    let fitted = fit_selected(specs, dataset, cache, &train, config)?;
    Ok(trial_mse(fitted, dataset, cache, &test, config)?.0)
}

/// The lag in `lags` maximizing the mean R² of the identity equations of
/// `streams`, fitted on `ids`. Ties go to the smaller lag.
pub fn best_uniform_lag(
    dataset: &Dataset,
    cache: &FeatureCache,
    ids: &[TrialId],
    streams: &[StreamId],
    lags: &[usize],
    opts: &FitOptions,
) -> Result<usize> {
    let max_lag = lags.iter().copied().max().ok_or_else(|| Error::Invalid("no lag offered".into()))?;
    if lags.len() == 1 {
        return Ok(lags[0]);
    }
    let data = FitData::new(dataset, cache, ids, opts.max_lag.max(max_lag));
    let opts = FitOptions {
        max_lag: data.max_lag,
        ..*opts
    };
    let mut best: Option<(usize, f64)> = None;
    let mut sorted = lags.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for lag in sorted {
        let r2: Vec<f64> = streams
            .par_iter()
            .filter_map(|&s| fit_equation(EquationSpec::new(s, lag, TransformKind::Identity), &data, &opts).ok())
            .map(|e| e.r_squared)
            .collect();
        if r2.is_empty() {
            continue;
        }
        let mean = r2.iter().sum::<f64>() / r2.len() as f64;
        log::debug!("uniform lag {lag}: mean R² {mean:.6}");
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((lag, mean));
        }
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::Model("no stream could be fitted at any lag".into()))
}

/// A scored model kept for the refit audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditSample {
    pub model: Vec<EquationSpec>,
    pub engine_risk: f64,
    pub refit_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub samples: Vec<AuditSample>,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

/// Risks accepted by one search procedure, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub label: String,
    pub accepted: Vec<f64>,
}

impl Trace {
    pub fn is_monotone(&self) -> bool {
        self.accepted.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Models produced by the staged joint search.
#[derive(Debug, Clone, PartialEq)]
pub struct JointResult {
    /// Optimal spike-count model.
    pub counts: Vec<EquationSpec>,
    /// Stepwise-then-pruned model of each waveform family, searched alone.
    pub families: Vec<(StreamKind, Vec<EquationSpec>)>,
    /// Each family combined with `counts`, pruned over waveform equations.
    pub combined: Vec<(StreamKind, Vec<EquationSpec>)>,
    /// Counts plus every first-order family model, without pruning.
    pub unpruned: Vec<EquationSpec>,
    /// Final model after merging and pruning.
    pub model: Vec<EquationSpec>,
}

/// A search session over one dataset and fold plan.
///
/// Candidate risks come from a single decoding sweep per fold and
/// decision; the audit re-scores a seeded sample of them by refitting.
pub struct Search<'a> {
    dataset: &'a Dataset,
    cache: &'a FeatureCache,
    config: SearchConfig,
    space: ModelSpace,
    folds: Vec<FoldContext<'a>>,
    log: String,
    traces: Vec<Trace>,
    rng: ChaCha8Rng,
    audit_rng: ChaCha8Rng,
    scored: u64,
    reservoir: Vec<(Vec<EquationSpec>, f64)>,
}

impl<'a> Search<'a> {
    pub fn new(dataset: &'a Dataset, cache: &'a FeatureCache, config: SearchConfig) -> Result<Self> {
        config.validate()?;
        let folds = config
            .folds
            .iter()
            .map(|plan| FoldContext::new(dataset, cache, plan, config.fit.max_lag, config.state_order()))
            .collect::<Result<Vec<_>>>()?;
        let mut log = String::new();
        writeln!(
            log,
            "search paradigm={} folds={} seed={} tolerance={} max_sweeps={} state_order={} static_cov={}",
            config.paradigm,
            config.folds.len(),
            config.rng_seed,
            config.tolerance,
            config.max_sweeps,
            config.state_order,
            config.static_cov
        )
        .unwrap();
        Ok(Search {
            dataset,
            cache,
            space: ModelSpace::new(dataset, &config.fit),
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            audit_rng: ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x5eed_a0d1),
            config,
            folds,
            log,
            traces: Vec::new(),
            scored: 0,
            reservoir: Vec::new(),
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn space(&self) -> &ModelSpace {
        &self.space
    }

    /// The search log, one line per decision.
    pub fn log(&self) -> &str {
        &self.log
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn note(&mut self, line: &str) {
        self.log.push_str(line);
        self.log.push('\n');
    }

    /// Mean fold risk of every option.
    fn score(&mut self, base: &[EquationSpec], options: &Options) -> Result<Vec<f64>> {
        let settings = self.config.settings();
        let started = std::time::Instant::now();
        let per_fold: Vec<Vec<f64>> = self
            .folds
            .par_iter()
            .map(|fold| score_fold(fold, self.dataset, self.cache, base, options, &self.config.fit, settings))
            .collect::<Result<_>>()?;
        let n = per_fold.len() as f64;
        let risks: Vec<f64> = (0..per_fold[0].len())
            .map(|o| per_fold.iter().map(|f| f[o]).sum::<f64>() / n)
            .collect();
        log::debug!(
            "scored {} options on a base of {} equations in {:.3} s",
            risks.len(),
            base.len(),
            started.elapsed().as_secs_f64()
        );
        for (o, &r) in risks.iter().enumerate() {
            self.offer_audit(base, options, o, r);
        }
        Ok(risks)
    }

    fn option_model(base: &[EquationSpec], options: &Options, o: usize) -> Vec<EquationSpec> {
        let mut m = base.to_vec();
        if o > 0 {
            match options {
                Options::Add(c) => m.push(c[o - 1]),
                Options::Remove(idx) => {
                    m.remove(idx[o - 1]);
                }
            }
        }
        canonical(m)
    }

    /// Reservoir sampling over every scored model with a finite risk.
    fn offer_audit(&mut self, base: &[EquationSpec], options: &Options, o: usize, risk: f64) {
        let k = self.config.audit_samples;
        if k == 0 || !risk.is_finite() {
            return;
        }
        let n = self.scored;
        self.scored += 1;
        if (n as usize) < k {
            self.reservoir.push((Self::option_model(base, options, o), risk));
        } else {
            let j = self.audit_rng.random_range(0..=n);
            if (j as usize) < k {
                self.reservoir[j as usize] = (Self::option_model(base, options, o), risk);
            }
        }
    }

    /// Selection risk of `model`.
    pub fn risk(&mut self, model: &[EquationSpec]) -> Result<f64> {
        check_model(model)?;
        Ok(self.score(model, &Options::Add(Vec::new()))?[0])
    }

    /// Best replacement for `stream`'s equation in `model` together with
    /// the risk of the model holding it. `None` when no candidate beats
    /// the incumbent by the tolerance.
    pub fn best_equation_for_stream(
        &mut self,
        model: &[EquationSpec],
        stream: StreamId,
    ) -> Result<Option<(EquationSpec, f64)>> {
        self.best_for_stream(model, stream, f64::INFINITY)
    }

    /// As [`Search::best_equation_for_stream`], also requiring the winner
    /// to beat `bound`, the last accepted risk of the calling procedure.
    fn best_for_stream(
        &mut self,
        model: &[EquationSpec],
        stream: StreamId,
        bound: f64,
    ) -> Result<Option<(EquationSpec, f64)>> {
        let incumbent = model.iter().find(|s| s.stream == stream).copied();
        let base: Vec<EquationSpec> = model.iter().filter(|s| s.stream != stream).copied().collect();
        let candidates = self.space.candidates(stream);
        let risks = if base.is_empty() {
            // Without a base model every option is a one-equation model.
            let mut r = vec![f64::INFINITY];
            for &c in &candidates {
                r.push(self.risk(&[c])?);
            }
            r
        } else {
            self.score(&base, &Options::Add(candidates.clone()))?
        };
        let current = match incumbent {
            Some(inc) => candidates
                .iter()
                .position(|&c| c == inc)
                .map(|i| risks[i + 1])
                .ok_or_else(|| Error::Model(format!("{inc} lies outside the model space")))?,
            None => risks[0],
        }
        .min(bound);
        let mut best: Option<(usize, f64)> = None;
        for (i, &r) in risks[1..].iter().enumerate() {
            if best.is_none_or(|(_, b)| r < b) {
                best = Some((i, r));
            }
        }
        let Some((i, r)) = best else { return Ok(None) };
        let accept = Some(candidates[i]) != incumbent && improves(r, current, self.config.tolerance);
        let line = format!(
            "  stream={stream} incumbent={} current={current:.12e} best={} risk={r:.12e} {}",
            incumbent.map_or("-".to_string(), |s| s.to_string()),
            candidates[i],
            if accept { "accept" } else { "reject" }
        );
        self.note(&line);
        Ok(accept.then_some((candidates[i], r)))
    }

    /// Sweeps the electrodes of `streams`, replacing each stream's equation
    /// by its best candidate, until a sweep changes nothing or the sweep
    /// limit is reached.
    pub fn stepwise(&mut self, init: &[EquationSpec], streams: &[StreamId], label: &str) -> Result<Vec<EquationSpec>> {
        let mut model = canonical(init.to_vec());
        check_model(&model)?;
        let start = self.risk(&model)?;
        self.note(&format!("{label} stepwise start n={} risk={start:.12e}", model.len()));
        let mut trace = Trace {
            label: format!("{label}/stepwise"),
            accepted: vec![start],
        };
        let mut order: Vec<StreamId> = streams.to_vec();
        for sweep in 1..=self.config.max_sweeps {
            if self.config.sweep_order == SweepOrder::Seeded {
                order.shuffle(&mut self.rng);
            }
            self.note(&format!("{label} sweep {sweep}"));
            let mut changed = false;
            for &stream in &order {
                let bound = *trace.accepted.last().unwrap();
                if let Some((spec, r)) = self.best_for_stream(&model, stream, bound)? {
                    model.retain(|s| s.stream != stream);
                    model.push(spec);
                    model = canonical(model);
                    check_model(&model)?;
                    trace.accepted.push(r);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        self.note(&format!(
            "{label} stepwise end n={} risk={:.12e}",
            model.len(),
            trace.accepted.last().unwrap()
        ));
        self.traces.push(trace);
        Ok(model)
    }

    /// Greedy backward elimination over the equations accepted by
    /// `restrict` (all when `None`).
    pub fn prune(
        &mut self,
        model: &[EquationSpec],
        restrict: Option<&dyn Fn(&EquationSpec) -> bool>,
        label: &str,
    ) -> Result<Vec<EquationSpec>> {
        let mut model = canonical(model.to_vec());
        if model.is_empty() {
            return Err(Error::Model("cannot prune an empty model".into()));
        }
        check_model(&model)?;
        let p = self.dataset.p;
        let mut trace = Trace {
            label: format!("{label}/prune"),
            accepted: Vec::new(),
        };
        let mut passes = 0;
        loop {
            if self.config.prune_passes.is_some_and(|n| passes >= n) {
                break;
            }
            let floor = if self.config.paradigm == Paradigm::Ole { p } else { 1 };
            let eligible: Vec<usize> = if model.len() <= floor {
                Vec::new()
            } else {
                (0..model.len()).filter(|&i| restrict.is_none_or(|f| f(&model[i]))).collect()
            };
            let risks = self.score(&model, &Options::Remove(eligible.clone()))?;
            let current = trace.accepted.last().map_or(risks[0], |&a| risks[0].min(a));
            if trace.accepted.is_empty() {
                trace.accepted.push(current);
                self.note(&format!("{label} prune start n={} risk={current:.12e}", model.len()));
            }
            let mut best: Option<(usize, f64)> = None;
            for (k, &r) in risks[1..].iter().enumerate() {
                if best.is_none_or(|(_, b)| r < b) {
                    best = Some((k, r));
                }
            }
            let Some((k, r)) = best else { break };
            let accept = improves(r, current, self.config.tolerance);
            self.note(&format!(
                "  remove={} current={current:.12e} risk={r:.12e} {}",
                model[eligible[k]],
                if accept { "accept" } else { "reject" }
            ));
            if !accept {
                break;
            }
            model.remove(eligible[k]);
            trace.accepted.push(r);
            passes += 1;
        }
        self.note(&format!(
            "{label} prune end n={} risk={:.12e}",
            model.len(),
            trace.accepted.last().copied().unwrap_or(f64::NAN)
        ));
        self.traces.push(trace);
        Ok(model)
    }

    /// Uniform best lag of a stream family on the selection sessions.
    pub fn uniform_lag(&self, kind: StreamKind) -> Result<usize> {
        let ids = self.dataset.trial_ids(&selection_sessions(&self.config.folds));
        let lags: Vec<usize> = (0..=self.space.max_lag).collect();
        best_uniform_lag(self.dataset, self.cache, &ids, &self.space.family(kind), &lags, &self.config.fit)
    }

    /// Every electrode's `kind` stream at the uniform best lag, untransformed.
    pub fn basic_model(&mut self, kind: StreamKind) -> Result<Vec<EquationSpec>> {
        let lag = self.uniform_lag(kind)?;
        self.note(&format!("basic {} lag={lag}", kind_name(kind)));
        Ok(self
            .space
            .family(kind)
            .into_iter()
            .map(|s| EquationSpec::new(s, lag, TransformKind::Identity))
            .collect())
    }

    /// Stepwise search from `init` over one family, then a full prune.
    pub fn family_search(&mut self, init: &[EquationSpec], kind: StreamKind) -> Result<Vec<EquationSpec>> {
        let label = kind_name(kind);
        let streams = self.space.family(kind);
        let model = self.stepwise(init, &streams, &label)?;
        self.prune(&model, None, &label)
    }

    /// Optimal spike-count model: stepwise from the basic model, then pruned.
    pub fn spike_count_search(&mut self) -> Result<Vec<EquationSpec>> {
        let basic = self.basic_model(StreamKind::SpikeCount)?;
        self.family_search(&basic, StreamKind::SpikeCount)
    }

    /// The staged joint search over counts and waveform moments.
    pub fn optimal_joint_search(&mut self) -> Result<JointResult> {
        let counts = self.spike_count_search()?;
        let mut families = Vec::new();
        for kind in self.space.moment_kinds() {
            let basic = self.basic_model(kind)?;
            let model = self.family_search(&basic, kind)?;
            families.push((kind, model));
        }
        let waveform_only = |s: &EquationSpec| !s.is_count();
        let mut combined = Vec::new();
        for (kind, fam) in &families {
            let mut both = counts.clone();
            both.extend(fam.iter().copied());
            let label = format!("{}+counts", kind_name(*kind));
            let pruned = self.prune(&both, Some(&waveform_only), &label)?;
            combined.push((*kind, pruned));
        }
        let mut merged: BTreeSet<EquationSpec> = counts.iter().copied().collect();
        for (_, m) in &combined {
            merged.extend(m.iter().filter(|s| !s.is_count()).copied());
        }
        let merged: Vec<EquationSpec> = merged.into_iter().collect();
        let model = self.prune(&merged, None, "joint")?;
        let mut unpruned = counts.clone();
        for (kind, fam) in &families {
            if matches!(kind, StreamKind::Moment { order: 1, .. }) {
                unpruned.extend(fam.iter().copied());
            }
        }
        Ok(JointResult {
            counts,
            families,
            combined,
            unpruned: canonical(unpruned),
            model,
        })
    }

    /// Re-scores the sampled models by full refit.
    pub fn audit(&self) -> Result<AuditReport> {
        let samples: Vec<AuditSample> = self
            .reservoir
            .iter()
            .map(|(model, engine_risk)| {
                let refit = cv_risk(model, self.dataset, self.cache, &self.config)?;
                Ok(AuditSample {
                    model: model.clone(),
                    engine_risk: *engine_risk,
                    refit_risk: refit.cv_risk,
                })
            })
            .collect::<Result<_>>()?;
        let max_abs_diff = samples
            .iter()
            .map(|s| (s.engine_risk - s.refit_risk).abs())
            .fold(0.0, f64::max);
        let max_rel_diff = samples
            .iter()
            .map(|s| (s.engine_risk - s.refit_risk).abs() / s.refit_risk.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        Ok(AuditReport {
            samples,
            max_abs_diff,
            max_rel_diff,
        })
    }
}

fn improves(candidate: f64, current: f64, tolerance: f64) -> bool {
    if !current.is_finite() {
        return candidate.is_finite();
    }
    candidate < current * (1.0 - tolerance)
}

fn kind_name(kind: StreamKind) -> String {
    match kind {
        StreamKind::SpikeCount => "counts".into(),
        StreamKind::Moment { feature, order } => format!("f{}m{}", feature + 1, order),
    }
}
