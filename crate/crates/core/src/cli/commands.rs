//! Subcommand bodies.

use std::fmt::Write as _;
use std::fs;
use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datamodel::{load_dataset, make_folds, save_dataset, selection_sessions, Dataset, TrialId};
use crate::decode::{decode_trials, evaluate_mse_from, write_prediction_csv, DecodingModel, KfInit, Paradigm};
use crate::encode::{read_model, write_model, EquationSpec, FitOptions, FittedModel};
use crate::error::{Error, Result};
use crate::featurize::{FeatureCache, StreamKind};
use crate::linalg::spd_inverse;
use crate::schur::remove_one_into;
use crate::select::{cv_risk, fit_selected, Search, SearchConfig};
use crate::simulate::{simulate as run_simulation, write_truth, SimConfig, StyleKind};

use super::{BenchArgs, DataArgs, DecodeArgs, DecodeOpts, EvaluateArgs, FitArgs, SelectArgs, SimulateArgs, Space, StyleArg};

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn init(zero: bool) -> KfInit {
    if zero {
        KfInit::Zero
    } else {
        KfInit::TrueVelocity
    }
}

fn load(data: &DataArgs) -> Result<(Dataset, FeatureCache)> {
    let ds = load_dataset(&data.data)?;
    ds.validate()?;
    let cache = FeatureCache::build(&ds)?;
    Ok((ds, cache))
}

fn search_config(ds: &Dataset, data: &DataArgs, decode: &DecodeOpts) -> Result<SearchConfig> {
    let folds = make_folds(ds.sessions.len(), data.folds)?;
    let mut cfg = SearchConfig::new(decode.paradigm, folds);
    cfg.kf_init = init(decode.zero_init);
    cfg.static_cov = decode.static_cov;
    cfg.state_order = decode.state_order;
    cfg.fit = FitOptions {
        max_lag: data.max_lag,
        sqrt_waveform_abs: data.sqrt_waveform_abs,
    };
    Ok(cfg)
}

fn check_compatible(model: &FittedModel, ds: &Dataset, path: &str) -> Result<()> {
    let m = &model.meta;
    if m.n_electrodes != ds.n_electrodes || m.n_features != ds.n_features() || m.p != ds.p {
        return Err(Error::Model(format!(
            "{path}: model has {} electrodes, {} features, {} kinematic dimensions; dataset has {}, {}, {}",
            m.n_electrodes,
            m.n_features,
            m.p,
            ds.n_electrodes,
            ds.n_features(),
            ds.p
        )));
    }
    Ok(())
}

pub(super) fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = SimConfig::preset(a.preset, a.seed);
    if let Some(v) = a.sessions {
        cfg.n_sessions = v;
    }
    if let Some(v) = a.trials {
        cfg.trials_per_session = v;
    }
    if let Some(v) = a.electrodes {
        cfg.n_electrodes = v;
    }
    if let Some(v) = a.neurons {
        cfg.neurons_per_electrode = v;
    }
    if let Some(s) = a.style {
        cfg.style = match s {
            StyleArg::Reach => StyleKind::Reach,
            StyleArg::Ar1 => StyleKind::Ar1,
        };
    }
    if a.fixed_lag.is_some() {
        cfg.fixed_lag = a.fixed_lag;
    }
    if let Some(v) = a.lag_min {
        cfg.lag_min = v;
    }
    if let Some(v) = a.lag_max {
        cfg.lag_max = v;
    }
    let (ds, truth) = run_simulation(&cfg)?;
    save_dataset(&ds, &a.out)?;
    write_truth(&truth, a.out.join("truth.json"))?;
    load_dataset(&a.out)?.validate()?;
    log::info!("wrote {} sessions to {} (seed {})", ds.sessions.len(), a.out.display(), a.seed);
    Ok(())
}

fn parse_equations(text: &str) -> Result<Vec<EquationSpec>> {
    let specs: Vec<EquationSpec> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if specs.is_empty() {
        return Err(Error::Invalid("no equations given".into()));
    }
    crate::select::check_model(&specs)?;
    Ok(specs)
}

pub(super) fn fit(a: &FitArgs) -> Result<()> {
    let (ds, cache) = load(&a.data)?;
    let cfg = search_config(&ds, &a.data, &a.decode)?;
    let specs = parse_equations(&a.equations)?;
    for s in &specs {
        s.validate(&cfg.fit)?;
    }
    let sessions = a.sessions.clone().unwrap_or_else(|| selection_sessions(&cfg.folds));
    let model = fit_selected(&specs, &ds, &cache, &ds.trial_ids(&sessions), &cfg)?;
    write_model(&model, &a.out)?;
    read_model(&a.out)?;
    Ok(())
}

fn specs_line(specs: &[EquationSpec]) -> String {
    specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
}

pub(super) fn select(a: &SelectArgs) -> Result<()> {
    let (ds, cache) = load(&a.data)?;
    let mut cfg = search_config(&ds, &a.data, &a.decode)?;
    cfg.rng_seed = a.seed;
    cfg.tolerance = a.tolerance;
    cfg.max_sweeps = a.max_sweeps;
    cfg.prune_passes = a.prune_passes;
    cfg.sweep_order = a.sweep_order.parse()?;
    cfg.audit_samples = a.audit_samples;
    cfg.validate()?;
    create_dir(&a.out)?;

    let started = Instant::now();
    let mut search = Search::new(&ds, &cache, cfg.clone())?;
    let mut extra: Vec<(&str, Vec<EquationSpec>)> = Vec::new();
    let model = match a.space {
        Space::CountsBasic => search.basic_model(StreamKind::SpikeCount)?,
        Space::Counts => search.spike_count_search()?,
        Space::Joint => {
            let j = search.optimal_joint_search()?;
            extra.push(("counts_model.txt", j.counts));
            extra.push(("unpruned_model.txt", j.unpruned));
            j.model
        }
    };
    let report = cv_risk(&model, &ds, &cache, &cfg)?;
    let audit = search.audit()?;
    log::info!("search finished in {:.1} s", started.elapsed().as_secs_f64());

    let train = ds.trial_ids(&selection_sessions(&cfg.folds));
    let fitted = fit_selected(&model, &ds, &cache, &train, &cfg)?;
    write_model(&fitted, a.out.join("model.txt"))?;
    for (name, specs) in &extra {
        write_model(&fit_selected(specs, &ds, &cache, &train, &cfg)?, a.out.join(name))?;
    }
    write_file(&a.out.join("search.log"), search.log())?;

    let monotone = search.traces().iter().all(|t| t.is_monotone());
    let mut text = String::new();
    let n_wave = model.iter().filter(|s| !s.is_count()).count();
    writeln!(text, "space = {:?}", a.space).unwrap();
    writeln!(text, "paradigm = {}", cfg.paradigm).unwrap();
    writeln!(text, "folds = {}", a.data.folds).unwrap();
    writeln!(text, "seed = {}", cfg.rng_seed).unwrap();
    writeln!(text, "cv_risk = {:.12e}", report.cv_risk).unwrap();
    let folds: Vec<String> = report.fold_risks.iter().map(|r| format!("{r:.12e}")).collect();
    writeln!(text, "fold_risks = {}", folds.join(" ")).unwrap();
    writeln!(text, "n_equations = {}", report.n_equations).unwrap();
    writeln!(text, "n_waveform_equations = {n_wave}").unwrap();
    writeln!(text, "nan_bins = {}", report.nan_bins).unwrap();
    writeln!(text, "audit_samples = {}", audit.samples.len()).unwrap();
    writeln!(text, "audit_max_abs_diff = {:.3e}", audit.max_abs_diff).unwrap();
    writeln!(text, "audit_max_rel_diff = {:.3e}", audit.max_rel_diff).unwrap();
    writeln!(text, "accepted_risks_monotone = {monotone}").unwrap();
    writeln!(text, "equations = {}", specs_line(&model)).unwrap();
    write_file(&a.out.join("report.txt"), &text)?;

    let mut audit_csv = String::from("engine_risk,refit_risk,abs_diff,equations\n");
    for s in &audit.samples {
        writeln!(
            audit_csv,
            "{:.12e},{:.12e},{:.3e},{}",
            s.engine_risk,
            s.refit_risk,
            (s.engine_risk - s.refit_risk).abs(),
            specs_line(&s.model)
        )
        .unwrap();
    }
    write_file(&a.out.join("audit.csv"), &audit_csv)?;

    let mut per_trial = String::from("session,trial,mse\n");
    for (id, mse) in &report.per_trial_mse {
        writeln!(per_trial, "{},{},{:.12e}", id.session, id.trial, mse).unwrap();
    }
    write_file(&a.out.join("validation_mse.csv"), &per_trial)?;
    read_model(a.out.join("model.txt"))?;
    Ok(())
}

/// Per-trial MSE from bin `max_lag` on; infinite for undecodable trials.
fn test_mse(
    fitted: FittedModel,
    paradigm: Paradigm,
    init: KfInit,
    ds: &Dataset,
    cache: &FeatureCache,
    ids: &[TrialId],
) -> Result<Vec<f64>> {
    if paradigm == Paradigm::Bayes && fitted.state.is_none() {
        return Err(Error::Model("Bayesian decoding needs a model file with a state model".into()));
    }
    let start = fitted.meta.max_lag;
    let model = DecodingModel::new(fitted)?;
    let preds = decode_trials(&model, paradigm, init, ds, cache, ids)?;
    ids.iter()
        .zip(&preds)
        .map(|(&id, p)| match evaluate_mse_from(p, ds.trial(id), start) {
            Ok(r) => Ok(r.mse),
            Err(Error::AllNan) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        })
        .collect()
}

pub(super) fn decode(a: &DecodeArgs) -> Result<()> {
    let (ds, cache) = load(&a.data)?;
    let fitted = read_model(&a.model)?;
    check_compatible(&fitted, &ds, &a.model.display().to_string())?;
    let sessions = match &a.sessions {
        Some(s) => s.clone(),
        None => make_folds(ds.sessions.len(), a.data.folds)?[0].test_sessions.clone(),
    };
    let ids = ds.trial_ids(&sessions);
    let start = fitted.meta.max_lag;
    let model = DecodingModel::new(fitted)?;
    let preds = decode_trials(&model, a.paradigm, init(a.zero_init), &ds, &cache, &ids)?;
    let dir = a.out.join("predictions");
    create_dir(&dir)?;
    let mut summary = String::from("session,trial,mse,bins,nan_bins\n");
    for (&id, pred) in ids.iter().zip(&preds) {
        let trial = ds.trial(id);
        write_prediction_csv(dir.join(format!("s{:03}_t{:03}.csv", id.session, id.trial)), pred, trial)?;
        match evaluate_mse_from(pred, trial, start) {
            Ok(r) => writeln!(summary, "{},{},{:.12e},{},{}", id.session, id.trial, r.mse, r.bins, r.nan_bins),
            Err(Error::AllNan) => writeln!(summary, "{},{},inf,0,{}", id.session, id.trial, pred.nan_bins),
            Err(e) => return Err(e),
        }
        .unwrap();
    }
    write_file(&a.out.join("mse.csv"), &summary)
}

/// Minimum, quartiles and maximum with linear interpolation between order
/// statistics.
pub fn five_number_summary(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}

pub(super) fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (ds, cache) = load(&a.data)?;
    let folds = make_folds(ds.sessions.len(), a.data.folds)?;
    let ids = ds.trial_ids(&folds[0].test_sessions);
    if ids.is_empty() {
        return Err(Error::Invalid("no held-out test trials".into()));
    }
    let mut names = Vec::new();
    let mut mses: Vec<Vec<f64>> = Vec::new();
    for entry in &a.models {
        let (path, paradigm) = match entry.rsplit_once('@') {
            Some((p, par)) => (p, par.parse()?),
            None => (entry.as_str(), a.paradigm),
        };
        let fitted = read_model(path)?;
        check_compatible(&fitted, &ds, path)?;
        mses.push(test_mse(fitted, paradigm, init(a.zero_init), &ds, &cache, &ids)?);
        names.push(entry.clone());
    }
    create_dir(&a.out)?;
    let mut mse_csv = String::from("model,session,trial,mse\n");
    for (name, m) in names.iter().zip(&mses) {
        for (id, v) in ids.iter().zip(m) {
            writeln!(mse_csv, "{name},{},{},{v:.12e}", id.session, id.trial).unwrap();
        }
    }
    // Ratios above 1 mean the second model of the pair is more efficient.
    let mut ratios = String::from("model_a,model_b,session,trial,mse_a,mse_b,ratio\n");
    let mut summary = String::from("model_a,model_b,n,min,q1,median,q3,max\n");
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let r: Vec<f64> = mses[i].iter().zip(&mses[j]).map(|(x, y)| x / y).collect();
            for (k, id) in ids.iter().enumerate() {
                writeln!(
                    ratios,
                    "{},{},{},{},{:.12e},{:.12e},{:.12e}",
                    names[i], names[j], id.session, id.trial, mses[i][k], mses[j][k], r[k]
                )
                .unwrap();
            }
            let s = five_number_summary(&r).unwrap();
            writeln!(
                summary,
                "{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                names[i],
                names[j],
                r.len(),
                s[0],
                s[1],
                s[2],
                s[3],
                s[4]
            )
            .unwrap();
        }
    }
    write_file(&a.out.join("mse.csv"), &mse_csv)?;
    write_file(&a.out.join("ratios.csv"), &ratios)?;
    write_file(&a.out.join("summary.csv"), &summary)
}

/// One size of the leave-one-out timing sweep, in seconds per run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub t_direct: f64,
    pub t_shortcut: f64,
    pub ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times leaving out each of `samples` evenly spaced equations from a
/// random SPD `V`: a fresh Cholesky inverse of every `(N-1)`-submatrix
/// against a rank-one downdate of the cached `V^{-1}`. Median of
/// `repeats` runs.
pub fn run_bench(sizes: &[usize], repeats: usize, samples: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 || samples == 0 {
        return Err(Error::Invalid("repeats and samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes
        .iter()
        .map(|&n| {
            if n < 2 {
                return Err(Error::Invalid(format!("bench size {n} is below 2")));
            }
            let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
            let mut v = &a * a.transpose() / n as f64;
            for i in 0..n {
                v[(i, i)] += 1.0;
            }
            let inv = spd_inverse(&v).ok_or(Error::NotPositiveDefinite)?;
            let k = samples.min(n);
            let left_out: Vec<usize> = (0..k).map(|j| j * n / k).collect();
            let mut direct = Vec::with_capacity(repeats);
            let mut shortcut = Vec::with_capacity(repeats);
            let mut out = DMatrix::zeros(n - 1, n - 1);
            for _ in 0..repeats {
                let t = Instant::now();
                for &i in &left_out {
                    let keep: Vec<usize> = (0..n).filter(|&x| x != i).collect();
                    let sub = v.select_rows(&keep).select_columns(&keep);
                    black_box(spd_inverse(&sub));
                }
                direct.push(t.elapsed().as_secs_f64());
                let t = Instant::now();
                for &i in &left_out {
                    remove_one_into(&inv, i, &mut out);
                    black_box(&out);
                }
                shortcut.push(t.elapsed().as_secs_f64());
            }
            let (t_direct, t_shortcut) = (median(direct), median(shortcut));
            Ok(BenchRow {
                n,
                t_direct,
                t_shortcut,
                ratio: t_direct / t_shortcut,
            })
        })
        .collect()
}

pub(super) fn bench(a: &BenchArgs) -> Result<()> {
    let rows = run_bench(&a.sizes, a.repeats, a.samples, a.seed)?;
    let mut csv = String::from("N,t_direct,t_shortcut,ratio\n");
    for r in &rows {
        writeln!(csv, "{},{:.6e},{:.6e},{:.4}", r.n, r.t_direct, r.t_shortcut, r.ratio).unwrap();
    }
    write_file(&a.out, &csv)
}
