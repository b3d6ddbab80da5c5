//! Observation-equation fitting, noise covariance estimation, kinematic
//! state models and the model file format.
//!
//! Every equation relates one (possibly transformed) neural series at bin
//! `t - lag` to the kinematics at bin `t`:
//! `g(x_{t-lag}) = intercept + coeff' k_t + noise`. All equations are fitted
//! on the common support `t >= max_lag` of each training trial, so residual
//! series of different count equations line up bin by bin. Waveform
//! equations additionally use only bins whose backing spike count is
//! positive.

mod model_file;
mod noise;
mod state;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Trial, TrialId};
use crate::error::{Error, Result};
use crate::featurize::{fit_ace, AceSmoother, FeatureCache, StreamId, TrialFeatures, TransformKind, TransformModel};
use crate::linalg::NormalEquations;

pub use model_file::{read_model, write_model, FittedModel, ModelMeta, MODEL_FORMAT_VERSION};
pub use noise::{
    assemble_covariance, catalog_from_residuals, estimate_noise_catalog, invert_with_repair, residual_covariance, row_states, Assembled,
    CovarianceLayout, MomentCovariance, NoiseCatalog, RowObs,
};
pub use state::{fit_state_model, StateModel};

/// One observation equation: a stream, a lag in bins and a response transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EquationSpec {
    pub stream: StreamId,
    pub lag: usize,
    pub transform: TransformKind,
}

impl EquationSpec {
    pub fn new(stream: StreamId, lag: usize, transform: TransformKind) -> Self {
        EquationSpec { stream, lag, transform }
    }

    pub fn is_count(&self) -> bool {
        self.stream.is_count()
    }

    pub fn validate(&self, opts: &FitOptions) -> Result<()> {
        if self.lag > opts.max_lag {
            return Err(Error::Invalid(format!("{self}: lag exceeds maximum {}", opts.max_lag)));
        }
        if self.transform == TransformKind::Sqrt && !self.is_count() && !opts.sqrt_waveform_abs {
            return Err(Error::Invalid(format!(
                "{self}: square root is only offered for spike-count streams"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for EquationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}:{}", self.stream, self.lag, self.transform)
    }
}

impl FromStr for EquationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("bad equation spec {s:?}"));
        let (stream, rest) = s.split_once('@').ok_or_else(bad)?;
        let (lag, transform) = rest.split_once(':').ok_or_else(bad)?;
        Ok(EquationSpec {
            stream: stream.parse()?,
            lag: lag.parse().map_err(|_| bad())?,
            transform: transform.parse()?,
        })
    }
}

/// Settings shared by every fit on a fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_lag: usize,
    /// Offer the square root of the absolute value for waveform streams.
    pub sqrt_waveform_abs: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_lag: crate::featurize::DEFAULT_MAX_LAG,
            sqrt_waveform_abs: false,
        }
    }
}

/// A fitted observation equation.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedEquation {
    pub spec: EquationSpec,
    pub intercept: f64,
    pub coeff: Vec<f64>,
    pub transform_model: TransformModel,
    /// Mean squared residual on the training support.
    pub residual_variance: f64,
    /// Waveform streams only (0 for counts). For untransformed moments this
    /// is the per-event sample variance of `w^m`; for transformed moments it
    /// is the residual variance per spike, `mean(r^2 δ^2 / s)`.
    pub unit_moment_variance: f64,
    pub r_squared: f64,
    pub n_samples: usize,
}

impl FittedEquation {
    /// `intercept + coeff' k`.
    pub fn predict(&self, k: &[f64]) -> f64 {
        self.intercept + self.coeff.iter().zip(k).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Transformed observation for decoding bin `t`, or `None` when the
    /// backing bin precedes the trial or a waveform bin holds no spikes.
    pub fn observe(&self, features: &TrialFeatures, t: usize) -> Option<f64> {
        let src = t.checked_sub(self.spec.lag)?;
        if !self.spec.is_count() && features.counts(self.spec.stream.electrode)[src] == 0 {
            return None;
        }
        self.transform_model.apply_value(features.values(self.spec.stream)[src]).ok()
    }
}

/// The training trials of one fold together with per-trial features and
/// fold-level moment statistics.
#[derive(Debug, Clone)]
pub struct FitData<'a> {
    trials: Vec<&'a Trial>,
    features: Vec<&'a TrialFeatures>,
    pub max_lag: usize,
    pub bin_width: f64,
    pub n_electrodes: usize,
    pub n_features: usize,
    pub p: usize,
    pub moments: MomentCovariance,
}

impl<'a> FitData<'a> {
    pub fn new(dataset: &'a Dataset, cache: &'a FeatureCache, ids: &[TrialId], max_lag: usize) -> Self {
        let trials: Vec<&Trial> = ids.iter().map(|&id| dataset.trial(id)).collect();
        let features: Vec<&TrialFeatures> = ids.iter().map(|&id| cache.get(id)).collect();
        let moments = MomentCovariance::estimate(
            &trials,
            &features,
            dataset.n_electrodes,
            dataset.n_features(),
            max_lag,
        );
        FitData {
            trials,
            features,
            max_lag,
            bin_width: dataset.bin_width,
            n_electrodes: dataset.n_electrodes,
            n_features: dataset.n_features(),
            p: dataset.p,
            moments,
        }
    }

    pub fn trials(&self) -> &[&'a Trial] {
        &self.trials
    }

    pub fn features(&self) -> &[&'a TrialFeatures] {
        &self.features
    }

    /// Number of bins in the common support.
    pub fn support_len(&self) -> usize {
        self.trials
            .iter()
            .map(|t| t.n_bins().saturating_sub(self.max_lag))
            .sum()
    }

    /// Raw responses, backing counts and kinematic rows for `spec`.
    fn samples(&self, spec: &EquationSpec) -> (Vec<f64>, Vec<u32>, DMatrix<f64>) {
        let stream = spec.stream;
        let mut y = Vec::new();
        let mut s = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        for (trial, feat) in self.trials.iter().zip(&self.features) {
            let values = feat.values(stream);
            let counts = feat.counts(stream.electrode);
            for t in self.max_lag..trial.n_bins() {
                let src = t - spec.lag;
                if !stream.is_count() && counts[src] == 0 {
                    continue;
                }
                y.push(values[src]);
                s.push(counts[src]);
                rows.extend(trial.kinematics.row(t).iter());
            }
        }
        let n = y.len();
        let design = DMatrix::from_row_slice(n, self.p, &rows);
        (y, s, design)
    }
}

/// Fits `spec` by least squares on the fold's training support.
pub fn fit_equation(spec: EquationSpec, data: &FitData, opts: &FitOptions) -> Result<FittedEquation> {
    fit_equation_with_residuals(spec, data, opts).map(|(eq, _)| eq)
}

/// As [`fit_equation`], also returning the residual series in support order.
pub fn fit_equation_with_residuals(
    spec: EquationSpec,
    data: &FitData,
    opts: &FitOptions,
) -> Result<(FittedEquation, Vec<f64>)> {
    spec.validate(opts)?;
    if spec.stream.electrode >= data.n_electrodes {
        return Err(Error::Invalid(format!("{spec}: electrode out of range")));
    }
    let (raw, counts, design) = data.samples(&spec);
    let p = data.p;
    if !spec.is_count() && raw.is_empty() {
        return Err(Error::EmptyStream(format!("{spec}: no events in the training data")));
    }
    if raw.len() < p + 2 {
        return Err(Error::DegenerateDesign(format!(
            "{spec}: {} samples, need at least {}",
            raw.len(),
            p + 2
        )));
    }
    let transform_model = match spec.transform {
        TransformKind::Identity => TransformModel::Identity,
        TransformKind::Sqrt => TransformModel::Sqrt { abs: !spec.is_count() },
        TransformKind::Ace => {
            let smoother = if spec.is_count() {
                AceSmoother::LevelMeans
            } else {
                AceSmoother::LocalLinear
            };
            fit_ace(&raw, &design, smoother)?
        }
    };
    let y = raw
        .iter()
        .map(|&v| transform_model.apply_value(v))
        .collect::<Result<Vec<f64>>>()?;

    let mut ne = NormalEquations::new(p);
    let mut row = vec![0.0; p];
    for (i, &yi) in y.iter().enumerate() {
        for k in 0..p {
            row[k] = design[(i, k)];
        }
        ne.push(&row, yi);
    }
    let fit = ne
        .solve()
        .ok_or_else(|| Error::DegenerateDesign(format!("{spec}: kinematics are rank deficient")))?;

    let n = y.len();
    let mut residuals = Vec::with_capacity(n);
    let mut ss = 0.0;
    let mut ss_unit = 0.0;
    let delta = data.bin_width;
    for (i, &yi) in y.iter().enumerate() {
        for k in 0..p {
            row[k] = design[(i, k)];
        }
        let r = yi - fit.predict(&row);
        ss += r * r;
        if !spec.is_count() {
            ss_unit += r * r * delta * delta / counts[i] as f64;
        }
        residuals.push(r);
    }
    let mean_sq = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let floor = 1e-12 * mean_sq.max(1e-12);
    let residual_variance = (ss / n as f64).max(floor);
    let unit_moment_variance = if spec.is_count() {
        0.0
    } else if spec.transform == TransformKind::Identity {
        let slot = data.moments.slot_index(spec.stream);
        data.moments.event_variance(slot)
    } else {
        (ss_unit / n as f64).max(floor * delta * delta)
    };

    Ok((
        FittedEquation {
            spec,
            intercept: fit.intercept,
            coeff: fit.coeff.clone(),
            transform_model,
            residual_variance,
            unit_moment_variance,
            r_squared: fit.r_squared,
            n_samples: n,
        },
        residuals,
    ))
}

/// Residuals of a fitted equation on `data`'s support, in support order.
pub fn equation_residuals(eq: &FittedEquation, data: &FitData) -> Vec<f64> {
    let (raw, _, design) = data.samples(&eq.spec);
    let p = data.p;
    let mut row = vec![0.0; p];
    raw.iter()
        .enumerate()
        .map(|(i, &v)| {
            for k in 0..p {
                row[k] = design[(i, k)];
            }
            eq.transform_model.apply_value(v).unwrap_or(f64::NAN) - eq.predict(&row)
        })
        .collect()
}

/// Fits every spec plus the noise catalog and, if requested, the state model.
pub fn fit_model(
    specs: &[EquationSpec],
    data: &FitData,
    opts: &FitOptions,
    state_order: Option<usize>,
) -> Result<FittedModel> {
    let equations = specs
        .iter()
        .map(|&s| fit_equation(s, data, opts))
        .collect::<Result<Vec<_>>>()?;
    let catalog = estimate_noise_catalog(&equations, data)?;
    let state = match state_order {
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
            static_cov: false,
        },
        equations,
        catalog,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Session, WaveformEvent};
    use crate::featurize::StreamKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn dataset_from(trials: Vec<Trial>, n_electrodes: usize) -> Dataset {
        Dataset {
            sessions: vec![Session { trials }],
            n_electrodes,
            feature_names: (1..=4).map(|i| format!("f{i}")).collect(),
            bin_width: 0.016,
            p: 3,
        }
    }

    /// One event per bin on electrode 0 with feature 0 equal to `f(k_t)`.
    fn deterministic_trial(n: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> Trial {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kin = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let events = (0..n)
            .map(|t| {
                let k: Vec<f64> = kin.row(t).iter().cloned().collect();
                WaveformEvent {
                    time: (t as f64 + 0.5) * 0.016,
                    features: vec![f(&k), 1.0, 0.0, 0.0],
                }
            })
            .collect();
        Trial {
            kinematics: kin,
            events: vec![events],
            bin_width: 0.016,
            start_time: 0.0,
        }
    }

    #[test]
    fn spec_round_trip_and_validation() {
        let spec = EquationSpec::new(StreamId::moment(3, 1, 2), 7, TransformKind::Ace);
        assert_eq!(spec.to_string(), "e3:f2m2@7:ace");
        assert_eq!(spec.to_string().parse::<EquationSpec>().unwrap(), spec);
        let opts = FitOptions::default();
        assert!(spec.validate(&opts).is_ok());
        let sqrt = EquationSpec::new(StreamId::moment(0, 0, 1), 0, TransformKind::Sqrt);
        assert!(sqrt.validate(&opts).is_err());
        assert!(sqrt
            .validate(&FitOptions {
                sqrt_waveform_abs: true,
                ..opts
            })
            .is_ok());
        assert!(EquationSpec::new(StreamId::count(0), 13, TransformKind::Identity)
            .validate(&opts)
            .is_err());
    }

    #[test]
    fn noiseless_moment_recovers_coefficients() {
        // One event per bin, w = 1 + 2 k_1, so the first moment is w / δ.
        let trial = deterministic_trial(200, 1, |k| 1.0 + 2.0 * k[0]);
        let ds = dataset_from(vec![trial], 1);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 0);
        let spec = EquationSpec::new(StreamId::moment(0, 0, 1), 0, TransformKind::Identity);
        let eq = fit_equation(spec, &data, &FitOptions::default()).unwrap();
        let d = 0.016;
        assert!((eq.intercept - 1.0 / d).abs() < 1e-9 / d);
        assert!((eq.coeff[0] - 2.0 / d).abs() < 1e-9 / d);
        assert!(eq.coeff[1].abs() < 1e-9 / d && eq.coeff[2].abs() < 1e-9 / d);
        assert!((eq.r_squared - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pure_noise_stream_has_insignificant_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3000;
        let kin = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let events = (0..n)
            .flat_map(|t| {
                let c = rng.random_range(0..3);
                (0..c)
                    .map(|i| WaveformEvent {
                        time: (t as f64 + 0.1 + 0.2 * i as f64) * 0.016,
                        features: vec![0.0; 4],
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let trial = Trial {
            kinematics: kin,
            events: vec![events],
            bin_width: 0.016,
            start_time: 0.0,
        };
        let ds = dataset_from(vec![trial], 1);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 0);
        let spec = EquationSpec::new(StreamId::count(0), 0, TransformKind::Identity);
        let (raw, _, design) = data.samples(&spec);
        let mut ne = NormalEquations::new(3);
        for (i, &y) in raw.iter().enumerate() {
            ne.push(&[design[(i, 0)], design[(i, 1)], design[(i, 2)]], y);
        }
        let se = ne.solve().unwrap().slope_standard_errors();
        let eq = fit_equation(spec, &data, &FitOptions::default()).unwrap();
        for k in 0..3 {
            assert!(eq.coeff[k].abs() < 3.0 * se[k], "coord {k}: {} vs se {}", eq.coeff[k], se[k]);
        }
    }

    #[test]
    fn recovers_generator_parameters_within_five_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 5000;
        let (alpha, c, sd) = (2.0, [1.5, -0.5, 0.25], 0.3);
        let kin = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let noise = Normal::new(0.0, sd).unwrap();
        // Encode a Gaussian response through the first moment of one event per bin.
        let events = (0..n)
            .map(|t| {
                let y = alpha + c[0] * kin[(t, 0)] + c[1] * kin[(t, 1)] + c[2] * kin[(t, 2)] + noise.sample(&mut rng);
                WaveformEvent {
                    time: (t as f64 + 0.5) * 0.016,
                    features: vec![y * 0.016, 0.0, 0.0, 0.0],
                }
            })
            .collect();
        let trial = Trial {
            kinematics: kin,
            events: vec![events],
            bin_width: 0.016,
            start_time: 0.0,
        };
        let ds = dataset_from(vec![trial], 1);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 0);
        let spec = EquationSpec::new(StreamId::moment(0, 0, 1), 0, TransformKind::Identity);
        let eq = fit_equation(spec, &data, &FitOptions::default()).unwrap();
        let (raw, _, design) = data.samples(&spec);
        let mut ne = NormalEquations::new(3);
        for (i, &y) in raw.iter().enumerate() {
            ne.push(&[design[(i, 0)], design[(i, 1)], design[(i, 2)]], y);
        }
        let se = ne.solve().unwrap().slope_standard_errors();
        for k in 0..3 {
            assert!((eq.coeff[k] - c[k]).abs() < 5.0 * se[k]);
        }
        let var_se = sd * sd * (2.0 / n as f64).sqrt();
        assert!((eq.residual_variance - sd * sd).abs() < 5.0 * var_se);
    }

    #[test]
    fn empty_waveform_stream_is_rejected() {
        let mut trial = deterministic_trial(50, 2, |_| 1.0);
        trial.events = vec![vec![]];
        let ds = dataset_from(vec![trial], 1);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 0);
        let spec = EquationSpec::new(StreamId::moment(0, 0, 1), 0, TransformKind::Identity);
        assert!(matches!(
            fit_equation(spec, &data, &FitOptions::default()),
            Err(Error::EmptyStream(_))
        ));
    }

    #[test]
    fn constant_kinematics_are_degenerate() {
        let mut trial = deterministic_trial(50, 3, |_| 1.0);
        trial.kinematics = DMatrix::from_element(50, 3, 0.5);
        let ds = dataset_from(vec![trial], 1);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 0);
        let spec = EquationSpec::new(StreamId::count(0), 0, TransformKind::Identity);
        assert!(matches!(
            fit_equation(spec, &data, &FitOptions::default()),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn fitting_is_bit_deterministic() {
        let trial = deterministic_trial(300, 4, |k| (k[0] + 1.0).powi(2));
        let ds = dataset_from(vec![trial], 1);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 2);
        for kind in [TransformKind::Identity, TransformKind::Ace] {
            let spec = EquationSpec::new(StreamId::moment(0, 0, 1), 2, kind);
            let a = fit_equation(spec, &data, &FitOptions::default()).unwrap();
            let b = fit_equation(spec, &data, &FitOptions::default()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lagged_fit_uses_common_support() {
        let trial = deterministic_trial(40, 5, |k| k[1]);
        let ds = dataset_from(vec![trial], 1);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 6);
        assert_eq!(data.support_len(), 34);
        for lag in [0, 3, 6] {
            let spec = EquationSpec::new(StreamId::count(0), lag, TransformKind::Identity);
            let (eq, res) = fit_equation_with_residuals(spec, &data, &FitOptions::default()).unwrap();
            assert_eq!(eq.n_samples, 34);
            assert_eq!(res.len(), 34);
            assert_eq!(res, equation_residuals(&eq, &data));
        }
        assert!(matches!(
            StreamId::moment(0, 0, 1).kind,
            StreamKind::Moment { feature: 0, order: 1 }
        ));
    }
}
