//! Synthetic multielectrode recordings with known tuning, lags and
//! waveform-feature distributions.
//!
//! Every electrode carries one or more Poisson neurons whose rate is a
//! rectified linear function of the kinematics a fixed number of bins in
//! the future. Each spike emits a Gaussian feature vector specific to its
//! neuron, and unsorted "hash" events with a broad feature distribution are
//! mixed in. All randomness derives from a master seed through per-trial
//! seeds, so a dataset is a pure function of its configuration.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Session, Trial, WaveformEvent, DEFAULT_BIN_WIDTH, DEFAULT_FEATURE_NAMES};
use crate::encode::StateModel;
use crate::error::{Error, Result};

/// Number of waveform features per event.
pub const N_FEATURES: usize = 4;

/// Stream tags mixed into per-trial seeds.
const TAG_KINEMATICS: u64 = 0x6b69_6e65;
const TAG_SPIKES: u64 = 0x7370_696b;
const TAG_POPULATION: u64 = 0x706f_7075;

/// One simulated neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSpec {
    /// Rate in Hz at zero kinematics.
    pub baseline_rate: f64,
    /// Rate gradient with respect to the kinematics, in Hz per unit.
    pub tuning: Vec<f64>,
    /// The rate in bin `t` follows the kinematics in bin `t + lag`.
    pub lag: usize,
    pub feature_mean: Vec<f64>,
    /// Row-major, symmetric positive definite.
    pub feature_cov: Vec<Vec<f64>>,
}

impl NeuronSpec {
    fn cov_matrix(&self) -> DMatrix<f64> {
        let n = self.feature_cov.len();
        DMatrix::from_fn(n, n, |i, j| self.feature_cov[i][j])
    }

    fn rate(&self, k: &[f64]) -> f64 {
        let drive: f64 = self.tuning.iter().zip(k).map(|(a, b)| a * b).sum();
        (self.baseline_rate + drive).max(0.0)
    }
}

/// Electrodes, each a list of neurons, plus the unsorted background events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub electrodes: Vec<Vec<NeuronSpec>>,
    /// Rate in Hz of untuned background events on every electrode.
    pub noise_event_rate: f64,
    /// Per electrode, the center of the background feature distribution.
    pub noise_center: Vec<Vec<f64>>,
    /// Per-feature standard deviation of the narrower background component.
    pub noise_feature_sd: Vec<f64>,
    pub rng_seed: u64,
}

impl PopulationSpec {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.electrodes.is_empty() {
            return Err(Error::Invalid("population has no electrodes".into()));
        }
        if !(self.noise_event_rate >= 0.0) {
            return Err(Error::Invalid("noise event rate must be nonnegative".into()));
        }
        if self.noise_center.len() != self.electrodes.len() {
            return Err(Error::Invalid("one background center per electrode is required".into()));
        }
        let nf = self.noise_feature_sd.len();
        if self.noise_center.iter().any(|c| c.len() != nf) {
            return Err(Error::Invalid("background center has the wrong feature count".into()));
        }
        for (e, neurons) in self.electrodes.iter().enumerate() {
            for n in neurons {
                if !(n.baseline_rate >= 0.0) {
                    return Err(Error::Invalid(format!("electrode {e}: negative baseline rate")));
                }
                if n.tuning.len() != p {
                    return Err(Error::Invalid(format!("electrode {e}: tuning has {} entries, expected {p}", n.tuning.len())));
                }
                if n.feature_mean.len() != nf || n.feature_cov.len() != nf || n.feature_cov.iter().any(|r| r.len() != nf) {
                    return Err(Error::Invalid(format!("electrode {e}: feature dimensions disagree")));
                }
                if n.cov_matrix().cholesky().is_none() {
                    return Err(Error::Invalid(format!("electrode {e}: feature covariance is not positive definite")));
                }
            }
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.noise_feature_sd.len()
    }
}

/// How trial kinematics are generated.
#[derive(Debug, Clone, PartialEq)]
pub enum KinematicsStyle {
    Ar1 { a: DMatrix<f64>, w: DMatrix<f64> },
    Ar2 { a1: DMatrix<f64>, a2: DMatrix<f64>, w: DMatrix<f64> },
    /// Minimum-jerk center-out velocity toward one of 26 sphere targets,
    /// preceded and followed by holds. `radius` is the reach distance,
    /// `jitter` its relative spread and `movement_bins` the inclusive range
    /// of movement durations.
    Reach {
        radius: f64,
        jitter: f64,
        bin_width: f64,
        movement_bins: (usize, usize),
    },
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one (session, trial, purpose) triple.
pub fn trial_seed(master: u64, session: usize, trial: usize, tag: u64) -> u64 {
    mix(mix(mix(master ^ tag) ^ session as u64) ^ trial as u64)
}

/// The 26 unit directions from the center of a cube to its face centers,
/// edge midpoints and corners.
pub fn reach_targets() -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(26);
    for x in -1i32..=1 {
        for y in -1i32..=1 {
            for z in -1i32..=1 {
                if (x, y, z) == (0, 0, 0) {
                    continue;
                }
                let n = ((x * x + y * y + z * z) as f64).sqrt();
                out.push([x as f64 / n, y as f64 / n, z as f64 / n]);
            }
        }
    }
    out
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
fn psd_sqrt(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = w.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

const AR_BURN_IN: usize = 50;

fn ar_trial(a1: &DMatrix<f64>, a2: &DMatrix<f64>, l: &DMatrix<f64>, n_bins: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let p = a1.nrows();
    let mut prev = DVector::zeros(p);
    let mut prev2 = DVector::zeros(p);
    let mut out = DMatrix::zeros(n_bins, p);
    for t in 0..AR_BURN_IN + n_bins {
        let eps = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = a1 * &prev + a2 * &prev2 + l * eps;
        if t >= AR_BURN_IN {
            out.row_mut(t - AR_BURN_IN).copy_from(&x.transpose());
        }
        prev2 = std::mem::replace(&mut prev, x);
    }
    out
}

/// Velocity of a minimum-jerk movement over bins `onset..onset + moving`,
/// zero elsewhere.
fn reach_trial(dir: [f64; 3], distance: f64, n_bins: usize, onset: usize, moving: usize, bin_width: f64) -> DMatrix<f64> {
    let duration = moving as f64 * bin_width;
    DMatrix::from_fn(n_bins, 3, |t, c| {
        if t < onset || t > onset + moving {
            return 0.0;
        }
        let tau = (t - onset) as f64 / moving as f64;
        let profile = 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau);
        dir[c] * distance * profile / duration
    })
}

/// Kinematics for trials of the given lengths; trial `j` draws from the
/// seed `trial_seed(seed, session, j, ..)`.
pub fn generate_kinematics_for(
    lengths: &[usize],
    p: usize,
    style: &KinematicsStyle,
    seed: u64,
    session: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if let Some(&t) = lengths.iter().find(|&&t| t < 4) {
        return Err(Error::Invalid(format!("trials need at least 4 bins, got {t}")));
    }
    match style {
        KinematicsStyle::Ar1 { a, w } => {
            let zero = DMatrix::zeros(p, p);
            check_ar(&StateModel::ar1(a.clone(), w.clone()), p)?;
            let l = psd_sqrt(w);
            Ok(lengths
                .iter()
                .enumerate()
                .map(|(j, &n)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, session, j, TAG_KINEMATICS));
                    ar_trial(a, &zero, &l, n, &mut rng)
                })
                .collect())
        }
        KinematicsStyle::Ar2 { a1, a2, w } => {
            check_ar(&StateModel::ar2(a1.clone(), a2.clone(), w.clone()), p)?;
            let l = psd_sqrt(w);
            Ok(lengths
                .iter()
                .enumerate()
                .map(|(j, &n)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, session, j, TAG_KINEMATICS));
                    ar_trial(a1, a2, &l, n, &mut rng)
                })
                .collect())
        }
        KinematicsStyle::Reach {
            radius,
            jitter,
            bin_width,
            movement_bins: (lo, hi),
        } => {
            if p != 3 {
                return Err(Error::Invalid(format!("reach kinematics are three-dimensional, got p = {p}")));
            }
            if *lo < 2 || hi < lo {
                return Err(Error::Invalid("movement duration range is invalid".into()));
            }
            let targets = reach_targets();
            lengths
                .iter()
                .enumerate()
                .map(|(j, &n)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, session, j, TAG_KINEMATICS));
                    let dist = radius * (1.0 + jitter * rng.random_range(-1.0..1.0));
                    let moving = rng.random_range(*lo..=*hi).min(n - 1);
                    let onset = rng.random_range(0..=(n - 1 - moving) / 2);
                    Ok(reach_trial(targets[j % targets.len()], dist, n, onset, moving, *bin_width))
                })
                .collect()
        }
    }
}

/// `n_trials` trials of `n_bins` bins each.
pub fn generate_kinematics(
    n_trials: usize,
    n_bins: usize,
    p: usize,
    style: &KinematicsStyle,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    generate_kinematics_for(&vec![n_bins; n_trials], p, style, seed, 0)
}

fn check_ar(model: &StateModel, p: usize) -> Result<()> {
    if model.a.iter().any(|a| a.shape() != (p, p)) || model.w.shape() != (p, p) {
        return Err(Error::Invalid(format!("AR matrices must be {p} x {p}")));
    }
    if model.unstable {
        return Err(Error::Invalid(format!(
            "AR process is not stable (spectral radius {:.6})",
            model.spectral_radius()
        )));
    }
    Ok(())
}

/// Events of one trial on every electrode.
fn trial_events(
    pop: &PopulationSpec,
    factors: &[Vec<DMatrix<f64>>],
    kin: &DMatrix<f64>,
    bin_width: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<WaveformEvent>> {
    let n_bins = kin.nrows();
    let nf = pop.n_features();
    let gaussian = |rng: &mut ChaCha8Rng, mean: &[f64], l: &DMatrix<f64>, scale: f64| -> Vec<f64> {
        let z = DVector::from_fn(nf, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = l * z;
        (0..nf).map(|i| mean[i] + scale * v[i]).collect()
    };
    let noise_l = DMatrix::from_diagonal(&DVector::from_column_slice(&pop.noise_feature_sd));
    let bin_time = |rng: &mut ChaCha8Rng, t: usize| -> f64 {
        // Keep times strictly inside the bin so rounding cannot move them.
        let u: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        (t as f64 + u) * bin_width
    };
    let mut out = Vec::with_capacity(pop.electrodes.len());
    for (e, neurons) in pop.electrodes.iter().enumerate() {
        let mut events = Vec::new();
        for (ni, neuron) in neurons.iter().enumerate() {
            for t in 0..n_bins {
                let row: Vec<f64> = kin.row((t + neuron.lag).min(n_bins - 1)).iter().copied().collect();
                let lambda = neuron.rate(&row) * bin_width;
                let n = poisson(rng, lambda);
                for _ in 0..n {
                    let time = bin_time(rng, t);
                    let features = gaussian(rng, &neuron.feature_mean, &factors[e][ni], 1.0);
                    events.push(WaveformEvent { time, features });
                }
            }
        }
        let lambda = pop.noise_event_rate * bin_width;
        for t in 0..n_bins {
            for _ in 0..poisson(rng, lambda) {
                let time = bin_time(rng, t);
                // Two-component scale mixture around the electrode center.
                let scale = if rng.random_bool(0.5) { 1.0 } else { 2.5 };
                let features = gaussian(rng, &pop.noise_center[e], &noise_l, scale);
                events.push(WaveformEvent { time, features });
            }
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        out.push(events);
    }
    out
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let d = Poisson::new(lambda).expect("positive finite Poisson mean");
    d.sample(rng) as u64
}

/// Spikes, features and background events for one session's kinematics.
pub fn generate_session(
    pop: &PopulationSpec,
    kinematics: &[DMatrix<f64>],
    bin_width: f64,
    session: usize,
) -> Result<Session> {
    let p = kinematics.first().map(|k| k.ncols()).unwrap_or(0);
    pop.validate(p)?;
    let factors: Vec<Vec<DMatrix<f64>>> = pop
        .electrodes
        .iter()
        .map(|ns| ns.iter().map(|n| n.cov_matrix().cholesky().unwrap().l()).collect())
        .collect();
    let trials = kinematics
        .par_iter()
        .enumerate()
        .map(|(j, kin)| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(pop.rng_seed, session, j, TAG_SPIKES));
            Trial {
                kinematics: kin.clone(),
                events: trial_events(pop, &factors, kin, bin_width, &mut rng),
                bin_width,
                start_time: 0.0,
            }
        })
        .collect();
    Ok(Session { trials })
}

/// Named simulator configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Twelve electrodes with two differently tuned neurons each.
    Standard,
    /// One neuron per electrode, so waveforms add nothing beyond counts.
    SingleNeuron,
    /// Strongly tuned single neurons on AR kinematics with spread-out lags.
    LagRecovery,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Preset::Standard),
            "single-neuron" => Ok(Preset::SingleNeuron),
            "lag-recovery" => Ok(Preset::LagRecovery),
            other => Err(Error::Invalid(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleKind {
    Reach,
    Ar1,
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub preset: Preset,
    pub seed: u64,
    pub n_sessions: usize,
    pub trials_per_session: usize,
    pub n_electrodes: usize,
    pub neurons_per_electrode: usize,
    pub bin_width: f64,
    pub min_bins: usize,
    pub max_bins: usize,
    pub style: StyleKind,
    /// Used only by AR kinematics: `k_t = a k_{t-1} + w`, `w ~ N(0, ar_noise I)`.
    pub ar_coefficient: f64,
    pub ar_noise: f64,
    /// Reach distance for reach kinematics.
    pub reach_radius: f64,
    /// Inclusive range of reach movement durations in bins.
    pub movement_min_bins: usize,
    pub movement_max_bins: usize,
    /// When set, every electrode gets this lag.
    pub fixed_lag: Option<usize>,
    pub lag_min: usize,
    pub lag_max: usize,
    pub baseline_rate: f64,
    /// Tuning vector norm in Hz per kinematic unit.
    pub tuning_gain: f64,
    /// How opposed the second neuron's preferred direction is to the first
    /// (1 = exactly opposite, 0 = orthogonal).
    pub opposition: f64,
    pub noise_event_rate: f64,
    /// Half the feature-mean separation between the two neurons of an
    /// electrode, in units of the within-neuron standard deviation.
    pub separation: f64,
}

impl SimConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let base = SimConfig {
            preset,
            seed,
            n_sessions: 10,
            trials_per_session: 26,
            n_electrodes: 12,
            neurons_per_electrode: 2,
            bin_width: DEFAULT_BIN_WIDTH,
            min_bins: 105,
            max_bins: 135,
            style: StyleKind::Reach,
            ar_coefficient: 0.8,
            ar_noise: 9.0,
            reach_radius: 6.0,
            movement_min_bins: 25,
            movement_max_bins: 40,
            fixed_lag: None,
            lag_min: 2,
            lag_max: 10,
            baseline_rate: 60.0,
            tuning_gain: 8.0,
            opposition: 0.85,
            noise_event_rate: 10.0,
            separation: 1.5,
        };
        match preset {
            Preset::Standard => base,
            Preset::SingleNeuron => SimConfig {
                neurons_per_electrode: 1,
                ..base
            },
            Preset::LagRecovery => SimConfig {
                n_sessions: 6,
                trials_per_session: 20,
                neurons_per_electrode: 1,
                style: StyleKind::Ar1,
                noise_event_rate: 5.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sessions == 0 || self.trials_per_session == 0 || self.n_electrodes == 0 {
            return Err(Error::Invalid("sessions, trials and electrodes must be positive".into()));
        }
        if self.neurons_per_electrode == 0 {
            return Err(Error::Invalid("each electrode needs at least one neuron".into()));
        }
        if self.min_bins < 4 || self.max_bins < self.min_bins {
            return Err(Error::Invalid("trial length range is invalid".into()));
        }
        if self.lag_max < self.lag_min {
            return Err(Error::Invalid("lag range is empty".into()));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::Invalid("bin width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.opposition) {
            return Err(Error::Invalid("opposition must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn kinematics_style(&self) -> KinematicsStyle {
        match self.style {
            StyleKind::Reach => KinematicsStyle::Reach {
                radius: self.reach_radius,
                jitter: 0.2,
                bin_width: self.bin_width,
                movement_bins: (self.movement_min_bins, self.movement_max_bins),
            },
            StyleKind::Ar1 => KinematicsStyle::Ar1 {
                a: DMatrix::identity(3, 3) * self.ar_coefficient,
                w: DMatrix::identity(3, 3) * self.ar_noise,
            },
        }
    }
}

/// Features are reported relative to the electrode's average waveform, so
/// their centers sit near zero. The third feature is centered exactly at zero
/// and its first moment depends only on the difference between neurons.
const FEATURE_OFFSET: [f64; N_FEATURES] = [0.0; N_FEATURES];
const FEATURE_SD: [f64; N_FEATURES] = [6.0, 0.04, 3.0, 0.03];

fn unit_vector(rng: &mut ChaCha8Rng, p: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Draws tunings, lags and feature distributions from the configuration.
pub fn build_population(cfg: &SimConfig) -> Result<PopulationSpec> {
    cfg.validate()?;
    let p = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, 0, 0, TAG_POPULATION));
    let mut electrodes = Vec::with_capacity(cfg.n_electrodes);
    let mut noise_center = Vec::with_capacity(cfg.n_electrodes);
    for _ in 0..cfg.n_electrodes {
        let lag = cfg.fixed_lag.unwrap_or_else(|| rng.random_range(cfg.lag_min..=cfg.lag_max));
        let center: Vec<f64> = (0..N_FEATURES)
            .map(|f| FEATURE_OFFSET[f] + if f == 2 { 0.0 } else { 0.5 * FEATURE_SD[f] * rng.random_range(-1.0..1.0) })
            .collect();
        let first = unit_vector(&mut rng, p);
        let mut neurons = Vec::with_capacity(cfg.neurons_per_electrode);
        for n in 0..cfg.neurons_per_electrode {
            let dir = if n == 0 {
                first.clone()
            } else {
                // Component of a random direction orthogonal to the first.
                let r = unit_vector(&mut rng, p);
                let orth = &r - &first * first.dot(&r);
                let orth = if orth.norm() > 1e-6 { orth.normalize() } else { unit_vector(&mut rng, p) };
                let c = cfg.opposition;
                (-&first * c + orth * (1.0 - c * c).sqrt()).normalize()
            };
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            let shift = if cfg.neurons_per_electrode == 1 { 0.0 } else { sign * cfg.separation };
            let mean: Vec<f64> = (0..N_FEATURES).map(|f| center[f] + shift * FEATURE_SD[f]).collect();
            let cov: Vec<Vec<f64>> = (0..N_FEATURES)
                .map(|i| {
                    (0..N_FEATURES)
                        .map(|j| {
                            let r = if i == j { 1.0 } else { 0.2 };
                            r * FEATURE_SD[i] * FEATURE_SD[j]
                        })
                        .collect()
                })
                .collect();
            neurons.push(NeuronSpec {
                baseline_rate: cfg.baseline_rate,
                tuning: (dir * cfg.tuning_gain).iter().copied().collect(),
                lag,
                feature_mean: mean,
                feature_cov: cov,
            });
        }
        electrodes.push(neurons);
        noise_center.push(center);
    }
    Ok(PopulationSpec {
        electrodes,
        noise_event_rate: cfg.noise_event_rate,
        noise_center,
        noise_feature_sd: FEATURE_SD.iter().map(|s| 2.0 * s).collect(),
        rng_seed: cfg.seed,
    })
}

/// Ground truth written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub config: SimConfig,
    /// Lag of each electrode's neurons.
    pub electrode_lags: Vec<usize>,
    pub population: PopulationSpec,
}

pub fn simulate(cfg: &SimConfig) -> Result<(Dataset, Truth)> {
    let pop = build_population(cfg)?;
    let style = cfg.kinematics_style();
    let sessions = (0..cfg.n_sessions)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, s, usize::MAX, TAG_KINEMATICS));
            let lengths: Vec<usize> = (0..cfg.trials_per_session)
                .map(|_| rng.random_range(cfg.min_bins..=cfg.max_bins))
                .collect();
            let kin = generate_kinematics_for(&lengths, 3, &style, cfg.seed, s)?;
            generate_session(&pop, &kin, cfg.bin_width, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        sessions,
        n_electrodes: cfg.n_electrodes,
        feature_names: DEFAULT_FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        bin_width: cfg.bin_width,
        p: 3,
    };
    let truth = Truth {
        config: cfg.clone(),
        electrode_lags: pop.electrodes.iter().map(|ns| ns[0].lag).collect(),
        population: pop,
    };
    Ok((dataset, truth))
}

pub fn write_truth(truth: &Truth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(truth).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Truth> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        file: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}
