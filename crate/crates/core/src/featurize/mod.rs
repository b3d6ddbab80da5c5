//! Binned spike counts, per-bin waveform moments, lag alignment and
//! response transformations.

mod ace;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Trial, TrialId};
use crate::error::{Error, Result};

pub use ace::{fit_ace, AceLookup, AceSmoother};

/// Moment orders per waveform feature.
pub const MOMENT_ORDERS: usize = 2;

pub const DEFAULT_MAX_LAG: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StreamKind {
    SpikeCount,
    /// `feature` is zero based, `order` is 1 or 2.
    Moment { feature: u8, order: u8 },
}

/// One neural series: an electrode's spike count or one waveform moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub electrode: usize,
    pub kind: StreamKind,
}

impl StreamId {
    pub fn count(electrode: usize) -> Self {
        StreamId {
            electrode,
            kind: StreamKind::SpikeCount,
        }
    }

    pub fn moment(electrode: usize, feature: usize, order: usize) -> Self {
        StreamId {
            electrode,
            kind: StreamKind::Moment {
                feature: feature as u8,
                order: order as u8,
            },
        }
    }

    pub fn is_count(&self) -> bool {
        matches!(self.kind, StreamKind::SpikeCount)
    }

    /// Position of the stream inside its electrode's block of streams:
    /// 0 for the count, then feature-major moments.
    pub fn slot(&self) -> usize {
        match self.kind {
            StreamKind::SpikeCount => 0,
            StreamKind::Moment { feature, order } => {
                1 + feature as usize * MOMENT_ORDERS + (order as usize - 1)
            }
        }
    }

    /// Every stream of one electrode: 1 count + `n_features * 2` moments.
    pub fn all_for(electrode: usize, n_features: usize) -> Vec<StreamId> {
        let mut out = vec![StreamId::count(electrode)];
        for f in 0..n_features {
            for m in 1..=MOMENT_ORDERS {
                out.push(StreamId::moment(electrode, f, m));
            }
        }
        out
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            StreamKind::SpikeCount => write!(f, "e{}:count", self.electrode),
            StreamKind::Moment { feature, order } => {
                write!(f, "e{}:f{}m{}", self.electrode, feature + 1, order)
            }
        }
    }
}

impl FromStr for StreamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("bad stream id {s:?}"));
        let (e, kind) = s.split_once(':').ok_or_else(bad)?;
        let electrode: usize = e.strip_prefix('e').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if kind == "count" {
            return Ok(StreamId::count(electrode));
        }
        let rest = kind.strip_prefix('f').ok_or_else(bad)?;
        let (feat, order) = rest.split_once('m').ok_or_else(bad)?;
        let feat: usize = feat.parse().map_err(|_| bad())?;
        let order: usize = order.parse().map_err(|_| bad())?;
        if feat == 0 || !(1..=MOMENT_ORDERS).contains(&order) {
            return Err(bad());
        }
        Ok(StreamId::moment(electrode, feat - 1, order))
    }
}

/// A per-bin series together with the spike counts backing each bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedSeries {
    pub stream: StreamId,
    pub values: Vec<f64>,
    pub counts: Vec<u32>,
}

fn check_electrode(trial: &Trial, electrode: usize) -> Result<()> {
    if electrode >= trial.events.len() {
        return Err(Error::Invalid(format!(
            "electrode {electrode} out of range ({} electrodes)",
            trial.events.len()
        )));
    }
    Ok(())
}

/// Number of events of `electrode` in every bin of the trial.
pub fn bin_counts(trial: &Trial, electrode: usize) -> Result<BinnedSeries> {
    check_electrode(trial, electrode)?;
    let mut counts = vec![0u32; trial.n_bins()];
    for ev in &trial.events[electrode] {
        if let Some(t) = trial.bin_of(ev.time) {
            counts[t] += 1;
        }
    }
    Ok(BinnedSeries {
        stream: StreamId::count(electrode),
        values: counts.iter().map(|&c| c as f64).collect(),
        counts,
    })
}

/// Per-bin sum of `feature^order` over the bin's events, divided by the bin width.
pub fn moment_series(trial: &Trial, electrode: usize, feature: usize, order: usize) -> Result<BinnedSeries> {
    check_electrode(trial, electrode)?;
    if order == 0 {
        return Err(Error::Invalid("moment order must be at least 1".into()));
    }
    let mut values = vec![0.0; trial.n_bins()];
    let mut counts = vec![0u32; trial.n_bins()];
    for ev in &trial.events[electrode] {
        let w = *ev.features.get(feature).ok_or_else(|| {
            Error::Invalid(format!("feature {feature} out of range ({} features)", ev.features.len()))
        })?;
        if let Some(t) = trial.bin_of(ev.time) {
            values[t] += w.powi(order as i32);
            counts[t] += 1;
        }
    }
    let inv_width = 1.0 / trial.bin_width;
    for v in &mut values {
        *v *= inv_width;
    }
    Ok(BinnedSeries {
        stream: StreamId::moment(electrode, feature, order),
        values,
        counts,
    })
}

/// Pairs the series at bin `t` with the kinematics at bin `t + lag`.
///
/// Row `i` of the output is `(series[i], kin[i + lag])`, so the neural
/// activity leads the kinematics by `lag` bins.
pub fn lag_align(series: &BinnedSeries, kin: &DMatrix<f64>, lag: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let t = kin.nrows();
    if series.values.len() != t {
        return Err(Error::Invalid(format!(
            "series has {} bins, kinematics {}",
            series.values.len(),
            t
        )));
    }
    if lag >= t {
        return Err(Error::TrialTooShort { bins: t, lag });
    }
    let n = t - lag;
    let response = series.values[..n].to_vec();
    let design = kin.rows(lag, n).into_owned();
    Ok((response, design))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TransformKind {
    Identity,
    Sqrt,
    Ace,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [TransformKind::Identity, TransformKind::Sqrt, TransformKind::Ace];

    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Sqrt => "sqrt",
            TransformKind::Ace => "ace",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformKind::Identity),
            "sqrt" => Ok(TransformKind::Sqrt),
            "ace" => Ok(TransformKind::Ace),
            other => Err(Error::Invalid(format!("unknown transform {other:?}"))),
        }
    }
}

/// A fitted response transformation.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformModel {
    Identity,
    /// `abs` takes the square root of the absolute value (signed moments).
    Sqrt { abs: bool },
    Ace(AceLookup),
}

impl TransformModel {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformModel::Identity => TransformKind::Identity,
            TransformModel::Sqrt { .. } => TransformKind::Sqrt,
            TransformModel::Ace(_) => TransformKind::Ace,
        }
    }

    pub fn apply_value(&self, x: f64) -> Result<f64> {
        match self {
            TransformModel::Identity => Ok(x),
            TransformModel::Sqrt { abs: true } => Ok(x.abs().sqrt()),
            TransformModel::Sqrt { abs: false } => {
                if x < 0.0 {
                    Err(Error::NegativeSqrt(x))
                } else {
                    Ok(x.sqrt())
                }
            }
            TransformModel::Ace(lookup) => Ok(lookup.eval(x)),
        }
    }
}

/// Applies `tm` elementwise; the backing counts are carried through.
pub fn apply_transform(tm: &TransformModel, series: &BinnedSeries) -> Result<BinnedSeries> {
    let values = series
        .values
        .iter()
        .map(|&x| tm.apply_value(x))
        .collect::<Result<Vec<f64>>>()?;
    Ok(BinnedSeries {
        stream: series.stream,
        values,
        counts: series.counts.clone(),
    })
}

/// All raw series of one trial, computed once and shared by every fit.
#[derive(Debug, Clone)]
pub struct TrialFeatures {
    pub n_bins: usize,
    n_features: usize,
    counts: Vec<Vec<u32>>,
    /// Indexed by `electrode * streams_per_electrode + slot`; slot 0 is the count.
    series: Vec<Vec<f64>>,
}

impl TrialFeatures {
    pub fn compute(trial: &Trial, n_features: usize) -> Result<Self> {
        let n_electrodes = trial.events.len();
        let per = 1 + n_features * MOMENT_ORDERS;
        let mut counts = Vec::with_capacity(n_electrodes);
        let mut series = Vec::with_capacity(n_electrodes * per);
        for e in 0..n_electrodes {
            let c = bin_counts(trial, e)?;
            series.push(c.values);
            counts.push(c.counts);
            for f in 0..n_features {
                for m in 1..=MOMENT_ORDERS {
                    series.push(moment_series(trial, e, f, m)?.values);
                }
            }
        }
        Ok(TrialFeatures {
            n_bins: trial.n_bins(),
            n_features,
            counts,
            series,
        })
    }

    pub fn counts(&self, electrode: usize) -> &[u32] {
        &self.counts[electrode]
    }

    pub fn values(&self, stream: StreamId) -> &[f64] {
        let per = 1 + self.n_features * MOMENT_ORDERS;
        &self.series[stream.electrode * per + stream.slot()]
    }

    pub fn series(&self, stream: StreamId) -> BinnedSeries {
        BinnedSeries {
            stream,
            values: self.values(stream).to_vec(),
            counts: self.counts(stream.electrode).to_vec(),
        }
    }
}

/// Raw series for every trial of a dataset.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    sessions: Vec<Vec<TrialFeatures>>,
}

impl FeatureCache {
    pub fn build(dataset: &Dataset) -> Result<Self> {
        let sessions = dataset
            .sessions
            .iter()
            .map(|s| {
                s.trials
                    .iter()
                    .map(|t| TrialFeatures::compute(t, dataset.n_features()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureCache { sessions })
    }

    pub fn get(&self, id: TrialId) -> &TrialFeatures {
        &self.sessions[id.session][id.trial]
    }
}
