//! Noise covariance of the joint observation vector.
//!
//! Count-stream equations (whatever their transform) share a static block
//! estimated from their residuals on the common training support. Waveform
//! equations get a block that scales with the spike counts backing each bin:
//! `δ^{-2} s_j V(w^m)` on the diagonal, `δ^{-2} s_j Cov(w^m, w^n)` between two
//! moments of the same electrode and lag (the same events), and
//! `δ^{-2} s_j s_q C` between identity-transform rows of different electrodes
//! at the same lag, where `C` is the covariance of the two electrodes' per-bin
//! mean moments after removing their best linear kinematic prediction. Rows at different lags observe
//! different bins and are taken as uncorrelated; count and waveform rows
//! are uncorrelated given the counts. A transformed waveform row replaces
//! `V(w^m)` with its per-spike residual variance, and its same-electrode
//! covariances keep the per-event correlation of the raw moments.

use nalgebra::DMatrix;

use crate::datamodel::Trial;
use crate::error::{Error, Result};
use crate::featurize::{StreamId, TransformKind, TrialFeatures, MOMENT_ORDERS};
use crate::linalg::{min_eigenvalue, symmetrize, NormalEquations};

use super::{equation_residuals, EquationSpec, FitData, FittedEquation};

/// Relative pivot size below which a covariance is ridge-repaired.
const REPAIR_THRESHOLD: f64 = 1e-10;
const RIDGE: f64 = 1e-8;

/// Per-event and cross-electrode moment covariances of a training fold.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCovariance {
    pub n_electrodes: usize,
    pub n_features: usize,
    /// Training events per electrode.
    pub event_n: Vec<usize>,
    /// Per electrode, covariance over events of the vector of `w_f^m`
    /// (feature-major, order-minor), divisor `n - 1`.
    pub event_cov: Vec<DMatrix<f64>>,
    /// Cross-electrode covariance of residual per-bin mean moments, indexed
    /// by [`MomentCovariance::slot_index`]. Same-electrode blocks are zero.
    pub cross: DMatrix<f64>,
    /// Mean spike count per bin and electrode.
    pub mean_counts: Vec<f64>,
}

impl MomentCovariance {
    pub fn slots_per_electrode(&self) -> usize {
        self.n_features * MOMENT_ORDERS
    }

    /// Row of a moment stream in `cross`; panics for count streams.
    pub fn slot_index(&self, stream: StreamId) -> usize {
        assert!(!stream.is_count(), "count streams have no moment slot");
        stream.electrode * self.slots_per_electrode() + stream.slot() - 1
    }

    pub fn event_variance(&self, idx: usize) -> f64 {
        let s = self.slots_per_electrode();
        self.event_cov[idx / s][(idx % s, idx % s)]
    }

    /// Per-event covariance of two moments of the same electrode.
    pub fn event_covariance(&self, a: usize, b: usize) -> f64 {
        let s = self.slots_per_electrode();
        debug_assert_eq!(a / s, b / s);
        self.event_cov[a / s][(a % s, b % s)]
    }

    pub fn estimate(
        trials: &[&Trial],
        features: &[&TrialFeatures],
        n_electrodes: usize,
        n_features: usize,
        max_lag: usize,
    ) -> Self {
        let s = n_features * MOMENT_ORDERS;
        let mut event_n = Vec::with_capacity(n_electrodes);
        let mut event_cov = Vec::with_capacity(n_electrodes);
        let mut mean_counts = Vec::with_capacity(n_electrodes);
        for e in 0..n_electrodes {
            let vectors: Vec<Vec<f64>> = trials
                .iter()
                .flat_map(|t| t.events[e].iter())
                .map(|ev| moment_vector(&ev.features, n_features))
                .collect();
            let n = vectors.len();
            let mut cov = DMatrix::zeros(s, s);
            if n >= 2 {
                let mut mean = vec![0.0; s];
                for v in &vectors {
                    for a in 0..s {
                        mean[a] += v[a];
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                for v in &vectors {
                    for a in 0..s {
                        let da = v[a] - mean[a];
                        for b in 0..=a {
                            cov[(a, b)] += da * (v[b] - mean[b]);
                        }
                    }
                }
                for a in 0..s {
                    for b in 0..=a {
                        let c = cov[(a, b)] / (n - 1) as f64;
                        cov[(a, b)] = c;
                        cov[(b, a)] = c;
                    }
                }
            } else if s > 0 {
                log::warn!("electrode {e}: fewer than two training events; moment covariances set to 0");
            }
            event_n.push(n);
            event_cov.push(cov);
            let bins: usize = features.iter().map(|f| f.n_bins).sum();
            let spikes: u64 = features
                .iter()
                .map(|f| f.counts(e).iter().map(|&c| c as u64).sum::<u64>())
                .sum();
            mean_counts.push(if bins > 0 { spikes as f64 / bins as f64 } else { 0.0 });
        }

        let residuals: Vec<Vec<Vec<f64>>> = (0..n_electrodes * s)
            .map(|idx| {
                let stream = StreamId::moment(idx / s, (idx % s) / MOMENT_ORDERS, idx % MOMENT_ORDERS + 1);
                mean_moment_residuals(trials, features, stream, max_lag)
            })
            .collect();
        let total = n_electrodes * s;
        let mut cross = DMatrix::zeros(total, total);
        let mut sparse_pairs = 0usize;
        for a in 0..total {
            for b in 0..a {
                if a / s == b / s {
                    continue;
                }
                let c = paired_covariance(&residuals[a], &residuals[b]);
                let c = c.unwrap_or_else(|| {
                    sparse_pairs += 1;
                    0.0
                });
                cross[(a, b)] = c;
                cross[(b, a)] = c;
            }
        }
        if sparse_pairs > 0 {
            log::warn!("{sparse_pairs} cross-electrode moment pairs have fewer than two paired bins; set to 0");
        }
        MomentCovariance {
            n_electrodes,
            n_features,
            event_n,
            event_cov,
            cross,
            mean_counts,
        }
    }
}

fn moment_vector(features: &[f64], n_features: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(n_features * MOMENT_ORDERS);
    for &w in features.iter().take(n_features) {
        for m in 1..=MOMENT_ORDERS {
            v.push(w.powi(m as i32));
        }
    }
    v
}

/// Per-bin mean moment minus its best lagged linear kinematic prediction;
/// NaN where undefined. Indexed `[trial][bin]`.
fn mean_moment_residuals(
    trials: &[&Trial],
    features: &[&TrialFeatures],
    stream: StreamId,
    max_lag: usize,
) -> Vec<Vec<f64>> {
    let means: Vec<Vec<f64>> = trials
        .iter()
        .zip(features)
        .map(|(tr, f)| {
            let counts = f.counts(stream.electrode);
            f.values(stream)
                .iter()
                .zip(counts)
                .map(|(&v, &c)| if c > 0 { v * tr.bin_width / c as f64 } else { f64::NAN })
                .collect()
        })
        .collect();
    let p = trials.first().map(|t| t.p()).unwrap_or(0);
    let mut best: Option<(f64, usize, crate::linalg::LinearFit)> = None;
    for lag in 0..=max_lag {
        let mut ne = NormalEquations::new(p);
        for (tr, m) in trials.iter().zip(&means) {
            for t in max_lag..tr.n_bins() {
                let y = m[t - lag];
                if y.is_finite() {
                    let row: Vec<f64> = tr.kinematics.row(t).iter().cloned().collect();
                    ne.push(&row, y);
                }
            }
        }
        if let Some(fit) = ne.solve() {
            if best.as_ref().is_none_or(|(r2, _, _)| fit.r_squared > *r2) {
                best = Some((fit.r_squared, lag, fit));
            }
        }
    }
    trials
        .iter()
        .zip(&means)
        .map(|(tr, m)| {
            let mut out = vec![f64::NAN; m.len()];
            match &best {
                Some((_, lag, fit)) => {
                    for t in max_lag..tr.n_bins() {
                        let y = m[t - lag];
                        if y.is_finite() {
                            let row: Vec<f64> = tr.kinematics.row(t).iter().cloned().collect();
                            out[t - lag] = y - fit.predict(&row);
                        }
                    }
                }
                None => {
                    let finite: Vec<f64> = m.iter().cloned().filter(|v| v.is_finite()).collect();
                    if !finite.is_empty() {
                        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
                        for (o, v) in out.iter_mut().zip(m) {
                            if v.is_finite() {
                                *o = v - mean;
                            }
                        }
                    }
                }
            }
            out
        })
        .collect()
}

fn paired_covariance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<f64> {
    let (mut n, mut sa, mut sb, mut sab) = (0usize, 0.0, 0.0, 0.0);
    for (ta, tb) in a.iter().zip(b) {
        for (&x, &y) in ta.iter().zip(tb) {
            if x.is_finite() && y.is_finite() {
                n += 1;
                sa += x;
                sb += y;
                sab += x * y;
            }
        }
    }
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    Some((sab - sa * sb / nf) / (nf - 1.0))
}

/// Mean product of two residual series (divisor `n`).
pub fn residual_covariance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

/// Covariance estimates needed to assemble `U_t` for a set of equations.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCatalog {
    /// Count equations in the order of `count_cov`'s rows.
    pub count_specs: Vec<EquationSpec>,
    pub count_cov: DMatrix<f64>,
    pub moments: MomentCovariance,
}

impl NoiseCatalog {
    pub fn count_index(&self, spec: &EquationSpec) -> Option<usize> {
        self.count_specs.iter().position(|s| s == spec)
    }
}

/// Residual covariance of the count equations plus the fold's moment
/// covariances. Count–waveform covariances are identically zero.
pub fn estimate_noise_catalog(equations: &[FittedEquation], data: &FitData) -> Result<NoiseCatalog> {
    let counts: Vec<&FittedEquation> = equations.iter().filter(|e| e.spec.is_count()).collect();
    let residuals: Vec<Vec<f64>> = counts.iter().map(|e| equation_residuals(e, data)).collect();
    let refs: Vec<&[f64]> = residuals.iter().map(|r| r.as_slice()).collect();
    Ok(catalog_from_residuals(&counts, &refs, &data.moments))
}

/// As [`estimate_noise_catalog`] with the count equations' support
/// residuals already computed.
pub fn catalog_from_residuals(counts: &[&FittedEquation], residuals: &[&[f64]], moments: &MomentCovariance) -> NoiseCatalog {
    let n = counts.len();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        cov[(i, i)] = counts[i].residual_variance;
        for j in 0..i {
            let c = residual_covariance(residuals[i], residuals[j]);
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    NoiseCatalog {
        count_specs: counts.iter().map(|e| e.spec).collect(),
        count_cov: cov,
        moments: moments.clone(),
    }
}

/// What one equation observes at one decoding bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowObs {
    Count,
    Waveform { count: u32 },
    Missing,
}

pub fn row_states(equations: &[FittedEquation], features: &TrialFeatures, t: usize) -> Vec<RowObs> {
    equations
        .iter()
        .map(|eq| match t.checked_sub(eq.spec.lag) {
            None => RowObs::Missing,
            Some(_) if eq.spec.is_count() => RowObs::Count,
            Some(src) => match features.counts(eq.spec.stream.electrode)[src] {
                0 => RowObs::Missing,
                c => RowObs::Waveform { count: c },
            },
        })
        .collect()
}

/// Precomputed coefficients of `U_t` for a fixed ordered set of equations.
#[derive(Debug, Clone)]
pub struct CovarianceLayout {
    /// Model indices of count equations, in model order.
    pub count_rows: Vec<usize>,
    /// Model indices of waveform equations, in model order.
    pub wave_rows: Vec<usize>,
    /// Static covariance over `count_rows`.
    pub count_block: DMatrix<f64>,
    /// Waveform entries are `lin[j,q] s_j + quad[j,q] s_j s_q`.
    lin: DMatrix<f64>,
    quad: DMatrix<f64>,
    /// Expected counts per waveform row when the static covariance is used.
    static_counts: Option<Vec<f64>>,
}

impl CovarianceLayout {
    pub fn new(equations: &[FittedEquation], catalog: &NoiseCatalog, bin_width: f64, static_cov: bool) -> Result<Self> {
        let count_rows: Vec<usize> = (0..equations.len()).filter(|&i| equations[i].spec.is_count()).collect();
        let wave_rows: Vec<usize> = (0..equations.len()).filter(|&i| !equations[i].spec.is_count()).collect();
        let idx = count_rows
            .iter()
            .map(|&i| {
                catalog
                    .count_index(&equations[i].spec)
                    .ok_or_else(|| Error::Model(format!("{} missing from the noise catalog", equations[i].spec)))
            })
            .collect::<Result<Vec<usize>>>()?;
        let count_block = DMatrix::from_fn(idx.len(), idx.len(), |a, b| catalog.count_cov[(idx[a], idx[b])]);

        let m = &catalog.moments;
        let d2 = 1.0 / (bin_width * bin_width);
        let nw = wave_rows.len();
        let mut lin = DMatrix::zeros(nw, nw);
        let mut quad = DMatrix::zeros(nw, nw);
        for (j, &ej) in wave_rows.iter().enumerate() {
            let a = &equations[ej];
            lin[(j, j)] = d2 * a.unit_moment_variance;
            for (q, &eq) in wave_rows.iter().enumerate() {
                let b = &equations[eq];
                if q == j || b.spec.lag != a.spec.lag {
                    continue;
                }
                let (ia, ib) = (m.slot_index(a.spec.stream), m.slot_index(b.spec.stream));
                if a.spec.stream.electrode == b.spec.stream.electrode {
                    // Per-event correlation of the raw moments, carried over to the
                    // per-spike residual scale of each equation.
                    let (va, vb) = (m.event_variance(ia), m.event_variance(ib));
                    if va > 0.0 && vb > 0.0 {
                        let rho = m.event_covariance(ia, ib) / (va * vb).sqrt();
                        lin[(j, q)] = d2 * rho * (a.unit_moment_variance * b.unit_moment_variance).sqrt();
                    }
                } else if a.spec.transform == TransformKind::Identity && b.spec.transform == TransformKind::Identity {
                    quad[(j, q)] = d2 * m.cross[(ia, ib)];
                }
            }
        }
        let static_counts = static_cov.then(|| {
            wave_rows
                .iter()
                .map(|&i| m.mean_counts[equations[i].spec.stream.electrode].max(f64::MIN_POSITIVE))
                .collect()
        });
        Ok(CovarianceLayout {
            count_rows,
            wave_rows,
            count_block,
            lin,
            quad,
            static_counts,
        })
    }

    pub fn n_wave(&self) -> usize {
        self.wave_rows.len()
    }

    /// Effective count used for waveform row `j` given its observed count.
    pub fn effective_count(&self, j: usize, observed: u32) -> f64 {
        match &self.static_counts {
            Some(s) => s[j],
            None => observed as f64,
        }
    }

    /// Waveform block over the waveform rows `rows` (indices into
    /// `wave_rows`) with effective counts `s`.
    pub fn waveform_block(&self, rows: &[usize], s: &[f64]) -> DMatrix<f64> {
        let n = rows.len();
        let mut u = DMatrix::zeros(n, n);
        for a in 0..n {
            let j = rows[a];
            for b in 0..=a {
                let q = rows[b];
                let v = self.lin[(j, q)] * s[a] + self.quad[(j, q)] * s[a] * s[b];
                u[(a, b)] = v;
                u[(b, a)] = v;
            }
        }
        u
    }

    /// Waveform entry for rows `j`, `q` with effective counts `sj`, `sq`.
    #[inline]
    pub fn waveform_entry(&self, j: usize, q: usize, sj: f64, sq: f64) -> f64 {
        self.lin[(j, q)] * sj + self.quad[(j, q)] * sj * sq
    }
}

/// `U_t` over the available rows, ordered by model index.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub u: DMatrix<f64>,
    /// Model indices of the rows of `u`.
    pub rows: Vec<usize>,
}

pub fn assemble_covariance(
    equations: &[FittedEquation],
    catalog: &NoiseCatalog,
    states: &[RowObs],
    bin_width: f64,
    static_cov: bool,
) -> Result<Assembled> {
    if states.len() != equations.len() {
        return Err(Error::Invalid("one row state per equation required".into()));
    }
    let layout = CovarianceLayout::new(equations, catalog, bin_width, static_cov)?;
    let rows: Vec<usize> = (0..equations.len())
        .filter(|&i| states[i] != RowObs::Missing)
        .collect();
    let count_pos = |i: usize| layout.count_rows.iter().position(|&r| r == i);
    let wave_pos = |i: usize| layout.wave_rows.iter().position(|&r| r == i);
    let eff = |i: usize| match states[i] {
        RowObs::Waveform { count } => layout.effective_count(wave_pos(i).unwrap(), count),
        _ => 0.0,
    };
    let n = rows.len();
    let mut u = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..=a {
            let (i, j) = (rows[a], rows[b]);
            let v = match (count_pos(i), count_pos(j)) {
                (Some(x), Some(y)) => layout.count_block[(x, y)],
                (None, None) => layout.waveform_entry(wave_pos(i).unwrap(), wave_pos(j).unwrap(), eff(i), eff(j)),
                _ => 0.0,
            };
            u[(a, b)] = v;
            u[(b, a)] = v;
        }
    }
    Ok(Assembled { u, rows })
}

/// Inverse of a covariance matrix, adding a ridge when the Cholesky
/// factorization fails or a pivot falls below `1e-10` times its diagonal
/// entry. The ridge is `1e-8`, or `1e-8 - 2λ` for a negative smallest
/// eigenvalue `λ`. Both the test and the ridge act on the unit-diagonal
/// rescaling `S^{-1/2} U S^{-1/2}`, so rows on very different scales do
/// not trigger repairs and the result does not depend on row order.
/// Returns the inverse and whether a ridge was added.
///
/// The matrix is split into the connected components of its nonzero
/// pattern and each component is inverted and repaired on its own, so a
/// ridge never touches rows that are uncorrelated with the defect.
pub fn invert_with_repair(u: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let n = u.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), false));
    }
    let mean = u.trace() / n as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let components = connected_components(u);
    if components.len() <= 1 {
        return invert_component(u, mean);
    }
    let mut inv = DMatrix::zeros(n, n);
    let mut any = false;
    for rows in &components {
        let sub = DMatrix::from_fn(rows.len(), rows.len(), |a, b| u[(rows[a], rows[b])]);
        let (si, repaired) = invert_component(&sub, mean)?;
        any |= repaired;
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in rows.iter().enumerate() {
                inv[(i, j)] = si[(a, b)];
            }
        }
    }
    Ok((inv, any))
}

/// Index sets of the connected components of the graph with an edge
/// wherever `u[(i, j)] != 0`, each sorted, ordered by smallest index.
fn connected_components(u: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = u.nrows();
    let mut label = vec![usize::MAX; n];
    let mut out = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        label[start] = id;
        let mut members = vec![start];
        let mut next = 0;
        while next < members.len() {
            let i = members[next];
            next += 1;
            for j in 0..n {
                if label[j] == usize::MAX && (u[(i, j)] != 0.0 || u[(j, i)] != 0.0) {
                    label[j] = id;
                    members.push(j);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// `mean` is the mean diagonal of the whole matrix, used to scale rows
/// with a nonpositive diagonal.
fn invert_component(u: &DMatrix<f64>, mean: f64) -> Result<(DMatrix<f64>, bool)> {
    let n = u.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| if u[(i, i)] > 0.0 { u[(i, i)] } else { mean })
        .collect();
    if let Some(ch) = u.clone().cholesky() {
        let l = ch.l_dirty();
        if (0..n).all(|i| l[(i, i)] * l[(i, i)] >= REPAIR_THRESHOLD * scale[i]) {
            return Ok((symmetrize(&ch.inverse()), false));
        }
    }
    let root: Vec<f64> = scale.iter().map(|v| v.sqrt()).collect();
    let corr = DMatrix::from_fn(n, n, |i, j| u[(i, j)] / (root[i] * root[j]));
    let lambda = min_eigenvalue(&corr);
    // An indefinite block is shifted so that its most negative direction
    // ends up with variance |λ| instead of nearly zero, which would give
    // that direction almost unlimited weight.
    let ridge = RIDGE.max(RIDGE - 2.0 * lambda);
    log::debug!("covariance of size {n} repaired with relative ridge {ridge:e} (min scaled eigenvalue {lambda:e})");
    let mut repaired = u.clone();
    for i in 0..n {
        repaired[(i, i)] += ridge * scale[i];
    }
    let ch = repaired.cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok((symmetrize(&ch.inverse()), true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::WaveformEvent;
    use crate::testutil::small_dataset;
    use crate::encode::{fit_equation, FitOptions};
    use crate::featurize::FeatureCache;

    #[test]
    fn single_count_equation_catalog_is_residual_variance() {
        let ds = small_dataset(1, 3);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 2);
        let eq = fit_equation(
            EquationSpec::new(StreamId::count(0), 1, TransformKind::Identity),
            &data,
            &FitOptions::default(),
        )
        .unwrap();
        let cat = estimate_noise_catalog(std::slice::from_ref(&eq), &data).unwrap();
        assert_eq!(cat.count_cov.nrows(), 1);
        assert_eq!(cat.count_cov[(0, 0)], eq.residual_variance);
        let res = equation_residuals(&eq, &data);
        assert!((residual_covariance(&res, &res) - eq.residual_variance).abs() < 1e-12 * eq.residual_variance);
    }

    #[test]
    fn count_waveform_entries_are_zero() {
        let ds = small_dataset(3, 4);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 2);
        let specs = [
            EquationSpec::new(StreamId::count(0), 0, TransformKind::Identity),
            EquationSpec::new(StreamId::moment(0, 0, 1), 0, TransformKind::Identity),
            EquationSpec::new(StreamId::count(1), 2, TransformKind::Sqrt),
            EquationSpec::new(StreamId::moment(1, 0, 1), 0, TransformKind::Identity),
        ];
        let eqs: Vec<_> = specs
            .iter()
            .map(|&s| fit_equation(s, &data, &FitOptions::default()).unwrap())
            .collect();
        let cat = estimate_noise_catalog(&eqs, &data).unwrap();
        let states = vec![
            RowObs::Count,
            RowObs::Waveform { count: 2 },
            RowObs::Count,
            RowObs::Waveform { count: 3 },
        ];
        let a = assemble_covariance(&eqs, &cat, &states, ds.bin_width, false).unwrap();
        assert_eq!(a.rows, vec![0, 1, 2, 3]);
        for (i, j) in [(0, 1), (0, 3), (2, 1), (2, 3)] {
            assert_eq!(a.u[(i, j)], 0.0);
            assert_eq!(a.u[(j, i)], 0.0);
        }
        // Cross-electrode waveform entry follows δ^{-2} s_j s_q C.
        let m = &cat.moments;
        let c = m.cross[(m.slot_index(specs[1].stream), m.slot_index(specs[3].stream))];
        let expect = 2.0 * 3.0 * c / (ds.bin_width * ds.bin_width);
        assert!((a.u[(1, 3)] - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
    }

    #[test]
    fn hand_evaluated_waveform_diagonal() {
        let ds = small_dataset(1, 1);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 0);
        let mut eq = fit_equation(
            EquationSpec::new(StreamId::moment(0, 0, 1), 0, TransformKind::Identity),
            &data,
            &FitOptions::default(),
        )
        .unwrap();
        eq.unit_moment_variance = 2.0;
        let cat = estimate_noise_catalog(std::slice::from_ref(&eq), &data).unwrap();
        let a = assemble_covariance(&[eq], &cat, &[RowObs::Waveform { count: 3 }], 0.016, false).unwrap();
        assert!((a.u[(0, 0)] - 23437.5).abs() < 1e-9);
    }

    #[test]
    fn same_electrode_transformed_pair_uses_event_correlation() {
        let ds = small_dataset(2, 8);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 1);
        let specs = [
            EquationSpec::new(StreamId::moment(0, 0, 1), 1, TransformKind::Identity),
            EquationSpec::new(StreamId::moment(0, 2, 1), 1, TransformKind::Ace),
            EquationSpec::new(StreamId::moment(0, 3, 2), 0, TransformKind::Ace),
            EquationSpec::new(StreamId::moment(1, 0, 1), 1, TransformKind::Ace),
        ];
        let eqs: Vec<_> = specs
            .iter()
            .map(|&s| fit_equation(s, &data, &FitOptions::default()).unwrap())
            .collect();
        let cat = estimate_noise_catalog(&eqs, &data).unwrap();
        let states = [2, 2, 2, 5].map(|count| RowObs::Waveform { count }).to_vec();
        let a = assemble_covariance(&eqs, &cat, &states, ds.bin_width, false).unwrap();
        let m = &cat.moments;
        let (i0, i2) = (m.slot_index(specs[0].stream), m.slot_index(specs[1].stream));
        let rho = m.event_covariance(i0, i2) / (m.event_variance(i0) * m.event_variance(i2)).sqrt();
        let expect = 2.0 * rho * (eqs[0].unit_moment_variance * eqs[1].unit_moment_variance).sqrt()
            / (ds.bin_width * ds.bin_width);
        assert!((a.u[(0, 1)] - expect).abs() <= 1e-12 * expect.abs());
        assert_eq!(a.u[(0, 1)], a.u[(1, 0)]);
        // Different lags and different electrodes stay uncorrelated for transformed rows.
        for (i, j) in [(0, 2), (1, 2), (0, 3), (1, 3), (2, 3)] {
            assert_eq!(a.u[(i, j)], 0.0);
        }
    }

    fn one_electrode_model() -> (Vec<FittedEquation>, NoiseCatalog, f64) {
        let ds = small_dataset(2, 9);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 1);
        let specs = [
            EquationSpec::new(StreamId::count(0), 1, TransformKind::Sqrt),
            EquationSpec::new(StreamId::moment(0, 0, 1), 1, TransformKind::Identity),
            EquationSpec::new(StreamId::moment(0, 1, 2), 1, TransformKind::Ace),
            EquationSpec::new(StreamId::count(1), 0, TransformKind::Identity),
            EquationSpec::new(StreamId::moment(0, 2, 1), 1, TransformKind::Identity),
            EquationSpec::new(StreamId::moment(0, 3, 1), 1, TransformKind::Ace),
        ];
        let eqs: Vec<_> = specs
            .iter()
            .map(|&s| fit_equation(s, &data, &FitOptions::default()).unwrap())
            .collect();
        let cat = estimate_noise_catalog(&eqs, &data).unwrap();
        (eqs, cat, ds.bin_width)
    }

    proptest::proptest! {
        #[test]
        fn assembled_covariance_is_symmetric_with_a_static_count_block(
            count in 0u32..40,
        ) {
            let (eqs, cat, delta) = one_electrode_model();
            // Every waveform row reads the same electrode and bin, so they share one count.
            let mut states = vec![RowObs::Count; eqs.len()];
            for i in [1usize, 2, 4, 5] {
                states[i] = if count == 0 { RowObs::Missing } else { RowObs::Waveform { count } };
            }
            let a = assemble_covariance(&eqs, &cat, &states, delta, false).unwrap();
            proptest::prop_assert_eq!(&a.u, &a.u.transpose());
            let counts_at: Vec<usize> = a.rows.iter().enumerate().filter(|(_, &r)| r == 0 || r == 3).map(|(k, _)| k).collect();
            let block = DMatrix::from_fn(2, 2, |i, j| a.u[(counts_at[i], counts_at[j])]);
            proptest::prop_assert_eq!(block, cat.count_cov.clone());
            // All waveform rows share one electrode, so the block is PSD without repair.
            let lambda = a.u.clone().symmetric_eigen().eigenvalues.min();
            proptest::prop_assert!(lambda >= -1e-10 * a.u.norm(), "min eigenvalue {}", lambda);
        }
    }

    #[test]
    fn all_zero_counts_leave_count_block() {
        let ds = small_dataset(2, 5);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 0);
        let specs = [
            EquationSpec::new(StreamId::count(0), 0, TransformKind::Identity),
            EquationSpec::new(StreamId::moment(0, 1, 2), 0, TransformKind::Identity),
            EquationSpec::new(StreamId::count(1), 0, TransformKind::Identity),
        ];
        let eqs: Vec<_> = specs
            .iter()
            .map(|&s| fit_equation(s, &data, &FitOptions::default()).unwrap())
            .collect();
        let cat = estimate_noise_catalog(&eqs, &data).unwrap();
        let a = assemble_covariance(&eqs, &cat, &[RowObs::Count, RowObs::Missing, RowObs::Count], 0.016, false).unwrap();
        assert_eq!(a.rows, vec![0, 2]);
        assert_eq!(a.u, cat.count_cov);
    }

    #[test]
    fn duplicated_feature_has_unit_correlation() {
        let mut ds = small_dataset(1, 6);
        for s in &mut ds.sessions {
            for t in &mut s.trials {
                for ev in &mut t.events[0] {
                    ev.features[1] = ev.features[0];
                }
            }
        }
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 0);
        let m = &data.moments;
        let (a, b) = (
            m.slot_index(StreamId::moment(0, 0, 1)),
            m.slot_index(StreamId::moment(0, 1, 1)),
        );
        let rho = m.event_covariance(a, b) / (m.event_variance(a) * m.event_variance(b)).sqrt();
        assert!((rho - 1.0).abs() < 1e-9);
    }

    #[test]
    fn event_covariance_matches_two_pass_oracle() {
        let ds = small_dataset(1, 7);
        let cache = FeatureCache::build(&ds).unwrap();
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 0);
        let w: Vec<f64> = ds.sessions[0].trials.iter().flat_map(|t| t.events[0].iter().map(|e| e.features[2])).collect();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let idx = data.moments.slot_index(StreamId::moment(0, 2, 1));
        assert!((data.moments.event_variance(idx) - var).abs() < 1e-10 * var);
    }

    #[test]
    fn repair_handles_singular_and_indefinite() {
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (_, repaired) = invert_with_repair(&ok).unwrap();
        assert!(!repaired);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (inv, repaired) = invert_with_repair(&singular).unwrap();
        assert!(repaired && inv.iter().all(|v| v.is_finite()));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (inv, repaired) = invert_with_repair(&indefinite).unwrap();
        assert!(repaired);
        assert!(min_eigenvalue(&inv) > 0.0);
        // Eigenvalues 3 and -1 become 3 + 2 and -1 + 2 (plus 1e-8).
        let expect = DMatrix::from_row_slice(2, 2, &[3.0, 2.0, 2.0, 3.0]).try_inverse().unwrap();
        assert!((&inv - expect).amax() < 1e-7);
        assert!(invert_with_repair(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn badly_scaled_but_well_conditioned_blocks_are_not_repaired() {
        let d = [1e10f64, 1.0, 3e4];
        let corr = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.3, 1.0, 0.1, -0.2, 0.1, 1.0]);
        let u = DMatrix::from_fn(3, 3, |i, j| corr[(i, j)] * (d[i] * d[j]).sqrt());
        let (inv, repaired) = invert_with_repair(&u).unwrap();
        assert!(!repaired);
        let eye = &u * &inv;
        assert!((eye - DMatrix::<f64>::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn components_are_inverted_and_repaired_separately() {
        // Rows 0 and 2 form an indefinite pair; row 1 is uncorrelated.
        let u = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 0.0, 5.0, 0.0, 2.0, 0.0, 1.0]);
        let (inv, repaired) = invert_with_repair(&u).unwrap();
        assert!(repaired);
        assert!((inv[(1, 1)] - 0.2).abs() < 1e-15);
        assert_eq!(inv[(0, 1)], 0.0);
        let pair = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (pi, _) = invert_with_repair(&pair).unwrap();
        assert!((inv[(0, 2)] - pi[(0, 1)]).abs() < 1e-12);
        assert_eq!(connected_components(&u), vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn repair_is_independent_of_row_order() {
        let u = DMatrix::from_row_slice(3, 3, &[4.0, 3.0, 2.5, 3.0, 2.0, 0.1, 2.5, 0.1, 9.0]);
        let perm = [2usize, 0, 1];
        let up = DMatrix::from_fn(3, 3, |i, j| u[(perm[i], perm[j])]);
        let (a, ra) = invert_with_repair(&u).unwrap();
        let (b, rb) = invert_with_repair(&up).unwrap();
        assert!(ra && rb);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[(perm[i], perm[j])] - b[(i, j)]).abs() < 1e-10 * a.amax());
            }
        }
    }

    #[test]
    fn moment_vector_layout() {
        let v = moment_vector(&[2.0, -1.0, 3.0, 0.5], 4);
        assert_eq!(v, vec![2.0, 4.0, -1.0, 1.0, 3.0, 9.0, 0.5, 0.25]);
        let ev = WaveformEvent {
            time: 0.0,
            features: vec![1.0; 4],
        };
        assert_eq!(moment_vector(&ev.features, 2).len(), 4);
    }
}
