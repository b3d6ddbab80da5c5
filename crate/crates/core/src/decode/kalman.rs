//! Kalman filter in information form over the (possibly stacked) state.

use nalgebra::{DMatrix, DVector};

use crate::datamodel::Trial;
use crate::encode::StateModel;
use crate::error::{Error, Result};
use crate::featurize::TrialFeatures;

use super::{DecodingModel, KfInit, Prediction, WaveCache};

/// Filtered mean and covariance of the stacked state.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Rewrites an AR(2) model as AR(1) over `(k_t, k_{t-1})`: the companion
/// matrix with `W` in the top-left block.
pub fn stack_ar2(state: &StateModel) -> Result<StateModel> {
    if state.order != 2 {
        return Err(Error::Invalid(format!("expected an order-2 state model, got order {}", state.order)));
    }
    let (f, q) = transition(state);
    Ok(StateModel {
        order: 1,
        a: vec![f],
        w: q,
        degenerate: state.degenerate,
        unstable: state.unstable,
    })
}

/// Transition matrix and noise covariance of the stacked state.
pub fn transition(state: &StateModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = state.p();
    let d = p * state.order;
    let mut q = DMatrix::zeros(d, d);
    q.view_mut((0, 0), (p, p)).copy_from(&state.w);
    (state.companion(), q)
}

/// `[B, 0, ...]`: observations see only the current kinematics.
pub fn embed_observation(b: &DMatrix<f64>, order: usize) -> DMatrix<f64> {
    let p = b.ncols();
    let mut out = DMatrix::zeros(b.nrows(), p * order);
    out.view_mut((0, 0), (b.nrows(), p)).copy_from(b);
    out
}

/// One predict-update step with observation information `(g, h)` on the
/// first `p` state coordinates.
///
/// Prior `x- = F x`, `S- = F S F' + Q`; posterior covariance
/// `(I + S- G)^{-1} S-` and mean `x- + S_post (h - G x-)`. With `g = 0`
/// the posterior equals the prior.
pub fn kf_update(
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    prev: &FilterState,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
) -> FilterState {
    let mut kernel = KfKernel::new(f, q, g.nrows());
    let mut mean: Vec<f64> = prev.mean.iter().copied().collect();
    let mut cov: Vec<f64> = prev.cov.transpose().iter().copied().collect();
    kernel.step(&mut mean, &mut cov, g.as_slice(), h.as_slice(), true);
    kernel.to_state(&mean, &cov)
}

/// Allocation-free Kalman step on small row-major buffers.
///
/// The observation information `g` is column-major `p x p` (symmetric, so
/// the storage order does not matter) and touches the first `p` of the `d`
/// state coordinates.
#[derive(Debug, Clone)]
pub(crate) struct KfKernel {
    d: usize,
    p: usize,
    f: Vec<f64>,
    q: Vec<f64>,
    tmp: Vec<f64>,
    a: Vec<f64>,
    x: Vec<f64>,
    v: Vec<f64>,
}

impl KfKernel {
    pub(crate) fn new(f: &DMatrix<f64>, q: &DMatrix<f64>, p: usize) -> Self {
        let d = f.nrows();
        let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        KfKernel {
            d,
            p,
            f: row_major(f),
            q: row_major(q),
            tmp: vec![0.0; d * d],
            a: vec![0.0; d * d],
            x: vec![0.0; d * d],
            v: vec![0.0; d],
        }
    }

    pub(crate) fn dim(&self) -> usize {
        self.d
    }

    pub(crate) fn to_state(&self, mean: &[f64], cov: &[f64]) -> FilterState {
        let d = self.d;
        FilterState {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_row_slice(d, d, cov),
        }
    }

    /// Advances `(mean, cov)` through the transition when `predict` is set,
    /// then conditions on `(g, h)`.
    pub(crate) fn step(&mut self, mean: &mut [f64], cov: &mut [f64], g: &[f64], h: &[f64], predict: bool) {
        let (d, p) = (self.d, self.p);
        if predict {
            for i in 0..d {
                self.v[i] = (0..d).map(|k| self.f[i * d + k] * mean[k]).sum();
            }
            mean.copy_from_slice(&self.v);
            // tmp = F S
            for i in 0..d {
                for j in 0..d {
                    self.tmp[i * d + j] = (0..d).map(|k| self.f[i * d + k] * cov[k * d + j]).sum();
                }
            }
            // S = tmp F' + Q
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] = (0..d).map(|k| self.tmp[i * d + k] * self.f[j * d + k]).sum::<f64>() + self.q[i * d + j];
                }
            }
            symmetrize_in_place(cov, d);
        }
        if g.iter().all(|&v| v == 0.0) {
            return;
        }
        // a = I + S G*, where G* holds g in its top-left block.
        for i in 0..d {
            for j in 0..d {
                let mut acc = if i == j { 1.0 } else { 0.0 };
                if j < p {
                    for k in 0..p {
                        acc += cov[i * d + k] * g[j * p + k];
                    }
                }
                self.a[i * d + j] = acc;
            }
        }
        self.x.copy_from_slice(cov);
        if !lu_solve_in_place(&mut self.a, &mut self.x, d) {
            log::warn!("singular Kalman update; keeping the prior");
            return;
        }
        symmetrize_in_place(&mut self.x, d);
        for k in 0..p {
            let gx: f64 = (0..p).map(|l| g[l * p + k] * mean[l]).sum();
            self.v[k] = h[k] - gx;
        }
        for i in 0..d {
            mean[i] += (0..p).map(|k| self.x[i * d + k] * self.v[k]).sum::<f64>();
        }
        cov.copy_from_slice(&self.x);
    }
}

fn symmetrize_in_place(m: &mut [f64], d: usize) {
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = v;
            m[j * d + i] = v;
        }
    }
}

/// Solves `a X = b` for row-major `d x d` matrices by LU with partial
/// pivoting, overwriting `b` with `X`. Returns false on a zero pivot.
fn lu_solve_in_place(a: &mut [f64], b: &mut [f64], d: usize) -> bool {
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&x, &y| a[x * d + col].abs().total_cmp(&a[y * d + col].abs()))
            .unwrap();
        let pv = a[piv * d + col];
        if pv == 0.0 || !pv.is_finite() {
            return false;
        }
        if piv != col {
            for j in 0..d {
                a.swap(piv * d + j, col * d + j);
                b.swap(piv * d + j, col * d + j);
            }
        }
        for r in col + 1..d {
            let factor = a[r * d + col] / pv;
            if factor == 0.0 {
                continue;
            }
            for j in col..d {
                a[r * d + j] -= factor * a[col * d + j];
            }
            for j in 0..d {
                b[r * d + j] -= factor * b[col * d + j];
            }
        }
    }
    for col in (0..d).rev() {
        let pv = a[col * d + col];
        for j in 0..d {
            let mut acc = b[col * d + j];
            for k in col + 1..d {
                acc -= a[col * d + k] * b[k * d + j];
            }
            b[col * d + j] = acc / pv;
        }
    }
    true
}

/// Initial filter state for a trial, before any observation.
pub(crate) fn initial_state(state: &StateModel, trial: &Trial, init: KfInit) -> (Vec<f64>, Vec<f64>) {
    let p = state.p();
    let d = p * state.order;
    match init {
        KfInit::TrueVelocity => {
            let k0: Vec<f64> = trial.kinematics.row(0).iter().copied().collect();
            ((0..d).map(|i| k0[i % p]).collect(), vec![0.0; d * d])
        }
        KfInit::Zero => {
            let mut cov = vec![0.0; d * d];
            for b in 0..state.order {
                for i in 0..p {
                    for j in 0..p {
                        cov[(b * p + i) * d + b * p + j] = state.w[(i, j)];
                    }
                }
            }
            (vec![0.0; d], cov)
        }
    }
}

pub fn kalman_decode(model: &DecodingModel, trial: &Trial, features: &TrialFeatures, init: KfInit) -> Result<Prediction> {
    let mut cache = WaveCache::default();
    kalman_decode_with(model, trial, features, init, &mut cache)
}

pub fn kalman_decode_with(
    model: &DecodingModel,
    trial: &Trial,
    features: &TrialFeatures,
    init: KfInit,
    cache: &mut WaveCache,
) -> Result<Prediction> {
    let state = model
        .fitted
        .state
        .as_ref()
        .ok_or_else(|| Error::Model("Bayesian decoding needs a state model".into()))?;
    let p = model.p();
    let n = trial.n_bins();
    let (f, q) = transition(state);
    let mut kernel = KfKernel::new(&f, &q, p);
    let d = kernel.dim();
    let mut kin_hat = DMatrix::zeros(n, p);
    let mut used_equations = Vec::with_capacity(n);
    let mut min_rel_eig = f64::INFINITY;

    let (mut mean, mut cov) = initial_state(state, trial, init);
    for t in 0..n {
        if t == 0 && init == KfInit::TrueVelocity {
            used_equations.push(0);
        } else {
            let info = model.bin_information(features, t, cache)?;
            kernel.step(&mut mean, &mut cov, info.g.as_slice(), info.h.as_slice(), t > 0);
            used_equations.push(info.used);
        }
        for c in 0..p {
            kin_hat[(t, c)] = mean[c];
        }
        let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if t > 0 && scale > 0.0 {
            let eig = crate::linalg::min_eigenvalue(&DMatrix::from_row_slice(d, d, &cov));
            min_rel_eig = min_rel_eig.min(eig / scale);
        }
    }
    if min_rel_eig == f64::INFINITY {
        min_rel_eig = 0.0;
    }
    Ok(Prediction {
        kin_hat,
        used_equations,
        nan_bins: 0,
        riccati_min_rel_eig: min_rel_eig,
    })
}
