//! Autoregressive kinematic state models.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// `k_t = A_1 k_{t-1} + ... + A_order k_{t-order} + ε_t`, `ε_t ~ N(0, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateModel {
    pub order: usize,
    /// `a[i]` multiplies `k_{t-1-i}`.
    pub a: Vec<DMatrix<f64>>,
    pub w: DMatrix<f64>,
    /// The lagged-state design was rank deficient (a pseudo-inverse was used).
    pub degenerate: bool,
    /// The companion matrix has spectral radius of at least 1.
    pub unstable: bool,
}

impl StateModel {
    pub fn ar1(a: DMatrix<f64>, w: DMatrix<f64>) -> Self {
        let mut m = StateModel {
            order: 1,
            a: vec![a],
            w,
            degenerate: false,
            unstable: false,
        };
        m.unstable = m.spectral_radius() >= 1.0;
        m
    }

    pub fn ar2(a1: DMatrix<f64>, a2: DMatrix<f64>, w: DMatrix<f64>) -> Self {
        let mut m = StateModel {
            order: 2,
            a: vec![a1, a2],
            w,
            degenerate: false,
            unstable: false,
        };
        m.unstable = m.spectral_radius() >= 1.0;
        m
    }

    pub fn p(&self) -> usize {
        self.w.nrows()
    }

    /// Companion matrix `[[A_1, ..., A_r], [I, 0, ...], ...]` of the stacked state.
    pub fn companion(&self) -> DMatrix<f64> {
        let p = self.p();
        let d = p * self.order;
        let mut c = DMatrix::zeros(d, d);
        for (i, a) in self.a.iter().enumerate() {
            c.view_mut((0, i * p), (p, p)).copy_from(a);
        }
        for i in 1..self.order {
            for k in 0..p {
                c[(i * p + k, (i - 1) * p + k)] = 1.0;
            }
        }
        c
    }

    pub fn spectral_radius(&self) -> f64 {
        self.companion()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// Least-squares fit on within-trial transitions pooled across trials.
pub fn fit_state_model(kinematics: &[&DMatrix<f64>], order: usize) -> Result<StateModel> {
    if !(1..=2).contains(&order) {
        return Err(Error::Invalid(format!("state model order must be 1 or 2, got {order}")));
    }
    let p = kinematics
        .first()
        .map(|k| k.ncols())
        .ok_or_else(|| Error::DegenerateDesign("no training trials".into()))?;
    let d = p * order;
    let mut sxx = DMatrix::<f64>::zeros(d, d);
    let mut syx = DMatrix::<f64>::zeros(p, d);
    let mut n = 0usize;
    let mut x = vec![0.0; d];
    for kin in kinematics {
        for t in order..kin.nrows() {
            for lag in 0..order {
                for k in 0..p {
                    x[lag * p + k] = kin[(t - 1 - lag, k)];
                }
            }
            for a in 0..d {
                for b in 0..d {
                    sxx[(a, b)] += x[a] * x[b];
                }
                for i in 0..p {
                    syx[(i, a)] += kin[(t, i)] * x[a];
                }
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::DegenerateDesign(format!(
            "no within-trial transitions for an order-{order} state model"
        )));
    }
    let svd = sxx.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * 1e-12 * d as f64;
    let degenerate = svd.singular_values.iter().any(|&s| s <= tol);
    let pinv = svd
        .pseudo_inverse(tol.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::DegenerateDesign(e.to_string()))?;
    let stacked = &syx * pinv;

    let a: Vec<DMatrix<f64>> = (0..order).map(|i| stacked.columns(i * p, p).into_owned()).collect();
    let mut w = DMatrix::<f64>::zeros(p, p);
    for kin in kinematics {
        for t in order..kin.nrows() {
            let mut eps: Vec<f64> = (0..p).map(|i| kin[(t, i)]).collect();
            for (lag, al) in a.iter().enumerate() {
                for i in 0..p {
                    for k in 0..p {
                        eps[i] -= al[(i, k)] * kin[(t - 1 - lag, k)];
                    }
                }
            }
            for i in 0..p {
                for j in 0..p {
                    w[(i, j)] += eps[i] * eps[j];
                }
            }
        }
    }
    let w = symmetrize(&(w / n as f64));
    let mut model = StateModel {
        order,
        a,
        w,
        degenerate,
        unstable: false,
    };
    model.unstable = model.spectral_radius() >= 1.0;
    if degenerate {
        log::warn!("state model design is rank deficient; used a pseudo-inverse");
    }
    if model.unstable {
        log::warn!("fitted state model has spectral radius {:.6} >= 1", model.spectral_radius());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn simulate_ar(a: &[DMatrix<f64>], sd: f64, n_trials: usize, n: usize, seed: u64) -> Vec<DMatrix<f64>> {
        let p = a[0].nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        (0..n_trials)
            .map(|_| {
                let mut k = DMatrix::zeros(n, p);
                for t in 0..n {
                    for i in 0..p {
                        let mut v = noise.sample(&mut rng);
                        for (lag, al) in a.iter().enumerate() {
                            if t > lag {
                                for j in 0..p {
                                    v += al[(i, j)] * k[(t - 1 - lag, j)];
                                }
                            }
                        }
                        k[(t, i)] = v;
                    }
                }
                k
            })
            .collect()
    }

    #[test]
    fn recovers_ar1_parameters() {
        let a = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.05, 0.7]);
        let kins = simulate_ar(std::slice::from_ref(&a), 0.5, 40, 250, 1);
        let refs: Vec<&DMatrix<f64>> = kins.iter().collect();
        let m = fit_state_model(&refs, 1).unwrap();
        // Roughly 10^4 transitions: SE of each entry is about sd / (sd * sqrt(n / (1 - a^2))) < 0.01.
        assert!((&m.a[0] - &a).amax() < 0.03, "{}", m.a[0]);
        assert!((m.w[(0, 0)] - 0.25).abs() < 0.02 && m.w[(0, 1)].abs() < 0.02);
        assert!(!m.unstable && !m.degenerate);
    }

    #[test]
    fn ar2_with_zero_second_lag_fits_small_a2() {
        let a1 = DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 0.5]);
        let kins = simulate_ar(std::slice::from_ref(&a1), 1.0, 30, 200, 2);
        let refs: Vec<&DMatrix<f64>> = kins.iter().collect();
        let m = fit_state_model(&refs, 2).unwrap();
        // Standard-error oracle for the stacked least-squares coefficients.
        let d = 4;
        let mut sxx = DMatrix::<f64>::zeros(d, d);
        let mut n = 0.0;
        for k in &kins {
            for t in 2..k.nrows() {
                let x = [k[(t - 1, 0)], k[(t - 1, 1)], k[(t - 2, 0)], k[(t - 2, 1)]];
                for a in 0..d {
                    for b in 0..d {
                        sxx[(a, b)] += x[a] * x[b];
                    }
                }
                n += 1.0;
            }
        }
        let inv = sxx.try_inverse().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let se = (m.w[(i, i)] * n / (n - d as f64) * inv[(2 + j, 2 + j)]).sqrt();
                assert!(m.a[1][(i, j)].abs() < 3.0 * se, "A2[{i},{j}] = {} se {se}", m.a[1][(i, j)]);
            }
        }
    }

    #[test]
    fn constant_kinematics_are_flagged_with_zero_noise() {
        let k = DMatrix::from_element(30, 3, 2.0);
        let m = fit_state_model(&[&k], 1).unwrap();
        assert!(m.degenerate);
        assert!(m.w.amax() < 1e-20);
    }

    #[test]
    fn companion_form_scalar() {
        let m = StateModel::ar2(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.25),
            DMatrix::from_element(1, 1, 1.0),
        );
        assert_eq!(m.companion(), DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 1.0, 0.0]));
        assert!(!m.unstable);
        let unstable = StateModel::ar1(DMatrix::from_element(1, 1, 1.2), DMatrix::from_element(1, 1, 1.0));
        assert!(unstable.unstable);
    }

    #[test]
    fn too_short_trials_error() {
        let k = DMatrix::from_element(1, 3, 1.0);
        assert!(fit_state_model(&[&k], 1).is_err());
        assert!(fit_state_model(&[&k], 3).is_err());
    }
}
