//! Alternating-conditional-expectation response transform.
//!
//! Starting from the identity, the response transform `g` is refined by
//! alternating two steps: regress `g(y)` linearly on the kinematics, then
//! smooth the fitted values against the raw response `y`. The transform is
//! kept standardized (zero mean, unit variance with divisor `n`) on the
//! training data. Iteration stops once the squared multiple correlation
//! improves by less than 1e-6 relative, or after 20 rounds; the best
//! transform seen (including the identity) is returned.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::NormalEquations;

use super::TransformModel;

const MAX_ITERATIONS: usize = 20;
const REL_TOLERANCE: f64 = 1e-6;
/// Pseudo-count for shrinking level means toward the global mean.
const LEVEL_SHRINKAGE: f64 = 5.0;
const LOCAL_SPAN: f64 = 0.3;
const MAX_KNOTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AceSmoother {
    /// One value per observed response level (spike counts).
    LevelMeans,
    /// Tricube local-linear smoother on a quantile knot grid (moments).
    LocalLinear,
}

/// Piecewise-linear lookup; flat beyond the outermost knots.
#[derive(Debug, Clone, PartialEq)]
pub struct AceLookup {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl AceLookup {
    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        let n = k.len();
        if n == 1 || x <= k[0] {
            return self.values[0];
        }
        if x >= k[n - 1] {
            return self.values[n - 1];
        }
        // First knot strictly greater than x.
        let hi = k.partition_point(|&v| v <= x);
        let lo = hi - 1;
        let w = (x - k[lo]) / (k[hi] - k[lo]);
        self.values[lo] + w * (self.values[hi] - self.values[lo])
    }

    fn affine(&self, shift: f64, scale: f64) -> AceLookup {
        AceLookup {
            knots: self.knots.clone(),
            values: self.values.iter().map(|v| (v - shift) * scale).collect(),
        }
    }
}

fn r_squared(g: &[f64], kin: &DMatrix<f64>) -> Option<(f64, Vec<f64>)> {
    let p = kin.ncols();
    let mut ne = NormalEquations::new(p);
    let mut row = vec![0.0; p];
    for (i, &y) in g.iter().enumerate() {
        for k in 0..p {
            row[k] = kin[(i, k)];
        }
        ne.push(&row, y);
    }
    let fit = ne.solve()?;
    let fitted = (0..g.len())
        .map(|i| {
            for k in 0..p {
                row[k] = kin[(i, k)];
            }
            fit.predict(&row)
        })
        .collect();
    Some((fit.r_squared, fitted))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rescales a lookup so its outputs on `x` have zero mean and unit variance.
fn standardized(lookup: &AceLookup, x: &[f64]) -> Option<(AceLookup, Vec<f64>)> {
    let raw: Vec<f64> = x.iter().map(|&v| lookup.eval(v)).collect();
    let (mean, sd) = mean_sd(&raw);
    if !(sd > 1e-12 * (1.0 + mean.abs())) {
        return None;
    }
    let lk = lookup.affine(mean, 1.0 / sd);
    let out = raw.iter().map(|v| (v - mean) / sd).collect();
    Some((lk, out))
}

struct Sorted {
    order: Vec<usize>,
    xs: Vec<f64>,
}

impl Sorted {
    fn new(x: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
        let xs = order.iter().map(|&i| x[i]).collect();
        Sorted { order, xs }
    }

    fn levels(&self) -> Vec<f64> {
        let mut lv = self.xs.clone();
        lv.dedup();
        lv
    }
}

fn level_means(sorted: &Sorted, fitted: &[f64]) -> AceLookup {
    let n = fitted.len() as f64;
    let global = fitted.iter().sum::<f64>() / n;
    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut i = 0;
    while i < sorted.xs.len() {
        let level = sorted.xs[i];
        let mut j = i;
        let mut sum = 0.0;
        while j < sorted.xs.len() && sorted.xs[j] == level {
            sum += fitted[sorted.order[j]];
            j += 1;
        }
        let count = (j - i) as f64;
        let weight = count / (count + LEVEL_SHRINKAGE);
        knots.push(level);
        values.push(weight * (sum / count) + (1.0 - weight) * global);
        i = j;
    }
    AceLookup { knots, values }
}

fn knot_grid(sorted: &Sorted) -> Vec<f64> {
    let levels = sorted.levels();
    if levels.len() <= MAX_KNOTS {
        return levels;
    }
    let n = sorted.xs.len();
    let mut knots: Vec<f64> = (0..MAX_KNOTS)
        .map(|i| sorted.xs[((n - 1) as f64 * i as f64 / (MAX_KNOTS - 1) as f64).round() as usize])
        .collect();
    knots.dedup();
    knots
}

fn local_linear(sorted: &Sorted, fitted: &[f64]) -> AceLookup {
    let xs = &sorted.xs;
    let ys: Vec<f64> = sorted.order.iter().map(|&i| fitted[i]).collect();
    let n = xs.len();
    let span = ((LOCAL_SPAN * n as f64).ceil() as usize).clamp(2.min(n), n);
    let knots = knot_grid(sorted);
    let values = knots
        .iter()
        .map(|&x0| {
            let pos = xs.partition_point(|&v| v < x0);
            let (mut a, mut b) = (pos, pos);
            while b - a < span {
                let take_left = a > 0 && (b == n || x0 - xs[a - 1] <= xs[b] - x0);
                if take_left {
                    a -= 1;
                } else {
                    b += 1;
                }
            }
            let dmax = (x0 - xs[a]).abs().max((xs[b - 1] - x0).abs()) * 1.000_001;
            let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in a..b {
                let w = if dmax > 0.0 {
                    let u = (xs[i] - x0).abs() / dmax;
                    let c = 1.0 - u * u * u;
                    c * c * c
                } else {
                    1.0
                };
                let dx = xs[i] - x0;
                sw += w;
                sx += w * dx;
                sy += w * ys[i];
                sxx += w * dx * dx;
                sxy += w * dx * ys[i];
            }
            let mx = sx / sw;
            let my = sy / sw;
            let vxx = sxx / sw - mx * mx;
            if vxx > 1e-14 * (1.0 + sxx / sw) {
                let slope = (sxy / sw - mx * my) / vxx;
                my - slope * mx
            } else {
                my
            }
        })
        .collect();
    AceLookup { knots, values }
}

/// Fits the transform of `response` against the rows of `kin`.
pub fn fit_ace(response: &[f64], kin: &DMatrix<f64>, smoother: AceSmoother) -> Result<TransformModel> {
    if response.len() != kin.nrows() {
        return Err(Error::Invalid(format!(
            "response has {} rows, kinematics {}",
            response.len(),
            kin.nrows()
        )));
    }
    let sorted = Sorted::new(response);
    if sorted.levels().len() < 2 {
        return Err(Error::DegenerateStream(
            "response has fewer than two distinct levels".into(),
        ));
    }
    let identity = match smoother {
        AceSmoother::LevelMeans => {
            let knots = sorted.levels();
            AceLookup {
                values: knots.clone(),
                knots,
            }
        }
        AceSmoother::LocalLinear => {
            let knots = knot_grid(&sorted);
            AceLookup {
                values: knots.clone(),
                knots,
            }
        }
    };
    let (mut current, g) = standardized(&identity, response)
        .ok_or_else(|| Error::DegenerateStream("response has zero variance".into()))?;
    let (mut r2, mut fitted) = r_squared(&g, kin)
        .ok_or_else(|| Error::DegenerateDesign("kinematics are rank deficient".into()))?;
    let mut best = (current.clone(), r2);

    for _ in 0..MAX_ITERATIONS {
        let smoothed = match smoother {
            AceSmoother::LevelMeans => level_means(&sorted, &fitted),
            AceSmoother::LocalLinear => local_linear(&sorted, &fitted),
        };
        let Some((next, next_g)) = standardized(&smoothed, response) else {
            break;
        };
        let Some((next_r2, next_fitted)) = r_squared(&next_g, kin) else {
            break;
        };
        let improvement = (next_r2 - r2) / r2.abs().max(1e-300);
        current = next;
        fitted = next_fitted;
        r2 = next_r2;
        if r2 > best.1 {
            best = (current.clone(), r2);
        }
        if improvement < REL_TOLERANCE {
            break;
        }
    }
    Ok(TransformModel::Ace(best.0))
}

/// Squared multiple correlation of a transformed response on the kinematics.
#[cfg(test)]
pub(crate) fn transformed_r_squared(tm: &TransformModel, response: &[f64], kin: &DMatrix<f64>) -> Option<f64> {
    let g: Vec<f64> = response.iter().map(|&v| tm.apply_value(v).unwrap_or(f64::NAN)).collect();
    r_squared(&g, kin).map(|(r2, _)| r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn lookup(tm: &TransformModel) -> &AceLookup {
        match tm {
            TransformModel::Ace(l) => l,
            _ => panic!("expected ace"),
        }
    }

    fn random_kin(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_response_is_degenerate() {
        let kin = random_kin(20, 1);
        let y = vec![3.0; 20];
        assert!(matches!(
            fit_ace(&y, &kin, AceSmoother::LevelMeans),
            Err(Error::DegenerateStream(_))
        ));
    }

    #[test]
    fn exactly_linear_response_is_a_fixed_point() {
        let kin = random_kin(400, 2);
        let y: Vec<f64> = (0..400).map(|i| 2.0 + 3.0 * kin[(i, 0)] - kin[(i, 2)]).collect();
        let tm = fit_ace(&y, &kin, AceSmoother::LocalLinear).unwrap();
        let g: Vec<f64> = y.iter().map(|&v| tm.apply_value(v).unwrap()).collect();
        // g must be affine in y: fit g = a + b y and check residuals.
        let n = y.len() as f64;
        let my = y.iter().sum::<f64>() / n;
        let mg = g.iter().sum::<f64>() / n;
        let sxy: f64 = y.iter().zip(&g).map(|(a, b)| (a - my) * (b - mg)).sum();
        let sxx: f64 = y.iter().map(|a| (a - my) * (a - my)).sum();
        let b = sxy / sxx;
        let worst = y
            .iter()
            .zip(&g)
            .map(|(a, c)| (c - (mg + b * (a - my))).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "max deviation from affine {worst}");
        let r2 = transformed_r_squared(&tm, &y, &kin).unwrap();
        let r2_lin = transformed_r_squared(&TransformModel::Identity, &y, &kin).unwrap();
        assert!((r2 - r2_lin).abs() < 1e-9);
    }

    #[test]
    fn training_output_is_standardized() {
        let kin = random_kin(3000, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for smoother in [AceSmoother::LevelMeans, AceSmoother::LocalLinear] {
            let y: Vec<f64> = (0..3000)
                .map(|i| {
                    let rate = (1.0 + kin[(i, 0)]).powi(2) + 0.2;
                    match smoother {
                        AceSmoother::LevelMeans => Poisson::new(rate).unwrap().sample(&mut rng),
                        AceSmoother::LocalLinear => rate + rng.random_range(-0.3..0.3),
                    }
                })
                .collect();
            let tm = fit_ace(&y, &kin, smoother).unwrap();
            let g: Vec<f64> = y.iter().map(|&v| tm.apply_value(v).unwrap()).collect();
            let (mean, sd) = mean_sd(&g);
            assert!(mean.abs() < 1e-9, "{smoother:?} mean {mean}");
            assert!((sd * sd - 1.0).abs() < 1e-9, "{smoother:?} var {}", sd * sd);
        }
    }

    #[test]
    fn quadratic_link_counts_gain_correlation() {
        let kin = random_kin(5000, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y: Vec<f64> = (0..5000)
            .map(|i| {
                let rate = 0.3 + 2.0 * (kin[(i, 0)] + 1.0).powi(2);
                Poisson::new(rate).unwrap().sample(&mut rng)
            })
            .collect();
        let tm = fit_ace(&y, &kin, AceSmoother::LevelMeans).unwrap();
        let r2_ace = transformed_r_squared(&tm, &y, &kin).unwrap();
        let r2_lin = transformed_r_squared(&TransformModel::Identity, &y, &kin).unwrap();
        assert!(r2_ace >= r2_lin, "ace {r2_ace} < linear {r2_lin}");
    }

    #[test]
    fn lookup_interpolates_between_levels() {
        let lk = AceLookup {
            knots: vec![0.0, 2.0, 4.0],
            values: vec![-1.0, 1.0, 5.0],
        };
        assert_eq!(lk.eval(1.0), 0.0);
        assert_eq!(lk.eval(3.0), 3.0);
        assert_eq!(lk.eval(2.0), 1.0);
        assert_eq!(lk.eval(-7.0), -1.0);
        assert_eq!(lk.eval(9.0), 5.0);
    }

    #[test]
    fn level_means_keep_one_value_per_count() {
        let kin = random_kin(200, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..200)
            .map(|i| Poisson::new(1.0 + kin[(i, 1)].abs()).unwrap().sample(&mut rng))
            .collect();
        let tm = fit_ace(&y, &kin, AceSmoother::LevelMeans).unwrap();
        let mut levels = y.clone();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        assert_eq!(lookup(&tm).knots, levels);
        assert!(lookup(&tm).values.iter().all(|v| v.is_finite()));
    }
}
