use super::*;
use crate::datamodel::{Session, WaveformEvent};
use crate::encode::{
    assemble_covariance, fit_model, row_states, EquationSpec, FitData, FitOptions, FittedEquation, ModelMeta,
    MomentCovariance, NoiseCatalog, StateModel,
};
use crate::featurize::{StreamId, TransformKind, TransformModel};
use crate::linalg::{rel_frobenius, spd_inverse};
use crate::testutil::small_dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn count_eq(electrode: usize, lag: usize, intercept: f64, coeff: Vec<f64>, var: f64) -> FittedEquation {
    FittedEquation {
        spec: EquationSpec::new(StreamId::count(electrode), lag, TransformKind::Identity),
        intercept,
        coeff,
        transform_model: TransformModel::Identity,
        residual_variance: var,
        unit_moment_variance: 0.0,
        r_squared: 0.0,
        n_samples: 0,
    }
}

fn manual_model(eqs: Vec<FittedEquation>, count_cov: DMatrix<f64>, n_electrodes: usize, state: Option<StateModel>) -> FittedModel {
    let p = eqs[0].coeff.len();
    FittedModel {
        meta: ModelMeta {
            bin_width: 0.016,
            p,
            n_electrodes,
            n_features: 0,
            max_lag: 12,
            static_cov: false,
        },
        catalog: NoiseCatalog {
            count_specs: eqs.iter().map(|e| e.spec).collect(),
            count_cov,
            moments: MomentCovariance {
                n_electrodes,
                n_features: 0,
                event_n: vec![0; n_electrodes],
                event_cov: vec![DMatrix::zeros(0, 0); n_electrodes],
                cross: DMatrix::zeros(0, 0),
                mean_counts: vec![0.0; n_electrodes],
            },
        },
        equations: eqs,
        state,
    }
}

/// A trial whose electrode `e` has `counts[e][t]` events in bin `t`.
fn trial_with_counts(counts: &[Vec<usize>], kin: DMatrix<f64>) -> Trial {
    let events = counts
        .iter()
        .map(|c| {
            c.iter()
                .enumerate()
                .flat_map(|(t, &n)| {
                    (0..n).map(move |i| WaveformEvent {
                        time: (t as f64 + (i as f64 + 0.5) / (n as f64 + 1.0)) * 0.016,
                        features: vec![],
                    })
                })
                .collect()
        })
        .collect();
    Trial {
        kinematics: kin,
        events,
        bin_width: 0.016,
        start_time: 0.0,
    }
}

fn fitted_small(specs: &[EquationSpec], seed: u64, order: usize) -> (Dataset, FeatureCache, FittedModel) {
    let ds = small_dataset(3, seed);
    let cache = FeatureCache::build(&ds).unwrap();
    let model = {
        let data = FitData::new(&ds, &cache, &ds.all_trial_ids(), 4);
        fit_model(specs, &data, &FitOptions::default(), Some(order)).unwrap()
    };
    (ds, cache, model)
}

fn joint_specs() -> Vec<EquationSpec> {
    vec![
        EquationSpec::new(StreamId::count(0), 1, TransformKind::Identity),
        EquationSpec::new(StreamId::count(1), 3, TransformKind::Sqrt),
        EquationSpec::new(StreamId::count(2), 0, TransformKind::Identity),
        EquationSpec::new(StreamId::moment(0, 0, 1), 1, TransformKind::Identity),
        EquationSpec::new(StreamId::moment(1, 2, 1), 1, TransformKind::Identity),
        EquationSpec::new(StreamId::moment(1, 0, 1), 1, TransformKind::Identity),
        EquationSpec::new(StreamId::moment(2, 2, 2), 4, TransformKind::Ace),
    ]
}

/// Generalized least squares built directly from the assembled covariance.
fn gls_oracle(model: &FittedModel, features: &TrialFeatures, t: usize) -> Option<DVector<f64>> {
    let eqs = &model.equations;
    let states = row_states(eqs, features, t);
    let asm = assemble_covariance(eqs, &model.catalog, &states, model.meta.bin_width, model.meta.static_cov).unwrap();
    if asm.rows.is_empty() {
        return None;
    }
    let p = model.meta.p;
    let uinv = spd_inverse(&asm.u)?;
    let b = DMatrix::from_fn(asm.rows.len(), p, |a, k| eqs[asm.rows[a]].coeff[k]);
    let y = DVector::from_fn(asm.rows.len(), |a, _| {
        let e = &eqs[asm.rows[a]];
        e.observe(features, t).unwrap() - e.intercept
    });
    let g = b.transpose() * &uinv * &b;
    let h = b.transpose() * &uinv * y;
    let eig = g.clone().symmetric_eigen().eigenvalues;
    if eig.min() <= 1e-10 * eig.amax() {
        return None;
    }
    g.try_inverse().map(|gi| gi * h)
}

#[test]
fn single_equation_scalar_inversion() {
    let model = manual_model(vec![count_eq(0, 0, 0.0, vec![1.0], 1.0)], DMatrix::identity(1, 1), 1, None);
    let dm = DecodingModel::new(model).unwrap();
    let trial = trial_with_counts(&[vec![3]], DMatrix::zeros(1, 1));
    let features = TrialFeatures::compute(&trial, 0).unwrap();
    let pred = ole_decode(&dm, &trial, &features).unwrap();
    assert!((pred.kin_hat[(0, 0)] - 3.0).abs() < 1e-12);
}

#[test]
fn inverse_variance_average() {
    let model = manual_model(
        vec![count_eq(0, 0, 0.0, vec![1.0], 1.0), count_eq(1, 0, 0.0, vec![1.0], 1.0)],
        DMatrix::identity(2, 2),
        2,
        None,
    );
    let dm = DecodingModel::new(model).unwrap();
    let trial = trial_with_counts(&[vec![2], vec![4]], DMatrix::zeros(1, 1));
    let features = TrialFeatures::compute(&trial, 0).unwrap();
    let pred = ole_decode(&dm, &trial, &features).unwrap();
    assert!((pred.kin_hat[(0, 0)] - 3.0).abs() < 1e-12);
}

#[test]
fn ole_matches_gls_oracle() {
    let (ds, cache, model) = fitted_small(&joint_specs(), 31, 1);
    let dm = DecodingModel::new(model.clone()).unwrap();
    let mut checked = 0;
    for id in ds.all_trial_ids() {
        let features = cache.get(id);
        let pred = ole_decode(&dm, ds.trial(id), features).unwrap();
        for t in 0..ds.trial(id).n_bins() {
            if let Some(k) = gls_oracle(&model, features, t) {
                let got = pred.kin_hat.row(t).transpose();
                assert!((&got - &k).norm() <= 1e-8 * k.norm().max(1.0), "bin {t}: {got} vs {k}");
                checked += 1;
            }
        }
    }
    assert!(checked > 200);
}

#[test]
fn zero_noise_and_zero_covariance_roll_out_the_state() {
    let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.7]);
    let state = StateModel::ar1(a.clone(), DMatrix::zeros(3, 3));
    let (ds, cache, mut model) = fitted_small(&joint_specs(), 32, 1);
    model.state = Some(state);
    let dm = DecodingModel::new(model).unwrap();
    let id = ds.all_trial_ids()[0];
    let trial = ds.trial(id);
    let pred = kalman_decode(&dm, trial, cache.get(id), KfInit::TrueVelocity).unwrap();
    let mut k = trial.kinematics.row(0).transpose();
    for t in 0..trial.n_bins() {
        assert!((pred.kin_hat.row(t).transpose() - &k).amax() < 1e-12);
        k = &a * k;
    }
}

#[test]
fn near_noiseless_observations_are_inverted() {
    let b = [[2.0, 0.5, 0.0], [0.0, 1.0, -1.0], [1.0, 0.0, 1.0]];
    let eqs: Vec<_> = (0..3).map(|e| count_eq(e, 0, 1.0, b[e].to_vec(), 1.0)).collect();
    let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 1.0, 0.1, 0.0, 0.1, 1.0]) * 1e-10;
    let state = StateModel::ar1(DMatrix::identity(3, 3) * 0.9, DMatrix::identity(3, 3));
    let dm = DecodingModel::new(manual_model(eqs, cov, 3, Some(state))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let counts: Vec<Vec<usize>> = (0..3).map(|_| (0..20).map(|_| rng.random_range(0..6)).collect()).collect();
    let trial = trial_with_counts(&counts, DMatrix::zeros(20, 3));
    let features = TrialFeatures::compute(&trial, 0).unwrap();
    let pred = kalman_decode(&dm, &trial, &features, KfInit::TrueVelocity).unwrap();
    let bm = DMatrix::from_fn(3, 3, |i, j| b[i][j]);
    let binv = bm.try_inverse().unwrap();
    for t in 1..20 {
        let c = DVector::from_fn(3, |e, _| counts[e][t] as f64 - 1.0);
        let expect = &binv * c;
        assert!((pred.kin_hat.row(t).transpose() - &expect).amax() < 1e-6, "bin {t}");
    }
}

#[test]
fn huge_state_noise_approaches_ole() {
    let (ds, cache, mut model) = fitted_small(&joint_specs(), 33, 1);
    let st = model.state.as_mut().unwrap();
    st.w *= 1e6;
    let dm = DecodingModel::new(model).unwrap();
    for id in ds.all_trial_ids() {
        let trial = ds.trial(id);
        let kf = kalman_decode(&dm, trial, cache.get(id), KfInit::TrueVelocity).unwrap();
        let ole = ole_decode(&dm, trial, cache.get(id)).unwrap();
        let finite: Vec<usize> = (1..trial.n_bins())
            .filter(|&t| ole.kin_hat.row(t).iter().all(|v| v.is_finite()))
            .collect();
        let scale = finite.iter().map(|&t| ole.kin_hat.row(t).amax()).fold(0.0, f64::max);
        for &t in &finite {
            let diff = (kf.kin_hat.row(t) - ole.kin_hat.row(t)).amax();
            assert!(diff <= 1e-3 * scale, "bin {t}: diff {diff} scale {scale}");
        }
    }
}

#[test]
fn ar2_with_zero_second_lag_equals_ar1() {
    let (ds, cache, model) = fitted_small(&joint_specs(), 34, 1);
    let st1 = model.state.clone().unwrap();
    let mut m2 = model.clone();
    m2.state = Some(StateModel::ar2(st1.a[0].clone(), DMatrix::zeros(3, 3), st1.w.clone()));
    let d1 = DecodingModel::new(model).unwrap();
    let d2 = DecodingModel::new(m2).unwrap();
    for id in ds.all_trial_ids() {
        let trial = ds.trial(id);
        let a = kalman_decode(&d1, trial, cache.get(id), KfInit::TrueVelocity).unwrap();
        let b = kalman_decode(&d2, trial, cache.get(id), KfInit::TrueVelocity).unwrap();
        assert!((&a.kin_hat - &b.kin_hat).amax() < 1e-9);
    }
    let stacked = stack_ar2(d2.fitted.state.as_ref().unwrap()).unwrap();
    assert_eq!(stacked.order, 1);
    assert_eq!(stacked.a[0].nrows(), 6);
    assert!(stack_ar2(&st1).is_err());
    let emb = embed_observation(&DMatrix::identity(3, 3), 2);
    assert_eq!(emb.shape(), (3, 6));
}

#[test]
fn riccati_covariance_stays_psd() {
    for order in [1, 2] {
        let (ds, cache, model) = fitted_small(&joint_specs(), 35, order);
        let dm = DecodingModel::new(model).unwrap();
        for id in ds.all_trial_ids() {
            let pred = kalman_decode(&dm, ds.trial(id), cache.get(id), KfInit::TrueVelocity).unwrap();
            assert!(pred.riccati_min_rel_eig >= -1e-10, "{}", pred.riccati_min_rel_eig);
            let z = kalman_decode(&dm, ds.trial(id), cache.get(id), KfInit::Zero).unwrap();
            assert!(z.kin_hat.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn missing_row_removal_matches_direct_inverse() {
    let (ds, cache, model) = fitted_small(&joint_specs(), 36, 1);
    let dm = DecodingModel::new(model).unwrap();
    let mut cache_w = WaveCache::default();
    let nw = dm.layout.n_wave();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for _ in 0..400 {
        let counts: Vec<u32> = (0..nw).map(|_| rng.random_range(0..3)).collect();
        let avail: Vec<usize> = (0..nw).filter(|&j| counts[j] > 0).collect();
        if avail.is_empty() {
            continue;
        }
        // Only compare where neither the full nor the reduced block needed a ridge.
        let all: Vec<usize> = (0..nw).collect();
        let s_all: Vec<f64> = all.iter().map(|&j| counts[j].max(1) as f64).collect();
        let s: Vec<f64> = avail.iter().map(|&j| counts[j] as f64).collect();
        let (Some(_), Some(direct)) = (
            spd_inverse(&dm.layout.waveform_block(&all, &s_all)),
            spd_inverse(&dm.layout.waveform_block(&avail, &s)),
        ) else {
            continue;
        };
        let got = dm.wave_inverse(&avail, &counts, &mut cache_w).unwrap();
        assert!(rel_frobenius(&got, &direct) < 1e-8);
        checked += 1;
        if checked == 200 {
            break;
        }
    }
    assert_eq!(checked, 200);
    assert!(cache_w.hits + cache_w.misses > 0);
    let _ = (&ds, &cache);
}

#[test]
fn ole_is_invariant_to_equation_order() {
    let specs = joint_specs();
    let (ds, cache, model) = fitted_small(&specs, 37, 1);
    let mut rev = model.clone();
    rev.equations.reverse();
    let a = DecodingModel::new(model).unwrap();
    let b = DecodingModel::new(rev).unwrap();
    for id in ds.all_trial_ids() {
        let pa = ole_decode(&a, ds.trial(id), cache.get(id)).unwrap();
        let pb = ole_decode(&b, ds.trial(id), cache.get(id)).unwrap();
        for t in 0..ds.trial(id).n_bins() {
            let (x, y) = (pa.kin_hat.row(t), pb.kin_hat.row(t));
            if x.iter().all(|v| v.is_finite()) {
                assert!((x - y).norm() <= 1e-8 * x.norm().max(1.0));
            }
        }
    }
}

#[test]
fn zero_coefficient_independent_equation_changes_nothing() {
    let base = vec![
        count_eq(0, 0, 0.5, vec![1.0, 0.2, 0.0], 1.0),
        count_eq(1, 0, 0.1, vec![0.0, 1.0, 0.3], 2.0),
        count_eq(2, 0, 0.0, vec![0.4, 0.0, 1.0], 1.5),
    ];
    let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 2.0, 0.2, 0.1, 0.2, 1.5]);
    let mut with = base.clone();
    with.push(count_eq(3, 0, 2.0, vec![0.0, 0.0, 0.0], 0.7));
    let mut cov4 = DMatrix::zeros(4, 4);
    cov4.view_mut((0, 0), (3, 3)).copy_from(&cov);
    cov4[(3, 3)] = 0.7;
    let a = DecodingModel::new(manual_model(base, cov, 4, None)).unwrap();
    let b = DecodingModel::new(manual_model(with, cov4, 4, None)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let counts: Vec<Vec<usize>> = (0..4).map(|_| (0..30).map(|_| rng.random_range(0..5)).collect()).collect();
    let trial = trial_with_counts(&counts, DMatrix::zeros(30, 3));
    let features = TrialFeatures::compute(&trial, 0).unwrap();
    let pa = ole_decode(&a, &trial, &features).unwrap();
    let pb = ole_decode(&b, &trial, &features).unwrap();
    assert!((&pa.kin_hat - &pb.kin_hat).amax() < 1e-9);
}

#[test]
fn scaling_features_leaves_ole_unchanged() {
    let specs: Vec<EquationSpec> = joint_specs()
        .into_iter()
        .filter(|s| s.transform == TransformKind::Identity)
        .collect();
    let ds = small_dataset(3, 38);
    let mut scaled = ds.clone();
    for s in &mut scaled.sessions {
        for t in &mut s.trials {
            for evs in &mut t.events {
                for ev in evs {
                    for w in &mut ev.features {
                        *w *= 7.5;
                    }
                }
            }
        }
    }
    let decode = |d: &Dataset| {
        let cache = FeatureCache::build(d).unwrap();
        let data = FitData::new(d, &cache, &d.all_trial_ids(), 4);
        let m = fit_model(&specs, &data, &FitOptions::default(), None).unwrap();
        let dm = DecodingModel::new(m).unwrap();
        let id = d.all_trial_ids()[1];
        ole_decode(&dm, d.trial(id), cache.get(id)).unwrap().kin_hat
    };
    let (a, b) = (decode(&ds), decode(&scaled));
    for t in 0..a.nrows() {
        if a.row(t).iter().all(|v| v.is_finite()) {
            assert!((a.row(t) - b.row(t)).norm() <= 1e-8 * a.row(t).norm().max(1.0));
        }
    }
}

#[test]
fn mse_conventions() {
    let kin = DMatrix::from_fn(5, 3, |i, j| (i + j) as f64);
    let trial = trial_with_counts(&[vec![0; 5]], kin.clone());
    let exact = Prediction {
        kin_hat: kin.clone(),
        used_equations: vec![0; 5],
        nan_bins: 0,
        riccati_min_rel_eig: 0.0,
    };
    assert_eq!(evaluate_mse(&exact, &trial).unwrap().mse, 0.0);
    let shifted = Prediction {
        kin_hat: kin.add_scalar(1.0),
        ..exact.clone()
    };
    assert!((evaluate_mse(&shifted, &trial).unwrap().mse - 3.0).abs() < 1e-12);
    let mut nan = shifted.clone();
    nan.kin_hat[(2, 1)] = f64::NAN;
    let r = evaluate_mse(&nan, &trial).unwrap();
    assert_eq!((r.bins, r.nan_bins), (4, 1));
    let all_nan = Prediction {
        kin_hat: DMatrix::from_element(5, 3, f64::NAN),
        ..exact.clone()
    };
    assert!(matches!(evaluate_mse(&all_nan, &trial), Err(Error::AllNan)));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy = Prediction {
        kin_hat: DMatrix::from_fn(5, 3, |i, j| kin[(i, j)] + rng.random_range(-1.0..1.0)),
        ..exact
    };
    let oracle = (&noisy.kin_hat - &kin).map(|v| v * v).sum() / 5.0;
    assert!((evaluate_mse(&noisy, &trial).unwrap().mse - oracle).abs() < 1e-12);
    let tail = (&noisy.kin_hat - &kin).rows(2, 3).map(|v| v * v).sum() / 3.0;
    assert!((evaluate_mse_from(&noisy, &trial, 2).unwrap().mse - tail).abs() < 1e-12);
}

#[test]
fn prediction_csv_layout() {
    let (ds, cache, model) = fitted_small(&joint_specs(), 39, 1);
    let dm = DecodingModel::new(model).unwrap();
    let id = ds.all_trial_ids()[0];
    let pred = ole_decode(&dm, ds.trial(id), cache.get(id)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.csv");
    write_prediction_csv(&path, &pred, ds.trial(id)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "bin,k1_hat,k2_hat,k3_hat,k1_true,k2_true,k3_true,used_equations");
    assert_eq!(lines.count(), ds.trial(id).n_bins());
}

#[test]
fn paradigm_parsing_and_sessions() {
    assert_eq!("OLE".parse::<Paradigm>().unwrap(), Paradigm::Ole);
    assert_eq!("bayes".parse::<Paradigm>().unwrap(), Paradigm::Bayes);
    assert!("lasso".parse::<Paradigm>().is_err());
    let _ = Session { trials: vec![] };
}
