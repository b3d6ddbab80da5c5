//! Small random datasets for unit tests.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::datamodel::{Dataset, Session, Trial, WaveformEvent};

/// One session of four 80-bin trials with smooth random kinematics; each
/// electrode's rate and first feature depend linearly on the kinematics.
pub fn small_dataset(n_electrodes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = 0.016;
    let n_bins = 80;
    let trials = (0..4)
        .map(|_| {
            let mut kin = DMatrix::zeros(n_bins, 3);
            let mut k = [0.0f64; 3];
            for t in 0..n_bins {
                for (d, v) in k.iter_mut().enumerate() {
                    *v = 0.9 * *v + rng.random_range(-1.0..1.0);
                    kin[(t, d)] = *v;
                }
            }
            let events = (0..n_electrodes)
                .map(|e| {
                    let dir = [(e as f64).cos(), (e as f64).sin(), 0.5];
                    let mut evs = Vec::new();
                    for t in 0..n_bins {
                        let drive: f64 = (0..3).map(|d| dir[d] * kin[(t, d)]).sum();
                        let rate = (40.0 + 15.0 * drive).max(0.0) * delta * 3.0;
                        let c = if rate > 0.0 { Poisson::new(rate).unwrap().sample(&mut rng) as usize } else { 0 };
                        let noise = Normal::new(0.0, 1.0).unwrap();
                        for i in 0..c {
                            evs.push(WaveformEvent {
                                time: (t as f64 + (i as f64 + 0.5) / (c as f64 + 1.0)) * delta,
                                features: vec![
                                    50.0 + 4.0 * drive + 3.0 * noise.sample(&mut rng),
                                    0.3 + 0.02 * noise.sample(&mut rng),
                                    -2.0 * drive + 2.0 * noise.sample(&mut rng),
                                    0.2 + 0.01 * noise.sample(&mut rng),
                                ],
                            });
                        }
                    }
                    evs
                })
                .collect();
            Trial {
                kinematics: kin,
                events,
                bin_width: delta,
                start_time: 0.0,
            }
        })
        .collect();
    Dataset {
        sessions: vec![Session { trials }],
        n_electrodes,
        feature_names: (1..=4).map(|i| format!("f{i}")).collect(),
        bin_width: delta,
        p: 3,
    }
}
