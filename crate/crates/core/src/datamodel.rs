//! Dataset representation, on-disk layout and cross-validation folds.
//!
//! A dataset directory holds a `manifest.json` plus one subdirectory per
//! session. Each trial is stored as two CSV tables:
//!
//! * `session_<i>/trial_<j>_events.csv` with header `electrode,time_s,f1,...,fF`
//! * `session_<i>/trial_<j>_kin.csv` with header `time_s,k1,...,kp`
//!
//! Kinematics rows sit at bin centers; bin `t` of a trial covers the
//! half-open interval `[start + t*δ, start + (t+1)*δ)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BIN_WIDTH: f64 = 0.016;

pub const DEFAULT_FEATURE_NAMES: [&str; 4] = [
    "amplitude",
    "peak_to_trough_time",
    "trough_size",
    "trough_half_width",
];

/// One supra-threshold event on an electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformEvent {
    pub time: f64,
    pub features: Vec<f64>,
}

/// A pre-segmented reach: kinematics sampled at the bin rate plus the
/// events of every electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    /// `T x p`, one row per bin.
    pub kinematics: DMatrix<f64>,
    /// Indexed by electrode.
    pub events: Vec<Vec<WaveformEvent>>,
    pub bin_width: f64,
    pub start_time: f64,
}

impl Trial {
    pub fn n_bins(&self) -> usize {
        self.kinematics.nrows()
    }

    pub fn p(&self) -> usize {
        self.kinematics.ncols()
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.n_bins() as f64 * self.bin_width
    }

    pub fn bin_center(&self, t: usize) -> f64 {
        self.start_time + (t as f64 + 0.5) * self.bin_width
    }

    /// Bin holding `time`, or `None` outside the trial span.
    pub fn bin_of(&self, time: f64) -> Option<usize> {
        if !(time >= self.start_time) {
            return None;
        }
        let idx = ((time - self.start_time) / self.bin_width).floor();
        if idx < 0.0 || idx >= self.n_bins() as f64 {
            None
        } else {
            Some(idx as usize)
        }
    }

    pub fn validate(&self, n_electrodes: usize, n_features: usize) -> Result<()> {
        if self.n_bins() == 0 {
            return Err(Error::Invalid("trial has no kinematics rows".into()));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::Invalid("bin width must be positive".into()));
        }
        if self.kinematics.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite kinematics".into()));
        }
        if self.events.len() != n_electrodes {
            return Err(Error::Invalid(format!(
                "trial lists {} electrodes, dataset has {}",
                self.events.len(),
                n_electrodes
            )));
        }
        for (e, events) in self.events.iter().enumerate() {
            for ev in events {
                if ev.features.len() != n_features {
                    return Err(Error::Invalid(format!(
                        "electrode {e}: event has {} features, expected {n_features}",
                        ev.features.len()
                    )));
                }
                if ev.features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Invalid(format!("electrode {e}: non-finite feature")));
                }
                if ev.time < 0.0 || self.bin_of(ev.time).is_none() {
                    return Err(Error::Invalid(format!(
                        "electrode {e}: event at {} s outside trial span [{}, {})",
                        ev.time,
                        self.start_time,
                        self.end_time()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Session {
    pub trials: Vec<Trial>,
}

/// Identifies a trial inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrialId {
    pub session: usize,
    pub trial: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sessions: Vec<Session>,
    pub n_electrodes: usize,
    pub feature_names: Vec<String>,
    pub bin_width: f64,
    pub p: usize,
}

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn trial(&self, id: TrialId) -> &Trial {
        &self.sessions[id.session].trials[id.trial]
    }

    /// Ids of every trial in the listed sessions, in session order.
    pub fn trial_ids(&self, sessions: &[usize]) -> Vec<TrialId> {
        sessions
            .iter()
            .flat_map(|&s| {
                (0..self.sessions[s].trials.len()).map(move |t| TrialId {
                    session: s,
                    trial: t,
                })
            })
            .collect()
    }

    pub fn all_trial_ids(&self) -> Vec<TrialId> {
        let all: Vec<usize> = (0..self.sessions.len()).collect();
        self.trial_ids(&all)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sessions.is_empty() {
            return Err(Error::Invalid("dataset has no sessions".into()));
        }
        if self.n_electrodes == 0 {
            return Err(Error::Invalid("dataset has no electrodes".into()));
        }
        for (s, session) in self.sessions.iter().enumerate() {
            for (t, trial) in session.trials.iter().enumerate() {
                if trial.p() != self.p {
                    return Err(Error::Invalid(format!(
                        "session {s} trial {t}: {} kinematic columns, expected {}",
                        trial.p(),
                        self.p
                    )));
                }
                if (trial.bin_width - self.bin_width).abs() > 1e-15 {
                    return Err(Error::Invalid(format!(
                        "session {s} trial {t}: bin width differs from manifest"
                    )));
                }
                trial
                    .validate(self.n_electrodes, self.n_features())
                    .map_err(|e| Error::Invalid(format!("session {s} trial {t}: {e}")))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    bin_width_s: f64,
    n_electrodes: usize,
    p: usize,
    feature_names: Vec<String>,
    sessions: Vec<ManifestSession>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSession {
    name: String,
    trials: Vec<ManifestTrial>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTrial {
    start_time_s: f64,
    n_bins: usize,
}

fn session_dir_name(i: usize) -> String {
    format!("session_{i}")
}

/// Writes the dataset directory. Numbers are printed in Rust's shortest
/// round-trip form, so reloading reproduces every value bit for bit.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let root = path.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = Manifest {
        format_version: 1,
        bin_width_s: dataset.bin_width,
        n_electrodes: dataset.n_electrodes,
        p: dataset.p,
        feature_names: dataset.feature_names.clone(),
        sessions: dataset
            .sessions
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestSession {
                name: session_dir_name(i),
                trials: s
                    .trials
                    .iter()
                    .map(|t| ManifestTrial {
                        start_time_s: t.start_time,
                        n_bins: t.n_bins(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let manifest_path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Invalid(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    for (i, session) in dataset.sessions.iter().enumerate() {
        let dir = root.join(session_dir_name(i));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (j, trial) in session.trials.iter().enumerate() {
            write_events(&dir.join(format!("trial_{j}_events.csv")), trial, dataset.n_features())?;
            write_kinematics(&dir.join(format!("trial_{j}_kin.csv")), trial)?;
        }
    }
    Ok(())
}

fn write_events(path: &Path, trial: &Trial, n_features: usize) -> Result<()> {
    let mut out = String::from("electrode,time_s");
    for f in 1..=n_features {
        out.push_str(&format!(",f{f}"));
    }
    out.push('\n');
    for (e, events) in trial.events.iter().enumerate() {
        for ev in events {
            out.push_str(&format!("{e},{}", ev.time));
            for v in &ev.features {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    write_file(path, &out)
}

fn write_kinematics(path: &Path, trial: &Trial) -> Result<()> {
    let mut out = String::from("time_s");
    for k in 1..=trial.p() {
        out.push_str(&format!(",k{k}"));
    }
    out.push('\n');
    for t in 0..trial.n_bins() {
        out.push_str(&format!("{}", trial.bin_center(t)));
        for k in 0..trial.p() {
            out.push_str(&format!(",{}", trial.kinematics[(t, k)]));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads and validates a dataset directory.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let root = path.as_ref();
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        file: manifest_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if !(manifest.bin_width_s > 0.0) {
        return Err(Error::Format {
            file: manifest_path,
            line: 1,
            msg: "bin_width_s must be positive".into(),
        });
    }
    let n_features = manifest.feature_names.len();

    let mut sessions = Vec::with_capacity(manifest.sessions.len());
    for ms in &manifest.sessions {
        let dir = root.join(&ms.name);
        let mut trials = Vec::with_capacity(ms.trials.len());
        for (j, mt) in ms.trials.iter().enumerate() {
            let kin_path = dir.join(format!("trial_{j}_kin.csv"));
            let kinematics = read_kinematics(&kin_path, manifest.p, mt.n_bins)?;
            let trial_shell = Trial {
                kinematics,
                events: vec![Vec::new(); manifest.n_electrodes],
                bin_width: manifest.bin_width_s,
                start_time: mt.start_time_s,
            };
            let ev_path = dir.join(format!("trial_{j}_events.csv"));
            let events = read_events(&ev_path, &trial_shell, manifest.n_electrodes, n_features)?;
            trials.push(Trial {
                events,
                ..trial_shell
            });
        }
        sessions.push(Session { trials });
    }

    let dataset = Dataset {
        sessions,
        n_electrodes: manifest.n_electrodes,
        feature_names: manifest.feature_names,
        bin_width: manifest.bin_width_s,
        p: manifest.p,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, raw: &str, what: &str) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| Error::Format {
        file: path.to_path_buf(),
        line,
        msg: format!("cannot parse {what} from {raw:?}"),
    })
}

fn read_kinematics(path: &Path, p: usize, n_bins: usize) -> Result<DMatrix<f64>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    if headers.len() != p + 1 {
        return Err(Error::Format {
            file: path.to_path_buf(),
            line: 1,
            msg: format!("expected {} columns, header has {}", p + 1, headers.len()),
        });
    }
    let mut rows: Vec<f64> = Vec::with_capacity(n_bins * p);
    let mut count = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(path, line, e))?;
        if rec.len() != p + 1 {
            return Err(Error::Format {
                file: path.to_path_buf(),
                line,
                msg: format!("expected {} fields, found {}", p + 1, rec.len()),
            });
        }
        for k in 0..p {
            rows.push(parse_field(path, line, &rec[k + 1], "kinematics value")?);
        }
        count += 1;
    }
    if count != n_bins {
        return Err(Error::Format {
            file: path.to_path_buf(),
            line: count + 1,
            msg: format!("manifest declares {n_bins} bins, file has {count}"),
        });
    }
    Ok(DMatrix::from_row_slice(n_bins, p, &rows))
}

fn read_events(
    path: &Path,
    trial: &Trial,
    n_electrodes: usize,
    n_features: usize,
) -> Result<Vec<Vec<WaveformEvent>>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    if headers.len() != n_features + 2 {
        return Err(Error::Format {
            file: path.to_path_buf(),
            line: 1,
            msg: format!("expected {} columns, header has {}", n_features + 2, headers.len()),
        });
    }
    let mut events = vec![Vec::new(); n_electrodes];
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(path, line, e))?;
        if rec.len() != n_features + 2 {
            return Err(Error::Format {
                file: path.to_path_buf(),
                line,
                msg: format!("expected {} fields, found {}", n_features + 2, rec.len()),
            });
        }
        let electrode: usize = parse_field(path, line, &rec[0], "electrode index")?;
        if electrode >= n_electrodes {
            return Err(Error::Format {
                file: path.to_path_buf(),
                line,
                msg: format!("electrode {electrode} out of range (n_electrodes = {n_electrodes})"),
            });
        }
        let time: f64 = parse_field(path, line, &rec[1], "event time")?;
        if time < 0.0 || trial.bin_of(time).is_none() {
            return Err(Error::Format {
                file: path.to_path_buf(),
                line,
                msg: format!(
                    "event time {time} outside trial span [{}, {})",
                    trial.start_time,
                    trial.end_time()
                ),
            });
        }
        let mut features = Vec::with_capacity(n_features);
        for f in 0..n_features {
            let v: f64 = parse_field(path, line, &rec[f + 2], "feature value")?;
            if !v.is_finite() {
                return Err(Error::Format {
                    file: path.to_path_buf(),
                    line,
                    msg: "non-finite feature value".into(),
                });
            }
            features.push(v);
        }
        events[electrode].push(WaveformEvent { time, features });
    }
    Ok(events)
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    Error::Format {
        file: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Session indices playing each role in one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub train_sessions: Vec<usize>,
    pub validate_sessions: Vec<usize>,
    pub test_sessions: Vec<usize>,
}

/// How sessions are split into test and rotating validation groups.
/// Test sessions are always the last `test` sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldScheme {
    /// Validation blocks of `validate` consecutive non-test sessions.
    Rotating { test: usize, validate: usize },
    /// One validation session per fold.
    LeaveOneOut { test: usize },
}

impl Default for FoldScheme {
    fn default() -> Self {
        FoldScheme::Rotating {
            test: 2,
            validate: 2,
        }
    }
}

impl std::str::FromStr for FoldScheme {
    type Err = Error;

    /// `rotating:<test>:<validate>` or `loo:<test>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("fold scheme {s:?} is missing a field")))?
                .parse()
                .map_err(|_| Error::Invalid(format!("bad number in fold scheme {s:?}")))
        };
        match parts[0] {
            "rotating" => Ok(FoldScheme::Rotating {
                test: num(1)?,
                validate: num(2)?,
            }),
            "loo" => Ok(FoldScheme::LeaveOneOut { test: num(1)? }),
            other => Err(Error::Invalid(format!("unknown fold scheme {other:?}"))),
        }
    }
}

impl std::fmt::Display for FoldScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FoldScheme::Rotating { test, validate } => write!(f, "rotating:{test}:{validate}"),
            FoldScheme::LeaveOneOut { test } => write!(f, "loo:{test}"),
        }
    }
}

pub fn make_folds(n_sessions: usize, scheme: FoldScheme) -> Result<Vec<FoldPlan>> {
    let (n_test, block) = match scheme {
        FoldScheme::Rotating { test, validate } => (test, validate),
        FoldScheme::LeaveOneOut { test } => (test, 1),
    };
    if block == 0 {
        return Err(Error::Invalid("validation block size must be positive".into()));
    }
    // Every fold needs at least one training session besides its validation block.
    let need = n_test + block + 1;
    if n_sessions < need {
        return Err(Error::TooFewSessions {
            need,
            have: n_sessions,
        });
    }
    let n_pool = n_sessions - n_test;
    let test_sessions: Vec<usize> = (n_pool..n_sessions).collect();
    let pool: Vec<usize> = (0..n_pool).collect();
    Ok(pool
        .chunks(block)
        .map(|validate| FoldPlan {
            train_sessions: pool.iter().copied().filter(|s| !validate.contains(s)).collect(),
            validate_sessions: validate.to_vec(),
            test_sessions: test_sessions.clone(),
        })
        .collect())
}

/// Sessions used for selection (everything except the test block).
pub fn selection_sessions(folds: &[FoldPlan]) -> Vec<usize> {
    let mut all: Vec<usize> = folds
        .iter()
        .flat_map(|f| f.train_sessions.iter().chain(&f.validate_sessions).copied())
        .collect();
    all.sort_unstable();
    all.dedup();
    all
}

pub fn session_dir(root: &Path, i: usize) -> PathBuf {
    root.join(session_dir_name(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_trial(events: Vec<Vec<WaveformEvent>>, n_bins: usize) -> Trial {
        Trial {
            kinematics: DMatrix::from_fn(n_bins, 3, |t, k| (t * 3 + k) as f64 * 0.25),
            events,
            bin_width: 0.016,
            start_time: 1.0,
        }
    }

    fn ev(time: f64) -> WaveformEvent {
        WaveformEvent {
            time,
            features: vec![1.0, 2.0, -3.0, 0.5],
        }
    }

    fn one_trial_dataset(trial: Trial, n_electrodes: usize) -> Dataset {
        Dataset {
            sessions: vec![Session {
                trials: vec![trial],
            }],
            n_electrodes,
            feature_names: DEFAULT_FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            bin_width: 0.016,
            p: 3,
        }
    }

    #[test]
    fn minimal_directory_loads() {
        let dir = tempfile::tempdir().unwrap();
        let trial = tiny_trial(vec![vec![ev(1.001), ev(1.05)], vec![ev(1.1)]], 10);
        let ds = one_trial_dataset(trial, 2);
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.n_electrodes, 2);
        assert_eq!(back.sessions[0].trials[0].n_bins(), 10);
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_events_write_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let ds = one_trial_dataset(tiny_trial(vec![vec![], vec![]], 4), 2);
        save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("session_0/trial_0_events.csv")).unwrap();
        assert_eq!(text, "electrode,time_s,f1,f2,f3,f4\n");
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn event_past_trial_end_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let ds = one_trial_dataset(tiny_trial(vec![vec![ev(1.001)], vec![]], 10), 2);
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("session_0/trial_0_events.csv");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("1,5.0,1,2,3,4\n");
        fs::write(&path, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            Error::Format { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("outside trial span"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn electrode_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = one_trial_dataset(tiny_trial(vec![vec![], vec![]], 10), 2);
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("session_0/trial_0_events.csv");
        fs::write(&path, "electrode,time_s,f1,f2,f3,f4\n7,1.01,1,2,3,4\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("electrode 7 out of range"), "{err}");
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn malformed_row_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = one_trial_dataset(tiny_trial(vec![vec![ev(1.001)], vec![]], 10), 2);
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("session_0/trial_0_kin.csv");
        let text = fs::read_to_string(&path).unwrap().replacen(",0.25,", ",abc,", 1);
        fs::write(&path, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("trial_0_kin.csv:2"), "{err}");
    }

    #[test]
    fn default_fold_scheme() {
        let folds = make_folds(10, FoldScheme::default()).unwrap();
        assert_eq!(folds.len(), 4);
        for f in &folds {
            assert_eq!(f.train_sessions.len(), 6);
            assert_eq!(f.validate_sessions.len(), 2);
            assert_eq!(f.test_sessions, vec![8, 9]);
        }
        let mut union: Vec<usize> = folds.iter().flat_map(|f| f.validate_sessions.clone()).collect();
        union.sort();
        assert_eq!(union, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn leave_one_out_on_three_sessions() {
        let folds = make_folds(3, FoldScheme::LeaveOneOut { test: 1 }).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].validate_sessions, vec![0]);
        assert_eq!(folds[1].validate_sessions, vec![1]);
        assert!(folds.iter().all(|f| f.test_sessions == vec![2]));
    }

    #[test]
    fn too_few_sessions() {
        assert!(matches!(
            make_folds(3, FoldScheme::default()),
            Err(Error::TooFewSessions { need: 5, have: 3 })
        ));
    }

    #[test]
    fn fold_scheme_parses() {
        assert_eq!("rotating:2:2".parse::<FoldScheme>().unwrap(), FoldScheme::default());
        assert_eq!(
            "loo:1".parse::<FoldScheme>().unwrap(),
            FoldScheme::LeaveOneOut { test: 1 }
        );
        assert!("nope".parse::<FoldScheme>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn folds_partition_non_test_sessions(n in 3usize..20, test in 0usize..3, block in 1usize..4) {
            let scheme = FoldScheme::Rotating { test, validate: block };
            if let Ok(folds) = make_folds(n, scheme) {
                let mut seen = vec![0usize; n];
                for f in &folds {
                    for s in &f.validate_sessions {
                        proptest::prop_assert!(!f.train_sessions.contains(s));
                        seen[*s] += 1;
                    }
                    for s in f.train_sessions.iter().chain(&f.validate_sessions) {
                        proptest::prop_assert!(!f.test_sessions.contains(s));
                    }
                }
                for s in 0..n - test {
                    proptest::prop_assert_eq!(seen[s], 1);
                }
            }
        }
    }
}
