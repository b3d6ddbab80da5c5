//! Versioned key-value text format for fitted models.
//!
//! One `key = value` pair per line; `#` starts a comment line. Vectors and
//! matrices are space-separated (matrices row-major). Floats are written
//! in their shortest round-trip form, so reading a written model restores
//! every number exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::featurize::{AceLookup, TransformModel};

use super::{EquationSpec, FittedEquation, MomentCovariance, NoiseCatalog, StateModel};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Fit-time settings stored alongside the equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelMeta {
    pub bin_width: f64,
    pub p: usize,
    pub n_electrodes: usize,
    pub n_features: usize,
    pub max_lag: usize,
    /// Use expected rather than observed counts in the waveform covariance.
    pub static_cov: bool,
}

/// Equations, noise catalog and optional state model fitted on one training set.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub meta: ModelMeta,
    pub equations: Vec<FittedEquation>,
    pub catalog: NoiseCatalog,
    pub state: Option<StateModel>,
}

impl FittedModel {
    pub fn specs(&self) -> Vec<EquationSpec> {
        self.equations.iter().map(|e| e.spec).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let m = &self.meta;
        let _ = writeln!(out, "# wavedecode model");
        put(&mut out, "format_version", MODEL_FORMAT_VERSION);
        put(&mut out, "bin_width", fl(m.bin_width));
        put(&mut out, "p", m.p);
        put(&mut out, "n_electrodes", m.n_electrodes);
        put(&mut out, "n_features", m.n_features);
        put(&mut out, "max_lag", m.max_lag);
        put(&mut out, "static_cov", m.static_cov);
        put(&mut out, "n_equations", self.equations.len());
        for (i, eq) in self.equations.iter().enumerate() {
            let k = |s: &str| format!("eq.{i}.{s}");
            put(&mut out, &k("spec"), eq.spec);
            put(&mut out, &k("intercept"), fl(eq.intercept));
            put(&mut out, &k("coeff"), vec_text(&eq.coeff));
            put(&mut out, &k("residual_variance"), fl(eq.residual_variance));
            put(&mut out, &k("unit_moment_variance"), fl(eq.unit_moment_variance));
            put(&mut out, &k("r_squared"), fl(eq.r_squared));
            put(&mut out, &k("n_samples"), eq.n_samples);
            match &eq.transform_model {
                TransformModel::Identity => {}
                TransformModel::Sqrt { abs } => put(&mut out, &k("sqrt_abs"), abs),
                TransformModel::Ace(l) => {
                    put(&mut out, &k("ace_knots"), vec_text(&l.knots));
                    put(&mut out, &k("ace_values"), vec_text(&l.values));
                }
            }
        }
        let c = &self.catalog;
        put(
            &mut out,
            "catalog.count_specs",
            c.count_specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "),
        );
        put(&mut out, "catalog.count_cov", mat_text(&c.count_cov));
        let mc = &c.moments;
        put(&mut out, "moments.n_electrodes", mc.n_electrodes);
        put(&mut out, "moments.n_features", mc.n_features);
        put(
            &mut out,
            "moments.event_n",
            mc.event_n.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" "),
        );
        for (e, cov) in mc.event_cov.iter().enumerate() {
            put(&mut out, &format!("moments.event_cov.{e}"), mat_text(cov));
        }
        put(&mut out, "moments.cross", mat_text(&mc.cross));
        put(&mut out, "moments.mean_counts", vec_text(&mc.mean_counts));
        if let Some(s) = &self.state {
            put(&mut out, "state.order", s.order);
            for (i, a) in s.a.iter().enumerate() {
                put(&mut out, &format!("state.a.{}", i + 1), mat_text(a));
            }
            put(&mut out, "state.w", mat_text(&s.w));
            put(&mut out, "state.degenerate", s.degenerate);
            put(&mut out, "state.unstable", s.unstable);
        }
        out
    }

    pub fn from_text(text: &str, file: &Path) -> Result<Self> {
        let kv = KeyValues::parse(text, file)?;
        let version: u32 = kv.get("format_version")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(kv.error_at("format_version", &format!("unsupported format version {version}")));
        }
        let meta = ModelMeta {
            bin_width: kv.get("bin_width")?,
            p: kv.get("p")?,
            n_electrodes: kv.get("n_electrodes")?,
            n_features: kv.get("n_features")?,
            max_lag: kv.get("max_lag")?,
            static_cov: kv.get("static_cov")?,
        };
        let n: usize = kv.get("n_equations")?;
        let mut equations = Vec::with_capacity(n);
        for i in 0..n {
            let k = |s: &str| format!("eq.{i}.{s}");
            let spec: EquationSpec = kv.get(&k("spec"))?;
            let transform_model = match spec.transform {
                crate::featurize::TransformKind::Identity => TransformModel::Identity,
                crate::featurize::TransformKind::Sqrt => TransformModel::Sqrt {
                    abs: kv.get(&k("sqrt_abs"))?,
                },
                crate::featurize::TransformKind::Ace => {
                    let knots = kv.floats(&k("ace_knots"))?;
                    let values = kv.floats(&k("ace_values"))?;
                    if knots.is_empty() || knots.len() != values.len() {
                        return Err(kv.error_at(&k("ace_values"), "ace knots and values differ in length"));
                    }
                    TransformModel::Ace(AceLookup { knots, values })
                }
            };
            let coeff = kv.floats(&k("coeff"))?;
            if coeff.len() != meta.p {
                return Err(kv.error_at(&k("coeff"), &format!("expected {} coefficients", meta.p)));
            }
            equations.push(FittedEquation {
                spec,
                intercept: kv.get(&k("intercept"))?,
                coeff,
                transform_model,
                residual_variance: kv.get(&k("residual_variance"))?,
                unit_moment_variance: kv.get(&k("unit_moment_variance"))?,
                r_squared: kv.get(&k("r_squared"))?,
                n_samples: kv.get(&k("n_samples"))?,
            });
        }
        let count_specs = kv
            .raw("catalog.count_specs")?
            .split_whitespace()
            .map(|s| s.parse::<EquationSpec>())
            .collect::<Result<Vec<_>>>()?;
        let nc = count_specs.len();
        let count_cov = kv.matrix("catalog.count_cov", nc, nc)?;
        let ne: usize = kv.get("moments.n_electrodes")?;
        let nf: usize = kv.get("moments.n_features")?;
        let slots = nf * crate::featurize::MOMENT_ORDERS;
        let event_n = kv
            .raw("moments.event_n")?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| kv.error_at("moments.event_n", "bad integer")))
            .collect::<Result<Vec<_>>>()?;
        let event_cov = (0..ne)
            .map(|e| kv.matrix(&format!("moments.event_cov.{e}"), slots, slots))
            .collect::<Result<Vec<_>>>()?;
        let cross = kv.matrix("moments.cross", ne * slots, ne * slots)?;
        let mean_counts = kv.floats("moments.mean_counts")?;
        if event_n.len() != ne || mean_counts.len() != ne {
            return Err(kv.error_at("moments.mean_counts", "per-electrode lists have the wrong length"));
        }
        let state = if kv.has("state.order") {
            let order: usize = kv.get("state.order")?;
            let a = (1..=order)
                .map(|i| kv.matrix(&format!("state.a.{i}"), meta.p, meta.p))
                .collect::<Result<Vec<_>>>()?;
            Some(StateModel {
                order,
                a,
                w: kv.matrix("state.w", meta.p, meta.p)?,
                degenerate: kv.get("state.degenerate")?,
                unstable: kv.get("state.unstable")?,
            })
        } else {
            None
        };
        Ok(FittedModel {
            meta,
            equations,
            catalog: NoiseCatalog {
                count_specs,
                count_cov,
                moments: MomentCovariance {
                    n_electrodes: ne,
                    n_features: nf,
                    event_n,
                    event_cov,
                    cross,
                    mean_counts,
                },
            },
            state,
        })
    }
}

pub fn write_model(model: &FittedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FittedModel::from_text(&text, path)
}

fn put(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key} = {value}");
}

/// Shortest representation that parses back to the same bits.
fn fl(v: f64) -> String {
    format!("{v:?}")
}

fn vec_text(v: &[f64]) -> String {
    v.iter().map(|&x| fl(x)).collect::<Vec<_>>().join(" ")
}

fn mat_text(m: &DMatrix<f64>) -> String {
    let mut parts = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            parts.push(fl(m[(i, j)]));
        }
    }
    parts.join(" ")
}

struct KeyValues {
    file: PathBuf,
    map: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    fn parse(text: &str, file: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (k, v) = trimmed.split_once('=').ok_or_else(|| Error::Format {
                file: file.to_path_buf(),
                line: line_no,
                msg: "expected `key = value`".into(),
            })?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), (line_no, v.trim().to_string())).is_some() {
                return Err(Error::Format {
                    file: file.to_path_buf(),
                    line: line_no,
                    msg: format!("duplicate key {key}"),
                });
            }
        }
        Ok(KeyValues {
            file: file.to_path_buf(),
            map,
        })
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn error_at(&self, key: &str, msg: &str) -> Error {
        Error::Format {
            file: self.file.clone(),
            line: self.map.get(key).map(|(l, _)| *l).unwrap_or(0),
            msg: format!("{key}: {msg}"),
        }
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| self.error_at(key, "missing key"))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| self.error_at(key, &format!("cannot parse {raw:?}")))
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>> {
        self.raw(key)?
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| self.error_at(key, &format!("bad number {s:?}"))))
            .collect()
    }

    fn matrix(&self, key: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let v = self.floats(key)?;
        if v.len() != rows * cols {
            return Err(self.error_at(key, &format!("expected {} entries, found {}", rows * cols, v.len())));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &v))
    }
}
