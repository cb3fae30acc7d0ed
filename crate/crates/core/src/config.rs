//! JSON run configuration.
//!
//! ```json
//! {
//!   "model":   { "m": 2, "alpha": 1.5, "ell": 0, "Cf": 1, "f_kind": "PowerLaw" },
//!   "grid":    { "nx": 64, "ny": 64, "Lx": 1, "Ly": 1 },
//!   "initial": {
//!     "u0": { "kind": "gaussian", "center": [0.35, 0.4], "width": 0.15,
//!             "amplitude": 1, "floor": 0.1 },
//!     "v0": { "kind": "constant", "c": 1 }
//!   },
//!   "schedule": { "sample_dt": 0.05, "snapshot_count": 512 },
//!   "stop":     { "v_tol": 1e-6, "T_max": 1000 },
//!   "seed": 7
//! }
//! ```
//!
//! Unknown keys are rejected everywhere. Errors carry the dotted key path of
//! the offending entry.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridSpec, ScalarField};
use crate::io::read_snapshot;
use crate::model::{Case, InitialData, ModelError, ModelParams};
use crate::solver::{Schedule, StepControl, StopRule};

/// How to fill a field on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant {
        c: f64,
    },
    /// `floor + amplitude * exp(-|x - center|^2 / (2 width^2))`
    Gaussian {
        center: [f64; 2],
        width: f64,
        amplitude: f64,
        floor: f64,
    },
    /// `lo` on cells with even `i + j`, `hi` on the others.
    Checkerboard {
        lo: f64,
        hi: f64,
    },
    /// A snapshot file; relative paths resolve against the config file.
    File {
        path: PathBuf,
    },
    /// Independent uniform values in `[lo, hi)` drawn from the run seed.
    Random {
        lo: f64,
        hi: f64,
    },
}

impl FieldSpec {
    /// `stream` separates the random streams of different fields.
    pub fn build(&self, grid: Grid, seed: u64, stream: u64, base: Option<&Path>) -> Result<ScalarField> {
        match *self {
            FieldSpec::Constant { c } => {
                finite("c", c)?;
                Ok(ScalarField::constant(grid, c))
            }
            FieldSpec::Gaussian {
                center,
                width,
                amplitude,
                floor,
            } => {
                for (k, x) in [
                    ("center[0]", center[0]),
                    ("center[1]", center[1]),
                    ("amplitude", amplitude),
                    ("floor", floor),
                ] {
                    finite(k, x)?;
                }
                if !(width > 0.0 && width.is_finite()) {
                    return Err(spec_err("width", format!("must be positive, got {width}")));
                }
                let s2 = 2.0 * width * width;
                Ok(ScalarField::from_fn(grid, |x, y| {
                    let r2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
                    floor + amplitude * (-r2 / s2).exp()
                }))
            }
            FieldSpec::Checkerboard { lo, hi } => {
                finite("lo", lo)?;
                finite("hi", hi)?;
                let nx = grid.nx();
                let values = (0..grid.len())
                    .map(|k| if (k % nx + k / nx) % 2 == 0 { lo } else { hi })
                    .collect();
                ScalarField::new(grid, values)
            }
            FieldSpec::File { ref path } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                let (field, _) = read_snapshot(&full)?;
                if *field.grid() != grid {
                    return Err(spec_err(
                        "path",
                        format!("{} is on grid {}, expected {grid}", full.display(), field.grid()),
                    ));
                }
                Ok(field)
            }
            FieldSpec::Random { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(spec_err("lo", format!("need finite lo < hi, got [{lo}, {hi})")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                let values = (0..grid.len()).map(|_| rng.gen_range(lo..hi)).collect();
                ScalarField::new(grid, values)
            }
        }
    }
}

fn finite(key: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(spec_err(key, format!("must be finite, got {x}")))
    }
}

fn spec_err(key: &str, msg: String) -> Error {
    Error::Config {
        key: key.into(),
        msg,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub u0: FieldSpec,
    pub v0: FieldSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grid: GridSpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub stop: StopRule,
    #[serde(default)]
    pub stepping: StepControl,
    /// Output directory; the command line may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Directory that relative file paths resolve against. Not serialized.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// A configuration that passed every check, ready to run.
#[derive(Debug, Clone)]
pub struct ValidatedRun {
    pub params: ModelParams,
    pub case: Case,
    pub init: InitialData,
    pub schedule: Schedule,
    pub stop: StopRule,
    pub control: StepControl,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::Config {
                key: if key == "." { "<root>".into() } else { key },
                msg: e.into_inner().to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut cfg = Self::from_json_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configs serialize")
    }

    /// Validates everything the solver would reject, naming the key.
    pub fn validate(&self) -> Result<ValidatedRun> {
        let at = |key: &str| {
            let key = key.to_string();
            move |e: Error| match e {
                Error::Config { key: sub, msg } => Error::Config {
                    key: format!("{key}.{sub}"),
                    msg,
                },
                other => Error::Config {
                    key: key.clone(),
                    msg: other.to_string(),
                },
            }
        };
        let grid = Grid::new(self.grid.nx, self.grid.ny, self.grid.lx, self.grid.ly).map_err(at("grid"))?;
        let case = self.model.classify().map_err(|e| {
            let key = match &e {
                ModelError::OutOfRange { name, .. } => format!("model.{name}"),
                _ => "model".into(),
            };
            Error::Config {
                key,
                msg: e.to_string(),
            }
        })?;
        let base = self.base_dir.as_deref();
        let u0 = self.initial.u0.build(grid, self.seed, 0, base).map_err(at("initial.u0"))?;
        let v0 = self.initial.v0.build(grid, self.seed, 1, base).map_err(at("initial.v0"))?;
        let init = InitialData::new(u0, v0);
        init.validate(case).map_err(|e| {
            let key = match &e {
                ModelError::InitialData(msg) if msg.starts_with("v0") => "initial.v0",
                _ => "initial.u0",
            };
            Error::Config {
                key: key.into(),
                msg: e.to_string(),
            }
        })?;
        self.schedule.validate().map_err(|e| at("schedule")(e.into()))?;
        self.stop.validate().map_err(|e| at("stop")(e.into()))?;
        self.stepping.validate().map_err(|e| at("stepping")(e.into()))?;
        Ok(ValidatedRun {
            params: self.model,
            case,
            init,
            schedule: self.schedule,
            stop: self.stop,
            control: self.stepping,
        })
    }
}
