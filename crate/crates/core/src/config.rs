//! TOML run configuration.
//!
//! ```toml
//! schema = 1
//!
//! [dataset]
//! kind = "scalar"          # scalar | isotropic | matrix
//! sigma_A = 2.0
//! sigma_B = 1.0
//! rho = 0.0
//! w_A = 1.0
//! w_B = 1.0
//!
//! [network]
//! L = 2
//! L_f = 2
//! init = "norm_exact"      # norm_exact | gaussian
//! u0 = 1e-4
//!
//! [training]
//! eta = 0.04
//! max_steps = 2000
//! ```
//!
//! `isotropic` datasets use `dims_A`, `dims_B`, `var_A`, `var_B` and constant
//! target weights `w_A`, `w_B`; `matrix` datasets give `sigma` as rows and
//! `w_star_A`, `w_star_B` as lists. Optional `[sweep]`, `[genexp]` and `[xor]`
//! sections configure the corresponding subcommands.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Drive, LossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::harness::{FusionKind, GenExpSpec, ScalarData, SweepAxis, SweepSpec, XorSpec};
use crate::network::{Activation, FusionConfig, InitMode};
use crate::stats::{DatasetSpec, LabelMode};

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema: i64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub training: TrainingSection,
    pub sweep: Option<SweepSection>,
    pub genexp: Option<GenExpSection>,
    pub xor: Option<XorSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: String,
    #[serde(rename = "sigma_A")]
    pub sigma_a: f64,
    #[serde(rename = "sigma_B")]
    pub sigma_b: f64,
    pub rho: f64,
    #[serde(rename = "w_A")]
    pub w_a: f64,
    #[serde(rename = "w_B")]
    pub w_b: f64,
    #[serde(rename = "dims_A")]
    pub dims_a: usize,
    #[serde(rename = "dims_B")]
    pub dims_b: usize,
    #[serde(rename = "var_A")]
    pub var_a: f64,
    #[serde(rename = "var_B")]
    pub var_b: f64,
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(rename = "w_star_A")]
    pub w_star_a: Option<Vec<f64>>,
    #[serde(rename = "w_star_B")]
    pub w_star_b: Option<Vec<f64>>,
    pub noise_std: f64,
    pub labels: String,
}

impl Default for DatasetSection {
    fn default() -> DatasetSection {
        DatasetSection {
            kind: "scalar".into(),
            sigma_a: 2.0,
            sigma_b: 1.0,
            rho: 0.0,
            w_a: 1.0,
            w_b: 1.0,
            dims_a: 1,
            dims_b: 1,
            var_a: 1.0,
            var_b: 1.0,
            sigma: None,
            w_star_a: None,
            w_star_b: None,
            noise_std: 0.0,
            labels: "regression".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "L_f")]
    pub l_f: usize,
    pub width: usize,
    pub activation: String,
    pub init: String,
    pub u0: f64,
    pub std: Option<f64>,
    pub post_std: Option<f64>,
    pub seed: u64,
}

impl Default for NetworkSection {
    fn default() -> NetworkSection {
        NetworkSection {
            l: 2,
            l_f: 2,
            width: 100,
            activation: "linear".into(),
            init: "norm_exact".into(),
            u0: 1e-3,
            std: None,
            post_std: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub eta: f64,
    pub max_steps: usize,
    pub loss: String,
    pub drive: String,
    pub record_stride: usize,
    pub stop_loss: f64,
    pub record_first_layer: bool,
    /// Write the flattened total maps into the trajectory CSV.
    pub record_maps: bool,
    /// Sample count for the sample drive.
    pub samples: usize,
}

impl Default for TrainingSection {
    fn default() -> TrainingSection {
        let t = TrainConfig::default();
        TrainingSection {
            eta: t.eta,
            max_steps: t.max_steps,
            loss: "mse".into(),
            drive: "correlation".into(),
            record_stride: t.record_stride,
            stop_loss: t.stop_loss,
            record_first_layer: false,
            record_maps: false,
            samples: 8192,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: String,
    pub grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_plateau_frac")]
    pub plateau_frac: f64,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_plateau_frac() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenExpSection {
    #[serde(rename = "P_train")]
    pub p_train: usize,
    #[serde(default)]
    pub early_stop: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XorSection {
    #[serde(rename = "sigma_A")]
    pub sigma_a: f64,
    pub fusion: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub width: Option<usize>,
    pub samples: Option<usize>,
    pub init_std: Option<f64>,
    pub max_steps: Option<usize>,
    pub eta: Option<f64>,
}

fn parse_error(e: impl std::fmt::Display) -> Error {
    Error::invalid("config", e.to_string().trim().to_string())
}

/// Parses a `key.path=value` override; the value is read as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(assignment, "override must have the form key.path=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::invalid(path, "empty key segment"));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::invalid(path, format!("`{k}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    pub fn from_table(table: toml::Table) -> Result<Config> {
        let config: Config = toml::Value::Table(table).try_into().map_err(parse_error)?;
        if config.schema != SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", config.schema),
            ));
        }
        Ok(config)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Config> {
        let mut table: toml::Table = toml::from_str(text).map_err(parse_error)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Config::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text, overrides)
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).unwrap_or_default()
    }

    pub fn label_mode(&self) -> Result<LabelMode> {
        match self.dataset.labels.as_str() {
            "regression" => Ok(LabelMode::Regression),
            "sign" => Ok(LabelMode::Sign),
            other => Err(Error::invalid("dataset.labels", format!("unknown label mode {other:?}"))),
        }
    }

    pub fn scalar_data(&self) -> Result<ScalarData> {
        if self.dataset.kind != "scalar" {
            return Err(Error::invalid("dataset.kind", "this command needs a scalar dataset"));
        }
        let d = &self.dataset;
        Ok(ScalarData {
            noise_std: d.noise_std,
            ..ScalarData::new(d.sigma_a, d.sigma_b, d.rho, d.w_a, d.w_b)
        })
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let d = &self.dataset;
        let spec = match d.kind.as_str() {
            "scalar" => self.scalar_data()?.spec(),
            "isotropic" => DatasetSpec::isotropic(d.dims_a, d.dims_b, d.var_a, d.var_b, d.w_a, d.w_b)
                .with_noise(d.noise_std),
            "matrix" => {
                let rows = d
                    .sigma
                    .as_ref()
                    .ok_or_else(|| Error::invalid("dataset.sigma", "required for kind = \"matrix\""))?;
                let wa = d
                    .w_star_a
                    .as_ref()
                    .ok_or_else(|| Error::invalid("dataset.w_star_A", "required for kind = \"matrix\""))?;
                let wb = d
                    .w_star_b
                    .as_ref()
                    .ok_or_else(|| Error::invalid("dataset.w_star_B", "required for kind = \"matrix\""))?;
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::invalid("dataset.sigma", "must be a square list of rows"));
                }
                let sigma = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
                DatasetSpec::new(sigma, DVector::from_vec(wa.clone()), DVector::from_vec(wb.clone()))?
                    .with_noise(d.noise_std)
            }
            other => {
                return Err(Error::invalid(
                    "dataset.kind",
                    format!("expected scalar, isotropic or matrix, got {other:?}"),
                ))
            }
        };
        let spec = spec.with_labels(self.label_mode()?);
        spec.validate()?;
        Ok(spec)
    }

    pub fn init_mode(&self) -> Result<InitMode> {
        let n = &self.network;
        match n.init.as_str() {
            "norm_exact" => Ok(InitMode::NormExact { u0: n.u0 }),
            "gaussian" => Ok(match (n.std, n.post_std) {
                (Some(std), Some(post_std)) => InitMode::Gaussian { std, post_std },
                (Some(std), None) => InitMode::gaussian(std),
                (None, _) => InitMode::gaussian_gain(n.u0, n.width),
            }),
            other => Err(Error::invalid(
                "network.init",
                format!("expected norm_exact or gaussian, got {other:?}"),
            )),
        }
    }

    pub fn fusion(&self, dims_a: usize, dims_b: usize) -> Result<FusionConfig> {
        let n = &self.network;
        let activation = match n.activation.as_str() {
            "linear" => Activation::Linear,
            "relu" => Activation::Relu,
            other => {
                return Err(Error::invalid(
                    "network.activation",
                    format!("expected linear or relu, got {other:?}"),
                ))
            }
        };
        let config = FusionConfig::new(n.l, n.l_f, dims_a, dims_b)
            .width(n.width)
            .activation(activation)
            .init(self.init_mode()?)
            .seed(n.seed);
        config.validate()?;
        Ok(config)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = &self.training;
        let loss_kind = match t.loss.as_str() {
            "mse" => LossKind::Mse,
            "logistic" => LossKind::Logistic,
            other => return Err(Error::invalid("training.loss", format!("expected mse or logistic, got {other:?}"))),
        };
        let drive = match t.drive.as_str() {
            "correlation" => Drive::Correlation,
            "samples" => Drive::Samples,
            other => {
                return Err(Error::invalid(
                    "training.drive",
                    format!("expected correlation or samples, got {other:?}"),
                ))
            }
        };
        let config = TrainConfig {
            eta: t.eta,
            max_steps: t.max_steps,
            loss_kind,
            drive,
            record_stride: t.record_stride,
            stop_loss: t.stop_loss,
            record_first_layer: t.record_first_layer,
        };
        config.validate().map_err(|e| match e {
            Error::Invalid { key, msg } => Error::invalid(format!("training.{key}"), msg),
            e => e,
        })?;
        Ok(config)
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::invalid("sweep", "section is required for this command"))?;
        let axis = SweepAxis::parse(&s.axis).ok_or_else(|| {
            Error::invalid(
                "sweep.axis",
                format!("expected rho, variance_ratio, init_scale or fusion_depth, got {:?}", s.axis),
            )
        })?;
        let mut spec = SweepSpec::new(axis, s.grid.clone(), self.scalar_data()?, self.fusion(1, 1)?, self.train()?);
        spec.samples = self.training.samples;
        spec.seeds = s.seeds.clone();
        spec.plateau_frac = s.plateau_frac;
        spec.validate()?;
        Ok(spec)
    }

    pub fn genexp_spec(&self) -> Result<GenExpSpec> {
        let g = self
            .genexp
            .as_ref()
            .ok_or_else(|| Error::invalid("genexp", "section is required for this command"))?;
        let data = self.dataset_spec()?;
        let spec = GenExpSpec {
            fusion: self.fusion(data.dims_a, data.dims_b)?,
            data,
            p_train: g.p_train,
            train: self.train()?,
            early_stop: g.early_stop,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One XOR run per configured seed.
    pub fn xor_specs(&self) -> Result<Vec<XorSpec>> {
        let x = self
            .xor
            .as_ref()
            .ok_or_else(|| Error::invalid("xor", "section is required for this command"))?;
        let fusion = FusionKind::parse(&x.fusion)
            .ok_or_else(|| Error::invalid("xor.fusion", format!("expected early or late, got {:?}", x.fusion)))?;
        if x.seeds.is_empty() {
            return Err(Error::invalid("xor.seeds", "must not be empty"));
        }
        x.seeds
            .iter()
            .map(|&seed| {
                let mut spec = XorSpec::new(x.sigma_a, fusion, seed);
                if let Some(w) = x.width {
                    spec.width = w;
                }
                if let Some(p) = x.samples {
                    spec.samples = p;
                }
                if let Some(s) = x.init_std {
                    spec.init_std = s;
                }
                if let Some(m) = x.max_steps {
                    spec.train.max_steps = m;
                }
                if let Some(e) = x.eta {
                    spec.train.eta = e;
                }
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }

    /// Applies a command-line seed: the network seed and any seed lists.
    pub fn set_seed(&mut self, seed: u64) {
        self.network.seed = seed;
        if let Some(s) = self.sweep.as_mut() {
            s.seeds = vec![seed];
        }
        if let Some(x) = self.xor.as_mut() {
            x.seeds = vec![seed];
        }
    }
}
