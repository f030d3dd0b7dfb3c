//! Run configuration: `key = value` files with `#` comments, flag
//! overrides, and defaults matching the standard FB15K-237 settings.
//!
//! Precedence is flags over file over defaults. Unknown keys are rejected
//! with the nearest valid key named. The effective configuration echoes
//! back to a file that re-parses to an identical value.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::expand::Horizons;
use crate::graph::MaskMode;
use crate::train::TrainConfig;

/// Full run configuration: training knobs plus dataset paths and modes.
#[derive(Debug, Clone)]
pub struct Config {
    pub train: TrainConfig,
    pub add_inverse: bool,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub negatives_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Epoch fractions at which to write snapshot checkpoints.
    pub checkpoint_fractions: Vec<f64>,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            train: TrainConfig {
                batch_size: 80,
                n_dims: 100,
                n_dims_att: 50,
                mlp_hidden: None,
                max_sampling_per_step: 10_000,
                horizons: Horizons::new(20, 200, 200, 6),
                n_steps_in_ignn: 2,
                learning_rate: 0.001,
                grad_clipnorm: 1.0,
                n_epochs: 1,
                mask_mode: MaskMode::CutoffPairs,
                loss_epsilon: 1e-20,
                leaky_relu_slope: 0.2,
                init_scale: 0.05,
                seed: 0,
            },
            add_inverse: true,
            train_path: None,
            valid_path: None,
            test_path: None,
            negatives_path: None,
            output_dir: PathBuf::from("out"),
            checkpoint_fractions: Vec::new(),
        }
    }
}

const KEYS: &[&str] = &[
    "batch_size",
    "n_dims",
    "n_dims_att",
    "mlp_hidden",
    "max_sampling_per_step",
    "max_attending_from_per_step",
    "max_sampling_per_node",
    "max_attending_to_per_step",
    "n_steps_in_IGNN",
    "n_steps_in_AGNN",
    "learning_rate",
    "grad_clipnorm",
    "n_epochs",
    "mask_mode",
    "loss_epsilon",
    "leaky_relu_slope",
    "init_scale",
    "seed",
    "add_inverse",
    "train_path",
    "valid_path",
    "test_path",
    "negatives_path",
    "output_dir",
    "checkpoint_fractions",
];

fn bad_value(key: &str, value: &str) -> Error {
    Error::Config(format!("cannot parse value '{value}' for key '{key}'"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad_value(key, value))
}

impl Config {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "n_dims" => self.train.n_dims = parse(key, value)?,
            "n_dims_att" => self.train.n_dims_att = parse(key, value)?,
            "mlp_hidden" => self.train.mlp_hidden = Some(parse(key, value)?),
            "max_sampling_per_step" => self.train.max_sampling_per_step = parse(key, value)?,
            "max_attending_from_per_step" => {
                self.train.horizons.max_attending_from = parse(key, value)?
            }
            "max_sampling_per_node" => {
                self.train.horizons.max_sampling_per_node = parse(key, value)?
            }
            "max_attending_to_per_step" => {
                self.train.horizons.max_attending_to = parse(key, value)?
            }
            "n_steps_in_IGNN" => self.train.n_steps_in_ignn = parse(key, value)?,
            "n_steps_in_AGNN" => self.train.horizons.n_steps = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "grad_clipnorm" => self.train.grad_clipnorm = parse(key, value)?,
            "n_epochs" => self.train.n_epochs = parse(key, value)?,
            "mask_mode" => {
                self.train.mask_mode = match value {
                    "cutoff_pairs" => MaskMode::CutoffPairs,
                    "remove_batch" => MaskMode::RemoveBatch,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "loss_epsilon" => self.train.loss_epsilon = parse(key, value)?,
            "leaky_relu_slope" => self.train.leaky_relu_slope = parse(key, value)?,
            "init_scale" => self.train.init_scale = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "add_inverse" => self.add_inverse = parse(key, value)?,
            "train_path" => self.train_path = Some(PathBuf::from(value)),
            "valid_path" => self.valid_path = Some(PathBuf::from(value)),
            "test_path" => self.test_path = Some(PathBuf::from(value)),
            "negatives_path" => self.negatives_path = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint_fractions" => {
                self.checkpoint_fractions = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|f| parse::<f64>(key, f.trim()))
                        .collect::<Result<Vec<f64>>>()?
                };
                if self
                    .checkpoint_fractions
                    .iter()
                    .any(|&f| !(0.0..=1.0).contains(&f))
                {
                    return Err(bad_value(key, value));
                }
            }
            _ => {
                let nearest = KEYS
                    .iter()
                    .min_by_key(|k| edit_distance(key, k))
                    .copied()
                    .unwrap_or("batch_size");
                return Err(Error::Config(format!(
                    "unknown key '{key}' (did you mean '{nearest}'?)"
                )));
            }
        }
        Ok(())
    }

    /// Parse a config file: one `key = value` per line, `#` starts a
    /// comment, blank lines ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no + 1,
                    msg: format!("expected 'key = value', got '{line}'"),
                });
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no + 1,
                    msg: e.to_string(),
                })?;
        }
        Ok(())
    }

    /// Apply `key=value` override strings (from flags).
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        for (key, value) in overrides {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// Canonical `key = value` rendering; re-parsing it reproduces this
    /// configuration exactly.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("batch_size", self.train.batch_size.to_string());
        line("n_dims", self.train.n_dims.to_string());
        line("n_dims_att", self.train.n_dims_att.to_string());
        if let Some(h) = self.train.mlp_hidden {
            line("mlp_hidden", h.to_string());
        }
        line(
            "max_sampling_per_step",
            self.train.max_sampling_per_step.to_string(),
        );
        line(
            "max_attending_from_per_step",
            self.train.horizons.max_attending_from.to_string(),
        );
        line(
            "max_sampling_per_node",
            self.train.horizons.max_sampling_per_node.to_string(),
        );
        line(
            "max_attending_to_per_step",
            self.train.horizons.max_attending_to.to_string(),
        );
        line("n_steps_in_IGNN", self.train.n_steps_in_ignn.to_string());
        line("n_steps_in_AGNN", self.train.horizons.n_steps.to_string());
        line("learning_rate", format!("{}", self.train.learning_rate));
        line("grad_clipnorm", format!("{}", self.train.grad_clipnorm));
        line("n_epochs", self.train.n_epochs.to_string());
        line(
            "mask_mode",
            match self.train.mask_mode {
                MaskMode::CutoffPairs => "cutoff_pairs".to_string(),
                MaskMode::RemoveBatch => "remove_batch".to_string(),
            },
        );
        line("loss_epsilon", format!("{:e}", self.train.loss_epsilon));
        line(
            "leaky_relu_slope",
            format!("{}", self.train.leaky_relu_slope),
        );
        line("init_scale", format!("{}", self.train.init_scale));
        line("seed", self.train.seed.to_string());
        line("add_inverse", self.add_inverse.to_string());
        for (key, path) in [
            ("train_path", &self.train_path),
            ("valid_path", &self.valid_path),
            ("test_path", &self.test_path),
            ("negatives_path", &self.negatives_path),
        ] {
            if let Some(p) = path {
                line(key, p.display().to_string());
            }
        }
        line("output_dir", self.output_dir.display().to_string());
        if !self.checkpoint_fractions.is_empty() {
            line(
                "checkpoint_fractions",
                self.checkpoint_fractions
                    .iter()
                    .map(|f| f.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        out
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
