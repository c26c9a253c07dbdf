//! Run configuration files (TOML) and their translation into runtime
//! objects. Parse errors carry the file's line/column; semantic errors name
//! the offending field.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::adversary::{TamperPlan, TamperStrategy, Trigger};
use crate::cnn::{NetworkSpec, TrainConfig};
use crate::data::{synthetic_digits, Dataset};
use crate::ring::{FixedPointCodec, RingElement, RingInt, KAPPA};
use crate::sharing::PartyId;
use crate::train::{CollabOptions, DomainData};
use crate::transfer::{DegreeMatrix, ThetaMode};
use crate::{Error, Result};

fn default_kappa() -> u32 {
    KAPPA
}

fn default_precision() -> u32 {
    8
}

fn default_network() -> String {
    "I".into()
}

fn default_batch_size() -> usize {
    128
}

fn default_learning_rate() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.9
}

fn default_dropout_keep() -> f64 {
    0.8
}

fn default_epochs() -> usize {
    10
}

fn default_theta_t() -> f64 {
    0.1
}

fn default_mode() -> String {
    "in-process".into()
}

fn default_timeout() -> u64 {
    30
}

fn default_warmup_epochs() -> usize {
    2
}

fn default_mix_gradients() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: String, // "synthetic" | "idx"
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Synthetic test split size.
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
}

fn default_test_samples() -> usize {
    1000
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: "synthetic".into(),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            test_samples: default_test_samples(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamperConfig {
    pub strategy: String,
    pub targets: Vec<u16>,
    #[serde(default)]
    pub round: u32,
    #[serde(default)]
    pub index: usize,
    #[serde(default)]
    pub delta: u64,
}

/// Everything one experiment needs; flags mirror these fields.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    #[serde(default = "default_kappa")]
    pub kappa: u32,
    #[serde(default = "default_precision")]
    pub precision: u32,
    #[serde(default = "default_network")]
    pub network: String,
    /// Hook layer indices; defaults to the network's own (after each pool).
    #[serde(default)]
    pub hooks: Option<Vec<usize>>,
    /// Full degree matrix; mutually exclusive with `theta_t`.
    #[serde(default)]
    pub theta: Option<Vec<Vec<f64>>>,
    /// Uniform off-diagonal transfer degree (row-stochastic diagonal).
    #[serde(default = "default_theta_t")]
    pub theta_t: f64,
    pub samples_per_domain: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_dropout_keep")]
    pub dropout_keep: f64,
    #[serde(default = "default_mode")]
    pub mode: String, // "in-process" | "tcp"
    #[serde(default)]
    pub roster: Vec<String>,
    #[serde(default)]
    pub secret_theta: bool,
    /// Local epochs before the transfer units engage.
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    /// Route hook gradients through the unit as well.
    #[serde(default = "default_mix_gradients")]
    pub mix_gradients: bool,
    /// Report wall times as zero so equal-seed runs are byte-identical.
    #[serde(default)]
    pub fixed_clock: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub tamper: Option<TamperConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if self.kappa != KAPPA {
            return Err(Error::Config(format!(
                "kappa = {} but this build uses κ = {KAPPA} (rebuild with the ring128 feature for 128)",
                self.kappa
            )));
        }
        FixedPointCodec::new(self.precision)?;
        self.network()?;
        if self.n >= 2 {
            self.degree_matrix()?;
        }
        self.train_config().validate()?;
        match self.mode.as_str() {
            "in-process" => {}
            "tcp" => {
                if self.roster.len() != self.n {
                    return Err(Error::Config(format!(
                        "tcp mode needs a roster of {} host:port entries, got {}",
                        self.n,
                        self.roster.len()
                    )));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "mode must be 'in-process' or 'tcp', got '{other}'"
                )));
            }
        }
        match self.dataset.kind.as_str() {
            "synthetic" => {}
            "idx" => {
                for (name, path) in [
                    ("dataset.train_images", &self.dataset.train_images),
                    ("dataset.train_labels", &self.dataset.train_labels),
                    ("dataset.test_images", &self.dataset.test_images),
                    ("dataset.test_labels", &self.dataset.test_labels),
                ] {
                    if path.is_none() {
                        return Err(Error::Config(format!("{name} required for idx datasets")));
                    }
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "dataset.kind must be 'synthetic' or 'idx', got '{other}'"
                )));
            }
        }
        if let Some(t) = &self.tamper {
            self.tamper_plan_from(t)?;
        }
        Ok(())
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        let mut net = NetworkSpec::by_name(&self.network)?;
        if let Some(hooks) = &self.hooks {
            net.hooks = hooks.clone();
        }
        net.infer_shapes()?;
        Ok(net)
    }

    pub fn degree_matrix(&self) -> Result<DegreeMatrix> {
        match &self.theta {
            Some(rows) => {
                let m = DegreeMatrix::from_rows(rows)?;
                if m.n() != self.n {
                    return Err(Error::Config(format!(
                        "theta is {}x{} but n = {}",
                        m.n(),
                        m.n(),
                        self.n
                    )));
                }
                Ok(m)
            }
            None => DegreeMatrix::uniform_transfer(self.n, self.theta_t),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            dropout_keep: self.dropout_keep,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn theta_mode(&self) -> ThetaMode {
        if self.secret_theta {
            ThetaMode::Secret
        } else {
            ThetaMode::Public
        }
    }

    pub fn collab_options(&self) -> Result<CollabOptions> {
        Ok(CollabOptions {
            net: self.network()?,
            theta: if self.n >= 2 {
                self.degree_matrix()?
            } else {
                DegreeMatrix::identity(1)
            },
            train_cfg: self.train_config(),
            theta_mode: self.theta_mode(),
            precision: self.precision,
            warmup_epochs: self.warmup_epochs,
            mix_gradients: self.mix_gradients,
            fixed_clock: self.fixed_clock,
            timeout: Duration::from_secs(self.timeout_secs),
        })
    }

    /// Load or synthesize the corpus and split disjoint per-domain subsets;
    /// every domain evaluates on the same held-out test split.
    pub fn domain_data(&self) -> Result<Vec<DomainData>> {
        let (train_all, test) = match self.dataset.kind.as_str() {
            "idx" => {
                let train = Dataset::from_idx(
                    self.dataset.train_images.as_ref().unwrap(),
                    self.dataset.train_labels.as_ref().unwrap(),
                )?;
                let test = Dataset::from_idx(
                    self.dataset.test_images.as_ref().unwrap(),
                    self.dataset.test_labels.as_ref().unwrap(),
                )?;
                (train, test)
            }
            _ => {
                let train = synthetic_digits(self.n * self.samples_per_domain, self.seed ^ 0xda7a);
                let test = synthetic_digits(self.dataset.test_samples, self.seed ^ 0x7e57da7a);
                (train, test)
            }
        };
        let trains = train_all.split_domains(self.n, self.samples_per_domain)?;
        Ok(trains
            .into_iter()
            .map(|train| DomainData {
                train,
                test: test.clone(),
            })
            .collect())
    }

    fn tamper_plan_from(&self, t: &TamperConfig) -> Result<TamperPlan> {
        let plan = TamperPlan {
            targets: t.targets.iter().map(|&i| PartyId::new(i)).collect(),
            strategy: TamperStrategy::parse(&t.strategy)?,
            trigger: Trigger {
                round: t.round,
                index: t.index,
            },
            delta: RingElement::new(t.delta as RingInt),
        };
        plan.validate(self.n)?;
        Ok(plan)
    }

    pub fn tamper_plan(&self) -> Result<Option<TamperPlan>> {
        self.tamper.as_ref().map(|t| self.tamper_plan_from(t)).transpose()
    }

    /// Beaver triples to provision: `h·w·c·n` per transfer unit per batch
    /// per epoch summed over hooked layers, with a 10% safety margin. The
    /// secret-θ path multiplies per location by n (a full vector product per
    /// destination) and by the batch elements streamed through each unit.
    pub fn triple_demand(&self) -> Result<usize> {
        let net = self.network()?;
        let hook_elems: usize = net
            .hook_shapes()?
            .iter()
            .map(|s| s[0] * s[1] * s[2])
            .sum();
        let batches = self.samples_per_domain.div_ceil(self.batch_size);
        let base = if self.secret_theta {
            // n^2 multiplications per location, batch folded into locations,
            // once forward and once backward.
            2 * hook_elems * self.samples_per_domain * self.n * self.n * self.epochs
        } else {
            hook_elems * self.n * batches * self.epochs
        };
        Ok(base * 11 / 10)
    }

    /// Input masks to provision per owner: every hooked element of every
    /// sample each epoch, forward and backward (gradients ride the unit
    /// too), plus the θ row re-shared per unit invocation in secret mode.
    pub fn mask_demand_per_owner(&self) -> Result<usize> {
        let net = self.network()?;
        let batches = self.samples_per_domain.div_ceil(self.batch_size);
        let mut base = 0;
        for s in net.hook_shapes()? {
            base += 2 * s[0] * s[1] * s[2] * self.samples_per_domain * self.epochs;
        }
        if self.secret_theta {
            base += 2 * self.n * net.hooks.len() * batches * self.epochs;
        }
        Ok(base * 11 / 10)
    }

    pub fn roster_addrs(&self) -> Result<Vec<std::net::SocketAddr>> {
        self.roster
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::Config(format!("bad roster entry '{s}': {e}")))
            })
            .collect()
    }
}
