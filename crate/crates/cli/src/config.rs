//! Flat `key = value` configuration shared by every subcommand.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use clap::Args;
use kss_core::icp::IcpParams;
use kss_core::{EnergyParams, EnergyVariant, RegisterConfig, ScaleDef};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub theta_deg: f64,
    pub k: usize,
    pub energy: EnergyVariant,
    pub threshold: f64,
    pub kernel: usize,
    pub icp_max_iterations: usize,
    pub icp_eps: f64,
    /// 0 keeps every correspondence.
    pub icp_reject: f64,
    /// 0 uses one worker per available core.
    pub threads: usize,
    pub scale_def: ScaleDef,
    pub seed: u64,
    pub additional_process: bool,
}

impl Default for Config {
    fn default() -> Self {
        let register = RegisterConfig::default();
        Self {
            theta_deg: 30.0,
            k: register.k,
            energy: register.energy.variant,
            threshold: register.energy.threshold,
            kernel: register.energy.kernel,
            icp_max_iterations: register.icp.max_iterations,
            icp_eps: register.icp.convergence_eps,
            icp_reject: register.icp.reject_distance.unwrap_or(0.0),
            threads: 0,
            scale_def: register.scale_def,
            seed: 0,
            additional_process: register.additional_process,
        }
    }
}

/// Every config key, in file order.
pub const KEYS: [&str; 12] = [
    "theta_deg",
    "k",
    "energy",
    "threshold",
    "kernel",
    "icp_max_iterations",
    "icp_eps",
    "icp_reject",
    "threads",
    "scale_def",
    "seed",
    "additional_process",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConfigError: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError(format!("{key} = {value:?}: {e}")))
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "theta_deg" => self.theta_deg = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "energy" => self.energy = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "icp_max_iterations" => self.icp_max_iterations = parse(key, value)?,
            "icp_eps" => self.icp_eps = parse(key, value)?,
            "icp_reject" => self.icp_reject = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "scale_def" => self.scale_def = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "additional_process" => self.additional_process = parse(key, value)?,
            _ => return Err(ConfigError(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {}", n + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn value(&self, key: &str) -> String {
        match key {
            "theta_deg" => self.theta_deg.to_string(),
            "k" => self.k.to_string(),
            "energy" => self.energy.as_str().to_string(),
            "threshold" => self.threshold.to_string(),
            "kernel" => self.kernel.to_string(),
            "icp_max_iterations" => self.icp_max_iterations.to_string(),
            "icp_eps" => self.icp_eps.to_string(),
            "icp_reject" => self.icp_reject.to_string(),
            "threads" => self.threads.to_string(),
            "scale_def" => self.scale_def.as_str().to_string(),
            "seed" => self.seed.to_string(),
            "additional_process" => self.additional_process.to_string(),
            _ => unreachable!("not a config key: {key}"),
        }
    }

    /// Canonical text: every key in [`KEYS`] order, one `key = value` per
    /// line. Parsing it back yields the same config.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value(k))).collect()
    }

    /// SHA-256 of [`Config::to_text`], hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn register_config(&self) -> RegisterConfig {
        RegisterConfig {
            k: self.k,
            theta: self.theta_deg.to_radians(),
            energy: EnergyParams {
                variant: self.energy,
                threshold: self.threshold,
                kernel: self.kernel,
            },
            icp: IcpParams {
                max_iterations: self.icp_max_iterations,
                convergence_eps: self.icp_eps,
                reject_distance: (self.icp_reject > 0.0).then_some(self.icp_reject),
            },
            scale_def: self.scale_def,
            threads: (self.threads > 0).then_some(self.threads),
            additional_process: self.additional_process,
        }
    }
}

/// Config overrides accepted on the command line.
#[derive(Debug, Clone, Default, Args)]
#[command(next_help_heading = "Config")]
pub struct ConfigArgs {
    /// Read `key = value` settings from this file before applying flags
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
    /// Rotation grid step in degrees [default: 30]
    #[arg(long, global = true)]
    pub theta_deg: Option<f64>,
    /// Points kept after simplification [default: 2000]
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Alignment energy: mean, max or symmetric [default: mean]
    #[arg(long, global = true)]
    pub energy: Option<EnergyVariant>,
    /// Energy above which local minima are re-refined [default: 0.001]
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Side of the local-minimum neighbourhood on the rotation grid [default: 5]
    #[arg(long, global = true)]
    pub kernel: Option<usize>,
    /// ICP iteration cap [default: 200]
    #[arg(long, global = true)]
    pub icp_max_iterations: Option<usize>,
    /// ICP relative convergence tolerance [default: 1e-7]
    #[arg(long, global = true)]
    pub icp_eps: Option<f64>,
    /// ICP correspondence rejection distance, 0 for none [default: 0]
    #[arg(long, global = true)]
    pub icp_reject: Option<f64>,
    /// Worker threads, 0 for one per core [default: 0]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Pre-shape size: frobenius or as-printed [default: frobenius]
    #[arg(long, global = true)]
    pub scale_def: Option<ScaleDef>,
    /// Random seed for perturbations [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Enable the local-minima restart: true or false [default: true]
    #[arg(long, global = true)]
    pub additional_process: Option<bool>,
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<Config, ConfigError> {
        let mut config = Config::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        macro_rules! flag {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    config.$field = v.clone();
                })*
            };
        }
        flag!(
            theta_deg,
            k,
            energy,
            threshold,
            kernel,
            icp_max_iterations,
            icp_eps,
            icp_reject,
            threads,
            scale_def,
            seed,
            additional_process
        );
        config
            .register_config()
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        Ok(config)
    }
}
