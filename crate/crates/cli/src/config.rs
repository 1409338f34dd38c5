//! Per-command settings. Every field is optional so that flags, a JSON file
//! and built-in defaults can be layered; `resolve` fills the gaps and the
//! result is what gets persisted as `<command>_config.json`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use arlab::TargetMode;
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Usage;

/// Pixel-unit conversion for ε, step and SPSA scales.
pub const PIXEL_SCALE: f64 = 255.0;

macro_rules! layered {
    (
        $(#[$sm:meta])*
        pub struct $name:ident {
            $( $(#[$fm:meta])* pub $field:ident : Option<$ty:ty>, )*
        }
    ) => {
        $(#[$sm])*
        pub struct $name {
            $( $(#[$fm])* pub $field: Option<$ty>, )*
        }

        impl $name {
            /// Field-wise `self` where set, `lower` otherwise.
            pub fn over(self, lower: Self) -> Self {
                Self { $( $field: self.$field.or(lower.$field), )* }
            }
        }
    };
}

layered! {
    #[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct TrainConfig {
        /// JSON file with any of these settings; flags take precedence.
        #[arg(long)]
        #[serde(skip)]
        pub config: Option<PathBuf>,
        #[arg(skip)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub command: Option<String>,
        /// Directory holding the standard MNIST IDX file names.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub data_dir: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub train_images: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub train_labels: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub test_images: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub test_labels: Option<PathBuf>,
        /// Output directory for the checkpoint, metrics and resolved config.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub out: Option<PathBuf>,
        /// `lenet` or `mlp`.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub arch: Option<String>,
        /// `f32` or `f64`.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub precision: Option<String>,
        /// `plain`, `clp`, `lsq` or `alp`.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub objective: Option<String>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub lambda: Option<f64>,
        /// Std of the Gaussian input augmentation, in [0, 1] pixel units.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub noise_sigma: Option<f64>,
        /// Share of each minibatch replaced by PGD examples: 0, 0.5 or 1.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub adv_fraction: Option<f64>,
        /// Inner-attack radius, 0..255.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub attack_eps: Option<f64>,
        /// Inner-attack step, 0..255.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub attack_step: Option<f64>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub attack_iters: Option<usize>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub epochs: Option<usize>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub batch_size: Option<usize>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub lr: Option<f64>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub seed: Option<u64>,
        /// Leading training examples used.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub train_examples: Option<usize>,
        /// Leading evaluation examples scored after every epoch.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub eval_examples: Option<usize>,
        /// Score a default PGD attack on the evaluation examples every epoch.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub quick_pgd: Option<bool>,
        /// Probe batch size for the clean/adversarial logit distance (0 disables).
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub probe_examples: Option<usize>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub checkpoint_every: Option<usize>,
    }
}

/// One attack of a suite; unset fields inherit from the command level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spsa: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_mode: Option<TargetMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_init: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spsa_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spsa_delta: Option<f64>,
}

layered! {
    #[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct AttackCmdConfig {
        /// JSON file with any of these settings; flags take precedence.
        #[arg(long)]
        #[serde(skip)]
        pub config: Option<PathBuf>,
        #[arg(skip)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub command: Option<String>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub checkpoint: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub data_dir: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub test_images: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub test_labels: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub out: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub precision: Option<String>,
        /// Test points evaluated, drawn by `eval_seed`.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub examples: Option<usize>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub eval_seed: Option<u64>,
        /// Run SPSA instead of PGD.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub spsa: Option<bool>,
        /// Radius, 0..255.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub eps: Option<f64>,
        /// PGD step, 0..255.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub step: Option<f64>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub iters: Option<usize>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub restarts: Option<usize>,
        /// `untargeted`, `random_target` or `least_likely`.
        #[arg(long, value_parser = parse_target_mode)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub target_mode: Option<TargetMode>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub random_init: Option<bool>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub seed: Option<u64>,
        /// SPSA probe evaluations per step (even).
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub samples: Option<usize>,
        /// SPSA sign-step size, 0..255.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub spsa_lr: Option<f64>,
        /// SPSA probe radius, 0..255.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub spsa_delta: Option<f64>,
        /// Several attacks at once (config file only).
        #[arg(skip)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub suite: Option<Vec<SuiteEntry>>,
    }
}

layered! {
    #[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct SweepConfig {
        /// JSON file with any of these settings; flags take precedence.
        #[arg(long)]
        #[serde(skip)]
        pub config: Option<PathBuf>,
        #[arg(skip)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub command: Option<String>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub checkpoint: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub data_dir: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub test_images: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub test_labels: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub out: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub precision: Option<String>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub examples: Option<usize>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub eval_seed: Option<u64>,
        /// Radius, 0..255.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub eps: Option<f64>,
        /// Step sizes in [0, 1] pixel units, comma separated.
        #[arg(long, value_delimiter = ',')]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub steps: Option<Vec<f64>>,
        /// Iteration counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub iters: Option<Vec<usize>>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub restarts: Option<usize>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub seed: Option<u64>,
    }
}

layered! {
    #[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct SurfaceConfig {
        /// JSON file with any of these settings; flags take precedence.
        #[arg(long)]
        #[serde(skip)]
        pub config: Option<PathBuf>,
        #[arg(skip)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub command: Option<String>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub checkpoint: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub data_dir: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub test_images: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub test_labels: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub out: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub precision: Option<String>,
        /// Index into the test set.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub example: Option<usize>,
        /// Half-width of the lattice, 0..255.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub eps: Option<f64>,
        /// Lattice resolution: (2k+1)² points.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub k: Option<usize>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub seed: Option<u64>,
    }
}

layered! {
    #[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct HistogramConfig {
        /// JSON file with any of these settings; flags take precedence.
        #[arg(long)]
        #[serde(skip)]
        pub config: Option<PathBuf>,
        #[arg(skip)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub command: Option<String>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub checkpoint: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub data_dir: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub test_images: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub test_labels: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub out: Option<PathBuf>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub precision: Option<String>,
        /// Index into the test set.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub example: Option<usize>,
        /// Radius, 0..255.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub eps: Option<f64>,
        /// Step, 0..255.
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub step: Option<f64>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub iters: Option<usize>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub restarts: Option<usize>,
        #[arg(long, value_parser = parse_target_mode)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub target_mode: Option<TargetMode>,
        #[arg(long)]
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub seed: Option<u64>,
    }
}

fn parse_target_mode(s: &str) -> Result<TargetMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown target mode `{s}` (expected untargeted, random_target or least_likely)")
    })
}

/// A config file's contents, or defaults when no file was given.
pub fn load_file<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config file {}", p.display()))
        }
    }
}

/// Checks the optional `command` tag a config file may carry.
pub fn check_command(found: &Option<String>, expected: &str) -> Result<()> {
    match found {
        Some(c) if c != expected => Err(Usage(format!(
            "config file is for `{c}`, not `{expected}`"
        ))
        .into()),
        _ => Ok(()),
    }
}

/// Pixel units to [0, 1], rejecting values outside 0..255.
pub fn normalize(value: f64, flag: &str) -> Result<f64> {
    if !(0.0..=PIXEL_SCALE).contains(&value) {
        return Err(Usage(format!("--{flag} {value} is outside 0..255")).into());
    }
    Ok(value / PIXEL_SCALE)
}

/// `value`, or a usage error naming the missing flag.
pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Usage(format!("missing required flag --{flag}")).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let flags = SweepConfig {
            eps: Some(10.0),
            ..Default::default()
        };
        let file = SweepConfig {
            eps: Some(20.0),
            restarts: Some(3),
            ..Default::default()
        };
        let defaults = SweepConfig {
            eps: Some(76.5),
            restarts: Some(1),
            seed: Some(0),
            ..Default::default()
        };
        let merged = flags.over(file).over(defaults);
        assert_eq!(merged.eps, Some(10.0));
        assert_eq!(merged.restarts, Some(3));
        assert_eq!(merged.seed, Some(0));
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(serde_json::from_str::<SweepConfig>(r#"{"epss": 1}"#).is_err());
        let ok: SweepConfig = serde_json::from_str(r#"{"eps": 1, "command": "sweep"}"#).unwrap();
        assert_eq!(ok.eps, Some(1.0));
    }

    #[test]
    fn pixel_units() {
        assert!((normalize(76.5, "eps").unwrap() - 0.3).abs() < 1e-12);
        assert!(normalize(300.0, "eps").is_err());
    }
}
