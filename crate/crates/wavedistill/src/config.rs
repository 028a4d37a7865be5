//! Run-level configuration: one TOML file merging the dataset, network,
//! degradation, and training sections, resolved against the environment
//! and command-line flags (precedence: file < environment < flags).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade::DegradationConfig;
use crate::error::{Error, Result};
use crate::net::NetworkSpec;
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "WAVEDISTILL_OUT";

/// Filename the resolved config is written under for provenance.
pub const CONFIG_FILE: &str = "config.toml";

/// Fully resolved view of one run. Every random stream derives from `seed`;
/// the network's input extent and class count follow the dataset section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Serial execution and zeroed wall-clock columns in reports.
    pub deterministic: bool,
    /// Worker threads for parallel sections; 0 picks the machine's count.
    pub threads: usize,
    pub synth: SynthSpec,
    pub network: NetworkSpec,
    pub degrade: DegradationConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("out"),
            deterministic: false,
            threads: 0,
            synth: SynthSpec::default(),
            network: NetworkSpec::default(),
            degrade: DegradationConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Command-line flag values; `None` leaves the underlying field alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
    pub threads: Option<usize>,
    pub epochs: Option<usize>,
    pub lr_sizes: Option<Vec<usize>>,
    pub lambda2: Option<f64>,
    pub temperature: Option<f64>,
}

impl RunConfig {
    /// Builds the configuration for a run: defaults, then the file (if
    /// given), then `WAVEDISTILL_OUT` (passed in by the caller), then flags;
    /// finally [`RunConfig::resolve`].
    pub fn load(file: Option<&Path>, env_out: Option<PathBuf>, ov: &Overrides) -> Result<RunConfig> {
        let mut cfg = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                RunConfig::parse(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(out) = env_out {
            cfg.out_dir = out;
        }
        if let Some(seed) = ov.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &ov.out {
            cfg.out_dir = out.clone();
        }
        if ov.deterministic {
            cfg.deterministic = true;
        }
        if let Some(threads) = ov.threads {
            cfg.threads = threads;
        }
        if let Some(epochs) = ov.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(sizes) = &ov.lr_sizes {
            cfg.degrade.lr_sizes = sizes.clone();
        }
        if let Some(l2) = ov.lambda2 {
            cfg.train.lambda2 = l2;
        }
        if let Some(t) = ov.temperature {
            cfg.train.temperature = t;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Propagates the root seed and dataset geometry into the sections that
    /// depend on them, then validates everything. Idempotent; called by
    /// [`RunConfig::load`], so a loaded config is always resolved.
    pub fn resolve(&mut self) -> Result<()> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.network.input_size = self.synth.image_size;
        self.network.num_classes = self.synth.num_identities;
        if self.deterministic {
            self.threads = 1;
        }
        self.synth.validate()?;
        self.network.validate()?;
        self.degrade.validate()?;
        self.train.validate()?;
        if let Some(&max) = self.degrade.lr_sizes.iter().max() {
            if max > self.synth.image_size {
                return Err(Error::config(format!(
                    "lr_sizes contain {max}, larger than image_size {}",
                    self.synth.image_size
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config serialize: {e}")))
    }

    /// Writes the resolved config into `dir` (created if needed) for
    /// provenance. Reloading the written file yields an equal `RunConfig`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    /// Worker-thread count with 0 resolved to the machine's parallelism.
    pub fn effective_threads(&self) -> usize {
        if self.threads == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.threads
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("cfg.toml");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn default_config_resolves_and_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.resolve().unwrap();
        let text = cfg.to_toml().unwrap();
        let mut back = RunConfig::parse(&text).unwrap();
        back.resolve().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn saved_config_reloads_equal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(None, None, &Overrides::default()).unwrap();
        let path = cfg.save(dir.path()).unwrap();
        let back = RunConfig::load(Some(&path), None, &Overrides::default()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "seed = 3\nout_dir = \"from-file\"\n");

        let file_only = RunConfig::load(Some(&path), None, &Overrides::default()).unwrap();
        assert_eq!(file_only.seed, 3);
        assert_eq!(file_only.out_dir, PathBuf::from("from-file"));

        let env = RunConfig::load(Some(&path), Some("from-env".into()), &Overrides::default())
            .unwrap();
        assert_eq!(env.out_dir, PathBuf::from("from-env"));

        let flags = RunConfig::load(
            Some(&path),
            Some("from-env".into()),
            &Overrides { seed: Some(11), out: Some("from-flags".into()), ..Default::default() },
        )
        .unwrap();
        assert_eq!(flags.seed, 11);
        assert_eq!(flags.out_dir, PathBuf::from("from-flags"));
    }

    #[test]
    fn resolution_propagates_seed_and_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "seed = 5\n[synth]\nimage_size = 16\nnum_identities = 6\n[degrade]\nlr_sizes = [8]\n",
        );
        let cfg = RunConfig::load(Some(&path), None, &Overrides::default()).unwrap();
        assert_eq!(cfg.synth.seed, 5);
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.network.input_size, 16);
        assert_eq!(cfg.network.num_classes, 6);
    }

    #[test]
    fn per_command_overrides_reach_their_sections() {
        let ov = Overrides {
            epochs: Some(3),
            lr_sizes: Some(vec![16]),
            lambda2: Some(0.25),
            temperature: Some(2.0),
            threads: Some(2),
            ..Default::default()
        };
        let cfg = RunConfig::load(None, None, &ov).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.degrade.lr_sizes, vec![16]);
        assert_eq!(cfg.train.lambda2, 0.25);
        assert_eq!(cfg.train.temperature, 2.0);
        assert_eq!(cfg.threads, 2);
    }

    #[test]
    fn deterministic_mode_forces_one_thread() {
        let ov = Overrides { deterministic: true, threads: Some(8), ..Default::default() };
        let cfg = RunConfig::load(None, None, &ov).unwrap();
        assert!(cfg.deterministic);
        assert_eq!(cfg.threads, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "sede = 3\n");
        let err = RunConfig::load(Some(&path), None, &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
    }

    #[test]
    fn oversized_lr_sizes_are_rejected() {
        let ov = Overrides { lr_sizes: Some(vec![8, 64]), ..Default::default() };
        let err = RunConfig::load(None, None, &ov).unwrap_err();
        assert!(err.to_string().contains("larger than image_size"), "{err}");
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "[train]\nepochs = 4\n");
        let cfg = RunConfig::load(Some(&path), None, &Overrides::default()).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.synth, SynthSpec { seed: cfg.seed, ..SynthSpec::default() });
    }
}
