//! Run configuration: one TOML file per run, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cps_core::analysis::SweepConfig;
use cps_core::constraints::Constraint;
use cps_core::sampler::SamplerConfig;
use cps_core::{ProjectionConfig, ScheduleConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Split sizes for the default waveform dataset.
pub const DEFAULT_SPLITS: [usize; 3] = [13320, 1665, 1665];

pub const RESOLVED_NAME: &str = "config.resolved.toml";

/// Every key accepted in the config file, for `--help`.
pub const CONFIG_KEYS: &str = "\
CONFIG FILE KEYS (TOML; flags override the file, the file overrides defaults)
  seed                          global seed; when set it replaces every section seed
  output_dir                    directory for all outputs (default \"out\")
  threads                       worker threads (default: all cores)

  [data]        count           total samples; omitted = 13320/1665/1665 split, else 80/10/10
                horizon         steps per sample (96)
                amp_min amp_max amplitude range within (0, 1] (0.1, 1.0)
                seed            dataset seed (0)

  [schedule]    steps beta_min beta_max eta gamma_clip   (200, 1e-4, 0.02, 0, 1e5)

  [denoiser]    data            training CSV (<output_dir>/train.csv)
                checkpoint      model file written by train, read by sample (<output_dir>/model.json)
                resume          continue training from the checkpoint (false)
  [denoiser.training]
                iterations batch_size learning_rate seed log_every smoothing
                hidden_width hidden_layers embedding_dim beta1 beta2 adam_epsilon

  [constraints] references      reference CSV in data units (<output_dir>/test.csv)
                features        features extracted from each reference, e.g. [\"mean\", \"value@1\", \"value@last\"]
                                (mean, mean_consecutive_change, value@N, value@last, argmax, argmin,
                                 value_at_argmax, value_at_argmin, peaks, valleys, trend)
                threshold       extraction threshold (0.005)
                budget          evaluation budget (0.01)
  [[constraints.explicit]]      kind, channel (0-based), params (steps 1-based), threshold;
                                values in normalized model units; applied to every sample

  [sampler]     method          ddim | cps | guided | cop (cps)
                count           number of samples (100)
                seed eta guidance_weight enforce_fixed_values warm_start trace
                cop_seed        dataset | generated (dataset)
                cop_gamma       fixed penalty for cop (schedule gamma_clip)
  [sampler.projection]
                max_iterations grad_tolerance step_rule (backtracking | fixed_lipschitz)
                lipschitz_estimate record_trace

  [metrics]     generated       samples CSV (<output_dir>/samples.csv)
                references      paired references CSV (<output_dir>/references.csv)
                real            real samples for the feature distance (defaults to references)

  [analysis]    instances steps ks max_n max_m seed norm_checks  (100, 2000, [2, 10, 100], 8, 16, 0, true)
";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub constraints: ConstraintConfig,
    pub sampler: SampleConfig,
    pub metrics: MetricsConfig,
    pub analysis: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("out"),
            threads: None,
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            constraints: ConstraintConfig::default(),
            sampler: SampleConfig::default(),
            metrics: MetricsConfig::default(),
            analysis: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    pub horizon: usize,
    pub amp_min: f64,
    pub amp_max: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: None,
            horizon: 96,
            amp_min: 0.1,
            amp_max: 1.0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn splits(&self) -> anyhow::Result<[usize; 3]> {
        match self.count {
            None => Ok(DEFAULT_SPLITS),
            Some(n) if n < 3 => bail!("data.count must be at least 3 to fill three splits, got {n}"),
            Some(n) => {
                let val = (n / 10).max(1);
                Ok([n - 2 * val, val, val])
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
    pub training: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub references: Option<PathBuf>,
    pub features: Vec<String>,
    pub threshold: f64,
    pub budget: f64,
    pub explicit: Vec<Constraint>,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            references: None,
            features: Vec::new(),
            threshold: cps_core::constraints::DEFAULT_THRESHOLD,
            budget: cps_core::constraints::DEFAULT_BUDGET,
            explicit: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ddim,
    Cps,
    Guided,
    Cop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopSource {
    Dataset,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub method: Method,
    pub count: usize,
    pub seed: u64,
    pub eta: f64,
    pub guidance_weight: f64,
    pub enforce_fixed_values: bool,
    pub warm_start: bool,
    pub trace: bool,
    pub cop_seed: CopSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cop_gamma: Option<f64>,
    pub projection: ProjectionConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            method: Method::Cps,
            count: 100,
            seed: s.seed,
            eta: s.eta,
            guidance_weight: s.guidance_weight,
            enforce_fixed_values: s.enforce_fixed_values,
            warm_start: s.warm_start,
            trace: s.trace,
            cop_seed: CopSource::Dataset,
            cop_gamma: None,
            projection: s.projection,
        }
    }
}

impl SampleConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            eta: self.eta,
            projection: self.projection.clone(),
            guidance_weight: self.guidance_weight,
            enforce_fixed_values: self.enforce_fixed_values,
            warm_start: self.warm_start,
            trace: self.trace,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub references: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub real: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Push the global seed into every section that has one.
    pub fn apply_global_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.data.seed = seed;
            self.denoiser.training.seed = seed;
            self.sampler.seed = seed;
            self.analysis.seed = seed;
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    pub fn train_data(&self) -> PathBuf {
        self.denoiser.data.clone().unwrap_or_else(|| self.out("train.csv"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.denoiser.checkpoint.clone().unwrap_or_else(|| self.out("model.json"))
    }

    pub fn references(&self) -> PathBuf {
        self.constraints.references.clone().unwrap_or_else(|| self.out("test.csv"))
    }

    pub fn generated(&self) -> PathBuf {
        self.metrics.generated.clone().unwrap_or_else(|| self.out("samples.csv"))
    }

    pub fn paired_references(&self) -> PathBuf {
        self.metrics.references.clone().unwrap_or_else(|| self.out("references.csv"))
    }

    pub fn write_resolved(&self) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating output directory {}", self.output_dir.display()))?;
        let path = self.out(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn populated_config_round_trips() {
        let text = r#"
            seed = 7
            output_dir = "runs/a"
            [data]
            count = 100
            [denoiser.training]
            iterations = 10
            learning_rate = 1e-3
            [constraints]
            features = ["mean", "value@1"]
            [[constraints.explicit]]
            kind = "value_at_timestamp"
            params = { timestamp = 3, value = 0.5 }
            [sampler]
            method = "guided"
            guidance_weight = 0.01
            [sampler.projection]
            step_rule = "fixed_lipschitz"
            [analysis]
            ks = [3.0, 30.0]
        "#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.sampler.method, Method::Guided);
        assert_eq!(cfg.constraints.explicit.len(), 1);
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[sampler]\nmethod = \"cps\"\nweight = 1").is_err());
        assert!(RunConfig::parse("[sampler.projection]\nmax_iter = 3").is_err());
        assert!(RunConfig::parse("[sampler]\nmethod = \"langevin\"").is_err());
    }

    #[test]
    fn splits_follow_count() {
        assert_eq!(DataConfig::default().splits().unwrap(), [13320, 1665, 1665]);
        let d = DataConfig {
            count: Some(100),
            ..Default::default()
        };
        assert_eq!(d.splits().unwrap(), [80, 10, 10]);
        let d = DataConfig {
            count: Some(2),
            ..Default::default()
        };
        assert!(d.splits().is_err());
    }

    #[test]
    fn global_seed_reaches_every_section() {
        let mut cfg = RunConfig::parse("seed = 11").unwrap();
        cfg.apply_global_seed();
        assert_eq!(cfg.data.seed, 11);
        assert_eq!(cfg.denoiser.training.seed, 11);
        assert_eq!(cfg.sampler.seed, 11);
        assert_eq!(cfg.analysis.seed, 11);
    }
}
