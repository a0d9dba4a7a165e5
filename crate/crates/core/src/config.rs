//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{AsyncSource, CalibrationSettings, EstimatorMode, EstimatorSettings};
use crate::fitter::FitHyper;
use crate::model::ModelConfig;
use crate::runtime::RuntimeOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub model: PathBuf,
    pub calib_corpus: PathBuf,
    pub eval_corpus: PathBuf,
    pub store: PathBuf,
    pub profile: PathBuf,
    pub plan_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            model: "artifacts/model.json".into(),
            calib_corpus: "data/calib.txt".into(),
            eval_corpus: "data/eval.txt".into(),
            store: "artifacts/store.nqs".into(),
            profile: "artifacts/profile.dprof".into(),
            plan_dir: "artifacts/plans".into(),
            report_dir: "artifacts/reports".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub n_bits: u8,
    pub b_min: u8,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { n_bits: 6, b_min: 3 }
    }
}

/// How a corpus is cut into samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub sample_len: usize,
    pub max_samples: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            sample_len: 64,
            max_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub retry_alpha: Option<f64>,
    pub batch_size: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let h = FitHyper::default();
        Self {
            epochs: h.epochs,
            lr: h.lr,
            alpha: h.alpha,
            retry_alpha: h.retry_alpha,
            batch_size: h.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub mode: EstimatorMode,
    pub k: usize,
    pub r2_gate: f64,
    pub asynchronous: bool,
    pub async_source: AsyncSource,
    pub prime_async: bool,
    pub calib_inputs: usize,
    pub calib_epochs: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let s = EstimatorSettings::default();
        Self {
            mode: s.mode,
            k: s.k,
            r2_gate: s.r2_gate,
            asynchronous: s.asynchronous,
            async_source: s.async_source,
            prime_async: true,
            calib_inputs: s.calib_inputs,
            calib_epochs: s.calibration.epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub fit: u64,
    pub estimator: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub quant: QuantConfig,
    pub budget_bits: f64,
    pub targets: Vec<f64>,
    pub calibration: SampleConfig,
    pub eval: SampleConfig,
    pub fit: FitConfig,
    pub estimator: EstimatorConfig,
    pub seeds: Seeds,
    /// Directory relative paths resolve against; set by [`RunConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            model: ModelConfig::toy(),
            quant: QuantConfig::default(),
            budget_bits: 5.0,
            targets: vec![3.5, 4.0, 4.5],
            calibration: SampleConfig::default(),
            eval: SampleConfig::default(),
            fit: FitConfig::default(),
            estimator: EstimatorConfig::default(),
            seeds: Seeds::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let q = self.quant;
        if q.b_min == 0 || q.b_min > q.n_bits || q.n_bits > 8 {
            return Err(Error::Config(format!(
                "quantization needs 1 <= b_min <= n_bits <= 8, got b_min={} n_bits={}",
                q.b_min, q.n_bits
            )));
        }
        if !(self.budget_bits >= q.b_min as f64 && self.budget_bits <= q.n_bits as f64) {
            return Err(Error::Config(format!(
                "budget_bits {} outside [{}, {}]",
                self.budget_bits, q.b_min, q.n_bits
            )));
        }
        if self.targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("targets must be finite".into()));
        }
        for (name, s) in [("calibration", self.calibration), ("eval", self.eval)] {
            if s.sample_len < 2 || s.sample_len > self.model.seq_cap + 1 {
                return Err(Error::Config(format!(
                    "{name}.sample_len must lie in [2, seq_cap + 1]"
                )));
            }
        }
        if self.fit.batch_size == 0 || !(self.fit.lr > 0.0) || !(self.fit.alpha >= 0.0) {
            return Err(Error::Config("fit needs batch_size >= 1, lr > 0 and alpha >= 0".into()));
        }
        if self.estimator.k == 0 || self.estimator.calib_inputs == 0 {
            return Err(Error::Config("estimator k and calib_inputs must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Resolved path of an input that must already exist.
    pub fn input(&self, p: &Path) -> Result<PathBuf> {
        let r = self.resolve(p);
        if r.exists() {
            Ok(r)
        } else {
            Err(Error::Config(format!("input {} does not exist", r.display())))
        }
    }

    pub fn fit_hyper(&self) -> FitHyper {
        FitHyper {
            epochs: self.fit.epochs,
            lr: self.fit.lr,
            alpha: self.fit.alpha,
            retry_alpha: self.fit.retry_alpha,
            batch_size: self.fit.batch_size,
            seed: self.seeds.fit,
            ..FitHyper::default()
        }
    }

    pub fn estimator_settings(&self) -> EstimatorSettings {
        let e = &self.estimator;
        EstimatorSettings {
            mode: e.mode,
            k: e.k,
            r2_gate: e.r2_gate,
            asynchronous: e.asynchronous,
            async_source: e.async_source,
            calibration: CalibrationSettings {
                epochs: e.calib_epochs,
                ..CalibrationSettings::default()
            },
            calib_inputs: e.calib_inputs,
            seed: self.seeds.estimator,
        }
    }

    pub fn runtime_options(&self) -> RuntimeOptions {
        RuntimeOptions {
            async_source: self.estimator.async_source,
            prime_async: self.estimator.prime_async,
            track_error: true,
            ..RuntimeOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.quant.n_bits, 6);
        assert_eq!(cfg.quant.b_min, 3);
        assert_eq!(cfg.fit.epochs, 5);
        assert_eq!(cfg.fit.lr, 0.01);
        assert_eq!(cfg.fit.alpha, 1.0);
        assert_eq!(cfg.estimator.k, 64);
        assert_eq!(cfg.estimator.r2_gate, 0.9);
        assert!(cfg.estimator.asynchronous);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.targets = vec![3.25];
        cfg.estimator.async_source = AsyncSource::PrecedingBlock;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[quant]\nn_bits = 4\nb_min = 5"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_toml("budget_bits = 9.0"), Err(Error::Config(_))));
    }
}
