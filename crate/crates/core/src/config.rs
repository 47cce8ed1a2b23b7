//! Experiment configuration.
//!
//! Values resolve in three layers: built-in defaults, then a JSON config
//! file (one object per section), then command-line overrides applied by
//! the caller.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{DatasetDescriptor, Normalization};
use crate::distill::Temperature;
use crate::error::{QkdError, Result};
use crate::quant::SteMode;

/// Training recipe compared in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunMode {
    /// Cross-entropy only.
    Bl,
    /// Self-study, then cross-entropy only.
    SsBl,
    /// Frozen full-precision teacher for the whole run.
    Ap,
    /// Self-study, then frozen-teacher distillation.
    SsAp,
    /// Co-study then tutoring, no self-study.
    CsTu,
    /// Self-study, co-study, tutoring.
    Qkd,
    /// Featuremap regression onto a frozen teacher.
    Ad,
    /// Self-study, then featuremap regression.
    SsAd,
}

impl RunMode {
    pub const ALL: [RunMode; 8] = [
        RunMode::Bl,
        RunMode::SsBl,
        RunMode::Ap,
        RunMode::SsAp,
        RunMode::CsTu,
        RunMode::Qkd,
        RunMode::Ad,
        RunMode::SsAd,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RunMode::Bl => "BL",
            RunMode::SsBl => "SS+BL",
            RunMode::Ap => "AP*",
            RunMode::SsAp => "SS+AP*",
            RunMode::CsTu => "CS+TU",
            RunMode::Qkd => "QKD",
            RunMode::Ad => "AD",
            RunMode::SsAd => "SS+AD",
        }
    }

    /// Label safe for file names.
    pub fn slug(self) -> &'static str {
        match self {
            RunMode::Bl => "bl",
            RunMode::SsBl => "ss-bl",
            RunMode::Ap => "ap",
            RunMode::SsAp => "ss-ap",
            RunMode::CsTu => "cs-tu",
            RunMode::Qkd => "qkd",
            RunMode::Ad => "ad",
            RunMode::SsAd => "ss-ad",
        }
    }

    pub fn uses_self_study(self) -> bool {
        matches!(self, RunMode::SsBl | RunMode::SsAp | RunMode::Qkd | RunMode::SsAd)
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for RunMode {
    type Err = QkdError;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| !matches!(c, '*' | ' '))
            .map(|c| if c == '_' || c == '-' { '+' } else { c })
            .collect();
        Ok(match norm.as_str() {
            "bl" => RunMode::Bl,
            "ss+bl" => RunMode::SsBl,
            "ap" => RunMode::Ap,
            "ss+ap" => RunMode::SsAp,
            "cs+tu" => RunMode::CsTu,
            "qkd" | "ss+cs+tu" => RunMode::Qkd,
            "ad" => RunMode::Ad,
            "ss+ad" => RunMode::SsAd,
            _ => return Err(QkdError::Config(format!("unknown mode '{}'", s))),
        })
    }
}

impl Serialize for RunMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for RunMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Bit-widths above this run the student unquantized.
pub const MAX_QUANT_BITS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    /// Target bit-width for weights and activations. Values above 16
    /// (conventionally 32) disable quantization.
    pub bits: u32,
    pub seed: u64,
    pub teacher: String,
    pub student: String,
    pub output_dir: Option<PathBuf>,
    /// Fill the `wallclock_s` CSV column with measured times. Off by
    /// default so that repeated runs produce identical files.
    pub record_wallclock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: RunMode::Qkd,
            bits: 2,
            seed: 1,
            teacher: "mlp-t".into(),
            student: "mlp-s".into(),
            output_dir: None,
            record_wallclock: false,
        }
    }
}

/// Epoch budgets of the three phases and the minibatch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhasePlan {
    pub epochs_ss: usize,
    pub epochs_cs: usize,
    pub epochs_tu: usize,
    pub batch_size: usize,
    /// LR multiplier applied at each step milestone.
    pub lr_gamma: f64,
}

impl Default for PhasePlan {
    fn default() -> Self {
        // 30/100/70 of a 200-epoch recipe, scaled to 40 epochs.
        PhasePlan {
            epochs_ss: 6,
            epochs_cs: 20,
            epochs_tu: 14,
            batch_size: 64,
            lr_gamma: 0.1,
        }
    }
}

impl PhasePlan {
    pub fn total(&self) -> usize {
        self.epochs_ss + self.epochs_cs + self.epochs_tu
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(QkdError::Config("phase plan has no epochs".into()));
        }
        if self.batch_size == 0 {
            return Err(QkdError::Config("batch size must be positive".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(QkdError::Config(format!("lr_gamma {} outside (0, 1]", self.lr_gamma)));
        }
        Ok(())
    }
}

/// SGD for weights, Adam for intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight-interval LR as a fraction of the weight LR.
    pub interval_w_ratio: f64,
    /// Activation-interval LR as a fraction of the weight LR.
    pub interval_x_ratio: f64,
    /// Absolute overrides of the ratio rule.
    pub interval_w_lr: Option<f64>,
    pub interval_x_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            interval_w_ratio: 0.01,
            interval_x_ratio: 1.0,
            interval_w_lr: None,
            interval_x_lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    /// Interval LRs for a given (scheduled) weight LR. Overrides scale with
    /// the schedule the same way the weight LR does.
    pub fn interval_lrs(&self, weight_lr: f64) -> (f64, f64) {
        let scale = weight_lr / self.lr;
        (
            self.interval_w_lr.map_or(weight_lr * self.interval_w_ratio, |v| v * scale),
            self.interval_x_lr.map_or(weight_lr * self.interval_x_ratio, |v| v * scale),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: Temperature,
    /// Multiplier on the student's `T^2 * KL` term.
    pub student_kl_weight: f64,
    /// Multiplier on the teacher's `T^2 * KL` term during co-study.
    pub teacher_kl_weight: f64,
    /// During co-study, re-run the teacher after its update before the
    /// student step (otherwise reuse the pre-update logits).
    pub fresh_teacher_logits: bool,
    /// Clear optimizer moments when the self-study phase ends.
    pub reset_moments: bool,
    pub ste: SteMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: Temperature::default(),
            student_kl_weight: 1.0,
            teacher_kl_weight: 1.0,
            fresh_teacher_logits: true,
            reset_moments: true,
            ste: SteMode::Clipped,
        }
    }
}

/// Full-precision training of the teacher and student starting points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 40, lr: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub plan: PhasePlan,
    pub optimizer: OptimizerConfig,
    pub distill: DistillConfig,
    pub pretrain: PretrainConfig,
    pub data: DatasetDescriptor,
    /// Input normalization. Filled from the training split when absent.
    pub normalization: Option<Normalization>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // Tagged enums are replaced wholesale when the tag changes.
                    Some(slot) if slot.is_object() && v.is_object() && slot.get("kind") == v.get("kind") => {
                        merge(slot, v)
                    }
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    /// Defaults overlaid with a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text)?;
        let mut base = serde_json::to_value(ExperimentConfig::default())?;
        merge(&mut base, over);
        let cfg: ExperimentConfig = serde_json::from_value(base)?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| QkdError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0) {
            return Err(QkdError::Config(format!("lr must be positive, got {}", o.lr)));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(QkdError::Config("pretrain lr must be positive".into()));
        }
        if self.run.bits < 2 {
            return Err(QkdError::Config(format!("bit-width {} below 2", self.run.bits)));
        }
        Ok(())
    }

    /// Output directory: the configured one, else `$QKD_OUTPUT_DIR`, else `runs`.
    pub fn output_dir(&self) -> PathBuf {
        self.run
            .output_dir
            .clone()
            .or_else(|| std::env::var_os("QKD_OUTPUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        for m in RunMode::ALL {
            assert_eq!(m.label().parse::<RunMode>().unwrap(), m);
            assert_eq!(m.slug().parse::<RunMode>().unwrap(), m);
        }
        assert_eq!("ss+ap*".parse::<RunMode>().unwrap(), RunMode::SsAp);
        assert!("fancy".parse::<RunMode>().is_err());
    }

    #[test]
    fn defaults_match_recipe() {
        let c = ExperimentConfig::default();
        assert_eq!((c.plan.epochs_ss, c.plan.epochs_cs, c.plan.epochs_tu), (6, 20, 14));
        assert_eq!(c.plan.total(), 40);
        assert_eq!(c.distill.temperature.get(), 2.0);
        let (lw, lx) = c.optimizer.interval_lrs(0.01);
        assert!((lw - 1e-4).abs() < 1e-18);
        assert_eq!(lx, 0.01);
    }

    #[test]
    fn file_overrides_defaults() {
        let c = ExperimentConfig::from_json(r#"{"run": {"bits": 4}, "plan": {"epochs_cs": 3}}"#).unwrap();
        assert_eq!(c.run.bits, 4);
        assert_eq!(c.run.mode, RunMode::Qkd);
        assert_eq!(c.plan.epochs_cs, 3);
        assert_eq!(c.plan.epochs_ss, 6);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"run": {"bitz": 4}}"#).is_err());
    }

    #[test]
    fn data_section_merges() {
        let c = ExperimentConfig::from_json(r#"{"data": {"kind": "synthetic-gaussian-clusters", "spread": 0.5}}"#).unwrap();
        match c.data {
            DatasetDescriptor::SyntheticGaussianClusters(p) => {
                assert_eq!(p.spread, 0.5);
                assert_eq!(p.num_classes, 10);
            }
            other => panic!("{:?}", other),
        }
        let c = ExperimentConfig::from_json(
            r#"{"data": {"kind": "cifar-binary", "train_files": ["a.bin"], "test_files": ["b.bin"]}}"#,
        )
        .unwrap();
        assert!(matches!(c.data, DatasetDescriptor::CifarBinary { num_classes: 10, .. }));
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = ExperimentConfig::default();
        c.run.mode = RunMode::SsAp;
        c.normalization = Some(Normalization { mean: 0.25, std: 1.5 });
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
