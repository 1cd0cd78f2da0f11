//! Run configuration: a TOML file whose keys mirror the optimiser tables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::train::TrainConfig;
use crate::backbone::{AttentionConfig, AttentionMode, BackboneConfig, Fusion, InputSpec};
use crate::data::{DataKind, Layout, GRID, PARITY_LEN};
use crate::distill::{DistillConfig, LossWeights};
use crate::error::{Error, Result};
use crate::kernelnet::KernelConfig;
use crate::tensor::checkpoint::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ToyVision,
    ToyText,
    Tabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Out-of-distribution set for the `ood` stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_kind: Option<DataKind>,
    /// Ingest this CSV/JSONL file instead of generating data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub attention: AttentionMode,
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Inducing/eigen-feature count for KEP.
    pub s: usize,
    pub fusion: Fusion,
    pub mlp_hidden: usize,
    pub patch: usize,
    pub eval_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub cycle_epochs: usize,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub dit_depth: usize,
    pub dropout: f64,
    pub scale_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub cycle_epochs: usize,
    pub l2_samples: usize,
    /// Unset weights take the path-type default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_cholesky: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_nll: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub bins: usize,
    pub n_draws: usize,
    pub ood: bool,
    pub plots: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    /// Not part of the config hash.
    pub out: PathBuf,
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub backbone_train: TrainSection,
    pub kernel: KernelSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn default_for(task: Task) -> Self {
        let (kind, ood) = match task {
            Task::ToyVision => (DataKind::Blobs, Some(DataKind::BlobsShifted)),
            Task::ToyText => (DataKind::TokenParity, None),
            Task::Tabular => (DataKind::Moons, None),
        };
        RunConfig {
            task,
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataSection {
                kind,
                n_train: 320,
                n_val: 60,
                n_test: 240,
                ood_kind: ood,
                path: None,
            },
            backbone: BackboneSection {
                attention: AttentionMode::Kep,
                depth: 4,
                d_model: 32,
                n_heads: 4,
                // Tabular moons gives 3 tokens; KEP needs s at most that.
                s: if task == Task::Tabular { 2 } else { 4 },
                fusion: Fusion::Add,
                mlp_hidden: 64,
                patch: 2,
                eval_samples: 10,
            },
            backbone_train: TrainSection {
                epochs: 20,
                batch: 32,
                lr: 3e-3,
                min_lr: 1e-5,
                warmup_epochs: 2,
                cycle_epochs: 20,
                weight_decay: 1e-5,
            },
            kernel: KernelSection {
                dit_depth: 1,
                dropout: 0.1,
                scale_floor: crate::kernelnet::SCALE_FLOOR,
            },
            distill: DistillSection {
                epochs: 50,
                batch: 16,
                lr: 3e-3,
                beta1: 0.9,
                beta2: 0.999,
                weight_decay: 1e-5,
                min_lr: 1e-5,
                warmup_epochs: 5,
                cycle_epochs: 50,
                l2_samples: 1,
                lambda_mean: None,
                lambda_cholesky: None,
                lambda_nll: None,
            },
            eval: EvalSection {
                bins: crate::calibrate::DEFAULT_BINS,
                n_draws: crate::calibrate::DEFAULT_DRAWS,
                ood: task == Task::ToyVision,
                plots: true,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    /// SHA-256 of the canonical JSON form with `out` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serialises").as_bytes())
    }

    pub fn layout(&self) -> Layout {
        match self.task {
            Task::ToyVision | Task::ToyText => Layout::Raster,
            Task::Tabular => Layout::Tabular,
        }
    }

    pub fn input_spec(&self, n_features: usize) -> Result<InputSpec> {
        Ok(match self.task {
            Task::ToyVision => {
                let side = (n_features as f64).sqrt().round() as usize;
                if side * side != n_features {
                    return Err(Error::contract(format!("toy-vision needs square images, got {n_features} features")));
                }
                InputSpec::Grid {
                    side,
                    patch: self.backbone.patch,
                }
            }
            Task::ToyText => InputSpec::Tokens { vocab: 2, len: n_features },
            Task::Tabular => InputSpec::Tabular { features: n_features },
        })
    }

    pub fn backbone_config(&self, n_features: usize, n_classes: usize) -> Result<BackboneConfig> {
        let b = &self.backbone;
        Ok(BackboneConfig {
            attention: AttentionConfig {
                mode: b.attention,
                n_heads: b.n_heads,
                d_model: b.d_model,
                s: b.s,
                fusion: b.fusion,
            },
            depth: b.depth,
            mlp_hidden: b.mlp_hidden,
            n_classes,
            input: self.input_spec(n_features)?,
            eval_samples: b.eval_samples,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.backbone_train;
        TrainConfig {
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            min_lr: t.min_lr,
            warmup_epochs: t.warmup_epochs,
            cycle_epochs: t.cycle_epochs,
            weight_decay: t.weight_decay,
            seed: self.seed ^ 0xB4C,
        }
    }

    pub fn kernel_config(&self, n_tokens: usize) -> KernelConfig {
        let mut k = KernelConfig::for_backbone(self.backbone.depth, n_tokens, self.backbone.d_model);
        k.dropout = self.kernel.dropout;
        k.scale_floor = self.kernel.scale_floor;
        k
    }

    pub fn loss_weights(&self, stochastic: bool) -> LossWeights {
        let d = LossWeights::for_path(stochastic);
        LossWeights {
            lambda_mean: self.distill.lambda_mean.unwrap_or(d.lambda_mean),
            lambda_cholesky: self.distill.lambda_cholesky.unwrap_or(d.lambda_cholesky),
            lambda_nll: self.distill.lambda_nll.unwrap_or(d.lambda_nll),
        }
        .effective(stochastic)
    }

    pub fn distill_config(&self, stochastic: bool) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            epochs: d.epochs,
            batch: d.batch,
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            weight_decay: d.weight_decay,
            min_lr: d.min_lr,
            warmup_epochs: d.warmup_epochs,
            cycle_epochs: d.cycle_epochs,
            weights: self.loss_weights(stochastic),
            l2_samples: d.l2_samples,
            seed: self.seed ^ 0xD15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(format!("config: {m}")));
        let b = &self.backbone;
        if b.depth == 0 || b.n_heads == 0 || b.d_model % b.n_heads != 0 || b.d_model % 2 != 0 {
            return bad(format!("backbone needs depth ≥ 1 and an even d_model divisible by n_heads (d_model {}, n_heads {})", b.d_model, b.n_heads));
        }
        if b.s == 0 || b.mlp_hidden == 0 || b.eval_samples == 0 {
            return bad("backbone s, mlp_hidden and eval_samples must be positive".into());
        }
        if self.task == Task::ToyVision && (b.patch == 0 || GRID % b.patch != 0) {
            return bad(format!("patch {} must divide the {GRID}x{GRID} grid", b.patch));
        }
        if self.task == Task::ToyText && self.data.path.is_none() && self.data.kind != DataKind::TokenParity {
            return bad(format!("toy-text expects token-parity data (sequences of length {PARITY_LEN})"));
        }
        if self.task != Task::ToyText && self.data.kind == DataKind::TokenParity {
            return bad("token-parity data needs the toy-text task".into());
        }
        for (name, t) in [("backbone_train", (self.backbone_train.epochs, self.backbone_train.batch)), ("distill", (self.distill.epochs, self.distill.batch))] {
            if t.0 == 0 || t.1 == 0 {
                return bad(format!("{name} epochs and batch must be at least 1"));
            }
        }
        if self.distill.l2_samples == 0 {
            return bad("distill l2_samples must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.kernel.dropout) || !(self.kernel.scale_floor > 0.0) || self.kernel.dit_depth != 1 {
            return bad("kernel needs dropout in [0, 1), a positive scale floor and dit_depth = 1".into());
        }
        if self.eval.bins == 0 || self.eval.n_draws == 0 {
            return bad("eval bins and n_draws must be at least 1".into());
        }
        let d = &self.data;
        if d.n_train == 0 || d.n_test == 0 || d.n_train + d.n_val + d.n_test < 10 {
            return bad("data needs n_train ≥ 1, n_test ≥ 1 and at least 10 records".into());
        }
        if let Some(p) = &d.path {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        self.loss_weights(true).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_reparses_equal() {
        for task in [Task::ToyVision, Task::ToyText, Task::Tabular] {
            let mut c = RunConfig::default_for(task);
            c.distill.lambda_nll = Some(0.123456789012345);
            c.backbone_train.lr = 0.1 + 0.2;
            let text = c.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), c, "{text}");
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default_for(Task::ToyVision);
        let mut b = a.clone();
        b.out = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = RunConfig::default_for(Task::ToyVision);
        c.backbone.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default_for(Task::ToyVision);
        c.distill.lambda_mean = Some(-1.0);
        assert!(c.validate().is_err());
        let text = RunConfig::default_for(Task::Tabular).to_toml().unwrap() + "\nbogus = 1\n";
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Parse(_))));
    }

    #[test]
    fn deterministic_path_drops_factor_weight() {
        let mut c = RunConfig::default_for(Task::ToyVision);
        c.distill.lambda_cholesky = Some(0.4);
        assert_eq!(c.loss_weights(false).lambda_cholesky, 0.0);
        assert_eq!(c.loss_weights(true).lambda_cholesky, 0.4);
        assert_eq!(RunConfig::default_for(Task::ToyVision).loss_weights(false), LossWeights::DETERMINISTIC_DEFAULT);
    }
}
