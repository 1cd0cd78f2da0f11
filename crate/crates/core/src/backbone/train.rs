use serde::{Deserialize, Serialize};

use super::{Backbone, Noise};
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::{adam_step, lr_at, Graph, LrSchedule, OptimState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub cycle_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

/// Rows `idx` of a `[n, k]` tensor.
pub fn take_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let k = x.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        out.extend_from_slice(&x.data()[i * k..(i + 1) * k]);
    }
    Tensor::new(&[idx.len(), k], out).expect("row gather")
}

pub fn accuracy(probs: &Tensor, y: &[usize]) -> f64 {
    let c = probs.shape()[1];
    let hits = y
        .iter()
        .enumerate()
        .filter(|(r, &label)| {
            let row = &probs.data()[r * c..(r + 1) * c];
            argmax(row) == label
        })
        .count();
    hits as f64 / y.len().max(1) as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy training with Adam and the warmup/cosine schedule. GP modes
/// draw one reparameterized sample per step.
pub fn train_backbone(model: &mut Backbone, x: &Tensor, y: &[usize], cfg: &TrainConfig) -> Result<TrainReport> {
    let n = y.len();
    if x.shape()[0] != n || n == 0 {
        return Err(Error::contract("training inputs and labels disagree in length"));
    }
    let sched = LrSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr.min(cfg.lr),
        warmup_epochs: cfg.warmup_epochs,
        cycle_epochs: cfg.cycle_epochs,
    };
    let mut opt = OptimState::new(model.params.tensors(), cfg.lr, 0.9, 0.999, cfg.weight_decay);
    let mut report = TrainReport::default();
    let gp = model.cfg.attention.mode.is_gp();
    for epoch in 0..cfg.epochs {
        opt.lr = if cfg.lr == 0.0 { 0.0 } else { lr_at(&sched, epoch) };
        let mut order: Vec<usize> = (0..n).collect();
        SplitRng::with_stream(cfg.seed, 0x7000 + epoch as u64).shuffle(&mut order);
        let mut noise_rng = SplitRng::with_stream(cfg.seed, 0x9000 + epoch as u64);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch.max(1)).enumerate() {
            let xb = take_rows(x, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let noise = if gp { Noise::On(&mut noise_rng) } else { Noise::Off };
            let f = model.forward_graph(&mut g, &p, &xb, noise).map_err(|e| diverged(epoch, step, e))?;
            let loss = g.cross_entropy(f.logits, &yb).map_err(|e| diverged(epoch, step, e))?;
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(diverged(epoch, step, Error::numeric("cross_entropy", "NaN loss")));
            }
            total += lv * chunk.len() as f64;
            g.backward(loss)?;
            model.params.absorb_grads(&g, &p)?;
            adam_step(model.params.tensors_mut(), &mut opt)?;
        }
        report.epoch_loss.push(total / n as f64);
    }
    let probs = model.predict_proba(x, 1, None)?;
    report.train_accuracy = accuracy(&probs, y);
    Ok(report)
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { .. } => Error::Divergence {
            stage: "train-backbone",
            step: epoch,
            detail: format!("epoch {epoch}, batch {step}: {e}"),
        },
        other => other,
    }
}
