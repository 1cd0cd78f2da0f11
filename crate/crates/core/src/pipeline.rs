//! The end-to-end run: train the backbone, re-cut it into a path, distill,
//! evaluate, and score OOD, persisting every stage in a run directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::train::{train_backbone, TrainReport};
use crate::backbone::{Backbone, Noise};
use crate::calibrate::{self, plot, CalibrationReport, OodMethod, PredictionSet, Source};
use crate::config::RunConfig;
use crate::data::{self, Dataset, Splits};
use crate::distill::{distill_train, report_bound, DistillReport};
use crate::error::{Error, Result};
use crate::kernelnet::KernelNet;
use crate::pathify::repartition;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::Tensor;

pub const SNAPSHOT: &str = "config.snapshot";
pub const BACKBONE: &str = "backbone.ckpt";
pub const KERNEL: &str = "kernel.ckpt";
pub const RECONFIGURE_REPORT: &str = "reconfigure_report.json";
pub const DISTILL_REPORT: &str = "distill_report.json";
pub const CALIBRATION_REPORT: &str = "calibration_report.json";
pub const OOD_REPORT: &str = "ood_report.json";
pub const LOG: &str = "log.txt";
pub const TIMING: &str = "timing.json";

/// Write-then-rename so an interrupted run never leaves a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub config_hash: String,
    pub seed: u64,
    pub param_count: usize,
    pub train: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconfigureReport {
    pub config_hash: String,
    pub seed: u64,
    pub mode: String,
    pub depth: usize,
    pub stochastic: bool,
    pub n_inputs: usize,
    /// Zero-noise path logits against the direct forward.
    pub max_abs_logit_diff: f64,
    /// Pearson correlation of path states with backbone attention-residual
    /// features, per layer `t = T..1`.
    pub zero_noise_correlation: Vec<f64>,
    pub stochastic_correlation: Vec<f64>,
    /// Mean per-coordinate path scale per step.
    pub mean_path_scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillFile {
    pub config_hash: String,
    pub seed: u64,
    pub report: DistillReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub acc: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub n_draws: usize,
    pub backbone_params: usize,
    pub kernel_params: usize,
    pub backbone: CalibrationReport,
    pub distilled: CalibrationReport,
    /// Distilled minus backbone.
    pub delta: Deltas,
    /// Distilled ECE from a single draw per input.
    pub distilled_single_draw_ece: f64,
    /// Pearson correlation of the kernel's noise-free `X_0` with the
    /// zero-noise path `X_0` on test inputs.
    pub generation_correlation: f64,
    /// Largest mean distance `‖m(X,t) - m(X,t')‖` over step pairs on test
    /// inputs; zero would mean the kernel ignores `t`.
    pub timestep_sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodEntry {
    pub model: String,
    pub method: OodMethod,
    pub auroc: f64,
    pub aupr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub config_hash: String,
    pub seed: u64,
    pub in_distribution: String,
    pub out_of_distribution: String,
    pub n_in: usize,
    pub n_out: usize,
    pub scores: Vec<OodEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub backbone_params: usize,
    pub kernel_params: usize,
    pub eval: EvalReport,
    pub ood: Option<OodReport>,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub hash: String,
    pub dir: PathBuf,
    pub resume: bool,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    c / (va * vb).sqrt()
}

impl Pipeline {
    /// Opens (or creates) the run directory and writes the config snapshot.
    /// With `resume`, an existing snapshot must carry the same config hash.
    pub fn open(cfg: RunConfig, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.out.clone();
        fs::create_dir_all(&dir)?;
        let hash = cfg.hash();
        let p = Pipeline { cfg, hash, dir, resume };
        let snap = p.path(SNAPSHOT);
        if resume && snap.exists() {
            let old = RunConfig::load(&snap)?;
            if old.hash() != p.hash {
                return Err(Error::contract(format!(
                    "{} holds a run with config hash {}, not {}",
                    p.dir.display(),
                    old.hash(),
                    p.hash
                )));
            }
        }
        let text = format!("# config_hash = \"{}\"\n{}", p.hash, p.cfg.to_toml()?);
        write_atomic(&snap, text.as_bytes())?;
        Ok(p)
    }

    /// Reopens an existing run directory from its snapshot.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let snap = dir.join(SNAPSHOT);
        if !snap.exists() {
            return Err(Error::MissingArtifact(snap));
        }
        let mut cfg = RunConfig::load(&snap)?;
        cfg.out = dir.to_path_buf();
        let hash = cfg.hash();
        Ok(Pipeline {
            cfg,
            hash,
            dir: dir.to_path_buf(),
            resume: true,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn log(&self, msg: &str) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(LOG))?;
        writeln!(f, "{msg}")?;
        Ok(())
    }

    fn timing(&self, stage: &str, secs: f64) -> Result<()> {
        let path = self.path(TIMING);
        let mut map: serde_json::Map<String, serde_json::Value> = match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).unwrap_or_default(),
            Err(_) => Default::default(),
        };
        map.insert(stage.to_string(), serde_json::json!(secs));
        write_atomic(&path, &to_json(&map)?)?;
        self.log(&format!("[{stage}] {secs:.2}s"))
    }

    pub fn data(&self) -> Result<Splits> {
        let d = &self.cfg.data;
        let total = d.n_train + d.n_val + d.n_test;
        let ds = match &d.path {
            Some(p) => data::read_any(p)?,
            None => data::gen_data(d.kind, total, self.cfg.seed, self.cfg.layout())?,
        };
        let n_test = ds.len().saturating_sub(d.n_train + d.n_val);
        if n_test == 0 {
            return Err(Error::contract(format!("dataset has {} records; need more than n_train + n_val", ds.len())));
        }
        data::split(&ds, d.n_train, d.n_val, self.cfg.seed)
    }

    pub fn ood_data(&self) -> Result<Option<Dataset>> {
        let Some(kind) = self.cfg.data.ood_kind else { return Ok(None) };
        let n = self.cfg.data.n_test.max(10);
        Ok(Some(data::gen_data(kind, n, self.cfg.seed ^ 0x00D, self.cfg.layout())?))
    }

    fn check_hash(&self, ck: &Checkpoint, path: &Path) -> Result<()> {
        if ck.header.config_hash != self.hash {
            return Err(Error::contract(format!(
                "{} was produced by config {}, not {}",
                path.display(),
                ck.header.config_hash,
                self.hash
            )));
        }
        Ok(())
    }

    pub fn load_backbone(&self) -> Result<Backbone> {
        let path = self.path(BACKBONE);
        let ck = Checkpoint::load(&path)?;
        self.check_hash(&ck, &path)?;
        Backbone::from_checkpoint(&ck)
    }

    pub fn load_kernel(&self) -> Result<KernelNet> {
        let path = self.path(KERNEL);
        let ck = Checkpoint::load(&path)?;
        self.check_hash(&ck, &path)?;
        KernelNet::from_checkpoint(&ck)
    }

    fn reusable(&self, name: &str) -> bool {
        self.resume && self.path(name).exists()
    }

    pub fn train_backbone(&self) -> Result<Backbone> {
        if self.reusable(BACKBONE) {
            self.log("[train-backbone] resumed from checkpoint")?;
            return self.load_backbone();
        }
        let start = Instant::now();
        let s = self.data()?;
        let cfg = self.cfg.backbone_config(s.train.n_features, s.train.n_classes)?;
        let mut bb = Backbone::new(cfg, self.cfg.seed)?;
        let report = train_backbone(&mut bb, &s.train.tensor(), &s.train.labels, &self.cfg.train_config())?;
        self.log(&format!(
            "[train-backbone] params {} final loss {:.5} train acc {:.4}",
            bb.param_count(),
            report.epoch_loss.last().copied().unwrap_or(f64::NAN),
            report.train_accuracy
        ))?;
        let ck = bb.checkpoint(self.cfg.seed, &self.hash)?;
        write_atomic(&self.path(BACKBONE), &ck.to_bytes()?)?;
        let meta = BackboneMeta {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            param_count: bb.param_count(),
            train: report,
        };
        write_atomic(&self.path("backbone_report.json"), &to_json(&meta)?)?;
        self.timing("train-backbone", start.elapsed().as_secs_f64())?;
        Ok(bb)
    }

    pub fn reconfigure(&self, bb: &Backbone) -> Result<ReconfigureReport> {
        let start = Instant::now();
        let s = self.data()?;
        let path = repartition(bb)?;
        let n = s.test.len().min(64);
        let rows: Vec<usize> = (0..n).collect();
        let x = s.test.subset(&rows).tensor();
        let fwd = bb.forward(&x, Noise::Off)?;
        let x_t = path.embed(&x)?;
        let det = path.simulate_path(&x_t, false, 0)?;
        let sto = path.simulate_path(&x_t, true, self.cfg.seed ^ 0x5EC)?;
        let logits = path.trace_logits(&det)?;
        let corr = |states: &[Tensor]| -> Vec<f64> { fwd.traces.iter().zip(&states[1..]).map(|((z, _), s)| pearson(z.data(), s.data())).collect() };
        let mean_path_scale = (0..path.depth())
            .map(|k| {
                let st = sto.stds(k);
                st.data().iter().sum::<f64>() / st.len() as f64
            })
            .collect();
        let r = ReconfigureReport {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            mode: bb.cfg.attention.mode.name().to_string(),
            depth: path.depth(),
            stochastic: path.is_stochastic(),
            n_inputs: n,
            max_abs_logit_diff: logits.max_abs_diff(&fwd.logits),
            zero_noise_correlation: corr(&det.states),
            stochastic_correlation: corr(&sto.states),
            mean_path_scale,
        };
        write_atomic(&self.path(RECONFIGURE_REPORT), &to_json(&r)?)?;
        self.log(&format!("[reconfigure] max |Δlogit| {:.3e} stochastic corr {:?}", r.max_abs_logit_diff, r.stochastic_correlation))?;
        self.timing("reconfigure", start.elapsed().as_secs_f64())?;
        Ok(r)
    }

    pub fn distill(&self, bb: &Backbone) -> Result<(KernelNet, DistillReport)> {
        if self.reusable(KERNEL) && self.path(DISTILL_REPORT).exists() {
            self.log("[distill] resumed from checkpoint")?;
            let f: DistillFile = serde_json::from_slice(&fs::read(self.path(DISTILL_REPORT))?)?;
            return Ok((self.load_kernel()?, f.report));
        }
        let start = Instant::now();
        let s = self.data()?;
        let path = repartition(bb)?;
        let stochastic = path.is_stochastic();
        let mut kernel = KernelNet::new(self.cfg.kernel_config(bb.n_tokens()), self.cfg.seed ^ 0x4E7)?;
        let dc = self.cfg.distill_config(stochastic);
        let x = s.train.tensor();
        let mut report = distill_train(&path, &mut kernel, &x, &s.train.labels, &dc)?;
        report.bound = Some(report_bound(&path, &kernel, &x, 4, 2, self.cfg.seed)?);
        let ck = kernel.checkpoint(self.cfg.seed, &self.hash)?;
        write_atomic(&self.path(KERNEL), &ck.to_bytes()?)?;
        let file = DistillFile {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            report: report.clone(),
        };
        write_atomic(&self.path(DISTILL_REPORT), &to_json(&file)?)?;
        let last = report.epochs.last().map(|e| e.total).unwrap_or(f64::NAN);
        self.log(&format!(
            "[distill] kernel params {} backbone params {} final loss {last:.5} weights {:?}",
            report.kernel_params, report.backbone_params, report.weights
        ))?;
        self.timing("distill", start.elapsed().as_secs_f64())?;
        Ok((kernel, report))
    }

    fn predictions(&self, bb: &Backbone, kernel: &KernelNet, ds: &Dataset) -> Result<(PredictionSet, PredictionSet, PredictionSet)> {
        let path = repartition(bb)?;
        let x = ds.tensor();
        let n_draws = self.cfg.eval.n_draws;
        let stochastic = path.is_stochastic();
        let seed = self.cfg.seed ^ 0xE7A1;
        let base = calibrate::predict_calibrated(&path, Source::Path { noise: stochastic }, &x, &ds.labels, if stochastic { n_draws } else { 1 }, seed)?;
        let dist = calibrate::predict_calibrated(&path, Source::Kernel(kernel), &x, &ds.labels, n_draws, seed)?;
        let single = calibrate::predict_calibrated(&path, Source::Kernel(kernel), &x, &ds.labels, 1, seed)?;
        Ok((base, dist, single))
    }

    fn generation_diagnostics(&self, bb: &Backbone, kernel: &KernelNet, ds: &Dataset) -> Result<(f64, f64)> {
        let path = repartition(bb)?;
        let rows: Vec<usize> = (0..ds.len().min(64)).collect();
        let x_t = path.embed(&ds.subset(&rows).tensor())?;
        let target = path.simulate_path(&x_t, false, 0)?;
        let gen = kernel.generate(&x_t, path.depth(), false, 0)?;
        let corr = pearson(gen.states.last().unwrap().data(), target.states.last().unwrap().data());
        let b = rows.len();
        let means = (1..=path.depth()).map(|t| kernel.forward_batch(&x_t, &vec![t; b]).map(|(m, _)| m)).collect::<Result<Vec<_>>>()?;
        let mut sens: f64 = 0.0;
        for (i, a) in means.iter().enumerate() {
            for c in &means[i + 1..] {
                let d2: f64 = a.data().iter().zip(c.data()).map(|(u, v)| (u - v).powi(2)).sum();
                sens = sens.max((d2 / b as f64).sqrt());
            }
        }
        Ok((corr, sens))
    }

    pub fn eval(&self, bb: &Backbone, kernel: &KernelNet, dump: Option<&Path>) -> Result<EvalReport> {
        let start = Instant::now();
        let s = self.data()?;
        let (base, dist, single) = self.predictions(bb, kernel, &s.test)?;
        let bins = self.cfg.eval.bins;
        let backbone = CalibrationReport::compute(&base, bins)?;
        let distilled = CalibrationReport::compute(&dist, bins)?;
        let (generation_correlation, timestep_sensitivity) = self.generation_diagnostics(bb, kernel, &s.test)?;
        let r = EvalReport {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            n_draws: self.cfg.eval.n_draws,
            backbone_params: bb.param_count(),
            kernel_params: kernel.param_count(),
            delta: Deltas {
                acc: distilled.acc - backbone.acc,
                ece: distilled.ece - backbone.ece,
                nll: distilled.nll - backbone.nll,
                brier: distilled.brier - backbone.brier,
            },
            distilled_single_draw_ece: calibrate::ece(&single, bins)?,
            generation_correlation,
            timestep_sensitivity,
            backbone,
            distilled,
        };
        write_atomic(&self.path(CALIBRATION_REPORT), &to_json(&r)?)?;
        if let Some(p) = dump {
            let mut buf = Vec::new();
            dist.write_csv(&mut buf)?;
            write_atomic(p, &buf)?;
        }
        if self.cfg.eval.plots {
            for (name, rep) in [("backbone", &r.backbone), ("distilled", &r.distilled)] {
                let (rel, rc) = plot::report_svgs(rep);
                write_atomic(&self.path(&format!("reliability_{name}.svg")), rel.as_bytes())?;
                write_atomic(&self.path(&format!("risk_coverage_{name}.svg")), rc.as_bytes())?;
            }
        }
        self.log(&format!(
            "[eval] backbone acc {:.4} ece {:.4} | distilled acc {:.4} ece {:.4} | generation corr {:.4}",
            r.backbone.acc, r.backbone.ece, r.distilled.acc, r.distilled.ece, r.generation_correlation
        ))?;
        self.timing("eval", start.elapsed().as_secs_f64())?;
        Ok(r)
    }

    pub fn ood(&self, bb: &Backbone, kernel: &KernelNet) -> Result<OodReport> {
        let start = Instant::now();
        let out = self.ood_data()?.ok_or_else(|| Error::contract("config has no data.ood_kind"))?;
        let s = self.data()?;
        let (base_in, dist_in, _) = self.predictions(bb, kernel, &s.test)?;
        let (base_out, dist_out, _) = self.predictions(bb, kernel, &out)?;
        let mut scores = Vec::new();
        for (model, a, b) in [("backbone", &base_in, &base_out), ("distilled", &dist_in, &dist_out)] {
            for method in [OodMethod::Msp, OodMethod::Entropy] {
                let sc = calibrate::ood_eval(a, b, method)?;
                scores.push(OodEntry {
                    model: model.into(),
                    method,
                    auroc: sc.auroc,
                    aupr: sc.aupr,
                });
            }
        }
        let r = OodReport {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            in_distribution: self.cfg.data.kind.name().into(),
            out_of_distribution: self.cfg.data.ood_kind.map_or("", |k| k.name()).into(),
            n_in: s.test.len(),
            n_out: out.len(),
            scores,
        };
        write_atomic(&self.path(OOD_REPORT), &to_json(&r)?)?;
        self.log(&format!("[ood] {:?}", r.scores.iter().map(|e| (e.model.as_str(), e.method, e.auroc)).collect::<Vec<_>>()))?;
        self.timing("ood", start.elapsed().as_secs_f64())?;
        Ok(r)
    }

    /// All stages in order; errors carry the stage name and earlier
    /// artifacts stay on disk.
    pub fn run_all(&self) -> Result<RunSummary> {
        self.log(&format!("run config_hash {} seed {}", self.hash, self.cfg.seed))?;
        let bb = self.train_backbone().map_err(|e| e.in_stage("train-backbone"))?;
        self.reconfigure(&bb).map_err(|e| e.in_stage("reconfigure"))?;
        let (kernel, _) = self.distill(&bb).map_err(|e| e.in_stage("distill"))?;
        let eval = self.eval(&bb, &kernel, None).map_err(|e| e.in_stage("eval"))?;
        let ood = if self.cfg.eval.ood && self.cfg.data.ood_kind.is_some() {
            Some(self.ood(&bb, &kernel).map_err(|e| e.in_stage("ood"))?)
        } else {
            None
        };
        Ok(RunSummary {
            backbone_params: bb.param_count(),
            kernel_params: kernel.param_count(),
            eval,
            ood,
        })
    }
}
