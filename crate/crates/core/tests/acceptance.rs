//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Runs sequentially so the end-to-end timing is honest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use pathcal::backbone::{AttentionMode, Backbone};
use pathcal::config::{RunConfig, Task};
use pathcal::data::gen_data;
use pathcal::kernelnet::KernelNet;
use pathcal::pipeline::{DistillFile, EvalReport, Pipeline, ReconfigureReport};
use pathcal::verify::{self, Check};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

fn failures(checks: &[Check]) -> String {
    let bad: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
    if bad.is_empty() {
        String::new()
    } else {
        format!("; failing: {}", bad.join(", "))
    }
}

fn find<'a>(checks: &'a [Check], name: &str) -> &'a Check {
    checks.iter().find(|c| c.name == name).unwrap_or_else(|| panic!("no check {name}"))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_slice(&fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

struct E2eRun {
    mode: AttentionMode,
    seed: u64,
    dir: PathBuf,
    eval: EvalReport,
    distill: DistillFile,
    reconfigure: ReconfigureReport,
    secs: f64,
}

fn end_to_end(root: &Path) -> Vec<E2eRun> {
    let mut runs = Vec::new();
    for mode in [AttentionMode::Kep, AttentionMode::Standard] {
        for seed in 0..3u64 {
            let mut cfg = RunConfig::default_for(Task::ToyVision);
            cfg.seed = seed;
            cfg.backbone.attention = mode;
            cfg.out = root.join(format!("{}-{seed}", mode.name()));
            let start = Instant::now();
            Pipeline::open(cfg.clone(), false).and_then(|p| p.run_all()).unwrap_or_else(|e| panic!("{} seed {seed}: {e}", mode.name()));
            let secs = start.elapsed().as_secs_f64();
            let dir = cfg.out;
            runs.push(E2eRun {
                mode,
                seed,
                eval: read(&dir.join("calibration_report.json")),
                distill: read(&dir.join("distill_report.json")),
                reconfigure: read(&dir.join("reconfigure_report.json")),
                dir,
                secs,
            });
            let r = runs.last().unwrap();
            eprintln!(
                "  e2e {:<8} seed {seed}: backbone acc {:.4} ece {:.4} | distilled acc {:.4} ece {:.4} | {:.0}s",
                mode.name(),
                r.eval.backbone.acc,
                r.eval.backbone.ece,
                r.eval.distilled.acc,
                r.eval.distilled.ece,
                secs
            );
        }
    }
    runs
}

fn criterion7(runs: &[E2eRun]) -> Outcome {
    let total: f64 = runs.iter().map(|r| r.secs).sum();
    let mut ok = total < 600.0;
    let mut parts = Vec::new();
    for (mode, want) in [(AttentionMode::Kep, (0.5, 0.2, 0.3)), (AttentionMode::Standard, (0.8, 0.0, 0.2))] {
        let rs: Vec<&E2eRun> = runs.iter().filter(|r| r.mode == mode).collect();
        let weights_ok = rs.iter().all(|r| {
            let w = &r.distill.report.weights;
            (w.lambda_mean, w.lambda_cholesky, w.lambda_nll) == want
        });
        let mut dacc: Vec<f64> = rs.iter().map(|r| r.eval.delta.acc).collect();
        let mut dece: Vec<f64> = rs.iter().map(|r| r.eval.delta.ece).collect();
        let (ma, me) = (median(&mut dacc), median(&mut dece));
        let pass = weights_ok && ma >= -0.03 && me <= 0.02;
        ok &= pass;
        parts.push(format!(
            "{} λ={want:?}{}: median Δacc {:+.2} pts, median ΔECE {:+.2} pts",
            mode.name(),
            if weights_ok { "" } else { " (weights mismatch)" },
            100.0 * ma,
            100.0 * me
        ));
    }
    outcome(ok, format!("{}; 6 runs in {total:.0}s (limit 600s)", parts.join("; ")))
}

fn criterion8(runs: &[E2eRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let e = &r.eval;
        ok &= e.kernel_params < e.backbone_params && r.distill.report.kernel_params == e.kernel_params;
    }
    let r0 = &runs[0].eval;
    parts.push(format!("toy-vision reports {} < {}", r0.kernel_params, r0.backbone_params));
    for task in [Task::ToyText, Task::Tabular] {
        let cfg = RunConfig::default_for(task);
        let ds = gen_data(cfg.data.kind, 10, 0, cfg.layout()).unwrap();
        let bb = Backbone::new(cfg.backbone_config(ds.n_features, ds.n_classes).unwrap(), 0).unwrap();
        let k = KernelNet::new(cfg.kernel_config(bb.n_tokens()), 0).unwrap();
        ok &= k.param_count() < bb.param_count();
        parts.push(format!("{task:?} {} < {}", k.param_count(), bb.param_count()));
    }
    outcome(ok, parts.join(", "))
}

/// Files whose bytes must not depend on when or where the run happened.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if matches!(name.as_str(), "log.txt" | "timing.json" | "config.snapshot") || name.ends_with(".partial") {
            continue;
        }
        out.insert(name, fs::read(&p).unwrap());
    }
    out
}

fn diff(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut bad: Vec<String> = a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).map(|(k, _)| k.clone()).collect();
    bad.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
    bad
}

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default_for(Task::ToyVision);
    cfg.seed = 7;
    cfg.data.n_train = 160;
    cfg.data.n_test = 80;
    cfg.backbone_train.epochs = 8;
    cfg.distill.epochs = 6;
    cfg.out = dir.to_path_buf();
    cfg
}

fn criterion9(root: &Path, e2e: &E2eRun) -> Outcome {
    let mut problems = Vec::new();

    // Rerun of a default-config run.
    let mut cfg: RunConfig = RunConfig::load(&e2e.dir.join("config.snapshot")).unwrap();
    cfg.out = root.join("rerun-default");
    Pipeline::open(cfg, false).and_then(|p| p.run_all()).unwrap();
    let d = diff(&artifacts(&e2e.dir), &artifacts(&root.join("rerun-default")));
    if !d.is_empty() {
        problems.push(format!("default rerun differs in {d:?}"));
    }

    let reference_dir = root.join("ref");
    Pipeline::open(small_config(&reference_dir), false).and_then(|p| p.run_all()).unwrap();
    let reference = artifacts(&reference_dir);

    // Stop after each stage by removing what later stages wrote, then resume.
    let stages: [(&str, &[&str]); 4] = [
        ("train-backbone", &["config.snapshot", "backbone.ckpt", "backbone_report.json"]),
        ("reconfigure", &["config.snapshot", "backbone.ckpt", "backbone_report.json", "reconfigure_report.json"]),
        ("distill", &["config.snapshot", "backbone.ckpt", "backbone_report.json", "reconfigure_report.json", "kernel.ckpt", "distill_report.json"]),
        ("eval", &["config.snapshot", "backbone.ckpt", "backbone_report.json", "reconfigure_report.json", "kernel.ckpt", "distill_report.json", "calibration_report.json"]),
    ];
    for (stage, keep) in stages {
        let dir = root.join(format!("resume-{stage}"));
        fs::create_dir_all(&dir).unwrap();
        for name in keep {
            fs::copy(reference_dir.join(name), dir.join(name)).unwrap();
        }
        Pipeline::open(small_config(&dir), true).and_then(|p| p.run_all()).unwrap();
        let d = diff(&reference, &artifacts(&dir));
        if !d.is_empty() {
            problems.push(format!("resume after {stage} differs in {d:?}"));
        }
    }

    // A real kill of the CLI mid-run.
    let dir = root.join("killed");
    fs::create_dir_all(&dir).unwrap();
    let cfg_path = root.join("killed.toml");
    fs::write(&cfg_path, small_config(&dir).to_toml().unwrap()).unwrap();
    let bin = env!("CARGO_BIN_EXE_pathcal");
    let args = ["--config", cfg_path.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    let mut child = Command::new(bin).args(args).arg("run").stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap();
    let deadline = Instant::now() + Duration::from_secs(300);
    while !dir.join("backbone.ckpt").exists() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    let killed_early = child.try_wait().unwrap().is_none();
    child.kill().ok();
    child.wait().unwrap();
    let status = Command::new(bin).args(args).args(["--resume", "run"]).stdout(Stdio::null()).status().unwrap();
    let d = diff(&reference, &artifacts(&dir));
    if !status.success() || !d.is_empty() {
        problems.push(format!("resume after kill (status {status}) differs in {d:?}"));
    }

    let snap_ok = RunConfig::load(&reference_dir.join("config.snapshot")).unwrap() == small_config(&reference_dir);
    if !snap_ok {
        problems.push("config snapshot does not re-parse to the run config".into());
    }
    let detail = if problems.is_empty() {
        format!(
            "default rerun byte-identical ({} files); resume after each of 4 stages and after a kill{} byte-identical",
            artifacts(&e2e.dir).len(),
            if killed_early { " mid-run" } else { "" }
        )
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

fn criterion10(runs: &[E2eRun]) -> Outcome {
    let mut worst: f64 = 0.0;
    for r in runs {
        for c in &r.reconfigure.zero_noise_correlation {
            worst = worst.max((c - 1.0).abs());
        }
    }
    let stochastic: Vec<String> = runs
        .iter()
        .filter(|r| r.reconfigure.stochastic)
        .map(|r| format!("seed {}: {:?}", r.seed, r.reconfigure.stochastic_correlation.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>()))
        .collect();
    outcome(
        worst < 1e-9,
        format!("max |corr - 1| {worst:.1e} over {} runs; stochastic per-layer corr (KEP, t=T..1) {}", runs.len(), stochastic.join(", ")),
    )
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut lines: Vec<(u32, &str, Outcome)> = Vec::new();

    let t = Instant::now();
    let g = verify::gradients(10).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = g.iter().filter_map(|c| c.detail.rsplit(' ').next()?.parse::<f64>().ok()).fold(0.0, f64::max);
    lines.push((
        1,
        "gradient correctness",
        outcome(all_pass(&g) && secs < 60.0, format!("{} ops at 10 points, h=1e-4, worst rel err {worst:.1e}, {secs:.1}s{}", g.len(), failures(&g))),
    ));

    let p = verify::path_fidelity(64).unwrap();
    let d: Vec<String> = p.iter().map(|c| format!("{} {}", c.name.trim_start_matches("path/"), c.detail)).collect();
    lines.push((2, "reconfiguration fidelity", outcome(all_pass(&p), d.join(", "))));

    let kl = verify::kl(20, 100_000).unwrap();
    let (a, m) = (find(&kl, "kl/analytic"), find(&kl, "kl/monte-carlo"));
    lines.push((3, "KL oracle", outcome(a.passed && m.passed, format!("analytic {}; {}", a.detail, m.detail))));

    let b = verify::bound(20, 1000).unwrap();
    lines.push((4, "VLB inequality", outcome(all_pass(&b), b[0].detail.clone())));

    let n = find(&kl, "kl/nullification");
    lines.push((5, "nullification identity", outcome(n.passed, format!("{} on 50 instances", n.detail))));

    let m = verify::metrics(200).unwrap();
    let worst = m.iter().map(|c| c.detail.split(' ').nth(2).unwrap_or("").to_string()).collect::<Vec<_>>();
    lines.push((6, "metric oracle equivalence", outcome(all_pass(&m), format!("9 metrics on 200 sets, max |Δ| per metric {worst:?}{}", failures(&m)))));

    let runs = end_to_end(root.path());
    lines.push((7, "desk-scale end-to-end", criterion7(&runs)));
    lines.push((8, "parameter economy", criterion8(&runs)));
    lines.push((9, "determinism and resumability", criterion9(root.path(), &runs[0])));
    lines.push((10, "correlation diagnostic", criterion10(&runs)));

    for (i, name, o) in &lines {
        println!("criterion {i:>2} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let mut gen: Vec<String> = Vec::new();
    for mode in [AttentionMode::Kep, AttentionMode::Standard] {
        let mut v: Vec<f64> = runs.iter().filter(|r| r.mode == mode).map(|r| r.eval.generation_correlation).collect();
        gen.push(format!("{} median {:.4}", mode.name(), median(&mut v)));
    }
    println!("diagnostic  kernel X_0 vs zero-noise path X_0 correlation (target > 0.9): {}", gen.join(", "));
    let failed = lines.iter().filter(|(_, _, o)| !o.passed).count();
    println!("{} criteria, {failed} failed", lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
