use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pathcal::calibrate::plot;
use pathcal::config::{RunConfig, Task};
use pathcal::data::{self, DataKind, Layout};
use pathcal::error::{Error, Result};
use pathcal::pipeline::{self, EvalReport, OodReport, Pipeline, ReconfigureReport};

#[derive(Parser, Debug)]
#[command(name = "pathcal", version, about = "Reconfigure a transformer into a probability path, distill it, and measure calibration")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reuse finished stages found in the run directory.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    ToyVision,
    ToyText,
    Tabular,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    Raster,
    Tabular,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// All stages: train-backbone, reconfigure, distill, eval, ood.
    Run,
    TrainBackbone,
    /// Re-cut the trained backbone into a path and check its fidelity.
    Reconfigure,
    Distill,
    Eval {
        /// Write distilled predictions as `prob_0..prob_{C-1},label` CSV.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    Ood,
    /// Summarise the reports of a run directory.
    Report,
    GenData {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "raster")]
        layout: LayoutArg,
        /// Output file; `.csv` or `.jsonl`.
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the oracle suite.
    Verify {
        #[arg(long)]
        quick: bool,
    },
    /// Print a default configuration.
    InitConfig {
        #[arg(long, value_enum, default_value = "toy-vision")]
        task: TaskArg,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.out) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(dir)) if dir.join(pipeline::SNAPSHOT).exists() => RunConfig::load(&dir.join(pipeline::SNAPSHOT))?,
        _ => RunConfig::default_for(Task::ToyVision),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&std::fs::read(path)?)?))
}

fn report(dir: &Path) -> Result<()> {
    let snap = dir.join(pipeline::SNAPSHOT);
    if !snap.exists() {
        return Err(Error::MissingArtifact(snap));
    }
    let cfg = RunConfig::load(&snap)?;
    println!("run {}  config_hash {}  seed {}", dir.display(), cfg.hash(), cfg.seed);
    if let Some(r) = read_json::<ReconfigureReport>(&dir.join(pipeline::RECONFIGURE_REPORT))? {
        println!("path ({}, T={}): max |Δlogit| {:.2e}", r.mode, r.depth, r.max_abs_logit_diff);
        println!("  zero-noise corr  {:?}", r.zero_noise_correlation);
        println!("  stochastic corr  {:?}", r.stochastic_correlation);
    }
    if let Some(r) = read_json::<EvalReport>(&dir.join(pipeline::CALIBRATION_REPORT))? {
        println!("params: backbone {}  kernel {}", r.backbone_params, r.kernel_params);
        println!("{:<10} {:>7} {:>7} {:>8} {:>8} {:>7} {:>7} {:>7}", "model", "ACC%", "ECE%", "NLLx10", "Brier%", "AURC%", "AUROC%", "FPR95%");
        for (name, c) in [("backbone", &r.backbone), ("distilled", &r.distilled)] {
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            println!(
                "{:<10} {:>7.2} {:>7.2} {:>8.3} {:>8.2} {:>7.2} {:>7} {:>7}",
                name,
                100.0 * c.acc,
                100.0 * c.ece,
                10.0 * c.nll,
                100.0 * c.brier,
                100.0 * c.aurc,
                pct(c.auroc),
                pct(c.fpr95)
            );
            let (rel, rc) = plot::report_svgs(c);
            std::fs::write(dir.join(format!("reliability_{name}.svg")), rel)?;
            std::fs::write(dir.join(format!("risk_coverage_{name}.svg")), rc)?;
        }
        println!("delta (distilled - backbone): acc {:+.4} ece {:+.4} nll {:+.4}", r.delta.acc, r.delta.ece, r.delta.nll);
    }
    if let Some(r) = read_json::<OodReport>(&dir.join(pipeline::OOD_REPORT))? {
        println!("ood {} vs {}:", r.in_distribution, r.out_of_distribution);
        for e in &r.scores {
            println!("  {:<10} {:?}: AUROC {:.4} AUPR {:.4}", e.model, e.method, e.auroc, e.aupr);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData { kind, n, layout, output } => {
            let kind = DataKind::parse(kind)?;
            let layout = match layout {
                LayoutArg::Raster => Layout::Raster,
                LayoutArg::Tabular => Layout::Tabular,
            };
            let ds = data::gen_data(kind, *n, cli.seed.unwrap_or(0), layout)?;
            match output.extension().and_then(|e| e.to_str()) {
                Some("csv") => ds.write_csv(output)?,
                Some("jsonl") => ds.write_jsonl(output)?,
                _ => return Err(Error::Usage(format!("{}: expected a .csv or .jsonl output", output.display()))),
            }
            println!("wrote {} records ({} features, {} classes) to {}", ds.len(), ds.n_features, ds.n_classes, output.display());
            return Ok(());
        }
        Cmd::Verify { quick } => {
            let checks = pathcal::verify::run_all(*quick)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{} checks, {} failed", checks.len(), failed);
            if failed > 0 {
                return Err(Error::contract(format!("{failed} oracle checks failed")));
            }
            return Ok(());
        }
        Cmd::InitConfig { task } => {
            let t = match task {
                TaskArg::ToyVision => Task::ToyVision,
                TaskArg::ToyText => Task::ToyText,
                TaskArg::Tabular => Task::Tabular,
            };
            print!("{}", RunConfig::default_for(t).to_toml()?);
            return Ok(());
        }
        Cmd::Report => {
            let dir = cli.out.clone().unwrap_or_else(|| RunConfig::default_for(Task::ToyVision).out);
            return report(&dir);
        }
        _ => {}
    }
    let cfg = resolve_config(&cli)?;
    let p = Pipeline::open(cfg, cli.resume)?;
    match &cli.cmd {
        Cmd::Run => {
            let s = p.run_all()?;
            println!(
                "done: backbone acc {:.4} ece {:.4} | distilled acc {:.4} ece {:.4} | params {} vs {}",
                s.eval.backbone.acc, s.eval.backbone.ece, s.eval.distilled.acc, s.eval.distilled.ece, s.backbone_params, s.kernel_params
            );
        }
        Cmd::TrainBackbone => {
            p.train_backbone().map_err(|e| e.in_stage("train-backbone"))?;
        }
        Cmd::Reconfigure => {
            let bb = p.load_backbone()?;
            let r = p.reconfigure(&bb).map_err(|e| e.in_stage("reconfigure"))?;
            println!("max |Δlogit| {:.2e}", r.max_abs_logit_diff);
        }
        Cmd::Distill => {
            let bb = p.load_backbone()?;
            p.distill(&bb).map_err(|e| e.in_stage("distill"))?;
        }
        Cmd::Eval { dump } => {
            let bb = p.load_backbone()?;
            let k = p.load_kernel()?;
            let r = p.eval(&bb, &k, dump.as_deref()).map_err(|e| e.in_stage("eval"))?;
            println!("backbone acc {:.4} ece {:.4} | distilled acc {:.4} ece {:.4}", r.backbone.acc, r.backbone.ece, r.distilled.acc, r.distilled.ece);
        }
        Cmd::Ood => {
            let bb = p.load_backbone()?;
            let k = p.load_kernel()?;
            let r = p.ood(&bb, &k).map_err(|e| e.in_stage("ood"))?;
            for e in &r.scores {
                println!("{:<10} {:?}: AUROC {:.4} AUPR {:.4}", e.model, e.method, e.auroc, e.aupr);
            }
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Usage(_) => 2,
                Error::MissingArtifact(_) => 3,
                _ => 1,
            })
        }
    }
}
