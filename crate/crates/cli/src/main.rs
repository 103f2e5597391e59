use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kdmia::analysis::published;
use kdmia::attacks::Method;
use kdmia::corpus::generate_corpus;
use kdmia::par::{self, Exec};
use kdmia::pipeline::{
    self, run_ablation, run_all, stage_attack, stage_distill, stage_partition, stage_prepare, stage_reference,
    stage_report, stage_teacher, ExperimentConfig, Layout, PipelineError, Variant,
};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "kdmia", version, about = "Membership inference against distilled byte-level language models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults to <out>/config.json, then the built-in desk config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/desk")]
    out: PathBuf,
    /// Worker threads for scoring and training (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus described by the config to a JSONL file.
    GenerateCorpus {
        /// Output file; defaults to <out>/corpus.jsonl.
        #[arg(long = "file")]
        file: Option<PathBuf>,
    },
    /// Load (or synthesize) the corpus and write the split manifest.
    PrepareData {
        /// Corpus JSONL; the synthetic corpus is generated when omitted.
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Train the teacher, and the reference model when the ref attack is enabled.
    TrainTeacher {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Split members into vulnerable and non-vulnerable with the teacher's attack.
    Partition,
    /// Distill one student variant from the teacher.
    Distill {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "bottleneck-dim")]
        bottleneck_dim: Option<usize>,
    },
    /// Score, calibrate and evaluate every attack against one model.
    Attack {
        /// `teacher` or a variant name.
        #[arg(long)]
        model: String,
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Build comparison tables and statistics from a run directory.
    Report {
        /// Run directory; defaults to --out.
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Check the statistics code against the published tables and exit.
        #[arg(long = "self-check")]
        self_check: bool,
    },
    /// Every stage end to end.
    RunAll {
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Full-data students over a sweep of bottleneck widths.
    AblateBottleneck {
        /// Comma-separated widths; defaults to the published sweep rescaled to the hidden size.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
    },
}

#[derive(Args)]
struct AttackFlags {
    /// Comma-separated attack names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Cross-validate k and the prefix size before calibrating.
    #[arg(long, overrides_with = "no_tune")]
    tune: bool,
    #[arg(long = "no-tune")]
    no_tune: bool,
    #[arg(long)]
    folds: Option<usize>,
}

impl AttackFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), PipelineError> {
        if let Some(names) = &self.methods {
            cfg.attacks.methods = names.iter().map(|n| n.parse::<Method>()).collect::<Result<_, _>>()?;
        }
        if self.tune {
            cfg.attacks.tune = true;
        }
        if self.no_tune {
            cfg.attacks.tune = false;
        }
        if let Some(f) = self.folds {
            cfg.attacks.folds = f;
        }
        Ok(())
    }
}

fn load_config(common: &Common, layout: &Layout) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if layout.config().exists() => ExperimentConfig::load(&layout.config())?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let common = &cli.common;
    if common.jobs > 0 {
        par::init_threads(common.jobs);
    }
    let exec = if common.sequential { Exec::Sequential } else { Exec::default() };
    let layout = Layout::new(&common.out);

    match cli.command {
        Command::Report { runs, self_check } => {
            if self_check {
                return report_self_check();
            }
            let layout = runs.map(Layout::new).unwrap_or(layout);
            let report = stage_report(&layout)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.holds { "holds" } else { "fails" }, c.id, c.detail);
            }
            println!("report written to {}", layout.report_dir().display());
            return Ok(());
        }
        Command::GenerateCorpus { file } => {
            let cfg = load_config(common, &layout)?;
            let mut synth = cfg.synth.clone();
            synth.seed = pipeline::derive_seed(cfg.seed, "corpus");
            let corpus = generate_corpus(&synth)?;
            let file = file.unwrap_or_else(|| layout.corpus());
            if let Some(parent) = file.parent() {
                std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
            }
            corpus.save(&file)?;
            println!("{} documents written to {}", corpus.len(), file.display());
            return Ok(());
        }
        _ => {}
    }

    let mut cfg = load_config(common, &layout)?;
    match cli.command {
        Command::PrepareData { input } => {
            if input.is_some() {
                cfg.corpus = input;
            }
            let data = stage_prepare(&cfg, &layout)?;
            println!(
                "manifest written: {} members, {} non-members, {} prefix, {} reference",
                data.members.len(),
                data.nonmembers.len(),
                data.prefix_pool.len(),
                data.reference_pool.len()
            );
        }
        Command::TrainTeacher { epochs } => {
            if let Some(e) = epochs {
                cfg.teacher.epochs = e;
            }
            stage_teacher(&cfg, &layout, exec)?;
            println!("teacher saved to {}", layout.checkpoint(pipeline::TEACHER).display());
            if cfg.uses(Method::Ref) && stage_reference(&cfg, &layout, exec)?.is_some() {
                println!("reference saved to {}", layout.checkpoint(pipeline::REFERENCE).display());
            }
        }
        Command::Partition => {
            let (p, _) = stage_partition(&cfg, &layout, exec)?;
            println!(
                "{} vulnerable, {} non-vulnerable members",
                p.vulnerable_ids.len(),
                p.nonvulnerable_ids.len()
            );
        }
        Command::Distill {
            variant,
            lambda,
            epochs,
            bottleneck_dim,
        } => {
            if let Some(l) = lambda {
                cfg.distill.lambda = l;
            }
            if let Some(e) = epochs {
                cfg.distill.train.epochs = e;
            }
            if bottleneck_dim.is_some() {
                cfg.bottleneck_dim = bottleneck_dim;
            }
            stage_distill(&cfg, &layout, variant, exec)?;
            println!("student-{variant} saved");
        }
        Command::Attack { model, attack } => {
            attack.apply(&mut cfg)?;
            let m = stage_attack(&cfg, &layout, &model, exec)?;
            for a in &m.attacks {
                let c = &a.calibration;
                println!("{:<7} A {:.3}  TPR {:.3}  TNR {:.3}", c.method.name(), c.accuracy, c.tpr, c.tnr);
            }
        }
        Command::RunAll { attack } => {
            attack.apply(&mut cfg)?;
            let s = run_all(&cfg, &layout, exec)?;
            for m in &s.report.models {
                println!("{:<24} mean A {:.3}  mean TPR {:.3}", m.name, m.mean_accuracy, m.mean_tpr);
            }
            for c in &s.report.checks {
                println!("{} {}: {}", if c.holds { "holds" } else { "fails" }, c.id, c.detail);
            }
            println!("summary written to {}", layout.summary().display());
        }
        Command::AblateBottleneck { dims } => {
            if dims.is_some() {
                cfg.ablation_dims = dims;
            }
            for r in run_ablation(&cfg, &layout, exec)? {
                println!(
                    "B {:<4} params {:<7} saves {:<5} mean TPR {:.3}  member ppl {:.3}",
                    r.bottleneck, r.param_count, r.saves_parameters, r.mean_tpr, r.member_perplexity
                );
            }
        }
        Command::Report { .. } | Command::GenerateCorpus { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn report_self_check() -> Result<(), PipelineError> {
    let lines = published::self_check()?;
    let mut failed = 0;
    for l in &lines {
        println!(
            "{} {}: expected {} got {:.4} (tol {})",
            if l.pass { "PASS" } else { "FAIL" },
            l.name,
            l.expected,
            l.got,
            l.tolerance
        );
        failed += usize::from(!l.pass);
    }
    if failed > 0 {
        return Err(PipelineError::Malformed {
            path: "published tables".into(),
            message: format!("{failed} self-check line(s) failed"),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
