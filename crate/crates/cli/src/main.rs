//! `qkd`: pre-training, single runs, ablation grids, evaluation, plot data
//! and the self-check suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qkd_core::ablation::{self, SeedContext};
use qkd_core::checkpoint;
use qkd_core::checks;
use qkd_core::config::{ExperimentConfig, RunMode};
use qkd_core::data::prepare;
use qkd_core::distill::Temperature;
use qkd_core::pipeline::{self, evaluate, Pretrained};

#[derive(Parser)]
#[command(name = "qkd", version, about = "Quantization-aware knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every experiment subcommand. Flags override the
/// config file, which overrides the built-in defaults.
#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (falls back to $QKD_OUTPUT_DIR, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Teacher architecture name.
    #[arg(long)]
    teacher: Option<String>,
    /// Student architecture name.
    #[arg(long)]
    student: Option<String>,
    #[arg(long)]
    epochs_ss: Option<usize>,
    #[arg(long)]
    epochs_cs: Option<usize>,
    #[arg(long)]
    epochs_tu: Option<usize>,
    /// Base learning rate of the weights.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Fill the wallclock_s column (makes CSVs run-dependent).
    #[arg(long)]
    record_wallclock: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.out {
            cfg.run.output_dir = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.run.seed = v;
        }
        if let Some(v) = &self.teacher {
            cfg.run.teacher = v.clone();
        }
        if let Some(v) = &self.student {
            cfg.run.student = v.clone();
        }
        if let Some(v) = self.epochs_ss {
            cfg.plan.epochs_ss = v;
        }
        if let Some(v) = self.epochs_cs {
            cfg.plan.epochs_cs = v;
        }
        if let Some(v) = self.epochs_tu {
            cfg.plan.epochs_tu = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.temperature {
            cfg.distill.temperature = Temperature::new(v)?;
        }
        if self.record_wallclock {
            cfg.run.record_wallclock = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision teacher and student checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// One run of one mode.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
        /// Bit-width; above 16 trains an unquantized student.
        #[arg(long)]
        bits: Option<u32>,
        /// Directory holding teacher.qkdf/student.qkdf
        /// (default: <out>/pretrained/seed-<seed>).
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Randomized quantizer property suite.
    Quantcheck {
        #[arg(long, default_value_t = 10_000)]
        tensors: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Mode × bit-width × seed grid with a summary table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated bit-widths.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        bits: Vec<u32>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Comma-separated modes (default: all).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
    /// Per-epoch KL and teacher-accuracy series from record CSVs.
    Plotdata {
        #[command(flatten)]
        common: Common,
        /// Record CSVs to merge.
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn pretrained_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir().join("pretrained").join(format!("seed-{}", cfg.run.seed))
}

fn load_pretrained(dir: &Path, cfg: &ExperimentConfig) -> Result<Pretrained> {
    let t = dir.join("teacher.qkdf");
    let s = dir.join("student.qkdf");
    if !t.exists() || !s.exists() {
        return Err(qkd_core::QkdError::Config(format!(
            "pre-trained checkpoints not found in {} (run `qkd pretrain` first)",
            dir.display()
        ))
        .into());
    }
    Ok(Pretrained {
        teacher: checkpoint::load_state_for(&t, &cfg.run.teacher)?,
        student: checkpoint::load_state_for(&s, &cfg.run.student)?,
    })
}

fn cmd_pretrain(common: &Common) -> Result<()> {
    let mut cfg = common.resolve()?;
    let (train, test, norm) = prepare(&cfg.data, cfg.run.seed, cfg.normalization)?;
    cfg.normalization = Some(norm);
    let pre = pipeline::pretrain(&cfg, &train, &test)?;
    let dir = pretrained_dir(&cfg);
    ensure_dir(&dir)?;
    checkpoint::save_state(&pre.teacher, dir.join("teacher.qkdf"))?;
    checkpoint::save_state(&pre.student, dir.join("student.qkdf"))?;
    write_config(&cfg, &dir.join("config.json"))?;
    let t = evaluate(&pre.teacher, &test)?;
    let s = evaluate(&pre.student, &test)?;
    println!(
        "pretrained {} {:.2}% / {} {:.2}% -> {}",
        cfg.run.teacher,
        t.top1,
        cfg.run.student,
        s.top1,
        dir.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, mode: Option<&str>, bits: Option<u32>, pretrained: Option<&Path>) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(m) = mode {
        cfg.run.mode = m.parse()?;
    }
    if let Some(b) = bits {
        cfg.run.bits = b;
    }
    cfg.validate()?;
    let (train, test, norm) = prepare(&cfg.data, cfg.run.seed, cfg.normalization)?;
    cfg.normalization = Some(norm);
    let dir = pretrained.map_or_else(|| pretrained_dir(&cfg), Path::to_path_buf);
    let pre = load_pretrained(&dir, &cfg)?;
    let out = pipeline::run_experiment(&cfg, &pre, &train, &test)?;
    let run_dir = cfg
        .output_dir()
        .join("runs")
        .join(ablation::cell_stem(cfg.run.mode, cfg.run.bits, cfg.run.seed));
    ensure_dir(&run_dir)?;
    out.record.write_csv(run_dir.join("record.csv"))?;
    checkpoint::save_state(&out.student, run_dir.join("student.qkdf"))?;
    checkpoint::save_state(&out.teacher, run_dir.join("teacher.qkdf"))?;
    write_config(&cfg, &run_dir.join("config.json"))?;
    println!(
        "{} k={} seed={}: student top-1 {:.2}% -> {}",
        cfg.run.mode,
        cfg.run.bits,
        cfg.run.seed,
        out.record.final_student_test_top1(),
        run_dir.display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, path: &Path) -> Result<()> {
    let cfg = common.resolve()?;
    let state = checkpoint::load_state(path)?;
    let (_, test, _) = prepare(&cfg.data, cfg.run.seed, cfg.normalization)?;
    let m = evaluate(&state, &test)?;
    let v = serde_json::json!({
        "checkpoint": path.display().to_string(),
        "network": state.spec().name,
        "top1": m.top1,
        "top5": m.top5,
        "top5_defined": m.top5_defined,
    });
    println!("{}", v);
    Ok(())
}

fn cmd_ablate(common: &Common, bits: &[u32], seeds: &[u64], modes: &[String]) -> Result<()> {
    let cfg = common.resolve()?;
    let modes: Vec<RunMode> = if modes.is_empty() {
        RunMode::ALL.to_vec()
    } else {
        modes.iter().map(|m| m.parse()).collect::<qkd_core::Result<_>>()?
    };
    if bits.is_empty() || seeds.is_empty() {
        bail!("--bits and --seeds must be non-empty");
    }
    let contexts: Vec<SeedContext> = seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.run.seed = s;
            let dir = pretrained_dir(&c);
            let existing = load_pretrained(&dir, &c).ok();
            Ok(ablation::seed_context(&cfg, s, existing)?)
        })
        .collect::<Result<_>>()?;
    let cells = ablation::run_grid(&cfg, &modes, bits, &contexts)?;
    let dir = cfg.output_dir().join("ablation");
    ensure_dir(&dir)?;
    ablation::write_outputs(&dir, &cells, &contexts, &modes, bits)?;
    write_config(&cfg, &dir.join("config.json"))?;
    print!("{}", ablation::format_table(&cells, &contexts, &modes, bits));
    Ok(())
}

fn cmd_plotdata(common: &Common, records: &[PathBuf]) -> Result<()> {
    let cfg = common.resolve()?;
    let dir = cfg.output_dir().join("plots");
    ensure_dir(&dir)?;
    let kl_path = dir.join("kl_series.csv");
    let acc_path = dir.join("teacher_accuracy_series.csv");
    let mut kl = String::from("run,epoch,phase,mode,bits,mean_kl_T\n");
    let mut acc = String::from("run,epoch,phase,mode,bits,teacher_test_top1,student_test_top1\n");
    for path in records {
        let rows = pipeline::read_rows(path)?;
        let run = path.display().to_string().replace(',', "_");
        for r in rows {
            let p = r.phase.label();
            kl.push_str(&format!("{},{},{},{},{},{}\n", run, r.epoch, p, r.mode, r.bits, r.mean_kl_t));
            acc.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                run, r.epoch, p, r.mode, r.bits, r.teacher_test_top1, r.student_test_top1
            ));
        }
    }
    fs::write(&kl_path, kl).with_context(|| format!("writing {}", kl_path.display()))?;
    fs::write(&acc_path, acc).with_context(|| format!("writing {}", acc_path.display()))?;
    println!("{}\n{}", kl_path.display(), acc_path.display());
    Ok(())
}

fn report_suite(report: &checks::Report) -> ExitCode {
    print!("{}", report);
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Pretrain { common } => cmd_pretrain(common)?,
        Command::Train {
            common,
            mode,
            bits,
            pretrained,
        } => cmd_train(common, mode.as_deref(), *bits, pretrained.as_deref())?,
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint)?,
        Command::Gradcheck { trials, seed } => return Ok(report_suite(&checks::gradcheck(*trials, *seed)?)),
        Command::Quantcheck { tensors, seed } => return Ok(report_suite(&checks::quantcheck(*tensors, *seed)?)),
        Command::Ablate {
            common,
            bits,
            seeds,
            modes,
        } => cmd_ablate(common, bits, seeds, modes)?,
        Command::Plotdata { common, records } => cmd_plotdata(common, records)?,
    }
    Ok(ExitCode::SUCCESS)
}

/// The error chain on one line, skipping causes whose text the enclosing
/// message already carries.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 and usage text on unknown flags.
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
