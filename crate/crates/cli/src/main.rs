//! `abbnn` command-line front end.
//!
//! Exit codes: 0 ok, 1 internal, 2 config/spec, 3 data/io, 4 numerical
//! abort, 5 bad model or checkpoint file, 6 export refused, 7 a checked
//! invariant failed (verify/infer gates).

mod settings;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abbnn::data::{Split, SynthConfig};
use abbnn::engine::{self, OpCounters};
use abbnn::nfgraph::{ActKind, GraphSpec, Phase, Shape3, TrainState};
use abbnn::opaudit::{self, Variant};
use abbnn::trainer::{self, checkpoint, History, LossKind, Teacher, TrainConfig};
use abbnn::{bundled, exporter, Error};
use clap::{Args, Parser, Subcommand};
use settings::{opt, switch, Settings};

/// Minimum sign agreement `verify` accepts.
const MIN_SIGN_AGREEMENT: f64 = 0.999;
const INVARIANT_EXIT: u8 = 7;

enum Failure {
    Core(Error),
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

#[derive(Parser)]
#[command(name = "abbnn", version, about = "Train, fold, run and audit multiplication-free binary networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic image-classification set as IDX files.
    Gendata(GendataArgs),
    /// Two-step training (or a single phase with --phase).
    Train(TrainArgs),
    /// Fold a step-2 checkpoint into an ABNN model file.
    Export(ExportArgs),
    /// Run the integer engine on inputs; prints top-k and op counters.
    Infer(InferArgs),
    /// Compare the engine against the training graph.
    Verify(VerifyArgs),
    /// Static multiplication count of a graph.
    Audit(AuditArgs),
}

#[derive(Args)]
struct GendataArgs {
    /// key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    /// CxHxW, default 1x16x16.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    separation: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Spec file, or `bundled:<name>`.
    #[arg(long)]
    spec: Option<String>,
    /// `synth` or a directory of IDX files.
    #[arg(long)]
    data: Option<String>,
    /// both (default), step1 or step2.
    #[arg(long)]
    phase: Option<String>,
    /// Epochs per phase.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    agc_lambda: Option<f64>,
    #[arg(long)]
    agc_exclude_head: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// `ce` or `distill` (needs --teacher).
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// `quantized` or `rleaky:<exp>`.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    alpha_exp: Option<i32>,
    /// Step-1 checkpoint for --phase step2.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Also keep the step-1 state of a two-step run.
    #[arg(long)]
    step1_checkpoint: Option<PathBuf>,
    /// Output checkpoint, default model.abck.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-epoch JSON lines, default next to the checkpoint.
    #[arg(long)]
    metrics_log: Option<PathBuf>,
    /// Synthetic set: samples, separation and seed.
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "ckpt", alias = "checkpoint")]
    checkpoint: Option<PathBuf>,
    /// Optional; the checkpoint must match it.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    frac_bits: Option<u8>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// ABFX or IDX file holding one or more inputs.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Boundary layers use shift-and-add instead of multiply.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    counters_out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "ckpt", alias = "checkpoint")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    spec: Option<String>,
    /// Input size, `224` or `HxW`; defaults to the spec's input.
    #[arg(long)]
    hw: Option<String>,
    /// bnfree or ab.
    #[arg(long)]
    variant: Option<String>,
    /// table (default) or jsonl on stdout.
    #[arg(long)]
    format: Option<String>,
    /// Always JSON lines.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Gendata(a) => gendata(a),
        Cmd::Train(a) => train(a),
        Cmd::Export(a) => export(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Verify(a) => verify(a),
        Cmd::Audit(a) => audit(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("invariant failed: {msg}");
            ExitCode::from(INVARIANT_EXIT)
        }
    }
}

/// A spec path, `bundled:<name>`, or a bare bundled name when no such
/// file exists.
fn load_spec(s: &str) -> abbnn::Result<GraphSpec> {
    if !s.starts_with("bundled:") && !Path::new(s).exists() && bundled::text(s).is_some() {
        return bundled::spec(s);
    }
    bundled::resolve(s)
}

fn write_file(path: &Path, text: &str) -> abbnn::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_shape(s: &str) -> abbnn::Result<Shape3> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("shape must be CxHxW, got `{s}`")))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Shape3::new(c, h, w)),
        _ => Err(Error::Config(format!("shape must be CxHxW with positive sizes, got `{s}`"))),
    }
}

fn gendata(a: GendataArgs) -> Outcome {
    let s = Settings::load(
        a.config.as_deref(),
        vec![
            ("out", a.out.map(|p| p.display().to_string())),
            ("classes", opt(&a.classes)),
            ("shape", a.shape),
            ("train", opt(&a.train)),
            ("test", opt(&a.test)),
            ("seed", opt(&a.seed)),
            ("separation", opt(&a.separation)),
        ],
    )?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        classes: s.or("classes", d.classes)?,
        shape: s.str("shape").map(parse_shape).transpose()?.unwrap_or(d.shape),
        train: s.or("train", d.train)?,
        test: s.or("test", d.test)?,
        seed: s.or("seed", d.seed)?,
        separation: s.or("separation", d.separation)?,
    };
    let out = PathBuf::from(s.require("out")?);
    cfg.generate()?.write_dir(&out)?;
    println!(
        "{}",
        serde_json::json!({
            "out": out.display().to_string(),
            "classes": cfg.classes,
            "shape": [cfg.shape.c, cfg.shape.h, cfg.shape.w],
            "train": cfg.train,
            "test": cfg.test,
            "seed": cfg.seed,
            "separation": cfg.separation,
        })
    );
    Ok(())
}

fn history_table(h: &History) -> String {
    let mut s = format!("{:<6} {:>5} {:>10} {:>9} {:>10} {:>9} {:>10} {:>8}\n", "phase", "epoch", "train_loss", "train_acc", "test_loss", "test_acc", "lr", "clipped");
    for r in &h.records {
        let phase = if r.phase == Phase::Step1 { "step1" } else { "step2" };
        let _ = writeln!(
            s,
            "{phase:<6} {:>5} {:>10.5} {:>9.4} {:>10.5} {:>9.4} {:>10.2e} {:>8}",
            r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc, r.lr, r.clipped_rows
        );
    }
    s
}

fn train(a: TrainArgs) -> Outcome {
    let s = Settings::load(
        a.config.as_deref(),
        vec![
            ("spec", a.spec),
            ("data", a.data),
            ("phase", a.phase),
            ("epochs", opt(&a.epochs)),
            ("batch_size", opt(&a.batch_size)),
            ("lr", opt(&a.lr)),
            ("weight_decay", opt(&a.weight_decay)),
            ("agc_lambda", opt(&a.agc_lambda)),
            ("agc_exclude_head", switch(a.agc_exclude_head)),
            ("seed", opt(&a.seed)),
            ("loss", a.loss),
            ("teacher", a.teacher.map(|p| p.display().to_string())),
            ("activation", a.activation),
            ("alpha_exp", opt(&a.alpha_exp)),
            ("init_checkpoint", a.init_checkpoint.map(|p| p.display().to_string())),
            ("step1_checkpoint", a.step1_checkpoint.map(|p| p.display().to_string())),
            ("checkpoint", a.checkpoint.map(|p| p.display().to_string())),
            ("metrics_log", a.metrics_log.map(|p| p.display().to_string())),
            ("train", opt(&a.train)),
            ("test", opt(&a.test)),
            ("separation", opt(&a.separation)),
            ("data_seed", opt(&a.data_seed)),
        ],
    )?;
    let spec = load_spec(s.require("spec")?)?;

    let checkpoint_out = PathBuf::from(s.str("checkpoint").unwrap_or("model.abck"));
    let metrics = s
        .str("metrics_log")
        .map(PathBuf::from)
        .unwrap_or_else(|| checkpoint_out.with_extension("metrics.jsonl"));
    let loss = match s.str("loss").unwrap_or("ce") {
        "ce" | "cross_entropy" => LossKind::CrossEntropy,
        "distill" => LossKind::Distill {
            teacher: PathBuf::from(s.require("teacher")?),
        },
        other => return Err(Error::Config(format!("loss must be `ce` or `distill`, got `{other}`")).into()),
    };
    let configure = |base: TrainConfig| -> abbnn::Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: s.or("epochs", base.epochs)?,
            batch_size: s.or("batch_size", base.batch_size)?,
            lr: s.or("lr", base.lr)?,
            weight_decay: s.or("weight_decay", base.weight_decay)?,
            agc_lambda: s.or("agc_lambda", base.agc_lambda)?,
            agc_exclude_head: s.flag("agc_exclude_head")?,
            seed: s.or("seed", base.seed)?,
            loss: loss.clone(),
            activation: s.str("activation").map(ActKind::parse).transpose()?,
            alpha_exp: s.get("alpha_exp")?,
            init_checkpoint: s.str("init_checkpoint").map(PathBuf::from),
            metrics_log: Some(metrics.clone()),
            ..base
        })
    };
    let phase = s.str("phase").unwrap_or("both");
    let (cfg1, cfg2) = (configure(TrainConfig::step1())?, configure(TrainConfig::step2())?);
    if !matches!(phase, "both" | "step1" | "step2") {
        return Err(Error::Config(format!("phase must be both, step1 or step2, got `{phase}`")).into());
    }
    if phase != "step2" {
        cfg1.validate(false)?;
    }
    if phase != "step1" {
        cfg2.validate(phase == "both")?;
    }

    let data = match s.str("data").unwrap_or("synth") {
        "synth" => {
            let d = SynthConfig::default();
            SynthConfig {
                classes: spec.num_classes(),
                shape: spec.input,
                train: s.or("train", d.train)?,
                test: s.or("test", d.test)?,
                seed: s.or("data_seed", d.seed)?,
                separation: s.or("separation", d.separation)?,
            }
            .generate()?
        }
        dir => Split::load_dir(dir)?,
    };

    // a rerun must not append to an old log
    write_file(&metrics, "")?;
    let (state, history) = match phase {
        "both" => {
            let cfg1 = TrainConfig {
                checkpoint_out: s.str("step1_checkpoint").map(PathBuf::from),
                ..cfg1
            };
            let cfg2 = TrainConfig {
                checkpoint_out: Some(checkpoint_out.clone()),
                init_checkpoint: None,
                ..cfg2
            };
            trainer::run_two_step(&spec, &data, &cfg1, &cfg2)?
        }
        _ => {
            let cfg = if phase == "step1" { cfg1 } else { cfg2 };
            let graph = cfg.apply_to(&spec)?;
            let mut state = match &cfg.init_checkpoint {
                Some(p) if cfg.phase == Phase::Step2 => trainer::warm_start(&checkpoint::load_checkpoint_for(p, &graph)?, &graph)?,
                _ => TrainState::init(&graph, cfg.seed)?,
            };
            let teacher = match &cfg.loss {
                LossKind::Distill { teacher } => Some(Teacher::load(teacher)?),
                LossKind::CrossEntropy => None,
            };
            let h = trainer::train_phase(&mut state, &data, &cfg, teacher.as_ref())?;
            checkpoint::save_checkpoint(&state, &checkpoint_out)?;
            (state, h)
        }
    };
    print!("{}", history_table(&history));
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": checkpoint_out.display().to_string(),
            "metrics_log": metrics.display().to_string(),
            "phase": if state.phase == Phase::Step1 { "step1" } else { "step2" },
            "final_test_acc": history.records.last().map(|r| r.test_acc),
        })
    );
    Ok(())
}

fn export(a: ExportArgs) -> Outcome {
    let s = Settings::load(
        a.config.as_deref(),
        vec![
            ("checkpoint", a.checkpoint.map(|p| p.display().to_string())),
            ("spec", a.spec),
            ("out", a.out.map(|p| p.display().to_string())),
            ("frac_bits", opt(&a.frac_bits)),
        ],
    )?;
    let state = checkpoint::load_checkpoint(s.require("checkpoint")?)?;
    let spec = match s.str("spec") {
        Some(p) => {
            let spec = load_spec(p)?;
            state.check_against(&spec)?;
            spec
        }
        None => state.spec.clone(),
    };
    let out = PathBuf::from(s.str("out").unwrap_or("model.abnn"));
    let model = exporter::fold(&state, &spec, s.or("frac_bits", 16)?)?;
    exporter::write_abnn(&model, &out)?;
    let bytes = std::fs::metadata(&out).map_err(|e| Error::io(&out, e))?.len();
    println!(
        "{}",
        serde_json::json!({
            "out": out.display().to_string(),
            "bytes": bytes,
            "frac_bits": model.frac_bits,
            "layers": model.layers.len(),
            "blocks": model.blocks().count(),
            "classes": model.num_classes(),
        })
    );
    Ok(())
}

fn infer(a: InferArgs) -> Outcome {
    let s = Settings::load(
        a.config.as_deref(),
        vec![
            ("model", a.model.map(|p| p.display().to_string())),
            ("input", a.input.map(|p| p.display().to_string())),
            ("top_k", opt(&a.top_k)),
            ("strict", switch(a.strict)),
            ("counters_out", a.counters_out.map(|p| p.display().to_string())),
        ],
    )?;
    let model = exporter::read_abnn(s.require("model")?)?;
    let inputs = engine::load_inputs(&model, s.require("input")?)?;
    let k: usize = s.or("top_k", 5)?;
    let strict = s.flag("strict")?;
    let (mut total, mut non_boundary) = (OpCounters::default(), OpCounters::default());
    let mut out = std::io::stdout().lock();
    for (i, x) in inputs.iter().enumerate() {
        let inf = engine::infer(&model, x, strict)?;
        total = total.plus(&inf.counters);
        non_boundary = non_boundary.plus(&inf.non_boundary());
        let top: Vec<_> = inf.top_k(k).into_iter().map(|(c, v)| serde_json::json!({"class": c, "logit": v})).collect();
        let _ = writeln!(out, "{}", serde_json::json!({"input": i, "top_k": top}));
    }
    let _ = writeln!(out, "inputs: {}", inputs.len());
    let _ = writeln!(out, "multiplications: {}", total.multiplications);
    let _ = writeln!(out, "non-boundary multiplications: {}", non_boundary.multiplications);
    let _ = writeln!(
        out,
        "additions: {}\nshifts: {}\nxnor_popcounts: {}\ncomparisons: {}\nsaturations: {}",
        total.additions, total.shifts, total.xnor_popcounts, total.comparisons, total.saturations
    );
    if let Some(p) = s.str("counters_out") {
        let rec = serde_json::json!({"inputs": inputs.len(), "strict": strict, "counters": total, "non_boundary": non_boundary});
        write_file(Path::new(p), &format!("{rec}\n"))?;
    }
    if non_boundary.multiplications != 0 || (strict && total.multiplications != 0) {
        return Err(Failure::Invariant(format!("{} multiplications outside the boundary layers", non_boundary.multiplications)));
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Outcome {
    let s = Settings::load(
        a.config.as_deref(),
        vec![
            ("model", a.model.map(|p| p.display().to_string())),
            ("checkpoint", a.checkpoint.map(|p| p.display().to_string())),
            ("spec", a.spec),
            ("probes", opt(&a.probes)),
            ("seed", opt(&a.seed)),
            ("strict", switch(a.strict)),
            ("report_out", a.report_out.map(|p| p.display().to_string())),
        ],
    )?;
    let model = exporter::read_abnn(s.require("model")?)?;
    let state = checkpoint::load_checkpoint(s.require("checkpoint")?)?;
    let spec = match s.str("spec") {
        Some(p) => load_spec(p)?,
        None => state.spec.clone(),
    };
    let rep = engine::verify(&model, &state, &spec, s.or("probes", 100)?, s.or("seed", trainer::DEFAULT_SEED)?, s.flag("strict")?)?;
    print!("{}", rep.table());
    println!("{}", rep.to_json());
    if let Some(p) = s.str("report_out") {
        write_file(Path::new(p), &format!("{}\n", rep.to_json()))?;
    }
    let mut bad = Vec::new();
    if rep.diverged {
        bad.push("logits diverged".to_string());
    }
    if rep.non_boundary_multiplications != 0 {
        bad.push(format!("{} non-boundary multiplications", rep.non_boundary_multiplications));
    }
    if let Some(agree) = rep.sign_agreement.filter(|&v| v < MIN_SIGN_AGREEMENT) {
        bad.push(format!("sign agreement {:.4}% below {:.1}%", 100.0 * agree, 100.0 * MIN_SIGN_AGREEMENT));
    }
    if !bad.is_empty() {
        return Err(Failure::Invariant(bad.join("; ")));
    }
    Ok(())
}

fn audit(a: AuditArgs) -> Outcome {
    let s = Settings::load(
        a.config.as_deref(),
        vec![
            ("spec", a.spec),
            ("hw", a.hw),
            ("variant", a.variant),
            ("format", a.format),
            ("report_out", a.report_out.map(|p| p.display().to_string())),
        ],
    )?;
    let spec = load_spec(s.require("spec")?)?;
    let hw = match s.str("hw") {
        None => None,
        Some(v) => {
            let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| Error::Config(format!("hw must be N or HxW, got `{v}`")));
            Some(match v.split_once('x') {
                Some((h, w)) => (parse(h)?, parse(w)?),
                None => (parse(v)?, parse(v)?),
            })
        }
    };
    let report = opaudit::audit_graph(&spec, Variant::parse(s.str("variant").unwrap_or("bnfree"))?, hw)?;
    match s.str("format").unwrap_or("table") {
        "table" => print!("{}", report.table()),
        "jsonl" => print!("{}", report.to_jsonl()),
        other => return Err(Error::Config(format!("format must be table or jsonl, got `{other}`")).into()),
    }
    if let Some(p) = s.str("report_out") {
        write_file(Path::new(p), &report.to_jsonl())?;
    }
    Ok(())
}
