//! The `ohformer` command line: `synth`, `train`, `eval`, `analyze` and
//! `gradcheck`.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 output I/O, 4 input
//! data, 5 numeric failure. `--threads N` (default `OHF_THREADS`) sizes the
//! worker pool; kernels partition work identically at any thread count.

pub mod gradcheck;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{ImageSet, MANIFEST};
use crate::error::Error;
use crate::evaluation::{
    analysis_batch, analysis_heads_tsv, analysis_tsv, analyze_attention, embed_set, evaluate,
    flop_report, flops_tsv, high_order_layers, metrics_line, metrics_tsv, synth_generate,
    Direction, SynthSpec,
};
use crate::training::config::KEYS;
use crate::training::{
    load_checkpoint, restore_model, save_checkpoint, TrainConfig, TrainData, Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_OUTPUT: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "ohformer",
    version,
    about = "High-order transformer person re-identification at desk scale"
)]
struct Cli {
    /// Worker threads for parallel kernels (default: OHF_THREADS, else all cores).
    #[arg(long, global = true, env = "OHF_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic pedestrian dataset.
    Synth(SynthArgs),
    /// Train a model; any config key may also be given as `--key value`.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a query/gallery split.
    Eval(EvalArgs),
    /// Cross-order attention divergence and score-cost reports.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient checks in f64.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ids: usize,
    #[arg(long)]
    cams: usize,
    #[arg(long = "per-id")]
    per_id: usize,
    #[arg(long, default_value_t = 0.0)]
    occlude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    height: usize,
    #[arg(long, default_value_t = 30)]
    width: usize,
    /// Hold out the last N identities as query (camera 0) and gallery splits.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Image directory; a `train/` subdirectory is used when present.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    /// Directory for metrics.tsv (default: the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report one direction only; both are reported by default.
    #[arg(long)]
    direction: Option<String>,
    /// Also write analysis_heads.tsv with one matrix per head.
    #[arg(long = "per-head")]
    per_head: bool,
    /// Images in the analysis batch.
    #[arg(long, default_value_t = 8)]
    images: usize,
    /// Directory for the reports (default: the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check one operation; see --list.
    #[arg(long, conflicts_with = "full_layer")]
    op: Option<String>,
    /// Check a full 3-order layer.
    #[arg(long = "full-layer")]
    full_layer: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the known operation names.
    #[arg(long)]
    list: bool,
}

/// A failed command: exit code and message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

fn fail(code: i32, msg: impl Into<String>) -> Failure {
    Failure {
        code,
        msg: msg.into(),
    }
}

/// Exit code for an error raised while reading inputs or computing.
fn input_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Contract(_) | Error::Dimension(_) => {
            EXIT_USAGE
        }
        Error::Data(_)
        | Error::Format { .. }
        | Error::Version { .. }
        | Error::Eval(_)
        | Error::Io(_) => EXIT_DATA,
        Error::Numeric { .. } => EXIT_NUMERIC,
    }
}

fn from_input(e: Error) -> Failure {
    fail(input_code(&e), e.to_string())
}

fn from_output(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| fail(EXIT_OUTPUT, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(from_output(path))
}

/// Split `--key value` / `--key=value` pairs naming config keys out of the
/// train arguments; `--data` stays a flag.
fn extract_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let is_key = |k: &str| k != "data" && KEYS.iter().any(|(name, _)| *name == k);
    let Some(pos) = args.iter().position(|a| a == "train") else {
        return (args, Vec::new());
    };
    let mut kept: Vec<OsString> = args[..=pos].to_vec();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().skip(pos + 1).peekable();
    while let Some(a) = it.next() {
        let key = a
            .to_str()
            .and_then(|s| s.strip_prefix("--"))
            .map(str::to_string);
        match key {
            Some(k) if k.contains('=') && is_key(k.split('=').next().unwrap_or("")) => {
                let (k, v) = k.split_once('=').expect("contains =");
                overrides.push((k.to_string(), v.to_string()));
            }
            Some(k) if is_key(&k) => match it.next().and_then(|v| v.into_string().ok()) {
                Some(v) => overrides.push((k, v)),
                None => {
                    kept.push(a);
                }
            },
            _ => kept.push(a),
        }
    }
    (kept, overrides)
}

/// `dir` when it has a manifest, else its `sub/` split when that has one.
fn image_dir(dir: &Path, sub: &str) -> PathBuf {
    if !dir.join(MANIFEST).exists() && dir.join(sub).join(MANIFEST).exists() {
        dir.join(sub)
    } else {
        dir.to_path_buf()
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<String, Failure> {
    let spec = SynthSpec {
        ids: a.ids,
        cams: a.cams,
        per_id: a.per_id,
        height: a.height,
        width: a.width,
        occlude: a.occlude,
        seed: a.seed,
        holdout: a.holdout,
    };
    spec.validate().map_err(from_input)?;
    let n = synth_generate(&spec, &a.out)
        .map_err(|e| fail(EXIT_OUTPUT, format!("{}: {e}", a.out.display())))?;
    Ok(format!("generated {n} images"))
}

fn cmd_train(a: TrainArgs, overrides: &[(String, String)]) -> Result<String, Failure> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", a.config.display())))?;
    let mut cfg = TrainConfig::parse(&text).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    cfg.apply_overrides(overrides)
        .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    let data_dir = cfg
        .data
        .clone()
        .ok_or_else(|| fail(EXIT_USAGE, "no training data: pass --data or set `data`"))?;
    let data = TrainData::new(ImageSet::load(&image_dir(&data_dir, "train")).map_err(from_input)?)
        .map_err(from_input)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)
                .map_err(|e| fail(EXIT_DATA, format!("{}: {e}", path.display())))?;
            Trainer::from_checkpoint(cfg.clone(), &ckpt).map_err(from_input)?
        }
        None => Trainer::new(cfg.clone(), data.classes()).map_err(from_input)?,
    };
    if data.set.size() != trainer.model.config.input
        || data.classes() != trainer.model.config.classes
    {
        return Err(fail(
            EXIT_DATA,
            format!(
                "data has {} identities of {:?} images; the model expects {} of {:?}",
                data.classes(),
                data.set.size(),
                trainer.model.config.classes,
                trainer.model.config.input
            ),
        ));
    }

    let out = &a.out;
    fs::create_dir_all(out).map_err(from_output(out))?;
    write_file(&out.join("config.resolved"), &cfg.resolved())?;
    let log_path = out.join("log.tsv");
    let append = a.resume.is_some() && log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(from_output(&log_path))?;
    if !append {
        writeln!(
            log,
            "step\tlr\tloss_total\tloss_ce_cls\tloss_tri_cls\tloss_parts"
        )
        .map_err(from_output(&log_path))?;
    }
    let total = cfg.steps;
    let every = cfg.ckpt_every;
    let mut io_err: Option<Failure> = None;
    let result = trainer.run(&data, |t, s| {
        let line = format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.step, s.lr, s.total, s.ce_cls, s.tri_cls, s.parts
        );
        let save = t.step == total || (every > 0 && t.step % every == 0);
        let res = writeln!(log, "{line}")
            .map_err(from_output(&log_path))
            .and_then(|_| {
                if save {
                    let p = out.join(format!("ckpt-{}.ohf", t.step));
                    save_checkpoint(&p, &t.checkpoint())
                        .map_err(|e| fail(EXIT_OUTPUT, format!("{}: {e}", p.display())))
                } else {
                    Ok(())
                }
            });
        res.map_err(|f| {
            let msg = f.msg.clone();
            io_err = Some(f);
            Error::Data(msg)
        })
    });
    if let Some(f) = io_err {
        return Err(f);
    }
    match result {
        Ok(()) => Ok(format!(
            "trained to step {}; checkpoint {}",
            trainer.step,
            out.join(format!("ckpt-{}.ohf", trainer.step)).display()
        )),
        Err(e @ Error::Numeric { .. }) => Err(fail(EXIT_NUMERIC, e.to_string())),
        Err(e) => Err(from_input(e)),
    }
}

fn load_model(
    path: &Path,
) -> Result<(crate::model::Model, crate::params::ParamStore<f32>), Failure> {
    let ckpt =
        load_checkpoint(path).map_err(|e| fail(EXIT_DATA, format!("{}: {e}", path.display())))?;
    restore_model(&ckpt).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn cmd_eval(a: EvalArgs) -> Result<String, Failure> {
    let (model, store) = load_model(&a.ckpt)?;
    let query = ImageSet::load(&a.query).map_err(from_input)?;
    let gallery = ImageSet::load(&a.gallery).map_err(from_input)?;
    let q = embed_set(&model, &store, &query).map_err(from_input)?;
    let g = embed_set(&model, &store, &gallery).map_err(from_input)?;
    let r = evaluate(&q, &g).map_err(from_input)?;
    let out = a.out.unwrap_or_else(|| parent_dir(&a.ckpt));
    fs::create_dir_all(&out).map_err(from_output(&out))?;
    write_file(&out.join("metrics.tsv"), &metrics_tsv(&r))?;
    Ok(metrics_line(&r))
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<String, Failure> {
    let directions = match &a.direction {
        Some(d) => vec![d.parse::<Direction>().map_err(from_input)?],
        None => Direction::BOTH.to_vec(),
    };
    let (model, store) = load_model(&a.ckpt)?;
    if high_order_layers(&model).is_empty() {
        return Err(fail(
            EXIT_USAGE,
            "the checkpoint's stack has no layer of order 2 or higher",
        ));
    }
    if a.images == 0 {
        return Err(fail(EXIT_USAGE, "--images must be positive"));
    }
    let set = ImageSet::load(&image_dir(&a.data, "train")).map_err(from_input)?;
    if set.size() != model.config.input {
        return Err(fail(
            EXIT_DATA,
            format!(
                "images are {:?}, the model expects {:?}",
                set.size(),
                model.config.input
            ),
        ));
    }
    let reports = analyze_attention(&model, &store, &analysis_batch(&set, a.images), &directions)
        .map_err(from_input)?;
    let flops = flop_report(&model).map_err(from_input)?;
    let out = a.out.unwrap_or_else(|| parent_dir(&a.ckpt));
    fs::create_dir_all(&out).map_err(from_output(&out))?;
    write_file(&out.join("analysis.tsv"), &analysis_tsv(&reports))?;
    write_file(&out.join("flops.tsv"), &flops_tsv(&flops))?;
    if a.per_head {
        write_file(
            &out.join("analysis_heads.tsv"),
            &analysis_heads_tsv(&reports),
        )?;
    }
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.table());
    }
    for r in &flops {
        text.push_str(&format!(
            "layer {} {} score multiply-adds: {}\n",
            r.layer, r.mode, r.score_madds
        ));
    }
    Ok(text.trim_end().to_string())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<String, Failure> {
    if a.list {
        return Ok(gradcheck::OPS.join("\n"));
    }
    let mut names: Vec<String> = match (&a.op, a.full_layer) {
        (Some(op), _) => vec![op.clone()],
        (None, true) => vec![],
        (None, false) => gradcheck::OPS.iter().map(|s| s.to_string()).collect(),
    };
    if let Some(op) = &a.op {
        if !gradcheck::OPS.contains(&op.as_str()) {
            return Err(fail(EXIT_USAGE, format!("unknown op {op:?}; try --list")));
        }
    }
    let full = a.full_layer || a.op.is_none();
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for name in names.drain(..) {
        let r = gradcheck::run_op(&name, a.seed).map_err(from_input)?;
        worst = worst.max(r.max_rel_error);
        lines.push(format!("{name}\t{:.3e}", r.max_rel_error));
    }
    if full {
        let r = gradcheck::run_full_layer(a.seed).map_err(from_input)?;
        worst = worst.max(r.max_rel_error);
        lines.push(format!("full_layer\t{:.3e}", r.max_rel_error));
    }
    lines.push(format!("max relative error {worst:.3e}"));
    let text = lines.join("\n");
    if worst < gradcheck::TOLERANCE {
        Ok(text)
    } else {
        Err(fail(
            EXIT_NUMERIC,
            format!("{text}\nabove tolerance {:e}", gradcheck::TOLERANCE),
        ))
    }
}

/// Run the command line `args` (including the program name); returns the
/// process exit code. Results go to stdout, diagnostics to stderr.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let (args, overrides) = extract_overrides(args.into_iter().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_USAGE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return EXIT_USAGE;
        }
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a, &overrides),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(text) => {
            println!("{text}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    }
}
