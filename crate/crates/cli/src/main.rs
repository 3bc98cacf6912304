use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};
use ulmfit::engine::{self, Checkpoint, RunMetrics, Stage, StageConfig};
use ulmfit::finetune::LrSchedule;
use ulmfit::harness::{self, AblationSpec, LowShotMode, LowShotSpec, Variant};
use ulmfit::synth::{self, SynthSpec};
use ulmfit::text::{self, LabeledDoc};

#[derive(Parser, Debug)]
#[command(name = "ulmfit", version, about = "Language-model fine-tuning for text classification")]
struct Cli {
    /// Directory holding corpus.txt, train.tsv, val.tsv and default outputs.
    #[arg(long, global = true, env = "ULMFIT_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus and review dataset into the data directory.
    GenData(GenDataArgs),
    /// Train a language model on a general-domain corpus.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained language model to target-task text.
    FinetuneLm(FinetuneLmArgs),
    /// Train a classifier on top of a language model.
    FinetuneClf(FinetuneClfArgs),
    /// Score a classifier checkpoint on labeled data.
    Eval(EvalArgs),
    /// Run a grid of fine-tuning variants over seeds.
    Ablate(AblateArgs),
    /// Error as a function of the number of labeled examples.
    Lowshot(LowshotArgs),
    /// Print the learning rate at every iteration of a schedule.
    DumpSchedule(DumpScheduleArgs),
}

/// Flags shared by the training stages. They override `--config`.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// JSON file with stage-config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    bptt: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = SynthSpec::default().corpus_chars)]
    corpus_chars: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_train)]
    n_train: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_val)]
    n_val: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Plain-text corpus [default: <data-dir>/corpus.txt].
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint to write [default: <data-dir>/lm.ulmf].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// forward or backward.
    #[arg(long)]
    direction: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct FinetuneLmArgs {
    /// Pretrained checkpoint [default: <data-dir>/lm.ulmf].
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Task text; a .tsv file contributes its text column [default: <data-dir>/train.tsv].
    #[arg(long)]
    text: Option<PathBuf>,
    /// [default: <data-dir>/lm_ft.ulmf]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct FinetuneClfArgs {
    /// Language-model checkpoint [default: <data-dir>/lm_ft.ulmf].
    #[arg(long)]
    lm: Option<PathBuf>,
    /// [default: <data-dir>/train.tsv]
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// [default: <data-dir>/val.tsv]
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// [default: <data-dir>/clf.ulmf]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Apply the adjustments of a named fine-tuning variant.
    #[arg(long)]
    variant: Option<Variant>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Classifier checkpoint [default: <data-dir>/clf.ulmf].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Second classifier whose probabilities are averaged in.
    #[arg(long)]
    ensemble_with: Option<PathBuf>,
    /// [default: <data-dir>/val.tsv]
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    chunk_len: usize,
    /// Write the metrics row here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// [default: <data-dir>/lm_ft.ulmf]
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Labeled data, split internally [default: <data-dir>/train.tsv].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated variant names; all of them when omitted.
    #[arg(long)]
    variants: Option<String>,
    /// Number of seeds, run as 1..=N.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// Grid CSV to write instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct LowshotArgs {
    /// Pretrained (not yet fine-tuned) checkpoint [default: <data-dir>/lm.ulmf].
    #[arg(long)]
    lm: Option<PathBuf>,
    /// [default: <data-dir>/train.tsv]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated training-set sizes.
    #[arg(long, default_value = "100")]
    budgets: String,
    /// Comma-separated: supervised, semi_supervised.
    #[arg(long, default_value = "supervised,semi_supervised")]
    modes: String,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// JSON file with language-model fine-tuning fields.
    #[arg(long)]
    lm_config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Classifier flags.
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct DumpScheduleArgs {
    /// Total iterations.
    #[arg(long = "T")]
    total: usize,
    /// stlr, cosine or constant.
    #[arg(long, default_value = "stlr")]
    kind: String,
    #[arg(long, default_value_t = 0.1)]
    cut_frac: f64,
    #[arg(long, default_value_t = 32.0)]
    ratio: f64,
    #[arg(long, default_value_t = 0.01)]
    eta_max: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let dir = cli.data_dir;
    let or_default = |p: Option<PathBuf>, name: &str| p.unwrap_or_else(|| dir.join(name));
    match cli.command {
        Command::GenData(a) => {
            let spec = SynthSpec {
                corpus_chars: a.corpus_chars,
                n_train: a.n_train,
                n_val: a.n_val,
                seed: a.seed,
            };
            let files = synth::write_dataset(&dir, spec).with_context(|| format!("writing {}", dir.display()))?;
            println!("{}", files.corpus.display());
            println!("{}", files.train.display());
            println!("{}", files.val.display());
        }
        Command::Pretrain(a) => {
            let mut extra = Map::new();
            if let Some(d) = a.direction {
                extra.insert("direction".into(), json!(d));
            }
            let cfg = stage_config(Stage::Pretrain, &a.train, extra)?;
            let corpus_path = or_default(a.corpus, "corpus.txt");
            let corpus = text::read_lm_corpus(&corpus_path)?;
            let (ckpt, metrics) = engine::run_pretrain(&cfg, &corpus)?;
            finish(&ckpt, &metrics, &or_default(a.out, "lm.ulmf"), a.metrics.as_deref())?;
        }
        Command::FinetuneLm(a) => {
            let cfg = stage_config(Stage::LmFinetune, &a.train, Map::new())?;
            let lm = load(&or_default(a.lm, "lm.ulmf"))?;
            let task_text = read_task_text(&or_default(a.text, "train.tsv"))?;
            let (ckpt, metrics) = engine::run_lm_finetune(&cfg, &lm, &task_text)?;
            finish(&ckpt, &metrics, &or_default(a.out, "lm_ft.ulmf"), a.metrics.as_deref())?;
        }
        Command::FinetuneClf(a) => {
            let mut cfg = stage_config(Stage::ClfFinetune, &a.train, Map::new())?;
            if let Some(v) = a.variant {
                if !v.pretrained() {
                    bail!("variant {v} trains from scratch; use ablate for it");
                }
                cfg = v.configure(&cfg);
            }
            let lm = load(&or_default(a.lm, "lm_ft.ulmf"))?;
            let train = read_labeled(&or_default(a.train_data, "train.tsv"))?;
            let val = read_labeled(&or_default(a.val_data, "val.tsv"))?;
            let (ckpt, metrics) = engine::run_clf_finetune(&cfg, &lm, &train, &val)?;
            finish(&ckpt, &metrics, &or_default(a.out, "clf.ulmf"), a.metrics.as_deref())?;
        }
        Command::Eval(a) => {
            let model = load(&or_default(a.model, "clf.ulmf"))?;
            let other = a.ensemble_with.as_deref().map(load).transpose()?;
            let data = read_labeled(&or_default(a.data, "val.tsv"))?;
            let row = engine::evaluate(&model, &data, other.as_ref(), a.batch_size, a.chunk_len)?;
            emit(&RunMetrics { rows: vec![row] }.to_csv(), a.out.as_deref())?;
        }
        Command::Ablate(a) => {
            let variants = match &a.variants {
                Some(list) => Variant::parse_list(list)?,
                None => Variant::ALL.to_vec(),
            };
            let mut spec = AblationSpec::new(variants, seed_range(a.seeds)?);
            spec.config = stage_config(Stage::ClfFinetune, &a.train, Map::new())?;
            spec.jobs = jobs(a.jobs)?;
            spec.train_limit = a.train_limit;
            spec.val_frac = a.val_frac;
            let lm = load(&or_default(a.lm, "lm_ft.ulmf"))?;
            let data = read_labeled(&or_default(a.data, "train.tsv"))?;
            let grid = harness::run_ablation(&spec, &lm, &data)?;
            for v in &spec.variants {
                if let Some(m) = grid.median(*v) {
                    log::info!("{v}: median val_error {m:.4}");
                }
            }
            emit(&grid.to_csv(), a.out.as_deref())?;
        }
        Command::Lowshot(a) => {
            let budgets = a
                .budgets
                .split(',')
                .map(|b| b.trim().parse::<usize>().with_context(|| format!("bad budget {b:?}")))
                .collect::<Result<Vec<_>>>()?;
            let modes = a
                .modes
                .split(',')
                .map(|m| m.trim().parse::<LowShotMode>())
                .collect::<Result<Vec<_>, _>>()?;
            let mut spec = LowShotSpec::new(budgets, modes, seed_range(a.seeds)?);
            spec.clf_config = stage_config(Stage::ClfFinetune, &a.train, Map::new())?;
            let lm_overrides = match &a.lm_config {
                Some(p) => read_json(p)?,
                None => json!({}),
            };
            spec.lm_config = StageConfig::from_json(Stage::LmFinetune, &lm_overrides)?;
            spec.jobs = jobs(a.jobs)?;
            spec.val_frac = a.val_frac;
            let lm = load(&or_default(a.lm, "lm.ulmf"))?;
            let data = read_labeled(&or_default(a.data, "train.tsv"))?;
            let curve = harness::run_lowshot(&spec, &lm, &data)?;
            emit(&curve.to_csv(), a.out.as_deref())?;
        }
        Command::DumpSchedule(a) => {
            let schedule = match a.kind.as_str() {
                "stlr" => LrSchedule::Stlr {
                    cut_frac: a.cut_frac,
                    ratio: a.ratio,
                },
                "cosine" => LrSchedule::cosine(),
                "constant" => LrSchedule::Constant,
                other => bail!("unknown schedule kind {other:?} (expected stlr, cosine or constant)"),
            };
            let rows = harness::schedule_curve(schedule, a.total, a.eta_max)?;
            emit(&harness::schedule_csv(&rows), a.out.as_deref())?;
        }
    }
    Ok(())
}

/// The error chain on one line, skipping causes a parent already quotes.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg.replace('\n', " ")
}

/// Stage defaults, then the `--config` file, then explicit flags.
fn stage_config(stage: Stage, flags: &TrainFlags, extra: Map<String, Value>) -> Result<StageConfig> {
    let mut overrides = match &flags.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let Some(obj) = overrides.as_object_mut() else {
        bail!("config must be a JSON object");
    };
    let mut set = |k: &str, v: Value| {
        obj.insert(k.into(), v);
    };
    if let Some(v) = flags.epochs {
        set("epochs", json!(v));
    }
    if let Some(v) = flags.batch_size {
        set("batch_size", json!(v));
    }
    if let Some(v) = flags.bptt {
        set("bptt", json!(v));
    }
    if let Some(v) = flags.lr {
        set("base_lr", json!(v));
    }
    if let Some(v) = flags.seed {
        set("seed", json!(v));
    }
    obj.extend(extra);
    Ok(StageConfig::from_json(stage, &overrides)?)
}

fn read_json(path: &Path) -> Result<Value> {
    let body = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
}

fn load(path: &Path) -> Result<Checkpoint> {
    match Checkpoint::load(path) {
        Err(e @ engine::EngineError::Io { .. }) => Err(e.into()),
        r => r.with_context(|| format!("loading {}", path.display())),
    }
}

fn read_labeled(path: &Path) -> Result<Vec<LabeledDoc>> {
    Ok(text::read_labeled(path)?)
}

fn read_task_text(path: &Path) -> Result<String> {
    if path.extension().is_some_and(|e| e == "tsv") {
        Ok(read_labeled(path)?.iter().map(|d| format!("{}\n", d.text)).collect())
    } else {
        Ok(text::read_lm_corpus(path)?)
    }
}

fn finish(ckpt: &Checkpoint, metrics: &RunMetrics, out: &Path, metrics_out: Option<&Path>) -> Result<()> {
    ckpt.save(out)?;
    log::info!("wrote {}", out.display());
    match metrics_out {
        Some(p) => metrics.write_csv(p)?,
        None => print!("{}", metrics.to_csv()),
    }
    Ok(())
}

fn emit(body: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn seed_range(n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        bail!("--seeds must be at least 1");
    }
    Ok((1..=n).collect())
}

fn jobs(n: usize) -> Result<usize> {
    if n == 0 {
        bail!("--jobs must be at least 1");
    }
    Ok(n)
}
