//! Command-line front end: train or harden ranking models, mount the
//! attack sweep / transfer / universal / ξ-search experiments against
//! their checkpoints, and render result tables.
//!
//! Every experiment parameter can come from a TOML config file
//! (`--config`); explicit flags override config keys, which override
//! built-in defaults. Exit codes: 0 on success, 2 when a result table
//! contains ERR cells (partial results are still written), 1 on hard
//! errors.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use advrank::attack::AttackKind;
use advrank::data::Dataset;
use advrank::defense::{harden, DefenseConfig, DefenseVariant};
use advrank::harness::{
    emit_report, parse_csv, run_attack_sweep, run_transfer, run_universal, run_xi_search,
    with_jobs, FileConfig, ResultTable, SweepPlan,
};
use advrank::metrics::{recall_at_1, Metric};
use advrank::model::{train, Architecture, EmbeddingModel, LossKind, TrainConfig};

#[derive(Parser)]
#[command(
    name = "advrank",
    version,
    about = "Adversarial ranking attacks and defenses for embedding models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an embedding model and write its checkpoint
    Train(TrainCmd),
    /// Adversarially train a model (shift-replace or trip-es) and write
    /// its checkpoint
    Defend(DefendCmd),
    /// Run the attack sweep grid (models x kinds x epsilons x w/m)
    Attack(AttackCmd),
    /// Craft attacks on each model and evaluate them on every model
    Transfer(TransferCmd),
    /// Optimize one shared perturbation and score it on seen and unseen
    /// targets
    Universal(UniversalCmd),
    /// Sweep the semantics-preserving weight for the query attacks
    XiSearch(XiSearchCmd),
    /// Render a results CSV as a table (exit 2 if it has ERR cells)
    Report(ReportCmd),
}

/// Flags shared by every subcommand. All optional: unset flags fall back
/// to the config file, then to built-in defaults.
#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// TOML config file; explicit flags override its keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every derived random stream
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation corpus size, taken from the head of the test split
    #[arg(long)]
    corpus_size: Option<usize>,
    /// Worker threads for cell fan-out (0 = one per core)
    #[arg(long)]
    jobs: Option<usize>,
    /// Directory holding IDX train/test splits
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output path (checkpoint for train/defend, CSV otherwise)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Settings after merging flags over config over defaults.
struct Resolved {
    config: FileConfig,
    seed: u64,
    corpus_size: usize,
    jobs: usize,
    data_dir: PathBuf,
    out: Option<PathBuf>,
}

impl Resolved {
    fn new(common: &CommonOpts) -> Result<Resolved, Box<dyn Error>> {
        let config = match &common.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        Ok(Resolved {
            seed: common.seed.or(config.seed).unwrap_or(0),
            corpus_size: common.corpus_size.or(config.corpus_size).unwrap_or(2000),
            jobs: common.jobs.or(config.jobs).unwrap_or(0),
            data_dir: common
                .data_dir
                .clone()
                .or(config.data_dir.clone())
                .unwrap_or_else(|| PathBuf::from("data/digits28")),
            out: common.out.clone().or(config.out.clone()),
            config,
        })
    }

    fn out_required(&self, what: &str) -> Result<&Path, Box<dyn Error>> {
        self.out.as_deref().ok_or_else(|| format!("--out is required to write the {what}").into())
    }

    fn corpus(&self) -> Result<Dataset, Box<dyn Error>> {
        let test = Dataset::load_dir(&self.data_dir, "test")?;
        Ok(test.take(self.corpus_size))
    }

    fn trials(&self, flag: Option<usize>) -> usize {
        flag.or(self.config.trials).unwrap_or(200)
    }

    fn model_paths(&self, flag: &[PathBuf]) -> Result<Vec<PathBuf>, Box<dyn Error>> {
        let paths: Vec<PathBuf> = if flag.is_empty() {
            self.config.models.clone().unwrap_or_default()
        } else {
            flag.to_vec()
        };
        if paths.is_empty() {
            return Err("no model checkpoints given (--models or config `models`)".into());
        }
        Ok(paths)
    }
}

/// Checkpoint name shown in tables: the file stem.
fn model_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| {
        path.display().to_string()
    })
}

fn parse_kinds(names: &[String]) -> Result<Vec<AttackKind>, Box<dyn Error>> {
    names.iter().map(|n| AttackKind::from_str(n).map_err(Into::into)).collect()
}

// ── train / defend ──────────────────────────────────────────────────────

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Triplet,
    Contrastive,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    ShiftReplace,
    TripEs,
}

#[derive(Args)]
struct TrainOpts {
    /// `baseline`, `alternate`, or custom `name:784,256,32`
    #[arg(long, default_value = "baseline")]
    arch: String,
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
    metric: MetricArg,
    #[arg(long, value_enum, default_value_t = LossArg::Triplet)]
    loss: LossArg,
    /// Hinge margin; defaults to the metric's standard margin
    #[arg(long)]
    margin: Option<f32>,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    /// Triplets (or pairs) per SGD step
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    /// Cap on training items (0 = the whole train split)
    #[arg(long, default_value_t = 0)]
    train_size: usize,
}

impl TrainOpts {
    fn architecture(&self) -> Result<Architecture, Box<dyn Error>> {
        if let Some(arch) = Architecture::by_name(&self.arch) {
            return Ok(arch);
        }
        let (name, dims) = self
            .arch
            .split_once(':')
            .ok_or_else(|| format!("unknown architecture `{}`; use baseline, alternate, or name:784,256,32", self.arch))?;
        let dims: Vec<usize> = dims
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bad layer width in `{}`: {e}", self.arch))?;
        if dims.len() < 2 {
            return Err(format!("architecture `{}` needs at least input and output widths", self.arch).into());
        }
        Ok(Architecture::mlp(name, &dims))
    }

    fn train_config(&self, seed: u64) -> Result<TrainConfig, Box<dyn Error>> {
        let metric = Metric::from(self.metric);
        let mut cfg = TrainConfig::new(self.architecture()?, metric);
        cfg.loss = match (self.loss, self.margin) {
            (LossArg::Triplet, None) => LossKind::triplet_for(metric),
            (LossArg::Triplet, Some(margin)) => LossKind::Triplet { margin },
            (LossArg::Contrastive, None) => LossKind::contrastive(),
            (LossArg::Contrastive, Some(margin)) => LossKind::Contrastive { margin },
        };
        cfg.epochs = self.epochs;
        cfg.batch = self.batch;
        cfg.lr = self.lr;
        cfg.seed = seed;
        Ok(cfg)
    }

    fn train_data(&self, resolved: &Resolved) -> Result<Dataset, Box<dyn Error>> {
        let data = Dataset::load_dir(&resolved.data_dir, "train")?;
        Ok(if self.train_size > 0 { data.take(self.train_size) } else { data })
    }
}

/// Index the evaluation corpus with labels and report clean retrieval.
fn report_recall(model: &EmbeddingModel, resolved: &Resolved) -> Result<(), Box<dyn Error>> {
    let corpus = resolved.corpus()?;
    let index = model.index(&corpus.images, Some(corpus.labels.clone()))?;
    println!("recall@1 on {} corpus items: {:.4}", corpus.len(), recall_at_1(&index)?);
    Ok(())
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    train: TrainOpts,
}

fn cmd_train(cmd: &TrainCmd) -> Result<ExitCode, Box<dyn Error>> {
    let resolved = Resolved::new(&cmd.common)?;
    let out = resolved.out_required("checkpoint")?.to_path_buf();
    let data = cmd.train.train_data(&resolved)?;
    let cfg = cmd.train.train_config(resolved.seed)?;
    println!("training `{}` on {} items...", cfg.arch.name, data.len());
    let (model, history) = train(&data, &cfg)?;
    for (epoch, loss) in history.epoch_loss.iter().enumerate() {
        println!("epoch {epoch}: mean loss {loss:.4}");
    }
    model.save(&out)?;
    println!("wrote {}", out.display());
    report_recall(&model, &resolved)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct DefendCmd {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Perturbation budget of the inner maximum-shift attack (0 degrades
    /// to vanilla training)
    #[arg(long, default_value_t = 0.3)]
    inner_epsilon: f32,
    #[arg(long, value_enum, default_value_t = VariantArg::ShiftReplace)]
    variant: VariantArg,
    /// Penalty weight for the trip-es variant
    #[arg(long, default_value_t = 1.0)]
    trip_es_weight: f32,
    /// Fine-tune an existing checkpoint (matching architecture and
    /// metric) instead of training from scratch
    #[arg(long)]
    from: Option<PathBuf>,
}

fn cmd_defend(cmd: &DefendCmd) -> Result<ExitCode, Box<dyn Error>> {
    let resolved = Resolved::new(&cmd.common)?;
    let out = resolved.out_required("checkpoint")?.to_path_buf();
    let data = cmd.train.train_data(&resolved)?;
    let mut cfg = DefenseConfig::new(cmd.train.train_config(resolved.seed)?);
    cfg.inner = advrank::attack::Budget::from_epsilon(cmd.inner_epsilon);
    cfg.variant = match cmd.variant {
        VariantArg::ShiftReplace => DefenseVariant::ShiftReplace,
        VariantArg::TripEs => DefenseVariant::TripEs,
    };
    cfg.trip_es_weight = cmd.trip_es_weight;
    println!(
        "hardening `{}` on {} items (inner epsilon {})...",
        cfg.base.arch.name,
        data.len(),
        cmd.inner_epsilon
    );
    let (model, history) = match &cmd.from {
        Some(path) => {
            println!("fine-tuning from {}", path.display());
            advrank::defense::harden_from(&EmbeddingModel::load(path)?, &data, &cfg)?
        }
        None => harden(&data, &cfg)?,
    };
    for (epoch, loss) in history.epoch_loss.iter().enumerate() {
        println!("epoch {epoch}: mean loss {loss:.4}");
    }
    if history.skipped > 0 {
        eprintln!("note: {} triplets skipped after inner-attack failures", history.skipped);
    }
    model.save(&out)?;
    println!("wrote {}", out.display());
    report_recall(&model, &resolved)?;
    Ok(ExitCode::SUCCESS)
}

// ── experiment commands ─────────────────────────────────────────────────

/// Load checkpoints as (stem, bytes): the Send form that crosses into the
/// worker pool, revived per use.
fn load_frozen(paths: &[PathBuf]) -> Result<Vec<(String, Vec<u8>)>, Box<dyn Error>> {
    paths
        .iter()
        .map(|p| {
            let model = EmbeddingModel::load(p)?; // validates the file now
            Ok((model_name(p), model.to_bytes()))
        })
        .collect()
}

fn revive(frozen: &[(String, Vec<u8>)]) -> Result<Vec<(String, EmbeddingModel)>, Box<dyn Error>> {
    frozen
        .iter()
        .map(|(n, b)| Ok((n.clone(), EmbeddingModel::from_bytes(b)?)))
        .collect()
}

/// Print the table, write it if requested, and map ERR cells to exit 2.
fn finish_table(table: &ResultTable, out: Option<&Path>) -> Result<ExitCode, Box<dyn Error>> {
    print!("{}", table.to_text());
    if let Some(path) = out {
        emit_report(table, path)?;
        println!("wrote {}", path.display());
    }
    if table.has_errors() {
        eprintln!("some cells failed (ERR)");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct AttackCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// Model checkpoints; table names come from the file stems
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    /// Attack kinds (CA+, CA-, QA+, QA-, MaxShift, DistAlt-CA+, DistAlt-QA-)
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Vec<f32>,
    /// Counterpart counts: queries per candidate attack, candidates per
    /// query attack
    #[arg(long, value_delimiter = ',')]
    wm: Vec<usize>,
    /// Attacked items per cell
    #[arg(long)]
    trials: Option<usize>,
}

fn cmd_attack(cmd: &AttackCmd) -> Result<ExitCode, Box<dyn Error>> {
    let resolved = Resolved::new(&cmd.common)?;
    let frozen = load_frozen(&resolved.model_paths(&cmd.models)?)?;
    let corpus = resolved.corpus()?;
    let mut plan = SweepPlan { seed: resolved.seed, ..SweepPlan::default() };
    plan.trials = resolved.trials(cmd.trials);
    let kind_names = if cmd.kinds.is_empty() {
        resolved.config.kinds.clone().unwrap_or_default()
    } else {
        cmd.kinds.clone()
    };
    if !kind_names.is_empty() {
        plan.kinds = parse_kinds(&kind_names)?;
    }
    if let Some(eps) = none_if_empty(&cmd.epsilons).or(resolved.config.epsilons.as_deref()) {
        plan.epsilons = eps.to_vec();
    }
    if let Some(wm) = none_if_empty(&cmd.wm).or(resolved.config.wm.as_deref()) {
        plan.wm = wm.to_vec();
    }
    let table = with_jobs(resolved.jobs, || {
        revive(&frozen).map_err(|e| e.to_string()).and_then(|models| {
            run_attack_sweep(&models, &corpus, &plan).map_err(|e| e.to_string())
        })
    })??;
    finish_table(&table, resolved.out.as_deref())
}

fn none_if_empty<T>(v: &[T]) -> Option<&[T]> {
    (!v.is_empty()).then_some(v)
}

#[derive(Args)]
struct TransferCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// At least two checkpoints: every model plays source and destination
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    #[arg(long, default_value = "CA+")]
    kind: String,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f32,
    #[arg(long, default_value_t = 1)]
    wm: usize,
    #[arg(long)]
    trials: Option<usize>,
}

fn cmd_transfer(cmd: &TransferCmd) -> Result<ExitCode, Box<dyn Error>> {
    let resolved = Resolved::new(&cmd.common)?;
    let models = revive(&load_frozen(&resolved.model_paths(&cmd.models)?)?)?;
    let corpus = resolved.corpus()?;
    let kind = AttackKind::from_str(&cmd.kind)?;
    let matrix = run_transfer(
        &models,
        &corpus,
        kind,
        cmd.epsilon,
        cmd.wm,
        resolved.trials(cmd.trials),
        resolved.seed,
    )?;
    let table = ResultTable::from_rows(matrix.rows());
    finish_table(&table, resolved.out.as_deref())
}

#[derive(Args)]
struct UniversalCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// One model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// A hinge-ranked kind: CA+, CA-, QA+, or QA-
    #[arg(long, default_value = "CA+")]
    kind: String,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f32,
    #[arg(long, default_value_t = 1)]
    wm: usize,
    /// Fraction of the corpus optimized over; an equal disjoint fraction
    /// is held out
    #[arg(long, default_value_t = 0.05)]
    frac: f32,
}

fn cmd_universal(cmd: &UniversalCmd) -> Result<ExitCode, Box<dyn Error>> {
    let resolved = Resolved::new(&cmd.common)?;
    let model = EmbeddingModel::load(&cmd.model)?;
    let corpus = resolved.corpus()?;
    let kind = AttackKind::from_str(&cmd.kind)?;
    let name = model_name(&cmd.model);
    let run = run_universal(
        &name,
        &model,
        &corpus,
        kind,
        cmd.epsilon,
        cmd.wm,
        cmd.frac,
        resolved.seed,
    )?;
    println!(
        "{} targets per split; perturbation sup-norm {:.4}",
        run.seen_targets.len(),
        run.perturbation.iter().fold(0.0f32, |a, &v| a.max(v.abs()))
    );
    let table = ResultTable::from_rows(run.rows(&name));
    finish_table(&table, resolved.out.as_deref())
}

#[derive(Args)]
struct XiSearchCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// One model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Ascending semantics-preserving weights
    #[arg(long, value_delimiter = ',')]
    xi_grid: Vec<f32>,
    /// Query-side kinds to sweep
    #[arg(long, value_delimiter = ',', default_values_t = vec!["QA+".to_string(), "QA-".to_string()])]
    kinds: Vec<String>,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f32,
    #[arg(long, default_value_t = 1)]
    wm: usize,
    #[arg(long)]
    trials: Option<usize>,
}

fn cmd_xi_search(cmd: &XiSearchCmd) -> Result<ExitCode, Box<dyn Error>> {
    let resolved = Resolved::new(&cmd.common)?;
    let frozen = load_frozen(std::slice::from_ref(&cmd.model))?;
    let corpus = resolved.corpus()?;
    let kinds = parse_kinds(&cmd.kinds)?;
    let xi_grid = none_if_empty(&cmd.xi_grid)
        .or(resolved.config.xi_grid.as_deref())
        .unwrap_or(&[0.0, 1.0, 100.0, 10_000.0])
        .to_vec();
    let trials = resolved.trials(cmd.trials);
    let (name, bytes) = &frozen[0];
    let table = with_jobs(resolved.jobs, || {
        EmbeddingModel::from_bytes(bytes).map_err(|e| e.to_string()).and_then(|model| {
            run_xi_search(
                name,
                &model,
                &corpus,
                &xi_grid,
                &kinds,
                cmd.epsilon,
                cmd.wm,
                trials,
                resolved.seed,
            )
            .map_err(|e| e.to_string())
        })
    })??;
    finish_table(&table, resolved.out.as_deref())
}

#[derive(Args)]
struct ReportCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// A results CSV produced by attack/transfer/universal/xi-search
    #[arg(long)]
    input: PathBuf,
}

fn cmd_report(cmd: &ReportCmd) -> Result<ExitCode, Box<dyn Error>> {
    let resolved = Resolved::new(&cmd.common)?;
    let text = std::fs::read_to_string(&cmd.input)?;
    let rows = parse_csv(&text)?;
    let mut grid = vec![advrank::harness::CSV_HEADER
        .split(',')
        .map(str::to_string)
        .collect::<Vec<_>>()];
    grid.extend(rows.iter().cloned());
    let rendered = advrank::harness::render_table(&grid);
    print!("{rendered}");
    if let Some(path) = &resolved.out {
        std::fs::write(path, &rendered)?;
        println!("wrote {}", path.display());
    }
    if rows.iter().any(|r| r.iter().any(|f| f == "ERR")) {
        eprintln!("some cells failed (ERR)");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Defend(c) => cmd_defend(c),
        Command::Attack(c) => cmd_attack(c),
        Command::Transfer(c) => cmd_transfer(c),
        Command::Universal(c) => cmd_universal(c),
        Command::XiSearch(c) => cmd_xi_search(c),
        Command::Report(c) => cmd_report(c),
    };
    match run {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
