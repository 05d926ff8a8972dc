use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dire_core::datagen::{generate_dataset, make_world, read_jsonl, validate_datapoint, Datapoint, Dataset};
use dire_core::harness::{self, error_analysis, evaluate, RunConfig, SuiteConfig};
use dire_core::training::gradcheck::{grad_check, GradCheckDims};
use dire_core::training::train;
use dire_core::{Error, Model, ModelKind};

#[derive(Parser)]
#[command(name = "dire", version, about = "Entity-library tracking models: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as train/val/test JSON lines.
    GenData(GenData),
    /// Train one model variant and save its best-validation checkpoint.
    Train(TrainCmd),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalCmd),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckCmd),
    /// Train and evaluate several variants and write the results table.
    Suite(SuiteCmd),
    /// Dump the forward trace of one datapoint as JSON.
    Inspect(InspectCmd),
}

/// Flags shared by commands that train.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// JSON config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Multimodal dimension m.
    #[arg(long)]
    dim: Option<usize>,
    /// Hidden width of the ff and rnn baselines.
    #[arg(long)]
    hidden: Option<usize>,
    /// Accumulate minibatch gradients in parallel (not bit-reproducible).
    #[arg(long)]
    nondeterministic: bool,
}

impl TrainFlags {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(v) = self.epochs {
            c.train.max_epochs = v;
        }
        if let Some(v) = self.lr {
            c.train.learning_rate = v;
        }
        if let Some(v) = self.minibatch {
            c.train.minibatch = v;
        }
        if let Some(v) = self.dropout {
            c.train.dropout = v;
        }
        if let Some(v) = self.seed {
            c.train.seed = v;
        }
        if self.patience.is_some() {
            c.train.patience = self.patience;
        }
        if let Some(v) = self.dim {
            c.multimodal_dim = v;
        }
        if let Some(v) = self.hidden {
            c.hidden = v;
        }
        if self.nondeterministic {
            c.train.deterministic = false;
        }
        c.train.validate()?;
        eprintln!("resolved config: {}", c.to_json());
        Ok(c)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Seed of the splits.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the embedding world.
    #[arg(long)]
    world_seed: Option<u64>,
    /// Keep the hidden labels (needed for error analysis).
    #[arg(long)]
    debug: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    model: ModelKind,
    /// Dataset directory with train.jsonl and val.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; `.json` selects the text format.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    ckpt: PathBuf,
    /// A .jsonl split, or a dataset directory (its test split is used).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Add the error breakdown; the data must carry debug labels.
    #[arg(long)]
    errors: bool,
}

#[derive(Args)]
struct GradCheckCmd {
    /// A model tag, or `all`.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = dire_core::models::HIDDEN_WIDTH)]
    hidden: usize,
    /// Coordinates checked per parameter block; 0 checks all.
    #[arg(long, default_value_t = 40)]
    coords: usize,
}

#[derive(Args)]
struct SuiteCmd {
    /// `all` or a comma-separated list of model tags.
    #[arg(long, default_value = "all")]
    models: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-variant checkpoints and logs.
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    /// Leave out the untrained `random` row.
    #[arg(long)]
    no_random: bool,
    /// Train variants concurrently.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct InspectCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// What went wrong, and which exit code it maps to.
enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Check(e.to_string()),
        }
    }
}

fn load_split(path: &Path) -> Result<Vec<Datapoint<f64>>, Error> {
    if path.is_dir() {
        read_jsonl(&path.join("test.jsonl"))
    } else {
        read_jsonl(path)
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn parse_models(s: &str) -> Result<Vec<ModelKind>, Error> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(ModelKind::all());
    }
    s.split(',').map(|t| t.trim().parse()).collect()
}

fn gen_data(cmd: &GenData) -> Result<(), Failure> {
    let mut c = RunConfig::load(cmd.config.as_deref())?;
    if let Some(v) = cmd.train {
        c.sizes.train = v;
    }
    if let Some(v) = cmd.val {
        c.sizes.val = v;
    }
    if let Some(v) = cmd.test {
        c.sizes.test = v;
    }
    if let Some(v) = cmd.seed {
        c.data_seed = v;
    }
    if let Some(v) = cmd.world_seed {
        c.world.seed = v;
    }
    eprintln!("resolved config: {}", c.to_json());
    let world = make_world(&c.world)?;
    let data = generate_dataset(&world, c.sizes, c.data_seed)?;
    for (name, split) in Dataset::SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
        for (i, dp) in split.iter().enumerate() {
            let problems = validate_datapoint(dp);
            if !problems.is_empty() {
                return Err(Failure::Check(format!("{name}[{i}] invalid: {}", problems.join("; "))));
            }
        }
    }
    data.write(&cmd.out, cmd.debug)?;
    std::fs::write(cmd.out.join("config.json"), c.to_json()).map_err(Error::from)?;
    eprintln!(
        "wrote {} / {} / {} datapoints to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cmd.out.display()
    );
    Ok(())
}

fn train_cmd(cmd: &TrainCmd) -> Result<(), Failure> {
    let c = cmd.flags.resolve()?;
    let tr = read_jsonl::<f64>(&cmd.data.join("train.jsonl"))?;
    let val = read_jsonl::<f64>(&cmd.data.join("val.jsonl"))?;
    let dp = tr.first().ok_or(Error::Empty("training split"))?;
    let spec = c.model_spec(cmd.model, dp.image_dim(), dp.attribute_dim(), dp.noun_dim());
    let out = train(&spec, &tr, &val, &c.train, |r| {
        eprintln!("epoch {:>3}  loss {:.4}  val {:.2}", r.epoch, r.train_loss, r.val_acc);
    })?;
    out.best.save_checkpoint(&cmd.out, c.train.seed, out.log.best_epoch)?;
    if let Some(log) = &cmd.log {
        out.log.write_csv(log)?;
    }
    println!(
        "{}: best val {:.2} at epoch {} of {}",
        cmd.model,
        out.log.best_val_acc,
        out.log.best_epoch,
        out.log.epochs.len()
    );
    Ok(())
}

fn eval_cmd(cmd: &EvalCmd) -> Result<(), Failure> {
    let model = Model::<f64>::from_checkpoint(&cmd.ckpt)?;
    let data = load_split(&cmd.data)?;
    let result = evaluate(&model, &data)?;
    println!("{}: accuracy {:.2} ({}/{})", model.kind(), result.accuracy, result.correct, result.n);
    let mut report = serde_json::json!({ "model": model.kind(), "eval": result });
    if cmd.errors {
        let a = error_analysis(&result, &data)?;
        println!(
            "wrong category {:.2}, wrong attribute {:.2}",
            a.wrong_category_rate, a.wrong_attribute_rate
        );
        report["errors"] = serde_json::to_value(a).map_err(Error::from)?;
    }
    if let Some(p) = &cmd.report {
        std::fs::write(p, serde_json::to_string_pretty(&report).map_err(Error::from)?).map_err(Error::from)?;
    }
    Ok(())
}

fn grad_check_cmd(cmd: &GradCheckCmd) -> Result<(), Failure> {
    let kinds = parse_models(&cmd.model)?;
    let dims = GradCheckDims {
        multimodal: cmd.dim,
        hidden: cmd.hidden,
        coords_per_block: (cmd.coords > 0).then_some(cmd.coords),
        ..Default::default()
    };
    let mut failed = Vec::new();
    for kind in kinds {
        let r = grad_check(kind, cmd.trials, &dims, cmd.tol, cmd.seed)?;
        println!(
            "{:<12} {}  max rel error {:.2e}",
            kind.tag(),
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error
        );
        for b in &r.blocks {
            println!("    {:<6} {:.2e}  ({} coords)", b.name, b.max_rel_error, b.checked);
        }
        if !r.passed {
            failed.push(kind.tag());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn suite_cmd(cmd: &SuiteCmd) -> Result<(), Failure> {
    let run = cmd.flags.resolve()?;
    let data = Dataset::read(&cmd.data)?;
    let cfg = SuiteConfig {
        models: parse_models(&cmd.models)?,
        include_random: !cmd.no_random,
        run,
        checkpoint_dir: cmd.ckpt_dir.clone(),
        parallel: cmd.parallel,
    };
    let rows = harness::run_suite(&cfg, &data, &|kind, r| {
        eprintln!("{:<12} epoch {:>3}  loss {:.4}  val {:.2}", kind.tag(), r.epoch, r.train_loss, r.val_acc);
    })?;
    std::fs::write(&cmd.out, harness::suite_csv(&rows)).map_err(Error::from)?;
    for r in &rows {
        let acc = |a: Option<f64>| a.map_or("-".to_string(), |v| format!("{v:.2}"));
        println!("{:<12} val {}  test {}  {}", r.name, acc(r.val_acc), acc(r.test_acc), r.status);
    }
    Ok(())
}

fn inspect_cmd(cmd: &InspectCmd) -> Result<(), Failure> {
    let model = Model::<f64>::from_checkpoint(&cmd.ckpt)?;
    let data = load_split(&cmd.data)?;
    let dump = harness::inspect(&model, &data, cmd.index)?;
    let text = serde_json::to_string_pretty(&dump).map_err(Error::from)?;
    write_or_print(cmd.out.as_deref(), &text)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train_cmd(c),
        Command::Eval(c) => eval_cmd(c),
        Command::GradCheck(c) => grad_check_cmd(c),
        Command::Suite(c) => suite_cmd(c),
        Command::Inspect(c) => inspect_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
