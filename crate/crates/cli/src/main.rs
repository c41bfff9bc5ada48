//! `hcil`: generate data, split it into tasks, train, evaluate and inspect.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hcil::feature_store::{self, partition_tasks, sidecar_path};
use hcil::memory::MemorySnapshot;
use hcil::synth::{self, SynthSpec};
use hcil::{
    evaluate, run_joint_oracle, run_stream, Dataset, HierarchicalModel, TaskStream, Taxonomy,
    TrainConfig,
};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] hcil::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => "E_USAGE",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "hcil", version, about = "Hierarchical class-incremental learning over feature files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/test pair with its taxonomy.
    Gen(GenArgs),
    /// Split a feature file into class-disjoint tasks.
    Split(SplitArgs),
    /// Train incrementally over a task stream.
    Train(TrainArgs),
    /// Evaluate a model on a test file.
    Eval(EvalArgs),
    /// Predict one line per fish track.
    Predict(PredictArgs),
    /// Summarize a saved rehearsal memory.
    InspectMemory(InspectArgs),
    /// Train once on all tasks together.
    JointTrain(TrainArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Plain-text key = value config file; flags override it [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: data for gen, data/tasks for split, runs for train, runs/joint for joint-train; eval, predict and inspect-memory only write files when given]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    PaperShape,
    Small,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Synthetic dataset shape
    #[arg(long, value_enum, default_value = "paper-shape")]
    preset: Preset,
    /// Tracks per species held out for the test file [default: 4 for paper-shape, 2 for small]
    #[arg(long)]
    test_tracks: Option<usize>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    /// Feature file to split (.hcf or .csv) [default: data/train.hcf]
    #[arg(long)]
    input: Option<PathBuf>,
    /// Number of tasks [default: 3]
    #[arg(long, conflicts_with = "single")]
    num_tasks: Option<usize>,
    /// Keep everything in one task
    #[arg(long)]
    single: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Task directory from `split`, or a feature file split on the fly [default: data/tasks]
    #[arg(long)]
    input: Option<PathBuf>,
    /// Test file evaluated after every task [default: none]
    #[arg(long)]
    test: Option<PathBuf>,
    /// Tasks to split a feature file into [default: 3]
    #[arg(long, conflicts_with = "single")]
    num_tasks: Option<usize>,
    /// Treat a feature file as one task
    #[arg(long)]
    single: bool,
    /// Hard cases kept in memory [default: 200]
    #[arg(long)]
    hard_budget: Option<usize>,
    /// Exemplars kept in memory [default: 1800]
    #[arg(long)]
    exemplar_budget: Option<usize>,
    /// SVM penalty C [default: 1]
    #[arg(long)]
    svm_c: Option<f64>,
    /// SVM duality-gap tolerance [default: 1e-6]
    #[arg(long)]
    svm_tol: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Model file [default: runs/model.json]
    #[arg(long)]
    model: Option<PathBuf>,
    /// Test feature file (.hcf or .csv) [default: the config file's value; required otherwise]
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// Model file [default: runs/model.json]
    #[arg(long)]
    model: Option<PathBuf>,
    /// Feature file to predict (.hcf or .csv) [default: the config file's value; required otherwise]
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    common: Common,
    /// Memory file [default: runs/memory.json]
    #[arg(long)]
    input: Option<PathBuf>,
}

/// Config file first, then `--seed` and `--out` on top.
fn base_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &TrainConfig, default: &str) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    Ok(dir)
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(hcil::Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

/// Binary unless the extension is `.csv`; the taxonomy comes from the sidecar.
fn load_features(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(io_error(path, std::io::ErrorKind::NotFound.into()));
    }
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let taxonomy = Taxonomy::load(sidecar_path(path))?;
        Ok(feature_store::load_csv(path, Arc::new(taxonomy))?)
    } else {
        Ok(feature_store::load_binary(path)?)
    }
}

fn gen(args: GenArgs) -> Result<()> {
    let cfg = base_config(&args.common)?;
    let spec = match args.preset {
        Preset::PaperShape => SynthSpec::paper_shape(cfg.seed),
        Preset::Small => SynthSpec::small(cfg.seed),
    };
    let test_tracks = args.test_tracks.unwrap_or(match args.preset {
        Preset::PaperShape => 4,
        Preset::Small => 2,
    });
    if test_tracks >= spec.tracks_per_species {
        return Err(CliError::Usage(format!(
            "--test-tracks must be below {} tracks per species",
            spec.tracks_per_species
        )));
    }
    let (ds, taxonomy) = synth::generate(&spec)?;
    let (train, test) = synth::split_tracks(&ds, test_tracks);
    let dir = out_dir(&cfg, "data")?;
    taxonomy.save(dir.join(hcil::taxonomy::TAXONOMY_FILE))?;
    train.save_binary(dir.join("train.hcf"))?;
    test.save_binary(dir.join("test.hcf"))?;
    println!(
        "wrote {} train and {} test records (d = {}, {} species) to {}",
        train.len(),
        test.len(),
        ds.dimension(),
        taxonomy.num_species(),
        dir.display()
    );
    Ok(())
}

fn task_count(cfg: &mut TrainConfig, num_tasks: Option<usize>, single: bool) {
    if single {
        cfg.num_tasks = 1;
    } else if let Some(n) = num_tasks {
        cfg.num_tasks = n;
    }
}

fn split(args: SplitArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    task_count(&mut cfg, args.num_tasks, args.single);
    cfg.validate()?;
    let input = args
        .input
        .or(cfg.input.clone())
        .unwrap_or_else(|| PathBuf::from("data/train.hcf"));
    let ds = load_features(&input)?;
    let stream = partition_tasks(&ds, cfg.num_tasks, cfg.seed)?;
    let dir = out_dir(&cfg, "data/tasks")?;
    stream.save_dir(&dir)?;
    for (t, task) in stream.tasks().iter().enumerate() {
        println!(
            "task {}: {} species, {} records",
            t + 1,
            task.species().len(),
            task.len()
        );
    }
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = base_config(&args.common)?;
    task_count(&mut cfg, args.num_tasks, args.single);
    if let Some(n) = args.hard_budget {
        cfg.hard_budget = n;
    }
    if let Some(m) = args.exemplar_budget {
        cfg.exemplar_budget = m;
    }
    if let Some(c) = args.svm_c {
        cfg.svm.c = c;
    }
    if let Some(tol) = args.svm_tol {
        cfg.svm.tol = tol;
    }
    if let Some(input) = &args.input {
        cfg.input = Some(input.clone());
    }
    if let Some(test) = &args.test {
        cfg.test = Some(test.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_stream(cfg: &TrainConfig) -> Result<TaskStream> {
    let input = cfg
        .input
        .clone()
        .unwrap_or_else(|| PathBuf::from("data/tasks"));
    if input.is_dir() {
        Ok(TaskStream::load_dir(&input)?)
    } else {
        let ds = load_features(&input)?;
        Ok(partition_tasks(&ds, cfg.num_tasks, cfg.seed)?)
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = train_config(&args)?;
    let stream = load_stream(&cfg)?;
    let test = cfg.test.as_deref().map(load_features).transpose()?;
    let outcome = run_stream(&stream, &cfg, test.as_ref())?;
    let dir = out_dir(&cfg, "runs")?;
    outcome.model.save(dir.join("model.json"))?;
    outcome.memory.save_snapshot(dir.join("memory.json"))?;
    write_text(&dir.join("report.json"), &outcome.report.to_json()?)?;

    for e in &outcome.report.tasks {
        println!(
            "task {}: +{} species, {} seen, {} SVMs, memory {} hard + {} exemplars",
            e.task,
            e.new_species.len(),
            e.seen_species,
            e.svms,
            e.hard_cases,
            e.exemplars
        );
    }
    if let Some(r) = outcome.report.final_eval() {
        print!("{}", r.to_table("HCIL"));
    }
    if let Some(f) = &outcome.report.forgetting {
        print!("{}", f.to_text());
    }
    Ok(())
}

fn joint_train(args: TrainArgs) -> Result<()> {
    let cfg = train_config(&args)?;
    let stream = load_stream(&cfg)?;
    let model = run_joint_oracle(&stream, &cfg)?;
    let dir = out_dir(&cfg, "runs/joint")?;
    model.save(dir.join("model.json"))?;
    println!(
        "joint model: {} species, {} SVMs",
        model.seen_species().len(),
        model.svms().len()
    );
    if let Some(path) = &cfg.test {
        let report = evaluate(&model, &load_features(path)?)?;
        write_text(&dir.join("eval.json"), &report.to_json()?)?;
        print!("{}", report.to_table("joint"));
    }
    Ok(())
}

fn model_path(model: Option<PathBuf>) -> PathBuf {
    model.unwrap_or_else(|| PathBuf::from("runs/model.json"))
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = base_config(&args.common)?;
    let model = HierarchicalModel::load(model_path(args.model))?;
    let test = required(args.test.or(cfg.test.clone()), "test")?;
    let report = evaluate(&model, &load_features(&test)?)?;
    if cfg.out.is_some() {
        let dir = out_dir(&cfg, "runs")?;
        write_text(&dir.join("eval.json"), &report.to_json()?)?;
    }
    print!("{}", report.to_table("HCIL"));
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let cfg = base_config(&args.common)?;
    let model = HierarchicalModel::load(model_path(args.model))?;
    let input = required(args.input.or(cfg.input.clone()), "input")?;
    let ds = load_features(&input)?;
    let taxonomy = model.taxonomy();
    let mut lines = String::new();
    for (fish, frames) in ds.tracks() {
        let feats: Vec<&[f32]> = frames.iter().map(|r| r.feature.as_slice()).collect();
        let p = model.predict_video(&feats)?;
        let line = serde_json::json!({
            "fish_id": fish,
            "frames": frames.len(),
            "group": p.group.0,
            "group_name": taxonomy.group_name(p.group),
            "group_confidence": p.group_confidence,
            "species": p.species.0,
            "species_name": taxonomy.species_name(p.species),
            "species_confidence": p.species_confidence,
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    if cfg.out.is_some() {
        let dir = out_dir(&cfg, "runs")?;
        write_text(&dir.join("predictions.jsonl"), &lines)?;
    }
    print!("{lines}");
    Ok(())
}

fn inspect_memory(args: InspectArgs) -> Result<()> {
    let cfg = base_config(&args.common)?;
    let path = args
        .input
        .or(cfg.input.clone())
        .unwrap_or_else(|| PathBuf::from("runs/memory.json"));
    let summary = MemorySnapshot::load(&path)?.summary();
    if cfg.out.is_some() {
        let dir = out_dir(&cfg, "runs")?;
        write_text(&dir.join("memory_summary.txt"), &summary)?;
    }
    print!("{summary}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::InspectMemory(a) => inspect_memory(a),
        Command::JointTrain(a) => joint_train(a),
    }
}

fn fail(code: &str, message: &str) -> ExitCode {
    let line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{code}]: {line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            return fail("E_USAGE", first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.code(), &e.to_string()),
    }
}
