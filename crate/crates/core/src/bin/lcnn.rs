use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lcnn::bench::{
    run, run_base_models, write_outputs, DatasetSpec, ExperimentConfig, ExperimentKind, ExperimentResult, SearchMode,
};
use lcnn::bundle::ModelBundle;
use lcnn::data::{load_csv, write_csv, CsvSchema};
use lcnn::holdout::HoldoutOptions;
use lcnn::model::ModelKind;

#[derive(Parser)]
#[command(
    name = "lcnn",
    version,
    about = "Learned-context neural networks for multi-task regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as train.csv, test.csv and schema.json.
    Generate(GenerateArgs),
    /// Train the configured models, save their bundles and report test RMSE.
    Train(RunArgs),
    /// Score a saved bundle on a CSV file, optionally fitting a new task.
    Evaluate(EvaluateArgs),
    /// Hyperparameter search for each model, then final training.
    Hpo(RunArgs),
    /// Repeated training with fresh seeds.
    Repeat(RunArgs),
    /// Training on balanced subsamples of the data.
    Datasize(RunArgs),
    /// Sweep over the number of task parameters.
    Dbeta(RunArgs),
    /// Hold-out task adaptation over task-group rotations.
    Holdout(RunArgs),
    /// Task-parameter likelihood scan for a new frequency task.
    Scan(RunArgs),
    /// Verify the constructed networks; exits nonzero on any failed check.
    Construct(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Frequency,
    SineLine,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "frequency")]
    dataset: Generator,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<Generator>,
    /// Training CSV (requires --test and --schema).
    #[arg(long, requires_all = ["test", "schema"])]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Comma-separated model kinds (LC, CS, LL).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    #[arg(long)]
    no_lme: bool,
    #[arg(long)]
    hpo: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    d_beta: Option<usize>,
    #[arg(long)]
    lambda_alpha: Option<f64>,
    #[arg(long)]
    lambda_beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    perturbation: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Full-size data, epoch budget and search.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Writes `task, y, prediction` rows.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Fit task parameters for this task label of the data file instead of
    /// using stored ones, and report the fit.
    #[arg(long)]
    new_task: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn generator_spec(g: Generator) -> DatasetSpec {
    match g {
        Generator::Frequency => DatasetSpec::frequency_desk(),
        Generator::SineLine => DatasetSpec::sine_line_desk(),
    }
}

fn generate(args: &GenerateArgs) -> lcnn::Result<()> {
    let mut spec = generator_spec(args.dataset);
    if args.paper_scale {
        spec = spec.full_scale();
    }
    if let DatasetSpec::Frequency {
        num_tasks,
        n_train,
        n_test,
        sigma,
    }
    | DatasetSpec::SineLine {
        num_tasks,
        n_train,
        n_test,
        sigma,
    } = &mut spec
    {
        *num_tasks = args.tasks.unwrap_or(*num_tasks);
        *n_train = args.n_train.unwrap_or(*n_train);
        *n_test = args.n_test.unwrap_or(*n_test);
        *sigma = args.sigma.unwrap_or(*sigma);
    }
    let splits = spec.load(args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    write_csv(&splits.train, args.out.join("train.csv"))?;
    write_csv(&splits.test, args.out.join("test.csv"))?;
    let schema = CsvSchema::for_dataset(&splits.train);
    std::fs::write(args.out.join("schema.json"), serde_json::to_string_pretty(&schema)?)?;
    std::fs::write(args.out.join("dataset.json"), serde_json::to_string_pretty(&spec)?)?;
    println!(
        "wrote {} train and {} test rows for {} tasks to {}",
        splits.train.len(),
        splits.test.len(),
        splits.train.num_tasks(),
        args.out.display()
    );
    Ok(())
}

fn build_config(args: &RunArgs, experiment: ExperimentKind) -> lcnn::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.experiment = experiment;
    if let Some(g) = args.dataset {
        cfg.dataset = generator_spec(g);
    }
    if let (Some(train), Some(test), Some(schema)) = (&args.train, &args.test, &args.schema) {
        cfg.dataset = DatasetSpec::Csv {
            train: train.clone(),
            test: test.clone(),
            schema: schema.clone(),
        };
    }
    if args.paper_scale {
        cfg = cfg.full_scale();
    }
    if let Some(models) = &args.models {
        cfg.models = models.clone();
    }
    if args.no_lme {
        cfg.include_lme = false;
    }
    if args.hpo {
        cfg.search = SearchMode::Hpo;
    }
    set(&mut cfg.hpo_iterations, args.iterations);
    set(&mut cfg.hyper.peak_lr, args.lr);
    set(&mut cfg.hyper.hidden_dim, args.hidden);
    set(&mut cfg.hyper.d_beta, args.d_beta);
    set(&mut cfg.hyper.lambda_alpha, args.lambda_alpha);
    set(&mut cfg.hyper.lambda_beta, args.lambda_beta);
    set(&mut cfg.train.max_epochs, args.epochs);
    set(&mut cfg.train.batches_per_epoch, args.batches);
    set(&mut cfg.repeats, args.repeats);
    if let Some(f) = &args.fractions {
        if experiment == ExperimentKind::Holdout {
            cfg.holdout_fractions = f.clone();
        } else {
            cfg.fractions = f.clone();
        }
    }
    if let Some(d) = &args.dims {
        if experiment == ExperimentKind::Holdout {
            cfg.holdout_dims = d.clone();
        } else {
            cfg.dims = d.clone();
        }
    }
    if args.folds.is_some() {
        cfg.holdout_folds = args.folds;
    }
    set(&mut cfg.scan.omega, args.omega);
    set(&mut cfg.perturbation, args.perturbation);
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.jobs, args.jobs);
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    } else if args.config.is_none() {
        cfg.output_dir = PathBuf::from("results").join(experiment.name());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn report(cfg: &ExperimentConfig, res: &ExperimentResult) -> bool {
    for row in &res.rows {
        println!(
            "{:<4} {:<28} rmse {:.6}  normalized {:.4}",
            row.model, row.setting, row.rmse, row.normalized
        );
    }
    for s in &res.summary {
        println!("{:<16} {:<22} {}", s.model, s.statistic, s.value);
    }
    for e in &res.errors {
        eprintln!("failed: {e}");
    }
    if let Some(passed) = res.passed {
        println!("{}", if passed { "PASS" } else { "FAIL" });
    }
    println!("results in {}", cfg.output_dir.display());
    res.errors.is_empty() && res.passed != Some(false)
}

fn train(args: &RunArgs, search: bool) -> lcnn::Result<bool> {
    let mut cfg = build_config(args, ExperimentKind::Base)?;
    if search {
        cfg.search = SearchMode::Hpo;
    }
    let (res, models) = run_base_models(&cfg)?;
    write_outputs(&cfg, &res)?;
    for fit in &models {
        fit.bundle
            .save(cfg.output_dir.join(format!("{}.bundle.json", fit.kind.abbrev())))?;
        if search {
            std::fs::write(
                cfg.output_dir.join(format!("{}.best_config.json", fit.kind.abbrev())),
                serde_json::to_string_pretty(&fit.hyper)?,
            )?;
        }
    }
    Ok(report(&cfg, &res))
}

fn experiment(args: &RunArgs, kind: ExperimentKind) -> lcnn::Result<bool> {
    let cfg = build_config(args, kind)?;
    let res = run(&cfg)?;
    write_outputs(&cfg, &res)?;
    Ok(report(&cfg, &res))
}

fn evaluate(args: &EvaluateArgs) -> lcnn::Result<bool> {
    let bundle = ModelBundle::load(&args.bundle)?;
    let schema = CsvSchema::from_json_file(&args.schema)?;
    let raw = load_csv(&args.data, &schema)?;
    if let Some(label) = &args.new_task {
        let task = raw
            .task_labels()
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| lcnn::Error::InvalidArgument(format!("task {label} not in {}", args.data.display())))?;
        let data = raw.select_tasks(&[task])?;
        let opts = HoldoutOptions {
            seed: args.seed,
            ..HoldoutOptions::default()
        };
        let y = data.y().to_vec();
        let fit = bundle.fit_new_task(data.x().view(), &y, opts)?;
        let pred = bundle.predict_with_beta(data.x().view(), &fit.beta)?;
        let rmse = ((data.y() - &pred).mapv(|r| r * r).sum() / data.len() as f64).sqrt();
        println!("{}", serde_json::to_string_pretty(&fit)?);
        println!("in-sample rmse {rmse:.6}");
        return Ok(true);
    }
    let data = raw.align_to_labels(&bundle.task_labels)?;
    let pred = bundle.predict(data.x().view(), data.tasks())?;
    if let Some(path) = &args.predictions {
        write_predictions(path, &data, &pred)?;
    }
    println!("rmse {:.6}", bundle.rmse(&data)?);
    Ok(true)
}

fn write_predictions(
    path: &Path,
    data: &lcnn::data::MultiTaskDataset,
    pred: &ndarray::Array1<f64>,
) -> lcnn::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "y", "prediction"])?;
    for i in 0..data.len() {
        w.write_record([
            data.task_labels()[data.tasks()[i]].clone(),
            data.y()[i].to_string(),
            pred[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate(a) => generate(a).map(|()| true),
        Command::Train(a) => train(a, false),
        Command::Hpo(a) => train(a, true),
        Command::Evaluate(a) => evaluate(a),
        Command::Repeat(a) => experiment(a, ExperimentKind::Repeat),
        Command::Datasize(a) => experiment(a, ExperimentKind::Datasize),
        Command::Dbeta(a) => experiment(a, ExperimentKind::DbetaSweep),
        Command::Holdout(a) => experiment(a, ExperimentKind::Holdout),
        Command::Scan(a) => experiment(a, ExperimentKind::LikelihoodScan),
        Command::Construct(a) => experiment(a, ExperimentKind::ConstructVerify),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
