use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lorafit::data::{generate_fixture, FixtureSpec, SplitCounts};
use lorafit::eval::{evaluate, predict, render_report, RenderedReport, ReportFormat};
use lorafit::run::{load_adapted, read_dataset, run_training, write_report};
use lorafit::{save_model, Error, Quantization, Result, RunConfig, Split, Task};

/// LoRA fine-tuning of a small byte-level transformer for Devanagari text
/// classification.
#[derive(Parser)]
#[command(name = "lorafit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-split class counts and imbalance ratios.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
    },
    /// Write a synthetic JSON-Lines corpus.
    GenFixture(GenFixtureArgs),
    /// Fine-tune adapters and write a run directory.
    Train(TrainArgs),
    /// Evaluate a base checkpoint, optionally with adapters, on one split.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Directory for report.txt and the two CSV files.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Print the predicted label for each example or text.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, required_unless_present = "text")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Classify these texts instead of a data file.
        #[arg(long, conflicts_with = "data")]
        text: Vec<String>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Fold adapters into the base and write a standalone checkpoint.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    adapters: Option<PathBuf>,
}

#[derive(Args)]
struct GenFixtureArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Use the full split sizes of the task's corpus.
    #[arg(long, conflicts_with_all = ["train", "valid", "test"])]
    full_corpus: bool,
    /// Per-class training counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    train: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    valid: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    test: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability that an example carries its own class marker.
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    /// Probability that an example carries another class's marker.
    #[arg(long, default_value_t = 0.0)]
    leak: f64,
    /// Fewest filler words per example.
    #[arg(long, default_value_t = 4)]
    min_words: usize,
    /// Most filler words per example.
    #[arg(long, default_value_t = 8)]
    max_words: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    quantization: Option<QuantArg>,
    #[arg(long, value_delimiter = ',')]
    class_weights: Option<Vec<f64>>,
    #[arg(long)]
    oversample: Option<f64>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Detection,
    Target,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Detection => Task::Detection,
            TaskArg::Target => Task::Target,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantArg {
    Off,
    Q8,
    Q4,
}

impl From<QuantArg> for Quantization {
    fn from(q: QuantArg) -> Self {
        match q {
            QuantArg::Off => Quantization::Off,
            QuantArg::Q8 => Quantization::Q8,
            QuantArg::Q4 => Quantization::Q4,
        }
    }
}

fn stats(data: &Path, task: Task) -> Result<()> {
    let dataset = read_dataset(data, task)?;
    print!("{}", dataset.class_distribution().render());
    Ok(())
}

fn gen_fixture(args: GenFixtureArgs) -> Result<()> {
    let task = Task::from(args.task);
    let mut spec = if args.full_corpus {
        match task {
            Task::Detection => FixtureSpec::detection_corpus(args.seed),
            Task::Target => FixtureSpec::target_corpus(args.seed),
        }
    } else {
        let k = task.n_classes();
        let or_zero = |v: Vec<usize>| if v.is_empty() { vec![0; k] } else { v };
        FixtureSpec::new(
            task,
            SplitCounts {
                train: or_zero(args.train),
                valid: or_zero(args.valid),
                test: or_zero(args.test),
            },
            args.seed,
        )
    };
    spec.signal = args.signal;
    spec.leak = args.leak;
    spec.min_words = args.min_words;
    spec.max_words = args.max_words;
    let dataset = generate_fixture(&spec)?;
    dataset.write_jsonl(&args.out)?;
    eprintln!("wrote {} examples to {}", dataset.len(), args.out.display());
    Ok(())
}

fn train_config(args: TrainArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(t) = args.task {
        c.task = t.into();
    }
    if let Some(d) = args.data {
        c.data = d;
    }
    if let Some(d) = args.run_dir {
        c.run_dir = d;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(e) = args.epochs {
        c.train.epochs = Some(e);
    }
    if let Some(b) = args.batch_size {
        c.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        c.train.learning_rate = lr;
    }
    if let Some(r) = args.rank {
        c.adapter.rank = r;
    }
    if let Some(a) = args.alpha {
        c.adapter.alpha = a;
    }
    if let Some(q) = args.quantization {
        c.quantization = q.into();
    }
    if let Some(w) = args.class_weights {
        c.train.class_weights = Some(w);
    }
    if let Some(r) = args.oversample {
        c.oversample_ratio = Some(r);
    }
    if let Some(b) = args.base {
        c.base_checkpoint = Some(b);
    }
    if let Some(d) = args.d_model {
        c.model.d_model = d;
    }
    if let Some(n) = args.n_layers {
        c.model.n_layers = n;
    }
    if let Some(m) = args.max_len {
        c.model.max_len = m;
    }
    Ok(c)
}

fn train(args: TrainArgs) -> Result<()> {
    let outcome = run_training(&train_config(args)?)?;
    let h = &outcome.history;
    eprintln!(
        "trained {} of {} parameters ({:.2}%) for {} epochs; kept epoch {}",
        h.params.trainable,
        h.params.total,
        100.0 * h.params.ratio(),
        h.epochs_run,
        h.best_epoch
    );
    println!("{} split report", outcome.report_split);
    if let RenderedReport::Text(t) = render_report(&outcome.report, ReportFormat::Text)? {
        print!("{t}");
    }
    eprintln!("run directory: {}", outcome.config.run_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats { data, task } => stats(&data, task.into()),
        Command::GenFixture(args) => gen_fixture(args),
        Command::Train(args) => train(args),
        Command::Evaluate {
            model,
            data,
            task,
            split,
            out,
            batch_size,
        } => {
            let (m, _) = load_adapted(&model.base, model.adapters.as_deref())?;
            let dataset = read_dataset(&data, task.into())?;
            let examples = dataset.split(split.into());
            let report = evaluate(&m, &examples, dataset.schema(), batch_size)?;
            if let RenderedReport::Text(t) = render_report(&report, ReportFormat::Text)? {
                print!("{t}");
            }
            if let Some(dir) = out {
                write_report(&dir, "report", &report)?;
            }
            Ok(())
        }
        Command::Predict {
            model,
            task,
            data,
            split,
            text,
            batch_size,
        } => {
            let (m, _) = load_adapted(&model.base, model.adapters.as_deref())?;
            let task = Task::from(task);
            let schema = task.schema();
            let dataset = match data {
                Some(path) => read_dataset(path, task)?,
                None => {
                    let examples = text
                        .into_iter()
                        .enumerate()
                        .map(|(i, t)| lorafit::Example {
                            id: format!("text-{}", i + 1),
                            text: t,
                            label: 0,
                            split: Split::Test,
                        })
                        .collect();
                    lorafit::Dataset::new(schema.clone(), examples)?
                }
            };
            let split = if dataset.split(split.into()).is_empty() {
                Split::Test
            } else {
                split.into()
            };
            let examples = dataset.split(split);
            let pred = predict(&m, &examples, &schema, batch_size)?;
            for (e, p) in examples.iter().zip(pred) {
                println!("{}\t{}", e.id, schema.name(p));
            }
            Ok(())
        }
        Command::Merge {
            base,
            adapters,
            out,
        } => {
            let (mut m, _) = load_adapted(&base, Some(&adapters))?;
            m.merge_adapters()?;
            save_model(&out, &m)?;
            eprintln!("wrote merged checkpoint to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_user_error() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}
