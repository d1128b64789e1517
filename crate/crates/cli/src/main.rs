use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dualfocal::experiment::{
    compare_csv, parse_dataset_spec, parse_loss, parse_loss_item, run_comparison, summarize, CompareSpec,
};
use dualfocal::gradcheck::{run_gradcheck, GradcheckConfig};
use dualfocal::io::{evaluate, read_logits_file, reliability_svg, write_json, write_logits_file, EvalReport};
use dualfocal::metrics::{reliability_table, DEFAULT_BINS};
use dualfocal::theory::{phi_curve, PhiContext, PhiVariant};
use dualfocal::trainer::{evaluate_over_training, train_new, SyntheticSpec, TrainConfig, DEFAULT_EMA_FACTOR};

#[derive(Parser)]
#[command(name = "dualfocal", version, about = "Calibration losses, metrics and temperature scaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an MLP on a synthetic dataset and write its logits.
    Train {
        #[arg(long)]
        loss: String,
        #[arg(long, allow_negative_numbers = true)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 35)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Comma-separated key=value overrides, e.g. "overlap=0.8,dim=4".
        #[arg(long, default_value = "")]
        dataset_spec: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute calibration metrics for a logits file.
    Eval {
        file: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Fit a temperature on --val and report post-scaling metrics.
        #[arg(long, requires = "val")]
        fit_temperature: bool,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Tabulate focal and dual focal phi curves with their region roots.
    Theory {
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        gamma: f64,
        #[arg(long = "C", visible_alias = "c", default_value_t = 0.3, allow_negative_numbers = true)]
        c: f64,
        #[arg(long, value_enum, default_value_t = Variant::OffDiagonal)]
        variant: Variant,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check analytic loss gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        loss: String,
        #[arg(long, allow_negative_numbers = true)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Number of classes.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per (loss, seed) and tabulate median metrics.
    Compare {
        /// Comma-separated `name[:gamma]` items.
        #[arg(long, default_value = "focal:3,dfl:5")]
        losses: String,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value = "")]
        dataset_spec: String,
        #[arg(long, default_value_t = 35)]
        epochs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reliability table and SVG diagram for a logits file.
    Diagram {
        file: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    OffDiagonal,
    DiagonalUnit,
    DiagonalEntropy,
}

impl From<Variant> for PhiVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::OffDiagonal => PhiVariant::OffDiagonal,
            Variant::DiagonalUnit => PhiVariant::DiagonalUnit,
            Variant::DiagonalEntropy => PhiVariant::DiagonalEntropy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage,
    Data,
    Check,
}

struct Failure {
    kind: Kind,
    message: String,
}

impl Failure {
    fn usage(e: impl ToString) -> Self {
        Self {
            kind: Kind::Usage,
            message: e.to_string(),
        }
    }

    fn data(e: impl ToString) -> Self {
        Self {
            kind: Kind::Data,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn emit(text: &str, out: Option<&Path>) -> CliResult {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load(path: &Path) -> CliResult<dualfocal::LabeledBatch> {
    read_logits_file(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config: &'a TrainConfig,
    dataset: &'a SyntheticSpec,
    records: &'a [dualfocal::trainer::EpochRecord],
    smoothed_ece: Vec<f64>,
}

fn cmd_train(
    loss: &str,
    gamma: Option<f64>,
    epochs: usize,
    seed: u64,
    dataset_spec: &str,
    out_dir: &Path,
) -> CliResult {
    let loss = parse_loss(loss, gamma).map_err(Failure::usage)?;
    let dataset = parse_dataset_spec(dataset_spec, SyntheticSpec::default()).map_err(Failure::usage)?;
    let config = TrainConfig::new(loss, epochs, seed);
    config.validate().map_err(Failure::usage)?;
    let data = dualfocal::trainer::generate_dataset(&dataset).map_err(Failure::usage)?;
    let (_, trace) = train_new(&config, &data).map_err(Failure::data)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Failure::data(format!("{}: {e}", out_dir.display())))?;
    let output = TrainOutput {
        config: &config,
        dataset: &dataset,
        records: &trace.records,
        smoothed_ece: evaluate_over_training(&trace, Some(DEFAULT_EMA_FACTOR))
            .iter()
            .map(|p| p.smoothed)
            .collect(),
    };
    write_json(&output, &out_dir.join("trace.json")).map_err(Failure::data)?;
    write_logits_file(&trace.test, &out_dir.join("test_logits.csv")).map_err(Failure::data)?;
    write_logits_file(&trace.validation, &out_dir.join("val_logits.csv")).map_err(Failure::data)?;
    Ok(())
}

fn report_table(report: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "{:<14} {:>12} {:>12}", "metric", "pre", "post").unwrap();
    let post = report.post.as_ref();
    let rows: [(&str, f64, Option<f64>); 6] = [
        ("ece", report.pre.ece, post.map(|p| p.ece)),
        ("ada_ece", report.pre.ada_ece, post.map(|p| p.ada_ece)),
        ("classwise_ece", report.pre.classwise_ece, post.map(|p| p.classwise_ece)),
        ("mce", report.pre.mce, post.map(|p| p.mce)),
        ("nll", report.pre.nll, post.map(|p| p.nll)),
        ("error_rate", report.pre.error_rate, post.map(|p| p.error_rate)),
    ];
    for (name, pre, post) in rows {
        let post = post.map_or("-".to_string(), |v| format!("{v:.6}"));
        writeln!(s, "{name:<14} {pre:>12.6} {post:>12}").unwrap();
    }
    if let Some(t) = report.temperature {
        writeln!(s, "{:<14} {:>12} {:>12.1}", "temperature", "1.0", t).unwrap();
    }
    s
}

fn cmd_eval(
    file: &Path,
    bins: usize,
    fit_temperature: bool,
    val: Option<&Path>,
    out: Option<&Path>,
    format: Format,
) -> CliResult {
    if bins == 0 {
        return Err(Failure::usage("--bins must be positive"));
    }
    let test = load(file)?;
    let validation = match (fit_temperature, val) {
        (true, Some(path)) => Some(load(path)?),
        _ => None,
    };
    let report = evaluate(&test, validation.as_ref(), bins, None).map_err(Failure::data)?;
    let text = match format {
        Format::Json => to_json(&report),
        Format::Table => report_table(&report),
    };
    emit(&text, out)
}

fn cmd_theory(gamma: f64, c: f64, variant: Variant, samples: usize, out_dir: Option<&Path>) -> CliResult {
    let ctx = PhiContext::new(gamma, c, variant.into()).map_err(Failure::usage)?;
    let curve = phi_curve(&ctx, samples).map_err(Failure::usage)?;
    let text = to_json(&curve);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
        let mut csv = String::from("v,fl,dfl\n");
        for row in &curve.rows {
            writeln!(csv, "{:.6},{:.16e},{:.16e}", row.v, row.fl, row.dfl).unwrap();
        }
        emit(&csv, Some(&dir.join("phi_curve.csv")))?;
        emit(&text, Some(&dir.join("theory.json")))?;
    }
    emit(&text, None)
}

fn cmd_gradcheck(loss: &str, gamma: Option<f64>, trials: usize, k: usize, seed: u64) -> CliResult {
    let loss = parse_loss(loss, gamma).map_err(Failure::usage)?;
    if k < 2 || trials == 0 {
        return Err(Failure::usage("--k must be >= 2 and --trials positive"));
    }
    let config = GradcheckConfig {
        seed,
        ..GradcheckConfig::new(loss, k, trials)
    };
    let summary = run_gradcheck(&config).map_err(Failure::data)?;
    emit(&to_json(&summary), None)?;
    if summary.passed() {
        Ok(())
    } else {
        Err(Failure {
            kind: Kind::Check,
            message: format!(
                "{} of {} gradient checks failed; worst relative error {:e}",
                summary.failures, summary.checked, summary.worst_rel_err
            ),
        })
    }
}

fn cmd_compare(losses: &str, seeds: &str, dataset_spec: &str, epochs: usize, out: Option<&Path>) -> CliResult {
    let losses = losses
        .split(',')
        .map(|s| parse_loss_item(s.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::usage)?;
    let seeds = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| Failure::usage(format!("bad seed {s:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    let dataset = parse_dataset_spec(dataset_spec, SyntheticSpec::default()).map_err(Failure::usage)?;
    if epochs == 0 {
        return Err(Failure::usage("--epochs must be positive"));
    }
    let base = TrainConfig::new(losses[0], epochs, 0);
    let spec = CompareSpec {
        losses,
        seeds,
        dataset,
        epochs,
        hidden: base.hidden,
        batch_size: base.batch_size,
        bins: DEFAULT_BINS,
    };
    let cells = run_comparison(&spec).map_err(Failure::data)?;
    emit(&compare_csv(&summarize(&spec, &cells)), out)
}

fn cmd_diagram(file: &Path, bins: usize, svg: Option<&Path>) -> CliResult {
    if bins == 0 {
        return Err(Failure::usage("--bins must be positive"));
    }
    let batch = load(file)?;
    let rows = reliability_table(&batch, bins).map_err(Failure::data)?;
    if let Some(path) = svg {
        emit(&reliability_svg(&rows, bins), Some(path))?;
    }
    let mut table = String::from("lo,hi,accuracy,confidence,gap,count\n");
    for r in &rows {
        writeln!(
            table,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.lo, r.hi, r.accuracy, r.confidence, r.gap, r.count
        )
        .unwrap();
    }
    emit(&table, None)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train {
            loss,
            gamma,
            epochs,
            seed,
            dataset_spec,
            out_dir,
        } => cmd_train(&loss, gamma, epochs, seed, &dataset_spec, &out_dir),
        Command::Eval {
            file,
            bins,
            fit_temperature,
            val,
            out,
            format,
        } => cmd_eval(&file, bins, fit_temperature, val.as_deref(), out.as_deref(), format),
        Command::Theory {
            gamma,
            c,
            variant,
            samples,
            out_dir,
        } => cmd_theory(gamma, c, variant, samples, out_dir.as_deref()),
        Command::Gradcheck {
            loss,
            gamma,
            trials,
            k,
            seed,
        } => cmd_gradcheck(&loss, gamma, trials, k, seed),
        Command::Compare {
            losses,
            seeds,
            dataset_spec,
            epochs,
            out,
        } => cmd_compare(&losses, &seeds, &dataset_spec, epochs, out.as_deref()),
        Command::Diagram { file, bins, svg } => cmd_diagram(&file, bins, svg.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            eprintln!("{}", e.render().to_string().lines().skip(1).collect::<Vec<_>>().join("\n"));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (tag, code) = match f.kind {
                Kind::Usage => ("usage", 1),
                Kind::Data => ("data", 2),
                Kind::Check => ("check", 3),
            };
            eprintln!("error[{tag}]: {}", f.message.replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
