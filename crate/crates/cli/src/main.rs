use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use curvmatch::harness::{self, SweepGrid};
use curvmatch::{data, verify, ExperimentSpec, MetricsReport, SynthSpec};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(
    name = "curvmatch",
    version,
    about = "Group-fair tabular classifiers with curvature matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and evaluate it on every configured set.
    Train(ExperimentArgs),
    /// Evaluate a saved checkpoint on the configured sets.
    Evaluate {
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Grid sweep over alpha, gamma and h; writes sweep.csv and pareto.csv.
    Sweep {
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
        #[arg(long = "hs", value_delimiter = ',')]
        hs: Vec<f64>,
    },
    /// Write the synthetic biased dataset as CSV plus schema.
    SynthData {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient, curvature and MMD oracle suites.
    Gradcheck {
        /// Print the reports as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    d: usize,
    /// Share of rows with A = 0.
    #[arg(long, default_value_t = 0.7)]
    group_ratio: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_gap: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment spec; its fields take precedence over flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_csv: Option<PathBuf>,
    #[arg(long)]
    test_csv: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Use the synthetic generator instead of CSV files.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    finetune_from: Option<PathBuf>,
    /// Noise shift of the test split: `gaussian` or `uniform`, optionally
    /// `kind:std`. Repeatable.
    #[arg(long = "shift")]
    shifts: Vec<String>,
    /// Extra test CSV as `name=path`. Repeatable.
    #[arg(long = "extra-test")]
    extra_tests: Vec<String>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Also write per-sample test curvatures.
    #[arg(long)]
    dump_curvatures: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_shift(text: &str) -> Result<Value> {
    let (kind, std) = match text.split_once(':') {
        Some((k, s)) => (
            k,
            Some(s.parse::<f64>().with_context(|| format!("bad shift std in {text:?}"))?),
        ),
        None => (text, None),
    };
    if kind != "gaussian" && kind != "uniform" {
        bail!("unknown shift kind {kind:?}; expected gaussian or uniform");
    }
    let name = match std {
        Some(s) => format!("{kind}-{s}"),
        None => kind.to_string(),
    };
    let mut v = json!({ "kind": "shift", "name": name, "noise": kind });
    if let Some(s) = std {
        v["std"] = json!(s);
    }
    Ok(v)
}

impl ExperimentArgs {
    fn flag_value(&self) -> Result<Value> {
        let mut train = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                train.insert(k.to_string(), v);
            }
        };
        put("method", self.method.as_ref().map(|m| json!(m)));
        put("alpha", self.alpha.map(|v| json!(v)));
        put("gamma", self.gamma.map(|v| json!(v)));
        put("h", self.h.map(|v| json!(v)));
        put("lr", self.lr.map(|v| json!(v)));
        put("weight_decay", self.weight_decay.map(|v| json!(v)));
        put("epochs", self.epochs.map(|v| json!(v)));
        put("batch_size", self.batch_size.map(|v| json!(v)));
        put("seed", self.seed.map(|v| json!(v)));
        put("model", self.dropout.map(|v| json!({ "dropout": v })));
        put("finetune_from", self.finetune_from.as_ref().map(|v| json!(v)));
        let mut spec = json!({ "train": train });
        if self.synthetic {
            let s = &self.synth;
            spec["data"] = serde_json::to_value(curvmatch::harness::DataSource::Synthetic(SynthSpec::new(
                s.n,
                s.d,
                s.group_ratio,
                s.noise_gap,
                s.data_seed,
            )))?;
        } else if let (Some(train), Some(test), Some(schema)) = (&self.train_csv, &self.test_csv, &self.schema) {
            spec["data"] = json!({ "kind": "csv", "train": train, "test": test, "schema": schema });
        } else if self.train_csv.is_some() || self.test_csv.is_some() || self.schema.is_some() {
            bail!("--train-csv, --test-csv and --schema must be given together");
        }
        let mut eval = Vec::new();
        for s in &self.shifts {
            eval.push(parse_shift(s)?);
        }
        for e in &self.extra_tests {
            let Some((name, path)) = e.split_once('=') else {
                bail!("--extra-test expects name=path, got {e:?}");
            };
            eval.push(json!({ "kind": "csv", "name": name, "path": path }));
        }
        if !eval.is_empty() {
            spec["eval"] = Value::Array(eval);
        }
        if let Some(r) = self.repeats {
            spec["repeats"] = json!(r);
        }
        if self.dump_curvatures {
            spec["dump_curvatures"] = json!(true);
        }
        if let Some(out) = &self.out {
            spec["output_dir"] = json!(out);
        }
        Ok(spec)
    }

    fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = self.flag_value()?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let config: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut spec, config);
        }
        if spec.get("data").is_none() {
            bail!("no dataset: pass --synthetic, the three CSV flags, or a config with a data section");
        }
        serde_json::from_value(spec).context("invalid experiment spec")
    }
}

fn print_report(report: &MetricsReport) {
    println!("fingerprint {}", report.fingerprint);
    println!("{:<16} {:>16} {:>16} {:>16}", "set", "accuracy", "delta_eo", "delta_dp");
    for s in &report.summary {
        let cell = |m: curvmatch::harness::Summary| {
            if report.runs.len() > 1 {
                format!("{:.2} ± {:.2}", m.mean, m.std)
            } else {
                format!("{:.2}", m.mean)
            }
        };
        println!(
            "{:<16} {:>16} {:>16} {:>16}",
            s.name,
            cell(s.accuracy),
            cell(s.delta_eo),
            cell(s.delta_dp)
        );
    }
}

fn or_base(values: &[f64], base: f64) -> Vec<f64> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let spec = args.resolve()?;
            print_report(&harness::run(&spec)?);
        }
        Command::Evaluate { experiment, checkpoint } => {
            let spec = experiment.resolve()?;
            print_report(&harness::evaluate(&spec, &checkpoint)?);
        }
        Command::Sweep {
            experiment,
            alphas,
            gammas,
            hs,
        } => {
            let spec = experiment.resolve()?;
            let grid = SweepGrid {
                alpha: or_base(&alphas, spec.train.alpha),
                gamma: or_base(&gammas, spec.train.gamma),
                h: or_base(&hs, spec.train.h),
            };
            let table = harness::sweep(&spec, &grid)?;
            let failed = table.rows.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "{} cells, {failed} failed, {} on the Pareto front",
                table.rows.len(),
                table.pareto.len()
            );
            if spec.output_dir.is_none() {
                log::warn!("no --out given; sweep tables were not written");
            }
        }
        Command::SynthData { synth, out } => {
            let spec = SynthSpec::new(synth.n, synth.d, synth.group_ratio, synth.noise_gap, synth.data_seed);
            data::synth_biased(&spec)?.write(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { json } => {
            let reports = verify::run_all();
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                for r in &reports {
                    println!(
                        "{:<18} {} max error {:.3e} (tolerance {:.0e}, {} cases){}",
                        r.name,
                        if r.passed { "PASS" } else { "FAIL" },
                        r.max_error,
                        r.tolerance,
                        r.cases,
                        r.failure.as_ref().map(|f| format!(": {f}")).unwrap_or_default()
                    );
                }
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("failing suites: {}", failed.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
