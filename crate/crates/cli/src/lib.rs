//! Command-line front end for the SBCFormer inference engine.
//!
//! [`run`] parses arguments and dispatches; it returns the process exit
//! code instead of exiting so it can be driven from tests.

pub mod preprocess;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sbcformer::kernels::softmax_rows;
use sbcformer::parity::{golden_bundle, verify_activations, INPUT_NAME};
use sbcformer::profile::{measure_latency, random_input, render_report, ExecConfig, MacReport, DEFAULT_RUNS, DEFAULT_WARMUP};
use sbcformer::weights::{load, save};
use sbcformer::{block_costs, AblationFlags, Init, Model, ReportFormat, Tensor, Variant, VariantSpec};

pub use preprocess::{preprocess, preprocess_image, PreprocessSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sbcformer", version, about = "CPU inference and benchmarking for SBCFormer models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify one image and print the top predictions.
    Classify(ClassifyArgs),
    /// Time batch-1 forward passes and print a latency report.
    Bench(BenchArgs),
    /// Print parameter and multiply-accumulate counts.
    Count(CountArgs),
    /// Compare block outputs against a golden activation bundle.
    Verify(VerifyArgs),
    /// Write seeded random weights, optionally with a golden bundle.
    ExportRandom(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    NoLocal,
    StdAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model variant.
    #[arg(long, default_value = "XS", value_parser = parse_variant)]
    model: Variant,
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
}

impl ModelArgs {
    fn flags(&self) -> AblationFlags {
        match self.ablate {
            None => AblationFlags::NONE,
            Some(Ablation::NoLocal) => AblationFlags::NO_LOCAL,
            Some(Ablation::StdAttn) => AblationFlags::STANDARD_ATTENTION,
        }
    }

    fn spec(&self) -> VariantSpec {
        VariantSpec::named(self.model)
    }

    /// Loads `weights`, or builds a seeded random model when none are given.
    fn load(&self, weights: Option<&Path>, seed: u64) -> Result<Model> {
        match weights {
            Some(p) => {
                let store = load(p)?;
                Ok(Model::from_store(self.spec(), self.flags(), &store)
                    .with_context(|| format!("loading {} into {}", p.display(), self.model))?)
            }
            None => Ok(Model::build(self.spec(), self.flags(), Init::Random { seed })?),
        }
    }
}

#[derive(Debug, Args)]
struct ExecArgs {
    /// Kernel threads; defaults to every logical core.
    #[arg(long)]
    threads: Option<usize>,
    /// Single-threaded, bitwise-reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

impl ExecArgs {
    fn config(&self) -> ExecConfig {
        ExecConfig {
            threads: self.threads,
            deterministic: self.deterministic,
        }
    }
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long)]
    image: PathBuf,
    /// SBCW weights; without them a random model from `--seed` is used.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One class name per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Channel means as `r,g,b`.
    #[arg(long, value_parser = parse_triple)]
    mean: Option<[f32; 3]>,
    /// Channel standard deviations as `r,g,b`.
    #[arg(long, value_parser = parse_triple)]
    std: Option<[f32; 3]>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Per-block breakdown in the given format.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long)]
    weights: PathBuf,
    /// SBCW file holding the `input` tensor; defaults to the golden bundle's.
    #[arg(long)]
    input: Option<PathBuf>,
    /// SBCW file holding `act.<block>` tensors.
    #[arg(long)]
    golden: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    tol: f32,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination for the weights.
    #[arg(long)]
    output: PathBuf,
    /// Also write the input and every block output for `verify`.
    #[arg(long)]
    golden: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    input_seed: u64,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: sbcformer::Error| e.to_string())
}

fn parse_triple(s: &str) -> Result<[f32; 3], String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f32>| format!("expected 3 values, got {}", v.len()))
}

/// Parses `argv` (including the program name) and runs the command,
/// writing results to stdout and diagnostics to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Classify(a) => classify(a, out),
        Command::Bench(a) => bench(a, out),
        Command::Count(a) => count(a, out),
        Command::Verify(a) => verify(a, out),
        Command::ExportRandom(a) => export(a, out),
    }
}

fn classify(a: ClassifyArgs, out: &mut dyn Write) -> Result<i32> {
    let defaults = PreprocessSpec::default();
    let spec = PreprocessSpec {
        mean: a.mean.unwrap_or(defaults.mean),
        std: a.std.unwrap_or(defaults.std),
        ..defaults
    };
    let labels = match &a.labels {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading labels {}", p.display()))?
            .lines()
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    let input = preprocess_image(&a.image, &spec)?;
    let model = a.model.load(a.weights.as_deref(), a.seed)?;
    let logits = a.exec.config().install(|| model.forward(&input))??;
    let probs = softmax_rows(&logits)?;
    let top = top_k(probs.data(), a.top);
    let label = |i: usize| labels.get(i).cloned().unwrap_or_default();
    match a.format {
        None => {
            for (rank, (i, p)) in top.iter().enumerate() {
                let name = label(*i);
                writeln!(out, "{:>2}  {i:>4}  {p:.6}{}", rank + 1, if name.is_empty() { name } else { format!("  {name}") })?;
            }
        }
        Some(Format::Json) => {
            let rows: Vec<_> = top
                .iter()
                .map(|&(i, p)| serde_json::json!({ "index": i, "probability": p, "label": labels.get(i) }))
                .collect();
            writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?;
        }
        Some(Format::Csv) => {
            writeln!(out, "rank,index,probability,label")?;
            for (rank, (i, p)) in top.iter().enumerate() {
                writeln!(out, "{},{i},{p},{}", rank + 1, csv_field(&label(*i)))?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Indices of the `k` largest values, largest first; ties keep index order.
pub fn top_k(values: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, values[i])).collect()
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> Result<i32> {
    let model = a.model.load(a.weights.as_deref(), a.seed)?;
    let report = measure_latency(&model, a.runs, a.warmup, &a.exec.config())?;
    let text = render_report(&report, report_format(a.format))?;
    match &a.output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => writeln!(out, "{}", text.trim_end())?,
    }
    Ok(EXIT_OK)
}

fn report_format(f: Format) -> ReportFormat {
    match f {
        Format::Json => ReportFormat::Json,
        Format::Csv => ReportFormat::Csv,
    }
}

fn count(a: CountArgs, out: &mut dyn Write) -> Result<i32> {
    let report = MacReport::from_blocks(block_costs(&a.model.spec(), a.model.flags()));
    match a.format {
        None => {
            writeln!(out, "model: {} ({})", a.model.model, a.model.flags().label())?;
            writeln!(out, "params: {} ({:.3} M)", report.total_params, report.total_params as f64 / 1e6)?;
            writeln!(out, "macs: {} ({:.3} GMACs)", report.total_macs, report.total_macs as f64 / 1e9)?;
        }
        Some(Format::Json) => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
        Some(Format::Csv) => {
            writeln!(out, "name,macs,params")?;
            for b in &report.blocks {
                writeln!(out, "{},{},{}", b.name, b.macs, b.params)?;
            }
            writeln!(out, "total,{},{}", report.total_macs, report.total_params)?;
        }
    }
    Ok(EXIT_OK)
}

fn verify(a: VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let model = a.model.load(Some(&a.weights), 0)?;
    let golden = load(&a.golden)?;
    let input = match &a.input {
        Some(p) => take_input(&load(p)?, p)?,
        None => take_input(&golden, &a.golden)?,
    };
    let report = a
        .exec
        .config()
        .install(|| verify_activations(&model, &input, &golden, a.tol))??;
    match a.format {
        Some(Format::Json) => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
        Some(Format::Csv) => {
            writeln!(out, "layer,max_abs")?;
            for l in &report.layers {
                writeln!(out, "{},{}", l.name, l.max_abs)?;
            }
        }
        None => {
            for l in &report.layers {
                let mark = if l.max_abs <= a.tol { "ok" } else { "FAIL" };
                writeln!(out, "{:<16} {:>12.3e}  {mark}", l.name, l.max_abs)?;
            }
        }
    }
    if let Some(bad) = report.first_failure() {
        bail!(
            "verification failed at layer {}: max abs diff {:e} exceeds tolerance {:e}",
            bad.name,
            bad.max_abs,
            a.tol
        );
    }
    writeln!(out, "all {} layers within {:e}", report.layers.len(), a.tol)?;
    Ok(EXIT_OK)
}

fn take_input(store: &sbcformer::WeightStore, path: &Path) -> Result<Tensor> {
    store
        .get(INPUT_NAME)
        .cloned()
        .with_context(|| format!("{} has no tensor named {INPUT_NAME:?}", path.display()))
}

fn export(a: ExportArgs, out: &mut dyn Write) -> Result<i32> {
    let model = Model::build(a.model.spec(), a.model.flags(), Init::Random { seed: a.seed })?;
    let store = model.to_store();
    save(&store, &a.output)?;
    writeln!(out, "wrote {} tensors to {}", store.len(), a.output.display())?;
    if let Some(g) = &a.golden {
        let bundle = golden_bundle(&model, &random_input(model.spec.input_hw, a.input_seed))?;
        save(&bundle, g)?;
        writeln!(out, "wrote {} tensors to {}", bundle.len(), g.display())?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.1, 0.5, 0.2, 0.5], 3), vec![(1, 0.5), (3, 0.5), (2, 0.2)]);
        assert_eq!(top_k(&[1.0], 5).len(), 1);
    }

    #[test]
    fn triples() {
        assert_eq!(parse_triple("0.5, 1,2").unwrap(), [0.5, 1.0, 2.0]);
        assert!(parse_triple("1,2").is_err());
        assert!(parse_triple("a,b,c").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
