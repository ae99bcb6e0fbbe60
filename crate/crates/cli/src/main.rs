//! `mobiface` command-line front end.
//!
//! Results go to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 1 usage error, 2 data error (bad files, failed checks).

mod bench;
mod selftest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use mobiface::graph::{stage_trace, Architecture, FlipHeadSpec, EMBEDDING_DIM, MOBIFACE};
use mobiface::image::load_image;
use mobiface::tensor::Tensor;
use mobiface::verify::{evaluate_pairs, preprocess, PairList};
use mobiface::weights::{init_random, FORMAT_VERSION};
use mobiface::{analyzer, build_mobiface, Model, WeightStore};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mobiface", version, about = "MobiFace inference engine, analyzer and verification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the stage-level shape trace of an architecture
    Describe(ArchArgs),
    /// Per-layer parameters, MACs and activation memory
    Analyze(ArchArgs),
    /// Write seeded random weights for an architecture
    Init {
        #[arg(long, default_value = MOBIFACE, value_parser = PossibleValuesParser::new(Architecture::NAMES))]
        arch: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the 512-d embedding of one image
    Embed {
        #[arg(long)]
        weights: PathBuf,
        /// P6 PPM, or an MBFW file holding one [3,112,112] tensor of 0..255 pixels
        #[arg(long)]
        image: PathBuf,
        /// Average with the flip head's predicted mirror embedding
        #[arg(long)]
        flip_head: bool,
        /// `.json` for JSON, anything else for a single-tensor MBFW file; stdout JSON if omitted
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the k-fold pair-verification protocol
    Verify {
        #[arg(long)]
        weights: PathBuf,
        /// Tab-separated pair list with a `#folds=N` header; image paths resolve against its directory
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        flip_head: bool,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Oracle cross-checks, shape goldens and format round trips
    Selftest {
        /// Also load and validate this weights file
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Forward-pass latency statistics
    Bench(bench::BenchArgs),
    /// Dump an MBFW weights file as JSON
    Export {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a JSON dump back into an MBFW weights file
    Import {
        #[arg(long)]
        json: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value = MOBIFACE, value_parser = PossibleValuesParser::new(Architecture::NAMES))]
    arch: String,
    #[arg(long)]
    json: bool,
}

/// A failure that maps to exit code 2.
#[derive(Debug)]
pub struct CliError(String);

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<mobiface::Error> for CliError {
    fn from(e: mobiface::Error) -> Self {
        Self(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self(format!("json: {e}"))
    }
}

impl From<String> for CliError {
    fn from(s: String) -> Self {
        Self(s)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.0.replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Describe(a) => describe(&a.arch, a.json),
        Command::Analyze(a) => analyze(&a.arch, a.json),
        Command::Init { arch, seed, out } => init(&arch, seed, &out),
        Command::Embed { weights, image, flip_head, out, threads } => {
            in_pool(threads, || embed(&weights, &image, flip_head, out.as_deref()))
        }
        Command::Verify { weights, pairs, flip_head, json, threads } => {
            in_pool(threads, || verify(&weights, &pairs, flip_head, json))
        }
        Command::Selftest { weights, seed, json } => selftest::run(weights.as_deref(), seed, json),
        Command::Bench(args) => bench::run(&args),
        Command::Export { weights, out } => export(&weights, &out),
        Command::Import { json, out } => import(&json, &out),
    }
}

/// Runs `f` inside a rayon pool of `threads` workers (the global pool if `None`).
pub fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    match threads {
        None => f(),
        Some(0) => Err(CliError("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn describe(arch: &str, as_json: bool) -> CliResult<()> {
    let arch = Architecture::by_name(arch)?;
    let trace = stage_trace(&arch.net)?;
    if as_json {
        let stages: Vec<_> = trace
            .iter()
            .map(|s| json!({ "label": s.label, "shape": s.shape, "hwc": s.hwc() }))
            .collect();
        let head = arch.flip_head.as_ref().map(|h| json!({ "dim": h.dim, "hidden": h.hidden }));
        let doc = json!({ "arch": arch.name(), "stages": stages, "flip_head": head });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    println!("architecture: {}", arch.name());
    println!("{:<14} stage", "input (HxWxC)");
    for s in &trace {
        println!("{s}");
    }
    if let Some(h) = &arch.flip_head {
        println!("flip head: FC {}->{}, ReLU, FC {}->{}", h.dim, h.hidden, h.hidden, h.dim);
    }
    Ok(())
}

fn analyze(arch: &str, as_json: bool) -> CliResult<()> {
    let report = analyzer::analyze(&Architecture::by_name(arch)?)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn init(arch: &str, seed: u64, out: &Path) -> CliResult<()> {
    let arch = Architecture::by_name(arch)?;
    let mut store = init_random(&arch.weight_bindings(), seed)?;
    store.arch = Some(arch.name().to_string());
    store.save(out)?;
    println!(
        "wrote {} tensors ({} floats) for {} (seed {seed}) to {}",
        store.len(),
        store.float_count(),
        arch.name(),
        out.display()
    );
    Ok(())
}

/// Loads a weights file and binds it to the MobiFace backbone, with the flip
/// head if the file carries one.
pub fn load_model(path: &Path) -> CliResult<Model> {
    let store = WeightStore::load(path)?;
    model_from_store(&store).map_err(|e| CliError(format!("{}: {e}", path.display())))
}

pub fn model_from_store(store: &WeightStore) -> CliResult<Model> {
    let net = build_mobiface();
    let head: Option<FlipHeadSpec> = store.flip_head(EMBEDDING_DIM)?;
    let arch = Architecture { net: net.clone(), flip_head: head.clone() };
    store.validate(&arch.weight_bindings())?;
    Ok(match &head {
        Some(h) => Model::with_flip_head(&net, h, store)?,
        None => Model::new(&net, store)?,
    })
}

fn embed(weights: &Path, image: &Path, flip_head: bool, out: Option<&Path>) -> CliResult<()> {
    let model = load_model(weights)?;
    if flip_head && !model.has_flip_head() {
        return Err(CliError(format!("{}: --flip-head given but the weights have no flip head", weights.display())));
    }
    let face = preprocess(&load_image(image)?).map_err(|e| CliError(format!("{}: {e}", image.display())))?;
    let batch = face.to_batch();
    let e = if flip_head { model.embed_with_flip(&batch)? } else { model.forward(&batch)? }.sample(0)?;
    let doc = json!({ "dim": e.len(), "flip_head": flip_head, "embedding": e.data() });
    match out {
        None => println!("{}", serde_json::to_string(&doc)?),
        Some(p) if is_json(p) => write_file(p, serde_json::to_string_pretty(&doc)?.as_bytes())?,
        Some(p) => {
            let mut store = WeightStore::new();
            store.insert("embedding", e)?;
            store.save(p)?;
        }
    }
    Ok(())
}

fn is_json(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn write_file(p: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(p, bytes).map_err(|e| CliError(format!("{}: {e}", p.display())))
}

fn verify(weights: &Path, pairs_path: &Path, flip_head: bool, as_json: bool) -> CliResult<()> {
    let pairs = PairList::load(pairs_path)?;
    let model = load_model(weights)?;
    let base = pairs_path.parent().unwrap_or(Path::new("."));
    let result = evaluate_pairs(&model, &pairs, flip_head, base)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&result)?);
        return Ok(());
    }
    println!("{} pairs, {} folds, flip head: {}", pairs.pairs.len(), pairs.folds, if flip_head { "on" } else { "off" });
    println!("{:>4} {:>12} {:>9}", "fold", "threshold", "accuracy");
    for f in &result.folds {
        println!("{:>4} {:>12.6} {:>9.4}", f.fold, f.threshold, f.accuracy);
    }
    println!("mean accuracy {:.4} (std {:.4})", result.mean_accuracy, result.std_accuracy);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct JsonWeights {
    format_version: u32,
    tensors: Vec<JsonTensor>,
}

fn export(weights: &Path, out: &Path) -> CliResult<()> {
    let store = WeightStore::load(weights)?;
    let doc = JsonWeights {
        format_version: FORMAT_VERSION,
        tensors: store
            .iter()
            .map(|(n, t)| JsonTensor { name: n.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect(),
    };
    write_file(out, serde_json::to_string(&doc)?.as_bytes())?;
    println!("exported {} tensors to {}", store.len(), out.display());
    Ok(())
}

fn import(json_path: &Path, out: &Path) -> CliResult<()> {
    let text = std::fs::read_to_string(json_path).map_err(|e| CliError(format!("{}: {e}", json_path.display())))?;
    let doc: JsonWeights = serde_json::from_str(&text)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(mobiface::Error::Version(doc.format_version).into());
    }
    let mut store = WeightStore::new();
    for t in doc.tensors {
        let tensor = Tensor::new(&t.shape, t.data)?;
        tensor.validate_finite(&t.name)?;
        store.insert(t.name, tensor)?;
    }
    store.save(out)?;
    println!("imported {} tensors to {}", store.len(), out.display());
    Ok(())
}
