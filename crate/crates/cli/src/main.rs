use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dsm::config::Config;
use dsm::eval::{evaluate, GroundTruth, Setup};
use dsm::features::{detect_features, FeatureCollection, Role};
use dsm::index::{build_index, dataset_delta, read_index, write_index};
use dsm::matcher::{match_multiscale, similarity};
use dsm::query::{query, QueryOptions, RankedList};
use dsm::svg::render_match_svg;
use dsm::synth::{synth_dataset, SynthConfig};
use dsm::tensor::{read_tensor_set, write_tensor_set, TensorSet};

#[derive(Parser)]
#[command(
    name = "dsm",
    version,
    about = "Local features from activation tensors, spatial matching and retrieval re-ranking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic database, queries and ground truth.
    Synth(SynthArgs),
    /// Detect local features in one tensor set.
    Detect(DetectArgs),
    /// Index operations.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Rank the indexed database for one query or a directory of queries.
    Query(QueryArgs),
    /// Spatially match two tensor sets.
    Match(MatchArgs),
    /// Score rankings against ground truth.
    Eval(EvalArgs),
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build an index from a directory of .dsmt files.
    Build(BuildArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    #[arg(long, default_value_t = 4)]
    positives: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    /// Render only the full-resolution scale.
    #[arg(long)]
    single_scale: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = RoleArg::Query)]
    role: RoleArg,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Query,
    Database,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    tensors: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON list of matching [id, id] pairs; enables supervised whitening.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// A .dsmt file or a directory of them.
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    rerank: Option<usize>,
    #[arg(long)]
    diffuse: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ranks: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Both setups when omitted.
    #[arg(long, value_enum)]
    setup: Option<SetupArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetupArg {
    Medium,
    Hard,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Detect(a) => detect(a),
        Command::Index { command: IndexCommand::Build(a) } => build(a),
        Command::Query(a) => run_query(a),
        Command::Match(a) => run_match(a),
        Command::Eval(a) => eval(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::from_json(&text).with_context(|| format!("config {}", p.display()))
        }
    }
}

fn load_tensors(path: &Path) -> Result<TensorSet> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_tensor_set(&mut BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn dsmt_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "dsmt"));
    files.sort();
    if files.is_empty() {
        bail!("no .dsmt files in {}", dir.display());
    }
    Ok(files)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_tensors(dir: &Path, set: &TensorSet) -> Result<()> {
    let path = dir.join(format!("{}.dsmt", set.image_id));
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    write_tensor_set(set, &mut w)?;
    w.flush()?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        queries: a.queries,
        positives: a.positives,
        channels: a.channels,
        distractors: a.distractors,
        multiscale: !a.single_scale,
        ..SynthConfig::default()
    };
    let ds = synth_dataset(&cfg)?;
    let (db, qs) = (a.out.join("database"), a.out.join("queries"));
    fs::create_dir_all(&db)?;
    fs::create_dir_all(&qs)?;
    for s in &ds.database {
        save_tensors(&db, s)?;
    }
    for s in &ds.queries {
        save_tensors(&qs, s)?;
    }
    write_json(&a.out.join("gt.json"), &ds.ground_truth)?;
    let transforms: serde_json::Map<String, Value> =
        ds.transforms.iter().map(|(id, t)| (id.clone(), serde_json::to_value(t).unwrap_or(Value::Null))).collect();
    write_json(&a.out.join("transforms.json"), &transforms)?;
    println!("wrote {} database and {} query sets to {}", ds.database.len(), ds.queries.len(), a.out.display());
    Ok(())
}

fn features_json(f: &FeatureCollection, delta: f64) -> Value {
    let list: Vec<Value> = f
        .iter()
        .map(|p| {
            json!({
                "channel": p.channel,
                "scale": p.scale_index,
                "mu": p.mu,
                "sigma": p.sigma,
                "strength": p.strength,
            })
        })
        .collect();
    json!({
        "image_id": f.image_id,
        "role": f.role,
        "delta": delta,
        "count": list.len(),
        "features": list,
    })
}

fn detect(a: DetectArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let set = load_tensors(&a.input)?;
    let delta = dataset_delta(std::slice::from_ref(&set), config.delta_fraction)?;
    let role = match a.role {
        RoleArg::Query => Role::Query,
        RoleArg::Database => Role::Database,
    };
    let f = detect_features(&set, &config.detector_params(delta), role, &config.feature_params())?;
    write_json(&a.out, &features_json(&f, delta))?;
    println!("{} features", f.len());
    Ok(())
}

fn build(a: BuildArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let sets = dsmt_files(&a.tensors)?.iter().map(|p| load_tensors(p)).collect::<Result<Vec<_>>>()?;
    let pairs: Option<Vec<(String, String)>> = match &a.pairs {
        None => None,
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("pairs {}", p.display()))?)
        }
    };
    let index = build_index(sets, &config, pairs.as_deref())?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let bytes = write_index(&index, &mut w)?;
    w.flush()?;
    println!("indexed {} images, {} bytes", index.len(), bytes);
    Ok(())
}

fn run_query(a: QueryArgs) -> Result<()> {
    let file = File::open(&a.index).with_context(|| format!("opening {}", a.index.display()))?;
    let index = read_index(&mut BufReader::new(file)).with_context(|| format!("reading {}", a.index.display()))?;
    let mut opts = QueryOptions::from_index(&index);
    opts.diffuse = a.diffuse;
    if let Some(r) = a.rerank {
        opts.rerank_top = r;
    }
    let output = if a.query.is_dir() {
        let runs = dsmt_files(&a.query)?
            .iter()
            .map(|p| Ok(query(&index, &load_tensors(p)?, &opts)?))
            .collect::<Result<Vec<RankedList>>>()?;
        serde_json::to_value(runs)?
    } else {
        serde_json::to_value(query(&index, &load_tensors(&a.query)?, &opts)?)?
    };
    match &a.out {
        Some(p) => write_json(p, &output),
        None => {
            println!("{}", serde_json::to_string_pretty(&output)?);
            Ok(())
        }
    }
}

fn run_match(a: MatchArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let (s1, s2) = (load_tensors(&a.a)?, load_tensors(&a.b)?);
    if s1.channels() != s2.channels() {
        bail!("channel counts differ: {} vs {}", s1.channels(), s2.channels());
    }
    let delta = dataset_delta(&[s1.clone(), s2.clone()], config.delta_fraction)?;
    let det = config.detector_params(delta);
    let f1 = detect_features(&s1, &det, Role::Query, &config.feature_params())?;
    let f2 = detect_features(&s2, &det, Role::Database, &config.feature_params())?;
    let (p1, p2) = (f1.split_scales(s1.scales.len()), f2.split_scales(s2.scales.len()));
    let m = match_multiscale(&p1, &p2, &config.match_params());
    let (i, j) = m.scale_pair;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "a": s1.image_id,
            "b": s2.image_id,
            "features": [f1.len(), f2.len()],
            "inliers": similarity(&m),
            "transform": m.transform,
            "residual": m.residual,
            "scale_pair": [i, j],
        }))?
    );
    if let Some(path) = &a.svg {
        let size = |s: &TensorSet, k: usize| (s.scales[k].tensor.width(), s.scales[k].tensor.height());
        let svg = render_match_svg(&m, &p1[i], &p2[j], size(&s1, i), size(&s2, j));
        fs::write(path, svg).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&a.ranks).with_context(|| format!("reading {}", a.ranks.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("rankings {}", a.ranks.display()))?;
    let runs: Vec<RankedList> = match value {
        Value::Array(_) => serde_json::from_value(value)?,
        v => vec![serde_json::from_value(v)?],
    };
    let gt = GroundTruth::from_json(&fs::read_to_string(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?)
        .with_context(|| format!("ground truth {}", a.gt.display()))?;
    let setups = match a.setup {
        Some(SetupArg::Medium) => vec![Setup::Medium],
        Some(SetupArg::Hard) => vec![Setup::Hard],
        None => vec![Setup::Medium, Setup::Hard],
    };
    let mut out = Vec::new();
    for s in setups {
        let m = evaluate(&runs, &gt, s)?;
        out.push(json!({ "setup": m.setup, "mAP": m.map, "mP@10": m.mp10, "queries": m.per_query.len() }));
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
