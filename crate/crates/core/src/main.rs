use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use shillforge::attack::{read_profiles, write_profiles, AttackError};
use shillforge::detect::{write_trajectory, DetectError};
use shillforge::evalrun::{
    defended_graph, generate_attack, joint_from_checkpoint, joint_to_checkpoint, poisoned_graph,
    pre_attack, prepare_seed, report_json, run_experiment, score_model, to_json_6, AttackKind,
    DataSource, EvalError, ExperimentConfig, HitRatios,
};
use shillforge::graphdata::{synthesize, write_csv, GraphError, SyntheticSpec};
use shillforge::recmodel::{read_checkpoint, write_checkpoint, RecModelError};

const MANIFEST_SCHEMA: &str = "manifest-v1";
const SEED_ENV: &str = "SHILLFORGE_SEED";

#[derive(Parser)]
#[command(name = "shillforge", version, about = "Node-injection attacks and defenses for graph recommenders")]
struct Cli {
    /// Log filter, e.g. `info` or `shillforge=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic rating graph as CSV.
    Synth(SynthArgs),
    /// Generate injected profiles against a rating graph.
    Attack(AttackArgs),
    /// Run an experiment from a config file or a manifest.
    Run(RunArgs),
    /// Recompute metrics from the checkpoints and profiles of a finished run.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    items: usize,
    /// Inherent fake users.
    #[arg(long, default_value_t = 25)]
    fake: usize,
    /// Expected ratings per user.
    #[arg(long, default_value_t = 6.0)]
    density: f64,
    #[arg(long, default_value_t = 5)]
    levels: u8,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    /// Edge file in `user_id,item_id,rating,label` format.
    #[arg(long)]
    graph: PathBuf,
    /// metac, random, average or popular.
    #[arg(long, value_parser = parse_attack)]
    method: AttackKind,
    /// Injected users as a fraction of real users.
    #[arg(long)]
    power: Option<f64>,
    /// Ratings per injected user.
    #[arg(long)]
    budget: Option<usize>,
    /// Number of target items to sample.
    #[arg(long)]
    targets: Option<usize>,
    /// Explicit target item ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    target_items: Vec<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Config file for the remaining settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `injection.power=0.02`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Profiles CSV.
    #[arg(short, long)]
    output: PathBuf,
    /// Per-epoch adversarial loss CSV (metac only).
    #[arg(long)]
    adv_log: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults apply to every key it leaves out.
    #[arg(conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Re-run the exact configuration recorded in a manifest.
    #[arg(long, conflicts_with = "sets")]
    manifest: Option<PathBuf>,
    /// Override one config key, e.g. `injection.power=0.02`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(short, long, default_value = "shillforge-run")]
    out: PathBuf,
    /// Worker threads across seeds.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest written by `run`.
    #[arg(long)]
    manifest: PathBuf,
    /// Only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the metrics here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let usage = matches!(
            &e,
            EvalError::Config(_)
                | EvalError::Graph(GraphError::Validation(_) | GraphError::Parse { .. })
                | EvalError::Attack(AttackError::Config(_))
                | EvalError::Detect(DetectError::Validation(_))
        );
        if usage {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<AttackError> for Failure {
    fn from(e: AttackError) -> Self {
        EvalError::from(e).into()
    }
}

impl From<RecModelError> for Failure {
    fn from(e: RecModelError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<DetectError> for Failure {
    fn from(e: DetectError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn parse_attack(s: &str) -> Result<AttackKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown attack `{s}` (expected metac, random, average or popular)"))
}

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema: String,
    tool_version: String,
    config: ExperimentConfig,
    seeds: Vec<u64>,
    /// Paths relative to the manifest's directory.
    artifacts: Artifacts,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Artifacts {
    report: String,
    trajectories: BTreeMap<u64, String>,
    checkpoints: BTreeMap<u64, String>,
    profiles: BTreeMap<u64, String>,
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic<F>(path: &Path, fill: F) -> Result<(), Failure>
where
    F: FnOnce(&mut dyn Write) -> Result<(), Failure>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Failure> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Failure::Usage(format!("bad key `{key}`")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Failure::Usage(format!("`{key}`: `{part}` is not a section")))?;
    }
    Ok(())
}

/// Every key a config may hold, as a table of defaults with optional
/// fields filled in.
fn key_template() -> toml::Table {
    let mut cfg = ExperimentConfig::default();
    cfg.data.path = Some(String::new());
    cfg.data.synthetic.rating_bias = Some(Vec::new());
    match toml::Value::try_from(&cfg) {
        Ok(toml::Value::Table(t)) => t,
        _ => toml::Table::new(),
    }
}

fn unknown_keys(given: &toml::Table, template: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (template.get(k), v) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(t)), toml::Value::Table(g)) => unknown_keys(g, t, &path, out),
            _ => {}
        }
    }
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>, Failure> {
    raw.split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure::Usage(format!("{SEED_ENV}=`{raw}` is not a comma-separated seed list")))
}

/// Config file, then `SHILLFORGE_SEED`, then `--set` overrides.
fn load_config(path: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig, Failure> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let seeds = parse_seeds(&raw)?;
        table.insert(
            "seeds".into(),
            toml::Value::Array(seeds.into_iter().map(|s| toml::Value::Integer(s as i64)).collect()),
        );
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let mut unknown = Vec::new();
    unknown_keys(&table, &key_template(), "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Failure::Usage(format!("unknown config keys: {}", unknown.join(", "))));
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Usage(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        users: a.users,
        items: a.items,
        fake: a.fake,
        density: a.density,
        levels: a.levels,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let g = synthesize(&spec).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_atomic(&a.output, |w| write_csv(&g, w).map_err(|e| Failure::Runtime(e.to_string())))?;
    log::info!("wrote {} users, {} items, {} ratings to {}", g.n_users(), g.n_items(), g.n_edges(), a.output.display());
    Ok(())
}

fn cmd_attack(a: AttackArgs) -> Result<(), Failure> {
    if !a.graph.is_file() {
        return Err(Failure::Usage(format!("{}: no such file", a.graph.display())));
    }
    let mut cfg = load_config(a.config.as_deref(), &a.sets)?;
    cfg.attack = a.method;
    cfg.data.source = DataSource::Csv;
    cfg.data.path = Some(a.graph.to_string_lossy().into_owned());
    cfg.seeds = vec![a.seed];
    if let Some(p) = a.power {
        cfg.injection.power = p;
    }
    if let Some(b) = a.budget {
        cfg.injection.budget = b;
    }
    if let Some(n) = a.targets {
        cfg.injection.n_targets = n;
    }
    if !a.target_items.is_empty() {
        cfg.injection.n_targets = a.target_items.len();
    }
    cfg.validate()?;

    let mut prepared = prepare_seed(&cfg, a.seed)?;
    if !a.target_items.is_empty() {
        let mut t = a
            .target_items
            .iter()
            .map(|id| {
                prepared
                    .graph
                    .item_index(id)
                    .ok_or_else(|| Failure::Usage(format!("unknown target item `{id}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        t.sort_unstable();
        t.dedup();
        prepared.targets = t;
    }
    let clean = if cfg.attack == AttackKind::Metac && cfg.injection.warm_start {
        Some(pre_attack(&prepared, &cfg)?.model)
    } else {
        None
    };
    let (profiles, history) = generate_attack(&prepared, &cfg, clean.as_ref())?;
    write_atomic(&a.output, |w| Ok(write_profiles(&prepared.graph, &profiles, w)?))?;
    if let Some(path) = &a.adv_log {
        write_atomic(path, |w| {
            writeln!(w, "epoch,adv_loss")?;
            for (k, l) in history.iter().enumerate() {
                writeln!(w, "{},{l:.6}", k + 1)?;
            }
            Ok(())
        })?;
    }
    let names: Vec<&str> = prepared.targets.iter().map(|&t| prepared.graph.items()[t].as_str()).collect();
    log::info!("{} profiles for targets {} written to {}", profiles.len(), names.join(","), a.output.display());
    Ok(())
}

fn relative(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).to_string_lossy().into_owned()
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let cfg = match &a.manifest {
        Some(m) => {
            if std::env::var(SEED_ENV).is_ok() {
                log::warn!("{SEED_ENV} is ignored when re-running a manifest");
            }
            read_manifest(m)?.config
        }
        None => load_config(a.config.as_deref(), &a.sets)?,
    };
    cfg.validate()?;
    let (report, runs) = match a.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Failure::Runtime(e.to_string()))?
            .install(|| run_experiment(&cfg))?,
        None => run_experiment(&cfg)?,
    };

    let out = &a.out;
    let mut artifacts = Artifacts::default();
    for run in &runs {
        let s = run.seed;
        let traj = out.join("trajectories").join(format!("seed-{s}.csv"));
        write_atomic(&traj, |w| Ok(write_trajectory(&run.evaluation.trajectory, w)?))?;
        let ckpt = out.join("checkpoints").join(format!("seed-{s}.json"));
        let c = joint_to_checkpoint(&run.evaluation.model);
        write_atomic(&ckpt, |w| Ok(write_checkpoint(&c, w)?))?;
        let prof = out.join("profiles").join(format!("seed-{s}.csv"));
        write_atomic(&prof, |w| Ok(write_profiles(&run.evaluation.graph, &run.profiles, w)?))?;
        artifacts.trajectories.insert(s, relative(out, &traj));
        artifacts.checkpoints.insert(s, relative(out, &ckpt));
        artifacts.profiles.insert(s, relative(out, &prof));
    }
    let report_path = out.join("report.json");
    let text = report_json(&report)?;
    write_atomic(&report_path, |w| Ok(w.write_all(text.as_bytes())?))?;
    artifacts.report = relative(out, &report_path);

    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seeds: cfg.seeds.clone(),
        config: cfg,
        artifacts,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&out.join("manifest.json"), |w| Ok(writeln!(w, "{text}")?))?;
    for h in &report.hr {
        log::info!(
            "HR@{}: pre-attack {:.4}, post-attack {:.4} over {} seeds",
            h.k,
            h.pre_attack.mean,
            h.post_attack.mean,
            h.post_attack.n
        );
    }
    log::info!("outputs in {}", out.display());
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(Failure::Usage(format!("unsupported manifest schema `{}`", m.schema)));
    }
    Ok(m)
}

#[derive(Serialize)]
struct SeedScores {
    seed: u64,
    post_attack: Vec<HitRatios>,
    rmse: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let m = read_manifest(&a.manifest)?;
    let dir = a.manifest.parent().unwrap_or(Path::new("."));
    let seeds: Vec<u64> = match a.seed {
        Some(s) if m.artifacts.checkpoints.contains_key(&s) => vec![s],
        Some(s) => return Err(Failure::Usage(format!("seed {s} has no checkpoint in the manifest"))),
        None => m.artifacts.checkpoints.keys().copied().collect(),
    };
    let cfg = &m.config;
    let mut scores = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let prepared = prepare_seed(cfg, seed)?;
        let prof_path = dir.join(&m.artifacts.profiles[&seed]);
        let profiles = read_profiles(&prepared.graph, fs::File::open(&prof_path)?)?;
        let ckpt = read_checkpoint(fs::File::open(dir.join(&m.artifacts.checkpoints[&seed]))?)?;
        let model = joint_from_checkpoint(&ckpt)?;
        let (poisoned, types) = poisoned_graph(&prepared, cfg, &profiles)?;
        let graph = defended_graph(cfg, poisoned, &types);
        let (post_attack, rmse) = score_model(&prepared, cfg, &graph, &types, &model)?;
        scores.push(SeedScores { seed, post_attack, rmse });
    }
    let text = to_json_6(&scores)?;
    match &a.output {
        Some(p) => write_atomic(p, |w| Ok(w.write_all(text.as_bytes())?))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
