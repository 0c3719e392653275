//! Command-line pipeline: build the script database, plan a long script
//! for a scene, simulate episodes, and evaluate traces.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O failure,
//! 3 infeasible (plan cannot be satisfied on the scene).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingProvider, HttpEmbedder, TestEmbedder, DEFAULT_DIM};
use crate::fsm::{run_episode, EpisodeContext, ExecutionTrace, TerminationReason};
use crate::metrics::{evaluate_traces, EvalReport};
use crate::planner::{plan, HttpNarrative, LongScript, NarrativeProvider, PlanError, Theme};
use crate::scene::load_scene;
use crate::scriptdb::{ScriptDatabase, ShortScript, StyleLabel};
use crate::skills::{kinematic_registry, StubStyleReward};
use crate::tasks::EpisodeConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "scenescript",
    version,
    about = "Deterministic text-to-interaction planning and simulation harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate, embed, and persist a script database.
    BuildDb {
        /// JSON array of short-script records.
        scripts: PathBuf,
        /// Output database path (JSON-lines).
        #[arg(long)]
        out: PathBuf,
        /// Embedding seed for the deterministic embedder.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Plan a long script for a scene from a theme.
    Plan {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        theme: String,
        /// Styles to select.
        #[arg(long, default_value_t = crate::planner::DEFAULT_M)]
        m: usize,
        /// Scripts retrieved per style.
        #[arg(long, default_value_t = crate::planner::DEFAULT_K)]
        k: usize,
        /// Skip the narrative endpoint even if configured.
        #[arg(long)]
        no_llm: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output long-script JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run seeded episodes of a long script on a scene.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        /// Long-script JSON from `plan`.
        #[arg(long)]
        script: PathBuf,
        /// Episode config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads; 1 runs sequentially.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Aggregate metrics over a directory of trace files.
    Evaluate {
        /// Directory containing trace_*.json files.
        traces: PathBuf,
        /// Report JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional per-skill CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Written alongside every output for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub output: String,
    pub config: Option<String>,
    pub version: String,
}

impl RunManifest {
    fn new(command: &str, seed: u64, inputs: &[&Path], output: &Path, config: Option<&Path>) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            output: output.display().to_string(),
            config: config.map(|p| p.display().to_string()),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

enum CliError {
    Validation(String),
    Io(String),
    Infeasible(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) | CliError::Infeasible(m) => m,
        }
    }
}

fn io_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}

/// The embedding provider: an HTTP service when the endpoint env var is
/// set, the deterministic hash embedder otherwise.
fn make_embedder(seed: u64) -> Box<dyn EmbeddingProvider> {
    match HttpEmbedder::from_env(DEFAULT_DIM) {
        Some(http) => Box::new(http),
        None => Box::new(TestEmbedder::new(DEFAULT_DIM, seed)),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| io_err("serialize", e))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err("create output dir", e))?;
        }
    }
    fs::write(path, text).map_err(|e| io_err(&format!("write {}", path.display()), e))
}

fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.json")
    } else {
        output.with_extension("manifest.json")
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    run_command(cli.command)
}

/// Testable entry point over explicit argv (excluding the binary name).
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = std::iter::once("scenescript".to_string())
        .chain(args.into_iter().map(Into::into))
        .collect();
    match Cli::try_parse_from(argv) {
        Ok(cli) => run_command(cli.command),
        Err(e) => {
            eprintln!("{e}");
            EXIT_VALIDATION
        }
    }
}

fn run_command(command: Command) -> i32 {
    let result = match command {
        Command::BuildDb { scripts, out, seed } => cmd_build_db(&scripts, &out, seed),
        Command::Plan {
            db,
            scene,
            theme,
            m,
            k,
            no_llm,
            seed,
            out,
        } => cmd_plan(&db, &scene, &theme, m, k, no_llm, seed, &out),
        Command::Simulate {
            scene,
            script,
            config,
            episodes,
            seed,
            parallel,
            out_dir,
        } => cmd_simulate(
            &scene,
            &script,
            config.as_deref(),
            episodes,
            seed,
            parallel,
            &out_dir,
        ),
        Command::Evaluate { traces, out, csv } => {
            cmd_evaluate(&traces, out.as_deref(), csv.as_deref())
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn cmd_build_db(scripts_path: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let text = fs::read_to_string(scripts_path)
        .map_err(|e| io_err(&format!("read {}", scripts_path.display()), e))?;
    let scripts: Vec<ShortScript> = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("parse {}: {e}", scripts_path.display())))?;
    let embedder = make_embedder(seed);
    let mut db = ScriptDatabase::new();
    let mut problems = Vec::new();
    for script in scripts {
        let id = script.id.clone();
        if let Err(e) = db.insert_script(script, embedder.as_ref()) {
            problems.push(format!("{id}: {e}"));
        }
    }
    if !problems.is_empty() {
        // Atomic by construction: nothing was written yet.
        return Err(CliError::Validation(problems.join("\n")));
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err("create output dir", e))?;
        }
    }
    db.save(out)
        .map_err(|e| io_err(&format!("write {}", out.display()), e))?;
    let mut counts: BTreeMap<StyleLabel, usize> = BTreeMap::new();
    for (script, _) in db.iter() {
        *counts.entry(script.style_label).or_insert(0) += 1;
    }
    println!("wrote {} scripts to {}", db.len(), out.display());
    for (style, count) in counts {
        println!("  {:10} {count}", style.name());
    }
    let manifest = RunManifest::new("build-db", seed, &[scripts_path], out, None);
    write_json(&manifest_path(out), &manifest)
}

#[allow(clippy::too_many_arguments)]
fn cmd_plan(
    db_path: &Path,
    scene_path: &Path,
    theme_text: &str,
    m: usize,
    k: usize,
    no_llm: bool,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let db = ScriptDatabase::load(db_path)
        .map_err(|e| io_err(&format!("load {}", db_path.display()), e))?;
    let scene = load_scene(scene_path)
        .map_err(|e| io_err(&format!("load {}", scene_path.display()), e))?;
    let embedder = make_embedder(seed);
    let narrative: Option<HttpNarrative> = if no_llm {
        None
    } else {
        HttpNarrative::from_env()
    };
    let narrative_ref: Option<&dyn NarrativeProvider> =
        narrative.as_ref().map(|n| n as &dyn NarrativeProvider);
    let theme = Theme::new(theme_text);
    let script = plan(&db, &scene, &theme, m, k, embedder.as_ref(), narrative_ref).map_err(
        |e| match e {
            PlanError::Unsatisfiable { .. } => CliError::Infeasible(e.to_string()),
            PlanError::NoCandidates => CliError::Infeasible(e.to_string()),
            other => CliError::Validation(other.to_string()),
        },
    )?;
    write_json(out, &script)?;
    println!("planned {} keyframes for theme {theme_text:?}:", script.keyframes.len());
    println!("  idx skill  object            caption");
    for (i, kf) in script.keyframes.iter().enumerate() {
        let bound = script
            .scene_binding
            .get(&i)
            .cloned()
            .or_else(|| kf.object.clone())
            .unwrap_or_else(|| "-".into());
        println!(
            "  {i:>3} {:6} {:17} {}",
            kf.skill.to_string(),
            bound,
            kf.caption.as_deref().unwrap_or("-")
        );
    }
    let manifest = RunManifest::new("plan", seed, &[db_path, scene_path], out, None);
    write_json(&manifest_path(out), &manifest)
}

fn cmd_simulate(
    scene_path: &Path,
    script_path: &Path,
    config_path: Option<&Path>,
    episodes: usize,
    seed: u64,
    parallel: usize,
    out_dir: &Path,
) -> Result<(), CliError> {
    let scene = load_scene(scene_path)
        .map_err(|e| io_err(&format!("load {}", scene_path.display()), e))?;
    let script_text = fs::read_to_string(script_path)
        .map_err(|e| io_err(&format!("read {}", script_path.display()), e))?;
    let script: LongScript = serde_json::from_str(&script_text)
        .map_err(|e| CliError::Validation(format!("parse {}: {e}", script_path.display())))?;
    let cfg = match config_path {
        Some(p) => EpisodeConfig::load(p)
            .map_err(|e| io_err(&format!("load {}", p.display()), e))?,
        None => EpisodeConfig::default(),
    };
    let registry = kinematic_registry();
    let embedder = make_embedder(seed);
    let style = StubStyleReward;
    let ctx = EpisodeContext {
        scene: &scene,
        cfg: &cfg,
        registry: &registry,
        embedder: embedder.as_ref(),
        style: &style,
    };
    fs::create_dir_all(out_dir).map_err(|e| io_err("create output dir", e))?;

    let run_one = |i: usize| -> Result<ExecutionTrace, String> {
        run_episode(&ctx, script.clone(), seed + i as u64).map_err(|e| e.to_string())
    };
    // Episodes are independent and seeded individually, so results are
    // identical no matter how many workers run them.
    let results: Vec<Result<ExecutionTrace, String>> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| io_err("thread pool", e))?;
        pool.install(|| (0..episodes).into_par_iter().map(run_one).collect())
    } else {
        (0..episodes).map(run_one).collect()
    };

    let mut wrote = 0usize;
    for (i, result) in results.into_iter().enumerate() {
        let trace = result.map_err(CliError::Validation)?;
        let ticks = trace.records.len();
        let ok = trace
            .outcomes
            .iter()
            .filter(|o| o.success)
            .count();
        println!(
            "episode {i:>3} seed {:>4}: {:?} after {ticks} ticks, {ok}/{} keyframes",
            trace.seed,
            trace.termination,
            trace.outcomes.len()
        );
        if trace.termination == TerminationReason::Infeasible {
            // Reported above; the batch continues.
        }
        write_json(&out_dir.join(format!("trace_{i:04}.json")), &trace)?;
        wrote += 1;
    }
    println!("wrote {wrote} traces to {}", out_dir.display());
    let manifest = RunManifest::new(
        "simulate",
        seed,
        &[scene_path, script_path],
        out_dir,
        config_path,
    );
    write_json(&out_dir.join("manifest.json"), &manifest)
}

fn cmd_evaluate(
    traces_dir: &Path,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(traces_dir)
        .map_err(|e| io_err(&format!("read {}", traces_dir.display()), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("trace_") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Validation(format!(
            "no trace files in {}",
            traces_dir.display()
        )));
    }
    let mut traces = Vec::with_capacity(paths.len());
    for path in &paths {
        let text = fs::read_to_string(path)
            .map_err(|e| io_err(&format!("read {}", path.display()), e))?;
        let trace: ExecutionTrace = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("parse {}: {e}", path.display())))?;
        traces.push(trace);
    }
    let report = evaluate_traces(&traces, None);
    match out {
        Some(path) => {
            write_json(path, &report)?;
            let manifest = RunManifest::new("evaluate", 0, &[traces_dir], path, None);
            write_json(&manifest_path(path), &manifest)?;
        }
        None => {
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| io_err("serialize report", e))?;
            println!("{text}");
        }
    }
    if let Some(csv_path) = csv {
        write_csv(csv_path, &report)?;
    }
    Ok(())
}

fn write_csv(path: &Path, report: &EvalReport) -> Result<(), CliError> {
    let mut lines = vec!["skill,success_rate_pct,contact_error_m".to_string()];
    for (skill, rate) in &report.success_rate {
        let err = report
            .contact_error
            .get(skill)
            .map(|e| format!("{e:.6}"))
            .unwrap_or_default();
        lines.push(format!("{skill},{rate:.2},{err}"));
    }
    fs::write(path, lines.join("\n") + "\n")
        .map_err(|e| io_err(&format!("write {}", path.display()), e))
}
