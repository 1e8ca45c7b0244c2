use bevground_core::disco::{assign, query_centers, DiscoError};
use bevground_core::engine::{
    ablation_run, evaluate, gradcheck, load_checkpoint, prepare, save_checkpoint, train_with,
    curve_to_rows, Checkpoint, ConfigError, EngineError, RunConfig, KEYS,
};
use bevground_core::featurize::featurize;
use bevground_core::model::{forward, Injection, ModelError};
use bevground_core::scenegen::{self, generate, DatasetError, Difficulty, Role, SceneBounds, Scenario, Vocabulary};
use bevground_core::tensor::{Graph, TensorError};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const USAGE: u8 = 1;
const IO: u8 = 2;
const NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "bevground", version, about = "Language-guided 3D object grounding on synthetic LiDAR scenes")]
struct Cli {
    /// Built-in configuration the file and overrides are layered on.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Config file of `key = value` lines; wins over the preset.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Level {
    Easy,
    Ambiguous,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Jsonl,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scenario dataset.
    Gen {
        /// Generator seed [default: the config seed]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Level::Ambiguous)]
        difficulty: Level,
        /// Half-width of the square scene in meters [default: the config grid's x_max]
        #[arg(long)]
        extent: Option<f64>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long = "out-checkpoint", value_name = "FILE")]
        out_checkpoint: PathBuf,
        /// Also write the per-step loss curve as CSV.
        #[arg(long, value_name = "FILE")]
        curve: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints accuracy at IoU 0.25 and 0.5.
    Eval {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Also write one scored prediction per scenario as JSON lines.
        #[arg(long, value_name = "FILE")]
        predictions: Option<PathBuf>,
    },
    /// Show how each inference query would be pseudo-labelled.
    Label {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Match distance in meters [default: the checkpoint's tau]
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Train and evaluate the four selection / joint-supervision variants.
    Ablate {
        #[arg(long = "train-data", value_name = "FILE")]
        train_data: PathBuf,
        #[arg(long = "test-data", value_name = "FILE")]
        test_data: PathBuf,
        /// Number of training seeds, starting at the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Probe at most this many coordinates per parameter tensor [default: all]
        #[arg(long)]
        max_coords: Option<usize>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: IO,
            message: message.into(),
        }
    }

    fn from_config_ref(c: &ConfigError, message: String) -> Self {
        let code = match c {
            ConfigError::Parse { .. } | ConfigError::Io { .. } => IO,
            _ => USAGE,
        };
        Self { code, message }
    }
}

fn non_finite_tensor(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::from_config_ref(&e, e.to_string())
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let code = match &e {
            EngineError::Config(c) => return Failure::from_config_ref(c, e.to_string()),
            EngineError::Divergence { .. } => NUMERIC,
            EngineError::Tensor(t) | EngineError::Model(ModelError::Tensor(t)) if non_finite_tensor(t) => NUMERIC,
            EngineError::Disco(DiscoError::NonFinite { .. }) => NUMERIC,
            EngineError::Model(ModelError::Geometry(_)) => NUMERIC,
            EngineError::Io { .. } | EngineError::Format { .. } | EngineError::Vocabulary(_) | EngineError::EmptyDataset => IO,
            _ => NUMERIC,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::io(e.to_string())
    }
}

fn presets_help() -> String {
    let desk = RunConfig::desk();
    let paper = RunConfig::paper();
    let mut out = String::from("Config keys (desk default | paper preset):\n");
    for key in KEYS {
        let a = desk.get(key).unwrap_or_default();
        let b = paper.get(key).unwrap_or_default();
        out.push_str(&format!("  {key:<14} {a:<10} | {b}\n"));
    }
    out.push_str("\nExit codes: 0 success, 1 usage, 2 IO or parse, 3 numeric failure.");
    out
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let base = match cli.preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Paper => RunConfig::paper(),
    };
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, base)?,
        None => base,
    };
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<Vec<Scenario>, Failure> {
    scenegen::load(path).map_err(|e| match e {
        DatasetError::Parse { .. } => Failure::io(format!("{}: {e}", path.display())),
        other => other.into(),
    })
}

/// Loads a checkpoint and layers the command-line overrides over its
/// config; overrides may not change the trained model's shape.
fn checkpoint_with_overrides(path: &Path, cli: &Cli) -> Result<Checkpoint, Failure> {
    let mut c = load_checkpoint(path)?;
    let before = c.config.model_config();
    if let Some(file) = &cli.config {
        c.config = RunConfig::load(file, c.config.clone())?;
    }
    c.config.apply_overrides(&cli.overrides)?;
    c.config.validate()?;
    if c.config.model_config() != before {
        return Err(Failure::usage(
            "overrides change the model or grid of a trained checkpoint",
        ));
    }
    Ok(c)
}

fn run_gen(
    cfg: &RunConfig,
    seed: Option<u64>,
    count: usize,
    difficulty: Level,
    extent: Option<f64>,
    out: &Path,
) -> Result<(), Failure> {
    if count == 0 {
        return Err(Failure::usage("count must be positive"));
    }
    let difficulty = match difficulty {
        Level::Easy => Difficulty::Easy,
        Level::Ambiguous => Difficulty::Ambiguous,
    };
    let extent = extent.unwrap_or(cfg.grid.x_range.1);
    let seed = seed.unwrap_or(cfg.seed);
    let scenarios = generate(seed, count, difficulty, SceneBounds { extent })
        .map_err(|e| Failure::usage(e.to_string()))?;
    scenegen::save(out, &scenarios)?;

    let distractors: Vec<usize> = scenarios
        .iter()
        .map(|s| s.objects.iter().filter(|o| o.role == Role::Ambiguous).count())
        .collect();
    let objects: usize = scenarios.iter().map(|s| s.objects.len()).sum();
    let points: usize = scenarios.iter().map(|s| s.points.len()).sum();
    let n = scenarios.len() as f64;
    println!("wrote {} scenarios to {}", scenarios.len(), out.display());
    println!("difficulty {difficulty:?}, seed {seed}, extent {extent} m");
    println!("objects per scenario: {:.2}", objects as f64 / n);
    println!("points per scenario: {:.1}", points as f64 / n);
    println!(
        "look-alike distractors per scenario: min {} mean {:.2} max {}",
        distractors.iter().min().copied().unwrap_or(0),
        distractors.iter().sum::<usize>() as f64 / n,
        distractors.iter().max().copied().unwrap_or(0)
    );
    if difficulty == Difficulty::Ambiguous {
        let mut counts: Vec<(String, usize)> = Vec::new();
        for s in &scenarios {
            let name = s
                .relation
                .map(|r| serde_json::to_value(r).expect("plain data").as_str().unwrap_or_default().to_string())
                .unwrap_or_default();
            match counts.iter_mut().find(|c| c.0 == name) {
                Some(c) => c.1 += 1,
                None => counts.push((name, 1)),
            }
        }
        counts.sort();
        let parts: Vec<String> = counts.iter().map(|(r, c)| format!("{r} {c}")).collect();
        println!("relations: {}", parts.join(", "));
    }
    Ok(())
}

fn run_train(cfg: &RunConfig, data: &Path, out: &Path, curve_path: Option<&Path>) -> Result<(), Failure> {
    let scenarios = load_data(data)?;
    let prepared = prepare(&scenarios, cfg)?;
    let mut epoch_sum = 0.0;
    let mut epoch_steps = 0usize;
    let mut current = 0usize;
    let outcome = train_with(&prepared, cfg, &mut |r| {
        if r.epoch != current {
            eprintln!("epoch {current:>3}  loss {:.4}", epoch_sum / epoch_steps.max(1) as f64);
            current = r.epoch;
            epoch_sum = 0.0;
            epoch_steps = 0;
        }
        epoch_sum += r.loss.total;
        epoch_steps += 1;
    })?;
    eprintln!("epoch {current:>3}  loss {:.4}", epoch_sum / epoch_steps.max(1) as f64);
    save_checkpoint(
        out,
        &Checkpoint {
            config: cfg.clone(),
            params: outcome.params,
        },
    )?;
    if let Some(path) = curve_path {
        write_file(path, &curve_to_rows(&outcome.curve))?;
    }
    println!(
        "trained {} steps on {} scenarios; checkpoint {}",
        outcome.curve.len(),
        scenarios.len(),
        out.display()
    );
    Ok(())
}

fn run_eval(c: &Checkpoint, data: &Path, format: Format, predictions: Option<&Path>) -> Result<(), Failure> {
    let scenarios = load_data(data)?;
    let prepared = prepare(&scenarios, &c.config)?;
    let (report, preds) = evaluate(&prepared, &c.params, &c.config)?;
    match format {
        Format::Table => print!("{}", report.to_table()),
        Format::Jsonl => print!("{}", report.to_jsonl()),
    }
    if let Some(path) = predictions {
        let text: String = preds
            .iter()
            .map(|p| serde_json::to_string(p).expect("plain data") + "\n")
            .collect();
        write_file(path, &text)?;
    }
    Ok(())
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Target => "target",
        Role::Contextual => "contextual",
        Role::Ambiguous => "ambiguous",
        Role::Background => "background",
    }
}

fn run_label(c: &Checkpoint, data: &Path, tau: f64) -> Result<(), Failure> {
    let scenarios = load_data(data)?;
    let mcfg = c.config.model_config();
    let vocab = Vocabulary::standard();
    let (mut queries, mut matched, mut referential) = (0usize, 0usize, 0usize);
    for s in &scenarios {
        let f = featurize(s, &c.config.grid, &vocab).map_err(EngineError::from)?;
        let mut g = Graph::new();
        let p = c.params.bind(&mut g);
        let out = forward(&mut g, &p, &mcfg, &f.stats, &f.tokens, Injection::NONE).map_err(EngineError::from)?;
        let centers = query_centers(&out.queries, &c.config.grid);
        let a = assign(&centers, &f.boxes, f.target, tau).map_err(|e| match e {
            DiscoError::Assignment(m) => Failure::usage(m),
            other => EngineError::from(other).into(),
        })?;
        let rows: Vec<serde_json::Value> = a
            .matches
            .iter()
            .zip(&centers)
            .zip(&out.queries.positions)
            .map(|((m, center), cell)| {
                json!({
                    "cell": cell,
                    "center": center,
                    "nearest": m.nearest,
                    "distance": m.distance,
                    "object": m.object,
                    "role": m.object.map(|j| role_name(s.objects[j].role)),
                    "target": m.is_target,
                })
            })
            .collect();
        queries += a.matches.len();
        matched += a.matches.iter().filter(|m| m.object.is_some()).count();
        referential += a.referential.len();
        let line = json!({
            "id": s.id,
            "tau": tau,
            "queries": rows,
            "referential": a.referential,
            "target": a.target_index,
        });
        println!("{line}");
    }
    eprintln!(
        "{} scenarios, {queries} queries, {matched} matched, {referential} referential objects (tau {tau})",
        scenarios.len()
    );
    Ok(())
}

fn run_ablate(cfg: &RunConfig, train_path: &Path, test_path: &Path, seeds: u64) -> Result<(), Failure> {
    if seeds == 0 {
        return Err(Failure::usage("seeds must be positive"));
    }
    let train_set = load_data(train_path)?;
    let test_set = load_data(test_path)?;
    let seeds: Vec<u64> = (0..seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    let table = ablation_run(&train_set, &test_set, cfg, &seeds, &mut |label, seed, acc| {
        eprintln!("{label:<10} seed {seed:<4} 3D@0.25 {:6.2}  3D@0.5 {:6.2}", acc[0], acc[1]);
    })?;
    print!("{}", table.to_table());
    Ok(())
}

fn run_gradcheck(max_coords: Option<usize>) -> Result<(), Failure> {
    let mut checks = gradcheck::op_checks().map_err(EngineError::from)?;
    checks.extend(gradcheck::loss_checks().map_err(EngineError::from)?);
    checks.extend(gradcheck::full_loss_checks(max_coords)?);
    let failed = checks.iter().filter(|c| !c.passed()).count();
    for c in &checks {
        let mark = if c.passed() { "ok  " } else { "FAIL" };
        println!("{mark} {:<36} {:>6} coords  max rel err {:.3e}", c.name, c.coords, c.max_rel_error);
    }
    println!(
        "{} checks, {failed} failed (tolerance {:e}, step {:e})",
        checks.len(),
        gradcheck::TOLERANCE,
        gradcheck::STEP
    );
    if failed > 0 {
        return Err(Failure {
            code: NUMERIC,
            message: format!("{failed} gradient checks exceeded tolerance"),
        });
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    // Config problems surface before any command does work.
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Gen {
            seed,
            count,
            difficulty,
            extent,
            out,
        } => run_gen(&cfg, *seed, *count, *difficulty, *extent, out),
        Command::Train {
            data,
            out_checkpoint,
            curve,
        } => run_train(&cfg, data, out_checkpoint, curve.as_deref()),
        Command::Eval {
            data,
            checkpoint,
            format,
            predictions,
        } => {
            let c = checkpoint_with_overrides(checkpoint, cli)?;
            run_eval(&c, data, *format, predictions.as_deref())
        }
        Command::Label { data, checkpoint, tau } => {
            let c = checkpoint_with_overrides(checkpoint, cli)?;
            let tau = tau.unwrap_or(c.config.tau);
            run_label(&c, data, tau)
        }
        Command::Ablate {
            train_data,
            test_data,
            seeds,
        } => run_ablate(&cfg, train_data, test_data, *seeds),
        Command::Gradcheck { max_coords } => run_gradcheck(*max_coords),
    }
}

fn main() -> ExitCode {
    let help = presets_help();
    let mut cmd = Cli::command().after_help(help.clone());
    for name in ["gen", "train", "eval", "label", "ablate", "gradcheck"] {
        let h = help.clone();
        cmd = cmd.mut_subcommand(name, move |s| s.after_help(h));
    }
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(USAGE);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
