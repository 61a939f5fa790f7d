//! Subcommands. Settings resolve as flag, then `OODSIM_*` environment variable, then the
//! `--config` file, then the built-in default.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use oodsim_core::data::{build_windows, synth_generate, Dataset, SynthConfig};
use oodsim_core::model::{Batch, ModelConfig, WindowInput, WorldModel};
use oodsim_core::sim::{Scenario, Simulator};
use oodsim_core::train::{evaluate, frames, model_grad_check, Checkpoint, Prepared, Protocol, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::api::{self, ApiError, ApiResult, ErrorCode};
use crate::server::{self, AppState};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Parser, Debug)]
#[command(name = "oodsim", version, about = "Policy-conditioned overdose forecasting world model")]
pub struct Cli {
    /// Print results as compact JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// JSON settings file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Directory with states.csv, adjacency.csv, policies.jsonl and entities.jsonl.
    #[arg(long, env = "OODSIM_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, env = "OODSIM_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    Id,
    Ood,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Id => Protocol::Id,
            ProtocolArg::Ood => Protocol::Ood,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a data directory and optionally write a canonical copy.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic data directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Test-period metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
    },
    /// Forecast a scenario file.
    Forecast {
        #[command(flatten)]
        model: ModelArgs,
        /// Scenario JSON, `-` for stdin.
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Factual and edited forecasts for a `{scenario, edit}` request file.
    Counterfactual {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        request: PathBuf,
    },
    /// Search policy schedules for an optimize request file.
    Optimize {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        request: PathBuf,
        /// Enumerate every schedule instead of tree search.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Codebook operations.
    Codebook {
        #[command(subcommand)]
        action: CodebookCommand,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, env = "OODSIM_BIND")]
        bind: Option<String>,
    },
    /// Compare analytic and finite-difference gradients on a small synthetic instance.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Loaded model status.
    Health {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// States and month range.
    States {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Policy records.
    Policies {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        state: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum CodebookCommand {
    /// Write the codes and their usage counts.
    Export {
        #[arg(long, env = "OODSIM_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub bind: Option<String>,
    pub seed: Option<u64>,
    pub train: Option<TrainConfig>,
    pub synth: Option<SynthConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(ApiError),
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure::Domain(e)
    }
}

impl From<oodsim_core::Error> for Failure {
    fn from(e: oodsim_core::Error) -> Self {
        Failure::Domain(e.into())
    }
}

fn required(value: Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    value
        .or_else(|| file.clone())
        .ok_or_else(|| Failure::Usage(format!("missing --{what} (or OODSIM_{} / config file)", what.to_uppercase().replace('-', "_"))))
}

fn read_input(path: &Path) -> ApiResult<Vec<u8>> {
    let read = if path == Path::new("-") {
        let mut buf = Vec::new();
        std::io::Read::read_to_end(&mut std::io::stdin(), &mut buf).map(|_| buf)
    } else {
        std::fs::read(path)
    };
    read.map_err(|e| ApiError::bad_request(format!("cannot read {}: {e}", path.display())))
}

struct Context {
    file: FileConfig,
}

impl Context {
    fn data(&self, args: &DataArgs) -> Result<Dataset, Failure> {
        let dir = required(args.data_dir.clone(), &self.file.data_dir, "data-dir")?;
        Ok(Dataset::load_dir(&dir)?)
    }

    fn checkpoint(&self, path: Option<PathBuf>) -> Result<Checkpoint, Failure> {
        let path = required(path, &self.file.checkpoint, "checkpoint")?;
        Ok(Checkpoint::load(&path)?)
    }

    fn simulator(&self, args: &ModelArgs) -> Result<Simulator, Failure> {
        let ckpt = self.checkpoint(args.checkpoint.clone())?;
        let data = self.data(&args.data)?;
        Ok(Simulator::new(ckpt, data)?)
    }
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    states: usize,
    months: usize,
    first_month: oodsim_core::Month,
    last_month: oodsim_core::Month,
    channels: Vec<String>,
    edges: usize,
    policies: usize,
    entities: usize,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    hash: String,
    best_epoch: usize,
    epochs: usize,
    best_val_mae: f64,
}

#[derive(Debug, Serialize)]
pub struct GradcheckSummary {
    pub passed: bool,
    pub tolerance: f64,
    pub report: oodsim_core::train::GradCheckReport,
}

/// Relative-error bound for `gradcheck`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Gradient check of the full model (d = 8, three history months, two horizon months).
pub fn gradcheck(seed: u64) -> Result<GradcheckSummary, Failure> {
    let data: Dataset = synth_generate(seed, &SynthConfig::default())?.into();
    let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::tiny(8, 3, 2) };
    let model = WorldModel::for_dataset(cfg, &data, seed)?;
    let split = oodsim_core::train::SplitConfig::default().resolve(data.panel.states(), data.panel.num_months(), seed)?;
    let stats = oodsim_core::data::NormStats::fit(&data.panel, split.train.clone())?;
    let prepared = Prepared::new(&model, &data, stats, &[])?;
    let late = split.train.end.saturating_sub(18)..split.train.end;
    let windows: Vec<_> = build_windows(&data.panel, 3, 2, late, &[0, 5, 11])?.into_iter().step_by(4).collect();
    let inputs: Vec<WindowInput> = windows.iter().map(|w| prepared.window_input(w)).collect();
    let frames = frames(&prepared.inputs);
    let batch = Batch { graph: &data.graph, frames: &frames, policy_sets: &prepared.sets, windows: &inputs };
    let target = prepared.targets(&windows).into_shape_with_order((windows.len() * 2, 1)).expect("contiguous");
    let report = model_grad_check(&model, &batch, &target, 1.0, 1e-5)?;
    Ok(GradcheckSummary { passed: report.max_rel < GRAD_TOLERANCE, tolerance: GRAD_TOLERANCE, report })
}

/// What a command prints on success.
enum Output {
    Json(String, Option<String>),
    Done,
}

fn out<T: Serialize>(value: &T) -> Output {
    let pretty = serde_json::to_string_pretty(value).expect("serialisable");
    Output::Json(api::to_json(value), Some(pretty))
}

fn execute(cli: Cli) -> Result<Output, Failure> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Context { file };
    match cli.command {
        Command::Ingest { data, out: target } => {
            let d = ctx.data(&data)?;
            if let Some(dir) = target {
                d.write_dir(&dir)?;
            }
            Ok(out(&IngestSummary {
                states: d.panel.num_states(),
                months: d.panel.num_months(),
                first_month: d.panel.first_month(),
                last_month: d.panel.last_month(),
                channels: d.panel.channels().to_vec(),
                edges: d.graph.num_edges(),
                policies: d.corpus.len(),
                entities: d.entities.len(),
            }))
        }
        Command::Synth { out: dir, seed } => {
            let cfg = ctx.file.synth.clone().unwrap_or_default();
            let seed = seed.or(ctx.file.seed).unwrap_or(0);
            let world = synth_generate(seed, &cfg)?;
            let data: Dataset = world.into();
            data.write_dir(&dir)?;
            Ok(out(&serde_json::json!({ "out": dir, "seed": seed, "states": data.panel.num_states(), "months": data.panel.num_months(), "policies": data.corpus.len() })))
        }
        Command::Train { data, out: path, seed, protocol, epochs } => {
            let d = ctx.data(&data)?;
            let mut cfg = ctx.file.train.clone().unwrap_or_default();
            if let Some(s) = seed.or(ctx.file.seed) {
                cfg.seed = s;
            }
            if let Some(p) = protocol {
                cfg.split.protocol = p.into();
            }
            if let Some(e) = epochs {
                cfg.max_epochs = e;
            }
            let ckpt = Trainer::new(&d, &cfg)?.run(|r| log::info!("epoch {} val_mae {:.5}", r.epoch, r.val_mae))?;
            ckpt.save(&path)?;
            let best = ckpt.history.iter().find(|r| r.epoch == ckpt.best_epoch).map_or(f64::NAN, |r| r.val_mae);
            Ok(out(&TrainSummary {
                checkpoint: path,
                hash: ckpt.hash(),
                best_epoch: ckpt.best_epoch,
                epochs: ckpt.history.len(),
                best_val_mae: best,
            }))
        }
        Command::Eval { model, protocol } => {
            let ckpt = ctx.checkpoint(model.checkpoint.clone())?;
            let d = ctx.data(&model.data)?;
            let protocol = protocol.map_or(ckpt.split.protocol, Protocol::from);
            Ok(out(&evaluate(&ckpt, &d, protocol)?))
        }
        Command::Forecast { model, scenario } => {
            let sim = ctx.simulator(&model)?;
            let scenario: Scenario = api::parse(&read_input(&scenario)?)?;
            Ok(out(&api::forecast(&sim, &scenario)?))
        }
        Command::Counterfactual { model, request } => {
            let sim = ctx.simulator(&model)?;
            let req: api::CounterfactualRequest = api::parse(&read_input(&request)?)?;
            Ok(out(&api::counterfactual(&sim, &req)?))
        }
        Command::Optimize { model, request, exhaustive } => {
            let sim = ctx.simulator(&model)?;
            let req: api::OptimizeRequest = api::parse(&read_input(&request)?)?;
            if exhaustive {
                let plan = sim.optimize_exhaustive(&req.scenario, req.pool.as_deref(), req.depth, req.max_subset)?;
                Ok(out(&plan))
            } else {
                Ok(out(&api::optimize(&sim, &req, false)?))
            }
        }
        Command::Codebook { action: CodebookCommand::Export { checkpoint, out: target } } => {
            let ckpt = ctx.checkpoint(checkpoint)?;
            let response = api::codebook(&ckpt);
            match target {
                Some(path) => {
                    std::fs::write(&path, api::to_json(&response))
                        .map_err(|e| ApiError::new(ErrorCode::Internal, format!("cannot write {}: {e}", path.display())))?;
                    Ok(Output::Done)
                }
                None => Ok(out(&response)),
            }
        }
        Command::Serve { model, bind } => {
            let sim = ctx.simulator(&model)?;
            let bind = bind.or(ctx.file.bind.clone()).unwrap_or_else(|| DEFAULT_BIND.into());
            let rt = tokio::runtime::Runtime::new()
                .map_err(|e| ApiError::new(ErrorCode::Internal, format!("cannot start runtime: {e}")))?;
            rt.block_on(server::serve(AppState::new(sim), &bind))
                .map_err(|e| ApiError::new(ErrorCode::Internal, format!("server on {bind} failed: {e}")))?;
            Ok(Output::Done)
        }
        Command::Gradcheck { seed } => {
            let summary = gradcheck(seed.or(ctx.file.seed).unwrap_or(3))?;
            if !summary.passed {
                let msg = format!("largest relative gradient error {:e} exceeds {GRAD_TOLERANCE:e}", summary.report.max_rel);
                return Err(ApiError::new(ErrorCode::Internal, msg)
                    .with("report", api::to_json(&summary.report))
                    .into());
            }
            Ok(out(&summary))
        }
        Command::Health { model } => {
            let sim = ctx.simulator(&model)?;
            let hash = sim.checkpoint().hash();
            Ok(out(&api::health(Some(&sim), Some(&hash))))
        }
        Command::States { model } => Ok(out(&api::states(&ctx.simulator(&model)?))),
        Command::Policies { model, state } => Ok(out(&api::policies(&ctx.simulator(&model)?, state.as_deref())?)),
    }
}

/// Parses `args`, runs the command and returns the process exit code: 0 on success, 1 on a
/// domain error and 2 on a usage error.
pub fn run<I, T>(args: I, stdout: &mut impl Write, stderr: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    let json = cli.json;
    match execute(cli) {
        Ok(Output::Json(compact, pretty)) => {
            let text = if json { compact } else { pretty.unwrap_or(compact) };
            let _ = writeln!(stdout, "{text}");
            0
        }
        Ok(Output::Done) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}\n\n{}", Cli::command_usage());
            2
        }
        Err(Failure::Domain(e)) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            if json {
                let _ = writeln!(stdout, "{}", api::to_json(&e));
            }
            1
        }
    }
}

impl Cli {
    fn command_usage() -> String {
        use clap::CommandFactory;
        Cli::command().render_usage().to_string()
    }
}
