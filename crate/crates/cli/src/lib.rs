//! The `flod` command line: scene generation, training, rendering,
//! evaluation and the frame service.

pub mod commands;
pub mod error;
pub mod protocol;
pub mod serve;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use flod_core::defaults::Defaults;
use flod_core::selective::ReferencePolicy;

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "flod", version, about = "Multi-level Gaussian splatting tools")]
pub struct Cli {
    /// TOML file overriding the numeric defaults table.
    #[arg(long, global = true, env = "FLOD_DEFAULTS")]
    pub defaults: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of random Gaussians seen by a camera ring.
    GenScene(GenSceneArgs),
    /// Train a multi-level model on a dataset directory.
    Train(TrainArgs),
    /// Render one level or a selective level range.
    Render(RenderArgs),
    /// Compare rendered images with reference images.
    Eval(EvalArgs),
    /// Serve frames over WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub res: u32,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    #[arg(long, default_value_t = 4.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 3)]
    pub lmax: u32,
    /// TOML training configuration; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Multiplies every iteration count and interval.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an interrupted run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReferenceArg {
    /// Mean training camera center from the manifest.
    Fixed,
    /// Each rendered camera's own center.
    Current,
}

impl From<ReferenceArg> for ReferencePolicy {
    fn from(r: ReferenceArg) -> Self {
        match r {
            ReferenceArg::Fixed => ReferencePolicy::Fixed,
            ReferenceArg::Current => ReferencePolicy::CurrentCamera,
        }
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Camera file to render; every entry becomes `<id>.png`.
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "levels", required_unless_present = "levels")]
    pub level: Option<u32>,
    /// Level range `a..b`, inclusive.
    #[arg(long, value_parser = parse_range)]
    pub levels: Option<(u32, u32)>,
    /// Screen-size threshold in pixels.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = ReferenceArg::Fixed)]
    pub reference: ReferenceArg,
    /// Views between subset rebuilds.
    #[arg(long)]
    pub update_period: Option<usize>,
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    pub background: [f64; 3],
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of rendered PNGs.
    #[arg(long)]
    pub renders: PathBuf,
    /// Directory of reference PNGs with the same names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, env = "FLOD_BIND", default_value = "127.0.0.1:7878")]
    pub bind: String,
    #[arg(long, value_enum, default_value_t = ReferenceArg::Current)]
    pub reference: ReferenceArg,
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    pub background: [f64; 3],
}

fn parse_range(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected a..b, got {s:?}"))?;
    let a: u32 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: u32 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    Ok((a, b))
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|e| format!("{c:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [r, g, b] if v.iter().all(|c| (0.0..=1.0).contains(c)) => Ok([r, g, b]),
        _ => Err(format!("expected three values in [0, 1], got {s:?}")),
    }
}

/// Reads the defaults table, falling back to built-in values.
pub fn load_defaults(path: Option<&Path>) -> CliResult<Defaults> {
    let Some(path) = path else { return Ok(Defaults::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("defaults table {}: {e}", path.display())))?;
    let d: Defaults =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("defaults table {}: {e}", path.display())))?;
    if !(d.gamma > 0.0) || d.update_period < 1 || !(0.0..=1.0).contains(&d.lambda_ssim) {
        return Err(CliError::Usage(format!("defaults table {} has out-of-range values", path.display())));
    }
    Ok(d)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let defaults = load_defaults(cli.defaults.as_deref())?;
    match cli.command {
        Command::GenScene(a) => commands::gen_scene(&a),
        Command::Train(a) => commands::train(&a, defaults),
        Command::Render(a) => commands::render(&a, defaults),
        Command::Eval(a) => commands::eval(&a),
        Command::Serve(a) => serve::serve_command(&a, defaults),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
