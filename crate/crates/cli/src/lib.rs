//! Argument parsing and dispatch for the `plainmatte` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. With `--json` the
//! result (or the error) is printed to stdout as JSON; human-readable output
//! and diagnostics go to stderr otherwise.

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod settings;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Runtime(_) => 2,
        }
    }

    fn parts(&self) -> (&'static str, &str) {
        match self {
            Self::Usage(m) => ("usage", m),
            Self::Runtime(m) => ("runtime", m),
        }
    }
}

impl From<plainmatte::error::MatteError> for CliError {
    fn from(e: plainmatte::error::MatteError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

/// `HxW`, e.g. `2048x2048`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad dimension `{v}` in `{s}`"));
        Ok(Self { height: parse(h)?, width: parse(w)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Normal,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecoderArg {
    Dcm,
    Sfp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegionArg {
    Unknown,
    Whole,
}

#[derive(Debug, Parser)]
#[command(name = "plainmatte", version, about = "Trimap matting with a plain vision transformer")]
pub struct Cli {
    /// Seed for every random choice (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset root with fg/, alpha/ and bg/ folders.
    Train(TrainArgs),
    /// Compare predicted alpha mattes with ground truth.
    Eval(EvalArgs),
    /// Predict an alpha matte for one image and trimap.
    Infer(InferArgs),
    /// Analytical FLOPs, parameters and memory for a configuration.
    Flops(FlopsArgs),
    /// Write a synthetic dataset with trimaps and a seed sidecar.
    DatasetBuild(DatasetArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture preset: tiny or vits.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory (written after every epoch).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Backgrounds paired with each foreground.
    #[arg(long)]
    pub bg_per_fg: Option<usize>,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted alpha PNG, or a folder of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth alpha (file or folder with matching names).
    #[arg(long)]
    pub gt: PathBuf,
    /// Trimap (file or folder with matching names).
    #[arg(long)]
    pub trimap: PathBuf,
    #[arg(long, value_enum, default_value_t = RegionArg::Unknown)]
    pub region: RegionArg,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub trimap: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid-sampled global attention.
    #[arg(long)]
    pub grid_sample: bool,
    /// Checkpoint directory; without it the model is randomly initialised.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "2048x2048")]
    pub res: Resolution,
    /// Number of global-attention blocks.
    #[arg(long)]
    pub globals: Option<usize>,
    /// Neck kind: none, naive, residual or convnext.
    #[arg(long)]
    pub neck: Option<String>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Normal)]
    pub strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = DecoderArg::Dcm)]
    pub decoder: DecoderArg,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of foregrounds.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 8)]
    pub backgrounds: usize,
    #[arg(long, default_value = "64x64")]
    pub size: Resolution,
    #[arg(long, default_value_t = 1)]
    pub kernel_min: usize,
    #[arg(long, default_value_t = 10)]
    pub kernel_max: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Listen address [default: 127.0.0.1:8080].
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long)]
    pub max_pixels: Option<usize>,
    #[arg(long)]
    pub max_sessions: Option<usize>,
    /// Idle session lifetime in seconds [default: 1800].
    #[arg(long)]
    pub ttl_secs: Option<u64>,
    /// CORS origin of the studio; any origin when omitted.
    #[arg(long)]
    pub origin: Option<String>,
}

/// Output sink so tests can capture what the binary prints.
pub struct Output<'a> {
    pub json: bool,
    pub stdout: &'a mut dyn std::io::Write,
    pub stderr: &'a mut dyn std::io::Write,
}

impl Output<'_> {
    pub(crate) fn emit_json(&mut self, v: &serde_json::Value) {
        let _ = writeln!(self.stdout, "{v}");
    }

    pub(crate) fn human(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.stderr, "{}", line.as_ref());
    }

    /// The result: JSON on stdout with `--json`, text on stdout otherwise.
    pub(crate) fn result(&mut self, v: &serde_json::Value, text: impl AsRef<str>) {
        if self.json {
            self.emit_json(v);
        } else {
            let _ = writeln!(self.stdout, "{}", text.as_ref());
        }
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn dispatch<I, T>(argv: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let wants_json = argv.iter().any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{rendered}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{rendered}");
                    if wants_json {
                        let _ = writeln!(stdout, "{}", serde_json::json!({ "error": { "code": "usage", "message": rendered.trim() } }));
                    }
                    1
                }
            };
        }
    };
    let mut out = Output { json: cli.json, stdout, stderr };
    match commands::run(&cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let (code, message) = e.parts();
            let _ = writeln!(out.stderr, "error: {message}");
            if out.json {
                out.emit_json(&serde_json::json!({ "error": { "code": code, "message": message } }));
            }
            e.exit_code()
        }
    }
}
