//! Command-line entry points: `synth`, `train`, `eval`, `ensemble`,
//! `gradcheck` and `trace`.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage error and 3
//! when the finite-difference suite fails.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msst_core::modality::Modality;

pub use manifest::{sha256_hex, Manifest};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

/// An invalid combination of arguments, reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "msst", version, about = "Train, evaluate and ensemble MSST skeleton action recognition models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Emit a synthetic skeleton dataset.
    Synth(SynthArgs),
    /// Train one modality stream.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Sum per-stream score files and report the fused accuracy.
    Ensemble(EnsembleArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Export the attention maps of one sample.
    Trace(TraceArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Joint => Modality::Joint,
            ModalityArg::Bone => Modality::Bone,
            ModalityArg::JointMotion => Modality::JointMotion,
            ModalityArg::BoneMotion => Modality::BoneMotion,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Synthetic spec JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Graph whose joint count the samples use (bundled name or file).
    #[arg(long)]
    pub graph: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving `data.jsonl` and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON with model and training fields by name.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set; without it a stratified holdout of the data is used.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Bundled graph name or graph file.
    #[arg(long)]
    pub graph: String,
    #[arg(long, value_enum, default_value = "joint")]
    pub modality: ModalityArg,
    /// Ancestor distance of bone modalities.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the attention maps of the first validation sample.
    #[arg(long)]
    pub trace_attn: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run description written by `train`; defaults to `run.json` beside the checkpoint.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving `scores.json`, `eval.json` and `manifest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// Score files to fuse.
    #[arg(long = "scores", required = true, num_args = 1..)]
    pub scores: Vec<PathBuf>,
    /// Require exactly the 4- or 6-stream tag set.
    #[arg(long)]
    pub streams: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Probe every n-th parameter coordinate of the toy model.
    #[arg(long, default_value_t = msst_core::gradsuite::END_TO_END_STRIDE)]
    pub stride: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Position of the sample in the dataset.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let res = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ensemble(a) => commands::ensemble(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Trace(a) => commands::trace(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
