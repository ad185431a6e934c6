use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use lska_core::{AttentionVariant, Capacity, KernelSpec};

#[derive(Debug, Parser)]
#[command(name = "lska", version, about = "Large separable kernel attention: checks, costs, timings, ERF maps, probe")]
pub struct Cli {
    /// JSON model config; its fields override the matching flags.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant suite and print one line per property.
    Verify(VerifyArgs),
    /// Parameters and MACs of one attention module or backbone.
    Cost(CostArgs),
    /// Cost (and optionally time) a grid of variants and kernel sizes.
    Sweep(SweepArgs),
    /// Effective receptive field of a seeded random backbone.
    Erf(ErfArgs),
    /// Shape/texture dimensionality estimate from paired latent codes.
    Probe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Only run properties whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negative control for the test suite.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Module scope (`--channels`) or backbone scope (`--capacity`).
#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct ScopeArgs {
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub capacity: Option<Capacity>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Required unless given by `--config`.
    #[arg(long)]
    pub variant: Option<AttentionVariant>,
    /// Required unless given by `--config`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Defaults to the standard dilation for `k`.
    #[arg(long)]
    pub d: Option<usize>,
    #[command(flatten)]
    pub scope: ScopeArgs,
    #[arg(long, default_value_t = 224)]
    pub hw: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `k` or `k:d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelArg {
    pub k: usize,
    pub d: Option<usize>,
}

impl KernelArg {
    pub fn spec(self) -> lska_core::Result<KernelSpec> {
        match self.d {
            Some(d) => Ok(KernelSpec::new(self.k, d)),
            None => KernelSpec::standard(self.k),
        }
    }
}

impl FromStr for KernelArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
        match s.split_once(':') {
            Some((k, d)) => Ok(Self { k: num(k)?, d: Some(num(d)?) }),
            None => Ok(Self { k: num(s)?, d: None }),
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated; all four when omitted.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<AttentionVariant>,
    /// Comma-separated `k` or `k:d`; the six standard sizes when omitted.
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<KernelArg>,
    #[command(flatten)]
    pub scope: ScopeArgs,
    #[arg(long, default_value_t = 224)]
    pub hw: usize,
    /// Time the attention module forward for every row.
    #[arg(long)]
    pub bench: bool,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    /// Row `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ErfArgs {
    #[arg(long, default_value = "tiny")]
    pub capacity: Capacity,
    #[arg(long, default_value = "lska")]
    pub variant: AttentionVariant,
    /// Required unless given by `--config`.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub n_inputs: usize,
    /// Model seed; inputs are drawn from `seed + 1`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 224)]
    pub hw: usize,
    /// Fraction of mass enclosed by the reported radius.
    #[arg(long, default_value_t = lska_core::analysis::ERF_MASS)]
    pub mass: f64,
    /// Output prefix: writes PREFIX.pgm, PREFIX.csv (radius) and
    /// PREFIX_map.csv (normalized grid).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Directory holding shape_a.csv, shape_b.csv, texture_a.csv, texture_b.csv.
    #[arg(long)]
    pub input_dir: PathBuf,
    /// Latent width; must match every file.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
