use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spectralds_experiments::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "spectralds", version, about = "Spectral filtering for linear dynamical systems and STU distillation")]
#[command(arg_required_else_help = true, propagate_version = true)]
pub struct Cli {
    /// Worker threads (0 = one per core). Overrides SPECTRALDS_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the top-k spectral filters of the length-L Hankel matrix.
    Basis {
        #[arg(long = "L", visible_alias = "len")]
        len: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },

    /// Fit STU coefficients to a saved LDS.
    FitStu {
        /// LDS artifact directory.
        #[arg(long)]
        lds: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, value_enum, default_value_t = FitMode::Closed)]
        mode: FitMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gradient steps (gd mode).
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Learning rate (gd mode).
        #[arg(long, default_value_t = 0.25)]
        lr: f64,
    },

    /// Distill a spectral basis into a diagonal LDS.
    Distill {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, value_enum, default_value_t = DistillMode::Practical)]
        mode: DistillMode,
        #[arg(long)]
        h: usize,
        /// Starting subset size (practical mode); defaults to k.
        #[arg(long = "h-start")]
        h_start: Option<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Pair-bank size (practical mode).
        #[arg(long = "bank-size", default_value_t = 2000)]
        bank_size: usize,
        /// Relative fit-error cutoff for bank rows (practical mode).
        #[arg(long, default_value_t = f64::INFINITY)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Compare distilled filters with a basis.
    Verify {
        #[arg(long)]
        distilled: PathBuf,
        #[arg(long)]
        basis: PathBuf,
    },

    /// Condition of the coefficient matrix as the state dimension grows.
    BenchCond(BenchArgs),

    /// Greedy subset-selection error curves.
    BenchSubset(BenchArgs),

    /// Learning comparison on a synthetic high-memory system.
    BenchSynth {
        #[arg(long, value_enum, default_value_t = SynthPreset::Synth)]
        preset: SynthPreset,
        #[command(flatten)]
        bench: BenchArgs,
    },

    /// Autoregressive generation time of the convolutional and recurrent models.
    BenchRuntime(BenchArgs),

    /// Run the whole pipeline at L=256, k=8, h=24.
    Demo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitMode {
    Closed,
    Gd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistillMode {
    Direct,
    Practical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthPreset {
    Synth,
    Noisy,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON experiment config applied before the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

/// One optional flag per experiment config field.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long = "len", visible_alias = "L")]
    pub len: Option<usize>,
    #[arg(long = "h-values", value_delimiter = ',')]
    pub h_values: Option<Vec<usize>>,
    #[arg(long = "h-start-values", value_delimiter = ',')]
    pub h_start_values: Option<Vec<usize>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long = "bank-size")]
    pub bank_size: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long = "d-in")]
    pub d_in: Option<usize>,
    #[arg(long = "d-out")]
    pub d_out: Option<usize>,
    #[arg(long = "d-h")]
    pub d_h: Option<usize>,
    #[arg(long = "seq-len")]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long = "lr-baseline")]
    pub lr_baseline: Option<f64>,
    #[arg(long = "lr-stu")]
    pub lr_stu: Option<f64>,
    #[arg(long = "distill-h")]
    pub distill_h: Option<usize>,
    #[arg(long)]
    pub noise: Option<bool>,
    #[arg(long = "t-values", value_delimiter = ',')]
    pub t_values: Option<Vec<usize>>,
    #[arg(long = "state-dims", value_delimiter = ',')]
    pub state_dims: Option<Vec<usize>>,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($f:ident),*) => {
                $(if let Some(v) = &self.$f { cfg.$f = v.clone(); })*
            };
        }
        set!(
            repetitions, k, len, h_values, h_start_values, trials, bank_size, delta, d_in, d_out, d_h, seq_len, steps, batch,
            lr_baseline, lr_stu, distill_h, noise, t_values, state_dims
        );
    }
}
