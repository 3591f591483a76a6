//! Flags shared by every command. The same set of keys may come from a TOML
//! config file (`--config`); flags given on the command line win.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Flags {
    /// Training images (IDX, 3-D unsigned byte).
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    /// Held-out images (IDX) used for evaluation and as default inputs.
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    /// Gaussian mixture spec (TOML) to use instead of image files.
    #[arg(long)]
    pub mixture: Option<PathBuf>,
    /// Points drawn from the mixture for training.
    #[arg(long)]
    pub mixture_count: Option<usize>,
    /// Input images (IDX) for encode, reconstruct and stages.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Comma-separated example indices to process.
    #[arg(long, value_delimiter = ',')]
    pub indices: Option<Vec<usize>>,
    /// Number of leading examples to process when no indices are given.
    #[arg(long)]
    pub count: Option<usize>,
    /// Code files to decode.
    #[arg(long, num_args = 1..)]
    pub codes: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Refiner architecture: `cnn` or `dense`.
    #[arg(long)]
    pub arch: Option<String>,
    /// Options per stage (K).
    #[arg(long)]
    pub options: Option<usize>,
    /// Number of stages (N).
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub stages_per_segment: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub downsample_steps: Option<usize>,
    #[arg(long)]
    pub residual_blocks: Option<usize>,
    #[arg(long)]
    pub norm_groups: Option<usize>,
    /// Hidden width of the dense refiner.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub head_gain: Option<f64>,

    /// Weight of the all-options loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Zero wall-clock columns so metrics are byte-reproducible.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
    /// Continue from the checkpoint if it exists.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub resume: Option<bool>,
    /// Save a checkpoint every this many steps (0: only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Write sample and stage grids every this many steps (0: only at the end).
    #[arg(long)]
    pub grid_every: Option<u64>,
    /// Log progress every this many steps.
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Held-out examples used for evaluation.
    #[arg(long)]
    pub eval_count: Option<usize>,

    /// Grid rows.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Grid columns.
    #[arg(long)]
    pub cols: Option<usize>,

    /// Relative error accepted by grad-check.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Central-difference step of grad-check.
    #[arg(long)]
    pub fd_step: Option<f64>,

    /// Resolved configuration recorded in manifests; ignored on input.
    #[arg(skip)]
    #[serde(skip_serializing)]
    pub resolved: Option<toml::Value>,
}

fn to_table(flags: &Flags) -> Result<toml::Table, CliError> {
    toml::Table::try_from(flags)
        .map_err(|e| CliError::Usage(format!("cannot serialize flags: {e}")))
}

impl Flags {
    pub fn from_file(path: &Path) -> Result<Flags, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// `self` overrides every key it sets in `base`.
    pub fn over(&self, base: &Flags) -> Result<Flags, CliError> {
        let mut table = to_table(base)?;
        table.extend(to_table(self)?);
        table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("cannot merge flags: {e}")))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize flags: {e}")))
    }
}
