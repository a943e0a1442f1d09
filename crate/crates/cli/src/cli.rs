use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Object-wise DRR toolkit: phantoms, conversion, projection, losses,
/// registration and metrics.
#[derive(Debug, Parser)]
#[command(name = "drrq", version, propagate_version = true)]
pub struct Cli {
    /// Print errors to stderr as one JSON object.
    #[arg(long, global = true)]
    pub json_errors: bool,

    /// Cap the worker pool at N threads.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Seed for every random choice (phantom noise, restarts, gradcheck).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Pipeline config JSON supplying default paths, geometry, weights and
    /// registration settings.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled CT with ground truth.
    Phantom(PhantomArgs),
    /// Convert an HU volume into per-object, per-kind volumes.
    Convert(ConvertArgs),
    /// Render converted volumes into DRR stacks.
    Project(ProjectArgs),
    /// Per-object intensity sums (cm³ or g) of DRR stacks as CSV.
    Sum(SumArgs),
    /// Register a bone volume to a target image.
    Register(RegisterArgs),
    /// Render bone DRRs at registered poses as aligned targets.
    AlignedTargets(AlignedArgs),
    /// Evaluate the composite loss and print its itemized breakdown.
    Loss(LossArgs),
    /// Agreement and image-quality metrics.
    Metrics(MetricsArgs),
    /// Verify every analytic loss gradient by finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Six muscles and two bones on a 160³ grid.
    Default,
    /// One asymmetric bone on a 64³ grid.
    PelvisAnalog,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom spec JSON; the preset is used when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// Conversion tables JSON (defaults to the bundled tables).
    #[arg(long)]
    pub tables: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CtArgs {
    /// HU volume (.mskv).
    #[arg(long)]
    pub volume: Option<PathBuf>,
    /// Label map (.mskv).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Object table JSON.
    #[arg(long)]
    pub objects: Option<PathBuf>,
    /// Conversion tables JSON (defaults to the bundled tables).
    #[arg(long)]
    pub tables: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[command(flatten)]
    pub ct: CtArgs,
    /// Kinds to produce, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "wv,v,m")]
    pub kinds: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct GeometryArgs {
    /// Projection rotation "rx,ry,rz" in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub rotation: Option<Vec<f64>>,
    /// Pixel spacing "row,col" in mm.
    #[arg(long, value_delimiter = ',')]
    pub pixel_spacing: Option<Vec<f64>>,
    /// Detector size "HxW"; sized to the volume when omitted.
    #[arg(long, value_name = "HxW")]
    pub detector: Option<String>,
    /// Ray-marching step in mm for rotated projections.
    #[arg(long)]
    pub step_mm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Output directory of `convert`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "wv,v,m")]
    pub kinds: Vec<String>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SumArgs {
    /// Output directory of `project`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "wv,v,m")]
    pub kinds: Vec<String>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Bone volume (.mskv, any projectable kind).
    #[arg(long)]
    pub bone: PathBuf,
    /// Target image (.mski).
    #[arg(long)]
    pub target: PathBuf,
    /// Initial pose "rx,ry,rz,tx,ty,tz".
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub init: Option<Vec<f64>>,
    /// Registration config JSON.
    #[arg(long)]
    pub registration: Option<PathBuf>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignedArgs {
    #[command(flatten)]
    pub ct: CtArgs,
    /// JSON object mapping bone name to pose.
    #[arg(long)]
    pub poses: PathBuf,
    /// Bones to render; all bones when omitted.
    #[arg(long, value_delimiter = ',')]
    pub bones: Option<Vec<String>>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Directory holding predicted wv/, v/ and m/ stacks.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Input radiograph (.mski).
    #[arg(long)]
    pub xray: PathBuf,
    /// Target sums CSV as written by `sum`.
    #[arg(long)]
    pub target_sums: PathBuf,
    /// Output directory of `aligned-targets`; no bone loss when omitted.
    #[arg(long)]
    pub aligned: Option<PathBuf>,
    /// Sum of both adversarial losses, computed by the training framework.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub gan_adversarial: f64,
    /// Unweighted cycle-consistency loss.
    #[arg(long, default_value_t = 0.0)]
    pub gan_cycle: f64,
    /// Loss weights JSON.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Samples CSV with columns case_id, object, predicted, truth.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Image pair "PRED REF" (.mski); repeatable.
    #[arg(long, num_args = 2, value_names = ["PRED", "REF"], action = clap::ArgAction::Append)]
    pub pair: Vec<PathBuf>,
    /// Per-object table destination.
    #[arg(long)]
    pub object_csv: Option<PathBuf>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Check one loss only.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
