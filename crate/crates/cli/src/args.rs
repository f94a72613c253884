use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "nariqa", version, about = "Non-aligned reference image quality toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Start from the small toy training preset instead of the full defaults.
    #[arg(long, global = true, conflicts_with = "config")]
    pub toy: bool,
    /// Worker threads for data-parallel stages (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Global seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes as numbered PNG frames.
    Synth(SynthArgs),
    /// Dense integer flow between two frames (NVFL dump).
    Flow(FlowArgs),
    /// Motion-region mask from a flow field.
    Troi(TroiArgs),
    /// Apply one catalog distortion, optionally inside a motion region.
    Distort(DistortArgs),
    /// Build or filter triplet manifests.
    #[command(subcommand)]
    Triplets(TripletsCommand),
    /// Embed one image with a checkpointed head.
    Embed(EmbedArgs),
    /// Train the embedding head on a manifest.
    Train(TrainArgs),
    /// Quality score of a test image against a reference.
    Score(ScoreArgs),
    /// Patch mismatch heatmap between a reference and a processed image.
    Heatmap(HeatmapArgs),
    /// Benchmark a head on a (labeled) manifest.
    Eval(EvalArgs),
    /// Run or export a rater study.
    #[command(subcommand)]
    Study(StudyCommand),
    /// Run gradient checks and all oracle suites.
    Selftest(SelftestArgs),
    /// Synthesize, build, filter, train and evaluate in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    #[arg(long)]
    pub prev: PathBuf,
    #[arg(long)]
    pub curr: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TroiArgs {
    /// NVFL flow dump; alternatively give --prev and --curr.
    #[arg(long, conflicts_with_all = ["prev", "curr"])]
    pub flow: Option<PathBuf>,
    #[arg(long, requires = "curr")]
    pub prev: Option<PathBuf>,
    #[arg(long, requires = "prev")]
    pub curr: Option<PathBuf>,
    #[arg(long)]
    pub coverage: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistortArgs {
    /// Print the distortion catalog and exit.
    #[arg(long, exclusive = true)]
    pub list: bool,
    #[arg(long, required_unless_present = "list")]
    pub input: Option<PathBuf>,
    #[arg(long = "type", required_unless_present = "list")]
    pub type_id: Option<String>,
    #[arg(long, required_unless_present = "list")]
    pub level: Option<u8>,
    /// Restrict to the top-motion fraction of pixels (needs --prev).
    #[arg(long, requires = "prev", conflicts_with = "mask")]
    pub coverage: Option<f64>,
    /// Neighboring frame used for the motion estimate.
    #[arg(long)]
    pub prev: Option<PathBuf>,
    /// Binary mask PNG (nonzero = distort).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, required_unless_present = "list")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TripletsCommand {
    /// Build triplets from scene frame directories.
    Build(BuildArgs),
    /// Keep triplets on which two full-reference scorers agree.
    Filter(FilterArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Directory with one subdirectory of PNG frames per scene.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Precomputed score table; computed and saved when absent.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub tau: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint with the head; the seeded initial head when absent.
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Store per-patch embeddings instead of the pooled one.
    #[arg(long)]
    pub patches: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Aligned,
    NonAligned,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "non-aligned")]
    pub kind: KindArg,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub processed: PathBuf,
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Pixels per patch in the PNG.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// DMOS table `item_id,dmos`; ids are `<triplet>/pos`, `<triplet>/neg` or `<triplet>`.
    #[arg(long)]
    pub dmos: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Serve the study over HTTP.
    Serve(ServeArgs),
    /// Write the labeled manifest and vote tallies.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct StudyShared {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Vote log; defaults to `<manifest>.votes.jsonl`.
    #[arg(long)]
    pub votes: Option<PathBuf>,
    #[arg(long)]
    pub min_raters: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub shared: StudyShared,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Built UI bundle served at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    /// Also show the aligned reference.
    #[arg(long)]
    pub show_aligned: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub shared: StudyShared,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Print results as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}
