//! `boxforge`: dataset indexing, splitting, cropping, evaluation, review and
//! iteration bookkeeping for single-class detector development.

mod commands;
mod failure;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use boxforge_core::croppipe::{DEFAULT_INPUT_SIDE, DEFAULT_MIN_PX, DEFAULT_PAD_FRACTION};
use boxforge_core::geometry::DEFAULT_MIN_VISIBILITY;
use boxforge_core::ledger::MANIFEST_ENV;
use boxforge_core::review::DEFAULT_CONF_THRESHOLD;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use failure::Failure;

const LABEL_FORMAT: &str = "\
Label files: one `<image>.txt` next to each `<image>.jpg|jpeg|png`, one box per
line as `<class_id> <cx> <cy> <w> <h>` with coordinates normalized to [0, 1]
(center, width, height). Files are written with 6 decimals and LF line
endings. An empty label file marks a negative image (reviewed, no objects);
an image without a label file is unlabeled and never used as ground truth.
Image ids are paths relative to the root without the extension, joined by `/`.";

const DETECTIONS_FORMAT: &str = "\
Detections file: JSON lines, one object per line:
  {\"image_id\": \"cams/0001\", \"class_id\": 0, \"cx\": 0.5, \"cy\": 0.5,
   \"w\": 0.1, \"h\": 0.1, \"confidence\": 0.87}
Coordinates are normalized like label files; boxes poking slightly past the
image edge are clamped.";

const MANIFEST_FORMAT: &str = "\
Manifest: JSON document {\"version\": 1, \"datasets\": [{\"id\", \"root\"}],
\"iterations\": [...]} holding one record per training iteration (config,
split sizes, metrics, imported loss series). Loss series are CSV files with
the header `step,value` and strictly increasing steps. The manifest path
comes from --manifest or the BOXFORGE_MANIFEST environment variable.";

#[derive(Debug, Parser)]
#[command(
    name = "boxforge",
    version,
    about = "Dataset, evaluation and review tooling for single-class object detectors"
)]
#[command(
    after_help = "Exit status: 0 on success, 1 on invalid input or usage, 2 on I/O failure.\nReports are printed as JSON on stdout; files are written only under --out."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan a dataset root and classify images as labeled, negative or unlabeled.
    #[command(after_help = LABEL_FORMAT)]
    Index {
        #[command(flatten)]
        data: DataArgs,
        /// Also write the full index as index.json under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deterministic train/validation split of the reviewed images.
    #[command(after_help = "Only labeled and negative images are split; unlabeled images are left out.\nWith --out, writes train.txt and val.txt (one image path per line) and split.json.\n\n".to_owned() + LABEL_FORMAT)]
    Split {
        #[command(flatten)]
        data: DataArgs,
        /// Fraction of images that go to validation.
        #[arg(long)]
        ratio: f64,
        /// Seed of the split hash.
        #[arg(long)]
        seed: u64,
        /// Split each top-level directory of the root on its own.
        #[arg(long)]
        stratified: bool,
        /// Directory for report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cut vehicle regions out of full frames into a new dataset with remapped labels.
    #[command(after_help = "Detections of --vehicle-classes become padded positive crops carrying the\nsource labels that stay visible; all other detections become negative\ncrops with empty label files. Crops are written as PNG under --out.\n\n".to_owned() + DETECTIONS_FORMAT + "\n\n" + LABEL_FORMAT)]
    Crop {
        #[command(flatten)]
        data: DataArgs,
        /// Vehicle detector output.
        #[arg(long)]
        dets: PathBuf,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        /// Class ids treated as vehicles (COCO car, bus, truck by default).
        #[arg(long, value_delimiter = ',', default_values_t = [2u32, 5, 7])]
        vehicle_classes: Vec<u32>,
        /// Fraction of a vehicle box added on every side.
        #[arg(long, default_value_t = DEFAULT_PAD_FRACTION)]
        pad: f64,
        /// Smallest visible fraction of a label that is kept in a crop.
        #[arg(long, default_value_t = DEFAULT_MIN_VISIBILITY)]
        min_visibility: f64,
        /// Ignore detections below this confidence.
        #[arg(long, default_value_t = 0.0)]
        min_conf: f64,
    },
    /// Report labels that shrink below a pixel size after letterboxing.
    #[command(after_help = LABEL_FORMAT)]
    Diagnose {
        #[command(flatten)]
        data: DataArgs,
        /// Square network input side in pixels.
        #[arg(long, default_value_t = DEFAULT_INPUT_SIDE)]
        input_side: u32,
        /// Boxes whose smaller scaled side is below this are flagged.
        #[arg(long, default_value_t = DEFAULT_MIN_PX)]
        min_px: f64,
        /// List every box, not only flagged ones.
        #[arg(long)]
        all: bool,
        /// Directory for report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score detections against ground truth (AP50, AP50-95, precision, recall, F1).
    #[command(after_help = "With --out, writes metrics.json and metrics.csv (columns: iteration, ap50,\nap50_95, best_f1, best_f1_confidence).\n\n".to_owned() + DETECTIONS_FORMAT + "\n\n" + LABEL_FORMAT)]
    Eval {
        #[arg(long)]
        dets: PathBuf,
        /// Ground-truth dataset root.
        #[arg(long)]
        gt: PathBuf,
        /// IoU thresholds as `start:stop:step` or a single value.
        #[arg(long, default_value = "0.5:0.95:0.05")]
        iou: String,
        /// Apply class-aware NMS at this IoU before scoring.
        #[arg(long)]
        nms: Option<f64>,
        /// Name used in the CSV report's iteration column.
        #[arg(long, default_value = "eval")]
        iteration: String,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        strict: bool,
        /// Directory for report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn detections into a review queue of pending items.
    #[command(after_help = "Writes the queue to --queue and starts an empty journal next to it\n(`<queue>.journal.jsonl`).\n\n".to_owned() + DETECTIONS_FORMAT)]
    Import {
        #[arg(long)]
        dets: PathBuf,
        /// Root holding the reviewed images.
        #[arg(long)]
        images: PathBuf,
        /// Queue file to create.
        #[arg(long)]
        queue: PathBuf,
        /// Detections below this confidence are dropped.
        #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
        conf: f64,
        #[arg(long)]
        queue_id: Option<String>,
        /// Ledger iteration whose model produced the detections.
        #[arg(long)]
        iteration: Option<String>,
        /// Replace an existing queue and its journal.
        #[arg(long)]
        overwrite: bool,
    },
    /// Run the review HTTP service (and the UI when --ui is given).
    #[command(
        after_help = "API: GET /api/queue, GET /api/items?state=pending, GET /api/images/{image_id},\nPOST /api/items/{item_id}/decision {\"action\": \"accept\"|\"reject\"|\"edit\"|\"reset\", \"box\"?},\nPOST /api/export {\"force\": bool}. Decisions are journaled to\n`<queue>.journal.jsonl` as they arrive."
    )]
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        queue: PathBuf,
        /// Where exports requested over HTTP are written.
        #[arg(long)]
        export_root: PathBuf,
        /// Directory with the built review UI.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Write reviewed labels (and copies of their images) as a dataset.
    #[command(after_help = "Locally, reads --queue plus its journal and writes under --out. With\n--server, asks a running review service to export into its own root.\n\n".to_owned() + LABEL_FORMAT)]
    Export {
        /// Queue file written by `import`.
        #[arg(long, required_unless_present = "server", conflicts_with = "server")]
        queue: Option<PathBuf>,
        /// Output dataset root.
        #[arg(long, required_unless_present = "server", conflicts_with = "server")]
        out: Option<PathBuf>,
        /// Base URL of a running review service.
        #[arg(long)]
        server: Option<String>,
        /// Export decided items even though some are pending; images with
        /// pending items are skipped.
        #[arg(long)]
        force: bool,
    },
    /// Iteration ledger: datasets, runs, lineage and comparisons.
    #[command(after_help = MANIFEST_FORMAT)]
    Ledger {
        #[arg(long, env = MANIFEST_ENV, global = true)]
        manifest: Option<PathBuf>,
        #[command(subcommand)]
        command: LedgerCommand,
    },
}

#[derive(Debug, Subcommand)]
enum LedgerCommand {
    /// Register a dataset root under an id.
    AddDataset {
        #[arg(long)]
        id: String,
        #[arg(long)]
        root: PathBuf,
    },
    /// Record a training iteration.
    #[command(after_help = MANIFEST_FORMAT)]
    Record(RecordArgs),
    /// Print the manifest, or one iteration.
    Show { iteration: Option<String> },
    /// Side-by-side metrics of iterations.
    Compare {
        #[arg(required = true)]
        iterations: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Weight lineage of an iteration back to its root checkpoint.
    Lineage { iteration: String },
}

#[derive(Debug, Args)]
struct RecordArgs {
    #[arg(long)]
    iteration: String,
    /// Registered dataset ids the run trained on.
    #[arg(long = "dataset", required = true)]
    datasets: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_INPUT_SIDE)]
    input_side: u32,
    #[arg(long)]
    batch_size: u32,
    #[arg(long)]
    ratio: f64,
    /// Seed of the split hash.
    #[arg(long)]
    seed: u64,
    /// Starting checkpoint, e.g. yolov5m.pt or last.pt.
    #[arg(long)]
    parent_weights: String,
    #[arg(long)]
    parent_iteration: Option<String>,
    #[arg(long)]
    stratified: bool,
    /// metrics.json written by `boxforge eval`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Loss curve as NAME=PATH to a `step,value` CSV; repeatable.
    #[arg(long = "series", value_parser = parse_series_arg)]
    series: Vec<(String, PathBuf)>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    root: PathBuf,
    /// Treat out-of-range label values as errors instead of clamping them.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn parse_series_arg(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), path.into()))
        }
        _ => Err(format!("expected NAME=PATH, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
