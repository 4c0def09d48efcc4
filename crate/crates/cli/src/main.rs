//! `tlpim`: command-line entry point for the iris matching workbench.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "tlpim", version, about = "Postmortem iris matching workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground-truth masks.
    Gen(GenArgs),
    /// Split a manifest into identity-disjoint train and test manifests.
    Split(SplitArgs),
    /// Score predicted masks against ground truth, overall and per PMI bin.
    Segeval(SegevalArgs),
    /// Train the embedding network.
    Train(TrainArgs),
    /// Score an ad-hoc pair or all cross-session pairs of a manifest.
    Match(MatchArgs),
    /// AUROC per probe PMI cap from scored pairs.
    Eval(EvalArgs),
    /// Export the layer bundle of a pair.
    Render(RenderArgs),
    /// Run the examiner review service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    identities: usize,
    #[arg(long, default_value_t = 6)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 96)]
    size: usize,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
}

#[derive(Args, Debug)]
struct SegevalArgs {
    #[arg(long)]
    pred_manifest: PathBuf,
    #[arg(long)]
    gt_manifest: PathBuf,
    /// Ascending PMI bin edges in hours.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 24.0, 72.0, 120.0, 336.0, 672.0])]
    bins: Vec<f64>,
    /// JSON report; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest; without one, 20% of the training identities are held out.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// TOML file with optional `[net]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Per-iteration loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe as `IMAGE[,MASK]`.
    #[arg(long, requires = "b", conflicts_with = "manifest")]
    a: Option<String>,
    /// Reference as `IMAGE[,MASK]`.
    #[arg(long, requires = "a")]
    b: Option<String>,
    #[arg(long, required_unless_present = "a")]
    manifest: Option<PathBuf>,
    /// Pairs CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the checkpoint's decision threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Ascending probe PMI caps in hours; `inf` for no cap.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["24".to_string(), "72".into(), "120".into(), "336".into(), "672".into(), "inf".into()])]
    caps: Vec<String>,
    /// Maximum reference PMI in hours.
    #[arg(long, default_value_t = 24.0)]
    ref_max: f64,
    /// CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe as `IMAGE[,MASK]`.
    #[arg(long)]
    a: String,
    /// Reference as `IMAGE[,MASK]`.
    #[arg(long)]
    b: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Composite layers: comma list of background,iris,highlight,wrinkle,cam, or all/none.
    #[arg(long, default_value = "all")]
    layers: String,
    /// Overrides the checkpoint's decision threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Append-only verdict log (JSON lines).
    #[arg(long)]
    verdicts: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Overrides the checkpoint's decision threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Directory of UI assets served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Split(a) => commands::split(a),
        Command::Segeval(a) => commands::segeval(a),
        Command::Train(a) => commands::train(a),
        Command::Match(a) => commands::match_pairs(a),
        Command::Eval(a) => commands::eval(a),
        Command::Render(a) => commands::render(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
