//! `geoprompt` command line. Every subcommand except `serve` talks to the
//! HTTP service, either one given with `--server` or an embedded instance on
//! an ephemeral local port.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use geoprompt_client::Client;
use geoprompt_core::api::{
    MetricsRequest, OneshotProtocol, RenderRequest, ReportFormat, ReportRequest, RunRequest,
};
use geoprompt_core::metrics::{Averaging, ReportTable};
use geoprompt_core::pipeline::{DatasetManifest, PipelineError, RunMode, RunRecord};

pub const EXIT_DEGENERATE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "geoprompt", version, about = "Promptable segmentation of geospatial rasters")]
pub struct Cli {
    /// Service URL; an embedded server is started when absent.
    #[arg(long, global = true)]
    pub server: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Zero-shot run (general, box, point or text) of manifest entries.
    Run(RunArgs),
    /// One-shot run with a text-selected or ground-truth exemplar.
    Oneshot(OneshotArgs),
    /// Merge run records into a comparison table.
    Report(ReportArgs),
    /// Score a prediction raster against ground truth.
    Metrics(MetricsArgs),
    /// Render a mock scene to an image, ground truth and prompt files.
    RenderScene(RenderArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    General,
    Box,
    Point,
    Text,
    Oneshot,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::General => RunMode::General,
            ModeArg::Box => RunMode::Box,
            ModeArg::Point => RunMode::Point,
            ModeArg::Text => RunMode::Text,
            ModeArg::Oneshot => RunMode::Oneshot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    #[value(alias = "text_auto")]
    TextAuto,
    #[value(alias = "human_label")]
    HumanLabel,
}

impl From<ProtocolArg> for OneshotProtocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::TextAuto => OneshotProtocol::TextAuto,
            ProtocolArg::HumanLabel => OneshotProtocol::HumanLabel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
    Text,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Text => ReportFormat::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AveragingArg {
    Macro,
    Pooled,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Entry id; repeat for several. All entries when omitted.
    #[arg(long)]
    pub entry: Vec<String>,
    /// `mock:<scene.json>` or `real:<config.json>`.
    #[arg(long)]
    pub backend: String,
    #[arg(long)]
    pub box_threshold: Option<f64>,
    #[arg(long)]
    pub text_threshold: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also print the metric rows in this format.
    #[arg(long, value_enum)]
    pub report_format: Option<FormatArg>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Overrides each entry's prompt mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Exemplar protocol when the mode is oneshot.
    #[arg(long, value_enum, default_value = "text-auto")]
    pub protocol: ProtocolArg,
    #[arg(long, default_value_t = 1)]
    pub k_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct OneshotArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "text-auto")]
    pub mode: ProtocolArg,
    #[arg(long, default_value_t = 1)]
    pub k_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run record files or directories containing them.
    #[arg(required = true)]
    pub records: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub report_format: FormatArg,
    #[arg(long, value_enum)]
    pub averaging: Option<AveragingArg>,
    /// Write the table here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub class_id: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only objects whose class matches this phrase become ground truth.
    #[arg(long)]
    pub target: Option<String>,
}

fn absolute(p: &Path) -> Result<String, PipelineError> {
    std::path::absolute(p)
        .map(|a| a.to_string_lossy().into_owned())
        .map_err(|e| PipelineError::Io(format!("{}: {e}", p.display())))
}

/// Make the path inside a backend spec absolute so the service resolves it
/// the same way regardless of its working directory.
fn absolute_backend(spec: &str) -> Result<String, PipelineError> {
    match spec.split_once(':') {
        Some((kind, path)) => Ok(format!("{kind}:{}", absolute(Path::new(path))?)),
        None => Ok(spec.to_string()),
    }
}

/// Start the service on an ephemeral port in a background thread.
pub fn spawn_embedded() -> Result<String, PipelineError> {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = match tokio::runtime::Runtime::new() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = tx.send(Err(e.to_string()));
                return;
            }
        };
        rt.block_on(async move {
            match tokio::net::TcpListener::bind("127.0.0.1:0").await {
                Ok(listener) => {
                    let addr = listener.local_addr().map(|a| a.to_string()).map_err(|e| e.to_string());
                    let _ = tx.send(addr);
                    let _ = geoprompt_server::serve(listener).await;
                }
                Err(e) => {
                    let _ = tx.send(Err(e.to_string()));
                }
            }
        });
    });
    match rx.recv() {
        Ok(Ok(addr)) => Ok(format!("http://{addr}")),
        Ok(Err(e)) => Err(PipelineError::Io(format!("cannot start embedded service: {e}"))),
        Err(_) => Err(PipelineError::Internal("embedded service exited early".into())),
    }
}

fn client(server: &Option<String>) -> Result<Client, PipelineError> {
    match server {
        Some(url) => Client::new(url.clone()),
        None => Client::new(spawn_embedded()?),
    }
}

/// Entry ids to run: the requested ones, or every entry of the manifest.
fn entry_ids(common: &Common) -> Result<Vec<String>, PipelineError> {
    if !common.entry.is_empty() {
        return Ok(common.entry.clone());
    }
    let manifest = DatasetManifest::load(&common.manifest)?;
    Ok(manifest.entries.iter().map(|e| e.id.clone()).collect())
}

fn run_entries(
    client: &Client,
    common: &Common,
    mode: Option<RunMode>,
    protocol: OneshotProtocol,
    k_samples: usize,
    seed: u64,
) -> Result<i32, PipelineError> {
    let ids = entry_ids(common)?;
    let manifest = absolute(&common.manifest)?;
    let backend = absolute_backend(&common.backend)?;
    let out = absolute(&common.out)?;
    let requests: Vec<RunRequest> = ids
        .iter()
        .map(|id| RunRequest {
            manifest: manifest.clone(),
            entry: id.clone(),
            mode,
            backend: backend.clone(),
            box_threshold: common.box_threshold,
            text_threshold: common.text_threshold,
            protocol,
            k_samples,
            seed,
            out: out.clone(),
        })
        .collect();
    let results: Vec<Result<RunRecord, PipelineError>> = std::thread::scope(|s| {
        let handles: Vec<_> = requests.iter().map(|r| s.spawn(move || client.run(r))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(PipelineError::Internal("worker panicked".into()))))
            .collect()
    });

    let mut records = Vec::new();
    let mut first_err = None;
    for (id, res) in ids.iter().zip(results) {
        match res {
            Ok(rec) => {
                for w in &rec.warnings {
                    eprintln!("warning: {id}: {w}");
                }
                println!("{id}: {} ({} ms) -> {}", rec.mode, rec.wall_time_ms, rec.out_dir);
                records.push(rec);
            }
            Err(e) => {
                eprintln!("error: {id}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(fmt) = common.report_format {
        let rows = records.iter().flat_map(|r| r.rows.clone()).collect::<Vec<_>>();
        if !rows.is_empty() {
            let table = ReportTable::new(rows, records[0].averaging);
            print!(
                "{}",
                match fmt {
                    FormatArg::Csv => table.to_csv(),
                    FormatArg::Json => table.to_json() + "\n",
                    FormatArg::Text => table.to_text(),
                }
            );
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let scored: Vec<&RunRecord> = records.iter().filter(|r| !r.rows.is_empty()).collect();
    if !scored.is_empty() && scored.iter().all(|r| r.degenerate_only) {
        eprintln!("warning: every metric row hit a zero-denominator convention");
        return Ok(EXIT_DEGENERATE);
    }
    Ok(0)
}

fn serve(addr: &str) -> Result<i32, PipelineError> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| PipelineError::Io(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| PipelineError::Io(format!("cannot bind {addr}: {e}")))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| PipelineError::Io(e.to_string()))?);
        geoprompt_server::serve(listener).await.map_err(|e| PipelineError::Io(e.to_string()))
    })?;
    Ok(0)
}

/// Execute a parsed command line and return the process exit code.
pub fn execute(cli: Cli) -> Result<i32, PipelineError> {
    match &cli.command {
        Command::Serve { addr } => serve(addr),
        Command::Run(a) => {
            let c = client(&cli.server)?;
            run_entries(&c, &a.common, a.mode.map(Into::into), a.protocol.into(), a.k_samples, a.seed)
        }
        Command::Oneshot(a) => {
            let c = client(&cli.server)?;
            run_entries(&c, &a.common, Some(RunMode::Oneshot), a.mode.into(), a.k_samples, a.seed)
        }
        Command::Report(a) => {
            let c = client(&cli.server)?;
            let records = a.records.iter().map(|p| absolute(p)).collect::<Result<_, _>>()?;
            let resp = c.report(&ReportRequest {
                records,
                format: a.report_format.into(),
                averaging: a.averaging.map(|x| match x {
                    AveragingArg::Macro => Averaging::Macro,
                    AveragingArg::Pooled => Averaging::Pooled,
                }),
            })?;
            let mut content = resp.content;
            if !content.ends_with('\n') {
                content.push('\n');
            }
            match &a.output {
                Some(p) => std::fs::write(p, content).map_err(|e| PipelineError::Io(format!("{}: {e}", p.display())))?,
                None => print!("{content}"),
            }
            Ok(0)
        }
        Command::Metrics(a) => {
            let c = client(&cli.server)?;
            let resp = c.metrics(&MetricsRequest {
                pred_path: absolute(&a.pred)?,
                gt_path: absolute(&a.gt)?,
                valid_path: a.valid.as_deref().map(absolute).transpose()?,
                class_id: a.class_id,
            })?;
            let m = &resp.metrics;
            println!(
                "tp={} fp={} fn={} tn={}",
                resp.counts.tp, resp.counts.fp, resp.counts.fn_, resp.counts.tn
            );
            println!(
                "dice={:.6} iou={:.6} pixel_acc={:.6} tpr={:.6} fpr={:.6}",
                m.dice, m.iou, m.pixel_acc, m.tpr, m.fpr
            );
            Ok(if m.degenerate { EXIT_DEGENERATE } else { 0 })
        }
        Command::RenderScene(a) => {
            let c = client(&cli.server)?;
            let resp = c.render_scene(&RenderRequest {
                scene: absolute(&a.scene)?,
                out_dir: absolute(&a.out)?,
                target: a.target.clone(),
            })?;
            println!("image: {}", resp.image);
            println!("ground truth: {}", resp.ground_truth);
            println!("boxes: {}", resp.boxes);
            println!("points: {}", resp.points);
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn oneshot_flags_parse() {
        let cli = Cli::try_parse_from([
            "geoprompt", "oneshot", "--manifest", "m.yaml", "--entry", "00", "--backend", "mock:s.json", "--mode",
            "human_label", "--k-samples", "5", "--seed", "7", "--out", "o",
        ])
        .unwrap();
        match cli.command {
            Command::Oneshot(a) => {
                assert_eq!(a.mode, ProtocolArg::HumanLabel);
                assert_eq!((a.k_samples, a.seed), (5, 7));
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn backend_paths_become_absolute() {
        let spec = absolute_backend("mock:scene.json").unwrap();
        assert!(spec.starts_with("mock:/"));
        assert!(spec.ends_with("/scene.json"));
    }
}
