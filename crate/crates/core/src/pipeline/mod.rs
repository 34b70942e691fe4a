//! Manifest-driven runs: load an entry, run one engine, write the output
//! directory and its run record, and merge records into report tables.
//!
//! Output layout for one run:
//!
//! ```text
//! <out>/<entry>/<mode>/
//!     mosaic.tif         instance ids (classes.tif too for multiclass entries)
//!     instances/NNN.tif  one mask per instance
//!     vector.geojson
//!     runlog.jsonl
//!     metrics.csv        all modes but general
//!     weights.json, loss_trace.csv        one-shot runs
//!     samples/NN/...     one-shot human-label runs with k > 1
//!     run_record.json
//! ```
//!
//! One-shot runs use `oneshot_text_auto` or `oneshot_human_label` as `<mode>`.

mod manifest;
mod report;
mod scene;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::api::{ErrorKind, MetricsRequest, MetricsResponse, OneshotProtocol, RunRequest};
use crate::backends::{backend_from_spec, Backend, BackendError};
use crate::geodata::{
    connected_components, features_to_geojson, load_label_raster, load_raster, mosaic, prompts_from_vector,
    prompts_from_vector_for_class, save_mask, save_raster, vectorize, GeoError, GeoRaster,
    InstanceMask, LabelRaster, PromptSet, VectorMode,
};
use crate::metrics::{
    aggregate, confusion, multiclass_row, one_against_all, Averaging, ConfusionCounts, MetricRow, MetricsError,
    ReportRow, ReportTable, TableKind,
};
use crate::oneshot::{
    exemplar_from_labels, finetune, run_oneshot, sample_instance_ids, select_exemplar_text, trace_to_csv,
    OneshotConfig, OneshotError, ScaleWeights, TraceRow, TrainConfig,
};
use crate::promptseg::{run_boxes, run_general, run_points, run_text_loop, LoopConfig, PromptError, RunLog, ScaleSelect};

pub use manifest::{
    ClassSpec, DatasetManifest, EntryOptions, ManifestEntry, Platform, PromptSpec, RunMode, Thresholds,
};
pub use report::{cmd_report, collect_records};
pub use scene::render_scene;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PipelineError::Validation(_) => ErrorKind::Validation,
            PipelineError::Backend(_) => ErrorKind::Backend,
            PipelineError::Io(_) => ErrorKind::Io,
            PipelineError::Internal(_) => ErrorKind::Internal,
        }
    }

    pub fn from_kind(kind: ErrorKind, message: String) -> Self {
        match kind {
            ErrorKind::Validation => PipelineError::Validation(message),
            ErrorKind::Backend => PipelineError::Backend(message),
            ErrorKind::Io => PipelineError::Io(message),
            ErrorKind::Internal => PipelineError::Internal(message),
        }
    }

    pub fn message(&self) -> String {
        match self {
            PipelineError::Validation(m)
            | PipelineError::Backend(m)
            | PipelineError::Io(m)
            | PipelineError::Internal(m) => m.clone(),
        }
    }

    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Backend(_) => 3,
            PipelineError::Io(_) | PipelineError::Internal(_) => 1,
        }
    }
}

impl From<BackendError> for PipelineError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(m) => PipelineError::Validation(format!("backend: {m}")),
            other => PipelineError::Backend(other.to_string()),
        }
    }
}

impl From<GeoError> for PipelineError {
    fn from(e: GeoError) -> Self {
        match e {
            GeoError::Io { .. } | GeoError::Encode(_) => PipelineError::Io(e.to_string()),
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<PromptError> for PipelineError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Backend(b) => b.into(),
            PromptError::Geo(g) => g.into(),
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<OneshotError> for PipelineError {
    fn from(e: OneshotError) -> Self {
        match e {
            OneshotError::Backend(b) => b.into(),
            OneshotError::Geo(g) => g.into(),
            OneshotError::Prompt(p) => p.into(),
            OneshotError::Metrics(m) => m.into(),
            OneshotError::Diverged { .. } | OneshotError::Numeric(_) => PipelineError::Internal(e.to_string()),
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Everything needed to reproduce and audit one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest_hash: String,
    pub entry: String,
    pub mode: String,
    pub backend: String,
    pub config: serde_json::Value,
    pub wall_time_ms: u64,
    pub warnings: Vec<String>,
    pub out_dir: String,
    /// Output file (relative to `out_dir`) to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
    pub averaging: Averaging,
    /// Every metric row fell back to a zero-denominator convention.
    pub degenerate_only: bool,
}

pub const RUN_RECORD: &str = "run_record.json";

/// Targets of one entry: `(class id, name)`, with id 0 for single-class entries.
fn targets(entry: &ManifestEntry) -> Vec<(u32, String)> {
    match &entry.classes {
        Some(classes) => classes.iter().map(|c| (c.id, c.name.clone())).collect(),
        None => vec![(0, entry.target.clone())],
    }
}

struct ClassRun {
    class_id: u32,
    name: String,
    instances: Vec<InstanceMask>,
    log: RunLog,
}

/// Instances of all classes renumbered into one id space.
struct Assembled {
    instances: Vec<InstanceMask>,
    class_of: Vec<u32>,
    mosaic: LabelRaster,
    log: RunLog,
}

fn assemble(image: &GeoRaster, runs: &[ClassRun], multiclass: bool) -> Result<Assembled> {
    let mut instances = Vec::new();
    let mut class_of = Vec::new();
    let mut log = RunLog::default();
    for run in runs {
        for inst in &run.instances {
            let id = instances.len() as u32 + 1;
            instances.push(InstanceMask::new(inst.mask().clone(), id, inst.score, inst.provenance)?);
            class_of.push(run.class_id);
        }
        for e in &run.log.events {
            let detail = if multiclass {
                format!("{}: {}", run.name, e.detail)
            } else {
                e.detail.clone()
            };
            log.push(e.iteration, &e.event, detail);
        }
    }
    let mosaic = mosaic(&instances, image.grid())?;
    Ok(Assembled {
        instances,
        class_of,
        mosaic,
        log,
    })
}

impl Assembled {
    fn class_raster(&self) -> Result<LabelRaster> {
        let data = self
            .mosaic
            .data()
            .iter()
            .map(|&id| if id == 0 { 0 } else { self.class_of[id as usize - 1] })
            .collect();
        Ok(LabelRaster::new(self.mosaic.grid().clone(), data)?)
    }
}

/// Score assembled predictions against ground truth.
fn evaluate(a: &Assembled, gt: &LabelRaster, entry: &ManifestEntry, warnings: &mut Vec<String>) -> Result<(MetricRow, Vec<ConfusionCounts>)> {
    if entry.classes.is_none() {
        let c = confusion(&a.mosaic.nonzero(), &gt.nonzero(), None)?;
        return Ok((MetricRow::from_counts(&c), vec![c]));
    }
    let classes = a.class_raster()?;
    let mut per_class = Vec::new();
    for (id, name) in targets(entry) {
        match one_against_all(gt, id) {
            Ok((gt_c, valid)) => per_class.push(confusion(&classes.mask_of(id), &gt_c, Some(&valid))?),
            Err(MetricsError::EmptyClass(_)) => {
                warnings.push(format!("class {id} ({name}) is absent from the ground truth; skipped in metrics"))
            }
            Err(e) => return Err(e.into()),
        }
    }
    let row = multiclass_row(&per_class, entry.options.averaging)?;
    Ok((row, per_class))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Mosaic, per-instance masks, polygons and run log.
fn write_products(dir: &Path, a: &Assembled, multiclass: bool) -> Result<()> {
    std::fs::create_dir_all(dir.join("instances")).map_err(|e| io_err(dir, e))?;
    let grid = a.mosaic.grid();
    save_raster(&a.mosaic, dir.join("mosaic.tif"))?;
    if multiclass {
        save_raster(&a.class_raster()?, dir.join("classes.tif"))?;
    }
    for inst in &a.instances {
        save_mask(
            inst.mask(),
            &grid.transform,
            &grid.crs,
            dir.join("instances").join(format!("{:03}.tif", inst.instance_id)),
        )?;
    }
    write_file(&dir.join("vector.geojson"), features_to_geojson(&vectorize(&a.mosaic), &grid.crs))?;
    write_file(&dir.join("runlog.jsonl"), a.log.to_jsonl())
}

#[derive(Serialize)]
struct WeightsFile<'a> {
    theta: [f64; 2],
    derived: [f64; 3],
    config_hash: &'a str,
}

fn weights_json(w: &ScaleWeights, cfg: &TrainConfig) -> String {
    let hash = cfg.hash();
    serde_json::to_string_pretty(&WeightsFile {
        theta: w.theta,
        derived: w.weights(),
        config_hash: &hash,
    })
    .expect("weights serialize")
        + "\n"
}

/// Weights and loss traces of one one-shot run, one per class.
fn write_training(dir: &Path, fits: &[(u32, ScaleWeights, Vec<TraceRow>)], cfg: &TrainConfig) -> Result<()> {
    for (class_id, w, trace) in fits {
        let suffix = if *class_id == 0 { String::new() } else { format!("_{class_id}") };
        write_file(&dir.join(format!("weights{suffix}.json")), weights_json(w, cfg))?;
        write_file(&dir.join(format!("loss_trace{suffix}.csv")), trace_to_csv(trace))?;
    }
    Ok(())
}

fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| io_err(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != RUN_RECORD) {
                let bytes = std::fs::read(&p).map_err(|e| io_err(&p, e))?;
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_hex(&bytes));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Resolved inputs shared by every mode.
pub struct RunContext<'a> {
    pub manifest: &'a DatasetManifest,
    pub entry: &'a ManifestEntry,
    pub image: GeoRaster,
    pub gt: Option<LabelRaster>,
    pub backend: &'a dyn Backend,
    pub loop_cfg: LoopConfig,
    pub select: ScaleSelect,
}

impl RunContext<'_> {
    fn multiclass(&self) -> bool {
        self.entry.classes.is_some()
    }

    fn gt(&self) -> Result<&LabelRaster> {
        self.gt
            .as_ref()
            .ok_or_else(|| PipelineError::Validation(format!("entry '{}': gt_path: required for this mode", self.entry.id)))
    }

    fn row(&self, prompt: &str, table: TableKind, metrics: MetricRow) -> ReportRow {
        ReportRow {
            dataset: self.entry.dataset_id().to_string(),
            table,
            platform: self.entry.platform.label().into(),
            target: self.entry.target.clone(),
            resolution: self.entry.resolution_label(),
            prompt: prompt.into(),
            metrics,
        }
    }
}

/// Result of one mode before the record is written.
pub struct ModeOutput {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

fn collect_warnings(log: &RunLog, warnings: &mut Vec<String>) {
    warnings.extend(log.warnings().map(|e| format!("iteration {}: {}: {}", e.iteration, e.event, e.detail)));
}

/// Whole-image segmentation; rasters only, no metrics.
pub fn cmd_general(ctx: &RunContext, dir: &Path) -> Result<ModeOutput> {
    let out = run_general(&ctx.image, ctx.backend)?;
    let run = ClassRun {
        class_id: 0,
        name: ctx.entry.target.clone(),
        instances: out.instances,
        log: out.log,
    };
    let a = assemble(&ctx.image, &[run], false)?;
    write_products(dir, &a, false)?;
    let mut warnings = Vec::new();
    collect_warnings(&a.log, &mut warnings);
    Ok(ModeOutput { rows: vec![], warnings })
}

fn vector_prompts(ctx: &RunContext, mode: VectorMode, class: Option<&str>) -> Result<Option<PromptSet>> {
    let rel = ctx.entry.prompt.vector_path.as_ref().ok_or_else(|| {
        PipelineError::Validation(format!("entry '{}': prompt.vector_path: required for this mode", ctx.entry.id))
    })?;
    let path = ctx.manifest.resolve(rel);
    let res = match class {
        Some(c) => prompts_from_vector_for_class(&path, ctx.image.grid(), mode, Some(c)),
        None => prompts_from_vector(&path, ctx.image.grid(), mode),
    };
    match res {
        Ok(mut p) => {
            if !ctx.entry.prompt.group_points {
                p.points.iter_mut().for_each(|pt| pt.group = None);
            }
            Ok(Some(p))
        }
        Err(GeoError::EmptyPrompts(_)) if class.is_some() => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn zero_shot(ctx: &RunContext, dir: &Path, mode: RunMode) -> Result<ModeOutput> {
    let multiclass = ctx.multiclass();
    let mut warnings = Vec::new();
    let mut runs = Vec::new();
    for (class_id, name) in targets(ctx.entry) {
        let class = multiclass.then_some(name.as_str());
        let out = match mode {
            RunMode::Box | RunMode::Point => {
                let vmode = if mode == RunMode::Box { VectorMode::Boxes } else { VectorMode::Points };
                match vector_prompts(ctx, vmode, class)? {
                    Some(p) if mode == RunMode::Box => Some(run_boxes(&ctx.image, &p, ctx.backend, ctx.select)?),
                    Some(p) => Some(run_points(&ctx.image, &p, ctx.backend, ctx.select)?),
                    None => {
                        warnings.push(format!("no {} prompts for class '{name}'", mode.as_str()));
                        None
                    }
                }
            }
            RunMode::Text => {
                let phrase = if multiclass { name.to_lowercase() } else { ctx.entry.phrase() };
                Some(run_text_loop(&ctx.image, &phrase, &ctx.loop_cfg, ctx.backend, ctx.select)?)
            }
            _ => unreachable!("zero-shot modes only"),
        };
        if let Some(out) = out {
            runs.push(ClassRun {
                class_id,
                name,
                instances: out.instances,
                log: out.log,
            });
        }
    }
    let a = assemble(&ctx.image, &runs, multiclass)?;
    write_products(dir, &a, multiclass)?;
    collect_warnings(&a.log, &mut warnings);
    let (metrics, _) = evaluate(&a, ctx.gt()?, ctx.entry, &mut warnings)?;
    let prompt = match mode {
        RunMode::Box => "Box",
        RunMode::Point => "Point",
        _ => "Text",
    };
    Ok(ModeOutput {
        rows: vec![ctx.row(prompt, TableKind::ZeroShot, metrics)],
        warnings,
    })
}

pub fn cmd_box(ctx: &RunContext, dir: &Path) -> Result<ModeOutput> {
    zero_shot(ctx, dir, RunMode::Box)
}

pub fn cmd_point(ctx: &RunContext, dir: &Path) -> Result<ModeOutput> {
    zero_shot(ctx, dir, RunMode::Point)
}

pub fn cmd_text(ctx: &RunContext, dir: &Path) -> Result<ModeOutput> {
    zero_shot(ctx, dir, RunMode::Text)
}

/// Instance ground truth for one target: connected components of its pixels.
fn instance_gt(gt: &LabelRaster, class_id: u32) -> Result<LabelRaster> {
    if class_id == 0 {
        return Ok(connected_components(gt));
    }
    let only = gt
        .data()
        .iter()
        .map(|&v| u32::from(v == class_id))
        .collect();
    Ok(connected_components(&LabelRaster::new(gt.grid().clone(), only)?))
}

/// One complete one-shot pass over every target, with exemplars from `pick`.
struct OneshotPass {
    runs: Vec<ClassRun>,
    fits: Vec<(u32, ScaleWeights, Vec<TraceRow>)>,
}

fn oneshot_pass(
    ctx: &RunContext,
    train: &TrainConfig,
    os_cfg: &OneshotConfig,
    warnings: &mut Vec<String>,
    mut pick: impl FnMut(u32, &str) -> Result<Option<crate::oneshot::Exemplar>>,
) -> Result<OneshotPass> {
    let mut runs = Vec::new();
    let mut fits = Vec::new();
    for (class_id, name) in targets(ctx.entry) {
        let Some(exemplar) = pick(class_id, &name)? else {
            warnings.push(format!("no exemplar for '{name}'; class left empty"));
            continue;
        };
        let ft = finetune(&exemplar, ctx.backend, train)?;
        let out = run_oneshot(&ctx.image, &exemplar, &ft.weights, ctx.backend, os_cfg)?;
        fits.push((class_id, ft.weights, ft.trace));
        runs.push(ClassRun {
            class_id,
            name,
            instances: out.instances,
            log: out.log,
        });
    }
    Ok(OneshotPass { runs, fits })
}

pub fn cmd_oneshot(
    ctx: &RunContext,
    dir: &Path,
    protocol: OneshotProtocol,
    k_samples: usize,
    seed: u64,
) -> Result<ModeOutput> {
    let multiclass = ctx.multiclass();
    let gt = ctx.gt()?;
    let opts = &ctx.entry.options;
    let train = opts.train;
    let os_cfg = OneshotConfig {
        stop_eps: opts.stop_eps,
        max_iterations: opts.oneshot_max_iterations,
        fill_mode: opts.fill_mode,
    };
    let mut warnings = Vec::new();
    match protocol {
        OneshotProtocol::TextAuto => {
            let pass = oneshot_pass(ctx, &train, &os_cfg, &mut warnings, |_, name| {
                let phrase = if multiclass { name.to_lowercase() } else { ctx.entry.phrase() };
                match select_exemplar_text(&ctx.image, &phrase, &ctx.loop_cfg, ctx.backend, ctx.select) {
                    Ok(ex) => Ok(Some(ex)),
                    Err(OneshotError::ExemplarNotFound(_)) => Ok(None),
                    Err(e) => Err(e.into()),
                }
            })?;
            let a = assemble(&ctx.image, &pass.runs, multiclass)?;
            write_products(dir, &a, multiclass)?;
            write_training(dir, &pass.fits, &train)?;
            collect_warnings(&a.log, &mut warnings);
            let (metrics, _) = evaluate(&a, gt, ctx.entry, &mut warnings)?;
            Ok(ModeOutput {
                rows: vec![ctx.row("Text PerSAM-F", TableKind::OneShot, metrics)],
                warnings,
            })
        }
        OneshotProtocol::HumanLabel => {
            if k_samples == 0 {
                return Err(PipelineError::Validation("k_samples must be at least 1".into()));
            }
            let mut draws: BTreeMap<u32, (LabelRaster, Vec<u32>)> = BTreeMap::new();
            for (class_id, name) in targets(ctx.entry) {
                let inst = instance_gt(gt, class_id)?;
                if inst.labels().is_empty() {
                    warnings.push(format!("ground truth has no '{name}' instance to sample"));
                    continue;
                }
                let ids = sample_instance_ids(&inst, k_samples, seed.wrapping_add(class_id as u64))?;
                draws.insert(class_id, (inst, ids));
            }
            let mut rows = Vec::with_capacity(k_samples);
            for s in 0..k_samples {
                let pass = oneshot_pass(ctx, &train, &os_cfg, &mut warnings, |class_id, _| {
                    Ok(match draws.get(&class_id) {
                        Some((inst, ids)) => Some(exemplar_from_labels(&ctx.image, inst, ids[s])?),
                        None => None,
                    })
                })?;
                let mut a = assemble(&ctx.image, &pass.runs, multiclass)?;
                let note = draws
                    .iter()
                    .map(|(c, (_, ids))| format!("class {c}: exemplar component {}", ids[s]))
                    .collect::<Vec<_>>()
                    .join(", ");
                let mut log = RunLog::default();
                log.push(0, "exemplar", format!("sample {}: {note}", s + 1));
                log.extend(std::mem::take(&mut a.log));
                a.log = log;
                if s == 0 {
                    write_products(dir, &a, multiclass)?;
                    write_training(dir, &pass.fits, &train)?;
                }
                if k_samples > 1 {
                    let sub = dir.join("samples").join(format!("{:02}", s + 1));
                    write_products(&sub, &a, multiclass)?;
                    write_training(&sub, &pass.fits, &train)?;
                }
                collect_warnings(&a.log, &mut warnings);
                rows.push(evaluate(&a, gt, ctx.entry, &mut warnings)?.0);
            }
            let summary = aggregate(&rows)?;
            Ok(ModeOutput {
                rows: vec![ctx.row("PerSAM-F", TableKind::OneShot, summary)],
                warnings,
            })
        }
    }
}

fn check_override(field: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(0.0..=1.0).contains(&x) => Err(PipelineError::Validation(format!("{field}: {x} is outside [0,1]"))),
        _ => Ok(()),
    }
}

/// Run one manifest entry in one mode and write its output directory.
pub fn cmd_run(req: &RunRequest) -> Result<RunRecord> {
    let started = Instant::now();
    let manifest = DatasetManifest::load(Path::new(&req.manifest))?;
    let entry = manifest.entry(&req.entry)?;
    let mode = req.mode.unwrap_or(entry.prompt.mode);
    manifest.validate_for(entry, mode)?;
    check_override("thresholds.box", req.box_threshold)?;
    check_override("thresholds.text", req.text_threshold)?;
    if req.k_samples == 0 {
        return Err(PipelineError::Validation("k_samples must be at least 1".into()));
    }
    let loop_cfg = LoopConfig {
        box_threshold: req.box_threshold.unwrap_or(entry.thresholds.box_),
        text_threshold: req.text_threshold.unwrap_or(entry.thresholds.text),
        max_iterations: entry.options.max_iterations,
        fill_mode: entry.options.fill_mode,
    };
    let image = load_raster(manifest.resolve(&entry.raster_path))?;
    let gt = match &entry.gt_path {
        Some(p) if mode != RunMode::General => {
            let gt = load_label_raster(manifest.resolve(p))?;
            if !image.grid().same_shape(gt.width(), gt.height()) {
                return Err(PipelineError::Validation(format!(
                    "entry '{}': gt_path: ground truth is {}x{}, raster is {}x{}",
                    entry.id,
                    gt.width(),
                    gt.height(),
                    image.width(),
                    image.height()
                )));
            }
            Some(gt)
        }
        _ => None,
    };
    let backend = backend_from_spec(&req.backend, Path::new("."))?;

    let mode_dir = match mode {
        RunMode::Oneshot => format!("oneshot_{}", req.protocol.as_str()),
        m => m.as_str().to_string(),
    };
    let dir = Path::new(&req.out).join(&entry.id).join(&mode_dir);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

    let ctx = RunContext {
        manifest: &manifest,
        entry,
        image,
        gt,
        backend: backend.as_ref(),
        loop_cfg,
        select: entry.options.scale_select,
    };
    let output = match mode {
        RunMode::General => cmd_general(&ctx, &dir)?,
        RunMode::Box => cmd_box(&ctx, &dir)?,
        RunMode::Point => cmd_point(&ctx, &dir)?,
        RunMode::Text => cmd_text(&ctx, &dir)?,
        RunMode::Oneshot => cmd_oneshot(&ctx, &dir, req.protocol, req.k_samples, req.seed)?,
    };
    if !output.rows.is_empty() {
        let table = ReportTable::new(output.rows.clone(), entry.options.averaging);
        write_file(&dir.join("metrics.csv"), table.to_plain_csv())?;
    }
    let config = json!({
        "mode": mode,
        "protocol": (mode == RunMode::Oneshot).then_some(req.protocol),
        "thresholds": {"box": loop_cfg.box_threshold, "text": loop_cfg.text_threshold},
        "loop": loop_cfg,
        "options": entry.options,
        "k_samples": req.k_samples,
        "seed": req.seed,
    });
    let record = RunRecord {
        manifest_hash: manifest.hash.clone(),
        entry: entry.id.clone(),
        mode: mode_dir,
        backend: req.backend.clone(),
        config,
        wall_time_ms: started.elapsed().as_millis() as u64,
        warnings: output.warnings,
        out_dir: dir.to_string_lossy().into_owned(),
        outputs: hash_tree(&dir)?,
        degenerate_only: !output.rows.is_empty() && output.rows.iter().all(|r| r.metrics.degenerate),
        rows: output.rows,
        averaging: entry.options.averaging,
    };
    let text = serde_json::to_string_pretty(&record).expect("record serializes") + "\n";
    write_file(&dir.join(RUN_RECORD), text)?;
    Ok(record)
}

/// Confusion counts and metrics for one prediction raster against ground truth.
/// Nonzero pixels are positives unless `class_id` selects one class, in which
/// case unlabelled ground-truth pixels are left out.
pub fn cmd_metrics(req: &MetricsRequest) -> Result<MetricsResponse> {
    let pred = load_label_raster(&req.pred_path)?;
    let gt = load_label_raster(&req.gt_path)?;
    let (pred_mask, gt_mask, mut valid) = match req.class_id {
        Some(id) => {
            let (g, v) = one_against_all(&gt, id)?;
            (pred.mask_of(id), g, Some(v))
        }
        None => (pred.nonzero(), gt.nonzero(), None),
    };
    if let Some(p) = &req.valid_path {
        let extra = load_label_raster(p)?.nonzero();
        valid = Some(match valid {
            Some(v) => v.intersection(&extra)?,
            None => extra,
        });
    }
    let counts = confusion(&pred_mask, &gt_mask, valid.as_ref())?;
    Ok(MetricsResponse {
        metrics: MetricRow::from_counts(&counts),
        counts,
    })
}
