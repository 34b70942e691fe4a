//! One-shot segmentation from a single exemplar.
//!
//! The exemplar is either the highest-logit text detection or a ground-truth
//! instance. Its mean embedding locates candidates through a cosine-similarity
//! prior; two scale weights are fitted on the exemplar, and the loop segments
//! the strongest prior, erases it from the working image and repeats until the
//! prior returns to a position it has already used.

mod train;

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, FeatureMap, PointPrompt};
use crate::geodata::{
    load_mask, mosaic, BinaryMask, GeoError, GeoRaster, InstanceMask, LabelRaster, PixelPoint, PromptKind,
    Provenance,
};
use crate::metrics::{aggregate, confusion, MetricRow, MetricsError};
use crate::promptseg::{fill_values, run_text_loop, FillMode, LoopConfig, PromptError, RunLog, ScaleSelect};

pub use train::{
    binarize, combine_scales, fit_scale_weights, loss_and_grad, losses, trace_to_csv, LossValues, ScaleWeights,
    TraceRow, TrainConfig,
};

#[derive(Debug, Error)]
pub enum OneshotError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no exemplar found for '{0}' above the thresholds")]
    ExemplarNotFound(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("exemplar mask covers no feature cell")]
    Resolution,
    #[error("every feature cell is excluded")]
    Exhausted,
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: u32 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = OneshotError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarSource {
    TextAuto,
    HumanLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub image: GeoRaster,
    pub mask: BinaryMask,
    pub source: ExemplarSource,
    pub logit: f64,
}

impl Exemplar {
    pub fn new(image: GeoRaster, mask: BinaryMask, source: ExemplarSource, logit: f64) -> Result<Self> {
        if !image.grid().same_shape(mask.width(), mask.height()) {
            return Err(OneshotError::Shape(format!(
                "exemplar mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        if mask.is_empty() {
            return Err(OneshotError::Precondition("exemplar mask has no positive pixels".into()));
        }
        Ok(Self {
            image,
            mask,
            source,
            logit,
        })
    }
}

/// The first extraction of the text loop becomes the exemplar.
pub fn select_exemplar_text(
    image: &GeoRaster,
    phrase: &str,
    cfg: &LoopConfig,
    backend: &dyn Backend,
    select: ScaleSelect,
) -> Result<Exemplar> {
    let first = LoopConfig {
        max_iterations: 1,
        ..*cfg
    };
    let out = run_text_loop(image, phrase, &first, backend, select)?;
    let inst = out
        .instances
        .into_iter()
        .next()
        .ok_or_else(|| OneshotError::ExemplarNotFound(phrase.to_string()))?;
    Exemplar::new(image.clone(), inst.mask().clone(), ExemplarSource::TextAuto, inst.score)
}

/// Exemplar from a mask file drawn by an annotator.
pub fn select_exemplar_human(image: &GeoRaster, mask_path: &Path) -> Result<Exemplar> {
    let (mask, _) = load_mask(mask_path)?;
    Exemplar::new(image.clone(), mask, ExemplarSource::HumanLabel, 1.0)
}

/// Exemplar from one instance of a ground-truth label raster.
pub fn exemplar_from_labels(image: &GeoRaster, labels: &LabelRaster, id: u32) -> Result<Exemplar> {
    if !image.grid().same_shape(labels.width(), labels.height()) {
        return Err(OneshotError::Shape(format!(
            "labels are {}x{}, image is {}x{}",
            labels.width(),
            labels.height(),
            image.width(),
            image.height()
        )));
    }
    Exemplar::new(image.clone(), labels.mask_of(id), ExemplarSource::HumanLabel, 1.0)
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(OneshotError::Numeric(format!("cannot normalise vector of norm {norm}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

fn cell_selected(features: &FeatureMap, mask: &BinaryMask, col: usize, row: usize) -> bool {
    let (x, y) = features.cell_pixel(col, row, mask.width(), mask.height());
    mask.get(x, y)
}

/// Unit-length mean embedding of the cells whose centre lies in the exemplar mask.
pub fn target_embedding(exemplar: &Exemplar, backend: &dyn Backend) -> Result<Vec<f64>> {
    let features = backend.embed(&exemplar.image)?;
    let mut sum = vec![0.0; features.dim()];
    let mut hits = 0usize;
    for row in 0..features.rows() {
        for col in 0..features.cols() {
            if cell_selected(&features, &exemplar.mask, col, row) {
                hits += 1;
                for (s, v) in sum.iter_mut().zip(features.vector(col, row)) {
                    *s += v;
                }
            }
        }
    }
    if hits == 0 {
        return Err(OneshotError::Resolution);
    }
    normalize(&mut sum)?;
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorPoint {
    pub positive: PixelPoint,
    pub negative: PixelPoint,
    /// Cosine similarity at the positive cell.
    pub similarity: f64,
}

/// Location prior over a precomputed feature map.
pub fn location_prior_from_features(
    features: &FeatureMap,
    target: &[f64],
    exclusion: &BinaryMask,
) -> Result<PriorPoint> {
    if target.len() != features.dim() {
        return Err(OneshotError::Shape(format!(
            "target has {} dimensions, features have {}",
            target.len(),
            features.dim()
        )));
    }
    if features.cols() * features.rows() < 2 {
        return Err(OneshotError::Precondition("a location prior needs at least two feature cells".into()));
    }
    let sim = |col: usize, row: usize| -> f64 {
        features
            .vector(col, row)
            .iter()
            .zip(target)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    };
    // column-major scan gives the (x, y) lexicographic tie-break for free
    let mut best: Option<((usize, usize), f64)> = None;
    for col in 0..features.cols() {
        for row in 0..features.rows() {
            if cell_selected(features, exclusion, col, row) {
                continue;
            }
            let s = sim(col, row);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some(((col, row), s));
            }
        }
    }
    let ((pc, pr), similarity) = best.ok_or(OneshotError::Exhausted)?;
    let mut worst: Option<((usize, usize), f64)> = None;
    for col in 0..features.cols() {
        for row in 0..features.rows() {
            if (col, row) == (pc, pr) {
                continue;
            }
            let s = sim(col, row);
            if worst.is_none_or(|(_, w)| s < w) {
                worst = Some(((col, row), s));
            }
        }
    }
    let ((nc, nr), _) = worst.expect("at least two cells");
    Ok(PriorPoint {
        positive: features.cell_center(pc, pr),
        negative: features.cell_center(nc, nr),
        similarity,
    })
}

pub fn location_prior(
    image: &GeoRaster,
    target: &[f64],
    backend: &dyn Backend,
    exclusion: &BinaryMask,
) -> Result<PriorPoint> {
    if !image.grid().same_shape(exclusion.width(), exclusion.height()) {
        return Err(OneshotError::Shape("exclusion mask does not match the image".into()));
    }
    let features = backend.embed(image)?;
    location_prior_from_features(&features, target, exclusion)
}

fn point_prompt(prior: &PriorPoint, backend: &dyn Backend) -> PointPrompt {
    PointPrompt {
        foreground: vec![prior.positive],
        background: if backend.supports_background_points() {
            vec![prior.negative]
        } else {
            Vec::new()
        },
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub weights: ScaleWeights,
    pub trace: Vec<TraceRow>,
    pub prior: PriorPoint,
}

/// Fit scale weights on the exemplar's own image, prompted at its prior point.
pub fn finetune(exemplar: &Exemplar, backend: &dyn Backend, cfg: &TrainConfig) -> Result<FinetuneOutput> {
    cfg.validate()?;
    let target = target_embedding(exemplar, backend)?;
    let prior = location_prior(&exemplar.image, &target, backend, &exemplar.mask.complement())?;
    let masks = backend.segment_points(&exemplar.image, &point_prompt(&prior, backend))?;
    let (weights, trace) = fit_scale_weights(&masks, &exemplar.mask, cfg)?;
    Ok(FinetuneOutput { weights, trace, prior })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneshotConfig {
    /// Chebyshev distance, in pixels, under which a prior counts as a repeat.
    pub stop_eps: f64,
    pub max_iterations: u32,
    pub fill_mode: FillMode,
}

impl Default for OneshotConfig {
    fn default() -> Self {
        Self {
            stop_eps: 2.0,
            max_iterations: 100,
            fill_mode: FillMode::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OneshotStop {
    Breakpoint,
    EmptyInstance,
    MaxIterations,
}

pub const EVENT_BREAKPOINT: &str = "breakpoint";

#[derive(Debug, Clone)]
pub struct OneshotOutput {
    pub instances: Vec<InstanceMask>,
    pub mosaic: LabelRaster,
    pub log: RunLog,
    pub stop: OneshotStop,
    pub positives: Vec<PixelPoint>,
}

fn chebyshev(a: &PixelPoint, b: &PixelPoint) -> f64 {
    (a.x - b.x).abs().max((a.y - b.y).abs())
}

/// Segment every instance resembling the exemplar.
///
/// Each extracted instance is erased from the working image and the prior is
/// recomputed; the loop ends once the prior lands within `stop_eps` of a
/// position it already used, on an empty prediction, or at `max_iterations`.
pub fn run_oneshot(
    image: &GeoRaster,
    exemplar: &Exemplar,
    weights: &ScaleWeights,
    backend: &dyn Backend,
    cfg: &OneshotConfig,
) -> Result<OneshotOutput> {
    if weights.theta.iter().any(|t| !t.is_finite()) {
        return Err(OneshotError::Numeric("scale weights are not finite".into()));
    }
    if !(cfg.stop_eps >= 0.0) || cfg.max_iterations == 0 {
        return Err(OneshotError::Config("stop_eps must be >= 0 and max_iterations >= 1".into()));
    }
    let target = target_embedding(exemplar, backend)?;
    let fill = fill_values(image, cfg.fill_mode);
    let nothing = BinaryMask::empty(image.width(), image.height());
    let mut working = image.clone();
    let mut positives: Vec<PixelPoint> = Vec::new();
    let mut instances = Vec::new();
    let mut log = RunLog::default();
    let mut i: u32 = 1;
    let stop = loop {
        let prior = location_prior(&working, &target, backend, &nothing)?;
        if let Some(prev) = positives.iter().position(|p| chebyshev(p, &prior.positive) <= cfg.stop_eps) {
            log.push(
                i,
                EVENT_BREAKPOINT,
                format!(
                    "prior ({}, {}) repeats position of iteration {}",
                    prior.positive.x,
                    prior.positive.y,
                    prev + 1
                ),
            );
            break OneshotStop::Breakpoint;
        }
        if i > cfg.max_iterations {
            log.push(i, "stop", "max_iterations reached");
            break OneshotStop::MaxIterations;
        }
        let masks = backend.segment_points(&working, &point_prompt(&prior, backend))?;
        let mask = binarize(&combine_scales(&masks, weights), image.width(), image.height());
        if mask.is_empty() {
            log.push(i, "stop", "combined prediction is empty");
            break OneshotStop::EmptyInstance;
        }
        log.push(
            i,
            "instance",
            format!(
                "id {i}, prior ({}, {}) similarity {:.6}, {} px",
                prior.positive.x,
                prior.positive.y,
                prior.similarity,
                mask.count()
            ),
        );
        working.fill_masked(&mask, &fill)?;
        positives.push(prior.positive);
        instances.push(InstanceMask::new(
            mask,
            i,
            prior.similarity,
            Provenance {
                kind: PromptKind::Oneshot,
                iteration: i,
            },
        )?);
        i += 1;
    };
    let mosaic = mosaic(&instances, image.grid())?;
    Ok(OneshotOutput {
        instances,
        mosaic,
        log,
        stop,
        positives,
    })
}

/// Draw `k` ground-truth instance ids uniformly, with replacement.
pub fn sample_instance_ids(gt: &LabelRaster, k: usize, seed: u64) -> Result<Vec<u32>> {
    let ids = gt.labels();
    if ids.is_empty() {
        return Err(OneshotError::Precondition("ground truth has no instances to sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k).map(|_| ids[rng.random_range(0..ids.len())]).collect())
}

/// One fine-tune plus loop plus evaluation.
#[derive(Debug, Clone)]
pub struct OneshotSample {
    pub exemplar_source: ExemplarSource,
    /// Ground-truth id used as exemplar (human labels only).
    pub exemplar_id: Option<u32>,
    pub finetune: FinetuneOutput,
    pub output: OneshotOutput,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub human: Vec<OneshotSample>,
    /// Mean ± population std over the human samples.
    pub human_summary: Option<MetricRow>,
    pub text: Option<OneshotSample>,
    pub log: RunLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComparisonConfig {
    pub loop_cfg: LoopConfig,
    pub select: ScaleSelect,
    pub train: TrainConfig,
    pub oneshot: OneshotConfig,
}

/// Fine-tune on `exemplar`, run the loop over `image` and score against `gt`.
pub fn evaluate_exemplar(
    image: &GeoRaster,
    exemplar: &Exemplar,
    exemplar_id: Option<u32>,
    gt: &BinaryMask,
    backend: &dyn Backend,
    cfg: &ComparisonConfig,
) -> Result<OneshotSample> {
    let finetune = finetune(exemplar, backend, &cfg.train)?;
    let output = run_oneshot(image, exemplar, &finetune.weights, backend, &cfg.oneshot)?;
    let metrics = MetricRow::from_counts(&confusion(&output.mosaic.nonzero(), gt, None)?);
    Ok(OneshotSample {
        exemplar_source: exemplar.source,
        exemplar_id,
        finetune,
        output,
        metrics,
    })
}

/// Human-label protocol (k seeded samples, mean ± std) against the
/// text-derived exemplar (a single deterministic run).
pub fn compare_protocols(
    image: &GeoRaster,
    phrase: Option<&str>,
    gt: &LabelRaster,
    k_samples: usize,
    seed: u64,
    backend: &dyn Backend,
    cfg: &ComparisonConfig,
) -> Result<Comparison> {
    let gt_mask = gt.nonzero();
    let mut log = RunLog::default();
    let mut human = Vec::with_capacity(k_samples);
    for (s, id) in sample_instance_ids(gt, k_samples, seed)?.into_iter().enumerate() {
        let ex = exemplar_from_labels(image, gt, id)?;
        log.push(s as u32 + 1, "human_exemplar", format!("sample {} uses ground-truth id {id}", s + 1));
        human.push(evaluate_exemplar(image, &ex, Some(id), &gt_mask, backend, cfg)?);
    }
    let human_summary = if human.is_empty() {
        None
    } else {
        Some(aggregate(&human.iter().map(|h| h.metrics.clone()).collect::<Vec<_>>())?)
    };
    let text = match phrase {
        None => None,
        Some(p) => match select_exemplar_text(image, p, &cfg.loop_cfg, backend, cfg.select) {
            Ok(ex) => Some(evaluate_exemplar(image, &ex, None, &gt_mask, backend, cfg)?),
            Err(OneshotError::ExemplarNotFound(p)) => {
                log.push(0, "warn_no_text_exemplar", format!("no detection of '{p}' passed the thresholds"));
                None
            }
            Err(e) => return Err(e),
        },
    };
    Ok(Comparison {
        human,
        human_summary,
        text,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockBackend, SceneObject, SceneSpec};
    use crate::geodata::Grid;

    fn trees(n: usize) -> MockBackend {
        let objects = (0..n)
            .map(|k| SceneObject::disc(8.0 + 14.0 * k as f64, 10.0 + 3.0 * k as f64, 5.0, "tree", 0.9 - 0.1 * k as f64))
            .chain(std::iter::once(SceneObject::rect(2.0, 24.0, 6.0, 4.0, "house", 0.8)))
            .collect();
        MockBackend::new(SceneSpec::new(14 * n + 4, 30, objects)).unwrap()
    }

    fn short() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn text_exemplar_is_best_detection() {
        let mock = trees(4);
        let ex = select_exemplar_text(&mock.render(), "tree", &LoopConfig::default(), &mock, ScaleSelect::default())
            .unwrap();
        assert_eq!(ex.mask, mock.object_masks()[0]);
        assert_eq!(ex.logit, 0.9);
        let strict = LoopConfig::new(1.0, 1.0);
        assert!(matches!(
            select_exemplar_text(&mock.render(), "tree", &strict, &mock, ScaleSelect::default()),
            Err(OneshotError::ExemplarNotFound(_))
        ));
    }

    #[test]
    fn target_embedding_of_mixed_mask() {
        let mock = trees(1);
        let img = mock.render();
        let ex = Exemplar::new(img.clone(), mock.object_masks()[0].clone(), ExemplarSource::HumanLabel, 1.0).unwrap();
        let t = target_embedding(&ex, &mock).unwrap();
        assert_eq!(t, vec![0.0, 0.0, 1.0]);
        // equal counts of house and tree pixels
        let house = &mock.object_masks()[1];
        let n = house.count();
        let mut tree_part = BinaryMask::empty(img.width(), img.height());
        for (i, _) in mock.object_masks()[0].data().iter().enumerate().filter(|(_, &m)| m).take(n) {
            tree_part.set(i % img.width(), i / img.width(), true);
        }
        let mixed = Exemplar::new(img, house.union(&tree_part).unwrap(), ExemplarSource::HumanLabel, 1.0).unwrap();
        let t = target_embedding(&mixed, &mock).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((t[1] - h).abs() < 1e-12 && (t[2] - h).abs() < 1e-12 && t[0] == 0.0);
    }

    #[test]
    fn prior_respects_exclusion_and_ties() {
        let mock = trees(2);
        let img = mock.render();
        let target = vec![0.0, 0.0, 1.0];
        let none = BinaryMask::empty(img.width(), img.height());
        let p = location_prior(&img, &target, &mock, &none).unwrap();
        let (x, y) = p.positive.pixel();
        assert!(mock.object_masks()[0].get(x, y));
        assert_eq!(p.similarity, 1.0);
        let mut only = BinaryMask::full(img.width(), img.height());
        only.set(0, 0, false);
        let p = location_prior(&img, &target, &mock, &only).unwrap();
        assert_eq!((p.positive.x, p.positive.y), (0.5, 0.5));
        assert!(matches!(
            location_prior(&img, &target, &mock, &BinaryMask::full(img.width(), img.height())),
            Err(OneshotError::Exhausted)
        ));
        let uniform = FeatureMap::new(3, 2, 1, 1, vec![1.0; 6]).unwrap();
        let p = location_prior_from_features(&uniform, &[1.0], &BinaryMask::empty(3, 2)).unwrap();
        assert_eq!((p.positive.x, p.positive.y), (0.5, 0.5));
        assert_ne!(p.positive, p.negative);
    }

    #[test]
    fn loop_finds_every_tree_then_breaks() {
        let mock = trees(4);
        let img = mock.render();
        let ex = Exemplar::new(img.clone(), mock.object_masks()[2].clone(), ExemplarSource::HumanLabel, 1.0).unwrap();
        let ft = finetune(&ex, &mock, &short()).unwrap();
        let out = run_oneshot(&img, &ex, &ft.weights, &mock, &OneshotConfig::default()).unwrap();
        assert_eq!(out.instances.len(), 4);
        assert_eq!(out.stop, OneshotStop::Breakpoint);
        assert_eq!(out.log.count(EVENT_BREAKPOINT), 1);
        for (inst, obj) in out.instances.iter().zip(mock.object_masks()) {
            assert_eq!(inst.mask(), obj);
        }
    }

    #[test]
    fn single_object_and_iteration_cap() {
        let mock = trees(1);
        let img = mock.render();
        let ex = Exemplar::new(img.clone(), mock.object_masks()[0].clone(), ExemplarSource::TextAuto, 0.9).unwrap();
        let w = ScaleWeights::default();
        let out = run_oneshot(&img, &ex, &w, &mock, &OneshotConfig::default()).unwrap();
        assert_eq!((out.instances.len(), out.stop), (1, OneshotStop::Breakpoint));
        let mock = trees(3);
        let img = mock.render();
        let ex = Exemplar::new(img.clone(), mock.object_masks()[0].clone(), ExemplarSource::TextAuto, 0.9).unwrap();
        let cfg = OneshotConfig {
            max_iterations: 1,
            ..OneshotConfig::default()
        };
        let out = run_oneshot(&img, &ex, &w, &mock, &cfg).unwrap();
        assert_eq!((out.instances.len(), out.stop), (1, OneshotStop::MaxIterations));
    }

    #[test]
    fn exemplar_validation() {
        let img = GeoRaster::filled(Grid::plain(4, 4).unwrap(), 3, 0).unwrap();
        assert!(matches!(
            Exemplar::new(img.clone(), BinaryMask::empty(4, 4), ExemplarSource::HumanLabel, 1.0),
            Err(OneshotError::Precondition(_))
        ));
        assert!(Exemplar::new(img.clone(), BinaryMask::full(4, 4), ExemplarSource::HumanLabel, 1.0).is_ok());
        assert!(matches!(
            Exemplar::new(img, BinaryMask::full(3, 4), ExemplarSource::HumanLabel, 1.0),
            Err(OneshotError::Shape(_))
        ));
        let labels = LabelRaster::new(Grid::plain(2, 2).unwrap(), vec![0, 7, 7, 3]).unwrap();
        let img = GeoRaster::filled(Grid::plain(2, 2).unwrap(), 3, 0).unwrap();
        let ex = exemplar_from_labels(&img, &labels, 7).unwrap();
        assert_eq!(ex.mask.data(), &[false, true, true, false]);
    }

    #[test]
    fn human_mask_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tif");
        let m = BinaryMask::from_fn(5, 4, |c, r| c == r);
        crate::geodata::save_mask(&m, &crate::geodata::GeoTransform::identity(), "", &path).unwrap();
        let img = GeoRaster::filled(Grid::plain(5, 4).unwrap(), 3, 0).unwrap();
        let ex = select_exemplar_human(&img, &path).unwrap();
        assert_eq!((ex.mask, ex.source, ex.logit), (m, ExemplarSource::HumanLabel, 1.0));
        let small = GeoRaster::filled(Grid::plain(4, 4).unwrap(), 3, 0).unwrap();
        assert!(select_exemplar_human(&small, &path).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let labels = LabelRaster::new(Grid::plain(4, 1).unwrap(), vec![0, 2, 5, 9]).unwrap();
        let a = sample_instance_ids(&labels, 6, 7).unwrap();
        assert_eq!(a, sample_instance_ids(&labels, 6, 7).unwrap());
        assert!(a.iter().all(|id| [2, 5, 9].contains(id)));
    }

    #[test]
    fn comparison_summary_matches_samples() {
        let mock = trees(3);
        let img = mock.render();
        let gt = mock.scene().instance_ground_truth("tree").unwrap();
        let cfg = ComparisonConfig {
            train: short(),
            ..Default::default()
        };
        let cmp = compare_protocols(&img, Some("tree"), &gt, 3, 11, &mock, &cfg).unwrap();
        assert_eq!(cmp.human.len(), 3);
        let summary = cmp.human_summary.unwrap();
        let mean_dice = cmp.human.iter().map(|h| h.metrics.dice).sum::<f64>() / 3.0;
        assert!((summary.dice - mean_dice).abs() < 1e-12);
        assert!(cmp.text.is_some());
        let one = compare_protocols(&img, None, &gt, 1, 11, &mock, &cfg).unwrap();
        assert_eq!(one.human_summary.unwrap().std, Some([0.0; 5]));
    }
}
