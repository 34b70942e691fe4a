//! Zero-shot segmentation engines: general, box, point and the iterative
//! text loop that repeatedly extracts the highest-logit detection and erases it.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, DetectionCandidate, MultiScaleMasks, PointPrompt};
use crate::geodata::{
    mosaic, BinaryMask, GeoError, GeoRaster, InstanceMask, LabelRaster, PixelPoint, PromptKind, PromptSet,
    Provenance,
};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

/// How erased pixels are filled in the working image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Per-band mean of the input image.
    #[default]
    Mean,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub box_threshold: f64,
    pub text_threshold: f64,
    pub max_iterations: u32,
    pub fill_mode: FillMode,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            box_threshold: 0.25,
            text_threshold: 0.25,
            max_iterations: 100,
            fill_mode: FillMode::Mean,
        }
    }
}

impl LoopConfig {
    pub fn new(box_threshold: f64, text_threshold: f64) -> Self {
        Self {
            box_threshold,
            text_threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("box_threshold", self.box_threshold), ("text_threshold", self.text_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PromptError::Config(format!("{name} {v} is outside [0,1]")));
            }
        }
        if self.max_iterations == 0 {
            return Err(PromptError::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }

    pub fn accepts(&self, c: &DetectionCandidate) -> bool {
        c.logit >= self.box_threshold && c.phrase_score >= self.text_threshold
    }
}

/// Which of the three returned scales becomes the binary prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSelect {
    /// Highest backend confidence, lowest index on ties.
    #[default]
    HighestConfidence,
    Middle,
}

impl ScaleSelect {
    pub fn pick(&self, masks: &MultiScaleMasks) -> usize {
        match self {
            ScaleSelect::Middle => 1,
            ScaleSelect::HighestConfidence => {
                let conf = masks.confidences();
                (0..3).fold(0, |best, k| if conf[k] > conf[best] { k } else { best })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub iteration: u32,
    pub event: String,
    pub detail: String,
}

/// Structured run log, serialised as JSON lines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub events: Vec<LogEvent>,
}

impl RunLog {
    pub fn push(&mut self, iteration: u32, event: &str, detail: impl Into<String>) {
        self.events.push(LogEvent {
            iteration,
            event: event.into(),
            detail: detail.into(),
        });
    }

    pub fn warnings(&self) -> impl Iterator<Item = &LogEvent> {
        self.events.iter().filter(|e| e.event.starts_with("warn"))
    }

    pub fn count(&self, event: &str) -> usize {
        self.events.iter().filter(|e| e.event == event).count()
    }

    pub fn extend(&mut self, other: RunLog) {
        self.events.extend(other.events);
    }

    pub fn to_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("log event serializes") + "\n")
            .collect()
    }
}

pub const EVENT_GUARD: &str = "warn_termination_guard";
pub const EVENT_DROPPED: &str = "warn_empty_instance";

/// Why the text loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoCandidates,
    MaxIterations,
    TerminationGuard,
    Completed,
}

#[derive(Debug, Clone)]
pub struct SegOutput {
    pub instances: Vec<InstanceMask>,
    pub mosaic: LabelRaster,
    pub log: RunLog,
    /// Number of detection rounds the text loop ran; prompt counts otherwise.
    pub iterations: u32,
    pub stop: StopReason,
}

fn provenance(kind: PromptKind, iteration: u32) -> Provenance {
    Provenance { kind, iteration }
}

/// Segment everything; ids follow descending pixel area.
pub fn run_general(image: &GeoRaster, backend: &dyn Backend) -> Result<SegOutput> {
    let mut masks = backend.segment_everything(image)?;
    let mut log = RunLog::default();
    masks.retain(|m| !m.mask.is_empty());
    for m in &masks {
        if !m.mask.same_shape(&BinaryMask::empty(image.width(), image.height())) {
            return Err(BackendError::Protocol("segment_everything returned a mask of the wrong size".into()).into());
        }
    }
    masks.sort_by(|a, b| b.mask.count().cmp(&a.mask.count()));
    let mut instances = Vec::with_capacity(masks.len());
    for (i, m) in masks.into_iter().enumerate() {
        let id = i as u32 + 1;
        log.push(id, "instance", format!("id {id}, {} px", m.mask.count()));
        // equal scores so that the mosaic tie-break (lower id) favours larger regions
        instances.push(InstanceMask::new(m.mask, id, 1.0, provenance(PromptKind::General, id))?);
    }
    let mosaic = mosaic(&instances, image.grid())?;
    let n = instances.len() as u32;
    Ok(SegOutput {
        instances,
        mosaic,
        log,
        iterations: n,
        stop: StopReason::Completed,
    })
}

fn total_cmp_slices(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Shared tail of the box and point engines: segment each prompt in order,
/// drop empty results, number the rest.
fn run_prompts<P>(
    image: &GeoRaster,
    prompts: &[P],
    kind: PromptKind,
    select: ScaleSelect,
    mut segment: impl FnMut(&P) -> std::result::Result<MultiScaleMasks, BackendError>,
) -> Result<SegOutput> {
    let mut log = RunLog::default();
    let mut instances = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let prompt_no = i as u32 + 1;
        let masks = segment(p)?;
        let k = select.pick(&masks);
        let mask = masks.binary(k);
        if mask.is_empty() {
            log.push(prompt_no, EVENT_DROPPED, format!("prompt {prompt_no} produced an empty mask"));
            continue;
        }
        let id = instances.len() as u32 + 1;
        log.push(prompt_no, "instance", format!("id {id}, scale {k}, {} px", mask.count()));
        instances.push(InstanceMask::new(
            mask,
            id,
            masks.confidences()[k],
            provenance(kind, prompt_no),
        )?);
    }
    let mosaic = mosaic(&instances, image.grid())?;
    Ok(SegOutput {
        instances,
        mosaic,
        log,
        iterations: prompts.len() as u32,
        stop: StopReason::Completed,
    })
}

/// One instance per box. Boxes are processed in sorted coordinate order so the
/// result does not depend on the order they were supplied in.
pub fn run_boxes(image: &GeoRaster, prompts: &PromptSet, backend: &dyn Backend, select: ScaleSelect) -> Result<SegOutput> {
    if prompts.boxes.is_empty() {
        return Err(PromptError::Precondition("box mode needs at least one box".into()));
    }
    let mut boxes = prompts.boxes.clone();
    for b in &boxes {
        if !b.within(image.width(), image.height()) {
            return Err(PromptError::Precondition(format!("box {:?} lies outside the raster", b.coords())));
        }
    }
    boxes.sort_by(|a, b| total_cmp_slices(&a.coords(), &b.coords()));
    run_prompts(image, &boxes, PromptKind::Box, select, |b| backend.segment_box(image, b))
}

/// Group points into prompts: shared group ids form one prompt, ungrouped
/// points stand alone. Prompts come back in canonical (sorted) order.
pub fn group_points(points: &[PixelPoint]) -> Vec<Vec<PixelPoint>> {
    let mut grouped: std::collections::BTreeMap<u32, Vec<PixelPoint>> = Default::default();
    let mut prompts = Vec::new();
    for p in points {
        match p.group {
            Some(g) => grouped.entry(g).or_default().push(*p),
            None => prompts.push(vec![*p]),
        }
    }
    prompts.extend(grouped.into_values());
    let key = |pts: &Vec<PixelPoint>| pts.iter().flat_map(|p| [p.x, p.y]).collect::<Vec<_>>();
    for p in &mut prompts {
        p.sort_by(|a, b| total_cmp_slices(&[a.x, a.y], &[b.x, b.y]));
    }
    prompts.sort_by(|a, b| total_cmp_slices(&key(a), &key(b)));
    prompts
}

pub fn run_points(image: &GeoRaster, prompts: &PromptSet, backend: &dyn Backend, select: ScaleSelect) -> Result<SegOutput> {
    if prompts.points.is_empty() {
        return Err(PromptError::Precondition("point mode needs at least one point".into()));
    }
    if let Some(p) = prompts.points.iter().find(|p| !p.within(image.width(), image.height())) {
        return Err(PromptError::Precondition(format!("point ({}, {}) lies outside the raster", p.x, p.y)));
    }
    let groups = group_points(&prompts.points);
    run_prompts(image, &groups, PromptKind::Point, select, |pts| {
        backend.segment_points(
            image,
            &PointPrompt {
                foreground: pts.clone(),
                background: Vec::new(),
            },
        )
    })
}

/// Highest logit, then larger box, then smaller coordinates.
pub fn best_candidate(candidates: &[DetectionCandidate]) -> Option<&DetectionCandidate> {
    candidates.iter().min_by(|a, b| {
        b.logit
            .total_cmp(&a.logit)
            .then_with(|| b.bbox.area().total_cmp(&a.bbox.area()))
            .then_with(|| total_cmp_slices(&a.bbox.coords(), &b.bbox.coords()))
    })
}

/// Fill values used to erase extracted objects from the working image.
pub fn fill_values(image: &GeoRaster, mode: FillMode) -> Vec<u8> {
    match mode {
        FillMode::Mean => image.band_means(),
        FillMode::Zero => vec![0; image.band_count()],
    }
}

/// Iteratively detect `phrase`, segment the best candidate, erase it and repeat.
pub fn run_text_loop(
    image: &GeoRaster,
    phrase: &str,
    cfg: &LoopConfig,
    backend: &dyn Backend,
    select: ScaleSelect,
) -> Result<SegOutput> {
    if phrase.trim().is_empty() {
        return Err(PromptError::Precondition("text mode needs a non-empty phrase".into()));
    }
    cfg.validate()?;
    let fill = fill_values(image, cfg.fill_mode);
    let mut working = image.clone();
    let mut claimed = BinaryMask::empty(image.width(), image.height());
    let mut instances = Vec::new();
    let mut log = RunLog::default();
    let mut i: u32 = 1;
    let stop = loop {
        if i > cfg.max_iterations {
            log.push(i, "stop", "max_iterations reached");
            break StopReason::MaxIterations;
        }
        let candidates: Vec<DetectionCandidate> = backend
            .detect(&working, phrase)?
            .into_iter()
            .filter(|c| cfg.accepts(c))
            .collect();
        let Some(best) = best_candidate(&candidates) else {
            log.push(i, "stop", "no candidate above thresholds");
            break StopReason::NoCandidates;
        };
        log.push(
            i,
            "detect",
            format!("{} candidates, best logit {:.6} at {:?}", candidates.len(), best.logit, best.bbox.coords()),
        );
        let masks = backend.segment_box(&working, &best.bbox)?;
        let mask = masks.binary(select.pick(&masks));
        let fresh = mask.difference(&claimed)?;
        if fresh.is_empty() {
            log.push(i, EVENT_GUARD, "segmented mask adds no unclaimed pixels");
            break StopReason::TerminationGuard;
        }
        claimed = claimed.union(&mask)?;
        working.fill_masked(&mask, &fill)?;
        log.push(i, "instance", format!("id {i}, logit {:.6}, {} px", best.logit, mask.count()));
        instances.push(InstanceMask::new(mask, i, best.logit, provenance(PromptKind::Text, i))?);
        i += 1;
    };
    let mosaic = mosaic(&instances, image.grid())?;
    Ok(SegOutput {
        instances,
        mosaic,
        log,
        iterations: i,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockBackend, SceneObject, SceneSpec};
    use crate::geodata::PixelBox;
    use proptest::prelude::*;

    fn cars(dets: &[f64]) -> MockBackend {
        let objects = dets
            .iter()
            .enumerate()
            .map(|(k, &d)| SceneObject::rect(2.0 + 12.0 * k as f64, 4.0, 8.0, 6.0, "car", d))
            .collect();
        MockBackend::new(SceneSpec::new(64, 16, objects)).unwrap()
    }

    #[test]
    fn text_loop_extracts_in_logit_order() {
        let mock = cars(&[0.7, 0.9, 0.5, 0.8, 0.6]);
        let out = run_text_loop(&mock.render(), "car", &LoopConfig::new(0.25, 0.25), &mock, ScaleSelect::default()).unwrap();
        let scores: Vec<f64> = out.instances.iter().map(|i| i.score).collect();
        assert_eq!(scores, vec![0.9, 0.8, 0.7, 0.6, 0.5]);
        assert_eq!(out.stop, StopReason::NoCandidates);
        let union = mock
            .object_masks()
            .iter()
            .fold(BinaryMask::empty(64, 16), |a, m| a.union(m).unwrap());
        assert_eq!(out.mosaic.nonzero(), union);
        assert_eq!(out.log.warnings().count(), 0);
    }

    #[test]
    fn thresholds_filter() {
        let mock = cars(&[0.9, 0.8, 0.7, 0.6, 0.5]);
        let img = mock.render();
        let n = |b: f64, t: f64| {
            run_text_loop(&img, "car", &LoopConfig::new(b, t), &mock, ScaleSelect::default())
                .unwrap()
                .instances
                .len()
        };
        assert_eq!(n(0.65, 0.25), 3);
        assert_eq!(n(1.0, 1.0), 0);
    }

    #[test]
    fn max_iterations_caps_loop() {
        let mock = cars(&[0.9, 0.8, 0.7]);
        let cfg = LoopConfig {
            max_iterations: 2,
            ..LoopConfig::default()
        };
        let out = run_text_loop(&mock.render(), "car", &cfg, &mock, ScaleSelect::Middle).unwrap();
        assert_eq!(out.instances.len(), 2);
        assert_eq!(out.stop, StopReason::MaxIterations);
    }

    #[test]
    fn zero_fill_also_erases() {
        let mock = cars(&[0.9, 0.4]);
        let cfg = LoopConfig {
            fill_mode: FillMode::Zero,
            ..LoopConfig::default()
        };
        let out = run_text_loop(&mock.render(), "car", &cfg, &mock, ScaleSelect::default()).unwrap();
        assert_eq!(out.instances.len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(LoopConfig::new(1.5, 0.2).validate().is_err());
        let cfg = LoopConfig {
            max_iterations: 0,
            ..LoopConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn candidate_tie_break() {
        let c = |x1: f64, w: f64, logit: f64| DetectionCandidate {
            bbox: PixelBox::new(x1, 0.0, x1 + w, 1.0).unwrap(),
            logit,
            phrase_score: 1.0,
            phrase: "car".into(),
        };
        let cands = vec![c(5.0, 2.0, 0.5), c(3.0, 2.0, 0.5), c(9.0, 1.0, 0.5), c(0.0, 1.0, 0.4)];
        assert_eq!(best_candidate(&cands).unwrap().bbox.x1, 3.0);
        let cands = vec![c(5.0, 2.0, 0.5), c(0.0, 3.0, 0.5)];
        assert_eq!(best_candidate(&cands).unwrap().bbox.x1, 0.0);
    }

    #[test]
    fn general_orders_ids_by_area() {
        let scene = SceneSpec::new(
            40,
            20,
            vec![
                SceneObject::rect(1.0, 1.0, 3.0, 3.0, "a", 1.0),
                SceneObject::rect(10.0, 1.0, 8.0, 8.0, "b", 1.0),
                SceneObject::disc(30.0, 10.0, 4.0, "c", 1.0),
            ],
        );
        let mock = MockBackend::new(scene).unwrap();
        let out = run_general(&mock.render(), &mock).unwrap();
        assert_eq!(out.mosaic.labels(), vec![1, 2, 3]);
        assert_eq!(out.mosaic.get(12, 3), 1);
        assert_eq!(out.mosaic.get(2, 2), 3);
        let empty = MockBackend::new(SceneSpec::new(5, 5, vec![])).unwrap();
        assert!(run_general(&empty.render(), &empty).unwrap().mosaic.labels().is_empty());
    }

    #[test]
    fn boxes_exact_background_and_duplicates() {
        let mock = cars(&[0.9, 0.8]);
        let img = mock.render();
        let exact = PixelBox::new(2.0, 4.0, 10.0, 10.0).unwrap();
        let prompts = PromptSet {
            boxes: vec![exact, PixelBox::new(0.0, 12.0, 10.0, 16.0).unwrap(), PixelBox::new(3.0, 5.0, 9.0, 9.0).unwrap()],
            ..Default::default()
        };
        let out = run_boxes(&img, &prompts, &mock, ScaleSelect::default()).unwrap();
        assert_eq!(out.instances.len(), 2);
        assert_eq!(out.log.count(EVENT_DROPPED), 1);
        for inst in &out.instances {
            assert_eq!(inst.mask(), &mock.object_masks()[0]);
        }
        assert!(matches!(
            run_boxes(&img, &PromptSet::default(), &mock, ScaleSelect::default()),
            Err(PromptError::Precondition(_))
        ));
    }

    #[test]
    fn points_grouping_and_background() {
        let mock = cars(&[0.9, 0.8]);
        let img = mock.render();
        let prompts = PromptSet {
            points: vec![
                PixelPoint::grouped(3.0, 5.0, 7),
                PixelPoint::grouped(6.0, 7.0, 7),
                PixelPoint::grouped(9.5, 9.5, 7),
                PixelPoint::new(18.0, 7.0),
                PixelPoint::new(40.0, 14.0),
            ],
            ..Default::default()
        };
        let out = run_points(&img, &prompts, &mock, ScaleSelect::default()).unwrap();
        assert_eq!(out.instances.len(), 2);
        assert_eq!(out.log.count(EVENT_DROPPED), 1);
        assert_eq!(out.iterations, 3);
        assert_eq!(out.instances[0].mask(), &mock.object_masks()[0]);
    }

    proptest! {
        #[test]
        fn box_order_invariance(perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle()) {
            let mock = cars(&[0.9, 0.8, 0.7]);
            let img = mock.render();
            let boxes = vec![
                PixelBox::new(2.0, 4.0, 10.0, 10.0).unwrap(),
                PixelBox::new(14.0, 4.0, 22.0, 10.0).unwrap(),
                PixelBox::new(25.0, 3.0, 30.0, 12.0).unwrap(),
                PixelBox::new(40.0, 0.0, 41.0, 1.0).unwrap(),
            ];
            let base = run_boxes(&img, &PromptSet { boxes: boxes.clone(), ..Default::default() }, &mock, ScaleSelect::default()).unwrap();
            let shuffled = PromptSet { boxes: perm.iter().map(|&k| boxes[k]).collect(), ..Default::default() };
            let out = run_boxes(&img, &shuffled, &mock, ScaleSelect::default()).unwrap();
            prop_assert_eq!(out.mosaic, base.mosaic);
        }

        #[test]
        fn raising_box_threshold_never_adds_instances(
            dets in prop::collection::vec(0.0f64..1.0, 1..5),
            lo in 0.0f64..1.0,
            bump in 0.0f64..0.5,
        ) {
            let mock = cars(&dets);
            let img = mock.render();
            let n = |b: f64| run_text_loop(&img, "car", &LoopConfig::new(b.min(1.0), 0.0), &mock, ScaleSelect::default()).unwrap();
            let low = n(lo);
            let high = n(lo + bump);
            prop_assert!(high.instances.len() <= low.instances.len());
            for w in low.instances.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }
}
