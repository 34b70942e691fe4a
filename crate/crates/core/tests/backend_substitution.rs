//! The engines only talk to models through the `Backend` trait. This backend
//! is written from scratch here, with its own colours, scale order, logit
//! magnitude and a stride-2 feature map, and must drive the engines to the
//! same segmentations as the bundled mock.

use geoprompt_core::backends::{
    Backend, BackendError, DetectionCandidate, FeatureMap, MockBackend, MultiScaleMasks, PointPrompt, SceneObject,
    SceneSpec, ScoredMask,
};
use geoprompt_core::geodata::{BinaryMask, GeoRaster, Grid, PixelBox, PromptSet};
use geoprompt_core::oneshot::{exemplar_from_labels, finetune, run_oneshot, OneshotConfig, OneshotStop, TrainConfig};
use geoprompt_core::promptseg::{run_boxes, run_general, run_text_loop, LoopConfig, ScaleSelect, StopReason};

type R<T> = Result<T, BackendError>;

const W: usize = 48;
const H: usize = 32;
const LOGIT: f64 = 6.0;

struct Tile {
    class: &'static str,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    detectability: f64,
}

impl Tile {
    fn has(&self, c: usize, r: usize) -> bool {
        c >= self.x && c < self.x + self.w && r >= self.y && r < self.y + self.h
    }
}

const TILES: [Tile; 4] = [
    Tile { class: "tree", x: 2, y: 2, w: 8, h: 6, detectability: 0.9 },
    Tile { class: "tree", x: 20, y: 4, w: 6, h: 6, detectability: 0.7 },
    Tile { class: "house", x: 30, y: 18, w: 12, h: 10, detectability: 0.8 },
    Tile { class: "tree", x: 6, y: 20, w: 10, h: 8, detectability: 0.5 },
];

struct TileBackend {
    reference: Vec<[u8; 3]>,
}

fn owner(c: usize, r: usize) -> Option<usize> {
    TILES.iter().rposition(|t| t.has(c, r))
}

fn colour(k: Option<usize>) -> [u8; 3] {
    match k {
        None => [10, 200, 10],
        Some(k) => [200, 30 + 40 * k as u8, 90],
    }
}

impl TileBackend {
    fn new() -> Self {
        let reference = (0..W * H).map(|i| colour(owner(i % W, i / W))).collect();
        Self { reference }
    }

    fn image(&self) -> GeoRaster {
        let bands = (0..3).map(|b| self.reference.iter().map(|p| p[b]).collect()).collect();
        GeoRaster::new(Grid::plain(W, H).unwrap(), bands).unwrap()
    }

    fn erased(&self, image: &GeoRaster, i: usize) -> bool {
        (0..3).any(|b| image.band(b)[i] != self.reference[i][b])
    }

    fn tile_mask(k: usize) -> BinaryMask {
        BinaryMask::from_fn(W, H, |c, r| owner(c, r) == Some(k))
    }

    fn scales(k: usize) -> R<MultiScaleMasks> {
        let t = &TILES[k];
        let logits = |grow: usize| -> Vec<f64> {
            (0..W * H)
                .map(|i| {
                    let (c, r) = (i % W, i / W);
                    let inside = c + grow >= t.x && c < t.x + t.w + grow && r + grow >= t.y && r < t.y + t.h + grow;
                    let inside = if grow == 0 { owner(c, r) == Some(k) } else { inside };
                    if inside {
                        LOGIT
                    } else {
                        -LOGIT
                    }
                })
                .collect()
        };
        MultiScaleMasks::new(W, H, [logits(0), logits(0), logits(1)], [0.95, 0.9, 0.5])
    }

    fn nothing() -> R<MultiScaleMasks> {
        let v = vec![-LOGIT; W * H];
        MultiScaleMasks::new(W, H, [v.clone(), v.clone(), v], [0.0; 3])
    }
}

impl Backend for TileBackend {
    fn name(&self) -> &str {
        "tiles"
    }

    fn detect(&self, image: &GeoRaster, phrase: &str) -> R<Vec<DetectionCandidate>> {
        let mut out = Vec::new();
        for (k, t) in TILES.iter().enumerate().rev() {
            if t.class != phrase.trim() {
                continue;
            }
            let own: Vec<usize> = (0..W * H).filter(|&i| owner(i % W, i / W) == Some(k)).collect();
            let left = own.iter().filter(|&&i| !self.erased(image, i)).count();
            if left == 0 {
                continue;
            }
            out.push(DetectionCandidate {
                bbox: PixelBox::new(t.x as f64, t.y as f64, (t.x + t.w) as f64, (t.y + t.h) as f64).unwrap(),
                logit: t.detectability * left as f64 / own.len() as f64,
                phrase_score: 1.0,
                phrase: t.class.into(),
            });
        }
        Ok(out)
    }

    fn segment_box(&self, _image: &GeoRaster, bbox: &PixelBox) -> R<MultiScaleMasks> {
        let covered = |k: usize| (0..W * H).filter(|&i| owner(i % W, i / W) == Some(k) && bbox.contains_pixel(i % W, i / W)).count();
        let best = (0..TILES.len()).filter(|&k| covered(k) > 0).max_by_key(|&k| (covered(k), usize::MAX - k));
        best.map_or_else(Self::nothing, Self::scales)
    }

    fn segment_points(&self, _image: &GeoRaster, prompt: &PointPrompt) -> R<MultiScaleMasks> {
        match prompt.foreground.first().map(|p| p.pixel()).and_then(|(c, r)| owner(c, r)) {
            Some(k) => Self::scales(k),
            None => Self::nothing(),
        }
    }

    fn segment_everything(&self, _image: &GeoRaster) -> R<Vec<ScoredMask>> {
        Ok((0..TILES.len())
            .map(|k| ScoredMask {
                mask: Self::tile_mask(k),
                score: 0.5,
            })
            .collect())
    }

    fn embed(&self, image: &GeoRaster) -> R<FeatureMap> {
        let (cols, rows) = (W / 2, H / 2);
        let mut data = Vec::with_capacity(cols * rows * 3);
        for row in 0..rows {
            for col in 0..cols {
                let (c, r) = (col * 2 + 1, row * 2 + 1);
                let v = match owner(c, r) {
                    None => [1.0, 0.0, 0.0],
                    Some(k) => {
                        let class = if TILES[k].class == "tree" { [0.0, 0.6, 0.8] } else { [0.0, 0.8, -0.6] };
                        if self.erased(image, r * W + c) {
                            let s = std::f64::consts::FRAC_1_SQRT_2;
                            [s, class[1] * s, class[2] * s]
                        } else {
                            class
                        }
                    }
                };
                data.extend(v);
            }
        }
        FeatureMap::new(cols, rows, 2, 3, data)
    }
}

/// The bundled mock on the same layout.
fn reference_mock() -> MockBackend {
    let objects = TILES
        .iter()
        .map(|t| SceneObject::rect(t.x as f64, t.y as f64, t.w as f64, t.h as f64, t.class, t.detectability))
        .collect();
    MockBackend::new(SceneSpec::new(W, H, objects)).unwrap()
}

fn trees() -> BinaryMask {
    BinaryMask::from_fn(W, H, |c, r| owner(c, r).is_some_and(|k| TILES[k].class == "tree"))
}

#[test]
fn text_loop_agrees_with_bundled_mock() {
    let tiles = TileBackend::new();
    let mock = reference_mock();
    let cfg = LoopConfig::new(0.3, 0.25);
    let a = run_text_loop(&tiles.image(), "tree", &cfg, &tiles, ScaleSelect::HighestConfidence).unwrap();
    let b = run_text_loop(&mock.render(), "tree", &cfg, &mock, ScaleSelect::HighestConfidence).unwrap();
    assert_eq!(a.stop, StopReason::NoCandidates);
    assert_eq!(a.instances.len(), 3);
    let masks = |o: &geoprompt_core::promptseg::SegOutput| o.instances.iter().map(|i| i.mask().clone()).collect::<Vec<_>>();
    assert_eq!(masks(&a), masks(&b));
    assert_eq!(a.mosaic.data(), b.mosaic.data());
    assert_eq!(a.mosaic.nonzero(), trees());
}

#[test]
fn box_prompts_and_general_mode_work_unchanged() {
    let tiles = TileBackend::new();
    let prompts = PromptSet {
        boxes: TILES
            .iter()
            .rev()
            .map(|t| PixelBox::new(t.x as f64, t.y as f64, (t.x + t.w) as f64, (t.y + t.h) as f64).unwrap())
            .collect(),
        ..Default::default()
    };
    let out = run_boxes(&tiles.image(), &prompts, &tiles, ScaleSelect::HighestConfidence).unwrap();
    assert_eq!(out.instances.len(), TILES.len());
    for inst in &out.instances {
        assert!((0..TILES.len()).any(|k| *inst.mask() == TileBackend::tile_mask(k)));
    }
    let general = run_general(&tiles.image(), &tiles).unwrap();
    assert_eq!(general.instances.len(), TILES.len());
    assert_eq!(general.instances[0].mask().count(), 120);
}

#[test]
fn oneshot_finds_every_tree_then_breaks() {
    let tiles = TileBackend::new();
    let image = tiles.image();
    let gt = geoprompt_core::geodata::LabelRaster::new(
        image.grid().clone(),
        (0..W * H).map(|i| u32::from(owner(i % W, i / W) == Some(1)) * 2).collect(),
    )
    .unwrap();
    let exemplar = exemplar_from_labels(&image, &gt, 2).unwrap();
    let ft = finetune(&exemplar, &tiles, &TrainConfig::default()).unwrap();
    let out = run_oneshot(&image, &exemplar, &ft.weights, &tiles, &OneshotConfig::default()).unwrap();
    assert_eq!(out.stop, OneshotStop::Breakpoint);
    assert_eq!(out.instances.len(), 3);
    assert_eq!(out.mosaic.nonzero(), trees());
    assert_eq!(out.log.count("breakpoint"), 1);
}
