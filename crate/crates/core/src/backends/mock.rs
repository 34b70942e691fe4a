//! Scene-driven deterministic backend.
//!
//! The scene is rendered into a reference image: background `(0, 0, 0)` and each
//! object painted in scene order with a colour whose third band is 255. A pixel
//! of a query image counts as erased when it differs from that reference, which
//! is how the text loop's removal step becomes visible to [`MockBackend::detect`].
//!
//! Oracle contract:
//! * `detect` returns one candidate per object sharing a token with the phrase,
//!   `logit = detectability * (1 - erased_fraction)`, `phrase_score` = Jaccard
//!   overlap of the token sets; fully erased objects are omitted.
//! * `segment_box` / `segment_points` pick the object with the largest box
//!   overlap / most contained foreground points and return scales
//!   `{erode(object ∩ box), object, dilate(object)}` (the point variant uses
//!   the whole object for the first scale) as ±[`MOCK_LOGIT`] grids.
//! * `embed` is a stride-1 one-hot class map (index 0 = background). Erased
//!   object pixels embed as the normalised sum of background and their class.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendError, DetectionCandidate, FeatureMap, MultiScaleMasks, PointPrompt, Result, ScoredMask,
};
use crate::geodata::{BinaryMask, GeoRaster, GeoTransform, Grid, LabelRaster, PixelBox};

/// Magnitude of the mock's mask logits.
pub const MOCK_LOGIT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum SceneShape {
    Rect { x: f64, y: f64, w: f64, h: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(flatten)]
    pub shape: SceneShape,
    pub class_name: String,
    pub detectability: f64,
}

impl SceneObject {
    pub fn rect(x: f64, y: f64, w: f64, h: f64, class_name: &str, detectability: f64) -> Self {
        Self {
            shape: SceneShape::Rect { x, y, w, h },
            class_name: class_name.into(),
            detectability,
        }
    }

    pub fn disc(cx: f64, cy: f64, r: f64, class_name: &str, detectability: f64) -> Self {
        Self {
            shape: SceneShape::Disc { cx, cy, r },
            class_name: class_name.into(),
            detectability,
        }
    }

    /// Whether the centre of pixel `(c, r)` lies in the object.
    pub fn covers(&self, c: usize, r: usize) -> bool {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        match self.shape {
            SceneShape::Rect { x: x0, y: y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            SceneShape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }

    fn within(&self, width: usize, height: usize) -> bool {
        let (w, h) = (width as f64, height as f64);
        match self.shape {
            SceneShape::Rect { x, y, w: rw, h: rh } => rw > 0.0 && rh > 0.0 && x >= 0.0 && y >= 0.0 && x + rw <= w && y + rh <= h,
            SceneShape::Disc { cx, cy, r } => r > 0.0 && cx - r >= 0.0 && cy - r >= 0.0 && cx + r <= w && cy + r <= h,
        }
    }
}

/// Declarative mock scene, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub transform: Option<GeoTransform>,
    #[serde(default)]
    pub crs: String,
}

impl SceneSpec {
    pub fn new(width: usize, height: usize, objects: Vec<SceneObject>) -> Self {
        Self {
            width,
            height,
            objects,
            transform: None,
            crs: String::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read scene {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("scene {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(BackendError::Config("scene must be at least 1x1".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(0.0..=1.0).contains(&o.detectability) {
                return Err(BackendError::Config(format!(
                    "objects[{i}].detectability {} is outside [0,1]",
                    o.detectability
                )));
            }
            if !o.within(self.width, self.height) {
                return Err(BackendError::Config(format!("objects[{i}] extends outside the scene")));
            }
            if o.class_name.trim().is_empty() {
                return Err(BackendError::Config(format!("objects[{i}].class_name is empty")));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(
            self.width,
            self.height,
            self.transform.unwrap_or_else(GeoTransform::identity),
            self.crs.clone(),
        )
        .map_err(|e| BackendError::Config(e.to_string()))
    }

    pub fn object_mask(&self, index: usize) -> BinaryMask {
        let o = &self.objects[index];
        BinaryMask::from_fn(self.width, self.height, |c, r| o.covers(c, r))
    }

    /// Sorted distinct class names; the embedding index of a class is its
    /// position here plus one.
    pub fn classes(&self) -> Vec<String> {
        self.objects
            .iter()
            .map(|o| o.class_name.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Instance ground truth for objects whose class shares a token with
    /// `phrase`: object `k` (scene order) gets id `k + 1`, later objects on top.
    pub fn instance_ground_truth(&self, phrase: &str) -> Result<LabelRaster> {
        let want = tokens(phrase);
        let mut data = vec![0u32; self.width * self.height];
        for (k, o) in self.objects.iter().enumerate() {
            if tokens(&o.class_name).is_disjoint(&want) {
                continue;
            }
            for r in 0..self.height {
                for c in 0..self.width {
                    if o.covers(c, r) {
                        data[r * self.width + c] = k as u32 + 1;
                    }
                }
            }
        }
        LabelRaster::new(self.grid()?, data).map_err(|e| BackendError::Config(e.to_string()))
    }
}

pub(crate) fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    scene: SceneSpec,
    masks: Vec<BinaryMask>,
    reference: GeoRaster,
    classes: Vec<String>,
    /// Topmost object per pixel.
    owner: Vec<Option<usize>>,
}

impl MockBackend {
    pub fn new(scene: SceneSpec) -> Result<Self> {
        scene.validate()?;
        let masks: Vec<BinaryMask> = (0..scene.objects.len()).map(|k| scene.object_mask(k)).collect();
        if let Some(k) = masks.iter().position(BinaryMask::is_empty) {
            return Err(BackendError::Config(format!("objects[{k}] covers no pixel centre")));
        }
        let classes = scene.classes();
        let n = scene.width * scene.height;
        let mut owner = vec![None; n];
        let mut bands = vec![vec![0u8; n]; 3];
        for (k, (obj, mask)) in scene.objects.iter().zip(&masks).enumerate() {
            let class_idx = classes.iter().position(|c| *c == obj.class_name).unwrap_or(0);
            let colour = [
                (40 + class_idx * 53 % 200) as u8,
                (20 + k * 37 % 220) as u8,
                255u8,
            ];
            for (i, _) in mask.data().iter().enumerate().filter(|(_, &m)| m) {
                owner[i] = Some(k);
                for b in 0..3 {
                    bands[b][i] = colour[b];
                }
            }
        }
        let reference = GeoRaster::new(scene.grid()?, bands).map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            scene,
            masks,
            reference,
            classes,
            owner,
        })
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    /// The rendered reference image the mock expects to be queried with.
    pub fn render(&self) -> GeoRaster {
        self.reference.clone()
    }

    pub fn object_masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    fn check_image(&self, image: &GeoRaster) -> Result<()> {
        if image.width() != self.scene.width
            || image.height() != self.scene.height
            || image.band_count() != self.reference.band_count()
        {
            return Err(BackendError::InvalidInput(format!(
                "image is {}x{}x{}, mock scene is {}x{}x{}",
                image.width(),
                image.height(),
                image.band_count(),
                self.scene.width,
                self.scene.height,
                self.reference.band_count()
            )));
        }
        Ok(())
    }

    fn erased(&self, image: &GeoRaster) -> Vec<bool> {
        let n = self.scene.width * self.scene.height;
        (0..n)
            .map(|i| (0..3).any(|b| image.band(b)[i] != self.reference.band(b)[i]))
            .collect()
    }

    fn scales_for(&self, object: &BinaryMask, inner: &BinaryMask) -> Result<MultiScaleMasks> {
        let fine = inner.erode();
        let coarse = object.dilate();
        let n = object.count() as f64;
        let conf = [fine.count() as f64 / n, 1.0, n / coarse.count() as f64];
        MultiScaleMasks::from_binary([&fine, object, &coarse], conf, MOCK_LOGIT)
    }

    fn empty_scales(&self) -> Result<MultiScaleMasks> {
        let empty = BinaryMask::empty(self.scene.width, self.scene.height);
        MultiScaleMasks::from_binary([&empty, &empty, &empty], [0.0; 3], MOCK_LOGIT)
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn detect(&self, image: &GeoRaster, phrase: &str) -> Result<Vec<DetectionCandidate>> {
        self.check_image(image)?;
        if phrase.trim().is_empty() {
            return Err(BackendError::InvalidInput("empty phrase".into()));
        }
        let erased = self.erased(image);
        let want = tokens(phrase);
        let mut out = Vec::new();
        for (obj, mask) in self.scene.objects.iter().zip(&self.masks) {
            let have = tokens(&obj.class_name);
            let shared = have.intersection(&want).count();
            if shared == 0 {
                continue;
            }
            let total = mask.count();
            let gone = mask.data().iter().zip(&erased).filter(|(&m, &e)| m && e).count();
            if gone == total {
                continue;
            }
            let visible = 1.0 - gone as f64 / total as f64;
            out.push(DetectionCandidate {
                bbox: mask.bounding_box().expect("non-empty object"),
                logit: obj.detectability * visible,
                phrase_score: shared as f64 / have.union(&want).count() as f64,
                phrase: obj.class_name.clone(),
            });
        }
        Ok(out)
    }

    fn segment_box(&self, image: &GeoRaster, bbox: &PixelBox) -> Result<MultiScaleMasks> {
        self.check_image(image)?;
        let boxed = bbox.to_mask(self.scene.width, self.scene.height);
        let best = self
            .masks
            .iter()
            .enumerate()
            .map(|(k, m)| (k, m.intersection(&boxed).expect("same grid").count()))
            .filter(|&(_, n)| n > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((k, _)) => {
                let inner = self.masks[k].intersection(&boxed).expect("same grid");
                self.scales_for(&self.masks[k], &inner)
            }
            None => self.empty_scales(),
        }
    }

    fn segment_points(&self, image: &GeoRaster, prompt: &PointPrompt) -> Result<MultiScaleMasks> {
        self.check_image(image)?;
        let best = self
            .masks
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let hits = prompt
                    .foreground
                    .iter()
                    .filter(|p| p.within(self.scene.width, self.scene.height))
                    .filter(|p| {
                        let (c, r) = p.pixel();
                        m.get(c, r)
                    })
                    .count();
                (k, hits)
            })
            .filter(|&(_, n)| n > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((k, _)) => self.scales_for(&self.masks[k], &self.masks[k]),
            None => self.empty_scales(),
        }
    }

    fn segment_everything(&self, image: &GeoRaster) -> Result<Vec<ScoredMask>> {
        self.check_image(image)?;
        Ok(self
            .masks
            .iter()
            .map(|m| ScoredMask {
                mask: m.clone(),
                score: 1.0,
            })
            .collect())
    }

    fn embed(&self, image: &GeoRaster) -> Result<FeatureMap> {
        self.check_image(image)?;
        let erased = self.erased(image);
        let dim = self.classes.len() + 1;
        let n = self.scene.width * self.scene.height;
        let mut data = vec![0.0; n * dim];
        let ghost = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..n {
            let cell = &mut data[i * dim..(i + 1) * dim];
            match self.owner[i] {
                Some(k) => {
                    let class = &self.scene.objects[k].class_name;
                    let idx = 1 + self.classes.iter().position(|c| c == class).expect("known class");
                    if erased[i] {
                        cell[0] = ghost;
                        cell[idx] = ghost;
                    } else {
                        cell[idx] = 1.0;
                    }
                }
                None => cell[0] = 1.0,
            }
        }
        FeatureMap::new(self.scene.width, self.scene.height, 1, dim, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::PixelPoint;

    fn car_scene() -> MockBackend {
        MockBackend::new(SceneSpec::new(
            40,
            30,
            vec![SceneObject::rect(5.0, 5.0, 10.0, 10.0, "car", 0.8)],
        ))
        .unwrap()
    }

    #[test]
    fn single_car_detected_at_detectability() {
        let mock = car_scene();
        let img = mock.render();
        let c = mock.detect(&img, "car").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].logit, 0.8);
        assert_eq!(c[0].phrase_score, 1.0);
        assert_eq!(c[0].bbox.coords(), [5.0, 5.0, 15.0, 15.0]);
    }

    #[test]
    fn unrelated_phrase_finds_nothing() {
        let mock = car_scene();
        assert!(mock.detect(&mock.render(), "lake").unwrap().is_empty());
    }

    #[test]
    fn exact_box_middle_scale_is_object() {
        let mock = car_scene();
        let img = mock.render();
        let b = PixelBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
        let s = mock.segment_box(&img, &b).unwrap();
        assert_eq!(s.binary(1), mock.object_masks()[0]);
        assert_eq!(s.confidences()[1], 1.0);
    }

    #[test]
    fn scales_nest() {
        let mock = MockBackend::new(SceneSpec::new(
            30,
            30,
            vec![SceneObject::disc(15.0, 15.0, 7.0, "tree", 1.0)],
        ))
        .unwrap();
        let img = mock.render();
        let s = mock
            .segment_points(
                &img,
                &PointPrompt {
                    foreground: vec![PixelPoint::new(15.0, 15.0)],
                    background: vec![],
                },
            )
            .unwrap();
        let (a, b, c) = (s.binary(0), s.binary(1), s.binary(2));
        assert!(a.difference(&b).unwrap().is_empty());
        assert!(b.difference(&c).unwrap().is_empty());
        assert!(a.count() < b.count() && b.count() < c.count());
    }

    #[test]
    fn erasing_lowers_logit_and_full_erase_hides() {
        let mock = car_scene();
        let mut img = mock.render();
        let half = BinaryMask::from_fn(40, 30, |c, r| (5..10).contains(&c) && (5..15).contains(&r));
        img.fill_masked(&half, &[9, 9, 9]).unwrap();
        let c = mock.detect(&img, "car").unwrap();
        assert!((c[0].logit - 0.4).abs() < 1e-12);
        img.fill_masked(&mock.object_masks()[0].clone(), &[0, 0, 0]).unwrap();
        assert!(mock.detect(&img, "car").unwrap().is_empty());
    }

    #[test]
    fn embed_is_one_hot_and_ghosts_after_erase() {
        let mock = car_scene();
        let mut img = mock.render();
        let f = mock.embed(&img).unwrap();
        assert_eq!(f.dim(), 2);
        assert_eq!(f.vector(0, 0), &[1.0, 0.0]);
        assert_eq!(f.vector(6, 6), &[0.0, 1.0]);
        img.fill_masked(&mock.object_masks()[0].clone(), &[1, 1, 1]).unwrap();
        let g = mock.embed(&img).unwrap();
        let v = g.vector(6, 6);
        assert!((v[0] - v[1]).abs() < 1e-15 && v[0] > 0.7);
    }

    #[test]
    fn background_box_gives_empty_scales() {
        let mock = car_scene();
        let s = mock
            .segment_box(&mock.render(), &PixelBox::new(20.0, 20.0, 30.0, 28.0).unwrap())
            .unwrap();
        assert!((0..3).all(|k| s.binary(k).is_empty()));
    }

    #[test]
    fn scene_validation() {
        let bad = SceneSpec::new(10, 10, vec![SceneObject::rect(5.0, 5.0, 10.0, 2.0, "car", 0.5)]);
        assert!(MockBackend::new(bad).is_err());
        let bad = SceneSpec::new(10, 10, vec![SceneObject::rect(1.0, 1.0, 2.0, 2.0, "car", 1.5)]);
        assert!(MockBackend::new(bad).is_err());
    }

    #[test]
    fn scene_json_shape() {
        let json = r#"{"width":20,"height":10,"objects":[
            {"shape":"rect","x":1,"y":1,"w":3,"h":3,"class_name":"house","detectability":0.9},
            {"shape":"disc","cx":12,"cy":5,"r":3,"class_name":"tree","detectability":0.7}]}"#;
        let scene: SceneSpec = serde_json::from_str(json).unwrap();
        assert_eq!(scene.objects.len(), 2);
        assert!(matches!(scene.objects[1].shape, SceneShape::Disc { .. }));
        let mock = MockBackend::new(scene).unwrap();
        assert_eq!(mock.classes, vec!["house".to_string(), "tree".to_string()]);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let mock = car_scene();
        let other = GeoRaster::filled(Grid::plain(4, 4).unwrap(), 3, 0).unwrap();
        assert!(matches!(mock.detect(&other, "car"), Err(BackendError::InvalidInput(_))));
    }
}
