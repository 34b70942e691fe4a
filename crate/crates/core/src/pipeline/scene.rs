//! Turn a mock scene description into files a manifest can point at.

use std::path::Path;

use geojson::{Feature, FeatureCollection, GeoJson, Geometry, JsonObject, JsonValue};

use super::{io_err, write_file, PipelineError, Result};
use crate::api::{RenderRequest, RenderResponse};
use crate::backends::{MockBackend, SceneSpec};
use crate::geodata::{save_raster, save_rgb, GeoTransform, LabelRaster};

fn collection(features: Vec<Feature>) -> String {
    GeoJson::FeatureCollection(FeatureCollection {
        bbox: None,
        features,
        foreign_members: None,
    })
    .to_string()
}

fn feature(geometry: geojson::Value, class: &str) -> Feature {
    let mut props = JsonObject::new();
    props.insert("class".into(), JsonValue::from(class));
    Feature {
        geometry: Some(Geometry::new(geometry)),
        properties: Some(props),
        ..Default::default()
    }
}

fn map_xy(t: &GeoTransform, col: f64, row: f64) -> Vec<f64> {
    let (x, y) = t.pixel_to_map(col, row);
    vec![x, y]
}

/// Write `image.tif`, `gt.tif`, `boxes.geojson` and `points.geojson`.
///
/// Ground-truth instances are the objects whose class shares a word with the
/// target (every object when there is none), numbered by scene order. Boxes
/// are the objects' pixel bounding boxes; points sit on the object pixel
/// nearest to the box centre.
pub fn render_scene(req: &RenderRequest) -> Result<RenderResponse> {
    let scene = SceneSpec::from_file(Path::new(&req.scene))?;
    let mock = MockBackend::new(scene)?;
    let scene = mock.scene();
    let grid = scene.grid()?;
    let out = Path::new(&req.out_dir);
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let selected: Vec<usize> = match &req.target {
        Some(t) => {
            let gt = scene.instance_ground_truth(t)?;
            let ids = gt.labels();
            (0..scene.objects.len()).filter(|k| ids.contains(&(*k as u32 + 1))).collect()
        }
        None => (0..scene.objects.len()).collect(),
    };
    if selected.is_empty() {
        return Err(PipelineError::Validation(format!(
            "target '{}' matches no visible object",
            req.target.as_deref().unwrap_or_default()
        )));
    }

    let mut data = vec![0u32; grid.len()];
    let mut boxes = Vec::new();
    let mut points = Vec::new();
    for &k in &selected {
        let mask = &mock.object_masks()[k];
        for (i, &on) in mask.data().iter().enumerate() {
            if on {
                data[i] = k as u32 + 1;
            }
        }
        let class = &scene.objects[k].class_name;
        let b = mask.bounding_box().expect("mock objects cover a pixel");
        let t = &grid.transform;
        let ring = vec![
            map_xy(t, b.x1, b.y1),
            map_xy(t, b.x2, b.y1),
            map_xy(t, b.x2, b.y2),
            map_xy(t, b.x1, b.y2),
            map_xy(t, b.x1, b.y1),
        ];
        boxes.push(feature(geojson::Value::Polygon(vec![ring]), class));
        let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
        let (c, r) = (0..mask.height())
            .flat_map(|r| (0..mask.width()).map(move |c| (c, r)))
            .filter(|&(c, r)| mask.get(c, r))
            .min_by(|a, b| {
                let d = |&(c, r): &(usize, usize)| (c as f64 + 0.5 - cx).powi(2) + (r as f64 + 0.5 - cy).powi(2);
                d(a).total_cmp(&d(b))
            })
            .expect("non-empty mask");
        points.push(feature(geojson::Value::Point(map_xy(t, c as f64 + 0.5, r as f64 + 0.5)), class));
    }

    let image = out.join("image.tif");
    let gt_path = out.join("gt.tif");
    let boxes_path = out.join("boxes.geojson");
    let points_path = out.join("points.geojson");
    save_rgb(&mock.render(), &image)?;
    save_raster(&LabelRaster::new(grid.clone(), data)?, &gt_path)?;
    write_file(&boxes_path, collection(boxes))?;
    write_file(&points_path, collection(points))?;
    let s = |p: &Path| p.to_string_lossy().into_owned();
    Ok(RenderResponse {
        image: s(&image),
        ground_truth: s(&gt_path),
        boxes: s(&boxes_path),
        points: s(&points_path),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::SceneObject;
    use crate::geodata::{load_label_raster, prompts_from_vector, VectorMode};

    #[test]
    fn rendered_prompts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut scene = SceneSpec::new(
            64,
            48,
            vec![
                SceneObject::rect(4.0, 4.0, 10.0, 8.0, "tree", 0.9),
                SceneObject::disc(40.0, 30.0, 6.0, "house", 0.9),
            ],
        );
        scene.transform = Some(GeoTransform::north_up(500.0, 900.0, 0.5).unwrap());
        let scene_path = dir.path().join("scene.json");
        std::fs::write(&scene_path, serde_json::to_string(&scene).unwrap()).unwrap();
        let resp = render_scene(&RenderRequest {
            scene: scene_path.to_string_lossy().into(),
            out_dir: dir.path().join("out").to_string_lossy().into(),
            target: Some("tree".into()),
        })
        .unwrap();
        let gt = load_label_raster(&resp.ground_truth).unwrap();
        assert_eq!(gt.labels(), vec![1]);
        assert_eq!(gt.mask_of(1).count(), 80);
        let grid = gt.grid().clone();
        let boxes = prompts_from_vector(&resp.boxes, &grid, VectorMode::Boxes).unwrap();
        assert_eq!(boxes.boxes[0].coords(), [4.0, 4.0, 14.0, 12.0]);
        let pts = prompts_from_vector(&resp.points, &grid, VectorMode::Points).unwrap();
        let (c, r) = pts.points[0].pixel();
        assert!(gt.get(c, r) == 1);
    }

    #[test]
    fn unknown_target_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneSpec::new(16, 16, vec![SceneObject::rect(2.0, 2.0, 4.0, 4.0, "tree", 0.9)]);
        let scene_path = dir.path().join("scene.json");
        std::fs::write(&scene_path, serde_json::to_string(&scene).unwrap()).unwrap();
        let err = render_scene(&RenderRequest {
            scene: scene_path.to_string_lossy().into(),
            out_dir: dir.path().to_string_lossy().into(),
            target: Some("car".into()),
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
