use std::path::{Path, PathBuf};

use geoprompt_core::api::{OneshotProtocol, RenderRequest, ReportFormat, ReportRequest, RunRequest};
use geoprompt_core::backends::{MockBackend, SceneObject, SceneSpec};
use geoprompt_core::geodata::{load_label_raster, save_raster, GeoTransform, LabelRaster};
use geoprompt_core::metrics::TableKind;
use geoprompt_core::pipeline::{cmd_report, cmd_run, render_scene, PipelineError, RunMode};

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    mock: MockBackend,
}

fn scene() -> SceneSpec {
    let mut s = SceneSpec::new(
        48,
        40,
        vec![
            SceneObject::disc(8.0, 8.0, 5.0, "tree", 0.9),
            SceneObject::disc(30.0, 10.0, 6.0, "tree", 0.7),
            SceneObject::rect(4.0, 22.0, 14.0, 12.0, "house", 0.8),
            SceneObject::disc(36.0, 30.0, 4.0, "tree", 0.1),
        ],
    );
    s.transform = Some(GeoTransform::north_up(300000.0, 5000000.0, 0.5).unwrap());
    s.crs = "EPSG:32633".into();
    s
}

const MANIFEST: &str = r#"
entries:
  - id: trees
    platform: Airborne
    target: Tree
    resolution_m: 0.5
    raster_path: r/image.tif
    gt_path: r/gt.tif
    prompt: { mode: text, vector_path: r/boxes.geojson }
    thresholds: { box: 0.3, text: 0.25 }
  - id: landcover
    platform: Satelitte
    target: Land cover
    resolution_m: 0.5
    raster_path: r/image.tif
    gt_path: classes.tif
    prompt: { mode: box, vector_path: all/boxes.geojson }
    thresholds: { box: 0.3, text: 0.25 }
    classes:
      - { id: 1, name: tree }
      - { id: 2, name: house }
      - { id: 3, name: road }
    options: { averaging: pooled }
  - id: cars
    platform: UAV
    target: Car
    resolution_m: 0.5
    raster_path: r/image.tif
    gt_path: empty.tif
    prompt: { mode: text }
    thresholds: { box: 0.3, text: 0.25 }
"#;

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = scene();
    std::fs::write(root.join("scene.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    std::fs::write(root.join("manifest.yaml"), MANIFEST).unwrap();
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    for (out, target) in [("r", Some("tree")), ("all", None)] {
        render_scene(&RenderRequest {
            scene: s(root.join("scene.json")),
            out_dir: s(root.join(out)),
            target: target.map(str::to_string),
        })
        .unwrap();
    }
    let mock = MockBackend::new(spec.clone()).unwrap();
    let grid = spec.grid().unwrap();
    let mut classes = vec![0u32; grid.len()];
    for (k, m) in mock.object_masks().iter().enumerate() {
        let id = if spec.objects[k].class_name == "tree" { 1 } else { 2 };
        for (i, &on) in m.data().iter().enumerate() {
            if on {
                classes[i] = id;
            }
        }
    }
    save_raster(&LabelRaster::new(grid.clone(), classes).unwrap(), root.join("classes.tif")).unwrap();
    save_raster(&LabelRaster::zeros(grid), root.join("empty.tif")).unwrap();
    Fixture { _dir: dir, root, mock }
}

impl Fixture {
    fn request(&self, entry: &str, mode: Option<RunMode>) -> RunRequest {
        RunRequest {
            manifest: self.root.join("manifest.yaml").to_string_lossy().into(),
            entry: entry.into(),
            mode,
            backend: format!("mock:{}", self.root.join("scene.json").display()),
            box_threshold: None,
            text_threshold: None,
            protocol: OneshotProtocol::TextAuto,
            k_samples: 1,
            seed: 0,
            out: self.root.join("out").to_string_lossy().into(),
        }
    }

    fn tree_pixels(&self, skip_hidden: bool) -> usize {
        let spec = self.mock.scene();
        self.mock
            .object_masks()
            .iter()
            .zip(&spec.objects)
            .filter(|(_, o)| o.class_name == "tree" && !(skip_hidden && o.detectability < 0.3))
            .map(|(m, _)| m.count())
            .sum()
    }
}

fn exists(dir: &Path, rel: &str) -> bool {
    dir.join(rel).is_file()
}

#[test]
fn general_mode_writes_rasters_only() {
    let f = fixture();
    let rec = cmd_run(&f.request("trees", Some(RunMode::General))).unwrap();
    let dir = PathBuf::from(&rec.out_dir);
    assert!(dir.ends_with("trees/general"));
    assert!(rec.rows.is_empty());
    assert!(!rec.degenerate_only);
    for rel in ["mosaic.tif", "instances/001.tif", "instances/004.tif", "vector.geojson", "runlog.jsonl"] {
        assert!(exists(&dir, rel), "{rel}");
    }
    assert!(!exists(&dir, "metrics.csv"));
    assert_eq!(rec.outputs.len(), 7);
}

#[test]
fn text_mode_row_matches_pixel_tally() {
    let f = fixture();
    let rec = cmd_run(&f.request("trees", None)).unwrap();
    assert_eq!(rec.rows.len(), 1);
    let row = &rec.rows[0];
    assert_eq!((row.platform.as_str(), row.prompt.as_str(), row.resolution.as_str()), ("Airborne", "Text", "0.50 m"));
    assert_eq!(row.table, TableKind::ZeroShot);
    let tp = f.tree_pixels(true) as f64;
    let all = f.tree_pixels(false) as f64;
    let n = 48.0 * 40.0;
    let m = &row.metrics;
    assert!((m.dice - 2.0 * tp / (tp + all)).abs() < 1e-12);
    assert!((m.iou - tp / all).abs() < 1e-12);
    assert!((m.tpr - tp / all).abs() < 1e-12);
    assert_eq!(m.fpr, 0.0);
    assert!((m.pixel_acc - (n - (all - tp)) / n).abs() < 1e-12);
    assert!(m.std.is_none());
    let dir = PathBuf::from(&rec.out_dir);
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("platform,target,resolution,prompt,dice,iou,pixel_acc,tpr,fpr\n"));
    let mosaic = load_label_raster(dir.join("mosaic.tif")).unwrap();
    assert_eq!(mosaic.grid().crs, "EPSG:32633");
    assert_eq!(mosaic.labels(), vec![1, 2]);
}

#[test]
fn threshold_override_is_validated() {
    let f = fixture();
    let mut req = f.request("trees", None);
    req.box_threshold = Some(1.5);
    let err = cmd_run(&req).unwrap_err();
    assert!(matches!(err, PipelineError::Validation(_)));
    assert!(err.to_string().contains("thresholds.box"), "{err}");
    assert_eq!(err.exit_code(), 2);

    req.box_threshold = Some(0.05);
    let rec = cmd_run(&req).unwrap();
    assert!((rec.rows[0].metrics.tpr - 1.0).abs() < 1e-12);
}

#[test]
fn missing_entry_and_backend_errors_are_classified() {
    let f = fixture();
    let err = cmd_run(&f.request("nope", None)).unwrap_err();
    assert!(err.to_string().contains("nope"));
    let mut req = f.request("trees", None);
    req.backend = "mock:/nonexistent/scene.json".into();
    assert_eq!(cmd_run(&req).unwrap_err().exit_code(), 2);
    req.backend = "real:/nonexistent/cfg.json".into();
    assert_eq!(cmd_run(&req).unwrap_err().exit_code(), 2);
}

#[test]
fn reruns_hash_identically() {
    let f = fixture();
    let a = cmd_run(&f.request("trees", Some(RunMode::Box))).unwrap();
    let b = cmd_run(&f.request("trees", Some(RunMode::Box))).unwrap();
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.manifest_hash, b.manifest_hash);
    assert!((a.rows[0].metrics.dice - 1.0).abs() < 1e-12);
}

#[test]
fn multiclass_boxes_average_present_classes() {
    let f = fixture();
    let rec = cmd_run(&f.request("landcover", None)).unwrap();
    assert!(rec.warnings.iter().any(|w| w.contains("road")), "{:?}", rec.warnings);
    let m = &rec.rows[0].metrics;
    assert!((m.dice - 1.0).abs() < 1e-12);
    assert_eq!(rec.averaging, geoprompt_core::metrics::Averaging::Pooled);
    let dir = PathBuf::from(&rec.out_dir);
    let classes = load_label_raster(dir.join("classes.tif")).unwrap();
    let gt = load_label_raster(f.root.join("classes.tif")).unwrap();
    assert_eq!(classes.data(), gt.data());
}

#[test]
fn oneshot_protocols() {
    let f = fixture();
    let mut req = f.request("trees", Some(RunMode::Oneshot));
    let auto = cmd_run(&req).unwrap();
    assert_eq!(auto.mode, "oneshot_text_auto");
    assert_eq!(auto.rows[0].prompt, "Text PerSAM-F");
    assert!(auto.rows[0].metrics.std.is_none());
    let dir = PathBuf::from(&auto.out_dir);
    for rel in ["weights.json", "loss_trace.csv", "mosaic.tif"] {
        assert!(exists(&dir, rel), "{rel}");
    }
    let weights: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("weights.json")).unwrap()).unwrap();
    let derived: f64 = weights["derived"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((derived - 1.0).abs() < 1e-12);
    let trace = std::fs::read_to_string(dir.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 1001);

    req.protocol = OneshotProtocol::HumanLabel;
    let one = cmd_run(&req).unwrap();
    assert_eq!(one.rows[0].metrics.std, Some([0.0; 5]));
    assert!(!PathBuf::from(&one.out_dir).join("samples").exists());

    req.k_samples = 3;
    req.seed = 11;
    let three = cmd_run(&req).unwrap();
    let dir = PathBuf::from(&three.out_dir);
    assert!(exists(&dir, "samples/03/weights.json"));
    assert!(three.rows[0].metrics.std.is_some());

    cmd_run(&f.request("trees", None)).unwrap();
    let report = cmd_report(&ReportRequest {
        records: vec![f.root.join("out").to_string_lossy().into()],
        format: ReportFormat::Csv,
        averaging: None,
    })
    .unwrap();
    let prompts: Vec<&str> = report.content.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(prompts, ["Text", "Baseline", "PerSAM-F", "Text PerSAM-F"]);
}

#[test]
fn empty_truth_and_prediction_is_degenerate_only() {
    let f = fixture();
    let rec = cmd_run(&f.request("cars", None)).unwrap();
    assert!(rec.degenerate_only);
    assert!(rec.rows[0].metrics.degenerate);
    assert_eq!(rec.rows[0].metrics.dice, 1.0);
}
