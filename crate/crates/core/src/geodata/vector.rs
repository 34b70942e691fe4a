//! Vector prompt ingestion (GeoJSON, ESRI Shapefile) and raster/vector conversion.

use std::collections::HashMap;
use std::path::Path;

use geojson::{Feature, FeatureCollection, GeoJson, Geometry, JsonObject, JsonValue};
use serde::{Deserialize, Serialize};

use super::{GeoError, GeoTransform, Grid, LabelRaster, PixelBox, PixelPoint, PromptSet, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorMode {
    Boxes,
    Points,
}

/// Geometry read from a vector file, still in map coordinates.
#[derive(Debug)]
enum RawGeometry {
    /// Exterior rings, one per polygon part.
    Polygons(Vec<Vec<(f64, f64)>>),
    /// Points; `multi` marks points that came from one multipoint geometry.
    Points { points: Vec<(f64, f64)>, multi: bool },
}

#[derive(Debug)]
struct RawFeature {
    geometry: RawGeometry,
    class: Option<String>,
    group: Option<u32>,
}

/// Read box or point prompts from a GeoJSON or Shapefile in the raster's CRS.
pub fn prompts_from_vector(path: impl AsRef<Path>, grid: &Grid, mode: VectorMode) -> Result<PromptSet> {
    prompts_from_vector_for_class(path, grid, mode, None)
}

/// Like [`prompts_from_vector`], keeping only features whose `class` attribute
/// equals `class` (case-insensitive) when one is given.
pub fn prompts_from_vector_for_class(
    path: impl AsRef<Path>,
    grid: &Grid,
    mode: VectorMode,
    class: Option<&str>,
) -> Result<PromptSet> {
    let path = path.as_ref();
    let features = read_features(path)?;
    if features.is_empty() {
        return Err(GeoError::EmptyPrompts(format!("{} has no features", path.display())));
    }
    let mut prompts = PromptSet {
        class_name: class.unwrap_or_default().to_string(),
        ..Default::default()
    };
    let mut kept = 0usize;
    for (index, feat) in features.into_iter().enumerate() {
        if let Some(want) = class {
            match &feat.class {
                Some(c) if c.eq_ignore_ascii_case(want) => {}
                _ => continue,
            }
        }
        kept += 1;
        match (mode, feat.geometry) {
            (VectorMode::Boxes, RawGeometry::Polygons(parts)) => {
                for ring in parts {
                    if let Some(b) = ring_to_box(&ring, grid) {
                        prompts.boxes.push(b);
                    }
                }
            }
            (VectorMode::Points, RawGeometry::Points { points, multi }) => {
                let group = feat.group.or(if multi { Some(index as u32) } else { None });
                for (x, y) in points {
                    let (c, r) = grid.transform.map_to_pixel(x, y);
                    let (c, r) = (clip_point(snap(c), grid.width), clip_point(snap(r), grid.height));
                    prompts.points.push(PixelPoint { x: c, y: r, group });
                }
            }
            (VectorMode::Boxes, RawGeometry::Points { .. }) => {
                return Err(GeoError::Schema(format!(
                    "{}: feature {index} is a point but box prompts need polygons",
                    path.display()
                )))
            }
            (VectorMode::Points, RawGeometry::Polygons(_)) => {
                return Err(GeoError::Schema(format!(
                    "{}: feature {index} is a polygon but point prompts need points",
                    path.display()
                )))
            }
        }
    }
    if kept == 0 {
        return Err(GeoError::EmptyPrompts(format!(
            "{} has no features of class '{}'",
            path.display(),
            class.unwrap_or_default()
        )));
    }
    if prompts.boxes.is_empty() && prompts.points.is_empty() {
        return Err(GeoError::EmptyPrompts(format!(
            "{}: every geometry falls outside the raster",
            path.display()
        )));
    }
    Ok(prompts)
}

/// Round values within 1e-9 of an integer, absorbing affine round-off.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn clip_point(v: f64, extent: usize) -> f64 {
    if v < 0.0 {
        0.0
    } else if v >= extent as f64 {
        extent as f64 - 0.5
    } else {
        v
    }
}

fn ring_to_box(ring: &[(f64, f64)], grid: &Grid) -> Option<PixelBox> {
    let mut xs = Vec::with_capacity(ring.len());
    let mut ys = Vec::with_capacity(ring.len());
    for &(x, y) in ring {
        let (c, r) = grid.transform.map_to_pixel(x, y);
        xs.push(snap(c));
        ys.push(snap(r));
    }
    let fold_min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let fold_max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let x1 = fold_min(&xs).max(0.0);
    let y1 = fold_min(&ys).max(0.0);
    let x2 = fold_max(&xs).min(grid.width as f64);
    let y2 = fold_max(&ys).min(grid.height as f64);
    PixelBox::new(x1, y1, x2, y2).ok()
}

fn read_features(path: &Path) -> Result<Vec<RawFeature>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if ext == "shp" {
        read_shapefile(path)
    } else {
        read_geojson(path)
    }
}

fn read_geojson(path: &Path) -> Result<Vec<RawFeature>> {
    let text = std::fs::read_to_string(path).map_err(|source| GeoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let gj: GeoJson = text
        .parse()
        .map_err(|e| GeoError::Schema(format!("{}: {e}", path.display())))?;
    let features: Vec<Feature> = match gj {
        GeoJson::FeatureCollection(fc) => fc.features,
        GeoJson::Feature(f) => vec![f],
        GeoJson::Geometry(g) => vec![Feature {
            geometry: Some(g),
            ..Default::default()
        }],
    };
    features
        .into_iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let geometry = f.geometry?;
            Some(convert_geojson(i, &geometry.value, f.properties.as_ref(), path))
        })
        .collect()
}

fn prop_string(props: Option<&JsonObject>, key: &str) -> Option<String> {
    match props?.get(key)? {
        JsonValue::String(s) => Some(s.clone()),
        JsonValue::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn prop_group(props: Option<&JsonObject>) -> Option<u32> {
    props?.get("group")?.as_u64().map(|g| g as u32)
}

fn convert_geojson(
    index: usize,
    value: &geojson::Value,
    props: Option<&JsonObject>,
    path: &Path,
) -> Result<RawFeature> {
    let xy = |p: &Vec<f64>| -> Result<(f64, f64)> {
        match p.as_slice() {
            [x, y, ..] => Ok((*x, *y)),
            _ => Err(GeoError::Schema(format!(
                "{}: feature {index} has a position with fewer than 2 coordinates",
                path.display()
            ))),
        }
    };
    let exterior = |rings: &Vec<Vec<Vec<f64>>>| -> Result<Vec<(f64, f64)>> {
        rings
            .first()
            .ok_or_else(|| GeoError::Schema(format!("{}: feature {index} has an empty polygon", path.display())))?
            .iter()
            .map(xy)
            .collect()
    };
    let geometry = match value {
        geojson::Value::Polygon(rings) => RawGeometry::Polygons(vec![exterior(rings)?]),
        geojson::Value::MultiPolygon(polys) => {
            RawGeometry::Polygons(polys.iter().map(exterior).collect::<Result<_>>()?)
        }
        geojson::Value::Point(p) => RawGeometry::Points {
            points: vec![xy(p)?],
            multi: false,
        },
        geojson::Value::MultiPoint(ps) => RawGeometry::Points {
            points: ps.iter().map(xy).collect::<Result<_>>()?,
            multi: true,
        },
        other => {
            return Err(GeoError::Schema(format!(
                "{}: feature {index} has unsupported geometry {}",
                path.display(),
                other.type_name()
            )))
        }
    };
    Ok(RawFeature {
        geometry,
        class: prop_string(props, "class"),
        group: prop_group(props),
    })
}

fn read_shapefile(path: &Path) -> Result<Vec<RawFeature>> {
    use shapefile::dbase::FieldValue;
    use shapefile::{PolygonRing, Shape};

    let mut reader = shapefile::Reader::from_path(path).map_err(|e| match e {
        shapefile::Error::IoError(source) => GeoError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => GeoError::Schema(format!("{}: {other}", path.display())),
    })?;
    let mut out = Vec::new();
    for (index, item) in reader.iter_shapes_and_records().enumerate() {
        let (shape, record) = item.map_err(|e| GeoError::Schema(format!("{}: {e}", path.display())))?;
        let field = |name: &str| -> Option<String> {
            match record.get(name)? {
                FieldValue::Character(Some(s)) => Some(s.trim().to_string()),
                FieldValue::Numeric(Some(n)) => Some(n.to_string()),
                _ => None,
            }
        };
        macro_rules! outers {
            ($poly:expr) => {
                $poly
                    .rings()
                    .iter()
                    .filter_map(|r| match r {
                        PolygonRing::Outer(pts) => Some(pts.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>()),
                        PolygonRing::Inner(_) => None,
                    })
                    .collect::<Vec<_>>()
            };
        }
        let geometry = match shape {
            Shape::NullShape => continue,
            Shape::Polygon(p) => RawGeometry::Polygons(outers!(p)),
            Shape::PolygonM(p) => RawGeometry::Polygons(outers!(p)),
            Shape::PolygonZ(p) => RawGeometry::Polygons(outers!(p)),
            Shape::Point(p) => RawGeometry::Points {
                points: vec![(p.x, p.y)],
                multi: false,
            },
            Shape::PointM(p) => RawGeometry::Points {
                points: vec![(p.x, p.y)],
                multi: false,
            },
            Shape::PointZ(p) => RawGeometry::Points {
                points: vec![(p.x, p.y)],
                multi: false,
            },
            Shape::Multipoint(m) => RawGeometry::Points {
                points: m.points().iter().map(|p| (p.x, p.y)).collect(),
                multi: true,
            },
            Shape::MultipointM(m) => RawGeometry::Points {
                points: m.points().iter().map(|p| (p.x, p.y)).collect(),
                multi: true,
            },
            Shape::MultipointZ(m) => RawGeometry::Points {
                points: m.points().iter().map(|p| (p.x, p.y)).collect(),
                multi: true,
            },
            other => {
                return Err(GeoError::Schema(format!(
                    "{}: record {index} has unsupported shape {}",
                    path.display(),
                    other.shapetype()
                )))
            }
        };
        out.push(RawFeature {
            geometry,
            class: field("class"),
            group: field("group").and_then(|g| g.parse::<f64>().ok()).map(|g| g as u32),
        });
    }
    Ok(out)
}

/// One connected region of one label, with rings in map coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorFeature {
    pub label: u32,
    /// Area in squared map units.
    pub area: f64,
    /// Closed exterior ring (first vertex repeated last).
    pub exterior: Vec<(f64, f64)>,
    pub holes: Vec<Vec<(f64, f64)>>,
}

/// 4-connected components of equal nonzero labels, in scan order of their
/// first pixel. Returns the per-pixel component index and each component's
/// label and pixels.
fn flood_components(labels: &LabelRaster) -> (Vec<usize>, Vec<(u32, Vec<usize>)>) {
    let (w, h) = (labels.width(), labels.height());
    let mut component = vec![usize::MAX; w * h];
    let mut by_label: Vec<(u32, Vec<usize>)> = Vec::new();
    for start in 0..w * h {
        let label = labels.data()[start];
        if label == 0 || component[start] != usize::MAX {
            continue;
        }
        let id = by_label.len();
        let mut pixels = Vec::new();
        let mut stack = vec![start];
        component[start] = id;
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (c, r) = (i % w, i / w);
            let mut visit = |j: usize| {
                if labels.data()[j] == label && component[j] == usize::MAX {
                    component[j] = id;
                    stack.push(j);
                }
            };
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
        }
        by_label.push((label, pixels));
    }

    (component, by_label)
}

/// Relabel so that every 4-connected component of each nonzero label gets its
/// own id, numbered from 1 in scan order.
pub fn connected_components(labels: &LabelRaster) -> LabelRaster {
    let (component, _) = flood_components(labels);
    let data = component.iter().map(|&k| if k == usize::MAX { 0 } else { k as u32 + 1 }).collect();
    LabelRaster::new(labels.grid().clone(), data).expect("same grid")
}

/// Polygonise a label raster: one feature per 4-connected component of each
/// non-zero label, with boundaries on pixel edges.
pub fn vectorize(labels: &LabelRaster) -> Vec<VectorFeature> {
    let (w, h) = (labels.width(), labels.height());
    let grid = labels.grid();
    let (component, by_label) = flood_components(labels);
    let mut features = Vec::new();

    // stable output: ascending label, then scan order of first pixel
    let mut order: Vec<usize> = (0..by_label.len()).collect();
    order.sort_by_key(|&k| by_label[k].0);
    for k in order {
        let (label, pixels) = &by_label[k];
        let inside = |c: i64, r: i64| -> bool {
            c >= 0 && r >= 0 && (c as usize) < w && (r as usize) < h && component[r as usize * w + c as usize] == k
        };
        let rings = trace_rings(pixels, w, &inside);
        let (mut outers, holes): (Vec<_>, Vec<_>) = rings.into_iter().partition(|r| signed_area(r) < 0.0);
        outers.sort_by(|a, b| signed_area(a).total_cmp(&signed_area(b)));
        let Some(outer) = outers.into_iter().next() else {
            continue;
        };
        let to_map = |ring: &[(i64, i64)], want_ccw: bool| to_map_ring(ring, &grid.transform, want_ccw);
        features.push(VectorFeature {
            label: *label,
            area: pixels.len() as f64 * grid.transform.pixel_area(),
            exterior: to_map(&outer, true),
            holes: holes.iter().map(|r| to_map(r, false)).collect(),
        });
    }
    features
}

fn signed_area(ring: &[(i64, i64)]) -> f64 {
    let mut s = 0i64;
    for i in 0..ring.len() {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % ring.len()];
        s += x0 * y1 - x1 * y0;
    }
    s as f64 / 2.0
}

fn to_map_ring(ring: &[(i64, i64)], t: &GeoTransform, want_ccw: bool) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = ring.iter().map(|&(c, r)| t.pixel_to_map(c as f64, r as f64)).collect();
    let mut s = 0.0;
    for i in 0..pts.len() {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % pts.len()];
        s += x0 * y1 - x1 * y0;
    }
    if (s > 0.0) != want_ccw {
        pts.reverse();
    }
    pts.push(pts[0]);
    pts
}

/// Trace the boundary of one component into closed vertex rings (pixel
/// corner coordinates, not closed). Edges run with the component on the
/// left as seen on screen; at diagonal saddles the trace turns toward the
/// interior so diagonal neighbours stay in separate rings.
fn trace_rings(pixels: &[usize], w: usize, inside: &dyn Fn(i64, i64) -> bool) -> Vec<Vec<(i64, i64)>> {
    type P = (i64, i64);
    let mut edges: Vec<(P, P)> = Vec::new();
    for &i in pixels {
        let (c, r) = ((i % w) as i64, (i / w) as i64);
        if !inside(c, r - 1) {
            edges.push(((c + 1, r), (c, r)));
        }
        if !inside(c - 1, r) {
            edges.push(((c, r), (c, r + 1)));
        }
        if !inside(c, r + 1) {
            edges.push(((c, r + 1), (c + 1, r + 1)));
        }
        if !inside(c + 1, r) {
            edges.push(((c + 1, r + 1), (c + 1, r)));
        }
    }
    edges.sort();
    let mut from: HashMap<P, Vec<usize>> = HashMap::new();
    for (k, e) in edges.iter().enumerate() {
        from.entry(e.0).or_default().push(k);
    }
    let mut used = vec![false; edges.len()];
    let mut rings = Vec::new();
    for first in 0..edges.len() {
        if used[first] {
            continue;
        }
        let mut ring = Vec::new();
        let mut cur = first;
        loop {
            used[cur] = true;
            let (a, b) = edges[cur];
            ring.push(a);
            let dir = (b.0 - a.0, b.1 - a.1);
            let left = (dir.1, -dir.0);
            let candidates: Vec<usize> = from[&b].iter().copied().filter(|&k| !used[k]).collect();
            let next = match candidates.as_slice() {
                [] => break,
                [only] => *only,
                many => *many
                    .iter()
                    .find(|&&k| {
                        let (s, e) = edges[k];
                        (e.0 - s.0, e.1 - s.1) == left
                    })
                    .unwrap_or(&many[0]),
            };
            cur = next;
        }
        rings.push(simplify(ring));
    }
    rings
}

/// Drop collinear vertices.
fn simplify(ring: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    let n = ring.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let prev = ring[(i + n - 1) % n];
        let cur = ring[i];
        let next = ring[(i + 1) % n];
        let cross = (cur.0 - prev.0) * (next.1 - cur.1) - (cur.1 - prev.1) * (next.0 - cur.0);
        if cross != 0 {
            out.push(cur);
        }
    }
    out
}

/// Burn features back into a label raster on `grid`, filling pixels whose
/// centres fall inside a feature (even-odd over exterior and holes).
pub fn rasterize(features: &[VectorFeature], grid: &Grid) -> LabelRaster {
    let (w, h) = (grid.width, grid.height);
    let mut data = vec![0u32; w * h];
    for feat in features {
        let rings: Vec<Vec<(f64, f64)>> = std::iter::once(&feat.exterior)
            .chain(feat.holes.iter())
            .map(|ring| {
                ring.iter()
                    .map(|&(x, y)| {
                        let (c, r) = grid.transform.map_to_pixel(x, y);
                        (snap(c), snap(r))
                    })
                    .collect()
            })
            .collect();
        for r in 0..h {
            let yc = r as f64 + 0.5;
            let mut xs = Vec::new();
            for ring in &rings {
                for seg in ring.windows(2) {
                    let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
                    if (y0 <= yc) != (y1 <= yc) {
                        xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
                    }
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(w);
                for c in start..end {
                    data[r * w + c] = feat.label;
                }
            }
        }
    }
    LabelRaster::new(grid.clone(), data).expect("grid-sized buffer")
}

/// GeoJSON FeatureCollection with `label` and `area` properties.
pub fn features_to_geojson(features: &[VectorFeature], crs: &str) -> String {
    let ring = |r: &Vec<(f64, f64)>| r.iter().map(|&(x, y)| vec![x, y]).collect::<Vec<_>>();
    let list = features
        .iter()
        .map(|f| {
            let mut rings = vec![ring(&f.exterior)];
            rings.extend(f.holes.iter().map(ring));
            let mut props = JsonObject::new();
            props.insert("label".into(), JsonValue::from(f.label));
            props.insert("area".into(), JsonValue::from(f.area));
            Feature {
                geometry: Some(Geometry::new(geojson::Value::Polygon(rings))),
                properties: Some(props),
                ..Default::default()
            }
        })
        .collect();
    let mut foreign = JsonObject::new();
    if !crs.is_empty() {
        foreign.insert("crs_text".into(), JsonValue::from(crs));
    }
    let fc = FeatureCollection {
        bbox: None,
        features: list,
        foreign_members: if foreign.is_empty() { None } else { Some(foreign) },
    };
    GeoJson::FeatureCollection(fc).to_string()
}
