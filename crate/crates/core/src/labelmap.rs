//! Task labels from semantic masks: classification folders, segmentation
//! pairs, and detection boxes with simplified contours.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{file_stem, write_manifest, DatasetManifest};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::raster::{ClassId, SemanticMask, BACKGROUND};

pub type Point = [f64; 2];

/// Squared distance from `p` to segment `ab`. Exact for small integer
/// coordinates, so ties at `epsilon` are decided reproducibly.
fn segment_distance_sq(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let (px, py) = (p[0] - a[0], p[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let dot = px * dx + py * dy;
    if len2 == 0.0 || dot <= 0.0 {
        return px * px + py * py;
    }
    if dot >= len2 {
        let (qx, qy) = (p[0] - b[0], p[1] - b[1]);
        return qx * qx + qy * qy;
    }
    let cross = px * dy - py * dx;
    cross * cross / len2
}

/// Ramer-Douglas-Peucker: keeps the endpoints and recursively the point
/// farthest from the chord while that distance exceeds `epsilon`.
/// Distances are to the chord segment.
pub fn rdp(points: &[Point], epsilon: f64) -> Vec<Point> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0, points.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        let mut best = (0.0, lo);
        for i in lo + 1..hi {
            let d = segment_distance_sq(points[i], points[lo], points[hi]);
            if d > best.0 {
                best = (d, i);
            }
        }
        if best.0 > epsilon * epsilon {
            keep[best.1] = true;
            stack.push((lo, best.1));
            stack.push((best.1, hi));
        }
    }
    points.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelMapParams {
    pub min_area: usize,
    pub rdp_epsilon: f64,
}

impl Default for LabelMapParams {
    fn default() -> Self {
        Self {
            min_area: 9,
            rdp_epsilon: 2.0,
        }
    }
}

/// One 4-connected region of a single class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub class_id: ClassId,
    /// Row-major `(x, y)` pixels; the first is the top-left-most.
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    /// `[x, y, width, height]` of the pixel extents.
    pub fn bbox(&self) -> [usize; 4] {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &self.pixels {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        [x0, y0, x1 - x0 + 1, y1 - y0 + 1]
    }
}

/// 4-connected components of every foreground class, ordered by their
/// first pixel in row-major scan.
pub fn components(mask: &SemanticMask) -> Vec<Component> {
    let (w, h) = (mask.width(), mask.height());
    let ids = mask.classes();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        let class_id = ids[start];
        if class_id == BACKGROUND || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            pixels.push((x, y));
            let mut visit = |q: usize| {
                if !seen[q] && ids[q] == class_id {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        out.push(Component { class_id, pixels });
    }
    out
}

// Clockwise starting west; y grows downward.
const RING: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

fn ring_index(dx: i64, dy: i64) -> usize {
    RING.iter().position(|&d| d == (dx, dy)).expect("adjacent cells")
}

/// Moore-neighbour boundary trace with Jacob's stopping criterion. Returns
/// boundary pixel centres clockwise from the top-left-most pixel.
pub fn trace_boundary(component: &Component) -> Vec<[i64; 2]> {
    let [bx, by, bw, bh] = component.bbox();
    let (bw, bh) = (bw as i64, bh as i64);
    let mut grid = vec![false; (bw * bh) as usize];
    for &(x, y) in &component.pixels {
        grid[((y - by) as i64 * bw + (x - bx) as i64) as usize] = true;
    }
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < bw && y < bh && grid[(y * bw + x) as usize];
    let (sx, sy) = (component.pixels[0].0 as i64 - bx as i64, component.pixels[0].1 as i64 - by as i64);

    let mut out = vec![[sx, sy]];
    let (mut p, mut back) = ((sx, sy), 0usize);
    let limit = 8 * component.pixels.len() + 16;
    for _ in 0..limit {
        let next = (1..=8).map(|k| (back + k) % 8).find(|&d| inside(p.0 + RING[d].0, p.1 + RING[d].1));
        let Some(d) = next else {
            break;
        };
        let q = (p.0 + RING[d].0, p.1 + RING[d].1);
        let b = RING[(d + 7) % 8];
        let b_cell = (p.0 + b.0, p.1 + b.1);
        back = ring_index(b_cell.0 - q.0, b_cell.1 - q.1);
        p = q;
        if p == (sx, sy) && back == 0 {
            break;
        }
        out.push([p.0, p.1]);
    }
    out.into_iter().map(|[x, y]| [x + bx as i64, y + by as i64]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: ClassId,
    pub polygon: Vec<[i64; 2]>,
    pub bbox: [usize; 4],
    pub area: usize,
}

/// Simplified closed contour with at least three vertices. Degenerate
/// shapes fall back to the box corners.
fn polygon(component: &Component, epsilon: f64) -> Vec<[i64; 2]> {
    let ring = trace_boundary(component);
    let mut closed: Vec<Point> = ring.iter().map(|&[x, y]| [x as f64, y as f64]).collect();
    closed.push(closed[0]);
    let mut simple = rdp(&closed, epsilon);
    simple.pop();
    if simple.len() >= 3 {
        return simple.into_iter().map(|[x, y]| [x as i64, y as i64]).collect();
    }
    let [x, y, w, h] = component.bbox();
    let (x0, y0, x1, y1) = (x as i64, y as i64, (x + w - 1) as i64, (y + h - 1) as i64);
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

/// Instances for every component of at least `min_area` pixels. Boxes come
/// from pixel extents, so simplification never shrinks them.
pub fn mask_to_detections(mask: &SemanticMask, params: &LabelMapParams) -> Vec<Instance> {
    components(mask)
        .into_iter()
        .filter(|c| c.pixels.len() >= params.min_area)
        .map(|c| Instance {
            class_id: c.class_id,
            polygon: polygon(&c, params.rdp_epsilon),
            bbox: c.bbox(),
            area: c.pixels.len(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
    Detection,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "segmentation" => Ok(Task::Segmentation),
            "detection" => Ok(Task::Detection),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

pub const DETECTION_FILE: &str = "detection.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionImage {
    pub id: usize,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub record: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionAnnotation {
    pub id: usize,
    pub image_id: usize,
    pub category_id: ClassId,
    pub bbox: [usize; 4],
    pub polygon: Vec<[i64; 2]>,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCategory {
    pub id: ClassId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDataset {
    pub images: Vec<DetectionImage>,
    pub annotations: Vec<DetectionAnnotation>,
    pub categories: Vec<DetectionCategory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExportSummary {
    pub records: usize,
    pub files: usize,
    pub annotations: usize,
}

pub fn detection_dataset(manifest: &DatasetManifest, params: &LabelMapParams) -> DetectionDataset {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for (i, t) in manifest.triplets.iter().enumerate() {
        images.push(DetectionImage {
            id: i + 1,
            file_name: format!("images/{}.png", file_stem(i, &t.id)),
            width: t.width(),
            height: t.height(),
            record: t.id.clone(),
        });
        for inst in mask_to_detections(&t.mask, params) {
            annotations.push(DetectionAnnotation {
                id: annotations.len() + 1,
                image_id: i + 1,
                category_id: inst.class_id,
                bbox: inst.bbox,
                polygon: inst.polygon,
                area: inst.area,
            });
        }
    }
    let categories = manifest
        .vocab
        .entries()
        .iter()
        .filter(|c| c.id != BACKGROUND)
        .map(|c| DetectionCategory {
            id: c.id,
            name: c.name.clone(),
        })
        .collect();
    DetectionDataset {
        images,
        annotations,
        categories,
    }
}

/// Writes task-ready labels under `out`.
///
/// Classification copies each image into one directory per class named in
/// its caption. Segmentation writes image/mask pairs with a manifest and
/// vocabulary. Detection writes `images/` and `detection.json`.
pub fn export(manifest: &DatasetManifest, task: Task, out: &Path, params: &LabelMapParams) -> Result<ExportSummary> {
    let records = manifest.len();
    match task {
        Task::Classification => {
            let mut files = 0;
            for (i, t) in manifest.triplets.iter().enumerate() {
                if t.classes.is_empty() {
                    log::warn!("record {} has no foreground class; not exported", t.id);
                }
                let png = t.image.encode_png()?;
                for &c in &t.classes {
                    let name = manifest.vocab.name(c).expect("validated class");
                    write_atomic(&out.join(name).join(format!("{}.png", file_stem(i, &t.id))), &png)?;
                    files += 1;
                }
            }
            Ok(ExportSummary {
                records,
                files,
                annotations: 0,
            })
        }
        Task::Segmentation => {
            write_manifest(out, manifest)?;
            Ok(ExportSummary {
                records,
                files: 2 * records,
                annotations: 0,
            })
        }
        Task::Detection => {
            let det = detection_dataset(manifest, params);
            for (img, t) in det.images.iter().zip(&manifest.triplets) {
                t.image.save_png(&out.join(&img.file_name))?;
            }
            let mut json = serde_json::to_vec_pretty(&det)?;
            json.push(b'\n');
            write_atomic(&out.join(DETECTION_FILE), &json)?;
            Ok(ExportSummary {
                records,
                files: records + 1,
                annotations: det.annotations.len(),
            })
        }
    }
}
