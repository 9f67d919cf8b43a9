//! Box and point geometry under the inclusive-pixel convention
//! (a box spans `x_max - x_min + 1` columns).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{midpoint, BBox};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("invalid box {0}: min exceeds max")]
    InvalidBox(BBox),
    #[error("cannot aggregate an empty result list")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub fn new(x: u32, y: u32) -> Self {
        Point { x, y }
    }
}

/// A model output after parsing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Box(BBox),
    Point(Point),
    Malformed,
}

fn area(b: &BBox) -> u64 {
    b.width() as u64 * b.height() as u64
}

pub fn intersection_area(a: &BBox, b: &BBox) -> u64 {
    let x0 = a.x_min.max(b.x_min);
    let y0 = a.y_min.max(b.y_min);
    let x1 = a.x_max.min(b.x_max);
    let y1 = a.y_max.min(b.y_max);
    if x0 > x1 || y0 > y1 {
        0
    } else {
        (x1 - x0 + 1) as u64 * (y1 - y0 + 1) as u64
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(GeometryError::InvalidBox(*bx));
        }
    }
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    Ok(inter as f64 / union as f64)
}

pub fn center(b: &BBox) -> Point {
    let (x, y) = midpoint(b);
    Point::new(x, y)
}

pub fn contains(gt: &BBox, p: Point) -> bool {
    gt.x_min <= p.x && p.x <= gt.x_max && gt.y_min <= p.y && p.y <= gt.y_max
}

/// Click-point accuracy: the predicted box's center (or the predicted point)
/// lies inside `gt`, edges included.
pub fn acc_hit(prediction: &Prediction, gt: &BBox) -> bool {
    match prediction {
        Prediction::Box(b) => b.is_valid() && contains(gt, center(b)),
        Prediction::Point(p) => contains(gt, *p),
        Prediction::Malformed => false,
    }
}

/// `1 - dist/diag` clamped to `[0, 1]`, with `diag` the image diagonal.
pub fn point_reward(p: Point, gt: Point, width: u32, height: u32) -> f64 {
    let (w, h) = (width.max(1) as f64, height.max(1) as f64);
    let dx = p.x as f64 - gt.x as f64;
    let dy = p.y as f64 - gt.y as f64;
    let diag = (w * w + h * h).sqrt();
    (1.0 - (dx * dx + dy * dy).sqrt() / diag).clamp(0.0, 1.0)
}

/// IoU credited to a prediction; malformed and invalid boxes score 0, a
/// point counts as a single-pixel box.
pub fn prediction_iou(prediction: &Prediction, gt: &BBox) -> f64 {
    match prediction {
        Prediction::Box(b) if b.is_valid() => iou(b, gt).unwrap_or(0.0),
        Prediction::Point(p) => iou(&BBox::new(p.x, p.y, p.x, p.y), gt).unwrap_or(0.0),
        _ => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub miou: f64,
}

pub fn aggregate(results: &[(Prediction, BBox)]) -> Result<Metrics, GeometryError> {
    if results.is_empty() {
        return Err(GeometryError::Empty);
    }
    let n = results.len() as f64;
    let hits = results.iter().filter(|(p, gt)| acc_hit(p, gt)).count() as f64;
    let iou_sum: f64 = results.iter().map(|(p, gt)| prediction_iou(p, gt)).sum();
    Ok(Metrics {
        acc: hits / n,
        miou: iou_sum / n,
    })
}
