//! Planar polygons: containment, boundary distance, clipping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::raster::BBox;

/// `(x, y)`; in geographic coordinates `x` is longitude.
pub type Point = [f64; 2];

/// Polygon with an exterior ring and optional holes. Rings are stored
/// without the repeated closing vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Vec<Point>,
    pub holes: Vec<Vec<Point>>,
}

impl Polygon {
    pub fn new(mut exterior: Vec<Point>, holes: Vec<Vec<Point>>) -> Self {
        strip_closing(&mut exterior);
        let holes = holes
            .into_iter()
            .map(|mut h| {
                strip_closing(&mut h);
                h
            })
            .collect();
        Self { exterior, holes }
    }

    pub fn rectangle(b: &BBox) -> Self {
        Self::new(
            alloc::vec![[b.min_x, b.min_y], [b.max_x, b.min_y], [b.max_x, b.max_y], [b.min_x, b.max_y]],
            Vec::new(),
        )
    }

    pub fn rings(&self) -> impl Iterator<Item = &Vec<Point>> {
        core::iter::once(&self.exterior).chain(self.holes.iter())
    }

    pub fn bbox(&self) -> BBox {
        let mut b = BBox::empty();
        for p in &self.exterior {
            b.expand(p[0], p[1]);
        }
        b
    }

    /// Even-odd containment over all rings. Points exactly on an edge may go
    /// either way; use [`Polygon::distance_to_boundary`] for those.
    pub fn contains(&self, p: Point) -> bool {
        self.rings().filter(|r| ring_crossings_odd(r, p)).count() % 2 == 1
    }

    pub fn distance_to_boundary(&self, p: Point) -> f64 {
        self.rings().map(|r| ring_distance(r, p)).fold(f64::INFINITY, f64::min)
    }

    /// Area with holes subtracted.
    pub fn area(&self) -> f64 {
        libm::fabs(signed_area(&self.exterior)) - self.holes.iter().map(|h| libm::fabs(signed_area(h))).sum::<f64>()
    }
}

fn strip_closing(r: &mut Vec<Point>) {
    if r.len() > 1 && r.first() == r.last() {
        r.pop();
    }
}

/// Shoelace area; positive for counter-clockwise rings in a y-up frame.
pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

fn ring_crossings_odd(ring: &[Point], p: Point) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    libm::hypot(p[0] - qx, p[1] - qy)
}

fn ring_distance(ring: &[Point], p: Point) -> f64 {
    let n = ring.len();
    (0..n).map(|i| segment_distance(p, ring[i], ring[(i + 1) % n])).fold(f64::INFINITY, f64::min)
}

/// Sutherland-Hodgman clip of a ring against an axis-aligned box.
pub fn clip_to_bbox(ring: &[Point], b: &BBox) -> Vec<Point> {
    let mut out = ring.to_vec();
    // (axis, bound, keep-greater)
    for (axis, bound, greater) in [(0, b.min_x, true), (0, b.max_x, false), (1, b.min_y, true), (1, b.max_y, false)] {
        if out.is_empty() {
            break;
        }
        let inside = |q: &Point| if greater { q[axis] >= bound } else { q[axis] <= bound };
        let input = core::mem::take(&mut out);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let t = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                let mut q = [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])];
                q[axis] = bound;
                out.push(q);
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}
