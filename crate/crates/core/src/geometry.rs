//! Planar geometry: oriented rectangles, convex clipping and rotated IoU.

use std::f64::consts::{PI, TAU};

/// Polygons below this area are treated as empty.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Counter-clockwise rotation by `angle` radians.
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    // rem_euclid can return TAU itself for tiny negative inputs
    if r >= PI {
        r - TAU
    } else {
        r
    }
}

/// Rectangle rotated about its center.
///
/// `w` is the extent along the heading axis `(cos yaw, sin yaw)`, `l` the
/// extent across it. A vehicle with yaw 0 is 4.5 m long in x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> Self {
        Self { cx, cy, w, l, yaw }
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Vec2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let u = Vec2::new(c, s).scale(self.w / 2.0);
        let v = Vec2::new(-s, c).scale(self.l / 2.0);
        let o = self.center();
        [
            o.add(u).sub(v),
            o.add(u).add(v),
            o.sub(u).add(v),
            o.sub(u).sub(v),
        ]
    }

    /// Point containment, boundary inclusive up to `tol`.
    pub fn contains(&self, p: Vec2, tol: f64) -> bool {
        let d = p.sub(self.center()).rotate(-self.yaw);
        d.x.abs() <= self.w / 2.0 + tol && d.y.abs() <= self.l / 2.0 + tol
    }

    /// Radius of the circumscribed circle.
    pub fn radius(&self) -> f64 {
        0.5 * self.w.hypot(self.l)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }
}

/// Signed shoelace area (positive for counter-clockwise polygons).
pub fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.cross(b);
    }
    acc / 2.0
}

fn line_intersection(p1: Vec2, p2: Vec2, a: Vec2, b: Vec2) -> Vec2 {
    // intersection of segment p1->p2 with the infinite line a->b
    let edge = b.sub(a);
    let d1 = edge.cross(p1.sub(a));
    let d2 = edge.cross(p2.sub(a));
    let t = d1 / (d1 - d2);
    p1.add(p2.sub(p1).scale(t))
}

/// Sutherland-Hodgman clipping of `subject` by the convex polygon `clip`.
/// Both polygons must be counter-clockwise.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output: Vec<Vec2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b.sub(a);
        let inside = |p: Vec2| edge.cross(p.sub(a)) >= 0.0;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => output.push(cur),
                (true, false) => output.push(line_intersection(prev, cur, a, b)),
                (false, true) => {
                    output.push(line_intersection(prev, cur, a, b));
                    output.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    output
}

pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    // cheap reject on circumscribed circles
    let d = a.center().sub(b.center()).norm();
    if d > a.radius() + b.radius() {
        return 0.0;
    }
    let poly = clip_convex(&a.corners(), &b.corners());
    let area = polygon_area(&poly);
    if area < DEGENERATE_AREA {
        0.0
    } else {
        area
    }
}

/// Intersection over union of two oriented rectangles.
pub fn iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Separating-axis overlap test with a clearance margin.
pub fn boxes_overlap(a: &OrientedBox, b: &OrientedBox, clearance: f64) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    for yaw in [a.yaw, a.yaw + PI / 2.0, b.yaw, b.yaw + PI / 2.0] {
        let axis = Vec2::new(yaw.cos(), yaw.sin());
        let (amin, amax) = project(&ca, axis);
        let (bmin, bmax) = project(&cb, axis);
        if amax + clearance <= bmin || bmax + clearance <= amin {
            return false;
        }
    }
    true
}

fn project(pts: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    pts.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let d = p.dot(axis);
            (lo.min(d), hi.max(d))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = OrientedBox::new(3.0, -1.0, 4.5, 2.0, 0.7);
        assert!((iou(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_squares_closed_form() {
        let a = OrientedBox::new(1.0, 1.0, 2.0, 2.0, 0.0);
        let b = OrientedBox::new(2.0, 2.0, 2.0, 2.0, 0.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_square_is_octagon() {
        let a = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = OrientedBox::new(0.0, 0.0, 2.0, 2.0, PI / 4.0);
        let inter = intersection_area(&a, &b);
        assert!((inter - 8.0 * (2f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!((iou(&a, &b) - 1.0 / 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn disjoint_and_touching_are_zero() {
        let a = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(iou(&a, &a.translated(10.0, 0.0)), 0.0);
        assert_eq!(iou(&a, &a.translated(2.0, 0.0)), 0.0);
    }

    #[test]
    fn half_turn_is_the_same_rectangle() {
        let a = OrientedBox::new(0.5, 0.5, 4.5, 2.0, 0.3);
        let b = OrientedBox { yaw: 0.3 + PI, ..a };
        assert!((iou(&a, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, -1e-18, 0.0, PI, 3.0 * PI, 7.5] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(((a - w) / TAU - ((a - w) / TAU).round()).abs() < 1e-9);
        }
    }

    #[test]
    fn sat_agrees_with_clipping() {
        let a = OrientedBox::new(0.0, 0.0, 4.5, 2.0, 0.2);
        let b = OrientedBox::new(3.0, 1.0, 4.5, 2.0, 1.2);
        assert_eq!(boxes_overlap(&a, &b, 0.0), intersection_area(&a, &b) > 0.0);
        let c = b.translated(5.0, 0.0);
        assert!(!boxes_overlap(&a, &c, 0.0));
    }
}
