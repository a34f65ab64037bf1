use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// A point or displacement in the world frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_heading(heading: f64) -> Self {
        let (s, c) = heading.sin_cos();
        Vec2::new(c, s)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Counterclockwise rotation.
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Vec2::new(a[0], a[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Rectangular footprint centered on a pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    pub const CAR: Footprint = Footprint {
        length: 4.5,
        width: 2.0,
    };
}

/// Oriented bounding box in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Obb {
    pub fn new(center: Vec2, heading: f64, fp: Footprint) -> Self {
        Obb {
            center,
            heading,
            half_length: fp.length / 2.0,
            half_width: fp.width / 2.0,
        }
    }

    fn axes(&self) -> [Vec2; 2] {
        let f = Vec2::from_heading(self.heading);
        [f, Vec2::new(-f.y, f.x)]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [f, l] = self.axes();
        let a = f * self.half_length;
        let b = l * self.half_width;
        let c = self.center;
        [c + a + b, c + a - b, c - a - b, c - a + b]
    }

    /// Separating-axis overlap test. Touching edges do not count.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let ca = self.corners();
        let cb = other.corners();
        for axis in self.axes().into_iter().chain(other.axes()) {
            let (amin, amax) = project(&ca, axis);
            let (bmin, bmax) = project(&cb, axis);
            if amax <= bmin || bmax <= amin {
                return false;
            }
        }
        true
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let [f, l] = self.axes();
        let d = p - self.center;
        d.dot(f).abs() <= self.half_length && d.dot(l).abs() <= self.half_width
    }

    /// True when the open segment a→b passes through the box.
    pub fn intersects_segment(&self, a: Vec2, b: Vec2) -> bool {
        if self.contains(a) || self.contains(b) {
            return true;
        }
        let c = self.corners();
        (0..4).any(|i| segments_intersect(a, b, c[i], c[(i + 1) % 4]))
    }
}

fn project(pts: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

/// Proper or touching intersection of segments p1-p2 and q1-q2.
pub fn segments_intersect(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> bool {
    let d1 = (p2 - p1).cross(q1 - p1);
    let d2 = (p2 - p1).cross(q2 - p1);
    let d3 = (q2 - q1).cross(p1 - q1);
    let d4 = (q2 - q1).cross(p2 - q1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |a: Vec2, b: Vec2, p: Vec2, d: f64| {
        d == 0.0
            && p.x >= a.x.min(b.x)
            && p.x <= a.x.max(b.x)
            && p.y >= a.y.min(b.y)
            && p.y <= a.y.max(b.y)
    };
    on(p1, p2, q1, d1) || on(p1, p2, q2, d2) || on(q1, q2, p1, d3) || on(q1, q2, p2, d4)
}

/// Even-odd ray casting. Points on the boundary may land either way.
pub fn point_in_polygon(p: Vec2, poly: &[Vec2]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Closest point on segment a-b to p, as (parameter in [0,1], distance).
pub fn project_on_segment(p: Vec2, a: Vec2, b: Vec2) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    };
    (t, p.distance(a + ab * t))
}

/// A point in a vehicle's frame: `right` positive to the right, `front`
/// positive ahead.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoPoint {
    pub right: f64,
    pub front: f64,
}

impl EgoPoint {
    pub fn new(right: f64, front: f64) -> Self {
        EgoPoint { right, front }
    }

    pub fn distance(&self) -> f64 {
        self.right.hypot(self.front)
    }
}

/// Expresses `p` in the frame of a vehicle at `origin` facing `heading`.
pub fn world_to_ego(origin: Vec2, heading: f64, p: Vec2) -> EgoPoint {
    let d = p - origin;
    let (s, c) = heading.sin_cos();
    EgoPoint {
        front: d.x * c + d.y * s,
        right: d.x * s - d.y * c,
    }
}

pub fn ego_to_world(origin: Vec2, heading: f64, e: EgoPoint) -> Vec2 {
    let (s, c) = heading.sin_cos();
    origin + Vec2::new(e.front * c + e.right * s, e.front * s - e.right * c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_range() {
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.5) - 0.5).abs() < 1e-12);
        assert!((normalize_angle(-0.5 - 4.0 * PI) + 0.5).abs() < 1e-9);
    }

    #[test]
    fn obb_overlap_axis_aligned() {
        let a = Obb::new(Vec2::ZERO, 0.0, Footprint::CAR);
        let b = Obb::new(Vec2::new(4.0, 0.0), 0.0, Footprint::CAR);
        let c = Obb::new(Vec2::new(50.0, 0.0), 0.0, Footprint::CAR);
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
        // rotated box reaching into the corner region
        let d = Obb::new(Vec2::new(3.2, 2.2), 0.785, Footprint::CAR);
        assert!(a.overlaps(&d));
        let e = Obb::new(Vec2::new(4.0, 3.5), 0.785, Footprint { length: 1.0, width: 1.0 });
        assert!(!a.overlaps(&e));
    }

    #[test]
    fn polygon_membership() {
        let sq = [
            Vec2::new(0.0, 0.0),
            Vec2::new(10.0, 0.0),
            Vec2::new(10.0, 10.0),
            Vec2::new(0.0, 10.0),
        ];
        assert!(point_in_polygon(Vec2::new(5.0, 5.0), &sq));
        assert!(!point_in_polygon(Vec2::new(15.0, 5.0), &sq));
        assert!(!point_in_polygon(Vec2::new(5.0, -0.1), &sq));
    }

    #[test]
    fn segment_crossing() {
        let a = Vec2::new(0.0, 0.0);
        let b = Vec2::new(2.0, 0.0);
        assert!(segments_intersect(a, b, Vec2::new(1.0, -1.0), Vec2::new(1.0, 1.0)));
        assert!(!segments_intersect(a, b, Vec2::new(3.0, -1.0), Vec2::new(3.0, 1.0)));
    }
}
