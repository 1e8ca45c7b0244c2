//! Oriented 3D boxes and their overlap measures.
//!
//! A box is centered at `(cx, cy, cz)`; `cz` is the geometric center, so the
//! vertical extent is `[cz - h/2, cz + h/2]`. `l` runs along the heading,
//! `w` is lateral, and `yaw` rotates counter-clockwise about +z.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box extents must be positive and finite, got l={l} w={w} h={h}")]
    Extent { l: f64, w: f64, h: f64 },
    #[error("box coordinates must be finite")]
    NonFinite,
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let wrapped = yaw - TAU * ((yaw + PI) / TAU).floor();
    // floor() rounding can leave exactly +π behind.
    if wrapped >= PI {
        wrapped - TAU
    } else {
        wrapped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(
        center: [f64; 3],
        size: [f64; 3],
        yaw: f64,
    ) -> Result<Self, GeometryError> {
        let [l, w, h] = size;
        if !(l > 0.0 && w > 0.0 && h > 0.0) || !(l.is_finite() && w.is_finite() && h.is_finite())
        {
            return Err(GeometryError::Extent { l, w, h });
        }
        if !center.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l,
            w,
            h,
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.l, self.w, self.h]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn z_min(&self) -> f64 {
        self.cz - self.h / 2.0
    }

    pub fn z_max(&self) -> f64 {
        self.cz + self.h / 2.0
    }

    /// Expresses `(x, y)` in the box frame: `.0` along the heading, `.1` lateral (left positive).
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (u, v) = self.to_local(p[0], p[1]);
        u.abs() <= self.l / 2.0
            && v.abs() <= self.w / 2.0
            && p[2] >= self.z_min()
            && p[2] <= self.z_max()
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            cz: self.cz + dz,
            ..*self
        }
    }

    fn sort_key(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
    }
}

/// Counter-clockwise footprint of a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevPolygon(pub [[f64; 2]; 4]);

impl BevPolygon {
    pub fn area(&self) -> f64 {
        shoelace(&self.0)
    }
}

pub fn bev_corners(b: &Box3D) -> BevPolygon {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    BevPolygon(local.map(|[u, v]| [b.cx + c * u - s * v, b.cy + s * u + c * v]))
}

fn shoelace(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW `clip` polygon.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(e0, e1, cur), cross(e0, e1, prev));
            let (cur_in, prev_in) = (dc >= 0.0, dp >= 0.0);
            if cur_in != prev_in {
                let t = dp / (dp - dc);
                output.push([
                    prev[0] + t * (cur[0] - prev[0]),
                    prev[1] + t * (cur[1] - prev[1]),
                ]);
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

/// Area of the intersection of two footprints. Arguments are ordered
/// canonically first so the result is exactly symmetric.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let (first, second) = if a.sort_key() <= b.sort_key() {
        (a, b)
    } else {
        (b, a)
    };
    // Disjoint circumscribed circles cannot overlap.
    let reach = (first.l.hypot(first.w) + second.l.hypot(second.w)) / 2.0;
    if (first.cx - second.cx).hypot(first.cy - second.cy) > reach {
        return 0.0;
    }
    let pa = bev_corners(first);
    let pb = bev_corners(second);
    shoelace(&clip_polygon(&pa.0, &pb.0)).max(0.0)
}

pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.l * a.w + b.l * b.w - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn vertical_overlap(a: &Box3D, b: &Box3D) -> f64 {
    (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let dz = vertical_overlap(a, b);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

/// BEV distance from `p` to the box center; height is ignored.
/// Correctly rounded, so whole-meter offsets give exact distances.
pub fn center_distance(p: [f64; 2], b: &Box3D) -> f64 {
    let (dx, dy) = (p[0] - b.cx, p[1] - b.cy);
    (dx * dx + dy * dy).sqrt()
}
