//! Synthetic grounding scenarios.
//!
//! Each scenario holds one target object, optionally a contextual object the
//! description refers to, look-alike distractors ("ambiguous" objects), and
//! unrelated background objects, together with a LiDAR-like point cloud:
//! points on the visible box faces plus a dominant ground plane. The object
//! color is observable through point intensity, the category through shape.
//!
//! Role annotations are written to the dataset for evaluation oracles only;
//! nothing in the model or the pseudo-labelling reads them.

mod io;
mod text;

pub use io::{load, parse_dataset, save, write_dataset, DatasetError, FORMAT_NAME, FORMAT_VERSION};
pub use text::{
    relational_text, render_description, single_text, tokenize, TokenBatch, Vocabulary,
    VocabularyError, MAX_TOKENS, PAD, TEMPLATE_COUNT,
};

use crate::geometry::{bev_intersection_area, center_distance, Box3D};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};
use std::fmt;
use thiserror::Error;

/// Height of the ground plane, meters.
pub const GROUND_Z: f64 = -1.8;
/// Maximum center distance for `next_to`, meters.
pub const NEXT_TO_RANGE: f64 = 9.0;
/// Surface sampling density on object faces, points per square meter.
pub const SURFACE_DENSITY: f64 = 2.0;
pub const MIN_POINTS_PER_OBJECT: usize = 20;
/// Rejection budget per scenario before giving up.
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Car,
    Truck,
    Bus,
    Pedestrian,
    Bicycle,
    Barrier,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Car,
        Category::Truck,
        Category::Bus,
        Category::Pedestrian,
        Category::Bicycle,
        Category::Barrier,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Car => "car",
            Category::Truck => "truck",
            Category::Bus => "bus",
            Category::Pedestrian => "pedestrian",
            Category::Bicycle => "bicycle",
            Category::Barrier => "barrier",
        }
    }

    /// Nominal (length, width, height) in meters.
    pub fn nominal_size(self) -> [f64; 3] {
        match self {
            Category::Car => [4.5, 1.9, 1.6],
            Category::Truck => [6.5, 2.4, 2.8],
            Category::Bus => [10.0, 2.8, 3.2],
            Category::Pedestrian => [0.8, 0.8, 1.8],
            Category::Bicycle => [1.8, 0.7, 1.3],
            Category::Barrier => [2.2, 0.6, 1.0],
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    White,
    Black,
    Red,
    Blue,
    Yellow,
    Gray,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::White,
        Color::Black,
        Color::Red,
        Color::Blue,
        Color::Yellow,
        Color::Gray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::White => "white",
            Color::Black => "black",
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Gray => "gray",
        }
    }

    /// Mean return intensity of surfaces painted this color.
    pub fn intensity(self) -> f64 {
        match self {
            Color::White => 0.95,
            Color::Yellow => 0.82,
            Color::Red => 0.68,
            Color::Blue => 0.54,
            Color::Gray => 0.40,
            Color::Black => 0.26,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    Contextual,
    Ambiguous,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
    NextTo,
    Nearest,
}

/// Coordinates of `p` in the frame of `anchor`: `.0` points to the anchor's
/// right, `.1` along its heading.
pub fn anchor_frame(p: [f64; 2], anchor: &Box3D) -> (f64, f64) {
    let (forward, left) = anchor.to_local(p[0], p[1]);
    (-left, forward)
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::InFrontOf,
        Relation::Behind,
        Relation::NextTo,
        Relation::Nearest,
    ];

    /// Direction of the relation in the anchor frame (radians from the
    /// heading, counter-clockwise), for directional relations.
    fn bearing(self) -> Option<f64> {
        match self {
            Relation::InFrontOf => Some(0.0),
            Relation::LeftOf => Some(FRAC_PI_2),
            Relation::Behind => Some(PI),
            Relation::RightOf => Some(-FRAC_PI_2),
            _ => None,
        }
    }

    /// Absolute predicate for a candidate relative to the anchor. `nearest`
    /// is comparative and always holds here; see [`Relation::resolve`].
    pub fn holds(self, candidate: &Box3D, anchor: &Box3D) -> bool {
        let (x, y) = anchor_frame([candidate.cx, candidate.cy], anchor);
        match self {
            Relation::LeftOf => x < 0.0 && y.abs() < -x,
            Relation::RightOf => x > 0.0 && y.abs() < x,
            Relation::InFrontOf => y > 0.0 && x.abs() < y,
            Relation::Behind => y < 0.0 && x.abs() < -y,
            Relation::NextTo => x.hypot(y) <= NEXT_TO_RANGE,
            Relation::Nearest => true,
        }
    }

    /// Indices of `candidates` that satisfy the relation w.r.t. `anchor`.
    pub fn resolve(self, candidates: &[Box3D], anchor: &Box3D) -> Vec<usize> {
        if self == Relation::Nearest {
            let dists: Vec<f64> = candidates
                .iter()
                .map(|c| center_distance([c.cx, c.cy], anchor))
                .collect();
            let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
            return (0..candidates.len()).filter(|i| dists[*i] == best).collect();
        }
        (0..candidates.len())
            .filter(|i| self.holds(&candidates[*i], anchor))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Ambiguous,
}

impl std::str::FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "ambiguous" => Ok(Difficulty::Ambiguous),
            other => Err(format!("unknown difficulty '{other}' (expected easy|ambiguous)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub bbox: Box3D,
    pub category: Category,
    pub attribute: Color,
    pub role: Role,
}

impl ObjectSpec {
    pub fn is_target(&self) -> bool {
        self.role == Role::Target
    }
}

/// A LiDAR return: position in meters plus unitless intensity.
pub type Point = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub objects: Vec<ObjectSpec>,
    pub points: Vec<Point>,
    pub description: String,
    pub relation: Option<Relation>,
    pub template: usize,
}

impl Scenario {
    pub fn target_index(&self) -> usize {
        self.objects
            .iter()
            .position(ObjectSpec::is_target)
            .expect("scenario has a target")
    }

    pub fn target(&self) -> &ObjectSpec {
        &self.objects[self.target_index()]
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    /// Index of the object the description uses as spatial anchor, if any.
    pub fn contextual_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.role == Role::Contextual)
    }
}

/// Square scene footprint `[-extent, extent]²` in which object centers lie.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub extent: f64,
}

impl Default for SceneBounds {
    fn default() -> Self {
        Self { extent: 32.0 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("n_scenarios must be positive")]
    EmptyRequest,
    #[error("scenario {index}: constraints unsatisfied after {attempts} attempts")]
    Exhausted { index: usize, attempts: usize },
    #[error("scene extent must be positive, got {0}")]
    Extent(f64),
}

/// Generates `n` scenarios. Scenario `i` draws from its own stream seeded
/// with `seed ^ i`, so output is deterministic and order-independent.
pub fn generate(
    seed: u64,
    n: usize,
    difficulty: Difficulty,
    bounds: SceneBounds,
) -> Result<Vec<Scenario>, GenerationError> {
    if n == 0 {
        return Err(GenerationError::EmptyRequest);
    }
    if !(bounds.extent > 0.0) {
        return Err(GenerationError::Extent(bounds.extent));
    }
    (0..n)
        .map(|i| generate_one(seed ^ i as u64, i, difficulty, bounds))
        .collect()
}

fn generate_one(
    stream_seed: u64,
    index: usize,
    difficulty: Difficulty,
    bounds: SceneBounds,
) -> Result<Scenario, GenerationError> {
    let mut rng = SeededRng::new(stream_seed);
    for _ in 0..MAX_ATTEMPTS {
        let layout = match difficulty {
            Difficulty::Easy => easy_layout(&mut rng, bounds),
            Difficulty::Ambiguous => ambiguous_layout(&mut rng, bounds),
        };
        let Some((objects, relation)) = layout else {
            continue;
        };
        let points = sample_points(&objects, bounds, &mut rng);
        let target = objects.iter().find(|o| o.is_target()).expect("target placed");
        if !points.iter().any(|p| target.bbox.contains([p[0], p[1], p[2]])) {
            continue;
        }
        let mut s = Scenario {
            id: format!("scene-{index:06}"),
            objects,
            points,
            description: String::new(),
            relation,
            template: rng.index(TEMPLATE_COUNT),
        };
        s.description = render_description(&s);
        return Ok(s);
    }
    Err(GenerationError::Exhausted {
        index,
        attempts: MAX_ATTEMPTS,
    })
}

fn random_box(rng: &mut SeededRng, category: Category, center: [f64; 2], yaw: f64) -> Box3D {
    let [l, w, h] = category.nominal_size().map(|s| s * rng.range(0.9, 1.1));
    Box3D::new([center[0], center[1], GROUND_Z + h / 2.0], [l, w, h], yaw)
        .expect("nominal sizes are positive")
}

fn half_diagonal(b: &Box3D) -> f64 {
    b.l.hypot(b.w) / 2.0
}

struct Placer {
    extent: f64,
    placed: Vec<Box3D>,
}

impl Placer {
    fn in_bounds(&self, b: &Box3D) -> bool {
        let lim = self.extent - 0.5;
        b.cx.abs() <= lim && b.cy.abs() <= lim
    }

    fn fits(&self, b: &Box3D) -> bool {
        let padded = Box3D { l: b.l + 0.8, w: b.w + 0.8, ..*b };
        self.in_bounds(b)
            && self
                .placed
                .iter()
                .all(|o| bev_intersection_area(&padded, o) == 0.0)
    }

    fn random_center(&self, rng: &mut SeededRng) -> [f64; 2] {
        let lim = self.extent - 0.5;
        [rng.range(-lim, lim), rng.range(-lim, lim)]
    }

    /// Tries up to 50 random placements accepted by `ok`.
    fn place(
        &mut self,
        rng: &mut SeededRng,
        category: Category,
        mut propose: impl FnMut(&mut SeededRng, &Self) -> [f64; 2],
        ok: impl Fn(&Box3D) -> bool,
    ) -> Option<Box3D> {
        for _ in 0..50 {
            let center = propose(rng, self);
            let yaw = rng.range(-PI, PI);
            let b = random_box(rng, category, center, yaw);
            if self.fits(&b) && ok(&b) {
                self.placed.push(b);
                return Some(b);
            }
        }
        None
    }
}

fn other_category(rng: &mut SeededRng, not: Category) -> Category {
    loop {
        let c = *rng.pick(&Category::ALL);
        if c != not {
            return c;
        }
    }
}

fn other_color(rng: &mut SeededRng, not: Color) -> Color {
    loop {
        let c = *rng.pick(&Color::ALL);
        if c != not {
            return c;
        }
    }
}

fn easy_layout(
    rng: &mut SeededRng,
    bounds: SceneBounds,
) -> Option<(Vec<ObjectSpec>, Option<Relation>)> {
    let mut placer = Placer {
        extent: bounds.extent,
        placed: Vec::new(),
    };
    let tc = *rng.pick(&Category::ALL);
    let ta = *rng.pick(&Color::ALL);
    let target = placer.place(rng, tc, |r, p| p.random_center(r), |_| true)?;
    let mut objects = vec![ObjectSpec {
        bbox: target,
        category: tc,
        attribute: ta,
        role: Role::Target,
    }];
    let others = 2 + rng.index(3);
    for _ in 0..others {
        let category = *rng.pick(&Category::ALL);
        let attribute = if category == tc {
            other_color(rng, ta)
        } else {
            *rng.pick(&Color::ALL)
        };
        let bbox = placer.place(rng, category, |r, p| p.random_center(r), |_| true)?;
        let role = if category == tc {
            Role::Ambiguous
        } else {
            Role::Background
        };
        objects.push(ObjectSpec {
            bbox,
            category,
            attribute,
            role,
        });
    }
    Some((objects, None))
}

/// Signed angle between the candidate's bearing from `anchor` and `bearing`.
fn bearing_offset(candidate: &Box3D, anchor: &Box3D, bearing: f64) -> f64 {
    let (fwd, left) = anchor.to_local(candidate.cx, candidate.cy);
    crate::geometry::normalize_yaw(left.atan2(fwd) - bearing).abs()
}

fn ambiguous_layout(
    rng: &mut SeededRng,
    bounds: SceneBounds,
) -> Option<(Vec<ObjectSpec>, Option<Relation>)> {
    let mut placer = Placer {
        extent: bounds.extent,
        placed: Vec::new(),
    };
    let relation = *rng.pick(&Relation::ALL);
    let tc = *rng.pick(&Category::ALL);
    let ta = *rng.pick(&Color::ALL);
    let (cc, ca) = loop {
        let pair = (*rng.pick(&Category::ALL), *rng.pick(&Color::ALL));
        if pair != (tc, ta) {
            break pair;
        }
    };

    let anchor = placer.place(rng, cc, |r, p| p.random_center(r), |_| true)?;
    let target_half = {
        let [l, w, _] = tc.nominal_size();
        1.1 * l.hypot(w) / 2.0
    };
    let clearance = half_diagonal(&anchor) + target_half + 0.8;
    if relation == Relation::NextTo && clearance + 0.5 >= NEXT_TO_RANGE {
        return None;
    }

    let propose_target = |r: &mut SeededRng, _: &Placer| -> [f64; 2] {
        let (bearing, reach) = match relation.bearing() {
            Some(b) => (b + r.range(-FRAC_PI_6, FRAC_PI_6), 6.0),
            None => (r.range(-PI, PI), if relation == Relation::NextTo { NEXT_TO_RANGE - 0.5 - clearance } else { 5.0 }),
        };
        let dist = clearance + r.range(0.0, reach.max(0.1));
        let (s, c) = (anchor.yaw + bearing).sin_cos();
        [anchor.cx + dist * c, anchor.cy + dist * s]
    };
    let target = placer.place(rng, tc, propose_target, |b| {
        relation.holds(b, &anchor)
            && relation
                .bearing()
                .map_or(true, |br| bearing_offset(b, &anchor, br) < FRAC_PI_6 + 1e-9)
    })?;
    let target_dist = center_distance([target.cx, target.cy], &anchor);

    // Look-alikes must clearly fail the relation.
    let distractor_ok = |b: &Box3D| -> bool {
        let d = center_distance([b.cx, b.cy], &anchor);
        match relation {
            Relation::NextTo => d > NEXT_TO_RANGE + 3.0,
            Relation::Nearest => d > 1.4 * target_dist + 1.0,
            _ => {
                let br = relation.bearing().expect("directional");
                !relation.holds(b, &anchor) && bearing_offset(b, &anchor, br) > 65f64.to_radians()
            }
        }
    };
    let mut objects = vec![
        ObjectSpec {
            bbox: anchor,
            category: cc,
            attribute: ca,
            role: Role::Contextual,
        },
        ObjectSpec {
            bbox: target,
            category: tc,
            attribute: ta,
            role: Role::Target,
        },
    ];
    for _ in 0..2 {
        let bbox = placer.place(rng, tc, |r, p| p.random_center(r), distractor_ok)?;
        objects.push(ObjectSpec {
            bbox,
            category: tc,
            attribute: ta,
            role: Role::Ambiguous,
        });
    }
    let background = 1 + rng.index(2);
    for _ in 0..background {
        let category = other_category(rng, tc);
        let attribute = if category == cc {
            other_color(rng, ca)
        } else {
            *rng.pick(&Color::ALL)
        };
        let bbox = placer.place(rng, category, |r, p| p.random_center(r), |_| true)?;
        objects.push(ObjectSpec {
            bbox,
            category,
            attribute,
            role: Role::Background,
        });
    }
    // Objects are listed in a shuffled order so index carries no role signal.
    rng.shuffle(&mut objects);

    let look_alikes: Vec<Box3D> = objects
        .iter()
        .filter(|o| o.category == tc && o.attribute == ta)
        .map(|o| o.bbox)
        .collect();
    let winners = relation.resolve(&look_alikes, &anchor);
    if winners.len() != 1 || look_alikes[winners[0]] != target {
        return None;
    }
    Some((objects, Some(relation)))
}

/// Points on the side and top faces of every object, then ground returns
/// until the ground holds at least four fifths of the cloud.
fn sample_points(objects: &[ObjectSpec], bounds: SceneBounds, rng: &mut SeededRng) -> Vec<Point> {
    let mut points = Vec::new();
    for o in objects {
        let b = &o.bbox;
        let faces = [b.l * b.h, b.l * b.h, b.w * b.h, b.w * b.h, b.l * b.w];
        let area: f64 = faces.iter().sum();
        let count = ((SURFACE_DENSITY * area).round() as usize).max(MIN_POINTS_PER_OBJECT);
        let (s, c) = b.yaw.sin_cos();
        // Slightly inset so every sample is strictly inside its box.
        let (hl, hw, hh) = (b.l * 0.499, b.w * 0.499, b.h * 0.499);
        for _ in 0..count {
            let mut pick = rng.uniform() * area;
            let mut face = 0;
            while face < 4 && pick >= faces[face] {
                pick -= faces[face];
                face += 1;
            }
            let (a, bb) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
            let (u, v, z) = match face {
                0 => (a * hl, hw, bb * hh),
                1 => (a * hl, -hw, bb * hh),
                2 => (hl, a * hw, bb * hh),
                3 => (-hl, a * hw, bb * hh),
                _ => (a * hl, bb * hw, hh),
            };
            let intensity = (o.attribute.intensity() + rng.range(-0.03, 0.03)).clamp(0.0, 1.0);
            points.push([
                b.cx + c * u - s * v,
                b.cy + s * u + c * v,
                b.cz + z,
                intensity,
            ]);
        }
    }
    let ground = 4 * points.len() + 200;
    let e = bounds.extent;
    for _ in 0..ground {
        points.push([
            rng.range(-e, e),
            rng.range(-e, e),
            GROUND_Z + rng.range(-0.05, 0.05),
            rng.range(0.0, 0.1),
        ]);
    }
    points
}
