//! Model inputs derived from a scenario: per-pillar point statistics encoded
//! into a BEV feature map, per-category center heatmaps, and text embeddings.

use crate::geometry::Box3D;
use crate::scenegen::{tokenize, Category, Point, Scenario, TokenBatch, Vocabulary, VocabularyError, MAX_TOKENS};
use crate::tensor::{Graph, Result as TensorResult, Tensor, TensorError, Var};
use thiserror::Error;

/// Raw statistics per pillar: mean offset from the cell center (x, y, z),
/// mean z, mean intensity, point count, max z.
pub const RAW_CHANNELS: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("{axis} range [{lo}, {hi}] is not a positive multiple of voxel size {voxel}")]
    NotDivisible {
        axis: char,
        lo: f64,
        hi: f64,
        voxel: f64,
    },
}

/// Axis-aligned detection volume and its voxelization. Rows (`h`) run along
/// x, columns (`w`) along y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub voxel: [f64; 3],
}

fn cells(axis: char, (lo, hi): (f64, f64), voxel: f64) -> Result<usize, GridError> {
    let err = GridError::NotDivisible {
        axis,
        lo,
        hi,
        voxel,
    };
    if !(hi > lo) || !(voxel > 0.0) {
        return Err(err);
    }
    let n = (hi - lo) / voxel;
    let rounded = n.round();
    if rounded < 1.0 || (n - rounded).abs() > 1e-6 * rounded.max(1.0) {
        return Err(err);
    }
    Ok(rounded as usize)
}

impl GridSpec {
    /// ±32 m square, 1 m pillars, 64×64 cells.
    pub fn desk() -> Self {
        Self::square(32.0, 1.0)
    }

    /// `[-extent, extent]²` with square pillars of side `voxel`.
    pub fn square(extent: f64, voxel: f64) -> Self {
        Self {
            x_range: (-extent, extent),
            y_range: (-extent, extent),
            z_range: (-3.0, 5.0),
            voxel: [voxel, voxel, 8.0],
        }
    }

    pub fn validate(&self) -> Result<(usize, usize), GridError> {
        let h = cells('x', self.x_range, self.voxel[0])?;
        let w = cells('y', self.y_range, self.voxel[1])?;
        cells('z', self.z_range, self.voxel[2])?;
        Ok((h, w))
    }

    pub fn h(&self) -> usize {
        ((self.x_range.1 - self.x_range.0) / self.voxel[0]).round() as usize
    }

    pub fn w(&self) -> usize {
        ((self.y_range.1 - self.y_range.0) / self.voxel[1]).round() as usize
    }

    pub fn num_cells(&self) -> usize {
        self.h() * self.w()
    }

    /// Cell `(row, col)` containing the BEV point, if inside the range.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < self.x_range.0 || x >= self.x_range.1 || y < self.y_range.0 || y >= self.y_range.1 {
            return None;
        }
        let i = ((x - self.x_range.0) / self.voxel[0]).floor() as usize;
        let j = ((y - self.y_range.0) / self.voxel[1]).floor() as usize;
        Some((i.min(self.h() - 1), j.min(self.w() - 1)))
    }

    pub fn flat(&self, cell: (usize, usize)) -> usize {
        cell.0 * self.w() + cell.1
    }

    pub fn unflat(&self, index: usize) -> (usize, usize) {
        (index / self.w(), index % self.w())
    }

    pub fn cell_center(&self, cell: (usize, usize)) -> [f64; 2] {
        [
            self.x_range.0 + (cell.0 as f64 + 0.5) * self.voxel[0],
            self.y_range.0 + (cell.1 as f64 + 0.5) * self.voxel[1],
        ]
    }

    pub fn z_center(&self) -> f64 {
        (self.z_range.0 + self.z_range.1) / 2.0
    }

    fn contains_z(&self, z: f64) -> bool {
        z >= self.z_range.0 && z < self.z_range.1
    }
}

/// Per-pillar statistics `[h, w, RAW_CHANNELS]`. Points outside the range
/// are dropped; empty pillars are all zeros.
pub fn raw_pillar_stats(points: &[Point], spec: &GridSpec) -> Tensor {
    let (h, w) = (spec.h(), spec.w());
    let mut sums = vec![0.0; h * w * RAW_CHANNELS];
    let zc = spec.z_center();
    for p in points {
        if !spec.contains_z(p[2]) {
            continue;
        }
        let Some(cell) = spec.cell_of(p[0], p[1]) else {
            continue;
        };
        let [cx, cy] = spec.cell_center(cell);
        let s = &mut sums[spec.flat(cell) * RAW_CHANNELS..][..RAW_CHANNELS];
        let first = s[5] == 0.0;
        s[0] += p[0] - cx;
        s[1] += p[1] - cy;
        s[2] += p[2] - zc;
        s[3] += p[2];
        s[4] += p[3];
        s[5] += 1.0;
        s[6] = if first { p[2] } else { s[6].max(p[2]) };
    }
    for s in sums.chunks_mut(RAW_CHANNELS) {
        let n = s[5];
        if n > 0.0 {
            for v in &mut s[..5] {
                *v /= n;
            }
        }
    }
    Tensor::new(vec![h, w, RAW_CHANNELS], sums).expect("sized above")
}

/// Trainable pillar encoder weights, bound on a graph.
#[derive(Debug, Clone, Copy)]
pub struct PillarWeights {
    pub lin_w: Var,
    pub lin_b: Var,
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

/// Raw statistics → linear + relu → two same-padded 3×3 conv + relu layers.
/// Returns the BEV feature map `[h, w, d]`.
pub fn pillarize(g: &mut Graph, stats: Var, weights: &PillarWeights) -> TensorResult<Var> {
    let shape = g.shape(stats).to_vec();
    let [h, w, c] = shape[..] else {
        return Err(TensorError::Invalid {
            op: "pillarize",
            reason: format!("expected [h, w, c] statistics, got {shape:?}"),
        });
    };
    let flat = g.reshape(stats, &[h * w, c])?;
    let lin = g.matmul(flat, weights.lin_w)?;
    let lin = g.add_bias(lin, weights.lin_b)?;
    let lin = g.relu(lin)?;
    let d = g.shape(lin)[1];
    let mut x = g.reshape(lin, &[h, w, d])?;
    for (kw, kb) in [
        (weights.conv1_w, weights.conv1_b),
        (weights.conv2_w, weights.conv2_b),
    ] {
        let y = g.conv2d(x, kw)?;
        let y = g.add_bias(y, kb)?;
        x = g.relu(y)?;
    }
    Ok(x)
}

/// Radius (in cells) at which a box shifted by it still overlaps the original
/// with IoU `min_overlap`; the usual center-heatmap rule.
pub fn gaussian_radius(length: f64, width: f64, min_overlap: f64) -> f64 {
    let (a1, b1) = (1.0, length + width);
    let c1 = width * length * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * a1 * c1).sqrt()) / 2.0;

    let (a2, b2) = (4.0, 2.0 * (length + width));
    let c2 = (1.0 - min_overlap) * width * length;
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (length + width);
    let c3 = (min_overlap - 1.0) * width * length;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

pub const HEATMAP_MIN_RADIUS: usize = 2;
pub const HEATMAP_OVERLAP: f64 = 0.1;

/// Splat radius in cells for a box footprint.
pub fn heatmap_radius(b: &Box3D, spec: &GridSpec) -> usize {
    let r = gaussian_radius(b.l / spec.voxel[0], b.w / spec.voxel[1], HEATMAP_OVERLAP);
    (r.floor() as usize).max(HEATMAP_MIN_RADIUS)
}

/// Per-category Gaussian center heatmaps `[h, w, C]`; overlapping Gaussians
/// combine by elementwise max, so every object's center cell holds 1.
pub fn gt_heatmap(objects: &[(Box3D, Category)], spec: &GridSpec) -> Tensor {
    let (h, w, c) = (spec.h(), spec.w(), Category::ALL.len());
    let mut data = vec![0.0; h * w * c];
    for (b, cat) in objects {
        let Some((ci, cj)) = spec.cell_of(b.cx, b.cy) else {
            continue;
        };
        let r = heatmap_radius(b, spec);
        let sigma = r as f64 / 3.0;
        let ch = cat.index();
        for i in ci.saturating_sub(r)..(ci + r + 1).min(h) {
            for j in cj.saturating_sub(r)..(cj + r + 1).min(w) {
                let (di, dj) = (i as f64 - ci as f64, j as f64 - cj as f64);
                let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
                let slot: &mut f64 = &mut data[(i * w + j) * c + ch];
                *slot = slot.max(v);
            }
        }
    }
    Tensor::new(vec![h, w, c], data).expect("sized above")
}

/// Text features `[l, d]`: one table row per token id.
pub fn embed_text(
    g: &mut Graph,
    tokens: &TokenBatch,
    table: Var,
) -> Result<Var, VocabularyError> {
    let len = g.shape(table)[0];
    if let Some(&bad) = tokens.ids.iter().find(|id| **id >= len) {
        return Err(VocabularyError::IndexOutOfRange { index: bad, len });
    }
    g.embedding_lookup(table, &tokens.ids)
        .map_err(|_| VocabularyError::IndexOutOfRange { index: len, len })
}

/// Everything the model and the losses need from one scenario, computed once.
#[derive(Debug, Clone)]
pub struct FeaturizedScenario {
    pub id: String,
    pub stats: Tensor,
    pub heatmap: Tensor,
    pub tokens: TokenBatch,
    pub boxes: Vec<Box3D>,
    pub categories: Vec<Category>,
    pub target: usize,
    /// Flat BEV cell of every in-range object center, in object order.
    pub object_cells: Vec<Option<usize>>,
}

impl FeaturizedScenario {
    pub fn target_cell(&self) -> Option<usize> {
        self.object_cells[self.target]
    }

    pub fn target_box(&self) -> &Box3D {
        &self.boxes[self.target]
    }

    pub fn target_category(&self) -> Category {
        self.categories[self.target]
    }
}

pub fn featurize(
    s: &Scenario,
    spec: &GridSpec,
    vocab: &Vocabulary,
) -> Result<FeaturizedScenario, VocabularyError> {
    let objects: Vec<(Box3D, Category)> = s.objects.iter().map(|o| (o.bbox, o.category)).collect();
    Ok(FeaturizedScenario {
        id: s.id.clone(),
        stats: raw_pillar_stats(&s.points, spec),
        heatmap: gt_heatmap(&objects, spec),
        tokens: tokenize(&s.description, vocab, MAX_TOKENS)?,
        boxes: objects.iter().map(|o| o.0).collect(),
        categories: objects.iter().map(|o| o.1).collect(),
        target: s.target_index(),
        object_cells: objects
            .iter()
            .map(|(b, _)| spec.cell_of(b.cx, b.cy).map(|c| spec.flat(c)))
            .collect(),
    })
}
