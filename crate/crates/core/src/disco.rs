//! Pseudo-label assignment of referential objects to decoder queries, and the
//! four training losses.

use crate::featurize::{FeaturizedScenario, GridSpec};
use crate::geometry::{center_distance, Box3D};
use crate::model::{encode_box, forward, Bound, Forward, Injection, ModelConfig, ModelError, QuerySet};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use thiserror::Error;

pub const DEFAULT_TAU: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const HEATMAP_BETA: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DiscoError {
    #[error("assignment error: {0}")]
    Assignment(String),
    #[error("loss term {part} is not finite ({value})")]
    NonFinite { part: &'static str, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Outcome for one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMatch {
    /// Nearest object (smallest index among equidistant ones).
    pub nearest: usize,
    /// BEV center distance to `nearest`, meters.
    pub distance: f64,
    /// `Some(nearest)` when `distance < τ`.
    pub object: Option<usize>,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub matches: Vec<QueryMatch>,
    /// Matched non-target objects, ascending, without duplicates.
    pub referential: Vec<usize>,
    pub target_index: usize,
}

impl Assignment {
    /// Queries supervised for regression: every matched query, or only the
    /// target-matched ones when `joint` is false.
    pub fn regression_queries(&self, joint: bool) -> Vec<usize> {
        self.matches
            .iter()
            .enumerate()
            .filter(|(_, m)| if joint { m.object.is_some() } else { m.is_target })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn target_queries(&self) -> Vec<usize> {
        self.regression_queries(false)
    }
}

/// Matches each query center to its nearest object and keeps the match when
/// strictly closer than `tau`.
pub fn assign(
    queries: &[[f64; 2]],
    boxes: &[Box3D],
    target_index: usize,
    tau: f64,
) -> Result<Assignment, DiscoError> {
    if boxes.is_empty() {
        return Err(DiscoError::Assignment("no objects to assign".into()));
    }
    if target_index >= boxes.len() {
        return Err(DiscoError::Assignment(format!(
            "target index {target_index} out of range for {} objects",
            boxes.len()
        )));
    }
    if !(tau >= 0.0) {
        return Err(DiscoError::Assignment(format!("tau must be non-negative, got {tau}")));
    }
    let mut referential = Vec::new();
    let matches = queries
        .iter()
        .map(|q| {
            let mut nearest = 0;
            let mut distance = center_distance(*q, &boxes[0]);
            for (j, b) in boxes.iter().enumerate().skip(1) {
                let dj = center_distance(*q, b);
                if dj < distance {
                    nearest = j;
                    distance = dj;
                }
            }
            let object = (distance < tau).then_some(nearest);
            let is_target = object == Some(target_index);
            if let Some(j) = object {
                if !is_target {
                    referential.push(j);
                }
            }
            QueryMatch {
                nearest,
                distance,
                object,
                is_target,
            }
        })
        .collect();
    referential.sort_unstable();
    referential.dedup();
    Ok(Assignment {
        matches,
        referential,
        target_index,
    })
}

/// BEV centers, in meters, of the cells the queries were seeded from.
pub fn query_centers(queries: &QuerySet, grid: &GridSpec) -> Vec<[f64; 2]> {
    queries
        .positions
        .iter()
        .map(|c| grid.cell_center(grid.unflat(*c)))
        .collect()
}

fn column(g: &mut Graph, x: Var) -> Result<Var, TensorError> {
    let n = g.value(x).numel();
    g.reshape(x, &[n, 1])
}

/// Σ w·(1−p)^a·log p over the selected rows of a column of probabilities
/// (`flip` = false), or Σ w·p^a·log(1−p) (`flip` = true).
fn focal_sum(
    g: &mut Graph,
    col: Var,
    rows: &[usize],
    weights: Option<Vec<f64>>,
    flip: bool,
) -> Result<Option<Var>, TensorError> {
    if rows.is_empty() {
        return Ok(None);
    }
    let p = g.gather_rows(col, rows)?;
    let q = g.one_minus(p)?;
    let (modulated, logged) = if flip { (p, q) } else { (q, p) };
    let m = g.square(modulated)?;
    let lg = g.log(logged)?;
    let mut term = g.mul(m, lg)?;
    if let Some(w) = weights {
        let w = g.constant(Tensor::new(vec![rows.len(), 1], w)?);
        term = g.mul(term, w)?;
    }
    Ok(Some(g.sum(term)?))
}

fn combine_terms(
    g: &mut Graph,
    pos: Option<Var>,
    neg: Option<Var>,
    pos_scale: f64,
    neg_scale: f64,
) -> Result<Var, TensorError> {
    let mut total = g.constant(Tensor::scalar(0.0));
    if let Some(p) = pos {
        let s = g.scale(p, pos_scale)?;
        total = g.add(total, s)?;
    }
    if let Some(n) = neg {
        let s = g.scale(n, neg_scale)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Penalty-reduced focal loss between a predicted and a target heatmap:
/// −(1−p)²·log p at peaks (gt = 1), −(1−gt)⁴·p²·log(1−p) elsewhere, divided
/// by the number of peaks (at least 1).
pub fn loss_heatmap(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var, TensorError> {
    if g.shape(pred) != gt.shape() {
        return Err(TensorError::Shape {
            op: "loss_heatmap",
            lhs: g.shape(pred).to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut neg_w = Vec::new();
    for (i, t) in gt.data().iter().enumerate() {
        if *t == 1.0 {
            pos.push(i);
        } else {
            neg.push(i);
            neg_w.push((1.0 - t).powf(HEATMAP_BETA));
        }
    }
    let col = column(g, pred)?;
    let pos_sum = focal_sum(g, col, &pos, None, false)?;
    let neg_sum = focal_sum(g, col, &neg, Some(neg_w), true)?;
    let norm = pos.len().max(1) as f64;
    combine_terms(g, pos_sum, neg_sum, -1.0 / norm, -1.0 / norm)
}

/// Binary focal loss (γ = 2, α = 0.25) over probabilities, normalized by the
/// number of positives (at least 1).
pub fn binary_focal(g: &mut Graph, probs: Var, positive: &[bool]) -> Result<Var, TensorError> {
    let n = g.value(probs).numel();
    if positive.len() != n {
        return Err(TensorError::Shape {
            op: "binary_focal",
            lhs: g.shape(probs).to_vec(),
            rhs: vec![positive.len()],
        });
    }
    let pos: Vec<usize> = (0..n).filter(|i| positive[*i]).collect();
    let neg: Vec<usize> = (0..n).filter(|i| !positive[*i]).collect();
    let col = column(g, probs)?;
    let pos_sum = focal_sum(g, col, &pos, None, false)?;
    let neg_sum = focal_sum(g, col, &neg, None, true)?;
    let norm = pos.len().max(1) as f64;
    combine_terms(g, pos_sum, neg_sum, -FOCAL_ALPHA / norm, -(1.0 - FOCAL_ALPHA) / norm)
}

/// Focal loss on proposal confidences with the token at `target_cell` as the
/// single positive.
pub fn loss_query_proposal(
    g: &mut Graph,
    confidences: Var,
    positions: &[usize],
    target_cell: usize,
) -> Result<Var, DiscoError> {
    let positive: Vec<bool> = positions.iter().map(|c| *c == target_cell).collect();
    if !positive.contains(&true) {
        return Err(DiscoError::Assignment(format!(
            "target cell {target_cell} is not among the visual tokens"
        )));
    }
    Ok(binary_focal(g, confidences, &positive)?)
}

/// Focal loss on per-query target probabilities; only target-matched queries
/// are positive.
pub fn loss_cls(g: &mut Graph, probs: Var, assignment: &Assignment) -> Result<Var, TensorError> {
    let positive: Vec<bool> = assignment.matches.iter().map(|m| m.is_target).collect();
    binary_focal(g, probs, &positive)
}

/// Mean L1 between predicted and encoded ground-truth box parameters over the
/// supervised queries: all matched queries when `joint`, otherwise only the
/// target-matched ones. Zero when no query is supervised.
pub fn loss_reg(
    g: &mut Graph,
    regression: Var,
    assignment: &Assignment,
    centers: &[[f64; 2]],
    boxes: &[Box3D],
    joint: bool,
) -> Result<Var, TensorError> {
    let rows = assignment.regression_queries(joint);
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut target = Vec::with_capacity(rows.len() * 8);
    for &q in &rows {
        let obj = assignment.matches[q].object.expect("supervised queries are matched");
        target.extend(encode_box(&boxes[obj], centers[q]));
    }
    let pred = g.gather_rows(regression, &rows)?;
    let target = g.constant(Tensor::new(vec![rows.len(), 8], target)?);
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff)?;
    g.mean(abs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub hm: f64,
    pub qp: f64,
    pub cls: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            hm: 1.0,
            qp: 0.5,
            cls: 0.5,
            reg: 1.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub hm: f64,
    pub qp: f64,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total = λ₁·hm + λ₂·qp + λ₃·cls + λ₄·reg`, summed left to right.
    pub fn combine(parts: [f64; 4], w: &LossWeights) -> Result<Self, DiscoError> {
        for (name, v) in ["hm", "qp", "cls", "reg"].into_iter().zip(parts) {
            if !v.is_finite() {
                return Err(DiscoError::NonFinite { part: name, value: v });
            }
        }
        let [hm, qp, cls, reg] = parts;
        Ok(Self {
            hm,
            qp,
            cls,
            reg,
            total: w.hm * hm + w.qp * qp + w.cls * cls + w.reg * reg,
        })
    }
}

/// Scalar graph nodes for the four terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub hm: Var,
    pub qp: Var,
    pub cls: Var,
    pub reg: Var,
}

/// Weighted total as a graph node, plus the numeric breakdown. The node's
/// value equals `breakdown.total` exactly.
pub fn total_loss(
    g: &mut Graph,
    terms: LossTerms,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown), DiscoError> {
    let parts = [terms.hm, terms.qp, terms.cls, terms.reg].map(|v| g.item(v));
    let breakdown = LossBreakdown::combine(parts, w)?;
    let a = g.scale(terms.hm, w.hm)?;
    let b = g.scale(terms.qp, w.qp)?;
    let c = g.scale(terms.cls, w.cls)?;
    let d = g.scale(terms.reg, w.reg)?;
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    let total = g.add(abc, d)?;
    debug_assert_eq!(g.item(total), breakdown.total);
    Ok((total, breakdown))
}

/// Supervision settings for one training forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Supervision {
    pub weights: LossWeights,
    pub tau: f64,
    /// Regress referential objects alongside the target.
    pub disco: bool,
}

impl Default for Supervision {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            tau: DEFAULT_TAU,
            disco: true,
        }
    }
}

/// Everything one training forward produced.
#[derive(Debug)]
pub struct TrainingStep {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub forward: Forward,
    pub assignment: Assignment,
}

/// Training-mode forward on one scenario with injections, assignment and the
/// weighted four-term loss. Without heatmap selection the heatmap term is 0.
pub fn training_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    s: &FeaturizedScenario,
    sup: &Supervision,
) -> Result<TrainingStep, DiscoError> {
    let target_cell = s.target_cell().ok_or_else(|| {
        DiscoError::Assignment(format!("{}: target center lies outside the grid", s.id))
    })?;
    let centers: Vec<usize> = s.object_cells.iter().flatten().copied().collect();
    let injection = Injection {
        centers: cfg.ofs.then_some(centers.as_slice()),
        target_cell: Some(target_cell),
    };
    let out = forward(g, p, cfg, &s.stats, &s.tokens, injection)?;
    let hm = match out.heatmap {
        Some(pred) => loss_heatmap(g, pred, &s.heatmap)?,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let qp = loss_query_proposal(g, out.confidences, &out.selected.positions, target_cell)?;
    let qc = query_centers(&out.queries, &cfg.grid);
    let assignment = assign(&qc, &s.boxes, s.target, sup.tau)?;
    let cls = loss_cls(g, out.probs, &assignment)?;
    let reg = loss_reg(g, out.regression, &assignment, &qc, &s.boxes, sup.disco)?;
    let (loss, breakdown) = total_loss(g, LossTerms { hm, qp, cls, reg }, &sup.weights)?;
    Ok(TrainingStep {
        loss,
        breakdown,
        forward: out,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::grad_check;

    fn unit_box(x: f64, y: f64) -> Box3D {
        Box3D::new([x, y, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap()
    }

    #[test]
    fn assignment_examples() {
        let boxes = [unit_box(0.0, 0.0), unit_box(3.0, 0.0)];
        let a = assign(&[[0.0, 0.0], [6.0, 0.0], [1.5, 0.0]], &boxes, 0, 2.0).unwrap();
        assert_eq!(a.matches[0].object, Some(0));
        assert_eq!(a.matches[0].distance, 0.0);
        assert!(a.matches[0].is_target);
        assert_eq!(a.matches[1].object, None);
        assert_eq!(a.matches[1].distance, 3.0);
        // equidistant: smaller index wins
        assert_eq!(a.matches[2].nearest, 0);
        assert_eq!(a.referential, Vec::<usize>::new());
        let a = assign(&[[3.0, 0.5]], &boxes, 0, 2.0).unwrap();
        assert_eq!(a.referential, vec![1]);
        assert!(!a.matches[0].is_target);
        let none = assign(&[[0.0, 0.0]], &boxes, 0, 0.0).unwrap();
        assert_eq!(none.matches[0].object, None);
        assert!(assign(&[[0.0, 0.0]], &[], 0, 2.0).is_err());
        assert!(assign(&[[0.0, 0.0]], &boxes, 5, 2.0).is_err());
    }

    fn probs(g: &mut Graph, v: &[f64]) -> Var {
        g.param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn heatmap_loss_single_peak() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap());
        let gt = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let l = loss_heatmap(&mut g, p, &gt).unwrap();
        assert!((g.item(l) - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((g.item(l) - 0.17329).abs() < 5e-6);
    }

    #[test]
    fn heatmap_loss_vanishes_at_target() {
        let gt = Tensor::new(vec![2, 2, 1], vec![1.0, 0.5, 0.0, 0.2]).unwrap();
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6] {
            let mut g = Graph::new();
            let p = g.param(Tensor::new(vec![2, 2, 1], vec![1.0 - eps, eps, eps, eps]).unwrap());
            let l = { let v = loss_heatmap(&mut g, p, &gt).unwrap(); g.item(v) };
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-9);
    }

    #[test]
    fn heatmap_loss_gradient() {
        let mut rng = SeededRng::new(4);
        let gt = Tensor::new(
            vec![3, 3, 2],
            (0..18).map(|i| if i == 4 { 1.0 } else { rng.uniform() * 0.9 }).collect(),
        )
        .unwrap();
        let x = Tensor::new(vec![3, 3, 2], (0..18).map(|_| rng.range(0.05, 0.95)).collect()).unwrap();
        let err = grad_check(|g, p| loss_heatmap(g, p, &gt), &x, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn proposal_loss_examples() {
        let mut g = Graph::new();
        let c = probs(&mut g, &[0.5]);
        let l = loss_query_proposal(&mut g, c, &[7], 7).unwrap();
        assert!((g.item(l) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((g.item(l) - 0.04332).abs() < 5e-6);
        let c = probs(&mut g, &[1.0, 0.0, 0.0]);
        let l = loss_query_proposal(&mut g, c, &[3, 4, 5], 3).unwrap();
        assert_eq!(g.item(l), 0.0);
        assert!(matches!(
            loss_query_proposal(&mut g, c, &[3, 4, 5], 9),
            Err(DiscoError::Assignment(_))
        ));
        let mut prev = f64::INFINITY;
        for p in [0.1, 0.3, 0.6, 0.9] {
            let c = probs(&mut g, &[p, 0.2, 0.4]);
            let l = { let v = loss_query_proposal(&mut g, c, &[0, 1, 2], 0).unwrap(); g.item(v) };
            assert!(l < prev);
            prev = l;
        }
    }

    fn fixture_assignment(flags: &[(Option<usize>, bool)]) -> Assignment {
        Assignment {
            matches: flags
                .iter()
                .map(|(o, t)| QueryMatch {
                    nearest: o.unwrap_or(0),
                    distance: 0.0,
                    object: *o,
                    is_target: *t,
                })
                .collect(),
            referential: Vec::new(),
            target_index: 0,
        }
    }

    #[test]
    fn cls_loss_hand_sum() {
        let a = fixture_assignment(&[(Some(0), true), (Some(1), false), (None, false)]);
        let p = [0.7, 0.4, 0.2];
        let mut g = Graph::new();
        let v = probs(&mut g, &p);
        let l = { let v = loss_cls(&mut g, v, &a).unwrap(); g.item(v) };
        let expect = 0.25 * 0.3f64.powi(2) * -(0.7f64.ln())
            + 0.75 * 0.4f64.powi(2) * -(0.6f64.ln())
            + 0.75 * 0.2f64.powi(2) * -(0.8f64.ln());
        assert!((l - expect).abs() < 1e-14);
        let none = fixture_assignment(&[(None, false), (Some(1), false)]);
        let v = probs(&mut g, &[0.3, 0.6]);
        let l = { let v = loss_cls(&mut g, v, &none).unwrap(); g.item(v) };
        let expect = 0.75 * 0.09 * -(0.7f64.ln()) + 0.75 * 0.36 * -(0.4f64.ln());
        assert!((l - expect).abs() < 1e-14);
        let v = probs(&mut g, &[1.0, 0.0, 0.0]);
        assert_eq!({ let v = loss_cls(&mut g, v, &a).unwrap(); g.item(v) }, 0.0);
    }

    #[test]
    fn reg_loss_examples() {
        let boxes = [unit_box(0.2, 0.1), unit_box(4.0, 4.0)];
        let centers = [[0.5, 0.5], [4.5, 3.5], [10.0, 10.0]];
        let a = assign(&centers, &boxes, 0, 2.0).unwrap();
        let exact: Vec<f64> = encode_box(&boxes[0], centers[0])
            .into_iter()
            .chain(encode_box(&boxes[1], centers[1]))
            .chain([0.0; 8])
            .collect();
        let mut g = Graph::new();
        let r = g.param(Tensor::new(vec![3, 8], exact.clone()).unwrap());
        assert_eq!({ let v = loss_reg(&mut g, r, &a, &centers, &boxes, true).unwrap(); g.item(v) }, 0.0);
        let mut off = exact.clone();
        off[2] += 1.0;
        let r = g.param(Tensor::new(vec![3, 8], off.clone()).unwrap());
        let target_only = { let v = loss_reg(&mut g, r, &a, &centers, &boxes, false).unwrap(); g.item(v) };
        assert!((target_only - 1.0 / 8.0).abs() < 1e-15);
        let joint = { let v = loss_reg(&mut g, r, &a, &centers, &boxes, true).unwrap(); g.item(v) };
        assert!((joint - 1.0 / 16.0).abs() < 1e-15);
        // Joint mean over n terms times n equals the sum of per-query means.
        off[8 + 5] -= 0.5;
        let r = g.param(Tensor::new(vec![3, 8], off).unwrap());
        let t = { let v = loss_reg(&mut g, r, &a, &centers, &boxes, false).unwrap(); g.item(v) };
        let j = { let v = loss_reg(&mut g, r, &a, &centers, &boxes, true).unwrap(); g.item(v) };
        assert!((2.0 * j - (t + 0.5 / 8.0)).abs() < 1e-15);
        assert!(t <= 2.0 * j);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert_eq!(LossBreakdown::combine([1.0; 4], &w).unwrap().total, 3.25);
        assert_eq!(LossBreakdown::combine([0.0; 4], &w).unwrap().total, 0.0);
        let only_hm = LossWeights {
            hm: 1.0,
            qp: 0.0,
            cls: 0.0,
            reg: 0.0,
        };
        assert_eq!(LossBreakdown::combine([0.7, 3.0, 5.0, 9.0], &only_hm).unwrap().total, 0.7);
        match LossBreakdown::combine([0.0, f64::NAN, 0.0, 0.0], &w) {
            Err(DiscoError::NonFinite { part, .. }) => assert_eq!(part, "qp"),
            other => panic!("{other:?}"),
        }
        let mut g = Graph::new();
        let terms = LossTerms {
            hm: g.param(Tensor::scalar(1.0)),
            qp: g.param(Tensor::scalar(1.0)),
            cls: g.param(Tensor::scalar(1.0)),
            reg: g.param(Tensor::scalar(1.0)),
        };
        let (total, b) = total_loss(&mut g, terms, &w).unwrap();
        assert_eq!(g.item(total), 3.25);
        assert_eq!(b.total, 3.25);
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.get(terms.reg).unwrap().item(), 1.25);
    }
}
