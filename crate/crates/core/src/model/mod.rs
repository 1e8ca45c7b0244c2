//! The grounding network: BEV encoder, heatmap-driven token selection,
//! cross-modal encoder, query proposal, decoder and per-query heads.

mod params;
mod select;

pub use params::{Bound, ModelParams, FOCAL_BIAS_INIT};
pub use select::{rank_select, QuerySet, SelectedFeatures};

use crate::featurize::{embed_text, pillarize, GridSpec, PillarWeights};
use crate::geometry::{Box3D, GeometryError};
use crate::scenegen::{TokenBatch, VocabularyError};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use std::f64::consts::PI;
use thiserror::Error;

/// Probabilities feeding a log are kept this far from 0 and 1.
pub const PROB_EPS: f64 = 1e-4;
const LN_EPS: f64 = 1e-5;
const LOG_SIZE_LIMIT: f64 = 5.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: GridSpec,
    pub d: usize,
    /// Visual tokens kept by selection.
    pub v: usize,
    /// Decoder queries.
    pub k: usize,
    pub n_e: usize,
    pub n_d: usize,
    pub heads: usize,
    /// Heatmap-driven selection; when off every cell is a visual token.
    pub ofs: bool,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (h, w) = self
            .grid
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let cfg = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return cfg(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.d % 4 != 0 {
            return cfg(format!("d={} must be a multiple of 4", self.d));
        }
        if self.vocab_size == 0 || self.max_tokens == 0 {
            return cfg("vocabulary and token limit must be positive".into());
        }
        let tokens = self.visual_tokens();
        if self.ofs && (self.v == 0 || self.v > h * w) {
            return cfg(format!("V={} must be in 1..={} (h·w)", self.v, h * w));
        }
        if self.k == 0 || self.k > tokens {
            return cfg(format!("K={} must be in 1..={tokens} (visual tokens)", self.k));
        }
        Ok(())
    }

    /// Number of visual tokens entering the encoder.
    pub fn visual_tokens(&self) -> usize {
        if self.ofs {
            self.v
        } else {
            self.grid.num_cells()
        }
    }
}

/// Training-time shortcuts; inference uses [`Injection::NONE`].
#[derive(Debug, Clone, Copy)]
pub struct Injection<'a> {
    /// Cells forced into the visual selection (all object centers).
    pub centers: Option<&'a [usize]>,
    /// Cell whose token is forced into the queries (the target center).
    pub target_cell: Option<usize>,
}

impl Injection<'_> {
    pub const NONE: Injection<'static> = Injection {
        centers: None,
        target_cell: None,
    };
}

/// Graph handles and bookkeeping from one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Predicted heatmap `[h, w, C]`, absent when selection is off.
    pub heatmap: Option<Var>,
    pub selected: SelectedFeatures,
    /// Text-aligned visual tokens `[v, d]`.
    pub f_tv: Var,
    /// Visually aligned text tokens `[l, d]`.
    pub f_vt: Var,
    /// Proposal confidence per visual token `[v]`.
    pub confidences: Var,
    pub queries: QuerySet,
    /// Target probability per query `[K]`.
    pub probs: Var,
    /// Box parameters per query `[K, 8]`.
    pub regression: Var,
}

/// 2-D sinusoidal embeddings `[n, d]` of cell centers, in meters. Half the
/// channels encode x, half y; wavelengths are geometric from two cells to
/// twice the grid span.
pub fn sinusoid_embedding(grid: &GridSpec, cells: &[usize], d: usize) -> Tensor {
    let quarter = d / 4;
    let lo = 2.0 * grid.voxel[0].max(grid.voxel[1]);
    let span = (grid.x_range.1 - grid.x_range.0).max(grid.y_range.1 - grid.y_range.0);
    let hi = 2.0 * span;
    let wavelength = |i: usize| {
        if quarter <= 1 {
            lo
        } else {
            lo * (hi / lo).powf(i as f64 / (quarter - 1) as f64)
        }
    };
    let mut data = Vec::with_capacity(cells.len() * d);
    for &cell in cells {
        let c = grid.cell_center(grid.unflat(cell));
        for coord in c {
            for i in 0..quarter {
                let a = 2.0 * PI * coord / wavelength(i);
                data.push(a.sin());
                data.push(a.cos());
            }
        }
    }
    Tensor::new(vec![cells.len(), d], data).expect("4·quarter == d")
}

/// Ground-truth regression vector for `b` relative to the anchor at `at`:
/// (Δx, Δy, cz, ln l, ln w, ln h, sin yaw, cos yaw).
pub fn encode_box(b: &Box3D, at: [f64; 2]) -> [f64; 8] {
    [
        b.cx - at[0],
        b.cy - at[1],
        b.cz,
        b.l.ln(),
        b.w.ln(),
        b.h.ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Box from a regression vector anchored at `at`. Log-sizes are clamped to
/// ±5 so a wild prediction still yields a valid box.
pub fn decode_box(r: &[f64], at: [f64; 2]) -> Result<Box3D, GeometryError> {
    let size = |v: f64| v.clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
    Box3D::new(
        [at[0] + r[0], at[1] + r[1], r[2]],
        [size(r[3]), size(r[4]), size(r[5])],
        r[6].atan2(r[7]),
    )
}

fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, p.get(&format!("{prefix}.w")))?;
    g.add_bias(y, p.get(&format!("{prefix}.b")))
}

fn mlp2(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let hidden = linear(g, p, &format!("{prefix}.1"), x)?;
    let hidden = g.relu(hidden)?;
    linear(g, p, &format!("{prefix}.2"), hidden)
}

fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
    g.layer_norm(x, p.get(&format!("{prefix}.g")), p.get(&format!("{prefix}.b")), LN_EPS)
}

fn probability(g: &mut Graph, logits: Var) -> Result<Var, TensorError> {
    let s = g.sigmoid(logits)?;
    g.clamp(s, PROB_EPS, 1.0 - PROB_EPS)
}

/// Multi-head attention sublayer with residual and layer norm:
/// `LN(x + Wo·MHA(q_in, k_in, v_in))`. Returns the output and per-head weights.
#[allow(clippy::too_many_arguments)]
fn attention_block(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    heads: usize,
    x: Var,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>), TensorError> {
    let q = linear(g, p, &format!("{prefix}.q"), q_in)?;
    let k = g.matmul(k_in, p.get(&format!("{prefix}.k.w")))?;
    let v = linear(g, p, &format!("{prefix}.v"), v_in)?;
    let d = g.shape(q)[1];
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let (o, wts) = g.attention(qh, kh, vh, key_mask)?;
        outs.push(o);
        weights.push(wts);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let projected = linear(g, p, &format!("{prefix}.o"), merged)?;
    let sum = g.add(x, projected)?;
    Ok((norm(g, p, &format!("{prefix}.ln"), sum)?, weights))
}

fn ffn_block(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let y = mlp2(g, p, prefix, x)?;
    let sum = g.add(x, y)?;
    norm(g, p, &format!("{prefix}.ln"), sum)
}

fn pillar_weights(p: &Bound) -> PillarWeights {
    PillarWeights {
        lin_w: p.get("pillar.lin.w"),
        lin_b: p.get("pillar.lin.b"),
        conv1_w: p.get("pillar.conv1.w"),
        conv1_b: p.get("pillar.conv1.b"),
        conv2_w: p.get("pillar.conv2.w"),
        conv2_b: p.get("pillar.conv2.b"),
    }
}

/// Heatmap head `[h, w, d] → [h, w, C]` probabilities.
pub fn heatmap_head(g: &mut Graph, p: &Bound, f_bev: Var) -> Result<Var, TensorError> {
    let x = g.conv2d(f_bev, p.get("heatmap.conv.w"))?;
    let x = g.add_bias(x, p.get("heatmap.conv.b"))?;
    let x = g.relu(x)?;
    let x = g.conv2d(x, p.get("heatmap.out.w"))?;
    let x = g.add_bias(x, p.get("heatmap.out.b"))?;
    probability(g, x)
}

/// Per-cell selection score: max over category channels of an `[h, w, C]`
/// heatmap, row-major.
pub fn cell_scores(heatmap: &Tensor) -> Vec<f64> {
    let c = *heatmap.shape().last().unwrap_or(&1);
    heatmap
        .data()
        .chunks(c)
        .map(|ch| ch.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Keeps `v` BEV cells: forced `centers` first, then the highest heatmap
/// scores (ties by smaller cell index). Returns token features `[v, d]`.
pub fn ofs_select(
    g: &mut Graph,
    p: &Bound,
    f_bev: Var,
    v: usize,
    centers: Option<&[usize]>,
) -> Result<(Var, SelectedFeatures, Var), ModelError> {
    let shape = g.shape(f_bev).to_vec();
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    if v > h * w {
        return Err(ModelError::Config(format!("V={v} exceeds h·w={}", h * w)));
    }
    let hm = heatmap_head(g, p, f_bev)?;
    let scores = cell_scores(g.value(hm));
    let keys: Vec<usize> = (0..h * w).collect();
    let forced = centers.unwrap_or(&[]);
    let positions = rank_select(&scores, &keys, v, forced)?;
    let injected = {
        let mut seen = Vec::new();
        for f in forced {
            if !seen.contains(f) {
                seen.push(*f);
            }
        }
        seen.len().min(v)
    };
    let flat = g.reshape(f_bev, &[h * w, d])?;
    let feats = g.gather_rows(flat, &positions)?;
    let selected = SelectedFeatures {
        scores: positions.iter().map(|c| scores[*c]).collect(),
        positions,
        injected,
    };
    Ok((feats, selected, hm))
}

/// Cross-modal encoder. Returns `(F_TV [v, d], F_VT [l, d])`.
/// Positional embeddings join the token stream at the start of every layer,
/// so attention values carry position as well as keys.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    f_v: Var,
    positions: &[usize],
    f_t: Var,
    text_mask: &[bool],
) -> Result<(Var, Var), ModelError> {
    let l = g.shape(f_t)[0];
    if l > cfg.max_tokens {
        return Err(ModelError::Config(format!(
            "{l} text tokens exceed the limit of {}",
            cfg.max_tokens
        )));
    }
    let pv = g.constant(sinusoid_embedding(&cfg.grid, positions, cfg.d));
    let pt = g.slice(p.get("text.pos"), 0, 0, l)?;
    let (mut fv, mut ft) = (f_v, f_t);
    let h = cfg.heads;
    for e in 0..cfg.n_e {
        let pre = format!("enc{e}");
        let vx = g.add(fv, pv)?;
        let tx = g.add(ft, pt)?;
        let (v1, _) = attention_block(g, p, &format!("{pre}.vself"), h, vx, vx, vx, vx, None)?;
        let (t1, _) =
            attention_block(g, p, &format!("{pre}.tself"), h, tx, tx, tx, tx, Some(text_mask))?;
        let (v2, _) =
            attention_block(g, p, &format!("{pre}.v2t"), h, v1, v1, t1, t1, Some(text_mask))?;
        let (t2, _) = attention_block(g, p, &format!("{pre}.t2v"), h, t1, t1, v1, v1, None)?;
        fv = ffn_block(g, p, &format!("{pre}.vffn"), v2)?;
        ft = ffn_block(g, p, &format!("{pre}.tffn"), t2)?;
    }
    Ok((fv, ft))
}

/// Scores every visual token and seeds `k` queries from the most confident
/// ones; `target_cell`, when given, is forced in first. Returns
/// `(queries [K, d], query set, confidences [v])`.
pub fn propose_queries(
    g: &mut Graph,
    p: &Bound,
    f_tv: Var,
    positions: &[usize],
    k: usize,
    target_cell: Option<usize>,
) -> Result<(Var, QuerySet, Var), ModelError> {
    let v = g.shape(f_tv)[0];
    if k > v {
        return Err(ModelError::Config(format!("K={k} exceeds the {v} visual tokens")));
    }
    let logits = mlp2(g, p, "proposal", f_tv)?;
    let conf = probability(g, logits)?;
    let conf = g.reshape(conf, &[v])?;
    let forced: Vec<usize> = target_cell
        .and_then(|cell| positions.iter().position(|c| *c == cell))
        .into_iter()
        .collect();
    let tokens = rank_select(g.value(conf).data(), positions, k, &forced)?;
    let picked = g.gather_rows(f_tv, &tokens)?;
    let queries = linear(g, p, "query.proj", picked)?;
    let set = QuerySet {
        positions: tokens.iter().map(|t| positions[*t]).collect(),
        injected_target: (!forced.is_empty()).then_some(0),
        tokens,
    };
    Ok((queries, set, conf))
}

/// Decoder: per layer, query self-attention, cross-attention to F_VT then
/// F_TV, feed-forward. Query positional embeddings stay at the seed cells and
/// join the stream each layer; the visual lookup also matches them against
/// cell embeddings on the keys.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    queries: Var,
    query_cells: &[usize],
    f_vt: Var,
    f_tv: Var,
    visual_cells: &[usize],
    text_mask: &[bool],
) -> Result<Var, ModelError> {
    if cfg.n_d == 0 {
        return Ok(queries);
    }
    let pq = g.constant(sinusoid_embedding(&cfg.grid, query_cells, cfg.d));
    let pv = g.constant(sinusoid_embedding(&cfg.grid, visual_cells, cfg.d));
    let l = g.shape(f_vt)[0];
    let pt = g.slice(p.get("text.pos"), 0, 0, l)?;
    let text_keys = g.add(f_vt, pt)?;
    let visual_keys = g.add(f_tv, pv)?;
    let h = cfg.heads;
    let mut q = queries;
    for layer in 0..cfg.n_d {
        let pre = format!("dec{layer}");
        let qx = g.add(q, pq)?;
        q = attention_block(g, p, &format!("{pre}.self"), h, qx, qx, qx, qx, None)?.0;
        q = attention_block(g, p, &format!("{pre}.text"), h, q, q, text_keys, f_vt, Some(text_mask))?.0;
        let qp = g.add(q, pq)?;
        q = attention_block(g, p, &format!("{pre}.visual"), h, q, qp, visual_keys, f_tv, None)?.0;
        q = ffn_block(g, p, &format!("{pre}.ffn"), q)?;
    }
    Ok(q)
}

/// Per-query target probability `[K]` and box parameters `[K, 8]`.
pub fn heads(g: &mut Graph, p: &Bound, refined: Var) -> Result<(Var, Var), ModelError> {
    let k = g.shape(refined)[0];
    let logits = mlp2(g, p, "ident", refined)?;
    let probs = probability(g, logits)?;
    let probs = g.reshape(probs, &[k])?;
    let reg = mlp2(g, p, "reg", refined)?;
    Ok((probs, reg))
}

/// Full forward pass on one scenario's precomputed pillar statistics and
/// tokens.
pub fn forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    stats: &Tensor,
    tokens: &TokenBatch,
    injection: Injection<'_>,
) -> Result<Forward, ModelError> {
    let stats = g.constant(stats.clone());
    let f_bev = pillarize(g, stats, &pillar_weights(p))?;
    let (f_v, selected, heatmap) = if cfg.ofs {
        let (f, s, hm) = ofs_select(g, p, f_bev, cfg.v, injection.centers)?;
        (f, s, Some(hm))
    } else {
        let shape = g.shape(f_bev).to_vec();
        let n = shape[0] * shape[1];
        let f = g.reshape(f_bev, &[n, shape[2]])?;
        let s = SelectedFeatures {
            positions: (0..n).collect(),
            scores: Vec::new(),
            injected: 0,
        };
        (f, s, None)
    };
    let f_t = embed_text(g, tokens, p.get("text.embed"))?;
    let (f_tv, f_vt) = encode(g, p, cfg, f_v, &selected.positions, f_t, &tokens.mask)?;
    let (queries, query_set, confidences) =
        propose_queries(g, p, f_tv, &selected.positions, cfg.k, injection.target_cell)?;
    let refined = decode(
        g,
        p,
        cfg,
        queries,
        &query_set.positions,
        f_vt,
        f_tv,
        &selected.positions,
        &tokens.mask,
    )?;
    let (probs, regression) = heads(g, p, refined)?;
    Ok(Forward {
        heatmap,
        selected,
        f_tv,
        f_vt,
        confidences,
        queries: query_set,
        probs,
        regression,
    })
}

/// Decoded boxes for every query of a forward pass.
pub fn query_boxes(g: &Graph, cfg: &ModelConfig, out: &Forward) -> Result<Vec<Box3D>, ModelError> {
    let reg = g.value(out.regression);
    out.queries
        .positions
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let at = cfg.grid.cell_center(cfg.grid.unflat(*cell));
            decode_box(reg.row(i), at).map_err(ModelError::from)
        })
        .collect()
}

/// Index of the highest value, ties to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Prediction for one scenario: the box of the most probable query, with no
/// training-time injection.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bbox: Box3D,
    pub probability: f64,
    pub query_cell: usize,
}

pub fn infer(
    params: &ModelParams,
    cfg: &ModelConfig,
    stats: &Tensor,
    tokens: &TokenBatch,
) -> Result<Prediction, ModelError> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let out = forward(&mut g, &p, cfg, stats, tokens, Injection::NONE)?;
    let probs = g.value(out.probs).data();
    let best = argmax(probs);
    let boxes = query_boxes(&g, cfg, &out)?;
    Ok(Prediction {
        bbox: boxes[best],
        probability: probs[best],
        query_cell: out.queries.positions[best],
    })
}
