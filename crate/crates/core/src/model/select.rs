use super::ModelError;
use std::cmp::Ordering;

/// Picks `count` slots: every slot in `forced` first (in the given order,
/// duplicates ignored), then the rest by descending score with ties going to
/// the smaller `tie_key`. Returns slot indices in selection order.
pub fn rank_select(
    scores: &[f64],
    tie_key: &[usize],
    count: usize,
    forced: &[usize],
) -> Result<Vec<usize>, ModelError> {
    let n = scores.len();
    if tie_key.len() != n {
        return Err(ModelError::Config(format!(
            "{} scores but {} tie keys",
            n,
            tie_key.len()
        )));
    }
    if count > n {
        return Err(ModelError::Config(format!(
            "cannot select {count} of {n} candidates"
        )));
    }
    if let Some(bad) = forced.iter().find(|f| **f >= n) {
        return Err(ModelError::Config(format!(
            "forced slot {bad} out of range for {n} candidates"
        )));
    }
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(count);
    for &f in forced {
        if out.len() == count {
            break;
        }
        if !taken[f] {
            taken[f] = true;
            out.push(f);
        }
    }
    let mut order: Vec<usize> = (0..n).filter(|i| !taken[*i]).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(tie_key[a].cmp(&tie_key[b]))
    });
    out.extend(order.into_iter().take(count - out.len()));
    Ok(out)
}

/// Visual tokens kept by the selection stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedFeatures {
    /// Flat BEV cell per token.
    pub positions: Vec<usize>,
    /// Heatmap score per token (max over categories); empty when every cell
    /// is kept without scoring.
    pub scores: Vec<f64>,
    /// The first `injected` tokens were forced in rather than ranked.
    pub injected: usize,
}

/// Decoder queries: which tokens seeded them and where they sit.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    /// Index into the selected tokens per query.
    pub tokens: Vec<usize>,
    /// Flat BEV cell per query.
    pub positions: Vec<usize>,
    /// Query seeded from the forced target token, if one was forced.
    pub injected_target: Option<usize>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}
