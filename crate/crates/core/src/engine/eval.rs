use super::{EngineError, RunConfig};
use crate::featurize::FeaturizedScenario;
use crate::geometry::{iou_3d, iou_bev, Box3D};
use crate::model::{infer, ModelParams};
use crate::scenegen::Category;
use serde::Serialize;
use std::fmt::Write as _;

/// IoU thresholds; a prediction at exactly the threshold counts as correct.
pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];

/// Accuracy percentages at [`THRESHOLDS`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Accuracy {
    pub bev: [f64; 2],
    pub d3: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: Category,
    pub count: usize,
    pub accuracy: Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenarios: usize,
    pub overall: Accuracy,
    /// Only categories that occur as targets, in category order.
    pub per_category: Vec<CategoryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredPrediction {
    pub id: String,
    pub category: Category,
    pub prediction: Box3D,
    pub probability: f64,
    pub iou_bev: f64,
    pub iou_3d: f64,
}

fn accuracy(items: &[&ScoredPrediction]) -> Accuracy {
    let pct = |hits: usize| {
        if items.is_empty() {
            0.0
        } else {
            100.0 * hits as f64 / items.len() as f64
        }
    };
    let count = |f: &dyn Fn(&ScoredPrediction) -> f64, t: f64| items.iter().filter(|p| f(p) >= t).count();
    Accuracy {
        bev: THRESHOLDS.map(|t| pct(count(&|p| p.iou_bev, t))),
        d3: THRESHOLDS.map(|t| pct(count(&|p| p.iou_3d, t))),
    }
}

/// Aggregates scored predictions into overall and per-category accuracy.
pub fn report_from_predictions(preds: &[ScoredPrediction]) -> EvalReport {
    let all: Vec<&ScoredPrediction> = preds.iter().collect();
    let per_category = Category::ALL
        .iter()
        .filter_map(|c| {
            let rows: Vec<&ScoredPrediction> = preds.iter().filter(|p| p.category == *c).collect();
            (!rows.is_empty()).then(|| CategoryRow {
                category: *c,
                count: rows.len(),
                accuracy: accuracy(&rows),
            })
        })
        .collect();
    EvalReport {
        scenarios: preds.len(),
        overall: accuracy(&all),
        per_category,
    }
}

/// Runs inference on every scenario and scores it against the target box.
/// Only pillar statistics and tokens reach the model.
pub fn evaluate(
    data: &[FeaturizedScenario],
    params: &ModelParams,
    cfg: &RunConfig,
) -> Result<(EvalReport, Vec<ScoredPrediction>), EngineError> {
    let mcfg = cfg.model_config();
    mcfg.validate()?;
    let mut preds = Vec::with_capacity(data.len());
    for s in data {
        let p = infer(params, &mcfg, &s.stats, &s.tokens)?;
        let gt = s.target_box();
        preds.push(ScoredPrediction {
            id: s.id.clone(),
            category: s.target_category(),
            prediction: p.bbox,
            probability: p.probability,
            iou_bev: iou_bev(&p.bbox, gt),
            iou_3d: iou_3d(&p.bbox, gt),
        });
    }
    Ok((report_from_predictions(&preds), preds))
}

#[derive(Serialize)]
struct ReportLine<'a> {
    scope: &'a str,
    count: usize,
    #[serde(rename = "bev@0.25")]
    bev25: f64,
    #[serde(rename = "bev@0.5")]
    bev50: f64,
    #[serde(rename = "3d@0.25")]
    d325: f64,
    #[serde(rename = "3d@0.5")]
    d350: f64,
}

impl EvalReport {
    fn lines(&self) -> Vec<ReportLine<'_>> {
        let line = |scope, count, a: &Accuracy| ReportLine {
            scope,
            count,
            bev25: a.bev[0],
            bev50: a.bev[1],
            d325: a.d3[0],
            d350: a.d3[1],
        };
        std::iter::once(line("overall", self.scenarios, &self.overall))
            .chain(
                self.per_category
                    .iter()
                    .map(|r| line(r.category.name(), r.count, &r.accuracy)),
            )
            .collect()
    }

    /// One JSON object per line: overall first, then each category.
    pub fn to_jsonl(&self) -> String {
        self.lines()
            .iter()
            .map(|l| serde_json::to_string(l).expect("plain data") + "\n")
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>10} {:>10} {:>10} {:>10}",
            "scope", "count", "BEV@0.25", "BEV@0.5", "3D@0.25", "3D@0.5"
        );
        for l in self.lines() {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
                l.scope, l.count, l.bev25, l.bev50, l.d325, l.d350
            );
        }
        out
    }
}
