use super::{Adam, EngineError, OneCycle, RunConfig};
use crate::disco::{training_loss, DiscoError, LossBreakdown};
use crate::featurize::{featurize, FeaturizedScenario};
use crate::model::{ModelError, ModelParams};
use crate::rng::SeededRng;
use crate::scenegen::{Scenario, Vocabulary};
use crate::tensor::{Graph, Tensor, TensorError};

/// Seed offset for the epoch shuffling stream, so it differs from the
/// parameter initialization stream.
const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Batch-mean losses for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<StepRecord>,
}

/// Featurizes every scenario for the grid in `cfg`.
pub fn prepare(scenarios: &[Scenario], cfg: &RunConfig) -> Result<Vec<FeaturizedScenario>, EngineError> {
    let vocab = Vocabulary::standard();
    scenarios
        .iter()
        .map(|s| featurize(s, &cfg.grid, &vocab).map_err(EngineError::from))
        .collect()
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn diverged(step: usize, err: DiscoError) -> EngineError {
    match err {
        DiscoError::NonFinite { .. }
        | DiscoError::Tensor(TensorError::NonFinite { .. })
        | DiscoError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
        | DiscoError::Model(ModelError::Geometry(_)) => EngineError::Divergence {
            step,
            detail: err.to_string(),
        },
        other => EngineError::Disco(other),
    }
}

pub fn train(data: &[FeaturizedScenario], cfg: &RunConfig) -> Result<TrainOutcome, EngineError> {
    train_with(data, cfg, &mut |_| {})
}

/// Mini-batch training; `on_step` sees every step record as it is produced.
/// Scenario gradients are summed in batch order, then averaged.
pub fn train_with(
    data: &[FeaturizedScenario],
    cfg: &RunConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome, EngineError> {
    if data.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    cfg.validate()?;
    let mcfg = cfg.model_config();
    let sup = cfg.supervision();
    let mut params = ModelParams::init(&mcfg, cfg.seed);
    let mut adam = Adam::new(params.tensors(), cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let schedule = OneCycle {
        total_steps: per_epoch * cfg.epochs,
        lr_max: cfg.lr_max,
        momentum_lo: cfg.momentum_lo,
        momentum_hi: cfg.momentum_hi,
    };
    let mut shuffler = SeededRng::new(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(schedule.total_steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        shuffler.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut parts = [0.0; 4];
            for &i in batch {
                let mut g = Graph::new();
                let bound = params.bind(&mut g);
                let out = training_loss(&mut g, &bound, &mcfg, &data[i], &sup).map_err(|e| diverged(step, e))?;
                let b = out.breakdown;
                for (acc, v) in parts.iter_mut().zip([b.hm, b.qp, b.cls, b.reg]) {
                    *acc += v;
                }
                let gr = g.backward(out.loss)?;
                for (acc, var) in grads.iter_mut().zip(bound.vars()) {
                    let gv = gr.get(*var).expect("parameters require grad");
                    acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                if !g.is_finite() {
                    return Err(EngineError::Divergence {
                        step,
                        detail: "non-finite gradient".into(),
                    });
                }
            }
            let loss = LossBreakdown::combine(parts.map(|p| p * scale), &cfg.weights)
                .map_err(|e| diverged(step, e))?;
            let (lr, beta1) = (schedule.lr(step), schedule.beta1(step));
            adam.step(params.tensors_mut(), &grads, lr, beta1);
            let record = StepRecord {
                step,
                epoch,
                lr,
                beta1,
                loss,
            };
            on_step(&record);
            curve.push(record);
            step += 1;
        }
    }
    Ok(TrainOutcome { params, curve })
}

/// Loss curve as CSV: `step,epoch,lr,hm,qp,cls,reg,total`.
pub fn curve_to_rows(curve: &[StepRecord]) -> String {
    let mut out = String::from("step,epoch,lr,hm,qp,cls,reg,total\n");
    for r in curve {
        let l = r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.epoch, r.lr, l.hm, l.qp, l.cls, l.reg, l.total
        ));
    }
    out
}
