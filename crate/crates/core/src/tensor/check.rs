use super::{Graph, Result, Tensor, TensorError, Var};

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function at the coordinates in `indices`
/// (all coordinates when `None`). Unlisted coordinates are left at zero.
pub fn numeric_gradient<F>(
    mut eval: F,
    x: &Tensor,
    step: f64,
    indices: Option<&[usize]>,
) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let all: Vec<usize>;
    let coords = match indices {
        Some(ix) => ix,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// Max relative error between the autograd gradient of `f` at `x` and its
/// central-difference estimate with half-width `step`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(xv).expect("param requires grad").data().to_vec();
    let numeric = numeric_gradient(
        |probe| {
            let mut g = Graph::new();
            let xv = g.constant(probe.clone());
            let y = f(&mut g, xv)?;
            Ok(g.item(y))
        },
        x,
        step,
        None,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}
