//! Central finite-difference gradient checking. The numeric side only reuses
//! the forward pass, so it is an independent oracle for every backward rule.

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Default step for f64 central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct CheckSettings {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            step: DEFAULT_STEP,
            rtol: 1e-4,
            atol: 1e-8,
        }
    }
}

impl CheckSettings {
    pub fn with_rtol(rtol: f64) -> Self {
        CheckSettings {
            rtol,
            ..Default::default()
        }
    }
}

/// Verify the analytic gradient of a scalar-valued function against central
/// finite differences, elementwise over every entry of every parameter.
///
/// `f` must be deterministic: if it samples randomness it has to derive it
/// from a fixed seed so repeated evaluations see identical noise.
pub fn check_gradients<F>(params: &[Tensor], f: F, settings: CheckSettings) -> Result<()>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    // Analytic pass.
    let tracked: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::param(p.data().to_vec(), p.shape()))
        .collect::<Result<_>>()?;
    let mut g = Graph::new();
    let loss = f(&mut g, &tracked)?;
    if loss.numel() != 1 {
        return Err(Error::contract("gradcheck needs a scalar function"));
    }
    g.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // Numeric pass: perturb one element at a time.
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let ts: Vec<Tensor> = values
            .iter()
            .zip(params)
            .map(|(v, p)| Tensor::from_vec(v.clone(), p.shape()))
            .collect::<Result<_>>()?;
        let mut g = Graph::inference();
        f(&mut g, &ts)?.item()
    };

    let mut values: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();
    for pi in 0..params.len() {
        for ei in 0..values[pi].len() {
            let orig = values[pi][ei];
            values[pi][ei] = orig + settings.step;
            let up = eval(&values)?;
            values[pi][ei] = orig - settings.step;
            let down = eval(&values)?;
            values[pi][ei] = orig;

            let numeric = (up - down) / (2.0 * settings.step);
            let a = analytic[pi][ei];
            let tol = settings.atol + settings.rtol * a.abs().max(numeric.abs());
            if (a - numeric).abs() > tol {
                return Err(Error::numeric(format!(
                    "gradient mismatch at param {pi} element {ei}: analytic {a:.9e}, \
                     finite-diff {numeric:.9e} (tol {tol:.3e})"
                )));
            }
        }
    }
    Ok(())
}
