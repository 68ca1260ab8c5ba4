//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Magnitude below which gradient entries are compared absolutely.
pub const REL_FLOOR: f64 = 1e-2;

/// Compares tape gradients of every input against central differences.
///
/// The graph built by `build` is reduced to a scalar by a fixed random
/// weighting of its output, so every output element contributes.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'static, f64>, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::<f64>::rand_uniform(tape.shape(out), 0.5, 1.5, &mut rng)
    };

    let loss_of = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        let s = tape.sum(prod);
        Ok(tape.value(s).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let s = tape.sum(prod);
    tape.backward(s);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let analytic = tape.grad(v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = loss_of(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = loss_of(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_err = report.max_rel_err.max((a - numeric).abs() / denom);
            report.checked += 1;
        }
    }
    Ok(report)
}
