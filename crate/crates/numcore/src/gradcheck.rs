//! Central finite-difference checks for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::{Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Probe at most this many entries per input (all when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

impl GradCheck {
    /// Relative error between analytic and numeric gradients for each input.
    /// `f` must map the inputs to a scalar.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<Vec<f64>>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let eval = |values: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
            Ok(f(&tape, &vars)?.value().item())
        };
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        let mut errors = Vec::with_capacity(inputs.len());
        let mut probe = inputs.to_vec();
        for (i, var) in vars.iter().enumerate() {
            let n = inputs[i].numel();
            let analytic_full = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            let entries: Vec<usize> = match self.max_entries {
                Some(k) if k < n => {
                    let mut e = sample(&mut rng, n, k).into_vec();
                    e.sort_unstable();
                    e
                }
                _ => (0..n).collect(),
            };
            let mut analytic = Vec::with_capacity(entries.len());
            let mut numeric = Vec::with_capacity(entries.len());
            for &e in &entries {
                let orig = probe[i].data()[e];
                probe[i].data_mut()[e] = orig + self.step;
                let plus = eval(&probe)?;
                probe[i].data_mut()[e] = orig - self.step;
                let minus = eval(&probe)?;
                probe[i].data_mut()[e] = orig;
                numeric.push((plus - minus) / (2.0 * self.step));
                analytic.push(analytic_full.data()[e]);
            }
            errors.push(relative_error(&analytic, &numeric));
        }
        Ok(errors)
    }
}

/// Scalar `sum(out * weights)` with fixed pseudo-random weights, used to
/// reduce a tensor-valued op to a scalar for checking.
pub fn random_projection<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng);
    out.mul(out.tape().constant(w)).map(Var::sum)
}
