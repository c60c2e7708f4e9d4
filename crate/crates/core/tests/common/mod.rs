//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod oracle;

use bootmae::tensor::{Graph, Tensor, Var};
use bootmae::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of a scalar function over every element of
/// every input, compared against the tape's gradients. Returns the worst
/// relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vars).expect("forward").value().item()
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = f(&g, &vars).expect("forward");
    g.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = v.grad().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Contracts `y` against a fixed random tensor so every output element
/// carries a distinct upstream gradient.
pub fn project<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = randn(&y.shape(), &mut rng(seed));
    Ok(y.mul(y.graph().constant(w))?.sum_all())
}
