use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, Graph, ParamId, Result, Tensor, TensorError};

/// Settings for a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many coordinates per leaf, sampled with `seed`.
    pub max_coords_per_leaf: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            max_coords_per_leaf: None,
            seed: 0,
        }
    }
}

/// Largest relative disagreement between backprop and central differences.
///
/// `f` builds a scalar from one parameter leaf per entry of `point`. The error for a
/// coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(f: F, point: &[Array], opts: &GradCheck) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>>,
{
    if !(opts.step > 0.0) {
        return Err(TensorError::Invalid {
            op: "check_gradients",
            msg: format!("step must be positive, got {}", opts.step),
        });
    }
    let eval = |pt: &[Array]| -> Result<f64> {
        let g = Graph::no_grad();
        let leaves: Vec<Tensor<'_>> = pt.iter().map(|a| g.constant(a)).collect();
        let out = f(&g, &leaves)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "check_gradients" });
        }
        Ok(v)
    };

    let g = Graph::new();
    let leaves: Vec<Tensor<'_>> = point
        .iter()
        .enumerate()
        .map(|(i, a)| g.param(ParamId(i), a))
        .collect();
    let loss = f(&g, &leaves)?;
    let table = g.backprop(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Array> = point.to_vec();
    let mut worst = 0.0f64;
    for (leaf, arr) in point.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_leaf {
            Some(m) if m < arr.len() => sample(&mut rng, arr.len(), m).into_vec(),
            _ => (0..arr.len()).collect(),
        };
        for c in coords {
            let analytic = table
                .get(ParamId(leaf))
                .map_or(0.0, |grad| grad.data()[c]);
            let orig = arr.data()[c];
            work[leaf].data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work[leaf].data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work[leaf].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
