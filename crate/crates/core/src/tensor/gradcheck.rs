use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many randomly chosen coordinates in total.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

fn evaluate<F, E>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()).into());
    }
    Ok(v.data()[0])
}

/// Max relative error between analytic and central-difference gradients over
/// every coordinate of every input.
/// The closure may fail with any error that wraps [`TensorError`].
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>]) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_sampled(f, inputs, GradCheckConfig::default())
}

/// Like [`grad_check`], optionally restricted to a random subset of coordinates.
///
/// The error of one coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check_sampled<F, E>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
        .collect();
    let chosen: Vec<(usize, usize)> = match cfg.max_coords {
        Some(limit) if limit < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut picked = sample(&mut rng, coords.len(), limit).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, k) in chosen {
        let x0 = probe[i].data()[k];
        probe[i].data_mut()[k] = x0 + cfg.h;
        let up = evaluate(&f, &probe)?;
        probe[i].data_mut()[k] = x0 - cfg.h;
        let down = evaluate(&f, &probe)?;
        probe[i].data_mut()[k] = x0;
        let numeric = (up - down) / (2.0 * cfg.h);
        let a = analytic[i].data()[k];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new([2, 3], vec![0.3, -1.2, 2.5, 0.0, 4.0, -0.7]).unwrap();
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|g, v| g.relu(v[0]), &[x]).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss(_)));
    }
}
