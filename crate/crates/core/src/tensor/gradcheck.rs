use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

fn eval<F>(f: &F, params: &[Tensor<f64>], trainable: bool) -> Result<(Graph<f64>, Vec<Var>, Var), TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over every parameter element.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j))).collect();
    check_coords(&f, params, eps, &coords)
}

/// Like [`grad_check`] but only at `max_coords` randomly chosen elements.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let all: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = if all.len() <= max_coords {
        all
    } else {
        let mut idx = sample(&mut rng, all.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    };
    check_coords(&f, params, eps, &picked)
}

fn check_coords<F>(f: &F, params: &[Tensor<f64>], eps: f64, coords: &[(usize, usize)]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let (g, vars, out) = eval(f, params, true)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();
    let mut worst: f64 = 0.0;
    let mut perturbed = params.to_vec();
    for &(i, j) in coords {
        let orig = params[i].data()[j];
        perturbed[i].data_mut()[j] = orig + eps;
        let (gp, _, op) = eval(f, &perturbed, false)?;
        let plus = gp.value(op).item();
        perturbed[i].data_mut()[j] = orig - eps;
        let (gm, _, om) = eval(f, &perturbed, false)?;
        let minus = gm.value(om).item();
        perturbed[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i].data()[j], numeric);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(worst)
}
