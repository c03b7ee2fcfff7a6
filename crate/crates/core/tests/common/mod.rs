//! Helpers shared by the integration tests and the acceptance report.
#![allow(dead_code)]

pub mod criteria;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use seenflow::tensor::{Graph, Tensor, TensorError, Var};
use seenflow::voxgrid::{DenseTsdfBlock, VoxelMask};

pub type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

/// One grad-check case: a scalar function of `inputs`.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

/// Normal samples pushed at least 0.05 away from zero, for ops with a kink
/// at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let x: f64 = rng.sample(StandardNormal);
        x.signum() * (x.abs() + 0.05)
    })
}

/// Contracts an op output with fixed random weights so every output element
/// reaches the loss with a distinct coefficient.
fn contract(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let w = normal(&mut rng, g.shape(out));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, seed: u64, op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(move |g, v| {
            let out = op(g, v)?;
            contract(g, out, seed)
        }),
    }
}

/// Every differentiable op with shapes drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (m, k, n) = (dim(1, 5), dim(1, 5), dim(1, 5));
    let rows = dim(2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut t = |shape: &[usize]| normal(&mut rng, shape);
    let a_mk = t(&[m, k]);
    let b_kn = t(&[k, n]);
    let x = t(&[m, n]);
    let y = t(&[m, n]);
    let row = t(&[n]);
    let x3 = t(&[m, k, n]);
    let s = t(&[rows, n]);
    let fill = t(&[n]);
    let bias = t(&[n]);
    // feature axis of at least four so the variance stays well above eps
    let wide = t(&[m, n + 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let kinked = away_from_zero(&mut rng, &[m, n]);
    let index: Arc<Vec<u32>> = Arc::new((0..rows + 2).map(|_| rng.random_range(0..rows as u32)).collect());
    let keep: Arc<Vec<bool>> = Arc::new((0..rows).map(|_| rng.random_bool(0.5)).collect());
    let scalar: f64 = rng.sample(StandardNormal);
    let start = rng.random_range(0..n);
    let len = rng.random_range(1..=n - start);
    let axis = rng.random_range(0..3usize);
    let (gi, si, ki) = (index.clone(), index.clone(), keep.clone());
    let scatter_rows = rows + 1;
    vec![
        case("matmul", vec![a_mk.clone(), b_kn.clone()], seed, |g, v| g.matmul(v[0], v[1])),
        case("transpose", vec![x.clone()], seed, |g, v| g.transpose(v[0])),
        case("add", vec![x.clone(), y.clone()], seed, |g, v| g.add(v[0], v[1])),
        case("sub", vec![x.clone(), y.clone()], seed, |g, v| g.sub(v[0], v[1])),
        case("mul", vec![x.clone(), y.clone()], seed, |g, v| g.mul(v[0], v[1])),
        case("add_row", vec![x.clone(), row.clone()], seed, |g, v| g.add_row(v[0], v[1])),
        case("mul_row", vec![x.clone(), row.clone()], seed, |g, v| g.mul_row(v[0], v[1])),
        case("scale", vec![x.clone()], seed, move |g, v| Ok(g.scale(v[0], scalar))),
        case("add_scalar", vec![x.clone()], seed, move |g, v| Ok(g.add_scalar(v[0], scalar))),
        case("silu", vec![x.clone()], seed, |g, v| Ok(g.silu(v[0]))),
        case("tanh", vec![x.clone()], seed, |g, v| Ok(g.tanh(v[0]))),
        case("exp", vec![x.clone()], seed, |g, v| Ok(g.exp(v[0]))),
        case("softplus", vec![x.clone()], seed, |g, v| Ok(g.softplus(v[0]))),
        case("abs", vec![kinked.clone()], seed, |g, v| Ok(g.abs(v[0]))),
        case("square", vec![x.clone()], seed, |g, v| Ok(g.square(v[0]))),
        case("relu", vec![kinked], seed, |g, v| Ok(g.relu(v[0]))),
        case("softmax", vec![x3.clone()], seed, move |g, v| g.softmax(v[0], axis)),
        case("layer_norm", vec![wide], seed, |g, v| g.layer_norm(v[0], 1e-5)),
        case("sum", vec![x3.clone()], seed, move |g, v| g.sum(v[0], axis)),
        case("mean", vec![x3.clone()], seed, move |g, v| g.mean(v[0], axis)),
        case("sum_all", vec![x.clone()], seed, |g, v| Ok(g.sum_all(v[0]))),
        case("mean_all", vec![x.clone()], seed, |g, v| Ok(g.mean_all(v[0]))),
        case("gather_rows", vec![s.clone()], seed, move |g, v| g.gather_rows(v[0], gi.clone())),
        case("scatter_add_rows", vec![t_rows(&s, index.len(), seed)], seed, move |g, v| {
            g.scatter_add_rows(v[0], si.clone(), scatter_rows)
        }),
        case("select_rows", vec![s.clone(), fill], seed, move |g, v| g.select_rows(v[0], v[1], ki.clone())),
        case("concat", vec![x.clone(), y.clone(), x3.clone()], seed, |g, v| {
            let s = g.shape(v[2]).to_vec();
            let flat = g.reshape(v[2], [s[0], s[1] * s[2]])?;
            g.concat(&[v[0], v[1], flat], 1)
        }),
        case("narrow", vec![x.clone()], seed, move |g, v| g.narrow(v[0], 1, start, len)),
        case("reshape", vec![x3.clone()], seed, |g, v| {
            let n = g.shape(v[0]).iter().product::<usize>();
            g.reshape(v[0], [n])
        }),
        case("linear", vec![a_mk, b_kn, bias], seed, |g, v| g.linear(v[0], v[1], Some(v[2]))),
    ]
}

fn t_rows(like: &Tensor<f64>, rows: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    normal(&mut rng, &[rows, like.shape()[1]])
}

/// Dense block with random classes, about a quarter of them Unknown.
pub fn random_block(shape: [usize; 3], truncation: f32, seed: u64) -> DenseTsdfBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = DenseTsdfBlock::unknown([0; 3], shape, truncation);
    for i in 0..b.len() {
        let u: f64 = rng.random();
        let class = if u < 0.25 {
            VoxelMask::Unknown
        } else if u < 0.6 {
            VoxelMask::Empty
        } else {
            VoxelMask::Surface
        };
        let v = rng.random_range(-0.95..0.95) * truncation;
        b.set(i, class, v);
    }
    b
}

/// Same block with every Unknown voxel's stored value replaced by noise.
pub fn corrupt_unknown(block: &DenseTsdfBlock, seed: u64) -> DenseTsdfBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = block.clone();
    for i in 0..b.len() {
        if !b.mask[i].is_known() {
            b.tsdf[i] = rng.random_range(-10.0..10.0);
        }
    }
    b
}

pub fn tiny_vae(masked: bool) -> seenflow::vae::Vae {
    let config = seenflow::vae::VaeConfig { widths: vec![3, 4, 5], latent_channels: 2, masked, ..Default::default() };
    seenflow::vae::Vae::new(config, [8, 8, 8]).unwrap()
}

pub fn tiny_flow() -> seenflow::flow::VelocityModel {
    let config = seenflow::flow::FlowConfig {
        hidden: 8,
        blocks: 2,
        heads: 2,
        attention_blocks: vec![1],
        mlp_ratio: 2,
        layout_dim: 3,
        control_rank: 2,
    };
    seenflow::flow::VelocityModel::new(config, [2, 2, 2], 2).unwrap()
}

/// Adds noise to every tensor so zero-initialized paths carry signal.
pub fn perturbed<T: seenflow::tensor::Real>(params: &seenflow::tensor::ParamSet<T>, std: f64, seed: u64) -> seenflow::tensor::ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = params.clone();
    let names: Vec<String> = p.iter().map(|(k, _)| k.clone()).collect();
    for n in names {
        for x in p.get_mut(&n).unwrap().data_mut() {
            *x = T::c(x.f64() + std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    p
}

pub fn random_latent(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn random_layout(shape: [usize; 3], channels: usize, rng: &mut ChaCha8Rng) -> seenflow::layout::LayoutMap {
    let mut m = seenflow::layout::LayoutMap::zeros(shape, channels);
    m.values = random_latent(m.values.len(), rng);
    m
}

fn bound(names: &[String], vars: &[Var]) -> seenflow::tensor::Bound {
    let mut b = seenflow::tensor::Bound::default();
    for (n, v) in names.iter().zip(vars) {
        b.insert(n.clone(), *v);
    }
    b
}

fn tensor_err(e: seenflow::Error) -> TensorError {
    TensorError::InvalidShape { op: "model", shape: vec![], detail: e.to_string() }
}

fn split(params: &seenflow::tensor::ParamSet<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    params.iter().map(|(k, v)| (k.clone(), v.clone())).unzip()
}

/// Full VAE training loss of a tiny model on a random block, as a function
/// of every model parameter.
pub fn vae_loss_case(seed: u64) -> OpCase {
    let vae = tiny_vae(true);
    let params = perturbed(&vae.init_params::<f64>(seed), 0.05, seed + 1);
    let (names, inputs) = split(&params);
    let block = random_block([8; 3], 0.06, seed + 2);
    let n_latent = vae.latent_cells() * vae.config.latent_channels;
    let eps: Vec<f64> =
        random_latent(n_latent, &mut ChaCha8Rng::seed_from_u64(seed + 3)).into_iter().map(f64::from).collect();
    OpCase {
        name: "vae_loss",
        inputs,
        f: Box::new(move |g, vars| {
            let l = vae.loss_graph(g, &bound(&names, vars), &block, Some(&eps)).map_err(tensor_err)?;
            Ok(l.expect("block has known voxels").total)
        }),
    }
}

/// Masked flow-matching loss of a tiny model, with respect to the base
/// parameters (`control == false`) or the control branch with the base fixed.
pub fn fm_loss_case(seed: u64, control: bool) -> OpCase {
    let model = tiny_flow();
    let n = model.cells() * model.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = perturbed(&model.init_params::<f32>(seed), 0.2, seed + 1);
    let z1 = random_latent(n, &mut rng);
    let z0 = random_latent(n, &mut rng);
    let zp = random_latent(n, &mut rng);
    let mut mask: Vec<bool> = (0..model.cells()).map(|i| (i as u64 + seed) % 3 != 0).collect();
    mask[0] = true;
    let layout = random_layout(model.shape, model.config.layout_dim, &mut rng);
    let t = (seed as f64 * 0.618).fract();
    if !control {
        let (names, inputs) = split(&base.cast::<f64>());
        return OpCase {
            name: "fm_loss",
            inputs,
            f: Box::new(move |g, vars| {
                let p = bound(&names, vars);
                let l = model.fm_loss_graph(g, &p, &z1, &mask, Some(&layout), &z0, t, None).map_err(tensor_err)?;
                Ok(l.expect("some token is known"))
            }),
        };
    }
    let branch = perturbed(&model.init_control(&base, seed), 0.2, seed + 2).cast::<f64>();
    let base = base.cast::<f64>();
    let (names, inputs) = split(&branch);
    OpCase {
        name: "fm_loss_control",
        inputs,
        f: Box::new(move |g, vars| {
            let p = g.bind(&base, false);
            let bound = bound(&names, vars);
            let zp = model.tokens(g, &zp).map_err(tensor_err)?;
            let ctrl = seenflow::flow::ControlInput { bound, zp };
            let l = model.fm_loss_graph(g, &p, &z1, &mask, Some(&layout), &z0, t, Some(&ctrl)).map_err(tensor_err)?;
            Ok(l.expect("some token is known"))
        }),
    }
}

fn evaluate(case: &OpCase, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.f)(&mut g, &vars).unwrap();
    g.value(out).item()
}

/// Relative error of the reverse-mode directional derivative along a random
/// direction against a central difference along the same direction.
pub fn directional_error(case: &OpCase, step: f64, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.f)(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Tensor<f64>> = case.inputs.iter().map(|t| normal(&mut rng, t.shape())).collect();
    let norm = dirs.iter().flat_map(|d| d.data()).map(|x| x * x).sum::<f64>().sqrt();
    let dirs: Vec<Tensor<f64>> = dirs.iter().map(|d| d.map(|x| x / norm)).collect();
    let analytic: f64 = vars
        .iter()
        .zip(&dirs)
        .map(|(&v, d)| grads.get(v).data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let shifted = |s: f64| -> Vec<Tensor<f64>> {
        case.inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| Tensor::new(t.shape().to_vec(), t.data().iter().zip(d.data()).map(|(x, y)| x + s * y).collect()).unwrap())
            .collect()
    };
    let numeric = (evaluate(case, &shifted(step)) - evaluate(case, &shifted(-step))) / (2.0 * step);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}
