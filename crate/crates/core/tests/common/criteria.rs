//! Checks shared by the integration tests and the acceptance report. Each
//! returns a verdict with a one-line detail instead of panicking.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seenflow::eval::{chamfer, squared_distance, PointCloud};
use seenflow::flow::{euler_sample, gaussian_noise, ChunkCondition, FlowSample, GuidedField, VelocityField};
use seenflow::layout::LayoutMap;
use seenflow::surface::marching_cubes;
use seenflow::tensor::{grad_check, grad_check_sampled, Graph, ParamSet};
use seenflow::tiling::{plan_tiles, tiled_euler_sample, TilePlan};
use seenflow::voxgrid::{DenseTsdfBlock, VoxelMask};

use super::*;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-4;

/// Element-wise gradient check of every op and of the full model losses.
/// Model graphs are checked at `coords` sampled elements per seed.
pub fn gradient_suite(seeds: u64, coords: usize) -> Verdict {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "");
    for seed in 0..seeds {
        for case in op_cases(seed) {
            let e = grad_check(&case.f, &case.inputs, GRAD_STEP).unwrap_or(f64::INFINITY);
            if e > worst_op.0 {
                worst_op = (e, case.name);
            }
        }
    }
    let mut worst = BTreeMap::<&str, (f64, usize)>::new();
    let mut directional: f64 = 0.0;
    for seed in 0..seeds {
        let cases = [vae_loss_case(seed), fm_loss_case(seed, false), fm_loss_case(seed, true)];
        for case in &cases {
            let e = grad_check_sampled(&case.f, &case.inputs, GRAD_STEP, coords, seed).unwrap_or(f64::INFINITY);
            let w = worst.entry(case.name).or_insert((0.0, 0));
            w.0 = w.0.max(e);
            w.1 += (e > GRAD_TOL) as usize;
            directional = directional.max(directional_error(case, GRAD_STEP, seed));
        }
    }
    let graphs_ok = worst.values().all(|w| w.0 <= GRAD_TOL);
    let per_graph: Vec<String> =
        worst.iter().map(|(k, (e, n))| format!("{k} {e:.1e} ({n}/{seeds} seeds over)")).collect();
    Verdict::new(
        worst_op.0 <= GRAD_TOL && graphs_ok && directional <= GRAD_TOL,
        format!(
            "ops worst {:.1e} ({}); element-wise {}; directional worst {directional:.1e}; {:.0?}",
            worst_op.0,
            worst_op.1,
            per_graph.join(", "),
            start.elapsed()
        ),
    )
}

/// Corrupting Unknown voxels and unknown latent tokens changes no loss, no
/// gradient and no encoder output.
pub fn mask_blindness(cases: u64) -> Verdict {
    let vae = tiny_vae(true);
    let flow = tiny_flow();
    let n = flow.cells() * flow.channels;
    for case in 0..cases {
        let params = perturbed(&vae.init_params::<f64>(case), 0.05, case + 100);
        let block = random_block([8; 3], 0.06, case + 200);
        let corrupt = corrupt_unknown(&block, case + 300);
        let eps: Vec<f64> = gaussian_noise(vae.latent_cells() * vae.config.latent_channels, case + 400)
            .into_iter()
            .map(f64::from)
            .collect();
        let a = vae.loss_and_grads(&params, &block, Some(&eps)).unwrap();
        let b = vae.loss_and_grads(&params, &corrupt, Some(&eps)).unwrap();
        match (a, b) {
            (Some((la, ga)), Some((lb, gb))) if la == lb && ga == gb => {}
            _ => return Verdict::new(false, format!("case {case}: VAE loss or gradient changed")),
        }
        let p32 = params.cast::<f32>();
        if vae.encode(&p32, &block).unwrap() != vae.encode(&p32, &corrupt).unwrap() {
            return Verdict::new(false, format!("case {case}: encoder output changed"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(case + 500);
        let base = perturbed(&flow.init_params::<f64>(case), 0.2, case + 600);
        let z1 = random_latent(n, &mut rng);
        let z0 = random_latent(n, &mut rng);
        let mut mask: Vec<bool> = (0..flow.cells()).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        let mut z1c = z1.clone();
        for (i, v) in z1c.iter_mut().enumerate() {
            if !mask[i / flow.channels] {
                *v = rng.random_range(-50.0..50.0);
            }
        }
        let layout = random_layout(flow.shape, flow.config.layout_dim, &mut rng);
        let t: f64 = rng.random();
        let run = |z1: &[f32]| {
            let mut g = Graph::<f64>::new();
            let p = g.bind(&base, true);
            let l = flow.fm_loss_graph(&mut g, &p, z1, &mask, Some(&layout), &z0, t, None).unwrap().unwrap();
            (g.value(l).item(), g.backward(l).unwrap().collect(&p))
        };
        if run(&z1) != run(&z1c) {
            return Verdict::new(false, format!("case {case}: flow loss or gradient changed"));
        }
    }
    Verdict::new(true, format!("{cases} cases bit-identical (VAE loss, grads, encoder; flow loss, grads)"))
}

/// Controlled velocity equals base velocity at branch initialization.
pub fn control_identity(cases: u64) -> Verdict {
    let flow = tiny_flow();
    let n = flow.cells() * flow.channels;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let base = perturbed(&flow.init_params::<f32>(case), 0.3, case + 1);
        let control = flow.init_control(&base, case + 2);
        let z = random_latent(n, &mut rng);
        let zp = random_latent(n, &mut rng);
        let layout = random_layout(flow.shape, flow.config.layout_dim, &mut rng);
        let t: f64 = rng.random();
        let cond = if case % 2 == 0 { Some(&layout) } else { None };
        let a = flow.velocity(&base, &z, t, cond, None).unwrap();
        let b = flow.velocity(&base, &z, t, cond, Some((&control, &zp))).unwrap();
        if a != b || a.iter().all(|&x| x == 0.0) {
            return Verdict::new(false, format!("case {case}: controlled velocity differs or base is trivial"));
        }
    }
    Verdict::new(true, format!("{cases} cases bit-identical"))
}

/// Guidance scale 1 equals the conditional velocity, and a null layout gives
/// the same velocity at every scale.
pub fn cfg_algebra(cases: u64) -> Verdict {
    let flow = tiny_flow();
    let n = flow.cells() * flow.channels;
    let null = LayoutMap::null(flow.shape, flow.config.layout_dim);
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let base = perturbed(&flow.init_params::<f32>(case), 0.3, case + 1);
        let z = random_latent(n, &mut rng);
        let layout = random_layout(flow.shape, flow.config.layout_dim, &mut rng);
        let t: f64 = rng.random();
        let scale = rng.random_range(0.0..8.0);
        let cond = flow.velocity(&base, &z, t, Some(&layout), None).unwrap();
        let uncond = flow.velocity(&base, &z, t, None, None).unwrap();
        if flow.cfg_velocity(&base, &z, t, &layout, 1.0, None).unwrap() != cond {
            return Verdict::new(false, format!("case {case}: scale 1 differs from conditional"));
        }
        if flow.cfg_velocity(&base, &z, t, &null, scale, None).unwrap() != uncond
            || flow.cfg_velocity(&base, &z, t, &null, 1.0, None).unwrap() != uncond
        {
            return Verdict::new(false, format!("case {case}: null layout depends on scale {scale}"));
        }
        if cond == uncond {
            return Verdict::new(false, format!("case {case}: layout has no effect, check is vacuous"));
        }
    }
    Verdict::new(true, format!("{cases} cases exact"))
}

/// Recounts coverage of a plan directly from its origins.
fn plan_problems(plan: &TilePlan) -> Option<String> {
    let [ex, ey, ez] = plan.extent;
    let mut count = vec![0usize; ex * ey * ez];
    for o in &plan.origins {
        if (0..3).any(|a| o[a] + plan.chunk[a] > plan.extent[a]) {
            return Some(format!("origin {o:?} leaves the extent"));
        }
        for x in o[0]..o[0] + plan.chunk[0] {
            for y in o[1]..o[1] + plan.chunk[1] {
                for z in o[2]..o[2] + plan.chunk[2] {
                    count[(x * ey + y) * ez + z] += 1;
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Some(format!("cell {i} uncovered"));
    }
    if count.iter().zip(&plan.weights).any(|(&c, &w)| c as f64 != w) {
        return Some("weights differ from the recount".into());
    }
    let ones: Vec<Vec<f32>> = plan.origins.iter().map(|_| vec![1.0; plan.chunk_cells()]).collect();
    if plan.blend(&ones, 1).unwrap().iter().any(|&v| v != 1.0) {
        return Some("blending ones is not one".into());
    }
    None
}

/// Axis plans for every extent up to `max` plus full 3-D plans for the
/// combinations of `probe` extents.
pub fn tiling_coverage(max: usize, chunk: usize, overlap: f64, probe: &[usize]) -> Verdict {
    for e in 1..=max {
        let plan = plan_tiles([e, 1, 1], [chunk, 1, 1], overlap).unwrap();
        if let Some(p) = plan_problems(&plan) {
            return Verdict::new(false, format!("extent {e}: {p}"));
        }
        if e > chunk {
            let stride = (chunk as f64 * (1.0 - overlap)).ceil() as usize;
            let xs: Vec<usize> = plan.origins.iter().map(|o| o[0]).collect();
            if xs.windows(2).any(|w| w[1] <= w[0] || w[1] - w[0] > stride) {
                return Verdict::new(false, format!("extent {e}: origin spacing {xs:?}"));
            }
        }
    }
    let mut full = 0;
    for &a in probe {
        for &b in probe {
            for &c in probe {
                let plan = plan_tiles([a, b, c], [chunk; 3], overlap).unwrap();
                let axis = |e: usize| plan_tiles([e, 1, 1], [chunk, 1, 1], overlap).unwrap().origins.len();
                if plan.origins.len() != axis(a) * axis(b) * axis(c) {
                    return Verdict::new(false, format!("extent {:?}: plan does not factor per axis", [a, b, c]));
                }
                if let Some(p) = plan_problems(&plan) {
                    return Verdict::new(false, format!("extent {:?}: {p}", [a, b, c]));
                }
                full += 1;
            }
        }
    }
    Verdict::new(true, format!("axis extents 1..={max} and {full} full 3-D plans verified"))
}

struct Constant(Vec<f32>);

impl VelocityField for Constant {
    fn velocity(&self, z: &[f32], _: [usize; 3], _: f64, _: [usize; 3]) -> seenflow::Result<Vec<f32>> {
        let c = self.0.len();
        Ok((0..z.len()).map(|i| self.0[i % c]).collect())
    }
}

/// Tiled and untiled Euler sampling of a constant field agree.
pub fn constant_field_tiling(extent: [usize; 3], chunk: [usize; 3], overlap: f64) -> Verdict {
    let field = Constant(vec![0.7, -1.3, 0.25]);
    let plan = plan_tiles(extent, chunk, overlap).unwrap();
    let tiled = tiled_euler_sample(&plan, 3, 16, 9, &field).unwrap();
    let whole = euler_sample(&field, extent, 3, 16, 9).unwrap();
    let diff = tiled.iter().zip(&whole).map(|(a, b)| (*a as f64 - *b as f64).abs()).fold(0.0, f64::max);
    Verdict::new(diff <= 1e-12, format!("{} chunks, max |tiled - untiled| = {diff:e}", plan.origins.len()))
}

/// `dz/dt = a z + b`, solved in closed form.
struct Linear {
    a: f64,
    b: f64,
}

impl VelocityField for Linear {
    fn velocity(&self, z: &[f32], _: [usize; 3], _: f64, _: [usize; 3]) -> seenflow::Result<Vec<f32>> {
        Ok(z.iter().map(|&x| (self.a * x as f64 + self.b) as f32).collect())
    }
}

pub fn euler_convergence() -> Verdict {
    let field = Linear { a: -1.5, b: 0.8 };
    let shape = [4, 4, 4];
    let z0 = gaussian_noise(64, 21);
    let exact: Vec<f64> = z0
        .iter()
        .map(|&x| {
            let shift = field.b / field.a;
            (x as f64 + shift) * field.a.exp() - shift
        })
        .collect();
    let error = |steps: usize| {
        let z = euler_sample(&field, shape, 1, steps, 21).unwrap();
        let sq: f64 = z.iter().zip(&exact).map(|(a, b)| (*a as f64 - b).powi(2)).sum();
        (sq / z.len() as f64).sqrt()
    };
    let (e25, e50, e100) = (error(25), error(50), error(100));
    let (r1, r2) = (e25 / e50, e50 / e100);
    let ok = |r: f64| (1.6..=2.4).contains(&r);
    Verdict::new(ok(r1) && ok(r2), format!("rms errors {e25:.3e} {e50:.3e} {e100:.3e}, ratios {r1:.3} {r2:.3}"))
}

/// Trains a small velocity model on one fixed latent and checks that the
/// mean of 64 samples reproduces it.
pub fn degenerate_learning(steps: usize) -> Verdict {
    let start = Instant::now();
    let config = seenflow::flow::FlowConfig {
        hidden: 32,
        blocks: 2,
        heads: 2,
        attention_blocks: vec![1],
        mlp_ratio: 2,
        layout_dim: 4,
        control_rank: 2,
    };
    let model = seenflow::flow::VelocityModel::new(config, [4, 4, 4], 4).unwrap();
    let cells = model.cells();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let target: Vec<f32> = (0..cells * 4).map(|_| rng.random_range(-1.5..1.5)).collect();
    let sample = FlowSample {
        z1: target.clone(),
        token_mask: vec![true; cells],
        layout: LayoutMap::null(model.shape, model.config.layout_dim),
    };
    let train = seenflow::config::TrainConfig {
        steps,
        batch: 8,
        lr: 3e-3,
        warmup: steps / 20,
        weight_decay: 0.0,
        ema_decay: 0.99,
        seed: 5,
        log_every: 0,
    };
    let params: ParamSet<f32> =
        seenflow::flow::train_flow(&model, std::slice::from_ref(&sample), &train, 0.0, None, |_| {}).unwrap().with_ema_weights();
    let field = GuidedField {
        model: &model,
        params: &params,
        control: None,
        scale: 1.0,
        conditions: BTreeMap::from([([0; 3], ChunkCondition { layout: sample.layout.clone(), zp: None })]),
    };
    let mut mean = vec![0f64; target.len()];
    for s in 0..64 {
        let z = euler_sample(&field, model.shape, 4, 50, 1000 + s).unwrap();
        for (m, v) in mean.iter_mut().zip(&z) {
            *m += *v as f64 / 64.0;
        }
    }
    let rms: Vec<f64> = (0..4)
        .map(|c| {
            let sq: f64 = (0..cells).map(|i| (mean[i * 4 + c] - target[i * 4 + c] as f64).powi(2)).sum();
            (sq / cells as f64).sqrt()
        })
        .collect();
    let worst = rms.iter().cloned().fold(0.0, f64::max);
    let elapsed = start.elapsed();
    Verdict::new(
        worst <= 0.1 && elapsed.as_secs() < 600,
        format!("per-channel rms {:?}, {steps} steps, {elapsed:.0?}", rms.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>()),
    )
}

/// Sphere of `radius` voxels centred in a cube, as a dense TSDF block.
pub fn sphere_block(n: usize, radius: f64, center: [f64; 3], vs: f64, trunc: f32) -> DenseTsdfBlock {
    let mut b = DenseTsdfBlock::unknown([0; 3], [n; 3], trunc);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let p = [x as f64 * vs, y as f64 * vs, z as f64 * vs];
                let d = squared_distance(&p, &center).sqrt() - radius;
                let i = b.index(x, y, z);
                if d >= trunc as f64 {
                    b.set(i, VoxelMask::Empty, trunc);
                } else {
                    b.set(i, VoxelMask::Surface, d as f32);
                }
            }
        }
    }
    b
}

pub fn geometry() -> Verdict {
    let vs = 0.02;
    let center = [0.31, 0.33, 0.29];
    let radius = 0.2;
    let mesh = marching_cubes(&sphere_block(32, radius, center, vs, 0.06), vs, 0.0);
    let worst = mesh
        .vertices
        .iter()
        .map(|v| (squared_distance(v, &center).sqrt() - radius).abs())
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cloud = |n: usize| PointCloud { points: (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect() };
    let a = cloud(200);
    let b = cloud(200);
    let brute = |from: &PointCloud, to: &PointCloud| {
        from.points
            .iter()
            .map(|p| to.points.iter().map(|q| squared_distance(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.points.len() as f64
    };
    let oracle = brute(&a, &b) + brute(&b, &a);
    let cd = chamfer(&a, &b).unwrap();
    let self_cd = chamfer(&a, &a).unwrap();
    Verdict::new(
        !mesh.is_empty() && worst <= vs / 2.0 && (cd - oracle).abs() <= 1e-12 && self_cd == 0.0,
        format!(
            "{} sphere vertices, worst distance {worst:.2e} (limit {:.0e}); chamfer diff {:.1e}; chamfer(A,A) = {self_cd}",
            mesh.vertices.len(),
            vs / 2.0,
            (cd - oracle).abs()
        ),
    )
}

/// Plane oracle, frame-order invariance and degraded-subset checks, each
/// over every voxel of the fused grid.
pub fn fusion_oracle(scenes: u64) -> Verdict {
    use seenflow::fusion::*;
    use seenflow::voxgrid::VoxelState;
    use std::collections::HashSet;

    let plane = ProceduralScene {
        room_min: [-5.0; 3],
        room_max: [1.0, 5.0, 5.0],
        planes: vec![Plane { normal: [1.0, 0.0, 0.0], offset: 1.0 }],
        objects: vec![],
    };
    let pose = Pose::look_at([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
    let frame = render_depth(&plane, &pose, Intrinsics::from_fov(48, 48, 60.0), 48, 48).unwrap();
    let cfg = FusionConfig { voxel_size: 0.02, ..Default::default() };
    let vol = fuse_frames(&[frame], &cfg).unwrap();
    let trunc = vol.truncation();
    let mut plane_err: f64 = 0.0;
    for v in vol.known_voxels() {
        let expected = (1.0 - vol.world_position(v)[0]).clamp(-trunc, trunc);
        let got = match vol.classify_voxel(v) {
            VoxelState::Surface(t) => t as f64,
            _ => trunc,
        };
        plane_err = plane_err.max((got - expected).abs());
    }

    // 6 cm voxels keep the block-aligned rooms inside a 48^3 grid
    let cfg = FusionConfig { voxel_size: 0.06, ..Default::default() };
    let capture = CaptureSpec { width: 48, height: 48, ..Default::default() };
    let (mut order_err, mut max_extent, mut subset) = (0.0f64, 0i32, true);
    for seed in 0..scenes {
        let scene = make_scene(seed, &SceneSpec::default()).unwrap();
        let frames = capture_frames(&scene, 8, seed, &capture).unwrap();
        let fwd = fuse_frames(&frames, &cfg).unwrap();
        let mut shuffled = frames.clone();
        shuffled.reverse();
        shuffled.rotate_left(3);
        let other = fuse_frames(&shuffled, &cfg).unwrap();
        if let Some((lo, hi)) = fwd.block_bounds() {
            max_extent = max_extent.max((0..3).map(|a| hi[a] - lo[a] + 1).max().unwrap());
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let (a, wa) = fwd.voxel([x, y, z]);
                        let (b, wb) = other.voxel([x, y, z]);
                        let d = if (wa > 0.0) != (wb > 0.0) { f64::INFINITY } else { (a - b).abs() as f64 + (wa - wb).abs() as f64 };
                        order_err = order_err.max(d);
                    }
                }
            }
        }
        let full: HashSet<_> = fwd.known_voxels().into_iter().collect();
        let part = fuse_frames(&degrade_scan(&frames, 0.5, seed + 1).unwrap(), &cfg).unwrap();
        subset &= part.known_voxels().iter().all(|v| full.contains(v));
    }
    Verdict::new(
        plane_err <= 0.01 && order_err <= 1e-6 && subset && max_extent <= 48,
        format!(
            "plane max error {plane_err:.2e} (limit 1.0e-2); order max diff {order_err:.1e}; degraded subset {subset}; grids up to {max_extent}^3"
        ),
    )
}
