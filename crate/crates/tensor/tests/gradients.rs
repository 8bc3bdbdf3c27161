//! Finite-difference checks for every differentiable op over randomized
//! small shapes.

use vpr_tensor::{grad_check, random_projection, AttentionVars, DType, SeededRng, Tensor};

const H: f64 = 1e-5;
const SHAPES_PER_OP: u64 = 20;

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape, 1.0, DType::F64, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, DType::F64, rng)
}

fn dim(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn check(
    name: &str,
    seed: u64,
    inputs: Vec<Tensor>,
    tol: f64,
    f: impl Fn(&mut vpr_tensor::Tape, &[vpr_tensor::Var]) -> vpr_tensor::Result<vpr_tensor::Var>,
) {
    let report = grad_check(f, &inputs, H, tol).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
    assert!(
        report.passed(),
        "{name} seed {seed}: max rel err {:?} (worst index {:?})",
        report.max_rel_err,
        report.worst_index
    );
}

#[test]
fn linear_gradients() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(seed);
        let (m, k, n) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 5), dim(&mut rng, 1, 4));
        let inputs = vec![
            randn(&[2, m, k], &mut rng),
            randn(&[k, n], &mut rng),
            randn(&[n], &mut rng),
        ];
        check("linear", seed, inputs, 1e-6, |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            random_projection(t, y, 99)
        });
    }
}

#[test]
fn bmm_gradients() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(100 + seed);
        let (b, m, k, n) = (
            dim(&mut rng, 1, 3),
            dim(&mut rng, 1, 4),
            dim(&mut rng, 1, 4),
            dim(&mut rng, 1, 4),
        );
        let trans = seed % 2 == 0;
        let bshape = if trans { [b, n, k] } else { [b, k, n] };
        let inputs = vec![randn(&[b, m, k], &mut rng), randn(&bshape, &mut rng)];
        check("bmm", seed, inputs, 1e-6, move |t, v| {
            let y = t.bmm(v[0], v[1], trans)?;
            random_projection(t, y, 7)
        });
    }
}

#[test]
fn conv2d_gradients() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(200 + seed);
        let k = if seed % 2 == 0 { 1 } else { 3 };
        let (b, c, co, h, w) = (
            dim(&mut rng, 1, 2),
            dim(&mut rng, 1, 3),
            dim(&mut rng, 1, 3),
            dim(&mut rng, 1, 4),
            dim(&mut rng, 1, 4),
        );
        let inputs = vec![
            randn(&[b, c, h, w], &mut rng),
            randn(&[co, c, k, k], &mut rng),
            randn(&[co], &mut rng),
        ];
        check("conv2d", seed, inputs, 1e-5, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            random_projection(t, y, 3)
        });
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(300 + seed);
        let (r, d) = (dim(&mut rng, 1, 4), dim(&mut rng, 2, 6));
        let inputs = vec![randn(&[r, d], &mut rng), randn(&[d], &mut rng), randn(&[d], &mut rng)];
        check("layer_norm", seed, inputs, 1e-6, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            random_projection(t, y, 5)
        });
    }
}

#[test]
fn softmax_and_gelu_gradients() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(400 + seed);
        let (r, d) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 6));
        check("softmax", seed, vec![randn(&[r, d], &mut rng)], 1e-6, |t, v| {
            let y = t.softmax(v[0])?;
            random_projection(t, y, 11)
        });
        check("gelu", seed, vec![randn(&[r, d], &mut rng)], 1e-6, |t, v| {
            let y = t.gelu(v[0])?;
            random_projection(t, y, 12)
        });
        check("tanh", seed, vec![randn(&[r, d], &mut rng)], 1e-6, |t, v| {
            let y = t.tanh(v[0])?;
            random_projection(t, y, 13)
        });
    }
}

#[test]
fn mhsa_gradients() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(500 + seed);
        let heads = dim(&mut rng, 1, 2);
        let d = heads * dim(&mut rng, 1, 3);
        let (b, t) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 3));
        let inputs = vec![
            randn(&[b, t, d], &mut rng),
            Tensor::randn(&[d, 3 * d], 0.5, DType::F64, &mut rng),
            randn(&[3 * d], &mut rng),
            Tensor::randn(&[d, d], 0.5, DType::F64, &mut rng),
            randn(&[d], &mut rng),
        ];
        check("mhsa", seed, inputs, 1e-5, move |tape, v| {
            let p = AttentionVars {
                qkv_w: v[1],
                qkv_b: v[2],
                proj_w: v[3],
                proj_b: v[4],
            };
            let y = tape.mhsa(v[0], &p, heads)?;
            random_projection(tape, y, 17)
        });
    }
}

#[test]
fn grid_sample_gradients() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(600 + seed);
        let (b, c, h, w) = (
            dim(&mut rng, 1, 2),
            dim(&mut rng, 1, 3),
            dim(&mut rng, 2, 5),
            dim(&mut rng, 2, 5),
        );
        let (ho, wo) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
        let inputs = vec![
            randn(&[b, c, h, w], &mut rng),
            uniform(&[b, ho, wo, 2], -0.95, 0.95, &mut rng),
        ];
        check("grid_sample", seed, inputs, 1e-5, |t, v| {
            let y = t.grid_sample(v[0], v[1])?;
            random_projection(t, y, 19)
        });
    }
}

#[test]
fn gem_pool_gradients_including_exponent() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(700 + seed);
        let (b, c, h, w) = (
            dim(&mut rng, 1, 2),
            dim(&mut rng, 1, 3),
            dim(&mut rng, 1, 3),
            dim(&mut rng, 1, 3),
        );
        let inputs = vec![
            uniform(&[b, c, h, w], 0.1, 2.0, &mut rng),
            uniform(&[1], 1.0, 4.0, &mut rng),
        ];
        check("gem_pool", seed, inputs, 1e-5, |t, v| {
            let y = t.gem_pool(v[0], v[1], 1e-6)?;
            random_projection(t, y, 23)
        });
    }
}

#[test]
fn l2_normalize_gradients() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(800 + seed);
        let (r, d) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 6));
        check("l2_normalize", seed, vec![randn(&[r, d], &mut rng)], 1e-6, |t, v| {
            let y = t.l2_normalize(v[0], 1e-12)?;
            random_projection(t, y, 29)
        });
    }
}

#[test]
fn shape_ops_gradients() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(900 + seed);
        let (a, b, c) = (dim(&mut rng, 1, 3), dim(&mut rng, 2, 4), dim(&mut rng, 1, 3));
        let inputs = vec![
            randn(&[a, b, c], &mut rng),
            randn(&[b, c], &mut rng),
            randn(&[a, c], &mut rng),
        ];
        check("shape ops", seed, inputs, 1e-6, move |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let p = t.permute(p, &[1, 2, 0])?;
            let s0 = t.slice(p, 1, 0, 1)?;
            let s1 = t.slice(p, 1, 1, b - 1)?;
            let cat = t.concat(&[s1, s0], 1)?;
            let bc = t.add_bcast(cat, v[1])?;
            let m = t.mean_leading(bc)?;
            let e = t.expand_leading(v[2], 2)?;
            let e = t.reshape(e, &[2 * a * c])?;
            let sp = t.broadcast_spatial(v[2], 2, 1)?;
            let y1 = random_projection(t, m, 31)?;
            let y2 = random_projection(t, e, 37)?;
            let y3 = random_projection(t, sp, 41)?;
            let y = t.add(y1, y2)?;
            t.add(y, y3)
        });
    }
}

#[test]
fn mse_gradient_is_two_diff_over_count() {
    for seed in 0..SHAPES_PER_OP {
        let mut rng = SeededRng::new(1000 + seed);
        let (r, d) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 5));
        let a = randn(&[r, d], &mut rng);
        let b = randn(&[r, d], &mut rng);
        check("mse", seed, vec![a.clone(), b.clone()], 1e-6, |t, v| t.mse(v[0], v[1]));
        let mut tape = vpr_tensor::Tape::new(DType::F64);
        let va = tape.leaf(a.clone(), true);
        let vb = tape.constant(b.clone());
        let l = tape.mse(va, vb).unwrap();
        let g = tape.backward(l).unwrap();
        let n = (r * d) as f64;
        for ((ga, x), y) in g.get(va).unwrap().iter().zip(a.data()).zip(b.data()) {
            assert!((ga - 2.0 * (x - y) / n).abs() < 1e-12);
        }
    }
}
