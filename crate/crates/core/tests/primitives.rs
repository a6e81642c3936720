//! Every tape primitive against central differences on randomised inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visreason::numerics::{grad_check, matmul, softmax, Tape, Tensor, Var};
use visreason::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces any tensor to a scalar via squared distance to fixed random
/// targets so every output element carries a distinct gradient.
fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = t.leaf(rand_tensor(&mut rng, &shape));
    t.mse(x, w)
}

fn check(name: &str, seed: u64, x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let r = grad_check(f, x, H, TOL).unwrap();
    assert!(r.passed(), "{name} seed {seed}: max rel err {} at {:?}", r.max_rel_error, r.violations);
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let bc = b.clone();
        let r = grad_check(
            |t, x| {
                let bv = t.leaf(bc.clone());
                let y = t.matmul(x, bv)?;
                weighted_sum(t, y, seed)
            },
            &a,
            H,
            1e-6,
        )
        .unwrap();
        worst = worst.max(r.max_rel_error);
        let ac = a.clone();
        let r2 = grad_check(
            |t, x| {
                let av = t.leaf(ac.clone());
                let y = t.matmul(av, x)?;
                weighted_sum(t, y, seed)
            },
            &b,
            H,
            1e-6,
        )
        .unwrap();
        worst = worst.max(r2.max_rel_error);
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn matmul_tape_agrees_with_plain_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let mut t = Tape::new();
    let (x, y) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let z = t.matmul(x, y).unwrap();
    assert_eq!(t.value(z), &matmul(&a, &b).unwrap());
}

#[test]
fn unary_and_broadcast_primitives() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let v = rand_tensor(&mut rng, &[4]);
        let m = rand_tensor(&mut rng, &[4, 3]);
        check("silu", seed, &x, |t, x| {
            let y = t.silu(x);
            weighted_sum(t, y, seed)
        });
        check("tanh", seed, &x, |t, x| {
            let y = t.tanh(x);
            weighted_sum(t, y, seed)
        });
        check("scale", seed, &x, |t, x| {
            let y = t.scale(x, -2.5);
            weighted_sum(t, y, seed)
        });
        let vc = v.clone();
        check("add_row/x", seed, &x, |t, x| {
            let b = t.leaf(vc.clone());
            let y = t.add_row(x, b)?;
            let y = t.tanh(y);
            weighted_sum(t, y, seed)
        });
        let xc = x.clone();
        check("add_row/bias", seed, &v, |t, b| {
            let x = t.leaf(xc.clone());
            let y = t.add_row(x, b)?;
            let y = t.tanh(y);
            weighted_sum(t, y, seed)
        });
        check("mul_row/gain", seed, &v, |t, g| {
            let x = t.leaf(xc.clone());
            let y = t.mul_row(x, g)?;
            weighted_sum(t, y, seed)
        });
        let vc2 = v.clone();
        check("mul_row/x", seed, &x, |t, x| {
            let g = t.leaf(vc2.clone());
            let y = t.mul_row(x, g)?;
            let y = t.silu(y);
            weighted_sum(t, y, seed)
        });
        let mc = m.clone();
        check("matmul_nt", seed, &x, |t, x| {
            let b = t.leaf(Tensor::matrix(3, 4, mc.data().to_vec()).unwrap());
            let y = t.matmul_nt(x, b)?;
            weighted_sum(t, y, seed)
        });
        check("matmul_nt/rhs", seed, &x, |t, b| {
            let a = t.leaf(Tensor::matrix(3, 4, mc.data().to_vec()).unwrap());
            let y = t.matmul_nt(a, b)?;
            weighted_sum(t, y, seed)
        });
        check("add+sum", seed, &x, |t, x| {
            let y = t.tanh(x);
            let z = t.add(x, y)?;
            let s = t.sum(&[z, x, y])?;
            weighted_sum(t, s, seed)
        });
    }
}

#[test]
fn structural_primitives() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[5, 4]);
        let idx: Vec<usize> = (0..7).map(|_| rng.gen_range(0..5)).collect();
        let i2 = idx.clone();
        check("gather_rows", seed, &x, |t, x| {
            let y = t.gather_rows(x, &i2)?;
            weighted_sum(t, y, seed)
        });
        let i3 = idx.clone();
        check("select_rows", seed, &x, |t, x| {
            let y = t.select_rows(x, &i3)?;
            let y = t.tanh(y);
            weighted_sum(t, y, seed)
        });
        check("slice_rows", seed, &x, |t, x| {
            let y = t.slice_rows(x, 1, 3)?;
            weighted_sum(t, y, seed)
        });
        check("slice_cols", seed, &x, |t, x| {
            let y = t.slice_cols(x, 1, 2)?;
            weighted_sum(t, y, seed)
        });
        check("concat_rows", seed, &x, |t, x| {
            let a = t.slice_rows(x, 0, 2)?;
            let b = t.tanh(x);
            let y = t.concat_rows(&[b, a])?;
            weighted_sum(t, y, seed)
        });
        check("concat_cols", seed, &x, |t, x| {
            let a = t.slice_cols(x, 0, 3)?;
            let b = t.silu(x);
            let y = t.concat_cols(&[a, b])?;
            weighted_sum(t, y, seed)
        });
        check("mean_rows", seed, &x, |t, x| {
            let y = t.tanh(x);
            let y = t.mean_rows(y)?;
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn normalisation_primitives() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let y = rand_tensor(&mut rng, &[3, 6]);
        check("causal_softmax", seed, &x, |t, x| {
            let y = t.causal_softmax(x)?;
            weighted_sum(t, y, seed)
        });
        check("layer_norm", seed, &y, |t, x| {
            let z = t.layer_norm(x)?;
            weighted_sum(t, z, seed)
        });
    }
}

#[test]
fn loss_primitives() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&mut rng, &[4, 6]);
        let picks: Vec<(usize, usize)> = (0..5).map(|_| (rng.gen_range(0..4), rng.gen_range(0..6))).collect();
        let p2 = picks.clone();
        check("cross_entropy", seed, &logits, |t, l| t.cross_entropy(l, &p2));
        let row = rand_tensor(&mut rng, &[1, 6]);
        let target = rng.gen_range(0..6);
        check("softmax_cross_entropy", seed, &row, |t, l| t.softmax_cross_entropy(l, target));
        let p3 = picks.clone();
        check("log_softmax_pick", seed, &logits, |t, l| {
            let y = t.log_softmax_pick(l, &p3)?;
            weighted_sum(t, y, seed)
        });
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]);
        let bc = b.clone();
        check("mse/a", seed, &a, |t, x| {
            let bv = t.leaf(bc.clone());
            t.mse(x, bv)
        });
        let ac = a.clone();
        check("mse/b", seed, &b, |t, x| {
            let av = t.leaf(ac.clone());
            t.mse(av, x)
        });
    }
}

#[test]
fn subtb_primitive_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(0..6);
        let pf = rand_tensor(&mut rng, &[n]);
        let flow = rand_tensor(&mut rng, &[n + 1]);
        let term = rand_tensor(&mut rng, &[n + 1]);
        let rew: Vec<f64> = (0..=n).map(|_| rng.gen_range(-3.0..0.0)).collect();
        let (f2, t2, p2) = (flow.clone(), term.clone(), pf.clone());
        let r2 = rew.clone();
        check("subtb/pf", seed, &pf, |t, x| {
            let f = t.leaf(f2.clone());
            let e = t.leaf(t2.clone());
            t.subtb(x, f, e, &r2, 0.9)
        });
        check("subtb/flow", seed, &flow, |t, x| {
            let p = t.leaf(p2.clone());
            let e = t.leaf(t2.clone());
            t.subtb(p, x, e, &r2, 0.9)
        });
        check("subtb/term", seed, &term, |t, x| {
            let p = t.leaf(p2.clone());
            let f = t.leaf(f2.clone());
            t.subtb(p, f, x, &r2, 0.9)
        });
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let p = softmax(&x);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut t = Tape::new();
        let m = t.leaf(Tensor::matrix(3, 3, x).unwrap());
        let s = t.causal_softmax(m).unwrap();
        for r in 0..3 {
            assert!((t.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[6, 6]);
    let run = || {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let a = t.layer_norm(v).unwrap();
        let b = t.causal_softmax(a).unwrap();
        let c = t.matmul(b, v).unwrap();
        t.value(c).clone()
    };
    let (p, q) = (run(), run());
    assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}
