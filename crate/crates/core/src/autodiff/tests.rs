use super::*;
use crate::error::Error;
use crate::rng::Rng;
use crate::spectral::MaskDirection;
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Random readout weights so every gradient component is generically nonzero.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = Rng::new(seed ^ 0xABCD);
    let w = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_gradient_is_two_x() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient_and_unused_leaves_get_zeros() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let unused = tape.leaf(Tensor::zeros(vec![2, 2]));
    let p = tape.mul(x, c).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    assert!(g.get(c).is_none());
    assert_eq!(g.get(unused).unwrap().shape(), &[2, 2]);
    assert!(g.get(unused).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradient_is_linear_in_outputs() {
    let mut rng = Rng::new(4);
    let x0 = Tensor::randn(vec![5], 1.0, &mut rng);
    let grad_of = |which: u8| {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let a = tape.silu(x);
        let b = tape.sin(x);
        let sa = tape.sum(a);
        let sb = tape.sum(b);
        let out = match which {
            0 => sa,
            1 => sb,
            _ => tape.add(sa, sb).unwrap(),
        };
        tape.backward(out).unwrap().get(x).unwrap().clone()
    };
    let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..5 {
        assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn sum_check_is_exact() {
    let mut rng = Rng::new(1);
    let x = Tensor::randn(vec![6], 1.0, &mut rng);
    let err = finite_diff_check(|t, x| Ok(t.sum(x)), &x, EPS).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn sin_check() {
    let mut rng = Rng::new(2);
    let x = Tensor::randn(vec![8], 1.0, &mut rng);
    let err = finite_diff_check(
        |t, x| {
            let s = t.sin(x);
            Ok(t.sum(s))
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

fn check_unary(name: &str, op: impl Fn(&mut Tape, Var) -> Var) {
    for seed in 0..5 {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let err = finite_diff_check(
            |t, x| {
                let y = op(t, x);
                weighted_sum(t, y, seed)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{name} seed {seed}: {err}");
    }
}

#[test]
fn elementwise_primitives_pass_gradcheck() {
    check_unary("silu", |t, x| t.silu(x));
    check_unary("sigmoid", |t, x| t.sigmoid(x));
    check_unary("softplus", |t, x| t.softplus(x));
    check_unary("exp", |t, x| t.exp(x));
    check_unary("sin", |t, x| t.sin(x));
    check_unary("scale", |t, x| t.scale(x, -1.7));
    check_unary("relu", |t, x| t.relu(x));
    check_unary("mul-self", |t, x| t.mul(x, x).unwrap());
    check_unary("sub", |t, x| {
        let y = t.sin(x);
        t.sub(x, y).unwrap()
    });
    check_unary("mean", |t, x| {
        let y = t.mul(x, x).unwrap();
        t.mean(y)
    });
    check_unary("reshape", |t, x| t.reshape(x, &[12]).unwrap());
}

#[test]
fn structural_primitives_pass_gradcheck() {
    for seed in 0..5 {
        let mut rng = Rng::new(100 + seed);
        let w = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![3], 1.0, &mut rng);
        let other = Tensor::randn(vec![2, 2, 4], 1.0, &mut rng);
        let x = Tensor::randn(vec![2, 2, 4], 1.0, &mut rng);

        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var, Error>>)> = vec![
            (
                "linear",
                Box::new(|t: &mut Tape, x| {
                    let w = t.constant(w.clone());
                    let b = t.constant(b.clone());
                    t.linear(x, w, b)
                }),
            ),
            (
                "matmul-weight",
                Box::new(|t: &mut Tape, x| {
                    let xs = t.constant(other.clone());
                    let xr = t.reshape(x, &[4, 4])?;
                    t.matmul(xs, xr)
                }),
            ),
            (
                "concat-slice",
                Box::new(|t: &mut Tape, x| {
                    let o = t.constant(other.clone());
                    let c = t.concat(x, o)?;
                    let s = t.slice_last(c, 2, 4)?;
                    t.silu(s).pipe(Ok)
                }),
            ),
            ("mean_axis1", Box::new(|t: &mut Tape, x| t.mean_axis1(x))),
            (
                "mul_bins",
                Box::new(|t: &mut Tape, x| {
                    let m = t.constant(Tensor::from_vec(vec![0.3, -1.2]));
                    t.mul_bins(x, m)
                }),
            ),
        ];
        for (name, f) in &cases {
            let err = finite_diff_check(
                |t, x| {
                    let y = f(t, x)?;
                    weighted_sum(t, y, seed)
                },
                &x,
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "{name} seed {seed}: {err}");
        }
    }
}

trait Pipe: Sized {
    fn pipe<R>(self, f: impl FnOnce(Self) -> R) -> R {
        f(self)
    }
}
impl<T> Pipe for T {}

#[test]
fn layer_norm_gradients() {
    for seed in 0..5 {
        let mut rng = Rng::new(200 + seed);
        let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let gamma = Tensor::randn(vec![5], 1.0, &mut rng);
        let beta = Tensor::randn(vec![5], 1.0, &mut rng);
        let err = finite_diff_check(
            |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let y = t.layer_norm(x, g, b, 1e-5)?;
                weighted_sum(t, y, seed)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "x seed {seed}: {err}");
        let err = finite_diff_check(
            |t, g| {
                let xv = t.constant(x.clone());
                let b = t.constant(beta.clone());
                let y = t.layer_norm(xv, g, b, 1e-5)?;
                weighted_sum(t, y, seed)
            },
            &gamma,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "gamma seed {seed}: {err}");
    }
}

#[test]
fn causal_conv_gradients() {
    for seed in 0..5 {
        let mut rng = Rng::new(300 + seed);
        let x = Tensor::randn(vec![2, 6, 3], 1.0, &mut rng);
        let k = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![3], 1.0, &mut rng);
        for which in 0..3 {
            let input = [&x, &k, &b][which];
            let err = finite_diff_check(
                |t, v| {
                    let xs = if which == 0 { v } else { t.constant(x.clone()) };
                    let ks = if which == 1 { v } else { t.constant(k.clone()) };
                    let bs = if which == 2 { v } else { t.constant(b.clone()) };
                    let y = t.causal_conv(xs, ks, bs)?;
                    weighted_sum(t, y, seed)
                },
                input,
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "operand {which} seed {seed}: {err}");
        }
    }
}

#[test]
fn spectral_primitives_gradients() {
    for seed in 0..5 {
        for n in [5usize, 8] {
            let mut rng = Rng::new(400 + seed);
            let x = Tensor::randn(vec![2, n, 3], 1.0, &mut rng);
            let err = finite_diff_check(
                |t, x| {
                    let (re, im) = t.rfft(x)?;
                    let a = weighted_sum(t, re, seed)?;
                    let b = weighted_sum(t, im, seed + 1)?;
                    t.add(a, b)
                },
                &x,
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "rfft n={n} seed {seed}: {err}");

            let nf = n / 2 + 1;
            let spec = Tensor::randn(vec![2, nf, 3], 1.0, &mut rng);
            let im_part = Tensor::randn(vec![2, nf, 3], 1.0, &mut rng);
            let err = finite_diff_check(
                |t, re| {
                    let im = t.constant(im_part.clone());
                    let y = t.irfft(re, im, n)?;
                    weighted_sum(t, y, seed)
                },
                &spec,
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "irfft re n={n} seed {seed}: {err}");
            // Imaginary parts of edge bins carry no signal; check interior only
            // by perturbing the full tensor and accepting exact zeros.
            let err = finite_diff_check(
                |t, im| {
                    let re = t.constant(spec.clone());
                    let y = t.irfft(re, im, n)?;
                    weighted_sum(t, y, seed)
                },
                &im_part,
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "irfft im n={n} seed {seed}: {err}");
        }
    }
}

#[test]
fn band_mask_gradient_in_threshold() {
    for seed in 0..5 {
        let mut rng = Rng::new(500 + seed);
        let theta = Tensor::scalar(rng.uniform(0.1, 0.4));
        for dir in [MaskDirection::KeepBelow, MaskDirection::KeepAbove] {
            let err = finite_diff_check(
                |t, th| {
                    let m = t.band_mask(th, 16, dir, 0.05)?;
                    weighted_sum(t, m, seed)
                },
                &theta,
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "{dir:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn selective_scan_gradients() {
    for seed in 0..5 {
        let mut rng = Rng::new(600 + seed);
        let (s, z, d, n) = (2, 5, 3, 4);
        let x = Tensor::randn(vec![s, z, d], 1.0, &mut rng);
        let delta = Tensor::uniform(vec![s, z, d], 0.05, 1.0, &mut rng);
        let a = Tensor::uniform(vec![d, n], -2.0, -0.1, &mut rng);
        let b = Tensor::randn(vec![s, z, n], 1.0, &mut rng);
        let c = Tensor::randn(vec![s, z, n], 1.0, &mut rng);
        let inputs = [&x, &delta, &a, &b, &c];
        for which in 0..5 {
            let err = finite_diff_check(
                |t, v| {
                    let vars: Vec<Var> = (0..5)
                        .map(|i| if i == which { v } else { t.constant(inputs[i].clone()) })
                        .collect();
                    let y = t.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4])?;
                    weighted_sum(t, y, seed)
                },
                inputs[which],
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "scan operand {which} seed {seed}: {err}");
        }
    }
}

#[test]
fn embedding_and_loss_primitives_gradients() {
    for seed in 0..5 {
        let mut rng = Rng::new(700 + seed);
        let x = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);
        let token = Tensor::randn(vec![4], 1.0, &mut rng);
        let pos = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        let mask = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];

        let err = finite_diff_check(
            |t, tok| {
                let xv = t.constant(x.clone());
                let y = t.mask_replace(xv, tok, &mask)?;
                weighted_sum(t, y, seed)
            },
            &token,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "mask token seed {seed}: {err}");

        let err = finite_diff_check(
            |t, p| {
                let xv = t.constant(x.clone());
                let y = t.add_positional(xv, p)?;
                weighted_sum(t, y, seed)
            },
            &pos,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "positions seed {seed}: {err}");

        let target: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
        let err = finite_diff_check(|t, p| t.masked_mse(p, &target, &mask), &x, EPS).unwrap();
        assert!(err < TOL, "masked mse seed {seed}: {err}");

        let logits = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let mut targets = vec![0.025; 12];
        targets[1] = 0.925;
        targets[4] = 0.925;
        targets[11] = 0.925;
        let err = finite_diff_check(|t, l| t.cross_entropy(l, &targets), &logits, EPS).unwrap();
        assert!(err < TOL, "cross entropy seed {seed}: {err}");
    }
}

#[test]
fn composite_graph_gradient() {
    // conv -> silu -> layer_norm -> mean, as one chain.
    for seed in 0..5 {
        let mut rng = Rng::new(800 + seed);
        let x = Tensor::randn(vec![1, 6, 4], 1.0, &mut rng);
        let k = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4], 0.1, &mut rng);
        let gamma = Tensor::randn(vec![4], 1.0, &mut rng);
        let beta = Tensor::randn(vec![4], 1.0, &mut rng);
        let err = finite_diff_check(
            |t, x| {
                let kv = t.constant(k.clone());
                let bv = t.constant(b.clone());
                let gv = t.constant(gamma.clone());
                let btv = t.constant(beta.clone());
                let y = t.causal_conv(x, kv, bv)?;
                let y = t.silu(y);
                let y = t.layer_norm(y, gv, btv, 1e-5)?;
                Ok(t.mean(y))
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn replay_with_same_seed_is_bit_identical() {
    let run = || {
        let mut rng = Rng::new(77);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::randn(vec![4, 3], 0.5, &mut rng));
        let x = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x);
        let y = tape.matmul(xv, tape.param(w)).unwrap();
        let y = tape.silu(y);
        let loss = tape.mean(y);
        let grads = tape.backward(loss).unwrap().params(&store);
        let mut opt = AdamWState::new(AdamWConfig::default(), store.values());
        opt.step(store.values_mut(), &grads).unwrap();
        store
    };
    let a = run();
    let b = run();
    for (x, y) in a.values().iter().zip(b.values()) {
        let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}
