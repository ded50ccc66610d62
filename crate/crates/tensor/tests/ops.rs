use approx::assert_relative_eq;
use mcc_tensor::{glorot_limit, glorot_uniform, io, logmeanexp, Rng, Tape, Tensor};
use proptest::prelude::*;

fn eval2(a: Tensor, b: Tensor, f: impl Fn(&mut Tape, mcc_tensor::Var, mcc_tensor::Var) -> mcc_tensor::Var) -> Tensor {
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a), t.constant(b));
    let out = f(&mut t, va, vb);
    t.value(out).clone()
}

#[test]
fn matmul_examples() {
    let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let out = eval2(Tensor::identity(2), b.clone(), |t, a, b| t.matmul(a, b).unwrap());
    assert_eq!(out, b);
    let proj = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let rhs = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
    let out = eval2(proj, rhs, |t, a, b| t.matmul(a, b).unwrap());
    assert_eq!(out.data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn conv2d_examples() {
    let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let unit = Tensor::ones(&[1, 1, 1, 1]);
    let out = eval2(x.clone(), unit.clone(), |t, a, k| t.conv2d(a, k, 1).unwrap());
    assert_eq!(out, x);

    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = Tensor::ones(&[1, 1, 2, 2]);
    let out = eval2(x, ones, |t, a, k| t.conv2d(a, k, 1).unwrap());
    assert_eq!(out.dims(), &[1, 1, 1]);
    assert_eq!(out.data(), &[10.0]);
}

#[test]
fn conv2d_matches_direct_loop() {
    // direct nested-loop cross-correlation as the reference
    let mut rng = Rng::new(4);
    let x = rng.normal_tensor(&[2, 3, 9, 7]);
    let k = rng.normal_tensor(&[5, 3, 3, 3]);
    let stride = 2;
    let out = eval2(x.clone(), k.clone(), |t, a, b| t.conv2d(a, b, stride).unwrap());
    let (oh, ow) = ((9 - 3) / 2 + 1, (7 - 3) / 2 + 1);
    assert_eq!(out.dims(), &[2, 5, oh, ow]);
    let xd = |n: usize, c: usize, y: usize, xx: usize| x.data()[((n * 3 + c) * 9 + y) * 7 + xx];
    let kd = |o: usize, c: usize, i: usize, j: usize| k.data()[((o * 3 + c) * 3 + i) * 3 + j];
    for n in 0..2 {
        for o in 0..5 {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for c in 0..3 {
                        for i in 0..3 {
                            for j in 0..3 {
                                s += xd(n, c, y * stride + i, xx * stride + j) * kd(o, c, i, j);
                            }
                        }
                    }
                    let got = out.data()[((n * 5 + o) * oh + y) * ow + xx];
                    assert_relative_eq!(got, s, epsilon = 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_transpose_identity_and_geometry() {
    let x = Tensor::new(&[1, 2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
    let unit = Tensor::ones(&[1, 1, 1, 1]);
    let out = eval2(x.clone(), unit, |t, a, k| t.conv2d_transpose(a, k, 1).unwrap());
    assert_eq!(out, x);

    // geometry oracle: the transpose of 8 must be the (smallest) extent that
    // stride-2 kernel-3 valid conv maps back to 8
    let inverse_of_8: Vec<usize> = (3..40).filter(|&h| (h - 3) / 2 + 1 == 8).collect();
    assert_eq!(inverse_of_8, vec![17, 18]);
    let x = Tensor::zeros(&[1, 8, 8]);
    let k = Tensor::zeros(&[1, 1, 3, 3]);
    let out = eval2(x, k, |t, a, k| t.conv2d_transpose(a, k, 2).unwrap());
    assert_eq!(out.dims(), &[1, 17, 17]);
}

fn adjoint_gap(seed: u64, stride: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let x = rng.normal_tensor(&[2, 2, 4 * stride + 3, 4 * stride + 3]);
    let k = rng.normal_tensor(&[3, 2, 3, 3]);
    let mut t = Tape::new();
    let (xv, kv) = (t.constant(x.clone()), t.constant(k));
    let cx = t.conv2d(xv, kv, stride).unwrap();
    let y = rng.normal_tensor(t.dims(cx));
    let yv = t.constant(y.clone());
    let cty = t.conv2d_transpose(yv, kv, stride).unwrap();
    assert_eq!(t.dims(cty), x.dims());
    let lhs = t.value(cx).dot(&y).unwrap();
    let rhs = x.dot(t.value(cty)).unwrap();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for seed in 0..10 {
        for stride in [1, 2, 3] {
            assert!(adjoint_gap(seed, stride) < 1e-6);
        }
    }
}

#[test]
fn logmeanexp_agrees_with_naive_form() {
    let mut rng = Rng::new(2);
    for _ in 0..50 {
        let x: Vec<f64> = (0..17).map(|_| 5.0 * rng.normal()).collect();
        let naive = (x.iter().map(|v| v.exp()).sum::<f64>() / x.len() as f64).ln();
        assert!((logmeanexp(&x) - naive).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn logmeanexp_shift_invariance(
        xs in proptest::collection::vec(-50.0f64..50.0, 1..40),
        k in -500.0f64..500.0,
    ) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + k).collect();
        prop_assert!((logmeanexp(&shifted) - (logmeanexp(&xs) + k)).abs() < 1e-10);
    }

    #[test]
    fn mcct_round_trip(
        dims in proptest::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) {
        let t = Rng::new(seed).normal_tensor(&dims);
        let (back, _) = io::decode(&io::encode(&t, io::DType::F64)).unwrap();
        prop_assert_eq!(back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.dims(), t.dims());
    }
}

#[test]
fn mcct_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mcct");
    let t = Rng::new(1).normal_tensor(&[3, 2, 2]);
    io::save(&path, &t, io::DType::F64).unwrap();
    assert_eq!(io::load(&path).unwrap(), t);
    let missing = io::load(&dir.path().join("nope.mcct")).unwrap_err();
    assert!(missing.to_string().contains("nope.mcct"));
}

#[test]
fn glorot_bounds_and_mean() {
    assert_eq!(glorot_limit(3, 3), 1.0);
    let t = glorot_uniform(&mut Rng::new(0), 3, 3, &[100_000]);
    assert!(t.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    // U(−1,1) has σ = 1/√3
    let sigma = 1.0 / 3f64.sqrt();
    assert!(t.mean().abs() < 4.0 * sigma / (t.len() as f64).sqrt());
    let a = glorot_uniform(&mut Rng::new(17), 10, 20, &[10, 20]);
    let b = glorot_uniform(&mut Rng::new(17), 10, 20, &[10, 20]);
    assert_eq!(a, b);
}

/// Scalar Adam written out independently of the store-based implementation.
fn reference_adam(theta0: f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * th;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        th -= lr * mh / (vh.sqrt() + eps);
        out.push(th);
    }
    out
}

#[test]
fn adam_tracks_scalar_reference_on_quadratic() {
    use mcc_tensor::{adam_step, AdamConfig, ParameterStore};
    let reference = reference_adam(1.0, 0.1, 200);
    let mut store = ParameterStore::new();
    let id = store.insert("theta", Tensor::scalar(1.0));
    let cfg = AdamConfig::new(0.1);
    for expected in &reference {
        let mut tape = Tape::new();
        let th = tape.param(&store, id);
        let sq = tape.mul(th, th).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        adam_step(&mut store, &cfg);
        assert!((store.value(id).item() - expected).abs() < 1e-12);
    }
    assert!(store.value(id).item().abs() < 0.05);
}
