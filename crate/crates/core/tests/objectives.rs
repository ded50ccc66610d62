use mcc_core::objectives::{
    analytic_gaussian_mi, dv_bound, dv_bound_values, energy_term, firing_probability, ideal_binary_mask,
    loss_mi, loss_reconstruction, mask_loss, shuffle_marginals, LossConfig,
};
use mcc_core::Error;
use mcc_tensor::gradcheck::check_params;
use mcc_tensor::{adam_step, glorot_uniform, AdamConfig, ParamId, ParameterStore, Rng, Tape, Tensor, Var};
use proptest::prelude::*;

fn scalar_eval(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).item()
}

#[test]
fn dv_bound_examples() {
    assert_eq!(dv_bound_values(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    assert_eq!(dv_bound_values(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
    assert!(dv_bound_values(&[1.0], &[0.0]).is_err());
    let v = scalar_eval(|t| {
        let j = t.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let m = t.constant(Tensor::vector(&[0.0, 0.5, -1.0]));
        dv_bound(t, j, m).unwrap()
    });
    assert!((v - dv_bound_values(&[1.0, 2.0, 3.0], &[0.0, 0.5, -1.0]).unwrap()).abs() < 1e-15);
}

proptest! {
    #[test]
    fn dv_bound_shift_cancels(
        j in proptest::collection::vec(-20.0f64..20.0, 2..30),
        m in proptest::collection::vec(-20.0f64..20.0, 2..30),
        k in -100.0f64..100.0,
    ) {
        let base = dv_bound_values(&j, &m).unwrap();
        let js: Vec<f64> = j.iter().map(|x| x + k).collect();
        let ms: Vec<f64> = m.iter().map(|x| x + k).collect();
        prop_assert!((dv_bound_values(&js, &ms).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn energy_is_monotone_in_each_activation(
        a in proptest::collection::vec(0.0f64..2.0, 1..20),
        idx in any::<prop::sample::Index>(),
        bump in 0.0f64..1.0,
    ) {
        let e = |values: &[f64]| scalar_eval(|t| {
            let v = t.constant(Tensor::vector(values));
            energy_term(t, &[v], 0.1).unwrap()
        });
        let mut b = a.clone();
        let i = idx.index(a.len());
        b[i] += bump;
        let (ea, eb) = (e(&a), e(&b));
        prop_assert!(eb >= ea);
        // tanh rounds to exactly 1 in f64 once a/τ_f passes ~19
        prop_assert!((0.0..=1.0).contains(&ea));
    }

    #[test]
    fn ideal_mask_is_scale_invariant(
        pairs in proptest::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..30),
        s in 0.01f64..100.0,
    ) {
        let clean = Tensor::vector(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let noise = Tensor::vector(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let base = ideal_binary_mask(&clean, &noise, 0.0).unwrap();
        let scaled = ideal_binary_mask(&clean.map(|x| x * s), &noise.map(|x| x * s), 0.0).unwrap();
        // away from the 0 dB boundary the decision cannot flip through rounding
        for ((b, sc), (c, n)) in base.data().iter().zip(scaled.data()).zip(&pairs) {
            if (c - n).abs() > 1e-9 {
                prop_assert_eq!(b, sc);
            }
        }
    }
}

#[test]
fn shuffle_marginals_properties() {
    let one = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(shuffle_marginals(&one, &mut Rng::new(0)).unwrap(), one);

    let y = Tensor::new(&[6, 2], (0..12).map(f64::from).collect()).unwrap();
    let a = shuffle_marginals(&y, &mut Rng::new(9)).unwrap();
    let b = shuffle_marginals(&y, &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
    let mut rows: Vec<Vec<u64>> = a.data().chunks(2).map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
    rows.sort();
    let mut orig: Vec<Vec<u64>> = y.data().chunks(2).map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
    orig.sort();
    assert_eq!(rows, orig);
}

#[test]
fn energy_term_examples() {
    let e = |values: &[f64], tau: f64| {
        scalar_eval(|t| {
            let v = t.constant(Tensor::vector(values));
            energy_term(t, &[v], tau).unwrap()
        })
    };
    assert_eq!(e(&[0.0, 0.0, 0.0], 0.1), 0.0);
    assert!((e(&[0.1], 0.1) - 1f64.tanh()).abs() < 1e-15);
    assert!((e(&[0.1], 0.1) - 0.7616).abs() < 5e-5);
    // saturated units count as one firing each
    let acts = [50.0, 0.0, 80.0, 0.0, 0.0, 120.0];
    let hard = acts.iter().filter(|&&a| a > 0.0).count() as f64 / acts.len() as f64;
    assert!((e(&acts, 0.1) - hard).abs() < 1e-12);

    let mut tape = Tape::new();
    let neg = tape.constant(Tensor::vector(&[0.5, -0.01]));
    assert!(matches!(energy_term(&mut tape, &[neg], 0.1), Err(Error::Contract(_))));
}

#[test]
fn energy_pools_units_across_tensors() {
    let v = scalar_eval(|t| {
        let a = t.constant(Tensor::vector(&[0.1]));
        let b = t.constant(Tensor::zeros(&[3]));
        energy_term(t, &[a, b], 0.1).unwrap()
    });
    assert!((v - 1f64.tanh() / 4.0).abs() < 1e-15);
}

#[test]
fn loss_examples() {
    let cfg = LossConfig {
        alpha: 1.0,
        beta: 1.0,
        gamma: 0.0,
        ..Default::default()
    };
    let l1 = scalar_eval(|t| {
        let mi = t.constant(Tensor::scalar(2.0));
        let e = t.constant(Tensor::scalar(0.7));
        loss_mi(t, mi, e, &cfg).unwrap()
    });
    assert_eq!(l1, -2.0);
    let with_gamma = LossConfig { gamma: 0.5, ..cfg };
    let l1_at = |energy: f64| {
        scalar_eval(|t| {
            let mi = t.constant(Tensor::scalar(2.0));
            let e = t.constant(Tensor::scalar(energy));
            loss_mi(t, mi, e, &with_gamma).unwrap()
        })
    };
    assert!(l1_at(0.3) > l1_at(0.2));

    let l2 = |z: &[f64], zh: &[f64], energy: f64, cfg: &LossConfig| {
        scalar_eval(|t| {
            let z = t.constant(Tensor::vector(z));
            let zh = t.constant(Tensor::vector(zh));
            let e = t.constant(Tensor::scalar(energy));
            loss_reconstruction(t, z, zh, e, cfg).unwrap()
        })
    };
    assert_eq!(l2(&[0.0, 0.0], &[1.0, 1.0], 0.3, &cfg), 1.0);
    assert_eq!(l2(&[0.4, -2.0], &[0.4, -2.0], 0.3, &with_gamma), 0.5 * 0.3);

    let mut tape = Tape::new();
    let (a, b, e) = (
        tape.constant(Tensor::zeros(&[2])),
        tape.constant(Tensor::zeros(&[3])),
        tape.constant(Tensor::scalar(0.0)),
    );
    assert!(loss_reconstruction(&mut tape, a, b, e, &cfg).is_err());
}

#[test]
fn reconstruction_loss_gradients_through_a_model() {
    // two rectified layers, with the energy term taken over the hidden units
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(40);
    let w1 = store.insert("w1", glorot_uniform(&mut rng, 4, 6, &[4, 6]));
    let b1 = store.insert("b1", rng.uniform_tensor(&[6], 0.1, 0.3));
    let w2 = store.insert("w2", glorot_uniform(&mut rng, 6, 4, &[6, 4]));
    let x = rng.normal_tensor(&[5, 4]);
    let z = rng.normal_tensor(&[5, 4]);
    let cfg = LossConfig {
        gamma: 0.3,
        ..Default::default()
    };
    let report = check_params(&mut store, 1e-6, |t, s| {
        let xv = t.constant(x.clone());
        let zv = t.constant(z.clone());
        let (w1, b1, w2) = (t.param(s, w1), t.param(s, b1), t.param(s, w2));
        let h = t.matmul(xv, w1)?;
        let h = t.add_bias(h, b1)?;
        let h = t.relu(h);
        let y = t.matmul(h, w2)?;
        let e = energy_term(t, &[h], cfg.tau_f).unwrap();
        Ok(loss_reconstruction(t, zv, y, e, &cfg).unwrap())
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-4, "{:?}", report.worst());
}

#[test]
fn ideal_binary_mask_examples() {
    let m = ideal_binary_mask(
        &Tensor::vector(&[2.0, 1.0, 1.0, 0.0, 3.0]),
        &Tensor::vector(&[1.0, 2.0, 1.0, 0.0, 0.0]),
        0.0,
    )
    .unwrap();
    assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0, 1.0]);
    // +6 dB passes a 5 dB threshold but not a 7 dB one
    let c = Tensor::vector(&[2.0]);
    let n = Tensor::vector(&[1.0]);
    assert_eq!(ideal_binary_mask(&c, &n, 5.0).unwrap().data(), &[1.0]);
    assert_eq!(ideal_binary_mask(&c, &n, 7.0).unwrap().data(), &[0.0]);
    assert!(matches!(
        ideal_binary_mask(&Tensor::vector(&[-1.0]), &n, 0.0),
        Err(Error::Domain(_))
    ));
}

#[test]
fn mask_loss_examples() {
    let ibm = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    let at = |logits: Tensor| {
        scalar_eval(|t| {
            let l = t.constant(logits);
            mask_loss(t, l, &ibm).unwrap()
        })
    };
    assert!((at(Tensor::zeros(&[2, 2])) - 2f64.ln()).abs() < 1e-15);
    let confident = ibm.map(|y| if y == 1.0 { 40.0 } else { -40.0 });
    assert!(at(confident) < 1e-15);

    let logits = Rng::new(3).uniform_tensor(&[2, 2], -4.0, 4.0);
    let naive: f64 = logits
        .data()
        .iter()
        .zip(ibm.data())
        .map(|(&x, &y)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 4.0;
    assert!((at(logits) - naive).abs() < 1e-10);

    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[1]));
    assert!(mask_loss(&mut tape, l, &Tensor::vector(&[0.5])).is_err());
}

#[test]
fn firing_probability_examples() {
    let zeros = Tensor::zeros(&[4, 3]);
    assert_eq!(firing_probability(&zeros, 0.0).unwrap().data(), &[0.0; 3]);
    let half = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.3]).unwrap();
    assert_eq!(firing_probability(&half, 0.0).unwrap().data(), &[0.5, 0.25]);
    assert_eq!(firing_probability(&half, 0.5).unwrap().data(), &[0.5, 0.0]);
    assert!(firing_probability(&Tensor::vector(&[f64::NAN]).reshape(&[1, 1]).unwrap(), 0.0).is_err());
}

#[test]
fn firing_probability_agrees_with_sharp_energy() {
    let mut rng = Rng::new(77);
    let records = rng.uniform_tensor(&[200, 30], -1.0, 1.0).map(|x| x.max(0.0));
    let hard = firing_probability(&records, 0.0).unwrap().mean();
    let soft = scalar_eval(|t| {
        let v = t.constant(records.clone());
        energy_term(t, &[v], 1e-4).unwrap()
    });
    assert!((hard - soft).abs() < 0.05, "{hard} vs {soft}");
}

#[test]
fn analytic_gaussian_mi_examples() {
    assert_eq!(analytic_gaussian_mi(&[0.0; 5]).unwrap(), 0.0);
    let one = analytic_gaussian_mi(&[0.5]).unwrap();
    assert!((one - 0.1438).abs() < 5e-5);
    let twenty = analytic_gaussian_mi(&[0.5; 20]).unwrap();
    assert!((twenty - 2.8768).abs() < 5e-5);
    assert!((twenty - 20.0 * one).abs() < 1e-12);
    assert!(matches!(analytic_gaussian_mi(&[1.0]), Err(Error::Domain(_))));
}

/// Monte-Carlo average of the log density ratio `log p(x,y) / p(x)p(y)`.
#[test]
fn analytic_gaussian_mi_matches_monte_carlo() {
    let rho: f64 = 0.5;
    let mut rng = Rng::new(5);
    let n = 200_000;
    let s2 = 1.0 - rho * rho;
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let x = rng.normal();
            let y = rho * x + s2.sqrt() * rng.normal();
            -0.5 * s2.ln() - (x * x - 2.0 * rho * x * y + y * y) / (2.0 * s2) + (x * x + y * y) / 2.0
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let exact = analytic_gaussian_mi(&[rho]).unwrap();
    assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} (se {se})");
}

/// Critic `T(x, y) = w₂·tanh(W₁[x, y] + b₁) + b₂`.
struct Critic {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
}

impl Critic {
    fn scores(&self, t: &mut Tape, s: &ParameterStore, x: &Tensor, y: &Tensor) -> Var {
        let xy = {
            let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
            t.concat_cols(xv, yv).unwrap()
        };
        let (w1, b1, w2) = (t.param(s, self.w1), t.param(s, self.b1), t.param(s, self.w2));
        let h = t.matmul(xy, w1).unwrap();
        let h = t.add_bias(h, b1).unwrap();
        let h = t.tanh(h);
        t.matmul(h, w2).unwrap()
    }
}

fn gaussian_pairs(rng: &mut Rng, n: usize, rho: f64) -> (Tensor, Tensor) {
    let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let y: Vec<f64> = x.iter().map(|&x| rho * x + (1.0 - rho * rho).sqrt() * rng.normal()).collect();
    (Tensor::new(&[n, 1], x).unwrap(), Tensor::new(&[n, 1], y).unwrap())
}

#[test]
fn trained_dv_bound_approaches_gaussian_mi_from_below() {
    let rho = 0.8;
    let exact = analytic_gaussian_mi(&[rho]).unwrap();
    assert!((exact - 0.5108).abs() < 5e-5);
    let mut rng = Rng::new(2024);
    let mut store = ParameterStore::new();
    let critic = Critic {
        w1: store.insert("w1", glorot_uniform(&mut rng, 2, 32, &[2, 32])),
        b1: store.insert("b1", Tensor::zeros(&[32])),
        w2: store.insert("w2", glorot_uniform(&mut rng, 32, 1, &[32, 1])),
    };
    let adam = AdamConfig::new(3e-3);
    for _ in 0..1500 {
        let (x, y) = gaussian_pairs(&mut rng, 256, rho);
        let ym = shuffle_marginals(&y, &mut rng).unwrap();
        let mut t = Tape::new();
        let j = critic.scores(&mut t, &store, &x, &y);
        let m = critic.scores(&mut t, &store, &x, &ym);
        let dv = dv_bound(&mut t, j, m).unwrap();
        let loss = t.scale(dv, -1.0);
        t.backward(loss, &mut store).unwrap();
        adam_step(&mut store, &adam);
    }
    let (x, y) = gaussian_pairs(&mut rng, 50_000, rho);
    let ym = shuffle_marginals(&y, &mut rng).unwrap();
    let mut t = Tape::new();
    let j = critic.scores(&mut t, &store, &x, &y);
    let m = critic.scores(&mut t, &store, &x, &ym);
    let est = dv_bound_values(t.value(j).data(), t.value(m).data()).unwrap();
    assert!(est > 0.85 * exact && est < exact + 0.02, "estimate {est}, exact {exact}");
}
