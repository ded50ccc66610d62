use mcc_core::layers::{
    modulate, Activation, ContextIntegrator, ConvDims, DenseDims, Fusion, IntegrationMode, LayerInputs, Modulation,
    PointConvLayer, PointDenseLayer, TwoPointConvLayer, TwoPointDenseLayer, TwoPointOptions, TRILINEAR_CAP,
};
use mcc_tensor::gradcheck::check_params;
use mcc_tensor::{ParamId, ParameterStore, Rng, Tape, Tensor, Var};
use proptest::prelude::*;

fn set(store: &mut ParameterStore, id: ParamId, t: Tensor) {
    store.set_value(id, t).unwrap();
}

fn eye(store: &mut ParameterStore, id: ParamId) {
    let n = store.value(id).dims()[0];
    set(store, id, Tensor::identity(n));
}

fn zero(store: &mut ParameterStore, id: ParamId) {
    let d = store.value(id).dims().to_vec();
    set(store, id, Tensor::zeros(&d));
}

fn square(n: usize) -> DenseDims {
    DenseDims {
        input: n,
        other_input: n,
        other_rf: n,
        units: n,
        memory: n,
    }
}

fn identity_opts() -> TwoPointOptions {
    TwoPointOptions {
        context_activation: Activation::Identity,
        ..Default::default()
    }
}

/// Every map set to the identity and every bias to zero.
fn identity_layer(n: usize, opts: TwoPointOptions) -> (ParameterStore, TwoPointDenseLayer) {
    let mut store = ParameterStore::new();
    let layer = TwoPointDenseLayer::new(&mut store, &mut Rng::new(0), "l", square(n), opts).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if store.value(id).rank() == 2 {
            eye(&mut store, id);
        } else {
            zero(&mut store, id);
        }
    }
    (store, layer)
}

fn inputs(tape: &mut Tape, own: Tensor, other: Tensor, memory: Tensor) -> LayerInputs {
    let own = tape.constant(own);
    let other = tape.constant(other);
    let memory = tape.constant(memory);
    LayerInputs {
        own,
        other,
        other_rf: other,
        memory,
        shared_memory: None,
    }
}

fn row(values: &[f64]) -> Tensor {
    Tensor::new(&[1, values.len()], values.to_vec()).unwrap()
}

/// `x·W + b` written as loops.
fn affine_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k) = (x.dims()[0], x.dims()[1]);
    let m = w.dims()[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = b.data()[j];
            for l in 0..k {
                s += x.data()[i * k + l] * w.data()[l * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn rf_transform_identity_and_zero_maps() {
    let (mut store, layer) = identity_layer(2, identity_opts());
    let mut tape = Tape::new();
    let a = tape.constant(row(&[1.0, 2.0]));
    let r = layer.rf_transform(&mut tape, &store, a).unwrap();
    assert_eq!(tape.value(r).data(), &[1.0, 2.0]);

    zero(&mut store, layer.rf.weight);
    set(&mut store, layer.rf.bias.unwrap(), Tensor::vector(&[0.25, -3.0]));
    let mut tape = Tape::new();
    let a = tape.constant(row(&[1.0, 2.0]));
    let r = layer.rf_transform(&mut tape, &store, a).unwrap();
    assert_eq!(tape.value(r).data(), &[0.25, -3.0]);
}

#[test]
fn proximal_and_distal_identity_and_zero_maps() {
    let (mut store, layer) = identity_layer(3, identity_opts());
    let r = row(&[0.5, -1.0, 2.0]);
    let rbar = row(&[4.0, 0.0, -2.0]);
    let mut tape = Tape::new();
    let (rv, rb) = (tape.constant(r.clone()), tape.constant(rbar.clone()));
    let p = layer.proximal_context(&mut tape, &store, rv).unwrap();
    let d = layer.distal_context(&mut tape, &store, rb).unwrap();
    assert_eq!(tape.value(p), &r);
    assert_eq!(tape.value(d), &rbar);

    zero(&mut store, layer.proximal.weight);
    zero(&mut store, layer.distal.weight);
    set(&mut store, layer.proximal.bias.unwrap(), Tensor::vector(&[1.0, 2.0, 3.0]));
    set(&mut store, layer.distal.bias.unwrap(), Tensor::vector(&[-1.0, -2.0, -3.0]));
    let mut tape = Tape::new();
    let (rv, rb) = (tape.constant(r), tape.constant(rbar));
    let p = layer.proximal_context(&mut tape, &store, rv).unwrap();
    let d = layer.distal_context(&mut tape, &store, rb).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0]);
    assert_eq!(tape.value(d).data(), &[-1.0, -2.0, -3.0]);
}

#[test]
fn linear_streams_match_scalar_oracle() {
    let dims = DenseDims {
        input: 5,
        other_input: 4,
        other_rf: 3,
        units: 6,
        memory: 2,
    };
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(31);
    let layer = TwoPointDenseLayer::new(&mut store, &mut rng, "l", dims, TwoPointOptions::default()).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let d = store.value(id).dims().to_vec();
        let t = rng.normal_tensor(&d);
        set(&mut store, id, t);
    }
    let a = rng.normal_tensor(&[3, 5]);
    let rbar = rng.normal_tensor(&[3, 3]);
    let mut tape = Tape::new();
    let (av, rv) = (tape.constant(a.clone()), tape.constant(rbar.clone()));
    let r = layer.rf_transform(&mut tape, &store, av).unwrap();
    let p = layer.proximal_context(&mut tape, &store, r).unwrap();
    let d = layer.distal_context(&mut tape, &store, rv).unwrap();

    let v = |id: ParamId| store.value(id).clone();
    let r_ref = affine_oracle(&a, &v(layer.rf.weight), &v(layer.rf.bias.unwrap()));
    assert!(close(tape.value(r).data(), &r_ref, 1e-12));
    let r_t = Tensor::new(&[3, 6], r_ref).unwrap();
    let p_ref = affine_oracle(&r_t, &v(layer.proximal.weight), &v(layer.proximal.bias.unwrap()));
    assert!(close(tape.value(p).data(), &p_ref, 1e-12));
    let d_ref = affine_oracle(&rbar, &v(layer.distal.weight), &v(layer.distal.bias.unwrap()));
    assert!(close(tape.value(d).data(), &d_ref, 1e-12));
}

#[test]
fn memory_update_examples() {
    let (store, layer) = identity_layer(2, identity_opts());
    let mut tape = Tape::new();
    let m_prev = tape.constant(row(&[1.0, 0.0]));
    let a = tape.constant(row(&[0.0, 1.0]));
    let abar = tape.constant(row(&[1.0, 1.0]));
    let m = layer.universal_context_update(&mut tape, &store, m_prev, a, abar).unwrap();
    assert_eq!(tape.value(m).data(), &[2.0, 2.0]);

    let zero_m = tape.constant(row(&[0.0, 0.0]));
    let a = tape.constant(row(&[0.3, -0.7]));
    let abar = tape.constant(row(&[1.5, 2.0]));
    let m = layer.universal_context_update(&mut tape, &store, zero_m, a, abar).unwrap();
    assert!(close(tape.value(m).data(), &[1.8, 1.3], 1e-15));
}

#[test]
fn memory_two_step_recursion_matches_scalar_oracle() {
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(3);
    let layer = TwoPointDenseLayer::new(&mut store, &mut rng, "l", square(3), TwoPointOptions::default()).unwrap();
    let maps = layer.memory.unwrap();
    set(&mut store, maps.bias, rng.normal_tensor(&[3]));
    let xs: Vec<(Tensor, Tensor)> = (0..2).map(|_| (rng.normal_tensor(&[1, 3]), rng.normal_tensor(&[1, 3]))).collect();

    let mut tape = Tape::new();
    let mut m = tape.constant(Tensor::zeros(&[1, 3]));
    for (a, ab) in &xs {
        let (av, bv) = (tape.constant(a.clone()), tape.constant(ab.clone()));
        m = layer.universal_context_update(&mut tape, &store, m, av, bv).unwrap();
    }

    let v = |id: ParamId| store.value(id).data().to_vec();
    let (wr, wo, wc, b) = (v(maps.recurrent), v(maps.own), v(maps.cross), v(maps.bias));
    let mut mr = [0.0; 3];
    for (a, ab) in &xs {
        let mut next = [0.0; 3];
        for j in 0..3 {
            next[j] = b[j];
            for i in 0..3 {
                next[j] += mr[i] * wr[i * 3 + j] + a.data()[i] * wo[i * 3 + j] + ab.data()[i] * wc[i * 3 + j];
            }
        }
        mr = next;
    }
    assert!(close(tape.value(m).data(), &mr, 1e-12));
}

#[test]
fn additive_identity_integration_sums_streams() {
    let (store, layer) = identity_layer(3, identity_opts());
    let mut tape = Tape::new();
    let p = tape.constant(row(&[1.0, 2.0, 3.0]));
    let d = tape.constant(row(&[0.5, 0.5, -1.0]));
    let m = tape.constant(row(&[-2.0, 0.0, 4.0]));
    let c = layer.integrate_context(&mut tape, &store, p, d, m).unwrap();
    assert_eq!(tape.value(c).data(), &[-0.5, 2.5, 6.0]);
}

#[test]
fn trilinear_all_ones_on_unit_inputs() {
    let mut store = ParameterStore::new();
    let ctx = ContextIntegrator::trilinear(&mut store, &mut Rng::new(0), "c", [1, 1, 1, 1], Activation::Identity, 8)
        .unwrap();
    set(&mut store, ctx.weight_ids()[0], Tensor::ones(&[1, 1]));
    let mut tape = Tape::new();
    let one = tape.constant(row(&[1.0]));
    let c = ctx.integrate(&mut tape, &store, one, one, one).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0]);
}

#[test]
fn trilinear_reproduces_additive_map_on_augmented_inputs() {
    // p, d, m carry a constant second coordinate, so a trilinear form can
    // express each linear term as x·1·1
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(12);
    let add = ContextIntegrator::additive(&mut store, &mut rng, "a", [2, 2, 2, 3], Activation::Identity);
    let tri =
        ContextIntegrator::trilinear(&mut store, &mut rng, "t", [2, 2, 2, 3], Activation::Identity, TRILINEAR_CAP)
            .unwrap();
    for id in add.weight_ids().into_iter().chain([add.bias]) {
        let d = store.value(id).dims().to_vec();
        let t = rng.normal_tensor(&d);
        set(&mut store, id, t);
    }
    let w: Vec<Vec<f64>> = add.weight_ids().iter().map(|&id| store.value(id).data().to_vec()).collect();
    let (wp, wd, wm) = (&w[0], &w[1], &w[2]);
    let mut theta = vec![0.0; 8 * 3];
    let at = |mu: usize, nu: usize, xi: usize| (mu * 2 + nu) * 2 + xi;
    for e in 0..3 {
        theta[at(0, 1, 1) * 3 + e] = wp[e];
        theta[at(1, 0, 1) * 3 + e] = wd[e];
        theta[at(1, 1, 0) * 3 + e] = wm[e];
        theta[at(1, 1, 1) * 3 + e] = wp[3 + e] + wd[3 + e] + wm[3 + e];
    }
    set(&mut store, tri.weight_ids()[0], Tensor::new(&[8, 3], theta).unwrap());
    let b = store.value(add.bias).clone();
    set(&mut store, tri.bias, b);

    for _ in 0..10 {
        let aug = |rng: &mut Rng| {
            let x: Vec<f64> = (0..4).flat_map(|_| [rng.normal(), 1.0]).collect();
            Tensor::new(&[4, 2], x).unwrap()
        };
        let (p, d, m) = (aug(&mut rng), aug(&mut rng), aug(&mut rng));
        let mut tape = Tape::new();
        let (p, d, m) = (tape.constant(p), tape.constant(d), tape.constant(m));
        let ca = add.integrate(&mut tape, &store, p, d, m).unwrap();
        let ct = tri.integrate(&mut tape, &store, p, d, m).unwrap();
        assert!(close(tape.value(ca).data(), tape.value(ct).data(), 1e-12));
    }
}

#[test]
fn modulate_examples() {
    let mut tape = Tape::new();
    let r = tape.constant(row(&[2.0, 3.0]));
    let ones = tape.constant(row(&[1.0, 1.0]));
    let zeros = tape.constant(row(&[0.0, 0.0]));
    let c = tape.constant(row(&[0.5, -1.0]));
    let a = modulate(&mut tape, r, ones).unwrap();
    assert_eq!(tape.value(a).data(), &[2.0, 3.0]);
    let a = modulate(&mut tape, r, zeros).unwrap();
    assert_eq!(tape.value(a).data(), &[0.0, 0.0]);
    let a = modulate(&mut tape, r, c).unwrap();
    assert_eq!(tape.value(a).data(), &[1.0, -3.0]);
    let wrong = tape.constant(row(&[1.0, 1.0, 1.0]));
    assert!(modulate(&mut tape, r, wrong).is_err());
}

#[test]
fn hand_traced_scalar_forward() {
    let (store, layer) = identity_layer(1, identity_opts());
    let mut tape = Tape::new();
    let inp = inputs(&mut tape, row(&[1.0]), row(&[1.0]), row(&[0.0]));
    let out = layer.forward(&mut tape, &store, inp).unwrap();
    let v = |x: Var| tape.value(x).item();
    assert_eq!(
        [v(out.rf), v(out.proximal), v(out.distal), v(out.memory), v(out.context), v(out.activation)],
        [1.0, 1.0, 1.0, 2.0, 4.0, 4.0]
    );
}

#[test]
fn silent_other_stream_enters_only_through_d_and_m() {
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(8);
    let layer = TwoPointDenseLayer::new(&mut store, &mut rng, "l", square(4), TwoPointOptions::default()).unwrap();
    let a = rng.normal_tensor(&[2, 4]);
    let run = |store: &ParameterStore| {
        let mut tape = Tape::new();
        let inp = inputs(&mut tape, a.clone(), Tensor::zeros(&[2, 4]), Tensor::zeros(&[2, 4]));
        let out = layer.forward(&mut tape, store, inp).unwrap();
        (tape.value(out.distal).clone(), tape.value(out.memory).clone(), tape.value(out.activation).clone())
    };
    let (d, m, act) = run(&store);
    assert!(d.data().iter().all(|&x| x == 0.0));
    // cutting the cross map and the distal map out changes nothing
    let maps = layer.memory.unwrap();
    zero(&mut store, maps.cross);
    zero(&mut store, layer.distal.weight);
    let (d2, m2, act2) = run(&store);
    assert_eq!(d, d2);
    assert_eq!(m, m2);
    assert_eq!(act, act2);
}

#[test]
fn forward_is_bit_deterministic() {
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(4);
    let layer = TwoPointDenseLayer::new(&mut store, &mut rng, "l", square(5), TwoPointOptions::default()).unwrap();
    let (a, b) = (rng.normal_tensor(&[3, 5]), rng.normal_tensor(&[3, 5]));
    let run = || {
        let mut tape = Tape::new();
        let inp = inputs(&mut tape, a.clone(), b.clone(), Tensor::zeros(&[3, 5]));
        let out = layer.forward(&mut tape, &store, inp).unwrap();
        tape.value(out.activation).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Sets the integrated context to the constant `value` by zeroing every
/// context weight and using the bias.
fn pin_context(store: &mut ParameterStore, layer: &TwoPointDenseLayer, value: f64) {
    for id in layer.integrator.weight_ids() {
        zero(store, id);
    }
    let u = layer.dims.units;
    set(store, layer.integrator.bias, Tensor::full(&[u], value));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn zero_context_vetoes_transmission(seed in 0u64..1000, n in 1usize..6) {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(seed);
        let opts = identity_opts();
        let layer = TwoPointDenseLayer::new(&mut store, &mut rng, "l", square(n), opts).unwrap();
        pin_context(&mut store, &layer, 0.0);
        let mut tape = Tape::new();
        let inp = inputs(&mut tape, rng.normal_tensor(&[2, n]), rng.normal_tensor(&[2, n]), rng.normal_tensor(&[2, n]));
        let out = layer.forward(&mut tape, &store, inp).unwrap();
        prop_assert!(tape.value(out.activation).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unit_context_degenerates_to_point_neuron(seed in 0u64..1000, n in 1usize..6) {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(seed);
        let layer = TwoPointDenseLayer::new(&mut store, &mut rng, "l", square(n), identity_opts()).unwrap();
        pin_context(&mut store, &layer, 1.0);
        let mut tape = Tape::new();
        let inp = inputs(&mut tape, rng.normal_tensor(&[2, n]), rng.normal_tensor(&[2, n]), rng.normal_tensor(&[2, n]));
        let out = layer.forward(&mut tape, &store, inp).unwrap();
        let expected = tape.value(out.rf).map(|x| x.max(0.0));
        prop_assert_eq!(tape.value(out.activation), &expected);
    }
}

#[test]
fn neighborhood_modulation_uniform_and_zero_context() {
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(6);
    let layer = TwoPointDenseLayer::new(&mut store, &mut rng, "l", square(4), identity_opts()).unwrap();
    let a = rng.normal_tensor(&[2, 4]);
    let b = rng.normal_tensor(&[2, 4]);
    for (value, scale) in [(0.5, 0.25), (2.0, 4.0), (0.0, 0.0)] {
        pin_context(&mut store, &layer, value);
        let mut tape = Tape::new();
        let inp = inputs(&mut tape, a.clone(), b.clone(), Tensor::zeros(&[2, 4]));
        let out = layer.forward_neighborhood(&mut tape, &store, inp).unwrap();
        let expected = tape.value(out.rf).map(|x| x * scale);
        assert!(close(tape.value(out.modulated).data(), expected.data(), 1e-12));
    }
}

fn gradcheck_dense(opts: TwoPointOptions, modulation: Modulation, dims: DenseDims) -> f64 {
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(17);
    let layer = TwoPointDenseLayer::new(&mut store, &mut rng, "l", dims, opts).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let d = store.value(id).dims().to_vec();
        let t = rng.uniform_tensor(&d, -0.8, 0.8);
        set(&mut store, id, t);
    }
    let a = rng.normal_tensor(&[3, dims.input]);
    let b = rng.normal_tensor(&[3, dims.other_input]);
    let rb = rng.normal_tensor(&[3, dims.other_rf]);
    let m = rng.normal_tensor(&[3, dims.memory]);
    let report = check_params(&mut store, 1e-6, |tape, store| {
        let mut inp = inputs(tape, a.clone(), b.clone(), m.clone());
        inp.other_rf = tape.constant(rb.clone());
        let out = layer.forward_with(tape, store, inp, modulation).unwrap();
        Ok(tape.sum(out.activation))
    })
    .unwrap();
    report.max_relative_error()
}

#[test]
fn dense_forward_gradients_match_finite_differences() {
    let dims = DenseDims {
        input: 4,
        other_input: 3,
        other_rf: 2,
        units: 5,
        memory: 3,
    };
    let tanh = TwoPointOptions {
        activation: Activation::Tanh,
        ..Default::default()
    };
    for (name, opts, modulation) in [
        ("relu/hadamard", TwoPointOptions::default(), Modulation::Hadamard),
        ("tanh/hadamard", tanh, Modulation::Hadamard),
        ("relu/neighborhood", TwoPointOptions::default(), Modulation::Neighborhood),
    ] {
        let err = gradcheck_dense(opts, modulation, dims);
        assert!(err < 1e-4, "{name}: {err}");
    }
    let tri = TwoPointOptions {
        integration: IntegrationMode::Trilinear,
        activation: Activation::Tanh,
        ..Default::default()
    };
    let small = DenseDims {
        units: 3,
        memory: 2,
        ..dims
    };
    let err = gradcheck_dense(tri, Modulation::Hadamard, small);
    assert!(err < 1e-4, "trilinear: {err}");
}

fn conv_dims() -> ConvDims {
    ConvDims {
        in_channels: 2,
        other_channels: 3,
        other_rf_channels: 3,
        filters: 4,
        kernel: 3,
        stride: 2,
        memory: 3,
    }
}

#[test]
fn conv_layer_geometry_and_context_limits() {
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(2);
    let dims = conv_dims();
    let layer = TwoPointConvLayer::new(&mut store, &mut rng, "c", dims, identity_opts()).unwrap();
    let a = rng.normal_tensor(&[2, 2, 9, 9]);
    let b = rng.normal_tensor(&[2, 3, 5, 5]);
    let run = |store: &ParameterStore| {
        let mut tape = Tape::new();
        let inp = inputs(&mut tape, a.clone(), b.clone(), Tensor::zeros(&[2, 3]));
        let out = layer.forward(&mut tape, store, inp).unwrap();
        for v in [out.rf, out.proximal, out.context, out.activation] {
            assert_eq!(tape.dims(v), &[2, 4, 4, 4]);
        }
        (tape.value(out.rf).clone(), tape.value(out.activation).clone())
    };
    run(&store);
    for id in [layer.context_proximal.kernel, layer.context_distal.weight, layer.context_memory.weight] {
        zero(&mut store, id);
    }
    set(&mut store, layer.context_proximal.bias, Tensor::zeros(&[4]));
    let (_, act) = run(&store);
    assert!(act.data().iter().all(|&x| x == 0.0));
    set(&mut store, layer.context_proximal.bias, Tensor::ones(&[4]));
    let (r, act) = run(&store);
    assert_eq!(act, r.map(|x| x.max(0.0)));
    assert_eq!(dims.out_extent(9), 4);

    let tri = TwoPointOptions {
        integration: IntegrationMode::Trilinear,
        ..Default::default()
    };
    assert!(TwoPointConvLayer::new(&mut store, &mut rng, "t", dims, tri).is_err());
}

#[test]
fn conv_forward_gradients_match_finite_differences() {
    for modulation in [Modulation::Hadamard, Modulation::Neighborhood] {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(23);
        let opts = TwoPointOptions {
            activation: Activation::Tanh,
            ..Default::default()
        };
        let layer = TwoPointConvLayer::new(&mut store, &mut rng, "c", conv_dims(), opts).unwrap();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let d = store.value(id).dims().to_vec();
            let t = rng.uniform_tensor(&d, -0.8, 0.8);
            set(&mut store, id, t);
        }
        let a = rng.normal_tensor(&[2, 2, 7, 7]);
        let b = rng.normal_tensor(&[2, 3, 4, 4]);
        let m = rng.normal_tensor(&[2, 3]);
        let report = check_params(&mut store, 1e-6, |tape, store| {
            let inp = inputs(tape, a.clone(), b.clone(), m.clone());
            let out = layer.forward_with(tape, store, inp, modulation).unwrap();
            Ok(tape.sum(out.activation))
        })
        .unwrap();
        assert!(report.max_relative_error() < 1e-4, "{modulation:?}: {:?}", report.worst());
    }
}

#[test]
fn shared_memory_bypasses_own_maps() {
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(1);
    let opts = TwoPointOptions {
        owns_memory: false,
        ..identity_opts()
    };
    let layer = TwoPointDenseLayer::new(&mut store, &mut rng, "l", square(2), opts).unwrap();
    let mut tape = Tape::new();
    let mut inp = inputs(&mut tape, row(&[1.0, 1.0]), row(&[1.0, 1.0]), row(&[0.0, 0.0]));
    let shared = tape.constant(row(&[3.0, -3.0]));
    inp.shared_memory = Some(shared);
    let out = layer.forward(&mut tape, &store, inp).unwrap();
    assert_eq!(out.memory, shared);
}

#[test]
fn baseline_add_fusion_with_identity_weights() {
    let mut store = ParameterStore::new();
    let layer =
        PointDenseLayer::new(&mut store, &mut Rng::new(0), "b", 3, 3, 3, Fusion::Add, Activation::Relu).unwrap();
    eye(&mut store, layer.map.weight);
    let mut tape = Tape::new();
    let a = tape.constant(row(&[1.0, -2.0, 0.5]));
    let b = tape.constant(row(&[0.5, 1.0, -1.0]));
    let y = layer.baseline_forward(&mut tape, &store, a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 0.0, 0.0]);
}

#[test]
fn baseline_fusion_geometry() {
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(0);
    let cat = PointDenseLayer::new(&mut store, &mut rng, "c", 4, 7, 2, Fusion::Concat, Activation::Relu).unwrap();
    assert_eq!(cat.map.dims(&store), (11, 2));
    assert!(PointDenseLayer::new(&mut store, &mut rng, "m", 4, 7, 2, Fusion::Mul, Activation::Relu).is_err());
    assert_eq!(Fusion::parse("add").unwrap(), Fusion::Add);
    assert!(Fusion::parse("max").is_err());
}

#[test]
fn baseline_gradients_match_finite_differences() {
    for fusion in [Fusion::Concat, Fusion::Add, Fusion::Mul] {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(5);
        let layer = PointDenseLayer::new(&mut store, &mut rng, "b", 4, 4, 3, fusion, Activation::Tanh).unwrap();
        let (a, b) = (rng.normal_tensor(&[3, 4]), rng.normal_tensor(&[3, 4]));
        let report = check_params(&mut store, 1e-6, |tape, store| {
            let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let y = layer.baseline_forward(tape, store, av, bv).unwrap();
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_relative_error() < 1e-4, "{fusion:?}: {:?}", report.worst());
    }
    let mut store = ParameterStore::new();
    let mut rng = Rng::new(6);
    let layer = PointConvLayer::new(&mut store, &mut rng, "pc", 2, 3, 4, 3, 2, Activation::Tanh);
    let (a, b) = (rng.normal_tensor(&[2, 2, 7, 7]), rng.normal_tensor(&[2, 3, 4, 4]));
    let report = check_params(&mut store, 1e-6, |tape, store| {
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = layer.baseline_forward(tape, store, av, bv).unwrap();
        Ok(tape.sum(y))
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-4, "conv: {:?}", report.worst());
}
