use perforated::grad::{
    backprop, backprop_perforated, backprop_standard, finite_diff_check, finite_diff_entries, BackpropMode, FdGraph,
    LossKind, ParamSlot,
};
use perforated::synth::{add_random_dendrites, random_batch, random_spec};
use perforated::{Activation, Error, LayerSpec, Labels, Mode, Network, NetworkSpec, Tensor};

fn targets_for(net: &Network, batch: usize, seed: u64) -> (LossKind, Labels) {
    let width = net.output_shape()[0];
    if seed % 3 == 0 {
        let v = Tensor::from_fn(&[batch, width], |i| ((i as f64 + seed as f64) * 0.731).sin());
        (LossKind::Mse, Labels::Values(v))
    } else {
        let width = width.max(1);
        let c = (0..batch).map(|i| (i + seed as usize) % width).collect();
        (LossKind::CrossEntropySoftmax, Labels::Classes(c))
    }
}

#[test]
fn closed_form_single_weight() {
    let spec = NetworkSpec {
        input_shape: vec![1],
        layers: vec![LayerSpec::dense(1, Activation::Identity).without_bias()],
    };
    let mut net = Network::new(spec, 0).unwrap();
    let (w, x, t) = (0.7, 1.3, -0.4);
    net.host_mut(0).unwrap().weight_mut().data_mut()[0] = w;
    let xb = Tensor::new(vec![1, 1], vec![x]).unwrap();
    let (out, cache) = net.forward(&xb, Mode::Eval, 0).unwrap();
    let labels = Labels::Values(Tensor::new(vec![1, 1], vec![t]).unwrap());
    let (_, delta) = LossKind::Mse.evaluate(&out, &labels).unwrap();
    let g = backprop_standard(&net, &cache, &delta).unwrap();
    let gw = g.host(0).unwrap().weight.data()[0];
    assert!((gw - 2.0 * (w * x - t) * x).abs() < 1e-15);
}

#[test]
fn zero_output_delta_gives_zero_gradients() {
    let mut net = Network::new(random_spec(3, Activation::Tanh), 3).unwrap();
    add_random_dendrites(&mut net, 2, true, 3).unwrap();
    let x = random_batch(&net, 4, 3);
    let (out, cache) = net.forward(&x, Mode::Eval, 0).unwrap();
    for mode in [BackpropMode::Standard, BackpropMode::Perforated, BackpropMode::GdDendrites] {
        let g = backprop(&net, &cache, &Tensor::zeros(out.shape()), mode).unwrap();
        for (_, t) in perforated::grad::grad_slots(&g) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn loss_delta_matches_finite_difference() {
    let out = Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.5, 1.5, 0.1, -0.3]).unwrap();
    let cases = [
        (LossKind::CrossEntropySoftmax, Labels::Classes(vec![2, 0])),
        (LossKind::Mse, Labels::Values(Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap())),
    ];
    for (loss, labels) in cases {
        let (l, delta) = loss.evaluate(&out, &labels).unwrap();
        assert!(l >= 0.0);
        for i in 0..out.len() {
            let mut up = out.clone();
            up.data_mut()[i] += 1e-6;
            let mut dn = out.clone();
            dn.data_mut()[i] -= 1e-6;
            let num = (loss.evaluate(&up, &labels).unwrap().0 - loss.evaluate(&dn, &labels).unwrap().0) / 2e-6;
            let a = delta.data()[i];
            assert!((a - num).abs() / a.abs().max(1e-8) < 1e-6, "{loss:?} {i}: {a} vs {num}");
        }
    }
}

#[test]
fn standard_matches_finite_differences_on_random_nets() {
    for seed in 0..8 {
        let act = Activation::ALL[seed as usize % 4];
        let net = Network::new(random_spec(seed, act), seed).unwrap();
        let x = random_batch(&net, 3, seed);
        let (loss, y) = targets_for(&net, 3, seed);
        let err = finite_diff_check(&net, loss, &x, &y, false, 1e-5).unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn standard_through_dendrites_matches_full_graph() {
    for seed in 0..6 {
        let mut net = Network::new(random_spec(seed, Activation::Tanh), seed).unwrap();
        add_random_dendrites(&mut net, 2, seed % 2 == 0, seed).unwrap();
        let x = random_batch(&net, 3, seed + 10);
        let (loss, y) = targets_for(&net, 3, seed);
        let err = finite_diff_check(&net, loss, &x, &y, false, 1e-5).unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn perforated_matches_detached_graph() {
    for seed in 0..6 {
        let mut net = Network::new(random_spec(seed, Activation::Sigmoid), seed).unwrap();
        add_random_dendrites(&mut net, 1 + seed as usize % 3, false, seed).unwrap();
        let x = random_batch(&net, 3, seed + 20);
        let (loss, y) = targets_for(&net, 3, seed);
        let err = finite_diff_check(&net, loss, &x, &y, true, 1e-5).unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn gd_dendrite_input_grads_follow_own_output_connection() {
    // One dense layer: the only path from a dendrite to the loss is its own
    // output connection, so the GD gradient equals the full-graph one.
    for seed in 0..4 {
        let spec = NetworkSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::dense(2, Activation::Tanh)],
        };
        let mut net = Network::new(spec, seed).unwrap();
        add_random_dendrites(&mut net, 2, true, seed).unwrap();
        for bank in net.host_mut(0).unwrap().dendrites_mut() {
            // Thaw through the public constructor path.
            let t = perforated::DendriteBank::new_trainable(
                bank.input_weights().clone(),
                bank.sibling_weights().clone(),
                bank.bias().cloned(),
                bank.output_weights().clone(),
                bank.activation(),
                bank.birth_cycle(),
            )
            .unwrap();
            *bank = t;
        }
        let x = random_batch(&net, 4, seed);
        let y = Labels::Classes(vec![0, 1, 1, 0]);
        let entries = finite_diff_entries(&net, LossKind::CrossEntropySoftmax, &x, &y, BackpropMode::GdDendrites, FdGraph::Full, 1e-5).unwrap();
        let mut saw_input = false;
        for e in &entries {
            if let ParamSlot::DendriteInput { dendrite: 0, .. } = e.slot {
                saw_input = true;
            }
            match e.slot {
                // Earlier generations also feed later ones through sibling weights,
                // a path the GD variant deliberately ignores.
                ParamSlot::DendriteInput { dendrite: 0, .. } | ParamSlot::DendriteBias { dendrite: 0, .. } => {}
                _ => assert!(e.rel_error() < 1e-5, "{e:?}"),
            }
        }
        assert!(saw_input);
    }
}

#[test]
fn perforation_reduces_to_standard_without_dendrites() {
    for seed in 0..6 {
        let net = Network::new(random_spec(seed, Activation::Relu), seed).unwrap();
        let x = random_batch(&net, 4, seed);
        let (out, cache) = net.forward(&x, Mode::Eval, 0).unwrap();
        let (loss, y) = targets_for(&net, 4, seed);
        let (_, delta) = loss.evaluate(&out, &y).unwrap();
        let a = backprop_standard(&net, &cache, &delta).unwrap();
        let b = backprop_perforated(&net, &cache, &delta).unwrap();
        assert_eq!(a.hosts, b.hosts);
        assert_eq!(a.deltas, b.deltas);
    }
}

#[test]
fn inert_dendrites_leave_neuron_gradients_alone() {
    for seed in 0..4 {
        let bare = Network::new(random_spec(seed, Activation::Tanh), seed).unwrap();
        let mut net = bare.clone();
        add_random_dendrites(&mut net, 2, false, seed).unwrap();
        for l in net.host_layers() {
            for bank in net.host_mut(l).unwrap().dendrites_mut() {
                bank.output_weights_mut().fill(0.0);
            }
        }
        let x = random_batch(&net, 4, seed);
        let (loss, y) = targets_for(&net, 4, seed);
        let (o1, c1) = bare.forward(&x, Mode::Eval, 0).unwrap();
        let (o2, c2) = net.forward(&x, Mode::Eval, 0).unwrap();
        assert_eq!(o1, o2);
        let d = loss.evaluate(&o1, &y).unwrap().1;
        let g1 = backprop_standard(&bare, &c1, &d).unwrap();
        let g2 = backprop_perforated(&net, &c2, &d).unwrap();
        for l in bare.host_layers() {
            assert_eq!(g1.host(l).unwrap().weight, g2.host(l).unwrap().weight);
            assert_eq!(g1.host(l).unwrap().bias, g2.host(l).unwrap().bias);
        }
    }
}

#[test]
fn no_perforation_changes_presynaptic_deltas() {
    let spec = NetworkSpec {
        input_shape: vec![3],
        layers: vec![LayerSpec::dense(2, Activation::Tanh), LayerSpec::dense(1, Activation::Identity)],
    };
    let mut net = Network::new(spec, 5).unwrap();
    let bank = perforated::DendriteBank::new(
        Tensor::new(vec![1, 2], vec![0.8, -0.6]).unwrap(),
        Tensor::zeros(&[1, 0]),
        None,
        Tensor::new(vec![1], vec![1.3]).unwrap(),
        Activation::Tanh,
        1,
    )
    .unwrap();
    net.push_dendrite_bank(1, bank).unwrap();
    let x = random_batch(&net, 5, 1);
    let y = Labels::Values(Tensor::from_fn(&[5, 1], |i| i as f64 * 0.1));
    let (out, cache) = net.forward(&x, Mode::Eval, 0).unwrap();
    let (_, d) = LossKind::Mse.evaluate(&out, &y).unwrap();
    let perf = backprop_perforated(&net, &cache, &d).unwrap();
    let std = backprop_standard(&net, &cache, &d).unwrap();
    let diff = perf.delta(0).unwrap().max_abs_diff(std.delta(0).unwrap());
    assert!(diff > 1e-8, "{diff}");
    assert!(perf.dendrite_inputs_untouched());
    assert!(!std.dendrite_inputs_untouched());
    // The layer-2 deltas and dendrite output gradient agree.
    assert_eq!(perf.delta(1), std.delta(1));
}

#[test]
fn zero_step_is_rejected() {
    let net = Network::new(random_spec(0, Activation::Tanh), 0).unwrap();
    let x = random_batch(&net, 2, 0);
    let (loss, y) = targets_for(&net, 2, 0);
    assert!(matches!(finite_diff_check(&net, loss, &x, &y, false, 0.0), Err(Error::Precondition(_))));
}

#[test]
fn mismatched_cache_is_rejected() {
    let a = Network::new(random_spec(0, Activation::Tanh), 0).unwrap();
    let b = Network::new(random_spec(1, Activation::Tanh), 1).unwrap();
    let x = random_batch(&b, 2, 0);
    let (out, cache) = b.forward(&x, Mode::Eval, 0).unwrap();
    assert!(backprop_standard(&a, &cache, &Tensor::zeros(out.shape())).is_err());
}
