use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikelab::layers::{Domain, Phase, ShortcutKind};
use spikelab::model::{bin_events, build, ArchSpec, Event, EventStream, ShortcutSite};
use spikelab::neuron::SpikeFn;
use spikelab::Error;
use spikelab_numcore::Tensor;

fn random_images(rng: &mut ChaCha8Rng, spec: &ArchSpec, batch: usize) -> Tensor {
    Tensor::from_fn(&[batch, spec.in_channels, spec.height, spec.width], |_| rng.random_range(0.0..1.0))
}

#[test]
fn cifar_shape_ladder_and_channel_doubling() {
    let spec = ArchSpec::cifar();
    let net = build(&spec).unwrap();
    assert_eq!(spec.stage_extents(), vec![(8, 8), (4, 4), (2, 2)]);
    for w in spec.stages.windows(2) {
        assert_eq!(w[1].channels, 2 * w[0].channels);
    }
    let mut tiny_t = spec.clone();
    tiny_t.timesteps = 1;
    let net1 = build(&tiny_t).unwrap();
    let x = Tensor::full(&[1, 3, 32, 32], 0.7);
    let ins = net1.inspect(&x, Phase::Eval, SpikeFn::Heaviside).unwrap();
    let extents: Vec<_> = ins.stage_shapes.iter().map(|s| (s.1, s.2)).collect();
    assert_eq!(extents, vec![(8, 8), (4, 4), (2, 2)]);
    let channels: Vec<_> = ins.stage_shapes.iter().map(|s| s.0).collect();
    assert_eq!(channels, vec![96, 192, 384]);
    assert_eq!(net.param_count(), net1.param_count());
}

#[test]
fn cifar_parameter_count_near_reported_size() {
    let n = build(&ArchSpec::cifar()).unwrap().param_count() as f64;
    let reported = 6.57e6;
    println!("cifar preset: {n} learnable parameters ({:+.1}% vs 6.57M)", 100.0 * (n / reported - 1.0));
    assert!((n / reported - 1.0).abs() <= 0.15);
}

#[test]
fn param_count_counts_every_learnable_scalar() {
    let spec = ArchSpec::tiny();
    let net = build(&spec).unwrap();
    let c = [16usize, 32, 64];
    let convbn = |cin: usize, cout: usize, k: usize, groups: usize| cin / groups * cout * k * k + 2 * cout;
    let mlp = |d: usize| convbn(d, 4 * d, 1, 1) + convbn(4 * d, d, 1, 1);
    let embed = |cin: usize, cout: usize, depth: usize| {
        2 * (convbn(cin, cout, 3, 1) + (depth - 1) * convbn(cout, cout, 3, 1))
    };
    let expected = embed(1, c[0], 2)
        + convbn(c[0], c[0], 3, c[0])
        + mlp(c[0])
        + embed(c[0], c[1], 1)
        + convbn(c[1], c[1], 3, c[1])
        + mlp(c[1])
        + embed(c[1], c[2], 1)
        + 4 * convbn(c[2], c[2], 1, 1)
        + mlp(c[2])
        + c[2] * 2
        + 2;
    assert_eq!(net.param_count(), expected);
}

#[test]
fn other_presets_build() {
    let neuro = build(&ArchSpec::neuromorphic()).unwrap();
    assert_eq!(neuro.stages().len(), 2);
    let mut single = ArchSpec::tiny();
    single.stages.truncate(1);
    let net = build(&single).unwrap();
    let logits = net.forward(&Tensor::full(&[2, 1, 16, 16], 0.5)).unwrap();
    assert_eq!(logits.shape(), &[2, 2]);
}

#[test]
fn zero_input_gives_classifier_bias() {
    let mut net = build(&ArchSpec::tiny()).unwrap();
    let bias = net.head().bias;
    net.store_mut().set(bias, Tensor::new(&[2], vec![0.3, -1.2]).unwrap()).unwrap();
    let logits = net.forward(&Tensor::zeros(&[3, 1, 16, 16])).unwrap();
    for b in 0..3 {
        assert_eq!(logits.get(&[b, 0]), 0.3);
        assert_eq!(logits.get(&[b, 1]), -1.2);
    }
}

#[test]
fn readout_is_linear_in_classifier_weights() {
    let spec = ArchSpec::tiny();
    let mut net = build(&spec).unwrap();
    let x = random_images(&mut ChaCha8Rng::seed_from_u64(5), &spec, 2);
    let (w, b) = (net.head().weight, net.head().bias);
    net.store_mut().set(b, Tensor::new(&[2], vec![0.5, 0.25]).unwrap()).unwrap();
    let base = net.forward(&x).unwrap();
    let doubled = net.store().get(w).scale(2.0);
    net.store_mut().set(w, doubled).unwrap();
    let twice = net.forward(&x).unwrap();
    let bias = [0.5, 0.25];
    for i in 0..base.len() {
        let (a, c) = (base.data()[i] - bias[i % 2], twice.data()[i] - bias[i % 2]);
        assert!((c - 2.0 * a).abs() < 1e-12, "{a} {c}");
    }
}

#[test]
fn single_timestep_readout_equals_step_logits() {
    let mut spec = ArchSpec::tiny();
    spec.timesteps = 1;
    let net = build(&spec).unwrap();
    let x = random_images(&mut ChaCha8Rng::seed_from_u64(2), &spec, 2);
    let a = net.forward(&x).unwrap();
    let frames = x.reshape(&[1, 2, 1, 16, 16]).unwrap();
    let b = net.forward(&frames).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_is_deterministic() {
    let spec = ArchSpec::tiny();
    let x = random_images(&mut ChaCha8Rng::seed_from_u64(9), &spec, 4);
    let a = build(&spec).unwrap().forward(&x).unwrap();
    let b = build(&spec).unwrap().forward(&x).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn geometry_mismatch_is_rejected() {
    let net = build(&ArchSpec::tiny()).unwrap();
    assert!(net.forward(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
    assert!(net.forward(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    assert!(net.forward(&Tensor::zeros(&[2, 1, 1, 16, 16])).is_err());
}

#[test]
fn membrane_shortcuts_transmit_binary_spikes() {
    let spec = ArchSpec::tiny();
    let net = build(&spec).unwrap();
    let x = random_images(&mut ChaCha8Rng::seed_from_u64(1), &spec, 2);
    let ins = net.inspect(&x, Phase::Eval, SpikeFn::Heaviside).unwrap();
    assert!(!ins.transmissions.is_empty());
    for t in &ins.transmissions {
        assert_eq!(t.domain, Domain::Binary, "{}", t.site);
        assert!(t.values.data().iter().all(|&v| v == 0.0 || v == 1.0), "{}", t.site);
    }
}

#[test]
fn prespike_shortcut_taints_the_stream() {
    let spec = ArchSpec::tiny();
    let mut net = build(&spec).unwrap();
    net.set_shortcut(2, 0, ShortcutSite::Mlp, ShortcutKind::PreSpike).unwrap();
    let x = random_images(&mut ChaCha8Rng::seed_from_u64(1), &spec, 2);
    let ins = net.inspect(&x, Phase::Eval, SpikeFn::Heaviside).unwrap();
    let head = ins.transmissions.iter().find(|t| t.site == "head.in").unwrap();
    assert_eq!(head.domain, Domain::Ternary);
    assert!(head.values.data().iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));
    assert!(head.values.max() == 2.0);
}

#[test]
fn prespike_chain_is_a_domain_error() {
    let mut spec = ArchSpec::tiny();
    spec.shortcut = ShortcutKind::PreSpike;
    let net = build(&spec).unwrap();
    let err = net.forward(&Tensor::full(&[1, 1, 16, 16], 0.8)).unwrap_err();
    assert!(matches!(err, Error::Domain(_)), "{err}");
}

#[test]
fn vanilla_shortcuts_run() {
    let mut spec = ArchSpec::tiny();
    spec.shortcut = ShortcutKind::Vanilla;
    let net = build(&spec).unwrap();
    let ins = net
        .inspect(&Tensor::full(&[1, 1, 16, 16], 0.8), Phase::Eval, SpikeFn::Heaviside)
        .unwrap();
    assert!(ins.transmissions.iter().all(|t| t.domain == Domain::Binary));
}

#[test]
fn binning_conserves_events() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(0..300);
        let (h, w, t, alpha) = (
            rng.random_range(1..20),
            rng.random_range(1..20),
            rng.random_range(1..8),
            rng.random_range(1..4),
        );
        let raw = rng.random_range(1..5u64);
        let horizon = raw * (alpha * t) as u64;
        let events = (0..n)
            .map(|_| Event {
                x: rng.random_range(0..w) as u32,
                y: rng.random_range(0..h) as u32,
                t: rng.random_range(0..horizon),
                p: rng.random_range(0..2),
            })
            .collect();
        let stream = EventStream::new(events, raw).unwrap();
        let f = bin_events(&stream, alpha, t, (h, w)).unwrap();
        assert_eq!(f.shape(), &[t, 2, h, w]);
        assert_eq!(f.sum(), n as f64);
    }
}
