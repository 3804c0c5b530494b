use kilnmap_core::arch::{
    build_network, param_count, tiny_network_gradcheck, ArchError, ForwardOptions, NetworkConfig, StageKind, Stem,
};
use kilnmap_core::tensor::{kernels, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_chips(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, size, size], |_| rng.random_range(0.0..1.0))
}

fn tiny() -> NetworkConfig {
    NetworkConfig::new(1, 1, 1, 0.125).with_input_size(64)
}

#[test]
fn tiny_config_forward_shape() {
    let net = build_network(&tiny(), 0).unwrap();
    let out = net.logits(&random_chips(2, 64, 1)).unwrap();
    assert_eq!(out.shape(), &[2, 11]);
    assert!(out.all_finite());
}

#[test]
fn residual_blocks_preserve_shape() {
    for cfg in [tiny(), NetworkConfig::new(3, 3, 2, 0.25).with_input_size(80)] {
        let net = build_network(&cfg, 0).unwrap();
        let stages = net.describe();
        for pair in stages.windows(2) {
            if pair[1].kind.is_residual() {
                assert_eq!(pair[1].output, pair[0].output, "{}", pair[1].name);
            }
        }
    }
}

#[test]
fn param_count_tracks_table_rows() {
    let counts: Vec<(usize, f64)> = [
        ((10, 1, 1), 13_354_523.0),
        ((10, 3, 3), 19_682_011.0),
        ((20, 5, 5), 27_243_579.0),
        ((11, 20, 10), 54_353_643.0),
    ]
    .iter()
    .map(|&((a, b, c), reported)| (param_count(&NetworkConfig::new(a, b, c, 1.0)).unwrap(), reported))
    .collect();
    for &(ours, reported) in &counts {
        assert!(
            ((ours as f64 - reported) / reported).abs() <= 0.02,
            "{ours} vs {reported}"
        );
    }
    assert!(counts.windows(2).all(|w| w[0].0 < w[1].0));
}

#[test]
fn param_count_strictly_monotone_in_each_group() {
    let base = (2, 2, 2);
    let count = |a, b, c| param_count(&NetworkConfig::new(a, b, c, 0.125)).unwrap();
    let c0 = count(base.0, base.1, base.2);
    assert!(count(base.0 + 1, base.1, base.2) > c0);
    assert!(count(base.0, base.1 + 1, base.2) > c0);
    assert!(count(base.0, base.1, base.2 + 1) > c0);
    assert!(count(1, 1, 0) < count(1, 1, 1));
    assert!(count(1, 0, 1) < count(1, 1, 1));
}

#[test]
fn describe_lists_every_stage() {
    let net = build_network(&NetworkConfig::new(10, 3, 3, 1.0), 0).unwrap();
    let stages = net.describe();
    let group_members = stages.iter().filter(|s| s.kind.group().is_some()).count();
    let reductions = stages
        .iter()
        .filter(|s| matches!(s.kind, StageKind::ReductionA | StageKind::ReductionB))
        .count();
    assert_eq!(group_members, 16);
    assert_eq!(reductions, 2);
    assert_eq!(stages.first().unwrap().kind, StageKind::Stem);
    assert_eq!(stages.last().unwrap().kind, StageKind::Head);
    assert_eq!(stages.last().unwrap().output, vec![11]);
    assert_eq!(stages.iter().map(|s| s.params).sum::<usize>(), net.param_count());
}

/// Reference filter counts per stage, in build order; `0` marks a residual
/// up-projection, whose width is the block's input width.
fn reference_channels(kind: StageKind) -> Vec<usize> {
    let mixed = [96, 48, 64, 64, 96, 96, 64];
    match kind {
        StageKind::Stem => [32, 32, 64, 80, 192].into_iter().chain(mixed).collect(),
        StageKind::BlockA => vec![32, 32, 32, 32, 48, 64, 0],
        StageKind::ReductionA => vec![384, 256, 256, 384],
        StageKind::BlockB => vec![192, 128, 160, 192, 0],
        StageKind::ReductionB => vec![256, 384, 256, 288, 256, 288, 320],
        StageKind::BlockC => vec![192, 192, 224, 256, 0],
        StageKind::Head => vec![1536],
    }
}

#[test]
fn width_scaling_rounds_up() {
    for width in [0.5, 0.3] {
        let cfg = NetworkConfig::new(2, 2, 2, width);
        let net = build_network(&cfg, 0).unwrap();
        assert!(net.uses_full_stem());
        let stages = net.describe();
        for (i, s) in stages.iter().enumerate() {
            let expect: Vec<usize> = reference_channels(s.kind)
                .into_iter()
                .map(|r| {
                    if r == 0 {
                        stages[i - 1].output[0]
                    } else {
                        (width * r as f64 - 1e-9).ceil() as usize
                    }
                })
                .collect();
            assert_eq!(s.conv_channels, expect, "{} at width {width}", s.name);
        }
    }
}

#[test]
fn invalid_configs_rejected() {
    assert!(matches!(
        build_network(&NetworkConfig::new(0, 0, 0, 1.0), 0),
        Err(ArchError::Config(_))
    ));
    assert!(matches!(
        build_network(&NetworkConfig::new(1, 1, 1, 0.0), 0),
        Err(ArchError::Config(_))
    ));
    assert!(matches!(
        build_network(&NetworkConfig::new(1, 1, 1, 1.5), 0),
        Err(ArchError::Config(_))
    ));
    let tiny_input = NetworkConfig {
        stem: Stem::Desk,
        ..tiny().with_input_size(12)
    };
    match build_network(&tiny_input, 0) {
        Err(ArchError::Collapse { stage, .. }) => assert!(!stage.is_empty()),
        other => panic!("expected collapse, got {other:?}"),
    }
}

#[test]
fn build_is_deterministic() {
    let a = build_network(&tiny(), 42).unwrap();
    let b = build_network(&tiny(), 42).unwrap();
    let c = build_network(&tiny(), 43).unwrap();
    for (x, y) in a.params().iter().zip(b.params()) {
        assert_eq!(x.value.data(), y.value.data(), "{}", x.name);
    }
    assert!(a.params().iter().zip(c.params()).any(|(x, y)| x.value != y.value));
}

#[test]
fn every_parameter_receives_gradient() {
    let net = build_network(&tiny(), 5).unwrap();
    let chips = random_chips(4, 64, 2);
    let (_, grads, _) = net
        .loss_and_grads(&chips, &[0, 3, 7, 10], ForwardOptions::train(None))
        .unwrap();
    for (p, g) in net.params().iter().zip(&grads) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{} has zero gradient", p.name);
    }
}

#[test]
fn eval_rows_independent_of_batch() {
    let net = build_network(&tiny(), 8).unwrap();
    let batch = random_chips(8, 64, 3);
    let first = Tensor::new(vec![1, 3, 64, 64], batch.data()[..3 * 64 * 64].to_vec()).unwrap();
    let a = net.logits(&first).unwrap();
    let b = net.logits(&batch).unwrap();
    for k in 0..11 {
        assert!((a.data()[k] - b.data()[k]).abs() < 1e-9);
    }
}

#[test]
fn zero_head_is_uniform() {
    let mut net = build_network(&tiny(), 1).unwrap();
    for p in net.params_mut() {
        if p.name.starts_with("head/linear") {
            p.value.data_mut().fill(0.0);
        }
    }
    let probs = kernels::softmax(&net.logits(&random_chips(3, 64, 4)).unwrap()).unwrap();
    for &p in probs.data() {
        assert!((p - 1.0 / 11.0).abs() < 1e-15);
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let report = tiny_network_gradcheck(1e-5, seed).unwrap();
        assert!(
            report.skipped * 5 <= report.checked + report.skipped,
            "seed {seed}: {report:?}"
        );
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}
