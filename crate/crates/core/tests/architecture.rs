use femtodet::energy::{estimate_cost, make_empty_config};
use femtodet::fold::{fold_ibe, fold_model};
use femtodet::ibe::IbeModule;
use femtodet::layers::Parameterized;
use femtodet::net::{FemtoDet, ModelConfig, Spatial, StageShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn at(side: usize) -> ModelConfig {
    ModelConfig { input_size: (side, side), ..ModelConfig::default() }
}

fn shapes(side: usize) -> Vec<(usize, usize)> {
    at(side).stage_shapes().unwrap().iter().map(|s| (s.h, s.c)).collect()
}

#[test]
fn stage_outputs_follow_the_backbone_table() {
    // Each row's output is the next row's input; the last is the final map.
    assert_eq!(shapes(640), [(320, 8), (320, 8), (160, 8), (80, 8), (40, 16), (40, 24), (20, 40), (20, 80)]);
    assert_eq!(shapes(416), [(208, 8), (208, 8), (104, 8), (52, 8), (26, 16), (26, 24), (13, 40), (13, 80)]);
}

#[test]
fn forward_matches_the_shape_algebra() {
    let m = FemtoDet::<f32>::from_seed(&at(64), 0).unwrap();
    let x = femtodet::Tensor::<f32>::zeros([2, 3, 64, 64]);
    let out = m.forward(&x).unwrap();
    assert_eq!(out.cls.shape(), [2, 20, 4, 4]);
    assert_eq!(out.obj.shape(), [2, 1, 4, 4]);
    assert_eq!(out.boxes.shape(), [2, 4, 4, 4]);
    let stages = m.backbone.forward(&x).unwrap();
    let want = at(64).stage_shapes().unwrap();
    for (t, s) in stages.iter().zip(&want) {
        assert_eq!(t.shape(), [2, s.c, s.h, s.w]);
    }
}

fn trainable(m: &impl Parameterized<f64>) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, _, d, role| {
        if role == femtodet::layers::ParamRole::Trainable {
            n += d.len();
        }
    });
    n
}

#[test]
fn ibe_overhead_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (c, cout) in [(8, 8), (32, 16), (96, 24)] {
        let m = IbeModule::<f64>::init(c, cout, 1, &mut rng).unwrap();
        let want = c * 9 + c + 2 + 4 * c + (c * cout + cout) + 2 * cout;
        assert_eq!(m.param_count(), want);
        assert_eq!(trainable(&m), want);
        // Folded: plain depthwise + pointwise with biases.
        assert_eq!(fold_ibe(&m).unwrap().param_count(), c * 9 + c + c * cout + cout);
    }
}

#[test]
fn default_counts_and_fold_parity() {
    let ibe = FemtoDet::<f64>::from_seed(&ModelConfig::default(), 0).unwrap();
    let plain = FemtoDet::<f64>::from_seed(&ModelConfig { use_ibe: false, ..ModelConfig::default() }, 0).unwrap();
    let (a, p) = (ibe.param_report(), plain.param_report());
    assert_eq!(a.total, a.backbone + a.neck + a.head);
    assert_eq!(a.neck, p.neck);
    assert_eq!(a.head, p.head);
    // Each IBE adds θ₁, θ₂ and one more BN affine over its depthwise width.
    let overhead: usize = ibe
        .backbone
        .stages
        .iter()
        .flatten()
        .map(|b| match &b.spatial {
            Spatial::Ibe(m) => 2 * m.in_channels() + 2,
            Spatial::Dsc { .. } => 0,
        })
        .sum();
    assert!(overhead > 0);
    assert_eq!(a.backbone, p.backbone + overhead);
    assert_eq!(
        fold_model(&ibe).unwrap().param_report(),
        fold_model(&plain).unwrap().param_report()
    );
    // Within ±10% of the published 68.77k.
    let dev = a.total as f64 / 68_770.0 - 1.0;
    assert!(dev.abs() < 0.10, "{} params ({:+.1}%)", a.total, dev * 100.0);
}

#[test]
fn empty_model_is_tiny() {
    let full = FemtoDet::<f32>::from_seed(&ModelConfig::default(), 0).unwrap();
    let empty_cfg = make_empty_config(&ModelConfig::default()).unwrap();
    assert_eq!(make_empty_config(&empty_cfg).unwrap(), empty_cfg);
    let empty = FemtoDet::<f32>::from_seed(&empty_cfg, 0).unwrap();
    assert!(empty.param_report().total * 100 < full.param_report().total);
    assert_eq!(empty_cfg.stage_shapes().unwrap().last(), Some(&StageShape { c: 1, h: 20, w: 20 }));
}

#[test]
fn macs_are_fold_invariant() {
    let cfg = at(64);
    let m = FemtoDet::<f64>::from_seed(&cfg, 3).unwrap();
    let f = fold_model(&m).unwrap();
    let once = estimate_cost(&f, (64, 64)).unwrap();
    let twice = estimate_cost(&fold_model(&f).unwrap(), (64, 64)).unwrap();
    assert_eq!(once.macs, twice.macs);
    assert_eq!(once.macs, once.layers.iter().map(|l| l.macs).sum::<u64>());
    assert!(estimate_cost(&m, (64, 64)).unwrap().macs > once.macs);
}
