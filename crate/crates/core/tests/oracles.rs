//! Small-instance oracles: each production routine against a literal,
//! obviously-correct reimplementation or a hand-worked answer.

use femtodet::net::{iou, nms, Detection};
use femtodet::ops::{batch_norm, conv2d, AffineConvSpec, BatchNormParams, BnMode, ConvKind};
use femtodet::train::augment::{affine_from, affine_warp, hflip, mixup, mosaic, scale_sample, Affine, Sample};
use femtodet::train::eval::{evaluate_ap, GtBox};
use femtodet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Six nested loops (plus the group split), straight from the definition.
fn naive_conv(x: &Tensor<f64>, s: &AffineConvSpec<f64>) -> Tensor<f64> {
    let [n, _, h, w] = x.shape();
    let (kh, kw) = s.kernel;
    let oh = (h + 2 * s.padding - kh) / s.stride + 1;
    let ow = (w + 2 * s.padding - kw) / s.stride + 1;
    let cin_g = s.in_channels / s.groups;
    let cout_g = s.out_channels / s.groups;
    let mut out = Tensor::zeros([n, s.out_channels, oh, ow]);
    for b in 0..n {
        for o in 0..s.out_channels {
            let g = o / cout_g;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = s.bias[o];
                    for ci in 0..cin_g {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * s.stride + u) as isize - s.padding as isize;
                                let xx = (j * s.stride + v) as isize - s.padding as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    acc += s.weight.at([o, ci, u, v]) * x.at([b, g * cin_g + ci, y as usize, xx as usize]);
                                }
                            }
                        }
                    }
                    out.set([b, o, i, j], acc);
                }
            }
        }
    }
    out
}

fn random_spec(kind: ConvKind, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> AffineConvSpec<f64> {
    let per_group = if kind == ConvKind::Depthwise { 1 } else { cin };
    let weight = Tensor::randn([cout, per_group, k, k], rng);
    let bias = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
    AffineConvSpec::new(kind, cin, cout, (k, k), stride, pad, weight, bias).unwrap()
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = [
        (ConvKind::Vanilla, 1, 1, 3, 1, 1, 4),
        (ConvKind::Vanilla, 3, 5, 3, 2, 1, 9),
        (ConvKind::Vanilla, 2, 4, 3, 1, 0, 6),
        (ConvKind::Depthwise, 4, 4, 3, 1, 1, 7),
        (ConvKind::Depthwise, 6, 6, 3, 2, 1, 8),
        (ConvKind::Pointwise, 5, 3, 1, 1, 0, 5),
    ];
    for (kind, cin, cout, k, stride, pad, side) in cases {
        let spec = random_spec(kind, cin, cout, k, stride, pad, &mut rng);
        let x = Tensor::randn([2, cin, side, side], &mut rng);
        let got = conv2d(&x, &spec).unwrap();
        let want = naive_conv(&x, &spec);
        assert_eq!(got.shape(), want.shape());
        let d = got.max_abs_diff(&want).unwrap();
        assert!(d <= 1e-12, "{kind:?} cin={cin} stride={stride}: {d:e}");
    }
}

#[test]
fn conv_identity_and_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::randn([1, 1, 4, 4], &mut rng);
    let id = AffineConvSpec::pointwise(1, 1, Tensor::full([1, 1, 1, 1], 1.0), vec![0.0]).unwrap();
    assert_eq!(conv2d(&x, &id).unwrap(), x);
    let spec = random_spec(ConvKind::Vanilla, 1, 2, 3, 1, 1, &mut rng);
    let y = conv2d(&Tensor::zeros([1, 1, 4, 4]), &spec).unwrap();
    for o in 0..2 {
        assert!(y.plane(0, o).iter().all(|&v| v == spec.bias[o]));
    }
}

#[test]
fn batch_norm_by_hand() {
    // One channel, values 1..8: mean 4.5, biased variance 5.25.
    let x = Tensor::<f64>::new([2, 1, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
    let mut bn = BatchNormParams::identity(1);
    bn.mode = BnMode::Train;
    let y = batch_norm(&x, &mut bn).unwrap();
    let eps = bn.eps;
    for (v, x) in y.data().iter().zip(x.data()) {
        assert!((v - (x - 4.5) / (5.25 + eps).sqrt()).abs() < 1e-12);
    }
    let moments = |y: &Tensor<f64>| {
        let mean = y.data().iter().sum::<f64>() / 8.0;
        (mean, y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0)
    };
    let (mean, var) = moments(&y);
    assert!(mean.abs() < 1e-12);
    // eps keeps the variance just under one: σ²/(σ² + eps).
    assert!((var - 5.25 / (5.25 + eps)).abs() < 1e-12);
    let mut tight = BatchNormParams::identity(1);
    tight.mode = BnMode::Train;
    tight.eps = 1e-9;
    let (_, var) = moments(&batch_norm(&x, &mut tight).unwrap());
    assert!((var - 1.0).abs() < 1e-6);
    // Running statistics move by the momentum, with the same (biased)
    // variance the output was normalized by.
    assert!((bn.running_mean[0] - 0.1 * 4.5).abs() < 1e-12);
    assert!((bn.running_var[0] - (0.9 + 0.1 * 5.25)).abs() < 1e-12);
}

/// The greedy result is the unique subset `S` where a box is in `S` exactly
/// when no better-ranked member of `S` of its class overlaps it too much.
/// Found here by trying every subset.
fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let better = |j: usize, i: usize| dets[j].score > dets[i].score || (dets[j].score == dets[i].score && j < i);
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |k: usize| mask & (1 << k) != 0;
        let consistent = (0..n).all(|i| {
            let suppressed = (0..n).any(|j| {
                j != i && inside(j) && better(j, i) && dets[j].class_id == dets[i].class_id && iou(&dets[j].bbox, &dets[i].bbox) > thr
            });
            inside(i) == !suppressed
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "characterization must be unique");
    let mut keep: Vec<usize> = (0..n).filter(|&k| found[0] & (1 << k) != 0).collect();
    keep.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    keep
}

fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec(
        (0.0..40.0f64, 0.0..40.0f64, 2.0..20.0f64, 2.0..20.0f64, 0u8..4, 0usize..2),
        0..=6,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(x, y, w, h, s, c)| Detection {
                bbox: [x, y, x + w, y + h],
                // Coarse scores so ties happen.
                score: f64::from(s) / 4.0,
                class_id: c,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn nms_matches_brute_force(dets in arb_dets(), thr in 0.1..0.9f64) {
        let want: Vec<Detection> = brute_force_nms(&dets, thr).into_iter().map(|k| dets[k]).collect();
        prop_assert_eq!(nms(dets, thr), want);
    }
}

#[test]
fn ap_hand_table() {
    // GT: g1 = [0,0,10,10], g2 = [20,0,30,10].
    //   rank  pred            IoU(g1)  IoU(g2)  outcome   P     R
    //   1     [0,0,10,10]     1        0        TP g1     1     1/2
    //   2     [1,0,11,10]     90/110   0        FP (g1 taken)  1/2  1/2
    //   3     [20,0,30,12]    0        100/120  TP g2     2/3   1
    // Interpolated precision: 1 for r ≤ 1/2 (51 points), 2/3 above (50).
    let g = |b| GtBox { bbox: b, class_id: 0 };
    let d = |b, score| Detection { bbox: b, score, class_id: 0 };
    let preds = vec![vec![d([1.0, 0.0, 11.0, 10.0], 0.8), d([20.0, 0.0, 30.0, 12.0], 0.7), d([0.0, 0.0, 10.0, 10.0], 0.9)]];
    let gts = vec![vec![g([0.0, 0.0, 10.0, 10.0]), g([20.0, 0.0, 30.0, 10.0])]];
    let r = evaluate_ap(&preds, &gts, 0.5).unwrap();
    assert!((r.ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    assert_eq!(r.ar, 1.0);
    // At IoU 0.85 the third prediction misses: one TP out of two.
    let r = evaluate_ap(&preds, &gts, 0.85).unwrap();
    assert!((r.ap - 51.0 / 101.0).abs() < 1e-12);
    assert_eq!(r.ar, 0.5);
}

fn sample(h: usize, w: usize, boxes: Vec<[f64; 4]>, rng: &mut ChaCha8Rng) -> Sample {
    let labels = (0..boxes.len()).collect();
    Sample::new(Tensor::uniform([1, 3, h, w], 0.0, 1.0, rng), boxes, labels).unwrap()
}

#[test]
fn augmentation_box_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = sample(64, 64, vec![[10.0, 20.0, 30.0, 40.0]], &mut rng);

    // Flip: x1' = W − x2, x2' = W − x1; pixel (y, x) ← (y, W−1−x).
    let f = hflip(&s);
    assert_eq!(f.boxes, vec![[34.0, 20.0, 54.0, 40.0]]);
    assert_eq!(f.image.at([0, 1, 5, 0]), s.image.at([0, 1, 5, 63]));

    // Scale: every coordinate times the factor.
    let z = scale_sample(&s, 1.5).unwrap();
    assert_eq!((z.height(), z.width()), (96, 96));
    assert_eq!(z.boxes, vec![[15.0, 30.0, 45.0, 60.0]]);

    // Translation by (5, −3) pixels: boxes shift, pixels follow exactly.
    let m = Affine { a: [[1.0, 0.0], [0.0, 1.0]], t: [5.0, -3.0] };
    let t = affine_warp(&s, &m).unwrap();
    assert_eq!(t.boxes, vec![[15.0, 17.0, 35.0, 37.0]]);
    assert_eq!(t.image.at([0, 0, 10, 10]), s.image.at([0, 0, 13, 5]));

    // 90° about the center of a 64² image: (x, y) ↦ (64 − y, x).
    let r = affine_warp(&s, &affine_from(90.0, 0.0, 1.0, (0.0, 0.0), (64, 64))).unwrap();
    for (got, want) in r.boxes[0].iter().zip([24.0, 10.0, 44.0, 30.0]) {
        assert!((got - want).abs() < 1e-9);
    }

    // MixUp: pixelwise λa + (1−λ)b, boxes concatenated.
    let b = sample(64, 64, vec![[0.0, 0.0, 8.0, 8.0]], &mut rng);
    let mx = mixup(&s, &b, 0.25).unwrap();
    let want = 0.25 * s.image.at([0, 2, 7, 9]) + 0.75 * b.image.at([0, 2, 7, 9]);
    assert_eq!(mx.image.at([0, 2, 7, 9]), want);
    assert_eq!(mx.boxes, vec![s.boxes[0], b.boxes[0]]);

    // Mosaic: the bottom-right tile starts at the center, so its boxes
    // shift by (cx, cy); the top-left tile ends at the center.
    let tiles = [s.clone(), s.clone(), s.clone(), s.clone()];
    let mo = mosaic(&tiles, (128, 128), (64, 64)).unwrap();
    assert!(mo.boxes.contains(&[10.0, 20.0, 30.0, 40.0]));
    assert!(mo.boxes.contains(&[74.0, 84.0, 94.0, 104.0]));
    assert!(mo.boxes.contains(&[74.0, 20.0, 94.0, 40.0]));
    assert_eq!(mo.boxes.len(), 4);
}
