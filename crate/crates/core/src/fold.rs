//! Exact algebraic folding.
//!
//! Batch norms merge into the preceding conv, scalar factors move into the
//! weights (homogeneity), parallel convs with equal geometry add
//! (additivity), and a 1×1 kernel embeds at the center of a larger odd
//! kernel. Together these rewrite an [`IbeModule`] in eval mode as one
//! depthwise 3×3 conv plus one pointwise conv.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FemtoError, Result};
use crate::ibe::{derive_descriptor, derive_projector, IbeModule};
use crate::layers::ConvUnit;
use crate::net::{FemtoDet, Spatial};
use crate::ops::{conv2d, relu, sigmoid, AffineConvSpec, BatchNormParams, BnMode, ConvKind};
use crate::tensor::{Scalar, Tensor};

/// `bn(conv(x))` as a single conv: `ŵ = γ·w/√(σ²+ε)`, `b̂ = β + γ·(b−μ)/√(σ²+ε)`.
pub fn fold_bn_into_conv<T: Scalar>(conv: &AffineConvSpec<T>, bn: &BatchNormParams<T>) -> Result<AffineConvSpec<T>> {
    conv.validate()?;
    bn.validate()?;
    if bn.mode != BnMode::Eval {
        return Err(FemtoError::Mode("cannot fold a train-mode batch norm".into()));
    }
    if bn.channels() != conv.out_channels {
        return Err(FemtoError::Dimension {
            op: "fold_bn_into_conv",
            axis: "channels",
            expected: conv.out_channels,
            got: bn.channels(),
        });
    }
    let mut out = conv.clone();
    let per_out = conv.weight.len() / conv.out_channels.max(1);
    for o in 0..conv.out_channels {
        let sd = (bn.running_var[o] + bn.eps).sqrt();
        let g = bn.gamma[o];
        for w in &mut out.weight.data_mut()[o * per_out..(o + 1) * per_out] {
            *w = g * *w / sd;
        }
        out.bias[o] = bn.beta[o] + g * (conv.bias[o] - bn.running_mean[o]) / sd;
    }
    Ok(out)
}

/// `s·conv(x)` as a single conv.
pub fn scale_affine<T: Scalar>(conv: &AffineConvSpec<T>, s: T) -> Result<AffineConvSpec<T>> {
    if !s.is_finite() {
        return Err(FemtoError::NonFinite(format!("scale factor {s}")));
    }
    let mut out = conv.clone();
    out.weight = conv.weight.scale(s);
    out.bias = conv.bias.iter().map(|&b| b * s).collect();
    Ok(out)
}

/// Places a 1×1 kernel at the center of an odd `target` kernel and widens
/// the padding so every output sees the same input pixel as before.
pub fn embed_kernel<T: Scalar>(conv: &AffineConvSpec<T>, target: (usize, usize)) -> Result<AffineConvSpec<T>> {
    conv.validate()?;
    let (th, tw) = target;
    if th % 2 == 0 || tw % 2 == 0 {
        return Err(FemtoError::Geometry(format!("embed target {th}×{tw} must have odd dims")));
    }
    if conv.kernel != (1, 1) {
        return Err(FemtoError::Geometry(format!(
            "embed_kernel needs a 1×1 conv, got {}×{}",
            conv.kernel.0, conv.kernel.1
        )));
    }
    if target == (1, 1) {
        return Ok(conv.clone());
    }
    if th != tw {
        return Err(FemtoError::Geometry(format!("embed target {th}×{tw} must be square")));
    }
    let [o, i, _, _] = conv.weight.shape();
    let mut w = Tensor::zeros([o, i, th, tw]);
    for a in 0..o {
        for b in 0..i {
            w.set([a, b, th / 2, tw / 2], conv.weight.at([a, b, 0, 0]));
        }
    }
    let mut out = conv.clone();
    out.weight = w;
    out.kernel = target;
    out.padding = conv.padding + th / 2;
    if out.kind == ConvKind::Pointwise {
        out.kind = ConvKind::Vanilla;
    }
    out.validate()?;
    Ok(out)
}

/// `a(x) + b(x)` as a single conv; both must share every geometric field.
pub fn add_affine<T: Scalar>(a: &AffineConvSpec<T>, b: &AffineConvSpec<T>) -> Result<AffineConvSpec<T>> {
    let same = a.kind == b.kind
        && a.kernel == b.kernel
        && a.stride == b.stride
        && a.padding == b.padding
        && a.groups == b.groups
        && a.in_channels == b.in_channels
        && a.out_channels == b.out_channels;
    if !same {
        return Err(FemtoError::Geometry(format!(
            "add_affine geometry mismatch: {:?} {:?} s{} p{} g{} vs {:?} {:?} s{} p{} g{}",
            a.kind, a.kernel, a.stride, a.padding, a.groups, b.kind, b.kernel, b.stride, b.padding, b.groups
        )));
    }
    let mut out = a.clone();
    out.weight = a.weight.zip_map(&b.weight, "add_affine", |p, q| p + q)?;
    out.bias = a.bias.iter().zip(&b.bias).map(|(&p, &q)| p + q).collect();
    Ok(out)
}

/// A folded IBE: `act(pw(dw(x)))` with no batch norms left.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedIbe<T> {
    pub dw: AffineConvSpec<T>,
    pub pw: AffineConvSpec<T>,
    pub relu: bool,
}

impl<T: Scalar> FoldedIbe<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(&conv2d(x, &self.dw)?, &self.pw)?;
        Ok(if self.relu { relu(&y) } else { y })
    }

    pub fn param_count(&self) -> usize {
        self.dw.param_count() + self.pw.param_count()
    }

    /// The same structure as two conv units, the layout a plain DSC folds to.
    pub fn into_units(self) -> (ConvUnit<T>, ConvUnit<T>) {
        (
            ConvUnit {
                conv: self.dw,
                bn: None,
                relu: false,
            },
            ConvUnit {
                conv: self.pw,
                bn: None,
                relu: self.relu,
            },
        )
    }
}

/// Folds an eval-mode IBE module into one depthwise 3×3 and one pointwise conv.
pub fn fold_ibe<T: Scalar>(m: &IbeModule<T>) -> Result<FoldedIbe<T>> {
    m.validate()?;
    if !m.all_eval() {
        return Err(FemtoError::Mode("fold_ibe needs every batch norm in eval mode".into()));
    }
    let descriptor = embed_kernel(&derive_descriptor(&m.dw)?, (3, 3))?;
    let difference = add_affine(&m.dw, &scale_affine(&descriptor, -sigmoid(m.theta1))?)?;
    let difference = fold_bn_into_conv(&difference, &m.bn1)?;
    let projector = fold_bn_into_conv(&derive_projector(&m.dw, m.theta2)?, &m.bn2)?;
    let dw = add_affine(&difference, &projector)?;
    let pw = fold_bn_into_conv(&m.pw, &m.bn3)?;
    Ok(FoldedIbe { dw, pw, relu: m.relu })
}

/// Folds a conv unit's batch norm into its conv. Units without a batch norm
/// are returned unchanged.
pub fn fold_unit<T: Scalar>(u: &ConvUnit<T>) -> Result<ConvUnit<T>> {
    match &u.bn {
        None => Ok(u.clone()),
        Some(bn) => Ok(ConvUnit {
            conv: fold_bn_into_conv(&u.conv, bn)?,
            bn: None,
            relu: u.relu,
        }),
    }
}

/// Outcome of comparing a folded structure against the original on probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldReport {
    pub max_abs_diff: f64,
    /// Largest per-probe `max|folded − original| / max(max|original|, 1e-12)`.
    pub max_rel_diff: f64,
    pub n_probes: usize,
    pub param_count_before: usize,
    pub param_count_after: usize,
}

impl FoldReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_abs_diff < tol
    }
}

impl fmt::Display for FoldReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "max_abs_diff={:e}", self.max_abs_diff)?;
        writeln!(f, "max_rel_diff={:e}", self.max_rel_diff)?;
        writeln!(f, "n_probes={}", self.n_probes)?;
        writeln!(f, "param_count_before={}", self.param_count_before)?;
        write!(f, "param_count_after={}", self.param_count_after)
    }
}

/// Probe shape `k`: alternates `1×C×8×8` and `2×C×16×16`.
pub fn probe_shape(k: usize, channels: usize) -> [usize; 4] {
    if k % 2 == 0 {
        [1, channels, 8, 8]
    } else {
        [2, channels, 16, 16]
    }
}

pub(crate) struct DiffAccumulator {
    pub max_abs: f64,
    pub max_rel: f64,
    pub n: usize,
}

impl DiffAccumulator {
    pub fn new() -> Self {
        Self {
            max_abs: 0.0,
            max_rel: 0.0,
            n: 0,
        }
    }

    pub fn push<T: Scalar>(&mut self, reference: &Tensor<T>, candidate: &Tensor<T>) -> Result<()> {
        let d = candidate.max_abs_diff(reference)?.to_f64().unwrap_or(f64::INFINITY);
        let scale = reference
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.to_f64().unwrap_or(f64::INFINITY).abs()));
        self.max_abs = self.max_abs.max(if d.is_nan() { f64::INFINITY } else { d });
        self.max_rel = self.max_rel.max(d / scale.max(1e-12));
        self.n += 1;
        Ok(())
    }
}

/// Folds `m` and compares against the unfolded forward on `n_probes`
/// seeded standard-normal inputs.
pub fn verify_fold_ibe<T: Scalar>(m: &IbeModule<T>, n_probes: usize, seed: u64) -> Result<FoldReport> {
    let folded = fold_ibe(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DiffAccumulator::new();
    for k in 0..n_probes {
        let x = Tensor::<T>::randn(probe_shape(k, m.in_channels()), &mut rng);
        acc.push(&m.forward(&x)?, &folded.forward(&x)?)?;
    }
    Ok(FoldReport {
        max_abs_diff: acc.max_abs,
        max_rel_diff: acc.max_rel,
        n_probes: acc.n,
        param_count_before: m.param_count(),
        param_count_after: folded.param_count(),
    })
}

/// Folds every IBE and every conv + BN pair in the network. Already folded
/// models come back unchanged.
pub fn fold_model<T: Scalar>(model: &FemtoDet<T>) -> Result<FemtoDet<T>> {
    let mut out = model.clone();
    for unit in &mut out.backbone.stem {
        *unit = fold_unit(unit)?;
    }
    for block in out.backbone.stages.iter_mut().flatten() {
        if let Some(e) = &mut block.expand {
            *e = fold_unit(e)?;
        }
        block.spatial = match &block.spatial {
            Spatial::Dsc { dw, pw } => Spatial::Dsc {
                dw: fold_unit(dw)?,
                pw: fold_unit(pw)?,
            },
            Spatial::Ibe(m) => {
                let (dw, pw) = fold_ibe(m)?.into_units();
                Spatial::Dsc { dw, pw }
            }
        };
    }
    for unit in out.neck.units_mut().chain(out.head.units_mut()) {
        *unit = fold_unit(unit)?;
    }
    out.config.folded = true;
    Ok(out)
}

/// Folds `model` and compares head outputs on `n_probes` seeded
/// standard-normal images of the configured input size.
pub fn verify_fold_model<T: Scalar>(model: &FemtoDet<T>, n_probes: usize, seed: u64) -> Result<FoldReport> {
    let folded = fold_model(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = model.config.input_size;
    let mut acc = DiffAccumulator::new();
    for _ in 0..n_probes {
        let x = Tensor::<T>::randn([1, 3, h, w], &mut rng);
        let a = model.forward(&x)?;
        let b = folded.forward(&x)?;
        acc.push(&a.cls, &b.cls)?;
        acc.push(&a.obj, &b.obj)?;
        acc.push(&a.boxes, &b.boxes)?;
    }
    Ok(FoldReport {
        max_abs_diff: acc.max_abs,
        max_rel_diff: acc.max_rel,
        n_probes,
        param_count_before: model.param_report().total,
        param_count_after: folded.param_report().total,
    })
}

/// Like [`verify_fold_model`] for a 32-bit model, but the unfolded
/// reference runs in 64-bit (the unfolded boundary branch subtracts two
/// nearly equal terms, so its own rounding would otherwise dominate) and
/// probes are uniform images in `[0, 1)`, the pixel range.
pub fn verify_fold_model_f32(model: &FemtoDet<f32>, n_probes: usize, seed: u64) -> Result<FoldReport> {
    let folded = fold_model(model)?;
    let reference = model.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = model.config.input_size;
    let mut acc = DiffAccumulator::new();
    for _ in 0..n_probes {
        let x = Tensor::<f32>::uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
        let a = reference.forward(&x.cast())?;
        let b = folded.forward(&x)?;
        acc.push(&a.cls, &b.cls.cast())?;
        acc.push(&a.obj, &b.obj.cast())?;
        acc.push(&a.boxes, &b.boxes.cast())?;
    }
    Ok(FoldReport {
        max_abs_diff: acc.max_abs,
        max_rel_diff: acc.max_rel,
        n_probes,
        param_count_before: model.param_report().total,
        param_count_after: folded.param_report().total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use crate::ops::batch_norm_apply;

    #[test]
    fn fold_model_is_idempotent_and_equivalent() {
        let cfg = ModelConfig {
            input_size: (32, 32),
            ..ModelConfig::default()
        };
        let mut m = FemtoDet::<f64>::from_seed(&cfg, 11).unwrap();
        m.randomize(&mut rng(12)).unwrap();
        let f = fold_model(&m).unwrap();
        assert_eq!(fold_model(&f).unwrap(), f);
        let report = verify_fold_model(&m, 2, 13).unwrap();
        assert!(report.max_abs_diff < 1e-10, "{report}");
        assert!(report.param_count_after < report.param_count_before);
        let plain = FemtoDet::<f64>::from_seed(&ModelConfig { use_ibe: false, ..cfg }, 11).unwrap();
        assert_eq!(report.param_count_after, fold_model(&plain).unwrap().param_report().total);
    }

    #[test]
    fn fold_model_rejects_train_mode() {
        let cfg = ModelConfig {
            input_size: (32, 32),
            ..ModelConfig::default()
        };
        let mut m = FemtoDet::<f32>::from_seed(&cfg, 0).unwrap();
        m.set_mode(BnMode::Train);
        assert!(fold_model(&m).is_err());
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_conv(kind: ConvKind, cin: usize, cout: usize, k: usize, stride: usize, r: &mut ChaCha8Rng) -> AffineConvSpec<f64> {
        let mut c = crate::layers::init_conv(kind, cin, cout, (k, k), stride, r).unwrap();
        for b in &mut c.bias {
            *b = rand::Rng::gen_range(r, -1.0..1.0);
        }
        c
    }

    #[test]
    fn bn_identity_fold_is_exact_identity() {
        let mut r = rng(1);
        let conv = random_conv(ConvKind::Depthwise, 3, 3, 3, 1, &mut r);
        let mut bn = BatchNormParams::identity(3);
        bn.running_var = vec![1.0 - bn.eps; 3];
        let f = fold_bn_into_conv(&conv, &bn).unwrap();
        assert_eq!(f.weight, conv.weight);
        assert_eq!(f.bias, conv.bias);
    }

    #[test]
    fn bn_fold_hand_algebra() {
        let w = Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap();
        let conv = AffineConvSpec::pointwise(1, 1, w, vec![5.0]).unwrap();
        let mut bn = BatchNormParams::<f64>::identity(1);
        bn.gamma = vec![2.0];
        bn.beta = vec![1.0];
        bn.running_mean = vec![3.0];
        bn.running_var = vec![4.0 - bn.eps];
        let f = fold_bn_into_conv(&conv, &bn).unwrap();
        // γ/√(σ²+ε) = 1: ŵ = w, b̂ = 1 + (5 − 3) = b − 2.
        assert!((f.weight.data()[0] - 3.0).abs() < 1e-12);
        assert!((f.bias[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn bn_fold_rejects_train_mode_and_mismatch() {
        let conv = AffineConvSpec::<f64>::zeros(ConvKind::Pointwise, 2, 3, (1, 1), 1, 0).unwrap();
        let mut bn = BatchNormParams::identity(3);
        bn.mode = BnMode::Train;
        assert!(matches!(fold_bn_into_conv(&conv, &bn), Err(FemtoError::Mode(_))));
        assert!(fold_bn_into_conv(&conv, &BatchNormParams::identity(2)).is_err());
    }

    #[test]
    fn bn_fold_matches_composite() {
        let mut r = rng(2);
        for kind in [ConvKind::Vanilla, ConvKind::Depthwise, ConvKind::Pointwise] {
            let (cin, cout, k) = match kind {
                ConvKind::Vanilla => (3, 5, 3),
                ConvKind::Depthwise => (4, 4, 3),
                ConvKind::Pointwise => (4, 6, 1),
            };
            let conv = random_conv(kind, cin, cout, k, 2, &mut r);
            let bn = BatchNormParams::random(cout, &mut r);
            let f = fold_bn_into_conv(&conv, &bn).unwrap();
            let x = Tensor::<f64>::randn([2, cin, 9, 8], &mut r);
            let composite = batch_norm_apply(&conv2d(&x, &conv).unwrap(), &bn).unwrap().0;
            assert!(conv2d(&x, &f).unwrap().max_abs_diff(&composite).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn scale_identity_zero_and_homogeneity() {
        let mut r = rng(3);
        let conv = random_conv(ConvKind::Depthwise, 3, 3, 3, 1, &mut r);
        assert_eq!(scale_affine(&conv, 1.0).unwrap(), conv);
        let zero = scale_affine(&conv, 0.0).unwrap();
        let x = Tensor::<f64>::randn([1, 3, 6, 6], &mut r);
        assert!(conv2d(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let s = sigmoid(0.37);
        let scaled = conv2d(&x, &conv).unwrap().scale(s);
        let folded = conv2d(&x, &scale_affine(&conv, s).unwrap()).unwrap();
        assert!(folded.max_abs_diff(&scaled).unwrap() <= 1e-12);
        assert!(scale_affine(&conv, f64::NAN).is_err());
    }

    #[test]
    fn embed_places_value_at_center() {
        let w = Tensor::new([1, 1, 1, 1], vec![2.5]).unwrap();
        let c = AffineConvSpec::new(ConvKind::Depthwise, 1, 1, (1, 1), 1, 0, w, vec![0.1]).unwrap();
        let e = embed_kernel(&c, (3, 3)).unwrap();
        assert_eq!(e.weight.data(), &[0.0, 0.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(e.padding, 1);
        assert_eq!(embed_kernel(&c, (1, 1)).unwrap(), c);
        assert!(embed_kernel(&c, (2, 2)).is_err());
    }

    #[test]
    fn embed_preserves_forward() {
        let mut r = rng(4);
        for stride in [1, 2] {
            let c = random_conv(ConvKind::Depthwise, 5, 5, 1, stride, &mut r);
            let e = embed_kernel(&c, (3, 3)).unwrap();
            let x = Tensor::<f64>::randn([2, 5, 9, 7], &mut r);
            let a = conv2d(&x, &c).unwrap();
            assert!(conv2d(&x, &e).unwrap().max_abs_diff(&a).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn add_affine_cases() {
        let mut r = rng(5);
        let a = random_conv(ConvKind::Depthwise, 3, 3, 3, 1, &mut r);
        let b = random_conv(ConvKind::Depthwise, 3, 3, 3, 1, &mut r);
        let neg = scale_affine(&a, -1.0).unwrap();
        let z = add_affine(&a, &neg).unwrap();
        assert!(z.weight.data().iter().all(|&v| v == 0.0));
        assert!(z.bias.iter().all(|&v| v == 0.0));
        let zeros = AffineConvSpec::zeros(ConvKind::Depthwise, 3, 3, (3, 3), 1, 1).unwrap();
        assert_eq!(add_affine(&a, &zeros).unwrap(), a);
        let x = Tensor::<f64>::randn([2, 3, 6, 5], &mut r);
        let sum = crate::ops::add(&conv2d(&x, &a).unwrap(), &conv2d(&x, &b).unwrap()).unwrap();
        let folded = conv2d(&x, &add_affine(&a, &b).unwrap()).unwrap();
        assert!(folded.max_abs_diff(&sum).unwrap() <= 1e-12);
        let other = random_conv(ConvKind::Depthwise, 3, 3, 3, 2, &mut r);
        assert!(add_affine(&a, &other).is_err());
    }

    #[test]
    fn fold_ibe_param_count_closed_form() {
        let mut r = rng(6);
        let m = IbeModule::<f64>::random(6, 10, 1, &mut r).unwrap();
        let f = fold_ibe(&m).unwrap();
        assert_eq!(f.param_count(), 6 * 9 + 6 + 10 * 6 + 10);
        assert_eq!(f.dw.kind, ConvKind::Depthwise);
        assert_eq!(f.dw.kernel, (3, 3));
        assert_eq!(f.pw.kind, ConvKind::Pointwise);
    }

    #[test]
    fn fold_ibe_rejects_train_mode() {
        let mut r = rng(7);
        let mut m = IbeModule::<f64>::random(2, 2, 1, &mut r).unwrap();
        m.bn2.mode = BnMode::Train;
        assert!(matches!(fold_ibe(&m), Err(FemtoError::Mode(_))));
    }

    #[test]
    fn report_record_format() {
        let r = FoldReport {
            max_abs_diff: 1.5e-7,
            max_rel_diff: 2e-8,
            n_probes: 100,
            param_count_before: 10,
            param_count_after: 8,
        };
        let text = r.to_string();
        assert!(text.starts_with("max_abs_diff=1.5e-7\n"));
        assert!(text.contains("n_probes=100\n"));
        assert!(text.ends_with("param_count_after=8"));
    }
}
