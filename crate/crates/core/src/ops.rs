//! Forward operators: convolution, batch normalization, ReLU, nearest
//! upsampling and elementwise add, plus the raw kernels the gradient tape
//! reuses for backward passes.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{FemtoError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Vanilla,
    Depthwise,
    Pointwise,
}

/// Stride, zero padding and channel grouping of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(FemtoError::Geometry("stride must be positive".into()));
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh {
            return Err(FemtoError::Dimension {
                op: "conv2d",
                axis: "height",
                expected: kh,
                got: ph,
            });
        }
        if pw < kw {
            return Err(FemtoError::Dimension {
                op: "conv2d",
                axis: "width",
                expected: kw,
                got: pw,
            });
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// A convolution's complete affine description: weights, bias and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConvSpec<T> {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// Shape `(out, in / groups, kh, kw)`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> AffineConvSpec<T> {
    pub fn new(
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        weight: Tensor<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        let groups = match kind {
            ConvKind::Depthwise => in_channels,
            _ => 1,
        };
        let spec = Self {
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            weight,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// All-zero spec with the given geometry.
    pub fn zeros(
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let groups = if kind == ConvKind::Depthwise { in_channels } else { 1 };
        let per_group = if groups == 0 { 0 } else { in_channels / groups };
        let weight = Tensor::zeros([out_channels, per_group, kernel.0, kernel.1]);
        Self::new(
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            vec![T::zero(); out_channels],
        )
    }

    /// Depthwise 3×3, stride `stride`, pad 1.
    pub fn depthwise3x3(channels: usize, stride: usize, weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        Self::new(ConvKind::Depthwise, channels, channels, (3, 3), stride, 1, weight, bias)
    }

    pub fn pointwise(in_channels: usize, out_channels: usize, weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        Self::new(ConvKind::Pointwise, in_channels, out_channels, (1, 1), 1, 0, weight, bias)
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.groups == 0 || self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(FemtoError::Geometry(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        match self.kind {
            ConvKind::Depthwise => {
                if self.groups != self.in_channels || self.in_channels != self.out_channels {
                    return Err(FemtoError::Geometry(format!(
                        "depthwise needs groups == in == out, got groups {} in {} out {}",
                        self.groups, self.in_channels, self.out_channels
                    )));
                }
            }
            ConvKind::Pointwise => {
                if (kh, kw) != (1, 1) || self.groups != 1 {
                    return Err(FemtoError::Geometry(format!(
                        "pointwise needs a 1×1 kernel and groups 1, got {kh}×{kw} groups {}",
                        self.groups
                    )));
                }
            }
            ConvKind::Vanilla => {}
        }
        let expected = [self.out_channels, self.in_channels / self.groups, kh, kw];
        if self.weight.shape() != expected {
            return Err(FemtoError::Shape {
                op: "AffineConvSpec",
                left: expected,
                right: self.weight.shape(),
            });
        }
        if self.bias.len() != self.out_channels {
            return Err(FemtoError::Dimension {
                op: "AffineConvSpec",
                axis: "bias",
                expected: self.out_channels,
                got: self.bias.len(),
            });
        }
        if self.stride == 0 {
            return Err(FemtoError::Geometry("stride must be positive".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AffineConvSpec<U> {
        AffineConvSpec {
            kind: self.kind,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::of(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }
}

/// Exact cross-correlation plus bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, spec: &AffineConvSpec<T>) -> Result<Tensor<T>> {
    spec.validate()?;
    if x.c() != spec.in_channels {
        return Err(FemtoError::Dimension {
            op: "conv2d",
            axis: "channels",
            expected: spec.in_channels,
            got: x.c(),
        });
    }
    conv_forward(x, &spec.weight, Some(&spec.bias), spec.geom())
}

// Output columns `ox` whose input column `ox*stride + k - pad` lies inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.shape();
    let [cout, cpg, kh, kw] = w.shape();
    if g.groups == 0 || cin != cpg * g.groups || cout % g.groups != 0 {
        return Err(FemtoError::Dimension {
            op: "conv2d",
            axis: "channels",
            expected: cpg * g.groups,
            got: cin,
        });
    }
    let (oh, ow) = g.output_hw(h, wd, kh, kw)?;
    let opg = cout / g.groups;
    let s = g.stride;
    let p = g.padding;
    let pl = wd.div_ceil(s);
    let psz = s * h * pl;
    let xph = phase_split(x, s);
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let wdat = w.data();
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..cout {
            let grp = oc / opg;
            let obase = (b * cout + oc) * oh * ow;
            let oplane = &mut od[obase..obase + oh * ow];
            for icl in 0..cpg {
                let ic = grp * cpg + icl;
                let xplane = &xph[(b * cin + ic) * psz..][..psz];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(oh, h, ky, s, p);
                    for kx in 0..kw {
                        let wv = wdat[((oc * cpg + icl) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(ow, wd, kx, s, p);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let ix0 = ox0 * s + kx - p;
                        let (r, q0, len) = (ix0 % s, ix0 / s, ox1 - ox0);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let orow = &mut oplane[oy * ow + ox0..][..len];
                            let xrow = &xplane[(r * h + iy) * pl + q0..][..len];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o = *o + wv * xv;
                            }
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias[oc];
                for o in oplane.iter_mut() {
                    *o = *o + bv;
                }
            }
        }
    }
    Ok(out)
}

/// Splits every plane by column phase for stride `s`: plane layout
/// `[r][y][q]` holds column `q·s + r`, so strided reads become contiguous.
/// Stride 1 is the identity layout.
fn phase_split<T: Scalar>(x: &Tensor<T>, s: usize) -> Cow<'_, [T]> {
    if s == 1 {
        return Cow::Borrowed(x.data());
    }
    let [n, c, h, wd] = x.shape();
    let pl = wd.div_ceil(s);
    let psz = s * h * pl;
    let mut out = vec![T::zero(); n * c * psz];
    for (plane, dst) in x.data().chunks_exact(h * wd).zip(out.chunks_exact_mut(psz)) {
        for y in 0..h {
            let row = &plane[y * wd..(y + 1) * wd];
            for r in 0..s.min(wd) {
                let d = &mut dst[(r * h + y) * pl..][..pl];
                for (o, &v) in d.iter_mut().zip(row[r..].iter().step_by(s)) {
                    *o = v;
                }
            }
        }
    }
    Cow::Owned(out)
}

/// Inverse of [`phase_split`].
fn phase_merge<T: Scalar>(ph: Vec<T>, shape: [usize; 4], s: usize) -> Tensor<T> {
    if s == 1 {
        return Tensor::new(shape, ph).expect("phase buffer matches shape");
    }
    let [_, _, h, wd] = shape;
    let pl = wd.div_ceil(s);
    let psz = s * h * pl;
    let mut out = Tensor::zeros(shape);
    for (plane, src) in out.data_mut().chunks_exact_mut(h * wd).zip(ph.chunks_exact(psz)) {
        for y in 0..h {
            let row = &mut plane[y * wd..(y + 1) * wd];
            for r in 0..s.min(wd) {
                let d = &src[(r * h + y) * pl..][..pl];
                for (o, &v) in row[r..].iter_mut().step_by(s).zip(d) {
                    *o = v;
                }
            }
        }
    }
    out
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv_backward_input<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    x_shape: [usize; 4],
) -> Tensor<T> {
    let [n, cin, h, wd] = x_shape;
    let [cout, cpg, kh, kw] = w.shape();
    let [_, _, oh, ow] = gy.shape();
    let opg = cout / g.groups;
    let (s, p) = (g.stride, g.padding);
    let pl = wd.div_ceil(s);
    let psz = s * h * pl;
    let mut gph = vec![T::zero(); n * cin * psz];
    let gyd = gy.data();
    let wdat = w.data();
    for b in 0..n {
        for oc in 0..cout {
            let grp = oc / opg;
            let gbase = (b * cout + oc) * oh * ow;
            let gplane = &gyd[gbase..gbase + oh * ow];
            for icl in 0..cpg {
                let ic = grp * cpg + icl;
                let xplane = &mut gph[(b * cin + ic) * psz..][..psz];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(oh, h, ky, s, p);
                    for kx in 0..kw {
                        let wv = wdat[((oc * cpg + icl) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(ow, wd, kx, s, p);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let ix0 = ox0 * s + kx - p;
                        let (r, q0, len) = (ix0 % s, ix0 / s, ox1 - ox0);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * ow + ox0..][..len];
                            let xrow = &mut xplane[(r * h + iy) * pl + q0..][..len];
                            for (xv, &gv) in xrow.iter_mut().zip(grow) {
                                *xv = *xv + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    phase_merge(gph, x_shape, s)
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Gradient of a convolution with respect to its weight.
pub(crate) fn conv_backward_weight<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: [usize; 4],
    g: ConvGeom,
) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, cpg, kh, kw] = w_shape;
    let [_, _, oh, ow] = gy.shape();
    let opg = cout / g.groups;
    let (s, p) = (g.stride, g.padding);
    let pl = wd.div_ceil(s);
    let psz = s * h * pl;
    let xph = phase_split(x, s);
    let mut gw = Tensor::zeros(w_shape);
    let gyd = gy.data();
    let gwd = gw.data_mut();
    for oc in 0..cout {
        let grp = oc / opg;
        for icl in 0..cpg {
            let ic = grp * cpg + icl;
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(oh, h, ky, s, p);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(ow, wd, kx, s, p);
                    let mut acc = T::zero();
                    if ox0 < ox1 {
                        let ix0 = ox0 * s + kx - p;
                        let (r, q0, len) = (ix0 % s, ix0 / s, ox1 - ox0);
                        for b in 0..n {
                            let gbase = (b * cout + oc) * oh * ow;
                            let xplane = &xph[(b * cin + ic) * psz..][..psz];
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let grow = &gyd[gbase + oy * ow + ox0..][..len];
                                acc = acc + dot(grow, &xplane[(r * h + iy) * pl + q0..][..len]);
                            }
                        }
                    }
                    gwd[((oc * cpg + icl) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    gw
}

/// Per-channel sum over batch and spatial axes.
pub(crate) fn channel_sum<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let mut out = vec![T::zero(); t.c()];
    for b in 0..t.n() {
        for (c, o) in out.iter_mut().enumerate() {
            *o = *o + sum_map(t.plane(b, c), |v| v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: BnMode,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNormParams<T> {
    /// γ = 1, β = 0, μ = 0, σ² = 1, eval mode.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::of(BN_EPS),
            momentum: T::of(BN_MOMENTUM),
            mode: BnMode::Eval,
        }
    }

    /// Eval-mode parameters with non-trivial statistics, for tests and probes.
    pub fn random<R: rand::Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut bn = Self::identity(channels);
        for c in 0..channels {
            bn.gamma[c] = T::of(rng.gen_range(0.5..1.5));
            bn.beta[c] = T::of(rng.gen_range(-0.5..0.5));
            bn.running_mean[c] = T::of(rng.gen_range(-0.5..0.5));
            bn.running_var[c] = T::of(rng.gen_range(0.5..2.0));
        }
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, v) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != c {
                return Err(FemtoError::InvalidArgument(format!(
                    "batch-norm {name} has {} entries, gamma has {c}",
                    v.len()
                )));
            }
        }
        if !(self.eps > T::zero()) {
            return Err(FemtoError::InvalidArgument(format!(
                "batch-norm eps must be positive, got {}",
                self.eps
            )));
        }
        if let Some(v) = self.running_var.iter().find(|v| !(**v >= T::zero())) {
            return Err(FemtoError::InvalidArgument(format!(
                "batch-norm running_var must be non-negative, got {v}"
            )));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that eval-mode output is `scale·x + shift`.
    pub fn eval_affine(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = scale
            .iter()
            .zip(&self.running_mean)
            .zip(&self.beta)
            .map(|((&s, &m), &b)| b - s * m)
            .collect();
        (scale, shift)
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormParams<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::of(x.to_f64().unwrap_or(f64::NAN))).collect();
        BatchNormParams {
            gamma: cv(&self.gamma),
            beta: cv(&self.beta),
            running_mean: cv(&self.running_mean),
            running_var: cv(&self.running_var),
            eps: U::of(self.eps.to_f64().unwrap_or(f64::NAN)),
            momentum: U::of(self.momentum.to_f64().unwrap_or(f64::NAN)),
            mode: self.mode,
        }
    }
}

/// Biased per-channel batch mean and variance over `(n, h, w)`.
///
/// The mean gets one correction pass so a constant channel yields its exact
/// value and zero variance.
/// `Σ f(vᵢ)` with eight independent accumulators.
#[inline]
pub(crate) fn sum_map<T: Scalar>(v: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = v.chunks_exact(8);
    let tail: T = chunks.remainder().iter().map(|&a| f(a)).sum();
    for c in chunks {
        for k in 0..8 {
            acc[k] = acc[k] + f(c[k]);
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let count = T::of((x.n() * x.h() * x.w()) as f64);
    let mut means = Vec::with_capacity(x.c());
    let mut vars = Vec::with_capacity(x.c());
    for c in 0..x.c() {
        let planes = || (0..x.n()).map(|b| x.plane(b, c));
        let m0 = planes().map(|p| sum_map(p, |v| v)).sum::<T>() / count;
        let m = m0 + planes().map(|p| sum_map(p, |v| v - m0)).sum::<T>() / count;
        let var = planes().map(|p| sum_map(p, |v| (v - m) * (v - m))).sum::<T>() / count;
        means.push(m);
        vars.push(var);
    }
    (means, vars)
}

fn check_bn_channels<T: Scalar>(x: &Tensor<T>, bn: &BatchNormParams<T>) -> Result<()> {
    bn.validate()?;
    if x.c() != bn.channels() {
        return Err(FemtoError::Dimension {
            op: "batch_norm",
            axis: "channels",
            expected: bn.channels(),
            got: x.c(),
        });
    }
    Ok(())
}

/// Batch norm without touching running statistics. In train mode returns
/// the batch statistics that were used.
pub fn batch_norm_apply<T: Scalar>(
    x: &Tensor<T>,
    bn: &BatchNormParams<T>,
) -> Result<(Tensor<T>, Option<(Vec<T>, Vec<T>)>)> {
    check_bn_channels(x, bn)?;
    let (mean, var, stats) = match bn.mode {
        BnMode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), None),
        BnMode::Train => {
            let (m, v) = batch_stats(x);
            (m.clone(), v.clone(), Some((m, v)))
        }
    };
    let mut y = x.clone();
    for b in 0..x.n() {
        for c in 0..x.c() {
            let inv = (var[c] + bn.eps).sqrt();
            let (g, be, m) = (bn.gamma[c], bn.beta[c], mean[c]);
            for v in y.plane_mut(b, c) {
                *v = g * (*v - m) / inv + be;
            }
        }
    }
    Ok((y, stats))
}

/// Batch norm per `bn.mode`; in train mode the running statistics are
/// updated with `running ← (1 − momentum)·running + momentum·batch`.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>, bn: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
    let (y, stats) = batch_norm_apply(x, bn)?;
    if let Some((m, v)) = stats {
        update_running(bn, &m, &v);
    }
    Ok(y)
}

pub(crate) fn update_running<T: Scalar>(bn: &mut BatchNormParams<T>, mean: &[T], var: &[T]) {
    let mo = bn.momentum;
    for c in 0..mean.len() {
        bn.running_mean[c] = (T::one() - mo) * bn.running_mean[c] + mo * mean[c];
        bn.running_var[c] = (T::one() - mo) * bn.running_var[c] + mo * var[c];
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn add<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(y, "add", |a, b| a + b)
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(FemtoError::InvalidArgument("upsample factor must be ≥ 1".into()));
    }
    let [n, c, h, w] = x.shape();
    Ok(Tensor::from_fn([n, c, h * factor, w * factor], |[b, ch, y, xx]| {
        x.at([b, ch, y / factor, xx / factor])
    }))
}

/// Adjoint of nearest upsampling: sums each `factor × factor` block.
pub(crate) fn upsample_nearest_backward<T: Scalar>(gy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = gy.shape();
    let mut gx = Tensor::zeros([n, c, h / factor, w / factor]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let idx = [b, ch, y / factor, xx / factor];
                    let v = gx.at(idx) + gy.at([b, ch, y, xx]);
                    gx.set(idx, v);
                }
            }
        }
    }
    gx
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
