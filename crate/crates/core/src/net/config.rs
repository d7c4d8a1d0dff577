use serde::{Deserialize, Serialize};

use crate::error::{FemtoError, Result};

/// One line of the backbone table: `n` layers with `c` output channels, the
/// first of which uses stride `s`. `t` is the expansion factor applied to
/// the input width; it is unset for the plain stem convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    pub c: usize,
    pub n: usize,
    pub s: usize,
}

impl BackboneRow {
    pub const fn plain(c: usize, n: usize, s: usize) -> Self {
        Self { t: None, c, n, s }
    }

    pub const fn dsc(t: usize, c: usize, n: usize, s: usize) -> Self {
        Self { t: Some(t), c, n, s }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(h, w)` of the network input.
    pub input_size: (usize, usize),
    pub backbone: Vec<BackboneRow>,
    pub neck_channels: usize,
    /// Backbone stage indices fed to the neck; stage 0 is the stem.
    pub neck_taps: Vec<usize>,
    pub num_classes: usize,
    pub head_width: usize,
    pub use_ibe: bool,
    /// Upper bound on every internal channel width (used by the empty model).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_cap: Option<usize>,
    /// Batch norms merged and IBE modules rewritten as plain convolutions.
    #[serde(default)]
    pub folded: bool,
}

/// Channel and spatial dims of a stage output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (640, 640),
            backbone: vec![
                BackboneRow::plain(8, 1, 2),
                BackboneRow::dsc(1, 8, 1, 1),
                BackboneRow::dsc(4, 8, 2, 2),
                BackboneRow::dsc(4, 8, 2, 2),
                BackboneRow::dsc(4, 16, 3, 2),
                BackboneRow::dsc(4, 24, 2, 1),
                BackboneRow::dsc(4, 40, 2, 2),
                BackboneRow::dsc(4, 80, 1, 1),
            ],
            neck_channels: 24,
            neck_taps: vec![5, 7],
            num_classes: 20,
            head_width: 24,
            use_ibe: true,
            width_cap: None,
            folded: false,
        }
    }
}

impl ModelConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| {
            let line = e
                .span()
                .map(|sp| s[..sp.start.min(s.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            FemtoError::Parse {
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the width cap.
    pub fn width(&self, c: usize) -> usize {
        self.width_cap.map_or(c, |cap| c.min(cap))
    }

    pub fn stride_product(&self) -> usize {
        self.backbone.iter().map(|r| r.s).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FemtoError::InvalidArgument(m));
        let Some(first) = self.backbone.first() else {
            return bad("backbone needs at least one row".into());
        };
        if first.t.is_some() {
            return bad("first backbone row is the plain stem and takes no expansion factor".into());
        }
        for (i, r) in self.backbone.iter().enumerate() {
            if r.c == 0 || r.n == 0 || r.t == Some(0) {
                return bad(format!("backbone row {i}: c, n and t must be ≥ 1"));
            }
            if r.s != 1 && r.s != 2 {
                return bad(format!("backbone row {i}: stride {} not in {{1, 2}}", r.s));
            }
        }
        if self.width_cap == Some(0) {
            return bad("width_cap must be ≥ 1".into());
        }
        if self.neck_channels == 0 || self.head_width == 0 || self.num_classes == 0 {
            return bad("neck_channels, head_width and num_classes must be ≥ 1".into());
        }
        if self.neck_taps.is_empty() {
            return bad("neck_taps is empty".into());
        }
        if let Some(&t) = self.neck_taps.iter().find(|&&t| t >= self.backbone.len()) {
            return bad(format!("neck tap {t} references a missing stage"));
        }
        if self.neck_taps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("neck_taps must be strictly increasing".into());
        }
        let (h, w) = self.input_size;
        let total = self.stride_product();
        if h == 0 || w == 0 || h % total != 0 || w % total != 0 {
            return Err(FemtoError::Geometry(format!(
                "input {h}×{w} is not divisible by the backbone stride {total}"
            )));
        }
        Ok(())
    }

    /// Output shape of every backbone stage, stem first.
    pub fn stage_shapes(&self) -> Result<Vec<StageShape>> {
        self.validate()?;
        let (mut h, mut w) = self.input_size;
        Ok(self
            .backbone
            .iter()
            .map(|r| {
                h /= r.s;
                w /= r.s;
                StageShape {
                    c: self.width(r.c),
                    h,
                    w,
                }
            })
            .collect())
    }

    /// Stride of the fused neck output relative to the input: that of the
    /// highest-resolution tap.
    pub fn output_stride(&self) -> usize {
        let first = self.neck_taps.iter().copied().min().unwrap_or(0);
        self.backbone[..=first.min(self.backbone.len().saturating_sub(1))]
            .iter()
            .map(|r| r.s)
            .product()
    }
}

/// The same topology with every internal channel width set to 1.
pub fn make_empty_config(cfg: &ModelConfig) -> Result<ModelConfig> {
    cfg.validate()?;
    let mut out = cfg.clone();
    for r in &mut out.backbone {
        r.c = 1;
    }
    out.neck_channels = 1;
    out.head_width = 1;
    out.width_cap = Some(1);
    Ok(out)
}
