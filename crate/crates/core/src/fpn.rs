//! Neck assembly: fuses backbone levels into the detection pyramid P3..P5.
//!
//! Three ingredient maps exist per level: the context-augmented IF_i, the
//! across-layer AF_i, and a plain lateral projection L_i. The full neck
//! blends them with per-level softmax weights (a convex combination by
//! construction); reduced variants drop ingredients or fall back to a classic
//! top-down FPN for ablation.

use crate::afw::{afw, AfwConfig, AfwOutput};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, ValueId};
use crate::ica::{ica_block, IcaConfig};
use crate::layers;
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Shape4};

/// Neck wiring selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    FpnBaseline,
    IcaOnly,
    AfwOnly,
    IcaAfwNoAff,
    Full,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fpn-baseline" => Ok(Variant::FpnBaseline),
            "ica-only" => Ok(Variant::IcaOnly),
            "afw-only" => Ok(Variant::AfwOnly),
            "ica+afw-no-aff" => Ok(Variant::IcaAfwNoAff),
            "full" => Ok(Variant::Full),
            other => Err(CoreError::Config(format!(
                "unknown variant `{other}`; expected fpn-baseline | ica-only | afw-only | ica+afw-no-aff | full"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::FpnBaseline => "fpn-baseline",
            Variant::IcaOnly => "ica-only",
            Variant::AfwOnly => "afw-only",
            Variant::IcaAfwNoAff => "ica+afw-no-aff",
            Variant::Full => "full",
        }
    }

    pub const ALL: [Variant; 5] = [
        Variant::FpnBaseline,
        Variant::IcaOnly,
        Variant::AfwOnly,
        Variant::IcaAfwNoAff,
        Variant::Full,
    ];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeckConfig {
    pub neck: usize,
    pub variant: Variant,
    pub use_c2: bool,
    pub heads: usize,
    pub rates: Vec<usize>,
    pub kernel: usize,
}

impl NeckConfig {
    pub fn new(neck: usize, variant: Variant) -> Self {
        NeckConfig {
            neck,
            variant,
            use_c2: true,
            heads: 3,
            rates: vec![1, 2, 3],
            kernel: 3,
        }
    }

    pub fn ica(&self) -> IcaConfig {
        IcaConfig {
            heads: self.heads,
            rates: self.rates.clone(),
            kernel: self.kernel,
            channels: self.neck,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neck == 0 || self.neck % 2 != 0 {
            return Err(CoreError::Config(format!(
                "neck width must be positive and even, got {}",
                self.neck
            )));
        }
        match self.variant {
            Variant::FpnBaseline | Variant::AfwOnly => Ok(()),
            _ => self.ica().validate(),
        }
    }
}

/// One level of a feature pyramid recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct PyramidLevel {
    pub level: u32,
    pub stride: usize,
    pub feature: ValueId,
}

/// Ordered pyramid with its reference image size.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<PyramidLevel>,
    pub image_hw: (usize, usize),
}

impl Pyramid {
    pub fn new(levels: Vec<PyramidLevel>, image_hw: (usize, usize)) -> Self {
        Pyramid { levels, image_hw }
    }

    /// Checks stride monotonicity and the size = ceil(image/stride) rule.
    pub fn validate<T: Scalar>(&self, g: &Graph<T>) -> Result<()> {
        let mut prev_stride = 0usize;
        for lv in &self.levels {
            if lv.stride != 1usize << lv.level {
                return Err(CoreError::Validation {
                    line: lv.level as usize,
                    message: format!("level {} must have stride {}", lv.level, 1usize << lv.level),
                });
            }
            if lv.stride <= prev_stride {
                return Err(CoreError::Validation {
                    line: lv.level as usize,
                    message: "pyramid strides must strictly increase".into(),
                });
            }
            prev_stride = lv.stride;
            let s = g.shape(lv.feature);
            let want_h = self.image_hw.0.div_ceil(lv.stride);
            let want_w = self.image_hw.1.div_ceil(lv.stride);
            if s.h != want_h || s.w != want_w {
                return Err(CoreError::Validation {
                    line: lv.level as usize,
                    message: format!(
                        "level {} is {}x{}, expected {}x{} for image {}x{}",
                        lv.level, s.h, s.w, want_h, want_w, self.image_hw.0, self.image_hw.1
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn feature(&self, level: u32) -> Option<ValueId> {
        self.levels
            .iter()
            .find(|lv| lv.level == level)
            .map(|lv| lv.feature)
    }
}

/// 1×1 lateral projection to neck width.
pub fn lateral<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    c: ValueId,
    neck: usize,
) -> Result<ValueId> {
    layers::conv1x1(g, store, name, c, neck)
}

pub struct AffOutput {
    pub fused: ValueId,
    /// The (1,3,1,1) simplex weights for inspection.
    pub alpha: ValueId,
}

/// Convex blend of the three ingredient maps with learned simplex weights.
pub fn aff<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    if_i: ValueId,
    af_i: ValueId,
    l_i: ValueId,
) -> Result<AffOutput> {
    let (s1, s2, s3) = (g.shape(if_i), g.shape(af_i), g.shape(l_i));
    if s1 != s2 || s2 != s3 {
        return Err(CoreError::Dimension(format!(
            "aff inputs must share shape: {s1} vs {s2} vs {s3}"
        )));
    }
    let logits = g.param(
        store,
        &format!("{name}.logits"),
        Shape4::new(1, 3, 1, 1),
        Init::Zeros,
    )?;
    let alpha = layers::softmax_channels(g, logits)?;
    let mut fused: Option<ValueId> = None;
    for (k, &branch) in [if_i, af_i, l_i].iter().enumerate() {
        let a_k = g.slice_channels(alpha, k, 1)?;
        let term = g.scale_by(branch, a_k)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(AffOutput {
        fused: fused.expect("three branches"),
        alpha,
    })
}

pub struct NeckOutput {
    /// P3, P4, P5 at strides 8, 16, 32.
    pub pyramid: Pyramid,
    /// Per-level fusion weights (level, ValueId), present for the full variant.
    pub alphas: Vec<(u32, ValueId)>,
    /// AFW internals when that path is active.
    pub afw: Option<AfwOutput>,
}

/// Classic top-down FPN over C3..C5: lateral 1×1, nearest 2× upsample, add,
/// 3×3 smoothing.
pub fn fpn_baseline_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    prefix: &str,
    c3: ValueId,
    c4: ValueId,
    c5: ValueId,
    neck: usize,
    image_hw: (usize, usize),
) -> Result<NeckOutput> {
    let l3 = lateral(g, store, &format!("{prefix}.lat3"), c3, neck)?;
    let l4 = lateral(g, store, &format!("{prefix}.lat4"), c4, neck)?;
    let l5 = lateral(g, store, &format!("{prefix}.lat5"), c5, neck)?;

    let m5 = l5;
    let up5 = g.upsample_nearest2x(m5)?;
    let m4 = g.add(l4, up5)?;
    let up4 = g.upsample_nearest2x(m4)?;
    let m3 = g.add(l3, up4)?;

    let p3 = layers::conv3x3(g, store, &format!("{prefix}.smooth3"), m3, neck, 1)?;
    let p4 = layers::conv3x3(g, store, &format!("{prefix}.smooth4"), m4, neck, 1)?;
    let p5 = layers::conv3x3(g, store, &format!("{prefix}.smooth5"), m5, neck, 1)?;

    Ok(NeckOutput {
        pyramid: Pyramid::new(
            vec![
                PyramidLevel { level: 3, stride: 8, feature: p3 },
                PyramidLevel { level: 4, stride: 16, feature: p4 },
                PyramidLevel { level: 5, stride: 32, feature: p5 },
            ],
            image_hw,
        ),
        alphas: Vec::new(),
        afw: None,
    })
}

/// Builds the configured neck over backbone features C2..C5.
pub fn neck_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    prefix: &str,
    c2: ValueId,
    c3: ValueId,
    c4: ValueId,
    c5: ValueId,
    cfg: &NeckConfig,
    image_hw: (usize, usize),
) -> Result<NeckOutput> {
    cfg.validate()?;
    if cfg.variant == Variant::FpnBaseline {
        return fpn_baseline_forward(g, store, prefix, c3, c4, c5, cfg.neck, image_hw);
    }

    let sources = [c3, c4, c5];
    let use_ica = matches!(cfg.variant, Variant::IcaOnly | Variant::IcaAfwNoAff | Variant::Full);
    let use_afw = matches!(cfg.variant, Variant::AfwOnly | Variant::IcaAfwNoAff | Variant::Full);

    let mut if_maps = Vec::new();
    if use_ica {
        let ica_cfg = cfg.ica();
        for (i, &c) in sources.iter().enumerate() {
            let level = 3 + i as u32;
            let out = ica_block(g, store, &format!("{prefix}.ica{level}"), c, &ica_cfg)?;
            if_maps.push(out.output);
        }
    }

    let afw_out = if use_afw {
        let afw_cfg = AfwConfig {
            neck: cfg.neck,
            use_c2: cfg.use_c2,
        };
        Some(afw(g, store, &format!("{prefix}.afw"), c2, c3, c4, c5, &afw_cfg)?)
    } else {
        None
    };

    let mut levels = Vec::with_capacity(3);
    let mut alphas = Vec::new();
    for (i, &c) in sources.iter().enumerate() {
        let level = 3 + i as u32;
        let l_i = lateral(g, store, &format!("{prefix}.lat{level}"), c, cfg.neck)?;
        let feature = match cfg.variant {
            Variant::IcaOnly => g.add(if_maps[i], l_i)?,
            Variant::AfwOnly => {
                let af = afw_out.as_ref().expect("afw path active").af[i];
                g.add(af, l_i)?
            }
            Variant::IcaAfwNoAff => {
                let af = afw_out.as_ref().expect("afw path active").af[i];
                let sum = g.add(if_maps[i], af)?;
                g.add(sum, l_i)?
            }
            Variant::Full => {
                let af = afw_out.as_ref().expect("afw path active").af[i];
                let out = aff(g, store, &format!("{prefix}.aff{level}"), if_maps[i], af, l_i)?;
                alphas.push((level, out.alpha));
                out.fused
            }
            Variant::FpnBaseline => unreachable!("handled above"),
        };
        levels.push(PyramidLevel {
            level,
            stride: 1usize << level,
            feature,
        });
    }

    Ok(NeckOutput {
        pyramid: Pyramid::new(levels, image_hw),
        alphas,
        afw: afw_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;

    fn pseudo(shape: Shape4, salt: u64) -> Tensor4<f64> {
        Tensor4::from_fn(shape, |n, c, y, x| {
            let i = (((n * 31 + c) * 37 + y) * 41 + x) as u64;
            let mut z = salt
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i.wrapping_mul(0xBF58_476D_1CE4_E5B9));
            z ^= z >> 29;
            z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    fn backbone(g: &mut Graph<f64>, salt: u64) -> (ValueId, ValueId, ValueId, ValueId) {
        let c2 = g.variable(pseudo(Shape4::new(1, 4, 16, 16), salt)).unwrap();
        let c3 = g.variable(pseudo(Shape4::new(1, 6, 8, 8), salt + 1)).unwrap();
        let c4 = g.variable(pseudo(Shape4::new(1, 8, 4, 4), salt + 2)).unwrap();
        let c5 = g.variable(pseudo(Shape4::new(1, 12, 2, 2), salt + 3)).unwrap();
        (c2, c3, c4, c5)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("bogus").is_err());
    }

    #[test]
    fn all_variants_produce_stride_table_shapes() {
        for v in Variant::ALL {
            let mut g: Graph<f64> = Graph::new();
            let mut store = ParamStore::new(11);
            let (c2, c3, c4, c5) = backbone(&mut g, 40);
            let cfg = NeckConfig::new(6, v);
            let out = neck_forward(&mut g, &mut store, "neck", c2, c3, c4, c5, &cfg, (64, 64))
                .unwrap();
            out.pyramid.validate(&g).unwrap();
            assert_eq!(g.shape(out.pyramid.feature(3).unwrap()), Shape4::new(1, 6, 8, 8));
            assert_eq!(g.shape(out.pyramid.feature(4).unwrap()), Shape4::new(1, 6, 4, 4));
            assert_eq!(g.shape(out.pyramid.feature(5).unwrap()), Shape4::new(1, 6, 2, 2));
        }
    }

    #[test]
    fn full_variant_has_more_params_than_baseline() {
        let mut counts = Vec::new();
        for v in [Variant::FpnBaseline, Variant::Full] {
            let mut g: Graph<f64> = Graph::new();
            let mut store = ParamStore::new(12);
            let (c2, c3, c4, c5) = backbone(&mut g, 41);
            let cfg = NeckConfig::new(6, v);
            neck_forward(&mut g, &mut store, "neck", c2, c3, c4, c5, &cfg, (64, 64)).unwrap();
            counts.push(store.scalar_count());
        }
        assert!(counts[1] > counts[0], "{} !> {}", counts[1], counts[0]);
    }

    #[test]
    fn aff_simplex_and_saturated_corner() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(13);
        let shape = Shape4::new(1, 4, 3, 3);
        let a = g.variable(pseudo(shape, 50)).unwrap();
        let b = g.variable(pseudo(shape, 51)).unwrap();
        let c = g.variable(pseudo(shape, 52)).unwrap();
        let out = aff(&mut g, &mut store, "aff", a, b, c).unwrap();
        let alpha = g.value(out.alpha);
        let sum: f64 = (0..3).map(|k| alpha.at(0, k, 0, 0)).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for k in 0..3 {
            assert!((alpha.at(0, k, 0, 0) - 1.0 / 3.0).abs() < 1e-12);
        }

        store
            .set_value(
                "aff.logits",
                Tensor4::new(Shape4::new(1, 3, 1, 1), vec![20.0, -20.0, -20.0]).unwrap(),
            )
            .unwrap();
        let mut g2: Graph<f64> = Graph::new();
        let av = pseudo(shape, 50);
        let a2 = g2.variable(av.clone()).unwrap();
        let b2 = g2.variable(pseudo(shape, 51)).unwrap();
        let c2 = g2.variable(pseudo(shape, 52)).unwrap();
        let out2 = aff(&mut g2, &mut store, "aff", a2, b2, c2).unwrap();
        let fused = g2.value(out2.fused);
        for (x, y) in fused.data().iter().zip(av.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn aff_convexity_fixed_point() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(14);
        let shape = Shape4::new(1, 2, 2, 2);
        let t = pseudo(shape, 60);
        let a = g.variable(t.clone()).unwrap();
        let b = g.variable(t.clone()).unwrap();
        let c = g.variable(t.clone()).unwrap();
        let out = aff(&mut g, &mut store, "aff", a, b, c).unwrap();
        for (x, y) in g.value(out.fused).data().iter().zip(t.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_zero_c5_leaves_p4_as_smoothed_lateral() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(15);
        let c3 = g.variable(pseudo(Shape4::new(1, 6, 8, 8), 70)).unwrap();
        let c4v = pseudo(Shape4::new(1, 8, 4, 4), 71);
        let c4 = g.variable(c4v.clone()).unwrap();
        let c5 = g.variable(Tensor4::zeros(Shape4::new(1, 12, 2, 2))).unwrap();
        let out =
            fpn_baseline_forward(&mut g, &mut store, "fpn", c3, c4, c5, 6, (64, 64)).unwrap();
        let p4 = g.value(out.pyramid.feature(4).unwrap()).clone();

        // reference: lateral + smoothing only (upsampled zero C5 adds nothing
        // because its lateral bias is zero-initialized)
        let mut g2: Graph<f64> = Graph::new();
        let c4b = g2.variable(c4v).unwrap();
        let l4 = lateral(&mut g2, &mut store, "fpn.lat4", c4b, 6).unwrap();
        let p4b = layers::conv3x3(&mut g2, &mut store, "fpn.smooth4", l4, 6, 1).unwrap();
        assert_eq!(p4.data(), g2.value(p4b).data());
    }

    #[test]
    fn full_neck_deterministic() {
        let run = || {
            let mut g: Graph<f64> = Graph::new();
            let mut store = ParamStore::new(16);
            let (c2, c3, c4, c5) = backbone(&mut g, 80);
            let cfg = NeckConfig::new(6, Variant::Full);
            let out =
                neck_forward(&mut g, &mut store, "neck", c2, c3, c4, c5, &cfg, (64, 64)).unwrap();
            out.pyramid
                .levels
                .iter()
                .flat_map(|lv| g.value(lv.feature).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }
}
