//! Across-layer Feature Weighting.
//!
//! The four backbone levels are aligned to the C4 grid, concatenated, and
//! processed by dual-axis attention (per-column and per-row stripes sharing
//! one value map). A 1×1 projection of the gathered feature then splits into
//! a global sigmoid gate and three per-level gates that modulate the aligned
//! maps before they are resized back to their pyramid levels.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, ValueId};
use crate::kernels::Axis;
use crate::layers;
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AfwConfig {
    /// Channel width of every aligned map and of the produced AF features.
    pub neck: usize,
    /// Whether the highest-resolution level C2 joins the gather.
    pub use_c2: bool,
}

impl AfwConfig {
    pub fn new(neck: usize) -> Self {
        AfwConfig { neck, use_c2: true }
    }
}

/// Aligns one backbone level to the target grid at neck width. Higher
/// resolutions average-pool down before a 1×1 projection; the lower
/// resolution upsamples through a stride-2 transposed convolution.
pub fn align<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    c: ValueId,
    neck: usize,
    target_hw: (usize, usize),
) -> Result<ValueId> {
    let s = g.shape(c);
    let (th, tw) = target_hw;
    if s.h > th {
        if s.h % th != 0 || s.w % tw != 0 || s.h / th != s.w / tw {
            return Err(CoreError::InvalidArgument(format!(
                "alignment ratio from {s} to {th}x{tw} is not uniform"
            )));
        }
        let factor = s.h / th;
        if !factor.is_power_of_two() {
            return Err(CoreError::InvalidArgument(format!(
                "alignment factor {factor} is not a power of two"
            )));
        }
        let pooled = g.avg_pool2d(c, factor)?;
        layers::conv1x1(g, store, name, pooled, neck)
    } else if s.h == th && s.w == tw {
        layers::conv1x1(g, store, name, c, neck)
    } else {
        if th != s.h * 2 || tw != s.w * 2 {
            return Err(CoreError::InvalidArgument(format!(
                "upsampling alignment expects a 2x target, got {s} -> {th}x{tw}"
            )));
        }
        layers::transpose_conv(g, store, name, c, neck, 2, 2)
    }
}

pub struct DualAxisOutput {
    /// X' = X + Concat(X_v' + V_a, X_h' + V_a).
    pub output: ValueId,
    /// Per-column attention weights (n, H, H, W).
    pub weights_v: ValueId,
    /// Per-row attention weights (n, W, H, W).
    pub weights_h: ValueId,
}

/// Striped self-attention along both axes with a shared value map.
///
/// Zeroing `<prefix>.v.{w,b}` and `<prefix>.va.{w,b}` makes the output equal
/// the input bit-exactly.
pub fn dual_axis_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    prefix: &str,
    x: ValueId,
) -> Result<DualAxisOutput> {
    let s = g.shape(x);
    if s.c % 2 != 0 {
        return Err(CoreError::Config(format!(
            "dual-axis attention needs an even channel count, got {}",
            s.c
        )));
    }
    let half = s.c / 2;
    let x_v = g.slice_channels(x, 0, half)?;
    let x_h = g.slice_channels(x, half, half)?;

    let q1 = layers::conv1x1(g, store, &format!("{prefix}.q1"), x_v, half)?;
    let k1 = layers::conv1x1(g, store, &format!("{prefix}.k1"), x_v, half)?;
    let q2 = layers::conv1x1(g, store, &format!("{prefix}.q2"), x_h, half)?;
    let k2 = layers::conv1x1(g, store, &format!("{prefix}.k2"), x_h, half)?;
    let v = layers::conv1x1(g, store, &format!("{prefix}.v"), x, half)?;
    let va = layers::depthwise3x3(g, store, &format!("{prefix}.va"), v)?;

    let scores_v = g.axial_scores(q1, k1, Axis::Vertical)?;
    let weights_v = layers::softmax_channels(g, scores_v)?;
    let out_v = g.axial_apply(weights_v, v, Axis::Vertical)?;

    let scores_h = g.axial_scores(q2, k2, Axis::Horizontal)?;
    let weights_h = layers::softmax_channels(g, scores_h)?;
    let out_h = g.axial_apply(weights_h, v, Axis::Horizontal)?;

    let branch_v = g.add(out_v, va)?;
    let branch_h = g.add(out_h, va)?;
    let cat = g.concat_channels(&[branch_v, branch_h])?;
    let output = g.add(x, cat)?;

    Ok(DualAxisOutput {
        output,
        weights_v,
        weights_h,
    })
}

pub struct AfwOutput {
    /// AF_3, AF_4, AF_5 at their level resolutions.
    pub af: [ValueId; 3],
    /// Aligned maps for levels 3, 4, 5 (pre-gating, C4 grid).
    pub aligned: [ValueId; 3],
    /// Gathered X' from dual-axis attention.
    pub gathered: ValueId,
    /// Sigmoid gates: global G plus the three per-level maps.
    pub gates: [ValueId; 4],
    pub weights_v: ValueId,
    pub weights_h: ValueId,
}

/// Full AFW path over backbone features C2..C5 (C4 grid is the alignment
/// target). With `use_c2` off, C2 is excluded from the gather.
pub fn afw<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    prefix: &str,
    c2: ValueId,
    c3: ValueId,
    c4: ValueId,
    c5: ValueId,
    cfg: &AfwConfig,
) -> Result<AfwOutput> {
    let target = {
        let s = g.shape(c4);
        (s.h, s.w)
    };
    let a2 = if cfg.use_c2 {
        Some(align(g, store, &format!("{prefix}.align2"), c2, cfg.neck, target)?)
    } else {
        None
    };
    let a3 = align(g, store, &format!("{prefix}.align3"), c3, cfg.neck, target)?;
    let a4 = align(g, store, &format!("{prefix}.align4"), c4, cfg.neck, target)?;
    let a5 = align(g, store, &format!("{prefix}.align5"), c5, cfg.neck, target)?;

    let mut sources = Vec::with_capacity(4);
    if let Some(a2) = a2 {
        sources.push(a2);
    }
    sources.extend([a3, a4, a5]);
    let x = g.concat_channels(&sources)?;
    let da = dual_axis_attention(g, store, &format!("{prefix}.afg"), x)?;

    let raw = layers::conv1x1(g, store, &format!("{prefix}.fw"), da.output, 4 * cfg.neck)?;
    let mut gates = Vec::with_capacity(4);
    for i in 0..4 {
        let part = g.slice_channels(raw, i * cfg.neck, cfg.neck)?;
        gates.push(g.sigmoid(part)?);
    }
    let global = gates[0];

    let mut af_c4 = Vec::with_capacity(3);
    for (idx, &a) in [a3, a4, a5].iter().enumerate() {
        let gated = g.mul(a, global)?;
        let weighted = g.mul(gated, gates[idx + 1])?;
        af_c4.push(weighted);
    }

    let af3 = layers::transpose_conv(g, store, &format!("{prefix}.up3"), af_c4[0], cfg.neck, 2, 2)?;
    let af4 = af_c4[1];
    let af5 = g.avg_pool2d(af_c4[2], 2)?;

    Ok(AfwOutput {
        af: [af3, af4, af5],
        aligned: [a3, a4, a5],
        gathered: da.output,
        gates: [gates[0], gates[1], gates[2], gates[3]],
        weights_v: da.weights_v,
        weights_h: da.weights_h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::tensor::{Shape4, Tensor4};

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

    fn backbone_set(g: &mut Graph<f64>, salt: u64) -> (ValueId, ValueId, ValueId, ValueId) {
        let c2 = g.variable(pseudo(Shape4::new(1, 4, 16, 16), salt)).unwrap();
        let c3 = g.variable(pseudo(Shape4::new(1, 6, 8, 8), salt + 1)).unwrap();
        let c4 = g.variable(pseudo(Shape4::new(1, 8, 4, 4), salt + 2)).unwrap();
        let c5 = g.variable(pseudo(Shape4::new(1, 12, 2, 2), salt + 3)).unwrap();
        (c2, c3, c4, c5)
    }

    #[test]
    fn alignment_hits_target_grid() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(1);
        let (c2, c3, c4, c5) = backbone_set(&mut g, 10);
        for (name, c) in [("a2", c2), ("a3", c3), ("a4", c4), ("a5", c5)] {
            let a = align(&mut g, &mut store, name, c, 6, (4, 4)).unwrap();
            assert_eq!(g.shape(a), Shape4::new(1, 6, 4, 4));
        }
    }

    #[test]
    fn align_rejects_non_power_of_two() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(1);
        let c = g.variable(pseudo(Shape4::new(1, 3, 12, 12), 5)).unwrap();
        assert!(align(&mut g, &mut store, "bad", c, 6, (4, 4)).is_err());
    }

    #[test]
    fn dual_axis_preserves_shape_and_normalizes() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(2);
        let x = g.variable(pseudo(Shape4::new(1, 8, 3, 5), 20)).unwrap();
        let out = dual_axis_attention(&mut g, &mut store, "da", x).unwrap();
        assert_eq!(g.shape(out.output), Shape4::new(1, 8, 3, 5));
        for (w, l) in [(out.weights_v, 3usize), (out.weights_h, 5usize)] {
            let t = g.value(w);
            let s = t.shape();
            assert_eq!(s.c, l);
            for y in 0..s.h {
                for xx in 0..s.w {
                    let sum: f64 = (0..s.c).map(|j| t.at(0, j, y, xx)).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn dual_axis_rejects_odd_channels() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(2);
        let x = g.variable(pseudo(Shape4::new(1, 7, 2, 2), 21)).unwrap();
        assert!(dual_axis_attention(&mut g, &mut store, "da", x).is_err());
    }

    #[test]
    fn single_token_stripes_pass_value_through() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(3);
        let x = g.variable(pseudo(Shape4::new(1, 4, 1, 1), 22)).unwrap();
        let out = dual_axis_attention(&mut g, &mut store, "da", x).unwrap();
        assert_eq!(g.value(out.weights_v).at(0, 0, 0, 0), 1.0);
        assert_eq!(g.value(out.weights_h).at(0, 0, 0, 0), 1.0);
    }

    #[test]
    fn residual_identity_with_zeroed_value_path() {
        let mut store: ParamStore<f64> = ParamStore::new(4);
        let input = pseudo(Shape4::new(1, 6, 4, 4), 23);
        {
            let mut g: Graph<f64> = Graph::new();
            let x = g.variable(input.clone()).unwrap();
            dual_axis_attention(&mut g, &mut store, "da", x).unwrap();
        }
        for name in ["da.v.w", "da.v.b", "da.va.w", "da.va.b"] {
            let shape = store.value(name).unwrap().shape();
            store.set_value(name, Tensor4::zeros(shape)).unwrap();
        }
        let mut g: Graph<f64> = Graph::new();
        let x = g.variable(input.clone()).unwrap();
        let out = dual_axis_attention(&mut g, &mut store, "da", x).unwrap();
        assert_eq!(g.value(out.output).data(), input.data());
    }

    #[test]
    fn afw_output_shapes_and_gate_range() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(5);
        let (c2, c3, c4, c5) = backbone_set(&mut g, 30);
        let cfg = AfwConfig::new(6);
        let out = afw(&mut g, &mut store, "afw", c2, c3, c4, c5, &cfg).unwrap();
        assert_eq!(g.shape(out.af[0]), Shape4::new(1, 6, 8, 8));
        assert_eq!(g.shape(out.af[1]), Shape4::new(1, 6, 4, 4));
        assert_eq!(g.shape(out.af[2]), Shape4::new(1, 6, 2, 2));
        assert_eq!(g.shape(out.gathered).c, 24);
        for &gate in &out.gates {
            for &v in g.value(gate).data() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn gating_bounds_af_by_aligned() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(6);
        let (c2, c3, c4, c5) = backbone_set(&mut g, 31);
        let cfg = AfwConfig::new(6);
        let out = afw(&mut g, &mut store, "afw", c2, c3, c4, c5, &cfg).unwrap();
        // pre-resize bound: |A_i * G * W_i| <= |A_i|; check level 4 where no
        // resize happens
        let a4 = g.value(out.aligned[1]);
        let af4 = g.value(out.af[1]);
        for (x, y) in a4.data().iter().zip(af4.data()) {
            assert!(y.abs() <= x.abs() + 1e-12);
        }
    }

    #[test]
    fn without_c2_narrows_gather() {
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(7);
        let (c2, c3, c4, c5) = backbone_set(&mut g, 32);
        let cfg = AfwConfig {
            neck: 6,
            use_c2: false,
        };
        let out = afw(&mut g, &mut store, "afw", c2, c3, c4, c5, &cfg).unwrap();
        assert_eq!(g.shape(out.gathered).c, 18);
        assert!(!store.contains("afw.align2.w"));
    }

    #[test]
    fn gradient_flows_back_to_c2() {
        use crate::gradcheck::{grad_check, GradCheckOptions};
        let cfg = AfwConfig::new(4);
        let mut store: ParamStore<f64> = ParamStore::new(8);
        let opts = GradCheckOptions {
            probes_per_param: 2,
            ..Default::default()
        };
        let report = grad_check(
            &mut store,
            |g, store| {
                let c2 = g.param(store, "in.c2", Shape4::new(1, 3, 8, 8), Init::HeUniform { fan_in: 16 })?;
                let c3 = g.param(store, "in.c3", Shape4::new(1, 4, 4, 4), Init::HeUniform { fan_in: 16 })?;
                let c4 = g.param(store, "in.c4", Shape4::new(1, 5, 2, 2), Init::HeUniform { fan_in: 16 })?;
                let c5 = g.param(store, "in.c5", Shape4::new(1, 6, 1, 1), Init::HeUniform { fan_in: 16 })?;
                let out = afw(g, store, "afw", c2, c3, c4, c5, &cfg)?;
                let mut loss = None;
                for (i, &af) in out.af.iter().enumerate() {
                    let w = pseudo(g.shape(af), 90 + i as u64);
                    let wc = g.constant(w)?;
                    let prod = g.mul(af, wc)?;
                    let s = g.sum_all(prod)?;
                    loss = Some(match loss {
                        None => s,
                        Some(acc) => g.add(acc, s)?,
                    });
                }
                Ok(loss.unwrap())
            },
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {:.3e}", report.max_rel_err());
        assert!(report.probes.iter().any(|p| p.name == "in.c2"));
    }
}
