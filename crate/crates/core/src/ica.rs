//! Intra-layer Context Augmentation.
//!
//! Each pyramid level is enriched with multi-head dilated attention: every
//! head attends over a k×k neighborhood sampled at its own dilation rate, so
//! with k = 3 and rates 1..3 the combined receptive field spans 7×7 around a
//! query. Out-of-bounds neighbors are masked out of the softmax rather than
//! padded, keeping border weights a proper distribution over real pixels.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, ValueId};
use crate::layers;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcaConfig {
    pub heads: usize,
    pub rates: Vec<usize>,
    pub kernel: usize,
    pub channels: usize,
}

impl IcaConfig {
    pub fn with_channels(channels: usize) -> Self {
        IcaConfig {
            heads: 3,
            rates: vec![1, 2, 3],
            kernel: 3,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.rates.len() != self.heads {
            return Err(CoreError::Config(format!(
                "need one dilation rate per head: {} heads, {} rates",
                self.heads,
                self.rates.len()
            )));
        }
        if self.channels == 0 || self.channels % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            )));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(CoreError::Config(format!(
                "attention kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.rates.iter().any(|&r| r == 0) {
            return Err(CoreError::Config("dilation rates must be positive".into()));
        }
        Ok(())
    }

    /// Dependency span per axis for the largest dilation: (k-1)·R + 1.
    pub fn receptive_field(&self) -> usize {
        let max_rate = self.rates.iter().copied().max().unwrap_or(1);
        (self.kernel - 1) * max_rate + 1
    }
}

/// Neighborhood offsets for one head: the k×k grid scaled by its rate.
fn offsets(kernel: usize, rate: usize) -> Vec<(isize, isize)> {
    let half = (kernel / 2) as isize;
    let mut out = Vec::with_capacity(kernel * kernel);
    for ky in -half..=half {
        for kx in -half..=half {
            out.push((ky * rate as isize, kx * rate as isize));
        }
    }
    out
}

/// Validity mask over the stacked window logits: 1 where the dilated
/// neighbor lands inside the image.
fn window_mask(n: usize, h: usize, w: usize, kernel: usize, rate: usize) -> Tensor4<f64> {
    let offs = offsets(kernel, rate);
    Tensor4::from_fn(Shape4::new(n, offs.len(), h, w), |_, o, y, x| {
        let (dy, dx) = offs[o];
        let yy = y as isize + dy;
        let xx = x as isize + dx;
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            1.0
        } else {
            0.0
        }
    })
}

pub struct MhdaOutput {
    /// Concatenated head outputs, same shape as the input.
    pub output: ValueId,
    /// Per-head attention weights, each (n, k·k, h, w); masked entries are 0
    /// and each valid column sums to 1.
    pub attention: Vec<ValueId>,
}

/// Multi-head dilated attention. The caller applies the post-concat linear.
pub fn mhda<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    prefix: &str,
    x: ValueId,
    cfg: &IcaConfig,
) -> Result<MhdaOutput> {
    cfg.validate()?;
    let shape = g.shape(x);
    if shape.c != cfg.channels {
        return Err(CoreError::Dimension(format!(
            "mhda configured for {} channels, input has {}",
            cfg.channels, shape.c
        )));
    }
    let head_c = cfg.channels / cfg.heads;
    let scale = 1.0 / (head_c as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for (h, &rate) in cfg.rates.iter().enumerate() {
        let xs = g.slice_channels(x, h * head_c, head_c)?;
        let q = layers::conv1x1(g, store, &format!("{prefix}.head{h}.q"), xs, head_c)?;
        let k = layers::conv1x1(g, store, &format!("{prefix}.head{h}.k"), xs, head_c)?;
        let v = layers::conv1x1(g, store, &format!("{prefix}.head{h}.v"), xs, head_c)?;

        let offs = offsets(cfg.kernel, rate);
        let mut logits = Vec::with_capacity(offs.len());
        for &(dy, dx) in &offs {
            let ks = g.shift2d(k, dy, dx)?;
            let prod = g.mul(q, ks)?;
            logits.push(g.sum_channels(prod)?);
        }
        let stack = g.concat_channels(&logits)?;
        let scaled = g.affine(scale, 0.0, stack)?;
        let mask = window_mask(shape.n, shape.h, shape.w, cfg.kernel, rate);
        let weights = g.masked_softmax_channels(scaled, &mask)?;

        let mut head_out: Option<ValueId> = None;
        for (o, &(dy, dx)) in offs.iter().enumerate() {
            let vs = g.shift2d(v, dy, dx)?;
            let w_o = g.slice_channels(weights, o, 1)?;
            let term = g.mul_broadcast_channel(vs, w_o)?;
            head_out = Some(match head_out {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        head_outputs.push(head_out.expect("kernel has at least one offset"));
        attention.push(weights);
    }

    let output = g.concat_channels(&head_outputs)?;
    Ok(MhdaOutput { output, attention })
}

pub struct IcaOutput {
    /// IF_i, the augmented feature at neck width.
    pub output: ValueId,
    /// C_i', the 3×3-projected input the residual branches hang off.
    pub projected: ValueId,
    /// Raw MHDA concat output, before the post-concat linear.
    pub mhda_output: ValueId,
    pub attention: Vec<ValueId>,
}

/// Full ICA block: project to neck width, augment with MHDA plus a pointwise
/// MLP, both as residual branches.
///
/// Zeroing `<prefix>.out.{w,b}` and `<prefix>.mlp.fc2.{w,b}` makes the block
/// return C_i' bit-exactly.
pub fn ica_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    prefix: &str,
    c_i: ValueId,
    cfg: &IcaConfig,
) -> Result<IcaOutput> {
    cfg.validate()?;
    let projected = layers::conv3x3(g, store, &format!("{prefix}.proj"), c_i, cfg.channels, 1)?;
    let mh = mhda(g, store, &format!("{prefix}.mhda"), projected, cfg)?;
    let lin = layers::conv1x1(g, store, &format!("{prefix}.out"), mh.output, cfg.channels)?;
    let x = g.add(projected, lin)?;

    let hidden = layers::conv1x1(g, store, &format!("{prefix}.mlp.fc1"), x, cfg.channels * 2)?;
    let act = g.gelu(hidden)?;
    let mlp = layers::conv1x1(g, store, &format!("{prefix}.mlp.fc2"), act, cfg.channels)?;
    let output = g.add(x, mlp)?;

    Ok(IcaOutput {
        output,
        projected,
        mhda_output: mh.output,
        attention: mh.attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

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

    #[test]
    fn config_validation() {
        assert!(IcaConfig::with_channels(48).validate().is_ok());
        assert!(IcaConfig::with_channels(64).validate().is_err());
        let mut even_kernel = IcaConfig::with_channels(48);
        even_kernel.kernel = 4;
        assert!(even_kernel.validate().is_err());
        let mut rate_mismatch = IcaConfig::with_channels(48);
        rate_mismatch.rates = vec![1, 2];
        assert!(rate_mismatch.validate().is_err());
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(IcaConfig::with_channels(6).receptive_field(), 7);
    }

    #[test]
    fn shape_preserved_small_case() {
        let cfg = IcaConfig::with_channels(6);
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(5);
        let x = g.variable(pseudo(Shape4::new(1, 6, 8, 8), 1)).unwrap();
        let out = mhda(&mut g, &mut store, "m", x, &cfg).unwrap();
        assert_eq!(g.shape(out.output), Shape4::new(1, 6, 8, 8));
        assert_eq!(out.attention.len(), 3);
        assert_eq!(g.shape(out.attention[0]), Shape4::new(1, 9, 8, 8));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = IcaConfig::with_channels(6);
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(6);
        let x = g.variable(pseudo(Shape4::new(1, 6, 7, 5), 2)).unwrap();
        let out = mhda(&mut g, &mut store, "m", x, &cfg).unwrap();
        for &a in &out.attention {
            let t = g.value(a);
            let s = t.shape();
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut sum = 0.0;
                    for o in 0..s.c {
                        let w = t.at(0, o, y, xx);
                        assert!(w >= 0.0);
                        sum += w;
                    }
                    assert!((sum - 1.0).abs() < 1e-6, "sum {sum} at ({y},{xx})");
                }
            }
        }
    }

    #[test]
    fn constant_field_stays_constant() {
        let cfg = IcaConfig::with_channels(6);
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(7);
        let x = g
            .variable(Tensor4::from_fn(Shape4::new(1, 6, 6, 6), |_, c, _, _| {
                0.3 + 0.1 * c as f64
            }))
            .unwrap();
        let out = mhda(&mut g, &mut store, "m", x, &cfg).unwrap();
        let t = g.value(out.output);
        let s = t.shape();
        for c in 0..s.c {
            let base = t.at(0, c, 3, 3);
            for y in 0..s.h {
                for xx in 0..s.w {
                    assert!(
                        (t.at(0, c, y, xx) - base).abs() < 1e-6,
                        "channel {c} varies spatially"
                    );
                }
            }
        }
    }

    #[test]
    fn residual_identity_when_projections_zeroed() {
        let cfg = IcaConfig::with_channels(6);
        let mut g: Graph<f64> = Graph::new();
        let mut store = ParamStore::new(8);
        let x = g.variable(pseudo(Shape4::new(1, 4, 6, 6), 3)).unwrap();
        let out = ica_block(&mut g, &mut store, "ica", x, &cfg).unwrap();
        for name in ["ica.out.w", "ica.out.b", "ica.mlp.fc2.w", "ica.mlp.fc2.b"] {
            let shape = store.value(name).unwrap().shape();
            store.set_value(name, Tensor4::zeros(shape)).unwrap();
        }
        let mut g2: Graph<f64> = Graph::new();
        let x2 = g2.variable(pseudo(Shape4::new(1, 4, 6, 6), 3)).unwrap();
        let out2 = ica_block(&mut g2, &mut store, "ica", x2, &cfg).unwrap();
        let projected = g2.value(out2.projected).clone();
        let result = g2.value(out2.output).clone();
        assert_eq!(projected.data(), result.data());
        drop(out);
    }

    #[test]
    fn mhda_locality_beyond_window() {
        let cfg = IcaConfig::with_channels(6);
        let shape = Shape4::new(1, 6, 16, 16);
        let base = pseudo(shape, 4);
        let mut store = ParamStore::new(9);
        let probe = (4usize, 4usize);
        let far = (13usize, 13usize); // Chebyshev distance 9 > receptive radius

        let run = |input: Tensor4<f64>, store: &mut ParamStore<f64>| -> Vec<f64> {
            let mut g: Graph<f64> = Graph::new();
            let x = g.variable(input).unwrap();
            let out = mhda(&mut g, store, "m", x, &cfg).unwrap();
            let t = g.value(out.output);
            (0..6).map(|c| t.at(0, c, probe.0, probe.1)).collect()
        };

        let clean = run(base.clone(), &mut store);
        let mut poked = base;
        for c in 0..6 {
            poked.set(0, c, far.0, far.1, 17.5);
        }
        let dirty = run(poked, &mut store);
        for (a, b) in clean.iter().zip(&dirty) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn grad_check_ica_block() {
        use crate::gradcheck::{grad_check, GradCheckOptions};
        let cfg = IcaConfig::with_channels(6);
        let mut store: ParamStore<f64> = ParamStore::new(10);
        let opts = GradCheckOptions {
            probes_per_param: 3,
            ..Default::default()
        };
        let report = grad_check(
            &mut store,
            |g, store| {
                let x = g.param(
                    store,
                    "input",
                    Shape4::new(1, 4, 5, 5),
                    Init::HeUniform { fan_in: 25 },
                )?;
                let out = ica_block(g, store, "ica", x, &cfg)?;
                let w = pseudo(g.shape(out.output), 99).cast();
                let wc = g.constant(w)?;
                let prod = g.mul(out.output, wc)?;
                g.sum_all(prod)
            },
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {:.3e}", report.max_rel_err());
    }
}
