//! Finite-difference coverage for every graph operation.
//!
//! Each case feeds parameters through the op under test into a fixed
//! random-weighted readout, so both weight and data gradient paths are
//! exercised. The readout weights are constants: a plain sum would let
//! normalization ops (softmax rows summing to one) hide wrong gradients.

use icaf_core::gradcheck::{grad_check, GradCheckOptions};
use icaf_core::graph::{Graph, ValueId};
use icaf_core::params::{Init, ParamStore};
use icaf_core::tensor::{Shape4, Tensor4};
use icaf_core::{Axis, Result};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pseudo_tensor(shape: Shape4, salt: u64) -> Tensor4<f64> {
    let mut data = Vec::with_capacity(shape.len());
    for i in 0..shape.len() {
        let r = splitmix64(salt.wrapping_mul(0x100_0000_01B3).wrapping_add(i as u64));
        data.push((r >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0);
    }
    Tensor4::new(shape, data).unwrap()
}

/// loss = sum(out * fixed random weights)
fn readout(g: &mut Graph<f64>, out: ValueId, salt: u64) -> Result<ValueId> {
    let w = pseudo_tensor(g.shape(out), salt);
    let wc = g.constant(w)?;
    let prod = g.mul(out, wc)?;
    g.sum_all(prod)
}

fn check<F>(build: F)
where
    F: FnMut(&mut Graph<f64>, &mut ParamStore<f64>) -> Result<ValueId>,
{
    let mut store: ParamStore<f64> = ParamStore::new(20260814);
    let opts = GradCheckOptions {
        probes_per_param: 6,
        ..Default::default()
    };
    let report = grad_check(&mut store, build, &opts).expect("grad check run");
    let worst = report.worst().cloned();
    assert!(
        report.passed(),
        "max rel err {:.3e} at {:?}",
        report.max_rel_err(),
        worst
    );
}

fn input(
    g: &mut Graph<f64>,
    store: &mut ParamStore<f64>,
    name: &str,
    shape: Shape4,
) -> Result<ValueId> {
    g.param(store, name, shape, Init::HeUniform { fan_in: shape.len() })
}

#[test]
fn elementwise_binary_ops() {
    let shape = Shape4::new(2, 3, 2, 2);
    check(move |g, s| {
        let a = input(g, s, "a", shape)?;
        let b = input(g, s, "b", shape)?;
        let sum = g.add(a, b)?;
        let diff = g.sub(sum, b)?;
        let prod = g.mul(diff, a)?;
        let denom = g.affine(0.25, 2.0, b)?;
        let quot = g.div(prod, denom)?;
        readout(g, quot, 11)
    });
}

#[test]
fn elementwise_min() {
    let shape = Shape4::new(1, 2, 3, 3);
    check(move |g, s| {
        let a = input(g, s, "a", shape)?;
        let b = input(g, s, "b", shape)?;
        let m = g.min(a, b)?;
        readout(g, m, 12)
    });
}

#[test]
fn unary_ops() {
    let shape = Shape4::new(1, 2, 2, 3);
    check(move |g, s| {
        let x = input(g, s, "x", shape)?;
        let r = g.relu(x)?;
        let ge = g.gelu(x)?;
        let sg = g.sigmoid(x)?;
        let ex = g.exp(x)?;
        let positive = g.affine(0.2, 2.0, x)?;
        let l = g.ln(positive)?;
        let ng = g.neg(x)?;
        let sp = g.softplus(x)?;
        let mut acc = readout(g, r, 21)?;
        for (v, salt) in [(ge, 22), (sg, 23), (ex, 24), (l, 25), (ng, 26), (sp, 27)] {
            let term = readout(g, v, salt)?;
            acc = g.add(acc, term)?;
        }
        Ok(acc)
    });
}

#[test]
fn broadcast_ops() {
    let shape = Shape4::new(2, 4, 3, 2);
    check(move |g, s| {
        let x = input(g, s, "x", shape)?;
        let w = input(g, s, "w", Shape4::new(2, 1, 3, 2))?;
        let b = input(g, s, "b", Shape4::new(1, 4, 1, 1))?;
        let bx = g.add_bias(x, b)?;
        let wx = g.mul_broadcast_channel(bx, w)?;
        readout(g, wx, 31)
    });
}

#[test]
fn conv2d_plain() {
    check(move |g, s| {
        let x = input(g, s, "x", Shape4::new(1, 3, 5, 5))?;
        let w = input(g, s, "w", Shape4::new(4, 3, 3, 3))?;
        let b = input(g, s, "b", Shape4::new(1, 4, 1, 1))?;
        let y = g.conv2d(x, w, b, 1, 1, 1)?;
        readout(g, y, 41)
    });
}

#[test]
fn conv2d_strided_dilated() {
    check(move |g, s| {
        let x = input(g, s, "x", Shape4::new(2, 2, 7, 7))?;
        let w = input(g, s, "w", Shape4::new(3, 2, 3, 3))?;
        let b = input(g, s, "b", Shape4::new(1, 3, 1, 1))?;
        let y = g.conv2d(x, w, b, 2, 2, 2)?;
        readout(g, y, 42)
    });
}

#[test]
fn depthwise_conv() {
    check(move |g, s| {
        let x = input(g, s, "x", Shape4::new(1, 3, 4, 4))?;
        let w = input(g, s, "w", Shape4::new(3, 1, 3, 3))?;
        let b = input(g, s, "b", Shape4::new(1, 3, 1, 1))?;
        let y = g.depthwise_conv2d(x, w, b)?;
        readout(g, y, 43)
    });
}

#[test]
fn transpose_conv() {
    check(move |g, s| {
        let x = input(g, s, "x", Shape4::new(1, 3, 3, 3))?;
        let w = input(g, s, "w", Shape4::new(3, 2, 2, 2))?;
        let y = g.transpose_conv2d(x, w, 2)?;
        readout(g, y, 44)
    });
}

#[test]
fn pooling_and_resampling() {
    check(move |g, s| {
        let x = input(g, s, "x", Shape4::new(1, 2, 4, 4))?;
        let p = g.avg_pool2d(x, 2)?;
        let u = g.upsample_nearest2x(p)?;
        let sh = g.shift2d(u, -1, 2)?;
        readout(g, sh, 45)
    });
}

#[test]
fn concat_and_slice() {
    check(move |g, s| {
        let a = input(g, s, "a", Shape4::new(1, 2, 2, 2))?;
        let b = input(g, s, "b", Shape4::new(1, 3, 2, 2))?;
        let cat = g.concat_channels(&[a, b])?;
        let mid = g.slice_channels(cat, 1, 3)?;
        readout(g, mid, 46)
    });
}

#[test]
fn reductions() {
    check(move |g, s| {
        let x = input(g, s, "x", Shape4::new(2, 3, 2, 2))?;
        let sc = g.sum_channels(x)?;
        let r = readout(g, sc, 47)?;
        let total = g.sum_all(x)?;
        g.add(r, total)
    });
}

#[test]
fn masked_softmax() {
    let shape = Shape4::new(1, 5, 2, 2);
    let mask = Tensor4::from_fn(shape, |_, c, y, x| {
        if (c + y + x) % 3 == 0 {
            0.0
        } else {
            1.0
        }
    });
    check(move |g, s| {
        let x = input(g, s, "x", shape)?;
        let sm = g.masked_softmax_channels(x, &mask)?;
        readout(g, sm, 48)
    });
}

#[test]
fn softmax_lastdim() {
    check(move |g, s| {
        let x = input(g, s, "x", Shape4::new(1, 2, 2, 4))?;
        let sm = g.softmax_lastdim(x)?;
        readout(g, sm, 49)
    });
}

#[test]
fn axial_attention_vertical() {
    check(move |g, s| {
        let q = input(g, s, "q", Shape4::new(1, 3, 4, 2))?;
        let k = input(g, s, "k", Shape4::new(1, 3, 4, 2))?;
        let v = input(g, s, "v", Shape4::new(1, 5, 4, 2))?;
        let scores = g.axial_scores(q, k, Axis::Vertical)?;
        let weights = g.masked_softmax_channels(scores, &Tensor4::filled(g.shape(scores), 1.0))?;
        let out = g.axial_apply(weights, v, Axis::Vertical)?;
        readout(g, out, 50)
    });
}

#[test]
fn axial_attention_horizontal() {
    check(move |g, s| {
        let q = input(g, s, "q", Shape4::new(1, 3, 2, 4))?;
        let k = input(g, s, "k", Shape4::new(1, 3, 2, 4))?;
        let v = input(g, s, "v", Shape4::new(1, 5, 2, 4))?;
        let scores = g.axial_scores(q, k, Axis::Horizontal)?;
        let weights = g.masked_softmax_channels(scores, &Tensor4::filled(g.shape(scores), 1.0))?;
        let out = g.axial_apply(weights, v, Axis::Horizontal)?;
        readout(g, out, 51)
    });
}

#[test]
fn layered_composite() {
    check(move |g, s| {
        let x = input(g, s, "x", Shape4::new(1, 2, 6, 6))?;
        let w1 = input(g, s, "w1", Shape4::new(4, 2, 3, 3))?;
        let b1 = input(g, s, "b1", Shape4::new(1, 4, 1, 1))?;
        let c1 = g.conv2d(x, w1, b1, 1, 1, 1)?;
        let a1 = g.gelu(c1)?;
        let p = g.avg_pool2d(a1, 2)?;
        let sh = g.shift2d(p, 0, 1)?;
        let cat = g.concat_channels(&[p, sh])?;
        let sm = g.masked_softmax_channels(cat, &Tensor4::filled(g.shape(cat), 1.0))?;
        let gate = g.sum_channels(p)?;
        let gated = g.mul_broadcast_channel(sm, gate)?;
        readout(g, gated, 60)
    });
}
