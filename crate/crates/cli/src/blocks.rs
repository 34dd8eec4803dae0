//! Gradient-check builders for each differentiable block. All builders run
//! in 64-bit and end in a fixed random-weighted readout so every output
//! coordinate influences the scalar loss.

use icaf_core::afw::{afw, dual_axis_attention, AfwConfig};
use icaf_core::detector::{heads, DetectorConfig};
use icaf_core::fpn::{aff, lateral, NeckConfig, Pyramid, PyramidLevel, Variant};
use icaf_core::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use icaf_core::ica::{ica_block, IcaConfig};
use icaf_core::{Graph, Init, ParamStore, Result, Shape4, Tensor4, ValueId};

pub const BLOCK_NAMES: [&str; 6] = ["ica", "dual-axis", "split-fw", "aff", "lateral", "head"];

fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(x: u64) -> f64 {
    (mix(x) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Deterministic pseudo-random tensor in [-1, 1).
fn pseudo(shape: Shape4, salt: u64) -> Tensor4<f64> {
    let mut i = 0u64;
    Tensor4::from_fn(shape, |_, _, _, _| {
        i += 1;
        2.0 * unit(salt.wrapping_add(i)) - 1.0
    })
}

/// Scalar loss: sum of the value times a fixed random field.
fn readout(g: &mut Graph<f64>, x: ValueId, salt: u64) -> Result<ValueId> {
    let w = g.constant(pseudo(g.shape(x), salt))?;
    let prod = g.mul(x, w)?;
    g.sum_all(prod)
}

/// Input that participates in the check: a parameter tensor, so gradients
/// through the block input are verified too.
fn input(
    g: &mut Graph<f64>,
    store: &mut ParamStore<f64>,
    name: &str,
    shape: Shape4,
) -> Result<ValueId> {
    g.param(store, name, shape, Init::HeUniform { fan_in: 7 })
}

pub fn run_block(name: &str, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new(17);
    match name {
        "ica" => grad_check(
            &mut store,
            |g, s| {
                let cfg = IcaConfig::with_channels(6);
                let x = input(g, s, "in.x", Shape4::new(1, 4, 5, 5))?;
                let out = ica_block(g, s, "ica3", x, &cfg)?;
                readout(g, out.output, 101)
            },
            opts,
        ),
        "dual-axis" => grad_check(
            &mut store,
            |g, s| {
                let x = input(g, s, "in.x", Shape4::new(1, 6, 4, 4))?;
                let out = dual_axis_attention(g, s, "da", x)?;
                readout(g, out.output, 202)
            },
            opts,
        ),
        "split-fw" => grad_check(
            &mut store,
            |g, s| {
                let c2 = input(g, s, "in.c2", Shape4::new(1, 3, 8, 8))?;
                let c3 = input(g, s, "in.c3", Shape4::new(1, 4, 4, 4))?;
                let c4 = input(g, s, "in.c4", Shape4::new(1, 5, 2, 2))?;
                let c5 = input(g, s, "in.c5", Shape4::new(1, 6, 1, 1))?;
                let out = afw(g, s, "afw", c2, c3, c4, c5, &AfwConfig::new(4))?;
                let r3 = readout(g, out.af[0], 303)?;
                let r4 = readout(g, out.af[1], 304)?;
                let r5 = readout(g, out.af[2], 305)?;
                let t = g.add(r3, r4)?;
                g.add(t, r5)
            },
            opts,
        ),
        "aff" => grad_check(
            &mut store,
            |g, s| {
                let shape = Shape4::new(1, 4, 3, 3);
                let a = input(g, s, "in.if", shape)?;
                let b = input(g, s, "in.af", shape)?;
                let c = input(g, s, "in.l", shape)?;
                let out = aff(g, s, "aff4", a, b, c)?;
                readout(g, out.fused, 404)
            },
            opts,
        ),
        "lateral" => grad_check(
            &mut store,
            |g, s| {
                let x = input(g, s, "in.x", Shape4::new(1, 5, 4, 4))?;
                let l = lateral(g, s, "lat4", x, 6)?;
                readout(g, l, 505)
            },
            opts,
        ),
        "head" => grad_check(
            &mut store,
            |g, s| {
                let cfg = DetectorConfig::new(NeckConfig::new(6, Variant::Full), 32);
                let p3 = input(g, s, "in.p3", Shape4::new(1, 6, 4, 4))?;
                let p4 = input(g, s, "in.p4", Shape4::new(1, 6, 2, 2))?;
                let p5 = input(g, s, "in.p5", Shape4::new(1, 6, 1, 1))?;
                let neck = icaf_core::fpn::NeckOutput {
                    pyramid: Pyramid::new(
                        vec![
                            PyramidLevel { level: 3, stride: 8, feature: p3 },
                            PyramidLevel { level: 4, stride: 16, feature: p4 },
                            PyramidLevel { level: 5, stride: 32, feature: p5 },
                        ],
                        (32, 32),
                    ),
                    alphas: Vec::new(),
                    afw: None,
                };
                let levels = heads(g, s, "head", &neck, &cfg)?;
                let mut total = None;
                for (i, lvl) in levels.iter().enumerate() {
                    let salt = 600 + 10 * i as u64;
                    let rc = readout(g, lvl.cls, salt)?;
                    let rd = readout(g, lvl.dist, salt + 1)?;
                    let rr = readout(g, lvl.ctr, salt + 2)?;
                    let t = g.add(rc, rd)?;
                    let t = g.add(t, rr)?;
                    total = Some(match total {
                        Some(acc) => g.add(acc, t)?,
                        None => t,
                    });
                }
                Ok(total.expect("three levels"))
            },
            opts,
        ),
        other => Err(icaf_core::CoreError::InvalidArgument(format!(
            "unknown gradcheck block `{other}`"
        ))),
    }
}
