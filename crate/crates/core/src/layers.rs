//! Parameterized layer builders with canonical checkpoint names.
//!
//! Every layer registers its weights as `<name>.w` / `<name>.b` so a
//! checkpoint written by one model build reloads into any other build that
//! uses the same names.

use crate::error::Result;
use crate::graph::{Graph, ValueId};
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Shape4, Tensor4};

pub fn conv<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    x: ValueId,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<ValueId> {
    let in_c = g.shape(x).c;
    let w = g.param(
        store,
        &format!("{name}.w"),
        Shape4::new(out_c, in_c, kernel, kernel),
        Init::HeUniform {
            fan_in: in_c * kernel * kernel,
        },
    )?;
    let b = g.param(
        store,
        &format!("{name}.b"),
        Shape4::new(1, out_c, 1, 1),
        Init::Zeros,
    )?;
    g.conv2d(x, w, b, stride, pad, dilation)
}

pub fn conv1x1<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    x: ValueId,
    out_c: usize,
) -> Result<ValueId> {
    conv(g, store, name, x, out_c, 1, 1, 0, 1)
}

pub fn conv3x3<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    x: ValueId,
    out_c: usize,
    stride: usize,
) -> Result<ValueId> {
    conv(g, store, name, x, out_c, 3, stride, 1, 1)
}

pub fn depthwise3x3<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    x: ValueId,
) -> Result<ValueId> {
    let c = g.shape(x).c;
    let w = g.param(
        store,
        &format!("{name}.w"),
        Shape4::new(c, 1, 3, 3),
        Init::HeUniform { fan_in: 9 },
    )?;
    let b = g.param(
        store,
        &format!("{name}.b"),
        Shape4::new(1, c, 1, 1),
        Init::Zeros,
    )?;
    g.depthwise_conv2d(x, w, b)
}

pub fn transpose_conv<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    x: ValueId,
    out_c: usize,
    kernel: usize,
    stride: usize,
) -> Result<ValueId> {
    let in_c = g.shape(x).c;
    let w = g.param(
        store,
        &format!("{name}.w"),
        Shape4::new(in_c, out_c, kernel, kernel),
        Init::HeUniform {
            fan_in: in_c * kernel * kernel,
        },
    )?;
    g.transpose_conv2d(x, w, stride)
}

/// Plain softmax over the channel dimension.
pub fn softmax_channels<T: Scalar>(g: &mut Graph<T>, x: ValueId) -> Result<ValueId> {
    let ones: Tensor4<f64> = Tensor4::filled(g.shape(x), 1.0);
    g.masked_softmax_channels(x, &ones)
}

/// Learnable scalar, stored as a (1,1,1,1) parameter.
pub fn scalar_param<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    init: f64,
) -> Result<ValueId> {
    g.param(store, name, Shape4::new(1, 1, 1, 1), Init::Constant(init))
}
