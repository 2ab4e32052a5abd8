//! Detector building blocks.
//!
//! Each block comes in two halves: a serializable `*Config` describing its
//! channel layout, and a weight-carrying struct with a direct `forward`.
//! Configs also describe their dataflow through [`Tracer`], which lets the
//! graph layer validate channels, count costs and trace channel coupling
//! from the same description.

mod baseline;
mod faster;
mod ghost;
mod head;

pub use baseline::{C2fBlock, C2fConfig, ConvBnAct, ConvConfig, SppfBlock, SppfConfig};
pub use faster::{C2fFasterBlock, C2fFasterConfig, FasterBlock, FasterConfig};
pub use ghost::{GhostConvBlock, GhostConvConfig, GhostHgBlock, GhostHgConfig, HgStemBlock, HgStemConfig};
pub use head::{GcDetectConfig, GcDetectHead, HeadOutput, PlainDetectConfig, PlainDetectHead};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvParams, Tensor4};

/// Declarative description of one convolution inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub act: bool,
    /// Output channel `i` is the transform of input channel `i` (partial conv).
    pub pinned: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k,
            stride: 1,
            pad: k / 2,
            groups: 1,
            act: true,
            pinned: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn depthwise(c: usize, k: usize) -> Self {
        Self::new(c, c, k).groups(c)
    }

    pub fn linear(mut self) -> Self {
        self.act = false;
        self
    }

    pub fn pinned(mut self) -> Self {
        self.pinned = true;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.c_in && self.groups == self.c_out
    }

    /// Output channels map one-to-one onto input channels.
    pub fn channel_tied(&self) -> bool {
        self.pinned || self.is_depthwise()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups.max(1), self.k, self.k]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Weight plus bias elements.
    pub fn params(&self) -> usize {
        self.weight_len() + self.c_out
    }

    pub fn fan_in(&self) -> usize {
        self.k * self.k * (self.c_in / self.groups.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.k == 0 || self.stride == 0 {
            return Err(Error::Config(format!("conv dims must be positive: {self:?}")));
        }
        if self.groups == 0 || self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide c_in {} and c_out {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        if self.pinned && self.c_in != self.c_out {
            return Err(Error::Config("pinned conv needs c_in == c_out".into()));
        }
        Ok(())
    }

    pub fn output_shape(&self, shape: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = shape;
        if c != self.c_in {
            return Err(Error::Dim {
                op: "conv2d",
                dim: "input channels",
                expected: self.c_in,
                actual: c,
            });
        }
        let fit = |len| tensor::window_out(len, self.k, self.stride, self.pad);
        match (fit(h), fit(w)) {
            (Some(ho), Some(wo)) => Ok([n, self.c_out, ho, wo]),
            _ => Err(Error::Shape(format!(
                "kernel {} does not fit padded input {}x{}",
                self.k,
                h + 2 * self.pad,
                w + 2 * self.pad
            ))),
        }
    }

    /// Checks that `p` has exactly the geometry this spec declares.
    pub fn check(&self, p: &ConvParams) -> Result<()> {
        let ok = p.weight_shape() == self.weight_shape()
            && p.groups() == self.groups
            && p.stride() == (self.stride, self.stride)
            && p.padding() == (self.pad, self.pad)
            && p.bias().is_some();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "conv params {:?} (groups {}) do not match spec {:?}",
                p.weight_shape(),
                p.groups(),
                self
            )))
        }
    }

    /// Builds parameters from a flat weight buffer and bias.
    pub fn params_from(&self, weight: Vec<f32>, bias: Vec<f32>) -> Result<ConvParams> {
        ConvParams::new(
            weight,
            self.weight_shape(),
            Some(bias),
            (self.stride, self.stride),
            (self.pad, self.pad),
            self.groups,
        )
    }

    pub fn zeros(&self) -> ConvParams {
        self.params_from(vec![0.0; self.weight_len()], vec![0.0; self.c_out])
            .expect("validated spec")
    }
}

/// Supplies parameters for a named convolution of a block under construction.
pub type ParamSource<'a> = dyn FnMut(&str, &ConvSpec) -> Result<ConvParams> + 'a;

pub(crate) fn fetch(src: &mut ParamSource<'_>, name: &str, spec: &ConvSpec) -> Result<ConvParams> {
    let p = src(name, spec)?;
    spec.check(&p).map_err(|e| Error::Config(format!("`{name}`: {e}")))?;
    Ok(p)
}

/// Interpretation of a block's dataflow. Implementations carry a value per
/// tensor (a channel count, a shape, channel identities, or real data).
pub trait Tracer {
    type V: Clone;

    fn conv(&mut self, name: &str, spec: &ConvSpec, x: &Self::V) -> Result<Self::V>;
    fn maxpool(&mut self, x: &Self::V, k: usize, stride: usize, pad: usize) -> Result<Self::V>;
    fn upsample(&mut self, x: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn split(&mut self, x: &Self::V, sizes: &[usize]) -> Result<Vec<Self::V>>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    /// Spatial dims of `x` must be multiples of `factor`.
    fn require_divisible(&mut self, _x: &Self::V, _factor: usize) -> Result<()> {
        Ok(())
    }
}

/// Conv followed by SiLU when the spec asks for it.
pub(crate) fn conv_act(x: &Tensor4, p: &ConvParams, act: bool) -> Result<Tensor4> {
    let y = tensor::conv2d(x, p)?;
    Ok(if act { tensor::silu(&y) } else { y })
}

/// Tracer that only tracks channel counts; used for structural validation.
pub struct ChannelTracer {
    pub convs: Vec<(String, ConvSpec)>,
}

impl ChannelTracer {
    pub fn new() -> Self {
        ChannelTracer { convs: Vec::new() }
    }
}

impl Default for ChannelTracer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tracer for ChannelTracer {
    type V = usize;

    fn conv(&mut self, name: &str, spec: &ConvSpec, x: &usize) -> Result<usize> {
        spec.validate()?;
        if *x != spec.c_in {
            return Err(Error::Dim {
                op: "conv2d",
                dim: "input channels",
                expected: spec.c_in,
                actual: *x,
            });
        }
        self.convs.push((name.to_string(), *spec));
        Ok(spec.c_out)
    }

    fn maxpool(&mut self, x: &usize, _: usize, _: usize, _: usize) -> Result<usize> {
        Ok(*x)
    }

    fn upsample(&mut self, x: &usize) -> Result<usize> {
        Ok(*x)
    }

    fn concat(&mut self, parts: &[usize]) -> Result<usize> {
        Ok(parts.iter().sum())
    }

    fn split(&mut self, x: &usize, sizes: &[usize]) -> Result<Vec<usize>> {
        if sizes.iter().sum::<usize>() != *x || sizes.contains(&0) {
            return Err(Error::Dim {
                op: "split_channels",
                dim: "sum of sizes",
                expected: *x,
                actual: sizes.iter().sum(),
            });
        }
        Ok(sizes.to_vec())
    }

    fn add(&mut self, a: &usize, b: &usize) -> Result<usize> {
        if a != b {
            return Err(Error::Dim {
                op: "add",
                dim: "channels",
                expected: *a,
                actual: *b,
            });
        }
        Ok(*a)
    }
}

/// Tracer over concrete tensors that looks parameters up by name. It is an
/// independent executor for the dataflow descriptions, used to cross-check
/// the hand-written block forwards.
pub struct TensorTracer<'s, 'a> {
    pub params: &'s mut ParamSource<'a>,
}

impl Tracer for TensorTracer<'_, '_> {
    type V = Tensor4;

    fn conv(&mut self, name: &str, spec: &ConvSpec, x: &Tensor4) -> Result<Tensor4> {
        let p = fetch(self.params, name, spec)?;
        conv_act(x, &p, spec.act)
    }

    fn maxpool(&mut self, x: &Tensor4, k: usize, stride: usize, pad: usize) -> Result<Tensor4> {
        tensor::maxpool2d(x, k, stride, pad)
    }

    fn upsample(&mut self, x: &Tensor4) -> Result<Tensor4> {
        Ok(tensor::upsample_nearest2x(x))
    }

    fn concat(&mut self, parts: &[Tensor4]) -> Result<Tensor4> {
        tensor::concat_channels(&parts.iter().collect::<Vec<_>>())
    }

    fn split(&mut self, x: &Tensor4, sizes: &[usize]) -> Result<Vec<Tensor4>> {
        tensor::split_channels(x, sizes)
    }

    fn add(&mut self, a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        tensor::add(a, b)
    }

    fn require_divisible(&mut self, x: &Tensor4, factor: usize) -> Result<()> {
        check_divisible(x.h(), x.w(), factor)
    }
}

pub(crate) fn check_divisible(h: usize, w: usize, factor: usize) -> Result<()> {
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "spatial dims {h}x{w} must be divisible by {factor}"
        )));
    }
    Ok(())
}

pub(crate) fn expect_channels(op: &'static str, expected: usize, x: &Tensor4) -> Result<()> {
    if x.c() != expected {
        return Err(Error::Dim {
            op,
            dim: "input channels",
            expected,
            actual: x.c(),
        });
    }
    Ok(())
}
