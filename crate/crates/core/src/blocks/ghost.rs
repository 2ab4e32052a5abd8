//! Ghost convolution, the recursive ghost HG block and the HG stem.

use serde::{Deserialize, Serialize};

use super::{check_divisible, conv_act, expect_channels, fetch, ConvSpec, ParamSource, Tracer};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvParams, Tensor4};

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn yes() -> bool {
    true
}

/// Kernel of the cheap depthwise transform that produces the ghost maps.
pub const GHOST_CHEAP_KERNEL: usize = 5;

/// Half the outputs come from a dense `k x k` conv, the other half from a
/// depthwise 5x5 transform of that first half.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhostConvConfig {
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub act: bool,
}

impl GhostConvConfig {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        GhostConvConfig {
            c_in,
            c_out,
            k,
            stride: 1,
            act: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_out < 2 || self.c_out % 2 != 0 {
            return Err(Error::Config(format!(
                "ghost conv c_out must be even and >= 2, got {}",
                self.c_out
            )));
        }
        Ok(())
    }

    pub fn primary_spec(&self) -> ConvSpec {
        let s = ConvSpec::new(self.c_in, self.c_out / 2, self.k).stride(self.stride);
        if self.act { s } else { s.linear() }
    }

    pub fn cheap_spec(&self) -> ConvSpec {
        let s = ConvSpec::depthwise(self.c_out / 2, GHOST_CHEAP_KERNEL).pinned();
        if self.act { s } else { s.linear() }
    }

    pub fn trace_at<T: Tracer>(&self, t: &mut T, prefix: &str, x: &T::V) -> Result<T::V> {
        self.validate()?;
        let y = t.conv(&format!("{prefix}primary"), &self.primary_spec(), x)?;
        let z = t.conv(&format!("{prefix}cheap"), &self.cheap_spec(), &y)?;
        t.concat(&[y, z])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GhostConvBlock {
    pub primary: ConvParams,
    pub cheap: ConvParams,
    pub act: bool,
}

impl GhostConvBlock {
    pub fn build(cfg: &GhostConvConfig, src: &mut ParamSource<'_>, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(GhostConvBlock {
            primary: fetch(src, &format!("{prefix}primary"), &cfg.primary_spec())?,
            cheap: fetch(src, &format!("{prefix}cheap"), &cfg.cheap_spec())?,
            act: cfg.act,
        })
    }

    pub fn c_in(&self) -> usize {
        self.primary.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.primary.c_out() + self.cheap.c_out()
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        expect_channels("ghost_conv", self.c_in(), x)?;
        let y = conv_act(x, &self.primary, self.act)?;
        let z = conv_act(&y, &self.cheap, self.act)?;
        tensor::concat_channels(&[&y, &z])
    }
}

/// Three chained ghost convs, concatenated, fused by a 1x1 conv and added
/// back onto the block input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhostHgConfig {
    pub c: usize,
    #[serde(default = "three")]
    pub k: usize,
    /// Output widths of the three ghost convs; `[c, c, c]` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<[usize; 3]>,
}

impl GhostHgConfig {
    pub fn new(c: usize) -> Self {
        GhostHgConfig { c, k: 3, hidden: None }
    }

    pub fn widths(&self) -> [usize; 3] {
        self.hidden.unwrap_or([self.c; 3])
    }

    pub fn ghost(&self, i: usize) -> GhostConvConfig {
        let w = self.widths();
        let c_in = if i == 0 { self.c } else { w[i - 1] };
        GhostConvConfig::new(c_in, w[i], self.k)
    }

    pub fn fuse_spec(&self) -> ConvSpec {
        ConvSpec::new(self.widths().iter().sum(), self.c, 1)
    }

    pub fn trace_at<T: Tracer>(&self, t: &mut T, prefix: &str, x: &T::V) -> Result<T::V> {
        let mut maps = Vec::with_capacity(3);
        let mut cur = x.clone();
        for i in 0..3 {
            cur = self.ghost(i).trace_at(t, &format!("{prefix}ghost{}.", i + 1), &cur)?;
            maps.push(cur.clone());
        }
        let cat = t.concat(&maps)?;
        let fused = t.conv(&format!("{prefix}fuse"), &self.fuse_spec(), &cat)?;
        t.add(&fused, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GhostHgBlock {
    pub ghosts: [GhostConvBlock; 3],
    pub fuse: ConvParams,
}

impl GhostHgBlock {
    pub fn build(cfg: &GhostHgConfig, src: &mut ParamSource<'_>, prefix: &str) -> Result<Self> {
        let g = |i: usize, src: &mut ParamSource<'_>| {
            GhostConvBlock::build(&cfg.ghost(i), src, &format!("{prefix}ghost{}.", i + 1))
        };
        let ghosts = [g(0, src)?, g(1, src)?, g(2, src)?];
        let fuse = fetch(src, &format!("{prefix}fuse"), &cfg.fuse_spec())?;
        Ok(GhostHgBlock { ghosts, fuse })
    }

    pub fn channels(&self) -> usize {
        self.fuse.c_out()
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.forward_with(x, |i, t| self.ghosts[i].forward(t))
    }

    /// Forward with the ghost stage replaced by `ghost(i, input)`.
    pub fn forward_with(
        &self,
        x: &Tensor4,
        mut ghost: impl FnMut(usize, &Tensor4) -> Result<Tensor4>,
    ) -> Result<Tensor4> {
        expect_channels("ghost_hgblock", self.channels(), x)?;
        let g1 = ghost(0, x)?;
        let g2 = ghost(1, &g1)?;
        let g3 = ghost(2, &g2)?;
        let cat = tensor::concat_channels(&[&g1, &g2, &g3])?;
        let fused = conv_act(&cat, &self.fuse, true)?;
        tensor::add(&fused, x)
    }
}

/// Stride-4 stem: 2x2/2 conv, pointwise + depthwise 5x5 pair, 2x2 max pool,
/// then a pointwise projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HgStemConfig {
    pub c_in: usize,
    pub c_stem: usize,
    pub c_out: usize,
    /// Width of the pointwise/depthwise pair; `c_stem` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_pw: Option<usize>,
}

impl HgStemConfig {
    pub fn new(c_in: usize, c_stem: usize, c_out: usize) -> Self {
        HgStemConfig {
            c_in,
            c_stem,
            c_out,
            c_pw: None,
        }
    }

    fn pw(&self) -> usize {
        self.c_pw.unwrap_or(self.c_stem)
    }

    pub fn stage1(&self) -> ConvSpec {
        ConvSpec::new(self.c_in, self.c_stem, 2).stride(2).pad(0)
    }

    pub fn stage2a(&self) -> ConvSpec {
        ConvSpec::new(self.c_stem, self.pw(), 1)
    }

    pub fn stage2b(&self) -> ConvSpec {
        ConvSpec::depthwise(self.pw(), 5).pinned()
    }

    pub fn stage3(&self) -> ConvSpec {
        ConvSpec::new(self.pw(), self.c_out, 1)
    }

    pub fn trace_at<T: Tracer>(&self, t: &mut T, prefix: &str, x: &T::V) -> Result<T::V> {
        t.require_divisible(x, 4)?;
        let y = t.conv(&format!("{prefix}stage1"), &self.stage1(), x)?;
        let y = t.conv(&format!("{prefix}stage2a"), &self.stage2a(), &y)?;
        let y = t.conv(&format!("{prefix}stage2b"), &self.stage2b(), &y)?;
        let y = t.maxpool(&y, 2, 2, 0)?;
        t.conv(&format!("{prefix}stage3"), &self.stage3(), &y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HgStemBlock {
    pub stage1: ConvParams,
    pub stage2a: ConvParams,
    pub stage2b: ConvParams,
    pub stage3: ConvParams,
}

impl HgStemBlock {
    pub fn build(cfg: &HgStemConfig, src: &mut ParamSource<'_>, prefix: &str) -> Result<Self> {
        Ok(HgStemBlock {
            stage1: fetch(src, &format!("{prefix}stage1"), &cfg.stage1())?,
            stage2a: fetch(src, &format!("{prefix}stage2a"), &cfg.stage2a())?,
            stage2b: fetch(src, &format!("{prefix}stage2b"), &cfg.stage2b())?,
            stage3: fetch(src, &format!("{prefix}stage3"), &cfg.stage3())?,
        })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        expect_channels("hgstem", self.stage1.c_in(), x)?;
        check_divisible(x.h(), x.w(), 4)?;
        let y = conv_act(x, &self.stage1, true)?;
        let y = conv_act(&y, &self.stage2a, true)?;
        let y = conv_act(&y, &self.stage2b, true)?;
        let y = tensor::maxpool2d(&y, 2, 2, 0)?;
        conv_act(&y, &self.stage3, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::testutil::{random_tensor, seeded_source};
    use crate::blocks::ChannelTracer;

    fn zeros_source() -> impl FnMut(&str, &ConvSpec) -> Result<ConvParams> {
        |_: &str, s: &ConvSpec| Ok(s.zeros())
    }

    #[test]
    fn ghost_conv_shape_and_params() {
        let cfg = GhostConvConfig::new(4, 8, 1);
        let mut src = seeded_source(1);
        let b = GhostConvBlock::build(&cfg, &mut src, "").unwrap();
        let y = b.forward(&random_tensor([1, 4, 8, 8], 2)).unwrap();
        assert_eq!(y.shape(), [1, 8, 8, 8]);
        assert_eq!(b.primary.param_count(), 20);
        assert_eq!(b.cheap.param_count(), 104);
        assert_eq!(b.primary.param_count() + b.cheap.param_count(), 124);
    }

    #[test]
    fn ghost_conv_zero_weights_and_odd_width() {
        let cfg = GhostConvConfig::new(3, 6, 3);
        let b = GhostConvBlock::build(&cfg, &mut zeros_source(), "").unwrap();
        let y = b.forward(&random_tensor([2, 3, 5, 5], 9)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let odd = GhostConvConfig::new(3, 5, 1);
        assert!(GhostConvBlock::build(&odd, &mut zeros_source(), "").is_err());
    }

    #[test]
    fn ghost_conv_is_concat_of_primary_and_cheap() {
        let cfg = GhostConvConfig::new(4, 8, 3);
        let b = GhostConvBlock::build(&cfg, &mut seeded_source(3), "").unwrap();
        let x = random_tensor([1, 4, 6, 6], 4);
        let y = b.forward(&x).unwrap();
        let p = tensor::silu(&tensor::conv2d(&x, &b.primary).unwrap());
        let c = tensor::silu(&tensor::conv2d(&p, &b.cheap).unwrap());
        let parts = tensor::split_channels(&y, &[4, 4]).unwrap();
        assert!(parts[0].bit_eq(&p));
        assert!(parts[1].bit_eq(&c));
    }

    #[test]
    fn hgblock_zero_fuse_is_identity() {
        let cfg = GhostHgConfig::new(16);
        let mut seeded = seeded_source(5);
        let mut src = |name: &str, s: &ConvSpec| {
            if name == "fuse" { Ok(s.zeros()) } else { seeded(name, s) }
        };
        let b = GhostHgBlock::build(&cfg, &mut src, "").unwrap();
        let x = random_tensor([1, 16, 8, 8], 6);
        let y = b.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 16, 8, 8]);
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn hgblock_with_identity_ghosts() {
        let cfg = GhostHgConfig::new(4);
        let b = GhostHgBlock::build(&cfg, &mut seeded_source(7), "").unwrap();
        let x = random_tensor([1, 4, 5, 5], 8);
        let y = b.forward_with(&x, |_, t| Ok(t.clone())).unwrap();
        let cat = tensor::concat_channels(&[&x, &x, &x]).unwrap();
        let expected = tensor::add(&conv_act(&cat, &b.fuse, true).unwrap(), &x).unwrap();
        assert!(y.bit_eq(&expected));
        let wrong = random_tensor([1, 5, 5, 5], 8);
        assert!(b.forward(&wrong).is_err());
    }

    #[test]
    fn hgblock_trace_declares_fuse_from_three_maps() {
        let mut t = ChannelTracer::new();
        let out = GhostHgConfig::new(16).trace_at(&mut t, "", &16).unwrap();
        assert_eq!(out, 16);
        let fuse = t.convs.iter().find(|(n, _)| n == "fuse").unwrap().1;
        assert_eq!((fuse.c_in, fuse.c_out), (48, 16));
        assert_eq!(t.convs.len(), 7);
    }

    #[test]
    fn hgstem_shapes() {
        let cfg = HgStemConfig::new(3, 16, 32);
        let b = HgStemBlock::build(&cfg, &mut seeded_source(11), "").unwrap();
        let y = b.forward(&random_tensor([1, 3, 64, 64], 12)).unwrap();
        assert_eq!(y.shape(), [1, 32, 16, 16]);
        assert!(b.forward(&random_tensor([1, 3, 62, 64], 12)).is_err());

        let z = HgStemBlock::build(&cfg, &mut zeros_source(), "").unwrap();
        let y = z.forward(&random_tensor([1, 3, 16, 16], 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_identity_preserves_constants() {
        let cfg = HgStemConfig::new(3, 4, 4);
        let mut dw = cfg.stage2b().zeros();
        for c in 0..4 {
            dw.weight_mut()[c * 25 + 12] = 1.0;
        }
        let x = Tensor4::filled([1, 4, 8, 8], 0.75).unwrap();
        assert!(tensor::conv2d(&x, &dw).unwrap().bit_eq(&x));
    }
}
