//! Partial-convolution FasterBlock and the C2f-Faster split/transform/concat block.

use serde::{Deserialize, Serialize};

use super::{conv_act, expect_channels, fetch, ConvSpec, ParamSource, Tracer};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvParams, Tensor4};

/// `y = x + fuse(pconv_partial(x))`, where the 3x3 partial conv touches only
/// the first `partial` channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FasterConfig {
    pub c: usize,
    /// Convolved channel count; `c / 4` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial: Option<usize>,
}

impl FasterConfig {
    pub fn new(c: usize) -> Self {
        FasterConfig { c, partial: None }
    }

    pub fn partial(&self) -> usize {
        self.partial.unwrap_or(self.c / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.partial.is_none() && self.c < 4 {
            return Err(Error::Config(format!(
                "faster block needs at least 4 channels, got {}",
                self.c
            )));
        }
        let p = self.partial();
        if p == 0 || p > self.c {
            return Err(Error::Config(format!(
                "faster block partial width {p} out of range 1..={}",
                self.c
            )));
        }
        Ok(())
    }

    pub fn pconv_spec(&self) -> ConvSpec {
        let p = self.partial();
        ConvSpec::new(p, p, 3).pinned()
    }

    pub fn fuse_spec(&self) -> ConvSpec {
        ConvSpec::new(self.c, self.c, 1)
    }

    pub fn trace_at<T: Tracer>(&self, t: &mut T, prefix: &str, x: &T::V) -> Result<T::V> {
        self.validate()?;
        let p = self.partial();
        let name = format!("{prefix}pconv");
        let mixed = if p < self.c {
            let parts = t.split(x, &[p, self.c - p])?;
            let conv = t.conv(&name, &self.pconv_spec(), &parts[0])?;
            t.concat(&[conv, parts[1].clone()])?
        } else {
            t.conv(&name, &self.pconv_spec(), x)?
        };
        let fused = t.conv(&format!("{prefix}fuse"), &self.fuse_spec(), &mixed)?;
        t.add(x, &fused)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FasterBlock {
    pub pconv: ConvParams,
    pub fuse: ConvParams,
}

impl FasterBlock {
    pub fn build(cfg: &FasterConfig, src: &mut ParamSource<'_>, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(FasterBlock {
            pconv: fetch(src, &format!("{prefix}pconv"), &cfg.pconv_spec())?,
            fuse: fetch(src, &format!("{prefix}fuse"), &cfg.fuse_spec())?,
        })
    }

    pub fn channels(&self) -> usize {
        self.fuse.c_out()
    }

    pub fn partial(&self) -> usize {
        self.pconv.c_out()
    }

    /// Applies the 3x3 conv to channels `[0, partial)` and copies the rest.
    pub fn pconv_partial(&self, x: &Tensor4) -> Result<Tensor4> {
        expect_channels("faster_block", self.channels(), x)?;
        let p = self.partial();
        if p == x.c() {
            return conv_act(x, &self.pconv, true);
        }
        let parts = tensor::split_channels(x, &[p, x.c() - p])?;
        let conv = conv_act(&parts[0], &self.pconv, true)?;
        tensor::concat_channels(&[&conv, &parts[1]])
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let mixed = self.pconv_partial(x)?;
        let fused = conv_act(&mixed, &self.fuse, true)?;
        tensor::add(x, &fused)
    }
}

/// Entry 1x1 conv, split in two, a chain of FasterBlocks on the first half,
/// concat of the bypass half with the chain output, exit 1x1 conv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct C2fFasterConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub n: usize,
    /// Widths of the two halves after the entry conv; `[c_out/2; 2]` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial: Option<usize>,
    /// Concatenate the chain input (first half) instead of the bypass half.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub literal_concat: bool,
}

impl C2fFasterConfig {
    pub fn new(c_in: usize, c_out: usize, n: usize) -> Self {
        C2fFasterConfig {
            c_in,
            c_out,
            n,
            split: None,
            partial: None,
            literal_concat: false,
        }
    }

    pub fn halves(&self) -> [usize; 2] {
        self.split.unwrap_or([self.c_out / 2; 2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("c2f_faster needs at least one FasterBlock".into()));
        }
        if self.halves().contains(&0) {
            return Err(Error::Config(format!("c2f_faster halves must be non-empty, got {:?}", self.halves())));
        }
        self.block().validate()
    }

    pub fn entry_spec(&self) -> ConvSpec {
        let [a, b] = self.halves();
        ConvSpec::new(self.c_in, a + b, 1)
    }

    pub fn block(&self) -> FasterConfig {
        FasterConfig {
            c: self.halves()[0],
            partial: self.partial,
        }
    }

    pub fn exit_spec(&self) -> ConvSpec {
        let [a, b] = self.halves();
        let bypass = if self.literal_concat { a } else { b };
        ConvSpec::new(bypass + a, self.c_out, 1)
    }

    pub fn trace_at<T: Tracer>(&self, t: &mut T, prefix: &str, x: &T::V) -> Result<T::V> {
        self.validate()?;
        let y = t.conv(&format!("{prefix}entry"), &self.entry_spec(), x)?;
        let halves = t.split(&y, &self.halves())?;
        let mut chain = halves[0].clone();
        for i in 0..self.n {
            chain = self.block().trace_at(t, &format!("{prefix}m{i}."), &chain)?;
        }
        let bypass = if self.literal_concat { &halves[0] } else { &halves[1] };
        let cat = t.concat(&[bypass.clone(), chain])?;
        t.conv(&format!("{prefix}exit"), &self.exit_spec(), &cat)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct C2fFasterBlock {
    pub entry: ConvParams,
    pub blocks: Vec<FasterBlock>,
    pub exit: ConvParams,
    pub halves: [usize; 2],
    pub literal_concat: bool,
}

impl C2fFasterBlock {
    pub fn build(cfg: &C2fFasterConfig, src: &mut ParamSource<'_>, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let entry = fetch(src, &format!("{prefix}entry"), &cfg.entry_spec())?;
        let blocks = (0..cfg.n)
            .map(|i| FasterBlock::build(&cfg.block(), src, &format!("{prefix}m{i}.")))
            .collect::<Result<_>>()?;
        let exit = fetch(src, &format!("{prefix}exit"), &cfg.exit_spec())?;
        Ok(C2fFasterBlock {
            entry,
            blocks,
            exit,
            halves: cfg.halves(),
            literal_concat: cfg.literal_concat,
        })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        expect_channels("c2f_faster", self.entry.c_in(), x)?;
        let y = conv_act(x, &self.entry, true)?;
        let halves = tensor::split_channels(&y, &self.halves)?;
        let mut chain = halves[0].clone();
        for b in &self.blocks {
            chain = b.forward(&chain)?;
        }
        let bypass = if self.literal_concat { &halves[0] } else { &halves[1] };
        let cat = tensor::concat_channels(&[bypass, &chain])?;
        conv_act(&cat, &self.exit, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::testutil::{random_tensor, seeded_source};

    #[test]
    fn zero_fuse_is_residual_identity() {
        let cfg = FasterConfig::new(8);
        let mut seeded = seeded_source(1);
        let mut src = |name: &str, s: &ConvSpec| {
            if name == "fuse" { Ok(s.zeros()) } else { seeded(name, s) }
        };
        let b = FasterBlock::build(&cfg, &mut src, "").unwrap();
        let x = random_tensor([1, 8, 4, 4], 2);
        assert!(b.forward(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn pass_through_slice_is_untouched() {
        let cfg = FasterConfig::new(8);
        let b = FasterBlock::build(&cfg, &mut seeded_source(3), "").unwrap();
        assert_eq!(b.partial(), 2);
        let x = random_tensor([1, 8, 4, 4], 4);
        let mixed = b.pconv_partial(&x).unwrap();
        let got = tensor::split_channels(&mixed, &[2, 6]).unwrap();
        let want = tensor::split_channels(&x, &[2, 6]).unwrap();
        assert!(got[1].bit_eq(&want[1]));
        assert!(!got[0].bit_eq(&want[0]));
    }

    #[test]
    fn narrow_blocks_are_rejected() {
        assert!(FasterConfig::new(3).validate().is_err());
        let explicit = FasterConfig { c: 3, partial: Some(1) };
        assert!(explicit.validate().is_ok());
        assert!(FasterConfig { c: 8, partial: Some(9) }.validate().is_err());
    }

    #[test]
    fn c2f_faster_shapes() {
        let cfg = C2fFasterConfig::new(32, 32, 2);
        let b = C2fFasterBlock::build(&cfg, &mut seeded_source(5), "").unwrap();
        let y = b.forward(&random_tensor([1, 32, 8, 8], 6)).unwrap();
        assert_eq!(y.shape(), [1, 32, 8, 8]);
        assert!(b.forward(&random_tensor([1, 31, 8, 8], 6)).is_err());
    }

    #[test]
    fn c2f_faster_reduces_to_exit_of_swapped_halves() {
        let cfg = C2fFasterConfig::new(8, 16, 1);
        let mut seeded = seeded_source(7);
        let mut src = |name: &str, s: &ConvSpec| {
            if name == "m0.fuse" { Ok(s.zeros()) } else { seeded(name, s) }
        };
        let b = C2fFasterBlock::build(&cfg, &mut src, "").unwrap();
        let x = random_tensor([1, 8, 6, 6], 8);
        let t = conv_act(&x, &b.entry, true).unwrap();
        let h = tensor::split_channels(&t, &[8, 8]).unwrap();
        let want = conv_act(&tensor::concat_channels(&[&h[1], &h[0]]).unwrap(), &b.exit, true).unwrap();
        assert!(b.forward(&x).unwrap().bit_eq(&want));
    }

    #[test]
    fn zero_exit_gives_zero_output() {
        let cfg = C2fFasterConfig::new(8, 8, 1);
        let mut seeded = seeded_source(9);
        let mut src = |name: &str, s: &ConvSpec| {
            if name == "exit" { Ok(s.zeros()) } else { seeded(name, s) }
        };
        let b = C2fFasterBlock::build(&cfg, &mut src, "").unwrap();
        let y = b.forward(&random_tensor([1, 8, 4, 4], 10)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn literal_concat_uses_chain_input() {
        let cfg = C2fFasterConfig {
            literal_concat: true,
            ..C2fFasterConfig::new(8, 16, 1)
        };
        let b = C2fFasterBlock::build(&cfg, &mut seeded_source(11), "").unwrap();
        let x = random_tensor([1, 8, 4, 4], 12);
        let t = conv_act(&x, &b.entry, true).unwrap();
        let h = tensor::split_channels(&t, &[8, 8]).unwrap();
        let chain = b.blocks[0].forward(&h[0]).unwrap();
        let want = conv_act(&tensor::concat_channels(&[&h[0], &chain]).unwrap(), &b.exit, true).unwrap();
        assert!(b.forward(&x).unwrap().bit_eq(&want));
    }
}
