//! Blocks of the unmodified detector: plain conv, C2f with dense bottlenecks, SPPF.

use serde::{Deserialize, Serialize};

use super::{conv_act, expect_channels, fetch, ConvSpec, ParamSource, Tracer};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvParams, Tensor4};

fn one() -> usize {
    1
}

fn five() -> usize {
    5
}

fn yes() -> bool {
    true
}

/// Conv with folded batch norm, optionally followed by SiLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Defaults to `k / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default = "yes")]
    pub act: bool,
}

impl ConvConfig {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvConfig {
            c_in,
            c_out,
            k,
            stride,
            pad: None,
            groups: 1,
            act: true,
        }
    }

    pub fn spec(&self) -> ConvSpec {
        let s = ConvSpec::new(self.c_in, self.c_out, self.k)
            .stride(self.stride)
            .pad(self.pad.unwrap_or(self.k / 2))
            .groups(self.groups);
        if self.act { s } else { s.linear() }
    }

    pub fn trace_at<T: Tracer>(&self, t: &mut T, prefix: &str, x: &T::V) -> Result<T::V> {
        t.conv(prefix.trim_end_matches('.'), &self.spec(), x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnAct {
    pub conv: ConvParams,
    pub act: bool,
}

impl ConvBnAct {
    pub fn build(cfg: &ConvConfig, src: &mut ParamSource<'_>, prefix: &str) -> Result<Self> {
        Ok(ConvBnAct {
            conv: fetch(src, prefix.trim_end_matches('.'), &cfg.spec())?,
            act: cfg.act,
        })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        conv_act(x, &self.conv, self.act)
    }
}

/// C2f with dense residual bottlenecks (two 3x3 convs each). Channel math
/// mirrors [`super::C2fFasterConfig`] so the two differ only in the chain blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct C2fConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<[usize; 2]>,
    /// Inner widths of each bottleneck; the chain width when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mid: Option<Vec<usize>>,
}

impl C2fConfig {
    pub fn new(c_in: usize, c_out: usize, n: usize) -> Self {
        C2fConfig {
            c_in,
            c_out,
            n,
            split: None,
            mid: None,
        }
    }

    pub fn halves(&self) -> [usize; 2] {
        self.split.unwrap_or([self.c_out / 2; 2])
    }

    fn mid_width(&self, i: usize) -> usize {
        self.mid.as_ref().map_or(self.halves()[0], |m| m[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("c2f needs at least one bottleneck".into()));
        }
        if self.halves().contains(&0) {
            return Err(Error::Config(format!("c2f halves must be non-empty, got {:?}", self.halves())));
        }
        if let Some(m) = &self.mid {
            if m.len() != self.n || m.contains(&0) {
                return Err(Error::Config(format!("c2f mid widths {m:?} do not match n = {}", self.n)));
            }
        }
        Ok(())
    }

    pub fn entry_spec(&self) -> ConvSpec {
        let [a, b] = self.halves();
        ConvSpec::new(self.c_in, a + b, 1)
    }

    pub fn bottleneck_specs(&self, i: usize) -> (ConvSpec, ConvSpec) {
        let c = self.halves()[0];
        let m = self.mid_width(i);
        (ConvSpec::new(c, m, 3), ConvSpec::new(m, c, 3))
    }

    pub fn exit_spec(&self) -> ConvSpec {
        let [a, b] = self.halves();
        ConvSpec::new(a + b, self.c_out, 1)
    }

    pub fn trace_at<T: Tracer>(&self, t: &mut T, prefix: &str, x: &T::V) -> Result<T::V> {
        self.validate()?;
        let y = t.conv(&format!("{prefix}entry"), &self.entry_spec(), x)?;
        let halves = t.split(&y, &self.halves())?;
        let mut chain = halves[0].clone();
        for i in 0..self.n {
            let (s1, s2) = self.bottleneck_specs(i);
            let h = t.conv(&format!("{prefix}m{i}.cv1"), &s1, &chain)?;
            let h = t.conv(&format!("{prefix}m{i}.cv2"), &s2, &h)?;
            chain = t.add(&chain, &h)?;
        }
        let cat = t.concat(&[halves[1].clone(), chain])?;
        t.conv(&format!("{prefix}exit"), &self.exit_spec(), &cat)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct C2fBlock {
    pub entry: ConvParams,
    pub bottlenecks: Vec<(ConvParams, ConvParams)>,
    pub exit: ConvParams,
    pub halves: [usize; 2],
}

impl C2fBlock {
    pub fn build(cfg: &C2fConfig, src: &mut ParamSource<'_>, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let entry = fetch(src, &format!("{prefix}entry"), &cfg.entry_spec())?;
        let mut bottlenecks = Vec::with_capacity(cfg.n);
        for i in 0..cfg.n {
            let (s1, s2) = cfg.bottleneck_specs(i);
            bottlenecks.push((
                fetch(src, &format!("{prefix}m{i}.cv1"), &s1)?,
                fetch(src, &format!("{prefix}m{i}.cv2"), &s2)?,
            ));
        }
        let exit = fetch(src, &format!("{prefix}exit"), &cfg.exit_spec())?;
        Ok(C2fBlock {
            entry,
            bottlenecks,
            exit,
            halves: cfg.halves(),
        })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        expect_channels("c2f", self.entry.c_in(), x)?;
        let y = conv_act(x, &self.entry, true)?;
        let halves = tensor::split_channels(&y, &self.halves)?;
        let mut chain = halves[0].clone();
        for (cv1, cv2) in &self.bottlenecks {
            let h = conv_act(&chain, cv1, true)?;
            let h = conv_act(&h, cv2, true)?;
            chain = tensor::add(&chain, &h)?;
        }
        let cat = tensor::concat_channels(&[&halves[1], &chain])?;
        conv_act(&cat, &self.exit, true)
    }
}

/// 1x1 reduce, three chained stride-1 max pools, concat of all four maps, 1x1 fuse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SppfConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Defaults to `c_in / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_mid: Option<usize>,
    #[serde(default = "five")]
    pub k: usize,
}

impl SppfConfig {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        SppfConfig {
            c_in,
            c_out,
            c_mid: None,
            k: 5,
        }
    }

    fn mid(&self) -> usize {
        self.c_mid.unwrap_or(self.c_in / 2)
    }

    pub fn cv1_spec(&self) -> ConvSpec {
        ConvSpec::new(self.c_in, self.mid(), 1)
    }

    pub fn cv2_spec(&self) -> ConvSpec {
        ConvSpec::new(4 * self.mid(), self.c_out, 1)
    }

    pub fn trace_at<T: Tracer>(&self, t: &mut T, prefix: &str, x: &T::V) -> Result<T::V> {
        let y0 = t.conv(&format!("{prefix}cv1"), &self.cv1_spec(), x)?;
        let y1 = t.maxpool(&y0, self.k, 1, self.k / 2)?;
        let y2 = t.maxpool(&y1, self.k, 1, self.k / 2)?;
        let y3 = t.maxpool(&y2, self.k, 1, self.k / 2)?;
        let cat = t.concat(&[y0, y1, y2, y3])?;
        t.conv(&format!("{prefix}cv2"), &self.cv2_spec(), &cat)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SppfBlock {
    pub cv1: ConvParams,
    pub cv2: ConvParams,
    pub k: usize,
}

impl SppfBlock {
    pub fn build(cfg: &SppfConfig, src: &mut ParamSource<'_>, prefix: &str) -> Result<Self> {
        Ok(SppfBlock {
            cv1: fetch(src, &format!("{prefix}cv1"), &cfg.cv1_spec())?,
            cv2: fetch(src, &format!("{prefix}cv2"), &cfg.cv2_spec())?,
            k: cfg.k,
        })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        expect_channels("sppf", self.cv1.c_in(), x)?;
        let y0 = conv_act(x, &self.cv1, true)?;
        let y1 = tensor::maxpool2d(&y0, self.k, 1, self.k / 2)?;
        let y2 = tensor::maxpool2d(&y1, self.k, 1, self.k / 2)?;
        let y3 = tensor::maxpool2d(&y2, self.k, 1, self.k / 2)?;
        let cat = tensor::concat_channels(&[&y0, &y1, &y2, &y3])?;
        conv_act(&cat, &self.cv2, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::testutil::{random_tensor, seeded_source};

    /// 1x1 conv that copies input channel `i % c_in` into output channel `i`.
    fn copy_conv(spec: &ConvSpec) -> ConvParams {
        let mut p = spec.zeros();
        for o in 0..spec.c_out {
            p.weight_mut()[o * spec.c_in + o % spec.c_in] = 1.0;
        }
        p
    }

    #[test]
    fn sppf_on_constant_input_is_constant() {
        let cfg = SppfConfig::new(4, 4);
        let b = SppfBlock {
            cv1: copy_conv(&cfg.cv1_spec()),
            cv2: {
                let s = cfg.cv2_spec();
                let mut p = s.zeros();
                for o in 0..s.c_out {
                    p.weight_mut()[o * s.c_in + o % 2] = 1.0;
                }
                p
            },
            k: 5,
        };
        let x = Tensor4::filled([1, 4, 6, 6], 2.0).unwrap();
        let y = b.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 4, 6, 6]);
        let first = y.data()[0];
        assert!(y.data().iter().all(|&v| v == first));
    }

    #[test]
    fn c2f_zero_bottleneck_reduces_to_exit_of_halves() {
        let cfg = C2fConfig::new(8, 8, 1);
        let mut seeded = seeded_source(1);
        let mut src = |name: &str, s: &ConvSpec| {
            if name.starts_with("m0.") { Ok(s.zeros()) } else { seeded(name, s) }
        };
        let b = C2fBlock::build(&cfg, &mut src, "").unwrap();
        let x = random_tensor([1, 8, 5, 5], 2);
        let t = conv_act(&x, &b.entry, true).unwrap();
        let h = tensor::split_channels(&t, &[4, 4]).unwrap();
        let want = conv_act(&tensor::concat_channels(&[&h[1], &h[0]]).unwrap(), &b.exit, true).unwrap();
        assert!(b.forward(&x).unwrap().bit_eq(&want));
    }

    #[test]
    fn conv_block_declared_channels_match() {
        let cfg = ConvConfig::new(3, 16, 3, 2);
        let b = ConvBnAct::build(&cfg, &mut seeded_source(3), "").unwrap();
        let y = b.forward(&random_tensor([2, 3, 9, 9], 4)).unwrap();
        assert_eq!(y.shape(), [2, 16, 5, 5]);
    }
}
