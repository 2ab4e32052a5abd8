//! Detection heads. Both emit one `(cls, box)` pair per input scale.

use serde::{Deserialize, Serialize};

use super::{conv_act, expect_channels, fetch, ConvSpec, ParamSource, Tracer};
use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Tensor4};

fn sixty_four() -> usize {
    64
}

fn sixteen() -> usize {
    16
}

/// Box regression outputs per location.
pub const BOX_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub cls: Tensor4,
    pub bbox: Tensor4,
}

/// Head whose cls and box outputs share one trunk of two grouped 3x3 convs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcDetectConfig {
    pub in_channels: Vec<usize>,
    #[serde(default = "sixty_four")]
    pub width: usize,
    #[serde(default = "sixteen")]
    pub groups: usize,
    pub num_classes: usize,
}

impl GcDetectConfig {
    pub fn new(in_channels: Vec<usize>, num_classes: usize) -> Self {
        GcDetectConfig {
            in_channels,
            width: 64,
            groups: 16,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels.is_empty() || self.num_classes == 0 || self.width == 0 {
            return Err(Error::Config("gcdetect needs scales, classes and a width".into()));
        }
        if self.groups == 0 || self.width % self.groups != 0 {
            return Err(Error::Config(format!(
                "gcdetect width {} is not divisible by groups {}",
                self.width, self.groups
            )));
        }
        Ok(())
    }

    pub fn align_spec(&self, scale: usize) -> ConvSpec {
        ConvSpec::new(self.in_channels[scale], self.width, 1)
    }

    pub fn gconv_spec(&self) -> ConvSpec {
        ConvSpec::new(self.width, self.width, 3).groups(self.groups)
    }

    pub fn cls_spec(&self) -> ConvSpec {
        ConvSpec::new(self.width, self.num_classes, 1).linear()
    }

    pub fn box_spec(&self) -> ConvSpec {
        ConvSpec::new(self.width, BOX_CHANNELS, 1).linear()
    }

    /// Outputs are interleaved `[cls0, box0, cls1, box1, ..]`.
    pub fn trace_at<T: Tracer>(&self, t: &mut T, prefix: &str, xs: &[T::V]) -> Result<Vec<T::V>> {
        self.validate()?;
        check_scales(self.in_channels.len(), xs.len())?;
        let mut out = Vec::with_capacity(2 * xs.len());
        for (i, x) in xs.iter().enumerate() {
            let p = format!("{prefix}s{i}.");
            let a = t.conv(&format!("{p}align"), &self.align_spec(i), x)?;
            let g = t.conv(&format!("{p}gconv1"), &self.gconv_spec(), &a)?;
            let trunk = t.conv(&format!("{p}gconv2"), &self.gconv_spec(), &g)?;
            out.push(t.conv(&format!("{p}cls_out"), &self.cls_spec(), &trunk)?);
            out.push(t.conv(&format!("{p}box_out"), &self.box_spec(), &trunk)?);
        }
        Ok(out)
    }
}

fn check_scales(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dim {
            op: "detect head",
            dim: "scales",
            expected,
            actual,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcScale {
    pub align: ConvParams,
    pub gconv1: ConvParams,
    pub gconv2: ConvParams,
    pub cls_out: ConvParams,
    pub box_out: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcDetectHead {
    pub scales: Vec<GcScale>,
}

impl GcDetectHead {
    pub fn build(cfg: &GcDetectConfig, src: &mut ParamSource<'_>, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let mut scales = Vec::with_capacity(cfg.in_channels.len());
        for i in 0..cfg.in_channels.len() {
            let p = format!("{prefix}s{i}.");
            scales.push(GcScale {
                align: fetch(src, &format!("{p}align"), &cfg.align_spec(i))?,
                gconv1: fetch(src, &format!("{p}gconv1"), &cfg.gconv_spec())?,
                gconv2: fetch(src, &format!("{p}gconv2"), &cfg.gconv_spec())?,
                cls_out: fetch(src, &format!("{p}cls_out"), &cfg.cls_spec())?,
                box_out: fetch(src, &format!("{p}box_out"), &cfg.box_spec())?,
            });
        }
        Ok(GcDetectHead { scales })
    }

    pub fn forward(&self, xs: &[&Tensor4]) -> Result<Vec<HeadOutput>> {
        check_scales(self.scales.len(), xs.len())?;
        self.scales
            .iter()
            .zip(xs)
            .map(|(s, x)| {
                expect_channels("gcdetect", s.align.c_in(), x)?;
                let a = conv_act(x, &s.align, true)?;
                let g = conv_act(&a, &s.gconv1, true)?;
                let trunk = conv_act(&g, &s.gconv2, true)?;
                Ok(HeadOutput {
                    cls: conv_act(&trunk, &s.cls_out, false)?,
                    bbox: conv_act(&trunk, &s.box_out, false)?,
                })
            })
            .collect()
    }
}

/// Head with separate dense cls and box branches of two 3x3 convs each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlainDetectConfig {
    pub in_channels: Vec<usize>,
    #[serde(default = "sixty_four")]
    pub box_width: usize,
    #[serde(default = "sixty_four")]
    pub cls_width: usize,
    pub num_classes: usize,
}

impl PlainDetectConfig {
    pub fn new(in_channels: Vec<usize>, num_classes: usize) -> Self {
        PlainDetectConfig {
            in_channels,
            box_width: 64,
            cls_width: 64,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels.is_empty() || self.num_classes == 0 || self.box_width == 0 || self.cls_width == 0 {
            return Err(Error::Config("plain detect head needs scales, classes and widths".into()));
        }
        Ok(())
    }

    fn branch(&self, scale: usize, width: usize, out: usize) -> [ConvSpec; 3] {
        [
            ConvSpec::new(self.in_channels[scale], width, 3),
            ConvSpec::new(width, width, 3),
            ConvSpec::new(width, out, 1).linear(),
        ]
    }

    pub fn box_specs(&self, scale: usize) -> [ConvSpec; 3] {
        self.branch(scale, self.box_width, BOX_CHANNELS)
    }

    pub fn cls_specs(&self, scale: usize) -> [ConvSpec; 3] {
        self.branch(scale, self.cls_width, self.num_classes)
    }

    /// Outputs are interleaved `[cls0, box0, cls1, box1, ..]`.
    pub fn trace_at<T: Tracer>(&self, t: &mut T, prefix: &str, xs: &[T::V]) -> Result<Vec<T::V>> {
        self.validate()?;
        check_scales(self.in_channels.len(), xs.len())?;
        let mut out = Vec::with_capacity(2 * xs.len());
        for (i, x) in xs.iter().enumerate() {
            let p = format!("{prefix}s{i}.");
            let [b1, b2, b3] = self.box_specs(i);
            let bb = t.conv(&format!("{p}box1"), &b1, x)?;
            let bb = t.conv(&format!("{p}box2"), &b2, &bb)?;
            let bb = t.conv(&format!("{p}box_out"), &b3, &bb)?;
            let [c1, c2, c3] = self.cls_specs(i);
            let cc = t.conv(&format!("{p}cls1"), &c1, x)?;
            let cc = t.conv(&format!("{p}cls2"), &c2, &cc)?;
            let cc = t.conv(&format!("{p}cls_out"), &c3, &cc)?;
            out.push(cc);
            out.push(bb);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainScale {
    pub box_branch: [ConvParams; 3],
    pub cls_branch: [ConvParams; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainDetectHead {
    pub scales: Vec<PlainScale>,
}

fn run_branch(x: &Tensor4, b: &[ConvParams; 3]) -> Result<Tensor4> {
    let y = conv_act(x, &b[0], true)?;
    let y = conv_act(&y, &b[1], true)?;
    conv_act(&y, &b[2], false)
}

impl PlainDetectHead {
    pub fn build(cfg: &PlainDetectConfig, src: &mut ParamSource<'_>, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let mut scales = Vec::with_capacity(cfg.in_channels.len());
        for i in 0..cfg.in_channels.len() {
            let p = format!("{prefix}s{i}.");
            let [b1, b2, b3] = cfg.box_specs(i);
            let [c1, c2, c3] = cfg.cls_specs(i);
            let box_branch = [
                fetch(src, &format!("{p}box1"), &b1)?,
                fetch(src, &format!("{p}box2"), &b2)?,
                fetch(src, &format!("{p}box_out"), &b3)?,
            ];
            let cls_branch = [
                fetch(src, &format!("{p}cls1"), &c1)?,
                fetch(src, &format!("{p}cls2"), &c2)?,
                fetch(src, &format!("{p}cls_out"), &c3)?,
            ];
            scales.push(PlainScale { box_branch, cls_branch });
        }
        Ok(PlainDetectHead { scales })
    }

    pub fn forward(&self, xs: &[&Tensor4]) -> Result<Vec<HeadOutput>> {
        check_scales(self.scales.len(), xs.len())?;
        self.scales
            .iter()
            .zip(xs)
            .map(|(s, x)| {
                expect_channels("plain_detect", s.box_branch[0].c_in(), x)?;
                Ok(HeadOutput {
                    cls: run_branch(x, &s.cls_branch)?,
                    bbox: run_branch(x, &s.box_branch)?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::testutil::{random_tensor, seeded_source};
    use crate::tensor;

    fn params_of(specs: impl IntoIterator<Item = ConvSpec>) -> usize {
        specs.into_iter().map(|s| s.params()).sum()
    }

    #[test]
    fn gcdetect_shapes_per_scale() {
        let cfg = GcDetectConfig::new(vec![64, 128, 256], 6);
        let head = GcDetectHead::build(&cfg, &mut seeded_source(5), "").unwrap();
        let xs = [
            random_tensor([1, 64, 80, 80], 1),
            random_tensor([1, 128, 40, 40], 2),
            random_tensor([1, 256, 20, 20], 3),
        ];
        let outs = head.forward(&xs.iter().collect::<Vec<_>>()).unwrap();
        for (o, s) in outs.iter().zip([80, 40, 20]) {
            assert_eq!(o.cls.shape(), [1, 6, s, s]);
            assert_eq!(o.bbox.shape(), [1, 4, s, s]);
        }
    }

    #[test]
    fn single_group_matches_dense_oracle() {
        let mut cfg = GcDetectConfig::new(vec![8], 3);
        cfg.width = 16;
        cfg.groups = 1;
        let head = GcDetectHead::build(&cfg, &mut seeded_source(9), "").unwrap();
        let x = random_tensor([1, 8, 6, 6], 4);
        let out = &head.forward(&[&x]).unwrap()[0];
        let s = &head.scales[0];
        let act = |x: &Tensor4, p: &ConvParams| tensor::silu(&tensor::conv2d_reference(x, p).unwrap());
        let trunk = act(&act(&act(&x, &s.align), &s.gconv1), &s.gconv2);
        let cls = tensor::conv2d_reference(&trunk, &s.cls_out).unwrap();
        let bbox = tensor::conv2d_reference(&trunk, &s.box_out).unwrap();
        assert!(out.cls.max_abs_diff(&cls) < 1e-6);
        assert!(out.bbox.max_abs_diff(&bbox) < 1e-6);
    }

    #[test]
    fn grouped_trunk_conv_is_sixteen_times_smaller() {
        let g = ConvSpec::new(64, 64, 3).groups(16);
        let d = ConvSpec::new(64, 64, 3);
        assert_eq!(g.weight_len(), 2304);
        assert_eq!(d.weight_len(), 36864);
        assert_eq!(d.weight_len(), 16 * g.weight_len());
    }

    #[test]
    fn width_must_divide_groups() {
        let mut cfg = GcDetectConfig::new(vec![8], 3);
        cfg.width = 40;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(GcDetectHead::build(&cfg, &mut seeded_source(1), "").is_err());
    }

    #[test]
    fn cls_and_box_outputs_are_independent() {
        let cfg = GcDetectConfig::new(vec![16], 5);
        let mut head = GcDetectHead::build(&cfg, &mut seeded_source(2), "").unwrap();
        let x = random_tensor([1, 16, 4, 4], 7);
        let before = head.forward(&[&x]).unwrap().remove(0);
        head.scales[0].cls_out.weight_mut().iter_mut().for_each(|w| *w *= -3.0);
        let mid = head.forward(&[&x]).unwrap().remove(0);
        assert!(mid.bbox.bit_eq(&before.bbox));
        assert!(!mid.cls.bit_eq(&before.cls));
        head.scales[0].box_out.weight_mut().iter_mut().for_each(|w| *w += 1.0);
        let after = head.forward(&[&x]).unwrap().remove(0);
        assert!(after.cls.bit_eq(&mid.cls));
    }

    #[test]
    fn plain_head_has_more_params() {
        let ch = vec![32, 64, 128];
        let gc = GcDetectConfig::new(ch.clone(), 6);
        let plain = PlainDetectConfig::new(ch, 6);
        let gc_params: usize = (0..3)
            .map(|i| params_of([gc.align_spec(i), gc.gconv_spec(), gc.gconv_spec(), gc.cls_spec(), gc.box_spec()]))
            .sum();
        let plain_params: usize = (0..3)
            .map(|i| params_of(plain.box_specs(i).into_iter().chain(plain.cls_specs(i))))
            .sum();
        assert!(plain_params > gc_params, "{plain_params} <= {gc_params}");
    }

    #[test]
    fn scale_count_is_checked() {
        let cfg = PlainDetectConfig::new(vec![4, 4], 2);
        let head = PlainDetectHead::build(&cfg, &mut seeded_source(3), "").unwrap();
        let x = random_tensor([1, 4, 4, 4], 1);
        assert!(head.forward(&[&x]).is_err());
        assert_eq!(head.forward(&[&x, &x]).unwrap().len(), 2);
    }
}
