//! Dense NCHW tensors and the handful of primitives the detector blocks need.
//!
//! Every operation is a pure function of its inputs. Convolution accumulates
//! in `f32` in a fixed order (input channel, then kernel row, then kernel
//! column, bias last), so the plane-parallel path and the naive reference
//! produce bit-identical results regardless of thread count.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense `(n, c, h, w)` feature map stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        check_dims(shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Dim {
                op: "tensor",
                dim: "data length",
                expected: len,
                actual: data.len(),
            });
        }
        let [n, c, h, w] = shape;
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Result<Self> {
        check_dims(shape)?;
        Self::new(shape, vec![value; shape.iter().product()])
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` for every cell.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        check_dims(shape)?;
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.h * self.w;
        let start = (n * self.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn scale(&self, alpha: f32) -> Tensor4 {
        self.map(|v| v * alpha)
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f32 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor4) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_dims(shape: [usize; 4]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("all dims must be >= 1, got {shape:?}")));
    }
    Ok(())
}

/// Output extent of a sliding window, or `None` if the window does not fit.
pub fn window_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || k == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Convolution weights `(c_out, c_in / groups, k_h, k_w)` plus geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    weight: Vec<f32>,
    c_out: usize,
    c_in_per_group: usize,
    kernel: (usize, usize),
    bias: Option<Vec<f32>>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
}

impl ConvParams {
    /// `shape` is the weight shape `[c_out, c_in / groups, k_h, k_w]`.
    pub fn new(
        weight: Vec<f32>,
        shape: [usize; 4],
        bias: Option<Vec<f32>>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let [c_out, c_in_per_group, kh, kw] = shape;
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("conv weight shape must be positive, got {shape:?}")));
        }
        if groups == 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide c_out {c_out}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let expected = c_out * c_in_per_group * kh * kw;
        if weight.len() != expected {
            return Err(Error::Dim {
                op: "conv2d",
                dim: "weight length",
                expected,
                actual: weight.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(Error::Dim {
                    op: "conv2d",
                    dim: "bias length",
                    expected: c_out,
                    actual: b.len(),
                });
            }
        }
        Ok(ConvParams {
            weight,
            c_out,
            c_in_per_group,
            kernel: (kh, kw),
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// Square-kernel convenience constructor with symmetric stride/padding.
    pub fn square(
        weight: Vec<f32>,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: Option<Vec<f32>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 {
            return Err(Error::Config(format!("groups {groups} must divide c_in {c_in}")));
        }
        Self::new(weight, [c_out, c_in / groups, k, k], bias, (stride, stride), (pad, pad), groups)
    }

    /// Parameters filled by `f(index)` over the weight buffer; bias zeroed.
    pub fn from_fn(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        f: impl FnMut(usize) -> f32,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 {
            return Err(Error::Config(format!("groups {groups} must divide c_in {c_in}")));
        }
        let len = c_out * (c_in / groups) * k * k;
        let weight = (0..len).map(f).collect();
        Self::square(weight, c_in, c_out, k, Some(vec![0.0; c_out]), stride, pad, groups)
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, groups: usize) -> Result<Self> {
        Self::from_fn(c_in, c_out, k, stride, pad, groups, |_| 0.0)
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f32] {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f32]> {
        self.bias.as_deref_mut()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in_per_group, self.kernel.0, self.kernel.1]
    }

    pub fn c_in(&self) -> usize {
        self.c_in_per_group * self.groups
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn padding(&self) -> (usize, usize) {
        self.padding
    }

    /// Weight plus bias element count.
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Output shape for an input of `shape`, validating the channel contract.
    pub fn output_shape(&self, shape: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = shape;
        if c != self.c_in() {
            return Err(Error::Dim {
                op: "conv2d",
                dim: "input channels",
                expected: self.c_in(),
                actual: c,
            });
        }
        let ho = window_out(h, self.kernel.0, self.stride.0, self.padding.0).ok_or_else(|| {
            Error::Shape(format!(
                "conv2d: padded height {} smaller than kernel height {}",
                h + 2 * self.padding.0,
                self.kernel.0
            ))
        })?;
        let wo = window_out(w, self.kernel.1, self.stride.1, self.padding.1).ok_or_else(|| {
            Error::Shape(format!(
                "conv2d: padded width {} smaller than kernel width {}",
                w + 2 * self.padding.1,
                self.kernel.1
            ))
        })?;
        Ok([n, self.c_out, ho, wo])
    }
}

/// Grouped 2-D convolution, parallel over output planes.
pub fn conv2d(x: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    let out_shape = p.output_shape(x.shape())?;
    let [_, c_out, ho, wo] = out_shape;
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let cin_g = p.c_in_per_group;
    let cout_g = c_out / p.groups;
    let (h, w) = (x.h, x.w);

    // For each kernel column, the contiguous range of output columns whose
    // tap lands inside the input row.
    let col_ranges: Vec<(usize, usize)> = (0..kw)
        .map(|kx| {
            let lo = (0..wo).find(|&ox| ox * sw + kx >= pw).unwrap_or(wo);
            let hi = (0..wo)
                .rev()
                .find(|&ox| ox * sw + kx >= pw && ox * sw + kx - pw < w)
                .map_or(lo, |v| v + 1);
            (lo, hi.max(lo))
        })
        .collect();

    let mut out = vec![0.0f32; out_shape.iter().product()];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(idx, plane)| {
        let (b, oc) = (idx / c_out, idx % c_out);
        let g = oc / cout_g;
        for icg in 0..cin_g {
            let input = x.plane(b, g * cin_g + icg);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = p.weight[((oc * cin_g + icg) * kh + ky) * kw + kx];
                    let (lo, hi) = col_ranges[kx];
                    for oy in 0..ho {
                        let iy = oy * sh + ky;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        let row = &input[(iy - ph) * w..(iy - ph + 1) * w];
                        let dst = &mut plane[oy * wo..(oy + 1) * wo];
                        for ox in lo..hi {
                            dst[ox] += wv * row[ox * sw + kx - pw];
                        }
                    }
                }
            }
        }
        if let Some(bias) = &p.bias {
            let bv = bias[oc];
            for v in plane.iter_mut() {
                *v += bv;
            }
        }
    });
    Tensor4::new(out_shape, out)
}

/// Naive direct convolution: one dot product per output cell.
///
/// Summation order matches [`conv2d`], so the two agree bit-for-bit.
pub fn conv2d_reference(x: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    let out_shape = p.output_shape(x.shape())?;
    let [n, c_out, ho, wo] = out_shape;
    let (kh, kw) = p.kernel;
    let cin_g = p.c_in_per_group;
    let cout_g = c_out / p.groups;
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride.0 + ky) as isize - p.padding.0 as isize;
                                let ix = (ox * p.stride.1 + kx) as isize - p.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy as usize >= x.h || ix as usize >= x.w {
                                    continue;
                                }
                                let wv = p.weight[((oc * cin_g + icg) * kh + ky) * kw + kx];
                                acc += wv * x.at(b, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    if let Some(bias) = &p.bias {
                        acc += bias[oc];
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor4::new(out_shape, out)
}

/// Max pooling with `-inf` padding.
pub fn maxpool2d(x: &Tensor4, k: usize, stride: usize, padding: usize) -> Result<Tensor4> {
    if padding >= k {
        return Err(Error::Config(format!(
            "maxpool2d: padding {padding} must be smaller than window {k}"
        )));
    }
    let (ho, wo) = match (window_out(x.h, k, stride, padding), window_out(x.w, k, stride, padding)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::Shape(format!(
                "maxpool2d: window {k} larger than padded input {}x{}",
                x.h + 2 * padding,
                x.w + 2 * padding
            )))
        }
    };
    let out_shape = [x.n, x.c, ho, wo];
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for b in 0..x.n {
        for c in 0..x.c {
            let plane = x.plane(b, c);
            for oy in 0..ho {
                let y0 = (oy * stride) as isize - padding as isize;
                for ox in 0..wo {
                    let x0 = (ox * stride) as isize - padding as isize;
                    let mut m = f32::NEG_INFINITY;
                    for y in y0.max(0)..(y0 + k as isize).min(x.h as isize) {
                        for xx in x0.max(0)..(x0 + k as isize).min(x.w as isize) {
                            m = m.max(plane[y as usize * x.w + xx as usize]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor4::new(out_shape, out)
}

pub fn silu_scalar(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

pub fn silu(x: &Tensor4) -> Tensor4 {
    x.map(silu_scalar)
}

pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat_channels: no inputs".into()))?;
    for p in &parts[1..] {
        for (dim, a, b) in [("batch", first.n, p.n), ("height", first.h, p.h), ("width", first.w, p.w)] {
            if a != b {
                return Err(Error::Dim {
                    op: "concat_channels",
                    dim,
                    expected: a,
                    actual: b,
                });
            }
        }
    }
    let c: usize = parts.iter().map(|p| p.c).sum();
    let hw = first.h * first.w;
    let mut data = Vec::with_capacity(first.n * c * hw);
    for b in 0..first.n {
        for p in parts {
            let chunk = p.c * hw;
            data.extend_from_slice(&p.data[b * chunk..(b + 1) * chunk]);
        }
    }
    Tensor4::new([first.n, c, first.h, first.w], data)
}

pub fn split_channels(x: &Tensor4, sizes: &[usize]) -> Result<Vec<Tensor4>> {
    let total: usize = sizes.iter().sum();
    if total != x.c {
        return Err(Error::Dim {
            op: "split_channels",
            dim: "sum of sizes",
            expected: x.c,
            actual: total,
        });
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config("split_channels: sizes must be >= 1".into()));
    }
    let hw = x.h * x.w;
    let mut offset = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let mut data = Vec::with_capacity(x.n * s * hw);
        for b in 0..x.n {
            let start = (b * x.c + offset) * hw;
            data.extend_from_slice(&x.data[start..start + s * hw]);
        }
        parts.push(Tensor4::new([x.n, s, x.h, x.w], data)?);
        offset += s;
    }
    Ok(parts)
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    for (dim, x, y) in [
        ("batch", a.n, b.n),
        ("channels", a.c, b.c),
        ("height", a.h, b.h),
        ("width", a.w, b.w),
    ] {
        if x != y {
            return Err(Error::Dim {
                op: "add",
                dim,
                expected: x,
                actual: y,
            });
        }
    }
    Ok(Tensor4 {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        ..*a
    })
}

pub fn upsample_nearest2x(x: &Tensor4) -> Tensor4 {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut data = Vec::with_capacity(x.n * x.c * h2 * w2);
    for b in 0..x.n {
        for c in 0..x.c {
            let plane = x.plane(b, c);
            for y in 0..h2 {
                let row = &plane[(y / 2) * x.w..(y / 2 + 1) * x.w];
                for xx in 0..w2 {
                    data.push(row[xx / 2]);
                }
            }
        }
    }
    Tensor4 {
        n: x.n,
        c: x.c,
        h: h2,
        w: w2,
        data,
    }
}

const T4F0_MAGIC: &[u8; 4] = b"T4F0";

/// Writes `x` as a T4F0 record: magic, four little-endian `u32` dims, then
/// little-endian `f32` payload.
pub fn write_t4f0<W: Write>(x: &Tensor4, mut out: W) -> Result<()> {
    out.write_all(T4F0_MAGIC)?;
    for d in x.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dim {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(x.data.len() * 4);
    for v in &x.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_t4f0<R: Read>(mut input: R) -> Result<Tensor4> {
    let mut header = [0u8; 20];
    input
        .read_exact(&mut header)
        .map_err(|e| Error::Corrupt(format!("T4F0 header: {e}")))?;
    if &header[..4] != T4F0_MAGIC {
        return Err(Error::Corrupt("bad T4F0 magic".into()));
    }
    let mut shape = [0usize; 4];
    for (i, d) in shape.iter_mut().enumerate() {
        let b = &header[4 + 4 * i..8 + 4 * i];
        *d = u32::from_le_bytes(b.try_into().unwrap()) as usize;
    }
    check_dims(shape).map_err(|e| Error::Corrupt(e.to_string()))?;
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * 4];
    input
        .read_exact(&mut payload)
        .map_err(|e| Error::Corrupt(format!("T4F0 payload truncated: {e}")))?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes after T4F0 payload", rest.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor4::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: &[f32]) -> Tensor4 {
        Tensor4::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_kernel_conv() {
        let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
        let p = ConvParams::square(vec![2.0], 1, 1, 1, Some(vec![0.0]), 1, 0, 1).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn identity_kernel_with_padding() {
        let x = t([1, 1, 3, 3], &[0.5, -1., 2., 3., 4., -5., 6., 7.25, 8.]);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let p = ConvParams::square(w, 1, 1, 3, None, 1, 1, 1).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn grouped_one_by_one() {
        let x = t([1, 2, 2, 2], &[1., 1., 1., 1., 2., 2., 2., 2.]);
        let p = ConvParams::square(vec![3., 5.], 2, 2, 1, Some(vec![0., 0.]), 1, 0, 2).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), &[3., 3., 3., 3., 10., 10., 10., 10.]);
    }

    #[test]
    fn conv_errors_name_dimension() {
        let x = Tensor4::zeros([1, 3, 4, 4]).unwrap();
        let p = ConvParams::zeros(4, 4, 3, 1, 1, 1).unwrap();
        match conv2d(&x, &p) {
            Err(Error::Dim { dim, expected: 4, actual: 3, .. }) => assert_eq!(dim, "input channels"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ConvParams::zeros(6, 4, 3, 1, 1, 4).is_err());
        let small = Tensor4::zeros([1, 4, 2, 2]).unwrap();
        let p = ConvParams::zeros(4, 4, 5, 1, 0, 1).unwrap();
        assert!(matches!(conv2d(&small, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_examples() {
        let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(maxpool2d(&x, 2, 2, 0).unwrap().data(), &[4.]);
        let x = t([1, 1, 2, 2], &[1., 5., 2., 3.]);
        let y = maxpool2d(&x, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert_eq!(y.data(), &[1., 5., 5., 2., 5., 5., 2., 3., 3.]);
        let c = Tensor4::filled([2, 3, 5, 5], 1.5).unwrap();
        let y = maxpool2d(&c, 5, 1, 2).unwrap();
        assert_eq!(y, c);
        assert!(maxpool2d(&x, 5, 1, 1).is_err());
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(1.0) - 0.731_058_6).abs() < 1e-6);
        let v = silu_scalar(-20.0);
        assert!(v < 0.0 && v.abs() < 1e-7);
    }

    #[test]
    fn concat_and_split() {
        let a = t([1, 2, 1, 1], &[1., 2.]);
        let b = t([1, 1, 1, 1], &[3.]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap().data(), &[1., 2., 3.]);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let bad = t([1, 1, 2, 1], &[0., 0.]);
        assert!(concat_channels(&[&a, &bad]).is_err());

        let x = Tensor4::from_fn([2, 4, 2, 3], |n, c, y, x| (n * 100 + c * 10 + y * 3 + x) as f32).unwrap();
        let parts = split_channels(&x, &[2, 2]).unwrap();
        assert_eq!(parts[0].at(1, 1, 1, 2), x.at(1, 1, 1, 2));
        assert_eq!(parts[1].at(1, 0, 0, 0), x.at(1, 2, 0, 0));
        assert_eq!(split_channels(&x, &[4]).unwrap()[0], x);
        assert!(split_channels(&x, &[1, 2]).is_err());
        let parts = split_channels(&x, &[1, 3]).unwrap();
        assert!(concat_channels(&[&parts[0], &parts[1]]).unwrap().bit_eq(&x));
    }

    #[test]
    fn add_examples() {
        let a = t([1, 1, 1, 2], &[1., 2.]);
        let b = t([1, 1, 1, 2], &[3., 4.]);
        assert_eq!(add(&a, &b).unwrap().data(), &[4., 6.]);
        assert_eq!(add(&a, &Tensor4::zeros(a.shape()).unwrap()).unwrap(), a);
        assert!(add(&a, &a.scale(-1.0)).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(add(&a, &Tensor4::zeros([1, 2, 1, 2]).unwrap()).is_err());
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(upsample_nearest2x(&t([1, 1, 1, 1], &[5.])).data(), &[5.; 4]);
        let y = upsample_nearest2x(&t([1, 1, 2, 2], &[1., 2., 3., 4.]));
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn t4f0_round_trip_and_corruption() {
        let x = Tensor4::from_fn([1, 2, 3, 1], |_, c, y, _| c as f32 - y as f32 * 0.25).unwrap();
        let mut buf = Vec::new();
        write_t4f0(&x, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"T4F0");
        assert_eq!(buf.len(), 20 + 6 * 4);
        assert!(read_t4f0(&buf[..]).unwrap().bit_eq(&x));
        assert!(matches!(read_t4f0(&buf[..buf.len() - 1]), Err(Error::Corrupt(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_t4f0(&bad[..]), Err(Error::Corrupt(_))));
    }
}
