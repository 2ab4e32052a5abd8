//! Box regression geometry: inner (ratio-scaled) boxes, corner distances,
//! Inner-MPDIoU with its exact gradient, and IoU / CIoU baselines.

use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RATIO_MIN: f64 = 0.5;
pub const RATIO_MAX: f64 = 1.5;

/// Center/size box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCwh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCwh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCwh { cx, cy, w, h }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?} needs finite values and positive size")));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoxCwh::new(v[0], v[1], v[2], v[3])
    }

    pub fn corners(&self) -> CornerBox {
        CornerBox {
            l: self.cx - self.w / 2.0,
            t: self.cy - self.h / 2.0,
            r: self.cx + self.w / 2.0,
            b: self.cy + self.h / 2.0,
        }
    }
}

/// Edge box; `l <= r`, `t <= b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl CornerBox {
    pub fn area(&self) -> f64 {
        (self.r - self.l) * (self.b - self.t)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.l + self.r) / 2.0, (self.t + self.b) / 2.0)
    }
}

/// Which boxes the corner distances are measured between.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CornerMode {
    /// Between the ratio-scaled inner boxes.
    #[default]
    Inner,
    /// Between the unscaled boxes.
    Original,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossContext {
    pub img_w: f64,
    pub img_h: f64,
    pub ratio: f64,
    #[serde(default)]
    pub corners: CornerMode,
}

impl LossContext {
    pub fn new(img_w: f64, img_h: f64, ratio: f64) -> Self {
        LossContext {
            img_w,
            img_h,
            ratio,
            corners: CornerMode::Inner,
        }
    }

    pub fn with_corners(mut self, corners: CornerMode) -> Self {
        self.corners = corners;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.img_w > 0.0 && self.img_h > 0.0 && self.img_w.is_finite() && self.img_h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "image dims must be positive, got {}x{}",
                self.img_w, self.img_h
            )));
        }
        check_ratio(self.ratio)
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(RATIO_MIN..=RATIO_MAX).contains(&ratio) {
        return Err(Error::InvalidBox(format!(
            "ratio {ratio} outside [{RATIO_MIN}, {RATIO_MAX}]"
        )));
    }
    Ok(())
}

/// The box scaled about its center by `ratio`.
pub fn inner_box(b: &BoxCwh, ratio: f64) -> Result<CornerBox> {
    check_ratio(ratio)?;
    Ok(CornerBox {
        l: b.cx - b.w * ratio / 2.0,
        r: b.cx + b.w * ratio / 2.0,
        t: b.cy - b.h * ratio / 2.0,
        b: b.cy + b.h * ratio / 2.0,
    })
}

/// Squared top-left and bottom-right corner distances.
pub fn mpd_distances(a: &CornerBox, g: &CornerBox) -> (f64, f64) {
    let d1 = (g.l - a.l).powi(2) + (g.t - a.t).powi(2);
    let d2 = (g.r - a.r).powi(2) + (g.b - a.b).powi(2);
    (d1, d2)
}

/// Every intermediate term of one Inner-MPDIoU evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerMpdIouTerms {
    pub inter: f64,
    pub union: f64,
    pub d1_sq: f64,
    pub d2_sq: f64,
    pub value: f64,
}

pub fn inner_mpdiou_terms(pred: &BoxCwh, gt: &BoxCwh, ctx: &LossContext) -> Result<InnerMpdIouTerms> {
    pred.validate()?;
    gt.validate()?;
    ctx.validate()?;
    let t = eval_generic(pred.to_array().map(Scalar), gt, ctx);
    Ok(InnerMpdIouTerms {
        inter: t.inter.0,
        union: t.union.0,
        d1_sq: t.d1_sq.0,
        d2_sq: t.d2_sq.0,
        value: t.value.0,
    })
}

pub fn inner_mpdiou(pred: &BoxCwh, gt: &BoxCwh, ctx: &LossContext) -> Result<f64> {
    Ok(inner_mpdiou_terms(pred, gt, ctx)?.value)
}

/// `1 - inner_mpdiou` and its gradient with respect to `(cx, cy, w, h)` of `pred`.
/// Where the overlap term has a kink the right-hand derivative along each
/// coordinate is returned, except at `pred == gt`, the global minimum, where
/// the gradient is zero.
pub fn inner_mpdiou_loss_grad(pred: &BoxCwh, gt: &BoxCwh, ctx: &LossContext) -> Result<(f64, [f64; 4])> {
    pred.validate()?;
    gt.validate()?;
    ctx.validate()?;
    if pred == gt {
        return Ok((0.0, [0.0; 4]));
    }
    let p = pred.to_array();
    let vars: [Dual; 4] = std::array::from_fn(|k| Dual::var(p[k], k));
    let v = eval_generic(vars, gt, ctx).value;
    Ok((1.0 - v.v, v.d.map(|d| -d)))
}

/// Plain intersection over union of two boxes.
pub fn iou(a: &BoxCwh, b: &BoxCwh) -> f64 {
    let (pa, pb) = (a.corners(), b.corners());
    let iw = (pa.r.min(pb.r) - pa.l.max(pb.l)).max(0.0);
    let ih = (pa.b.min(pb.b) - pa.t.max(pb.t)).max(0.0);
    let inter = iw * ih;
    inter / (pa.area() + pb.area() - inter)
}

/// Complete IoU: IoU minus the normalized center distance and an aspect term
/// `alpha * v`, with `alpha = 0` when `v = 0`.
pub fn ciou(pred: &BoxCwh, gt: &BoxCwh) -> f64 {
    let i = iou(pred, gt);
    let (p, g) = (pred.corners(), gt.corners());
    let cw = p.r.max(g.r) - p.l.min(g.l);
    let ch = p.b.max(g.b) - p.t.min(g.t);
    let rho2 = (pred.cx - gt.cx).powi(2) + (pred.cy - gt.cy).powi(2);
    let c2 = cw * cw + ch * ch;
    let v = 4.0 / std::f64::consts::PI.powi(2) * ((gt.w / gt.h).atan() - (pred.w / pred.h).atan()).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / ((1.0 - i) + v) };
    i - rho2 / c2 - alpha * v
}

/// Distance from the nearest point where the overlap term switches branch.
/// Finite differences are only meaningful when this exceeds the step.
pub fn kink_distance(pred: &BoxCwh, gt: &BoxCwh, ratio: f64) -> Result<f64> {
    let p = inner_box(pred, ratio)?;
    let g = inner_box(gt, ratio)?;
    let iw = p.r.min(g.r) - p.l.max(g.l);
    let ih = p.b.min(g.b) - p.t.max(g.t);
    let mut d = [(p.l - g.l).abs(), (p.r - g.r).abs(), (p.t - g.t).abs(), (p.b - g.b).abs(), iw.abs(), ih.abs()];
    // With no overlap the other axis no longer matters.
    if iw < 0.0 {
        d[2] = f64::INFINITY;
        d[3] = f64::INFINITY;
        d[5] = f64::INFINITY;
    } else if ih < 0.0 {
        d[0] = f64::INFINITY;
        d[1] = f64::INFINITY;
        d[4] = f64::INFINITY;
    }
    Ok(d.into_iter().fold(f64::INFINITY, f64::min))
}

/// Forward-mode dual over the four prediction coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; 4];
        d[k] = 1.0;
        Dual { v, d }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Scalar(f64);

/// Arithmetic needed by the loss, with one-sided max/min at ties.
trait Num: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self> {
    fn c(v: f64) -> Self;
    fn max(self, o: Self) -> Self;
    fn min(self, o: Self) -> Self;
}

impl Num for Scalar {
    fn c(v: f64) -> Self {
        Scalar(v)
    }
    fn max(self, o: Self) -> Self {
        Scalar(self.0.max(o.0))
    }
    fn min(self, o: Self) -> Self {
        Scalar(self.0.min(o.0))
    }
}

macro_rules! scalar_op {
    ($tr:ident, $f:ident, $op:tt) => {
        impl $tr for Scalar {
            type Output = Scalar;
            fn $f(self, o: Scalar) -> Scalar {
                Scalar(self.0 $op o.0)
            }
        }
    };
}
scalar_op!(Add, add, +);
scalar_op!(Sub, sub, -);
scalar_op!(Mul, mul, *);
scalar_op!(Div, div, /);

impl Neg for Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        Scalar(-self.0)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: std::array::from_fn(|k| self.d[k] + o.d[k]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: std::array::from_fn(|k| self.d[k] - o.d[k]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: std::array::from_fn(|k| self.d[k] * o.v + self.v * o.d[k]),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual {
            v: q,
            d: std::array::from_fn(|k| (self.d[k] - q * o.d[k]) / o.v),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Num for Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: [0.0; 4] }
    }

    // At a tie the right derivative along each coordinate is the larger slope.
    fn max(self, o: Self) -> Self {
        if self.v > o.v {
            self
        } else if o.v > self.v {
            o
        } else {
            Dual {
                v: self.v,
                d: std::array::from_fn(|k| self.d[k].max(o.d[k])),
            }
        }
    }

    fn min(self, o: Self) -> Self {
        if self.v < o.v {
            self
        } else if o.v < self.v {
            o
        } else {
            Dual {
                v: self.v,
                d: std::array::from_fn(|k| self.d[k].min(o.d[k])),
            }
        }
    }
}

struct Terms<T> {
    inter: T,
    union: T,
    d1_sq: T,
    d2_sq: T,
    value: T,
}

fn edges<T: Num>(cx: T, cy: T, w: T, h: T, s: f64) -> [T; 4] {
    let half = T::c(s / 2.0);
    [cx - w * half, cy - h * half, cx + w * half, cy + h * half]
}

fn eval_generic<T: Num>(p: [T; 4], gt: &BoxCwh, ctx: &LossContext) -> Terms<T> {
    let [cx, cy, w, h] = p;
    let r = ctx.ratio;
    let [pl, pt, pr, pb] = edges(cx, cy, w, h, r);
    let [gl, gt_, gr, gb] = edges(T::c(gt.cx), T::c(gt.cy), T::c(gt.w), T::c(gt.h), r);
    let zero = T::c(0.0);
    let iw = zero.max(pr.min(gr) - pl.max(gl));
    let ih = zero.max(pb.min(gb) - pt.max(gt_));
    let inter = iw * ih;
    let r2 = T::c(r * r);
    let union = T::c(gt.w * gt.h) * r2 + w * h * r2 - inter;
    let ([al, at, ar, ab], [bl, bt, br, bb]) = match ctx.corners {
        CornerMode::Inner => ([pl, pt, pr, pb], [gl, gt_, gr, gb]),
        CornerMode::Original => (
            edges(cx, cy, w, h, 1.0),
            edges(T::c(gt.cx), T::c(gt.cy), T::c(gt.w), T::c(gt.h), 1.0),
        ),
    };
    let sq = |x: T| x * x;
    let d1_sq = sq(bl - al) + sq(bt - at);
    let d2_sq = sq(br - ar) + sq(bb - ab);
    let diag = T::c(ctx.img_h * ctx.img_h + ctx.img_w * ctx.img_w);
    let value = inter / union - d1_sq / diag - d2_sq / diag;
    Terms {
        inter,
        union,
        d1_sq,
        d2_sq,
        value,
    }
}

/// Hit-count area of `inside` over `domain` using a jittered `n x n` grid.
pub fn monte_carlo_area(domain: &CornerBox, n: usize, seed: u64, inside: impl Fn(f64, f64) -> bool) -> f64 {
    let (w, h) = (domain.r - domain.l, domain.b - domain.t);
    if n == 0 || w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let mut rng = crate::graph::Rng::new(seed);
    let (cw, ch) = (w / n as f64, h / n as f64);
    let unit = 1.0 / 4_294_967_296.0;
    let mut hits = 0u64;
    for i in 0..n {
        let y0 = domain.t + i as f64 * ch;
        for j in 0..n {
            let bits = rng.next_u64();
            let x = domain.l + (j as f64 + (bits >> 32) as f64 * unit) * cw;
            let y = y0 + (bits & 0xffff_ffff) as f64 * unit * ch;
            hits += inside(x, y) as u64;
        }
    }
    hits as f64 / (n * n) as f64 * w * h
}

fn contains(b: &CornerBox, x: f64, y: f64) -> bool {
    x >= b.l && x < b.r && y >= b.t && y < b.b
}

/// Independent estimate of the inner boxes' intersection and union areas,
/// `n * n` samples each. Membership is tested point by point; the closed-form
/// overlap only narrows where intersection samples are drawn (inflated 2x and
/// clipped to the prediction, or the whole prediction when it is empty).
pub fn monte_carlo_inter_union(pred: &BoxCwh, gt: &BoxCwh, ratio: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    let p = inner_box(pred, ratio)?;
    let g = inner_box(gt, ratio)?;
    let cand = CornerBox {
        l: p.l.max(g.l),
        t: p.t.max(g.t),
        r: p.r.min(g.r),
        b: p.b.min(g.b),
    };
    let inter_domain = if cand.r > cand.l && cand.b > cand.t {
        let (cx, cy) = cand.center();
        let (hw, hh) = (cand.r - cand.l, cand.b - cand.t);
        CornerBox {
            l: (cx - hw).max(p.l),
            t: (cy - hh).max(p.t),
            r: (cx + hw).min(p.r),
            b: (cy + hh).min(p.b),
        }
    } else {
        p
    };
    let hull = CornerBox {
        l: p.l.min(g.l),
        t: p.t.min(g.t),
        r: p.r.max(g.r),
        b: p.b.max(g.b),
    };
    let inter = monte_carlo_area(&inter_domain, n, seed, |x, y| contains(&p, x, y) && contains(&g, x, y));
    let union = monte_carlo_area(&hull, n, seed ^ 0x9e37_79b9_7f4a_7c15, |x, y| {
        contains(&p, x, y) || contains(&g, x, y)
    });
    Ok((inter, union))
}

/// Random pair inside a square image of side `size`, sizes 5..60% of it.
pub fn random_pair_in(rng: &mut crate::graph::Rng, size: f64) -> (BoxCwh, BoxCwh) {
    let one = |rng: &mut crate::graph::Rng| {
        let w = rng.uniform(0.05, 0.6) * size;
        let h = rng.uniform(0.05, 0.6) * size;
        BoxCwh::new(rng.uniform(w / 2.0, size - w / 2.0), rng.uniform(h / 2.0, size - h / 2.0), w, h)
    };
    let a = one(rng);
    (a, one(rng))
}

/// Gradient oracle comparison result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub requested: usize,
    pub checked: usize,
    /// Samples skipped because a kink lay within reach of the finite-difference step.
    pub rejected: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradcheckSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSample {
    pub pred: BoxCwh,
    pub gt: BoxCwh,
    pub ctx: LossContext,
    pub analytic: [f64; 4],
    pub numeric: [f64; 4],
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Random box pair and context for gradient checking: ground truth inside a
/// 100-400 px image, prediction a perturbed copy that may or may not overlap.
pub fn random_case(rng: &mut crate::graph::Rng) -> (BoxCwh, BoxCwh, LossContext) {
    let img_w = rng.uniform(100.0, 400.0);
    let img_h = rng.uniform(100.0, 400.0);
    let gw = rng.uniform(4.0, img_w / 3.0);
    let gh = rng.uniform(4.0, img_h / 3.0);
    let gt = BoxCwh::new(rng.uniform(gw, img_w - gw), rng.uniform(gh, img_h - gh), gw, gh);
    let pred = BoxCwh::new(
        gt.cx + rng.uniform(-1.0, 1.0) * gw,
        gt.cy + rng.uniform(-1.0, 1.0) * gh,
        gw * rng.uniform(0.5, 2.0),
        gh * rng.uniform(0.5, 2.0),
    );
    let ctx = LossContext::new(img_w, img_h, rng.uniform(RATIO_MIN, RATIO_MAX));
    (pred, gt, ctx)
}

/// Compares `grad` against central differences of the loss with step `eps`
/// on `samples` random differentiable cases drawn from `seed`.
pub fn gradcheck(
    samples: usize,
    eps: f64,
    seed: u64,
    grad: impl Fn(&BoxCwh, &BoxCwh, &LossContext) -> Result<(f64, [f64; 4])>,
) -> Result<GradcheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut rng = crate::graph::Rng::new(seed);
    let mut report = GradcheckReport {
        requested: samples,
        checked: 0,
        rejected: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let loss = |p: [f64; 4], gt: &BoxCwh, ctx: &LossContext| -> Result<f64> {
        Ok(1.0 - inner_mpdiou(&BoxCwh::from_array(p), gt, ctx)?)
    };
    // Margin well beyond how far an edge moves under one step.
    let margin = 1e3 * eps;
    while report.checked < samples {
        let (pred, gt, ctx) = random_case(&mut rng);
        if kink_distance(&pred, &gt, ctx.ratio)? <= margin {
            report.rejected += 1;
            continue;
        }
        let (_, analytic) = grad(&pred, &gt, &ctx)?;
        let p = pred.to_array();
        let mut numeric = [0.0; 4];
        for k in 0..4 {
            let (mut hi, mut lo) = (p, p);
            hi[k] += eps;
            lo[k] -= eps;
            numeric[k] = (loss(hi, &gt, &ctx)? - loss(lo, &gt, &ctx)?) / (2.0 * eps);
        }
        let err = (0..4).map(|k| rel_err(analytic[k], numeric[k])).fold(0.0, f64::max);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some(GradcheckSample {
                pred,
                gt,
                ctx,
                analytic,
                numeric,
            });
        }
        report.checked += 1;
    }
    Ok(report)
}
