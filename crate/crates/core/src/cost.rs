//! Static parameter and multiply-accumulate accounting.
//!
//! Conv params are `c_out * (c_in / groups) * k * k + c_out`; MACs are the
//! weight count times output pixels times batch. Pooling, activations,
//! concat, add and upsampling cost nothing. FLOPs are `2 * MACs`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::{check_divisible, ConvSpec, Tracer};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Node, NodeOp};
use crate::tensor::window_out;

pub const FLOPS_CONVENTION: &str = "FLOPs = 2 x MACs; elementwise ops excluded";

pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub output_shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub node: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    pub output_shapes: Vec<Shape>,
    pub convs: Vec<ConvCost>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_shape: Shape,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub gflops: f64,
    pub convention: String,
}

/// Cost of one convolution applied to `input`.
pub fn conv_cost(name: &str, spec: &ConvSpec, input: Shape) -> Result<ConvCost> {
    spec.validate()?;
    let out = spec.output_shape(input)?;
    let weights = spec.weight_len() as u64;
    Ok(ConvCost {
        name: name.to_string(),
        params: spec.params() as u64,
        macs: weights * (out[0] * out[2] * out[3]) as u64,
        output_shape: out,
    })
}

/// Shape propagation that records every conv it passes.
#[derive(Default)]
pub struct ShapeTracer {
    pub convs: Vec<ConvCost>,
}

impl Tracer for ShapeTracer {
    type V = Shape;

    fn conv(&mut self, name: &str, spec: &ConvSpec, x: &Shape) -> Result<Shape> {
        let c = conv_cost(name, spec, *x)?;
        let out = c.output_shape;
        self.convs.push(c);
        Ok(out)
    }

    fn maxpool(&mut self, x: &Shape, k: usize, stride: usize, pad: usize) -> Result<Shape> {
        if k == 0 || stride == 0 || pad >= k {
            return Err(Error::Config(format!("maxpool k={k} stride={stride} pad={pad}")));
        }
        match (window_out(x[2], k, stride, pad), window_out(x[3], k, stride, pad)) {
            (Some(h), Some(w)) => Ok([x[0], x[1], h, w]),
            _ => Err(Error::Shape(format!("pool window {k} does not fit {}x{}", x[2], x[3]))),
        }
    }

    fn upsample(&mut self, x: &Shape) -> Result<Shape> {
        Ok([x[0], x[1], 2 * x[2], 2 * x[3]])
    }

    fn concat(&mut self, parts: &[Shape]) -> Result<Shape> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        for p in parts {
            if (p[0], p[2], p[3]) != (first[0], first[2], first[3]) {
                return Err(Error::Shape(format!("concat parts {first:?} and {p:?} disagree")));
            }
        }
        Ok([first[0], parts.iter().map(|p| p[1]).sum(), first[2], first[3]])
    }

    fn split(&mut self, x: &Shape, sizes: &[usize]) -> Result<Vec<Shape>> {
        if sizes.iter().sum::<usize>() != x[1] || sizes.contains(&0) {
            return Err(Error::Dim {
                op: "split_channels",
                dim: "sum of sizes",
                expected: x[1],
                actual: sizes.iter().sum(),
            });
        }
        Ok(sizes.iter().map(|&c| [x[0], c, x[2], x[3]]).collect())
    }

    fn add(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        if a != b {
            return Err(Error::Shape(format!("add operands {a:?} and {b:?} differ")));
        }
        Ok(*a)
    }

    fn require_divisible(&mut self, x: &Shape, factor: usize) -> Result<()> {
        check_divisible(x[2], x[3], factor)
    }
}

/// Cost of one node given the shapes of its inputs (the graph input shape for `input` nodes).
pub fn layer_cost(node: &Node, inputs: &[Shape]) -> Result<LayerCost> {
    let mut t = ShapeTracer::default();
    let outs = node.op.trace(&mut t, &node.id, inputs).map_err(|e| e.in_node(&node.id))?;
    Ok(LayerCost {
        node: node.id.clone(),
        kind: node.op.kind().to_string(),
        params: t.convs.iter().map(|c| c.params).sum(),
        macs: t.convs.iter().map(|c| c.macs).sum(),
        output_shapes: outs,
        convs: t.convs,
    })
}

/// Propagates shapes in topological order and totals every node's cost.
pub fn graph_cost(g: &ModelGraph, input_shape: Shape) -> Result<CostReport> {
    if input_shape[1] != g.meta().input_shape[1] {
        return Err(Error::Dim {
            op: "graph_cost",
            dim: "input channels",
            expected: g.meta().input_shape[1],
            actual: input_shape[1],
        });
    }
    let mut shapes: Vec<Vec<Shape>> = vec![Vec::new(); g.nodes().len()];
    let mut layers = Vec::with_capacity(g.nodes().len());
    for &i in g.topo_order() {
        let n = &g.nodes()[i];
        let ins: Vec<Shape> = if matches!(n.op, NodeOp::Input) {
            vec![input_shape]
        } else {
            n.inputs.iter().map(|p| shapes[g.node_index(p).expect("validated")][0]).collect()
        };
        let l = layer_cost(n, &ins)?;
        shapes[i] = l.output_shapes.clone();
        layers.push(l);
    }
    Ok(CostReport::from_layers(input_shape, layers))
}

impl CostReport {
    pub fn from_layers(input_shape: Shape, layers: Vec<LayerCost>) -> Self {
        let total_params = layers.iter().map(|l| l.params).sum();
        let total_macs: u64 = layers.iter().map(|l| l.macs).sum();
        CostReport {
            input_shape,
            layers,
            total_params,
            total_macs,
            gflops: 2.0 * total_macs as f64 / 1e9,
            convention: FLOPS_CONVENTION.to_string(),
        }
    }

    pub fn layer(&self, node: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.node == node)
    }

    /// Sums params and MACs over layers whose node id satisfies `pick`.
    pub fn subtotal(&self, pick: impl Fn(&str) -> bool) -> (u64, u64) {
        self.layers
            .iter()
            .filter(|l| pick(&l.node))
            .fold((0, 0), |(p, m), l| (p + l.params, m + l.macs))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: CostReport = serde_json::from_str(text)?;
        let expect = CostReport::from_layers(r.input_shape, r.layers.clone());
        if expect.total_params != r.total_params || expect.total_macs != r.total_macs {
            return Err(Error::Corrupt("report totals disagree with its layers".into()));
        }
        Ok(r)
    }

    pub fn to_table(&self) -> String {
        let s = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let mut rows = vec![["node".to_string(), "kind".into(), "params".into(), "MACs".into(), "output".into()]];
        for l in &self.layers {
            let outs: Vec<String> = l.output_shapes.iter().map(|o| s(o)).collect();
            rows.push([l.node.clone(), l.kind.clone(), l.params.to_string(), l.macs.to_string(), outs.join(",")]);
        }
        rows.push([
            "total".into(),
            String::new(),
            self.total_params.to_string(),
            self.total_macs.to_string(),
            format!("{:.4} GFLOPs", self.gflops),
        ]);
        let mut out = format!("input {}\n", s(&self.input_shape));
        out += &render(&rows, &[false, false, true, true, false]);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub node: String,
    pub params_a: u64,
    pub params_b: u64,
    pub params_delta: i64,
    pub params_pct: Option<f64>,
    pub macs_a: u64,
    pub macs_b: u64,
    pub macs_delta: i64,
    pub macs_pct: Option<f64>,
}

impl DeltaRow {
    fn new(node: &str, (pa, ma): (u64, u64), (pb, mb): (u64, u64)) -> Self {
        let pct = |a: u64, b: u64| (a != 0).then(|| (b as f64 - a as f64) / a as f64 * 100.0);
        DeltaRow {
            node: node.to_string(),
            params_a: pa,
            params_b: pb,
            params_delta: pb as i64 - pa as i64,
            params_pct: pct(pa, pb),
            macs_a: ma,
            macs_b: mb,
            macs_delta: mb as i64 - ma as i64,
            macs_pct: pct(ma, mb),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub input_shape: Shape,
    /// Layers of `a` in order, then layers only in `b`.
    pub layers: Vec<DeltaRow>,
    pub total: DeltaRow,
}

/// Per-layer and total changes going from `a` to `b`, matched by node id.
pub fn compare_reports(a: &CostReport, b: &CostReport) -> Result<ReportDelta> {
    if a.input_shape != b.input_shape {
        return Err(Error::Shape(format!(
            "reports use different input shapes {:?} and {:?}",
            a.input_shape, b.input_shape
        )));
    }
    let cost = |r: &CostReport, id: &str| r.layer(id).map_or((0, 0), |l| (l.params, l.macs));
    let mut layers: Vec<DeltaRow> = a.layers.iter().map(|l| DeltaRow::new(&l.node, (l.params, l.macs), cost(b, &l.node))).collect();
    for l in b.layers.iter().filter(|l| a.layer(&l.node).is_none()) {
        layers.push(DeltaRow::new(&l.node, (0, 0), (l.params, l.macs)));
    }
    Ok(ReportDelta {
        input_shape: a.input_shape,
        layers,
        total: DeltaRow::new("total", (a.total_params, a.total_macs), (b.total_params, b.total_macs)),
    })
}

impl ReportDelta {
    pub fn is_zero(&self) -> bool {
        self.layers.iter().chain([&self.total]).all(|r| r.params_delta == 0 && r.macs_delta == 0)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("delta serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let pct = |p: Option<f64>| p.map_or("n/a".to_string(), |v| format!("{v:+.2}%"));
        let mut rows = vec![[
            "node", "params_a", "params_b", "d_params", "d_params%", "macs_a", "macs_b", "d_macs", "d_macs%",
        ]
        .map(String::from)];
        for r in self.layers.iter().chain([&self.total]) {
            rows.push([
                r.node.clone(),
                r.params_a.to_string(),
                r.params_b.to_string(),
                format!("{:+}", r.params_delta),
                pct(r.params_pct),
                r.macs_a.to_string(),
                r.macs_b.to_string(),
                format!("{:+}", r.macs_delta),
                pct(r.macs_pct),
            ]);
        }
        let mut right = [true; 9];
        right[0] = false;
        render(&rows, &right)
    }
}

fn render<const N: usize>(rows: &[[String; N]], right: &[bool; N]) -> String {
    let mut widths = [0usize; N];
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (k, c) in r.iter().enumerate() {
            if k > 0 {
                line.push_str("  ");
            }
            if right[k] {
                let _ = write!(line, "{c:>w$}", w = widths[k]);
            } else {
                let _ = write!(line, "{c:<w$}", w = widths[k]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
