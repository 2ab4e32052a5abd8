//! Forward execution of a graph with bound weights.

use std::collections::BTreeMap;

use super::{ModelGraph, NodeOp, WeightStore};
use crate::blocks::{
    C2fBlock, C2fFasterBlock, ConvBnAct, ConvSpec, FasterBlock, GcDetectHead, GhostConvBlock, GhostHgBlock,
    HgStemBlock, PlainDetectHead, SppfBlock, TensorTracer,
};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvParams, Tensor4};

#[derive(Clone, Debug)]
enum Bound {
    Pass,
    Conv(ConvBnAct),
    MaxPool(usize, usize, usize),
    Upsample,
    Concat,
    Add,
    GhostConv(GhostConvBlock),
    GhostHg(GhostHgBlock),
    HgStem(HgStemBlock),
    Faster(FasterBlock),
    C2fFaster(C2fFasterBlock),
    C2f(C2fBlock),
    Sppf(SppfBlock),
    GcDetect(GcDetectHead),
    PlainDetect(PlainDetectHead),
}

/// A graph with every block built from a [`WeightStore`].
#[derive(Clone, Debug)]
pub struct Model<'g> {
    graph: &'g ModelGraph,
    blocks: Vec<Bound>,
}

impl<'g> Model<'g> {
    pub fn bind(graph: &'g ModelGraph, w: &WeightStore) -> Result<Self> {
        w.check_covers(graph)?;
        let mut src = |name: &str, spec: &ConvSpec| -> Result<ConvParams> { w.conv(name, spec) };
        let blocks = graph
            .nodes()
            .iter()
            .map(|n| {
                let p = format!("{}.", n.id);
                let s = &mut src;
                Ok(match &n.op {
                    NodeOp::Input | NodeOp::Identity => Bound::Pass,
                    NodeOp::Conv(c) => Bound::Conv(ConvBnAct::build(c, s, &p)?),
                    NodeOp::MaxPool(a) => Bound::MaxPool(a.k, a.stride, a.pad),
                    NodeOp::Upsample => Bound::Upsample,
                    NodeOp::Concat => Bound::Concat,
                    NodeOp::Add => Bound::Add,
                    NodeOp::GhostConv(c) => Bound::GhostConv(GhostConvBlock::build(c, s, &p)?),
                    NodeOp::GhostHg(c) => Bound::GhostHg(GhostHgBlock::build(c, s, &p)?),
                    NodeOp::HgStem(c) => Bound::HgStem(HgStemBlock::build(c, s, &p)?),
                    NodeOp::Faster(c) => Bound::Faster(FasterBlock::build(c, s, &p)?),
                    NodeOp::C2fFaster(c) => Bound::C2fFaster(C2fFasterBlock::build(c, s, &p)?),
                    NodeOp::C2f(c) => Bound::C2f(C2fBlock::build(c, s, &p)?),
                    NodeOp::Sppf(c) => Bound::Sppf(SppfBlock::build(c, s, &p)?),
                    NodeOp::GcDetect(c) => Bound::GcDetect(GcDetectHead::build(c, s, &p)?),
                    NodeOp::PlainDetect(c) => Bound::PlainDetect(PlainDetectHead::build(c, s, &p)?),
                })
                .map_err(|e: Error| e.in_node(&n.id))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { graph, blocks })
    }

    pub fn graph(&self) -> &ModelGraph {
        self.graph
    }

    /// Evaluates every node once in topological order.
    pub fn forward(&self, x: &Tensor4) -> Result<BTreeMap<String, Tensor4>> {
        self.forward_order(x, self.graph.topo_order())
    }

    /// Evaluates in the given order, which must be topological.
    pub fn forward_order(&self, x: &Tensor4, order: &[usize]) -> Result<BTreeMap<String, Tensor4>> {
        let g = self.graph;
        g.check_order(order)?;
        check_input(g, x)?;
        let mut vals: Vec<Option<Vec<Tensor4>>> = vec![None; g.nodes().len()];
        for &i in order {
            let n = &g.nodes()[i];
            let ins: Vec<&Tensor4> = n
                .inputs
                .iter()
                .map(|p| &vals[g.node_index(p).expect("validated")].as_ref().expect("producer evaluated")[0])
                .collect();
            let out = self.eval(&self.blocks[i], x, &ins).map_err(|e| e.in_node(&n.id))?;
            vals[i] = Some(out);
        }
        Ok(collect_outputs(g, vals))
    }

    fn eval(&self, b: &Bound, input: &Tensor4, xs: &[&Tensor4]) -> Result<Vec<Tensor4>> {
        let x = || xs[0];
        let one = |t: Tensor4| Ok(vec![t]);
        match b {
            Bound::Pass => one(xs.first().copied().unwrap_or(input).clone()),
            Bound::Conv(c) => one(c.forward(x())?),
            Bound::MaxPool(k, s, p) => one(tensor::maxpool2d(x(), *k, *s, *p)?),
            Bound::Upsample => one(tensor::upsample_nearest2x(x())),
            Bound::Concat => one(tensor::concat_channels(xs)?),
            Bound::Add => {
                let mut acc = x().clone();
                for v in &xs[1..] {
                    acc = tensor::add(&acc, v)?;
                }
                one(acc)
            }
            Bound::GhostConv(c) => one(c.forward(x())?),
            Bound::GhostHg(c) => one(c.forward(x())?),
            Bound::HgStem(c) => one(c.forward(x())?),
            Bound::Faster(c) => one(c.forward(x())?),
            Bound::C2fFaster(c) => one(c.forward(x())?),
            Bound::C2f(c) => one(c.forward(x())?),
            Bound::Sppf(c) => one(c.forward(x())?),
            Bound::GcDetect(h) => Ok(h.forward(xs)?.into_iter().flat_map(|o| [o.cls, o.bbox]).collect()),
            Bound::PlainDetect(h) => Ok(h.forward(xs)?.into_iter().flat_map(|o| [o.cls, o.bbox]).collect()),
        }
    }
}

fn check_input(g: &ModelGraph, x: &Tensor4) -> Result<()> {
    let want = g.meta().input_shape[1];
    if x.c() != want {
        return Err(Error::Dim {
            op: "forward_graph",
            dim: "input channels",
            expected: want,
            actual: x.c(),
        });
    }
    Ok(())
}

fn collect_outputs(g: &ModelGraph, vals: Vec<Option<Vec<Tensor4>>>) -> BTreeMap<String, Tensor4> {
    g.nodes()
        .iter()
        .zip(vals)
        .flat_map(|(n, v)| n.op.output_names(&n.id).into_iter().zip(v.expect("every node evaluated")))
        .collect()
}

/// Binds `w` and evaluates `g` on `x`. Keys are node ids, and `id:cls{i}` /
/// `id:box{i}` for head outputs.
pub fn forward_graph(g: &ModelGraph, w: &WeightStore, x: &Tensor4) -> Result<BTreeMap<String, Tensor4>> {
    Model::bind(g, w)?.forward(x)
}

/// Evaluates the graph by interpreting each node's dataflow description
/// directly, independent of the block forwards.
pub fn trace_forward(g: &ModelGraph, w: &WeightStore, x: &Tensor4) -> Result<BTreeMap<String, Tensor4>> {
    check_input(g, x)?;
    let mut src = |name: &str, spec: &ConvSpec| w.conv(name, spec);
    let mut t = TensorTracer { params: &mut src };
    let vals = g.trace(&mut t, x)?;
    Ok(collect_outputs(g, vals.into_iter().map(Some).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::testutil::random_tensor;
    use crate::graph::{fixtures, init_weights};
    use serde_json::json;

    #[test]
    fn identity_graph_returns_input() {
        let g = ModelGraph::from_json(
            &json!({
                "meta": {"input_shape": [1, 2, 3, 3], "num_classes": 1},
                "nodes": [{"id": "x", "kind": "input"}, {"id": "y", "kind": "identity", "inputs": ["x"]}],
                "outputs": ["y"]
            })
            .to_string(),
        )
        .unwrap();
        let x = random_tensor([2, 2, 3, 3], 1);
        let out = forward_graph(&g, &WeightStore::new(), &x).unwrap();
        assert!(out["y"].bit_eq(&x));
    }

    #[test]
    fn improved_lite_head_shapes() {
        let g = ModelGraph::from_json(fixtures::IMPROVED_LITE).unwrap();
        let w = init_weights(&g, 0);
        let x = random_tensor([1, 3, 256, 256], 2);
        let out = forward_graph(&g, &w, &x).unwrap();
        for (i, s) in [32, 16, 8].into_iter().enumerate() {
            assert_eq!(out[&format!("head:cls{i}")].shape(), [1, 6, s, s]);
            assert_eq!(out[&format!("head:box{i}")].shape(), [1, 4, s, s]);
        }
    }

    #[test]
    fn forward_is_pure_and_order_independent() {
        let g = ModelGraph::from_json(
            &json!({
                "meta": {"input_shape": [1, 3, 16, 16], "num_classes": 2},
                "nodes": [
                    {"id": "x", "kind": "input"},
                    {"id": "a", "kind": "conv", "attrs": {"c_in": 3, "c_out": 8, "k": 3}, "inputs": ["x"]},
                    {"id": "b", "kind": "ghost_conv", "attrs": {"c_in": 3, "c_out": 8}, "inputs": ["x"]},
                    {"id": "p", "kind": "maxpool", "attrs": {"k": 3, "stride": 1, "pad": 1}, "inputs": ["x"]},
                    {"id": "s", "kind": "add", "inputs": ["a", "b"]},
                    {"id": "c", "kind": "concat", "inputs": ["s", "p"]},
                    {"id": "f", "kind": "faster_block", "attrs": {"c": 11, "partial": 3}, "inputs": ["c"]}
                ],
                "outputs": ["f"]
            })
            .to_string(),
        )
        .unwrap();
        let w = init_weights(&g, 4);
        let m = Model::bind(&g, &w).unwrap();
        let x = random_tensor([2, 3, 16, 16], 3);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        let order = [0, 3, 2, 1, 4, 5, 6];
        assert_ne!(order, g.topo_order());
        let c = m.forward_order(&x, &order).unwrap();
        assert!(m.forward_order(&x, &[0, 4, 1, 2, 3, 5, 6]).is_err());
        assert_eq!(a.len(), 7);
        for (k, v) in &a {
            assert!(v.bit_eq(&b[k]) && v.bit_eq(&c[k]), "{k}");
        }
    }

    #[test]
    fn fixture_forward_is_deterministic() {
        let g = ModelGraph::from_json(fixtures::BASELINE_LITE).unwrap();
        let w = init_weights(&g, 4);
        let x = random_tensor([1, 3, 64, 64], 3);
        let a = forward_graph(&g, &w, &x).unwrap();
        let b = forward_graph(&g, &w, &x).unwrap();
        assert!(a.iter().all(|(k, v)| v.bit_eq(&b[k])));
    }

    #[test]
    fn block_forwards_agree_with_dataflow_interpreter() {
        for text in [fixtures::IMPROVED_LITE, fixtures::BASELINE_LITE] {
            let g = ModelGraph::from_json(text).unwrap();
            let w = init_weights(&g, 9);
            let x = random_tensor([1, 3, 64, 64], 5);
            let a = forward_graph(&g, &w, &x).unwrap();
            let b = trace_forward(&g, &w, &x).unwrap();
            assert_eq!(a.len(), b.len());
            for (k, v) in &a {
                assert!(v.bit_eq(&b[k]), "{k}");
            }
        }
    }

    #[test]
    fn missing_weight_is_named() {
        let g = ModelGraph::from_json(fixtures::IMPROVED_LITE).unwrap();
        let full = init_weights(&g, 0);
        let mut w = WeightStore::new();
        for (k, _) in full.entries().iter().filter(|(k, _)| k.as_str() != "head.s1.gconv2.bias") {
            w.insert(k, full.shape(k).unwrap().to_vec(), full.get(k).unwrap().to_vec()).unwrap();
        }
        let x = random_tensor([1, 3, 256, 256], 0);
        match forward_graph(&g, &w, &x) {
            Err(Error::MissingWeight(k)) => assert_eq!(k, "head.s1.gconv2.bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_input_channels_are_rejected() {
        let g = ModelGraph::from_json(fixtures::IMPROVED_LITE).unwrap();
        let w = init_weights(&g, 0);
        let x = random_tensor([1, 4, 256, 256], 0);
        assert!(matches!(forward_graph(&g, &w, &x), Err(Error::Dim { .. })));
    }
}
