//! Declarative network graphs, their weights, and a forward executor.

mod exec;
pub mod fixtures;
mod node;
mod rng;
mod weights;

use std::collections::{BinaryHeap, HashMap};
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use exec::{forward_graph, trace_forward, Model};
pub use node::{Arity, NodeOp, PoolAttrs};
pub use rng::Rng;
pub use weights::{init_weights, WeightEntry, WeightStore};

use crate::blocks::{ChannelTracer, ConvSpec, Tracer};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    /// Channels are enforced on forward; batch and spatial dims are the default
    /// analysis shape.
    pub input_shape: [usize; 4],
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: NodeOp,
    pub inputs: Vec<String>,
}

/// A convolution declared somewhere in the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEntry {
    /// Index of the owning node.
    pub node: usize,
    /// Full path, e.g. `neck_c1.m0.fuse`; weight keys append `.weight` and `.bias`.
    pub name: String,
    pub spec: ConvSpec,
}

impl ConvEntry {
    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// Validated DAG of block nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    meta: Meta,
    nodes: Vec<Node>,
    outputs: Vec<String>,
    index: HashMap<String, usize>,
    order: Vec<usize>,
    /// Per node, the channel count of each output.
    channels: Vec<Vec<usize>>,
    convs: Vec<ConvEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    meta: Meta,
    #[serde(default)]
    nodes: Vec<RawNode>,
    #[serde(default)]
    outputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    kind: String,
    #[serde(default)]
    attrs: Value,
    #[serde(default)]
    inputs: Vec<String>,
}

#[derive(Serialize)]
struct RawGraphOut<'a> {
    meta: &'a Meta,
    nodes: Vec<RawNode>,
    outputs: &'a [String],
}

impl ModelGraph {
    pub fn new(meta: Meta, nodes: Vec<Node>, outputs: Vec<String>) -> Result<Self> {
        let mut g = ModelGraph {
            meta,
            nodes,
            outputs,
            index: HashMap::new(),
            order: Vec::new(),
            channels: Vec::new(),
            convs: Vec::new(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawGraph = serde_json::from_str(text)?;
        let nodes = raw
            .nodes
            .into_iter()
            .map(|n| {
                Ok(Node {
                    op: NodeOp::parse(&n.id, &n.kind, n.attrs)?,
                    id: n.id,
                    inputs: n.inputs,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(raw.meta, nodes, raw.outputs)
    }

    pub fn to_json(&self) -> String {
        let out = RawGraphOut {
            meta: &self.meta,
            nodes: self
                .nodes
                .iter()
                .map(|n| RawNode {
                    id: n.id.clone(),
                    kind: n.op.kind().to_string(),
                    attrs: n.op.attrs(),
                    inputs: n.inputs.clone(),
                })
                .collect(),
            outputs: &self.outputs,
        };
        let mut s = serde_json::to_string_pretty(&out).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Node indices in evaluation order (ties resolved by declaration order).
    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    pub fn output_channels(&self, node: usize) -> &[usize] {
        &self.channels[node]
    }

    /// All convolutions in topological, then declaration, order.
    pub fn convs(&self) -> &[ConvEntry] {
        &self.convs
    }

    /// Every weight key the graph declares, in [`Self::convs`] order.
    pub fn param_keys(&self) -> Vec<String> {
        self.convs.iter().flat_map(|c| [c.weight_key(), c.bias_key()]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.spec.params()).sum()
    }

    /// Runs `t` over the graph in topological order. Returns every node's
    /// outputs, indexed like [`Self::nodes`].
    pub fn trace<T: Tracer>(&self, t: &mut T, input: &T::V) -> Result<Vec<Vec<T::V>>> {
        self.trace_order(t, input, &self.order)
    }

    /// Like [`Self::trace`] with an explicit evaluation order, which must be topological.
    pub fn trace_order<T: Tracer>(&self, t: &mut T, input: &T::V, order: &[usize]) -> Result<Vec<Vec<T::V>>> {
        self.check_order(order)?;
        let mut vals: Vec<Option<Vec<T::V>>> = vec![None; self.nodes.len()];
        for &i in order {
            let n = &self.nodes[i];
            let xs: Vec<T::V> = if matches!(n.op, NodeOp::Input) {
                vec![input.clone()]
            } else {
                n.inputs
                    .iter()
                    .map(|p| vals[self.index[p]].as_ref().expect("producer evaluated")[0].clone())
                    .collect()
            };
            let out = n.op.trace(t, &n.id, &xs).map_err(|e| e.in_node(&n.id))?;
            vals[i] = Some(out);
        }
        Ok(vals.into_iter().map(|v| v.expect("every node evaluated")).collect())
    }

    /// Checks that `order` is a permutation of the nodes respecting every edge.
    pub fn check_order(&self, order: &[usize]) -> Result<()> {
        let mut pos = vec![usize::MAX; self.nodes.len()];
        for (k, &i) in order.iter().enumerate() {
            if i >= self.nodes.len() || pos[i] != usize::MAX {
                return Err(Error::Graph(format!("evaluation order is not a permutation at {k}")));
            }
            pos[i] = k;
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Graph("evaluation order misses nodes".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            for p in &n.inputs {
                if pos[self.index[p]] > pos[i] {
                    return Err(Error::Graph(format!("`{}` evaluated before its input `{p}`", n.id)));
                }
            }
        }
        Ok(())
    }

    fn validate(&mut self) -> Result<()> {
        self.index.clear();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.is_empty() || n.id.contains(['.', ':']) {
                return Err(Error::Graph(format!("invalid node id `{}` (no `.` or `:` allowed)", n.id)));
            }
            if self.index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id `{}`", n.id)));
            }
        }
        let mut n_inputs = 0;
        for n in &self.nodes {
            for p in &n.inputs {
                if !self.index.contains_key(p) {
                    return Err(Error::Graph(format!("node `{}` references unknown input `{p}`", n.id)));
                }
            }
            let k = n.inputs.len();
            let ok = match n.op.arity() {
                Arity::Exactly(m) => k == m,
                Arity::AtLeast(m) => k >= m,
            };
            if !ok {
                return Err(Error::Graph(format!(
                    "node `{}` of kind `{}` cannot take {k} inputs",
                    n.id,
                    n.op.kind()
                )));
            }
            if matches!(n.op, NodeOp::Input) {
                n_inputs += 1;
            }
            if let Some(c) = n.op.num_classes() {
                if c != self.meta.num_classes {
                    return Err(Error::Graph(format!(
                        "head `{}` predicts {c} classes but meta declares {}",
                        n.id, self.meta.num_classes
                    )));
                }
            }
        }
        if n_inputs > 1 {
            return Err(Error::Graph("graph has more than one input node".into()));
        }
        for o in &self.outputs {
            if !self.index.contains_key(o) {
                return Err(Error::Graph(format!("unknown output `{o}`")));
            }
        }
        self.check_acyclic()?;
        self.order = self.kahn();
        for n in &self.nodes {
            for p in &n.inputs {
                if self.nodes[self.index[p]].op.is_head() {
                    return Err(Error::Graph(format!("head `{p}` cannot feed node `{}`", n.id)));
                }
            }
        }
        self.check_channels()
    }

    /// Depth-first search over input edges; reports the first back edge.
    fn check_acyclic(&self) -> Result<()> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let mut mark = vec![Mark::New; self.nodes.len()];
        for root in 0..self.nodes.len() {
            if mark[root] != Mark::New {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            mark[root] = Mark::Open;
            while let Some(&mut (i, ref mut next)) = stack.last_mut() {
                if let Some(p) = self.nodes[i].inputs.get(*next) {
                    *next += 1;
                    let j = self.index[p];
                    match mark[j] {
                        Mark::New => {
                            mark[j] = Mark::Open;
                            stack.push((j, 0));
                        }
                        Mark::Open => {
                            return Err(Error::Cycle {
                                from: p.clone(),
                                to: self.nodes[i].id.clone(),
                            })
                        }
                        Mark::Done => {}
                    }
                } else {
                    mark[i] = Mark::Done;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    fn kahn(&self) -> Vec<usize> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut consumers = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            indeg[i] = node.inputs.len();
            for p in &node.inputs {
                consumers[self.index[p]].push(i);
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &c in &consumers[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        order
    }

    fn check_channels(&mut self) -> Result<()> {
        let mut channels: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        let mut convs = Vec::new();
        for &i in &self.order {
            let n = &self.nodes[i];
            let xs: Vec<usize> = if matches!(n.op, NodeOp::Input) {
                vec![self.meta.input_shape[1]]
            } else {
                n.inputs.iter().map(|p| channels[self.index[p]][0]).collect()
            };
            if let Some(want) = n.op.declared_inputs() {
                for ((p, &have), &want) in n.inputs.iter().zip(&xs).zip(&want) {
                    if have != want {
                        return Err(Error::ChannelMismatch {
                            producer: p.clone(),
                            consumer: n.id.clone(),
                            expected: want,
                            actual: have,
                        });
                    }
                }
            }
            if matches!(n.op, NodeOp::Add) {
                if let Some(k) = xs.iter().position(|&c| c != xs[0]) {
                    return Err(Error::ChannelMismatch {
                        producer: n.inputs[k].clone(),
                        consumer: n.id.clone(),
                        expected: xs[0],
                        actual: xs[k],
                    });
                }
            }
            let mut t = ChannelTracer::new();
            channels[i] = n.op.trace(&mut t, &n.id, &xs).map_err(|e| e.in_node(&n.id))?;
            convs.extend(t.convs.into_iter().map(|(name, spec)| ConvEntry { node: i, name, spec }));
        }
        self.channels = channels;
        self.convs = convs;
        Ok(())
    }
}
