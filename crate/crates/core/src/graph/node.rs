//! Node kinds and their JSON `attrs`.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blocks::{
    C2fConfig, C2fFasterConfig, ConvConfig, FasterConfig, GcDetectConfig, GhostConvConfig, GhostHgConfig,
    HgStemConfig, PlainDetectConfig, SppfConfig, Tracer,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolAttrs {
    pub k: usize,
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeOp {
    Input,
    Identity,
    Conv(ConvConfig),
    MaxPool(PoolAttrs),
    Upsample,
    Concat,
    Add,
    GhostConv(GhostConvConfig),
    GhostHg(GhostHgConfig),
    HgStem(HgStemConfig),
    Faster(FasterConfig),
    C2fFaster(C2fFasterConfig),
    C2f(C2fConfig),
    Sppf(SppfConfig),
    GcDetect(GcDetectConfig),
    PlainDetect(PlainDetectConfig),
}

fn attrs_of<T: DeserializeOwned>(node: &str, attrs: Value) -> Result<T> {
    serde_json::from_value(attrs).map_err(|e| Error::Config(format!("attrs: {e}")).in_node(node))
}

fn no_attrs(node: &str, kind: &str, attrs: &Value) -> Result<()> {
    match attrs {
        Value::Null => Ok(()),
        Value::Object(m) if m.is_empty() => Ok(()),
        _ => Err(Error::Config(format!("kind `{kind}` takes no attrs")).in_node(node)),
    }
}

/// How many inputs a kind accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl NodeOp {
    pub fn parse(node: &str, kind: &str, attrs: Value) -> Result<Self> {
        Ok(match kind {
            "input" | "identity" | "upsample" | "concat" | "add" => {
                no_attrs(node, kind, &attrs)?;
                match kind {
                    "input" => NodeOp::Input,
                    "identity" => NodeOp::Identity,
                    "upsample" => NodeOp::Upsample,
                    "concat" => NodeOp::Concat,
                    _ => NodeOp::Add,
                }
            }
            "conv" => NodeOp::Conv(attrs_of(node, attrs)?),
            "maxpool" => NodeOp::MaxPool(attrs_of(node, attrs)?),
            "ghost_conv" => NodeOp::GhostConv(attrs_of(node, attrs)?),
            "ghost_hgblock" => NodeOp::GhostHg(attrs_of(node, attrs)?),
            "hgstem" => NodeOp::HgStem(attrs_of(node, attrs)?),
            "faster_block" => NodeOp::Faster(attrs_of(node, attrs)?),
            "c2f_faster" => NodeOp::C2fFaster(attrs_of(node, attrs)?),
            "c2f" => NodeOp::C2f(attrs_of(node, attrs)?),
            "sppf" => NodeOp::Sppf(attrs_of(node, attrs)?),
            "gcdetect" => NodeOp::GcDetect(attrs_of(node, attrs)?),
            "plain_detect" => NodeOp::PlainDetect(attrs_of(node, attrs)?),
            _ => {
                return Err(Error::UnknownKind {
                    node: node.to_string(),
                    kind: kind.to_string(),
                })
            }
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NodeOp::Input => "input",
            NodeOp::Identity => "identity",
            NodeOp::Conv(_) => "conv",
            NodeOp::MaxPool(_) => "maxpool",
            NodeOp::Upsample => "upsample",
            NodeOp::Concat => "concat",
            NodeOp::Add => "add",
            NodeOp::GhostConv(_) => "ghost_conv",
            NodeOp::GhostHg(_) => "ghost_hgblock",
            NodeOp::HgStem(_) => "hgstem",
            NodeOp::Faster(_) => "faster_block",
            NodeOp::C2fFaster(_) => "c2f_faster",
            NodeOp::C2f(_) => "c2f",
            NodeOp::Sppf(_) => "sppf",
            NodeOp::GcDetect(_) => "gcdetect",
            NodeOp::PlainDetect(_) => "plain_detect",
        }
    }

    pub fn attrs(&self) -> Value {
        let v = match self {
            NodeOp::Input | NodeOp::Identity | NodeOp::Upsample | NodeOp::Concat | NodeOp::Add => {
                return Value::Object(Default::default())
            }
            NodeOp::Conv(c) => serde_json::to_value(c),
            NodeOp::MaxPool(c) => serde_json::to_value(c),
            NodeOp::GhostConv(c) => serde_json::to_value(c),
            NodeOp::GhostHg(c) => serde_json::to_value(c),
            NodeOp::HgStem(c) => serde_json::to_value(c),
            NodeOp::Faster(c) => serde_json::to_value(c),
            NodeOp::C2fFaster(c) => serde_json::to_value(c),
            NodeOp::C2f(c) => serde_json::to_value(c),
            NodeOp::Sppf(c) => serde_json::to_value(c),
            NodeOp::GcDetect(c) => serde_json::to_value(c),
            NodeOp::PlainDetect(c) => serde_json::to_value(c),
        };
        v.expect("attrs serialize to JSON")
    }

    pub fn arity(&self) -> Arity {
        match self {
            NodeOp::Input => Arity::Exactly(0),
            NodeOp::Concat => Arity::AtLeast(1),
            NodeOp::Add => Arity::AtLeast(2),
            NodeOp::GcDetect(c) => Arity::Exactly(c.in_channels.len()),
            NodeOp::PlainDetect(c) => Arity::Exactly(c.in_channels.len()),
            _ => Arity::Exactly(1),
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, NodeOp::GcDetect(_) | NodeOp::PlainDetect(_))
    }

    /// Input channels each input slot must carry, when the kind declares them.
    pub fn declared_inputs(&self) -> Option<Vec<usize>> {
        Some(match self {
            NodeOp::Input | NodeOp::Identity | NodeOp::MaxPool(_) | NodeOp::Upsample | NodeOp::Concat | NodeOp::Add => {
                return None
            }
            NodeOp::Conv(c) => vec![c.c_in],
            NodeOp::GhostConv(c) => vec![c.c_in],
            NodeOp::GhostHg(c) => vec![c.c],
            NodeOp::HgStem(c) => vec![c.c_in],
            NodeOp::Faster(c) => vec![c.c],
            NodeOp::C2fFaster(c) => vec![c.c_in],
            NodeOp::C2f(c) => vec![c.c_in],
            NodeOp::Sppf(c) => vec![c.c_in],
            NodeOp::GcDetect(c) => c.in_channels.clone(),
            NodeOp::PlainDetect(c) => c.in_channels.clone(),
        })
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            NodeOp::GcDetect(c) => Some(c.num_classes),
            NodeOp::PlainDetect(c) => Some(c.num_classes),
            _ => None,
        }
    }

    /// Names of the node's outputs. Heads emit `id:cls{i}` and `id:box{i}` per scale.
    pub fn output_names(&self, id: &str) -> Vec<String> {
        match self {
            NodeOp::GcDetect(GcDetectConfig { in_channels, .. })
            | NodeOp::PlainDetect(PlainDetectConfig { in_channels, .. }) => (0..in_channels.len())
                .flat_map(|i| [format!("{id}:cls{i}"), format!("{id}:box{i}")])
                .collect(),
            _ => vec![id.to_string()],
        }
    }

    /// Runs the node's dataflow description. `Input` returns its first argument.
    pub fn trace<T: Tracer>(&self, t: &mut T, id: &str, xs: &[T::V]) -> Result<Vec<T::V>> {
        let p = format!("{id}.");
        let x = || xs.first().ok_or_else(|| Error::Graph("missing input".into()));
        let one = |v: T::V| Ok(vec![v]);
        match self {
            NodeOp::Input | NodeOp::Identity => one(x()?.clone()),
            NodeOp::Conv(c) => one(c.trace_at(t, &p, x()?)?),
            NodeOp::MaxPool(a) => one(t.maxpool(x()?, a.k, a.stride, a.pad)?),
            NodeOp::Upsample => one(t.upsample(x()?)?),
            NodeOp::Concat => one(t.concat(xs)?),
            NodeOp::Add => {
                let mut acc = x()?.clone();
                for v in &xs[1..] {
                    acc = t.add(&acc, v)?;
                }
                one(acc)
            }
            NodeOp::GhostConv(c) => one(c.trace_at(t, &p, x()?)?),
            NodeOp::GhostHg(c) => one(c.trace_at(t, &p, x()?)?),
            NodeOp::HgStem(c) => one(c.trace_at(t, &p, x()?)?),
            NodeOp::Faster(c) => one(c.trace_at(t, &p, x()?)?),
            NodeOp::C2fFaster(c) => one(c.trace_at(t, &p, x()?)?),
            NodeOp::C2f(c) => one(c.trace_at(t, &p, x()?)?),
            NodeOp::Sppf(c) => one(c.trace_at(t, &p, x()?)?),
            NodeOp::GcDetect(c) => c.trace_at(t, &p, xs),
            NodeOp::PlainDetect(c) => c.trace_at(t, &p, xs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const KINDS: [&str; 16] = [
        "input",
        "identity",
        "conv",
        "maxpool",
        "upsample",
        "concat",
        "add",
        "ghost_conv",
        "ghost_hgblock",
        "hgstem",
        "faster_block",
        "c2f_faster",
        "c2f",
        "sppf",
        "gcdetect",
        "plain_detect",
    ];

    fn sample(kind: &str) -> Value {
        match kind {
            "conv" => json!({"c_in": 3, "c_out": 8, "k": 3}),
            "maxpool" => json!({"k": 2, "stride": 2}),
            "ghost_conv" => json!({"c_in": 4, "c_out": 8}),
            "ghost_hgblock" | "faster_block" => json!({"c": 16}),
            "hgstem" => json!({"c_in": 3, "c_stem": 8, "c_out": 16}),
            "c2f_faster" | "c2f" => json!({"c_in": 16, "c_out": 16, "n": 1}),
            "sppf" => json!({"c_in": 16, "c_out": 16}),
            "gcdetect" | "plain_detect" => json!({"in_channels": [16, 32], "num_classes": 2}),
            _ => json!({}),
        }
    }

    #[test]
    fn every_kind_round_trips_through_attrs() {
        for kind in KINDS {
            let op = NodeOp::parse("n", kind, sample(kind)).unwrap();
            assert_eq!(op.kind(), kind);
            assert_eq!(NodeOp::parse("n", kind, op.attrs()).unwrap(), op);
        }
    }

    #[test]
    fn unknown_kind_names_node() {
        match NodeOp::parse("x7", "transformer", json!({})) {
            Err(Error::UnknownKind { node, kind }) => {
                assert_eq!(node, "x7");
                assert_eq!(kind, "transformer");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_attr_fields_are_rejected() {
        assert!(NodeOp::parse("a", "conv", json!({"c_in": 1, "c_out": 1, "k": 1, "dilation": 2})).is_err());
        assert!(NodeOp::parse("a", "add", json!({"k": 1})).is_err());
    }

    #[test]
    fn head_outputs_are_interleaved() {
        let op = NodeOp::parse("head", "gcdetect", sample("gcdetect")).unwrap();
        assert_eq!(op.output_names("head"), ["head:cls0", "head:box0", "head:cls1", "head:box1"]);
    }
}
