//! Channel identity tracing. Every channel in the graph is an atom; convs mint
//! atoms for their outputs unless their outputs are tied to their inputs,
//! and residual adds merge the atoms they combine. Atoms that end up merged
//! form a class that must be kept or removed as one.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::blocks::{ConvSpec, Tracer};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;

/// Atoms seen by one conv, in channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvAtoms {
    pub name: String,
    pub node: String,
    pub spec: ConvSpec,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
}

impl ConvAtoms {
    /// Convs whose channel layout may only be pruned as a whole.
    fn is_grouped(&self) -> bool {
        self.spec.groups > 1 && !self.spec.is_depthwise()
    }
}

struct AtomTracer {
    next: usize,
    convs: Vec<ConvAtoms>,
    merges: Vec<(usize, usize)>,
    floors: Vec<Vec<usize>>,
}

impl AtomTracer {
    fn fresh(&mut self, n: usize) -> Vec<usize> {
        let v = (self.next..self.next + n).collect();
        self.next += n;
        v
    }
}

impl Tracer for AtomTracer {
    type V = Vec<usize>;

    fn conv(&mut self, name: &str, spec: &ConvSpec, x: &Vec<usize>) -> Result<Vec<usize>> {
        if x.len() != spec.c_in {
            return Err(Error::Graph(format!("`{name}` sees {} channels, declares {}", x.len(), spec.c_in)));
        }
        let outputs = if spec.channel_tied() {
            x.clone()
        } else {
            let out = self.fresh(spec.c_out);
            self.floors.push(out.clone());
            out
        };
        self.convs.push(ConvAtoms {
            name: name.to_string(),
            node: name.split('.').next().unwrap_or(name).to_string(),
            spec: *spec,
            inputs: x.clone(),
            outputs: outputs.clone(),
        });
        Ok(outputs)
    }

    fn maxpool(&mut self, x: &Vec<usize>, _: usize, _: usize, _: usize) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn upsample(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn concat(&mut self, parts: &[Vec<usize>]) -> Result<Vec<usize>> {
        Ok(parts.concat())
    }

    fn split(&mut self, x: &Vec<usize>, sizes: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for &s in sizes {
            let part = x
                .get(at..at + s)
                .ok_or_else(|| Error::Graph(format!("split {sizes:?} exceeds {} channels", x.len())))?
                .to_vec();
            self.floors.push(part.clone());
            out.push(part);
            at += s;
        }
        Ok(out)
    }

    fn add(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a.len() != b.len() {
            return Err(Error::Graph(format!("add of {} and {} channels", a.len(), b.len())));
        }
        self.merges.extend(a.iter().copied().zip(b.iter().copied()));
        Ok(a.clone())
    }
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// One conv output channel.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelRef {
    pub conv: String,
    pub channel: usize,
}

/// Conv output channels whose keep masks must agree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGroup {
    pub members: Vec<ChannelRef>,
}

/// Channel classes of a graph and the constraints on removing them.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub convs: Vec<ConvAtoms>,
    /// Class index of every atom.
    pub class_of: Vec<usize>,
    /// Atoms of every class, ascending; classes are ordered by first atom.
    pub classes: Vec<Vec<usize>>,
    /// Classes that must never be removed.
    pub locked: Vec<bool>,
    /// Atom sets of which at least one must survive.
    pub floors: Vec<Vec<usize>>,
}

impl Coupling {
    /// Traces `g`. Classes touching the graph input, graph outputs, detection
    /// heads, grouped convs or any node in `protected` are locked.
    pub fn build(g: &ModelGraph, protected: &BTreeSet<String>) -> Result<Self> {
        for p in protected {
            if g.node(p).is_none() {
                return Err(Error::Prune(format!("protected node `{p}` is not in the graph")));
            }
        }
        let mut t = AtomTracer {
            next: 0,
            convs: Vec::new(),
            merges: Vec::new(),
            floors: Vec::new(),
        };
        let input = t.fresh(g.meta().input_shape[1]);
        let vals = g.trace(&mut t, &input)?;

        let mut parent: Vec<usize> = (0..t.next).collect();
        for &(a, b) in &t.merges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let roots: Vec<usize> = (0..t.next).map(|a| find(&mut parent, a)).collect();
        let mut class_of = vec![usize::MAX; t.next];
        let mut classes: Vec<Vec<usize>> = Vec::new();
        let mut class_of_root = vec![usize::MAX; t.next];
        for a in 0..t.next {
            let r = roots[a];
            if class_of_root[r] == usize::MAX {
                class_of_root[r] = classes.len();
                classes.push(Vec::new());
            }
            class_of[a] = class_of_root[r];
            classes[class_of_root[r]].push(a);
        }

        let mut locked = vec![false; classes.len()];
        let mut lock = |atoms: &[usize]| {
            for &a in atoms {
                locked[class_of[a]] = true;
            }
        };
        lock(&input);
        for (i, n) in g.nodes().iter().enumerate() {
            if g.outputs().contains(&n.id) || n.op.is_head() || protected.contains(&n.id) {
                for v in &vals[i] {
                    lock(v);
                }
            }
        }
        for c in &t.convs {
            let node = g.node(&c.node).expect("conv names start with their node id");
            if node.op.is_head() || protected.contains(&c.node) {
                lock(&c.outputs);
            }
            if c.is_grouped() {
                lock(&c.inputs);
                lock(&c.outputs);
            }
        }
        Ok(Coupling {
            convs: t.convs,
            class_of,
            classes,
            locked,
            floors: t.floors,
        })
    }

    pub fn atoms(&self) -> usize {
        self.class_of.len()
    }

    pub fn conv(&self, name: &str) -> Option<&ConvAtoms> {
        self.convs.iter().find(|c| c.name == name)
    }

    /// Conv output channels per class, for classes with more than one.
    pub fn groups(&self) -> Vec<CouplingGroup> {
        let mut members: Vec<BTreeSet<ChannelRef>> = vec![BTreeSet::new(); self.classes.len()];
        for c in &self.convs {
            for (j, &a) in c.outputs.iter().enumerate() {
                members[self.class_of[a]].insert(ChannelRef {
                    conv: c.name.clone(),
                    channel: j,
                });
            }
        }
        members
            .into_iter()
            .filter(|m| m.len() > 1)
            .map(|m| CouplingGroup {
                members: m.into_iter().collect(),
            })
            .collect()
    }
}

/// Maximal sets of conv output channels whose masks must be identical.
pub fn build_coupling_groups(g: &ModelGraph) -> Result<Vec<CouplingGroup>> {
    Ok(Coupling::build(g, &BTreeSet::new())?.groups())
}
