//! Structured channel pruning driven by LAMP scores.
//!
//! A [`Pruner`] ranks the prunable channel classes of a graph once and fixes
//! a removal sequence; every plan is a prefix of it, so masks only grow with
//! the requested sparsity.

mod coupling;
mod lamp;

use std::collections::{BTreeSet, HashMap};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use coupling::{build_coupling_groups, ChannelRef, ConvAtoms, Coupling, CouplingGroup};
pub use lamp::{channel_sums, lamp_scores, lamp_scores_tie_averaged, LampScores};

use crate::blocks::{C2fConfig, C2fFasterConfig, ConvSpec, FasterConfig, GhostHgConfig, HgStemConfig, SppfConfig};
use crate::cost::graph_cost;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Node, NodeOp, WeightStore};

/// Importance of one prunable conv output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub node: String,
    pub conv: String,
    pub channel: usize,
    pub importance: f64,
}

/// Keep masks per conv path (1 keeps the output channel) and what they achieve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrunePlan {
    pub masks: IndexMap<String, Vec<u8>>,
    pub requested_sparsity: f64,
    /// Removed fraction of all parameters.
    pub achieved_sparsity: f64,
    /// Baseline MACs over pruned MACs at the graph's input shape.
    pub achieved_mac_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    /// CRC-32 of the canonical JSON of the graph the plan was built for.
    pub graph_digest: String,
}

impl PrunePlan {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn removed_channels(&self) -> usize {
        self.masks.values().flatten().filter(|&&m| m == 0).count()
    }

    pub fn is_identity(&self) -> bool {
        self.removed_channels() == 0
    }
}

pub fn graph_digest(g: &ModelGraph) -> String {
    format!("{:08x}", crc32fast::hash(g.to_json().as_bytes()))
}

/// Output-channel scores of every conv in `node`; empty for heads and for
/// convs whose channels are locked.
pub fn channel_importance(g: &ModelGraph, w: &WeightStore, node: &str) -> Result<Vec<ChannelScore>> {
    let c = Coupling::build(g, &BTreeSet::new())?;
    let mut out = Vec::new();
    for conv in c.convs.iter().filter(|x| x.node == node) {
        let sums = conv_sums(w, conv)?;
        for (j, &a) in conv.outputs.iter().enumerate() {
            if !c.locked[c.class_of[a]] {
                out.push(ChannelScore {
                    node: conv.node.clone(),
                    conv: conv.name.clone(),
                    channel: j,
                    importance: sums[j],
                });
            }
        }
    }
    Ok(out)
}

fn conv_sums(w: &WeightStore, conv: &ConvAtoms) -> Result<Vec<f64>> {
    let key = format!("{}.weight", conv.name);
    let data = w.get(&key).ok_or_else(|| Error::MissingWeight(key.clone()))?;
    if data.len() != conv.spec.weight_len() {
        return Err(Error::Prune(format!("`{key}` does not match the graph")));
    }
    channel_sums(data, conv.spec.c_out)
}

fn conv_params(spec: &ConvSpec, kin: usize, kout: usize) -> u64 {
    let per_group_in = if spec.is_depthwise() { 1 } else { kin / spec.groups };
    (kout * per_group_in * spec.k * spec.k + kout) as u64
}

/// Fixed removal sequence for one graph, its weights and a protected set.
pub struct Pruner<'g> {
    g: &'g ModelGraph,
    coupling: Coupling,
    /// Classes in removal order, each with the total params remaining after it goes.
    sequence: Vec<(usize, u64)>,
    total_params: u64,
    base_macs: u64,
    digest: String,
    macs_cache: HashMap<usize, u64>,
}

impl<'g> Pruner<'g> {
    pub fn new(g: &'g ModelGraph, w: &WeightStore, protected: &BTreeSet<String>) -> Result<Self> {
        w.check_covers(g)?;
        let coupling = Coupling::build(g, protected)?;
        let mut importance = vec![0.0; coupling.classes.len()];
        for conv in &coupling.convs {
            let sums = conv_sums(w, conv)?;
            for (j, &a) in conv.outputs.iter().enumerate() {
                importance[coupling.class_of[a]] += sums[j];
            }
        }
        let mut candidates: Vec<usize> = (0..coupling.classes.len()).filter(|&k| !coupling.locked[k]).collect();
        candidates.sort_by(|&a, &b| importance[a].total_cmp(&importance[b]).then(a.cmp(&b)));

        // Where each atom occurs: (conv, is_output).
        let mut occurs: Vec<Vec<(usize, bool)>> = vec![Vec::new(); coupling.atoms()];
        for (ci, c) in coupling.convs.iter().enumerate() {
            for &a in &c.inputs {
                occurs[a].push((ci, false));
            }
            for &a in &c.outputs {
                occurs[a].push((ci, true));
            }
        }
        let mut floors_of: Vec<Vec<usize>> = vec![Vec::new(); coupling.atoms()];
        for (fi, f) in coupling.floors.iter().enumerate() {
            for &a in f {
                floors_of[a].push(fi);
            }
        }
        let mut alive_in_floor: Vec<usize> = coupling.floors.iter().map(Vec::len).collect();
        let mut kin: Vec<usize> = coupling.convs.iter().map(|c| c.inputs.len()).collect();
        let mut kout: Vec<usize> = coupling.convs.iter().map(|c| c.outputs.len()).collect();
        let total_params: u64 = coupling.convs.iter().map(|c| c.spec.params() as u64).sum();
        let mut params = total_params;

        let mut sequence = Vec::new();
        for k in candidates {
            let atoms = &coupling.classes[k];
            let mut hits: HashMap<usize, usize> = HashMap::new();
            for &a in atoms {
                for &f in &floors_of[a] {
                    *hits.entry(f).or_default() += 1;
                }
            }
            if hits.iter().any(|(&f, &n)| alive_in_floor[f] <= n) {
                continue;
            }
            for (f, n) in hits {
                alive_in_floor[f] -= n;
            }
            let mut touched = BTreeSet::new();
            for &a in atoms {
                for &(ci, out) in &occurs[a] {
                    if touched.insert(ci) {
                        params -= conv_params(&coupling.convs[ci].spec, kin[ci], kout[ci]);
                    }
                    if out {
                        kout[ci] -= 1;
                    } else {
                        kin[ci] -= 1;
                    }
                }
            }
            for &ci in &touched {
                params += conv_params(&coupling.convs[ci].spec, kin[ci], kout[ci]);
            }
            sequence.push((k, params));
        }
        Ok(Pruner {
            g,
            base_macs: graph_cost(g, g.meta().input_shape)?.total_macs,
            coupling,
            sequence,
            total_params,
            digest: graph_digest(g),
            macs_cache: HashMap::new(),
        })
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    /// Number of classes that can be removed in sequence.
    pub fn max_steps(&self) -> usize {
        self.sequence.len()
    }

    fn sparsity_at(&self, steps: usize) -> f64 {
        if steps == 0 || self.total_params == 0 {
            return 0.0;
        }
        1.0 - self.sequence[steps - 1].1 as f64 / self.total_params as f64
    }

    /// Shortest prefix removing at least `sparsity` of the parameters, or the
    /// whole sequence when that is not enough.
    fn steps_for(&self, sparsity: f64) -> usize {
        if sparsity <= 0.0 {
            return 0;
        }
        (1..=self.sequence.len())
            .find(|&n| self.sparsity_at(n) >= sparsity)
            .unwrap_or(self.sequence.len())
    }

    fn alive(&self, steps: usize) -> Vec<bool> {
        let mut alive = vec![true; self.coupling.atoms()];
        for &(k, _) in &self.sequence[..steps] {
            for &a in &self.coupling.classes[k] {
                alive[a] = false;
            }
        }
        alive
    }

    fn masks(&self, alive: &[bool]) -> IndexMap<String, Vec<u8>> {
        self.coupling
            .convs
            .iter()
            .map(|c| (c.name.clone(), c.outputs.iter().map(|&a| alive[a] as u8).collect()))
            .collect()
    }

    fn macs_at(&mut self, steps: usize) -> Result<u64> {
        if let Some(&m) = self.macs_cache.get(&steps) {
            return Ok(m);
        }
        let g = rebuild_graph(self.g, &self.coupling, &self.alive(steps))?;
        let m = graph_cost(&g, g.meta().input_shape)?.total_macs;
        self.macs_cache.insert(steps, m);
        Ok(m)
    }

    fn ratio_at(&mut self, steps: usize) -> Result<f64> {
        let m = self.macs_at(steps)?;
        Ok(if m == 0 { f64::INFINITY } else { self.base_macs as f64 / m as f64 })
    }

    fn plan_at(&mut self, steps: usize, requested: f64, warning: Option<String>) -> Result<PrunePlan> {
        Ok(PrunePlan {
            masks: self.masks(&self.alive(steps)),
            requested_sparsity: requested,
            achieved_sparsity: self.sparsity_at(steps),
            achieved_mac_ratio: self.ratio_at(steps)?,
            warning,
            graph_digest: self.digest.clone(),
        })
    }

    /// Removes lowest-importance classes until `sparsity` of the parameters is gone.
    pub fn select(&mut self, sparsity: f64) -> Result<PrunePlan> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::Prune(format!("sparsity must lie in [0, 1), got {sparsity}")));
        }
        let steps = self.steps_for(sparsity);
        let reached = self.sparsity_at(steps);
        let warning = (reached < sparsity).then(|| {
            format!("sparsity {sparsity} unreachable: channel floors stop at {reached:.4}")
        });
        self.plan_at(steps, sparsity, warning)
    }

    /// Bisects the requested sparsity in `[0, 0.99]` for a MAC speed-up of
    /// `target` within relative tolerance `tol`.
    pub fn search_speedup(&mut self, target: f64, tol: f64) -> Result<PrunePlan> {
        if !(target >= 1.0 && target.is_finite()) {
            return Err(Error::Prune(format!("target speed-up must be a finite ratio >= 1, got {target}")));
        }
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(Error::Prune(format!("tolerance must be positive, got {tol}")));
        }
        let within = |r: f64| (r - target).abs() <= tol * target;
        if within(1.0) {
            return self.plan_at(0, 0.0, None);
        }
        let (mut lo, mut hi) = (0.0f64, 0.99f64);
        let mut best: Option<(f64, usize, f64)> = None;
        let consider = |s: f64, steps: usize, r: f64, best: &mut Option<(f64, usize, f64)>| {
            let d = (r - target).abs();
            if best.map_or(true, |(bd, bs, _)| d < bd || (d == bd && steps < bs)) {
                *best = Some((d, steps, s));
            }
        };
        let top = self.steps_for(hi);
        let r_hi = self.ratio_at(top)?;
        consider(hi, top, r_hi, &mut best);
        if r_hi >= target {
            for _ in 0..60 {
                let mid = (lo + hi) / 2.0;
                let steps = self.steps_for(mid);
                let r = self.ratio_at(steps)?;
                consider(mid, steps, r, &mut best);
                if within(r) {
                    break;
                }
                if r < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-9 {
                    break;
                }
            }
        }
        let (_, steps, s) = best.expect("at least one candidate");
        let r = self.ratio_at(steps)?;
        let warning = (!within(r)).then(|| {
            format!("target speed-up {target} not reachable within {tol}; closest achievable is {r:.4}")
        });
        self.plan_at(steps, s, warning)
    }
}

/// Lowest-importance channels removed until `sparsity` of parameters is gone.
pub fn select_channels(
    g: &ModelGraph,
    w: &WeightStore,
    sparsity: f64,
    protected: &BTreeSet<String>,
) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Prune(format!("sparsity must lie in [0, 1), got {sparsity}")));
    }
    Pruner::new(g, w, protected)?.select(sparsity)
}

/// Plan whose MAC speed-up is within relative `tol` of `target`, or the
/// closest achievable one with a warning.
pub fn search_speedup(g: &ModelGraph, w: &WeightStore, target: f64, tol: f64) -> Result<PrunePlan> {
    Pruner::new(g, w, &BTreeSet::new())?.search_speedup(target, tol)
}

/// Atom liveness implied by `plan`, after checking it fits `g`.
fn plan_alive(g: &ModelGraph, c: &Coupling, plan: &PrunePlan) -> Result<Vec<bool>> {
    let stale = |m: String| Error::Prune(format!("plan does not fit this graph: {m}"));
    if plan.graph_digest != graph_digest(g) {
        return Err(stale(format!("digest {} vs {}", plan.graph_digest, graph_digest(g))));
    }
    if plan.masks.len() != c.convs.len() {
        return Err(stale(format!("{} masks for {} convs", plan.masks.len(), c.convs.len())));
    }
    let mut state: Vec<Option<bool>> = vec![None; c.atoms()];
    for conv in &c.convs {
        let m = plan.masks.get(&conv.name).ok_or_else(|| stale(format!("no mask for `{}`", conv.name)))?;
        if m.len() != conv.outputs.len() || m.iter().any(|&v| v > 1) {
            return Err(stale(format!("mask of `{}` is not {} zeros/ones", conv.name, conv.outputs.len())));
        }
        for (&a, &v) in conv.outputs.iter().zip(m) {
            let v = v == 1;
            match state[a] {
                Some(prev) if prev != v => {
                    return Err(Error::Prune(format!("mask of `{}` splits a coupled channel group", conv.name)))
                }
                _ => state[a] = Some(v),
            }
        }
    }
    let mut alive = vec![true; c.atoms()];
    for (k, atoms) in c.classes.iter().enumerate() {
        let keep = atoms.iter().filter_map(|&a| state[a]).collect::<BTreeSet<bool>>();
        if keep.len() > 1 {
            return Err(Error::Prune(format!("plan splits coupled channel class {k}")));
        }
        let keep = keep.into_iter().next().unwrap_or(true);
        if !keep && c.locked[k] {
            return Err(Error::Prune(format!("plan removes locked channel class {k}")));
        }
        for &a in atoms {
            alive[a] = keep;
        }
    }
    for f in &c.floors {
        if !f.iter().any(|&a| alive[a]) {
            return Err(Error::Prune("plan empties a tensor".into()));
        }
    }
    Ok(alive)
}

struct Kept<'a> {
    c: &'a Coupling,
    alive: &'a [bool],
}

impl Kept<'_> {
    fn conv(&self, name: &str) -> &ConvAtoms {
        self.c.conv(name).unwrap_or_else(|| panic!("traced conv `{name}`"))
    }

    fn count(&self, atoms: &[usize]) -> usize {
        atoms.iter().filter(|&&a| self.alive[a]).count()
    }

    fn inn(&self, name: &str) -> usize {
        self.count(&self.conv(name).inputs)
    }

    fn out(&self, name: &str) -> usize {
        self.count(&self.conv(name).outputs)
    }

    /// Kept channels in the two halves of a conv's output split at `first`.
    fn halves(&self, name: &str, first: usize) -> [usize; 2] {
        let o = &self.conv(name).outputs;
        [self.count(&o[..first]), self.count(&o[first..])]
    }
}

/// `Some(v)` unless the original was defaulted and `v` is still the default.
fn keep_default<T: PartialEq>(was: &Option<T>, v: T, default: T) -> Option<T> {
    if was.is_none() && v == default {
        None
    } else {
        Some(v)
    }
}

fn rebuild_op(id: &str, op: &NodeOp, k: &Kept<'_>) -> NodeOp {
    let p = |s: &str| format!("{id}.{s}");
    match op {
        NodeOp::Conv(c) => {
            let mut c = c.clone();
            let depthwise = c.spec().is_depthwise();
            c.c_in = k.inn(id);
            c.c_out = k.out(id);
            if depthwise {
                c.groups = c.c_out;
            }
            NodeOp::Conv(c)
        }
        NodeOp::GhostConv(c) => {
            let mut c = c.clone();
            c.c_in = k.inn(&p("primary"));
            c.c_out = 2 * k.out(&p("primary"));
            NodeOp::GhostConv(c)
        }
        NodeOp::GhostHg(c) => {
            let new_c = k.out(&p("fuse"));
            let w: [usize; 3] = std::array::from_fn(|i| 2 * k.out(&p(&format!("ghost{}.primary", i + 1))));
            NodeOp::GhostHg(GhostHgConfig {
                c: new_c,
                k: c.k,
                hidden: keep_default(&c.hidden, w, [new_c; 3]),
            })
        }
        NodeOp::HgStem(c) => {
            let stem = k.out(&p("stage1"));
            NodeOp::HgStem(HgStemConfig {
                c_in: k.inn(&p("stage1")),
                c_stem: stem,
                c_out: k.out(&p("stage3")),
                c_pw: keep_default(&c.c_pw, k.out(&p("stage2a")), stem),
            })
        }
        NodeOp::Faster(c) => {
            let new_c = k.out(&p("fuse"));
            NodeOp::Faster(FasterConfig {
                c: new_c,
                partial: keep_default(&c.partial, k.out(&p("pconv")), new_c / 4),
            })
        }
        NodeOp::C2fFaster(c) => {
            let halves = k.halves(&p("entry"), c.halves()[0]);
            let c_out = k.out(&p("exit"));
            NodeOp::C2fFaster(C2fFasterConfig {
                c_in: k.inn(&p("entry")),
                c_out,
                n: c.n,
                split: keep_default(&c.split, halves, [c_out / 2; 2]),
                partial: keep_default(&c.partial, k.out(&p("m0.pconv")), halves[0] / 4),
                literal_concat: c.literal_concat,
            })
        }
        NodeOp::C2f(c) => {
            let halves = k.halves(&p("entry"), c.halves()[0]);
            let c_out = k.out(&p("exit"));
            let mid: Vec<usize> = (0..c.n).map(|i| k.out(&p(&format!("m{i}.cv1")))).collect();
            NodeOp::C2f(C2fConfig {
                c_in: k.inn(&p("entry")),
                c_out,
                n: c.n,
                split: keep_default(&c.split, halves, [c_out / 2; 2]),
                mid: keep_default(&c.mid, mid, vec![halves[0]; c.n]),
            })
        }
        NodeOp::Sppf(c) => {
            let c_in = k.inn(&p("cv1"));
            NodeOp::Sppf(SppfConfig {
                c_in,
                c_out: k.out(&p("cv2")),
                c_mid: keep_default(&c.c_mid, k.out(&p("cv1")), c_in / 2),
                k: c.k,
            })
        }
        NodeOp::GcDetect(c) => {
            let mut c = c.clone();
            for (i, ch) in c.in_channels.iter_mut().enumerate() {
                *ch = k.inn(&p(&format!("s{i}.align")));
            }
            NodeOp::GcDetect(c)
        }
        NodeOp::PlainDetect(c) => {
            let mut c = c.clone();
            for (i, ch) in c.in_channels.iter_mut().enumerate() {
                *ch = k.inn(&p(&format!("s{i}.box1")));
            }
            NodeOp::PlainDetect(c)
        }
        other => other.clone(),
    }
}

fn rebuild_graph(g: &ModelGraph, c: &Coupling, alive: &[bool]) -> Result<ModelGraph> {
    let k = Kept { c, alive };
    let nodes = g
        .nodes()
        .iter()
        .map(|n| Node {
            id: n.id.clone(),
            op: rebuild_op(&n.id, &n.op, &k),
            inputs: n.inputs.clone(),
        })
        .collect();
    ModelGraph::new(*g.meta(), nodes, g.outputs().to_vec())
}

/// Pruned graph and weights: output rows of removed channels and the matching
/// input slices of every consumer are dropped.
pub fn apply_prune(g: &ModelGraph, w: &WeightStore, plan: &PrunePlan) -> Result<(ModelGraph, WeightStore)> {
    w.check_covers(g)?;
    let c = Coupling::build(g, &BTreeSet::new())?;
    let alive = plan_alive(g, &c, plan)?;
    let pruned = rebuild_graph(g, &c, &alive)?;
    let mut out = WeightStore::new();
    for entry in pruned.convs() {
        let conv = c.conv(&entry.name).ok_or_else(|| Error::Prune(format!("conv `{}` vanished", entry.name)))?;
        let old = conv.spec;
        let keep_out: Vec<usize> = (0..old.c_out).filter(|&j| alive[conv.outputs[j]]).collect();
        let keep_in: Vec<usize> = if old.groups == 1 {
            (0..old.c_in).filter(|&i| alive[conv.inputs[i]]).collect()
        } else {
            // Depthwise and grouped convs keep their per-group input slice whole.
            (0..old.c_in / old.groups).collect()
        };
        let src = w.get(&entry.weight_key()).expect("covered");
        let bias = w.get(&entry.bias_key()).expect("covered");
        let (in_pg, kk) = (old.c_in / old.groups, old.k * old.k);
        let mut data = Vec::with_capacity(keep_out.len() * keep_in.len() * kk);
        for &o in &keep_out {
            for &i in &keep_in {
                let at = (o * in_pg + i) * kk;
                data.extend_from_slice(&src[at..at + kk]);
            }
        }
        let shape = entry.spec.weight_shape().to_vec();
        if data.len() != entry.spec.weight_len() {
            return Err(Error::Prune(format!("`{}` slices to {} weights, expected {:?}", entry.name, data.len(), shape)));
        }
        out.insert(&entry.weight_key(), shape, data)?;
        out.insert(&entry.bias_key(), vec![keep_out.len()], keep_out.iter().map(|&j| bias[j]).collect())?;
    }
    Ok((pruned, out))
}
