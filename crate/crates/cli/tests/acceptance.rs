//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails or overruns its time budget.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde_json::json;

use litedet::blocks::ConvSpec;
use litedet::cost::conv_cost;
use litedet::graph::fixtures;
use litedet::loss::{gradcheck, inner_mpdiou_terms, iou, monte_carlo_inter_union, random_pair_in, rel_err};
use litedet::prune::{lamp_scores, select_channels};
use litedet::tensor::{conv2d, conv2d_reference};
use litedet::{
    apply_prune, forward_graph, graph_cost, init_weights, inner_mpdiou, inner_mpdiou_loss_grad, BoxCwh, ConvParams,
    LossContext, ModelGraph, Pruner, Rng, Tensor4, WeightStore,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_litedet"))
}

fn random_tensor(shape: [usize; 4], rng: &mut Rng) -> Tensor4 {
    let n = shape.iter().product();
    Tensor4::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

fn grouped_conv() -> Outcome {
    let grouped = ConvSpec::new(64, 64, 3).groups(16);
    let dense = ConvSpec::new(64, 64, 3);
    let (g, d) = (grouped.weight_len(), dense.weight_len());
    check(g == 2304 && d == 36_864, format!("weights {g} vs {d}"))?;
    check(d == 16 * g, "ratio is not exactly 16")?;
    Ok(format!("weights {g} vs {d}, ratio {}", d / g))
}

fn partial_conv() -> Outcome {
    let c = 64;
    let shape = [1, c, 40, 40];
    let dense = conv_cost("dense", &ConvSpec::new(c, c, 3), shape).map_err(|e| e.to_string())?;
    let pconv = conv_cost("pconv", &ConvSpec::new(c / 4, c / 4, 3).pinned(), [1, c / 4, 40, 40])
        .map_err(|e| e.to_string())?;
    check(dense.macs == 16 * pconv.macs, format!("{} vs {}", pconv.macs, dense.macs))?;
    Ok(format!("MACs {} vs {} = 1/16", pconv.macs, dense.macs))
}

fn inner_mpdiou_oracle() -> Outcome {
    let p = BoxCwh::new(1.0, 1.0, 2.0, 2.0);
    let g = BoxCwh::new(2.0, 2.0, 2.0, 2.0);
    let v = inner_mpdiou(&p, &g, &LossContext::new(10.0, 10.0, 1.0)).map_err(|e| e.to_string())?;
    check((v - 0.122857).abs() <= 1e-6, format!("worked example gave {v}"))?;

    let mut rng = Rng::new(2024);
    let pairs: Vec<(BoxCwh, BoxCwh)> = (0..1000).map(|_| random_pair_in(&mut rng, 100.0)).collect();
    let ctx = LossContext::new(100.0, 100.0, 1.0);
    let worst = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (p, g))| {
            let t = inner_mpdiou_terms(p, g, &ctx).unwrap();
            let (mi, mu) = monte_carlo_inter_union(p, g, 1.0, 1000, i as u64).unwrap();
            let ei = if t.inter == 0.0 && mi == 0.0 { 0.0 } else { rel_err(t.inter, mi) };
            ei.max(rel_err(t.union, mu))
        })
        .reduce(|| 0.0, f64::max);
    check(worst < 1e-2, format!("worst relative error {worst:e}"))?;
    Ok(format!("value {v:.6}; 1000 pairs x 1e6 samples, worst rel err {worst:.2e}"))
}

fn iou_reduction() -> Outcome {
    let mut rng = Rng::new(77);
    let ctx = LossContext::new(100.0, 100.0, 1.0);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (p, g) = random_pair_in(&mut rng, 100.0);
        let t = inner_mpdiou_terms(&p, &g, &ctx).map_err(|e| e.to_string())?;
        worst = worst.max((t.inter / t.union - iou(&p, &g)).abs());
    }
    check(worst <= 1e-9, format!("max diff {worst:e}"))?;
    Ok(format!("10000 pairs, max |diff| {worst:.1e}"))
}

fn gradient_check() -> Outcome {
    let r = gradcheck(500, 1e-4, 0, inner_mpdiou_loss_grad).map_err(|e| e.to_string())?;
    check(r.checked >= 500, format!("only {} samples", r.checked))?;
    check(r.max_rel_err < 1e-4, format!("max rel err {:e}", r.max_rel_err))?;
    let out = bin().args(["gradcheck", "--samples", "500", "--eps", "1e-4"]).output().unwrap();
    check(out.status.code() == Some(0), format!("gradcheck exited {:?}", out.status.code()))?;
    Ok(format!("{} samples, max rel err {:.2e}; CLI exit 0", r.checked, r.max_rel_err))
}

fn lamp_fidelity() -> Outcome {
    let s = lamp_scores(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?.scores;
    let want = [1.0 / 14.0, 4.0 / 13.0, 1.0];
    check(s.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-12), format!("{s:?}"))?;
    let mut rng = Rng::new(16);
    for t in 0..100 {
        let n = 2 + rng.below(300) as usize;
        let w: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let s = lamp_scores(&w).unwrap().scores;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()));
        for pair in idx.windows(2) {
            let (u, v) = (pair[1], pair[0]);
            if w[u].abs() > w[v].abs() {
                check(s[u] > s[v], format!("ordering broken in tensor {t}"))?;
            }
        }
        let alpha = rng.uniform(1e-3, 1e3);
        let scaled = lamp_scores(&w.iter().map(|x| x * alpha).collect::<Vec<_>>()).unwrap().scores;
        let d = s.iter().zip(&scaled).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        check(d <= 1e-9, format!("rescaling moved scores by {d:e} in tensor {t}"))?;
    }
    Ok("exact example; ordering and scale invariance on 100 tensors".into())
}

fn pruning_regimes() -> Outcome {
    let g = ModelGraph::from_json(fixtures::IMPROVED_LITE).unwrap();
    let w = init_weights(&g, 0);
    let shape = g.meta().input_shape;
    let base = graph_cost(&g, shape).unwrap().total_macs as f64;
    let mut p = Pruner::new(&g, &w, &BTreeSet::new()).map_err(|e| e.to_string())?;
    let mut seen = Vec::new();
    let mut rng = Rng::new(3);
    let x = random_tensor(shape, &mut rng);
    for target in [1.5, 2.0, 2.5, 3.0] {
        let plan = p.search_speedup(target, 0.02).map_err(|e| e.to_string())?;
        let (pg, pw) = apply_prune(&g, &w, &plan).map_err(|e| format!("{target}x: {e}"))?;
        let pg = ModelGraph::from_json(&pg.to_json()).map_err(|e| format!("{target}x revalidation: {e}"))?;
        let r = base / graph_cost(&pg, shape).unwrap().total_macs as f64;
        check((r - target).abs() <= 0.02 * target, format!("{target}x achieved {r:.4}"))?;
        forward_graph(&pg, &pw, &x).map_err(|e| format!("{target}x forward: {e}"))?;
        seen.push(format!("{r:.3}"));
    }
    Ok(format!("achieved {}", seen.join(", ")))
}

fn toy_equivalence() -> Outcome {
    let toy = |a_out: usize| {
        let j = json!({
            "meta": {"input_shape": [1, 3, 12, 12], "num_classes": 1},
            "nodes": [
                {"id": "x", "kind": "input"},
                {"id": "a", "kind": "conv", "attrs": {"c_in": 3, "c_out": a_out, "k": 3}, "inputs": ["x"]},
                {"id": "b", "kind": "conv", "attrs": {"c_in": a_out, "c_out": 4, "k": 3}, "inputs": ["a"]}
            ],
            "outputs": ["b"]
        });
        ModelGraph::from_json(&j.to_string()).unwrap()
    };
    let g = toy(3);
    let w = init_weights(&g, 12);
    let mut plan = select_channels(&g, &w, 0.0, &BTreeSet::new()).unwrap();
    plan.masks["a"][1] = 0;
    let (pg, pw) = apply_prune(&g, &w, &plan).map_err(|e| e.to_string())?;

    let (aw, ab, bw) = (w.get("a.weight").unwrap(), w.get("a.bias").unwrap(), w.get("b.weight").unwrap());
    let mut rw = WeightStore::new();
    rw.insert("a.weight", vec![2, 3, 3, 3], [&aw[..27], &aw[54..81]].concat()).unwrap();
    rw.insert("a.bias", vec![2], vec![ab[0], ab[2]]).unwrap();
    let b: Vec<f32> = (0..4).flat_map(|o| [&bw[o * 27..o * 27 + 9], &bw[o * 27 + 18..o * 27 + 27]].concat()).collect();
    rw.insert("b.weight", vec![4, 2, 3, 3], b).unwrap();
    rw.insert("b.bias", vec![4], w.get("b.bias").unwrap().to_vec()).unwrap();

    let x = random_tensor([2, 3, 12, 12], &mut Rng::new(1));
    let got = forward_graph(&pg, &pw, &x).map_err(|e| e.to_string())?;
    let want = forward_graph(&toy(2), &rw, &x).map_err(|e| e.to_string())?;
    check(got["b"].bit_eq(&want["b"]), "outputs differ")?;
    Ok("channel a#1 removed; bit-exact with hand-built net".into())
}

fn block_swap() -> Outcome {
    let imp = ModelGraph::from_json(fixtures::IMPROVED_LITE).unwrap();
    let base = ModelGraph::from_json(fixtures::BASELINE_LITE).unwrap();
    let ri = graph_cost(&imp, imp.meta().input_shape).unwrap();
    let rb = graph_cost(&base, base.meta().input_shape).unwrap();
    check(ri.total_params < rb.total_params, "params not lower")?;
    check(ri.total_macs < rb.total_macs, "MACs not lower")?;
    let neck = |id: &str| id.starts_with("neck_");
    let (ni, nb) = (ri.subtotal(neck).0, rb.subtotal(neck).0);
    let cut = 1.0 - ni as f64 / nb as f64;
    check(cut >= 0.10, format!("neck params cut {:.2}%", cut * 100.0))?;
    Ok(format!(
        "params {} < {}, MACs {} < {}, neck params -{:.2}%",
        ri.total_params,
        rb.total_params,
        ri.total_macs,
        rb.total_macs,
        cut * 100.0
    ))
}

fn determinism() -> Outcome {
    let g = ModelGraph::from_json(fixtures::IMPROVED_LITE).unwrap();
    let w1 = init_weights(&g, 42);
    check(w1.to_bytes() == init_weights(&g, 42).to_bytes(), "init_weights differs")?;
    let x = random_tensor([1, 3, 128, 128], &mut Rng::new(42));
    let (a, b) = (forward_graph(&g, &w1, &x).unwrap(), forward_graph(&g, &w1, &x).unwrap());
    check(a.iter().all(|(k, t)| b[k].bit_eq(t)), "forward differs")?;
    let p1 = Pruner::new(&g, &w1, &BTreeSet::new()).unwrap().search_speedup(2.0, 0.02).unwrap();
    let p2 = Pruner::new(&g, &w1, &BTreeSet::new()).unwrap().search_speedup(2.0, 0.02).unwrap();
    check(p1.to_json() == p2.to_json(), "plans differ")?;

    let dir = tempfile::tempdir().unwrap();
    let graph = fixture_dir().join("improved-lite.json");
    let mut runs = Vec::new();
    for k in 0..2 {
        let d = dir.path().join(format!("run{k}"));
        let st = bin()
            .args(["forward", "--seed", "42", "--input-shape", "1x3x128x128"])
            .arg("--graph")
            .arg(&graph)
            .arg("--out-dir")
            .arg(d.join("fwd"))
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        check(st.success(), "forward run failed")?;
        let st = bin()
            .args(["prune", "--seed", "42", "--target-speedup", "2.0"])
            .arg("--graph")
            .arg(&graph)
            .arg("--out-graph")
            .arg(d.join("g.json"))
            .arg("--out-weights")
            .arg(d.join("w.ldw"))
            .arg("--out-plan")
            .arg(d.join("plan.json"))
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        check(st.success(), "prune run failed")?;
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for entry in walk(&d) {
            files.push((entry.strip_prefix(&d).unwrap().display().to_string(), std::fs::read(&entry).unwrap()));
        }
        files.sort();
        runs.push(files);
    }
    check(runs[0].len() == 9, format!("{} files written", runs[0].len()))?;
    check(runs[0] == runs[1], "CLI outputs differ between runs")?;
    Ok(format!("library and CLI outputs identical ({} files)", runs[0].len()))
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn conv_oracle() -> Outcome {
    let mut rng = Rng::new(11);
    let mut worst = 0.0f32;
    for case in 0..200 {
        let groups = [1, 1, 2, 3, 4][rng.below(5) as usize];
        let c_in = groups * (1 + rng.below(6) as usize);
        let depthwise = groups > 1 && rng.below(3) == 0;
        let (groups, c_in, c_out) = if depthwise {
            (c_in, c_in, c_in)
        } else {
            (groups, c_in, groups * (1 + rng.below(6) as usize))
        };
        let k = 1 + rng.below(5) as usize;
        let stride = 1 + rng.below(3) as usize;
        let pad = rng.below(k);
        let h = k + rng.below(18) as usize;
        let wd = k + rng.below(18) as usize;
        let n = 1 + rng.below(2) as usize;
        let wlen = c_out * (c_in / groups) * k * k;
        let weight = (0..wlen).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let bias = Some((0..c_out).map(|_| rng.uniform(-1.0, 1.0) as f32).collect());
        let p = ConvParams::new(weight, [c_out, c_in / groups, k, k], bias, (stride, stride), (pad, pad), groups)
            .map_err(|e| format!("case {case}: {e}"))?;
        let x = random_tensor([n, c_in, h, wd], &mut rng);
        let fast = conv2d(&x, &p).map_err(|e| format!("case {case}: {e}"))?;
        let slow = conv2d_reference(&x, &p).map_err(|e| format!("case {case}: {e}"))?;
        let d = fast.max_abs_diff(&slow);
        check(d <= 1e-5, format!("case {case}: max abs diff {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("200 configs, max abs diff {worst:.1e}"))
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 11] = [
        ("grouped-conv reduction", 1, grouped_conv),
        ("partial-conv complexity", 1, partial_conv),
        ("inner-mpdiou correctness", 30, inner_mpdiou_oracle),
        ("iou reduction", 5, iou_reduction),
        ("gradient check", 10, gradient_check),
        ("lamp fidelity", 5, lamp_fidelity),
        ("pruning regimes", 60, pruning_regimes),
        ("pruned-model equivalence", 1, toy_equivalence),
        ("block-swap direction", 5, block_swap),
        ("determinism", 30, determinism),
        ("conv oracle", 60, conv_oracle),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let over = took > Duration::from_secs(*budget);
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {budget} s budget")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} criterion {:>2} {name}: {detail} [{:.2} s]", i + 1, took.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
