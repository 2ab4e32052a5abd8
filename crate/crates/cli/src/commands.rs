use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde_json::json;

use litedet::graph::Rng;
use litedet::loss::{ciou, gradcheck as run_gradcheck, iou};
use litedet::tensor::{read_t4f0, write_t4f0};
use litedet::{
    apply_prune, compare_reports, graph_cost, init_weights, inner_mpdiou, inner_mpdiou_loss_grad, BoxCwh,
    CornerMode, CostReport, LossContext, ModelGraph, Pruner, Tensor4, WeightStore,
};

use crate::args::{
    AnalyzeArgs, CompareArgs, Corners, Format, ForwardArgs, GradcheckArgs, LossArgs, LossKind, ModelArgs, PruneArgs,
};
use crate::Failure;

type Run = Result<(), Failure>;

/// Gradient check passes below this relative error.
const GRADCHECK_LIMIT: f64 = 1e-3;

const BOX_HEADER: [&str; 8] = ["pred_cx", "pred_cy", "pred_w", "pred_h", "gt_cx", "gt_cy", "gt_w", "gt_h"];

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Run {
    fs::write(path, bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<ModelGraph, Failure> {
    ModelGraph::from_json(&read_text(path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_model(m: &ModelArgs) -> Result<(ModelGraph, WeightStore), Failure> {
    let g = load_graph(&m.graph)?;
    let w = match &m.weights {
        Some(p) => WeightStore::load(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
        None => init_weights(&g, m.seed),
    };
    Ok((g, w))
}

fn parse_shape(s: &str) -> Result<[usize; 4], Failure> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(format!("input shape `{s}` is not NxCxHxW")))?;
    match dims[..] {
        [n, c, h, w] if n > 0 && c > 0 && h > 0 && w > 0 => Ok([n, c, h, w]),
        _ => Err(Failure::usage(format!("input shape `{s}` needs four positive dims NxCxHxW"))),
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

pub fn analyze(a: AnalyzeArgs) -> Run {
    let g = load_graph(&a.graph)?;
    let shape = match &a.input_shape {
        Some(s) => parse_shape(s)?,
        None => g.meta().input_shape,
    };
    let report = graph_cost(&g, shape)?;
    if let Some(out) = &a.out {
        write_file(out, report.to_json().as_bytes())?;
    }
    match a.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Json => print!("{}", report.to_json()),
    }
    Ok(())
}

fn random_input(shape: [usize; 4], seed: u64) -> Result<Tensor4, Failure> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Ok(Tensor4::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())?)
}

/// File stem for an output name; `:` is not portable in file names.
fn dump_name(name: &str) -> String {
    name.replace(':', "_")
}

pub fn forward(a: ForwardArgs) -> Run {
    let (g, w) = load_model(&a.model)?;
    let x = match (&a.input, &a.input_shape) {
        (Some(_), Some(_)) => return Err(Failure::usage("give either --input or --input-shape, not both")),
        (Some(p), None) => {
            let f = fs::File::open(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            read_t4f0(std::io::BufReader::new(f))?
        }
        (None, s) => {
            let shape = s.as_deref().map(parse_shape).transpose()?.unwrap_or(g.meta().input_shape);
            random_input(shape, a.model.seed)?
        }
    };
    for n in &a.nodes {
        if g.node(n).is_none() {
            return Err(Failure::usage(format!("no node `{n}` in the graph")));
        }
    }
    let outs = litedet::forward_graph(&g, &w, &x)?;
    let mut names: Vec<String> = Vec::new();
    for id in g.outputs().iter().chain(&a.nodes) {
        for name in g.node(id).expect("validated").op.output_names(id) {
            if !names.contains(&name) {
                names.push(name);
            }
        }
    }
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
        for name in &names {
            let path = dir.join(format!("{}.t4f0", dump_name(name)));
            let f = fs::File::create(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            write_t4f0(&outs[name], BufWriter::new(f))?;
        }
    }
    match a.format {
        Format::Table => {
            for name in &names {
                let [n, c, h, w] = outs[name].shape();
                println!("{name}\t{n}x{c}x{h}x{w}");
            }
        }
        Format::Json => {
            let shapes: serde_json::Map<String, serde_json::Value> =
                names.iter().map(|n| (n.clone(), json!(outs[n].shape()))).collect();
            print_json(&json!({ "outputs": shapes }));
        }
    }
    Ok(())
}

fn read_boxes(path: &Path) -> Result<Vec<(BoxCwh, BoxCwh)>, Failure> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if header.iter().ne(BOX_HEADER) {
        return Err(Failure::usage(format!(
            "{}: header must be `{}`",
            path.display(),
            BOX_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let bad = |m: String| Failure::usage(format!("{}: row {row}: {m}", path.display()));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", rec.len())));
        }
        let v: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("`{f}` is not a number"))))
            .collect::<Result<_, _>>()?;
        let p = BoxCwh::new(v[0], v[1], v[2], v[3]);
        let g = BoxCwh::new(v[4], v[5], v[6], v[7]);
        p.validate().map_err(|e| bad(e.to_string()))?;
        g.validate().map_err(|e| bad(e.to_string()))?;
        rows.push((p, g));
    }
    Ok(rows)
}

pub fn loss(a: LossArgs) -> Run {
    let ctx = LossContext::new(a.img_w, a.img_h, a.ratio).with_corners(match a.corners {
        Corners::Inner => CornerMode::Inner,
        Corners::Original => CornerMode::Original,
    });
    ctx.validate()?;
    if a.grad && a.kind != LossKind::InnerMpdiou {
        return Err(Failure::usage("--grad is only available for --kind inner-mpdiou"));
    }
    let rows = read_boxes(&a.boxes)?;
    let mut out = Vec::with_capacity(rows.len());
    for (p, g) in &rows {
        let (value, grad) = match a.kind {
            LossKind::InnerMpdiou if a.grad => {
                let (l, d) = inner_mpdiou_loss_grad(p, g, &ctx)?;
                (1.0 - l, Some(d))
            }
            LossKind::InnerMpdiou => (inner_mpdiou(p, g, &ctx)?, None),
            LossKind::Iou => (iou(p, g), None),
            LossKind::Ciou => (ciou(p, g), None),
        };
        out.push((value, 1.0 - value, grad));
    }
    let mean = (!out.is_empty()).then(|| out.iter().map(|r| r.1).sum::<f64>() / out.len() as f64);
    match a.format {
        Format::Table => {
            let mut head = "row,value,loss".to_string();
            if a.grad {
                head.push_str(",d_cx,d_cy,d_w,d_h");
            }
            println!("{head}");
            for (i, (v, l, d)) in out.iter().enumerate() {
                let mut line = format!("{},{v},{l}", i + 1);
                if let Some(d) = d {
                    for x in d {
                        line.push_str(&format!(",{x}"));
                    }
                }
                println!("{line}");
            }
            println!("mean,,{}", mean.map_or(String::new(), |m| m.to_string()));
        }
        Format::Json => {
            let rows: Vec<_> = out
                .iter()
                .enumerate()
                .map(|(i, (v, l, d))| json!({"row": i + 1, "value": v, "loss": l, "grad": d}))
                .collect();
            print_json(&json!({"rows": rows, "mean_loss": mean}));
        }
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Run {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Failure::usage(format!("--eps must be positive, got {}", a.eps)));
    }
    if a.samples == 0 {
        eprintln!("warning: --samples 0 checks nothing");
    }
    let corrupt = a.corrupt;
    let report = run_gradcheck(a.samples, a.eps, a.seed, |p, g, c| {
        let (l, d) = inner_mpdiou_loss_grad(p, g, c)?;
        Ok((l, if corrupt { d.map(|x| x * 1.5) } else { d }))
    })?;
    match a.format {
        Format::Table => println!(
            "checked {} samples ({} rejected near kinks), max relative error {:e}",
            report.checked, report.rejected, report.max_rel_err
        ),
        Format::Json => print_json(&serde_json::to_value(&report).expect("report serializes")),
    }
    if report.max_rel_err < GRADCHECK_LIMIT {
        Ok(())
    } else {
        Err(Failure::verify(format!(
            "max relative error {:e} is not below {GRADCHECK_LIMIT:e}",
            report.max_rel_err
        )))
    }
}

pub fn prune(a: PruneArgs) -> Run {
    if !(a.target_speedup >= 1.0 && a.target_speedup.is_finite()) {
        return Err(Failure::usage(format!("--target-speedup must be >= 1, got {}", a.target_speedup)));
    }
    if !(a.tolerance > 0.0 && a.tolerance < 1.0) {
        return Err(Failure::usage(format!("--tolerance must lie in (0, 1), got {}", a.tolerance)));
    }
    let (g, w) = load_model(&a.model)?;
    let protected: BTreeSet<String> = a.protect.iter().cloned().collect();
    let plan = Pruner::new(&g, &w, &protected)?.search_speedup(a.target_speedup, a.tolerance)?;
    let (pg, pw) = apply_prune(&g, &w, &plan)?;
    let shape = g.meta().input_shape;
    let delta = compare_reports(&graph_cost(&g, shape)?, &graph_cost(&pg, shape)?)?;
    if let Some(p) = &a.out_graph {
        if plan.is_identity() {
            // Untouched graphs are copied verbatim.
            write_file(p, read_text(&a.model.graph)?.as_bytes())?;
        } else {
            write_file(p, pg.to_json().as_bytes())?;
        }
    }
    if let Some(p) = &a.out_weights {
        write_file(p, &pw.to_bytes())?;
    }
    if let Some(p) = &a.out_plan {
        write_file(p, plan.to_json().as_bytes())?;
    }
    match a.format {
        Format::Table => {
            print!("{}", delta.to_table());
            println!("mac_ratio: {:.4}", plan.achieved_mac_ratio);
            println!("sparsity: {:.4}", plan.achieved_sparsity);
            if let Some(msg) = &plan.warning {
                println!("warning: {msg}");
            }
        }
        Format::Json => print_json(&json!({
            "achieved_mac_ratio": plan.achieved_mac_ratio,
            "achieved_sparsity": plan.achieved_sparsity,
            "warning": plan.warning,
            "delta": serde_json::from_str::<serde_json::Value>(&delta.to_json()).expect("delta is json"),
        })),
    }
    Ok(())
}

pub fn compare(a: CompareArgs) -> Run {
    let load = |p: &Path| -> Result<CostReport, Failure> {
        CostReport::from_json(&read_text(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
    };
    let delta = compare_reports(&load(&a.a)?, &load(&a.b)?)?;
    match a.format {
        Format::Table => print!("{}", delta.to_table()),
        Format::Json => print!("{}", delta.to_json()),
    }
    Ok(())
}
