//! End-to-end acceptance run. Every criterion prints one PASS/FAIL line and the
//! test fails if any criterion does. Criteria run one after another inside a
//! single test so the timing-sensitive ones never share the CPU with the rest.

use std::time::{Duration, Instant};

use lpsnet::archspec::{catalog, initial_spec, preset, Dimension, NetworkSpec};
use lpsnet::costmodel::{block_cost, count_flops, flops_efficiency, measure_latency};
use lpsnet::evaluation::{evaluate_miou, poly_lr, synth_shapes, train, TrainConfig};
use lpsnet::expander::{expand, surrogate_oracle, Evaluator, LookupEvaluator, Memoized, SearchOptions};
use lpsnet::netcore::{interaction_for, BlockKind, BlockModule, InteractionKind, InteractionModule, NetworkInstance};
use lpsnet::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Steps of the published expansion: step, depths, widths, ratios, dimension.
const TABLE: [(&str, &str, &str, &str); 15] = [
    ("1,1,1,1,1", "4,8,16,32,32", "1/2,0,0", "-"),
    ("1,1,1,8,8", "4,8,16,32,32", "1/2,0,0", "Depth"),
    ("1,1,1,8,8", "4,16,32,64,64", "1/2,0,0", "Width"),
    ("1,1,1,8,8", "8,24,48,96,96", "1/2,0,0", "Width"),
    ("1,1,1,8,8", "8,24,48,96,96", "5/8,0,0", "Resolution"),
    ("1,3,3,10,10", "8,24,48,96,96", "5/8,0,0", "Depth"),
    ("1,3,3,10,10", "8,24,48,96,96", "5/8,1/4,0", "Resolution"),
    ("1,3,3,10,10", "8,24,48,96,96", "3/4,1/4,0", "Resolution"),
    ("1,3,3,10,10", "8,24,48,96,96", "1,1/4,0", "Resolution"),
    ("1,3,3,10,10", "8,24,64,128,128", "1,1/4,0", "Width"),
    ("1,3,3,10,10", "8,24,64,160,160", "1,1/4,0", "Width"),
    ("1,3,3,10,10", "8,24,64,160,160", "9/8,1/4,0", "Resolution"),
    ("1,3,3,10,10", "8,24,64,160,160", "11/8,1/4,0", "Resolution"),
    ("1,3,3,10,10", "8,32,80,192,192", "11/8,1/4,0", "Width"),
    ("1,3,3,10,10", "8,32,96,224,224", "11/8,1/4,0", "Width"),
];

/// The recorded `(catalog index, k)` choice behind each published step.
const CHOICES: [(usize, u32); 14] = [
    (2, 7),
    (4, 1),
    (3, 1),
    (7, 1),
    (0, 2),
    (8, 2),
    (7, 1),
    (7, 2),
    (5, 1),
    (6, 1),
    (7, 1),
    (7, 2),
    (4, 1),
    (5, 1),
];

fn ints<const N: usize>(text: &str) -> [u32; N] {
    let v: Vec<u32> = text.split(',').map(|t| t.parse().unwrap()).collect();
    v.try_into().unwrap()
}

/// `"a/b"` or an integer, in eighths.
fn eighths(text: &str) -> u32 {
    match text.split_once('/') {
        Some((n, d)) => 8 * n.parse::<u32>().unwrap() / d.parse::<u32>().unwrap(),
        None => 8 * text.parse::<u32>().unwrap(),
    }
}

fn table_spec(row: usize) -> NetworkSpec {
    let (d, w, r, _) = TABLE[row];
    let ratios: Vec<u32> = r.split(',').map(eighths).collect();
    NetworkSpec::new(ints(d), ints(w), ratios.try_into().unwrap()).unwrap()
}

fn table_replay() -> Outcome {
    let mut spec = initial_spec();
    if spec.serialize() != table_spec(0).serialize() {
        return Err("N0 differs from the first row".into());
    }
    for (step, &(op, k)) in CHOICES.iter().enumerate() {
        let op = catalog()[op];
        spec = spec.apply(&op, k).map_err(|e| format!("step {}: {e}", step + 1))?;
        if spec.serialize() != table_spec(step + 1).serialize() {
            return Err(format!("step {}: got {}", step + 1, spec.to_compact()));
        }
        if op.dimension().to_string() != TABLE[step + 1].3 {
            return Err(format!("step {}: dimension {}", step + 1, op.dimension()));
        }
    }
    Ok("14 steps string-equal".into())
}

fn selection_replay() -> Outcome {
    let table = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/expansion_reference.csv");
    let mut eval = Memoized::new(LookupEvaluator::from_csv(table).map_err(|e| e.to_string())?);
    let traj = expand(&initial_spec(), 14, &mut eval, SearchOptions::default()).map_err(|e| e.to_string())?;
    let got: Vec<String> = traj.dimensions().iter().map(Dimension::to_string).collect();
    let want: Vec<&str> = TABLE[1..].iter().map(|r| r.3).collect();
    if got != want {
        return Err(format!("dimensions {got:?}"));
    }
    let k_match = traj.steps.iter().zip(CHOICES).take_while(|(s, c)| (s.op.index(), s.k) == *c).count();
    Ok(format!("dimension column exact; recorded k reproduced for the first {k_match} steps"))
}

/// Closest-to-target stepsize over every applicable k, scanned exhaustively.
fn brute_stepsize(spec: &NetworkSpec, op: usize, target: f64, eval: &mut impl Evaluator) -> Option<(u32, f64)> {
    let mut best: Option<(u32, f64, f64)> = None;
    for k in 1..=64 {
        let Ok(next) = spec.apply(&catalog()[op], k) else { break };
        let l = eval.lat(&next).unwrap();
        if best.is_none_or(|b| (l - target).abs() < b.2) {
            best = Some((k, l, (l - target).abs()));
        }
    }
    best.map(|b| (b.0, b.1))
}

fn brute_force_selection() -> Outcome {
    for seed in [11u64, 22, 33] {
        let mut lib_eval = Memoized::new(surrogate_oracle(seed));
        let traj = expand(&initial_spec(), 10, &mut lib_eval, SearchOptions::default()).map_err(|e| e.to_string())?;
        if traj.steps.len() != 10 {
            return Err(format!("seed {seed}: stopped early: {:?}", traj.stopped));
        }
        let mut oracle = Memoized::new(surrogate_oracle(seed));
        let mut prev = initial_spec();
        for step in &traj.steps {
            let (p0, l0) = (oracle.perf(&prev).unwrap(), oracle.lat(&prev).unwrap());
            let target = (0..catalog().len())
                .filter_map(|i| prev.apply(&catalog()[i], 1).ok())
                .map(|s| oracle.lat(&s).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut best: Option<(usize, u32, f64)> = None;
            for op in 0..catalog().len() {
                let Some((k, l)) = brute_stepsize(&prev, op, target, &mut oracle) else { continue };
                if l <= l0 {
                    continue;
                }
                let next = prev.apply(&catalog()[op], k).unwrap();
                let r = (oracle.perf(&next).unwrap() - p0) / (l - l0);
                if best.is_none_or(|b| r > b.2) {
                    best = Some((op, k, r));
                }
            }
            let (op, k, _) = best.ok_or("no candidate")?;
            if (op, k) != (step.op.index(), step.k) {
                return Err(format!(
                    "seed {seed} step {}: library chose op {} k={}, brute force op {op} k={k}",
                    step.index,
                    step.op.index(),
                    step.k
                ));
            }
            prev = step.spec.clone();
        }
    }
    Ok("3 surrogates x 10 steps agree".into())
}

/// FLOPs and params of the Conv3x3 network with Bilateral-B interactions,
/// counted by walking the layer list directly.
fn naive_cost(spec: &NetworkSpec, classes: u64, (h, w): (u64, u64)) -> (u64, u64) {
    let (mut flops, mut params) = (0u64, 0u64);
    let ratios: Vec<u64> = spec.ratios.iter().map(|r| (r.as_f64() * 8.0).round() as u64).filter(|&r| r > 0).collect();
    let snap = |e: u64, r: u64| ((r * e + 64) / 128 * 16).max(16);
    let resize = |c: u64, from: (u64, u64), to: (u64, u64)| if from == to { 0 } else { 8 * c * to.0 * to.1 };
    let mut conv = |cin: u64, cout: u64, k: u64, out: (u64, u64), norm_relu: bool, bias: bool| {
        let mut f = 0;
        for _y in 0..out.0 {
            for _x in 0..out.1 {
                for _o in 0..cout {
                    f += 2 * k * k * cin;
                }
            }
        }
        if norm_relu {
            f += 2 * cout * out.0 * out.1;
        }
        params += k * k * cin * cout + if norm_relu { 2 * cout } else { 0 } + if bias { cout } else { 0 };
        f
    };
    let mut ext: Vec<(u64, u64)> = ratios.iter().map(|&r| (snap(h, r), snap(w, r))).collect();
    for &e in &ext {
        flops += resize(3, (h, w), e);
    }
    let mut ch = 3u64;
    for j in 0..5 {
        let cout = spec.widths[j] as u64;
        for e in ext.iter_mut() {
            let mut cin = ch;
            for b in 0..spec.depths[j] {
                if b == 0 && j < 4 {
                    *e = (e.0.div_ceil(2), e.1.div_ceil(2));
                }
                flops += conv(cin, cout, 3, *e, true, false);
                cin = cout;
            }
        }
        ch = cout;
        if j >= 2 {
            for p in 0..ext.len().saturating_sub(1) {
                let (hi, lo) = (ext[p], ext[p + 1]);
                flops += resize(ch, lo, hi) + ch * hi.0 * hi.1;
                flops += resize(ch, hi, lo) + ch * lo.0 * lo.1;
            }
        }
    }
    let top = (ext.iter().map(|e| e.0).max().unwrap(), ext.iter().map(|e| e.1).max().unwrap());
    for &e in &ext {
        flops += resize(ch, e, top);
    }
    flops += conv(ch * ext.len() as u64, ch, 3, top, true, false);
    flops += conv(ch, classes, 1, top, false, true);
    flops += resize(classes, top, (h, w));
    (flops, params)
}

fn flops_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut specs = Vec::new();
    while specs.len() < 20 {
        let mut s = initial_spec();
        for _ in 0..rng.random_range(2..10) {
            let op = catalog()[rng.random_range(0..catalog().len())];
            if let Ok(t) = s.apply(&op, rng.random_range(1..4)) {
                s = t;
            }
        }
        if specs.len() < 5 && s.num_paths() < 2 {
            continue;
        }
        specs.push(s);
    }
    for s in &specs {
        for res in [(256, 512), (512, 1024)] {
            let r = count_flops(s, BlockKind::Conv3x3, interaction_for(s, InteractionKind::BilateralB), 19, res)
                .map_err(|e| e.to_string())?;
            let want = naive_cost(s, 19, (res.0 as u64, res.1 as u64));
            if (r.total_flops, r.total_params) != want {
                return Err(format!("{} at {res:?}: {:?} vs {want:?}", s.to_compact(), (r.total_flops, r.total_params)));
            }
        }
    }
    let paths: Vec<usize> = specs.iter().map(NetworkSpec::num_paths).collect();
    Ok(format!("20 specs x 2 resolutions exact (paths per spec {paths:?})"))
}

fn interaction_properties() -> Outcome {
    let variants = &InteractionKind::ALL[1..];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let c = rng.random_range(1..12);
        let (h, w) = (rng.random_range(4..40), rng.random_range(4..40));
        let (hl, wl) = (rng.random_range(2..=h), rng.random_range(2..=w));
        let noise = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f32>>();
        let high = Tensor::from_vec(Shape::new(1, c, h, w), noise(c * h * w, &mut rng));
        let low = Tensor::from_vec(Shape::new(1, c, hl, wl), noise(c * hl * wl, &mut rng));
        for &kind in variants {
            let m = InteractionModule::<f32>::new(kind, c, case).map_err(|e| e.to_string())?;
            let (ho, lo) = m.forward(&high, &low).map_err(|e| e.to_string())?;
            if ho.shape() != high.shape() || lo.shape() != low.shape() {
                return Err(format!("case {case} {kind}: shapes {:?} {:?}", ho.shape(), lo.shape()));
            }
        }
        let bi = InteractionModule::<f32>::new(InteractionKind::BilateralB, c, case).unwrap();
        if bi.num_params() != 0 {
            return Err(format!("bilateral-b has {} params", bi.num_params()));
        }
        let (a, b) = (rng.random_range(-2.0f32..2.0), rng.random_range(-2.0f32..2.0));
        let (ho, lo) = bi
            .forward(&Tensor::full(high.shape(), a), &Tensor::full(low.shape(), b))
            .unwrap();
        if ho.data().iter().chain(lo.data()).any(|&v| v != a + b) {
            return Err(format!("case {case}: constant inputs {a} and {b} do not sum"));
        }
        let (ho, _) = bi.forward(&high, &Tensor::zeros(low.shape())).unwrap();
        if ho != high {
            return Err(format!("case {case}: zero low input changed the high path"));
        }
    }
    Ok(format!("{} variants x 100 shape pairs", variants.len()))
}

fn forward_shapes() -> Outcome {
    for name in ["S", "M", "L"] {
        let s = preset(name).unwrap();
        let net = NetworkInstance::<f32>::build(&s, BlockKind::Conv3x3, interaction_for(&s, InteractionKind::BilateralB), 19, 0)
            .map_err(|e| e.to_string())?;
        for (h, w) in [(512, 1024), (1024, 2048)] {
            let x = Tensor::full(Shape::new(1, 3, h, w), 0.25f32);
            let out = net.forward(&x).map_err(|e| e.to_string())?;
            if out.shape() != Shape::new(1, 19, h, w) || !out.is_finite() {
                return Err(format!("{name} at {h}x{w}: {:?}", out.shape()));
            }
        }
    }
    Ok("S/M/L at 512x1024 and 1024x2048 give 19xHxW".into())
}

const GRAD_STEP: f64 = 1e-3;
const GRAD_REL_TOL: f64 = 1e-2;
/// Denominator floor for the relative error of gradients that are nearly zero.
const GRAD_FLOOR: f64 = 1e-6;

fn gradient_check() -> Outcome {
    let spec = initial_spec();
    let net = NetworkInstance::<f32>::build(&spec, BlockKind::Conv3x3, InteractionKind::None, 2, 7)
        .map_err(|e| e.to_string())?
        .cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_vec(Shape::new(2, 3, 64, 64), (0..2 * 3 * 64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect());
    let labels: Vec<u8> = (0..2 * 64 * 64).map(|_| rng.random_range(0..2)).collect();
    let loss_of = |n: &NetworkInstance<f64>| {
        let (out, _) = n.forward_train(&x).unwrap();
        lpsnet::autograd::cross_entropy(&out, &labels).value().data()[0]
    };
    let grads = {
        let (out, exec) = net.forward_train(&x).map_err(|e| e.to_string())?;
        lpsnet::autograd::cross_entropy(&out, &labels).backward();
        exec.gradients()
    };
    let sizes: Vec<usize> = net.weights.params.iter().map(|p| p.data().len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut flat = rng.random_range(0..total);
        let t = sizes.iter().position(|&n| flat < n || { flat -= n; false }).unwrap();
        let analytic = grads[t].as_ref().map_or(0.0, |g| g.data()[flat]);
        let mut plus = net.clone();
        plus.weights.params[t].data_mut()[flat] += GRAD_STEP;
        let mut minus = net.clone();
        minus.weights.params[t].data_mut()[flat] -= GRAD_STEP;
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * GRAD_STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
        if rel > GRAD_REL_TOL {
            let name = net.param_names().nth(t).unwrap_or("?").to_string();
            return Err(format!("{name}[{flat}]: analytic {analytic:e}, numeric {numeric:e}"));
        }
    }
    Ok(format!("20 parameters, worst relative error {worst:.2e}"))
}

/// Desk-scale training recipe for the S-shaped network on synthetic shapes.
fn smoke_config() -> TrainConfig {
    TrainConfig {
        total_iters: 2000,
        batch_size: 8,
        base_lr: 0.02,
        crop: (192, 192),
        scale_range: (0.75, 1.5),
        ..Default::default()
    }
}

const MIOU_TARGET: f64 = 0.85;

fn training_smoke() -> Outcome {
    let data = synth_shapes(500, 4, (192, 192), 1).map_err(|e| e.to_string())?;
    if (data.train.samples.len(), data.val.samples.len()) != (400, 100) {
        return Err("split is not 400/100".into());
    }
    let s = preset("S").unwrap();
    let net = NetworkInstance::build(&s, BlockKind::Conv3x3, InteractionKind::BilateralB, 4, 0).map_err(|e| e.to_string())?;
    let (net, _) = train(net, &data.train, &smoke_config()).map_err(|e| e.to_string())?;
    let (miou, per_class) = evaluate_miou(&net, &data.val).map_err(|e| e.to_string())?;
    let detail = format!("val mIoU {miou:.4}, per class {per_class:.3?}");
    if miou >= MIOU_TARGET {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const LATENCY_RES: (usize, usize) = (512, 1024);

fn latency_ordering() -> Outcome {
    let mut medians = Vec::new();
    for name in ["S", "M", "L"] {
        let s = preset(name).unwrap();
        let net = NetworkInstance::<f32>::build(&s, BlockKind::Conv3x3, interaction_for(&s, InteractionKind::BilateralB), 19, 0)
            .map_err(|e| e.to_string())?;
        let x = Tensor::full(Shape::new(1, 3, LATENCY_RES.0, LATENCY_RES.1), 0.25f32);
        let m = measure_latency(|| net.forward(&x).map(drop), 10, 50).map_err(|e| e.to_string())?;
        medians.push(m.median_ms);
    }
    if !(medians[0] < medians[1] && medians[1] < medians[2]) {
        return Err(format!("medians S/M/L {medians:.2?} ms"));
    }
    let mut eff = Vec::new();
    for kind in [BlockKind::Conv3x3, BlockKind::SepConv3x3] {
        let shape = (32, 128, 128);
        let flops = block_cost(kind, shape).map_err(|e| e.to_string())?.total_flops;
        let block = BlockModule::<f32>::new(kind, shape.0, 0).map_err(|e| e.to_string())?;
        let x = Tensor::full(Shape::new(1, shape.0, shape.1, shape.2), 0.5f32);
        let m = measure_latency(|| block.forward(&x).map(drop), 10, 50).map_err(|e| e.to_string())?;
        eff.push(flops_efficiency(flops, m.median_ms).map_err(|e| e.to_string())?);
    }
    let detail = format!("medians S/M/L {medians:.2?} ms; MFLOPs/ms conv3x3 {:.0} vs sepconv3x3 {:.0}", eff[0], eff[1]);
    if eff[0] > eff[1] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const LR_REL_TOL: f64 = 1e-9;

fn poly_schedule() -> Outcome {
    let cfg = TrainConfig { total_iters: 1000, ..Default::default() };
    let start = poly_lr(0, &cfg).map_err(|e| e.to_string())?;
    let mid = poly_lr(500, &cfg).map_err(|e| e.to_string())?;
    let want = 0.01 * 0.5f64.powf(0.9);
    if (start - 0.01).abs() > LR_REL_TOL * 0.01 || (mid - want).abs() > LR_REL_TOL * want {
        return Err(format!("lr(0)={start}, lr(T/2)={mid}"));
    }
    Ok(format!("lr(0)={start}, lr(T/2)={mid:.12}"))
}

/// Writes past the test harness's output capture so the verdicts show up in a
/// plain `cargo test` log.
fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("1 trajectory arithmetic replay", table_replay, Duration::from_secs(1)),
        ("2 lookup selection replay", selection_replay, Duration::from_secs(5)),
        ("3 greedy choice equals brute force", brute_force_selection, Duration::from_secs(30)),
        ("4 FLOPs equal layer-walk oracle", flops_oracle, Duration::from_secs(30)),
        ("5 interaction properties", interaction_properties, Duration::from_secs(60)),
        ("6 forward shape law", forward_shapes, Duration::from_secs(120)),
        ("7 gradient check", gradient_check, Duration::from_secs(120)),
        ("8 training smoke", training_smoke, Duration::from_secs(3600)),
        ("9 latency ordering", latency_ordering, Duration::from_secs(300)),
        ("10 poly learning rate", poly_schedule, Duration::from_millis(100)),
    ];
    // `LPS_CRITERIA=1,7` runs a subset; the rest print SKIP.
    let only: Option<Vec<String>> = std::env::var("LPS_CRITERIA")
        .ok()
        .map(|v| v.split(',').map(|t| t.trim().to_string()).collect());
    let mut failed = Vec::new();
    report("");
    for (name, run, budget) in criteria {
        let number = name.split(' ').next().unwrap_or_default().to_string();
        if only.as_ref().is_some_and(|o| !o.contains(&number)) {
            report(&format!("SKIP criterion {name}"));
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        report(&format!("{} criterion {name}: {detail} [{took:.2?}]", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
