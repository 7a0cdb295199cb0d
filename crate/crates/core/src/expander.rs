//! Greedy progressive expansion.
//!
//! Starting from a tiny network, each step aligns every catalog op to a
//! common target latency (the slowest single-step expansion), then keeps the
//! op with the best accuracy gain per millisecond of added latency.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archspec::{catalog, Dimension, ExpansionOp, NetworkSpec, SpecError};
use crate::costmodel::{count_flops, estimate_latency, measure_latency, CostError, DeviceProfile, LayerOp};
use crate::evaluation::{evaluate_miou, train, Dataset, EvalError, TrainConfig};
use crate::netcore::{interaction_for, BlockKind, InteractionKind, NetworkInstance};
use crate::tensor::{Shape, Tensor};

/// Largest stepsize the scan will try.
pub const MAX_STEPSIZE: u32 = 64;

#[derive(Debug, thiserror::Error)]
pub enum ExpandError {
    #[error("evaluator failed on {spec}: {message}")]
    Evaluator { spec: String, message: String },
    #[error("op {op}: {source}")]
    Op { op: usize, source: Box<ExpandError> },
    #[error("stepsize exceeded {MAX_STEPSIZE} without reaching the target latency")]
    StepCapExceeded,
    #[error("op cannot be applied even once: {0}")]
    NotApplicable(SpecError),
    #[error("no expanding candidate increases latency")]
    NoCandidate,
    #[error("steps must be at least 1")]
    ZeroSteps,
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("lookup table: {0}")]
    Lookup(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl ExpandError {
    fn for_op(self, op: &ExpansionOp) -> Self {
        ExpandError::Op {
            op: op.index(),
            source: Box::new(self),
        }
    }
}

/// `Perf(spec)` in mIoU percent and `Lat(spec)` in milliseconds.
pub trait Evaluator {
    fn perf(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError>;
    fn lat(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError>;

    /// Whether independent specs may be evaluated concurrently.
    fn parallel_safe(&self) -> bool {
        false
    }
}

impl<E: Evaluator + ?Sized> Evaluator for &mut E {
    fn perf(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        (**self).perf(spec)
    }
    fn lat(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        (**self).lat(spec)
    }
    fn parallel_safe(&self) -> bool {
        (**self).parallel_safe()
    }
}

/// Wraps an evaluator so each spec is evaluated at most once, optionally
/// persisting results to a CSV log (`spec, metric, value`) so interrupted runs
/// resume.
pub struct Memoized<E> {
    inner: E,
    perf: HashMap<String, f64>,
    lat: HashMap<String, f64>,
    log: Option<PathBuf>,
    /// Calls that reached the wrapped evaluator.
    pub inner_calls: usize,
}

impl<E: Evaluator> Memoized<E> {
    pub fn new(inner: E) -> Self {
        Memoized {
            inner,
            perf: HashMap::new(),
            lat: HashMap::new(),
            log: None,
            inner_calls: 0,
        }
    }

    /// Loads earlier results from `path` (if it exists) and appends new ones to it.
    pub fn persistent(inner: E, path: impl Into<PathBuf>) -> Result<Self, ExpandError> {
        let path = path.into();
        let mut m = Memoized::new(inner);
        if path.exists() {
            let mut rd = csv::Reader::from_path(&path)?;
            for row in rd.records() {
                let row = row?;
                let (key, metric, value) = (&row[0], &row[1], &row[2]);
                let value: f64 = value
                    .parse()
                    .map_err(|_| ExpandError::Lookup(format!("bad value `{value}` in {}", path.display())))?;
                match metric {
                    "perf" => m.perf.insert(key.to_string(), value),
                    "lat" => m.lat.insert(key.to_string(), value),
                    other => return Err(ExpandError::Lookup(format!("unknown metric `{other}`"))),
                };
            }
        } else {
            std::fs::write(&path, "spec,metric,value\n")?;
        }
        m.log = Some(path);
        Ok(m)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn cached(&self) -> usize {
        self.perf.len() + self.lat.len()
    }

    fn record(&self, key: &str, metric: &str, value: f64) -> Result<(), ExpandError> {
        if let Some(path) = &self.log {
            let file = OpenOptions::new().append(true).open(path)?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record([key, metric, &format!("{value:?}")])?;
            w.flush()?;
        }
        Ok(())
    }
}

impl<E: Evaluator> Evaluator for Memoized<E> {
    fn perf(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        let key = spec.to_compact();
        if let Some(&v) = self.perf.get(&key) {
            return Ok(v);
        }
        self.inner_calls += 1;
        let v = self.inner.perf(spec)?;
        self.perf.insert(key.clone(), v);
        self.record(&key, "perf", v)?;
        Ok(v)
    }

    fn lat(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        let key = spec.to_compact();
        if let Some(&v) = self.lat.get(&key) {
            return Ok(v);
        }
        self.inner_calls += 1;
        let v = self.inner.lat(spec)?;
        self.lat.insert(key.clone(), v);
        self.record(&key, "lat", v)?;
        Ok(v)
    }

    fn parallel_safe(&self) -> bool {
        self.inner.parallel_safe()
    }
}

/// The slowest single-step expansion: `max over ops of lat(apply(spec, op, 1))`.
/// Ops that cannot be applied are skipped. Returns the target and the
/// `(op, latency)` pairs it was taken over.
pub fn target_latency(
    spec: &NetworkSpec,
    ops: &[ExpansionOp],
    eval: &mut impl Evaluator,
) -> Result<(f64, Vec<(ExpansionOp, f64)>), ExpandError> {
    let mut probes = Vec::with_capacity(ops.len());
    for op in ops {
        let Ok(next) = spec.apply(op, 1) else { continue };
        let l = eval.lat(&next).map_err(|e| e.for_op(op))?;
        probes.push((*op, l));
    }
    let target = probes.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    Ok((target, probes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stepsize {
    pub k: u32,
    pub lat_ms: f64,
    /// Non-monotone latency observations.
    pub warnings: Vec<String>,
}

/// The `k >= 1` whose latency lies closest to `target`. Scans upward while the
/// latency stays at or below the target, then compares the first overshoot
/// with the best undershoot; ties go to the smaller `k`. A bound violation
/// ends the scan with the best `k` seen so far. Drops larger than
/// `noise_floor_ms` are reported as warnings.
pub fn stepsize(
    spec: &NetworkSpec,
    op: &ExpansionOp,
    target: f64,
    eval: &mut impl Evaluator,
    noise_floor_ms: f64,
) -> Result<Stepsize, ExpandError> {
    let mut best: Option<(u32, f64, f64)> = None;
    let mut prev: Option<f64> = None;
    let mut warnings = Vec::new();
    for k in 1..=MAX_STEPSIZE {
        let next = match spec.apply(op, k) {
            Ok(s) => s,
            Err(e) if k == 1 => return Err(ExpandError::NotApplicable(e)),
            Err(_) => break,
        };
        let l = eval.lat(&next)?;
        if let Some(p) = prev {
            if l < p - noise_floor_ms {
                warnings.push(format!("latency fell from {p:.4} to {l:.4} ms at k={k}"));
            }
        }
        let d = (l - target).abs();
        if best.is_none_or(|b| d < b.2) {
            best = Some((k, l, d));
        }
        if l > target {
            let (k, lat_ms, _) = best.expect("at least one k scanned");
            return Ok(Stepsize { k, lat_ms, warnings });
        }
        prev = Some(l);
        if k == MAX_STEPSIZE {
            return Err(ExpandError::StepCapExceeded);
        }
    }
    let (k, lat_ms, _) = best.expect("at least one k scanned");
    Ok(Stepsize { k, lat_ms, warnings })
}

/// One row of a step's candidate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub op_index: usize,
    pub dimension: Dimension,
    pub k: Option<u32>,
    pub spec: Option<String>,
    pub perf_pct: Option<f64>,
    pub lat_ms: Option<f64>,
    /// Accuracy gain per millisecond, for candidates that add latency.
    pub ratio: Option<f64>,
    pub excluded: Option<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub op: ExpansionOp,
    pub k: u32,
    pub spec: NetworkSpec,
    pub perf_pct: f64,
    pub lat_ms: f64,
    pub target_lat_ms: f64,
    pub candidates: Vec<Candidate>,
}

/// Knobs for [`select`] and [`expand`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub noise_floor_ms: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { noise_floor_ms: 1e-9 }
    }
}

/// Picks the op with the largest `(perf - perf_prev) / (lat - lat_prev)`.
/// Candidates that do not add latency, or whose stepsize cannot be found,
/// are excluded; ties keep the earlier catalog entry.
pub fn select(
    spec: &NetworkSpec,
    perf_prev: f64,
    lat_prev: f64,
    ops: &[ExpansionOp],
    eval: &mut impl Evaluator,
    opts: SearchOptions,
) -> Result<Selection, ExpandError> {
    let (target, _) = target_latency(spec, ops, eval)?;
    let mut candidates = Vec::with_capacity(ops.len());
    let mut best: Option<(usize, f64, NetworkSpec)> = None;
    for op in ops {
        let mut row = Candidate {
            op_index: op.index(),
            dimension: op.dimension(),
            k: None,
            spec: None,
            perf_pct: None,
            lat_ms: None,
            ratio: None,
            excluded: None,
            warnings: Vec::new(),
        };
        let step = match stepsize(spec, op, target, eval, opts.noise_floor_ms) {
            Ok(s) => s,
            Err(e @ (ExpandError::NotApplicable(_) | ExpandError::StepCapExceeded)) => {
                row.excluded = Some(e.to_string());
                candidates.push(row);
                continue;
            }
            Err(e) => return Err(e.for_op(op)),
        };
        let next = spec.apply(op, step.k)?;
        let p = eval.perf(&next).map_err(|e| e.for_op(op))?;
        let l = eval.lat(&next).map_err(|e| e.for_op(op))?;
        row.k = Some(step.k);
        row.spec = Some(next.to_compact());
        row.perf_pct = Some(p);
        row.lat_ms = Some(l);
        row.warnings = step.warnings;
        if l > lat_prev {
            let r = (p - perf_prev) / (l - lat_prev);
            row.ratio = Some(r);
            if best.as_ref().is_none_or(|b| r > b.1) {
                best = Some((candidates.len(), r, next));
            }
        } else {
            row.excluded = Some("does not increase latency".into());
        }
        candidates.push(row);
    }
    let (i, _, next) = best.ok_or(ExpandError::NoCandidate)?;
    let c = &candidates[i];
    Ok(Selection {
        op: ExpansionOp::by_index(c.op_index).expect("catalog index"),
        k: c.k.expect("selected candidate has k"),
        perf_pct: c.perf_pct.expect("selected candidate has perf"),
        lat_ms: c.lat_ms.expect("selected candidate has lat"),
        spec: next,
        target_lat_ms: target,
        candidates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionStep {
    pub index: usize,
    pub op: ExpansionOp,
    pub k: u32,
    pub spec: NetworkSpec,
    pub perf_pct: f64,
    pub lat_ms: f64,
    pub target_lat_ms: f64,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub origin: NetworkSpec,
    pub origin_perf_pct: f64,
    pub origin_lat_ms: f64,
    pub steps: Vec<ExpansionStep>,
    /// Why the search ended early, if it did.
    pub stopped: Option<String>,
}

impl Trajectory {
    pub fn dimensions(&self) -> Vec<Dimension> {
        self.steps.iter().map(|s| s.op.dimension()).collect()
    }

    pub fn last_spec(&self) -> &NetworkSpec {
        self.steps.last().map_or(&self.origin, |s| &s.spec)
    }

    /// `(lat_ms, perf_pct)` from the origin through every step.
    pub fn tradeoff(&self) -> Vec<(f64, f64)> {
        std::iter::once((self.origin_lat_ms, self.origin_perf_pct))
            .chain(self.steps.iter().map(|s| (s.lat_ms, s.perf_pct)))
            .collect()
    }

    /// Columns `step, dimension, op_index, k, depths, widths, ratios,
    /// perf_pct, lat_ms`; step 0 is the origin.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), ExpandError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(TRAJECTORY_HEADER)?;
        let row = |spec: &NetworkSpec| {
            let j = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
            let r = spec.ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ");
            (j(&spec.depths), j(&spec.widths), r)
        };
        let (d, wd, r) = row(&self.origin);
        w.write_record([
            "0".into(),
            String::new(),
            String::new(),
            String::new(),
            d,
            wd,
            r,
            self.origin_perf_pct.to_string(),
            self.origin_lat_ms.to_string(),
        ])?;
        for s in &self.steps {
            let (d, wd, r) = row(&s.spec);
            w.write_record([
                s.index.to_string(),
                s.op.dimension().to_string(),
                s.op.index().to_string(),
                s.k.to_string(),
                d,
                wd,
                r,
                s.perf_pct.to_string(),
                s.lat_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `trajectory.csv`, `tradeoff.csv` and one
    /// `candidates_step{i}.csv` per step into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), ExpandError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_csv(File::create(dir.join("trajectory.csv"))?)?;
        let mut t = csv::Writer::from_path(dir.join("tradeoff.csv"))?;
        t.write_record(["step", "lat_ms", "perf_pct"])?;
        for (i, (l, p)) in self.tradeoff().into_iter().enumerate() {
            t.write_record([i.to_string(), l.to_string(), p.to_string()])?;
        }
        t.flush()?;
        for s in &self.steps {
            write_candidates(&s.candidates, File::create(dir.join(format!("candidates_step{}.csv", s.index)))?)?;
        }
        if let Some(reason) = &self.stopped {
            let mut f = File::create(dir.join("stopped.txt"))?;
            writeln!(f, "{reason}")?;
        }
        Ok(())
    }
}

pub const TRAJECTORY_HEADER: [&str; 9] = [
    "step",
    "dimension",
    "op_index",
    "k",
    "depths",
    "widths",
    "ratios",
    "perf_pct",
    "lat_ms",
];

/// Candidate table with columns `op_index, dimension, k, spec, perf_pct,
/// lat_ms, ratio, excluded`.
pub fn write_candidates<W: std::io::Write>(rows: &[Candidate], writer: W) -> Result<(), ExpandError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["op_index", "dimension", "k", "spec", "perf_pct", "lat_ms", "ratio", "excluded"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in rows {
        w.write_record([
            c.op_index.to_string(),
            c.dimension.to_string(),
            c.k.map(|k| k.to_string()).unwrap_or_default(),
            c.spec.clone().unwrap_or_default(),
            opt(c.perf_pct),
            opt(c.lat_ms),
            opt(c.ratio),
            c.excluded.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `steps` greedy selections from `origin` over the full catalog. A
/// failing selection truncates the trajectory and records the cause; only a
/// failure to evaluate the origin is returned as an error.
pub fn expand(
    origin: &NetworkSpec,
    steps: usize,
    eval: &mut impl Evaluator,
    opts: SearchOptions,
) -> Result<Trajectory, ExpandError> {
    expand_over(origin, steps, catalog(), eval, opts)
}

/// [`expand`] over an arbitrary op list.
pub fn expand_over(
    origin: &NetworkSpec,
    steps: usize,
    ops: &[ExpansionOp],
    eval: &mut impl Evaluator,
    opts: SearchOptions,
) -> Result<Trajectory, ExpandError> {
    if steps == 0 {
        return Err(ExpandError::ZeroSteps);
    }
    origin.check()?;
    let mut traj = Trajectory {
        origin: origin.clone(),
        origin_perf_pct: eval.perf(origin)?,
        origin_lat_ms: eval.lat(origin)?,
        steps: Vec::with_capacity(steps),
        stopped: None,
    };
    for index in 1..=steps {
        let (spec, p, l) = match traj.steps.last() {
            Some(s) => (s.spec.clone(), s.perf_pct, s.lat_ms),
            None => (origin.clone(), traj.origin_perf_pct, traj.origin_lat_ms),
        };
        match select(&spec, p, l, ops, eval, opts) {
            Ok(sel) => traj.steps.push(ExpansionStep {
                index,
                op: sel.op,
                k: sel.k,
                spec: sel.spec,
                perf_pct: sel.perf_pct,
                lat_ms: sel.lat_ms,
                target_lat_ms: sel.target_lat_ms,
                candidates: sel.candidates,
            }),
            Err(e) => {
                traj.stopped = Some(format!("step {index}: {e}"));
                break;
            }
        }
    }
    Ok(traj)
}

/// Closed-form evaluator for exercising the search without training.
///
/// Latency is [`estimate_latency`] under a synthetic throughput-plus-overhead
/// profile at 512x1024 with 19 classes. Accuracy is
/// `100 * (1 - exp(-a ln(1 + flops) - b max_ratio - c total_depth))` with
/// `a, b, c` drawn from the seed.
#[derive(Debug, Clone)]
pub struct SurrogateOracle {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub profile: DeviceProfile,
    pub resolution: (usize, usize),
}

pub fn surrogate_oracle(seed: u64) -> SurrogateOracle {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut profile = DeviceProfile::with_default_rate(rng.random_range(200.0..2000.0));
    profile.layer_overhead_ms = rng.random_range(0.001..0.02);
    SurrogateOracle {
        a: rng.random_range(0.01..0.04),
        b: rng.random_range(0.05..0.5),
        c: rng.random_range(0.002..0.02),
        profile,
        resolution: (512, 1024),
    }
}

impl SurrogateOracle {
    fn report(&self, spec: &NetworkSpec) -> Result<crate::costmodel::CostReport, ExpandError> {
        let kind = interaction_for(spec, InteractionKind::BilateralB);
        Ok(count_flops(spec, BlockKind::Conv3x3, kind, 19, self.resolution)?)
    }
}

impl Evaluator for SurrogateOracle {
    fn perf(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        let flops = self.report(spec)?.total_flops as f64;
        let z = self.a * flops.ln_1p() + self.b * spec.max_ratio().as_f64() + self.c * spec.total_depth() as f64;
        Ok(100.0 * (1.0 - (-z).exp()))
    }

    fn lat(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        Ok(estimate_latency(&self.report(spec)?, &self.profile)?)
    }

    fn parallel_safe(&self) -> bool {
        true
    }
}

/// Replays recorded `(spec, perf, lat)` rows.
///
/// Listed specs return their recorded values. Other specs get a latency from
/// a cost model calibrated on the rows: `c0 + c1 * GFLOPs + c2 * activations`
/// (fixed overhead, arithmetic, and conv output traffic in millions of
/// elements) fitted by least squares, then mapped through piecewise-linear
/// interpolation of log latency against log model value across the rows, so
/// the mapping passes through every recorded point. Accuracy of an unlisted
/// spec is the best recorded accuracy among the rows it dominates
/// elementwise, or the lowest recorded accuracy if it dominates none.
#[derive(Debug, Clone)]
pub struct LookupEvaluator {
    rows: Vec<LookupRow>,
    coefficients: [f64; 3],
    /// `(ln model, ln latency)` sorted by model value.
    knots: Vec<(f64, f64)>,
    features: HashMap<String, [f64; 3]>,
}

#[derive(Debug, Clone)]
struct LookupRow {
    spec: NetworkSpec,
    key: String,
    perf_pct: f64,
    lat_ms: f64,
}

/// Resolution and class count at which the lookup evaluator measures cost.
pub const LOOKUP_COST_RES: (usize, usize) = (1024, 2048);
pub const LOOKUP_COST_CLASSES: usize = 19;

/// `[1, GFLOPs, conv output elements in millions]`.
fn lookup_features(spec: &NetworkSpec) -> Result<[f64; 3], ExpandError> {
    let kind = interaction_for(spec, InteractionKind::BilateralB);
    let r = count_flops(spec, BlockKind::Conv3x3, kind, LOOKUP_COST_CLASSES, LOOKUP_COST_RES)?;
    let activations: usize = r
        .per_layer
        .iter()
        .filter(|l| matches!(l.op, LayerOp::Conv { .. }))
        .map(|l| l.out_shape.0 * l.out_shape.1 * l.out_shape.2)
        .sum();
    Ok([1.0, r.total_flops as f64 / 1e9, activations as f64 / 1e6])
}

fn dominates(a: &NetworkSpec, b: &NetworkSpec) -> bool {
    a.depths.iter().zip(&b.depths).all(|(x, y)| x >= y)
        && a.widths.iter().zip(&b.widths).all(|(x, y)| x >= y)
        && a.ratios.iter().zip(&b.ratios).all(|(x, y)| x >= y)
}

/// Solves the normal equations of a 3-column least-squares problem.
fn least_squares3(xs: &[[f64; 3]], ys: &[f64]) -> Option<[f64; 3]> {
    let mut a = [[0.0f64; 4]; 3];
    for (x, &y) in xs.iter().zip(ys) {
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += x[i] * x[j];
            }
            a[i][3] += x[i] * y;
        }
    }
    for i in 0..3 {
        let pivot = (i..3).max_by(|&p, &q| a[p][i].abs().total_cmp(&a[q][i].abs()))?;
        a.swap(i, pivot);
        if a[i][i].abs() < 1e-12 {
            return None;
        }
        for r in 0..3 {
            if r != i {
                let f = a[r][i] / a[i][i];
                for c in i..4 {
                    a[r][c] -= f * a[i][c];
                }
            }
        }
    }
    Some(std::array::from_fn(|i| a[i][3] / a[i][i]))
}

impl LookupEvaluator {
    pub fn new(rows: Vec<(NetworkSpec, f64, f64)>) -> Result<Self, ExpandError> {
        if rows.len() < 3 {
            return Err(ExpandError::Lookup("need at least three rows".into()));
        }
        let mut out = Vec::with_capacity(rows.len());
        let mut features = HashMap::new();
        let mut xs = Vec::with_capacity(rows.len());
        for (spec, perf_pct, lat_ms) in rows {
            let key = spec.to_compact();
            if !(lat_ms > 0.0) {
                return Err(ExpandError::Lookup(format!("latency must be positive for {key}")));
            }
            if out.iter().any(|r: &LookupRow| r.key == key) {
                return Err(ExpandError::Lookup(format!("duplicate row {key}")));
            }
            let f = lookup_features(&spec)?;
            xs.push(f);
            features.insert(key.clone(), f);
            out.push(LookupRow {
                spec,
                key,
                perf_pct,
                lat_ms,
            });
        }
        let ys: Vec<f64> = out.iter().map(|r| r.lat_ms).collect();
        let coefficients =
            least_squares3(&xs, &ys).ok_or_else(|| ExpandError::Lookup("rows do not determine a cost model".into()))?;
        let model = |f: &[f64; 3]| f.iter().zip(&coefficients).map(|(a, b)| a * b).sum::<f64>();
        let mut knots = Vec::with_capacity(out.len());
        for (r, f) in out.iter().zip(&xs) {
            let m = model(f);
            if !(m > 0.0) {
                return Err(ExpandError::Lookup(format!("cost model is not positive at {}", r.key)));
            }
            knots.push((m.ln(), r.lat_ms.ln()));
        }
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        if knots.windows(2).any(|w| w[1].0 - w[0].0 < 1e-12) {
            return Err(ExpandError::Lookup("two rows share a cost-model value".into()));
        }
        Ok(LookupEvaluator {
            rows: out,
            coefficients,
            knots,
            features,
        })
    }

    /// Reads a CSV with columns `spec, perf_pct, lat_ms`, where `spec` is the
    /// compact form (`depths=..;widths=..;ratios=..`).
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self, ExpandError> {
        let path = path.as_ref();
        let mut rd = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let field = |j: usize| rec.get(j).unwrap_or("").trim().to_string();
            let bad = |what: &str| ExpandError::Lookup(format!("{} row {}: bad {what}", path.display(), i + 1));
            let spec = NetworkSpec::from_compact(&field(0)).map_err(|e| bad(&format!("spec ({e})")))?;
            let perf: f64 = field(1).parse().map_err(|_| bad("perf_pct"))?;
            let lat: f64 = field(2).parse().map_err(|_| bad("lat_ms"))?;
            rows.push((spec, perf, lat));
        }
        LookupEvaluator::new(rows)
    }

    /// Fitted `[overhead ms, ms per GFLOP, ms per million activations]`.
    pub fn coefficients(&self) -> [f64; 3] {
        self.coefficients
    }

    pub fn is_recorded(&self, spec: &NetworkSpec) -> bool {
        self.exact(spec).is_some()
    }

    fn exact(&self, spec: &NetworkSpec) -> Option<&LookupRow> {
        let key = spec.to_compact();
        self.rows.iter().find(|r| r.key == key)
    }

    /// Calibrated cost-model value of `spec` (before interpolation).
    pub fn model_value(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        let key = spec.to_compact();
        let f = match self.features.get(&key) {
            Some(f) => *f,
            None => {
                let f = lookup_features(spec)?;
                self.features.insert(key, f);
                f
            }
        };
        Ok(f.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum())
    }
}

impl Evaluator for LookupEvaluator {
    fn perf(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        if let Some(r) = self.exact(spec) {
            return Ok(r.perf_pct);
        }
        let dominated = self
            .rows
            .iter()
            .filter(|r| dominates(spec, &r.spec))
            .map(|r| r.perf_pct)
            .fold(f64::NEG_INFINITY, f64::max);
        if dominated.is_finite() {
            Ok(dominated)
        } else {
            Ok(self.rows.iter().map(|r| r.perf_pct).fold(f64::INFINITY, f64::min))
        }
    }

    fn lat(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        if let Some(r) = self.exact(spec) {
            return Ok(r.lat_ms);
        }
        let m = self.model_value(spec)?;
        if !(m > 0.0) {
            return Err(ExpandError::Lookup(format!(
                "cost model is not positive at {}",
                spec.to_compact()
            )));
        }
        let x = m.ln();
        let k = &self.knots;
        let i = k.iter().position(|p| p.0 > x).unwrap_or(k.len()).clamp(1, k.len() - 1);
        let (a, b) = (k[i - 1], k[i]);
        Ok((a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)).exp())
    }

    fn parallel_safe(&self) -> bool {
        true
    }
}

/// Accuracy from an actual training run and latency from timed inference.
pub struct TrainingEvaluator<'a> {
    pub train_set: &'a dyn Dataset,
    pub val_set: &'a dyn Dataset,
    pub config: TrainConfig,
    pub block_kind: BlockKind,
    pub interaction_kind: InteractionKind,
    /// Input `(H, W)` used for latency timing.
    pub latency_res: (usize, usize),
    pub warmup_runs: usize,
    pub measure_runs: usize,
}

impl TrainingEvaluator<'_> {
    fn build(&self, spec: &NetworkSpec) -> Result<NetworkInstance, ExpandError> {
        let kind = interaction_for(spec, self.interaction_kind);
        NetworkInstance::build(spec, self.block_kind, kind, self.train_set.num_classes(), self.config.seed)
            .map_err(|e| evaluator_error(spec, e))
    }
}

fn evaluator_error(spec: &NetworkSpec, e: impl fmt::Display) -> ExpandError {
    ExpandError::Evaluator {
        spec: spec.to_compact(),
        message: e.to_string(),
    }
}

impl Evaluator for TrainingEvaluator<'_> {
    fn perf(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        let net = self.build(spec)?;
        let run = || -> Result<f64, EvalError> {
            let (net, _) = train(net, self.train_set, &self.config)?;
            Ok(evaluate_miou(&net, self.val_set)?.0 * 100.0)
        };
        run().map_err(|e| evaluator_error(spec, e))
    }

    fn lat(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
        let net = self.build(spec)?;
        let (h, w) = self.latency_res;
        let x = Tensor::full(Shape::new(1, 3, h, w), 0.5f32);
        let m = measure_latency(|| net.forward(&x).map(|_| ()), self.warmup_runs, self.measure_runs)
            .map_err(|e| evaluator_error(spec, e))?;
        Ok(m.median_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::initial_spec;

    /// Latency `base + step * k` per op, constant perf per op.
    struct Linear {
        base: f64,
        per_op: Vec<f64>,
        perf_gain: Vec<f64>,
    }

    impl Linear {
        fn decompose(&self, spec: &NetworkSpec) -> (usize, u32) {
            let origin = initial_spec();
            for op in catalog() {
                for k in 1..=MAX_STEPSIZE {
                    if origin.apply(op, k).as_ref() == Ok(spec) {
                        return (op.index(), k);
                    }
                }
            }
            (usize::MAX, 0)
        }
    }

    impl Evaluator for Linear {
        fn perf(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
            match self.decompose(spec) {
                (usize::MAX, _) => Ok(50.0),
                (i, k) => Ok(50.0 + self.perf_gain[i] * k as f64),
            }
        }
        fn lat(&mut self, spec: &NetworkSpec) -> Result<f64, ExpandError> {
            match self.decompose(spec) {
                (usize::MAX, _) => Ok(self.base),
                (i, k) => Ok(self.base + self.per_op[i] * k as f64),
            }
        }
    }

    fn linear() -> Linear {
        Linear {
            base: 1.0,
            per_op: (1..=10).map(|i| i as f64 / 10.0).collect(),
            perf_gain: vec![1.0; 10],
        }
    }

    #[test]
    fn target_is_max_single_step() {
        let mut e = linear();
        // From one path the third-slot op lands on the same spec as the second.
        let (t, probes) = target_latency(&initial_spec(), &catalog()[..9], &mut e).unwrap();
        assert!((t - 1.9).abs() < 1e-12);
        assert_eq!(probes.len(), 9);
        let (t1, _) = target_latency(&initial_spec(), &catalog()[2..3], &mut e).unwrap();
        assert!((t1 - 1.3).abs() < 1e-12);
    }

    #[test]
    fn stepsize_examples() {
        let mut e = linear();
        e.per_op[0] = 0.3;
        let op = catalog()[0];
        let s = stepsize(&initial_spec(), &op, 1.95, &mut e, 0.0).unwrap();
        assert_eq!(s.k, 3);
        assert_eq!(stepsize(&initial_spec(), &op, 0.5, &mut e, 0.0).unwrap().k, 1);
        // 1.0 + 0.3k: k=1 gives 1.3, k=2 gives 1.6; target 1.45 is equidistant.
        assert_eq!(stepsize(&initial_spec(), &op, 1.45, &mut e, 0.0).unwrap().k, 1);
    }

    #[test]
    fn stepsize_cap() {
        let mut e = linear();
        e.per_op[3] = 1e-6;
        let err = stepsize(&initial_spec(), &catalog()[3], 100.0, &mut e, 0.0).unwrap_err();
        assert!(matches!(err, ExpandError::StepCapExceeded));
    }

    #[test]
    fn select_by_ratio() {
        let mut e = linear();
        // Make the three width ops the only useful candidates.
        e.perf_gain = vec![0.0; 10];
        e.per_op = vec![0.0; 10];
        e.per_op[3] = 1.0;
        e.per_op[4] = 2.0;
        e.per_op[5] = 0.4;
        e.perf_gain[3] = 2.0;
        e.perf_gain[4] = 3.0;
        e.perf_gain[5] = 1.0;
        let ops = &catalog()[3..6];
        // Target 3.0 makes k = 2, 1, 5: (dP, dL) = (4, 2), (3, 2), (5, 2).
        let sel = select(&initial_spec(), 50.0, 1.0, ops, &mut e, SearchOptions::default()).unwrap();
        let ratios: Vec<f64> = sel.candidates.iter().map(|c| c.ratio.unwrap()).collect();
        assert!((ratios[0] - 2.0).abs() < 1e-9 && (ratios[1] - 1.5).abs() < 1e-9 && (ratios[2] - 2.5).abs() < 1e-9);
        assert_eq!(sel.op.index(), 5);
        assert_eq!(sel.k, 5);
    }

    #[test]
    fn select_single_candidate_with_negative_ratio() {
        let mut e = linear();
        e.perf_gain[6] = -1.0;
        let sel = select(&initial_spec(), 50.0, 1.0, &catalog()[6..7], &mut e, SearchOptions::default()).unwrap();
        assert_eq!(sel.op.index(), 6);
    }

    #[test]
    fn select_without_latency_increase_fails() {
        let mut e = linear();
        e.per_op = vec![0.0; 10];
        let err = select(&initial_spec(), 50.0, 1.0, catalog(), &mut e, SearchOptions::default()).unwrap_err();
        assert_eq!(err.to_string(), "no expanding candidate increases latency");
    }

    #[test]
    fn memoized_calls_inner_once() {
        let mut m = Memoized::new(surrogate_oracle(1));
        let s = initial_spec();
        m.lat(&s).unwrap();
        m.lat(&s).unwrap();
        m.perf(&s).unwrap();
        m.perf(&s).unwrap();
        assert_eq!(m.inner_calls, 2);
    }

    #[test]
    fn surrogate_is_deterministic_and_bounded() {
        let s = initial_spec();
        let (mut a, mut b) = (surrogate_oracle(7), surrogate_oracle(7));
        assert_eq!(a.perf(&s).unwrap(), b.perf(&s).unwrap());
        assert_eq!(a.lat(&s).unwrap(), b.lat(&s).unwrap());
        let p = a.perf(&s).unwrap();
        assert!(p > 0.0 && p < 100.0);
    }

    #[test]
    fn one_step_expansion_adds_latency() {
        struct Flat(SurrogateOracle);
        impl Evaluator for Flat {
            fn perf(&mut self, _: &NetworkSpec) -> Result<f64, ExpandError> {
                Ok(10.0)
            }
            fn lat(&mut self, s: &NetworkSpec) -> Result<f64, ExpandError> {
                self.0.lat(s)
            }
        }
        let mut e = Flat(surrogate_oracle(3));
        let t = expand(&initial_spec(), 1, &mut e, SearchOptions::default()).unwrap();
        assert_eq!(t.steps.len(), 1);
        assert!(t.steps[0].lat_ms > t.origin_lat_ms);
    }
}
