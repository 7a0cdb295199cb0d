//! Analytical cost of networks plus wall-clock latency measurement.
//!
//! FLOPs convention: one multiply-accumulate is two FLOPs, biases are free,
//! normalization and activations cost one FLOP per output element, an
//! elementwise add or product one per element, and a bilinear resize eight per
//! output element.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archspec::NetworkSpec;
use crate::netcore::modules::ConvUnit;
use crate::netcore::{Architecture, BlockKind, BlockModule, InteractionKind, NetError, Ops};
use crate::tensor::{conv2d, resize_bilinear, ConvGeometry, Shape, Tensor};

/// Smallest input extent accepted by [`count_flops`].
pub const MIN_COST_INPUT: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("resolution {h}x{w} is not realizable (minimum {min}x{min})")]
    Resolution { h: usize, w: usize, min: usize },
    #[error("latency must be positive, got {0}")]
    NonPositiveLatency(f64),
    #[error("profile has no entry for `{0}` and no default rate")]
    MissingSignature(String),
    #[error("profile: {0}")]
    Profile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// What a layer computes, with enough geometry to rebuild it for timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerOp {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        stride: usize,
        bias: bool,
        in_h: usize,
        in_w: usize,
    },
    Norm,
    Relu,
    Sigmoid,
    OneMinus,
    Add,
    Mul,
    Resize { in_h: usize, in_w: usize },
    Concat,
    Select,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub layer_id: String,
    pub op: LayerOp,
    pub flops: u64,
    pub params: u64,
    /// `(channels, height, width)`
    pub out_shape: (usize, usize, usize),
}

impl LayerCost {
    /// Profile key, e.g. `conv3x3/cin=32/cout=32/hw=128x128/stride=1`.
    pub fn signature(&self) -> String {
        let (c, h, w) = self.out_shape;
        match self.op {
            LayerOp::Conv {
                kernel,
                in_channels,
                out_channels,
                groups,
                stride,
                in_h,
                in_w,
                ..
            } => {
                let g = if groups > 1 { format!("/groups={groups}") } else { String::new() };
                format!(
                    "conv{kernel}x{kernel}/cin={in_channels}/cout={out_channels}{g}/hw={in_h}x{in_w}/stride={stride}"
                )
            }
            LayerOp::Resize { in_h, in_w } => format!("resize/c={c}/hw={in_h}x{in_w}/to={h}x{w}"),
            op => {
                let name = match op {
                    LayerOp::Norm => "norm",
                    LayerOp::Relu => "relu",
                    LayerOp::Sigmoid => "sigmoid",
                    LayerOp::OneMinus => "one_minus",
                    LayerOp::Add => "add",
                    LayerOp::Mul => "mul",
                    LayerOp::Concat => "concat",
                    _ => "select",
                };
                format!("{name}/c={c}/hw={h}x{w}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub total_flops: u64,
    pub total_params: u64,
    pub per_layer: Vec<LayerCost>,
    pub input_resolution: (usize, usize),
}

impl CostReport {
    fn from_layers(per_layer: Vec<LayerCost>, input_resolution: (usize, usize)) -> Self {
        CostReport {
            total_flops: per_layer.iter().map(|l| l.flops).sum(),
            total_params: per_layer.iter().map(|l| l.params).sum(),
            per_layer,
            input_resolution,
        }
    }

    /// CSV with columns `layer_id, flops, params, out_c, out_h, out_w`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), CostError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["layer_id", "flops", "params", "out_c", "out_h", "out_w"])?;
        for l in &self.per_layer {
            let (c, h, wd) = l.out_shape;
            w.write_record([
                l.layer_id.clone(),
                l.flops.to_string(),
                l.params.to_string(),
                c.to_string(),
                h.to_string(),
                wd.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shape-only backend: runs a module tree's forward pass on [`Shape`]s and
/// records one [`LayerCost`] per primitive.
#[derive(Debug, Default)]
pub struct CostTracer {
    pub layers: Vec<LayerCost>,
}

impl CostTracer {
    fn push(&mut self, id: String, op: LayerOp, flops: u64, params: u64, out: Shape) {
        self.layers.push(LayerCost {
            layer_id: id,
            op,
            flops,
            params,
            out_shape: (out.c, out.h, out.w),
        });
    }

    fn elementwise(&mut self, id: &str, op: LayerOp, out: Shape) -> Shape {
        self.push(id.to_string(), op, volume(out), 0, out);
        out
    }
}

fn volume(s: Shape) -> u64 {
    (s.c * s.h * s.w) as u64
}

impl Ops for CostTracer {
    type Value = Shape;

    fn shape_of(&self, v: &Shape) -> Shape {
        *v
    }

    fn conv_unit(&mut self, unit: &ConvUnit, x: &Shape) -> Shape {
        let g = unit.geometry;
        assert_eq!(x.c, g.in_channels, "{}: input channels", unit.name);
        let out = Shape::new(x.n, g.out_channels, g.out_extent(x.h), g.out_extent(x.w));
        let patch = (g.kernel * g.kernel * g.in_channels / g.groups) as u64;
        let flops = 2 * patch * volume(out);
        let params = patch * g.out_channels as u64 + if unit.bias.is_some() { g.out_channels as u64 } else { 0 };
        let op = LayerOp::Conv {
            kernel: g.kernel,
            in_channels: g.in_channels,
            out_channels: g.out_channels,
            groups: g.groups,
            stride: g.stride,
            bias: unit.bias.is_some(),
            in_h: x.h,
            in_w: x.w,
        };
        self.push(format!("{}/conv", unit.name), op, flops, params, out);
        if unit.norm.is_some() {
            self.push(format!("{}/norm", unit.name), LayerOp::Norm, volume(out), 2 * out.c as u64, out);
        }
        if unit.relu {
            self.push(format!("{}/relu", unit.name), LayerOp::Relu, volume(out), 0, out);
        }
        out
    }

    fn add(&mut self, id: &str, a: &Shape, b: &Shape) -> Shape {
        assert_eq!(a, b, "{id}: add shapes");
        self.elementwise(id, LayerOp::Add, *a)
    }

    fn relu(&mut self, id: &str, x: &Shape) -> Shape {
        self.elementwise(id, LayerOp::Relu, *x)
    }

    fn sigmoid(&mut self, id: &str, x: &Shape) -> Shape {
        self.elementwise(id, LayerOp::Sigmoid, *x)
    }

    fn one_minus(&mut self, id: &str, x: &Shape) -> Shape {
        self.elementwise(id, LayerOp::OneMinus, *x)
    }

    fn mul(&mut self, id: &str, x: &Shape, gate: &Shape) -> Shape {
        assert!(gate.c == 1 || gate.c == x.c, "{id}: gate channels");
        assert_eq!((gate.h, gate.w), (x.h, x.w), "{id}: gate extent");
        self.elementwise(id, LayerOp::Mul, *x)
    }

    fn resize(&mut self, id: &str, x: &Shape, h: usize, w: usize) -> Shape {
        if (x.h, x.w) == (h, w) {
            return *x;
        }
        let out = Shape::new(x.n, x.c, h, w);
        self.push(id.to_string(), LayerOp::Resize { in_h: x.h, in_w: x.w }, 8 * volume(out), 0, out);
        out
    }

    fn concat(&mut self, id: &str, xs: &[Shape]) -> Shape {
        if xs.len() == 1 {
            return xs[0];
        }
        let c = xs.iter().map(|s| s.c).sum();
        let out = Shape::new(xs[0].n, c, xs[0].h, xs[0].w);
        self.push(id.to_string(), LayerOp::Concat, 0, 0, out);
        out
    }

    fn select(&mut self, id: &str, x: &Shape, channels: &[usize]) -> Shape {
        let out = Shape::new(x.n, channels.len(), x.h, x.w);
        self.push(id.to_string(), LayerOp::Select, 0, 0, out);
        out
    }
}

/// Exact FLOPs and parameters of the network `spec` builds, at `input_res`
/// `(H, W)`. No tensors are allocated.
pub fn count_flops(
    spec: &NetworkSpec,
    block_kind: BlockKind,
    interaction_kind: InteractionKind,
    num_classes: usize,
    input_res: (usize, usize),
) -> Result<CostReport, CostError> {
    let arch = Architecture::new(spec, block_kind, interaction_kind, num_classes)?;
    cost_of(&arch, input_res)
}

/// [`count_flops`] for an already built module tree.
pub fn cost_of(arch: &Architecture, (h, w): (usize, usize)) -> Result<CostReport, CostError> {
    if h < MIN_COST_INPUT || w < MIN_COST_INPUT {
        return Err(CostError::Resolution {
            h,
            w,
            min: MIN_COST_INPUT,
        });
    }
    let mut tracer = CostTracer::default();
    arch.run(&mut tracer, &Shape::new(1, 3, h, w));
    Ok(CostReport::from_layers(tracer.layers, (h, w)))
}

/// MFLOPs processed per millisecond.
pub fn flops_efficiency(flops: u64, latency_ms: f64) -> Result<f64, CostError> {
    if !(latency_ms > 0.0) {
        return Err(CostError::NonPositiveLatency(latency_ms));
    }
    Ok(flops as f64 / (latency_ms * 1e6))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyMeasurement {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
    pub warmup_runs: usize,
    pub measure_runs: usize,
    pub device_label: String,
}

impl fmt::Display for LatencyMeasurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "median {:.3} ms over {} runs ({} warmup) on {}",
            self.median_ms, self.measure_runs, self.warmup_runs, self.device_label
        )
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{phase} run {index} failed: {message}")]
pub struct RunError {
    pub phase: &'static str,
    pub index: usize,
    pub message: String,
}

pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Name of the compute device from `LPS_DEVICE`, defaulting to `cpu`.
pub fn device_label() -> String {
    std::env::var("LPS_DEVICE").unwrap_or_else(|_| "cpu".to_string())
}

/// Times `runner` with a monotonic clock: `warmup_runs` untimed calls, then
/// `measure_runs` timed ones.
pub fn measure_latency<E: fmt::Display>(
    mut runner: impl FnMut() -> Result<(), E>,
    warmup_runs: usize,
    measure_runs: usize,
) -> Result<LatencyMeasurement, RunError> {
    let measure_runs = measure_runs.max(1);
    for index in 0..warmup_runs {
        runner().map_err(|e| RunError {
            phase: "warmup",
            index,
            message: e.to_string(),
        })?;
    }
    let mut samples_ms = Vec::with_capacity(measure_runs);
    for index in 0..measure_runs {
        let start = Instant::now();
        runner().map_err(|e| RunError {
            phase: "timed",
            index,
            message: e.to_string(),
        })?;
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyMeasurement {
        median_ms: median(&samples_ms),
        samples_ms,
        warmup_runs,
        measure_runs,
        device_label: device_label(),
    })
}

/// Per-layer latencies keyed by [`LayerCost::signature`], with an optional
/// fallback throughput.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    #[serde(default)]
    pub default_mflops_per_ms: Option<f64>,
    /// Fixed cost added to every unprofiled layer that does arithmetic.
    #[serde(default)]
    pub layer_overhead_ms: f64,
    #[serde(default)]
    pub layers: BTreeMap<String, f64>,
}

impl DeviceProfile {
    pub fn with_default_rate(mflops_per_ms: f64) -> Self {
        DeviceProfile {
            default_mflops_per_ms: Some(mflops_per_ms),
            ..Default::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path)?;
        let p: DeviceProfile = serde_json::from_str(&text).map_err(|e| CostError::Profile(e.to_string()))?;
        if let Some(r) = p.default_mflops_per_ms {
            if !(r > 0.0) {
                return Err(CostError::Profile(format!("default_mflops_per_ms must be positive, got {r}")));
            }
        }
        if !(p.layer_overhead_ms >= 0.0) {
            return Err(CostError::Profile("layer_overhead_ms must be non-negative".into()));
        }
        if let Some((k, v)) = p.layers.iter().find(|(_, v)| !(**v >= 0.0)) {
            return Err(CostError::Profile(format!("latency for `{k}` must be non-negative, got {v}")));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CostError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CostError::Profile(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Sum of per-layer latencies: profiled entries where present, otherwise
/// `flops / default rate` plus the layer overhead for layers with nonzero FLOPs.
pub fn estimate_latency(report: &CostReport, profile: &DeviceProfile) -> Result<f64, CostError> {
    let mut total = 0.0;
    for layer in &report.per_layer {
        let sig = layer.signature();
        total += match (profile.layers.get(&sig), profile.default_mflops_per_ms) {
            (Some(&ms), _) => ms,
            (None, Some(_)) if layer.flops == 0 => 0.0,
            (None, Some(rate)) => layer.flops as f64 / (rate * 1e6) + profile.layer_overhead_ms,
            (None, None) => return Err(CostError::MissingSignature(sig)),
        };
    }
    Ok(total)
}

/// Exact cost of one channel-preserving stride-1 block on a `c x h x w` map.
pub fn block_cost(kind: BlockKind, (c, h, w): (usize, usize, usize)) -> Result<CostReport, CostError> {
    let module = BlockModule::<f32>::new(kind, c, 0)?;
    let mut tracer = CostTracer::default();
    module.run(&mut tracer, &Shape::new(1, c, h, w));
    Ok(CostReport::from_layers(tracer.layers, (h, w)))
}

/// Builds a profile by timing every distinct arithmetic layer of `report` in
/// isolation. The fallback rate is the aggregate throughput of those layers.
pub fn calibrate_profile(
    report: &CostReport,
    warmup_runs: usize,
    measure_runs: usize,
) -> Result<DeviceProfile, CostError> {
    let mut layers = BTreeMap::new();
    let (mut flops, mut ms) = (0u64, 0.0);
    for layer in report.per_layer.iter().filter(|l| l.flops > 0) {
        let sig = layer.signature();
        if layers.contains_key(&sig) {
            continue;
        }
        let median = time_layer(layer, warmup_runs, measure_runs)?;
        flops += layer.flops;
        ms += median;
        layers.insert(sig, median);
    }
    let default_mflops_per_ms = (ms > 0.0).then(|| flops as f64 / (ms * 1e6));
    Ok(DeviceProfile {
        default_mflops_per_ms,
        layer_overhead_ms: 0.0,
        layers,
    })
}

fn time_layer(layer: &LayerCost, warmup_runs: usize, measure_runs: usize) -> Result<f64, CostError> {
    let (c, h, w) = layer.out_shape;
    let out = Shape::new(1, c, h, w);
    let x = Tensor::<f32>::full(out, 0.5);
    let mut sink = 0.0f32;
    let mut keep = |t: Tensor<f32>| sink += t.data()[0];
    let measured = match layer.op {
        LayerOp::Conv {
            kernel,
            in_channels,
            out_channels,
            groups,
            stride,
            bias,
            in_h,
            in_w,
        } => {
            let g = ConvGeometry {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding: kernel / 2,
                groups,
            };
            let input = Tensor::<f32>::full(Shape::new(1, in_channels, in_h, in_w), 0.5);
            let weight = Tensor::<f32>::full(g.weight_shape(), 0.01);
            let b = bias.then(|| Tensor::<f32>::zeros(Shape::new(1, out_channels, 1, 1)));
            measure_latency(
                || {
                    keep(conv2d(&input, &weight, b.as_ref(), &g));
                    Ok::<_, CostError>(())
                },
                warmup_runs,
                measure_runs,
            )
        }
        LayerOp::Resize { in_h, in_w } => {
            let input = Tensor::<f32>::full(Shape::new(1, c, in_h, in_w), 0.5);
            measure_latency(
                || {
                    keep(resize_bilinear(&input, h, w));
                    Ok::<_, CostError>(())
                },
                warmup_runs,
                measure_runs,
            )
        }
        LayerOp::Norm => {
            let (scale, shift) = (vec![1.1f32; c], vec![0.1f32; c]);
            measure_latency(
                || {
                    let mut y = x.clone();
                    for (i, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
                        plane.iter_mut().for_each(|v| *v = *v * scale[i] + shift[i]);
                    }
                    keep(y);
                    Ok::<_, CostError>(())
                },
                warmup_runs,
                measure_runs,
            )
        }
        LayerOp::Add | LayerOp::Mul => {
            let other = x.clone();
            let mul = layer.op == LayerOp::Mul;
            measure_latency(
                || {
                    keep(x.zip_map(&other, |a, b| if mul { a * b } else { a + b }));
                    Ok::<_, CostError>(())
                },
                warmup_runs,
                measure_runs,
            )
        }
        op => {
            let f: fn(f32) -> f32 = match op {
                LayerOp::Relu => |v| v.max(0.0),
                LayerOp::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
                _ => |v| 1.0 - v,
            };
            measure_latency(
                || {
                    keep(x.map(f));
                    Ok::<_, CostError>(())
                },
                warmup_runs,
                measure_runs,
            )
        }
    };
    std::hint::black_box(sink);
    measured
        .map(|m| m.median_ms)
        .map_err(|e| CostError::Profile(format!("timing `{}` failed: {e}", layer.signature())))
}
