//! Architecture descriptors.
//!
//! A [`NetworkSpec`] is the triple of per-stage depths, per-stage widths and
//! per-path scaling ratios that fully determines one multi-path network. Specs
//! are grown by adding catalog deltas ([`ExpansionOp`]) along exactly one
//! dimension at a time.
//!
//! Ratios are stored as integer eighths so that replaying a trajectory is an
//! exact, equality-comparable computation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of convolutional stages in every path.
pub const NUM_STAGES: usize = 5;
/// Number of path slots a spec can address.
pub const NUM_PATHS: usize = 3;

pub const MAX_DEPTH: u32 = 64;
pub const MAX_WIDTH: u32 = 4096;
/// Largest ratio, in eighths (4.0).
pub const MAX_RATIO_EIGHTHS: u32 = 32;

/// Channel granularity required of each stage width.
pub const WIDTH_GRANULARITY: [u32; NUM_STAGES] = [4, 8, 16, 32, 32];

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("bounds: {field} would become {value}, maximum is {max}")]
    Bounds {
        field: String,
        value: u64,
        max: u64,
    },
    #[error("stepsize must be at least 1")]
    ZeroStep,
    #[error("invalid spec: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("parse error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("parse error in field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("unknown preset `{0}` (expected S, M or L)")]
    UnknownPreset(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// A scaling ratio expressed in eighths. `ScalingRatio(0)` means the path is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ScalingRatio(u32);

impl ScalingRatio {
    pub const ZERO: ScalingRatio = ScalingRatio(0);
    pub const EIGHTH: ScalingRatio = ScalingRatio(1);

    pub const fn from_eighths(eighths: u32) -> Self {
        ScalingRatio(eighths)
    }

    pub const fn eighths(self) -> u32 {
        self.0
    }

    pub const fn is_active(self) -> bool {
        self.0 > 0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 8.0
    }

    /// `round(ratio * extent)` snapped to the nearest multiple of 16 (halves round up),
    /// never below 16.
    pub fn scaled_extent16(self, extent: usize) -> usize {
        // ratio * extent = eighths * extent / 8; nearest multiple of 16 of that value.
        let eighth_units = self.0 as u64 * extent as u64;
        let blocks = (eighth_units + 64) / 128;
        (blocks as usize * 16).max(16)
    }

    /// The serialized `n/8` form (`0` for an absent path).
    pub fn to_eighths_string(self) -> String {
        if self.0 == 0 {
            "0".to_string()
        } else {
            format!("{}/8", self.0)
        }
    }
}

impl fmt::Display for ScalingRatio {
    /// Reduced fraction, e.g. `1/2`, `5/8`, `1`, `0`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return write!(f, "0");
        }
        let g = gcd(self.0, 8);
        let (num, den) = (self.0 / g, 8 / g);
        if den == 1 {
            write!(f, "{num}")
        } else {
            write!(f, "{num}/{den}")
        }
    }
}

impl FromStr for ScalingRatio {
    type Err = String;

    /// Accepts only `0` or `n/8` with a non-negative integer `n`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "0" {
            return Ok(ScalingRatio(0));
        }
        let Some((num, den)) = s.split_once('/') else {
            return Err(format!("ratio `{s}` must be `0` or of the form `n/8`"));
        };
        if den.trim() != "8" {
            return Err(format!("ratio `{s}` must have denominator 8"));
        }
        let num = num.trim();
        if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("ratio `{s}` has a non-integer numerator"));
        }
        num.parse::<u32>()
            .map(ScalingRatio)
            .map_err(|e| format!("ratio `{s}`: {e}"))
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// One invariant violation reported by [`NetworkSpec::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.message)
    }
}

/// Depths, widths and ratios of one multi-path architecture.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub depths: [u32; NUM_STAGES],
    pub widths: [u32; NUM_STAGES],
    pub ratios: [ScalingRatio; NUM_PATHS],
}

impl NetworkSpec {
    /// Builds a spec and checks every invariant. Ratios are normalized first.
    pub fn new(
        depths: [u32; NUM_STAGES],
        widths: [u32; NUM_STAGES],
        ratio_eighths: [u32; NUM_PATHS],
    ) -> Result<Self, SpecError> {
        let mut spec = NetworkSpec {
            depths,
            widths,
            ratios: ratio_eighths.map(ScalingRatio),
        };
        spec.normalize();
        spec.check()?;
        Ok(spec)
    }

    /// Sorts ratios into non-increasing order.
    pub fn normalize(&mut self) {
        self.ratios.sort_by(|a, b| b.cmp(a));
    }

    /// Active ratios in storage order (highest resolution first once normalized).
    pub fn active_ratios(&self) -> Vec<ScalingRatio> {
        self.ratios.iter().copied().filter(|r| r.is_active()).collect()
    }

    pub fn num_paths(&self) -> usize {
        self.ratios.iter().filter(|r| r.is_active()).count()
    }

    pub fn total_depth(&self) -> u32 {
        self.depths.iter().sum()
    }

    pub fn max_ratio(&self) -> ScalingRatio {
        self.ratios.iter().copied().max().unwrap_or_default()
    }

    /// Every invariant violation, not just the first.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (j, &d) in self.depths.iter().enumerate() {
            if d < 1 {
                out.push(violation(format!("depths[{j}]"), "must be at least 1"));
            } else if d > MAX_DEPTH {
                out.push(violation(
                    format!("depths[{j}]"),
                    format!("exceeds maximum {MAX_DEPTH}"),
                ));
            }
        }
        for (j, &w) in self.widths.iter().enumerate() {
            if w < 1 {
                out.push(violation(format!("widths[{j}]"), "must be at least 1"));
            } else if w % WIDTH_GRANULARITY[j] != 0 {
                out.push(violation(
                    format!("widths[{j}]"),
                    format!("not divisible by {}", WIDTH_GRANULARITY[j]),
                ));
            }
            if w > MAX_WIDTH {
                out.push(violation(
                    format!("widths[{j}]"),
                    format!("exceeds maximum {MAX_WIDTH}"),
                ));
            }
        }
        for (i, r) in self.ratios.iter().enumerate() {
            if r.eighths() > MAX_RATIO_EIGHTHS {
                out.push(violation(
                    format!("ratios[{i}]"),
                    format!("exceeds maximum {MAX_RATIO_EIGHTHS}/8"),
                ));
            }
        }
        if self.num_paths() == 0 {
            out.push(violation("ratios", "no active path"));
        }
        if self.ratios.windows(2).any(|w| w[0] < w[1]) {
            out.push(violation("ratios", "not in non-increasing order"));
        }
        out
    }

    pub fn check(&self) -> Result<(), SpecError> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SpecError::Invalid(v))
        }
    }

    /// Adds `k` copies of `op`'s delta along its dimension.
    pub fn apply(&self, op: &ExpansionOp, k: u32) -> Result<NetworkSpec, SpecError> {
        if k == 0 {
            return Err(SpecError::ZeroStep);
        }
        let mut next = self.clone();
        match op.delta {
            Delta::Depth(delta) => {
                for j in 0..NUM_STAGES {
                    next.depths[j] = bounded_add(
                        self.depths[j],
                        delta[j],
                        k,
                        MAX_DEPTH,
                        || format!("depths[{j}]"),
                    )?;
                }
            }
            Delta::Width(delta) => {
                for j in 0..NUM_STAGES {
                    next.widths[j] = bounded_add(
                        self.widths[j],
                        delta[j],
                        k,
                        MAX_WIDTH,
                        || format!("widths[{j}]"),
                    )?;
                }
            }
            Delta::Resolution(delta) => {
                for i in 0..NUM_PATHS {
                    let r = bounded_add(
                        self.ratios[i].eighths(),
                        delta[i].eighths(),
                        k,
                        MAX_RATIO_EIGHTHS,
                        || format!("ratios[{i}]"),
                    )?;
                    next.ratios[i] = ScalingRatio(r);
                }
                next.normalize();
            }
        }
        next.check()?;
        Ok(next)
    }

    /// Pretty JSON document (schema version 1).
    pub fn serialize(&self) -> String {
        let doc = SpecDocument::from(self);
        serde_json::to_string_pretty(&doc).expect("spec document serializes")
    }

    pub fn parse(text: &str) -> Result<NetworkSpec, SpecError> {
        let doc: SpecDocument = serde_json::from_str(text).map_err(|e| SpecError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        doc.into_spec()
    }

    /// Single-line form used as a key in CSV files:
    /// `depths=1,1,1,1,1;widths=4,8,16,32,32;ratios=4/8,0,0`.
    pub fn to_compact(&self) -> String {
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let ratios = self
            .ratios
            .iter()
            .map(|r| r.to_eighths_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "depths={};widths={};ratios={}",
            join(&self.depths),
            join(&self.widths),
            ratios
        )
    }

    pub fn from_compact(text: &str) -> Result<NetworkSpec, SpecError> {
        let mut depths = None;
        let mut widths = None;
        let mut ratios = None;
        for part in text.trim().split(';') {
            let (key, value) = part.split_once('=').ok_or_else(|| SpecError::Field {
                field: part.to_string(),
                message: "expected key=value".into(),
            })?;
            let items: Vec<&str> = value.split(',').collect();
            match key.trim() {
                "depths" => depths = Some(parse_ints::<NUM_STAGES>("depths", &items)?),
                "widths" => widths = Some(parse_ints::<NUM_STAGES>("widths", &items)?),
                "ratios" => ratios = Some(parse_ratios("ratios", &items)?),
                other => {
                    return Err(SpecError::Field {
                        field: other.to_string(),
                        message: "unknown key".into(),
                    })
                }
            }
        }
        let missing = |f: &str| SpecError::Field {
            field: f.to_string(),
            message: "missing".into(),
        };
        let spec = NetworkSpec {
            depths: depths.ok_or_else(|| missing("depths"))?,
            widths: widths.ok_or_else(|| missing("widths"))?,
            ratios: ratios.ok_or_else(|| missing("ratios"))?,
        };
        spec.check()?;
        Ok(spec)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(", ");
        let ratios = self
            .ratios
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        write!(
            f,
            "B={{{}}} C={{{}}} R={{{}}}",
            join(&self.depths),
            join(&self.widths),
            ratios
        )
    }
}

fn violation(field: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        message: message.into(),
    }
}

fn bounded_add(
    base: u32,
    delta: u32,
    k: u32,
    max: u32,
    field: impl Fn() -> String,
) -> Result<u32, SpecError> {
    let value = base as u64 + delta as u64 * k as u64;
    if value > max as u64 {
        return Err(SpecError::Bounds {
            field: field(),
            value,
            max: max as u64,
        });
    }
    Ok(value as u32)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDocument {
    schema_version: u32,
    depths: Vec<u32>,
    widths: Vec<u32>,
    ratios: Vec<String>,
}

impl From<&NetworkSpec> for SpecDocument {
    fn from(s: &NetworkSpec) -> Self {
        SpecDocument {
            schema_version: SCHEMA_VERSION,
            depths: s.depths.to_vec(),
            widths: s.widths.to_vec(),
            ratios: s.ratios.iter().map(|r| r.to_eighths_string()).collect(),
        }
    }
}

impl SpecDocument {
    fn into_spec(self) -> Result<NetworkSpec, SpecError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SpecError::Field {
                field: "schema_version".into(),
                message: format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            });
        }
        let depths: Vec<String> = self.depths.iter().map(u32::to_string).collect();
        let widths: Vec<String> = self.widths.iter().map(u32::to_string).collect();
        let d: Vec<&str> = depths.iter().map(String::as_str).collect();
        let w: Vec<&str> = widths.iter().map(String::as_str).collect();
        let r: Vec<&str> = self.ratios.iter().map(String::as_str).collect();
        let spec = NetworkSpec {
            depths: parse_ints::<NUM_STAGES>("depths", &d)?,
            widths: parse_ints::<NUM_STAGES>("widths", &w)?,
            ratios: parse_ratios("ratios", &r)?,
        };
        spec.check()?;
        Ok(spec)
    }
}

fn parse_ints<const N: usize>(field: &str, items: &[&str]) -> Result<[u32; N], SpecError> {
    if items.len() != N {
        return Err(SpecError::Field {
            field: field.to_string(),
            message: format!("expected {N} values, found {}", items.len()),
        });
    }
    let mut out = [0u32; N];
    for (i, s) in items.iter().enumerate() {
        out[i] = s.trim().parse().map_err(|e| SpecError::Field {
            field: format!("{field}[{i}]"),
            message: format!("`{s}`: {e}"),
        })?;
    }
    Ok(out)
}

fn parse_ratios(field: &str, items: &[&str]) -> Result<[ScalingRatio; NUM_PATHS], SpecError> {
    if items.len() != NUM_PATHS {
        return Err(SpecError::Field {
            field: field.to_string(),
            message: format!("expected {NUM_PATHS} values, found {}", items.len()),
        });
    }
    let mut out = [ScalingRatio::ZERO; NUM_PATHS];
    for (i, s) in items.iter().enumerate() {
        out[i] = s.parse().map_err(|message| SpecError::Field {
            field: format!("{field}[{i}]"),
            message,
        })?;
    }
    Ok(out)
}

/// Which of the three descriptor vectors an expansion touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Depth,
    Width,
    Resolution,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Dimension::Depth => "Depth",
            Dimension::Width => "Width",
            Dimension::Resolution => "Resolution",
        })
    }
}

impl FromStr for Dimension {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "depth" => Ok(Dimension::Depth),
            "width" => Ok(Dimension::Width),
            "resolution" => Ok(Dimension::Resolution),
            other => Err(format!("unknown dimension `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Delta {
    Depth([u32; NUM_STAGES]),
    Width([u32; NUM_STAGES]),
    Resolution([ScalingRatio; NUM_PATHS]),
}

/// One catalog expansion. Only [`catalog`] constructs these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExpansionOp {
    index: usize,
    delta: Delta,
}

impl ExpansionOp {
    /// Position in the catalog; lower indices win ties.
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn delta(&self) -> &Delta {
        &self.delta
    }

    pub fn dimension(&self) -> Dimension {
        match self.delta {
            Delta::Depth(_) => Dimension::Depth,
            Delta::Width(_) => Dimension::Width,
            Delta::Resolution(_) => Dimension::Resolution,
        }
    }

    /// The catalog op at `index`, if any.
    pub fn by_index(index: usize) -> Option<ExpansionOp> {
        CATALOG.get(index).copied()
    }
}

impl fmt::Display for ExpansionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.delta {
            Delta::Depth(d) | Delta::Width(d) => {
                let v = d.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
                write!(f, "{}{{{}}}", self.dimension(), v)
            }
            Delta::Resolution(r) => {
                let v = r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
                write!(f, "Resolution{{{v}}}")
            }
        }
    }
}

const R0: ScalingRatio = ScalingRatio::ZERO;
const R1: ScalingRatio = ScalingRatio::EIGHTH;

static CATALOG: [ExpansionOp; 10] = [
    ExpansionOp { index: 0, delta: Delta::Depth([0, 1, 1, 1, 1]) },
    ExpansionOp { index: 1, delta: Delta::Depth([0, 0, 1, 1, 1]) },
    ExpansionOp { index: 2, delta: Delta::Depth([0, 0, 0, 1, 1]) },
    ExpansionOp { index: 3, delta: Delta::Width([4, 8, 16, 32, 32]) },
    ExpansionOp { index: 4, delta: Delta::Width([0, 8, 16, 32, 32]) },
    ExpansionOp { index: 5, delta: Delta::Width([0, 0, 16, 32, 32]) },
    ExpansionOp { index: 6, delta: Delta::Width([0, 0, 0, 32, 32]) },
    ExpansionOp { index: 7, delta: Delta::Resolution([R1, R0, R0]) },
    ExpansionOp { index: 8, delta: Delta::Resolution([R0, R1, R0]) },
    ExpansionOp { index: 9, delta: Delta::Resolution([R0, R0, R1]) },
];

/// The ten expansion operations, in tie-break order.
pub fn catalog() -> &'static [ExpansionOp] {
    &CATALOG
}

/// The tiny single-path starting network.
pub fn initial_spec() -> NetworkSpec {
    NetworkSpec {
        depths: [1, 1, 1, 1, 1],
        widths: [4, 8, 16, 32, 32],
        ratios: [ScalingRatio(4), R0, R0],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    S,
    M,
    L,
}

impl FromStr for Preset {
    type Err = SpecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "S" | "s" => Ok(Preset::S),
            "M" | "m" => Ok(Preset::M),
            "L" | "l" => Ok(Preset::L),
            other => Err(SpecError::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Preset::S => "S",
            Preset::M => "M",
            Preset::L => "L",
        })
    }
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::S, Preset::M, Preset::L];

    pub fn spec(self) -> NetworkSpec {
        let depths = [1, 3, 3, 10, 10];
        match self {
            Preset::S => NetworkSpec {
                depths,
                widths: [8, 24, 48, 96, 96],
                ratios: [ScalingRatio(6), ScalingRatio(2), R0],
            },
            Preset::M => NetworkSpec {
                depths,
                widths: [8, 24, 48, 96, 96],
                ratios: [ScalingRatio(8), ScalingRatio(2), R0],
            },
            Preset::L => NetworkSpec {
                depths,
                widths: [8, 24, 64, 160, 160],
                ratios: [ScalingRatio(8), ScalingRatio(2), R0],
            },
        }
    }
}

/// Looks a preset up by name (`S`, `M` or `L`).
pub fn preset(name: &str) -> Result<NetworkSpec, SpecError> {
    name.parse::<Preset>().map(Preset::spec)
}
