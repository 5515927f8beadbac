//! Scenario files: TOML model, semantic validation with source locations, and
//! parameter overrides for sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cn::{validate_pairing, CnSliceId, Direction, PairingMap, PairingViolation, RadioSliceId, Registries, SliceKind};
use crate::grid::{check_catalog, partition_grid, CarveRequest, GridSpec, Numerology, ResourceGrid, SegmentSpec, TimePattern};
use crate::ids::SliceNetId;
use crate::mac::{Policy, Qos};
use crate::phy::RachConfig;
use crate::ran::{CuPlaneOption, RanThresholds};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub duration_ms: u64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub sim: SimParams,
    /// Empty means the built-in catalog.
    #[serde(default)]
    pub numerologies: Vec<Numerology>,
    pub grid: GridSection,
    #[serde(default)]
    pub ran: RanSection,
    #[serde(default)]
    pub common_rach: RachConfig,
    pub slices: Vec<SliceSection>,
    pub nodes: Vec<NodeSection>,
    #[serde(default)]
    pub flows: Vec<FlowSection>,
    #[serde(default)]
    pub rach_bursts: Vec<BurstSection>,
    #[serde(default)]
    pub handovers: Vec<HandoverSection>,
    #[serde(default)]
    pub link_failures: Vec<LinkFailureSection>,
    #[serde(default)]
    pub cn: CnSection,
    #[serde(default)]
    pub pairing: PairingSection,
    #[serde(default)]
    pub offload: Option<OffloadSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// Bytes per cell per subframe at 15 kHz spacing.
    pub cell_bytes: u64,
    pub pf_window: f64,
    pub trigger_period_ms: u64,
    pub balance_period_ms: u64,
    /// Delay before a blocked or unassociated device tries again.
    pub retry_ms: u64,
    pub deactivation_latency_ms: u64,
    /// Check MAC containment and lifecycle invariants every subframe.
    pub audit: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            cell_bytes: 100,
            pf_window: 100.0,
            trigger_period_ms: 10,
            balance_period_ms: 100,
            retry_ms: 100,
            deactivation_latency_ms: 10,
            audit: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub total_blocks: u32,
    #[serde(default = "default_period")]
    pub period: u32,
    pub segments: Vec<SegmentSection>,
}

fn default_period() -> u32 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSection {
    pub name: String,
    #[serde(default)]
    pub numerology: u8,
    /// Half-open `[first, end)` block range.
    pub blocks: [u32; 2],
    #[serde(default)]
    pub pattern: PatternSpec,
    #[serde(default)]
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PatternSpec {
    /// `every`, `odd` or `even`.
    Named(String),
    Phases(Vec<u32>),
}

impl Default for PatternSpec {
    fn default() -> Self {
        PatternSpec::Named("every".into())
    }
}

impl PatternSpec {
    pub fn to_pattern(&self, period: u32) -> Result<TimePattern, String> {
        match self {
            PatternSpec::Named(n) => match n.as_str() {
                "every" => Ok(TimePattern::every(period)),
                "odd" => Ok(TimePattern::odd(period)),
                "even" => Ok(TimePattern::even(period)),
                other => Err(format!("unknown time pattern '{other}' (expected every, odd, even or a phase list)")),
            },
            PatternSpec::Phases(p) => Ok(TimePattern::phases(period, p)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RanSection {
    /// Default C/U-plane option for slices that do not set their own.
    pub cu_plane: CuPlaneOption,
    pub control_cost: f64,
    pub activation_latency_ms: u64,
    pub thresholds: RanThresholds,
}

impl Default for RanSection {
    fn default() -> Self {
        RanSection {
            cu_plane: CuPlaneOption::Option3,
            control_cost: 1.0,
            activation_latency_ms: 50,
            thresholds: RanThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSection {
    pub id: u16,
    pub name: String,
    #[serde(default = "vertical")]
    pub kind: SliceKind,
    #[serde(default = "round_robin")]
    pub policy: Policy,
    /// Share of the shared segment, if the slice uses it.
    #[serde(default)]
    pub pool_weight: Option<f64>,
    #[serde(default)]
    pub cu_plane: Option<CuPlaneOption>,
    /// APs where the slice is configured Active from the start.
    #[serde(default)]
    pub active_at: Vec<String>,
    /// AP classes the slice may run on; empty means all.
    #[serde(default)]
    pub eligible: Vec<String>,
    #[serde(default)]
    pub activation_latency_ms: Option<u64>,
    /// Slice-specific random access channel; absent means the common one.
    #[serde(default)]
    pub rach: Option<RachConfig>,
    #[serde(default)]
    pub resources: Vec<ResourceSection>,
}

fn vertical() -> SliceKind {
    SliceKind::Vertical
}

fn round_robin() -> Policy {
    Policy::RoundRobin
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSection {
    pub segment: String,
    #[serde(default)]
    pub blocks: Option<u32>,
    #[serde(default)]
    pub cells: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Ap,
    Device,
    Infra,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSection {
    pub name: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub class: String,
    /// Slice memberships (devices).
    #[serde(default)]
    pub slices: Vec<u16>,
    /// Link quality towards each AP.
    #[serde(default)]
    pub links: BTreeMap<String, f64>,
    /// `[start, end)` attachment windows in ms; empty means the whole run.
    #[serde(default)]
    pub windows: Vec<[u64; 2]>,
    #[serde(default)]
    pub compute: Option<ComputeSection>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeSection {
    /// Mega-operations per second.
    pub capacity: f64,
    #[serde(default)]
    pub reserved_local: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub device: String,
    pub slice: u16,
    #[serde(default)]
    pub service: String,
    #[serde(default = "uplink")]
    pub direction: Direction,
    pub packet_bytes: u64,
    pub interval_ms: f64,
    #[serde(default)]
    pub start_ms: u64,
    #[serde(default)]
    pub stop_ms: Option<u64>,
    #[serde(default)]
    pub qos: Qos,
    /// Fraction of packets processed on a nearby horizontal slice instead.
    #[serde(default)]
    pub local_fraction: f64,
    #[serde(default)]
    pub local_slice: Option<u16>,
}

fn uplink() -> Direction {
    Direction::Uplink
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstSection {
    pub ap: String,
    /// Absent means the common RACH.
    #[serde(default)]
    pub slice: Option<u16>,
    pub contenders: u32,
    #[serde(default)]
    pub at_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandoverSection {
    pub device: String,
    pub to: String,
    pub at_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkFailureSection {
    pub node: String,
    pub at_ms: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnSection {
    pub functions: Vec<FunctionSection>,
    pub slices: Vec<CnSliceSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSection {
    pub name: String,
    pub rate_per_ms: f64,
    pub latency_us: u64,
    #[serde(default)]
    pub host: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnSliceSection {
    pub id: String,
    pub chain: Vec<String>,
    pub service: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingSection {
    /// Radio slice (segment name) to RAN slice ids.
    pub radio_to_ran: BTreeMap<String, Vec<u16>>,
    /// RAN slice id (as a string key) to CN slice ids.
    pub ran_to_cn: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffloadSection {
    /// The horizontal slice carrying container traffic.
    pub slice: u16,
    #[serde(default = "default_rtt")]
    pub signaling_rtt_ms: f64,
    #[serde(default = "default_pdu")]
    pub pdu_size: u64,
    /// Per-stage overhead when slicing runs at the OS level; 0 below it.
    #[serde(default)]
    pub os_overhead_ms: f64,
    #[serde(default = "default_timeout")]
    pub stage_timeout_ms: u64,
    #[serde(default = "default_advert")]
    pub advert_period_ms: u64,
    #[serde(default)]
    pub host_floor: f64,
    #[serde(default)]
    pub tasks: Vec<TaskSection>,
    #[serde(default)]
    pub host_failures: Vec<HostFailureSection>,
}

fn default_rtt() -> f64 {
    10.0
}
fn default_pdu() -> u64 {
    1000
}
fn default_timeout() -> u64 {
    5000
}
fn default_advert() -> u64 {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub id: u32,
    pub client: String,
    pub host: String,
    pub at_ms: u64,
    pub total_ops: f64,
    #[serde(default = "one")]
    pub sliceable_fraction: f64,
    pub ship_bytes: u64,
    pub result_bytes: u64,
    #[serde(default)]
    pub deadline_ms: Option<f64>,
    /// Capacity asked from the host; defaults to its advertised shareable.
    #[serde(default)]
    pub asked: Option<f64>,
    /// Repeat the task `count` times, `every_ms` apart, with consecutive ids.
    #[serde(default = "one_u32")]
    pub count: u32,
    #[serde(default)]
    pub every_ms: u64,
}

fn one() -> f64 {
    1.0
}
fn one_u32() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostFailureSection {
    pub host: String,
    pub at_ms: u64,
}

/// One step of a key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Seg {
    Key(String),
    Index(usize),
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeyPath(pub Vec<Seg>);

impl KeyPath {
    /// Accepts `a.0.b`, `a[0].b` and `a[*].b`.
    pub fn parse(s: &str) -> KeyPath {
        let s = s.replace('[', ".").replace(']', "");
        KeyPath(
            s.split('.')
                .filter(|p| !p.is_empty())
                .map(|p| {
                    if p == "*" {
                        Seg::Any
                    } else if let Ok(i) = p.parse::<usize>() {
                        Seg::Index(i)
                    } else {
                        Seg::Key(p.to_string())
                    }
                })
                .collect(),
        )
    }

    fn key(mut self, k: &str) -> Self {
        self.0.push(Seg::Key(k.to_string()));
        self
    }

    fn index(mut self, i: usize) -> Self {
        self.0.push(Seg::Index(i));
        self
    }
}

impl fmt::Display for KeyPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            match s {
                Seg::Key(k) if i == 0 => write!(f, "{k}")?,
                Seg::Key(k) => write!(f, ".{k}")?,
                Seg::Index(n) => write!(f, "[{n}]")?,
                Seg::Any => write!(f, "[*]")?,
            }
        }
        Ok(())
    }
}

fn p(k: &str) -> KeyPath {
    KeyPath::default().key(k)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    /// 1-based line and column in the scenario file, when known.
    pub location: Option<(usize, usize)>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            Some((l, c)) => write!(f, "{l}:{c}: {}: {}", self.path, self.message),
            None if self.path.is_empty() => write!(f, "{}", self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{}", join(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("unknown parameter path '{0}'")]
    UnknownPath(String),
}

fn join(d: &[Diagnostic]) -> String {
    d.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

impl ScenarioError {
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        match self {
            ScenarioError::Invalid(d) => d.clone(),
            other => vec![Diagnostic {
                path: String::new(),
                location: None,
                message: other.to_string(),
            }],
        }
    }
}

/// Scenario text plus its parsed form.
#[derive(Debug, Clone)]
pub struct ScenarioSource {
    pub text: String,
    pub table: toml::Table,
}

impl ScenarioSource {
    pub fn read(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| ScenarioError::Invalid(vec![toml_diag(text, &e)]))?;
        Ok(ScenarioSource {
            text: text.to_string(),
            table,
        })
    }

    /// Deserializes and validates.
    pub fn scenario(&self) -> Result<Scenario, ScenarioError> {
        scenario_from_table(&self.table, Some(&self.text))
    }

    /// Copy of the source with `path` set to `value` (wildcards allowed).
    pub fn with_param(&self, path: &str, value: &toml::Value) -> Result<ScenarioSource, ScenarioError> {
        let mut table = self.table.clone();
        let kp = KeyPath::parse(path);
        if kp.0.is_empty() || set_path(&mut table, &kp.0, value) == 0 {
            return Err(ScenarioError::UnknownPath(path.to_string()));
        }
        // A misspelt final key only shows up as an unknown field.
        if let Err(e) = Scenario::deserialize(toml::Value::Table(table.clone())) {
            if e.message().contains("unknown field") {
                return Err(ScenarioError::UnknownPath(path.to_string()));
            }
        }
        Ok(ScenarioSource {
            text: self.text.clone(),
            table,
        })
    }
}

fn toml_diag(text: &str, e: &toml::de::Error) -> Diagnostic {
    Diagnostic {
        path: String::new(),
        location: e.span().map(|s| line_col(text, s.start)),
        message: e.message().to_string(),
    }
}

fn scenario_from_table(table: &toml::Table, text: Option<&str>) -> Result<Scenario, ScenarioError> {
    let sc = Scenario::deserialize(toml::Value::Table(table.clone())).map_err(|e| {
        ScenarioError::Invalid(vec![Diagnostic {
            path: String::new(),
            location: None,
            message: e.message().to_string(),
        }])
    })?;
    let mut diags = validate(&sc);
    if let Some(text) = text {
        locate_all(text, &mut diags);
    }
    if diags.is_empty() {
        Ok(sc)
    } else {
        Err(ScenarioError::Invalid(diags.into_iter().map(|(_, d)| d).collect()))
    }
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    ScenarioSource::parse(text)?.scenario()
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    ScenarioSource::read(path)?.scenario()
}

/// Sets every match of `path`; returns how many values were written. Keys
/// along the way must exist; the last key may be new.
pub fn set_path(table: &mut toml::Table, path: &[Seg], value: &toml::Value) -> usize {
    fn go(v: &mut toml::Value, path: &[Seg], value: &toml::Value) -> usize {
        let Some((head, rest)) = path.split_first() else {
            *v = value.clone();
            return 1;
        };
        match (head, v) {
            (Seg::Key(k), toml::Value::Table(t)) => {
                if rest.is_empty() {
                    t.insert(k.clone(), value.clone());
                    1
                } else {
                    t.get_mut(k).map_or(0, |x| go(x, rest, value))
                }
            }
            (Seg::Index(i), toml::Value::Array(a)) => a.get_mut(*i).map_or(0, |x| go(x, rest, value)),
            (Seg::Any, toml::Value::Array(a)) => a.iter_mut().map(|x| go(x, rest, value)).sum(),
            (Seg::Any, toml::Value::Table(t)) => t.iter_mut().map(|(_, x)| go(x, rest, value)).sum(),
            _ => 0,
        }
    }
    let mut root = toml::Value::Table(std::mem::take(table));
    let n = go(&mut root, path, value);
    if let toml::Value::Table(t) = root {
        *table = t;
    }
    n
}

/// Parses a sweep value as a TOML literal, falling back to a bare string.
pub fn parse_value(s: &str) -> toml::Value {
    let s = s.trim();
    match toml::from_str::<toml::Table>(&format!("v = {s}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(s.to_string())),
        Err(_) => toml::Value::String(s.to_string()),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

enum Cur<'a> {
    Item(&'a toml_edit::Item),
    Table(&'a toml_edit::Table),
    Value(&'a toml_edit::Value),
}

impl<'a> Cur<'a> {
    fn key(&self, k: &str) -> Option<Cur<'a>> {
        match *self {
            Cur::Item(toml_edit::Item::Table(t)) | Cur::Table(t) => t.get(k).map(Cur::Item),
            Cur::Item(toml_edit::Item::Value(v)) | Cur::Value(v) => v.as_inline_table()?.get(k).map(Cur::Value),
            _ => None,
        }
    }

    fn index(&self, i: usize) -> Option<Cur<'a>> {
        match *self {
            Cur::Item(toml_edit::Item::ArrayOfTables(a)) => a.get(i).map(Cur::Table),
            Cur::Item(toml_edit::Item::Value(v)) | Cur::Value(v) => v.as_array()?.get(i).map(Cur::Value),
            _ => None,
        }
    }

    fn span(&self) -> Option<Range<usize>> {
        match *self {
            Cur::Item(i) => i.span(),
            Cur::Table(t) => t.span(),
            Cur::Value(v) => v.span(),
        }
    }
}

/// Span of the deepest existing element along `path`.
fn span_of(doc: &toml_edit::ImDocument<&str>, path: &KeyPath) -> Option<Range<usize>> {
    let mut cur = Cur::Table(doc.as_table());
    let mut best = None;
    for seg in &path.0 {
        let next = match seg {
            Seg::Key(k) => cur.key(k),
            Seg::Index(i) => cur.index(*i),
            Seg::Any => None,
        };
        match next {
            Some(n) => {
                if let Some(s) = n.span() {
                    best = Some(s);
                }
                cur = n;
            }
            None => break,
        }
    }
    best
}

fn locate_all(text: &str, diags: &mut [(KeyPath, Diagnostic)]) {
    let Ok(doc) = toml_edit::ImDocument::parse(text) else { return };
    for (kp, d) in diags.iter_mut() {
        d.location = span_of(&doc, kp).map(|s| line_col(text, s.start));
    }
}

struct Checker {
    out: Vec<(KeyPath, Diagnostic)>,
}

impl Checker {
    fn err(&mut self, path: KeyPath, message: impl Into<String>) {
        self.out.push((
            path.clone(),
            Diagnostic {
                path: path.to_string(),
                location: None,
                message: message.into(),
            },
        ));
    }
}

impl Scenario {
    pub fn catalog(&self) -> Vec<Numerology> {
        if self.numerologies.is_empty() {
            Numerology::default_catalog()
        } else {
            self.numerologies.clone()
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec, String> {
        let mut segments = Vec::new();
        for s in &self.grid.segments {
            segments.push(SegmentSpec {
                name: s.name.clone(),
                numerology: s.numerology,
                blocks: s.blocks[0]..s.blocks[1],
                pattern: s.pattern.to_pattern(self.grid.period)?,
                shared: s.shared,
            });
        }
        Ok(GridSpec {
            total_blocks: self.grid.total_blocks,
            period: self.grid.period,
            segments,
        })
    }

    pub fn build_grid(&self) -> Result<ResourceGrid, String> {
        let spec = self.grid_spec()?;
        partition_grid(&spec, &self.catalog()).map_err(|e| e.to_string())
    }

    /// Carve requests for a slice against `grid`'s segment ids.
    pub fn carve_requests(&self, slice: &SliceSection, grid: &ResourceGrid) -> Result<Vec<CarveRequest>, String> {
        slice
            .resources
            .iter()
            .map(|r| {
                let seg = grid
                    .segment_by_name(&r.segment)
                    .ok_or_else(|| format!("unknown segment '{}'", r.segment))?;
                match (r.blocks, r.cells) {
                    (Some(count), None) => Ok(CarveRequest::Blocks { segment: seg.id, count }),
                    (None, Some(count)) => Ok(CarveRequest::Cells { segment: seg.id, count }),
                    _ => Err("exactly one of blocks or cells must be given".to_string()),
                }
            })
            .collect()
    }

    pub fn slice(&self, id: SliceNetId) -> Option<&SliceSection> {
        self.slices.iter().find(|s| s.id == id.0)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn pairing_map(&self) -> PairingMap {
        let mut map = PairingMap::default();
        for (radio, rans) in &self.pairing.radio_to_ran {
            map.radio_to_ran.insert(
                RadioSliceId(radio.clone()),
                rans.iter().map(|r| SliceNetId(*r)).collect(),
            );
        }
        for (ran, cns) in &self.pairing.ran_to_cn {
            if let Ok(id) = ran.parse::<u16>() {
                map.ran_to_cn
                    .insert(SliceNetId(id), cns.iter().map(|c| CnSliceId(c.clone())).collect());
            }
        }
        map
    }

    pub fn registries(&self) -> Registries {
        Registries {
            radio: self.grid.segments.iter().map(|s| RadioSliceId(s.name.clone())).collect(),
            ran: self.slices.iter().map(|s| SliceNetId(s.id)).collect(),
            horizontal: self
                .slices
                .iter()
                .filter(|s| s.kind == SliceKind::Horizontal)
                .map(|s| SliceNetId(s.id))
                .collect(),
            cn: self.cn.slices.iter().map(|s| CnSliceId(s.id.clone())).collect(),
        }
    }
}

/// Every cross-reference and invariant the run relies on.
fn validate(sc: &Scenario) -> Vec<(KeyPath, Diagnostic)> {
    let mut c = Checker { out: Vec::new() };

    if let Err(e) = check_catalog(&sc.catalog()) {
        c.err(p("numerologies"), e.to_string());
    }
    if sc.sim.cell_bytes == 0 {
        c.err(p("sim").key("cell_bytes"), "must be positive");
    }
    if sc.sim.trigger_period_ms == 0 || sc.sim.balance_period_ms == 0 || sc.sim.retry_ms == 0 {
        c.err(p("sim"), "periods must be positive");
    }

    // Grid
    let mut grid = None;
    let mut seg_names = BTreeSet::new();
    for (i, s) in sc.grid.segments.iter().enumerate() {
        let sp = p("grid").key("segments").index(i);
        if !seg_names.insert(s.name.clone()) {
            c.err(sp.clone().key("name"), format!("duplicate segment name '{}'", s.name));
        }
        if let Err(e) = s.pattern.to_pattern(sc.grid.period) {
            c.err(sp.key("pattern"), e);
        }
    }
    match sc.grid_spec() {
        Ok(spec) => match partition_grid(&spec, &sc.catalog()) {
            Ok(g) => grid = Some(g),
            Err(e) => {
                let at = match &e {
                    crate::grid::GridError::Overlap { b, .. } | crate::grid::GridError::Bounds { segment: b, .. } => {
                        sc.grid.segments.iter().position(|s| &s.name == b)
                    }
                    crate::grid::GridError::UnknownNumerology { segment, .. } => {
                        sc.grid.segments.iter().position(|s| &s.name == segment)
                    }
                    _ => None,
                };
                let path = match at {
                    Some(i) => p("grid").key("segments").index(i),
                    None => p("grid"),
                };
                c.err(path, e.to_string());
            }
        },
        Err(_) => {}
    }

    // Nodes
    let mut names = BTreeMap::new();
    for (i, n) in sc.nodes.iter().enumerate() {
        if names.insert(n.name.clone(), n.kind).is_some() {
            c.err(p("nodes").index(i).key("name"), format!("duplicate node name '{}'", n.name));
        }
    }
    let is_ap = |name: &str| names.get(name) == Some(&NodeKind::Ap);
    let slice_ids: BTreeMap<u16, &SliceSection> = sc.slices.iter().map(|s| (s.id, s)).collect();

    // Slices
    let mut seen = BTreeSet::new();
    for (i, s) in sc.slices.iter().enumerate() {
        let sp = p("slices").index(i);
        if !seen.insert(s.id) {
            c.err(sp.clone().key("id"), format!("duplicate sNetID {}", s.id));
        }
        if let Some(w) = s.pool_weight {
            if w <= 0.0 || !w.is_finite() {
                c.err(sp.clone().key("pool_weight"), "must be positive");
            }
        }
        if let Some(r) = &s.rach {
            if let Err(e) = r.validate() {
                c.err(sp.clone().key("rach"), e.to_string());
            }
        }
        for (k, ap) in s.active_at.iter().enumerate() {
            if !is_ap(ap) {
                c.err(sp.clone().key("active_at").index(k), format!("'{ap}' is not an access point"));
            }
        }
        if s.resources.is_empty() && s.pool_weight.is_none() {
            c.err(sp.clone().key("resources"), "slice has neither resources nor a pool weight");
        }
        for (k, r) in s.resources.iter().enumerate() {
            let rp = sp.clone().key("resources").index(k);
            match sc.grid.segments.iter().find(|g| g.name == r.segment) {
                None => c.err(rp.key("segment"), format!("unknown segment '{}'", r.segment)),
                Some(g) if g.shared => c.err(
                    rp.key("segment"),
                    format!("segment '{}' is shared and cannot be carved; use pool_weight", r.segment),
                ),
                Some(_) => {
                    if r.blocks.is_some() == r.cells.is_some() {
                        c.err(rp, "exactly one of blocks or cells must be given");
                    }
                }
            }
        }
        if s.pool_weight.is_some() && !sc.grid.segments.iter().any(|g| g.shared) {
            c.err(sp.clone().key("pool_weight"), "no shared segment to draw from");
        }
        if let Some(g) = &grid {
            if let Ok(reqs) = sc.carve_requests(s, g) {
                let mut g = g.clone();
                if let Err(e) = g.carve_subset(SliceNetId(s.id), &reqs) {
                    c.err(sp.key("resources"), e.to_string());
                }
            }
        }
    }

    // Slices configured Active from the start must fit together at each AP.
    if let Some(g) = &grid {
        for n in sc.nodes.iter().filter(|n| n.kind == NodeKind::Ap) {
            let mut g = g.clone();
            for (i, s) in sc.slices.iter().enumerate() {
                if !s.active_at.contains(&n.name) {
                    continue;
                }
                if let Ok(reqs) = sc.carve_requests(s, &g) {
                    if let Err(e) = g.carve_subset(SliceNetId(s.id), &reqs) {
                        c.err(
                            p("slices").index(i).key("active_at"),
                            format!("cannot start active at '{}': {e}", n.name),
                        );
                    }
                }
            }
        }
    }

    for (i, n) in sc.nodes.iter().enumerate() {
        let np = p("nodes").index(i);
        for (k, s) in n.slices.iter().enumerate() {
            if !slice_ids.contains_key(s) {
                c.err(np.clone().key("slices").index(k), format!("unknown slice {s}"));
            }
        }
        for ap in n.links.keys() {
            if !is_ap(ap) {
                c.err(np.clone().key("links").key(ap), format!("'{ap}' is not an access point"));
            }
        }
        for (k, w) in n.windows.iter().enumerate() {
            if w[0] >= w[1] {
                c.err(np.clone().key("windows").index(k), "window must have start < end");
            }
        }
        if let Some(cp) = &n.compute {
            if cp.capacity <= 0.0 || !(0.0..=1.0).contains(&cp.reserved_local) {
                c.err(np.clone().key("compute"), "capacity must be positive and reserved_local in [0, 1]");
            }
        }
        if n.kind == NodeKind::Device && !n.slices.is_empty() && n.links.is_empty() {
            c.err(np.key("links"), "device has slice memberships but no links");
        }
    }

    // CN
    let fnames: BTreeSet<&str> = sc.cn.functions.iter().map(|f| f.name.as_str()).collect();
    for (i, f) in sc.cn.functions.iter().enumerate() {
        if f.rate_per_ms <= 0.0 {
            c.err(p("cn").key("functions").index(i).key("rate_per_ms"), "processing rate must be positive");
        }
    }
    if fnames.len() != sc.cn.functions.len() {
        c.err(p("cn").key("functions"), "duplicate function names");
    }
    for (i, s) in sc.cn.slices.iter().enumerate() {
        let sp = p("cn").key("slices").index(i);
        if s.chain.is_empty() {
            c.err(sp.clone().key("chain"), "chain must not be empty");
        }
        for (k, f) in s.chain.iter().enumerate() {
            if !fnames.contains(f.as_str()) {
                c.err(sp.clone().key("chain").index(k), format!("unknown function '{f}'"));
            }
        }
    }

    // Pairing
    for key in sc.pairing.ran_to_cn.keys() {
        if key.parse::<u16>().is_err() {
            c.err(p("pairing").key("ran_to_cn").key(key), format!("'{key}' is not a slice id"));
        }
    }
    if let Err(violations) = validate_pairing(&sc.pairing_map(), &sc.registries()) {
        for v in violations {
            let path = match &v {
                PairingViolation::UnknownRadio(r) => p("pairing").key("radio_to_ran").key(&r.0),
                PairingViolation::UnknownCn(cn) => {
                    let ran = sc
                        .pairing
                        .ran_to_cn
                        .iter()
                        .find(|(_, v)| v.contains(&cn.0))
                        .map(|(k, _)| k.clone())
                        .unwrap_or_default();
                    p("pairing").key("ran_to_cn").key(&ran)
                }
                PairingViolation::UnknownRan(r) | PairingViolation::MultipleRadioParents { ran: r, .. } | PairingViolation::NoRadioParent(r) => {
                    match sc.pairing.radio_to_ran.iter().find(|(_, v)| v.contains(&r.0)) {
                        Some((k, _)) => p("pairing").key("radio_to_ran").key(k),
                        None => p("pairing").key("ran_to_cn").key(&r.0.to_string()),
                    }
                }
                PairingViolation::UnpairedCn(cn) => {
                    match sc.cn.slices.iter().position(|s| s.id == cn.0) {
                        Some(i) => p("cn").key("slices").index(i),
                        None => p("pairing"),
                    }
                }
                PairingViolation::UnpairedRan(r) => match sc.slices.iter().position(|s| s.id == r.0) {
                    Some(i) => p("slices").index(i),
                    None => p("pairing"),
                },
            };
            c.err(path, v.to_string());
        }
    }

    // Flows
    let cn_slices: BTreeMap<CnSliceId, crate::cn::CnSlice> = sc
        .cn
        .slices
        .iter()
        .map(|s| {
            (
                CnSliceId(s.id.clone()),
                crate::cn::CnSlice {
                    id: CnSliceId(s.id.clone()),
                    chain: Vec::new(),
                    target_service: s.service.clone(),
                },
            )
        })
        .collect();
    let map = sc.pairing_map();
    for (i, f) in sc.flows.iter().enumerate() {
        let fp = p("flows").index(i);
        let dev = sc.nodes.iter().find(|n| n.name == f.device);
        match dev {
            Some(d) if d.kind == NodeKind::Device => {
                if !d.slices.contains(&f.slice) {
                    c.err(fp.clone().key("slice"), format!("device '{}' is not a member of slice {}", f.device, f.slice));
                }
                if let Some(ls) = f.local_slice {
                    if !d.slices.contains(&ls) {
                        c.err(fp.clone().key("local_slice"), format!("device '{}' is not a member of slice {ls}", f.device));
                    }
                }
            }
            _ => c.err(fp.clone().key("device"), format!("'{}' is not a device", f.device)),
        }
        if f.packet_bytes == 0 || f.interval_ms <= 0.0 {
            c.err(fp.clone(), "packet_bytes and interval_ms must be positive");
        }
        if !(0.0..=1.0).contains(&f.local_fraction) {
            c.err(fp.clone().key("local_fraction"), "must lie in [0, 1]");
        }
        if f.local_fraction > 0.0 {
            match f.local_slice.and_then(|s| slice_ids.get(&s)) {
                Some(s) if s.kind == SliceKind::Horizontal => {}
                _ => c.err(fp.clone().key("local_slice"), "local processing needs a horizontal local_slice"),
            }
        }
        match slice_ids.get(&f.slice) {
            None => c.err(fp.key("slice"), format!("unknown slice {}", f.slice)),
            Some(s) if s.kind == SliceKind::Vertical => {
                if let Err(e) = crate::cn::resolve_path(
                    crate::ids::FlowId(i as u32),
                    SliceNetId(f.slice),
                    &f.service,
                    f.direction,
                    &map,
                    &cn_slices,
                ) {
                    c.err(fp.key("service"), e.to_string());
                }
            }
            Some(_) => {}
        }
    }

    for (i, b) in sc.rach_bursts.iter().enumerate() {
        let bp = p("rach_bursts").index(i);
        if !is_ap(&b.ap) {
            c.err(bp.clone().key("ap"), format!("'{}' is not an access point", b.ap));
        }
        if let Some(s) = b.slice {
            match slice_ids.get(&s) {
                Some(sl) if sl.rach.is_some() => {}
                Some(_) => c.err(bp.key("slice"), format!("slice {s} has no slice-specific RACH")),
                None => c.err(bp.key("slice"), format!("unknown slice {s}")),
            }
        }
    }
    for (i, h) in sc.handovers.iter().enumerate() {
        let hp = p("handovers").index(i);
        if names.get(&h.device) != Some(&NodeKind::Device) {
            c.err(hp.clone().key("device"), format!("'{}' is not a device", h.device));
        }
        if !is_ap(&h.to) {
            c.err(hp.key("to"), format!("'{}' is not an access point", h.to));
        }
    }
    for (i, l) in sc.link_failures.iter().enumerate() {
        if !names.contains_key(&l.node) {
            c.err(p("link_failures").index(i).key("node"), format!("unknown node '{}'", l.node));
        }
    }

    if let Some(o) = &sc.offload {
        let op = p("offload");
        match slice_ids.get(&o.slice) {
            Some(s) if s.kind == SliceKind::Horizontal => {}
            _ => c.err(op.clone().key("slice"), format!("slice {} is not a horizontal slice", o.slice)),
        }
        if o.pdu_size == 0 {
            c.err(op.clone().key("pdu_size"), "must be positive");
        }
        if o.advert_period_ms == 0 {
            c.err(op.clone().key("advert_period_ms"), "must be positive");
        }
        for (i, t) in o.tasks.iter().enumerate() {
            let tp = op.clone().key("tasks").index(i);
            let client = sc.nodes.iter().find(|n| n.name == t.client);
            match client {
                Some(n) if n.compute.is_some() && n.slices.contains(&o.slice) => {}
                _ => c.err(tp.clone().key("client"), format!("'{}' needs compute and membership of slice {}", t.client, o.slice)),
            }
            match sc.nodes.iter().find(|n| n.name == t.host) {
                Some(n) if n.compute.is_some() && n.kind == NodeKind::Ap => {}
                _ => c.err(tp.clone().key("host"), format!("'{}' must be an access point with compute", t.host)),
            }
            if t.total_ops <= 0.0 || !(0.0..=1.0).contains(&t.sliceable_fraction) {
                c.err(tp.clone(), "total_ops must be positive and sliceable_fraction in [0, 1]");
            }
            if t.count == 0 {
                c.err(tp.key("count"), "must be at least 1");
            }
        }
        for (i, h) in o.host_failures.iter().enumerate() {
            if !is_ap(&h.host) {
                c.err(op.clone().key("host_failures").index(i).key("host"), format!("'{}' is not an access point", h.host));
            }
        }
    }
    c.out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "mini"
duration_ms = 100

[grid]
total_blocks = 100
period = 10
[[grid.segments]]
name = "a"
blocks = [0, 100]

[[slices]]
id = 1
name = "mbb"
active_at = ["ap1"]
resources = [{ segment = "a", blocks = 10 }]

[[nodes]]
name = "ap1"
kind = "ap"

[[nodes]]
name = "ue1"
kind = "device"
slices = [1]
links = { ap1 = -70.0 }

[[flows]]
device = "ue1"
slice = 1
service = "mbb"
packet_bytes = 100
interval_ms = 1.0

[[cn.functions]]
name = "gw"
rate_per_ms = 10.0
latency_us = 100

[[cn.slices]]
id = "mbb"
chain = ["gw"]
service = "mbb"

[pairing]
radio_to_ran = { a = [1] }
ran_to_cn = { "1" = ["mbb"] }
"#;

    #[test]
    fn minimal_scenario_validates() {
        let sc = parse_scenario(MINIMAL).unwrap();
        assert_eq!(sc.slices[0].policy, Policy::RoundRobin);
        assert_eq!(sc.ran.cu_plane, CuPlaneOption::Option3);
    }

    #[test]
    fn dangling_cn_slice_is_located() {
        let text = MINIMAL.replace(r#"ran_to_cn = { "1" = ["mbb"] }"#, r#"ran_to_cn = { "1" = ["mbb", "ghost"] }"#);
        let err = parse_scenario(&text).unwrap_err();
        let d = err.diagnostics();
        let hit = d.iter().find(|d| d.message.contains("ghost")).expect("ghost reported");
        assert_eq!(hit.path, "pairing.ran_to_cn.1");
        let line = text.lines().position(|l| l.starts_with("ran_to_cn")).unwrap() + 1;
        assert_eq!(hit.location.map(|l| l.0), Some(line));
    }

    #[test]
    fn overlap_names_both_segments() {
        let text = MINIMAL.replace(
            "blocks = [0, 100]\n",
            "blocks = [0, 100]\n[[grid.segments]]\nname = \"b\"\nblocks = [10, 20]\n",
        );
        let err = parse_scenario(&text).unwrap_err().to_string();
        assert!(err.contains("'a'") && err.contains("'b'"), "{err}");
    }

    #[test]
    fn syntax_error_has_location() {
        let err = parse_scenario("name = \nduration_ms = 1").unwrap_err();
        assert!(err.diagnostics()[0].location.is_some());
    }

    #[test]
    fn set_path_with_wildcard() {
        let src = ScenarioSource::parse(MINIMAL).unwrap();
        let v = src.with_param("flows.*.packet_bytes", &parse_value("500")).unwrap();
        assert_eq!(v.scenario().unwrap().flows[0].packet_bytes, 500);
        let v = src.with_param("slices.0.pool_weight", &parse_value("2.0"));
        assert!(v.is_ok());
    }

    #[test]
    fn unknown_param_path_is_named() {
        let src = ScenarioSource::parse(MINIMAL).unwrap();
        for bad in ["nope.x", "ran.nope", "flows.7.packet_bytes"] {
            match src.with_param(bad, &parse_value("1")) {
                Err(ScenarioError::UnknownPath(p)) => assert_eq!(p, bad),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn value_literals() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_value("\"x\""), toml::Value::String("x".into()));
        assert_eq!(parse_value("abc"), toml::Value::String("abc".into()));
    }

    #[test]
    fn key_path_display() {
        assert_eq!(KeyPath::parse("slices.2.resources.0.segment").to_string(), "slices[2].resources[0].segment");
        assert_eq!(KeyPath::parse("flows[*].local_fraction").to_string(), "flows[*].local_fraction");
        assert_eq!(KeyPath::parse("a[1].b"), KeyPath::parse("a.1.b"));
    }
}
