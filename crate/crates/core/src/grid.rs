//! Physical radio resource: a blocks × subframe-phase grid partitioned into
//! numerology segments, from which per-slice resource subsets are carved.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::SliceNetId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Requirement {
    LowLatency,
    WideCoverage,
    HighThroughput,
    MassiveConnections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Numerology {
    pub id: u8,
    pub subcarrier_spacing_khz: u32,
    pub symbol_duration_us: f64,
    pub symbols_per_subframe: u32,
    pub subframe_length_us: u32,
    pub intended_requirement: Requirement,
}

/// Relative tolerance for the spacing × symbol-duration product; symbol
/// durations are quoted to 0.1 us so the products only agree approximately.
const SCALING_TOLERANCE: f64 = 0.005;

impl Numerology {
    pub fn default_catalog() -> Vec<Numerology> {
        vec![
            Numerology {
                id: 0,
                subcarrier_spacing_khz: 15,
                symbol_duration_us: 66.7,
                symbols_per_subframe: 15,
                subframe_length_us: 1000,
                intended_requirement: Requirement::WideCoverage,
            },
            Numerology {
                id: 1,
                subcarrier_spacing_khz: 30,
                symbol_duration_us: 33.3,
                symbols_per_subframe: 15,
                subframe_length_us: 500,
                intended_requirement: Requirement::HighThroughput,
            },
            Numerology {
                id: 2,
                subcarrier_spacing_khz: 60,
                symbol_duration_us: 16.7,
                symbols_per_subframe: 15,
                subframe_length_us: 250,
                intended_requirement: Requirement::LowLatency,
            },
        ]
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let span = self.symbol_duration_us * f64::from(self.symbols_per_subframe);
        if self.subcarrier_spacing_khz == 0
            || self.symbols_per_subframe == 0
            || (span - f64::from(self.subframe_length_us)).abs() > 1.0
        {
            return Err(GridError::BadNumerology {
                id: self.id,
                reason: format!(
                    "{} symbols of {} us do not make a {} us subframe",
                    self.symbols_per_subframe, self.symbol_duration_us, self.subframe_length_us
                ),
            });
        }
        Ok(())
    }

    /// Spacing relative to the 15 kHz reference; scales per-cell capacity.
    pub fn spacing_ratio(&self) -> f64 {
        f64::from(self.subcarrier_spacing_khz) / 15.0
    }
}

/// Checks each numerology and the inverse scaling between every pair.
pub fn check_catalog(catalog: &[Numerology]) -> Result<(), GridError> {
    for (i, a) in catalog.iter().enumerate() {
        a.validate()?;
        if catalog[..i].iter().any(|b| b.id == a.id) {
            return Err(GridError::BadNumerology {
                id: a.id,
                reason: "duplicate numerology id".into(),
            });
        }
        for b in &catalog[..i] {
            let pa = f64::from(a.subcarrier_spacing_khz) * a.symbol_duration_us;
            let pb = f64::from(b.subcarrier_spacing_khz) * b.symbol_duration_us;
            if (pa - pb).abs() > SCALING_TOLERANCE * pa.max(pb) {
                return Err(GridError::BadNumerology {
                    id: a.id,
                    reason: format!(
                        "spacing x symbol duration {pa:.1} does not match numerology {} ({pb:.1})",
                        b.id
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Subframe phases (indices modulo the grid period) in which a segment exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimePattern {
    active: Vec<bool>,
}

impl TimePattern {
    pub fn every(period: u32) -> Self {
        TimePattern {
            active: vec![true; period as usize],
        }
    }

    pub fn odd(period: u32) -> Self {
        TimePattern {
            active: (0..period).map(|p| p % 2 == 1).collect(),
        }
    }

    pub fn even(period: u32) -> Self {
        TimePattern {
            active: (0..period).map(|p| p % 2 == 0).collect(),
        }
    }

    /// Phases at or beyond `period` are reported as a bounds error by `partition_grid`.
    pub fn phases(period: u32, phases: &[u32]) -> Self {
        let mut active = vec![false; period.max(phases.iter().map(|p| p + 1).max().unwrap_or(0)) as usize];
        for p in phases {
            active[*p as usize] = true;
        }
        TimePattern { active }
    }

    pub fn period(&self) -> u32 {
        self.active.len() as u32
    }

    pub fn is_active(&self, phase: u32) -> bool {
        self.active.get(phase as usize).copied().unwrap_or(false)
    }

    pub fn active_phases(&self) -> impl Iterator<Item = u32> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter(|(_, a)| **a)
            .map(|(p, _)| p as u32)
    }

    pub fn active_count(&self) -> u32 {
        self.active.iter().filter(|a| **a).count() as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpec {
    pub name: String,
    pub numerology: u8,
    pub blocks: Range<u32>,
    pub pattern: TimePattern,
    /// Shared segments form a pool divided among slices every subframe
    /// instead of being carved.
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub total_blocks: u32,
    pub period: u32,
    pub segments: Vec<SegmentSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentId(pub u16);

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceSegment {
    pub id: SegmentId,
    pub name: String,
    pub numerology: Numerology,
    pub freq_blocks: Range<u32>,
    pub time_pattern: TimePattern,
    pub shared: bool,
}

impl ResourceSegment {
    pub fn cell_count(&self) -> u64 {
        u64::from(self.freq_blocks.len() as u32) * u64::from(self.time_pattern.active_count())
    }
}

/// One resource block in one subframe phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub segment: SegmentId,
    pub block: u32,
    pub phase: u32,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seg{}:b{}@{}", self.segment.0, self.block, self.phase)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceSubset {
    pub slice: SliceNetId,
    /// Sorted by (segment, block, phase).
    cells: Vec<Cell>,
    by_phase: Vec<Vec<Cell>>,
}

impl ResourceSubset {
    fn new(slice: SliceNetId, mut cells: Vec<Cell>, period: u32) -> Self {
        cells.sort();
        let mut by_phase = vec![Vec::new(); period as usize];
        for c in &cells {
            by_phase[c.phase as usize].push(*c);
        }
        ResourceSubset {
            slice,
            cells,
            by_phase,
        }
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells_in_phase(&self, phase: u32) -> &[Cell] {
        self.by_phase
            .get(phase as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains(&self, cell: &Cell) -> bool {
        self.cells_in_phase(cell.phase).binary_search(cell).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CarveRequest {
    /// Whole blocks: every active phase of the block must be free.
    Blocks { segment: SegmentId, count: u32 },
    /// Individual cells in (block, phase) order.
    Cells { segment: SegmentId, count: u32 },
    Explicit(Vec<Cell>),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("segments '{a}' and '{b}' both claim block {block} in subframe phase {phase}")]
    Overlap {
        a: String,
        b: String,
        block: u32,
        phase: u32,
    },
    #[error("segment '{segment}': {reason}")]
    Bounds { segment: String, reason: String },
    #[error("numerology {id}: {reason}")]
    BadNumerology { id: u8, reason: String },
    #[error("segment '{segment}' references unknown numerology {numerology}")]
    UnknownNumerology { segment: String, numerology: u8 },
    #[error("cell {cell} is already owned by slice {owner}")]
    Conflict { cell: Cell, owner: SliceNetId },
    #[error("segment {segment:?} has {free} free units, {requested} requested")]
    Capacity {
        segment: SegmentId,
        requested: u32,
        free: u32,
    },
    #[error("cell {0} is not inside a carveable segment")]
    NotInSegment(Cell),
    #[error("slice {0} owns no resource subset")]
    UnknownSlice(SliceNetId),
    #[error("slice {0} already owns a resource subset")]
    AlreadyCarved(SliceNetId),
}

#[derive(Debug, Clone)]
pub struct ResourceGrid {
    total_blocks: u32,
    period: u32,
    segments: Vec<ResourceSegment>,
    /// Indexed by `block * period + phase`.
    segment_of: Vec<Option<SegmentId>>,
    owner: Vec<Option<SliceNetId>>,
    subsets: BTreeMap<SliceNetId, ResourceSubset>,
    pool_by_phase: Vec<Vec<Cell>>,
}

/// Validates the segment layout and builds an empty grid.
pub fn partition_grid(spec: &GridSpec, catalog: &[Numerology]) -> Result<ResourceGrid, GridError> {
    let period = spec.period;
    if period == 0 {
        return Err(GridError::Bounds {
            segment: "<grid>".into(),
            reason: "period must be at least one subframe".into(),
        });
    }
    let n = spec.total_blocks as usize * period as usize;
    let mut segment_of: Vec<Option<SegmentId>> = vec![None; n];
    let mut segments = Vec::with_capacity(spec.segments.len());
    let mut pool_by_phase = vec![Vec::new(); period as usize];

    for (i, s) in spec.segments.iter().enumerate() {
        let id = SegmentId(i as u16);
        if s.blocks.is_empty() {
            return Err(GridError::Bounds {
                segment: s.name.clone(),
                reason: "empty block range".into(),
            });
        }
        if s.blocks.end > spec.total_blocks {
            return Err(GridError::Bounds {
                segment: s.name.clone(),
                reason: format!(
                    "blocks {}..{} exceed the grid's {} blocks",
                    s.blocks.start, s.blocks.end, spec.total_blocks
                ),
            });
        }
        if s.pattern.period() != period {
            return Err(GridError::Bounds {
                segment: s.name.clone(),
                reason: format!(
                    "time pattern spans {} subframes, grid period is {period}",
                    s.pattern.period()
                ),
            });
        }
        if s.pattern.active_count() == 0 {
            return Err(GridError::Bounds {
                segment: s.name.clone(),
                reason: "time pattern selects no subframe".into(),
            });
        }
        let numerology = catalog
            .iter()
            .find(|nm| nm.id == s.numerology)
            .cloned()
            .ok_or_else(|| GridError::UnknownNumerology {
                segment: s.name.clone(),
                numerology: s.numerology,
            })?;
        for block in s.blocks.clone() {
            for phase in s.pattern.active_phases() {
                let idx = (block * period + phase) as usize;
                if let Some(other) = segment_of[idx] {
                    return Err(GridError::Overlap {
                        a: spec.segments[other.0 as usize].name.clone(),
                        b: s.name.clone(),
                        block,
                        phase,
                    });
                }
                segment_of[idx] = Some(id);
                if s.shared {
                    pool_by_phase[phase as usize].push(Cell {
                        segment: id,
                        block,
                        phase,
                    });
                }
            }
        }
        segments.push(ResourceSegment {
            id,
            name: s.name.clone(),
            numerology,
            freq_blocks: s.blocks.clone(),
            time_pattern: s.pattern.clone(),
            shared: s.shared,
        });
    }
    for cells in &mut pool_by_phase {
        cells.sort();
    }

    Ok(ResourceGrid {
        total_blocks: spec.total_blocks,
        period,
        segments,
        segment_of,
        owner: vec![None; n],
        subsets: BTreeMap::new(),
        pool_by_phase,
    })
}

impl ResourceGrid {
    pub fn total_blocks(&self) -> u32 {
        self.total_blocks
    }

    pub fn period(&self) -> u32 {
        self.period
    }

    pub fn total_cells(&self) -> u64 {
        u64::from(self.total_blocks) * u64::from(self.period)
    }

    pub fn segments(&self) -> &[ResourceSegment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &ResourceSegment {
        &self.segments[id.0 as usize]
    }

    pub fn segment_by_name(&self, name: &str) -> Option<&ResourceSegment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Cells covered by some segment.
    pub fn cell_count(&self) -> u64 {
        self.segments.iter().map(ResourceSegment::cell_count).sum()
    }

    fn index(&self, cell: &Cell) -> Option<usize> {
        if cell.block >= self.total_blocks || cell.phase >= self.period {
            return None;
        }
        Some((cell.block * self.period + cell.phase) as usize)
    }

    /// True when the cell exists and lies in the segment it names.
    pub fn contains(&self, cell: &Cell) -> bool {
        self.index(cell)
            .map_or(false, |i| self.segment_of[i] == Some(cell.segment))
    }

    pub fn owner(&self, cell: &Cell) -> Option<SliceNetId> {
        self.index(cell).and_then(|i| self.owner[i])
    }

    pub fn subset(&self, slice: SliceNetId) -> Option<&ResourceSubset> {
        self.subsets.get(&slice)
    }

    pub fn subsets(&self) -> impl Iterator<Item = &ResourceSubset> {
        self.subsets.values()
    }

    /// Shared-pool cells present in the given subframe phase.
    pub fn pool_cells(&self, phase: u32) -> &[Cell] {
        self.pool_by_phase
            .get(phase as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn pool_cell_count(&self) -> u64 {
        self.pool_by_phase.iter().map(|p| p.len() as u64).sum()
    }

    pub fn free_cell_count(&self) -> u64 {
        self.segment_of
            .iter()
            .zip(&self.owner)
            .filter(|(seg, owner)| {
                seg.map_or(false, |s| !self.segments[s.0 as usize].shared) && owner.is_none()
            })
            .count() as u64
    }

    fn segment_cells<'a>(&self, seg: &'a ResourceSegment) -> impl Iterator<Item = Cell> + 'a {
        let id = seg.id;
        let pattern = &seg.time_pattern;
        seg.freq_blocks.clone().flat_map(move |block| {
            pattern.active_phases().map(move |phase| Cell {
                segment: id,
                block,
                phase,
            })
        })
    }

    fn carveable_segment(&self, segment: SegmentId) -> Result<&ResourceSegment, GridError> {
        match self.segments.get(segment.0 as usize) {
            Some(s) if !s.shared => Ok(s),
            _ => Err(GridError::Capacity {
                segment,
                requested: 1,
                free: 0,
            }),
        }
    }

    fn pick(&self, req: &CarveRequest, taken: &[Cell]) -> Result<Vec<Cell>, GridError> {
        let is_free = |c: &Cell| {
            self.index(c).map_or(false, |i| self.owner[i].is_none()) && !taken.contains(c)
        };
        match req {
            CarveRequest::Explicit(cells) => {
                for c in cells {
                    let idx = self.index(c).ok_or(GridError::NotInSegment(*c))?;
                    if self.segment_of[idx] != Some(c.segment)
                        || self.segments[c.segment.0 as usize].shared
                    {
                        return Err(GridError::NotInSegment(*c));
                    }
                    if let Some(owner) = self.owner[idx] {
                        return Err(GridError::Conflict { cell: *c, owner });
                    }
                    if taken.contains(c) {
                        return Err(GridError::NotInSegment(*c));
                    }
                }
                Ok(cells.clone())
            }
            CarveRequest::Cells { segment, count } => {
                let seg = self.carveable_segment(*segment)?;
                let free: Vec<Cell> = self.segment_cells(seg).filter(|c| is_free(c)).collect();
                if (free.len() as u32) < *count {
                    return Err(GridError::Capacity {
                        segment: *segment,
                        requested: *count,
                        free: free.len() as u32,
                    });
                }
                Ok(free[..*count as usize].to_vec())
            }
            CarveRequest::Blocks { segment, count } => {
                let seg = self.carveable_segment(*segment)?;
                let mut out = Vec::new();
                let mut free_blocks = 0u32;
                for block in seg.freq_blocks.clone() {
                    let cells: Vec<Cell> = seg
                        .time_pattern
                        .active_phases()
                        .map(|phase| Cell {
                            segment: seg.id,
                            block,
                            phase,
                        })
                        .collect();
                    if cells.iter().all(|c| is_free(c)) {
                        free_blocks += 1;
                        if free_blocks <= *count {
                            out.extend(cells);
                        }
                    }
                }
                if free_blocks < *count {
                    return Err(GridError::Capacity {
                        segment: *segment,
                        requested: *count,
                        free: free_blocks,
                    });
                }
                Ok(out)
            }
        }
    }

    /// Assigns cells to `slice`, lowest index first. All-or-nothing.
    pub fn carve_subset(
        &mut self,
        slice: SliceNetId,
        requests: &[CarveRequest],
    ) -> Result<&ResourceSubset, GridError> {
        if self.subsets.contains_key(&slice) {
            return Err(GridError::AlreadyCarved(slice));
        }
        let mut picked: Vec<Cell> = Vec::new();
        for req in requests {
            let cells = self.pick(req, &picked)?;
            picked.extend(cells);
        }
        for c in &picked {
            let idx = self.index(c).expect("picked cells are in bounds");
            self.owner[idx] = Some(slice);
        }
        let subset = ResourceSubset::new(slice, picked, self.period);
        Ok(self.subsets.entry(slice).or_insert(subset))
    }

    pub fn release_subset(&mut self, slice: SliceNetId) -> Result<ResourceSubset, GridError> {
        let subset = self
            .subsets
            .remove(&slice)
            .ok_or(GridError::UnknownSlice(slice))?;
        for c in subset.cells() {
            let idx = self.index(c).expect("owned cells are in bounds");
            self.owner[idx] = None;
        }
        Ok(subset)
    }

    /// Owned + free + pool + uncovered cells must equal the grid size.
    pub fn check_conservation(&self) -> bool {
        let owned: u64 = self.subsets.values().map(|s| s.len() as u64).sum();
        let uncovered = self.segment_of.iter().filter(|s| s.is_none()).count() as u64;
        owned + self.free_cell_count() + self.pool_cell_count() + uncovered == self.total_cells()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(name: &str, numerology: u8, blocks: Range<u32>, pattern: TimePattern) -> SegmentSpec {
        SegmentSpec {
            name: name.into(),
            numerology,
            blocks,
            pattern,
            shared: false,
        }
    }

    fn single(blocks: u32, period: u32) -> ResourceGrid {
        partition_grid(
            &GridSpec {
                total_blocks: blocks,
                period,
                segments: vec![seg("all", 0, 0..blocks, TimePattern::every(period))],
            },
            &Numerology::default_catalog(),
        )
        .unwrap()
    }

    #[test]
    fn default_catalog_is_consistent() {
        check_catalog(&Numerology::default_catalog()).unwrap();
    }

    #[test]
    fn broken_scaling_is_rejected() {
        let mut cat = Numerology::default_catalog();
        cat[1].subcarrier_spacing_khz = 45;
        assert!(matches!(check_catalog(&cat), Err(GridError::BadNumerology { id: 1, .. })));
    }

    #[test]
    fn symbol_budget_must_fill_subframe() {
        let mut n = Numerology::default_catalog().remove(0);
        n.symbols_per_subframe = 14;
        assert!(n.validate().is_err());
    }

    #[test]
    fn whole_grid_single_segment() {
        let g = single(100, 10);
        assert_eq!(g.segments().len(), 1);
        assert_eq!(g.cell_count(), 1000);
    }

    #[test]
    fn overlapping_segments_are_rejected() {
        let err = partition_grid(
            &GridSpec {
                total_blocks: 100,
                period: 10,
                segments: vec![
                    seg("a", 0, 0..11, TimePattern::every(10)),
                    seg("b", 1, 10..20, TimePattern::phases(10, &[0])),
                ],
            },
            &Numerology::default_catalog(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            GridError::Overlap {
                a: "a".into(),
                b: "b".into(),
                block: 10,
                phase: 0
            }
        );
    }

    #[test]
    fn time_sharing_avoids_overlap() {
        let g = partition_grid(
            &GridSpec {
                total_blocks: 10,
                period: 4,
                segments: vec![
                    seg("odd", 0, 0..10, TimePattern::odd(4)),
                    seg("even", 1, 0..10, TimePattern::even(4)),
                ],
            },
            &Numerology::default_catalog(),
        )
        .unwrap();
        assert_eq!(g.cell_count(), 40);
    }

    #[test]
    fn out_of_bounds_segment() {
        let err = partition_grid(
            &GridSpec {
                total_blocks: 50,
                period: 10,
                segments: vec![seg("a", 0, 40..60, TimePattern::every(10))],
            },
            &Numerology::default_catalog(),
        )
        .unwrap_err();
        assert!(matches!(err, GridError::Bounds { .. }));
    }

    #[test]
    fn unknown_numerology() {
        let err = partition_grid(
            &GridSpec {
                total_blocks: 50,
                period: 10,
                segments: vec![seg("a", 9, 0..10, TimePattern::every(10))],
            },
            &Numerology::default_catalog(),
        )
        .unwrap_err();
        assert!(matches!(err, GridError::UnknownNumerology { numerology: 9, .. }));
    }

    #[test]
    fn carve_lowest_index_first() {
        let mut g = single(100, 1);
        let sub = g
            .carve_subset(
                SliceNetId(1),
                &[CarveRequest::Cells {
                    segment: SegmentId(0),
                    count: 10,
                }],
            )
            .unwrap();
        assert_eq!(sub.len(), 10);
        let blocks: Vec<u32> = sub.cells().iter().map(|c| c.block).collect();
        assert_eq!(blocks, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn carve_beyond_capacity() {
        let mut g = single(100, 10);
        let req = |n| [CarveRequest::Blocks {
            segment: SegmentId(0),
            count: n,
        }];
        g.carve_subset(SliceNetId(1), &req(60)).unwrap();
        let err = g.carve_subset(SliceNetId(2), &req(50)).unwrap_err();
        assert_eq!(
            err,
            GridError::Capacity {
                segment: SegmentId(0),
                requested: 50,
                free: 40
            }
        );
        assert!(g.subset(SliceNetId(2)).is_none());
        assert!(g.check_conservation());
    }

    #[test]
    fn explicit_conflict() {
        let mut g = single(10, 1);
        let cell = Cell {
            segment: SegmentId(0),
            block: 3,
            phase: 0,
        };
        g.carve_subset(SliceNetId(1), &[CarveRequest::Explicit(vec![cell])])
            .unwrap();
        let err = g
            .carve_subset(SliceNetId(2), &[CarveRequest::Explicit(vec![cell])])
            .unwrap_err();
        assert_eq!(
            err,
            GridError::Conflict {
                cell,
                owner: SliceNetId(1)
            }
        );
    }

    #[test]
    fn released_cells_are_reused() {
        let mut g = single(100, 10);
        let req = [CarveRequest::Blocks {
            segment: SegmentId(0),
            count: 10,
        }];
        for s in 1..=3 {
            g.carve_subset(SliceNetId(s), &req).unwrap();
        }
        let freed = g.release_subset(SliceNetId(2)).unwrap();
        let reused = g.carve_subset(SliceNetId(4), &req).unwrap();
        assert_eq!(reused.cells(), freed.cells());
        // Slice 2 had blocks 10..20.
        assert!(reused.cells().iter().all(|c| (10..20).contains(&c.block)));
    }

    #[test]
    fn carve_release_carve_is_identical() {
        let mut g = single(100, 10);
        let req = [CarveRequest::Blocks {
            segment: SegmentId(0),
            count: 7,
        }];
        let first = g.carve_subset(SliceNetId(1), &req).unwrap().clone();
        g.release_subset(SliceNetId(1)).unwrap();
        let again = g.carve_subset(SliceNetId(1), &req).unwrap();
        assert_eq!(&first, again);
    }

    #[test]
    fn release_unknown_or_twice() {
        let mut g = single(10, 1);
        assert_eq!(
            g.release_subset(SliceNetId(9)),
            Err(GridError::UnknownSlice(SliceNetId(9)))
        );
        g.carve_subset(
            SliceNetId(1),
            &[CarveRequest::Cells {
                segment: SegmentId(0),
                count: 1,
            }],
        )
        .unwrap();
        g.release_subset(SliceNetId(1)).unwrap();
        assert_eq!(
            g.release_subset(SliceNetId(1)),
            Err(GridError::UnknownSlice(SliceNetId(1)))
        );
    }

    #[test]
    fn shared_segment_is_pool_not_carveable() {
        let mut spec = GridSpec {
            total_blocks: 20,
            period: 2,
            segments: vec![
                seg("own", 0, 0..10, TimePattern::every(2)),
                seg("pool", 0, 10..20, TimePattern::every(2)),
            ],
        };
        spec.segments[1].shared = true;
        let mut g = partition_grid(&spec, &Numerology::default_catalog()).unwrap();
        assert_eq!(g.pool_cells(0).len(), 10);
        assert!(g
            .carve_subset(
                SliceNetId(1),
                &[CarveRequest::Blocks {
                    segment: SegmentId(1),
                    count: 1
                }]
            )
            .is_err());
        assert!(g.check_conservation());
    }
}
