//! Voxel lattice representation, the text codec, and repair of noisy
//! generator output.
//!
//! Terrain and robot bodies share [`VoxelGrid`]. Text form is one line per
//! row, row 0 on top: `H` rigid, `S` soft, `-` empty, plus `V`/`O` for
//! horizontal/vertical actuators (agent bodies only — terrain never carries
//! actuators).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Columns (from the left edge) guaranteed to offer standing support after
/// [`repair_spawn_platform`]. Wide enough for the stock 5-cell body plus
/// margin.
pub const DEFAULT_SPAWN_WIDTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Voxel {
    Empty,
    Rigid,
    Soft,
    ActuatorH,
    ActuatorV,
}

impl Voxel {
    /// The single place the character table lives.
    pub fn to_char(self) -> char {
        match self {
            Voxel::Empty => '-',
            Voxel::Rigid => 'H',
            Voxel::Soft => 'S',
            Voxel::ActuatorH => 'V',
            Voxel::ActuatorV => 'O',
        }
    }

    pub fn from_char(c: char) -> Option<Voxel> {
        match c {
            '-' => Some(Voxel::Empty),
            'H' => Some(Voxel::Rigid),
            'S' => Some(Voxel::Soft),
            'V' => Some(Voxel::ActuatorH),
            'O' => Some(Voxel::ActuatorV),
            _ => None,
        }
    }

    pub fn is_actuator(self) -> bool {
        matches!(self, Voxel::ActuatorH | Voxel::ActuatorV)
    }

    /// Terrain may contain only `Empty`, `Rigid`, `Soft`.
    pub fn is_terrain(self) -> bool {
        matches!(self, Voxel::Empty | Voxel::Rigid | Voxel::Soft)
    }

    pub fn is_solid(self) -> bool {
        self != Voxel::Empty
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("grid dimensions must be at least 1x1 (got {width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("cell count {cells} does not match {width}x{height}")]
    CellCountMismatch {
        width: usize,
        height: usize,
        cells: usize,
    },
    #[error("line {line} has length {len}, expected {expected}")]
    RaggedLines {
        line: usize,
        len: usize,
        expected: usize,
    },
    #[error("illegal character {ch:?} at row {row}, column {col}")]
    IllegalCharacter { ch: char, row: usize, col: usize },
    #[error("empty grid text")]
    EmptyInput,
    #[error("raw output contains no grid characters")]
    NoGridContent,
    #[error("grid width {width} is narrower than the spawn span {spawn_width}")]
    GridTooNarrow { width: usize, spawn_width: usize },
}

/// Row-major lattice of voxels. Row 0 is the TOP row of the rendered text;
/// `x` increases rightward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelGrid {
    width: usize,
    height: usize,
    cells: Vec<Voxel>,
}

impl VoxelGrid {
    /// All-empty grid of the given dimensions.
    pub fn new(width: usize, height: usize) -> Result<VoxelGrid, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::ZeroDimension { width, height });
        }
        Ok(VoxelGrid {
            width,
            height,
            cells: vec![Voxel::Empty; width * height],
        })
    }

    pub fn from_cells(width: usize, height: usize, cells: Vec<Voxel>) -> Result<VoxelGrid, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::ZeroDimension { width, height });
        }
        if cells.len() != width * height {
            return Err(GridError::CellCountMismatch {
                width,
                height,
                cells: cells.len(),
            });
        }
        Ok(VoxelGrid { width, height, cells })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Voxel {
        assert!(x < self.width && y < self.height, "cell ({x},{y}) out of bounds");
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: Voxel) {
        assert!(x < self.width && y < self.height, "cell ({x},{y}) out of bounds");
        self.cells[y * self.width + x] = v;
    }

    pub fn cells(&self) -> &[Voxel] {
        &self.cells
    }

    /// Iterate rows top to bottom.
    pub fn rows(&self) -> impl Iterator<Item = &[Voxel]> {
        self.cells.chunks(self.width)
    }

    pub fn count(&self, v: Voxel) -> usize {
        self.cells.iter().filter(|&&c| c == v).count()
    }
}

/// Render a grid to its text form: `height` lines of `width` characters,
/// joined by newlines, no trailing newline.
pub fn render_grid(grid: &VoxelGrid) -> String {
    let mut out = String::with_capacity((grid.width + 1) * grid.height);
    for (i, row) in grid.rows().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for &v in row {
            out.push(v.to_char());
        }
    }
    out
}

/// Exact inverse of [`render_grid`] on well-formed input. One optional
/// trailing newline is tolerated (files), never produced.
pub fn parse_grid(text: &str) -> Result<VoxelGrid, GridError> {
    let text = text.strip_suffix('\n').unwrap_or(text);
    if text.is_empty() {
        return Err(GridError::EmptyInput);
    }
    let mut width = None;
    let mut height = 0usize;
    let mut cells = Vec::new();
    for (row, line) in text.split('\n').enumerate() {
        let expected = *width.get_or_insert(line.chars().count());
        let mut len = 0usize;
        for (col, ch) in line.chars().enumerate() {
            len += 1;
            if len > expected {
                break;
            }
            match Voxel::from_char(ch) {
                Some(v) => cells.push(v),
                None => return Err(GridError::IllegalCharacter { ch, row, col }),
            }
        }
        if len != expected {
            return Err(GridError::RaggedLines {
                line: row,
                len: line.chars().count(),
                expected,
            });
        }
        height += 1;
    }
    let width = width.unwrap_or(0);
    if width == 0 {
        return Err(GridError::EmptyInput);
    }
    VoxelGrid::from_cells(width, height, cells)
}

fn is_terrain_char(c: char) -> bool {
    matches!(c, 'H' | 'S' | '-')
}

/// Issues reported by [`validate_terrain`]; issues are data, not errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerrainIssue {
    AllEmpty,
    NoSpawnSupport,
    ContainsActuator,
}

/// Check a grid for simulability as terrain. An empty list means the walker
/// task is well-posed on it. The spawn span is clamped to the grid width.
pub fn validate_terrain(grid: &VoxelGrid, spawn_width: usize) -> Vec<TerrainIssue> {
    let mut issues = Vec::new();
    if grid.cells.iter().all(|&c| c == Voxel::Empty) {
        issues.push(TerrainIssue::AllEmpty);
    }
    let span = spawn_width.min(grid.width).max(1);
    let unsupported = (0..span).any(|x| (0..grid.height).all(|y| grid.get(x, y) == Voxel::Empty));
    if unsupported {
        issues.push(TerrainIssue::NoSpawnSupport);
    }
    if grid.cells.iter().any(|&c| c.is_actuator()) {
        issues.push(TerrainIssue::ContainsActuator);
    }
    issues
}

/// Guarantee standing support under the spawn span: any span column that is
/// entirely empty gets its bottom cell set to `Rigid`. No other cell is ever
/// touched; idempotent.
pub fn repair_spawn_platform(grid: &VoxelGrid, spawn_width: usize) -> Result<VoxelGrid, GridError> {
    if grid.width < spawn_width {
        return Err(GridError::GridTooNarrow {
            width: grid.width,
            spawn_width,
        });
    }
    Ok(repair_spawn_platform_clamped(grid, spawn_width))
}

/// [`repair_spawn_platform`] with the span clamped to the grid width instead
/// of erroring; what `postprocess` and the generators use.
pub fn repair_spawn_platform_clamped(grid: &VoxelGrid, spawn_width: usize) -> VoxelGrid {
    let span = spawn_width.min(grid.width).max(1);
    let mut out = grid.clone();
    for x in 0..span {
        if (0..grid.height).all(|y| grid.get(x, y) == Voxel::Empty) {
            out.set(x, grid.height - 1, Voxel::Rigid);
        }
    }
    out
}

/// Coerce raw generator output into a valid `target_width`x`target_height`
/// terrain grid.
///
/// Fixed rule order: prose-strip, then illegal-character substitution, then
/// truncation, then padding, then spawn repair.
///
/// - Lines with no terrain character at all (prose, blanks) are dropped;
///   remaining lines are whitespace-trimmed.
/// - Characters outside `{H,S,-}` become `-`.
/// - Oversized output keeps the leftmost columns and the BOTTOM rows, and
///   padding inserts empty rows at the TOP, so generated floors stay at the
///   bottom of the arena.
///
/// Idempotent: feeding the rendered result back in reproduces it.
pub fn postprocess(
    raw: &str,
    target_width: usize,
    target_height: usize,
    spawn_width: usize,
) -> Result<VoxelGrid, GridError> {
    if target_width == 0 || target_height == 0 {
        return Err(GridError::ZeroDimension {
            width: target_width,
            height: target_height,
        });
    }
    // Prose strip.
    let mut rows: Vec<&str> = raw
        .lines()
        .map(str::trim)
        .filter(|line| line.chars().any(is_terrain_char))
        .collect();
    if rows.is_empty() {
        return Err(GridError::NoGridContent);
    }
    // Keep the bottom rows of oversized output.
    if rows.len() > target_height {
        rows.drain(..rows.len() - target_height);
    }
    let mut cells = Vec::with_capacity(target_width * target_height);
    // Pad missing rows at the top.
    for _ in rows.len()..target_height {
        cells.extend(std::iter::repeat(Voxel::Empty).take(target_width));
    }
    for line in rows {
        // Substitution happens before truncation; both act per character.
        let mut n = 0usize;
        for ch in line.chars().take(target_width) {
            cells.push(if is_terrain_char(ch) {
                Voxel::from_char(ch).expect("terrain char")
            } else {
                Voxel::Empty
            });
            n += 1;
        }
        cells.extend(std::iter::repeat(Voxel::Empty).take(target_width - n));
    }
    let grid = VoxelGrid::from_cells(target_width, target_height, cells)?;
    Ok(repair_spawn_platform_clamped(&grid, spawn_width))
}

/// Which family produced an environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Llm,
    Cppn,
    Stub,
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeneratorKind::Llm => "llm",
            GeneratorKind::Cppn => "cppn",
            GeneratorKind::Stub => "stub",
        })
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(GeneratorKind::Llm),
            "cppn" => Ok(GeneratorKind::Cppn),
            "stub" => Ok(GeneratorKind::Stub),
            other => Err(format!("unknown generator kind {other:?}")),
        }
    }
}

/// An environment plus its generating prompt, lineage and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvRecord {
    pub grid: VoxelGrid,
    pub prompt: String,
    pub generator: GeneratorKind,
    pub lineage_id: String,
    pub parent_id: Option<String>,
    pub created_at_iteration: u64,
}

impl EnvRecord {
    /// Enforce the lineage invariant: roots (and only roots) live at
    /// iteration 0.
    pub fn validate(&self) -> Result<(), String> {
        match (&self.parent_id, self.created_at_iteration) {
            (None, 0) | (Some(_), 1..) => Ok(()),
            (None, it) => Err(format!("env {} at iteration {it} has no parent", self.lineage_id)),
            (Some(p), 0) => Err(format!(
                "initial env {} must not have parent (got {p})",
                self.lineage_id
            )),
        }
    }

    pub fn meta(&self) -> EnvMeta {
        EnvMeta {
            id: self.lineage_id.clone(),
            parent_id: self.parent_id.clone(),
            prompt: self.prompt.clone(),
            generator: self.generator,
            iteration: self.created_at_iteration,
            width: self.grid.width(),
            height: self.grid.height(),
        }
    }
}

/// Sidecar metadata written next to every grid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub id: String,
    pub parent_id: Option<String>,
    pub prompt: String,
    pub generator: GeneratorKind,
    pub iteration: u64,
    pub width: usize,
    pub height: usize,
}

impl EnvMeta {
    pub fn into_record(self, grid: VoxelGrid) -> EnvRecord {
        EnvRecord {
            grid,
            prompt: self.prompt,
            generator: self.generator,
            lineage_id: self.id,
            parent_id: self.parent_id,
            created_at_iteration: self.iteration,
        }
    }
}
