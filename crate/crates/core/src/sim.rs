//! Deterministic 2D mass-spring voxel world: the walker task.
//!
//! Lattice nodes sit at voxel corners (shared between adjacent voxels) and
//! carry the voxel mass; each non-empty voxel contributes edge and diagonal
//! springs. Actuator voxels scale the rest length of their springs by
//! `1 + amplitude * action`. Terrain cells are static colliders handled with
//! penalty springs plus Coulomb-style friction. Integration is semi-implicit
//! Euler at a fixed step; everything is bit-deterministic on one platform.
//!
//! World coordinates: x grows rightward, y grows upward, y = 0 at the bottom
//! of the terrain grid. The score of an episode is how far the body's center
//! of mass travelled along the x-axis.

use crate::grid::{parse_grid, validate_terrain, TerrainIssue, Voxel, VoxelGrid};
use crate::real::Real;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Vec2<T> {
    pub fn new(x: T, y: T) -> Vec2<T> {
        Vec2 { x, y }
    }

    pub fn zero() -> Vec2<T> {
        Vec2 {
            x: T::zero(),
            y: T::zero(),
        }
    }

    pub fn dot(self, o: Vec2<T>) -> T {
        self.x * o.x + self.y * o.y
    }

    pub fn length(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: T) -> Vec2<T> {
        Vec2 {
            x: self.x * s,
            y: self.y * s,
        }
    }

    pub fn add(self, o: Vec2<T>) -> Vec2<T> {
        Vec2 {
            x: self.x + o.x,
            y: self.y + o.y,
        }
    }

    pub fn sub(self, o: Vec2<T>) -> Vec2<T> {
        Vec2 {
            x: self.x - o.x,
            y: self.y - o.y,
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("terrain is not simulable: {issues:?}")]
    InvalidTerrain { issues: Vec<TerrainIssue> },
    #[error("invalid morphology: {0}")]
    InvalidMorphology(String),
    #[error("no spawn placement free of terrain within the spawn span")]
    SpawnBlocked,
    #[error("action has {got} entries, robot has {expected} actuators")]
    ActionLength { expected: usize, got: usize },
    #[error("numerical blowup at t = {time}s")]
    NumericalBlowup { time: f64 },
}

/// Physics constants. All tunable; defaults chosen so the stock walker is
/// stable at dt = 1/120 s and settles from a one-cell drop in under five
/// seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams<T> {
    pub dt: T,
    pub substeps: u32,
    pub gravity: T,
    pub cell_size: T,
    pub stiffness_rigid: T,
    pub stiffness_soft: T,
    pub stiffness_actuator: T,
    pub damping_ratio: T,
    pub voxel_mass: T,
    pub contact_stiffness: T,
    pub contact_damping: T,
    pub friction: T,
    pub friction_viscous: T,
    pub actuation_amplitude: T,
    pub episode_seconds: T,
    pub fall_margin: T,
    pub obs_pos_scale: T,
    pub obs_vel_scale: T,
    pub spawn_width: usize,
    pub spawn_clearance_cells: u32,
}

impl<T: Real> Default for SimParams<T> {
    fn default() -> Self {
        SimParams {
            dt: T::c(1.0 / 120.0),
            substeps: 4,
            gravity: T::c(9.81),
            cell_size: T::c(0.1),
            stiffness_rigid: T::c(5e4),
            stiffness_soft: T::c(5e3),
            stiffness_actuator: T::c(1e4),
            damping_ratio: T::c(0.2),
            voxel_mass: T::c(12.0),
            contact_stiffness: T::c(2e4),
            contact_damping: T::c(120.0),
            friction: T::c(0.8),
            friction_viscous: T::c(120.0),
            actuation_amplitude: T::c(0.3),
            episode_seconds: T::c(20.0),
            fall_margin: T::c(0.5),
            obs_pos_scale: T::c(1.0),
            obs_vel_scale: T::c(1.0),
            spawn_width: crate::grid::DEFAULT_SPAWN_WIDTH,
            spawn_clearance_cells: 1,
        }
    }
}

/// An agent body: a voxel grid (actuators allowed) plus its spawn offset in
/// cells (x from the left arena edge, y extra clearance above terrain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotMorphology {
    pub grid: VoxelGrid,
    pub spawn_offset: (usize, usize),
}

impl RobotMorphology {
    /// The stock 5x4 walker (rigid spine, soft belly, alternating actuator
    /// feet), embedded from `data/default_morphology.txt`.
    pub fn standard() -> RobotMorphology {
        let grid = parse_grid(include_str!("../data/default_morphology.txt"))
            .expect("stock morphology parses");
        RobotMorphology {
            grid,
            spawn_offset: (1, 0),
        }
    }

    pub fn actuator_count(&self) -> usize {
        self.grid.cells().iter().filter(|c| c.is_actuator()).count()
    }

    pub fn node_count(&self) -> usize {
        corner_nodes(&self.grid).len()
    }

    /// Body cells must form one 4-connected component with at least one
    /// actuator.
    pub fn validate(&self) -> Result<(), SimError> {
        let solid: Vec<(usize, usize)> = (0..self.grid.height())
            .flat_map(|y| (0..self.grid.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| self.grid.get(x, y).is_solid())
            .collect();
        if solid.is_empty() {
            return Err(SimError::InvalidMorphology("body has no voxels".into()));
        }
        if self.actuator_count() == 0 {
            return Err(SimError::InvalidMorphology("body has no actuator".into()));
        }
        let mut seen = std::collections::BTreeSet::from([solid[0]]);
        let mut stack = vec![solid[0]];
        while let Some((x, y)) = stack.pop() {
            let mut neighbors = Vec::new();
            if x > 0 {
                neighbors.push((x - 1, y));
            }
            if y > 0 {
                neighbors.push((x, y - 1));
            }
            if x + 1 < self.grid.width() {
                neighbors.push((x + 1, y));
            }
            if y + 1 < self.grid.height() {
                neighbors.push((x, y + 1));
            }
            for n in neighbors {
                if self.grid.get(n.0, n.1).is_solid() && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        if seen.len() != solid.len() {
            return Err(SimError::InvalidMorphology(
                "body voxels are not 4-connected".into(),
            ));
        }
        Ok(())
    }
}

/// Corner-lattice nodes touched by at least one solid voxel, in (row, col)
/// order. Corner coordinates: (cx, cy) with cy counted from the top.
fn corner_nodes(grid: &VoxelGrid) -> BTreeMap<(usize, usize), usize> {
    let mut keys = std::collections::BTreeSet::new();
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            if grid.get(x, y).is_solid() {
                for (cx, cy) in [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)] {
                    keys.insert((cy, cx));
                }
            }
        }
    }
    keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spring<T> {
    pub a: usize,
    pub b: usize,
    pub rest: T,
    pub stiffness: T,
    pub damping: T,
    /// Index into the action vector when this spring is actuated.
    pub actuator: Option<usize>,
}

/// Static collision field built from the terrain grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Terrain<T> {
    pub width: usize,
    pub height: usize,
    pub solid: Vec<bool>,
    pub cell: T,
}

impl<T: Real> Terrain<T> {
    pub fn from_grid(grid: &VoxelGrid, cell: T) -> Terrain<T> {
        Terrain {
            width: grid.width(),
            height: grid.height(),
            solid: grid.cells().iter().map(|c| c.is_solid()).collect(),
            cell,
        }
    }

    fn solid_at(&self, col: isize, row: isize) -> bool {
        if col < 0 || row < 0 || col as usize >= self.width || row as usize >= self.height {
            return false;
        }
        self.solid[row as usize * self.width + col as usize]
    }

    /// Which cell contains the point, if any.
    fn locate(&self, p: Vec2<T>) -> Option<(usize, usize)> {
        if p.x < T::zero() || p.y < T::zero() {
            return None;
        }
        let col = (p.x / self.cell).floor().to_usize()?;
        let level = (p.y / self.cell).floor().to_usize()?;
        if col >= self.width || level >= self.height {
            return None;
        }
        Some((col, self.height - 1 - level))
    }

    /// World-space bounds (x0, x1, y0, y1) of a cell.
    fn bounds(&self, col: usize, row: usize) -> (T, T, T, T) {
        let s = self.cell;
        let x0 = T::c(col as f64) * s;
        let y0 = T::c((self.height - 1 - row) as f64) * s;
        (x0, x0 + s, y0, y0 + s)
    }

    /// Highest solid surface within the spawn span columns.
    fn spawn_surface(&self, span: usize) -> Option<T> {
        let mut top: Option<T> = None;
        for col in 0..span.min(self.width) {
            for row in 0..self.height {
                if self.solid[row * self.width + col] {
                    let y = T::c((self.height - row) as f64) * self.cell;
                    top = Some(match top {
                        Some(t) if t >= y => t,
                        _ => y,
                    });
                    break;
                }
            }
        }
        top
    }
}

/// Full dynamic state of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState<T> {
    pub positions: Vec<Vec2<T>>,
    pub velocities: Vec<Vec2<T>>,
    pub springs: Vec<Spring<T>>,
    pub masses: Vec<T>,
    pub time: T,
    pub terrain: Terrain<T>,
    pub params: SimParams<T>,
    pub actuator_count: usize,
    pub initial_com_x: T,
    /// Diagnostic: contact count from the most recent step.
    pub last_contacts: usize,
}

/// Assemble the world: nodes, springs, masses, spawn placement.
pub fn build_world<T: Real>(
    terrain_grid: &VoxelGrid,
    morph: &RobotMorphology,
    params: &SimParams<T>,
) -> Result<SimState<T>, SimError> {
    let issues = validate_terrain(terrain_grid, params.spawn_width);
    if !issues.is_empty() {
        return Err(SimError::InvalidTerrain { issues });
    }
    morph.validate()?;

    let terrain = Terrain::from_grid(terrain_grid, params.cell_size);
    if morph.spawn_offset.0 + morph.grid.width() > terrain.width {
        return Err(SimError::SpawnBlocked);
    }

    let nodes = corner_nodes(&morph.grid);
    let n = nodes.len();
    let mut masses = vec![T::zero(); n];
    let quarter = params.voxel_mass / T::c(4.0);

    struct Draft<T> {
        stiffness: T,
        nominal: T,
        actuator: Option<usize>,
    }
    let mut drafts: BTreeMap<(usize, usize), Draft<T>> = BTreeMap::new();
    let mut actuator_index = 0usize;
    let diag = params.cell_size * T::c(std::f64::consts::SQRT_2);

    for y in 0..morph.grid.height() {
        for x in 0..morph.grid.width() {
            let kind = morph.grid.get(x, y);
            if !kind.is_solid() {
                continue;
            }
            let tl = nodes[&(y, x)];
            let tr = nodes[&(y, x + 1)];
            let bl = nodes[&(y + 1, x)];
            let br = nodes[&(y + 1, x + 1)];
            for idx in [tl, tr, bl, br] {
                masses[idx] = masses[idx] + quarter;
            }
            let stiffness = match kind {
                Voxel::Rigid => params.stiffness_rigid,
                Voxel::Soft => params.stiffness_soft,
                _ => params.stiffness_actuator,
            };
            let this_actuator = if kind.is_actuator() {
                let i = actuator_index;
                actuator_index += 1;
                Some(i)
            } else {
                None
            };
            // (pair, rest, actuated): horizontal actuators drive their
            // top/bottom edges, vertical ones their side edges; both drive
            // their (never shared) diagonals.
            let edges = [
                ((tl, tr), params.cell_size, kind == Voxel::ActuatorH),
                ((bl, br), params.cell_size, kind == Voxel::ActuatorH),
                ((tl, bl), params.cell_size, kind == Voxel::ActuatorV),
                ((tr, br), params.cell_size, kind == Voxel::ActuatorV),
                ((tl, br), diag, kind.is_actuator()),
                ((tr, bl), diag, kind.is_actuator()),
            ];
            for ((a, b), nominal, actuated) in edges {
                let key = (a.min(b), a.max(b));
                let claim = if actuated { this_actuator } else { None };
                drafts
                    .entry(key)
                    .and_modify(|d| {
                        if stiffness > d.stiffness {
                            d.stiffness = stiffness;
                        }
                        if d.actuator.is_none() {
                            d.actuator = claim;
                        }
                    })
                    .or_insert(Draft {
                        stiffness,
                        nominal,
                        actuator: claim,
                    });
            }
        }
    }

    // Spawn placement: lowest node rests `clearance` cells above the highest
    // terrain surface in the spawn span, raised further until no node starts
    // inside a solid cell.
    let surface = terrain
        .spawn_surface(params.spawn_width)
        .expect("validated terrain has spawn support");
    let s = params.cell_size;
    let x_base = T::c(morph.spawn_offset.0 as f64) * s;
    let morph_h = morph.grid.height();
    let clearance = T::c((params.spawn_clearance_cells + morph.spawn_offset.1 as u32) as f64) * s;
    let mut placed = None;
    for raise in 0..(terrain.height + morph_h + 4) {
        let y_base = surface + clearance + T::c(raise as f64) * s;
        let positions: Vec<Vec2<T>> = nodes
            .keys()
            .map(|&(cy, cx)| {
                Vec2::new(
                    x_base + T::c(cx as f64) * s,
                    y_base + T::c((morph_h - cy) as f64) * s,
                )
            })
            .collect();
        let collides = positions.iter().any(|&p| {
            terrain
                .locate(p)
                .map(|(c, r)| terrain.solid_at(c as isize, r as isize))
                .unwrap_or(false)
        });
        if !collides {
            placed = Some(positions);
            break;
        }
    }
    let positions = placed.ok_or(SimError::SpawnBlocked)?;

    // Rest lengths are measured from the as-built lattice so the spawn pose
    // is an exact equilibrium of the spring network.
    let springs: Vec<Spring<T>> = drafts
        .into_iter()
        .map(|((a, b), d)| {
            let measured = positions[b].sub(positions[a]).length();
            let rest = if measured > T::zero() { measured } else { d.nominal };
            let m_red = masses[a] * masses[b] / (masses[a] + masses[b]);
            let damping = T::c(2.0) * params.damping_ratio * (d.stiffness * m_red).sqrt();
            Spring {
                a,
                b,
                rest,
                stiffness: d.stiffness,
                damping,
                actuator: d.actuator,
            }
        })
        .collect();

    let total_mass: T = masses.iter().copied().sum();
    let com_x: T = positions
        .iter()
        .zip(&masses)
        .map(|(p, &m)| p.x * m)
        .sum::<T>()
        / total_mass;

    Ok(SimState {
        positions,
        velocities: vec![Vec2::zero(); n],
        springs,
        masses,
        time: T::zero(),
        terrain,
        params: *params,
        actuator_count: actuator_index,
        initial_com_x: com_x,
        last_contacts: 0,
    })
}

/// Center of mass.
pub fn com<T: Real>(state: &SimState<T>) -> Vec2<T> {
    let total: T = state.masses.iter().copied().sum();
    let mut acc = Vec2::zero();
    for (p, &m) in state.positions.iter().zip(&state.masses) {
        acc = acc.add(p.scale(m));
    }
    acc.scale(T::one() / total)
}

/// Distance travelled along x since spawn. May be negative.
pub fn score<T: Real>(state: &SimState<T>) -> T {
    com(state).x - state.initial_com_x
}

/// One semi-implicit Euler step. `action` entries are clamped to [-1, 1];
/// actuated springs run at rest length `rest * (1 + amplitude * a)`.
pub fn step<T: Real>(state: &mut SimState<T>, action: &[T], dt: T) -> Result<(), SimError> {
    if action.len() != state.actuator_count {
        return Err(SimError::ActionLength {
            expected: state.actuator_count,
            got: action.len(),
        });
    }
    let p = &state.params;
    let mut forces = vec![Vec2::<T>::zero(); state.positions.len()];

    for (i, &m) in state.masses.iter().enumerate() {
        forces[i].y = forces[i].y - m * p.gravity;
    }

    for spring in &state.springs {
        let delta = state.positions[spring.b].sub(state.positions[spring.a]);
        let len = delta.length();
        if !(len > T::zero()) {
            continue;
        }
        let dir = delta.scale(T::one() / len);
        let rest = match spring.actuator {
            Some(i) => {
                let a = action[i].max(-T::one()).min(T::one());
                spring.rest * (T::one() + p.actuation_amplitude * a)
            }
            None => spring.rest,
        };
        let v_rel = state.velocities[spring.b]
            .sub(state.velocities[spring.a])
            .dot(dir);
        let magnitude = spring.stiffness * (len - rest) + spring.damping * v_rel;
        let f = dir.scale(magnitude);
        forces[spring.a] = forces[spring.a].add(f);
        forces[spring.b] = forces[spring.b].sub(f);
    }

    let mut contacts = 0usize;
    for i in 0..state.positions.len() {
        let pos = state.positions[i];
        let Some((col, row)) = state.terrain.locate(pos) else {
            continue;
        };
        if !state.terrain.solid_at(col as isize, row as isize) {
            continue;
        }
        contacts += 1;
        let (x0, x1, y0, y1) = state.terrain.bounds(col, row);
        let col = col as isize;
        let row = row as isize;
        // Candidate push-out faces, masked to those exposed to non-solid
        // neighbors. Order fixes ties: up, left, right, down.
        let candidates = [
            (y1 - pos.y, Vec2::new(T::zero(), T::one()), (col, row - 1)),
            (pos.x - x0, Vec2::new(-T::one(), T::zero()), (col - 1, row)),
            (x1 - pos.x, Vec2::new(T::one(), T::zero()), (col + 1, row)),
            (pos.y - y0, Vec2::new(T::zero(), -T::one()), (col, row + 1)),
        ];
        let mut best: Option<(T, Vec2<T>)> = None;
        for (depth, normal, neighbor) in candidates {
            if state.terrain.solid_at(neighbor.0, neighbor.1) {
                continue;
            }
            if best.map(|(d, _)| depth < d).unwrap_or(true) {
                best = Some((depth, normal));
            }
        }
        // Deep inside a solid block: push up.
        let (depth, normal) = best.unwrap_or((y1 - pos.y, Vec2::new(T::zero(), T::one())));
        let v = state.velocities[i];
        let v_n = v.dot(normal);
        let f_n = (p.contact_stiffness * depth - p.contact_damping * v_n).max(T::zero());
        let tangent = Vec2::new(-normal.y, normal.x);
        let v_t = v.dot(tangent);
        let friction_mag = (p.friction * f_n).min(p.friction_viscous * v_t.abs());
        let f_t = -v_t.signum() * friction_mag;
        let f = normal.scale(f_n).add(tangent.scale(f_t));
        forces[i] = forces[i].add(f);
    }
    state.last_contacts = contacts;

    let mut blown = false;
    let limit = T::c(1e6);
    for i in 0..state.positions.len() {
        let accel = forces[i].scale(T::one() / state.masses[i]);
        let v = state.velocities[i].add(accel.scale(dt));
        let pos = state.positions[i].add(v.scale(dt));
        state.velocities[i] = v;
        state.positions[i] = pos;
        if !pos.is_finite() || !v.is_finite() || pos.x.abs() > limit || pos.y.abs() > limit {
            blown = true;
        }
    }
    state.time = state.time + dt;
    if blown {
        return Err(SimError::NumericalBlowup {
            time: state.time.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// Observation: per-node position relative to the center of mass, per-node
/// velocity, center-of-mass height, and episode time fraction. Length is
/// `4 * node_count + 2` for a given morphology.
pub fn observe<T: Real>(state: &SimState<T>) -> Vec<T> {
    let c = com(state);
    let mut obs = Vec::with_capacity(4 * state.positions.len() + 2);
    for p in &state.positions {
        obs.push((p.x - c.x) / state.params.obs_pos_scale);
        obs.push((p.y - c.y) / state.params.obs_pos_scale);
    }
    for v in &state.velocities {
        obs.push(v.x / state.params.obs_vel_scale);
        obs.push(v.y / state.params.obs_vel_scale);
    }
    obs.push(c.y);
    let frac = state.time / state.params.episode_seconds;
    obs.push(frac.max(T::zero()).min(T::one()));
    obs
}

/// Total mechanical energy (kinetic, gravitational, passive spring elastic).
/// Contact penalty energy is excluded.
pub fn mechanical_energy<T: Real>(state: &SimState<T>) -> T {
    let half = T::c(0.5);
    let mut e = T::zero();
    for ((p, v), &m) in state.positions.iter().zip(&state.velocities).zip(&state.masses) {
        e = e + half * m * v.dot(*v) + m * state.params.gravity * p.y;
    }
    for s in &state.springs {
        let len = state.positions[s.b].sub(state.positions[s.a]).length();
        let stretch = len - s.rest;
        e = e + half * s.stiffness * stretch * stretch;
    }
    e
}

/// What a controller returns for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision<T> {
    pub action: Vec<T>,
    pub log_prob: T,
    pub value: T,
}

/// Anything that can drive a robot. `rng = None` requests the deterministic
/// (mean) action.
pub trait Controller<T: Real>: Sync {
    fn decide(&self, obs: &[T], rng: Option<&mut ChaCha8Rng>) -> Decision<T>;
}

/// Always outputs zero action; handy for settling tests and budget-zero
/// evaluation.
pub struct ZeroController {
    pub actuators: usize,
}

impl<T: Real> Controller<T> for ZeroController {
    fn decide(&self, _obs: &[T], _rng: Option<&mut ChaCha8Rng>) -> Decision<T> {
        Decision {
            action: vec![T::zero(); self.actuators],
            log_prob: T::zero(),
            value: T::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T> {
    pub observation: Vec<T>,
    pub action: Vec<T>,
    pub log_prob: T,
    pub reward: T,
    pub value: T,
    pub done: bool,
}

/// One episode's worth of experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub steps: Vec<StepRecord<T>>,
    /// Value estimate of the state after the last step (zero when the
    /// episode terminated).
    pub bootstrap_value: T,
    pub score: T,
    pub aborted: bool,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Run one episode: observe, act, integrate `substeps` physics steps per
/// control step; the per-step reward is the center-of-mass x displacement.
/// Numerical blowups and falling below the arena fold into early
/// termination, never an error.
pub fn rollout<T: Real>(
    terrain: &VoxelGrid,
    morph: &RobotMorphology,
    controller: &dyn Controller<T>,
    horizon: usize,
    params: &SimParams<T>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Trajectory<T>, SimError> {
    let mut state = build_world(terrain, morph, params)?;
    let mut steps = Vec::with_capacity(horizon);
    let mut aborted = false;
    let mut final_obs: Vec<T> = observe(&state);
    for _ in 0..horizon {
        let obs = final_obs.clone();
        let decision = controller.decide(&obs, rng.as_deref_mut());
        let before = score(&state);
        let mut done = false;
        for _ in 0..params.substeps {
            if step(&mut state, &decision.action, params.dt).is_err() {
                done = true;
                aborted = true;
                break;
            }
        }
        if com(&state).y < -params.fall_margin {
            done = true;
        }
        let reward = score(&state) - before;
        steps.push(StepRecord {
            observation: obs,
            action: decision.action,
            log_prob: decision.log_prob,
            reward,
            value: decision.value,
            done,
        });
        final_obs = observe(&state);
        if done {
            break;
        }
    }
    let terminated = steps.last().map(|s| s.done).unwrap_or(false);
    let bootstrap_value = if terminated {
        T::zero()
    } else {
        controller.decide(&final_obs, None).value
    };
    Ok(Trajectory {
        steps,
        bootstrap_value,
        score: score(&state),
        aborted,
    })
}

/// [`rollout`] with mean actions and no exploration noise; what all
/// score comparisons use.
pub fn rollout_deterministic<T: Real>(
    terrain: &VoxelGrid,
    morph: &RobotMorphology,
    controller: &dyn Controller<T>,
    horizon: usize,
    params: &SimParams<T>,
) -> Result<Trajectory<T>, SimError> {
    rollout(terrain, morph, controller, horizon, params, None)
}

/// Flat arena: `height` rows with a rigid bottom row.
pub fn flat_terrain(width: usize, height: usize) -> VoxelGrid {
    let mut g = VoxelGrid::new(width, height).expect("dims");
    for x in 0..width {
        g.set(x, height - 1, Voxel::Rigid);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    type P = SimParams<f64>;

    fn tiny_robot(text: &str) -> RobotMorphology {
        RobotMorphology {
            grid: parse_grid(text).unwrap(),
            spawn_offset: (1, 0),
        }
    }

    #[test]
    fn morphology_without_actuator_is_rejected() {
        let m = tiny_robot("S");
        assert!(matches!(
            build_world(&flat_terrain(20, 4), &m, &P::default()),
            Err(SimError::InvalidMorphology(_))
        ));
    }

    #[test]
    fn disconnected_morphology_is_rejected() {
        let m = tiny_robot("V-V");
        assert!(matches!(m.validate(), Err(SimError::InvalidMorphology(_))));
    }

    #[test]
    fn all_empty_terrain_is_invalid() {
        let g = VoxelGrid::new(20, 4).unwrap();
        assert!(matches!(
            build_world(&g, &RobotMorphology::standard(), &P::default()),
            Err(SimError::InvalidTerrain { .. })
        ));
    }

    #[test]
    fn two_voxel_robot_world_counts() {
        // [ActuatorH, Rigid]: 3x2 corner lattice = 6 nodes; edges 8 minus 1
        // shared = 7, diagonals 2 per voxel = 4, so 11 springs.
        let m = tiny_robot("VH");
        let state = build_world(&flat_terrain(20, 4), &m, &P::default()).unwrap();
        assert_eq!(state.positions.len(), 6);
        assert_eq!(state.springs.len(), 11);
        assert_eq!(state.actuator_count, 1);
        let actuated = state.springs.iter().filter(|s| s.actuator.is_some()).count();
        // Top + bottom edges + 2 diagonals of the actuator voxel.
        assert_eq!(actuated, 4);
    }

    #[test]
    fn robot_wider_than_arena_is_spawn_blocked() {
        let m = RobotMorphology::standard();
        assert!(matches!(
            build_world(&flat_terrain(4, 3), &m, &P::default()),
            Err(SimError::SpawnBlocked)
        ));
    }

    #[test]
    fn spawn_rests_one_cell_above_surface() {
        let state = build_world(&flat_terrain(30, 4), &RobotMorphology::standard(), &P::default()).unwrap();
        let lowest = state.positions.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        // Floor top at 0.1 (one solid row), clearance one cell.
        assert!((lowest - 0.2).abs() < 1e-12, "lowest {lowest}");
    }

    #[test]
    fn zero_gravity_square_at_rest_stays_put() {
        let mut params = P::default();
        params.gravity = 0.0;
        let m = tiny_robot("O");
        let mut state = build_world(&flat_terrain(20, 4), &m, &params).unwrap();
        let initial = state.positions.clone();
        for _ in 0..100 {
            step(&mut state, &[0.0], params.dt).unwrap();
        }
        for (p, q) in state.positions.iter().zip(&initial) {
            assert!((p.x - q.x).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12);
        }
    }

    #[test]
    fn free_fall_matches_semi_implicit_closed_form() {
        // Single unconstrained node high above the terrain.
        let params = P::default();
        let terrain = Terrain::from_grid(&flat_terrain(10, 2), params.cell_size);
        let mut state = SimState {
            positions: vec![Vec2::new(0.35, 10.0)],
            velocities: vec![Vec2::zero()],
            springs: vec![],
            masses: vec![1.0],
            time: 0.0,
            terrain,
            params,
            actuator_count: 0,
            initial_com_x: 0.35,
            last_contacts: 0,
        };
        let dt = 0.01;
        let n = 100u32;
        for _ in 0..n {
            step(&mut state, &[], dt).unwrap();
        }
        // Oracle: v_k = -g k dt, y_n = y_0 - g dt^2 * n(n+1)/2.
        let g = params.gravity;
        let expected_y = 10.0 - g * dt * dt * (f64::from(n) * f64::from(n + 1) / 2.0);
        let expected_v = -g * dt * f64::from(n);
        assert!((state.positions[0].y - expected_y).abs() < 1e-9);
        assert!((state.velocities[0].y - expected_v).abs() < 1e-9);
    }

    #[test]
    fn dropped_robot_settles_within_five_seconds() {
        let params = P::default();
        let m = RobotMorphology::standard();
        let mut state = build_world(&flat_terrain(30, 4), &m, &params).unwrap();
        let action = vec![0.0; state.actuator_count];
        let steps = (5.0 / params.dt) as usize;
        for _ in 0..steps {
            step(&mut state, &action, params.dt).unwrap();
        }
        let max_v = state
            .velocities
            .iter()
            .map(|v| v.length())
            .fold(0.0f64, f64::max);
        assert!(max_v < 0.05, "max |v| after 5s = {max_v}");
    }

    #[test]
    fn passive_energy_non_increasing_outside_contact() {
        let params = P::default();
        let m = RobotMorphology::standard();
        let mut state = build_world(&flat_terrain(30, 4), &m, &params).unwrap();
        let action = vec![0.0; state.actuator_count];
        let steps = (5.0 / params.dt) as usize;
        let mut previous = (mechanical_energy(&state), state.last_contacts);
        for _ in 0..steps {
            step(&mut state, &action, params.dt).unwrap();
            let now = (mechanical_energy(&state), state.last_contacts);
            if previous.1 == 0 && now.1 == 0 {
                assert!(
                    now.0 <= previous.0 + 1e-6,
                    "energy rose {} -> {} without contact",
                    previous.0,
                    now.0
                );
            }
            previous = now;
        }
    }

    #[test]
    fn score_is_com_displacement() {
        let params = P::default();
        let m = RobotMorphology::standard();
        let mut state = build_world(&flat_terrain(30, 4), &m, &params).unwrap();
        assert_eq!(score(&state), 0.0);
        for p in &mut state.positions {
            p.x += 1.5;
        }
        assert!((score(&state) - 1.5).abs() < 1e-12);
        for p in &mut state.positions {
            p.x -= 1.8;
        }
        assert!((score(&state) + 0.3).abs() < 1e-12);
    }

    #[test]
    fn observation_shape_and_rest_velocities() {
        for text in ["VH", "VO\nHH", "HHHHH\nSSSSS\nSSSSS\nVOVOV"] {
            let m = tiny_robot(text);
            let state = build_world(&flat_terrain(30, 6), &m, &P::default()).unwrap();
            let obs = observe(&state);
            assert_eq!(obs.len(), 4 * state.positions.len() + 2);
            let n = state.positions.len();
            assert!(obs[2 * n..4 * n].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn observation_is_translation_invariant() {
        let mut a = RobotMorphology::standard();
        a.spawn_offset = (1, 0);
        let mut b = RobotMorphology::standard();
        b.spawn_offset = (9, 0);
        let sa = build_world(&flat_terrain(40, 4), &a, &P::default()).unwrap();
        let sb = build_world(&flat_terrain(40, 4), &b, &P::default()).unwrap();
        let (oa, ob) = (observe(&sa), observe(&sb));
        let n = sa.positions.len();
        for i in 0..2 * n {
            assert!((oa[i] - ob[i]).abs() < 1e-9, "entry {i}");
        }
    }

    struct JitterController {
        actuators: usize,
    }

    impl Controller<f64> for JitterController {
        fn decide(&self, _obs: &[f64], rng: Option<&mut ChaCha8Rng>) -> Decision<f64> {
            let action = match rng {
                Some(r) => (0..self.actuators).map(|_| f64::standard_normal(r).clamp(-1.0, 1.0)).collect(),
                None => vec![0.0; self.actuators],
            };
            Decision {
                action,
                log_prob: 0.0,
                value: 0.0,
            }
        }
    }

    #[test]
    fn rewards_telescope_to_score() {
        let m = RobotMorphology::standard();
        let ctrl = JitterController {
            actuators: m.actuator_count(),
        };
        let mut rng = stream(3, &["sim"], &[0]);
        let t = rollout(&flat_terrain(60, 4), &m, &ctrl, 120, &P::default(), Some(&mut rng)).unwrap();
        let total: f64 = t.steps.iter().map(|s| s.reward).sum();
        assert!((total - t.score).abs() < 1e-9, "sum {total} vs score {}", t.score);
    }

    #[test]
    fn rollouts_are_seed_deterministic() {
        let m = RobotMorphology::standard();
        let ctrl = JitterController {
            actuators: m.actuator_count(),
        };
        let run = || {
            let mut rng = stream(7, &["sim"], &[1]);
            rollout(&flat_terrain(60, 4), &m, &ctrl, 90, &P::default(), Some(&mut rng)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_policy_barely_moves() {
        let m = RobotMorphology::standard();
        let ctrl = ZeroController {
            actuators: m.actuator_count(),
        };
        let t = rollout_deterministic(&flat_terrain(60, 4), &m, &ctrl, 150, &P::default()).unwrap();
        assert!(t.score.abs() < 0.1, "score {}", t.score);
    }

    #[test]
    fn action_length_is_checked() {
        let m = RobotMorphology::standard();
        let mut state = build_world(&flat_terrain(30, 4), &m, &P::default()).unwrap();
        let dt = state.params.dt;
        let err = step(&mut state, &[0.0], dt).unwrap_err();
        assert!(matches!(err, SimError::ActionLength { expected: 10, got: 1 }));
    }

    #[test]
    fn fuzz_rollouts_never_produce_non_finite_observations() {
        let mut generator = crate::generators::StubGenerator::new(0.5, 8);
        use crate::generators::EnvGenerator;
        for i in 0..150 {
            let mut rng = stream(99, &["fuzz"], &[i]);
            let env = generator
                .generate("", 24, 8, &format!("env_{i:06}"), 0, &mut rng)
                .unwrap();
            let m = RobotMorphology::standard();
            let ctrl = JitterController {
                actuators: m.actuator_count(),
            };
            let t = rollout(&env.grid, &m, &ctrl, 40, &P::default(), Some(&mut rng)).unwrap();
            for s in &t.steps {
                assert!(s.observation.iter().all(|v| v.is_finite()));
                assert!(s.reward.is_finite());
            }
        }
    }
}
