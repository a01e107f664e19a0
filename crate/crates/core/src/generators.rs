//! The environment generator families behind one interface: CPPN baseline,
//! completion-model backed, and a seeded stub for offline runs. Also the
//! mutation operator the outer loop calls on reproduction.

use crate::cppn::{CppnError, CppnGenome, CppnMutationConfig};
use crate::grid::{
    postprocess, repair_spawn_platform_clamped, EnvRecord, GeneratorKind, GridError, TerrainIssue,
    Voxel, VoxelGrid, DEFAULT_SPAWN_WIDTH,
};
use crate::llm::{ClientError, CompletionClient, CompletionRequest};
use crate::real::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Cppn(#[from] CppnError),
    #[error("generation failed after {attempts} attempts: {last}")]
    GenerationFailed { attempts: u32, last: String },
    #[error("no genome recorded for parent {id}")]
    UnknownParent { id: String },
    #[error("{got} parent routed to a {expected} generator")]
    WrongFamily {
        expected: GeneratorKind,
        got: GeneratorKind,
    },
    #[error("invalid prompt mutation template: {0}")]
    InvalidTemplate(String),
}

/// A generator family: produces fresh environments and mutates existing
/// ones. Every returned record is simulable terrain (no actuators, spawn
/// supported) and children carry `parent_id = parent.lineage_id`.
pub trait EnvGenerator: Send {
    fn kind(&self) -> GeneratorKind;

    fn generate(
        &mut self,
        prompt: &str,
        width: usize,
        height: usize,
        lineage_id: &str,
        iteration: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EnvRecord, GenError>;

    fn mutate(
        &mut self,
        parent: &EnvRecord,
        child_id: &str,
        iteration: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EnvRecord, GenError>;
}

/// The fair coin behind environment mutation: `true` keeps the parent
/// prompt, `false` mutates it first.
pub fn draw_same_prompt_coin<R: Rng + ?Sized>(rng: &mut R) -> bool {
    rng.gen::<f64>() < 0.5
}

// ---------------------------------------------------------------------------
// CPPN generator
// ---------------------------------------------------------------------------

/// CPPN family. Genomes are keyed by lineage id so mutation can recover the
/// parent's graph; the map is part of checkpoint state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CppnGenerator<T> {
    pub genomes: BTreeMap<String, CppnGenome<T>>,
    pub mutation: CppnMutationConfig,
    pub spawn_width: usize,
}

impl<T: Real> CppnGenerator<T> {
    pub fn new(mutation: CppnMutationConfig, spawn_width: usize) -> CppnGenerator<T> {
        CppnGenerator {
            genomes: BTreeMap::new(),
            mutation,
            spawn_width,
        }
    }

    fn record_for(
        &mut self,
        genome: CppnGenome<T>,
        width: usize,
        height: usize,
        lineage_id: &str,
        parent_id: Option<String>,
        iteration: u64,
    ) -> Result<EnvRecord, GenError> {
        let painted = genome.paint(width, height)?;
        let grid = repair_spawn_platform_clamped(&painted, self.spawn_width);
        let prompt = format!("cppn:{}", genome.hash());
        self.genomes.insert(lineage_id.to_string(), genome);
        Ok(EnvRecord {
            grid,
            prompt,
            generator: GeneratorKind::Cppn,
            lineage_id: lineage_id.to_string(),
            parent_id,
            created_at_iteration: iteration,
        })
    }
}

impl<T: Real> EnvGenerator for CppnGenerator<T> {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Cppn
    }

    fn generate(
        &mut self,
        _prompt: &str,
        width: usize,
        height: usize,
        lineage_id: &str,
        iteration: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EnvRecord, GenError> {
        let genome = CppnGenome::minimal(rng);
        self.record_for(genome, width, height, lineage_id, None, iteration)
    }

    fn mutate(
        &mut self,
        parent: &EnvRecord,
        child_id: &str,
        iteration: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EnvRecord, GenError> {
        if parent.generator != GeneratorKind::Cppn {
            return Err(GenError::WrongFamily {
                expected: GeneratorKind::Cppn,
                got: parent.generator,
            });
        }
        let genome = self
            .genomes
            .get(&parent.lineage_id)
            .ok_or_else(|| GenError::UnknownParent {
                id: parent.lineage_id.clone(),
            })?
            .clone();
        let child = genome.mutate(&self.mutation, rng)?;
        self.record_for(
            child,
            parent.grid.width(),
            parent.grid.height(),
            child_id,
            Some(parent.lineage_id.clone()),
            iteration,
        )
    }
}

// ---------------------------------------------------------------------------
// Stub generator
// ---------------------------------------------------------------------------

/// Seeded random heightfields with tunable roughness; no network, fully
/// deterministic. The default for offline runs and tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubGenerator {
    pub roughness: f64,
    pub soft_fraction: f64,
    pub spawn_width: usize,
}

impl StubGenerator {
    pub fn new(roughness: f64, spawn_width: usize) -> StubGenerator {
        StubGenerator {
            roughness,
            soft_fraction: 0.12,
            spawn_width,
        }
    }

    fn grid_from_heights(&self, heights: &[usize], height: usize, rng: &mut ChaCha8Rng) -> VoxelGrid {
        let width = heights.len();
        let mut grid = VoxelGrid::new(width, height).expect("stub dims");
        for (x, &h) in heights.iter().enumerate() {
            for y_up in 0..h.min(height) {
                let y = height - 1 - y_up;
                let kind = if rng.gen::<f64>() < self.soft_fraction {
                    Voxel::Soft
                } else {
                    Voxel::Rigid
                };
                grid.set(x, y, kind);
            }
        }
        repair_spawn_platform_clamped(&grid, self.spawn_width)
    }

    fn walk_heights(&self, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let max_level = (height.saturating_sub(1)).max(1);
        let mut level = (height / 3).clamp(1, max_level);
        let mut heights = Vec::with_capacity(width);
        for _ in 0..width {
            heights.push(level);
            if rng.gen::<f64>() < self.roughness {
                let up = rng.gen::<bool>();
                level = if up {
                    (level + 1).min(max_level)
                } else {
                    level.saturating_sub(1).max(1)
                };
            }
        }
        heights
    }

    fn column_heights(grid: &VoxelGrid) -> Vec<usize> {
        (0..grid.width())
            .map(|x| {
                (0..grid.height())
                    .find(|&y| grid.get(x, y).is_solid())
                    .map(|top| grid.height() - top)
                    .unwrap_or(0)
            })
            .collect()
    }
}

impl EnvGenerator for StubGenerator {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Stub
    }

    fn generate(
        &mut self,
        prompt: &str,
        width: usize,
        height: usize,
        lineage_id: &str,
        iteration: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EnvRecord, GenError> {
        let heights = self.walk_heights(width, height, rng);
        let grid = self.grid_from_heights(&heights, height, rng);
        let prompt = if prompt.is_empty() { "stub terrain" } else { prompt };
        Ok(EnvRecord {
            grid,
            prompt: prompt.to_string(),
            generator: GeneratorKind::Stub,
            lineage_id: lineage_id.to_string(),
            parent_id: None,
            created_at_iteration: iteration,
        })
    }

    fn mutate(
        &mut self,
        parent: &EnvRecord,
        child_id: &str,
        iteration: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EnvRecord, GenError> {
        let height = parent.grid.height();
        let max_level = (height.saturating_sub(1)).max(1);
        let mut heights = Self::column_heights(&parent.grid);
        for h in &mut heights {
            if rng.gen::<f64>() < self.roughness {
                let up = rng.gen::<bool>();
                *h = if up {
                    (*h + 1).min(max_level)
                } else {
                    h.saturating_sub(1).max(1)
                };
            }
        }
        let grid = self.grid_from_heights(&heights, height, rng);
        Ok(EnvRecord {
            grid,
            prompt: parent.prompt.clone(),
            generator: GeneratorKind::Stub,
            lineage_id: child_id.to_string(),
            parent_id: Some(parent.lineage_id.clone()),
            created_at_iteration: iteration,
        })
    }
}

// ---------------------------------------------------------------------------
// Completion-model generator
// ---------------------------------------------------------------------------

/// A before/after demonstration pair for prompt mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub before: String,
    pub after: String,
}

/// Few-shot template used to mutate prompts. The instruction must contain
/// exactly one `{prompt}` slot (the parent prompt) and exactly one
/// `{examples}` slot (the rendered pairs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMutationTemplate {
    pub instruction: String,
    pub examples: Vec<PromptPair>,
}

impl PromptMutationTemplate {
    /// The template shipped with the crate (also on disk as
    /// `data/prompt_mutations.json`).
    pub fn builtin() -> PromptMutationTemplate {
        serde_json::from_str(include_str!("../data/prompt_mutations.json"))
            .expect("builtin template parses")
    }

    pub fn from_file(path: &std::path::Path) -> Result<PromptMutationTemplate, GenError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GenError::InvalidTemplate(format!("{}: {e}", path.display())))?;
        let template: PromptMutationTemplate =
            serde_json::from_str(&text).map_err(|e| GenError::InvalidTemplate(e.to_string()))?;
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.examples.len() < 3 {
            return Err(GenError::InvalidTemplate(format!(
                "need at least 3 example pairs, got {}",
                self.examples.len()
            )));
        }
        if self
            .examples
            .iter()
            .any(|p| p.before.is_empty() || p.after.is_empty())
        {
            return Err(GenError::InvalidTemplate("example pairs must be non-empty".into()));
        }
        for slot in ["{prompt}", "{examples}"] {
            let n = self.instruction.matches(slot).count();
            if n != 1 {
                return Err(GenError::InvalidTemplate(format!(
                    "instruction must contain exactly one {slot} slot, found {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self, parent_prompt: &str) -> String {
        let examples: String = self
            .examples
            .iter()
            .map(|p| format!("before: {}\nafter: {}\n", p.before, p.after))
            .collect();
        self.instruction
            .replace("{examples}", &examples)
            .replace("{prompt}", parent_prompt)
    }
}

/// Knobs for the completion-model generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmGenConfig {
    /// Request template; slots `{width}`, `{height}`, `{prompt}`.
    pub completion_template: String,
    pub system_text: String,
    pub model: String,
    /// Used for fresh environments.
    pub init_temperature: f64,
    /// Used for mutation; must stay above zero — the sampling noise IS the
    /// same-prompt mutation.
    pub mutate_temperature: f64,
    pub max_tokens: u32,
    /// Generation attempts before giving up (invalid output, client errors).
    pub max_attempts: u32,
    /// When true, a completion whose grid does not match the requested size
    /// is regenerated (until `max_attempts`) instead of truncated/padded.
    pub regenerate_on_size_mismatch: bool,
}

impl Default for LlmGenConfig {
    fn default() -> Self {
        LlmGenConfig {
            completion_template: "Create a {width}*{height} size environment. {prompt}".into(),
            system_text: String::new(),
            model: "gpt-3.5-turbo".into(),
            init_temperature: 0.7,
            mutate_temperature: 1.0,
            max_tokens: 2048,
            max_attempts: 5,
            regenerate_on_size_mismatch: false,
        }
    }
}

impl LlmGenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.mutate_temperature > 0.0) {
            return Err(GenError::InvalidTemplate(
                "mutate_temperature must be > 0 (sampling noise is the mutation)".into(),
            ));
        }
        if !(self.init_temperature >= 0.0) {
            return Err(GenError::InvalidTemplate("init_temperature must be >= 0".into()));
        }
        for slot in ["{width}", "{height}", "{prompt}"] {
            if !self.completion_template.contains(slot) {
                return Err(GenError::InvalidTemplate(format!(
                    "completion_template is missing the {slot} slot"
                )));
            }
        }
        Ok(())
    }
}

/// One grid completion: compose the request, call the client, repair the
/// output into a valid terrain of the requested size.
pub fn llm_generate(
    client: &dyn CompletionClient,
    cfg: &LlmGenConfig,
    prompt: &str,
    width: usize,
    height: usize,
    temperature: f64,
    spawn_width: usize,
) -> Result<VoxelGrid, GenError> {
    let user_text = cfg
        .completion_template
        .replace("{width}", &width.to_string())
        .replace("{height}", &height.to_string())
        .replace("{prompt}", prompt);
    let request = CompletionRequest {
        system_text: cfg.system_text.clone(),
        user_text,
        temperature,
        max_tokens: cfg.max_tokens,
        model_name: cfg.model.clone(),
    };
    let rounds = if cfg.regenerate_on_size_mismatch {
        cfg.max_attempts.max(1)
    } else {
        1
    };
    let mut raw = client.complete(&request)?;
    for _ in 1..rounds {
        if raw_matches_size(&raw, width, height) {
            break;
        }
        raw = client.complete(&request)?;
    }
    Ok(postprocess(&raw, width, height, spawn_width)?)
}

/// Does the raw completion already carry exactly the requested grid shape?
fn raw_matches_size(raw: &str, width: usize, height: usize) -> bool {
    let rows: Vec<&str> = raw
        .lines()
        .map(str::trim)
        .filter(|l| l.chars().any(|c| matches!(c, 'H' | 'S' | '-')))
        .collect();
    rows.len() == height && rows.iter().all(|r| r.chars().count() == width)
}

/// Ask the model for a mutated prompt; the completion is trimmed to its
/// first non-empty line, and blank completions fall back to the parent.
pub fn mutate_prompt(
    client: &dyn CompletionClient,
    cfg: &LlmGenConfig,
    template: &PromptMutationTemplate,
    parent_prompt: &str,
) -> Result<String, GenError> {
    template.validate()?;
    let request = CompletionRequest {
        system_text: cfg.system_text.clone(),
        user_text: template.render(parent_prompt),
        temperature: cfg.mutate_temperature,
        max_tokens: 128,
        model_name: cfg.model.clone(),
    };
    let completion = client.complete(&request)?;
    let line = completion
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or(parent_prompt);
    Ok(line.to_string())
}

/// Completion-model family: fresh environments from seed prompts, mutation
/// by re-sampling the same prompt or re-sampling a mutated prompt, 50/50.
pub struct LlmGenerator {
    client: Arc<dyn CompletionClient>,
    pub template: PromptMutationTemplate,
    pub cfg: LlmGenConfig,
    pub spawn_width: usize,
}

impl LlmGenerator {
    pub fn new(
        client: Arc<dyn CompletionClient>,
        template: PromptMutationTemplate,
        cfg: LlmGenConfig,
        spawn_width: usize,
    ) -> Result<LlmGenerator, GenError> {
        cfg.validate()?;
        template.validate()?;
        Ok(LlmGenerator {
            client,
            template,
            cfg,
            spawn_width,
        })
    }

    /// Mutation with the coin optionally forced: `Some(true)` keeps the
    /// parent prompt, `Some(false)` mutates it, `None` flips fairly.
    pub fn mutate_with_branch(
        &mut self,
        parent: &EnvRecord,
        child_id: &str,
        iteration: u64,
        rng: &mut ChaCha8Rng,
        force_same: Option<bool>,
    ) -> Result<EnvRecord, GenError> {
        if parent.generator != GeneratorKind::Llm {
            return Err(GenError::WrongFamily {
                expected: GeneratorKind::Llm,
                got: parent.generator,
            });
        }
        let same = force_same.unwrap_or_else(|| draw_same_prompt_coin(rng));
        let mut attempts = 0;
        let mut last = String::new();
        while attempts < self.cfg.max_attempts.max(1) {
            attempts += 1;
            let outcome = (|| -> Result<EnvRecord, GenError> {
                let prompt = if same {
                    parent.prompt.clone()
                } else {
                    mutate_prompt(self.client.as_ref(), &self.cfg, &self.template, &parent.prompt)?
                };
                let grid = llm_generate(
                    self.client.as_ref(),
                    &self.cfg,
                    &prompt,
                    parent.grid.width(),
                    parent.grid.height(),
                    self.cfg.mutate_temperature,
                    self.spawn_width,
                )?;
                Ok(EnvRecord {
                    grid,
                    prompt,
                    generator: GeneratorKind::Llm,
                    lineage_id: child_id.to_string(),
                    parent_id: Some(parent.lineage_id.clone()),
                    created_at_iteration: iteration,
                })
            })();
            match outcome {
                Ok(record) => return Ok(record),
                Err(e) => last = e.to_string(),
            }
        }
        Err(GenError::GenerationFailed { attempts, last })
    }
}

impl EnvGenerator for LlmGenerator {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Llm
    }

    fn generate(
        &mut self,
        prompt: &str,
        width: usize,
        height: usize,
        lineage_id: &str,
        iteration: u64,
        _rng: &mut ChaCha8Rng,
    ) -> Result<EnvRecord, GenError> {
        let mut attempts = 0;
        let mut last = String::new();
        while attempts < self.cfg.max_attempts.max(1) {
            attempts += 1;
            match llm_generate(
                self.client.as_ref(),
                &self.cfg,
                prompt,
                width,
                height,
                self.cfg.init_temperature,
                self.spawn_width,
            ) {
                Ok(grid) => {
                    return Ok(EnvRecord {
                        grid,
                        prompt: prompt.to_string(),
                        generator: GeneratorKind::Llm,
                        lineage_id: lineage_id.to_string(),
                        parent_id: None,
                        created_at_iteration: iteration,
                    })
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(GenError::GenerationFailed { attempts, last })
    }

    fn mutate(
        &mut self,
        parent: &EnvRecord,
        child_id: &str,
        iteration: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EnvRecord, GenError> {
        self.mutate_with_branch(parent, child_id, iteration, rng, None)
    }
}

// ---------------------------------------------------------------------------
// Family dispatch
// ---------------------------------------------------------------------------

/// Concrete generator: what the outer loop owns. The CPPN variant carries
/// mutable state (the genome map) that checkpoints must capture.
pub enum Generator<T> {
    Llm(LlmGenerator),
    Cppn(CppnGenerator<T>),
    Stub(StubGenerator),
}

/// Serializable slice of generator state for checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorState<T> {
    Llm,
    Cppn { genomes: BTreeMap<String, CppnGenome<T>> },
    Stub,
}

impl<T: Real> Generator<T> {
    pub fn kind(&self) -> GeneratorKind {
        match self {
            Generator::Llm(g) => g.kind(),
            Generator::Cppn(g) => g.kind(),
            Generator::Stub(g) => g.kind(),
        }
    }

    pub fn generate(
        &mut self,
        prompt: &str,
        width: usize,
        height: usize,
        lineage_id: &str,
        iteration: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EnvRecord, GenError> {
        match self {
            Generator::Llm(g) => g.generate(prompt, width, height, lineage_id, iteration, rng),
            Generator::Cppn(g) => g.generate(prompt, width, height, lineage_id, iteration, rng),
            Generator::Stub(g) => g.generate(prompt, width, height, lineage_id, iteration, rng),
        }
    }

    pub fn mutate(
        &mut self,
        parent: &EnvRecord,
        child_id: &str,
        iteration: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EnvRecord, GenError> {
        match self {
            Generator::Llm(g) => g.mutate(parent, child_id, iteration, rng),
            Generator::Cppn(g) => g.mutate(parent, child_id, iteration, rng),
            Generator::Stub(g) => g.mutate(parent, child_id, iteration, rng),
        }
    }

    pub fn snapshot(&self) -> GeneratorState<T> {
        match self {
            Generator::Llm(_) => GeneratorState::Llm,
            Generator::Cppn(g) => GeneratorState::Cppn {
                genomes: g.genomes.clone(),
            },
            Generator::Stub(_) => GeneratorState::Stub,
        }
    }

    pub fn restore(&mut self, state: GeneratorState<T>) {
        if let (Generator::Cppn(g), GeneratorState::Cppn { genomes }) = (&mut *self, state) {
            g.genomes = genomes;
        }
    }
}

/// Check the generator-output invariant: simulable terrain, right
/// provenance.
pub fn check_generated(record: &EnvRecord, spawn_width: usize) -> Result<(), String> {
    let issues = crate::grid::validate_terrain(&record.grid, spawn_width);
    if issues.contains(&TerrainIssue::ContainsActuator) {
        return Err(format!("{}: terrain contains actuators", record.lineage_id));
    }
    if !issues.is_empty() {
        return Err(format!("{}: terrain issues {issues:?}", record.lineage_id));
    }
    record.validate()
}
