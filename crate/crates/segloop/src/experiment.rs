//! Experiment harness: the config document the CLI consumes, the
//! default drifting-distractor population, and a runner that sweeps
//! pipelines over every object in a world.
//!
//! Anchor perturbations use common random numbers. Each object draws
//! one unit offset, every method sees the same offset, and a noise
//! sweep only rescales it, so comparisons across noise levels stay
//! paired all the way down.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Prompt;
use crate::metrics::{metric_panel, DecoderOracle, MetricConfig, MetricPanel};
use crate::stabilize::{run_pipeline, PipelineMethod, RunStatus, StabilizerConfig};
use crate::stats::PairedSample;
use crate::synth::{
    build_world, splitmix64, DistractorSpec, DriftSpec, ObjectSpec, SliceOracle, World,
    WorldConfig,
};
use crate::trace::TraceRecord;

const ANCHOR_SALT: u64 = 0xa2c4_0a5e_ed00_0001;

/// Which pipelines to run and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Pipelines to execute, in output order.
    #[serde(default = "default_methods")]
    pub methods: Vec<PipelineMethod>,
    /// Decoder calls per object, including the anchor call.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Cap on how many of the world's objects to run; absent runs all.
    #[serde(default)]
    pub objects: Option<usize>,
    /// Seed for anchor perturbation. Decode noise is seeded by the
    /// world config, so the two randomness sources move independently.
    #[serde(default)]
    pub seed: u64,
    /// Isotropic anchor noise scale, in attention-grid units.
    #[serde(default)]
    pub anchor_noise: f64,
}

fn default_methods() -> Vec<PipelineMethod> {
    PipelineMethod::ALL.to_vec()
}

fn default_iterations() -> usize {
    10
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            methods: default_methods(),
            iterations: default_iterations(),
            objects: None,
            seed: 0,
            anchor_noise: 0.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("run.methods is empty".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::InvalidConfig(format!(
                    "run.methods repeats {m}"
                )));
            }
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("run.iterations must be >= 1".into()));
        }
        if self.objects == Some(0) {
            return Err(Error::InvalidConfig("run.objects must be >= 1".into()));
        }
        if !self.anchor_noise.is_finite() || self.anchor_noise < 0.0 {
            return Err(Error::InvalidConfig(
                "run.anchor_noise must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

const GROUP_KEYS: [&str; 4] = ["method", "slice", "object", "iteration"];

/// Downstream comparison defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    /// Keys records are grouped on before pairing.
    #[serde(default = "default_group_by")]
    pub group_by: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

fn default_permutations() -> usize {
    2000
}

fn default_group_by() -> Vec<String> {
    vec!["object".into()]
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            permutations: default_permutations(),
            group_by: default_group_by(),
            seed: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.permutations == 0 {
            return Err(Error::InvalidConfig(
                "analysis.permutations must be >= 1".into(),
            ));
        }
        if self.group_by.is_empty() {
            return Err(Error::InvalidConfig("analysis.group_by is empty".into()));
        }
        for key in &self.group_by {
            if !GROUP_KEYS.contains(&key.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "analysis.group_by key {key:?} is not one of {GROUP_KEYS:?}"
                )));
            }
        }
        Ok(())
    }
}

/// The full experiment document: a world, the stabilizer operating
/// point, the run plan, and analysis defaults. Unknown keys anywhere
/// in the document are rejected at parse time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    #[serde(default)]
    pub stabilizer: StabilizerConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.stabilizer.validate()?;
        self.run.validate()?;
        self.analysis.validate()?;
        if self.run.iterations > self.world.slices {
            return Err(Error::InvalidConfig(format!(
                "run.iterations {} exceeds world.slices {}",
                self.run.iterations, self.world.slices
            )));
        }
        Ok(())
    }
}

/// Stable FNV-1a digest of the canonical JSON encoding, recorded in
/// trace manifests so artifacts can be matched back to their configs.
pub fn config_digest(cfg: &ExperimentConfig) -> Result<u64> {
    cfg.validate()?;
    let canon = serde_json::to_string(cfg)
        .map_err(|e| Error::InvalidConfig(format!("config not serializable: {e}")))?;
    Ok(fnv1a(canon.as_bytes()))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn unit(state: &mut u64) -> f64 {
    *state = splitmix64(*state);
    (*state >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Symmetric unit draw in [-1, 1).
fn sym(state: &mut u64) -> f64 {
    2.0 * unit(state) - 1.0
}

/// Builds the default population: `count` small ellipses on a jittered
/// grid across a 256x256 frame, all drifting along a shared orbit,
/// each shadowed by a static distractor parked a few pixels away. The
/// layout keeps every object far enough from its neighbors that decode
/// targeting is unambiguous, while the distractors sit close enough to
/// tug on attention once a prompt starts to stray.
pub fn drifting_population(count: usize, seed: u64) -> Result<WorldConfig> {
    if count == 0 {
        return Err(Error::InvalidConfig("population needs at least one object".into()));
    }
    let image = 256usize;
    let margin = 16.0;
    let span = image as f64 - 2.0 * margin;
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);

    let mut objects = Vec::with_capacity(count);
    let mut distractors = Vec::with_capacity(count);
    for index in 0..count {
        let mut state = splitmix64(seed ^ splitmix64(index as u64 + 1));
        let row = index / cols;
        let col = index % cols;
        let cx = margin + (col as f64 + 0.5) * span / cols as f64 + 1.2 * sym(&mut state);
        let cy = margin + (row as f64 + 0.5) * span / rows as f64 + 1.2 * sym(&mut state);
        let rx = 4.2 * (1.0 + 0.15 * sym(&mut state));
        let ry = 3.6 * (1.0 + 0.15 * sym(&mut state));
        objects.push(ObjectSpec {
            center: [cx, cy],
            radii: [rx, ry],
            drift: DriftSpec {
                amplitude: 1.0,
                period: 10.0,
            },
        });
        let angle = std::f64::consts::TAU * unit(&mut state);
        let dr = 3.0 * (1.0 + 0.1 * sym(&mut state));
        distractors.push(DistractorSpec {
            center: [cx + 8.0 * angle.cos(), cy + 8.0 * angle.sin()],
            radii: [dr, dr],
            pull: 0.25,
        });
    }

    Ok(WorldConfig {
        slices: 10,
        image: [image, image],
        grid: [64, 64],
        objects,
        distractors,
        gain: 1.05,
        noise_sigma: 1.0,
        candidate_count: 3,
        feature_coupling: true,
        seed,
    })
}

/// One unit offset per object, independent of method and noise scale.
fn anchor_offsets(count: usize, seed: u64) -> Vec<(f64, f64)> {
    (0..count)
        .map(|object| {
            let key = splitmix64(seed ^ splitmix64(object as u64 ^ ANCHOR_SALT));
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            (dx, dy)
        })
        .collect()
}

/// Translates the object's true first-slice prompt by `noise` grid
/// units along the object's unit offset, converted to pixels per axis.
fn jittered_anchor(world: &World, object: usize, offset: (f64, f64), noise: f64) -> Result<Prompt> {
    let base = world.gt_prompt(0, object)?;
    let [h, w] = world.config().image;
    let [hf, wf] = world.config().grid;
    let dx = noise * offset.0 * w as f64 / wf as f64;
    let dy = noise * offset.1 * h as f64 / hf as f64;
    let (cx, cy) = base.centroid;
    let (x1, y1, x2, y2) = base.bbox;
    Prompt::new(
        (cx + dx, cy + dy),
        (x1 + dx, y1 + dy, x2 + dx, y2 + dy),
        base.image_diag,
    )
}

/// Outcome of one (method, object) pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: PipelineMethod,
    pub object: usize,
    pub status: RunStatus,
    /// Index of this run's first record in `Experiment::records`.
    pub first_record: usize,
    pub record_count: usize,
}

/// Everything a sweep produced: the world it ran against, the flat
/// record stream (method-major, object-minor, iteration order inside),
/// and per-run outcomes.
#[derive(Debug)]
pub struct Experiment {
    pub world: World,
    pub records: Vec<TraceRecord>,
    pub runs: Vec<MethodRun>,
}

impl Experiment {
    /// Runs that ended with the object declared lost.
    pub fn losses(&self) -> usize {
        self.runs
            .iter()
            .filter(|r| matches!(r.status, RunStatus::Lost { .. }))
            .count()
    }
}

/// Sweeps every configured method over the world's objects.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let world = build_world(cfg.world.clone())?;
    let object_count = match cfg.run.objects {
        Some(n) => n.min(world.object_count()),
        None => world.object_count(),
    };
    let offsets = anchor_offsets(object_count, cfg.run.seed);
    let metric_cfg = MetricConfig::default();

    let mut records = Vec::new();
    let mut runs = Vec::new();
    for &method in &cfg.run.methods {
        for object in 0..object_count {
            let anchor = if cfg.run.anchor_noise > 0.0 {
                Some(jittered_anchor(
                    &world,
                    object,
                    offsets[object],
                    cfg.run.anchor_noise,
                )?)
            } else {
                None
            };
            let run = run_pipeline(
                &world,
                object,
                method,
                &cfg.stabilizer,
                &metric_cfg,
                cfg.run.iterations,
                anchor.as_ref(),
            )?;
            runs.push(MethodRun {
                method,
                object,
                status: run.status,
                first_record: records.len(),
                record_count: run.records.len(),
            });
            records.extend(run.records);
        }
    }
    Ok(Experiment {
        world,
        records,
        runs,
    })
}

/// One computed panel with its record keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub method: String,
    pub slice: usize,
    pub object: usize,
    pub iteration: usize,
    pub confidence: f64,
    pub iou: Option<f64>,
    pub panel: MetricPanel,
}

/// Computes the metric panel for every record. Records are grouped by
/// (method, object) in first-appearance order and walked by iteration;
/// the lowest iteration of each group serves as its anchor reference.
/// With a world attached the causal and feature-correlation columns
/// fill in; without one they stay empty.
pub fn panel_table(
    records: &[TraceRecord],
    world: Option<&World>,
    image: (usize, usize),
    cfg: &MetricConfig,
) -> Result<Vec<PanelRow>> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
    for (i, record) in records.iter().enumerate() {
        let key = (record.method.clone(), record.object);
        let slot = groups.entry(key.clone()).or_default();
        if slot.is_empty() {
            order.push(key);
        }
        slot.push(i);
    }

    let mut rows = Vec::with_capacity(records.len());
    for key in order {
        let mut idx = groups.remove(&key).expect("group indexed above");
        idx.sort_by_key(|&i| records[i].iteration);
        let anchor = &records[idx[0]];
        for (pos, &i) in idx.iter().enumerate() {
            let record = &records[i];
            let prev = if pos > 0 {
                Some(&records[idx[pos - 1]])
            } else {
                None
            };
            let oracle_slot;
            let mut oracle: Option<&dyn DecoderOracle> = None;
            let mut sca_vectors: Option<(&[f64], &[f64])> = None;
            if let Some(w) = world {
                oracle_slot = SliceOracle::new(w, record.slice)?;
                oracle = Some(&oracle_slot);
                sca_vectors = Some((w.feature_grid(record.slice)?, record.attention.values()));
            }
            let panel = metric_panel(
                record,
                prev,
                anchor,
                record.mask_gt.as_ref(),
                oracle,
                sca_vectors,
                image,
                cfg,
            )?;
            rows.push(PanelRow {
                method: record.method.clone(),
                slice: record.slice,
                object: record.object,
                iteration: record.iteration,
                confidence: record.confidence,
                iou: record.iou,
                panel,
            });
        }
    }
    Ok(rows)
}

/// Per-object mean of one panel column for one method. Rows where the
/// column is absent are skipped; objects with no present rows drop out.
pub fn object_means<F>(rows: &[PanelRow], method: &str, value: F) -> BTreeMap<usize, f64>
where
    F: Fn(&PanelRow) -> Option<f64>,
{
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.method == method) {
        if let Some(v) = value(row) {
            let entry = sums.entry(row.object).or_insert((0.0, 0));
            entry.0 += v;
            entry.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(object, (sum, n))| (object, sum / n as f64))
        .collect()
}

/// Joins two per-object mean maps into paired samples on shared keys.
pub fn paired_by_object(
    a: &BTreeMap<usize, f64>,
    b: &BTreeMap<usize, f64>,
) -> Vec<PairedSample> {
    a.iter()
        .filter_map(|(&object, &value_a)| {
            b.get(&object).map(|&value_b| PairedSample {
                key: (0, object, 0),
                value_a,
                value_b,
            })
        })
        .collect()
}
