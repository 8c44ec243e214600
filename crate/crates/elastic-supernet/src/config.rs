//! TOML run configuration: one document describing the backbone, dataset,
//! every training stage, the search, the router, and the output location.
//! All fields have defaults (printable via `--dump-default-config`) sized
//! for a complete desk run in minutes; `validate` cross-checks the fields
//! before any stage starts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use elastic_core::backbone::BackboneSpec;
use elastic_core::curriculum::{CurriculumSchedule, TrainSettings};
use elastic_core::optim::AdamwSettings;
use elastic_core::router::RouterHyper;
use elastic_core::search::SearchSettings;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub dataset: DatasetSection,
    pub optimizer: OptimizerSection,
    pub stage0: StageSection,
    pub rearrange: RearrangeSection,
    pub curriculum: CurriculumSection,
    pub search: SearchSection,
    pub router: RouterSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneSection::default(),
            dataset: DatasetSection::default(),
            optimizer: OptimizerSection::default(),
            stage0: StageSection {
                steps: 400,
                batch_size: 32,
                peak_lr: 3e-3,
                floor_lr: 3e-4,
                warmup_steps: 40,
            },
            rearrange: RearrangeSection::default(),
            curriculum: CurriculumSection::default(),
            search: SearchSection::default(),
            router: RouterSection::default(),
            eval: EvalSection::default(),
            run: RunSection::default(),
        }
    }
}

/// Mirrors `BackboneSpec` field for field so the TOML document is
/// self-describing; converted (and validated) via `to_spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub layers: usize,
    pub e_max: usize,
    pub d_head: usize,
    pub e_min: usize,
    pub h_min: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub r_step: f64,
    /// Sequence length including the class token.
    pub tokens: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub ln_eps: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            layers: 4,
            e_max: 64,
            d_head: 8,
            e_min: 16,
            h_min: 2,
            r_min: 0.5,
            r_max: 2.0,
            r_step: 0.5,
            tokens: 9,
            input_dim: 16,
            classes: 4,
            ln_eps: 1e-5,
        }
    }
}

impl BackboneSection {
    pub fn to_spec(&self) -> Result<BackboneSpec> {
        let spec = BackboneSpec {
            layers: self.layers,
            e_max: self.e_max,
            d_head: self.d_head,
            e_min: self.e_min,
            h_min: self.h_min,
            r_min: self.r_min,
            r_max: self.r_max,
            r_step: self.r_step,
            tokens: self.tokens,
            input_dim: self.input_dim,
            classes: self.classes,
            ln_eps: self.ln_eps,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Idx,
}

/// Synthetic blobs derive their shape (classes, token count, feature width)
/// from the backbone section; IDX loading checks its geometry against the
/// backbone at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Total samples before the train/validation split (blobs only).
    pub samples: usize,
    /// Jitter scale around each class centroid (blobs only).
    pub noise: f64,
    /// Dataset generation seed, independent of the training seed.
    pub seed: u64,
    pub val_fraction: f64,
    /// IDX image/label files (idx only).
    pub images: String,
    pub labels: String,
    /// Square patch side; tokens become (side/patch)^2 (idx only).
    pub patch: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Blobs,
            samples: 512,
            noise: 1.0,
            seed: 9,
            val_fraction: 0.25,
            images: String::new(),
            labels: String::new(),
            patch: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = AdamwSettings::default();
        OptimizerSection {
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
        }
    }
}

impl OptimizerSection {
    pub fn to_settings(&self) -> AdamwSettings {
        AdamwSettings {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RearrangeSection {
    /// Training samples scored when ranking channels, units, and heads.
    pub importance_samples: usize,
}

impl Default for RearrangeSection {
    fn default() -> Self {
        RearrangeSection {
            importance_samples: 64,
        }
    }
}

/// Per-stage optimizer shape: warm-up then cosine decay from `peak_lr`
/// to `floor_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: usize,
}

impl Default for StageSection {
    fn default() -> Self {
        StageSection {
            steps: 400,
            batch_size: 32,
            peak_lr: 1e-3,
            floor_lr: 1e-4,
            warmup_steps: 40,
        }
    }
}

impl StageSection {
    pub fn to_train_settings(&self, optimizer: &OptimizerSection) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            floor_lr: self.floor_lr,
            warmup_steps: self.warmup_steps,
            optimizer: optimizer.to_settings(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    /// Evenly spaced lower-bound expansions over the stage.
    pub expansions: usize,
    #[serde(flatten)]
    pub stage: StageSection,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        CurriculumSection {
            expansions: 3,
            stage: StageSection {
                steps: 600,
                batch_size: 32,
                peak_lr: 1e-3,
                floor_lr: 1e-4,
                warmup_steps: 60,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub population: usize,
    pub generations: usize,
    pub crossover_p: f64,
    /// Expected bit flips per offspring.
    pub mutation_p: f64,
    pub partitions: usize,
    pub min_gap: f64,
    pub eval_batch: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchSettings::default();
        SearchSection {
            population: 32,
            generations: 24,
            crossover_p: d.crossover_p,
            mutation_p: d.mutation_p,
            partitions: d.partitions,
            min_gap: d.min_gap,
            eval_batch: 64,
        }
    }
}

impl SearchSection {
    pub fn to_settings(&self) -> SearchSettings {
        SearchSettings {
            population: self.population,
            crossover_p: self.crossover_p,
            mutation_p: self.mutation_p,
            generations: self.generations,
            partitions: self.partitions,
            min_gap: self.min_gap,
            eval_batch: self.eval_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSection {
    pub hidden: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub delta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub imitation_steps: usize,
    pub joint_steps: usize,
    pub batch_size: usize,
    pub backbone_lr: f64,
    pub router_lr_factor: f64,
}

impl Default for RouterSection {
    fn default() -> Self {
        let d = RouterHyper::default();
        RouterSection {
            hidden: d.hidden,
            tau_start: d.tau_start,
            tau_end: d.tau_end,
            delta: d.delta,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            imitation_steps: 800,
            joint_steps: 400,
            batch_size: 32,
            backbone_lr: 1e-4,
            router_lr_factor: d.router_lr_factor,
        }
    }
}

impl RouterSection {
    pub fn to_hyper(&self, optimizer: &OptimizerSection) -> RouterHyper {
        RouterHyper {
            hidden: self.hidden,
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            delta: self.delta,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            imitation_steps: self.imitation_steps,
            joint_steps: self.joint_steps,
            batch_size: self.batch_size,
            backbone_lr: self.backbone_lr,
            router_lr_factor: self.router_lr_factor,
            optimizer: optimizer.to_settings(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Normalized compute budgets fed to the router.
    pub budgets: Vec<f64>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            budgets: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: String,
    /// Master seed; stage seeds are derived from it. The CLI `--seed`
    /// flag overrides this field.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: "runs/demo".into(),
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The fully-validated backbone description.
    pub fn spec(&self) -> Result<BackboneSpec> {
        self.backbone.to_spec()
    }

    /// Stage-0 schedule: every step samples the maximal model.
    pub fn stage0_schedule(&self, spec: &BackboneSpec) -> CurriculumSchedule {
        CurriculumSchedule::constant(self.stage0.steps, spec)
    }

    /// Stage-1 schedule: evenly spaced expansions opening the full space.
    pub fn curriculum_schedule(&self, spec: &BackboneSpec) -> Result<CurriculumSchedule> {
        Ok(CurriculumSchedule::uniform_opening(
            self.curriculum.stage.steps,
            self.curriculum.expansions,
            spec,
        )?)
    }

    fn check_stage(name: &str, s: &StageSection) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(format!("{name}: {msg}")));
        if s.steps == 0 {
            return bad("steps must be positive".into());
        }
        if s.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(s.peak_lr > 0.0 && s.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", s.peak_lr));
        }
        if !(s.floor_lr >= 0.0 && s.floor_lr <= s.peak_lr) {
            return bad(format!(
                "floor_lr {} must lie in [0, peak_lr {}]",
                s.floor_lr, s.peak_lr
            ));
        }
        if s.warmup_steps >= s.steps {
            return bad(format!(
                "warmup_steps {} must be shorter than the stage ({} steps)",
                s.warmup_steps, s.steps
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.backbone.to_spec()?;

        match self.dataset.kind {
            DatasetKind::Blobs => {
                if self.dataset.samples < 2 {
                    return Err(CliError::Config(format!(
                        "dataset: {} samples cannot form a train/validation split",
                        self.dataset.samples
                    )));
                }
                if !(self.dataset.noise >= 0.0 && self.dataset.noise.is_finite()) {
                    return Err(CliError::Config(format!(
                        "dataset: noise {} must be a finite non-negative scale",
                        self.dataset.noise
                    )));
                }
            }
            DatasetKind::Idx => {
                if self.dataset.images.is_empty() || self.dataset.labels.is_empty() {
                    return Err(CliError::Config(
                        "dataset: idx kind needs both images and labels paths".into(),
                    ));
                }
                if self.dataset.patch == 0 {
                    return Err(CliError::Config("dataset: patch must be positive".into()));
                }
            }
        }
        if !(self.dataset.val_fraction > 0.0 && self.dataset.val_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "dataset: val_fraction {} must lie strictly between 0 and 1",
                self.dataset.val_fraction
            )));
        }

        for (b, name) in [
            (self.optimizer.beta1, "beta1"),
            (self.optimizer.beta2, "beta2"),
        ] {
            if !(b >= 0.0 && b < 1.0) {
                return Err(CliError::Config(format!(
                    "optimizer: {name} {b} must lie in [0, 1)"
                )));
            }
        }
        if !(self.optimizer.eps > 0.0) {
            return Err(CliError::Config(format!(
                "optimizer: eps {} must be positive",
                self.optimizer.eps
            )));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(CliError::Config(format!(
                "optimizer: weight_decay {} must be non-negative",
                self.optimizer.weight_decay
            )));
        }

        Self::check_stage("stage0", &self.stage0)?;
        Self::check_stage("curriculum", &self.curriculum.stage)?;
        if self.rearrange.importance_samples == 0 {
            return Err(CliError::Config(
                "rearrange: importance_samples must be positive".into(),
            ));
        }
        if self.dataset.kind == DatasetKind::Blobs {
            let train = self.dataset.samples
                - ((self.dataset.samples as f64 * self.dataset.val_fraction).round() as usize)
                    .clamp(1, self.dataset.samples.saturating_sub(1).max(1));
            if self.rearrange.importance_samples > train {
                return Err(CliError::Config(format!(
                    "rearrange: importance_samples {} exceeds the {} training samples",
                    self.rearrange.importance_samples, train
                )));
            }
        }
        // Surfaces expansion-divisibility problems at load time.
        self.curriculum_schedule(&spec)?;

        self.search.to_settings().validate()?;

        let r = &self.router;
        if r.hidden == 0 {
            return Err(CliError::Config("router: hidden must be positive".into()));
        }
        if !(r.tau_end > 0.0 && r.tau_start >= r.tau_end) {
            return Err(CliError::Config(format!(
                "router: temperature must decay, got tau_start {} -> tau_end {}",
                r.tau_start, r.tau_end
            )));
        }
        if !(r.delta >= 0.0 && r.delta < 1.0) {
            return Err(CliError::Config(format!(
                "router: threshold delta {} must lie in [0, 1)",
                r.delta
            )));
        }
        if !(r.lambda1 >= 0.0 && r.lambda2 >= 0.0) {
            return Err(CliError::Config(format!(
                "router: penalty weights must be non-negative, got {} and {}",
                r.lambda1, r.lambda2
            )));
        }
        if r.imitation_steps + r.joint_steps == 0 {
            return Err(CliError::Config(
                "router: imitation_steps + joint_steps must be positive".into(),
            ));
        }
        if r.batch_size == 0 {
            return Err(CliError::Config("router: batch_size must be positive".into()));
        }
        if !(r.backbone_lr > 0.0 && r.router_lr_factor > 0.0) {
            return Err(CliError::Config(format!(
                "router: learning rates must be positive, got backbone_lr {} x factor {}",
                r.backbone_lr, r.router_lr_factor
            )));
        }

        if self.eval.budgets.is_empty() {
            return Err(CliError::Config("eval: budgets must be non-empty".into()));
        }
        for &b in &self.eval.budgets {
            if !(b.is_finite() && (0.0..=1.0).contains(&b)) {
                return Err(CliError::Config(format!(
                    "eval: budget {b} must lie in [0, 1]"
                )));
            }
        }
        if self.eval.batch_size == 0 {
            return Err(CliError::Config("eval: batch_size must be positive".into()));
        }

        if self.run.out_dir.is_empty() {
            return Err(CliError::Config("run: out_dir must be non-empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_inherit_defaults() {
        let cfg: RunConfig = toml::from_str(
            "[run]\nseed = 99\n\n[backbone]\nlayers = 2\ne_min = 32\n",
        )
        .unwrap();
        assert_eq!(cfg.run.seed, 99);
        assert_eq!(cfg.backbone.layers, 2);
        assert_eq!(cfg.backbone.e_min, 32);
        assert_eq!(cfg.backbone.e_max, BackboneSection::default().e_max);
        assert_eq!(cfg.search, SearchSection::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = toml::from_str::<RunConfig>("[backbone]\nlayerz = 3\n").unwrap_err();
        assert!(err.to_string().contains("layerz"), "{err}");
    }

    /// The ≥10-case rejection table: each entry is a mutation of the valid
    /// default document plus a fragment the error message must mention.
    #[test]
    fn validation_rejects_each_inconsistent_combination() {
        let cases: Vec<(&str, Box<dyn Fn(&mut RunConfig)>, &str)> = vec![
            (
                "embedding floor above ceiling",
                Box::new(|c| c.backbone.e_min = 128),
                "e_min",
            ),
            (
                "embedding floor off the head grid",
                Box::new(|c| c.backbone.e_min = 12),
                "d_head",
            ),
            (
                "ratio step incompatible with head width",
                Box::new(|c| {
                    c.backbone.r_step = 0.3;
                    c.backbone.r_min = 0.6;
                    c.backbone.r_max = 1.2;
                }),
                "step",
            ),
            (
                "curriculum expansions not dividing the spans",
                Box::new(|c| c.curriculum.expansions = 5),
                "expansions",
            ),
            (
                "curriculum shorter than its expansion count",
                Box::new(|c| c.curriculum.stage.steps = 2),
                "steps",
            ),
            (
                "zero stage-0 batch",
                Box::new(|c| c.stage0.batch_size = 0),
                "batch_size",
            ),
            (
                "warm-up longer than the stage",
                Box::new(|c| c.stage0.warmup_steps = 400),
                "warmup",
            ),
            (
                "learning-rate floor above the peak",
                Box::new(|c| c.curriculum.stage.floor_lr = 1.0),
                "floor_lr",
            ),
            (
                "single-sample dataset",
                Box::new(|c| c.dataset.samples = 1),
                "samples",
            ),
            (
                "validation fraction of one",
                Box::new(|c| c.dataset.val_fraction = 1.0),
                "val_fraction",
            ),
            (
                "idx dataset without file paths",
                Box::new(|c| c.dataset.kind = DatasetKind::Idx),
                "paths",
            ),
            (
                "zero importance samples",
                Box::new(|c| c.rearrange.importance_samples = 0),
                "importance_samples",
            ),
            (
                "importance samples larger than the training split",
                Box::new(|c| c.rearrange.importance_samples = 100_000),
                "exceeds",
            ),
            (
                "empty search population",
                Box::new(|c| c.search.population = 0),
                "population",
            ),
            (
                "crossover probability above one",
                Box::new(|c| c.search.crossover_p = 1.5),
                "crossover",
            ),
            (
                "temperature rising instead of decaying",
                Box::new(|c| {
                    c.router.tau_start = 0.1;
                    c.router.tau_end = 0.9;
                }),
                "tau",
            ),
            (
                "gate threshold of one",
                Box::new(|c| c.router.delta = 1.0),
                "delta",
            ),
            (
                "router with no training steps",
                Box::new(|c| {
                    c.router.imitation_steps = 0;
                    c.router.joint_steps = 0;
                }),
                "steps",
            ),
            (
                "negative constraint weight",
                Box::new(|c| c.router.lambda1 = -1.0),
                "non-negative",
            ),
            (
                "momentum coefficient of one",
                Box::new(|c| c.optimizer.beta1 = 1.0),
                "beta1",
            ),
            (
                "out-of-range eval budget",
                Box::new(|c| c.eval.budgets = vec![0.5, 1.2]),
                "budget",
            ),
            (
                "empty output directory",
                Box::new(|c| c.run.out_dir = String::new()),
                "out_dir",
            ),
        ];
        assert!(cases.len() >= 10);
        for (what, mutate, needle) in cases {
            let mut cfg = RunConfig::default();
            mutate(&mut cfg);
            let err = cfg
                .validate()
                .map(|_| panic!("{what}: expected rejection"))
                .unwrap_err();
            assert_eq!(err.exit_code(), 2, "{what}: wrong exit class");
            let msg = err.to_string();
            assert!(
                msg.contains(needle),
                "{what}: message {msg:?} lacks {needle:?}"
            );
        }
    }

    #[test]
    fn schedules_and_settings_convert_faithfully() {
        let cfg = RunConfig::default();
        let spec = cfg.spec().unwrap();
        let s0 = cfg.stage0_schedule(&spec);
        assert_eq!(s0.total_steps, cfg.stage0.steps);
        assert!(s0.expansion_steps.is_empty());
        let s1 = cfg.curriculum_schedule(&spec).unwrap();
        assert_eq!(s1.total_steps, cfg.curriculum.stage.steps);
        assert_eq!(s1.expansion_steps.len(), cfg.curriculum.expansions);
        assert_eq!(s1.floor_e, spec.e_min);
        assert_eq!(s1.floor_h, spec.h_min);
        assert!((s1.floor_r - spec.r_min).abs() < 1e-12);

        let ts = cfg.stage0.to_train_settings(&cfg.optimizer);
        assert_eq!(ts.batch_size, cfg.stage0.batch_size);
        assert_eq!(ts.optimizer.beta1, cfg.optimizer.beta1);
        let hyper = cfg.router.to_hyper(&cfg.optimizer);
        assert_eq!(hyper.hidden, cfg.router.hidden);
        assert_eq!(hyper.optimizer.beta2, cfg.optimizer.beta2);
        let ss = cfg.search.to_settings();
        assert_eq!(ss.population, cfg.search.population);
    }
}
