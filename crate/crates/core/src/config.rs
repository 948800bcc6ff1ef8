//! Run configuration: every tunable with its documented default.
//!
//! All sections reject unknown keys. `validate` checks cross-field
//! invariants and names the offending key.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VlkdError};
use crate::student::StudentConfig;
use crate::teacher::TeacherConfig;
use crate::vlkd::Objective;

fn bad<T>(key: &str, detail: impl Into<String>) -> Result<T> {
    Err(VlkdError::Config {
        key: key.into(),
        detail: detail.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of training pairs.
    pub pairs: usize,
    /// Number of held-out pairs (distinct seed stream).
    pub heldout: usize,
    pub grid: usize,
    pub d_img: usize,
    pub noise_sigma: f64,
    pub corruption_rate: f64,
    pub span_lambda: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pairs: 2000,
            heldout: 200,
            grid: 3,
            d_img: 16,
            noise_sigma: 0.1,
            corruption_rate: 0.15,
            span_lambda: 3.0,
        }
    }
}

/// Optimizer and schedule for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::distill()
    }
}

impl OptimConfig {
    /// Distillation recipe.
    pub fn distill() -> Self {
        OptimConfig {
            base_lr: 2.4e-4,
            warmup_fraction: 0.02,
            epochs: 10,
            batch_size: 32,
            grad_clip: 3.0,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }

    /// Generative finetuning recipe; warmup spans the first epoch.
    pub fn finetune() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            warmup_fraction: 0.1,
            epochs: 10,
            batch_size: 32,
            grad_clip: 5.0,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    /// Toy-model pretraining from scratch (teacher and student).
    pub fn pretrain(epochs: usize) -> Self {
        OptimConfig {
            base_lr: 1e-3,
            warmup_fraction: 0.05,
            epochs,
            batch_size: 32,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let key = |k: &str| format!("{section}.{k}");
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(&key("warmup_fraction"), format!("{} is outside (0, 1)", self.warmup_fraction));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(&key("base_lr"), "must be positive");
        }
        if self.epochs == 0 {
            return bad(&key("epochs"), "must be positive");
        }
        if self.batch_size == 0 {
            return bad(&key("batch_size"), "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad(&key("grad_clip"), "must be positive");
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(&key(k), format!("{v} is outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(&key("eps"), "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad(&key("weight_decay"), "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub optim: OptimConfig,
    pub gamma: f64,
    pub disable: Vec<Objective>,
    /// Contrast arm only: let gradients reach the teacher and update it.
    pub unfreeze_teacher: bool,
    /// Fraction of the training pairs used (data-size ablation).
    pub data_fraction: f64,
    /// Evaluate every this fraction of total steps.
    pub eval_every_fraction: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            optim: OptimConfig::distill(),
            gamma: 1000.0,
            disable: vec![],
            unfreeze_teacher: false,
            data_fraction: 1.0,
            eval_every_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub optim: OptimConfig,
    pub label_smoothing: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            optim: OptimConfig::finetune(),
            label_smoothing: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub caption_masks: usize,
    pub vqa_masks: usize,
    pub caption_strategy: Strategy,
    pub caption_beam_size: usize,
    pub vqa_strategy: Strategy,
    pub vqa_beam_size: usize,
    /// Decoding budget beyond the prompt length.
    pub extra_length: usize,
    pub length_bonus: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            caption_masks: 6,
            vqa_masks: 2,
            caption_strategy: Strategy::Beam,
            caption_beam_size: 6,
            vqa_strategy: Strategy::Greedy,
            vqa_beam_size: 1,
            extra_length: 10,
            length_bonus: 0.0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.caption_masks == 0 {
            return bad("generation.caption_masks", "must be at least 1");
        }
        if self.vqa_masks == 0 {
            return bad("generation.vqa_masks", "must be at least 1");
        }
        if self.caption_beam_size == 0 {
            return bad("generation.caption_beam_size", "must be at least 1");
        }
        if self.vqa_beam_size == 0 {
            return bad("generation.vqa_beam_size", "must be at least 1");
        }
        if self.extra_length == 0 {
            return bad("generation.extra_length", "must be at least 1");
        }
        Ok(())
    }
}

/// Evaluation sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub retrieval_candidates: usize,
    pub vqa_questions: usize,
    pub captions: usize,
    pub perplexity_sentences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            retrieval_candidates: 100,
            vqa_questions: 200,
            captions: 100,
            perplexity_sentences: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Training epochs per arm (arms are short runs of the distillation recipe).
    pub epochs: usize,
    pub data_fractions: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![11, 22, 33],
            epochs: 3,
            data_fractions: vec![1.0, 1.0 / 3.0, 0.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub teacher_pretrain: OptimConfig,
    pub student_pretrain: OptimConfig,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            teacher_pretrain: OptimConfig::pretrain(30),
            student_pretrain: OptimConfig::pretrain(3),
            distill: DistillConfig::default(),
            finetune: FinetuneConfig::default(),
            generation: GenerationConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    /// The calibrated desk-scale run used by the acceptance suite: the full
    /// patch sequence as decoder context and a gentler distillation rate.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.teacher.visual_context_mode = crate::teacher::VisualContextMode::FullSequence;
        cfg.distill.optim.base_lr = 5e-5;
        cfg
    }

    /// Full-size batch sizes (distillation 4608, VQA finetuning 72). Far
    /// beyond desk scale; kept as a reference point.
    pub fn full_recipe() -> Self {
        let mut cfg = RunConfig::default();
        cfg.distill.optim.batch_size = 4608;
        cfg.finetune.optim.batch_size = 72;
        cfg
    }

    /// Named preset lookup for the command line.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(RunConfig::default()),
            "desk" => Ok(RunConfig::desk()),
            "full" => Ok(RunConfig::full_recipe()),
            other => bad("preset", format!("unknown preset `{other}` (expected default, desk or full)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        if self.teacher.grid != self.data.grid {
            return bad("teacher.grid", "must equal data.grid");
        }
        if self.teacher.d_img != self.data.d_img {
            return bad("teacher.d_img", "must equal data.d_img");
        }
        if self.teacher.d1 > self.student.d2 {
            return bad("teacher.d1", "the projection stack needs d1 <= student.d2");
        }
        if self.teacher.vocab_size != self.student.vocab_size {
            return bad("student.vocab_size", "teacher and student share one vocabulary");
        }
        if self.data.pairs == 0 {
            return bad("data.pairs", "must be positive");
        }
        if !(0.0..1.0).contains(&self.data.corruption_rate) {
            return bad("data.corruption_rate", "must lie in [0, 1)");
        }
        if !(self.data.span_lambda > 0.0) {
            return bad("data.span_lambda", "must be positive");
        }
        if !(self.data.noise_sigma >= 0.0) {
            return bad("data.noise_sigma", "must be non-negative");
        }
        self.teacher_pretrain.validate("teacher_pretrain")?;
        self.student_pretrain.validate("student_pretrain")?;
        self.distill.optim.validate("distill.optim")?;
        self.finetune.optim.validate("finetune.optim")?;
        if self.distill.disable.contains(&Objective::Icti) {
            return bad("distill.disable", "icti cannot be disabled");
        }
        if !(self.distill.gamma >= 0.0 && self.distill.gamma.is_finite()) {
            return bad("distill.gamma", "must be finite and non-negative");
        }
        if !(self.distill.data_fraction > 0.0 && self.distill.data_fraction <= 1.0) {
            return bad("distill.data_fraction", "must lie in (0, 1]");
        }
        if !(self.distill.eval_every_fraction > 0.0 && self.distill.eval_every_fraction <= 1.0) {
            return bad("distill.eval_every_fraction", "must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.finetune.label_smoothing) {
            return bad("finetune.label_smoothing", "must lie in [0, 1)");
        }
        self.generation.validate()?;
        if self.ablation.seeds.is_empty() {
            return bad("ablation.seeds", "needs at least one seed");
        }
        if self.ablation.data_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("ablation.data_fractions", "each must lie in (0, 1]");
        }
        Ok(())
    }
}
