//! Ablation driver: short distillation runs per arm and seed, compared on
//! seed-averaged zero-shot metrics.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{Result, VlkdError};
use crate::student::Student;
use crate::teacher::Teacher;
use crate::trainloop::{evaluate, run_distillation, Corpus, EvalSets, MetricsLog, RunLimits};
use crate::vlkd::Objective;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub disable: Vec<Objective>,
    pub data_fraction: f64,
    pub unfreeze_teacher: bool,
}

impl Arm {
    fn new(name: &str, disable: &[Objective], data_fraction: f64, unfreeze_teacher: bool) -> Self {
        Arm {
            name: name.into(),
            disable: disable.to_vec(),
            data_fraction,
            unfreeze_teacher,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.disable.contains(&Objective::Icti) {
            return Err(VlkdError::Config {
                key: format!("ablation arm `{}`", self.name),
                detail: "icti cannot be disabled".into(),
            });
        }
        if self.unfreeze_teacher && !self.disable.is_empty() {
            return Err(VlkdError::Config {
                key: format!("ablation arm `{}`", self.name),
                detail: "the unfrozen teacher is a contrast arm of the full objective only".into(),
            });
        }
        Ok(())
    }
}

pub const FULL: &str = "full";
pub const NO_TTDM: &str = "no_ttdm";
pub const NO_ITCL: &str = "no_itcl";
pub const NO_BOTH: &str = "no_ttdm_itcl";
pub const UNFROZEN: &str = "unfrozen_teacher";

pub fn data_arm_name(fraction: f64) -> String {
    format!("data_{fraction:.2}")
}

/// Objective arms, one arm per reduced data fraction, and the unfrozen
/// teacher contrast.
pub fn standard_arms(cfg: &RunConfig) -> Vec<Arm> {
    let mut arms = vec![
        Arm::new(FULL, &[], 1.0, false),
        Arm::new(NO_TTDM, &[Objective::Ttdm], 1.0, false),
        Arm::new(NO_ITCL, &[Objective::Itcl], 1.0, false),
        Arm::new(NO_BOTH, &[Objective::Ttdm, Objective::Itcl], 1.0, false),
    ];
    for &f in cfg.ablation.data_fractions.iter().filter(|f| **f < 1.0) {
        arms.push(Arm::new(&data_arm_name(f), &[], f, false));
    }
    arms.push(Arm::new(UNFROZEN, &[], 1.0, true));
    arms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub steps: usize,
    pub vqa_accuracy: f64,
    pub caption_f1: f64,
    pub retrieval_r1: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub runs: Vec<SeedRun>,
    pub mean_vqa_accuracy: f64,
    pub mean_caption_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub metric: String,
    pub higher: String,
    pub lower: String,
    pub higher_mean: f64,
    pub lower_mean: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: Value,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
    pub orderings: Vec<OrderingCheck>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm.name == name)
    }

    /// Whether every ordering on `metric` holds.
    pub fn all_hold(&self, metric: &str) -> bool {
        self.orderings.iter().filter(|o| o.metric == metric).all(|o| o.holds)
    }

    /// Aligned plain-text rendering of the comparison.
    pub fn table(&self) -> String {
        let width = self.arms.iter().map(|a| a.arm.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>8}  {:>10}  {:>6}\n", "arm", "vqa_acc", "caption_f1", "seeds");
        for a in &self.arms {
            out += &format!(
                "{:<width$}  {:>8.4}  {:>10.4}  {:>6}\n",
                a.arm.name,
                a.mean_vqa_accuracy,
                a.mean_caption_f1,
                a.runs.len()
            );
        }
        out += "\n";
        for o in &self.orderings {
            out += &format!(
                "{:<11} {} ({:.4}) >= {} ({:.4}): {}\n",
                o.metric,
                o.higher,
                o.higher_mean,
                o.lower,
                o.lower_mean,
                if o.holds { "holds" } else { "violated" }
            );
        }
        out
    }
}

fn orderings(cfg: &RunConfig, arms: &[ArmResult]) -> Vec<OrderingCheck> {
    let mut pairs: Vec<(String, String)> = vec![
        (FULL.into(), NO_TTDM.into()),
        (FULL.into(), NO_ITCL.into()),
        (NO_TTDM.into(), NO_BOTH.into()),
        (NO_ITCL.into(), NO_BOTH.into()),
    ];
    let mut chain = vec![FULL.to_string()];
    let mut fractions: Vec<f64> = cfg.ablation.data_fractions.iter().copied().filter(|f| *f < 1.0).collect();
    fractions.sort_by(|a, b| b.total_cmp(a));
    chain.extend(fractions.into_iter().map(data_arm_name));
    pairs.extend(chain.windows(2).map(|w| (w[0].clone(), w[1].clone())));
    pairs.push((FULL.into(), UNFROZEN.into()));
    let find = |n: &str| arms.iter().find(|a| a.arm.name == n);
    let mut out = vec![];
    for metric in ["vqa_accuracy", "caption_f1"] {
        for (hi, lo) in &pairs {
            let (Some(h), Some(l)) = (find(hi), find(lo)) else { continue };
            let pick = |a: &ArmResult| if metric == "vqa_accuracy" { a.mean_vqa_accuracy } else { a.mean_caption_f1 };
            out.push(OrderingCheck {
                metric: metric.into(),
                higher: hi.clone(),
                lower: lo.clone(),
                higher_mean: pick(h),
                lower_mean: pick(l),
                holds: pick(h) >= pick(l),
            });
        }
    }
    out
}

/// Runs every arm for every ablation seed from the same pretrained teacher
/// and student. Each arm is a distillation run of `ablation.epochs` epochs
/// with a single evaluation at the end. `progress` receives one line per
/// finished run.
pub fn run_ablation(
    cfg: &RunConfig,
    corpus: &Corpus,
    teacher: &Teacher<f32>,
    student: &Student<f32>,
    arms: &[Arm],
    progress: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    for a in arms {
        a.validate()?;
    }
    let mut results: Vec<ArmResult> = arms
        .iter()
        .map(|a| ArmResult {
            arm: a.clone(),
            runs: vec![],
            mean_vqa_accuracy: 0.0,
            mean_caption_f1: 0.0,
        })
        .collect();
    for &seed in &cfg.ablation.seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        base.distill.optim.epochs = cfg.ablation.epochs;
        base.distill.eval_every_fraction = 1.0;
        let sets = EvalSets::build(&base, corpus)?;
        for r in results.iter_mut() {
            let mut c = base.clone();
            c.distill.disable = r.arm.disable.clone();
            c.distill.data_fraction = r.arm.data_fraction;
            c.distill.unfreeze_teacher = r.arm.unfreeze_teacher;
            c.validate()?;
            let mut log = MetricsLog::memory();
            let (bundle, report) =
                run_distillation(&c, corpus, &sets, teacher.clone(), student.clone(), &mut log, RunLimits::default())?;
            let eval = evaluate(&c, &bundle, &corpus.vocab, &sets, true)?;
            let run = SeedRun {
                seed,
                steps: report.steps,
                vqa_accuracy: eval.vqa.accuracy,
                caption_f1: eval.caption.as_ref().map_or(0.0, |c| c.f1),
                retrieval_r1: eval.retrieval.r1.image_to_text,
                perplexity: eval.perplexity,
            };
            progress(&format!(
                "{} seed {seed}: vqa {:.4} caption_f1 {:.4} r1 {:.2}",
                r.arm.name, run.vqa_accuracy, run.caption_f1, run.retrieval_r1
            ));
            r.runs.push(run);
        }
    }
    for r in results.iter_mut() {
        let n = r.runs.len().max(1) as f64;
        r.mean_vqa_accuracy = r.runs.iter().map(|s| s.vqa_accuracy).sum::<f64>() / n;
        r.mean_caption_f1 = r.runs.iter().map(|s| s.caption_f1).sum::<f64>() / n;
    }
    Ok(AblationReport {
        config: serde_json::to_value(cfg)?,
        seeds: cfg.ablation.seeds.clone(),
        orderings: orderings(cfg, &results),
        arms: results,
    })
}
