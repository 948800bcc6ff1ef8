//! Training drivers: toy teacher and student pretraining, distillation and
//! generative finetuning, plus the evaluation harness they share.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use numcore::{ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Result, VlkdError};
use crate::inference::{
    eval_metrics, infill_perplexity, retrieval_eval, teacher_retrieval, zero_shot_caption, zero_shot_vqa, Bundle,
    RetrievalReport,
};
use crate::optim::{clip_grad_norm, lr_at, AdamW, AdamWParams};
use crate::student::{Context, Student};
use crate::teacher::Teacher;
use crate::textdata::{
    build_prompt, corrupt_spans, distill_sentence, generate_dataset, generate_heldout, noise_seed, qa_sentence,
    render_patches, splitmix64, student_corpus, CorruptionOutcome, Pair, PatchSequence, PromptTask, TokenKind,
    TokenSequence, Vocab, SHAPES,
};
use crate::vlkd::{vlkd_loss, LossBreakdown, LossSettings, Projections, VlkdBatch};

/// Noise stream used for every evaluation render.
pub const EVAL_EPOCH: u64 = u64::MAX;

/// Independent RNG per (run seed, purpose, index).
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let label = purpose.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(label ^ splitmix64(index))))
}

fn derive(seed: u64, purpose: &str) -> u64 {
    stream(seed, purpose, 0).random()
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<Pair>,
    pub heldout: Vec<Pair>,
}

impl Corpus {
    pub fn generate(cfg: &RunConfig) -> Self {
        Corpus {
            vocab: crate::textdata::synthetic_vocab(),
            train: generate_dataset(cfg.data.pairs, cfg.seed, cfg.data.grid),
            heldout: generate_heldout(cfg.data.heldout, cfg.seed, cfg.data.grid),
        }
    }
}

fn render(cfg: &RunConfig, pair: &Pair, epoch: u64) -> PatchSequence {
    render_patches(&pair.scene, noise_seed(pair.scene.seed, epoch), cfg.data.noise_sigma, cfg.data.d_img)
}

/// Append-only JSON Lines sink; records are also kept in memory.
#[derive(Debug, Default)]
pub struct MetricsLog {
    writer: Option<BufWriter<File>>,
    pub records: Vec<Value>,
}

impl MetricsLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(MetricsLog {
            writer: Some(BufWriter::new(File::create(path)?)),
            records: vec![],
        })
    }

    pub fn push(&mut self, record: Value) -> Result<()> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(record);
        Ok(())
    }
}

/// Clip, update and clear gradients. Returns the pre-clip norm.
fn apply_update(stores: &mut [&mut ParamStore<f32>], opt: &mut AdamW<f32>, clip: f64, lr: f64) -> Result<f64> {
    let norm = clip_grad_norm(stores, clip);
    opt.step(stores, lr)?;
    for s in stores.iter_mut() {
        s.zero_grads();
    }
    Ok(norm)
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(VlkdError::Diverged {
            step,
            detail: format!("{what} is {v}"),
        })
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn shuffled(n: usize, seed: u64, purpose: &str, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, purpose, epoch));
    order
}

/// Held-out evaluation material, built once per run.
#[derive(Debug, Clone)]
pub struct EvalSets {
    pub retrieval_images: Vec<PatchSequence>,
    pub retrieval_captions: Vec<String>,
    pub retrieval_teacher: Vec<TokenSequence>,
    pub retrieval_student: Vec<TokenSequence>,
    pub vqa_images: Vec<PatchSequence>,
    pub vqa_questions: Vec<String>,
    pub vqa_answers: Vec<String>,
    /// Most frequent answer among the training questions.
    pub majority_answer: String,
    pub caption_images: Vec<PatchSequence>,
    pub caption_refs: Vec<String>,
    pub caption_shapes: Vec<Vec<String>>,
    pub perplexity: Vec<CorruptionOutcome>,
}

impl EvalSets {
    pub fn build(cfg: &RunConfig, corpus: &Corpus) -> Result<Self> {
        let vocab = &corpus.vocab;
        let mut seen = std::collections::BTreeSet::new();
        let unique: Vec<&Pair> = corpus
            .heldout
            .iter()
            .filter(|p| seen.insert(p.caption.clone()))
            .take(cfg.eval.retrieval_candidates)
            .collect();
        let mut answers: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &corpus.train {
            for q in &p.qa {
                *answers.entry(q.answer.as_str()).or_default() += 1;
            }
        }
        let majority_answer = answers
            .iter()
            .fold(("", 0), |best, (a, &c)| if c > best.1 { (a, c) } else { best })
            .0
            .to_string();
        let qa: Vec<(&Pair, &crate::textdata::QaItem)> = corpus
            .heldout
            .iter()
            .flat_map(|p| p.qa.iter().map(move |q| (p, q)))
            .take(cfg.eval.vqa_questions)
            .collect();
        let caps: Vec<&Pair> = corpus.heldout.iter().take(cfg.eval.captions).collect();
        let sentences = student_corpus(&corpus.heldout);
        let mut rng = stream(cfg.seed, "perplexity", 0);
        let perplexity = sentences
            .iter()
            .take(cfg.eval.perplexity_sentences)
            .map(|s| {
                let tok = vocab.tokenize(s, TokenKind::StudentText)?;
                corrupt_spans(&tok, cfg.data.corruption_rate, cfg.data.span_lambda, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(EvalSets {
            retrieval_images: unique.iter().map(|p| render(cfg, p, EVAL_EPOCH)).collect(),
            retrieval_captions: unique.iter().map(|p| p.caption.clone()).collect(),
            retrieval_teacher: unique
                .iter()
                .map(|p| vocab.tokenize(&p.caption, TokenKind::TeacherText))
                .collect::<Result<_>>()?,
            retrieval_student: unique
                .iter()
                .map(|p| vocab.tokenize(&distill_sentence(&p.caption), TokenKind::StudentText))
                .collect::<Result<_>>()?,
            vqa_images: qa.iter().map(|(p, _)| render(cfg, p, EVAL_EPOCH)).collect(),
            vqa_questions: qa.iter().map(|(_, q)| q.question.clone()).collect(),
            vqa_answers: qa.iter().map(|(_, q)| q.answer.clone()).collect(),
            majority_answer,
            caption_images: caps.iter().map(|p| render(cfg, p, EVAL_EPOCH)).collect(),
            caption_refs: caps.iter().map(|p| p.caption.clone()).collect(),
            caption_shapes: caps
                .iter()
                .map(|p| p.scene.objects().iter().map(|(_, c)| SHAPES[c.shape].to_string()).collect())
                .collect(),
            perplexity,
        })
    }
}

/// Question category from its leading words.
pub fn question_type(q: &str) -> &'static str {
    if q.starts_with("what color") {
        "color"
    } else if q.starts_with("what shape") {
        "shape"
    } else if q.starts_with("how many") {
        "count"
    } else if q.starts_with("is there") {
        "presence"
    } else {
        "other"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    pub n: usize,
    pub masks: usize,
    pub accuracy: f64,
    pub majority_answer: String,
    pub majority_baseline: f64,
    pub by_type: BTreeMap<String, f64>,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub n: usize,
    pub masks: usize,
    pub f1: f64,
    pub exact_match: f64,
    pub random_baseline_f1: f64,
    /// Fraction of captions naming at least one shape present in the scene.
    pub shape_hit_rate: f64,
    pub fallbacks: usize,
    pub samples: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: RetrievalReport,
    pub vqa: VqaReport,
    pub caption: Option<CaptionReport>,
    pub perplexity: f64,
}

pub fn eval_vqa(cfg: &RunConfig, b: &Bundle, vocab: &Vocab, sets: &EvalSets, masks: usize) -> Result<VqaReport> {
    let images: Vec<&PatchSequence> = sets.vqa_images.iter().collect();
    let questions: Vec<&str> = sets.vqa_questions.iter().map(String::as_str).collect();
    let out = zero_shot_vqa(b, vocab, &images, &questions, masks, &cfg.generation)?;
    let preds: Vec<String> = out.iter().map(|g| g.extracted.clone()).collect();
    let scores = eval_metrics(&preds, &sets.vqa_answers)?;
    let majority = vec![sets.majority_answer.clone(); preds.len()];
    let mut by_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((q, p), a) in sets.vqa_questions.iter().zip(&preds).zip(&sets.vqa_answers) {
        let e = by_type.entry(question_type(q).into()).or_default();
        e.0 += usize::from(crate::inference::exact_match(p, a));
        e.1 += 1;
    }
    Ok(VqaReport {
        n: preds.len(),
        masks,
        accuracy: scores.exact_match,
        majority_answer: sets.majority_answer.clone(),
        majority_baseline: eval_metrics(&majority, &sets.vqa_answers)?.exact_match,
        by_type: by_type.into_iter().map(|(k, (hit, n))| (k, hit as f64 / n as f64)).collect(),
        fallbacks: out.iter().filter(|g| g.fallback).count(),
    })
}

pub fn eval_captions(cfg: &RunConfig, b: &Bundle, vocab: &Vocab, sets: &EvalSets, masks: usize) -> Result<CaptionReport> {
    let images: Vec<&PatchSequence> = sets.caption_images.iter().collect();
    let out = zero_shot_caption(b, vocab, &images, masks, &cfg.generation)?;
    let preds: Vec<String> = out.iter().map(|g| g.extracted.clone()).collect();
    let scores = eval_metrics(&preds, &sets.caption_refs)?;
    let n = preds.len();
    let offset = if n > 1 { stream(cfg.seed, "random-caption", 0).random_range(1..n) } else { 0 };
    let shuffled: Vec<String> = (0..n).map(|i| sets.caption_refs[(i + offset) % n].clone()).collect();
    let hits = preds
        .iter()
        .zip(&sets.caption_shapes)
        .filter(|(p, shapes)| p.split_whitespace().any(|w| shapes.iter().any(|s| s == w)))
        .count();
    Ok(CaptionReport {
        n,
        masks,
        f1: scores.f1,
        exact_match: scores.exact_match,
        random_baseline_f1: eval_metrics(&shuffled, &sets.caption_refs)?.f1,
        shape_hit_rate: hits as f64 / n as f64,
        fallbacks: out.iter().filter(|g| g.fallback).count(),
        samples: preds.iter().zip(&sets.caption_refs).take(5).map(|(p, r)| (p.clone(), r.clone())).collect(),
    })
}

pub fn eval_retrieval(b: &Bundle, sets: &EvalSets) -> Result<RetrievalReport> {
    let images: Vec<&PatchSequence> = sets.retrieval_images.iter().collect();
    let sents: Vec<&TokenSequence> = sets.retrieval_student.iter().collect();
    retrieval_eval(b, &images, &sents, &sets.retrieval_captions)
}

/// Full evaluation; captions are optional because beam search dominates
/// the cost.
pub fn evaluate(cfg: &RunConfig, b: &Bundle, vocab: &Vocab, sets: &EvalSets, captions: bool) -> Result<EvalReport> {
    Ok(EvalReport {
        retrieval: eval_retrieval(b, sets)?,
        vqa: eval_vqa(cfg, b, vocab, sets, cfg.generation.vqa_masks)?,
        caption: if captions {
            Some(eval_captions(cfg, b, vocab, sets, cfg.generation.caption_masks)?)
        } else {
            None
        },
        perplexity: infill_perplexity(&b.student, &sets.perplexity)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub steps: usize,
    pub final_loss: f64,
    pub retrieval: RetrievalReport,
}

/// Contrastive pretraining of the toy teacher. The returned teacher is
/// frozen.
pub fn pretrain_teacher(cfg: &RunConfig, corpus: &Corpus, log: &mut MetricsLog) -> Result<(Teacher<f32>, TeacherReport)> {
    let oc = &cfg.teacher_pretrain;
    let mut teacher = Teacher::<f32>::new(cfg.teacher.clone(), derive(cfg.seed, "teacher-init"))?;
    let texts: Vec<TokenSequence> = corpus
        .train
        .iter()
        .map(|p| corpus.vocab.tokenize(&p.caption, TokenKind::TeacherText))
        .collect::<Result<_>>()?;
    let per_epoch = steps_per_epoch(corpus.train.len(), oc.batch_size);
    let total = per_epoch * oc.epochs;
    let mut opt = AdamW::new(AdamWParams::from(oc));
    let mut step = 0;
    let mut last = f64::NAN;
    for epoch in 0..oc.epochs as u64 {
        let order = shuffled(corpus.train.len(), cfg.seed, "teacher-order", epoch);
        for idx in order.chunks(oc.batch_size) {
            let images: Vec<PatchSequence> = idx.iter().map(|&i| render(cfg, &corpus.train[i], epoch)).collect();
            let img_refs: Vec<&PatchSequence> = images.iter().collect();
            let txt: Vec<&TokenSequence> = idx.iter().map(|&i| &texts[i]).collect();
            let mut t = Tape::new();
            let loss = teacher.contrastive_loss(&mut t, &img_refs, &txt)?;
            let value = t.scalar(loss)? as f64;
            check_finite(step, "teacher loss", value)?;
            t.backward(loss)?.accumulate_into(&mut teacher.store)?;
            step += 1;
            let lr = lr_at(step, total, oc.base_lr, oc.warmup_fraction);
            let grad_norm = apply_update(&mut [&mut teacher.store], &mut opt, oc.grad_clip, lr)?;
            log.push(json!({"step": step, "lr": lr, "loss": value, "tau": teacher.tau(), "grad_norm": grad_norm}))?;
            last = value;
        }
    }
    teacher.store.set_frozen(true);
    let sets = EvalSets::build(cfg, corpus)?;
    let images: Vec<&PatchSequence> = sets.retrieval_images.iter().collect();
    let texts: Vec<&TokenSequence> = sets.retrieval_teacher.iter().collect();
    let retrieval = teacher_retrieval(&teacher, &images, &texts, &sets.retrieval_captions)?;
    Ok((
        teacher,
        TeacherReport {
            steps: step,
            final_loss: last,
            retrieval,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentReport {
    pub steps: usize,
    /// Held-out infilling perplexity after each epoch.
    pub perplexity: Vec<f64>,
    /// Final held-out perplexity: the retention reference.
    pub p0: f64,
}

/// Text-only denoising pretraining of the toy student.
pub fn pretrain_student(cfg: &RunConfig, corpus: &Corpus, log: &mut MetricsLog) -> Result<(Student<f32>, StudentReport)> {
    let oc = &cfg.student_pretrain;
    let mut student = Student::<f32>::new(cfg.student.clone(), derive(cfg.seed, "student-init"))?;
    let sentences: Vec<TokenSequence> = student_corpus(&corpus.train)
        .iter()
        .map(|s| corpus.vocab.tokenize(s, TokenKind::StudentText))
        .collect::<Result<_>>()?;
    let sets = EvalSets::build(cfg, corpus)?;
    let per_epoch = steps_per_epoch(sentences.len(), oc.batch_size);
    let total = per_epoch * oc.epochs;
    let mut opt = AdamW::new(AdamWParams::from(oc));
    let mut step = 0;
    let mut perplexity = vec![];
    for epoch in 0..oc.epochs as u64 {
        let order = shuffled(sentences.len(), cfg.seed, "student-order", epoch);
        let mut rng = stream(cfg.seed, "student-corruption", epoch);
        for idx in order.chunks(oc.batch_size) {
            let outcomes = idx
                .iter()
                .map(|&i| corrupt_spans(&sentences[i], cfg.data.corruption_rate, cfg.data.span_lambda, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&CorruptionOutcome> = outcomes.iter().collect();
            let mut t = Tape::new();
            let loss = student.infill_loss(&mut t, &refs)?;
            let value = t.scalar(loss)? as f64;
            check_finite(step, "student loss", value)?;
            t.backward(loss)?.accumulate_into(&mut student.store)?;
            step += 1;
            let lr = lr_at(step, total, oc.base_lr, oc.warmup_fraction);
            let grad_norm = apply_update(&mut [&mut student.store], &mut opt, oc.grad_clip, lr)?;
            log.push(json!({"step": step, "lr": lr, "loss": value, "grad_norm": grad_norm}))?;
        }
        let ppl = infill_perplexity(&student, &sets.perplexity)?;
        log.push(json!({"epoch": epoch + 1, "heldout_perplexity": ppl}))?;
        perplexity.push(ppl);
    }
    let p0 = *perplexity.last().expect("at least one epoch");
    Ok((student, StudentReport { steps: step, perplexity, p0 }))
}

fn distill_batch(cfg: &RunConfig, vocab: &Vocab, pairs: &[&Pair], epoch: u64, rng: &mut ChaCha8Rng) -> Result<VlkdBatch> {
    let mut batch = VlkdBatch {
        images: Vec::with_capacity(pairs.len()),
        teacher_texts: Vec::with_capacity(pairs.len()),
        clean: Vec::with_capacity(pairs.len()),
        corrupted: Vec::with_capacity(pairs.len()),
    };
    for p in pairs {
        batch.images.push(render(cfg, p, epoch));
        batch.teacher_texts.push(vocab.tokenize(&p.caption, TokenKind::TeacherText)?);
        let clean = vocab.tokenize(&distill_sentence(&p.caption), TokenKind::StudentText)?;
        batch.corrupted.push(corrupt_spans(&clean, cfg.data.corruption_rate, cfg.data.span_lambda, rng)?);
        batch.clean.push(clean);
    }
    Ok(batch)
}

/// Nonzero gradient entries still present in a frozen store.
fn leaked_gradient(store: &ParamStore<f32>) -> Option<String> {
    store
        .iter()
        .find(|(_, p)| p.frozen && p.tensor.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0)))
        .map(|(_, p)| p.name.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub steps: usize,
    pub pairs_used: usize,
    pub first_losses: Vec<f64>,
    pub last_losses: Vec<f64>,
    pub retrieval_before: RetrievalReport,
    pub retrieval_after: RetrievalReport,
    pub teacher_fingerprint_before: u64,
    pub teacher_fingerprint_after: u64,
    /// Steps at which every teacher gradient was verified to be zero.
    pub teacher_grad_checks: usize,
    pub evals: Vec<Value>,
    pub final_breakdown: Option<LossBreakdown>,
}

impl DistillReport {
    pub fn initial_average(&self) -> f64 {
        mean(&self.first_losses)
    }

    pub fn final_average(&self) -> f64 {
        mean(&self.last_losses)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Caps a run at `max_steps` optimizer steps (used by quick checks); the
/// schedule is still laid out over the full run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunLimits {
    pub max_steps: Option<usize>,
}

/// The distillation loop.
///
/// Each epoch draws fresh span corruption and patch noise. The teacher is
/// passed to the optimizer with every other store so that a frozen parameter
/// receiving an update is caught; its fingerprint is compared at the end.
pub fn run_distillation(
    cfg: &RunConfig,
    corpus: &Corpus,
    sets: &EvalSets,
    teacher: Teacher<f32>,
    student: Student<f32>,
    log: &mut MetricsLog,
    limits: RunLimits,
) -> Result<(Bundle, DistillReport)> {
    let dc = &cfg.distill;
    let oc = &dc.optim;
    let mut teacher = teacher;
    if dc.unfreeze_teacher {
        teacher.store.set_frozen(false);
    } else if !teacher.store.all_frozen() {
        return Err(VlkdError::Invariant("distillation requires a frozen teacher".into()));
    }
    let proj = Projections::<f32>::init(cfg.teacher.d1, cfg.student.d2, derive(cfg.seed, "projections"))?;
    let mut b = Bundle {
        teacher,
        student,
        proj,
        mode: cfg.teacher.visual_context_mode,
    };
    let settings = LossSettings {
        gamma: dc.gamma,
        disable: dc.disable.iter().copied().collect(),
        mode: cfg.teacher.visual_context_mode,
        frozen_teacher: !dc.unfreeze_teacher,
    };
    let used = ((dc.data_fraction * corpus.train.len() as f64).ceil() as usize).clamp(1, corpus.train.len());
    let pairs: Vec<&Pair> = corpus.train[..used].iter().collect();
    let per_epoch = steps_per_epoch(used, oc.batch_size);
    let total = per_epoch * oc.epochs;
    let eval_every = ((dc.eval_every_fraction * total as f64).ceil() as usize).max(1);
    let fingerprint_before = b.teacher.store.fingerprint();
    let retrieval_before = eval_retrieval(&b, sets)?;
    let mut opt = AdamW::new(AdamWParams::from(oc));
    let mut losses = vec![];
    let mut evals = vec![];
    let mut grad_checks = 0;
    let mut step = 0;
    let mut last_breakdown = None;
    'outer: for epoch in 0..oc.epochs as u64 {
        let order = shuffled(used, cfg.seed, "distill-order", epoch);
        let mut rng = stream(cfg.seed, "distill-corruption", epoch);
        for idx in order.chunks(oc.batch_size) {
            if limits.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let chosen: Vec<&Pair> = idx.iter().map(|&i| pairs[i]).collect();
            let batch = distill_batch(cfg, &corpus.vocab, &chosen, epoch, &mut rng)?;
            let mut t = Tape::new();
            let (breakdown, total_loss) = vlkd_loss(&mut t, &batch, &b.teacher, &b.student, &b.proj, &settings)?;
            check_finite(step + 1, "distillation loss", breakdown.total)?;
            let grads = t.backward(total_loss)?;
            grads.accumulate_into(&mut b.student.store)?;
            grads.accumulate_into(&mut b.proj.store)?;
            grads.accumulate_into(&mut b.teacher.store)?;
            if settings.frozen_teacher {
                if let Some(name) = leaked_gradient(&b.teacher.store) {
                    return Err(VlkdError::Invariant(format!("teacher parameter `{name}` received a gradient")));
                }
                grad_checks += 1;
            }
            step += 1;
            let lr = lr_at(step, total, oc.base_lr, oc.warmup_fraction);
            let grad_norm = apply_update(
                &mut [&mut b.student.store, &mut b.proj.store, &mut b.teacher.store],
                &mut opt,
                oc.grad_clip,
                lr,
            )?;
            log.push(json!({
                "step": step, "lr": lr, "ttdm": breakdown.ttdm, "itcl": breakdown.itcl,
                "icti": breakdown.icti, "total": breakdown.total, "tau": breakdown.tau, "grad_norm": grad_norm,
            }))?;
            losses.push(breakdown.total);
            last_breakdown = Some(breakdown);
            if step % eval_every == 0 || step == total {
                let r = eval_retrieval(&b, sets)?;
                let vqa = eval_vqa(cfg, &b, &corpus.vocab, sets, cfg.generation.vqa_masks)?;
                let ppl = infill_perplexity(&b.student, &sets.perplexity)?;
                let record = json!({"eval": {
                    "step": step, "retrieval_r1": r.r1.image_to_text,
                    "vqa_accuracy": vqa.accuracy, "perplexity": ppl,
                }});
                log.push(record.clone())?;
                evals.push(record);
            }
        }
    }
    let fingerprint_after = b.teacher.store.fingerprint();
    if settings.frozen_teacher && fingerprint_after != fingerprint_before {
        return Err(VlkdError::Invariant("teacher parameters changed during distillation".into()));
    }
    let retrieval_after = eval_retrieval(&b, sets)?;
    let k = losses.len().min(10);
    Ok((
        b,
        DistillReport {
            steps: step,
            pairs_used: used,
            first_losses: losses[..k].to_vec(),
            last_losses: losses[losses.len() - k..].to_vec(),
            retrieval_before,
            retrieval_after,
            teacher_fingerprint_before: fingerprint_before,
            teacher_fingerprint_after: fingerprint_after,
            teacher_grad_checks: grad_checks,
            evals,
            final_breakdown: last_breakdown,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneTask {
    Vqa,
    Caption,
}

/// One supervised example in the zero-shot input format.
#[derive(Debug, Clone)]
pub struct FinetuneExample {
    pub pair: usize,
    pub prompt: TokenSequence,
    pub target: TokenSequence,
    pub weight: f64,
}

/// Training examples drawn from `pairs`, all with weight 1.
pub fn finetune_examples(cfg: &RunConfig, vocab: &Vocab, pairs: &[Pair], task: FinetuneTask) -> Result<Vec<FinetuneExample>> {
    let mut out = vec![];
    for (i, p) in pairs.iter().enumerate() {
        match task {
            FinetuneTask::Vqa => {
                for q in &p.qa {
                    out.push(FinetuneExample {
                        pair: i,
                        prompt: build_prompt(vocab, PromptTask::Vqa, Some(&q.question), cfg.generation.vqa_masks)?,
                        target: vocab.tokenize(&qa_sentence(&q.question, &q.answer), TokenKind::StudentText)?,
                        weight: 1.0,
                    });
                }
            }
            FinetuneTask::Caption => out.push(FinetuneExample {
                pair: i,
                prompt: build_prompt(vocab, PromptTask::Caption, None, cfg.generation.caption_masks)?,
                target: vocab.tokenize(&format!("{} {}.", crate::textdata::CAPTION_PREFIX, p.caption), TokenKind::StudentText)?,
                weight: 1.0,
            }),
        }
    }
    Ok(out)
}

/// Weighted, label-smoothed loss of one finetuning batch.
pub fn finetune_loss(
    t: &mut Tape<f32>,
    b: &Bundle,
    images: &[&PatchSequence],
    examples: &[&FinetuneExample],
    smoothing: f64,
) -> Result<numcore::Var> {
    let img = b.teacher.encode_images(t, images)?;
    let (v, rows) = img.context(b.mode);
    let v = t.stop_gradient(v);
    let prompts: Vec<&TokenSequence> = examples.iter().map(|e| &e.prompt).collect();
    let enc = b.student.encode(t, &prompts)?;
    let ctx: Context = b.proj.decoder_context(t, v, rows, &enc)?;
    let targets: Vec<&TokenSequence> = examples.iter().map(|e| &e.target).collect();
    let weights: Vec<f64> = examples.iter().map(|e| e.weight).collect();
    b.student.target_loss(t, &ctx, &targets, smoothing, Some(&weights))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub steps: usize,
    pub examples: usize,
    pub final_loss: f64,
}

/// Supervised finetuning in the zero-shot prompt format with the teacher
/// frozen.
pub fn finetune_generative(
    cfg: &RunConfig,
    corpus: &Corpus,
    bundle: Bundle,
    examples: &[FinetuneExample],
    log: &mut MetricsLog,
) -> Result<(Bundle, FinetuneReport)> {
    let oc = &cfg.finetune.optim;
    let mut b = bundle;
    b.teacher.store.set_frozen(true);
    if examples.is_empty() {
        return Err(VlkdError::Contract("no finetuning examples".into()));
    }
    let fingerprint = b.teacher.store.fingerprint();
    let per_epoch = steps_per_epoch(examples.len(), oc.batch_size);
    let total = per_epoch * oc.epochs;
    let mut opt = AdamW::new(AdamWParams::from(oc));
    let mut step = 0;
    let mut last = f64::NAN;
    for epoch in 0..oc.epochs as u64 {
        let order = shuffled(examples.len(), cfg.seed, "finetune-order", epoch);
        for idx in order.chunks(oc.batch_size) {
            let chosen: Vec<&FinetuneExample> = idx.iter().map(|&i| &examples[i]).collect();
            let images: Vec<PatchSequence> = chosen.iter().map(|e| render(cfg, &corpus.train[e.pair], epoch)).collect();
            let img_refs: Vec<&PatchSequence> = images.iter().collect();
            let mut t = Tape::new();
            let loss = finetune_loss(&mut t, &b, &img_refs, &chosen, cfg.finetune.label_smoothing)?;
            let value = t.scalar(loss)? as f64;
            check_finite(step + 1, "finetuning loss", value)?;
            let grads = t.backward(loss)?;
            grads.accumulate_into(&mut b.student.store)?;
            grads.accumulate_into(&mut b.proj.store)?;
            step += 1;
            let lr = lr_at(step, total, oc.base_lr, oc.warmup_fraction);
            let grad_norm = apply_update(
                &mut [&mut b.student.store, &mut b.proj.store, &mut b.teacher.store],
                &mut opt,
                oc.grad_clip,
                lr,
            )?;
            log.push(json!({"step": step, "lr": lr, "loss": value, "grad_norm": grad_norm}))?;
            last = value;
        }
    }
    if b.teacher.store.fingerprint() != fingerprint {
        return Err(VlkdError::Invariant("teacher parameters changed during finetuning".into()));
    }
    Ok((
        b,
        FinetuneReport {
            steps: step,
            examples: examples.len(),
            final_loss: last,
        },
    ))
}

/// Checkpoint kinds written by the pipeline.
pub mod kind {
    pub const TEACHER: &str = "teacher";
    pub const STUDENT: &str = "student";
    pub const DISTILLED: &str = "distilled";
    pub const FINETUNED: &str = "finetuned";
}

pub fn save_teacher(dir: &Path, cfg: &RunConfig, teacher: &Teacher<f32>, extras: Value) -> Result<()> {
    Checkpoint::from_stores(kind::TEACHER, cfg.seed, serde_json::to_value(cfg)?, None, extras, &[("teacher", &teacher.store)]).save(dir)
}

pub fn load_teacher(dir: &Path, cfg: &RunConfig) -> Result<Teacher<f32>> {
    let ckpt = load_kind(dir, "teacher checkpoint", &[kind::TEACHER])?;
    let mut teacher = Teacher::new(cfg.teacher.clone(), 0)?;
    ckpt.restore("teacher", &mut teacher.store)?;
    Ok(teacher)
}

pub fn save_student(dir: &Path, cfg: &RunConfig, student: &Student<f32>, p0: f64, extras: Value) -> Result<()> {
    Checkpoint::from_stores(kind::STUDENT, cfg.seed, serde_json::to_value(cfg)?, Some(p0), extras, &[("student", &student.store)]).save(dir)
}

/// The student and its recorded pre-distillation perplexity.
pub fn load_student(dir: &Path, cfg: &RunConfig) -> Result<(Student<f32>, Option<f64>)> {
    let ckpt = load_kind(dir, "student checkpoint", &[kind::STUDENT])?;
    let mut student = Student::new(cfg.student.clone(), 0)?;
    ckpt.restore("student", &mut student.store)?;
    Ok((student, ckpt.manifest.p0))
}

pub fn save_bundle(dir: &Path, kind: &str, cfg: &RunConfig, b: &Bundle, p0: Option<f64>, extras: Value) -> Result<()> {
    Checkpoint::from_stores(
        kind,
        cfg.seed,
        serde_json::to_value(cfg)?,
        p0,
        extras,
        &[("teacher", &b.teacher.store), ("student", &b.student.store), ("proj", &b.proj.store)],
    )
    .save(dir)
}

pub fn load_bundle(dir: &Path, cfg: &RunConfig) -> Result<(Bundle, Option<f64>)> {
    let ckpt = load_kind(dir, "distilled checkpoint", &[kind::DISTILLED, kind::FINETUNED])?;
    let mut teacher = Teacher::new(cfg.teacher.clone(), 0)?;
    let mut student = Student::new(cfg.student.clone(), 0)?;
    let mut proj = Projections::init(cfg.teacher.d1, cfg.student.d2, 0)?;
    ckpt.restore("teacher", &mut teacher.store)?;
    ckpt.restore("student", &mut student.store)?;
    ckpt.restore("proj", &mut proj.store)?;
    Ok((
        Bundle {
            teacher,
            student,
            proj,
            mode: cfg.teacher.visual_context_mode,
        },
        ckpt.manifest.p0,
    ))
}

fn load_kind(dir: &Path, what: &'static str, kinds: &[&str]) -> Result<Checkpoint> {
    if !dir.join(crate::checkpoint::MANIFEST).exists() {
        return Err(VlkdError::Missing {
            what,
            path: dir.display().to_string(),
        });
    }
    let ckpt = Checkpoint::load(dir)?;
    if !kinds.contains(&ckpt.manifest.kind.as_str()) {
        return Err(VlkdError::Format(format!("expected a {what}, found kind `{}`", ckpt.manifest.kind)));
    }
    Ok(ckpt)
}
