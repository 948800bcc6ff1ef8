//! Fast runtime invariant suite behind `vlkd selftest`.
//!
//! Every check is deterministic and small enough to finish in seconds on
//! one core. Calibrated statistics that are not invariants (for example the
//! mean span length) are reported in the detail text without gating.

use numcore::gradcheck::check_model;
use numcore::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Result, VlkdError};
use crate::inference::{beam_search, extract_answer, extract_caption, greedy_decode};
use crate::optim::{lr_at, AdamW, AdamWParams};
use crate::student::{Student, StudentConfig};
use crate::teacher::{Teacher, TeacherConfig, VisualContextMode};
use crate::textdata::{
    corrupt_spans, generate_dataset, qa_sentence, render_patches, synthetic_vocab, TokenKind, Vocab,
    CAPTION_PREFIX, MASK,
};
use crate::trainloop::{run_distillation, Corpus, EvalSets, MetricsLog, RunLimits};
use crate::vlkd::{loss_itcl, loss_ttdm, pseudo_inverse, vlkd_loss, LossSettings, Projections, VlkdBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, outcome: Result<(bool, String)>) -> Check {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// A deliberately tiny model pair for checks that run the real code paths.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.teacher = TeacherConfig {
        d1: 4,
        layers: 1,
        heads: 2,
        ffn: 8,
        max_text_len: 16,
        ..TeacherConfig::default()
    };
    cfg.student = StudentConfig {
        d2: 6,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ffn: 8,
        ..StudentConfig::default()
    };
    cfg.data.pairs = 64;
    cfg.data.heldout = 40;
    cfg.eval.retrieval_candidates = 20;
    cfg.eval.vqa_questions = 8;
    cfg.eval.captions = 4;
    cfg.eval.perplexity_sentences = 8;
    cfg.distill.optim.batch_size = 8;
    cfg.distill.optim.epochs = 1;
    cfg.distill.eval_every_fraction = 1.0;
    cfg
}

/// A prepared two-pair distillation batch for `cfg`.
pub fn toy_batch(cfg: &RunConfig, vocab: &Vocab, pairs: usize, seed: u64) -> Result<VlkdBatch> {
    let data = generate_dataset(pairs, seed, cfg.data.grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = VlkdBatch {
        images: vec![],
        teacher_texts: vec![],
        clean: vec![],
        corrupted: vec![],
    };
    for p in &data {
        batch.images.push(render_patches(&p.scene, seed, cfg.data.noise_sigma, cfg.data.d_img));
        batch.teacher_texts.push(vocab.tokenize(&p.caption, TokenKind::TeacherText)?);
        let clean = vocab.tokenize(&p.caption, TokenKind::StudentText)?;
        batch.corrupted.push(corrupt_spans(&clean, 0.3, 3.0, &mut rng)?);
        batch.clean.push(clean);
    }
    Ok(batch)
}

struct Models {
    teacher: Teacher<f64>,
    student: Student<f64>,
    proj: Projections<f64>,
}

fn gradient_check(mode: VisualContextMode) -> Result<(bool, String)> {
    let cfg = tiny_config();
    let vocab = synthetic_vocab();
    let batch = toy_batch(&cfg, &vocab, 2, 5)?;
    let mut m = Models {
        teacher: Teacher::new(cfg.teacher.clone(), 1)?,
        student: Student::new(cfg.student.clone(), 2)?,
        proj: Projections::init(cfg.teacher.d1, cfg.student.d2, 3)?,
    };
    let settings = LossSettings {
        mode,
        ..LossSettings::default()
    };
    let report = check_model(
        &mut m,
        1e-5,
        4,
        |m: &mut Models| vec![&mut m.student.store, &mut m.proj.store],
        |t, m| {
            vlkd_loss(t, &batch, &m.teacher, &m.student, &m.proj, &settings)
                .map(|(_, loss)| loss)
                .map_err(|e| numcore::NumError::Numeric(e.to_string()))
        },
    )?;
    let worst = report.max_rel_err();
    Ok((worst < 1e-4, format!("max relative error {worst:.2e} over {} parameters", report.entries.len())))
}

fn pinv_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (d1, d2) = (64, 96);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let w: Vec<f64> = (0..d1 * d2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = pseudo_inverse(&w, d1, d2)?;
        let mut err = 0.0;
        for i in 0..d1 {
            for j in 0..d1 {
                let v: f64 = (0..d2).map(|k| w[i * d2 + k] * x[k * d1 + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                err += (v - target) * (v - target);
            }
        }
        worst = worst.max(err.sqrt());
    }
    Ok((worst <= 1e-6, format!("worst ‖W W′ − I‖_F {worst:.2e}")))
}

fn itcl_check() -> Result<(bool, String)> {
    let mut t = Tape::<f64>::new();
    let lit = t.constant(vec![1], vec![0.0])?;
    let v1 = t.constant(vec![1, 2], vec![0.6, 0.8])?;
    let e1 = t.constant(vec![1, 2], vec![0.0, 1.0])?;
    let single = loss_itcl(&mut t, v1, e1, lit)?;
    let single = t.scalar(single)?;
    let eye = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let pair = loss_itcl(&mut t, eye, eye, lit)?;
    let pair = t.scalar(pair)?;
    let expected = (1.0 + (-1.0f64).exp()).ln();
    let ok = single == 0.0 && (pair - expected).abs() < 1e-9;
    Ok((ok, format!("B=1 gives {single}, orthonormal B=2 gives {pair:.12} (expected {expected:.12})")))
}

fn ttdm_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut t = Tape::<f64>::new();
    let a = t.constant(vec![1, 3], vec![0.0, 0.6, 0.8])?;
    let b = t.constant(vec![1, 3], vec![0.0, -0.6, -0.8])?;
    let anti = loss_ttdm(&mut t, a, b)?;
    let anti = t.scalar(anti)?;
    let mut in_range = true;
    for _ in 0..1000 {
        let rows = rng.random_range(1..5);
        let mut unit = || {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let x: Vec<f64> = (0..rows).flat_map(|_| unit()).collect();
        let y: Vec<f64> = (0..rows).flat_map(|_| unit()).collect();
        let mut t = Tape::<f64>::new();
        let xv = t.constant(vec![rows, 4], x.clone())?;
        let yv = t.constant(vec![rows, 4], y)?;
        let same = t.constant(vec![rows, 4], x)?;
        let l = loss_ttdm(&mut t, xv, yv)?;
        let z = loss_ttdm(&mut t, xv, same)?;
        let (l, z) = (t.scalar(l)?, t.scalar(z)?);
        in_range &= (0.0..=4.0 + 1e-12).contains(&l) && z == 0.0;
    }
    let ok = in_range && (anti - 4.0).abs() < 1e-12;
    Ok((ok, format!("antipodal {anti}, 1000 random batches in [0, 4]: {in_range}")))
}

fn corruption_check() -> Result<(bool, String)> {
    let words: Vec<&str> = ["red", "blue", "green", "yellow", "circle"].iter().copied().cycle().take(50).collect();
    let vocab = synthetic_vocab();
    let tokens = vocab.tokenize(&words.join(" "), TokenKind::StudentText)?;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (mut masked, mut total, mut span_sum, mut spans) = (0usize, 0usize, 0usize, 0usize);
    let mut faithful = true;
    for _ in 0..10_000 {
        let out = corrupt_spans(&tokens, 0.15, 3.0, &mut rng)?;
        masked += out.masked_words();
        total += 50;
        for &(_, len) in &out.span_log {
            if len > 0 {
                span_sum += len;
                spans += 1;
            }
        }
        let masks = out.corrupted.ids.iter().filter(|&&i| i == MASK).count();
        faithful &= masks == out.span_log.len() && out.target == tokens && rebuild(&out.corrupted.ids, &tokens.ids, &out.span_log);
    }
    let fraction = masked as f64 / total as f64;
    let ok = (fraction - 0.15).abs() <= 0.01 + 1e-12 && faithful;
    Ok((
        ok,
        format!(
            "masked fraction {fraction:.4}, one mask per span and exact round trip: {faithful}, mean span {:.3} (reported only)",
            span_sum as f64 / spans.max(1) as f64
        ),
    ))
}

/// Refills each MASK from the span log and compares with the original.
fn rebuild(corrupted: &[usize], original: &[usize], spans: &[(usize, usize)]) -> bool {
    let words = &original[1..original.len() - 1];
    let mut out = vec![original[0]];
    let mut next = spans.iter();
    for &id in &corrupted[1..corrupted.len() - 1] {
        if id == MASK {
            let Some(&(s, len)) = next.next() else { return false };
            out.extend_from_slice(&words[s..s + len]);
        } else {
            out.push(id);
        }
    }
    out.push(*original.last().unwrap());
    out == original
}

fn schedule_check() -> Result<(bool, String)> {
    let (total, base) = (1000, 2.4e-4);
    let peak = lr_at(20, total, base, 0.02);
    let half = lr_at(10, total, base, 0.02);
    let end = lr_at(total, total, base, 0.02);
    let unimodal = (1..total).all(|s| lr_at(s, total, base, 0.02) <= peak);
    let ok = (peak - base).abs() < 1e-15 && (half - base / 2.0).abs() < 1e-15 && end == 0.0 && unimodal;
    Ok((ok, format!("warmup end {peak:e}, half warmup {half:e}, end {end}")))
}

fn frozen_injection_check() -> Result<(bool, String)> {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0])?, true)?;
    store.set_frozen(true);
    store.tensor_mut(id).accumulate_grad(&[0.5, 0.0])?;
    let mut opt = AdamW::new(AdamWParams {
        beta1: 0.99,
        beta2: 0.999,
        eps: 1e-6,
        weight_decay: 0.01,
    });
    let outcome = opt.step(&mut [&mut store], 1e-3);
    let ok = matches!(outcome, Err(VlkdError::Invariant(_))) && store.tensor(id).data() == [1.0, 2.0];
    Ok((ok, format!("update of a frozen parameter: {}", outcome.err().map_or("accepted".into(), |e| e.to_string()))))
}

fn checkpoint_check() -> Result<(bool, String)> {
    let cfg = tiny_config();
    let student = Student::<f32>::new(cfg.student.clone(), 9)?;
    let dir = std::env::temp_dir().join(format!("vlkd-selftest-{}", std::process::id()));
    let (a, b) = (dir.join("a"), dir.join("b"));
    let ckpt = Checkpoint::from_stores("student", cfg.seed, serde_json::to_value(&cfg)?, Some(1.5), serde_json::Value::Null, &[(
        "student",
        &student.store,
    )]);
    ckpt.save(&a)?;
    Checkpoint::load(&a)?.save(&b)?;
    let same = ["manifest.json", "weights.bin"]
        .iter()
        .map(|f| Ok(std::fs::read(a.join(f))? == std::fs::read(b.join(f))?))
        .collect::<Result<Vec<bool>>>()?;
    let _ = std::fs::remove_dir_all(&dir);
    let ok = same.iter().all(|&s| s);
    Ok((ok, format!("save, load, save byte-identical: {ok}")))
}

fn decoding_check() -> Result<(bool, String)> {
    let vocab = 7;
    let mut all_equal = true;
    let mut dominated = true;
    for seed in 0..50u64 {
        // A random but deterministic next-token distribution per prefix.
        let mut scorer = |items: &[(usize, &[usize])]| -> Result<Vec<Vec<f64>>> {
            Ok(items
                .iter()
                .map(|(k, prefix)| {
                    let h = prefix.iter().fold(seed ^ (*k as u64) << 32, |h, &t| crate::textdata::splitmix64(h ^ t as u64));
                    let mut rng = ChaCha8Rng::seed_from_u64(h);
                    let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
                    logits.iter().map(|l| l - lse).collect()
                })
                .collect())
        };
        let greedy = greedy_decode(&mut scorer, 1, 6)?.remove(0);
        let beam1 = beam_search(&mut scorer, 0, 1, 6, 0.0)?;
        let beam4 = beam_search(&mut scorer, 0, 4, 6, 0.0)?;
        all_equal &= beam1 == greedy;
        dominated &= beam4.score >= greedy.score;
    }
    Ok((all_equal && dominated, format!("beam 1 equals greedy: {all_equal}; beam 4 never below greedy: {dominated}")))
}

fn extraction_check() -> Result<(bool, String)> {
    let answers = ["red", "two", "yes", "star", "no"];
    let questions = ["what color is the circle?", "how many objects are there?", "is there a star?"];
    let mut ok = true;
    for q in questions {
        for a in answers {
            ok &= extract_answer(&qa_sentence(q, a)) == (a.to_string(), false);
        }
    }
    for c in ["a red circle", "a blue star above a green square"] {
        ok &= extract_caption(&format!("{CAPTION_PREFIX} {c}.")) == (c.to_string(), false);
    }
    Ok((ok, format!("answers and captions recovered from filled templates: {ok}")))
}

fn frozen_teacher_check() -> Result<(bool, String)> {
    let cfg = tiny_config();
    let corpus = Corpus::generate(&cfg);
    let sets = EvalSets::build(&cfg, &corpus)?;
    let mut teacher = Teacher::<f32>::new(cfg.teacher.clone(), 4)?;
    teacher.store.set_frozen(true);
    let before = teacher.store.fingerprint();
    let student = Student::<f32>::new(cfg.student.clone(), 5)?;
    let (b, report) = run_distillation(
        &cfg,
        &corpus,
        &sets,
        teacher,
        student,
        &mut MetricsLog::memory(),
        RunLimits { max_steps: Some(4) },
    )?;
    let ok = b.teacher.store.fingerprint() == before && report.teacher_grad_checks == report.steps && report.steps == 4;
    Ok((ok, format!("{} steps, teacher fingerprint unchanged and gradients zero: {ok}", report.steps)))
}

/// Runs the whole suite in a fixed order.
pub fn run_selftest() -> Vec<Check> {
    vec![
        check("gradients-cls-only", gradient_check(VisualContextMode::ClsOnly)),
        check("gradients-full-sequence", gradient_check(VisualContextMode::FullSequence)),
        check("pseudo-inverse", pinv_check()),
        check("itcl-oracle", itcl_check()),
        check("ttdm-bounds", ttdm_check()),
        check("corruption", corruption_check()),
        check("lr-schedule", schedule_check()),
        check("frozen-update-rejected", frozen_injection_check()),
        check("checkpoint-round-trip", checkpoint_check()),
        check("decoding", decoding_check()),
        check("extraction-inverse", extraction_check()),
        check("frozen-teacher-distillation", frozen_teacher_check()),
    ]
}
