//! Mask-prompted generation, decoding, answer extraction and evaluation.

use std::collections::{BTreeMap, BTreeSet};

use numcore::{CeTargets, Tape};
use serde::{Deserialize, Serialize};

use crate::config::{GenerationConfig, Strategy};
use crate::error::{Result, VlkdError};
use crate::student::{Context, Student};
use crate::teacher::{Teacher, VisualContextMode};
use crate::textdata::{
    build_prompt, split_words, CorruptionOutcome, PatchSequence, PromptTask, TokenSequence, Vocab, BOS, CAPTION_PREFIX,
    EOS,
};
use crate::vlkd::Projections;

/// Everything zero-shot inference needs.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub teacher: Teacher<f32>,
    pub student: Student<f32>,
    pub proj: Projections<f32>,
    pub mode: VisualContextMode,
}

/// Next-token log-probabilities for a batch of `(example, prefix)` items.
/// Prefixes start with BOS.
pub trait Scorer {
    fn log_probs(&mut self, items: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>>;
}

impl<F> Scorer for F
where
    F: FnMut(&[(usize, &[usize])]) -> Result<Vec<Vec<f64>>>,
{
    fn log_probs(&mut self, items: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>> {
        self(items)
    }
}

/// A decoded continuation: generated ids (BOS excluded, EOS kept when
/// produced) and the summed log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

impl Hypothesis {
    fn prefix(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.tokens.iter().copied()).collect()
    }

    fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    fn ranked(&self, length_bonus: f64) -> f64 {
        self.score + length_bonus * self.tokens.len() as f64
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of `examples` contexts at once. Ties go to the lowest id.
pub fn greedy_decode<S: Scorer + ?Sized>(scorer: &mut S, examples: usize, max_length: usize) -> Result<Vec<Hypothesis>> {
    let mut hyps = vec![
        Hypothesis {
            tokens: vec![],
            score: 0.0
        };
        examples
    ];
    for _ in 0..max_length {
        let open: Vec<usize> = (0..examples).filter(|&k| !hyps[k].finished()).collect();
        if open.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = open.iter().map(|&k| hyps[k].prefix()).collect();
        let items: Vec<(usize, &[usize])> = open.iter().zip(&prefixes).map(|(&k, p)| (k, p.as_slice())).collect();
        let rows = scorer.log_probs(&items)?;
        for (&k, row) in open.iter().zip(&rows) {
            let tok = argmax(row);
            hyps[k].tokens.push(tok);
            hyps[k].score += row[tok];
        }
    }
    Ok(hyps)
}

/// Length-unnormalized beam search for one example.
///
/// Candidates are ranked by score, then by parent rank and token id, so the
/// search is deterministic. EOS candidates in the top `beam_size` retire;
/// unfinished hypotheses still alive at `max_length` retire as they are.
/// The greedy path is scored too and wins if it ranks strictly higher, so
/// the result never scores below greedy decoding.
pub fn beam_search<S: Scorer + ?Sized>(
    scorer: &mut S,
    example: usize,
    beam_size: usize,
    max_length: usize,
    length_bonus: f64,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(VlkdError::Contract("beam_size must be at least 1".into()));
    }
    let mut alive = vec![Hypothesis {
        tokens: vec![],
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = vec![];
    for _ in 0..max_length {
        if alive.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = alive.iter().map(Hypothesis::prefix).collect();
        let items: Vec<(usize, &[usize])> = prefixes.iter().map(|p| (example, p.as_slice())).collect();
        let rows = scorer.log_probs(&items)?;
        let mut cands: Vec<(f64, usize, usize)> = rows
            .iter()
            .enumerate()
            .flat_map(|(h, row)| {
                let base = alive[h].score;
                row.iter().enumerate().map(move |(v, &lp)| (base + lp, h, v))
            })
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam_size);
        for (rank, &(score, h, v)) in cands.iter().enumerate() {
            if next.len() == beam_size {
                break;
            }
            let mut tokens = alive[h].tokens.clone();
            tokens.push(v);
            let hyp = Hypothesis { tokens, score };
            if v == EOS {
                if rank < beam_size {
                    finished.push(hyp);
                }
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if length_bonus <= 0.0 {
            let best_done = finished.iter().map(|h| h.ranked(length_bonus)).fold(f64::NEG_INFINITY, f64::max);
            let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_alive {
                break;
            }
        }
    }
    finished.extend(alive);
    let mut best = finished
        .into_iter()
        .reduce(|a, b| if b.ranked(length_bonus) > a.ranked(length_bonus) { b } else { a })
        .expect("at least one hypothesis");
    if beam_size > 1 {
        let mut single = |items: &[(usize, &[usize])]| {
            let mapped: Vec<(usize, &[usize])> = items.iter().map(|&(_, p)| (example, p)).collect();
            scorer.log_probs(&mapped)
        };
        let greedy = greedy_decode(&mut single, 1, max_length)?.remove(0);
        if greedy.ranked(length_bonus) > best.ranked(length_bonus) {
            best = greedy;
        }
    }
    Ok(best)
}

/// Decoder context rows for one example, detached from any tape.
#[derive(Debug, Clone)]
pub struct FrozenContext {
    pub rows: Vec<f32>,
    pub mask: Vec<bool>,
    pub len: usize,
}

/// Scores prefixes with the student decoder against precomputed contexts.
pub struct StudentScorer<'a> {
    pub student: &'a Student<f32>,
    pub contexts: &'a [FrozenContext],
}

impl Scorer for StudentScorer<'_> {
    fn log_probs(&mut self, items: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>> {
        let d = self.student.cfg.d2;
        let len = items.iter().map(|(k, _)| self.contexts[*k].len).max().unwrap_or(0);
        let mut rows = vec![0.0f32; items.len() * len * d];
        let mut mask = vec![false; items.len() * len];
        for (i, (k, _)) in items.iter().enumerate() {
            let c = &self.contexts[*k];
            rows[i * len * d..(i * len + c.len) * d].copy_from_slice(&c.rows);
            mask[i * len..i * len + c.len].copy_from_slice(&c.mask);
        }
        let mut t = Tape::new();
        let c = t.constant(vec![items.len() * len, d], rows)?;
        let ctx = Context {
            c,
            mask,
            batch: items.len(),
            len,
        };
        let prefixes: Vec<&[usize]> = items.iter().map(|(_, p)| *p).collect();
        let out = self.student.decode_logits(&mut t, &ctx, &prefixes)?;
        let logits = t.value(out.logits);
        let v = self.student.cfg.vocab_size;
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let at = (i * out.len + p.len() - 1) * v;
                log_softmax(&logits[at..at + v])
            })
            .collect())
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x as f64 - lse).collect()
}

const CHUNK: usize = 64;

/// Image-conditioned decoder contexts for prompt encodings.
pub fn generation_contexts(b: &Bundle, images: &[&PatchSequence], prompts: &[&TokenSequence]) -> Result<Vec<FrozenContext>> {
    if images.len() != prompts.len() {
        return Err(VlkdError::Contract(format!("{} images for {} prompts", images.len(), prompts.len())));
    }
    let d = b.student.cfg.d2;
    let mut out = Vec::with_capacity(images.len());
    for (imgs, ps) in images.chunks(CHUNK).zip(prompts.chunks(CHUNK)) {
        let mut t = Tape::new();
        let img = b.teacher.encode_images(&mut t, imgs)?;
        let (v, rows) = img.context(b.mode);
        let enc = b.student.encode(&mut t, ps)?;
        let ctx = b.proj.decoder_context(&mut t, v, rows, &enc)?;
        let values = t.value(ctx.c);
        for k in 0..ctx.batch {
            out.push(FrozenContext {
                rows: values[k * ctx.len * d..(k + 1) * ctx.len * d].to_vec(),
                mask: ctx.mask[k * ctx.len..(k + 1) * ctx.len].to_vec(),
                len: ctx.len,
            });
        }
    }
    Ok(out)
}

/// Decodes every context with the configured strategy.
pub fn decode_all(
    student: &Student<f32>,
    contexts: &[FrozenContext],
    strategy: Strategy,
    beam_size: usize,
    max_lengths: &[usize],
    length_bonus: f64,
) -> Result<Vec<Hypothesis>> {
    let mut scorer = StudentScorer { student, contexts };
    match strategy {
        Strategy::Greedy => {
            let max = max_lengths.iter().copied().max().unwrap_or(0);
            let mut hyps = Vec::with_capacity(contexts.len());
            for start in (0..contexts.len()).step_by(CHUNK) {
                let end = (start + CHUNK).min(contexts.len());
                let mut sub = |items: &[(usize, &[usize])]| {
                    let shifted: Vec<(usize, &[usize])> = items.iter().map(|&(k, p)| (k + start, p)).collect();
                    scorer.log_probs(&shifted)
                };
                let mut part = greedy_decode(&mut sub, end - start, max)?;
                for (i, h) in part.iter_mut().enumerate() {
                    h.tokens.truncate(max_lengths[start + i]);
                }
                hyps.extend(part);
            }
            Ok(hyps)
        }
        Strategy::Beam => (0..contexts.len())
            .map(|k| beam_search(&mut scorer, k, beam_size, max_lengths[k], length_bonus))
            .collect(),
    }
}

/// Lowercase, drop punctuation tokens, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    split_words(&text.to_lowercase())
        .into_iter()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Words after the `answer` marker; falls back to the whole text (flag set).
pub fn extract_answer(text: &str) -> (String, bool) {
    let words = split_words(&text.to_lowercase());
    match words.iter().position(|w| w == crate::textdata::ANSWER_MARKER) {
        Some(i) => (normalize_answer(&words[i + 1..].join(" ")), false),
        None => (normalize_answer(text), true),
    }
}

/// Text after the `a picture of` prefix; falls back to the whole text.
pub fn extract_caption(text: &str) -> (String, bool) {
    let norm = normalize_answer(text);
    match norm.strip_prefix(CAPTION_PREFIX) {
        Some(rest) if rest.is_empty() || rest.starts_with(' ') => (rest.trim().to_string(), false),
        _ => (norm, true),
    }
}

pub fn exact_match(pred: &str, reference: &str) -> bool {
    normalize_answer(pred) == normalize_answer(reference)
}

/// Multiset unigram F1 over normalized words.
pub fn unigram_f1(pred: &str, reference: &str) -> f64 {
    let count = |s: &str| {
        let mut m = BTreeMap::new();
        for w in normalize_answer(s).split_whitespace() {
            *m.entry(w.to_string()).or_insert(0usize) += 1;
        }
        m
    };
    let (p, r) = (count(pred), count(reference));
    let (np, nr): (usize, usize) = (p.values().sum(), r.values().sum());
    if np == 0 && nr == 0 {
        return 1.0;
    }
    let common: usize = p.iter().map(|(w, c)| (*c).min(*r.get(w).unwrap_or(&0))).sum();
    if common == 0 {
        return 0.0;
    }
    let (prec, rec) = (common as f64 / np as f64, common as f64 / nr as f64);
    2.0 * prec * rec / (prec + rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub exact_match: f64,
    pub f1: f64,
}

pub fn eval_metrics(preds: &[String], refs: &[String]) -> Result<TextScores> {
    if preds.len() != refs.len() {
        return Err(VlkdError::Contract(format!("{} predictions for {} references", preds.len(), refs.len())));
    }
    if preds.is_empty() {
        return Err(VlkdError::Contract("no predictions to score".into()));
    }
    let n = preds.len() as f64;
    Ok(TextScores {
        exact_match: preds.iter().zip(refs).filter(|(p, r)| exact_match(p, r)).count() as f64 / n,
        f1: preds.iter().zip(refs).map(|(p, r)| unigram_f1(p, r)).sum::<f64>() / n,
    })
}

/// Perplexity of reconstructing clean sentences from their corrupted
/// encodings, text only: the decoder attends to the raw encoder output.
pub fn infill_perplexity(student: &Student<f32>, outcomes: &[CorruptionOutcome]) -> Result<f64> {
    let (mut nll, mut count) = (0.0, 0usize);
    for chunk in outcomes.chunks(CHUNK) {
        let mut t = Tape::new();
        let corrupted: Vec<&TokenSequence> = chunk.iter().map(|o| &o.corrupted).collect();
        let enc = student.encode(&mut t, &corrupted)?;
        let inputs: Vec<&[usize]> = chunk.iter().map(|o| &o.target.ids[..o.target.len() - 1]).collect();
        let out = student.decode_logits(&mut t, &Context::from(&enc), &inputs)?;
        let mut ids = Vec::with_capacity(chunk.len() * out.len);
        for o in chunk {
            let n = o.target.len() - 1;
            ids.extend((0..out.len).map(|j| (j < n).then(|| o.target.ids[j + 1])));
        }
        let tokens = ids.iter().filter(|i| i.is_some()).count();
        let ce = t.cross_entropy_smoothed(out.logits, CeTargets::plain(ids))?;
        nll += t.scalar(ce)? as f64 * tokens as f64;
        count += tokens;
    }
    if count == 0 {
        return Err(VlkdError::Contract("perplexity over zero tokens".into()));
    }
    Ok((nll / count as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// R@k in both directions for a square row-major similarity matrix whose
/// diagonal holds the true matches. Equal scores rank the lower index first.
pub fn recall_at_k(sim: &[f64], n: usize, k: usize) -> Recall {
    let rank = |score: &dyn Fn(usize) -> f64, truth: usize| {
        let s = score(truth);
        (0..n).filter(|&j| score(j) > s || (score(j) == s && j < truth)).count()
    };
    let i2t = (0..n).filter(|&i| rank(&|j| sim[i * n + j], i) < k).count();
    let t2i = (0..n).filter(|&j| rank(&|i| sim[i * n + j], j) < k).count();
    Recall {
        image_to_text: i2t as f64 / n as f64,
        text_to_image: t2i as f64 / n as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n: usize,
    pub r1: Recall,
    pub r5: Recall,
}

fn check_unique(captions: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for c in captions {
        if !seen.insert(c.as_str()) {
            return Err(VlkdError::Contract(format!("duplicate caption `{c}` makes retrieval ambiguous")));
        }
    }
    Ok(())
}

fn similarity(a: &[f32], b: &[f32], n: usize, d: usize) -> Vec<f64> {
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = (0..d).map(|x| a[i * d + x] as f64 * b[j * d + x] as f64).sum();
        }
    }
    sim
}

fn report(sim: &[f64], n: usize) -> RetrievalReport {
    RetrievalReport {
        n,
        r1: recall_at_k(sim, n, 1),
        r5: recall_at_k(sim, n, 5.min(n)),
    }
}

/// Student-side retrieval: teacher `v_cls` against the student's projected
/// sentence embeddings.
pub fn retrieval_eval(b: &Bundle, images: &[&PatchSequence], sentences: &[&TokenSequence], captions: &[String]) -> Result<RetrievalReport> {
    let n = images.len();
    if sentences.len() != n || captions.len() != n || n == 0 {
        return Err(VlkdError::Contract("retrieval needs equal, non-zero image and caption counts".into()));
    }
    check_unique(captions)?;
    let d = b.proj.d1;
    let (mut v, mut e) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
    for (imgs, sents) in images.chunks(CHUNK).zip(sentences.chunks(CHUNK)) {
        let mut t = Tape::new();
        let img = b.teacher.encode_images(&mut t, imgs)?;
        v.extend_from_slice(t.value(img.v_cls));
        let enc = b.student.encode(&mut t, sents)?;
        let emb = b.proj.sentence_embedding(&mut t, &enc)?;
        e.extend_from_slice(t.value(emb));
    }
    Ok(report(&similarity(&v, &e, n, d), n))
}

/// The teacher's own retrieval: `v_cls` against `t_eos`.
pub fn teacher_retrieval(teacher: &Teacher<f32>, images: &[&PatchSequence], texts: &[&TokenSequence], captions: &[String]) -> Result<RetrievalReport> {
    let n = images.len();
    if texts.len() != n || captions.len() != n || n == 0 {
        return Err(VlkdError::Contract("retrieval needs equal, non-zero image and caption counts".into()));
    }
    check_unique(captions)?;
    let d = teacher.cfg.d1;
    let (mut v, mut e) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
    for (imgs, txts) in images.chunks(CHUNK).zip(texts.chunks(CHUNK)) {
        let mut t = Tape::new();
        let img = teacher.encode_images(&mut t, imgs)?;
        v.extend_from_slice(t.value(img.v_cls));
        let emb = teacher.encode_texts(&mut t, txts)?;
        e.extend_from_slice(t.value(emb));
    }
    Ok(report(&similarity(&v, &e, n, d), n))
}

/// One generated output with its extracted answer or caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub text: String,
    pub extracted: String,
    pub fallback: bool,
}

fn generate(
    b: &Bundle,
    vocab: &Vocab,
    images: &[&PatchSequence],
    prompts: Vec<TokenSequence>,
    strategy: Strategy,
    beam_size: usize,
    gen: &GenerationConfig,
    extract: fn(&str) -> (String, bool),
) -> Result<Vec<Generated>> {
    let refs: Vec<&TokenSequence> = prompts.iter().collect();
    let contexts = generation_contexts(b, images, &refs)?;
    let limit = b.student.cfg.max_len;
    let max_lengths: Vec<usize> = prompts.iter().map(|p| (p.len() + gen.extra_length).min(limit)).collect();
    let hyps = decode_all(&b.student, &contexts, strategy, beam_size, &max_lengths, gen.length_bonus)?;
    hyps.iter()
        .map(|h| {
            let text = vocab.detokenize(&h.tokens)?;
            let (extracted, fallback) = extract(&text);
            Ok(Generated { text, extracted, fallback })
        })
        .collect()
}

/// Answers each question about its image by infilling
/// `<question> answer: <mask>×n.`
pub fn zero_shot_vqa(
    b: &Bundle,
    vocab: &Vocab,
    images: &[&PatchSequence],
    questions: &[&str],
    masks: usize,
    gen: &GenerationConfig,
) -> Result<Vec<Generated>> {
    let prompts = questions
        .iter()
        .map(|q| build_prompt(vocab, PromptTask::Vqa, Some(q), masks))
        .collect::<Result<Vec<_>>>()?;
    generate(b, vocab, images, prompts, gen.vqa_strategy, gen.vqa_beam_size, gen, extract_answer)
}

/// Captions each image by infilling `a picture of <mask>×m.`
pub fn zero_shot_caption(b: &Bundle, vocab: &Vocab, images: &[&PatchSequence], masks: usize, gen: &GenerationConfig) -> Result<Vec<Generated>> {
    let prompt = build_prompt(vocab, PromptTask::Caption, None, masks)?;
    generate(
        b,
        vocab,
        images,
        vec![prompt; images.len()],
        gen.caption_strategy,
        gen.caption_beam_size,
        gen,
        extract_caption,
    )
}
