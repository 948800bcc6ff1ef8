//! Synthetic scenes, their captions and questions, the word-level
//! tokenizer, span corruption and mask prompts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VlkdError};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const SOS: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const MASK_TOKEN: &str = "<mask>";
pub const SOS_TOKEN: &str = "<sos>";

const RESERVED: [&str; 5] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, MASK_TOKEN, SOS_TOKEN];

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];

/// Every non-attribute token the caption, question and prompt templates emit.
pub const TEMPLATE_WORDS: [&str; 24] = [
    "a", "above", "answer", "are", "beside", "color", "how", "is", "many", "no", "object", "objects", "of",
    "one", "picture", "shape", "the", "there", "two", "what", "yes", ".", "?", ":",
];

const PUNCT: [char; 4] = ['.', '?', ',', ':'];

/// Splits on whitespace and detaches trailing punctuation into its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let trimmed = raw.trim_end_matches(PUNCT);
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        out.extend(raw[trimmed.len()..].chars().map(String::from));
    }
    out
}

/// Joins tokens with spaces, attaching punctuation to the preceding word.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    for w in words {
        let w = w.as_ref();
        let is_punct = w.len() == 1 && w.chars().all(|c| PUNCT.contains(&c));
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens first, then every corpus word in sorted order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut words = BTreeSet::new();
        let mut any = false;
        for line in corpus {
            any = true;
            for w in split_words(line) {
                if !RESERVED.contains(&w.as_str()) {
                    words.insert(w);
                }
            }
        }
        if !any {
            return Err(VlkdError::Contract("vocabulary corpus is empty".into()));
        }
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| VlkdError::UnknownWord(word.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(VlkdError::UnknownId(id))
    }

    pub fn tokenize(&self, text: &str, kind: TokenKind) -> Result<TokenSequence> {
        let (open, close) = kind.brackets();
        let mut ids = vec![open];
        for w in split_words(text) {
            ids.push(self.id(&w)?);
        }
        ids.push(close);
        Ok(TokenSequence { ids, kind })
    }

    /// Drops PAD/BOS/EOS/SOS; MASK renders as `<mask>`.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id)?;
            if !matches!(id, PAD | BOS | EOS | SOS) {
                words.push(tok);
            }
        }
        Ok(join_words(&words))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    TeacherText,
    StudentText,
    DecoderTarget,
}

impl TokenKind {
    fn brackets(self) -> (usize, usize) {
        match self {
            TokenKind::TeacherText => (SOS, EOS),
            TokenKind::StudentText | TokenKind::DecoderTarget => (BOS, EOS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub kind: TokenKind,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the bracketing invariant for this sequence's kind.
    pub fn check_kind(&self, kind: TokenKind) -> Result<()> {
        if self.kind != kind {
            return Err(VlkdError::Contract(format!("expected {kind:?} tokens, got {:?}", self.kind)));
        }
        let (open, close) = kind.brackets();
        if self.ids.len() < 2 || self.ids[0] != open || *self.ids.last().unwrap() != close {
            return Err(VlkdError::Contract(format!("{kind:?} sequence is not bracketed correctly")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub shape: usize,
    pub color: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid: usize,
    pub cells: Vec<Option<Cell>>,
    pub seed: u64,
}

impl SceneSpec {
    /// Occupied cells in row-major order.
    pub fn objects(&self) -> Vec<(usize, Cell)> {
        self.cells.iter().enumerate().filter_map(|(i, c)| c.map(|c| (i, c))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub scene: SceneSpec,
    pub caption: String,
    pub qa: Vec<QaItem>,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn caption_for(scene: &SceneSpec) -> String {
    let obj = scene.objects();
    let phrase = |c: Cell| format!("a {} {}", COLORS[c.color], SHAPES[c.shape]);
    match obj.as_slice() {
        [(_, c)] => phrase(*c),
        [(ia, a), (ib, b)] => {
            let rel = if ia / scene.grid < ib / scene.grid { "above" } else { "beside" };
            format!("{} {rel} {}", phrase(*a), phrase(*b))
        }
        _ => obj.iter().map(|(_, c)| phrase(*c)).collect::<Vec<_>>().join(" and "),
    }
}

/// Scene, caption and questions as a pure function of `seed`.
pub fn generate_scene(seed: u64, grid: usize) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cells = grid * grid;
    let n_obj = if n_cells >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
    let first = rng.random_range(0..n_cells);
    let mut positions = vec![first];
    if n_obj == 2 {
        let mut second = rng.random_range(0..n_cells - 1);
        if second >= first {
            second += 1;
        }
        positions.push(second);
    }
    let s0 = rng.random_range(0..SHAPES.len());
    let mut shapes = vec![s0];
    if n_obj == 2 {
        let mut s1 = rng.random_range(0..SHAPES.len() - 1);
        if s1 >= s0 {
            s1 += 1;
        }
        shapes.push(s1);
    }
    let mut cells = vec![None; n_cells];
    for (&p, &s) in positions.iter().zip(&shapes) {
        cells[p] = Some(Cell {
            shape: s,
            color: rng.random_range(0..COLORS.len()),
        });
    }
    let scene = SceneSpec { grid, cells, seed };
    let caption = caption_for(&scene);

    let objs = scene.objects();
    let mut qa = Vec::new();
    for (_, c) in &objs {
        qa.push(QaItem {
            question: format!("what color is the {}?", SHAPES[c.shape]),
            answer: COLORS[c.color].into(),
        });
    }
    for (_, c) in &objs {
        if objs.iter().filter(|(_, o)| o.color == c.color).count() == 1 {
            qa.push(QaItem {
                question: format!("what shape is the {} object?", COLORS[c.color]),
                answer: SHAPES[c.shape].into(),
            });
        }
    }
    qa.push(QaItem {
        question: "how many objects are there?".into(),
        answer: if objs.len() == 1 { "one" } else { "two" }.into(),
    });
    let probe = if rng.random_bool(0.5) {
        objs[rng.random_range(0..objs.len())].1
    } else {
        loop {
            let c = Cell {
                shape: rng.random_range(0..SHAPES.len()),
                color: rng.random_range(0..COLORS.len()),
            };
            if !objs.iter().any(|(_, o)| *o == c) {
                break c;
            }
        }
    };
    let present = objs.iter().any(|(_, o)| *o == probe);
    qa.push(QaItem {
        question: format!("is there a {} {}?", COLORS[probe.color], SHAPES[probe.shape]),
        answer: if present { "yes" } else { "no" }.into(),
    });
    Pair { scene, caption, qa }
}

/// `count` pairs whose seeds are derived from `base_seed`.
pub fn generate_dataset(count: usize, base_seed: u64, grid: usize) -> Vec<Pair> {
    (0..count as u64)
        .map(|i| generate_scene(splitmix64(base_seed ^ splitmix64(i)), grid))
        .collect()
}

/// Salt separating the held-out seed stream from the training stream.
pub const HELDOUT_SALT: u64 = 0x4845_4c44_4f55_5421;

pub fn generate_heldout(count: usize, base_seed: u64, grid: usize) -> Vec<Pair> {
    generate_dataset(count, base_seed ^ HELDOUT_SALT, grid)
}

/// Sentences for text-only student pretraining: bare captions, captions in
/// the caption-prompt frame, and question/answer sentences in the VQA frame.
pub fn student_corpus(pairs: &[Pair]) -> Vec<String> {
    let mut out = Vec::new();
    for p in pairs {
        out.push(p.caption.clone());
        out.push(format!("a picture of {}.", p.caption));
        for q in &p.qa {
            out.push(qa_sentence(&q.question, &q.answer));
        }
    }
    out
}

/// Student-side text paired with an image during distillation.
pub fn distill_sentence(caption: &str) -> String {
    caption.to_string()
}

pub fn qa_sentence(question: &str, answer: &str) -> String {
    format!("{question} answer: {answer}.")
}

/// Vocabulary over every word the generators can emit.
pub fn synthetic_vocab() -> Vocab {
    let mut corpus: Vec<String> = SHAPES.iter().chain(COLORS.iter()).map(|s| s.to_string()).collect();
    corpus.push(TEMPLATE_WORDS.join(" "));
    Vocab::build(corpus.iter().map(String::as_str)).expect("non-empty corpus")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl PatchSequence {
    pub fn patch(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

const TABLE_SEED: u64 = 0x7a_7c4e;

struct PatchTables {
    shapes: Vec<Vec<f64>>,
    colors: Vec<Vec<f64>>,
    background: Vec<f64>,
    positions: Vec<Vec<f64>>,
}

fn tables(dim: usize, n: usize) -> PatchTables {
    let mut rng = ChaCha8Rng::seed_from_u64(TABLE_SEED);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut row = |scale: f64| -> Vec<f64> { (0..dim).map(|_| scale * normal.sample(&mut rng)).collect() };
    PatchTables {
        shapes: (0..SHAPES.len()).map(|_| row(1.0)).collect(),
        colors: (0..COLORS.len()).map(|_| row(1.0)).collect(),
        background: row(1.0),
        positions: (0..n).map(|_| row(0.5)).collect(),
    }
}

/// Patch `i` = shape row + color row (or the background row) + position row
/// + N(0, σ²) noise drawn from `noise_seed`.
pub fn render_patches(scene: &SceneSpec, noise_seed: u64, sigma: f64, dim: usize) -> PatchSequence {
    let n = scene.cells.len();
    let t = tables(dim, n);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::with_capacity(n * dim);
    for (i, cell) in scene.cells.iter().enumerate() {
        for j in 0..dim {
            let base = match cell {
                Some(c) => t.shapes[c.shape][j] + t.colors[c.color][j],
                None => t.background[j],
            };
            let eps = if sigma > 0.0 { sigma * noise.sample(&mut rng) } else { 0.0 };
            data.push((base + t.positions[i][j] + eps) as f32);
        }
    }
    PatchSequence { n, dim, data }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionOutcome {
    pub corrupted: TokenSequence,
    pub target: TokenSequence,
    /// (first word index, length); length 0 marks a MASK inserted before that word.
    pub span_log: Vec<(usize, usize)>,
}

impl CorruptionOutcome {
    pub fn masked_words(&self) -> usize {
        self.span_log.iter().map(|s| s.1).sum()
    }
}

/// Whole-word span masking with Poisson span lengths.
///
/// Spans are drawn until `⌈rate · words⌉` words are masked; the last span is
/// truncated to the remaining budget. Zero-length draws insert a MASK between
/// words without consuming budget. Each span becomes exactly one MASK.
pub fn corrupt_spans<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    rate: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<CorruptionOutcome> {
    tokens.check_kind(TokenKind::StudentText)?;
    if !(0.0..1.0).contains(&rate) {
        return Err(VlkdError::Contract(format!("corruption rate {rate} outside [0, 1)")));
    }
    if lambda <= 0.0 {
        return Err(VlkdError::Contract(format!("span lambda {lambda} must be positive")));
    }
    let words = &tokens.ids[1..tokens.ids.len() - 1];
    let n = words.len();
    let untouched = || CorruptionOutcome {
        corrupted: tokens.clone(),
        target: tokens.clone(),
        span_log: vec![],
    };
    if n < 2 {
        return Ok(untouched());
    }
    let budget = (rate * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if budget == 0 {
        return Ok(untouched());
    }
    let poisson = Poisson::new(lambda).map_err(|e| VlkdError::Contract(e.to_string()))?;
    let mut masked = vec![false; n];
    let mut inserts = vec![false; n + 1];
    let mut spans = Vec::new();
    let mut remaining = budget;
    while remaining > 0 {
        let draw = poisson.sample(rng) as usize;
        if draw == 0 {
            let gaps: Vec<usize> = (0..=n)
                .filter(|&g| !inserts[g] && !(g > 0 && g < n && masked[g - 1] && masked[g]))
                .collect();
            if !gaps.is_empty() {
                let g = gaps[rng.random_range(0..gaps.len())];
                inserts[g] = true;
                spans.push((g, 0));
            }
            continue;
        }
        let mut len = draw.min(remaining);
        let starts = loop {
            let s: Vec<usize> = (0..=n - len)
                .filter(|&s| !masked[s..s + len].iter().any(|&m| m) && !inserts[s + 1..s + len].iter().any(|&i| i))
                .collect();
            if !s.is_empty() || len == 1 {
                break s;
            }
            len -= 1;
        };
        if starts.is_empty() {
            // Only reachable if every free word is boxed in; the budget never exceeds the word count.
            break;
        }
        let s = starts[rng.random_range(0..starts.len())];
        masked[s..s + len].iter_mut().for_each(|m| *m = true);
        spans.push((s, len));
        remaining -= len;
    }
    spans.sort_unstable();
    let mut ids = vec![tokens.ids[0]];
    let mut next = spans.iter().peekable();
    let mut i = 0;
    while i <= n {
        if let Some(&&(s, len)) = next.peek() {
            if s == i {
                next.next();
                ids.push(MASK);
                i += len;
                continue;
            }
        }
        if i < n {
            ids.push(words[i]);
        }
        i += 1;
    }
    ids.push(*tokens.ids.last().unwrap());
    Ok(CorruptionOutcome {
        corrupted: TokenSequence {
            ids,
            kind: TokenKind::StudentText,
        },
        target: tokens.clone(),
        span_log: spans,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTask {
    Caption,
    Vqa,
}

pub const CAPTION_PREFIX: &str = "a picture of";
pub const ANSWER_MARKER: &str = "answer";

/// Encoder input for mask-prompted generation.
pub fn build_prompt(vocab: &Vocab, task: PromptTask, question: Option<&str>, masks: usize) -> Result<TokenSequence> {
    if masks < 1 {
        return Err(VlkdError::Contract("prompt needs at least one mask".into()));
    }
    let slots = vec![MASK_TOKEN; masks].join(" ");
    let text = match (task, question) {
        (PromptTask::Caption, _) => format!("{CAPTION_PREFIX} {slots}."),
        (PromptTask::Vqa, Some(q)) => format!("{q} {ANSWER_MARKER}: {slots}."),
        (PromptTask::Vqa, None) => return Err(VlkdError::Contract("vqa prompt requires a question".into())),
    };
    vocab.tokenize(&text, TokenKind::StudentText)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JsonCell {
    shape: String,
    color: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    seed: u64,
    caption: String,
    qa: Vec<QaItem>,
    grid: Vec<Vec<Option<JsonCell>>>,
}

impl From<&Pair> for JsonRecord {
    fn from(p: &Pair) -> Self {
        let g = p.scene.grid;
        let grid = (0..g)
            .map(|r| {
                (0..g)
                    .map(|c| {
                        p.scene.cells[r * g + c].map(|cell| JsonCell {
                            shape: SHAPES[cell.shape].into(),
                            color: COLORS[cell.color].into(),
                        })
                    })
                    .collect()
            })
            .collect();
        JsonRecord {
            seed: p.scene.seed,
            caption: p.caption.clone(),
            qa: p.qa.clone(),
            grid,
        }
    }
}

fn lookup(catalog: &[&str], name: &str) -> Result<usize> {
    catalog.iter().position(|s| *s == name).ok_or_else(|| VlkdError::UnknownWord(name.into()))
}

impl TryFrom<JsonRecord> for Pair {
    type Error = VlkdError;
    fn try_from(r: JsonRecord) -> Result<Self> {
        let grid = r.grid.len();
        let mut cells = Vec::with_capacity(grid * grid);
        for row in r.grid {
            if row.len() != grid {
                return Err(VlkdError::Format("dataset grid is not square".into()));
            }
            for c in row {
                cells.push(match c {
                    Some(c) => Some(Cell {
                        shape: lookup(&SHAPES, &c.shape)?,
                        color: lookup(&COLORS, &c.color)?,
                    }),
                    None => None,
                });
            }
        }
        Ok(Pair {
            scene: SceneSpec {
                grid,
                cells,
                seed: r.seed,
            },
            caption: r.caption,
            qa: r.qa,
        })
    }
}

/// Writes one JSON record per pair. Patches are not stored; they are
/// re-rendered from the scene.
pub fn write_jsonl(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, &JsonRecord::from(p))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Pair>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)?;
        out.push(Pair::try_from(rec)?);
    }
    Ok(out)
}

/// Noise seed used when rendering a pair's patches.
pub fn noise_seed(scene_seed: u64, epoch: u64) -> u64 {
    splitmix64(scene_seed ^ 0x6e6f_6973_65 ^ splitmix64(epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_splits_and_rejoins() {
        assert_eq!(split_words("what color is it? answer: red."), ["what", "color", "is", "it", "?", "answer", ":", "red", "."]);
        assert_eq!(join_words(&split_words("what color is it? answer: red.")), "what color is it? answer: red.");
    }

    #[test]
    fn corruption_rebuild_matches_log() {
        let v = synthetic_vocab();
        let seq = v.tokenize("a red circle above a blue square", TokenKind::StudentText).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let o = corrupt_spans(&seq, 0.4, 3.0, &mut rng).unwrap();
            let masks = o.corrupted.ids.iter().filter(|&&i| i == MASK).count();
            assert_eq!(masks, o.span_log.len());
            assert_eq!(o.masked_words(), 3);
            assert_eq!(o.corrupted.len(), seq.len() - 3 + masks);
        }
    }
}
