//! Toy encoder-decoder student: bidirectional encoder, causal decoder with
//! cross-attention, output layer tied to the token embedding.

use numcore::{AttentionLayout, CeTargets, Float, ParamId, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VlkdError};
use crate::nn::{constant, gaussian, pad_batch, positions, DecoderLayer, EncoderLayer, LayerNorm};
use crate::textdata::{synthetic_vocab, CorruptionOutcome, TokenKind, TokenSequence, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub d2: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            d2: 96,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn: 192,
            vocab_size: synthetic_vocab().len(),
            max_len: 32,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(VlkdError::Config {
                key: format!("student.{key}"),
                detail: detail.into(),
            })
        };
        if self.heads == 0 || !self.d2.is_multiple_of(self.heads) {
            return bad("heads", "d2 must be divisible by heads");
        }
        if self.d2 == 0 || self.ffn == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("d2", "dimensions must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len", "must fit BOS and EOS");
        }
        if self.vocab_size < 6 {
            return bad("vocab_size", "too small for the reserved tokens");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct StudentParams {
    tok: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc_layers: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    dec_layers: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    out_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Student<T: Float> {
    pub cfg: StudentConfig,
    pub store: ParamStore<T>,
    p: StudentParams,
}

/// Raw encoder outputs `E` stacked as `[batch·len, d2]` with a validity mask.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub e: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Rows the decoder cross-attends to, `[batch·len, d2]`.
#[derive(Debug, Clone)]
pub struct Context {
    pub c: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl From<&Encoding> for Context {
    fn from(e: &Encoding) -> Self {
        Context {
            c: e.e,
            mask: e.mask.clone(),
            batch: e.batch,
            len: e.len,
        }
    }
}

impl Context {
    /// Repeats example rows: output item `i` is input item `pick[i]`.
    pub fn select<T: Float>(&self, t: &mut Tape<T>, pick: &[usize]) -> Result<Context> {
        let rows: Vec<usize> = pick.iter().flat_map(|&b| b * self.len..(b + 1) * self.len).collect();
        let mask = pick
            .iter()
            .flat_map(|&b| self.mask[b * self.len..(b + 1) * self.len].iter().copied())
            .collect();
        Ok(Context {
            c: t.gather_rows(self.c, &rows)?,
            mask,
            batch: pick.len(),
            len: self.len,
        })
    }
}

/// Decoder outputs `[batch·len, vocab]`.
#[derive(Debug, Clone, Copy)]
pub struct Logits {
    pub logits: Var,
    pub batch: usize,
    pub len: usize,
}

impl<T: Float> Student<T> {
    pub fn new(cfg: StudentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.d2;
        let tok = s.add("tok", gaussian(&mut rng, &[cfg.vocab_size, d], 0.02), true)?;
        let enc_pos = s.add("enc.pos", gaussian(&mut rng, &[cfg.max_len, d], 0.02), true)?;
        let dec_pos = s.add("dec.pos", gaussian(&mut rng, &[cfg.max_len, d], 0.02), true)?;
        let enc_layers = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("enc.layer{i}"), d, cfg.ffn, &mut rng))
            .collect::<Result<_>>()?;
        let enc_ln = LayerNorm::new(&mut s, "enc.ln", d)?;
        let dec_layers = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(&mut s, &format!("dec.layer{i}"), d, cfg.ffn, &mut rng))
            .collect::<Result<_>>()?;
        let dec_ln = LayerNorm::new(&mut s, "dec.ln", d)?;
        let out_bias = s.add("out.bias", constant(&[cfg.vocab_size], 0.0), false)?;
        Ok(Student {
            cfg,
            store: s,
            p: StudentParams {
                tok,
                enc_pos,
                dec_pos,
                enc_layers,
                enc_ln,
                dec_layers,
                dec_ln,
                out_bias,
            },
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.cfg.max_len {
            return Err(VlkdError::Length {
                len: ids.len(),
                max: self.cfg.max_len,
            });
        }
        match ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            Some(&bad) => Err(VlkdError::UnknownId(bad)),
            None => Ok(()),
        }
    }

    fn embed(&self, t: &mut Tape<T>, ids: &[usize], pos: ParamId, batch: usize, len: usize) -> Result<Var> {
        let table = t.param(&self.store, self.p.tok);
        let h = t.gather_rows(table, ids)?;
        let pos_table = t.param(&self.store, pos);
        let p = t.gather_rows(pos_table, &positions(batch, len))?;
        Ok(t.add(h, p)?)
    }

    /// Full-attention encoding of student-text sequences.
    pub fn encode(&self, t: &mut Tape<T>, seqs: &[&TokenSequence]) -> Result<Encoding> {
        for seq in seqs {
            seq.check_kind(TokenKind::StudentText)?;
            self.check_ids(&seq.ids)?;
        }
        let b = seqs.len();
        let slices: Vec<&[usize]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
        let (ids, mask, len) = pad_batch(&slices, PAD);
        let mut h = self.embed(t, &ids, self.p.enc_pos, b, len)?;
        let layout = AttentionLayout {
            batch: b,
            q_len: len,
            k_len: len,
            heads: self.cfg.heads,
            causal: false,
            key_mask: Some(mask.clone()),
        };
        for layer in &self.p.enc_layers {
            h = layer.forward(t, &self.store, h, &layout)?;
        }
        let e = self.p.enc_ln.forward(t, &self.store, h)?;
        Ok(Encoding {
            e,
            mask,
            batch: b,
            len,
        })
    }

    /// Next-token logits at every prefix position given the context.
    pub fn decode_logits(&self, t: &mut Tape<T>, ctx: &Context, prefixes: &[&[usize]]) -> Result<Logits> {
        if prefixes.len() != ctx.batch {
            return Err(VlkdError::Contract(format!(
                "{} prefixes for a context batch of {}",
                prefixes.len(),
                ctx.batch
            )));
        }
        let ctx_shape = t.shape(ctx.c).to_vec();
        if ctx_shape != [ctx.batch * ctx.len, self.cfg.d2] {
            return Err(numcore::NumError::Shape {
                op: "decode_logits",
                lhs: ctx_shape,
                rhs: vec![ctx.batch * ctx.len, self.cfg.d2],
            }
            .into());
        }
        for p in prefixes {
            self.check_ids(p)?;
        }
        let b = prefixes.len();
        let (ids, mask, len) = pad_batch(prefixes, PAD);
        let mut h = self.embed(t, &ids, self.p.dec_pos, b, len)?;
        let self_layout = AttentionLayout {
            batch: b,
            q_len: len,
            k_len: len,
            heads: self.cfg.heads,
            causal: true,
            key_mask: Some(mask),
        };
        let cross_layout = AttentionLayout {
            batch: b,
            q_len: len,
            k_len: ctx.len,
            heads: self.cfg.heads,
            causal: false,
            key_mask: Some(ctx.mask.clone()),
        };
        for layer in &self.p.dec_layers {
            h = layer.forward(t, &self.store, h, ctx.c, &self_layout, &cross_layout)?;
        }
        h = self.p.dec_ln.forward(t, &self.store, h)?;
        let table = t.param(&self.store, self.p.tok);
        let logits = t.matmul_bt(h, table)?;
        let bias = t.param(&self.store, self.p.out_bias);
        let logits = t.add_bias(logits, bias)?;
        Ok(Logits { logits, batch: b, len })
    }

    /// Teacher-forced negative log-likelihood of full target sequences:
    /// mean over each sequence's predicted positions, then weighted mean over
    /// the batch (weights default to 1).
    pub fn target_loss(
        &self,
        t: &mut Tape<T>,
        ctx: &Context,
        targets: &[&TokenSequence],
        smoothing: f64,
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let inputs: Vec<&[usize]> = targets.iter().map(|s| &s.ids[..s.len() - 1]).collect();
        let out = self.decode_logits(t, ctx, &inputs)?;
        let ce = sequence_targets(targets, out.len, smoothing, weights)?;
        Ok(t.cross_entropy_smoothed(out.logits, ce)?)
    }

    /// Reconstruct each original sentence from its corrupted encoding.
    pub fn infill_loss(&self, t: &mut Tape<T>, outcomes: &[&CorruptionOutcome]) -> Result<Var> {
        let corrupted: Vec<&TokenSequence> = outcomes.iter().map(|o| &o.corrupted).collect();
        let targets: Vec<&TokenSequence> = outcomes.iter().map(|o| &o.target).collect();
        let enc = self.encode(t, &corrupted)?;
        self.target_loss(t, &Context::from(&enc), &targets, 0.0, None)
    }

    pub fn cast<U: Float>(&self) -> Student<U> {
        Student {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            p: self.p.clone(),
        }
    }
}

/// Labels `target[1..]` laid out against padded decoder rows of length `len`,
/// with row weights chosen so the token-level mean equals the mean over
/// sequences of each sequence's own token mean.
pub fn sequence_targets<T: Float>(
    targets: &[&TokenSequence],
    len: usize,
    smoothing: f64,
    weights: Option<&[f64]>,
) -> Result<CeTargets<T>> {
    if let Some(w) = weights {
        if w.len() != targets.len() {
            return Err(VlkdError::Contract(format!("{} weights for {} targets", w.len(), targets.len())));
        }
    }
    let b = targets.len();
    let total: usize = targets.iter().map(|s| s.len() - 1).sum();
    let mut ids = Vec::with_capacity(b * len);
    let mut row_w = Vec::with_capacity(b * len);
    for (k, s) in targets.iter().enumerate() {
        let n = s.len() - 1;
        let w = weights.map_or(1.0, |w| w[k]) * total as f64 / (b * n) as f64;
        for j in 0..len {
            ids.push(if j < n { Some(s.ids[j + 1]) } else { None });
            row_w.push(T::of(w));
        }
    }
    Ok(CeTargets {
        ids,
        smoothing,
        weights: Some(row_w),
    })
}
