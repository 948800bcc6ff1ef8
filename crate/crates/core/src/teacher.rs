//! Toy dual-stream contrastive teacher: a patch encoder and a causal text
//! encoder meeting in a shared `d1`-dimensional space.

use numcore::{AttentionLayout, Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VlkdError};
use crate::nn::{gaussian, pad_batch, positions, Attention, EncoderLayer, LayerNorm, Linear};
use crate::textdata::{synthetic_vocab, PatchSequence, TokenKind, TokenSequence, EOS, PAD};

/// Shape of the visual context handed to the student decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualContextMode {
    /// One row: the image summary embedding.
    ClsOnly,
    /// One row per patch, taken after the attention-pooling layer.
    FullSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub d1: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub d_img: usize,
    pub grid: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub visual_context_mode: VisualContextMode,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            d1: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            d_img: 16,
            grid: 3,
            max_text_len: 16,
            vocab_size: synthetic_vocab().len(),
            visual_context_mode: VisualContextMode::ClsOnly,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(VlkdError::Config {
                key: format!("teacher.{key}"),
                detail: detail.into(),
            })
        };
        if self.heads == 0 || !self.d1.is_multiple_of(self.heads) {
            return bad("heads", "d1 must be divisible by heads");
        }
        if self.d1 == 0 || self.ffn == 0 || self.d_img == 0 || self.grid == 0 || self.layers == 0 {
            return bad("d1", "dimensions must be positive");
        }
        if self.max_text_len < 2 {
            return bad("max_text_len", "must fit SOS and EOS");
        }
        if self.vocab_size < 6 {
            return bad("vocab_size", "too small for the reserved tokens");
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Debug, Clone)]
struct TeacherParams {
    patch: Linear,
    cls: ParamId,
    img_pos: ParamId,
    img_layers: Vec<EncoderLayer>,
    img_ln: LayerNorm,
    pool_ln: LayerNorm,
    pool: Attention,
    img_proj: ParamId,
    tok: ParamId,
    txt_pos: ParamId,
    txt_layers: Vec<EncoderLayer>,
    txt_ln: LayerNorm,
    txt_proj: ParamId,
    log_inv_tau: ParamId,
}

#[derive(Debug, Clone)]
pub struct Teacher<T: Float> {
    pub cfg: TeacherConfig,
    pub store: ParamStore<T>,
    p: TeacherParams,
}

/// Image-side outputs. `v_cls` is the unit-norm `[B, d1]` image embedding;
/// `cls` (`[B, d1]`) and `patches` (`[B·n1, d1]`) are the same pooled
/// embeddings before normalization.
#[derive(Debug, Clone, Copy)]
pub struct ImageOutput {
    pub v_cls: Var,
    pub cls: Var,
    pub patches: Var,
    pub batch: usize,
    pub n1: usize,
}

impl ImageOutput {
    /// Context rows per example for the given mode, and the stacked rows.
    pub fn context(&self, mode: VisualContextMode) -> (Var, usize) {
        match mode {
            VisualContextMode::ClsOnly => (self.cls, 1),
            VisualContextMode::FullSequence => (self.patches, self.n1),
        }
    }
}

pub const TAU_INIT: f64 = 0.07;

impl<T: Float> Teacher<T> {
    pub fn new(cfg: TeacherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.d1;
        let n1 = cfg.n_patches();
        let patch = Linear::new(&mut s, "img.patch", cfg.d_img, d, true, &mut rng)?;
        let cls = s.add("img.cls", gaussian(&mut rng, &[1, d], 0.02), true)?;
        let img_pos = s.add("img.pos", gaussian(&mut rng, &[n1 + 1, d], 0.02), true)?;
        let img_layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("img.layer{i}"), d, cfg.ffn, &mut rng))
            .collect::<Result<_>>()?;
        let img_ln = LayerNorm::new(&mut s, "img.ln", d)?;
        let pool_ln = LayerNorm::new(&mut s, "img.pool_ln", d)?;
        let pool = Attention::new(&mut s, "img.pool", d, &mut rng)?;
        let img_proj = s.add("img.proj", gaussian(&mut rng, &[d, d], 1.0 / (d as f64).sqrt()), true)?;
        let tok = s.add("txt.tok", gaussian(&mut rng, &[cfg.vocab_size, d], 0.02), true)?;
        let txt_pos = s.add("txt.pos", gaussian(&mut rng, &[cfg.max_text_len, d], 0.02), true)?;
        let txt_layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("txt.layer{i}"), d, cfg.ffn, &mut rng))
            .collect::<Result<_>>()?;
        let txt_ln = LayerNorm::new(&mut s, "txt.ln", d)?;
        let txt_proj = s.add("txt.proj", gaussian(&mut rng, &[d, d], 1.0 / (d as f64).sqrt()), true)?;
        let log_inv_tau = s.add("log_inv_tau", Tensor::from_f64(vec![1], &[(1.0 / TAU_INIT).ln()])?, false)?;
        Ok(Teacher {
            cfg,
            store: s,
            p: TeacherParams {
                patch,
                cls,
                img_pos,
                img_layers,
                img_ln,
                pool_ln,
                pool,
                img_proj,
                tok,
                txt_pos,
                txt_layers,
                txt_ln,
                txt_proj,
                log_inv_tau,
            },
        })
    }

    pub fn log_inv_tau(&self, t: &mut Tape<T>) -> Var {
        t.param(&self.store, self.p.log_inv_tau)
    }

    pub fn tau(&self) -> f64 {
        (-self.store.tensor(self.p.log_inv_tau).data()[0].as_f64()).exp()
    }

    pub fn encode_images(&self, t: &mut Tape<T>, images: &[&PatchSequence]) -> Result<ImageOutput> {
        let b = images.len();
        let n1 = self.cfg.n_patches();
        let mut flat = Vec::with_capacity(b * n1 * self.cfg.d_img);
        for img in images {
            if img.n != n1 || img.dim != self.cfg.d_img {
                return Err(numcore::NumError::Shape {
                    op: "encode_images",
                    lhs: vec![img.n, img.dim],
                    rhs: vec![n1, self.cfg.d_img],
                }
                .into());
            }
            flat.extend(img.data.iter().map(|&v| T::of(v as f64)));
        }
        let s = &self.store;
        let x = t.constant(vec![b * n1, self.cfg.d_img], flat)?;
        let proj = self.p.patch.forward(t, s, x)?;
        let cls = t.param(s, self.p.cls);
        let stacked = t.concat_rows(proj, cls)?;
        let order: Vec<usize> = (0..b).flat_map(|i| std::iter::once(b * n1).chain(i * n1..(i + 1) * n1)).collect();
        let mut h = t.gather_rows(stacked, &order)?;
        let pos_table = t.param(s, self.p.img_pos);
        let pos = t.gather_rows(pos_table, &positions(b, n1 + 1))?;
        h = t.add(h, pos)?;
        let layout = AttentionLayout {
            batch: b,
            q_len: n1 + 1,
            k_len: n1 + 1,
            heads: self.cfg.heads,
            causal: false,
            key_mask: None,
        };
        for layer in &self.p.img_layers {
            h = layer.forward(t, s, h, &layout)?;
        }
        h = self.p.img_ln.forward(t, s, h)?;
        let pooled_in = self.p.pool_ln.forward(t, s, h)?;
        let pooled = self.p.pool.forward(t, s, pooled_in, pooled_in, layout)?;
        let w = t.param(s, self.p.img_proj);
        let out = t.matmul(pooled, w)?;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * (n1 + 1)).collect();
        let patch_rows: Vec<usize> = (0..b).flat_map(|i| i * (n1 + 1) + 1..(i + 1) * (n1 + 1)).collect();
        let c = t.gather_rows(out, &cls_rows)?;
        let v_cls = t.l2_normalize(c, 1)?;
        let patches = t.gather_rows(out, &patch_rows)?;
        Ok(ImageOutput {
            v_cls,
            cls: c,
            patches,
            batch: b,
            n1,
        })
    }

    /// Unit-norm projection of the final EOS embedding, `[B, d1]`.
    pub fn encode_texts(&self, t: &mut Tape<T>, texts: &[&TokenSequence]) -> Result<Var> {
        for seq in texts {
            seq.check_kind(TokenKind::TeacherText)?;
            if seq.len() > self.cfg.max_text_len {
                return Err(VlkdError::Length {
                    len: seq.len(),
                    max: self.cfg.max_text_len,
                });
            }
            if let Some(&bad) = seq.ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
                return Err(VlkdError::UnknownId(bad));
            }
        }
        let b = texts.len();
        let slices: Vec<&[usize]> = texts.iter().map(|s| s.ids.as_slice()).collect();
        let (ids, mask, len) = pad_batch(&slices, PAD);
        let s = &self.store;
        let table = t.param(s, self.p.tok);
        let mut h = t.gather_rows(table, &ids)?;
        let pos_table = t.param(s, self.p.txt_pos);
        let pos = t.gather_rows(pos_table, &positions(b, len))?;
        h = t.add(h, pos)?;
        let layout = AttentionLayout {
            batch: b,
            q_len: len,
            k_len: len,
            heads: self.cfg.heads,
            causal: true,
            key_mask: Some(mask),
        };
        for layer in &self.p.txt_layers {
            h = layer.forward(t, s, h, &layout)?;
        }
        h = self.p.txt_ln.forward(t, s, h)?;
        let eos_rows: Vec<usize> = texts
            .iter()
            .enumerate()
            .map(|(i, seq)| i * len + seq.ids.iter().rposition(|&id| id == EOS).unwrap_or(seq.len() - 1))
            .collect();
        let e = t.gather_rows(h, &eos_rows)?;
        let w = t.param(s, self.p.txt_proj);
        let e = t.matmul(e, w)?;
        Ok(t.l2_normalize(e, 1)?)
    }

    /// Symmetric InfoNCE over the batch with the teacher's own temperature.
    pub fn contrastive_loss(&self, t: &mut Tape<T>, images: &[&PatchSequence], texts: &[&TokenSequence]) -> Result<Var> {
        let img = self.encode_images(t, images)?;
        let txt = self.encode_texts(t, texts)?;
        let lit = self.log_inv_tau(t);
        crate::vlkd::loss_itcl(t, img.v_cls, txt, lit)
    }

    pub fn cast<U: Float>(&self) -> Teacher<U> {
        Teacher {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            p: self.p.clone(),
        }
    }
}
