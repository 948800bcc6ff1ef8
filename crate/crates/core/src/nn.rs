//! Pre-norm transformer building blocks over a [`ParamStore`].
//!
//! Every block owns only parameter ids; values live in the store so a whole
//! model can be cast, checkpointed or frozen as one unit.

use numcore::{AttentionLayout, Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

pub fn gaussian<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| T::of(normal.sample(rng)))
}

pub fn constant<T: Float>(shape: &[usize], value: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(value))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weight `[d_in, d_out]` with std `1/√d_in`, zero bias.
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), gaussian(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt()), true)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), constant(&[d_out], 0.0), false)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<T: Float>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = t.param(s, self.w);
        let y = t.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = t.param(s, b);
                t.add_bias(y, b)?
            }
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), constant(&[d], 1.0), false)?,
            bias: store.add(format!("{name}.bias"), constant(&[d], 0.0), false)?,
        })
    }

    pub fn forward<T: Float>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = t.param(s, self.gain);
        let b = t.param(s, self.bias);
        Ok(t.layer_norm(x, g, b, LN_EPS)?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        x_q: Var,
        x_kv: Var,
        layout: AttentionLayout,
    ) -> Result<Var> {
        let q = self.q.forward(t, s, x_q)?;
        let k = self.k.forward(t, s, x_kv)?;
        let v = self.v.forward(t, s, x_kv)?;
        let a = t.attention(q, k, v, layout)?;
        self.o.forward(t, s, a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(t, s, x)?;
        let h = t.gelu(h);
        self.down.forward(t, s, h)
    }
}

/// Self-attention block followed by a feed-forward block, both pre-norm residual.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, hidden, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var, layout: &AttentionLayout) -> Result<Var> {
        let h = self.ln1.forward(t, s, x)?;
        let a = self.attn.forward(t, s, h, h, layout.clone())?;
        let x = t.add(x, a)?;
        let h = self.ln2.forward(t, s, x)?;
        let f = self.ffn.forward(t, s, h)?;
        Ok(t.add(x, f)?)
    }
}

/// Causal self-attention, cross-attention over a context, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            self_attn: Attention::new(store, &format!("{name}.self"), d, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            cross_attn: Attention::new(store, &format!("{name}.cross"), d, rng)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, hidden, rng)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
        context: Var,
        self_layout: &AttentionLayout,
        cross_layout: &AttentionLayout,
    ) -> Result<Var> {
        let h = self.ln1.forward(t, s, x)?;
        let a = self.self_attn.forward(t, s, h, h, self_layout.clone())?;
        let x = t.add(x, a)?;
        let h = self.ln2.forward(t, s, x)?;
        let c = self.cross_attn.forward(t, s, h, context, cross_layout.clone())?;
        let x = t.add(x, c)?;
        let h = self.ln3.forward(t, s, x)?;
        let f = self.ffn.forward(t, s, h)?;
        Ok(t.add(x, f)?)
    }
}

/// Right-pads sequences to a common length. Returns the flat ids, the
/// validity mask and the padded length.
pub fn pad_batch(seqs: &[&[usize]], pad: usize) -> (Vec<usize>, Vec<bool>, usize) {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut mask = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        ids.extend_from_slice(s);
        mask.extend(std::iter::repeat_n(true, s.len()));
        ids.extend(std::iter::repeat_n(pad, len - s.len()));
        mask.extend(std::iter::repeat_n(false, len - s.len()));
    }
    (ids, mask, len)
}

/// Row indices `[0, 1, .., len-1]` repeated for every batch item.
pub fn positions(batch: usize, len: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..len).collect()
}
