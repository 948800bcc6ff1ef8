//! Distillation objectives and the projection stack joining student and
//! teacher spaces.

use std::collections::BTreeSet;

use numcore::{CeTargets, Float, NumError, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VlkdError};
use crate::nn::gaussian;
use crate::student::{Context, Encoding, Student};
use crate::teacher::{Teacher, VisualContextMode, TAU_INIT};
use crate::textdata::{CorruptionOutcome, PatchSequence, TokenSequence};

/// Right pseudo-inverse `Wᵀ(WWᵀ)⁻¹` of a row-major `d1×d2` matrix (`d1 ≤ d2`),
/// returned row-major `d2×d1`.
///
/// The Gram matrix is Cholesky-factored; if the smallest pivot is tiny
/// relative to the largest, a ridge of `1e-8` times the mean diagonal is
/// added before refactoring.
pub fn pseudo_inverse(w: &[f64], d1: usize, d2: usize) -> Result<Vec<f64>> {
    if w.len() != d1 * d2 || d1 == 0 || d1 > d2 {
        return Err(NumError::Shape {
            op: "pseudo_inverse",
            lhs: vec![d1, d2],
            rhs: vec![w.len()],
        }
        .into());
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(NumError::Numeric("pseudo_inverse: non-finite entry".into()).into());
    }
    let mut gram = vec![0.0; d1 * d1];
    for i in 0..d1 {
        for j in 0..=i {
            let dot: f64 = (0..d2).map(|k| w[i * d2 + k] * w[j * d2 + k]).sum();
            gram[i * d1 + j] = dot;
            gram[j * d1 + i] = dot;
        }
    }
    let mean_diag = (0..d1).map(|i| gram[i * d1 + i]).sum::<f64>() / d1 as f64;
    let factor = match cholesky(&gram, d1) {
        Some((l, min, max)) if min > 1e-12 * max => l,
        _ => {
            let mut ridged = gram.clone();
            for i in 0..d1 {
                ridged[i * d1 + i] += 1e-8 * mean_diag;
            }
            match cholesky(&ridged, d1) {
                Some((l, min, max)) if max > 0.0 && min > 1e-14 * max => l,
                other => {
                    let sigma = other.map_or(0.0, |(_, min, _)| min.max(0.0).sqrt());
                    return Err(NumError::Numeric(format!(
                        "pseudo_inverse: matrix is rank-deficient, smallest singular value estimate {sigma:e}"
                    ))
                    .into());
                }
            }
        }
    };
    // Y = G⁻¹W column by column, then X = Yᵀ.
    let mut x = vec![0.0; d2 * d1];
    let mut col = vec![0.0; d1];
    for k in 0..d2 {
        for i in 0..d1 {
            let mut s = w[i * d2 + k];
            for j in 0..i {
                s -= factor[i * d1 + j] * col[j];
            }
            col[i] = s / factor[i * d1 + i];
        }
        for i in (0..d1).rev() {
            let mut s = col[i];
            for j in i + 1..d1 {
                s -= factor[j * d1 + i] * col[j];
            }
            col[i] = s / factor[i * d1 + i];
        }
        x[k * d1..(k + 1) * d1].copy_from_slice(&col);
    }
    Ok(x)
}

/// Lower Cholesky factor plus the smallest and largest squared pivots.
fn cholesky(a: &[f64], n: usize) -> Option<(Vec<f64>, f64, f64)> {
    let mut l = vec![0.0; n * n];
    let (mut min, mut max) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                min = min.min(s);
                max = max.max(s);
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some((l, min, max))
}

/// Trainable glue: `W_e` (`d1×d2`), `W_i` (`d2×d1`), `W′_e` (`d2×d1`) and the
/// log inverse temperature.
#[derive(Debug, Clone)]
pub struct Projections<T: Float> {
    pub store: ParamStore<T>,
    pub d1: usize,
    pub d2: usize,
    w_e: ParamId,
    w_i: ParamId,
    w_e_prime: ParamId,
    log_inv_tau: ParamId,
}

impl<T: Float> Projections<T> {
    /// Gaussian `W_e` (std `1/√d2`) and `W_i` (std `1/√d1`); `W′_e` is the
    /// pseudo-inverse of `W_e`; `τ = 0.07`.
    pub fn init(d1: usize, d2: usize, seed: u64) -> Result<Self> {
        if d1 == 0 || d1 > d2 {
            return Err(VlkdError::Contract(format!("projections need 0 < d1 ≤ d2, got {d1} and {d2}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_e: Tensor<f64> = gaussian(&mut rng, &[d1, d2], 1.0 / (d2 as f64).sqrt());
        let w_i: Tensor<f64> = gaussian(&mut rng, &[d2, d1], 1.0 / (d1 as f64).sqrt());
        let pinv = pseudo_inverse(w_e.data(), d1, d2)?;
        let mut store = ParamStore::new();
        let w_e = store.add("w_e", w_e.cast(), true)?;
        let w_i = store.add("w_i", w_i.cast(), true)?;
        let w_e_prime = store.add("w_e_prime", Tensor::from_f64(vec![d2, d1], &pinv)?, true)?;
        let log_inv_tau = store.add("log_inv_tau", Tensor::from_f64(vec![1], &[(1.0 / TAU_INIT).ln()])?, false)?;
        Ok(Projections {
            store,
            d1,
            d2,
            w_e,
            w_i,
            w_e_prime,
            log_inv_tau,
        })
    }

    pub fn w_e(&self) -> &Tensor<T> {
        self.store.tensor(self.w_e)
    }

    pub fn w_i(&self) -> &Tensor<T> {
        self.store.tensor(self.w_i)
    }

    pub fn w_e_prime(&self) -> &Tensor<T> {
        self.store.tensor(self.w_e_prime)
    }

    pub fn tau(&self) -> f64 {
        (-self.store.tensor(self.log_inv_tau).data()[0].as_f64()).exp()
    }

    pub fn log_inv_tau(&self, t: &mut Tape<T>) -> Var {
        t.param(&self.store, self.log_inv_tau)
    }

    pub fn cast<U: Float>(&self) -> Projections<U> {
        Projections {
            store: self.store.cast(),
            d1: self.d1,
            d2: self.d2,
            w_e: self.w_e,
            w_i: self.w_i,
            w_e_prime: self.w_e_prime,
            log_inv_tau: self.log_inv_tau,
        }
    }

    /// `l2_normalize(W_e ē)` with `ē` the mean of the non-pad rows of `E`.
    pub fn sentence_embedding(&self, t: &mut Tape<T>, enc: &Encoding) -> Result<Var> {
        let mean = t.masked_mean_rows(enc.e, &enc.mask, enc.batch)?;
        let w = t.param(&self.store, self.w_e);
        let p = t.matmul_bt(mean, w)?;
        Ok(t.l2_normalize(p, 1)?)
    }

    /// Per example: `W_i V` rows followed by `W′_e W_e E` rows.
    pub fn decoder_context(&self, t: &mut Tape<T>, v: Var, rows: usize, enc: &Encoding) -> Result<Context> {
        let b = enc.batch;
        let v_shape = t.shape(v).to_vec();
        if v_shape != [b * rows, self.d1] {
            return Err(NumError::Shape {
                op: "decoder_context",
                lhs: v_shape,
                rhs: vec![b * rows, self.d1],
            }
            .into());
        }
        let w_i = t.param(&self.store, self.w_i);
        let vis = t.matmul_bt(v, w_i)?;
        let w_e = t.param(&self.store, self.w_e);
        let w_ep = t.param(&self.store, self.w_e_prime);
        let joint = t.matmul_bt(enc.e, w_e)?;
        let txt = t.matmul_bt(joint, w_ep)?;
        let stacked = t.concat_rows(vis, txt)?;
        let len = enc.len;
        let order: Vec<usize> = (0..b)
            .flat_map(|k| (k * rows..(k + 1) * rows).chain(b * rows + k * len..b * rows + (k + 1) * len))
            .collect();
        let c = t.gather_rows(stacked, &order)?;
        let mask = (0..b)
            .flat_map(|k| std::iter::repeat_n(true, rows).chain(enc.mask[k * len..(k + 1) * len].iter().copied()))
            .collect();
        Ok(Context {
            c,
            mask,
            batch: b,
            len: rows + len,
        })
    }
}

/// Mean squared distance between matched unit rows.
pub fn loss_ttdm<T: Float>(t: &mut Tape<T>, t_eos: Var, e_norm: Var) -> Result<Var> {
    let b = t.shape(t_eos)[0];
    let d = t.sub(t_eos, e_norm)?;
    let sq = t.mul(d, d)?;
    let s = t.sum(sq);
    Ok(t.scale(s, T::of(1.0 / b as f64)))
}

/// Symmetric InfoNCE with logits `v e_normᵀ · exp(log_inv_tau)`.
pub fn loss_itcl<T: Float>(t: &mut Tape<T>, v: Var, e_norm: Var, log_inv_tau: Var) -> Result<Var> {
    let b = t.shape(v)[0];
    let sim = t.matmul_bt(v, e_norm)?;
    let inv_tau = t.exp(log_inv_tau);
    let logits = t.mul_scalar(sim, inv_tau)?;
    let diag: Vec<Option<usize>> = (0..b).map(Some).collect();
    let i2t = t.cross_entropy_smoothed(logits, CeTargets::plain(diag.clone()))?;
    let cols = t.transpose(logits)?;
    let t2i = t.cross_entropy_smoothed(cols, CeTargets::plain(diag))?;
    let both = t.add(i2t, t2i)?;
    Ok(t.scale(both, T::of(0.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ttdm,
    Itcl,
    Icti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ttdm: f64,
    pub itcl: f64,
    pub icti: f64,
    pub total: f64,
    pub tau: f64,
    pub gamma: f64,
}

/// The combined objective, evaluated in the same order as on the tape.
pub fn combine<T: Float>(gamma: T, ttdm: T, itcl: T, icti: T) -> T {
    gamma * ttdm + itcl + icti
}

/// One prepared distillation batch; corruption and patch noise are already
/// drawn so the loss is a pure function of the parameters.
#[derive(Debug, Clone)]
pub struct VlkdBatch {
    pub images: Vec<PatchSequence>,
    pub teacher_texts: Vec<TokenSequence>,
    pub clean: Vec<TokenSequence>,
    pub corrupted: Vec<CorruptionOutcome>,
}

impl VlkdBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LossSettings {
    pub gamma: f64,
    pub disable: BTreeSet<Objective>,
    pub mode: VisualContextMode,
    /// Wrap teacher outputs in stop-gradient (always true outside the
    /// unfrozen-teacher contrast arm).
    pub frozen_teacher: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            gamma: 1000.0,
            disable: BTreeSet::new(),
            mode: VisualContextMode::ClsOnly,
            frozen_teacher: true,
        }
    }
}

/// Records the full objective on `t` and returns its parts.
///
/// TTDM and ITCL compare the student encoding of the clean caption with the
/// teacher; ICTI decodes the clean caption from the corrupted encoding
/// concatenated with the projected visual context.
pub fn vlkd_loss<T: Float>(
    t: &mut Tape<T>,
    batch: &VlkdBatch,
    teacher: &Teacher<T>,
    student: &Student<T>,
    proj: &Projections<T>,
    settings: &LossSettings,
) -> Result<(LossBreakdown, Var)> {
    if settings.disable.contains(&Objective::Icti) {
        return Err(VlkdError::Contract("the infilling objective cannot be disabled".into()));
    }
    if batch.is_empty() {
        return Err(VlkdError::Contract("empty distillation batch".into()));
    }
    let guard = |t: &mut Tape<T>, v: Var| if settings.frozen_teacher { t.stop_gradient(v) } else { v };
    let images: Vec<&PatchSequence> = batch.images.iter().collect();
    let img = teacher.encode_images(t, &images)?;
    let use_ttdm = !settings.disable.contains(&Objective::Ttdm);
    let use_itcl = !settings.disable.contains(&Objective::Itcl);
    let zero = t.constant(vec![], vec![T::zero()])?;
    let (mut ttdm, mut itcl) = (zero, zero);
    if use_ttdm || use_itcl {
        let clean: Vec<&TokenSequence> = batch.clean.iter().collect();
        let enc = student.encode(t, &clean)?;
        let e_norm = proj.sentence_embedding(t, &enc)?;
        if use_ttdm {
            let texts: Vec<&TokenSequence> = batch.teacher_texts.iter().collect();
            let t_eos = teacher.encode_texts(t, &texts)?;
            let t_eos = guard(t, t_eos);
            ttdm = loss_ttdm(t, t_eos, e_norm)?;
        }
        if use_itcl {
            let v_cls = guard(t, img.v_cls);
            let lit = proj.log_inv_tau(t);
            itcl = loss_itcl(t, v_cls, e_norm, lit)?;
        }
    }
    let corrupted: Vec<&TokenSequence> = batch.corrupted.iter().map(|o| &o.corrupted).collect();
    let enc = student.encode(t, &corrupted)?;
    let (v, rows) = img.context(settings.mode);
    let v = guard(t, v);
    let ctx = proj.decoder_context(t, v, rows, &enc)?;
    let targets: Vec<&TokenSequence> = batch.corrupted.iter().map(|o| &o.target).collect();
    let icti = student.target_loss(t, &ctx, &targets, 0.0, None)?;

    let weighted = t.scale(ttdm, T::of(settings.gamma));
    let partial = t.add(weighted, itcl)?;
    let total = t.add(partial, icti)?;
    let breakdown = LossBreakdown {
        ttdm: t.scalar(ttdm)?.as_f64(),
        itcl: t.scalar(itcl)?.as_f64(),
        icti: t.scalar(icti)?.as_f64(),
        total: t.scalar(total)?.as_f64(),
        tau: proj.tau(),
        gamma: settings.gamma,
    };
    Ok((breakdown, total))
}
