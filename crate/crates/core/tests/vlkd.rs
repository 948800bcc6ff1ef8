use std::collections::BTreeSet;

use numcore::gradcheck::check_model;
use numcore::Tape;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlkd_core::error::VlkdError;
use vlkd_core::selftest::{tiny_config, toy_batch};
use vlkd_core::student::{Encoding, Student};
use vlkd_core::teacher::{Teacher, VisualContextMode};
use vlkd_core::textdata::synthetic_vocab;
use vlkd_core::vlkd::*;

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
        }
    }
    out
}

fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * d);
    for _ in 0..b {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(row.iter().map(|x| x / n));
    }
    out
}

/// Dense symmetric InfoNCE written out entry by entry.
fn itcl_oracle(v: &[f64], e: &[f64], b: usize, d: usize, tau: f64) -> f64 {
    let s = |i: usize, j: usize| (0..d).map(|k| v[i * d + k] * e[j * d + k]).sum::<f64>() / tau;
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| s(i, j).exp()).sum();
        i2t -= (s(i, i).exp() / row).ln();
        let col: f64 = (0..b).map(|j| s(j, i).exp()).sum();
        t2i -= (s(i, i).exp() / col).ln();
    }
    0.5 * (i2t + t2i) / b as f64
}

fn itcl(v: &[f64], e: &[f64], b: usize, d: usize, tau: f64) -> f64 {
    let mut t = Tape::<f64>::new();
    let vv = t.constant(vec![b, d], v.to_vec()).unwrap();
    let ee = t.constant(vec![b, d], e.to_vec()).unwrap();
    let lit = t.constant(vec![1], vec![(1.0 / tau).ln()]).unwrap();
    let l = loss_itcl(&mut t, vv, ee, lit).unwrap();
    t.scalar(l).unwrap()
}

fn ttdm(a: &[f64], b: &[f64], n: usize, d: usize) -> f64 {
    let mut t = Tape::<f64>::new();
    let x = t.constant(vec![n, d], a.to_vec()).unwrap();
    let y = t.constant(vec![n, d], b.to_vec()).unwrap();
    let l = loss_ttdm(&mut t, x, y).unwrap();
    t.scalar(l).unwrap()
}

#[test]
fn pseudo_inverse_of_selector_and_row() {
    let x = pseudo_inverse(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2, 3).unwrap();
    assert_eq!(x, [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let x = pseudo_inverse(&[3.0, 4.0], 1, 2).unwrap();
    assert!((x[0] - 0.12).abs() < 1e-15 && (x[1] - 0.16).abs() < 1e-15);
}

#[test]
fn pseudo_inverse_residual_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let w: Vec<f64> = (0..64 * 96).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = pseudo_inverse(&w, 64, 96).unwrap();
        let p = matmul(&w, &x, 64, 96, 64);
        let err: f64 = (0..64 * 64)
            .map(|i| (p[i] - if i / 64 == i % 64 { 1.0 } else { 0.0 }).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-6, "residual {err}");
    }
}

#[test]
fn pseudo_inverse_rejects_rank_deficiency_and_bad_shapes() {
    let err = pseudo_inverse(&[0.0; 6], 2, 3).unwrap_err();
    assert!(err.to_string().contains("singular value"), "{err}");
    assert!(pseudo_inverse(&[1.0; 6], 3, 2).is_err());
}

#[test]
fn projections_start_at_pseudo_inverse_and_tau() {
    let p = Projections::<f64>::init(64, 96, 11).unwrap();
    assert!((p.tau() - 0.07).abs() < 1e-15);
    let prod = matmul(p.w_e().data(), p.w_e_prime().data(), 64, 96, 64);
    let err: f64 = (0..64 * 64)
        .map(|i| (prod[i] - if i / 64 == i % 64 { 1.0 } else { 0.0 }).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(err <= 1e-6);
    let q = Projections::<f64>::init(64, 96, 11).unwrap();
    assert_eq!(p.store.fingerprint(), q.store.fingerprint());
    assert!(Projections::<f64>::init(8, 4, 1).is_err());
}

fn encoding(t: &mut Tape<f64>, rows: &[f64], d: usize, mask: Vec<bool>, batch: usize) -> Encoding {
    let len = mask.len() / batch;
    let e = t.constant(vec![mask.len(), d], rows.to_vec()).unwrap();
    Encoding { e, mask, batch, len }
}

fn set(p: &mut Projections<f64>, name: &str, values: &[f64]) {
    let id = p.store.id(name).unwrap();
    p.store.tensor_mut(id).data_mut().copy_from_slice(values);
}

#[test]
fn sentence_embedding_matches_hand_computation() {
    let mut p = Projections::<f64>::init(2, 3, 1).unwrap();
    set(&mut p, "w_e", &[1.0, 0.0, 2.0, 0.0, 1.0, -1.0]);
    let mut t = Tape::new();
    // Two real rows and one padding row.
    let enc = encoding(&mut t, &[1.0, 2.0, 3.0, 3.0, 0.0, 1.0, 9.0, 9.0, 9.0], 3, vec![true, true, false], 1);
    let e = p.sentence_embedding(&mut t, &enc).unwrap();
    // mean = (2, 1, 2); W_e mean = (6, -1); norm √37.
    let n = 37f64.sqrt();
    let got = t.value(e);
    assert!((got[0] - 6.0 / n).abs() < 1e-15 && (got[1] + 1.0 / n).abs() < 1e-15);

    let single = encoding(&mut t, &[1.0, 2.0, 3.0, 5.0, 5.0, 5.0], 3, vec![true, false], 1);
    let e = p.sentence_embedding(&mut t, &single).unwrap();
    let n = 50f64.sqrt();
    let got = t.value(e);
    assert!((got[0] - 7.0 / n).abs() < 1e-15 && (got[1] + 1.0 / n).abs() < 1e-15);
}

#[test]
fn ttdm_reference_values() {
    assert_eq!(ttdm(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2, 2), 0.0);
    assert!((ttdm(&[0.6, 0.8], &[-0.6, -0.8], 1, 2) - 4.0).abs() < 1e-12);
    assert!((ttdm(&[1.0, 0.0], &[0.0, 1.0], 1, 2) - 2.0).abs() < 1e-12);
}

#[test]
fn itcl_reference_values() {
    assert_eq!(itcl(&[0.6, 0.8], &[0.6, 0.8], 1, 2, 0.07), 0.0);
    let eye = [1.0, 0.0, 0.0, 1.0];
    let expected = (1.0 + (-1f64).exp()).ln();
    assert!((itcl(&eye, &eye, 2, 2, 1.0) - expected).abs() < 1e-9);
    assert!((itcl_oracle(&eye, &eye, 2, 2, 1.0) - expected).abs() < 1e-12);
}

#[test]
fn itcl_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for b in 1..=4 {
        for _ in 0..25 {
            let d = 6;
            let v = unit_rows(&mut rng, b, d);
            let e = unit_rows(&mut rng, b, d);
            let tau = rng.random_range(0.05..2.0);
            assert!((itcl(&v, &e, b, d, tau) - itcl_oracle(&v, &e, b, d, tau)).abs() < 1e-9);
        }
    }
}

#[test]
fn context_rows_per_mode() {
    let p = Projections::<f64>::init(4, 6, 2).unwrap();
    let mut t = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e: Vec<f64> = (0..2 * 5 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let enc = encoding(&mut t, &e, 6, vec![true; 10], 2);
    let v1 = t.constant(vec![2, 4], vec![0.5; 8]).unwrap();
    let ctx = p.decoder_context(&mut t, v1, 1, &enc).unwrap();
    assert_eq!((ctx.len, t.shape(ctx.c)), (1 + 5, &[12usize, 6][..]));
    let v9 = t.constant(vec![18, 4], vec![0.5; 72]).unwrap();
    let ctx = p.decoder_context(&mut t, v9, 9, &enc).unwrap();
    assert_eq!((ctx.len, t.shape(ctx.c)), (9 + 5, &[28usize, 6][..]));
    assert!(p.decoder_context(&mut t, v9, 1, &enc).is_err());
}

#[test]
fn square_projections_reconstruct_the_encoding() {
    let p = Projections::<f64>::init(6, 6, 3).unwrap();
    let mut t = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e: Vec<f64> = (0..4 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let enc = encoding(&mut t, &e, 6, vec![true; 4], 1);
    let v = t.constant(vec![1, 6], vec![0.0; 6]).unwrap();
    let ctx = p.decoder_context(&mut t, v, 1, &enc).unwrap();
    let text_rows = &t.value(ctx.c)[6..];
    for (a, b) in text_rows.iter().zip(&e) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn combine_is_plain_arithmetic() {
    assert_eq!(combine(1000.0, 0.002, 0.5, 3.0), 5.5);
}

fn models() -> (Teacher<f64>, Student<f64>, Projections<f64>) {
    let cfg = tiny_config();
    (
        Teacher::new(cfg.teacher.clone(), 1).unwrap(),
        Student::new(cfg.student.clone(), 2).unwrap(),
        Projections::init(cfg.teacher.d1, cfg.student.d2, 3).unwrap(),
    )
}

#[test]
fn disabled_terms_leave_only_infilling() {
    let cfg = tiny_config();
    let (teacher, student, proj) = models();
    let batch = toy_batch(&cfg, &synthetic_vocab(), 3, 9).unwrap();
    let all = LossSettings::default();
    let mut t = Tape::new();
    let (full, _) = vlkd_loss(&mut t, &batch, &teacher, &student, &proj, &all).unwrap();
    assert_eq!(full.total, combine(full.gamma, full.ttdm, full.itcl, full.icti));
    let only = LossSettings {
        disable: BTreeSet::from([Objective::Ttdm, Objective::Itcl]),
        ..LossSettings::default()
    };
    let (part, _) = vlkd_loss(&mut t, &batch, &teacher, &student, &proj, &only).unwrap();
    assert_eq!(part.total, part.icti);
    assert_eq!(part.icti, full.icti);
    assert_eq!((part.ttdm, part.itcl), (0.0, 0.0));
    let bad = LossSettings {
        disable: BTreeSet::from([Objective::Icti]),
        ..LossSettings::default()
    };
    assert!(matches!(vlkd_loss(&mut t, &batch, &teacher, &student, &proj, &bad), Err(VlkdError::Contract(_))));
}

#[test]
fn teacher_receives_no_gradient() {
    let cfg = tiny_config();
    let (mut teacher, student, proj) = models();
    let batch = toy_batch(&cfg, &synthetic_vocab(), 3, 4).unwrap();
    for mode in [VisualContextMode::ClsOnly, VisualContextMode::FullSequence] {
        let settings = LossSettings {
            mode,
            ..LossSettings::default()
        };
        let mut t = Tape::new();
        let (_, loss) = vlkd_loss(&mut t, &batch, &teacher, &student, &proj, &settings).unwrap();
        t.backward(loss).unwrap().accumulate_into(&mut teacher.store).unwrap();
        for (_, p) in teacher.store.iter() {
            assert!(p.tensor.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)), "{} has gradient", p.name);
        }
    }
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let cfg = tiny_config();
    assert_eq!((cfg.teacher.d1, cfg.student.d2), (4, 6));
    let batch = toy_batch(&cfg, &synthetic_vocab(), 2, 5).unwrap();
    for mode in [VisualContextMode::ClsOnly, VisualContextMode::FullSequence] {
        let (teacher, student, proj) = models();
        let mut m = (student, proj);
        let settings = LossSettings {
            mode,
            ..LossSettings::default()
        };
        let report = check_model(
            &mut m,
            1e-5,
            3,
            |m: &mut (Student<f64>, Projections<f64>)| vec![&mut m.0.store, &mut m.1.store],
            |t, m| {
                vlkd_loss(t, &batch, &teacher, &m.0, &m.1, &settings)
                    .map(|(_, l)| l)
                    .map_err(|e| numcore::NumError::Numeric(e.to_string()))
            },
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{mode:?}: {}", report.max_rel_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ttdm_stays_in_bounds(seed: u64, b in 1usize..6, d in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = unit_rows(&mut rng, b, d);
        let y = unit_rows(&mut rng, b, d);
        let l = ttdm(&x, &y, b, d);
        prop_assert!((0.0..=4.0 + 1e-12).contains(&l));
        prop_assert!(l > 0.0);
        prop_assert_eq!(ttdm(&x, &x, b, d), 0.0);
    }

    #[test]
    fn itcl_ignores_pair_order(seed: u64, b in 1usize..6) {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = unit_rows(&mut rng, b, d);
        let e = unit_rows(&mut rng, b, d);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % b);
        let pv: Vec<f64> = perm.iter().flat_map(|&i| v[i * d..(i + 1) * d].to_vec()).collect();
        let pe: Vec<f64> = perm.iter().flat_map(|&i| e[i * d..(i + 1) * d].to_vec()).collect();
        prop_assert!((itcl(&v, &e, b, d, 0.3) - itcl(&pv, &pe, b, d, 0.3)).abs() < 1e-12);
    }
}
