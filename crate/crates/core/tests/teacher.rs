use numcore::Tape;
use vlkd_core::config::RunConfig;
use vlkd_core::error::VlkdError;
use vlkd_core::teacher::{Teacher, TeacherConfig, VisualContextMode};
use vlkd_core::textdata::*;
use vlkd_core::trainloop::{pretrain_teacher, Corpus, MetricsLog};

fn small() -> TeacherConfig {
    TeacherConfig {
        d1: 16,
        layers: 1,
        heads: 2,
        ffn: 32,
        ..TeacherConfig::default()
    }
}

fn images(n: usize, seed: u64) -> Vec<PatchSequence> {
    generate_dataset(n, seed, 3)
        .iter()
        .map(|p| render_patches(&p.scene, seed, 0.1, 16))
        .collect()
}

fn texts(v: &Vocab, n: usize, seed: u64) -> Vec<TokenSequence> {
    generate_dataset(n, seed, 3)
        .iter()
        .map(|p| v.tokenize(&p.caption, TokenKind::TeacherText).unwrap())
        .collect()
}

fn row_norms(t: &Tape<f64>, v: numcore::Var) -> Vec<f64> {
    let d = t.shape(v)[1];
    t.value(v).chunks(d).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

#[test]
fn embeddings_are_unit_vectors() {
    let teacher = Teacher::<f64>::new(small(), 1).unwrap();
    let v = synthetic_vocab();
    let imgs = images(5, 3);
    let txts = texts(&v, 5, 3);
    let mut t = Tape::new();
    let out = teacher.encode_images(&mut t, &imgs.iter().collect::<Vec<_>>()).unwrap();
    let e = teacher.encode_texts(&mut t, &txts.iter().collect::<Vec<_>>()).unwrap();
    for n in row_norms(&t, out.v_cls).into_iter().chain(row_norms(&t, e)) {
        assert!((n - 1.0).abs() < 1e-5, "norm {n}");
    }
}

#[test]
fn context_rows_follow_mode() {
    let teacher = Teacher::<f64>::new(small(), 1).unwrap();
    let imgs = images(2, 3);
    let mut t = Tape::new();
    let out = teacher.encode_images(&mut t, &imgs.iter().collect::<Vec<_>>()).unwrap();
    let (cls, rows) = out.context(VisualContextMode::ClsOnly);
    assert_eq!(rows, 1);
    assert_eq!(t.shape(cls), [2, 16]);
    let (full, rows) = out.context(VisualContextMode::FullSequence);
    assert_eq!(rows, 9);
    assert_eq!(t.shape(full), [18, 16]);
}

#[test]
fn patch_order_matters() {
    let teacher = Teacher::<f64>::new(small(), 1).unwrap();
    let img = images(1, 8).remove(0);
    let mut swapped = img.clone();
    for j in 0..img.dim {
        swapped.data.swap(j, 4 * img.dim + j);
    }
    assert_ne!(img, swapped);
    let mut t = Tape::new();
    let a = teacher.encode_images(&mut t, &[&img]).unwrap();
    let b = teacher.encode_images(&mut t, &[&swapped]).unwrap();
    assert_ne!(t.value(a.v_cls), t.value(b.v_cls));
}

#[test]
fn wrong_patch_shape_is_a_shape_error() {
    let teacher = Teacher::<f64>::new(small(), 1).unwrap();
    let mut img = images(1, 8).remove(0);
    img.n -= 1;
    img.data.truncate(img.n * img.dim);
    let mut t = Tape::new();
    assert!(matches!(
        teacher.encode_images(&mut t, &[&img]),
        Err(VlkdError::Num(numcore::NumError::Shape { .. }))
    ));
}

#[test]
fn text_encoding_is_deterministic_and_distinct() {
    let teacher = Teacher::<f64>::new(small(), 1).unwrap();
    let v = synthetic_vocab();
    let a = v.tokenize("a red circle", TokenKind::TeacherText).unwrap();
    let b = v.tokenize("a blue star beside a green square", TokenKind::TeacherText).unwrap();
    let mut t = Tape::new();
    let e = teacher.encode_texts(&mut t, &[&a, &a, &b]).unwrap();
    let rows: Vec<&[f64]> = t.value(e).chunks(16).collect();
    assert_eq!(rows[0], rows[1]);
    let cos: f64 = rows[0].iter().zip(rows[2]).map(|(x, y)| x * y).sum();
    assert!(cos < 1.0 - 1e-9);

    let student_kind = v.tokenize("a red circle", TokenKind::StudentText).unwrap();
    assert!(matches!(teacher.encode_texts(&mut t, &[&student_kind]), Err(VlkdError::Contract(_))));
}

#[test]
fn contrastive_loss_single_pair_is_zero() {
    let teacher = Teacher::<f64>::new(small(), 1).unwrap();
    let v = synthetic_vocab();
    let imgs = images(1, 4);
    let txts = texts(&v, 1, 4);
    let mut t = Tape::new();
    let loss = teacher.contrastive_loss(&mut t, &[&imgs[0]], &[&txts[0]]).unwrap();
    assert_eq!(t.scalar(loss).unwrap(), 0.0);
}

#[test]
fn contrastive_loss_ignores_batch_order() {
    let teacher = Teacher::<f64>::new(small(), 1).unwrap();
    let v = synthetic_vocab();
    let imgs = images(4, 6);
    let txts = texts(&v, 4, 6);
    let perm = [2, 0, 3, 1];
    let mut t = Tape::new();
    let a = teacher
        .contrastive_loss(&mut t, &imgs.iter().collect::<Vec<_>>(), &txts.iter().collect::<Vec<_>>())
        .unwrap();
    let pi: Vec<&PatchSequence> = perm.iter().map(|&i| &imgs[i]).collect();
    let pt: Vec<&TokenSequence> = perm.iter().map(|&i| &txts[i]).collect();
    let b = teacher.contrastive_loss(&mut t, &pi, &pt).unwrap();
    assert!((t.scalar(a).unwrap() - t.scalar(b).unwrap()).abs() < 1e-12);
    assert!((teacher.tau() - 0.07).abs() < 1e-12);
}

#[test]
fn short_pretraining_lowers_loss_and_repeats_exactly() {
    let mut cfg = RunConfig::default();
    cfg.teacher = small();
    cfg.data.pairs = 128;
    cfg.data.heldout = 100;
    cfg.teacher_pretrain.epochs = 3;
    cfg.teacher_pretrain.batch_size = 32;
    let corpus = Corpus::generate(&cfg);
    let mut log = MetricsLog::memory();
    let (a, report) = pretrain_teacher(&cfg, &corpus, &mut log).unwrap();
    let (b, _) = pretrain_teacher(&cfg, &corpus, &mut MetricsLog::memory()).unwrap();
    assert_eq!(a.store.fingerprint(), b.store.fingerprint());
    assert!(a.store.all_frozen());
    let losses: Vec<f64> = log.records.iter().filter_map(|r| r["loss"].as_f64()).collect();
    assert_eq!(losses.len(), report.steps);
    let k = 4;
    let head = losses[..k].iter().sum::<f64>() / k as f64;
    let tail = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(tail < head, "loss {head} -> {tail}");
}
