mod common;

use itm_core::bundle::{Bundle, EmbeddingMatrix, ImageRecord, Split, TextTable};
use itm_core::privnet::{
    association_matrix, load_model, loss_and_gradient, parse_model, persist_model, train, AssociationMatrix,
    LinearModel, PrivnetError, TrainConfig, TrainMeta,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use common::{class_names, descriptor, descriptors};

fn meta() -> TrainMeta {
    TrainMeta {
        epochs: 0,
        lr: 0.01,
        batch: 8,
        seed: 0,
        final_train_loss: 0.0,
        final_val_loss: None,
    }
}

fn model(weights: Vec<Vec<f64>>) -> LinearModel {
    let n = weights[0].len();
    LinearModel::new(weights, class_names(), descriptors(n), meta()).unwrap()
}

fn bundle(rows: Vec<Vec<f64>>) -> Bundle {
    let ids: Vec<String> = (0..rows.len()).map(|i| format!("img{i}")).collect();
    let dim = rows[0].len();
    Bundle {
        records: ids
            .iter()
            .map(|id| ImageRecord {
                id: id.clone(),
                split: Split::Train,
                label: None,
                tags: vec![],
            })
            .collect(),
        image_embeddings: EmbeddingMatrix::from_rows(rows, ids).unwrap(),
        vocabulary: TextTable::new(EmbeddingMatrix::from_rows(vec![vec![1.0; dim]], vec!["word".into()]).unwrap())
            .unwrap(),
        reduced: None,
        phrases: None,
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> AssociationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AssociationMatrix::new(
        (0..rows).map(|i| format!("img{i}")).collect(),
        (0..cols).collect(),
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn association_hand_cosines() {
    let b = bundle(vec![
        vec![1.0, 0.0, 0.0, 0.0],
        vec![1.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 2.0, 1.0],
    ]);
    let mut d0 = descriptor(0, 4, None);
    d0.embedding = vec![1.0, 0.0, 0.0, 0.0];
    let mut d1 = descriptor(1, 4, None);
    d1.embedding = vec![0.0, 0.6, 0.0, 0.8];
    let s = association_matrix(&b, &[0, 1, 2], &[d0, d1]).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let expected = [
        [1.0, 0.0],
        [h, 0.6 * h],
        [0.0, 0.8 / 5f64.sqrt()],
    ];
    for (i, row) in expected.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            assert!((s.row(i)[j] - e).abs() < 1e-12, "({i},{j})");
        }
    }
    assert_eq!(s.row(0)[0], 1.0);
    assert!(s.scores.iter().all(|x| (-1.0..=1.0).contains(x)));
}

#[test]
fn orthogonal_image_gives_zero_row() {
    let b = bundle(vec![vec![0.0, 0.0, 1.0]]);
    let s = association_matrix(&b, &[0], &[descriptor(0, 3, None), descriptor(1, 3, None)]).unwrap();
    assert_eq!(s.row(0), &[0.0, 0.0]);
    assert!(matches!(association_matrix(&b, &[0], &[]), Err(PrivnetError::NoDescriptors)));
}

#[test]
fn gradient_matches_central_differences() {
    let s = random_matrix(5, 3, 4);
    let labels = [0, 1, 1, 0, 1];
    let rows: Vec<usize> = (0..5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let (_, grad) = loss_and_gradient(&w, &s, &labels, &rows);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for c in 0..2 {
        for j in 0..3 {
            let mut plus = w.clone();
            plus[c][j] += h;
            let mut minus = w.clone();
            minus[c][j] -= h;
            let fd = (loss_and_gradient(&plus, &s, &labels, &rows).0 - loss_and_gradient(&minus, &s, &labels, &rows).0)
                / (2.0 * h);
            let rel = (fd - grad[c][j]).abs() / fd.abs().max(grad[c][j].abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn empty_bottleneck_and_unlabeled_rows_rejected() {
    let empty = AssociationMatrix::new(vec!["a".into()], vec![], vec![]).unwrap();
    assert!(matches!(
        train(&empty, &[Some(0)], class_names(), vec![], &TrainConfig::default()),
        Err(PrivnetError::NoDescriptors)
    ));
    let s = random_matrix(2, 2, 1);
    assert!(matches!(
        train(&s, &[Some(0), None], class_names(), descriptors(2), &TrainConfig::default()),
        Err(PrivnetError::UnlabeledRow(1))
    ));
}

#[test]
fn separable_data_is_fit_perfectly() {
    let mut s = random_matrix(60, 4, 12);
    // class is the sign of column 0, kept away from zero
    let mut labels = Vec::new();
    for i in 0..60 {
        let x = &mut s.scores[i * 4];
        *x = if *x >= 0.0 { x.max(0.2) } else { x.min(-0.2) };
        labels.push(Some(usize::from(*x > 0.0)));
    }
    let m = train(&s, &labels, class_names(), descriptors(4), &TrainConfig::default()).unwrap();
    let pred = m.predict_all(&s).unwrap();
    let correct = pred.iter().zip(&labels).filter(|(p, l)| Some(**p) == **l).count();
    assert_eq!(correct, 60);
    assert_eq!(m.train_meta.epochs, 100);
}

#[test]
fn training_is_deterministic_per_seed() {
    let s = random_matrix(30, 5, 3);
    let labels: Vec<Option<usize>> = (0..30).map(|i| Some(i % 2)).collect();
    let cfg = TrainConfig {
        seed: 42,
        ..TrainConfig::default()
    };
    let a = train(&s, &labels, class_names(), descriptors(5), &cfg).unwrap();
    let b = train(&s, &labels, class_names(), descriptors(5), &cfg).unwrap();
    assert_eq!(a.weights, b.weights);
    let c = train(&s, &labels, class_names(), descriptors(5), &TrainConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.weights, c.weights);
}

#[test]
fn zero_vector_gives_zero_logits() {
    let m = model(vec![vec![0.3, -2.0, 1.5], vec![-0.7, 0.1, 9.0]]);
    let (class, z) = m.predict(&[0.0; 3]).unwrap();
    assert_eq!(z, vec![0.0, 0.0]);
    assert_eq!(class, 0);
}

#[test]
fn identity_weights() {
    let m = model(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(m.predict(&[0.9, 0.1]).unwrap(), (0, vec![0.9, 0.1]));
    assert!(matches!(m.predict(&[1.0]), Err(PrivnetError::DimensionMismatch { expected: 2, found: 1 })));
}

#[test]
fn logits_decompose_into_contributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let w: Vec<Vec<f64>> = (0..2).map(|_| (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let m = model(w.clone());
    for _ in 0..1000 {
        let v: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = m.logits(&v).unwrap();
        for c in 0..2 {
            let sum: f64 = v.iter().zip(&w[c]).map(|(s, w)| s * w).sum();
            assert!((sum - z[c]).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn positive_rescaling_keeps_predictions(
        w in prop::collection::vec(-5.0f64..5.0, 6),
        v in prop::collection::vec(-1.0f64..1.0, 3),
        k in 0.001f64..1000.0,
    ) {
        let a = model(vec![w[..3].to_vec(), w[3..].to_vec()]);
        let b = model(vec![w[..3].iter().map(|x| x * k).collect(), w[3..].iter().map(|x| x * k).collect()]);
        let za = a.logits(&v).unwrap();
        // skip numerically tied logits, where rounding may flip the order
        prop_assume!((za[0] - za[1]).abs() > 1e-9);
        prop_assert_eq!(a.predict(&v).unwrap().0, b.predict(&v).unwrap().0);
    }
}

#[test]
fn persisted_model_behaves_identically() {
    let s = random_matrix(40, 6, 21);
    let labels: Vec<Option<usize>> = (0..40).map(|i| Some(usize::from(s.row(i)[2] > 0.0))).collect();
    let mut ds = descriptors(6);
    ds[2].privacy_score = Some(81.16);
    let m = train(&s, &labels, class_names(), ds, &TrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    persist_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.descriptors[2].privacy_score, Some(81.16));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (za, zb) = (m.logits(&v).unwrap(), back.logits(&v).unwrap());
        for (a, b) in za.iter().zip(&zb) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn damaged_model_files_are_rejected() {
    let m = model(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    let text = serde_json::to_string(&m).unwrap();
    assert!(matches!(
        parse_model(&text[..text.len() / 2]),
        Err(PrivnetError::SchemaVersionMismatch { found: None })
    ));
    let bumped = text.replace("\"schema_version\":1", "\"schema_version\":2");
    assert!(matches!(
        parse_model(&bumped),
        Err(PrivnetError::SchemaVersionMismatch { found: Some(2) })
    ));
    assert_eq!(parse_model(&text).unwrap(), m);
}

#[derive(Deserialize)]
struct Frozen {
    seed: u64,
    rows: usize,
    cols: usize,
    matrix_seed: u64,
    probe: Vec<f64>,
    /// `f64::to_bits` of the probe logits.
    logit_bits: Vec<u64>,
}

fn frozen_model(f: &Frozen) -> LinearModel {
    let s = random_matrix(f.rows, f.cols, f.matrix_seed);
    let labels: Vec<Option<usize>> = (0..f.rows).map(|i| Some(usize::from(s.row(i)[0] + s.row(i)[1] > 0.0))).collect();
    let cfg = TrainConfig {
        seed: f.seed,
        ..TrainConfig::default()
    };
    train(&s, &labels, class_names(), descriptors(f.cols), &cfg).unwrap()
}

#[test]
fn trained_logits_match_frozen_bits() {
    let f: Frozen = serde_json::from_str(include_str!("fixtures/privnet_frozen.json")).unwrap();
    let z = frozen_model(&f).logits(&f.probe).unwrap();
    let bits: Vec<u64> = z.iter().map(|x| x.to_bits()).collect();
    assert_eq!(bits, f.logit_bits);
}

/// Rewrites the frozen fixture; run with `--ignored` after an intended change.
#[test]
#[ignore]
fn regenerate_frozen_fixture() {
    let mut f = Frozen {
        seed: 2024,
        rows: 24,
        cols: 4,
        matrix_seed: 99,
        probe: vec![0.5, -0.25, 0.125, 0.75],
        logit_bits: vec![],
    };
    let z = frozen_model(&f).logits(&f.probe).unwrap();
    f.logit_bits = z.iter().map(|x| x.to_bits()).collect();
    let json = serde_json::json!({
        "seed": f.seed, "rows": f.rows, "cols": f.cols, "matrix_seed": f.matrix_seed,
        "probe": f.probe, "logit_bits": f.logit_bits,
    });
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/privnet_frozen.json");
    std::fs::write(path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
}
