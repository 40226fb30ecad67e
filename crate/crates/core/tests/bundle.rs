use std::fs;
use std::path::Path;

use itm_core::bundle::{
    format, load_bundle, planted_group, save_bundle, synth_bundle, BundleError, EmbeddingMatrix, SynthSpec, TextTable,
    EMBEDDINGS_FILE, IMAGES_FILE, PHRASES_FILE, VOCAB_EMBEDDINGS_FILE, VOCAB_FILE,
};

fn small_spec() -> SynthSpec {
    let mut s = SynthSpec::new(2, 5, 8, 0.05, 0.1);
    s.words_per_group = 6;
    s.tags_per_image = 4;
    s
}

fn saved(dir: &Path) {
    save_bundle(&synth_bundle(&small_spec(), 1).unwrap(), dir).unwrap();
}

#[test]
fn ten_image_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = synth_bundle(&small_spec(), 1).unwrap();
    b.phrases = Some(
        TextTable::new(
            EmbeddingMatrix::from_rows(vec![vec![0.5; 8], vec![-0.25; 8]], vec!["a, b".into(), "c".into()]).unwrap(),
        )
        .unwrap(),
    );
    b.records[3].label = None;
    save_bundle(&b, dir.path()).unwrap();
    let back = load_bundle(dir.path()).unwrap();
    assert_eq!(back.records.len(), 10);
    assert_eq!(back, b);
}

#[test]
fn one_image_dim_four_file_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.bin");
    format::write(&path, 1, 4, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len(), 12 + 16);
}

#[test]
fn count_mismatch_is_a_dim_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    saved(dir.path());
    let raw = format::read(&dir.path().join(EMBEDDINGS_FILE)).unwrap();
    format::write(&dir.path().join(EMBEDDINGS_FILE), 9, raw.dim, &raw.data[..9 * raw.dim]).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(BundleError::DimMismatch { .. })));
}

#[test]
fn tag_missing_from_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    saved(dir.path());
    let text = fs::read_to_string(dir.path().join(IMAGES_FILE)).unwrap();
    let first_tag = text.split("\"tags\":[\"").nth(1).unwrap().split('"').next().unwrap().to_string();
    fs::write(dir.path().join(IMAGES_FILE), text.replacen(&first_tag, "sunset", 1)).unwrap();
    match load_bundle(dir.path()) {
        Err(BundleError::UnknownTag { tag, .. }) => assert_eq!(tag, "sunset"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_fixtures_get_named_errors() {
    let dir = tempfile::tempdir().unwrap();
    saved(dir.path());
    let d = dir.path();

    fs::remove_file(d.join(VOCAB_FILE)).unwrap();
    assert!(matches!(load_bundle(d), Err(BundleError::MissingFile(f)) if f == VOCAB_FILE));
    saved(d);

    let mut bytes = fs::read(d.join(VOCAB_EMBEDDINGS_FILE)).unwrap();
    bytes[0] = b'X';
    fs::write(d.join(VOCAB_EMBEDDINGS_FILE), &bytes).unwrap();
    assert!(matches!(load_bundle(d), Err(BundleError::MagicMismatch { .. })));
    saved(d);

    let raw = format::read(&d.join(EMBEDDINGS_FILE)).unwrap();
    let mut data = raw.data.clone();
    data[5] = f64::NAN;
    format::write(&d.join(EMBEDDINGS_FILE), raw.count, raw.dim, &data).unwrap();
    assert!(matches!(load_bundle(d), Err(BundleError::NonFiniteValue { .. })));
    saved(d);

    let text = fs::read_to_string(d.join(IMAGES_FILE)).unwrap();
    let first_id = text.split("\"id\":\"").nth(1).unwrap().split('"').next().unwrap().to_string();
    let second_id = text.split("\"id\":\"").nth(2).unwrap().split('"').next().unwrap().to_string();
    fs::write(d.join(IMAGES_FILE), text.replacen(&second_id, &first_id, 1)).unwrap();
    assert!(matches!(load_bundle(d), Err(BundleError::DuplicateId(_))));
    saved(d);

    fs::write(d.join(IMAGES_FILE), "{\"id\": 3}\n").unwrap();
    assert!(matches!(load_bundle(d), Err(BundleError::Json { line: 1, .. })));
    saved(d);

    // phrases.bin without its text sidecar
    format::write(&d.join(PHRASES_FILE), 1, 8, &[1.0; 8]).unwrap();
    assert!(matches!(load_bundle(d), Err(BundleError::MissingFile(_))));
}

#[test]
fn synthetic_bundles_are_byte_identical_per_seed() {
    let spec = SynthSpec::new(4, 50, 16, 0.05, 0.0);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_bundle(&synth_bundle(&spec, 7).unwrap(), a.path()).unwrap();
    save_bundle(&synth_bundle(&spec, 7).unwrap(), b.path()).unwrap();
    for f in [IMAGES_FILE, EMBEDDINGS_FILE, VOCAB_FILE, VOCAB_EMBEDDINGS_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let bundle = synth_bundle(&spec, 7).unwrap();
    assert_eq!(bundle.records.len(), 200);
    let mut groups: Vec<usize> = bundle.records.iter().filter_map(|r| planted_group(&r.id)).collect();
    groups.sort();
    groups.dedup();
    assert_eq!(groups, vec![0, 1, 2, 3]);
    assert_ne!(synth_bundle(&spec, 8).unwrap(), bundle);
}

#[test]
fn tag_noise_rate_is_respected() {
    let spec = SynthSpec::new(4, 50, 16, 0.05, 0.2);
    let b = synth_bundle(&spec, 3).unwrap();
    let (mut foreign, mut total) = (0usize, 0usize);
    for r in &b.records {
        let g = planted_group(&r.id).unwrap();
        for t in &r.tags {
            total += 1;
            if !(0..spec.words_per_group).any(|i| spec.word(g, i) == *t) {
                foreign += 1;
            }
        }
    }
    // 1600 tags; 5 points is about five binomial standard deviations
    let rate = foreign as f64 / total as f64;
    assert!((rate - 0.2).abs() <= 0.05, "{rate}");
}

#[test]
fn invalid_specs() {
    let mut s = SynthSpec::new(4, 10, 8, 0.05, 0.1);
    s.sigma = 0.0;
    assert!(matches!(synth_bundle(&s, 0), Err(BundleError::InvalidSpec(_))));
    assert!(matches!(synth_bundle(&SynthSpec::new(4, 10, 8, 0.05, 1.5), 0), Err(BundleError::InvalidSpec(_))));
    assert!(matches!(synth_bundle(&SynthSpec::new(0, 10, 8, 0.05, 0.1), 0), Err(BundleError::InvalidSpec(_))));
}
