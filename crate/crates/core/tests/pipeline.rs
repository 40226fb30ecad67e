use std::collections::BTreeMap;

use itm_core::ablation::{run_ablation, BundleSource, Method};
use itm_core::bundle::{planted_group, synth_bundle, Bundle, Label, Split, SynthSpec};
use itm_core::descriptors::DescriptorOrigin;
use itm_core::pipeline::*;
use itm_core::topics::TopicScope;

fn bundle(seed: u64) -> Bundle {
    synth_bundle(&SynthSpec::new(4, 50, 16, 0.05, 0.1), seed).unwrap()
}

fn cfg(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        ..PipelineConfig::default()
    }
}

const ARTIFACTS: [&str; 7] = [
    REDUCED_ARTIFACT,
    CLUSTERS_ARTIFACT,
    TOPICS_ARTIFACT,
    DESCRIPTORS_ARTIFACT,
    MODEL_ARTIFACT,
    METRICS_ARTIFACT,
    EXPLANATIONS_ARTIFACT,
];

#[test]
fn writes_every_artifact_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&bundle(1), &cfg(1), Some(dir.path())).unwrap();
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest, out.manifest);
    assert_eq!(manifest.stages.len(), 7);
    for (rec, name) in manifest.stages.iter().zip(ARTIFACTS) {
        assert_eq!(rec.artifact, name);
        let bytes = std::fs::read(dir.path().join(name)).unwrap();
        assert_eq!(sha256_hex(&bytes), rec.sha256, "{name}");
    }
    assert_eq!(out.clusters.n_clusters, 4);
    assert_eq!(out.model.n_descriptors(), 4);
}

#[test]
fn same_config_and_seed_give_identical_checksums() {
    let b = bundle(2);
    let a = run_pipeline(&b, &cfg(9), None).unwrap();
    let c = run_pipeline(&b, &cfg(9), None).unwrap();
    assert_eq!(a.manifest, c.manifest);
    let d = run_pipeline(&b, &cfg(10), None).unwrap();
    assert_ne!(a.manifest.stages[4].sha256, d.manifest.stages[4].sha256);
}

#[test]
fn stages_rerun_from_artifacts_reproduce_the_pipeline() {
    let b = bundle(3);
    let c = cfg(3);
    let dir = tempfile::tempdir().unwrap();
    let full = run_pipeline(&b, &c, Some(dir.path())).unwrap();
    let d = dir.path();

    let reduced = read_reduced(d, &b).unwrap();
    assert_eq!(reduced, full.reduced);
    let clusters = stage_cluster(&b, &reduced, &c.cluster).unwrap();
    assert_eq!(json_bytes(&clusters), std::fs::read(d.join(CLUSTERS_ARTIFACT)).unwrap());

    let clusters: ClustersArtifact = read_artifact(d, CLUSTERS_ARTIFACT).unwrap();
    let topics = stage_topics(&b, &clusters, &c.topics).unwrap();
    assert_eq!(json_bytes(&topics), std::fs::read(d.join(TOPICS_ARTIFACT)).unwrap());

    let topics: TopicsArtifact = read_artifact(d, TOPICS_ARTIFACT).unwrap();
    let descriptors = stage_descriptors(&b, &clusters, &topics, &BTreeMap::new()).unwrap();
    assert_eq!(json_bytes(&descriptors), std::fs::read(d.join(DESCRIPTORS_ARTIFACT)).unwrap());

    let model = stage_train(&b, &descriptors, &c.train_config()).unwrap();
    assert_eq!(json_bytes(&model), std::fs::read(d.join(MODEL_ARTIFACT)).unwrap());
    let metrics = stage_eval(&b, &model, c.topics.scope).unwrap();
    assert_eq!(json_bytes(&metrics), std::fs::read(d.join(METRICS_ARTIFACT)).unwrap());
    let explanations = stage_explain(&b, &model, c.top_k).unwrap();
    assert_eq!(json_bytes(&explanations), std::fs::read(d.join(EXPLANATIONS_ARTIFACT)).unwrap());
}

#[test]
fn training_never_reads_val_or_test_labels() {
    let b = bundle(4);
    let mut flipped = b.clone();
    for r in flipped.records.iter_mut().filter(|r| r.split != Split::Train) {
        r.label = r.label.map(|l| if l == Label::Private { Label::Public } else { Label::Private });
    }
    let descriptors = run_pipeline(&b, &cfg(4), None).unwrap().descriptors;
    let a = stage_train(&b, &descriptors, &cfg(4).train_config()).unwrap();
    let c = stage_train(&flipped, &descriptors, &cfg(4).train_config()).unwrap();
    assert_eq!(a.weights, c.weights);
    assert_eq!(a.train_meta.final_train_loss, c.train_meta.final_train_loss);
}

#[test]
fn missing_val_split_clusters_train_rows_only() {
    let mut spec = SynthSpec::new(4, 50, 16, 0.05, 0.1);
    spec.train_fraction = 0.8;
    spec.val_fraction = 0.0;
    let b = synth_bundle(&spec, 5).unwrap();
    let out = run_pipeline(&b, &cfg(5), None).unwrap();
    assert_eq!(out.clusters.clustered_ids.len(), 160);
    assert!(out.model.train_meta.final_val_loss.is_none());
}

#[test]
fn stage_failures_name_their_stage() {
    let mut b = bundle(6);
    for r in b.records.iter_mut().filter(|r| r.split == Split::Test) {
        r.split = Split::Val;
    }
    let err = run_pipeline(&b, &cfg(6), None).unwrap_err();
    assert_eq!(err.stage, Stage::Eval);
    assert!(err.to_string().starts_with("eval stage failed"));

    let mut too_big = cfg(6);
    too_big.cluster.min_cluster_size = 1000;
    let err = run_pipeline(&bundle(6), &too_big, None).unwrap_err();
    assert_eq!(err.stage, Stage::Cluster);
}

#[test]
fn global_topic_arm_builds_unfiltered_descriptors() {
    let mut c = cfg(7);
    c.topics.scope = TopicScope::Global;
    let out = run_pipeline(&bundle(7), &c, None).unwrap();
    assert_eq!(out.topics.groups.len(), 1);
    assert!(out.descriptors.iter().all(|d| d.origin == DescriptorOrigin::GlobalTopic && d.r.is_none()));
    assert!(out.descriptors.iter().all(|d| d.privacy_score.is_some()));
}

#[test]
fn descriptors_follow_planted_groups() {
    let b = bundle(8);
    let out = run_pipeline(&b, &cfg(8), None).unwrap();
    let spec = SynthSpec::new(4, 50, 16, 0.05, 0.1);
    for (d, c) in out.descriptors.iter().zip(&out.clusters.clusters) {
        let g = planted_group(&c.member_ids[0]).unwrap();
        assert!(c.member_ids.iter().all(|id| planted_group(id) == Some(g)));
        let own = d.words.iter().filter(|w| (0..12).any(|i| spec.word(g, i) == **w)).count();
        assert!(own * 10 >= d.words.len() * 8, "{:?}", d.words);
    }
}

#[test]
fn stored_predictions_reproduce_metrics() {
    let out = run_pipeline(&bundle(9), &cfg(9), None).unwrap();
    let m = metrics_from_stored(&out.metrics.predictions, &class_names()).unwrap();
    assert_eq!(m, out.metrics.metrics);
}

#[test]
fn explain_any_image_by_id() {
    let b = bundle(10);
    let out = run_pipeline(&b, &cfg(10), None).unwrap();
    let id = &b.records[0].id;
    let e = explain_image(&b, &out.model, id, 3).unwrap();
    assert_eq!(&e.image_id, id);
    assert!(e.classes[0].top_positive.len() <= 3);
    assert!(matches!(explain_image(&b, &out.model, "nope", 3), Err(StageError::UnknownImage(_))));
}

#[test]
fn ablation_rows_average_each_seed() {
    let spec = SynthSpec::new(4, 40, 16, 0.05, 0.2);
    let report = run_ablation(
        &BundleSource::Synth(spec),
        &PipelineConfig::default(),
        &[Method::Tm, Method::Itm],
        &[20],
        &[1, 2, 3],
    )
    .unwrap();
    assert_eq!(report.rows.len(), 2);
    for r in &report.rows {
        assert_eq!(r.runs.len(), 3);
        let mean = r.runs.iter().map(|x| x.u_ba).sum::<f64>() / 3.0;
        assert!((r.u_ba.mean - mean).abs() < 1e-12);
        assert!(r.u_ba.std >= 0.0);
    }
    assert_eq!(report.rows[0].method, Method::Tm);
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("method,size,runs,f1_public_mean,f1_public_pop_std"));
    let table = report.to_table();
    assert!(table.starts_with("# mean (population std) across seeds, 3 seeds"));
    assert!(run_ablation(&BundleSource::Synth(SynthSpec::new(4, 40, 16, 0.05, 0.2)), &PipelineConfig::default(), &[Method::Tm], &[20], &[1])
        .is_err());
}
