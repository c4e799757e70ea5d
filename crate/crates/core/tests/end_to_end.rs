use addrop::attribution::{AttributionConfig, Method};
use addrop::data::{
    gen_classification, gen_regression, gen_tagging, load_tsv_splits, SyntheticSpec, TaskKind, TsvSchema, UNK_ID,
};
use addrop::masking::DiscardPolicy;
use addrop::metrics::MetricKind;
use addrop::model::{Model, ModelConfig};
use addrop::trainer::{cross_tune, evaluate, fine_tune, Phase, TrainConfig};

fn small_model(task: TaskKind, vocab: usize, classes: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 4,
        hidden_size: hidden,
        head_size: hidden / 4,
        ffn_size: 2 * hidden,
        vocab_size: vocab,
        max_len: 32,
        num_classes: classes,
        task,
        hidden_dropout: 0.1,
    }
}

#[test]
fn noiseless_classification_is_learned() {
    let spec = SyntheticSpec {
        noise: 0.0,
        num_train: 4096,
        num_dev: 256,
        num_test: 64,
        ..SyntheticSpec::overfit_prone(TaskKind::Classify, 5)
    };
    let s = gen_classification(&spec).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 30,
        ..Default::default()
    };
    let model = Model::new(small_model(TaskKind::Classify, s.vocab_size, 2, 32), 0).unwrap();
    let out = fine_tune(model, &s.train, &s.dev, &cfg).unwrap();
    assert!(out.best_metric > 0.95, "best dev accuracy {} at epoch {}", out.best_metric, out.best_epoch);
}

#[test]
fn tagging_cross_tuning_uses_token_level_attribution() {
    let spec = SyntheticSpec {
        num_train: 64,
        num_dev: 32,
        num_test: 8,
        ..SyntheticSpec::overfit_prone(TaskKind::Tag, 2)
    };
    let s = gen_tagging(&spec).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs: 4,
        ..Default::default()
    };
    let model = Model::new(small_model(TaskKind::Tag, s.vocab_size, s.num_classes, 16), 1).unwrap();
    let out = cross_tune(model, &s.train, &s.dev, &cfg).unwrap();
    let phases: Vec<Phase> = out.reports.iter().map(|r| r.phase).collect();
    assert_eq!(phases, [Phase::Ft, Phase::Addrop, Phase::Ft, Phase::Addrop]);
    assert!(out.reports.iter().all(|r| r.train_loss.is_finite() && r.dev_loss.is_finite()));
    assert!(out.reports[3].train_loss < out.reports[0].train_loss);
    assert_eq!(out.reports[0].metric_name, MetricKind::Acc);
}

#[test]
fn regression_trains_with_every_attribution_method() {
    let spec = SyntheticSpec {
        num_train: 64,
        num_dev: 32,
        num_test: 8,
        ..SyntheticSpec::overfit_prone(TaskKind::Regress, 4)
    };
    let s = gen_regression(&spec).unwrap();
    for method in [Method::Ga, Method::Iga, Method::Aa, Method::Rd] {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 16,
            max_epochs: 2,
            attribution: AttributionConfig {
                method,
                steps: 3,
                ..Default::default()
            },
            policy: DiscardPolicy {
                layers: vec![0, 1],
                ..Default::default()
            },
            ..Default::default()
        };
        let model = Model::new(small_model(TaskKind::Regress, s.vocab_size, 1, 16), 3).unwrap();
        let out = cross_tune(model, &s.train, &s.dev, &cfg).unwrap();
        assert_eq!(out.reports[0].metric_name, MetricKind::Pcc);
        assert!(out.reports.iter().all(|r| r.train_loss.is_finite()), "{method}");
    }
}

#[test]
fn checkpoint_files_restore_the_same_predictions() {
    let s = gen_classification(&SyntheticSpec {
        num_train: 32,
        num_dev: 32,
        num_test: 8,
        ..SyntheticSpec::overfit_prone(TaskKind::Classify, 9)
    })
    .unwrap();
    let model = Model::new(small_model(TaskKind::Classify, s.vocab_size, 2, 16), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.checksum(), model.checksum());
    let a = evaluate(&model, &s.dev, MetricKind::Acc).unwrap();
    let b = evaluate(&back, &s.dev, MetricKind::Acc).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());

    std::fs::write(&path, "not a checkpoint").unwrap();
    assert!(Model::load(&path).is_err());
    assert!(matches!(
        Model::load(dir.path().join("absent.ckpt")),
        Err(addrop::Error::Io { .. })
    ));
}

#[test]
fn tsv_files_train_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.tsv");
    let dev = dir.path().join("dev.tsv");
    let rows: String = (0..40)
        .map(|i| format!("{}\tw{} and w{}\tw{} too\n", if i % 3 == 0 { "yes" } else { "no" }, i % 4, i % 5, i % 6))
        .collect();
    std::fs::write(&train, rows).unwrap();
    std::fs::write(&dev, "yes\tw1 unseen\tw2\nno\tw3\tw0 and\n").unwrap();
    let (splits, vocab) = load_tsv_splits(&train, &dev, None, TsvSchema::TextPair, TaskKind::Classify).unwrap();
    assert_eq!(splits.num_classes, 2);
    assert_eq!(vocab.id("unseen"), UNK_ID);
    assert!(splits.dev.examples[0].tokens.contains(&UNK_ID));
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 2,
        ..Default::default()
    };
    let model = Model::new(small_model(TaskKind::Classify, splits.vocab_size, 2, 16), 0).unwrap();
    let out = cross_tune(model, &splits.train, &splits.dev, &cfg).unwrap();
    assert_eq!(out.reports.len(), 2);
}
