//! Synthetic data through training, bundling and reloading.

use memefuse::bundle::ModelBundle;
use memefuse::metrics::evaluate;
use memefuse::preprocess::ReplacementLexicon;
use memefuse::synthetic::{small_config, SyntheticSet, SyntheticSpec};
use memefuse::trainer::{ensemble_labels, split_train_dev, train_ensemble};

fn labels(samples: &[memefuse::Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label.unwrap()).collect()
}

#[test]
fn ensemble_fits_synthetic_set_and_survives_a_bundle_round_trip() {
    let set = SyntheticSet::generate(SyntheticSpec {
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut cfg = set.configure(small_config(3));
    cfg.train_seed = 3;
    let samples = set.samples(&cfg).unwrap();
    let (train, dev) = split_train_dev(&samples, cfg.train_dev_fraction, 3).unwrap();
    let run = train_ensemble(
        &cfg.ensemble_members,
        &cfg.model_dims().unwrap(),
        &train,
        &dev,
        &cfg.train_config(),
        None,
    )
    .unwrap();
    assert_eq!(run.ensemble_dev_f1.len(), cfg.train_epochs);
    assert_eq!(run.member_histories.len(), 8);

    let fitted = evaluate(&labels(&train), &ensemble_labels(&run.ensemble, &train).unwrap(), 3).unwrap();
    assert!(fitted.macro_f1 >= 0.95, "train macro-F1 {}", fitted.macro_f1);

    let bundle = ModelBundle {
        config: cfg,
        lexicon_digest: ReplacementLexicon::default().digest(),
        embedding_dim: 8,
        ensemble: run.ensemble,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    bundle.save(&path).unwrap();
    let loaded = ModelBundle::load(&path).unwrap();
    assert_eq!(loaded, bundle);
    for s in &dev {
        let a = bundle.ensemble.predict(s).unwrap();
        let b = loaded.ensemble.predict(s).unwrap();
        let bits = |p: &memefuse::Prediction| p.probs().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn written_dataset_reloads_into_identical_samples() {
    use memefuse::dataset::{load_dataset, prepare_samples, Needs, Resources};
    use memefuse::embedding::{EmbeddingTable, VectorStore};

    let set = SyntheticSet::generate(SyntheticSpec {
        records: 30,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    set.write_to(dir.path()).unwrap();
    let cfg = set.configure(small_config(3));

    let emb = EmbeddingTable::load(&dir.path().join("embeddings.txt")).unwrap();
    let sv = VectorStore::load(&dir.path().join("sentence_vectors.jsonl")).unwrap();
    let iv = VectorStore::load(&dir.path().join("image_features.jsonl")).unwrap();
    let lex = ReplacementLexicon::default();
    let res = Resources {
        embeddings: &emb,
        lexicon: &lex,
        sentence_vectors: Some(&sv),
        image_features: Some(&iv),
        images: None,
        image_size: cfg.image_size,
        image_channels: cfg.image_channels,
    };
    let data = load_dataset(&dir.path().join("data.jsonl"), 3).unwrap();
    let from_disk = prepare_samples(&data, &res, Needs::of(&cfg.ensemble_members)).unwrap();
    assert_eq!(from_disk, set.samples(&cfg).unwrap());
}
