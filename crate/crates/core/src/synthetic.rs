//! Seeded toy memes with class-correlated text and image signals.
//!
//! Each modality carries the true class with probability `reliability` and
//! is otherwise uninformative: a caption of filler words only, or a plain
//! noise image. Captions and images therefore complement each other, and
//! records where both are blank must be memorized to fit the training set.

use std::collections::HashMap;
use std::path::Path;

use crate::config::Config;
use crate::dataset::{prepare_samples, write_records, Dataset, Needs, Record, Resources};
use crate::embedding::{EmbeddingTable, VectorStore};
use crate::error::{Error, Result};
use crate::fusion::{MemberSpec, Sample};
use crate::image_channel::Image;
use crate::preprocess::{preprocess, ReplacementLexicon};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::OptimizerKind;

const CUES: [[&str; 5]; 3] = [
    ["sad", "hate", "awful", "angry", "worst"],
    ["okay", "fine", "meh", "whatever", "normal"],
    ["love", "great", "happy", "awesome", "best"],
];

const FILLER: [&str; 20] = [
    "the", "a", "when", "you", "my", "this", "is", "so", "cat", "dog", "today", "me", "that", "just", "meme", "monday",
    "friends", "work", "coffee", "weekend",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub records: usize,
    pub classes: usize,
    pub seed: u64,
    pub embedding_dim: usize,
    pub image_size: usize,
    pub image_feature_dim: usize,
    /// Probability that the caption contains a cue word of the true class.
    pub text_reliability: f64,
    /// Probability that the image (and its precomputed feature) shows the
    /// true class.
    pub image_reliability: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            records: 200,
            classes: 3,
            seed: 0,
            embedding_dim: 8,
            image_size: 16,
            image_feature_dim: 16,
            text_reliability: 0.85,
            image_reliability: 0.85,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub spec: SyntheticSpec,
    pub records: Vec<Record>,
    pub embeddings: EmbeddingTable,
    pub sentence_vectors: VectorStore,
    pub image_features: VectorStore,
    pub images: HashMap<String, Image>,
}

fn cue_word(class: usize, j: usize) -> String {
    match CUES.get(class) {
        Some(words) => words[j % words.len()].to_string(),
        None => format!("cue{class}x{j}"),
    }
}


impl SyntheticSet {
    pub fn generate(spec: SyntheticSpec) -> Result<Self> {
        if spec.classes < 2 || spec.records == 0 {
            return Err(Error::Config("synthetic set needs at least 2 classes and 1 record".into()));
        }
        if spec.embedding_dim < spec.classes || spec.image_feature_dim < spec.classes {
            return Err(Error::Config("synthetic dimensions must be at least the class count".into()));
        }
        if spec.image_size < 4 {
            return Err(Error::Config("synthetic images must be at least 4×4".into()));
        }
        let mut rng = Rng::new(spec.seed);
        let dim = spec.embedding_dim;

        let mut rows = Vec::new();
        for k in 0..spec.classes {
            for j in 0..5 {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.uniform(-0.3, 0.3)).collect();
                v[k] += 1.0;
                rows.push((cue_word(k, j), v));
            }
        }
        for w in FILLER {
            rows.push((w.to_string(), (0..dim).map(|_| rng.uniform(-0.5, 0.5)).collect()));
        }
        let embeddings = EmbeddingTable::from_rows(rows)?;
        let lexicon = ReplacementLexicon::default();

        let side = spec.image_size;
        let block = (side * 3 / 8).max(2);
        let feat_block = spec.image_feature_dim / spec.classes;
        let mut records = Vec::with_capacity(spec.records);
        let mut sentence_vectors = VectorStore::new();
        let mut image_features = VectorStore::new();
        let mut images = HashMap::new();

        for i in 0..spec.records {
            let id = format!("m{i:04}");
            let label = rng.below(spec.classes);

            let len = 4 + rng.below(6);
            let mut words: Vec<String> = (0..len).map(|_| FILLER[rng.below(FILLER.len())].to_string()).collect();
            if rng.next_f64() < spec.text_reliability {
                let mut cue = cue_word(label, rng.below(5));
                if rng.below(4) == 0 {
                    cue = cue.to_uppercase() + "!!";
                }
                words.insert(rng.below(len + 1), cue);
            }
            let text = words.join(" ");

            let tokens = embeddings.lookup(&preprocess(&text, &lexicon))?;
            let mut sentence = crate::dataset::mean_embedding(&tokens).into_data();
            sentence.iter_mut().for_each(|v| *v += rng.uniform(-0.05, 0.05));
            sentence_vectors.insert(id.clone(), sentence)?;

            let shows = rng.next_f64() < spec.image_reliability;
            let mut px: Vec<f64> = (0..side * side * 3).map(|_| rng.uniform(0.0, 0.4)).collect();
            let strength = rng.uniform(0.3, 1.0);
            if shows {
                let (y0, x0) = (rng.below(side - block + 1), rng.below(side - block + 1));
                let channel = label % 3;
                let extra = label / 3;
                for y in y0..y0 + block {
                    for x in x0..x0 + block {
                        px[(y * side + x) * 3 + channel] = 0.4 + 0.6 * strength * rng.uniform(0.8, 1.0);
                        if extra > 0 {
                            px[(y * side + x) * 3 + (channel + extra) % 3] = 0.4 + 0.6 * strength * rng.uniform(0.8, 1.0);
                        }
                    }
                }
            }
            let image_ref = format!("images/{id}.ppm");
            let image = Image::new(Tensor::new(vec![side, side, 3], px)?)?;
            // 8-bit quantization so in-memory and on-disk pixels agree.
            let mut buf = Vec::new();
            image.write_pnm(&mut buf).map_err(|e| Error::io(&image_ref, e))?;
            images.insert(image_ref.clone(), crate::image_channel::decode_pnm(&buf)?);

            let mut feat: Vec<f64> = (0..spec.image_feature_dim).map(|_| rng.uniform(-0.3, 0.3)).collect();
            if shows {
                for v in &mut feat[label * feat_block..(label + 1) * feat_block] {
                    *v += strength;
                }
            }
            image_features.insert(image_ref.clone(), feat)?;

            records.push(Record {
                id,
                text,
                image: image_ref,
                label: Some(label),
            });
        }
        Ok(SyntheticSet {
            spec,
            records,
            embeddings,
            sentence_vectors,
            image_features,
            images,
        })
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            records: self.records.clone(),
            base_dir: Default::default(),
        }
    }

    /// Model-ready samples for the members in `config`, built in memory.
    pub fn samples(&self, config: &Config) -> Result<Vec<Sample>> {
        self.samples_for(config, &config.ensemble_members)
    }

    pub fn samples_for(&self, config: &Config, members: &[MemberSpec]) -> Result<Vec<Sample>> {
        let lexicon = ReplacementLexicon::default();
        let res = Resources {
            embeddings: &self.embeddings,
            lexicon: &lexicon,
            sentence_vectors: Some(&self.sentence_vectors),
            image_features: Some(&self.image_features),
            images: Some(&self.images),
            image_size: config.image_size,
            image_channels: config.image_channels,
        };
        prepare_samples(&self.dataset(), &res, Needs::of(members))
    }

    /// Input widths recorded into `config`.
    pub fn configure(&self, config: Config) -> Config {
        config.with_input_dims(self.spec.embedding_dim, self.spec.embedding_dim, self.spec.image_feature_dim)
    }

    /// Writes `data.jsonl`, `embeddings.txt`, `sentence_vectors.jsonl`,
    /// `image_features.jsonl`, `images/*.ppm` and a matching `config.txt`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let io = |p: &Path, e| Error::io(p, e);
        std::fs::create_dir_all(dir.join("images")).map_err(|e| io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| io(&p, e))
        };
        write("data.jsonl", write_records(&self.records).as_bytes())?;

        let mut buf = Vec::new();
        self.embeddings.write_to(&mut buf).map_err(|e| io(dir, e))?;
        write("embeddings.txt", &buf)?;
        buf.clear();
        self.sentence_vectors.write_to(&mut buf).map_err(|e| io(dir, e))?;
        write("sentence_vectors.jsonl", &buf)?;
        buf.clear();
        self.image_features.write_to(&mut buf).map_err(|e| io(dir, e))?;
        write("image_features.jsonl", &buf)?;

        let mut refs: Vec<&String> = self.images.keys().collect();
        refs.sort();
        for r in refs {
            buf.clear();
            self.images[r].write_pnm(&mut buf).map_err(|e| io(dir, e))?;
            write(r, &buf)?;
        }

        let mut cfg = small_config(self.spec.classes);
        cfg.image_size = self.spec.image_size;
        cfg.data_embeddings = Some("embeddings.txt".into());
        cfg.data_sentence_vectors = Some("sentence_vectors.jsonl".into());
        cfg.data_image_features = Some("image_features.jsonl".into());
        write("config.txt", cfg.to_text().as_bytes())
    }
}

/// Desk-sized architecture that trains on the synthetic set in seconds.
pub fn small_config(classes: usize) -> Config {
    Config {
        text_h12: 0,
        text_h3: 6,
        text_dropout: 0.0,
        fusion_d: 16,
        image_c: 2,
        image_m: 4,
        image_l: 3,
        image_p: 0.0,
        image_size: 16,
        image_proj_dim: 16,
        train_batch: 20,
        train_epochs: 60,
        train_lr: 1e-2,
        train_optimizer: OptimizerKind::Adam,
        model_classes: classes,
        ..Config::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labelled() {
        let a = SyntheticSet::generate(SyntheticSpec::default()).unwrap();
        let b = SyntheticSet::generate(SyntheticSpec::default()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 200);
        assert!(a.records.iter().all(|r| r.label.unwrap() < 3));
        let counts = (0..3).map(|k| a.records.iter().filter(|r| r.label == Some(k)).count());
        assert!(counts.into_iter().all(|c| c > 40));
    }

    #[test]
    fn samples_cover_every_member() {
        let set = SyntheticSet::generate(SyntheticSpec {
            records: 10,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = set.configure(small_config(3));
        let samples = set.samples(&cfg).unwrap();
        assert_eq!(samples.len(), 10);
        let s = &samples[0];
        assert_eq!(s.tokens.cols(), 8);
        assert_eq!(s.pixels.as_ref().unwrap().shape(), &[16, 16, 3]);
        assert_eq!(s.image_vector.as_ref().unwrap().len(), 16);
        assert_eq!(s.sentence.as_ref().unwrap().len(), 8);
    }

    #[test]
    fn written_files_reload_identically() {
        let set = SyntheticSet::generate(SyntheticSpec {
            records: 6,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.write_to(dir.path()).unwrap();
        let cfg = Config::load(&dir.path().join("config.txt")).unwrap();
        let data = crate::dataset::load_dataset(&dir.path().join("data.jsonl"), 3).unwrap();
        assert_eq!(data.records, set.records);
        let emb = EmbeddingTable::load(&dir.path().join("embeddings.txt")).unwrap();
        let sv = VectorStore::load(&dir.path().join("sentence_vectors.jsonl")).unwrap();
        let iv = VectorStore::load(&dir.path().join("image_features.jsonl")).unwrap();
        let lexicon = ReplacementLexicon::default();
        let res = Resources {
            embeddings: &emb,
            lexicon: &lexicon,
            sentence_vectors: Some(&sv),
            image_features: Some(&iv),
            images: None,
            image_size: cfg.image_size,
            image_channels: cfg.image_channels,
        };
        let from_disk = prepare_samples(&data, &res, Needs::of(&cfg.ensemble_members)).unwrap();
        let in_memory = set.samples(&set.configure(cfg)).unwrap();
        for (a, b) in from_disk.iter().zip(&in_memory) {
            assert_eq!(a.tokens, b.tokens, "tokens {}", a.id);
            assert_eq!(a.sentence, b.sentence, "sentence {}", a.id);
            assert_eq!(a.image_vector, b.image_vector, "image vector {}", a.id);
            assert_eq!(a.pixels, b.pixels, "pixels {}", a.id);
        }
        assert_eq!(from_disk, in_memory);
    }
}
