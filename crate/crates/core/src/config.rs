//! Flat `key=value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`Config::to_text`] writes every set key in sorted order, which
//! is the canonical form stored in model bundles.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::{DropoutRates, MemberSpec, ModelDims};
use crate::image_channel::CnnConfig;
use crate::text_channel::TextDims;
use crate::trainer::{OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub text_h12: usize,
    pub text_h3: usize,
    pub text_dropout: f64,
    pub text_lexicon: Option<String>,
    pub fusion_d: usize,
    pub image_c: usize,
    pub image_m: usize,
    pub image_l: usize,
    pub image_p: f64,
    pub image_size: usize,
    pub image_channels: usize,
    pub image_proj_dim: usize,
    pub train_batch: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_seed: u64,
    pub train_optimizer: OptimizerKind,
    pub train_dev_fraction: f64,
    pub train_class_weights: Option<Vec<f64>>,
    pub model_classes: usize,
    pub model_embedding_dim: Option<usize>,
    pub model_sentence_dim: Option<usize>,
    pub model_image_feature_dim: Option<usize>,
    pub ensemble_members: Vec<MemberSpec>,
    pub ensemble_weights: Option<Vec<f64>>,
    pub data_embeddings: Option<String>,
    pub data_sentence_vectors: Option<String>,
    pub data_image_features: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            text_h12: 300,
            text_h3: 160,
            text_dropout: 0.4,
            text_lexicon: None,
            fusion_d: 128,
            image_c: 6,
            image_m: 64,
            image_l: 3,
            image_p: 0.2,
            image_size: 64,
            image_channels: 3,
            image_proj_dim: 256,
            train_batch: 60,
            train_epochs: 14,
            train_lr: 1e-5,
            train_seed: 0,
            train_optimizer: OptimizerKind::Adam,
            train_dev_fraction: 0.2,
            train_class_weights: None,
            model_classes: 3,
            model_embedding_dim: None,
            model_sentence_dim: None,
            model_image_feature_dim: None,
            ensemble_members: MemberSpec::all(),
            ensemble_weights: None,
            data_embeddings: None,
            data_sentence_vectors: None,
            data_image_features: None,
        }
    }
}

/// Every accepted key, sorted.
pub const KEYS: [&str; 28] = [
    "data.embeddings",
    "data.image_features",
    "data.sentence_vectors",
    "ensemble.members",
    "ensemble.weights",
    "fusion.d",
    "image.c",
    "image.channels",
    "image.l",
    "image.m",
    "image.p",
    "image.proj_dim",
    "image.size",
    "model.classes",
    "model.embedding_dim",
    "model.image_feature_dim",
    "model.sentence_dim",
    "text.dropout",
    "text.h12",
    "text.h3",
    "text.lexicon",
    "train.batch",
    "train.class_weights",
    "train.dev_fraction",
    "train.epochs",
    "train.lr",
    "train.optimizer",
    "train.seed",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn float_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join_list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got {line:?}")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(at(format!("duplicate key {key}")));
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::Config(msg) => at(msg),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let opt_str = |v: &str| (!v.is_empty()).then(|| v.to_string());
        match key {
            "text.h12" => self.text_h12 = num(key, value)?,
            "text.h3" => self.text_h3 = num(key, value)?,
            "text.dropout" => self.text_dropout = num(key, value)?,
            "text.lexicon" => self.text_lexicon = opt_str(value),
            "fusion.d" => self.fusion_d = num(key, value)?,
            "image.c" => self.image_c = num(key, value)?,
            "image.m" => self.image_m = num(key, value)?,
            "image.l" => self.image_l = num(key, value)?,
            "image.p" => self.image_p = num(key, value)?,
            "image.size" => self.image_size = num(key, value)?,
            "image.channels" => self.image_channels = num(key, value)?,
            "image.proj_dim" => self.image_proj_dim = num(key, value)?,
            "train.batch" => self.train_batch = num(key, value)?,
            "train.epochs" => self.train_epochs = num(key, value)?,
            "train.lr" => self.train_lr = num(key, value)?,
            "train.seed" => self.train_seed = num(key, value)?,
            "train.optimizer" => self.train_optimizer = value.parse()?,
            "train.dev_fraction" => self.train_dev_fraction = num(key, value)?,
            "train.class_weights" => {
                self.train_class_weights = if value.is_empty() { None } else { Some(float_list(key, value)?) }
            }
            "model.classes" => self.model_classes = num(key, value)?,
            "model.embedding_dim" => self.model_embedding_dim = Some(num(key, value)?),
            "model.sentence_dim" => self.model_sentence_dim = Some(num(key, value)?),
            "model.image_feature_dim" => self.model_image_feature_dim = Some(num(key, value)?),
            "ensemble.members" => self.ensemble_members = MemberSpec::parse_list(value)?,
            "ensemble.weights" => {
                self.ensemble_weights = if value.is_empty() { None } else { Some(float_list(key, value)?) }
            }
            "data.embeddings" => self.data_embeddings = opt_str(value),
            "data.sentence_vectors" => self.data_sentence_vectors = opt_str(value),
            "data.image_features" => self.data_image_features = opt_str(value),
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Value as written by [`Config::to_text`]; `None` for unset optional keys.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "text.h12" => self.text_h12.to_string(),
            "text.h3" => self.text_h3.to_string(),
            "text.dropout" => self.text_dropout.to_string(),
            "text.lexicon" => self.text_lexicon.clone()?,
            "fusion.d" => self.fusion_d.to_string(),
            "image.c" => self.image_c.to_string(),
            "image.m" => self.image_m.to_string(),
            "image.l" => self.image_l.to_string(),
            "image.p" => self.image_p.to_string(),
            "image.size" => self.image_size.to_string(),
            "image.channels" => self.image_channels.to_string(),
            "image.proj_dim" => self.image_proj_dim.to_string(),
            "train.batch" => self.train_batch.to_string(),
            "train.epochs" => self.train_epochs.to_string(),
            "train.lr" => self.train_lr.to_string(),
            "train.seed" => self.train_seed.to_string(),
            "train.optimizer" => self.train_optimizer.to_string(),
            "train.dev_fraction" => self.train_dev_fraction.to_string(),
            "train.class_weights" => join_list(self.train_class_weights.as_ref()?),
            "model.classes" => self.model_classes.to_string(),
            "model.embedding_dim" => self.model_embedding_dim?.to_string(),
            "model.sentence_dim" => self.model_sentence_dim?.to_string(),
            "model.image_feature_dim" => self.model_image_feature_dim?.to_string(),
            "ensemble.members" => self
                .ensemble_members
                .iter()
                .map(MemberSpec::label)
                .collect::<Vec<_>>()
                .join(","),
            "ensemble.weights" => join_list(self.ensemble_weights.as_ref()?),
            "data.embeddings" => self.data_embeddings.clone()?,
            "data.sentence_vectors" => self.data_sentence_vectors.clone()?,
            "data.image_features" => self.data_image_features.clone()?,
            _ => return None,
        })
    }

    /// Sorted `key=value` lines for every set key.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .filter_map(|k| self.get(k).map(|v| format!("{k}={v}\n")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_classes < 2 {
            return Err(Error::Config(format!("model.classes must be at least 2, got {}", self.model_classes)));
        }
        if let Some(w) = &self.train_class_weights {
            if w.len() != self.model_classes {
                return Err(Error::Config(format!(
                    "train.class_weights has {} entries for {} classes",
                    w.len(),
                    self.model_classes
                )));
            }
        }
        if let Some(w) = &self.ensemble_weights {
            if w.len() != self.ensemble_members.len() {
                return Err(Error::Config(format!(
                    "ensemble.weights has {} entries for {} members",
                    w.len(),
                    self.ensemble_members.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|x| *x == 0.0) {
                return Err(Error::Config("ensemble.weights must be nonnegative and not all zero".into()));
            }
        }
        if self.text_h3 == 0 {
            return Err(Error::Config("text.h3 must be positive".into()));
        }
        if self.image_proj_dim == 0 {
            return Err(Error::Config("image.proj_dim must be positive".into()));
        }
        self.cnn().validate()?;
        self.train_config().validate()
    }

    pub fn cnn(&self) -> CnnConfig {
        CnnConfig {
            layers: self.image_c,
            filters: self.image_m,
            kernel: self.image_l,
            channels: self.image_channels,
            size: self.image_size,
        }
    }

    /// The sentence-vector extractor outputs `fusion.d` values, or `2·h3`
    /// when the fusion head has no hidden layer.
    pub fn text_dims(&self) -> TextDims {
        TextDims {
            h12: self.text_h12,
            h3: self.text_h3,
            dense: if self.fusion_d > 0 { self.fusion_d } else { 2 * self.text_h3 },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train_batch,
            epochs: self.train_epochs,
            learning_rate: self.train_lr,
            seed: self.train_seed,
            dropout: DropoutRates {
                text: self.text_dropout,
                image: self.image_p,
            },
            optimizer: self.train_optimizer,
            dev_fraction: self.train_dev_fraction,
            class_weights: self.train_class_weights.clone(),
        }
    }

    /// Records the input widths so the model can be rebuilt without data.
    pub fn with_input_dims(mut self, embedding: usize, sentence: usize, image_feature: usize) -> Self {
        self.model_embedding_dim = Some(embedding);
        self.model_sentence_dim = Some(sentence);
        self.model_image_feature_dim = Some(image_feature);
        self
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        let need = |v: Option<usize>, key: &str| v.ok_or_else(|| Error::Config(format!("{key} is not set")));
        let dims = ModelDims {
            embedding_dim: need(self.model_embedding_dim, "model.embedding_dim")?,
            sentence_dim: need(self.model_sentence_dim, "model.sentence_dim")?,
            text: self.text_dims(),
            cnn: self.cnn(),
            image_feature_dim: need(self.model_image_feature_dim, "model.image_feature_dim")?,
            projection_dim: self.image_proj_dim,
            fusion_dense: self.fusion_d,
            classes: self.model_classes,
        };
        dims.validate()?;
        Ok(dims)
    }
}
