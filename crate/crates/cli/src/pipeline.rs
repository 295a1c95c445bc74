//! Loading configs, stores and records into model-ready samples.

use std::path::{Path, PathBuf};

use memefuse::dataset::{load_dataset, prepare_samples, Dataset, Needs, Resources};
use memefuse::embedding::{EmbeddingTable, VectorStore};
use memefuse::preprocess::ReplacementLexicon;
use memefuse::{Config, Error, Result, Sample};

/// Absolute form of `p`, relative paths taken from `base`.
pub fn anchor(p: &str, base: &Path) -> Result<String> {
    let p = Path::new(p);
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let full = if joined.is_absolute() {
        joined
    } else {
        let cwd = std::env::current_dir().map_err(|e| Error::io(Path::new("."), e))?;
        cwd.join(joined)
    };
    Ok(full.display().to_string())
}

/// Loads a config file (or the defaults) and makes every data path in it
/// absolute, relative to the config file's directory.
pub fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let mut cfg = Config::load(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for slot in [
        &mut cfg.text_lexicon,
        &mut cfg.data_embeddings,
        &mut cfg.data_sentence_vectors,
        &mut cfg.data_image_features,
    ] {
        if let Some(p) = slot.as_deref() {
            *slot = Some(anchor(p, &dir)?);
        }
    }
    Ok(cfg)
}

/// Command-line overrides for the stores named in a config.
#[derive(Clone, Debug, Default)]
pub struct StorePaths {
    pub embeddings: Option<PathBuf>,
    pub sentence_vectors: Option<PathBuf>,
    pub image_features: Option<PathBuf>,
}

impl StorePaths {
    /// Writes the overrides into `cfg` as absolute paths.
    pub fn apply(&self, cfg: &mut Config) -> Result<()> {
        let cwd = Path::new("");
        if let Some(p) = &self.embeddings {
            cfg.data_embeddings = Some(anchor(&p.display().to_string(), cwd)?);
        }
        if let Some(p) = &self.sentence_vectors {
            cfg.data_sentence_vectors = Some(anchor(&p.display().to_string(), cwd)?);
        }
        if let Some(p) = &self.image_features {
            cfg.data_image_features = Some(anchor(&p.display().to_string(), cwd)?);
        }
        Ok(())
    }
}

pub struct Stores {
    pub lexicon: ReplacementLexicon,
    pub embeddings: EmbeddingTable,
    pub sentence_vectors: Option<VectorStore>,
    pub image_features: Option<VectorStore>,
}

impl Stores {
    pub fn load(cfg: &Config) -> Result<Self> {
        let lexicon = match &cfg.text_lexicon {
            Some(p) => ReplacementLexicon::load(Path::new(p))?,
            None => ReplacementLexicon::default(),
        };
        let emb_path = cfg
            .data_embeddings
            .as_deref()
            .ok_or_else(|| Error::Usage("no embeddings given (use --embeddings or data.embeddings)".into()))?;
        let embeddings = EmbeddingTable::load(Path::new(emb_path))?;
        let opt = |p: &Option<String>| p.as_deref().map(|p| VectorStore::load(Path::new(p))).transpose();
        Ok(Stores {
            lexicon,
            embeddings,
            sentence_vectors: opt(&cfg.data_sentence_vectors)?,
            image_features: opt(&cfg.data_image_features)?,
        })
    }

    /// Input widths as (embedding, sentence, image feature). Without a
    /// sentence store the mean embedding stands in, so its width is the
    /// embedding width; without an image store the width is 0.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        let e = self.embeddings.dim();
        let s = self.sentence_vectors.as_ref().map_or(e, VectorStore::dim);
        let i = self.image_features.as_ref().map_or(0, VectorStore::dim);
        (e, s, i)
    }

    pub fn samples(&self, cfg: &Config, data: &Dataset) -> Result<Vec<Sample>> {
        let res = Resources {
            embeddings: &self.embeddings,
            lexicon: &self.lexicon,
            sentence_vectors: self.sentence_vectors.as_ref(),
            image_features: self.image_features.as_ref(),
            images: None,
            image_size: cfg.image_size,
            image_channels: cfg.image_channels,
        };
        prepare_samples(data, &res, Needs::of(&cfg.ensemble_members))
    }
}

/// Records with labels checked against `classes` as a schema question, so a
/// label the model cannot represent is a configuration error.
pub fn load_records(path: &Path, classes: usize) -> Result<Dataset> {
    let data = load_dataset(path, usize::MAX)?;
    if let Some(bad) = data.records.iter().find(|r| r.label.is_some_and(|l| l >= classes)) {
        return Err(Error::Config(format!(
            "record {:?} has label {} but the model has {classes} classes",
            bad.id,
            bad.label.unwrap_or_default()
        )));
    }
    Ok(data)
}

pub fn require_labels(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Input(format!("record {:?} has no label", s.id))))
        .collect()
}
