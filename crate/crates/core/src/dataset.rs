//! JSON Lines records and their conversion into model-ready samples.
//!
//! Each line is `{"id": ..., "text": ..., "image": ..., "label": ...}`.
//! `image` is a PPM path relative to the data file and also the key used to
//! look up a precomputed image feature. `label` may be omitted for
//! prediction.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, VectorStore};
use crate::error::{Error, Result};
use crate::fusion::{MemberSpec, Sample};
use crate::image_channel::{Image, ImageExtractorKind};
use crate::preprocess::{preprocess, ReplacementLexicon, UNK};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    /// Directory that relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// Parses records; ids must be unique and labels below `classes`.
pub fn parse_records(reader: impl BufRead, origin: &str, classes: usize) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let at = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            msg,
        };
        let line = line.map_err(|e| at(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        if !ids.insert(rec.id.clone()) {
            return Err(at(format!("duplicate id {:?}", rec.id)));
        }
        if let Some(label) = rec.label {
            if label >= classes {
                return Err(at(format!("label {label} out of range for {classes} classes")));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn load_dataset(path: &Path, classes: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let records = parse_records(BufReader::new(file), &path.display().to_string(), classes)?;
    Ok(Dataset {
        records,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn write_records(records: &[Record]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Everything needed to turn records into samples.
pub struct Resources<'a> {
    pub embeddings: &'a EmbeddingTable,
    pub lexicon: &'a ReplacementLexicon,
    pub sentence_vectors: Option<&'a VectorStore>,
    pub image_features: Option<&'a VectorStore>,
    /// Decoded images keyed by record `image`; consulted before the disk.
    pub images: Option<&'a HashMap<String, Image>>,
    pub image_size: usize,
    pub image_channels: usize,
}

/// Which sample fields the configured members read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Needs {
    pub sentence: bool,
    pub pixels: bool,
    pub image_vector: bool,
}

impl Needs {
    pub fn of(members: &[MemberSpec]) -> Self {
        Needs {
            sentence: members.iter().any(|m| !m.text_extractor.uses_tokens()),
            pixels: members.iter().any(|m| m.image_extractor == ImageExtractorKind::Cnn),
            image_vector: members.iter().any(|m| m.image_extractor == ImageExtractorKind::Projection),
        }
    }
}

/// Mean of the token embeddings, used when no sentence-vector file is given.
pub fn mean_embedding(tokens: &Tensor) -> Tensor {
    let (rows, cols) = (tokens.rows(), tokens.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(tokens.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    Tensor::vector(out)
}

/// Converts pixels to the requested channel count (grey is replicated, RGB
/// is averaged) and resizes.
pub fn conform_image(image: &Image, size: usize, channels: usize) -> Result<Tensor> {
    let resized = image.resize_nearest(size, size);
    let c = resized.channels();
    if c == channels {
        return Ok(resized.into_pixels());
    }
    let px = resized.pixels().data();
    let data: Vec<f64> = match (c, channels) {
        (1, 3) => px.iter().flat_map(|&v| [v, v, v]).collect(),
        (3, 1) => px.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
        _ => return Err(Error::Config(format!("cannot convert {c}-channel image to {channels} channels"))),
    };
    Tensor::new(vec![size, size, channels], data)
}

pub fn prepare_sample(record: &Record, base_dir: &Path, res: &Resources<'_>, needs: Needs) -> Result<Sample> {
    let seq = preprocess(&record.text, res.lexicon);
    let tokens = if seq.is_empty() {
        res.embeddings.lookup_tokens(&[UNK])?
    } else {
        res.embeddings.lookup(&seq)?
    };
    let sentence = if needs.sentence {
        Some(match res.sentence_vectors {
            Some(store) => store.get(&record.id)?.clone(),
            None => mean_embedding(&tokens),
        })
    } else {
        None
    };
    let pixels = if needs.pixels {
        let conformed = match res.images.and_then(|m| m.get(&record.image)) {
            Some(img) => conform_image(img, res.image_size, res.image_channels)?,
            None => conform_image(&Image::load(&base_dir.join(&record.image))?, res.image_size, res.image_channels)?,
        };
        Some(conformed)
    } else {
        None
    };
    let image_vector = if needs.image_vector {
        let store = res.image_features.ok_or_else(|| {
            Error::Config("members using image extractor 2 need data.image_features".into())
        })?;
        Some(store.get(&record.image)?.clone())
    } else {
        None
    };
    Ok(Sample {
        id: record.id.clone(),
        tokens,
        sentence,
        pixels,
        image_vector,
        label: record.label,
    })
}

pub fn prepare_samples(data: &Dataset, res: &Resources<'_>, needs: Needs) -> Result<Vec<Sample>> {
    data.records
        .iter()
        .map(|r| prepare_sample(r, &data.base_dir, res, needs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_validates() {
        let text = "{\"id\":\"a\",\"text\":\"hi\",\"image\":\"a.ppm\",\"label\":1}\n\n{\"id\":\"b\",\"text\":\"yo\",\"image\":\"b.ppm\"}\n";
        let recs = parse_records(text.as_bytes(), "d.jsonl", 3).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].label, None);
        assert_eq!(parse_records(write_records(&recs).as_bytes(), "again", 3).unwrap(), recs);
    }

    #[test]
    fn rejects_with_line_numbers() {
        let dup = "{\"id\":\"a\",\"text\":\"\",\"image\":\"x\"}\n{\"id\":\"a\",\"text\":\"\",\"image\":\"x\"}\n";
        let err = parse_records(dup.as_bytes(), "d.jsonl", 3).unwrap_err();
        assert!(err.to_string().starts_with("d.jsonl:2: duplicate id"), "{err}");

        let range = "{\"id\":\"a\",\"text\":\"\",\"image\":\"x\",\"label\":3}\n";
        let err = parse_records(range.as_bytes(), "d.jsonl", 3).unwrap_err();
        assert!(err.to_string().starts_with("d.jsonl:1: label 3 out of range"), "{err}");

        let junk = "{\"id\":\"a\"}\nnot json\n";
        assert!(matches!(parse_records(junk.as_bytes(), "d", 3), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_text_becomes_unknown() {
        let emb = EmbeddingTable::from_rows(vec![("cat".into(), vec![1.0, 2.0])]).unwrap();
        let lex = ReplacementLexicon::default();
        let res = Resources {
            embeddings: &emb,
            lexicon: &lex,
            sentence_vectors: None,
            image_features: None,
            images: None,
            image_size: 4,
            image_channels: 3,
        };
        let rec = Record {
            id: "x".into(),
            text: "!!! http://t.co".into(),
            image: "none.ppm".into(),
            label: Some(0),
        };
        let needs = Needs {
            sentence: true,
            ..Needs::default()
        };
        let s = prepare_sample(&rec, Path::new("."), &res, needs).unwrap();
        assert_eq!(s.tokens.shape(), &[1, 2]);
        assert_eq!(s.tokens.data(), &[0.0, 0.0]);
        assert_eq!(s.sentence.unwrap().data(), &[0.0, 0.0]);

        let needs = Needs {
            image_vector: true,
            ..Needs::default()
        };
        assert!(matches!(prepare_sample(&rec, Path::new("."), &res, needs), Err(Error::Config(_))));
    }

    #[test]
    fn channel_conversion() {
        let grey = Image::new(Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap()).unwrap();
        assert_eq!(conform_image(&grey, 1, 3).unwrap().data(), &[0.5, 0.5, 0.5]);
        let rgb = Image::new(Tensor::new(vec![1, 1, 3], vec![0.0, 0.3, 0.6]).unwrap()).unwrap();
        assert!((conform_image(&rgb, 2, 1).unwrap().data()[3] - 0.3).abs() < 1e-15);
    }
}
