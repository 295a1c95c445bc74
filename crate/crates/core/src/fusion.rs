//! Per-member fusion heads and soft voting across ensemble members.
//!
//! A member pairs text extractor `i` with image extractor `j`, concatenates
//! their features and classifies with `softmax(W2 ReLU(W1 [t; v]))`. The
//! ensemble averages member probability vectors.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image_channel::{
    CnnConfig, ImageCache, ImageExtractor, ImageExtractorKind, ImageFeature, ImageInput, CnnExtractor,
};
use crate::nn::{impl_params, join, relu_backward_in_place, relu_in_place, Dense, Params};
use crate::rng::Rng;
use crate::tensor::{softmax_in_place, Tensor};
use crate::text_channel::{TextCache, TextDims, TextExtractor, TextExtractorKind, TextFeature, TextInput};

/// Tolerance on `Σ probs = 1`.
pub const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemberSpec {
    pub text_extractor: TextExtractorKind,
    pub image_extractor: ImageExtractorKind,
}

impl MemberSpec {
    pub fn new(text: usize, image: usize) -> Result<Self> {
        Ok(MemberSpec {
            text_extractor: TextExtractorKind::from_id(text)?,
            image_extractor: ImageExtractorKind::from_id(image)?,
        })
    }

    /// All eight `(i, j)` pairs in `i`-major order.
    pub fn all() -> Vec<MemberSpec> {
        TextExtractorKind::ALL
            .iter()
            .flat_map(|&t| {
                ImageExtractorKind::ALL.iter().map(move |&i| MemberSpec {
                    text_extractor: t,
                    image_extractor: i,
                })
            })
            .collect()
    }

    /// `"i:j"`.
    pub fn label(&self) -> String {
        format!("{}:{}", self.text_extractor.id(), self.image_extractor.id())
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (i, j) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("member must look like i:j, got {s:?}")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("member must look like i:j, got {s:?}")))
        };
        MemberSpec::new(num(i)?, num(j)?)
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let specs: Vec<MemberSpec> = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(MemberSpec::parse)
            .collect::<Result<_>>()?;
        if specs.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        for (n, a) in specs.iter().enumerate() {
            if specs[..n].contains(a) {
                return Err(Error::Config(format!("member {} listed twice", a.label())));
            }
        }
        Ok(specs)
    }
}

/// Every size needed to build a member.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDims {
    pub embedding_dim: usize,
    pub sentence_dim: usize,
    pub text: TextDims,
    pub cnn: CnnConfig,
    pub image_feature_dim: usize,
    pub projection_dim: usize,
    /// Hidden width of the fusion head; zero gives a single softmax layer.
    pub fusion_dense: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.text.h3 == 0 {
            return Err(Error::Config("text.h3 must be positive".into()));
        }
        if self.text.dense == 0 || self.projection_dim == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        self.cnn.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    probs: Tensor,
}

impl Prediction {
    /// Checks nonnegativity and `Σ = 1 ± 1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("prediction"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input(format!("probabilities must be finite and nonnegative: {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::Input(format!("probabilities sum to {sum}")));
        }
        Ok(Prediction {
            probs: Tensor::vector(probs),
        })
    }

    pub fn probs(&self) -> &[f64] {
        self.probs.data()
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    pub fn label(&self) -> usize {
        predict_label(self)
    }
}

/// Argmax; ties go to the lowest class index.
pub fn predict_label(p: &Prediction) -> usize {
    argmax(p.probs())
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = k;
        }
    }
    best
}

/// Weighted mean of member probabilities. Weights default to uniform and are
/// renormalized only when they do not already sum to one.
pub fn soft_vote(preds: &[Prediction], weights: Option<&[f64]>) -> Result<Prediction> {
    let first = preds.first().ok_or_else(|| Error::Usage("soft vote over zero members".into()))?;
    let k = first.classes();
    for p in preds {
        if p.classes() != k {
            return Err(Error::shape("soft_vote", &[k], &[p.classes()]));
        }
    }
    let mut out = vec![0.0; k];
    match weights {
        None => {
            for p in preds {
                for (o, v) in out.iter_mut().zip(p.probs()) {
                    *o += v;
                }
            }
            let n = preds.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        Some(w) => {
            if w.len() != preds.len() {
                return Err(Error::Usage(format!("{} weights for {} members", w.len(), preds.len())));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Usage("vote weights must be finite and nonnegative".into()));
            }
            let total: f64 = w.iter().sum();
            if total == 0.0 {
                return Err(Error::Usage("vote weights are all zero".into()));
            }
            for (p, &wi) in preds.iter().zip(w) {
                for (o, v) in out.iter_mut().zip(p.probs()) {
                    *o += wi * v;
                }
            }
            if total != 1.0 {
                out.iter_mut().for_each(|o| *o /= total);
            }
        }
    }
    Prediction::new(out)
}

/// `softmax(W2 ReLU(W1 x))`, or `softmax(W2 x)` without a hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

impl_params!(FusionHead { hidden, output });

pub struct HeadCache {
    input: Vec<f64>,
    hidden: Option<Vec<f64>>,
}

impl FusionHead {
    pub fn new(input: usize, dense: usize, classes: usize, rng: &mut Rng) -> Self {
        if dense == 0 {
            FusionHead {
                hidden: None,
                output: Dense::new(input, classes, rng),
            }
        } else {
            FusionHead {
                hidden: Some(Dense::new(input, dense, rng)),
                output: Dense::new(dense, classes, rng),
            }
        }
    }

    pub fn zeros(input: usize, dense: usize, classes: usize) -> Self {
        FusionHead {
            hidden: (dense > 0).then(|| Dense::zeros(input, dense)),
            output: Dense::zeros(if dense == 0 { input } else { dense }, classes),
        }
    }

    pub fn input_size(&self) -> usize {
        match &self.hidden {
            Some(h) => h.input_size(),
            None => self.output.input_size(),
        }
    }

    pub fn classes(&self) -> usize {
        self.output.output_size()
    }

    /// Unnormalized class scores for the concatenated features.
    pub fn logits(&self, text: &[f64], image: &[f64]) -> Result<(Vec<f64>, HeadCache)> {
        if text.len() + image.len() != self.input_size() {
            return Err(Error::shape("fusion head", &[self.input_size()], &[text.len() + image.len()]));
        }
        let input = [text, image].concat();
        let (logits, hidden) = match &self.hidden {
            Some(h) => {
                let mut a = h.forward(&input)?;
                relu_in_place(&mut a);
                (self.output.forward(&a)?, Some(a))
            }
            None => (self.output.forward(&input)?, None),
        };
        Ok((logits, HeadCache { input, hidden }))
    }

    pub fn forward(&self, text: &[f64], image: &[f64]) -> Result<Vec<f64>> {
        let (mut p, _) = self.logits(text, image)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Gradient w.r.t. the concatenated input, given `∂L/∂logits`.
    pub fn backward(&self, cache: &HeadCache, d_logits: &[f64], grads: &mut FusionHead) -> Vec<f64> {
        match (&self.hidden, &cache.hidden, &mut grads.hidden) {
            (Some(h), Some(a), Some(gh)) => {
                let mut da = self.output.backward(a, d_logits, &mut grads.output);
                relu_backward_in_place(a, &mut da);
                h.backward(&cache.input, &da, gh)
            }
            (None, None, None) => self.output.backward(&cache.input, d_logits, &mut grads.output),
            _ => panic!("fusion head backward called with mismatched cache or gradient"),
        }
    }
}

/// Combines one text and one image feature into a class distribution.
pub fn member_forward(head: &FusionHead, text: &TextFeature, image: &ImageFeature) -> Result<Prediction> {
    Prediction::new(head.forward(text.vector.data(), image.vector.data())?)
}

/// One fully prepared record: every input any extractor may need.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[T × E]` embedded tokens.
    pub tokens: Tensor,
    pub sentence: Option<Tensor>,
    /// `[H × W × C]` resized pixels.
    pub pixels: Option<Tensor>,
    pub image_vector: Option<Tensor>,
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DropoutRates {
    pub text: f64,
    pub image: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub spec: MemberSpec,
    pub text: TextExtractor,
    pub image: ImageExtractor,
    pub head: FusionHead,
}

impl Params for Member {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.text.visit(&join(prefix, "text"), f);
        self.image.visit(&join(prefix, "image"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        self.text.visit_mut(f);
        self.image.visit_mut(f);
        self.head.visit_mut(f);
    }
}

pub struct MemberCache {
    text: TextCache,
    text_width: usize,
    image: ImageCache,
    head: HeadCache,
}

impl Member {
    pub fn new(spec: MemberSpec, dims: &ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let text_input = if spec.text_extractor.uses_tokens() {
            dims.embedding_dim
        } else {
            dims.sentence_dim
        };
        if text_input == 0 {
            return Err(Error::Config(format!("member {} needs a sentence-vector width", spec.label())));
        }
        if spec.image_extractor == ImageExtractorKind::Projection && dims.image_feature_dim == 0 {
            return Err(Error::Config(format!("member {} needs an image-feature width", spec.label())));
        }
        let text = TextExtractor::new(spec.text_extractor, text_input, dims.text, rng);
        let image = match spec.image_extractor {
            ImageExtractorKind::Cnn => ImageExtractor::Cnn(CnnExtractor::new(&dims.cnn, rng)?),
            ImageExtractorKind::Projection => {
                ImageExtractor::Projection(Dense::new(dims.image_feature_dim, dims.projection_dim, rng))
            }
        };
        let fused = text.feature_dim() + image_feature_dim(&image, dims);
        let head = FusionHead::new(fused, dims.fusion_dense, dims.classes, rng);
        Ok(Member { spec, text, image, head })
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    fn text_input<'a>(&self, sample: &'a Sample) -> Result<TextInput<'a>> {
        if self.spec.text_extractor.uses_tokens() {
            Ok(TextInput::Tokens(&sample.tokens))
        } else {
            sample
                .sentence
                .as_ref()
                .map(TextInput::Sentence)
                .ok_or_else(|| Error::MissingId(format!("{} (sentence vector)", sample.id)))
        }
    }

    fn image_input<'a>(&self, sample: &'a Sample) -> Result<ImageInput<'a>> {
        match self.spec.image_extractor {
            ImageExtractorKind::Cnn => sample
                .pixels
                .as_ref()
                .map(ImageInput::Pixels)
                .ok_or_else(|| Error::MissingId(format!("{} (image pixels)", sample.id))),
            ImageExtractorKind::Projection => sample
                .image_vector
                .as_ref()
                .map(ImageInput::Features)
                .ok_or_else(|| Error::MissingId(format!("{} (image feature)", sample.id))),
        }
    }

    /// Class scores before softmax. Dropout applies only when `rng` is given.
    pub fn logits(&self, sample: &Sample, rates: DropoutRates, mut rng: Option<&mut Rng>) -> Result<(Vec<f64>, MemberCache)> {
        let (t, text) = self.text.forward(self.text_input(sample)?, rates.text, rng.as_deref_mut())?;
        let (v, image) = self.image.forward(self.image_input(sample)?, rates.image, rng)?;
        let (logits, head) = self.head.logits(&t, &v)?;
        Ok((
            logits,
            MemberCache {
                text,
                text_width: t.len(),
                image,
                head,
            },
        ))
    }

    /// Inference-mode prediction.
    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        let (mut p, _) = self.logits(sample, DropoutRates::default(), None)?;
        softmax_in_place(&mut p);
        Prediction::new(p)
    }

    pub fn backward(&self, cache: &MemberCache, d_logits: &[f64], grads: &mut Member) {
        let d_in = self.head.backward(&cache.head, d_logits, &mut grads.head);
        let (d_text, d_image) = d_in.split_at(cache.text_width);
        self.text.backward(&cache.text, d_text, &mut grads.text);
        self.image.backward(&cache.image, d_image, &mut grads.image);
    }
}

fn image_feature_dim(image: &ImageExtractor, dims: &ModelDims) -> usize {
    match image {
        ImageExtractor::Cnn(_) => dims.cnn.feature_dim(),
        ImageExtractor::Projection(d) => d.output_size(),
    }
}

/// Trained members plus optional vote weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Member>,
    pub weights: Option<Vec<f64>>,
}

impl Ensemble {
    pub fn new(members: Vec<Member>, weights: Option<Vec<f64>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Usage("ensemble needs at least one member".into()));
        }
        if let Some(w) = &weights {
            if w.len() != members.len() {
                return Err(Error::Config(format!("{} vote weights for {} members", w.len(), members.len())));
            }
        }
        Ok(Ensemble { members, weights })
    }

    /// Members evaluate concurrently; votes are combined in member order.
    pub fn member_predictions(&self, sample: &Sample) -> Result<Vec<Prediction>> {
        self.members.par_iter().map(|m| m.predict(sample)).collect()
    }

    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        soft_vote(&self.member_predictions(sample)?, self.weights.as_deref())
    }
}

impl Params for Ensemble {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for m in &self.members {
            let name = format!("member{}_{}", m.spec.text_extractor.id(), m.spec.image_extractor.id());
            m.visit(&join(prefix, &name), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        for m in &mut self.members {
            m.visit_mut(f);
        }
    }
}
