//! Text feature extractors: stacked BiLSTM, stacked BiGRU, stacked BiLSTM
//! with attention pooling, and a dense layer over sentence vectors.

mod attention;
mod birnn;
mod gru;
mod lstm;

pub use attention::{attend, AttentionCache, AttentionParams};
pub use birnn::{run_bidirectional, run_bidirectional_pair, BiCache, BiLayer, StackCache, StackedBiRnn};
pub use gru::{gru_step, GruCache, GruCell};
pub use lstm::{lstm_step, LstmCache, LstmCell};

use crate::error::{Error, Result};
use crate::nn::{apply_dropout, apply_mask, join, relu_backward_in_place, relu_in_place, Dense, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Recurrent state. `c` is empty for cells without a separate memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// A single-step recurrent cell with a hand-written backward pass.
pub trait RecurrentCell: Params + Clone + Send + Sync {
    type Cache: Send;

    fn hidden_size(&self) -> usize;
    fn input_size(&self) -> usize;
    fn zero_state(&self) -> CellState;
    fn step(&self, prev: &CellState, x: &[f64]) -> (CellState, Self::Cache);

    /// Given the gradient w.r.t. the produced state, accumulates parameter
    /// gradients and returns the gradients w.r.t. the previous state and `x`.
    fn step_backward(
        &self,
        cache: &Self::Cache,
        d_next: &CellState,
        grads: &mut Self,
    ) -> (CellState, Vec<f64>);
}

/// Which text extractor a member uses, numbered 1 to 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TextExtractorKind {
    BiLstm = 1,
    BiGru = 2,
    BiLstmAttention = 3,
    SentenceDense = 4,
}

impl TextExtractorKind {
    pub const ALL: [TextExtractorKind; 4] = [
        TextExtractorKind::BiLstm,
        TextExtractorKind::BiGru,
        TextExtractorKind::BiLstmAttention,
        TextExtractorKind::SentenceDense,
    ];

    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            1 => Ok(TextExtractorKind::BiLstm),
            2 => Ok(TextExtractorKind::BiGru),
            3 => Ok(TextExtractorKind::BiLstmAttention),
            4 => Ok(TextExtractorKind::SentenceDense),
            _ => Err(Error::Config(format!("text extractor id must be 1..=4, got {id}"))),
        }
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TextExtractorKind::BiLstm => "bilstm",
            TextExtractorKind::BiGru => "bigru",
            TextExtractorKind::BiLstmAttention => "bilstm_attention",
            TextExtractorKind::SentenceDense => "sentence_dense",
        }
    }

    pub fn uses_tokens(self) -> bool {
        self != TextExtractorKind::SentenceDense
    }
}

/// Layer sizes shared by the text extractors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextDims {
    /// Width of stacked layers 1 and 2; zero drops them.
    pub h12: usize,
    /// Width of the top layer, which produces the feature.
    pub h3: usize,
    /// Output width of the sentence-vector dense path.
    pub dense: usize,
}

impl TextDims {
    fn layer_sizes(&self) -> Vec<usize> {
        if self.h12 == 0 {
            vec![self.h3]
        } else {
            vec![self.h12, self.h12, self.h3]
        }
    }
}

pub enum TextInput<'a> {
    Tokens(&'a Tensor),
    Sentence(&'a Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextFeature {
    pub vector: Tensor,
    pub extractor_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextExtractor {
    BiLstm(StackedBiRnn<LstmCell>),
    BiGru(StackedBiRnn<GruCell>),
    BiLstmAttention {
        rnn: StackedBiRnn<LstmCell>,
        attention: AttentionParams,
    },
    SentenceDense(Dense),
}

impl Params for TextExtractor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            TextExtractor::BiLstm(rnn) => rnn.visit(&join(prefix, "rnn"), f),
            TextExtractor::BiGru(rnn) => rnn.visit(&join(prefix, "rnn"), f),
            TextExtractor::BiLstmAttention { rnn, attention } => {
                rnn.visit(&join(prefix, "rnn"), f);
                attention.visit(&join(prefix, "attention"), f);
            }
            TextExtractor::SentenceDense(dense) => dense.visit(&join(prefix, "dense"), f),
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        match self {
            TextExtractor::BiLstm(rnn) => rnn.visit_mut(f),
            TextExtractor::BiGru(rnn) => rnn.visit_mut(f),
            TextExtractor::BiLstmAttention { rnn, attention } => {
                rnn.visit_mut(f);
                attention.visit_mut(f);
            }
            TextExtractor::SentenceDense(dense) => dense.visit_mut(f),
        }
    }
}

pub enum TextCache {
    Lstm {
        stack: StackCache<LstmCell>,
        top: Tensor,
        attention: Option<AttentionCache>,
        mask: Option<Vec<f64>>,
    },
    Gru {
        stack: StackCache<GruCell>,
        top: Tensor,
        mask: Option<Vec<f64>>,
    },
    Dense {
        input: Vec<f64>,
        output: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
}

/// Forward state at the last step followed by backward state at the first.
fn final_states(top: &Tensor) -> Vec<f64> {
    let h = top.cols() / 2;
    let last = top.rows() - 1;
    [&top.row(last)[..h], &top.row(0)[h..]].concat()
}

fn final_states_backward(top: &Tensor, d_feature: &[f64]) -> Tensor {
    let h = top.cols() / 2;
    let last = top.rows() - 1;
    let mut d_top = Tensor::zeros(top.shape());
    d_top.row_mut(last)[..h].copy_from_slice(&d_feature[..h]);
    d_top.row_mut(0)[h..].copy_from_slice(&d_feature[h..]);
    d_top
}

impl TextExtractor {
    pub fn new(kind: TextExtractorKind, input_dim: usize, dims: TextDims, rng: &mut Rng) -> Self {
        let sizes = dims.layer_sizes();
        match kind {
            TextExtractorKind::BiLstm => {
                TextExtractor::BiLstm(StackedBiRnn::new(input_dim, &sizes, |i, h| LstmCell::new(i, h, rng)))
            }
            TextExtractorKind::BiGru => {
                TextExtractor::BiGru(StackedBiRnn::new(input_dim, &sizes, |i, h| GruCell::new(i, h, rng)))
            }
            TextExtractorKind::BiLstmAttention => {
                let rnn = StackedBiRnn::new(input_dim, &sizes, |i, h| LstmCell::new(i, h, rng));
                let width = rnn.output_width();
                TextExtractor::BiLstmAttention {
                    rnn,
                    attention: AttentionParams::new(width, width, rng),
                }
            }
            TextExtractorKind::SentenceDense => TextExtractor::SentenceDense(Dense::new(input_dim, dims.dense, rng)),
        }
    }

    pub fn kind(&self) -> TextExtractorKind {
        match self {
            TextExtractor::BiLstm(_) => TextExtractorKind::BiLstm,
            TextExtractor::BiGru(_) => TextExtractorKind::BiGru,
            TextExtractor::BiLstmAttention { .. } => TextExtractorKind::BiLstmAttention,
            TextExtractor::SentenceDense(_) => TextExtractorKind::SentenceDense,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            TextExtractor::BiLstm(rnn) => rnn.output_width(),
            TextExtractor::BiGru(rnn) => rnn.output_width(),
            TextExtractor::BiLstmAttention { rnn, .. } => rnn.output_width(),
            TextExtractor::SentenceDense(dense) => dense.output_size(),
        }
    }

    /// Computes the feature vector. With `rng` set (training), dropout at
    /// `rate` is applied between stacked layers and to the feature.
    pub fn forward(
        &self,
        input: TextInput<'_>,
        rate: f64,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Vec<f64>, TextCache)> {
        match (self, input) {
            (TextExtractor::BiLstm(rnn), TextInput::Tokens(x)) => {
                let (top, stack) = rnn.forward(x, rate, rng.as_deref_mut())?;
                let mut feature = final_states(&top);
                let mask = apply_dropout(&mut feature, rate, rng);
                Ok((feature, TextCache::Lstm { stack, top, attention: None, mask }))
            }
            (TextExtractor::BiGru(rnn), TextInput::Tokens(x)) => {
                let (top, stack) = rnn.forward(x, rate, rng.as_deref_mut())?;
                let mut feature = final_states(&top);
                let mask = apply_dropout(&mut feature, rate, rng);
                Ok((feature, TextCache::Gru { stack, top, mask }))
            }
            (TextExtractor::BiLstmAttention { rnn, attention }, TextInput::Tokens(x)) => {
                let (top, stack) = rnn.forward(x, rate, rng.as_deref_mut())?;
                let (mut feature, attn) = attention.forward(&top)?;
                let mask = apply_dropout(&mut feature, rate, rng);
                Ok((
                    feature,
                    TextCache::Lstm {
                        stack,
                        top,
                        attention: Some(attn),
                        mask,
                    },
                ))
            }
            (TextExtractor::SentenceDense(dense), TextInput::Sentence(v)) => {
                let input = v.data().to_vec();
                let mut output = dense.forward(&input)?;
                relu_in_place(&mut output);
                let mut feature = output.clone();
                let mask = apply_dropout(&mut feature, rate, rng);
                Ok((feature, TextCache::Dense { input, output, mask }))
            }
            (extractor, _) => Err(Error::Usage(format!(
                "{} extractor received the wrong kind of text input",
                extractor.kind().name()
            ))),
        }
    }

    /// Accumulates into `grads` (same variant as `self`) and returns the
    /// gradient w.r.t. the extractor input.
    pub fn backward(&self, cache: &TextCache, d_feature: &[f64], grads: &mut TextExtractor) -> Tensor {
        let mut d = d_feature.to_vec();
        match (self, cache, grads) {
            (TextExtractor::BiLstm(rnn), TextCache::Lstm { stack, top, mask, .. }, TextExtractor::BiLstm(g)) => {
                apply_mask(&mut d, mask.as_ref());
                rnn.backward(stack, &final_states_backward(top, &d), g)
            }
            (TextExtractor::BiGru(rnn), TextCache::Gru { stack, top, mask }, TextExtractor::BiGru(g)) => {
                apply_mask(&mut d, mask.as_ref());
                rnn.backward(stack, &final_states_backward(top, &d), g)
            }
            (
                TextExtractor::BiLstmAttention { rnn, attention },
                TextCache::Lstm {
                    stack,
                    top,
                    attention: Some(attn),
                    mask,
                },
                TextExtractor::BiLstmAttention {
                    rnn: g_rnn,
                    attention: g_attn,
                },
            ) => {
                apply_mask(&mut d, mask.as_ref());
                let d_top = attention.backward(attn, top, &d, g_attn);
                rnn.backward(stack, &d_top, g_rnn)
            }
            (TextExtractor::SentenceDense(dense), TextCache::Dense { input, output, mask }, TextExtractor::SentenceDense(g)) => {
                apply_mask(&mut d, mask.as_ref());
                relu_backward_in_place(output, &mut d);
                Tensor::vector(dense.backward(input, &d, g))
            }
            _ => panic!("text extractor backward called with mismatched cache or gradient variant"),
        }
    }
}

/// Inference-mode text feature.
pub fn extract_text_feature(extractor: &TextExtractor, input: TextInput<'_>) -> Result<TextFeature> {
    let (vector, _) = extractor.forward(input, 0.0, None)?;
    Ok(TextFeature {
        vector: Tensor::vector(vector),
        extractor_id: extractor.kind().id(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init_uniform;

    #[test]
    fn kind_ids() {
        for kind in TextExtractorKind::ALL {
            assert_eq!(TextExtractorKind::from_id(kind.id()).unwrap(), kind);
        }
        assert!(matches!(TextExtractorKind::from_id(5), Err(Error::Config(_))));
        assert!(TextExtractorKind::from_id(0).is_err());
    }

    #[test]
    fn table_sized_bilstm_feature_is_twice_h3() {
        let mut rng = Rng::new(1);
        let dims = TextDims { h12: 0, h3: 160, dense: 128 };
        let ex = TextExtractor::new(TextExtractorKind::BiLstm, 4, dims, &mut rng);
        assert_eq!(ex.feature_dim(), 320);
        let x = init_uniform(&mut rng, &[2, 4], 1.0).unwrap();
        let f = extract_text_feature(&ex, TextInput::Tokens(&x)).unwrap();
        assert_eq!(f.vector.len(), 320);
        assert_eq!(f.extractor_id, 1);
    }

    #[test]
    fn zero_attention_is_mean_of_states() {
        let mut rng = Rng::new(2);
        let dims = TextDims { h12: 3, h3: 2, dense: 4 };
        let rnn = StackedBiRnn::new(5, &dims.layer_sizes(), |i, h| LstmCell::new(i, h, &mut rng));
        let ex = TextExtractor::BiLstmAttention {
            rnn: rnn.clone(),
            attention: AttentionParams::zeros(4, 4),
        };
        let x = init_uniform(&mut rng, &[6, 5], 1.0).unwrap();
        let (top, _) = rnn.forward(&x, 0.0, None).unwrap();
        let f = extract_text_feature(&ex, TextInput::Tokens(&x)).unwrap();
        for c in 0..4 {
            let mean = (0..6).map(|t| top.row(t)[c]).sum::<f64>() / 6.0;
            assert!((f.vector.data()[c] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_sentence_path_is_relu() {
        let ex = TextExtractor::SentenceDense(Dense::identity(4));
        let v = Tensor::vector(vec![1.0, -2.0, 0.5, -0.1]);
        let f = extract_text_feature(&ex, TextInput::Sentence(&v)).unwrap();
        assert_eq!(f.vector.data(), &[1.0, 0.0, 0.5, 0.0]);
        assert_eq!(f.extractor_id, 4);
        assert!(matches!(
            extract_text_feature(&ex, TextInput::Tokens(&Tensor::zeros(&[1, 4]))),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn final_states_pick_ends() {
        let top = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]).unwrap();
        assert_eq!(final_states(&top), vec![5.0, 6.0, 3.0, 4.0]);
    }
}
