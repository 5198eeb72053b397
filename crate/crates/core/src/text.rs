//! Caption token sequences as the predictor sees them.

use crate::error::{domain_error, shape_error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One caption. `embeddings` is stored token-major, `[S × d_t]`: row `s` is
/// the embedding of token `s` (the transpose of the column convention
/// `t ∈ R^{d_t×S}`).
#[derive(Debug, Clone, PartialEq)]
pub struct WordSequence<T> {
    pub embeddings: Tensor<T>,
    pub token_ids: Vec<u32>,
    /// `false` at pad positions.
    pub live: Vec<bool>,
}

impl<T: Scalar> WordSequence<T> {
    pub fn new(embeddings: Tensor<T>, token_ids: Vec<u32>, live: Vec<bool>) -> Result<Self> {
        let (s, _) = embeddings.dims2()?;
        if token_ids.len() != s || live.len() != s {
            return Err(shape_error("word_sequence", embeddings.shape(), &[token_ids.len(), live.len()]));
        }
        if !live.iter().any(|&l| l) {
            return Err(domain_error("word_sequence", "caption has no live tokens"));
        }
        Ok(WordSequence {
            embeddings,
            token_ids,
            live,
        })
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn text_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// `[S]` weights: 1 for live tokens, 0 for pads.
    pub fn pad_weights(&self) -> Tensor<T> {
        let w = self.live.iter().map(|&l| if l { T::one() } else { T::zero() }).collect();
        Tensor::new(vec![self.len()], w).expect("non-empty")
    }

    /// t̄: mean embedding over live tokens, `[1 × d_t]`.
    pub fn mean_embedding(&self) -> Tensor<T> {
        let dt = self.text_dim();
        let mut acc = vec![T::zero(); dt];
        let mut n = 0usize;
        for (s, &l) in self.live.iter().enumerate() {
            if l {
                n += 1;
                for (a, &v) in acc.iter_mut().zip(self.embeddings.row(s)) {
                    *a += v;
                }
            }
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        Tensor::new(vec![1, dt], acc.into_iter().map(|v| v * inv).collect()).expect("dt > 0")
    }
}

/// The N captions of one image, all padded to one length.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionBatch<T> {
    pub captions: Vec<WordSequence<T>>,
}

impl<T: Scalar> CaptionBatch<T> {
    pub fn new(captions: Vec<WordSequence<T>>) -> Result<Self> {
        let Some(first) = captions.first() else {
            return Err(domain_error("caption_batch", "no captions"));
        };
        let shape = first.embeddings.shape().to_vec();
        if let Some(bad) = captions.iter().find(|c| c.embeddings.shape() != shape.as_slice()) {
            return Err(shape_error("caption_batch", &shape, bad.embeddings.shape()));
        }
        Ok(CaptionBatch { captions })
    }

    pub fn n(&self) -> usize {
        self.captions.len()
    }

    pub fn seq_len(&self) -> usize {
        self.captions[0].len()
    }

    pub fn text_dim(&self) -> usize {
        self.captions[0].text_dim()
    }

    /// Captions reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        CaptionBatch {
            captions: perm.iter().map(|&i| self.captions[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_skips_pads() {
        let e = Tensor::<f64>::from_f64(vec![3, 2], &[1., 2., 3., 4., 0., 0.]).unwrap();
        let w = WordSequence::new(e, vec![5, 6, 0], vec![true, true, false]).unwrap();
        assert_eq!(w.mean_embedding().data(), &[2., 3.]);
        assert_eq!(w.pad_weights().data(), &[1., 1., 0.]);
        let dead = WordSequence::new(Tensor::<f64>::zeros(vec![1, 2]), vec![0], vec![false]);
        assert!(dead.is_err());
    }

    #[test]
    fn batch_requires_equal_shapes() {
        let a = WordSequence::new(Tensor::<f32>::zeros(vec![2, 4]), vec![1, 1], vec![true, true]).unwrap();
        let b = WordSequence::new(Tensor::<f32>::zeros(vec![3, 4]), vec![1, 1, 1], vec![true; 3]).unwrap();
        assert!(CaptionBatch::new(vec![a.clone(), b]).is_err());
        assert!(CaptionBatch::<f32>::new(vec![]).is_err());
        assert_eq!(CaptionBatch::new(vec![a.clone(), a]).unwrap().n(), 2);
    }
}
