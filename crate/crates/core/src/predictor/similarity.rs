use crate::error::{shape_error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Graph nodes of `O`: `per_caption[n][l]` is `[R × S]`, where the `R` rows
/// are the `[context ; block]` rows of every per-block forward, in block
/// order.
#[derive(Debug, Clone)]
pub struct SimilarityVars {
    pub per_caption: Vec<Vec<Var>>,
    /// Predictor layer index of each conditioned layer.
    pub layers: Vec<usize>,
    pub row_patch: Vec<usize>,
    pub row_block: Vec<usize>,
    pub context_len: usize,
    /// `|B_x| + |B_y|` with duplicates across blocks removed.
    pub unique_patches: usize,
}

impl SimilarityVars {
    pub fn rows(&self) -> usize {
        self.row_patch.len()
    }

    pub fn extract<T: Scalar>(&self, g: &Graph<T>) -> Result<SimilarityTensor<T>> {
        let n = self.per_caption.len();
        let l = self.layers.len();
        let r = self.rows();
        let s = g.shape(self.per_caption[0][0])[1];
        let mut data = vec![T::zero(); l * r * n * s];
        for (ni, layers) in self.per_caption.iter().enumerate() {
            for (li, &v) in layers.iter().enumerate() {
                let t = g.value(v);
                if t.shape() != [r, s] {
                    return Err(shape_error("similarity", t.shape(), &[r, s]));
                }
                for ri in 0..r {
                    let dst = ((li * r + ri) * n + ni) * s;
                    data[dst..dst + s].copy_from_slice(t.row(ri));
                }
            }
        }
        Ok(SimilarityTensor {
            layers: self.layers.clone(),
            rows: r,
            captions: n,
            seq_len: s,
            data,
            row_patch: self.row_patch.clone(),
            row_block: self.row_block.clone(),
        })
    }
}

/// Values of `O`, laid out `[layer][row][caption][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor<T> {
    pub layers: Vec<usize>,
    pub rows: usize,
    pub captions: usize,
    pub seq_len: usize,
    pub data: Vec<T>,
    pub row_patch: Vec<usize>,
    pub row_block: Vec<usize>,
}

impl<T: Scalar> SimilarityTensor<T> {
    pub fn scores(&self, layer: usize, row: usize, caption: usize) -> &[T] {
        let i = ((layer * self.rows + row) * self.captions + caption) * self.seq_len;
        &self.data[i..i + self.seq_len]
    }

    /// Ō: mean over the layer axis, `[row][caption][token]`.
    pub fn layer_mean(&self) -> Vec<T> {
        let block = self.rows * self.captions * self.seq_len;
        let inv = T::one() / T::from_usize(self.layers.len()).unwrap();
        (0..block)
            .map(|i| (0..self.layers.len()).map(|l| self.data[l * block + i]).sum::<T>() * inv)
            .collect()
    }
}
