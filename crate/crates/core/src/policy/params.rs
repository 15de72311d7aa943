use serde::{Deserialize, Serialize};

use super::{PolicyConfig, PolicyError};
use crate::rng::RngStream;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    /// `arity × hidden_dim`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// All trainable advisor weights.
///
/// The network is `user embedding ⊕ context features → tanh hidden layer →
/// one linear softmax head per advice axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// `user_vocab_size × embed_dim`
    pub user_embedding: Matrix,
    /// `hidden_dim × (embed_dim + feature_dim)`
    pub hidden_weights: Matrix,
    pub hidden_bias: Vec<f64>,
    pub heads: Vec<HeadWeights>,
}

/// Gradients share the parameter layout.
pub type ParamGradient = PolicyParams;

/// A named flat tensor, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: &PolicyConfig) -> Self {
        let input = config.embed_dim + config.feature_dim();
        PolicyParams {
            user_embedding: Matrix::zeros(config.users.len(), config.embed_dim),
            hidden_weights: Matrix::zeros(config.hidden_dim, input),
            hidden_bias: vec![0.0; config.hidden_dim],
            heads: config
                .heads
                .iter()
                .map(|h| HeadWeights {
                    weights: Matrix::zeros(h.arity, config.hidden_dim),
                    bias: vec![0.0; h.arity],
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            &self.user_embedding.data,
            &self.hidden_weights.data,
            &self.hidden_bias,
        ];
        for h in &self.heads {
            out.push(&h.weights.data);
            out.push(&h.bias);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.user_embedding.data,
            &mut self.hidden_weights.data,
            &mut self.hidden_bias,
        ];
        for h in &mut self.heads {
            out.push(&mut h.weights.data);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fill(&mut self, v: f64) {
        for s in self.slices_mut() {
            s.fill(v);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    /// Overwrite every entry from a flat vector in [`Self::flat`] order.
    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.len(), "flat length mismatch");
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("flat index {index} out of range")
    }

    pub fn set_flat_at(&mut self, index: usize, v: f64) {
        let mut i = index;
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = v;
                return;
            }
            i -= s.len();
        }
        panic!("flat index {index} out of range")
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn matches_config(&self, config: &PolicyConfig) -> bool {
        let z = PolicyParams::zeros(config);
        self.shapes() == z.shapes()
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.to_tensors().into_iter().map(|t| t.shape).collect()
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![
            NamedTensor {
                name: "user_embedding".into(),
                shape: vec![self.user_embedding.rows, self.user_embedding.cols],
                data: self.user_embedding.data.clone(),
            },
            NamedTensor {
                name: "hidden_weights".into(),
                shape: vec![self.hidden_weights.rows, self.hidden_weights.cols],
                data: self.hidden_weights.data.clone(),
            },
            NamedTensor {
                name: "hidden_bias".into(),
                shape: vec![self.hidden_bias.len()],
                data: self.hidden_bias.clone(),
            },
        ];
        for (k, h) in self.heads.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("head{k}.weights"),
                shape: vec![h.weights.rows, h.weights.cols],
                data: h.weights.data.clone(),
            });
            out.push(NamedTensor {
                name: format!("head{k}.bias"),
                shape: vec![h.bias.len()],
                data: h.bias.clone(),
            });
        }
        out
    }

    /// Rebuild parameters from checkpoint tensors, checking every name and
    /// shape against `config`.
    pub fn from_tensors(config: &PolicyConfig, tensors: &[NamedTensor]) -> Result<Self, PolicyError> {
        let mut params = PolicyParams::zeros(config);
        let expected = params.to_tensors();
        if expected.len() != tensors.len() {
            return Err(PolicyError::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (want, got) in expected.iter().zip(tensors) {
            let numel: usize = got.shape.iter().product();
            if want.name != got.name || want.shape != got.shape || numel != got.data.len() {
                return Err(PolicyError::ShapeMismatch(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        for (dst, t) in params.slices_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(&t.data);
        }
        Ok(params)
    }
}

/// Draw every weight i.i.d. uniform in `[-init_scale, init_scale]`, in
/// layout order.
pub fn init_params(config: &PolicyConfig, rng: &mut RngStream) -> PolicyParams {
    let mut params = PolicyParams::zeros(config);
    let scale = config.init_scale;
    if scale == 0.0 {
        return params;
    }
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            *v = (2.0 * rng.next_f64() - 1.0) * scale;
        }
    }
    params
}
