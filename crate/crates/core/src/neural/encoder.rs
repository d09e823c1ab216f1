//! Hashed-embedding window encoder.
//!
//! `h_i = tanh(P^T [e_{i-r}; …; e_{i+r}] + b)`, where `e_t` is the embedding
//! row of token `t` hashed into `[0, vocab_size)` and out-of-range positions
//! use a trainable pad vector.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Matrix, NamedArray, NeuralError, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub radius: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 16384, dim: 32, radius: 1 }
    }
}

impl EncoderConfig {
    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn input_dim(&self) -> usize {
        self.window() * self.dim
    }

    pub fn num_params(&self) -> usize {
        self.vocab_size * self.dim + self.input_dim() * self.dim + 2 * self.dim
    }
}

/// 64-bit FNV-1a of the token bytes, reduced modulo the vocabulary size.
pub fn hash_token(token: &str, vocab_size: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % vocab_size as u64) as usize
}

/// Owned encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `vocab_size × dim`
    pub embedding: Vec<f64>,
    /// `input_dim × dim`
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
    pub pad: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(config: EncoderConfig) -> Self {
        Self {
            config,
            embedding: vec![0.0; config.vocab_size * config.dim],
            projection: vec![0.0; config.input_dim() * config.dim],
            bias: vec![0.0; config.dim],
            pad: vec![0.0; config.dim],
        }
    }

    /// Embeddings ~ N(0, embedding_std²), projection ~ N(0, 1/input_dim),
    /// bias and pad zero.
    pub fn random(config: EncoderConfig, embedding_std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(config);
        let emb = Normal::new(0.0, embedding_std).expect("finite std");
        p.embedding.iter_mut().for_each(|x| *x = emb.sample(rng));
        let proj = Normal::new(0.0, 1.0 / (config.input_dim() as f64).sqrt()).expect("finite std");
        p.projection.iter_mut().for_each(|x| *x = proj.sample(rng));
        p
    }

    pub fn view(&self) -> EncoderView<'_> {
        EncoderView {
            config: self.config,
            embedding: &self.embedding,
            projection: &self.projection,
            bias: &self.bias,
            pad: &self.pad,
        }
    }

    pub fn names(prefix: &str) -> [String; 4] {
        ["embedding", "projection", "bias", "pad"].map(|n| format!("{prefix}.{n}"))
    }

    /// Append this encoder's arrays to `out` under `prefix`.
    pub fn push_into(self, prefix: &str, out: &mut ParamVector) {
        let c = self.config;
        let [e, p, b, d] = Self::names(prefix);
        out.push(NamedArray { name: e, shape: vec![c.vocab_size, c.dim], data: self.embedding });
        out.push(NamedArray { name: p, shape: vec![c.input_dim(), c.dim], data: self.projection });
        out.push(NamedArray { name: b, shape: vec![c.dim], data: self.bias });
        out.push(NamedArray { name: d, shape: vec![c.dim], data: self.pad });
    }

    pub fn from_param_vector(params: &ParamVector, prefix: &str, config: EncoderConfig) -> Result<Self, NeuralError> {
        let v = EncoderView::from_params(params, prefix, config)?;
        Ok(Self {
            config,
            embedding: v.embedding.to_vec(),
            projection: v.projection.to_vec(),
            bias: v.bias.to_vec(),
            pad: v.pad.to_vec(),
        })
    }
}

/// Borrowed encoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct EncoderView<'a> {
    pub config: EncoderConfig,
    pub embedding: &'a [f64],
    pub projection: &'a [f64],
    pub bias: &'a [f64],
    pub pad: &'a [f64],
}

/// Mutable gradient buffers with the encoder's layout.
pub struct EncoderGrad<'a> {
    pub embedding: &'a mut [f64],
    pub projection: &'a mut [f64],
    pub bias: &'a mut [f64],
    pub pad: &'a mut [f64],
}

impl<'a> EncoderGrad<'a> {
    pub fn from_params(grad: &'a mut ParamVector, prefix: &str) -> Self {
        let [e, p, b, d] = EncoderParams::names(prefix);
        let [embedding, projection, bias, pad] = grad.get_many_mut([&e, &p, &b, &d]);
        Self { embedding, projection, bias, pad }
    }
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Hashed row per token.
    pub ids: Vec<usize>,
    /// `L × input_dim` window inputs.
    pub inputs: Matrix,
    /// `L × dim` outputs.
    pub outputs: Matrix,
}

impl<'a> EncoderView<'a> {
    pub fn from_params(params: &'a ParamVector, prefix: &str, config: EncoderConfig) -> Result<Self, NeuralError> {
        let [e, p, b, d] = EncoderParams::names(prefix);
        let get = |name: &str, len: usize| -> Result<&'a [f64], NeuralError> {
            let s = params.get(name).ok_or_else(|| NeuralError::ShapeMismatch(format!("missing {name}")))?;
            if s.len() != len {
                return Err(NeuralError::ShapeMismatch(format!("{name}: {} != {len}", s.len())));
            }
            Ok(s)
        };
        Ok(Self {
            config,
            embedding: get(&e, config.vocab_size * config.dim)?,
            projection: get(&p, config.input_dim() * config.dim)?,
            bias: get(&b, config.dim)?,
            pad: get(&d, config.dim)?,
        })
    }

    fn embedding_row(&self, id: usize) -> &'a [f64] {
        let d = self.config.dim;
        &self.embedding[id * d..(id + 1) * d]
    }

    pub fn forward<S: AsRef<str>>(&self, tokens: &[S]) -> EncoderTrace {
        let c = self.config;
        let (d, r, in_dim) = (c.dim, c.radius as isize, c.input_dim());
        let len = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|t| hash_token(t.as_ref(), c.vocab_size)).collect();
        let mut inputs = Matrix::zeros(len, in_dim);
        let mut outputs = Matrix::zeros(len, d);
        for i in 0..len {
            let x = inputs.row_mut(i);
            for (slot, off) in (-r..=r).enumerate() {
                let pos = i as isize + off;
                let src = if pos >= 0 && (pos as usize) < len { self.embedding_row(ids[pos as usize]) } else { self.pad };
                x[slot * d..(slot + 1) * d].copy_from_slice(src);
            }
            let h = outputs.row_mut(i);
            h.copy_from_slice(self.bias);
            let x = inputs.row(i);
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let prow = &self.projection[k * d..(k + 1) * d];
                for (hj, &pj) in h.iter_mut().zip(prow) {
                    *hj += xk * pj;
                }
            }
            h.iter_mut().for_each(|v| *v = v.tanh());
        }
        EncoderTrace { ids, inputs, outputs }
    }

    /// Accumulate parameter gradients given `d_out = ∂loss/∂H` (`L × dim`).
    pub fn backward(&self, trace: &EncoderTrace, d_out: &Matrix, grad: &mut EncoderGrad<'_>) {
        let c = self.config;
        let (d, r) = (c.dim, c.radius as isize);
        let len = trace.ids.len();
        let mut dz = vec![0.0; d];
        let mut dx = vec![0.0; c.input_dim()];
        for i in 0..len {
            let h = trace.outputs.row(i);
            let dh = d_out.row(i);
            let mut any = false;
            for j in 0..d {
                dz[j] = dh[j] * (1.0 - h[j] * h[j]);
                any |= dz[j] != 0.0;
            }
            if !any {
                continue;
            }
            for (gb, &z) in grad.bias.iter_mut().zip(&dz) {
                *gb += z;
            }
            let x = trace.inputs.row(i);
            for k in 0..c.input_dim() {
                let prow = &self.projection[k * d..(k + 1) * d];
                let grow = &mut grad.projection[k * d..(k + 1) * d];
                let xk = x[k];
                let mut acc = 0.0;
                for j in 0..d {
                    grow[j] += xk * dz[j];
                    acc += prow[j] * dz[j];
                }
                dx[k] = acc;
            }
            for (slot, off) in (-r..=r).enumerate() {
                let pos = i as isize + off;
                let target: &mut [f64] = if pos >= 0 && (pos as usize) < len {
                    let id = trace.ids[pos as usize];
                    &mut grad.embedding[id * d..(id + 1) * d]
                } else {
                    &mut *grad.pad
                };
                for (t, &g) in target.iter_mut().zip(&dx[slot * d..(slot + 1) * d]) {
                    *t += g;
                }
            }
        }
    }
}

/// Contextual representations, `L × dim`.
pub fn encode_tokens<S: AsRef<str>>(params: &EncoderParams, tokens: &[S]) -> Matrix {
    params.view().forward(tokens).outputs
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig { vocab_size: 64, dim: 8, radius: 1 }
    }

    #[test]
    fn zero_params_give_zero_rows() {
        let h = encode_tokens(&EncoderParams::zeros(small()), &["a", "b", "c"]);
        assert_eq!((h.rows, h.cols), (3, 8));
        assert!(h.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn outputs_in_tanh_range_and_deterministic() {
        let p = EncoderParams::random(small(), 3.0, &mut ChaCha8Rng::seed_from_u64(1));
        let h = encode_tokens(&p, &["x", "y", "z", "x"]);
        assert!(h.data.iter().all(|&x| x > -1.0 && x < 1.0));
        assert_eq!(h, encode_tokens(&p, &["x", "y", "z", "x"]));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(hash_token("paris", 16384), hash_token("paris", 16384));
        assert!(hash_token("paris", 16384) < 16384);
        // FNV-1a reference value for "a".
        assert_eq!(hash_token("a", u64::MAX as usize), 0xaf63dc4c8601ec8c_u64 as usize % (u64::MAX as usize));
    }
}
