//! Bidirectional attention between the token sets of two frames.
//!
//! Both frames are projected with the same `W_Q`, `W_K`, `W_V`. Each frame
//! then attends to the other's keys and values, and the result is added to
//! its own self-attention output:
//!
//! ```text
//! Z_out_i = softmax(Q_i K_jᵀ / √d) V_j
//! Z_new_i = SelfAttn(Z_i) + Z_out_i
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// `tokens x dim` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != tokens * dim {
            return Err(Error::contract(format!(
                "token matrix {tokens}x{dim} needs {} values, got {}",
                tokens * dim,
                data.len()
            )));
        }
        Ok(Self { tokens, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Shared attention projections, each `d x d`, stored `out x in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub dim: usize,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_o: Vec<f64>,
}

impl AttentionWeights {
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut mat = || -> Vec<f64> {
            (0..dim * dim)
                .map(|_| {
                    let v: f32 = StandardNormal.sample(&mut rng);
                    (v * scale as f32) as f64
                })
                .collect()
        };
        Self {
            dim,
            w_q: mat(),
            w_k: mat(),
            w_v: mat(),
            w_o: mat(),
        }
    }

    pub fn project(&self, z: &TokenMatrix) -> Result<Qkv> {
        if z.dim != self.dim {
            return Err(Error::contract(format!(
                "token dimension {} does not match attention dimension {}",
                z.dim, self.dim
            )));
        }
        Ok(Qkv {
            tokens: z.tokens,
            dim: self.dim,
            q: linear(z, &self.w_q),
            k: linear(z, &self.w_k),
            v: linear(z, &self.w_v),
        })
    }

    /// Output projection `Z W_oᵀ`.
    pub fn output(&self, z: &[f64], tokens: usize) -> Vec<f64> {
        let m = TokenMatrix {
            tokens,
            dim: self.dim,
            data: z.to_vec(),
        };
        linear(&m, &self.w_o)
    }
}

/// Projected queries, keys and values of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub tokens: usize,
    pub dim: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

fn linear(z: &TokenMatrix, w: &[f64]) -> Vec<f64> {
    let d = z.dim;
    let mut out = vec![0.0; z.tokens * d];
    for t in 0..z.tokens {
        let row = z.row(t);
        for o in 0..d {
            let wr = &w[o * d..(o + 1) * d];
            out[t * d + o] = row.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// `softmax(Q Kᵀ / √d) V` for `nq` queries against `nk` keys.
pub fn attend(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    let mut scores = vec![0.0; nk];
    for i in 0..nq {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*s);
        }
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let row = &mut out[i * d..(i + 1) * d];
        for (j, s) in scores.iter().enumerate() {
            let w = s / total;
            let vj = &v[j * d..(j + 1) * d];
            for (o, x) in row.iter_mut().zip(vj) {
                *o += w * x;
            }
        }
    }
    out
}

/// Self-attention of `a` plus cross-attention from `a`'s queries to `b`'s
/// keys and values.
pub fn fused_attention(a: &Qkv, b: &Qkv) -> Vec<f64> {
    let d = a.dim;
    let mut own = attend(&a.q, &a.k, &a.v, a.tokens, a.tokens, d);
    let cross = attend(&a.q, &b.k, &b.v, a.tokens, b.tokens, d);
    for (o, c) in own.iter_mut().zip(&cross) {
        *o += c;
    }
    own
}

/// `Z_out` for both frames (cross terms only).
pub fn cross_outputs(
    zi: &TokenMatrix,
    zj: &TokenMatrix,
    weights: &AttentionWeights,
) -> Result<(TokenMatrix, TokenMatrix)> {
    let (a, b) = (weights.project(zi)?, weights.project(zj)?);
    let d = weights.dim;
    Ok((
        TokenMatrix::new(a.tokens, d, attend(&a.q, &b.k, &b.v, a.tokens, b.tokens, d))?,
        TokenMatrix::new(b.tokens, d, attend(&b.q, &a.k, &a.v, b.tokens, a.tokens, d))?,
    ))
}

/// `(Z_new_i, Z_new_j)` for a pair of token matrices.
pub fn bidir_attention(
    zi: &TokenMatrix,
    zj: &TokenMatrix,
    weights: &AttentionWeights,
) -> Result<(TokenMatrix, TokenMatrix)> {
    let a = weights.project(zi)?;
    let b = weights.project(zj)?;
    let d = weights.dim;
    Ok((
        TokenMatrix::new(a.tokens, d, fused_attention(&a, &b))?,
        TokenMatrix::new(b.tokens, d, fused_attention(&b, &a))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tokens(tokens: usize, dim: usize, seed: u64) -> TokenMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenMatrix::new(
            tokens,
            dim,
            (0..tokens * dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_token_returns_partner_value() {
        let w = AttentionWeights::seeded(8, 5);
        let zi = random_tokens(1, 8, 1);
        let zj = random_tokens(1, 8, 2);
        let (out_i, _) = cross_outputs(&zi, &zj, &w).unwrap();
        let vj = w.project(&zj).unwrap().v;
        assert_eq!(out_i.data, vj);
    }

    #[test]
    fn identical_inputs_double_self_attention() {
        let w = AttentionWeights::seeded(8, 9);
        let z = random_tokens(5, 8, 3);
        let (new_i, new_j) = bidir_attention(&z, &z, &w).unwrap();
        let p = w.project(&z).unwrap();
        let own = attend(&p.q, &p.k, &p.v, 5, 5, 8);
        assert_eq!(new_i, new_j);
        for (n, o) in new_i.data.iter().zip(&own) {
            assert_eq!(*n, 2.0 * o);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let w = AttentionWeights::seeded(8, 0);
        let zi = random_tokens(2, 8, 1);
        let zj = random_tokens(2, 4, 2);
        assert!(bidir_attention(&zi, &zj, &w).is_err());
    }
}
