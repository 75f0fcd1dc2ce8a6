//! Parameter-owning building blocks: linear maps, multi-head attention and
//! instance-norm affines. Weights live in a [`ParamSet`]; forward passes
//! read them through a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use vrpmoe_tensor::{Graph, ParamId, ParamSet, Tensor, Var};

use crate::error::Result;

/// Uniform(−1/√fan_in, 1/√fan_in) fill.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = ps.push(format!("{name}.w"), init_uniform(&[fan_in, fan_out], fan_in, rng));
        let b = bias.then(|| ps.push(format!("{name}.b"), init_uniform(&[fan_out], fan_in, rng)));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = g.param(b);
            y = g.add_bias(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let gamma = ps.push(format!("{name}.gamma"), Tensor::new(vec![d], vec![1.0; d]).expect("shape"));
        let beta = ps.push(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        Ok(g.instance_norm(x, gamma, beta)?)
    }
}

/// Multi-head attention with bias-free Q/K/V projections and a biased output
/// projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: Linear::new(ps, &format!("{name}.wq"), d, d, false, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), d, d, false, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), d, d, false, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), d, d, true, rng),
            heads,
        }
    }

    /// `[B, L, in] -> [B, H, L, out/H]` through `proj`.
    pub fn split(&self, g: &mut Graph, proj: Linear, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let y = proj.forward(g, x)?;
        let y = g.reshape(y, &[b, l, self.heads, proj.fan_out / self.heads])?;
        Ok(g.swap_mid(y)?)
    }

    /// Attention of pre-split queries over pre-split keys/values, merged and
    /// projected back to `[B, Lq, d]`. `mask` has one entry per
    /// `(batch, head, query, key)`.
    pub fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = g.shape(q).to_vec();
        let (b, h, lq, dh) = (s[0], s[1], s[2], s[3]);
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.masked_softmax(scores, mask)?;
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.swap_mid(ctx)?;
        let ctx = g.reshape(ctx, &[b, lq, h * dh])?;
        self.wo.forward(g, ctx)
    }

    /// Unmasked self-attention over `x[B, L, d]`.
    pub fn self_attention(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let q = self.split(g, self.wq, x)?;
        let k = self.split(g, self.wk, x)?;
        let v = self.split(g, self.wv, x)?;
        self.attend(g, q, k, v, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = init_uniform(&[16, 4], 16, &mut rng);
        assert!(t.data.iter().all(|x| x.abs() <= 0.25));
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let mha = Mha::new(&mut ps, "a", 4, 2, &mut rng);
        let rows: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let perm = [2usize, 0, 1];
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.extend_from_slice(&rows[p * 4..p * 4 + 4]);
        }
        let mut g = Graph::with_params(&ps).no_grad();
        let x = g.constant(Tensor::new(vec![1, 3, 4], rows).unwrap());
        let xp = g.constant(Tensor::new(vec![1, 3, 4], permuted).unwrap());
        let y = mha.self_attention(&mut g, x).unwrap();
        let yp = mha.self_attention(&mut g, xp).unwrap();
        let (y, yp) = (g.value(y).to_vec(), g.value(yp).to_vec());
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((yp[i * 4 + c] - y[p * 4 + c]).abs() < 1e-12);
            }
        }
    }
}
