//! Scaled dot-product attention, multi-head attention and the decoder layer.

use super::Linear;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Bindings, ParamId, ParamStore, Real, Tensor};

/// `softmax(q·kᵀ / √d)·v` for `q: [Nq, d]`, `k: [Nk, d]`, `v: [Nk, dv]`.
/// Also returns the `[Nq, Nk]` weights.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape(
            "attention",
            format!("q {qs:?}, k {ks:?}, v {vs:?} do not form [Nq,d], [Nk,d], [Nk,dv]"),
        ));
    }
    let scale = T::lit(1.0 / (qs[1] as f64).sqrt());
    let weights = q.matmul_nt(k)?.scale(scale).softmax(1)?;
    Ok((weights.matmul(v)?, weights))
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "{heads} heads do not divide width {dim}"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{prefix}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{prefix}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{prefix}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// Queries `x: [Nq, D]` attend to `memory: [Nk, D]`; returns the
    /// `[Nq, D]` output and the per-head weights.
    pub fn forward<T: Real>(
        &self,
        p: &Bindings<T>,
        x: &Tensor<T>,
        memory: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let q = self.q.forward(p, x)?;
        let k = self.k.forward(p, memory)?;
        let v = self.v.forward(p, memory)?;
        let dh = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (o, w) = attention(
                &q.slice_last(s, e)?,
                &k.slice_last(s, e)?,
                &v.slice_last(s, e)?,
            )?;
            outs.push(o);
            weights.push(w);
        }
        Ok((self.out.forward(p, &Tensor::concat_last(&outs)?)?, weights))
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.add(format!("{prefix}.g"), vec![dim], vec![T::one(); dim])?,
            beta: store.zeros(format!("{prefix}.b"), vec![dim])?,
        })
    }

    fn forward<T: Real>(&self, p: &Bindings<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), T::lit(1e-5))
    }
}

/// Attention weights of one decoder pass, per head.
#[derive(Debug, Clone)]
pub struct LayerWeights<T: Real> {
    pub self_attn: Vec<Tensor<T>>,
    pub cross_attn: Vec<Tensor<T>>,
}

/// Post-norm decoder layer: self-attention among the queries,
/// cross-attention to the cost-volume tokens, then a ReLU feed-forward
/// block, each with a residual connection and layer normalization.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn_in: Linear,
    ffn_out: Linear,
    norms: [Norm; 3],
    dim: usize,
}

impl DecoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{prefix}.self"), dim, heads, rng)?,
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{prefix}.cross"),
                dim,
                heads,
                rng,
            )?,
            ffn_in: Linear::new(store, &format!("{prefix}.ffn1"), dim, ffn, rng)?,
            ffn_out: Linear::new(store, &format!("{prefix}.ffn2"), ffn, dim, rng)?,
            norms: [
                Norm::new(store, &format!("{prefix}.ln1"), dim)?,
                Norm::new(store, &format!("{prefix}.ln2"), dim)?,
                Norm::new(store, &format!("{prefix}.ln3"), dim)?,
            ],
            dim,
        })
    }

    pub fn forward<T: Real>(
        &self,
        p: &Bindings<T>,
        queries: &Tensor<T>,
        tokens: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_with_weights(p, queries, tokens)?.0)
    }

    pub fn forward_with_weights<T: Real>(
        &self,
        p: &Bindings<T>,
        queries: &Tensor<T>,
        tokens: &Tensor<T>,
    ) -> Result<(Tensor<T>, LayerWeights<T>)> {
        for (what, t) in [("queries", queries), ("tokens", tokens)] {
            if t.shape().len() != 2 || t.shape()[1] != self.dim {
                return Err(Error::shape(
                    "decoder",
                    format!("{what} must be [N, {}], got {:?}", self.dim, t.shape()),
                ));
            }
        }
        let (sa, self_w) = self.self_attn.forward(p, queries, queries)?;
        let x = self.norms[0].forward(p, &queries.add(&sa)?)?;
        let (ca, cross_w) = self.cross_attn.forward(p, &x, tokens)?;
        let x = self.norms[1].forward(p, &x.add(&ca)?)?;
        let hidden = self.ffn_in.forward(p, &x)?.leaky_relu(T::zero());
        let x = self.norms[2].forward(p, &x.add(&self.ffn_out.forward(p, &hidden)?)?)?;
        Ok((
            x,
            LayerWeights {
                self_attn: self_w,
                cross_attn: cross_w,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::gradcheck::{check_gradients, random_values};

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = t(&[1, 3], vec![0.3, -1.0, 2.0]);
        let v = t(&[1, 2], vec![5.0, -7.0]);
        let (o, w) = attention(&q, &q, &v).unwrap();
        assert_eq!(o.data(), &[5.0, -7.0]);
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn identical_values_pass_through() {
        let q = t(&[1, 2], vec![1.0, 0.0]);
        let k = t(&[2, 2], vec![3.0, 0.0, -3.0, 1.0]);
        let v = t(&[2, 2], vec![0.25, 4.0, 0.25, 4.0]);
        let (o, _) = attention(&q, &k, &v).unwrap();
        for (a, b) in o.data().iter().zip([0.25, 4.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_hand_rolled_softmax() {
        let (_, q) = random_values(&[1, 5], 1);
        let (_, k) = random_values(&[4, 5], 2);
        let (_, v) = random_values(&[4, 3], 3);
        let (o, _) = attention(
            &t(&[1, 5], q.clone()),
            &t(&[4, 5], k.clone()),
            &t(&[4, 3], v.clone()),
        )
        .unwrap();
        let scores: Vec<f64> = (0..4)
            .map(|j| (0..5).map(|i| q[i] * k[j * 5 + i]).sum::<f64>() / 5f64.sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for c in 0..3 {
            let expect: f64 = (0..4).map(|j| scores[j].exp() / z * v[j * 3 + c]).sum();
            assert!((o.data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_dims_rejected() {
        let q = t(&[1, 3], vec![0.0; 3]);
        let k = t(&[2, 4], vec![0.0; 8]);
        assert!(attention(&q, &k, &k).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 4, &mut seeded(0)).is_err());
    }

    fn layer(dim: usize, heads: usize) -> (ParamStore<f64>, DecoderLayer) {
        let mut store = ParamStore::new();
        let l = DecoderLayer::new(&mut store, "dec", dim, heads, 2 * dim, &mut seeded(5)).unwrap();
        (store, l)
    }

    #[test]
    fn output_shape_follows_queries() {
        let (store, l) = layer(16, 4);
        let p = store.bind(false);
        let (_, tok) = random_values(&[6, 16], 1);
        for nq in [1, 5, 15] {
            let (_, q) = random_values(&[nq, 16], nq as u64);
            let (out, w) = l
                .forward_with_weights(&p, &t(&[nq, 16], q), &t(&[6, 16], tok.clone()))
                .unwrap();
            assert_eq!(out.shape(), &[nq, 16]);
            for m in w.self_attn.iter().chain(&w.cross_attn) {
                let cols = m.shape()[1];
                for row in m.data().chunks(cols) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
        assert!(l
            .forward(&p, &t(&[1, 8], vec![0.0; 8]), &t(&[6, 16], tok))
            .is_err());
    }

    #[test]
    fn single_query_self_attention_is_value_projection() {
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "sa", 8, 2, &mut seeded(3)).unwrap();
        let p = store.bind(false);
        let (_, q) = random_values(&[1, 8], 9);
        let q = t(&[1, 8], q);
        let (o, w) = mha.forward(&p, &q, &q).unwrap();
        assert!(w.iter().all(|m| m.data() == [1.0]));
        let direct = mha
            .out
            .forward(&p, &mha.v.forward(&p, &q).unwrap())
            .unwrap();
        for (a, b) in o.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_wrt_queries_matches_finite_differences() {
        let (store, l) = layer(8, 2);
        let (_, tok) = random_values(&[6, 8], 4);
        let tokens = t(&[6, 8], tok);
        let inputs = vec![random_values(&[3, 8], 11)];
        let r = check_gradients(&inputs, |x| {
            let p = store.bind(false);
            l.forward(&p, &x[0], &tokens)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
