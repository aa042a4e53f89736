//! The pose estimator transformer: lifts the cost volume into tokens, lets a
//! stack of decoder layers refine implicit pose queries against them, and
//! decodes the queries after every layer into a relative 7D pose.

mod attention;

use rand_distr::{Distribution, StandardNormal};

pub use attention::{attention, DecoderLayer, LayerWeights, MultiHeadAttention};

use crate::error::{Error, Result};
use crate::geometry::{quaternion, Pose7D};
use crate::rng::Rng;
use crate::tensor::{Bindings, ParamId, ParamStore, Real, Tensor};

pub const HEAD_SLOPE: f64 = 0.1;
/// Output bias of every pose head: zero translation, identity rotation.
pub const IDENTITY_BIAS: [f64; 7] = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

/// Affine layer `x·W + b` with `W: [Din, Dout]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Gaussian weights with standard deviation `1/√Din`, zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        din: usize,
        dout: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::with_std(store, prefix, din, dout, 1.0 / (din as f64).sqrt(), rng)
    }

    pub fn with_std<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        din: usize,
        dout: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.normal(format!("{prefix}.w"), vec![din, dout], std, rng)?,
            bias: store.zeros(format!("{prefix}.b"), vec![dout])?,
        })
    }

    pub fn forward<T: Real>(&self, p: &Bindings<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(p.get(self.weight), p.get(self.bias))
    }
}

/// Sinusoidal 2D embedding, `[hc, wc, dim]`. Channel `4k` and `4k+1` carry
/// `sin`/`cos` of `ω_k·x` (column), `4k+2` and `4k+3` those of `ω_k·y`
/// (row), with `ω_k = 10000^(-2k/dim)`.
pub fn positional_embedding<T: Real>(hc: usize, wc: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "embedding width {dim} must be a positive multiple of 4"
        )));
    }
    let mut data = Vec::with_capacity(hc * wc * dim);
    for y in 0..hc {
        for x in 0..wc {
            for i in 0..dim {
                let k = i / 4;
                let omega = 1.0 / 10000f64.powf(2.0 * k as f64 / dim as f64);
                let v = match i % 4 {
                    0 => (omega * x as f64).sin(),
                    1 => (omega * x as f64).cos(),
                    2 => (omega * y as f64).sin(),
                    _ => (omega * y as f64).cos(),
                };
                data.push(T::lit(v));
            }
        }
    }
    Tensor::new(vec![hc, wc, dim], data)
}

/// How multiple pose queries are combined at each head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Average the queries, then decode once.
    #[default]
    QueryMean,
    /// Decode every query, then average the raw 7D outputs.
    PoseMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoetConfig {
    /// Width of tokens and queries.
    pub d_model: usize,
    /// Output channels of the first lifting convolution.
    pub lift_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub head_hidden: usize,
    pub aggregation: Aggregation,
}

impl Default for PoetConfig {
    fn default() -> Self {
        PoetConfig {
            d_model: 256,
            lift_hidden: 128,
            layers: 6,
            heads: 8,
            ffn: 1024,
            head_hidden: 256,
            aggregation: Aggregation::QueryMean,
        }
    }
}

impl PoetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.lift_hidden == 0 || self.ffn == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("decoder sizes must be positive"));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "d_model {} must be a multiple of 4",
                self.d_model
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// Two densely connected 3×3 convolutions: the second sees the cost volume
/// concatenated with the first one's activations.
#[derive(Debug, Clone)]
struct Lift {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Expected RMS of a freshly initialised cost volume, roughly. Correlating
/// two unrelated feature maps and dividing by the channel count leaves
/// values of a few thousandths, so fan-in initialisation alone would make
/// the lifted tokens vanish next to the positional embedding. Weights that
/// read the cost volume directly are scaled up by its inverse.
pub const COST_VOLUME_RMS: f64 = 1.0 / 300.0;

impl Lift {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        cin: usize,
        hidden: usize,
        dout: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let gain = 2.0 / (1.0 + HEAD_SLOPE * HEAD_SLOPE);
        let c2 = cin + hidden;
        let w1 = store.normal(
            "poet.lift.conv0.w",
            vec![3, 3, cin, hidden],
            (gain / (9 * cin) as f64).sqrt() / COST_VOLUME_RMS,
            rng,
        )?;
        let w2 = store.normal(
            "poet.lift.conv1.w",
            vec![3, 3, c2, dout],
            (1.0 / (9 * c2) as f64).sqrt(),
            rng,
        )?;
        // kernel layout is [kh, kw, cin, cout]; rows below `cin` see the cost volume
        for (i, v) in store.value_mut(w2).iter_mut().enumerate() {
            if (i / dout) % c2 < cin {
                *v *= T::lit(1.0 / COST_VOLUME_RMS);
            }
        }
        Ok(Lift {
            w1,
            b1: store.zeros("poet.lift.conv0.b", vec![hidden])?,
            w2,
            b2: store.zeros("poet.lift.conv1.b", vec![dout])?,
        })
    }

    fn forward<T: Real>(&self, p: &Bindings<T>, cv: &Tensor<T>) -> Result<Tensor<T>> {
        lift_with(cv, [self.w1, self.b1, self.w2, self.b2].map(|id| p.get(id)))
    }
}

fn lift_with<T: Real>(cv: &Tensor<T>, [w1, b1, w2, b2]: [&Tensor<T>; 4]) -> Result<Tensor<T>> {
    let l1 = cv
        .conv2d(w1, 1, 1)?
        .add_bias(b1)?
        .leaky_relu(T::lit(HEAD_SLOPE));
    Tensor::concat_last(&[cv.clone(), l1])?
        .conv2d(w2, 1, 1)?
        .add_bias(b2)
}

/// Two affine layers with LeakyReLU between, `D' -> 7`.
#[derive(Debug, Clone)]
pub struct PoseHead {
    hidden: Linear,
    out: Linear,
}

impl PoseHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let first = Linear::new(store, &format!("{prefix}.fc0"), dim, hidden, rng)?;
        let out = Linear::with_std(store, &format!("{prefix}.fc1"), hidden, 7, 1e-3, rng)?;
        let bias = store.value_mut(out.bias);
        for (b, v) in bias.iter_mut().zip(IDENTITY_BIAS) {
            *b = T::lit(v);
        }
        Ok(PoseHead { hidden: first, out })
    }

    /// `[N, D']` to raw `[N, 7]` outputs (translation, unnormalized quaternion).
    pub fn forward<T: Real>(&self, p: &Bindings<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.hidden.forward(p, x)?.leaky_relu(T::lit(HEAD_SLOPE));
        self.out.forward(p, &h)
    }
}

/// Raw 7-vector to a pose; the quaternion part is normalized. A zero or
/// non-finite quaternion falls back to the identity rotation and the flag is
/// set.
pub fn decode_pose(raw: &[f64]) -> (Pose7D, bool) {
    let t = [raw[0], raw[1], raw[2]];
    let q = [raw[3], raw[4], raw[5], raw[6]];
    match quaternion::normalize(&q) {
        Some(q) if t.iter().all(|v| v.is_finite()) => (
            Pose7D {
                t,
                q: quaternion::canonical(&q),
            },
            false,
        ),
        Some(_) => (Pose7D::IDENTITY, true),
        None => (
            Pose7D {
                t: t.map(|v| if v.is_finite() { v } else { 0.0 }),
                q: quaternion::IDENTITY,
            },
            true,
        ),
    }
}

#[derive(Debug, Clone)]
pub struct Poet {
    config: PoetConfig,
    cost_channels: usize,
    lift: Lift,
    layers: Vec<DecoderLayer>,
    heads: Vec<PoseHead>,
}

impl Poet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &PoetConfig,
        cost_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let lift = Lift::new(store, cost_channels, config.lift_hidden, d, rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        let mut heads = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            layers.push(DecoderLayer::new(
                store,
                &format!("poet.dec{k}"),
                d,
                config.heads,
                config.ffn,
                rng,
            )?);
        }
        for k in 0..config.layers {
            heads.push(PoseHead::new(
                store,
                &format!("poet.head{k}"),
                d,
                config.head_hidden,
                rng,
            )?);
        }
        Ok(Poet {
            config: config.clone(),
            cost_channels,
            lift,
            layers,
            heads,
        })
    }

    pub fn config(&self) -> &PoetConfig {
        &self.config
    }

    /// Lifted cost volume plus positional embedding as `[Hc·Wc, D']`
    /// tokens in row-major cell order.
    pub fn lift_and_flatten<T: Real>(&self, p: &Bindings<T>, cv: &Tensor<T>) -> Result<Tensor<T>> {
        let s = cv.shape();
        if s.len() != 3 || s[2] != self.cost_channels {
            return Err(Error::shape(
                "poet",
                format!(
                    "expected [Hc, Wc, {}] cost volume, got {s:?}",
                    self.cost_channels
                ),
            ));
        }
        let (hc, wc) = (s[0], s[1]);
        let d = self.config.d_model;
        let lifted = self.lift.forward(p, cv)?;
        lifted
            .add(&positional_embedding(hc, wc, d)?)?
            .reshape(vec![hc * wc, d])
    }

    /// `nq` initial queries drawn from `N(0, 1/D')`.
    pub fn sample_queries<T: Real>(&self, nq: usize, rng: &mut Rng) -> Result<Tensor<T>> {
        if nq == 0 {
            return Err(Error::invalid("at least one pose query is required"));
        }
        let d = self.config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let data = (0..nq * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::new(vec![nq, d], data)
    }

    /// One raw `[7]` prediction per decoder layer, first to last.
    pub fn forward<T: Real>(
        &self,
        p: &Bindings<T>,
        cv: &Tensor<T>,
        nq: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Tensor<T>>> {
        let queries = self.sample_queries(nq, rng)?;
        self.forward_with_queries(p, cv, &queries)
    }

    pub fn forward_with_queries<T: Real>(
        &self,
        p: &Bindings<T>,
        cv: &Tensor<T>,
        queries: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let d = self.config.d_model;
        if queries.shape().len() != 2 || queries.shape()[1] != d || queries.shape()[0] == 0 {
            return Err(Error::shape(
                "poet",
                format!("queries must be [Nq >= 1, {d}], got {:?}", queries.shape()),
            ));
        }
        let tokens = self.lift_and_flatten(p, cv)?;
        let mut q = queries.clone();
        let mut preds = Vec::with_capacity(self.layers.len());
        for (layer, head) in self.layers.iter().zip(&self.heads) {
            q = layer.forward(p, &q, &tokens)?;
            let raw = match self.config.aggregation {
                Aggregation::QueryMean => head.forward(p, &q.mean_rows()?)?,
                Aggregation::PoseMean => head.forward(p, &q)?.mean_rows()?,
            };
            preds.push(raw.reshape(vec![7])?);
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::gradcheck::{check_gradients_with, random_values};

    fn small_config() -> PoetConfig {
        PoetConfig {
            d_model: 16,
            lift_hidden: 6,
            layers: 3,
            heads: 4,
            ffn: 32,
            head_hidden: 12,
            aggregation: Aggregation::QueryMean,
        }
    }

    fn small_model(config: &PoetConfig) -> (ParamStore<f64>, Poet) {
        let mut store = ParamStore::new();
        let m = Poet::new(&mut store, config, 9, &mut seeded(2)).unwrap();
        (store, m)
    }

    fn cv(seed: u64) -> Tensor<f64> {
        let (s, v) = random_values(&[2, 3, 9], seed);
        Tensor::new(s, v).unwrap()
    }

    #[test]
    fn embedding_examples() {
        let pe = positional_embedding::<f64>(2, 3, 8).unwrap();
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        // (x, y) = (1, 0): channel 0 is sin(ω₀·1) with ω₀ = 1
        assert!((pe.data()[8] - 1f64.sin()).abs() < 1e-15);
        for cell in pe.data().chunks(8) {
            for k in 0..2 {
                assert!((cell[4 * k].powi(2) + cell[4 * k + 1].powi(2) - 1.0).abs() < 1e-12);
                assert!((cell[4 * k + 2].powi(2) + cell[4 * k + 3].powi(2) - 1.0).abs() < 1e-12);
            }
        }
        // second frequency: ω₁ = 10000^(-2/8) = 0.1 at row y = 1
        let pe = positional_embedding::<f64>(2, 1, 8).unwrap();
        assert!((pe.data()[8 + 6] - 0.1f64.sin()).abs() < 1e-15);
        assert!(positional_embedding::<f64>(2, 3, 6).is_err());
    }

    #[test]
    fn tokens_are_pure_embedding_for_zero_input() {
        let (mut store, m) = small_model(&small_config());
        for name in ["poet.lift.conv0.b", "poet.lift.conv1.b"] {
            assert!(store
                .entry(store.find(name).unwrap())
                .value
                .iter()
                .all(|v| *v == 0.0));
        }
        let w = store.find("poet.lift.conv1.w").unwrap();
        store.value_mut(w)[0] = 0.7;
        let zero = Tensor::<f64>::zeros(vec![2, 3, 9]).unwrap();
        let tokens = m.lift_and_flatten(&store.bind(false), &zero).unwrap();
        assert_eq!(tokens.shape(), &[6, 16]);
        let pe = positional_embedding::<f64>(2, 3, 16).unwrap();
        assert_eq!(tokens.data(), pe.data());
    }

    #[test]
    fn lifting_gradient_matches_finite_differences() {
        let inputs = vec![
            random_values(&[3, 3, 9, 6], 1),
            random_values(&[6], 2),
            random_values(&[3, 3, 15, 16], 3),
            random_values(&[16], 4),
            random_values(&[2, 3, 9], 5),
        ];
        let r = check_gradients_with(&inputs, 1e-5, Some(80), |x| {
            lift_with(&x[4], [&x[0], &x[1], &x[2], &x[3]])
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn head_examples() {
        let mut store = ParamStore::<f64>::new();
        let head = PoseHead::new(&mut store, "h", 8, 4, &mut seeded(0)).unwrap();
        let w = head.out.weight;
        store.value_mut(w).iter_mut().for_each(|v| *v = 0.0);
        let (_, x) = random_values(&[1, 8], 1);
        let raw = head
            .forward(&store.bind(false), &Tensor::new(vec![1, 8], x).unwrap())
            .unwrap();
        let (pose, degenerate) = decode_pose(&raw.to_f64_vec());
        assert_eq!(pose, Pose7D::IDENTITY);
        assert!(!degenerate);
        let (p, flag) = decode_pose(&[0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.q, [1.0, 0.0, 0.0, 0.0]);
        assert!(!flag);
        let (p, flag) = decode_pose(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            (p.t, p.q, flag),
            ([1.0, 2.0, 3.0], quaternion::IDENTITY, true)
        );
    }

    #[test]
    fn head_gradient_through_quaternion_distance() {
        use crate::geometry::quaternion_distance_tensor;
        let mut store = ParamStore::<f64>::new();
        let head = PoseHead::new(&mut store, "h", 6, 5, &mut seeded(9)).unwrap();
        let (w0, w1) = (head.hidden.weight, head.out.weight);
        // larger output weights so the rotation part is far from identity
        store.value_mut(w1).iter_mut().for_each(|v| *v *= 300.0);
        let (_, x) = random_values(&[1, 6], 3);
        let x = Tensor::new(vec![1, 6], x).unwrap();
        let target = Tensor::new(vec![4], vec![0.9, 0.1, -0.3, 0.2]).unwrap();
        let inputs = vec![
            (store.entry(w0).shape.clone(), store.entry(w0).value.clone()),
            (store.entry(w1).shape.clone(), store.entry(w1).value.clone()),
        ];
        let (b0, b1) = (head.hidden.bias, head.out.bias);
        let biases = (store.entry(b0).value.clone(), store.entry(b1).value.clone());
        let r = check_gradients_with(&inputs, 1e-6, None, |w| {
            let h = x
                .linear(&w[0], &Tensor::new(vec![5], biases.0.clone())?)?
                .leaky_relu(HEAD_SLOPE);
            let raw = h
                .linear(&w[1], &Tensor::new(vec![7], biases.1.clone())?)?
                .reshape(vec![7])?;
            quaternion_distance_tensor(&target, &raw.slice_last(3, 7)?)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn one_prediction_per_layer_with_unit_quaternions() {
        let (store, m) = small_model(&small_config());
        let p = store.bind(false);
        let preds = m.forward(&p, &cv(1), 5, &mut seeded(3)).unwrap();
        assert_eq!(preds.len(), 3);
        for raw in preds {
            assert_eq!(raw.shape(), &[7]);
            let (pose, flag) = decode_pose(&raw.to_f64_vec());
            assert!(!flag);
            assert!((quaternion::norm(&pose.q) - 1.0).abs() < 1e-6);
        }
        assert!(m.forward(&p, &cv(1), 0, &mut seeded(3)).is_err());
    }

    #[test]
    fn identical_queries_match_single_query() {
        for aggregation in [Aggregation::QueryMean, Aggregation::PoseMean] {
            let (store, m) = small_model(&PoetConfig {
                aggregation,
                ..small_config()
            });
            let p = store.bind(false);
            let one = m.sample_queries::<f64>(1, &mut seeded(4)).unwrap();
            let many = Tensor::new(vec![15, 16], one.data().repeat(15)).unwrap();
            let a = m.forward_with_queries(&p, &cv(2), &one).unwrap();
            let b = m.forward_with_queries(&p, &cv(2), &many).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (u, v) in x.data().iter().zip(y.data()) {
                    assert!((u - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn query_order_does_not_matter() {
        let (store, m) = small_model(&small_config());
        let p = store.bind(false);
        let q = m.sample_queries::<f64>(5, &mut seeded(6)).unwrap();
        let rows: Vec<&[f64]> = q.data().chunks(16).collect();
        let perm = [3, 0, 4, 2, 1];
        let shuffled: Vec<f64> = perm.iter().flat_map(|&i| rows[i].to_vec()).collect();
        let q2 = Tensor::new(vec![5, 16], shuffled).unwrap();
        let a = m.forward_with_queries(&p, &cv(3), &q).unwrap();
        let b = m.forward_with_queries(&p, &cv(3), &q2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn more_queries_less_spread() {
        let (store, m) = small_model(&small_config());
        let p = store.bind(false);
        let spread = |nq: usize| {
            let xs: Vec<f64> = (0..20)
                .map(|s| {
                    let q = m.sample_queries::<f64>(nq, &mut seeded(100 + s)).unwrap();
                    let out = m.forward_with_queries(&p, &cv(4), &q).unwrap();
                    out.last().unwrap().data()[0]
                })
                .collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt()
        };
        let (one, many) = (spread(1), spread(15));
        assert!(one > 0.0 && many < one, "{one} vs {many}");
    }

    #[test]
    fn parameter_names_and_counts() {
        let (store, _) = small_model(&small_config());
        for name in [
            "poet.lift.conv1.w",
            "poet.dec2.cross.q.w",
            "poet.dec0.ln3.g",
            "poet.head2.fc1.b",
        ] {
            assert!(store.find(name).is_some(), "{name}");
        }
        assert!(store.find("poet.dec3.self.q.w").is_none());
        let bias = store.entry(store.find("poet.head1.fc1.b").unwrap());
        assert_eq!(bias.value, IDENTITY_BIAS.to_vec());
    }

    #[test]
    fn full_size_config_is_valid() {
        let config = PoetConfig::default();
        config.validate().unwrap();
        assert_eq!(
            (config.d_model, config.layers, config.heads, config.ffn),
            (256, 6, 8, 1024)
        );
        assert!(PoetConfig { heads: 7, ..config }.validate().is_err());
    }
}
