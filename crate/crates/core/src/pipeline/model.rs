//! The full network: twin encoders, cost volume and POET, plus checkpoint
//! I/O that records enough architecture to rebuild the model.

use std::io::{Read, Write};

use crate::correlation::{compute_cost_volume, num_displacements, DEFAULT_RADIUS};
use crate::encoders::{check_divisible, encode_depth, encode_image, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::maprender::{DepthImage, RgbImage};
use crate::poet::{Aggregation, Poet, PoetConfig};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::{read_checkpoint, write_checkpoint, Bindings, ParamStore, Real, Tensor};

/// Name of the checkpoint record holding the architecture.
pub const META_RECORD: &str = "meta.arch";
const META_LEN: usize = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub poet: PoetConfig,
    /// Cost-volume search radius in cells.
    pub radius: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for NetworkConfig {
    /// Full-width network at the 128×192 desk-scale image size.
    fn default() -> Self {
        NetworkConfig {
            encoder: EncoderConfig::default(),
            poet: PoetConfig::default(),
            radius: DEFAULT_RADIUS,
            height: 128,
            width: 192,
        }
    }
}

impl NetworkConfig {
    /// Reduced widths that train in minutes on a single core.
    pub fn toy() -> Self {
        NetworkConfig {
            encoder: EncoderConfig {
                channels: [8, 16, 24, 32, 48, 64],
            },
            poet: PoetConfig {
                d_model: 64,
                lift_hidden: 32,
                layers: 6,
                heads: 4,
                ffn: 256,
                head_hidden: 64,
                aggregation: Aggregation::QueryMean,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_divisible(self.height, self.width)?;
        self.poet.validate()
    }

    fn to_meta(&self) -> Vec<f32> {
        let p = &self.poet;
        let mut v: Vec<usize> = self.encoder.channels.to_vec();
        v.extend([
            p.lift_hidden,
            p.d_model,
            p.heads,
            p.ffn,
            p.layers,
            p.head_hidden,
            self.radius,
            self.height,
            self.width,
            match p.aggregation {
                Aggregation::QueryMean => 0,
                Aggregation::PoseMean => 1,
            },
        ]);
        debug_assert_eq!(v.len(), 16);
        v.push(META_LEN);
        v.into_iter().map(|x| x as f32).collect()
    }

    fn from_meta(v: &[f32]) -> Result<Self> {
        let bad = || Error::format("checkpoint", "malformed architecture record");
        if v.len() != META_LEN || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(bad());
        }
        let u: Vec<usize> = v.iter().map(|x| *x as usize).collect();
        if u[16] != META_LEN {
            return Err(bad());
        }
        let config = NetworkConfig {
            encoder: EncoderConfig {
                channels: u[0..6].try_into().unwrap(),
            },
            poet: PoetConfig {
                lift_hidden: u[6],
                d_model: u[7],
                heads: u[8],
                ffn: u[9],
                layers: u[10],
                head_hidden: u[11],
                aggregation: match u[15] {
                    0 => Aggregation::QueryMean,
                    1 => Aggregation::PoseMean,
                    _ => return Err(bad()),
                },
            },
            radius: u[12],
            height: u[13],
            width: u[14],
        };
        config.validate()?;
        Ok(config)
    }
}

/// Image encoder, depth encoder and POET sharing one parameter store.
#[derive(Debug, Clone)]
pub struct PoetNetwork<T: Real = f32> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    img_enc: Encoder,
    lid_enc: Encoder,
    poet: Poet,
}

impl<T: Real> PoetNetwork<T> {
    /// Freshly initialized network; the same seed gives the same weights.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, 0x1417));
        let mut store = ParamStore::new();
        let img_enc = Encoder::new(&mut store, "img_enc", 3, &config.encoder, &mut rng)?;
        let lid_enc = Encoder::new(&mut store, "lid_enc", 1, &config.encoder, &mut rng)?;
        let poet = Poet::new(
            &mut store,
            &config.poet,
            num_displacements(config.radius),
            &mut rng,
        )?;
        Ok(PoetNetwork {
            config: config.clone(),
            store,
            img_enc,
            lid_enc,
            poet,
        })
    }

    pub fn poet(&self) -> &Poet {
        &self.poet
    }

    pub fn sample_queries(&self, nq: usize, rng: &mut Rng) -> Result<Tensor<T>> {
        self.poet.sample_queries(nq, rng)
    }

    /// Cost volume between the encoded image and depth.
    pub fn cost_volume(
        &self,
        p: &Bindings<T>,
        image: &RgbImage,
        depth: &DepthImage,
    ) -> Result<Tensor<T>> {
        let (h, w) = (self.config.height, self.config.width);
        for (what, ih, iw) in [
            ("image", image.height, image.width),
            ("depth", depth.height, depth.width),
        ] {
            if (ih, iw) != (h, w) {
                return Err(Error::shape(
                    "network",
                    format!("{what} is {ih}x{iw} but the network was built for {h}x{w}"),
                ));
            }
        }
        let fi = encode_image(&self.img_enc, p, image)?;
        let fl = encode_depth(&self.lid_enc, p, depth)?;
        compute_cost_volume(&fi, &fl, self.config.radius)
    }

    /// Raw `[7]` predictions, one per decoder layer.
    pub fn forward(
        &self,
        p: &Bindings<T>,
        image: &RgbImage,
        depth: &DepthImage,
        queries: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let cv = self.cost_volume(p, image, depth)?;
        self.poet.forward_with_queries(p, &cv, queries)
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let mut store = self.store.clone();
        store.add(
            META_RECORD,
            vec![META_LEN],
            self.config
                .to_meta()
                .into_iter()
                .map(|v| T::lit(f64::from(v)))
                .collect(),
        )?;
        write_checkpoint(&store, out)
    }

    /// Rebuilds the architecture from the checkpoint and loads its weights.
    pub fn load<R: Read>(input: R) -> Result<Self> {
        let entries = read_checkpoint(input)?;
        let meta = entries
            .iter()
            .find(|e| e.name == META_RECORD)
            .ok_or_else(|| Error::format("checkpoint", "no architecture record"))?;
        let config = NetworkConfig::from_meta(&meta.value)?;
        let mut net = Self::new(&config, 0)?;
        net.store.load_values(&entries)?;
        let extra = entries.len() - 1 - net.store.len();
        if extra != 0 {
            return Err(Error::format(
                "checkpoint",
                format!("{extra} records do not belong to this architecture"),
            ));
        }
        Ok(net)
    }

    pub fn cast<U: Real>(&self) -> PoetNetwork<U> {
        PoetNetwork {
            config: self.config.clone(),
            store: self.store.cast(),
            img_enc: self.img_enc.clone(),
            lid_enc: self.lid_enc.clone(),
            poet: self.poet.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            encoder: EncoderConfig {
                channels: [2, 2, 3, 3, 4, 4],
            },
            poet: PoetConfig {
                d_model: 8,
                lift_hidden: 3,
                layers: 2,
                heads: 2,
                ffn: 8,
                head_hidden: 6,
                aggregation: Aggregation::QueryMean,
            },
            radius: 1,
            height: 64,
            width: 128,
        }
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_architecture() {
        let net = PoetNetwork::<f32>::new(&tiny(), 3).unwrap();
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        let back = PoetNetwork::<f32>::load(buf.as_slice()).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(back.store, net.store);
        let mut again = Vec::new();
        back.save(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn meta_round_trip() {
        for c in [NetworkConfig::default(), NetworkConfig::toy(), tiny()] {
            assert_eq!(NetworkConfig::from_meta(&c.to_meta()).unwrap(), c);
        }
        assert!(NetworkConfig::from_meta(&[1.0; 3]).is_err());
    }

    #[test]
    fn size_mismatch_rejected() {
        let net = PoetNetwork::<f32>::new(&tiny(), 1).unwrap();
        let p = net.store.bind(false);
        let q = net.sample_queries(1, &mut seeded(0)).unwrap();
        let err = net.forward(
            &p,
            &RgbImage::new(192, 128),
            &DepthImage::empty(192, 128),
            &q,
        );
        assert!(err.is_err());
        let preds = net
            .forward(&p, &RgbImage::new(128, 64), &DepthImage::empty(128, 64), &q)
            .unwrap();
        assert_eq!(preds.len(), 2);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = PoetNetwork::<f32>::new(&tiny(), 5).unwrap();
        let b = PoetNetwork::<f32>::new(&tiny(), 5).unwrap();
        let c = PoetNetwork::<f32>::new(&tiny(), 6).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }
}
