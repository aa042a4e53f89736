//! Twin convolutional encoders that reduce the camera image and the
//! rendered depth image to feature maps at 1/64 resolution.

use crate::error::{Error, Result};
use crate::maprender::{DepthImage, RgbImage};
use crate::rng::Rng;
use crate::tensor::{conv_output_size, Bindings, ParamId, ParamStore, Real, Tensor};

pub const DEFAULT_CHANNELS: [usize; 6] = [16, 32, 64, 96, 128, 196];
pub const BLOCKS: usize = 6;
pub const CONVS_PER_BLOCK: usize = 3;
/// Total spatial reduction: one stride-2 convolution per block.
pub const DOWNSAMPLE: usize = 1 << BLOCKS;
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output channels of each of the six blocks.
    pub channels: [usize; BLOCKS],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: DEFAULT_CHANNELS,
        }
    }
}

impl EncoderConfig {
    pub fn out_channels(&self) -> usize {
        self.channels[BLOCKS - 1]
    }

    /// Scalars in one encoder with `in_channels` input channels.
    pub fn param_count(&self, in_channels: usize) -> usize {
        let mut cin = in_channels;
        let mut n = 0;
        for &c in &self.channels {
            for j in 0..CONVS_PER_BLOCK {
                let i = if j == 0 { cin } else { c };
                n += 9 * i * c + c;
            }
            cin = c;
        }
        n
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Six blocks of three 3×3 convolutions, each followed by LeakyReLU(0.1);
/// the first convolution of every block has stride 2.
#[derive(Debug, Clone)]
pub struct Encoder {
    in_channels: usize,
    out_channels: usize,
    layers: Vec<ConvLayer>,
}

impl Encoder {
    /// Registers parameters `"{prefix}.block{i}.conv{j}.{w|b}"` with
    /// fan-in scaled Gaussian kernels and zero biases.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        config: &EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_channels == 0 || config.channels.contains(&0) {
            return Err(Error::invalid("encoder channels must be positive"));
        }
        let gain = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
        let mut layers = Vec::with_capacity(BLOCKS * CONVS_PER_BLOCK);
        let mut cin = in_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            for j in 0..CONVS_PER_BLOCK {
                let std = (gain / (9 * cin) as f64).sqrt();
                let weight = store.normal(
                    format!("{prefix}.block{i}.conv{j}.w"),
                    vec![3, 3, cin, c],
                    std,
                    rng,
                )?;
                let bias = store.zeros(format!("{prefix}.block{i}.conv{j}.b"), vec![c])?;
                layers.push(ConvLayer {
                    weight,
                    bias,
                    stride: if j == 0 { 2 } else { 1 },
                });
                cin = c;
            }
        }
        Ok(Encoder {
            in_channels,
            out_channels: config.out_channels(),
            layers,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `[H, W, Cin]` to `[H/64, W/64, Cout]`.
    pub fn forward<T: Real>(&self, params: &Bindings<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = input.shape();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(Error::shape(
                "encoder",
                format!("expected [H, W, {}] input, got {shape:?}", self.in_channels),
            ));
        }
        check_divisible(shape[0], shape[1])?;
        let slope = T::lit(LEAKY_SLOPE);
        let mut x = input.clone();
        for l in &self.layers {
            x = x
                .conv2d(params.get(l.weight), l.stride, 1)?
                .add_bias(params.get(l.bias))?
                .leaky_relu(slope);
        }
        Ok(x)
    }
}

pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height == 0
        || width == 0
        || !height.is_multiple_of(DOWNSAMPLE)
        || !width.is_multiple_of(DOWNSAMPLE)
    {
        return Err(Error::invalid(format!(
            "image size {height}x{width} must be a positive multiple of {DOWNSAMPLE} in both dimensions"
        )));
    }
    Ok(())
}

/// Feature grid `(Hc, Wc)` for an input of the given size, derived by
/// running the convolution size rule through every layer.
pub fn feature_grid(height: usize, width: usize) -> Result<(usize, usize)> {
    check_divisible(height, width)?;
    let (mut h, mut w) = (height, width);
    for _ in 0..BLOCKS {
        for j in 0..CONVS_PER_BLOCK {
            let stride = if j == 0 { 2 } else { 1 };
            h = conv_output_size(h, 3, stride, 1).expect("divisible input");
            w = conv_output_size(w, 3, stride, 1).expect("divisible input");
        }
    }
    Ok((h, w))
}

/// RGB scaled to `[0, 1]`.
pub fn encode_image<T: Real>(
    enc: &Encoder,
    params: &Bindings<T>,
    image: &RgbImage,
) -> Result<Tensor<T>> {
    check_divisible(image.height, image.width)?;
    enc.forward(params, &image.to_tensor())
}

/// Depth in raw meters, zeros where the map has no return.
pub fn encode_depth<T: Real>(
    enc: &Encoder,
    params: &Bindings<T>,
    depth: &DepthImage,
) -> Result<Tensor<T>> {
    check_divisible(depth.height, depth.width)?;
    enc.forward(params, &depth.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::gradcheck::relative_error;

    fn build(in_channels: usize, config: &EncoderConfig) -> (ParamStore<f32>, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "img_enc", in_channels, config, &mut seeded(1)).unwrap();
        (store, enc)
    }

    #[test]
    fn output_shapes() {
        let (store, enc) = build(3, &EncoderConfig::default());
        let b = store.bind(false);
        let img = RgbImage::new(192, 128);
        assert_eq!(encode_image(&enc, &b, &img).unwrap().shape(), &[2, 3, 196]);
        let (store, lid) = build(1, &EncoderConfig::default());
        let depth = DepthImage::empty(192, 128);
        assert_eq!(
            encode_depth(&lid, &store.bind(false), &depth)
                .unwrap()
                .shape(),
            &[2, 3, 196]
        );
    }

    #[test]
    fn feature_grid_is_a_sixty_fourth() {
        assert_eq!(feature_grid(128, 192).unwrap(), (2, 3));
        assert_eq!(feature_grid(384, 1280).unwrap(), (6, 20));
        assert!(feature_grid(100, 128).is_err());
    }

    #[test]
    fn indivisible_size_rejected() {
        let (store, enc) = build(3, &EncoderConfig::default());
        let err = encode_image(&enc, &store.bind(false), &RgbImage::new(100, 128)).unwrap_err();
        assert!(err.to_string().contains("multiple of 64"));
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let (store, enc) = build(1, &EncoderConfig::default());
        let out = encode_depth(&enc, &store.bind(false), &DepthImage::empty(64, 128)).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn param_count_and_names() {
        let config = EncoderConfig::default();
        let (store, _) = build(3, &config);
        assert_eq!(store.num_scalars(), config.param_count(3));
        // first layer by hand: 3·3·3·16 + 16
        let first = store.find("img_enc.block0.conv0.w").unwrap();
        assert_eq!(store.entry(first).shape, vec![3, 3, 3, 16]);
        assert!(store.find("img_enc.block5.conv2.b").is_some());
        assert_eq!(config.param_count(3) - config.param_count(1), 9 * 2 * 16);
    }

    #[test]
    fn activations_stay_finite_and_scaled() {
        let (store, enc) = build(3, &EncoderConfig::default());
        let mut img = RgbImage::new(192, 128);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 37 % 251) as u8;
        }
        let out = encode_image(&enc, &store.bind(false), &img).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
        let rms = (out.data().iter().map(|v| v * v).sum::<f32>() / out.numel() as f32).sqrt();
        assert!(rms > 1e-3 && rms < 1e3, "rms {rms}");
    }

    #[test]
    fn first_kernel_gradient_matches_finite_differences() {
        let config = EncoderConfig::default();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "lid_enc", 1, &config, &mut seeded(4)).unwrap();
        let mut depth = DepthImage::empty(64, 64);
        for (i, v) in depth.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 97) as f32 / 10.0;
        }
        let input = depth.to_tensor::<f64>();
        let w0 = store.find("lid_enc.block0.conv0.w").unwrap();
        let weights: Vec<f64> = (0..196).map(|i| 0.5 + (i % 11) as f64 / 10.0).collect();
        let loss = |store: &ParamStore<f64>, track: bool| {
            let b = store.bind(track);
            let out = enc.forward(&b, &input).unwrap();
            let w = Tensor::new(out.shape().to_vec(), weights.clone()).unwrap();
            (out.mul(&w).unwrap().sum(), b)
        };
        let (l, b) = loss(&store, true);
        l.backward().unwrap();
        let analytic = b.take_gradients()[w0.index()].clone().unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..analytic.len()).step_by(7) {
            let orig = store.entry(w0).value[i];
            store.value_mut(w0)[i] = orig + h;
            let up = loss(&store, false).0.item();
            store.value_mut(w0)[i] = orig - h;
            let down = loss(&store, false).0.item();
            store.value_mut(w0)[i] = orig;
            worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * h)));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
