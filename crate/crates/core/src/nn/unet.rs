use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::ops::{dropout_mask, Activation, RunningStats};
use crate::nn::{Mode, Real, Tensor};

/// Shape and regularization hyperparameters of the U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub depth: usize,
    /// Output width of each encoder layer, outermost first.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    /// Number of leading decoder layers that apply dropout.
    pub dropout_decoder_layers: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::new(vec![16, 32, 64, 128, 256, 512], 2, 0)
    }
}

impl UNetConfig {
    /// A config with one encoder layer per entry of `channels` and the
    /// remaining fields at their defaults.
    pub fn new(channels: Vec<usize>, io_channels: usize, seed: u64) -> Self {
        let depth = channels.len();
        Self {
            depth,
            channels,
            kernel: 5,
            stride: 2,
            leaky_slope: 0.2,
            dropout_rate: 0.5,
            dropout_decoder_layers: depth.saturating_sub(1).min(5),
            in_channels: io_channels,
            out_channels: io_channels,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::param("U-Net depth must be at least 1"));
        }
        if self.channels.len() != self.depth {
            return Err(Error::param(format!(
                "{} channel widths given for depth {}",
                self.channels.len(),
                self.depth
            )));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::param("channel counts must be positive"));
        }
        if self.out_channels != self.in_channels {
            return Err(Error::param(format!(
                "out_channels {} must equal in_channels {}",
                self.out_channels, self.in_channels
            )));
        }
        if self.kernel % 2 == 0 || self.stride == 0 {
            return Err(Error::param("kernel must be odd and stride positive"));
        }
        if self.dropout_decoder_layers >= self.depth {
            return Err(Error::param(format!(
                "dropout in {} decoder layers leaves no undropped output layer at depth {}",
                self.dropout_decoder_layers, self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param("dropout rate must be in [0, 1)"));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::param("leaky slope must be finite"));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        self.stride.pow(self.depth as u32)
    }

    /// `(in_channels, out_channels)` of every encoder then decoder layer.
    fn layer_channels(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let d = self.depth;
        let enc = (0..d)
            .map(|i| {
                let cin = if i == 0 {
                    self.in_channels
                } else {
                    self.channels[i - 1]
                };
                (cin, self.channels[i])
            })
            .collect();
        let dec = (0..d)
            .map(|j| {
                let cin = if j == 0 {
                    self.channels[d - 1]
                } else {
                    2 * self.channels[d - 1 - j]
                };
                let cout = if j + 1 < d {
                    self.channels[d - 2 - j]
                } else {
                    self.out_channels
                };
                (cin, cout)
            })
            .collect();
        (enc, dec)
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let (enc, dec) = self.layer_channels();
        let enc_total: usize = enc
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| cin * cout * k2 + cout + if i > 0 { 2 * cout } else { 0 })
            .sum();
        let dec_total: usize = dec
            .iter()
            .enumerate()
            .map(|(j, &(cin, cout))| {
                cin * cout * k2 + cout + if j + 1 < self.depth { 2 * cout } else { 0 }
            })
            .sum();
        enc_total + dec_total
    }

    pub fn to_lines(&self) -> Vec<(String, String)> {
        let channels = self
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("depth".into(), self.depth.to_string()),
            ("channels".into(), channels),
            ("kernel".into(), self.kernel.to_string()),
            ("stride".into(), self.stride.to_string()),
            ("leaky_slope".into(), format!("{:?}", self.leaky_slope)),
            ("dropout_rate".into(), format!("{:?}", self.dropout_rate)),
            (
                "dropout_decoder_layers".into(),
                self.dropout_decoder_layers.to_string(),
            ),
            ("in_channels".into(), self.in_channels.to_string()),
            ("out_channels".into(), self.out_channels.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_lines(lines: &[(String, String)]) -> Result<Self> {
        fn get<'a>(lines: &'a [(String, String)], key: &str) -> Result<&'a str> {
            lines
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format(format!("config is missing '{key}'")))
        }
        fn num<N: std::str::FromStr>(lines: &[(String, String)], key: &str) -> Result<N> {
            let v = get(lines, key)?;
            v.parse()
                .map_err(|_| Error::format(format!("bad value '{v}' for '{key}'")))
        }
        let channels = get(lines, "channels")?
            .split(',')
            .map(|c| {
                c.trim()
                    .parse()
                    .map_err(|_| Error::format(format!("bad channel width '{c}'")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let config = Self {
            depth: num(lines, "depth")?,
            channels,
            kernel: num(lines, "kernel")?,
            stride: num(lines, "stride")?,
            leaky_slope: num(lines, "leaky_slope")?,
            dropout_rate: num(lines, "dropout_rate")?,
            dropout_decoder_layers: num(lines, "dropout_decoder_layers")?,
            in_channels: num(lines, "in_channels")?,
            out_channels: num(lines, "out_channels")?,
            seed: num(lines, "seed")?,
        };
        config
            .validate()
            .map_err(|e| Error::format(format!("invalid model config: {e}")))?;
        Ok(config)
    }
}

#[derive(Debug, Clone)]
struct Norm<T> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    stats: RunningStats<T>,
}

#[derive(Debug, Clone)]
struct Layer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    norm: Option<Norm<T>>,
}

/// Convolutional encoder-decoder with channel-concatenation skips.
///
/// Encoder layer: strided conv, batch norm (all but the first), leaky ReLU.
/// Decoder layer: strided transposed conv, batch norm (all but the last),
/// dropout (first `dropout_decoder_layers`), ReLU (all but the last). The
/// last layer's output is returned raw.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: UNetConfig,
    encoder: Vec<Layer<T>>,
    decoder: Vec<Layer<T>>,
}

/// Result of [`UNet::forward`]: the output node and one node per parameter,
/// in [`UNet::parameters`] order.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Var,
    pub params: Vec<Var>,
}

impl<T: Real> UNet<T> {
    /// Seeded initialization: weights and biases uniform in
    /// `+-1/sqrt(fan_in)`, batch-norm scale 1 and shift 0.
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.kernel;
        let (enc, dec) = config.layer_channels();
        let mut init = |shape: [usize; 4], fan_in: usize, cout: usize, norm: bool| {
            let bound = 1.0 / ((fan_in * k * k) as f64).sqrt();
            let weight = Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-bound..bound)));
            let bias = Tensor::from_fn(&[cout], |_| T::lit(rng.gen_range(-bound..bound)));
            Layer {
                weight,
                bias,
                norm: norm.then(|| Norm {
                    gamma: Tensor::full(&[cout], T::one()),
                    beta: Tensor::zeros(&[cout]),
                    stats: RunningStats::new(cout),
                }),
            }
        };
        let encoder = enc
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| init([cout, cin, k, k], cin, cout, i > 0))
            .collect();
        let decoder = dec
            .iter()
            .enumerate()
            .map(|(j, &(cin, cout))| init([cin, cout, k, k], cin, cout, j + 1 < config.depth))
            .collect();
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Layer<T>)> {
        let enc = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("enc{i}"), l));
        let dec = self
            .decoder
            .iter()
            .enumerate()
            .map(|(j, l)| (format!("dec{j}"), l));
        enc.chain(dec)
    }

    /// Trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.bias"), &layer.bias));
            if let Some(norm) = &layer.norm {
                out.push((format!("{name}.bn.gamma"), &norm.gamma));
                out.push((format!("{name}.bn.beta"), &norm.beta));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(norm) = layer.norm.as_mut() {
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
            }
        }
        out
    }

    /// Every persistent tensor (parameters plus running statistics), named.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push((format!("{name}.weight"), layer.weight.clone()));
            out.push((format!("{name}.bias"), layer.bias.clone()));
            if let Some(norm) = &layer.norm {
                let c = norm.gamma.numel();
                out.push((format!("{name}.bn.gamma"), norm.gamma.clone()));
                out.push((format!("{name}.bn.beta"), norm.beta.clone()));
                out.push((
                    format!("{name}.bn.running_mean"),
                    Tensor::new(vec![c], norm.stats.mean.clone()).expect("channel count"),
                ));
                out.push((
                    format!("{name}.bn.running_var"),
                    Tensor::new(vec![c], norm.stats.var.clone()).expect("channel count"),
                ));
            }
        }
        out
    }

    /// Replaces every persistent tensor from `state`, which must list
    /// exactly the names and shapes [`UNet::state`] produces.
    pub fn load_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        let expected = self.state();
        if expected.len() != state.len() {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, model config needs {}",
                state.len(),
                expected.len()
            )));
        }
        for ((name, want), (got_name, got)) in expected.iter().zip(state) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::format(format!(
                    "tensor '{got_name}' {:?} does not match model tensor '{name}' {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        let mut it = state.iter().map(|(_, t)| t);
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            layer.weight = it.next().expect("length checked").clone();
            layer.bias = it.next().expect("length checked").clone();
            if let Some(norm) = layer.norm.as_mut() {
                norm.gamma = it.next().expect("length checked").clone();
                norm.beta = it.next().expect("length checked").clone();
                norm.stats.mean = it.next().expect("length checked").data().to_vec();
                norm.stats.var = it.next().expect("length checked").data().to_vec();
            }
        }
        Ok(())
    }

    /// Runs the network on `input` of shape `(batch, in_channels, h, w)`.
    ///
    /// Train mode updates batch-norm running statistics and draws dropout
    /// masks from the stream `dropout_stream` of a generator seeded with
    /// `config.seed`.
    pub fn forward(
        &mut self,
        graph: &mut Graph<T>,
        input: Var,
        mode: Mode,
        dropout_stream: u64,
    ) -> Result<ForwardPass> {
        let [_, c, h, w] = graph.value(input).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::param(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        let div = self.config.divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::param(format!(
                "input spatial dims {h}x{w} must be multiples of {div}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(dropout_stream);
        let stride = self.config.stride;
        let slope = self.config.leaky_slope;
        let depth = self.config.depth;
        let mut params = Vec::new();

        let mut skips = Vec::with_capacity(depth);
        let mut x = input;
        for layer in self.encoder.iter_mut() {
            let (wv, bv) = register(graph, layer, &mut params);
            x = graph.conv2d(x, wv, bv, stride)?;
            x = apply_norm(graph, layer, x, mode, &mut params)?;
            x = graph.activation(x, Activation::LeakyRelu(slope));
            skips.push(x);
        }
        for (j, layer) in self.decoder.iter_mut().enumerate() {
            if j > 0 {
                x = graph.concat_channels(x, skips[depth - 1 - j])?;
            }
            let (wv, bv) = register(graph, layer, &mut params);
            x = graph.conv_transpose2d(x, wv, bv, stride)?;
            x = apply_norm(graph, layer, x, mode, &mut params)?;
            if j < self.config.dropout_decoder_layers
                && mode == Mode::Train
                && self.config.dropout_rate > 0.0
            {
                let n = graph.value(x).numel();
                let mask = dropout_mask(n, self.config.dropout_rate, &mut rng)?;
                x = graph.scale(x, mask)?;
            }
            if j + 1 < depth {
                x = graph.activation(x, Activation::Relu);
            }
        }
        Ok(ForwardPass { output: x, params })
    }
}

fn register<T: Real>(graph: &mut Graph<T>, layer: &Layer<T>, params: &mut Vec<Var>) -> (Var, Var) {
    let w = graph.leaf(layer.weight.clone().with_grad());
    let b = graph.leaf(layer.bias.clone().with_grad());
    params.push(w);
    params.push(b);
    (w, b)
}

fn apply_norm<T: Real>(
    graph: &mut Graph<T>,
    layer: &mut Layer<T>,
    x: Var,
    mode: Mode,
    params: &mut Vec<Var>,
) -> Result<Var> {
    let Some(norm) = layer.norm.as_mut() else {
        return Ok(x);
    };
    let g = graph.leaf(norm.gamma.clone().with_grad());
    let b = graph.leaf(norm.beta.clone().with_grad());
    params.push(g);
    params.push(b);
    graph.batch_norm(x, g, b, &mut norm.stats, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::{conv2d, conv_transpose2d};

    #[test]
    fn default_config() {
        let c = UNetConfig::default();
        c.validate().unwrap();
        assert_eq!(c.depth, 6);
        assert_eq!(c.dropout_decoder_layers, 5);
        assert_eq!(c.divisor(), 64);
        assert_eq!(UNetConfig::new(vec![8, 16], 2, 0).dropout_decoder_layers, 1);
        assert_eq!(UNetConfig::new(vec![8], 2, 0).dropout_decoder_layers, 0);
    }

    #[test]
    fn parameter_count_matches_tensors() {
        // Hand count for the default six-layer complex model:
        // encoder convs 2*16, 16*32, ..., 256*512 weights of 25 plus biases,
        // five encoder norms, decoder 512*256, 512*128, ..., 32*2.
        let enc_w = 25 * (2 * 16 + 16 * 32 + 32 * 64 + 64 * 128 + 128 * 256 + 256 * 512);
        let enc_b = 16 + 32 + 64 + 128 + 256 + 512;
        let enc_bn = 2 * (32 + 64 + 128 + 256 + 512);
        let dec_w = 25 * (512 * 256 + 512 * 128 + 256 * 64 + 128 * 32 + 64 * 16 + 32 * 2);
        let dec_b = 256 + 128 + 64 + 32 + 16 + 2;
        let dec_bn = 2 * (256 + 128 + 64 + 32 + 16);
        let expected = enc_w + enc_b + enc_bn + dec_w + dec_b + dec_bn;
        let config = UNetConfig::default();
        assert_eq!(config.parameter_count(), expected);
        assert_eq!(expected, 9_824_482);
        let net = UNet::<f32>::new(config).unwrap();
        let total: usize = net.parameters().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(total, expected);
    }

    #[test]
    fn config_lines_round_trip() {
        let mut c = UNetConfig::new(vec![8, 16, 32], 1, 42);
        c.leaky_slope = 0.1 + 0.2;
        assert_eq!(UNetConfig::from_lines(&c.to_lines()).unwrap(), c);
    }

    #[test]
    fn invalid_configs() {
        let mut c = UNetConfig::new(vec![8, 16], 2, 0);
        c.depth = 3;
        assert!(c.validate().is_err());
        let mut c = UNetConfig::new(vec![8, 16], 2, 0);
        c.dropout_decoder_layers = 2;
        assert!(c.validate().is_err());
        let mut c = UNetConfig::new(vec![8, 16], 2, 0);
        c.out_channels = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_shape_and_divisibility() {
        let mut net = UNet::<f32>::new(UNetConfig::new(vec![4, 8, 8], 2, 3)).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 2, 16, 24], |i| (i as f32 * 0.1).sin()));
        let out = net.forward(&mut g, x, Mode::Train, 0).unwrap();
        assert_eq!(g.value(out.output).shape(), &[2, 2, 16, 24]);
        assert_eq!(out.params.len(), net.parameters().len());

        let mut g = Graph::new();
        let bad = g.leaf(Tensor::zeros(&[1, 2, 12, 24]));
        assert!(net.forward(&mut g, bad, Mode::Eval, 0).is_err());
    }

    #[test]
    fn depth_one_is_conv_leaky_transpose() {
        let mut net = UNet::<f64>::new(UNetConfig::new(vec![3], 2, 9)).unwrap();
        let x = Tensor::from_fn(&[1, 2, 6, 8], |i| ((i * 7) % 11) as f64 / 5.0 - 1.0);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let out = net.forward(&mut g, xv, Mode::Train, 0).unwrap();

        let params = net.parameters();
        let h = conv2d(&x, params[0].1, params[1].1, 2).unwrap();
        let h = Tensor::new(
            h.shape().to_vec(),
            h.data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.2 * v })
                .collect(),
        )
        .unwrap();
        let y = conv_transpose2d(&h, params[2].1, params[3].1, 2).unwrap();
        for (a, b) in g.value(out.output).data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let config = UNetConfig::new(vec![4, 8], 2, 5);
        let x = Tensor::from_fn(&[1, 2, 8, 16], |i| (i as f32 * 0.37).cos());
        let run = || {
            let mut net = UNet::<f32>::new(config.clone()).unwrap();
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let out = net.forward(&mut g, xv, Mode::Eval, 0).unwrap();
            g.value(out.output).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fully_convolutional_interior() {
        let mut net = UNet::<f64>::new(UNetConfig::new(vec![4, 8], 2, 6)).unwrap();
        let long = Tensor::from_fn(&[1, 2, 64, 16], |i| ((i * 13) % 17) as f64 / 8.0 - 1.0);
        let short = Tensor::new(vec![1, 2, 32, 16], {
            let mut d = Vec::new();
            for c in 0..2 {
                d.extend_from_slice(&long.data()[c * 64 * 16..][..32 * 16]);
            }
            d
        })
        .unwrap();
        let run = |net: &mut UNet<f64>, x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let out = net.forward(&mut g, xv, Mode::Eval, 0).unwrap();
            g.value(out.output).clone()
        };
        let a = run(&mut net, &short);
        let b = run(&mut net, &long);
        // Frames within the receptive field of the cut differ.
        for c in 0..2 {
            for t in 0..16 {
                for f in 0..16 {
                    let va = a.data()[(c * 32 + t) * 16 + f];
                    let vb = b.data()[(c * 64 + t) * 16 + f];
                    assert!((va - vb).abs() < 1e-5);
                }
            }
        }
    }
}
