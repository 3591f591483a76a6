//! The refinement network.
//!
//! Given the current reconstruction `x'` and a 1-based stage index, a
//! [`Refiner`] proposes `K` refinements `x' + delta_j`. Stage conditioning is
//! carried entirely by two mechanisms:
//!
//! * segments: stages `1..=s` use one parameter set, `s+1..=2s` the next,
//!   and so on, where `s` is `stages_per_segment`;
//! * masks: every masked layer multiplies its output channels by a learned
//!   vector owned by the current stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Two hidden fully connected layers over the flattened data.
    Dense { hidden: usize },
    /// Strided convolutions down, residual blocks, transposed convolutions up.
    Cnn {
        channels: usize,
        downsample_steps: usize,
        residual_blocks: usize,
        norm_groups: usize,
    },
}

/// Canvas every encode and decode starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialCanvas {
    #[default]
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// `K`, refinements proposed per stage.
    pub options: usize,
    /// `N`, total stages.
    pub stages: usize,
    pub stages_per_segment: usize,
    /// `[C, H, W]` for images, or any shape for the dense variant.
    pub data_shape: Vec<usize>,
    pub architecture: Architecture,
    /// Init scale of the output head relative to the other layers.
    #[serde(default = "default_head_gain")]
    pub head_gain: f64,
    #[serde(default)]
    pub initial_canvas: InitialCanvas,
}

fn default_head_gain() -> f64 {
    0.1
}

impl RefinerConfig {
    /// Small CNN matching the MNIST column of the reference setup.
    pub fn mnist() -> Self {
        RefinerConfig {
            options: 64,
            stages: 10,
            stages_per_segment: 10,
            data_shape: vec![1, 28, 28],
            architecture: Architecture::Cnn {
                channels: 64,
                downsample_steps: 2,
                residual_blocks: 4,
                norm_groups: 8,
            },
            head_gain: default_head_gain(),
            initial_canvas: InitialCanvas::Zeros,
        }
    }

    pub fn dense(options: usize, stages: usize, dim: usize, hidden: usize) -> Self {
        RefinerConfig {
            options,
            stages,
            stages_per_segment: stages,
            data_shape: vec![dim],
            architecture: Architecture::Dense { hidden },
            head_gain: default_head_gain(),
            initial_canvas: InitialCanvas::Zeros,
        }
    }

    pub fn segments(&self) -> usize {
        self.stages.div_ceil(self.stages_per_segment)
    }

    pub fn data_len(&self) -> usize {
        self.data_shape.iter().product()
    }

    /// Bits in one latent code when `K` is a power of two.
    pub fn code_bits(&self) -> usize {
        self.stages * self.options.next_power_of_two().trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.options == 0 {
            return bad("options (K) must be at least 1".into());
        }
        if self.stages == 0 {
            return bad("stages (N) must be at least 1".into());
        }
        if self.stages_per_segment == 0 || self.stages_per_segment > self.stages {
            return bad(format!(
                "stages_per_segment must lie in [1, {}], got {}",
                self.stages, self.stages_per_segment
            ));
        }
        if self.data_shape.is_empty() || self.data_shape.contains(&0) {
            return bad(format!("invalid data shape {:?}", self.data_shape));
        }
        if !(self.head_gain.is_finite() && self.head_gain >= 0.0) {
            return bad(format!(
                "head_gain must be finite and non-negative, got {}",
                self.head_gain
            ));
        }
        match &self.architecture {
            Architecture::Dense { hidden } => {
                if *hidden == 0 {
                    return bad("dense hidden width must be positive".into());
                }
            }
            Architecture::Cnn {
                channels,
                downsample_steps,
                norm_groups,
                ..
            } => {
                let [_, h, w] = self.data_shape[..] else {
                    return bad(format!(
                        "CNN refiner needs a C x H x W shape, got {:?}",
                        self.data_shape
                    ));
                };
                if *downsample_steps == 0 {
                    return bad("CNN refiner needs at least one downsampling step".into());
                }
                let factor = 1usize << downsample_steps;
                if h % factor != 0 || w % factor != 0 {
                    return bad(format!(
                        "spatial size {h}x{w} is not divisible by the downsampling factor {factor}"
                    ));
                }
                if *channels == 0 || *norm_groups == 0 || channels % norm_groups != 0 {
                    return bad(format!(
                        "{norm_groups} normalization groups do not divide {channels} channels"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// 1-based segment owning a 1-based stage: `ceil(stage / stages_per_segment)`.
pub fn segment_index(stage: usize, stages_per_segment: usize) -> usize {
    assert!(stage >= 1 && stages_per_segment >= 1);
    (stage - 1) / stages_per_segment + 1
}

#[derive(Debug, Clone, Copy)]
enum LayerOp {
    Dense,
    Conv { stride: usize, padding: usize },
    ConvTranspose { stride: usize, padding: usize },
}

#[derive(Debug, Clone)]
struct Layer {
    op: LayerOp,
    weight: ParamId,
    bias: ParamId,
    /// Position among this segment's masked layers.
    mask_slot: Option<usize>,
    relu: bool,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
enum Block {
    Plain(Layer),
    /// `x + f(x)` with `f` the listed layers in order.
    Residual(Vec<Layer>),
}

#[derive(Debug, Clone)]
struct Segment {
    body: Vec<Block>,
    head: Layer,
    /// `masks[local_stage][mask_slot]`.
    masks: Vec<Vec<ParamId>>,
}

/// A refinement network with its parameters.
#[derive(Debug, Clone)]
pub struct Refiner<T> {
    config: RefinerConfig,
    params: ParamStore<T>,
    segments: Vec<Segment>,
    norm_groups: usize,
}

struct Builder<'a, T, R> {
    params: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
    mask_widths: Vec<usize>,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            T::from_f64_lossy(self.rng.random_range(-1.0..=1.0) * bound)
        })
    }

    /// Adds one layer; `fan_in` sets the init bound `gain / sqrt(fan_in)`.
    #[allow(clippy::too_many_arguments)]
    fn layer(
        &mut self,
        name: &str,
        op: LayerOp,
        weight_shape: Vec<usize>,
        out_channels: usize,
        fan_in: usize,
        gain: f64,
        masked: bool,
        relu: bool,
        norm: bool,
    ) -> Layer {
        let bound = gain / (fan_in as f64).sqrt();
        let w = self.uniform(weight_shape, bound);
        let b = self.uniform(vec![out_channels], bound);
        let weight = self.params.add(format!("{}.{name}.weight", self.prefix), w);
        let bias = self.params.add(format!("{}.{name}.bias", self.prefix), b);
        let mask_slot = masked.then(|| {
            self.mask_widths.push(out_channels);
            self.mask_widths.len() - 1
        });
        let norm = norm.then(|| {
            let gamma = self.params.add(
                format!("{}.{name}.norm.gamma", self.prefix),
                Tensor::full([out_channels], T::one()),
            );
            let beta = self.params.add(
                format!("{}.{name}.norm.beta", self.prefix),
                Tensor::zeros([out_channels]),
            );
            (gamma, beta)
        });
        Layer {
            op,
            weight,
            bias,
            mask_slot,
            relu,
            norm,
        }
    }

    fn masks(&mut self, segment: usize, stages: usize) -> Vec<Vec<ParamId>> {
        (0..stages)
            .map(|local| {
                self.mask_widths
                    .iter()
                    .enumerate()
                    .map(|(slot, &width)| {
                        self.params.add(
                            format!("seg{segment}.stage{local}.mask{slot}"),
                            Tensor::full([width], T::one()),
                        )
                    })
                    .collect()
            })
            .collect()
    }
}

impl<T: Scalar> Refiner<T> {
    /// Builds the architecture named in `config` with fresh parameters.
    pub fn new<R: Rng>(config: RefinerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        match config.architecture {
            Architecture::Dense { .. } => Self::build_dense(config, rng),
            Architecture::Cnn { .. } => Self::build_cnn(config, rng),
        }
    }

    /// Fully connected refiner: two masked relu layers and a linear head
    /// emitting `K * D` values.
    pub fn build_dense<R: Rng>(config: RefinerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let Architecture::Dense { hidden } = config.architecture else {
            return Err(Error::Config(
                "build_dense needs a dense architecture".into(),
            ));
        };
        let dim = config.data_len();
        let mut params = ParamStore::new();
        let mut segments = Vec::new();
        for s in 0..config.segments() {
            let mut b = Builder {
                params: &mut params,
                rng,
                prefix: format!("seg{s}"),
                mask_widths: Vec::new(),
            };
            let l1 = b.layer(
                "fc1",
                LayerOp::Dense,
                vec![dim, hidden],
                hidden,
                dim,
                1.0,
                true,
                true,
                false,
            );
            let l2 = b.layer(
                "fc2",
                LayerOp::Dense,
                vec![hidden, hidden],
                hidden,
                hidden,
                1.0,
                true,
                true,
                false,
            );
            let out = config.options * dim;
            let head = b.layer(
                "head",
                LayerOp::Dense,
                vec![hidden, out],
                out,
                hidden,
                config.head_gain,
                false,
                false,
                false,
            );
            let masks = b.masks(s, stages_in_segment(&config, s));
            segments.push(Segment {
                body: vec![Block::Plain(l1), Block::Plain(l2)],
                head,
                masks,
            });
        }
        Ok(Refiner {
            config,
            params,
            segments,
            norm_groups: 1,
        })
    }

    /// Convolutional refiner: stride-2 4x4 convolutions down, 3x3 residual
    /// blocks at the bottleneck, stride-2 4x4 transposed convolutions back up
    /// and a 3x3 head emitting `K * C` channels. Every convolution is
    /// followed by a stage mask; every relu by group normalization.
    pub fn build_cnn<R: Rng>(config: RefinerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let Architecture::Cnn {
            channels: ch,
            downsample_steps,
            residual_blocks,
            norm_groups,
        } = config.architecture
        else {
            return Err(Error::Config("build_cnn needs a CNN architecture".into()));
        };
        let in_ch = config.data_shape[0];
        let mut params = ParamStore::new();
        let mut segments = Vec::new();
        for s in 0..config.segments() {
            let mut b = Builder {
                params: &mut params,
                rng,
                prefix: format!("seg{s}"),
                mask_widths: Vec::new(),
            };
            let mut body = Vec::new();
            let down = LayerOp::Conv {
                stride: 2,
                padding: 1,
            };
            let same = LayerOp::Conv {
                stride: 1,
                padding: 1,
            };
            let up = LayerOp::ConvTranspose {
                stride: 2,
                padding: 1,
            };
            for d in 0..downsample_steps {
                let cin = if d == 0 { in_ch } else { ch };
                body.push(Block::Plain(b.layer(
                    &format!("down{d}"),
                    down,
                    vec![ch, cin, 4, 4],
                    ch,
                    cin * 16,
                    1.0,
                    true,
                    true,
                    true,
                )));
            }
            for r in 0..residual_blocks {
                let layers = (0..2)
                    .map(|k| {
                        b.layer(
                            &format!("res{r}.conv{k}"),
                            same,
                            vec![ch, ch, 3, 3],
                            ch,
                            ch * 9,
                            1.0,
                            true,
                            true,
                            true,
                        )
                    })
                    .collect();
                body.push(Block::Residual(layers));
            }
            for u in 0..downsample_steps {
                body.push(Block::Plain(b.layer(
                    &format!("up{u}"),
                    up,
                    vec![ch, ch, 4, 4],
                    ch,
                    ch * 16,
                    1.0,
                    true,
                    true,
                    true,
                )));
            }
            let out = config.options * in_ch;
            let head = b.layer(
                "head",
                same,
                vec![out, ch, 3, 3],
                out,
                ch * 9,
                config.head_gain,
                true,
                false,
                false,
            );
            let masks = b.masks(s, stages_in_segment(&config, s));
            segments.push(Segment { body, head, masks });
        }
        Ok(Refiner {
            config,
            params,
            segments,
            norm_groups,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Refiner<U> {
        Refiner {
            config: self.config.clone(),
            params: self.params.cast(),
            segments: self.segments.clone(),
            norm_groups: self.norm_groups,
        }
    }

    /// Parameters of the output head of a 1-based segment (weight, bias).
    pub fn head_params(&self, segment: usize) -> (ParamId, ParamId) {
        let head = &self.segments[segment - 1].head;
        (head.weight, head.bias)
    }

    /// Mask vectors owned by a 1-based stage, in layer order.
    pub fn stage_masks(&self, stage: usize) -> &[ParamId] {
        let sps = self.config.stages_per_segment;
        let seg = segment_index(stage, sps);
        &self.segments[seg - 1].masks[(stage - 1) % sps]
    }

    /// Every parameter owned by a 1-based segment, masks included.
    pub fn segment_params(&self, segment: usize) -> Vec<ParamId> {
        let prefix = format!("seg{}.", segment - 1);
        self.params
            .ids()
            .filter(|&id| self.params.name(id).starts_with(&prefix))
            .collect()
    }

    /// The `K` deltas for every example, shaped `[B, K, ...data_shape]`.
    pub fn deltas(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x_prime: Var,
        stage: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        if stage == 0 || stage > cfg.stages {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} outside 1..={}",
                cfg.stages
            )));
        }
        let shape = g.shape(x_prime).to_vec();
        if shape.len() != cfg.data_shape.len() + 1 || shape[1..] != cfg.data_shape[..] {
            return Err(Error::shape("refine", &shape, &cfg.data_shape));
        }
        let batch = shape[0];
        let seg = &self.segments[segment_index(stage, cfg.stages_per_segment) - 1];
        let masks = &seg.masks[(stage - 1) % cfg.stages_per_segment];

        let mut h = match cfg.architecture {
            Architecture::Dense { .. } => g.reshape(x_prime, [batch, cfg.data_len()])?,
            Architecture::Cnn { .. } => x_prime,
        };
        for block in &seg.body {
            h = match block {
                Block::Plain(layer) => self.apply_layer(g, bound, masks, layer, h)?,
                Block::Residual(layers) => {
                    let mut r = h;
                    for layer in layers {
                        r = self.apply_layer(g, bound, masks, layer, r)?;
                    }
                    g.add(h, r)?
                }
            };
        }
        let out = self.apply_layer(g, bound, masks, &seg.head, h)?;
        let mut delta_shape = vec![batch, cfg.options];
        delta_shape.extend_from_slice(&cfg.data_shape);
        g.reshape(out, delta_shape)
    }

    /// `{x' + delta_1, ..., x' + delta_K}` as one `[B, K, ...data_shape]` var.
    pub fn refine(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x_prime: Var,
        stage: usize,
    ) -> Result<Var> {
        let deltas = self.deltas(g, bound, x_prime, stage)?;
        let mut shape = g.shape(x_prime).to_vec();
        shape.insert(1, 1);
        let base = g.reshape(x_prime, shape)?;
        g.add(base, deltas)
    }

    fn apply_layer(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        masks: &[ParamId],
        layer: &Layer,
        x: Var,
    ) -> Result<Var> {
        let (w, b) = (bound.var(layer.weight), bound.var(layer.bias));
        let mut h = match layer.op {
            LayerOp::Dense => {
                let y = g.matmul(x, w)?;
                g.add(y, b)?
            }
            LayerOp::Conv { stride, padding } => g.conv2d(x, w, Some(b), stride, padding)?,
            LayerOp::ConvTranspose { stride, padding } => {
                g.conv_transpose2d(x, w, Some(b), stride, padding)?
            }
        };
        if let Some(slot) = layer.mask_slot {
            h = g.channel_mask(h, bound.var(masks[slot]))?;
        }
        if layer.relu {
            h = g.relu(h)?;
        }
        if let Some((gamma, beta)) = layer.norm {
            h = g.group_norm(
                h,
                bound.var(gamma),
                bound.var(beta),
                self.norm_groups,
                GROUP_NORM_EPS,
            )?;
        }
        Ok(h)
    }

    /// Convenience for callers without a graph: refinements of a batch of
    /// canvases `[B, ...data_shape]`, as `[B, K, ...data_shape]`.
    pub fn refine_values(&self, x_prime: &Tensor<T>, stage: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(x_prime.clone());
        let r = self.refine(&mut g, &bound, x, stage)?;
        Ok(g.value(r).clone())
    }
}

fn stages_in_segment(config: &RefinerConfig, segment: usize) -> usize {
    let start = segment * config.stages_per_segment;
    config.stages_per_segment.min(config.stages - start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn small_cnn(options: usize, stages: usize, per_segment: usize) -> RefinerConfig {
        RefinerConfig {
            options,
            stages,
            stages_per_segment: per_segment,
            data_shape: vec![1, 8, 8],
            architecture: Architecture::Cnn {
                channels: 4,
                downsample_steps: 2,
                residual_blocks: 1,
                norm_groups: 2,
            },
            head_gain: 0.1,
            initial_canvas: InitialCanvas::Zeros,
        }
    }

    fn zero_heads<T: Scalar>(r: &mut Refiner<T>) {
        for s in 1..=r.config().segments() {
            let (w, b) = r.head_params(s);
            r.params_mut().get_mut(w).data_mut().fill(T::zero());
            r.params_mut().get_mut(b).data_mut().fill(T::zero());
        }
    }

    fn random_canvas(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn segment_boundaries() {
        assert_eq!(segment_index(5, 5), 1);
        assert_eq!(segment_index(6, 5), 2);
        assert_eq!(segment_index(10, 5), 2);
        assert_eq!(segment_index(1, 7), 1);
        for stage in 1..=10 {
            assert_eq!(segment_index(stage, 10), 1);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_cnn(4, 3, 2);
        assert!(c.validate().is_ok());
        c.data_shape = vec![1, 10, 10];
        assert!(c.validate().is_err(), "10 is not divisible by 4");
        let mut c = small_cnn(4, 3, 4);
        assert!(c.validate().is_err());
        c.stages_per_segment = 0;
        assert!(c.validate().is_err());
        assert!(RefinerConfig::dense(0, 2, 2, 8).validate().is_err());
    }

    #[test]
    fn mnist_shapes_and_head_width() {
        let cfg = RefinerConfig::mnist();
        let r = Refiner::<f32>::new(cfg, &mut rng()).unwrap();
        let (w, _) = r.head_params(1);
        assert_eq!(r.params().get(w).shape(), &[64, 64, 3, 3]);
        let x = Tensor::zeros([1, 1, 28, 28]);
        let out = r.refine_values(&x, 1).unwrap();
        assert_eq!(out.shape(), &[1, 64, 1, 28, 28]);
    }

    #[test]
    fn bottleneck_is_seven_by_seven_for_mnist() {
        let cfg = RefinerConfig::mnist();
        let r = Refiner::<f32>::new(cfg, &mut rng()).unwrap();
        let id = r.params().find("seg0.res0.conv0.weight").unwrap();
        assert_eq!(r.params().get(id).shape(), &[64, 64, 3, 3]);
        let mut g = Graph::new();
        let bound = r.params().bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 1, 28, 28]));
        r.deltas(&mut g, &bound, x, 1).unwrap();
        assert!(g.values().any(|v| v.shape() == [1, 64, 7, 7]));
        assert!(!g
            .values()
            .any(|v| v.shape().len() == 4 && v.shape()[0] == 1 && v.shape()[2] < 7));
        let d0 = r.params().find("seg0.down0.weight").unwrap();
        let d1 = r.params().find("seg0.down1.weight").unwrap();
        assert_eq!(r.params().get(d0).shape(), &[64, 1, 4, 4]);
        assert_eq!(r.params().get(d1).shape(), &[64, 64, 4, 4]);
        // 28 -> 14 -> 7 with kernel 4, stride 2, padding 1.
        assert_eq!((28 + 2 - 4) / 2 + 1, 14);
        assert_eq!((14 + 2 - 4) / 2 + 1, 7);
    }

    #[test]
    fn only_the_head_grows_with_k() {
        let count = |k: usize| {
            let mut cfg = small_cnn(k, 2, 2);
            cfg.stages_per_segment = 2;
            let r = Refiner::<f32>::new(cfg, &mut rng()).unwrap();
            let mut body = 0;
            let mut head = 0;
            for (name, t) in r.params().iter() {
                if name.contains(".head.") || name.ends_with(&format!("mask{}", 2 + 2 + 2)) {
                    head += t.numel();
                } else {
                    body += t.numel();
                }
            }
            (body, head)
        };
        let (body4, head4) = count(4);
        let (body16, head16) = count(16);
        assert_eq!(body4, body16);
        assert!(head16 > head4);
    }

    #[test]
    fn zero_head_gives_identity_refinements() {
        let mut rng = rng();
        for cfg in [small_cnn(3, 4, 2), RefinerConfig::dense(5, 3, 4, 16)] {
            let mut r = Refiner::<f32>::new(cfg.clone(), &mut rng).unwrap();
            zero_heads(&mut r);
            let mut shape = vec![2];
            shape.extend_from_slice(&cfg.data_shape);
            let x = random_canvas(&mut rng, &shape);
            for stage in 1..=cfg.stages {
                let out = r.refine_values(&x, stage).unwrap();
                assert_eq!(out.shape()[1], cfg.options);
                let per = cfg.data_len();
                for b in 0..2 {
                    for k in 0..cfg.options {
                        let off = (b * cfg.options + k) * per;
                        assert_eq!(
                            &out.data()[off..off + per],
                            &x.data()[b * per..(b + 1) * per]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn unit_masks_match_unmasked_network() {
        // Masks start at one, so outputs equal a hand-run of the same layers
        // without any mask multiplication.
        let mut rng = rng();
        let cfg = RefinerConfig::dense(3, 2, 2, 5);
        let r = Refiner::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::new([1, 2], vec![0.3, -0.7]).unwrap();
        let out = r.refine_values(&x, 2).unwrap();
        let p = |name: &str| r.params().get(r.params().find(name).unwrap()).clone();
        let linear = |v: &[f64], w: &Tensor<f64>, b: &Tensor<f64>, relu: bool| -> Vec<f64> {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            (0..cols)
                .map(|j| {
                    let s: f64 = (0..rows)
                        .map(|i| v[i] * w.data()[i * cols + j])
                        .sum::<f64>()
                        + b.data()[j];
                    if relu {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect()
        };
        let h1 = linear(x.data(), &p("seg0.fc1.weight"), &p("seg0.fc1.bias"), true);
        let h2 = linear(&h1, &p("seg0.fc2.weight"), &p("seg0.fc2.bias"), true);
        let d = linear(&h2, &p("seg0.head.weight"), &p("seg0.head.bias"), false);
        for k in 0..3 {
            for i in 0..2 {
                let want = x.data()[i] + d[k * 2 + i];
                assert!((out.data()[k * 2 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_set_dense_deltas() {
        // D=2, K=2, hidden=2, identity-ish weights worked out by hand.
        let cfg = RefinerConfig::dense(2, 1, 2, 2);
        let mut r = Refiner::<f64>::new(cfg, &mut rng()).unwrap();
        let set = |r: &mut Refiner<f64>, name: &str, v: &[f64]| {
            let id = r.params().find(name).unwrap();
            r.params_mut().get_mut(id).data_mut().copy_from_slice(v);
        };
        set(&mut r, "seg0.fc1.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut r, "seg0.fc1.bias", &[0.5, 0.5]);
        set(&mut r, "seg0.fc2.weight", &[2.0, 0.0, 0.0, 1.0]);
        set(&mut r, "seg0.fc2.bias", &[0.0, -1.0]);
        // head: [2 hidden] -> [K*D = 4]
        set(
            &mut r,
            "seg0.head.weight",
            &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, 2.0],
        );
        set(&mut r, "seg0.head.bias", &[0.0, 0.0, 0.1, 0.0]);
        let x = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        // h1 = relu([1.5, 2.5]); h2 = relu([3.0, 1.5]);
        // deltas = [3, 1.5, -3 + 0.1, 3] -> option1 (3, 1.5), option2 (-2.9, 3)
        let out = r.refine_values(&x, 1).unwrap();
        let want = [4.0, 3.5, -1.9, 5.0];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", out.data());
        }
    }

    #[test]
    fn different_stage_masks_give_different_outputs() {
        let mut rng = rng();
        let cfg = RefinerConfig::dense(3, 2, 2, 8);
        let mut r = Refiner::<f32>::new(cfg, &mut rng).unwrap();
        for (stage, value) in [(1, 0.5f32), (2, 1.5)] {
            for &id in r.stage_masks(stage).to_vec().iter() {
                r.params_mut().get_mut(id).data_mut().fill(value);
            }
        }
        let x = Tensor::new([1, 2], vec![0.4, 0.9]).unwrap();
        let a = r.refine_values(&x, 1).unwrap();
        let b = r.refine_values(&x, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn stage_out_of_range_is_rejected() {
        let r = Refiner::<f32>::new(RefinerConfig::dense(2, 3, 2, 4), &mut rng()).unwrap();
        let x = Tensor::zeros([1, 2]);
        assert!(r.refine_values(&x, 0).is_err());
        assert!(r.refine_values(&x, 4).is_err());
        assert!(r.refine_values(&Tensor::zeros([1, 3]), 1).is_err());
    }

    #[test]
    fn last_segment_may_be_short() {
        let cfg = small_cnn(2, 5, 2);
        let r = Refiner::<f32>::new(cfg, &mut rng()).unwrap();
        assert_eq!(r.config().segments(), 3);
        assert!(r.params().find("seg2.stage0.mask0").is_some());
        assert!(r.params().find("seg2.stage1.mask0").is_none());
        let x = Tensor::zeros([1, 1, 8, 8]);
        assert!(r.refine_values(&x, 5).is_ok());
    }
}
