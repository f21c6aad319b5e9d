//! One shared 3D UNet encoder feeding several decoders that differ only in dilation
//! rate and weight initialization.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ProbabilityMap, Volume};
use crate::error::{Error, Result};
use crate::nn::layers::{max_pool2, max_pool2_backward};
use crate::nn::{ConvBlock, ConvBlockCache, Conv3d, DropoutMask, InitScheme, Param, Tensor, TransposedConv3d};
use crate::scalar::Scalar;

const AXES: [&str; 3] = ["depth", "height", "width"];

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TDNetConfig {
    pub num_classes: usize,
    pub num_decoders: usize,
    /// Dilation of every 3×3×3 convolution in decoder `n`.
    pub dilation_rates: Vec<usize>,
    pub init_schemes: Vec<InitScheme>,
    pub base_channels: usize,
    /// Number of resolution levels; the bottleneck sits at level `depth - 1`.
    pub depth: usize,
    /// Channel-dropout rates for auxiliary decoders are drawn uniformly from `[lo, hi)`.
    pub bottleneck_dropout_range: (f64, f64),
}

impl Default for TDNetConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_decoders: 3,
            dilation_rates: vec![1, 3, 6],
            init_schemes: vec![InitScheme::Kaiming, InitScheme::Xavier, InitScheme::Normal],
            base_channels: 16,
            depth: 5,
            bottleneck_dropout_range: (0.0, 0.5),
        }
    }
}

impl TDNetConfig {
    /// Brings `dilation_rates` and `init_schemes` to length `num_decoders`.
    ///
    /// Longer lists are truncated. Shorter dilation lists continue in steps of 3 from
    /// the last rate; shorter init lists cycle kaiming, xavier, normal.
    pub fn fit_lists_to_decoders(&mut self) {
        let n = self.num_decoders;
        self.dilation_rates.truncate(n);
        while self.dilation_rates.len() < n {
            let next = self.dilation_rates.last().map_or(1, |&d| d + 3);
            self.dilation_rates.push(next);
        }
        const CYCLE: [InitScheme; 3] = [InitScheme::Kaiming, InitScheme::Xavier, InitScheme::Normal];
        self.init_schemes.truncate(n);
        while self.init_schemes.len() < n {
            let i = self.init_schemes.len();
            self.init_schemes.push(CYCLE[i % 3]);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.to_string(),
                message,
            })
        };
        if self.num_classes < 2 {
            return bad("num_classes", "need at least 2 classes".into());
        }
        if self.num_decoders < 1 {
            return bad("num_decoders", "need at least one decoder".into());
        }
        if self.dilation_rates.len() != self.num_decoders {
            return bad(
                "dilation_rates",
                format!("expected {} entries, got {}", self.num_decoders, self.dilation_rates.len()),
            );
        }
        if self.init_schemes.len() != self.num_decoders {
            return bad(
                "init_schemes",
                format!("expected {} entries, got {}", self.num_decoders, self.init_schemes.len()),
            );
        }
        if self.dilation_rates.iter().any(|&d| d < 1) {
            return bad("dilation_rates", "rates must be >= 1".into());
        }
        if self.base_channels < 1 {
            return bad("base_channels", "must be >= 1".into());
        }
        if self.depth < 2 {
            return bad("depth", "need at least 2 resolution levels".into());
        }
        let (lo, hi) = self.bottleneck_dropout_range;
        if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
            return bad(
                "bottleneck_dropout_range",
                format!("({lo}, {hi}) must be an interval inside [0, 1)"),
            );
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Training mode applies bottleneck dropout to auxiliary decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Per-decoder logits and softmax probabilities, all shaped `(C, D, H, W)`.
#[derive(Clone, Debug)]
pub struct NetworkOutput<T> {
    pub logits: Vec<Array4<T>>,
    pub probs: Vec<ProbabilityMap<T>>,
}

/// Trainable parameter counts per component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCensus {
    pub encoder: usize,
    pub decoders: Vec<usize>,
    pub total: usize,
}

#[derive(Clone, Debug)]
struct Encoder<T> {
    blocks: Vec<ConvBlock<T>>,
}

struct EncoderCache<T> {
    blocks: Vec<ConvBlockCache<T>>,
    pool_indices: Vec<Vec<u32>>,
}

impl<T: Scalar> Encoder<T> {
    fn new<R: Rng + ?Sized>(cfg: &TDNetConfig, rng: &mut R) -> Self {
        let blocks = (0..cfg.depth)
            .map(|l| {
                let cin = if l == 0 { 1 } else { cfg.channels(l - 1) };
                ConvBlock::new(cin, cfg.channels(l), 1, InitScheme::Kaiming, rng)
            })
            .collect();
        Self { blocks }
    }

    fn forward(&self, x: Tensor<T>) -> EncoderCache<T> {
        let mut blocks: Vec<ConvBlockCache<T>> = Vec::with_capacity(self.blocks.len());
        let mut pool_indices = Vec::new();
        let mut input = x;
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                let (pooled, idx) = max_pool2(blocks[l - 1].output());
                pool_indices.push(idx);
                input = pooled;
            }
            let cache = block.forward(std::mem::replace(&mut input, Tensor::zeros(0, [0; 3])));
            blocks.push(cache);
        }
        EncoderCache { blocks, pool_indices }
    }

    /// Returns the per-level outputs; the last one is the bottleneck.
    fn infer(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let out = if l == 0 {
                block.infer(x)
            } else {
                block.infer(&max_pool2(&outs[l - 1]).0)
            };
            outs.push(out);
        }
        outs
    }

    fn backward(&mut self, cache: &EncoderCache<T>, d_bottleneck: Tensor<T>, mut d_skips: Vec<Tensor<T>>) {
        let depth = self.blocks.len();
        let mut d_out = d_bottleneck;
        for l in (0..depth).rev() {
            let d_in = self.blocks[l].backward(&cache.blocks[l], d_out, l > 0);
            if l == 0 {
                break;
            }
            let spatial = cache.blocks[l - 1].output().spatial;
            let mut d = max_pool2_backward(&d_in.expect("input gradient requested"), &cache.pool_indices[l - 1], spatial);
            d.add_assign(&d_skips[l - 1]);
            d_out = d;
            d_skips.pop();
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

#[derive(Clone, Debug)]
struct Decoder<T> {
    /// Upsampling and fusion stages, from the coarsest level to the finest.
    ups: Vec<TransposedConv3d<T>>,
    blocks: Vec<ConvBlock<T>>,
    head: Conv3d<T>,
}

struct DecoderCache<T> {
    up_inputs: Vec<Tensor<T>>,
    blocks: Vec<ConvBlockCache<T>>,
    skip_channels: Vec<usize>,
}

impl<T: Scalar> Decoder<T> {
    fn new<R: Rng + ?Sized>(cfg: &TDNetConfig, dilation: usize, init: InitScheme, rng: &mut R) -> Self {
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for l in (0..cfg.depth - 1).rev() {
            ups.push(TransposedConv3d::new(cfg.channels(l + 1), cfg.channels(l), init, rng));
            blocks.push(ConvBlock::new(2 * cfg.channels(l), cfg.channels(l), dilation, init, rng));
        }
        let head = Conv3d::new(cfg.channels(0), cfg.num_classes, 1, 1, true, init, rng);
        Self { ups, blocks, head }
    }

    /// `skips[l]` is the encoder output at level `l`.
    fn forward(&self, bottleneck: Tensor<T>, skips: &[&Tensor<T>]) -> (Tensor<T>, DecoderCache<T>) {
        let depth = skips.len() + 1;
        let mut up_inputs = Vec::with_capacity(depth - 1);
        let mut blocks: Vec<ConvBlockCache<T>> = Vec::with_capacity(depth - 1);
        let mut skip_channels = Vec::with_capacity(depth - 1);
        let mut cur = bottleneck;
        for (i, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            let l = depth - 2 - i;
            let upsampled = up.forward(&cur);
            up_inputs.push(cur);
            skip_channels.push(skips[l].channels);
            let cache = block.forward(Tensor::concat(skips[l], &upsampled));
            cur = cache.output().clone();
            blocks.push(cache);
        }
        let logits = self.head.forward(&cur);
        (
            logits,
            DecoderCache {
                up_inputs,
                blocks,
                skip_channels,
            },
        )
    }

    fn infer(&self, bottleneck: &Tensor<T>, skips: &[Tensor<T>]) -> Tensor<T> {
        let depth = skips.len() + 1;
        let mut cur = bottleneck.clone();
        for (i, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            let l = depth - 2 - i;
            cur = block.infer(&Tensor::concat(&skips[l], &up.forward(&cur)));
        }
        self.head.forward(&cur)
    }

    /// Returns the gradient w.r.t. the (perturbed) bottleneck and each skip, finest first.
    fn backward(&mut self, cache: &DecoderCache<T>, d_logits: &Tensor<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
        let head_input = cache.blocks.last().expect("depth >= 2").output();
        let mut d = self.head.backward(head_input, d_logits, true).expect("input gradient requested");
        let n = self.blocks.len();
        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None; n];
        for i in (0..n).rev() {
            let d_cat = self.blocks[i]
                .backward(&cache.blocks[i], d, true)
                .expect("input gradient requested");
            let (d_skip, d_up) = d_cat.split(cache.skip_channels[i]);
            let l = n - 1 - i;
            d_skips[l] = Some(d_skip);
            d = self.ups[i].backward(&cache.up_inputs[i], &d_up);
        }
        (d, d_skips.into_iter().map(|t| t.expect("every level visited")).collect())
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = Vec::new();
        for (up, block) in self.ups.iter().zip(&self.blocks) {
            v.extend(up.params());
            v.extend(block.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = Vec::new();
        for (up, block) in self.ups.iter_mut().zip(self.blocks.iter_mut()) {
            v.extend(up.params_mut());
            v.extend(block.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

/// Activations retained by a training forward pass.
pub struct ForwardCache<T> {
    encoder: EncoderCache<T>,
    decoders: Vec<DecoderCache<T>>,
    masks: Vec<DropoutMask<T>>,
}

impl<T> ForwardCache<T> {
    /// Dropout draws applied to each decoder's bottleneck input (identity for the primary).
    pub fn dropout_masks(&self) -> &[DropoutMask<T>] {
        &self.masks
    }
}

/// Multi-decoder network with a shared encoder.
#[derive(Clone, Debug)]
pub struct TDNet<T> {
    config: TDNetConfig,
    encoder: Encoder<T>,
    decoders: Vec<Decoder<T>>,
}

impl<T: Scalar> TDNet<T> {
    /// Builds and initializes a network; identical seeds give identical parameters.
    pub fn new(config: TDNetConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let encoder = Encoder::new(&config, &mut rng);
        let decoders = config
            .dilation_rates
            .iter()
            .zip(&config.init_schemes)
            .map(|(&d, &init)| Decoder::new(&config, d, init, &mut rng))
            .collect();
        Ok(Self {
            config,
            encoder,
            decoders,
        })
    }

    pub fn config(&self) -> &TDNetConfig {
        &self.config
    }

    pub fn num_decoders(&self) -> usize {
        self.decoders.len()
    }

    pub fn census(&self) -> ParameterCensus {
        let count = |ps: Vec<&Param<T>>| ps.iter().map(|p| p.len()).sum::<usize>();
        let encoder = count(self.encoder.params());
        let decoders: Vec<usize> = self.decoders.iter().map(|d| count(d.params())).collect();
        let total = encoder + decoders.iter().sum::<usize>();
        ParameterCensus {
            encoder,
            decoders,
            total,
        }
    }

    /// All parameters in a fixed order: encoder first, then each decoder.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.encoder.params();
        for d in &self.decoders {
            v.extend(d.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        for d in &mut self.decoders {
            v.extend(d.params_mut());
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels != 1 {
            return Err(Error::ShapeMismatch {
                axis: "channel",
                expected: 1,
                actual: x.channels,
            });
        }
        let div = self.config.size_divisor();
        for (a, &size) in x.spatial.iter().enumerate() {
            if size == 0 || size % div != 0 {
                return Err(Error::NotDivisible {
                    axis: AXES[a],
                    size,
                    divisor: div,
                });
            }
        }
        Ok(())
    }

    /// Training forward pass keeping activations for [`TDNet::backward`].
    ///
    /// Auxiliary decoders (index ≥ 1) each receive an independent channel-dropout draw
    /// of the bottleneck; the primary decoder sees it unperturbed.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &Tensor<T>, rng: &mut R) -> Result<(Vec<Tensor<T>>, ForwardCache<T>)> {
        self.check_input(x)?;
        let enc = self.encoder.forward(x.clone());
        let depth = self.config.depth;
        let bottleneck = enc.blocks[depth - 1].output();
        let skips: Vec<&Tensor<T>> = enc.blocks[..depth - 1].iter().map(|c| c.output()).collect();
        let mut masks = Vec::with_capacity(self.decoders.len());
        let mut logits = Vec::with_capacity(self.decoders.len());
        let mut caches = Vec::with_capacity(self.decoders.len());
        for (n, dec) in self.decoders.iter().enumerate() {
            let mask = if n == 0 {
                DropoutMask::identity(bottleneck.channels)
            } else {
                DropoutMask::sample(bottleneck.channels, self.config.bottleneck_dropout_range, rng)
            };
            let (out, cache) = dec.forward(mask.apply(bottleneck), &skips);
            masks.push(mask);
            logits.push(out);
            caches.push(cache);
        }
        Ok((
            logits,
            ForwardCache {
                encoder: enc,
                decoders: caches,
                masks,
            },
        ))
    }

    /// Accumulates parameter gradients given `d_logits[n]` for every decoder.
    pub fn backward(&mut self, cache: ForwardCache<T>, d_logits: &[Tensor<T>]) {
        assert_eq!(d_logits.len(), self.decoders.len(), "one logit gradient per decoder");
        let depth = self.config.depth;
        let mut d_bottleneck = Tensor::zeros(self.config.channels(depth - 1), cache.encoder.blocks[depth - 1].output().spatial);
        let mut d_skips: Vec<Tensor<T>> = cache.encoder.blocks[..depth - 1]
            .iter()
            .map(|c| Tensor::zeros(c.output().channels, c.output().spatial))
            .collect();
        for (n, dec) in self.decoders.iter_mut().enumerate() {
            let (db, ds) = dec.backward(&cache.decoders[n], &d_logits[n]);
            d_bottleneck.add_assign(&cache.masks[n].backward(&db));
            for (acc, d) in d_skips.iter_mut().zip(&ds) {
                acc.add_assign(d);
            }
        }
        self.encoder.backward(&cache.encoder, d_bottleneck, d_skips);
    }

    /// Forward pass of every decoder; dropout only in [`Mode::Train`].
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, rng_seed: u64) -> Result<NetworkOutput<T>> {
        let logits: Vec<Tensor<T>> = match mode {
            Mode::Train => {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                self.forward_train(x, &mut rng)?.0
            }
            Mode::Inference => {
                self.check_input(x)?;
                let mut outs = self.encoder.infer(x);
                let bottleneck = outs.pop().expect("depth >= 2");
                self.decoders.iter().map(|d| d.infer(&bottleneck, &outs)).collect()
            }
        };
        let logits: Vec<Array4<T>> = logits.into_iter().map(Tensor::into_array4).collect();
        let probs = logits.iter().map(ProbabilityMap::from_logits).collect();
        Ok(NetworkOutput { logits, probs })
    }

    /// Inference-mode logits of the primary decoder only.
    pub fn predict_primary(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut outs = self.encoder.infer(x);
        let bottleneck = outs.pop().expect("depth >= 2");
        Ok(self.decoders[0].infer(&bottleneck, &outs))
    }
}

/// Runs the network on a normalized single-channel patch.
pub fn forward_tdnet<T: Scalar>(model: &TDNet<T>, patch: &Volume<T>, mode: Mode, rng_seed: u64) -> Result<NetworkOutput<T>> {
    model.forward(&Tensor::from_image(&patch.data), mode, rng_seed)
}
