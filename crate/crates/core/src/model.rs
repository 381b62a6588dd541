//! The segmentation model `f(I, r) -> logits`, its losses, and the
//! [`Network`] bundle that pairs it with a text encoder and vocabulary.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask, ReferringSample};
use crate::error::{Error, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, Conv2d, Upsample2x};
use crate::params::{ParamSet, Tensor};
use crate::text::{tokenize, EncodeCache, EncoderDims, TextEncoder, TokenSequence, Tokens, Vocabulary};

/// Anything that maps an image and a referring embedding to per-pixel logits.
pub trait SegmentationModel {
    fn forward(&self, image: &Image, embedding: &[f64]) -> Result<Vec<f64>>;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    fn param_checksum(&self) -> String {
        self.params().checksum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Channels after the first stride-2 block (also the skip width).
    pub c1: usize,
    /// Channels after the second stride-2 block.
    pub c2: usize,
    /// Channels after fusion with the referring embedding.
    pub fused: usize,
    pub embed_dim: usize,
}

/// Input channels: RGB plus normalized x and y coordinates.
const IN_CHANNELS: usize = 5;

/// Two stride-2 conv blocks, broadcast-concatenation of the referring
/// embedding followed by a 1x1 conv, and two 2x transposed-conv blocks with an
/// additive skip from the first encoder block. Parameters live under `seg.`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRefSegModel {
    pub dims: ModelDims,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelCache {
    h: usize,
    w: usize,
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    fused_in: Vec<f64>,
    a3: Vec<f64>,
    s: Vec<f64>,
}

impl ToyRefSegModel {
    pub fn new(dims: ModelDims) -> Self {
        Self { dims }
    }

    fn conv1(&self) -> Conv2d {
        Conv2d { c_in: IN_CHANNELS, c_out: self.dims.c1, kernel: 3, stride: 2, pad: 1 }
    }

    fn conv2(&self) -> Conv2d {
        Conv2d { c_in: self.dims.c1, c_out: self.dims.c2, kernel: 3, stride: 2, pad: 1 }
    }

    fn fuse(&self) -> Conv2d {
        Conv2d {
            c_in: self.dims.c2 + self.dims.embed_dim,
            c_out: self.dims.fused,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    fn up1(&self) -> Upsample2x {
        Upsample2x { c_in: self.dims.fused, c_out: self.dims.c1 }
    }

    fn up2(&self) -> Upsample2x {
        Upsample2x { c_in: self.dims.c1, c_out: 1 }
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R, params: &mut ParamSet) {
        let mut he = |shape: Vec<usize>, fan_in: usize, gain: f64| {
            let n: usize = shape.iter().product();
            let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("std");
            Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("sized")
        };
        let d = self.dims;
        // Small positive biases keep pre-activations off the ReLU kink at init.
        let bias = |n: usize| Tensor::new(vec![n], vec![0.01; n]).expect("sized");
        params.insert("seg.conv1.w", he(vec![d.c1, IN_CHANNELS, 3, 3], IN_CHANNELS * 9, 1.0));
        params.insert("seg.conv1.b", bias(d.c1));
        params.insert("seg.conv2.w", he(vec![d.c2, d.c1, 3, 3], d.c1 * 9, 1.0));
        params.insert("seg.conv2.b", bias(d.c2));
        params.insert("seg.fuse.w", he(vec![d.fused, d.c2 + d.embed_dim, 1, 1], d.c2 + d.embed_dim, 1.0));
        params.insert("seg.fuse.b", bias(d.fused));
        params.insert("seg.up1.w", he(vec![d.fused, d.c1, 2, 2], d.fused, 1.0));
        params.insert("seg.up1.b", bias(d.c1));
        params.insert("seg.up2.w", he(vec![d.c1, 1, 2, 2], d.c1, 0.5));
        params.insert("seg.up2.b", bias(1));
    }

    fn check_inputs(&self, image: &Image, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.dims.embed_dim {
            return Err(Error::Shape(format!(
                "referring embedding has dim {}, model expects {}",
                embedding.len(),
                self.dims.embed_dim
            )));
        }
        if image.height() % 4 != 0 || image.width() % 4 != 0 || image.height() < 4 {
            return Err(Error::Shape(format!(
                "image {}x{} must have sides divisible by 4",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn input_planes(image: &Image) -> Vec<f64> {
        let (h, w) = (image.height(), image.width());
        let px = image.pixels();
        let mut out = vec![0.0; IN_CHANNELS * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for c in 0..3 {
                    out[c * h * w + i] = px[i * 3 + c];
                }
                out[3 * h * w + i] = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
                out[4 * h * w + i] = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
            }
        }
        out
    }

    pub fn forward_with_cache(&self, params: &ParamSet, image: &Image, embedding: &[f64]) -> Result<(Vec<f64>, ModelCache)> {
        self.check_inputs(image, embedding)?;
        let (h, w) = (image.height(), image.width());
        let p = |n: &str| params.get(n).map(Tensor::data);
        let input = Self::input_planes(image);

        let mut a1 = self.conv1().forward(&input, h, w, p("seg.conv1.w")?, p("seg.conv1.b")?);
        relu_inplace(&mut a1);
        let (h1, w1) = (h / 2, w / 2);
        let mut a2 = self.conv2().forward(&a1, h1, w1, p("seg.conv2.w")?, p("seg.conv2.b")?);
        relu_inplace(&mut a2);
        let (h2, w2) = (h / 4, w / 4);

        let cells = h2 * w2;
        let mut fused_in = Vec::with_capacity((self.dims.c2 + self.dims.embed_dim) * cells);
        fused_in.extend_from_slice(&a2);
        for &e in embedding {
            fused_in.extend(std::iter::repeat(e).take(cells));
        }
        let mut a3 = self.fuse().forward(&fused_in, h2, w2, p("seg.fuse.w")?, p("seg.fuse.b")?);
        relu_inplace(&mut a3);

        let mut s = self.up1().forward(&a3, h2, w2, p("seg.up1.w")?, p("seg.up1.b")?);
        s.iter_mut().zip(&a1).for_each(|(u, skip)| *u += skip);
        relu_inplace(&mut s);
        let logits = self.up2().forward(&s, h1, w1, p("seg.up2.w")?, p("seg.up2.b")?);
        Ok((
            logits,
            ModelCache { h, w, input, a1, a2, fused_in, a3, s },
        ))
    }

    pub fn forward(&self, params: &ParamSet, image: &Image, embedding: &[f64]) -> Result<Vec<f64>> {
        self.forward_with_cache(params, image, embedding).map(|(l, _)| l)
    }

    /// Returns the gradient w.r.t. the referring embedding. Parameter
    /// gradients are accumulated only when `grads` is given; otherwise the
    /// pass stops at the fusion layer.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ModelCache,
        grad_logits: &[f64],
        mut grads: Option<&mut ParamSet>,
    ) -> Result<Vec<f64>> {
        let (h, w) = (cache.h, cache.w);
        let (h1, w1, h2, w2) = (h / 2, w / 2, h / 4, w / 4);
        let p = |n: &str| params.get(n).map(Tensor::data);
        macro_rules! layer_grads {
            ($w:expr, $b:expr) => {
                match grads.as_deref_mut() {
                    Some(g) => {
                        let (gw, gb) = g.pair_mut($w, $b)?;
                        (Some(gw.data_mut()), Some(gb.data_mut()))
                    }
                    None => (None, None),
                }
            };
        }

        let mut ds = {
            let (gw, gb) = layer_grads!("seg.up2.w", "seg.up2.b");
            self.up2().backward(&cache.s, h1, w1, p("seg.up2.w")?, grad_logits, gw, gb)
        };
        relu_backward_inplace(&cache.s, &mut ds);
        let mut da3 = {
            let (gw, gb) = layer_grads!("seg.up1.w", "seg.up1.b");
            self.up1().backward(&cache.a3, h2, w2, p("seg.up1.w")?, &ds, gw, gb)
        };
        relu_backward_inplace(&cache.a3, &mut da3);
        let dfused = {
            let (gw, gb) = layer_grads!("seg.fuse.w", "seg.fuse.b");
            self.fuse().backward(&cache.fused_in, h2, w2, p("seg.fuse.w")?, &da3, gw, gb, true)
        };
        let cells = h2 * w2;
        let c2 = self.dims.c2;
        let grad_embedding: Vec<f64> = (0..self.dims.embed_dim)
            .map(|k| dfused[(c2 + k) * cells..(c2 + k + 1) * cells].iter().sum())
            .collect();

        if grads.is_some() {
            let mut da2 = dfused[..c2 * cells].to_vec();
            relu_backward_inplace(&cache.a2, &mut da2);
            let mut da1 = {
                let (gw, gb) = layer_grads!("seg.conv2.w", "seg.conv2.b");
                self.conv2().backward(&cache.a1, h1, w1, p("seg.conv2.w")?, &da2, gw, gb, true)
            };
            da1.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
            relu_backward_inplace(&cache.a1, &mut da1);
            let (gw, gb) = layer_grads!("seg.conv1.w", "seg.conv1.b");
            self.conv1().backward(&cache.input, h, w, p("seg.conv1.w")?, &da1, gw, gb, false);
        }
        Ok(grad_embedding)
    }
}

/// Mean per-pixel binary cross-entropy on logits.
pub fn seg_loss(logits: &[f64], mask: &Mask) -> Result<f64> {
    seg_loss_with_grad(logits, mask).map(|(l, _)| l)
}

/// Loss and its gradient w.r.t. the logits.
pub fn seg_loss_with_grad(logits: &[f64], mask: &Mask) -> Result<(f64, Vec<f64>)> {
    if logits.len() != mask.bits().len() {
        return Err(Error::Shape(format!(
            "{} logits vs {} mask pixels",
            logits.len(),
            mask.bits().len()
        )));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &m) in logits.iter().zip(mask.bits()) {
        let y = m as f64;
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let sig = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        grad.push((sig - y) / n);
    }
    Ok((total / n, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub max_len: usize,
    pub text_dim: usize,
    pub embed_dim: usize,
    pub c1: usize,
    pub c2: usize,
    pub fused: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            max_len: 12,
            text_dim: 32,
            embed_dim: 32,
            c1: 16,
            c2: 32,
            fused: 32,
        }
    }
}

/// Weak-term weight of the mixed objective and the evaluation threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Logit threshold for binarizing predictions.
    pub threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            threshold: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) || !self.threshold.is_finite() {
            return Err(Error::Config("loss.lambda must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Text encoder, segmentation model and vocabulary with one shared
/// parameter set (`text.*` and `seg.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub encoder: TextEncoder,
    pub model: ToyRefSegModel,
    pub params: ParamSet,
}

impl Network {
    pub fn new<R: Rng>(vocab: Vocabulary, config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        if config.max_len < 3 || config.text_dim == 0 || config.embed_dim == 0 {
            return Err(Error::Config("network dimensions must be positive, max_len >= 3".into()));
        }
        let encoder = TextEncoder::new(EncoderDims {
            vocab_size: vocab.len(),
            dim: config.text_dim,
            out_dim: config.embed_dim,
        });
        let model = ToyRefSegModel::new(ModelDims {
            c1: config.c1,
            c2: config.c2,
            fused: config.fused,
            embed_dim: config.embed_dim,
        });
        let mut params = ParamSet::new();
        encoder.init_params(rng, &mut params);
        model.init_params(rng, &mut params);
        Ok(Self {
            vocab,
            max_len: config.max_len,
            encoder,
            model,
            params,
        })
    }

    /// Rebuilds a network around saved parameters.
    pub fn from_params(vocab: Vocabulary, config: &NetworkConfig, params: ParamSet) -> Result<Self> {
        let mut net = Self::new(vocab, config, &mut crate::rng::stream(0, &[]))?;
        net.params.check_compatible(&params)?;
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> NetworkConfig {
        NetworkConfig {
            max_len: self.max_len,
            text_dim: self.encoder.dims.dim,
            embed_dim: self.encoder.dims.out_dim,
            c1: self.model.dims.c1,
            c2: self.model.dims.c2,
            fused: self.model.dims.fused,
        }
    }

    pub fn tokenize(&self, expression: &str) -> Result<Tokens> {
        tokenize(expression, &self.vocab, self.max_len)
    }

    pub fn embed(&self, tokens: &Tokens) -> Result<TokenSequence> {
        self.encoder.embed(&self.params, tokens)
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        self.encoder.encode(&self.params, seq)
    }

    pub fn encode_with_cache(&self, seq: &TokenSequence) -> Result<(Vec<f64>, EncodeCache)> {
        self.encoder.encode_with_cache(&self.params, seq)
    }

    /// Plain referring embedding of an expression.
    pub fn referring_embedding(&self, expression: &str) -> Result<Vec<f64>> {
        let tokens = self.tokenize(expression)?;
        self.encode(&self.embed(&tokens)?)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

impl SegmentationModel for Network {
    fn forward(&self, image: &Image, embedding: &[f64]) -> Result<Vec<f64>> {
        self.model.forward(&self.params, image, embedding)
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// One sample of a training batch and the embedding it should be scored with.
pub enum BatchEntry<'a> {
    Accurate(&'a ReferringSample),
    /// Weak sample with its prompt rows (`p x d`), or `None` to use the plain
    /// class-name embedding.
    Weak(&'a ReferringSample, Option<&'a [f64]>),
}

/// Mixed objective: mean accurate loss plus `lambda` times mean weak loss.
/// An empty side contributes nothing and skips its normalizer.
pub fn mixed_loss(batch: &[BatchEntry<'_>], net: &Network, lambda: f64) -> Result<f64> {
    let mut acc = (0.0, 0usize);
    let mut weak = (0.0, 0usize);
    for entry in batch {
        match entry {
            BatchEntry::Accurate(s) => {
                let r = net.referring_embedding(&s.expression)?;
                acc.0 += seg_loss(&net.forward(&s.image, &r)?, &s.mask)?;
                acc.1 += 1;
            }
            BatchEntry::Weak(s, prompts) => {
                let tokens = net.tokenize(&s.expression)?;
                let seq = net.embed(&tokens)?;
                let r = match prompts {
                    Some(p) => crate::lrb::enhance(&seq, p, net)?,
                    None => net.encode(&seq)?,
                };
                weak.0 += seg_loss(&net.forward(&s.image, &r)?, &s.mask)?;
                weak.1 += 1;
            }
        }
    }
    if acc.1 == 0 && weak.1 == 0 {
        return Err(Error::InvalidInput("mixed loss over an empty batch".into()));
    }
    let mut total = 0.0;
    if acc.1 > 0 {
        total += acc.0 / acc.1 as f64;
    }
    if weak.1 > 0 {
        total += lambda * weak.0 / weak.1 as f64;
    }
    Ok(total)
}
