//! Image encoder, atlas label encoder, channel-attention prompt encoder and
//! mask decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    avgpool, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid, Conv2d, ConvTranspose2x2, Grads, Linear,
    ParamSet,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::prompt::{BoxPrompt, PromptStack, PromptStatus, N_GA};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Side of the square input slice.
    pub slice_size: usize,
    /// Conv widths of the encoder stages, shared by both encoders.
    pub encoder_widths: Vec<usize>,
    /// Whether a 2×2 max-pool precedes each stage.
    pub encoder_pools: Vec<bool>,
    pub embed_dim: usize,
    pub attention_reduction: usize,
    /// Stem width followed by one width per upsampling stage.
    pub decoder_widths: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            slice_size: 1024,
            encoder_widths: vec![64, 128, 256, 256],
            encoder_pools: vec![true; 4],
            embed_dim: 256,
            attention_reduction: 16,
            decoder_widths: vec![128, 64, 32, 16, 8],
        }
    }
}

impl NetworkConfig {
    /// Desk-scale network for slices of side `slice_size` (1/4 resolution
    /// embeddings).
    pub fn toy(slice_size: usize) -> Self {
        Self {
            slice_size,
            encoder_widths: vec![16, 32, 32, 32],
            encoder_pools: vec![false, true, true, false],
            embed_dim: 32,
            attention_reduction: 16,
            decoder_widths: vec![32, 16, 8],
        }
    }

    /// Tiny network used for gradient checks.
    pub fn micro() -> Self {
        Self {
            slice_size: 8,
            encoder_widths: vec![2, 2],
            encoder_pools: vec![true, false],
            embed_dim: 2,
            attention_reduction: 4,
            decoder_widths: vec![2, 2],
        }
    }

    pub fn n_pools(&self) -> usize {
        self.encoder_pools.iter().filter(|&&p| p).count()
    }

    pub fn downsample(&self) -> usize {
        1 << self.n_pools()
    }

    pub fn embed_size(&self) -> usize {
        self.slice_size / self.downsample()
    }

    pub fn attention_hidden(&self) -> usize {
        (2 * N_GA * self.embed_dim / self.attention_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("network config: {m}")));
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.encoder_pools.len() {
            return bad("encoder_widths and encoder_pools must be nonempty and of equal length");
        }
        if self.decoder_widths.len() != self.n_pools() + 1 {
            return bad("decoder_widths needs one entry more than the number of pools");
        }
        if self.slice_size == 0 || self.slice_size % self.downsample() != 0 {
            return bad("slice_size must be a positive multiple of the encoder downsampling");
        }
        if self.embed_dim == 0
            || self.attention_reduction == 0
            || self.encoder_widths.contains(&0)
            || self.decoder_widths.contains(&0)
        {
            return bad("widths must be positive");
        }
        Ok(())
    }
}

/// Stages of (optional max-pool, 3×3 conv, ReLU) and a linear 1×1 head.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    stages: Vec<(bool, Conv2d)>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderCache {
    pools: Vec<Option<([usize; 3], Vec<usize>)>>,
    conv_in: Vec<Tensor>,
    conv_out: Vec<Tensor>,
}

impl ConvEncoder {
    fn new(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cfg: &NetworkConfig) -> Self {
        let mut cin = 1;
        let stages = cfg
            .encoder_widths
            .iter()
            .zip(&cfg.encoder_pools)
            .enumerate()
            .map(|(i, (&w, &pool))| {
                let conv = Conv2d::new(p, rng, &format!("{name}.stage{i}"), cin, w, 3);
                cin = w;
                (pool, conv)
            })
            .collect();
        let head = Conv2d::new(p, rng, &format!("{name}.head"), cin, cfg.embed_dim, 1);
        Self { stages, head }
    }

    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (pool, conv) in &self.stages {
            if *pool {
                h = maxpool2(&h).0;
            }
            h = relu(conv.forward(p, &h));
        }
        self.head.forward(p, &h)
    }

    pub(crate) fn forward_cached(&self, p: &ParamSet, x: &Tensor) -> (Tensor, EncoderCache) {
        let mut cache = EncoderCache {
            pools: Vec::new(),
            conv_in: Vec::new(),
            conv_out: Vec::new(),
        };
        let mut h = x.clone();
        for (pool, conv) in &self.stages {
            if *pool {
                let (y, arg) = maxpool2(&h);
                cache.pools.push(Some((h.shape(), arg)));
                h = y;
            } else {
                cache.pools.push(None);
            }
            let y = relu(conv.forward(p, &h));
            cache.conv_in.push(h);
            h = y.clone();
            cache.conv_out.push(y);
        }
        (self.head.forward(p, &h), cache)
    }

    /// Parameter gradients only; encoder inputs are data.
    pub(crate) fn backward(&self, p: &ParamSet, cache: &EncoderCache, dy: &Tensor, g: &mut Grads) {
        let last = cache.conv_out.last().unwrap();
        let mut d = self.head.backward(p, last, dy, g, true).unwrap();
        for i in (0..self.stages.len()).rev() {
            d = relu_backward(&cache.conv_out[i], d);
            let need = i > 0;
            match self.stages[i].1.backward(p, &cache.conv_in[i], &d, g, need) {
                Some(dx) => d = dx,
                None => return,
            }
            if let Some((shape, arg)) = &cache.pools[i] {
                d = maxpool2_backward(*shape, arg, &d);
            }
        }
    }
}

/// Channel attention over the six concatenated embeddings followed by two
/// 3×3 fusion convolutions.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    fc1: Linear,
    fc2: Linear,
    fuse1: Conv2d,
    fuse2: Conv2d,
    channels: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct PromptCache {
    x: Tensor,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    weights: Vec<f64>,
    scaled: Tensor,
    f1: Tensor,
    out: Tensor,
}

impl PromptEncoder {
    fn new(p: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Self {
        let c = 2 * N_GA * cfg.embed_dim;
        let hid = cfg.attention_hidden();
        Self {
            fc1: Linear::new(p, rng, "prompt_encoder.attention.fc1", c, hid),
            fc2: Linear::new(p, rng, "prompt_encoder.attention.fc2", hid, c),
            fuse1: Conv2d::new(p, rng, "prompt_encoder.fuse1", c, cfg.embed_dim, 3),
            fuse2: Conv2d::new(p, rng, "prompt_encoder.fuse2", cfg.embed_dim, cfg.embed_dim, 3),
            channels: c,
        }
    }

    pub fn attention_weights(&self, p: &ParamSet, x: &Tensor) -> Vec<f64> {
        self.attend(p, x).2
    }

    fn attend(&self, p: &ParamSet, x: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = x.plane() as f64;
        let pooled: Vec<f64> = (0..x.c).map(|k| x.channel(k).iter().sum::<f64>() / n).collect();
        let hidden: Vec<f64> = self.fc1.forward(p, &pooled).into_iter().map(|v| v.max(0.0)).collect();
        let weights = self.fc2.forward(p, &hidden).into_iter().map(sigmoid).collect();
        (pooled, hidden, weights)
    }

    pub(crate) fn forward_cached(&self, p: &ParamSet, x: Tensor) -> PromptCache {
        assert_eq!(x.c, self.channels, "prompt encoder input channels");
        let (pooled, hidden, weights) = self.attend(p, &x);
        let mut scaled = x.clone();
        let n = x.plane();
        for (k, w) in weights.iter().enumerate() {
            scaled.data[k * n..(k + 1) * n].iter_mut().for_each(|v| *v *= w);
        }
        let f1 = relu(self.fuse1.forward(p, &scaled));
        let out = relu(self.fuse2.forward(p, &f1));
        PromptCache {
            x,
            pooled,
            hidden,
            weights,
            scaled,
            f1,
            out,
        }
    }

    /// Returns the gradient with respect to the concatenated input.
    pub(crate) fn backward(&self, p: &ParamSet, c: &PromptCache, dy: Tensor, g: &mut Grads) -> Tensor {
        let d = relu_backward(&c.out, dy);
        let d = self.fuse2.backward(p, &c.f1, &d, g, true).unwrap();
        let d = relu_backward(&c.f1, d);
        let dscaled = self.fuse1.backward(p, &c.scaled, &d, g, true).unwrap();
        let n = c.x.plane();
        let mut dx = dscaled.clone();
        let mut dz2 = vec![0.0; self.channels];
        for k in 0..self.channels {
            let w = c.weights[k];
            let dw: f64 = dscaled.channel(k).iter().zip(c.x.channel(k)).map(|(a, b)| a * b).sum();
            dz2[k] = dw * w * (1.0 - w);
            dx.data[k * n..(k + 1) * n].iter_mut().for_each(|v| *v *= w);
        }
        let mut dh = self.fc2.backward(p, &c.hidden, &dz2, g);
        for (d, &h) in dh.iter_mut().zip(&c.hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let ds = self.fc1.backward(p, &c.pooled, &dh, g);
        for k in 0..self.channels {
            let add = ds[k] / n as f64;
            dx.data[k * n..(k + 1) * n].iter_mut().for_each(|v| *v += add);
        }
        dx
    }
}

/// Upsampling decoder on `[image embedding, dense prompt, box]`.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    stem: Conv2d,
    ups: Vec<(ConvTranspose2x2, Conv2d)>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderCache {
    input: Tensor,
    stem_out: Tensor,
    up_out: Vec<Tensor>,
    conv_out: Vec<Tensor>,
}

impl MaskDecoder {
    fn new(p: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Self {
        let w = &cfg.decoder_widths;
        let stem = Conv2d::new(p, rng, "decoder.stem", 2 * cfg.embed_dim + 1, w[0], 3);
        let ups = (0..cfg.n_pools())
            .map(|i| {
                (
                    ConvTranspose2x2::new(p, rng, &format!("decoder.up{i}"), w[i], w[i + 1]),
                    Conv2d::new(p, rng, &format!("decoder.conv{i}"), w[i + 1], w[i + 1], 3),
                )
            })
            .collect();
        let head = Conv2d::new(p, rng, "decoder.head", *w.last().unwrap(), 1, 1);
        Self { stem, ups, head }
    }

    pub(crate) fn forward_cached(&self, p: &ParamSet, input: Tensor) -> (Tensor, DecoderCache) {
        let stem_out = relu(self.stem.forward(p, &input));
        let mut h = stem_out.clone();
        let (mut up_out, mut conv_out) = (Vec::new(), Vec::new());
        for (up, conv) in &self.ups {
            let u = relu(up.forward(p, &h));
            h = relu(conv.forward(p, &u));
            up_out.push(u);
            conv_out.push(h.clone());
        }
        let logits = self.head.forward(p, &h);
        (
            logits,
            DecoderCache {
                input,
                stem_out,
                up_out,
                conv_out,
            },
        )
    }

    pub(crate) fn backward(&self, p: &ParamSet, c: &DecoderCache, dlogits: &Tensor, g: &mut Grads) -> Tensor {
        let last = c.conv_out.last().unwrap_or(&c.stem_out);
        let mut d = self.head.backward(p, last, dlogits, g, true).unwrap();
        for i in (0..self.ups.len()).rev() {
            let (up, conv) = &self.ups[i];
            d = relu_backward(&c.conv_out[i], d);
            d = conv.backward(p, &c.up_out[i], &d, g, true).unwrap();
            d = relu_backward(&c.up_out[i], d);
            let prev = if i == 0 { &c.stem_out } else { &c.conv_out[i - 1] };
            d = up.backward(p, prev, &d, g);
        }
        d = relu_backward(&c.stem_out, d);
        self.stem.backward(p, &c.input, &d, g, true).unwrap()
    }
}

/// Network inputs for one slice: subject and atlas images, binary atlas
/// label templates and the rasterized box, all `1×S×S`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput {
    pub subject: Tensor,
    pub atlas_images: Vec<Tensor>,
    pub atlas_labels: Vec<Tensor>,
    pub box_mask: Tensor,
}

impl SampleInput {
    pub fn from_stack(stack: &PromptStack, bx: &BoxPrompt) -> Result<Self> {
        if bx.status == PromptStatus::UnderPrompt {
            return Err(Error::UnderPrompt);
        }
        let size = stack.subject().size;
        let raster = bx.rasterize(size);
        let s = Self {
            subject: Tensor::from_slice(stack.subject()),
            atlas_images: (0..N_GA).map(|k| Tensor::from_slice(stack.atlas_image(k))).collect(),
            atlas_labels: (0..N_GA).map(|k| Tensor::from_slice(stack.atlas_label(k))).collect(),
            box_mask: Tensor::from_vec(1, size, size, raster.iter().map(|&v| v as f64).collect()),
        };
        s.check(size)?;
        Ok(s)
    }

    pub fn check(&self, size: usize) -> Result<()> {
        if self.atlas_images.len() != N_GA || self.atlas_labels.len() != N_GA {
            return Err(Error::ShapeMismatch(format!("expected {N_GA} atlas images and labels")));
        }
        let all = std::iter::once(&self.subject)
            .chain(&self.atlas_images)
            .chain(&self.atlas_labels)
            .chain(std::iter::once(&self.box_mask));
        for t in all {
            if t.shape() != [1, size, size] {
                return Err(Error::ShapeMismatch(format!(
                    "input of shape {:?}, network expects [1, {size}, {size}]",
                    t.shape()
                )));
            }
        }
        for t in self.atlas_labels.iter().chain(std::iter::once(&self.box_mask)) {
            check_binary(t)?;
        }
        Ok(())
    }
}

pub(crate) fn check_binary(t: &Tensor) -> Result<()> {
    match t.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::NonBinary(format!("value {v} in a binary map"))),
        None => Ok(()),
    }
}

/// Image-encoder outputs for a sample, reusable while the encoder is frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbeddings {
    pub subject: Tensor,
    pub atlases: Vec<Tensor>,
}

pub(crate) struct ForwardCache {
    image: Option<Vec<EncoderCache>>,
    labels: Vec<EncoderCache>,
    prompt: PromptCache,
    decoder: DecoderCache,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamSet,
    image_encoder: ConvEncoder,
    label_encoder: ConvEncoder,
    prompt_encoder: PromptEncoder,
    decoder: MaskDecoder,
    image_params: usize,
}

impl Network {
    /// He-normal weights and zero biases from a seeded stream.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::default();
        let image_encoder = ConvEncoder::new(&mut p, &mut rng, "image_encoder", &config);
        let image_params = p.len();
        let label_encoder = ConvEncoder::new(&mut p, &mut rng, "label_encoder", &config);
        let prompt_encoder = PromptEncoder::new(&mut p, &mut rng, &config);
        let decoder = MaskDecoder::new(&mut p, &mut rng, &config);
        Ok(Self {
            config,
            params: p,
            image_encoder,
            label_encoder,
            prompt_encoder,
            decoder,
            image_params,
        })
    }

    /// Whether parameter `i` belongs to the image encoder.
    pub fn is_image_param(&self, i: usize) -> bool {
        i < self.image_params
    }

    /// sha256 over parameter names and shapes.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, s) in self.params.names.iter().zip(&self.params.shapes) {
            h.update(n.as_bytes());
            h.update(format!("{s:?};").as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.config.slice_size;
        if x.shape() != [1, s, s] {
            return Err(Error::ShapeMismatch(format!("slice {:?}, expected [1, {s}, {s}]", x.shape())));
        }
        Ok(())
    }

    pub fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.image_encoder.forward(&self.params, x))
    }

    pub fn encode_label_template(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        check_binary(x)?;
        Ok(self.label_encoder.forward(&self.params, x))
    }

    pub fn embed_images(&self, s: &SampleInput) -> Result<ImageEmbeddings> {
        Ok(ImageEmbeddings {
            subject: self.encode_image(&s.subject)?,
            atlases: s.atlas_images.iter().map(|a| self.encode_image(a)).collect::<Result<_>>()?,
        })
    }

    fn check_embeddings(&self, e: &[&Tensor], count: usize) -> Result<()> {
        if e.len() != count {
            return Err(Error::ShapeMismatch(format!("expected {count} embeddings, got {}", e.len())));
        }
        let want = [self.config.embed_dim, self.config.embed_size(), self.config.embed_size()];
        for t in e {
            if t.shape() != want {
                return Err(Error::ShapeMismatch(format!("embedding {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Dense prompt from per-slot image and label embeddings, in GA order.
    pub fn build_dense_prompt(&self, images: &[&Tensor], labels: &[&Tensor]) -> Result<Tensor> {
        self.check_embeddings(images, N_GA)?;
        self.check_embeddings(labels, N_GA)?;
        let x = self.interleave(images, labels);
        Ok(self.prompt_encoder.forward_cached(&self.params, x).out)
    }

    /// Channel attention weights for the concatenated embeddings.
    pub fn attention_weights(&self, images: &[&Tensor], labels: &[&Tensor]) -> Result<Vec<f64>> {
        self.check_embeddings(images, N_GA)?;
        self.check_embeddings(labels, N_GA)?;
        Ok(self.prompt_encoder.attention_weights(&self.params, &self.interleave(images, labels)))
    }

    fn interleave(&self, images: &[&Tensor], labels: &[&Tensor]) -> Tensor {
        let parts: Vec<&Tensor> = images.iter().zip(labels).flat_map(|(a, b)| [*a, *b]).collect();
        Tensor::concat(&parts)
    }

    /// Box raster averaged down to embedding resolution.
    fn box_channel(&self, box_mask: &Tensor) -> Tensor {
        avgpool(box_mask, self.config.downsample())
    }

    /// Full-resolution logits from embeddings, prompt and box raster.
    pub fn decode_mask(&self, image_embedding: &Tensor, dense_prompt: &Tensor, box_mask: &Tensor) -> Result<Tensor> {
        self.check_embeddings(&[image_embedding, dense_prompt], 2)?;
        self.check_input(box_mask)?;
        check_binary(box_mask)?;
        let input = Tensor::concat(&[image_embedding, dense_prompt, &self.box_channel(box_mask)]);
        Ok(self.decoder.forward_cached(&self.params, input).0)
    }

    /// Logits for one sample. `embeddings` skips the image encoder.
    pub fn forward(&self, s: &SampleInput, embeddings: Option<&ImageEmbeddings>) -> Result<Tensor> {
        s.check(self.config.slice_size)?;
        Ok(self.forward_cached(s, embeddings, false).0)
    }

    pub(crate) fn forward_cached(
        &self,
        s: &SampleInput,
        embeddings: Option<&ImageEmbeddings>,
        train_image: bool,
    ) -> (Tensor, ForwardCache) {
        let p = &self.params;
        let (img, image_cache) = match (embeddings, train_image) {
            (Some(e), false) => (std::iter::once(e.subject.clone()).chain(e.atlases.iter().cloned()).collect(), None),
            (None, false) => (
                std::iter::once(&s.subject)
                    .chain(&s.atlas_images)
                    .map(|x| self.image_encoder.forward(p, x))
                    .collect::<Vec<_>>(),
                None,
            ),
            (_, true) => {
                let (outs, caches): (Vec<_>, Vec<_>) = std::iter::once(&s.subject)
                    .chain(&s.atlas_images)
                    .map(|x| self.image_encoder.forward_cached(p, x))
                    .unzip();
                (outs, Some(caches))
            }
        };
        let (lab, label_caches): (Vec<_>, Vec<_>) =
            s.atlas_labels.iter().map(|x| self.label_encoder.forward_cached(p, x)).unzip();
        let img_refs: Vec<&Tensor> = img[1..].iter().collect();
        let lab_refs: Vec<&Tensor> = lab.iter().collect();
        let prompt = self.prompt_encoder.forward_cached(p, self.interleave(&img_refs, &lab_refs));
        let input = Tensor::concat(&[&img[0], &prompt.out, &self.box_channel(&s.box_mask)]);
        let (logits, decoder) = self.decoder.forward_cached(p, input);
        (
            logits,
            ForwardCache {
                image: image_cache,
                labels: label_caches,
                prompt,
                decoder,
            },
        )
    }

    pub(crate) fn backward(&self, c: ForwardCache, dlogits: &Tensor, g: &mut Grads) {
        let p = &self.params;
        let e = self.config.embed_dim;
        let din = self.decoder.backward(p, &c.decoder, dlogits, g);
        let mut parts = din.split(&[e, e, 1]).into_iter();
        let d_subject = parts.next().unwrap();
        let d_prompt = parts.next().unwrap();
        let dx = self.prompt_encoder.backward(p, &c.prompt, d_prompt, g);
        let slots = dx.split(&[e; 2 * N_GA]);
        for k in 0..N_GA {
            self.label_encoder.backward(p, &c.labels[k], &slots[2 * k + 1], g);
        }
        if let Some(img) = &c.image {
            self.image_encoder.backward(p, &img[0], &d_subject, g);
            for k in 0..N_GA {
                self.image_encoder.backward(p, &img[k + 1], &slots[2 * k], g);
            }
        }
    }
}
