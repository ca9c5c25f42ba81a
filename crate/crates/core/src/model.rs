//! Toy model zoo: a tiny vision transformer and a tiny MLP baseline.
//!
//! Every weight lives in a named, ordered parameter registry so that flips
//! can address any single f32 by `(layer_name, flat_index)`. Initialization,
//! dataset synthesis, and training are all seeded and bit-reproducible.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::bitflip::BitFlipSpec;
use crate::defenses::{BfatConfig, TransientFlip};
use crate::error::{Error, Result};
use crate::tensor::{layer_norm_row, matmul_raw, softmax_row, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;
/// Hidden width of transformer MLP blocks, as a multiple of embed_dim.
const MLP_RATIO: usize = 2;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    TinyVit,
    TinyMlp,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::TinyVit => "tiny_vit",
            Arch::TinyMlp => "tiny_mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny_vit" => Ok(Arch::TinyVit),
            "tiny_mlp" => Ok(Arch::TinyMlp),
            other => Err(Error::Config(format!("unknown arch '{other}'"))),
        }
    }
}

/// Token pooling ahead of the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    /// Mean over all tokens (default; spreads damage across the sequence).
    Mean,
    /// A dedicated class token carries the whole representation.
    Cls,
}

impl Pool {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pool::Mean => "mean",
            Pool::Cls => "cls",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pool::Mean),
            "cls" => Ok(Pool::Cls),
            other => Err(Error::Config(format!("unknown pool '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    /// Width of the classifier head input. Equals `embed_dim` for tiny_vit;
    /// free for tiny_mlp, where it is the width of the last hidden layer.
    pub head_in_features: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub pool: Pool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn tiny_vit(image_size: usize, patch_size: usize, embed_dim: usize, num_heads: usize, depth: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            arch: Arch::TinyVit,
            image_size,
            patch_size,
            embed_dim,
            num_heads,
            depth,
            head_in_features: embed_dim,
            num_classes,
            channels: 1,
            pool: Pool::Mean,
            seed,
        }
    }

    pub fn tiny_mlp(image_size: usize, hidden: usize, head_in_features: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            arch: Arch::TinyMlp,
            image_size,
            patch_size: image_size,
            embed_dim: hidden,
            num_heads: 1,
            depth: 0,
            head_in_features,
            num_classes,
            channels: 1,
            pool: Pool::Mean,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("head_in_features", self.head_in_features),
            ("num_classes", self.num_classes),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.arch == Arch::TinyVit {
            if self.image_size % self.patch_size != 0 {
                return Err(Error::Config(format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                )));
            }
            if self.embed_dim % self.num_heads != 0 {
                return Err(Error::Config(format!(
                    "embed_dim {} not divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                )));
            }
            if self.head_in_features != self.embed_dim {
                return Err(Error::Config(format!(
                    "tiny_vit requires head_in_features == embed_dim ({} != {})",
                    self.head_in_features, self.embed_dim
                )));
            }
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens, not counting an optional class token.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length seen by the transformer blocks.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + if self.pool == Pool::Cls { 1 } else { 0 }
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * MLP_RATIO
    }

    pub fn pixel_count(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

/// Ordered, uniquely named weight tensors. Iteration order is creation
/// order, stable across runs; every scalar is addressable by
/// `(layer_name, flat_index)`.
#[derive(Debug, Clone)]
pub struct ParamRegistry {
    entries: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate layer name '{name}'")));
        }
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.by_name.get(name).copied().map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Byte image of every tensor, in registry order.
    pub fn snapshot(&self) -> RegistrySnapshot {
        RegistrySnapshot {
            tensors: self.entries.iter().map(|(_, t)| t.to_le_bytes()).collect(),
        }
    }

    /// Write a snapshot back. The registry must have the same layout the
    /// snapshot was taken from.
    pub fn restore(&mut self, snap: &RegistrySnapshot) -> Result<()> {
        if snap.tensors.len() != self.entries.len() {
            return Err(Error::Dimension("snapshot layout mismatch".into()));
        }
        for ((_, tensor), bytes) in self.entries.iter_mut().zip(&snap.tensors) {
            match tensor.dtype() {
                crate::tensor::DType::F32 => {
                    let data = tensor.as_f32_mut()?;
                    if bytes.len() != data.len() * 4 {
                        return Err(Error::Dimension("snapshot tensor size mismatch".into()));
                    }
                    for (v, chunk) in data.iter_mut().zip(bytes.chunks_exact(4)) {
                        *v = f32::from_bits(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
                    }
                }
                crate::tensor::DType::I8 => {
                    let data = tensor.as_i8_mut()?;
                    if bytes.len() != data.len() {
                        return Err(Error::Dimension("snapshot tensor size mismatch".into()));
                    }
                    for (v, &b) in data.iter_mut().zip(bytes.iter()) {
                        *v = b as i8;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Frozen byte image of a registry, for byte-exact restore and comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrySnapshot {
    pub tensors: Vec<Vec<u8>>,
}

/// Anything that exposes a parameter registry (f32 and quantized models).
pub trait Parameterized {
    fn registry(&self) -> &ParamRegistry;
    fn registry_mut(&mut self) -> &mut ParamRegistry;
}

/// Anything that classifies images.
pub trait Classifier {
    fn forward(&self, pixels: &[u8]) -> Result<Vec<f32>>;
    fn num_classes(&self) -> usize;
}

/// Argmax with deterministic tie-breaking: lowest class index wins; NaN
/// logits never win; an all-NaN row predicts class 0.
pub fn argmax_class(logits: &[f32]) -> usize {
    let mut best: Option<usize> = None;
    for (c, &v) in logits.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            None => best = Some(c),
            Some(b) => {
                if v > logits[b] {
                    best = Some(c);
                }
            }
        }
    }
    best.unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Labeled u8 image batch, NHWC row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    pixels: Vec<u8>,
    labels: Vec<u16>,
    num_classes: u16,
}

impl Dataset {
    pub fn new(
        pixels: Vec<u8>,
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        labels: Vec<u16>,
        num_classes: u16,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Data("dataset must contain at least one sample".into()));
        }
        if pixels.len() != n * h * w * c {
            return Err(Error::Data(format!(
                "pixel buffer length {} does not match {n}x{h}x{w}x{c}",
                pixels.len()
            )));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} samples", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self { n, h, w, c, pixels, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.h * self.w * self.c;
        &self.pixels[i * sz..(i + 1) * sz]
    }

    pub fn label(&self, i: usize) -> u16 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Clone the samples at `idx`, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::Data("empty selection".into()));
        }
        let sz = self.h * self.w * self.c;
        let mut pixels = Vec::with_capacity(idx.len() * sz);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(pixels, idx.len(), self.h, self.w, self.c, labels, self.num_classes)
    }

    /// Replace every label (used by poisoning).
    pub(crate) fn with_labels(&self, labels: Vec<u16>) -> Result<Dataset> {
        Dataset::new(
            self.pixels.clone(),
            self.n,
            self.h,
            self.w,
            self.c,
            labels,
            self.num_classes,
        )
    }

    pub(crate) fn with_pixels(&self, pixels: Vec<u8>, labels: Vec<u16>) -> Result<Dataset> {
        Dataset::new(pixels, self.n, self.h, self.w, self.c, labels, self.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Gaussian intensity blobs, one grid cell per class. Linearly separable.
    Blobs,
    /// Horizontal vs vertical stripes; two classes.
    Stripes,
    /// Diagonal vs anti-diagonal bright quadrants; two classes, not linearly
    /// separable.
    Xor,
}

impl SynthKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthKind::Blobs => "blobs",
            SynthKind::Stripes => "stripes",
            SynthKind::Xor => "xor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "stripes" => Ok(SynthKind::Stripes),
            "xor" => Ok(SynthKind::Xor),
            other => Err(Error::Config(format!("unknown synthetic dataset kind '{other}'"))),
        }
    }
}

/// Generate a class-balanced synthetic dataset. Sample `i` has label
/// `i % num_classes`, so class counts differ by at most one.
pub fn synth_dataset(
    kind: SynthKind,
    n: usize,
    image_size: usize,
    num_classes: u16,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Data("need at least two classes".into()));
    }
    if n < 2 * num_classes as usize {
        return Err(Error::Data(format!(
            "n = {n} too small: need at least 2 samples per class ({num_classes} classes)"
        )));
    }
    match kind {
        SynthKind::Stripes | SynthKind::Xor => {
            if num_classes != 2 {
                return Err(Error::Data(format!(
                    "{} supports exactly 2 classes, got {num_classes}",
                    kind.as_str()
                )));
            }
        }
        SynthKind::Blobs => {}
    }

    let s = image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);

    // Blob centers on a ceil(sqrt(k)) grid of cells.
    let grid = (num_classes as f64).sqrt().ceil() as usize;
    let sigma = s as f64 / (3.0 * grid as f64);

    for i in 0..n {
        let class = (i % num_classes as usize) as u16;
        labels.push(class);
        match kind {
            SynthKind::Blobs => {
                let cell_x = (class as usize % grid) as f64;
                let cell_y = (class as usize / grid) as f64;
                let cx = (cell_x + 0.5) * s as f64 / grid as f64 + rng.gen_range(-1.0..1.0);
                let cy = (cell_y + 0.5) * s as f64 / grid as f64 + rng.gen_range(-1.0..1.0);
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let v = 40.0 + 190.0 * (-d2 / (2.0 * sigma * sigma)).exp()
                            + rng.gen_range(-10.0..10.0);
                        pixels.push(v.clamp(0.0, 255.0) as u8);
                    }
                }
            }
            SynthKind::Stripes => {
                let period = 4.0;
                let phase: f64 = rng.gen_range(0.0..period);
                for y in 0..s {
                    for x in 0..s {
                        let coord = if class == 0 { y as f64 } else { x as f64 };
                        let on = ((coord + phase) / period).floor() as i64 % 2 == 0;
                        let v = if on { 200.0 } else { 40.0 } + rng.gen_range(-15.0..15.0);
                        pixels.push(v.clamp(0.0, 255.0) as u8);
                    }
                }
            }
            SynthKind::Xor => {
                let half = s / 2;
                for y in 0..s {
                    for x in 0..s {
                        let qx = (x >= half) as u8;
                        let qy = (y >= half) as u8;
                        let diag = qx == qy;
                        let on = if class == 0 { diag } else { !diag };
                        let v = if on { 200.0 } else { 40.0 } + rng.gen_range(-15.0..15.0);
                        pixels.push(v.clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
    }
    Dataset::new(pixels, n, s, s, 1, labels, num_classes)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamRegistry,
}

impl Parameterized for Model {
    fn registry(&self) -> &ParamRegistry {
        &self.params
    }

    fn registry_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }
}

impl Classifier for Model {
    fn forward(&self, pixels: &[u8]) -> Result<Vec<f32>> {
        forward_registry(&self.config, &self.params, pixels)
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

/// Build a model with seeded Glorot-uniform weights:
/// `a = sqrt(6 / (fan_in + fan_out))`, entries uniform in (-a, a). Norm
/// scales start at 1, offsets at 0. Identical seeds give byte-identical
/// registries.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamRegistry::new();

    let mut glorot = |params: &mut ParamRegistry, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Result<()> {
        let a = (6.0 / (rows + cols) as f32).sqrt();
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        params.push(name, Tensor::new(vec![rows, cols], data)?)
    };
    let ones = |params: &mut ParamRegistry, name: &str, n: usize| -> Result<()> {
        params.push(name, Tensor::new(vec![n], vec![1.0; n])?)
    };
    let zeros = |params: &mut ParamRegistry, name: &str, n: usize| -> Result<()> {
        params.push(name, Tensor::new(vec![n], vec![0.0; n])?)
    };

    match config.arch {
        Arch::TinyVit => {
            let d = config.embed_dim;
            glorot(&mut params, "patch_embed", config.patch_dim(), d, &mut rng)?;
            if config.pool == Pool::Cls {
                glorot(&mut params, "cls_token", 1, d, &mut rng)?;
            }
            glorot(&mut params, "pos_embed", config.num_tokens(), d, &mut rng)?;
            for k in 0..config.depth {
                ones(&mut params, &format!("block{k}_norm1_gamma"), d)?;
                zeros(&mut params, &format!("block{k}_norm1_beta"), d)?;
                glorot(&mut params, &format!("block{k}_attn_qkv"), d, 3 * d, &mut rng)?;
                glorot(&mut params, &format!("block{k}_attn_proj"), d, d, &mut rng)?;
                ones(&mut params, &format!("block{k}_norm2_gamma"), d)?;
                zeros(&mut params, &format!("block{k}_norm2_beta"), d)?;
                glorot(&mut params, &format!("block{k}_mlp_fc1"), d, config.mlp_hidden(), &mut rng)?;
                glorot(&mut params, &format!("block{k}_mlp_fc2"), config.mlp_hidden(), d, &mut rng)?;
            }
            ones(&mut params, "norm_gamma", d)?;
            zeros(&mut params, "norm_beta", d)?;
            glorot(&mut params, "head_fc", d, config.num_classes, &mut rng)?;
        }
        Arch::TinyMlp => {
            glorot(&mut params, "mlp_fc1", config.pixel_count(), config.embed_dim, &mut rng)?;
            glorot(&mut params, "mlp_fc2", config.embed_dim, config.head_in_features, &mut rng)?;
            glorot(&mut params, "head_fc", config.head_in_features, config.num_classes, &mut rng)?;
        }
    }

    Ok(Model { config: config.clone(), params })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }

    /// Rebuild from deserialized parts; shapes are validated against the
    /// config's expected registry layout.
    pub fn from_parts(config: ModelConfig, params: ParamRegistry) -> Result<Self> {
        config.validate()?;
        let expect = init_model(&config)?;
        if expect.params.len() != params.len() {
            return Err(Error::Format(format!(
                "registry has {} tensors, config implies {}",
                params.len(),
                expect.params.len()
            )));
        }
        for ((en, et), (gn, gt)) in expect.params.iter().zip(params.iter()) {
            if en != gn || et.shape() != gt.shape() {
                return Err(Error::Format(format!(
                    "tensor '{gn}' {:?} does not match expected '{en}' {:?}",
                    gt.shape(),
                    et.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.total_elems()
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

fn pixels_to_patches(cfg: &ModelConfig, pixels: &[u8]) -> Result<Vec<f32>> {
    if pixels.len() != cfg.pixel_count() {
        return Err(Error::Dimension(format!(
            "image has {} bytes, model expects {}",
            pixels.len(),
            cfg.pixel_count()
        )));
    }
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let grid = cfg.grid();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..grid {
        for px in 0..grid {
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        let y = py * p + dy;
                        let x = px * p + dx;
                        out.push(pixels[(y * s + x) * c + ch] as f32 / 255.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn flatten_pixels(cfg: &ModelConfig, pixels: &[u8]) -> Result<Vec<f32>> {
    if pixels.len() != cfg.pixel_count() {
        return Err(Error::Dimension(format!(
            "image has {} bytes, model expects {}",
            pixels.len(),
            cfg.pixel_count()
        )));
    }
    Ok(pixels.iter().map(|&v| v as f32 / 255.0).collect())
}

fn weights<'a>(params: &'a ParamRegistry, name: &str) -> Result<&'a [f32]> {
    params
        .get(name)
        .ok_or_else(|| Error::Address(format!("missing layer '{name}'")))?
        .as_f32()
}

/// Forward pass over an explicit registry. Shared by f32 models and the
/// dequantize-on-the-fly path of quantized models.
pub(crate) fn forward_registry(cfg: &ModelConfig, params: &ParamRegistry, pixels: &[u8]) -> Result<Vec<f32>> {
    let state = run_forward(cfg, params, pixels, false)?;
    Ok(state.logits)
}

struct LnCache {
    /// Normalized pre-affine activations.
    xhat: Vec<f32>,
    /// Per-row 1/sqrt(var + eps).
    inv: Vec<f32>,
}

fn ln_forward(x: &[f32], rows: usize, n: usize, gamma: &[f32], beta: &[f32], want_cache: bool) -> (Vec<f32>, Option<LnCache>) {
    let mut out = vec![0.0f32; rows * n];
    if !want_cache {
        out.copy_from_slice(x);
        for row in out.chunks_mut(n) {
            layer_norm_row(row, gamma, beta, LAYER_NORM_EPS);
        }
        return (out, None);
    }
    let mut xhat = vec![0.0f32; rows * n];
    let mut inv = vec![0.0f32; rows];
    for r in 0..rows {
        let src = &x[r * n..(r + 1) * n];
        let mean = src.iter().sum::<f32>() / n as f32;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let iv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv[r] = iv;
        for i in 0..n {
            let xh = (src[i] - mean) * iv;
            xhat[r * n + i] = xh;
            out[r * n + i] = xh * gamma[i] + beta[i];
        }
    }
    (out, Some(LnCache { xhat, inv }))
}

fn ln_backward(
    dy: &[f32],
    gamma: &[f32],
    cache: &LnCache,
    rows: usize,
    n: usize,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Vec<f32> {
    let mut dx = vec![0.0f32; rows * n];
    for r in 0..rows {
        let base = r * n;
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for i in 0..n {
            let d = dy[base + i];
            let xh = cache.xhat[base + i];
            dgamma[i] += d * xh;
            dbeta[i] += d;
            let dxh = d * gamma[i];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
        }
        let m1 = sum_dxhat / n as f32;
        let m2 = sum_dxhat_xhat / n as f32;
        for i in 0..n {
            let dxh = dy[base + i] * gamma[i];
            dx[base + i] = cache.inv[r] * (dxh - m1 - cache.xhat[base + i] * m2);
        }
    }
    dx
}

struct BlockCache {
    z_in: Vec<f32>,
    n1: Vec<f32>,
    ln1: LnCache,
    qkv: Vec<f32>,
    /// Per-head post-softmax attention, each tokens x tokens.
    probs: Vec<Vec<f32>>,
    /// Concatenated head outputs, tokens x embed.
    attn_concat: Vec<f32>,
    z_mid: Vec<f32>,
    n2: Vec<f32>,
    ln2: LnCache,
    h_pre: Vec<f32>,
    h_act: Vec<f32>,
}

struct ForwardState {
    logits: Vec<f32>,
    /// Present only when caching for backward.
    cache: Option<ForwardCache>,
}

struct ForwardCache {
    patches: Vec<f32>,
    z0: Vec<f32>,
    blocks: Vec<BlockCache>,
    z_final: Vec<f32>,
    nf: Vec<f32>,
    lnf: Option<LnCache>,
    pooled: Vec<f32>,
    // tiny_mlp activations
    mlp_x: Vec<f32>,
    mlp_h1_pre: Vec<f32>,
    mlp_h1: Vec<f32>,
    mlp_h2_pre: Vec<f32>,
    mlp_h2: Vec<f32>,
}

impl ForwardCache {
    fn empty() -> Self {
        ForwardCache {
            patches: Vec::new(),
            z0: Vec::new(),
            blocks: Vec::new(),
            z_final: Vec::new(),
            nf: Vec::new(),
            lnf: None,
            pooled: Vec::new(),
            mlp_x: Vec::new(),
            mlp_h1_pre: Vec::new(),
            mlp_h1: Vec::new(),
            mlp_h2_pre: Vec::new(),
            mlp_h2: Vec::new(),
        }
    }
}

fn run_forward(cfg: &ModelConfig, params: &ParamRegistry, pixels: &[u8], want_cache: bool) -> Result<ForwardState> {
    match cfg.arch {
        Arch::TinyVit => run_forward_vit(cfg, params, pixels, want_cache),
        Arch::TinyMlp => run_forward_mlp(cfg, params, pixels, want_cache),
    }
}

fn run_forward_mlp(cfg: &ModelConfig, params: &ParamRegistry, pixels: &[u8], want_cache: bool) -> Result<ForwardState> {
    let x = flatten_pixels(cfg, pixels)?;
    let w1 = weights(params, "mlp_fc1")?;
    let w2 = weights(params, "mlp_fc2")?;
    let wh = weights(params, "head_fc")?;
    let p = cfg.pixel_count();
    let (e, hi, c) = (cfg.embed_dim, cfg.head_in_features, cfg.num_classes);

    let h1_pre = matmul_raw(&x, w1, 1, p, e);
    let h1: Vec<f32> = h1_pre.iter().map(|&v| v.max(0.0)).collect();
    let h2_pre = matmul_raw(&h1, w2, 1, e, hi);
    let h2: Vec<f32> = h2_pre.iter().map(|&v| v.max(0.0)).collect();
    let logits = matmul_raw(&h2, wh, 1, hi, c);

    let cache = want_cache.then(|| {
        let mut cache = ForwardCache::empty();
        cache.mlp_x = x;
        cache.mlp_h1_pre = h1_pre;
        cache.mlp_h1 = h1;
        cache.mlp_h2_pre = h2_pre;
        cache.mlp_h2 = h2;
        cache
    });
    Ok(ForwardState { logits, cache })
}

fn run_forward_vit(cfg: &ModelConfig, params: &ParamRegistry, pixels: &[u8], want_cache: bool) -> Result<ForwardState> {
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let t = cfg.num_tokens();
    let scale = 1.0 / (dh as f32).sqrt();

    let patches = pixels_to_patches(cfg, pixels)?;
    let w_pe = weights(params, "patch_embed")?;
    let pos = weights(params, "pos_embed")?;

    let embedded = matmul_raw(&patches, w_pe, cfg.num_patches(), cfg.patch_dim(), d);
    let mut z = Vec::with_capacity(t * d);
    if cfg.pool == Pool::Cls {
        z.extend_from_slice(weights(params, "cls_token")?);
    }
    z.extend_from_slice(&embedded);
    for (v, p) in z.iter_mut().zip(pos.iter()) {
        *v += p;
    }
    let z0 = z.clone();

    let mut blocks = Vec::with_capacity(cfg.depth);
    for k in 0..cfg.depth {
        let g1 = weights(params, &format!("block{k}_norm1_gamma"))?;
        let b1 = weights(params, &format!("block{k}_norm1_beta"))?;
        let w_qkv = weights(params, &format!("block{k}_attn_qkv"))?;
        let w_proj = weights(params, &format!("block{k}_attn_proj"))?;
        let g2 = weights(params, &format!("block{k}_norm2_gamma"))?;
        let b2 = weights(params, &format!("block{k}_norm2_beta"))?;
        let w_fc1 = weights(params, &format!("block{k}_mlp_fc1"))?;
        let w_fc2 = weights(params, &format!("block{k}_mlp_fc2"))?;

        let z_in = z.clone();
        let (n1, ln1) = ln_forward(&z, t, d, g1, b1, true);
        let qkv = matmul_raw(&n1, w_qkv, t, d, 3 * d);

        // Attention per head over fused qkv columns:
        // [0, d) query, [d, 2d) key, [2d, 3d) value.
        let mut probs = Vec::with_capacity(heads);
        let mut attn_concat = vec![0.0f32; t * d];
        for h in 0..heads {
            let qoff = h * dh;
            let koff = d + h * dh;
            let voff = 2 * d + h * dh;
            let mut scores = vec![0.0f32; t * t];
            for i in 0..t {
                for j in 0..t {
                    let mut acc = 0.0f32;
                    for l in 0..dh {
                        acc += qkv[i * 3 * d + qoff + l] * qkv[j * 3 * d + koff + l];
                    }
                    scores[i * t + j] = acc * scale;
                }
            }
            for row in scores.chunks_mut(t) {
                softmax_row(row);
            }
            for i in 0..t {
                for l in 0..dh {
                    let mut acc = 0.0f32;
                    for j in 0..t {
                        acc += scores[i * t + j] * qkv[j * 3 * d + voff + l];
                    }
                    attn_concat[i * d + qoff + l] = acc;
                }
            }
            probs.push(scores);
        }

        let attn_out = matmul_raw(&attn_concat, w_proj, t, d, d);
        for (zv, a) in z.iter_mut().zip(attn_out.iter()) {
            *zv += a;
        }
        let z_mid = z.clone();

        let (n2, ln2) = ln_forward(&z, t, d, g2, b2, true);
        let h_pre = matmul_raw(&n2, w_fc1, t, d, cfg.mlp_hidden());
        let h_act: Vec<f32> = h_pre.iter().map(|&v| v.max(0.0)).collect();
        let mlp_out = matmul_raw(&h_act, w_fc2, t, cfg.mlp_hidden(), d);
        for (zv, m) in z.iter_mut().zip(mlp_out.iter()) {
            *zv += m;
        }

        blocks.push(BlockCache {
            z_in,
            n1,
            ln1: ln1.expect("cache requested"),
            qkv,
            probs,
            attn_concat,
            z_mid,
            n2,
            ln2: ln2.expect("cache requested"),
            h_pre,
            h_act,
        });
    }

    let gf = weights(params, "norm_gamma")?;
    let bf = weights(params, "norm_beta")?;
    let z_final = z.clone();
    let (nf, lnf) = ln_forward(&z, t, d, gf, bf, want_cache);

    let pooled: Vec<f32> = match cfg.pool {
        Pool::Mean => (0..d)
            .map(|i| (0..t).map(|r| nf[r * d + i]).sum::<f32>() / t as f32)
            .collect(),
        Pool::Cls => nf[0..d].to_vec(),
    };

    let w_head = weights(params, "head_fc")?;
    let logits = matmul_raw(&pooled, w_head, 1, d, cfg.num_classes);

    let cache = want_cache.then(|| {
        let mut cache = ForwardCache::empty();
        cache.patches = patches;
        cache.z0 = z0;
        cache.blocks = blocks;
        cache.z_final = z_final;
        cache.nf = nf;
        cache.lnf = lnf;
        cache.pooled = pooled;
        cache
    });
    Ok(ForwardState { logits, cache })
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

/// a^T . dc for a: m x k, dc: m x n; result k x n.
fn mm_at(a: &[f32], m: usize, k: usize, dc: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    for l in 0..k {
        for j in 0..n {
            let mut acc = 0.0f32;
            for i in 0..m {
                acc += a[i * k + l] * dc[i * n + j];
            }
            out[l * n + j] = acc;
        }
    }
    out
}

/// dc . b^T for dc: m x n, b: k x n; result m x k.
fn mm_bt(dc: &[f32], m: usize, n: usize, b: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        for l in 0..k {
            let mut acc = 0.0f32;
            for j in 0..n {
                acc += dc[i * n + j] * b[l * n + j];
            }
            out[i * k + l] = acc;
        }
    }
    out
}

fn softmax_backward_row(p: &[f32], dp: &[f32], ds: &mut [f32]) {
    let dot: f32 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
    for i in 0..p.len() {
        ds[i] = p[i] * (dp[i] - dot);
    }
}

/// Cross-entropy loss of `logits` against `label`, with its gradient.
fn ce_loss_grad(logits: &[f32], label: usize) -> (f32, Vec<f32>) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    let loss = -(logits[label] - max - sum.ln());
    let mut grad: Vec<f32> = exps.iter().map(|&e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

#[derive(Debug, Default)]
struct GradStore {
    map: HashMap<String, Vec<f32>>,
}

impl GradStore {
    fn add(&mut self, name: &str, len: usize) -> &mut Vec<f32> {
        self.map.entry(name.to_string()).or_insert_with(|| vec![0.0; len])
    }

    fn insert(&mut self, name: &str, g: Vec<f32>) {
        self.map.insert(name.to_string(), g);
    }
}

/// Cross-entropy loss and per-layer gradients for one sample.
/// Gradients are returned in registry order.
pub fn loss_and_grads(model: &Model, pixels: &[u8], label: u16) -> Result<(f32, Vec<(String, Vec<f32>)>)> {
    let cfg = &model.config;
    if (label as usize) >= cfg.num_classes {
        return Err(Error::Data(format!("label {label} >= num_classes {}", cfg.num_classes)));
    }
    let state = run_forward(cfg, &model.params, pixels, true)?;
    let cache = state.cache.expect("cache requested");
    let (loss, dlogits) = ce_loss_grad(&state.logits, label as usize);

    let mut grads = GradStore::default();
    match cfg.arch {
        Arch::TinyMlp => backward_mlp(cfg, &model.params, &cache, &dlogits, &mut grads)?,
        Arch::TinyVit => backward_vit(cfg, &model.params, &cache, &dlogits, &mut grads)?,
    }

    let out = model
        .params
        .iter()
        .map(|(name, t)| {
            let g = grads
                .map
                .remove(name)
                .unwrap_or_else(|| vec![0.0; t.len()]);
            (name.to_string(), g)
        })
        .collect();
    Ok((loss, out))
}

fn backward_mlp(cfg: &ModelConfig, params: &ParamRegistry, cache: &ForwardCache, dlogits: &[f32], grads: &mut GradStore) -> Result<()> {
    let p = cfg.pixel_count();
    let (e, hi, c) = (cfg.embed_dim, cfg.head_in_features, cfg.num_classes);
    let w2 = weights(params, "mlp_fc2")?;
    let wh = weights(params, "head_fc")?;

    grads.insert("head_fc", mm_at(&cache.mlp_h2, 1, hi, dlogits, c));
    let mut dh2 = mm_bt(dlogits, 1, c, wh, hi);
    for (g, &pre) in dh2.iter_mut().zip(cache.mlp_h2_pre.iter()) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    grads.insert("mlp_fc2", mm_at(&cache.mlp_h1, 1, e, &dh2, hi));
    let mut dh1 = mm_bt(&dh2, 1, hi, w2, e);
    for (g, &pre) in dh1.iter_mut().zip(cache.mlp_h1_pre.iter()) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    grads.insert("mlp_fc1", mm_at(&cache.mlp_x, 1, p, &dh1, e));
    Ok(())
}

fn backward_vit(cfg: &ModelConfig, params: &ParamRegistry, cache: &ForwardCache, dlogits: &[f32], grads: &mut GradStore) -> Result<()> {
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let t = cfg.num_tokens();
    let scale = 1.0 / (dh as f32).sqrt();
    let c = cfg.num_classes;

    let w_head = weights(params, "head_fc")?;
    grads.insert("head_fc", mm_at(&cache.pooled, 1, d, dlogits, c));
    let dpooled = mm_bt(dlogits, 1, c, w_head, d);

    // Unpool into the final-norm output.
    let mut dnf = vec![0.0f32; t * d];
    match cfg.pool {
        Pool::Mean => {
            for r in 0..t {
                for i in 0..d {
                    dnf[r * d + i] = dpooled[i] / t as f32;
                }
            }
        }
        Pool::Cls => dnf[0..d].copy_from_slice(&dpooled),
    }

    let gf = weights(params, "norm_gamma")?;
    let mut dgf = vec![0.0f32; d];
    let mut dbf = vec![0.0f32; d];
    let lnf = cache.lnf.as_ref().expect("cache requested");
    let mut dz = ln_backward(&dnf, gf, lnf, t, d, &mut dgf, &mut dbf);
    grads.insert("norm_gamma", dgf);
    grads.insert("norm_beta", dbf);

    for (k, blk) in cache.blocks.iter().enumerate().rev() {
        let w_fc2 = weights(params, &format!("block{k}_mlp_fc2"))?;
        let w_fc1 = weights(params, &format!("block{k}_mlp_fc1"))?;
        let g2 = weights(params, &format!("block{k}_norm2_gamma"))?;
        let w_proj = weights(params, &format!("block{k}_attn_proj"))?;
        let w_qkv = weights(params, &format!("block{k}_attn_qkv"))?;
        let g1 = weights(params, &format!("block{k}_norm1_gamma"))?;
        let hid = cfg.mlp_hidden();

        // MLP sub-block: z = z_mid + relu(ln2(z_mid) . fc1) . fc2
        let dmlp_out = dz.clone();
        grads.insert(&format!("block{k}_mlp_fc2"), mm_at(&blk.h_act, t, hid, &dmlp_out, d));
        let mut dh_act = mm_bt(&dmlp_out, t, d, w_fc2, hid);
        for (g, &pre) in dh_act.iter_mut().zip(blk.h_pre.iter()) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        grads.insert(&format!("block{k}_mlp_fc1"), mm_at(&blk.n2, t, d, &dh_act, hid));
        let dn2 = mm_bt(&dh_act, t, hid, w_fc1, d);
        let mut dg2 = vec![0.0f32; d];
        let mut db2 = vec![0.0f32; d];
        let dz_mid_from_ln = ln_backward(&dn2, g2, &blk.ln2, t, d, &mut dg2, &mut db2);
        grads.insert(&format!("block{k}_norm2_gamma"), dg2);
        grads.insert(&format!("block{k}_norm2_beta"), db2);
        for (a, b) in dz.iter_mut().zip(dz_mid_from_ln.iter()) {
            *a += b;
        }

        // Attention sub-block: z_mid = z_in + attn(ln1(z_in)) . proj
        let dattn_out = dz.clone();
        grads.insert(&format!("block{k}_attn_proj"), mm_at(&blk.attn_concat, t, d, &dattn_out, d));
        let dconcat = mm_bt(&dattn_out, t, d, w_proj, d);

        let mut dqkv = vec![0.0f32; t * 3 * d];
        let mut ds_row = vec![0.0f32; t];
        for h in 0..heads {
            let qoff = h * dh;
            let koff = d + h * dh;
            let voff = 2 * d + h * dh;
            let probs = &blk.probs[h];

            // dP = dO . V^T ; dV = P^T . dO
            let mut dp = vec![0.0f32; t * t];
            for i in 0..t {
                for j in 0..t {
                    let mut acc = 0.0f32;
                    for l in 0..dh {
                        acc += dconcat[i * d + qoff + l] * blk.qkv[j * 3 * d + voff + l];
                    }
                    dp[i * t + j] = acc;
                }
            }
            for j in 0..t {
                for l in 0..dh {
                    let mut acc = 0.0f32;
                    for i in 0..t {
                        acc += probs[i * t + j] * dconcat[i * d + qoff + l];
                    }
                    dqkv[j * 3 * d + voff + l] += acc;
                }
            }
            // Through the softmax, then into Q and K.
            for i in 0..t {
                softmax_backward_row(&probs[i * t..(i + 1) * t], &dp[i * t..(i + 1) * t], &mut ds_row);
                for j in 0..t {
                    let dsv = ds_row[j] * scale;
                    for l in 0..dh {
                        dqkv[i * 3 * d + qoff + l] += dsv * blk.qkv[j * 3 * d + koff + l];
                        dqkv[j * 3 * d + koff + l] += dsv * blk.qkv[i * 3 * d + qoff + l];
                    }
                }
            }
        }

        grads.insert(&format!("block{k}_attn_qkv"), mm_at(&blk.n1, t, d, &dqkv, 3 * d));
        let dn1 = mm_bt(&dqkv, t, 3 * d, w_qkv, d);
        let mut dg1 = vec![0.0f32; d];
        let mut db1 = vec![0.0f32; d];
        let dz_in_from_ln = ln_backward(&dn1, g1, &blk.ln1, t, d, &mut dg1, &mut db1);
        grads.insert(&format!("block{k}_norm1_gamma"), dg1);
        grads.insert(&format!("block{k}_norm1_beta"), db1);
        for (a, b) in dz.iter_mut().zip(dz_in_from_ln.iter()) {
            *a += b;
        }
    }

    // Embedding stage: z0 = [cls?; patches . W_pe] + pos
    grads.insert("pos_embed", dz.clone());
    let patch_rows = cfg.num_patches();
    let dtokens = if cfg.pool == Pool::Cls {
        grads.insert("cls_token", dz[0..d].to_vec());
        &dz[d..]
    } else {
        &dz[..]
    };
    grads.insert("patch_embed", mm_at(&cache.patches, patch_rows, cfg.patch_dim(), dtokens, d));
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// Training-set accuracy after each epoch.
    pub epoch_acc: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Transient-flip bookkeeping when bit-flip-aware training is enabled.
    pub flip_ledger: Vec<TransientFlip>,
}

fn train_accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    let correct = crate::parallel::count_indices(dataset.len(), |i| {
        match model.forward(dataset.image(i)) {
            Ok(logits) => argmax_class(&logits) == dataset.label(i) as usize,
            Err(_) => false,
        }
    });
    Ok(correct as f64 / dataset.len() as f64)
}

/// Plain SGD with per-sample updates in a seeded shuffle order. With
/// `flip_augment`, each step first injects transient bit flips per the
/// config, computes gradients against the corrupted weights, updates every
/// untouched weight, and restores the flipped ones (unless persistent).
/// Steps whose loss or gradients are non-finite are skipped; corrupted
/// forward passes must not poison the weights themselves.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    epochs: usize,
    lr: f32,
    flip_augment: Option<&BfatConfig>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let (h, w, c) = dataset.dims();
    if h != model.config.image_size || w != model.config.image_size || c != model.config.channels {
        return Err(Error::Dimension(format!(
            "dataset {h}x{w}x{c} does not match model image {}x{}x{}",
            model.config.image_size, model.config.image_size, model.config.channels
        )));
    }
    if dataset.num_classes() as usize != model.config.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model {}",
            dataset.num_classes(),
            model.config.num_classes
        )));
    }
    if let Some(cfg) = flip_augment {
        cfg.validate()?;
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(1));
    let mut bfat_rng = flip_augment.map(|cfg| ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut history = TrainHistory::default();
    let mut ledger = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step: u64 = 0;

    // Tensor sizes for global-index sampling of transient flips.
    let sizes: Vec<(String, usize)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.len()))
        .collect();
    let total: usize = sizes.iter().map(|(_, s)| s).sum();

    for _epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        for &idx in &order {
            step += 1;
            // Inject transient flips.
            let mut transient: Vec<(BitFlipSpec, u32)> = Vec::new();
            if let (Some(cfg), Some(rng)) = (flip_augment, bfat_rng.as_mut()) {
                let k = Binomial::new(total as u64, cfg.flip_prob)
                    .map_err(|e| Error::Config(format!("bad flip_prob: {e}")))?
                    .sample(rng) as usize;
                let mut chosen = std::collections::HashSet::new();
                while chosen.len() < k.min(total) {
                    chosen.insert(rng.gen_range(0..total));
                }
                let mut picks: Vec<usize> = chosen.into_iter().collect();
                picks.sort_unstable();
                for gidx in picks {
                    let (layer, offset) = global_to_layer(&sizes, gidx);
                    let bit = cfg.bit_set[rng.gen_range(0..cfg.bit_set.len())];
                    let spec = BitFlipSpec::new(layer, offset, bit)?;
                    let data = model
                        .params
                        .get_mut(spec.layer_name())
                        .expect("layer exists")
                        .as_f32_mut()?;
                    let before = data[offset].to_bits();
                    data[offset] = f32::from_bits(before ^ (1u32 << bit));
                    transient.push((spec, before));
                }
            }

            let persistent = flip_augment.map(|c| c.persistent).unwrap_or(false);
            let result = loss_and_grads(model, dataset.image(idx), dataset.label(idx))?;
            let (loss, grads) = result;
            let usable = loss.is_finite()
                && grads.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()));

            if usable {
                let skip: std::collections::HashSet<(usize, usize)> = if persistent {
                    std::collections::HashSet::new()
                } else {
                    transient
                        .iter()
                        .map(|(s, _)| (layer_index(&sizes, s.layer_name()), s.weight_index()))
                        .collect()
                };
                for (li, (name, g)) in grads.iter().enumerate() {
                    let data = model.params.get_mut(name).expect("layer exists").as_f32_mut()?;
                    for (wi, (wv, gv)) in data.iter_mut().zip(g.iter()).enumerate() {
                        if !skip.contains(&(li, wi)) {
                            *wv -= lr * gv;
                        }
                    }
                }
            }

            // Restore transiently flipped weights to their pre-flip bits.
            if !persistent {
                for (spec, before) in &transient {
                    let data = model
                        .params
                        .get_mut(spec.layer_name())
                        .expect("layer exists")
                        .as_f32_mut()?;
                    data[spec.weight_index()] = f32::from_bits(*before);
                    ledger.push(TransientFlip {
                        step,
                        spec: spec.clone(),
                        bits_before: *before,
                        bits_after_step: data[spec.weight_index()].to_bits(),
                    });
                }
            } else {
                for (spec, before) in &transient {
                    let data = model.params.get(spec.layer_name()).expect("layer exists").as_f32()?;
                    ledger.push(TransientFlip {
                        step,
                        spec: spec.clone(),
                        bits_before: *before,
                        bits_after_step: data[spec.weight_index()].to_bits(),
                    });
                }
            }
        }
        history.epoch_acc.push(train_accuracy(model, dataset)?);
    }

    Ok(TrainOutcome { history, flip_ledger: ledger })
}

fn global_to_layer(sizes: &[(String, usize)], mut gidx: usize) -> (String, usize) {
    for (name, sz) in sizes {
        if gidx < *sz {
            return (name.clone(), gidx);
        }
        gidx -= sz;
    }
    unreachable!("global index out of range")
}

fn layer_index(sizes: &[(String, usize)], name: &str) -> usize {
    sizes.iter().position(|(n, _)| n == name).expect("layer exists")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_config(seed: u64) -> ModelConfig {
        ModelConfig::tiny_vit(16, 4, 32, 4, 1, 4, seed)
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = blob_config(7);
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a.params.snapshot(), b.params.snapshot());
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let mut cfg = ModelConfig::tiny_vit(16, 4, 8, 3, 1, 2, 0);
        cfg.head_in_features = 8;
        assert!(matches!(init_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn head_shape_follows_config() {
        let cfg = ModelConfig::tiny_vit(16, 4, 32, 4, 1, 2, 0);
        let m = init_model(&cfg).unwrap();
        assert_eq!(m.params.get("head_fc").unwrap().shape(), &[32, 2]);
    }

    #[test]
    fn registry_names_cover_required_layers() {
        let m = init_model(&blob_config(0)).unwrap();
        for name in ["patch_embed", "block0_attn_qkv", "block0_attn_proj", "block0_mlp_fc1", "block0_mlp_fc2", "head_fc"] {
            assert!(m.params.get(name).is_some(), "missing {name}");
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = init_model(&blob_config(3)).unwrap();
        let names: Vec<String> = m.params.names().map(String::from).collect();
        for n in names {
            let t = m.params.get_mut(&n).unwrap().as_f32_mut().unwrap();
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = m.forward(&vec![128u8; 256]).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0), "{logits:?}");
    }

    #[test]
    fn logits_length_matches_classes() {
        let m = init_model(&blob_config(1)).unwrap();
        let logits = m.forward(&vec![77u8; 256]).unwrap();
        assert_eq!(logits.len(), 4);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_pure() {
        let m = init_model(&blob_config(5)).unwrap();
        let before = m.params.snapshot();
        let _ = m.forward(&vec![10u8; 256]).unwrap();
        assert_eq!(m.params.snapshot(), before);
    }

    #[test]
    fn forward_rejects_wrong_image_size() {
        let m = init_model(&blob_config(5)).unwrap();
        assert!(matches!(m.forward(&vec![0u8; 100]), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_patch_depth_zero_matches_hand_oracle() {
        // image == patch, depth 0, mean pool over one token:
        // logits = LN(patch . W_pe + pos) . W_head, all computed by hand.
        let cfg = ModelConfig::tiny_vit(4, 4, 8, 1, 0, 3, 11);
        let m = init_model(&cfg).unwrap();
        let pixels: Vec<u8> = (0..16).map(|i| (i * 13 % 251) as u8).collect();
        let got = m.forward(&pixels).unwrap();

        let w_pe = m.params.get("patch_embed").unwrap().as_f32().unwrap();
        let pos = m.params.get("pos_embed").unwrap().as_f32().unwrap();
        let gamma = m.params.get("norm_gamma").unwrap().as_f32().unwrap();
        let beta = m.params.get("norm_beta").unwrap().as_f32().unwrap();
        let w_head = m.params.get("head_fc").unwrap().as_f32().unwrap();

        let x: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let mut z = vec![0.0f64; 8];
        for j in 0..8 {
            for l in 0..16 {
                z[j] += x[l] * w_pe[l * 8 + j] as f64;
            }
            z[j] += pos[j] as f64;
        }
        let mean = z.iter().sum::<f64>() / 8.0;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
        let nf: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean) * inv * gamma[i] as f64 + beta[i] as f64)
            .collect();
        for c in 0..3 {
            let mut want = 0.0f64;
            for i in 0..8 {
                want += nf[i] * w_head[i * 3 + c] as f64;
            }
            assert!((got[c] as f64 - want).abs() < 1e-5, "{} vs {want}", got[c]);
        }
    }

    #[test]
    fn synth_datasets_are_reproducible_and_balanced() {
        let a = synth_dataset(SynthKind::Blobs, 100, 16, 4, 1).unwrap();
        let b = synth_dataset(SynthKind::Blobs, 100, 16, 4, 1).unwrap();
        assert_eq!(a, b);

        let mut counts = [0usize; 4];
        for i in 0..a.len() {
            counts[a.label(i) as usize] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn synth_rejects_tiny_n() {
        assert!(matches!(synth_dataset(SynthKind::Blobs, 3, 16, 4, 0), Err(Error::Data(_))));
    }

    #[test]
    fn blobs_are_linearly_separable() {
        // Nearest-centroid (a linear classifier) must reach 99%+ on held-out
        // samples.
        let data = synth_dataset(SynthKind::Blobs, 400, 16, 4, 9).unwrap();
        let dim = 256;
        let mut centroids = vec![vec![0.0f64; dim]; 4];
        let mut counts = [0usize; 4];
        let half = data.len() / 2;
        for i in 0..half {
            let cls = data.label(i) as usize;
            counts[cls] += 1;
            for (acc, &p) in centroids[cls].iter_mut().zip(data.image(i)) {
                *acc += p as f64;
            }
        }
        for (c, cnt) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= cnt as f64);
        }
        let mut correct = 0;
        for i in half..data.len() {
            let img = data.image(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (cls, c) in centroids.iter().enumerate() {
                let d: f64 = img
                    .iter()
                    .zip(c.iter())
                    .map(|(&p, &m)| (p as f64 - m) * (p as f64 - m))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = cls;
                }
            }
            if best == data.label(i) as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / (data.len() - half) as f64;
        assert!(acc >= 0.99, "linear oracle accuracy {acc}");
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = synth_dataset(SynthKind::Blobs, 40, 16, 4, 2).unwrap();
        let mut m = init_model(&blob_config(2)).unwrap();
        let before = m.params.snapshot();
        train(&mut m, &data, 3, 0.0, None).unwrap();
        assert_eq!(m.params.snapshot(), before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_dataset(SynthKind::Blobs, 60, 16, 4, 3).unwrap();
        let mut a = init_model(&blob_config(3)).unwrap();
        let mut b = init_model(&blob_config(3)).unwrap();
        train(&mut a, &data, 2, 0.05, None).unwrap();
        train(&mut b, &data, 2, 0.05, None).unwrap();
        assert_eq!(a.params.snapshot(), b.params.snapshot());
    }

    #[test]
    fn blobs_train_to_95_percent_within_30_epochs() {
        let data = synth_dataset(SynthKind::Blobs, 200, 16, 2, 4).unwrap();
        let cfg = ModelConfig::tiny_vit(16, 4, 32, 4, 1, 2, 4);
        let mut m = init_model(&cfg).unwrap();
        let out = train(&mut m, &data, 30, 0.05, None).unwrap();
        let final_acc = *out.history.epoch_acc.last().unwrap();
        assert!(final_acc >= 0.95, "train accuracy {final_acc}");
    }

    /// Central finite differences on a sampled subset of each parameter
    /// group, against the analytic gradients.
    fn check_gradients(cfg: &ModelConfig) {
        let m = init_model(cfg).unwrap();
        let pixels: Vec<u8> = (0..cfg.pixel_count()).map(|i| (i * 37 % 256) as u8).collect();
        let label = 1u16;
        let (_, grads) = loss_and_grads(&m, &pixels, label).unwrap();

        let loss_of = |model: &Model| -> f64 {
            let logits = model.forward(&pixels).unwrap();
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = logits.iter().map(|&v| ((v as f64) - max).exp()).sum();
            -((logits[label as usize] as f64) - max - sum.ln())
        };

        for (name, g) in &grads {
            // The few largest-magnitude entries carry the signal; tiny
            // entries drown in f32 forward-pass noise.
            let mut idx: Vec<usize> = (0..g.len()).collect();
            idx.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap());
            for &i in idx.iter().take(4) {
                let mut probe = m.clone();
                let w = probe.params.get(name).unwrap().as_f32().unwrap()[i];
                let eps = 1e-2f32.max(w.abs() * 1e-2);

                probe.params.get_mut(name).unwrap().as_f32_mut().unwrap()[i] = w + eps;
                let up = loss_of(&probe);
                probe.params.get_mut(name).unwrap().as_f32_mut().unwrap()[i] = w - eps;
                let down = loss_of(&probe);
                let fd = (up - down) / (2.0 * eps as f64);
                let an = g[i] as f64;
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(rel <= 1e-3, "{name}[{i}]: analytic {an} vs fd {fd} (rel {rel})");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_vit() {
        check_gradients(&ModelConfig::tiny_vit(8, 4, 8, 2, 1, 3, 12));
    }

    #[test]
    fn gradients_match_finite_differences_mlp() {
        check_gradients(&ModelConfig::tiny_mlp(8, 16, 12, 3, 13));
    }

    #[test]
    fn gradients_match_finite_differences_cls_pool() {
        let mut cfg = ModelConfig::tiny_vit(8, 4, 8, 2, 1, 3, 14);
        cfg.pool = Pool::Cls;
        check_gradients(&cfg);
    }

    #[test]
    fn head_width_variants_construct_and_run() {
        for width in [384usize, 512, 640, 768] {
            let cfg = ModelConfig::tiny_mlp(16, 32, width, 4, 1);
            let m = init_model(&cfg).unwrap();
            let logits = m.forward(&vec![100u8; 256]).unwrap();
            assert_eq!(logits.len(), 4);

            let vit = ModelConfig::tiny_vit(8, 4, width, 4, 1, 4, 1);
            let m = init_model(&vit).unwrap();
            let logits = m.forward(&vec![100u8; 64]).unwrap();
            assert_eq!(logits.len(), 4);
        }
    }

    #[test]
    fn argmax_handles_nan_and_ties() {
        assert_eq!(argmax_class(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_class(&[f32::NAN, 5.0]), 1);
        assert_eq!(argmax_class(&[f32::NAN, f32::NAN]), 0);
        assert_eq!(argmax_class(&[f32::NEG_INFINITY, f32::INFINITY]), 1);
    }
}
