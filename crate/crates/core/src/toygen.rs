//! A small style-modulated convolutional generator with a jointly trained
//! inversion encoder and a latent mapping network.
//!
//! Layers are numbered from 1 in every public API.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use log::{debug, info};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::image::Image;
use crate::nn::{Adam, Conv2d, FeatureNet, Linear, Param};
use crate::rng::{derive, seeded};
use crate::tensor::Tensor;
use crate::{impl_module, Error, Result};

pub const DEMOD_EPS: f64 = 1e-8;
const LRELU: f64 = 0.2;

/// Architecture of the generator and its encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenConfig {
    /// Output channels of layers 1..=nL.
    pub channels: Vec<usize>,
    /// Layer numbers followed by a ×2 nearest upsample.
    pub upsample_after: Vec<usize>,
    /// Side of the learned constant input.
    pub base_res: usize,
    pub d_w: usize,
    pub d_z: usize,
    pub kernel: usize,
    /// Channels of the encoder's three stride-2 convolutions.
    pub enc_channels: Vec<usize>,
    pub mapping_hidden: usize,
}

impl GenConfig {
    /// 8 layers, 4×4 → 32×32, `d_w = 64`.
    pub fn standard() -> Self {
        GenConfig {
            channels: vec![64, 64, 64, 64, 32, 32, 16, 16],
            upsample_after: vec![2, 4, 6],
            base_res: 4,
            d_w: 64,
            d_z: 64,
            kernel: 3,
            enc_channels: vec![32, 64, 128],
            mapping_hidden: 128,
        }
    }

    /// 4 layers, 4×4 → 8×8, a handful of channels; for gradient checks.
    pub fn micro() -> Self {
        GenConfig {
            channels: vec![4, 4, 3, 3],
            upsample_after: vec![2],
            base_res: 4,
            d_w: 4,
            d_z: 4,
            kernel: 3,
            enc_channels: vec![4, 6, 8],
            mapping_hidden: 6,
        }
    }

    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    pub fn in_channels(&self, layer: usize) -> usize {
        if layer == 1 {
            self.channels[0]
        } else {
            self.channels[layer - 2]
        }
    }

    pub fn out_channels(&self, layer: usize) -> usize {
        self.channels[layer - 1]
    }

    /// Shape of layer `layer`'s kernel, `[C_out, C_in, k, k]`.
    pub fn kernel_shape(&self, layer: usize) -> [usize; 4] {
        [self.out_channels(layer), self.in_channels(layer), self.kernel, self.kernel]
    }

    /// Spatial size of the feature map a layer operates on.
    pub fn layer_resolution(&self, layer: usize) -> usize {
        let ups = self.upsample_after.iter().filter(|&&u| u < layer).count();
        self.base_res << ups
    }

    pub fn resolution(&self) -> usize {
        self.base_res << self.upsample_after.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channel plan {:?} must be nonempty and positive", self.channels));
        }
        if self.upsample_after.iter().any(|&u| u == 0 || u > self.layers()) {
            return bad(format!("upsample positions {:?} outside 1..={}", self.upsample_after, self.layers()));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if self.enc_channels.len() != 3 || self.resolution() % 8 != 0 {
            return bad(String::from("encoder needs three stages and a resolution divisible by 8"));
        }
        if self.d_w == 0 || self.d_z == 0 || self.base_res == 0 {
            return bad(String::from("latent sizes and base resolution must be positive"));
        }
        Ok(())
    }
}

/// One latent vector per generator layer (W+).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Tensor);

impl LatentCode {
    /// Wraps an `[nL, d_w]` array of finite values.
    pub fn new(values: Tensor) -> Result<Self> {
        if values.dims() != 2 {
            return Err(Error::Shape(format!("latent code must be [nL, d_w], got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(Error::Input(String::from("latent code has non-finite entries")));
        }
        Ok(LatentCode(values))
    }

    /// The same vector for every layer.
    pub fn broadcast(w: &[f64], layers: usize) -> Self {
        let data = (0..layers).flat_map(|_| w.iter().copied()).collect();
        LatentCode(Tensor::new(&[layers, w.len()], data))
    }

    pub fn layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    /// Vector of layer `layer` (1-based).
    pub fn layer(&self, layer: usize) -> &[f64] {
        let d = self.dim();
        &self.0.data()[(layer - 1) * d..layer * d]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.0.data_mut()[(layer - 1) * d..layer * d]
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    /// Per-layer `[N, d_w]` constants for a batch of codes.
    pub fn batch_constants(g: &mut Graph, codes: &[&LatentCode]) -> Vec<Var> {
        Self::batch_tensors(codes).into_iter().map(|t| g.constant(t)).collect()
    }

    /// Per-layer `[N, d_w]` arrays for a batch of codes.
    pub fn batch_tensors(codes: &[&LatentCode]) -> Vec<Tensor> {
        let (layers, d) = (codes[0].layers(), codes[0].dim());
        (1..=layers)
            .map(|l| {
                let data = codes.iter().flat_map(|c| c.layer(l).iter().copied()).collect();
                Tensor::new(&[codes.len(), d], data)
            })
            .collect()
    }

    /// Splits per-layer `[N, d_w]` arrays back into codes.
    pub fn unbatch(layers: &[&Tensor]) -> Vec<LatentCode> {
        let n = layers[0].shape()[0];
        let d = layers[0].shape()[1];
        (0..n)
            .map(|i| {
                let data = layers.iter().flat_map(|t| t.data()[i * d..(i + 1) * d].iter().copied()).collect();
                LatentCode(Tensor::new(&[layers.len(), d], data))
            })
            .collect()
    }
}

/// A modulated convolution: style scale, shared kernel, demodulation.
#[derive(Clone, Debug)]
pub struct StyleLayer {
    pub kernel: Param,
    pub affine: Linear,
    pub bias: Param,
}

impl_module!(StyleLayer { kernel, affine, bias });

impl StyleLayer {
    fn new<R: rand::Rng + ?Sized>(cin: usize, cout: usize, k: usize, d_w: usize, rng: &mut R) -> Self {
        let mut affine = Linear::new(d_w, cin, rng);
        *affine.weight.value_mut() = Tensor::randn(&[cin, d_w], 1.0 / libm::sqrt(d_w as f64), rng);
        *affine.bias.value_mut() = Tensor::ones(&[cin]);
        StyleLayer {
            kernel: Param::new(Tensor::randn(&[cout, cin, k, k], 1.0, rng)),
            affine,
            bias: Param::new(Tensor::zeros(&[cout])),
        }
    }

    /// `x: [N, C_in, H, W]` (or `[1, C_in, H, W]` broadcast against the style),
    /// `w: [N, d_w]`, `kernel: [C_out, C_in, k, k]`.
    pub fn forward(&self, g: &mut Graph, x: Var, w: Var, kernel: Var) -> Var {
        let n = g.shape(w)[0];
        let [cout, cin, k, _] = <[usize; 4]>::try_from(g.shape(kernel)).expect("4-D kernel");
        let s = self.affine.forward(g, w);
        let s4 = g.reshape(s, &[n, cin, 1, 1]);
        let xm = g.mul(x, s4);
        let y = g.conv2d(xm, kernel, ConvSpec { stride: 1, pad: k / 2 });
        let ksq = g.square(kernel);
        let ksum = g.sum_axes(ksq, &[2, 3]);
        let ksum = g.reshape(ksum, &[cout, cin]);
        let s2 = g.square(s);
        let energy = g.matmul_t(s2, false, ksum, true);
        let energy = g.add_scalar(energy, DEMOD_EPS);
        let demod = g.powf(energy, -0.5);
        let demod = g.reshape(demod, &[n, cout, 1, 1]);
        let y = g.mul(y, demod);
        let b = g.param(&self.bias);
        let b = g.reshape(b, &[1, cout, 1, 1]);
        let y = g.add(y, b);
        g.leaky_relu(y, LRELU)
    }
}

/// The synthesis network: learned constant, modulated conv layers, toRGB.
#[derive(Clone, Debug)]
pub struct Generator {
    pub constant: Param,
    pub layers: Vec<StyleLayer>,
    pub to_rgb: Conv2d,
    config: GenConfig,
}

impl_module!(Generator { constant, layers, to_rgb });

impl Generator {
    pub fn new<R: rand::Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c0 = config.in_channels(1);
        let constant = Param::new(Tensor::randn(&[1, c0, config.base_res, config.base_res], 1.0, rng));
        let layers = (1..=config.layers())
            .map(|l| StyleLayer::new(config.in_channels(l), config.out_channels(l), config.kernel, config.d_w, rng))
            .collect();
        let last = *config.channels.last().expect("validated");
        let to_rgb = Conv2d::new(last, 3, 1, 1, rng);
        Ok(Generator { constant, layers, to_rgb, config: config.clone() })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    /// Kernel θ of layer `layer` (1-based).
    pub fn kernel(&self, layer: usize) -> &Tensor {
        self.layers[layer - 1].kernel.value()
    }

    pub fn kernel_mut(&mut self, layer: usize) -> &mut Tensor {
        self.layers[layer - 1].kernel.value_mut()
    }

    /// Images `[N, 3, R, R]` in `(0, 1)` from per-layer latents `w[i]: [N, d_w]`.
    /// Layers listed in `kernels` use that kernel instead of their own.
    pub fn forward(&self, g: &mut Graph, w: &[Var], kernels: &BTreeMap<usize, Var>) -> Var {
        assert_eq!(w.len(), self.layers.len(), "one latent per layer");
        let mut x = g.param(&self.constant);
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            let kernel = match kernels.get(&l) {
                Some(k) => *k,
                None => g.param(&layer.kernel),
            };
            x = layer.forward(g, x, w[i], kernel);
            if self.config.upsample_after.contains(&l) {
                x = g.upsample2x(x);
            }
        }
        let rgb = self.to_rgb.forward(g, x);
        g.sigmoid(rgb)
    }

    /// Renders a batch of latent codes.
    pub fn synthesize_batch(&self, codes: &[&LatentCode]) -> Result<Vec<Image>> {
        self.check_codes(codes)?;
        let mut g = Graph::new();
        g.freeze(self);
        let w = LatentCode::batch_constants(&mut g, codes);
        let y = self.forward(&mut g, &w, &BTreeMap::new());
        split_images(g.value(y))
    }

    /// `G(θ, w)`.
    pub fn synthesize(&self, w: &LatentCode) -> Result<Image> {
        Ok(self.synthesize_batch(&[w])?.remove(0))
    }

    pub fn check_codes(&self, codes: &[&LatentCode]) -> Result<()> {
        if codes.is_empty() {
            return Err(Error::Input(String::from("no latent codes given")));
        }
        for c in codes {
            if c.layers() != self.config.layers() || c.dim() != self.config.d_w {
                return Err(Error::Shape(format!(
                    "latent code is {}x{}, generator expects {}x{}",
                    c.layers(),
                    c.dim(),
                    self.config.layers(),
                    self.config.d_w
                )));
            }
        }
        Ok(())
    }

    /// Checks that every kernel matches the architecture.
    pub fn check_shapes(&self) -> Result<()> {
        for l in 1..=self.config.layers() {
            let want = self.config.kernel_shape(l);
            if self.kernel(l).shape() != want {
                return Err(Error::Shape(format!(
                    "layer {l} kernel is {:?}, architecture expects {:?}",
                    self.kernel(l).shape(),
                    want
                )));
            }
        }
        Ok(())
    }
}

/// Splits an `[N, 3, H, W]` tensor into images.
pub fn split_images(t: &Tensor) -> Result<Vec<Image>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!("expected [N, 3, H, W], got {s:?}")));
    }
    let plane = 3 * s[2] * s[3];
    t.data().chunks(plane).map(|c| Image::new(s[2], s[3], c.to_vec())).collect()
}

/// Convolutional encoder from images to W+ codes: a shared base vector plus
/// a per-layer offset.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub base: Linear,
    pub offsets: Vec<Linear>,
}

impl_module!(Encoder { convs, base, offsets });

impl Encoder {
    pub fn new<R: rand::Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for &c in &config.enc_channels {
            convs.push(Conv2d::new(cin, c, 3, 2, rng));
            cin = c;
        }
        let side = config.resolution() / 8;
        let flat = cin * side * side;
        let offsets = (0..config.layers())
            .map(|_| {
                let mut l = Linear::new(flat, config.d_w, rng);
                *l.weight.value_mut() = l.weight.value().map(|v| 0.1 * v);
                l
            })
            .collect();
        Encoder { convs, base: Linear::new(flat, config.d_w, rng), offsets }
    }

    /// Per-layer `[N, d_w]` codes and the mean squared offset.
    pub fn forward(&self, g: &mut Graph, x: Var) -> (Vec<Var>, Var) {
        let n = g.shape(x)[0];
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, h);
            h = g.leaky_relu(h, LRELU);
        }
        let flat = g.value(h).numel() / n;
        let h = g.reshape(h, &[n, flat]);
        let base = self.base.forward(g, h);
        let mut codes = Vec::with_capacity(self.offsets.len());
        let mut penalty = None;
        for o in &self.offsets {
            let off = o.forward(g, h);
            let sq = g.square(off);
            let m = g.mean(sq);
            penalty = Some(match penalty {
                Some(p) => g.add(p, m),
                None => m,
            });
            codes.push(g.add(base, off));
        }
        let penalty = penalty.expect("at least one layer");
        let penalty = g.scale(penalty, 1.0 / self.offsets.len() as f64);
        (codes, penalty)
    }
}

/// Two-layer perceptron from `z ~ N(0, I)` to a single latent vector.
#[derive(Clone, Debug)]
pub struct MappingNet {
    pub hidden: Linear,
    pub out: Linear,
}

impl_module!(MappingNet { hidden, out });

impl MappingNet {
    pub fn new<R: rand::Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Self {
        MappingNet { hidden: Linear::new(config.d_z, config.mapping_hidden, rng), out: Linear::new(config.mapping_hidden, config.d_w, rng) }
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Var {
        let h = self.hidden.forward(g, z);
        let h = g.leaky_relu(h, LRELU);
        self.out.forward(g, h)
    }
}

/// Pretraining schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight of the squared per-layer offset penalty.
    pub offset_weight: f64,
    /// Weight of the feature-space loss when a feature net is supplied.
    pub feature_weight: f64,
    pub mapping_steps: usize,
    pub min_samples: usize,
    pub psnr_gate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
            offset_weight: 0.01,
            feature_weight: 0.05,
            mapping_steps: 400,
            min_samples: 2000,
            psnr_gate: 22.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Total loss at every step.
    pub losses: Vec<f64>,
    pub holdout_psnr: f64,
}

/// Generator, encoder and mapping network trained together.
#[derive(Clone, Debug)]
pub struct GenModel {
    pub generator: Generator,
    pub encoder: Encoder,
    pub mapping: MappingNet,
    trained: bool,
}

impl_module!(GenModel { generator, encoder, mapping });

impl GenModel {
    pub fn new(config: &GenConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let generator = Generator::new(config, &mut rng)?;
        let encoder = Encoder::new(config, &mut rng);
        let mapping = MappingNet::new(config, &mut rng);
        Ok(GenModel { generator, encoder, mapping, trained: false })
    }

    pub fn config(&self) -> &GenConfig {
        self.generator.config()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks the model usable for inversion, e.g. after loading stored weights.
    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn synthesize(&self, w: &LatentCode) -> Result<Image> {
        self.generator.synthesize(w)
    }

    /// The `z` behind [`GenModel::sample_latent`].
    pub fn sample_z(&self, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..self.config().d_z).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Maps `z(seed)` through the mapping network and broadcasts it to every layer.
    pub fn sample_latent(&self, seed: u64) -> LatentCode {
        let z = self.sample_z(seed);
        let mut g = Graph::new();
        g.freeze(&self.mapping);
        let zv = g.constant(Tensor::new(&[1, z.len()], z));
        let w = self.mapping.forward(&mut g, zv);
        LatentCode::broadcast(g.value(w).data(), self.config().layers())
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        let r = self.config().resolution();
        if images.is_empty() {
            return Err(Error::Input(String::from("no images given")));
        }
        for im in images {
            if im.height() != r || im.width() != r {
                return Err(Error::Shape(format!("expected {r}x{r} image, got {}x{}", im.height(), im.width())));
            }
        }
        Ok(())
    }

    /// Encodes images to W+ codes.
    pub fn invert_batch(&self, images: &[&Image]) -> Result<Vec<LatentCode>> {
        if !self.trained {
            return Err(Error::Usage(String::from("inversion encoder is untrained")));
        }
        self.check_images(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            g.freeze(&self.encoder);
            let x = g.constant(Image::batch(chunk)?);
            let (codes, _) = self.encoder.forward(&mut g, x);
            let vals: Vec<&Tensor> = codes.iter().map(|v| g.value(*v)).collect();
            out.extend(LatentCode::unbatch(&vals));
        }
        Ok(out)
    }

    pub fn invert(&self, x: &Image) -> Result<LatentCode> {
        Ok(self.invert_batch(&[x])?.remove(0))
    }

    /// `G(θ, invert(x))` for each image.
    pub fn reconstruct_batch(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let codes = self.invert_batch(images)?;
        let refs: Vec<&LatentCode> = codes.iter().collect();
        let mut out = Vec::with_capacity(images.len());
        for chunk in refs.chunks(64) {
            out.extend(self.generator.synthesize_batch(chunk)?);
        }
        Ok(out)
    }

    /// Trains generator and encoder as an autoencoder on `train`, fits the
    /// mapping network to the encoder's latent statistics, and checks the
    /// reconstruction PSNR on `holdout`.
    ///
    /// On a missed gate the trained weights stay in `self` and the error
    /// carries the loss curve.
    pub fn pretrain(
        &mut self,
        train: &[&Image],
        holdout: &[&Image],
        cfg: &PretrainConfig,
        features: Option<&dyn FeatureNet>,
        observer: &mut dyn FnMut(usize, f64),
    ) -> Result<PretrainReport> {
        if train.len() < cfg.min_samples {
            return Err(Error::Input(format!("pretraining needs at least {} samples, got {}", cfg.min_samples, train.len())));
        }
        self.check_images(train)?;
        self.check_images(holdout)?;
        let mut rng = derive(cfg.seed, 0x9e7);
        let mut opt = Adam::new(cfg.learning_rate).with_clip(5.0);
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            opt.lr = cosine_lr(cfg.learning_rate, step, cfg.steps);
            let batch: Vec<&Image> = (0..cfg.batch_size).map(|_| train[rng.random_range(0..train.len())]).collect();
            let mut g = Graph::new();
            g.freeze(&self.mapping);
            if let Some(f) = features {
                f.freeze(&mut g);
            }
            let x = g.constant(Image::batch(&batch)?);
            let (codes, penalty) = self.encoder.forward(&mut g, x);
            let y = self.generator.forward(&mut g, &codes, &BTreeMap::new());
            let diff = g.sub(y, x);
            let sq = g.square(diff);
            let mut loss = g.mean(sq);
            let pen = g.scale(penalty, cfg.offset_weight);
            loss = g.add(loss, pen);
            if let (Some(f), true) = (features, cfg.feature_weight > 0.0) {
                let fy = f.features(&mut g, y);
                let fx = f.features(&mut g, x);
                let d = g.sub(fy, fx);
                let d = g.square(d);
                let d = g.mean(d);
                let d = g.scale(d, cfg.feature_weight);
                loss = g.add(loss, d);
            }
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, detail: String::from("pretraining loss is not finite") });
            }
            losses.push(value);
            observer(step, value);
            if step % 200 == 0 {
                debug!("pretrain step {step}: loss {value:.5}");
            }
            let grads = g.backward(loss);
            opt.step(self, &grads);
        }
        self.trained = true;
        self.fit_mapping(train, cfg)?;
        let recon = self.reconstruct_batch(holdout)?;
        let holdout_psnr =
            holdout.iter().zip(&recon).map(|(x, y)| crate::evalkit::psnr(x, y)).sum::<Result<f64>>()? / holdout.len() as f64;
        info!("pretraining done: held-out PSNR {holdout_psnr:.2} dB");
        if holdout_psnr < cfg.psnr_gate {
            return Err(Error::Gate {
                what: String::from("generator pretraining"),
                detail: format!("held-out PSNR {holdout_psnr:.2} dB below {} dB", cfg.psnr_gate),
                curve: losses,
            });
        }
        Ok(PretrainReport { losses, holdout_psnr })
    }

    /// Matches the mapping network's output mean and covariance to those of
    /// the encoder's base vectors over `images`.
    pub fn fit_mapping(&mut self, images: &[&Image], cfg: &PretrainConfig) -> Result<()> {
        let d = self.config().d_w;
        let take = images.len().min(1024);
        let mut bases = Vec::with_capacity(take * d);
        for chunk in images[..take].chunks(64) {
            let mut g = Graph::new();
            g.freeze(&self.encoder);
            let x = g.constant(Image::batch(chunk)?);
            let n = chunk.len();
            let mut h = x;
            for c in &self.encoder.convs {
                h = c.forward(&mut g, h);
                h = g.leaky_relu(h, LRELU);
            }
            let flat = g.value(h).numel() / n;
            let h = g.reshape(h, &[n, flat]);
            let b = self.encoder.base.forward(&mut g, h);
            bases.extend_from_slice(g.value(b).data());
        }
        let (mean, cov) = moments(&Tensor::new(&[take, d], bases));
        let mut opt = Adam::new(5e-3);
        let mut rng = derive(cfg.seed, 0x3a9);
        let batch = 256;
        let dz = self.config().d_z;
        for _ in 0..cfg.mapping_steps {
            let z: Vec<f64> = (0..batch * dz).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut g = Graph::new();
            let zv = g.constant(Tensor::new(&[batch, dz], z));
            let w = self.mapping.forward(&mut g, zv);
            let sum = g.sum_axes(w, &[0]);
            let mu = g.scale(sum, 1.0 / batch as f64);
            let centered = g.sub(w, mu);
            let c = g.matmul_t(centered, true, centered, false);
            let c = g.scale(c, 1.0 / (batch - 1) as f64);
            let tm = g.constant(mean.clone().reshape(&[1, d]));
            let tc = g.constant(cov.clone());
            let dm = g.sub(mu, tm);
            let dm = g.square(dm);
            let lm = g.sum(dm);
            let dc = g.sub(c, tc);
            let dc = g.square(dc);
            let lc = g.sum(dc);
            let lc = g.scale(lc, 1.0 / d as f64);
            let loss = g.add(lm, lc);
            let grads = g.backward(loss);
            opt.step(&mut self.mapping, &grads);
        }
        Ok(())
    }
}

/// Cosine decay from `lr` to 5% of it.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    lr * (0.05 + 0.95 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t)))
}

/// Column mean and sample covariance of an `[n, d]` matrix.
pub fn moments(x: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for row in x.data().chunks(d) {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]) / (n.max(2) - 1) as f64;
            }
        }
    }
    (Tensor::new(&[d], mean), Tensor::new(&[d, d], cov))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> GenModel {
        GenModel::new(&GenConfig::micro(), 1).unwrap()
    }

    #[test]
    fn standard_plan() {
        let c = GenConfig::standard();
        c.validate().unwrap();
        assert_eq!(c.resolution(), 32);
        assert_eq!((1..=8).map(|l| c.layer_resolution(l)).collect::<Vec<_>>(), [4, 4, 8, 8, 16, 16, 32, 32]);
        assert_eq!(c.kernel_shape(5), [32, 64, 3, 3]);
        assert_eq!(c.kernel_shape(1), [64, 64, 3, 3]);
    }

    #[test]
    fn synthesize_deterministic_and_bounded() {
        let m = micro();
        let w = m.sample_latent(3);
        let a = m.synthesize(&w).unwrap();
        assert_eq!(a, m.synthesize(&w).unwrap());
        assert_eq!((a.height(), a.width()), (8, 8));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sampled_latent_is_broadcast() {
        let m = micro();
        let w = m.sample_latent(11);
        assert_eq!(w, m.sample_latent(11));
        for l in 2..=w.layers() {
            assert_eq!(w.layer(l), w.layer(1));
        }
    }

    #[test]
    fn z_is_standard_normal() {
        let m = GenModel::new(&GenConfig::standard(), 0).unwrap();
        let d = m.config().d_z;
        let mut mean = vec![0.0; d];
        for s in 0..1000 {
            for (acc, v) in mean.iter_mut().zip(m.sample_z(s)) {
                *acc += v / 1000.0;
            }
        }
        assert!(mean.iter().all(|v| v.abs() <= 0.15), "{mean:?}");
    }

    #[test]
    fn untrained_inversion_is_a_usage_error() {
        let m = micro();
        let x = Image::filled(8, 8, [0.5; 3]);
        assert!(matches!(m.invert(&x), Err(Error::Usage(_))));
    }

    #[test]
    fn wrong_latent_shape_rejected() {
        let m = micro();
        let w = LatentCode::broadcast(&[0.0; 3], 4);
        assert!(matches!(m.synthesize(&w), Err(Error::Shape(_))));
    }

    #[test]
    fn broken_kernel_shape_reported() {
        let mut m = micro();
        *m.generator.kernel_mut(2) = Tensor::zeros(&[4, 3, 3, 3]);
        match m.generator.check_shapes() {
            Err(Error::Shape(msg)) => assert!(msg.contains("layer 2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn latent_batch_round_trip() {
        let a = LatentCode::new(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.])).unwrap();
        let b = LatentCode::new(Tensor::new(&[2, 3], vec![7., 8., 9., 10., 11., 12.])).unwrap();
        let t = LatentCode::batch_tensors(&[&a, &b]);
        assert_eq!(t[0].data(), &[1., 2., 3., 7., 8., 9.]);
        let refs: Vec<&Tensor> = t.iter().collect();
        assert_eq!(LatentCode::unbatch(&refs), vec![a, b]);
        assert!(LatentCode::new(Tensor::new(&[1, 1], vec![f64::NAN])).is_err());
    }

    #[test]
    fn moments_match_closed_form() {
        let x = Tensor::new(&[3, 2], vec![1., 0., 2., 2., 3., 4.]);
        let (m, c) = moments(&x);
        assert_eq!(m.data(), &[2., 2.]);
        assert_eq!(c.data(), &[1., 2., 2., 4.]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0, 100) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 100, 100) - 0.05).abs() < 1e-12);
    }
}
