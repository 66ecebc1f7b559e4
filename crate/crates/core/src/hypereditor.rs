//! The hypernetwork editor: image features modulated by a prompt direction
//! feed per-layer heads that emit multiplicative factors for the generator's
//! convolution kernels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::embedspace::EmbedModel;
use crate::image::Image;
use crate::nn::{Conv2d, Linear, Module, Param};
use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::toygen::{GenConfig, GenModel, Generator, LatentCode};
use crate::{impl_module, Error, Result};

const LRELU: f64 = 0.2;

/// Per-layer factors `Δ_i`, keyed by 1-based layer number.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFactors(BTreeMap<usize, Tensor>);

impl WeightFactors {
    pub fn new(factors: BTreeMap<usize, Tensor>) -> Result<Self> {
        for (l, t) in &factors {
            if !t.is_finite() {
                return Err(Error::Input(format!("factors of layer {l} are not finite")));
            }
        }
        Ok(WeightFactors(factors))
    }

    /// All-zero factors for `layers` of a generator with plan `cfg`.
    pub fn zeros(cfg: &GenConfig, layers: &[usize]) -> Self {
        WeightFactors(layers.iter().map(|&l| (l, Tensor::zeros(&cfg.kernel_shape(l)))).collect())
    }

    pub fn layers(&self) -> Vec<usize> {
        self.0.keys().copied().collect()
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.0.get(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &Tensor)> {
        self.0.iter()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.values().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    /// Largest entrywise difference; layer sets must agree.
    pub fn max_abs_diff(&self, other: &WeightFactors) -> Result<f64> {
        self.same_layers(other)?;
        Ok(self.0.iter().map(|(l, t)| t.max_abs_diff(&other.0[l])).fold(0.0, f64::max))
    }

    fn same_layers(&self, other: &WeightFactors) -> Result<()> {
        if self.layers() != other.layers() {
            return Err(Error::Input(format!("factor layer sets differ: {:?} vs {:?}", self.layers(), other.layers())));
        }
        for (l, t) in &self.0 {
            if t.shape() != other.0[l].shape() {
                return Err(Error::Shape(format!("layer {l} factors differ in shape")));
            }
        }
        Ok(())
    }
}

/// `η·Δa + (1 − η)·Δb`, layer by layer.
pub fn interpolate_factors(da: &WeightFactors, db: &WeightFactors, eta: f64) -> Result<WeightFactors> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Input(format!("interpolation parameter {eta} outside [0, 1]")));
    }
    da.same_layers(db)?;
    let out = da.0.iter().map(|(l, a)| (*l, a.zip_map(&db.0[l], |x, y| eta * x + (1.0 - eta) * y))).collect();
    Ok(WeightFactors(out))
}

/// `θ̂_i = θ_i + Δ_i ⊙ θ_i` for every layer in `delta`; everything else is copied.
pub fn reassign(theta: &Generator, delta: &WeightFactors) -> Result<Generator> {
    let layers = theta.config().layers();
    for (&l, d) in delta.iter() {
        if l == 0 || l > layers {
            return Err(Error::Shape(format!("layer {l} does not exist in a {layers}-layer generator")));
        }
        if d.shape() != theta.kernel(l).shape() {
            return Err(Error::Shape(format!(
                "layer {l}: factors {:?} do not match kernel {:?}",
                d.shape(),
                theta.kernel(l).shape()
            )));
        }
    }
    let mut out = theta.clone();
    for (&l, d) in delta.iter() {
        *out.kernel_mut(l) = theta.kernel(l).zip_map(d, |t, f| t + f * t);
    }
    Ok(out)
}

/// Editor architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditorConfig {
    /// Width of the stem and residual blocks.
    pub backbone_width: usize,
    pub residual_blocks: usize,
    /// Channels of the feature map handed to the heads.
    pub feature_channels: usize,
    pub fmm_hidden: usize,
    pub d_e: usize,
    pub resolution: usize,
}

impl EditorConfig {
    pub fn standard() -> Self {
        EditorConfig { backbone_width: 64, residual_blocks: 2, feature_channels: 128, fmm_hidden: 128, d_e: 64, resolution: 32 }
    }

    /// A tiny editor over 8×8 images; for gradient checks.
    pub fn micro() -> Self {
        EditorConfig { backbone_width: 3, residual_blocks: 1, feature_channels: 4, fmm_hidden: 4, d_e: 5, resolution: 8 }
    }

    pub fn feature_side(&self) -> usize {
        self.resolution / 2
    }

    /// Stride-2 convolutions a head needs to reach 1×1.
    pub fn head_downsamples(&self) -> usize {
        self.feature_side().trailing_zeros() as usize
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub a: Conv2d,
    pub b: Conv2d,
}

impl_module!(ResBlock { a, b });

/// Stride-2 stem, residual blocks and a 1×1 projection to the feature width.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub proj: Conv2d,
}

impl_module!(Backbone { stem, blocks, proj });

impl Backbone {
    fn new<R: rand::Rng + ?Sized>(cfg: &EditorConfig, rng: &mut R) -> Self {
        let w = cfg.backbone_width;
        let blocks = (0..cfg.residual_blocks)
            .map(|_| {
                let mut b = Conv2d::new(w, w, 3, 1, rng);
                *b.weight.value_mut() = b.weight.value().map(|v| 0.5 * v);
                ResBlock { a: Conv2d::new(w, w, 3, 1, rng), b }
            })
            .collect();
        Backbone { stem: Conv2d::new(3, w, 3, 2, rng), blocks, proj: Conv2d::new(w, cfg.feature_channels, 1, 1, rng) }
    }

    /// `x̄`: `[N, C_h, R/2, R/2]` from `x: [N, 3, R, R]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let x = g.add_scalar(x, -0.5);
        let h = self.stem.forward(g, x);
        let mut h = g.leaky_relu(h, LRELU);
        for b in &self.blocks {
            let r = b.a.forward(g, h);
            let r = g.leaky_relu(r, LRELU);
            let r = b.b.forward(g, r);
            let s = g.add(h, r);
            h = g.leaky_relu(s, LRELU);
        }
        self.proj.forward(g, h)
    }
}

/// Per-channel scale `α(Δt)` and shift `β(Δt)`.
#[derive(Clone, Debug)]
pub struct FusionModulator {
    pub alpha: [Linear; 2],
    pub beta: [Linear; 2],
}

impl Module for FusionModulator {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        for (name, l) in [("alpha.0", &self.alpha[0]), ("alpha.1", &self.alpha[1]), ("beta.0", &self.beta[0]), ("beta.1", &self.beta[1])] {
            l.visit(&crate::nn::join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let [a0, a1] = &mut self.alpha;
        let [b0, b1] = &mut self.beta;
        for (name, l) in [("alpha.0", a0), ("alpha.1", a1), ("beta.0", b0), ("beta.1", b1)] {
            l.visit_mut(&crate::nn::join(prefix, name), f);
        }
    }
}

impl FusionModulator {
    fn new<R: rand::Rng + ?Sized>(cfg: &EditorConfig, rng: &mut R) -> Self {
        let (d, h, c) = (cfg.d_e, cfg.fmm_hidden, cfg.feature_channels);
        let mut alpha_out = Linear::new(h, c, rng);
        *alpha_out.bias.value_mut() = Tensor::ones(&[c]);
        FusionModulator { alpha: [Linear::new(d, h, rng), alpha_out], beta: [Linear::new(d, h, rng), Linear::new(h, c, rng)] }
    }

    fn mlp(g: &mut Graph, layers: &[Linear; 2], dt: Var) -> Var {
        let h = layers[0].forward(g, dt);
        let h = g.leaky_relu(h, LRELU);
        layers[1].forward(g, h)
    }

    /// `α(Δt)` and `β(Δt)` as `[N, C_h]`.
    pub fn coefficients(&self, g: &mut Graph, dt: Var) -> (Var, Var) {
        (Self::mlp(g, &self.alpha, dt), Self::mlp(g, &self.beta, dt))
    }

    /// `x̂ = x̄·α(Δt) + β(Δt)` per channel.
    pub fn forward(&self, g: &mut Graph, xbar: Var, dt: Var) -> Var {
        let (a, b) = self.coefficients(g, dt);
        fuse_modulate(g, xbar, a, b)
    }
}

/// Per-channel affine modulation of `xbar: [N, C, H, W]` by `alpha, beta: [N|1, C]`.
pub fn fuse_modulate(g: &mut Graph, xbar: Var, alpha: Var, beta: Var) -> Var {
    let c = g.shape(xbar)[1];
    let n = g.shape(alpha)[0];
    let a = g.reshape(alpha, &[n, c, 1, 1]);
    let b = g.reshape(beta, &[n, c, 1, 1]);
    let s = g.mul(xbar, a);
    g.add(s, b)
}

/// A square map on each `C_out × C_in` slice in Kronecker-factored form:
/// `vec(Δ_p) ↦ (A ⊗ B)·vec(Δ_p) + c`, i.e. `A·Δ_p·Bᵀ + C`.
#[derive(Clone, Debug)]
pub struct SliceMap {
    pub rows: Param,
    pub cols: Param,
    pub bias: Param,
}

impl_module!(SliceMap { rows, cols, bias });

impl SliceMap {
    fn identity(cout: usize, cin: usize) -> Self {
        SliceMap { rows: Param::new(eye(cout)), cols: Param::new(eye(cin)), bias: Param::new(Tensor::zeros(&[cout, cin])) }
    }

    fn zero(cout: usize, cin: usize) -> Self {
        SliceMap { rows: Param::new(Tensor::zeros(&[cout, cout])), cols: Param::new(eye(cin)), bias: Param::new(Tensor::zeros(&[cout, cin])) }
    }

    /// `x: [M, C_out, C_in]` → same shape.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let [m, cout, cin] = <[usize; 3]>::try_from(g.shape(x)).expect("3-D slices");
        let a = g.param(&self.rows);
        let b = g.param(&self.cols);
        let x = g.reshape(x, &[m * cout, cin]);
        let xb = g.matmul_t(x, false, b, true);
        let xb = g.reshape(xb, &[m, cout, cin]);
        let xt = g.permute(xb, &[0, 2, 1]);
        let xt = g.reshape(xt, &[m * cin, cout]);
        let axb = g.matmul_t(xt, false, a, true);
        let axb = g.reshape(axb, &[m, cin, cout]);
        let y = g.permute(axb, &[0, 2, 1]);
        let c = g.param(&self.bias);
        g.add(y, c)
    }
}

fn eye(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

/// One layer's factor generator.
#[derive(Clone, Debug)]
pub struct HyperHead {
    pub downsample: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: SliceMap,
    pub fc4: SliceMap,
    shape: [usize; 4],
}

impl_module!(HyperHead { downsample, fc1, fc2, fc3, fc4 });

impl HyperHead {
    /// A head for a kernel of shape `[C_out, C_in, k, k]`; FC4 starts at zero.
    pub fn new<R: rand::Rng + ?Sized>(cfg: &EditorConfig, shape: [usize; 4], rng: &mut R) -> Self {
        let [cout, cin, k, _] = shape;
        let c = cfg.feature_channels;
        let downsample = (0..cfg.head_downsamples()).map(|_| Conv2d::new(c, c, 3, 2, rng)).collect();
        let mut fc1 = Linear::new(c, k * k * cin, rng);
        let mut fc2 = Linear::new(c, k * k * cout, rng);
        *fc1.weight.value_mut() = Tensor::randn(fc1.weight.shape(), 1.0 / libm::sqrt(c as f64), rng);
        *fc2.weight.value_mut() = Tensor::randn(fc2.weight.shape(), 1.0 / libm::sqrt(c as f64), rng);
        HyperHead { downsample, fc1, fc2, fc3: SliceMap::identity(cout, cin), fc4: SliceMap::zero(cout, cin), shape }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        self.shape
    }

    /// `v1 = FC1(x'')`, `v2 = FC2(x'')` as `[N, k², C_in]` and `[N, k², C_out]`.
    pub fn vectors(&self, g: &mut Graph, xhat: Var) -> (Var, Var) {
        let n = g.shape(xhat)[0];
        let [cout, cin, k, _] = self.shape;
        let mut h = xhat;
        for c in &self.downsample {
            h = c.forward(g, h);
            h = g.leaky_relu(h, LRELU);
        }
        let c = g.shape(h)[1];
        let h = g.reshape(h, &[n, c]);
        let v1 = self.fc1.forward(g, h);
        let v2 = self.fc2.forward(g, h);
        (g.reshape(v1, &[n, k * k, cin]), g.reshape(v2, &[n, k * k, cout]))
    }

    /// Per kernel position, `Δ̂[p] = v2[p] ⊗ v1[p]`: `[N, k², C_out, C_in]`.
    pub fn outer(&self, g: &mut Graph, v1: Var, v2: Var) -> Var {
        let [n, kk, cin] = <[usize; 3]>::try_from(g.shape(v1)).expect("3-D v1");
        let cout = g.shape(v2)[2];
        let a = g.reshape(v2, &[n, kk, cout, 1]);
        let b = g.reshape(v1, &[n, kk, 1, cin]);
        g.mul(a, b)
    }

    /// Factors `Δ_i` as `[N, C_out, C_in, k, k]`.
    pub fn forward(&self, g: &mut Graph, xhat: Var) -> Var {
        let n = g.shape(xhat)[0];
        let [cout, cin, k, _] = self.shape;
        let (v1, v2) = self.vectors(g, xhat);
        let d = self.outer(g, v1, v2);
        let d = g.reshape(d, &[n * k * k, cout, cin]);
        let d = self.fc3.forward(g, d);
        let d = g.leaky_relu(d, LRELU);
        let d = self.fc4.forward(g, d);
        let d = g.reshape(d, &[n, k * k, cout, cin]);
        let d = g.permute(d, &[0, 2, 3, 1]);
        g.reshape(d, &[n, cout, cin, k, k])
    }
}

/// Backbone, fusion modulator and one head per selected layer.
#[derive(Clone, Debug)]
pub struct HyperEditor {
    pub backbone: Backbone,
    pub fmm: FusionModulator,
    pub heads: BTreeMap<usize, HyperHead>,
    config: EditorConfig,
}

impl_module!(HyperEditor { backbone, fmm, heads });

/// Result of [`HyperEditor::edit`].
#[derive(Clone, Debug, PartialEq)]
pub struct EditOutput {
    pub image: Image,
    pub delta: WeightFactors,
    pub w_init: LatentCode,
}

impl HyperEditor {
    /// An editor with heads for `layers` (1-based) of a generator with plan `gen`.
    pub fn new(cfg: &EditorConfig, gen: &GenConfig, layers: &[usize], seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input(String::from("an editor needs at least one layer")));
        }
        if cfg.resolution != gen.resolution() {
            return Err(Error::Shape(format!("editor resolution {} differs from generator's {}", cfg.resolution, gen.resolution())));
        }
        if !cfg.feature_side().is_power_of_two() {
            return Err(Error::Input(format!("feature side {} is not a power of two", cfg.feature_side())));
        }
        let mut rng = seeded(seed);
        let backbone = Backbone::new(cfg, &mut rng);
        let fmm = FusionModulator::new(cfg, &mut rng);
        let mut heads = BTreeMap::new();
        for &l in layers {
            if l == 0 || l > gen.layers() {
                return Err(Error::Input(format!("layer {l} outside 1..={}", gen.layers())));
            }
            heads.insert(l, HyperHead::new(cfg, gen.kernel_shape(l), &mut rng));
        }
        Ok(HyperEditor { backbone, fmm, heads, config: cfg.clone() })
    }

    pub fn config(&self) -> &EditorConfig {
        &self.config
    }

    pub fn layers(&self) -> Vec<usize> {
        self.heads.keys().copied().collect()
    }

    pub fn head_param_count(&self) -> usize {
        self.heads.values().map(Module::param_count).sum()
    }

    /// `x̄` for `x: [N, 3, R, R]`.
    pub fn extract_features(&self, g: &mut Graph, x: Var) -> Var {
        self.backbone.forward(g, x)
    }

    /// Per-layer `[N, C_out, C_in, k, k]` factors for images `x` and
    /// directions `dt: [N|1, d_e]`.
    pub fn factor_vars(&self, g: &mut Graph, x: Var, dt: Var) -> BTreeMap<usize, Var> {
        let xbar = self.extract_features(g, x);
        let xhat = self.fmm.forward(g, xbar, dt);
        self.heads.iter().map(|(&l, h)| (l, h.forward(g, xhat))).collect()
    }

    fn check_inputs(&self, x: &Image, dt: &[f64]) -> Result<()> {
        let r = self.config.resolution;
        if x.height() != r || x.width() != r {
            return Err(Error::Shape(format!("expected {r}x{r} image, got {}x{}", x.height(), x.width())));
        }
        if dt.len() != self.config.d_e {
            return Err(Error::Shape(format!("direction has {} entries, editor expects {}", dt.len(), self.config.d_e)));
        }
        Ok(())
    }

    /// `x̄` of one image as `[C_h, R/2, R/2]`.
    pub fn features_of(&self, x: &Image) -> Result<Tensor> {
        self.check_inputs(x, &vec![0.0; self.config.d_e])?;
        let mut g = Graph::new();
        g.freeze(self);
        let xv = g.constant(x.to_tensor());
        let f = self.extract_features(&mut g, xv);
        let s = g.shape(f)[1..].to_vec();
        Ok(g.value(f).clone().reshape(&s))
    }

    /// `Δ` for one image and prompt direction.
    pub fn factors(&self, x: &Image, dt: &[f64]) -> Result<WeightFactors> {
        self.check_inputs(x, dt)?;
        let mut g = Graph::new();
        g.freeze(self);
        let xv = g.constant(x.to_tensor());
        let dv = g.constant(Tensor::from_slice(&[1, dt.len()], dt));
        let vars = self.factor_vars(&mut g, xv, dv);
        let out = vars
            .iter()
            .map(|(&l, v)| {
                let s = g.shape(*v)[1..].to_vec();
                (l, g.value(*v).clone().reshape(&s))
            })
            .collect();
        WeightFactors::new(out)
    }

    /// `y = G(θ + Δ⊙θ, invert(x))` with `Δ` conditioned on `E_t(target) − E_t(source)`.
    pub fn edit(&self, gen: &GenModel, embed: &EmbedModel, x: &Image, target: &str, source: &str) -> Result<EditOutput> {
        let dt = embed.prompt_direction(target, source)?;
        let w_init = gen.invert(x)?;
        let delta = self.factors(x, &dt)?;
        let image = synthesize_with(gen, &delta, &w_init)?;
        Ok(EditOutput { image, delta, w_init })
    }
}

/// `G(reassign(θ, Δ), w)`.
pub fn synthesize_with(gen: &GenModel, delta: &WeightFactors, w: &LatentCode) -> Result<Image> {
    reassign(&gen.generator, delta)?.synthesize(w)
}

/// In-graph reassignment of one sample's kernels: `θ + Δ⊙θ` with `θ` constant.
/// `factors[l]` is `[N, C_out, C_in, k, k]`; `sample` picks the row.
pub fn reassigned_kernels(g: &mut Graph, gen: &Generator, factors: &BTreeMap<usize, Var>, sample: usize) -> BTreeMap<usize, Var> {
    factors
        .iter()
        .map(|(&l, &f)| {
            let shape = g.shape(f).to_vec();
            let per = shape[1..].iter().product::<usize>();
            let flat = g.reshape(f, &[shape[0], per]);
            let row = g.index_rows(flat, &[sample]);
            let delta = g.reshape(row, &shape[1..]);
            let theta = g.constant(gen.kernel(l).clone());
            let scaled = g.mul(delta, theta);
            (l, g.add(theta, scaled))
        })
        .collect()
}
