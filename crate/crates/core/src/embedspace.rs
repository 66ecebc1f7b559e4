//! A joint text–image embedding trained contrastively on captioned shapes,
//! plus the alignment losses that steer editing.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use log::{debug, info, warn};
use rand::Rng as _;

use crate::autograd::{Graph, Var};
use crate::image::Image;
use crate::nn::{Adam, Conv2d, FeatureNet, Linear, Param};
use crate::rng::{derive, seeded};
use crate::synthworld::{self, CaptionedSample, SceneSpec, Template, VOCAB};
use crate::tensor::Tensor;
use crate::{impl_module, Error, Result};

/// Denominator floor of every alignment cosine.
pub const COS_EPS: f64 = 1e-8;
const LRELU: f64 = 0.2;

pub type Embedding = Vec<f64>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedConfig {
    pub d_e: usize,
    /// Channels of the four stride-2 conv blocks.
    pub channels: Vec<usize>,
    pub resolution: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
}

impl EmbedConfig {
    pub fn standard() -> Self {
        EmbedConfig { d_e: 64, channels: vec![32, 64, 128, 128], resolution: 32, token_dim: 64, text_hidden: 128 }
    }

    /// Tiny encoders over 8×8 images; for gradient checks.
    pub fn micro() -> Self {
        EmbedConfig { d_e: 5, channels: vec![3, 4, 4, 5], resolution: 8, token_dim: 4, text_hidden: 6 }
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub convs: Vec<Conv2d>,
    pub head: Linear,
}

impl_module!(ImageEncoder { convs, head });

impl ImageEncoder {
    fn new<R: rand::Rng + ?Sized>(cfg: &EmbedConfig, rng: &mut R) -> Self {
        let mut cin = 3;
        let mut convs = Vec::new();
        for &c in &cfg.channels {
            convs.push(Conv2d::new(cin, c, 3, 2, rng));
            cin = c;
        }
        let side = (cfg.resolution >> cfg.channels.len()).max(1);
        ImageEncoder { convs, head: Linear::new(cin * side * side, cfg.d_e, rng) }
    }

    /// Unit-norm `[N, d_e]` embeddings of `x: [N, 3, H, W]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.shape(x)[0];
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, h);
            h = g.leaky_relu(h, LRELU);
        }
        let flat = g.value(h).numel() / n;
        let h = g.reshape(h, &[n, flat]);
        let e = self.head.forward(g, h);
        g.normalize(e)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tokens: Param,
    pub hidden: Linear,
    pub out: Linear,
}

impl_module!(TextEncoder { tokens, hidden, out });

impl TextEncoder {
    fn new<R: rand::Rng + ?Sized>(cfg: &EmbedConfig, rng: &mut R) -> Self {
        TextEncoder {
            tokens: Param::new(Tensor::randn(&[VOCAB.len(), cfg.token_dim], 1.0, rng)),
            hidden: Linear::new(cfg.token_dim, cfg.text_hidden, rng),
            out: Linear::new(cfg.text_hidden, cfg.d_e, rng),
        }
    }

    /// Unit-norm `[B, d_e]` embeddings of token-id sequences. Tokens are
    /// pooled in sorted order so any permutation gives bit-identical output.
    pub fn forward(&self, g: &mut Graph, captions: &[Vec<usize>]) -> Var {
        let total: usize = captions.iter().map(Vec::len).sum();
        let mut pool = vec![0.0; captions.len() * total];
        let mut ids = Vec::with_capacity(total);
        for (b, c) in captions.iter().enumerate() {
            let mut sorted = c.clone();
            sorted.sort_unstable();
            for t in sorted {
                pool[b * total + ids.len()] = 1.0 / c.len() as f64;
                ids.push(t);
            }
        }
        let table = g.param(&self.tokens);
        let rows = g.index_rows(table, &ids);
        let pool = g.constant(Tensor::new(&[captions.len(), total], pool));
        let mean = g.matmul(pool, rows);
        let h = self.hidden.forward(g, mean);
        let h = g.leaky_relu(h, LRELU);
        let e = self.out.forward(g, h);
        g.normalize(e)
    }
}

/// Contrastive training schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub min_samples: usize,
    pub retrieval_gate: f64,
    pub gallery: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            steps: 1500,
            batch_size: 64,
            learning_rate: 2e-3,
            seed: 0,
            min_samples: 2000,
            retrieval_gate: 0.9,
            gallery: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveReport {
    pub losses: Vec<f64>,
    pub retrieval_accuracy: f64,
    pub temperature: f64,
}

/// Image and text encoders sharing one embedding space.
#[derive(Clone, Debug)]
pub struct EmbedModel {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    /// Logit scale is `exp(log_scale)`; the temperature is its reciprocal.
    pub log_scale: Param,
    config: EmbedConfig,
    trained: bool,
}

impl_module!(EmbedModel { image, text, log_scale });

impl EmbedModel {
    pub fn new(config: &EmbedConfig, seed: u64) -> Self {
        let mut rng = seeded(seed);
        EmbedModel {
            image: ImageEncoder::new(config, &mut rng),
            text: TextEncoder::new(config, &mut rng),
            log_scale: Param::new(Tensor::new(&[1], vec![libm::log(10.0)])),
            config: config.clone(),
            trained: false,
        }
    }

    pub fn config(&self) -> &EmbedConfig {
        &self.config
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn temperature(&self) -> f64 {
        libm::exp(-self.log_scale.value().data()[0])
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::Usage(String::from("embedding encoders are untrained")))
        }
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        let r = self.config.resolution;
        if x.height() != r || x.width() != r {
            return Err(Error::Shape(format!("expected {r}x{r} image, got {}x{}", x.height(), x.width())));
        }
        Ok(())
    }

    /// `E_i(x)`, unit norm.
    pub fn encode_image(&self, x: &Image) -> Result<Embedding> {
        Ok(self.encode_images(&[x])?.remove(0))
    }

    pub fn encode_images(&self, xs: &[&Image]) -> Result<Vec<Embedding>> {
        self.require_trained()?;
        for x in xs {
            self.check_image(x)?;
        }
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(128) {
            let mut g = Graph::new();
            g.freeze(self);
            let x = g.constant(Image::batch(chunk)?);
            let e = self.image.forward(&mut g, x);
            out.extend(g.value(e).data().chunks(self.config.d_e).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// `E_t(text)` for a whitespace-separated prompt, unit norm.
    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        let ids = synthworld::tokenize(text)?;
        self.encode_token_ids(&ids)
    }

    pub fn encode_token_ids(&self, ids: &[usize]) -> Result<Embedding> {
        self.require_trained()?;
        if ids.is_empty() || ids.iter().any(|&i| i >= VOCAB.len()) {
            return Err(Error::Input(format!("token ids {ids:?} are empty or outside the vocabulary")));
        }
        let mut g = Graph::new();
        g.freeze(self);
        let e = self.text.forward(&mut g, &[ids.to_vec()]);
        Ok(g.value(e).data().to_vec())
    }

    /// `Δt = E_t(T_y) − E_t(T_x)`, not renormalised.
    pub fn prompt_direction(&self, target: &str, source: &str) -> Result<Embedding> {
        let ey = self.encode_text(target)?;
        let ex = self.encode_text(source)?;
        Ok(ey.iter().zip(&ex).map(|(a, b)| a - b).collect())
    }

    /// `1 − cos(E_i(y) − E_i(x), Δt)`.
    pub fn directional_loss(&self, y: &Image, x: &Image, target: &str, source: &str) -> Result<f64> {
        let e = self.encode_images(&[y, x])?;
        let dt = self.prompt_direction(target, source)?;
        let di: Vec<f64> = e[0].iter().zip(&e[1]).map(|(a, b)| a - b).collect();
        Ok(directional_from_differences(&di, &dt))
    }

    /// `1 − cos(E_i(y), E_t(T))`.
    pub fn global_loss(&self, y: &Image, target: &str) -> Result<f64> {
        let ey = self.encode_image(y)?;
        let et = self.encode_text(target)?;
        Ok(1.0 - guarded_cosine(&ey, &et))
    }

    /// Symmetric InfoNCE with soft targets: every in-batch caption consistent
    /// with an image counts as a positive for it. Captions drop attributes at
    /// random, so a batch usually holds several consistent pairs.
    pub fn train_contrastive(
        &mut self,
        train: &[&CaptionedSample],
        holdout: &[&CaptionedSample],
        cfg: &ContrastiveConfig,
        observer: &mut dyn FnMut(usize, f64),
    ) -> Result<ContrastiveReport> {
        if train.len() < cfg.min_samples {
            return Err(Error::Input(format!("contrastive training needs at least {} samples, got {}", cfg.min_samples, train.len())));
        }
        for s in train.iter().chain(holdout) {
            self.check_image(&s.image)?;
        }
        let mut rng = derive(cfg.seed, 0xc11);
        let mut opt = Adam::new(cfg.learning_rate);
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            opt.lr = crate::toygen::cosine_lr(cfg.learning_rate, step, cfg.steps);
            let batch: Vec<&CaptionedSample> = (0..cfg.batch_size).map(|_| train[rng.random_range(0..train.len())]).collect();
            let templates: Vec<Template> = batch.iter().map(|_| Template::sample(&mut rng)).collect();
            let captions: Vec<Vec<usize>> = batch
                .iter()
                .zip(&templates)
                .map(|(s, t)| synthworld::caption_with(&s.labels, *t).iter().map(|w| synthworld::token_id(w).expect("vocabulary token")).collect())
                .collect();
            let b = batch.len();
            let mut consistent = vec![0.0; b * b];
            for i in 0..b {
                for j in 0..b {
                    if caption_matches(&batch[i].labels, &templates[j], &batch[j].labels) {
                        consistent[i * b + j] = 1.0;
                    }
                }
            }
            let img_targets = row_normalised(&consistent, b);
            let txt_targets = row_normalised(&transpose(&consistent, b), b);

            let mut g = Graph::new();
            let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
            let x = g.constant(Image::batch(&images)?);
            let ei = self.image.forward(&mut g, x);
            let et = self.text.forward(&mut g, &captions);
            let sims = g.matmul_t(ei, false, et, true);
            let ls = g.param(&self.log_scale);
            let scale = g.exp(ls);
            let logits = g.mul(sims, scale);
            let loss_i = soft_cross_entropy(&mut g, logits, img_targets);
            let logits_t = g.permute(logits, &[1, 0]);
            let loss_t = soft_cross_entropy(&mut g, logits_t, txt_targets);
            let loss = g.add(loss_i, loss_t);
            let loss = g.scale(loss, 0.5);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, detail: String::from("contrastive loss is not finite") });
            }
            losses.push(value);
            observer(step, value);
            if step % 200 == 0 {
                debug!("contrastive step {step}: loss {value:.4}");
            }
            let grads = g.backward(loss);
            opt.step(self, &grads);
            let v = self.log_scale.value_mut();
            v.data_mut()[0] = v.data()[0].clamp(0.0, libm::log(100.0));
        }
        self.trained = true;
        let retrieval_accuracy = self.retrieval_accuracy(holdout, cfg.gallery)?;
        info!("contrastive training done: retrieval {:.3}, temperature {:.4}", retrieval_accuracy, self.temperature());
        if retrieval_accuracy < cfg.retrieval_gate {
            return Err(Error::Gate {
                what: String::from("contrastive embedding"),
                detail: format!("held-out top-1 retrieval {retrieval_accuracy:.3} below {}", cfg.retrieval_gate),
                curve: losses,
            });
        }
        Ok(ContrastiveReport { losses, retrieval_accuracy, temperature: self.temperature() })
    }

    /// Image→caption top-1 accuracy: consecutive groups of `gallery` samples
    /// are matched against their own full captions. A pick whose caption
    /// text equals the true caption counts as correct.
    pub fn retrieval_accuracy(&self, samples: &[&CaptionedSample], gallery: usize) -> Result<f64> {
        if samples.len() < gallery || gallery == 0 {
            return Err(Error::Input(format!("retrieval needs at least {gallery} samples, got {}", samples.len())));
        }
        let (mut hits, mut total) = (0usize, 0usize);
        for group in samples.chunks_exact(gallery) {
            let images: Vec<&Image> = group.iter().map(|s| &s.image).collect();
            let ei = self.encode_images(&images)?;
            let texts: Vec<String> = group.iter().map(|s| synthworld::join_tokens(&s.caption)).collect();
            let et: Vec<Embedding> = texts.iter().map(|t| self.encode_text(t)).collect::<Result<_>>()?;
            for (i, e) in ei.iter().enumerate() {
                let best = et
                    .iter()
                    .enumerate()
                    .map(|(j, t)| (j, dot(e, t)))
                    .fold((0, f64::NEG_INFINITY), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc });
                hits += usize::from(texts[best.0] == texts[i]);
                total += 1;
            }
        }
        Ok(hits as f64 / total as f64)
    }
}

impl FeatureNet for EmbedModel {
    fn features(&self, g: &mut Graph, x: Var) -> Var {
        self.image.forward(g, x)
    }

    fn freeze(&self, g: &mut Graph) {
        g.freeze(self);
    }
}

/// Whether a caption built from `spec_j` with `template` also describes `spec_i`.
fn caption_matches(spec_i: &SceneSpec, template: &Template, spec_j: &SceneSpec) -> bool {
    (!template.shape || spec_i.shape() == spec_j.shape())
        && (!template.color || spec_i.color() == spec_j.color())
        && (!template.size || spec_i.size() == spec_j.size())
        && (!template.background || spec_i.background() == spec_j.background())
}

fn transpose(m: &[f64], n: usize) -> Vec<f64> {
    (0..n * n).map(|k| m[(k % n) * n + k / n]).collect()
}

fn row_normalised(m: &[f64], n: usize) -> Tensor {
    let mut out = m.to_vec();
    for row in out.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(&[n, n], out)
}

/// Mean over rows of `−Σ_j t_ij log softmax(logits)_ij`.
pub fn soft_cross_entropy(g: &mut Graph, logits: Var, targets: Tensor) -> Var {
    let rows = g.shape(logits)[0];
    let lp = g.log_softmax(logits);
    let t = g.constant(targets);
    let p = g.mul(lp, t);
    let s = g.sum(p);
    g.scale(s, -1.0 / rows as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a·b / max(‖a‖‖b‖, 1e-8)`.
pub fn guarded_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    let denom = na * nb;
    if denom < COS_EPS {
        warn!("alignment cosine with a near-zero direction (norms {na:.3e}, {nb:.3e})");
    }
    dot(a, b) / denom.max(COS_EPS)
}

/// `1 − cos(Δi, Δt)` from the two embedding differences directly.
pub fn directional_from_differences(image_diff: &[f64], text_diff: &[f64]) -> f64 {
    1.0 - guarded_cosine(image_diff, text_diff)
}

/// Graph form of the directional loss, averaged over rows:
/// `mean_n (1 − cos(ey_n − ex_n, dt_n))`. `dt` may be a single row.
pub fn directional_loss_graph(g: &mut Graph, ey: Var, ex: Var, dt: Var) -> Var {
    let di = g.sub(ey, ex);
    let dt = if g.shape(dt) == g.shape(di) {
        dt
    } else {
        let zeros = g.constant(Tensor::zeros(g.shape(di)));
        g.add(zeros, dt)
    };
    let c = g.cosine(di, dt, COS_EPS);
    let m = g.mean(c);
    let neg = g.neg(m);
    g.add_scalar(neg, 1.0)
}

/// Graph form of the global loss: `mean_n (1 − cos(ey_n, et))`.
pub fn global_loss_graph(g: &mut Graph, ey: Var, et: Var) -> Var {
    let et = if g.shape(et) == g.shape(ey) {
        et
    } else {
        let zeros = g.constant(Tensor::zeros(g.shape(ey)));
        g.add(zeros, et)
    };
    let c = g.cosine(ey, et, COS_EPS);
    let m = g.mean(c);
    let neg = g.neg(m);
    g.add_scalar(neg, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained_micro() -> EmbedModel {
        let mut m = EmbedModel::new(&EmbedConfig::micro(), 0);
        m.set_trained(true);
        m
    }

    fn e(v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 6];
        out[..v.len()].copy_from_slice(v);
        out
    }

    #[test]
    fn directional_worked_values() {
        assert_eq!(directional_from_differences(&e(&[1.0]), &e(&[2.0])), 0.0);
        assert_eq!(directional_from_differences(&e(&[0.0, 1.0]), &e(&[1.0])), 1.0);
        assert_eq!(directional_from_differences(&e(&[-1.0]), &e(&[1.0])), 2.0);
        assert_eq!(directional_from_differences(&e(&[]), &e(&[1.0])), 1.0);
    }

    #[test]
    fn global_worked_values() {
        let a = e(&[0.6, 0.8]);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((1.0 - guarded_cosine(&a, &a)).abs() < 1e-15);
        assert!((1.0 - guarded_cosine(&a, &neg) - 2.0).abs() < 1e-15);
        assert_eq!(1.0 - guarded_cosine(&e(&[1.0]), &e(&[0.0, 1.0])), 1.0);
    }

    #[test]
    fn untrained_encoders_refuse() {
        let m = EmbedModel::new(&EmbedConfig::micro(), 0);
        assert!(matches!(m.encode_text("a circle"), Err(Error::Usage(_))));
        assert!(matches!(m.encode_image(&Image::filled(8, 8, [0.0; 3])), Err(Error::Usage(_))));
    }

    #[test]
    fn text_embedding_properties() {
        let m = trained_micro();
        let a = m.encode_text("a large red circle").unwrap();
        assert_eq!(a, m.encode_text("a large red circle").unwrap());
        assert_eq!(a, m.encode_text("circle red large a").unwrap());
        assert!((dot(&a, &a).sqrt() - 1.0).abs() < 1e-5);
        match m.encode_text("a mauve circle") {
            Err(Error::Input(msg)) => assert!(msg.contains("mauve")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn permutation_invariance() {
        let m = trained_micro();
        let a = m.encode_text("a small blue square on light background").unwrap();
        let b = m.encode_text("background light on square blue small a").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn image_embedding_is_unit_norm() {
        let m = trained_micro();
        let mut rng = seeded(3);
        for _ in 0..5 {
            let data: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
            let x = Image::new(8, 8, data).unwrap();
            let v = m.encode_image(&x).unwrap();
            assert!((dot(&v, &v).sqrt() - 1.0).abs() < 1e-5);
            assert_eq!(v, m.encode_image(&x).unwrap());
        }
    }

    #[test]
    fn prompt_direction_algebra() {
        let m = trained_micro();
        let zero = m.prompt_direction("a red circle", "a red circle").unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let ab = m.prompt_direction("a red circle", "a blue square").unwrap();
        let ba = m.prompt_direction("a blue square", "a red circle").unwrap();
        assert!(ab.iter().zip(&ba).all(|(x, y)| *x == -*y));
        assert!(dot(&ab, &ab).sqrt() <= 2.0);
    }

    #[test]
    fn soft_cross_entropy_is_nonnegative_on_identical_pairs() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[4, 4], 3.0));
        let l = soft_cross_entropy(&mut g, logits, row_normalised(&[1.0; 16], 4));
        assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn caption_consistency() {
        use crate::synthworld::*;
        let a = SceneSpec::centered(ShapeClass::Circle, FillColor::Red, Size::Large, Background::Dark);
        let b = SceneSpec::centered(ShapeClass::Circle, FillColor::Blue, Size::Large, Background::Dark);
        assert!(caption_matches(&a, &Template::BASE, &b));
        assert!(!caption_matches(&a, &Template::FULL, &b));
    }
}
