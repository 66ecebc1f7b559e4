//! Image metrics, the attribute oracle, edit reports and ablation drivers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use log::info;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::embedspace::{guarded_cosine, EmbedModel};
use crate::hypereditor::{synthesize_with, EditorConfig, HyperEditor};
use crate::image::Image;
use crate::layerselect::LayerSelection;
use crate::nn::{Adam, Conv2d, FeatureNet, Linear, Module};
use crate::rng::{derive, seeded};
use crate::synthworld::{parse_caption, tokenize, Attribute, CaptionedSample, VOCAB};
use crate::tensor::Tensor;
use crate::toygen::GenModel;
use crate::trainloop::{new_editor, train_editor, EditorDataset, IdentityFeatureExtractor, LossMode, TrainConfig, TrainEvent};
use crate::{impl_module, Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `10·log10(1 / MSE)` for images in `[0, 1]`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP))
}

/// Mean SSIM over every valid 7×7 window of every channel, uniform weights,
/// sample (co)variances and stabilisers `(0.01)²`, `(0.03)²`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(crate::Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa = &a.data()[c * plane..(c + 1) * plane];
        let pb = &b.data()[c * plane..(c + 1) * plane];
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (u, v) = (pa[y * w + x], pb[y * w + x]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa - n * ma * ma) / (n - 1.0);
                let vb = (sbb - n * mb * mb) / (n - 1.0);
                let cov = (sab - n * ma * mb) / (n - 1.0);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

const LRELU: f64 = 0.2;

/// A small conv net with one softmax head per attribute. Serves both as the
/// evaluation oracle (all four attributes) and, trained on shape alone, as
/// the identity feature extractor.
#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
    pub heads: Vec<Linear>,
    attributes: Vec<Attribute>,
    resolution: usize,
    trained: bool,
}

impl_module!(AttributeClassifier { convs, fc, heads });

/// Classifier training schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Each training image gets Gaussian pixel noise with a standard
    /// deviation drawn uniformly from `[0, noise_std]`.
    pub noise_std: f64,
    /// Minimum held-out accuracy of every head.
    pub accuracy_gate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { steps: 1500, batch_size: 32, learning_rate: 3e-3, seed: 0, noise_std: 0.0, accuracy_gate: 0.95 }
    }
}

impl ClassifierConfig {
    /// The oracle schedule: noise augmentation keeps its labels stable under
    /// small pixel changes.
    pub fn oracle() -> Self {
        ClassifierConfig { noise_std: 0.05, ..Default::default() }
    }
}

impl AttributeClassifier {
    pub fn new(attributes: &[Attribute], resolution: usize, channels: &[usize], features: usize, seed: u64) -> Result<Self> {
        if attributes.is_empty() || channels.is_empty() {
            return Err(Error::Input(String::from("classifier needs attributes and conv stages")));
        }
        let mut rng = seeded(seed);
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv2d::new(cin, c, 3, if i == 0 { 1 } else { 2 }, &mut rng));
            cin = c;
        }
        let side = (resolution >> (channels.len() - 1)).max(1);
        let fc = Linear::new(cin * side * side, features, &mut rng);
        let heads = attributes.iter().map(|a| Linear::new(features, a.classes(), &mut rng)).collect();
        Ok(AttributeClassifier { convs, fc, heads, attributes: attributes.to_vec(), resolution, trained: false })
    }

    /// The four-head oracle at 32×32.
    pub fn oracle(seed: u64) -> Self {
        Self::new(&Attribute::ALL, 32, &[16, 32, 64, 64], 64, seed).expect("valid oracle architecture")
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Output channels of each conv stage.
    pub fn channels(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.weight.shape()[0]).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.fc.outputs()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    /// Penultimate activations `[N, F]`.
    pub fn penultimate(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.shape(x)[0];
        let mut h = g.add_scalar(x, -0.5);
        for c in &self.convs {
            h = c.forward(g, h);
            h = g.leaky_relu(h, LRELU);
        }
        let flat = g.value(h).numel() / n;
        let h = g.reshape(h, &[n, flat]);
        let h = self.fc.forward(g, h);
        g.leaky_relu(h, LRELU)
    }

    /// Log-probabilities per head, each `[N, classes]`.
    pub fn log_probs(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let h = self.penultimate(g, x);
        self.heads.iter().map(|l| {
            let z = l.forward(g, h);
            g.log_softmax(z)
        }).collect()
    }

    fn check(&self, images: &[&Image]) -> Result<()> {
        for im in images {
            if im.height() != self.resolution || im.width() != self.resolution {
                return Err(Error::Shape(format!(
                    "expected {r}x{r} image, got {}x{}",
                    im.height(),
                    im.width(),
                    r = self.resolution
                )));
            }
        }
        Ok(())
    }

    /// Predicted class index per head for each image.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<Vec<usize>>> {
        if !self.trained {
            return Err(Error::Usage(String::from("classifier is untrained")));
        }
        self.check(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let mut g = Graph::new();
            g.freeze(self);
            let x = g.constant(Image::batch(chunk)?);
            let lps = self.log_probs(&mut g, x);
            for i in 0..chunk.len() {
                out.push(lps.iter().map(|lp| argmax(row(g.value(*lp), i))).collect());
            }
        }
        Ok(out)
    }

    /// Penultimate features of each image.
    pub fn features_of(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        if !self.trained {
            return Err(Error::Usage(String::from("classifier is untrained")));
        }
        self.check(images)?;
        let mut g = Graph::new();
        g.freeze(self);
        let x = g.constant(Image::batch(images)?);
        let f = self.penultimate(&mut g, x);
        let d = g.shape(f)[1];
        Ok(g.value(f).data().chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// Cross-entropy training on exact labels; returns held-out accuracy per head.
    pub fn train(
        &mut self,
        train: &[&CaptionedSample],
        holdout: &[&CaptionedSample],
        cfg: &ClassifierConfig,
        observer: &mut dyn FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        if train.is_empty() || holdout.is_empty() {
            return Err(Error::Input(String::from("classifier training needs train and held-out samples")));
        }
        let all: Vec<&Image> = train.iter().chain(holdout).map(|s| &s.image).collect();
        self.check(&all)?;
        let mut rng = derive(cfg.seed, 0xc1a);
        let mut opt = Adam::new(cfg.learning_rate);
        let mut curve = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            opt.lr = crate::toygen::cosine_lr(cfg.learning_rate, step, cfg.steps);
            let batch: Vec<&CaptionedSample> = (0..cfg.batch_size).map(|_| train[rng.random_range(0..train.len())]).collect();
            let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
            let mut x = Image::batch(&images)?;
            if cfg.noise_std > 0.0 {
                let per = x.numel() / batch.len();
                for chunk in x.data_mut().chunks_mut(per) {
                    let sigma = rng.random_range(0.0..=cfg.noise_std);
                    for v in chunk {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = (*v + sigma * z).clamp(0.0, 1.0);
                    }
                }
            }
            let mut g = Graph::new();
            let x = g.constant(x);
            let lps = self.log_probs(&mut g, x);
            let mut loss = None;
            for (lp, attr) in lps.iter().zip(&self.attributes) {
                let k = attr.classes();
                let mut onehot = vec![0.0; batch.len() * k];
                for (i, s) in batch.iter().enumerate() {
                    onehot[i * k + s.labels.label(*attr)] = 1.0;
                }
                let t = g.constant(Tensor::new(&[batch.len(), k], onehot));
                let p = g.mul(*lp, t);
                let s = g.sum(p);
                let l = g.scale(s, -1.0 / batch.len() as f64);
                loss = Some(match loss {
                    Some(acc) => g.add(acc, l),
                    None => l,
                });
            }
            let loss = loss.expect("at least one head");
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, detail: String::from("classifier loss is not finite") });
            }
            curve.push(value);
            observer(step, value);
            let grads = g.backward(loss);
            opt.step(self, &grads);
        }
        self.trained = true;
        let acc = self.accuracy(holdout)?;
        info!("classifier {:?}: held-out accuracy {acc:?}", self.attributes);
        if let Some((a, v)) = self.attributes.iter().zip(&acc).find(|(_, v)| **v < cfg.accuracy_gate) {
            return Err(Error::Gate {
                what: format!("{} classifier", a.name()),
                detail: format!("held-out accuracy {v:.3} below {}", cfg.accuracy_gate),
                curve,
            });
        }
        Ok(acc)
    }

    /// Accuracy of every head on labelled samples.
    pub fn accuracy(&self, samples: &[&CaptionedSample]) -> Result<Vec<f64>> {
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let preds = self.predict(&images)?;
        let mut hits = vec![0usize; self.attributes.len()];
        for (p, s) in preds.iter().zip(samples) {
            for (h, attr) in self.attributes.iter().enumerate() {
                hits[h] += usize::from(p[h] == s.labels.label(*attr));
            }
        }
        Ok(hits.iter().map(|&h| h as f64 / samples.len() as f64).collect())
    }
}

impl FeatureNet for AttributeClassifier {
    fn features(&self, g: &mut Graph, x: Var) -> Var {
        self.penultimate(g, x)
    }

    fn freeze(&self, g: &mut Graph) {
        g.freeze(self);
    }
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let d = t.shape()[1];
    &t.data()[i * d..(i + 1) * d]
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b })
}

/// An attribute and class the edit is meant to produce.
pub type EditTarget = (Attribute, usize);

/// Attributes named by `target` with a value `source` does not name.
pub fn edit_targets(target: &str, source: &str) -> Result<Vec<EditTarget>> {
    let t = tokenize(target).and_then(|ids| parse_caption(&ids.iter().map(|&i| VOCAB[i]).collect::<Vec<_>>()))?;
    let s = tokenize(source).and_then(|ids| parse_caption(&ids.iter().map(|&i| VOCAB[i]).collect::<Vec<_>>()))?;
    let pairs = [
        (Attribute::Shape, t.shape.map(|v| v.index()), s.shape.map(|v| v.index())),
        (Attribute::Color, t.color.map(|v| v.index()), s.color.map(|v| v.index())),
        (Attribute::Size, t.size.map(|v| v.index()), s.size.map(|v| v.index())),
        (Attribute::Background, t.background.map(|v| v.index()), s.background.map(|v| v.index())),
    ];
    let out: Vec<EditTarget> = pairs.iter().filter_map(|&(a, tv, sv)| tv.filter(|v| Some(*v) != sv).map(|v| (a, v))).collect();
    if out.is_empty() {
        return Err(Error::Input(format!("prompt pair ({target:?}, {source:?}) names no attribute change")));
    }
    Ok(out)
}

/// Metrics of one edited image. Oracle labels are indexed like [`Attribute::ALL`].
#[derive(Clone, Debug, PartialEq)]
pub struct EditRow {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// `cos(E_I(y) − E_I(x), Δt)`.
    pub directional_alignment: f64,
    /// `cos(R(y), R(y_recon))`.
    pub identity_score: f64,
    pub labels_before: [usize; 4],
    pub labels_after: [usize; 4],
    pub target_hit: bool,
    pub preserved: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditAggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub directional_alignment: f64,
    pub identity_score: f64,
    pub target_success: f64,
    /// Fraction of edits leaving every non-target attribute unchanged.
    pub preservation: f64,
    /// Per-attribute unchanged rate, indexed like [`Attribute::ALL`].
    pub attribute_preservation: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditReport {
    pub targets: Vec<EditTarget>,
    pub rows: Vec<EditRow>,
}

impl EditReport {
    pub fn aggregate(&self) -> EditAggregate {
        let n = self.rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EditRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        let mut attribute_preservation = [0.0; 4];
        for (a, slot) in attribute_preservation.iter_mut().enumerate() {
            *slot = mean(&|r| f64::from(u8::from(r.labels_before[a] == r.labels_after[a])));
        }
        EditAggregate {
            psnr: mean(&|r| r.psnr),
            ssim: mean(&|r| r.ssim),
            directional_alignment: mean(&|r| r.directional_alignment),
            identity_score: mean(&|r| r.identity_score),
            target_success: mean(&|r| f64::from(u8::from(r.target_hit))),
            preservation: mean(&|r| f64::from(u8::from(r.preserved))),
            attribute_preservation,
        }
    }

    /// Unchanged rate of one attribute.
    pub fn preservation_of(&self, attr: Attribute) -> f64 {
        self.aggregate().attribute_preservation[attr.index()]
    }
}

fn labels4(v: &[usize]) -> [usize; 4] {
    [v[0], v[1], v[2], v[3]]
}

/// Edits every sample with `(target, source)` and scores the result against
/// its reconstruction with the metrics and the oracle.
pub fn evaluate_edit(
    editor: &HyperEditor,
    gen: &GenModel,
    embed: &EmbedModel,
    rsim: &IdentityFeatureExtractor,
    oracle: &AttributeClassifier,
    samples: &[&CaptionedSample],
    target: &str,
    source: &str,
) -> Result<EditReport> {
    if oracle.attributes() != Attribute::ALL {
        return Err(Error::Input(String::from("the oracle must classify all four attributes")));
    }
    let targets = edit_targets(target, source)?;
    let dt = embed.prompt_direction(target, source)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let w = gen.invert(&s.image)?;
        let recon = gen.synthesize(&w)?;
        let delta = editor.factors(&s.image, &dt)?;
        let y = synthesize_with(gen, &delta, &w)?;
        let emb = embed.encode_images(&[&y, &s.image])?;
        let diff: Vec<f64> = emb[0].iter().zip(&emb[1]).map(|(a, b)| a - b).collect();
        let feats = rsim.features(&[&y, &recon])?;
        let labels = oracle.predict(&[&recon, &y])?;
        let (before, after) = (labels4(&labels[0]), labels4(&labels[1]));
        let target_hit = targets.iter().all(|&(a, v)| after[a.index()] == v);
        let preserved = Attribute::ALL
            .iter()
            .filter(|a| !targets.iter().any(|t| t.0 == **a))
            .all(|a| before[a.index()] == after[a.index()]);
        rows.push(EditRow {
            index,
            psnr: psnr(&y, &recon)?,
            ssim: ssim(&y, &recon)?,
            directional_alignment: guarded_cosine(&diff, &dt),
            identity_score: guarded_cosine(&feats[0], &feats[1]),
            labels_before: before,
            labels_after: after,
            target_hit,
            preserved,
        });
    }
    Ok(EditReport { targets, rows })
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub loss_mode: LossMode,
    pub selection: LayerSelection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub loss_mode: LossMode,
    pub layers: Vec<usize>,
    pub head_params: usize,
    pub editor_params: usize,
    pub align_ratio: Option<f64>,
    pub gate_passed: bool,
    /// Evaluation aggregates, or the training error of a failed cell.
    pub outcome: core::result::Result<EditAggregate, String>,
}

/// Shared inputs of every ablation cell.
pub struct AblationContext<'a> {
    pub gen: &'a GenModel,
    pub embed: &'a EmbedModel,
    pub rsim: &'a IdentityFeatureExtractor,
    pub oracle: &'a AttributeClassifier,
    pub train: &'a EditorDataset,
    pub eval: &'a [&'a CaptionedSample],
    pub editor: &'a EditorConfig,
}

/// Trains one editor per cell from `base` (same seed, steps and prompts)
/// and evaluates it on the first prompt pair. Failed cells are recorded and
/// the grid continues.
pub fn run_ablation(
    ctx: &AblationContext<'_>,
    base: &TrainConfig,
    cells: &[AblationCell],
    observer: &mut dyn FnMut(&str, &TrainEvent<'_>),
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let (target, source) = &base.prompt_pool[0];
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = TrainConfig { loss_mode: cell.loss_mode, selection: cell.selection.clone(), ..base.clone() };
        let mut editor = new_editor(&cfg, ctx.editor, ctx.gen)?;
        let trained = train_editor(&cfg, &mut editor, ctx.gen, ctx.embed, ctx.rsim, ctx.train, &mut |ev| observer(&cell.name, &ev));
        let (align_ratio, gate_passed, outcome) = match trained {
            Ok(rep) => {
                let report = evaluate_edit(&editor, ctx.gen, ctx.embed, ctx.rsim, ctx.oracle, ctx.eval, target, source)?;
                (Some(rep.align_ratio()), rep.gate_passed(), Ok(report.aggregate()))
            }
            Err(e) => (None, false, Err(format!("{e}"))),
        };
        info!("ablation cell {}: {outcome:?}", cell.name);
        rows.push(AblationRow {
            name: cell.name.clone(),
            loss_mode: cell.loss_mode,
            layers: cell.selection.layers.clone(),
            head_params: editor.head_param_count(),
            editor_params: editor.param_count(),
            align_ratio,
            gate_passed,
            outcome,
        });
    }
    Ok(rows)
}

/// The standard 2×2 grid: {directional, global} × {all layers, `selected`}.
pub fn standard_grid(layers: usize, selected: &LayerSelection) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for (mode, tag) in [(LossMode::Directional, "directional"), (LossMode::Global, "global")] {
        cells.push(AblationCell { name: format!("{tag}-all"), loss_mode: mode, selection: LayerSelection::all(layers) });
        cells.push(AblationCell { name: format!("{tag}-selected"), loss_mode: mode, selection: selected.clone() });
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn ramp() -> Image {
        let data: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        Image::new(32, 32, data).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(32, 32, [0.3, 0.4, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(32, 32, [0.4, 0.5, 0.6]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(8, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let a = ramp();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut inv = a.clone();
        inv.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        let s = ssim(&a, &inv).unwrap();
        assert!(s < 1.0);
        assert!((s - ssim(&inv, &a).unwrap()).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&s));
    }
}
