//! The editor objective and its training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use log::{info, warn};
use rand::Rng as _;

use crate::autograd::{Graph, Var};
use crate::embedspace::{directional_loss_graph, global_loss_graph, guarded_cosine, Embedding, EmbedModel, COS_EPS};
use crate::evalkit::{AttributeClassifier, ClassifierConfig};
use crate::hypereditor::{reassigned_kernels, EditorConfig, HyperEditor};
use crate::image::Image;
use crate::layerselect::LayerSelection;
use crate::nn::{Adam, Module};
use crate::rng::derive;
use crate::synthworld::{Attribute, CaptionedSample};
use crate::tensor::Tensor;
use crate::toygen::{GenModel, LatentCode};
use crate::{Error, Result};

/// Which alignment term drives the edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// `1 − cos(E_I(y) − E_I(x), E_T(T_y) − E_T(T_x))`.
    Directional,
    /// `1 − cos(E_I(y), E_T(T_y))`.
    Global,
}

/// How the reconstruction penalty is normalised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L2Mode {
    /// Plain Euclidean norm over every pixel channel.
    Norm,
    /// Euclidean norm divided by `sqrt(pixel channels)`, i.e. the RMS difference.
    PerPixel,
}

/// Which image anchors the directional term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceEmbedding {
    Real,
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_clip: f64,
    pub lambda_norm: f64,
    pub lambda_sim: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub loss_mode: LossMode,
    pub l2_mode: L2Mode,
    pub source: SourceEmbedding,
    /// `(target, source)` prompt pairs, sampled uniformly per step.
    pub prompt_pool: Vec<(String, String)>,
    pub selection: LayerSelection,
    pub seed: u64,
    /// Emit a checkpoint event every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip for the optimizer.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(prompt_pool: Vec<(String, String)>, selection: LayerSelection, steps: usize) -> Self {
        TrainConfig {
            lambda_clip: 1.0,
            lambda_norm: 1.0,
            lambda_sim: 0.1,
            batch_size: 4,
            learning_rate: 1e-3,
            steps,
            loss_mode: LossMode::Directional,
            l2_mode: L2Mode::Norm,
            source: SourceEmbedding::Real,
            prompt_pool,
            selection,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
        }
    }

    pub fn single(target: &str, source: &str, selection: LayerSelection, steps: usize) -> Self {
        Self::new(vec![(String::from(target), String::from(source))], selection, steps)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_clip, self.lambda_norm, self.lambda_sim];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input(format!("loss weights must be finite and nonnegative, got {weights:?}")));
        }
        if self.prompt_pool.is_empty() {
            return Err(Error::Input(String::from("prompt pool is empty")));
        }
        if self.batch_size == 0 {
            return Err(Error::Input(String::from("batch size must be at least 1")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Input(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.selection.layers.is_empty() {
            return Err(Error::Input(String::from("no layers selected")));
        }
        Ok(())
    }
}

/// Shape-classifier features used to keep the shape of an edited image.
#[derive(Clone, Debug)]
pub struct IdentityFeatureExtractor(pub AttributeClassifier);

impl IdentityFeatureExtractor {
    pub fn new(resolution: usize, seed: u64) -> Result<Self> {
        Ok(IdentityFeatureExtractor(AttributeClassifier::new(&[Attribute::Shape], resolution, &[16, 32, 64, 64], 64, seed)?))
    }

    pub fn is_trained(&self) -> bool {
        self.0.is_trained()
    }

    /// Trains the shape head; returns its held-out accuracy.
    pub fn train(
        &mut self,
        train: &[&CaptionedSample],
        holdout: &[&CaptionedSample],
        cfg: &ClassifierConfig,
        observer: &mut dyn FnMut(usize, f64),
    ) -> Result<f64> {
        Ok(self.0.train(train, holdout, cfg, observer)?[0])
    }

    pub fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        self.0.features_of(images)
    }

    pub fn graph_features(&self, g: &mut Graph, x: Var) -> Var {
        self.0.penultimate(g, x)
    }
}

/// `1 − cos(R(y_edit), R(y_recon))`.
pub fn similarity_loss(y_edit: &Image, y_recon: &Image, rsim: &IdentityFeatureExtractor) -> Result<f64> {
    let f = rsim.features(&[y_edit, y_recon])?;
    Ok(1.0 - guarded_cosine(&f[0], &f[1]))
}

/// `‖y_edit − y_recon‖₂` over every pixel channel.
pub fn l2_loss(y_edit: &Image, y_recon: &Image) -> Result<f64> {
    if (y_edit.height(), y_edit.width()) != (y_recon.height(), y_recon.width()) {
        return Err(Error::Shape(format!(
            "L2 between {}x{} and {}x{} images",
            y_edit.height(),
            y_edit.width(),
            y_recon.height(),
            y_recon.width()
        )));
    }
    let ss: f64 = y_edit.data().iter().zip(y_recon.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(libm::sqrt(ss))
}

fn l2_scale(mode: L2Mode, numel: usize) -> f64 {
    match mode {
        L2Mode::Norm => 1.0,
        L2Mode::PerPixel => 1.0 / libm::sqrt(numel as f64),
    }
}

/// The three objective terms, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub align: f64,
    pub l2: f64,
    pub sim: f64,
}

impl LossTerms {
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        cfg.lambda_clip * self.align + cfg.lambda_norm * self.l2 + cfg.lambda_sim * self.sim
    }
}

/// Every term of the objective for one edit, computed outside the graph.
/// `x` anchors the directional term.
pub fn loss_terms(
    embed: &EmbedModel,
    rsim: &IdentityFeatureExtractor,
    x: &Image,
    y_edit: &Image,
    y_recon: &Image,
    prompts: (&str, &str),
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let align = match cfg.loss_mode {
        LossMode::Directional => embed.directional_loss(y_edit, x, prompts.0, prompts.1)?,
        LossMode::Global => embed.global_loss(y_edit, prompts.0)?,
    };
    let l2 = l2_loss(y_edit, y_recon)? * l2_scale(cfg.l2_mode, y_edit.data().len());
    Ok(LossTerms { align, l2, sim: similarity_loss(y_edit, y_recon, rsim)? })
}

/// `λ_clip·L_align + λ_norm·L₂ + λ_sim·L_sim` for one edit.
pub fn total_loss(
    embed: &EmbedModel,
    rsim: &IdentityFeatureExtractor,
    x: &Image,
    y_edit: &Image,
    y_recon: &Image,
    prompts: (&str, &str),
    cfg: &TrainConfig,
) -> Result<f64> {
    Ok(loss_terms(embed, rsim, x, y_edit, y_recon, prompts, cfg)?.total(cfg))
}

/// Training images with their inversions and everything derived from them.
#[derive(Clone, Debug)]
pub struct EditorDataset {
    pub images: Vec<Image>,
    pub latents: Vec<LatentCode>,
    pub recons: Vec<Image>,
    /// `E_I` of the image anchoring the directional term.
    pub anchors: Vec<Embedding>,
    pub recon_features: Vec<Vec<f64>>,
}

impl EditorDataset {
    pub fn prepare(
        gen: &GenModel,
        embed: &EmbedModel,
        rsim: &IdentityFeatureExtractor,
        images: Vec<Image>,
        source: SourceEmbedding,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Input(String::from("editor dataset is empty")));
        }
        if !embed.is_trained() {
            return Err(Error::Usage(String::from("embedding model is untrained")));
        }
        if !rsim.is_trained() {
            return Err(Error::Usage(String::from("identity feature extractor is untrained")));
        }
        let refs: Vec<&Image> = images.iter().collect();
        let latents = gen.invert_batch(&refs)?;
        let lrefs: Vec<&LatentCode> = latents.iter().collect();
        let recons = gen.generator.synthesize_batch(&lrefs)?;
        let rrefs: Vec<&Image> = recons.iter().collect();
        let anchors = match source {
            SourceEmbedding::Real => embed.encode_images(&refs)?,
            SourceEmbedding::Reconstruction => embed.encode_images(&rrefs)?,
        };
        let recon_features = rsim.features(&rrefs)?;
        Ok(EditorDataset { images, latents, recons, anchors, recon_features })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One row of the loss curve; terms are batch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub align: f64,
    pub l2: f64,
    pub sim: f64,
}

pub enum TrainEvent<'a> {
    Step(&'a LossRow),
    Checkpoint { step: usize, editor: &'a HyperEditor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
    pub initial_align: f64,
    pub final_align: f64,
}

impl TrainReport {
    /// Step-0 alignment and the mean over the last [`FINAL_WINDOW`] rows.
    pub fn from_rows(rows: Vec<LossRow>) -> Self {
        let initial_align = rows.first().map_or(0.0, |r| r.align);
        let tail = &rows[rows.len().saturating_sub(FINAL_WINDOW)..];
        let final_align = if tail.is_empty() { initial_align } else { tail.iter().map(|r| r.align).sum::<f64>() / tail.len() as f64 };
        TrainReport { rows, initial_align, final_align }
    }

    /// `final_align / initial_align`.
    pub fn align_ratio(&self) -> f64 {
        self.final_align / self.initial_align
    }

    /// Whether the final alignment term fell to at most half its step-0 value.
    pub fn gate_passed(&self) -> bool {
        self.final_align <= ALIGN_GATE * self.initial_align
    }

    pub fn check_gate(&self) -> Result<()> {
        if self.gate_passed() {
            return Ok(());
        }
        Err(Error::Gate {
            what: String::from("editor"),
            detail: format!("alignment {:.4} is above {ALIGN_GATE} x initial {:.4}", self.final_align, self.initial_align),
            curve: self.rows.iter().map(|r| r.align).collect(),
        })
    }
}

/// Window of trailing steps averaged for the final alignment value.
pub const FINAL_WINDOW: usize = 50;
pub const ALIGN_GATE: f64 = 0.5;

/// A fresh editor with heads on the selected layers.
pub fn new_editor(cfg: &TrainConfig, editor: &EditorConfig, gen: &GenModel) -> Result<HyperEditor> {
    cfg.validate()?;
    HyperEditor::new(editor, gen.config(), &cfg.selection.layers, cfg.seed)
}

/// Batch terms and the differentiable total for the given samples and prompt.
pub fn batch_objective(
    g: &mut Graph,
    editor: &HyperEditor,
    gen: &GenModel,
    embed: &EmbedModel,
    rsim: &IdentityFeatureExtractor,
    data: &EditorDataset,
    batch: &[usize],
    prompts: (&str, &str),
    cfg: &TrainConfig,
) -> Result<(Var, LossTerms)> {
    g.freeze(gen);
    g.freeze(embed);
    g.freeze(&rsim.0);
    let images: Vec<&Image> = batch.iter().map(|&i| &data.images[i]).collect();
    let x = g.constant(Image::batch(&images)?);
    let dt = match cfg.loss_mode {
        LossMode::Directional => embed.prompt_direction(prompts.0, prompts.1)?,
        LossMode::Global => embed.encode_text(prompts.0)?,
    };
    let direction = embed.prompt_direction(prompts.0, prompts.1)?;
    let dv = g.constant(Tensor::from_slice(&[1, direction.len()], &direction));
    let factors = editor.factor_vars(g, x, dv);
    let target = g.constant(Tensor::from_slice(&[1, dt.len()], &dt));
    let inv = 1.0 / batch.len() as f64;
    let (mut align, mut l2, mut sim) = (Vec::new(), Vec::new(), Vec::new());
    for (s, &i) in batch.iter().enumerate() {
        let kernels = reassigned_kernels(g, &gen.generator, &factors, s);
        let w = LatentCode::batch_constants(g, &[&data.latents[i]]);
        let y = gen.generator.forward(g, &w, &kernels);
        let ey = embed.image.forward(g, y);
        align.push(match cfg.loss_mode {
            LossMode::Directional => {
                let a = &data.anchors[i];
                let ex = g.constant(Tensor::from_slice(&[1, a.len()], a));
                directional_loss_graph(g, ey, ex, target)
            }
            LossMode::Global => global_loss_graph(g, ey, target),
        });
        let recon = g.constant(data.recons[i].to_tensor());
        let diff = g.sub(y, recon);
        let norm = g.l2_norm(diff);
        l2.push(g.scale(norm, l2_scale(cfg.l2_mode, data.recons[i].data().len())));
        let fy = rsim.graph_features(g, y);
        let f = &data.recon_features[i];
        let fr = g.constant(Tensor::from_slice(&[1, f.len()], f));
        let c = g.cosine(fy, fr, COS_EPS);
        let c = g.mean(c);
        let neg = g.neg(c);
        sim.push(g.add_scalar(neg, 1.0));
    }
    let mean = |g: &mut Graph, vs: &[Var]| -> Var {
        let mut acc = vs[0];
        for v in &vs[1..] {
            acc = g.add(acc, *v);
        }
        g.scale(acc, inv)
    };
    let a = mean(g, &align);
    let l = mean(g, &l2);
    let s = mean(g, &sim);
    let terms = LossTerms { align: g.value(a).item(), l2: g.value(l).item(), sim: g.value(s).item() };
    let wa = g.scale(a, cfg.lambda_clip);
    let wl = g.scale(l, cfg.lambda_norm);
    let ws = g.scale(s, cfg.lambda_sim);
    let t = g.add(wa, wl);
    Ok((g.add(t, ws), terms))
}

/// Optimises backbone, modulator and heads of `editor` against the full
/// objective. The alignment gate is left to [`TrainReport::check_gate`].
/// On a non-finite loss the editor is restored to its last
/// checkpointed state and the step is reported.
pub fn train_editor(
    cfg: &TrainConfig,
    editor: &mut HyperEditor,
    gen: &GenModel,
    embed: &EmbedModel,
    rsim: &IdentityFeatureExtractor,
    data: &EditorDataset,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainReport> {
    cfg.validate()?;
    if !gen.is_trained() || !embed.is_trained() || !rsim.is_trained() {
        return Err(Error::Usage(String::from("editor training needs a trained generator, embedding and identity extractor")));
    }
    if data.is_empty() {
        return Err(Error::Input(String::from("editor dataset is empty")));
    }
    if editor.layers() != cfg.selection.layers {
        return Err(Error::Input(format!(
            "editor heads {:?} do not match the selected layers {:?}",
            editor.layers(),
            cfg.selection.layers
        )));
    }
    let mut rng = derive(cfg.seed, 0xed17);
    let mut opt = Adam::new(cfg.learning_rate);
    if let Some(c) = cfg.grad_clip {
        opt = opt.with_clip(c);
    }
    let mut last_good = editor.clone();
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (target, source) = &cfg.prompt_pool[rng.random_range(0..cfg.prompt_pool.len())];
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let mut g = Graph::new();
        let (loss, terms) = batch_objective(&mut g, editor, gen, embed, rsim, data, &batch, (target, source), cfg)?;
        let total = g.value(loss).item();
        if !total.is_finite() {
            *editor = last_good;
            warn!("editor loss not finite at step {step}; restored last checkpoint");
            return Err(Error::Diverged { step, detail: format!("total loss {total}, terms {terms:?}") });
        }
        let row = LossRow { step, total, align: terms.align, l2: terms.l2, sim: terms.sim };
        observer(TrainEvent::Step(&row));
        rows.push(row);
        let grads = g.backward(loss);
        opt.step(editor, &grads);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            last_good = editor.clone();
            observer(TrainEvent::Checkpoint { step: step + 1, editor });
        }
    }
    let report = TrainReport::from_rows(rows);
    info!("editor trained: align {:.4} -> {:.4}", report.initial_align, report.final_align);
    Ok(report)
}

/// Checksums of the frozen dependencies, keyed by role.
pub fn frozen_checksums(gen: &GenModel, embed: &EmbedModel, rsim: &IdentityFeatureExtractor) -> BTreeMap<&'static str, u64> {
    BTreeMap::from([("generator", gen.checksum()), ("embedding", embed.checksum()), ("rsim", rsim.0.checksum())])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained_rsim(r: usize) -> IdentityFeatureExtractor {
        let mut rs = IdentityFeatureExtractor::new(r, 4).unwrap();
        rs.0.set_trained(true);
        rs
    }

    fn noise_image(r: usize, k: usize) -> Image {
        Image::new(r, r, (0..3 * r * r).map(|i| ((i * k + 3) % 17) as f64 / 17.0).collect()).unwrap()
    }

    #[test]
    fn l2_worked_values() {
        let a = noise_image(4, 5);
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data_mut()[7] += 3.0;
        assert!((l2_loss(&b, &a).unwrap() - 3.0).abs() < 1e-15);
        assert!(matches!(l2_loss(&a, &noise_image(5, 5)), Err(Error::Shape(_))));
        assert_eq!(l2_scale(L2Mode::PerPixel, 48), 1.0 / libm::sqrt(48.0));
    }

    #[test]
    fn similarity_bounds_and_usage() {
        let rs = trained_rsim(8);
        let a = noise_image(8, 5);
        let b = noise_image(8, 11);
        assert!(similarity_loss(&a, &a, &rs).unwrap().abs() < 1e-12);
        let s = similarity_loss(&a, &b, &rs).unwrap();
        assert!((0.0..=2.0).contains(&s), "{s}");
        let fresh = IdentityFeatureExtractor::new(8, 4).unwrap();
        assert!(matches!(similarity_loss(&a, &b, &fresh), Err(Error::Usage(_))));
    }

    #[test]
    fn weighted_total() {
        let sel = LayerSelection::all(4);
        let mut cfg = TrainConfig::single("red circle", "blue circle", sel, 1);
        let t = LossTerms { align: 0.25, l2: 2.0, sim: 0.5 };
        assert_eq!(t.total(&cfg), 0.25 + 2.0 + 0.05);
        let base = t.total(&cfg);
        cfg.lambda_norm = 2.0;
        assert_eq!(t.total(&cfg) - base, 2.0);
        assert_eq!(LossTerms::default().total(&cfg), 0.0);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::single("red circle", "blue circle", LayerSelection::all(4), 1);
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { lambda_sim: -0.1, ..ok.clone() },
            TrainConfig { lambda_clip: f64::NAN, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { prompt_pool: Vec::new(), ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Input(_))), "{bad:?}");
        }
    }
}
