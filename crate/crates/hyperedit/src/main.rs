use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand};
use hyperedit::checkpoint::Checkpoint;
use hyperedit::config::load_train_cfg;
use hyperedit::dataset::{load_png, read_dataset, write_dataset};
use hyperedit::models::*;
use hyperedit::reports::*;
use hyperedit_core::embedspace::{ContrastiveConfig, EmbedConfig, EmbedModel};
use hyperedit_core::evalkit::{evaluate_edit, run_ablation, standard_grid, AblationContext, AttributeClassifier, ClassifierConfig};
use hyperedit_core::hypereditor::{interpolate_factors, synthesize_with, EditorConfig, HyperEditor};
use hyperedit_core::image::Image;
use hyperedit_core::layerselect::{probe_optimize, select_layers, ProbeConfig};
use hyperedit_core::nn::Module;
use hyperedit_core::synthworld::{generate_dataset, CaptionedSample};
use hyperedit_core::toygen::{GenConfig, GenModel, PretrainConfig};
use hyperedit_core::trainloop::{frozen_checksums, new_editor, train_editor, EditorDataset, IdentityFeatureExtractor, TrainEvent};
use log::info;

#[derive(Parser)]
#[command(name = "hyperedit", version, about = "Text-guided editing of a toy style generator by hypernetwork weight reassignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the text-image embedding.
    TrainEmbed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the generator, its inversion encoder and mapping network.
    PretrainGen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        /// Embedding checkpoint whose image features add a perceptual term.
        #[arg(long)]
        embed: Option<PathBuf>,
    },
    /// Train the shape classifier used by the similarity loss.
    TrainRsim {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the four-attribute evaluation oracle.
    TrainOracle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Probe per-layer latent displacement and pick the editable layers.
    SelectLayers {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        embed: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        source: String,
        #[arg(long, default_value_t = hyperedit_core::layerselect::DEFAULT_LAMBDA_STD)]
        lambda_std: f64,
        #[arg(long, default_value_t = 50)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an editor from a train.cfg file.
    TrainEditor {
        #[arg(long)]
        config: PathBuf,
    },
    /// Edit one image and write a source / reconstruction / edit strip.
    Edit {
        #[command(flatten)]
        models: EditorArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        source: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend the factors of two prompt pairs and write the strip of edits.
    Interp {
        #[command(flatten)]
        models: EditorArgs,
        #[arg(long)]
        image: PathBuf,
        /// First pair, `target | source`; weight η.
        #[arg(long)]
        pair_a: String,
        /// Second pair, `target | source`; weight 1 − η.
        #[arg(long)]
        pair_b: String,
        #[arg(long, default_value_t = 6)]
        eta_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an editor on a labelled dataset.
    Eval {
        #[command(flatten)]
        models: EditorArgs,
        #[arg(long)]
        rsim: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        source: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Source / reconstruction / edit triplets for the first k images of a dataset.
    Grid {
        #[command(flatten)]
        models: EditorArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        source: String,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the {directional, global} × {all, selected} grid from one train.cfg.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        /// Labelled evaluation dataset.
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct EditorArgs {
    #[arg(long)]
    gen: PathBuf,
    #[arg(long)]
    embed: PathBuf,
    #[arg(long)]
    editor: PathBuf,
}

struct Loaded {
    gen: GenModel,
    embed: EmbedModel,
    editor: HyperEditor,
}

impl EditorArgs {
    fn load(&self) -> Result<Loaded> {
        let gen = load_gen(&self.gen)?;
        let embed = load_embed(&self.embed)?;
        let ck = Checkpoint::load(&self.editor)?;
        check_dependency(&ck, "generator", gen.checksum())?;
        check_dependency(&ck, "embedding", embed.checksum())?;
        Ok(Loaded { gen, embed, editor: editor_from(&ck)? })
    }
}

fn load_gen(p: &Path) -> Result<GenModel> {
    generator_from(&Checkpoint::load(p)?)
}

fn load_embed(p: &Path) -> Result<EmbedModel> {
    embedding_from(&Checkpoint::load(p)?)
}

/// Last tenth of the samples (at least one) is held out.
fn split(samples: &[CaptionedSample]) -> Result<(Vec<&CaptionedSample>, Vec<&CaptionedSample>)> {
    ensure!(samples.len() >= 2, "need at least two samples to split off a held-out set");
    let hold = (samples.len() / 10).max(1);
    let refs: Vec<&CaptionedSample> = samples.iter().collect();
    let (a, b) = refs.split_at(samples.len() - hold);
    Ok((a.to_vec(), b.to_vec()))
}

fn progress(what: &'static str) -> impl FnMut(usize, f64) {
    move |step, loss| {
        if step % 100 == 0 {
            info!("{what} step {step}: loss {loss:.5}");
        }
    }
}

fn parse_pair(s: &str) -> Result<(String, String)> {
    let (t, src) = s.split_once('|').context("prompt pair must be 'target | source'")?;
    Ok((t.trim().to_string(), src.trim().to_string()))
}

fn train_classifier(
    data: &Path,
    steps: Option<usize>,
    base: ClassifierConfig,
    mut model: AttributeClassifier,
    what: &'static str,
) -> Result<AttributeClassifier> {
    let samples = read_dataset(data)?;
    let (train, hold) = split(&samples)?;
    let mut cfg = base;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let acc = model.train(&train, &hold, &cfg, &mut progress(what))?;
    println!("{what} held-out accuracy: {acc:?}");
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, seed, out } => {
            let samples = generate_dataset(n, seed)?;
            write_dataset(&out, &samples)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::TrainEmbed { data, out, seed, steps } => {
            let samples = read_dataset(&data)?;
            let (train, hold) = split(&samples)?;
            let mut cfg = ContrastiveConfig { seed, ..Default::default() };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let mut m = EmbedModel::new(&EmbedConfig::standard(), seed);
            let rep = m.train_contrastive(&train, &hold, &cfg, &mut progress("embed"))?;
            embedding_checkpoint(&m).save(&out)?;
            println!("retrieval accuracy {:.4}, temperature {:.4}", rep.retrieval_accuracy, rep.temperature);
        }
        Command::PretrainGen { data, out, seed, steps, embed } => {
            let samples = read_dataset(&data)?;
            let (train, hold) = split(&samples)?;
            let train: Vec<&Image> = train.iter().map(|s| &s.image).collect();
            let hold: Vec<&Image> = hold.iter().map(|s| &s.image).collect();
            let features = embed.as_deref().map(load_embed).transpose()?;
            let mut cfg = PretrainConfig { seed, ..Default::default() };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let mut m = GenModel::new(&GenConfig::standard(), seed)?;
            let feat = features.as_ref().map(|e| e as &dyn hyperedit_core::nn::FeatureNet);
            let rep = m.pretrain(&train, &hold, &cfg, feat, &mut progress("generator"))?;
            generator_checkpoint(&m).save(&out)?;
            println!("held-out reconstruction PSNR {:.2} dB", rep.holdout_psnr);
        }
        Command::TrainRsim { data, out, seed, steps } => {
            let m = train_classifier(&data, steps, ClassifierConfig { seed, ..Default::default() }, IdentityFeatureExtractor::new(32, seed)?.0, "rsim")?;
            rsim_checkpoint(&IdentityFeatureExtractor(m)).save(&out)?;
        }
        Command::TrainOracle { data, out, seed, steps } => {
            let m = train_classifier(&data, steps, ClassifierConfig { seed, ..ClassifierConfig::oracle() }, AttributeClassifier::oracle(seed), "oracle")?;
            classifier_checkpoint(ORACLE, &m).save(&out)?;
        }
        Command::SelectLayers { gen, embed, target, source, lambda_std, m, seeds, out } => {
            let gen = load_gen(&gen)?;
            let embed = load_embed(&embed)?;
            let cfg = ProbeConfig { steps: m, seeds: (0..seeds).collect(), ..Default::default() };
            let dw = probe_optimize(&gen, &embed, &target, &source, &cfg)?;
            let sel = select_layers(&dw, lambda_std)?;
            write_selection(&out, &sel)?;
            println!("selected layers {:?} (phi {:.5})", sel.layers, sel.phi);
        }
        Command::TrainEditor { config } => {
            let tf = load_train_cfg(&config, GenConfig::standard().layers())?;
            let gen = load_gen(&tf.gen)?;
            let embed = load_embed(&tf.embed)?;
            let rsim = rsim_from(&Checkpoint::load(&tf.rsim)?)?;
            let mut cfg = tf.train.clone();
            if let Some(p) = &tf.selection_csv {
                cfg.selection = read_selection(p)?;
            }
            let mut samples = read_dataset(&tf.data)?;
            if let Some(n) = tf.max_images {
                samples.truncate(n);
            }
            let images = samples.into_iter().map(|s| s.image).collect();
            let data = EditorDataset::prepare(&gen, &embed, &rsim, images, cfg.source)?;
            let mut editor = new_editor(&cfg, &EditorConfig::standard(), &gen)?;
            let deps = frozen_checksums(&gen, &embed, &rsim);
            std::fs::create_dir_all(&tf.out_dir)?;
            let ckpt = tf.out_dir.join("editor.ckpt");
            let mut save_err = None;
            let result = train_editor(&cfg, &mut editor, &gen, &embed, &rsim, &data, &mut |ev| match ev {
                TrainEvent::Step(r) if r.step % 50 == 0 => info!("step {}: total {:.4} align {:.4} l2 {:.4} sim {:.4}", r.step, r.total, r.align, r.l2, r.sim),
                TrainEvent::Step(_) => {}
                TrainEvent::Checkpoint { editor, .. } => {
                    if let Err(e) = editor_checkpoint(editor, gen.config(), &deps).save(&ckpt) {
                        save_err.get_or_insert(e);
                    }
                }
            });
            if let Some(e) = save_err {
                return Err(e);
            }
            let report = result?;
            editor_checkpoint(&editor, gen.config(), &deps).save(&ckpt)?;
            write_losses(&tf.out_dir.join("losses.csv"), &report.rows)?;
            println!("alignment {:.4} -> {:.4}", report.initial_align, report.final_align);
            report.check_gate()?;
        }
        Command::Edit { models, image, target, source, out } => {
            let m = models.load()?;
            let x = load_png(&image)?;
            let e = m.editor.edit(&m.gen, &m.embed, &x, &target, &source)?;
            let recon = m.gen.synthesize(&e.w_init)?;
            grid_png(&[vec![x, recon, e.image]], 4, &out)?;
        }
        Command::Interp { models, image, pair_a, pair_b, eta_steps, out } => {
            ensure!(eta_steps >= 2, "need at least two eta steps");
            let m = models.load()?;
            let x = load_png(&image)?;
            let (ta, sa) = parse_pair(&pair_a)?;
            let (tb, sb) = parse_pair(&pair_b)?;
            let w = m.gen.invert(&x)?;
            let da = m.editor.factors(&x, &m.embed.prompt_direction(&ta, &sa)?)?;
            let db = m.editor.factors(&x, &m.embed.prompt_direction(&tb, &sb)?)?;
            let frames = (0..eta_steps)
                .map(|i| {
                    let eta = i as f64 / (eta_steps - 1) as f64;
                    synthesize_with(&m.gen, &interpolate_factors(&da, &db, eta)?, &w)
                })
                .collect::<hyperedit_core::Result<Vec<_>>>()?;
            grid_png(&[frames], 4, &out)?;
        }
        Command::Eval { models, rsim, oracle, data, target, source, out } => {
            let m = models.load()?;
            let rsim = rsim_from(&Checkpoint::load(&rsim)?)?;
            let oracle = classifier_from(ORACLE, &Checkpoint::load(&oracle)?)?;
            let samples = read_dataset(&data)?;
            let refs: Vec<&CaptionedSample> = samples.iter().collect();
            let report = evaluate_edit(&m.editor, &m.gen, &m.embed, &rsim, &oracle, &refs, &target, &source)?;
            write_report(&out, &report)?;
            let a = report.aggregate();
            println!(
                "target success {:.3}, preservation {:.3}, PSNR {:.2}, alignment {:.3}",
                a.target_success, a.preservation, a.psnr, a.directional_alignment
            );
        }
        Command::Grid { models, data, target, source, images, out } => {
            let m = models.load()?;
            let samples = read_dataset(&data)?;
            let mut rows = Vec::new();
            for s in samples.iter().take(images) {
                let e = m.editor.edit(&m.gen, &m.embed, &s.image, &target, &source)?;
                rows.push(vec![s.image.clone(), m.gen.synthesize(&e.w_init)?, e.image]);
            }
            grid_png(&rows, 4, &out)?;
        }
        Command::Ablate { config, oracle, eval_data, out } => {
            let tf = load_train_cfg(&config, GenConfig::standard().layers())?;
            let gen = load_gen(&tf.gen)?;
            let embed = load_embed(&tf.embed)?;
            let rsim = rsim_from(&Checkpoint::load(&tf.rsim)?)?;
            let oracle = classifier_from(ORACLE, &Checkpoint::load(&oracle)?)?;
            let mut samples = read_dataset(&tf.data)?;
            if let Some(n) = tf.max_images {
                samples.truncate(n);
            }
            let images = samples.into_iter().map(|s| s.image).collect();
            let data = EditorDataset::prepare(&gen, &embed, &rsim, images, tf.train.source)?;
            let eval = read_dataset(&eval_data)?;
            let eval: Vec<&CaptionedSample> = eval.iter().collect();
            let selected = match &tf.selection_csv {
                Some(p) => read_selection(p)?,
                None => tf.train.selection.clone(),
            };
            let ctx = AblationContext { gen: &gen, embed: &embed, rsim: &rsim, oracle: &oracle, train: &data, eval: &eval, editor: &EditorConfig::standard() };
            let rows = run_ablation(&ctx, &tf.train, &standard_grid(gen.config().layers(), &selected), &mut |cell, ev| {
                if let TrainEvent::Step(r) = ev {
                    if r.step % 100 == 0 {
                        info!("{cell} step {}: total {:.4}", r.step, r.total);
                    }
                }
            })?;
            write_ablation(&out, &rows)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_split() {
        let s = generate_dataset(25, 1).unwrap();
        let (a, b) = split(&s).unwrap();
        assert_eq!((a.len(), b.len()), (23, 2));
        assert!(split(&s[..1]).is_err());
        assert_eq!(parse_pair(" a red shape |a shape ").unwrap(), ("a red shape".into(), "a shape".into()));
        assert!(parse_pair("a red shape").is_err());
    }
}
