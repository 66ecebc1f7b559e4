//! `train.cfg`: flat `key = value` lines, `#` comments, repeatable `prompt`.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hyperedit_core::layerselect::LayerSelection;
use hyperedit_core::trainloop::{L2Mode, LossMode, SourceEmbedding, TrainConfig};

use crate::checkpoint::parse_list;

/// Everything `train-editor` needs: the training config plus file locations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub data: PathBuf,
    pub gen: PathBuf,
    pub embed: PathBuf,
    pub rsim: PathBuf,
    pub out_dir: PathBuf,
    /// Use at most this many dataset images.
    pub max_images: Option<usize>,
    /// Read the layer selection from a `selection.csv` instead of `layers`.
    pub selection_csv: Option<PathBuf>,
}

fn resolve(base: &Path, v: &str) -> PathBuf {
    let p = PathBuf::from(v);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Parses the text of a config; relative paths resolve against `base`.
pub fn parse_train_cfg(text: &str, base: &Path, generator_layers: usize) -> Result<TrainFile> {
    let mut cfg = TrainConfig::new(Vec::new(), LayerSelection::all(generator_layers), 0);
    let (mut data, mut gen, mut embed, mut rsim) = (None, None, None, None);
    let mut out_dir = base.to_path_buf();
    let mut max_images = None;
    let mut selection_csv = None;
    let mut steps = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').with_context(|| format!("line {}: expected key = value", n + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let ctx = || format!("line {}: bad value for '{key}'", n + 1);
        match key {
            "lambda_clip" => cfg.lambda_clip = value.parse().with_context(ctx)?,
            "lambda_norm" => cfg.lambda_norm = value.parse().with_context(ctx)?,
            "lambda_sim" => cfg.lambda_sim = value.parse().with_context(ctx)?,
            "batch_size" => cfg.batch_size = value.parse().with_context(ctx)?,
            "learning_rate" => cfg.learning_rate = value.parse().with_context(ctx)?,
            "steps" => steps = Some(value.parse().with_context(ctx)?),
            "seed" => cfg.seed = value.parse().with_context(ctx)?,
            "checkpoint_every" => cfg.checkpoint_every = value.parse().with_context(ctx)?,
            "grad_clip" => cfg.grad_clip = Some(value.parse().with_context(ctx)?),
            "loss_mode" => {
                cfg.loss_mode = match value {
                    "directional" => LossMode::Directional,
                    "global" => LossMode::Global,
                    _ => bail!("line {}: loss_mode must be directional or global", n + 1),
                }
            }
            "l2_mode" => {
                cfg.l2_mode = match value {
                    "norm" => L2Mode::Norm,
                    "per_pixel" => L2Mode::PerPixel,
                    _ => bail!("line {}: l2_mode must be norm or per_pixel", n + 1),
                }
            }
            "source_embedding" => {
                cfg.source = match value {
                    "real" => SourceEmbedding::Real,
                    "reconstruction" => SourceEmbedding::Reconstruction,
                    _ => bail!("line {}: source_embedding must be real or reconstruction", n + 1),
                }
            }
            "prompt" => {
                let (t, s) = value.split_once('|').with_context(|| format!("line {}: prompt must be 'target | source'", n + 1))?;
                cfg.prompt_pool.push((t.trim().to_string(), s.trim().to_string()));
            }
            "layers" => {
                if value != "all" {
                    let layers = parse_list(value).with_context(ctx)?;
                    ensure!(
                        layers.iter().all(|&l| (1..=generator_layers).contains(&l)),
                        "line {}: layers must lie in 1..={generator_layers}",
                        n + 1
                    );
                    cfg.selection = LayerSelection { layers, ..LayerSelection::all(generator_layers) };
                }
            }
            "selection" => selection_csv = Some(resolve(base, value)),
            "data" => data = Some(resolve(base, value)),
            "gen" => gen = Some(resolve(base, value)),
            "embed" => embed = Some(resolve(base, value)),
            "rsim" => rsim = Some(resolve(base, value)),
            "out_dir" => out_dir = resolve(base, value),
            "max_images" => max_images = Some(value.parse().with_context(ctx)?),
            _ => bail!("line {}: unknown key '{key}'", n + 1),
        }
    }
    cfg.steps = steps.context("config must set steps")?;
    cfg.validate()?;
    Ok(TrainFile {
        train: cfg,
        data: data.context("config must set data")?,
        gen: gen.context("config must set gen")?,
        embed: embed.context("config must set embed")?,
        rsim: rsim.context("config must set rsim")?,
        out_dir,
        max_images,
        selection_csv,
    })
}

pub fn load_train_cfg(path: &Path, generator_layers: usize) -> Result<TrainFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_train_cfg(&text, base, generator_layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# red edit
steps = 20
prompt = a red shape | a shape
prompt = a large shape | a small shape
lambda_sim = 0.5
loss_mode = global
l2_mode = per_pixel
layers = 2, 5
data = data
gen = /m/gen.ckpt
embed = embed.ckpt
rsim = rsim.ckpt
";

    #[test]
    fn parses_every_field() {
        let f = parse_train_cfg(SAMPLE, Path::new("/w"), 8).unwrap();
        assert_eq!(f.train.steps, 20);
        assert_eq!(f.train.prompt_pool.len(), 2);
        assert_eq!(f.train.prompt_pool[1], ("a large shape".to_string(), "a small shape".to_string()));
        assert_eq!(f.train.lambda_sim, 0.5);
        assert_eq!(f.train.lambda_clip, 1.0);
        assert_eq!(f.train.batch_size, 4);
        assert_eq!(f.train.loss_mode, LossMode::Global);
        assert_eq!(f.train.l2_mode, L2Mode::PerPixel);
        assert_eq!(f.train.selection.layers, vec![2, 5]);
        assert_eq!(f.data, PathBuf::from("/w/data"));
        assert_eq!(f.gen, PathBuf::from("/m/gen.ckpt"));
        assert_eq!(f.out_dir, PathBuf::from("/w"));
    }

    #[test]
    fn rejects_bad_input() {
        let base = Path::new("/w");
        assert!(parse_train_cfg("steps = 3\nbogus = 1\n", base, 8).is_err());
        assert!(parse_train_cfg(&SAMPLE.replace("layers = 2, 5", "layers = 9"), base, 8).is_err());
        assert!(parse_train_cfg(&SAMPLE.replace("lambda_sim = 0.5", "lambda_sim = -1"), base, 8).is_err());
        assert!(parse_train_cfg(&SAMPLE.replace("steps = 20", ""), base, 8).is_err());
        let no_prompts: String = SAMPLE.lines().filter(|l| !l.starts_with("prompt")).map(|l| format!("{l}\n")).collect();
        assert!(parse_train_cfg(&no_prompts, base, 8).is_err());
    }
}
