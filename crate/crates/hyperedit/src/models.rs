//! Checkpoint conversion for each trained component.

use std::collections::BTreeMap;

use anyhow::{ensure, Context, Result};
use hyperedit_core::embedspace::{EmbedConfig, EmbedModel};
use hyperedit_core::evalkit::AttributeClassifier;
use hyperedit_core::hypereditor::{EditorConfig, HyperEditor};
use hyperedit_core::nn::Module;
use hyperedit_core::synthworld::Attribute;
use hyperedit_core::toygen::{GenConfig, GenModel};
use hyperedit_core::trainloop::IdentityFeatureExtractor;

use crate::checkpoint::{format_list, Checkpoint};

pub const GENERATOR: &str = "generator";
pub const EMBEDDING: &str = "embedding";
pub const ORACLE: &str = "oracle";
pub const RSIM: &str = "rsim";
pub const EDITOR: &str = "editor";

fn gen_meta(c: Checkpoint, cfg: &GenConfig) -> Checkpoint {
    c.with_meta("gen.channels", format_list(&cfg.channels))
        .with_meta("gen.upsample_after", format_list(&cfg.upsample_after))
        .with_meta("gen.base_res", cfg.base_res)
        .with_meta("gen.d_w", cfg.d_w)
        .with_meta("gen.d_z", cfg.d_z)
        .with_meta("gen.kernel", cfg.kernel)
        .with_meta("gen.enc_channels", format_list(&cfg.enc_channels))
        .with_meta("gen.mapping_hidden", cfg.mapping_hidden)
}

fn read_gen_config(c: &Checkpoint) -> Result<GenConfig> {
    let cfg = GenConfig {
        channels: c.meta_list("gen.channels")?,
        upsample_after: c.meta_list("gen.upsample_after")?,
        base_res: c.meta_parse("gen.base_res")?,
        d_w: c.meta_parse("gen.d_w")?,
        d_z: c.meta_parse("gen.d_z")?,
        kernel: c.meta_parse("gen.kernel")?,
        enc_channels: c.meta_list("gen.enc_channels")?,
        mapping_hidden: c.meta_parse("gen.mapping_hidden")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn generator_checkpoint(gen: &GenModel) -> Checkpoint {
    let c = Checkpoint::from_module(GENERATOR, gen).with_meta("trained", gen.is_trained());
    gen_meta(c, gen.config()).with_meta("checksum", gen.checksum())
}

pub fn generator_from(c: &Checkpoint) -> Result<GenModel> {
    c.expect_kind(GENERATOR)?;
    let mut gen = GenModel::new(&read_gen_config(c)?, 0)?;
    c.load_into(&mut gen)?;
    gen.set_trained(c.meta_parse("trained")?);
    Ok(gen)
}

pub fn embedding_checkpoint(m: &EmbedModel) -> Checkpoint {
    let cfg = m.config();
    Checkpoint::from_module(EMBEDDING, m)
        .with_meta("trained", m.is_trained())
        .with_meta("embed.d_e", cfg.d_e)
        .with_meta("embed.channels", format_list(&cfg.channels))
        .with_meta("embed.resolution", cfg.resolution)
        .with_meta("embed.token_dim", cfg.token_dim)
        .with_meta("embed.text_hidden", cfg.text_hidden)
        .with_meta("checksum", m.checksum())
}

pub fn embedding_from(c: &Checkpoint) -> Result<EmbedModel> {
    c.expect_kind(EMBEDDING)?;
    let cfg = EmbedConfig {
        d_e: c.meta_parse("embed.d_e")?,
        channels: c.meta_list("embed.channels")?,
        resolution: c.meta_parse("embed.resolution")?,
        token_dim: c.meta_parse("embed.token_dim")?,
        text_hidden: c.meta_parse("embed.text_hidden")?,
    };
    let mut m = EmbedModel::new(&cfg, 0);
    c.load_into(&mut m)?;
    m.set_trained(c.meta_parse("trained")?);
    Ok(m)
}

pub fn classifier_checkpoint(kind: &str, m: &AttributeClassifier) -> Checkpoint {
    let names: Vec<&str> = m.attributes().iter().map(|a| a.name()).collect();
    Checkpoint::from_module(kind, m)
        .with_meta("trained", m.is_trained())
        .with_meta("attributes", names.join(","))
        .with_meta("resolution", m.resolution())
        .with_meta("channels", format_list(&m.channels()))
        .with_meta("features", m.feature_dim())
        .with_meta("checksum", m.checksum())
}

pub fn classifier_from(kind: &str, c: &Checkpoint) -> Result<AttributeClassifier> {
    c.expect_kind(kind)?;
    let attributes = c
        .meta("attributes")?
        .split(',')
        .map(|n| Attribute::from_name(n).with_context(|| format!("unknown attribute '{n}'")))
        .collect::<Result<Vec<_>>>()?;
    let mut m = AttributeClassifier::new(
        &attributes,
        c.meta_parse("resolution")?,
        &c.meta_list("channels")?,
        c.meta_parse("features")?,
        0,
    )?;
    c.load_into(&mut m)?;
    m.set_trained(c.meta_parse("trained")?);
    Ok(m)
}

pub fn rsim_checkpoint(r: &IdentityFeatureExtractor) -> Checkpoint {
    classifier_checkpoint(RSIM, &r.0)
}

pub fn rsim_from(c: &Checkpoint) -> Result<IdentityFeatureExtractor> {
    let m = classifier_from(RSIM, c)?;
    ensure!(m.attributes() == [Attribute::Shape], "identity extractor must classify shape only");
    Ok(IdentityFeatureExtractor(m))
}

/// Editor weights plus the architecture and the checksums of the components
/// it was trained against.
pub fn editor_checkpoint(editor: &HyperEditor, gen: &GenConfig, deps: &BTreeMap<&'static str, u64>) -> Checkpoint {
    let cfg = editor.config();
    let mut c = Checkpoint::from_module(EDITOR, editor)
        .with_meta("layers", format_list(&editor.layers()))
        .with_meta("editor.backbone_width", cfg.backbone_width)
        .with_meta("editor.residual_blocks", cfg.residual_blocks)
        .with_meta("editor.feature_channels", cfg.feature_channels)
        .with_meta("editor.fmm_hidden", cfg.fmm_hidden)
        .with_meta("editor.d_e", cfg.d_e)
        .with_meta("editor.resolution", cfg.resolution)
        .with_meta("checksum", editor.checksum());
    for (k, v) in deps {
        c = c.with_meta(&format!("dep.{k}"), v);
    }
    gen_meta(c, gen)
}

pub fn editor_from(c: &Checkpoint) -> Result<HyperEditor> {
    c.expect_kind(EDITOR)?;
    let cfg = EditorConfig {
        backbone_width: c.meta_parse("editor.backbone_width")?,
        residual_blocks: c.meta_parse("editor.residual_blocks")?,
        feature_channels: c.meta_parse("editor.feature_channels")?,
        fmm_hidden: c.meta_parse("editor.fmm_hidden")?,
        d_e: c.meta_parse("editor.d_e")?,
        resolution: c.meta_parse("editor.resolution")?,
    };
    let mut e = HyperEditor::new(&cfg, &read_gen_config(c)?, &c.meta_list("layers")?, 0)?;
    c.load_into(&mut e)?;
    Ok(e)
}

/// Fails unless `c` recorded `checksum` for dependency `role`.
pub fn check_dependency(c: &Checkpoint, role: &str, checksum: u64) -> Result<()> {
    let stored: u64 = c.meta_parse(&format!("dep.{role}"))?;
    ensure!(stored == checksum, "{} checkpoint was trained against a different {role} ({stored:#x} != {checksum:#x})", c.kind);
    Ok(())
}
