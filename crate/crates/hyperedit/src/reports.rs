//! CSV outputs and PNG grids.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use hyperedit_core::evalkit::{AblationRow, EditReport};
use hyperedit_core::image::Image;
use hyperedit_core::layerselect::LayerSelection;
use hyperedit_core::trainloop::{LossMode, LossRow};

use crate::dataset::to_rgb8;

pub const LOSS_COLUMNS: [&str; 5] = ["step", "total", "align", "l2", "sim"];
pub const SELECTION_COLUMNS: [&str; 4] = ["layer", "delta_omega", "phi", "selected"];
pub const REPORT_COLUMNS: [&str; 10] = [
    "index",
    "psnr",
    "ssim",
    "directional_alignment",
    "identity_score",
    "labels_before",
    "labels_after",
    "target_hit",
    "preserved",
    "row_kind",
];
pub const ABLATION_COLUMNS: [&str; 14] = [
    "cell",
    "loss_mode",
    "layers",
    "head_params",
    "editor_params",
    "align_ratio",
    "gate_passed",
    "psnr",
    "ssim",
    "directional_alignment",
    "identity_score",
    "target_success",
    "preservation",
    "error",
];

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_losses(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(LOSS_COLUMNS)?;
    for r in rows {
        w.write_record([r.step.to_string(), r.total.to_string(), r.align.to_string(), r.l2.to_string(), r.sim.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_losses(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    ensure!(r.headers()?.iter().eq(LOSS_COLUMNS), "loss CSV columns must be {}", LOSS_COLUMNS.join(","));
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(LossRow { step: rec[0].parse()?, total: rec[1].parse()?, align: rec[2].parse()?, l2: rec[3].parse()?, sim: rec[4].parse()? })
        })
        .collect()
}

pub fn write_selection(path: &Path, sel: &LayerSelection) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(SELECTION_COLUMNS)?;
    for (i, dw) in sel.delta_omega.iter().enumerate() {
        let l = i + 1;
        w.write_record([l.to_string(), dw.to_string(), sel.phi.to_string(), u8::from(sel.contains(l)).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// The selected layers and displacements of a `selection.csv`.
pub fn read_selection(path: &Path) -> Result<LayerSelection> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    ensure!(r.headers()?.iter().eq(SELECTION_COLUMNS), "selection CSV columns must be {}", SELECTION_COLUMNS.join(","));
    let mut sel = LayerSelection { layers: Vec::new(), lambda_std: f64::NAN, delta_omega: Vec::new(), phi: 0.0 };
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let layer: usize = rec[0].parse()?;
        ensure!(layer == i + 1, "selection rows must list layers 1, 2, ... in order");
        sel.delta_omega.push(rec[1].parse()?);
        sel.phi = rec[2].parse()?;
        if &rec[3] == "1" {
            sel.layers.push(layer);
        }
    }
    ensure!(!sel.layers.is_empty(), "selection CSV selects no layers");
    Ok(sel)
}

fn labels(l: &[usize; 4]) -> String {
    l.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Per-image rows followed by one `mean` row.
pub fn write_report(path: &Path, report: &EditReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for r in &report.rows {
        w.write_record([
            r.index.to_string(),
            r.psnr.to_string(),
            r.ssim.to_string(),
            r.directional_alignment.to_string(),
            r.identity_score.to_string(),
            labels(&r.labels_before),
            labels(&r.labels_after),
            u8::from(r.target_hit).to_string(),
            u8::from(r.preserved).to_string(),
            "image".to_string(),
        ])?;
    }
    let a = report.aggregate();
    w.write_record([
        String::new(),
        a.psnr.to_string(),
        a.ssim.to_string(),
        a.directional_alignment.to_string(),
        a.identity_score.to_string(),
        String::new(),
        String::new(),
        a.target_success.to_string(),
        a.preservation.to_string(),
        "mean".to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(ABLATION_COLUMNS)?;
    for r in rows {
        let mode = match r.loss_mode {
            LossMode::Directional => "directional",
            LossMode::Global => "global",
        };
        let mut rec = vec![
            r.name.clone(),
            mode.to_string(),
            crate::checkpoint::format_list(&r.layers),
            r.head_params.to_string(),
            r.editor_params.to_string(),
            r.align_ratio.map_or(String::new(), |v| v.to_string()),
            u8::from(r.gate_passed).to_string(),
        ];
        match &r.outcome {
            Ok(a) => {
                for v in [a.psnr, a.ssim, a.directional_alignment, a.identity_score, a.target_success, a.preservation] {
                    rec.push(v.to_string());
                }
                rec.push(String::new());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 6));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Tiles rows of equally sized images, each pixel enlarged `scale` times,
/// with a one-pixel white gutter.
pub fn grid_png(rows: &[Vec<Image>], scale: u32, path: &Path) -> Result<()> {
    ensure!(!rows.is_empty() && rows.iter().all(|r| !r.is_empty()), "grid needs at least one image per row");
    let (h, w) = (rows[0][0].height() as u32, rows[0][0].width() as u32);
    ensure!(
        rows.iter().flatten().all(|im| im.height() as u32 == h && im.width() as u32 == w),
        "grid images must share one size"
    );
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1) as u32;
    let (cw, ch) = (w * scale + 1, h * scale + 1);
    let mut out = image::RgbImage::from_pixel(cols * cw + 1, rows.len() as u32 * ch + 1, image::Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, im) in row.iter().enumerate() {
            let tile = to_rgb8(im);
            for y in 0..h * scale {
                for x in 0..w * scale {
                    out.put_pixel(1 + c as u32 * cw + x, 1 + r as u32 * ch + y, *tile.get_pixel(x / scale, y / scale));
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    out.save(path).with_context(|| format!("writing {}", path.display()))
}
