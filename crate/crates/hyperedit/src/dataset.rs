//! Dataset directories: `images/%06d.png` plus `manifest.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use hyperedit_core::image::Image;
use hyperedit_core::synthworld::{
    caption, Background, CaptionedSample, FillColor, SceneSpec, ShapeClass, Size, VOCAB,
};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_COLUMNS: [&str; 6] = ["index", "caption", "shape", "color", "size", "background"];

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("images").join(format!("{index:06}.png"))
}

/// Quantises to 8-bit RGB.
pub fn to_rgb8(img: &Image) -> image::RgbImage {
    image::RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let p = img.pixel(y as usize, x as usize);
        image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn from_rgb8(rgb: &image::RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::filled(h, w, [0.0; 3]);
    for (x, y, p) in rgb.enumerate_pixels() {
        img.set_pixel(y as usize, x as usize, p.0.map(|v| v as f64 / 255.0));
    }
    img
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    to_rgb8(img).save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    Ok(from_rgb8(&rgb))
}

pub fn write_dataset(dir: &Path, samples: &[CaptionedSample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
    w.write_record(MANIFEST_COLUMNS)?;
    for (i, s) in samples.iter().enumerate() {
        save_png(&s.image, &image_path(dir, i))?;
        let l = &s.labels;
        w.write_record([
            i.to_string(),
            s.caption.join(" "),
            l.shape().token().to_string(),
            l.color().token().to_string(),
            l.size().token().to_string(),
            l.background().token().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn static_tokens(caption: &str) -> Result<Vec<&'static str>> {
    caption
        .split_whitespace()
        .map(|t| VOCAB.iter().copied().find(|v| *v == t).with_context(|| format!("caption token '{t}' not in vocabulary")))
        .collect()
}

/// Reads images and labels back. Jitter and rotation are not stored, so the
/// returned specs are centred and unrotated.
pub fn read_dataset(dir: &Path) -> Result<Vec<CaptionedSample>> {
    let mut r = csv::Reader::from_path(dir.join(MANIFEST)).with_context(|| format!("opening manifest in {}", dir.display()))?;
    ensure!(r.headers()?.iter().eq(MANIFEST_COLUMNS), "manifest columns must be {}", MANIFEST_COLUMNS.join(","));
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let index: usize = rec[0].parse().with_context(|| format!("manifest row {row}: bad index"))?;
        let shape = ShapeClass::from_token(&rec[2]).with_context(|| format!("row {row}: unknown shape '{}'", &rec[2]))?;
        let color = FillColor::from_token(&rec[3]).with_context(|| format!("row {row}: unknown color '{}'", &rec[3]))?;
        let size = Size::from_token(&rec[4]).with_context(|| format!("row {row}: unknown size '{}'", &rec[4]))?;
        let background = Background::from_token(&rec[5]).with_context(|| format!("row {row}: unknown background '{}'", &rec[5]))?;
        let labels = SceneSpec::centered(shape, color, size, background);
        let tokens = static_tokens(&rec[1])?;
        ensure!(tokens == caption(&labels), "row {row}: caption '{}' disagrees with its labels", &rec[1]);
        out.push(CaptionedSample { image: load_png(&image_path(dir, index))?, caption: tokens, labels });
    }
    ensure!(!out.is_empty(), "dataset in {} is empty", dir.display());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hyperedit_core::synthworld::generate_dataset;

    #[test]
    fn round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(5, 3).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert!(image_path(dir.path(), 4).exists());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.labels.labels(), b.labels.labels());
            let err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 255.0 + 1e-12, "{err}");
        }
    }

    #[test]
    fn rejects_bad_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "index,caption\n0,a circle\n").unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
