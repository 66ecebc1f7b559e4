//! Procedural captioned shapes: the training and evaluation data for every
//! model in the crate.
//!
//! A [`SceneSpec`] fully determines a 32×32 anti-aliased rendering and its
//! captions, so every sample carries exact attribute labels.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::image::Image;
use crate::rng::derive;
use crate::{Error, Result};

pub const RESOLUTION: usize = 32;
pub const SUPERSAMPLE: usize = 4;
pub const MAX_JITTER: f64 = 0.15;

const LARGE_RADIUS: f64 = 0.32;
const SMALL_RADIUS: f64 = 0.18;

macro_rules! attribute {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $token:literal),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($variant),* }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),*];

            pub fn token(self) -> &'static str {
                match self { $($name::$variant => $token),* }
            }

            pub fn from_token(token: &str) -> Option<Self> {
                match token { $($token => Some($name::$variant),)* _ => None }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }
        }
    };
}

attribute!(ShapeClass { Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross" });
attribute!(FillColor { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow", White => "white" });
attribute!(Size { Small => "small", Large => "large" });
attribute!(Background { Dark => "dark", Light => "light" });

impl FillColor {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            FillColor::Red => [0.9, 0.1, 0.1],
            FillColor::Green => [0.1, 0.8, 0.15],
            FillColor::Blue => [0.1, 0.2, 0.9],
            FillColor::Yellow => [0.9, 0.85, 0.1],
            FillColor::White => [0.95, 0.95, 0.95],
        }
    }
}

impl Background {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Background::Dark => [0.1, 0.1, 0.1],
            Background::Light => [0.8, 0.8, 0.8],
        }
    }
}

impl Size {
    fn radius(self) -> f64 {
        match self {
            Size::Small => SMALL_RADIUS,
            Size::Large => LARGE_RADIUS,
        }
    }
}

/// The four labelled attributes of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    Shape,
    Color,
    Size,
    Background,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Shape, Attribute::Color, Attribute::Size, Attribute::Background];

    pub fn classes(self) -> usize {
        match self {
            Attribute::Shape => ShapeClass::ALL.len(),
            Attribute::Color => FillColor::ALL.len(),
            Attribute::Size => Size::ALL.len(),
            Attribute::Background => Background::ALL.len(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Color => "color",
            Attribute::Size => "size",
            Attribute::Background => "background",
        }
    }

    /// Position in [`Attribute::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

/// Everything needed to render one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    shape: ShapeClass,
    color: FillColor,
    size: Size,
    background: Background,
    jitter: [f64; 2],
    rotation: f64,
}

impl SceneSpec {
    /// `jitter` is in units of image width and must lie in `[-0.15, 0.15]`;
    /// `rotation` is in degrees and must lie in `[0, 360)`.
    pub fn new(
        shape: ShapeClass,
        color: FillColor,
        size: Size,
        background: Background,
        jitter: [f64; 2],
        rotation: f64,
    ) -> Result<Self> {
        if jitter.iter().any(|j| !j.is_finite() || j.abs() > MAX_JITTER) {
            return Err(Error::Input(format!("jitter {jitter:?} outside [-{MAX_JITTER}, {MAX_JITTER}]")));
        }
        if !(0.0..360.0).contains(&rotation) {
            return Err(Error::Input(format!("rotation {rotation} outside [0, 360)")));
        }
        Ok(SceneSpec { shape, color, size, background, jitter, rotation })
    }

    /// A centred, unrotated scene.
    pub fn centered(shape: ShapeClass, color: FillColor, size: Size, background: Background) -> Self {
        SceneSpec { shape, color, size, background, jitter: [0.0, 0.0], rotation: 0.0 }
    }

    pub fn shape(&self) -> ShapeClass {
        self.shape
    }

    pub fn color(&self) -> FillColor {
        self.color
    }

    pub fn size(&self) -> Size {
        self.size
    }

    pub fn background(&self) -> Background {
        self.background
    }

    pub fn jitter(&self) -> [f64; 2] {
        self.jitter
    }

    pub fn rotation(&self) -> f64 {
        self.rotation
    }

    pub fn with_color(mut self, color: FillColor) -> Self {
        self.color = color;
        self
    }

    /// Class index of one attribute.
    pub fn label(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Shape => self.shape.index(),
            Attribute::Color => self.color.index(),
            Attribute::Size => self.size.index(),
            Attribute::Background => self.background.index(),
        }
    }

    pub fn labels(&self) -> [usize; 4] {
        Attribute::ALL.map(|a| self.label(a))
    }

    /// Draws a spec with every attribute uniform.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let shape = ShapeClass::ALL[rng.random_range(0..ShapeClass::ALL.len())];
        let color = FillColor::ALL[rng.random_range(0..FillColor::ALL.len())];
        let size = Size::ALL[rng.random_range(0..Size::ALL.len())];
        let background = Background::ALL[rng.random_range(0..Background::ALL.len())];
        let jitter = [rng.random_range(-MAX_JITTER..=MAX_JITTER), rng.random_range(-MAX_JITTER..=MAX_JITTER)];
        let rotation = rng.random_range(0.0..360.0);
        SceneSpec { shape, color, size, background, jitter, rotation }
    }

    /// Largest distance from the shape centre to any covered point, in image widths.
    pub fn extent(&self) -> f64 {
        self.size.radius()
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let r = self.size.radius();
        let (cx, cy) = (0.5 + self.jitter[0], 0.5 + self.jitter[1]);
        let (dx, dy) = (px - cx, py - cy);
        let th = -self.rotation.to_radians();
        let (s, c) = libm::sincos(th);
        let x = c * dx - s * dy;
        let y = s * dx + c * dy;
        match self.shape {
            ShapeClass::Circle => x * x + y * y <= r * r,
            ShapeClass::Square => {
                let a = r / core::f64::consts::SQRT_2;
                x.abs() <= a && y.abs() <= a
            }
            ShapeClass::Triangle => {
                // equilateral, circumradius r, apex up; every edge sits at distance r/2
                let inr = 0.5 * r;
                let normals = [(0.0, 1.0), (0.866_025_403_784_438_6, -0.5), (-0.866_025_403_784_438_6, -0.5)];
                normals.iter().all(|(nx, ny)| x * nx + y * ny <= inr)
            }
            ShapeClass::Cross => {
                // arm half-length chosen so the arm corners stay within r
                let len = r / libm::sqrt(1.0 + 1.0 / 9.0);
                let half = len / 3.0;
                (x.abs() <= len && y.abs() <= half) || (x.abs() <= half && y.abs() <= len)
            }
        }
    }
}

/// Renders `spec` at 32×32 with 4×4 supersampling per pixel.
pub fn render(spec: &SceneSpec) -> Image {
    render_at(spec, RESOLUTION)
}

/// Renders `spec` at an arbitrary square resolution.
pub fn render_at(spec: &SceneSpec, res: usize) -> Image {
    let bg = spec.background.rgb();
    let fg = spec.color.rgb();
    let mut img = Image::filled(res, res, bg);
    let n = SUPERSAMPLE;
    let inv = 1.0 / (res * n) as f64;
    for py in 0..res {
        for px in 0..res {
            let mut hits = 0usize;
            for sy in 0..n {
                for sx in 0..n {
                    let x = ((px * n + sx) as f64 + 0.5) * inv;
                    let y = ((py * n + sy) as f64 + 0.5) * inv;
                    if spec.contains(x, y) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cov = hits as f64 / (n * n) as f64;
                let rgb = [0, 1, 2].map(|c| bg[c] * (1.0 - cov) + fg[c] * cov);
                img.set_pixel(py, px, rgb);
            }
        }
    }
    img
}

/// The closed caption vocabulary.
pub const VOCAB: [&str; 17] = [
    "a", "small", "large", "red", "green", "blue", "yellow", "white", "circle", "square", "triangle", "cross",
    "shape", "on", "dark", "light", "background",
];

pub fn token_id(token: &str) -> Option<usize> {
    VOCAB.iter().position(|t| *t == token)
}

/// Whitespace tokenization into vocabulary ids.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let ids: Vec<usize> = text
        .split_whitespace()
        .map(|t| token_id(t).ok_or_else(|| Error::Input(format!("token {t:?} is not in the vocabulary"))))
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        return Err(Error::Input(String::from("empty prompt")));
    }
    Ok(ids)
}

/// Which attributes a caption mentions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Template {
    pub size: bool,
    pub color: bool,
    pub shape: bool,
    pub background: bool,
}

impl Template {
    pub const FULL: Template = Template { size: true, color: true, shape: true, background: true };
    /// Shape only, e.g. "a circle".
    pub const BASE: Template = Template { size: false, color: false, shape: true, background: false };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Template {
            size: rng.random_bool(0.5),
            color: rng.random_bool(0.5),
            shape: rng.random_bool(0.75),
            background: rng.random_bool(0.5),
        }
    }
}

/// Template-filled caption: `a [size] [color] <shape|"shape"> [on <bg> background]`.
pub fn caption_with(spec: &SceneSpec, template: Template) -> Vec<&'static str> {
    let mut out = alloc::vec!["a"];
    if template.size {
        out.push(spec.size.token());
    }
    if template.color {
        out.push(spec.color.token());
    }
    out.push(if template.shape { spec.shape.token() } else { "shape" });
    if template.background {
        out.extend_from_slice(&["on", spec.background.token(), "background"]);
    }
    out
}

/// The full caption, e.g. "a large red circle on dark background".
pub fn caption(spec: &SceneSpec) -> Vec<&'static str> {
    caption_with(spec, Template::FULL)
}

/// The caption with the colour token omitted.
pub fn base_caption(spec: &SceneSpec) -> Vec<&'static str> {
    caption_with(spec, Template { color: false, ..Template::FULL })
}

/// Attributes recovered from a caption; `None` where the caption is silent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParsedCaption {
    pub shape: Option<ShapeClass>,
    pub color: Option<FillColor>,
    pub size: Option<Size>,
    pub background: Option<Background>,
}

pub fn parse_caption(tokens: &[&str]) -> Result<ParsedCaption> {
    let mut out = ParsedCaption::default();
    for &t in tokens {
        if token_id(t).is_none() {
            return Err(Error::Input(format!("token {t:?} is not in the vocabulary")));
        }
        if let Some(s) = ShapeClass::from_token(t) {
            out.shape = Some(s);
        } else if let Some(c) = FillColor::from_token(t) {
            out.color = Some(c);
        } else if let Some(s) = Size::from_token(t) {
            out.size = Some(s);
        } else if let Some(b) = Background::from_token(t) {
            out.background = Some(b);
        }
    }
    Ok(out)
}

pub fn join_tokens(tokens: &[&str]) -> String {
    tokens.join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedSample {
    pub image: Image,
    pub caption: Vec<&'static str>,
    pub labels: SceneSpec,
}

impl CaptionedSample {
    pub fn from_spec(spec: SceneSpec) -> Self {
        CaptionedSample { image: render(&spec), caption: caption(&spec), labels: spec }
    }
}

/// `n` samples with uniformly drawn attributes. Sample `i` depends only on
/// `(seed, i)`, so generation order never changes the result.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Vec<CaptionedSample>> {
    if n == 0 {
        return Err(Error::Input(String::from("dataset size must be at least 1")));
    }
    Ok((0..n).map(|i| sample_at(seed, i)).collect())
}

pub fn sample_at(seed: u64, index: usize) -> CaptionedSample {
    let mut rng = derive(seed, index as u64);
    CaptionedSample::from_spec(SceneSpec::sample(&mut rng))
}
