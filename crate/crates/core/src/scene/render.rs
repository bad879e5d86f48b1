//! Single-object scenes and their rasterization.

use std::io::BufWriter;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Color, Shape, NEUTRAL_FILL};
use super::SceneError;
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
    /// Targets of `shape` take `color` with probability `rate`, otherwise a
    /// uniformly drawn other color.
    Typicality { shape: Shape, color: Color, rate: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Salience {
    High,
    /// Shapes are drawn in a neutral fill; a single pixel carries the color.
    Low,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub distribution: Distribution,
    pub salience: Salience,
    pub image_side: usize,
    /// Inclusive range of the bounding-box side in pixels.
    pub size_range: (u32, u32),
    pub seed: u64,
}

impl EnvironmentConfig {
    pub fn uniform(seed: u64) -> Self {
        Self {
            distribution: Distribution::Uniform,
            salience: Salience::High,
            image_side: 64,
            size_range: (16, 40),
            seed,
        }
    }

    pub fn typicality(seed: u64) -> Self {
        Self {
            distribution: Distribution::Typicality {
                shape: Shape::Circle,
                color: Color::Red,
                rate: 0.9,
            },
            ..Self::uniform(seed)
        }
    }

    pub fn low_salience(seed: u64) -> Self {
        Self {
            salience: Salience::Low,
            ..Self::uniform(seed)
        }
    }

    /// Named regimes: `uniform`, `typicality`, `low-salience`.
    pub fn named(name: &str, seed: u64) -> Result<Self, SceneError> {
        match name {
            "uniform" => Ok(Self::uniform(seed)),
            "typicality" => Ok(Self::typicality(seed)),
            "low-salience" => Ok(Self::low_salience(seed)),
            other => Err(SceneError::Config(format!("unknown environment `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if let Distribution::Typicality { rate, .. } = self.distribution {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(SceneError::Config(format!("typicality rate {rate} outside (0, 1)")));
            }
        }
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi || hi as usize > self.image_side {
            return Err(SceneError::Config(format!(
                "size range {lo}..={hi} does not fit a {}px frame",
                self.image_side
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub color: Color,
    pub shape: Shape,
    /// Bounding-box width in pixels (also the height, except for ellipses).
    pub size: u32,
    /// Width / height; 1 for everything but ellipses.
    pub aspect: f64,
    pub center: (f64, f64),
    pub salience_pixel: Option<(u32, u32)>,
}

impl SceneSpec {
    fn half_extents(&self) -> (f64, f64) {
        let w = self.size as f64 / 2.0;
        (w, w / self.aspect)
    }

    /// Whether the pixel with integer coordinates `(px, py)` is filled; the
    /// pixel center is tested against the exact shape.
    pub fn covers(&self, px: u32, py: u32) -> bool {
        let (x, y) = (px as f64 + 0.5 - self.center.0, py as f64 + 0.5 - self.center.1);
        let (a, b) = self.half_extents();
        match self.shape {
            Shape::Square => x.abs() <= a && y.abs() <= b,
            Shape::Circle | Shape::Ellipse => (x / a).powi(2) + (y / b).powi(2) <= 1.0,
            // Apex at top center, base along the bottom edge.
            Shape::Triangle => y <= b && x.abs() <= (y + b) / 2.0 * (a / b),
        }
    }

    /// Filled pixels in row-major order.
    pub fn mask(&self, side: usize) -> Vec<(u32, u32)> {
        let (a, b) = self.half_extents();
        let y0 = (self.center.1 - b).floor().max(0.0) as u32;
        let y1 = ((self.center.1 + b).ceil() as u32).min(side as u32);
        let x0 = (self.center.0 - a).floor().max(0.0) as u32;
        let x1 = ((self.center.0 + a).ceil() as u32).min(side as u32);
        let mut out = Vec::new();
        for py in y0..y1 {
            for px in x0..x1 {
                if self.covers(px, py) {
                    out.push((px, py));
                }
            }
        }
        out
    }

    fn fits(&self, side: usize) -> bool {
        let (a, b) = self.half_extents();
        let s = side as f64;
        self.center.0 - a >= 0.0 && self.center.0 + a <= s && self.center.1 - b >= 0.0 && self.center.1 + b <= s
    }
}

/// Allowed colors and shapes for [`sample_scene`]; `None` means any.
#[derive(Clone, Debug, Default)]
pub struct SceneConstraint {
    pub colors: Option<Vec<Color>>,
    pub shapes: Option<Vec<Shape>>,
}

impl SceneConstraint {
    pub fn fixed(color: Color, shape: Shape) -> Self {
        Self {
            colors: Some(vec![color]),
            shapes: Some(vec![shape]),
        }
    }
}

/// Draws one scene: color and shape uniform over the allowed sets, size
/// uniform in the configured range, position uniform subject to containment.
pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    env: &EnvironmentConfig,
    constraint: &SceneConstraint,
) -> Result<SceneSpec, SceneError> {
    let colors = constraint.colors.as_deref().unwrap_or(&Color::ALL);
    let shapes = constraint.shapes.as_deref().unwrap_or(&Shape::ALL);
    let color = *colors
        .choose(rng)
        .ok_or_else(|| SceneError::Unsatisfiable("no admissible color".into()))?;
    let shape = *shapes
        .choose(rng)
        .ok_or_else(|| SceneError::Unsatisfiable("no admissible shape".into()))?;
    place(rng, env, color, shape)
}

pub(crate) fn place<R: Rng + ?Sized>(
    rng: &mut R,
    env: &EnvironmentConfig,
    color: Color,
    shape: Shape,
) -> Result<SceneSpec, SceneError> {
    env.validate()?;
    let side = env.image_side;
    let size = rng.random_range(env.size_range.0..=env.size_range.1);
    let aspect = if shape == Shape::Ellipse {
        rng.random_range(1.5..=2.5)
    } else {
        1.0
    };
    let w = size as f64;
    let h = w / aspect;
    let x0 = rng.random_range(0..=(side - size as usize)) as f64;
    let y0 = rng.random_range(0..=((side as f64 - h).floor() as usize)) as f64;
    let mut spec = SceneSpec {
        color,
        shape,
        size,
        aspect,
        center: (x0 + w / 2.0, y0 + h / 2.0),
        salience_pixel: None,
    };
    debug_assert!(spec.fits(side));
    if env.salience == Salience::Low {
        let mask = spec.mask(side);
        let px = *mask
            .choose(rng)
            .ok_or_else(|| SceneError::Unsatisfiable("shape covers no pixel".into()))?;
        spec.salience_pixel = Some(px);
    }
    Ok(spec)
}

/// Row-major 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub side: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn blank(side: usize) -> Self {
        Self {
            side,
            pixels: vec![0; side * side * 3],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.side + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.side + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn rgb_pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.pixels.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Planar `[3, S, S]` floats in `[0, 1]`, the encoder's batch layout.
    pub fn write_chw(&self, out: &mut [f64]) {
        let hw = self.side * self.side;
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c] as f64 / 255.0;
            }
        }
    }

    /// Interleaved `[S, S, 3]` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new(&[self.side, self.side, 3], data).expect("image buffer matches its side")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, SceneError> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut buf), self.side as u32, self.side as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| SceneError::Png(e.to_string()))?;
            w.write_image_data(&self.pixels).map_err(|e| SceneError::Png(e.to_string()))?;
        }
        Ok(buf)
    }

    pub fn read_png(path: &Path) -> Result<Self, SceneError> {
        let file = std::fs::File::open(path).map_err(|e| SceneError::io(path, e))?;
        let dec = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = dec
            .read_info()
            .map_err(|e| SceneError::Png(format!("{}: {e}", path.display())))?;
        let info = reader.info();
        let (w, h) = (info.width as usize, info.height as usize);
        if w != h || info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(SceneError::Png(format!("{}: expected square 8-bit RGB", path.display())));
        }
        let mut pixels = vec![0; reader.output_buffer_size().unwrap_or(w * h * 3)];
        let frame = reader
            .next_frame(&mut pixels)
            .map_err(|e| SceneError::Png(format!("{}: {e}", path.display())))?;
        pixels.truncate(frame.buffer_size());
        Ok(Self { side: w, pixels })
    }
}

/// Rasterizes a scene on a black background without antialiasing.
pub fn render(spec: &SceneSpec, env: &EnvironmentConfig) -> Image {
    let mut img = Image::blank(env.image_side);
    let fill = match env.salience {
        Salience::High => spec.color.rgb(),
        Salience::Low => NEUTRAL_FILL,
    };
    for (x, y) in spec.mask(env.image_side) {
        img.set(x, y, fill);
    }
    if env.salience == Salience::Low {
        if let Some((x, y)) = spec.salience_pixel {
            img.set(x, y, spec.color.rgb());
        }
    }
    img
}
