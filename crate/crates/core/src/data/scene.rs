use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::RgbImage;

pub const MIN_SIDE: usize = 32;
pub const MAX_SIDE: usize = 256;

/// Object classes; each has a fixed shape and canonical color.
pub const NOUNS: [&str; 16] = [
    "apple", "ball", "bird", "boat", "book", "car", "cat", "clock", "cup", "dog", "fish", "flower", "hat",
    "house", "orange", "tree",
];

/// Named colors available to recolor edits.
pub const COLOR_NAMES: [(&str, [f64; 3]); 8] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.72, 0.20]),
    ("blue", [0.15, 0.30, 0.92]),
    ("yellow", [0.95, 0.88, 0.10]),
    ("purple", [0.58, 0.18, 0.80]),
    ("pink", [1.00, 0.50, 0.75]),
    ("white", [0.97, 0.97, 0.97]),
    ("black", [0.05, 0.05, 0.05]),
];

/// Standard deviation of the sensor noise laid over every source image.
pub const SOURCE_NOISE: f64 = 0.02;

/// Authentic objects carry a darker rim of this relative brightness.
pub const OUTLINE_SHADE: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Circle,
    Triangle,
}

/// Pixel box with exclusive upper corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    /// True when the boxes, each grown by `margin`, intersect.
    pub fn overlaps(&self, other: &BBox, margin: usize) -> bool {
        self.x0 < other.x1 + margin
            && other.x0 < self.x1 + margin
            && self.y0 < other.y1 + margin
            && other.y0 < self.y1 + margin
    }
}

pub fn class_index(name: &str) -> Option<usize> {
    NOUNS.iter().position(|&n| n == name)
}

pub fn class_shape(class: usize) -> Shape {
    match class % 3 {
        0 => Shape::Rect,
        1 => Shape::Circle,
        _ => Shape::Triangle,
    }
}

/// Canonical color of a class: evenly spaced hues.
pub fn class_color(class: usize) -> [f64; 3] {
    let h = (class as f64 * 7.0 / 16.0).fract() * 6.0;
    let (s, v) = (0.75, 0.85);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub class: String,
    pub color: [f64; 3],
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub texture: u8,
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub frequency: f64,
    pub phase: f64,
}

impl Background {
    pub fn at(&self, y: usize, x: usize, height: usize, width: usize) -> [f64; 3] {
        let fy = y as f64 / height as f64;
        let fx = x as f64 / width as f64;
        let t = match self.texture {
            0 => fy,
            1 => 0.5 + 0.5 * (self.frequency * fy * std::f64::consts::TAU + self.phase).sin(),
            2 => 0.5 + 0.5 * (self.frequency * (fx + fy) * std::f64::consts::PI + self.phase).sin(),
            _ => {
                let d = ((fx - 0.5).powi(2) + (fy - 0.5).powi(2)).sqrt();
                (1.0 - 1.6 * d).clamp(0.0, 1.0)
            }
        };
        std::array::from_fn(|c| self.base[c] * (1.0 - t) + self.accent[c] * t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
    pub background: Background,
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn check_size(height: usize, width: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(invalid!("image size {height}x{width} is below {MIN_SIDE}x{MIN_SIDE}"));
    }
    if height > MAX_SIDE || width > MAX_SIDE {
        return Err(invalid!("image size {height}x{width} exceeds {MAX_SIDE}x{MAX_SIDE}"));
    }
    Ok(())
}

/// Object side lengths scale with the image: 19–38% of the shorter side.
pub(crate) fn object_side_range(height: usize, width: usize) -> (usize, usize) {
    let s = height.min(width) as f64;
    ((0.19 * s).round() as usize, (0.38 * s).round() as usize)
}

/// Finds a free box of the given size that keeps `margin` pixels from `taken`.
pub(crate) fn place_box(
    rng: &mut impl Rng,
    height: usize,
    width: usize,
    bw: usize,
    bh: usize,
    taken: &[BBox],
    margin: usize,
) -> Option<BBox> {
    if bw + 2 > width || bh + 2 > height {
        return None;
    }
    for _ in 0..200 {
        let x0 = rng.random_range(1..=width - bw - 1);
        let y0 = rng.random_range(1..=height - bh - 1);
        let b = BBox {
            x0,
            y0,
            x1: x0 + bw,
            y1: y0 + bh,
        };
        if taken.iter().all(|t| !t.overlaps(&b, margin)) {
            return Some(b);
        }
    }
    None
}

/// Deterministic scene with 2–5 non-overlapping objects of distinct classes.
pub fn generate_scene(seed: u64, height: usize, width: usize) -> Result<SceneSpec> {
    check_size(height, width)?;
    let mut rng = rng_for(seed, 0);
    let texture = rng.random_range(0..4u8);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.30..0.70));
    let accent: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.30..0.70));
    let background = Background {
        texture,
        base,
        accent,
        frequency: rng.random_range(1.0..3.0),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    };

    let want = rng.random_range(2..=5usize);
    let mut classes: Vec<usize> = (0..NOUNS.len()).collect();
    let (lo, hi) = object_side_range(height, width);
    let mut objects = Vec::with_capacity(want);
    let mut boxes = Vec::with_capacity(want);
    while objects.len() < want && !classes.is_empty() {
        let k = rng.random_range(0..classes.len());
        let class = classes.swap_remove(k);
        let bw = rng.random_range(lo..=hi);
        let bh = rng.random_range(lo..=hi);
        match place_box(&mut rng, height, width, bw, bh, &boxes, 2) {
            Some(bbox) => {
                boxes.push(bbox);
                objects.push(SceneObject {
                    shape: class_shape(class),
                    class: NOUNS[class].to_string(),
                    color: class_color(class),
                    bbox,
                });
            }
            None if objects.len() >= 2 => break,
            None => {}
        }
    }
    Ok(SceneSpec {
        seed,
        height,
        width,
        objects,
        background,
    })
}

pub(crate) fn inside(shape: Shape, b: &BBox, px: f64, py: f64) -> bool {
    let (x0, y0, x1, y1) = (b.x0 as f64, b.y0 as f64, b.x1 as f64, b.y1 as f64);
    match shape {
        Shape::Rect => px >= x0 && px < x1 && py >= y0 && py < y1,
        Shape::Circle => {
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            let (rx, ry) = ((x1 - x0) / 2.0, (y1 - y0) / 2.0);
            ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0
        }
        Shape::Triangle => {
            if py < y0 || py >= y1 {
                return false;
            }
            let cx = (x0 + x1) / 2.0;
            let half = (py - y0) / (y1 - y0) * (x1 - x0) / 2.0;
            (px - cx).abs() <= half
        }
    }
}

/// Fraction of a pixel covered by the shape (4×4 supersampling).
pub(crate) fn coverage(shape: Shape, b: &BBox, y: usize, x: usize) -> f64 {
    let mut hits = 0;
    for j in 0..4 {
        for i in 0..4 {
            let px = x as f64 + (i as f64 + 0.5) / 4.0;
            let py = y as f64 + (j as f64 + 0.5) / 4.0;
            hits += inside(shape, b, px, py) as usize;
        }
    }
    hits as f64 / 16.0
}

/// Whether the pixel center lies inside the shape.
pub(crate) fn hard_inside(shape: Shape, b: &BBox, y: usize, x: usize) -> bool {
    inside(shape, b, x as f64 + 0.5, y as f64 + 0.5)
}

/// Outside pixels or inside pixels with an outside 8-neighbour.
fn on_rim(shape: Shape, b: &BBox, y: usize, x: usize, height: usize, width: usize) -> bool {
    if !hard_inside(shape, b, y, x) {
        return true;
    }
    (y.saturating_sub(1)..(y + 2).min(height))
        .any(|yy| (x.saturating_sub(1)..(x + 2).min(width)).any(|xx| !hard_inside(shape, b, yy, xx)))
}

/// Background alone, noise-free.
pub(crate) fn render_background(scene: &SceneSpec) -> RgbImage {
    let mut img = RgbImage::zeros(scene.height, scene.width);
    for y in 0..scene.height {
        for x in 0..scene.width {
            let c = scene.background.at(y, x, scene.height, scene.width);
            for (k, v) in c.iter().enumerate() {
                img.0[[y, x, k]] = *v;
            }
        }
    }
    img
}

/// Anti-aliased objects over the background, sensor noise, 8-bit quantized.
pub fn render_scene(scene: &SceneSpec) -> RgbImage {
    let mut img = render_background(scene);
    for obj in &scene.objects {
        let b = obj.bbox;
        let outline = obj.color.map(|c| c * OUTLINE_SHADE);
        for y in b.y0.saturating_sub(1)..(b.y1 + 1).min(scene.height) {
            for x in b.x0.saturating_sub(1)..(b.x1 + 1).min(scene.width) {
                let a = coverage(obj.shape, &b, y, x);
                if a > 0.0 {
                    let ink = if on_rim(obj.shape, &b, y, x, scene.height, scene.width) {
                        outline
                    } else {
                        obj.color
                    };
                    for k in 0..3 {
                        let v = &mut img.0[[y, x, k]];
                        *v = *v * (1.0 - a) + ink[k] * a;
                    }
                }
            }
        }
    }
    let mut rng = rng_for(scene.seed, 1);
    let noise = Normal::new(0.0, SOURCE_NOISE).expect("valid sigma");
    img.0.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    img.quantize();
    img
}
