use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{DepthMap, ImageF};
use crate::sample::BBox;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the pixel centre `(px, py)` falls inside a shape of `size`
    /// centred at `(cx, cy)`.
    fn covers(self, cx: f32, cy: f32, size: f32, px: f32, py: f32) -> bool {
        let half = size / 2.0;
        let (dx, dy) = (px - cx, py - cy);
        match self {
            ShapeClass::Square => dx.abs() < half && dy.abs() < half,
            ShapeClass::Circle => dx * dx + dy * dy < half * half,
            // apex up, base on the bottom edge of the bounding square
            ShapeClass::Triangle => dy.abs() < half && dx.abs() < (dy + half) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: ShapeClass,
    pub center: (f32, f32),
    pub size: f32,
    pub color: [f32; 3],
    pub depth: f32,
}

/// Vertical colour gradient plus the far/near ends of the depth ramp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub top: [f32; 3],
    pub bottom: [f32; 3],
    pub depth_far: f32,
    pub depth_near: f32,
}

impl Background {
    pub fn depth_at(&self, y: f32, height: usize) -> f32 {
        let f = y / height as f32;
        self.depth_far + (self.depth_near - self.depth_far) * f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f32,
    pub max_size: f32,
    pub depth_far: f32,
    pub depth_near: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 128,
            height: 128,
            min_objects: 3,
            max_objects: 8,
            min_size: 20.0,
            max_size: 44.0,
            depth_far: 5.0,
            depth_near: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidArgument(m));
        if self.width == 0 || self.height == 0 {
            return bad("canvas must be non-empty".into());
        }
        if self.min_objects > self.max_objects {
            return bad(format!("min_objects {} > max_objects {}", self.min_objects, self.max_objects));
        }
        if !(self.min_size >= 1.0 && self.min_size <= self.max_size) {
            return bad(format!("object size range [{}, {}] is invalid", self.min_size, self.max_size));
        }
        if self.max_size > self.width.min(self.height) as f32 {
            return bad(format!("max_size {} does not fit the canvas", self.max_size));
        }
        if !(self.depth_far >= 0.0 && self.depth_near >= 0.0) {
            return bad("depths must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    width: usize,
    height: usize,
    objects: Vec<SceneObject>,
    background: Background,
    seed: u64,
}

impl SceneSpec {
    pub fn new(
        config: &SceneConfig,
        objects: Vec<SceneObject>,
        background: Background,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let (w, h) = (config.width as f32, config.height as f32);
        if objects.len() > config.max_objects {
            return Err(CoreError::InvalidArgument(format!(
                "{} objects exceed the maximum of {}",
                objects.len(),
                config.max_objects
            )));
        }
        for (i, o) in objects.iter().enumerate() {
            let half = o.size / 2.0;
            if !(o.size >= config.min_size && o.size <= config.max_size) {
                return Err(CoreError::InvalidArgument(format!("object {i} size {} out of range", o.size)));
            }
            let (cx, cy) = o.center;
            if !(cx - half >= 0.0 && cy - half >= 0.0 && cx + half <= w && cy + half <= h) {
                return Err(CoreError::InvalidArgument(format!("object {i} leaves the canvas")));
            }
            if !(o.depth.is_finite() && o.depth >= 0.0) || o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(CoreError::InvalidArgument(format!("object {i} has invalid depth or colour")));
            }
        }
        Ok(SceneSpec {
            width: config.width,
            height: config.height,
            objects,
            background,
            seed,
        })
    }

    /// Draws a random non-overlapping layout.
    pub fn random(config: &SceneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background = Background {
            top: muted_color(&mut rng),
            bottom: muted_color(&mut rng),
            depth_far: config.depth_far,
            depth_near: config.depth_near,
        };
        let n = rng.random_range(config.min_objects..=config.max_objects);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for _ in 0..n {
            for _attempt in 0..100 {
                let size = rng.random_range(config.min_size..=config.max_size).round();
                let half = size / 2.0;
                let cx = rng.random_range(half..=config.width as f32 - half);
                let cy = rng.random_range(half..=config.height as f32 - half);
                let clash = objects.iter().any(|o| {
                    let gap = (o.size + size) / 2.0 + 2.0;
                    (o.center.0 - cx).abs() < gap && (o.center.1 - cy).abs() < gap
                });
                if clash {
                    continue;
                }
                let class = ShapeClass::ALL[rng.random_range(0..NUM_CLASSES)];
                let depth = background.depth_at(cy, config.height) * rng.random_range(0.85..=1.0f32);
                objects.push(SceneObject {
                    class,
                    center: (cx, cy),
                    size,
                    color: vivid_color(&mut rng),
                    depth,
                });
                break;
            }
        }
        Self::new(config, objects, background, seed)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn background(&self) -> &Background {
        &self.background
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// One strong channel, one free, one near zero, so clean scenes keep a low
/// dark channel.
fn vivid_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let mut c = [
        rng.random_range(0.65..=1.0f32),
        rng.random_range(0.0..=1.0f32),
        rng.random_range(0.0..=0.15f32),
    ];
    c.shuffle(rng);
    c
}

fn muted_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let mut c = [
        rng.random_range(0.3..=0.55f32),
        rng.random_range(0.15..=0.4f32),
        rng.random_range(0.0..=0.12f32),
    ];
    c.shuffle(rng);
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub image: ImageF,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub depth: DepthMap,
}

pub fn render_scene(spec: &SceneSpec) -> RenderedScene {
    let (w, h) = (spec.width, spec.height);
    let bg = &spec.background;
    let mut pixels = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    for y in 0..h {
        let f = (y as f32 + 0.5) / h as f32;
        let rgb: [f32; 3] = std::array::from_fn(|c| bg.top[c] + (bg.bottom[c] - bg.top[c]) * f);
        let d = bg.depth_at(y as f32 + 0.5, h);
        for _ in 0..w {
            pixels.extend_from_slice(&rgb);
            depth.push(d);
        }
    }
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    for o in &spec.objects {
        let half = o.size / 2.0;
        let (cx, cy) = o.center;
        let x0 = (cx - half).floor().max(0.0) as usize;
        let y0 = (cy - half).floor().max(0.0) as usize;
        let x1 = ((cx + half).ceil() as usize).min(w);
        let y1 = ((cy + half).ceil() as usize).min(h);
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in y0..y1 {
            for x in x0..x1 {
                if o.class.covers(cx, cy, o.size, x as f32 + 0.5, y as f32 + 0.5) {
                    let i = y * w + x;
                    pixels[3 * i..3 * i + 3].copy_from_slice(&o.color);
                    depth[i] = o.depth;
                    bounds = Some(match bounds {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        if let Some((a, b, c, d)) = bounds {
            boxes.push(BBox::new(a as f32, b as f32, (c + 1) as f32, (d + 1) as f32));
            labels.push(o.class.index());
        }
    }
    RenderedScene {
        image: ImageF::new(h, w, pixels).expect("dims are consistent"),
        boxes,
        labels,
        depth: DepthMap::new(h, w, depth).expect("depths are non-negative"),
    }
}
