//! Procedural scene renderer behind the mock backend.
//!
//! A scene is a smooth low-saturation textured background plus one flat
//! colored convex shape per category. Category colors sit on a sphere of
//! radius [`SHAPE_RADIUS`] around mid-gray, far from every background color,
//! so masks and boxes can be recovered exactly from pixels and are also known
//! analytically from the scene plan.

use std::f64::consts::{PI, TAU};

use image::Rgb;
use rand::Rng;

use super::{DetectionBox, MaskGrid};
use crate::image_io::RgbImage;
use crate::seed;
use crate::types::CategoryId;

/// Distance of category colors from mid-gray, in unit RGB.
pub const SHAPE_RADIUS: f64 = 0.42;
/// Per-shape brightness multiplier range applied along the category direction.
pub const SHADE_RANGE: (f64, f64) = (0.92, 1.0);
/// Background colors never stray further than this from mid-gray.
pub const BACKGROUND_MAX_RADIUS: f64 = 0.14;
/// Pixels closer to gray than this are background for the pixel classifier.
pub const CLASSIFY_MIN_RADIUS: f64 = 0.28;
/// Per-shape area as a fraction of the image.
pub const AREA_FRACTION: (f64, f64) = (0.07, 0.22);

const BACKGROUND_STREAM: u64 = 0xb4c6;
const PLACEMENT_TRIES: usize = 24;

fn centered(px: &Rgb<u8>) -> [f64; 3] {
    [
        f64::from(px[0]) / 255.0 - 0.5,
        f64::from(px[1]) / 255.0 - 0.5,
        f64::from(px[2]) / 255.0 - 0.5,
    ]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// One unit direction per category on a Fibonacci sphere.
#[derive(Debug, Clone)]
pub struct Palette {
    directions: Vec<[f64; 3]>,
    cos_tolerance: f64,
}

impl Palette {
    pub fn new(n: usize) -> Self {
        let golden = PI * (3.0 - 5f64.sqrt());
        let directions: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64 + 0.4;
                [r * phi.cos(), r * phi.sin(), z]
            })
            .collect();
        let mut min_angle: f64 = 0.2;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = &directions;
                let dot = d[i][0] * d[j][0] + d[i][1] * d[j][1] + d[i][2] * d[j][2];
                min_angle = min_angle.min(dot.clamp(-1.0, 1.0).acos());
            }
        }
        Palette { directions, cos_tolerance: (min_angle / 2.0).cos() }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn color(&self, id: CategoryId, shade: f64) -> [u8; 3] {
        let d = self.directions[id.index()];
        let q = |c: f64| ((0.5 + shade * SHAPE_RADIUS * c) * 255.0).round().clamp(0.0, 255.0) as u8;
        [q(d[0]), q(d[1]), q(d[2])]
    }

    /// True when the pixel carries category `id`'s color.
    pub fn matches(&self, px: &Rgb<u8>, id: CategoryId) -> bool {
        let v = centered(px);
        let r = norm(v);
        if r < CLASSIFY_MIN_RADIUS {
            return false;
        }
        let d = self.directions[id.index()];
        (v[0] * d[0] + v[1] * d[1] + v[2] * d[2]) / r > self.cos_tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Rect,
    Triangle,
    Diamond,
    Ellipse,
    Hexagon,
}

impl ShapeKind {
    pub fn for_category(id: CategoryId) -> Self {
        match id.0 % 6 {
            0 => ShapeKind::Disc,
            1 => ShapeKind::Rect,
            2 => ShapeKind::Triangle,
            3 => ShapeKind::Diamond,
            4 => ShapeKind::Ellipse,
            _ => ShapeKind::Hexagon,
        }
    }
}

/// A convex shape with half extents `a` (x) and `b` (y) around its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
}

impl Shape {
    /// Shape of the given kind with the given area and aspect ratio (x/y).
    pub fn sized(kind: ShapeKind, area: f64, aspect: f64) -> Self {
        let (a, b) = match kind {
            ShapeKind::Disc => {
                let r = (area / PI).sqrt();
                (r, r)
            }
            ShapeKind::Rect => ((area * aspect).sqrt() / 2.0, (area / aspect).sqrt() / 2.0),
            ShapeKind::Ellipse => ((area * aspect / PI).sqrt(), (area / (aspect * PI)).sqrt()),
            ShapeKind::Diamond | ShapeKind::Triangle => ((area * aspect / 2.0).sqrt(), (area / (2.0 * aspect)).sqrt()),
            ShapeKind::Hexagon => {
                let s = (2.0 * area / (3.0 * 3f64.sqrt())).sqrt();
                (s, s * 3f64.sqrt() / 2.0)
            }
        };
        Shape { kind, cx: 0.0, cy: 0.0, a, b }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (a, b) = (self.a, self.b);
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= a * a,
            ShapeKind::Rect => dx.abs() <= a && dy.abs() <= b,
            ShapeKind::Ellipse => (dx / a).powi(2) + (dy / b).powi(2) <= 1.0,
            ShapeKind::Diamond => dx.abs() / a + dy.abs() / b <= 1.0,
            ShapeKind::Triangle => dy >= -b && dy <= b && dx.abs() <= a * (dy + b) / (2.0 * b),
            ShapeKind::Hexagon => {
                let r3 = 3f64.sqrt();
                dy.abs() <= b && r3 * dx.abs() + dy.abs() <= r3 * a
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.a, self.cy - self.b, self.cx + self.a, self.cy + self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedShape {
    pub category: CategoryId,
    pub shape: Shape,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    base: [f64; 3],
    waves: [[Wave; 2]; 3],
}

impl Background {
    pub fn from_seed(seed: u64, width: u32, height: u32) -> Self {
        let mut rng = seed::rng(seed::derive(seed, BACKGROUND_STREAM));
        let base = [0; 3].map(|_| rng.random_range(-0.035..0.035));
        let mut wave = |amp: f64| Wave {
            fx: TAU * rng.random_range(0.5..4.0) / f64::from(width.max(1)),
            fy: TAU * rng.random_range(0.5..4.0) / f64::from(height.max(1)),
            phase: rng.random_range(0.0..TAU),
            amp,
        };
        let waves = [0; 3].map(|_| [wave(0.03), wave(0.015)]);
        Background { base, waves }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let (xf, yf) = (f64::from(x), f64::from(y));
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let tex: f64 = self.waves[ch]
                .iter()
                .map(|w| w.amp * (w.fx * xf + w.fy * yf + w.phase).sin())
                .sum();
            out[ch] = ((0.5 + self.base[ch] + tex) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

/// Everything needed to render a scene deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlan {
    pub width: u32,
    pub height: u32,
    pub background: Background,
    /// Drawn in order; later shapes occlude earlier ones.
    pub shapes: Vec<PlacedShape>,
}

fn overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let w = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let h = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    w * h
}

/// Plans a scene with one shape per category (drawn in ascending id order).
/// Shape geometry and color depend only on `(seed, category, earlier shapes)`,
/// the background only on `seed`.
pub fn plan_scene(palette: &Palette, categories: &[CategoryId], seed: u64, width: u32, height: u32) -> ScenePlan {
    let mut ids = categories.to_vec();
    ids.sort();
    ids.dedup();
    let (w, h) = (f64::from(width), f64::from(height));
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(ids.len());
    for id in ids {
        let mut rng = seed::rng(seed::derive(seed, 0x5eed_0000 + u64::from(id.0)));
        let kind = ShapeKind::for_category(id);
        let fraction = rng.random_range(AREA_FRACTION.0..AREA_FRACTION.1);
        let aspect = rng.random_range(0.7..1.4);
        let shade = rng.random_range(SHADE_RANGE.0..SHADE_RANGE.1);
        let mut shape = Shape::sized(kind, fraction * w * h, aspect);
        // keep a one pixel margin inside the frame
        let fit = ((w / 2.0 - 1.0) / shape.a).min((h / 2.0 - 1.0) / shape.b).min(1.0);
        shape.a *= fit;
        shape.b *= fit;
        let mut best: Option<(f64, f64, f64)> = None;
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.random_range((shape.a + 1.0)..=(w - shape.a - 1.0).max(shape.a + 1.0));
            let cy = rng.random_range((shape.b + 1.0)..=(h - shape.b - 1.0).max(shape.b + 1.0));
            let cand = (cx - shape.a - 1.0, cy - shape.b - 1.0, cx + shape.a + 1.0, cy + shape.b + 1.0);
            let cost: f64 = shapes.iter().map(|p| overlap(cand, p.shape.bounds())).sum();
            if best.is_none_or(|(c, _, _)| cost < c) {
                best = Some((cost, cx, cy));
            }
            if cost == 0.0 {
                break;
            }
        }
        let (_, cx, cy) = best.expect("at least one placement try");
        shape.cx = cx;
        shape.cy = cy;
        shapes.push(PlacedShape { category: id, shape, color: palette.color(id, shade) });
    }
    ScenePlan { width, height, background: Background::from_seed(seed, width, height), shapes }
}

/// A rendered image plus the visible (post-occlusion) raster of every shape.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub image: RgbImage,
    /// Index into the plan's shapes for every pixel, `None` for background.
    owner: Vec<Option<u16>>,
    categories: Vec<CategoryId>,
}

impl ScenePlan {
    pub fn render(&self) -> RenderedScene {
        let (w, h) = (self.width, self.height);
        let mut owner = vec![None; w as usize * h as usize];
        let image = RgbImage::from_fn(w, h, |x, y| {
            let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            let hit = self.shapes.iter().rposition(|s| s.shape.contains(px, py));
            owner[(y * w + x) as usize] = hit.map(|i| i as u16);
            Rgb(hit.map_or_else(|| self.background.pixel(x, y), |i| self.shapes[i].color))
        });
        RenderedScene { image, owner, categories: self.shapes.iter().map(|s| s.category).collect() }
    }
}

impl RenderedScene {
    pub fn categories(&self) -> &[CategoryId] {
        &self.categories
    }

    /// Visible pixels of a category's shape.
    pub fn truth_mask(&self, id: CategoryId) -> MaskGrid {
        let idx = self.categories.iter().position(|&c| c == id);
        MaskGrid {
            width: self.image.width(),
            height: self.image.height(),
            data: self
                .owner
                .iter()
                .map(|o| u8::from(idx.is_some() && o.map(usize::from) == idx))
                .collect(),
        }
    }

    /// Tight box around the visible pixels, confidence 1.
    pub fn truth_box(&self, id: CategoryId, name: &str) -> Option<DetectionBox> {
        mask_bounds(&self.truth_mask(id), name)
    }

    /// Fraction of pixels covered by any shape.
    pub fn foreground_fraction(&self) -> f64 {
        self.owner.iter().filter(|o| o.is_some()).count() as f64 / self.owner.len().max(1) as f64
    }
}

/// Tight pixel-edge bounds of a mask's foreground.
pub fn mask_bounds(mask: &MaskGrid, name: &str) -> Option<DetectionBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.data[(y * mask.width + x) as usize] != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != u32::MAX).then(|| DetectionBox {
        category: name.to_string(),
        x0: f64::from(x0),
        y0: f64::from(y0),
        x1: f64::from(x1),
        y1: f64::from(y1),
        confidence: 1.0,
    })
}
