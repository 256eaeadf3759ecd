//! Procedural underpass scenes.
//!
//! A scene is a one-point-perspective corridor with an optional figure. The
//! geometry, colours and sensor noise depend only on the seed; the lighting
//! (day or night) is a fixed per-pixel map applied on top, so the day and
//! night renders of one seed are exact twins.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use underpass_tensor::par;

use super::{downscale, ClassLabel, Dataset, Domain, Image, LabeledImage, NUM_CLASSES};

/// Default rendered side length.
pub const SCENE_SIDE: usize = 64;
const SUPERSAMPLE: usize = 2;

const NIGHT_GAIN: f32 = 0.25;
const NIGHT_BLUE: f32 = 0.08;
const DAY_RED: f32 = 0.05;
/// Ceiling lamps visible at night: centre (u, v), radius, rgb intensity.
const GLARE: [((f32, f32), f32, [f32; 3]); 2] = [
    ((0.22, 0.10), 0.045, [0.55, 0.50, 0.35]),
    ((0.78, 0.10), 0.045, [0.55, 0.50, 0.35]),
];

type Rgb = [f32; 3];

struct Scene {
    rng: ChaCha8Rng,
    vp_x: f32,
    horizon: f32,
    exit: Rgb,
    floor: Rgb,
    ceiling: Rgb,
    walls: [Rgb; 2],
    stripe_phase: f32,
}

impl Scene {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tone = |base: f32, spread: f32, rng: &mut ChaCha8Rng| -> Rgb {
            let t = base + rng.gen_range(-spread..spread);
            let tint = rng.gen_range(-0.02..0.02);
            [t + tint, t, t - tint]
        };
        let exit = tone(0.82, 0.06, &mut rng);
        let floor = tone(0.42, 0.05, &mut rng);
        let ceiling = tone(0.30, 0.04, &mut rng);
        let walls = [tone(0.56, 0.05, &mut rng), tone(0.52, 0.05, &mut rng)];
        Self {
            vp_x: 0.5 + rng.gen_range(-0.06..0.06),
            horizon: 0.40 + rng.gen_range(-0.04..0.04),
            exit,
            floor,
            ceiling,
            walls,
            stripe_phase: rng.gen_range(0.0..1.0),
            rng,
        }
    }

    /// Corridor colour at normalized coordinates.
    fn background(&self, u: f32, v: f32) -> Rgb {
        let (xl, xr) = (self.vp_x - 0.11, self.vp_x + 0.11);
        let (yt, yb) = (self.horizon - 0.12, self.horizon + 0.07);
        if (xl..=xr).contains(&u) && (yt..=yb).contains(&v) {
            return self.exit;
        }
        if v > yb {
            let s = (v - yb) / (1.0 - yb);
            let (lo, hi) = (xl * (1.0 - s), xr + (1.0 - xr) * s);
            if (lo..=hi).contains(&u) {
                return self.floor;
            }
        }
        if v < yt {
            let s = (yt - v) / yt;
            let (lo, hi) = (xl * (1.0 - s), xr + (1.0 - xr) * s);
            if (lo..=hi).contains(&u) {
                return self.ceiling;
            }
        }
        let wall = self.walls[usize::from(u > self.vp_x)];
        // Tile courses along the walls.
        let stripe = ((v * 9.0 + self.stripe_phase).fract() < 0.08) as u8 as f32 * -0.06;
        wall.map(|c| c + stripe)
    }
}

enum Shape {
    Ellipse { c: (f32, f32), r: (f32, f32) },
    Ring { c: (f32, f32), r: f32, width: f32 },
    Segment { a: (f32, f32), b: (f32, f32), width: f32 },
}

impl Shape {
    fn contains(&self, u: f32, v: f32) -> bool {
        match *self {
            Shape::Ellipse { c, r } => {
                let (du, dv) = ((u - c.0) / r.0, (v - c.1) / r.1);
                du * du + dv * dv <= 1.0
            }
            Shape::Ring { c, r, width } => {
                let d = ((u - c.0).powi(2) + (v - c.1).powi(2)).sqrt();
                (d - r).abs() <= width / 2.0
            }
            Shape::Segment { a, b, width } => {
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let t = (((u - a.0) * dx + (v - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                let (px, py) = (a.0 + t * dx - u, a.1 + t * dy - v);
                (px * px + py * py).sqrt() <= width / 2.0
            }
        }
    }
}

fn figure(label: ClassLabel, rng: &mut ChaCha8Rng, pixel: f32) -> Vec<(Shape, Rgb)> {
    if label == ClassLabel::Empty {
        return Vec::new();
    }
    let s = rng.gen_range(0.85..1.15f32);
    let foot = rng.gen_range(0.80..0.92f32);
    let cx = rng.gen_range(0.30..0.70f32);
    let dark = |rng: &mut ChaCha8Rng| -> Rgb { [0; 3].map(|_| rng.gen_range(0.04..0.28f32)) };
    let skin_gain = rng.gen_range(0.8..1.0f32);
    let skin = [0.78 * skin_gain, 0.62 * skin_gain, 0.52 * skin_gain];
    let clothes = dark(rng);
    let ellipse = |x: f32, y: f32, rx: f32, ry: f32| Shape::Ellipse { c: (x, y), r: (rx, ry) };
    let mut shapes = Vec::new();
    match label {
        ClassLabel::Pedestrian | ClassLabel::DogWalker => {
            shapes.push((ellipse(cx, foot - 0.19 * s, 0.065 * s, 0.19 * s), clothes));
            shapes.push((ellipse(cx, foot - 0.43 * s, 0.055 * s, 0.055 * s), skin));
            if label == ClassLabel::DogWalker {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let fur_gain = rng.gen_range(0.7..1.1f32);
                let fur = [0.50 * fur_gain, 0.33 * fur_gain, 0.16 * fur_gain];
                let dog = (cx + side * 0.21 * s, foot - 0.05 * s);
                shapes.push((ellipse(dog.0, dog.1, 0.085 * s, 0.042 * s), fur));
                shapes.push((
                    ellipse(dog.0 + side * 0.09 * s, dog.1 - 0.04 * s, 0.032 * s, 0.032 * s),
                    fur,
                ));
                shapes.push((
                    Shape::Segment {
                        a: (cx + side * 0.06 * s, foot - 0.24 * s),
                        b: (dog.0 + side * 0.08 * s, dog.1 - 0.04 * s),
                        width: pixel * 1.5,
                    },
                    [0.08, 0.08, 0.08],
                ));
            }
        }
        ClassLabel::Bicyclist => {
            let wheel_y = foot - 0.085 * s;
            for dx in [-0.14, 0.14] {
                shapes.push((
                    Shape::Ring {
                        c: (cx + dx * s, wheel_y),
                        r: 0.085 * s,
                        width: 0.022 * s,
                    },
                    [0.07, 0.07, 0.07],
                ));
            }
            let frame = dark(rng);
            shapes.push((
                Shape::Segment {
                    a: (cx - 0.14 * s, wheel_y),
                    b: (cx + 0.14 * s, wheel_y),
                    width: 0.02 * s,
                },
                frame,
            ));
            shapes.push((
                Shape::Segment {
                    a: (cx, wheel_y),
                    b: (cx - 0.02 * s, foot - 0.22 * s),
                    width: 0.02 * s,
                },
                frame,
            ));
            shapes.push((ellipse(cx, foot - 0.31 * s, 0.06 * s, 0.12 * s), clothes));
            shapes.push((ellipse(cx + 0.03 * s, foot - 0.48 * s, 0.05 * s, 0.05 * s), skin));
        }
        ClassLabel::Empty => unreachable!(),
    }
    shapes
}

/// Lighting-independent render at `side` x `side`.
fn render_base(label: ClassLabel, seed: u64, side: usize) -> Image {
    let mut scene = Scene::new(seed);
    let hi = side * SUPERSAMPLE;
    let pixel = 1.0 / hi as f32;
    let shapes = figure(label, &mut scene.rng, pixel);
    let mut px = vec![0.0f32; hi * hi * 3];
    for y in 0..hi {
        for x in 0..hi {
            let (u, v) = ((x as f32 + 0.5) * pixel, (y as f32 + 0.5) * pixel);
            let mut rgb = scene.background(u, v);
            // Later shapes are drawn on top.
            if let Some((_, c)) = shapes.iter().rev().find(|(shape, _)| shape.contains(u, v)) {
                rgb = *c;
            }
            px[(y * hi + x) * 3..][..3].copy_from_slice(&rgb.map(|c| c.clamp(0.0, 1.0)));
        }
    }
    let big = Image {
        height: hi,
        width: hi,
        pixels: px,
    };
    let mut out = downscale(&big, side, side).expect("supersampled render is larger");
    // Sensor noise, identical in both lightings.
    for v in &mut out.pixels {
        *v = (*v + scene.rng.gen_range(-0.02..0.02f32)).clamp(0.0, 1.0);
    }
    out
}

fn glare(u: f32, v: f32) -> Rgb {
    let mut rgb = [0.0; 3];
    for ((cu, cv), radius, colour) in GLARE {
        let d2 = (u - cu).powi(2) + (v - cv).powi(2);
        let w = (-d2 / (2.0 * radius * radius)).exp();
        for c in 0..3 {
            rgb[c] += w * colour[c];
        }
    }
    rgb
}

fn apply_lighting(base: &Image, domain: Domain) -> Image {
    let mut out = base.clone();
    let (h, w) = (base.height, base.width);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 3;
            let p = &mut out.pixels[i..i + 3];
            match domain {
                Domain::Night => {
                    let g = glare((x as f32 + 0.5) / w as f32, (y as f32 + 0.5) / h as f32);
                    for c in 0..3 {
                        p[c] *= NIGHT_GAIN;
                        p[c] += g[c];
                    }
                    p[2] += NIGHT_BLUE;
                }
                Domain::Day | Domain::Night2Day => p[0] += DAY_RED,
            }
            for v in p.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Source id shared by the day and night renders of one scene.
pub(crate) fn scene_id(label: ClassLabel, seed: u64) -> String {
    format!("{}_{seed:016x}", label.name())
}

/// Renders one scene at the default size. `Night2Day` renders daylight.
pub fn synth_scene(label: ClassLabel, domain: Domain, seed: u64) -> LabeledImage {
    synth_scene_sized(label, domain, seed, SCENE_SIDE)
}

pub fn synth_scene_sized(label: ClassLabel, domain: Domain, seed: u64, side: usize) -> LabeledImage {
    let base = render_base(label, seed, side.max(1));
    LabeledImage {
        image: apply_lighting(&base, domain),
        label,
        domain,
        source_id: scene_id(label, seed),
    }
}

/// Recovers the scene seed from a source id produced by this module.
pub fn seed_of(source_id: &str) -> Option<u64> {
    let (_, hex) = source_id.rsplit_once('_')?;
    u64::from_str_radix(hex, 16).ok()
}

/// Images per class for each lighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusCounts {
    pub day: [usize; NUM_CLASSES],
    pub night: [usize; NUM_CLASSES],
}

impl Default for CorpusCounts {
    fn default() -> Self {
        Self {
            day: [904, 904, 180, 253],
            night: [106, 106, 0, 60],
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene seed of image `index` of a class in one lighting stream. Day and
/// night draw from separate streams, so the two pools never share a scene.
fn scene_seed(corpus_seed: u64, domain: Domain, class: usize, index: usize) -> u64 {
    let stream = match domain {
        Domain::Day => 0x0D,
        _ => 0x4E,
    };
    mix(mix(mix(corpus_seed ^ stream) ^ class as u64) ^ index as u64)
}

/// Renders the full corpus at `side` x `side`, day images first.
pub fn build_corpus(counts: &CorpusCounts, seed: u64, side: usize) -> Dataset {
    let mut jobs = Vec::new();
    for (domain, per_class) in [(Domain::Day, counts.day), (Domain::Night, counts.night)] {
        for (class, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                jobs.push((domain, ClassLabel::ALL[class], scene_seed(seed, domain, class, i)));
            }
        }
    }
    let items = par::map_indexed(jobs.len(), |j| {
        let (domain, label, s) = jobs[j];
        synth_scene_sized(label, domain, s, side)
    });
    Dataset::new(items)
}
