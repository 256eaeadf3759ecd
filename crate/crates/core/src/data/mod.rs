//! Labeled images, stratified splitting and subsetting, resampling, and the
//! synthetic underpass corpus.

mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use io::{load_corpus, load_png, read_manifest, save_corpus, save_png, write_manifest, ManifestRow, MANIFEST};
pub use synth::{build_corpus, seed_of, synth_scene, synth_scene_sized, CorpusCounts, SCENE_SIDE};

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Empty,
    Pedestrian,
    DogWalker,
    Bicyclist,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Empty,
        ClassLabel::Pedestrian,
        ClassLabel::DogWalker,
        ClassLabel::Bicyclist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Empty => "empty",
            ClassLabel::Pedestrian => "pedestrian",
            ClassLabel::DogWalker => "dog_walker",
            ClassLabel::Bicyclist => "bicyclist",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Day,
    Night,
    Night2Day,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Day, Domain::Night, Domain::Night2Day];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Day => "day",
            Domain::Night => "night",
            Domain::Night2Day => "night2day",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown domain `{s}`")))
    }
}

/// An RGB image stored row-major as height x width x 3, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "{height}x{width}x3 image cannot hold {} values",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("pixel outside [0, 1]".into()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Channel-major copy for the network input, mapping values through `f`.
    pub fn write_chw(&self, out: &mut [f32], f: impl Fn(f32) -> f32) {
        let plane = self.height * self.width;
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = f(px[c]);
            }
        }
    }

    /// Inverse of [`Image::write_chw`]; values are clamped into [0, 1].
    pub fn from_chw(height: usize, width: usize, chw: &[f32], f: impl Fn(f32) -> f32) -> Self {
        let plane = height * width;
        let mut pixels = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                pixels[3 * i + c] = f(chw[c * plane + i]).clamp(0.0, 1.0);
            }
        }
        Self { height, width, pixels }
    }

    /// Rec. 709 luma averaged over all pixels.
    pub fn mean_luminance(&self) -> f64 {
        let sum: f64 = self
            .pixels
            .chunks_exact(3)
            .map(|p| 0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64)
            .sum();
        sum / (self.height * self.width) as f64
    }

    /// Mean absolute difference over all values.
    pub fn l1_distance(&self, other: &Image) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Resolution {
                got_h: other.height,
                got_w: other.width,
                want_h: self.height,
                want_w: self.width,
            });
        }
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / self.pixels.len() as f64)
    }
}

/// Area-averaging resample to a smaller or equal size.
pub fn downscale(image: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 || height > image.height || width > image.width {
        return Err(Error::Upscale {
            from_h: image.height,
            from_w: image.width,
            to_h: height,
            to_w: width,
        });
    }
    if height == image.height && width == image.width {
        return Ok(image.clone());
    }
    let rows = area_weights(image.height, height);
    let cols = area_weights(image.width, width);
    // Horizontal pass, then vertical.
    let mut tmp = vec![0.0f64; image.height * width * 3];
    for y in 0..image.height {
        for (x, taps) in cols.iter().enumerate() {
            for &(sx, wgt) in taps {
                for c in 0..3 {
                    tmp[(y * width + x) * 3 + c] += wgt * image.pixels[(y * image.width + sx) * 3 + c] as f64;
                }
            }
        }
    }
    let mut pixels = vec![0.0f32; height * width * 3];
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..width {
            for c in 0..3 {
                let v: f64 = taps.iter().map(|&(sy, wgt)| wgt * tmp[(sy * width + x) * 3 + c]).sum();
                pixels[(y * width + x) * 3 + c] = (v as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image { height, width, pixels })
}

/// For each output cell, the source indices it overlaps and their normalized
/// coverage.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let mut taps = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let cover = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if cover > 1e-12 {
                    taps.push((s, cover / scale));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: ClassLabel,
    pub domain: Domain,
    pub source_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(items: Vec<LabeledImage>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledImage> {
        self.items.iter()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for item in &self.items {
            counts[item.label.index()] += 1;
        }
        counts
    }

    pub fn filter(&self, keep: impl Fn(&LabeledImage) -> bool) -> Dataset {
        Dataset::new(self.items.iter().filter(|i| keep(i)).cloned().collect())
    }

    pub fn of_domain(&self, domain: Domain) -> Dataset {
        self.filter(|i| i.domain == domain)
    }

    /// Every image downscaled to `side` x `side`.
    pub fn downscaled(&self, side: usize) -> Result<Dataset> {
        let items = self
            .items
            .iter()
            .map(|i| {
                Ok(LabeledImage {
                    image: downscale(&i.image, side, side)?,
                    ..i.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset::new(items))
    }

    /// Common resolution of all images, if there is one.
    pub fn resolution(&self) -> Option<(usize, usize)> {
        let first = self.items.first()?;
        let dims = (first.image.height, first.image.width);
        self.items
            .iter()
            .all(|i| (i.image.height, i.image.width) == dims)
            .then_some(dims)
    }

    /// Members of each class sorted by source id, so selections do not
    /// depend on input order.
    fn by_class(&self) -> [Vec<&LabeledImage>; NUM_CLASSES] {
        let mut groups: [Vec<&LabeledImage>; NUM_CLASSES] = Default::default();
        for item in &self.items {
            groups[item.label.index()].push(item);
        }
        for g in &mut groups {
            g.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        }
        groups
    }
}

impl FromIterator<LabeledImage> for Dataset {
    fn from_iter<I: IntoIterator<Item = LabeledImage>>(iter: I) -> Self {
        Dataset::new(iter.into_iter().collect())
    }
}

fn class_rng(seed: u64, class: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub const MIN_CLASS_SIZE: usize = 5;

    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: 0.64,
            val_fraction: 0.16,
            test_fraction: 0.20,
            seed,
        }
    }

    /// Per-class (train, val, test) sizes: floors for train and val, the
    /// remainder to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((n as f64 * f) + 1e-9).floor() as usize;
        let train = floor(self.train_fraction);
        let val = floor(self.val_fraction);
        (train, val, n - train - val)
    }

    fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {fr:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Stratified 64/16/20 split. Classes absent from the dataset are skipped;
/// present classes need at least [`SplitSpec::MIN_CLASS_SIZE`] members.
pub fn stratified_split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut parts: [Vec<LabeledImage>; 3] = Default::default();
    for (class, mut members) in dataset.by_class().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < SplitSpec::MIN_CLASS_SIZE {
            return Err(Error::ClassTooSmall {
                class: ClassLabel::ALL[class].name(),
                count: members.len(),
                min: SplitSpec::MIN_CLASS_SIZE,
            });
        }
        members.shuffle(&mut class_rng(spec.seed, class, 1));
        let (train, val, _) = spec.sizes(members.len());
        for (i, m) in members.into_iter().enumerate() {
            let part = if i < train {
                0
            } else if i < train + val {
                1
            } else {
                2
            };
            parts[part].push(m.clone());
        }
    }
    let [train, val, test] = parts.map(|mut items| {
        items.shuffle(&mut class_rng(spec.seed, NUM_CLASSES, 2));
        Dataset::new(items)
    });
    Ok(Split { train, val, test })
}

/// The data fractions of the factorial experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DataFraction {
    Quarter,
    Half,
    ThreeQuarters,
    Full,
}

impl DataFraction {
    pub const ALL: [DataFraction; 4] = [
        DataFraction::Quarter,
        DataFraction::Half,
        DataFraction::ThreeQuarters,
        DataFraction::Full,
    ];

    pub fn value(self) -> f64 {
        match self {
            DataFraction::Quarter => 0.25,
            DataFraction::Half => 0.5,
            DataFraction::ThreeQuarters => 0.75,
            DataFraction::Full => 1.0,
        }
    }
}

impl TryFrom<f64> for DataFraction {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| (f.value() - v).abs() < 1e-9)
            .ok_or_else(|| Error::Config(format!("data fraction {v} is not one of 0.25, 0.5, 0.75, 1.0")))
    }
}

impl fmt::Display for DataFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// Keeps `round(fraction * n)` members of every class.
pub fn subsample_stratified(dataset: &Dataset, fraction: DataFraction, seed: u64) -> Dataset {
    if fraction == DataFraction::Full {
        return dataset.clone();
    }
    let mut items = Vec::new();
    for (class, mut members) in dataset.by_class().into_iter().enumerate() {
        let keep = (fraction.value() * members.len() as f64).round() as usize;
        members.shuffle(&mut class_rng(seed, class, 3));
        members.truncate(keep);
        members.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        items.extend(members.into_iter().cloned());
    }
    Dataset::new(items)
}
