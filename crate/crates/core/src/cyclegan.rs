//! Unpaired night/day translation.
//!
//! Domain A is night, domain B is day: `gen_ab` turns night into day,
//! `gen_ba` day into night, `disc_a` judges night images and `disc_b` day
//! images. Networks work on pixels mapped to [-1, 1]; all reconstruction
//! losses are measured in that space.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use underpass_tensor::{AdamConfig, Bound, LayerKind, Mode, OptimizerState, Scalar, Sequential, Tape, Tensor, Var};

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointKind};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::training::{derive_seed, from_signed, image_batch, model_from_records, named_records};

/// Anything that maps a batch on a tape: a bound network, or a fixed
/// function in tests.
pub trait TapeModule<T: Scalar> {
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// A network whose parameters are already on the tape.
pub struct BoundNet<'a, T: Scalar> {
    pub net: &'a Sequential<T>,
    pub bound: &'a Bound,
}

impl<T: Scalar> TapeModule<T> for BoundNet<'_, T> {
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.net.forward(tape, self.bound, x, Mode::Eval)?)
    }
}

/// Generator: three encoder convs, six residual blocks, two upsampling
/// transpose convs and a final conv with tanh. Instance norm follows every
/// conv except the last.
pub fn generator_layers(width: usize) -> Vec<LayerKind> {
    let conv = |filters, stride| LayerKind::Conv2d { filters, stride };
    let mut layers = vec![
        conv(width, 1),
        LayerKind::InstanceNorm,
        LayerKind::ReLU,
        conv(2 * width, 2),
        LayerKind::InstanceNorm,
        LayerKind::ReLU,
        conv(4 * width, 2),
        LayerKind::InstanceNorm,
        LayerKind::ReLU,
    ];
    layers.extend([LayerKind::ResidualBlock { filters: 4 * width }; 6]);
    layers.extend([
        LayerKind::TransposeConv2d { filters: 2 * width },
        LayerKind::InstanceNorm,
        LayerKind::ReLU,
        LayerKind::TransposeConv2d { filters: width },
        LayerKind::InstanceNorm,
        LayerKind::ReLU,
        conv(3, 1),
        LayerKind::Tanh,
    ]);
    layers
}

/// Patch discriminator: five convs, three of them stride 2, ending in a
/// single-channel score map at 1/8 of the input size.
pub fn discriminator_layers(width: usize) -> Vec<LayerKind> {
    let conv = |filters, stride| LayerKind::Conv2d { filters, stride };
    vec![
        conv(width, 2),
        LayerKind::ReLU,
        conv(2 * width, 2),
        LayerKind::InstanceNorm,
        LayerKind::ReLU,
        conv(4 * width, 2),
        LayerKind::InstanceNorm,
        LayerKind::ReLU,
        conv(8 * width, 1),
        LayerKind::InstanceNorm,
        LayerKind::ReLU,
        conv(1, 1),
    ]
}

/// Network sizes and loss weights of a bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanShape {
    pub resolution: usize,
    pub gen_width: usize,
    pub disc_width: usize,
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
}

impl Default for GanShape {
    fn default() -> Self {
        Self {
            resolution: 64,
            gen_width: 8,
            disc_width: 8,
            lambda_cycle: 10.0,
            lambda_identity: 5.0,
        }
    }
}

impl GanShape {
    fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "cyclegan resolution {} must be a positive multiple of 8",
                self.resolution
            )));
        }
        if self.gen_width == 0 || self.disc_width == 0 {
            return Err(Error::Config("network widths must be >= 1".into()));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda_cycle) && self.lambda_cycle > 0.0 && ok(self.lambda_identity)) {
            return Err(Error::Config(format!(
                "loss weights cycle={} identity={} must be finite, cycle > 0, identity >= 0",
                self.lambda_cycle, self.lambda_identity
            )));
        }
        Ok(())
    }

    fn to_text(self) -> String {
        let mut s = String::from("cyclegan\n");
        let _ = writeln!(s, "resolution {}", self.resolution);
        let _ = writeln!(s, "gen_width {}", self.gen_width);
        let _ = writeln!(s, "disc_width {}", self.disc_width);
        let _ = writeln!(s, "lambda_cycle {:?}", self.lambda_cycle);
        let _ = writeln!(s, "lambda_identity {:?}", self.lambda_identity);
        s
    }

    fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("cyclegan") {
            return Err("not a cyclegan spec".into());
        }
        let mut shape = GanShape::default();
        for line in lines {
            let (key, value) = line.trim().split_once(' ').ok_or(format!("bad line `{line}`"))?;
            let int = || value.parse::<usize>().map_err(|e| format!("{key}: {e}"));
            let real = || value.parse::<f64>().map_err(|e| format!("{key}: {e}"));
            match key {
                "resolution" => shape.resolution = int()?,
                "gen_width" => shape.gen_width = int()?,
                "disc_width" => shape.disc_width = int()?,
                "lambda_cycle" => shape.lambda_cycle = real()?,
                "lambda_identity" => shape.lambda_identity = real()?,
                _ => return Err(format!("unknown key `{key}`")),
            }
        }
        Ok(shape)
    }
}

/// Two generators, two discriminators and the loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleGanBundle<T = f32> {
    pub shape: GanShape,
    pub gen_ab: Sequential<T>,
    pub gen_ba: Sequential<T>,
    pub disc_a: Sequential<T>,
    pub disc_b: Sequential<T>,
}

const PARTS: [&str; 4] = ["gen_ab.", "gen_ba.", "disc_a.", "disc_b."];

impl<T: Scalar> CycleGanBundle<T> {
    pub fn new(shape: GanShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let input = vec![3, shape.resolution, shape.resolution];
        let net = |layers, i: u64| Sequential::new(layers, input.clone(), derive_seed(&[seed, i]));
        Ok(Self {
            shape,
            gen_ab: net(generator_layers(shape.gen_width), 1)?,
            gen_ba: net(generator_layers(shape.gen_width), 2)?,
            disc_a: net(discriminator_layers(shape.disc_width), 3)?,
            disc_b: net(discriminator_layers(shape.disc_width), 4)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> CycleGanBundle<U> {
        CycleGanBundle {
            shape: self.shape,
            gen_ab: self.gen_ab.cast(),
            gen_ba: self.gen_ba.cast(),
            disc_a: self.disc_a.cast(),
            disc_b: self.disc_b.cast(),
        }
    }
}

impl CycleGanBundle<f32> {
    pub fn to_checkpoint(&self, seed: u64, config_digest: [u8; 32]) -> Checkpoint {
        let nets = [&self.gen_ab, &self.gen_ba, &self.disc_a, &self.disc_b];
        Checkpoint {
            kind: CheckpointKind::CycleGan,
            seed,
            config_digest,
            spec_text: self.shape.to_text(),
            records: nets
                .iter()
                .zip(PARTS)
                .flat_map(|(net, prefix)| named_records(net, prefix))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CheckpointKind::CycleGan)?;
        let shape = GanShape::from_text(&ck.spec_text).map_err(CheckpointError::SpecMismatch)?;
        shape.validate()?;
        let input = vec![3, shape.resolution, shape.resolution];
        let load = |layers, prefix| model_from_records(layers, input.clone(), &ck.records, prefix);
        let bundle = Self {
            shape,
            gen_ab: load(generator_layers(shape.gen_width), PARTS[0])?,
            gen_ba: load(generator_layers(shape.gen_width), PARTS[1])?,
            disc_a: load(discriminator_layers(shape.disc_width), PARTS[2])?,
            disc_b: load(discriminator_layers(shape.disc_width), PARTS[3])?,
        };
        let expected: usize = [&bundle.gen_ab, &bundle.gen_ba, &bundle.disc_a, &bundle.disc_b]
            .iter()
            .map(|n| n.named_params().len())
            .sum();
        if expected != ck.records.len() {
            return Err(CheckpointError::SpecMismatch(format!(
                "{} records for {expected} parameters",
                ck.records.len()
            ))
            .into());
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path, seed: u64, config_digest: [u8; 32]) -> Result<()> {
        Ok(self.to_checkpoint(seed, config_digest).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    NightToDay,
    DayToNight,
}

/// Maps night images into the day domain.
pub trait Translator {
    fn night_to_day(&self, images: &[&Image]) -> Result<Vec<Image>>;
}

/// Leaves images unchanged.
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn night_to_day(&self, images: &[&Image]) -> Result<Vec<Image>> {
        Ok(images.iter().map(|&i| i.clone()).collect())
    }
}

impl Translator for CycleGanBundle<f32> {
    fn night_to_day(&self, images: &[&Image]) -> Result<Vec<Image>> {
        transform_many(self, images, Direction::NightToDay)
    }
}

/// Translates one image. The output has the input's shape and lies in [0, 1].
pub fn transform(bundle: &CycleGanBundle<f32>, image: &Image, direction: Direction) -> Result<Image> {
    Ok(transform_many(bundle, &[image], direction)?.remove(0))
}

pub fn transform_many(bundle: &CycleGanBundle<f32>, images: &[&Image], direction: Direction) -> Result<Vec<Image>> {
    let side = bundle.shape.resolution;
    for img in images {
        if (img.height(), img.width()) != (side, side) {
            return Err(Error::Resolution {
                got_h: img.height(),
                got_w: img.width(),
                want_h: side,
                want_w: side,
            });
        }
    }
    let net = match direction {
        Direction::NightToDay => &bundle.gen_ab,
        Direction::DayToNight => &bundle.gen_ba,
    };
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(8) {
        let y = net.predict(image_batch(chunk)?, Mode::Eval)?;
        let plane = 3 * side * side;
        out.extend(
            y.data()
                .chunks(plane)
                .map(|c| Image::from_chw(side, side, c, from_signed)),
        );
    }
    Ok(out)
}

fn target_like<T: Scalar>(tape: &mut Tape<T>, v: Var, value: f64) -> Var {
    let shape = tape.shape(v).to_vec();
    tape.constant(Tensor::full(shape, T::from_f64(value)))
}

/// Least-squares adversarial terms: `MSE(D(real), 1) + MSE(D(fake), 0)` for
/// the discriminator and `MSE(D(fake), 1)` for the generator.
pub fn adversarial_losses<T: Scalar>(
    tape: &mut Tape<T>,
    disc: &dyn TapeModule<T>,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    let d_real = disc.forward(tape, real)?;
    let d_fake = disc.forward(tape, fake)?;
    let ones_r = target_like(tape, d_real, 1.0);
    let zeros_f = target_like(tape, d_fake, 0.0);
    let ones_f = target_like(tape, d_fake, 1.0);
    let real_term = tape.mse(d_real, ones_r)?;
    let fake_term = tape.mse(d_fake, zeros_f)?;
    let disc_loss = tape.add(real_term, fake_term)?;
    let gen_loss = tape.mse(d_fake, ones_f)?;
    Ok((disc_loss, gen_loss))
}

/// Tape handles of the four reconstruction losses.
#[derive(Debug, Clone, Copy)]
pub struct CycleTerms {
    pub forward_cycle: Var,
    pub backward_cycle: Var,
    pub identity_a: Var,
    pub identity_b: Var,
    pub fake_b: Var,
    pub fake_a: Var,
}

/// `L1(G_ba(G_ab(a)), a)`, `L1(G_ab(G_ba(b)), b)`, `L1(G_ba(a), a)`, `L1(G_ab(b), b)`.
pub fn cycle_and_identity_losses<T: Scalar>(
    tape: &mut Tape<T>,
    gen_ab: &dyn TapeModule<T>,
    gen_ba: &dyn TapeModule<T>,
    a: Var,
    b: Var,
) -> Result<CycleTerms> {
    let fake_b = gen_ab.forward(tape, a)?;
    let fake_a = gen_ba.forward(tape, b)?;
    let rec_a = gen_ba.forward(tape, fake_b)?;
    let rec_b = gen_ab.forward(tape, fake_a)?;
    let same_a = gen_ba.forward(tape, a)?;
    let same_b = gen_ab.forward(tape, b)?;
    Ok(CycleTerms {
        forward_cycle: tape.l1(rec_a, a)?,
        backward_cycle: tape.l1(rec_b, b)?,
        identity_a: tape.l1(same_a, a)?,
        identity_b: tape.l1(same_b, b)?,
        fake_b,
        fake_a,
    })
}

/// All generator-side terms of one step, plus their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub adv_ab: Var,
    pub adv_ba: Var,
    pub cycle: CycleTerms,
    pub total: Var,
}

/// Generator objective
/// `adv_ab + adv_ba + lambda_cycle (fwd + bwd) + lambda_identity (id_a + id_b)`.
pub fn generator_objective<T: Scalar>(
    tape: &mut Tape<T>,
    nets: [&dyn TapeModule<T>; 4],
    a: Var,
    b: Var,
    lambda_cycle: f64,
    lambda_identity: f64,
) -> Result<GeneratorTerms> {
    let [gen_ab, gen_ba, disc_a, disc_b] = nets;
    let cycle = cycle_and_identity_losses(tape, gen_ab, gen_ba, a, b)?;
    let (_, adv_ab) = adversarial_losses(tape, disc_b, b, cycle.fake_b)?;
    let (_, adv_ba) = adversarial_losses(tape, disc_a, a, cycle.fake_a)?;
    let (lc, li) = (T::from_f64(lambda_cycle), T::from_f64(lambda_identity));
    let total = tape.weighted_sum(&[
        (adv_ab, T::one()),
        (adv_ba, T::one()),
        (cycle.forward_cycle, lc),
        (cycle.backward_cycle, lc),
        (cycle.identity_a, li),
        (cycle.identity_b, li),
    ])?;
    Ok(GeneratorTerms {
        adv_ab,
        adv_ba,
        cycle,
        total,
    })
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossRecord {
    pub epoch: usize,
    pub adv_ab: f64,
    pub adv_ba: f64,
    pub cycle_forward: f64,
    pub cycle_backward: f64,
    pub identity_a: f64,
    pub identity_b: f64,
    pub gen_total: f64,
    pub disc_a: f64,
    pub disc_b: f64,
}

impl LossRecord {
    const COLUMNS: [&'static str; 10] = [
        "epoch",
        "adv_ab",
        "adv_ba",
        "cycle_forward",
        "cycle_backward",
        "identity_a",
        "identity_b",
        "gen_total",
        "disc_a",
        "disc_b",
    ];

    fn values(&self) -> [f64; 9] {
        [
            self.adv_ab,
            self.adv_ba,
            self.cycle_forward,
            self.cycle_backward,
            self.identity_a,
            self.identity_b,
            self.gen_total,
            self.disc_a,
            self.disc_b,
        ]
    }

    fn values_mut(&mut self) -> [&mut f64; 9] {
        [
            &mut self.adv_ab,
            &mut self.adv_ba,
            &mut self.cycle_forward,
            &mut self.cycle_backward,
            &mut self.identity_a,
            &mut self.identity_b,
            &mut self.gen_total,
            &mut self.disc_a,
            &mut self.disc_b,
        ]
    }

    /// `gen_total` recomputed from the generator components.
    pub fn component_sum(&self, shape: &GanShape) -> f64 {
        self.adv_ab
            + self.adv_ba
            + shape.lambda_cycle * (self.cycle_forward + self.cycle_backward)
            + shape.lambda_identity * (self.identity_a + self.identity_b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 2e-4,
            beta1: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanTrainResult {
    pub bundle: CycleGanBundle<f32>,
    pub history: Vec<LossRecord>,
}

fn scalar_of(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

/// Trains all four networks with batch size 1. Each iteration pairs one
/// night and one day image (independently shuffled, no pairing assumed),
/// updates both generators, then both discriminators on the detached fakes.
pub fn train_cyclegan(
    mut bundle: CycleGanBundle<f32>,
    day: &[&Image],
    night: &[&Image],
    cfg: &GanTrainConfig,
) -> Result<GanTrainResult> {
    if day.is_empty() || night.is_empty() {
        return Err(Error::EmptyDataset("cyclegan training"));
    }
    if cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(
            "cyclegan needs epochs >= 1 and a positive learning rate".into(),
        ));
    }
    let side = bundle.shape.resolution;
    for img in day.iter().chain(night) {
        if (img.height(), img.width()) != (side, side) {
            return Err(Error::Resolution {
                got_h: img.height(),
                got_w: img.width(),
                want_h: side,
                want_w: side,
            });
        }
    }
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        ..AdamConfig::default()
    };
    let mut opt_gab = OptimizerState::new(adam, bundle.gen_ab.params());
    let mut opt_gba = OptimizerState::new(adam, bundle.gen_ba.params());
    let mut opt_da = OptimizerState::new(adam, bundle.disc_a.params());
    let mut opt_db = OptimizerState::new(adam, bundle.disc_b.params());
    let (lc, li) = (bundle.shape.lambda_cycle, bundle.shape.lambda_identity);
    let steps = day.len().max(night.len());
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64]));
        let mut order_a: Vec<usize> = (0..night.len()).collect();
        let mut order_b: Vec<usize> = (0..day.len()).collect();
        order_a.shuffle(&mut rng);
        order_b.shuffle(&mut rng);
        let mut sums = LossRecord::default();
        for step in 0..steps {
            let xa = image_batch(&[night[order_a[step % night.len()]]])?;
            let xb = image_batch(&[day[order_b[step % day.len()]]])?;

            // Generator update against frozen discriminators.
            let mut tape = Tape::new();
            let b_gab = bundle.gen_ab.bind(&mut tape, true);
            let b_gba = bundle.gen_ba.bind(&mut tape, true);
            let b_da = bundle.disc_a.bind(&mut tape, false);
            let b_db = bundle.disc_b.bind(&mut tape, false);
            let a = tape.constant(xa.clone());
            let b = tape.constant(xb.clone());
            let terms = {
                let nets: [&dyn TapeModule<f32>; 4] = [
                    &BoundNet {
                        net: &bundle.gen_ab,
                        bound: &b_gab,
                    },
                    &BoundNet {
                        net: &bundle.gen_ba,
                        bound: &b_gba,
                    },
                    &BoundNet {
                        net: &bundle.disc_a,
                        bound: &b_da,
                    },
                    &BoundNet {
                        net: &bundle.disc_b,
                        bound: &b_db,
                    },
                ];
                generator_objective(&mut tape, nets, a, b, lc, li)?
            };
            let gen_values = [
                ("adv_ab", terms.adv_ab),
                ("adv_ba", terms.adv_ba),
                ("cycle_forward", terms.cycle.forward_cycle),
                ("cycle_backward", terms.cycle.backward_cycle),
                ("identity_a", terms.cycle.identity_a),
                ("identity_b", terms.cycle.identity_b),
                ("gen_total", terms.total),
            ]
            .map(|(name, v)| (name, scalar_of(&tape, v)));
            if let Some((name, _)) = gen_values.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: (*name).into(),
                    epoch,
                });
            }
            let fake_b = tape.value(terms.cycle.fake_b).clone();
            let fake_a = tape.value(terms.cycle.fake_a).clone();
            let mut grads = tape.backward(terms.total)?;
            bundle.gen_ab.store_grads(&mut grads, &b_gab)?;
            bundle.gen_ba.store_grads(&mut grads, &b_gba)?;
            opt_gab.step(bundle.gen_ab.params_mut())?;
            opt_gba.step(bundle.gen_ba.params_mut())?;

            // Discriminator update on the detached fakes; halved so the
            // discriminators learn more slowly than the generators.
            let mut tape = Tape::new();
            let b_da = bundle.disc_a.bind(&mut tape, true);
            let b_db = bundle.disc_b.bind(&mut tape, true);
            let (a, b) = (tape.constant(xa), tape.constant(xb));
            let (fa, fb) = (tape.constant(fake_a), tape.constant(fake_b));
            let (disc_a, _) = adversarial_losses(
                &mut tape,
                &BoundNet {
                    net: &bundle.disc_a,
                    bound: &b_da,
                },
                a,
                fa,
            )?;
            let (disc_b, _) = adversarial_losses(
                &mut tape,
                &BoundNet {
                    net: &bundle.disc_b,
                    bound: &b_db,
                },
                b,
                fb,
            )?;
            let (da, db) = (scalar_of(&tape, disc_a), scalar_of(&tape, disc_b));
            for (name, v) in [("disc_a", da), ("disc_b", db)] {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        component: name.into(),
                        epoch,
                    });
                }
            }
            let half = tape.weighted_sum(&[(disc_a, 0.5), (disc_b, 0.5)])?;
            let mut grads = tape.backward(half)?;
            bundle.disc_a.store_grads(&mut grads, &b_da)?;
            bundle.disc_b.store_grads(&mut grads, &b_db)?;
            opt_da.step(bundle.disc_a.params_mut())?;
            opt_db.step(bundle.disc_b.params_mut())?;

            let all = gen_values.map(|(_, v)| v);
            for (slot, v) in sums.values_mut().into_iter().zip(all.iter().chain(&[da, db])) {
                *slot += v;
            }
        }
        for slot in sums.values_mut() {
            *slot /= steps as f64;
        }
        sums.epoch = epoch;
        history.push(sums);
    }
    for net in [
        &mut bundle.gen_ab,
        &mut bundle.gen_ba,
        &mut bundle.disc_a,
        &mut bundle.disc_b,
    ] {
        net.clear_grads();
    }
    Ok(GanTrainResult { bundle, history })
}

/// Mean reconstruction losses of a bundle on image pairs, without training.
/// Returns (forward_cycle, backward_cycle, identity_a, identity_b).
pub fn reconstruction_losses(bundle: &CycleGanBundle<f32>, night: &[&Image], day: &[&Image]) -> Result<[f64; 4]> {
    let n = night.len().min(day.len());
    if n == 0 {
        return Err(Error::EmptyDataset("reconstruction losses"));
    }
    let mut sums = [0.0; 4];
    for i in 0..n {
        let mut tape = Tape::new();
        let b_gab = bundle.gen_ab.bind(&mut tape, false);
        let b_gba = bundle.gen_ba.bind(&mut tape, false);
        let a = tape.constant(image_batch(&[night[i]])?);
        let b = tape.constant(image_batch(&[day[i]])?);
        let t = cycle_and_identity_losses(
            &mut tape,
            &BoundNet {
                net: &bundle.gen_ab,
                bound: &b_gab,
            },
            &BoundNet {
                net: &bundle.gen_ba,
                bound: &b_gba,
            },
            a,
            b,
        )?;
        for (s, v) in sums
            .iter_mut()
            .zip([t.forward_cycle, t.backward_cycle, t.identity_a, t.identity_b])
        {
            *s += scalar_of(&tape, v);
        }
    }
    Ok(sums.map(|s| s / n as f64))
}

/// One row per epoch with every loss component.
pub fn write_history_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(LossRecord::COLUMNS)?;
    for r in history {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.values().iter().map(|v| format!("{v:.6}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Identity;

    impl<T: Scalar> TapeModule<T> for Identity {
        fn forward(&self, _: &mut Tape<T>, x: Var) -> Result<Var> {
            Ok(x)
        }
    }

    /// `clamp(x + shift, -1, 1)`, evaluated eagerly.
    struct ShiftClamp(f64);

    impl<T: Scalar> TapeModule<T> for ShiftClamp {
        fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            let s = T::from_f64(self.0);
            let one = T::one();
            let y = tape.value(x).map(|v| (v + s).max(-one).min(one));
            Ok(tape.constant(y))
        }
    }

    /// Score map of a fixed value, one 2x2 patch grid per sample.
    struct ConstantScore(f64);

    impl<T: Scalar> TapeModule<T> for ConstantScore {
        fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            let n = tape.shape(x)[0];
            Ok(tape.constant(Tensor::full(vec![n, 1, 2, 2], T::from_f64(self.0))))
        }
    }

    /// Returns a fixed map for real inputs (tagged by value > 0) and another for fakes.
    struct PatchScores {
        real: Vec<f64>,
        fake: Vec<f64>,
    }

    impl<T: Scalar> TapeModule<T> for PatchScores {
        fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            let is_real = tape.value(x).data()[0] > T::zero();
            let v = if is_real { &self.real } else { &self.fake };
            let t = Tensor::new(vec![1, 1, 2, 2], v.iter().map(|&f| T::from_f64(f)).collect())?;
            Ok(tape.constant(t))
        }
    }

    fn constant_batch(tape: &mut Tape<f64>, v: f64) -> Var {
        tape.constant(Tensor::full(vec![1, 3, 4, 4], v))
    }

    fn val(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn constant_half_discriminator() {
        let mut tape = Tape::<f64>::new();
        let (real, fake) = (constant_batch(&mut tape, 0.3), constant_batch(&mut tape, -0.2));
        let (d, g) = adversarial_losses(&mut tape, &ConstantScore(0.5), real, fake).unwrap();
        assert_eq!((val(&tape, d), val(&tape, g)), (0.5, 0.25));
    }

    #[test]
    fn perfect_discriminator() {
        let mut tape = Tape::<f64>::new();
        let (real, fake) = (constant_batch(&mut tape, 0.3), constant_batch(&mut tape, -0.2));
        let disc = PatchScores {
            real: vec![1.0; 4],
            fake: vec![0.0; 4],
        };
        let (d, g) = adversarial_losses(&mut tape, &disc, real, fake).unwrap();
        assert_eq!((val(&tape, d), val(&tape, g)), (0.0, 1.0));
    }

    #[test]
    fn mixed_patch_scores_by_hand() {
        let mut tape = Tape::<f64>::new();
        let (real, fake) = (constant_batch(&mut tape, 0.3), constant_batch(&mut tape, -0.2));
        let disc = PatchScores {
            real: vec![0.9, 0.5, 1.0, 0.2],
            fake: vec![0.1, 0.6, 0.0, 0.3],
        };
        let (d, g) = adversarial_losses(&mut tape, &disc, real, fake).unwrap();
        // real: (0.01 + 0.25 + 0 + 0.64) / 4 = 0.225; fake vs 0: (0.01 + 0.36 + 0 + 0.09) / 4 = 0.115
        // fake vs 1: (0.81 + 0.16 + 1 + 0.49) / 4 = 0.615
        assert!((val(&tape, d) - 0.34).abs() < 1e-12);
        assert!((val(&tape, g) - 0.615).abs() < 1e-12);
    }

    #[test]
    fn identity_generators_have_zero_reconstruction_loss() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![1, 3, 1, 2], vec![-0.5, 0.1, 0.9, -1.0, 0.0, 0.3]).unwrap());
        let b = constant_batch(&mut tape, 0.7);
        let t = cycle_and_identity_losses(&mut tape, &Identity, &Identity, a, b).unwrap();
        for v in [t.forward_cycle, t.backward_cycle, t.identity_a, t.identity_b] {
            assert_eq!(val(&tape, v), 0.0);
        }
    }

    #[test]
    fn shifted_generator_closed_form() {
        // a = 0.8 everywhere, gen_ab adds 0.5 and clamps to 1.0, gen_ba is the
        // identity: forward cycle = |1.0 - 0.8| = 0.2, identity_b = 0.5 on b = 0.
        let mut tape = Tape::<f64>::new();
        let a = constant_batch(&mut tape, 0.8);
        let b = constant_batch(&mut tape, 0.0);
        let t = cycle_and_identity_losses(&mut tape, &ShiftClamp(0.5), &Identity, a, b).unwrap();
        assert!((val(&tape, t.forward_cycle) - 0.2).abs() < 1e-12);
        assert!((val(&tape, t.backward_cycle) - 0.5).abs() < 1e-12);
        assert_eq!(val(&tape, t.identity_a), 0.0);
        assert!((val(&tape, t.identity_b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shapes_hold_through_both_networks() {
        let bundle = CycleGanBundle::<f32>::new(
            GanShape {
                resolution: 16,
                gen_width: 2,
                disc_width: 2,
                ..GanShape::default()
            },
            1,
        )
        .unwrap();
        let out = bundle
            .gen_ab
            .predict(Tensor::zeros(vec![1, 3, 16, 16]), Mode::Eval)
            .unwrap();
        assert_eq!(out.shape(), &[1, 3, 16, 16]);
        let score = bundle
            .disc_a
            .predict(Tensor::zeros(vec![1, 3, 16, 16]), Mode::Eval)
            .unwrap();
        assert_eq!(score.shape(), &[1, 1, 2, 2]);
        assert_eq!(
            generator_layers(8)
                .iter()
                .filter(|l| matches!(l, LayerKind::ResidualBlock { .. }))
                .count(),
            6
        );
        let convs = discriminator_layers(8)
            .iter()
            .filter(|l| matches!(l, LayerKind::Conv2d { .. }))
            .count();
        assert_eq!(convs, 5);
    }

    #[test]
    fn spec_text_round_trips() {
        let shape = GanShape {
            lambda_identity: 0.0,
            ..GanShape::default()
        };
        assert_eq!(GanShape::from_text(&shape.to_text()).unwrap(), shape);
        assert!(GanShape::from_text("arch x\n").is_err());
    }
}
