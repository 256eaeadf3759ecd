//! Classifier training with early stopping, the architecture x data-fraction
//! factorial, and one-factor-at-a-time hyperparameter search.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use underpass_tensor::{AdamConfig, Mode, OptimizerState, Sequential, Tape, Tensor};

use crate::arch::ArchitectureSpec;
use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointKind, Record};
use crate::data::{stratified_split, subsample_stratified, DataFraction, Dataset, Image, LabeledImage, SplitSpec};
use crate::error::{Error, Result};

/// Batch size used for every gradient-free pass, so evaluations of one
/// model are reproducible regardless of the caller.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub l2_rate: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            dropout_rate: 0.5,
            l2_rate: 0.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.l2_rate >= 0.0 && self.l2_rate.is_finite()) {
            return Err(Error::Config(format!("l2 rate {} must be >= 0", self.l2_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Side length of the square training images.
    pub resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 150,
            patience: 10,
            seed: 0,
            resolution: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.resolution == 0 {
            return Err(Error::Config(
                "batch size, epochs, patience and resolution must be >= 1".into(),
            ));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Loss/accuracy summary of one epoch. Epochs count from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based stopping on a loss that should decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Class predictions for a batch of images.
pub trait Predictor {
    fn predict(&self, images: &[&Image]) -> Result<Vec<usize>>;
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Pixel value fed to every network: [0, 1] mapped to [-1, 1].
pub fn to_signed(v: f32) -> f32 {
    2.0 * v - 1.0
}

pub fn from_signed(v: f32) -> f32 {
    (v + 1.0) / 2.0
}

/// Stacks images into an NCHW batch in [-1, 1].
pub fn image_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or(Error::EmptyDataset("batch"))?;
    let (h, w) = (first.height(), first.width());
    let plane = 3 * h * w;
    let mut data = vec![0.0f32; images.len() * plane];
    for (img, out) in images.iter().zip(data.chunks_mut(plane)) {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Resolution {
                got_h: img.height(),
                got_w: img.width(),
                want_h: h,
                want_w: w,
            });
        }
        img.write_chw(out, to_signed);
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}

/// A trained or freshly initialized network together with its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub spec: ArchitectureSpec,
    pub model: Sequential<f32>,
}

impl Classifier {
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        let model = spec.build(seed)?;
        Ok(Self { spec, model })
    }

    fn check_resolution(&self, img: &Image) -> Result<()> {
        let r = self.spec.input;
        if (img.height(), img.width()) != (r.height, r.width) {
            return Err(Error::Resolution {
                got_h: img.height(),
                got_w: img.width(),
                want_h: r.height,
                want_w: r.width,
            });
        }
        Ok(())
    }

    /// Softmax class probabilities, one row per image.
    pub fn probabilities(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            for img in chunk {
                self.check_resolution(img)?;
            }
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, false);
            let x = tape.constant(image_batch(chunk)?);
            let logits = self.model.forward(&mut tape, &bound, x, Mode::Eval)?;
            let probs = tape.softmax(logits)?;
            let k = self.spec.num_classes;
            rows.extend(tape.value(probs).data().chunks(k).map(<[f32]>::to_vec));
        }
        Ok(rows)
    }

    pub fn to_checkpoint(&self, seed: u64, config_digest: [u8; 32]) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Classifier,
            seed,
            config_digest,
            spec_text: self.spec.to_string(),
            records: named_records(&self.model, ""),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CheckpointKind::Classifier)?;
        let spec: ArchitectureSpec = ck
            .spec_text
            .parse()
            .map_err(|e| CheckpointError::SpecMismatch(format!("spec text: {e}")))?;
        let model = model_from_records(spec.layers()?, spec.input_shape(), &ck.records, "")?;
        Ok(Self { spec, model })
    }

    pub fn save(&self, path: &Path, seed: u64, config_digest: [u8; 32]) -> Result<()> {
        Ok(self.to_checkpoint(seed, config_digest).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Predictor for Classifier {
    fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        Ok(self.probabilities(images)?.iter().map(|p| argmax(p)).collect())
    }
}

/// Parameter records named `<prefix><layer>.<param>` in declaration order.
pub(crate) fn named_records(model: &Sequential<f32>, prefix: &str) -> Vec<Record> {
    model
        .named_params()
        .into_iter()
        .map(|(name, t)| Record {
            name: format!("{prefix}{name}"),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

/// Rebuilds a network from the records carrying `prefix`, checking names,
/// order and shapes against the layer stack.
pub(crate) fn model_from_records(
    layers: Vec<underpass_tensor::LayerKind>,
    input_shape: Vec<usize>,
    records: &[Record],
    prefix: &str,
) -> Result<Sequential<f32>> {
    let mut mine = records.iter().filter(|r| r.name.starts_with(prefix));
    let mut params = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let mut group = Vec::new();
        for name in layer.param_names() {
            let want = format!("{prefix}{i}.{name}");
            let r = mine
                .next()
                .ok_or_else(|| CheckpointError::SpecMismatch(format!("missing parameter `{want}`")))?;
            if r.name != want {
                return Err(CheckpointError::SpecMismatch(format!("expected `{want}`, found `{}`", r.name)).into());
            }
            group.push(
                Tensor::new(r.shape.clone(), r.data.clone())
                    .map_err(|e| CheckpointError::SpecMismatch(format!("`{want}`: {e}")))?,
            );
        }
        params.push(group);
    }
    if let Some(extra) = mine.next() {
        return Err(CheckpointError::SpecMismatch(format!("unexpected parameter `{}`", extra.name)).into());
    }
    Sequential::from_params(layers, input_shape, params)
        .map_err(|e| CheckpointError::SpecMismatch(e.to_string()).into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub classifier: Classifier,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

impl TrainResult {
    pub fn best(&self) -> &EpochStats {
        &self.history[self.best_epoch - 1]
    }
}

/// Mixes integers into a well-spread seed.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    let mut z = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        z ^= p;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn labels_of(items: &[&LabeledImage]) -> Vec<usize> {
    items.iter().map(|i| i.label.index()).collect()
}

/// Mean cross-entropy and accuracy of `model` on `items` in eval mode.
fn eval_loss(model: &Sequential<f32>, items: &[&LabeledImage]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in items.chunks(EVAL_BATCH) {
        let images: Vec<&Image> = chunk.iter().map(|i| &i.image).collect();
        let labels = labels_of(chunk);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.constant(image_batch(&images)?);
        let logits = model.forward(&mut tape, &bound, x, Mode::Eval)?;
        let ce = tape.cross_entropy(logits, &labels)?;
        loss += tape.value(ce).data()[0] as f64 * chunk.len() as f64;
        correct += count_correct(tape.value(logits), &labels);
    }
    Ok((loss / items.len() as f64, correct as f64 / items.len() as f64))
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

fn check_inputs(data: &Dataset, what: &'static str, side: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(what));
    }
    for item in data.iter() {
        if (item.image.height(), item.image.width()) != (side, side) {
            return Err(Error::Resolution {
                got_h: item.image.height(),
                got_w: item.image.width(),
                want_h: side,
                want_w: side,
            });
        }
    }
    Ok(())
}

/// Trains `spec` (with `hp`'s dropout and decay) and returns the weights of
/// the epoch with the lowest validation loss.
pub fn train_classifier(
    spec: &ArchitectureSpec,
    train: &Dataset,
    val: &Dataset,
    hp: &HyperParams,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let mut trainer = Trainer::new(spec, train, val, hp, cfg)?;
    while trainer.step()? {}
    trainer.finish()
}

/// [`train_classifier`] one mini-batch at a time. Several trainers can share
/// a core in turns; each one's `wall_seconds` counts only the time spent in
/// its own calls.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    clf: Classifier,
    opt: OptimizerState<f32>,
    order: Vec<&'a LabeledImage>,
    val_items: Vec<&'a LabeledImage>,
    stopper: EarlyStopping,
    best_model: Sequential<f32>,
    history: Vec<EpochStats>,
    stopped_early: bool,
    finished: bool,
    epoch: usize,
    batch: usize,
    loss_sum: f64,
    correct: usize,
    busy: Duration,
}

impl<'a> Trainer<'a> {
    pub fn new(
        spec: &ArchitectureSpec,
        train: &'a Dataset,
        val: &'a Dataset,
        hp: &HyperParams,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let started = Instant::now();
        hp.validate()?;
        cfg.validate()?;
        check_inputs(train, "training set", cfg.resolution)?;
        check_inputs(val, "validation set", cfg.resolution)?;
        let mut spec = spec.clone();
        spec.dropout_rate = hp.dropout_rate;
        spec.l2_rate = hp.l2_rate;
        spec.input.height = cfg.resolution;
        spec.input.width = cfg.resolution;
        let clf = Classifier::new(spec, cfg.seed)?;
        let adam = AdamConfig {
            learning_rate: hp.learning_rate,
            l2_rate: hp.l2_rate,
            ..AdamConfig::default()
        };
        let opt = OptimizerState::new(adam, clf.model.params());
        let best_model = clf.model.clone();
        Ok(Self {
            cfg: *cfg,
            clf,
            opt,
            order: train.iter().collect(),
            val_items: val.iter().collect(),
            stopper: EarlyStopping::new(cfg.patience),
            best_model,
            history: Vec::new(),
            stopped_early: false,
            finished: false,
            epoch: 0,
            batch: 0,
            loss_sum: 0.0,
            correct: 0,
            busy: started.elapsed(),
        })
    }

    /// Runs the next mini-batch, plus validation and the stopping check when
    /// it closes an epoch. Returns whether training continues.
    pub fn step(&mut self) -> Result<bool> {
        if self.finished {
            return Ok(false);
        }
        let started = Instant::now();
        let more = self.advance();
        self.busy += started.elapsed();
        more
    }

    fn advance(&mut self) -> Result<bool> {
        let cfg = self.cfg;
        if self.batch == 0 {
            self.epoch += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, self.epoch as u64]));
            self.order.shuffle(&mut rng);
            (self.loss_sum, self.correct) = (0.0, 0);
        }
        let (epoch, b) = (self.epoch, self.batch);
        let chunk = self.order.chunks(cfg.batch_size).nth(b).expect("batch index in range");
        let images: Vec<&Image> = chunk.iter().map(|i| &i.image).collect();
        let labels = labels_of(chunk);
        let mut tape = Tape::new();
        let bound = self.clf.model.bind(&mut tape, true);
        let x = tape.constant(image_batch(&images)?);
        let mode = Mode::Train {
            seed: derive_seed(&[cfg.seed, epoch as u64, b as u64]),
        };
        let logits = self.clf.model.forward(&mut tape, &bound, x, mode)?;
        let ce = tape.cross_entropy(logits, &labels)?;
        let batch_loss = tape.value(ce).data()[0] as f64;
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite {
                component: "train_loss".into(),
                epoch,
            });
        }
        self.loss_sum += batch_loss * chunk.len() as f64;
        self.correct += count_correct(tape.value(logits), &labels);
        let mut grads = tape.backward(ce)?;
        self.clf.model.store_grads(&mut grads, &bound)?;
        self.opt.step(self.clf.model.params_mut())?;

        self.batch += 1;
        if self.batch < self.order.len().div_ceil(cfg.batch_size) {
            return Ok(true);
        }
        self.batch = 0;
        let (val_loss, val_acc) = eval_loss(&self.clf.model, &self.val_items)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                component: "val_loss".into(),
                epoch,
            });
        }
        let n = self.order.len() as f64;
        self.history.push(EpochStats {
            epoch,
            train_loss: self.loss_sum / n,
            train_acc: self.correct as f64 / n,
            val_loss,
            val_acc,
        });
        match self.stopper.update(epoch, val_loss) {
            StopDecision::Improved => self.best_model = self.clf.model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                self.stopped_early = true;
                self.finished = true;
            }
        }
        if epoch == cfg.max_epochs {
            self.finished = true;
        }
        Ok(!self.finished)
    }

    /// Restores the best epoch's weights. Calling this before training
    /// ends keeps the best of the epochs completed so far.
    pub fn finish(mut self) -> Result<TrainResult> {
        if self.history.is_empty() {
            return Err(Error::Config("no epoch has completed".into()));
        }
        let started = Instant::now();
        self.clf.model = self.best_model;
        self.clf.model.clear_grads();
        self.busy += started.elapsed();
        Ok(TrainResult {
            classifier: self.clf,
            best_epoch: self.stopper.best_epoch(),
            history: self.history,
            stopped_early: self.stopped_early,
            wall_seconds: self.busy.as_secs_f64(),
        })
    }
}

/// Accuracy of a model on labelled data, batched like training evaluation.
pub fn accuracy(model: &impl Predictor, items: &[&LabeledImage]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("accuracy"));
    }
    let images: Vec<&Image> = items.iter().map(|i| &i.image).collect();
    let preds = model.predict(&images)?;
    let correct = preds.iter().zip(items).filter(|(p, i)| **p == i.label.index()).count();
    Ok(correct as f64 / items.len() as f64)
}

/// Result of one (architecture, fraction, seed) training.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub val_accuracy: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub arch_id: String,
    pub params: u64,
    pub fraction: DataFraction,
    pub seed: u64,
    pub outcome: std::result::Result<CellOutcome, String>,
}

/// Grid definition for the factorial run.
#[derive(Debug, Clone)]
pub struct ExperimentA<'a> {
    pub specs: &'a [ArchitectureSpec],
    pub fractions: &'a [DataFraction],
    pub seeds: &'a [u64],
    pub hp: HyperParams,
    pub cfg: TrainConfig,
    /// Worker threads running independent cells.
    pub jobs: usize,
}

/// Runs every (architecture, fraction, seed) cell. Each cell subsamples the
/// dataset by its fraction and splits it with its seed. A failing cell is
/// recorded and the remaining cells still run. Rows come back in grid order.
pub fn run_experiment_a(exp: &ExperimentA<'_>, dataset: &Dataset) -> Vec<Cell> {
    let mut grid = Vec::new();
    for spec in exp.specs {
        for &fraction in exp.fractions {
            for &seed in exp.seeds {
                grid.push((spec, fraction, seed));
            }
        }
    }
    let run_cell = |&(spec, fraction, seed): &(&ArchitectureSpec, DataFraction, u64)| -> Cell {
        let mut sized = spec.clone();
        sized.input.height = exp.cfg.resolution;
        sized.input.width = exp.cfg.resolution;
        let params = sized.count_parameters().unwrap_or(0);
        let outcome = (|| {
            let subset = subsample_stratified(dataset, fraction, seed);
            let split = stratified_split(&subset, &SplitSpec::new(seed))?;
            let cfg = TrainConfig { seed, ..exp.cfg };
            let r = train_classifier(spec, &split.train, &split.val, &exp.hp, &cfg)?;
            Ok::<_, Error>(CellOutcome {
                val_accuracy: r.best().val_acc,
                epochs: r.history.len(),
                best_epoch: r.best_epoch,
                wall_seconds: r.wall_seconds,
            })
        })()
        .map_err(|e| e.to_string());
        Cell {
            arch_id: spec.id.clone(),
            params,
            fraction,
            seed,
            outcome,
        }
    };
    let jobs = exp.jobs.clamp(1, grid.len().max(1));
    if jobs == 1 {
        return grid.iter().map(run_cell).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Cell>>> = Mutex::new(vec![None; grid.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= grid.len() {
                    break;
                }
                // Cells are single-threaded so worker timing stays comparable.
                let cell = underpass_tensor::par::with_execution(underpass_tensor::par::Execution::Sequential, || {
                    run_cell(&grid[i])
                });
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(cell);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// `arch_id,params,data_fraction,seed,val_accuracy,epochs,wall_seconds`.
/// Failed cells leave the three result columns empty.
pub fn write_experiment_a_csv(path: &Path, cells: &[Cell]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "arch_id",
        "params",
        "data_fraction",
        "seed",
        "val_accuracy",
        "epochs",
        "wall_seconds",
    ])?;
    for c in cells {
        let (acc, epochs, wall) = match &c.outcome {
            Ok(o) => (
                format!("{:.6}", o.val_accuracy),
                o.epochs.to_string(),
                format!("{:.3}", o.wall_seconds),
            ),
            Err(_) => Default::default(),
        };
        w.write_record([
            c.arch_id.clone(),
            c.params.to_string(),
            c.fraction.to_string(),
            c.seed.to_string(),
            acc,
            epochs,
            wall,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Per-epoch history as CSV.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            format!("{:.6}", h.train_loss),
            format!("{:.6}", h.train_acc),
            format!("{:.6}", h.val_loss),
            format!("{:.6}", h.val_acc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    LearningRate,
    DropoutRate,
    L2Rate,
}

impl Axis {
    pub const ORDER: [Axis; 3] = [Axis::LearningRate, Axis::DropoutRate, Axis::L2Rate];

    fn set(self, hp: &mut HyperParams, v: f64) {
        match self {
            Axis::LearningRate => hp.learning_rate = v,
            Axis::DropoutRate => hp.dropout_rate = v,
            Axis::L2Rate => hp.l2_rate = v,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::LearningRate => "learning_rate",
            Axis::DropoutRate => "dropout_rate",
            Axis::L2Rate => "l2_rate",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningGrid {
    pub learning_rate: Vec<f64>,
    pub dropout_rate: Vec<f64>,
    pub l2_rate: Vec<f64>,
}

impl Default for TuningGrid {
    /// Learning rates, dropout 0 to 0.65 in steps of 0.05, and decay rates.
    fn default() -> Self {
        Self {
            learning_rate: vec![0.00005, 0.0001, 0.0005, 0.001, 0.005, 0.01],
            dropout_rate: (0..14)
                .map(|i| i as f64 * 0.05)
                .map(|v| (v * 100.0).round() / 100.0)
                .collect(),
            l2_rate: vec![0.0, 0.0001, 0.0005, 0.001, 0.005, 0.01, 0.1],
        }
    }
}

impl TuningGrid {
    pub fn axis(&self, axis: Axis) -> &[f64] {
        match axis {
            Axis::LearningRate => &self.learning_rate,
            Axis::DropoutRate => &self.dropout_rate,
            Axis::L2Rate => &self.l2_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub axis: Axis,
    pub value: f64,
    pub hp: HyperParams,
    pub val_accuracy: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningResult {
    pub best: HyperParams,
    pub best_accuracy: f64,
    pub trace: Vec<TraceRow>,
}

/// One-factor-at-a-time search driven by an arbitrary scoring function
/// (validation accuracy of one training). Axes are scanned in
/// [`Axis::ORDER`]; an axis winner is the highest score, ties going to the
/// smaller value, and it is adopted only if it does not score below the
/// best found so far.
pub fn ofat_search(
    grid: &TuningGrid,
    start: HyperParams,
    mut score: impl FnMut(&HyperParams) -> Result<f64>,
) -> Result<TuningResult> {
    for axis in Axis::ORDER {
        if grid.axis(axis).is_empty() {
            return Err(Error::Config(format!("tuning axis {axis} is empty")));
        }
    }
    let mut current = start;
    let mut best_acc = f64::NEG_INFINITY;
    let mut trace = Vec::new();
    for axis in Axis::ORDER {
        let first_row = trace.len();
        let mut winner: Option<(f64, f64, usize)> = None;
        for &value in grid.axis(axis) {
            let mut hp = current;
            axis.set(&mut hp, value);
            let acc = score(&hp)?;
            let better = match winner {
                None => true,
                Some((wv, wa, _)) => acc > wa || (acc == wa && value < wv),
            };
            if better {
                winner = Some((value, acc, trace.len()));
            }
            trace.push(TraceRow {
                axis,
                value,
                hp,
                val_accuracy: acc,
                is_best: false,
            });
        }
        let (value, acc, row) = winner.expect("axis is non-empty");
        if acc >= best_acc {
            axis.set(&mut current, value);
            best_acc = acc;
            trace[row].is_best = true;
        } else if let Some(keep) = trace[first_row..].iter().position(|r| r.hp == current) {
            trace[first_row + keep].is_best = true;
        }
    }
    Ok(TuningResult {
        best: current,
        best_accuracy: best_acc,
        trace,
    })
}

/// [`ofat_search`] where every point trains `spec` from scratch on
/// `train` and scores it on `val`.
pub fn grid_search_ofat(
    spec: &ArchitectureSpec,
    train: &Dataset,
    val: &Dataset,
    grid: &TuningGrid,
    start: HyperParams,
    cfg: &TrainConfig,
) -> Result<TuningResult> {
    ofat_search(grid, start, |hp| {
        Ok(train_classifier(spec, train, val, hp, cfg)?.best().val_acc)
    })
}

/// `axis,value,val_accuracy,is_best`.
pub fn write_tuning_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["axis", "value", "val_accuracy", "is_best"])?;
    for r in trace {
        w.write_record([
            r.axis.to_string(),
            r.value.to_string(),
            format!("{:.6}", r.val_accuracy),
            r.is_best.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let mut s = EarlyStopping::new(3);
        let decisions: Vec<_> = (1..=4).map(|e| s.update(e, e as f64)).collect();
        assert_eq!(
            decisions,
            vec![
                StopDecision::Improved,
                StopDecision::Continue,
                StopDecision::Continue,
                StopDecision::Stop
            ]
        );
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0, 1.0]), 3);
    }

    #[test]
    fn table_grid_sizes() {
        let g = TuningGrid::default();
        assert_eq!(
            (g.learning_rate.len(), g.dropout_rate.len(), g.l2_rate.len()),
            (6, 14, 7)
        );
        assert_eq!(g.dropout_rate[9], 0.45);
        assert_eq!(*g.dropout_rate.last().unwrap(), 0.65);
    }

    #[test]
    fn ofat_scans_each_point_once() {
        let mut calls = 0;
        let r = ofat_search(&TuningGrid::default(), HyperParams::default(), |_| {
            calls += 1;
            Ok(0.5)
        })
        .unwrap();
        assert_eq!(calls, 27);
        assert_eq!(r.trace.len(), 27);
        // All ties: smallest value on every axis.
        assert_eq!(
            r.best,
            HyperParams {
                learning_rate: 0.00005,
                dropout_rate: 0.0,
                l2_rate: 0.0
            }
        );
    }

    #[test]
    fn ofat_single_point_grid() {
        let grid = TuningGrid {
            learning_rate: vec![0.002],
            dropout_rate: vec![0.3],
            l2_rate: vec![0.01],
        };
        let mut calls = 0;
        let r = ofat_search(&grid, HyperParams::default(), |_| {
            calls += 1;
            Ok(0.7)
        })
        .unwrap();
        assert_eq!(calls, 3);
        assert_eq!(
            r.best,
            HyperParams {
                learning_rate: 0.002,
                dropout_rate: 0.3,
                l2_rate: 0.01
            }
        );
    }

    #[test]
    fn ofat_uses_current_best_on_later_axes() {
        // Score peaks at lr = 0.005, dropout = 0.2, l2 = 0.001.
        let score = |hp: &HyperParams| {
            Ok(1.0 - (hp.learning_rate - 0.005).abs() - (hp.dropout_rate - 0.2).abs() - (hp.l2_rate - 0.001).abs())
        };
        let r = ofat_search(&TuningGrid::default(), HyperParams::default(), score).unwrap();
        assert_eq!(r.best.learning_rate, 0.005);
        assert_eq!(r.best.dropout_rate, 0.2);
        assert_eq!(r.best.l2_rate, 0.001);
        for row in r.trace.iter().filter(|t| t.axis == Axis::DropoutRate) {
            assert_eq!(row.hp.learning_rate, 0.005);
        }
        let winners: Vec<f64> = r.trace.iter().filter(|t| t.is_best).map(|t| t.val_accuracy).collect();
        assert_eq!(winners.len(), 3);
        assert!(winners.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn ofat_rejects_empty_axis() {
        let grid = TuningGrid {
            l2_rate: vec![],
            ..TuningGrid::default()
        };
        assert!(ofat_search(&grid, HyperParams::default(), |_| Ok(0.0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 150,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let hp = HyperParams {
            dropout_rate: 1.0,
            ..HyperParams::default()
        };
        assert!(hp.validate().is_err());
    }
}
