//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p underpass-core --test acceptance` runs everything;
//! passing criterion numbers (`-- 1 2 9`) runs a subset.

use std::cell::OnceCell;
use std::time::Instant;

use underpass_core::arch::{count_parameters, generate_family, ArchitectureSpec, TABLE_TARGETS};
use underpass_core::checkpoint::{config_digest, Checkpoint};
use underpass_core::cyclegan::{
    self, adversarial_losses, cycle_and_identity_losses, generator_objective, BoundNet, CycleGanBundle, Direction,
    GanShape, GanTrainConfig, GanTrainResult, IdentityTranslator, TapeModule, Translator,
};
use underpass_core::data::{
    build_corpus, seed_of, stratified_split, subsample_stratified, synth_scene, CorpusCounts, DataFraction, Dataset,
    Domain, Split, SplitSpec,
};
use underpass_core::evaluation::{self, ExperimentBReport, TestSetSpec, DOMAINS};
use underpass_core::training::{
    self, image_batch, train_classifier, Classifier, ExperimentA, HyperParams, TrainConfig, TrainResult, Trainer,
};
use underpass_core::Result;
use underpass_tensor::gradcheck::{all_layer_kinds, check_layer, probe_shape};
use underpass_tensor::{Tape, Tensor, Var};

const CORPUS_SEED: u64 = 7;
const SPLIT_SEED: u64 = 1;
const SIDE: usize = 64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Artifacts shared between criteria, built on first use.
#[derive(Default)]
struct Shared {
    corpus: OnceCell<Dataset>,
    split: OnceCell<Split>,
    classifier: OnceCell<TrainResult>,
    gan: OnceCell<(GanTrainResult, f64)>,
    report: OnceCell<ExperimentBReport>,
}

impl Shared {
    fn corpus(&self) -> &Dataset {
        self.corpus
            .get_or_init(|| build_corpus(&CorpusCounts::default(), CORPUS_SEED, SIDE))
    }

    fn split(&self) -> &Split {
        self.split.get_or_init(|| {
            let day = self.corpus().of_domain(Domain::Day);
            stratified_split(&day, &SplitSpec::new(SPLIT_SEED)).expect("default corpus splits")
        })
    }

    /// Arch5 at 64x64 with the default hyperparameters and budget.
    fn classifier(&self) -> &TrainResult {
        self.classifier.get_or_init(|| {
            let spec = generate_family().get("Arch5").expect("Arch5").clone();
            let cfg = TrainConfig {
                seed: 1,
                resolution: SIDE,
                ..TrainConfig::default()
            };
            let split = self.split();
            train_classifier(&spec, &split.train, &split.val, &HyperParams::default(), &cfg).expect("training runs")
        })
    }

    /// 300 day + 300 night images from their own seed, 20 epochs.
    fn gan(&self) -> &(GanTrainResult, f64) {
        self.gan.get_or_init(|| {
            let counts = CorpusCounts {
                day: [100, 100, 40, 60],
                night: [100, 100, 40, 60],
            };
            let data = build_corpus(&counts, 99, SIDE);
            let day: Vec<_> = data
                .iter()
                .filter(|i| i.domain == Domain::Day)
                .map(|i| &i.image)
                .collect();
            let night: Vec<_> = data
                .iter()
                .filter(|i| i.domain == Domain::Night)
                .map(|i| &i.image)
                .collect();
            let bundle = CycleGanBundle::new(GanShape::default(), 3).expect("bundle");
            let cfg = GanTrainConfig {
                epochs: 20,
                seed: 3,
                ..GanTrainConfig::default()
            };
            let started = Instant::now();
            let r = cyclegan::train_cyclegan(bundle, &day, &night, &cfg).expect("gan training runs");
            (r, started.elapsed().as_secs_f64())
        })
    }

    fn report(&self) -> &ExperimentBReport {
        self.report.get_or_init(|| {
            let night_pool = self.corpus().of_domain(Domain::Night);
            let bundle = &self.gan().0.bundle;
            let sets = evaluation::build_experiment_b_sets(
                &self.split().test,
                &night_pool,
                bundle,
                &TestSetSpec::defaults(),
                5,
            )
            .expect("pools are large enough");
            evaluation::run_experiment_b(&self.classifier().classifier, &sets).expect("evaluation runs")
        })
    }
}

fn parameter_parity() -> Outcome {
    let started = Instant::now();
    let family = generate_family();
    let counts = family.counts().expect("family counts");
    let mut worst = (0.0f64, String::new());
    for ((spec, &count), &target) in family.specs.iter().zip(&counts).zip(&TABLE_TARGETS) {
        let dev = (count as f64 / target as f64 - 1.0).abs();
        if dev > worst.0 {
            worst = (dev, spec.id.clone());
        }
    }
    let arch11 = counts[10] as f64;
    let ratio = counts[4] as f64 / arch11;
    let secs = started.elapsed().as_secs_f64();
    let pass = worst.0 <= 0.15 && (arch11 / 134e6 - 1.0).abs() <= 0.03 && (ratio - 0.011).abs() <= 0.003 && secs < 1.0;
    outcome(
        pass,
        format!(
            "worst deviation {:.1}% ({}), Arch11 {} ({:+.2}%), Arch5/Arch11 {ratio:.4}, {secs:.3} s",
            100.0 * worst.0,
            worst.1,
            counts[10],
            100.0 * (arch11 / 134e6 - 1.0)
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let family = generate_family();
    let mut mismatches = Vec::new();
    for spec in &family.specs {
        let closed = count_parameters(spec).expect("valid spec");
        let built = spec.build::<f32>(0).expect("model builds").param_count() as u64;
        if closed != built {
            mismatches.push(format!("{} {closed} vs {built}", spec.id));
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{} specs agree exactly", family.specs.len())
        } else {
            mismatches.join("; ")
        },
    )
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let kinds = all_layer_kinds();
    for layer in &kinds {
        for case in 0..20 {
            let a = check_layer(layer, &probe_shape(layer), 7000 + case, 1e-4).expect("layer runs");
            worst = worst.max(a.max_rel_err);
            if !a.passed {
                failures.push(format!("{layer} case {case} rel {:.2e}", a.max_rel_err));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 120.0,
        format!(
            "{} layer kinds x 20 cases, max rel err {worst:.2e}, {secs:.1} s{}",
            kinds.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; {}", failures.join(", "))
            }
        ),
    )
}

/// Width divisor bringing the first block to at most 8 filters.
fn desk_divisor(spec: &ArchitectureSpec) -> usize {
    let first = spec.conv_blocks[0].filters;
    let mut d = 1;
    while first.div_ceil(d) > 8 {
        d *= 2;
    }
    d
}

fn experiment_a_echo(shared: &Shared) -> Outcome {
    let r = shared.classifier();
    let test: Vec<_> = shared.split().test.iter().collect();
    let test_acc = training::accuracy(&r.classifier, &test).expect("evaluates");
    let a_pass = test_acc >= 0.90 && r.history.len() <= 150 && r.wall_seconds <= 900.0;
    let part_a = format!(
        "Arch5 test acc {test_acc:.4} after {} epochs (best {}), {:.0} s",
        r.history.len(),
        r.best_epoch,
        r.wall_seconds
    );

    let day32 = shared
        .corpus()
        .of_domain(Domain::Day)
        .downscaled(32)
        .expect("downscale");
    let specs: Vec<_> = generate_family()
        .specs
        .iter()
        .map(|s| s.narrowed(desk_divisor(s), 4))
        .collect();
    let fractions = [DataFraction::Quarter, DataFraction::Full];
    let seeds = [1, 2, 3];
    let exp = ExperimentA {
        specs: &specs,
        fractions: &fractions,
        seeds: &seeds,
        hp: HyperParams::default(),
        cfg: TrainConfig {
            max_epochs: 15,
            patience: 4,
            resolution: 32,
            ..TrainConfig::default()
        },
        jobs: 1,
    };
    let started = Instant::now();
    let cells = training::run_experiment_a(&exp, &day32);
    let secs = started.elapsed().as_secs_f64();
    let mut b_pass = true;
    let mut rows = Vec::new();
    for spec in &specs {
        let mean = |f: DataFraction| {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.arch_id == spec.id && c.fraction == f)
                .filter_map(|c| c.outcome.as_ref().ok().map(|o| o.val_accuracy))
                .collect();
            (accs.len() == seeds.len()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
        };
        match (mean(DataFraction::Quarter), mean(DataFraction::Full)) {
            (Some(q), Some(f)) => {
                b_pass &= f >= q;
                rows.push(format!("{} {q:.3}->{f:.3}", spec.id));
            }
            _ => {
                b_pass = false;
                rows.push(format!("{} failed", spec.id));
            }
        }
    }
    outcome(
        a_pass && b_pass,
        format!("{part_a}; factorial at 32px ({secs:.0} s): {}", rows.join(", ")),
    )
}

fn training_time_monotonicity(shared: &Shared) -> Outcome {
    let split = shared.split();
    let family = generate_family();
    let cfg = TrainConfig {
        max_epochs: 8,
        patience: 7,
        seed: 11,
        resolution: SIDE,
        ..TrainConfig::default()
    };
    let ids = ["Arch1", "Arch2", "Arch3", "Arch4"];
    // Load on a shared core drifts by tens of percent over seconds, more
    // than the cost gap between neighbouring members. The four trainings
    // take turns one batch at a time so drift hits them equally; each
    // counts only its own batches.
    let mut trainers: Vec<_> = ids
        .iter()
        .map(|id| {
            let spec = family.get(id).expect("family member");
            Trainer::new(spec, &split.train, &split.val, &HyperParams::default(), &cfg).expect("valid setup")
        })
        .collect();
    let mut running = vec![true; trainers.len()];
    while running.iter().any(|&r| r) {
        for (t, r) in trainers.iter_mut().zip(&mut running) {
            if *r {
                *r = t.step().expect("trains");
            }
        }
    }
    let results: Vec<TrainResult> = trainers.into_iter().map(|t| t.finish().expect("trained")).collect();
    let pass = results.windows(2).all(|w| w[1].wall_seconds >= w[0].wall_seconds)
        && results.iter().all(|r| r.history.len() == cfg.max_epochs);
    outcome(
        pass,
        ids.iter()
            .zip(&results)
            .map(|(id, r)| format!("{id} {:.2} s", r.wall_seconds))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn cyclegan_recovery(shared: &Shared) -> Outcome {
    let (gan, secs) = shared.gan();
    let night = shared.corpus().of_domain(Domain::Night);
    let (mut before, mut after) = (0.0, 0.0);
    for item in night.iter() {
        let seed = seed_of(&item.source_id).expect("synthetic id");
        let twin = synth_scene(item.label, Domain::Day, seed).image;
        before += item.image.l1_distance(&twin).expect("same size");
        let out = cyclegan::transform(&gan.bundle, &item.image, Direction::NightToDay).expect("transforms");
        after += out.l1_distance(&twin).expect("same size");
    }
    let reduction = 1.0 - after / before;
    let report = shared.report();
    let acc = |d: Domain| report.total(d).expect("total row").accuracy();
    let (first, last) = (gan.history[0], *gan.history.last().expect("epochs"));
    let c_pass = last.identity_a < first.identity_a
        && last.identity_b < first.identity_b
        && last.cycle_forward < first.cycle_forward;
    let pass = reduction >= 0.5 && acc(Domain::Night2Day) > acc(Domain::Night) && c_pass && *secs <= 2700.0;
    outcome(
        pass,
        format!(
            "L1 to day twin {:.4} -> {:.4} ({:.1}% lower) over {} night images; union accuracy night {:.4}, night2day {:.4}, day {:.4}; \
             epoch 1 -> {}: forward cycle {:.4} -> {:.4}, identity A {:.4} -> {:.4}, identity B {:.4} -> {:.4}; trained in {secs:.0} s",
            before / night.len() as f64,
            after / night.len() as f64,
            100.0 * reduction,
            night.len(),
            acc(Domain::Night),
            acc(Domain::Night2Day),
            acc(Domain::Day),
            last.epoch,
            first.cycle_forward,
            last.cycle_forward,
            first.identity_a,
            last.identity_a,
            first.identity_b,
            last.identity_b,
        ),
    )
}

fn schema_fidelity(shared: &Shared) -> Outcome {
    let counts: Vec<_> = TestSetSpec::defaults()
        .iter()
        .map(|s| (s.name.clone(), DOMAINS.map(|d| s.count(d))))
        .collect();
    let expected = [
        ("PedSet", [180, 106, 106]),
        ("BikeSet", [50, 60, 60]),
        ("EmpSet", [180, 106, 106]),
    ];
    let table_ok = counts.iter().zip(&expected).all(|(a, b)| a.0 == b.0 && a.1 == b.1);
    let report = shared.report();
    let grid_ok = expected.iter().all(|(name, n)| {
        DOMAINS
            .iter()
            .zip(n)
            .all(|(&d, &n)| report.get(name, d).is_some_and(|r| r.n == n as u64))
    });
    let totals_ok = DOMAINS.iter().all(|&d| report.total(d).is_some());
    let confusion_ok = report.confusion.len() == 3
        && report
            .confusion
            .iter()
            .all(|(d, cm)| cm.total() == report.total(*d).map_or(0, |r| r.n));
    let rows = report.rows.len();
    outcome(
        table_ok && grid_ok && totals_ok && confusion_ok && rows == 12,
        format!(
            "{rows} rows (9 cells + 3 totals), {} confusion matrices",
            report.confusion.len()
        ),
    )
}

fn strip_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism_and_persistence(shared: &Shared) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = |n: &str| dir.path().join(n);
    let read = |n: &str| std::fs::read(path(n)).expect("written");
    let mut notes = Vec::new();
    let mut pass = true;

    // Experiment A grid twice on a small slice.
    let day16 = subsample_stratified(&shared.corpus().of_domain(Domain::Day), DataFraction::Quarter, 4)
        .downscaled(16)
        .expect("downscale");
    let specs = [generate_family().get("Arch1").expect("Arch1").clone()];
    let exp = ExperimentA {
        specs: &specs,
        fractions: &[DataFraction::Half, DataFraction::Full],
        seeds: &[1, 2],
        hp: HyperParams::default(),
        cfg: TrainConfig {
            max_epochs: 3,
            patience: 2,
            resolution: 16,
            ..TrainConfig::default()
        },
        jobs: 2,
    };
    for name in ["a1.csv", "a2.csv"] {
        training::write_experiment_a_csv(&path(name), &training::run_experiment_a(&exp, &day16)).expect("csv");
    }
    let text = |n: &str| String::from_utf8(read(n)).expect("utf8");
    let a_same = strip_wall(&text("a1.csv")) == strip_wall(&text("a2.csv"));
    pass &= a_same;
    notes.push(format!("experiment_a (wall time excluded) identical: {a_same}"));

    // Training histories and GAN histories byte for byte.
    let split = stratified_split(&day16, &SplitSpec::new(3)).expect("split");
    let spec = &specs[0];
    for name in ["h1.csv", "h2.csv"] {
        let r = train_classifier(spec, &split.train, &split.val, &exp.hp, &exp.cfg).expect("trains");
        training::write_history_csv(&path(name), &r.history).expect("csv");
    }
    let h_same = read("h1.csv") == read("h2.csv");
    let small_gan = GanShape {
        resolution: 16,
        gen_width: 2,
        disc_width: 2,
        ..GanShape::default()
    };
    let night16 = shared
        .corpus()
        .of_domain(Domain::Night)
        .downscaled(16)
        .expect("downscale");
    let day_imgs: Vec<_> = split.test.iter().take(8).map(|i| &i.image).collect();
    let night_imgs: Vec<_> = night16.iter().take(8).map(|i| &i.image).collect();
    for name in ["g1.csv", "g2.csv"] {
        let cfg = GanTrainConfig {
            epochs: 2,
            seed: 8,
            ..GanTrainConfig::default()
        };
        let r = cyclegan::train_cyclegan(
            CycleGanBundle::new(small_gan, 8).expect("bundle"),
            &day_imgs,
            &night_imgs,
            &cfg,
        )
        .expect("trains");
        cyclegan::write_history_csv(&path(name), &r.history).expect("csv");
    }
    let g_same = read("g1.csv") == read("g2.csv");
    pass &= h_same && g_same;
    notes.push(format!(
        "history identical: {h_same}, cyclegan_history identical: {g_same}"
    ));

    // Experiment B report files twice from the same model and sets.
    let r = shared.classifier();
    let night_pool = shared.corpus().of_domain(Domain::Night);
    let reports: Vec<_> = ["b1", "b2"]
        .iter()
        .map(|sub| {
            let out = path(sub);
            std::fs::create_dir_all(&out).expect("mkdir");
            let sets = evaluation::build_experiment_b_sets(
                &shared.split().test,
                &night_pool,
                &IdentityTranslator,
                &TestSetSpec::defaults(),
                5,
            )
            .expect("sets");
            let rep = evaluation::run_experiment_b(&r.classifier, &sets).expect("report");
            evaluation::write_report(&out, &rep).expect("csv");
            [
                "experiment_b.csv",
                "fig7_data.csv",
                "confusion_day.csv",
                "confusion_night.csv",
                "confusion_night2day.csv",
            ]
            .map(|f| std::fs::read(out.join(f)).expect("written"))
        })
        .collect();
    let b_same = reports[0] == reports[1];
    pass &= b_same;
    notes.push(format!("experiment_b csvs identical: {b_same}"));

    // Checkpoint round trip: identical probabilities and translations.
    let digest = config_digest("acceptance");
    r.classifier.save(&path("m.ckpt"), 1, digest).expect("save");
    let loaded = Classifier::load(&path("m.ckpt")).expect("load");
    let test: Vec<_> = shared.split().test.iter().map(|i| &i.image).collect();
    let bits = |c: &Classifier| -> Vec<u32> {
        c.probabilities(&test)
            .expect("probabilities")
            .into_iter()
            .flatten()
            .map(f32::to_bits)
            .collect()
    };
    let clf_same = bits(&r.classifier) == bits(&loaded);
    let bundle = &shared.gan().0.bundle;
    bundle.save(&path("g.ckpt"), 3, digest).expect("save");
    let back = CycleGanBundle::load(&path("g.ckpt")).expect("load");
    let nights: Vec<_> = night_pool.iter().take(16).map(|i| &i.image).collect();
    let t1 = bundle.night_to_day(&nights).expect("transform");
    let t2 = back.night_to_day(&nights).expect("transform");
    let gan_same = t1 == t2;
    pass &= clf_same && gan_same;
    notes.push(format!(
        "round trip bit-identical: classifier {clf_same}, bundle {gan_same}"
    ));

    // Corruption: every byte of a small checkpoint, sampled bytes of the large one.
    let tiny = Classifier::new(spec.clone(), 0)
        .expect("model")
        .to_checkpoint(0, digest)
        .to_bytes();
    let big = read("m.ckpt");
    let mut undetected = 0;
    let mut probes = 0;
    let positions = (0..tiny.len()).map(|i| (true, i)).chain(
        (0..big.len())
            .step_by(big.len() / 400 + 1)
            .chain(0..120)
            .chain(big.len() - 64..big.len())
            .map(|i| (false, i)),
    );
    for (small, i) in positions {
        let mut bytes = if small { tiny.clone() } else { big.clone() };
        bytes[i] ^= 0x01;
        probes += 1;
        if Checkpoint::from_bytes(&bytes).is_ok() {
            undetected += 1;
        }
    }
    pass &= undetected == 0;
    notes.push(format!("{undetected} of {probes} single-byte corruptions undetected"));
    outcome(pass, notes.join("; "))
}

struct Identity;

impl TapeModule<f64> for Identity {
    fn forward(&self, _: &mut Tape<f64>, x: Var) -> Result<Var> {
        Ok(x)
    }
}

struct ConstantScore(f64);

impl TapeModule<f64> for ConstantScore {
    fn forward(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        Ok(tape.constant(Tensor::full(vec![n, 1, 8, 8], self.0)))
    }
}

fn loss_structure(shared: &Shared) -> Outcome {
    let items: Vec<_> = shared
        .corpus()
        .iter()
        .filter(|i| i.domain == Domain::Night)
        .take(2)
        .collect();
    let days: Vec<_> = shared.split().test.iter().take(2).collect();
    let a_t = image_batch(&items.iter().map(|i| &i.image).collect::<Vec<_>>())
        .expect("batch")
        .cast::<f64>();
    let b_t = image_batch(&days.iter().map(|i| &i.image).collect::<Vec<_>>())
        .expect("batch")
        .cast::<f64>();

    let mut tape = Tape::<f64>::new();
    let (a, b) = (tape.constant(a_t.clone()), tape.constant(b_t.clone()));
    let t = cycle_and_identity_losses(&mut tape, &Identity, &Identity, a, b).expect("losses");
    let recon: f64 = [t.forward_cycle, t.backward_cycle, t.identity_a, t.identity_b]
        .iter()
        .map(|&v| tape.value(v).data()[0])
        .sum();
    let (d, g) = adversarial_losses(&mut tape, &ConstantScore(0.5), b, a).expect("losses");
    let (dv, gv) = (tape.value(d).data()[0], tape.value(g).data()[0]);

    let bundle = CycleGanBundle::<f32>::new(GanShape::default(), 21)
        .expect("bundle")
        .cast::<f64>();
    let mut tape = Tape::<f64>::new();
    let nets = [&bundle.gen_ab, &bundle.gen_ba, &bundle.disc_a, &bundle.disc_b];
    let bounds: Vec<_> = nets.iter().map(|n| n.bind(&mut tape, false)).collect();
    let bound: Vec<_> = nets
        .iter()
        .zip(&bounds)
        .map(|(&net, bound)| BoundNet { net, bound })
        .collect();
    let (a, b) = (tape.constant(a_t), tape.constant(b_t));
    let (lc, li) = (10.0, 5.0);
    let t =
        generator_objective(&mut tape, [&bound[0], &bound[1], &bound[2], &bound[3]], a, b, lc, li).expect("objective");
    let v = |x: Var| tape.value(x).data()[0];
    let sum = v(t.adv_ab)
        + v(t.adv_ba)
        + lc * (v(t.cycle.forward_cycle) + v(t.cycle.backward_cycle))
        + li * (v(t.cycle.identity_a) + v(t.cycle.identity_b));
    let gap = (v(t.total) - sum).abs();
    outcome(
        recon == 0.0 && dv == 0.5 && gv == 0.25 && gap <= 1e-6,
        format!("identity reconstruction {recon}, constant-0.5 (disc, gen) = ({dv}, {gv}), total minus components {gap:.2e}"),
    )
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let shared = Shared::default();
    type Criterion<'a> = (&'a str, &'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("1", "parameter parity", Box::new(parameter_parity)),
        ("2", "oracle equivalence", Box::new(oracle_equivalence)),
        ("3", "gradient suite", Box::new(gradient_suite)),
        ("4", "desk-scale experiment A", Box::new(|| experiment_a_echo(&shared))),
        (
            "5",
            "training-time monotonicity",
            Box::new(|| training_time_monotonicity(&shared)),
        ),
        ("6", "night-to-day recovery", Box::new(|| cyclegan_recovery(&shared))),
        ("7", "experiment B schema", Box::new(|| schema_fidelity(&shared))),
        (
            "8",
            "determinism and persistence",
            Box::new(|| determinism_and_persistence(&shared)),
        ),
        ("9", "loss structure", Box::new(|| loss_structure(&shared))),
    ];
    let mut failed = 0;
    for (id, name, run) in &criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let started = Instant::now();
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "{} {id} {name} [{:.1} s]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
