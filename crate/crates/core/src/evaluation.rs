//! Accuracy, confusion matrices and the day / night / night2day comparison.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cyclegan::Translator;
use crate::data::{ClassLabel, Dataset, Domain, LabeledImage, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::training::{derive_seed, Predictor};

/// Rows are true classes, columns predicted classes, both in
/// [`ClassLabel::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    /// Adds another matrix's counts; order does not matter.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, v) in row.iter_mut().zip(o) {
                *c += v;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    /// Row-normalised diagonal; `None` for classes without samples.
    pub fn per_class_accuracy(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|c| match self.row_total(c) {
            0 => None,
            n => Some(self.counts[c][c] as f64 / n as f64),
        })
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>12}", "")?;
        for c in ClassLabel::ALL {
            write!(f, "{:>12}", c.name())?;
        }
        writeln!(f)?;
        for (c, row) in ClassLabel::ALL.iter().zip(&self.counts) {
            write!(f, "{:>12}", c.name())?;
            for v in row {
                write!(f, "{v:>12}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
}

/// Top-1 evaluation of a model over labelled images.
pub fn evaluate(model: &dyn Predictor, items: &[&LabeledImage]) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let mut confusion = ConfusionMatrix::default();
    for chunk in items.chunks(256) {
        let images: Vec<_> = chunk.iter().map(|i| &i.image).collect();
        for (item, p) in chunk.iter().zip(model.predict(&images)?) {
            confusion.record(item.label.index(), p);
        }
    }
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        per_class: confusion.per_class_accuracy(),
        confusion,
    })
}

/// How many images of one class a test set draws from each domain. The
/// night2day partition reuses the night images, so it has the night count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSetSpec {
    pub name: String,
    pub label: ClassLabel,
    pub day: usize,
    pub night: usize,
}

impl TestSetSpec {
    pub fn new(name: &str, label: ClassLabel, day: usize, night: usize) -> Self {
        Self {
            name: name.into(),
            label,
            day,
            night,
        }
    }

    pub fn count(&self, domain: Domain) -> usize {
        match domain {
            Domain::Day => self.day,
            Domain::Night | Domain::Night2Day => self.night,
        }
    }

    pub fn defaults() -> Vec<TestSetSpec> {
        vec![
            TestSetSpec::new("PedSet", ClassLabel::Pedestrian, 180, 106),
            TestSetSpec::new("BikeSet", ClassLabel::Bicyclist, 50, 60),
            TestSetSpec::new("EmpSet", ClassLabel::Empty, 180, 106),
        ]
    }
}

pub const DOMAINS: [Domain; 3] = [Domain::Day, Domain::Night, Domain::Night2Day];

#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub spec: TestSetSpec,
    pub day: Vec<LabeledImage>,
    pub night: Vec<LabeledImage>,
    pub night2day: Vec<LabeledImage>,
}

impl TestSet {
    pub fn partition(&self, domain: Domain) -> &[LabeledImage] {
        match domain {
            Domain::Day => &self.day,
            Domain::Night => &self.night,
            Domain::Night2Day => &self.night2day,
        }
    }
}

fn sample(pool: &Dataset, label: ClassLabel, domain: Domain, need: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    let mut candidates: Vec<&LabeledImage> = pool.iter().filter(|i| i.label == label && i.domain == domain).collect();
    if candidates.len() < need {
        return Err(Error::InsufficientPool {
            class: label.name(),
            domain: domain.name(),
            need,
            have: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(candidates[..need].iter().map(|&i| i.clone()).collect())
}

/// Draws each test set from the pools and translates its night images.
pub fn build_experiment_b_sets(
    day_pool: &Dataset,
    night_pool: &Dataset,
    translator: &dyn Translator,
    specs: &[TestSetSpec],
    seed: u64,
) -> Result<Vec<TestSet>> {
    let mut sets = Vec::with_capacity(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        let day = sample(
            day_pool,
            spec.label,
            Domain::Day,
            spec.day,
            derive_seed(&[seed, k as u64, 0]),
        )?;
        let night = sample(
            night_pool,
            spec.label,
            Domain::Night,
            spec.night,
            derive_seed(&[seed, k as u64, 1]),
        )?;
        let sources: Vec<_> = night.iter().map(|i| &i.image).collect();
        let translated = if sources.is_empty() {
            Vec::new()
        } else {
            translator.night_to_day(&sources)?
        };
        let night2day = night
            .iter()
            .zip(translated)
            .map(|(n, image)| LabeledImage {
                image,
                label: n.label,
                domain: Domain::Night2Day,
                source_id: n.source_id.clone(),
            })
            .collect();
        sets.push(TestSet {
            spec: spec.clone(),
            day,
            night,
            night2day,
        });
    }
    Ok(sets)
}

pub const TOTAL_ROW: &str = "Total";

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub test_set: String,
    pub domain: Domain,
    pub n: u64,
    pub correct: u64,
}

impl GridRow {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

/// One row per (set, domain), then one total row per domain, plus the
/// confusion matrix of each domain over the union of all sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentBReport {
    pub rows: Vec<GridRow>,
    pub confusion: Vec<(Domain, ConfusionMatrix)>,
}

impl ExperimentBReport {
    pub fn get(&self, test_set: &str, domain: Domain) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.test_set == test_set && r.domain == domain)
    }

    pub fn total(&self, domain: Domain) -> Option<&GridRow> {
        self.get(TOTAL_ROW, domain)
    }
}

pub fn run_experiment_b(model: &dyn Predictor, sets: &[TestSet]) -> Result<ExperimentBReport> {
    let mut rows = Vec::with_capacity(sets.len() * DOMAINS.len() + DOMAINS.len());
    let mut union = [ConfusionMatrix::default(); 3];
    for set in sets {
        for (d, &domain) in DOMAINS.iter().enumerate() {
            let items: Vec<_> = set.partition(domain).iter().collect();
            let cm = if items.is_empty() {
                ConfusionMatrix::default()
            } else {
                evaluate(model, &items)?.confusion
            };
            union[d].merge(&cm);
            rows.push(GridRow {
                test_set: set.spec.name.clone(),
                domain,
                n: cm.total(),
                correct: cm.correct(),
            });
        }
    }
    for (cm, &domain) in union.iter().zip(&DOMAINS) {
        rows.push(GridRow {
            test_set: TOTAL_ROW.into(),
            domain,
            n: cm.total(),
            correct: cm.correct(),
        });
    }
    Ok(ExperimentBReport {
        rows,
        confusion: DOMAINS.iter().copied().zip(union).collect(),
    })
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// `test_set,domain,n,accuracy`
pub fn write_experiment_b_csv(path: &Path, report: &ExperimentBReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["test_set", "domain", "n", "accuracy"])?;
    for r in &report.rows {
        w.write_record([
            r.test_set.clone(),
            r.domain.name().to_string(),
            r.n.to_string(),
            format!("{:.6}", r.accuracy()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// 4x4 grid with class names along both axes.
pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(ClassLabel::ALL.iter().map(|c| c.name().to_string()));
    w.write_record(&header)?;
    for (c, row) in ClassLabel::ALL.iter().zip(&cm.counts) {
        let mut rec = vec![c.name().to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long format for grouped bar charts: one bar per (group, domain).
pub fn write_fig7_csv(path: &Path, report: &ExperimentBReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["group", "domain", "accuracy_percent", "correct", "n"])?;
    for r in &report.rows {
        w.write_record([
            r.test_set.clone(),
            r.domain.name().to_string(),
            format!("{:.2}", 100.0 * r.accuracy()),
            r.correct.to_string(),
            r.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `experiment_b.csv`, `fig7_data.csv` and one `confusion_<domain>.csv` per domain.
pub fn write_report(dir: &Path, report: &ExperimentBReport) -> Result<()> {
    write_experiment_b_csv(&dir.join("experiment_b.csv"), report)?;
    write_fig7_csv(&dir.join("fig7_data.csv"), report)?;
    for (domain, cm) in &report.confusion {
        write_confusion_csv(&dir.join(format!("confusion_{}.csv", domain.name())), cm)?;
    }
    Ok(())
}

/// Per-class accuracy table: `class,n,accuracy` plus an `all` row.
pub fn write_class_report_csv(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["class", "n", "accuracy"])?;
    for (c, acc) in ClassLabel::ALL.iter().zip(eval.per_class) {
        let n = eval.confusion.row_total(c.index());
        let acc = acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        w.write_record([c.name().to_string(), n.to_string(), acc])?;
    }
    w.write_record([
        "all".to_string(),
        eval.confusion.total().to_string(),
        format!("{:.6}", eval.accuracy),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cyclegan::IdentityTranslator;
    use crate::data::Image;

    /// Reads the class back from a pixel value planted by `item`.
    struct Oracle;

    impl Predictor for Oracle {
        fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
            Ok(images.iter().map(|i| (i.pixels()[0] * 10.0).round() as usize).collect())
        }
    }

    struct Always(usize);

    impl Predictor for Always {
        fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
            Ok(vec![self.0; images.len()])
        }
    }

    /// Correct on day images (bright), wrong on everything else.
    struct DayOnly;

    impl Predictor for DayOnly {
        fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
            Ok(images
                .iter()
                .map(|i| {
                    let class = (i.pixels()[0] * 10.0).round() as usize;
                    if i.pixels()[1] > 0.5 {
                        class
                    } else {
                        (class + 1) % NUM_CLASSES
                    }
                })
                .collect())
        }
    }

    fn item(label: ClassLabel, domain: Domain, k: usize) -> LabeledImage {
        let mut px = vec![0.0; 12];
        px[0] = label.index() as f32 / 10.0;
        px[1] = if domain == Domain::Day { 0.9 } else { 0.1 };
        LabeledImage {
            image: Image::new(2, 2, px).unwrap(),
            label,
            domain,
            source_id: format!("{}_{domain:?}_{k:04}", label.name()),
        }
    }

    fn pools() -> (Dataset, Dataset) {
        let day = ClassLabel::ALL
            .iter()
            .flat_map(|&c| (0..200).map(move |k| item(c, Domain::Day, k)))
            .collect();
        let night = ClassLabel::ALL
            .iter()
            .flat_map(|&c| (0..120).map(move |k| item(c, Domain::Night, k)))
            .collect();
        (day, night)
    }

    fn balanced() -> Vec<LabeledImage> {
        ClassLabel::ALL
            .iter()
            .flat_map(|&c| (0..5).map(move |k| item(c, Domain::Day, k)))
            .collect()
    }

    #[test]
    fn perfect_model_gives_diagonal() {
        let items = balanced();
        let refs: Vec<_> = items.iter().collect();
        let e = evaluate(&Oracle, &refs).unwrap();
        assert_eq!(e.accuracy, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(e.confusion.counts[i][j], if i == j { 5 } else { 0 });
            }
        }
        assert!(e.per_class.iter().all(|a| *a == Some(1.0)));
    }

    #[test]
    fn constant_model_fills_one_column() {
        let items = balanced();
        let refs: Vec<_> = items.iter().collect();
        let e = evaluate(&Always(0), &refs).unwrap();
        assert_eq!(e.accuracy, 0.25);
        assert!(e.confusion.counts.iter().all(|row| row == &[5, 0, 0, 0]));
        assert_eq!(e.per_class, [Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
        assert_eq!(e.confusion.total(), 20);
    }

    #[test]
    fn default_specs_match_the_table() {
        let counts: Vec<_> = TestSetSpec::defaults()
            .iter()
            .map(|s| (s.name.clone(), DOMAINS.map(|d| s.count(d))))
            .collect();
        assert_eq!(
            counts,
            vec![
                ("PedSet".to_string(), [180, 106, 106]),
                ("BikeSet".to_string(), [50, 60, 60]),
                ("EmpSet".to_string(), [180, 106, 106]),
            ]
        );
    }

    #[test]
    fn sets_have_linked_night_partitions() {
        let (day, night) = pools();
        let sets = build_experiment_b_sets(&day, &night, &IdentityTranslator, &TestSetSpec::defaults(), 3).unwrap();
        for s in &sets {
            assert_eq!(s.day.len(), s.spec.day);
            assert_eq!(s.night.len(), s.night2day.len());
            for (n, t) in s.night.iter().zip(&s.night2day) {
                assert_eq!(n.source_id, t.source_id);
                assert_eq!(t.domain, Domain::Night2Day);
            }
            assert!(s.day.iter().all(|i| i.label == s.spec.label));
        }
        let again = build_experiment_b_sets(&day, &night, &IdentityTranslator, &TestSetSpec::defaults(), 3).unwrap();
        assert_eq!(sets, again);
    }

    #[test]
    fn short_pool_names_class_and_domain() {
        let (day, night) = pools();
        let night = night.filter(|i| i.label != ClassLabel::Bicyclist || i.source_id.as_str() < "bicyclist_Night_0010");
        let err = build_experiment_b_sets(&day, &night, &IdentityTranslator, &TestSetSpec::defaults(), 0).unwrap_err();
        match err {
            Error::InsufficientPool {
                class,
                domain,
                need,
                have,
            } => assert_eq!((class, domain, need, have), ("bicyclist", "night", 60, 10)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn report_shape_and_totals() {
        let (day, night) = pools();
        let sets = build_experiment_b_sets(&day, &night, &IdentityTranslator, &TestSetSpec::defaults(), 1).unwrap();
        let report = run_experiment_b(&DayOnly, &sets).unwrap();
        assert_eq!(report.rows.len(), 12);
        assert_eq!(report.confusion.len(), 3);
        assert_eq!(report.total(Domain::Day).unwrap().accuracy(), 1.0);
        assert_eq!(report.total(Domain::Night).unwrap().accuracy(), 0.0);
        assert_eq!(report.total(Domain::Night2Day).unwrap().n, 272);
        // identity translation: night2day is exactly night
        for set in ["PedSet", "BikeSet", "EmpSet"] {
            assert_eq!(
                report.get(set, Domain::Night).unwrap().correct,
                report.get(set, Domain::Night2Day).unwrap().correct
            );
        }
        let perfect = run_experiment_b(&Oracle, &sets).unwrap();
        assert!(perfect.rows.iter().all(|r| r.accuracy() == 1.0));
    }

    #[test]
    fn total_is_pooled_not_averaged() {
        let rows = [(10, 10), (90, 0)];
        let mut total = ConfusionMatrix::default();
        for (n, correct) in rows {
            let mut cm = ConfusionMatrix::default();
            (0..correct).for_each(|_| cm.record(1, 1));
            (correct..n).for_each(|_| cm.record(1, 0));
            total.merge(&cm);
        }
        assert_eq!(total.accuracy(), 0.1);
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let (day, night) = pools();
        let sets = build_experiment_b_sets(&day, &night, &IdentityTranslator, &TestSetSpec::defaults(), 1).unwrap();
        let report = run_experiment_b(&DayOnly, &sets).unwrap();
        write_report(dir.path(), &report).unwrap();
        let grid = std::fs::read_to_string(dir.path().join("experiment_b.csv")).unwrap();
        assert_eq!(grid.lines().count(), 13);
        assert!(grid.starts_with("test_set,domain,n,accuracy\nPedSet,day,180,1.000000\n"));
        let cm = std::fs::read_to_string(dir.path().join("confusion_night.csv")).unwrap();
        assert_eq!(
            cm.lines().next().unwrap(),
            "true\\predicted,empty,pedestrian,dog_walker,bicyclist"
        );
        assert_eq!(cm.lines().count(), 5);
    }
}
