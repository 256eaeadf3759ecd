mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use underpass_core::arch::{generate_family, ArchitectureSpec, Resolution};
use underpass_core::checkpoint::config_digest;
use underpass_core::cyclegan::{
    self, CycleGanBundle, Direction, GanShape, GanTrainConfig, IdentityTranslator, Translator,
};
use underpass_core::data::{
    build_corpus, load_corpus, load_png, save_corpus, save_png, stratified_split, write_manifest, CorpusCounts,
    DataFraction, Dataset, Domain, ManifestRow, SplitSpec, MANIFEST,
};
use underpass_core::evaluation::{self, TestSetSpec};
use underpass_core::training::{self, Classifier, ExperimentA, TuningGrid};
use underpass_core::{Category, Error, Result};

use config::{RunConfig, RESOLVED_NAME};

#[derive(Parser)]
#[command(
    name = "underpass",
    version,
    about = "Underpass classifier and night-to-day experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Flags override the config file.
#[derive(Args, Debug)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    l2_rate: Option<f64>,
    #[arg(long)]
    lambda_cycle: Option<f64>,
    #[arg(long)]
    lambda_identity: Option<f64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ArchArgs {
    /// Family member id, e.g. Arch5.
    #[arg(long, conflicts_with = "arch_file")]
    arch: Option<String>,
    /// Architecture in text form.
    #[arg(long)]
    arch_file: Option<PathBuf>,
    /// Divide every width by this factor, rounding up and keeping at least 4.
    #[arg(long)]
    narrow: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus into out_dir.
    GenData {
        /// Per-class image counts: 4 values for day only, or 8 for day then night.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
    },
    /// Assign train/val/test to the day images of data_root's manifest.
    Split {
        #[command(flatten)]
        common: Common,
    },
    /// Train one classifier on the train/val split.
    Train {
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        common: Common,
    },
    /// One-factor-at-a-time hyperparameter search.
    Tune {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, value_delimiter = ',')]
        learning_rates: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        dropout_rates: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        l2_rates: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Architecture x data fraction x seed factorial.
    Family {
        /// Comma-separated family ids; all eleven by default.
        #[arg(long, value_delimiter = ',')]
        archs: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Width divisor applied to every architecture.
        #[arg(long)]
        narrow: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train the night/day translation networks on every image in data_root.
    GanTrain {
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        gen_width: usize,
        #[arg(long, default_value_t = 8)]
        disc_width: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Translate PNG images with a trained bundle.
    Transform {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PNG file or a directory of PNG files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = DirectionArg::NightToDay)]
        direction: DirectionArg,
        #[command(flatten)]
        common: Common,
    },
    /// Per-class accuracy and confusion matrix on the test split.
    EvalA {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Day / night / night2day accuracy on the three test sets.
    EvalB {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Translation bundle; night images pass through unchanged without one.
        #[arg(long)]
        gan_checkpoint: Option<PathBuf>,
        /// Test sets as `name:class:day:night`, comma-separated; the three
        /// standard sets by default.
        #[arg(long, value_delimiter = ',')]
        test_sets: Option<Vec<String>>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the parameter count of an architecture.
    CountParams {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    #[value(name = "night2day")]
    NightToDay,
    #[value(name = "day2night")]
    DayToNight,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    macro_rules! over {
        ($($field:ident),*) => {$(
            if let Some(v) = &common.$field {
                cfg.$field = v.clone();
            }
        )*};
    }
    over!(
        seed,
        resolution,
        batch_size,
        max_epochs,
        patience,
        learning_rate,
        dropout_rate,
        l2_rate,
        lambda_cycle,
        lambda_identity,
        data_root,
        out_dir
    );
    Ok(cfg)
}

/// Creates out_dir and writes the resolved config plus the command line.
fn prepare(cfg: &RunConfig) -> Result<[u8; 32]> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let text = cfg.to_text();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let body = format!("# underpass {}\n{text}", args.join(" "));
    let path = cfg.out_dir.join(RESOLVED_NAME);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(config_digest(&text))
}

fn select_arch(args: &ArchArgs) -> Result<ArchitectureSpec> {
    let spec = match (&args.arch, &args.arch_file) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse::<ArchitectureSpec>()?
        }
        (Some(id), None) => generate_family()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown architecture `{id}`")))?,
        (None, None) => return Err(Error::Config("one of --arch or --arch-file is required".into())),
    };
    Ok(match args.narrow {
        Some(0) => return Err(Error::Config("--narrow must be >= 1".into())),
        Some(d) => spec.narrowed(d, 4),
        None => spec,
    })
}

/// Loads data_root, downscaling if the corpus is larger than `side`.
fn load_data(cfg: &RunConfig) -> Result<(Dataset, Vec<ManifestRow>)> {
    let (data, rows) = load_corpus(&cfg.data_root)?;
    match data.resolution() {
        Some((h, w)) if (h, w) != (cfg.resolution, cfg.resolution) => Ok((data.downscaled(cfg.resolution)?, rows)),
        _ => Ok((data, rows)),
    }
}

fn split_part(data: &Dataset, rows: &[ManifestRow], part: &str) -> Result<Dataset> {
    let set: Dataset = data
        .iter()
        .zip(rows)
        .filter(|(item, row)| item.domain == Domain::Day && row.split == part)
        .map(|(item, _)| item.clone())
        .collect();
    if set.is_empty() {
        return Err(Error::Data(format!(
            "no day images in split `{part}`; run `underpass split` first"
        )));
    }
    Ok(set)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { counts, common } => {
            let cfg = resolve(&common)?;
            prepare(&cfg)?;
            let counts = match counts.as_deref() {
                None => CorpusCounts::default(),
                Some([a, b, c, d]) => CorpusCounts {
                    day: [*a, *b, *c, *d],
                    night: [0; 4],
                },
                Some([a, b, c, d, e, f, g, h]) => CorpusCounts {
                    day: [*a, *b, *c, *d],
                    night: [*e, *f, *g, *h],
                },
                Some(other) => {
                    return Err(Error::Config(format!(
                        "--counts takes 4 or 8 values, got {}",
                        other.len()
                    )))
                }
            };
            let data = build_corpus(&counts, cfg.seed, cfg.resolution);
            let rows = save_corpus(&data, &cfg.out_dir, |_| String::new())?;
            println!("wrote {} images to {}", rows.len(), cfg.out_dir.display());
        }
        Command::Split { common } => {
            let cfg = resolve(&common)?;
            prepare(&cfg)?;
            let (data, mut rows) = load_corpus(&cfg.data_root)?;
            let day = data.of_domain(Domain::Day);
            let split = stratified_split(&day, &SplitSpec::new(cfg.seed))?;
            let mut part_of = std::collections::HashMap::new();
            for (name, set) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
                for item in set.iter() {
                    part_of.insert(item.source_id.clone(), name);
                }
            }
            for row in &mut rows {
                row.split = match row.domain {
                    Domain::Day => part_of.get(&row.source_id).copied().unwrap_or("").to_string(),
                    _ => "night".to_string(),
                };
            }
            write_manifest(&cfg.data_root.join(MANIFEST), &rows)?;
            write_manifest(&cfg.out_dir.join(MANIFEST), &rows)?;
            println!(
                "train {} val {} test {}",
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
        }
        Command::Train { arch, common } => {
            let cfg = resolve(&common)?;
            let digest = prepare(&cfg)?;
            let spec = select_arch(&arch)?;
            let (data, rows) = load_data(&cfg)?;
            let (train, val, test) = (
                split_part(&data, &rows, "train")?,
                split_part(&data, &rows, "val")?,
                split_part(&data, &rows, "test")?,
            );
            let r = training::train_classifier(&spec, &train, &val, &cfg.hyper_params(), &cfg.train_config())?;
            r.classifier.save(&cfg.out_dir.join("model.ckpt"), cfg.seed, digest)?;
            training::write_history_csv(&cfg.out_dir.join("history.csv"), &r.history)?;
            let test: Vec<_> = test.iter().collect();
            let eval = evaluation::evaluate(&r.classifier, &test)?;
            evaluation::write_class_report_csv(&cfg.out_dir.join("class_report.csv"), &eval)?;
            evaluation::write_confusion_csv(&cfg.out_dir.join("confusion_test.csv"), &eval.confusion)?;
            println!(
                "{}: best epoch {} of {}, val accuracy {:.4}, test accuracy {:.4}, {:.1} s",
                spec.id,
                r.best_epoch,
                r.history.len(),
                r.best().val_acc,
                eval.accuracy,
                r.wall_seconds
            );
        }
        Command::Tune {
            arch,
            learning_rates,
            dropout_rates,
            l2_rates,
            common,
        } => {
            let cfg = resolve(&common)?;
            prepare(&cfg)?;
            let spec = select_arch(&arch)?;
            let (data, rows) = load_data(&cfg)?;
            let (train, val) = (split_part(&data, &rows, "train")?, split_part(&data, &rows, "val")?);
            let defaults = TuningGrid::default();
            let grid = TuningGrid {
                learning_rate: learning_rates.unwrap_or(defaults.learning_rate),
                dropout_rate: dropout_rates.unwrap_or(defaults.dropout_rate),
                l2_rate: l2_rates.unwrap_or(defaults.l2_rate),
            };
            let result =
                training::grid_search_ofat(&spec, &train, &val, &grid, cfg.hyper_params(), &cfg.train_config())?;
            training::write_tuning_trace_csv(&cfg.out_dir.join("tuning_trace.csv"), &result.trace)?;
            let best = RunConfig {
                learning_rate: result.best.learning_rate,
                dropout_rate: result.best.dropout_rate,
                l2_rate: result.best.l2_rate,
                ..cfg.clone()
            };
            let path = cfg.out_dir.join("best.cfg");
            std::fs::write(&path, best.to_text()).map_err(|e| Error::io(&path, e))?;
            println!(
                "best learning_rate={} dropout_rate={} l2_rate={} val accuracy {:.4}",
                result.best.learning_rate, result.best.dropout_rate, result.best.l2_rate, result.best_accuracy
            );
        }
        Command::Family {
            archs,
            fractions,
            seeds,
            narrow,
            jobs,
            common,
        } => {
            let cfg = resolve(&common)?;
            prepare(&cfg)?;
            let family = generate_family();
            let ids = archs.unwrap_or_else(|| family.specs.iter().map(|s| s.id.clone()).collect());
            let specs = ids
                .iter()
                .map(|id| {
                    select_arch(&ArchArgs {
                        arch: Some(id.clone()),
                        arch_file: None,
                        narrow,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let fractions = fractions
                .into_iter()
                .map(|f| DataFraction::try_from(f).map_err(|_| Error::Config(format!("unsupported data fraction {f}"))))
                .collect::<Result<Vec<_>>>()?;
            if jobs == 0 {
                return Err(Error::Config("--jobs must be >= 1".into()));
            }
            let (data, _) = load_data(&cfg)?;
            let day = data.of_domain(Domain::Day);
            let exp = ExperimentA {
                specs: &specs,
                fractions: &fractions,
                seeds: &seeds,
                hp: cfg.hyper_params(),
                cfg: cfg.train_config(),
                jobs,
            };
            let cells = training::run_experiment_a(&exp, &day);
            training::write_experiment_a_csv(&cfg.out_dir.join("experiment_a.csv"), &cells)?;
            let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
            println!("{} cells, {failed} failed", cells.len());
        }
        Command::GanTrain {
            epochs,
            gen_width,
            disc_width,
            common,
        } => {
            let cfg = resolve(&common)?;
            let digest = prepare(&cfg)?;
            let (data, _) = load_data(&cfg)?;
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
            let shape = GanShape {
                resolution: cfg.resolution,
                gen_width,
                disc_width,
                lambda_cycle: cfg.lambda_cycle,
                lambda_identity: cfg.lambda_identity,
            };
            let bundle = CycleGanBundle::new(shape, cfg.seed)?;
            let gan_cfg = GanTrainConfig {
                epochs,
                seed: cfg.seed,
                ..GanTrainConfig::default()
            };
            let r = cyclegan::train_cyclegan(bundle, &day, &night, &gan_cfg)?;
            r.bundle.save(&cfg.out_dir.join("gan.ckpt"), cfg.seed, digest)?;
            cyclegan::write_history_csv(&cfg.out_dir.join("cyclegan_history.csv"), &r.history)?;
            let last = r.history.last().expect("at least one epoch");
            println!(
                "{} epochs, final generator loss {:.4}, discriminators {:.4} / {:.4}",
                r.history.len(),
                last.gen_total,
                last.disc_a,
                last.disc_b
            );
        }
        Command::Transform {
            checkpoint,
            input,
            direction,
            common,
        } => {
            let cfg = resolve(&common)?;
            prepare(&cfg)?;
            let bundle = CycleGanBundle::load(&checkpoint)?;
            let direction = match direction {
                DirectionArg::NightToDay => Direction::NightToDay,
                DirectionArg::DayToNight => Direction::DayToNight,
            };
            let files = png_inputs(&input)?;
            for file in &files {
                let out = cyclegan::transform(&bundle, &load_png(file)?, direction)?;
                let name = file.file_name().expect("files have names");
                save_png(&cfg.out_dir.join(name), &out)?;
            }
            println!("transformed {} images into {}", files.len(), cfg.out_dir.display());
        }
        Command::EvalA { checkpoint, common } => {
            let cfg = resolve(&common)?;
            prepare(&cfg)?;
            let clf = Classifier::load(&checkpoint)?;
            let (data, rows) = load_data(&cfg)?;
            let test = split_part(&data, &rows, "test")?;
            let test: Vec<_> = test.iter().collect();
            let eval = evaluation::evaluate(&clf, &test)?;
            evaluation::write_class_report_csv(&cfg.out_dir.join("class_report.csv"), &eval)?;
            evaluation::write_confusion_csv(&cfg.out_dir.join("confusion_test.csv"), &eval.confusion)?;
            println!("test accuracy {:.4} on {} images", eval.accuracy, test.len());
            print!("{}", eval.confusion);
        }
        Command::EvalB {
            checkpoint,
            gan_checkpoint,
            test_sets,
            common,
        } => {
            let cfg = resolve(&common)?;
            prepare(&cfg)?;
            let clf = Classifier::load(&checkpoint)?;
            let bundle = gan_checkpoint.as_deref().map(CycleGanBundle::load).transpose()?;
            let translator: &dyn Translator = match &bundle {
                Some(b) => b,
                None => &IdentityTranslator,
            };
            let (data, rows) = load_data(&cfg)?;
            let day_pool = split_part(&data, &rows, "test")?;
            let night_pool = data.of_domain(Domain::Night);
            let specs = match test_sets {
                Some(list) => list.iter().map(|s| parse_test_set(s)).collect::<Result<Vec<_>>>()?,
                None => TestSetSpec::defaults(),
            };
            let sets = evaluation::build_experiment_b_sets(&day_pool, &night_pool, translator, &specs, cfg.seed)?;
            let report = evaluation::run_experiment_b(&clf, &sets)?;
            evaluation::write_report(&cfg.out_dir, &report)?;
            for r in &report.rows {
                println!(
                    "{:<8} {:<10} {:>4} {:.4}",
                    r.test_set,
                    r.domain.name(),
                    r.n,
                    r.accuracy()
                );
            }
        }
        Command::CountParams { arch, resolution } => {
            let spec = select_arch(&arch)?.with_resolution(Resolution::square(resolution));
            println!("{} {}", spec.id, spec.count_parameters()?);
        }
    }
    Ok(())
}

fn parse_test_set(text: &str) -> Result<TestSetSpec> {
    let bad = || Error::Config(format!("test set `{text}` is not name:class:day:night"));
    let parts: Vec<&str> = text.split(':').collect();
    let [name, class, day, night] = parts[..] else {
        return Err(bad());
    };
    let label = class.parse().map_err(|_| bad())?;
    let count = |v: &str| v.parse::<usize>().map_err(|_| bad());
    Ok(TestSetSpec::new(name, label, count(day)?, count(night)?))
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(input, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn exit_code(category: Category) -> u8 {
    match category {
        Category::Config => 2,
        Category::Data | Category::Io => 3,
        Category::Numeric => 4,
    }
}

fn category_name(category: Category) -> &'static str {
    match category {
        Category::Config => "config",
        Category::Data => "data",
        Category::Io => "io",
        Category::Numeric => "numeric",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {message}", category_name(e.category()));
            ExitCode::from(exit_code(e.category()))
        }
    }
}
