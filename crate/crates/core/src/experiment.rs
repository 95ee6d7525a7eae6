//! Experiment orchestration: data preparation, arm definitions, seed sweeps
//! and the on-disk outputs (`manifest.json`, `metrics.jsonl`, `report.csv`).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Arm, ColumnSelection, DatasetConfig, ExperimentConfig, ModelConfig, CONFIG_VERSION};
use crate::data::{
    fit_standardizer, load_csv, load_csv_with_vocabulary, read_header, split, ColumnSchema, SplitSpec, Standardizer,
    TabularDataset, Vocabulary,
};
use crate::error::{Error, Result};
use crate::labelprop::PseudoLabelAssignment;
use crate::matrix::Matrix;
use crate::network::{save_checkpoint, ContrastiveNetwork, NetworkSpec, PredictorNetwork};
use crate::trainer::{
    evaluate, pretrain, train_predictor, EpochMetrics, Evaluation, Features, MixMode, PredictorConfig, PretrainConfig,
};

pub const MANIFEST_FORMAT: &str = "contramix-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Training file (and optional separate test file) read with one vocabulary.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub train: TabularDataset,
    pub test: Option<TabularDataset>,
    pub vocabulary: Vocabulary,
}

/// Builds the column schema from the CSV header: every listed categorical
/// column, plus either the listed continuous columns or all remaining ones.
pub fn build_schema(header: &[String], cfg: &DatasetConfig) -> Result<Vec<ColumnSchema>> {
    let has = |name: &str| header.iter().any(|h| h == name);
    if !has(&cfg.label_column) {
        return Err(Error::Config(format!(
            "dataset.label_column: column `{}` not found in {}",
            cfg.label_column,
            cfg.path.display()
        )));
    }
    for c in &cfg.categorical {
        if !has(c) {
            return Err(Error::Config(format!("dataset.categorical: column `{c}` not found")));
        }
        if *c == cfg.label_column {
            return Err(Error::Config(format!("dataset.categorical: `{c}` is the label column")));
        }
    }
    let continuous: Vec<&String> = match &cfg.continuous {
        ColumnSelection::Keyword(_) => header
            .iter()
            .filter(|h| **h != cfg.label_column && !cfg.categorical.contains(h))
            .collect(),
        ColumnSelection::List(list) => {
            for c in list {
                if !has(c) {
                    return Err(Error::Config(format!("dataset.continuous: column `{c}` not found")));
                }
                if *c == cfg.label_column || cfg.categorical.contains(c) {
                    return Err(Error::Config(format!(
                        "dataset.continuous: `{c}` is already the label or a categorical column"
                    )));
                }
            }
            list.iter().collect()
        }
    };
    let schema: Vec<ColumnSchema> = header
        .iter()
        .filter_map(|h| {
            if cfg.categorical.contains(h) {
                Some(ColumnSchema::categorical(h.clone()))
            } else if continuous.contains(&h) {
                Some(ColumnSchema::continuous(h.clone()))
            } else {
                None
            }
        })
        .collect();
    if schema.is_empty() {
        return Err(Error::Config("dataset: no feature columns selected".into()));
    }
    Ok(schema)
}

pub fn load_source(cfg: &DatasetConfig) -> Result<SourceData> {
    let header = read_header(&cfg.path)?;
    let schema = build_schema(&header, cfg)?;
    let (train, vocabulary) = load_csv(&cfg.path, &schema, Some(&cfg.label_column))?;
    let test = match &cfg.test_path {
        Some(p) => Some(load_csv_with_vocabulary(p, &vocabulary)?),
        None => None,
    };
    Ok(SourceData {
        train,
        test,
        vocabulary,
    })
}

/// Standardized labeled / unlabeled / test partitions for one seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub labeled: TabularDataset,
    pub unlabeled: TabularDataset,
    pub test: TabularDataset,
    /// Fitted on the labeled and unlabeled rows together.
    pub standardizer: Standardizer,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprints {
    pub labeled: String,
    pub unlabeled: String,
    pub test: String,
}

impl PreparedData {
    pub fn fingerprints(&self) -> Fingerprints {
        Fingerprints {
            labeled: self.labeled.fingerprint(),
            unlabeled: self.unlabeled.fingerprint(),
            test: self.test.fingerprint(),
        }
    }
}

/// Splits with the run seed. With a separate test file, no rows of the
/// training file are held out for testing.
pub fn prepare(source: &SourceData, cfg: &DatasetConfig, seed: u64, labeled_count: Option<usize>) -> Result<PreparedData> {
    let spec = SplitSpec {
        labeled_fraction: cfg.labeled_fraction,
        test_fraction: if source.test.is_some() { 0.0 } else { cfg.test_fraction },
        seed,
        labeled_count: labeled_count.or(cfg.labeled_count),
    };
    let parts = split(&source.train, &spec)?;
    let test = match &source.test {
        Some(t) => t.clone(),
        None => parts.test,
    };
    if test.is_empty() {
        return Err(Error::Config(
            "dataset.test_fraction: the test partition is empty; set test_fraction > 0 or test_path".into(),
        ));
    }
    let mut pool: Vec<usize> = parts
        .labeled
        .row_ids
        .iter()
        .chain(&parts.unlabeled.row_ids)
        .map(|&r| r as usize)
        .collect();
    pool.sort_unstable();
    let standardizer = fit_standardizer(&source.train.take(&pool));
    Ok(PreparedData {
        labeled: standardizer.apply(&parts.labeled)?,
        unlabeled: standardizer.apply(&parts.unlabeled)?,
        test: standardizer.apply(&test)?,
        standardizer,
    })
}

pub fn network_spec(model: &ModelConfig, data: &TabularDataset) -> NetworkSpec {
    NetworkSpec::new(
        data.n_continuous(),
        &data.cardinalities(),
        model.hidden_width,
        model.encoder_layers,
        model.projector_layers,
        model.projector_width,
    )
}

/// Resolved training recipe of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmPlan {
    /// `None` for arms whose predictor reads embedded raw features.
    pub pretrain: Option<PretrainConfig>,
    pub predictor: PredictorConfig,
}

/// Forces the flags that define each arm; every other setting comes from the config.
pub fn plan(arm: Arm, cfg: &ExperimentConfig) -> ArmPlan {
    let plain = PredictorConfig {
        mixup: false,
        use_pseudo_labels: false,
        ..cfg.predictor.clone()
    };
    let with_pl = PretrainConfig {
        pseudo_labels: true,
        mix_mode: MixMode::WithinClass,
        ..cfg.pretrain.clone()
    };
    match arm {
        Arm::Supervised | Arm::Mlp => ArmPlan {
            pretrain: None,
            predictor: plain,
        },
        Arm::Logistic => ArmPlan {
            pretrain: None,
            predictor: PredictorConfig { depth: 1, ..plain },
        },
        Arm::SelfSl => ArmPlan {
            pretrain: Some(PretrainConfig {
                pseudo_labels: false,
                gamma: 0.0,
                mix_mode: MixMode::WithinClass,
                ..cfg.pretrain.clone()
            }),
            predictor: plain,
        },
        Arm::SelfSlPl => ArmPlan {
            pretrain: Some(with_pl),
            predictor: PredictorConfig {
                mixup: false,
                use_pseudo_labels: true,
                ..cfg.predictor.clone()
            },
        },
        Arm::Full => ArmPlan {
            pretrain: Some(with_pl),
            predictor: PredictorConfig {
                mixup: true,
                use_pseudo_labels: true,
                ..cfg.predictor.clone()
            },
        },
        Arm::RandomMixAblation => ArmPlan {
            pretrain: Some(PretrainConfig {
                mix_mode: MixMode::Random,
                ..with_pl
            }),
            predictor: PredictorConfig {
                mixup: true,
                use_pseudo_labels: true,
                ..cfg.predictor.clone()
            },
        },
        Arm::Ae => ArmPlan {
            pretrain: Some(PretrainConfig {
                contrastive_weight: 0.0,
                gamma: 0.0,
                pseudo_labels: false,
                ..cfg.pretrain.clone()
            }),
            predictor: plain,
        },
    }
}

/// Frozen-encoder outputs of one pretraining run, shared by arms whose
/// pretraining configs coincide.
#[derive(Debug, Clone)]
pub struct PretrainedLatents {
    pub network: ContrastiveNetwork,
    pub labeled: Matrix,
    pub test: Matrix,
    /// Unlabeled rows holding a pseudo-label, their latents and labels.
    pub pseudo_rows: Vec<usize>,
    pub pseudo_latents: Matrix,
    pub pseudo_labels: Vec<usize>,
    pub assignment: Option<PseudoLabelAssignment>,
    pub metrics: Vec<EpochMetrics>,
}

pub type PretrainCache = HashMap<String, PretrainedLatents>;

fn pretrain_key(cfg: &PretrainConfig, model: &ModelConfig) -> Result<String> {
    Ok(format!("{}|{}", serde_json::to_string(cfg)?, serde_json::to_string(model)?))
}

fn pretrain_latents(
    cfg: &ExperimentConfig,
    pcfg: &PretrainConfig,
    data: &PreparedData,
    seed: u64,
) -> Result<PretrainedLatents> {
    let spec = network_spec(&cfg.model, &data.labeled);
    let outcome = pretrain(spec, &data.labeled, &data.unlabeled, pcfg, &cfg.labelprop, seed)?;
    let mut network = outcome.network;
    let (pseudo_rows, pseudo_labels): (Vec<usize>, Vec<usize>) = match &outcome.assignment {
        Some(a) => a.assigned().unzip(),
        None => (Vec::new(), Vec::new()),
    };
    Ok(PretrainedLatents {
        labeled: network.encode_dataset(&data.labeled)?,
        test: network.encode_dataset(&data.test)?,
        pseudo_latents: network.encode_dataset(&data.unlabeled.take(&pseudo_rows))?,
        pseudo_rows,
        pseudo_labels,
        network,
        assignment: outcome.assignment,
        metrics: outcome.metrics,
    })
}

/// Result of one arm on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: Arm,
    pub seed: u64,
    pub n_labeled: usize,
    pub evaluation: Evaluation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_labeled: Option<usize>,
    pub fingerprints: Fingerprints,
    /// Test row ids, used to check that arms and curve points share a test set.
    #[serde(skip)]
    pub test_row_ids: Vec<u64>,
    #[serde(skip)]
    pub metrics: Vec<EpochMetrics>,
}

/// Trains and evaluates one arm. `cache` holds pretraining results for the
/// current seed and split.
pub fn run_arm(
    cfg: &ExperimentConfig,
    arm: Arm,
    data: &PreparedData,
    seed: u64,
    cache: &mut PretrainCache,
    artifacts: Option<&Path>,
) -> Result<RunRecord> {
    let plan = plan(arm, cfg);
    let labels = data
        .labeled
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("labeled split carries no labels".into()))?;
    let test_labels = data
        .test
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("test split carries no labels".into()))?;
    let n_classes = data.labeled.n_classes;
    let p = &plan.predictor;
    let mut metrics = Vec::new();
    let mut pseudo_label_accuracy = None;
    let mut pseudo_labeled = None;
    let evaluation = match &plan.pretrain {
        None => {
            let mut predictor = PredictorNetwork::on_raw(
                data.labeled.n_continuous(),
                &data.labeled.cardinalities(),
                p.hidden_width,
                p.depth,
                n_classes,
                seed,
            )?;
            metrics.extend(train_predictor(
                &mut predictor,
                Features::Raw(&data.labeled),
                labels,
                None,
                n_classes,
                p,
                seed,
            )?);
            if let Some(dir) = artifacts {
                save_checkpoint(&dir.join(format!("{arm}_{seed}_predictor.json")), "predictor", &predictor)?;
            }
            evaluate(&mut predictor, Features::Raw(&data.test), test_labels, n_classes)?
        }
        Some(pcfg) => {
            let key = pretrain_key(pcfg, &cfg.model)?;
            if !cache.contains_key(&key) {
                let latents = pretrain_latents(cfg, pcfg, data, seed)?;
                cache.insert(key.clone(), latents);
            }
            let pre = &cache[&key];
            metrics.extend(pre.metrics.iter().cloned());
            if let Some(a) = &pre.assignment {
                pseudo_labeled = Some(a.n_assigned());
                if let Some(truth) = data.unlabeled.true_labels() {
                    pseudo_label_accuracy = Some(a.accuracy(|r| truth[r]));
                }
            }
            let mut predictor =
                PredictorNetwork::on_latents(pre.labeled.cols(), p.hidden_width, p.depth, n_classes, seed)?;
            let pseudo = (!pre.pseudo_rows.is_empty())
                .then_some((Features::Latent(&pre.pseudo_latents), pre.pseudo_labels.as_slice()));
            metrics.extend(train_predictor(
                &mut predictor,
                Features::Latent(&pre.labeled),
                labels,
                pseudo,
                n_classes,
                p,
                seed,
            )?);
            if let Some(dir) = artifacts {
                save_checkpoint(&dir.join(format!("{arm}_{seed}_encoder.json")), "encoder", &pre.network)?;
                save_checkpoint(&dir.join(format!("{arm}_{seed}_predictor.json")), "predictor", &predictor)?;
            }
            evaluate(&mut predictor, Features::Latent(&pre.test), test_labels, n_classes)?
        }
    };
    metrics.push(EpochMetrics {
        phase: "test".into(),
        test_accuracy: Some(evaluation.accuracy),
        ..Default::default()
    });
    Ok(RunRecord {
        arm,
        seed,
        n_labeled: data.labeled.n_rows(),
        evaluation,
        pseudo_label_accuracy,
        pseudo_labeled,
        fingerprints: data.fingerprints(),
        test_row_ids: data.test.row_ids.clone(),
        metrics,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Accuracy of one arm (at one labeled-set size) across seeds, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    /// Requested labeled count for curve points, `None` for fraction-based runs.
    pub labeled_count: Option<usize>,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Run,
    Ablate,
    Curve,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Ablate => "ablate",
            Command::Curve => "curve",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub command: Command,
    pub records: Vec<RunRecord>,
    pub summaries: Vec<ArmSummary>,
}

impl ExperimentResult {
    pub fn summary(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }

    /// `report.csv` contents; every number is written in shortest round-trip form.
    pub fn report_csv(&self) -> String {
        let mut out = String::new();
        if self.command == Command::Curve {
            out.push_str("n_labeled,arm,mean,std,n_seeds\n");
        } else {
            out.push_str("arm,mean,std,n_seeds\n");
        }
        for s in &self.summaries {
            if self.command == Command::Curve {
                let _ = write!(out, "{},", s.labeled_count.unwrap_or_default());
            }
            let _ = writeln!(out, "{},{},{},{}", s.arm, s.mean, s.std, s.accuracies.len());
        }
        out
    }
}

/// Arms and labeled-set sizes swept by `command`.
pub fn sweep(cfg: &ExperimentConfig, command: Command) -> (Vec<Arm>, Vec<Option<usize>>) {
    match command {
        Command::Run => (vec![cfg.arm], vec![None]),
        Command::Ablate => (Arm::LADDER.to_vec(), vec![None]),
        Command::Curve => (
            cfg.curve.arms.clone(),
            cfg.curve.labeled_counts.iter().map(|&c| Some(c)).collect(),
        ),
    }
}

fn run_seed(
    cfg: &ExperimentConfig,
    source: &SourceData,
    arms: &[Arm],
    counts: &[Option<usize>],
    seed: u64,
    artifacts: Option<&Path>,
    pseudo_dir: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for &count in counts {
        let data = prepare(source, &cfg.dataset, seed, count)?;
        let mut cache = PretrainCache::new();
        for &arm in arms {
            let record = run_arm(cfg, arm, &data, seed, &mut cache, artifacts)?;
            if let Some(dir) = pseudo_dir {
                if let Some(a) = plan(arm, cfg)
                    .pretrain
                    .and_then(|p| pretrain_key(&p, &cfg.model).ok())
                    .and_then(|k| cache.get(&k))
                    .and_then(|pre| pre.assignment.as_ref())
                {
                    let suffix = count.map_or(String::new(), |c| format!("_n{c}"));
                    a.write_csv(
                        &dir.join(format!("pseudo_labels_{arm}_{seed}{suffix}.csv")),
                        &data.unlabeled.row_ids,
                    )?;
                }
            }
            out.push(record);
        }
    }
    Ok(out)
}

/// Runs every (labeled count, seed, arm) combination of `command`. Seeds run
/// on up to `cfg.threads` threads, each with isolated random streams, so the
/// results do not depend on the thread count.
pub fn run_experiment(cfg: &ExperimentConfig, source: &SourceData, command: Command) -> Result<ExperimentResult> {
    run_experiment_with_outputs(cfg, source, command, None, None)
}

fn run_experiment_with_outputs(
    cfg: &ExperimentConfig,
    source: &SourceData,
    command: Command,
    artifacts: Option<&Path>,
    pseudo_dir: Option<&Path>,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (arms, counts) = sweep(cfg, command);
    if arms.is_empty() || counts.is_empty() {
        return Err(Error::Config("curve: at least one arm and one labeled count are required".into()));
    }
    let threads = cfg.threads.max(1);
    let mut per_seed: Vec<Result<Vec<RunRecord>>> = Vec::with_capacity(cfg.seeds.len());
    for chunk in cfg.seeds.chunks(threads) {
        if chunk.len() == 1 {
            per_seed.push(run_seed(cfg, source, &arms, &counts, chunk[0], artifacts, pseudo_dir));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let (arms, counts) = (&arms, &counts);
                    s.spawn(move || run_seed(cfg, source, arms, counts, seed, artifacts, pseudo_dir))
                })
                .collect();
            for h in handles {
                per_seed.push(h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("worker thread panicked".into()))));
            }
        });
    }
    let mut records = Vec::new();
    for r in per_seed {
        records.extend(r?);
    }
    let mut summaries = Vec::new();
    for &count in &counts {
        for &arm in &arms {
            let accuracies: Vec<f64> = records
                .iter()
                .filter(|r| r.arm == arm && count.is_none_or(|c| r.n_labeled == c))
                .map(|r| 100.0 * r.evaluation.accuracy)
                .collect();
            let (mean, std) = mean_std(&accuracies);
            summaries.push(ArmSummary {
                arm,
                labeled_count: count,
                mean,
                std,
                accuracies,
            });
        }
    }
    Ok(ExperimentResult {
        command,
        records,
        summaries,
    })
}

#[derive(Debug, Serialize)]
struct MetricLine<'a> {
    arm: Arm,
    seed: u64,
    n_labeled: usize,
    #[serde(flatten)]
    metrics: &'a EpochMetrics,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: u32,
    config_version: u32,
    config_dialect: &'static str,
    crate_version: &'static str,
    command: &'static str,
    /// Resolved config, defaults applied, as TOML.
    config: String,
    seeds: &'a [u64],
    threads: usize,
    vocabulary: &'a Vocabulary,
    runs: &'a [RunRecord],
    summaries: &'a [ArmSummary],
    wall_clock_seconds: f64,
}

/// Paths of the files written by [`execute`].
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
}

/// Loads the data, runs `command` and writes the outputs into `cfg.output_dir`.
pub fn execute(cfg: &ExperimentConfig, command: Command) -> Result<(ExperimentResult, OutputPaths)> {
    cfg.validate()?;
    let started = Instant::now();
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let artifacts = if cfg.output.checkpoints {
        let d = dir.join("checkpoints");
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Some(d)
    } else {
        None
    };
    let pseudo_dir = cfg.output.pseudo_labels.then(|| dir.clone());
    let source = load_source(&cfg.dataset)?;
    let result = run_experiment_with_outputs(cfg, &source, command, artifacts.as_deref(), pseudo_dir.as_deref())?;

    let paths = OutputPaths {
        manifest: dir.join("manifest.json"),
        metrics: dir.join("metrics.jsonl"),
        report: dir.join("report.csv"),
        dir,
    };
    let mut lines = String::new();
    for r in &result.records {
        for m in &r.metrics {
            lines.push_str(&serde_json::to_string(&MetricLine {
                arm: r.arm,
                seed: r.seed,
                n_labeled: r.n_labeled,
                metrics: m,
            })?);
            lines.push('\n');
        }
    }
    std::fs::write(&paths.metrics, lines).map_err(|e| Error::io(&paths.metrics, e))?;
    std::fs::write(&paths.report, result.report_csv()).map_err(|e| Error::io(&paths.report, e))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        version: MANIFEST_VERSION,
        config_version: CONFIG_VERSION,
        config_dialect: "toml",
        crate_version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        config: cfg.to_toml_string()?,
        seeds: &cfg.seeds,
        threads: cfg.threads,
        vocabulary: &source.vocabulary,
        runs: &result.records,
        summaries: &result.summaries,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    std::fs::write(&paths.manifest, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&paths.manifest, e))?;
    Ok((result, paths))
}

/// Reads the resolved config back out of a manifest.
pub fn config_from_manifest(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let config = value
        .get("config")
        .and_then(|c| c.as_str())
        .ok_or_else(|| Error::InvalidArgument(format!("{}: no config entry", path.display())))?;
    ExperimentConfig::from_toml_str(config)
}
