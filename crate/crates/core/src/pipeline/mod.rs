//! The `synth -> train -> predict -> analyze` pipeline behind the CLI.
//!
//! Every command is a pure function of the config and its input files, and
//! rewrites its outputs atomically, so reruns produce byte-identical files.

pub mod config;
pub mod io;
pub mod log;
pub mod report;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;

use rayon::prelude::*;

pub use config::{assign_split, EvalSplit, Mode, Model, RunConfig, Split};
pub use log::PredictionRecord;
pub use report::AnalysisReport;

use crate::annotations::{load_labels, normalize_counts, AnnotationRecord, SoftLabel};
use crate::linalg::Matrix;
use crate::mlp::{self, Dataset, NetworkParams};
use crate::rng::{self, domain};
use crate::synth;
use crate::uncertainty::{decompose, UncertaintyTriple};
use crate::{Error, Result};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable capping worker threads (0 or unset: automatic).
pub const THREADS_ENV: &str = "UNCPROXY_THREADS";

fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_shifted: usize,
    pub mean_disagreement: f64,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "synth: N = {}, C = {}, shifted = {}, mean d_i = {:.4}",
            self.n_samples, self.n_classes, self.n_shifted, self.mean_disagreement
        )?;
        for p in &self.files {
            writeln!(f, "  wrote {}", p.display())?;
        }
        Ok(())
    }
}

pub fn cmd_synth(config: &RunConfig) -> Result<SynthSummary> {
    let synth_config = config
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [synth] section".into()))?;
    let data = synth::generate(synth_config)?;
    let mut d_sum = 0.0;
    for (id, counts) in data.sample_ids.iter().zip(&data.annotation_counts) {
        d_sum += normalize_counts(
            &AnnotationRecord::new(id.clone(), counts.clone()),
            &config.schema,
        )?
        .disagreement;
    }
    let mean_disagreement = d_sum / data.len() as f64;

    let paths = &config.paths;
    let files = vec![paths.features(), paths.labels(), paths.sidecar()];
    io::write_atomic(
        &files[0],
        &io::features_csv(&data.sample_ids, &data.features),
    )?;
    io::write_atomic(
        &files[1],
        &io::labels_csv(&data.sample_ids, &data.annotation_counts, &config.schema),
    )?;
    let sidecar = io::Sidecar::new(synth_config, &data, mean_disagreement);
    io::write_atomic(&files[2], &to_json_bytes(&sidecar))?;

    Ok(SynthSummary {
        n_samples: data.len(),
        n_classes: synth_config.n_classes,
        n_shifted: data.is_ood.iter().filter(|&&o| o).count(),
        mean_disagreement,
        files,
    })
}

fn to_json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

/// Features joined with labels, in features-file order.
pub struct LabeledData {
    pub ids: Vec<String>,
    pub features: Matrix,
    pub records: Vec<AnnotationRecord>,
    pub labels: Vec<SoftLabel>,
    /// Samples dropped because no class votes remained after exclusion.
    pub unlabeled: Vec<String>,
}

pub fn load_labeled_data(config: &RunConfig) -> Result<LabeledData> {
    let (ids, features) = io::read_features(&config.paths.features())?;
    let records = load_labels(&config.paths.labels(), &config.schema)?;
    let mut by_id: HashMap<String, AnnotationRecord> = HashMap::with_capacity(records.len());
    for r in records {
        if by_id.contains_key(&r.sample_id) {
            return Err(Error::Format(format!(
                "duplicate label id `{}`",
                r.sample_id
            )));
        }
        by_id.insert(r.sample_id.clone(), r);
    }
    let missing: Vec<&str> = ids
        .iter()
        .filter(|id| !by_id.contains_key(*id))
        .map(String::as_str)
        .take(10)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Join(format!(
            "features without labels: {}",
            missing.join(", ")
        )));
    }

    let mut keep_ids = Vec::new();
    let mut rows = Vec::new();
    let mut kept_records = Vec::new();
    let mut labels = Vec::new();
    let mut unlabeled = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let record = by_id.remove(id).expect("checked above");
        match normalize_counts(&record, &config.schema) {
            Ok(l) => {
                keep_ids.push(id.clone());
                rows.push(features.row(i).to_vec());
                kept_records.push(record);
                labels.push(l);
            }
            Err(Error::UnlabeledSample(id)) => unlabeled.push(id),
            Err(e) => return Err(e),
        }
    }
    if keep_ids.is_empty() {
        return Err(Error::EmptyInput("labeled samples"));
    }
    Ok(LabeledData {
        ids: keep_ids,
        features: Matrix::from_rows(&rows)?,
        records: kept_records,
        labels,
        unlabeled,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub n_train: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub weight_decay: f64,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "train: {} samples, {} epochs, weight decay {:.3e}",
            self.n_train, self.epochs, self.weight_decay
        )?;
        if let Some(l) = self.final_loss {
            write!(f, ", final loss {l:.5}")?;
        }
        writeln!(f)?;
        for p in &self.files {
            writeln!(f, "  wrote {}", p.display())?;
        }
        Ok(())
    }
}

/// Layer sizes `[D, hidden.., C]`.
pub fn architecture(config: &RunConfig, feature_dim: usize) -> Vec<usize> {
    std::iter::once(feature_dim)
        .chain(config.model.hidden.iter().copied())
        .chain(std::iter::once(config.schema.num_classes()))
        .collect()
}

/// Train on the train split. Baseline and UncNet share the trained
/// weights; they differ only at inference time.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    let data = load_labeled_data(config)?;
    let train_idx: Vec<usize> = (0..data.ids.len())
        .filter(|&i| assign_split(&data.ids[i], &config.split) == Split::Train)
        .collect();
    if train_idx.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let features = Matrix::from_rows(
        &train_idx
            .iter()
            .map(|&i| data.features.row(i))
            .collect::<Vec<_>>(),
    )?;
    let labels = Matrix::from_rows(
        &train_idx
            .iter()
            .map(|&i| &data.labels[i].probs)
            .collect::<Vec<_>>(),
    )?;
    let ids = train_idx.iter().map(|&i| data.ids[i].clone()).collect();
    let dataset = Dataset::new(features, labels, ids)?;
    let arch = architecture(config, data.features.cols());
    let outcome = mlp::train(&dataset, &config.train, &arch)?;

    let mut files = Vec::new();
    let params_json = outcome.params.to_json();
    for &model in config.mode.models() {
        let path = config.paths.params(model);
        io::write_atomic(&path, params_json.as_bytes())?;
        files.push(path);
    }
    let trace_path = config.paths.loss_trace();
    io::write_atomic(&trace_path, &io::loss_trace_csv(&outcome.loss_trace))?;
    files.push(trace_path);

    Ok(TrainSummary {
        n_train: dataset.len(),
        epochs: config.train.epochs,
        final_loss: outcome.loss_trace.last().copied(),
        weight_decay: outcome.weight_decay,
        files,
    })
}

/// Seed of the MC passes for the sample at `index` in the features file.
pub fn sample_mc_seed(train_seed: u64, index: usize) -> u64 {
    rng::derive_seed(train_seed, &[domain::PREDICT_SAMPLE, index as u64])
}

/// One prediction record; UncNet records carry `T` rows and the
/// uncertainty triple, baseline records one deterministic row.
pub fn predict_sample(
    params: &NetworkParams,
    model: Model,
    config: &RunConfig,
    sample_id: &str,
    index: usize,
    x: &[f64],
) -> Result<PredictionRecord> {
    let split = assign_split(sample_id, &config.split);
    match model {
        Model::Baseline => {
            let p = mlp::predict_proba(params, x)?;
            Ok(PredictionRecord {
                sample_id: sample_id.to_string(),
                split,
                model,
                probs: vec![p.clone()],
                mean_probs: p,
                uncertainty: None,
            })
        }
        Model::Uncnet => {
            let mc = mlp::mc_predict(
                params,
                x,
                config.train.mc_samples,
                config.train.dropout_p,
                sample_mc_seed(config.train.seed, index),
            )?;
            let triple: UncertaintyTriple = decompose(&mc);
            Ok(PredictionRecord {
                sample_id: sample_id.to_string(),
                split,
                model,
                probs: mc.probs().iter_rows().map(<[f64]>::to_vec).collect(),
                mean_probs: mc.mean_probs().to_vec(),
                uncertainty: Some(triple),
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictSummary {
    pub n_samples: usize,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for PredictSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "predict: {} samples", self.n_samples)?;
        for p in &self.files {
            writeln!(f, "  wrote {}", p.display())?;
        }
        Ok(())
    }
}

/// Predict every sample of the features file (all splits) for each model
/// of the configured mode.
pub fn cmd_predict(config: &RunConfig) -> Result<PredictSummary> {
    let (ids, features) = io::read_features(&config.paths.features())?;
    let pool = thread_pool()?;
    let mut files = Vec::new();
    for &model in config.mode.models() {
        let params_path = config.paths.params(model);
        let params = NetworkParams::from_json(&io::read_text(&params_path)?)?;
        if params.in_dim() != features.cols() || params.out_dim() != config.schema.num_classes() {
            return Err(Error::Format(format!(
                "{} expects {} features and {} classes",
                params_path.display(),
                params.in_dim(),
                params.out_dim()
            )));
        }
        let records = pool.install(|| {
            (0..ids.len())
                .into_par_iter()
                .map(|i| predict_sample(&params, model, config, &ids[i], i, features.row(i)))
                .collect::<Result<Vec<_>>>()
        })?;
        let path = config.paths.predictions(model);
        io::write_atomic(&path, &log::to_jsonl(&records))?;
        files.push(path);
    }
    Ok(PredictSummary {
        n_samples: ids.len(),
        files,
    })
}

fn read_log(config: &RunConfig, model: Model) -> Result<Vec<PredictionRecord>> {
    let path = config.paths.predictions(model);
    log::parse_jsonl(&io::read_text(&path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Join logs and labels, restrict to the evaluation split and build the
/// report. Writes `report.json` and the CSV mirrors.
pub fn cmd_analyze(config: &RunConfig) -> Result<AnalysisReport> {
    let report = build_report(config)?;
    let out = &config.paths;
    io::write_atomic(&out.report(), &to_json_bytes(&report))?;
    for (name, bytes) in report::csv_mirrors(&report) {
        io::write_atomic(&out.out_dir.join(name), &bytes)?;
    }
    Ok(report)
}

pub fn build_report(config: &RunConfig) -> Result<AnalysisReport> {
    let records = load_labels(&config.paths.labels(), &config.schema)?;
    let by_id: HashMap<&str, &AnnotationRecord> =
        records.iter().map(|r| (r.sample_id.as_str(), r)).collect();

    let logs: BTreeMap<Model, Vec<PredictionRecord>> = config
        .mode
        .models()
        .iter()
        .map(|&m| Ok((m, read_log(config, m)?)))
        .collect::<Result<_>>()?;

    // All logs must cover the same samples.
    let mut model_iter = logs.iter();
    let (first_model, first_log) = model_iter.next().expect("mode has at least one model");
    let first_ids: HashSet<&str> = first_log.iter().map(|r| r.sample_id.as_str()).collect();
    for (model, log) in model_iter {
        let ids: HashSet<&str> = log.iter().map(|r| r.sample_id.as_str()).collect();
        let mut offenders: Vec<&str> = first_ids.symmetric_difference(&ids).copied().collect();
        offenders.sort_unstable();
        if !offenders.is_empty() {
            offenders.truncate(10);
            return Err(Error::Join(format!(
                "{} and {} logs cover different samples: {}",
                first_model.name(),
                model.name(),
                offenders.join(", ")
            )));
        }
    }

    let mut warnings = Vec::new();
    let mut sample_ids = Vec::new();
    let mut eval_records = Vec::new();
    let mut labels = Vec::new();
    let mut unlabeled = 0usize;
    for r in first_log
        .iter()
        .filter(|r| config.split.eval.contains(r.split))
    {
        let record = by_id.get(r.sample_id.as_str()).ok_or_else(|| {
            Error::Join(format!("no labels for predicted sample `{}`", r.sample_id))
        })?;
        match normalize_counts(record, &config.schema) {
            Ok(l) => {
                sample_ids.push(r.sample_id.clone());
                eval_records.push((*record).clone());
                labels.push(l);
            }
            Err(Error::UnlabeledSample(_)) => unlabeled += 1,
            Err(e) => return Err(e),
        }
    }
    if unlabeled > 0 {
        warnings.push(format!(
            "{unlabeled} samples without class votes were skipped"
        ));
    }

    let mut aligned: BTreeMap<Model, Vec<&PredictionRecord>> = BTreeMap::new();
    for (&model, log) in &logs {
        let idx: HashMap<&str, &PredictionRecord> =
            log.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        if let Some(first) = log.first() {
            if first.mean_probs.len() != config.schema.num_classes() {
                return Err(Error::Format(format!(
                    "{} log has {} classes, schema has {}",
                    model.name(),
                    first.mean_probs.len(),
                    config.schema.num_classes()
                )));
            }
        }
        aligned.insert(
            model,
            sample_ids.iter().map(|id| idx[id.as_str()]).collect(),
        );
    }

    let sidecar_path = config.paths.sidecar();
    let shifted = if sidecar_path.exists() {
        let sidecar = io::Sidecar::read(&sidecar_path)?;
        Some(
            sidecar
                .sample_ids
                .into_iter()
                .zip(sidecar.is_ood)
                .collect::<HashMap<_, _>>(),
        )
    } else {
        None
    };

    report::analyze(report::AnalysisInput {
        config: report::ReportConfig {
            mode: config.mode,
            schema: config.schema.clone(),
            synth: config.synth.clone(),
            model: config.model.clone(),
            train: config.train.clone(),
            split: config.split.clone(),
            analysis: config.analysis.clone(),
        },
        seeds: report::Seeds {
            train: config.train.seed,
            synth: config.synth.as_ref().map(|s| s.seed),
        },
        sample_ids,
        records: eval_records,
        labels,
        logs: aligned,
        shifted,
        warnings,
    })
}
