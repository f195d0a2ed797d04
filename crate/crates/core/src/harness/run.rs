use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, TrainConfig};
use super::plots::{emit_plots, PlotInput, ProjectionDump, ProjectionPoint};
use super::report::{MetricsReport, MetricsRow, Phase};
use super::write_atomic;
use crate::analysis::{
    evaluate_attack, pca_project, pearson_correlation, softmax_outputs, stochasticity, AttackEvaluation,
    SecondArgmaxReport, StochasticityReport,
};
use crate::data::{
    cifar10_paths, inject_label_noise, load_cifar10, load_mnist_dir, batch_iter, Dataset, DatasetName, Split,
};
use crate::losses::{LossKind, LossSpec};
use crate::models::{checkpoint::Container, init_model, Model};
use crate::tensor::{adam_step, AdamState, Tape, Tensor};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DISTANCES_FILE: &str = "distances.csv";
pub const PROJECTION_FILE: &str = "projection.csv";
pub const ATTACK_FILE: &str = "attack.csv";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const CONFIG_COPY: &str = "config.toml";
/// Present while a run is in progress or after it failed.
pub const INCOMPLETE_MARKER: &str = "RUN_INCOMPLETE";

pub fn checkpoint_path(dir: &Path, seed: u64, noisy: bool) -> PathBuf {
    let name = if noisy { format!("seed{seed}-noise.ckpt") } else { format!("seed{seed}.ckpt") };
    dir.join("checkpoints").join(name)
}

/// Train and test splits as configured (subset or full).
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let dir = &cfg.data.dir;
    let load = |split: Split, limit: Option<usize>| -> Result<Dataset> {
        let ds = match cfg.data.name {
            DatasetName::Mnist => load_mnist_dir(dir, split)?,
            DatasetName::Cifar10 => {
                // each batch file holds 10 000 records; skip the ones a subset never reaches
                let mut paths = cifar10_paths(dir, split);
                if let Some(n) = limit {
                    paths.truncate(n.div_ceil(10_000).max(1));
                }
                load_cifar10(&paths, split)?
            }
        };
        Ok(match limit {
            Some(n) => ds.truncate(n),
            None => ds,
        })
    };
    Ok(ExperimentData {
        train: load(Split::Train, cfg.train_size())?,
        test: load(Split::Test, cfg.test_size())?,
    })
}

/// SHA-256 over a dataset's pixels and labels.
pub fn dataset_checksum(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for v in ds.images().data() {
        h.update(v.to_le_bytes());
    }
    for &y in ds.labels() {
        h.update((y as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Mini-batch Adam training. `on_epoch(epoch, mean_train_loss, model)` runs
/// after every epoch.
pub fn train_model(
    model: &mut Model,
    train: &Dataset,
    loss: &LossSpec,
    cfg: &TrainConfig,
    shuffle_seed: u64,
    mut on_epoch: impl FnMut(usize, f64, &Model) -> Result<()>,
) -> Result<()> {
    loss.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    let mut state = AdamState::new(model.params().iter().map(|p| &p.tensor), cfg.adam())?;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for (images, labels) in batch_iter(train, cfg.batch_size, shuffle_seed, epoch as u64)? {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let input = tape.constant(images);
            let logits = model.forward(&mut tape, input, &params)?;
            let l = loss.apply(&mut tape, logits, &labels)?;
            let value = tape.scalar_value(l);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss became {value} in epoch {epoch}")));
            }
            total += value * labels.len() as f64;
            tape.backward(l)?;
            let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            let grads: Vec<&[f64]> = params
                .iter()
                .zip(&zeros)
                .map(|(&v, z)| tape.grad(v).unwrap_or(z.as_slice()))
                .collect();
            let mut tensors = model.param_tensors_mut();
            adam_step(&mut tensors, &grads, &mut state)?;
        }
        on_epoch(epoch, total / train.len() as f64, model)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for the initial state.
    pub train_loss: Option<f64>,
    pub test_accuracy: f64,
    pub stoch_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StochasticitySummary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub max_distance: f64,
    pub histogram: Vec<usize>,
}

impl From<&StochasticityReport> for StochasticitySummary {
    fn from(r: &StochasticityReport) -> Self {
        Self {
            metric: r.metric.as_str().into(),
            mean: r.mean,
            std: r.std,
            max_distance: r.max_distance,
            histogram: r.histogram.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackSummary {
    pub epsilon: f64,
    pub total: usize,
    pub clean_correct: usize,
    pub flipped: usize,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub attack_success_rate: f64,
    pub identity_holds: bool,
    pub second_argmax: SecondArgmaxReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseSummary {
    pub rate: f64,
    pub flipped_fraction: f64,
    pub checksum: String,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub checksum: String,
    pub epochs: Vec<EpochRecord>,
    /// Pearson r between test accuracy and mean distance over the epochs.
    pub accuracy_distance_r: Option<f64>,
    pub stochasticity: StochasticitySummary,
    pub attacks: Vec<AttackSummary>,
    pub noise: Option<NoiseSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub train_examples: usize,
    pub test_examples: usize,
    pub test_checksum: String,
    pub seeds: Vec<SeedSummary>,
    pub projection_explained_variance: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Everything one call of [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: MetricsReport,
    pub summary: RunSummary,
    pub files: Vec<PathBuf>,
}

fn empty_report(cfg: &ExperimentConfig) -> MetricsReport {
    let drsl = cfg.loss.kind == LossKind::Drsl;
    MetricsReport {
        run_id: cfg.run_id(),
        loss_kind: cfg.loss.kind.as_str().into(),
        tau: drsl.then_some(cfg.loss.tau),
        metric: drsl.then(|| cfg.loss.metric.as_str().into()),
        rows: Vec::new(),
    }
}

fn epoch_row(seed: u64, phase: Phase, rec: &EpochRecord, noise_rate: f64) -> MetricsRow {
    let mut row = MetricsRow::new(seed, phase, rec.epoch as f64);
    row.clean_acc = Some(rec.test_accuracy);
    row.stoch_mean = Some(rec.stoch_mean);
    row.noise_rate = noise_rate;
    row
}

/// Trains from `init_model(seed)`, evaluating the test split before training
/// and after every epoch.
fn train_arm(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    label: &str,
) -> Result<(Model, Vec<EpochRecord>, StochasticityReport)> {
    let mut model = init_model(&cfg.model_config(), seed)?;
    let metric = cfg.analysis.metric;
    let eval = |epoch: usize, loss: Option<f64>, m: &Model| -> Result<(EpochRecord, StochasticityReport)> {
        let stoch = stochasticity(m, test, metric)?;
        let acc = crate::analysis::accuracy(m, test)?;
        Ok((
            EpochRecord {
                epoch,
                train_loss: loss,
                test_accuracy: acc,
                stoch_mean: stoch.mean,
            },
            stoch,
        ))
    };
    let (first, mut last) = eval(0, None, &model)?;
    let mut records = vec![first];
    train_model(&mut model, train, &cfg.loss, &cfg.train, seed, |epoch, loss, m| {
        let (rec, stoch) = eval(epoch, Some(loss), m)?;
        log::info!(
            "seed {seed} {label} epoch {epoch}: loss {loss:.4}, test acc {:.4}, distance {:.4}",
            rec.test_accuracy,
            rec.stoch_mean
        );
        records.push(rec);
        last = stoch;
        Ok(())
    })?;
    Ok((model, records, last))
}

/// Attack sweep of one model over the configured ε grid.
pub fn evaluate_attack_grid(
    cfg: &ExperimentConfig,
    model: &Model,
    test: &Dataset,
    seed: u64,
) -> Result<(Vec<MetricsRow>, Vec<AttackSummary>)> {
    let subset = match cfg.attack.max_examples {
        Some(n) => test.truncate(n),
        None => test.clone(),
    };
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for eps in cfg.epsilons() {
        let spec = cfg.attack_spec(eps);
        let ev = evaluate_attack(model, &subset, &spec, &spec.objective(&cfg.loss), cfg.attack.dump_adversarial)?;
        if let Some(adv) = &ev.adversarial {
            dump_adversarial(cfg, seed, eps, &subset, &ev, adv)?;
        }
        if !ev.identity_holds() {
            return Err(Error::Consistency(format!(
                "seed {seed}, ε = {eps}: robust accuracy {} != clean {} × (1 − ASR {})",
                ev.robust_accuracy, ev.clean_accuracy, ev.attack_success_rate
            )));
        }
        log::info!(
            "seed {seed} ε = {eps}: robust acc {:.4}, ASR {:.4}",
            ev.robust_accuracy,
            ev.attack_success_rate
        );
        let mut row = MetricsRow::new(seed, Phase::Attack, eps);
        row.clean_acc = Some(ev.clean_accuracy);
        row.robust_acc = Some(ev.robust_accuracy);
        row.asr = Some(ev.attack_success_rate);
        row.second_argmax_rate = ev.second_argmax.overall;
        rows.push(row);
        summaries.push(summarize_attack(eps, &ev));
    }
    Ok((rows, summaries))
}

pub fn adversarial_path(dir: &Path, seed: u64, epsilon: f64) -> PathBuf {
    dir.join("adversarial").join(format!("seed{seed}-eps{epsilon}.adv"))
}

/// Adversarial images with their labels and dataset indices, in the
/// checkpoint container format.
fn dump_adversarial(
    cfg: &ExperimentConfig,
    seed: u64,
    epsilon: f64,
    subset: &Dataset,
    ev: &AttackEvaluation,
    adv: &Tensor,
) -> Result<()> {
    let header = serde_json::json!({
        "run_id": cfg.run_id(),
        "seed": seed,
        "epsilon": epsilon,
        "indices": ev.attacked,
        "success": ev.success,
    });
    let labels: Vec<f64> = ev.attacked.iter().map(|&i| subset.labels()[i] as f64).collect();
    let container = Container {
        header: header.to_string(),
        blobs: vec![("images".into(), adv.clone()), ("labels".into(), Tensor::from_vec(labels))],
    };
    container.write(&adversarial_path(&cfg.output.dir, seed, epsilon))
}

fn summarize_attack(epsilon: f64, ev: &AttackEvaluation) -> AttackSummary {
    AttackSummary {
        epsilon,
        total: ev.total,
        clean_correct: ev.clean_correct,
        flipped: ev.flipped,
        clean_accuracy: ev.clean_accuracy,
        robust_accuracy: ev.robust_accuracy,
        attack_success_rate: ev.attack_success_rate,
        identity_holds: ev.identity_holds(),
        second_argmax: ev.second_argmax.clone(),
    }
}

/// PCA of the softmax outputs of the leading test examples together with
/// those of their successful adversarial versions.
pub fn project_outputs(cfg: &ExperimentConfig, model: &Model, test: &Dataset) -> Result<ProjectionDump> {
    let n = cfg.analysis.pca_examples.min(test.len());
    let subset = test.truncate(n);
    let c = model.num_classes();
    let mut probs = softmax_outputs(model, subset.images())?;
    let mut points: Vec<(bool, usize)> = subset.labels().iter().map(|&y| (false, y)).collect();
    if let Some(eps) = cfg.pca_epsilon() {
        let spec = cfg.attack_spec(eps);
        let ev = evaluate_attack(model, &subset, &spec, &spec.objective(&cfg.loss), true)?;
        if let Some(adv) = &ev.adversarial {
            let hits: Vec<usize> = (0..ev.attacked.len()).filter(|&k| ev.success[k]).collect();
            if !hits.is_empty() {
                let adv_probs = softmax_outputs(model, &adv.select_rows(&hits)?)?;
                probs.extend_from_slice(&adv_probs);
                points.extend(hits.iter().map(|&k| (true, subset.labels()[ev.attacked[k]])));
            }
        }
    }
    let proj = pca_project(&probs, points.len(), c, 2)?;
    Ok(ProjectionDump {
        points: points
            .iter()
            .enumerate()
            .map(|(i, &(adversarial, label))| ProjectionPoint {
                adversarial,
                label,
                x: proj.point(i)[0],
                y: proj.point(i)[1],
            })
            .collect(),
        explained_variance_ratio: proj.explained_variance_ratio,
    })
}

struct SeedOutcome {
    rows: Vec<MetricsRow>,
    summary: SeedSummary,
    model: Model,
    noise_model: Option<Model>,
    distances: Vec<f64>,
}

fn run_seed(cfg: &ExperimentConfig, data: &ExperimentData, noisy_train: Option<&Dataset>, seed: u64) -> Result<SeedOutcome> {
    let (model, epochs, stoch) = train_arm(cfg, &data.train, &data.test, seed, "clean")?;
    let checksum = model.checksum();
    let mut rows: Vec<MetricsRow> = epochs.iter().map(|r| epoch_row(seed, Phase::Train, r, 0.0)).collect();
    let (attack_rows, attacks) = evaluate_attack_grid(cfg, &model, &data.test, seed)?;
    rows.extend(attack_rows);
    if model.checksum() != checksum {
        return Err(Error::Consistency(format!("seed {seed}: model changed during evaluation")));
    }

    let accs: Vec<f64> = epochs.iter().map(|r| r.test_accuracy).collect();
    let dists: Vec<f64> = epochs.iter().map(|r| r.stoch_mean).collect();
    let accuracy_distance_r = match pearson_correlation(&accs, &dists) {
        Ok(r) => Some(r),
        Err(e) => {
            log::debug!("seed {seed}: no accuracy–distance correlation ({e})");
            None
        }
    };

    let mut noise = None;
    let mut noise_model = None;
    if let Some(noisy) = noisy_train {
        let (m, noise_epochs, _) = train_arm(cfg, noisy, &data.test, seed, "noisy")?;
        rows.extend(noise_epochs.iter().map(|r| epoch_row(seed, Phase::Noise, r, cfg.noise.rate)));
        let flipped = noisy.labels().iter().zip(data.train.labels()).filter(|(a, b)| a != b).count();
        noise = Some(NoiseSummary {
            rate: cfg.noise.rate,
            flipped_fraction: flipped as f64 / noisy.len() as f64,
            checksum: m.checksum(),
            epochs: noise_epochs,
        });
        noise_model = Some(m);
    }

    Ok(SeedOutcome {
        rows,
        summary: SeedSummary {
            seed,
            checksum,
            epochs,
            accuracy_distance_r,
            stochasticity: (&stoch).into(),
            attacks,
            noise,
        },
        model,
        noise_model,
        distances: stoch.distances,
    })
}

fn distances_csv(per_seed: &[(u64, &[f64])]) -> String {
    let mut out = String::from("seed,index,distance\n");
    for (seed, d) in per_seed {
        for (i, v) in d.iter().enumerate() {
            let _ = writeln!(out, "{seed},{i},{v}");
        }
    }
    out
}

/// Runs every seed of the experiment and writes all artifacts under
/// `output.dir`. A marker file flags the directory until the run completes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    let marker = dir.join(INCOMPLETE_MARKER);
    write_atomic(&marker, format!("run {} started\n", cfg.run_id()).as_bytes())?;
    match run_inner(cfg, &dir) {
        Ok(result) => {
            std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            Ok(result)
        }
        Err(e) => {
            let _ = write_atomic(&marker, format!("run {} failed: {e}\n", cfg.run_id()).as_bytes());
            Err(e)
        }
    }
}

fn run_inner(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentResult> {
    let data = load_data(cfg)?;
    let test_checksum = dataset_checksum(&data.test);
    let train_checksum = dataset_checksum(&data.train);
    let noisy = if cfg.noise.rate > 0.0 {
        Some(inject_label_noise(&data.train, &cfg.noise)?.0)
    } else {
        None
    };
    log::info!(
        "run {}: {} train / {} test examples, {} seeds",
        cfg.run_id(),
        data.train.len(),
        data.test.len(),
        cfg.seeds.len()
    );

    let outcomes: Vec<Result<SeedOutcome>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, &data, noisy.as_ref(), seed))
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    if dataset_checksum(&data.test) != test_checksum || dataset_checksum(&data.train) != train_checksum {
        return Err(Error::Consistency("a dataset changed during the run".into()));
    }

    let mut warnings = Vec::new();
    for o in &outcomes {
        for a in &o.summary.attacks {
            if a.clean_correct == 0 {
                warnings.push(format!("seed {}: ε = {} had no clean-correct examples", o.summary.seed, a.epsilon));
            }
        }
    }

    let projection = project_outputs(cfg, &outcomes[0].model, &data.test)
        .map_err(|e| warnings.push(format!("projection skipped: {e}")))
        .ok();

    let mut report = empty_report(cfg);
    report.rows = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    let summary = RunSummary {
        run_id: cfg.run_id(),
        config: cfg.clone(),
        train_examples: data.train.len(),
        test_examples: data.test.len(),
        test_checksum,
        seeds: outcomes.iter().map(|o| o.summary.clone()).collect(),
        projection_explained_variance: projection.as_ref().map(|p| p.explained_variance_ratio.clone()),
        warnings,
    };

    let mut files = Vec::new();
    for o in &outcomes {
        let path = checkpoint_path(dir, o.summary.seed, false);
        o.model.save(&path)?;
        files.push(path);
        if let Some(m) = &o.noise_model {
            let path = checkpoint_path(dir, o.summary.seed, true);
            m.save(&path)?;
            files.push(path);
        }
    }
    let mut write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        files.push(path);
        Ok(())
    };
    write(CONFIG_COPY, cfg.to_toml_string()?.as_bytes())?;
    write(METRICS_FILE, report.to_csv()?.as_bytes())?;
    write(SUMMARY_FILE, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    let per_seed: Vec<(u64, &[f64])> = outcomes.iter().map(|o| (o.summary.seed, o.distances.as_slice())).collect();
    write(DISTANCES_FILE, distances_csv(&per_seed).as_bytes())?;
    if let Some(p) = &projection {
        write(PROJECTION_FILE, p.to_csv().as_bytes())?;
    }

    let classes = outcomes[0].model.num_classes();
    let plot_input = PlotInput {
        reports: std::slice::from_ref(&report),
        distances: Some(&outcomes[0].distances),
        max_distance: cfg.analysis.metric.max_distance_to_uniform(classes),
        projection: projection.as_ref(),
    };
    files.extend(emit_plots(&plot_input, dir)?);
    Ok(ExperimentResult { report, summary, files })
}

/// Loads the clean-arm checkpoint of every configured seed.
pub fn load_checkpoints(cfg: &ExperimentConfig) -> Result<Vec<(u64, Model)>> {
    cfg.seeds
        .iter()
        .map(|&seed| Ok((seed, Model::load(&checkpoint_path(&cfg.output.dir, seed, false))?)))
        .collect()
}

/// Re-runs the attack sweep on saved checkpoints; writes attack.csv.
pub fn attack_stage(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let test = load_data(cfg)?.test;
    let mut report = empty_report(cfg);
    for (seed, model) in load_checkpoints(cfg)? {
        report.rows.extend(evaluate_attack_grid(cfg, &model, &test, seed)?.0);
    }
    report.write(&cfg.output.dir.join(ATTACK_FILE))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSummary {
    pub run_id: String,
    pub stochasticity: Vec<(u64, StochasticitySummary)>,
    pub accuracy: Vec<(u64, f64)>,
    pub accuracy_distance_r: Option<f64>,
    pub projection_explained_variance: Vec<f64>,
}

/// Recomputes the analysis artifacts (distances, projection, analysis.json)
/// from saved checkpoints and the run's metrics.csv.
pub fn analyze_stage(cfg: &ExperimentConfig) -> Result<AnalysisSummary> {
    cfg.validate()?;
    let dir = &cfg.output.dir;
    let test = load_data(cfg)?.test;
    let models = load_checkpoints(cfg)?;
    let mut stoch = Vec::new();
    let mut accuracy = Vec::new();
    let mut distances = Vec::new();
    for (seed, model) in &models {
        let s = stochasticity(model, &test, cfg.analysis.metric)?;
        accuracy.push((*seed, crate::analysis::accuracy(model, &test)?));
        stoch.push((*seed, StochasticitySummary::from(&s)));
        distances.push((*seed, s.distances));
    }
    let report = MetricsReport::read(&dir.join(METRICS_FILE))?;
    let (accs, dists): (Vec<f64>, Vec<f64>) = report
        .rows_for(Phase::Train)
        .filter_map(|r| Some((r.clean_acc?, r.stoch_mean?)))
        .unzip();
    let projection = project_outputs(cfg, &models[0].1, &test)?;
    let per_seed: Vec<(u64, &[f64])> = distances.iter().map(|(s, d)| (*s, d.as_slice())).collect();
    write_atomic(&dir.join(DISTANCES_FILE), distances_csv(&per_seed).as_bytes())?;
    write_atomic(&dir.join(PROJECTION_FILE), projection.to_csv().as_bytes())?;
    let summary = AnalysisSummary {
        run_id: cfg.run_id(),
        stochasticity: stoch,
        accuracy,
        accuracy_distance_r: pearson_correlation(&accs, &dists).ok(),
        projection_explained_variance: projection.explained_variance_ratio,
    };
    write_atomic(&dir.join(ANALYSIS_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}
