//! The stage loop: source training, then per target domain adapt, label,
//! generalize and refresh the buffer. Handles the ablation variants,
//! checkpointing, resume and result files.
//!
//! Output layout of [`run_experiment`]:
//!
//! ```text
//! <out>/config.json
//! <out>/results.json
//! <out>/seed_<s>/state.json
//! <out>/seed_<s>/curves.csv
//! <out>/seed_<s>/train_log.csv
//! <out>/seed_<s>/dg_stage_<t>.ckpt
//! <out>/seed_<s>/da_stage_<t>.ckpt
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_domain_with, generate_pseudo_labels};
use crate::config::{ExperimentConfig, Variant};
use crate::data::{Dataset, DomainSequence};
use crate::error::{invalid, io_err, CodagError, Result};
use crate::evaluate::{
    accuracy, accuracy_of, log_curves, mean_std, AccuracyMatrix, CurveRecord, MeanStd,
    MetricsReport, Role,
};
use crate::generalize::{train_dg_source_with, train_dg_target_with, DGConfig, TrainRngs};
use crate::nnmodel::{init_params, load_checkpoint, save_checkpoint, ClassifierParams};
use crate::replay::{update_buffer, NewDomain, ReplayBuffer};
use crate::rng::{substream, Stream};
use crate::train::EpochReport;

const STATE_VERSION: u32 = 1;

/// One row of `train_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub stage: usize,
    pub model: Role,
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
}

/// Everything carried from one stage to the next.
#[derive(Debug, Clone)]
pub struct RunState {
    pub seed: u64,
    pub completed_stages: usize,
    pub dg: Option<ClassifierParams>,
    pub da: Option<ClassifierParams>,
    pub buffer: ReplayBuffer,
    pub da_matrix: AccuracyMatrix,
    pub dg_matrix: AccuracyMatrix,
    pub curves: Vec<CurveRecord>,
    pub train_log: Vec<TrainLogRecord>,
    /// Accuracy of the pseudo-labels handed to DG training, per stage.
    pub pseudo_label_accuracy: Vec<Option<f64>>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: u32,
    config_digest: String,
    seed: u64,
    completed_stages: usize,
    has_da: bool,
    buffer: ReplayBuffer,
    da_matrix: AccuracyMatrix,
    dg_matrix: AccuracyMatrix,
    curves: Vec<CurveRecord>,
    train_log: Vec<TrainLogRecord>,
    pseudo_label_accuracy: Vec<Option<f64>>,
}

impl RunState {
    pub fn new(seed: u64, n_domains: usize, capacity: usize, k: usize) -> Self {
        Self {
            seed,
            completed_stages: 0,
            dg: None,
            da: None,
            buffer: ReplayBuffer::new(capacity, k),
            da_matrix: AccuracyMatrix::new(Role::Da, n_domains),
            dg_matrix: AccuracyMatrix::new(Role::Dg, n_domains),
            curves: Vec::new(),
            train_log: Vec::new(),
            pseudo_label_accuracy: Vec::new(),
        }
    }

    /// Writes `state.json` and the checkpoints of the last completed stage.
    pub fn save(&self, dir: &Path, config_digest: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let last = self
            .completed_stages
            .checked_sub(1)
            .ok_or_else(|| CodagError::State("nothing to save before stage 0".into()))?;
        let dg = self
            .dg
            .as_ref()
            .ok_or_else(|| CodagError::State("missing DG model".into()))?;
        save_checkpoint(dg, &dir.join(format!("dg_stage_{last}.ckpt")))?;
        if let Some(da) = &self.da {
            save_checkpoint(da, &dir.join(format!("da_stage_{last}.ckpt")))?;
        }
        let file = StateFile {
            version: STATE_VERSION,
            config_digest: config_digest.to_string(),
            seed: self.seed,
            completed_stages: self.completed_stages,
            has_da: self.da.is_some(),
            buffer: self.buffer.clone(),
            da_matrix: self.da_matrix.clone(),
            dg_matrix: self.dg_matrix.clone(),
            curves: self.curves.clone(),
            train_log: self.train_log.clone(),
            pseudo_label_accuracy: self.pseudo_label_accuracy.clone(),
        };
        let path = dir.join("state.json");
        let tmp = dir.join("state.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&file)?)
            .map_err(io_err(format!("writing {}", tmp.display())))?;
        std::fs::rename(&tmp, &path).map_err(io_err(format!("writing {}", path.display())))
    }

    /// Restores a state saved under the same configuration.
    pub fn load(dir: &Path, config_digest: &str) -> Result<Self> {
        let path = dir.join("state.json");
        let bytes = std::fs::read(&path).map_err(io_err(format!("reading {}", path.display())))?;
        let file: StateFile = serde_json::from_slice(&bytes)?;
        if file.version != STATE_VERSION {
            return Err(CodagError::State(format!(
                "unsupported state version {}",
                file.version
            )));
        }
        if file.config_digest != config_digest {
            return Err(CodagError::State(format!(
                "{} was written by a different configuration",
                path.display()
            )));
        }
        let last = file
            .completed_stages
            .checked_sub(1)
            .ok_or_else(|| CodagError::State("saved state has no completed stage".into()))?;
        let dg = load_checkpoint(&dir.join(format!("dg_stage_{last}.ckpt")))?;
        let da = if file.has_da {
            Some(load_checkpoint(&dir.join(format!("da_stage_{last}.ckpt")))?)
        } else {
            None
        };
        Ok(Self {
            seed: file.seed,
            completed_stages: file.completed_stages,
            dg: Some(dg),
            da,
            buffer: file.buffer,
            da_matrix: file.da_matrix,
            dg_matrix: file.dg_matrix,
            curves: file.curves,
            train_log: file.train_log,
            pseudo_label_accuracy: file.pseudo_label_accuracy,
        })
    }
}

/// A configuration bound to its generated domains.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub sequence: DomainSequence,
    /// Domain index visited at each stage.
    pub order: Vec<usize>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let sequence = DomainSequence::build(&config.sequence)?;
        let order = config.stage_order()?;
        Ok(Self {
            config,
            sequence,
            order,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.order.len()
    }

    pub fn train_set(&self, stage: usize) -> &Dataset {
        &self.sequence.train_sets[self.order[stage]]
    }

    pub fn test_set(&self, stage: usize) -> &Dataset {
        &self.sequence.test_sets[self.order[stage]]
    }

    pub fn initial_state(&self, seed: u64) -> RunState {
        RunState::new(
            seed,
            self.n_stages(),
            self.buffer_capacity(),
            self.config.sequence.k,
        )
    }

    fn buffer_capacity(&self) -> usize {
        match self.config.run.variant {
            Variant::CodagNoBuffer | Variant::DaOnly => 0,
            _ => self.config.buffer.capacity,
        }
    }

    fn dg_config(&self) -> DGConfig {
        let mut cfg = self.config.dg.clone();
        if self.config.run.variant == Variant::CodagNoSelnlpl {
            cfg.selnlpl = false;
        }
        cfg
    }

    /// Accuracy on every test set, in stage order.
    pub fn evaluate_all(&self, params: &ClassifierParams) -> Result<Vec<f64>> {
        (0..self.n_stages())
            .map(|s| accuracy(params, self.test_set(s)))
            .collect()
    }

    /// Runs stage `stage` and folds its results into `state`. Stages must run
    /// in order; on error `state` is left untouched.
    pub fn run_stage(&self, state: &mut RunState, stage: usize) -> Result<()> {
        if stage != state.completed_stages {
            return Err(CodagError::State(format!(
                "stage {stage} requested but {} stages are complete",
                state.completed_stages
            )));
        }
        if stage >= self.n_stages() {
            return Err(CodagError::State(format!(
                "stage {stage} beyond the last domain"
            )));
        }
        let variant = self.config.run.variant;
        let seed = state.seed;
        let log_every_epoch = self.config.run.log_curves;
        let mut curves = Vec::new();
        let mut log = Vec::new();

        let record = |role: Role,
                      rep: &EpochReport,
                      params: &ClassifierParams,
                      curves: &mut Vec<CurveRecord>,
                      log: &mut Vec<TrainLogRecord>|
         -> Result<()> {
            log.push(TrainLogRecord {
                stage,
                model: role,
                epoch: rep.epoch,
                phase: rep.phase.as_str().to_string(),
                loss: rep.mean_loss,
            });
            if log_every_epoch {
                let accs = self.evaluate_all(params)?;
                log_curves(curves, stage, rep.epoch, &accs);
            }
            Ok(())
        };

        let dg_cfg = self.dg_config();
        let mut aug_rng = substream(seed, Stream::Aug, stage);
        let mut shuffle_rng = substream(seed, Stream::Shuffle, stage);
        let mut nl_rng = substream(seed, Stream::Nl, stage);
        let mut buffer = state.buffer.clone();
        let mut pl_acc = None;

        let (dg, da) = if stage == 0 {
            let init = init_params(&self.config.model, &mut substream(seed, Stream::Init, 0))?;
            let source = self.train_set(0);
            let role = if variant == Variant::DaOnly {
                Role::Da
            } else {
                Role::Dg
            };
            let dg = train_dg_source_with(
                &init,
                source,
                &dg_cfg,
                &self.config.aug,
                TrainRngs {
                    aug: &mut aug_rng,
                    shuffle: &mut shuffle_rng,
                    nl: &mut nl_rng,
                },
                &mut |rep, p| record(role, rep, p, &mut curves, &mut log),
            )?;
            if buffer.capacity > 0 {
                buffer = update_buffer(&buffer, NewDomain::Source(source), &dg)?;
            }
            (dg, None)
        } else {
            let prev_dg = state
                .dg
                .as_ref()
                .ok_or_else(|| CodagError::State("no DG model from the previous stage".into()))?;
            let target = self.train_set(stage);
            let truth = self.test_set(stage).labels()?;
            let mut adapt_rng = substream(seed, Stream::Adapt, stage);
            match variant {
                Variant::DaOnly => {
                    let start = state.da.as_ref().unwrap_or(prev_dg);
                    let da = adapt_domain_with(
                        start,
                        target,
                        &self.config.adapt,
                        &mut adapt_rng,
                        &mut |rep, p| record(Role::Da, rep, p, &mut curves, &mut log),
                    )?;
                    (da, None)
                }
                _ => {
                    let labeler = match variant {
                        Variant::DgOnly => prev_dg.clone(),
                        Variant::CodagDaInit if stage >= 2 => {
                            let prev_da = state.da.as_ref().ok_or_else(|| {
                                CodagError::State("no DA model from the previous stage".into())
                            })?;
                            adapt_domain_with(
                                prev_da,
                                target,
                                &self.config.adapt,
                                &mut adapt_rng,
                                &mut |rep, _| {
                                    record_loss(&mut log, stage, Role::Da, rep);
                                    Ok(())
                                },
                            )?
                        }
                        _ => adapt_domain_with(
                            prev_dg,
                            target,
                            &self.config.adapt,
                            &mut adapt_rng,
                            &mut |rep, _| {
                                record_loss(&mut log, stage, Role::Da, rep);
                                Ok(())
                            },
                        )?,
                    };
                    let mut pl = generate_pseudo_labels(&labeler, target)?;
                    if self.config.run.pseudo_label_noise > 0.0 {
                        pl.flip_labels(
                            self.config.run.pseudo_label_noise,
                            &mut substream(seed, Stream::Noise, stage),
                        )?;
                    }
                    pl_acc = Some(accuracy_of(&pl.pseudo_labels, &truth));
                    let dg = train_dg_target_with(
                        prev_dg,
                        &pl,
                        &buffer,
                        &dg_cfg,
                        &self.config.aug,
                        TrainRngs {
                            aug: &mut aug_rng,
                            shuffle: &mut shuffle_rng,
                            nl: &mut nl_rng,
                        },
                        &mut |rep, p| record(Role::Dg, rep, p, &mut curves, &mut log),
                    )?;
                    if buffer.capacity > 0 {
                        buffer = update_buffer(&buffer, NewDomain::Target(&pl), &dg)?;
                    }
                    let da = (variant != Variant::DgOnly).then_some(labeler);
                    (dg, da)
                }
            }
        };

        let dg_row = self.evaluate_all(&dg)?;
        let da_row = match &da {
            Some(model) => Some(self.evaluate_all(model)?),
            None if variant.single_model() => Some(dg_row.clone()),
            None => None,
        };
        let mut da_matrix = state.da_matrix.clone();
        let mut dg_matrix = state.dg_matrix.clone();
        dg_matrix.set_row(stage, dg_row)?;
        if let Some(row) = da_row {
            da_matrix.set_row(stage, row)?;
        }

        state.completed_stages += 1;
        state.da = if variant == Variant::DaOnly {
            Some(dg.clone())
        } else {
            da
        };
        state.dg = Some(dg);
        state.buffer = buffer;
        state.da_matrix = da_matrix;
        state.dg_matrix = dg_matrix;
        state.curves.extend(curves);
        state.train_log.extend(log);
        state.pseudo_label_accuracy.push(pl_acc);
        Ok(())
    }

    /// Runs (or resumes) every stage for one seed.
    pub fn run_seed(&self, seed: u64, dir: Option<&Path>, resume: bool) -> Result<SeedResult> {
        let digest = self.config.digest();
        let mut state = match dir {
            Some(d) if resume && d.join("state.json").exists() => {
                let s = RunState::load(d, &digest)?;
                if s.seed != seed {
                    return Err(CodagError::State(format!(
                        "{} holds seed {}",
                        d.display(),
                        s.seed
                    )));
                }
                s
            }
            _ => self.initial_state(seed),
        };
        for stage in state.completed_stages..self.n_stages() {
            self.run_stage(&mut state, stage)?;
            if let Some(d) = dir {
                state.save(d, &digest)?;
            }
        }
        if let Some(d) = dir {
            write_csv(&d.join("curves.csv"), &state.curves)?;
            write_csv(&d.join("train_log.csv"), &state.train_log)?;
        }
        SeedResult::from_state(&state, self.order.clone())
    }
}

fn record_loss(log: &mut Vec<TrainLogRecord>, stage: usize, model: Role, rep: &EpochReport) {
    log.push(TrainLogRecord {
        stage,
        model,
        epoch: rep.epoch,
        phase: rep.phase.as_str().to_string(),
        loss: rep.mean_loss,
    });
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let wrap = |e: csv::Error| CodagError::Io {
        context: format!("writing {}", path.display()),
        source: e.into(),
    };
    let mut writer = csv::Writer::from_path(path).map_err(wrap)?;
    for row in rows {
        writer.serialize(row).map_err(wrap)?;
    }
    writer
        .flush()
        .map_err(io_err(format!("writing {}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub domain_order: Vec<usize>,
    pub da_matrix: AccuracyMatrix,
    pub dg_matrix: AccuracyMatrix,
    pub metrics: MetricsReport,
    pub pseudo_label_accuracy: Vec<Option<f64>>,
}

impl SeedResult {
    fn from_state(state: &RunState, domain_order: Vec<usize>) -> Result<Self> {
        Ok(Self {
            seed: state.seed,
            domain_order,
            metrics: MetricsReport::compute(&state.da_matrix, &state.dg_matrix)?,
            da_matrix: state.da_matrix.clone(),
            dg_matrix: state.dg_matrix.clone(),
            pseudo_label_accuracy: state.pseudo_label_accuracy.clone(),
        })
    }
}

/// Mean and population std across seeds of each metric mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tda: Option<MeanStd>,
    pub tdg: Option<MeanStd>,
    pub fa: Option<MeanStd>,
    pub all: Option<MeanStd>,
}

impl Aggregate {
    pub fn over<'a>(metrics: impl IntoIterator<Item = &'a MetricsReport>) -> Self {
        let (mut a, mut g, mut f, mut all) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for m in metrics {
            a.push(m.tda_mean);
            g.extend(m.tdg_mean);
            f.extend(m.fa_mean);
            all.push(m.all);
        }
        Self {
            tda: mean_std(&a),
            tdg: mean_std(&g),
            fa: mean_std(&f),
            all: mean_std(&all),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config_digest: String,
    pub variant: Variant,
    pub seeds: Vec<SeedResult>,
    pub aggregate: Aggregate,
}

/// Runs every configured seed, `jobs` at a time, and writes result files
/// under `out` when given. With `resume`, finished stages found on disk are
/// not recomputed.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: Option<&Path>,
    jobs: usize,
    resume: bool,
) -> Result<ExperimentResults> {
    let experiment = Experiment::new(config.clone())?;
    let digest = config.digest();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(config)?).map_err(
            io_err(format!("writing {}", dir.join("config.json").display())),
        )?;
    }
    let seed_dir = |seed: u64| out.map(|d| d.join(format!("seed_{seed}")));
    let seeds = &config.run.seeds;
    let mut results: Vec<SeedResult> = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(jobs.max(1)) {
        let outcomes: Vec<Result<SeedResult>> = if chunk.len() == 1 {
            vec![experiment.run_seed(chunk[0], seed_dir(chunk[0]).as_deref(), resume)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&seed| {
                        let exp = &experiment;
                        let dir = seed_dir(seed);
                        scope.spawn(move || exp.run_seed(seed, dir.as_deref(), resume))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(CodagError::State("worker panicked".into())))
                    })
                    .collect()
            })
        };
        for outcome in outcomes {
            results.push(outcome?);
        }
    }
    let aggregate = Aggregate::over(results.iter().map(|r| &r.metrics));
    let report = ExperimentResults {
        config_digest: digest,
        variant: config.run.variant,
        seeds: results,
        aggregate,
    };
    if let Some(dir) = out {
        let path = dir.join("results.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&report)?)
            .map_err(io_err(format!("writing {}", path.display())))?;
    }
    Ok(report)
}

/// Per-variant summary across every `results.json` found under a directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub n_runs: usize,
    pub aggregate: Aggregate,
}

pub fn find_results(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries =
            std::fs::read_dir(&dir).map_err(io_err(format!("reading {}", dir.display())))?;
        for entry in entries {
            let path = entry
                .map_err(io_err(format!("reading {}", dir.display())))?
                .path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "results.json") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Aggregates every seed of every run under `root`, grouped by variant.
pub fn summarize_runs(root: &Path) -> Result<Vec<VariantSummary>> {
    let files = find_results(root)?;
    if files.is_empty() {
        return Err(invalid(format!("no results.json under {}", root.display())));
    }
    let mut groups: Vec<(Variant, usize, Vec<MetricsReport>)> = Vec::new();
    for path in files {
        let bytes = std::fs::read(&path).map_err(io_err(format!("reading {}", path.display())))?;
        let run: ExperimentResults = serde_json::from_slice(&bytes)?;
        let metrics = run.seeds.into_iter().map(|s| s.metrics);
        match groups.iter_mut().find(|(v, _, _)| *v == run.variant) {
            Some((_, n, all)) => {
                *n += 1;
                all.extend(metrics);
            }
            None => groups.push((run.variant, 1, metrics.collect())),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(variant, n_runs, metrics)| VariantSummary {
            variant,
            n_runs,
            aggregate: Aggregate::over(&metrics),
        })
        .collect())
}

/// Fixed-width table of mean ± std, in percent.
pub fn format_summary(rows: &[VariantSummary]) -> String {
    let cell = |m: &Option<MeanStd>| match m {
        Some(m) => format!("{:>6.2} ± {:<5.2}", 100.0 * m.mean, 100.0 * m.std),
        None => format!("{:>14}", "-"),
    };
    let mut out = format!(
        "{:<18} {:>4}  {:<14} {:<14} {:<14} {:<14}\n",
        "variant", "runs", "TDA", "TDG", "FA", "All"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:>4}  {} {} {} {}\n",
            r.variant.as_str(),
            r.n_runs,
            cell(&r.aggregate.tda),
            cell(&r.aggregate.tdg),
            cell(&r.aggregate.fa),
            cell(&r.aggregate.all)
        ));
    }
    out
}
