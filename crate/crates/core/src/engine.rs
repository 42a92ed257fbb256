//! The round loop: select, train locally, aggregate, evaluate, record,
//! checkpoint.
//!
//! Every random stream is derived from `master_seed` (and the round and
//! collaborator indices where relevant), so a run is reproducible from its
//! config alone, independent of the worker count. Checkpoints capture the
//! master parameters, the scheduler state (including its generator) and the
//! records so far; datasets are regenerated from the config and are never
//! written out.
//!
//! Checkpoint layout under `output_dir`:
//!
//! ```text
//! records.jsonl            one RoundRecord per line, appended as rounds finish
//! round_<k>/master.ckpt    master parameters after round k
//! round_<k>/scheduler.json scheduler state after round k
//! round_<k>/rng.json       seed manifest
//! round_<k>/records.jsonl  records 1..=k
//! round_<k>/config.json    the config that produced the run
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, round_drift, AggregationConfig, AggregationWeights};
use crate::collaborator::{evaluate, local_train, LocalTrainConfig};
use crate::error::{Error, Result};
use crate::model::TaskSpec;
use crate::params::ParameterSet;
use crate::partition::{
    make_partition, materialize_shard, Dataset, PartitionConfig, ShardSpec, TaskGenerator,
};
use crate::rng::{derive_seed, stream};
use crate::selection::{roster_ids, SchedulerConfig, SchedulerState};

pub const RECORD_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub rounds: u32,
    pub master_seed: u64,
    pub scheduler: SchedulerConfig,
    pub aggregation: AggregationConfig,
    pub partition: PartitionConfig,
    pub task: TaskSpec,
    pub local: LocalTrainConfig,
    pub eval_every: u32,
    /// 0 disables periodic checkpoints; the final round is always saved when
    /// an output directory is set.
    pub checkpoint_every: u32,
    /// Size of the held-out IID validation set relative to `total_samples`.
    pub validation_fraction: f64,
    /// Accuracy level for `rounds_to_threshold` in reports.
    pub accuracy_threshold: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            rounds: 20,
            master_seed: 0,
            scheduler: SchedulerConfig::default(),
            aggregation: AggregationConfig::default(),
            partition: PartitionConfig::default(),
            task: TaskSpec::default(),
            local: LocalTrainConfig::default(),
            eval_every: 1,
            checkpoint_every: 5,
            validation_fraction: 0.1,
            accuracy_threshold: 0.8,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::BadConfig("rounds must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::BadConfig("eval_every must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 1.0) {
            return Err(Error::BadConfig(
                "validation_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.partition.num_features != self.task.num_features
            || self.partition.num_classes != self.task.num_classes
        {
            return Err(Error::BadConfig(format!(
                "partition dimensions ({} features, {} classes) differ from task ({}, {})",
                self.partition.num_features,
                self.partition.num_classes,
                self.task.num_features,
                self.task.num_classes
            )));
        }
        self.scheduler.validate()?;
        self.aggregation.validate()?;
        self.partition.validate()?;
        self.task.validate()?;
        self.local.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    fn seeds(&self) -> SeedManifest {
        let m = self.master_seed;
        SeedManifest {
            schema: RECORD_SCHEMA,
            master_seed: m,
            partition: derive_seed(m, stream::PARTITION, self.partition.seed),
            schedule: derive_seed(m, stream::SCHEDULE, self.scheduler.seed),
            task: derive_seed(m, stream::TASK, 0),
            init: derive_seed(m, stream::INIT, 0),
            validation: derive_seed(m, stream::VALIDATION, 0),
            train: derive_seed(m, stream::TRAIN, 0),
            completed_rounds: 0,
        }
    }

    /// The scheduler a run under this config starts from.
    pub fn initial_scheduler(&self) -> Result<SchedulerState> {
        self.scheduler.validate()?;
        SchedulerState::new(
            roster_ids(self.partition.num_collaborators),
            SchedulerConfig {
                seed: self.seeds().schedule,
                ..self.scheduler
            },
        )
    }

    /// Shard descriptors, shard datasets and the validation set of a run
    /// under this config.
    pub fn build_data(&self) -> Result<FederatedData> {
        self.validate()?;
        build_data(self, &self.seeds())
    }

    /// Fields that may differ between a checkpoint and the config resuming it.
    const RESUMABLE_FIELDS: [&'static str; 3] = ["rounds", "checkpoint_every", "output_dir"];
}

/// Seeds of every random stream, persisted as `rng.json`. The scheduler's
/// live generator state is in `scheduler.json`; the other streams are
/// re-derived from these seeds and the round index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SeedManifest {
    schema: u32,
    master_seed: u64,
    partition: u64,
    schedule: u64,
    task: u64,
    init: u64,
    validation: u64,
    train: u64,
    completed_rounds: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub schema: u32,
    pub round: u32,
    pub selected: Vec<String>,
    pub sample_counts: Vec<u64>,
    #[serde(with = "crate::hexfloat::vec")]
    pub local_loss_before: Vec<f64>,
    #[serde(with = "crate::hexfloat::vec")]
    pub local_loss_after: Vec<f64>,
    pub weights: AggregationWeights,
    /// Mean over selected collaborators of the whole-set training displacement.
    #[serde(with = "crate::hexfloat::scalar")]
    pub drift: f64,
    #[serde(with = "crate::hexfloat::option")]
    pub val_loss: Option<f64>,
    #[serde(with = "crate::hexfloat::option")]
    pub val_acc: Option<f64>,
    #[serde(with = "crate::hexfloat::scalar")]
    pub cum_comm_cost: f64,
    pub wall_ms: u64,
}

impl RoundRecord {
    /// The record with its wall-clock field zeroed, for replay comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RoundRecord = serde_json::from_str(&line).map_err(|e| {
            Error::CorruptCheckpoint(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        if rec.schema != RECORD_SCHEMA {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported record schema {}",
                rec.schema
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

fn write_records(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&r.to_json_line()?);
        buf.push('\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub roster: Vec<String>,
    pub final_params: ParameterSet,
    pub records: Vec<RoundRecord>,
}

/// A federation in progress.
pub struct Experiment {
    cfg: ExperimentConfig,
    seeds: SeedManifest,
    roster: Vec<String>,
    shards: Vec<Dataset>,
    validation: Dataset,
    scheduler: SchedulerState,
    master: ParameterSet,
    records: Vec<RoundRecord>,
    participations: u64,
    pool: rayon::ThreadPool,
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::BadConfig(format!("worker pool: {e}")))
}

impl Experiment {
    /// Builds the data and initial state. `workers = 0` uses all cores.
    pub fn new(cfg: ExperimentConfig, workers: usize) -> Result<Self> {
        cfg.validate()?;
        let seeds = cfg.seeds();
        let FederatedData {
            specs,
            shards,
            validation,
        } = build_data(&cfg, &seeds)?;
        let roster: Vec<String> = specs.into_iter().map(|s| s.collab_id).collect();
        let scheduler = cfg.initial_scheduler()?;
        debug_assert_eq!(scheduler.roster(), roster.as_slice());
        let master = cfg.task.init_params(seeds.init)?;
        Ok(Self {
            cfg,
            seeds,
            roster,
            shards,
            validation,
            scheduler,
            master,
            records: Vec::new(),
            participations: 0,
            pool: build_pool(workers)?,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn master(&self) -> &ParameterSet {
        &self.master
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn roster(&self) -> &[String] {
        &self.roster
    }

    pub fn completed_rounds(&self) -> u32 {
        self.records.len() as u32
    }

    pub fn validation_set(&self) -> &Dataset {
        &self.validation
    }

    pub fn shard(&self, collab_id: &str) -> Option<&Dataset> {
        self.roster
            .iter()
            .position(|id| id == collab_id)
            .map(|i| &self.shards[i])
    }

    /// Seed of the local-training stream of the collaborator at `roster_index`
    /// in `round`.
    pub fn train_seed(&self, round: u32, roster_index: usize) -> u64 {
        let round_seed = derive_seed(self.seeds.train, stream::TRAIN, round as u64);
        derive_seed(round_seed, stream::TRAIN, roster_index as u64)
    }

    /// Runs one federation round and returns its record.
    pub fn step(&mut self) -> Result<&RoundRecord> {
        let started = Instant::now();
        let plan = self.scheduler.next_round();
        let round = plan.round_index;

        let jobs: Vec<(usize, &str, u64)> = plan
            .selected
            .iter()
            .map(|id| {
                let idx = self
                    .roster
                    .iter()
                    .position(|r| r == id)
                    .expect("scheduler only yields roster ids");
                (idx, id.as_str(), self.train_seed(round, idx))
            })
            .collect();
        let (master, shards, task) = (&self.master, &self.shards, &self.cfg.task);
        let local = self.cfg.local;
        let outcomes = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(idx, id, seed)| {
                    let shard = &shards[idx];
                    let before = evaluate(master, shard, task)?.loss;
                    let cfg = LocalTrainConfig { seed, ..local };
                    let update = local_train(id, master, shard, task, &cfg)?;
                    let after = evaluate(&update.params, shard, task)?.loss;
                    Ok((update, before, after))
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut updates = Vec::with_capacity(outcomes.len());
        let mut before = Vec::with_capacity(outcomes.len());
        let mut after = Vec::with_capacity(outcomes.len());
        for (u, b, a) in outcomes {
            updates.push(u);
            before.push(b);
            after.push(a);
        }

        let (next_master, weights) = aggregate(&updates, round, &self.cfg.aggregation)?;
        let drift = round_drift(&updates, self.cfg.aggregation.norm)?;

        let (val_loss, val_acc) =
            if round.is_multiple_of(self.cfg.eval_every) || round == self.cfg.rounds {
                let m = evaluate(&next_master, &self.validation, &self.cfg.task)?;
                (Some(m.loss), Some(m.accuracy))
            } else {
                (None, None)
            };

        self.participations += updates.len() as u64;
        let cum_comm_cost = self.participations as f64 / (round as f64 * self.roster.len() as f64);
        let record = RoundRecord {
            schema: RECORD_SCHEMA,
            round,
            selected: plan.selected,
            sample_counts: updates.iter().map(|u| u.sample_count).collect(),
            local_loss_before: before,
            local_loss_after: after,
            weights,
            drift,
            val_loss,
            val_acc,
            cum_comm_cost,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        debug!("round {round}: selected {:?}", record.selected);
        if let Some(loss) = record.val_loss {
            info!("round {round}: val_loss {loss:.6} drift {drift:.3e}");
        }
        self.master = next_master;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Runs the remaining rounds, appending records and writing checkpoints
    /// when an output directory is configured.
    pub fn run(mut self) -> Result<ExperimentResult> {
        let out = self.cfg.output_dir.clone();
        if let Some(dir) = &out {
            fs::create_dir_all(dir)?;
            write_records(&dir.join("records.jsonl"), &self.records)?;
            if self.records.is_empty() {
                self.checkpoint(dir)?;
            }
        }
        while self.completed_rounds() < self.cfg.rounds {
            self.step()?;
            let round = self.completed_rounds();
            if let Some(dir) = &out {
                let mut f = OpenOptions::new()
                    .append(true)
                    .open(dir.join("records.jsonl"))?;
                writeln!(
                    f,
                    "{}",
                    self.records.last().expect("stepped").to_json_line()?
                )?;
                let periodic = self.cfg.checkpoint_every > 0
                    && round.is_multiple_of(self.cfg.checkpoint_every);
                if periodic || round == self.cfg.rounds {
                    self.checkpoint(dir)?;
                }
            }
        }
        Ok(ExperimentResult {
            config: self.cfg,
            roster: self.roster,
            final_params: self.master,
            records: self.records,
        })
    }

    /// Writes `round_<k>/` for the current state. The directory is assembled
    /// under a temporary name and renamed into place.
    pub fn checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let k = self.completed_rounds();
        let target = dir.join(format!("round_{k}"));
        let tmp = dir.join(format!(".round_{k}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        self.master.save(&tmp.join("master.ckpt"))?;
        fs::write(
            tmp.join("scheduler.json"),
            serde_json::to_vec_pretty(&self.scheduler)?,
        )?;
        let manifest = SeedManifest {
            completed_rounds: k,
            ..self.seeds.clone()
        };
        fs::write(tmp.join("rng.json"), serde_json::to_vec_pretty(&manifest)?)?;
        write_records(&tmp.join("records.jsonl"), &self.records)?;
        fs::write(
            tmp.join("config.json"),
            serde_json::to_vec_pretty(&self.cfg)?,
        )?;
        if target.exists() {
            fs::remove_dir_all(&target)?;
        }
        fs::rename(&tmp, &target)?;
        Ok(target)
    }

    /// Restores the state saved in `checkpoint` under `cfg`, which may differ
    /// from the saved config only in `rounds`, `checkpoint_every` and
    /// `output_dir`.
    pub fn restore(checkpoint: &Path, cfg: ExperimentConfig, workers: usize) -> Result<Self> {
        let corrupt = |what: &str, e: &dyn std::fmt::Display| {
            Error::CorruptCheckpoint(format!("{}: {what}: {e}", checkpoint.display()))
        };
        let saved_text = fs::read_to_string(checkpoint.join("config.json"))
            .map_err(|e| corrupt("config.json", &e))?;
        let saved: ExperimentConfig =
            serde_json::from_str(&saved_text).map_err(|e| corrupt("config.json", &e))?;
        config_difference(&saved, &cfg)?;

        let mut exp = Self::new(cfg, workers)?;
        let master = ParameterSet::load(&checkpoint.join("master.ckpt")).map_err(|e| match e {
            Error::CorruptCheckpoint(_) => e,
            other => corrupt("master.ckpt", &other),
        })?;
        exp.cfg
            .task
            .ensure_schema(&master)
            .map_err(|e| Error::ConfigMismatch(e.to_string()))?;

        let manifest: SeedManifest = serde_json::from_slice(
            &fs::read(checkpoint.join("rng.json")).map_err(|e| corrupt("rng.json", &e))?,
        )
        .map_err(|e| corrupt("rng.json", &e))?;
        let expected = SeedManifest {
            completed_rounds: manifest.completed_rounds,
            ..exp.seeds.clone()
        };
        if manifest != expected {
            return Err(Error::CorruptCheckpoint(
                "rng.json seeds do not match the config".into(),
            ));
        }

        let scheduler: SchedulerState = serde_json::from_slice(
            &fs::read(checkpoint.join("scheduler.json"))
                .map_err(|e| corrupt("scheduler.json", &e))?,
        )
        .map_err(|e| corrupt("scheduler.json", &e))?;
        if scheduler.roster() != exp.roster.as_slice()
            || scheduler.round_index() != manifest.completed_rounds
        {
            return Err(Error::CorruptCheckpoint(
                "scheduler state does not match the run".into(),
            ));
        }

        let records = read_records(&checkpoint.join("records.jsonl"))?;
        if records.len() as u32 != manifest.completed_rounds
            || records
                .iter()
                .enumerate()
                .any(|(i, r)| r.round != i as u32 + 1)
        {
            return Err(Error::CorruptCheckpoint(
                "records do not cover rounds 1..=k".into(),
            ));
        }
        if manifest.completed_rounds > exp.cfg.rounds {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint is at round {} but the config stops at {}",
                manifest.completed_rounds, exp.cfg.rounds
            )));
        }

        exp.participations = records.iter().map(|r| r.selected.len() as u64).sum();
        exp.master = master;
        exp.scheduler = scheduler;
        exp.records = records;
        Ok(exp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub specs: Vec<ShardSpec>,
    pub shards: Vec<Dataset>,
    pub validation: Dataset,
}

fn build_data(cfg: &ExperimentConfig, seeds: &SeedManifest) -> Result<FederatedData> {
    let partition = PartitionConfig {
        seed: seeds.partition,
        ..cfg.partition.clone()
    };
    let specs = make_partition(&partition)?;
    let generator = TaskGenerator::new(&cfg.task, seeds.task)?;
    let shards = specs
        .iter()
        .map(|s| materialize_shard(s, &cfg.task, &generator))
        .collect::<Result<Vec<_>>>()?;
    let n_val =
        ((cfg.partition.total_samples as f64 * cfg.validation_fraction).round() as usize).max(1);
    let validation = generator.iid_dataset(n_val, cfg.partition.noise_scale, seeds.validation)?;
    Ok(FederatedData {
        specs,
        shards,
        validation,
    })
}

/// Errors with the first config field (dotted path) that differs, ignoring
/// the resumable fields.
fn config_difference(saved: &ExperimentConfig, cfg: &ExperimentConfig) -> Result<()> {
    let strip = |c: &ExperimentConfig| -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(c)?;
        if let Some(map) = v.as_object_mut() {
            for k in ExperimentConfig::RESUMABLE_FIELDS {
                map.remove(k);
            }
        }
        Ok(v)
    };
    let (a, b) = (strip(saved)?, strip(cfg)?);
    match first_difference(&a, &b, String::new()) {
        Some(path) => Err(Error::ConfigMismatch(format!(
            "`{path}` differs from the checkpoint"
        ))),
        None => Ok(()),
    }
}

fn first_difference(a: &serde_json::Value, b: &serde_json::Value, path: String) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (x.get(k), y.get(k)) {
                    (Some(l), Some(r)) => first_difference(l, r, p),
                    _ => Some(p),
                }
            })
        }
        _ if a == b => None,
        _ => Some(if path.is_empty() {
            "<root>".into()
        } else {
            path
        }),
    }
}

/// Latest `round_<k>` checkpoint under a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(u32, PathBuf)> = None;
    for entry in fs::read_dir(run_dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(k) = name
            .to_str()
            .and_then(|n| n.strip_prefix("round_"))
            .and_then(|k| k.parse().ok())
        else {
            continue;
        };
        if entry.path().is_dir() && best.as_ref().is_none_or(|(b, _)| k > *b) {
            best = Some((k, entry.path()));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        Error::CorruptCheckpoint(format!("no round_<k> checkpoint in {}", run_dir.display()))
    })
}

/// Reassembles the result stored in a checkpoint directory.
pub fn load_result(checkpoint: &Path) -> Result<ExperimentResult> {
    let corrupt = |what: &str, e: &dyn std::fmt::Display| {
        Error::CorruptCheckpoint(format!("{}: {what}: {e}", checkpoint.display()))
    };
    let text = fs::read_to_string(checkpoint.join("config.json"))
        .map_err(|e| corrupt("config.json", &e))?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| corrupt("config.json", &e))?;
    let final_params = ParameterSet::load(&checkpoint.join("master.ckpt"))?;
    let records = read_records(&checkpoint.join("records.jsonl"))?;
    Ok(ExperimentResult {
        roster: roster_ids(config.partition.num_collaborators),
        config,
        final_params,
        records,
    })
}

/// Runs an experiment from scratch.
pub fn run_experiment(cfg: ExperimentConfig, workers: usize) -> Result<ExperimentResult> {
    Experiment::new(cfg, workers)?.run()
}

/// Continues a run from `checkpoint` (a `round_<k>` directory) up to
/// `cfg.rounds`.
pub fn resume(
    checkpoint: &Path,
    cfg: ExperimentConfig,
    workers: usize,
) -> Result<ExperimentResult> {
    Experiment::restore(checkpoint, cfg, workers)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Strategy;

    fn small(strategy: Strategy) -> ExperimentConfig {
        ExperimentConfig {
            rounds: 4,
            aggregation: AggregationConfig::with_strategy(strategy),
            partition: PartitionConfig {
                num_collaborators: 6,
                total_samples: 300,
                ..Default::default()
            },
            scheduler: SchedulerConfig {
                window_fraction: 0.5,
                ..Default::default()
            },
            local: LocalTrainConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn validation_catches_mismatched_dimensions() {
        let mut cfg = small(Strategy::SimAgg);
        cfg.partition.num_features = 3;
        assert!(matches!(cfg.validate(), Err(Error::BadConfig(_))));
        let cfg = ExperimentConfig {
            rounds: 0,
            ..small(Strategy::SimAgg)
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            eval_every: 0,
            ..small(Strategy::SimAgg)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"roundz": 3}"#).unwrap_err();
        assert!(err.to_string().contains("roundz"));
        let err =
            serde_json::from_str::<ExperimentConfig>(r#"{"aggregation": {"strategy": "median"}}"#)
                .unwrap_err()
                .to_string();
        assert!(err.contains("median") && err.contains("regsimagg"), "{err}");
    }

    #[test]
    fn records_are_complete_and_ordered() {
        let result = run_experiment(
            ExperimentConfig {
                eval_every: 2,
                ..small(Strategy::RegSimAgg)
            },
            2,
        )
        .unwrap();
        assert_eq!(result.records.len(), 4);
        for (i, r) in result.records.iter().enumerate() {
            assert_eq!(r.round, i as u32 + 1);
            assert_eq!(r.selected.len(), 3);
            assert_eq!(r.local_loss_before.len(), 3);
            assert_eq!(r.val_loss.is_some(), r.round % 2 == 0);
            assert!(r.drift > 0.0);
        }
        assert!((result.records[3].cum_comm_cost - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dispatch_contract() {
        let cfg = small(Strategy::SimAgg);
        let mut exp = Experiment::new(cfg.clone(), 1).unwrap();
        for _ in 0..3 {
            let before = exp.master().clone();
            let rec = exp.step().unwrap().clone();
            // recompute round r from the master dispatched at its start
            let updates: Vec<_> = rec
                .selected
                .iter()
                .map(|id| {
                    let idx = exp.roster.iter().position(|r| r == id).unwrap();
                    let local = LocalTrainConfig {
                        seed: exp.train_seed(rec.round, idx),
                        ..cfg.local
                    };
                    local_train(id, &before, &exp.shards[idx], &cfg.task, &local).unwrap()
                })
                .collect();
            for u in &updates {
                assert_eq!(u.prev_params.as_ref(), Some(&before));
            }
            let (expected, _) = aggregate(&updates, rec.round, &cfg.aggregation).unwrap();
            assert_eq!(exp.master(), &expected);
        }
    }

    #[test]
    fn config_difference_names_the_field() {
        let a = small(Strategy::SimAgg);
        let mut b = a.clone();
        b.rounds = 99;
        b.output_dir = Some("x".into());
        assert!(config_difference(&a, &b).is_ok());
        b.task.num_features = 3;
        let err = config_difference(&a, &b).unwrap_err().to_string();
        assert!(err.contains("num_features"), "{err}");
    }
}
