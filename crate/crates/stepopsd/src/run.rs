//! Training driver with on-disk outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stepopsd_core::env::{EnvKind, Environment};
use stepopsd_core::train::{MetricsRecord, StepOutput, Trainer};
use stepopsd_core::TeacherSnapshot;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::shape::shaped_group;
use crate::snapshot;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ROLLOUTS_FILE: &str = "rollouts.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_PARAMS_FILE: &str = "final_params.bin";
pub const SNAPSHOT_DIR: &str = "snapshots";

pub fn teacher_snapshot_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(SNAPSHOT_DIR).join(format!("teacher_{step:06}.bin"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub first_success_rate: Option<f64>,
    pub last_success_rate: Option<f64>,
    pub teacher_snapshots: Vec<u64>,
    pub out_dir: PathBuf,
}

struct Sinks {
    dir: PathBuf,
    metrics: BufWriter<File>,
    rollouts: Option<BufWriter<File>>,
    summary: RunSummary,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

impl Sinks {
    fn open(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(dir.join(SNAPSHOT_DIR)).map_err(|e| Error::io(&dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let metrics = create(&dir.join(METRICS_FILE))?;
        let rollouts = match cfg.save_rollouts {
            true => Some(create(&dir.join(ROLLOUTS_FILE))?),
            false => None,
        };
        Ok(Self {
            summary: RunSummary {
                steps: 0,
                first_success_rate: None,
                last_success_rate: None,
                teacher_snapshots: Vec::new(),
                out_dir: dir.clone(),
            },
            dir,
            metrics,
            rollouts,
        })
    }

    fn record(&mut self, teacher: &TeacherSnapshot, out: &StepOutput) -> Result<()> {
        let m: &MetricsRecord = &out.metrics;
        let metrics_path = self.dir.join(METRICS_FILE);
        let line = serde_json::to_string(m).expect("metrics always serialize");
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        if m.teacher_refreshed {
            snapshot::save(&teacher_snapshot_path(&self.dir, m.step), teacher)?;
            self.summary.teacher_snapshots.push(m.step);
        }
        if let Some(w) = &mut self.rollouts {
            let path = self.dir.join(ROLLOUTS_FILE);
            for (i, g) in out.groups.iter().enumerate() {
                let sg = shaped_group(
                    g,
                    Some(m.step),
                    m.lambda,
                    &out.advantages[i],
                    &out.shaped[i],
                    &out.dropped_members[i],
                );
                let line = serde_json::to_string(&sg).expect("shaped groups always serialize");
                writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            }
        }
        self.summary.steps += 1;
        self.summary.first_success_rate.get_or_insert(m.success_rate);
        self.summary.last_success_rate = Some(m.success_rate);
        Ok(())
    }

    fn finish(mut self, params: TeacherSnapshot) -> Result<RunSummary> {
        let metrics_path = self.dir.join(METRICS_FILE);
        self.metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        if let Some(mut w) = self.rollouts.take() {
            w.flush().map_err(|e| Error::io(self.dir.join(ROLLOUTS_FILE), e))?;
        }
        snapshot::save(&self.dir.join(FINAL_PARAMS_FILE), &params)?;
        Ok(self.summary)
    }
}

fn run_with<E: Environment>(env: E, cfg: &RunConfig) -> Result<RunSummary> {
    let mut sinks = Sinks::open(cfg)?;
    let mut trainer = Trainer::new(env, cfg.train.clone())?;
    while !trainer.is_finished() {
        let out = trainer.step()?;
        sinks.record(trainer.teacher(), &out)?;
    }
    let final_params = TeacherSnapshot::take(trainer.params(), trainer.step_index());
    sinks.finish(final_params)
}

/// Trains per `cfg`, writing metrics, teacher snapshots at every refresh, the
/// final parameters and optionally the shaped rollouts under `cfg.out_dir`.
/// Output-directory problems surface before step 0.
pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.train.validate()?;
    match cfg.train.env {
        EnvKind::LatchWorld => run_with(cfg.train.latchworld(), cfg),
        EnvKind::FactChain => run_with(cfg.train.factchain(), cfg),
    }
}
