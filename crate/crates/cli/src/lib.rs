//! Pipeline commands behind the `coils` binary: sample, train, simulate,
//! portrait and verify, each reading one [`RunConfig`] and writing into
//! `<out>/<name>/`.

pub mod config;
mod report;

pub use config::RunConfig;
pub use report::{VerifyReport, VERIFY_SCHEMA};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use coils::models::{CoilsModel, ModelError};
use coils::sim::{export_field, random_starts, rollout_batch, FieldKind, Plant, RolloutOptions, RolloutStatus, SimError};
use coils::training::{train_from, Checkpoint, CheckpointError, Dataset, DatasetError, DatasetMeta, EpochRecord, TrainError};
use coils::verify::VerifyError;
use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use config::Stage;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("missing input {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// 1 for bad configuration or inputs, 2 for numerical failure, 3 when a
    /// verification check fails.
    pub fn exit_code(&self) -> i32 {
        fn model(e: &ModelError) -> i32 {
            match e {
                ModelError::NonFinite(_) => 2,
                _ => 1,
            }
        }
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Missing(_) | CliError::Checkpoint(_) => 1,
            CliError::Dataset(DatasetError::NonFinite { .. }) => 2,
            CliError::Dataset(_) => 1,
            CliError::Model(e) => model(e),
            CliError::Train(TrainError::Diverged { .. } | TrainError::NonFiniteLoss) => 2,
            CliError::Train(TrainError::Model(e)) => model(e),
            CliError::Train(_) => 1,
            CliError::Sim(SimError::NonFinite { .. }) => 2,
            CliError::Sim(SimError::Model(e)) => model(e),
            CliError::Sim(_) => 1,
            CliError::Verify(VerifyError::Model(e)) => model(e),
            CliError::Verify(VerifyError::Sim(SimError::NonFinite { .. })) => 2,
            CliError::Verify(_) => 1,
            CliError::VerificationFailed(_) => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Files of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(out: &Path, cfg: &RunConfig) -> Self {
        RunDir { root: out.join(&cfg.name) }
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.path("dataset.csv")
    }
    pub fn dataset_meta(&self) -> PathBuf {
        self.path("dataset_meta.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.path("checkpoint.json")
    }
    pub fn losses(&self) -> PathBuf {
        self.path("losses.csv")
    }
    pub fn simulate_summary(&self) -> PathBuf {
        self.path("simulate.json")
    }
    pub fn verify(&self) -> PathBuf {
        self.path("verify.json")
    }
    pub fn trajectory(&self, plant: &str, index: usize) -> PathBuf {
        self.path(&format!("traj_{plant}_{index}.csv"))
    }
    pub fn field(&self, kind: &FieldKind) -> PathBuf {
        self.path(&format!("field_{}.csv", kind.file_stem()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Opens `path` for a CSV whose first line is `# config <json>`.
fn csv_with_config(path: &Path, cfg: &RunConfig) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# config {}", cfg.to_compact_json()).map_err(|e| CliError::io(path, e))?;
    Ok(w)
}

fn start(out: &Path, cfg: &RunConfig) -> Result<RunDir> {
    let dir = RunDir::new(out, cfg);
    dir.create()?;
    write_text(&dir.config(), &pretty(cfg))?;
    Ok(dir)
}

#[derive(Serialize)]
struct MetaDoc<'a> {
    config: &'a RunConfig,
    #[serde(flatten)]
    meta: &'a DatasetMeta,
}

/// Samples the dataset into `dataset.csv` with its provenance in
/// `dataset_meta.json`.
pub fn cmd_sample(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let dir = start(out, cfg)?;
    sample_into(cfg, &dir)
}

fn sample_into(cfg: &RunConfig, dir: &RunDir) -> Result<Dataset> {
    let data = coils::training::sample_dataset(&cfg.system()?, &cfg.hyper()?, cfg.sample.count, cfg.stage_seed(Stage::Sample))?;
    let path = dir.dataset();
    let mut w = csv_with_config(&path, cfg)?;
    data.write_csv_to(&mut w)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let meta = data.meta.as_ref().expect("sampled data carries its meta");
    write_text(&dir.dataset_meta(), &pretty(&MetaDoc { config: cfg, meta }))?;
    Ok(data)
}

/// Reads the run's dataset, or samples it when absent. An existing dataset
/// must match the configured system, count, seed and bounds.
fn load_or_sample(cfg: &RunConfig, dir: &RunDir) -> Result<Dataset> {
    if !dir.dataset().exists() {
        return sample_into(cfg, dir);
    }
    let data = Dataset::read_csv(&dir.dataset())?;
    let text = std::fs::read_to_string(dir.dataset_meta()).map_err(|e| CliError::io(&dir.dataset_meta(), e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let h = cfg.hyper()?;
    let expected = DatasetMeta {
        system: cfg.system.clone(),
        seed: cfg.stage_seed(Stage::Sample),
        count: cfg.sample.count,
        x_lb: h.x_lb.clone(),
        x_ub: h.x_ub.clone(),
        u_lim: h.u_lim.clone(),
    };
    let found = serde_json::json!({
        "system": value["system"], "seed": value["seed"], "count": value["count"],
        "x_lb": value["x_lb"], "x_ub": value["x_ub"], "u_lim": value["u_lim"],
    });
    if found != serde_json::to_value(&expected).expect("serializable") || data.len() != cfg.sample.count {
        return Err(CliError::Config(format!(
            "{} was sampled with other settings; remove it or rerun `sample`",
            dir.dataset().display()
        )));
    }
    Ok(data)
}

fn initial_model(cfg: &RunConfig) -> Result<CoilsModel> {
    Ok(CoilsModel::init(&cfg.architecture, cfg.hyper()?, cfg.stage_seed(Stage::Init))?)
}

/// The trained model when the run has a checkpoint, otherwise the seeded
/// initialization.
fn model_or_init(dir: &RunDir, cfg: &RunConfig) -> Result<(CoilsModel, &'static str)> {
    if dir.checkpoint().exists() {
        Ok((Checkpoint::load(&dir.checkpoint())?.model()?, "checkpoint"))
    } else {
        Ok((initial_model(cfg)?, "initialization"))
    }
}

const LOSS_HEADER: &str = "epoch,train,holdout,max_grad_norm";

fn loss_row(epoch: usize, train: f64, holdout: Option<f64>, grad: Option<f64>) -> String {
    let f = |v: Option<f64>| v.map(coils::training::format_float).unwrap_or_default();
    format!("{epoch},{},{},{}", coils::training::format_float(train), f(holdout), f(grad))
}

/// Loss rows of an earlier run up to and including `epoch`.
fn previous_losses(path: &Path, epoch: usize) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#') && *l != LOSS_HEADER)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch))
        .map(str::to_string)
        .collect())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub total_epochs: usize,
    pub final_train: Option<f64>,
}

/// Trains on the run's dataset and writes `checkpoint.json` and `losses.csv`.
/// Row 0 of the loss history holds the losses before any update.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cmd_train_with(cfg, out, |_| {})
}

/// [`cmd_train`] with a callback after every epoch.
pub fn cmd_train_with(cfg: &RunConfig, out: &Path, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainSummary> {
    let dir = start(out, cfg)?;
    let data = load_or_sample(cfg, &dir)?;
    let resume = cfg.train.resume && dir.checkpoint().exists();
    let (mut model, done, mut rows) = if resume {
        let ck = Checkpoint::load(&dir.checkpoint())?;
        let rows = if dir.losses().exists() { previous_losses(&dir.losses(), ck.trained_epochs)? } else { Vec::new() };
        (ck.model()?, ck.trained_epochs, rows)
    } else {
        (initial_model(cfg)?, 0, Vec::new())
    };
    let mut tc = cfg.train_config();
    tc.epochs = cfg.train.epochs.saturating_sub(done);
    let report = train_from(&mut model, &data, &tc, done, on_epoch)?;
    if !resume {
        rows.push(loss_row(0, report.initial_train, report.initial_holdout, None));
    }
    rows.extend(report.history.iter().map(|r| loss_row(r.epoch, r.train, r.holdout, Some(r.max_grad_norm))));

    let total = done + report.history.len();
    let mut ck = Checkpoint::from_model(&model);
    ck.trained_epochs = total;
    ck.train_config = Some(cfg.train_config());
    ck.config = Some(cfg.to_value());
    ck.save(&dir.checkpoint())?;

    let path = dir.losses();
    let mut w = csv_with_config(&path, cfg)?;
    writeln!(w, "{LOSS_HEADER}").map_err(|e| CliError::io(&path, e))?;
    for r in &rows {
        writeln!(w, "{r}").map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(TrainSummary {
        epochs_run: report.history.len(),
        total_epochs: total,
        final_train: report.history.last().map(|r| r.train),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutSummary {
    pub index: usize,
    pub plant: String,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub final_norm: f64,
    #[serde(flatten)]
    pub status: RolloutStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub config: RunConfig,
    pub rollouts: Vec<RolloutSummary>,
}

fn starts(cfg: &RunConfig, model: &CoilsModel) -> Array2<f64> {
    match &cfg.simulate.starts {
        Some(rows) => {
            let n = model.state_dim();
            Array2::from_shape_vec((rows.len(), n), rows.iter().flatten().copied().collect()).expect("validated")
        }
        None => random_starts(model, cfg.simulate.trajectories, cfg.stage_seed(Stage::Simulate)),
    }
}

/// Rolls the trained controller out against both the true and the learned
/// plant from the same starts, writing paired `traj_true_i.csv` and
/// `traj_learned_i.csv` plus `simulate.json`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateSummary> {
    let dir = start(out, cfg)?;
    if !dir.checkpoint().exists() {
        return Err(CliError::Missing(dir.checkpoint()));
    }
    let model = Checkpoint::load(&dir.checkpoint())?.model()?;
    let xs = starts(cfg, &model);
    let opts = RolloutOptions { horizon: cfg.simulate.horizon, step: cfg.simulate.step };
    let mut rollouts = Vec::new();
    for (label, plant) in [("true", Plant::True(cfg.system()?)), ("learned", Plant::Learned)] {
        for (i, t) in rollout_batch(plant, &model, xs.view(), &opts)?.iter().enumerate() {
            let path = dir.trajectory(label, i);
            let mut w = csv_with_config(&path, cfg)?;
            t.write_csv_to(&mut w)?;
            w.flush().map_err(|e| CliError::io(&path, e))?;
            rollouts.push(RolloutSummary {
                index: i,
                plant: label.into(),
                start: xs.row(i).to_vec(),
                end: t.final_state().to_vec(),
                final_norm: *t.norm.last().expect("nonempty"),
                status: t.status,
            });
        }
    }
    let summary = SimulateSummary { config: cfg.clone(), rollouts };
    write_text(&dir.simulate_summary(), &pretty(&summary))?;
    Ok(summary)
}

/// Exports the closed-loop fields of `f̂` and `f*`, the bounded Lyapunov
/// network and `V` on a grid over the box. Uses the run's checkpoint when
/// there is one and the seeded initialization otherwise.
pub fn cmd_portrait(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let dir = start(out, cfg)?;
    let (model, source) = model_or_init(&dir, cfg)?;
    eprintln!("portrait of the model from {source}");
    let mut kinds =
        vec![FieldKind::NominalClosedLoop, FieldKind::ProjectedClosedLoop, FieldKind::LyapunovNet, FieldKind::Lyapunov];
    if cfg.portrait.true_field {
        kinds.push(FieldKind::TrueClosedLoop { system: cfg.system()? });
    }
    let mut written = Vec::new();
    for kind in kinds {
        let grid = export_field(&model, kind, cfg.portrait.resolution)?;
        let path = dir.field(&kind);
        let mut w = csv_with_config(&path, cfg)?;
        grid.write_csv_to(&mut w)?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Runs the enabled audits and writes `verify.json`. Returns the report
/// when every enabled check passes and [`CliError::VerificationFailed`]
/// after writing it otherwise.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<VerifyReport> {
    let dir = start(out, cfg)?;
    let (mut model, source) = model_or_init(&dir, cfg)?;
    if cfg.verify.ablate_projection {
        model.projection_enabled = false;
    }
    let data = if cfg.verify.certificate.enabled {
        if !dir.dataset().exists() {
            return Err(CliError::Missing(dir.dataset()));
        }
        Some(load_or_sample(cfg, &dir)?)
    } else {
        None
    };
    let report = report::build(cfg, &model, source, data.as_ref())?;
    write_text(&dir.verify(), &pretty(&report))?;
    if report.passed {
        Ok(report)
    } else {
        Err(CliError::VerificationFailed(report.failures().join(", ")))
    }
}
