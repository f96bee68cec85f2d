use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{self, Checkpoint};
use super::config::{
    BpLambdaCheckConfig, CharExperiment, Experiment, ExperimentConfig, FfExperiment,
    MultiExperiment, RnnExperiment,
};
use super::metrics::{MetricsRow, MetricsWriter};
use crate::error::{Error, Result};
use crate::ff::{FfTrainer, TrainStepReport};
use crate::multinet::MultiNetTrainer;
use crate::numerics::{AdamConfig, RngState, Tensor};
use crate::rnn::crosscheck::{bp_lambda_crosscheck, FixtureShape, WindowDiff};
use crate::rnn::{CurriculumRunner, OutputKind, RnnTrainer, WindowLearner};
use crate::tasks::{load_mnist, mnist_dir, MnistDataset, MnistSplit, TaskKind, Vocab, INPUT_DIM, OUTPUT_DIM};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.dni";

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join(METRICS_FILE)
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join(CHECKPOINT_FILE)
}

/// Datasets an experiment reads; never part of a checkpoint.
pub enum Data {
    None,
    Mnist { train: MnistDataset, test: MnistDataset },
    Text { vocab: Vocab, ids: Vec<usize> },
}

fn load_mnist_pair(train_limit: Option<usize>, test_limit: Option<usize>) -> Result<Data> {
    let dir = mnist_dir();
    let mut train = load_mnist(&dir, MnistSplit::Train)?;
    let mut test = load_mnist(&dir, MnistSplit::Test)?;
    if let Some(n) = train_limit {
        train = train.truncate(n);
    }
    if let Some(n) = test_limit {
        test = test.truncate(n);
    }
    Ok(Data::Mnist { train, test })
}

pub fn load_data(exp: &Experiment) -> Result<Data> {
    match exp {
        Experiment::FfMnist(f) | Experiment::FfStochastic(f) | Experiment::FfUnlock(f) => {
            load_mnist_pair(f.train_limit, f.test_limit)
        }
        Experiment::MultiNet(m) => load_mnist_pair(m.train_limit, m.test_limit),
        Experiment::RnnChars(c) => {
            let bytes = std::fs::read(&c.path)?;
            if bytes.len() < 2 {
                return Err(Error::Format(format!("{} is too short", c.path.display())));
            }
            let vocab = Vocab::from_bytes(&bytes);
            let ids = bytes.iter().map(|&b| vocab.encode(b).expect("byte in vocab")).collect();
            Ok(Data::Text { vocab, ids })
        }
        _ => Ok(Data::None),
    }
}

fn mnist(data: &Data) -> Result<(&MnistDataset, &MnistDataset)> {
    match data {
        Data::Mnist { train, test } => Ok((train, test)),
        _ => Err(Error::State("experiment needs MNIST".into())),
    }
}

fn crossed(prev: u64, now: u64, every: u64) -> bool {
    every > 0 && now / every > prev / every
}

/// Running sum for a metric averaged between rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    pub fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    pub fn add_opt(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.add(v);
        }
    }

    /// Mean since the last call, then resets.
    pub fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Mean::default();
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfRun {
    pub trainer: FfTrainer,
    eval_every: u64,
    loss: Mean,
    sg_loss: Mean,
    updated: Mean,
    cosine: Mean,
}

impl FfRun {
    const COLUMNS: &'static [&'static str] =
        &["train_loss", "sg_loss", "updated_fraction", "sg_cosine", "lr", "test_error"];

    fn new(f: &FfExperiment, budget: u64, seed: u64) -> Result<Self> {
        Ok(Self {
            trainer: FfTrainer::new(f.train_config(budget), seed)?,
            eval_every: f.eval_every,
            loss: Mean::default(),
            sg_loss: Mean::default(),
            updated: Mean::default(),
            cosine: Mean::default(),
        })
    }

    fn absorb(&mut self, r: &TrainStepReport) {
        self.loss.add_opt(r.task_loss);
        r.sg_losses.iter().for_each(|l| self.sg_loss.add_opt(*l));
        let up = r.updated.iter().filter(|&&u| u).count() as f64 / r.updated.len().max(1) as f64;
        self.updated.add(up);
        r.diagnostics.iter().flatten().for_each(|d| self.cosine.add(d.cosine));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnRun {
    pub runner: CurriculumRunner,
    pub trainer: RnnTrainer,
    task_loss: Mean,
    sg_loss: Mean,
    aux_loss: Mean,
    bits: Mean,
}

impl RnnRun {
    const COLUMNS: &'static [&'static str] =
        &["task_loss", "sg_loss", "aux_loss", "bits_error", "level_n", "level_r", "t_task", "max_solved"];

    fn new(r: &RnnExperiment, kind: TaskKind, seed: u64) -> Result<Self> {
        let root = RngState::new(seed);
        let mut tbptt = r.tbptt.clone();
        tbptt.output = OutputKind::Bernoulli;
        Ok(Self {
            runner: CurriculumRunner::new(kind, r.batch, tbptt.t, &root.fork(1))?,
            trainer: RnnTrainer::new(
                INPUT_DIM,
                r.units,
                OUTPUT_DIM,
                r.batch,
                tbptt,
                AdamConfig::with_lr(r.lr),
                &mut root.fork(0),
            )?,
            task_loss: Mean::default(),
            sg_loss: Mean::default(),
            aux_loss: Mean::default(),
            bits: Mean::default(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharRun {
    pub trainer: RnnTrainer,
    positions: Vec<usize>,
    windows: u64,
    bpc: Mean,
    sg_loss: Mean,
}

impl CharRun {
    const COLUMNS: &'static [&'static str] = &["bits_per_char", "sg_loss"];

    fn new(c: &CharExperiment, data: &Data, seed: u64) -> Result<Self> {
        let Data::Text { vocab, ids } = data else {
            return Err(Error::State("character experiment needs text".into()));
        };
        let mut tbptt = c.tbptt.clone();
        tbptt.output = OutputKind::Categorical;
        let v = vocab.len();
        let span = ids.len() - 1;
        Ok(Self {
            trainer: RnnTrainer::new(v, c.units, v, c.batch, tbptt, AdamConfig::with_lr(c.lr), &mut RngState::new(seed))?,
            positions: (0..c.batch).map(|r| r * span / c.batch).collect(),
            windows: 0,
            bpc: Mean::default(),
            sg_loss: Mean::default(),
        })
    }

    fn step(&mut self, data: &Data) -> Result<()> {
        let Data::Text { vocab, ids } = data else {
            return Err(Error::State("character experiment needs text".into()));
        };
        let (v, b, t) = (vocab.len(), self.positions.len(), self.trainer.cfg.t);
        let span = ids.len() - 1;
        let mut xs = Vec::with_capacity(t);
        let mut ys = Vec::with_capacity(t);
        for _ in 0..t {
            let cur: Vec<usize> = self.positions.iter().map(|&p| ids[p]).collect();
            let next: Vec<usize> = self.positions.iter().map(|&p| ids[p + 1]).collect();
            xs.push(Tensor::one_hot(&cur, v)?);
            ys.push(Tensor::one_hot(&next, v)?);
            self.positions.iter_mut().for_each(|p| *p = (*p + 1) % span);
        }
        let ws = vec![vec![1.0; b]; t];
        self.trainer.window(&xs, &ys, &ws)?;
        let last = self.trainer.last.as_ref().expect("window report");
        self.bpc.add(last.task_loss / t as f64 / std::f64::consts::LN_2);
        self.sg_loss.add_opt(last.sg_loss);
        self.windows += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRun {
    pub trainer: MultiNetTrainer,
    eval_every: u64,
    eval_ticks: usize,
    eval_seed: u64,
    a_loss: Mean,
    b_loss: Mean,
    sg_loss: Mean,
}

impl MultiRun {
    const COLUMNS: &'static [&'static str] =
        &["a_loss", "b_loss", "sg_loss", "a_error", "b_error", "b_chance"];

    fn new(m: &MultiExperiment, seed: u64) -> Result<Self> {
        Ok(Self {
            trainer: MultiNetTrainer::new(m.net.clone(), seed)?,
            eval_every: m.eval_every,
            eval_ticks: m.eval_ticks,
            eval_seed: seed ^ 0x5eed_e7a1,
            a_loss: Mean::default(),
            b_loss: Mean::default(),
            sg_loss: Mean::default(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpLambdaRun {
    shape: FixtureShape,
    seed: u64,
    diffs: Option<Vec<WindowDiff>>,
    next: u64,
}

impl BpLambdaRun {
    const COLUMNS: &'static [&'static str] = &["core_max_abs_diff", "readout_max_abs_diff", "sg_max_abs_diff"];

    fn new(b: &BpLambdaCheckConfig, seed: u64) -> Self {
        Self {
            shape: FixtureShape {
                t: b.t,
                windows: b.windows,
                in_dim: b.input_dim,
                units: b.units,
                out_dim: b.output_dim,
                batch: b.batch,
            },
            seed,
            diffs: None,
            next: 0,
        }
    }
}

/// Everything a run needs to continue, except the datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
// Externally tagged: internally tagged enums buffer their content, and the
// buffer cannot hold the u128 counters inside the RNG state.
#[serde(rename_all = "snake_case")]
pub enum TrainerState {
    Ff(Box<FfRun>),
    Rnn(Box<RnnRun>),
    Chars(Box<CharRun>),
    Multi(Box<MultiRun>),
    BpLambda(BpLambdaRun),
}

impl TrainerState {
    pub fn new(cfg: &ExperimentConfig, data: &Data) -> Result<Self> {
        let seed = cfg.seed;
        Ok(match &cfg.experiment {
            Experiment::FfMnist(f) | Experiment::FfStochastic(f) | Experiment::FfUnlock(f) => {
                TrainerState::Ff(Box::new(FfRun::new(f, cfg.budget, seed)?))
            }
            Experiment::RnnCopy(r) => TrainerState::Rnn(Box::new(RnnRun::new(r, TaskKind::Copy, seed)?)),
            Experiment::RnnRepeat(r) => TrainerState::Rnn(Box::new(RnnRun::new(r, TaskKind::RepeatCopy, seed)?)),
            Experiment::RnnChars(c) => TrainerState::Chars(Box::new(CharRun::new(c, data, seed)?)),
            Experiment::MultiNet(m) => TrainerState::Multi(Box::new(MultiRun::new(m, seed)?)),
            Experiment::BpLambdaCheck(b) => TrainerState::BpLambda(BpLambdaRun::new(b, seed)),
        })
    }

    pub fn columns(&self) -> &'static [&'static str] {
        match self {
            TrainerState::Ff(_) => FfRun::COLUMNS,
            TrainerState::Rnn(_) => RnnRun::COLUMNS,
            TrainerState::Chars(_) => CharRun::COLUMNS,
            TrainerState::Multi(_) => MultiRun::COLUMNS,
            TrainerState::BpLambda(_) => BpLambdaRun::COLUMNS,
        }
    }

    /// Iterations, windows, or A-steps, depending on the experiment.
    pub fn steps(&self) -> u64 {
        match self {
            TrainerState::Ff(f) => f.trainer.step,
            TrainerState::Rnn(r) => r.runner.windows,
            TrainerState::Chars(c) => c.windows,
            TrainerState::Multi(m) => m.trainer.steps,
            TrainerState::BpLambda(b) => b.next,
        }
    }

    /// Examples, episodes, characters, or digits consumed.
    pub fn samples(&self) -> u64 {
        match self {
            TrainerState::Ff(f) => f.trainer.step * f.trainer.config.batch as u64,
            TrainerState::Rnn(r) => r.runner.episodes,
            TrainerState::Chars(c) => c.windows * (c.trainer.cfg.t * c.positions.len()) as u64,
            TrainerState::Multi(m) => m.trainer.steps * m.trainer.cfg.batch as u64,
            TrainerState::BpLambda(b) => b.next,
        }
    }

    pub fn done(&self, budget: u64) -> bool {
        match self {
            TrainerState::Rnn(r) => r.runner.episodes >= budget,
            TrainerState::BpLambda(b) => b.next >= b.shape.windows as u64,
            _ => self.steps() >= budget,
        }
    }

    pub fn step(&mut self, data: &Data) -> Result<()> {
        match self {
            TrainerState::Ff(f) => {
                let (train, _) = mnist(data)?;
                let r = f.trainer.train_iter(train)?;
                f.absorb(&r);
            }
            TrainerState::Rnn(r) => {
                let out = r.runner.run_window(&mut r.trainer)?;
                let last = r.trainer.last.as_ref().expect("window report");
                r.task_loss.add(last.task_loss);
                r.sg_loss.add_opt(last.sg_loss);
                r.aux_loss.add_opt(last.aux_loss);
                if let Some(b) = out.mean_bits {
                    // Weight by episodes so the row mean is per episode.
                    for _ in 0..out.finished {
                        r.bits.add(b);
                    }
                }
            }
            TrainerState::Chars(c) => c.step(data)?,
            TrainerState::Multi(m) => {
                let (train, _) = mnist(data)?;
                let r = m.trainer.train_window(train)?;
                m.a_loss.add(r.a_loss);
                m.b_loss.add(r.b_loss);
                m.sg_loss.add_opt(r.sg_loss);
            }
            TrainerState::BpLambda(b) => {
                if b.diffs.is_none() {
                    b.diffs = Some(bp_lambda_crosscheck(b.shape, b.seed)?);
                }
                b.next += 1;
            }
        }
        Ok(())
    }

    /// The metrics row after a step that moved the counter from `prev`.
    fn row(&mut self, data: &Data, prev: u64, last: bool) -> Result<Vec<Option<f64>>> {
        let now = self.steps();
        Ok(match self {
            TrainerState::Ff(f) => {
                let eval = last || crossed(prev, now, f.eval_every);
                let test_error = if eval {
                    let (_, test) = mnist(data)?;
                    Some(f.trainer.evaluate(test)?)
                } else {
                    None
                };
                let lr = f.trainer.net.blocks[0].linear.weight.adam.lr;
                vec![f.loss.take(), f.sg_loss.take(), f.updated.take(), f.cosine.take(), Some(lr), test_error]
            }
            TrainerState::Rnn(r) => {
                let c = &r.runner.curriculum;
                vec![
                    r.task_loss.take(),
                    r.sg_loss.take(),
                    r.aux_loss.take(),
                    r.bits.take(),
                    Some(c.level.n as f64),
                    Some(c.level.r as f64),
                    Some(c.t_task() as f64),
                    Some(c.max_solved as f64),
                ]
            }
            TrainerState::Chars(c) => vec![c.bpc.take(), c.sg_loss.take()],
            TrainerState::Multi(m) => {
                let eval = last || crossed(prev, now, m.eval_every);
                let (a_err, b_err, chance) = if eval {
                    let (_, test) = mnist(data)?;
                    let e = m.trainer.evaluate(test, m.eval_ticks, m.eval_seed)?;
                    (Some(e.a_error), Some(e.b_error), Some(e.b_chance))
                } else {
                    (None, None, None)
                };
                vec![m.a_loss.take(), m.b_loss.take(), m.sg_loss.take(), a_err, b_err, chance]
            }
            TrainerState::BpLambda(b) => {
                let d = b.diffs.as_ref().expect("computed on the first step")[(now - 1) as usize];
                vec![Some(d.core), Some(d.readout), d.sg]
            }
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once the step counter reaches this, even if the
    /// budget is not used up.
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub samples: u64,
    pub finished: bool,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    /// The last row written, if any.
    pub last_row: Option<MetricsRow>,
}

fn save(cfg: &ExperimentConfig, state: &TrainerState, path: &Path) -> Result<()> {
    checkpoint::save(
        path,
        &Checkpoint {
            config: cfg.clone(),
            state: state.clone(),
        },
    )
}

/// Runs one experiment, writing `metrics.csv` and `checkpoint.dni` into its
/// output directory.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let metrics_path = metrics_path(&cfg.out_dir);
    let ckpt_path = checkpoint_path(&cfg.out_dir);
    let data = load_data(&cfg.experiment)?;
    let (mut state, mut writer) = match &opts.resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.config.experiment.kind() != cfg.experiment.kind() {
                return Err(Error::Config(format!(
                    "checkpoint is a {} run, config is {}",
                    ck.config.experiment.kind(),
                    cfg.experiment.kind()
                )));
            }
            let st = ck.state;
            let w = if metrics_path.exists() {
                MetricsWriter::resume(&metrics_path, st.columns(), st.steps())?
            } else {
                MetricsWriter::create(&metrics_path, st.columns())?
            };
            (st, w)
        }
        None => {
            let st = TrainerState::new(cfg, &data)?;
            let w = MetricsWriter::create(&metrics_path, st.columns())?;
            (st, w)
        }
    };
    let mut last_row = None;
    while !state.done(cfg.budget) && opts.max_steps.is_none_or(|m| state.steps() < m) {
        let prev = state.steps();
        state.step(&data)?;
        let now = state.steps();
        let last = state.done(cfg.budget);
        if last || crossed(prev, now, cfg.log_every) {
            let row = MetricsRow {
                step: now,
                samples: state.samples(),
                values: state.row(&data, prev, last)?,
            };
            writer.write(&row)?;
            last_row = Some(row);
        }
        if crossed(prev, now, cfg.checkpoint_every) {
            save(cfg, &state, &ckpt_path)?;
        }
    }
    save(cfg, &state, &ckpt_path)?;
    Ok(RunSummary {
        steps: state.steps(),
        samples: state.samples(),
        finished: state.done(cfg.budget),
        metrics: metrics_path,
        checkpoint: ckpt_path,
        last_row,
    })
}
