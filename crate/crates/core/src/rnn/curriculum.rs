use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};
use crate::tasks::{step_bits, Curriculum, EpisodeStream, TaskKind, INPUT_DIM, OUTPUT_DIM};

/// Anything that can be fed one window of a batched stream and returns its
/// output probabilities per step.
pub trait WindowLearner {
    fn window(&mut self, xs: &[Tensor], ys: &[Tensor], weights: &[Vec<f64>]) -> Result<Vec<Tensor>>;
}

/// Answers every step with the target itself.
#[derive(Clone, Debug, Default)]
pub struct OracleLearner;

impl WindowLearner for OracleLearner {
    fn window(&mut self, _xs: &[Tensor], ys: &[Tensor], _w: &[Vec<f64>]) -> Result<Vec<Tensor>> {
        Ok(ys.to_vec())
    }
}

/// Answers with independent uniform probabilities.
#[derive(Clone, Debug)]
pub struct RandomLearner {
    pub rng: RngState,
}

impl WindowLearner for RandomLearner {
    fn window(&mut self, _xs: &[Tensor], ys: &[Tensor], _w: &[Vec<f64>]) -> Result<Vec<Tensor>> {
        Ok(ys.iter().map(|y| self.rng.uniform_tensor(y.shape(), 0.0, 1.0)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracePoint {
    pub episodes: u64,
    pub max_solved: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub finished: u64,
    /// Mean bits error of the episodes that finished in this window.
    pub mean_bits: Option<f64>,
    pub advanced: bool,
}

/// Feeds `batch` independent episode streams through a learner in windows of
/// `t` steps and drives the curriculum with every finished episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumRunner {
    pub t: usize,
    pub curriculum: Curriculum,
    streams: Vec<EpisodeStream>,
    row_bits: Vec<f64>,
    pub episodes: u64,
    pub windows: u64,
    pub trace: Vec<TracePoint>,
}

impl CurriculumRunner {
    pub fn new(kind: TaskKind, batch: usize, t: usize, rng: &RngState) -> Result<Self> {
        if batch == 0 || t == 0 {
            return Err(Error::Config("batch and window length must be positive".into()));
        }
        Ok(Self {
            t,
            curriculum: Curriculum::new(kind),
            streams: (0..batch).map(|i| EpisodeStream::new(rng.fork(i as u64))).collect(),
            row_bits: vec![0.0; batch],
            episodes: 0,
            windows: 0,
            trace: vec![TracePoint {
                episodes: 0,
                max_solved: 0,
            }],
        })
    }

    pub fn batch(&self) -> usize {
        self.streams.len()
    }

    pub fn max_solved(&self) -> usize {
        self.curriculum.max_solved
    }

    /// Episodes that start inside this window use the level in force when
    /// the window begins.
    pub fn run_window<L: WindowLearner>(&mut self, learner: &mut L) -> Result<WindowOutcome> {
        let (kind, level, b) = (self.curriculum.kind, self.curriculum.level_pair(), self.batch());
        let mut xs = Vec::with_capacity(self.t);
        let mut ys = Vec::with_capacity(self.t);
        let mut ws = Vec::with_capacity(self.t);
        let mut ends = Vec::with_capacity(self.t);
        for _ in 0..self.t {
            let mut x = Tensor::zeros(&[b, INPUT_DIM]);
            let mut y = Tensor::zeros(&[b, OUTPUT_DIM]);
            let mut w = vec![0.0; b];
            let mut end = vec![None; b];
            for (r, s) in self.streams.iter_mut().enumerate() {
                let st = s.next_step(kind, level)?;
                x.row_mut(r).copy_from_slice(&st.input);
                y.row_mut(r).copy_from_slice(&st.target);
                w[r] = if st.masked { 1.0 } else { 0.0 };
                end[r] = st.finished;
            }
            xs.push(x);
            ys.push(y);
            ws.push(w);
            ends.push(end);
        }
        let probs = learner.window(&xs, &ys, &ws)?;
        if probs.len() != self.t {
            return Err(Error::shape("run_window", format!("{} outputs for {} steps", probs.len(), self.t)));
        }
        let mut out = WindowOutcome::default();
        let mut bits_sum = 0.0;
        for t in 0..self.t {
            for r in 0..b {
                if ws[t][r] != 0.0 {
                    self.row_bits[r] += step_bits(probs[t].row(r), ys[t].row(r));
                }
                if let Some(t_task) = ends[t][r] {
                    let bits = std::mem::take(&mut self.row_bits[r]);
                    self.episodes += 1;
                    out.finished += 1;
                    bits_sum += bits;
                    if self.curriculum.record(bits, t_task) {
                        out.advanced = true;
                        self.trace.push(TracePoint {
                            episodes: self.episodes,
                            max_solved: self.curriculum.max_solved,
                        });
                    }
                }
            }
        }
        if out.finished > 0 {
            out.mean_bits = Some(bits_sum / out.finished as f64);
        }
        self.windows += 1;
        Ok(out)
    }

    /// Runs windows until `budget` episodes have finished. The returned
    /// trace ends with a point at the final episode count.
    pub fn run<L: WindowLearner>(&mut self, learner: &mut L, budget: u64) -> Result<Vec<TracePoint>> {
        while self.episodes < budget {
            self.run_window(learner)?;
        }
        let mut trace = self.trace.clone();
        trace.push(TracePoint {
            episodes: self.episodes,
            max_solved: self.curriculum.max_solved,
        });
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_advances_every_window_of_episodes() {
        let mut r = CurriculumRunner::new(TaskKind::Copy, 10, 5, &RngState::new(0)).unwrap();
        let mut levels = Vec::new();
        for _ in 0..200 {
            let before = r.curriculum.level.n;
            let out = r.run_window(&mut OracleLearner).unwrap();
            if out.advanced {
                levels.push(before);
            }
        }
        assert!(levels.len() >= 5);
        assert!(levels.windows(2).all(|w| w[1] == w[0] + 1));
        assert_eq!(r.max_solved(), levels.last().unwrap() + 3);
    }

    #[test]
    fn random_learner_never_advances() {
        let mut r = CurriculumRunner::new(TaskKind::RepeatCopy, 8, 4, &RngState::new(1)).unwrap();
        let mut l = RandomLearner { rng: RngState::new(2) };
        let trace = r.run(&mut l, 500).unwrap();
        assert_eq!(r.max_solved(), 0);
        assert!(trace.iter().all(|p| p.max_solved == 0));
    }

    #[test]
    fn repeat_copy_levels_alternate() {
        let mut r = CurriculumRunner::new(TaskKind::RepeatCopy, 16, 8, &RngState::new(3)).unwrap();
        let mut seen = vec![r.curriculum.level_pair()];
        while seen.len() < 5 {
            if r.run_window(&mut OracleLearner).unwrap().advanced {
                seen.push(r.curriculum.level_pair());
            }
        }
        assert_eq!(seen, vec![(1, 1), (2, 1), (2, 2), (3, 2), (3, 3)]);
    }
}
