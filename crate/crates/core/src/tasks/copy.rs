use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

/// Width of the random binary symbols.
pub const BIT_WIDTH: usize = 8;
/// Symbol bits, stop marker, repeat count.
pub const INPUT_DIM: usize = BIT_WIDTH + 2;
/// Symbol bits, end flag.
pub const OUTPUT_DIM: usize = BIT_WIDTH + 1;

const STOP: usize = BIT_WIDTH;
const REPEAT: usize = BIT_WIDTH + 1;
const END: usize = BIT_WIDTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    RepeatCopy,
}

/// One episode: `inputs[steps × INPUT_DIM]`, `targets[steps × OUTPUT_DIM]`
/// and a per-step loss mask.
///
/// Copy lays out `N` symbols, a stop marker, `N` answer steps and an end
/// step. Repeat Copy inserts a step carrying `R / 10` on the repeat channel
/// after the stop marker and answers for `N·R` steps. `t_task` is the
/// reported episode length, `N + 3` or `N·R + 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub kind: TaskKind,
    pub n: usize,
    pub r: usize,
    pub inputs: Tensor,
    pub targets: Tensor,
    pub mask: Vec<bool>,
    pub t_task: usize,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.mask.len()
    }
}

fn symbols(n: usize, rng: &mut RngState) -> Vec<[f64; BIT_WIDTH]> {
    (0..n)
        .map(|_| {
            let mut s = [0.0; BIT_WIDTH];
            s.iter_mut().for_each(|b| *b = rng.below(2) as f64);
            s
        })
        .collect()
}

fn build(kind: TaskKind, n: usize, r: usize, rng: &mut RngState) -> Result<Episode> {
    if n == 0 || r == 0 {
        return Err(Error::Config(format!("episode needs N, R ≥ 1 (got {n}, {r})")));
    }
    let syms = symbols(n, rng);
    let header = match kind {
        TaskKind::Copy => n + 1,
        TaskKind::RepeatCopy => n + 2,
    };
    let answer = n * r;
    let steps = header + answer + 1;
    let mut inputs = Tensor::zeros(&[steps, INPUT_DIM]);
    let mut targets = Tensor::zeros(&[steps, OUTPUT_DIM]);
    let mut mask = vec![false; steps];
    for (t, s) in syms.iter().enumerate() {
        inputs.row_mut(t)[..BIT_WIDTH].copy_from_slice(s);
    }
    inputs.set(n, STOP, 1.0);
    if kind == TaskKind::RepeatCopy {
        inputs.set(n + 1, REPEAT, r as f64 / 10.0);
    }
    for k in 0..answer {
        targets.row_mut(header + k)[..BIT_WIDTH].copy_from_slice(&syms[k % n]);
        mask[header + k] = true;
    }
    targets.set(steps - 1, END, 1.0);
    mask[steps - 1] = true;
    let t_task = match kind {
        TaskKind::Copy => n + 3,
        TaskKind::RepeatCopy => n * r + 3,
    };
    Ok(Episode {
        kind,
        n,
        r,
        inputs,
        targets,
        mask,
        t_task,
    })
}

pub fn gen_copy(n: usize, rng: &mut RngState) -> Result<Episode> {
    build(TaskKind::Copy, n, 1, rng)
}

pub fn gen_repeat_copy(n: usize, r: usize, rng: &mut RngState) -> Result<Episode> {
    build(TaskKind::RepeatCopy, n, r, rng)
}

/// Σ over masked steps and output channels of `−log₂ p(target)`, with the
/// probability of the target clamped below at 1e-12. `probs` has one row per
/// step.
pub fn bits_error(probs: &Tensor, episode: &Episode) -> Result<f64> {
    if !probs.same_shape(&episode.targets) {
        return Err(Error::shape(
            "bits_error",
            format!("predictions {:?} vs targets {:?}", probs.shape(), episode.targets.shape()),
        ));
    }
    let mut bits = 0.0;
    for (t, &m) in episode.mask.iter().enumerate() {
        if m {
            bits += step_bits(probs.row(t), episode.targets.row(t));
        }
    }
    Ok(bits)
}

/// Bits error of one step's prediction.
pub fn step_bits(p: &[f64], y: &[f64]) -> f64 {
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let mut b = 0.0;
            if y != 0.0 {
                b -= y * p.max(1e-12).log2();
            }
            if y != 1.0 {
                b -= (1.0 - y) * (1.0 - p).max(1e-12).log2();
            }
            b
        })
        .sum()
}

/// One step drawn from an [`EpisodeStream`].
#[derive(Clone, Debug, PartialEq)]
pub struct StreamStep {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub masked: bool,
    /// `Some(t_task)` on the last step of an episode.
    pub finished: Option<usize>,
}

/// A never-ending sequence of episodes for one batch row; the recurrent
/// state is carried across episode boundaries by the trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStream {
    rng: RngState,
    #[serde(skip)]
    current: Option<Episode>,
    /// Level the current episode was generated at; it is regenerated from
    /// this after a checkpoint restore.
    level: (usize, usize),
    /// Generator state from which the current episode was drawn.
    episode_rng: Option<RngState>,
    pos: usize,
}

impl EpisodeStream {
    pub fn new(rng: RngState) -> Self {
        Self {
            rng,
            current: None,
            level: (1, 1),
            episode_rng: None,
            pos: 0,
        }
    }

    fn ensure(&mut self, kind: TaskKind, level: (usize, usize)) -> Result<()> {
        if self.current.is_none() {
            if let Some(saved) = &self.episode_rng {
                // Restored mid-episode: redraw the same episode.
                let mut r = saved.clone();
                self.current = Some(build(kind, self.level.0, self.level.1, &mut r)?);
            } else {
                self.episode_rng = Some(self.rng.clone());
                self.level = level;
                self.current = Some(build(kind, level.0, level.1, &mut self.rng)?);
                self.pos = 0;
            }
        }
        Ok(())
    }

    /// Returns the next step and moves past it, starting a new episode at
    /// `level = (N, R)` when the previous one has ended.
    pub fn next_step(&mut self, kind: TaskKind, level: (usize, usize)) -> Result<StreamStep> {
        self.ensure(kind, level)?;
        let ep = self.current.as_ref().expect("episode present");
        let t = self.pos;
        let mut step = StreamStep {
            input: ep.inputs.row(t).to_vec(),
            target: ep.targets.row(t).to_vec(),
            masked: ep.mask[t],
            finished: None,
        };
        self.pos += 1;
        if self.pos == ep.steps() {
            step.finished = Some(ep.t_task);
            self.current = None;
            self.episode_rng = None;
            self.pos = 0;
        }
        Ok(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_n1_reports_four() {
        let ep = gen_copy(1, &mut RngState::new(0)).unwrap();
        assert_eq!(ep.t_task, 4);
        assert_eq!(ep.steps(), 4);
    }

    #[test]
    fn copy_n2_layout() {
        let rng = RngState::new(5);
        let ep = gen_copy(2, &mut rng.clone()).unwrap();
        let syms = symbols(2, &mut rng.clone());
        assert_eq!(ep.mask, vec![false, false, false, true, true, true]);
        assert_eq!(&ep.inputs.row(0)[..8], &syms[0]);
        assert_eq!(&ep.inputs.row(1)[..8], &syms[1]);
        assert_eq!(ep.inputs.row(2), &[0., 0., 0., 0., 0., 0., 0., 0., 1., 0.]);
        assert!(ep.inputs.row(3).iter().all(|&v| v == 0.0));
        assert_eq!(&ep.targets.row(3)[..8], &syms[0]);
        assert_eq!(&ep.targets.row(4)[..8], &syms[1]);
        assert_eq!(ep.targets.row(5), &[0., 0., 0., 0., 0., 0., 0., 0., 1.]);
        assert!(ep.targets.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeat_copy_n2_r3() {
        let ep = gen_repeat_copy(2, 3, &mut RngState::new(1)).unwrap();
        assert_eq!(ep.t_task, 9);
        assert_eq!(ep.steps(), 2 + 1 + 1 + 6 + 1);
        assert_eq!(ep.inputs.get(3, 9), 0.3);
        for k in 0..6 {
            assert_eq!(ep.targets.row(4 + k)[..8], ep.inputs.row(k % 2)[..8]);
        }
    }

    #[test]
    fn repeat_once_answers_like_copy() {
        let a = gen_copy(4, &mut RngState::new(9)).unwrap();
        let b = gen_repeat_copy(4, 1, &mut RngState::new(9)).unwrap();
        let ma: Vec<usize> = (0..a.steps()).filter(|&t| a.mask[t]).collect();
        let mb: Vec<usize> = (0..b.steps()).filter(|&t| b.mask[t]).collect();
        assert_eq!(ma.len(), mb.len());
        for (&i, &j) in ma.iter().zip(&mb) {
            assert_eq!(a.targets.row(i), b.targets.row(j));
        }
    }

    #[test]
    fn zero_length_is_rejected() {
        assert!(gen_copy(0, &mut RngState::new(0)).is_err());
        assert!(gen_repeat_copy(2, 0, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn bits_of_perfect_and_uniform_predictions() {
        let ep = gen_copy(3, &mut RngState::new(2)).unwrap();
        assert_eq!(bits_error(&ep.targets, &ep).unwrap(), 0.0);
        let half = Tensor::full(ep.targets.shape(), 0.5);
        let k = ep.mask.iter().filter(|&&m| m).count() * OUTPUT_DIM;
        assert!((bits_error(&half, &ep).unwrap() - k as f64).abs() < 1e-9);
        let inverted = ep.targets.map(|v| 1.0 - v);
        let b = bits_error(&inverted, &ep).unwrap();
        assert!(b.is_finite() && b > 30.0 * k as f64);
    }

    #[test]
    fn stream_matches_generator() {
        let rng = RngState::new(3);
        let mut s = EpisodeStream::new(rng.clone());
        let mut g = rng.clone();
        let first = gen_copy(2, &mut g).unwrap();
        let second = gen_copy(3, &mut g).unwrap();
        for (ep, level) in [(&first, (2, 1)), (&second, (3, 1))] {
            for t in 0..ep.steps() {
                let st = s.next_step(TaskKind::Copy, level).unwrap();
                assert_eq!(st.input, ep.inputs.row(t));
                assert_eq!(st.target, ep.targets.row(t));
                assert_eq!(st.masked, ep.mask[t]);
                let last = t + 1 == ep.steps();
                assert_eq!(st.finished, last.then_some(ep.t_task));
            }
        }
    }

    #[test]
    fn restore_mid_episode_redraws_it() {
        let mut s = EpisodeStream::new(RngState::new(8));
        s.next_step(TaskKind::RepeatCopy, (2, 2)).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let mut r: EpisodeStream = serde_json::from_str(&json).unwrap();
        for _ in 0..12 {
            let a = s.next_step(TaskKind::RepeatCopy, (3, 2)).unwrap();
            let b = r.next_step(TaskKind::RepeatCopy, (3, 2)).unwrap();
            assert_eq!(a, b);
        }
    }
}
