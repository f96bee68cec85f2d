use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::copy::TaskKind;

/// An episode is solved when its bits error averages below this.
pub const SOLVE_THRESHOLD_BITS: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumLevel {
    pub n: usize,
    pub r: usize,
}

impl CurriculumLevel {
    pub fn t_task(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Copy => self.n + 3,
            TaskKind::RepeatCopy => self.n * self.r + 3,
        }
    }
}

/// Episode-length curriculum. Copy grows `N`; Repeat Copy grows `N` and `R`
/// alternately, starting with `N`. A level counts as solved once the mean
/// bits error of the last `window` episodes drawn at that level falls below
/// the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub kind: TaskKind,
    pub level: CurriculumLevel,
    pub threshold: f64,
    pub window: usize,
    history: VecDeque<f64>,
    grow_r_next: bool,
    /// Largest `t_task` solved so far, 0 before the first.
    pub max_solved: usize,
}

impl Curriculum {
    pub fn new(kind: TaskKind) -> Self {
        Self::with_window(kind, 50)
    }

    pub fn with_window(kind: TaskKind, window: usize) -> Self {
        Self {
            kind,
            level: CurriculumLevel { n: 1, r: 1 },
            threshold: SOLVE_THRESHOLD_BITS,
            window: window.max(1),
            history: VecDeque::new(),
            grow_r_next: false,
            max_solved: 0,
        }
    }

    pub fn level_pair(&self) -> (usize, usize) {
        (self.level.n, self.level.r)
    }

    pub fn t_task(&self) -> usize {
        self.level.t_task(self.kind)
    }

    /// Moves to the next level unconditionally.
    pub fn advance(&mut self) {
        self.max_solved = self.max_solved.max(self.t_task());
        match self.kind {
            TaskKind::Copy => self.level.n += 1,
            TaskKind::RepeatCopy => {
                if self.grow_r_next {
                    self.level.r += 1;
                } else {
                    self.level.n += 1;
                }
                self.grow_r_next = !self.grow_r_next;
            }
        }
        self.history.clear();
    }

    /// Advances if `mean_bits` is below the threshold. Returns whether it did.
    pub fn advance_if_solved(&mut self, mean_bits: f64) -> bool {
        if mean_bits < self.threshold {
            self.advance();
            true
        } else {
            false
        }
    }

    /// Records a finished episode. Episodes generated at an earlier level are
    /// ignored. Returns whether the curriculum advanced.
    pub fn record(&mut self, bits: f64, t_task: usize) -> bool {
        if t_task != self.t_task() {
            return false;
        }
        self.history.push_back(bits);
        if self.history.len() > self.window {
            self.history.pop_front();
        }
        if self.history.len() < self.window {
            return false;
        }
        let mean = self.history.iter().sum::<f64>() / self.history.len() as f64;
        self.advance_if_solved(mean)
    }
}
