//! Two recurrent networks ticking at different rates. Network A reads one
//! MNIST digit per step and every `T` steps classifies how many of the last
//! `T` digits were odd and emits a message. Network B reads one message per
//! tick and classifies how many 3s appeared in the last `T²` digits.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ff::{Block, BlockCache, BlockGrads};
use crate::layers::{
    argmax_rows, softmax_xent, standardize_backward, standardize_forward, BnMode, Init,
    LinearCache, LinearGrads, LinearLayer, LstmCache, LstmCore, LstmGrads, StandardizeCache,
};
use crate::numerics::{AdamConfig, RngState, Tensor};
use crate::synthetic::{Conditioning, SgConfig, SgModel};
use crate::tasks::MnistDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiMode {
    /// One joint BPTT update of both networks every `T²` steps.
    Locked,
    /// A updates every `T` steps on its own loss plus synthetic feedback on
    /// its message.
    DecoupledDni,
    /// As above with the feedback removed.
    DecoupledNoFeedback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoNetConfig {
    /// Tick ratio: B runs once every `t` steps of A.
    pub t: usize,
    pub message_dim: usize,
    pub sg_feedback_scale: f64,
    /// Condition the message SG model on B's label at that tick.
    #[serde(default)]
    pub sg_label: bool,
    pub mode: MultiMode,
    pub input_dim: usize,
    pub fcn_width: usize,
    pub units_a: usize,
    pub units_b: usize,
    pub sg_hidden: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

impl TwoNetConfig {
    pub fn desk(mode: MultiMode) -> Self {
        Self {
            t: 4,
            message_dim: 32,
            sg_feedback_scale: 10.0,
            sg_label: false,
            mode,
            input_dim: 784,
            fcn_width: 64,
            units_a: 64,
            units_b: 64,
            sg_hidden: 64,
            batch: 32,
            adam: AdamConfig::with_lr(1e-3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return Err(Error::Config("tick ratio must be at least 2".into()));
        }
        if self.batch < 2 {
            return Err(Error::Config("batch-norm in network A needs batch ≥ 2".into()));
        }
        let dims = [self.message_dim, self.input_dim, self.fcn_width, self.units_a, self.units_b, self.sg_hidden];
        if dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn odd_classes(&self) -> usize {
        self.t + 1
    }

    pub fn three_classes(&self) -> usize {
        self.t * self.t + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamLabels {
    pub count_odd: usize,
    pub count_threes: usize,
}

/// Labels at a tick, from the digits seen so far (oldest first): odd digits
/// among the last `t`, 3s among the last `t²`.
pub fn stream_labels(digits: &[usize], t: usize) -> StreamLabels {
    let n = digits.len();
    StreamLabels {
        count_odd: digits[n.saturating_sub(t)..].iter().filter(|&&d| d % 2 == 1).count(),
        count_threes: digits[n.saturating_sub(t * t)..].iter().filter(|&&d| d == 3).count(),
    }
}

/// Per-row streams of random digits with the recent label history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigitStream {
    rng: RngState,
    t: usize,
    history: Vec<VecDeque<usize>>,
}

impl DigitStream {
    pub fn new(rng: RngState, batch: usize, t: usize) -> Self {
        Self {
            rng,
            t,
            history: vec![VecDeque::new(); batch],
        }
    }

    /// Draws one digit per row.
    pub fn draw(&mut self, data: &MnistDataset) -> Tensor {
        let idx: Vec<usize> = (0..self.history.len())
            .map(|_| self.rng.below(data.len() as u64) as usize)
            .collect();
        let (x, labels) = data.batch(&idx);
        let cap = self.t * self.t;
        for (h, l) in self.history.iter_mut().zip(labels) {
            h.push_back(l);
            if h.len() > cap {
                h.pop_front();
            }
        }
        x
    }

    pub fn labels(&self) -> Vec<StreamLabels> {
        self.history
            .iter()
            .map(|h| stream_labels(&h.iter().copied().collect::<Vec<_>>(), self.t))
            .collect()
    }

    /// Rows whose history already spans `t²` digits.
    pub fn warm(&self) -> bool {
        self.history.iter().all(|h| h.len() == self.t * self.t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkA {
    pub fc: Vec<Block>,
    pub lstm: LstmCore,
    pub cls: LinearLayer,
    pub msg: LinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AGrads {
    pub fc: Vec<BlockGrads>,
    pub lstm: LstmGrads,
    pub cls: LinearGrads,
    pub msg: LinearGrads,
}

impl AGrads {
    fn add(acc: &mut Option<AGrads>, g: AGrads) -> Result<()> {
        match acc {
            None => *acc = Some(g),
            Some(s) => {
                for (x, y) in s.fc.iter_mut().zip(&g.fc) {
                    x.add_assign(y)?;
                }
                s.lstm.add_assign(&g.lstm)?;
                s.cls.add_assign(&g.cls)?;
                s.msg.add_assign(&g.msg)?;
            }
        }
        Ok(())
    }
}

impl NetworkA {
    pub fn new(cfg: &TwoNetConfig, rng: &mut RngState) -> Self {
        let a = cfg.adam;
        Self {
            fc: vec![
                Block::hidden(cfg.input_dim, cfg.fcn_width, rng, a),
                Block::hidden(cfg.fcn_width, cfg.fcn_width, rng, a),
            ],
            lstm: LstmCore::new(cfg.fcn_width, cfg.units_a, rng, a),
            cls: LinearLayer::new(cfg.units_a, cfg.odd_classes(), Init::Glorot, rng, a),
            msg: LinearLayer::new(cfg.units_a, cfg.message_dim, Init::Glorot, rng, a),
        }
    }

    pub fn apply(&mut self, g: &AGrads) -> Result<()> {
        for (b, gb) in self.fc.iter_mut().zip(&g.fc) {
            b.apply(gb)?;
        }
        self.lstm.apply(&g.lstm)?;
        self.cls.apply(&g.cls)?;
        self.msg.apply(&g.msg)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for b in &mut self.fc {
            p.extend(b.params_mut());
        }
        p.extend(self.lstm.params_mut());
        p.extend(self.cls.params_mut());
        p.extend(self.msg.params_mut());
        p
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.fc.iter_mut().for_each(|b| b.set_lr(lr));
        self.lstm.set_lr(lr);
        self.cls.set_lr(lr);
        self.msg.set_lr(lr);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkB {
    pub lstm: LstmCore,
    pub cls: LinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BGrads {
    pub lstm: LstmGrads,
    pub cls: LinearGrads,
}

impl NetworkB {
    pub fn new(cfg: &TwoNetConfig, rng: &mut RngState) -> Self {
        Self {
            lstm: LstmCore::new(cfg.message_dim, cfg.units_b, rng, cfg.adam),
            cls: LinearLayer::new(cfg.units_b, cfg.three_classes(), Init::Glorot, rng, cfg.adam),
        }
    }

    pub fn apply(&mut self, g: &BGrads) -> Result<()> {
        self.lstm.apply(&g.lstm)?;
        self.cls.apply(&g.cls)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.lstm.params_mut();
        p.extend(self.cls.params_mut());
        p
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lstm.set_lr(lr);
        self.cls.set_lr(lr);
    }
}

/// Recurrent state of both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoNetState {
    pub ha: Tensor,
    pub ca: Tensor,
    pub hb: Tensor,
    pub cb: Tensor,
}

impl TwoNetState {
    pub fn new(cfg: &TwoNetConfig, batch: usize) -> Self {
        Self {
            ha: Tensor::zeros(&[batch, cfg.units_a]),
            ca: Tensor::zeros(&[batch, cfg.units_a]),
            hb: Tensor::zeros(&[batch, cfg.units_b]),
            cb: Tensor::zeros(&[batch, cfg.units_b]),
        }
    }
}

/// A's `T` steps up to one tick.
struct Segment {
    steps: Vec<(Vec<BlockCache>, LstmCache)>,
    cls: LinearCache,
    msg: LinearCache,
    std: StandardizeCache,
    logits: Tensor,
    message: Tensor,
}

fn a_forward(a: &mut NetworkA, st: &mut TwoNetState, xs: &[Tensor], mode: BnMode) -> Result<Segment> {
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let mut z = x.clone();
        let mut caches = Vec::with_capacity(a.fc.len());
        for b in &mut a.fc {
            let (y, c) = b.forward(&z, mode)?;
            caches.push(c);
            z = y;
        }
        let (h, c, lc) = a.lstm.step(&z, &st.ha, &st.ca)?;
        st.ha = h;
        st.ca = c;
        steps.push((caches, lc));
    }
    let (logits, cls) = a.cls.forward(&st.ha)?;
    let (raw, msg) = a.msg.forward(&st.ha)?;
    let (message, std) = standardize_forward(&raw);
    Ok(Segment {
        steps,
        cls,
        msg,
        std,
        logits,
        message,
    })
}

/// Backward through one segment. Returns the state gradient at its start.
fn a_backward(
    a: &NetworkA,
    seg: &Segment,
    dlogits: &Tensor,
    dmessage: Option<&Tensor>,
    carry: (Tensor, Tensor),
    acc: &mut Option<AGrads>,
) -> Result<(Tensor, Tensor)> {
    let (mut dh, mut dc) = carry;
    let (dcls, gcls) = a.cls.backward(&seg.cls, dlogits)?;
    dh.add_assign(&dcls)?;
    let gmsg = match dmessage {
        Some(dm) => {
            let draw = standardize_backward(&seg.std, dm)?;
            let (dmh, g) = a.msg.backward(&seg.msg, &draw)?;
            dh.add_assign(&dmh)?;
            g
        }
        None => LinearGrads::zeros_for(&a.msg),
    };
    let mut lstm = LstmGrads::zeros_for(&a.lstm);
    let mut fc: Option<Vec<BlockGrads>> = None;
    for (caches, lc) in seg.steps.iter().rev() {
        let g = a.lstm.backward(lc, &dh, &dc)?;
        lstm.add_assign(&g.params)?;
        dh = g.dh_prev;
        dc = g.dc_prev;
        let mut d = g.dx;
        let mut step_fc = Vec::with_capacity(a.fc.len());
        for (b, c) in a.fc.iter().zip(caches).rev() {
            let (dx, gb) = b.backward(c, &d)?;
            step_fc.push(gb);
            d = dx;
        }
        step_fc.reverse();
        match &mut fc {
            None => fc = Some(step_fc),
            Some(s) => {
                for (x, y) in s.iter_mut().zip(&step_fc) {
                    x.add_assign(y)?;
                }
            }
        }
    }
    let fc = fc.ok_or_else(|| Error::State("empty segment".into()))?;
    AGrads::add(
        acc,
        AGrads {
            fc,
            lstm,
            cls: gcls,
            msg: gmsg,
        },
    )?;
    Ok((dh, dc))
}

struct BTick {
    cache: LstmCache,
    cls: LinearCache,
    logits: Tensor,
}

fn b_forward(b: &NetworkB, st: &mut TwoNetState, message: &Tensor) -> Result<BTick> {
    let (h, c, cache) = b.lstm.step(message, &st.hb, &st.cb)?;
    let (logits, cls) = b.cls.forward(&h)?;
    st.hb = h;
    st.cb = c;
    Ok(BTick { cache, cls, logits })
}

/// BPTT through B's ticks. Returns parameter gradients and `∂L/∂message`
/// for every tick.
fn b_backward(b: &NetworkB, ticks: &[BTick], dlogits: &[Tensor]) -> Result<(BGrads, Vec<Tensor>)> {
    let mut g = BGrads {
        lstm: LstmGrads::zeros_for(&b.lstm),
        cls: LinearGrads::zeros_for(&b.cls),
    };
    let first = ticks.first().ok_or_else(|| Error::State("no ticks".into()))?;
    let shape = [first.logits.rows(), b.lstm.units()];
    let (mut dh, mut dc) = (Tensor::zeros(&shape), Tensor::zeros(&shape));
    let mut dms = vec![Tensor::zeros(&[0]); ticks.len()];
    for k in (0..ticks.len()).rev() {
        let (dhc, gc) = b.cls.backward(&ticks[k].cls, &dlogits[k])?;
        g.cls.add_assign(&gc)?;
        dh.add_assign(&dhc)?;
        let s = b.lstm.backward(&ticks[k].cache, &dh, &dc)?;
        g.lstm.add_assign(&s.params)?;
        dh = s.dh_prev;
        dc = s.dc_prev;
        dms[k] = s.dx;
    }
    Ok((g, dms))
}

/// Inputs and labels for one B window: `t` ticks of `t` steps each.
#[derive(Clone, Debug)]
pub struct WindowData {
    pub xs: Vec<Vec<Tensor>>,
    pub odd: Vec<Vec<usize>>,
    pub threes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LockedLosses {
    /// Σ over ticks of A's batch-mean loss.
    pub a: f64,
    /// Σ over ticks of B's batch-mean loss.
    pub b: f64,
}

/// Gradients of the summed losses of both networks over one window,
/// backpropagated end to end through the messages. Advances `st`.
pub fn locked_grads(
    a: &mut NetworkA,
    b: &NetworkB,
    st: &mut TwoNetState,
    w: &WindowData,
) -> Result<(LockedLosses, AGrads, BGrads)> {
    let mut losses = LockedLosses::default();
    let mut segs = Vec::with_capacity(w.xs.len());
    let mut ticks = Vec::with_capacity(w.xs.len());
    let mut da = Vec::with_capacity(w.xs.len());
    let mut db = Vec::with_capacity(w.xs.len());
    for k in 0..w.xs.len() {
        let seg = a_forward(a, st, &w.xs[k], BnMode::Train)?;
        let (la, ga) = softmax_xent(&seg.logits, &w.odd[k])?;
        let tick = b_forward(b, st, &seg.message)?;
        let (lb, gb) = softmax_xent(&tick.logits, &w.threes[k])?;
        losses.a += la;
        losses.b += lb;
        da.push(ga);
        db.push(gb);
        segs.push(seg);
        ticks.push(tick);
    }
    let (bg, dms) = b_backward(b, &ticks, &db)?;
    let shape = [st.ha.rows(), a.lstm.units()];
    let mut carry = (Tensor::zeros(&shape), Tensor::zeros(&shape));
    let mut acc = None;
    for k in (0..segs.len()).rev() {
        carry = a_backward(a, &segs[k], &da[k], Some(&dms[k]), carry, &mut acc)?;
    }
    let ag = acc.ok_or_else(|| Error::State("empty window".into()))?;
    Ok((losses, ag, bg))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiReport {
    /// Mean over the window's ticks of A's batch-mean loss.
    pub a_loss: f64,
    pub b_loss: f64,
    pub sg_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiEval {
    pub a_error: f64,
    pub b_error: f64,
    /// Error of always guessing the most frequent 3s count on the same stream.
    pub b_chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiNetTrainer {
    pub cfg: TwoNetConfig,
    pub a: NetworkA,
    pub b: NetworkB,
    pub sg: Option<SgModel>,
    pub state: TwoNetState,
    stream: DigitStream,
    pub steps: u64,
    pub a_updates: u64,
    pub b_updates: u64,
}

impl MultiNetTrainer {
    pub fn new(cfg: TwoNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = RngState::new(seed);
        let mut rng = root.fork(0);
        let a = NetworkA::new(&cfg, &mut rng);
        let b = NetworkB::new(&cfg, &mut rng);
        let sg = (cfg.mode == MultiMode::DecoupledDni).then(|| {
            let sc = SgConfig {
                hidden_layers: 1,
                hidden_width: cfg.sg_hidden,
                batchnorm: false,
                conditioning: if cfg.sg_label {
                    Conditioning::Label(cfg.three_classes())
                } else {
                    Conditioning::None
                },
            };
            SgModel::new(cfg.message_dim, cfg.message_dim, sc, &mut rng, cfg.adam)
        });
        Ok(Self {
            state: TwoNetState::new(&cfg, cfg.batch),
            stream: DigitStream::new(root.fork(1), cfg.batch, cfg.t),
            a,
            b,
            sg,
            cfg,
            steps: 0,
            a_updates: 0,
            b_updates: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.a.set_lr(lr);
        self.b.set_lr(lr);
        if let Some(sg) = &mut self.sg {
            sg.set_lr(lr);
        }
    }

    fn draw_window(stream: &mut DigitStream, data: &MnistDataset, t: usize) -> WindowData {
        let mut w = WindowData {
            xs: Vec::with_capacity(t),
            odd: Vec::with_capacity(t),
            threes: Vec::with_capacity(t),
        };
        for _ in 0..t {
            w.xs.push((0..t).map(|_| stream.draw(data)).collect());
            let labels = stream.labels();
            w.odd.push(labels.iter().map(|l| l.count_odd).collect());
            w.threes.push(labels.iter().map(|l| l.count_threes).collect());
        }
        w
    }

    /// Trains on the next `T²` steps of the stream.
    pub fn train_window(&mut self, data: &MnistDataset) -> Result<MultiReport> {
        let t = self.cfg.t;
        let w = Self::draw_window(&mut self.stream, data, t);
        let report = match self.cfg.mode {
            MultiMode::Locked => {
                let (l, ag, bg) = locked_grads(&mut self.a, &self.b, &mut self.state, &w)?;
                self.a.apply(&ag)?;
                self.b.apply(&bg)?;
                self.a_updates += 1;
                self.b_updates += 1;
                MultiReport {
                    a_loss: l.a / t as f64,
                    b_loss: l.b / t as f64,
                    sg_loss: None,
                }
            }
            MultiMode::DecoupledDni | MultiMode::DecoupledNoFeedback => self.decoupled_window(&w)?,
        };
        self.steps += (t * t) as u64;
        Ok(report)
    }

    fn decoupled_window(&mut self, w: &WindowData) -> Result<MultiReport> {
        let t = self.cfg.t;
        let batch = self.cfg.batch as f64;
        let label = |k: usize| self.cfg.sg_label.then(|| w.threes[k].as_slice());
        let mut report = MultiReport::default();
        let mut ticks = Vec::with_capacity(t);
        let mut db = Vec::with_capacity(t);
        let mut messages = Vec::with_capacity(t);
        for k in 0..t {
            let seg = a_forward(&mut self.a, &mut self.state, &w.xs[k], BnMode::Train)?;
            let (la, ga) = softmax_xent(&seg.logits, &w.odd[k])?;
            report.a_loss += la / t as f64;
            let feedback = match &mut self.sg {
                Some(sg) => Some(
                    sg.predict(&seg.message, label(k), BnMode::Train)?
                        .scale(self.cfg.sg_feedback_scale / batch),
                ),
                None => None,
            };
            let shape = [self.cfg.batch, self.cfg.units_a];
            let mut acc = None;
            a_backward(
                &self.a,
                &seg,
                &ga,
                feedback.as_ref(),
                (Tensor::zeros(&shape), Tensor::zeros(&shape)),
                &mut acc,
            )?;
            let tick = b_forward(&self.b, &mut self.state, &seg.message)?;
            let (lb, gb) = softmax_xent(&tick.logits, &w.threes[k])?;
            report.b_loss += lb / t as f64;
            db.push(gb);
            ticks.push(tick);
            messages.push(seg.message);
            self.a.apply(&acc.expect("segment produced gradients"))?;
            self.a_updates += 1;
        }
        let (bg, dms) = b_backward(&self.b, &ticks, &db)?;
        self.b.apply(&bg)?;
        self.b_updates += 1;
        if let Some(sg) = &mut self.sg {
            let mut x = messages[0].clone();
            let mut y = dms[0].scale(batch);
            for k in 1..t {
                x = x.vcat(&messages[k])?;
                y = y.vcat(&dms[k].scale(batch))?;
            }
            let labels: Vec<usize> = w.threes.concat();
            report.sg_loss = Some(sg.update(&x, label(0).map(|_| labels.as_slice()), &y)?.loss);
        }
        Ok(report)
    }

    /// Errors on a fixed stream drawn from `data` with `seed`, over `ticks`
    /// ticks; B is scored once its window holds `T²` digits.
    pub fn evaluate(&mut self, data: &MnistDataset, ticks: usize, seed: u64) -> Result<MultiEval> {
        let t = self.cfg.t;
        let batch = self.cfg.batch;
        let mut stream = DigitStream::new(RngState::new(seed), batch, t);
        let mut st = TwoNetState::new(&self.cfg, batch);
        let (mut a_wrong, mut a_n, mut b_wrong, mut b_n) = (0usize, 0usize, 0usize, 0usize);
        let mut hist = vec![0usize; self.cfg.three_classes()];
        for _ in 0..ticks {
            let xs: Vec<Tensor> = (0..t).map(|_| stream.draw(data)).collect();
            let labels = stream.labels();
            let seg = a_forward(&mut self.a, &mut st, &xs, BnMode::Eval)?;
            let tick = b_forward(&self.b, &mut st, &seg.message)?;
            for (r, (pa, pb)) in argmax_rows(&seg.logits).into_iter().zip(argmax_rows(&tick.logits)).enumerate() {
                a_n += 1;
                a_wrong += (pa != labels[r].count_odd) as usize;
                if stream.warm() {
                    b_n += 1;
                    b_wrong += (pb != labels[r].count_threes) as usize;
                    hist[labels[r].count_threes] += 1;
                }
            }
        }
        let frac = |w: usize, n: usize| if n == 0 { f64::NAN } else { w as f64 / n as f64 };
        let top = hist.iter().copied().max().unwrap_or(0);
        Ok(MultiEval {
            a_error: frac(a_wrong, a_n),
            b_error: frac(b_wrong, b_n),
            b_chance: frac(b_n - top, b_n),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn tiny(mode: MultiMode) -> TwoNetConfig {
        TwoNetConfig {
            t: 2,
            message_dim: 3,
            sg_feedback_scale: 10.0,
            sg_label: false,
            mode,
            input_dim: 5,
            fcn_width: 4,
            units_a: 3,
            units_b: 3,
            sg_hidden: 4,
            batch: 3,
            adam: AdamConfig::with_lr(1e-2),
        }
    }

    fn fake_digits(n: usize, dim: usize, seed: u64) -> MnistDataset {
        let mut rng = RngState::new(seed);
        MnistDataset {
            images: rng.uniform_tensor(&[n, dim], 0.0, 1.0),
            labels: (0..n).map(|_| rng.below(10) as usize).collect(),
        }
    }

    #[test]
    fn label_examples() {
        assert_eq!(stream_labels(&[1, 2], 2).count_odd, 1);
        assert_eq!(stream_labels(&[3, 3, 3, 3], 2).count_threes, 4);
        assert_eq!(stream_labels(&[3], 2), StreamLabels { count_odd: 1, count_threes: 1 });
    }

    #[test]
    fn stream_labels_match_recount() {
        let mut rng = RngState::new(0);
        let t = 4;
        let digits: Vec<usize> = (0..10_000 + 16).map(|_| rng.below(10) as usize).collect();
        for end in 16..digits.len() {
            let l = stream_labels(&digits[..end], t);
            let mut odd = 0;
            for k in end - t..end {
                if [1, 3, 5, 7, 9].contains(&digits[k]) {
                    odd += 1;
                }
            }
            let threes = (end - 16..end).filter(|&k| digits[k] == 3).count();
            assert_eq!((l.count_odd, l.count_threes), (odd, threes));
            assert!(l.count_odd <= t && l.count_threes <= t * t);
        }
    }

    #[test]
    fn locked_window_has_t_squared_steps_and_one_update() {
        let data = fake_digits(50, 5, 1);
        let mut tr = MultiNetTrainer::new(tiny(MultiMode::Locked), 2).unwrap();
        let before = tr.clone();
        tr.train_window(&data).unwrap();
        assert_eq!((tr.steps, tr.a_updates, tr.b_updates), (4, 1, 1));
        assert!(tr.stream.history.iter().all(|h| h.len() == 4));
        assert_ne!(tr.a, before.a);
        assert_ne!(tr.b, before.b);
    }

    #[test]
    fn update_cadence() {
        let data = fake_digits(50, 5, 3);
        for (mode, a) in [(MultiMode::Locked, 3), (MultiMode::DecoupledDni, 6), (MultiMode::DecoupledNoFeedback, 6)] {
            let mut tr = MultiNetTrainer::new(tiny(mode), 4).unwrap();
            for _ in 0..3 {
                tr.train_window(&data).unwrap();
            }
            assert_eq!(tr.steps, 12);
            assert_eq!((tr.a_updates, tr.b_updates), (a, 3), "{mode:?}");
        }
    }

    fn window(data: &MnistDataset, cfg: &TwoNetConfig, seed: u64) -> WindowData {
        let mut s = DigitStream::new(RngState::new(seed), cfg.batch, cfg.t);
        MultiNetTrainer::draw_window(&mut s, data, cfg.t)
    }

    #[test]
    fn locked_gradients_match_finite_differences() {
        let cfg = tiny(MultiMode::Locked);
        let data = fake_digits(40, 5, 5);
        let w = window(&data, &cfg, 6);
        let tr = MultiNetTrainer::new(cfg.clone(), 7).unwrap();
        let mut st = TwoNetState::new(&cfg, cfg.batch);
        let mut rng = RngState::new(8);
        st.ha = rng.uniform_tensor(st.ha.shape(), -0.5, 0.5);
        st.hb = rng.uniform_tensor(st.hb.shape(), -0.5, 0.5);
        let (mut a, b) = (tr.a.clone(), tr.b.clone());
        let (_, ag, bg) = locked_grads(&mut a, &b, &mut st.clone(), &w).unwrap();

        let loss = |a: &NetworkA, b: &NetworkB| {
            let (l, _, _) = locked_grads(&mut a.clone(), b, &mut st.clone(), &w).unwrap();
            l.a + l.b
        };
        let mut analytic_a: Vec<Tensor> = Vec::new();
        for g in &ag.fc {
            analytic_a.extend([g.linear.dw.clone(), g.linear.db.clone()]);
            let bn = g.bn.as_ref().unwrap();
            analytic_a.extend([bn.dgamma.clone(), bn.dbeta.clone()]);
        }
        analytic_a.extend([ag.lstm.dwx.clone(), ag.lstm.dwh.clone(), ag.lstm.db.clone()]);
        analytic_a.extend([ag.cls.dw.clone(), ag.cls.db.clone(), ag.msg.dw.clone(), ag.msg.db.clone()]);
        let n_a = tr.a.clone().params_mut().len();
        assert_eq!(n_a, analytic_a.len());
        for (i, g) in analytic_a.iter().enumerate() {
            let base = tr.a.clone().params_mut()[i].clone();
            let fd = finite_diff_grad(
                |p| {
                    let mut probe = tr.a.clone();
                    *probe.params_mut()[i] = p.clone();
                    loss(&probe, &tr.b)
                },
                &base,
                1e-5,
            );
            assert!(max_relative_error(g, &fd, 1e-6) < 1e-4, "A param {i}");
        }
        let analytic_b = [&bg.lstm.dwx, &bg.lstm.dwh, &bg.lstm.db, &bg.cls.dw, &bg.cls.db];
        for (i, g) in analytic_b.into_iter().enumerate() {
            let base = tr.b.clone().params_mut()[i].clone();
            let fd = finite_diff_grad(
                |p| {
                    let mut probe = tr.b.clone();
                    *probe.params_mut()[i] = p.clone();
                    loss(&tr.a, &probe)
                },
                &base,
                1e-5,
            );
            assert!(max_relative_error(g, &fd, 1e-6) < 1e-4, "B param {i}");
        }
    }

    #[test]
    fn zero_message_weights_cut_feedback_into_a() {
        let cfg = tiny(MultiMode::Locked);
        let data = fake_digits(40, 5, 9);
        let w = window(&data, &cfg, 10);
        let mut tr = MultiNetTrainer::new(cfg.clone(), 11).unwrap();
        tr.a.msg.weight.value.fill(0.0);
        let mut other_b = tr.b.clone();
        other_b.cls.weight.value = other_b.cls.weight.value.scale(-3.0);
        let st = TwoNetState::new(&cfg, cfg.batch);
        let (_, g1, _) = locked_grads(&mut tr.a.clone(), &tr.b, &mut st.clone(), &w).unwrap();
        let (_, g2, _) = locked_grads(&mut tr.a.clone(), &other_b, &mut st.clone(), &w).unwrap();
        assert_eq!(g1.fc, g2.fc);
        assert_eq!(g1.lstm, g2.lstm);
        assert_eq!(g1.cls, g2.cls);
    }

    #[test]
    fn fresh_sg_first_window_matches_no_feedback() {
        let data = fake_digits(40, 5, 12);
        let mut dni = MultiNetTrainer::new(tiny(MultiMode::DecoupledDni), 13).unwrap();
        let mut plain = MultiNetTrainer::new(tiny(MultiMode::DecoupledNoFeedback), 13).unwrap();
        dni.train_window(&data).unwrap();
        plain.train_window(&data).unwrap();
        assert_eq!(dni.a, plain.a);
        assert_eq!(dni.b, plain.b);
        dni.train_window(&data).unwrap();
        plain.train_window(&data).unwrap();
        assert_ne!(dni.a.msg, plain.a.msg);
    }

    #[test]
    fn label_conditioned_feedback_sees_b_labels() {
        let data = fake_digits(40, 5, 18);
        let mut cfg = tiny(MultiMode::DecoupledDni);
        cfg.sg_label = true;
        let mut tr = MultiNetTrainer::new(cfg, 19).unwrap();
        let sg = tr.sg.as_ref().unwrap();
        assert_eq!(sg.config().conditioning, Conditioning::Label(5));
        let mut plain = MultiNetTrainer::new(tiny(MultiMode::DecoupledDni), 19).unwrap();
        for _ in 0..2 {
            tr.train_window(&data).unwrap();
            plain.train_window(&data).unwrap();
        }
        assert_ne!(tr.a.msg, plain.a.msg);
    }

    #[test]
    fn no_feedback_leaves_message_head_untouched() {
        let data = fake_digits(40, 5, 14);
        let mut tr = MultiNetTrainer::new(tiny(MultiMode::DecoupledNoFeedback), 15).unwrap();
        let msg = tr.a.msg.clone();
        let cls = tr.a.cls.clone();
        for _ in 0..4 {
            tr.train_window(&data).unwrap();
        }
        assert_eq!(tr.a.msg.weight.value, msg.weight.value);
        assert_eq!(tr.a.msg.bias.value, msg.bias.value);
        assert_ne!(tr.a.cls, cls);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = fake_digits(40, 5, 16);
        let mut tr = MultiNetTrainer::new(tiny(MultiMode::Locked), 17).unwrap();
        let e1 = tr.evaluate(&data, 20, 99).unwrap();
        let e2 = tr.evaluate(&data, 20, 99).unwrap();
        assert_eq!(e1, e2);
        assert!((0.0..=1.0).contains(&e1.b_chance));
    }
}
