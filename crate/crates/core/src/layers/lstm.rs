use serde::{Deserialize, Serialize};

use super::activation::sigmoid;
use crate::error::{Error, Result};
use crate::numerics::{gemm, gemm_acc, AdamConfig, Param, RngState, Tensor};

/// LSTM cell without peepholes. Gate pre-activations are laid out as
/// `[i, f, g, o]` blocks of `units` columns each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCore {
    /// `[4U × in]`
    pub wx: Param,
    /// `[4U × U]`
    pub wh: Param,
    /// `[4U]`
    pub b: Param,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCache {
    x: Tensor,
    h: Tensor,
    c: Tensor,
    /// Post-nonlinearity gates `[B × 4U]`.
    gates: Tensor,
    tanh_c: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmGrads {
    pub dwx: Tensor,
    pub dwh: Tensor,
    pub db: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmStepGrads {
    pub dx: Tensor,
    pub dh_prev: Tensor,
    pub dc_prev: Tensor,
    pub params: LstmGrads,
}

impl LstmGrads {
    pub fn zeros_for(core: &LstmCore) -> Self {
        Self {
            dwx: Tensor::zeros_like(&core.wx.value),
            dwh: Tensor::zeros_like(&core.wh.value),
            db: Tensor::zeros_like(&core.b.value),
        }
    }

    pub fn add_assign(&mut self, o: &LstmGrads) -> Result<()> {
        self.dwx.add_assign(&o.dwx)?;
        self.dwh.add_assign(&o.dwh)?;
        self.db.add_assign(&o.db)
    }

    pub fn sq_norm(&self) -> f64 {
        self.dwx.sq_norm() + self.dwh.sq_norm() + self.db.sq_norm()
    }
}

impl LstmCore {
    /// Weights uniform in ±1/√U, forget-gate bias 1.
    pub fn new(in_dim: usize, units: usize, rng: &mut RngState, adam: AdamConfig) -> Self {
        let a = 1.0 / (units as f64).sqrt();
        let mut b = Tensor::zeros(&[4 * units]);
        for j in units..2 * units {
            b.data_mut()[j] = 1.0;
        }
        Self {
            wx: Param::new(rng.uniform_tensor(&[4 * units, in_dim], -a, a), adam),
            wh: Param::new(rng.uniform_tensor(&[4 * units, units], -a, a), adam),
            b: Param::new(b, adam),
        }
    }

    pub fn units(&self) -> usize {
        self.wh.value.cols()
    }

    /// Input the step was run on.
    pub fn cache_input(cache: &LstmCache) -> &Tensor {
        &cache.x
    }

    pub fn in_dim(&self) -> usize {
        self.wx.value.cols()
    }

    pub fn zero_state(&self, batch: usize) -> (Tensor, Tensor) {
        let u = self.units();
        (Tensor::zeros(&[batch, u]), Tensor::zeros(&[batch, u]))
    }

    /// One step: returns `(h', c', cache)`.
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor, LstmCache)> {
        let u = self.units();
        let n = x.rows();
        if x.cols() != self.in_dim() || h.shape() != [n, u] || c.shape() != [n, u] {
            return Err(Error::shape(
                "lstm_step",
                format!("x {:?}, h {:?}, c {:?}, units {u}", x.shape(), h.shape(), c.shape()),
            ));
        }
        let mut z = gemm(x, false, &self.wx.value, true)?;
        gemm_acc(1.0, h, false, &self.wh.value, true, 1.0, &mut z)?;
        let mut z = z.add_row_vector(&self.b.value)?;
        let mut h_new = Tensor::zeros(&[n, u]);
        let mut c_new = Tensor::zeros(&[n, u]);
        let mut tanh_c = Tensor::zeros(&[n, u]);
        for r in 0..n {
            let zr = z.row_mut(r);
            for j in 0..u {
                zr[j] = sigmoid(zr[j]);
                zr[u + j] = sigmoid(zr[u + j]);
                zr[2 * u + j] = zr[2 * u + j].tanh();
                zr[3 * u + j] = sigmoid(zr[3 * u + j]);
            }
            let zr = z.row(r);
            let cr = c.row(r);
            for j in 0..u {
                let cn = zr[u + j] * cr[j] + zr[j] * zr[2 * u + j];
                let tc = cn.tanh();
                c_new.set(r, j, cn);
                tanh_c.set(r, j, tc);
                h_new.set(r, j, zr[3 * u + j] * tc);
            }
        }
        let cache = LstmCache {
            x: x.clone(),
            h: h.clone(),
            c: c.clone(),
            gates: z,
            tanh_c,
        };
        Ok((h_new, c_new, cache))
    }

    fn gate_grads(&self, cache: &LstmCache, dh: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
        let u = self.units();
        let n = cache.x.rows();
        if dh.shape() != [n, u] || dc.shape() != [n, u] {
            return Err(Error::shape(
                "lstm_backward",
                format!("dh {:?}, dc {:?} for batch {n}, units {u}", dh.shape(), dc.shape()),
            ));
        }
        let mut dz = Tensor::zeros(&[n, 4 * u]);
        let mut dc_prev = Tensor::zeros(&[n, u]);
        for r in 0..n {
            let gt = cache.gates.row(r);
            let cp = cache.c.row(r);
            let tc = cache.tanh_c.row(r);
            let (dhr, dcr) = (dh.row(r), dc.row(r));
            let dzr = dz.row_mut(r);
            for j in 0..u {
                let (i, f, g, o) = (gt[j], gt[u + j], gt[2 * u + j], gt[3 * u + j]);
                let dct = dcr[j] + dhr[j] * o * (1.0 - tc[j] * tc[j]);
                dzr[j] = dct * g * i * (1.0 - i);
                dzr[u + j] = dct * cp[j] * f * (1.0 - f);
                dzr[2 * u + j] = dct * i * (1.0 - g * g);
                dzr[3 * u + j] = dhr[j] * tc[j] * o * (1.0 - o);
                dc_prev.set(r, j, dct * f);
            }
        }
        Ok((dz, dc_prev))
    }

    /// Full backward through one step given gradients on `(h', c')`.
    pub fn backward(&self, cache: &LstmCache, dh: &Tensor, dc: &Tensor) -> Result<LstmStepGrads> {
        let (dz, dc_prev) = self.gate_grads(cache, dh, dc)?;
        let dx = gemm(&dz, false, &self.wx.value, false)?;
        let dh_prev = gemm(&dz, false, &self.wh.value, false)?;
        let mut dwx = Tensor::zeros_like(&self.wx.value);
        gemm_acc(1.0, &dz, true, &cache.x, false, 0.0, &mut dwx)?;
        let mut dwh = Tensor::zeros_like(&self.wh.value);
        gemm_acc(1.0, &dz, true, &cache.h, false, 0.0, &mut dwh)?;
        Ok(LstmStepGrads {
            dx,
            dh_prev,
            dc_prev,
            params: LstmGrads {
                dwx,
                dwh,
                db: dz.sum_rows(),
            },
        })
    }

    /// Backward through the state path only: `(dh_prev, dc_prev)`.
    pub fn backward_state(&self, cache: &LstmCache, dh: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
        let (dz, dc_prev) = self.gate_grads(cache, dh, dc)?;
        Ok((gemm(&dz, false, &self.wh.value, false)?, dc_prev))
    }

    pub fn apply(&mut self, g: &LstmGrads) -> Result<()> {
        self.wx.step(&g.dwx)?;
        self.wh.step(&g.dwh)?;
        self.b.step(&g.db)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.wx.set_lr(lr);
        self.wh.set_lr(lr);
        self.b.set_lr(lr);
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.wx.value, &self.wh.value, &self.b.value]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.wx.value, &mut self.wh.value, &mut self.b.value]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn setup(seed: u64) -> (LstmCore, Tensor, Tensor, Tensor, Tensor, Tensor) {
        let mut rng = RngState::new(seed);
        let (n, i, u) = (3, 4, 5);
        let mut core = LstmCore::new(i, u, &mut rng, AdamConfig::default());
        core.b.value = rng.uniform_tensor(&[4 * u], -0.5, 0.5);
        let x = rng.uniform_tensor(&[n, i], -1.0, 1.0);
        let h = rng.uniform_tensor(&[n, u], -1.0, 1.0);
        let c = rng.uniform_tensor(&[n, u], -1.0, 1.0);
        let ph = rng.uniform_tensor(&[n, u], -1.0, 1.0);
        let pc = rng.uniform_tensor(&[n, u], -1.0, 1.0);
        (core, x, h, c, ph, pc)
    }

    fn probe_loss(core: &LstmCore, x: &Tensor, h: &Tensor, c: &Tensor, ph: &Tensor, pc: &Tensor) -> f64 {
        let (h2, c2, _) = core.step(x, h, c).unwrap();
        h2.dot(ph).unwrap() + c2.dot(pc).unwrap()
    }

    #[test]
    fn init_has_unit_forget_bias() {
        let core = LstmCore::new(2, 3, &mut RngState::new(0), AdamConfig::default());
        assert_eq!(core.b.value.data(), &[0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
        let a = 1.0 / 3f64.sqrt();
        assert!(core.wx.value.max_abs() <= a && core.wh.value.max_abs() <= a);
    }

    #[test]
    fn zero_weights_give_hand_values() {
        let mut core = LstmCore::new(1, 1, &mut RngState::new(0), AdamConfig::default());
        for p in core.params_mut() {
            p.fill(0.0);
        }
        let c = Tensor::from_rows(&[[2.0]]).unwrap();
        let (h2, c2, _) = core.step(&Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 1]), &c).unwrap();
        // all sigmoid gates are 0.5 and g = 0
        assert!((c2.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((h2.get(0, 0) - 0.5 * 1f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn all_six_gradients_match_finite_differences() {
        for seed in 0..5 {
            let (core, x, h, c, ph, pc) = setup(seed);
            let (_, _, cache) = core.step(&x, &h, &c).unwrap();
            let g = core.backward(&cache, &ph, &pc).unwrap();
            let tol = 1e-4;
            let n = finite_diff_grad(|x| probe_loss(&core, x, &h, &c, &ph, &pc), &x, 1e-6);
            let e = max_relative_error(&g.dx, &n, 1e-6);
            assert!(e < tol, "{e}");
            let n = finite_diff_grad(|h| probe_loss(&core, &x, h, &c, &ph, &pc), &h, 1e-6);
            assert!(max_relative_error(&g.dh_prev, &n, 1e-6) < tol);
            let n = finite_diff_grad(|c| probe_loss(&core, &x, &h, c, &ph, &pc), &c, 1e-6);
            assert!(max_relative_error(&g.dc_prev, &n, 1e-6) < tol);
            let n = finite_diff_grad(
                |w| {
                    let mut k = core.clone();
                    k.wx.value = w.clone();
                    probe_loss(&k, &x, &h, &c, &ph, &pc)
                },
                &core.wx.value,
                1e-6,
            );
            assert!(max_relative_error(&g.params.dwx, &n, 1e-6) < tol);
            let n = finite_diff_grad(
                |w| {
                    let mut k = core.clone();
                    k.wh.value = w.clone();
                    probe_loss(&k, &x, &h, &c, &ph, &pc)
                },
                &core.wh.value,
                1e-6,
            );
            assert!(max_relative_error(&g.params.dwh, &n, 1e-6) < tol);
            let n = finite_diff_grad(
                |w| {
                    let mut k = core.clone();
                    k.b.value = w.clone();
                    probe_loss(&k, &x, &h, &c, &ph, &pc)
                },
                &core.b.value,
                1e-6,
            );
            assert!(max_relative_error(&g.params.db, &n, 1e-6) < tol);
        }
    }

    #[test]
    fn state_only_backward_agrees_with_full() {
        let (core, x, h, c, ph, pc) = setup(11);
        let (_, _, cache) = core.step(&x, &h, &c).unwrap();
        let full = core.backward(&cache, &ph, &pc).unwrap();
        let (dh, dc) = core.backward_state(&cache, &ph, &pc).unwrap();
        assert_eq!(dh, full.dh_prev);
        assert_eq!(dc, full.dc_prev);
    }

    #[test]
    fn wrong_state_shape_is_rejected() {
        let (core, x, h, _, _, _) = setup(1);
        assert!(core.step(&x, &h, &Tensor::zeros(&[3, 4])).is_err());
    }
}
