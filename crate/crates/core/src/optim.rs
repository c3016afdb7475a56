//! Adam with exponential learning-rate decay, the L1 subgradient on wavelet
//! detail bands, and the reconstruction loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::triplane::{ParamGrads, TriNeRFLet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The rate reaches `lr * decay_rate` after `decay_steps` steps.
    pub decay_rate: f64,
    pub decay_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
            decay_rate: 0.1,
            decay_steps: 10_000,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.decay_steps == 0 {
            return self.lr;
        }
        self.lr * self.decay_rate.powf(step as f64 / self.decay_steps as f64)
    }
}

/// First/second moments per parameter slice. Slices may be appended
/// between steps (new wavelet levels); each keeps its own bias-correction count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    slice_steps: Vec<usize>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            slice_steps: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    pub fn moments(&self, slice: usize) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(slice)?, self.v.get(slice)?))
    }

    fn sync_shapes(&mut self, lens: &[usize]) -> Result<()> {
        for (i, &n) in lens.iter().enumerate() {
            if i < self.m.len() {
                if self.m[i].len() != n {
                    return Err(Error::Shape(format!(
                        "parameter slice {i} has {n} entries, optimizer state has {}",
                        self.m[i].len()
                    )));
                }
            } else {
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
                self.slice_steps.push(0);
            }
        }
        if lens.len() < self.m.len() {
            return Err(Error::Shape("parameter slices were removed".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update at the scheduled learning rate.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameter slices but {} gradient slices",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "slice {i}: {} parameters, {} gradients",
                p.len(),
                g.len()
            )));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient slice {i} element {j} is {} at step {}",
                g[j], state.step
            )));
        }
    }
    let lens: Vec<usize> = params.iter().map(|p| p.len()).collect();
    state.sync_shapes(&lens)?;
    let c = state.config;
    let lr = c.lr_at(state.step);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.slice_steps[i] += 1;
        let t = state.slice_steps[i] as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            let gk = g[k];
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// `gamma * sign(w)` elementwise with `sign(0) = 0`.
pub fn l1_subgrad(band: &[f64], gamma: f64) -> Vec<f64> {
    band.iter().map(|&w| gamma * sign(w)).collect()
}

#[inline]
fn sign(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adds the L1 subgradient to every wavelet detail slice of `grads` (never LL or MLP).
pub fn add_l1_subgrad(model: &TriNeRFLet, grads: &mut ParamGrads, gamma: f64) {
    if gamma == 0.0 {
        return;
    }
    let mask = model.detail_slice_mask();
    for ((g, p), is_detail) in grads.iter_mut().zip(model.param_slices()).zip(mask) {
        if !is_detail {
            continue;
        }
        for (gk, &w) in g.iter_mut().zip(p) {
            *gk += gamma * sign(w);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub data: f64,
    pub reg: f64,
    pub total: f64,
}

/// Mean squared color error plus `gamma` times the detail-band L1 norm.
/// Returns the report and the gradient of the data term per predicted pixel.
pub fn reconstruction_loss(
    pred: &[[f64; 3]],
    gt: &[[f64; 3]],
    model: &TriNeRFLet,
    gamma: f64,
) -> Result<(LossReport, Vec<[f64; 3]>)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), gt.len())));
    }
    let (data, grad) = mse_with_grad(pred, gt);
    let reg = gamma * model.high_freq_l1();
    Ok((
        LossReport {
            data,
            reg,
            total: data + reg,
        },
        grad,
    ))
}

/// `mean((p - g)^2)` over all channels and its gradient.
pub fn mse_with_grad(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    let count = (3 * pred.len()).max(1) as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let mut d = [0.0; 3];
            for k in 0..3 {
                let e = p[k] - g[k];
                sum += e * e;
                d[k] = 2.0 * e / count;
            }
            d
        })
        .collect();
    (sum / count, grad)
}

/// `mean(|p - g|)` over all channels and its subgradient.
pub fn l1_with_grad(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    let count = (3 * pred.len()).max(1) as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let mut d = [0.0; 3];
            for k in 0..3 {
                let e = p[k] - g[k];
                sum += e.abs();
                d[k] = sign(e) / count;
            }
            d
        })
        .collect();
    (sum / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut [&mut p[..]], &[vec![0.0; 3]], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g and v_hat = g^2 at step 1, so the update is lr * sign(g)
        let mut p = [0.0, 0.0];
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut [&mut p[..]], &[vec![3.0, -0.001]], &mut st).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-12);
        assert!((p[1] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = [0.0];
        let mut st = AdamState::new(AdamConfig::default());
        let r = adam_step(&mut [&mut p[..]], &[vec![f64::NAN]], &mut st);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn lr_decays_exponentially() {
        let c = AdamConfig {
            decay_steps: 100,
            ..AdamConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.01);
        assert!((c.lr_at(100) - 0.001).abs() < 1e-15);
        assert!((c.lr_at(50) - 0.01 * 0.1f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn state_grows_with_new_slices() {
        let mut a = [1.0];
        let mut b = [1.0, 1.0];
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut [&mut a[..]], &[vec![1.0]], &mut st).unwrap();
        adam_step(&mut [&mut a[..], &mut b[..]], &[vec![1.0], vec![1.0, 0.0]], &mut st).unwrap();
        // b's first update is fully bias corrected
        assert!((b[0] - (1.0 - st.config.lr_at(1))).abs() < 1e-12);
        assert_eq!(b[1], 1.0);
        let mut short = [1.0];
        assert!(adam_step(&mut [&mut short[..], &mut b[..]], &[vec![1.0], vec![1.0, 0.0]], &mut st).is_ok());
        let mut wrong = [1.0, 2.0, 3.0];
        assert!(matches!(
            adam_step(&mut [&mut a[..], &mut wrong[..]], &[vec![1.0], vec![0.0; 3]], &mut st),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn subgradient_signs() {
        assert_eq!(l1_subgrad(&[0.0], 0.4), vec![0.0]);
        assert_eq!(l1_subgrad(&[-2.0], 0.4), vec![-0.4]);
        assert_eq!(l1_subgrad(&[5.0, -0.0], 0.2), vec![0.2, 0.0]);
    }

    #[test]
    fn mean_convention_for_data_term() {
        let b = 4;
        let pred = vec![[0.0; 3]; b];
        let mut gt = pred.clone();
        gt[2][1] = 1.0;
        let (mse, _) = mse_with_grad(&pred, &gt);
        assert!((mse - 1.0 / (3.0 * b as f64)).abs() < 1e-15);
    }
}
