use crate::error::{Error, Result};
use crate::metrics::box_downsample;
use crate::wavelet::Plane;

/// Image distance used for the perceptual term. Returns the value and its
/// gradient with respect to `pred`.
pub trait PerceptualLoss {
    fn loss_and_grad(&self, pred: &Plane, reference: &Plane) -> Result<(f64, Plane)>;

    fn loss(&self, a: &Plane, b: &Plane) -> Result<f64> {
        Ok(self.loss_and_grad(a, b)?.0)
    }
}

/// Multi-scale structural distance. At each scale (2x box downsampling)
/// it adds the mean squared difference of gradient magnitudes
/// `sqrt(gx^2 + gy^2 + eps)` and `1 - SSIM` over box windows. The result is
/// averaged over scales.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradSsimLoss {
    pub scales: usize,
    pub window: usize,
    pub eps: f64,
}

impl Default for GradSsimLoss {
    fn default() -> Self {
        GradSsimLoss {
            scales: 3,
            window: 7,
            eps: 1e-6,
        }
    }
}

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

impl PerceptualLoss for GradSsimLoss {
    fn loss_and_grad(&self, pred: &Plane, reference: &Plane) -> Result<(f64, Plane)> {
        if pred.shape() != reference.shape() {
            return Err(Error::Shape(format!(
                "perceptual operands differ: {:?} vs {:?}",
                pred.shape(),
                reference.shape()
            )));
        }
        let mut a = vec![pred.clone()];
        let mut b = vec![reference.clone()];
        for _ in 1..self.scales {
            let (la, lb) = (a.last().expect("scale"), b.last().expect("scale"));
            if la.height() < 4 || la.width() < 4 || la.height() % 2 != 0 || la.width() % 2 != 0 {
                break;
            }
            let (na, nb) = (box_downsample(la, 2)?, box_downsample(lb, 2)?);
            a.push(na);
            b.push(nb);
        }
        let n_scales = a.len() as f64;
        let mut total = 0.0;
        let mut grad_up: Option<Plane> = None;
        for s in (0..a.len()).rev() {
            let mut g = Plane::zeros(a[s].height(), a[s].width(), a[s].channels());
            total += gradient_term(&a[s], &b[s], self.eps, &mut g) / n_scales;
            total += ssim_term(&a[s], &b[s], self.window, &mut g) / n_scales;
            g.scale(1.0 / n_scales);
            if let Some(coarse) = grad_up.take() {
                let (h, w, c) = coarse.shape();
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            let v = 0.25 * coarse.get(y, x, ch);
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = g.index(2 * y + dy, 2 * x + dx, ch);
                                g.data_mut()[i] += v;
                            }
                        }
                    }
                }
            }
            grad_up = Some(g);
        }
        Ok((total, grad_up.expect("at least one scale")))
    }
}

/// Mean over valid pixels of `(|grad a| - |grad b|)^2`; adds the gradient into `g`.
fn gradient_term(a: &Plane, b: &Plane, eps: f64, g: &mut Plane) -> f64 {
    let (h, w, c) = a.shape();
    if h < 2 || w < 2 {
        return 0.0;
    }
    let n = ((h - 1) * (w - 1) * c) as f64;
    let mag = |p: &Plane, y: usize, x: usize, ch: usize| {
        let gx = p.get(y, x + 1, ch) - p.get(y, x, ch);
        let gy = p.get(y + 1, x, ch) - p.get(y, x, ch);
        (gx, gy, (gx * gx + gy * gy + eps).sqrt())
    };
    let mut sum = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            for ch in 0..c {
                let (gx, gy, ma) = mag(a, y, x, ch);
                let (_, _, mb) = mag(b, y, x, ch);
                let d = ma - mb;
                sum += d * d;
                let dm = 2.0 * d / n;
                let (dgx, dgy) = (dm * gx / ma, dm * gy / ma);
                let i0 = g.index(y, x, ch);
                let ix = g.index(y, x + 1, ch);
                let iy = g.index(y + 1, x, ch);
                let data = g.data_mut();
                data[ix] += dgx;
                data[iy] += dgy;
                data[i0] -= dgx + dgy;
            }
        }
    }
    sum / n
}

/// `1 - mean SSIM` over all valid `k x k` box windows; adds the gradient into `g`.
fn ssim_term(a: &Plane, b: &Plane, window: usize, g: &mut Plane) -> f64 {
    let (h, w, c) = a.shape();
    let k = window.min(h).min(w);
    if k < 2 {
        return 0.0;
    }
    let wn = (k * k) as f64;
    let count = ((h - k + 1) * (w - k + 1) * c) as f64;
    let mut sum = 0.0;
    for ch in 0..c {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let va = a.get(y, x, ch);
                        let vb = b.get(y, x, ch);
                        ma += va;
                        mb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                ma /= wn;
                mb /= wn;
                saa /= wn;
                sbb /= wn;
                sab /= wn;
                let a1 = 2.0 * ma * mb + C1;
                let a2 = 2.0 * (sab - ma * mb) + C2;
                let b1 = ma * ma + mb * mb + C1;
                let b2 = (saa - ma * ma) + (sbb - mb * mb) + C2;
                let s = (a1 * a2) / (b1 * b2);
                sum += s;
                // d(1 - s)/d a_k = -(1/wn)(d_mu + 2 a_k d_saa + b_k d_sab) / count
                let d_mu = s * (2.0 * mb / a1 - 2.0 * mb / a2 - 2.0 * ma / b1 + 2.0 * ma / b2);
                let d_saa = -s / b2;
                let d_sab = 2.0 * s / a2;
                let scale = -1.0 / (wn * count);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let va = a.get(y, x, ch);
                        let vb = b.get(y, x, ch);
                        let i = g.index(y, x, ch);
                        g.data_mut()[i] += scale * (d_mu + 2.0 * va * d_saa + vb * d_sab);
                    }
                }
            }
        }
    }
    1.0 - sum / count
}
