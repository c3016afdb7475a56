use crate::error::{Error, Result};

use super::filters::{FilterBank, Taps};
use super::Plane;

/// Whole-sample symmetric extension: `x[-k] = x[k]`, `x[n-1+k] = x[n-1-k]`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn check_axis_len(n: usize, what: &str) -> Result<()> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Size(format!("{what} length {n} must be even and positive")));
    }
    Ok(())
}

/// Single analysis step along the middle axis of an `[outer][n][inner]` array.
fn analyze_axis(
    input: &[f64],
    outer: usize,
    n: usize,
    inner: usize,
    bank: &FilterBank,
) -> (Vec<f64>, Vec<f64>) {
    let half = n / 2;
    let mut lo = vec![0.0; outer * half * inner];
    let mut hi = vec![0.0; outer * half * inner];
    for o in 0..outer {
        let src = &input[o * n * inner..(o + 1) * n * inner];
        for i in 0..half {
            let base = (o * half + i) * inner;
            let dst_lo = &mut lo[base..base + inner];
            let centre = 2 * i as isize;
            for (j, &c) in bank.analysis_lo.coeffs.iter().enumerate() {
                let k = reflect(centre + bank.analysis_lo.start + j as isize, n);
                axpy(dst_lo, c, &src[k * inner..(k + 1) * inner]);
            }
            let dst_hi = &mut hi[base..base + inner];
            for (j, &c) in bank.analysis_hi.coeffs.iter().enumerate() {
                let k = reflect(centre + 1 + bank.analysis_hi.start + j as isize, n);
                axpy(dst_hi, c, &src[k * inner..(k + 1) * inner]);
            }
        }
    }
    (lo, hi)
}

/// Sample of the interleaved subband sequence feeding output index `m` via tap offset `q`.
/// Returns `(is_high, band_index)` when the tap parity matches the filter.
#[inline]
fn synthesis_source(m: usize, q: isize, n: usize, want_odd: bool) -> Option<usize> {
    let p = m as isize - q;
    // Reflection about whole samples of an even-length signal keeps parity.
    let odd = p.rem_euclid(2) == 1;
    if odd != want_odd {
        return None;
    }
    let r = reflect(p, n);
    Some(r / 2)
}

fn synthesize_axis(
    lo: &[f64],
    hi: &[f64],
    outer: usize,
    half: usize,
    inner: usize,
    bank: &FilterBank,
) -> Vec<f64> {
    let n = 2 * half;
    let mut out = vec![0.0; outer * n * inner];
    let pass = |out: &mut [f64], band: &[f64], taps: &Taps, odd: bool| {
        for o in 0..outer {
            for m in 0..n {
                let base = (o * n + m) * inner;
                for (j, &c) in taps.coeffs.iter().enumerate() {
                    let q = taps.start + j as isize;
                    if let Some(b) = synthesis_source(m, q, n, odd) {
                        let s = (o * half + b) * inner;
                        axpy(&mut out[base..base + inner], c, &band[s..s + inner]);
                    }
                }
            }
        }
    };
    pass(&mut out, lo, &bank.synthesis_lo, false);
    pass(&mut out, hi, &bank.synthesis_hi, true);
    out
}

/// Transpose of [`synthesize_axis`].
fn synthesize_axis_adjoint(
    grad: &[f64],
    outer: usize,
    half: usize,
    inner: usize,
    bank: &FilterBank,
) -> (Vec<f64>, Vec<f64>) {
    let n = 2 * half;
    let mut glo = vec![0.0; outer * half * inner];
    let mut ghi = vec![0.0; outer * half * inner];
    let pass = |acc: &mut [f64], taps: &Taps, odd: bool| {
        for o in 0..outer {
            for m in 0..n {
                let base = (o * n + m) * inner;
                for (j, &c) in taps.coeffs.iter().enumerate() {
                    let q = taps.start + j as isize;
                    if let Some(b) = synthesis_source(m, q, n, odd) {
                        let s = (o * half + b) * inner;
                        axpy(&mut acc[s..s + inner], c, &grad[base..base + inner]);
                    }
                }
            }
        }
    };
    pass(&mut glo, &bank.synthesis_lo, false);
    pass(&mut ghi, &bank.synthesis_hi, true);
    (glo, ghi)
}

/// The four subbands of one analysis step. First letter is the filter
/// along x (width), second along y (height): `hl` responds to vertical edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Subbands {
    pub ll: Plane,
    pub lh: Plane,
    pub hl: Plane,
    pub hh: Plane,
}

impl Subbands {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        let z = Plane::zeros(height, width, channels);
        Subbands {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        }
    }
}

/// One level of the separable 2D analysis transform, applied per channel.
pub fn dwt2(plane: &Plane, bank: &FilterBank) -> Result<Subbands> {
    let (h, w, c) = plane.shape();
    check_axis_len(w, "plane width")?;
    check_axis_len(h, "plane height")?;
    // along x: [h][w][c]
    let (lx, hx) = analyze_axis(plane.data(), h, w, c, bank);
    let hw = w / 2;
    // along y: [1][h][hw*c]
    let (ll, lh) = analyze_axis(&lx, 1, h, hw * c, bank);
    let (hl, hh) = analyze_axis(&hx, 1, h, hw * c, bank);
    let hh_ = h / 2;
    Ok(Subbands {
        ll: Plane::from_vec(hh_, hw, c, ll)?,
        lh: Plane::from_vec(hh_, hw, c, lh)?,
        hl: Plane::from_vec(hh_, hw, c, hl)?,
        hh: Plane::from_vec(hh_, hw, c, hh)?,
    })
}

fn check_band_shapes(ll: &Plane, lh: &Plane, hl: &Plane, hh: &Plane) -> Result<(usize, usize, usize)> {
    let s = ll.shape();
    for (name, b) in [("lh", lh), ("hl", hl), ("hh", hh)] {
        if b.shape() != s {
            return Err(Error::Shape(format!(
                "band {name} has shape {:?}, expected {:?}",
                b.shape(),
                s
            )));
        }
    }
    Ok(s)
}

/// Inverse of [`dwt2`].
pub fn idwt2(ll: &Plane, lh: &Plane, hl: &Plane, hh: &Plane, bank: &FilterBank) -> Result<Plane> {
    let (h, w, c) = check_band_shapes(ll, lh, hl, hh)?;
    check_axis_len(2 * w, "output width")?;
    check_axis_len(2 * h, "output height")?;
    let lx = synthesize_axis(ll.data(), lh.data(), 1, h, w * c, bank);
    let hx = synthesize_axis(hl.data(), hh.data(), 1, h, w * c, bank);
    let out = synthesize_axis(&lx, &hx, 2 * h, w, c, bank);
    Plane::from_vec(2 * h, 2 * w, c, out)
}

/// Adjoint (transpose) of [`idwt2`]: maps a gradient on the output plane to
/// gradients on the four input bands.
pub fn idwt2_adjoint(grad: &Plane, bank: &FilterBank) -> Result<Subbands> {
    let (h2, w2, c) = grad.shape();
    check_axis_len(w2, "gradient width")?;
    check_axis_len(h2, "gradient height")?;
    let (h, w) = (h2 / 2, w2 / 2);
    let (glx, ghx) = synthesize_axis_adjoint(grad.data(), h2, w, c, bank);
    let (gll, glh) = synthesize_axis_adjoint(&glx, 1, h, w * c, bank);
    let (ghl, ghh) = synthesize_axis_adjoint(&ghx, 1, h, w * c, bank);
    Ok(Subbands {
        ll: Plane::from_vec(h, w, c, gll)?,
        lh: Plane::from_vec(h, w, c, glh)?,
        hl: Plane::from_vec(h, w, c, ghl)?,
        hh: Plane::from_vec(h, w, c, ghh)?,
    })
}
