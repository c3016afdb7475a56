//! Image quality metrics and color-space helpers.

use crate::error::{Error, Result};
use crate::wavelet::Plane;

/// `10 log10(1 / mse)`. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Plane, b: &Plane) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1, averaged over valid window positions and channels.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    same_shape(a, b)?;
    const WIN: usize = 11;
    let (h, w, c) = a.shape();
    if h < WIN || w < WIN {
        return Err(Error::Size(format!("SSIM needs at least {WIN}x{WIN} images, got {h}x{w}")));
    }
    let g = gaussian_window(WIN, 1.5);
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - WIN {
            for x0 in 0..=w - WIN {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..WIN {
                    for dx in 0..WIN {
                        let wt = g[dy] * g[dx];
                        let va = a.get(y0 + dy, x0 + dx, ch);
                        let vb = b.get(y0 + dy, x0 + dx, ch);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let mid = (n / 2) as f64;
    let mut g: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

fn same_shape(a: &Plane, b: &Plane) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("images differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn image_to_srgb(img: &Plane) -> Plane {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = linear_to_srgb(*v));
    out
}

pub fn image_to_linear(img: &Plane) -> Plane {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = srgb_to_linear(*v));
    out
}

/// Averages `factor x factor` pixel blocks.
pub fn box_downsample(img: &Plane, factor: usize) -> Result<Plane> {
    let (h, w, c) = img.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Size(format!("{h}x{w} is not divisible by {factor}")));
    }
    let norm = 1.0 / (factor * factor) as f64;
    Ok(Plane::from_fn(h / factor, w / factor, c, |y, x, ch| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += img.get(y * factor + dy, x * factor + dx, ch);
            }
        }
        s * norm
    }))
}

/// Keys cubic convolution (a = -0.5) resize with clamped borders, pixel-centre aligned.
pub fn bicubic_resize(img: &Plane, height: usize, width: usize) -> Plane {
    let (h, w, c) = img.shape();
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let taps = |t: f64| -> [f64; 4] {
        let k = |x: f64| {
            let x = x.abs();
            if x <= 1.0 {
                1.5 * x * x * x - 2.5 * x * x + 1.0
            } else if x < 2.0 {
                -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
            } else {
                0.0
            }
        };
        [k(1.0 + t), k(t), k(1.0 - t), k(2.0 - t)]
    };
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    Plane::from_fn(height, width, c, |y, x, ch| {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        let fx = (x as f64 + 0.5) * sx - 0.5;
        let (iy, ix) = (fy.floor(), fx.floor());
        let (wy, wx) = (taps(fy - iy), taps(fx - ix));
        let mut s = 0.0;
        for (a, wya) in wy.iter().enumerate() {
            let yy = clamp(iy as isize - 1 + a as isize, h);
            for (b, wxb) in wx.iter().enumerate() {
                let xx = clamp(ix as isize - 1 + b as isize, w);
                s += wya * wxb * img.get(yy, xx, ch);
            }
        }
        s
    })
}
