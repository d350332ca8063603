//! Frame metrics: MSE, PSNR (dynamic range 1) and DSSIM built on
//! Gaussian-window SSIM with valid-window coverage.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// `10 log10(1 / mse)`; `+inf` when the frames are identical.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Normalised 1-d Gaussian taps; the 2-d window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, taps);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, taps);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM over valid 11x11 windows, averaged over every leading
/// (channel, batch) plane.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.len() < 2 {
        return Err(Error::invalid(format!("ssim needs at least 2-d frames, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "frames {h}x{w} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let planes = a.len() / (h * w);
    let to64 = |t: &Tensor<f32>, p: usize| -> Vec<f64> {
        t.data()[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect()
    };
    let total: f64 = (0..planes)
        .map(|p| ssim_plane(&to64(a, p), &to64(b, p), h, w, &taps))
        .sum();
    Ok(total / planes as f64)
}

/// `(1 - SSIM) / 2`.
pub fn dssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// Per-prediction-step means over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mse: Vec<f64>,
    /// Mean over frames with finite PSNR; `+inf` if every frame was exact.
    pub psnr: Vec<f64>,
    /// Frames per step whose PSNR was infinite and excluded from the mean.
    pub psnr_excluded: Vec<usize>,
    pub dssim: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl EvalReport {
    pub fn steps(&self) -> usize {
        self.mse.len()
    }

    pub fn mean_mse(&self) -> f64 {
        mean(&self.mse)
    }

    pub fn mean_dssim(&self) -> f64 {
        mean(&self.dssim)
    }

    /// Mean of the finite per-step PSNR values.
    pub fn mean_psnr(&self) -> f64 {
        let finite: Vec<f64> = self.psnr.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            f64::INFINITY
        } else {
            mean(&finite)
        }
    }

    /// One row per step (`step mse psnr dssim`), then the means as a
    /// comment line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("# step mse psnr dssim psnr_excluded\n");
        for t in 0..self.steps() {
            let _ = writeln!(
                out,
                "{} {:.8e} {:.6} {:.8e} {}",
                t + 1,
                self.mse[t],
                self.psnr[t],
                self.dssim[t],
                self.psnr_excluded[t]
            );
        }
        let _ = writeln!(
            out,
            "# mean {:.8e} {:.6} {:.8e} {}",
            self.mean_mse(),
            self.mean_psnr(),
            self.mean_dssim(),
            self.psnr_excluded.iter().sum::<usize>()
        );
        out
    }
}

/// Compare `[batch, p, c, h, w]` predictions with targets of the same shape.
pub fn evaluate(predictions: &Tensor<f32>, targets: &Tensor<f32>) -> Result<EvalReport> {
    same_shape("evaluate", predictions, targets)?;
    let s = predictions.shape();
    if s.len() != 5 {
        return Err(Error::invalid(format!("evaluate expects 5-d tensors, got {s:?}")));
    }
    let (b, p) = (s[0], s[1]);
    let frame_shape = s[2..].to_vec();
    let f: usize = frame_shape.iter().product();
    let frame = |t: &Tensor<f32>, i: usize, step: usize| {
        let start = (i * p + step) * f;
        Tensor::new(frame_shape.clone(), t.data()[start..start + f].to_vec())
    };
    let mut report = EvalReport {
        mse: Vec::with_capacity(p),
        psnr: Vec::with_capacity(p),
        psnr_excluded: Vec::with_capacity(p),
        dssim: Vec::with_capacity(p),
    };
    for step in 0..p {
        let (mut m, mut d, mut ps, mut excluded) = (0.0, 0.0, Vec::new(), 0);
        for i in 0..b {
            let (x, y) = (frame(predictions, i, step)?, frame(targets, i, step)?);
            let e = mse(&x, &y)?;
            m += e;
            d += dssim(&x, &y)?;
            let v = psnr_from_mse(e);
            if v.is_finite() {
                ps.push(v);
            } else {
                excluded += 1;
            }
        }
        report.mse.push(m / b as f64);
        report.dssim.push(d / b as f64);
        report.psnr.push(if ps.is_empty() { f64::INFINITY } else { mean(&ps) });
        report.psnr_excluded.push(excluded);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Literal per-window SSIM with an explicit 2-d Gaussian.
    fn brute_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let k = SSIM_WINDOW;
        let c = (k as f64 - 1.0) / 2.0;
        let mut win = vec![0.0; k * k];
        for y in 0..k {
            for x in 0..k {
                let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
                win[y * k + x] = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            }
        }
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= s);
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let i = (oy + y) * w + ox + x;
                        ma += win[y * k + x] * a[i];
                        mb += win[y * k + x] * b[i];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let i = (oy + y) * w + ox + x;
                        let g = win[y * k + x];
                        va += g * (a[i] - ma).powi(2);
                        vb += g * (b[i] - mb).powi(2);
                        cov += g * (a[i] - ma) * (b[i] - mb);
                    }
                }
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
        total / count as f64
    }

    fn t(data: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&t(&[0.0, 1.0]), &t(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(mse(&t(&[0.3, 0.7]), &t(&[0.3, 0.7])).unwrap(), 0.0);
        let d = mse(&t(&[0.2, 0.5]), &t(&[0.1, 0.4])).unwrap();
        assert!((d - 0.01).abs() < 1e-9);
        assert!(mse(&t(&[0.0]), &t(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() <= 1e-9);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        assert_eq!(psnr(&t(&[0.5]), &t(&[0.5])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn dssim_identical_and_constant() {
        let mut rng = Rng::new(1);
        let a = Tensor::<f32>::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(dssim(&a, &a).unwrap(), 0.0);
        let zero = Tensor::<f32>::zeros(&[12, 12]);
        let one = Tensor::<f32>::ones(&[12, 12]);
        let expected_ssim = C1 / (1.0 + C1);
        assert!((ssim(&zero, &one).unwrap() - expected_ssim).abs() < 1e-12);
        assert!((dssim(&zero, &one).unwrap() - (1.0 - expected_ssim) / 2.0).abs() < 1e-12);
        assert!(dssim(&Tensor::zeros(&[10, 16]), &Tensor::zeros(&[10, 16])).is_err());
    }

    #[test]
    fn dssim_matches_brute_force() {
        let mut rng = Rng::new(2);
        for _ in 0..5 {
            let a = Tensor::<f32>::rand_uniform(&[16, 16], 0.0, 1.0, &mut rng);
            let b = Tensor::<f32>::rand_uniform(&[16, 16], 0.0, 1.0, &mut rng);
            let to64 = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
            let reference = (1.0 - brute_ssim(&to64(&a), &to64(&b), 16, 16)) / 2.0;
            assert!((dssim(&a, &b).unwrap() - reference).abs() <= 1e-6);
        }
    }

    #[test]
    fn evaluate_bookkeeping() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f32>::rand_uniform(&[2, 10, 1, 12, 12], 0.0, 1.0, &mut rng);
        let r = evaluate(&x, &x).unwrap();
        assert_eq!(r.steps(), 10);
        assert!(r.mse.iter().all(|&v| v == 0.0));
        assert!(r.dssim.iter().all(|&v| v == 0.0));
        assert!(r.psnr_excluded.iter().all(|&n| n == 2));
        assert_eq!(r.to_table().lines().count(), 12);

        let y = Tensor::<f32>::rand_uniform(&[2, 10, 1, 12, 12], 0.0, 1.0, &mut rng);
        let r = evaluate(&x, &y).unwrap();
        assert!((r.mean_mse() - r.mse.iter().sum::<f64>() / 10.0).abs() < 1e-15);
        assert!(evaluate(&x, &Tensor::zeros(&[2, 9, 1, 12, 12])).is_err());
    }
}
