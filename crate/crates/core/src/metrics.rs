//! Image-quality metrics for erased images.
//!
//! All functions take `C×H×W` tensors with values in `[0, 1]` and score them
//! on the 8-bit scale (`v · 255`). Grayscale-based metrics (AGE, pEPs,
//! pCEPS) use `0.299 R + 0.587 G + 0.114 B`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Gray-level difference above which a pixel counts as an error pixel.
pub const ERROR_THRESHOLD: f64 = 20.0;

/// PSNR substituted for identical pairs when averaging over a dataset that
/// also contains non-identical pairs.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const MSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MSSIM_WINDOW: usize = 11;
pub const MSSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const PEAK: f64 = 255.0;

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    Ok(())
}

fn mse255<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>) -> f64 {
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = (a.to_f64() - b.to_f64()) * PEAK;
            d * d
        })
        .sum();
    sum / pred.len() as f64
}

/// Peak signal-to-noise ratio in dB; `+∞` for identical images.
pub fn psnr<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape(pred, gt)?;
    let mse = mse255(pred, gt);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

/// Mean squared error on the `[0, 1]` scale, multiplied by 100.
pub fn mse<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape(pred, gt)?;
    Ok(mse255(pred, gt) / (PEAK * PEAK) * 100.0)
}

/// Per-pixel grayscale on the 0–255 scale. Single-channel input is taken
/// as already gray.
pub fn grayscale<T: Float>(img: &Tensor<T>) -> Vec<f64> {
    let n = img.plane_len();
    if img.channels() < 3 {
        return img.channel(0).iter().map(|v| v.to_f64() * PEAK).collect();
    }
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    (0..n)
        .map(|i| (0.299 * r[i].to_f64() + 0.587 * g[i].to_f64() + 0.114 * b[i].to_f64()) * PEAK)
        .collect()
}

fn gray_abs_diff<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<f64>> {
    same_shape(pred, gt)?;
    Ok(grayscale(pred)
        .into_iter()
        .zip(grayscale(gt))
        .map(|(a, b)| (a - b).abs())
        .collect())
}

/// Average absolute grayscale difference, in gray levels.
pub fn age<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let d = gray_abs_diff(pred, gt)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Fraction of pixels whose gray difference exceeds `threshold`.
pub fn peps<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<f64> {
    let d = gray_abs_diff(pred, gt)?;
    Ok(d.iter().filter(|&&v| v > threshold).count() as f64 / d.len() as f64)
}

/// Fraction of pixels that are error pixels and whose four neighbours are
/// all error pixels. Border pixels never qualify.
pub fn pceps<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<f64> {
    let d = gray_abs_diff(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let err = |y: usize, x: usize| d[y * w + x] > threshold;
    let mut count = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if err(y, x) && err(y - 1, x) && err(y + 1, x) && err(y, x - 1) && err(y, x + 1) {
                count += 1;
            }
        }
    }
    Ok(count as f64 / d.len() as f64)
}

/// Number of scales and window size MS-SSIM uses for an image whose
/// smaller side is `min_side`.
///
/// Up to five scales are used as long as the coarsest scale still fits an
/// 11×11 window. Images smaller than the window get one scale and a
/// window shrunk to the largest odd size that fits.
pub fn mssim_plan(min_side: usize) -> (usize, usize) {
    if min_side < MSSIM_WINDOW {
        let w = if min_side % 2 == 1 { min_side } else { min_side.saturating_sub(1) };
        return (1, w.max(1));
    }
    let mut scales = 1;
    let mut side = min_side;
    while scales < MSSIM_WEIGHTS.len() && side / 2 >= MSSIM_WINDOW {
        side /= 2;
        scales += 1;
    }
    (scales, MSSIM_WINDOW)
}

/// Scale weights for `scales` scales: the canonical five, or the first
/// `scales` of them renormalized to sum to one.
pub fn mssim_weights(scales: usize) -> Vec<f64> {
    if scales == MSSIM_WEIGHTS.len() {
        return MSSIM_WEIGHTS.to_vec();
    }
    let w = &MSSIM_WEIGHTS[..scales];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// A single-channel plane of f64 samples.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Separable "valid" filtering.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let ow = self.w + 1 - n;
        let oh = self.h + 1 - n;
        let mut tmp = vec![0.0; self.h * ow];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    s += kv * tmp[(y + i) * ow + x];
                }
                out[y * ow + x] = s;
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    /// 2×2 average pooling, dropping a trailing odd row/column.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v.push((self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]) / 4.0);
            }
        }
        Plane { h, w, v }
    }
}

/// Mean SSIM and mean contrast-structure term of one scale.
fn ssim_scale(a: &Plane, b: &Plane, window: &[f64]) -> (f64, f64) {
    let c1 = (K1 * PEAK).powi(2);
    let c2 = (K2 * PEAK).powi(2);
    let mu_a = a.filter(window);
    let mu_b = b.filter(window);
    let aa = a.map2(a, |x, y| x * y).filter(window);
    let bb = b.map2(b, |x, y| x * y).filter(window);
    let ab = a.map2(b, |x, y| x * y).filter(window);
    let n = mu_a.v.len() as f64;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ssim_sum += lum * cs;
        cs_sum += cs;
    }
    (ssim_sum / n, cs_sum / n)
}

/// Multi-scale SSIM in percent, averaged over channels.
///
/// Uses an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`,
/// dyadic 2×2 average-pool downsampling and the canonical five scale
/// weights; see [`mssim_plan`] for small inputs. Negative per-scale terms
/// are clipped to zero before exponentiation.
pub fn mssim<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (scales, win) = mssim_plan(pred.height().min(pred.width()));
    let window = gaussian_window(win, MSSIM_SIGMA);
    let weights = mssim_weights(scales);
    let mut total = 0.0;
    for c in 0..pred.channels() {
        let to_plane = |t: &Tensor<T>| Plane {
            h: t.height(),
            w: t.width(),
            v: t.channel(c).iter().map(|v| v.to_f64() * PEAK).collect(),
        };
        let mut a = to_plane(pred);
        let mut b = to_plane(gt);
        let mut value = 1.0;
        for (j, wj) in weights.iter().enumerate() {
            let (ssim, cs) = ssim_scale(&a, &b, &window);
            let term = if j + 1 == scales { ssim } else { cs };
            value *= term.max(0.0).powf(*wj);
            if j + 1 < scales {
                a = a.downsample();
                b = b.downsample();
            }
        }
        total += value;
    }
    Ok(total / pred.channels() as f64 * 100.0)
}

/// `mask ⊙ pred + (1 − mask) ⊙ input`: keep the network output only where
/// erasure was requested.
pub fn composite_non_text<T: Float>(pred: &Tensor<T>, input: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != input.shape() {
        return Err(Error::ShapeMismatch(format!("pred {:?} vs input {:?}", pred.shape(), input.shape())));
    }
    if mask.channels() != 1 || !mask.same_spatial(pred) {
        return Err(Error::ShapeMismatch(format!("mask {:?} vs image {:?}", mask.shape(), pred.shape())));
    }
    let n = pred.plane_len();
    let m = mask.data();
    let mut out = input.clone();
    for (i, (o, &p)) in out.data_mut().iter_mut().zip(pred.data()).enumerate() {
        let mv = m[i % n];
        // Select rather than blend so non-mask pixels stay bit-exact.
        if mv == T::ONE {
            *o = p;
        } else if mv != T::ZERO {
            *o = mv * p + (T::ONE - mv) * *o;
        }
    }
    Ok(out)
}

/// Six-metric report for one image pair or a dataset average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub mssim: f64,
    pub mse: f64,
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
    pub n_images: usize,
    /// Identical pairs entered the PSNR mean as [`PSNR_CAP_DB`].
    #[serde(default)]
    pub psnr_capped: bool,
}

impl MetricReport {
    pub fn for_pair<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Self> {
        Ok(MetricReport {
            psnr: psnr(pred, gt)?,
            mssim: mssim(pred, gt)?,
            mse: mse(pred, gt)?,
            age: age(pred, gt)?,
            peps: peps(pred, gt, ERROR_THRESHOLD)?,
            pceps: pceps(pred, gt, ERROR_THRESHOLD)?,
            n_images: 1,
            psnr_capped: false,
        })
    }

    /// Unweighted mean of per-image reports.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidArgument("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let all_identical = reports.iter().all(|r| r.psnr.is_infinite());
        let any_identical = reports.iter().any(|r| r.psnr.is_infinite());
        let psnr = if all_identical {
            f64::INFINITY
        } else {
            reports.iter().map(|r| r.psnr.min(PSNR_CAP_DB)).sum::<f64>() / n
        };
        Ok(MetricReport {
            psnr,
            mssim: avg(|r| r.mssim),
            mse: avg(|r| r.mse),
            age: avg(|r| r.age),
            peps: avg(|r| r.peps),
            pceps: avg(|r| r.pceps),
            n_images: reports.len(),
            psnr_capped: any_identical && !all_identical,
        })
    }

    /// `key: value` lines, one per metric.
    pub fn to_text(&self) -> String {
        format!(
            "PSNR: {:.4}\nMSSIM: {:.4}\nMSE: {:.4}\nAGE: {:.4}\npEPs: {:.6}\npCEPS: {:.6}\nimages: {}\npsnr_capped: {}\n",
            self.psnr, self.mssim, self.mse, self.age, self.peps, self.pceps, self.n_images, self.psnr_capped
        )
    }

    pub const CSV_HEADER: &'static str = "PSNR,MSSIM,MSE,AGE,pEPs,pCEPS";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.6},{:.6}",
            self.psnr, self.mssim, self.mse, self.age, self.peps, self.pceps
        )
    }
}
