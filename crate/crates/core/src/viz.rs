//! Visualizations of the recurrence.

use crate::tensor::{Float, Tensor};

/// Level used when a heatmap has no contrast to normalize.
pub const DEGENERATE_LEVEL: f64 = 0.5;

/// Channel mean of `|l|`, min-max normalized to `[0, 1]`. A constant map
/// becomes uniform mid-gray.
pub fn latent_heatmap<T: Float>(latent: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = latent.shape();
    let plane = h * w;
    let mut mean = vec![0.0f64; plane];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(latent.channel(ch)) {
            *m += v.to_f64().abs();
        }
    }
    for m in &mut mean {
        *m /= c as f64;
    }
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = mean
        .iter()
        .map(|&m| T::from_f64(if span > 1e-12 { (m - lo) / span } else { DEGENERATE_LEVEL }))
        .collect();
    Tensor::from_vec(1, h, w, data).expect("plane dims")
}

/// Mean of `map` over pixels where `region` is set and where it is not.
/// `None` for an empty side.
pub fn region_means<T: Float>(map: &Tensor<T>, region: &Tensor<T>) -> (Option<f64>, Option<f64>) {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (v, r) in map.data().iter().zip(region.data()) {
        if r.to_f64() >= 0.5 {
            si += v.to_f64();
            ni += 1;
        } else {
            so += v.to_f64();
            no += 1;
        }
    }
    ((ni > 0).then(|| si / ni as f64), (no > 0).then(|| so / no as f64))
}
