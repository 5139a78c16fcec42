//! Brush strokes and their rasterization.
//!
//! The rule shared with browser previews: pixel `(x, y)` is set when its
//! centre `p = (x + 0.5, y + 0.5)` lies within `radius` of some stroke
//! segment. For a segment `a → b` with `d = b − a`:
//!
//! ```text
//! t  = clamp(((p − a) · d) / (d · d), 0, 1)     (t = 0 when a == b)
//! q  = a + t·d
//! set  iff  (p.x − q.x)² + (p.y − q.y)² ≤ radius²
//! ```
//!
//! A one-point stroke is the degenerate segment `a → a`. Points live in
//! continuous canvas coordinates, `0 ≤ x ≤ W`, `0 ≤ y ≤ H`.

use deeperaser::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: Vec<[f64; 2]>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeSet {
    pub strokes: Vec<Stroke>,
    /// `[W, H]`.
    pub canvas: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StrokeError {
    #[error("stroke {index}: point ({x}, {y}) is outside the {width}x{height} canvas")]
    OutOfBounds { index: usize, x: f64, y: f64, width: usize, height: usize },
    #[error("stroke {index}: radius must be >= 1, got {radius}")]
    BadRadius { index: usize, radius: f64 },
    #[error("stroke {index}: no points")]
    Empty { index: usize },
}

fn covers(p: (f64, f64), a: [f64; 2], b: [f64; 2], r2: f64) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a[0]) * dx + (p.1 - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    let (ex, ey) = (p.0 - qx, p.1 - qy);
    ex * ex + ey * ey <= r2
}

/// Binary `1×H×W` mask of the union of swept disks.
pub fn rasterize_strokes(strokes: &[Stroke], width: usize, height: usize) -> Result<Tensor<f32>, StrokeError> {
    for (index, s) in strokes.iter().enumerate() {
        if !(s.radius >= 1.0 && s.radius.is_finite()) {
            return Err(StrokeError::BadRadius { index, radius: s.radius });
        }
        if s.points.is_empty() {
            return Err(StrokeError::Empty { index });
        }
        for &[x, y] in &s.points {
            if !(x >= 0.0 && x <= width as f64 && y >= 0.0 && y <= height as f64) {
                return Err(StrokeError::OutOfBounds { index, x, y, width, height });
            }
        }
    }
    let mut mask = Tensor::zeros(1, height, width);
    for s in strokes {
        let r2 = s.radius * s.radius;
        let segments: Vec<([f64; 2], [f64; 2])> = if s.points.len() == 1 {
            vec![(s.points[0], s.points[0])]
        } else {
            s.points.windows(2).map(|w| (w[0], w[1])).collect()
        };
        for (a, b) in segments {
            // pixels whose centre can be within reach of the segment
            let x_lo = ((a[0].min(b[0]) - s.radius - 0.5).floor().max(0.0)) as usize;
            let y_lo = ((a[1].min(b[1]) - s.radius - 0.5).floor().max(0.0)) as usize;
            let x_hi = ((a[0].max(b[0]) + s.radius).ceil() as usize).min(width);
            let y_hi = ((a[1].max(b[1]) + s.radius).ceil() as usize).min(height);
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    if covers((x as f64 + 0.5, y as f64 + 0.5), a, b, r2) {
                        mask.set(0, y, x, 1.0);
                    }
                }
            }
        }
    }
    Ok(mask)
}

impl StrokeSet {
    pub fn rasterize(&self) -> Result<Tensor<f32>, StrokeError> {
        rasterize_strokes(&self.strokes, self.canvas[0] as usize, self.canvas[1] as usize)
    }
}
