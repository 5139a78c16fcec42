//! Stride-1, "same"-padded 2-D convolution via im2col + GEMM.

use crate::tensor::{Float, Tensor};

/// Pointwise nonlinearity fused onto a convolution output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Float>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > T::ZERO {
                    z
                } else {
                    T::ZERO
                }
            }
            Activation::LeakyRelu(slope) => {
                if z > T::ZERO {
                    z
                } else {
                    T::from_f64(slope) * z
                }
            }
            Activation::Sigmoid => T::ONE / (T::ONE + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    ///
    /// Valid for every variant because ReLU and positive-slope LeakyReLU
    /// preserve the sign of their input.
    #[inline]
    pub fn derivative_from_output<T: Float>(self, y: T) -> T {
        match self {
            Activation::Identity => T::ONE,
            Activation::Relu => {
                if y > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            Activation::LeakyRelu(slope) => {
                if y > T::ZERO {
                    T::ONE
                } else {
                    T::from_f64(slope)
                }
            }
            Activation::Sigmoid => y * (T::ONE - y),
            Activation::Tanh => T::ONE - y * y,
        }
    }
}

/// Unfolds `x` into a `(C·k·k) × (H·W)` row-major patch matrix.
pub(crate) fn im2col<T: Float>(x: &Tensor<T>, kernel: usize) -> Vec<T> {
    let (c_in, h, w) = x.shape();
    let pad = (kernel / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::ZERO; c_in * kernel * kernel * hw];
    let src = x.data();
    for c in 0..c_in {
        let plane = &src[c * hw..(c + 1) * hw];
        for ky in 0..kernel {
            let dy = ky as isize - pad;
            for kx in 0..kernel {
                let dx = kx as isize - pad;
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s_row = sy as usize * w;
                    let d_row = y * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    let n = x_hi - x_lo;
                    dst[d_row + x_lo..d_row + x_hi].copy_from_slice(&plane[s_row + sx0..s_row + sx0 + n]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im<T: Float>(cols: &[T], c_in: usize, h: usize, w: usize, kernel: usize) -> Tensor<T> {
    let pad = (kernel / 2) as isize;
    let hw = h * w;
    let mut out = Tensor::zeros(c_in, h, w);
    let dst_all = out.data_mut();
    for c in 0..c_in {
        let plane = &mut dst_all[c * hw..(c + 1) * hw];
        for ky in 0..kernel {
            let dy = ky as isize - pad;
            for kx in 0..kernel {
                let dx = kx as isize - pad;
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let t_row = sy as usize * w;
                    let s_row = y * w;
                    let tx0 = (x_lo as isize + dx) as usize;
                    for i in 0..(x_hi - x_lo) {
                        plane[t_row + tx0 + i] += src[s_row + x_lo + i];
                    }
                }
            }
        }
    }
    out
}

/// Plain convolution followed by `act`.
///
/// `weight` is `[c_out, c_in, k, k]` row-major, `bias` is `[c_out]`.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    kernel: usize,
    act: Activation,
) -> Tensor<T> {
    let (c_in, h, w) = x.shape();
    let hw = h * w;
    let ck = c_in * kernel * kernel;
    debug_assert_eq!(weight.len(), c_out * ck);
    debug_assert_eq!(bias.len(), c_out);
    let mut out = Tensor::zeros(c_out, h, w);
    {
        let data = out.data_mut();
        for (o, &b) in bias.iter().enumerate() {
            data[o * hw..(o + 1) * hw].fill(b);
        }
        if kernel == 1 {
            T::gemm(c_out, ck, hw, weight, ck as isize, 1, x.data(), hw as isize, 1, T::ONE, data, hw as isize, 1);
        } else {
            let cols = im2col(x, kernel);
            T::gemm(c_out, ck, hw, weight, ck as isize, 1, &cols, hw as isize, 1, T::ONE, data, hw as isize, 1);
        }
        if act != Activation::Identity {
            for v in data.iter_mut() {
                *v = act.apply(*v);
            }
        }
    }
    out
}

/// Gradients of a convolution given the gradient at its pre-activation
/// output. Accumulates into `grad_weight`/`grad_bias` and returns the input
/// gradient when `need_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    c_out: usize,
    kernel: usize,
    grad_pre: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let (c_in, h, w) = x.shape();
    let hw = h * w;
    let ck = c_in * kernel * kernel;
    let dy = grad_pre.data();

    for (o, gb) in grad_bias.iter_mut().enumerate() {
        let mut s = T::ZERO;
        for &v in &dy[o * hw..(o + 1) * hw] {
            s += v;
        }
        *gb += s;
    }

    let owned_cols;
    let cols: &[T] = if kernel == 1 {
        x.data()
    } else {
        owned_cols = im2col(x, kernel);
        &owned_cols
    };
    // dW[c_out, ck] += dY[c_out, hw] · colsᵀ[hw, ck]
    T::gemm(c_out, hw, ck, dy, hw as isize, 1, cols, 1, hw as isize, T::ONE, grad_weight, ck as isize, 1);

    if !need_input_grad {
        return None;
    }
    // dcols[ck, hw] = Wᵀ[ck, c_out] · dY[c_out, hw]
    let mut dcols = vec![T::ZERO; ck * hw];
    T::gemm(ck, c_out, hw, weight, 1, ck as isize, dy, hw as isize, 1, T::ZERO, &mut dcols, hw as isize, 1);
    if kernel == 1 {
        Some(Tensor::from_vec(c_in, h, w, dcols).expect("1x1 conv gradient shape"))
    } else {
        Some(col2im(&dcols, c_in, h, w, kernel))
    }
}
