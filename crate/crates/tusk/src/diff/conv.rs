//! Direct 2D convolution kernels over HWC tensors, via im2col and GEMM.
//!
//! Layouts: input `(H, W, Cin)`, weights `(kh, kw, Cin, Cout)`, output
//! `(Ho, Wo, Cout)`, all row-major. The flattened weight matrix is then
//! exactly `(kh*kw*Cin, Cout)` with no copies.

use super::tensor::{Scalar, Tensor};

pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Option<ConvDims> {
    if x_shape.len() != 3 || w_shape.len() != 4 {
        return None;
    }
    let (h, w, cin) = (x_shape[0], x_shape[1], x_shape[2]);
    let (kh, kw, wcin, cout) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if wcin != cin || kh > h + 2 * pad || kw > w + 2 * pad || stride == 0 {
        return None;
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Some(ConvDims {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Lower the input into a `(ho*wo, kh*kw*cin)` row-major patch matrix.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims) -> Vec<T> {
    let k = d.kh * d.kw * d.cin;
    let mut col = vec![T::ZERO; d.ho * d.wo * k];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let row = (oy * d.wo + ox) * k;
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let src = (iy as usize * d.w + ix as usize) * d.cin;
                    let dst = row + (ky * d.kw + kx) * d.cin;
                    col[dst..dst + d.cin].copy_from_slice(&x[src..src + d.cin]);
                }
            }
        }
    }
    col
}

/// Scatter-add a patch matrix gradient back onto the input layout.
fn col2im<T: Scalar>(dcol: &[T], d: &ConvDims) -> Vec<T> {
    let k = d.kh * d.kw * d.cin;
    let mut dx = vec![T::ZERO; d.h * d.w * d.cin];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let row = (oy * d.wo + ox) * k;
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * d.w + ix as usize) * d.cin;
                    let src = row + (ky * d.kw + kx) * d.cin;
                    for c in 0..d.cin {
                        dx[dst + c] += dcol[src + c];
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, d: &ConvDims) -> Tensor<T> {
    let k = d.kh * d.kw * d.cin;
    let m = d.ho * d.wo;
    let col = im2col(x.data(), d);
    let mut out = vec![T::ZERO; m * d.cout];
    unsafe {
        T::gemm(
            m,
            k,
            d.cout,
            T::ONE,
            col.as_ptr(),
            k as isize,
            1,
            w.data().as_ptr(),
            d.cout as isize,
            1,
            T::ZERO,
            out.as_mut_ptr(),
            d.cout as isize,
            1,
        );
    }
    let bias = b.data();
    for row in out.chunks_exact_mut(d.cout) {
        for (o, &bv) in row.iter_mut().zip(bias.iter()) {
            *o += bv;
        }
    }
    Tensor::new(vec![d.ho, d.wo, d.cout], out).expect("conv output shape")
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    d: &ConvDims,
    need_dx: bool,
) -> ConvGrads<T> {
    let k = d.kh * d.kw * d.cin;
    let m = d.ho * d.wo;
    let col = im2col(x.data(), d);

    // db
    let mut db = vec![T::ZERO; d.cout];
    for row in dout.data().chunks_exact(d.cout) {
        for (acc, &g) in db.iter_mut().zip(row.iter()) {
            *acc += g;
        }
    }

    // dW (k x cout) = col^T (k x m) . dout (m x cout)
    let mut dw = vec![T::ZERO; k * d.cout];
    unsafe {
        T::gemm(
            k,
            m,
            d.cout,
            T::ONE,
            col.as_ptr(),
            1,
            k as isize,
            dout.data().as_ptr(),
            d.cout as isize,
            1,
            T::ZERO,
            dw.as_mut_ptr(),
            d.cout as isize,
            1,
        );
    }

    // dX via dcol (m x k) = dout (m x cout) . W^T (cout x k)
    let dx = if need_dx {
        let mut dcol = vec![T::ZERO; m * k];
        unsafe {
            T::gemm(
                m,
                d.cout,
                k,
                T::ONE,
                dout.data().as_ptr(),
                d.cout as isize,
                1,
                w.data().as_ptr(),
                1,
                d.cout as isize,
                T::ZERO,
                dcol.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        Some(Tensor::new(vec![d.h, d.w, d.cin], col2im(&dcol, d)).expect("conv dx shape"))
    } else {
        None
    };

    ConvGrads {
        dx,
        dw: Tensor::new(w.shape().to_vec(), dw).expect("conv dw shape"),
        db: Tensor::new(vec![d.cout], db).expect("conv db shape"),
    }
}

/// Truncated, normalized 1D Gaussian taps with radius `ceil(3*sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut taps: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable same-size Gaussian blur with zero padding, over `(H, W)` or
/// `(H, W, C)`. Self-adjoint (symmetric kernel), so the backward pass is the
/// same blur applied to the upstream gradient.
pub fn gaussian_conv<T: Scalar>(x: &Tensor<T>, sigma: f64) -> Tensor<T> {
    let shape = x.shape();
    let (h, w, c) = match shape.len() {
        2 => (shape[0], shape[1], 1),
        3 => (shape[0], shape[1], shape[2]),
        _ => panic!("gaussian_conv expects rank 2 or 3, got {shape:?}"),
    };
    let taps: Vec<T> = gaussian_taps(sigma).iter().map(|&t| T::from_f64(t)).collect();
    let r = taps.len() / 2;
    let src = x.data();
    // horizontal
    let mut mid = vec![T::ZERO; src.len()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = T::ZERO;
                for (i, &t) in taps.iter().enumerate() {
                    let sx = xx as isize + i as isize - r as isize;
                    if sx >= 0 && (sx as usize) < w {
                        acc += t * src[(y * w + sx as usize) * c + ch];
                    }
                }
                mid[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    // vertical
    let mut out = vec![T::ZERO; src.len()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = T::ZERO;
                for (i, &t) in taps.iter().enumerate() {
                    let sy = y as isize + i as isize - r as isize;
                    if sy >= 0 && (sy as usize) < h {
                        acc += t * mid[(sy as usize * w + xx) * c + ch];
                    }
                }
                out[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("gaussian_conv shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_conv_ones_kernel_gives_nine() {
        // 3x3 all-ones image, 3x3 all-ones kernel, no padding -> scalar 9.
        let x = Tensor::<f64>::full(&[3, 3, 1], 1.0);
        let w = Tensor::<f64>::full(&[3, 3, 1, 1], 1.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let d = conv_dims(x.shape(), w.shape(), 1, 0).unwrap();
        let y = conv2d_forward(&x, &w, &b, &d);
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert!((y.data()[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn stride_two_halves_output() {
        let x = Tensor::<f64>::full(&[8, 8, 2], 1.0);
        let w = Tensor::<f64>::full(&[3, 3, 2, 4], 0.5);
        let b = Tensor::<f64>::zeros(&[4]);
        let d = conv_dims(x.shape(), w.shape(), 2, 1).unwrap();
        let y = conv2d_forward(&x, &w, &b, &d);
        assert_eq!(y.shape(), &[4, 4, 4]);
    }

    #[test]
    fn gaussian_taps_normalized() {
        let taps = gaussian_taps(1.7);
        let s: f64 = taps.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(taps.len() % 2, 1);
    }
}
