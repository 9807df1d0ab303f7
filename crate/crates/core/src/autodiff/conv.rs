//! im2col-based 3D convolution kernels.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        if padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// 1×1×1, stride 1, no padding: the input already is its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output positions `[lo, hi)` along one axis whose input index
    /// `o·stride + offset − padding` falls inside `[0, extent)`.
    fn valid_range(&self, offset: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = offset as isize - self.padding as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = (extent as isize - 1 - shift).div_euclid(s) + 1;
        (lo.max(0) as usize, hi.clamp(0, out as isize) as usize)
    }
}

fn for_each_row(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let k = g.kernel;
    for ci in 0..g.cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    f(row, ci, kd, kh, kw);
                }
            }
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T]) -> Vec<T> {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let p = g.out_len();
    let s = g.stride;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for_each_row(g, |row, ci, kd, kh, kw| {
        let dst = &mut cols[row * p..(row + 1) * p];
        let (z0, z1) = g.valid_range(kd, d, od);
        let (y0, y1) = g.valid_range(kh, h, oh);
        let (x0, x1) = g.valid_range(kw, w, ow);
        for z in z0..z1 {
            let iz = z * s + kd - g.padding;
            for y in y0..y1 {
                let iy = y * s + kh - g.padding;
                let src = &x[((ci * d + iz) * h + iy) * w..][..w];
                let out = &mut dst[(z * oh + y) * ow..][..ow];
                if s == 1 {
                    let ix0 = x0 + kw - g.padding;
                    out[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                } else {
                    for xo in x0..x1 {
                        out[xo] = src[xo * s + kw - g.padding];
                    }
                }
            }
        }
    });
    cols
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let p = g.out_len();
    let s = g.stride;
    for_each_row(g, |row, ci, kd, kh, kw| {
        let src = &cols[row * p..(row + 1) * p];
        let (z0, z1) = g.valid_range(kd, d, od);
        let (y0, y1) = g.valid_range(kh, h, oh);
        let (x0, x1) = g.valid_range(kw, w, ow);
        for z in z0..z1 {
            let iz = z * s + kd - g.padding;
            for y in y0..y1 {
                let iy = y * s + kh - g.padding;
                let dst = &mut dx[((ci * d + iz) * h + iy) * w..][..w];
                let col = &src[(z * oh + y) * ow..][..ow];
                for xo in x0..x1 {
                    dst[xo * s + kw - g.padding] += col[xo];
                }
            }
        }
    });
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeometry, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let p = g.out_len();
    let mut out = vec![T::zero(); g.cout * p];
    if g.is_pointwise() {
        T::gemm(g.cout, g.cin, p, weight, false, x, false, &mut out, false);
    } else {
        let cols = im2col(g, x);
        T::gemm(g.cout, g.patch_len(), p, weight, false, &cols, false, &mut out, false);
    }
    for (row, &b) in out.chunks_exact_mut(p).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let p = g.out_len();
    let kdim = g.patch_len();
    let pointwise = g.is_pointwise();
    let cols = if need[1] && !pointwise {
        Some(im2col(g, x))
    } else {
        None
    };
    let weight_grad = need[1].then(|| {
        let mut dw = vec![T::zero(); g.cout * kdim];
        let cols = cols.as_deref().unwrap_or(x);
        T::gemm(g.cout, p, kdim, dy, false, cols, true, &mut dw, false);
        dw
    });
    let bias_grad = need[2].then(|| dy.chunks_exact(p).map(|row| row.iter().copied().sum()).collect());
    let input_grad = need[0].then(|| {
        if pointwise {
            let mut dx = vec![T::zero(); g.cin * p];
            T::gemm(g.cin, g.cout, p, weight, true, dy, false, &mut dx, false);
            dx
        } else {
            let mut dcols = vec![T::zero(); kdim * p];
            T::gemm(kdim, g.cout, p, weight, true, dy, false, &mut dcols, false);
            let mut dx = vec![T::zero(); g.cin * g.input.iter().product::<usize>()];
            col2im(g, &dcols, &mut dx);
            dx
        }
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}
