//! 2-D cross-correlation and its two adjoints, lowered to GEMM through
//! im2col / col2im. Batches run in parallel; reductions over the batch run
//! in a fixed order so results do not depend on the thread count.

use rayon::prelude::*;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Rows of the weight-gradient GEMM handed to one rayon task.
const ROW_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Conv2dGeom {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }
}

impl Conv2dGeom {
    pub fn new(stride: (usize, usize), padding: (usize, usize), dilation: (usize, usize)) -> Self {
        Conv2dGeom {
            stride,
            padding,
            dilation,
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Self::new((stride, stride), (padding, padding), (1, 1))
    }

    fn out_1d(input: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = input + 2 * p;
        if s == 0 || padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    }

    /// Output extents of the forward convolution, `None` when empty.
    pub fn output_hw(&self, in_hw: (usize, usize), k_hw: (usize, usize)) -> Option<(usize, usize)> {
        let h = Self::out_1d(in_hw.0, k_hw.0, self.stride.0, self.padding.0, self.dilation.0)?;
        let w = Self::out_1d(in_hw.1, k_hw.1, self.stride.1, self.padding.1, self.dilation.1)?;
        Some((h, w))
    }

    /// Extents of the transposed convolution's output, i.e. the smallest
    /// forward input that maps onto `out_hw`.
    pub fn transposed_hw(&self, out_hw: (usize, usize), k_hw: (usize, usize)) -> Option<(usize, usize)> {
        let one = |o: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            ((o - 1) * s + d * (k - 1) + 1).checked_sub(2 * p).filter(|&v| v > 0)
        };
        Some((
            one(out_hw.0, k_hw.0, self.stride.0, self.padding.0, self.dilation.0)?,
            one(out_hw.1, k_hw.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }

    fn is_pointwise(&self, k_hw: (usize, usize)) -> bool {
        k_hw == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// Extents shared by the three kernels.
#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    in_hw: (usize, usize),
    k_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl Dims {
    fn col_rows(&self) -> usize {
        self.c_in * self.k_hw.0 * self.k_hw.1
    }
    fn out_plane(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }
    fn in_plane(&self) -> usize {
        self.in_hw.0 * self.in_hw.1
    }
}

fn dims4(t: &[usize], op: &'static str, what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(t).map_err(|_| {
        TensorError::shape(op, format!("{what} must be rank 4, got {t:?}"))
    })
}

/// Range of output positions `o` for which `o * s + off` lands in `[0, len)`.
fn valid_range(out_len: usize, s: usize, off: isize, len: usize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_incl = (len as isize - 1 - off).div_euclid(s);
    let lo = (lo.max(0) as usize).min(out_len);
    let hi = ((hi_incl + 1).max(0) as usize).min(out_len);
    (lo, hi.max(lo))
}

fn im2col<T: Element>(x: &[T], d: &Dims, g: &Conv2dGeom, col: &mut [T]) {
    let (h, w) = d.in_hw;
    let (kh, kw) = d.k_hw;
    let (oh, ow) = d.out_hw;
    let plane = oh * ow;
    for c in 0..d.c_in {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            let off_h = (ki * g.dilation.0) as isize - g.padding.0 as isize;
            let (rlo, rhi) = valid_range(oh, g.stride.0, off_h, h);
            for kj in 0..kw {
                let off_w = (kj * g.dilation.1) as isize - g.padding.1 as isize;
                let (clo, chi) = valid_range(ow, g.stride.1, off_w, w);
                let row = ((c * kh + ki) * kw + kj) * plane;
                let dst = &mut col[row..row + plane];
                dst.fill(T::zero());
                if clo == chi {
                    continue;
                }
                for r in rlo..rhi {
                    let ih = (r * g.stride.0) as isize + off_h;
                    let src = &xc[ih as usize * w..(ih as usize + 1) * w];
                    let drow = &mut dst[r * ow..(r + 1) * ow];
                    if g.stride.1 == 1 {
                        let start = (clo as isize + off_w) as usize;
                        drow[clo..chi].copy_from_slice(&src[start..start + (chi - clo)]);
                    } else {
                        for (q, slot) in drow.iter_mut().enumerate().take(chi).skip(clo) {
                            *slot = src[((q * g.stride.1) as isize + off_w) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], d: &Dims, g: &Conv2dGeom, x: &mut [T]) {
    let (h, w) = d.in_hw;
    let (kh, kw) = d.k_hw;
    let (oh, ow) = d.out_hw;
    let plane = oh * ow;
    x.fill(T::zero());
    for c in 0..d.c_in {
        let xc = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            let off_h = (ki * g.dilation.0) as isize - g.padding.0 as isize;
            let (rlo, rhi) = valid_range(oh, g.stride.0, off_h, h);
            for kj in 0..kw {
                let off_w = (kj * g.dilation.1) as isize - g.padding.1 as isize;
                let (clo, chi) = valid_range(ow, g.stride.1, off_w, w);
                let row = ((c * kh + ki) * kw + kj) * plane;
                let src = &col[row..row + plane];
                for r in rlo..rhi {
                    let ih = ((r * g.stride.0) as isize + off_h) as usize;
                    let dst = &mut xc[ih * w..(ih + 1) * w];
                    let srow = &src[r * ow..(r + 1) * ow];
                    for q in clo..chi {
                        dst[((q * g.stride.1) as isize + off_w) as usize] =
                            dst[((q * g.stride.1) as isize + off_w) as usize] + srow[q];
                    }
                }
            }
        }
    }
}

/// Row-major `c[m, n] (+)= a[m, k] * b[k, n]` with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths cover the strided extents checked above and
    // `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

fn forward_dims(x: &[usize], w: &[usize], g: &Conv2dGeom, op: &'static str) -> Result<Dims> {
    let [b, c, h, wd] = dims4(x, op, "input")?;
    let [o, i, kh, kw] = dims4(w, op, "weight")?;
    if c != i {
        return Err(TensorError::shape(
            op,
            format!("input has {c} channels but weight expects {i} (weight {w:?})"),
        ));
    }
    let out_hw = g.output_hw((h, wd), (kh, kw)).ok_or_else(|| {
        TensorError::shape(
            op,
            format!("input {h}x{wd} with kernel {kh}x{kw} and {g:?} yields an empty output"),
        )
    })?;
    Ok(Dims {
        batch: b,
        c_in: c,
        c_out: o,
        in_hw: (h, wd),
        k_hw: (kh, kw),
        out_hw,
    })
}

/// Cross-correlation `y[b,o] = sum_i w[o,i] * x[b,i]` with weight `O x I x Kh x Kw`.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: &Conv2dGeom) -> Result<Tensor<T>> {
    let d = forward_dims(x.shape(), w.shape(), g, "conv2d")?;
    let out_len = d.c_out * d.out_plane();
    let mut y = vec![T::zero(); d.batch * out_len];
    let pointwise = g.is_pointwise(d.k_hw);
    let in_len = d.c_in * d.in_plane();
    y.par_chunks_mut(out_len)
        .zip(x.data().par_chunks(in_len))
        .for_each(|(yb, xb)| {
            if pointwise {
                gemm(d.c_out, d.c_in, d.out_plane(), w.data(), false, xb, false, yb, false);
            } else {
                let mut col = vec![T::zero(); d.col_rows() * d.out_plane()];
                im2col(xb, &d, g, &mut col);
                gemm(d.c_out, d.col_rows(), d.out_plane(), w.data(), false, &col, false, yb, false);
            }
        });
    Ok(Tensor::from_parts(
        vec![d.batch, d.c_out, d.out_hw.0, d.out_hw.1],
        y,
    ))
}

/// Adjoint of [`conv2d`] in its input: maps `gy: B x O x H' x W'` back to
/// `B x I x H x W`. With `in_hw` chosen by [`Conv2dGeom::transposed_hw`] this
/// is the transposed convolution.
pub fn conv2d_input_grad<T: Element>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    g: &Conv2dGeom,
    in_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let op = "conv2d_input_grad";
    let [b, o, oh, ow] = dims4(gy.shape(), op, "gradient")?;
    let [wo, i, kh, kw] = dims4(w.shape(), op, "weight")?;
    if o != wo {
        return Err(TensorError::shape(
            op,
            format!("gradient has {o} channels but weight produces {wo}"),
        ));
    }
    if g.output_hw(in_hw, (kh, kw)) != Some((oh, ow)) {
        return Err(TensorError::shape(
            op,
            format!("input extent {in_hw:?} does not map to {oh}x{ow} under {g:?} kernel {kh}x{kw}"),
        ));
    }
    let d = Dims {
        batch: b,
        c_in: i,
        c_out: o,
        in_hw,
        k_hw: (kh, kw),
        out_hw: (oh, ow),
    };
    let in_len = d.c_in * d.in_plane();
    let out_len = d.c_out * d.out_plane();
    let pointwise = g.is_pointwise(d.k_hw);
    let mut x = vec![T::zero(); b * in_len];
    x.par_chunks_mut(in_len)
        .zip(gy.data().par_chunks(out_len))
        .for_each(|(xb, gb)| {
            if pointwise {
                gemm(d.c_in, d.c_out, d.out_plane(), w.data(), true, gb, false, xb, false);
            } else {
                let mut col = vec![T::zero(); d.col_rows() * d.out_plane()];
                gemm(d.col_rows(), d.c_out, d.out_plane(), w.data(), true, gb, false, &mut col, false);
                col2im(&col, &d, g, xb);
            }
        });
    Ok(Tensor::from_parts(vec![b, i, in_hw.0, in_hw.1], x))
}

/// Adjoint of [`conv2d`] in its weight: `gw[o,i,ki,kj] = sum_b,p gy * x`.
pub fn conv2d_weight_grad<T: Element>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    g: &Conv2dGeom,
    k_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let op = "conv2d_weight_grad";
    let [b, c, h, w] = dims4(x.shape(), op, "input")?;
    let [gb, o, oh, ow] = dims4(gy.shape(), op, "gradient")?;
    if b != gb {
        return Err(TensorError::shape(op, format!("batch {b} vs {gb}")));
    }
    if g.output_hw((h, w), k_hw) != Some((oh, ow)) {
        return Err(TensorError::shape(
            op,
            format!("input {h}x{w} does not map to {oh}x{ow} under {g:?} kernel {k_hw:?}"),
        ));
    }
    let d = Dims {
        batch: b,
        c_in: c,
        c_out: o,
        in_hw: (h, w),
        k_hw,
        out_hw: (oh, ow),
    };
    let rows = d.col_rows();
    let plane = d.out_plane();
    let in_len = c * d.in_plane();
    let out_len = o * plane;
    let pointwise = g.is_pointwise(k_hw);
    let mut gw = vec![T::zero(); o * rows];
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for s in 0..b {
        let xb = &x.data()[s * in_len..(s + 1) * in_len];
        let gyb = &gy.data()[s * out_len..(s + 1) * out_len];
        let colb: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, &d, g, &mut col);
            &col
        };
        gw.par_chunks_mut(ROW_CHUNK * rows)
            .enumerate()
            .for_each(|(chunk, dst)| {
                let r0 = chunk * ROW_CHUNK;
                let m = dst.len() / rows;
                gemm(m, plane, rows, &gyb[r0 * plane..(r0 + m) * plane], false, colb, true, dst, s > 0);
            });
    }
    Ok(Tensor::from_parts(vec![o, c, k_hw.0, k_hw.1], gw))
}
