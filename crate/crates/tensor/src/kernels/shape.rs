use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{check_shape, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `small` laid over `big`, zero on broadcast axes.
fn broadcast_strides(small: &[usize], big: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if small.len() > big.len() {
        return Err(TensorError::shape(
            op,
            format!("{small:?} has higher rank than {big:?}"),
        ));
    }
    let lead = big.len() - small.len();
    let mut padded = vec![1; lead];
    padded.extend_from_slice(small);
    let base = strides(&padded);
    padded
        .iter()
        .zip(big)
        .zip(base)
        .map(|((&s, &b), st)| {
            if s == b {
                Ok(if s == 1 { 0 } else { st })
            } else if s == 1 {
                Ok(0)
            } else {
                Err(TensorError::shape(
                    op,
                    format!("{small:?} does not broadcast to {big:?}"),
                ))
            }
        })
        .collect()
}

/// Visits the big tensor in row-major runs along its last axis, handing the
/// callback `(big_offset, small_offset, run_len, small_stride_of_last_axis)`.
fn walk(big: &[usize], small_strides: &[usize], f: &mut impl FnMut(usize, usize, usize, usize)) {
    let rank = big.len();
    let last = big[rank - 1];
    let last_stride = small_strides[rank - 1];
    let outer: usize = big[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut small_off = 0usize;
    for run in 0..outer {
        f(run * last, small_off, last, last_stride);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            small_off += small_strides[ax];
            if idx[ax] < big[ax] {
                break;
            }
            small_off -= small_strides[ax] * big[ax];
            idx[ax] = 0;
        }
    }
}

/// Repeats `src` along unit (or missing leading) axes to reach `shape`.
pub fn broadcast_to<T: Element>(src: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let n = check_shape(shape)?;
    let st = broadcast_strides(src.shape(), shape, "broadcast_to")?;
    let mut out = vec![T::zero(); n];
    let s = src.data();
    walk(shape, &st, &mut |bo, so, len, ls| {
        let dst = &mut out[bo..bo + len];
        if ls == 0 {
            dst.fill(s[so]);
        } else {
            dst.copy_from_slice(&s[so..so + len]);
        }
    });
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Sums `src` down to `shape`; the adjoint of [`broadcast_to`].
pub fn sum_to<T: Element>(src: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let n = check_shape(shape)?;
    let st = broadcast_strides(shape, src.shape(), "sum_to")?;
    let mut out = vec![T::zero(); n];
    let s = src.data();
    walk(src.shape(), &st, &mut |bo, so, len, ls| {
        let run = &s[bo..bo + len];
        if ls == 0 {
            let acc = run.iter().fold(T::zero(), |a, &v| a + v);
            out[so] = out[so] + acc;
        } else {
            for (d, &v) in out[so..so + len].iter_mut().zip(run) {
                *d = *d + v;
            }
        }
    });
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

fn split_at_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::shape("concat", "no operands"))?;
    let (outer, _, inner) = split_at_axis(first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let compatible = same_rank
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::shape(
                "concat",
                format!(
                    "{:?} and {:?} differ off axis {axis}",
                    first.shape(),
                    p.shape()
                ),
            ));
        }
        total += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn slice_axis<T: Element>(src: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let (outer, extent, inner) = split_at_axis(src.shape(), axis)?;
    if len == 0 || start + len > extent {
        return Err(TensorError::shape(
            "slice",
            format!("range {start}..{} outside axis {axis} of {:?}", start + len, src.shape()),
        ));
    }
    let mut shape = src.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&src.data()[base..base + len * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Embeds `src` at `start` inside a zero tensor whose `axis` has extent `total`.
pub fn pad_axis<T: Element>(src: &Tensor<T>, axis: usize, start: usize, total: usize) -> Result<Tensor<T>> {
    let (outer, extent, inner) = split_at_axis(src.shape(), axis)?;
    if start + extent > total {
        return Err(TensorError::shape(
            "pad_axis",
            format!("{extent} values at {start} exceed extent {total}"),
        ));
    }
    let mut shape = src.shape().to_vec();
    shape[axis] = total;
    let mut out = vec![T::zero(); outer * total * inner];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        out[dst..dst + extent * inner]
            .copy_from_slice(&src.data()[o * extent * inner..(o + 1) * extent * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Reverses the order of entries along `axis`.
pub fn flip<T: Element>(src: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, extent, inner) = split_at_axis(src.shape(), axis)?;
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for e in (0..extent).rev() {
            let base = (o * extent + e) * inner;
            out.extend_from_slice(&src.data()[base..base + inner]);
        }
    }
    Ok(Tensor::from_parts(src.shape().to_vec(), out))
}
