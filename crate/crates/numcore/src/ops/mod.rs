pub(crate) mod conv;
mod elementwise;
mod matmul;
mod nn;
mod shape;

pub use matmul::matmul;

use crate::{Error, Result, Tensor};

/// Number of times `small` repeats inside `big` when `small` is a suffix of
/// `big`'s shape.
pub(crate) fn suffix_repeats(op: &'static str, big: &[usize], small: &[usize]) -> Result<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return Err(Error::shape(op, big, small));
    }
    Ok(big[..big.len() - small.len()].iter().product())
}

/// Sum the `repeats` consecutive chunks of `t` into one chunk of `shape`.
pub(crate) fn reduce_repeats(t: &Tensor, shape: &[usize]) -> Tensor {
    let chunk: usize = shape.iter().product();
    let mut out = vec![0.0; chunk];
    for part in t.data().chunks(chunk.max(1)) {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
    Tensor::new(shape, out).expect("chunk size matches shape")
}

fn resolve_axis(op: &'static str, axis: isize, ndim: usize) -> Result<usize> {
    let a = if axis < 0 { ndim as isize + axis } else { axis };
    if a < 0 || a as usize >= ndim {
        return Err(Error::Index {
            op,
            index: axis.unsigned_abs(),
            size: ndim,
        });
    }
    Ok(a as usize)
}

/// `(outer, size, inner)` strides around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
