use super::{resolve_axis, split_axis};
use crate::graph::BackwardOp;
use crate::tensor::numel;
use crate::{Error, Result, Tensor, Var};

struct ReshapeOp;

impl BackwardOp for ReshapeOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone().reshape(inputs[0].shape())?)])
    }
}

fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let nd = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves size")
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl BackwardOp for PermuteOp {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(permute_data(grad, &self.inverse))])
    }
}

struct NarrowOp {
    axis: usize,
    start: usize,
}

impl BackwardOp for NarrowOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let in_shape = inputs[0].shape();
        let (outer, size, inner) = split_axis(in_shape, self.axis);
        let len = output.shape()[self.axis];
        let mut out = vec![0.0; inputs[0].numel()];
        let g = grad.data();
        for o in 0..outer {
            let dst = (o * size + self.start) * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
        }
        Ok(vec![Some(Tensor::new(in_shape, out)?)])
    }
}

struct ConcatOp {
    axis: usize,
}

impl BackwardOp for ConcatOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (outer, total, inner) = split_axis(output.shape(), self.axis);
        let g = grad.data();
        let mut offset = 0;
        let mut result = Vec::with_capacity(inputs.len());
        for (t, &need) in inputs.iter().zip(needs) {
            let len = t.shape()[self.axis];
            if need {
                let mut out = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    out.extend_from_slice(&g[src..src + len * inner]);
                }
                result.push(Some(Tensor::new(t.shape(), out)?));
            } else {
                result.push(None);
            }
            offset += len;
        }
        Ok(result)
    }
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape().push(value, &[self], Box::new(ReshapeOp)))
    }

    /// Reorder dimensions: output dimension `i` is input dimension `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let nd = v.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd
            || perm
                .iter()
                .any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", v.shape(), perm));
        }
        let mut inverse = vec![0; nd];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let value = permute_data(&v, perm);
        Ok(self
            .tape()
            .push(value, &[self], Box::new(PermuteOp { inverse })))
    }

    /// Swap the last two dimensions.
    pub fn transpose(self) -> Result<Var<'t>> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(Error::shape("transpose", &self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: isize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let axis = resolve_axis("narrow", axis, v.ndim())?;
        let (outer, size, inner) = split_axis(v.shape(), axis);
        if start + len > size {
            return Err(Error::Index {
                op: "narrow",
                index: start + len,
                size,
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * size + start) * inner;
            out.extend_from_slice(&v.data()[src..src + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self
            .tape()
            .push(value, &[self], Box::new(NarrowOp { axis, start })))
    }

    /// Join tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: isize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let nd = values[0].ndim();
        let axis = resolve_axis("concat", axis, nd)?;
        let mut shape = values[0].shape().to_vec();
        shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == nd
                && s.iter()
                    .zip(values[0].shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible || !first.same_tape(&parts[0]) {
                return Err(Error::shape("concat", values[0].shape(), s));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(first.tape().push(value, parts, Box::new(ConcatOp { axis })))
    }
}
