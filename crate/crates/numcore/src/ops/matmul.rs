use crate::graph::BackwardOp;
use crate::kernels::{gemm_acc, gemm_nt, gemm_tn};
use crate::{Error, Result, Tensor, Var};

#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// Right operand is a single matrix shared across the batch.
    shared_rhs: bool,
}

fn plan(a: &[usize], b: &[usize]) -> Result<(Dims, Vec<usize>)> {
    let err = || Error::shape("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(err());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_rhs = b_batch.is_empty();
    if !shared_rhs && a_batch != b_batch {
        return Err(err());
    }
    let mut out = a_batch.to_vec();
    out.extend([m, n]);
    Ok((
        Dims {
            batch: a_batch.iter().product(),
            m,
            k,
            n,
            shared_rhs,
        },
        out,
    ))
}

fn forward(d: Dims, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; d.batch * d.m * d.n];
    if d.shared_rhs {
        gemm_acc(d.batch * d.m, d.k, d.n, a, b, &mut c);
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            gemm_acc(
                d.m,
                d.k,
                d.n,
                &a[i * sa..(i + 1) * sa],
                &b[i * sb..(i + 1) * sb],
                &mut c[i * sc..(i + 1) * sc],
            );
        }
    }
    c
}

struct MatMulOp(Dims);

impl BackwardOp for MatMulOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let d = self.0;
        let (a, b) = (inputs[0], inputs[1]);
        let g = grad.data();
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        let ga = if needs[0] {
            let mut out = Vec::with_capacity(a.numel());
            if d.shared_rhs {
                out = gemm_nt(d.batch * d.m, d.n, d.k, g, b.data());
            } else {
                for i in 0..d.batch {
                    out.extend(gemm_nt(
                        d.m,
                        d.n,
                        d.k,
                        &g[i * sc..(i + 1) * sc],
                        &b.data()[i * sb..(i + 1) * sb],
                    ));
                }
            }
            Some(Tensor::new(a.shape(), out)?)
        } else {
            None
        };
        let gb = if needs[1] {
            let out = if d.shared_rhs {
                gemm_tn(d.k, d.batch * d.m, d.n, a.data(), g)
            } else {
                let mut out = Vec::with_capacity(b.numel());
                for i in 0..d.batch {
                    out.extend(gemm_tn(
                        d.k,
                        d.m,
                        d.n,
                        &a.data()[i * sa..(i + 1) * sa],
                        &g[i * sc..(i + 1) * sc],
                    ));
                }
                out
            };
            Some(Tensor::new(b.shape(), out)?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

impl<'t> Var<'t> {
    /// Matrix product over the last two dimensions. `other` either carries
    /// the same batch dimensions or none at all.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (dims, out_shape) = plan(a.shape(), b.shape())?;
        let value = Tensor::new(&out_shape, forward(dims, a.data(), b.data()))?;
        Ok(self
            .tape()
            .push(value, &[self, other], Box::new(MatMulOp(dims))))
    }
}

/// Plain matrix product of tensors, same shape rules as [`Var::matmul`].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (dims, out_shape) = plan(a.shape(), b.shape())?;
    Tensor::new(&out_shape, forward(dims, a.data(), b.data()))
}
