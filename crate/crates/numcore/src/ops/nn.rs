use std::rc::Rc;

use super::{resolve_axis, split_axis, suffix_repeats};
use crate::graph::BackwardOp;
use crate::{Error, Result, Tensor, Var};

struct SoftmaxOp {
    axis: usize,
}

impl BackwardOp for SoftmaxOp {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (outer, size, inner) = split_axis(output.shape(), self.axis);
        let (y, g) = (output.data(), grad.data());
        let mut out = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * size * inner + i;
                let mut dot = 0.0;
                for k in 0..size {
                    let idx = base + k * inner;
                    dot += y[idx] * g[idx];
                }
                for k in 0..size {
                    let idx = base + k * inner;
                    out[idx] = y[idx] * (g[idx] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::new(output.shape(), out)?)])
    }
}

struct LayerNormOp;

impl BackwardOp for LayerNormOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let d = *x.shape().last().unwrap_or(&1);
        let mut out = vec![0.0; x.numel()];
        for ((xr, yr), (gr, or)) in x
            .data()
            .chunks(d)
            .zip(output.data().chunks(d))
            .zip(grad.data().chunks(d).zip(out.chunks_mut(d)))
        {
            let (_, rstd) = moments(xr);
            let n = d as f64;
            let mean_g = gr.iter().sum::<f64>() / n;
            let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
            for ((o, g), y) in or.iter_mut().zip(gr).zip(yr) {
                *o = rstd * (g - mean_g - y * mean_gy);
            }
        }
        Ok(vec![Some(Tensor::new(x.shape(), out)?)])
    }
}

const LN_EPS: f64 = 1e-5;

fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

struct CrossEntropyOp {
    targets: Vec<usize>,
    weights: Vec<f64>,
    total_weight: f64,
}

fn log_softmax_row(row: &[f64]) -> (f64, f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    (max, sum.ln())
}

impl BackwardOp for CrossEntropyOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let logits = inputs[0];
        let m = logits.shape()[1];
        let scale = grad.item() / self.total_weight;
        let mut out = vec![0.0; logits.numel()];
        for (s, (row, orow)) in logits.data().chunks(m).zip(out.chunks_mut(m)).enumerate() {
            let w = self.weights[s] * scale;
            if w == 0.0 {
                continue;
            }
            let (max, lse) = log_softmax_row(row);
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = w * (x - max - lse).exp();
            }
            orow[self.targets[s]] -= w;
        }
        Ok(vec![Some(Tensor::new(logits.shape(), out)?)])
    }
}

struct BceOp;

impl BackwardOp for BceOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, t) = (inputs[0], inputs[1]);
        let scale = grad.item() / x.numel().max(1) as f64;
        let gx = needs[0].then(|| {
            let data = x
                .data()
                .iter()
                .zip(t.data())
                .map(|(&x, &t)| scale * (1.0 / (1.0 + (-x).exp()) - t))
                .collect();
            Tensor::new(x.shape(), data).expect("same shape")
        });
        let gt = needs[1].then(|| x.map(|x| -scale * x));
        Ok(vec![gx, gt])
    }
}

struct EmbeddingOp {
    indices: Rc<Vec<usize>>,
}

impl BackwardOp for EmbeddingOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let table = inputs[0];
        let d = table.shape()[1];
        let mut out = vec![0.0; table.numel()];
        for (&idx, g) in self.indices.iter().zip(grad.data().chunks(d)) {
            for (o, v) in out[idx * d..(idx + 1) * d].iter_mut().zip(g) {
                *o += v;
            }
        }
        Ok(vec![Some(Tensor::new(table.shape(), out)?)])
    }
}

struct StraightThroughOp;

impl BackwardOp for StraightThroughOp {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone())])
    }
}

impl<'t> Var<'t> {
    /// Softmax along `axis`, stabilized by subtracting the row maximum.
    pub fn softmax(self, axis: isize) -> Result<Var<'t>> {
        let v = self.value();
        let axis = resolve_axis("softmax", axis, v.ndim())?;
        let (outer, size, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * size * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..size {
                    max = max.max(x[base + k * inner]);
                }
                let mut sum = 0.0;
                for k in 0..size {
                    let e = (x[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..size {
                    out[base + k * inner] /= sum;
                }
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        Ok(self
            .tape()
            .push(value, &[self], Box::new(SoftmaxOp { axis })))
    }

    /// Softmax along the last axis restricted to entries where `mask` is
    /// true. `mask` has the shape of the trailing dimensions of `self` and is
    /// broadcast over the leading ones. Masked entries come out as zero.
    pub fn masked_softmax(self, mask: &[bool], mask_shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        suffix_repeats("masked_softmax", v.shape(), mask_shape)?;
        if mask.len() != mask_shape.iter().product::<usize>() || mask_shape.is_empty() {
            return Err(Error::shape("masked_softmax", mask_shape, &[mask.len()]));
        }
        let size = *v.shape().last().unwrap();
        let rows_per_mask = mask.len() / size;
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for (r, (xr, or)) in x.chunks(size).zip(out.chunks_mut(size)).enumerate() {
            let mr = &mask[(r % rows_per_mask) * size..(r % rows_per_mask + 1) * size];
            let mut max = f64::NEG_INFINITY;
            for (&xv, &m) in xr.iter().zip(mr) {
                if m {
                    max = max.max(xv);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMasked {
                    row: r % rows_per_mask,
                });
            }
            let mut sum = 0.0;
            for ((o, &xv), &m) in or.iter_mut().zip(xr).zip(mr) {
                if m {
                    *o = (xv - max).exp();
                    sum += *o;
                }
            }
            or.iter_mut().for_each(|o| *o /= sum);
        }
        let value = Tensor::new(v.shape(), out)?;
        let axis = v.ndim() - 1;
        Ok(self
            .tape()
            .push(value, &[self], Box::new(SoftmaxOp { axis })))
    }

    /// Normalize the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self) -> Var<'t> {
        let v = self.value();
        let d = *v.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d.max(1)) {
            let (mean, rstd) = moments(row);
            out.extend(row.iter().map(|x| (x - mean) * rstd));
        }
        let value = Tensor::new(v.shape(), out).expect("same shape");
        self.tape().push(value, &[self], Box::new(LayerNormOp))
    }

    /// Weighted mean cross-entropy of `[S, M]` logits:
    /// `sum_s w_s * -log softmax(logits_s)[t_s] / sum_s w_s`.
    pub fn cross_entropy(self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 || v.shape()[0] != targets.len() || targets.len() != weights.len() {
            return Err(Error::shape(
                "cross_entropy",
                v.shape(),
                &[targets.len(), weights.len()],
            ));
        }
        let m = v.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                size: m,
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid(
                "cross_entropy",
                "weights must be nonnegative",
            ));
        }
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(Error::invalid("cross_entropy", "weights sum to zero"));
        }
        let mut loss = 0.0;
        for ((row, &t), &w) in v.data().chunks(m).zip(targets).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let (max, lse) = log_softmax_row(row);
            loss += w * (max + lse - row[t]);
        }
        let value = Tensor::scalar(loss / total_weight);
        let op = CrossEntropyOp {
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            total_weight,
        };
        Ok(self.tape().push(value, &[self], Box::new(op)))
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and `targets`.
    pub fn bce_with_logits(self, targets: Var<'t>) -> Result<Var<'t>> {
        let (x, t) = (self.value(), targets.value());
        if x.shape() != t.shape() {
            return Err(Error::shape("bce_with_logits", x.shape(), t.shape()));
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(t.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / x.numel().max(1) as f64);
        Ok(self.tape().push(value, &[self, targets], Box::new(BceOp)))
    }

    /// Gather rows of a `[V, D]` table.
    pub fn embedding(self, indices: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.ndim() != 2 {
            return Err(Error::shape("embedding", table.shape(), &[indices.len()]));
        }
        let (vocab, d) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(Error::Index {
                    op: "embedding",
                    index: i,
                    size: vocab,
                });
            }
            out.extend_from_slice(table.row(i));
        }
        let value = Tensor::new(&[indices.len(), d], out)?;
        let op = EmbeddingOp {
            indices: Rc::new(indices.to_vec()),
        };
        Ok(self.tape().push(value, &[self], Box::new(op)))
    }

    /// Forward value is `target`; the gradient passes to `self` unchanged.
    pub fn straight_through(self, target: Tensor) -> Result<Var<'t>> {
        if target.shape() != self.shape().as_slice() {
            return Err(Error::shape(
                "straight_through",
                &self.shape(),
                target.shape(),
            ));
        }
        Ok(self
            .tape()
            .push(target, &[self], Box::new(StraightThroughOp)))
    }

    /// Copy of the value with no gradient path.
    pub fn detach(self) -> Var<'t> {
        self.tape().constant((*self.value()).clone())
    }
}
