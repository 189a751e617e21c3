use super::{reduce_repeats, suffix_repeats};
use crate::graph::BackwardOp;
use crate::{Error, Result, Tensor, Var};

struct AddOp {
    b_shape: Vec<usize>,
    sign: f64,
}

impl BackwardOp for AddOp {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let ga = needs[0].then(|| grad.clone());
        let gb = needs[1].then(|| {
            let mut g = reduce_repeats(grad, &self.b_shape);
            if self.sign != 1.0 {
                g.data_mut().iter_mut().for_each(|x| *x *= self.sign);
            }
            g
        });
        Ok(vec![ga, gb])
    }
}

struct MulOp;

impl BackwardOp for MulOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let chunk = b.numel().max(1);
        let ga = needs[0].then(|| {
            let data = grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, g)| g * b.data()[i % chunk])
                .collect();
            Tensor::new(a.shape(), data).expect("same shape")
        });
        let gb = needs[1].then(|| {
            let mut out = vec![0.0; chunk];
            for (i, (g, av)) in grad.data().iter().zip(a.data()).enumerate() {
                out[i % chunk] += g * av;
            }
            Tensor::new(b.shape(), out).expect("same shape")
        });
        Ok(vec![ga, gb])
    }
}

struct ScaleOp(f64);

impl BackwardOp for ScaleOp {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.map(|g| g * self.0))])
    }
}

/// Unary op whose derivative depends only on the input value.
struct PointwiseOp {
    deriv: fn(f64, f64) -> f64,
}

impl BackwardOp for PointwiseOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let data = grad
            .data()
            .iter()
            .zip(inputs[0].data())
            .zip(output.data())
            .map(|((g, &x), &y)| g * (self.deriv)(x, y))
            .collect();
        Ok(vec![Some(Tensor::new(grad.shape(), data)?)])
    }
}

struct SumOp;

impl BackwardOp for SumOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.item()))])
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64, _y: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn binary_broadcast(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Vec<usize>)> {
        if !self.same_tape(&other) {
            return Err(Error::invalid(op, "operands live on different tapes"));
        }
        let a = self.value();
        let b = other.value();
        suffix_repeats(op, a.shape(), b.shape())?;
        let chunk = b.numel().max(1);
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % chunk]))
            .collect();
        Ok((Tensor::new(a.shape(), data)?, b.shape().to_vec()))
    }

    /// Elementwise sum; `other` may broadcast over leading dimensions.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, b_shape) = self.binary_broadcast(other, "add", |x, y| x + y)?;
        Ok(self.tape().push(
            value,
            &[self, other],
            Box::new(AddOp { b_shape, sign: 1.0 }),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, b_shape) = self.binary_broadcast(other, "sub", |x, y| x - y)?;
        Ok(self.tape().push(
            value,
            &[self, other],
            Box::new(AddOp {
                b_shape,
                sign: -1.0,
            }),
        ))
    }

    /// Elementwise product; `other` may broadcast over leading dimensions.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, _) = self.binary_broadcast(other, "mul", |x, y| x * y)?;
        Ok(self.tape().push(value, &[self, other], Box::new(MulOp)))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let value = self.value().map(|x| x * factor);
        self.tape().push(value, &[self], Box::new(ScaleOp(factor)))
    }

    fn pointwise(self, f: fn(f64) -> f64, deriv: fn(f64, f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        self.tape()
            .push(value, &[self], Box::new(PointwiseOp { deriv }))
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(self) -> Var<'t> {
        self.pointwise(gelu, gelu_deriv)
    }

    pub fn relu(self) -> Var<'t> {
        self.pointwise(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.pointwise(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn abs(self) -> Var<'t> {
        self.pointwise(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'t> {
        self.pointwise(|x| x * x, |x, _| 2.0 * x)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape().push(value, &[self], Box::new(SumOp))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }
}
