use crate::graph::BackwardOp;
use crate::kernels::{col2im, gemm_acc, gemm_nt, gemm_tn, im2col, Window};
use crate::{Error, Result, Tensor, Var};

/// Square kernel geometry shared by [`Var::conv2d`] and
/// [`Var::conv_transpose2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    /// Kernel 4, stride 2, padding 1: halves (conv) or doubles (transpose)
    /// even spatial sizes.
    pub const DOWN2: ConvSpec = ConvSpec {
        kernel: 4,
        stride: 2,
        pad: 1,
    };

    fn window(&self, channels: usize, height: usize, width: usize) -> Window {
        Window {
            channels,
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

struct Conv2dOp {
    spec: ConvSpec,
}

fn conv_dims(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    spec: ConvSpec,
    transpose: bool,
) -> Result<(usize, usize, usize)> {
    let ok = x.ndim() == 4
        && w.ndim() == 4
        && w.shape()[2] == spec.kernel
        && w.shape()[3] == spec.kernel;
    if !ok {
        return Err(Error::shape(op, x.shape(), w.shape()));
    }
    let (in_c, out_c) = if transpose {
        (w.shape()[0], w.shape()[1])
    } else {
        (w.shape()[1], w.shape()[0])
    };
    if x.shape()[1] != in_c || b.shape() != [out_c] {
        return Err(Error::shape(op, x.shape(), w.shape()));
    }
    Ok((x.shape()[0], in_c, out_c))
}

impl BackwardOp for Conv2dOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let [batch, in_c, h, wd] = x.shape().try_into().expect("4-d input");
        let out_c = w.shape()[0];
        let win = self.spec.window(in_c, h, wd);
        let (rows, ncols) = (win.col_rows(), win.col_cols());
        let (in_sz, out_sz) = (in_c * h * wd, out_c * ncols);
        debug_assert_eq!(output.numel(), batch * out_sz);
        let mut gx = vec![0.0; x.numel()];
        let mut gw = vec![0.0; w.numel()];
        let mut gb = vec![0.0; out_c];
        let mut cols = vec![0.0; rows * ncols];
        for n in 0..batch {
            let g = &grad.data()[n * out_sz..(n + 1) * out_sz];
            if needs[1] {
                im2col(&win, &x.data()[n * in_sz..(n + 1) * in_sz], &mut cols);
                for (acc, v) in gw.iter_mut().zip(gemm_nt(out_c, ncols, rows, g, &cols)) {
                    *acc += v;
                }
            }
            if needs[0] {
                let dcols = gemm_tn(rows, out_c, ncols, w.data(), g);
                col2im(&win, &dcols, &mut gx[n * in_sz..(n + 1) * in_sz]);
            }
            for (c, chunk) in g.chunks(ncols).enumerate() {
                gb[c] += chunk.iter().sum::<f64>();
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(x.shape(), gx)).transpose()?,
            needs[1].then(|| Tensor::new(w.shape(), gw)).transpose()?,
            needs[2].then(|| Tensor::from_vec(gb)),
        ])
    }
}

struct ConvTranspose2dOp {
    spec: ConvSpec,
}

impl BackwardOp for ConvTranspose2dOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let [batch, in_c, h, wd] = x.shape().try_into().expect("4-d input");
        let out_c = w.shape()[1];
        let (oh, ow) = (output.shape()[2], output.shape()[3]);
        let win = self.spec.window(out_c, oh, ow);
        let (rows, ncols) = (win.col_rows(), h * wd);
        let (in_sz, out_sz) = (in_c * ncols, out_c * oh * ow);
        let mut gx = vec![0.0; x.numel()];
        let mut gw = vec![0.0; w.numel()];
        let mut gb = vec![0.0; out_c];
        let mut dcols = vec![0.0; rows * ncols];
        for n in 0..batch {
            let g = &grad.data()[n * out_sz..(n + 1) * out_sz];
            im2col(&win, g, &mut dcols);
            if needs[0] {
                gemm_acc(
                    in_c,
                    rows,
                    ncols,
                    w.data(),
                    &dcols,
                    &mut gx[n * in_sz..(n + 1) * in_sz],
                );
            }
            if needs[1] {
                let xb = &x.data()[n * in_sz..(n + 1) * in_sz];
                for (acc, v) in gw.iter_mut().zip(gemm_nt(in_c, ncols, rows, xb, &dcols)) {
                    *acc += v;
                }
            }
            for (c, chunk) in g.chunks(oh * ow).enumerate() {
                gb[c] += chunk.iter().sum::<f64>();
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(x.shape(), gx)).transpose()?,
            needs[1].then(|| Tensor::new(w.shape(), gw)).transpose()?,
            needs[2].then(|| Tensor::from_vec(gb)),
        ])
    }
}

impl<'t> Var<'t> {
    /// 2-D convolution of `[B, Cin, H, W]` input with `[Cout, Cin, k, k]`
    /// weights and `[Cout]` bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, spec: ConvSpec) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (batch, in_c, out_c) = conv_dims("conv2d", &x, &w, &b, spec, false)?;
        let (h, wd) = (x.shape()[2], x.shape()[3]);
        if h + 2 * spec.pad < spec.kernel || wd + 2 * spec.pad < spec.kernel {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        let win = spec.window(in_c, h, wd);
        let (rows, ncols) = (win.col_rows(), win.col_cols());
        let in_sz = in_c * h * wd;
        let mut out = vec![0.0; batch * out_c * ncols];
        let mut cols = vec![0.0; rows * ncols];
        for n in 0..batch {
            im2col(&win, &x.data()[n * in_sz..(n + 1) * in_sz], &mut cols);
            let dst = &mut out[n * out_c * ncols..(n + 1) * out_c * ncols];
            for (c, chunk) in dst.chunks_mut(ncols).enumerate() {
                chunk.fill(b.data()[c]);
            }
            gemm_acc(out_c, rows, ncols, w.data(), &cols, dst);
        }
        let value = Tensor::new(&[batch, out_c, win.out_height(), win.out_width()], out)?;
        Ok(self
            .tape()
            .push(value, &[self, weight, bias], Box::new(Conv2dOp { spec })))
    }

    /// Transposed convolution (adjoint of [`Var::conv2d`]) with
    /// `[Cin, Cout, k, k]` weights and `[Cout]` bias.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t>,
        bias: Var<'t>,
        spec: ConvSpec,
    ) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (batch, in_c, out_c) = conv_dims("conv_transpose2d", &x, &w, &b, spec, true)?;
        let (h, wd) = (x.shape()[2], x.shape()[3]);
        let oh = (h - 1) * spec.stride + spec.kernel - 2 * spec.pad;
        let ow = (wd - 1) * spec.stride + spec.kernel - 2 * spec.pad;
        let win = spec.window(out_c, oh, ow);
        debug_assert_eq!((win.out_height(), win.out_width()), (h, wd));
        let (rows, ncols) = (win.col_rows(), h * wd);
        let (in_sz, out_sz) = (in_c * ncols, out_c * oh * ow);
        let mut out = vec![0.0; batch * out_sz];
        for n in 0..batch {
            let cols = gemm_tn(
                rows,
                in_c,
                ncols,
                w.data(),
                &x.data()[n * in_sz..(n + 1) * in_sz],
            );
            let dst = &mut out[n * out_sz..(n + 1) * out_sz];
            col2im(&win, &cols, dst);
            for (c, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b.data()[c]);
            }
        }
        let value = Tensor::new(&[batch, out_c, oh, ow], out)?;
        Ok(self.tape().push(
            value,
            &[self, weight, bias],
            Box::new(ConvTranspose2dOp { spec }),
        ))
    }
}
