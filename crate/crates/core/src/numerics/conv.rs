use std::rc::Rc;

use crate::error::{Error, Result};

use super::gemm::gemm;
use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernels: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernels.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d wants NCHW input and OIKK kernels, got {input:?} and {kernels:?}"
            )));
        }
        if input[1] != kernels[1] {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {input:?} vs kernels {kernels:?}"
            )));
        }
        if kernels[2] != kernels[3] {
            return Err(Error::dim(format!("conv2d kernels must be square, got {kernels:?}")));
        }
        if bias != [kernels[0]] {
            return Err(Error::dim(format!("conv2d bias {bias:?} for kernels {kernels:?}")));
        }
        if stride == 0 {
            return Err(Error::usage("conv2d stride must be at least 1"));
        }
        let k = kernels[2];
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if k > h || k > w {
            return Err(Error::dim(format!(
                "conv2d kernel {k} larger than padded input {input:?} (padding {padding})"
            )));
        }
        Ok(ConvGeom {
            batch: input[0],
            in_ch: input[1],
            height: input[2],
            width: input[3],
            out_ch: kernels[0],
            kernel: k,
            stride,
            padding,
            out_h: (h - k) / stride + 1,
            out_w: (w - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_ch * self.positions()
    }

    /// Source offset of (channel, ky, kx) at output position (oy, ox), if inside the image.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }

    /// Unfolds one sample into a (C·K·K) × (OH·OW) matrix.
    fn im2col(&self, sample: &[f32], cols: &mut [f32]) {
        let (k, p) = (self.kernel, self.positions());
        for c in 0..self.in_ch {
            let plane = &sample[c * self.height * self.width..];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            row[oy * self.out_w + ox] = match self.source(ky, kx, oy, ox) {
                                Some((y, x)) => plane[y * self.width + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds a column matrix back, summing overlapping contributions.
    fn col2im(&self, cols: &[f32], sample: &mut [f32]) {
        let (k, p) = (self.kernel, self.positions());
        for c in 0..self.in_ch {
            let plane = &mut sample[c * self.height * self.width..];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((y, x)) = self.source(ky, kx, oy, ox) {
                                plane[y * self.width + x] += row[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Direct-loop convolution. Slow, kept as the reference for the im2col path.
pub fn conv2d_reference(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), bias.shape(), stride, padding)?;
    let (x, w, b) = (input.data(), kernels.data(), bias.data());
    let mut out = vec![0.0f32; g.batch * g.out_plane()];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b[o];
                    for c in 0..g.in_ch {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                if let Some((y, xx)) = g.source(ky, kx, oy, ox) {
                                    let xv = x[((n * g.in_ch + c) * g.height + y) * g.width + xx];
                                    let wv = w[((o * g.in_ch + c) * g.kernel + ky) * g.kernel + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    out[((n * g.out_ch + o) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    Tensor::from_parts(vec![g.batch, g.out_ch, g.out_h, g.out_w], out, "conv2d_reference")
}

fn conv2d_im2col(g: &ConvGeom, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let (pl, p) = (g.patch_len(), g.positions());
    let mut cols = vec![0.0f32; pl * p];
    let mut out = vec![0.0f32; g.batch * g.out_plane()];
    for n in 0..g.batch {
        g.im2col(&x[n * g.in_plane()..][..g.in_plane()], &mut cols);
        let dst = &mut out[n * g.out_plane()..][..g.out_plane()];
        for (o, row) in dst.chunks_mut(p).enumerate() {
            row.fill(b[o]);
        }
        gemm(g.out_ch, pl, p, w, false, &cols, false, 1.0, dst);
    }
    out
}

/// Returns input, kernel and bias gradients.
fn conv2d_backward(g: &ConvGeom, x: &[f32], w: &[f32], gout: &[f32]) -> [Vec<f32>; 3] {
    let (pl, p) = (g.patch_len(), g.positions());
    let mut cols = vec![0.0f32; pl * p];
    let mut dcols = vec![0.0f32; pl * p];
    let mut dx = vec![0.0f32; g.batch * g.in_plane()];
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; g.out_ch];
    for n in 0..g.batch {
        let go = &gout[n * g.out_plane()..][..g.out_plane()];
        g.im2col(&x[n * g.in_plane()..][..g.in_plane()], &mut cols);
        gemm(g.out_ch, p, pl, go, false, &cols, true, 1.0, &mut dw);
        gemm(pl, g.out_ch, p, w, true, go, false, 0.0, &mut dcols);
        g.col2im(&dcols, &mut dx[n * g.in_plane()..][..g.in_plane()]);
        for (o, row) in go.chunks(p).enumerate() {
            db[o] += row.iter().sum::<f32>();
        }
    }
    [dx, dw, db]
}

/// Result of a max-pool: the pooled value and, per output cell, the flat
/// index into the input that supplied it.
pub struct Pooled {
    pub out: Var,
    pub argmax: Rc<Vec<usize>>,
}

impl Graph {
    /// 2-D convolution over an NCHW batch with OIKK kernels.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(input),
            self.shape(kernels),
            self.shape(bias),
            stride,
            padding,
        )?;
        let data = conv2d_im2col(
            &geom,
            self.value(input).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_parts(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], data, "conv2d")?;
        Ok(self.push(
            value,
            vec![input, kernels, bias],
            Box::new(move |ctx| {
                let [dx, dw, db] = conv2d_backward(&geom, ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                vec![Some(dx), Some(dw), Some(db)]
            }),
        ))
    }

    /// Max-pool over an NCHW batch. Ties go to the lowest flat index.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Pooled> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("maxpool2d wants NCHW input, got {shape:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::usage("maxpool2d window and stride must be at least 1"));
        }
        let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        if window > h || window > w {
            return Err(Error::dim(format!("maxpool2d window {window} larger than input {shape:?}")));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out, "maxpool2d")?;
        let argmax = Rc::new(argmax);
        let routes = Rc::clone(&argmax);
        let out = self.push(
            value,
            vec![input],
            Box::new(move |ctx| {
                let mut dx = vec![0.0f32; ctx.inputs[0].len()];
                for (&src, &g) in routes.iter().zip(ctx.grad) {
                    dx[src] += g;
                }
                vec![Some(dx)]
            }),
        );
        Ok(Pooled { out, argmax })
    }
}
