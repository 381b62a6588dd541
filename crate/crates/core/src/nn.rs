//! Forward and backward kernels for the small dense layers used by the toy
//! networks. Feature maps are channel-major (`C x H x W`) flat slices.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (ho, wo) = self.out_dims(h, w);
        let k = self.kernel;
        let mut out = vec![0.0; self.c_out * ho * wo];
        for co in 0..self.c_out {
            let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..self.c_in {
                let src = &input[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((co * self.c_in + ci) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the input gradient; accumulates weight and bias gradients when
    /// the corresponding buffers are given.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        weight: &[f64],
        grad_out: &[f64],
        mut grad_weight: Option<&mut [f64]>,
        grad_bias: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Vec<f64> {
        let (ho, wo) = self.out_dims(h, w);
        let k = self.kernel;
        let mut grad_in = if want_input_grad {
            vec![0.0; self.c_in * h * w]
        } else {
            Vec::new()
        };
        if let Some(gb) = grad_bias {
            for co in 0..self.c_out {
                gb[co] += grad_out[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
            }
        }
        for co in 0..self.c_out {
            let gplane = &grad_out[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..self.c_in {
                let src = &input[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * self.c_in + ci) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let mut gw = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let g = gplane[oy * wo + ox];
                                gw += g * src[iy * w + ix as usize];
                                if want_input_grad {
                                    grad_in[ci * h * w + iy * w + ix as usize] += g * wv;
                                }
                            }
                        }
                        if let Some(gwb) = grad_weight.as_deref_mut() {
                            gwb[widx] += gw;
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).
/// Weight layout is `c_in x c_out x 2 x 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Upsample2x {
    pub c_in: usize,
    pub c_out: usize,
}

impl Upsample2x {
    pub fn weight_len(&self) -> usize {
        self.c_in * self.c_out * 4
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; self.c_out * ho * wo];
        for co in 0..self.c_out {
            out[co * ho * wo..(co + 1) * ho * wo]
                .iter_mut()
                .for_each(|v| *v = bias[co]);
        }
        for ci in 0..self.c_in {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            for co in 0..self.c_out {
                let wk = &weight[(ci * self.c_out + co) * 4..(ci * self.c_out + co) * 4 + 4];
                let dst = &mut out[co * ho * wo..(co + 1) * ho * wo];
                for i in 0..h {
                    for j in 0..w {
                        let x = src[i * w + j];
                        let base = 2 * i * wo + 2 * j;
                        dst[base] += x * wk[0];
                        dst[base + 1] += x * wk[1];
                        dst[base + wo] += x * wk[2];
                        dst[base + wo + 1] += x * wk[3];
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        weight: &[f64],
        grad_out: &[f64],
        mut grad_weight: Option<&mut [f64]>,
        grad_bias: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let (ho, wo) = (2 * h, 2 * w);
        let mut grad_in = vec![0.0; self.c_in * h * w];
        if let Some(gb) = grad_bias {
            for co in 0..self.c_out {
                gb[co] += grad_out[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
            }
        }
        for ci in 0..self.c_in {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            for co in 0..self.c_out {
                let off = (ci * self.c_out + co) * 4;
                let wk = &weight[off..off + 4];
                let g = &grad_out[co * ho * wo..(co + 1) * ho * wo];
                let mut gw = [0.0; 4];
                for i in 0..h {
                    for j in 0..w {
                        let base = 2 * i * wo + 2 * j;
                        let quad = [g[base], g[base + 1], g[base + wo], g[base + wo + 1]];
                        let x = src[i * w + j];
                        let mut acc = 0.0;
                        for q in 0..4 {
                            gw[q] += x * quad[q];
                            acc += wk[q] * quad[q];
                        }
                        grad_in[ci * h * w + i * w + j] += acc;
                    }
                }
                if let Some(gwb) = grad_weight.as_deref_mut() {
                    for q in 0..4 {
                        gwb[off + q] += gw[q];
                    }
                }
            }
        }
        grad_in
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` by the positivity of the post-activation values.
pub fn relu_backward_inplace(activated: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `y = W x + b` with `W` stored row-major as `out x in`.
pub fn linear(weight: &[f64], bias: Option<&[f64]>, x: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|o| {
            let row = &weight[o * in_dim..(o + 1) * in_dim];
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            dot + bias.map_or(0.0, |b| b[o])
        })
        .collect()
}

/// Accumulates `dW += dy x^T` and returns `W^T dy`.
pub fn linear_backward(weight: &[f64], x: &[f64], dy: &[f64], grad_weight: Option<&mut [f64]>) -> Vec<f64> {
    let in_dim = x.len();
    let mut dx = vec![0.0; in_dim];
    for (o, &g) in dy.iter().enumerate() {
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        for (d, w) in dx.iter_mut().zip(row) {
            *d += g * w;
        }
    }
    if let Some(gw) = grad_weight {
        for (o, &g) in dy.iter().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                gw[o * in_dim + i] += g * xi;
            }
        }
    }
    dx
}
