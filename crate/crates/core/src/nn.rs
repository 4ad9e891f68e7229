//! Minimal CPU building blocks shared by the toy denoiser and the
//! classifier: 3x3 convolutions with unit padding over channel-first
//! buffers, with hand-written backward passes.

/// Spatial geometry of one 3x3, pad-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3x3 {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn out_height(&self) -> usize {
        (self.height - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * 9
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, 3, 3]
    }

    /// Output positions `o` along one axis whose input tap `o*s + k - 1`
    /// falls inside `[0, len)`.
    #[inline]
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k == 0 { 1 } else { 0 };
        let hi = (len + 1 - k).div_ceil(s); // exclusive: o*s + k - 1 < len
        (lo, hi.min(out_len))
    }

    pub fn forward(&self, input: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
        let (h, w, s) = (self.height, self.width, self.stride);
        let (ho, wo) = (self.out_height(), self.out_width());
        debug_assert_eq!(input.len(), self.c_in * h * w);
        debug_assert_eq!(weight.len(), self.weight_len());
        let mut out = vec![0.0f32; self.c_out * ho * wo];
        for co in 0..self.c_out {
            let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            plane.fill(bias[co]);
            for ci in 0..self.c_in {
                let src = &input[ci * h * w..(ci + 1) * h * w];
                for ky in 0..3 {
                    let (oy0, oy1) = self.valid(ky, h, ho);
                    for kx in 0..3 {
                        let wv = weight[((co * self.c_in + ci) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = self.valid(kx, w, wo);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - 1;
                            let row = &src[iy * w..(iy + 1) * w];
                            let dst = &mut plane[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let shift = kx as isize - 1;
                                let d = &mut dst[ox0..ox1];
                                let r = &row[(ox0 as isize + shift) as usize..(ox1 as isize + shift) as usize];
                                for (a, b) in d.iter_mut().zip(r) {
                                    *a += wv * b;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    dst[ox] += wv * row[ox * s + kx - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and, when requested, returns the
    /// gradient with respect to the input.
    pub fn backward(
        &self,
        input: &[f32],
        weight: &[f32],
        grad_out: &[f32],
        grad_weight: &mut [f32],
        grad_bias: &mut [f32],
        want_input_grad: bool,
    ) -> Option<Vec<f32>> {
        let (h, w, s) = (self.height, self.width, self.stride);
        let (ho, wo) = (self.out_height(), self.out_width());
        let mut grad_in = want_input_grad.then(|| vec![0.0f32; self.c_in * h * w]);
        for co in 0..self.c_out {
            let g = &grad_out[co * ho * wo..(co + 1) * ho * wo];
            grad_bias[co] += g.iter().sum::<f32>();
            for ci in 0..self.c_in {
                let src = &input[ci * h * w..(ci + 1) * h * w];
                for ky in 0..3 {
                    let (oy0, oy1) = self.valid(ky, h, ho);
                    for kx in 0..3 {
                        let widx = ((co * self.c_in + ci) * 3 + ky) * 3 + kx;
                        let wv = weight[widx];
                        let (ox0, ox1) = self.valid(kx, w, wo);
                        let mut acc = 0.0f32;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - 1;
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            let row = &src[iy * w..(iy + 1) * w];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * row[ox * s + kx - 1];
                            }
                            if let Some(gi) = grad_in.as_mut() {
                                let gi_row = &mut gi[ci * h * w + iy * w..ci * h * w + (iy + 1) * w];
                                for ox in ox0..ox1 {
                                    gi_row[ox * s + kx - 1] += wv * grow[ox];
                                }
                            }
                        }
                        grad_weight[widx] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

pub fn relu_in_place(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the forward activation was clipped.
pub fn relu_backward(activated: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y = W x + b` for a row-major `rows x cols` matrix.
pub fn dense(weight: &[f32], bias: &[f32], x: &[f32]) -> Vec<f32> {
    let cols = x.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| b + weight[r * cols..(r + 1) * cols].iter().zip(x).map(|(w, v)| w * v).sum::<f32>())
        .collect()
}
