use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Axis};

use crate::Scalar;

/// A batch of feature maps, `C × (N·H·W)` in standard layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Act<F> {
    pub data: Array2<F>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl<F: Scalar> Act<F> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array2::zeros((c, n * h * w)),
            n,
            h,
            w,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    /// Stacks `C × H × W` maps into one activation.
    pub fn from_batch(batch: &[&Array3<F>]) -> Self {
        let (c, h, w) = batch[0].dim();
        let n = batch.len();
        let mut out = Self::zeros(c, n, h, w);
        let hw = h * w;
        for (b, img) in batch.iter().enumerate() {
            for ch in 0..c {
                let src = img.index_axis(Axis(0), ch);
                let mut dst = out.data.row_mut(ch);
                let mut dst = dst.slice_mut(ndarray::s![b * hw..(b + 1) * hw]);
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d = *s;
                }
            }
        }
        out
    }

    /// Splits back into `C × H × W` maps.
    pub fn to_batch(&self) -> Vec<Array3<F>> {
        let c = self.channels();
        let hw = self.h * self.w;
        (0..self.n)
            .map(|b| {
                let mut img = Array3::zeros((c, self.h, self.w));
                for ch in 0..c {
                    let src = self.data.row(ch);
                    let src = src.slice(ndarray::s![b * hw..(b + 1) * hw]);
                    for (d, s) in img.index_axis_mut(Axis(0), ch).iter_mut().zip(src.iter()) {
                        *d = *s;
                    }
                }
                img
            })
            .collect()
    }

    fn same_geometry(&self, data: Array2<F>) -> Self {
        Self {
            data,
            n: self.n,
            h: self.h,
            w: self.w,
        }
    }
}

/// Copies shifted rows of `x` into the patch matrix.
fn im2col<F: Scalar>(x: &Act<F>, k: usize) -> Array2<F> {
    let (cin, n, h, w) = (x.channels(), x.n, x.h, x.w);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut col = Array2::zeros((cin * k * k, n * hw));
    let xs = x.data.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    for c in 0..cin {
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let out_row = &mut cs[row * n * hw..(row + 1) * n * hw];
                let off = dx as isize - pad;
                let span = w - off.unsigned_abs();
                for b in 0..n {
                    for y in 0..h {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &xs[c * n * hw + b * hw + sy as usize * w..][..w];
                        let dst = &mut out_row[b * hw + y * w..][..w];
                        if off >= 0 {
                            let o = off as usize;
                            dst[..span].copy_from_slice(&src[o..o + span]);
                        } else {
                            let o = (-off) as usize;
                            dst[o..o + span].copy_from_slice(&src[..span]);
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im<F: Scalar>(col: &Array2<F>, cin: usize, n: usize, h: usize, w: usize, k: usize) -> Array2<F> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut x = Array2::zeros((cin, n * hw));
    let xs = x.as_slice_mut().expect("standard layout");
    let cs = col.as_slice().expect("standard layout");
    for c in 0..cin {
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let in_row = &cs[row * n * hw..(row + 1) * n * hw];
                let off = dx as isize - pad;
                let span = w - off.unsigned_abs();
                for b in 0..n {
                    for y in 0..h {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut xs[c * n * hw + b * hw + sy as usize * w..][..w];
                        let src = &in_row[b * hw + y * w..][..w];
                        let (d, s) = if off >= 0 {
                            let o = off as usize;
                            (&mut dst[o..o + span], &src[..span])
                        } else {
                            let o = (-off) as usize;
                            (&mut dst[..span], &src[o..o + span])
                        };
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += *b;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Square convolution with stride 1 and "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv<F> {
    pub k: usize,
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
    pub grad_weight: Array2<F>,
    pub grad_bias: Option<Array1<F>>,
    cache: Option<(Array2<F>, usize, usize, usize, usize)>,
}

impl<F: Scalar> Conv<F> {
    pub fn new(cin: usize, cout: usize, k: usize, with_bias: bool) -> Self {
        Self {
            k,
            weight: Array2::zeros((cout, cin * k * k)),
            bias: with_bias.then(|| Array1::zeros(cout)),
            grad_weight: Array2::zeros((cout, cin * k * k)),
            grad_bias: with_bias.then(|| Array1::zeros(cout)),
            cache: None,
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.ncols() / (self.k * self.k)
    }

    pub fn forward(&mut self, x: &Act<F>, record: bool) -> Act<F> {
        let col = if self.k == 1 { x.data.clone() } else { im2col(x, self.k) };
        let mut y = Array2::zeros((self.weight.nrows(), col.ncols()));
        general_mat_mul(F::one(), &self.weight, &col, F::zero(), &mut y);
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y.rows_mut().into_iter().zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        self.cache = record.then(|| (col, x.channels(), x.n, x.h, x.w));
        x.same_geometry(y)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Act<F>, need_input_grad: bool) -> Option<Act<F>> {
        let (col, cin, n, h, w) = self.cache.take().expect("conv backward without recorded forward");
        general_mat_mul(F::one(), &dy.data, &col.t(), F::one(), &mut self.grad_weight);
        if let Some(gb) = &mut self.grad_bias {
            for (g, row) in gb.iter_mut().zip(dy.data.rows()) {
                *g += row.sum();
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcol = Array2::zeros(col.dim());
        general_mat_mul(F::one(), &self.weight.t(), &dy.data, F::zero(), &mut dcol);
        let dx = if self.k == 1 { dcol } else { col2im(&dcol, cin, n, h, w, self.k) };
        Some(Act { data: dx, n, h, w })
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(F::zero());
        if let Some(g) = &mut self.grad_bias {
            g.fill(F::zero());
        }
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub grad_gamma: Array1<F>,
    pub grad_beta: Array1<F>,
    pub momentum: F,
    pub eps: F,
    cache: Option<(Array2<F>, Array1<F>, bool)>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            grad_gamma: Array1::zeros(c),
            grad_beta: Array1::zeros(c),
            momentum: F::lit(0.1),
            eps: F::lit(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Act<F>, train: bool, record: bool) -> Act<F> {
        let c = x.channels();
        let m = x.data.ncols();
        let mf = F::lit(m as f64);
        let mut inv_std = Array1::zeros(c);
        let mut y = Array2::zeros(x.data.dim());
        let mut xhat = if record { Array2::zeros(x.data.dim()) } else { Array2::zeros((0, 0)) };
        for ch in 0..c {
            let row = x.data.row(ch);
            let row = row.as_slice().expect("standard layout");
            let (mean, var) = if train {
                let mean = row.iter().fold(F::zero(), |a, &v| a + v) / mf;
                let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / mf;
                let unbiased = if m > 1 { var * mf / F::lit((m - 1) as f64) } else { var };
                let mo = self.momentum;
                self.running_mean[ch] = (F::one() - mo) * self.running_mean[ch] + mo * mean;
                self.running_var[ch] = (F::one() - mo) * self.running_var[ch] + mo * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let is = F::one() / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            let mut out = y.row_mut(ch);
            let out = out.as_slice_mut().expect("standard layout");
            if record {
                let mut xh = xhat.row_mut(ch);
                let xh = xh.as_slice_mut().expect("standard layout");
                for ((o, h), &v) in out.iter_mut().zip(xh.iter_mut()).zip(row) {
                    *h = (v - mean) * is;
                    *o = g * *h + b;
                }
            } else {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = g * ((v - mean) * is) + b;
                }
            }
        }
        self.cache = record.then_some((xhat, inv_std, train));
        x.same_geometry(y)
    }

    pub fn backward(&mut self, dy: &Act<F>) -> Act<F> {
        let (xhat, inv_std, train) = self.cache.take().expect("batchnorm backward without recorded forward");
        let c = dy.channels();
        let mf = F::lit(dy.data.ncols() as f64);
        let mut dx = Array2::zeros(dy.data.dim());
        for ch in 0..c {
            let dyr = dy.data.row(ch);
            let xr = xhat.row(ch);
            let sum_dy = dyr.sum();
            let sum_dy_xhat = dyr.iter().zip(xr.iter()).fold(F::zero(), |a, (&d, &x)| a + d * x);
            self.grad_gamma[ch] += sum_dy_xhat;
            self.grad_beta[ch] += sum_dy;
            let g = self.gamma[ch];
            let is = inv_std[ch];
            let mut out = dx.row_mut(ch);
            if train {
                let k = g * is / mf;
                for ((o, &d), &x) in out.iter_mut().zip(dyr.iter()).zip(xr.iter()) {
                    *o = k * (mf * d - sum_dy - x * sum_dy_xhat);
                }
            } else {
                for (o, &d) in out.iter_mut().zip(dyr.iter()) {
                    *o = g * is * d;
                }
            }
        }
        dy.same_geometry(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(F::zero());
        self.grad_beta.fill(F::zero());
    }
}

pub fn relu<F: Scalar>(x: &mut Act<F>) {
    x.data.mapv_inplace(|v| v.max(F::zero()));
}

/// Gradient of ReLU given its output.
pub fn relu_backward<F: Scalar>(dy: &mut Act<F>, out: &Act<F>) {
    ndarray::Zip::from(&mut dy.data).and(&out.data).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
}

/// 2×2 max pooling; returns the pooled map and the argmax offsets.
pub fn maxpool2<F: Scalar>(x: &Act<F>) -> (Act<F>, Vec<u8>) {
    let (c, n, h, w) = (x.channels(), x.n, x.h, x.w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Act::zeros(c, n, oh, ow);
    let mut arg = vec![0u8; c * n * oh * ow];
    let xs = x.data.as_slice().expect("standard layout");
    let os = out.data.as_slice_mut().expect("standard layout");
    for cb in 0..c * n {
        let src = &xs[cb * h * w..(cb + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * w + 2 * xx;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if cand[i] > cand[best] {
                        best = i;
                    }
                }
                let o = cb * oh * ow + y * ow + xx;
                os[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<F: Scalar>(dy: &Act<F>, arg: &[u8]) -> Act<F> {
    let (c, n, oh, ow) = (dy.channels(), dy.n, dy.h, dy.w);
    let (h, w) = (oh * 2, ow * 2);
    let mut dx = Act::zeros(c, n, h, w);
    let ds = dy.data.as_slice().expect("standard layout");
    let xs = dx.data.as_slice_mut().expect("standard layout");
    for cb in 0..c * n {
        for y in 0..oh {
            for xx in 0..ow {
                let o = cb * oh * ow + y * ow + xx;
                let a = arg[o] as usize;
                let idx = cb * h * w + (2 * y + a / 2) * w + 2 * xx + a % 2;
                xs[idx] += ds[o];
            }
        }
    }
    dx
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample2<F: Scalar>(x: &Act<F>) -> Act<F> {
    let (c, n, h, w) = (x.channels(), x.n, x.h, x.w);
    let (uh, uw) = (h * 2, w * 2);
    let mut out = Act::zeros(c, n, uh, uw);
    let xs = x.data.as_slice().expect("standard layout");
    let os = out.data.as_slice_mut().expect("standard layout");
    for cb in 0..c * n {
        for y in 0..uh {
            let src = &xs[cb * h * w + (y / 2) * w..][..w];
            let dst = &mut os[cb * uh * uw + y * uw..][..uw];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[i / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Scalar>(dy: &Act<F>) -> Act<F> {
    let (c, n, uh, uw) = (dy.channels(), dy.n, dy.h, dy.w);
    let (h, w) = (uh / 2, uw / 2);
    let mut dx = Act::zeros(c, n, h, w);
    let ds = dy.data.as_slice().expect("standard layout");
    let xs = dx.data.as_slice_mut().expect("standard layout");
    for cb in 0..c * n {
        for y in 0..uh {
            let src = &ds[cb * uh * uw + y * uw..][..uw];
            let dst = &mut xs[cb * h * w + (y / 2) * w..][..w];
            for (i, s) in src.iter().enumerate() {
                dst[i / 2] += *s;
            }
        }
    }
    dx
}
