use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

/// A stack of feature maps stored as `channels x (height * width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap {
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

impl Fmap {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: Array2::zeros((c, h * w)),
        }
    }

    fn relu_in_place(&mut self) {
        self.data.mapv_inplace(|v| v.max(0.0));
    }
}

/// Zeroes `grad` wherever `out` (a ReLU output) is not positive.
pub(crate) fn relu_backward(grad: &mut Array2<f64>, out: &Array2<f64>) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

fn out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfolds `x` into a `(c * k * k) x (oh * ow)` patch matrix, rows ordered
/// by (channel, ky, kx).
pub(crate) fn im2col(x: &Fmap, k: usize, stride: usize, pad: usize) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = (x.channels(), x.h, x.w);
    let (oh, ow) = (out_len(h, k, stride, pad), out_len(w, k, stride, pad));
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    let src = x.data.as_slice().expect("standard layout");
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let mut row = cols.row_mut((ch * k + ky) * k + kx);
                let dst = row.as_slice_mut().expect("standard layout");
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = line[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto a `c x h x w` map.
pub(crate) fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Fmap {
    let (oh, ow) = (out_len(h, k, stride, pad), out_len(w, k, stride, pad));
    let mut out = Fmap::zeros(c, h, w);
    let dst = out.data.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ch * k + ky) * k + kx);
                let src = row.as_slice().expect("standard layout");
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Row-major `out x (in * kernel * kernel)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) struct ConvCache {
    cols: Array2<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn he<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive sd");
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_channels],
        }
    }

    pub(crate) fn check(&self) -> Result<(), String> {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err("conv dimensions must be positive".into());
        }
        if self.weight.len() != self.out_channels * fan_in || self.bias.len() != self.out_channels {
            return Err(format!(
                "conv {}->{} k{} has {} weights and {} biases",
                self.in_channels,
                self.out_channels,
                self.kernel,
                self.weight.len(),
                self.bias.len()
            ));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err("non-finite conv parameter".into());
        }
        Ok(())
    }

    fn weight_view(&self) -> ArrayView2<'_, f64> {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        ArrayView2::from_shape((self.out_channels, fan_in), &self.weight).expect("checked shape")
    }

    pub(crate) fn forward(&self, x: &Fmap) -> (Fmap, ConvCache) {
        debug_assert_eq!(x.channels(), self.in_channels);
        let (cols, oh, ow) = im2col(x, self.kernel, self.stride, self.padding);
        let mut out = self.weight_view().dot(&cols);
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(&self.bias) {
            row += b;
        }
        (
            Fmap {
                h: oh,
                w: ow,
                data: out,
            },
            ConvCache {
                cols,
                in_h: x.h,
                in_w: x.w,
            },
        )
    }

    /// Returns `(d weight, d bias, d input)`; the input gradient is only
    /// computed when asked for.
    pub(crate) fn backward(
        &self,
        cache: &ConvCache,
        dout: &Array2<f64>,
        want_input: bool,
    ) -> (Vec<f64>, Vec<f64>, Option<Fmap>) {
        let dw = dout.dot(&cache.cols.t());
        let db = dout.sum_axis(Axis(1));
        let dx = want_input.then(|| {
            let dcols = self.weight_view().t().dot(dout);
            col2im(
                &dcols,
                self.in_channels,
                cache.in_h,
                cache.in_w,
                self.kernel,
                self.stride,
                self.padding,
            )
        });
        (dw.into_raw_vec_and_offset().0, db.to_vec(), dx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `out x in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng>(rng: &mut R, in_features: usize, out_features: usize) -> Self {
        let limit = (6.0 / (in_features + out_features) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        Self {
            in_features,
            out_features,
            weight: (0..in_features * out_features).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_features],
        }
    }

    pub(crate) fn check(&self) -> Result<(), String> {
        if self.in_features == 0 || self.out_features == 0 {
            return Err("linear dimensions must be positive".into());
        }
        if self.weight.len() != self.in_features * self.out_features
            || self.bias.len() != self.out_features
        {
            return Err("linear parameter count does not match its shape".into());
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err("non-finite linear parameter".into());
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_features)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Returns `(d weight, d bias, d input)`.
    pub(crate) fn backward(&self, x: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dw = Vec::with_capacity(self.weight.len());
        let mut dx = vec![0.0; self.in_features];
        for (row, &g) in self.weight.chunks_exact(self.in_features).zip(dout) {
            dw.extend(x.iter().map(|v| g * v));
            for (d, w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
        (dw, dout.to_vec(), dx)
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub(crate) fn maxpool2(x: &Fmap) -> (Fmap, Vec<usize>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let c = x.channels();
    let mut out = Fmap::zeros(c, oh, ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = x.data.row(ch);
        let mut dst = out.data.row_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * x.w + 2 * ox + dx;
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                dst[oy * ow + ox] = plane[best];
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool2_backward(dout: &Fmap, argmax: &[usize], in_h: usize, in_w: usize) -> Fmap {
    let c = dout.channels();
    let mut dx = Fmap::zeros(c, in_h, in_w);
    let per = dout.h * dout.w;
    for ch in 0..c {
        let g = dout.data.row(ch);
        let mut dst = dx.data.row_mut(ch);
        for (i, &src) in argmax[ch * per..(ch + 1) * per].iter().enumerate() {
            dst[src] += g[i];
        }
    }
    dx
}

/// Two 3x3 convolutions with a skip connection; the skip is a strided 1x1
/// projection when the shape changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub shortcut: Option<Conv2d>,
}

pub(crate) struct ResidualCache {
    a: ConvCache,
    h: Array2<f64>,
    b: ConvCache,
    s: Option<ConvCache>,
    in_h: usize,
    in_w: usize,
    pub(crate) out: Fmap,
}

impl ResidualBlock {
    pub fn he<R: Rng>(rng: &mut R, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let conv_a = Conv2d::he(rng, in_channels, out_channels, 3, stride, 1);
        let mut conv_b = Conv2d::he(rng, out_channels, out_channels, 3, 1, 1);
        // Keeps activation variance roughly flat through the residual sum.
        conv_b.weight.iter_mut().for_each(|w| *w *= 0.5);
        let shortcut = (stride != 1 || in_channels != out_channels)
            .then(|| Conv2d::he(rng, in_channels, out_channels, 1, stride, 0));
        Self {
            conv_a,
            conv_b,
            shortcut,
        }
    }

    pub(crate) fn check(&self) -> Result<(), String> {
        self.conv_a.check()?;
        self.conv_b.check()?;
        if self.conv_b.in_channels != self.conv_a.out_channels
            || self.conv_b.stride != 1
            || self.conv_a.kernel != 3
            || self.conv_b.kernel != 3
        {
            return Err("residual convs do not chain".into());
        }
        match &self.shortcut {
            Some(s) => {
                s.check()?;
                if s.in_channels != self.conv_a.in_channels
                    || s.out_channels != self.conv_b.out_channels
                    || s.stride != self.conv_a.stride
                    || s.kernel != 1
                {
                    return Err("shortcut does not match the residual path".into());
                }
            }
            None => {
                if self.conv_a.stride != 1 || self.conv_a.in_channels != self.conv_b.out_channels {
                    return Err("identity shortcut needs matching shapes".into());
                }
            }
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.conv_a.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv_b.out_channels
    }

    pub(crate) fn params(&self) -> Vec<&Vec<f64>> {
        let mut p = vec![
            &self.conv_a.weight,
            &self.conv_a.bias,
            &self.conv_b.weight,
            &self.conv_b.bias,
        ];
        if let Some(s) = &self.shortcut {
            p.extend([&s.weight, &s.bias]);
        }
        p
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut p = vec![
            &mut self.conv_a.weight,
            &mut self.conv_a.bias,
            &mut self.conv_b.weight,
            &mut self.conv_b.bias,
        ];
        if let Some(s) = &mut self.shortcut {
            p.extend([&mut s.weight, &mut s.bias]);
        }
        p
    }

    pub(crate) fn forward(&self, x: &Fmap) -> ResidualCache {
        let (mut h, a) = self.conv_a.forward(x);
        h.relu_in_place();
        let (mut out, b) = self.conv_b.forward(&h);
        let s = match &self.shortcut {
            Some(conv) => {
                let (proj, cache) = conv.forward(x);
                out.data += &proj.data;
                Some(cache)
            }
            None => {
                out.data += &x.data;
                None
            }
        };
        out.relu_in_place();
        ResidualCache {
            a,
            h: h.data,
            b,
            s,
            in_h: x.h,
            in_w: x.w,
            out,
        }
    }

    /// Parameter gradients in [`params`](Self::params) order, plus the
    /// input gradient when asked for.
    pub(crate) fn backward(
        &self,
        cache: &ResidualCache,
        dout: &Array2<f64>,
        want_input: bool,
    ) -> (Vec<Vec<f64>>, Option<Fmap>) {
        let mut dsum = dout.clone();
        relu_backward(&mut dsum, &cache.out.data);
        let (dwb, dbb, dh) = self.conv_b.backward(&cache.b, &dsum, true);
        let mut dh = dh.expect("requested").data;
        relu_backward(&mut dh, &cache.h);
        let (dwa, dba, dx_a) = self.conv_a.backward(&cache.a, &dh, want_input);
        let mut grads = vec![dwa, dba, dwb, dbb];
        let dx_s = match (&self.shortcut, &cache.s) {
            (Some(conv), Some(sc)) => {
                let (dws, dbs, dx) = conv.backward(sc, &dsum, want_input);
                grads.extend([dws, dbs]);
                dx.map(|f| f.data)
            }
            _ => want_input.then_some(dsum),
        };
        let dx = dx_a.map(|mut f| {
            f.data += &dx_s.expect("requested");
            debug_assert_eq!((f.h, f.w), (cache.in_h, cache.in_w));
            f
        });
        (grads, dx)
    }
}

/// Global average pool over each channel.
pub(crate) fn global_avg_pool(x: &Fmap) -> Vec<f64> {
    let n = (x.h * x.w) as f64;
    x.data.rows().into_iter().map(|r| r.sum() / n).collect()
}

pub(crate) fn global_avg_pool_backward(dpool: &[f64], h: usize, w: usize) -> Array2<f64> {
    let n = (h * w) as f64;
    let mut out = Array2::zeros((dpool.len(), h * w));
    for (mut row, &g) in out.axis_iter_mut(Axis(0)).zip(dpool) {
        row.fill(g / n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Fmap {
        Fmap {
            h,
            w,
            data: Array2::from_shape_fn((c, h * w), |_| rng.random_range(-1.0..1.0)),
        }
    }

    /// Direct nested-loop convolution.
    fn conv_oracle(conv: &Conv2d, x: &Fmap) -> Fmap {
        let k = conv.kernel as isize;
        let (oh, ow) = (
            out_len(x.h, conv.kernel, conv.stride, conv.padding),
            out_len(x.w, conv.kernel, conv.stride, conv.padding),
        );
        let mut out = Fmap::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o];
                    for c in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride) as isize + ky - conv.padding as isize;
                                let ix = (ox * conv.stride) as isize + kx - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wi = ((o * conv.in_channels + c) * conv.kernel + ky as usize)
                                    * conv.kernel
                                    + kx as usize;
                                acc += conv.weight[wi] * x.data[[c, iy as usize * x.w + ix as usize]];
                            }
                        }
                    }
                    out.data[[o, oy * ow + ox]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 2)] {
            let conv = Conv2d::he(&mut rng, 3, 4, k, stride, pad);
            let x = rand_map(&mut rng, 3, 9, 7);
            let (got, _) = conv.forward(&x);
            let want = conv_oracle(&conv, &x);
            assert_eq!((got.h, got.w), (want.h, want.w));
            for (a, b) in got.data.iter().zip(want.data.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Sum of `probe * f(x)`; gradients of this scalar are checked against
    /// central differences.
    fn probe_loss(f: &Fmap, probe: &Array2<f64>) -> f64 {
        (&f.data * probe).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::he(&mut rng, 2, 3, 3, 2, 1);
        let x = rand_map(&mut rng, 2, 7, 6);
        let (out, cache) = conv.forward(&x);
        let probe = Array2::from_shape_fn(out.data.raw_dim(), |_| rng.random_range(-1.0..1.0));
        let (dw, db, dx) = conv.backward(&cache, &probe, true);
        let dx = dx.unwrap();
        let eps = 1e-6;
        for i in [0, 5, 17, 40] {
            let mut p = conv.clone();
            p.weight[i] += eps;
            let mut m = conv.clone();
            m.weight[i] -= eps;
            let fd = (probe_loss(&p.forward(&x).0, &probe) - probe_loss(&m.forward(&x).0, &probe)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-6, "weight {i}: {fd} vs {}", dw[i]);
        }
        let mut p = conv.clone();
        p.bias[1] += eps;
        let fd = (probe_loss(&p.forward(&x).0, &probe) - probe_loss(&out, &probe)) / eps;
        assert!((fd - db[1]).abs() < 1e-5);
        for i in [0, 13, 41, 83] {
            let (c, j) = (i / 42, i % 42);
            let mut xp = x.clone();
            xp.data[[c, j]] += eps;
            let mut xm = x.clone();
            xm.data[[c, j]] -= eps;
            let fd = (probe_loss(&conv.forward(&xp).0, &probe) - probe_loss(&conv.forward(&xm).0, &probe)) / (2.0 * eps);
            assert!((fd - dx.data[[c, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn residual_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (cin, cout, stride) in [(2, 2, 1), (2, 4, 2)] {
            let block = ResidualBlock::he(&mut rng, cin, cout, stride);
            let x = rand_map(&mut rng, cin, 6, 6);
            let cache = block.forward(&x);
            let probe = Array2::from_shape_fn(cache.out.data.raw_dim(), |_| rng.random_range(-1.0..1.0));
            let (grads, dx) = block.backward(&cache, &probe, true);
            let dx = dx.unwrap();
            let f = |b: &ResidualBlock, x: &Fmap| probe_loss(&b.forward(x).out, &probe);
            let eps = 1e-6;
            for (t, grad) in grads.iter().enumerate() {
                let i = grad.len() / 2;
                let mut p = block.clone();
                p.params_mut()[t][i] += eps;
                let mut m = block.clone();
                m.params_mut()[t][i] -= eps;
                let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * eps);
                assert!((fd - grad[i]).abs() < 1e-5, "tensor {t}: {fd} vs {}", grad[i]);
            }
            for j in [0, 7, 20] {
                let mut xp = x.clone();
                xp.data[[1, j]] += eps;
                let mut xm = x.clone();
                xm.data[[1, j]] -= eps;
                let fd = (f(&block, &xp) - f(&block, &xm)) / (2.0 * eps);
                assert!((fd - dx.data[[1, j]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Fmap {
            h: 2,
            w: 4,
            data: Array2::from_shape_vec((1, 8), vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap(),
        };
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data.as_slice().unwrap(), &[5.0, 9.0]);
        let g = Fmap {
            h: 1,
            w: 2,
            data: Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap(),
        };
        let dx = maxpool2_backward(&g, &idx, 2, 4);
        assert_eq!(dx.data.as_slice().unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn linear_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = Linear::xavier(&mut rng, 3, 2);
        let x = [0.5, -1.0, 2.0];
        let (dw, db, dx) = l.backward(&x, &[1.0, -2.0]);
        assert_eq!(db, vec![1.0, -2.0]);
        assert_eq!(dw[4], -2.0 * x[1]);
        assert!((dx[2] - (l.weight[2] - 2.0 * l.weight[5])).abs() < 1e-15);
    }
}
