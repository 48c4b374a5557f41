//! Layers with explicit forward and backward passes.
//!
//! `forward` caches what `backward` needs and is used during training;
//! `infer` is the cache-free evaluation path. Gradients accumulate into
//! [`Param::grad`] until [`Param::zero_grad`] is called.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix1, Ix2, Ix4, IxDyn, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named tensor with its gradient. Non-trainable parameters (batch-norm running
/// statistics) are serialized with the model but skipped by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn v1(&self) -> ndarray::ArrayView1<'_, f64> {
        self.value.view().into_dimensionality::<Ix1>().expect("1-d parameter")
    }

    fn v2(&self) -> ArrayView2<'_, f64> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-d parameter")
    }
}

/// Depth-first traversal over parameters in a fixed order.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}

pub fn relu2(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn relu4(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward<D: ndarray::Dimension>(grad: &mut ndarray::Array<f64, D>, output: &ndarray::Array<f64, D>) {
    Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), he_normal(&[fan_in, fan_out], fan_in, rng)),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[fan_out]))),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn infer(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.v2()) + &self.bias.v1()
    }

    pub fn forward(&mut self, x: Array2<f64>) -> Array2<f64> {
        let y = self.infer(x.view());
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        let x = self.input.take().expect("Linear::backward without forward");
        let dw = x.t().dot(grad);
        let db = grad.sum_axis(Axis(0));
        self.weight.grad.scaled_add(1.0, &dw.into_dyn());
        self.bias.grad.scaled_add(1.0, &db.into_dyn());
        grad.dot(&self.weight.v2().t())
    }
}

impl Parameterized for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Square-kernel 2-D convolution without bias, computed with im2col.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Array2<f64>, [usize; 4])>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            weight: Param::new(format!("{name}.weight"), he_normal(&[c_out, c_in, kernel, kernel], fan_in, rng)),
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let s = self.weight.value.shape();
        self.weight
            .value
            .view()
            .into_shape_with_order((s[0], s[1] * s[2] * s[3]))
            .expect("contiguous conv weight")
    }

    fn im2col(&self, x: ArrayView4<'_, f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let cols_w = c * k * k;
        let mut cols = Array2::<f64>::zeros((n * ho * wo, cols_w));
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let out = cols.as_slice_mut().expect("standard layout");
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * cols_w;
                    for ch in 0..c {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = ((b * c + ch) * h + iy as usize) * w;
                            let dst = row + (ch * k + ky) * k;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    out[dst + kx] = xs[src + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, dims: [usize; 4]) -> Array4<f64> {
        let [n, c, h, w] = dims;
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let cols_w = c * k * k;
        let mut x = Array4::<f64>::zeros((n, c, h, w));
        let xs = x.as_slice_mut().expect("standard layout");
        let cs = cols.as_slice().expect("standard layout");
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * cols_w;
                    for ch in 0..c {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = ((b * c + ch) * h + iy as usize) * w;
                            let src = row + (ch * k + ky) * k;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    xs[dst + ix as usize] += cs[src + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn apply(&self, cols: &Array2<f64>, n: usize, ho: usize, wo: usize) -> Array4<f64> {
        let c_out = self.weight.value.shape()[0];
        let y = cols.dot(&self.weight_matrix().t());
        y.into_shape_with_order((n, ho, wo, c_out))
            .expect("conv output reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned()
    }

    pub fn infer(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let cols = self.im2col(x);
        self.apply(&cols, n, self.out_size(h), self.out_size(w))
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let cols = self.im2col(x.view());
        let y = self.apply(&cols, n, self.out_size(h), self.out_size(w));
        self.cache = Some((cols, [n, c, h, w]));
        y
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let (cols, dims) = self.cache.take().expect("Conv2d::backward without forward");
        let (n, c_out, ho, wo) = grad.dim();
        let g = grad
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * ho * wo, c_out))
            .expect("conv grad reshape");
        let dw = g.t().dot(&cols);
        let wshape = self.weight.value.raw_dim();
        self.weight
            .grad
            .scaled_add(1.0, &dw.into_shape_with_order(wshape).expect("conv weight grad reshape"));
        let dcols = g.dot(&self.weight_matrix());
        self.col2im(&dcols, dims)
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
    }
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f64,
    eps: f64,
    cache: Option<(Array4<f64>, Array1<f64>)>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        let ones = || ArrayD::from_elem(IxDyn(&[channels]), 1.0);
        let zeros = || ArrayD::zeros(IxDyn(&[channels]));
        Self {
            gamma: Param::new(format!("{name}.gamma"), ones()),
            beta: Param::new(format!("{name}.beta"), zeros()),
            running_mean: Param::buffer(format!("{name}.running_mean"), zeros()),
            running_var: Param::buffer(format!("{name}.running_var"), ones()),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn infer(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        let mut y = x.to_owned();
        let (g, b) = (self.gamma.v1(), self.beta.v1());
        let (rm, rv) = (self.running_mean.v1(), self.running_var.v1());
        for (c, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
            let scale = g[c] / (rv[c] + self.eps).sqrt();
            let shift = b[c] - rm[c] * scale;
            ch.mapv_inplace(|v| v * scale + shift);
        }
        y
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(c);
        let mut y = Array4::zeros(x.raw_dim());
        for ch in 0..c {
            let xc = x.index_axis(Axis(1), ch);
            let mean = xc.sum() / count;
            let var = xc.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / count;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (self.gamma.v1()[ch], self.beta.v1()[ch]);
            let mut xh = xhat.index_axis_mut(Axis(1), ch);
            xh.mapv_inplace(|v| (v - mean) * istd);
            Zip::from(y.index_axis_mut(Axis(1), ch)).and(&xh).for_each(|o, &v| *o = g * v + b);
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean.value[ch] = (1.0 - m) * self.running_mean.value[ch] + m * mean;
            self.running_var.value[ch] = (1.0 - m) * self.running_var.value[ch] + m * unbiased;
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let (xhat, inv_std) = self.cache.take().expect("BatchNorm2d::backward without forward");
        let (n, c, h, w) = grad.dim();
        let count = (n * h * w) as f64;
        let mut dx = Array4::zeros(grad.raw_dim());
        for ch in 0..c {
            let g = grad.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let sum_g = g.sum();
            let sum_gx = Zip::from(&g).and(&xh).fold(0.0, |acc, &a, &b| acc + a * b);
            self.gamma.grad[ch] += sum_gx;
            self.beta.grad[ch] += sum_g;
            let k = self.gamma.v1()[ch] * inv_std[ch] / count;
            Zip::from(dx.index_axis_mut(Axis(1), ch))
                .and(&g)
                .and(&xh)
                .for_each(|d, &gi, &xi| *d = k * (count * gi - sum_g - xi * sum_gx));
        }
        dx
    }
}

impl Parameterized for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

pub fn as4(x: &ArrayD<f64>) -> Option<ArrayView4<'_, f64>> {
    x.view().into_dimensionality::<Ix4>().ok()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `d(Σ y ⊙ r)/dθ` for every entry of `param`.
    pub(crate) fn fd_check<F>(mut loss: F, params: &mut [&mut ArrayD<f64>], analytic: &[ArrayD<f64>], tol: f64)
    where
        F: FnMut(&[&mut ArrayD<f64>]) -> f64,
    {
        let h = 1e-5;
        for (pi, expected) in analytic.iter().enumerate() {
            for idx in 0..expected.len() {
                let orig = params[pi].as_slice().unwrap()[idx];
                params[pi].as_slice_mut().unwrap()[idx] = orig + h;
                let up = loss(params);
                params[pi].as_slice_mut().unwrap()[idx] = orig - h;
                let down = loss(params);
                params[pi].as_slice_mut().unwrap()[idx] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = expected.as_slice().unwrap()[idx];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < tol, "param {pi} entry {idx}: numeric {num} vs analytic {ana}");
            }
        }
    }

    fn probe<Sh: ndarray::ShapeBuilder>(shape: Sh, rng: &mut ChaCha8Rng) -> Array<f64, Sh::Dim> {
        Array::from_shape_simple_fn(shape, || rng.random::<f64>() - 0.5)
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = Linear::new("l", 4, 3, &mut rng);
        let x = probe((5, 4), &mut rng);
        let r = probe((5, 3), &mut rng);
        layer.forward(x.clone());
        let dx = layer.backward(&r);
        let analytic = vec![layer.weight.grad.clone(), layer.bias.grad.clone(), dx.into_dyn()];
        let mut w = layer.weight.value.clone();
        let mut b = layer.bias.value.clone();
        let mut xd = x.into_dyn();
        let shape = layer.clone();
        fd_check(
            |p| {
                let mut l = shape.clone();
                l.weight.value = p[0].clone();
                l.bias.value = p[1].clone();
                let y = l.infer(p[2].view().into_dimensionality::<Ix2>().unwrap());
                (&y * &r).sum()
            },
            &mut [&mut w, &mut b, &mut xd],
            &analytic,
            1e-6,
        );
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1)] {
            let mut conv = Conv2d::new("c", 2, 3, k, stride, pad, &mut rng);
            let x = probe((2, 2, 5, 5), &mut rng);
            let y = conv.forward(&x);
            let r = probe(y.raw_dim(), &mut rng);
            let dx = conv.backward(&r);
            let analytic = vec![conv.weight.grad.clone(), dx.into_dyn()];
            let mut w = conv.weight.value.clone();
            let mut xd = x.into_dyn();
            let base = conv.clone();
            fd_check(
                |p| {
                    let mut c = base.clone();
                    c.weight.value = p[0].clone();
                    (&c.infer(as4(p[1]).unwrap()) * &r).sum()
                },
                &mut [&mut w, &mut xd],
                &analytic,
                1e-6,
            );
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = Conv2d::new("c", 2, 2, 3, 2, 1, &mut rng);
        let x = probe((1, 2, 5, 5), &mut rng);
        let y = conv.infer(x.view());
        let w = conv.weight.value.view().into_dimensionality::<Ix4>().unwrap();
        for co in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w[[co, ci, ky, kx]] * x[[0, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[0, co, oy, ox]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.gamma.value = probe(IxDyn(&[3]), &mut rng) + 1.0;
        bn.beta.value = probe(IxDyn(&[3]), &mut rng);
        let x = probe((4, 3, 2, 2), &mut rng);
        let r = probe((4, 3, 2, 2), &mut rng);
        let base = bn.clone();
        bn.forward(&x);
        let dx = bn.backward(&r);
        let analytic = vec![bn.gamma.grad.clone(), bn.beta.grad.clone(), dx.into_dyn()];
        let mut g = base.gamma.value.clone();
        let mut b = base.beta.value.clone();
        let mut xd = x.into_dyn();
        fd_check(
            |p| {
                let mut l = base.clone();
                l.gamma.value = p[0].clone();
                l.beta.value = p[1].clone();
                let x4 = as4(p[2]).unwrap().to_owned();
                (&l.forward(&x4) * &r).sum()
            },
            &mut [&mut g, &mut b, &mut xd],
            &analytic,
            1e-5,
        );
    }

    #[test]
    fn batchnorm_running_stats_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = probe((8, 1, 3, 3), &mut rng) * 2.0 + 3.0;
        for _ in 0..200 {
            bn.forward(&x);
        }
        // the running variance is unbiased, so eval output is train output scaled by sqrt((n-1)/n)
        let train = bn.forward(&x) * (71.0f64 / 72.0).sqrt();
        let eval = bn.infer(x.view());
        let diff = (&train - &eval).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-6, "eval and train outputs differ by {diff}");
    }
}
