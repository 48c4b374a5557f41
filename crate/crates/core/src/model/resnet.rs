//! 18-layer residual network in the CIFAR layout: 3×3 stem without max-pooling,
//! four stages of two basic blocks at widths `w, 2w, 4w, 8w`, global average
//! pooling, then a two-layer projection head.

use ndarray::{Array2, Array4, ArrayView4, Axis};
use rand::Rng;

use super::layers::{relu4, relu_backward, BatchNorm2d, Conv2d, Linear, Param, Parameterized};

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    hidden: Option<Array4<f64>>,
    output: Option<Array4<f64>>,
}

impl BasicBlock {
    fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(&format!("{name}.shortcut.conv"), c_in, c_out, 1, stride, 0, rng),
                BatchNorm2d::new(&format!("{name}.shortcut.bn"), c_out),
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), c_out),
            conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), c_out),
            shortcut,
            hidden: None,
            output: None,
        }
    }

    fn infer(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        let mut h = self.bn1.infer(self.conv1.infer(x).view());
        relu4(&mut h);
        let mut out = self.bn2.infer(self.conv2.infer(h.view()).view());
        match &self.shortcut {
            Some((conv, bn)) => out += &bn.infer(conv.infer(x).view()),
            None => out += &x,
        }
        relu4(&mut out);
        out
    }

    fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let mut h = self.conv1.forward(x);
        h = self.bn1.forward(&h);
        relu4(&mut h);
        let mut out = self.conv2.forward(&h);
        out = self.bn2.forward(&out);
        self.hidden = Some(h);
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x);
                out += &bn.forward(&s);
            }
            None => out += x,
        }
        relu4(&mut out);
        self.output = Some(out.clone());
        out
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let mut g = grad.clone();
        relu_backward(&mut g, &self.output.take().expect("block output cache"));
        let mut gh = self.conv2.backward(&self.bn2.backward(&g));
        relu_backward(&mut gh, &self.hidden.take().expect("block hidden cache"));
        let mut dx = self.conv1.backward(&self.bn1.backward(&gh));
        match &mut self.shortcut {
            Some((conv, bn)) => dx += &conv.backward(&bn.backward(&g)),
            None => dx += &g,
        }
        dx
    }
}

impl Parameterized for BasicBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some((c, b)) = &self.shortcut {
            c.visit(f);
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_mut(f);
            b.visit_mut(f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResNet18 {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    head1: Linear,
    head2: Linear,
    stem_out: Option<Array4<f64>>,
    pooled_hw: Option<(usize, usize, usize)>,
    head_hidden: Option<Array2<f64>>,
}

impl ResNet18 {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, width: usize, out: usize, rng: &mut R) -> Self {
        let stem_conv = Conv2d::new("stem.conv", in_channels, width, 3, 1, 1, rng);
        let stem_bn = BatchNorm2d::new("stem.bn", width);
        let mut blocks = Vec::new();
        let mut c_in = width;
        for (stage, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
            let c_out = width * mult;
            let stride = if stage == 0 { 1 } else { 2 };
            blocks.push(BasicBlock::new(&format!("layer{}.0", stage + 1), c_in, c_out, stride, rng));
            blocks.push(BasicBlock::new(&format!("layer{}.1", stage + 1), c_out, c_out, 1, rng));
            c_in = c_out;
        }
        Self {
            stem_conv,
            stem_bn,
            blocks,
            head1: Linear::new("head.0", c_in, c_in, rng),
            head2: Linear::new("head.1", c_in, out, rng),
            stem_out: None,
            pooled_hw: None,
            head_hidden: None,
        }
    }

    fn pool(x: &Array4<f64>) -> Array2<f64> {
        let (_, _, h, w) = x.dim();
        x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
    }

    pub fn infer(&self, x: ArrayView4<'_, f64>) -> Array2<f64> {
        let mut h = self.stem_bn.infer(self.stem_conv.infer(x).view());
        relu4(&mut h);
        for b in &self.blocks {
            h = b.infer(h.view());
        }
        let mut f = self.head1.infer(Self::pool(&h).view());
        f.mapv_inplace(|v| v.max(0.0));
        self.head2.infer(f.view())
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array2<f64> {
        let mut h = self.stem_conv.forward(x);
        h = self.stem_bn.forward(&h);
        relu4(&mut h);
        self.stem_out = Some(h.clone());
        for b in &mut self.blocks {
            h = b.forward(&h);
        }
        let (_, c, hh, ww) = h.dim();
        self.pooled_hw = Some((c, hh, ww));
        let mut f = self.head1.forward(Self::pool(&h));
        f.mapv_inplace(|v| v.max(0.0));
        self.head_hidden = Some(f.clone());
        self.head2.forward(f)
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array4<f64> {
        let mut g = self.head2.backward(grad);
        relu_backward(&mut g, &self.head_hidden.take().expect("head cache"));
        let gp = self.head1.backward(&g);
        let (c, hh, ww) = self.pooled_hw.take().expect("pool cache");
        let n = gp.nrows();
        let scale = 1.0 / (hh * ww) as f64;
        let mut gx = Array4::from_shape_fn((n, c, hh, ww), |(b, ch, _, _)| gp[[b, ch]] * scale);
        for b in self.blocks.iter_mut().rev() {
            gx = b.backward(&gx);
        }
        relu_backward(&mut gx, &self.stem_out.take().expect("stem cache"));
        let g = self.stem_bn.backward(&gx);
        self.stem_conv.backward(&g)
    }
}

impl Parameterized for ResNet18 {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.stem_conv.visit(f);
        self.stem_bn.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.head1.visit(f);
        self.head2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem_conv.visit_mut(f);
        self.stem_bn.visit_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.head1.visit_mut(f);
        self.head2.visit_mut(f);
    }
}
