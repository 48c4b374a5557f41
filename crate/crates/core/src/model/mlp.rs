use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::layers::{relu2, relu_backward, Linear, Param, Parameterized};

/// Fully connected backbone (`Linear + ReLU` per hidden width) followed by a
/// two-layer projection head of the same width. Without hidden layers the
/// network degenerates to a single linear map.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    /// ReLU outputs of every layer except the last, kept for backward.
    activations: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], out: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(&format!("backbone.{i}"), width, h, rng));
            width = h;
        }
        if hidden.is_empty() {
            layers.push(Linear::new("head.0", width, out, rng));
        } else {
            layers.push(Linear::new("head.0", width, width, rng));
            layers.push(Linear::new("head.1", width, out, rng));
        }
        Self {
            layers,
            activations: Vec::new(),
        }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn infer(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = self.layers[0].infer(x);
        for layer in &self.layers[1..] {
            relu2(&mut h);
            h = layer.infer(h.view());
        }
        h
    }

    pub fn forward(&mut self, x: Array2<f64>) -> Array2<f64> {
        self.activations.clear();
        let n = self.layers.len();
        let mut h = x;
        for i in 0..n {
            h = self.layers[i].forward(h);
            if i + 1 < n {
                relu2(&mut h);
                self.activations.push(h.clone());
            }
        }
        h
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        let mut g = grad.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                let act = self.activations.pop().expect("activation cache");
                relu_backward(&mut g, &act);
            }
            g = self.layers[i].backward(&g);
        }
        g
    }
}

impl Parameterized for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}
