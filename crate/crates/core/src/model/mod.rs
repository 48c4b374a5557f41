//! The encoder: a backbone plus projection head whose outputs are
//! L2-normalized into the embedding space shared with the prototypes.

pub mod checkpoint;
pub mod layers;
pub mod mlp;
pub mod resnet;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::flatten_views;
use crate::error::{HsclError, Result};
use crate::types::{EmbeddingMatrix, NORM_EPS};
use layers::{Param, Parameterized};
use mlp::Mlp;
use resnet::ResNet18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EncoderKind {
    Resnet18,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Shape of one datum: `[features]` for the MLP, `[C, H, W]` for the ResNet.
    pub input_shape: Vec<usize>,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
    #[serde(default)]
    pub mlp_hidden: Vec<usize>,
    /// Channel width of the first ResNet stage.
    #[serde(default = "default_resnet_width")]
    pub resnet_width: usize,
}

fn default_projection_dim() -> usize {
    128
}

fn default_resnet_width() -> usize {
    64
}

impl EncoderSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, projection_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Mlp,
            input_shape: vec![input_dim],
            projection_dim,
            mlp_hidden: hidden,
            resnet_width: default_resnet_width(),
        }
    }

    pub fn resnet18(channels: usize, side: usize, projection_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Resnet18,
            input_shape: vec![channels, side, side],
            projection_dim,
            mlp_hidden: Vec::new(),
            resnet_width: default_resnet_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HsclError::InvalidConfig(m));
        if self.projection_dim == 0 {
            return bad("projection_dim must be positive".into());
        }
        match self.kind {
            EncoderKind::Mlp if self.input_shape.len() != 1 || self.input_shape[0] == 0 => {
                bad(format!("MLP input_shape must be [features], got {:?}", self.input_shape))
            }
            EncoderKind::Mlp if self.mlp_hidden.contains(&0) => bad("MLP hidden widths must be positive".into()),
            EncoderKind::Resnet18 if self.input_shape.len() != 3 || self.input_shape.contains(&0) => {
                bad(format!("ResNet input_shape must be [C, H, W], got {:?}", self.input_shape))
            }
            EncoderKind::Resnet18 if self.resnet_width == 0 => bad("resnet_width must be positive".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
enum Network {
    Mlp(Mlp),
    ResNet(Box<ResNet18>),
}

/// `f_Θ`: maps a batch of views `[M, ...input_shape]` to unit embeddings `[M, D]`.
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    net: Network,
    /// Normalized outputs and pre-normalization norms from the last training forward.
    norm_cache: Option<(Array2<f64>, Array1<f64>)>,
}

impl Encoder {
    /// Randomly initialized encoder (no pre-training).
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let net = match spec.kind {
            EncoderKind::Mlp => Network::Mlp(Mlp::new(spec.input_shape[0], &spec.mlp_hidden, spec.projection_dim, rng)),
            EncoderKind::Resnet18 => Network::ResNet(Box::new(ResNet18::new(
                spec.input_shape[0],
                spec.resnet_width,
                spec.projection_dim,
                rng,
            ))),
        };
        Ok(Self {
            spec,
            net,
            norm_cache: None,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn check_input(&self, views: &ArrayD<f64>) -> Result<()> {
        let shape = views.shape();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(HsclError::ShapeMismatch(format!(
                "encoder expects views [M, {:?}], got {:?}",
                self.spec.input_shape, shape
            )));
        }
        Ok(())
    }

    fn raw_infer(&self, views: &ArrayD<f64>) -> Array2<f64> {
        match &self.net {
            Network::Mlp(m) => m.infer(flatten_views(views).view()),
            Network::ResNet(r) => r.infer(views.view().into_dimensionality::<Ix4>().expect("checked shape")),
        }
    }

    /// Evaluation-mode embeddings. Deterministic; batch-norm layers use running statistics.
    pub fn encode(&self, views: &ArrayD<f64>) -> Result<EmbeddingMatrix> {
        self.check_input(views)?;
        if views.len_of(Axis(0)) == 0 {
            return Ok(EmbeddingMatrix::from_array_unchecked(Array2::zeros((0, self.spec.projection_dim))));
        }
        EmbeddingMatrix::normalized(self.raw_infer(views))
    }

    /// Training-mode forward pass; caches activations for [`Encoder::backward`].
    pub fn forward_train(&mut self, views: &ArrayD<f64>) -> Result<EmbeddingMatrix> {
        self.check_input(views)?;
        let raw = match &mut self.net {
            Network::Mlp(m) => m.forward(flatten_views(views)),
            Network::ResNet(r) => {
                let x = views.view().into_dimensionality::<Ix4>().expect("checked shape").to_owned();
                r.forward(&x)
            }
        };
        let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(n) = norms.iter().find(|n| !(**n > NORM_EPS)) {
            return Err(HsclError::DegenerateEmbedding(*n));
        }
        let z = &raw / &norms.view().insert_axis(Axis(1));
        self.norm_cache = Some((z.clone(), norms));
        Ok(EmbeddingMatrix::from_array_unchecked(z))
    }

    /// Backpropagates `dL/dz` through the normalization and the network, accumulating
    /// parameter gradients.
    pub fn backward(&mut self, d_z: &Array2<f64>) -> Result<()> {
        let (z, norms) = self
            .norm_cache
            .take()
            .ok_or_else(|| HsclError::InvalidInput("backward called without a training forward".into()))?;
        if d_z.dim() != z.dim() {
            return Err(HsclError::ShapeMismatch(format!("gradient {:?} vs embeddings {:?}", d_z.dim(), z.dim())));
        }
        // d/du (u/|u|) applied to g: (g - z (z·g)) / |u|
        let proj = (&z * d_z).sum_axis(Axis(1));
        let d_raw = (d_z - &(&z * &proj.insert_axis(Axis(1)))) / &norms.insert_axis(Axis(1));
        match &mut self.net {
            Network::Mlp(m) => {
                m.backward(&d_raw);
            }
            Network::ResNet(r) => {
                r.backward(&d_raw);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.len();
            }
        });
        n
    }

    /// Errors when any parameter or buffer holds NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        let mut bad = None;
        self.visit(&mut |p| {
            if bad.is_none() && p.value.iter().any(|v| !v.is_finite()) {
                bad = Some(p.name.clone());
            }
        });
        match bad {
            Some(name) => Err(HsclError::NonFinite(format!("parameter {name}"))),
            None => Ok(()),
        }
    }
}

impl Parameterized for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match &self.net {
            Network::Mlp(m) => m.visit(f),
            Network::ResNet(r) => r.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.net {
            Network::Mlp(m) => m.visit_mut(f),
            Network::ResNet(r) => r.visit_mut(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array, Ix2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(12)
    }

    fn random_views(shape: &[usize], r: &mut ChaCha8Rng) -> ArrayD<f64> {
        Array::from_shape_simple_fn(shape.to_vec(), || r.random::<f64>() - 0.5)
    }

    #[test]
    fn mlp_outputs_unit_norm_and_deterministic() {
        let mut r = rng();
        let enc = Encoder::new(EncoderSpec::mlp(5, vec![16, 16], 8), &mut r).unwrap();
        let x = random_views(&[10, 5], &mut r);
        let z = enc.encode(&x).unwrap();
        for row in z.view().outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        }
        assert_eq!(z, enc.encode(&x).unwrap());
    }

    #[test]
    fn linear_mlp_matches_hand_computation() {
        let mut r = rng();
        let mut enc = Encoder::new(EncoderSpec::mlp(2, vec![], 2), &mut r).unwrap();
        enc.visit_mut(&mut |p| {
            if p.name == "head.0.weight" {
                p.value = array![[1.0, 2.0], [3.0, -1.0]].into_dyn();
            } else {
                p.value = array![0.5, 0.0].into_dyn();
            }
        });
        let x = array![[1.0, 1.0], [2.0, 0.0]].into_dyn();
        let z = enc.encode(&x).unwrap();
        // [1,1]W + b = [4.5, 1]; [2,0]W + b = [2.5, 4]
        let expect = |a: f64, b: f64| {
            let n = (a * a + b * b).sqrt();
            [a / n, b / n]
        };
        for (row, e) in z.view().outer_iter().zip([expect(4.5, 1.0), expect(2.5, 4.0)]) {
            assert!((row[0] - e[0]).abs() < 1e-12 && (row[1] - e[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_is_batch_order_equivariant() {
        let mut r = rng();
        let enc = Encoder::new(EncoderSpec::mlp(4, vec![8], 6), &mut r).unwrap();
        let x = random_views(&[5, 4], &mut r);
        let perm = [4usize, 2, 0, 1, 3];
        let zp = enc.encode(&x.select(Axis(0), &perm)).unwrap();
        let z = enc.encode(&x).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(zp.row(i), z.row(p));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut r = rng();
        let enc = Encoder::new(EncoderSpec::mlp(4, vec![8], 6), &mut r).unwrap();
        assert!(enc.encode(&ArrayD::zeros(vec![3, 5])).is_err());
    }

    /// Every parameter gradient of a weighted sum of embeddings matches finite differences.
    fn check_encoder_gradients(spec: EncoderSpec, input: &[usize], tol: f64) {
        let mut r = rng();
        let mut enc = Encoder::new(spec, &mut r).unwrap();
        let x = random_views(input, &mut r);
        let weights = random_views(&[input[0], enc.spec().projection_dim], &mut r)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let objective = |e: &mut Encoder| (&e.clone().forward_train(&x).unwrap().into_inner() * &weights).sum();
        enc.zero_grad();
        enc.forward_train(&x).unwrap();
        enc.backward(&weights).unwrap();
        let mut grads = Vec::new();
        enc.visit(&mut |p| grads.push((p.trainable, p.grad.clone())));
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (pi, (trainable, grad)) in grads.iter().enumerate() {
            if !trainable {
                continue;
            }
            // probe a spread of entries to keep the test fast
            let stride = (grad.len() / 7).max(1);
            for idx in (0..grad.len()).step_by(stride) {
                let nudge = |e: &mut Encoder, delta: f64| {
                    let mut i = 0;
                    e.visit_mut(&mut |p| {
                        if i == pi {
                            p.value.as_slice_mut().unwrap()[idx] += delta;
                        }
                        i += 1;
                    });
                };
                let mut up = enc.clone();
                nudge(&mut up, h);
                let mut down = enc.clone();
                nudge(&mut down, -h);
                let num = (objective(&mut up) - objective(&mut down)) / (2.0 * h);
                let ana = grad.as_slice().unwrap()[idx];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        assert!(worst < tol, "max relative error {worst}");
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        check_encoder_gradients(EncoderSpec::mlp(3, vec![12, 10], 4), &[7, 3], 1e-5);
    }

    #[test]
    fn resnet_gradients_match_finite_differences() {
        let mut spec = EncoderSpec::resnet18(2, 4, 3);
        spec.resnet_width = 2;
        check_encoder_gradients(spec, &[3, 2, 4, 4], 1e-4);
    }

    #[test]
    fn resnet18_parameter_count() {
        // Backbone enumerated layer by layer: 3x3 convs without bias, batch-norm
        // gamma/beta, 1x1 projection shortcuts on the three down-sampling blocks.
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
        let bn = |c: usize| 2 * c;
        let mut backbone = conv(3, 64, 3) + bn(64);
        let mut cin = 64;
        for cout in [64, 128, 256, 512] {
            for block in 0..2 {
                let c_in = if block == 0 { cin } else { cout };
                backbone += conv(c_in, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout);
                if block == 0 && c_in != cout {
                    backbone += conv(c_in, cout, 1) + bn(cout);
                }
            }
            cin = cout;
        }
        assert_eq!(backbone, 11_168_832);
        let head = 512 * 512 + 512 + 512 * 128 + 128;
        let enc = Encoder::new(EncoderSpec::resnet18(3, 32, 128), &mut rng()).unwrap();
        assert_eq!(enc.param_count(), backbone + head);
        assert_eq!(enc.param_count(), 11_497_152);
    }

    #[test]
    fn resnet_eval_is_deterministic_and_unit_norm() {
        let mut r = rng();
        let mut spec = EncoderSpec::resnet18(3, 8, 16);
        spec.resnet_width = 4;
        let mut enc = Encoder::new(spec, &mut r).unwrap();
        let x = random_views(&[4, 3, 8, 8], &mut r);
        enc.forward_train(&x).unwrap();
        let a = enc.encode(&x).unwrap();
        let b = enc.encode(&x).unwrap();
        assert_eq!(a, b);
        for row in a.view().outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        }
    }
}
