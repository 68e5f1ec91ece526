//! Small convolutional backbone with a projection head.
//!
//! Layout of the flat parameter vector: `[trunk | head | classifier]`.
//! The trunk is a stack of 3x3 conv + ReLU blocks producing the final
//! spatial feature map; global average pooling yields the representation
//! used by probes; the head (linear, ReLU, linear) produces the embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::EmbeddingBatch;
use crate::error::{invalid, Error, Result};
use crate::nn::{Layer, Sequential, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Classes of the supervised classifier on pooled features, if any.
    pub n_classes: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            image_size: 32,
            channels: vec![16, 32, 64, 64],
            strides: vec![1, 2, 2, 2],
            hidden_dim: 128,
            embed_dim: 128,
            n_classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    config: EncoderConfig,
    trunk: Sequential,
    head: Sequential,
    classifier: Option<Sequential>,
}

/// Recorded activations of one training forward pass.
pub struct EncoderPass {
    trunk: Tape,
    pooled: Tensor,
    head: Tape,
    classifier: Option<Tape>,
}

impl EncoderPass {
    pub fn feature_map(&self) -> &Tensor {
        &self.trunk.output
    }

    pub fn pooled(&self) -> &Tensor {
        &self.pooled
    }

    /// Unnormalized head output, `n x embed_dim`.
    pub fn embedding(&self) -> &Tensor {
        &self.head.output
    }

    pub fn logits(&self) -> Option<&Tensor> {
        self.classifier.as_ref().map(|t| &t.output)
    }
}

fn pool(x: &Tensor) -> Tensor {
    let hw = (x.h * x.w) as f64;
    let mut out = Tensor::zeros(x.n, x.c, 1, 1);
    for (o, plane) in out.data.iter_mut().zip(x.data.chunks(x.h * x.w)) {
        *o = plane.iter().sum::<f64>() / hw;
    }
    out
}

fn pool_backward(shape: [usize; 4], g: &Tensor) -> Tensor {
    let [n, c, h, w] = shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (plane, &gv) in dx.data.chunks_mut(h * w).zip(&g.data) {
        plane.fill(gv / (h * w) as f64);
    }
    dx
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.channels.is_empty() || config.channels.len() != config.strides.len() {
            return Err(invalid("encoder needs one stride per conv block"));
        }
        if config.strides.iter().any(|&s| s == 0) || config.channels.iter().any(|&c| c == 0) {
            return Err(invalid("encoder strides and channels must be positive"));
        }
        if config.embed_dim == 0 || config.hidden_dim == 0 {
            return Err(invalid("embedding and hidden dimensions must be positive"));
        }
        let mut layers = Vec::new();
        let mut c_in = config.in_channels;
        for (&c, &s) in config.channels.iter().zip(&config.strides) {
            layers.push(Layer::Conv2d {
                in_ch: c_in,
                out_ch: c,
                kernel: 3,
                stride: s,
            });
            layers.push(Layer::Relu);
            c_in = c;
        }
        let trunk = Sequential::new(layers);
        if trunk
            .output_shape(config.in_channels, config.image_size, config.image_size)
            .is_none()
        {
            return Err(invalid("image size too small for the encoder"));
        }
        let head = Sequential::new(vec![
            Layer::Linear {
                input: c_in,
                output: config.hidden_dim,
            },
            Layer::Relu,
            Layer::Linear {
                input: config.hidden_dim,
                output: config.embed_dim,
            },
        ]);
        let classifier = config.n_classes.map(|n| {
            Sequential::new(vec![Layer::Linear {
                input: c_in,
                output: n,
            }])
        });
        Ok(Encoder {
            config,
            trunk,
            head,
            classifier,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn trunk(&self) -> &Sequential {
        &self.trunk
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.channels.last().unwrap()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn trunk_len(&self) -> usize {
        self.trunk.param_count()
    }

    fn head_len(&self) -> usize {
        self.head.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.trunk_len() + self.head_len() + self.classifier.as_ref().map_or(0, |c| c.param_count())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut s = self.trunk.param_shapes("trunk.");
        s.extend(self.head.param_shapes("head."));
        if let Some(c) = &self.classifier {
            s.extend(c.param_shapes("classifier."));
        }
        s
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = self.trunk.init_params(rng);
        p.extend(self.head.init_params(rng));
        if let Some(c) = &self.classifier {
            p.extend(c.init_params(rng));
        }
        p
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (t, rest) = params.split_at(self.trunk_len());
        let (h, c) = rest.split_at(self.head_len());
        (t, h, c)
    }

    pub fn check_input(&self, params: &[f64], x: &Tensor) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, encoder expects {}",
                params.len(),
                self.param_count()
            )));
        }
        if x.c != self.config.in_channels
            || x.h != self.config.image_size
            || x.w != self.config.image_size
        {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{}x{}, encoder expects {}x{}x{}",
                x.h,
                x.w,
                x.c,
                self.config.image_size,
                self.config.image_size,
                self.config.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward_train(&self, params: &[f64], x: &Tensor) -> Result<EncoderPass> {
        self.check_input(params, x)?;
        let (tp, hp, cp) = self.split(params);
        let trunk = self.trunk.forward(tp, x);
        let pooled = pool(&trunk.output);
        let head = self.head.forward(hp, &pooled);
        let classifier = self.classifier.as_ref().map(|c| c.forward(cp, &pooled));
        Ok(EncoderPass {
            trunk,
            pooled,
            head,
            classifier,
        })
    }

    /// Backward pass from gradients w.r.t. the unnormalized embedding and/or
    /// the classifier logits. Returns parameter gradients.
    pub fn backward(
        &self,
        params: &[f64],
        pass: &EncoderPass,
        grad_embedding: Option<Tensor>,
        grad_logits: Option<Tensor>,
    ) -> Vec<f64> {
        let (tp, hp, cp) = self.split(params);
        let mut grads = vec![0.0; self.param_count()];
        let (gt, rest) = grads.split_at_mut(self.trunk_len());
        let (gh, gc) = rest.split_at_mut(self.head_len());
        let mut g_pooled = Tensor::zeros(pass.pooled.n, pass.pooled.c, 1, 1);
        if let Some(g) = grad_embedding {
            let d = self.head.backward(hp, &pass.head, g, gh, true).unwrap();
            for (a, b) in g_pooled.data.iter_mut().zip(&d.data) {
                *a += b;
            }
        }
        if let (Some(g), Some(c), Some(tape)) = (grad_logits, &self.classifier, &pass.classifier) {
            let d = c.backward(cp, tape, g, gc, true).unwrap();
            for (a, b) in g_pooled.data.iter_mut().zip(&d.data) {
                *a += b;
            }
        }
        let g_map = pool_backward(pass.trunk.output.shape(), &g_pooled);
        self.trunk.backward(tp, &pass.trunk, g_map, gt, false);
        grads
    }

    /// Embeds a batch. Rows are L2-normalized when `normalize` is set.
    pub fn encode(
        &self,
        params: &[f64],
        images: &Tensor,
        normalize: bool,
    ) -> Result<EmbeddingBatch> {
        let pass = self.forward_train(params, images)?;
        let out = &pass.head.output;
        let batch = EmbeddingBatch::new(out.n, out.c, out.data.clone());
        if normalize {
            batch.normalize()
        } else {
            Ok(batch)
        }
    }

    /// Pooled trunk features, `n x feature_dim`, for frozen-backbone probes.
    pub fn features(&self, params: &[f64], images: &Tensor) -> Result<Vec<f64>> {
        self.check_input(params, images)?;
        let (tp, _, _) = self.split(params);
        Ok(pool(&self.trunk.forward(tp, images).output).data)
    }

    /// Final spatial feature map of the trunk.
    pub fn feature_map(&self, params: &[f64], images: &Tensor) -> Result<Tensor> {
        self.check_input(params, images)?;
        let (tp, _, _) = self.split(params);
        Ok(self.trunk.forward(tp, images).output)
    }

    /// Trunk parameters only.
    pub fn trunk_params<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[..self.trunk_len()]
    }

    /// Trunk forward pass with recorded activations.
    pub fn trunk_forward(&self, params: &[f64], images: &Tensor) -> Result<Tape> {
        self.check_input(params, images)?;
        let (tp, _, _) = self.split(params);
        Ok(self.trunk.forward(tp, images))
    }

    /// Backward from a gradient on the final feature map. Returns gradients
    /// for the full parameter vector (zero outside the trunk) and the
    /// gradient with respect to the input images.
    pub fn trunk_backward(
        &self,
        params: &[f64],
        tape: &Tape,
        grad_map: Tensor,
    ) -> (Vec<f64>, Tensor) {
        let (tp, _, _) = self.split(params);
        let mut grads = vec![0.0; self.param_count()];
        let gx = self
            .trunk
            .backward(tp, tape, grad_map, &mut grads[..self.trunk_len()], true)
            .expect("input gradient requested");
        (grads, gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Encoder {
        Encoder::new(EncoderConfig {
            image_size: 8,
            channels: vec![4, 6],
            strides: vec![1, 2],
            hidden_dim: 5,
            embed_dim: 3,
            n_classes: Some(2),
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            n,
            3,
            8,
            8,
            (0..n * 192).map(|_| rng.random::<f64>()).collect(),
        )
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let enc = small();
        let params = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let one = enc.encode(&params, &images(1, 2), true).unwrap();
        assert_eq!((one.rows, one.dim), (1, 3));
        let x = images(1, 3);
        let dup = Tensor::stack(&[x.clone(), x]);
        let e = enc.encode(&params, &dup, true).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert!(e.rows_are_unit());
        assert_eq!(enc.features(&params, &dup).unwrap().len(), 2 * 6);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let enc = small();
        let params = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let bad = Tensor::zeros(1, 3, 9, 9);
        assert!(matches!(
            enc.encode(&params, &bad, true),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(enc.encode(&params[1..], &images(1, 0), true).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let enc = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = enc.init_params(&mut rng);
        let x = images(2, 5);
        let pe: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pl: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &[f64]| {
            let pass = enc.forward_train(p, &x).unwrap();
            let a: f64 = pass
                .embedding()
                .data
                .iter()
                .zip(&pe)
                .map(|(u, v)| u * v)
                .sum();
            let b: f64 = pass
                .logits()
                .unwrap()
                .data
                .iter()
                .zip(&pl)
                .map(|(u, v)| u * v)
                .sum();
            a + b
        };
        let pass = enc.forward_train(&params, &x).unwrap();
        let grads = enc.backward(
            &params,
            &pass,
            Some(Tensor::from_rows(2, 3, pe.clone())),
            Some(Tensor::from_rows(2, 2, pl.clone())),
        );
        for i in (0..params.len()).step_by(7) {
            let mut p = params.clone();
            p[i] += 1e-5;
            let fp = objective(&p);
            p[i] -= 2e-5;
            let fm = objective(&p);
            let fd = (fp - fm) / 2e-5;
            let denom = fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(
                (fd - grads[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} vs {}",
                grads[i]
            );
        }
    }
}
