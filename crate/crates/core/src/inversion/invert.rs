//! Feature inversion with a deep image prior: optimize the weights of a
//! reconstructor fed a fixed noise code so that its output matches the
//! target's features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spec::{build_reconstructor, ReconstructorSpec};
use crate::contrast::train::stream_rng;
use crate::contrast::Encoder;
use crate::data::Image;
use crate::error::{invalid, Error, Result};
use crate::nn::optim::Adam;
use crate::tensor::Tensor;

/// A differentiable feature map `f` used by the inversion objective.
pub trait FeatureTarget: Sync {
    fn features(&self, x: &Tensor) -> Result<Tensor>;

    /// `E = sum (f(x) - target)^2` and `dE/dx`.
    fn objective_grad(&self, x: &Tensor, target: &Tensor) -> Result<(f64, Tensor)>;
}

/// `f(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFeatures;

impl FeatureTarget for IdentityFeatures {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn objective_grad(&self, x: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        if !x.same_shape(target) {
            return Err(Error::ShapeMismatch(
                "reconstruction and target differ in shape".into(),
            ));
        }
        let mut g = x.clone();
        let mut e = 0.0;
        for (gi, &t) in g.data.iter_mut().zip(&target.data) {
            let d = *gi - t;
            e += d * d;
            *gi = 2.0 * d;
        }
        Ok((e, g))
    }
}

/// Final spatial feature map of an encoder's trunk.
#[derive(Debug, Clone, Copy)]
pub struct EncoderFeatures<'a> {
    pub encoder: &'a Encoder,
    pub params: &'a [f64],
}

impl FeatureTarget for EncoderFeatures<'_> {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.feature_map(self.params, x)
    }

    fn objective_grad(&self, x: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        let tape = self.encoder.trunk_forward(self.params, x)?;
        let (e, g_map) = IdentityFeatures.objective_grad(&tape.output, target)?;
        let (_, gx) = self.encoder.trunk_backward(self.params, &tape, g_map);
        Ok((e, gx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub spec: ReconstructorSpec,
    pub iterations: usize,
    pub lr: f64,
    pub distance: Distance,
    pub noise_low: f64,
    pub noise_high: f64,
    pub seed: u64,
    /// Return the lowest-objective reconstruction rather than the last one.
    pub keep_best: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            spec: ReconstructorSpec::default(),
            iterations: 3000,
            lr: 0.001,
            distance: Distance::L2,
            noise_low: 0.0,
            noise_high: 0.1,
            seed: 0,
            keep_best: true,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("inversion needs at least one iteration"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("inversion learning rate must be positive"));
        }
        if !(self.noise_low < self.noise_high) {
            return Err(invalid("noise bounds must satisfy low < high"));
        }
        self.spec.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    /// Best-objective image if `keep_best`, otherwise the last iterate.
    pub image: Image,
    pub last_image: Image,
    /// Objective of the reconstruction produced at each iteration, before
    /// that iteration's update.
    pub trace: Vec<f64>,
    pub final_objective: f64,
    pub best_iteration: usize,
}

impl ReconstructionResult {
    pub fn running_min(&self) -> Vec<f64> {
        self.trace
            .iter()
            .scan(f64::INFINITY, |m, &e| {
                *m = m.min(e);
                Some(*m)
            })
            .collect()
    }
}

/// Minimizes `||f(r_theta(z0)) - f(x0)||^2` over the reconstructor weights
/// with Adam. `z0` is drawn once from `U(noise_low, noise_high)`.
pub fn invert_features(
    f: &dyn FeatureTarget,
    target: &Image,
    config: &InversionConfig,
) -> Result<ReconstructionResult> {
    config.validate()?;
    let spec = ReconstructorSpec {
        out_channels: target.channels,
        ..config.spec.clone()
    };
    let (rec, mut params) = build_reconstructor(&spec, config.seed)?;
    rec.check_size(target.height, target.width)?;

    let mut rng = stream_rng(config.seed, 1);
    let z0 = Tensor::from_vec(
        1,
        spec.noise_channels,
        target.height,
        target.width,
        (0..spec.noise_channels * target.height * target.width)
            .map(|_| rng.random_range(config.noise_low..config.noise_high))
            .collect(),
    );
    let goal = f.features(&target.to_tensor())?;

    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(config.iterations);
    let mut best = (f64::INFINITY, 0, None);
    let mut last = None;
    let mut grads = vec![0.0; params.len()];
    for it in 0..config.iterations {
        let tape = rec.net.forward(&params, &z0);
        let (e, gx) = f.objective_grad(&tape.output, &goal)?;
        if !e.is_finite() {
            return Err(Error::NonFiniteObjective(it));
        }
        trace.push(e);
        if e < best.0 {
            best = (e, it, Some(tape.output.clone()));
        }
        grads.iter_mut().for_each(|g| *g = 0.0);
        rec.net.backward(&params, &tape, gx, &mut grads, false);
        adam.step(&mut params, &grads, config.lr);
        last = Some(tape.output);
    }
    let source = format!("{}#reconstruction", target.source);
    let last_image = Image::from_tensor(&last.expect("at least one iteration"), 0, source.clone());
    let (image, final_objective) = if config.keep_best {
        let t = best.2.expect("finite objective recorded");
        (Image::from_tensor(&t, 0, source), best.0)
    } else {
        (last_image.clone(), *trace.last().unwrap())
    };
    Ok(ReconstructionResult {
        image,
        last_image,
        trace,
        final_objective,
        best_iteration: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_target(size: usize) -> Image {
        let mut px = Vec::new();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                px.extend([
                    0.5 + 0.3 * (3.0 * u).sin(),
                    0.4 + 0.3 * v,
                    0.6 - 0.2 * (u + v),
                ]);
            }
        }
        Image::new(size, size, 3, px, "smooth").unwrap()
    }

    fn small_config(iterations: usize) -> InversionConfig {
        InversionConfig {
            spec: ReconstructorSpec::parse("encoder: CD4^3-C4^3\ndecoder: C4^3-CU4^3\n").unwrap(),
            iterations,
            lr: 0.01,
            ..InversionConfig::default()
        }
    }

    #[test]
    fn objective_descends_and_is_reproducible() {
        let target = smooth_target(8);
        let a = invert_features(&IdentityFeatures, &target, &small_config(30)).unwrap();
        assert_eq!(a.trace.len(), 30);
        assert!(a.final_objective < a.trace[0]);
        assert_eq!(a.final_objective, a.running_min().last().copied().unwrap());
        assert!(a.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        let b = invert_features(&IdentityFeatures, &target, &small_config(30)).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn rejects_zero_iterations_and_bad_sizes() {
        let target = smooth_target(8);
        assert!(invert_features(&IdentityFeatures, &target, &small_config(0)).is_err());
        let spec = ReconstructorSpec::parse(
            "encoder: CD4^3-CD4^3-CD4^3-CD4^3\ndecoder: CU4^3-CU4^3-CU4^3-CU4^3\n",
        )
        .unwrap();
        let cfg = InversionConfig {
            spec,
            ..small_config(1)
        };
        // 8 is not divisible by 2^4
        assert!(invert_features(&IdentityFeatures, &target, &cfg).is_err());
    }

    #[test]
    fn encoder_objective_gradient_matches_finite_differences() {
        use crate::contrast::EncoderConfig;
        use rand::SeedableRng;
        let enc = Encoder::new(EncoderConfig {
            image_size: 8,
            channels: vec![3, 4],
            strides: vec![1, 2],
            hidden_dim: 4,
            embed_dim: 4,
            ..EncoderConfig::default()
        })
        .unwrap();
        let params = enc.init_params(&mut rand_chacha::ChaCha8Rng::seed_from_u64(2));
        let f = EncoderFeatures {
            encoder: &enc,
            params: &params,
        };
        let x = smooth_target(8).to_tensor();
        let mut t = f.features(&x).unwrap();
        t.data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += 0.01 * (i % 7) as f64);
        let (_, g) = f.objective_grad(&x, &t).unwrap();
        for i in (0..x.data.len()).step_by(17) {
            let h = 1e-5;
            let mut a = x.clone();
            a.data[i] += h;
            let mut b = x.clone();
            b.data[i] -= h;
            let fd = (f.objective_grad(&a, &t).unwrap().0 - f.objective_grad(&b, &t).unwrap().0)
                / (2.0 * h);
            assert!(
                (fd - g.data[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                g.data[i]
            );
        }
    }
}
