//! Small convolutional identity classifier whose last two affine layers
//! serve as recognition features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, Conv, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::losses::IdentityEmbedder;
use crate::numerics::{BackwardRule, Graph, Tensor, Var};

const LEAK: f64 = 0.2;
/// Side length the input is pooled down to before the convolutions.
pub const EMBED_INPUT: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub image_channels: usize,
    pub hr_size: usize,
    pub d1: usize,
    /// Number of training identities; also the dimension of `p2`.
    pub n_classes: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            image_channels: 1,
            hr_size: 128,
            d1: 64,
            n_classes: 40,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hr_size < EMBED_INPUT || !self.hr_size.is_multiple_of(EMBED_INPUT) {
            return Err(Error::InvalidArgument(format!(
                "embedder input size {} must be a multiple of {}",
                self.hr_size, EMBED_INPUT
            )));
        }
        if self.d1 == 0 || self.n_classes < 2 || self.image_channels == 0 {
            return Err(Error::InvalidArgument(
                "embedder needs d1 >= 1 and at least 2 classes".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ToyEmbedder {
    config: EmbedderConfig,
    pub params: ParamStore,
    conv1: Conv,
    conv2: Conv,
    fc1: Linear,
    fc2: Linear,
    trained: bool,
}

impl ToyEmbedder {
    pub fn new(config: EmbedderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let mut p = ParamStore::new();
        let conv1 = Conv::new(&mut p, &mut rng, "conv1", config.image_channels, 8, 3, 2, 1);
        let conv2 = Conv::new(&mut p, &mut rng, "conv2", 8, 16, 3, 2, 1);
        let flat = 16 * (EMBED_INPUT / 4) * (EMBED_INPUT / 4);
        let fc1 = Linear::new(&mut p, &mut rng, "fc1", flat, config.d1);
        let fc2 = Linear::new(&mut p, &mut rng, "fc2", config.d1, config.n_classes);
        Ok(ToyEmbedder {
            config,
            params: p,
            conv1,
            conv2,
            fc1,
            fc2,
            trained: false,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Returns `(p1, logits)`; `p1` is taken before the activation.
    pub fn forward(&self, g: &Graph, p: &Bound, image: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        let s = g.shape(image);
        if s != [c.image_channels, c.hr_size, c.hr_size] {
            return Err(Error::shape(
                "embed",
                format!(
                    "expected ({}, {}, {}), got {:?}",
                    c.image_channels, c.hr_size, c.hr_size, s
                ),
            ));
        }
        let x = if c.hr_size == EMBED_INPUT {
            image
        } else {
            g.avg_pool(image, c.hr_size / EMBED_INPUT)?
        };
        let h = g.leaky_relu(self.conv1.forward(g, p, x)?, LEAK);
        let h = g.leaky_relu(self.conv2.forward(g, p, h)?, LEAK);
        let n = g.value(h).numel();
        let flat = g.reshape(h, &[n])?;
        let p1 = self.fc1.forward(g, p, flat)?;
        let p2 = self.fc2.forward(g, p, g.leaky_relu(p1, LEAK))?;
        Ok((p1, p2))
    }
}

impl IdentityEmbedder for ToyEmbedder {
    fn dims(&self) -> (usize, usize) {
        (self.config.d1, self.config.n_classes)
    }

    fn embed_var(&self, g: &Graph, image: Var) -> Result<(Var, Var)> {
        if !self.trained {
            return Err(Error::UntrainedEmbedder);
        }
        let p = self.params.bind(g, false);
        let (p1, p2) = self.forward(g, &p, image)?;
        Ok((unit(g, p1), unit(g, p2)))
    }
}

/// `x / sqrt(|x|^2 + eps)`; keeps identity distances on a fixed scale.
struct UnitNorm;

const UNIT_EPS: f64 = 1e-12;

impl BackwardRule for UnitNorm {
    fn name(&self) -> &'static str {
        "unit_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let n = (x.data().iter().map(|v| v * v).sum::<f64>() + UNIT_EPS).sqrt();
        let dot: f64 = output
            .data()
            .iter()
            .zip(grad.data())
            .map(|(y, g)| y * g)
            .sum();
        let data = output
            .data()
            .iter()
            .zip(grad.data())
            .map(|(y, g)| (g - y * dot) / n)
            .collect();
        vec![Some(
            Tensor::from_vec(x.shape(), data).expect("same length"),
        )]
    }
}

fn unit(g: &Graph, x: Var) -> Var {
    let v = g.value(x);
    let n = (v.data().iter().map(|a| a * a).sum::<f64>() + UNIT_EPS).sqrt();
    let out = v.map(|a| a / n);
    g.apply(Box::new(UnitNorm), &[x], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    fn emb() -> ToyEmbedder {
        let mut e = ToyEmbedder::new(
            EmbedderConfig {
                hr_size: 64,
                n_classes: 5,
                d1: 12,
                ..EmbedderConfig::default()
            },
            0,
        )
        .unwrap();
        e.mark_trained();
        e
    }

    #[test]
    fn untrained_embedder_refuses() {
        let e = ToyEmbedder::new(EmbedderConfig::default(), 0).unwrap();
        let err = e.embed(&Tensor::zeros(&[1, 128, 128])).unwrap_err();
        assert!(err.to_string().contains("pretrain-embedder"));
    }

    #[test]
    fn dims_and_determinism() {
        let e = emb();
        let x = Tensor::from_fn3(1, 64, 64, |_, y, x| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let (a1, a2) = e.embed(&x).unwrap();
        let (b1, b2) = e.embed(&x).unwrap();
        assert_eq!((a1.numel(), a2.numel()), e.dims());
        assert_eq!((a1, a2), (b1, b2));
        assert!(e.embed(&Tensor::zeros(&[1, 32, 32])).is_err());
    }

    #[test]
    fn gradients_stop_at_the_weights() {
        let e = emb();
        let g = Graph::new();
        let x = g.param(Tensor::full(&[1, 64, 64], 0.3));
        let (p1, _) = e.embed_var(&g, x).unwrap();
        let grads = g.backward(g.sum(g.square(p1))).unwrap();
        assert!(grads.get(x).is_some());
        let weights = Graph::new();
        let bound = e.params.bind(&weights, false);
        assert!(bound.vars().iter().all(|&v| !weights.requires_grad(v)));
    }

    #[test]
    fn features_are_unit_vectors_with_correct_gradient() {
        let e = emb();
        let x = Tensor::from_fn3(1, 64, 64, |_, y, x| ((x * 5 + y * 2) % 13) as f64 / 12.0);
        let (p1, p2) = e.embed(&x).unwrap();
        for p in [&p1, &p2] {
            let n: f64 = p.data().iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9, "{}", n);
        }
        let v = Tensor::from_vec(&[4], vec![0.2, -0.5, 0.9, 0.1]).unwrap();
        let c = Tensor::from_vec(&[4], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let err = gradcheck(
            |g, v| Ok(g.sum(g.mul(unit(g, v), g.constant(c.clone()))?)),
            &v,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{}", err);
    }
}
