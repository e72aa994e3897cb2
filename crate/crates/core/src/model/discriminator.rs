use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, Conv, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    /// Whole frontal image.
    Frontal,
    /// Image masked by the skin, key-point and hair regions, stacked on channels.
    Parsing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_channels: usize,
    pub channels: usize,
    pub hr_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            image_channels: 1,
            channels: 16,
            hr_size: 128,
        }
    }
}

/// Four stride-2 convolutions, global pooling, an affine head and a sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    kind: DiscriminatorKind,
    config: DiscriminatorConfig,
    pub params: ParamStore,
    convs: Vec<Conv>,
    head: Linear,
}

impl Discriminator {
    pub fn new(kind: DiscriminatorKind, config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 || config.image_channels == 0 {
            return Err(Error::InvalidArgument(
                "discriminator channel counts must be positive".into(),
            ));
        }
        if config.hr_size < 16 {
            return Err(Error::InvalidArgument(format!(
                "discriminator input {} too small for four stride-2 layers",
                config.hr_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(match kind {
            DiscriminatorKind::Frontal => 2,
            DiscriminatorKind::Parsing => 3,
        });
        let mut p = ParamStore::new();
        let mut c_in = Self::input_channels_for(kind, config.image_channels);
        let mut convs = Vec::with_capacity(4);
        for i in 0..4 {
            let c_out = config.channels << i;
            convs.push(Conv::new(
                &mut p,
                &mut rng,
                &format!("conv{i}"),
                c_in,
                c_out,
                3,
                2,
                1,
            ));
            c_in = c_out;
        }
        let head = Linear::new(&mut p, &mut rng, "head", c_in, 1);
        Ok(Discriminator {
            kind,
            config,
            params: p,
            convs,
            head,
        })
    }

    fn input_channels_for(kind: DiscriminatorKind, c: usize) -> usize {
        match kind {
            DiscriminatorKind::Frontal => c,
            DiscriminatorKind::Parsing => 3 * c,
        }
    }

    pub fn kind(&self) -> DiscriminatorKind {
        self.kind
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn input_channels(&self) -> usize {
        Self::input_channels_for(self.kind, self.config.image_channels)
    }

    /// Probability that `x` is real, as a `(1,)` variable.
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[0] != self.input_channels() {
            return Err(Error::shape(
                "discriminator_forward",
                format!(
                    "{:?} discriminator expects {} channels, got {:?}",
                    self.kind,
                    self.input_channels(),
                    s
                ),
            ));
        }
        let mut h = x;
        for conv in &self.convs {
            h = g.leaky_relu(conv.forward(g, p, h)?, LEAK);
        }
        let pooled = g.global_avg_pool(h)?;
        Ok(g.sigmoid(self.head.forward(g, p, pooled)?))
    }

    pub fn probability(&self, x: &Tensor) -> Result<f64> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let v = g.constant(x.clone());
        Ok(g.value(self.forward(&g, &p, v)?).item())
    }
}

/// Stacks `I*M_s`, `I*M_k`, `I*M_h` along channels.
pub fn parsing_input(g: &Graph, image: Var, masks: &[Tensor; 3]) -> Result<Var> {
    let parts = masks
        .iter()
        .map(|m| g.masked_product(image, m))
        .collect::<Result<Vec<_>>>()?;
    g.concat_channels(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_channels: 1,
            channels: 4,
            hr_size: 32,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn output_is_open_unit_interval_and_deterministic() {
        let d = Discriminator::new(DiscriminatorKind::Frontal, cfg(), 1).unwrap();
        for s in 0..5 {
            let x = random(&[1, 32, 32], s);
            let p = d.probability(&x).unwrap();
            assert!(p > 0.0 && p < 1.0);
            assert_eq!(p, d.probability(&x).unwrap());
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let df = Discriminator::new(DiscriminatorKind::Frontal, cfg(), 1).unwrap();
        let dp = Discriminator::new(DiscriminatorKind::Parsing, cfg(), 1).unwrap();
        assert!(df.probability(&random(&[3, 32, 32], 0)).is_err());
        assert!(dp.probability(&random(&[1, 32, 32], 0)).is_err());
        assert!(dp.probability(&random(&[3, 32, 32], 0)).is_ok());
    }

    #[test]
    fn zero_masks_hide_the_image() {
        let dp = Discriminator::new(DiscriminatorKind::Parsing, cfg(), 2).unwrap();
        let zeros = [
            Tensor::zeros(&[1, 32, 32]),
            Tensor::zeros(&[1, 32, 32]),
            Tensor::zeros(&[1, 32, 32]),
        ];
        let eval = |img: Tensor| {
            let g = Graph::new();
            let p = dp.params.bind(&g, false);
            let x = parsing_input(&g, g.constant(img), &zeros).unwrap();
            g.value(dp.forward(&g, &p, x).unwrap()).item()
        };
        assert_eq!(eval(random(&[1, 32, 32], 3)), eval(random(&[1, 32, 32], 4)));
    }
}
