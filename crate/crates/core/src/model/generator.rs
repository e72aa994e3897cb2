//! Generator: deep encoder of residual dense blocks, a side-view
//! super-resolution branch, and a frontal decoder that consumes the branch's
//! intermediate feature maps at 2x and 4x resolution.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, Conv, ParamStore};
use crate::error::{Error, Result};
use crate::losses::{feature_block, FeatureBlock};
use crate::numerics::{bicubic_resample, Graph, ImageTensor, Ratio, Tensor, Var};

/// How multiple low-resolution inputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Single,
    /// Channel-concatenate the inputs ahead of a widened first convolution.
    ImageConcat,
    /// Encode each input with shared weights and average the features.
    FeatureFuse,
    /// `FeatureFuse` plus per-input feature blocks for the orthogonality penalty.
    FeatureFuseOrth,
}

impl Fusion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Fusion::Single => "single",
            Fusion::ImageConcat => "image_concat",
            Fusion::FeatureFuse => "feature_fuse",
            Fusion::FeatureFuseOrth => "feature_fuse_orth",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "single" => Fusion::Single,
            "image_concat" => Fusion::ImageConcat,
            "feature_fuse" => Fusion::FeatureFuse,
            "feature_fuse_orth" => Fusion::FeatureFuseOrth,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown fusion scheme `{}`",
                    other
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    pub n_rdb: usize,
    pub rdb_layers: usize,
    pub growth: usize,
    /// Channels of the upsampling paths (SR branch and decoder).
    pub up_channels: usize,
    pub lr_size: usize,
    pub hr_size: usize,
    pub fusion: Fusion,
    /// Number of inputs; fixes the first-layer width under `ImageConcat`.
    pub n_inputs: usize,
    /// `false` removes the side-view SR branch (the no-SR-module ablation).
    pub sr_module: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_channels: 1,
            base_channels: 64,
            n_rdb: 16,
            rdb_layers: 4,
            growth: 16,
            up_channels: 64,
            lr_size: 32,
            hr_size: 128,
            fusion: Fusion::Single,
            n_inputs: 1,
            sr_module: true,
        }
    }
}

impl GeneratorConfig {
    /// Four residual dense blocks, otherwise the defaults.
    pub fn desk() -> Self {
        GeneratorConfig {
            n_rdb: 4,
            ..Self::default()
        }
    }

    /// The small network used by gradient checks.
    pub fn tiny() -> Self {
        GeneratorConfig {
            image_channels: 1,
            base_channels: 4,
            n_rdb: 1,
            rdb_layers: 2,
            growth: 4,
            up_channels: 4,
            lr_size: 8,
            hr_size: 32,
            fusion: Fusion::Single,
            n_inputs: 1,
            sr_module: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.hr_size != 4 * self.lr_size {
            return bad(format!(
                "hr_size {} must be 4 x lr_size {}",
                self.hr_size, self.lr_size
            ));
        }
        if self.n_rdb == 0 || self.rdb_layers == 0 {
            return bad("n_rdb and rdb_layers must be >= 1".into());
        }
        if [
            self.image_channels,
            self.base_channels,
            self.growth,
            self.up_channels,
            self.lr_size,
        ]
        .contains(&0)
        {
            return bad("channel counts and sizes must be positive".into());
        }
        if self.n_inputs == 0 {
            return bad("n_inputs must be >= 1".into());
        }
        if self.fusion == Fusion::Single && self.n_inputs != 1 {
            return bad(format!(
                "single-image fusion takes 1 input, configured {}",
                self.n_inputs
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Rdb {
    layers: Vec<Conv>,
    fuse: Conv,
}

/// Graph handles produced by one generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub sp: Var,
    pub sf: Var,
    /// Encoder output per input (one entry under `Single`/`ImageConcat`).
    pub features: Vec<Var>,
    /// `(lr*lr, C_f)` unit-column blocks, only under `FeatureFuseOrth`.
    pub blocks: Vec<Var>,
}

/// Plain-value result of a generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub sp: ImageTensor,
    pub sf: ImageTensor,
    pub encoder_features: Vec<FeatureBlock>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    pub params: ParamStore,
    head: Conv,
    rdbs: Vec<Rdb>,
    global_fuse: Conv,
    sr: Option<([Conv; 2], Conv)>,
    dec_up: [Conv; 2],
    dec_fuse: [Conv; 2],
    dec_out: Conv,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut p = ParamStore::new();
        let c = &config;
        let in_ch = match c.fusion {
            Fusion::ImageConcat => c.image_channels * c.n_inputs,
            _ => c.image_channels,
        };
        let head = Conv::same3(&mut p, &mut rng, "enc.head", in_ch, c.base_channels);
        let rdbs = (0..c.n_rdb)
            .map(|i| {
                let layers = (0..c.rdb_layers)
                    .map(|l| {
                        let cin = c.base_channels + l * c.growth;
                        Conv::same3(
                            &mut p,
                            &mut rng,
                            &format!("enc.rdb{i}.conv{l}"),
                            cin,
                            c.growth,
                        )
                    })
                    .collect();
                let fuse = Conv::pointwise(
                    &mut p,
                    &mut rng,
                    &format!("enc.rdb{i}.fuse"),
                    c.base_channels + c.rdb_layers * c.growth,
                    c.base_channels,
                );
                Rdb { layers, fuse }
            })
            .collect();
        let global_fuse = Conv::pointwise(
            &mut p,
            &mut rng,
            "enc.fuse",
            c.n_rdb * c.base_channels,
            c.base_channels,
        );
        let u = c.up_channels;
        let sr = c.sr_module.then(|| {
            let up = [
                Conv::same3(&mut p, &mut rng, "sr.up0", c.base_channels, 4 * u),
                Conv::same3(&mut p, &mut rng, "sr.up1", u, 4 * u),
            ];
            (
                up,
                Conv::same3(&mut p, &mut rng, "sr.out", u, c.image_channels),
            )
        });
        let dec_up = [
            Conv::same3(&mut p, &mut rng, "dec.up0", c.base_channels, 4 * u),
            Conv::same3(&mut p, &mut rng, "dec.up1", u, 4 * u),
        ];
        let fuse_in = if c.sr_module { 2 * u } else { u };
        let dec_fuse = [
            Conv::same3(&mut p, &mut rng, "dec.fuse0", fuse_in, u),
            Conv::same3(&mut p, &mut rng, "dec.fuse1", fuse_in, u),
        ];
        let dec_out = Conv::same3(&mut p, &mut rng, "dec.out", u, c.image_channels);
        // Output heads start at mid-gray so the [0, 1] clamp passes gradients.
        for conv in sr.iter().map(|(_, out)| out).chain([&dec_out]) {
            *p.get_mut(conv.b) = Tensor::full(&[c.image_channels], 0.5);
        }
        Ok(Generator {
            config,
            params: p,
            head,
            rdbs,
            global_fuse,
            sr,
            dec_up,
            dec_fuse,
            dec_out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        let c = &self.config;
        let expected_c = match c.fusion {
            Fusion::ImageConcat => c.image_channels * c.n_inputs,
            _ => c.image_channels,
        };
        if s != [expected_c, c.lr_size, c.lr_size] {
            return Err(Error::shape(
                "encoder_forward",
                format!(
                    "expected ({}, {}, {}), got {:?}",
                    expected_c, c.lr_size, c.lr_size, s
                ),
            ));
        }
        Ok(())
    }

    fn rdb_forward(&self, g: &Graph, p: &Bound, block: &Rdb, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        for conv in &block.layers {
            let input = if feats.len() == 1 {
                x
            } else {
                g.concat_channels(&feats)?
            };
            let y = g.relu(conv.forward(g, p, input)?);
            feats.push(y);
        }
        let fused = block.fuse.forward(g, p, g.concat_channels(&feats)?)?;
        g.add(x, fused)
    }

    /// Low-resolution input to `(C_f, lr, lr)` features.
    pub fn encoder_forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let f0 = self.head.forward(g, p, x)?;
        let mut h = f0;
        let mut outs = Vec::with_capacity(self.rdbs.len());
        for block in &self.rdbs {
            h = self.rdb_forward(g, p, block, h)?;
            outs.push(h);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_channels(&outs)?
        };
        let fused = self.global_fuse.forward(g, p, cat)?;
        g.add(f0, fused)
    }

    fn up_stage(&self, g: &Graph, p: &Bound, conv: &Conv, x: Var) -> Result<Var> {
        let y = conv.forward(g, p, x)?;
        Ok(g.relu(g.pixel_shuffle(y, 2)?))
    }

    /// Returns `(I_SP, features at 2x, features at 4x)`.
    pub fn sr_branch_forward(
        &self,
        g: &Graph,
        p: &Bound,
        features: Var,
    ) -> Result<(Var, Var, Var)> {
        let Some((up, out)) = &self.sr else {
            return Err(Error::InvalidArgument(
                "generator was built without the SR branch".into(),
            ));
        };
        let s2 = self.up_stage(g, p, &up[0], features)?;
        let s4 = self.up_stage(g, p, &up[1], s2)?;
        let sp = g.clamp(out.forward(g, p, s4)?, 0.0, 1.0);
        Ok((sp, s2, s4))
    }

    /// Frontal synthesis; `sr` carries the SR-branch maps at 2x and 4x.
    pub fn decoder_forward(
        &self,
        g: &Graph,
        p: &Bound,
        features: Var,
        sr: Option<(Var, Var)>,
    ) -> Result<Var> {
        let mut d = features;
        for stage in 0..2 {
            d = self.up_stage(g, p, &self.dec_up[stage], d)?;
            let input = match sr {
                Some((s2, s4)) => {
                    let inject = if stage == 0 { s2 } else { s4 };
                    let (ds, is) = (g.shape(d), g.shape(inject));
                    if ds[1..] != is[1..] {
                        return Err(Error::shape(
                            "decoder_forward",
                            format!("decoder map {:?} vs SR intermediate {:?}", ds, is),
                        ));
                    }
                    g.concat_channels(&[d, inject])?
                }
                None => d,
            };
            d = g.relu(self.dec_fuse[stage].forward(g, p, input)?);
        }
        Ok(g.clamp(self.dec_out.forward(g, p, d)?, 0.0, 1.0))
    }

    /// Full pass over 1..N low-resolution inputs.
    pub fn forward(&self, g: &Graph, p: &Bound, inputs: &[Var]) -> Result<GeneratorVars> {
        let c = &self.config;
        if inputs.is_empty() {
            return Err(Error::InvalidArgument(
                "generator needs at least one input".into(),
            ));
        }
        if c.fusion == Fusion::Single && inputs.len() > 1 {
            return Err(Error::InvalidArgument(format!(
                "single-image mode got {} inputs",
                inputs.len()
            )));
        }
        if c.fusion == Fusion::ImageConcat && inputs.len() != c.n_inputs {
            return Err(Error::InvalidArgument(format!(
                "image_concat configured for {} inputs, got {}",
                c.n_inputs,
                inputs.len()
            )));
        }
        let (fused, features) = match c.fusion {
            Fusion::Single => {
                let f = self.encoder_forward(g, p, inputs[0])?;
                (f, vec![f])
            }
            Fusion::ImageConcat => {
                let x = if inputs.len() == 1 {
                    inputs[0]
                } else {
                    g.concat_channels(inputs)?
                };
                let f = self.encoder_forward(g, p, x)?;
                (f, vec![f])
            }
            Fusion::FeatureFuse | Fusion::FeatureFuseOrth => {
                let feats = inputs
                    .iter()
                    .map(|&x| self.encoder_forward(g, p, x))
                    .collect::<Result<Vec<_>>>()?;
                let sum = g.add_n(&feats)?;
                (g.scale(sum, 1.0 / feats.len() as f64), feats)
            }
        };
        let blocks = if c.fusion == Fusion::FeatureFuseOrth {
            features
                .iter()
                .map(|&f| feature_block(g, f))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (sp, sf) = if c.sr_module {
            let (sp, s2, s4) = self.sr_branch_forward(g, p, fused)?;
            (sp, self.decoder_forward(g, p, fused, Some((s2, s4)))?)
        } else {
            // no SR branch: the side view is a fixed bicubic upsampling of the first input
            let up = bicubic_resample(&g.value(inputs[0]), Ratio::new(4, 1))?;
            (g.constant(up), self.decoder_forward(g, p, fused, None)?)
        };
        Ok(GeneratorVars {
            sp,
            sf,
            features,
            blocks,
        })
    }

    /// Inference on plain tensors.
    pub fn generate(&self, inputs: &[Tensor]) -> Result<GeneratorOutput> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward(&g, &p, &vars)?;
        let encoder_features = out
            .features
            .iter()
            .map(|&f| {
                let b = feature_block(&g, f)?;
                FeatureBlock::new((*g.value(b)).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratorOutput {
            sp: (*g.value(out.sp)).clone(),
            sf: (*g.value(out.sf)).clone(),
            encoder_features,
        })
    }

    /// Loads parameter values from a name-keyed source.
    pub fn load_params<'a>(
        &mut self,
        prefix: &str,
        named: impl Iterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        self.params.load_named(prefix, named)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(fusion: Fusion, n: usize) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 6,
            n_rdb: 2,
            rdb_layers: 2,
            growth: 4,
            up_channels: 4,
            lr_size: 8,
            hr_size: 32,
            fusion,
            n_inputs: n,
            ..GeneratorConfig::default()
        }
    }

    fn random_lr(c: usize, s: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn3(c, s, s, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn config_invariants() {
        assert!(GeneratorConfig::default().validate().is_ok());
        let bad = GeneratorConfig {
            hr_size: 100,
            ..GeneratorConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GeneratorConfig {
            n_rdb: 0,
            ..GeneratorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_shapes() {
        let cfg = GeneratorConfig {
            n_rdb: 1,
            image_channels: 3,
            base_channels: 64,
            up_channels: 8,
            ..GeneratorConfig::default()
        };
        let gen = Generator::new(cfg, 0).unwrap();
        let g = Graph::new();
        let p = gen.params.bind(&g, false);
        let x = g.constant(Tensor::zeros(&[3, 32, 32]));
        let f = gen.encoder_forward(&g, &p, x).unwrap();
        assert_eq!(g.shape(f), vec![64, 32, 32]);
        assert!(g.value(f).is_finite());
        let (sp, s2, s4) = gen.sr_branch_forward(&g, &p, f).unwrap();
        assert_eq!(g.shape(s2), vec![8, 64, 64]);
        assert_eq!(g.shape(s4), vec![8, 128, 128]);
        assert_eq!(g.shape(sp), vec![3, 128, 128]);
        let sf = gen.decoder_forward(&g, &p, f, Some((s2, s4))).unwrap();
        assert_eq!(g.shape(sf), vec![3, 128, 128]);
        let bad = g.constant(Tensor::zeros(&[3, 16, 16]));
        assert!(gen.encoder_forward(&g, &p, bad).is_err());
    }

    #[test]
    fn deterministic_and_clamped() {
        let gen = Generator::new(small(Fusion::Single, 1), 3).unwrap();
        let x = random_lr(1, 8, 1);
        let a = gen.generate(std::slice::from_ref(&x)).unwrap();
        let b = gen.generate(&[x]).unwrap();
        assert_eq!(a.sf, b.sf);
        assert_eq!(a.sp, b.sp);
        for t in [&a.sf, &a.sp] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_rdb_weights_pass_input_through() {
        let mut gen = Generator::new(small(Fusion::Single, 1), 4).unwrap();
        let ids: Vec<_> = gen
            .params
            .ids()
            .filter(|&id| gen.params.name(id).starts_with("enc.rdb0."))
            .collect();
        for id in ids {
            let z = Tensor::zeros(gen.params.get(id).shape());
            *gen.params.get_mut(id) = z;
        }
        let g = Graph::new();
        let p = gen.params.bind(&g, false);
        let x = g.constant(random_lr(6, 8, 2));
        let block = gen.rdbs[0].clone();
        let y = gen.rdb_forward(&g, &p, &block, x).unwrap();
        assert_eq!(*g.value(y), *g.value(x));
    }

    #[test]
    fn zero_features_give_zero_side_view() {
        let mut gen = Generator::new(small(Fusion::Single, 1), 5).unwrap();
        for id in gen.params.ids().collect::<Vec<_>>() {
            if gen.params.name(id).ends_with(".b") {
                let z = Tensor::zeros(gen.params.get(id).shape());
                *gen.params.get_mut(id) = z;
            }
        }
        let g = Graph::new();
        let p = gen.params.bind(&g, false);
        let f = g.constant(Tensor::zeros(&[6, 8, 8]));
        let (sp, _, _) = gen.sr_branch_forward(&g, &p, f).unwrap();
        assert!(g.value(sp).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sr_injection_is_wired() {
        let gen = Generator::new(small(Fusion::Single, 1), 6).unwrap();
        let g = Graph::new();
        let p = gen.params.bind(&g, false);
        let x = g.constant(random_lr(1, 8, 3));
        let f = gen.encoder_forward(&g, &p, x).unwrap();
        let (_, s2, s4) = gen.sr_branch_forward(&g, &p, f).unwrap();
        let base = gen.decoder_forward(&g, &p, f, Some((s2, s4))).unwrap();
        let bumped = g.constant(g.value(s2).map(|v| v + 0.5));
        let other = gen.decoder_forward(&g, &p, f, Some((bumped, s4))).unwrap();
        assert_ne!(*g.value(base), *g.value(other));
        let wrong = g.constant(Tensor::zeros(&[4, 8, 8]));
        assert!(gen.decoder_forward(&g, &p, f, Some((wrong, s4))).is_err());
    }

    #[test]
    fn single_mode_rejects_multiple_inputs() {
        let gen = Generator::new(small(Fusion::Single, 1), 7).unwrap();
        let x = random_lr(1, 8, 4);
        assert!(gen.generate(&[x.clone(), x]).is_err());
    }

    #[test]
    fn feature_fusion_degenerate_cases() {
        let single = Generator::new(small(Fusion::Single, 1), 8).unwrap();
        let mut fuse = Generator::new(small(Fusion::FeatureFuse, 2), 8).unwrap();
        fuse.params = single.params.clone();
        let x = random_lr(1, 8, 5);
        let y = random_lr(1, 8, 6);
        let s = single.generate(std::slice::from_ref(&x)).unwrap();
        assert_eq!(fuse.generate(std::slice::from_ref(&x)).unwrap().sf, s.sf);
        assert_eq!(fuse.generate(&[x.clone(), x.clone()]).unwrap().sf, s.sf);
        // mean fusion is order independent
        let ab = fuse.generate(&[x.clone(), y.clone()]).unwrap().sf;
        let ba = fuse.generate(&[y, x]).unwrap().sf;
        for (a, b) in ab.data().iter().zip(ba.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn orth_fusion_exports_blocks() {
        let gen = Generator::new(small(Fusion::FeatureFuseOrth, 2), 9).unwrap();
        let g = Graph::new();
        let p = gen.params.bind(&g, true);
        let xs = [
            g.constant(random_lr(1, 8, 7)),
            g.constant(random_lr(1, 8, 8)),
        ];
        let out = gen.forward(&g, &p, &xs).unwrap();
        assert_eq!(out.blocks.len(), 2);
        assert_eq!(g.shape(out.blocks[0]), vec![64, 6]);
        assert_eq!(g.shape(out.blocks[0]), g.shape(out.blocks[1]));
    }

    #[test]
    fn shared_encoder_weights() {
        // one parameter store drives every input's encoding
        let mut gen = Generator::new(small(Fusion::FeatureFuse, 2), 10).unwrap();
        let x = random_lr(1, 8, 9);
        let head = gen.params.ids().next().unwrap();
        let encode = |gen: &Generator| {
            let g = Graph::new();
            let p = gen.params.bind(&g, false);
            let a = g.constant(x.clone());
            let out = gen.forward(&g, &p, &[a, a]).unwrap();
            (
                g.value(out.features[0]).as_ref().clone(),
                g.value(out.features[1]).as_ref().clone(),
            )
        };
        let (a0, a1) = encode(&gen);
        assert_eq!(a0, a1);
        gen.params.get_mut(head).data_mut()[0] += 0.25;
        let (b0, b1) = encode(&gen);
        assert_eq!(b0, b1);
        assert_ne!(a0, b0);
    }

    #[test]
    fn image_concat_widens_head() {
        let gen = Generator::new(small(Fusion::ImageConcat, 2), 11).unwrap();
        let head = gen.params.ids().next().unwrap();
        assert_eq!(gen.params.get(head).shape(), &[6, 2, 3, 3]);
        let x = random_lr(1, 8, 10);
        assert_eq!(
            gen.generate(&[x.clone(), x.clone()]).unwrap().sf.shape(),
            &[1, 32, 32]
        );
        assert!(gen.generate(&[x]).is_err());
    }

    #[test]
    fn no_sr_ablation_keeps_output_contract() {
        let cfg = GeneratorConfig {
            sr_module: false,
            ..small(Fusion::Single, 1)
        };
        let gen = Generator::new(cfg, 12).unwrap();
        let out = gen.generate(&[random_lr(1, 8, 11)]).unwrap();
        assert_eq!(out.sp.shape(), &[1, 32, 32]);
        assert_eq!(out.sf.shape(), &[1, 32, 32]);
        assert!(!gen.params.iter().any(|(n, _)| n.starts_with("sr.")));

        let color = GeneratorConfig {
            sr_module: false,
            image_channels: 3,
            ..small(Fusion::ImageConcat, 2)
        };
        let gen = Generator::new(color, 12).unwrap();
        let first = random_lr(3, 8, 14);
        let out = gen.generate(&[first.clone(), random_lr(3, 8, 15)]).unwrap();
        assert_eq!(out.sp.shape(), &[3, 32, 32]);
        assert_eq!(out.sp, bicubic_resample(&first, Ratio::new(4, 1)).unwrap());
    }

    #[test]
    fn tiny_generator_gradcheck() {
        use crate::numerics::{gradcheck_multi, GradcheckOptions};
        let gen = Generator::new(GeneratorConfig::tiny(), 13).unwrap();
        let x = random_lr(1, 8, 12);
        let probe = random_lr(1, 32, 13);
        let mut points = vec![x];
        points.extend(gen.params.tensors().iter().cloned());
        let r = gradcheck_multi(
            |g, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let out = gen.forward(g, &p, &v[..1])?;
                let w = g.constant(probe.clone());
                let a = g.sum(g.mul(out.sf, w)?);
                let b = g.sum(g.square(out.sp));
                g.add(a, b)
            },
            &points,
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }
}
