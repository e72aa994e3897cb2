//! One alternating discriminator/generator update.

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, identity_loss_for, l1_per_pixel, orthogonal_loss,
    patch_loss, pixel_loss, total_g_loss, tv_loss, LossTerms, LossWeights, PATCH_SIZE,
};
use crate::model::{
    parsing_input, Bound, Discriminator, DiscriminatorKind, Generator, GeneratorVars, ParamStore,
    ToyEmbedder,
};
use crate::numerics::{Graph, Tensor, Var};
use crate::synthdata::Dataset;

/// Generator and both discriminators.
#[derive(Clone, Debug)]
pub struct Networks {
    pub generator: Generator,
    pub df: Discriminator,
    pub dp: Discriminator,
}

impl Networks {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Networks {
            generator: Generator::new(config.generator.clone(), config.seed)?,
            df: Discriminator::new(
                DiscriminatorKind::Frontal,
                config.discriminator.clone(),
                config.seed,
            )?,
            dp: Discriminator::new(
                DiscriminatorKind::Parsing,
                config.discriminator.clone(),
                config.seed,
            )?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub g: Adam,
    pub df: Adam,
    pub dp: Adam,
}

impl Optimizers {
    pub fn new(nets: &Networks) -> Self {
        Optimizers {
            g: Adam::new(&nets.generator.params),
            df: Adam::new(&nets.df.params),
            dp: Adam::new(&nets.dp.params),
        }
    }
}

/// Sample indices of one training example; the first is the anchor whose
/// identity, illumination, side view and masks supervise the output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub views: Vec<usize>,
}

/// Batch means of every loss component after one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub d_frontal: f64,
    pub d_parsing: f64,
    pub pixel: f64,
    pub patch: f64,
    pub adversarial: f64,
    pub identity: f64,
    pub tv: f64,
    pub orthogonal: Option<f64>,
    pub total: f64,
}

/// Everything a step reads but does not modify.
pub struct StepContext<'a> {
    pub dataset: &'a Dataset,
    pub config: &'a TrainConfig,
    pub weights: LossWeights,
    pub embedder: Option<&'a ToyEmbedder>,
}

impl<'a> StepContext<'a> {
    pub fn new(
        dataset: &'a Dataset,
        config: &'a TrainConfig,
        embedder: Option<&'a ToyEmbedder>,
    ) -> Result<Self> {
        let weights = config.effective_weights();
        if weights.identity > 0.0 && !embedder.is_some_and(ToyEmbedder::is_trained) {
            return Err(Error::UntrainedEmbedder);
        }
        if dataset.hr_size != config.generator.hr_size
            || dataset.channels != config.generator.image_channels
        {
            return Err(Error::InvalidArgument(format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                dataset.channels,
                dataset.hr_size,
                dataset.hr_size,
                config.generator.image_channels,
                config.generator.hr_size,
                config.generator.hr_size
            )));
        }
        Ok(StepContext {
            dataset,
            config,
            weights,
            embedder,
        })
    }
}

struct Forward {
    graph: Graph,
    vars: GeneratorVars,
    bound: Bound,
}

fn forward_generator(gen: &Generator, ds: &Dataset, item: &BatchItem) -> Result<Forward> {
    let graph = Graph::new();
    let bound = gen.params.bind(&graph, true);
    let inputs: Vec<Var> = item
        .views
        .iter()
        .map(|&i| graph.constant(ds.samples[i].lp.clone()))
        .collect();
    let vars = gen.forward(&graph, &bound, &inputs)?;
    Ok(Forward { graph, vars, bound })
}

fn disc_input(g: &Graph, d: &Discriminator, image: Var, masks: &[Tensor; 3]) -> Result<Var> {
    match d.kind() {
        DiscriminatorKind::Frontal => Ok(image),
        DiscriminatorKind::Parsing => parsing_input(g, image, masks),
    }
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>, scale: f64) {
    match acc {
        None => *acc = Some(grads.into_iter().map(|t| t.scale(scale)).collect()),
        Some(a) => {
            for (x, g) in a.iter_mut().zip(grads) {
                for (xv, gv) in x.data_mut().iter_mut().zip(g.data()) {
                    *xv += scale * gv;
                }
            }
        }
    }
}

fn leaf_grads(g: &Graph, root: Var, bound: &Bound, params: &ParamStore) -> Result<Vec<Tensor>> {
    let mut grads = g.backward_leaves(root)?;
    Ok(bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Mean discriminator loss over `(real, fake, masks)` triples and the
/// averaged gradient of its parameters. Images enter as constants.
pub fn discriminator_gradients(
    d: &Discriminator,
    pairs: &[(&Tensor, &Tensor, [Tensor; 3])],
) -> Result<(f64, Vec<Tensor>)> {
    let scale = 1.0 / pairs.len() as f64;
    let mut acc = None;
    let mut loss = 0.0;
    for (real, fake, masks) in pairs {
        let g = Graph::new();
        let bound = d.params.bind(&g, true);
        let r = disc_input(&g, d, g.constant((*real).clone()), masks)?;
        let f = disc_input(&g, d, g.constant((*fake).clone()), masks)?;
        let pr = d.forward(&g, &bound, r)?;
        let pf = d.forward(&g, &bound, f)?;
        let l = adversarial_d_loss(&g, &[pr], &[pf])?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "{:?} discriminator loss",
                d.kind()
            )));
        }
        loss += v * scale;
        accumulate(&mut acc, leaf_grads(&g, l, &bound, &d.params)?, scale);
    }
    Ok((loss, acc.expect("non-empty batch")))
}

/// Records the generator objective on the forward graph, with both
/// discriminators entering as constants.
fn generator_objective(
    nets: &Networks,
    ctx: &StepContext<'_>,
    fwd: &Forward,
    item: &BatchItem,
) -> Result<(Var, LossTerms<f64>)> {
    let g = &fwd.graph;
    let ds = ctx.dataset;
    let anchor = item.views[0];
    let sample = &ds.samples[anchor];
    let hf_t = ds.frontal(anchor);
    let hf = g.constant(hf_t.clone());
    let masks = ds.masks_of(sample.identity).as_array();
    let v = &fwd.vars;
    let w = &ctx.weights;

    let pixel = if ctx.config.generator.sr_module && !ctx.config.ablation.no_sr_supervision {
        let hp = g.constant(sample.hp.clone());
        pixel_loss(g, hp, v.sp, hf, v.sf)?
    } else {
        l1_per_pixel(g, hf, v.sf)?
    };
    let patch = patch_loss(g, v.sf, hf, PATCH_SIZE, PATCH_SIZE)?;
    let df = nets.df.params.bind(g, false);
    let dp = nets.dp.params.bind(g, false);
    let pf = nets.df.forward(g, &df, v.sf)?;
    let pp = nets.dp.forward(g, &dp, parsing_input(g, v.sf, &masks)?)?;
    let adversarial = g.add(adversarial_g_loss(g, &[pf])?, adversarial_g_loss(g, &[pp])?)?;
    let identity = match ctx.embedder {
        Some(e) if w.identity > 0.0 => identity_loss_for(g, e, v.sf, hf_t)?,
        _ => g.constant(Tensor::scalar(0.0)),
    };
    let tv = tv_loss(g, v.sf)?;
    let orthogonal = if w.orthogonal > 0.0 && v.blocks.len() > 1 {
        Some(orthogonal_loss(g, &v.blocks, ctx.config.orth_variant)?)
    } else {
        None
    };
    let terms = LossTerms {
        pixel,
        patch,
        adversarial,
        identity,
        tv,
        orthogonal,
    };
    let total = total_g_loss(g, w, &terms)?;
    let val = |x: Var| g.value(x).item();
    let values = LossTerms {
        pixel: val(pixel),
        patch: val(patch),
        adversarial: val(adversarial),
        identity: val(identity),
        tv: val(tv),
        orthogonal: orthogonal.map(val),
    };
    Ok((total, values))
}

/// Updates both discriminators on real frontals against detached fakes
/// (`d_steps_per_g` times), then the generator on its weighted objective.
/// `step` labels error messages.
pub fn train_step(
    nets: &mut Networks,
    opts: &mut Optimizers,
    ctx: &StepContext<'_>,
    batch: &[BatchItem],
    lr: f64,
    step: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let ds = ctx.dataset;
    let with_step = |e: Error| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{} (step {})", m, step)),
        other => other,
    };
    let forwards = batch
        .iter()
        .map(|item| forward_generator(&nets.generator, ds, item))
        .collect::<Result<Vec<_>>>()?;

    let fakes: Vec<Tensor> = forwards
        .iter()
        .map(|f| (*f.graph.value(f.vars.sf)).clone())
        .collect();
    let pairs: Vec<(&Tensor, &Tensor, [Tensor; 3])> = batch
        .iter()
        .zip(&fakes)
        .map(|(item, fake)| {
            let a = item.views[0];
            (
                ds.frontal(a),
                fake,
                ds.masks_of(ds.samples[a].identity).as_array(),
            )
        })
        .collect();
    let mut report = StepReport::default();
    for _ in 0..ctx.config.d_steps_per_g {
        let (lf, gf) = discriminator_gradients(&nets.df, &pairs).map_err(with_step)?;
        opts.df
            .update(&mut nets.df.params, &gf, lr)
            .map_err(with_step)?;
        let (lp, gp) = discriminator_gradients(&nets.dp, &pairs).map_err(with_step)?;
        opts.dp
            .update(&mut nets.dp.params, &gp, lr)
            .map_err(with_step)?;
        report.d_frontal = lf;
        report.d_parsing = lp;
    }

    let scale = 1.0 / batch.len() as f64;
    let mut acc = None;
    for (b, (item, fwd)) in batch.iter().zip(&forwards).enumerate() {
        let (total, terms) = generator_objective(nets, ctx, fwd, item).map_err(|e| match e {
            Error::NonFinite(m) => {
                Error::NonFinite(format!("{} (step {}, batch item {})", m, step, b))
            }
            other => other,
        })?;
        report.pixel += terms.pixel * scale;
        report.patch += terms.patch * scale;
        report.adversarial += terms.adversarial * scale;
        report.identity += terms.identity * scale;
        report.tv += terms.tv * scale;
        if let Some(o) = terms.orthogonal {
            *report.orthogonal.get_or_insert(0.0) += o * scale;
        }
        report.total += fwd.graph.value(total).item() * scale;
        accumulate(
            &mut acc,
            leaf_grads(&fwd.graph, total, &fwd.bound, &nets.generator.params)?,
            scale,
        );
    }
    opts.g
        .update(
            &mut nets.generator.params,
            &acc.expect("non-empty batch"),
            lr,
        )
        .map_err(with_step)?;
    Ok(report)
}
