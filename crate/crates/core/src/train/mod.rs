//! Three-stage synthesis, contrastive batch assembly and alternating
//! discriminator / generator updates.

pub mod adam;
mod fit;
pub mod sampler;

use tch::{Kind, Tensor};

use crate::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{self, D2ca, Features};
use crate::objectives::{
    loss_adversarial, loss_au_bce, loss_decoupling_tensor, loss_fcl, loss_icl, loss_orthogonality,
    loss_reconstruction, loss_representation_alignment, loss_total_tensor, AdversarialRole,
    CycleFeatures, LossReport, LossTerms,
};
use crate::synthetic::dataset::{ImageStack, LabeledSplit, UnlabeledSplit};
use crate::synthetic::Domain;

pub use adam::Adam;
pub use fit::{fit, read_metrics, FitOutcome, MetricsRow, METRICS_FILE};
pub use sampler::{sample_batch, sample_fcl_triplets, steps_per_epoch, BatchIndices};

/// One training batch as tensors. Target images carry no labels.
pub struct Batch {
    pub source: Tensor,
    /// `[N, K]` source AU labels as 0/1 floats.
    pub labels: Tensor,
    pub source_ids: Vec<u32>,
    pub target: Tensor,
}

fn stack(images: &ImageStack, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * 3 * images.height * images.width);
    for &i in idx {
        data.extend_from_slice(images.image_chw(i));
    }
    model::images_to_tensor(&data, idx.len(), images.height, images.width)
}

impl Batch {
    pub fn gather(source: &LabeledSplit, target: &UnlabeledSplit, idx: &BatchIndices) -> Self {
        let k = source.num_aus;
        let labels: Vec<f32> = idx
            .source
            .iter()
            .flat_map(|&i| source.labels[i].as_f32())
            .collect();
        Self {
            source: stack(&source.images, &idx.source),
            labels: Tensor::from_slice(&labels).reshape([idx.source.len() as i64, k as i64]),
            source_ids: idx.source.iter().map(|&i| source.identity_ids[i]).collect(),
            target: stack(&target.images, &idx.target),
        }
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    pub fn to_kind(&self, kind: Kind) -> Self {
        Self {
            source: self.source.to_kind(kind),
            labels: self.labels.to_kind(kind),
            source_ids: self.source_ids.clone(),
            target: self.target.to_kind(kind),
        }
    }
}

/// Inputs, AU-swapped images and reconstructions of one batch, with the
/// features of the four images the cycle encodes.
pub struct SynthesisBundle {
    pub i_s: Tensor,
    pub i_t: Tensor,
    /// Source face and style carrying the target's AUs.
    pub i_st: Tensor,
    /// Target face and style carrying the source's AUs.
    pub i_ts: Tensor,
    pub hat_s: Tensor,
    pub hat_t: Tensor,
    pub hat_st: Tensor,
    pub hat_ts: Tensor,
    pub f_s: Features,
    pub f_t: Features,
    pub f_st: Features,
    pub f_ts: Features,
}

impl SynthesisBundle {
    pub fn batch_size(&self) -> i64 {
        self.i_s.size()[0]
    }

    /// The eight image blocks in contrastive order:
    /// `I_s, I_t, I_st, I_ts, hat_s, hat_t, hat_st, hat_ts`.
    pub fn images(&self) -> [&Tensor; 8] {
        [
            &self.i_s,
            &self.i_t,
            &self.i_st,
            &self.i_ts,
            &self.hat_s,
            &self.hat_t,
            &self.hat_st,
            &self.hat_ts,
        ]
    }
}

fn split2(t: &Tensor, n: i64) -> (Tensor, Tensor) {
    (t.narrow(0, 0, n), t.narrow(0, n, n))
}

/// Runs the decoupling, swap and cycle stages on a batch of pairs.
///
/// Stage one encodes both inputs and decodes the swaps
/// `I_st = G(au_t, dm_s)` and `I_ts = G(au_s, dm_t)`. The swaps are
/// re-encoded (with the domain encoder of the face they show) and decoded
/// back: `hat_s = G(au_ts, dm_st)`, `hat_t = G(au_st, dm_ts)`, plus the
/// self-reconstructions `hat_st = G(au_st, dm_st)` and
/// `hat_ts = G(au_ts, dm_ts)`. Nothing is detached.
pub fn forward_synthesis(model: &D2ca, i_s: &Tensor, i_t: &Tensor) -> Result<SynthesisBundle> {
    if i_s.size() != i_t.size() {
        return Err(Error::Shape(format!(
            "source batch {:?} and target batch {:?} differ",
            i_s.size(),
            i_t.size()
        )));
    }
    let n = i_s.size()[0];
    let (au_s, au_t) = split2(&model.encode_au(&Tensor::cat(&[i_s, i_t], 0))?, n);
    let dm_s = model.encode_domain(i_s, Domain::Source)?;
    let dm_t = model.encode_domain(i_t, Domain::Target)?;
    let swapped = model.decode(&Tensor::cat(&[&au_t, &au_s], 0), &Tensor::cat(&[&dm_s, &dm_t], 0))?;
    let (i_st, i_ts) = split2(&swapped, n);
    let (au_st, au_ts) = split2(&model.encode_au(&swapped)?, n);
    let dm_st = model.encode_domain(&i_st, Domain::Source)?;
    let dm_ts = model.encode_domain(&i_ts, Domain::Target)?;
    let recon = model.decode(
        &Tensor::cat(&[&au_ts, &au_st, &au_st, &au_ts], 0),
        &Tensor::cat(&[&dm_st, &dm_ts, &dm_st, &dm_ts], 0),
    )?;
    let hat = recon.chunk(4, 0);
    Ok(SynthesisBundle {
        i_s: i_s.shallow_clone(),
        i_t: i_t.shallow_clone(),
        i_st,
        i_ts,
        hat_s: hat[0].shallow_clone(),
        hat_t: hat[1].shallow_clone(),
        hat_st: hat[2].shallow_clone(),
        hat_ts: hat[3].shallow_clone(),
        f_s: Features { au: au_s, dm: dm_s },
        f_t: Features { au: au_t, dm: dm_t },
        f_st: Features { au: au_st, dm: dm_st },
        f_ts: Features { au: au_ts, dm: dm_ts },
    })
}

/// Projects all `8N` images and returns the embeddings with the positive
/// pairs: each of the first `4N` images with its reconstruction `4N` rows
/// later.
pub fn assemble_icl_batch(model: &D2ca, b: &SynthesisBundle) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let n = b.batch_size();
    // Reconstructions are encoded with the domain encoder of the face they show.
    let au_hat = model.encode_au(&Tensor::cat(&[&b.hat_s, &b.hat_t, &b.hat_st, &b.hat_ts], 0))?;
    let dm_hat_source = model.encode_domain(&Tensor::cat(&[&b.hat_s, &b.hat_st], 0), Domain::Source)?;
    let dm_hat_target = model.encode_domain(&Tensor::cat(&[&b.hat_t, &b.hat_ts], 0), Domain::Target)?;
    let (dm_hat_s, dm_hat_st) = split2(&dm_hat_source, n);
    let (dm_hat_t, dm_hat_ts) = split2(&dm_hat_target, n);
    let au = Tensor::cat(&[&b.f_s.au, &b.f_t.au, &b.f_st.au, &b.f_ts.au, &au_hat], 0);
    let dm = Tensor::cat(
        &[
            &b.f_s.dm, &b.f_t.dm, &b.f_st.dm, &b.f_ts.dm, &dm_hat_s, &dm_hat_t, &dm_hat_st, &dm_hat_ts,
        ],
        0,
    );
    let emb = model.project_contrastive(&au, &dm)?;
    let half = 4 * n as usize;
    let pairs = (0..half).map(|i| (i, i + half)).collect();
    Ok((emb, pairs))
}

/// Generator-side objective of one batch.
pub struct GeneratorObjective {
    pub total: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

fn zero_like(t: &Tensor) -> Tensor {
    Tensor::zeros([], (t.kind(), t.device()))
}

/// `L_tot` and its report for a batch, using the discriminators as they
/// are. `step` keys the triplet sampler.
pub fn generator_objective(
    model: &D2ca,
    config: &TrainConfig,
    batch: &Batch,
    step: u64,
) -> Result<GeneratorObjective> {
    Ok(generator_objective_with(model, config, batch, step, None)?.0)
}

fn generator_objective_with(
    model: &D2ca,
    config: &TrainConfig,
    batch: &Batch,
    step: u64,
    bundle: Option<SynthesisBundle>,
) -> Result<(GeneratorObjective, Option<SynthesisBundle>)> {
    let w = config.weights;
    if config.source_only {
        let probs = model.predict_au(&model.encode_au(&batch.source)?)?;
        let l_au = loss_au_bce(&batch.labels, &probs)?;
        let z = zero_like(&l_au);
        let terms = LossTerms {
            ort: z.shallow_clone(),
            au_s: l_au.shallow_clone(),
            au_t: z.shallow_clone(),
            rep_s: z.shallow_clone(),
            rep_t: z.shallow_clone(),
            rec_s: z.shallow_clone(),
            rec_t: z.shallow_clone(),
            adv_s: z.shallow_clone(),
            adv_t: z.shallow_clone(),
        };
        let report = LossReport::from_terms(&to_f64(&terms), 0.0, 0.0, w);
        return Ok((GeneratorObjective { total: l_au, report }, None));
    }
    let b = match bundle {
        Some(b) => b,
        None => forward_synthesis(model, &batch.source, &batch.target)?,
    };
    let au_s = loss_au_bce(&batch.labels, &model.predict_au(&b.f_s.au)?)?;
    // The target-styled face carrying the source's AUs inherits the source labels.
    let au_t = loss_au_bce(&batch.labels, &model.predict_au(&b.f_ts.au)?)?;
    let ort = loss_orthogonality(&b.f_s.au, &b.f_s.dm, &b.f_t.au, &b.f_t.dm)?;
    let reference = |t: &Tensor| if config.rep_stop_gradient { t.detach() } else { t.shallow_clone() };
    let (rep_s, rep_t) = loss_representation_alignment(&CycleFeatures {
        au_s: &reference(&b.f_s.au),
        au_t: &reference(&b.f_t.au),
        dm_s: &reference(&b.f_s.dm),
        dm_t: &reference(&b.f_t.dm),
        au_st: &b.f_st.au,
        dm_st: &b.f_st.dm,
        au_ts: &b.f_ts.au,
        dm_ts: &b.f_ts.dm,
    })?;
    let (rec_s, rec_t) = loss_reconstruction(&b.i_s, &b.i_t, &b.hat_s, &b.hat_t)?;
    let fake_s = model.discriminate(&b.i_st, Domain::Source)?;
    let fake_t = model.discriminate(&b.i_ts, Domain::Target)?;
    let adv_s = loss_adversarial(&fake_s, &fake_s, AdversarialRole::Generator)?;
    let adv_t = loss_adversarial(&fake_t, &fake_t, AdversarialRole::Generator)?;
    let terms = LossTerms {
        ort,
        au_s,
        au_t,
        rep_s,
        rep_t,
        rec_s,
        rec_t,
        adv_s,
        adv_t,
    };
    let deco = loss_decoupling_tensor(&terms, &w);
    let icl = if config.icl_enabled() {
        let (emb, pairs) = assemble_icl_batch(model, &b)?;
        loss_icl(&emb, &pairs, w.tau)?
    } else {
        zero_like(&deco)
    };
    let fcl = if config.fcl_enabled() {
        let per_anchor = (config.fcl_per_anchor > 0).then_some(config.fcl_per_anchor);
        let triplets = sample_fcl_triplets(&batch.source_ids, per_anchor, config.seed, step)?;
        loss_fcl(&b.f_s.dm, &triplets, w.alpha)?
    } else {
        zero_like(&deco)
    };
    let total = loss_total_tensor(&deco, &icl, &fcl, w.lambda);
    let report = LossReport::from_terms(&to_f64(&terms), scalar(&icl), scalar(&fcl), w);
    Ok((GeneratorObjective { total, report }, Some(b)))
}

fn to_f64(t: &LossTerms<Tensor>) -> LossTerms<f64> {
    LossTerms {
        ort: scalar(&t.ort),
        au_s: scalar(&t.au_s),
        au_t: scalar(&t.au_t),
        rep_s: scalar(&t.rep_s),
        rep_t: scalar(&t.rep_t),
        rec_s: scalar(&t.rec_s),
        rec_t: scalar(&t.rec_t),
        adv_s: scalar(&t.adv_s),
        adv_t: scalar(&t.adv_t),
    }
}

/// Discriminator objective values `(source, target)` for a bundle, with
/// the fakes detached. These are the quantities the discriminators
/// maximize.
pub fn discriminator_objective(model: &D2ca, b: &SynthesisBundle) -> Result<(Tensor, Tensor)> {
    let d_s = loss_adversarial(
        &model.discriminate(&b.i_s, Domain::Source)?,
        &model.discriminate(&b.i_st.detach(), Domain::Source)?,
        AdversarialRole::Discriminator,
    )?;
    let d_t = loss_adversarial(
        &model.discriminate(&b.i_t, Domain::Target)?,
        &model.discriminate(&b.i_ts.detach(), Domain::Target)?,
        AdversarialRole::Discriminator,
    )?;
    Ok((d_s, d_t))
}

fn non_finite(step: u64, report: &LossReport) -> Error {
    Error::NonFinite {
        step,
        diagnostics: format!(
            "terms {:?}; report {}",
            report.non_finite_terms(),
            serde_json::to_string(report).unwrap_or_default()
        ),
    }
}

/// Parameter groups updated by the generator optimizer.
pub fn generator_groups(config: &TrainConfig) -> Vec<&'static str> {
    if config.source_only {
        vec![model::AU_ENCODER, model::AU_HEAD]
    } else {
        model::GROUPS
            .iter()
            .copied()
            .filter(|g| *g != model::DISCRIMINATOR_SOURCE && *g != model::DISCRIMINATOR_TARGET)
            .collect()
    }
}

pub const DISCRIMINATOR_GROUPS: [&str; 2] = [model::DISCRIMINATOR_SOURCE, model::DISCRIMINATOR_TARGET];

/// Model plus the two optimizers and the step counter.
pub struct Trainer {
    pub model: D2ca,
    pub config: TrainConfig,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Steps completed so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = D2ca::new(&config.model, config.seed)?;
        Ok(Self::with_model(model, config))
    }

    fn with_model(model: D2ca, config: &TrainConfig) -> Self {
        let opt_g = Adam::new(
            model.group_parameters(&generator_groups(config)),
            config.learning_rate,
            config.beta1,
            config.beta2,
        );
        let opt_d = Adam::new(
            model.group_parameters(&DISCRIMINATOR_GROUPS),
            config.learning_rate,
            config.beta1,
            config.beta2,
        );
        Self {
            model,
            config: config.clone(),
            opt_g,
            opt_d,
            step: 0,
        }
    }

    /// One discriminator update followed by one generator update. Returns
    /// the generator-step report (values before the generator update) with
    /// the discriminator objective values filled in.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let step = self.step;
        if self.config.source_only {
            let obj = generator_objective(&self.model, &self.config, batch, step)?;
            if !obj.report.non_finite_terms().is_empty() {
                return Err(non_finite(step, &obj.report));
            }
            self.opt_g.backward_step(&obj.total);
            self.step += 1;
            return Ok(obj.report);
        }
        let bundle = forward_synthesis(&self.model, &batch.source, &batch.target)?;
        let (d_s, d_t) = discriminator_objective(&self.model, &bundle)?;
        let (dv_s, dv_t) = (scalar(&d_s), scalar(&d_t));
        if !(dv_s.is_finite() && dv_t.is_finite()) {
            let report = LossReport {
                d_adv_s: dv_s,
                d_adv_t: dv_t,
                weights: self.config.weights,
                ..LossReport::default()
            };
            return Err(non_finite(step, &report));
        }
        self.opt_d.backward_step(&(-(d_s + d_t)));
        let (obj, _) =
            generator_objective_with(&self.model, &self.config, batch, step, Some(bundle))?;
        let mut report = obj.report;
        report.d_adv_s = dv_s;
        report.d_adv_t = dv_t;
        if !report.non_finite_terms().is_empty() || !report.l_total.is_finite() {
            return Err(non_finite(step, &report));
        }
        self.opt_g.backward_step(&obj.total);
        self.step += 1;
        Ok(report)
    }

    /// Generator objective on a batch without any update.
    pub fn evaluate(&self, batch: &Batch, step: u64) -> Result<LossReport> {
        tch::no_grad(|| generator_objective(&self.model, &self.config, batch, step)).map(|o| o.report)
    }

    pub fn checkpoint(&self, epoch: u64) -> Checkpoint {
        let mut optimizer = self.opt_g.state_tensors("generator");
        optimizer.extend(self.opt_d.state_tensors("discriminator"));
        optimizer.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                config: self.config.clone(),
                step: self.step,
                epoch,
                seed: self.config.seed,
            },
            params: self.model.named_parameters(),
            optimizer,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = &ckpt.meta.config;
        config.validate()?;
        let mut model = D2ca::new(&config.model, config.seed)?;
        model.load_parameters(&ckpt.params)?;
        let mut t = Self::with_model(model, config);
        let state: std::collections::BTreeMap<String, Tensor> = ckpt
            .optimizer
            .iter()
            .map(|(n, v)| (n.clone(), v.shallow_clone()))
            .collect();
        t.opt_g.load_state("generator", &state)?;
        t.opt_d.load_state("discriminator", &state)?;
        t.step = ckpt.meta.step;
        Ok(t)
    }
}

/// Loads the model of a checkpoint for inference.
pub fn load_model(ckpt: &Checkpoint) -> Result<D2ca> {
    let cfg = &ckpt.meta.config.model;
    let mut model = D2ca::new(cfg, ckpt.meta.config.seed)?;
    model.load_parameters(&ckpt.params)?;
    Ok(model)
}
