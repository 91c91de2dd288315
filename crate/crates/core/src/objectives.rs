//! Differentiable objectives of the decoupling / adaptation framework.
//!
//! Every function takes batched tensors and returns a scalar tensor that
//! stays on the autograd tape. Probabilities are clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` before any log, and a cosine involving a
//! zero-norm vector is defined as 0.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;
const NORM_FLOOR_SQ: f64 = 1e-24;
/// Largest allowed deviation of an ICL embedding norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Loss weights and contrastive hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Feature-level cycle term weight (gamma_1).
    pub gamma_rep: f64,
    /// Pixel-level reconstruction weight (gamma_2).
    pub gamma_rec: f64,
    /// Adversarial weight (gamma_3).
    pub gamma_adv: f64,
    /// Orthogonality weight (gamma_4).
    pub gamma_ort: f64,
    /// Weight of the two contrastive terms.
    pub lambda: f64,
    /// ICL temperature.
    pub tau: f64,
    /// FCL margin.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_rep: 1.0,
            gamma_rec: 5.0,
            gamma_adv: 0.1,
            gamma_ort: 1.0,
            lambda: 0.1,
            tau: 0.07,
            alpha: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma1", self.gamma_rep),
            ("gamma2", self.gamma_rec),
            ("gamma3", self.gamma_adv),
            ("gamma4", self.gamma_ort),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("{v} must be a finite non-negative weight")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid("tau", format!("{} must be positive", self.tau)));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::invalid("alpha", format!("{} must lie in (0, 2)", self.alpha)));
        }
        Ok(())
    }
}

/// Row-wise cosine similarity of two `[B, d]` tensors.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let dot = (a * b).sum_dim_intlist(-1, false, None::<Kind>);
    let na = (a * a).sum_dim_intlist(-1, false, None::<Kind>);
    let nb = (b * b).sum_dim_intlist(-1, false, None::<Kind>);
    dot / (na * nb).clamp_min(NORM_FLOOR_SQ).sqrt()
}

fn check_same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

/// Soft orthogonality: batch-mean signed cosine between the AU and domain
/// features of each domain, summed over the two domains.
pub fn loss_orthogonality(
    au_s: &Tensor,
    dm_s: &Tensor,
    au_t: &Tensor,
    dm_t: &Tensor,
) -> Result<Tensor> {
    check_same_shape("orthogonality (source)", au_s, dm_s)?;
    check_same_shape("orthogonality (target)", au_t, dm_t)?;
    Ok(cosine_rows(au_s, dm_s).mean(None::<Kind>) + cosine_rows(au_t, dm_t).mean(None::<Kind>))
}

/// Multi-label binary cross-entropy, summed over AUs and averaged over the
/// batch.
pub fn loss_au_bce(labels: &Tensor, probs: &Tensor) -> Result<Tensor> {
    check_same_shape("AU BCE", labels, probs)?;
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let ll = labels * p.log() + (labels.ones_like() - labels) * (p.ones_like() - &p).log();
    Ok(-ll.sum_dim_intlist(-1, false, None::<Kind>).mean(None::<Kind>))
}

/// Batch-mean squared L2 distance between matching rows.
fn mean_sq_distance(a: &Tensor, b: &Tensor) -> Tensor {
    (a - b)
        .square()
        .sum_dim_intlist(-1, false, None::<Kind>)
        .mean(None::<Kind>)
}

/// Features entering the two feature-level cycle terms.
pub struct CycleFeatures<'a> {
    pub au_s: &'a Tensor,
    pub au_t: &'a Tensor,
    pub dm_s: &'a Tensor,
    pub dm_t: &'a Tensor,
    /// Features of the AU-altered source image (target AUs, source domain).
    pub au_st: &'a Tensor,
    pub dm_st: &'a Tensor,
    /// Features of the AU-altered target image (source AUs, target domain).
    pub au_ts: &'a Tensor,
    pub dm_ts: &'a Tensor,
}

/// Returns `(l_rep_s, l_rep_t)`.
///
/// The AU-altered source image should carry the target's AU features and
/// the source's domain features; the AU-altered target image the reverse.
pub fn loss_representation_alignment(f: &CycleFeatures<'_>) -> Result<(Tensor, Tensor)> {
    check_same_shape("rep (AU, source side)", f.au_t, f.au_st)?;
    check_same_shape("rep (domain, source side)", f.dm_s, f.dm_st)?;
    check_same_shape("rep (AU, target side)", f.au_s, f.au_ts)?;
    check_same_shape("rep (domain, target side)", f.dm_t, f.dm_ts)?;
    let rep_s = mean_sq_distance(f.au_t, f.au_st) + mean_sq_distance(f.dm_s, f.dm_st);
    let rep_t = mean_sq_distance(f.au_s, f.au_ts) + mean_sq_distance(f.dm_t, f.dm_ts);
    Ok((rep_s, rep_t))
}

/// Mean absolute pixel error.
pub fn loss_l1(image: &Tensor, reconstruction: &Tensor) -> Result<Tensor> {
    check_same_shape("reconstruction", image, reconstruction)?;
    Ok((image - reconstruction).abs().mean(None::<Kind>))
}

/// Returns `(l_rec_s, l_rec_t)`.
pub fn loss_reconstruction(
    i_s: &Tensor,
    i_t: &Tensor,
    hat_s: &Tensor,
    hat_t: &Tensor,
) -> Result<(Tensor, Tensor)> {
    Ok((loss_l1(i_s, hat_s)?, loss_l1(i_t, hat_t)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialRole {
    Discriminator,
    Generator,
}

fn check_probabilities(what: &str, scores: &Tensor) -> Result<()> {
    let lo = scores.min().double_value(&[]);
    let hi = scores.max().double_value(&[]);
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(Error::invalid(
            what,
            format!("scores must lie in [0, 1], got range [{lo}, {hi}]"),
        ));
    }
    Ok(())
}

/// Patch-averaged log score.
fn mean_log(p: &Tensor) -> Tensor {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).log().mean(None::<Kind>)
}

fn mean_log_complement(p: &Tensor) -> Tensor {
    let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (q.ones_like() - q).log().mean(None::<Kind>)
}

/// Adversarial objective of one domain.
///
/// With [`AdversarialRole::Discriminator`] this is the value the
/// discriminator maximizes, `E[log D(real)] + E[log(1 - D(fake))]`, with
/// the log taken per patch before averaging. With
/// [`AdversarialRole::Generator`] it is the non-saturating surrogate
/// `-E[log D(fake)]` that the generator minimizes; `real` is ignored.
pub fn loss_adversarial(real: &Tensor, fake: &Tensor, role: AdversarialRole) -> Result<Tensor> {
    check_probabilities("fake scores", fake)?;
    match role {
        AdversarialRole::Discriminator => {
            check_probabilities("real scores", real)?;
            Ok(mean_log(real) + mean_log_complement(fake))
        }
        AdversarialRole::Generator => Ok(-mean_log(fake)),
    }
}

/// Named loss components. `T` is `Tensor` while training and `f64` in
/// reports, so the weighted sums below cannot drift apart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub ort: T,
    pub au_s: T,
    pub au_t: T,
    pub rep_s: T,
    pub rep_t: T,
    pub rec_s: T,
    pub rec_t: T,
    pub adv_s: T,
    pub adv_t: T,
}

/// `L_au + g1 L_rep + g2 L_rec + g3 (L_adv^s + L_adv^t) + g4 L_ort`, with
/// `L_au = L_au^s + L_au^t`, `L_rep` and `L_rec` summed over both sides.
pub fn loss_decoupling(t: &LossTerms<f64>, w: &LossWeights) -> f64 {
    (t.au_s + t.au_t)
        + w.gamma_rep * (t.rep_s + t.rep_t)
        + w.gamma_rec * (t.rec_s + t.rec_t)
        + w.gamma_adv * (t.adv_s + t.adv_t)
        + w.gamma_ort * t.ort
}

/// Tensor form of [`loss_decoupling`].
pub fn loss_decoupling_tensor(t: &LossTerms<Tensor>, w: &LossWeights) -> Tensor {
    (&t.au_s + &t.au_t)
        + (&t.rep_s + &t.rep_t) * w.gamma_rep
        + (&t.rec_s + &t.rec_t) * w.gamma_rec
        + (&t.adv_s + &t.adv_t) * w.gamma_adv
        + &t.ort * w.gamma_ort
}

pub fn loss_total(l_deco: f64, l_icl: f64, l_fcl: f64, lambda: f64) -> f64 {
    l_deco + lambda * (l_icl + l_fcl)
}

pub fn loss_total_tensor(l_deco: &Tensor, l_icl: &Tensor, l_fcl: &Tensor, lambda: f64) -> Tensor {
    l_deco + (l_icl + l_fcl) * lambda
}

/// Builds the partner table for a set of undirected positive pairs. Every
/// index may appear in at most one pair; `None` marks negative-only rows.
pub fn partner_table(n: usize, positive_pairs: &[(usize, usize)]) -> Result<Vec<Option<usize>>> {
    let mut partner = vec![None; n];
    for &(a, b) in positive_pairs {
        if a >= n || b >= n || a == b {
            return Err(Error::invalid(
                "positive_pairs",
                format!("pair ({a}, {b}) invalid for {n} embeddings"),
            ));
        }
        for (x, y) in [(a, b), (b, a)] {
            match partner[x] {
                None => partner[x] = Some(y),
                Some(p) if p == y => {}
                Some(_) => {
                    return Err(Error::invalid(
                        "positive_pairs",
                        format!("embedding {x} has more than one positive"),
                    ))
                }
            }
        }
    }
    Ok(partner)
}

/// Image-level InfoNCE.
///
/// Every embedding that belongs to a positive pair is an anchor. Its
/// denominator holds the positive plus every other embedding except the
/// anchor itself, so with `M` embeddings each anchor sees `M - 2`
/// negatives. The loss is the mean over anchors.
pub fn loss_icl(embeddings: &Tensor, positive_pairs: &[(usize, usize)], tau: f64) -> Result<Tensor> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid("tau", format!("{tau} must be positive")));
    }
    let size = embeddings.size();
    if size.len() != 2 || size[0] < 2 {
        return Err(Error::Shape(format!("ICL expects [M >= 2, d] embeddings, got {size:?}")));
    }
    let m = size[0] as usize;
    let norms = embeddings
        .square()
        .sum_dim_intlist(-1, false, None::<Kind>)
        .sqrt();
    let deviation = (norms - 1.0).abs().max().double_value(&[]);
    if !(deviation <= UNIT_NORM_TOLERANCE) {
        return Err(Error::invalid(
            "embeddings",
            format!("not unit-normalized (max norm deviation {deviation:e})"),
        ));
    }
    let partner = partner_table(m, positive_pairs)?;
    let (anchors, positives): (Vec<i64>, Vec<i64>) = partner
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i as i64, p as i64)))
        .unzip();
    if anchors.is_empty() {
        return Err(Error::invalid("positive_pairs", "no positive pair given"));
    }
    let device = embeddings.device();
    let logits = embeddings.matmul(&embeddings.transpose(0, 1)) / tau;
    let self_mask = Tensor::eye(m as i64, (Kind::Bool, device));
    let log_prob = logits
        .masked_fill(&self_mask, f64::NEG_INFINITY)
        .log_softmax(1, None::<Kind>);
    let anchors = Tensor::from_slice(&anchors).to_device(device);
    let positives = Tensor::from_slice(&positives).to_device(device);
    let picked = log_prob
        .index_select(0, &anchors)
        .gather(1, &positives.unsqueeze(1), false);
    Ok(-picked.mean(None::<Kind>))
}

/// Feature-level margin loss over identity triplets `(i, j, k)` with
/// `id[i] = id[j] != id[k]`: mean of `max(0, alpha - cos(i, j) + cos(i, k))`.
pub fn loss_fcl(features: &Tensor, triplets: &[(usize, usize, usize)], alpha: f64) -> Result<Tensor> {
    if triplets.is_empty() {
        return Err(Error::EmptyTripletSet);
    }
    let n = features.size()[0] as usize;
    if let Some(t) = triplets.iter().find(|t| t.0 >= n || t.1 >= n || t.2 >= n) {
        return Err(Error::invalid("triplets", format!("{t:?} out of range for batch {n}")));
    }
    let device = features.device();
    let column = |f: fn(&(usize, usize, usize)) -> usize| {
        let idx: Vec<i64> = triplets.iter().map(|t| f(t) as i64).collect();
        features.index_select(0, &Tensor::from_slice(&idx).to_device(device))
    };
    let anchor = column(|t| t.0);
    let positive = column(|t| t.1);
    let negative = column(|t| t.2);
    let hinge = (cosine_rows(&anchor, &negative) - cosine_rows(&anchor, &positive) + alpha).relu();
    Ok(hinge.mean(None::<Kind>))
}

/// Per-term values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ort: f64,
    pub l_au_s: f64,
    pub l_au_t: f64,
    pub l_rep_s: f64,
    pub l_rep_t: f64,
    pub l_rec_s: f64,
    pub l_rec_t: f64,
    /// Generator-side adversarial surrogate for each domain.
    pub l_adv_s: f64,
    pub l_adv_t: f64,
    pub l_icl: f64,
    pub l_fcl: f64,
    pub l_deco: f64,
    pub l_total: f64,
    /// Discriminator objective value (to be maximized) at its update.
    pub d_adv_s: f64,
    pub d_adv_t: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn from_terms(terms: &LossTerms<f64>, l_icl: f64, l_fcl: f64, weights: LossWeights) -> Self {
        let l_deco = loss_decoupling(terms, &weights);
        Self {
            l_ort: terms.ort,
            l_au_s: terms.au_s,
            l_au_t: terms.au_t,
            l_rep_s: terms.rep_s,
            l_rep_t: terms.rep_t,
            l_rec_s: terms.rec_s,
            l_rec_t: terms.rec_t,
            l_adv_s: terms.adv_s,
            l_adv_t: terms.adv_t,
            l_icl,
            l_fcl,
            l_deco,
            l_total: loss_total(l_deco, l_icl, l_fcl, weights.lambda),
            d_adv_s: 0.0,
            d_adv_t: 0.0,
            weights,
        }
    }

    pub fn terms(&self) -> LossTerms<f64> {
        LossTerms {
            ort: self.l_ort,
            au_s: self.l_au_s,
            au_t: self.l_au_t,
            rep_s: self.l_rep_s,
            rep_t: self.l_rep_t,
            rec_s: self.l_rec_s,
            rec_t: self.l_rec_t,
            adv_s: self.l_adv_s,
            adv_t: self.l_adv_t,
        }
    }

    /// Names of the non-finite fields, if any.
    pub fn non_finite_terms(&self) -> Vec<&'static str> {
        [
            ("l_ort", self.l_ort),
            ("l_au_s", self.l_au_s),
            ("l_au_t", self.l_au_t),
            ("l_rep_s", self.l_rep_s),
            ("l_rep_t", self.l_rep_t),
            ("l_rec_s", self.l_rec_s),
            ("l_rec_t", self.l_rec_t),
            ("l_adv_s", self.l_adv_s),
            ("l_adv_t", self.l_adv_t),
            ("l_icl", self.l_icl),
            ("l_fcl", self.l_fcl),
            ("d_adv_s", self.d_adv_s),
            ("d_adv_t", self.d_adv_t),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
        .collect()
    }
}
