//! Target-domain AU scoring, Fréchet distance, oracle swap fidelity,
//! AU interpolation and feature export. Nothing here updates parameters.

mod frechet;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::model::{images_to_tensor, D2ca};
use crate::synthetic::dataset::{DatasetManifest, ImageStack};
use crate::synthetic::{oracle_swap, AuLabels, Domain, FaceImage, Renderer, AU_NAMES};

pub use frechet::{frechet_distance, FrechetStats, COVARIANCE_RIDGE};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuScore {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_au: Vec<AuScore>,
    /// Unweighted mean of the per-AU F1 scores.
    pub ave: f64,
    pub threshold: f64,
}

impl F1Report {
    /// Per-AU F1 columns followed by AVE, in percent.
    pub fn table(&self) -> String {
        let mut head: Vec<String> = self.per_au.iter().map(|a| a.name.clone()).collect();
        head.push("AVE".into());
        let mut row: Vec<String> = self.per_au.iter().map(|a| format!("{:.1}", 100.0 * a.f1)).collect();
        row.push(format!("{:.1}", 100.0 * self.ave));
        format!("{}\n{}\n", head.join(","), row.join(","))
    }
}

/// Binarizes `probs` at `threshold` and scores every AU column. An AU with
/// no true and no predicted positives gets F1 = 0, as does any zero
/// denominator.
pub fn f1_scores(probs: &[Vec<f64>], labels: &[AuLabels], threshold: f64) -> Result<F1Report> {
    if probs.is_empty() {
        return Err(Error::invalid("probabilities", "empty input"));
    }
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions vs {} labels", probs.len(), labels.len())));
    }
    let k = labels[0].len();
    if probs.iter().any(|p| p.len() != k) || labels.iter().any(|l| l.len() != k) {
        return Err(Error::Shape(format!("every row must have {k} AUs")));
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let per_au: Vec<AuScore> = (0..k)
        .map(|a| {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (p, l) in probs.iter().zip(labels) {
                match (p[a] >= threshold, l.get(a)) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    (false, false) => {}
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            AuScore {
                name: AU_NAMES.get(a).map_or_else(|| format!("AU#{a}"), |s| s.to_string()),
                precision,
                recall,
                f1: ratio(2.0 * recall * precision, recall + precision),
            }
        })
        .collect();
    let ave = per_au.iter().map(|s| s.f1).sum::<f64>() / k as f64;
    Ok(F1Report {
        per_au,
        ave,
        threshold,
    })
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let t = t.to_kind(Kind::Double).contiguous();
    let (n, d) = (t.size()[0] as usize, t.size()[1] as usize);
    let flat: Vec<f64> = Vec::try_from(t.reshape([-1])).expect("double tensor");
    (0..n).map(|i| flat[i * d..(i + 1) * d].to_vec()).collect()
}

/// Applies `f` to consecutive chunks of an image stack and concatenates
/// the row outputs.
fn map_chunks(
    images: &ImageStack,
    f: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    tch::no_grad(|| {
        let mut start = 0;
        while start < images.len() {
            let end = (start + EVAL_CHUNK).min(images.len());
            let n = 3 * images.height * images.width;
            let x = images_to_tensor(&images.data[start * n..end * n], end - start, images.height, images.width);
            out.extend(rows(&f(&x)?));
            start = end;
        }
        Ok(out)
    })
}

/// AU head probabilities for every image.
pub fn predict_probabilities(model: &D2ca, images: &ImageStack) -> Result<Vec<Vec<f64>>> {
    map_chunks(images, |x| model.predict_au(&model.encode_au(x)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Au,
    Dm,
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "au" => Ok(Self::Au),
            "dm" => Ok(Self::Dm),
            other => Err(Error::invalid("which", format!("`{other}` is neither `au` nor `dm`"))),
        }
    }
}

/// AU or domain features for every image; domain features use the
/// encoder of `domain`.
pub fn extract_features(
    model: &D2ca,
    images: &ImageStack,
    domain: Domain,
    which: FeatureKind,
) -> Result<Vec<Vec<f64>>> {
    map_chunks(images, |x| match which {
        FeatureKind::Au => model.encode_au(x),
        FeatureKind::Dm => model.encode_domain(x, domain),
    })
}

/// Writes one CSV row per image: index, domain, identity, the AU bits when
/// labels are given, then the feature values.
pub fn export_features(
    out: &mut impl Write,
    domain: Domain,
    identity_ids: &[u32],
    labels: Option<&[AuLabels]>,
    features: &[Vec<f64>],
) -> Result<()> {
    let io = |e| Error::io("<feature table>", e);
    if features.len() != identity_ids.len() || labels.is_some_and(|l| l.len() != features.len()) {
        return Err(Error::Shape("feature, identity and label counts differ".into()));
    }
    let d = features.first().map_or(0, |f| f.len());
    let mut header = vec!["index".to_string(), "domain".into(), "identity".into()];
    if let Some(l) = labels {
        let k = l.first().map_or(0, |x| x.len());
        header.extend(AU_NAMES[..k].iter().map(|n| n.to_string()));
    }
    header.extend((0..d).map(|j| format!("f{j}")));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (i, f) in features.iter().enumerate() {
        let mut row = vec![i.to_string(), domain.to_string(), identity_ids[i].to_string()];
        if let Some(l) = labels {
            row.extend(l[i].bits().iter().map(|b| b.to_string()));
        }
        row.extend(f.iter().map(|v| format!("{v:.8e}")));
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub pairs: usize,
    /// Mean L1 between the generated source-side swap and the oracle render.
    pub l1_to_oracle: f64,
    /// Mean L1 between the generated swap and the unchanged source input.
    pub l1_to_source_input: f64,
    /// Fraction of pairs where the generated swap is strictly closer to the
    /// oracle than to the source input.
    pub win_rate: f64,
}

/// Draws `n` cross-domain `(source, target)` record pairs whose AU vectors
/// differ in at least one bit (for equal AU vectors the oracle is the source
/// image and no winner exists).
pub fn sample_swap_pairs(
    source: &DatasetManifest,
    target: &DatasetManifest,
    n: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(Error::DatasetTooSmall("cannot find cross-domain pairs with differing AUs".into()));
        }
        let i = rng.gen_range(0..source.records.len());
        let j = rng.gen_range(0..target.records.len());
        if source.records[i].au != target.records[j].au {
            out.push((i, j));
        }
    }
    Ok(out)
}

fn l1(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let d = (a - b).abs().mean_dim([1i64, 2, 3].as_slice(), false, Some(Kind::Double));
    Vec::try_from(d).expect("double tensor")
}

fn sample_tensor(images: &[FaceImage]) -> Tensor {
    let (h, w) = (images[0].height(), images[0].width());
    let data: Vec<f32> = images.iter().flat_map(|i| i.to_chw()).collect();
    images_to_tensor(&data, images.len(), h, w)
}

/// Compares generated `I_st` against the oracle swap render for each pair.
/// Inputs and oracle are 8-bit quantized like the stored dataset.
pub fn swap_fidelity(
    model: &D2ca,
    source: &DatasetManifest,
    target: &DatasetManifest,
    pairs: &[(usize, usize)],
) -> Result<SwapReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("pairs", "no evaluation pairs"));
    }
    let renderer = Renderer::new(source.height, source.width);
    let (mut to_oracle, mut to_source, mut wins) = (0.0, 0.0, 0usize);
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let mut xs = Vec::new();
        let mut xt = Vec::new();
        let mut oracle = Vec::new();
        for &(i, j) in chunk {
            let s = source.sample(i)?;
            let t = target.sample(j)?;
            let (st, _) = oracle_swap(&renderer, &s, &t)?;
            xs.push(s.image.quantized());
            xt.push(t.image.quantized());
            oracle.push(st.quantized());
        }
        let (xs, xt, oracle) = (sample_tensor(&xs), sample_tensor(&xt), sample_tensor(&oracle));
        let generated = tch::no_grad(|| -> Result<Tensor> {
            let au_t = model.encode_au(&xt)?;
            let dm_s = model.encode_domain(&xs, Domain::Source)?;
            model.decode(&au_t, &dm_s)
        })?;
        for (o, s) in l1(&generated, &oracle).into_iter().zip(l1(&generated, &xs)) {
            to_oracle += o;
            to_source += s;
            wins += usize::from(o < s);
        }
    }
    let n = pairs.len() as f64;
    Ok(SwapReport {
        pairs: pairs.len(),
        l1_to_oracle: to_oracle / n,
        l1_to_source_input: to_source / n,
        win_rate: wins as f64 / n,
    })
}

/// Decodes `G((1 - t) au_a + t au_b, dm_t)` on a uniform grid of `steps`
/// values of `t` in `[0, 1]`. Inputs are single images `[1, 3, H, W]`;
/// the result is `[steps, 3, H, W]`.
pub fn interpolate_au(
    model: &D2ca,
    target: &Tensor,
    source_a: &Tensor,
    source_b: &Tensor,
    steps: usize,
) -> Result<Tensor> {
    if steps < 2 {
        return Err(Error::invalid("steps", format!("{steps} < 2")));
    }
    tch::no_grad(|| {
        let au_a = model.encode_au(source_a)?;
        let au_b = model.encode_au(source_b)?;
        let dm = model.encode_domain(target, Domain::Target)?;
        // One decode per step, so each tile matches a standalone decode bit-exactly.
        let tiles = (0..steps)
            .map(|i| {
                let t = i as f64 / (steps - 1) as f64;
                model.decode(&(&au_a * (1.0 - t) + &au_b * t), &dm)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&tiles, 0))
    })
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    /// AU indices whose bits differ between the two source faces.
    pub differing_aus: Vec<usize>,
    /// Spearman correlation of the AU head score with `t`, per differing AU.
    pub spearman: Vec<f64>,
    /// Smallest cosine between an interpolated decode's target-domain
    /// feature and the target image's.
    pub min_domain_cosine: f64,
}

/// Scores an interpolation path with the model's own AU head and target
/// domain encoder.
pub fn interpolation_report(
    model: &D2ca,
    target: &Tensor,
    path: &Tensor,
    au_a: &AuLabels,
    au_b: &AuLabels,
) -> Result<InterpolationReport> {
    let differing: Vec<usize> = (0..au_a.len()).filter(|&k| au_a.get(k) != au_b.get(k)).collect();
    tch::no_grad(|| {
        let probs = rows(&model.predict_au(&model.encode_au(path)?)?);
        let steps = probs.len();
        let ts: Vec<f64> = (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
        let spearman_per_au = differing
            .iter()
            .map(|&k| {
                let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
                spearman(&ts, &s)
            })
            .collect();
        let dm_ref = model.encode_domain(target, Domain::Target)?;
        let dm_path = model.encode_domain(path, Domain::Target)?;
        let cos = crate::objectives::cosine_rows(&dm_path, &dm_ref.expand_as(&dm_path));
        Ok(InterpolationReport {
            differing_aus: differing.clone(),
            spearman: spearman_per_au,
            min_domain_cosine: cos.min().double_value(&[]),
        })
    })
}

/// Frozen-feature Fréchet distance between generated swaps and real images.
///
/// For `n` random training pairs the model generates both swaps; the real
/// set is the same number of real source and target images. Features come
/// from the AU encoder of `reference`, which is not the model under test.
pub fn generation_fid(
    model: &D2ca,
    reference: &D2ca,
    source: &ImageStack,
    target: &ImageStack,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut si: Vec<usize> = (0..source.len()).collect();
    let mut ti: Vec<usize> = (0..target.len()).collect();
    si.shuffle(&mut rng);
    ti.shuffle(&mut rng);
    let pick = |stack: &ImageStack, idx: &[usize], k: usize| -> Vec<usize> {
        (0..k).map(|i| idx[i % stack.len()]).collect()
    };
    let si = pick(source, &si, n);
    let ti = pick(target, &ti, n);
    let mut real = Vec::with_capacity(2 * n);
    let mut fake = Vec::with_capacity(2 * n);
    tch::no_grad(|| -> Result<()> {
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let gather = |stack: &ImageStack, idx: &[usize]| {
                let data: Vec<f32> = idx.iter().flat_map(|&i| stack.image_chw(i).to_vec()).collect();
                images_to_tensor(&data, idx.len(), stack.height, stack.width)
            };
            let xs = gather(source, &si[start..end]);
            let xt = gather(target, &ti[start..end]);
            let b = crate::train::forward_synthesis(model, &xs, &xt)?;
            fake.extend(rows(&reference.encode_au(&Tensor::cat(&[&b.i_st, &b.i_ts], 0))?));
            real.extend(rows(&reference.encode_au(&Tensor::cat(&[&xs, &xt], 0))?));
        }
        Ok(())
    })?;
    frechet_distance(&FrechetStats::from_rows(&real)?, &FrechetStats::from_rows(&fake)?)
}

/// Loads every image of a labeled split directory as a tensor stack plus
/// labels, for evaluation.
pub fn split_probabilities(model: &D2ca, split_dir: &Path) -> Result<(Vec<Vec<f64>>, Vec<AuLabels>)> {
    let split = crate::synthetic::LabeledSplit::for_evaluation(split_dir)?;
    Ok((predict_probabilities(model, &split.images)?, split.labels))
}
