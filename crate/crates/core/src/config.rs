//! Flat `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known to the target config and may appear at most once; keys that are
//! absent keep their defaults. [`TrainConfig::to_kv`] and
//! [`DataConfig::to_kv`] emit every key in a fixed order, so a snapshot
//! parses back to an equal config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::synthetic::{Domain, SplitSpec};

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
    }
    Ok(out)
}

/// Consumes known keys from a parsed map; whatever remains is unknown.
struct Fields(BTreeMap<String, String>);

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.0.remove(key) {
            *slot = v
                .parse()
                .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Pairs per batch (`N`).
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Triplets sampled per FCL anchor; 0 takes every valid triplet.
    pub fcl_per_anchor: usize,
    /// Treat the first-pass features as constants inside the cycle
    /// alignment term. Without this the term is lowered by pulling every
    /// feature to one point.
    pub rep_stop_gradient: bool,
    pub disable_icl: bool,
    pub disable_fcl: bool,
    /// Train only the AU encoder and head on labeled source data.
    pub source_only: bool,
    /// Write a checkpoint every this many epochs (plus a final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            batch_size: 32,
            epochs: 20,
            learning_rate: 0.001,
            beta1: 0.5,
            beta2: 0.999,
            fcl_per_anchor: 2,
            rep_stop_gradient: true,
            disable_icl: false,
            disable_fcl: false,
            source_only: false,
            checkpoint_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", format!("{} must be at least 2", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", format!("{} must be positive", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("{b} outside [0, 1)")));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every", "must be positive"));
        }
        Ok(())
    }

    pub fn icl_enabled(&self) -> bool {
        !self.source_only && !self.disable_icl
    }

    pub fn fcl_enabled(&self) -> bool {
        !self.source_only && !self.disable_fcl
    }

    /// Short variant label used in run names.
    pub fn variant(&self) -> &'static str {
        match (self.source_only, self.disable_icl, self.disable_fcl) {
            (true, _, _) => "source_only",
            (false, false, false) => "full",
            (false, false, true) => "no_fcl",
            (false, true, false) => "no_icl",
            (false, true, true) => "no_icl_fcl",
        }
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut f = Fields(parse_kv(text)?);
        f.take("seed", &mut c.seed)?;
        f.take("image_size", &mut c.model.image_size)?;
        f.take("width", &mut c.model.width)?;
        f.take("d_au", &mut c.model.d_au)?;
        f.take("d_dm", &mut c.model.d_dm)?;
        f.take("d_proj", &mut c.model.d_proj)?;
        f.take("proj_hidden", &mut c.model.proj_hidden)?;
        f.take("dm_branch", &mut c.model.dm_branch)?;
        f.take("num_aus", &mut c.model.num_aus)?;
        f.take("gamma1", &mut c.weights.gamma_rep)?;
        f.take("gamma2", &mut c.weights.gamma_rec)?;
        f.take("gamma3", &mut c.weights.gamma_adv)?;
        f.take("gamma4", &mut c.weights.gamma_ort)?;
        f.take("lambda", &mut c.weights.lambda)?;
        f.take("tau", &mut c.weights.tau)?;
        f.take("alpha", &mut c.weights.alpha)?;
        f.take("batch_size", &mut c.batch_size)?;
        f.take("epochs", &mut c.epochs)?;
        f.take("learning_rate", &mut c.learning_rate)?;
        f.take("beta1", &mut c.beta1)?;
        f.take("beta2", &mut c.beta2)?;
        f.take("fcl_per_anchor", &mut c.fcl_per_anchor)?;
        f.take("rep_stop_gradient", &mut c.rep_stop_gradient)?;
        f.take("disable_icl", &mut c.disable_icl)?;
        f.take("disable_fcl", &mut c.disable_fcl)?;
        f.take("source_only", &mut c.source_only)?;
        f.take("checkpoint_every", &mut c.checkpoint_every)?;
        f.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&read_text(path)?)
    }

    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let w = &self.weights;
        let mut s = String::new();
        let rows: [(&str, String); 27] = [
            ("seed", self.seed.to_string()),
            ("image_size", m.image_size.to_string()),
            ("width", m.width.to_string()),
            ("d_au", m.d_au.to_string()),
            ("d_dm", m.d_dm.to_string()),
            ("d_proj", m.d_proj.to_string()),
            ("proj_hidden", m.proj_hidden.to_string()),
            ("dm_branch", m.dm_branch.to_string()),
            ("num_aus", m.num_aus.to_string()),
            ("gamma1", w.gamma_rep.to_string()),
            ("gamma2", w.gamma_rec.to_string()),
            ("gamma3", w.gamma_adv.to_string()),
            ("gamma4", w.gamma_ort.to_string()),
            ("lambda", w.lambda.to_string()),
            ("tau", w.tau.to_string()),
            ("alpha", w.alpha.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("fcl_per_anchor", self.fcl_per_anchor.to_string()),
            ("rep_stop_gradient", self.rep_stop_gradient.to_string()),
            ("disable_icl", self.disable_icl.to_string()),
            ("disable_fcl", self.disable_fcl.to_string()),
            ("source_only", self.source_only.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Toy dataset layout: labeled source and unlabeled target training splits,
/// plus held-out identities of both domains for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub image_size: usize,
    pub num_aus: usize,
    /// Per-AU positive rate; empty means 0.3 for every AU.
    pub au_marginals: Vec<f64>,
    pub source_subjects: usize,
    pub target_subjects: usize,
    pub frames_per_subject: usize,
    pub eval_subjects: usize,
    pub eval_frames: usize,
}

pub const SOURCE_SPLIT: &str = "source";
pub const TARGET_SPLIT: &str = "target";
pub const SOURCE_EVAL_SPLIT: &str = "source_eval";
pub const TARGET_EVAL_SPLIT: &str = "target_eval";

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            num_aus: 5,
            au_marginals: Vec::new(),
            source_subjects: 20,
            target_subjects: 20,
            frames_per_subject: 20,
            eval_subjects: 10,
            eval_frames: 20,
        }
    }
}

impl DataConfig {
    pub fn marginals(&self) -> Vec<f64> {
        if self.au_marginals.is_empty() {
            vec![0.3; self.num_aus]
        } else {
            self.au_marginals.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_aus;
        if !(crate::synthetic::types::MIN_AUS..=crate::synthetic::types::MAX_AUS).contains(&k) {
            return Err(Error::invalid("num_aus", format!("{k} outside [3, 10]")));
        }
        if !self.au_marginals.is_empty() && self.au_marginals.len() != k {
            return Err(Error::invalid(
                "au_marginals",
                format!("{} values for num_aus={k}", self.au_marginals.len()),
            ));
        }
        for spec in self.splits() {
            spec.validate()?;
        }
        Ok(())
    }

    /// The four split specifications, with disjoint identity ranges.
    pub fn splits(&self) -> Vec<SplitSpec> {
        let p = self.marginals();
        let spec = |name: &str, domain, subjects, frames, offset| SplitSpec {
            name: name.to_string(),
            domain,
            subjects,
            frames_per_subject: frames,
            au_marginals: p.clone(),
            identity_offset: offset,
            height: self.image_size,
            width: self.image_size,
        };
        vec![
            spec(SOURCE_SPLIT, Domain::Source, self.source_subjects, self.frames_per_subject, 0),
            spec(TARGET_SPLIT, Domain::Target, self.target_subjects, self.frames_per_subject, 10_000),
            spec(SOURCE_EVAL_SPLIT, Domain::Source, self.eval_subjects, self.eval_frames, 20_000),
            spec(TARGET_EVAL_SPLIT, Domain::Target, self.eval_subjects, self.eval_frames, 30_000),
        ]
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut f = Fields(parse_kv(text)?);
        f.take("seed", &mut c.seed)?;
        f.take("image_size", &mut c.image_size)?;
        f.take("num_aus", &mut c.num_aus)?;
        let mut marginals = String::new();
        f.take("au_marginals", &mut marginals)?;
        if !marginals.is_empty() {
            c.au_marginals = marginals
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("`au_marginals`: `{v}`: {e}")))
                })
                .collect::<Result<_>>()?;
        }
        f.take("source_subjects", &mut c.source_subjects)?;
        f.take("target_subjects", &mut c.target_subjects)?;
        f.take("frames_per_subject", &mut c.frames_per_subject)?;
        f.take("eval_subjects", &mut c.eval_subjects)?;
        f.take("eval_frames", &mut c.eval_frames)?;
        f.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&read_text(path)?)
    }

    pub fn to_kv(&self) -> String {
        let marginals: Vec<String> = self.au_marginals.iter().map(|p| p.to_string()).collect();
        format!(
            "seed={}\nimage_size={}\nnum_aus={}\nau_marginals={}\nsource_subjects={}\n\
             target_subjects={}\nframes_per_subject={}\neval_subjects={}\neval_frames={}\n",
            self.seed,
            self.image_size,
            self.num_aus,
            marginals.join(","),
            self.source_subjects,
            self.target_subjects,
            self.frames_per_subject,
            self.eval_subjects,
            self.eval_frames
        )
    }
}
