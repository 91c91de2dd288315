//! Adam with explicit, checkpointable moment state.

use std::collections::BTreeMap;

use tch::{Kind, Tensor};

use crate::error::{Error, Result};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Parameters this optimizer owns, sorted by name.
    params: Vec<(String, Tensor)>,
    /// First and second moments per parameter, created on first update.
    state: BTreeMap<String, (Tensor, Tensor, i64)>,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            params,
            state: BTreeMap::new(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Differentiates `loss` with respect to this optimizer's parameters
    /// and applies one update. Gradients are returned by the autograd engine
    /// directly; nothing accumulates in `.grad()`. Parameters the loss does
    /// not reach keep their value and moment state.
    pub fn backward_step(&mut self, loss: &Tensor) {
        let tensors: Vec<&Tensor> = self.params.iter().map(|(_, p)| p).collect();
        let grads = Tensor::run_backward(&[loss], &tensors, false, false);
        self.apply(&grads);
    }

    fn apply(&mut self, grads: &[Tensor]) {
        tch::no_grad(|| {
            for ((name, p), g) in self.params.iter_mut().zip(grads) {
                if !g.defined() {
                    continue;
                }
                let (m, v, t) = self
                    .state
                    .entry(name.clone())
                    .or_insert_with(|| (p.zeros_like(), p.zeros_like(), 0));
                *t += 1;
                let _ = m.f_mul_scalar_(self.beta1).unwrap();
                let _ = m.f_add_(&(g * (1.0 - self.beta1))).unwrap();
                let _ = v.f_mul_scalar_(self.beta2).unwrap();
                let _ = v.f_add_(&(g.square() * (1.0 - self.beta2))).unwrap();
                let bc1 = 1.0 - self.beta1.powi(*t as i32);
                let bc2 = 1.0 - self.beta2.powi(*t as i32);
                let update = (&*m / bc1) / ((&*v / bc2).sqrt() + self.eps) * self.lr;
                let _ = p.f_sub_(&update).unwrap();
            }
        });
    }

    /// Moment tensors as `(prefix.name.m|v|t)` entries.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, (m, v, t)) in &self.state {
            out.push((format!("{prefix}.{name}.m"), m.shallow_clone()));
            out.push((format!("{prefix}.{name}.v"), v.shallow_clone()));
            out.push((format!("{prefix}.{name}.t"), Tensor::from_slice(&[*t])));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.state.clear();
        let lead = format!("{prefix}.");
        for (key, _) in tensors.range(lead.clone()..) {
            let Some(rest) = key.strip_prefix(&lead) else { break };
            let Some(name) = rest.strip_suffix(".t") else { continue };
            let get = |suffix: &str| {
                tensors
                    .get(&format!("{lead}{name}.{suffix}"))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for `{name}` lacks `{suffix}`")))
            };
            let param = self
                .params
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")))?;
            let kind = param.1.kind();
            let m = get("m")?.to_kind(kind);
            let v = get("v")?.to_kind(kind);
            if m.size() != param.1.size() || v.size() != param.1.size() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for `{name}`")));
            }
            let t = get("t")?.to_kind(Kind::Int64).int64_value(&[0]);
            self.state.insert(name.to_string(), (m, v, t));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_scalar_reference() {
        let p = Tensor::from_slice(&[1.0f64, -2.0]).set_requires_grad(true);
        let mut opt = Adam::new(vec![("p".into(), p.shallow_clone())], 0.1, 0.9, 0.999);
        let (mut x, mut m, mut v) = ([1.0f64, -2.0], [0.0; 2], [0.0; 2]);
        for t in 1..=5 {
            opt.backward_step(&(&p * &p).sum(Kind::Double));
            for i in 0..2 {
                let g = 2.0 * x[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                x[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..2 {
            assert!((p.double_value(&[i as i64]) - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn state_round_trip() {
        let p = Tensor::from_slice(&[0.5f32, 1.5]).set_requires_grad(true);
        let mut a = Adam::new(vec![("w".into(), p.shallow_clone())], 0.01, 0.5, 0.999);
        a.backward_step(&(&p * 3.0).sum(Kind::Float));
        let map: BTreeMap<String, Tensor> = a.state_tensors("g").into_iter().collect();
        let mut b = Adam::new(vec![("w".into(), p.shallow_clone())], 0.01, 0.5, 0.999);
        b.load_state("g", &map).unwrap();
        assert_eq!(b.state.len(), 1);
        assert_eq!(b.state["w"].2, 1);
        let mut other = Adam::new(vec![("x".into(), p.shallow_clone())], 0.01, 0.5, 0.999);
        assert!(other.load_state("g", &map).is_err());
    }

    #[test]
    fn params_without_grad_untouched() {
        let used = Tensor::from_slice(&[1.0f32]).set_requires_grad(true);
        let unused = Tensor::from_slice(&[1.0f32]).set_requires_grad(true);
        let mut a = Adam::new(
            vec![("a".into(), used.shallow_clone()), ("b".into(), unused.shallow_clone())],
            0.1,
            0.5,
            0.999,
        );
        a.backward_step(&(&used * 2.0).sum(Kind::Float));
        assert_eq!(unused.double_value(&[0]), 1.0);
        assert!(used.double_value(&[0]) < 1.0);
    }
}
