use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{checkpoint, Gradients, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Per-parameter NAdam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T> {
    pub step: u64,
    /// Product of the momentum schedule up to `step`.
    pub mu_product: f64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// NAdam with the momentum-decay schedule `mu_t = beta1 (1 - 0.5 * 0.96^(t * decay))`.
/// Each parameter keeps its own step count, so parameters that join the
/// active set late start with fresh bias corrections.
#[derive(Debug, Clone, PartialEq)]
pub struct NAdam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum_decay: f64,
    pub slots: Vec<Option<Slot<T>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotMeta {
    name: String,
    step: u64,
    mu_product: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    beta1: f64,
    beta2: f64,
    eps: f64,
    momentum_decay: f64,
    slots: Vec<SlotMeta>,
}

impl<T: Real> NAdam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum_decay: 0.004,
            slots: vec![None; params.len()],
        }
    }

    /// Momentum-schedule value at `step`.
    pub fn momentum_at(&self, step: u64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(step as f64 * self.momentum_decay))
    }

    /// One update of every parameter for which `active` is true.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, active: &[bool]) -> Result<()> {
        if grads.len() != params.len() || active.len() != params.len() || self.slots.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer step over {} params with {} grads, {} flags, {} slots",
                params.len(),
                grads.len(),
                active.len(),
                self.slots.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::contract(format!("learning rate must be > 0, got {lr}")));
        }
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if !active[id.index()] {
                continue;
            }
            let g = grads.get(id);
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} for parameter of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
            let t = self.slots[id.index()].as_ref().map_or(0, |s| s.step) + 1;
            let (mu, mu_next) = (self.momentum_at(t), self.momentum_at(t + 1));
            let slot = self.slots[id.index()].get_or_insert_with(|| Slot {
                step: 0,
                mu_product: 1.0,
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            slot.step = t;
            slot.mu_product *= mu;
            let mu_product = slot.mu_product;
            let bias2 = 1.0 - beta2.powi(t.min(i32::MAX as u64) as i32);
            let c_grad = lr * (1.0 - mu) / (1.0 - mu_product);
            let c_mom = lr * mu_next / (1.0 - mu_product * mu_next);
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i].to_f64().unwrap_or(f64::NAN);
                let mi = beta1 * m[i].to_f64().unwrap_or(f64::NAN) + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].to_f64().unwrap_or(f64::NAN) + (1.0 - beta2) * gi * gi;
                let denom = (vi / bias2).sqrt() + eps;
                let th = theta.to_f64().unwrap_or(f64::NAN) - c_grad * gi / denom - c_mom * mi / denom;
                m[i] = T::from_f64_lossy(mi);
                v[i] = T::from_f64_lossy(vi);
                *theta = T::from_f64_lossy(th);
            }
        }
        Ok(())
    }

    /// Writes `optimizer.json` (schedule state) and the `optimizer_moments`
    /// checkpoint (first and second moments) into `dir`.
    pub fn save(&self, params: &ParamStore<T>, dir: &Path) -> Result<()> {
        let mut moments = ParamStore::<T>::new();
        let mut metas = Vec::new();
        for (id, name, _) in params.iter() {
            if let Some(s) = &self.slots[id.index()] {
                moments.insert(format!("{name}.m"), s.m.clone())?;
                moments.insert(format!("{name}.v"), s.v.clone())?;
                metas.push(SlotMeta {
                    name: name.to_string(),
                    step: s.step,
                    mu_product: s.mu_product,
                });
            }
        }
        checkpoint::save(&moments, dir, "optimizer_moments", None)?;
        let state = StateFile {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            momentum_decay: self.momentum_decay,
            slots: metas,
        };
        let path = dir.join("optimizer.json");
        let json = serde_json::to_string_pretty(&state).expect("optimizer state serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(params: &ParamStore<T>, dir: &Path) -> Result<Self> {
        let path = dir.join("optimizer.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let state: StateFile = serde_path_to_error::deserialize(de).map_err(Error::from_json)?;
        let moments: ParamStore<T> = checkpoint::load(dir, "optimizer_moments")?;
        let mut opt = Self::new(params);
        opt.beta1 = state.beta1;
        opt.beta2 = state.beta2;
        opt.eps = state.eps;
        opt.momentum_decay = state.momentum_decay;
        for meta in state.slots {
            let id = params
                .id(&meta.name)
                .ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter `{}`", meta.name)))?;
            let get = |suffix: &str| {
                moments
                    .id(&format!("{}.{suffix}", meta.name))
                    .map(|m| moments.get(m).clone())
                    .ok_or_else(|| Error::Config(format!("optimizer moments missing `{}.{suffix}`", meta.name)))
            };
            let (m, v) = (get("m")?, get("v")?);
            if m.shape() != params.get(id).shape() || v.shape() != params.get(id).shape() {
                return Err(Error::Config(format!(
                    "optimizer moments of `{}` have the wrong shape",
                    meta.name
                )));
            }
            opt.slots[id.index()] = Some(Slot {
                step: meta.step,
                mu_product: meta.mu_product,
                m,
                v,
            });
        }
        Ok(opt)
    }
}
