//! Adam with per-group learning rates and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::ops;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
    t: u64,
}

/// Outcome of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Parameter group of a name: its first dot-separated segment.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Global L2 norm of the gradients of `names`.
pub fn grad_norm<'a>(ps: &ParamStore, grads: &GradStore, names: impl Iterator<Item = &'a String>) -> Result<f64> {
    let mut sq = 0.0;
    for name in names {
        let var = ps.get(name).expect("name comes from the store");
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += ops::scalar_f64(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(sq.sqrt())
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `lr_for(group)` gives the rate of each parameter
    /// group, or `None` to leave that group untouched. Gradients of updated
    /// groups are rescaled jointly so their global norm is at most `clip`
    /// (`clip <= 0` disables clipping).
    pub fn step(
        &mut self,
        ps: &ParamStore,
        grads: &GradStore,
        lr_for: impl Fn(&str) -> Option<f64>,
        clip: f64,
    ) -> Result<StepStats> {
        let active: Vec<&String> = ps
            .iter()
            .map(|(n, _)| n)
            .filter(|n| lr_for(group_of(n)).is_some())
            .collect();
        let norm = grad_norm(ps, grads, active.iter().copied())?;
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.t as usize,
                what: "gradient norm".into(),
            });
        }
        let clipped = clip > 0.0 && norm > clip;
        let scale = if clipped { clip / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for name in active {
            let var = ps.get(name).expect("name comes from the store");
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let lr = lr_for(group_of(name)).expect("active group");
            // gradients still reference the forward graph; keeping them in the
            // moments would chain every step's graph together
            let g = (g.detach() * scale)?;
            let st = match self.state.get_mut(name.as_str()) {
                Some(st) => st,
                None => {
                    let z = g.zeros_like()?;
                    self.state.entry(name.clone()).or_insert(Moments { m: z.clone(), v: z })
                }
            };
            st.m = ((&st.m * b1)? + (&g * (1.0 - b1))?)?;
            st.v = ((&st.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&st.m / bc1)?;
            let v_hat = (&st.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped,
        })
    }
}
