use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{LayerGroups, ScheduleError};
use crate::tensor::{Gradients, ParamId, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// Adam with β1 = 0.7, β2 = 0.99, ε = 1e-8.
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.7,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Per-parameter optimizer. Adam moments are kept in f64 regardless of the
/// parameter precision.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: HashMap<ParamId, AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            state: HashMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Adam step counter for `id`, zero before its first update.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |s| s.step)
    }

    /// Updates every unfrozen parameter in place with learning rate
    /// `group_lr * sched_factor`. Frozen groups and their state are left alone.
    pub fn apply_update<T: Real>(
        &mut self,
        params: &mut ParamStore<T>,
        groups: &LayerGroups,
        sched_factor: f64,
        grads: &Gradients<T>,
    ) -> Result<(), ScheduleError> {
        if !(sched_factor > 0.0 && sched_factor <= 1.0) {
            return Err(ScheduleError::Invalid(format!(
                "schedule factor {sched_factor} outside (0, 1]"
            )));
        }
        let unfrozen = groups.unfrozen();
        let missing = unfrozen
            .iter()
            .flat_map(|&g| groups.group(g))
            .find(|id| !grads.contains(**id));
        if let Some(id) = missing {
            return Err(ScheduleError::MissingGradient(params.name(*id).to_string()));
        }
        for g in unfrozen {
            let lr = groups.lr(g) * sched_factor;
            for &id in groups.group(g) {
                let grad = grads.get(id).expect("checked above").data();
                let theta = params.get_mut(id).data_mut();
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (w, &dw) in theta.iter_mut().zip(grad) {
                            *w = T::lit(w.to_f64().unwrap() - lr * dw.to_f64().unwrap());
                        }
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let st = self.state.entry(id).or_insert_with(|| AdamState {
                            m: vec![0.0; theta.len()],
                            v: vec![0.0; theta.len()],
                            step: 0,
                        });
                        st.step += 1;
                        let c1 = 1.0 - beta1.powi(st.step as i32);
                        let c2 = 1.0 - beta2.powi(st.step as i32);
                        for (i, (w, &dw)) in theta.iter_mut().zip(grad).enumerate() {
                            let dw = dw.to_f64().unwrap();
                            st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * dw;
                            st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * dw * dw;
                            let step = lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                            *w = T::lit(w.to_f64().unwrap() - step);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
