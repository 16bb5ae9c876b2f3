use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Mat, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::config(format!("unknown optimizer `{s}` (expected adam or sgd)"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

struct Moments {
    m: Mat,
    v: Mat,
}

/// Plain SGD or Adam with bias correction.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    state: BTreeMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update. Parameters missing from `grads` are untouched by SGD
    /// and still decay their Adam moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Mat>) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (&id, g) in grads {
                    store.get_mut(id).scaled_add(-self.lr, g);
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(self.step);
                let c2 = 1.0 - BETA2.powi(self.step);
                let ids: Vec<ParamId> = store.ids().collect();
                for id in ids {
                    let shape = store.get(id).dim();
                    let st = self.state.entry(id).or_insert_with(|| Moments {
                        m: Mat::zeros(shape),
                        v: Mat::zeros(shape),
                    });
                    let zero;
                    let g = match grads.get(&id) {
                        Some(g) => g,
                        None => {
                            zero = Mat::zeros(shape);
                            &zero
                        }
                    };
                    st.m.zip_mut_with(g, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
                    st.v.zip_mut_with(g, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
                    let lr = self.lr;
                    ndarray::Zip::from(store.get_mut(id))
                        .and(&st.m)
                        .and(&st.v)
                        .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + EPS));
                }
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<ParamId, Mat>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}
