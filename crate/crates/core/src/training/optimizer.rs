//! AdamW over the A/B matrices of one adapter set. The published setup names
//! a paged 8-bit AdamW; paging and quantization are GPU memory measures, so
//! the reference backend runs standard AdamW with the same hyperparameters.

use ndarray::Array2;

use crate::adapters::{AdapterSet, StackGrads};

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_learning_rate(learning_rate: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            learning_rate,
            weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// First/second moment state aligned with a set's (A, B) entries in order.
#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: usize,
    moments: Vec<Moment>,
}

#[derive(Debug)]
struct Moment {
    m_a: Array2<f64>,
    v_a: Array2<f64>,
    m_b: Array2<f64>,
    v_b: Array2<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, set: &AdapterSet) -> Self {
        let moments = set
            .entries()
            .iter()
            .map(|(_, adapter)| Moment {
                m_a: Array2::zeros(adapter.a().dim()),
                v_a: Array2::zeros(adapter.a().dim()),
                m_b: Array2::zeros(adapter.b().dim()),
                v_b: Array2::zeros(adapter.b().dim()),
            })
            .collect();
        AdamW {
            config,
            step: 0,
            moments,
        }
    }

    /// One decoupled-weight-decay Adam update on every entry of `set`, reading
    /// gradients for the set's kind out of `grads`.
    pub fn step(&mut self, set: &mut AdapterSet, grads: &StackGrads) -> Result<(), TrainError> {
        let kind = set.kind();
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let set_grads = grads
            .set(kind)
            .ok_or(TrainError::SetMustBeTrainable(kind))?;
        for ((name, adapter), moment) in set.entries_mut().iter_mut().zip(&mut self.moments) {
            let (ga, gb) = set_grads
                .get(name)
                .ok_or_else(|| TrainError::Config(format!("no gradient buffer for {name}")))?;
            update(
                adapter.a_mut(),
                ga,
                &mut moment.m_a,
                &mut moment.v_a,
                c,
                bias1,
                bias2,
            );
            update(
                adapter.b_mut(),
                gb,
                &mut moment.m_b,
                &mut moment.v_b,
                c,
                bias1,
                bias2,
            );
        }
        Ok(())
    }
}

fn update(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    c: &AdamWConfig,
    bias1: f64,
    bias2: f64,
) {
    azip_update(m, grad, c.beta1);
    azip_update_sq(v, grad, c.beta2);
    for ((p, &mi), &vi) in param.iter_mut().zip(m.iter()).zip(v.iter()) {
        let m_hat = mi / bias1;
        let v_hat = vi / bias2;
        *p -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
    }
}

fn azip_update(m: &mut Array2<f64>, g: &Array2<f64>, beta: f64) {
    m.zip_mut_with(g, |mi, &gi| *mi = beta * *mi + (1.0 - beta) * gi);
}

fn azip_update_sq(v: &mut Array2<f64>, g: &Array2<f64>, beta: f64) {
    v.zip_mut_with(g, |vi, &gi| *vi = beta * *vi + (1.0 - beta) * gi * gi);
}
