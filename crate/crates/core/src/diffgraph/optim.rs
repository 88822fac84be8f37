use std::collections::BTreeMap;

use super::{GraphError, ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter. Every trainable
    /// parameter must have a gradient.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<(), GraphError> {
        for (name, p) in params.iter() {
            if !p.trainable {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| GraphError::Contract(format!("adam_step: missing gradient for `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(GraphError::Shape {
                    op: "adam_step",
                    detail: format!("`{name}`: grad {:?} vs param {:?}", g.shape(), p.value.shape()),
                });
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = grads[name].data();
            let n = g.len();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for (((x, gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * weight_decay * *x;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, trainable: bool) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::from_vec(vec![p]), trainable).unwrap();
        s
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        [("p".to_string(), Tensor::from_vec(vec![g]))].into_iter().collect()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(1.0, true);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut s, &grad(1.0)).unwrap();
        // m_hat = 1, v_hat = 1 at t = 1.
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.value("p").unwrap().item() - want).abs() < 1e-15);
        assert!((s.value("p").unwrap().item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut s = single(2.0, true);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamConfig::default()
        });
        adam.step(&mut s, &grad(0.0)).unwrap();
        assert!((s.value("p").unwrap().item() - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = single(1.0, true);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut s, &BTreeMap::new()), Err(GraphError::Contract(_))));
        // Frozen parameters need no gradient.
        let mut frozen = single(1.0, false);
        adam.step(&mut frozen, &BTreeMap::new()).unwrap();
        assert_eq!(frozen.value("p").unwrap().item(), 1.0);
    }
}
