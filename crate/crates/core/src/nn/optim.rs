use std::collections::BTreeMap;

use super::{BlockId, Gradients, ResidualClassifier};

/// Adam over the tensors of selected blocks. Blocks absent from the
/// gradients passed to [`Adam::step`] are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<BlockId, Vec<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(beta1: f64) -> Self {
        Self {
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut ResidualClassifier, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (&block, block_grads) in grads {
            let params = model.block_params_mut(block);
            let state = self.moments.entry(block).or_insert_with(|| {
                params
                    .iter()
                    .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
                    .collect()
            });
            for ((param, grad), (m, v)) in params.into_iter().zip(block_grads).zip(state.iter_mut()) {
                for i in 0..param.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut model = ResidualClassifier::base(0);
        let before = model.fc.weight.clone();
        let mut grads = Gradients::new();
        let mut g = vec![0.0; before.len()];
        g[0] = 3.0;
        g[1] = -0.5;
        grads.insert(BlockId::FC, vec![g, vec![0.0; model.fc.bias.len()]]);
        let stem = model.stem.clone();
        Adam::new(0.9).step(&mut model, &grads, 0.01);
        assert!((before[0] - model.fc.weight[0] - 0.01).abs() < 1e-9);
        assert!((model.fc.weight[1] - before[1] - 0.01).abs() < 1e-9);
        assert_eq!(model.fc.weight[2], before[2]);
        assert_eq!(model.stem, stem);
    }
}
