use std::collections::HashMap;

use super::embedding::EmbeddingTable;
use crate::data::Instance;
use crate::train::Adagrad;

/// Sparse first-order weights. Absent keys read as 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearParameters {
    weights: HashMap<u64, f64>,
    pub bias: f64,
    accumulators: HashMap<u64, f64>,
    pub bias_acc: f64,
}

impl LinearParameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn weight(&self, key: u64) -> f64 {
        self.weights.get(&key).copied().unwrap_or(0.0)
    }

    pub fn set_weight(&mut self, key: u64, w: f64) {
        self.weights.insert(key, w);
        self.accumulators.entry(key).or_insert(0.0);
    }

    pub fn accumulator(&self, key: u64) -> Option<f64> {
        self.accumulators.get(&key).copied()
    }

    pub fn insert_raw(&mut self, key: u64, w: f64, acc: f64) {
        self.weights.insert(key, w);
        self.accumulators.insert(key, acc);
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sorted_keys(&self) -> Vec<u64> {
        let mut keys: Vec<u64> = self.weights.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn apply_adagrad(
        &mut self,
        grads: &HashMap<u64, f64>,
        bias_grad: f64,
        scale: f64,
        opt: &Adagrad,
    ) {
        for (&key, &g) in grads {
            let w = self.weights.entry(key).or_insert(0.0);
            let acc = self.accumulators.entry(key).or_insert(0.0);
            opt.step_scalar(w, g * scale, acc);
        }
        opt.step_scalar(&mut self.bias, bias_grad * scale, &mut self.bias_acc);
    }
}

/// `bias + sum of weights over the distinct active features`.
pub fn linear_logit(active: &[u64], params: &LinearParameters) -> f64 {
    let mut s = params.bias;
    for &i in active {
        s += params.weight(i);
    }
    s
}

pub fn lr_score(instance: &Instance, params: &LinearParameters) -> f64 {
    linear_logit(&instance.active_features(), params)
}

/// Per-dimension sums of the factor vectors, `S_k = sum_i v_{i,k}`.
pub fn factor_sums(active: &[u64], factors: &EmbeddingTable) -> Vec<f64> {
    let mut sums = vec![0.0; factors.dim()];
    for &i in active {
        for (s, v) in sums.iter_mut().zip(factors.get(i).iter()) {
            *s += v;
        }
    }
    sums
}

/// Second-order term via `1/2 * sum_k (S_k^2 - sum_i v_{i,k}^2)`.
pub fn fm_interaction(active: &[u64], factors: &EmbeddingTable) -> f64 {
    let sums = factor_sums(active, factors);
    let mut squares = vec![0.0; factors.dim()];
    for &i in active {
        for (q, v) in squares.iter_mut().zip(factors.get(i).iter()) {
            *q += v * v;
        }
    }
    0.5 * sums
        .iter()
        .zip(&squares)
        .map(|(s, q)| s * s - q)
        .sum::<f64>()
}

pub fn fm_score(instance: &Instance, linear: &LinearParameters, factors: &EmbeddingTable) -> f64 {
    let active = instance.active_features();
    linear_logit(&active, linear) + fm_interaction(&active, factors)
}

/// Wide and deep parts meet at the logit under one sigmoid.
pub fn wide_deep_logit(instance: &Instance, wide: &LinearParameters, deep_logit: f64) -> f64 {
    lr_score(instance, wide) + deep_logit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FieldValue;
    use crate::numeric::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inst(features: &[u64]) -> Instance {
        Instance {
            label: 0,
            user_id: 0,
            fields: features
                .iter()
                .enumerate()
                .map(|(i, &f)| FieldValue {
                    field_index: i as u16,
                    feature_indices: vec![f],
                })
                .collect(),
        }
    }

    fn pairwise_oracle(active: &[u64], t: &EmbeddingTable) -> f64 {
        let mut s = 0.0;
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let (va, vb) = (t.get(active[a]), t.get(active[b]));
                for k in 0..t.dim() {
                    s += va[k] * vb[k];
                }
            }
        }
        s
    }

    #[test]
    fn zero_model_scores_half() {
        let p = LinearParameters::new();
        assert_eq!(sigmoid(lr_score(&inst(&[1, 2, 3]), &p)), 0.5);
    }

    #[test]
    fn single_weight() {
        let mut p = LinearParameters::new();
        p.set_weight(4, 2.0);
        p.bias = -1.0;
        assert_eq!(lr_score(&inst(&[4]), &p), 1.0);
    }

    #[test]
    fn lr_matches_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = LinearParameters::new();
        p.bias = 0.25;
        let feats: Vec<u64> = vec![3, 17, 42, 99, 1000];
        let mut expect = 0.25;
        for &f in &feats {
            let w = rng.gen_range(-1.0..1.0);
            p.set_weight(f, w);
            expect += w;
        }
        assert!((lr_score(&inst(&feats), &p) - expect).abs() < 1e-15);
    }

    #[test]
    fn fm_single_feature_has_no_interaction() {
        let t = EmbeddingTable::new(4, 1.0, 3, 2);
        assert_eq!(fm_interaction(&[7], &t), 0.0);
    }

    #[test]
    fn fm_orthogonal_factors() {
        let mut t = EmbeddingTable::new(2, 0.0, 0, 2);
        t.set(1, vec![1.0, 0.0]);
        t.set(2, vec![0.0, 3.0]);
        assert_eq!(fm_interaction(&[1, 2], &t), 0.0);
    }

    #[test]
    fn fm_identity_matches_pairwise() {
        let t = EmbeddingTable::new(3, 1.0, 19, 2);
        let active = [5, 6, 7, 8];
        let fast = fm_interaction(&active, &t);
        assert!((fast - pairwise_oracle(&active, &t)).abs() < 1e-12);
    }

    #[test]
    fn fm_with_zero_factors_is_lr() {
        let t = EmbeddingTable::new(3, 0.0, 1, 2);
        let mut p = LinearParameters::new();
        p.set_weight(5, 0.7);
        p.bias = 0.1;
        let i = inst(&[5, 6, 7]);
        assert_eq!(fm_score(&i, &p, &t), lr_score(&i, &p));
    }

    #[test]
    fn wide_deep_composition() {
        let p = LinearParameters::new();
        assert_eq!(wide_deep_logit(&inst(&[1]), &p, 0.8), 0.8);
        let mut w = LinearParameters::new();
        w.set_weight(1, 1.2);
        assert_eq!(sigmoid(wide_deep_logit(&inst(&[1]), &w, 0.0)), sigmoid(1.2));
    }

    #[test]
    fn duplicate_features_count_once() {
        let mut p = LinearParameters::new();
        p.set_weight(9, 1.5);
        let i = Instance {
            label: 0,
            user_id: 0,
            fields: vec![FieldValue {
                field_index: 0,
                feature_indices: vec![9, 9],
            }],
        };
        assert_eq!(lr_score(&i, &p), 1.5);
    }
}
