use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::feature_rng;
use crate::data::Instance;
use crate::numeric::DenseVector;
use crate::train::Adagrad;

/// Sparse table of K-dim vectors keyed by hashed feature index.
///
/// Unseen keys read as their initial vector, which is a pure function of
/// `(seed, stream_tag, key)`; the entry is only stored once it is updated.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    init_scale: f64,
    seed: u64,
    stream_tag: u64,
    vectors: HashMap<u64, Vec<f64>>,
    accumulators: HashMap<u64, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, init_scale: f64, seed: u64, stream_tag: u64) -> Self {
        EmbeddingTable {
            dim,
            init_scale,
            seed,
            stream_tag,
            vectors: HashMap::new(),
            accumulators: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_tag(&self) -> u64 {
        self.stream_tag
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Uniform in [-init_scale, init_scale).
    pub fn initial_vector(&self, key: u64) -> Vec<f64> {
        if self.init_scale == 0.0 {
            return vec![0.0; self.dim];
        }
        let mut rng = feature_rng(self.seed, self.stream_tag, key);
        (0..self.dim)
            .map(|_| self.init_scale * (2.0 * rng.gen::<f64>() - 1.0))
            .collect()
    }

    pub fn get(&self, key: u64) -> Cow<'_, [f64]> {
        match self.vectors.get(&key) {
            Some(v) => Cow::Borrowed(v),
            None => Cow::Owned(self.initial_vector(key)),
        }
    }

    pub fn accumulator(&self, key: u64) -> Option<&[f64]> {
        self.accumulators.get(&key).map(Vec::as_slice)
    }

    /// Stores `values` (and a zero accumulator if new) for `key`.
    pub fn set(&mut self, key: u64, values: Vec<f64>) {
        assert_eq!(values.len(), self.dim);
        self.accumulators
            .entry(key)
            .or_insert_with(|| vec![0.0; values.len()]);
        self.vectors.insert(key, values);
    }

    /// Inserts a stored entry with its accumulator, as read from a checkpoint.
    pub fn insert_raw(&mut self, key: u64, values: Vec<f64>, acc: Vec<f64>) {
        self.vectors.insert(key, values);
        self.accumulators.insert(key, acc);
    }

    /// Stored keys in ascending order.
    pub fn sorted_keys(&self) -> Vec<u64> {
        let mut keys: Vec<u64> = self.vectors.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn apply_adagrad(&mut self, grads: &HashMap<u64, Vec<f64>>, scale: f64, opt: &Adagrad) {
        for (&key, g) in grads {
            if !self.vectors.contains_key(&key) {
                let init = self.initial_vector(key);
                self.vectors.insert(key, init);
                self.accumulators.insert(key, vec![0.0; self.dim]);
            }
            let v = self.vectors.get_mut(&key).expect("materialized above");
            let acc = self.accumulators.get_mut(&key).expect("materialized above");
            opt.step_scaled(v, g, acc, scale);
        }
    }
}

/// Per-field feature lists in schema order.
pub fn field_features(instance: &Instance) -> Vec<Vec<u64>> {
    instance
        .fields
        .iter()
        .map(|f| f.feature_indices.clone())
        .collect()
}

/// Concatenates one K-slot per field; multi-valued fields are mean-pooled.
pub fn embed_instance(instance: &Instance, table: &EmbeddingTable) -> DenseVector {
    let k = table.dim();
    let mut x = vec![0.0; instance.fields.len() * k];
    for (slot, field) in x.chunks_mut(k).zip(&instance.fields) {
        let n = field.feature_indices.len();
        for &idx in &field.feature_indices {
            for (s, e) in slot.iter_mut().zip(table.get(idx).iter()) {
                *s += e;
            }
        }
        if n > 1 {
            let inv = 1.0 / n as f64;
            for s in slot.iter_mut() {
                *s *= inv;
            }
        }
    }
    x.into()
}

/// Routes `dx` (gradient w.r.t. the concatenated embedding) back to the
/// member embeddings, undoing the mean pooling.
pub fn accumulate_embedding_grads(
    fields: &[Vec<u64>],
    dx: &[f64],
    k: usize,
    grads: &mut HashMap<u64, Vec<f64>>,
) {
    for (slot, features) in dx.chunks(k).zip(fields) {
        let inv = if features.len() > 1 {
            1.0 / features.len() as f64
        } else {
            1.0
        };
        for &idx in features {
            let g = grads.entry(idx).or_insert_with(|| vec![0.0; k]);
            for (gi, s) in g.iter_mut().zip(slot) {
                *gi += s * inv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FieldValue;

    fn instance(fields: Vec<Vec<u64>>) -> Instance {
        Instance {
            label: 1,
            user_id: 1,
            fields: fields
                .into_iter()
                .enumerate()
                .map(|(i, f)| FieldValue {
                    field_index: i as u16,
                    feature_indices: f,
                })
                .collect(),
        }
    }

    #[test]
    fn concat_length_is_fields_times_k() {
        let t = EmbeddingTable::new(10, 0.01, 1, 1);
        let x = embed_instance(&instance(vec![vec![3], vec![4], vec![5]]), &t);
        assert_eq!(x.len(), 30);
        assert_eq!(&x[10..20], t.get(4).as_ref());
    }

    #[test]
    fn repeated_member_equals_single() {
        let t = EmbeddingTable::new(4, 0.5, 2, 1);
        let once = embed_instance(&instance(vec![vec![9]]), &t);
        let twice = embed_instance(&instance(vec![vec![9, 9]]), &t);
        assert_eq!(once, twice);
    }

    #[test]
    fn mean_pooling_matches_scalar_oracle() {
        let t = EmbeddingTable::new(3, 0.5, 5, 1);
        let x = embed_instance(&instance(vec![vec![11, 12], vec![0]]), &t);
        let (ei, ej) = (t.initial_vector(11), t.initial_vector(12));
        for k in 0..3 {
            let expect = (ei[k] + ej[k]) / 2.0;
            assert!((x[k] - expect).abs() < 1e-15);
        }
        assert_eq!(&x[3..6], t.initial_vector(0).as_slice());
    }

    #[test]
    fn lazy_init_is_deterministic_and_read_only() {
        let t = EmbeddingTable::new(4, 0.01, 42, 1);
        assert_eq!(t.get(77), t.get(77));
        assert!(t.get(77).iter().all(|v| v.abs() <= 0.01));
        assert_ne!(t.initial_vector(77), t.initial_vector(78));
        assert_ne!(
            t.initial_vector(77),
            EmbeddingTable::new(4, 0.01, 42, 2).initial_vector(77)
        );
        assert!(t.is_empty());
    }

    #[test]
    fn update_materializes_and_keeps_key_sets_aligned() {
        let mut t = EmbeddingTable::new(2, 0.01, 3, 1);
        let before = t.initial_vector(5);
        let grads = HashMap::from([(5u64, vec![1.0, -1.0])]);
        t.apply_adagrad(&grads, 1.0, &Adagrad::new(0.1, 1e-8));
        assert_eq!(t.len(), 1);
        assert!(t.accumulator(5).is_some());
        let after = t.get(5);
        assert!(after[0] < before[0] && after[1] > before[1]);
    }

    #[test]
    fn embedding_grads_undo_pooling() {
        let mut grads = HashMap::new();
        accumulate_embedding_grads(&[vec![1, 2], vec![3]], &[1.0, 2.0, 4.0, 8.0], 2, &mut grads);
        assert_eq!(grads[&1], vec![0.5, 1.0]);
        assert_eq!(grads[&2], vec![0.5, 1.0]);
        assert_eq!(grads[&3], vec![4.0, 8.0]);
    }
}
