//! Per-user like/dislike memory vectors.
//!
//! Each user owns two D-dim vectors: `like` tracks the last hidden layer
//! output of the user's clicked impressions and `dislike` that of unclicked
//! ones. The memory loss is `(1/D) * ||y*like + (1-y)*dislike - z||^2` and its
//! gradient flows only into the memory vectors; `z` is treated as a constant.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::train::Adagrad;

#[derive(Debug, Clone, PartialEq)]
pub struct UserMemoryRecord {
    pub like: Vec<f64>,
    pub dislike: Vec<f64>,
    pub acc_like: Vec<f64>,
    pub acc_dislike: Vec<f64>,
}

impl UserMemoryRecord {
    pub fn zeros(dim: usize) -> Self {
        UserMemoryRecord {
            like: vec![0.0; dim],
            dislike: vec![0.0; dim],
            acc_like: vec![0.0; dim],
            acc_dislike: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserMemoryStore {
    dim: usize,
    records: HashMap<u64, UserMemoryRecord>,
}

impl UserMemoryStore {
    pub fn new(dim: usize) -> Self {
        UserMemoryStore {
            dim,
            records: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copies of `(like, dislike)`, zeros for users never written.
    pub fn read(&self, user_id: u64) -> (Vec<f64>, Vec<f64>) {
        match self.records.get(&user_id) {
            Some(r) => (r.like.clone(), r.dislike.clone()),
            None => (vec![0.0; self.dim], vec![0.0; self.dim]),
        }
    }

    pub fn record(&self, user_id: u64) -> Option<&UserMemoryRecord> {
        self.records.get(&user_id)
    }

    /// Overwrites the vectors of `user_id`, keeping existing accumulators.
    pub fn set(&mut self, user_id: u64, like: Vec<f64>, dislike: Vec<f64>) {
        assert_eq!(like.len(), self.dim);
        assert_eq!(dislike.len(), self.dim);
        let r = self
            .records
            .entry(user_id)
            .or_insert_with(|| UserMemoryRecord::zeros(self.dim));
        r.like = like;
        r.dislike = dislike;
    }

    pub fn insert_record(&mut self, user_id: u64, record: UserMemoryRecord) -> Result<()> {
        for v in [
            &record.like,
            &record.dislike,
            &record.acc_like,
            &record.acc_dislike,
        ] {
            if v.len() != self.dim {
                return Err(Error::dim("insert_record", self.dim, v.len()));
            }
        }
        self.records.insert(user_id, record);
        Ok(())
    }

    pub fn sorted_users(&self) -> Vec<u64> {
        let mut users: Vec<u64> = self.records.keys().copied().collect();
        users.sort_unstable();
        users
    }
}

fn check_lengths(op: &'static str, like: &[f64], dislike: &[f64], z_last: &[f64]) -> Result<()> {
    if like.len() != z_last.len() || dislike.len() != z_last.len() {
        return Err(Error::dim(
            op,
            format!("memory [{}, {}]", like.len(), dislike.len()),
            format!("z_L[{}]", z_last.len()),
        ));
    }
    Ok(())
}

/// Per-instance memory loss, mean over the D dimensions.
pub fn memory_loss(like: &[f64], dislike: &[f64], label: u8, z_last: &[f64]) -> Result<f64> {
    check_lengths("memory_loss", like, dislike, z_last)?;
    let target = if label == 1 { like } else { dislike };
    let sq: f64 = target
        .iter()
        .zip(z_last)
        .map(|(m, z)| (m - z) * (m - z))
        .sum();
    Ok(sq / z_last.len() as f64)
}

/// Gradient of [`memory_loss`] with respect to `(like, dislike)` only. The
/// vector not selected by the label gets an exact zero gradient.
pub fn memory_gradient(
    like: &[f64],
    dislike: &[f64],
    label: u8,
    z_last: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths("memory_gradient", like, dislike, z_last)?;
    let d = z_last.len();
    let scale = 2.0 / d as f64;
    let residual =
        |m: &[f64]| -> Vec<f64> { m.iter().zip(z_last).map(|(m, z)| scale * (m - z)).collect() };
    Ok(if label == 1 {
        (residual(like), vec![0.0; d])
    } else {
        (vec![0.0; d], residual(dislike))
    })
}

/// Gradient sums collected for one user over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryWrite {
    /// Sum of memory-loss gradients; scaled by alpha when applied.
    pub like: Vec<f64>,
    pub dislike: Vec<f64>,
    /// Sum of prediction-loss gradients reaching the memory through the
    /// network input, if that path is enabled. Not scaled by alpha.
    pub input_like: Option<Vec<f64>>,
    pub input_dislike: Option<Vec<f64>>,
}

impl MemoryWrite {
    pub fn zeros(dim: usize) -> Self {
        MemoryWrite {
            like: vec![0.0; dim],
            dislike: vec![0.0; dim],
            input_like: None,
            input_dislike: None,
        }
    }

    pub fn add_memory_grad(&mut self, g_like: &[f64], g_dislike: &[f64]) {
        add_into(&mut self.like, g_like);
        add_into(&mut self.dislike, g_dislike);
    }

    pub fn add_input_grad(&mut self, g_like: &[f64], g_dislike: &[f64]) {
        let d = g_like.len();
        add_into(self.input_like.get_or_insert_with(|| vec![0.0; d]), g_like);
        add_into(
            self.input_dislike.get_or_insert_with(|| vec![0.0; d]),
            g_dislike,
        );
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn combine(memory: &[f64], input: Option<&Vec<f64>>, alpha: f64, inv_batch: f64) -> Vec<f64> {
    match input {
        Some(inp) => memory
            .iter()
            .zip(inp)
            .map(|(m, i)| (alpha * m + i) * inv_batch)
            .collect(),
        None => memory.iter().map(|m| alpha * m * inv_batch).collect(),
    }
}

/// Applies one Adagrad step per user from a batch's accumulated writes.
///
/// Sums are divided by `batch_size` (not by the user's occurrence count).
/// A half whose combined gradient is exactly zero is left untouched, and a
/// user whose whole gradient is zero is not materialized.
pub fn apply_memory_updates(
    store: &mut UserMemoryStore,
    writes: &BTreeMap<u64, MemoryWrite>,
    batch_size: usize,
    alpha: f64,
    opt: &Adagrad,
) -> Result<()> {
    let inv_batch = 1.0 / batch_size as f64;
    for (&user, w) in writes {
        if w.like.len() != store.dim || w.dislike.len() != store.dim {
            return Err(Error::dim("apply_memory_updates", store.dim, w.like.len()));
        }
        let g_like = combine(&w.like, w.input_like.as_ref(), alpha, inv_batch);
        let g_dislike = combine(&w.dislike, w.input_dislike.as_ref(), alpha, inv_batch);
        let like_zero = g_like.iter().all(|&g| g == 0.0);
        let dislike_zero = g_dislike.iter().all(|&g| g == 0.0);
        if like_zero && dislike_zero {
            continue;
        }
        let dim = store.dim;
        let rec = store
            .records
            .entry(user)
            .or_insert_with(|| UserMemoryRecord::zeros(dim));
        if !like_zero {
            opt.step(&mut rec.like, &g_like, &mut rec.acc_like);
        }
        if !dislike_zero {
            opt.step(&mut rec.dislike, &g_dislike, &mut rec.acc_dislike);
        }
    }
    Ok(())
}
