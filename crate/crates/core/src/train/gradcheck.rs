//! Central-difference check of the analytic batch gradient.
//!
//! The objective is `mean(loss1) + alpha * mean(loss2)` over a batch, where
//! each `loss2` term uses the unperturbed `z_L` of its instance (stop
//! gradient). When the prediction loss is not routed into memory, the
//! network reads the unperturbed memory snapshot as well, so perturbing a
//! memory coordinate only moves `loss2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_gradients, ModelState};
use crate::data::Instance;
use crate::error::Result;
use crate::memory::UserMemoryStore;
use crate::model::{forward, ModelParams};
use crate::numeric::sigmoid;

/// Discrepancies up to this size count as agreement. Central differences at
/// step 1e-6 carry roundoff of this order from the forward pass.
pub const ABSOLUTE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter with the largest error, with both values.
    pub worst: String,
    pub checked: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    Bias,
    Linear(u64),
    Factor(u64, usize),
    Embedding(u64, usize),
    Weight(usize, usize),
    LayerBias(usize, usize),
    OutWeight(usize),
    OutBias,
    Like(u64, usize),
    Dislike(u64, usize),
}

fn read(c: Coord, p: &ModelParams, m: &UserMemoryStore) -> f64 {
    match c {
        Coord::Bias => p.linear.as_ref().unwrap().bias,
        Coord::Linear(k) => p.linear.as_ref().unwrap().weight(k),
        Coord::Factor(k, d) => p.factors.as_ref().unwrap().get(k)[d],
        Coord::Embedding(k, d) => p.embeddings.as_ref().unwrap().get(k)[d],
        Coord::Weight(l, i) => p.mlp.as_ref().unwrap().layers[l].w.values()[i],
        Coord::LayerBias(l, i) => p.mlp.as_ref().unwrap().layers[l].b[i],
        Coord::OutWeight(i) => p.mlp.as_ref().unwrap().out_w[i],
        Coord::OutBias => p.mlp.as_ref().unwrap().out_b,
        Coord::Like(u, d) => m.read(u).0[d],
        Coord::Dislike(u, d) => m.read(u).1[d],
    }
}

fn write(c: Coord, p: &mut ModelParams, m: &mut UserMemoryStore, v: f64) {
    match c {
        Coord::Bias => p.linear.as_mut().unwrap().bias = v,
        Coord::Linear(k) => p.linear.as_mut().unwrap().set_weight(k, v),
        Coord::Factor(k, d) => {
            let t = p.factors.as_mut().unwrap();
            let mut e = t.get(k).into_owned();
            e[d] = v;
            t.set(k, e);
        }
        Coord::Embedding(k, d) => {
            let t = p.embeddings.as_mut().unwrap();
            let mut e = t.get(k).into_owned();
            e[d] = v;
            t.set(k, e);
        }
        Coord::Weight(l, i) => p.mlp.as_mut().unwrap().layers[l].w.values_mut()[i] = v,
        Coord::LayerBias(l, i) => p.mlp.as_mut().unwrap().layers[l].b.as_mut_slice()[i] = v,
        Coord::OutWeight(i) => p.mlp.as_mut().unwrap().out_w.as_mut_slice()[i] = v,
        Coord::OutBias => p.mlp.as_mut().unwrap().out_b = v,
        Coord::Like(u, d) => {
            let (mut l, dl) = m.read(u);
            l[d] = v;
            m.set(u, l, dl);
        }
        Coord::Dislike(u, d) => {
            let (l, mut dl) = m.read(u);
            dl[d] = v;
            m.set(u, l, dl);
        }
    }
}

fn sorted_unique(mut v: Vec<u64>) -> Vec<u64> {
    v.sort_unstable();
    v.dedup();
    v
}

fn coordinates(state: &ModelState, batch: &[Instance]) -> Vec<Coord> {
    let p = &state.params;
    let mut out = Vec::new();
    let active = sorted_unique(batch.iter().flat_map(Instance::active_features).collect());
    let embedded = sorted_unique(
        batch
            .iter()
            .flat_map(|i| {
                i.fields
                    .iter()
                    .flat_map(|f| f.feature_indices.iter().copied())
            })
            .collect(),
    );
    if p.linear.is_some() {
        out.push(Coord::Bias);
        out.extend(active.iter().map(|&k| Coord::Linear(k)));
    }
    if let Some(t) = &p.factors {
        for &k in &active {
            out.extend((0..t.dim()).map(|d| Coord::Factor(k, d)));
        }
    }
    if let Some(t) = &p.embeddings {
        for &k in &embedded {
            out.extend((0..t.dim()).map(|d| Coord::Embedding(k, d)));
        }
    }
    if let Some(mlp) = &p.mlp {
        for (l, layer) in mlp.layers.iter().enumerate() {
            out.extend((0..layer.w.values().len()).map(|i| Coord::Weight(l, i)));
            out.extend((0..layer.b.len()).map(|i| Coord::LayerBias(l, i)));
        }
        out.extend((0..mlp.out_w.len()).map(Coord::OutWeight));
        out.push(Coord::OutBias);
    }
    if p.kind.has_memory() {
        let users = sorted_unique(batch.iter().map(|i| i.user_id).collect());
        for u in users {
            for d in 0..state.memory.dim() {
                out.push(Coord::Like(u, d));
                out.push(Coord::Dislike(u, d));
            }
        }
    }
    out
}

/// Per-instance logit and memory target `y*like + (1-y)*dislike`.
struct Probe {
    logit: f64,
    target: Option<Vec<f64>>,
}

fn probe(
    state: &ModelState,
    params: &ModelParams,
    memory: &UserMemoryStore,
    batch: &[Instance],
) -> Result<Vec<Probe>> {
    let kind = params.kind;
    let input_memory = if state.config.loss1_to_memory_input {
        memory
    } else {
        &state.memory
    };
    batch
        .iter()
        .map(|inst| {
            let cache = if kind.has_memory() {
                let (like, dislike) = input_memory.read(inst.user_id);
                forward(params, inst, Some((&like, &dislike)))?
            } else {
                forward(params, inst, None)?
            };
            let target = kind.has_memory().then(|| {
                let (like, dislike) = memory.read(inst.user_id);
                let y = inst.y();
                like.iter()
                    .zip(&dislike)
                    .map(|(l, d)| y * l + (1.0 - y) * d)
                    .collect()
            });
            Ok(Probe {
                logit: cache.logit,
                target,
            })
        })
        .collect()
}

/// Change of the batch objective between two probes, summed per instance in
/// forms that avoid cancelling two nearly equal losses.
fn objective_difference(
    state: &ModelState,
    batch: &[Instance],
    hi: &[Probe],
    lo: &[Probe],
    frozen_z: &[Option<Vec<f64>>],
) -> f64 {
    let (mut d1, mut d2) = (0.0, 0.0);
    for (((inst, h), l), z) in batch.iter().zip(hi).zip(lo).zip(frozen_z) {
        // softplus(a) - softplus(b) = ln1p(sigmoid(b) * expm1(a - b))
        let ds = h.logit - l.logit;
        d1 += (sigmoid(l.logit) * ds.exp_m1()).ln_1p() - inst.y() * ds;
        if let (Some(th), Some(tl), Some(z)) = (&h.target, &l.target, z) {
            let sum: f64 = th
                .iter()
                .zip(tl)
                .zip(z)
                .map(|((a, b), z)| (a - b) * (a + b - 2.0 * z))
                .sum();
            d2 += sum / z.len() as f64;
        }
    }
    let n = batch.len() as f64;
    d1 / n + state.config.alpha * d2 / n
}

fn analytic(c: Coord, g: &super::BatchGradients, state: &ModelState) -> f64 {
    let n = g.count as f64;
    let p = &g.params;
    let mlp = || p.mlp.as_ref().unwrap();
    let memory = |u: u64, d: usize, like: bool| {
        g.memory.get(&u).map_or(0.0, |w| {
            let (mem, input) = if like {
                (&w.like, &w.input_like)
            } else {
                (&w.dislike, &w.input_dislike)
            };
            state.config.alpha * mem[d] + input.as_ref().map_or(0.0, |v| v[d])
        })
    };
    let sum = match c {
        Coord::Bias => p.bias,
        Coord::Linear(k) => p.linear.get(&k).copied().unwrap_or(0.0),
        Coord::Factor(k, d) => p.factors.get(&k).map_or(0.0, |v| v[d]),
        Coord::Embedding(k, d) => p.embeddings.get(&k).map_or(0.0, |v| v[d]),
        Coord::Weight(l, i) => mlp().layers[l].0.values()[i],
        Coord::LayerBias(l, i) => mlp().layers[l].1[i],
        Coord::OutWeight(i) => mlp().out_w[i],
        Coord::OutBias => mlp().out_b,
        Coord::Like(u, d) => memory(u, d, true),
        Coord::Dislike(u, d) => memory(u, d, false),
    };
    sum / n
}

/// `|a - n| / max(|a|, |n|)`, or 0 when `|a - n|` is within [`ABSOLUTE_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABSOLUTE_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compares the training gradient of `batch` against central differences
/// with step `epsilon` for every parameter the batch touches.
pub fn gradient_check(
    state: &ModelState,
    batch: &[Instance],
    epsilon: f64,
) -> Result<GradCheckReport> {
    let grads = batch_gradients(batch, state, None)?;
    let frozen_z: Vec<Option<Vec<f64>>> = batch
        .iter()
        .map(|inst| -> Result<Option<Vec<f64>>> {
            if !state.kind().has_memory() {
                return Ok(None);
            }
            let (like, dislike) = state.memory.read(inst.user_id);
            let cache = forward(&state.params, inst, Some((&like, &dislike)))?;
            Ok(cache.z_last().map(|z| z.to_vec()))
        })
        .collect::<Result<_>>()?;

    let mut params = state.params.clone();
    let mut memory = state.memory.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for c in coordinates(state, batch) {
        let x = read(c, &params, &memory);
        let (hi, lo) = (x + epsilon, x - epsilon);
        write(c, &mut params, &mut memory, hi);
        let p_hi = probe(state, &params, &memory, batch)?;
        write(c, &mut params, &mut memory, lo);
        let p_lo = probe(state, &params, &memory, batch)?;
        write(c, &mut params, &mut memory, x);
        let numeric = objective_difference(state, batch, &p_hi, &p_lo, &frozen_z) / (hi - lo);
        let a = analytic(c, &grads, state);
        let err = relative_error(a, numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = format!("{c:?}: analytic {a:e}, numeric {numeric:e}");
        }
    }
    Ok(report)
}

/// Redraws every bias, sparse coordinate and memory entry `batch` touches
/// uniformly in [-1, 1); Glorot weights are kept.
pub fn randomize_for_check(state: &mut ModelState, batch: &[Instance], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = coordinates(state, batch);
    let ModelState { params, memory, .. } = state;
    for c in coords {
        if matches!(c, Coord::Weight(..) | Coord::OutWeight(_)) {
            continue;
        }
        write(c, params, memory, rng.gen_range(-1.0..1.0));
    }
}
