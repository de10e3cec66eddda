//! Losses, optimization and the time-ordered mini-batch loop.

pub mod adagrad;
pub mod gradcheck;

use std::collections::{BTreeMap, VecDeque};

pub use adagrad::{adagrad_step, Adagrad};
pub use gradcheck::{gradient_check, randomize_for_check, GradCheckReport};

use crate::data::{DatasetSchema, Instance};
use crate::error::{Error, Result};
use crate::eval::{auc, ScoredSet};
use crate::memory::{
    apply_memory_updates, memory_gradient, memory_loss, MemoryWrite, UserMemoryStore,
};
use crate::model::{backward, forward, ModelGradients, ModelKind, ModelParams, ModelShape};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub embedding_dim: usize,
    pub layer_dims: Vec<usize>,
    pub memory_dim: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    pub num_buckets: u64,
    /// Let the prediction loss reach the memory vectors through the
    /// network input, in addition to the memory loss.
    pub loss1_to_memory_input: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model_kind: ModelKind::MaDnn,
            embedding_dim: 10,
            layer_dims: vec![512, 256, 64],
            memory_dim: 64,
            alpha: 1.0,
            batch_size: 128,
            learning_rate: 0.01,
            adagrad_epsilon: 1e-8,
            epochs: 1,
            seed: 0,
            num_buckets: 1 << 20,
            loss1_to_memory_input: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.adagrad_epsilon.is_nan() || self.adagrad_epsilon <= 0.0 {
            return Err(Error::Config("adagrad epsilon must be > 0".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".into()));
        }
        if self.model_kind.has_deep()
            && (self.layer_dims.is_empty() || self.layer_dims.contains(&0))
        {
            return Err(Error::Config(
                "layer dims must be non-empty and positive".into(),
            ));
        }
        if self.model_kind.has_memory() && self.layer_dims.last() != Some(&self.memory_dim) {
            return Err(Error::Config(format!(
                "memory_dim {} must equal the last layer width {:?}",
                self.memory_dim,
                self.layer_dims.last()
            )));
        }
        if self.num_buckets < 2 || !self.num_buckets.is_power_of_two() {
            return Err(Error::Config(format!(
                "buckets must be a power of two, got {}",
                self.num_buckets
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adagrad {
        Adagrad::new(self.learning_rate, self.adagrad_epsilon)
    }

    pub fn shape(&self, num_fields: usize) -> ModelShape {
        ModelShape {
            num_fields,
            embedding_dim: self.embedding_dim,
            layer_dims: self.layer_dims.clone(),
            memory_dim: self.memory_dim,
        }
    }
}

/// Binary cross-entropy of a probability, using `ln_1p` for the negative class.
pub fn logistic_loss(y_hat: f64, label: u8) -> f64 {
    if label == 1 {
        -y_hat.ln()
    } else {
        -(-y_hat).ln_1p()
    }
}

/// Binary cross-entropy computed from the logit: `max(s,0) - s*y + ln(1+e^-|s|)`.
pub fn logistic_loss_from_logit(logit: f64, label: u8) -> f64 {
    let y = f64::from(label);
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

pub fn combined_loss(loss1_mean: f64, loss2_mean: f64, alpha: f64) -> f64 {
    loss1_mean + alpha * loss2_mean
}

/// Everything training mutates: parameters plus the user memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: TrainConfig,
    pub schema_digest: u64,
    pub num_fields: usize,
    pub params: ModelParams,
    pub memory: UserMemoryStore,
}

impl ModelState {
    pub fn init(config: &TrainConfig, schema: &DatasetSchema) -> Result<Self> {
        config.validate()?;
        if config.num_buckets != schema.num_buckets() {
            return Err(Error::Config(format!(
                "config buckets {} differ from schema buckets {}",
                config.num_buckets,
                schema.num_buckets()
            )));
        }
        let params = ModelParams::init(
            config.model_kind,
            &config.shape(schema.num_fields()),
            config.seed,
        )?;
        Ok(ModelState {
            config: config.clone(),
            schema_digest: schema.digest(),
            num_fields: schema.num_fields(),
            params,
            memory: UserMemoryStore::new(config.memory_dim),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.params.kind
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub batch_index: usize,
    pub mean_loss1: f64,
    pub mean_loss2: f64,
    pub count: usize,
    pub examples_seen: usize,
    /// AUC of pre-update predictions over the recent window, when defined.
    pub window_auc: Option<f64>,
}

impl BatchReport {
    pub const CSV_HEADER: &'static str = "batch_index,mean_loss1,mean_loss2,examples_seen";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.9},{:.9},{}",
            self.batch_index, self.mean_loss1, self.mean_loss2, self.examples_seen
        )
    }
}

/// Gradient sums for one batch, before any update is applied.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub params: ModelGradients,
    pub memory: BTreeMap<u64, MemoryWrite>,
    pub loss1_sum: f64,
    pub loss2_sum: f64,
    pub count: usize,
}

/// Forward and backward over a batch against the current (batch-start)
/// state. `scores` receives each pre-update prediction and its label.
pub fn batch_gradients(
    batch: &[Instance],
    state: &ModelState,
    mut scores: Option<&mut Vec<(f64, u8)>>,
) -> Result<BatchGradients> {
    let kind = state.kind();
    let params = &state.params;
    let mut grads = ModelGradients::zeros_like(params);
    let mut writes: BTreeMap<u64, MemoryWrite> = BTreeMap::new();
    let (mut loss1_sum, mut loss2_sum) = (0.0, 0.0);

    for inst in batch {
        let memory = kind.has_memory().then(|| state.memory.read(inst.user_id));
        let cache = forward(
            params,
            inst,
            memory.as_ref().map(|(l, d)| (l.as_slice(), d.as_slice())),
        )?;
        if let Some(s) = scores.as_deref_mut() {
            s.push((cache.y_hat, inst.label));
        }
        loss1_sum += logistic_loss_from_logit(cache.logit, inst.label);
        let dlogit = cache.y_hat - inst.y();
        let input_grad = backward(params, &cache, dlogit, &mut grads)?;

        if let Some((like, dislike)) = &memory {
            let z = cache.z_last().expect("memory kinds are deep");
            loss2_sum += memory_loss(like, dislike, inst.label, z)?;
            let (g_like, g_dislike) = memory_gradient(like, dislike, inst.label, z)?;
            let w = writes
                .entry(inst.user_id)
                .or_insert_with(|| MemoryWrite::zeros(like.len()));
            w.add_memory_grad(&g_like, &g_dislike);
            if state.config.loss1_to_memory_input {
                let g = input_grad.expect("memory kinds return input gradients");
                w.add_input_grad(&g.like, &g.dislike);
            }
        }
    }
    Ok(BatchGradients {
        params: grads,
        memory: writes,
        loss1_sum,
        loss2_sum,
        count: batch.len(),
    })
}

fn step_inner(
    batch: &[Instance],
    state: &mut ModelState,
    batch_index: usize,
    scores: Option<&mut Vec<(f64, u8)>>,
) -> Result<BatchReport> {
    if batch.is_empty() {
        return Err(Error::EmptyStream("train_step needs at least one instance"));
    }
    let g = batch_gradients(batch, state, scores)?;
    let n = g.count as f64;
    let (loss1, loss2) = (g.loss1_sum / n, g.loss2_sum / n);
    if !loss1.is_finite() || !loss2.is_finite() {
        return Err(Error::NonFinite {
            batch_index,
            loss1,
            loss2,
        });
    }
    let opt = state.config.optimizer();
    state.params.apply_adagrad(&g.params, 1.0 / n, &opt);
    apply_memory_updates(
        &mut state.memory,
        &g.memory,
        g.count,
        state.config.alpha,
        &opt,
    )?;
    Ok(BatchReport {
        batch_index,
        mean_loss1: loss1,
        mean_loss2: loss2,
        count: g.count,
        examples_seen: 0,
        window_auc: None,
    })
}

/// One optimization step: forward everything against batch-start memory,
/// average both losses over the batch, update parameters, then memory.
pub fn train_step(
    batch: &[Instance],
    state: &mut ModelState,
    batch_index: usize,
) -> Result<BatchReport> {
    step_inner(batch, state, batch_index, None)
}

/// Batches of recent progressive predictions used for the running AUC.
const AUC_WINDOW_BATCHES: usize = 20;

/// Stateful driver of the training loop.
pub struct Trainer {
    state: ModelState,
    reports: Vec<BatchReport>,
    window: VecDeque<Vec<(f64, u8)>>,
    batch_index: usize,
    examples_seen: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, schema: &DatasetSchema) -> Result<Self> {
        Ok(Self::from_state(ModelState::init(config, schema)?))
    }

    pub fn from_state(state: ModelState) -> Self {
        Trainer {
            state,
            reports: Vec::new(),
            window: VecDeque::new(),
            batch_index: 0,
            examples_seen: 0,
        }
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn reports(&self) -> &[BatchReport] {
        &self.reports
    }

    pub fn step(&mut self, batch: &[Instance]) -> Result<&BatchReport> {
        let mut scores = Vec::with_capacity(batch.len());
        let mut report = step_inner(batch, &mut self.state, self.batch_index, Some(&mut scores))?;
        self.window.push_back(scores);
        if self.window.len() > AUC_WINDOW_BATCHES {
            self.window.pop_front();
        }
        let flat: Vec<(f64, u8)> = self.window.iter().flatten().copied().collect();
        report.window_auc = auc(&ScoredSet::from_pairs(&flat)).ok();
        self.examples_seen += batch.len();
        report.examples_seen = self.examples_seen;
        self.batch_index += 1;
        self.reports.push(report);
        Ok(self.reports.last().expect("just pushed"))
    }

    /// Consumes `stream` in order, one batch at a time. Returns the number of
    /// instances seen.
    pub fn train_pass<I>(&mut self, stream: I) -> Result<usize>
    where
        I: IntoIterator<Item = Result<Instance>>,
    {
        let bs = self.state.config.batch_size;
        let mut batch = Vec::with_capacity(bs);
        let mut seen = 0;
        for inst in stream {
            batch.push(inst?);
            seen += 1;
            if batch.len() == bs {
                self.step(&batch)?;
                batch.clear();
            }
        }
        if !batch.is_empty() {
            self.step(&batch)?;
        }
        Ok(seen)
    }

    pub fn finish(self) -> (ModelState, Vec<BatchReport>) {
        (self.state, self.reports)
    }
}

/// Trains for `config.epochs` passes, reopening the stream for each pass.
pub fn train_run<F, I>(
    config: &TrainConfig,
    schema: &DatasetSchema,
    mut open_stream: F,
) -> Result<(ModelState, Vec<BatchReport>)>
where
    F: FnMut() -> Result<I>,
    I: IntoIterator<Item = Result<Instance>>,
{
    let mut trainer = Trainer::new(config, schema)?;
    for _ in 0..config.epochs {
        if trainer.train_pass(open_stream()?)? == 0 {
            return Err(Error::EmptyStream("training stream yielded no instances"));
        }
    }
    Ok(trainer.finish())
}

/// [`train_run`] over an in-memory, already time-ordered slice.
pub fn train_on_slice(
    config: &TrainConfig,
    schema: &DatasetSchema,
    instances: &[Instance],
) -> Result<(ModelState, Vec<BatchReport>)> {
    train_run(config, schema, || {
        Ok(instances.iter().cloned().map(Ok::<_, Error>))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn toy_config(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            model_kind: kind,
            embedding_dim: 4,
            layer_dims: vec![8, 4],
            memory_dim: 4,
            batch_size: 16,
            learning_rate: 0.05,
            num_buckets: 1 << 16,
            ..Default::default()
        }
    }

    fn toy_data(n: usize, seed: u64) -> (DatasetSchema, Vec<Instance>) {
        let cfg = SyntheticConfig {
            num_users: 20,
            num_ad_clusters: 4,
            num_ads_per_cluster: 2,
            impressions: n,
            num_buckets: 1 << 16,
            seed,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let all: Vec<Instance> = d
            .impressions
            .iter()
            .map(|i| i.record.to_instance(&d.schema))
            .collect();
        (d.schema, all)
    }

    #[test]
    fn logistic_loss_cases() {
        let ln2 = std::f64::consts::LN_2;
        assert!((logistic_loss(0.5, 1) - ln2).abs() < 1e-15);
        assert!((logistic_loss(0.5, 0) - ln2).abs() < 1e-15);
        assert!((logistic_loss_from_logit(0.0, 1) - ln2).abs() < 1e-15);
        let tiny = logistic_loss_from_logit(40.0, 1);
        assert!(tiny.is_finite() && tiny < 1e-15);
        let big = logistic_loss_from_logit(-40.0, 1);
        assert!(big.is_finite() && (big - 40.0).abs() < 1e-12);
        assert!(logistic_loss_from_logit(-800.0, 1).is_finite());
    }

    #[test]
    fn combined_loss_cases() {
        assert_eq!(combined_loss(0.42, 9.0, 0.0), 0.42);
        assert_eq!(combined_loss(0.42, 0.0, 1.0), 0.42);
        assert_eq!(combined_loss(0.7, 0.3, 1.0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                alpha: -1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                memory_dim: 32,
                ..Default::default()
            },
            TrainConfig {
                num_buckets: 1000,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let dnn = TrainConfig {
            model_kind: ModelKind::Dnn,
            memory_dim: 32,
            ..Default::default()
        };
        assert!(dnn.validate().is_ok());
    }

    #[test]
    fn frozen_memory_without_alpha_or_input_path() {
        let (schema, data) = toy_data(200, 1);
        let mut cfg = toy_config(ModelKind::MaDnn);
        cfg.alpha = 0.0;
        cfg.loss1_to_memory_input = false;
        let mut state = ModelState::init(&cfg, &schema).unwrap();
        for (i, b) in data.chunks(16).enumerate() {
            train_step(b, &mut state, i).unwrap();
        }
        assert!(state.memory.is_empty());
    }

    #[test]
    fn identical_batch_equals_single_instance_gradient() {
        let (schema, data) = toy_data(10, 2);
        let cfg = toy_config(ModelKind::MaWd);
        let state = ModelState::init(&cfg, &schema).unwrap();
        let one = batch_gradients(&data[..1], &state, None).unwrap();
        let eight: Vec<Instance> = std::iter::repeat_n(data[0].clone(), 8).collect();
        let many = batch_gradients(&eight, &state, None).unwrap();
        let (a, b) = (one.params.mlp.unwrap(), many.params.mlp.unwrap());
        for (x, y) in a.out_w.iter().zip(&b.out_w) {
            assert!((x - y / 8.0).abs() <= 1e-15 * x.abs().max(1e-300));
        }
        assert_eq!(one.params.bias, many.params.bias / 8.0);
        assert!((one.loss1_sum - many.loss1_sum / 8.0).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let (schema, data) = toy_data(50, 3);
        let mut cfg = toy_config(ModelKind::Dnn);
        cfg.epochs = 0;
        let (state, reports) = train_on_slice(&cfg, &schema, &data).unwrap();
        assert_eq!(state, ModelState::init(&cfg, &schema).unwrap());
        assert!(reports.is_empty());
    }

    #[test]
    fn empty_stream_is_error() {
        let (schema, _) = toy_data(1, 3);
        let cfg = toy_config(ModelKind::Lr);
        assert!(matches!(
            train_on_slice(&cfg, &schema, &[]),
            Err(Error::EmptyStream(_))
        ));
    }

    #[test]
    fn partial_final_batch_and_reports() {
        let (schema, data) = toy_data(40, 4);
        let cfg = toy_config(ModelKind::Fm);
        let (_, reports) = train_on_slice(&cfg, &schema, &data).unwrap();
        assert_eq!(
            reports.iter().map(|r| r.count).collect::<Vec<_>>(),
            vec![16, 16, 8]
        );
        assert_eq!(reports.last().unwrap().examples_seen, 40);
        assert!(reports[0].to_csv_line().starts_with("0,"));
    }

    #[test]
    fn deterministic_and_order_sensitive() {
        let (schema, data) = toy_data(300, 5);
        let cfg = toy_config(ModelKind::MaDnn);
        let (a, _) = train_on_slice(&cfg, &schema, &data).unwrap();
        let (b, _) = train_on_slice(&cfg, &schema, &data).unwrap();
        assert_eq!(a, b);
        let mut reversed = data.clone();
        reversed.reverse();
        let (c, _) = train_on_slice(&cfg, &schema, &reversed).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn accumulators_never_decrease() {
        let (schema, data) = toy_data(160, 6);
        let cfg = toy_config(ModelKind::MaWd);
        let mut state = ModelState::init(&cfg, &schema).unwrap();
        let mut prev = state.params.mlp.as_ref().unwrap().acc_out_w.clone();
        for (i, b) in data.chunks(16).enumerate() {
            train_step(b, &mut state, i).unwrap();
            let cur = state.params.mlp.as_ref().unwrap().acc_out_w.clone();
            assert!(cur.iter().zip(&prev).all(|(c, p)| c >= p));
            prev = cur;
        }
    }

    #[test]
    fn non_finite_loss_names_batch() {
        let (schema, data) = toy_data(16, 7);
        let cfg = toy_config(ModelKind::Lr);
        let mut state = ModelState::init(&cfg, &schema).unwrap();
        state.params.linear.as_mut().unwrap().bias = f64::NAN;
        match train_step(&data, &mut state, 3) {
            Err(Error::NonFinite { batch_index: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
