//! Training, evaluation and the files they produce.

mod checkpoint;
mod trace;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use trace::{aggregate_trace, trace_run, write_aggregate_csv, write_trace_csv, AggregateRow, TraceRow};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{generate_synthetic, load_dataset, DatasetMeta, SynthConfig, TaskSample};
use crate::inference::{forward, prepare, DataDims, ForwardOptions, InferenceConfig, PreparedSample};
use crate::model::Model;
use crate::numerics::{Matrix, ParamStore, Tape};
use crate::predictor::{predict_answer, wbce_loss_var, LossConfig};
use crate::variants::Registry;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    /// Seeds weight initialization and the per-epoch shuffles.
    pub seed: u64,
    /// Name of a registered model variant applied on top of `inference`.
    pub variant: String,
    pub inference: InferenceConfig,
    pub loss: LossConfig,
    pub synth: Option<SynthConfig>,
    pub data: Option<PathBuf>,
    /// Stop once an epoch ends at or above this training accuracy.
    pub stop_at_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            warmup_epochs: 2,
            warmup_factor: 0.2,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            seed: 0,
            variant: "full".into(),
            inference: InferenceConfig::default(),
            loss: LossConfig::default(),
            synth: None,
            data: None,
            stop_at_train_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn check(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        let positive = [("lr", self.lr), ("warmup_factor", self.warmup_factor), ("adam_eps", self.adam_eps)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.warmup_factor > 1.0 {
            return Err(Error::Config(format!("warmup_factor must be at most 1, got {}", self.warmup_factor)));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        self.loss.check()?;
        self.model_config()?.check()
    }

    /// `inference` with the configured variant applied.
    pub fn model_config(&self) -> Result<InferenceConfig> {
        Registry::default().configure(&self.variant, &self.inference)
    }

    /// Loads the dataset directory or generates the synthetic set.
    pub fn load_data(&self) -> Result<(DatasetMeta, Vec<TaskSample>)> {
        match (&self.data, &self.synth) {
            (Some(dir), None) => {
                let ds = load_dataset(dir)?;
                let meta = DatasetMeta { d_node: ds.d_node(), ..ds.meta };
                Ok((meta, ds.samples))
            }
            (None, Some(synth)) => {
                let g = generate_synthetic(synth)?;
                Ok((g.meta, g.samples))
            }
            (Some(_), Some(_)) => Err(Error::Config("set either `data` or `synth`, not both".into())),
            (None, None) => Err(Error::Config("no training data: set `data` or `synth`".into())),
        }
    }
}

pub fn data_dims(meta: &DatasetMeta) -> Result<DataDims> {
    let d_node = meta
        .d_node
        .ok_or_else(|| Error::Dataset("cannot infer d_node from an empty dataset".into()))?;
    Ok(DataDims { d_node, vocab_size: meta.vocab_size, n_relations: meta.n_relations })
}

pub fn prepare_all(samples: &[TaskSample], dims: &DataDims) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| prepare(s, dims).map_err(|e| Error::Dataset(format!("sample {i}: {e}"))))
        .collect()
}

/// Linear ramp from `warmup_factor * lr` that reaches `lr` on the last
/// warm-up epoch, then constant.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        let frac = (epoch + 1) as f64 / cfg.warmup_epochs as f64;
        cfg.lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * frac)
    } else {
        cfg.lr
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store.values().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
pub fn adam_step(store: &mut ParamStore, adam: &mut Adam, lr: f64, betas: [f64; 2], eps: f64) -> Result<()> {
    if adam.m.len() != store.len() || adam.v.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer holds {} moments for {} parameters",
            adam.m.len(),
            store.len()
        )));
    }
    let [b1, b2] = betas;
    adam.t += 1;
    let c1 = 1.0 - b1.powi(adam.t as i32);
    let c2 = 1.0 - b2.powi(adam.t as i32);
    for id in store.ids().collect::<Vec<_>>() {
        let g = store.grad(id).clone();
        let (m, v) = (&mut adam.m[id.0], &mut adam.v[id.0]);
        if m.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::Shape { op: "adam_step", lhs: m.shape(), rhs: g.shape() });
        }
        let value = store.value_mut(id);
        for (((p, m), v), &g) in value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !value.data().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("adam_step"));
        }
    }
    Ok(())
}

/// Loss of one sample and its gradients accumulated into `store`, scaled.
fn accumulate_sample(model: &Model, store: &mut ParamStore, sample: &PreparedSample, loss: &LossConfig, scale: f64) -> Result<f64> {
    let cfg = model.effective();
    let mut tape = Tape::new();
    let out = forward(&mut tape, &model.store, &model.params, &cfg, sample, &ForwardOptions::default())?;
    let l = wbce_loss_var(&mut tape, out.probs, &sample.labels, loss)?;
    let value = tape.value(l).scalar()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = tape.backward(l, model.store.len())?;
    store.accumulate(grads.params(), scale)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over batches of the mean per-sample loss.
    pub loss: f64,
    /// Training accuracy measured after the epoch's last update.
    pub acc: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub adam: Adam,
    pub metrics: Vec<EpochMetrics>,
}

/// Optimizes a fresh model on `samples`, calling `on_epoch` after each epoch.
pub fn fit(
    cfg: &TrainConfig,
    meta: &DatasetMeta,
    samples: &[TaskSample],
    mut on_epoch: impl FnMut(&EpochMetrics, &Model, &Adam) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.check()?;
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let dims = data_dims(meta)?;
    let data = prepare_all(samples, &dims)?;
    let mut model = Model::new(cfg.model_config()?, dims, cfg.seed)?;
    let mut adam = Adam::new(&model.store);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut store = model.store.clone();
            store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += accumulate_sample(&model, &mut store, &data[i], &cfg.loss, scale)?;
            }
            adam_step(&mut store, &mut adam, lr, cfg.betas, cfg.adam_eps)?;
            model.store = store;
            loss_sum += batch_loss * scale;
            n_batches += 1;
        }

        let acc = evaluate(&model, &data, &cfg.loss)?.accuracy;
        let m = EpochMetrics { epoch, lr, loss: loss_sum / n_batches as f64, acc };
        on_epoch(&m, &model, &adam)?;
        metrics.push(m);
        if cfg.stop_at_train_acc.is_some_and(|target| acc >= target) {
            break;
        }
    }
    Ok(TrainOutcome { model, adam, metrics })
}

/// Trains from the configured data source, writing one metrics line and a
/// fresh checkpoint into `out` after every epoch.
pub fn train(cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.check()?;
    let (meta, samples) = cfg.load_data()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    fit(cfg, &meta, &samples, |m, model, adam| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        save_checkpoint(&ckpt_path, model, Some(adam), m.epoch + 1, cfg)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample: usize,
    pub predicted: i64,
    pub correct: bool,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean per-sample loss.
    pub loss: f64,
    pub predictions: Vec<Prediction>,
}

/// Read-only pass over `samples`.
pub fn evaluate(model: &Model, samples: &[PreparedSample], loss: &LossConfig) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let cfg = model.effective();
    let mut predictions = Vec::with_capacity(samples.len());
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if s.index.d_node != model.dims.d_node {
            return Err(Error::Dataset(format!(
                "sample {i} has d_node {} but the model expects {}",
                s.index.d_node, model.dims.d_node
            )));
        }
        let mut tape = Tape::new();
        let out = forward(&mut tape, &model.store, &model.params, &cfg, s, &ForwardOptions::default())?;
        let l = wbce_loss_var(&mut tape, out.probs, &s.labels, loss)?;
        total_loss += tape.value(l).scalar()?;
        let probs = tape.value(out.probs).data().to_vec();
        let predicted = predict_answer(&probs, s.fact_ids())?;
        let pos = s.fact_ids().iter().position(|&id| id == predicted).expect("predicted id is a fact");
        let ok = s.labels[pos] == 1;
        correct += usize::from(ok);
        predictions.push(Prediction { sample: i, predicted, correct: ok, probs });
    }
    Ok(Evaluation {
        accuracy: correct as f64 / samples.len() as f64,
        loss: total_loss / samples.len() as f64,
        predictions,
    })
}

/// One JSON object per line.
pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut text = String::new();
    for p in predictions {
        text.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Checks a checkpoint against dataset metadata before evaluation.
pub fn check_dims(model: &Model, meta: &DatasetMeta, samples: &[TaskSample]) -> Result<()> {
    let d = meta.d_node.or_else(|| samples.first().map(|s| s.graph.d_node));
    let found = DataDims {
        d_node: d.unwrap_or(model.dims.d_node),
        vocab_size: meta.vocab_size,
        n_relations: meta.n_relations,
    };
    let m = &model.dims;
    if found.d_node != m.d_node || found.vocab_size > m.vocab_size || found.n_relations > m.n_relations {
        return Err(Error::Dataset(format!("dataset dimensions {found:?} do not fit the checkpoint's {m:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
