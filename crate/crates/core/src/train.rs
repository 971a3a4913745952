//! Mini-batch training, evaluation and early stopping.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::DropoutCtx;
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, ModelKind};
use crate::embedding::Batch;
use crate::error::{MvftError, Result};
use crate::mask::ViewMask;
use crate::model::MvftModel;
use crate::optim::{adam_step, AdamState};
use crate::params::Binder;
use crate::rng::SeededRng;
use crate::views::ViewBundle;

/// Windows per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub kind: ModelKind,
    pub views: ViewMask,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 20,
            seed: 0,
            kind: ModelKind::Mvft,
            views: ViewMask::ALL,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MvftError::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(MvftError::config("batch_size must be >= 1"));
        }
        self.model.validate()?;
        if self.views.is_empty() {
            return Err(MvftError::config("view mask is empty"));
        }
        if self.kind == ModelKind::Mvft && self.model.fusion && self.views.count() < 2 {
            return Err(MvftError::config(format!(
                "MVFT fusion needs at least two views (got `{}`); use the baseline model",
                self.views
            )));
        }
        Ok(())
    }

    /// Fresh model initialized from `seed`.
    pub fn build_model(&self) -> Result<MvftModel> {
        self.validate()?;
        MvftModel::new(self.model.clone(), self.kind, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    /// Per-class precision; 0 for a class never predicted.
    pub precision: Vec<f64>,
    /// Per-class recall; 0 for a class absent from the data.
    pub recall: Vec<f64>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predicted: &[usize], n_class: usize, loss: f64) -> Result<Self> {
        if labels.is_empty() {
            return Err(MvftError::Empty("no predictions to score".into()));
        }
        if labels.len() != predicted.len() {
            return Err(MvftError::shape("metrics", &[labels.len()], &[predicted.len()]));
        }
        let mut confusion = vec![vec![0usize; n_class]; n_class];
        for (&y, &p) in labels.iter().zip(predicted) {
            if y >= n_class || p >= n_class {
                return Err(MvftError::contract(format!("class index out of range for {n_class} classes")));
            }
            confusion[y][p] += 1;
        }
        let correct: usize = (0..n_class).map(|k| confusion[k][k]).sum();
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = (0..n_class)
            .map(|k| ratio(confusion[k][k], (0..n_class).map(|y| confusion[y][k]).sum()))
            .collect();
        let recall = (0..n_class)
            .map(|k| ratio(confusion[k][k], confusion[k].iter().sum()))
            .collect();
        Ok(Metrics {
            accuracy: correct as f64 / labels.len() as f64,
            loss,
            precision,
            recall,
            confusion,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn batch_of(data: &[ViewBundle], idx: &[usize], cfg: &ModelConfig) -> Result<Batch> {
    let refs: Vec<&ViewBundle> = idx.iter().map(|&i| &data[i]).collect();
    Batch::from_bundles(&refs, cfg)
}

/// One shuffled pass of Adam steps; returns the mean batch loss.
pub fn train_epoch(
    model: &mut MvftModel,
    adam: &mut AdamState,
    data: &[ViewBundle],
    views: ViewMask,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(MvftError::Empty("training set".into()));
    }
    if batch_size == 0 {
        return Err(MvftError::config("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let rate = model.config.dropout;
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_size) {
        let batch = batch_of(data, chunk, &model.config)?;
        let grads = {
            let mut binder = Binder::new(&model.params, true);
            let dropout = (rate > 0.0).then_some(DropoutCtx { rate, rng: &mut *rng });
            let out = model.forward(&mut binder, &batch, views, dropout)?;
            let loss = binder.tape.cross_entropy(out.logits, &batch.labels)?;
            total += binder.tape.value(loss).item();
            binder.backward(loss)?
        };
        adam_step(&mut model.params, &grads, adam)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Accuracy, loss and confusion matrix of `model` on `data`.
pub fn evaluate(model: &MvftModel, data: &[ViewBundle], views: ViewMask) -> Result<Metrics> {
    if data.is_empty() {
        return Err(MvftError::Empty("evaluation set".into()));
    }
    let mut labels = Vec::with_capacity(data.len());
    let mut predicted = Vec::with_capacity(data.len());
    let mut chunk_losses = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = batch_of(data, chunk, &model.config)?;
        let mut binder = Binder::new(&model.params, false);
        let out = model.forward(&mut binder, &batch, views, None)?;
        let loss = binder.tape.cross_entropy(out.logits, &batch.labels)?;
        chunk_losses.push((binder.tape.value(loss).item(), chunk.len()));
        let probs = binder.tape.value(out.probs);
        for (b, &y) in batch.labels.iter().enumerate() {
            predicted.push(argmax(probs.row(b)));
            labels.push(y);
        }
    }
    let loss = match chunk_losses.as_slice() {
        [(l, _)] => *l,
        many => many.iter().map(|(l, n)| l * *n as f64).sum::<f64>() / data.len() as f64,
    };
    Metrics::from_predictions(&labels, &predicted, model.config.n_class, loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Writes one JSON object per line.
pub fn write_history<W: Write>(mut w: W, history: &[EpochRecord]) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// State after the epoch with the best validation accuracy.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains for up to `max_epochs`, keeping the checkpoint with the highest
/// validation accuracy (earliest on ties) and stopping once more than
/// `patience` consecutive epochs fail to improve on it.
pub fn fit(model: MvftModel, train: &[ViewBundle], val: &[ViewBundle], cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(MvftError::Empty("training set".into()));
    }
    let mut model = model;
    let mut adam = AdamState::for_params(cfg.lr, &model.params);
    let mut rng = SeededRng::new(cfg.seed).fork();
    let mut history = Vec::new();

    let initial = evaluate(&model, val, cfg.views)?;
    let mut best = Checkpoint::new(cfg.clone(), &model, adam.clone(), 0, initial.accuracy);
    let mut best_acc = f64::NEG_INFINITY;
    let mut stalls = 0;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = train_epoch(&mut model, &mut adam, train, cfg.views, cfg.batch_size, &mut rng)?;
        let val_acc = evaluate(&model, val, cfg.views)?.accuracy;
        history.push(EpochRecord { epoch, train_loss, val_acc });
        if val_acc > best_acc {
            best_acc = val_acc;
            best = Checkpoint::new(cfg.clone(), &model, adam.clone(), epoch, val_acc);
            stalls = 0;
        } else {
            stalls += 1;
            if stalls > cfg.patience {
                break;
            }
        }
    }
    Ok(FitOutcome { best, history })
}
