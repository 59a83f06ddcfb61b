//! 1-vs-all training with label-smoothed cross-entropy and Adam.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{build_vocab, DatasetError, Triple, ZslSplit};
use crate::evaluator::{hits_at_k, mrr, rank_triples, EvalError};
use crate::gram_transformer::EncoderInput;
use crate::model::{LinkModel, ModelConfig, ModelError};
use crate::ndtensor::{ParamSet, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Stop after this many epochs without a dev MRR improvement.
    /// `None` trains for exactly `epochs`.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            batch_size: 32,
            epochs: 80,
            label_smoothing: 0.1,
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainError::InvalidConfig(format!(
                "label_smoothing {}",
                self.label_smoothing
            )));
        }
        if self.patience == Some(0) {
            return Err(TrainError::InvalidConfig(
                "patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    /// First and second moments of `name`, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }

    /// One bias-corrected update of every parameter in `grads`, skipping
    /// names listed in `frozen`.
    pub fn update(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        lr: f64,
        frozen: &std::collections::BTreeSet<String>,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            if frozen.contains(name) {
                continue;
            }
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                }
                .into());
            }
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Forward + backward on one batch without touching parameters.
/// Returns the loss and the gradient of every parameter.
pub fn batch_gradients<R: Rng + ?Sized>(
    model: &LinkModel,
    inputs: &[EncoderInput],
    batch: &[Triple],
    label_smoothing: f64,
    training: bool,
    rng: &mut R,
) -> Result<(f64, ParamSet), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let loss = model.batch_loss(
        &mut tape,
        &bound,
        inputs,
        batch,
        label_smoothing,
        training,
        rng,
    )?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, bound.collect_grads(&tape, &grads)))
}

/// One optimizer step; returns the loss before the update.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut LinkModel,
    adam: &mut AdamState,
    inputs: &[EncoderInput],
    batch: &[Triple],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<f64, TrainError> {
    let (loss, grads) = batch_gradients(model, inputs, batch, config.label_smoothing, true, rng)?;
    adam.update(
        &mut model.params,
        &grads,
        config.learning_rate,
        &model.frozen,
    )?;
    Ok(loss)
}

/// One line of the metrics log. Dev fields are `null` when there is no dev set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_mrr: Option<f64>,
    pub dev_hits1: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record") + "\n"
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev MRR (the last epoch when
    /// there is no dev set, the initial model when `epochs == 0`).
    pub best: LinkModel,
    pub best_epoch: usize,
    /// Parameters after the final epoch.
    pub last: LinkModel,
    pub history: Vec<EpochRecord>,
}

/// Builds the n-gram vocabulary from `split` and initializes a model.
pub fn init_model<R: Rng + ?Sized>(
    split: &ZslSplit,
    config: &ModelConfig,
    edge_file: Option<&Path>,
    rng: &mut R,
) -> Result<LinkModel, TrainError> {
    let report = build_vocab(split, config.graph.max_n, config.tokenize)?;
    Ok(LinkModel::init(
        config.clone(),
        report.vocab,
        split.entities.clone(),
        edge_file,
        rng,
    )?)
}

/// Dev MRR and hits@1, ranking each dev tail against all entities.
pub fn dev_metrics(model: &LinkModel, split: &ZslSplit) -> Result<Option<(f64, f64)>, TrainError> {
    if split.dev.is_empty() {
        return Ok(None);
    }
    let ranks = rank_triples(model, &split.relations, &split.dev)?;
    Ok(Some((mrr(&ranks)?, hits_at_k(&ranks, 1)?)))
}

/// Full training run. `on_epoch` sees each record as soon as the epoch ends.
pub fn train(
    split: &ZslSplit,
    model_config: &ModelConfig,
    config: &TrainConfig,
    edge_file: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model_config.encoder.validate().map_err(ModelError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init_model(split, model_config, edge_file, &mut rng)?;
    let inputs = model.prepare(&split.relations)?;
    let mut adam = AdamState::default();

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_mrr = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order = split.train.clone();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            total += train_step(&mut model, &mut adam, &inputs, batch, config, &mut rng)?
                * batch.len() as f64;
        }
        let loss = if order.is_empty() {
            0.0
        } else {
            total / order.len() as f64
        };
        let dev = dev_metrics(&model, split)?;
        let record = EpochRecord {
            epoch,
            loss,
            dev_mrr: dev.map(|d| d.0),
            dev_hits1: dev.map(|d| d.1),
        };
        on_epoch(&record);
        history.push(record);

        match dev {
            Some((dev_mrr, _)) if dev_mrr > best_mrr => {
                best_mrr = dev_mrr;
                best = model.clone();
                best_epoch = epoch;
                stale = 0;
            }
            Some(_) => {
                stale += 1;
                if config.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
            None => {
                best = model.clone();
                best_epoch = epoch;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_fixture, SynthSizes};
    use crate::dataset::{Entity, Relation};
    use crate::gram_transformer::GramVocab;
    use crate::ndtensor::Tensor;

    fn small_config(d: usize) -> ModelConfig {
        let mut c = ModelConfig::default();
        c.encoder.d_model = d;
        c.encoder.n_heads = 2;
        c.encoder.d_ff = d;
        c
    }

    fn single_triple_model(d: usize, dropout: f64) -> (LinkModel, Vec<EncoderInput>) {
        let mut config = small_config(d);
        config.encoder.dropout = dropout;
        let entities: Vec<Entity> = (0..10)
            .map(|i| Entity {
                id: i,
                name: format!("e{i}"),
            })
            .collect();
        let relations = vec![Relation {
            id: 0,
            surface: "has".into(),
        }];
        let vocab = GramVocab::new(["h", "a", "s", "ha", "as", "has"]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = LinkModel::init(config, vocab, entities, None, &mut rng).unwrap();
        let inputs = model.prepare(&relations).unwrap();
        (model, inputs)
    }

    const TRIPLE: Triple = Triple {
        head: 1,
        relation: 0,
        tail: 4,
    };

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, inputs) = single_triple_model(8, 0.5);
        let before = model.params.clone();
        let config = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut adam = AdamState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..3 {
            train_step(&mut model, &mut adam, &inputs, &[TRIPLE], &config, &mut rng).unwrap();
        }
        for ((n, a), (_, b)) in before.iter().zip(model.params.iter()) {
            let same = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{n} changed");
        }
    }

    /// Steps on `TRIPLE` until the loss drops below 0.01; returns the
    /// losses seen, or `None` if 500 steps were not enough.
    fn drive_single_triple(score_fn: crate::kge::ScoreFn) -> Option<Vec<f64>> {
        let (mut model, inputs) = single_triple_model(16, 0.0);
        model.config.score_fn = score_fn;
        let config = TrainConfig {
            learning_rate: 0.01,
            label_smoothing: 0.0,
            ..Default::default()
        };
        let mut adam = AdamState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut losses = Vec::new();
        for _ in 0..500 {
            let loss =
                train_step(&mut model, &mut adam, &inputs, &[TRIPLE], &config, &mut rng).unwrap();
            losses.push(loss);
            if loss < 0.01 {
                return Some(losses);
            }
        }
        None
    }

    #[test]
    fn single_triple_loss_falls_monotonically() {
        let losses = drive_single_triple(crate::kge::ScoreFn::DistMult)
            .expect("loss below 0.01 within 500 steps");
        for (i, w) in losses.windows(2).enumerate() {
            assert!(w[1] < w[0], "step {}: {} after {}", i + 1, w[1], w[0]);
        }
    }

    #[test]
    fn single_triple_transe_converges() {
        // -||h + r - t|| has a cone tip at the truth, so Adam can bounce
        // there; only the end point is checked
        assert!(drive_single_triple(crate::kge::ScoreFn::TransE).is_some());
    }

    #[test]
    fn initial_loss_is_near_log_entity_count() {
        let s = synth_fixture(0, SynthSizes::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = init_model(&s, &small_config(16), None, &mut rng).unwrap();
        let inputs = model.prepare(&s.relations).unwrap();
        let (loss, _) =
            batch_gradients(&model, &inputs, &s.train[..32], 0.0, false, &mut rng).unwrap();
        let ln_c = (s.entities.len() as f64).ln();
        assert!(
            (loss - ln_c).abs() <= 0.2 * ln_c,
            "loss {loss}, ln C {ln_c}"
        );
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let (model, inputs) = single_triple_model(8, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, grads) =
            batch_gradients(&model, &inputs, &[TRIPLE], 0.1, false, &mut rng).unwrap();
        assert!(loss > 0.0);
        for (name, g) in grads.iter() {
            if name == "position_embeddings" || name == "node_embeddings" {
                // only the rows that are used get gradient
                assert!(g.data().iter().any(|&x| x != 0.0), "{name}");
                continue;
            }
            assert!(g.data().iter().any(|&x| x != 0.0), "{name} has no gradient");
        }
    }

    #[test]
    fn eval_loss_is_a_function_of_parameters() {
        let (model, inputs) = single_triple_model(8, 0.5);
        let a = batch_gradients(
            &model,
            &inputs,
            &[TRIPLE],
            0.1,
            false,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = batch_gradients(
            &model,
            &inputs,
            &[TRIPLE],
            0.1,
            false,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // minimize (w - 3)^2 from w = 0
        let lr = 0.1;
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(0.0));
        let mut adam = AdamState::default();
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            w -= lr * m_hat / (v_hat.sqrt() + 1e-8);

            let cur = params.get("w").unwrap().item();
            let mut grads = ParamSet::new();
            grads.insert("w", Tensor::scalar(2.0 * (cur - 3.0)));
            adam.update(&mut params, &grads, lr, &Default::default())
                .unwrap();
            let got = params.get("w").unwrap().item();
            assert!((got - w).abs() <= 1e-12, "step {t}: {got} vs {w}");
        }
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::scalar(1.0));
        params.insert("b", Tensor::scalar(1.0));
        let mut grads = ParamSet::new();
        grads.insert("a", Tensor::scalar(1.0));
        grads.insert("b", Tensor::scalar(1.0));
        let frozen = ["b".to_string()].into_iter().collect();
        AdamState::default()
            .update(&mut params, &grads, 0.1, &frozen)
            .unwrap();
        assert!(params.get("a").unwrap().item() < 1.0);
        assert_eq!(params.get("b").unwrap().item(), 1.0);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let s = synth_fixture(0, SynthSizes::default());
        let config = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&s, &small_config(8), &config, None, |_| {}).unwrap();
        let init = init_model(
            &s,
            &small_config(8),
            None,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.best, init);
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn same_seed_same_run() {
        let s = synth_fixture(1, SynthSizes::default());
        let config = TrainConfig {
            epochs: 2,
            learning_rate: 0.01,
            ..Default::default()
        };
        let a = train(&s, &small_config(8), &config, None, |_| {}).unwrap();
        let b = train(&s, &small_config(8), &config, None, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best.params.checksum(), b.best.params.checksum());
        assert!(a.history.iter().all(|r| r.dev_mrr.is_some()));
    }

    #[test]
    fn patience_stops_early() {
        let s = synth_fixture(1, SynthSizes::default());
        let config = TrainConfig {
            epochs: 50,
            learning_rate: 0.0,
            patience: Some(2),
            ..Default::default()
        };
        let out = train(&s, &small_config(8), &config, None, |_| {}).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..Default::default()
            },
            TrainConfig {
                label_smoothing: 1.0,
                ..Default::default()
            },
            TrainConfig {
                patience: Some(0),
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }
}
