//! Mini-batch training of one stage, and the full four-stage schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::compressor::ProjectorKind;
use crate::error::{Error, Result};
use crate::eval::data::SyntheticSample;
use crate::eval::metrics::MetricsReport;
use crate::eval::telemetry::{evaluate, gate_report, model_input, GateReport};
use crate::params::{Binding, ParamSet};
use crate::pipeline::model::{model_forward, ToyModel};
use crate::pipeline::optim::{lr_at, AdamW, AdamWConfig};
use crate::pipeline::stage::{apply_stage_mask, StageConfig, StageId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            warmup_ratio: 0.01,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Outcome of one stage. Contains no timing so that identical runs produce
/// identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: StageId,
    pub epochs: usize,
    pub steps: u64,
    pub samples: usize,
    pub trainable: Vec<String>,
    pub first_batch_loss: Option<f64>,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub metrics: Option<MetricsReport>,
    pub gate: Option<GateReport>,
}

impl RunReport {
    fn empty(stage: StageId, trainable: Vec<String>) -> Self {
        RunReport {
            stage,
            epochs: 0,
            steps: 0,
            samples: 0,
            trainable,
            first_batch_loss: None,
            epoch_losses: Vec::new(),
            metrics: None,
            gate: None,
        }
    }
}

// Stream ids: top byte stage, next byte purpose, low bits a counter.
const SHUFFLE: u64 = 1;
const DROPOUT: u64 = 2;

/// Counter-addressed generator: the same `(seed, stage, purpose, counter)`
/// always yields the same stream, independent of anything run before it.
pub fn stream_rng(seed: u64, stage: StageId, purpose: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage.index() << 56) | (purpose << 48) | (counter & ((1 << 48) - 1)));
    rng
}

/// Total optimizer steps of a stage over `samples` examples.
pub fn stage_steps(samples: usize, epochs: usize, batch_size: usize) -> u64 {
    (samples.div_ceil(batch_size.max(1)) * epochs) as u64
}

/// Trains `model` for one stage on the samples accepted by the stage's data
/// selector.
///
/// Parameters outside the stage mask are never bound as trainable; after the
/// last step their checksums are compared against the pre-stage snapshot and
/// any difference is reported as [`Error::FrozenDrift`].
pub fn train_stage(
    model: &mut ToyModel,
    stage: &StageConfig,
    train: &TrainConfig,
    data: &[SyntheticSample],
    seed: u64,
) -> Result<RunReport> {
    if train.batch_size == 0 {
        return Err(Error::Config {
            key: Some("batch_size".into()),
            line: None,
            msg: "must be positive".into(),
        });
    }
    if stage.id == StageId::Finetune {
        let name = stage.adapter.as_deref().unwrap_or_default();
        model.adapters.select(name)?;
    }
    let trainable = apply_stage_mask(model, stage)?;
    let trainable_list: Vec<String> = trainable.iter().cloned().collect();
    if stage.epochs == 0 {
        return Ok(RunReport::empty(stage.id, trainable_list));
    }
    let samples: Vec<&SyntheticSample> = data.iter().filter(|s| stage.data.accepts(s.domain)).collect();
    if samples.is_empty() {
        return Err(Error::Contract(format!("stage {} has no matching samples", stage.id)));
    }
    let d_v = model.config.d_v;
    let inputs: Vec<_> = samples
        .iter()
        .map(|s| model_input(s, d_v, stage.fec_active))
        .collect::<Result<_>>()?;

    let before = model.checksums();
    let total = stage_steps(samples.len(), stage.epochs, train.batch_size);
    let mut opt = AdamW::new(train.optimizer);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut first_batch_loss = None;
    let mut epoch_losses = Vec::with_capacity(stage.epochs);
    let mut step = 0u64;

    for epoch in 0..stage.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(seed, stage.id, SHUFFLE, epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(train.batch_size) {
            step += 1;
            let mut dropout = stream_rng(seed, stage.id, DROPOUT, step);
            let mut tape = Tape::new();
            let allowed = trainable.clone();
            let mut binding = Binding::new(move |n| allowed.contains(n));
            let bound = model.bind(&mut tape, &mut binding);
            let mut rows = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let e = tape.constant(inputs[i].clone());
                let out = model_forward(&mut tape, &bound, e, &samples[i].text, Some(&mut dropout))?;
                rows.push(out.logits);
                targets.push(samples[i].label);
            }
            let logits = tape.concat_rows(&rows)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at stage {} step {step}", stage.id)));
            }
            first_batch_loss.get_or_insert(value);
            loss_sum += value;
            batches += 1;
            let grads = tape.backward(loss)?;
            let grads: BTreeMap<String, _> = binding.gradients(&grads);
            let lr = lr_at(step, total, stage.peak_lr, train.warmup_ratio)?;
            opt.step_with(model, &grads, |n| stage.lr_for(n, lr))?;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }

    verify_frozen(&before, &model.checksums(), |n| trainable.contains(n))?;

    let owned: Vec<SyntheticSample> = samples.iter().map(|s| (*s).clone()).collect();
    let metrics = evaluate(model, &owned, stage.fec_active)?;
    let gate = match model.projector.kind() {
        ProjectorKind::HybridCompressor => Some(gate_report(model, &owned, stage.fec_active)?),
        _ => None,
    };
    Ok(RunReport {
        stage: stage.id,
        epochs: stage.epochs,
        steps: step,
        samples: samples.len(),
        trainable: trainable_list,
        first_batch_loss,
        epoch_losses,
        metrics: Some(metrics),
        gate,
    })
}

/// Fails if any parameter outside `is_trainable` changed checksum.
pub fn verify_frozen(
    before: &BTreeMap<String, u64>,
    after: &BTreeMap<String, u64>,
    is_trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, sum) in before {
        if is_trainable(name) {
            continue;
        }
        match after.get(name) {
            Some(s) if s == sum => {}
            Some(_) => return Err(Error::FrozenDrift(format!("frozen parameter `{name}` changed"))),
            None => return Err(Error::FrozenDrift(format!("frozen parameter `{name}` disappeared"))),
        }
    }
    Ok(())
}

/// Runs the stages in order. Random streams are keyed by stage id, so one
/// seed serves the whole schedule.
pub fn run_schedule(
    model: &mut ToyModel,
    stages: &[StageConfig],
    train: &TrainConfig,
    data: &[SyntheticSample],
    seed: u64,
) -> Result<Vec<RunReport>> {
    stages
        .iter()
        .map(|stage| train_stage(model, stage, train, data, seed))
        .collect()
}

/// The default four stages: 1, 2, 3 and finetune.
pub fn default_schedule() -> Vec<StageConfig> {
    StageId::all().into_iter().map(StageConfig::default_for).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::data::{generate_dataset, DataConfig};
    use crate::lora::LoraConfig;
    use crate::pipeline::model::ModelConfig;

    fn data(n: usize) -> Vec<SyntheticSample> {
        generate_dataset(
            7,
            &DataConfig {
                n,
                ..DataConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_is_a_noop() {
        let mut m = ToyModel::new(ModelConfig::default(), 1).unwrap();
        let before = m.clone();
        let mut stage = StageConfig::default_for(StageId::One);
        stage.epochs = 0;
        let r = train_stage(&mut m, &stage, &TrainConfig::default(), &data(20), 7).unwrap();
        assert_eq!(m, before);
        assert!(r.epoch_losses.is_empty() && r.metrics.is_none() && r.first_batch_loss.is_none());
    }

    #[test]
    fn stage_one_descends_and_keeps_decoder() {
        let mut m = ToyModel::new(ModelConfig::default(), 1).unwrap();
        let before = m.checksums();
        let d = data(200);
        let mut stage = StageConfig::default_for(StageId::One);
        stage.epochs = 3;
        let r = train_stage(&mut m, &stage, &TrainConfig::default(), &d, 7).unwrap();
        assert!(r.epoch_losses.last().unwrap() < &r.first_batch_loss.unwrap(), "{r:?}");
        let after = m.checksums();
        for (n, s) in &before {
            if n.starts_with("decoder.") || n.starts_with("projector.hybrid.emotion.") {
                assert_eq!(after[n], *s, "{n}");
            }
        }
    }

    #[test]
    fn identical_runs_are_identical() {
        let d = data(64);
        let run = || {
            let mut m = ToyModel::new(ModelConfig::default(), 3).unwrap();
            m.add_adapter_set("emotion", &LoraConfig::default(), 4).unwrap();
            let r = run_schedule(&mut m, &default_schedule(), &TrainConfig::default(), &d, 9).unwrap();
            (m, serde_json::to_string(&r).unwrap())
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(a.checksums(), b.checksums());
    }

    #[test]
    fn drift_detection() {
        let before = BTreeMap::from([("a".to_string(), 1u64), ("b".to_string(), 2)]);
        let after = BTreeMap::from([("a".to_string(), 5u64), ("b".to_string(), 2)]);
        assert!(verify_frozen(&before, &after, |n| n == "a").is_ok());
        assert!(matches!(verify_frozen(&before, &after, |_| false), Err(Error::FrozenDrift(_))));
    }
}
