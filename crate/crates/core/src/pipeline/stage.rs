//! Training stages and the parameters each one may update.
//!
//! | stage    | embedder | general | emotion | gate  | decoder | LoRA  | FEC |
//! |----------|----------|---------|---------|-------|---------|-------|-----|
//! | 1        | train    | train   | freeze  | train | freeze  | -     | no  |
//! | 2        | train    | freeze  | train   | train | freeze  | -     | no  |
//! | 3        | train    | train   | train   | train | train   | -     | no  |
//! | finetune | freeze   | freeze  | freeze  | freeze| freeze  | train | yes |
//!
//! Projectors without experts (MLP, fusion) count as one group that trains in
//! every pre-training stage.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::data::Domain;
use crate::params::ParamSet;
use crate::pipeline::model::ToyModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    One,
    Two,
    Three,
    Finetune,
}

impl StageId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(StageId::One),
            "2" => Ok(StageId::Two),
            "3" => Ok(StageId::Three),
            "finetune" => Ok(StageId::Finetune),
            other => Err(Error::Config {
                key: Some("stage".into()),
                line: None,
                msg: format!("unknown stage `{other}` (expected 1, 2, 3 or finetune)"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageId::One => "1",
            StageId::Two => "2",
            StageId::Three => "3",
            StageId::Finetune => "finetune",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            StageId::One => 1,
            StageId::Two => 2,
            StageId::Three => 3,
            StageId::Finetune => 4,
        }
    }

    pub fn all() -> [StageId; 4] {
        [StageId::One, StageId::Two, StageId::Three, StageId::Finetune]
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Coarse ownership of a parameter, as used by the mask table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    PatchEmbedder,
    GeneralExpert,
    EmotionExpert,
    Gate,
    /// MLP or fusion projector parameters.
    Projector,
    Decoder,
    Lora,
}

pub fn param_group(name: &str) -> Result<ParamGroup> {
    let group = if name.starts_with("lora/") {
        ParamGroup::Lora
    } else if name.starts_with("embed.") {
        ParamGroup::PatchEmbedder
    } else if name.starts_with("projector.hybrid.general.") {
        ParamGroup::GeneralExpert
    } else if name.starts_with("projector.hybrid.emotion.") {
        ParamGroup::EmotionExpert
    } else if name.starts_with("projector.hybrid.gate.") {
        ParamGroup::Gate
    } else if name.starts_with("projector.") {
        ParamGroup::Projector
    } else if name.starts_with("decoder.") {
        ParamGroup::Decoder
    } else {
        return Err(Error::Lookup(format!("parameter `{name}` belongs to no group")));
    };
    Ok(group)
}

/// Which part of the dataset a stage trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSelector {
    General,
    Emotion,
    Mixed,
}

impl DataSelector {
    pub fn accepts(self, domain: Domain) -> bool {
        match self {
            DataSelector::General => domain == Domain::General,
            DataSelector::Emotion => domain == Domain::Emotion,
            DataSelector::Mixed => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub id: StageId,
    pub epochs: usize,
    pub peak_lr: f64,
    pub data: DataSelector,
    pub fec_active: bool,
    /// Adapter set trained in the finetune stage.
    pub adapter: Option<String>,
    /// Whether the patch embedder trains in stages 1-3 (the finetune stage
    /// always freezes it).
    pub train_embedder: bool,
    /// Multiplier on the learning rate of the patch embedder.
    pub embedder_lr_scale: f64,
}

impl StageConfig {
    /// Epoch counts 1 / 1 / 3 / 5; learning rates are toy-scale. The
    /// warm-up stages update the patch embedder at 1/100 of the stage rate so
    /// that it cannot absorb what the gate is meant to learn.
    pub fn default_for(id: StageId) -> Self {
        let (epochs, peak_lr, data, embedder_lr_scale) = match id {
            StageId::One => (1, 1e-2, DataSelector::General, 0.01),
            StageId::Two => (1, 1e-2, DataSelector::Emotion, 0.01),
            StageId::Three => (3, 5e-3, DataSelector::Mixed, 1.0),
            StageId::Finetune => (5, 5e-3, DataSelector::Emotion, 1.0),
        };
        StageConfig {
            id,
            epochs,
            peak_lr,
            data,
            fec_active: id == StageId::Finetune,
            adapter: (id == StageId::Finetune).then(|| "emotion".to_string()),
            train_embedder: true,
            embedder_lr_scale,
        }
    }

    /// Learning rate of `name` at a schedule value of `lr`.
    pub fn lr_for(&self, name: &str, lr: f64) -> f64 {
        if name.starts_with("embed.") {
            lr * self.embedder_lr_scale
        } else {
            lr
        }
    }

    /// Whether the mask table lets this stage update `name`.
    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        use ParamGroup::*;
        let group = param_group(name)?;
        Ok(match self.id {
            StageId::One => match group {
                PatchEmbedder => self.train_embedder,
                _ => matches!(group, GeneralExpert | Gate | Projector),
            },
            StageId::Two => match group {
                PatchEmbedder => self.train_embedder,
                _ => matches!(group, EmotionExpert | Gate | Projector),
            },
            StageId::Three => match group {
                PatchEmbedder => self.train_embedder,
                Lora => false,
                _ => true,
            },
            StageId::Finetune => {
                group == Lora
                    && self
                        .adapter
                        .as_deref()
                        .is_some_and(|a| name.starts_with(&format!("lora/{a}/")))
            }
        })
    }
}

/// Names of the parameters `stage` trains; everything else stays frozen.
pub fn apply_stage_mask(model: &ToyModel, stage: &StageConfig) -> Result<BTreeSet<String>> {
    if stage.id == StageId::Finetune {
        let name = stage
            .adapter
            .as_deref()
            .ok_or_else(|| Error::config("finetune stage needs an adapter name"))?;
        if model.adapters.set(name).is_none() {
            return Err(Error::Lookup(format!("no adapter set named `{name}`")));
        }
    }
    let mut out = BTreeSet::new();
    for name in model.names() {
        if stage.is_trainable(&name)? {
            out.insert(name);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraConfig;
    use crate::pipeline::model::ModelConfig;

    fn model() -> ToyModel {
        let mut m = ToyModel::new(ModelConfig::default(), 1).unwrap();
        m.add_adapter_set("emotion", &LoraConfig::default(), 2).unwrap();
        m.add_adapter_set("dfew", &LoraConfig::default(), 3).unwrap();
        m
    }

    fn groups(m: &ToyModel, set: &BTreeSet<String>) -> BTreeSet<String> {
        m.names()
            .into_iter()
            .filter(|n| set.contains(n))
            .map(|n| format!("{:?}", param_group(&n).unwrap()))
            .collect()
    }

    #[test]
    fn stage_one_mask() {
        let m = model();
        let t = apply_stage_mask(&m, &StageConfig::default_for(StageId::One)).unwrap();
        let g = groups(&m, &t);
        assert_eq!(g, BTreeSet::from(["PatchEmbedder".into(), "GeneralExpert".into(), "Gate".into()]));
    }

    #[test]
    fn stage_two_mask() {
        let m = model();
        let t = apply_stage_mask(&m, &StageConfig::default_for(StageId::Two)).unwrap();
        let g = groups(&m, &t);
        assert_eq!(g, BTreeSet::from(["PatchEmbedder".into(), "EmotionExpert".into(), "Gate".into()]));
    }

    #[test]
    fn stage_three_trains_everything_but_lora() {
        let m = model();
        let t = apply_stage_mask(&m, &StageConfig::default_for(StageId::Three)).unwrap();
        for n in m.names() {
            assert_eq!(t.contains(&n), !n.starts_with("lora/"), "{n}");
        }
        let mut cfg = StageConfig::default_for(StageId::Three);
        cfg.train_embedder = false;
        let t = apply_stage_mask(&m, &cfg).unwrap();
        assert!(!t.iter().any(|n| n.starts_with("embed.")));
    }

    #[test]
    fn finetune_trains_only_named_adapter() {
        let m = model();
        let t = apply_stage_mask(&m, &StageConfig::default_for(StageId::Finetune)).unwrap();
        assert!(!t.is_empty());
        assert!(t.iter().all(|n| n.starts_with("lora/emotion/")));
        let mut cfg = StageConfig::default_for(StageId::Finetune);
        cfg.adapter = Some("missing".into());
        assert!(matches!(apply_stage_mask(&m, &cfg), Err(Error::Lookup(_))));
    }

    #[test]
    fn unknown_stage_is_config_error() {
        assert!(matches!(StageId::parse("4"), Err(Error::Config { .. })));
        assert_eq!(StageId::parse("finetune").unwrap(), StageId::Finetune);
    }
}
