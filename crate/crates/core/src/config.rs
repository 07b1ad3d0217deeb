//! Run configuration: a flat `key = value` text format with `[sections]`.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//!
//! [model]
//! k = 4
//! projector = hybrid
//!
//! [stage3]
//! train_embedder = false
//! ```
//!
//! Keys outside any section belong to the `run` section. Every key has a
//! default; unknown keys, duplicate keys and unparsable values are rejected
//! with the key and line number. [`RunConfig::to_text`] writes every key and
//! parses back to the same config.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compressor::ProjectorKind;
use crate::error::{Error, Result};
use crate::eval::data::{generate_dataset, DataConfig, SyntheticSample};
use crate::fec::DEFAULT_TAU;
use crate::lora::LoraConfig;
use crate::pipeline::model::{ModelConfig, ToyModel};
use crate::pipeline::optim::AdamWConfig;
use crate::pipeline::stage::{StageConfig, StageId};
use crate::pipeline::train::{stage_steps, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub model: ModelConfig,
    /// Pixel patch size used when embedding real frames.
    pub patch: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Stages 1, 2, 3 and finetune, in that order.
    pub stages: Vec<StageConfig>,
    pub lora: LoraConfig,
    /// Adapter sets created on the model; the finetune stage trains the one
    /// named in its own `adapter` key.
    pub adapters: Vec<String>,
    pub tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let data = DataConfig {
            d_v: model.d_v,
            n1: model.n1,
            text_len: model.text_len,
            vocab: model.vocab,
            classes: model.classes,
            ..DataConfig::default()
        };
        RunConfig {
            seed: 2024,
            data_seed: 2024,
            model,
            patch: 4,
            data,
            train: TrainConfig::default(),
            stages: StageId::all().into_iter().map(StageConfig::default_for).collect(),
            lora: LoraConfig::default(),
            adapters: vec!["emotion".to_string()],
            tau: DEFAULT_TAU,
        }
    }
}

fn parse_value<T: FromStr>(raw: &str) -> std::result::Result<T, String> {
    raw.parse::<T>().map_err(|_| {
        format!(
            "cannot parse `{raw}` as {}",
            std::any::type_name::<T>().rsplit("::").next().unwrap_or("value")
        )
    })
}

fn parse_bool(raw: &str) -> std::result::Result<bool, String> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("cannot parse `{raw}` as bool (true/false)")),
    }
}

fn stage_section(id: StageId) -> &'static str {
    match id {
        StageId::One => "stage1",
        StageId::Two => "stage2",
        StageId::Three => "stage3",
        StageId::Finetune => "finetune",
    }
}

impl RunConfig {
    pub fn stage(&self, id: StageId) -> &StageConfig {
        self.stages.iter().find(|s| s.id == id).expect("all four stages are present")
    }

    pub fn stage_mut(&mut self, id: StageId) -> &mut StageConfig {
        self.stages.iter_mut().find(|s| s.id == id).expect("all four stages are present")
    }

    fn set(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
        let (section, name) = key.split_once('.').unwrap_or(("run", key));
        if let Some(id) = StageId::all().into_iter().find(|&id| stage_section(id) == section) {
            let st = self.stage_mut(id);
            match name {
                "epochs" => st.epochs = parse_value(raw)?,
                "lr" => st.peak_lr = parse_value(raw)?,
                "train_embedder" if id != StageId::Finetune => st.train_embedder = parse_bool(raw)?,
                "embedder_lr_scale" if id != StageId::Finetune => st.embedder_lr_scale = parse_value(raw)?,
                "adapter" if id == StageId::Finetune => st.adapter = Some(raw.to_string()),
                "fec" if id == StageId::Finetune => st.fec_active = parse_bool(raw)?,
                _ => return Err("unknown key".into()),
            }
            return Ok(());
        }
        let m = &mut self.model;
        let d = &mut self.data;
        let o = &mut self.train.optimizer;
        match (section, name) {
            ("run", "seed") => self.seed = parse_value(raw)?,
            ("run", "data_seed") => self.data_seed = parse_value(raw)?,
            ("model", "d_v") => m.d_v = parse_value(raw)?,
            ("model", "d_t") => m.d_t = parse_value(raw)?,
            ("model", "d_h") => m.d_h = parse_value(raw)?,
            ("model", "n1") => m.n1 = parse_value(raw)?,
            ("model", "k") => m.k = parse_value(raw)?,
            ("model", "text_len") => m.text_len = parse_value(raw)?,
            ("model", "vocab") => m.vocab = parse_value(raw)?,
            ("model", "classes") => m.classes = parse_value(raw)?,
            ("model", "decoder_blocks") => m.decoder_blocks = parse_value(raw)?,
            ("model", "mlp_ratio") => m.mlp_ratio = parse_value(raw)?,
            ("model", "patch") => self.patch = parse_value(raw)?,
            ("model", "projector") => {
                m.projector = ProjectorKind::parse(raw)
                    .ok_or_else(|| format!("unknown projector `{raw}` (mlp, fusion, hybrid)"))?
            }
            ("data", "n") => d.n = parse_value(raw)?,
            ("data", "emotion_fraction") => d.emotion_fraction = parse_value(raw)?,
            ("data", "label_noise") => d.label_noise = parse_value(raw)?,
            ("data", "noise_std") => d.noise_std = parse_value(raw)?,
            ("data", "wave_amplitude") => d.wave_amplitude = parse_value(raw)?,
            ("data", "marker_amplitude") => d.marker_amplitude = parse_value(raw)?,
            ("data", "polarity_amplitude") => d.polarity_amplitude = parse_value(raw)?,
            ("data", "face_noise_std") => d.face_noise_std = parse_value(raw)?,
            ("train", "batch_size") => self.train.batch_size = parse_value(raw)?,
            ("train", "warmup_ratio") => self.train.warmup_ratio = parse_value(raw)?,
            ("train", "beta1") => o.beta1 = parse_value(raw)?,
            ("train", "beta2") => o.beta2 = parse_value(raw)?,
            ("train", "eps") => o.eps = parse_value(raw)?,
            ("train", "weight_decay") => o.weight_decay = parse_value(raw)?,
            ("lora", "rank") => self.lora.rank = parse_value(raw)?,
            ("lora", "alpha") => self.lora.alpha = parse_value(raw)?,
            ("lora", "dropout") => self.lora.dropout = parse_value(raw)?,
            ("lora", "adapters") => {
                self.adapters = raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            ("fec", "tau") => self.tau = parse_value(raw)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Copies the shared model dimensions into the data config.
    fn sync(&mut self) {
        self.data.d_v = self.model.d_v;
        self.data.n1 = self.model.n1;
        self.data.text_len = self.model.text_len;
        self.data.vocab = self.model.vocab;
        self.data.classes = self.model.classes;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::from("run");
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    key: None,
                    line: Some(lineno),
                    msg: format!("malformed section header `{line}`"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: None,
                line: Some(lineno),
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = format!("{section}.{}", k.trim());
            let err = |msg: String| Error::Config {
                key: Some(key.clone()),
                line: Some(lineno),
                msg,
            };
            if !seen.insert(key.clone()) {
                return Err(err("duplicate key".into()));
            }
            cfg.set(&key, v.trim()).map_err(err)?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Error::Config {
            key: Some(key.into()),
            line: None,
            msg,
        };
        self.model.validate()?;
        self.data.validate()?;
        if self.data.n == 0 {
            return Err(bad("data.n", "must be positive".into()));
        }
        if self.patch == 0 {
            return Err(bad("model.patch", "must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(bad("train.batch_size", "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.warmup_ratio) {
            return Err(bad("train.warmup_ratio", "must be in [0, 1]".into()));
        }
        let o = &self.train.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(bad("train.beta1", "betas must be in [0, 1)".into()));
        }
        if o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(bad("train.eps", "eps must be positive and weight_decay non-negative".into()));
        }
        self.lora.validate()?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(bad("fec.tau", format!("{} outside (0, 1]", self.tau)));
        }
        for st in &self.stages {
            if !(st.peak_lr >= 0.0 && st.peak_lr.is_finite()) {
                return Err(bad(&format!("{}.lr", stage_section(st.id)), "must be finite and >= 0".into()));
            }
        }
        let ft = self.stage(StageId::Finetune);
        match &ft.adapter {
            Some(a) if self.adapters.contains(a) => {}
            Some(a) => return Err(bad("finetune.adapter", format!("`{a}` is not listed in lora.adapters"))),
            None => return Err(bad("finetune.adapter", "missing".into())),
        }
        Ok(())
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let o = &self.train.optimizer;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}\ndata_seed = {}", self.seed, self.data_seed);
        let _ = writeln!(
            s,
            "\n[model]\nd_v = {}\nd_t = {}\nd_h = {}\nn1 = {}\nk = {}\ntext_len = {}\nvocab = {}\nclasses = {}\ndecoder_blocks = {}\nmlp_ratio = {}\npatch = {}\nprojector = {}",
            m.d_v, m.d_t, m.d_h, m.n1, m.k, m.text_len, m.vocab, m.classes, m.decoder_blocks, m.mlp_ratio, self.patch,
            m.projector.name()
        );
        let _ = writeln!(
            s,
            "\n[data]\nn = {}\nemotion_fraction = {:?}\nlabel_noise = {:?}\nnoise_std = {:?}\nwave_amplitude = {:?}\nmarker_amplitude = {:?}\npolarity_amplitude = {:?}\nface_noise_std = {:?}",
            d.n, d.emotion_fraction, d.label_noise, d.noise_std, d.wave_amplitude, d.marker_amplitude,
            d.polarity_amplitude, d.face_noise_std
        );
        let _ = writeln!(
            s,
            "\n[train]\nbatch_size = {}\nwarmup_ratio = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nweight_decay = {:?}",
            self.train.batch_size, self.train.warmup_ratio, o.beta1, o.beta2, o.eps, o.weight_decay
        );
        for st in &self.stages {
            let _ = write!(s, "\n[{}]\nepochs = {}\nlr = {:?}\n", stage_section(st.id), st.epochs, st.peak_lr);
            if st.id == StageId::Finetune {
                let _ = writeln!(s, "adapter = {}\nfec = {}", st.adapter.as_deref().unwrap_or(""), st.fec_active);
            } else {
                let _ = writeln!(
                    s,
                    "train_embedder = {}\nembedder_lr_scale = {:?}",
                    st.train_embedder, st.embedder_lr_scale
                );
            }
        }
        let _ = writeln!(
            s,
            "\n[lora]\nrank = {}\nalpha = {:?}\ndropout = {:?}\nadapters = {}",
            self.lora.rank,
            self.lora.alpha,
            self.lora.dropout,
            self.adapters.join(",")
        );
        let _ = writeln!(s, "\n[fec]\ntau = {:?}", self.tau);
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Number of training samples each stage sees.
    pub fn stage_samples(&self, id: StageId) -> usize {
        let emotion = (self.data.n as f64 * self.data.emotion_fraction).round() as usize;
        match self.stage(id).data {
            crate::pipeline::stage::DataSelector::General => self.data.n - emotion,
            crate::pipeline::stage::DataSelector::Emotion => emotion,
            crate::pipeline::stage::DataSelector::Mixed => self.data.n,
        }
    }

    pub fn total_steps(&self, id: StageId) -> u64 {
        stage_steps(self.stage_samples(id), self.stage(id).epochs, self.train.batch_size)
    }

    /// Human-readable summary of the derived values.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let mut s = format!("config {}\n", self.hash());
        let _ = writeln!(s, "N1 = {}, k = {}, N2 = {}", m.n1, m.k, m.n2());
        if !m.n1.is_multiple_of(m.k) {
            let _ = writeln!(
                s,
                "note: N1 = {} is not a multiple of k = {}; padded to {} by repeating the last token",
                m.n1,
                m.k,
                m.n2() * m.k
            );
        }
        for st in &self.stages {
            let _ = writeln!(
                s,
                "stage {}: {} samples, {} epochs, {} steps, peak lr {}",
                st.id,
                self.stage_samples(st.id),
                st.epochs,
                self.total_steps(st.id),
                st.peak_lr
            );
        }
        let o = &self.train.optimizer;
        let _ = writeln!(
            s,
            "adamw: beta1 {} beta2 {} eps {} weight decay {}, warmup ratio {}",
            o.beta1, o.beta2, o.eps, o.weight_decay, self.train.warmup_ratio
        );
        s
    }

    pub fn optimizer(&self) -> AdamWConfig {
        self.train.optimizer
    }

    /// Fresh model from `seed`, with every configured adapter set attached
    /// (set `i` is seeded with `seed ^ (i + 1)`) and none selected.
    pub fn build_model(&self) -> Result<ToyModel> {
        let mut model = ToyModel::new(self.model.clone(), self.seed)?;
        for (i, name) in self.adapters.iter().enumerate() {
            model.add_adapter_set(name, &self.lora, self.seed ^ (i as u64 + 1))?;
        }
        Ok(model)
    }

    pub fn dataset(&self) -> Result<Vec<SyntheticSample>> {
        generate_dataset(self.data_seed, &self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(c.echo().contains("N2 = 4"));
    }

    #[test]
    fn padding_note() {
        let c = RunConfig::parse("[model]\nn1 = 8\nk = 3\n").unwrap();
        let echo = c.echo();
        assert!(echo.contains("N2 = 3"), "{echo}");
        assert!(echo.contains("padded to 9"), "{echo}");
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = RunConfig::parse("seed = 1\n\n[train]\nlearningrate = 0.1\n").unwrap_err();
        match err {
            Error::Config { key, line, .. } => {
                assert_eq!(key.as_deref(), Some("train.learningrate"));
                assert_eq!(line, Some(4));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn type_mismatch_and_duplicates() {
        let e = RunConfig::parse("[model]\nk = four\n").unwrap_err();
        assert!(e.to_string().contains("model.k"), "{e}");
        let e = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
        let e = RunConfig::parse("[stage1]\nadapter = x\n").unwrap_err();
        assert!(e.to_string().contains("stage1.adapter"), "{e}");
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig {
            seed: 99,
            ..RunConfig::default()
        };
        c.model.projector = ProjectorKind::Fusion;
        c.stage_mut(StageId::Three).train_embedder = false;
        c.adapters = vec!["emotion".into(), "dfew".into()];
        c.data.label_noise = 0.1 + 0.2;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn finetune_adapter_must_exist() {
        let e = RunConfig::parse("[finetune]\nadapter = other\n").unwrap_err();
        assert!(e.to_string().contains("finetune.adapter"), "{e}");
    }
}
