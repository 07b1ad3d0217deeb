//! Evaluation passes: recall metrics and per-domain gate weights.

use serde::{Deserialize, Serialize};

use crate::compressor::{ProjectorKind, VisualEmbeddings};
use crate::error::{Error, Result};
use crate::eval::data::{Domain, SyntheticSample};
use crate::eval::metrics::{argmax, compute_metrics, MetricsReport};
use crate::fec::append_salient_tokens;
use crate::pipeline::model::ToyModel;
use crate::tensor::Tensor;

/// How gate weights are pooled into a domain mean.
pub const GATE_AVERAGING: &str = "per-token";

/// Visual embeddings fed to the model for `sample`. With `fec_active`, emotion
/// samples get a masked copy of their face tokens appended.
pub fn model_input(sample: &SyntheticSample, d_v: usize, fec_active: bool) -> Result<Tensor> {
    let emb = sample.visual(d_v)?;
    if fec_active && !sample.face_tokens.is_empty() {
        Ok(append_salient_tokens(&emb, &sample.face_tokens)?.values)
    } else {
        Ok(emb.values)
    }
}

/// Same as [`model_input`] but keeps the source tags.
pub fn model_embeddings(sample: &SyntheticSample, d_v: usize, fec_active: bool) -> Result<VisualEmbeddings> {
    let emb = sample.visual(d_v)?;
    if fec_active && !sample.face_tokens.is_empty() {
        append_salient_tokens(&emb, &sample.face_tokens)
    } else {
        Ok(emb)
    }
}

pub fn predict_all(model: &ToyModel, samples: &[SyntheticSample], fec_active: bool) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let e = model_input(s, model.config.d_v, fec_active)?;
            let (logits, _) = model.predict(&e, &s.text)?;
            Ok(argmax(logits.data()))
        })
        .collect()
}

/// Metrics against the observed labels.
pub fn evaluate(model: &ToyModel, samples: &[SyntheticSample], fec_active: bool) -> Result<MetricsReport> {
    let preds = predict_all(model, samples, fec_active)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&preds, &labels, model.config.classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGate {
    pub domain: Domain,
    /// Mean emotion-expert weight `G`.
    pub emotion_weight: f64,
    /// Mean general-expert weight `1 - G`.
    pub general_weight: f64,
    pub tokens: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub averaging: String,
    /// Domains in `Domain` order; absent domains are omitted.
    pub domains: Vec<DomainGate>,
}

impl GateReport {
    pub fn domain(&self, d: Domain) -> Option<&DomainGate> {
        self.domains.iter().find(|g| g.domain == d)
    }
}

/// Evaluation-mode gate weights averaged over every compressed token of each
/// domain.
pub fn gate_report(model: &ToyModel, samples: &[SyntheticSample], fec_active: bool) -> Result<GateReport> {
    if model.projector.kind() != ProjectorKind::HybridCompressor {
        return Err(Error::Capability(format!(
            "no gate to report: projector is `{}`",
            model.projector.kind().name()
        )));
    }
    let mut domains = Vec::new();
    for domain in [Domain::General, Domain::Emotion] {
        let (mut g_sum, mut h_sum, mut tokens, mut count) = (0.0, 0.0, 0usize, 0usize);
        for s in samples.iter().filter(|s| s.domain == domain) {
            let e = model_input(s, model.config.d_v, fec_active)?;
            let (_, visual) = model.predict(&e, &s.text)?;
            for &g in visual.gate_trace.data() {
                g_sum += g;
                h_sum += 1.0 - g;
            }
            tokens += visual.gate_trace.len();
            count += 1;
        }
        if count > 0 {
            domains.push(DomainGate {
                domain,
                emotion_weight: g_sum / tokens as f64,
                general_weight: h_sum / tokens as f64,
                tokens,
                samples: count,
            });
        }
    }
    Ok(GateReport {
        averaging: GATE_AVERAGING.to_string(),
        domains,
    })
}
