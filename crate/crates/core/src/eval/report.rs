//! Serialized evaluation reports: pretty JSON and a flat CSV.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::metrics::MetricsReport;
use crate::eval::telemetry::GateReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Option<MetricsReport>,
    pub gate: Option<GateReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| crate::Error::Numeric(e.to_string()))
    }

    /// `section,domain,metric,value` rows. Floats use Rust's shortest
    /// round-trip formatting, which never depends on locale.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,domain,metric,value\n");
        if let Some(m) = &self.metrics {
            let _ = writeln!(out, "metrics,all,war,{}", m.war);
            let _ = writeln!(out, "metrics,all,uar,{}", m.uar);
            let _ = writeln!(out, "metrics,all,samples,{}", m.samples);
            for (c, r) in m.per_class_recall.iter().enumerate() {
                if let Some(r) = r {
                    let _ = writeln!(out, "metrics,all,recall_{c},{r}");
                }
            }
        }
        if let Some(g) = &self.gate {
            for d in &g.domains {
                let name = d.domain.name();
                let _ = writeln!(out, "gate,{name},emotion_weight,{}", d.emotion_weight);
                let _ = writeln!(out, "gate,{name},general_weight,{}", d.general_weight);
                let _ = writeln!(out, "gate,{name},tokens,{}", d.tokens);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::data::Domain;
    use crate::eval::metrics::compute_metrics;
    use crate::eval::telemetry::DomainGate;

    #[test]
    fn csv_layout() {
        let r = EvalReport {
            metrics: Some(compute_metrics(&[0, 1, 1], &[0, 1, 0], 2).unwrap()),
            gate: Some(GateReport {
                averaging: "per-token".into(),
                domains: vec![DomainGate {
                    domain: Domain::Emotion,
                    emotion_weight: 0.625,
                    general_weight: 0.375,
                    tokens: 8,
                    samples: 2,
                }],
            }),
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "section,domain,metric,value");
        assert!(lines.contains(&"gate,emotion,emotion_weight,0.625"));
        assert!(lines.contains(&"metrics,all,recall_1,1"));
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
