//! Synthetic two-domain classification data.
//!
//! Patch embeddings live on a row-major grid `ceil(sqrt(N1))` tokens wide
//! (the last row may be partial).
//! General-domain samples carry a low-frequency wave across the whole grid
//! whose phase encodes the label. Emotion-domain samples carry a localized
//! 2x2 "face" patch: a constant marker direction, a label-coded polarity
//! pattern and extra noise. Both domains share the same background noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::VisualEmbeddings;
use crate::error::{Error, Result};
use crate::tensor::{standard_normal, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    General,
    Emotion,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::General => "general",
            Domain::Emotion => "emotion",
        }
    }
}

/// Text prompt id per domain; the remaining text ids are filler drawn from
/// `[2, vocab)`.
pub fn prompt_token(domain: Domain) -> usize {
    match domain {
        Domain::General => 0,
        Domain::Emotion => 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n: usize,
    /// Embedding width `d_v`.
    pub d_v: usize,
    /// Tokens per sample `N1`.
    pub n1: usize,
    /// Text length `M` (including the prompt id).
    pub text_len: usize,
    pub vocab: usize,
    pub classes: usize,
    pub emotion_fraction: f64,
    pub label_noise: f64,
    pub noise_std: f64,
    pub wave_amplitude: f64,
    pub marker_amplitude: f64,
    pub polarity_amplitude: f64,
    pub face_noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 2000,
            d_v: 8,
            n1: 16,
            text_len: 4,
            vocab: 16,
            classes: 2,
            emotion_fraction: 0.5,
            label_noise: 0.05,
            noise_std: 0.3,
            wave_amplitude: 1.0,
            marker_amplitude: 1.5,
            polarity_amplitude: 1.5,
            face_noise_std: 0.6,
        }
    }
}

impl DataConfig {
    /// Grid width `ceil(sqrt(N1))`.
    pub fn side(&self) -> usize {
        (1..=self.n1).find(|w| w * w >= self.n1).unwrap_or(1)
    }

    /// Number of complete grid rows.
    pub fn full_rows(&self) -> usize {
        self.n1 / self.side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.side() < 2 || self.full_rows() < 2 {
            return Err(Error::config(format!("n1 = {} leaves no room for a 2x2 face patch", self.n1)));
        }
        if self.d_v < 4 || !self.d_v.is_multiple_of(2) {
            return Err(Error::config(format!("d_v = {} must be even and >= 4", self.d_v)));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.text_len == 0 || self.vocab < 3 {
            return Err(Error::config("text_len must be >= 1 and vocab >= 3"));
        }
        if !(0.0..=1.0).contains(&self.emotion_fraction) || !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::config("emotion_fraction must be in [0, 1] and label_noise in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    /// `[N1 x d_v]`, row-major values.
    pub embeddings: Vec<f64>,
    pub text: Vec<usize>,
    /// Training label (after label noise).
    pub label: usize,
    /// Label the features were generated from.
    pub clean_label: usize,
    pub domain: Domain,
    /// Grid positions of the face patch (empty for general samples).
    pub face_tokens: Vec<usize>,
}

impl SyntheticSample {
    pub fn visual(&self, d_v: usize) -> Result<VisualEmbeddings> {
        let n1 = self.embeddings.len() / d_v;
        VisualEmbeddings::new(Tensor::new(&[n1, d_v], self.embeddings.clone())?)
    }
}

/// Half-width unit vectors used by the generator: the wave direction over
/// the first half of the channels, the face marker and two orthogonal
/// polarity patterns over the second half.
#[derive(Clone, Debug)]
pub struct Directions {
    pub wave: Vec<f64>,
    pub marker: Vec<f64>,
    pub polarity: [Vec<f64>; 2],
}

impl Directions {
    pub fn new(d_v: usize) -> Self {
        let half = d_v / 2;
        let s = 1.0 / (half as f64).sqrt();
        let mut wave = vec![0.0; d_v];
        let mut marker = vec![0.0; d_v];
        let mut p0 = vec![0.0; d_v];
        let mut p1 = vec![0.0; d_v];
        for j in 0..half {
            wave[j] = s;
            marker[half + j] = s;
            p0[half + j] = if j % 2 == 0 { s } else { -s };
            p1[half + j] = if (j / 2) % 2 == 0 { s } else { -s };
        }
        Directions {
            wave,
            marker,
            polarity: [p0, p1],
        }
    }

    /// Label-coded face pattern: `cos(2 pi y / C) p0 + sin(2 pi y / C) p1`.
    pub fn polarity_for(&self, label: usize, classes: usize) -> Vec<f64> {
        let a = 2.0 * std::f64::consts::PI * label as f64 / classes as f64;
        self.polarity[0]
            .iter()
            .zip(&self.polarity[1])
            .map(|(x, y)| a.cos() * x + a.sin() * y)
            .collect()
    }
}

/// Wave value at grid cell `(r, c)` for `label`.
pub fn wave_value(r: usize, c: usize, side: usize, label: usize, classes: usize) -> f64 {
    let theta = std::f64::consts::PI * (r + c) as f64 / side as f64;
    let phase = std::f64::consts::PI * label as f64 / classes as f64;
    (theta + phase).cos()
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Deterministic dataset of `cfg.n` samples; domains are assigned to an exact
/// `emotion_fraction` share and shuffled.
pub fn generate_dataset(seed: u64, cfg: &DataConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    if cfg.n == 0 {
        return Err(Error::config("dataset size n must be positive"));
    }
    let n_emotion = (cfg.n as f64 * cfg.emotion_fraction).round() as usize;
    let mut domains: Vec<Domain> = (0..cfg.n)
        .map(|i| if i < n_emotion { Domain::Emotion } else { Domain::General })
        .collect();
    domains.shuffle(&mut sample_rng(seed, usize::MAX - 1));
    let dirs = Directions::new(cfg.d_v);
    Ok(domains
        .into_iter()
        .enumerate()
        .map(|(i, domain)| generate_sample(&mut sample_rng(seed, i), cfg, &dirs, domain))
        .collect())
}

fn generate_sample(rng: &mut ChaCha8Rng, cfg: &DataConfig, dirs: &Directions, domain: Domain) -> SyntheticSample {
    let (side, d) = (cfg.side(), cfg.d_v);
    let clean_label = rng.gen_range(0..cfg.classes);
    let mut x: Vec<f64> = (0..cfg.n1 * d).map(|_| cfg.noise_std * standard_normal(rng)).collect();
    let mut face_tokens = Vec::new();
    match domain {
        Domain::General => {
            for t in 0..cfg.n1 {
                let (r, c) = (t / side, t % side);
                let w = cfg.wave_amplitude * wave_value(r, c, side, clean_label, cfg.classes);
                for j in 0..d {
                    x[t * d + j] += w * dirs.wave[j];
                }
            }
        }
        Domain::Emotion => {
            let r0 = rng.gen_range(0..cfg.full_rows() - 1);
            let c0 = rng.gen_range(0..side - 1);
            let pattern = dirs.polarity_for(clean_label, cfg.classes);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let t = (r0 + dr) * side + c0 + dc;
                face_tokens.push(t);
                for j in 0..d {
                    x[t * d + j] += cfg.marker_amplitude * dirs.marker[j]
                        + cfg.polarity_amplitude * pattern[j]
                        + cfg.face_noise_std * standard_normal(rng);
                }
            }
            face_tokens.sort_unstable();
        }
    }
    let label = if rng.gen::<f64>() < cfg.label_noise {
        let shift = rng.gen_range(1..cfg.classes);
        (clean_label + shift) % cfg.classes
    } else {
        clean_label
    };
    let mut text = vec![prompt_token(domain)];
    text.extend((1..cfg.text_len).map(|_| rng.gen_range(2..cfg.vocab)));
    SyntheticSample {
        embeddings: x,
        text,
        label,
        clean_label,
        domain,
        face_tokens,
    }
}

/// Samples of one domain, in order.
pub fn filter_domain(samples: &[SyntheticSample], domain: Domain) -> Vec<SyntheticSample> {
    samples.iter().filter(|s| s.domain == domain).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let cfg = DataConfig {
            n: 100,
            ..DataConfig::default()
        };
        let a = generate_dataset(11, &cfg).unwrap();
        let b = generate_dataset(11, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let emo = a.iter().filter(|s| s.domain == Domain::Emotion).count();
        assert_eq!(emo, 50);
        assert_ne!(a, generate_dataset(12, &cfg).unwrap());
    }

    #[test]
    fn face_tokens_only_on_emotion() {
        let cfg = DataConfig {
            n: 40,
            ..DataConfig::default()
        };
        for s in generate_dataset(3, &cfg).unwrap() {
            match s.domain {
                Domain::General => assert!(s.face_tokens.is_empty()),
                Domain::Emotion => assert_eq!(s.face_tokens.len(), 4),
            }
            assert_eq!(s.text[0], prompt_token(s.domain));
            assert!(s.text[1..].iter().all(|&t| (2..cfg.vocab).contains(&t)));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let bad = DataConfig {
            n1: 5,
            ..DataConfig::default()
        };
        assert!(generate_dataset(0, &bad).is_err());
        let zero = DataConfig {
            n: 0,
            ..DataConfig::default()
        };
        assert!(generate_dataset(0, &zero).is_err());
    }
}
