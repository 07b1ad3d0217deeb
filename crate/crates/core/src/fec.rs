//! Facial emotion capture: pick frames whose detected faces carry a
//! confident emotion prediction, blank everything outside those faces, and
//! append the masked frames after the original stream.
//!
//! Detection and emotion scoring sit behind [`FaceScorer`]; the reference
//! implementation, [`ScriptedScorer`], replays observations from a sidecar
//! file so the pipeline can run without any vision model.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::compressor::{TokenSource, VisualEmbeddings};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.9;

/// Fixed emotion palette, in probability-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Angry,
    Disgust,
    Fear,
    Happy,
    Sad,
    Surprise,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; 7] = [
        Emotion::Angry,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Surprise,
        Emotion::Neutral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Surprise => "surprise",
            Emotion::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One video frame, pixels `[h x w x 3]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub pixels: Tensor,
}

impl FrameRecord {
    pub fn new(index: usize, timestamp: f64, pixels: Tensor) -> Result<Self> {
        match pixels.shape() {
            [_, _, 3] => {}
            other => {
                return Err(Error::dim(
                    "frame",
                    format!("pixels must be [h x w x 3], got {other:?}"),
                ))
            }
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!(
                "frame {index}: pixel values must lie in [0, 1]"
            )));
        }
        Ok(FrameRecord {
            index,
            timestamp,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Axis-aligned box in pixel units: columns `x..x+width`, rows `y..y+height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl From<[usize; 4]> for BBox {
    fn from([x, y, width, height]: [usize; 4]) -> Self {
        BBox {
            x,
            y,
            width,
            height,
        }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.width, b.height]
    }
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        col >= self.x && col < self.x + self.width && row >= self.y && row < self.y + self.height
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.width > 0 && self.height > 0 && self.x + self.width <= width && self.y + self.height <= height
    }
}

/// A detected face: box, landmarks and a probability over [`Emotion::ALL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceObservation {
    pub bbox: BBox,
    #[serde(default)]
    pub landmarks: Vec<(f64, f64)>,
    #[serde(rename = "probs")]
    pub emotion_probs: [f64; 7],
}

impl FaceObservation {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.emotion_probs.iter().sum();
        if self.emotion_probs.iter().any(|&p| p.is_nan() || p < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "emotion probabilities {:?} are not a distribution",
                self.emotion_probs
            )));
        }
        Ok(())
    }

    /// Highest-probability emotion and its probability.
    pub fn top(&self) -> (Emotion, f64) {
        let (i, p) = self
            .emotion_probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        (Emotion::ALL[i], p)
    }

    pub fn confidence(&self) -> f64 {
        self.top().1
    }
}

/// Face detection plus emotion scoring. Must be deterministic per frame.
pub trait FaceScorer {
    fn detect(&self, frame: &FrameRecord) -> Result<Vec<FaceObservation>>;
}

/// Replays observations keyed by frame index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScriptedScorer {
    by_frame: BTreeMap<usize, Vec<FaceObservation>>,
}

/// One line of the observation sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub frame: usize,
    pub faces: Vec<FaceObservation>,
}

impl ScriptedScorer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame: usize, faces: Vec<FaceObservation>) -> Result<()> {
        for f in &faces {
            f.validate()?;
        }
        self.by_frame.insert(frame, faces);
        Ok(())
    }

    /// Reads the line-delimited JSON sidecar; blank lines are skipped.
    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut scorer = ScriptedScorer::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ObservationRecord = serde_json::from_str(&line).map_err(|e| Error::Config {
                key: None,
                line: Some(n + 1),
                msg: format!("bad observation record: {e}"),
            })?;
            if scorer.by_frame.contains_key(&rec.frame) {
                return Err(Error::Config {
                    key: None,
                    line: Some(n + 1),
                    msg: format!("duplicate record for frame {}", rec.frame),
                });
            }
            scorer.insert(rec.frame, rec.faces)?;
        }
        Ok(scorer)
    }

    pub fn records(&self) -> Vec<ObservationRecord> {
        self.by_frame
            .iter()
            .map(|(&frame, faces)| ObservationRecord {
                frame,
                faces: faces.clone(),
            })
            .collect()
    }
}

impl FaceScorer for ScriptedScorer {
    fn detect(&self, frame: &FrameRecord) -> Result<Vec<FaceObservation>> {
        let faces = self.by_frame.get(&frame.index).cloned().unwrap_or_default();
        for f in &faces {
            if !f.bbox.fits(frame.height(), frame.width()) {
                return Err(Error::Contract(format!(
                    "frame {}: box {:?} outside {}x{} frame",
                    frame.index,
                    f.bbox,
                    frame.height(),
                    frame.width()
                )));
            }
        }
        Ok(faces)
    }
}

/// A face that passed the confidence threshold, with the frame it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyFace {
    pub frame_index: usize,
    pub face: FaceObservation,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("confidence threshold {tau} outside (0, 1]")))
    }
}

/// Every (frame, face) pair whose top emotion probability is at least `tau`,
/// in frame order.
pub fn select_key_frames(
    frames: &[FrameRecord],
    scorer: &dyn FaceScorer,
    tau: f64,
) -> Result<Vec<KeyFace>> {
    check_tau(tau)?;
    let mut order: Vec<&FrameRecord> = frames.iter().collect();
    order.sort_by_key(|f| f.index);
    let mut out = Vec::new();
    for frame in order {
        for face in scorer.detect(frame)? {
            face.validate()?;
            if face.confidence() >= tau {
                out.push(KeyFace {
                    frame_index: frame.index,
                    face,
                });
            }
        }
    }
    Ok(out)
}

/// Zeroes every pixel outside the union of the face boxes.
pub fn apply_spatial_mask(frame: &FrameRecord, faces: &[FaceObservation]) -> Result<FrameRecord> {
    if faces.is_empty() {
        return Err(Error::Contract("spatial mask needs at least one face".into()));
    }
    let (h, w) = (frame.height(), frame.width());
    if let Some(bad) = faces.iter().find(|f| !f.bbox.fits(h, w)) {
        return Err(Error::Contract(format!(
            "box {:?} outside {h}x{w} frame {}",
            bad.bbox, frame.index
        )));
    }
    let mut pixels = frame.pixels.clone();
    let data = pixels.data_mut();
    for row in 0..h {
        for col in 0..w {
            if !faces.iter().any(|f| f.bbox.contains(row, col)) {
                data[(row * w + col) * 3..(row * w + col + 1) * 3].fill(0.0);
            }
        }
    }
    Ok(FrameRecord {
        index: frame.index,
        timestamp: frame.timestamp,
        pixels,
    })
}

/// Original frames in input order followed by masked key frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedSequence {
    pub frames: Vec<FrameRecord>,
    pub original_len: usize,
}

impl ComposedSequence {
    pub fn key_frames(&self) -> &[FrameRecord] {
        &self.frames[self.original_len..]
    }
}

/// Appends `key_frames`, sorted by timestamp, after the untouched originals.
pub fn compose_sequence(frames: &[FrameRecord], mut key_frames: Vec<FrameRecord>) -> ComposedSequence {
    key_frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut out = frames.to_vec();
    out.extend(key_frames);
    ComposedSequence {
        frames: out,
        original_len: frames.len(),
    }
}

/// Outcome of the full capture pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FecOutput {
    pub selected: Vec<KeyFace>,
    pub sequence: ComposedSequence,
}

impl FecOutput {
    /// Distinct frame indices that contributed a key frame, ascending.
    pub fn key_frame_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.selected.iter().map(|k| k.frame_index).collect();
        v.dedup();
        v
    }
}

/// Select, mask (one masked frame per selected frame, keeping all of its
/// qualifying faces), then compose.
pub fn run_fec(frames: &[FrameRecord], scorer: &dyn FaceScorer, tau: f64) -> Result<FecOutput> {
    for pair in frames.windows(2) {
        if pair[1].timestamp <= pair[0].timestamp {
            return Err(Error::Contract(format!(
                "timestamps must increase: frame {} at {} follows {} at {}",
                pair[1].index, pair[1].timestamp, pair[0].index, pair[0].timestamp
            )));
        }
    }
    let selected = select_key_frames(frames, scorer, tau)?;
    let mut by_frame: BTreeMap<usize, Vec<FaceObservation>> = BTreeMap::new();
    for k in &selected {
        by_frame.entry(k.frame_index).or_default().push(k.face.clone());
    }
    let mut masked = Vec::with_capacity(by_frame.len());
    for (index, faces) in &by_frame {
        let frame = frames
            .iter()
            .find(|f| f.index == *index)
            .ok_or_else(|| Error::Lookup(format!("frame {index}")))?;
        masked.push(apply_spatial_mask(frame, faces)?);
    }
    Ok(FecOutput {
        selected,
        sequence: compose_sequence(frames, masked),
    })
}

/// Toy stand-in for a ViT patch embedding: each `p x p x 3` patch is
/// flattened (row, column, channel) and mapped linearly to `d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedder {
    pub patch: usize,
    /// `[p*p*3 x d_v]`
    pub weight: Tensor,
    /// `[d_v]`
    pub bias: Tensor,
}

impl PatchEmbedder {
    pub fn init<R: rand::Rng + ?Sized>(rng: &mut R, patch: usize, d_v: usize) -> Self {
        let fan_in = patch * patch * 3;
        PatchEmbedder {
            patch,
            weight: Tensor::uniform(&[fan_in, d_v], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[d_v]),
        }
    }

    /// Flattened patches of one frame, `[num_patches x p*p*3]`.
    pub fn patches(&self, frame: &FrameRecord) -> Result<Tensor> {
        let (h, w, p) = (frame.height(), frame.width(), self.patch);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::config(format!(
                "{h}x{w} frame is not divisible into {p}x{p} patches"
            )));
        }
        let px = frame.pixels.data();
        let mut data = Vec::with_capacity(h * w * 3);
        for pi in 0..h / p {
            for pj in 0..w / p {
                for r in 0..p {
                    let row = pi * p + r;
                    let start = (row * w + pj * p) * 3;
                    data.extend_from_slice(&px[start..start + p * 3]);
                }
            }
        }
        Tensor::new(&[(h / p) * (w / p), p * p * 3], data)
    }
}

/// Embeds every frame of the sequence and concatenates the tokens; tokens of
/// appended key frames are tagged [`TokenSource::KeyFrame`].
pub fn fec_to_embeddings(seq: &ComposedSequence, embedder: &PatchEmbedder) -> Result<VisualEmbeddings> {
    let first = seq
        .frames
        .first()
        .ok_or_else(|| Error::Contract("empty frame sequence".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::new();
    let mut sources = Vec::new();
    let d_v = embedder.bias.len();
    for (i, frame) in seq.frames.iter().enumerate() {
        if (frame.height(), frame.width()) != (h, w) {
            return Err(Error::dim(
                "fec_to_embeddings",
                format!("frame {} is {}x{}, expected {h}x{w}", frame.index, frame.height(), frame.width()),
            ));
        }
        let patches = embedder.patches(frame)?;
        let emb = patches.matmul(&embedder.weight)?;
        for r in 0..emb.shape()[0] {
            data.extend(emb.row(r).iter().zip(embedder.bias.data()).map(|(a, b)| a + b));
        }
        let tag = if i < seq.original_len {
            TokenSource::Original
        } else {
            TokenSource::KeyFrame
        };
        sources.extend(std::iter::repeat_n(tag, patches.shape()[0]));
    }
    VisualEmbeddings::with_sources(Tensor::new(&[sources.len(), d_v], data)?, sources)
}

/// Embedding-level analogue of the capture pass: appends a copy of the
/// embeddings in which every token outside `salient` is zeroed.
pub fn append_salient_tokens(emb: &VisualEmbeddings, salient: &[usize]) -> Result<VisualEmbeddings> {
    let (n, d) = emb.values.dims2()?;
    if let Some(&bad) = salient.iter().find(|&&i| i >= n) {
        return Err(Error::Index(format!("salient token {bad} of {n}")));
    }
    let mut data = emb.values.data().to_vec();
    data.reserve(n * d);
    for i in 0..n {
        if salient.contains(&i) {
            data.extend_from_slice(emb.values.row(i));
        } else {
            data.extend(std::iter::repeat_n(0.0, d));
        }
    }
    let mut sources = emb.sources.clone();
    sources.extend(std::iter::repeat_n(TokenSource::KeyFrame, n));
    VisualEmbeddings::with_sources(Tensor::new(&[2 * n, d], data)?, sources)
}

/// Entry of the frame manifest: `index<TAB>timestamp<TAB>file`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub timestamp: f64,
    pub file: String,
}

/// Parses a frame manifest. `#` starts a comment line.
pub fn parse_manifest(reader: impl BufRead) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Config {
            key: None,
            line: Some(n + 1),
            msg: format!("manifest: {msg}"),
        };
        let fields: Vec<&str> = trimmed.split('\t').collect();
        let [index, timestamp, file] = fields[..] else {
            return Err(bad("expected index, timestamp and file separated by tabs"));
        };
        out.push(ManifestEntry {
            index: index.parse().map_err(|_| bad("index is not an integer"))?,
            timestamp: timestamp.parse().map_err(|_| bad("timestamp is not a number"))?,
            file: file.to_string(),
        });
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# index\ttimestamp\tfile\n");
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\n", e.index, e.timestamp, e.file));
    }
    s
}

/// Probability vector with `p` on `top` and the rest spread evenly.
pub fn peaked_probs(top: Emotion, p: f64) -> [f64; 7] {
    let mut probs = [(1.0 - p) / 6.0; 7];
    probs[top as usize] = p;
    probs
}

/// A fixed ten-frame `8 x 8` clip with replayed observations. Top
/// probabilities by frame: 0: 0.45, 1: none, 2: 0.92 and 0.30 (two faces),
/// 3: 0.55, 4: none, 5: 0.68, 6: 0.52 and 0.61, 7: 0.74, 8: 0.50, 9: 0.35.
pub fn scripted_corpus() -> (Vec<FrameRecord>, ScriptedScorer) {
    let frames = (0..10)
        .map(|i| {
            let data = (0..8 * 8 * 3).map(|j| ((i * 7 + j * 5) % 11) as f64 / 10.0).collect();
            FrameRecord::new(i, i as f64 * 0.04, Tensor::new(&[8, 8, 3], data).expect("8x8x3"))
        })
        .collect::<Result<Vec<_>>>()
        .expect("valid frames");
    let face = |bbox: [usize; 4], top: Emotion, p: f64| FaceObservation {
        bbox: bbox.into(),
        landmarks: vec![(bbox[0] as f64 + 0.5, bbox[1] as f64 + 0.5)],
        emotion_probs: peaked_probs(top, p),
    };
    use Emotion::*;
    let script: Vec<(usize, Vec<FaceObservation>)> = vec![
        (0, vec![face([1, 1, 3, 3], Neutral, 0.45)]),
        (2, vec![face([0, 0, 4, 4], Happy, 0.92), face([5, 4, 3, 4], Sad, 0.30)]),
        (3, vec![face([2, 2, 4, 4], Fear, 0.55)]),
        (5, vec![face([3, 1, 4, 5], Angry, 0.68)]),
        (6, vec![face([0, 3, 3, 3], Surprise, 0.52), face([4, 0, 4, 4], Happy, 0.61)]),
        (7, vec![face([2, 3, 5, 5], Disgust, 0.74)]),
        (8, vec![face([1, 0, 2, 2], Sad, 0.50)]),
        (9, vec![face([6, 6, 2, 2], Neutral, 0.35)]),
    ];
    let mut scorer = ScriptedScorer::new();
    for (frame, faces) in script {
        scorer.insert(frame, faces).expect("scripted faces are distributions");
    }
    (frames, scorer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(top: usize, p: f64) -> [f64; 7] {
        let mut v = [(1.0 - p) / 6.0; 7];
        v[top] = p;
        v
    }

    fn face(x: usize, y: usize, w: usize, h: usize, top: usize, p: f64) -> FaceObservation {
        FaceObservation {
            bbox: BBox {
                x,
                y,
                width: w,
                height: h,
            },
            landmarks: vec![(x as f64 + 0.5, y as f64 + 0.5)],
            emotion_probs: probs(top, p),
        }
    }

    fn frame(index: usize, h: usize, w: usize) -> FrameRecord {
        let data = (0..h * w * 3).map(|i| ((i * 37 + index * 11) % 97) as f64 / 96.0 + 1e-3).map(|v| v.min(1.0)).collect();
        FrameRecord::new(index, index as f64 * 0.5, Tensor::new(&[h, w, 3], data).unwrap()).unwrap()
    }

    #[test]
    fn high_confidence_face_is_selected() {
        let frames = vec![frame(0, 4, 4)];
        let mut s = ScriptedScorer::new();
        s.insert(0, vec![face(0, 0, 2, 2, 3, 0.95)]).unwrap();
        let sel = select_key_frames(&frames, &s, 0.9).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].face.top().0, Emotion::Happy);
        assert!(select_key_frames(&frames, &s, 0.0).is_err());
        assert!(select_key_frames(&frames, &s, 1.5).is_err());
    }

    #[test]
    fn no_faces_no_key_frames() {
        let frames: Vec<_> = (0..3).map(|i| frame(i, 4, 4)).collect();
        let sel = select_key_frames(&frames, &ScriptedScorer::new(), 0.5).unwrap();
        assert!(sel.is_empty());
        assert!(select_key_frames(&[], &ScriptedScorer::new(), 0.5).unwrap().is_empty());
    }

    #[test]
    fn full_box_mask_is_identity_and_pixel_box_keeps_three() {
        let f = frame(0, 4, 6);
        let all = apply_spatial_mask(&f, &[face(0, 0, 6, 4, 0, 1.0)]).unwrap();
        assert!(all.pixels.bit_eq(&f.pixels));
        let one = apply_spatial_mask(&f, &[face(0, 0, 1, 1, 0, 1.0)]).unwrap();
        assert_eq!(one.pixels.data().iter().filter(|&&v| v != 0.0).count(), 3);
        assert!(apply_spatial_mask(&f, &[]).is_err());
        assert!(apply_spatial_mask(&f, &[face(5, 0, 2, 1, 0, 1.0)]).is_err());
    }

    #[test]
    fn mask_is_idempotent() {
        let f = frame(2, 6, 6);
        let faces = [face(1, 1, 3, 2, 0, 1.0), face(2, 2, 3, 3, 1, 1.0)];
        let once = apply_spatial_mask(&f, &faces).unwrap();
        let twice = apply_spatial_mask(&once, &faces).unwrap();
        assert!(once.pixels.bit_eq(&twice.pixels));
    }

    #[test]
    fn compose_appends_in_time_order() {
        let frames: Vec<_> = (0..10).map(|i| frame(i, 4, 4)).collect();
        let none = compose_sequence(&frames, vec![]);
        assert_eq!(none.frames, frames);
        let keys = vec![frames[7].clone(), frames[2].clone()];
        let seq = compose_sequence(&frames, keys);
        assert_eq!(seq.frames.len(), 12);
        assert_eq!(&seq.frames[..10], &frames[..]);
        let order: Vec<_> = seq.key_frames().iter().map(|f| f.index).collect();
        assert_eq!(order, [2, 7]);
    }

    #[test]
    fn embeddings_shape_zero_and_tags() {
        let mut rng = rand::thread_rng();
        let mut emb = PatchEmbedder::init(&mut rng, 4, 6);
        let f = frame(0, 8, 8);
        let seq = compose_sequence(std::slice::from_ref(&f), vec![f.clone()]);
        let e = fec_to_embeddings(&seq, &emb).unwrap();
        assert_eq!(e.values.shape(), &[8, 6]);
        assert_eq!(e.sources[..4], [TokenSource::Original; 4]);
        assert_eq!(e.sources[4..], [TokenSource::KeyFrame; 4]);

        let zero = FrameRecord::new(0, 0.0, Tensor::zeros(&[8, 8, 3])).unwrap();
        emb.bias = Tensor::zeros(&[6]);
        let e = fec_to_embeddings(&compose_sequence(&[zero], vec![]), &emb).unwrap();
        assert_eq!(e.values.max_abs(), 0.0);

        let odd = FrameRecord::new(0, 0.0, Tensor::zeros(&[6, 8, 3])).unwrap();
        assert!(matches!(
            fec_to_embeddings(&compose_sequence(&[odd], vec![]), &emb),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn sidecar_round_trip_and_errors() {
        let mut s = ScriptedScorer::new();
        s.insert(3, vec![face(0, 1, 2, 2, 4, 0.8)]).unwrap();
        let text: String = s
            .records()
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        assert!(text.starts_with(r#"{"frame":3,"faces":[{"bbox":[0,1,2,2],"landmarks""#));
        let back = ScriptedScorer::from_reader(text.as_bytes()).unwrap();
        assert_eq!(back, s);

        let bad = "{\"frame\":0,\"faces\":[{\"bbox\":[0,0,1,1],\"probs\":[0.5,0.5,0.5,0,0,0,0]}]}\n";
        assert!(ScriptedScorer::from_reader(bad.as_bytes()).is_err());
        let dup = format!("{}{}", text, text);
        assert!(ScriptedScorer::from_reader(dup.as_bytes()).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![
            ManifestEntry { index: 0, timestamp: 0.0, file: "f0.png".into() },
            ManifestEntry { index: 1, timestamp: 0.333, file: "f1.png".into() },
        ];
        let text = write_manifest(&entries);
        assert_eq!(parse_manifest(text.as_bytes()).unwrap(), entries);
        let err = parse_manifest("0 0.0 f.png\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn salient_tokens_appended() {
        let e = VisualEmbeddings::new(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let out = append_salient_tokens(&e, &[1]).unwrap();
        assert_eq!(out.values.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
        assert_eq!(out.sources[3..], [TokenSource::KeyFrame; 3]);
    }

    #[test]
    fn timestamps_must_increase() {
        let mut frames: Vec<_> = (0..3).map(|i| frame(i, 4, 4)).collect();
        frames[2].timestamp = 0.1;
        assert!(run_fec(&frames, &ScriptedScorer::new(), 0.5).is_err());
    }
}
