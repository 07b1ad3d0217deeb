//! PNG frame directories: `frames.tsv` plus one RGB PNG per frame. Pixels
//! map to `[0, 1]` as `v / 255` and back by rounding.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use emoq_core::fec::{parse_manifest, FrameRecord, ManifestEntry};
use emoq_core::Tensor;
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "frames.tsv";

pub fn read_frames(dir: &Path) -> CliResult<Vec<FrameRecord>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let entries = parse_manifest(BufReader::new(file))?;
    entries
        .iter()
        .map(|e| {
            let png = dir.join(&e.file);
            let img = image::open(&png)
                .map_err(|err| CliError::Image(format!("{}: {err}", png.display())))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            let pixels = Tensor::new(&[h as usize, w as usize, 3], data)?;
            Ok(FrameRecord::new(e.index, e.timestamp, pixels)?)
        })
        .collect()
}

pub fn encode_png(frame: &FrameRecord) -> CliResult<Vec<u8>> {
    let (h, w) = (frame.height() as u32, frame.width() as u32);
    let raw: Vec<u8> = frame
        .pixels
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw)
        .ok_or_else(|| CliError::Image(format!("frame {}: pixel buffer size mismatch", frame.index)))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| CliError::Image(format!("frame {}: {e}", frame.index)))?;
    Ok(out.into_inner())
}

/// Manifest entries naming each frame `<prefix>NNNN.png` by position.
pub fn frame_entries(frames: &[FrameRecord], prefix: &str) -> Vec<ManifestEntry> {
    frames
        .iter()
        .enumerate()
        .map(|(pos, f)| ManifestEntry {
            index: f.index,
            timestamp: f.timestamp,
            file: format!("{prefix}{pos:04}.png"),
        })
        .collect()
}
