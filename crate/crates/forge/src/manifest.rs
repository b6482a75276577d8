//! JSONL manifests and image files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use forge_core::finecap::ManifestRecord;
use forge_core::patching::ImageTensor;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// One value per non-blank line; errors carry the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    read_jsonl(path)
}

/// Decodes a PNG or JPEG into an RGB [`ImageTensor`].
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).with_context(|| format!("decoding {}", path.display()))?.to_rgb32f();
    let (w, h) = img.dimensions();
    Ok(ImageTensor::new(w as usize, h as usize, img.into_raw())?)
}

pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.values().iter().map(|&v| (v * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| anyhow!("image buffer size mismatch"))?;
    buf.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Image file of a record, resolved against the manifest directory.
pub fn record_image(rec: &ManifestRecord, manifest: &Path) -> Result<ImageTensor> {
    let rel = rec
        .path
        .as_ref()
        .ok_or_else(|| anyhow!("record {} has no image path", rec.image_id))?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    load_image(&base.join(rel))
}
