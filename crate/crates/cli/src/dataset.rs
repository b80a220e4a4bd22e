//! JSON-lines dataset export and PNG rendering for inspection.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use shapelab_core::shapes::{Image, SceneSpec, ShapesInstance, SpanTable};

/// One JSONL record; the image is stored as nested row-major arrays
/// (`height x width x 3`).
#[derive(Debug, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub seed: u64,
    pub scene: SceneSpec,
    pub image: Vec<Vec<[f32; 3]>>,
    pub tokens: Vec<u32>,
    pub spans: SpanTable,
    pub queried_k: usize,
    pub answer_item_token: u32,
}

impl From<&ShapesInstance> for InstanceRecord {
    fn from(inst: &ShapesInstance) -> Self {
        let img = &inst.image;
        let image = (0..img.height)
            .map(|y| (0..img.width).map(|x| img.get(y, x)).collect())
            .collect();
        Self {
            seed: inst.seed,
            scene: inst.scene.clone(),
            image,
            tokens: inst.tokens.clone(),
            spans: inst.spans.clone(),
            queried_k: inst.queried_k,
            answer_item_token: inst.answer_item_token,
        }
    }
}

impl InstanceRecord {
    pub fn into_instance(self) -> ShapesInstance {
        let height = self.image.len();
        let width = self.image.first().map(Vec::len).unwrap_or(0);
        let mut image = Image::filled(height, width, 0.0);
        for (y, row) in self.image.iter().enumerate() {
            for (x, px) in row.iter().enumerate() {
                image.put(y, x, *px);
            }
        }
        ShapesInstance {
            seed: self.seed,
            scene: self.scene,
            image,
            tokens: self.tokens,
            spans: self.spans,
            queried_k: self.queried_k,
            answer_item_token: self.answer_item_token,
        }
    }
}

pub fn export_jsonl(path: &Path, instances: &[ShapesInstance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("create {path:?}"))?);
    for inst in instances {
        serde_json::to_writer(&mut w, &InstanceRecord::from(inst))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_jsonl(path: &Path) -> Result<Vec<ShapesInstance>> {
    let r = BufReader::new(File::open(path).with_context(|| format!("open {path:?}"))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).with_context(|| format!("record {i} in {path:?}"))?;
        out.push(rec.into_instance());
    }
    Ok(out)
}

/// Write an image as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let file = File::create(path).with_context(|| format!("create {path:?}"))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8)
        .collect();
    writer.write_image_data(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use shapelab_core::shapes::{generate, Pool, TaskConfig};

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let instances: Vec<ShapesInstance> = (0..3)
            .map(|s| generate::make_instance(s, Pool::Eval, &TaskConfig { multi_crop: s == 1 }))
            .collect();
        export_jsonl(&path, &instances).unwrap();
        let loaded = import_jsonl(&path).unwrap();
        assert_eq!(instances, loaded);
    }

    #[test]
    fn png_export_writes_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.png");
        let inst = generate::make_instance(4, Pool::Eval, &TaskConfig::default());
        write_png(&path, &inst.image).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
