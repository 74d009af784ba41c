//! On-disk formats: CELF float rasters, scene/detection JSONL, metrics CSV.
//!
//! CELF layout: magic `CELF`, then little-endian u32 `H`, `W`, `C`, then
//! `H * W * C` little-endian f64 values, row-major.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{BoundingBox, Detection, GroundTruth, SizeTier};
use crate::error::{Error, Result};
use crate::scenes::{SceneObject, ShapeScene};
use crate::tensor::Tensor;

const CELF_MAGIC: &[u8; 4] = b"CELF";
/// Upper bound on element count when reading, to catch corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn write_celf(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.dims3();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| -> Result<()> {
        out.write_all(bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    write(CELF_MAGIC)?;
    write(&(h as u32).to_le_bytes())?;
    write(&(w as u32).to_le_bytes())?;
    write(&(c as u32).to_le_bytes())?;
    for v in image.iter() {
        write(&v.to_le_bytes())?;
    }
    out.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_celf(path: &Path) -> Result<Tensor> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut reader = BufReader::new(file);
    let mut offset = 0u64;

    let mut magic = [0u8; 4];
    read_exact_at(&mut reader, &mut magic, &display, &mut offset, "truncated magic")?;
    if &magic != CELF_MAGIC {
        return Err(Error::format(display, "bad magic", 0));
    }

    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut buf = [0u8; 4];
        read_exact_at(&mut reader, &mut buf, &display, &mut offset, "truncated header")?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .unwrap_or(u64::MAX);
    if dims.iter().any(|&d| d == 0) || numel > MAX_ELEMENTS {
        return Err(Error::format(display, "dimension overflow", offset - 12));
    }

    let mut data = Vec::with_capacity(numel as usize);
    for _ in 0..numel {
        let mut buf = [0u8; 8];
        read_exact_at(&mut reader, &mut buf, &display, &mut offset, "truncated data")?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(dims.to_vec(), data)
}

fn read_exact_at(
    reader: &mut impl Read,
    buf: &mut [u8],
    path: &str,
    offset: &mut u64,
    kind: &str,
) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::format(path, kind, *offset))?;
    *offset += buf.len() as u64;
    Ok(())
}

/// One line of `scenes.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image: String,
    pub boxes: Vec<[f64; 4]>,
    pub class_ids: Vec<usize>,
    pub tiers: Vec<SizeTier>,
}

/// Writes a split directory: `scenes.jsonl` plus one CELF image per scene.
pub fn save_scene_dir(dir: &Path, scenes: &[ShapeScene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let jsonl_path = dir.join("scenes.jsonl");
    let file =
        File::create(&jsonl_path).map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    for (i, scene) in scenes.iter().enumerate() {
        let image_name = format!("scene_{i:05}.celf");
        write_celf(&dir.join(&image_name), &scene.image)?;
        let record = SceneRecord {
            image: image_name,
            boxes: scene.objects.iter().map(|o| o.bbox.as_array()).collect(),
            class_ids: scene.objects.iter().map(|o| o.class_id).collect(),
            tiers: scene.objects.iter().map(|o| o.tier).collect(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Config(format!("scene record serialization: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;
    }
    out.flush()
        .map_err(|e| Error::io(jsonl_path.display().to_string(), e))
}

/// Loads a split directory written by [`save_scene_dir`].
pub fn load_scene_dir(dir: &Path) -> Result<Vec<ShapeScene>> {
    let jsonl_path = dir.join("scenes.jsonl");
    let file =
        File::open(&jsonl_path).map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;
    let mut scenes = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("{}:{}: bad scene record: {e}", jsonl_path.display(), ln + 1))
        })?;
        let image = read_celf(&dir.join(&record.image))?;
        let mut objects = Vec::new();
        for ((b, &class_id), &tier) in record
            .boxes
            .iter()
            .zip(&record.class_ids)
            .zip(&record.tiers)
        {
            objects.push(SceneObject {
                bbox: BoundingBox::new(b[0], b[1], b[2], b[3])?,
                class_id,
                tier,
            });
        }
        scenes.push(ShapeScene { image, objects });
    }
    Ok(scenes)
}

pub fn scene_ground_truths(scene: &ShapeScene) -> Vec<GroundTruth> {
    scene
        .objects
        .iter()
        .map(|o| GroundTruth {
            bbox: o.bbox,
            class_id: o.class_id,
            tier: o.tier,
        })
        .collect()
}

/// One line of `detections.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub boxes: Vec<[f64; 4]>,
    pub class_ids: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl DetectionRecord {
    pub fn from_detections(image_id: usize, detections: &[Detection]) -> Self {
        DetectionRecord {
            image_id,
            boxes: detections.iter().map(|d| d.bbox.as_array()).collect(),
            class_ids: detections.iter().map(|d| d.class_id).collect(),
            confidences: detections.iter().map(|d| d.confidence).collect(),
        }
    }
}

pub fn write_detections_jsonl(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Config(format!("detection record serialization: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    out.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Append-only CSV sink with header `step,loss,metric_name,metric_value`.
pub struct MetricsCsv {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "step,loss,metric_name,metric_value")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(MetricsCsv {
            out,
            path: path.to_path_buf(),
        })
    }

    pub fn write_row(&mut self, step: usize, loss: f64, name: &str, value: f64) -> Result<()> {
        writeln!(self.out, "{step},{loss},{name},{value}")
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out
            .flush()
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::gen_shape_scene;

    #[test]
    fn celf_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.celf");
        let t = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f64 / 7.0).collect()).unwrap();
        write_celf(&path, &t).unwrap();
        let back = read_celf(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn celf_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.celf");
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_celf(&path), Err(Error::Format { .. })));

        let t = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_celf(&path, &t).unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 5]).unwrap();
        match read_celf(&path) {
            Err(Error::Format { kind, offset, .. }) => {
                assert!(kind.contains("truncated"));
                assert!(offset > 0);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn celf_rejects_dimension_overflow() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("huge.celf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CELF");
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match read_celf(&path) {
            Err(Error::Format { kind, .. }) => assert!(kind.contains("overflow")),
            other => panic!("expected overflow error, got {other:?}"),
        }
    }

    #[test]
    fn scene_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes: Vec<ShapeScene> = (0..3)
            .map(|i| gen_shape_scene(32, 32, 2, i, 0.5).unwrap())
            .collect();
        save_scene_dir(dir.path(), &scenes).unwrap();
        let back = load_scene_dir(dir.path()).unwrap();
        assert_eq!(back.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.objects.len(), b.objects.len());
            for (oa, ob) in a.objects.iter().zip(&b.objects) {
                assert_eq!(oa.bbox, ob.bbox);
                assert_eq!(oa.class_id, ob.class_id);
                assert_eq!(oa.tier, ob.tier);
            }
        }
    }
}
