//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<split>/<image id:06>.ppm              binary P6, maxval 255
//! <dir>/<split>/<image id:06>_<instance:02>.pgm binary P5, values 0 / 255
//! ```
//!
//! Headers are written as `P6\n<w> <h>\n255\n` followed by raw bytes. Pixel
//! channels are stored as `round(v * 255)`; generated images are already
//! quantized to multiples of 1/255 so a write/read cycle is exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabeledSplit, SceneConfig, SceneTruth};
use crate::error::{Error, Result};
use crate::types::{BBox, Bitmask, Dataset, ImageEntry, ImageRaster, InstanceRecord};

const FORMAT: &str = "apis-dataset";
const VERSION: u32 = 1;

/// Provenance stored next to the splits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: Option<u64>,
    pub config: Option<SceneConfig>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(flatten)]
    meta: DatasetMeta,
    train: Vec<ImageManifest>,
    test: Vec<ImageManifest>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageManifest {
    id: u32,
    width: u32,
    height: u32,
    image: String,
    instances: Vec<InstanceManifest>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceManifest {
    instance_id: u32,
    category_id: u8,
    #[serde(rename = "box")]
    bbox: BBox,
    z: u32,
    mask: String,
}

pub fn encode_ppm(image: &ImageRaster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for px in image.pixels() {
        for c in px {
            out.push((c * 255.0).round() as u8);
        }
    }
    out
}

fn encode_pgm(mask: &Bitmask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Parses a binary PNM header, returning (width, height, data offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(u32, u32, usize)> {
    let violation = |offset: usize, message: String| Error::FormatViolation {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(violation(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(violation(pos, "expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| violation(start, "header field out of range".into()))?;
    }
    if fields[2] != 255 {
        return Err(violation(pos, format!("maxval {} unsupported, expected 255", fields[2])));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(violation(pos, "expected whitespace after maxval".into()));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub(crate) fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImageRaster> {
    let (w, h, start) = parse_header(bytes, b"P6", path)?;
    let need = (w as usize) * (h as usize) * 3;
    if bytes.len() - start != need {
        return Err(Error::FormatViolation {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            message: format!("expected {need} data bytes, found {}", bytes.len() - start),
        });
    }
    let pixels = bytes[start..]
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    ImageRaster::new(w, h, pixels)
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Bitmask> {
    let (w, h, start) = parse_header(bytes, b"P5", path)?;
    let need = (w as usize) * (h as usize);
    if bytes.len() - start != need {
        return Err(Error::FormatViolation {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            message: format!("expected {need} data bytes, found {}", bytes.len() - start),
        });
    }
    let mut bits = Vec::with_capacity(need);
    for (i, &b) in bytes[start..].iter().enumerate() {
        match b {
            0 => bits.push(false),
            255 => bits.push(true),
            other => {
                return Err(Error::FormatViolation {
                    path: path.to_path_buf(),
                    offset: (start + i) as u64,
                    message: format!("mask value {other} is neither 0 nor 255"),
                })
            }
        }
    }
    Bitmask::from_bits(w, h, bits)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_split(dir: &Path, name: &str, split: &LabeledSplit) -> Result<Vec<ImageManifest>> {
    let mut entries = Vec::with_capacity(split.dataset.images().len());
    for (entry, truth) in split.dataset.images().iter().zip(&split.truths) {
        let image = format!("{name}/{:06}.ppm", entry.id);
        write_file(&dir.join(&image), &encode_ppm(&entry.raster))?;
        let mut instances = Vec::new();
        for rec in split.dataset.instances_of(entry.id) {
            let mask = format!("{name}/{:06}_{:02}.pgm", entry.id, rec.instance_id);
            let bits = truth
                .masks
                .get(rec.instance_id as usize)
                .ok_or(Error::UnknownInstance(rec.key()))?;
            write_file(&dir.join(&mask), &encode_pgm(bits))?;
            instances.push(InstanceManifest {
                instance_id: rec.instance_id,
                category_id: rec.category_id,
                bbox: rec.bbox,
                z: truth.z_order.get(rec.instance_id as usize).copied().unwrap_or(0),
                mask,
            });
        }
        entries.push(ImageManifest {
            id: entry.id,
            width: entry.raster.width(),
            height: entry.raster.height(),
            image,
            instances,
        });
    }
    Ok(entries)
}

/// Writes both splits and the manifest under `dir`.
pub fn write_dataset(dir: &Path, train: &LabeledSplit, test: &LabeledSplit, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        meta: meta.clone(),
        train: write_split(dir, "train", train)?,
        test: write_split(dir, "test", test)?,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    write_file(&dir.join("manifest.json"), text.as_bytes())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_split(dir: &Path, entries: Vec<ImageManifest>) -> Result<LabeledSplit> {
    let mut images = Vec::with_capacity(entries.len());
    let mut records = Vec::new();
    let mut truths = Vec::with_capacity(entries.len());
    for entry in entries {
        let path = dir.join(&entry.image);
        let raster = decode_ppm(&read_bytes(&path)?, &path)?;
        if (raster.width(), raster.height()) != (entry.width, entry.height) {
            return Err(Error::FormatViolation {
                path,
                offset: 0,
                message: "image size disagrees with manifest".into(),
            });
        }
        let mut masks = Vec::with_capacity(entry.instances.len());
        let mut z_order = Vec::with_capacity(entry.instances.len());
        for (i, inst) in entry.instances.into_iter().enumerate() {
            if inst.instance_id as usize != i {
                return Err(Error::CorruptManifest {
                    path: dir.join("manifest.json"),
                    message: format!("image {} lists instance ids out of order", entry.id),
                });
            }
            let mpath = dir.join(&inst.mask);
            let mask = decode_pgm(&read_bytes(&mpath)?, &mpath)?;
            if mask.extent() != (entry.width, entry.height) {
                return Err(Error::FormatViolation {
                    path: mpath,
                    offset: 0,
                    message: "mask size disagrees with image".into(),
                });
            }
            masks.push(mask);
            z_order.push(inst.z);
            records.push(InstanceRecord {
                image_id: entry.id,
                instance_id: inst.instance_id,
                category_id: inst.category_id,
                bbox: inst.bbox,
            });
        }
        images.push(ImageEntry { id: entry.id, raster });
        truths.push(SceneTruth { masks, z_order });
    }
    Ok(LabeledSplit {
        dataset: Dataset::new(images, records)?,
        truths,
    })
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(LabeledSplit, LabeledSplit, DatasetMeta)> {
    let mpath: PathBuf = dir.join("manifest.json");
    let text = match fs::read_to_string(&mpath) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingManifest(mpath)),
        Err(e) => return Err(Error::io(&mpath, e)),
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
        path: mpath.clone(),
        message: e.to_string(),
    })?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::CorruptManifest {
            path: mpath,
            message: format!("unsupported format {} v{}", manifest.format, manifest.version),
        });
    }
    let train = read_split(dir, manifest.train)?;
    let test = read_split(dir, manifest.test)?;
    Ok((train, test, manifest.meta))
}
