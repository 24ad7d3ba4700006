//! On-disk formats.
//!
//! Arrays are stored as a JSON header sidecar (`<stem>.json`) next to a flat
//! little-endian `f32` payload (`<stem>.bin`). The header records the payload's
//! SHA-256 so that swapped or corrupted payloads are detected on read.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tomo::ImageGrid;

pub const DTYPE_F32: &str = "f32";
pub const LITTLE_ENDIAN: &str = "little";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
    pub payload_sha256: String,
}

impl ArrayHeader {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Semantic metadata supplied by the writer; the rest of the header is derived.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayMeta {
    pub role: String,
    pub window: Option<(f64, f64)>,
    pub spacing: Option<f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn header_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn payload_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn encode_f32(data: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `data` with the given shape. Returns the SHA-256 of the header file.
pub fn write_array(stem: &Path, shape: &[usize], data: &[f32], meta: &ArrayMeta) -> Result<String> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape:?} holds {expected} elements, got {}",
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("array element {i}")));
    }
    if let Some(parent) = stem.parent() {
        fs::create_dir_all(parent)?;
    }
    let payload = encode_f32(data);
    let header = ArrayHeader {
        shape: shape.to_vec(),
        dtype: DTYPE_F32.into(),
        byte_order: LITTLE_ENDIAN.into(),
        role: meta.role.clone(),
        window: meta.window,
        spacing: meta.spacing,
        payload_sha256: sha256_hex(&payload),
    };
    let header_bytes = serde_json::to_vec_pretty(&header)?;
    fs::write(payload_path(stem), &payload)?;
    fs::write(header_path(stem), &header_bytes)?;
    Ok(sha256_hex(&header_bytes))
}

pub fn read_header(stem: &Path) -> Result<ArrayHeader> {
    let path = header_path(stem);
    let bytes = fs::read(&path)?;
    let header: ArrayHeader =
        serde_json::from_slice(&bytes).map_err(|e| Error::CorruptHeader {
            path: path.clone(),
            message: e.to_string(),
        })?;
    if header.dtype != DTYPE_F32 {
        return Err(Error::Unsupported(format!(
            "element type `{}` in {}",
            header.dtype,
            path.display()
        )));
    }
    if header.byte_order != LITTLE_ENDIAN {
        return Err(Error::Unsupported(format!(
            "byte order `{}` in {}",
            header.byte_order,
            path.display()
        )));
    }
    Ok(header)
}

pub fn read_array(stem: &Path) -> Result<(ArrayHeader, Vec<f32>)> {
    let header = read_header(stem)?;
    let path = payload_path(stem);
    let payload = fs::read(&path)?;
    let expected = header.element_count() as u64 * 4;
    if payload.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            path,
            expected,
            actual: payload.len() as u64,
        });
    }
    let actual = sha256_hex(&payload);
    if actual != header.payload_sha256 {
        return Err(Error::HashMismatch {
            path,
            expected: header.payload_sha256,
            actual,
        });
    }
    Ok((header, decode_f32(&payload)))
}

/// SHA-256 of the header file, as recorded in manifests.
pub fn header_hash(stem: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(header_path(stem))?))
}

pub fn write_image(stem: &Path, image: &ImageGrid, role: &str) -> Result<String> {
    let data: Vec<f32> = image.values.iter().map(|&v| v as f32).collect();
    write_array(
        stem,
        &[image.height, image.width],
        &data,
        &ArrayMeta {
            role: role.into(),
            window: Some(image.window),
            spacing: Some(image.spacing),
        },
    )
}

pub fn read_image(stem: &Path) -> Result<ImageGrid> {
    let (header, data) = read_array(stem)?;
    if header.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected a 2D image in {}, got shape {:?}",
            stem.display(),
            header.shape
        )));
    }
    ImageGrid::new(
        header.shape[0],
        header.shape[1],
        data.into_iter().map(f64::from).collect(),
        header.spacing.unwrap_or(1.0),
        header.window.unwrap_or((0.0, 1.0)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExternalFormat {
    Png16,
    RawSidecar,
}

impl std::str::FromStr for ExternalFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png16" => Ok(ExternalFormat::Png16),
            "raw" | "raw+sidecar" | "raw-sidecar" => Ok(ExternalFormat::RawSidecar),
            other => Err(Error::Unsupported(format!("external format `{other}`"))),
        }
    }
}

/// Imports a clean image. 16-bit grayscale PNGs are mapped affinely so that
/// 0 ↦ `window.0` and 65535 ↦ `window.1`; raw arrays keep their own sidecar
/// metadata.
pub fn import_external(
    path: &Path,
    format: ExternalFormat,
    window: (f64, f64),
    spacing: f64,
) -> Result<ImageGrid> {
    match format {
        ExternalFormat::RawSidecar => {
            let stem = path.with_extension("");
            read_image(&stem)
        }
        ExternalFormat::Png16 => {
            let file = fs::File::open(path)?;
            let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
            decoder.set_transformations(png::Transformations::IDENTITY);
            let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
            let info = reader.info();
            if info.bit_depth != png::BitDepth::Sixteen
                || info.color_type != png::ColorType::Grayscale
            {
                return Err(Error::Unsupported(format!(
                    "{}: only 16-bit grayscale PNG is supported (found {:?} {:?})",
                    path.display(),
                    info.bit_depth,
                    info.color_type
                )));
            }
            let (w, h) = (info.width as usize, info.height as usize);
            let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h * 2)];
            let frame = reader
                .next_frame(&mut buf)
                .map_err(|e| Error::Png(e.to_string()))?;
            let bytes = &buf[..frame.buffer_size()];
            let (lo, hi) = window;
            let values = bytes
                .chunks_exact(2)
                .map(|c| {
                    let raw = u16::from_be_bytes([c[0], c[1]]) as f64;
                    lo + (hi - lo) * raw / 65535.0
                })
                .collect();
            ImageGrid::new(h, w, values, spacing, window)
        }
    }
}

pub fn write_png16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header().map_err(|e| Error::Png(e.to_string()))?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

pub fn write_png8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

/// Serialises `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
