//! File formats: annotation JSON, PMAP probability maps, detection CSV and
//! raster loading.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotationSet, Detection, PointAnnotation, ProbMap, DEFAULT_MPP};

const PMAP_MAGIC: &[u8; 4] = b"PMAP";
const PMAP_VERSION: u8 = 1;
const PMAP_HEADER_LEN: usize = 4 + 1 + 4 + 4;

/// Serializes a map as `PMAP`, version byte, LE u32 width and height, then
/// row-major LE f32 values.
pub fn encode_pmap(map: &ProbMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(PMAP_HEADER_LEN + map.values().len() * 4);
    out.extend_from_slice(PMAP_MAGIC);
    out.push(PMAP_VERSION);
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_pmap(bytes: &[u8]) -> Result<ProbMap> {
    if bytes.len() < PMAP_HEADER_LEN {
        return Err(Error::Pmap(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != PMAP_MAGIC {
        return Err(Error::Pmap("bad magic".into()));
    }
    if bytes[4] != PMAP_VERSION {
        return Err(Error::Pmap(format!("unsupported version {}", bytes[4])));
    }
    let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[PMAP_HEADER_LEN..];
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Pmap(format!("geometry {width}x{height} overflows")))?;
    if body.len() != expected {
        return Err(Error::Pmap(format!(
            "{width}x{height} needs {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ProbMap::new(width, height, values).map_err(|e| Error::Pmap(e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    images: Vec<AnnotationImage>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationImage {
    id: String,
    #[serde(default = "default_mpp")]
    mpp: f64,
    #[serde(default)]
    points: Vec<AnnotationPoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationPoint {
    x: f64,
    y: f64,
    label: String,
}

fn default_mpp() -> f64 {
    DEFAULT_MPP
}

/// Parses the annotation JSON schema:
/// `{"images":[{"id":"007","mpp":0.25,"points":[{"x":..,"y":..,"label":"mitotic"}]}]}`.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationSet>> {
    let file: AnnotationFile =
        serde_json::from_str(text).map_err(|e| Error::Annotations(e.to_string()))?;
    let mut seen = std::collections::HashSet::new();
    file.images
        .into_iter()
        .map(|img| {
            if !seen.insert(img.id.clone()) {
                return Err(Error::DuplicateImageId(img.id));
            }
            let points = img
                .points
                .into_iter()
                .map(|p| {
                    Ok(PointAnnotation {
                        x: p.x,
                        y: p.y,
                        label: p.label.parse()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            AnnotationSet::new(img.id, img.mpp, points)
        })
        .collect()
}

pub fn annotations_to_json(sets: &[AnnotationSet]) -> String {
    let file = AnnotationFile {
        images: sets
            .iter()
            .map(|s| AnnotationImage {
                id: s.image_id().to_string(),
                mpp: s.mpp(),
                points: s
                    .points()
                    .iter()
                    .map(|p| AnnotationPoint {
                        x: p.x,
                        y: p.y,
                        label: p.label.as_str().to_string(),
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("annotation JSON serialization")
}

/// `image_id,x,y,score` with a header row and 4-decimal scores.
pub fn detections_to_csv(rows: &[(String, Detection)]) -> String {
    let mut out = String::from("image_id,x,y,score\n");
    for (id, d) in rows {
        out.push_str(&format!("{},{:.3},{:.3},{:.4}\n", csv_field(id), d.x(), d.y(), d.score()));
    }
    out
}

fn csv_field(s: &str) -> std::borrow::Cow<'_, str> {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\"")).into()
    } else {
        s.into()
    }
}

pub fn parse_detections_csv(text: &str) -> Result<Vec<(String, Detection)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv { line: 1, detail: e.to_string() })?
        .clone();
    let want = ["image_id", "x", "y", "score"];
    if headers.len() < 4 || headers.iter().take(4).ne(want.iter().copied()) {
        return Err(Error::Csv {
            line: 1,
            detail: format!("expected header {:?}, found {:?}", want.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<f64> {
            record
                .get(i)
                .ok_or_else(|| Error::Csv { line, detail: format!("missing {name}") })?
                .parse::<f64>()
                .map_err(|e| Error::Csv { line, detail: format!("{name}: {e}") })
        };
        let id = record.get(0).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(Error::Csv { line, detail: "empty image_id".into() });
        }
        let det = Detection::new(field(1, "x")?, field(2, "y")?, field(3, "score")?)
            .map_err(|e| Error::Csv { line, detail: e.to_string() })?;
        rows.push((id, det));
    }
    Ok(rows)
}

#[cfg(feature = "fs")]
pub use self::fs::*;

#[cfg(feature = "fs")]
mod fs {
    use std::io::Write;
    use std::path::{Path, PathBuf};

    use image::{ColorType, DynamicImage, ImageFormat, ImageReader};

    use super::*;
    use crate::types::{BinaryMask, ImageRgb};

    pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound { path: path.to_path_buf() }
        } else {
            Error::Io { path: path.to_path_buf(), source }
        }
    }

    /// Sidecar metadata path: `dir/007.png` -> `dir/007.meta.json`.
    pub fn sidecar_path(image_path: &Path) -> PathBuf {
        image_path.with_extension("meta.json")
    }

    #[derive(Deserialize)]
    struct Sidecar {
        mpp: f64,
    }

    /// Decodes an 8-bit RGB PNG or TIFF. Other bit depths and channel
    /// counts are rejected.
    pub fn load_image(path: &Path) -> Result<ImageRgb> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let unsupported = |detail: String| Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail,
        };
        let reader = ImageReader::new(std::io::Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| io_err(path, e))?;
        match reader.format() {
            Some(ImageFormat::Png) | Some(ImageFormat::Tiff) => {}
            Some(other) => return Err(unsupported(format!("{other:?} files are not supported"))),
            None => return Err(unsupported("unrecognized file signature".into())),
        }
        let decoded = reader.decode().map_err(|e| unsupported(e.to_string()))?;
        let (width, height) = (decoded.width() as usize, decoded.height() as usize);
        let data = match decoded {
            DynamicImage::ImageRgb8(buf) => buf.into_raw(),
            other => {
                return Err(unsupported(format!(
                    "pixel type {} (need 8-bit RGB)",
                    color_name(other.color())
                )))
            }
        };
        let image = ImageRgb::new(width, height, data)?;
        let side = sidecar_path(path);
        match std::fs::read_to_string(&side) {
            Ok(text) => {
                let meta: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Invalid {
                    what: "sidecar metadata",
                    detail: format!("{}: {e}", side.display()),
                })?;
                image.with_mpp(meta.mpp)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(image),
            Err(e) => Err(io_err(&side, e)),
        }
    }

    fn color_name(c: ColorType) -> String {
        format!("{c:?} ({} channels, {} bits)", c.channel_count(), c.bits_per_pixel() / c.channel_count() as u16)
    }

    /// Decodes a single-channel 8-bit PNG or TIFF mask; non-zero is set.
    pub fn load_mask(path: &Path) -> Result<BinaryMask> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let decoded = image::load_from_memory(&bytes).map_err(|e| Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        match decoded {
            DynamicImage::ImageLuma8(buf) => {
                let (w, h) = (buf.width() as usize, buf.height() as usize);
                BinaryMask::new(w, h, buf.into_raw().into_iter().map(|v| v != 0).collect())
            }
            other => Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("mask pixel type {} (need 8-bit gray)", color_name(other.color())),
            }),
        }
    }

    pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationSet>> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        parse_annotations(&text)
    }

    pub fn save_annotations(path: &Path, sets: &[AnnotationSet]) -> Result<()> {
        write_atomic(path, annotations_to_json(sets).as_bytes())
    }

    pub fn read_pmap(path: &Path) -> Result<ProbMap> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        decode_pmap(&bytes)
    }

    pub fn write_pmap(path: &Path, map: &ProbMap) -> Result<()> {
        write_atomic(path, &encode_pmap(map))
    }

    pub fn encode_png_rgb(image: &ImageRgb) -> Vec<u8> {
        encode_png(image.data(), image.width(), image.height(), ColorType::Rgb8)
    }

    /// 0/255 single-channel PNG.
    pub fn encode_png_mask(mask: &BinaryMask) -> Vec<u8> {
        let data: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_png(&data, mask.width(), mask.height(), ColorType::L8)
    }

    fn encode_png(data: &[u8], w: usize, h: usize, color: ColorType) -> Vec<u8> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(data, w as u32, h as u32, color.into())
            .expect("in-memory PNG encoding");
        out
    }

    pub fn save_png(path: &Path, image: &ImageRgb) -> Result<()> {
        write_atomic(path, &encode_png_rgb(image))
    }

    /// Writes through a temporary file in the destination directory and
    /// renames it into place.
    pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
        tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
        tmp.persist(path).map_err(|e| io_err(path, e.error))?;
        Ok(())
    }
}
