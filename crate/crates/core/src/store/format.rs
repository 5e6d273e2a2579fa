//! Sectioned little-endian container shared by the bundle (`SHB1`), affine
//! map (`SHM1`) and desk model (`SHD1`) files.
//!
//! Layout: 4-byte magic, `u32` version, `u64` length of a UTF-8 JSON header,
//! the header itself, then one section per manifest entry:
//! `u32 rows · u32 dim · rows×dim values`. Values are `f32` unless the
//! manifest entry declares `"dtype": "f64"`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{ConceptDictionary, DirectionKind, DirectionSet, EmbeddingBundle, EmbeddingMatrix, SampleMeta};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const BUNDLE_MAGIC: [u8; 4] = *b"SHB1";
pub const MAP_MAGIC: [u8; 4] = *b"SHM1";
pub const MODEL_MAGIC: [u8; 4] = *b"SHD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    pub rows: u32,
    pub dim: u32,
    #[serde(default, skip_serializing_if = "is_f32")]
    pub dtype: Dtype,
}

fn is_f32(d: &Dtype) -> bool {
    *d == Dtype::F32
}

/// One named matrix section. Values are held in `f64`, which represents
/// every `f32` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: Dtype,
    pub matrix: Matrix<f64>,
}

impl Section {
    pub fn f32(name: impl Into<String>, m: &Matrix<f32>) -> Self {
        Self { name: name.into(), dtype: Dtype::F32, matrix: m.cast() }
    }

    pub fn f64(name: impl Into<String>, m: Matrix<f64>) -> Self {
        Self { name: name.into(), dtype: Dtype::F64, matrix: m }
    }
}

/// Decoded container: the JSON header (without the manifest) and sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Map<String, Value>,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.section(name).ok_or_else(|| Error::Metadata(format!("missing section {name:?}")))
    }
}

pub fn encode_container(magic: [u8; 4], header: &Map<String, Value>, sections: &[Section]) -> Result<Vec<u8>> {
    let manifest: Vec<SectionEntry> = sections
        .iter()
        .map(|s| {
            let rows = u32::try_from(s.matrix.rows())
                .map_err(|_| Error::Invariant(format!("section {} has too many rows", s.name)))?;
            let dim = u32::try_from(s.matrix.cols())
                .map_err(|_| Error::Invariant(format!("section {} is too wide", s.name)))?;
            Ok(SectionEntry { name: s.name.clone(), rows, dim, dtype: s.dtype })
        })
        .collect::<Result<_>>()?;
    let mut header = header.clone();
    header.insert("sections".into(), serde_json::to_value(&manifest)?);
    let json = serde_json::to_vec(&Value::Object(header))?;

    let payload: usize = sections.iter().map(|s| 8 + s.matrix.data().len() * s.dtype.width()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (s, e) in sections.iter().zip(&manifest) {
        out.extend_from_slice(&e.rows.to_le_bytes());
        out.extend_from_slice(&e.dim.to_le_bytes());
        match s.dtype {
            Dtype::F32 => {
                for &v in s.matrix.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in s.matrix.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_container(magic: [u8; 4], bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let json_len = r.u64("header length")?;
    let json_len = usize::try_from(json_len).map_err(|_| Error::Truncated("header length overflows".into()))?;
    let json = r.take(json_len, "JSON header")?;
    let mut header: Map<String, Value> = match serde_json::from_slice(json) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(Error::Metadata("header is not a JSON object".into())),
        Err(e) => return Err(Error::Metadata(format!("header JSON: {e}"))),
    };
    let manifest: Vec<SectionEntry> = header
        .remove("sections")
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::Metadata(format!("section manifest: {e}")))?
        .ok_or_else(|| Error::Metadata("header lacks a section manifest".into()))?;

    let mut sections = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let rows = r.u32(&entry.name)?;
        let dim = r.u32(&entry.name)?;
        if rows != entry.rows || dim != entry.dim {
            return Err(Error::DimensionMismatch(format!(
                "section {} declares {}x{} in the manifest but {rows}x{dim} inline",
                entry.name, entry.rows, entry.dim
            )));
        }
        let count = (rows as usize)
            .checked_mul(dim as usize)
            .ok_or_else(|| Error::Truncated(format!("section {} size overflows", entry.name)))?;
        let width = entry.dtype.width();
        let raw = r.take(
            count.checked_mul(width).ok_or_else(|| Error::Truncated("section size overflows".into()))?,
            &entry.name,
        )?;
        let data: Vec<f64> = match entry.dtype {
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("section {}", entry.name)));
        }
        let matrix = Matrix::new(rows as usize, dim as usize, data)?;
        sections.push(Section { name: entry.name, dtype: entry.dtype, matrix });
    }
    if r.pos != bytes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} trailing bytes after the declared sections",
            bytes.len() - r.pos
        )));
    }
    Ok(Container { header, sections })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    samples: Vec<SampleMeta>,
    dictionary: ConceptDictionary,
}

const VISION: &str = "vision";
const ORACLE: &str = "oracle";
const CONCEPT_DIRS: &str = "concept_dirs";
const CLASS_DIRS: &str = "class_dirs";

pub fn encode_bundle(bundle: &EmbeddingBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let header = BundleHeader { samples: bundle.meta.clone(), dictionary: bundle.dictionary.clone() };
    let Value::Object(header) = serde_json::to_value(&header)? else { unreachable!() };
    let mut sections = vec![Section::f32(VISION, &bundle.vision)];
    if let Some(o) = &bundle.oracle {
        sections.push(Section::f32(ORACLE, o));
    }
    sections.push(Section::f32(CONCEPT_DIRS, &bundle.concept_dirs.matrix));
    sections.push(Section::f32(CLASS_DIRS, &bundle.class_dirs.matrix));
    encode_container(BUNDLE_MAGIC, &header, &sections)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<EmbeddingBundle> {
    let container = decode_container(BUNDLE_MAGIC, bytes)?;
    let header: BundleHeader = serde_json::from_value(Value::Object(container.header.clone()))
        .map_err(|e| Error::Metadata(e.to_string()))?;
    let f32_section = |name: &str| -> Result<EmbeddingMatrix> {
        let s = container.require(name)?;
        if s.dtype != Dtype::F32 {
            return Err(Error::Metadata(format!("bundle section {name} must be f32")));
        }
        Ok(s.matrix.cast())
    };
    for s in &container.sections {
        if ![VISION, ORACLE, CONCEPT_DIRS, CLASS_DIRS].contains(&s.name.as_str()) {
            return Err(Error::Metadata(format!("unexpected section {:?}", s.name)));
        }
    }
    let bundle = EmbeddingBundle {
        vision: f32_section(VISION)?,
        oracle: container.section(ORACLE).map(|_| f32_section(ORACLE)).transpose()?,
        meta: header.samples,
        dictionary: header.dictionary,
        concept_dirs: DirectionSet { matrix: f32_section(CONCEPT_DIRS)?, kind: DirectionKind::ConceptDirections },
        class_dirs: DirectionSet { matrix: f32_section(CLASS_DIRS)?, kind: DirectionKind::ClassDirections },
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` as an `SHB1` file. Invalid bundles are refused.
pub fn save_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_bundle(bundle)?)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    decode_bundle(&read_file(path.as_ref())?)
}
