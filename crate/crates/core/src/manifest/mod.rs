//! Dataset data model and ingestion.
//!
//! The canonical on-disk form is a JSONL manifest: one header line carrying
//! `schema_version` and `source_name`, then one [`Sample`] per line. Open
//! Images style CSV exports are converted into the same model by
//! [`openimages`].

mod hierarchy;
pub mod openimages;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use hierarchy::{hierarchy_subordinates, ClassHierarchy, ClassNode};
pub use openimages::{load_open_images, OpenImagesSources};

pub const SCHEMA_VERSION: u32 = 1;

pub const PERSON: &str = "Person";
pub const MAN: &str = "Man";
pub const WOMAN: &str = "Woman";
pub const BOY: &str = "Boy";
pub const GIRL: &str = "Girl";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Schema { line: usize, reason: String },
    #[error("duplicate sample id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("unsupported manifest schema version {0}")]
    UnsupportedSchemaVersion(u32),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

impl ManifestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            ManifestError::FileNotFound(path.to_path_buf())
        } else {
            ManifestError::Io { path: path.to_path_buf(), source }
        }
    }
}

/// Human or annotation-derived truth about child presence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildPresence {
    Positive,
    Negative,
    #[default]
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelLevel {
    Image,
    Detection,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelAssertion {
    pub class_name: String,
    pub level: LabelLevel,
    #[serde(default)]
    pub is_depiction: bool,
}

impl LabelAssertion {
    pub fn image(class_name: impl Into<String>) -> Self {
        Self { class_name: class_name.into(), level: LabelLevel::Image, is_depiction: false }
    }

    pub fn detection(class_name: impl Into<String>, is_depiction: bool) -> Self {
        Self { class_name: class_name.into(), level: LabelLevel::Detection, is_depiction }
    }
}

/// Axis-aligned box in normalized image coordinates.
///
/// Construction enforces `0 <= min < max <= 1` on both axes, including when
/// deserializing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct AnnotationBox {
    class_name: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    #[serde(default)]
    is_depiction: bool,
    #[serde(default)]
    is_group: bool,
}

#[derive(Deserialize)]
struct RawBox {
    class_name: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    #[serde(default)]
    is_depiction: bool,
    #[serde(default)]
    is_group: bool,
}

impl TryFrom<RawBox> for AnnotationBox {
    type Error = ManifestError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        AnnotationBox::new(raw.class_name, [raw.x_min, raw.y_min, raw.x_max, raw.y_max])
            .map(|b| b.with_depiction(raw.is_depiction).with_group(raw.is_group))
    }
}

impl AnnotationBox {
    /// `coords` is `[x_min, y_min, x_max, y_max]`.
    pub fn new(class_name: impl Into<String>, coords: [f64; 4]) -> Result<Self, ManifestError> {
        let [x_min, y_min, x_max, y_max] = coords;
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !coords.iter().all(|&v| in_unit(v)) {
            return Err(ManifestError::InvalidBox(format!("coordinates {coords:?} outside [0,1]")));
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(ManifestError::InvalidBox(format!("degenerate box {coords:?}")));
        }
        Ok(Self {
            class_name: class_name.into(),
            x_min,
            y_min,
            x_max,
            y_max,
            is_depiction: false,
            is_group: false,
        })
    }

    pub fn with_depiction(mut self, is_depiction: bool) -> Self {
        self.is_depiction = is_depiction;
        self
    }

    pub fn with_group(mut self, is_group: bool) -> Self {
        self.is_group = is_group;
        self
    }

    pub fn class_name(&self) -> &str {
        &self.class_name
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn is_depiction(&self) -> bool {
        self.is_depiction
    }

    pub fn is_group(&self) -> bool {
        self.is_group
    }

    pub fn rect(&self) -> crate::geometry::Rect<f64> {
        crate::geometry::Rect::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// One dataset record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_labels: Vec<LabelAssertion>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<AnnotationBox>,
    #[serde(default)]
    pub ground_truth: ChildPresence,
    /// Source fields the model does not interpret, carried through verbatim.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image_ref: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            image_ref: image_ref.into(),
            caption: None,
            visual_description: None,
            source_labels: Vec::new(),
            boxes: Vec::new(),
            ground_truth: ChildPresence::Unknown,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_caption(mut self, caption: impl Into<String>) -> Self {
        self.caption = Some(caption.into());
        self
    }

    pub fn with_ground_truth(mut self, truth: ChildPresence) -> Self {
        self.ground_truth = truth;
        self
    }

    pub fn with_box(mut self, b: AnnotationBox) -> Self {
        self.boxes.push(b);
        self
    }

    pub fn with_label(mut self, label: LabelAssertion) -> Self {
        if !self.source_labels.contains(&label) {
            self.source_labels.push(label);
        }
        self
    }

    /// Every class name asserted anywhere on the sample, boxes included.
    pub fn class_names(&self) -> BTreeSet<&str> {
        self.source_labels
            .iter()
            .map(|l| l.class_name.as_str())
            .chain(self.boxes.iter().map(|b| b.class_name()))
            .collect()
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty `id`".into());
        }
        if self.image_ref.is_empty() {
            return Err("empty `image_ref`".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_name: String,
    pub schema_version: u32,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    source_name: String,
}

impl DatasetManifest {
    pub fn new(source_name: impl Into<String>, samples: Vec<Sample>) -> Self {
        Self { source_name: source_name.into(), schema_version: SCHEMA_VERSION, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn index_by_id(&self) -> BTreeMap<&str, &Sample> {
        self.samples.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    /// Same source and schema, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            source_name: self.source_name.clone(),
            schema_version: self.schema_version,
            samples,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = Header { schema_version: self.schema_version, source_name: self.source_name.clone() };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for sample in &self.samples {
            serde_json::to_writer(&mut out, sample)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSONL serialization, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        self.write_jsonl(HashWriter(&mut hasher)).expect("hashing never fails");
        hex(&hasher.finalize())
    }
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestFormat {
    Jsonl,
    /// A directory holding `labels.csv`, `boxes.csv` and optionally
    /// `class-descriptions.csv` and `hierarchy.json`.
    OpenImagesCsv,
}

/// Non-fatal problems found during a load.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub errors: Vec<RecordError>,
    /// Class names not present in the loaded vocabulary; kept on the samples.
    pub unknown_classes: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordError {
    pub file: String,
    pub line: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    pub report: IngestReport,
}

impl LoadedManifest {
    /// Fails on the first malformed record instead of reporting it.
    pub fn strict(self) -> Result<DatasetManifest, ManifestError> {
        match self.report.errors.first() {
            Some(e) => Err(ManifestError::Schema { line: e.line, reason: e.reason.clone() }),
            None => Ok(self.manifest),
        }
    }
}

pub fn load_manifest(path: &Path, format: ManifestFormat) -> Result<LoadedManifest, ManifestError> {
    match format {
        ManifestFormat::Jsonl => load_jsonl(path),
        ManifestFormat::OpenImagesCsv => load_open_images(&OpenImagesSources::from_dir(path)),
    }
}

fn load_jsonl(path: &Path) -> Result<LoadedManifest, ManifestError> {
    let file = File::open(path).map_err(|e| ManifestError::io(path, e))?;
    let file_label = path.display().to_string();
    let mut report = IngestReport::default();
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    let mut source_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut schema_version = SCHEMA_VERSION;

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| ManifestError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                report.errors.push(RecordError { file: file_label.clone(), line: line_no, reason: e.to_string() });
                continue;
            }
        };
        if samples.is_empty() && seen.is_empty() && is_header(&value) {
            let header: Header = serde_json::from_value(value)
                .map_err(|e| ManifestError::Schema { line: line_no, reason: e.to_string() })?;
            if header.schema_version != SCHEMA_VERSION {
                return Err(ManifestError::UnsupportedSchemaVersion(header.schema_version));
            }
            schema_version = header.schema_version;
            source_name = header.source_name;
            continue;
        }
        let sample: Sample = match serde_json::from_value(value) {
            Ok(s) => s,
            Err(e) => {
                report.errors.push(RecordError { file: file_label.clone(), line: line_no, reason: e.to_string() });
                continue;
            }
        };
        if let Err(reason) = sample.validate() {
            report.errors.push(RecordError { file: file_label.clone(), line: line_no, reason });
            continue;
        }
        if !seen.insert(sample.id.clone()) {
            return Err(ManifestError::DuplicateId { id: sample.id, line: line_no });
        }
        samples.push(sample);
    }

    Ok(LoadedManifest {
        manifest: DatasetManifest { source_name, schema_version, samples },
        report,
    })
}

fn is_header(value: &serde_json::Value) -> bool {
    value.get("schema_version").is_some() && value.get("id").is_none()
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ManifestError> {
    let file = File::create(path).map_err(|e| ManifestError::io(path, e))?;
    let mut out = BufWriter::new(file);
    manifest.write_jsonl(&mut out).map_err(|e| ManifestError::io(path, e))?;
    out.flush().map_err(|e| ManifestError::io(path, e))
}
