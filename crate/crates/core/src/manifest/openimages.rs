//! Open Images style CSV ingestion.
//!
//! Label file columns: `ImageID, LabelName, Confidence` (extra columns such as
//! `Source` are ignored). Box file columns: `ImageID, LabelName, XMin, XMax,
//! YMin, YMax, IsDepiction, IsGroupOf`. Label names may be machine ids
//! (`/m/01bl7v`) when a class-description file (`LabelName,DisplayName`,
//! header optional) is given to translate them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::{
    AnnotationBox, ClassHierarchy, DatasetManifest, IngestReport, LabelAssertion, LoadedManifest,
    ManifestError, RecordError, Sample,
};

#[derive(Clone, Debug, Default)]
pub struct OpenImagesSources {
    pub labels: Option<PathBuf>,
    pub boxes: Option<PathBuf>,
    pub class_descriptions: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    /// Prefix joined with `<ImageID>.<image_extension>` to form `image_ref`.
    pub image_root: Option<String>,
    pub image_extension: Option<String>,
    pub source_name: Option<String>,
}

impl OpenImagesSources {
    /// Conventional layout: `labels.csv`, `boxes.csv`, `class-descriptions.csv`,
    /// `hierarchy.json` inside `dir`.
    pub fn from_dir(dir: &Path) -> Self {
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let labels = opt("labels.csv");
        let mut boxes = opt("boxes.csv");
        if labels.is_none() && boxes.is_none() {
            // surfaces as FileNotFound on load
            boxes = Some(dir.join("boxes.csv"));
        }
        Self {
            labels,
            boxes,
            class_descriptions: opt("class-descriptions.csv"),
            hierarchy: opt("hierarchy.json"),
            image_root: None,
            image_extension: None,
            source_name: dir.file_name().map(|n| n.to_string_lossy().into_owned()),
        }
    }
}

#[derive(Default)]
struct ImageEntry {
    labels: BTreeSet<LabelAssertion>,
    boxes: Vec<AnnotationBox>,
}

struct Columns {
    map: BTreeMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        Self {
            map: headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect(),
        }
    }

    fn require(&self, names: &[&str], file: &str) -> Result<Vec<usize>, ManifestError> {
        names
            .iter()
            .map(|n| {
                self.map.get(*n).copied().ok_or_else(|| ManifestError::Schema {
                    line: 1,
                    reason: format!("{file}: missing column {n}"),
                })
            })
            .collect()
    }

    fn optional(&self, name: &str) -> Option<usize> {
        self.map.get(name).copied()
    }
}

fn open_csv(path: &Path, has_headers: bool) -> Result<csv::Reader<std::fs::File>, ManifestError> {
    let file = std::fs::File::open(path).map_err(|e| ManifestError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(has_headers).flexible(true).from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> ManifestError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => ManifestError::io(path, io),
        other => ManifestError::Schema { line, reason: format!("{other:?}") },
    }
}

fn parse_flag(raw: &str) -> bool {
    // Open Images uses 1 / 0 / -1 (unknown)
    raw.trim() == "1"
}

fn load_descriptions(path: &Path) -> Result<BTreeMap<String, String>, ManifestError> {
    let mut reader = open_csv(path, false)?;
    let mut names = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let (Some(mid), Some(name)) = (record.get(0), record.get(1)) else {
            continue;
        };
        if mid == "LabelName" {
            continue;
        }
        names.insert(mid.trim().to_string(), name.trim().to_string());
    }
    Ok(names)
}

pub fn load_open_images(sources: &OpenImagesSources) -> Result<LoadedManifest, ManifestError> {
    let names = match &sources.class_descriptions {
        Some(p) => load_descriptions(p)?,
        None => BTreeMap::new(),
    };
    let hierarchy = match &sources.hierarchy {
        Some(p) => Some(ClassHierarchy::from_json_file(p)?.renamed(&names)),
        None => None,
    };
    let mut vocabulary: BTreeSet<String> = names.values().cloned().collect();
    match &hierarchy {
        Some(h) => vocabulary.extend(h.classes().map(str::to_string)),
        None if names.is_empty() => {
            vocabulary.extend(ClassHierarchy::person_default().classes().map(str::to_string))
        }
        None => {}
    }
    let resolve = |raw: &str| names.get(raw.trim()).cloned().unwrap_or_else(|| raw.trim().to_string());

    let mut report = IngestReport::default();
    let mut images: BTreeMap<String, ImageEntry> = BTreeMap::new();

    if let Some(path) = &sources.labels {
        let label = path.display().to_string();
        let mut reader = open_csv(path, true)?;
        let cols = Columns::new(reader.headers().map_err(|e| csv_err(path, e))?);
        let idx = cols.require(&["ImageID", "LabelName"], &label)?;
        let confidence = cols.optional("Confidence");
        for record in reader.records() {
            let record = match record {
                Ok(r) => r,
                Err(e) => {
                    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                    report.errors.push(RecordError { file: label.clone(), line, reason: e.to_string() });
                    continue;
                }
            };
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let (Some(image_id), Some(raw_name)) = (record.get(idx[0]), record.get(idx[1])) else {
                report.errors.push(RecordError { file: label.clone(), line, reason: "short row".into() });
                continue;
            };
            if image_id.trim().is_empty() {
                report.errors.push(RecordError { file: label.clone(), line, reason: "empty ImageID".into() });
                continue;
            }
            if let Some(ci) = confidence {
                match record.get(ci).map(|c| c.trim().parse::<f64>()) {
                    Some(Ok(c)) if c <= 0.0 => continue, // verified absent
                    Some(Ok(_)) => {}
                    _ => {
                        report.errors.push(RecordError {
                            file: label.clone(),
                            line,
                            reason: "unparseable Confidence".into(),
                        });
                        continue;
                    }
                }
            }
            let class_name = resolve(raw_name);
            if !vocabulary.contains(&class_name) {
                report.unknown_classes.insert(class_name.clone());
            }
            images
                .entry(image_id.trim().to_string())
                .or_default()
                .labels
                .insert(LabelAssertion::image(class_name));
        }
    }

    if let Some(path) = &sources.boxes {
        let label = path.display().to_string();
        let mut reader = open_csv(path, true)?;
        let cols = Columns::new(reader.headers().map_err(|e| csv_err(path, e))?);
        let idx = cols.require(&["ImageID", "LabelName", "XMin", "XMax", "YMin", "YMax"], &label)?;
        let depiction = cols.optional("IsDepiction");
        let group = cols.optional("IsGroupOf");
        for record in reader.records() {
            let record = match record {
                Ok(r) => r,
                Err(e) => {
                    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                    report.errors.push(RecordError { file: label.clone(), line, reason: e.to_string() });
                    continue;
                }
            };
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let fields: Option<Vec<&str>> = idx.iter().map(|&i| record.get(i)).collect();
            let Some(fields) = fields else {
                report.errors.push(RecordError { file: label.clone(), line, reason: "short row".into() });
                continue;
            };
            let coords: Result<Vec<f64>, _> = fields[2..].iter().map(|f| f.trim().parse::<f64>()).collect();
            let Ok(c) = coords else {
                report.errors.push(RecordError { file: label.clone(), line, reason: "unparseable coordinate".into() });
                continue;
            };
            let class_name = resolve(fields[1]);
            let is_depiction = depiction.and_then(|i| record.get(i)).is_some_and(parse_flag);
            let is_group = group.and_then(|i| record.get(i)).is_some_and(parse_flag);
            // column order is XMin, XMax, YMin, YMax
            let bx = match AnnotationBox::new(class_name.clone(), [c[0], c[2], c[1], c[3]]) {
                Ok(b) => b.with_depiction(is_depiction).with_group(is_group),
                Err(e) => {
                    report.errors.push(RecordError { file: label.clone(), line, reason: e.to_string() });
                    continue;
                }
            };
            if !vocabulary.contains(&class_name) {
                report.unknown_classes.insert(class_name.clone());
            }
            let entry = images.entry(fields[0].trim().to_string()).or_default();
            entry.labels.insert(LabelAssertion::detection(class_name, is_depiction));
            entry.boxes.push(bx);
        }
    }

    let root = sources.image_root.as_deref().unwrap_or("");
    let ext = sources.image_extension.as_deref().unwrap_or("jpg");
    let samples = images
        .into_iter()
        .map(|(id, entry)| {
            let image_ref = if root.is_empty() {
                format!("{id}.{ext}")
            } else {
                format!("{}/{id}.{ext}", root.trim_end_matches('/'))
            };
            let mut sample = Sample::new(id, image_ref);
            sample.source_labels = entry.labels.into_iter().collect();
            sample.boxes = entry.boxes;
            sample
        })
        .collect();

    Ok(LoadedManifest {
        manifest: DatasetManifest::new(
            sources.source_name.clone().unwrap_or_else(|| "openimages".into()),
            samples,
        ),
        report,
    })
}
