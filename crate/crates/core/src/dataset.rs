//! Manifest parsing and CT volume loading.
//!
//! A dataset lives under `<root>/<patient_id>/<slice files>` and is described
//! by a CSV manifest with header `patient_id,label,path`. Slices inside a
//! patient directory are ordered by the last integer found in the file stem,
//! falling back to plain lexicographic order for names without digits.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 3] = ["patient_id", "label", "path"];

const SUPPORTED_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatientLabel {
    #[serde(rename = "covid")]
    Covid,
    #[serde(rename = "non-covid")]
    NonCovid,
}

impl PatientLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PatientLabel::Covid => "covid",
            PatientLabel::NonCovid => "non-covid",
        }
    }

    pub fn other(self) -> Self {
        match self {
            PatientLabel::Covid => PatientLabel::NonCovid,
            PatientLabel::NonCovid => PatientLabel::Covid,
        }
    }
}

impl fmt::Display for PatientLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatientLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covid" => Ok(PatientLabel::Covid),
            "non-covid" => Ok(PatientLabel::NonCovid),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// A single 8-bit grayscale slice, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidSlice(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::InvalidSlice(format!(
                "{} pixels for a {height}x{width} slice",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.pixels[row * self.width..(row + 1) * self.width]
    }

    /// Converts a decoded image to 8-bit grayscale. Multi-channel inputs are
    /// reduced by averaging their color channels; alpha is ignored.
    pub fn from_dynamic(image: &DynamicImage) -> Result<Self> {
        let (width, height) = (image.width() as usize, image.height() as usize);
        let pixels = match image {
            DynamicImage::ImageLuma8(gray) => gray.as_raw().clone(),
            DynamicImage::ImageLumaA8(gray) => gray.pixels().map(|p| p.0[0]).collect(),
            DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
                image.to_luma8().into_raw()
            }
            other => other
                .to_rgb8()
                .pixels()
                .map(|p| {
                    let sum = p.0.iter().map(|&c| c as u16).sum::<u16>();
                    ((sum + 1) / 3) as u8
                })
                .collect(),
        };
        Self::new(height, width, pixels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub patient_id: String,
    pub slices: Vec<SliceImage>,
    pub label: Option<PatientLabel>,
}

impl CtVolume {
    pub fn new(
        patient_id: impl Into<String>,
        slices: Vec<SliceImage>,
        label: Option<PatientLabel>,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if slices.is_empty() {
            return Err(Error::InvalidSlice(format!(
                "volume {patient_id} has no slices"
            )));
        }
        Ok(Self {
            patient_id,
            slices,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub patient_id: String,
    /// `None` when the manifest leaves the label column empty.
    pub label: Option<PatientLabel>,
    pub path: PathBuf,
}

impl ManifestEntry {
    /// Directory holding this patient's slices. Relative paths are taken
    /// relative to the dataset root.
    pub fn resolve_dir(&self, root: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            root.join(&self.path)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelCounts {
    pub covid: usize,
    pub non_covid: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    counts: LabelCounts,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    patient_id: String,
    label: String,
    path: String,
}

impl Manifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut counts = LabelCounts::default();
        for entry in &entries {
            if !seen.insert(entry.patient_id.as_str()) {
                return Err(Error::DuplicatePatient(entry.patient_id.clone()));
            }
            match entry.label {
                Some(PatientLabel::Covid) => counts.covid += 1,
                Some(PatientLabel::NonCovid) => counts.non_covid += 1,
                None => counts.unlabeled += 1,
            }
        }
        Ok(Self { entries, counts })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn counts(&self) -> LabelCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, patient_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.patient_id == patient_id)
    }

    pub fn label_of(&self, patient_id: &str) -> Option<Option<PatientLabel>> {
        self.get(patient_id).map(|e| e.label)
    }

    /// Serializes the manifest in its CSV wire format.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,label,path\n");
        for entry in &self.entries {
            let label = entry.label.map(PatientLabel::as_str).unwrap_or("");
            out.push_str(&format!(
                "{},{},{}\n",
                entry.patient_id,
                label,
                entry.path.display()
            ));
        }
        out
    }
}

/// Reads and validates a manifest CSV.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&bytes, path)
}

pub(crate) fn parse_manifest(bytes: &[u8], path: &Path) -> Result<Manifest> {
    let manifest_err = |message: String| Error::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| manifest_err(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(manifest_err(format!(
            "expected header {:?}, found {:?}",
            MANIFEST_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut entries = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| manifest_err(format!("row {}: {e}", i + 2)))?;
        if row.patient_id.is_empty() {
            return Err(manifest_err(format!("row {}: empty patient_id", i + 2)));
        }
        let label = if row.label.is_empty() {
            None
        } else {
            Some(row.label.parse::<PatientLabel>()?)
        };
        let path = if row.path.is_empty() {
            PathBuf::from(&row.patient_id)
        } else {
            PathBuf::from(row.path)
        };
        entries.push(ManifestEntry {
            patient_id: row.patient_id,
            label,
            path,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    Manifest::from_entries(entries)
}

/// Sort key for slice files: the last run of ASCII digits in the file stem.
fn trailing_number(stem: &str) -> Option<u64> {
    let bytes = stem.as_bytes();
    let end = bytes.iter().rposition(u8::is_ascii_digit)? + 1;
    let start = bytes[..end]
        .iter()
        .rposition(|b| !b.is_ascii_digit())
        .map_or(0, |i| i + 1);
    stem[start..end].parse().ok()
}

/// Canonical slice ordering: numbered files first, ascending by number, then
/// un-numbered files lexicographically. Ties on the number break by name.
pub fn compare_slice_names(a: &str, b: &str) -> Ordering {
    let stem = |name: &str| -> String {
        Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    match (trailing_number(&stem(a)), trailing_number(&stem(b))) {
        (Some(x), Some(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.cmp(b),
    }
}

fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            SUPPORTED_EXTENSIONS
                .iter()
                .any(|s| s.eq_ignore_ascii_case(e))
        })
        .unwrap_or(false)
}

/// Lists slice files of a patient directory in canonical order. Hidden files
/// and subdirectories are skipped; any other non-image file is an error.
pub fn list_slice_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let read_dir = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for item in read_dir {
        let item = item.map_err(|e| Error::io(dir, e))?;
        let file_type = item.file_type().map_err(|e| Error::io(item.path(), e))?;
        if file_type.is_dir() {
            continue;
        }
        let name = item.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        if !is_supported(&item.path()) {
            return Err(Error::UnsupportedFormat(item.path()));
        }
        names.push(name);
    }
    if names.is_empty() {
        return Err(Error::EmptyVolume(dir.to_path_buf()));
    }
    names.sort_by(|a, b| compare_slice_names(a, b));
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

pub fn load_slice(path: &Path) -> Result<SliceImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes)
        .or_else(|_| image::ImageFormat::from_path(path))
        .map_err(|_| Error::UnsupportedFormat(path.to_path_buf()))?;
    let decoded = image::load_from_memory_with_format(&bytes, format).map_err(|e| {
        Error::CorruptImage {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })?;
    SliceImage::from_dynamic(&decoded)
}

/// Loads every slice of one manifest entry, in canonical order.
pub fn load_volume(entry: &ManifestEntry, root: &Path) -> Result<CtVolume> {
    let dir = entry.resolve_dir(root);
    let files = list_slice_files(&dir)?;
    let slices = files
        .iter()
        .map(|p| load_slice(p))
        .collect::<Result<Vec<_>>>()?;
    CtVolume::new(entry.patient_id.clone(), slices, entry.label)
}
