//! In-memory datasets and the on-disk `manifest.txt` layout.
//!
//! A dataset directory holds `manifest.txt` plus `<id>.ppm` / `<id>.pgm` per
//! sample. The manifest starts with `classes=<C>`, may carry `split=<tag>`,
//! then lists one id per line in iteration order.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::pnm;
use crate::model::MAX_CLASSES;
use crate::tensor::{LabelMap, Tensor};

pub const VOID_LABEL: u8 = 255;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `[channels,H,W]`, values in `[0,1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub num_classes: usize,
    pub void_label: u8,
    pub split: Option<String>,
}

fn manifest_error(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        message: message.into(),
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl DatasetManifest {
    /// Parse manifest text. `source` names the file in error messages.
    pub fn parse(text: &str, source: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut num_classes = None;
        let mut split = None;
        let mut ids = Vec::new();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(value) = line.strip_prefix("classes=") {
                if num_classes.is_some() || !ids.is_empty() {
                    return Err(manifest_error(
                        source,
                        line_no,
                        "`classes=` must appear once, before ids",
                    ));
                }
                let c: usize = value.trim().parse().map_err(|_| {
                    manifest_error(source, line_no, format!("bad class count `{value}`"))
                })?;
                if !(2..=MAX_CLASSES).contains(&c) {
                    return Err(manifest_error(
                        source,
                        line_no,
                        format!("class count {c} outside 2..={MAX_CLASSES}"),
                    ));
                }
                num_classes = Some(c);
            } else if let Some(value) = line.strip_prefix("split=") {
                if split.is_some() || !ids.is_empty() {
                    return Err(manifest_error(
                        source,
                        line_no,
                        "`split=` must appear once, before ids",
                    ));
                }
                let value = value.trim();
                if !valid_id(value) {
                    return Err(manifest_error(
                        source,
                        line_no,
                        format!("bad split tag `{value}`"),
                    ));
                }
                split = Some(value.to_string());
            } else {
                if num_classes.is_none() {
                    return Err(manifest_error(
                        source,
                        line_no,
                        "manifest must start with `classes=<C>`",
                    ));
                }
                if !valid_id(line) {
                    return Err(manifest_error(
                        source,
                        line_no,
                        format!("bad sample id `{line}`"),
                    ));
                }
                if !seen.insert(line) {
                    return Err(manifest_error(
                        source,
                        line_no,
                        format!("duplicate sample id `{line}`"),
                    ));
                }
                ids.push(line.to_string());
            }
        }
        let num_classes =
            num_classes.ok_or_else(|| manifest_error(source, 1, "missing `classes=<C>` header"))?;
        Ok(DatasetManifest {
            root: root.into(),
            ids,
            num_classes,
            void_label: VOID_LABEL,
            split,
        })
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path.display().to_string(), dir)
    }

    pub fn render(&self) -> String {
        let mut out = format!("classes={}\n", self.num_classes);
        if let Some(split) = &self.split {
            let _ = writeln!(out, "split={split}");
        }
        for id in &self.ids {
            out.push_str(id);
            out.push('\n');
        }
        out
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.ppm"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.pgm"))
    }
}

/// Samples in manifest order, all sharing one set of extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
    pub num_classes: usize,
    pub void_label: u8,
    pub split: Option<String>,
}

impl Dataset {
    /// Validates that every sample has matching extents and in-range labels.
    pub fn new(samples: Vec<SampleRecord>, num_classes: usize) -> Result<Self> {
        let ds = Dataset {
            samples,
            num_classes,
            void_label: VOID_LABEL,
            split: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::contract(format!(
                "class count {} outside 2..={MAX_CLASSES}",
                self.num_classes
            )));
        }
        let Some(first) = self.samples.first() else {
            return Ok(());
        };
        let shape = first.image.shape().to_vec();
        for s in &self.samples {
            if s.image.rank() != 3 || s.image.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "sample `{}` has extents {:?}, expected {:?}",
                    s.id,
                    s.image.shape(),
                    shape
                )));
            }
            if s.labels.height() != shape[1] || s.labels.width() != shape[2] {
                return Err(Error::shape(format!(
                    "sample `{}` label map is {}x{}, image is {}x{}",
                    s.id,
                    s.labels.height(),
                    s.labels.width(),
                    shape[1],
                    shape[2]
                )));
            }
            if let Some(&bad) = s
                .labels
                .data()
                .iter()
                .find(|&&y| y != self.void_label && y as usize >= self.num_classes)
            {
                return Err(Error::Mismatch(format!(
                    "sample `{}` has label {bad} but the dataset declares {} classes",
                    s.id, self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[channels,H,W]` of every image, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let manifest = DatasetManifest::read(dir)?;
        let mut samples = Vec::with_capacity(manifest.ids.len());
        for id in &manifest.ids {
            samples.push(SampleRecord {
                id: id.clone(),
                image: pnm::read_image(manifest.image_path(id))?,
                labels: pnm::read_labels(manifest.label_path(id))?,
            });
        }
        let ds = Dataset {
            samples,
            num_classes: manifest.num_classes,
            void_label: manifest.void_label,
            split: manifest.split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = DatasetManifest {
            root: dir.to_path_buf(),
            ids: self.samples.iter().map(|s| s.id.clone()).collect(),
            num_classes: self.num_classes,
            void_label: self.void_label,
            split: self.split.clone(),
        };
        for s in &self.samples {
            if !valid_id(&s.id) {
                return Err(Error::contract(format!(
                    "sample id `{}` is not file-safe",
                    s.id
                )));
            }
            pnm::write_image(&s.image, manifest.image_path(&s.id))?;
            pnm::write_labels(&s.labels, manifest.label_path(&s.id))?;
        }
        pnm::write(&dir.join(MANIFEST_FILE), manifest.render().as_bytes())
    }
}
