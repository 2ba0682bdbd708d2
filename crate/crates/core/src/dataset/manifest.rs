//! Delimited manifest table: `image_path,mask_path,label,<concept columns>,split`.
//!
//! Relative paths are resolved against the manifest's directory. The label
//! column holds either a class index or a raw class name that is translated
//! through a [`LabelMap`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::imageio;
use super::sample::{Sample, Split};
use crate::error::{Error, Result};
use crate::vocab::ConceptVocabulary;

const FIXED_HEAD: [&str; 3] = ["image_path", "mask_path", "label"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub image_path: String,
    pub mask_path: Option<String>,
    pub label: String,
    pub concepts: Vec<u8>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub concept_names: Vec<String>,
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header.len() < FIXED_HEAD.len() + 2
            || header[..3] != FIXED_HEAD
            || header.last().map(String::as_str) != Some("split")
        {
            return Err(Error::Schema(format!(
                "header must be image_path,mask_path,label,<concepts>,split; got {}",
                header.join(",")
            )));
        }
        let concept_names = header[3..header.len() - 1].to_vec();
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record?;
            if record.len() != header.len() {
                return Err(Error::Load {
                    row,
                    msg: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            let concepts = (3..header.len() - 1)
                .map(|c| match &record[c] {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::Load {
                        row,
                        msg: format!("concept {} must be 0 or 1, got {other:?}", header[c]),
                    }),
                })
                .collect::<Result<Vec<u8>>>()?;
            let split = record[header.len() - 1]
                .parse()
                .map_err(|e: Error| Error::Load { row, msg: e.to_string() })?;
            rows.push(ManifestRow {
                image_path: record[0].to_string(),
                mask_path: Some(record[1].to_string()).filter(|s| !s.is_empty()),
                label: record[2].to_string(),
                concepts,
                split,
            });
        }
        Ok(Self {
            concept_names,
            rows,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        let mut header: Vec<&str> = FIXED_HEAD.to_vec();
        header.extend(self.concept_names.iter().map(String::as_str));
        header.push("split");
        writer.write_record(&header)?;
        for row in &self.rows {
            let mut record = vec![
                row.image_path.clone(),
                row.mask_path.clone().unwrap_or_default(),
                row.label.clone(),
            ];
            record.extend(row.concepts.iter().map(|c| c.to_string()));
            record.push(row.split.to_string());
            writer.write_record(&record)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Column index in this manifest for each vocabulary concept.
    pub fn concept_columns(&self, vocab: &ConceptVocabulary) -> Result<Vec<usize>> {
        for name in &self.concept_names {
            if vocab.index_of(name).is_none() {
                return Err(Error::Schema(format!("unknown concept column {name:?}")));
            }
        }
        vocab
            .names()
            .iter()
            .map(|name| {
                self.concept_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::Schema(format!("missing concept column {name:?}")))
            })
            .collect()
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for row in &self.rows {
            *counts.entry(row.split).or_insert(0) += 1;
        }
        counts
    }
}

/// Translation from raw class names to class indices, e.g. merging two nevus
/// grades into one class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap(pub BTreeMap<String, usize>);

impl LabelMap {
    /// Parses `name:index,name:index,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for entry in text.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let (name, idx) = entry
                .rsplit_once(':')
                .ok_or_else(|| Error::Config(format!("label map entry {entry:?} lacks ':'")))?;
            let idx = idx
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("label map entry {entry:?} has a bad index")))?;
            map.insert(name.trim().to_string(), idx);
        }
        Ok(Self(map))
    }

    pub fn render(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| format!("{k}:{v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// (H, W) every image and mask is resized to.
    pub image_size: (usize, usize),
    pub num_classes: usize,
    pub label_map: Option<LabelMap>,
    /// Rows without a mask path are a schema error when set.
    pub require_masks: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            image_size: (224, 224),
            num_classes: 2,
            label_map: None,
            require_masks: false,
        }
    }
}

fn parse_label(raw: &str, opts: &LoadOptions, row: usize) -> Result<usize> {
    let label = match &opts.label_map {
        Some(map) => *map
            .0
            .get(raw)
            .ok_or_else(|| Error::Schema(format!("row {row}: label {raw:?} not in label map")))?,
        None => raw.parse().map_err(|_| Error::Load {
            row,
            msg: format!("label {raw:?} is not a class index (configure a label map)"),
        })?,
    };
    if label >= opts.num_classes {
        return Err(Error::Load {
            row,
            msg: format!("label {label} out of range for {} classes", opts.num_classes),
        });
    }
    Ok(label)
}

/// Decodes every manifest row into a [`Sample`], in manifest order.
///
/// Decoding runs on the rayon pool; the result order is the row order
/// regardless of worker count.
pub fn load_manifest(path: &Path, vocab: &ConceptVocabulary, opts: &LoadOptions) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::read(path)?;
    load_rows(&manifest, vocab, opts)
}

pub fn load_rows(
    manifest: &DatasetManifest,
    vocab: &ConceptVocabulary,
    opts: &LoadOptions,
) -> Result<Vec<Sample>> {
    let columns = manifest.concept_columns(vocab)?;
    // Cheap checks first so schema errors surface before any decoding.
    for (i, row) in manifest.rows.iter().enumerate() {
        if opts.require_masks && row.mask_path.is_none() {
            return Err(Error::Schema(format!(
                "row {}: empty mask_path while masks are required",
                i + 1
            )));
        }
        parse_label(&row.label, opts, i + 1)?;
    }
    manifest
        .rows
        .par_iter()
        .enumerate()
        .map(|(i, row)| load_row(manifest, row, i + 1, &columns, opts))
        .collect()
}

fn load_row(
    manifest: &DatasetManifest,
    row: &ManifestRow,
    row_no: usize,
    columns: &[usize],
    opts: &LoadOptions,
) -> Result<Sample> {
    let image_path = manifest.resolve(&row.image_path);
    if !image_path.is_file() {
        return Err(Error::Load {
            row: row_no,
            msg: format!("image file {} not found", image_path.display()),
        });
    }
    let image = imageio::load_rgb(&image_path, opts.image_size).map_err(|e| Error::Load {
        row: row_no,
        msg: e.to_string(),
    })?;
    let lesion_mask = match &row.mask_path {
        Some(m) => {
            let mask_path = manifest.resolve(m);
            if !mask_path.is_file() {
                return Err(Error::Load {
                    row: row_no,
                    msg: format!("mask file {} not found", mask_path.display()),
                });
            }
            Some(
                imageio::load_mask(&mask_path, opts.image_size).map_err(|e| Error::Load {
                    row: row_no,
                    msg: e.to_string(),
                })?,
            )
        }
        None => None,
    };
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("row{row_no}"));
    Ok(Sample {
        id,
        image,
        label: parse_label(&row.label, opts, row_no)?,
        concepts: columns.iter().map(|&c| row.concepts[c]).collect(),
        lesion_mask,
        source: Some(image_path),
        split: row.split,
    })
}
