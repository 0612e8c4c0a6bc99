//! Dataset files: binary PGM (P5) images plus a manifest CSV
//! `id,path,label,<param1>,...,<paramK>` with paths relative to the manifest directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::micronet::{LabeledDataset, Sample, Target, Tensor};
use crate::synthlab::scene::{GeneratedImage, SimParams};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const IMAGE_DIR: &str = "images";

/// Encodes an 8-bit grayscale image as binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Decodes binary PGM with maxval up to 255; returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse {
                offset: pos,
                reason: "truncated PGM header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Parse {
            offset: 0,
            reason: format!("expected P5 magic, found {:?}", fields[0]),
        });
    }
    let num = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Parse {
            offset: pos,
            reason: format!("bad PGM header number {s:?}"),
        })
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            offset: pos,
            reason: format!("unsupported maxval {maxval}"),
        });
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Parse {
        offset: pos,
        reason: "PGM pixel data is truncated".into(),
    })?;
    let pixels = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8).collect()
    };
    Ok((w, h, pixels))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::file(path, e))?)
}

/// Network input for an 8-bit grayscale image: shape `[1, height, width]`, values in `[0, 1]`.
pub fn pixels_to_tensor(width: usize, height: usize, pixels: &[u8]) -> Result<Tensor> {
    Tensor::new(
        vec![1, height, width],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub label: usize,
    pub params: SimParams,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn get(&self, id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn index(&self) -> std::collections::HashMap<&str, &ManifestRow> {
        self.rows.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let mut header = vec!["id", "path", "label"];
        header.extend(SimParams::NAMES);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), r.path.clone(), r.label.to_string()];
            rec.extend(r.params.values().iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a manifest; the derived columns are recomputed rather than trusted.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let header = r.headers()?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::invalid(format!("manifest lacks column {name}")))
        };
        let (ci, cp, cl) = (col("id")?, col("path")?, col("label")?);
        let pcols = SimParams::NAMES[..6].iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let bad = |what: &str| Error::invalid(format!("manifest row {}: bad {what}", line + 1));
            let vals = pcols
                .iter()
                .enumerate()
                .map(|(k, &i)| field(i).parse::<f64>().map_err(|_| bad(SimParams::NAMES[k])))
                .collect::<Result<Vec<_>>>()?;
            let id = field(ci).to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("duplicate image id {id}")));
            }
            rows.push(ManifestRow {
                id,
                path: field(cp).to_string(),
                label: field(cl).parse().map_err(|_| bad("label"))?,
                params: SimParams {
                    angle: vals[0],
                    length: vals[1],
                    occlusion: vals[2],
                    brightness: vals[3],
                    offset_x: vals[4],
                    offset_y: vals[5],
                },
            });
        }
        Ok(Self { rows })
    }
}

/// Writes `dir/images/<id>.pgm` for each image and `dir/manifest.csv`.
pub fn write_dataset(dir: impl AsRef<Path>, side: usize, images: &[GeneratedImage]) -> Result<Manifest> {
    let dir = dir.as_ref();
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::file(&img_dir, e))?;
    images.par_iter().try_for_each(|g| {
        let path = img_dir.join(format!("{}.pgm", g.id));
        fs::write(&path, encode_pgm(side, side, &g.pixels)?).map_err(|e| Error::file(&path, e))
    })?;
    let manifest = Manifest {
        rows: images
            .iter()
            .map(|g| ManifestRow {
                id: g.id.clone(),
                path: format!("{IMAGE_DIR}/{}.pgm", g.id),
                label: g.label,
                params: g.params,
            })
            .collect(),
    };
    manifest.write(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A dataset loaded from disk: the manifest plus the decoded images in manifest order.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub images: Vec<Tensor>,
}

impl LoadedDataset {
    pub fn labeled(&self) -> LabeledDataset {
        LabeledDataset::new(
            self.manifest
                .rows
                .iter()
                .zip(&self.images)
                .map(|(r, img)| Sample {
                    id: r.id.clone(),
                    image: img.clone(),
                    target: Target::Class(r.label),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<LoadedDataset> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir.join(MANIFEST_FILE))?;
    let images = manifest
        .rows
        .par_iter()
        .map(|r| {
            let (w, h, px) = read_pgm(dir.join(&r.path))?;
            pixels_to_tensor(w, h, &px)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        dir: dir.to_path_buf(),
        manifest,
        images,
    })
}

/// In-memory equivalent of writing and reading back a generated set.
pub fn to_labeled(side: usize, images: &[GeneratedImage]) -> Result<LabeledDataset> {
    images
        .iter()
        .map(|g| {
            Ok(Sample {
                id: g.id.clone(),
                image: pixels_to_tensor(side, side, &g.pixels)?,
                target: Target::Class(g.label),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(LabeledDataset::new)
}
