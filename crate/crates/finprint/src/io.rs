//! File readers and writers: boxes CSV, dataset manifests (JSONL),
//! label sidecars, cluster assignments, and dataset loading.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::fnt;
use crate::tracklet::ClusterAssignment;
use crate::types::{Dataset, FrameBox, ManifestEntry, Sample};

const BOXES_HEADER: &str = "box_id,frame,x,y,w,h";

/// Read detector boxes from a CSV with header `box_id,frame,x,y,w,h`.
///
/// Row order is preserved. Malformed rows (missing column, non-numeric
/// field, non-positive width/height) fail with the 1-based line number.
pub fn read_boxes_csv(path: impl AsRef<Path>) -> Result<Vec<FrameBox>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));

    let headers = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let expected: Vec<&str> = BOXES_HEADER.split(',').collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `{BOXES_HEADER}`"),
        ));
    }

    let mut boxes = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 6 {
            return Err(Error::parse(path, line, format!("expected 6 fields, got {}", rec.len())));
        }
        let field = |i: usize, name: &str| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(path, line, format!("non-numeric {name}: `{}`", &rec[i])))
        };
        let box_id = rec[0]
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::parse(path, line, format!("non-integer box_id: `{}`", &rec[0])))?;
        let frame = rec[1]
            .trim()
            .parse::<u32>()
            .map_err(|_| Error::parse(path, line, format!("non-integer frame: `{}`", &rec[1])))?;
        let (x, y, w, h) = (field(2, "x")?, field(3, "y")?, field(4, "w")?, field(5, "h")?);
        let b = FrameBox::new(box_id, frame, x, y, w, h)
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn write_boxes_csv(path: impl AsRef<Path>, boxes: &[FrameBox]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{BOXES_HEADER}").map_err(|e| Error::io(path, e))?;
    for b in boxes {
        writeln!(w, "{},{},{},{},{},{}", b.box_id, b.frame, b.x, b.y, b.w, b.h)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write a cluster assignment as CSV with header `box_id,cluster`.
pub fn write_clusters_csv(path: impl AsRef<Path>, assignment: &ClusterAssignment) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "box_id,cluster").map_err(|e| Error::io(path, e))?;
    for (box_id, cluster) in assignment.iter() {
        writeln!(w, "{box_id},{cluster}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_clusters_csv(path: impl AsRef<Path>) -> Result<ClusterAssignment> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = (i + 1) as u64;
        if i == 0 {
            if line.trim() != "box_id,cluster" {
                return Err(Error::parse(path, 1, "expected header `box_id,cluster`"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (a, b) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
        let box_id = a
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::parse(path, lineno, format!("non-integer box_id `{a}`")))?;
        let cluster = b
            .trim()
            .parse::<i64>()
            .map_err(|_| Error::parse(path, lineno, format!("non-integer cluster `{b}`")))?;
        entries.push((box_id, cluster));
    }
    ClusterAssignment::new(entries)
}

/// Write a dataset manifest: one JSON object per line.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let line = serde_json::to_string(e)
            .map_err(|err| Error::Invalid(format!("manifest serialization: {err}")))?;
        writeln!(w, "{line}").map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, (i + 1) as u64, e.to_string()))?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Load manifest entries plus their pixel tensors into memory.
///
/// Tensor paths are resolved relative to the manifest's directory. Pixel
/// tensors must be rank 3 `(H, W, C)` with values in `[0,1]`.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let tpath = base.join(&e.path);
        let t = fnt::read_tensor(&tpath)?;
        if t.dims.len() != 3 {
            return Err(Error::corrupt(
                &tpath,
                format!("expected rank-3 pixel tensor, got rank {}", t.dims.len()),
            ));
        }
        let (h, w, c) = (t.dims[0], t.dims[1], t.dims[2]);
        let pixels = Array3::from_shape_vec((h, w, c), t.data)
            .map_err(|err| Error::corrupt(&tpath, err.to_string()))?;
        let sample = Sample {
            sample_id: e.sample_id,
            identity: e.identity,
            pixels,
            split: e.split,
            augmented_from: e.augmented_from,
        };
        if !sample.pixels_in_range() {
            return Err(Error::corrupt(&tpath, "pixel values outside [0,1]"));
        }
        samples.push(sample);
    }
    Ok(Dataset { samples })
}

/// Write the `sample_id,identity` sidecar that accompanies an embedding matrix.
pub fn write_labels_csv(path: impl AsRef<Path>, labels: &[(u64, u32)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "sample_id,identity").map_err(|e| Error::io(path, e))?;
    for (sid, id) in labels {
        writeln!(w, "{sid},{id}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<(u64, u32)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = (i + 1) as u64;
        if i == 0 {
            if line.trim() != "sample_id,identity" {
                return Err(Error::parse(path, 1, "expected header `sample_id,identity`"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (a, b) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
        let sid = a
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::parse(path, lineno, format!("non-integer sample_id `{a}`")))?;
        let id = b
            .trim()
            .parse::<u32>()
            .map_err(|_| Error::parse(path, lineno, format!("non-integer identity `{b}`")))?;
        labels.push((sid, id));
    }
    Ok(labels)
}

/// Persist `sample.pixels` as an FNT1 file.
pub fn write_sample_tensor(path: impl AsRef<Path>, sample: &Sample) -> Result<()> {
    let (h, w, c) = sample.shape();
    let data = sample
        .pixels
        .as_slice()
        .expect("sample pixels are contiguous");
    fnt::write_tensor(path, &[h, w, c], data)
}
