//! Dataset directory layout and lossless round-trip I/O.
//!
//! A dataset directory holds `manifest.jsonl` (a header line followed by one
//! JSON record per sample), PPM images referenced by relative path, and one
//! JSON mask file per sample with run-length-encoded boolean grids.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TokenArError};
use crate::ppm;
use crate::scene::{Mask, Pose, SceneSample, SubjectSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: usize,
    pub k: usize,
    pub patch: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub palette_seed: u64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePaths {
    pub ref1: String,
    pub ref2: String,
    pub background: String,
    pub target: String,
    pub masks: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: usize,
    pub paths: SamplePaths,
    pub relation_id: u32,
    pub prompt: Vec<u32>,
    pub signatures: [Vec<u32>; 2],
    /// Per-subject similarity scores from the admission filter.
    pub scores: [f64; 2],
    pub subjects: [SubjectSpec; 2],
    pub ref_poses: [Pose; 2],
    pub target_poses: [Pose; 2],
    pub bg_seed: u64,
}

/// Mask sidecar file: run-length encoding over the row-major grid, starting
/// with a run of `false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub rows: usize,
    pub cols: usize,
    pub target_masks: [Vec<usize>; 2],
    pub ref_masks: [Vec<usize>; 2],
}

pub fn rle_encode(mask: &Mask) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &cell in &mask.cells {
        if cell == current {
            len += 1;
        } else {
            runs.push(len);
            current = cell;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize], rows: usize, cols: usize) -> Result<Mask> {
    let mut cells = Vec::with_capacity(rows * cols);
    let mut value = false;
    for &run in runs {
        cells.extend(std::iter::repeat(value).take(run));
        value = !value;
    }
    if cells.len() != rows * cols {
        return Err(TokenArError::invalid(format!(
            "run-length data covers {} cells, expected {}",
            cells.len(),
            rows * cols
        )));
    }
    Ok(Mask { rows, cols, cells })
}

/// Writes samples and metadata to `dir`, creating it if needed.
pub fn write_dataset(
    samples: &[(SceneSample, [f64; 2])],
    dir: &Path,
    header: &DatasetHeader,
) -> Result<()> {
    if header.count != samples.len() {
        return Err(TokenArError::invalid(format!(
            "header count {} does not match sample count {}",
            header.count,
            samples.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| TokenArError::io(dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = Vec::new();
    writeln!(manifest, "{}", serde_json::to_string(header).unwrap())
        .map_err(|e| TokenArError::io(&manifest_path, e))?;

    for (i, (sample, scores)) in samples.iter().enumerate() {
        let paths = SamplePaths {
            ref1: format!("sample_{i:05}_ref1.ppm"),
            ref2: format!("sample_{i:05}_ref2.ppm"),
            background: format!("sample_{i:05}_bg.ppm"),
            target: format!("sample_{i:05}_target.ppm"),
            masks: format!("sample_{i:05}_masks.json"),
        };
        ppm::write_ppm(&dir.join(&paths.ref1), &sample.ref_images[0])?;
        ppm::write_ppm(&dir.join(&paths.ref2), &sample.ref_images[1])?;
        ppm::write_ppm(&dir.join(&paths.background), &sample.background)?;
        ppm::write_ppm(&dir.join(&paths.target), &sample.target)?;

        let mask_file = MaskFile {
            rows: sample.masks[0].rows,
            cols: sample.masks[0].cols,
            target_masks: [rle_encode(&sample.masks[0]), rle_encode(&sample.masks[1])],
            ref_masks: [rle_encode(&sample.ref_masks[0]), rle_encode(&sample.ref_masks[1])],
        };
        let mask_path = dir.join(&paths.masks);
        fs::write(&mask_path, serde_json::to_vec(&mask_file).unwrap())
            .map_err(|e| TokenArError::io(&mask_path, e))?;

        let record = SampleRecord {
            id: i,
            paths,
            relation_id: sample.relation_id,
            prompt: sample.prompt.clone(),
            signatures: [
                sample.subjects[0].signature.clone(),
                sample.subjects[1].signature.clone(),
            ],
            scores: *scores,
            subjects: sample.subjects.clone(),
            ref_poses: sample.ref_poses,
            target_poses: sample.target_poses,
            bg_seed: sample.bg_seed,
        };
        writeln!(manifest, "{}", serde_json::to_string(&record).unwrap())
            .map_err(|e| TokenArError::io(&manifest_path, e))?;
    }
    fs::write(&manifest_path, manifest).map_err(|e| TokenArError::io(&manifest_path, e))
}

/// Parses a manifest without touching the referenced files. Validates that
/// the header count matches the number of record lines.
pub fn read_manifest(dir: &Path) -> Result<(DatasetHeader, Vec<SampleRecord>)> {
    let path = dir.join("manifest.jsonl");
    let file = fs::File::open(&path).map_err(|e| TokenArError::io(&path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = match lines.next() {
        Some(Ok(l)) => l,
        Some(Err(e)) => return Err(TokenArError::io(&path, e)),
        None => return Err(TokenArError::format(&path, "empty manifest")),
    };
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| TokenArError::format(&path, format!("line 1: {e}")))?;
    let mut records = Vec::with_capacity(header.count);
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| TokenArError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| TokenArError::format(&path, format!("line {}: {e}", idx + 2)))?;
        records.push(record);
    }
    if records.len() != header.count {
        return Err(TokenArError::format(
            &path,
            format!(
                "header count {} does not match {} record lines",
                header.count,
                records.len()
            ),
        ));
    }
    Ok((header, records))
}

/// Loads the full dataset: manifest plus every referenced image and mask.
pub fn read_dataset(dir: &Path) -> Result<(DatasetHeader, Vec<(SceneSample, [f64; 2])>)> {
    let (header, records) = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(records.len());
    for record in records {
        let mask_path = dir.join(&record.paths.masks);
        let mask_bytes = fs::read(&mask_path).map_err(|e| TokenArError::io(&mask_path, e))?;
        let mask_file: MaskFile = serde_json::from_slice(&mask_bytes)
            .map_err(|e| TokenArError::format(&mask_path, e.to_string()))?;
        let decode = |runs: &[usize]| rle_decode(runs, mask_file.rows, mask_file.cols);
        let sample = SceneSample {
            ref_images: [
                ppm::read_ppm(&dir.join(&record.paths.ref1))?,
                ppm::read_ppm(&dir.join(&record.paths.ref2))?,
            ],
            background: ppm::read_ppm(&dir.join(&record.paths.background))?,
            target: ppm::read_ppm(&dir.join(&record.paths.target))?,
            masks: [decode(&mask_file.target_masks[0])?, decode(&mask_file.target_masks[1])?],
            ref_masks: [decode(&mask_file.ref_masks[0])?, decode(&mask_file.ref_masks[1])?],
            relation_id: record.relation_id,
            prompt: record.prompt,
            subjects: record.subjects,
            ref_poses: record.ref_poses,
            target_poses: record.target_poses,
            bg_seed: record.bg_seed,
        };
        samples.push((sample, record.scores));
    }
    Ok((header, samples))
}

/// Generation statistics written next to a freshly generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub candidates: usize,
    pub passed: usize,
    pub pass_rate: f64,
    pub delta: f64,
    pub relation_histogram: Vec<usize>,
}

pub fn write_stats(dir: &Path, stats: &DatasetStats) -> Result<()> {
    let path = dir.join("stats.json");
    fs::write(&path, serde_json::to_vec_pretty(stats).unwrap())
        .map_err(|e| TokenArError::io(&path, e))
}

pub fn dataset_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}
