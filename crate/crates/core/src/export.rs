//! On-disk artifacts: graymaps, lossless CSVs, sidecars and run manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{KgsError, Result};
use crate::splat::{HeatmapStack, RenderConfig};
use crate::topology::PriorAdjacency;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const HEATMAP_SIDECAR_FILE: &str = "heatmaps.json";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| KgsError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| KgsError::io(dir, e))
}

/// Binary 8-bit graymap; values are clamped to [0, 1] and scaled to 0..=255.
pub fn pgm_bytes(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// One row per pixel row, shortest round-trip formatting.
pub fn grid_csv(values: &[f64], width: usize) -> String {
    let mut out = String::with_capacity(values.len() * 20);
    for row in values.chunks(width) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Parses a CSV written by [`grid_csv`] into row-major values and the row count.
pub fn parse_grid_csv(text: &str) -> Result<(Vec<f64>, usize)> {
    let mut values = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .enumerate()
            .map(|(col, cell)| {
                cell.trim().parse::<f64>().map_err(|e| KgsError::Parse {
                    line: line_no + 1,
                    column: col + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(KgsError::Dimension(format!("row {} has {} cells", line_no + 1, row.len())));
        }
        values.extend(row);
        rows += 1;
    }
    Ok((values, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub frames: usize,
    pub views: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub config: RenderConfig,
    pub source: Option<String>,
    pub files: Vec<String>,
}

fn heatmap_stem(view: &str, t: usize) -> String {
    format!("heatmap_{}_{t:04}", view.to_lowercase())
}

/// Writes `heatmap_<view>_<frame>.pgm` and `.csv` for every (view, frame)
/// plus a JSON sidecar; returns the sidecar path.
pub fn write_heatmaps(dir: impl AsRef<Path>, stack: &HeatmapStack) -> Result<PathBuf> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let names: Vec<String> = stack.config.views.iter().map(|v| v.to_string()).collect();
    let mut files = Vec::with_capacity(2 * stack.views * stack.frames);
    for (view, name) in names.iter().enumerate() {
        for t in 0..stack.frames {
            let values = stack.frame(view, t);
            let stem = heatmap_stem(name, t);
            write_file(&dir.join(format!("{stem}.pgm")), &pgm_bytes(values, stack.height, stack.width))?;
            write_file(&dir.join(format!("{stem}.csv")), grid_csv(values, stack.width).as_bytes())?;
            files.push(format!("{stem}.pgm"));
            files.push(format!("{stem}.csv"));
        }
    }
    let sidecar = HeatmapSidecar {
        frames: stack.frames,
        views: names,
        height: stack.height,
        width: stack.width,
        config: stack.config.clone(),
        source: stack.source.clone(),
        files,
    };
    let path = dir.join(HEATMAP_SIDECAR_FILE);
    write_json(&path, &sidecar)?;
    Ok(path)
}

pub fn write_prior_csv(path: impl AsRef<Path>, prior: &PriorAdjacency) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(path, grid_csv(&prior.matrix, prior.joints).as_bytes())
}

pub fn read_prior_csv(path: impl AsRef<Path>) -> Result<PriorAdjacency> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| KgsError::io(path, e))?;
    let (matrix, rows) = parse_grid_csv(&text)?;
    if rows * rows != matrix.len() {
        return Err(KgsError::Dimension(format!("{}: prior is not square", path.display())));
    }
    Ok(PriorAdjacency {
        joints: rows,
        matrix,
        source: Some(path.display().to_string()),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_file(path, (text + "\n").as_bytes())
}

/// Provenance record written into an output directory before anything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub output: PathBuf,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, output: impl Into<PathBuf>) -> Self {
        Self {
            command: command.into(),
            config: None,
            inputs: Vec::new(),
            output: output.into(),
            seed: None,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    /// Creates the output directory and writes (or replaces) its manifest.
    pub fn write(&self) -> Result<PathBuf> {
        create_dir(&self.output)?;
        let path = self.output.join(RUN_MANIFEST_FILE);
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KgsError::io(path, e))?;
        serde_json::from_str(&text).map_err(KgsError::from_json)
    }
}
