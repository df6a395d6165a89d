//! Scorer backed by an external command speaking a file protocol.
//!
//! For each batch a fresh work directory receives `tNNNNN.png` tiles and a
//! `batch.json` manifest; the command is run through `sh -c` with the
//! directory appended as its last argument. Segmenters write
//! `tNNNNN.pmap` per tile, classifiers write `scores.json` mapping tile id
//! to score.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde::Serialize;

use super::{BatchError, Scorer, ScorerMode, Tile};
use crate::error::ScorerError;
use crate::io::{decode_pmap, encode_png_rgb};
use crate::types::ProbMap;

pub struct ExternalScorer {
    id: String,
    command: String,
    mode: ScorerMode,
}

#[derive(Serialize)]
struct Manifest<'a> {
    mode: &'a str,
    tiles: Vec<ManifestTile>,
}

#[derive(Serialize)]
struct ManifestTile {
    id: String,
    file: String,
    width: usize,
    height: usize,
    x: i64,
    y: i64,
}

fn tile_id(i: usize) -> String {
    format!("t{i:05}")
}

fn batch_err(index: usize, error: ScorerError) -> BatchError {
    BatchError { index, error }
}

impl ExternalScorer {
    pub fn new(id: impl Into<String>, command: impl Into<String>, mode: ScorerMode) -> Self {
        Self {
            id: id.into(),
            command: command.into(),
            mode,
        }
    }

    /// Writes the batch, runs the command and returns the work directory.
    fn run(&self, tiles: &[Tile]) -> Result<tempfile::TempDir, BatchError> {
        let other = |e: std::io::Error| batch_err(0, ScorerError::Other(format!("work directory: {e}")));
        let dir = tempfile::Builder::new().prefix("mitodet-batch-").tempdir().map_err(other)?;
        let mut manifest = Manifest {
            mode: match self.mode {
                ScorerMode::Segmentation => "segmentation",
                ScorerMode::Classification => "classification",
            },
            tiles: Vec::with_capacity(tiles.len()),
        };
        for (i, t) in tiles.iter().enumerate() {
            let id = tile_id(i);
            let file = format!("{id}.png");
            std::fs::write(dir.path().join(&file), encode_png_rgb(&t.image)).map_err(other)?;
            manifest.tiles.push(ManifestTile {
                id,
                file,
                width: t.image.width(),
                height: t.image.height(),
                x: t.origin.0,
                y: t.origin.1,
            });
        }
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        std::fs::write(dir.path().join("batch.json"), json).map_err(other)?;

        let status = Command::new("sh")
            .arg("-c")
            .arg(format!("{} \"$0\"", self.command))
            .arg(dir.path())
            .status()
            .map_err(|e| batch_err(0, ScorerError::Other(format!("cannot start `{}`: {e}", self.command))))?;
        if !status.success() {
            return Err(batch_err(0, ScorerError::Exit { code: status.code() }));
        }
        Ok(dir)
    }
}

fn read_output(dir: &Path, name: &str, index: usize) -> Result<Vec<u8>, BatchError> {
    std::fs::read(dir.join(name))
        .map_err(|e| batch_err(index, ScorerError::Protocol(format!("cannot read {name}: {e}"))))
}

impl Scorer for ExternalScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn mode(&self) -> ScorerMode {
        self.mode
    }

    fn parallel_safe(&self) -> bool {
        false
    }

    fn segment(&self, tiles: &[Tile]) -> Result<Vec<ProbMap>, BatchError> {
        if self.mode != ScorerMode::Segmentation {
            return Err(batch_err(0, ScorerError::Mode("segmentation")));
        }
        let dir = self.run(tiles)?;
        (0..tiles.len())
            .map(|i| {
                let bytes = read_output(dir.path(), &format!("{}.pmap", tile_id(i)), i)?;
                decode_pmap(&bytes).map_err(|e| batch_err(i, ScorerError::Protocol(e.to_string())))
            })
            .collect()
    }

    fn classify(&self, tiles: &[Tile]) -> Result<Vec<f64>, BatchError> {
        if self.mode != ScorerMode::Classification {
            return Err(batch_err(0, ScorerError::Mode("classification")));
        }
        let dir = self.run(tiles)?;
        let bytes = read_output(dir.path(), "scores.json", 0)?;
        let scores: BTreeMap<String, f64> = serde_json::from_slice(&bytes)
            .map_err(|e| batch_err(0, ScorerError::Protocol(format!("scores.json: {e}"))))?;
        (0..tiles.len())
            .map(|i| {
                let s = *scores
                    .get(&tile_id(i))
                    .ok_or_else(|| batch_err(i, ScorerError::Protocol(format!("no score for {}", tile_id(i)))))?;
                if (0.0..=1.0).contains(&s) {
                    Ok(s)
                } else {
                    Err(batch_err(i, ScorerError::Range(s)))
                }
            })
            .collect()
    }
}
