//! Box lists as CSV, for `femto eval` without a model or dataset.

use std::path::Path;

use serde::Deserialize;

use femtodet::net::Detection;
use femtodet::train::GtBox;

use crate::CliError;

#[derive(Deserialize)]
struct GtRow {
    image: usize,
    class: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Deserialize)]
struct PredRow {
    image: usize,
    class: usize,
    score: f64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

fn rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>, CliError> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    rd.deserialize()
        .collect::<Result<Vec<R>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn check_box(b: [f64; 4], path: &Path) -> Result<[f64; 4], CliError> {
    if b.iter().all(|v| v.is_finite()) && b[2] >= b[0] && b[3] >= b[1] {
        Ok(b)
    } else {
        Err(CliError::Input(format!("{}: malformed box {b:?}", path.display())))
    }
}

pub fn read_gt(path: &Path) -> Result<Vec<(usize, GtBox)>, CliError> {
    rows::<GtRow>(path)?
        .into_iter()
        .map(|r| {
            Ok((
                r.image,
                GtBox {
                    bbox: check_box([r.x1, r.y1, r.x2, r.y2], path)?,
                    class_id: r.class,
                },
            ))
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<(usize, Detection)>, CliError> {
    rows::<PredRow>(path)?
        .into_iter()
        .map(|r| {
            if !r.score.is_finite() {
                return Err(CliError::Input(format!("{}: score {}", path.display(), r.score)));
            }
            Ok((
                r.image,
                Detection {
                    bbox: check_box([r.x1, r.y1, r.x2, r.y2], path)?,
                    score: r.score,
                    class_id: r.class,
                },
            ))
        })
        .collect()
}

/// Per-image lists; `n` is raised to cover every image index seen.
pub fn per_image<T>(items: Vec<(usize, T)>, n: usize) -> Vec<Vec<T>> {
    let n = items.iter().map(|(i, _)| i + 1).max().unwrap_or(0).max(n);
    let mut out: Vec<Vec<T>> = (0..n).map(|_| Vec::new()).collect();
    for (i, t) in items {
        out[i].push(t);
    }
    out
}
