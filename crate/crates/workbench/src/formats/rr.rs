// SPDX-License-Identifier: MIT OR Apache-2.0

//! Recovery-rate tables and attention profiles as CSV.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crosstrace_core::model::{Category, Component};
use crosstrace_core::trace::{AttentionProfile, RRCell, RRGrid};

use crate::error::{WbError, WbResult};

/// One CSV row. The last two columns extend the minimal schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RRRow {
    pub component: String,
    pub layer: usize,
    pub category: String,
    pub mean_rr: Option<f64>,
    pub std: f64,
    pub n_included: usize,
    pub n_excluded: usize,
    pub n_skipped: usize,
    pub mean_rr_clamped: Option<f64>,
}

fn csv_err(path: &Path, e: csv::Error) -> WbError {
    WbError::format(path, format!("csv: {e}"))
}

pub fn grid_to_csv(grid: &RRGrid) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for ((c, l, k), cell) in &grid.cells {
        w.serialize(RRRow {
            component: c.label().into(),
            layer: *l,
            category: k.label().into(),
            mean_rr: cell.mean_rr,
            std: cell.std,
            n_included: cell.n_included,
            n_excluded: cell.n_excluded,
            n_skipped: cell.n_skipped,
            mean_rr_clamped: cell.mean_rr_clamped,
        })
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}

pub fn write_grid(path: &Path, grid: &RRGrid) -> WbResult<()> {
    crate::formats::write_text(path, &grid_to_csv(grid))
}

/// Reads a table back. `n_layers` is one more than the deepest layer seen.
pub fn read_grid(path: &Path) -> WbResult<RRGrid> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut cells = BTreeMap::new();
    let mut n_layers = 0;
    for (i, row) in r.deserialize::<RRRow>().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| WbError::format(path, format!("row {}: unknown {what}", i + 1));
        let c = Component::from_label(&row.component).ok_or_else(|| bad("component"))?;
        let k = Category::from_label(&row.category).ok_or_else(|| bad("category"))?;
        n_layers = n_layers.max(row.layer + 1);
        cells.insert(
            (c, row.layer, k),
            RRCell {
                mean_rr: row.mean_rr,
                std: row.std,
                n_included: row.n_included,
                n_excluded: row.n_excluded,
                n_skipped: row.n_skipped,
                mean_rr_clamped: row.mean_rr_clamped,
            },
        );
    }
    Ok(RRGrid { n_layers, cells })
}

#[derive(Debug, Serialize)]
struct ProfileRow {
    layer: usize,
    to_object_visual: f64,
    to_textual_object: f64,
    n_samples: usize,
}

pub fn profile_to_csv(p: &AttentionProfile) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (layer, (ov, to)) in p.to_object_visual.iter().zip(&p.to_textual_object).enumerate() {
        w.serialize(ProfileRow {
            layer,
            to_object_visual: *ov,
            to_textual_object: *to,
            n_samples: p.n_samples,
        })
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}
