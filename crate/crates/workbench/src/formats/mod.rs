// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod checkpoint;
pub mod dataset;
pub mod rr;
pub mod svg;

use std::path::Path;

use serde::Serialize;

use crate::error::{IoContext, WbResult};

pub fn write_text(path: &Path, text: &str) -> WbResult<()> {
    std::fs::write(path, text).at(path)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> WbResult<()> {
    let mut s = serde_json::to_string_pretty(value).expect("json serializes");
    s.push('\n');
    write_text(path, &s)
}

/// Appends one JSON line per item.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> WbResult<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("json serializes"));
        s.push('\n');
    }
    write_text(path, &s)
}
