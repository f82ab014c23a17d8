// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset files: a JSON header line followed by one JSON record per sample
//! (train, then val, then test).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crosstrace_core::model::Category;
use crosstrace_core::numerics::Matrix;
use crosstrace_core::synth::{Dataset, DatasetConfig, GridImage, PlacedObject, QASample};

use crate::error::{IoContext, WbError, WbResult};

pub const FORMAT: &str = "crosstrace-dataset";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub grid: [usize; 2],
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_object_cells: usize,
    pub positive_rate: f64,
}

impl From<&DatasetConfig> for DatasetHeader {
    fn from(c: &DatasetConfig) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            seed: c.seed,
            grid: [c.grid.0, c.grid.1],
            n_train: c.n_train,
            n_val: c.n_val,
            n_test: c.n_test,
            min_objects: c.min_objects,
            max_objects: c.max_objects,
            max_object_cells: c.max_object_cells,
            positive_rate: c.positive_rate,
        }
    }
}

impl DatasetHeader {
    pub fn config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            grid: (self.grid[0], self.grid[1]),
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            max_object_cells: self.max_object_cells,
            positive_rate: self.positive_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObjectRecord {
    class: usize,
    cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    split: String,
    index: usize,
    rows: usize,
    cols: usize,
    cells: Vec<Vec<f64>>,
    objects: Vec<ObjectRecord>,
    question: Vec<usize>,
    queried: usize,
    answer: bool,
    categories: Vec<String>,
    non_contiguous: bool,
}

impl SampleRecord {
    fn new(split: &str, index: usize, s: &QASample) -> Self {
        let img = &s.image;
        Self {
            split: split.into(),
            index,
            rows: img.rows,
            cols: img.cols,
            cells: (0..img.cells.rows()).map(|r| img.cells.row(r).to_vec()).collect(),
            objects: img
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    class: o.class,
                    cells: o.cells.clone(),
                })
                .collect(),
            question: s.question.clone(),
            queried: s.queried,
            answer: s.answer,
            categories: s.categories.iter().map(|c| c.label().to_string()).collect(),
            non_contiguous: s.non_contiguous,
        }
    }

    fn into_sample(self) -> Result<QASample, String> {
        let refs: Vec<&[f64]> = self.cells.iter().map(Vec::as_slice).collect();
        let cells = Matrix::from_rows(&refs).map_err(|e| e.to_string())?;
        if cells.rows() != self.rows * self.cols {
            return Err(format!("{} cells for a {}x{} grid", cells.rows(), self.rows, self.cols));
        }
        let categories = self
            .categories
            .iter()
            .map(|l| Category::from_label(l).ok_or_else(|| format!("unknown category {l:?}")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(QASample {
            image: GridImage {
                rows: self.rows,
                cols: self.cols,
                cells,
                objects: self
                    .objects
                    .into_iter()
                    .map(|o| PlacedObject {
                        class: o.class,
                        cells: o.cells,
                    })
                    .collect(),
            },
            question: self.question,
            queried: self.queried,
            answer: self.answer,
            categories,
            non_contiguous: self.non_contiguous,
        })
    }
}

pub fn write(path: &Path, config: &DatasetConfig, ds: &Dataset) -> WbResult<()> {
    let f = std::fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(f);
    let line = |w: &mut BufWriter<std::fs::File>, v: &str| writeln!(w, "{v}").at(path);
    line(&mut w, &serde_json::to_string(&DatasetHeader::from(config)).expect("header"))?;
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        for (i, s) in split.iter().enumerate() {
            line(&mut w, &serde_json::to_string(&SampleRecord::new(name, i, s)).expect("record"))?;
        }
    }
    w.flush().at(path)
}

pub fn read(path: &Path) -> WbResult<(DatasetHeader, Dataset)> {
    let f = std::fs::File::open(path).at(path)?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| WbError::format(path, "empty dataset file"))?
        .at(path)?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| WbError::format(path, format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(WbError::format(
            path,
            format!("unsupported dataset {} v{}", header.format, header.version),
        ));
    }
    let mut ds = Dataset {
        train: Vec::with_capacity(header.n_train),
        val: Vec::with_capacity(header.n_val),
        test: Vec::with_capacity(header.n_test),
    };
    for (n, line) in lines.enumerate() {
        let line = line.at(path)?;
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| WbError::format(path, format!("line {}: {e}", n + 2)))?;
        let target = match rec.split.as_str() {
            "train" => &mut ds.train,
            "val" => &mut ds.val,
            "test" => &mut ds.test,
            other => return Err(WbError::format(path, format!("line {}: unknown split {other:?}", n + 2))),
        };
        if rec.index != target.len() {
            return Err(WbError::format(path, format!("line {}: sample index {} out of order", n + 2, rec.index)));
        }
        target.push(rec.into_sample().map_err(|e| WbError::format(path, format!("line {}: {e}", n + 2)))?);
    }
    if (ds.train.len(), ds.val.len(), ds.test.len()) != (header.n_train, header.n_val, header.n_test) {
        return Err(WbError::format(path, "split sizes do not match the header"));
    }
    Ok((header, ds))
}
