use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::labels::CellValue;
use super::names::normalize_name;

/// Dense participant × restaurant table stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellTable<L> {
    rows: Vec<String>,
    cols: Vec<String>,
    cells: Vec<L>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("table shape mismatch: {rows}×{cols} keys but {cells} cells")]
pub struct ShapeError {
    pub rows: usize,
    pub cols: usize,
    pub cells: usize,
}

impl<L: CellValue> CellTable<L> {
    pub fn new(rows: Vec<String>, cols: Vec<String>, cells: Vec<L>) -> Result<Self, ShapeError> {
        if rows.len() * cols.len() != cells.len() {
            return Err(ShapeError {
                rows: rows.len(),
                cols: cols.len(),
                cells: cells.len(),
            });
        }
        Ok(CellTable { rows, cols, cells })
    }

    pub fn filled(rows: Vec<String>, cols: Vec<String>, value: L) -> Self {
        let cells = vec![value; rows.len() * cols.len()];
        CellTable { rows, cols, cells }
    }

    pub fn neutral(rows: Vec<String>, cols: Vec<String>) -> Self {
        Self::filled(rows, cols, L::neutral())
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn cols(&self) -> &[String] {
        &self.cols
    }

    pub fn cells(&self) -> &[L] {
        &self.cells
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn get(&self, row: usize, col: usize) -> &L {
        &self.cells[row * self.cols.len() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: L) {
        let n = self.cols.len();
        self.cells[row * n + col] = value;
    }

    pub fn row_index(&self, name: &str) -> Option<usize> {
        let key = normalize_name(name);
        self.rows.iter().position(|r| normalize_name(r) == key)
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        let key = normalize_name(name);
        self.cols.iter().position(|c| normalize_name(c) == key)
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = &L> + '_ {
        (0..self.rows.len()).map(move |r| self.get(r, col))
    }

    /// `(row key, col key, value)` for every cell, row-major.
    pub fn triplets(&self) -> impl Iterator<Item = (&str, &str, &L)> + '_ {
        self.rows.iter().enumerate().flat_map(move |(i, r)| {
            self.cols
                .iter()
                .enumerate()
                .map(move |(j, c)| (r.as_str(), c.as_str(), self.get(i, j)))
        })
    }

    pub fn map<M: CellValue>(&self, f: impl Fn(&L) -> M) -> CellTable<M> {
        CellTable {
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            cells: self.cells.iter().map(f).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TableDoc<L> {
    rows: Vec<String>,
    cols: Vec<String>,
    cells: Vec<Vec<L>>,
}

impl<L: CellValue + Serialize> Serialize for CellTable<L> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let n = self.cols.len().max(1);
        let cells = if self.cols.is_empty() {
            vec![Vec::new(); self.rows.len()]
        } else {
            self.cells.chunks(n).map(|c| c.to_vec()).collect()
        };
        TableDoc {
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            cells,
        }
        .serialize(s)
    }
}

impl<'de, L: CellValue + DeserializeOwned> Deserialize<'de> for CellTable<L> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = TableDoc::<L>::deserialize(d)?;
        if doc.cells.len() != doc.rows.len() {
            return Err(serde::de::Error::custom(format!(
                "table has {} row keys but {} cell rows",
                doc.rows.len(),
                doc.cells.len()
            )));
        }
        if let Some((i, row)) = doc
            .cells
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != doc.cols.len())
        {
            return Err(serde::de::Error::custom(format!(
                "table row {i} has {} cells, expected {}",
                row.len(),
                doc.cols.len()
            )));
        }
        let cells = doc.cells.into_iter().flatten().collect();
        CellTable::new(doc.rows, doc.cols, cells).map_err(serde::de::Error::custom)
    }
}
