//! Row-compressed sparse matrices, a row-at-a-time builder, and Matrix
//! Market I/O.
//!
//! Values are written in the text format with Rust's shortest round-trip
//! float formatting, so an export/import cycle reproduces every entry
//! bit for bit.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("row {0} set more than once")]
    DuplicateRow(usize),
    #[error("row {0} never set")]
    MissingRow(usize),
    #[error("row {0}: column indices must be strictly increasing")]
    UnsortedColumns(usize),
    #[error("row {0}: column {1} out of bounds for {2} columns")]
    ColumnOutOfRange(usize, usize, usize),
    #[error("row {0}: {1} columns but {2} values")]
    LengthMismatch(usize, usize, usize),
    #[error("row index {0} out of bounds for {1} rows")]
    RowOutOfRange(usize, usize),
}

/// CSR matrix with per-row sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Assembles from raw CSR arrays; validates shape and ordering.
    pub fn from_csr(
        nrows: usize,
        ncols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(row_ptr.len(), nrows + 1);
        assert_eq!(*row_ptr.last().unwrap(), col_idx.len());
        assert_eq!(col_idx.len(), values.len());
        for i in 0..nrows {
            let row = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            assert!(row.windows(2).all(|w| w[0] < w[1]), "row {i} not sorted");
            if let Some(&last) = row.last() {
                assert!(last < ncols);
            }
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Sums duplicate entries; used by the Matrix Market importer.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(i, j, v) in &sorted {
            assert!(i < nrows && j < ncols, "entry ({i},{j}) out of bounds");
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self::from_csr(nrows, ncols, row_ptr, col_idx, values)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    /// Entry (i, j), zero when outside the stored structure.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                triplets.push((j, i, v));
            }
        }
        SparseMatrix::from_triplets(self.ncols, self.nrows, &triplets)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut dense = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                dense[(i, j)] = v;
            }
        }
        dense
    }
}

/// Largest absolute entry difference between two matrices, treating entries
/// missing from either structure as zero.
pub fn max_abs_diff(a: &SparseMatrix, b: &SparseMatrix) -> f64 {
    assert_eq!((a.nrows, a.ncols), (b.nrows, b.ncols), "shape mismatch");
    let mut max = 0.0f64;
    for i in 0..a.nrows {
        let (ac, av) = a.row(i);
        let (bc, bv) = b.row(i);
        let (mut ka, mut kb) = (0, 0);
        while ka < ac.len() || kb < bc.len() {
            let ja = ac.get(ka).copied().unwrap_or(usize::MAX);
            let jb = bc.get(kb).copied().unwrap_or(usize::MAX);
            let diff = match ja.cmp(&jb) {
                std::cmp::Ordering::Equal => {
                    ka += 1;
                    kb += 1;
                    av[ka - 1] - bv[kb - 1]
                }
                std::cmp::Ordering::Less => {
                    ka += 1;
                    av[ka - 1]
                }
                std::cmp::Ordering::Greater => {
                    kb += 1;
                    bv[kb - 1]
                }
            };
            max = max.max(diff.abs());
        }
    }
    max
}

/// Accepts fully formed rows in any order, exactly once each.
#[derive(Debug)]
pub struct RowBuilder {
    nrows: usize,
    ncols: usize,
    rows: Vec<Option<(Vec<usize>, Vec<f64>)>>,
}

impl RowBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            rows: (0..nrows).map(|_| None).collect(),
        }
    }

    pub fn set_row(&mut self, i: usize, cols: Vec<usize>, vals: Vec<f64>) -> Result<(), SparseError> {
        if i >= self.nrows {
            return Err(SparseError::RowOutOfRange(i, self.nrows));
        }
        if self.rows[i].is_some() {
            return Err(SparseError::DuplicateRow(i));
        }
        if cols.len() != vals.len() {
            return Err(SparseError::LengthMismatch(i, cols.len(), vals.len()));
        }
        if !cols.windows(2).all(|w| w[0] < w[1]) {
            return Err(SparseError::UnsortedColumns(i));
        }
        if let Some(&last) = cols.last() {
            if last >= self.ncols {
                return Err(SparseError::ColumnOutOfRange(i, last, self.ncols));
            }
        }
        self.rows[i] = Some((cols, vals));
        Ok(())
    }

    pub fn finish(self) -> Result<SparseMatrix, SparseError> {
        let mut row_ptr = Vec::with_capacity(self.nrows + 1);
        row_ptr.push(0);
        let mut nnz = 0;
        for (i, row) in self.rows.iter().enumerate() {
            match row {
                Some((cols, _)) => nnz += cols.len(),
                None => return Err(SparseError::MissingRow(i)),
            }
            row_ptr.push(nnz);
        }
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for row in self.rows {
            let (cols, vals) = row.unwrap();
            col_idx.extend_from_slice(&cols);
            values.extend_from_slice(&vals);
        }
        Ok(SparseMatrix::from_csr(self.nrows, self.ncols, row_ptr, col_idx, values))
    }
}

#[derive(Debug, Error)]
pub enum MatrixMarketError {
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
    #[error("line {0}: {1}")]
    Parse(usize, String),
    #[error("unsupported header: {0}")]
    UnsupportedHeader(String),
}

/// Writes coordinate-format Matrix Market (real, general, 1-based), with
/// `key=value` metadata as leading comment lines.
pub fn write_matrix_market<W: Write>(
    m: &SparseMatrix,
    metadata: &[(&str, String)],
    mut out: W,
) -> io::Result<()> {
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    for (key, value) in metadata {
        writeln!(out, "% {key}={value}")?;
    }
    writeln!(out, "{} {} {}", m.nrows, m.ncols, m.nnz())?;
    for i in 0..m.nrows {
        let (cols, vals) = m.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            writeln!(out, "{} {} {}", i + 1, j + 1, v)?;
        }
    }
    Ok(())
}

pub fn save_matrix_market(
    m: &SparseMatrix,
    metadata: &[(&str, String)],
    path: &Path,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix_market(m, metadata, &mut w)?;
    w.flush()
}

/// Reads coordinate-format Matrix Market; returns the matrix and any
/// `key=value` pairs found in comment lines.
pub fn read_matrix_market<R: BufRead>(
    reader: R,
) -> Result<(SparseMatrix, Vec<(String, String)>), MatrixMarketError> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| MatrixMarketError::Parse(1, "empty file".into()))?;
    let header = header?;
    let head_fields: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
    let expected = ["%%matrixmarket", "matrix", "coordinate", "real", "general"];
    if head_fields != expected {
        return Err(MatrixMarketError::UnsupportedHeader(header));
    }
    let mut metadata = Vec::new();
    let mut sizes: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(comment) = text.strip_prefix('%') {
            if let Some((key, value)) = comment.trim().split_once('=') {
                metadata.push((key.trim().to_string(), value.trim().to_string()));
            }
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        let parse_index = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| MatrixMarketError::Parse(lineno, format!("bad index {s:?}: {e}")))
        };
        match sizes {
            None => {
                if fields.len() != 3 {
                    return Err(MatrixMarketError::Parse(lineno, "expected size line".into()));
                }
                sizes = Some((
                    parse_index(fields[0])?,
                    parse_index(fields[1])?,
                    parse_index(fields[2])?,
                ));
                triplets.reserve(sizes.unwrap().2);
            }
            Some((nrows, ncols, _)) => {
                if fields.len() != 3 {
                    return Err(MatrixMarketError::Parse(lineno, "expected entry line".into()));
                }
                let i = parse_index(fields[0])?;
                let j = parse_index(fields[1])?;
                let v: f64 = fields[2].parse().map_err(|e| {
                    MatrixMarketError::Parse(lineno, format!("bad value {:?}: {e}", fields[2]))
                })?;
                if i == 0 || j == 0 || i > nrows || j > ncols {
                    return Err(MatrixMarketError::Parse(
                        lineno,
                        format!("entry ({i},{j}) outside {nrows}x{ncols}"),
                    ));
                }
                triplets.push((i - 1, j - 1, v));
            }
        }
    }
    let (nrows, ncols, nnz) = sizes.ok_or_else(|| MatrixMarketError::Parse(0, "no size line".into()))?;
    if triplets.len() != nnz {
        return Err(MatrixMarketError::Parse(
            0,
            format!("size line promised {nnz} entries, found {}", triplets.len()),
        ));
    }
    Ok((SparseMatrix::from_triplets(nrows, ncols, &triplets), metadata))
}

pub fn load_matrix_market(
    path: &Path,
) -> Result<(SparseMatrix, Vec<(String, String)>), MatrixMarketError> {
    read_matrix_market(BufReader::new(File::open(path)?))
}
