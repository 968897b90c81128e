//! Memory-bounded dataset access.
//!
//! A [`ChunkedDataset`] is an immutable, column-typed table addressed by
//! stable row ids `0..n_rows` and organised in fixed-size blocks. Tables
//! ingested from CSV are spilled to a binary row-major cache file so that
//! later gathers can seek straight to the rows they need; nothing but the
//! current block cursor is held in memory. Small tables (simulation output,
//! tests) can also live in memory.
//!
//! Subsets are always gathered in ascending row order, so one gather is a
//! single forward scan over the blocks it touches.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::functionals::{FunctionalKind, FunctionalSpec};
use crate::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    GroupId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
        }
    }

    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
        }
    }

    pub fn group_id(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::GroupId,
        }
    }
}

/// Ordered list of typed columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema(pub Vec<ColumnSpec>);

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::invalid("schema has no columns"));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::invalid(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(Self(columns))
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|c| c.name == name)
    }
}

#[derive(Debug)]
struct SpillFile {
    path: PathBuf,
    _guard: Option<tempfile::TempPath>,
}

#[derive(Debug, Clone)]
enum Source {
    Memory(Arc<Vec<f64>>),
    Spill(Arc<SpillFile>),
}

/// Immutable, block-organised table. Cloning is cheap and clones share the
/// underlying storage (and access log, when enabled).
#[derive(Debug, Clone)]
pub struct ChunkedDataset {
    schema: Schema,
    levels: Vec<Vec<String>>,
    n_rows: usize,
    block_size: usize,
    source: Source,
    access_log: Option<Arc<Mutex<Vec<usize>>>>,
}

impl ChunkedDataset {
    /// In-memory table from row-major values. Categorical and group-id
    /// columns hold integral level codes; categorical dictionaries default to
    /// the codes' decimal strings unless set with [`Self::with_levels`].
    pub fn from_row_major(schema: Schema, values: Vec<f64>, block_size: usize) -> Result<Self> {
        let w = schema.width();
        if block_size == 0 {
            return Err(Error::invalid("block_size must be at least 1"));
        }
        if values.len() % w != 0 {
            return Err(Error::invalid("value count is not a multiple of the schema width"));
        }
        let n_rows = values.len() / w;
        let mut levels = vec![Vec::new(); w];
        for (c, col) in schema.columns().iter().enumerate() {
            let mut max_code = None;
            for r in 0..n_rows {
                let v = values[r * w + c];
                if !v.is_finite() {
                    return Err(Error::Ingest {
                        row: r + 1,
                        column: col.name.clone(),
                        message: "missing or non-finite value".into(),
                    });
                }
                if col.kind != ColumnKind::Numeric {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(Error::Ingest {
                            row: r + 1,
                            column: col.name.clone(),
                            message: format!("level code {v} is not a non-negative integer"),
                        });
                    }
                    max_code = Some(max_code.map_or(v as usize, |m: usize| m.max(v as usize)));
                }
            }
            if col.kind == ColumnKind::Categorical {
                levels[c] = (0..=max_code.unwrap_or(0)).map(|l| l.to_string()).collect();
            }
        }
        Ok(Self {
            schema,
            levels,
            n_rows,
            block_size,
            source: Source::Memory(Arc::new(values)),
            access_log: None,
        })
    }

    /// Replace the level dictionary of a categorical column.
    pub fn with_levels(mut self, column: &str, levels: Vec<String>) -> Result<Self> {
        let c = self
            .schema
            .index_of(column)
            .ok_or_else(|| Error::invalid(format!("no column `{column}`")))?;
        if self.schema.columns()[c].kind != ColumnKind::Categorical {
            return Err(Error::invalid(format!("column `{column}` is not categorical")));
        }
        if levels.len() < self.levels[c].len() {
            return Err(Error::invalid("dictionary is smaller than the codes in use"));
        }
        self.levels[c] = levels;
        Ok(self)
    }

    /// Record the id of every block touched by gathers from now on.
    pub fn with_access_log(mut self) -> Self {
        self.access_log = Some(Arc::new(Mutex::new(Vec::new())));
        self
    }

    /// Blocks touched so far, in access order (consecutive repeats collapsed
    /// within one gather).
    pub fn access_log(&self) -> Vec<usize> {
        self.access_log
            .as_ref()
            .map(|l| l.lock().unwrap_or_else(|e| e.into_inner()).clone())
            .unwrap_or_default()
    }

    pub fn clear_access_log(&self) {
        if let Some(l) = &self.access_log {
            l.lock().unwrap_or_else(|e| e.into_inner()).clear();
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.n_rows.div_ceil(self.block_size)
    }

    /// Row count of each block.
    pub fn block_sizes(&self) -> Vec<usize> {
        (0..self.n_blocks())
            .map(|b| (self.n_rows - b * self.block_size).min(self.block_size))
            .collect()
    }

    /// Level dictionary of a categorical or group-id column (empty for numeric).
    pub fn levels(&self, column: usize) -> &[String] {
        &self.levels[column]
    }

    pub fn is_in_memory(&self) -> bool {
        matches!(self.source, Source::Memory(_))
    }

    /// Visit rows with strictly increasing ids, each as a slice of raw
    /// column values. Blocks are read strictly front to back.
    pub fn for_each_row<F>(&self, ids: &[usize], mut f: F) -> Result<()>
    where
        F: FnMut(usize, &[f64]) -> Result<()>,
    {
        let w = self.schema.width();
        if let Some(&last) = ids.last() {
            if last >= self.n_rows {
                return Err(Error::Materialize(format!(
                    "row {last} is beyond n_rows = {}",
                    self.n_rows
                )));
            }
        }
        if ids.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Materialize("row ids must be strictly increasing".into()));
        }
        let mut blocks = Vec::new();
        let mut note_block = |id: usize| {
            let b = id / self.block_size;
            if blocks.last() != Some(&b) {
                blocks.push(b);
            }
        };
        match &self.source {
            Source::Memory(values) => {
                for &id in ids {
                    note_block(id);
                    f(id, &values[id * w..(id + 1) * w])?;
                }
            }
            Source::Spill(file) => {
                let mut reader = BufReader::with_capacity(1 << 16, File::open(&file.path)?);
                let mut pos: u64 = 0;
                let row_bytes = (w * 8) as u64;
                let mut buf = vec![0u8; w * 8];
                let mut row = vec![0.0f64; w];
                for &id in ids {
                    note_block(id);
                    let target = id as u64 * row_bytes;
                    if target != pos {
                        reader.seek_relative(target as i64 - pos as i64)?;
                    }
                    reader.read_exact(&mut buf)?;
                    pos = target + row_bytes;
                    for (v, chunk) in row.iter_mut().zip(buf.chunks_exact(8)) {
                        *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                    }
                    f(id, &row)?;
                }
            }
        }
        if let Some(log) = &self.access_log {
            log.lock().unwrap_or_else(|e| e.into_inner()).extend(blocks);
        }
        Ok(())
    }

    /// Stream every row in order.
    pub fn for_each_row_all<F>(&self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &[f64]) -> Result<()>,
    {
        // Visit one block at a time to keep the id buffer bounded.
        let mut ids = Vec::with_capacity(self.block_size.min(self.n_rows));
        for b in 0..self.n_blocks() {
            ids.clear();
            let start = b * self.block_size;
            ids.extend(start..(start + self.block_size).min(self.n_rows));
            self.for_each_row(&ids, &mut f)?;
        }
        Ok(())
    }

    /// Re-emit the table as CSV. Numbers use the shortest representation that
    /// parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(self.schema.columns().iter().map(|c| c.name.as_str()))?;
        let kinds: Vec<ColumnKind> = self.schema.columns().iter().map(|c| c.kind).collect();
        let mut fields: Vec<String> = Vec::with_capacity(kinds.len());
        self.for_each_row_all(|_, row| {
            fields.clear();
            for (c, (&v, kind)) in row.iter().zip(&kinds).enumerate() {
                fields.push(match kind {
                    ColumnKind::Numeric => format!("{v}"),
                    _ => self.levels[c]
                        .get(v as usize)
                        .cloned()
                        .unwrap_or_else(|| format!("{v}")),
                });
            }
            wtr.write_record(&fields)?;
            Ok(())
        })?;
        wtr.flush()?;
        Ok(())
    }
}

/// Streams rows into a binary spill file and yields a [`ChunkedDataset`].
pub struct DatasetWriter {
    schema: Schema,
    levels: Vec<Vec<String>>,
    block_size: usize,
    out: BufWriter<File>,
    path: tempfile::TempPath,
    n_rows: usize,
}

impl DatasetWriter {
    /// Spill into a fresh temporary file that lives as long as the dataset.
    pub fn create(schema: Schema, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::invalid("block_size must be at least 1"));
        }
        let (file, path) = tempfile::NamedTempFile::new()?.into_parts();
        let w = schema.width();
        Ok(Self {
            schema,
            levels: vec![Vec::new(); w],
            block_size,
            out: BufWriter::with_capacity(1 << 16, file),
            path,
            n_rows: 0,
        })
    }

    pub fn set_levels(&mut self, column: usize, levels: Vec<String>) {
        self.levels[column] = levels;
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.schema.width() {
            return Err(Error::invalid("row width does not match schema"));
        }
        for v in row {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.n_rows += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<ChunkedDataset> {
        self.out.flush()?;
        Ok(ChunkedDataset {
            schema: self.schema,
            levels: self.levels,
            n_rows: self.n_rows,
            block_size: self.block_size,
            source: Source::Spill(Arc::new(SpillFile {
                path: self.path.to_path_buf(),
                _guard: Some(self.path),
            })),
            access_log: None,
        })
    }
}

fn is_missing(token: &str) -> bool {
    matches!(token, "" | "NA" | "NaN" | "nan" | "null" | "NULL")
}

/// Ingest a CSV file in one streaming pass.
///
/// The header must name every schema column (extra columns are ignored).
/// Rows with missing values are rejected. Categorical and group-id levels are
/// numbered in order of first appearance, which fixes the dictionary (and the
/// dummy-coding reference level) for the lifetime of the dataset.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &Schema, block_size: usize) -> Result<ChunkedDataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    let mut positions = Vec::with_capacity(schema.width());
    for col in schema.columns() {
        let pos = header.iter().position(|h| h == col.name).ok_or_else(|| Error::Ingest {
            row: 0,
            column: col.name.clone(),
            message: "column missing from header".into(),
        })?;
        positions.push(pos);
    }
    let mut writer = DatasetWriter::create(schema.clone(), block_size)?;
    let mut dicts: Vec<HashMap<String, usize>> = vec![HashMap::new(); schema.width()];
    let mut levels: Vec<Vec<String>> = vec![Vec::new(); schema.width()];
    let mut row = vec![0.0; schema.width()];
    let mut record = csv::StringRecord::new();
    let mut n = 0usize;
    while rdr.read_record(&mut record)? {
        n += 1;
        for (c, col) in schema.columns().iter().enumerate() {
            let token = record.get(positions[c]).unwrap_or("");
            if is_missing(token) {
                return Err(Error::Ingest {
                    row: n,
                    column: col.name.clone(),
                    message: "missing value".into(),
                });
            }
            row[c] = match col.kind {
                ColumnKind::Numeric => {
                    let v: f64 = token.parse().map_err(|_| Error::Ingest {
                        row: n,
                        column: col.name.clone(),
                        message: format!("non-numeric token `{token}`"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Ingest {
                            row: n,
                            column: col.name.clone(),
                            message: format!("non-finite value `{token}`"),
                        });
                    }
                    v
                }
                ColumnKind::Categorical | ColumnKind::GroupId => {
                    let next = dicts[c].len();
                    let code = *dicts[c].entry(token.to_string()).or_insert_with(|| {
                        levels[c].push(token.to_string());
                        next
                    });
                    code as f64
                }
            };
        }
        writer.push_row(&row)?;
    }
    if n == 0 {
        return Err(Error::Ingest {
            row: 0,
            column: schema.columns()[0].name.clone(),
            message: "file has no data rows".into(),
        });
    }
    for (c, l) in levels.into_iter().enumerate() {
        writer.set_levels(c, l);
    }
    writer.finish()
}

/// One block of a partition, or one uniformly drawn subsample. Ids are
/// resampling units: rows, or whole clusters for grouped functionals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetIndex {
    pub subset_id: usize,
    pub row_ids: Vec<usize>,
    pub b: usize,
    pub n: usize,
}

/// A seeded random partition of `0..n` into `floor(n / b)` blocks of size
/// `b`; the remaining `n mod b` ids are left unassigned.
///
/// The permutation is stored as `u32` ids; subsets are built on demand.
#[derive(Debug, Clone)]
pub struct Partition {
    n: usize,
    b: usize,
    perm: Vec<u32>,
}

impl Partition {
    pub fn new<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Result<Self> {
        check_subset_size(n, b)?;
        if n > u32::MAX as usize {
            return Err(Error::invalid("partitions support at most 2^32 - 1 units"));
        }
        let mut perm: Vec<u32> = (0..n as u32).collect();
        // Fisher–Yates, front to back.
        for i in 0..n.saturating_sub(1) {
            let j = rng.random_range(i..n);
            perm.swap(i, j);
        }
        Ok(Self { n, b, perm })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn b(&self) -> usize {
        self.b
    }

    /// Number of complete subsets, `floor(n / b)`.
    pub fn len(&self) -> usize {
        self.n / self.b
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids left out by the floor rule.
    pub fn unassigned(&self) -> usize {
        self.n - self.len() * self.b
    }

    pub fn subset(&self, j: usize) -> SubsetIndex {
        assert!(j < self.len(), "subset {j} out of range");
        let mut row_ids: Vec<usize> = self.perm[j * self.b..(j + 1) * self.b]
            .iter()
            .map(|&r| r as usize)
            .collect();
        row_ids.sort_unstable();
        SubsetIndex {
            subset_id: j,
            row_ids,
            b: self.b,
            n: self.n,
        }
    }

    pub fn subsets(&self) -> Vec<SubsetIndex> {
        (0..self.len()).map(|j| self.subset(j)).collect()
    }
}

fn check_subset_size(n: usize, b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::invalid("subset size b must be at least 1"));
    }
    if b > n {
        return Err(Error::invalid(format!("subset size b = {b} exceeds n = {n}")));
    }
    Ok(())
}

pub fn make_partition<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Result<Vec<SubsetIndex>> {
    Ok(Partition::new(n, b, rng)?.subsets())
}

/// `b` distinct ids drawn uniformly over all size-`b` subsets of `0..n`
/// (Floyd's algorithm; memory is O(b)).
pub fn draw_subset<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Result<SubsetIndex> {
    check_subset_size(n, b)?;
    let mut chosen: HashSet<usize> = HashSet::with_capacity(b);
    for j in (n - b)..n {
        let t = rng.random_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    let mut row_ids: Vec<usize> = chosen.into_iter().collect();
    row_ids.sort_unstable();
    Ok(SubsetIndex {
        subset_id: 0,
        row_ids,
        b,
        n,
    })
}

/// Audit record of one partition, exported as a single JSON object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub seed: u64,
    pub n: usize,
    pub b: usize,
    pub unassigned: usize,
    pub subsets: Vec<SubsetIndex>,
}

impl PartitionRecord {
    pub fn new(seed: u64, partition: &Partition) -> Self {
        Self {
            seed,
            n: partition.n(),
            b: partition.b(),
            unassigned: partition.unassigned(),
            subsets: partition.subsets(),
        }
    }
}

/// A subset gathered into memory as a regression design.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedSubset {
    /// Row-major `rows x width` design, intercept column first when requested.
    pub design: Vec<f64>,
    pub y: Vec<f64>,
    /// Cluster id per row (grouped functionals only).
    pub groups: Option<Vec<u64>>,
    pub rows: usize,
    pub width: usize,
    /// Rows per resampling unit (1, or the cluster size).
    pub unit_size: usize,
    pub column_names: Vec<String>,
}

impl MaterializedSubset {
    /// Build directly from a row-major design (tests, simulations).
    pub fn new(design: Vec<f64>, y: Vec<f64>, width: usize) -> Result<Self> {
        if width == 0 || design.len() != y.len() * width {
            return Err(Error::invalid("design shape does not match outcome length"));
        }
        let rows = y.len();
        Ok(Self {
            design,
            y,
            groups: None,
            rows,
            width,
            unit_size: 1,
            column_names: (0..width).map(|j| format!("beta_{j}")).collect(),
        })
    }

    /// Attach contiguous clusters of `unit_size` rows.
    pub fn with_clusters(mut self, unit_size: usize) -> Result<Self> {
        if unit_size == 0 || self.rows % unit_size != 0 {
            return Err(Error::invalid("row count is not a multiple of the cluster size"));
        }
        self.unit_size = unit_size;
        self.groups = Some((0..self.rows).map(|r| (r / unit_size) as u64).collect());
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.rows / self.unit_size
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.width..(i + 1) * self.width]
    }

    /// Keep only the given units (in the given order).
    pub fn select_units(&self, units: &[usize]) -> Self {
        let m = self.unit_size;
        let mut design = Vec::with_capacity(units.len() * m * self.width);
        let mut y = Vec::with_capacity(units.len() * m);
        let mut groups = self.groups.as_ref().map(|_| Vec::with_capacity(units.len() * m));
        for &u in units {
            for r in u * m..(u + 1) * m {
                design.extend_from_slice(self.row(r));
                y.push(self.y[r]);
                if let (Some(g), Some(src)) = (groups.as_mut(), self.groups.as_ref()) {
                    g.push(src[r]);
                }
            }
        }
        Self {
            rows: y.len(),
            design,
            y,
            groups,
            width: self.width,
            unit_size: m,
            column_names: self.column_names.clone(),
        }
    }
}

enum Term {
    Numeric(usize),
    Dummies { column: usize, levels: usize },
}

/// Column mapping from raw table rows to design rows.
struct DesignLayout {
    outcome: usize,
    intercept: bool,
    terms: Vec<Term>,
    group: Option<usize>,
    width: usize,
    names: Vec<String>,
}

impl DesignLayout {
    fn new(ds: &ChunkedDataset, spec: &FunctionalSpec) -> Result<Self> {
        let schema = ds.schema();
        let find = |name: &str| {
            schema
                .index_of(name)
                .ok_or_else(|| Error::Materialize(format!("column `{name}` not in dataset")))
        };
        let outcome = find(&spec.outcome)?;
        if schema.columns()[outcome].kind != ColumnKind::Numeric {
            return Err(Error::Materialize(format!(
                "outcome `{}` must be numeric",
                spec.outcome
            )));
        }
        let mut names = Vec::new();
        if spec.intercept {
            names.push("(intercept)".to_string());
        }
        let mut terms = Vec::new();
        for p in &spec.predictors {
            let c = find(p)?;
            match schema.columns()[c].kind {
                ColumnKind::Numeric => {
                    terms.push(Term::Numeric(c));
                    names.push(p.clone());
                }
                ColumnKind::Categorical => {
                    let levels = ds.levels(c).len();
                    for l in ds.levels(c).iter().skip(1) {
                        names.push(format!("{p}[{l}]"));
                    }
                    terms.push(Term::Dummies { column: c, levels });
                }
                ColumnKind::GroupId => {
                    return Err(Error::Materialize(format!(
                        "group-id column `{p}` cannot be a predictor"
                    )))
                }
            }
        }
        let group = match (&spec.kind, &spec.group) {
            (FunctionalKind::Mixed, Some(g)) => Some(find(g)?),
            (FunctionalKind::Mixed, None) => {
                return Err(Error::Materialize("mixed functional needs a group column".into()))
            }
            _ => None,
        };
        if names.is_empty() {
            return Err(Error::Materialize("design has no columns".into()));
        }
        Ok(Self {
            outcome,
            intercept: spec.intercept,
            terms,
            group,
            width: names.len(),
            names,
        })
    }

    fn push_row(&self, raw: &[f64], design: &mut Vec<f64>, column_names: &Schema) -> Result<f64> {
        if self.intercept {
            design.push(1.0);
        }
        for t in &self.terms {
            match *t {
                Term::Numeric(c) => design.push(raw[c]),
                Term::Dummies { column, levels } => {
                    let code = raw[column];
                    if code < 0.0 || code.fract() != 0.0 || code as usize >= levels {
                        return Err(Error::Materialize(format!(
                            "level code {code} of `{}` absent from dictionary",
                            column_names.columns()[column].name
                        )));
                    }
                    let code = code as usize;
                    design.extend((1..levels).map(|l| if l == code { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(raw[self.outcome])
    }
}

/// Names of the design columns `spec` produces on `ds`, in coefficient order.
pub fn design_columns(ds: &ChunkedDataset, spec: &FunctionalSpec) -> Result<Vec<String>> {
    Ok(DesignLayout::new(ds, spec)?.names)
}

/// Number of resampling units in `ds` under `spec` (rows, or clusters).
pub fn n_units(ds: &ChunkedDataset, spec: &FunctionalSpec) -> Result<usize> {
    let m = spec.unit_size();
    if ds.n_rows() % m != 0 {
        return Err(Error::Materialize(format!(
            "{} rows do not form complete clusters of size {m}",
            ds.n_rows()
        )));
    }
    Ok(ds.n_rows() / m)
}

/// Gather the units in `idx` into a design matrix with one ordered pass over
/// the blocks. Categorical predictors are dummy coded against the ingest-time
/// dictionary with the first level as reference. Grouped functionals expect
/// each cluster to occupy `cluster_size` consecutive rows.
pub fn materialize(ds: &ChunkedDataset, idx: &SubsetIndex, spec: &FunctionalSpec) -> Result<MaterializedSubset> {
    let layout = DesignLayout::new(ds, spec)?;
    let m = spec.unit_size();
    let units = n_units(ds, spec)?;
    if let Some(&bad) = idx.row_ids.iter().find(|&&u| u >= units) {
        return Err(Error::Materialize(format!(
            "unit {bad} is beyond the dataset ({units} units)"
        )));
    }
    let mut rows = Vec::with_capacity(idx.row_ids.len() * m);
    for &u in &idx.row_ids {
        rows.extend(u * m..(u + 1) * m);
    }
    gather(ds, &rows, &layout, m)
}

/// Gather a contiguous range of units (used by full-pass engines).
pub fn materialize_range(
    ds: &ChunkedDataset,
    units: std::ops::Range<usize>,
    spec: &FunctionalSpec,
) -> Result<MaterializedSubset> {
    let layout = DesignLayout::new(ds, spec)?;
    let m = spec.unit_size();
    let total = n_units(ds, spec)?;
    if units.end > total {
        return Err(Error::Materialize(format!(
            "unit range ends at {} but the dataset has {total} units",
            units.end
        )));
    }
    let rows: Vec<usize> = (units.start * m..units.end * m).collect();
    gather(ds, &rows, &layout, m)
}

fn gather(ds: &ChunkedDataset, rows: &[usize], layout: &DesignLayout, m: usize) -> Result<MaterializedSubset> {
    let mut design = Vec::with_capacity(rows.len() * layout.width);
    let mut y = Vec::with_capacity(rows.len());
    let mut groups = layout.group.map(|_| Vec::with_capacity(rows.len()));
    ds.for_each_row(rows, |_, raw| {
        y.push(layout.push_row(raw, &mut design, ds.schema())?);
        if let (Some(g), Some(c)) = (groups.as_mut(), layout.group) {
            g.push(raw[c] as u64);
        }
        Ok(())
    })?;
    if let Some(g) = &groups {
        for (u, chunk) in g.chunks(m).enumerate() {
            if chunk.iter().any(|&x| x != chunk[0]) {
                return Err(Error::Materialize(format!(
                    "cluster {u} of the subset mixes group ids; clusters must occupy {m} consecutive rows"
                )));
            }
        }
    }
    Ok(MaterializedSubset {
        rows: y.len(),
        design,
        y,
        groups,
        width: layout.width,
        unit_size: m,
        column_names: layout.names.clone(),
    })
}
