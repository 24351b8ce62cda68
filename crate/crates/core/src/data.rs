//! Observation data, instrument encoding and CSV ingestion.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmmError};

/// Complete-case observations with the instrument stored as level indices `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    x: Vec<f64>,
    z: Vec<usize>,
    level_values: Vec<f64>,
    dropped: usize,
}

impl Dataset {
    /// Builds a dataset from already-indexed instrument levels.
    ///
    /// `level_values[k]` is the raw instrument value carried by level `k`; the
    /// values must be strictly increasing.
    pub fn from_levels(y: Vec<f64>, x: Vec<f64>, z: Vec<usize>, level_values: Vec<f64>) -> Result<Self> {
        if y.len() != x.len() || y.len() != z.len() {
            return Err(SmmError::InvalidInput(format!(
                "column lengths differ: y={}, x={}, z={}",
                y.len(),
                x.len(),
                z.len()
            )));
        }
        if y.is_empty() {
            return Err(SmmError::InvalidInput("dataset has no observations".into()));
        }
        if y.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(SmmError::NonFinite { what: "data column" });
        }
        if level_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SmmError::InvalidInput("instrument level values must be strictly increasing".into()));
        }
        if let Some(&bad) = z.iter().find(|&&l| l >= level_values.len()) {
            return Err(SmmError::InvalidInput(format!("instrument level {bad} has no value")));
        }
        Ok(Self { y, x, z, level_values, dropped: 0 })
    }

    /// Builds a dataset from raw integer-valued instrument codes, relabelling
    /// the distinct values to `0..K` in ascending order.
    pub fn from_raw(y: Vec<f64>, x: Vec<f64>, z_raw: &[f64]) -> Result<Self> {
        let (z, level_values) = remap_levels(z_raw)?;
        Self::from_levels(y, x, z, level_values)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Instrument level index of every row.
    pub fn z(&self) -> &[usize] {
        &self.z
    }

    /// Number of instrument levels K.
    pub fn levels(&self) -> usize {
        self.level_values.len()
    }

    pub fn level_values(&self) -> &[f64] {
        &self.level_values
    }

    /// Rows removed during ingestion because of missing cells.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Observation counts per level.
    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.levels()];
        for &l in &self.z {
            counts[l] += 1;
        }
        counts
    }

    pub fn is_binary_outcome(&self) -> bool {
        self.y.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_binary_exposure(&self) -> bool {
        self.x.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Copy with the outcome column replaced.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        let mut ds = Self::from_levels(y, self.x.clone(), self.z.clone(), self.level_values.clone())?;
        ds.dropped = self.dropped;
        Ok(ds)
    }

    /// Copy with instrument levels relabelled through `map` (old level → new level).
    pub fn relabel(&self, map: &[usize], level_values: Vec<f64>) -> Result<Self> {
        let z = self.z.iter().map(|&l| map[l]).collect();
        let mut ds = Self::from_levels(self.y.clone(), self.x.clone(), z, level_values)?;
        ds.dropped = self.dropped;
        Ok(ds)
    }

    pub fn require_instrument_variation(&self) -> Result<()> {
        let observed = self.level_counts().iter().filter(|&&c| c > 0).count();
        if observed < 2 {
            return Err(SmmError::DegenerateInstrument(format!(
                "instrument takes {observed} distinct value(s); at least 2 are required"
            )));
        }
        Ok(())
    }
}

fn remap_levels(z_raw: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
    for (i, &v) in z_raw.iter().enumerate() {
        if !v.is_finite() || v.fract() != 0.0 {
            return Err(SmmError::Parse { row: i + 1, column: "instrument".into(), value: v.to_string() });
        }
    }
    let mut values: Vec<f64> = z_raw.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let index: BTreeMap<i64, usize> = values.iter().enumerate().map(|(k, &v)| (v as i64, k)).collect();
    let z = z_raw.iter().map(|&v| index[&(v as i64)]).collect();
    Ok((z, values))
}

/// How the instrument enters the moment conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// `S = (1, Z)` with Z the level index.
    Raw,
    /// `S = (1, I(Z=k) for k ≠ reference)`.
    #[default]
    Indicators,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentSpec {
    pub encoding: Encoding,
    pub reference_level: usize,
    pub levels: usize,
}

impl InstrumentSpec {
    pub fn indicators(levels: usize) -> Self {
        Self { encoding: Encoding::Indicators, reference_level: 0, levels }
    }

    pub fn raw(levels: usize) -> Self {
        Self { encoding: Encoding::Raw, reference_level: 0, levels }
    }

    pub fn for_dataset(ds: &Dataset, encoding: Encoding) -> Self {
        Self { encoding, reference_level: 0, levels: ds.levels() }
    }

    /// Levels that receive their own indicator column, in ascending order.
    pub fn indicator_levels(&self) -> Vec<usize> {
        (0..self.levels).filter(|&l| l != self.reference_level).collect()
    }

    /// Columns of S including the constant.
    pub fn width(&self) -> usize {
        match self.encoding {
            Encoding::Raw => 2,
            Encoding::Indicators => self.levels,
        }
    }
}

/// Indicator matrix `n × (K−1)` with column j equal to I(Z = j-th non-reference level).
pub fn indicator_matrix(ds: &Dataset, reference_level: usize) -> DMatrix<f64> {
    let spec = InstrumentSpec { encoding: Encoding::Indicators, reference_level, levels: ds.levels() };
    let cols = spec.indicator_levels();
    DMatrix::from_fn(ds.n(), cols.len(), |i, j| if ds.z[i] == cols[j] { 1.0 } else { 0.0 })
}

/// Instrument matrix S; column 0 is the constant.
pub fn encode_indicators(ds: &Dataset, spec: &InstrumentSpec) -> Result<DMatrix<f64>> {
    if spec.levels != ds.levels() || spec.reference_level >= spec.levels {
        return Err(SmmError::InvalidInput(format!(
            "instrument spec has {} levels (reference {}), dataset has {}",
            spec.levels,
            spec.reference_level,
            ds.levels()
        )));
    }
    let n = ds.n();
    Ok(match spec.encoding {
        Encoding::Raw => DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { ds.z[i] as f64 }),
        Encoding::Indicators => {
            let ind = indicator_matrix(ds, spec.reference_level);
            let mut s = DMatrix::from_element(n, ind.ncols() + 1, 1.0);
            s.columns_mut(1, ind.ncols()).copy_from(&ind);
            s
        }
    })
}

/// Matrices shared by every moment system for one dataset.
#[derive(Debug, Clone)]
pub struct EstimationData {
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    /// Instrument matrix S (n × p) with a leading constant.
    pub s: DMatrix<f64>,
    /// Non-constant instrument columns used by the expanded moments.
    pub zc: DMatrix<f64>,
    /// Saturated association regressors (1, X, Z₁.., XZ₁..).
    pub r: DMatrix<f64>,
}

impl EstimationData {
    pub fn new(ds: &Dataset, spec: &InstrumentSpec) -> Result<Self> {
        ds.require_instrument_variation()?;
        let s = encode_indicators(ds, spec)?;
        let n = ds.n();
        let y = DVector::from_column_slice(ds.y());
        let x = DVector::from_column_slice(ds.x());
        let zc = s.columns(1, s.ncols() - 1).into_owned();
        let ind = indicator_matrix(ds, spec.reference_level);
        let k = ind.ncols();
        let r = DMatrix::from_fn(n, 2 + 2 * k, |i, j| match j {
            0 => 1.0,
            1 => x[i],
            j if j < 2 + k => ind[(i, j - 2)],
            j => x[i] * ind[(i, j - 2 - k)],
        });
        Ok(Self { y, x, s, zc, r })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Result of [`collapse_equivalent_levels`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    /// Original raw values absorbed into each new level.
    pub groups: Vec<Vec<f64>>,
    /// Mean predicted value of each new level.
    pub level_means: Vec<f64>,
}

impl MergeReport {
    pub fn merged_any(&self) -> bool {
        self.groups.iter().any(|g| g.len() > 1)
    }
}

/// Merges instrument levels whose mean `predicted` values agree within relative `tol`.
///
/// Levels are chained in order of their predicted means, so a run of values each
/// within tolerance of its neighbour becomes a single level. New levels are
/// numbered by the smallest original level they contain and keep that level's
/// raw value.
pub fn collapse_equivalent_levels(ds: &Dataset, predicted: &[f64], tol: f64) -> Result<(Dataset, MergeReport)> {
    if predicted.len() != ds.n() {
        return Err(SmmError::InvalidInput(format!(
            "predicted has length {}, dataset has {} rows",
            predicted.len(),
            ds.n()
        )));
    }
    let k = ds.levels();
    let mut sums = vec![0.0; k];
    let counts = ds.level_counts();
    for (&l, &p) in ds.z.iter().zip(predicted) {
        sums[l] += p;
    }
    let present: Vec<usize> = (0..k).filter(|&l| counts[l] > 0).collect();
    let means: Vec<f64> = (0..k).map(|l| if counts[l] > 0 { sums[l] / counts[l] as f64 } else { f64::NAN }).collect();

    let mut by_mean = present.clone();
    by_mean.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let mut group_of = vec![usize::MAX; k];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (pos, &l) in by_mean.iter().enumerate() {
        let joins = pos > 0 && {
            let prev = by_mean[pos - 1];
            let scale = means[l].abs().max(means[prev].abs());
            (means[l] - means[prev]).abs() <= tol * scale
        };
        if !joins {
            groups.push(Vec::new());
        }
        let g = groups.len() - 1;
        groups[g].push(l);
        group_of[l] = g;
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    // order groups by their smallest original level
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&g| groups[g][0]);
    let mut new_label = vec![0; groups.len()];
    for (label, &g) in order.iter().enumerate() {
        new_label[g] = label;
    }
    let mut map = vec![0; k];
    for &l in &present {
        map[l] = new_label[group_of[l]];
    }
    let level_values: Vec<f64> = order.iter().map(|&g| ds.level_values[groups[g][0]]).collect();
    let collapsed = ds.relabel(&map, level_values)?;

    let report = MergeReport {
        groups: order.iter().map(|&g| groups[g].iter().map(|&l| ds.level_values[l]).collect()).collect(),
        level_means: order
            .iter()
            .map(|&g| {
                let (s, c) = groups[g].iter().fold((0.0, 0usize), |(s, c), &l| (s + sums[l], c + counts[l]));
                s / c as f64
            })
            .collect(),
    };
    Ok((collapsed, report))
}

/// Column names used by [`ingest_csv`] and [`write_csv`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Columns {
    pub outcome: String,
    pub exposure: String,
    pub instrument: String,
}

impl Columns {
    pub fn new(outcome: &str, exposure: &str, instrument: &str) -> Self {
        Self { outcome: outcome.into(), exposure: exposure.into(), instrument: instrument.into() }
    }
}

impl Default for Columns {
    fn default() -> Self {
        Self::new("y", "x", "z")
    }
}

/// Reads the named columns from a headed CSV file. Rows with an empty cell in any
/// of the three columns are dropped and counted.
pub fn ingest_csv(path: &Path, columns: &Columns) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| SmmError::Io { path: path.to_path_buf(), source })?;
    read_csv(file, columns)
}

pub fn read_csv<R: Read>(reader: R, columns: &Columns) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| SmmError::ColumnNotFound(name.to_string()))
    };
    let idx = [find(&columns.outcome)?, find(&columns.exposure)?, find(&columns.instrument)?];
    let names = [&columns.outcome, &columns.exposure, &columns.instrument];

    let (mut y, mut x, mut z) = (Vec::new(), Vec::new(), Vec::new());
    let mut dropped = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cells: Vec<&str> = idx.iter().map(|&c| record.get(c).unwrap_or("")).collect();
        if cells.iter().any(|c| c.is_empty()) {
            dropped += 1;
            continue;
        }
        let mut vals = [0.0; 3];
        for (j, cell) in cells.iter().enumerate() {
            vals[j] = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| SmmError::Parse {
                row,
                column: names[j].to_string(),
                value: cell.to_string(),
            })?;
        }
        if vals[2].fract() != 0.0 {
            return Err(SmmError::Parse { row, column: columns.instrument.clone(), value: cells[2].to_string() });
        }
        y.push(vals[0]);
        x.push(vals[1]);
        z.push(vals[2]);
    }
    if y.is_empty() {
        return Err(SmmError::InvalidInput("no complete rows".into()));
    }
    let mut ds = Dataset::from_raw(y, x, &z)?;
    ds.dropped = dropped;
    ds.require_instrument_variation()?;
    Ok(ds)
}

/// Writes `outcome, exposure, instrument` columns with raw instrument values.
/// Floats use the shortest representation that parses back to the same bits.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W, columns: &Columns) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([&columns.outcome, &columns.exposure, &columns.instrument])?;
    for i in 0..ds.n() {
        w.write_record([ds.y[i].to_string(), ds.x[i].to_string(), ds.level_values[ds.z[i]].to_string()])?;
    }
    w.flush().map_err(|e| SmmError::Csv(e.into()))?;
    Ok(())
}

pub fn write_csv_file(ds: &Dataset, path: &Path, columns: &Columns) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| SmmError::Io { path: path.to_path_buf(), source })?;
    write_csv(ds, std::io::BufWriter::new(file), columns)
}
