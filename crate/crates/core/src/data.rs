//! Dataset container, on-disk formats, windowing, splitting, and
//! normalization for correlated time series.
//!
//! A dataset holds `N` series observed at `T` aligned steps with `F`
//! features each, plus zero or more `N x N` adjacency matrices describing
//! pairwise relations. Values are stored series-major, then time, then
//! feature.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

/// Magic bytes opening the binary dataset format.
pub const BINARY_MAGIC: [u8; 4] = *b"CTS1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("file ends at byte {offset}: needed {needed} more byte(s) for {what}")]
    Truncated {
        offset: u64,
        needed: usize,
        what: &'static str,
    },
    #[error("{0}")]
    Inconsistent(String),
}

fn inconsistent(msg: impl Into<String>) -> DataError {
    DataError::Inconsistent(msg.into())
}

/// `N` series x `T` steps x `F` features, plus adjacency matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CtsDataset {
    n: usize,
    t: usize,
    f: usize,
    /// Row-major over (series, time, feature).
    values: Vec<f64>,
    /// Each matrix is row-major `n * n`.
    adjacency: Vec<Vec<f64>>,
}

impl CtsDataset {
    pub fn new(
        n: usize,
        t: usize,
        f: usize,
        values: Vec<f64>,
        adjacency: Vec<Vec<f64>>,
    ) -> Result<Self, DataError> {
        if n == 0 || t == 0 || f == 0 {
            return Err(inconsistent(format!(
                "dataset dimensions must be positive, got n={n} t={t} f={f}"
            )));
        }
        let expected = n
            .checked_mul(t)
            .and_then(|x| x.checked_mul(f))
            .ok_or_else(|| inconsistent("dataset dimensions overflow"))?;
        if values.len() != expected {
            return Err(inconsistent(format!(
                "expected {expected} values for n={n} t={t} f={f}, got {}",
                values.len()
            )));
        }
        for (i, a) in adjacency.iter().enumerate() {
            if a.len() != n * n {
                return Err(inconsistent(format!(
                    "adjacency {i} has {} entries, expected {}",
                    a.len(),
                    n * n
                )));
            }
        }
        Ok(Self {
            n,
            t,
            f,
            values,
            adjacency,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn adjacency(&self) -> &[Vec<f64>] {
        &self.adjacency
    }

    pub fn value(&self, series: usize, time: usize, feature: usize) -> f64 {
        self.values[(series * self.t + time) * self.f + feature]
    }

    /// Copy of `len` consecutive time steps starting at `start`, keeping
    /// the adjacency matrices.
    pub fn time_slice(&self, start: usize, len: usize) -> Result<CtsDataset, DataError> {
        if len == 0 || start + len > self.t {
            return Err(inconsistent(format!(
                "slice [{start}, {}) outside time range 0..{}",
                start + len,
                self.t
            )));
        }
        let mut values = Vec::with_capacity(self.n * len * self.f);
        for s in 0..self.n {
            let base = (s * self.t + start) * self.f;
            values.extend_from_slice(&self.values[base..base + len * self.f]);
        }
        CtsDataset::new(self.n, len, self.f, values, self.adjacency.clone())
    }

    // ── binary format ────────────────────────────────────────────────
    //
    // magic "CTS1", then u32 LE n, t, f, n_adjacency, then n*t*f f64 LE
    // values, then n_adjacency blocks of n*n f64 LE.

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&BINARY_MAGIC)?;
        for dim in [self.n, self.t, self.f, self.adjacency.len()] {
            let v = u32::try_from(dim)
                .map_err(|_| inconsistent(format!("dimension {dim} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        for a in &self.adjacency {
            for &v in a {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<CtsDataset, DataError> {
        let mut r = CountingReader::new(BufReader::new(File::open(path)?));
        let mut magic = [0u8; 4];
        r.read_exact_or(&mut magic, "magic")?;
        if magic != BINARY_MAGIC {
            return Err(DataError::BadMagic {
                found: magic,
                expected: BINARY_MAGIC,
            });
        }
        let n = r.read_u32("series count")? as usize;
        let t = r.read_u32("time length")? as usize;
        let f = r.read_u32("feature count")? as usize;
        let n_adj = r.read_u32("adjacency count")? as usize;
        let n_vals = n
            .checked_mul(t)
            .and_then(|x| x.checked_mul(f))
            .ok_or_else(|| inconsistent("header dimensions overflow"))?;
        let mut values = Vec::with_capacity(n_vals);
        for _ in 0..n_vals {
            values.push(r.read_f64("values")?);
        }
        let mut adjacency = Vec::with_capacity(n_adj);
        for _ in 0..n_adj {
            let mut a = Vec::with_capacity(n * n);
            for _ in 0..n * n {
                a.push(r.read_f64("adjacency")?);
            }
            adjacency.push(a);
        }
        CtsDataset::new(n, t, f, values, adjacency)
    }

    // ── csv format ───────────────────────────────────────────────────
    //
    // Values: header `series,time,f0,...`, one row per (series, time).
    // Adjacency: headerless n x n numeric grid, one file per matrix.
    // f64 values are written with Display, which round-trips exactly.

    pub fn save_values_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["series".to_string(), "time".to_string()];
        header.extend((0..self.f).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for s in 0..self.n {
            for t in 0..self.t {
                let mut rec = vec![s.to_string(), t.to_string()];
                for fe in 0..self.f {
                    rec.push(self.value(s, t, fe).to_string());
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_adjacency_csv(&self, index: usize, path: impl AsRef<Path>) -> Result<(), DataError> {
        let a = self.adjacency.get(index).ok_or_else(|| {
            inconsistent(format!(
                "adjacency index {index} out of range ({} present)",
                self.adjacency.len()
            ))
        })?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for row in a.chunks(self.n) {
            let rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads values from a header CSV plus any number of adjacency CSVs.
    /// Rows may arrive in any order but every (series, time) pair must
    /// appear exactly once, covering 0..n and 0..t densely.
    pub fn load_csv(
        values_path: impl AsRef<Path>,
        adjacency_paths: &[impl AsRef<Path>],
    ) -> Result<CtsDataset, DataError> {
        let mut rdr = csv::Reader::from_path(values_path)?;
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "series" || &header[1] != "time" {
            return Err(inconsistent(format!(
                "values header must start with series,time,f0,... got {:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        for (i, name) in header.iter().skip(2).enumerate() {
            if name != format!("f{i}") {
                return Err(inconsistent(format!(
                    "feature column {} named {name:?}, expected \"f{i}\"",
                    i + 2
                )));
            }
        }
        let f = header.len() - 2;
        let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        let mut max_s = 0usize;
        let mut max_t = 0usize;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != f + 2 {
                return Err(inconsistent(format!(
                    "row {}: expected {} fields, got {}",
                    line + 2,
                    f + 2,
                    rec.len()
                )));
            }
            let parse_idx = |field: &str, what: &str| {
                field.parse::<usize>().map_err(|e| {
                    inconsistent(format!("row {}: bad {what} {field:?}: {e}", line + 2))
                })
            };
            let s = parse_idx(&rec[0], "series")?;
            let t = parse_idx(&rec[1], "time")?;
            let mut vals = Vec::with_capacity(f);
            for fe in 0..f {
                let v = rec[fe + 2].parse::<f64>().map_err(|e| {
                    inconsistent(format!(
                        "row {}: bad value {:?} in f{fe}: {e}",
                        line + 2,
                        &rec[fe + 2]
                    ))
                })?;
                vals.push(v);
            }
            max_s = max_s.max(s);
            max_t = max_t.max(t);
            rows.push((s, t, vals));
        }
        if rows.is_empty() {
            return Err(inconsistent("values csv has no data rows"));
        }
        let (n, t_len) = (max_s + 1, max_t + 1);
        if rows.len() != n * t_len {
            return Err(inconsistent(format!(
                "got {} rows but max indices imply {n} series x {t_len} steps = {}",
                rows.len(),
                n * t_len
            )));
        }
        let mut values = vec![f64::NAN; n * t_len * f];
        let mut seen = vec![false; n * t_len];
        for (s, t, vals) in rows {
            if seen[s * t_len + t] {
                return Err(inconsistent(format!(
                    "duplicate row for series {s}, time {t}"
                )));
            }
            seen[s * t_len + t] = true;
            values[(s * t_len + t) * f..(s * t_len + t + 1) * f].copy_from_slice(&vals);
        }
        let mut adjacency = Vec::with_capacity(adjacency_paths.len());
        for p in adjacency_paths {
            adjacency.push(load_adjacency_csv(p, n)?);
        }
        CtsDataset::new(n, t_len, f, values, adjacency)
    }
}

fn load_adjacency_csv(path: impl AsRef<Path>, n: usize) -> Result<Vec<f64>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(&path)?;
    let mut out = Vec::with_capacity(n * n);
    let mut n_rows = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != n {
            return Err(inconsistent(format!(
                "adjacency row {} has {} columns, expected {n}",
                n_rows + 1,
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v = field.parse::<f64>().map_err(|e| {
                inconsistent(format!(
                    "adjacency row {}: bad value {field:?}: {e}",
                    n_rows + 1
                ))
            })?;
            out.push(v);
        }
        n_rows += 1;
    }
    if n_rows != n {
        return Err(inconsistent(format!(
            "adjacency has {n_rows} rows, expected {n}"
        )));
    }
    Ok(out)
}

/// Byte-counting reader so truncation errors can report where the file
/// ran out.
struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn read_exact_or(&mut self, buf: &mut [u8], what: &'static str) -> Result<(), DataError> {
        let mut filled = 0;
        while filled < buf.len() {
            let got = self.inner.read(&mut buf[filled..])?;
            if got == 0 {
                return Err(DataError::Truncated {
                    offset: self.offset + filled as u64,
                    needed: buf.len() - filled,
                    what,
                });
            }
            filled += got;
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &'static str) -> Result<u32, DataError> {
        let mut b = [0u8; 4];
        self.read_exact_or(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f64(&mut self, what: &'static str) -> Result<f64, DataError> {
        let mut b = [0u8; 8];
        self.read_exact_or(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

// ── windowing ────────────────────────────────────────────────────────

/// What a window predicts: every step of the horizon, or only its final
/// step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    MultiStep,
    SingleStep,
}

#[derive(Debug, Clone, Copy)]
pub struct WindowSpec {
    /// History steps fed to the model (P).
    pub history_len: usize,
    /// Steps ahead being forecast (Q).
    pub horizon: usize,
    pub mode: TargetMode,
}

/// One training example: `history` is `[N, P, F]`; `target` is feature 0
/// over the horizon, `[N, Q]` for multi-step or `[N, 1]` for single-step.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub history: Tensor,
    pub target: Tensor,
}

/// Slides a window over the dataset: history covers `[t, t+P)` and the
/// target covers `[t+P, t+P+Q)` (or just step `t+P+Q-1` for single-step),
/// yielding `T - P - Q + 1` samples.
pub fn make_windows(ds: &CtsDataset, spec: &WindowSpec) -> Result<Vec<WindowSample>, DataError> {
    let (p, q) = (spec.history_len, spec.horizon);
    if p == 0 || q == 0 {
        return Err(inconsistent(format!(
            "history_len {p} and horizon {q} must be positive"
        )));
    }
    if ds.t() < p + q {
        return Err(inconsistent(format!(
            "need at least {} steps for history {p} + horizon {q}, dataset has {}",
            p + q,
            ds.t()
        )));
    }
    let count = ds.t() - p - q + 1;
    let (n, f) = (ds.n(), ds.f());
    let mut out = Vec::with_capacity(count);
    for start in 0..count {
        let mut hist = Vec::with_capacity(n * p * f);
        for s in 0..n {
            for t in start..start + p {
                for fe in 0..f {
                    hist.push(ds.value(s, t, fe));
                }
            }
        }
        let history = Tensor::new(vec![n, p, f], hist).expect("window history shape");
        let target = match spec.mode {
            TargetMode::MultiStep => {
                let mut tgt = Vec::with_capacity(n * q);
                for s in 0..n {
                    for t in start + p..start + p + q {
                        tgt.push(ds.value(s, t, 0));
                    }
                }
                Tensor::new(vec![n, q], tgt).expect("window target shape")
            }
            TargetMode::SingleStep => {
                let t = start + p + q - 1;
                let tgt = (0..n).map(|s| ds.value(s, t, 0)).collect();
                Tensor::new(vec![n, 1], tgt).expect("window target shape")
            }
        };
        out.push(WindowSample { history, target });
    }
    Ok(out)
}

// ── splitting ────────────────────────────────────────────────────────

/// Contiguous train/validation/test fractions of the time axis. Train
/// and validation get `floor(T * fraction)` steps each; the remainder is
/// the test segment.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.train > 0.0 && self.val > 0.0 && self.train + self.val < 1.0) {
            return Err(inconsistent(format!(
                "split fractions must satisfy train > 0, val > 0, train + val < 1; \
                 got train={} val={}",
                self.train, self.val
            )));
        }
        Ok(())
    }
}

pub fn split(
    ds: &CtsDataset,
    spec: &SplitSpec,
) -> Result<(CtsDataset, CtsDataset, CtsDataset), DataError> {
    spec.validate()?;
    let t = ds.t();
    let n_train = (t as f64 * spec.train).floor() as usize;
    let n_val = (t as f64 * spec.val).floor() as usize;
    let n_test = t - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(inconsistent(format!(
            "split of {t} steps gives empty segment: train={n_train} val={n_val} test={n_test}"
        )));
    }
    Ok((
        ds.time_slice(0, n_train)?,
        ds.time_slice(n_train, n_val)?,
        ds.time_slice(n_train + n_val, n_test)?,
    ))
}

// ── normalization ────────────────────────────────────────────────────

/// Per-feature z-score transform. Fit on the training segment only;
/// population standard deviation, floored at 1e-8 so constant features
/// stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    means: Vec<f64>,
    stds: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    pub fn fit(ds: &CtsDataset) -> Normalizer {
        let f = ds.f();
        let count = (ds.n() * ds.t()) as f64;
        let mut means = vec![0.0; f];
        for row in ds.values().chunks(f) {
            for (m, &v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in means.iter_mut() {
            *m /= count;
        }
        let mut vars = vec![0.0; f];
        for row in ds.values().chunks(f) {
            for ((va, &v), &m) in vars.iter_mut().zip(row).zip(&means) {
                *va += (v - m) * (v - m);
            }
        }
        let stds = vars
            .iter()
            .map(|&va| (va / count).sqrt().max(STD_FLOOR))
            .collect();
        Normalizer { means, stds }
    }

    pub fn mean(&self, feature: usize) -> f64 {
        self.means[feature]
    }

    pub fn std(&self, feature: usize) -> f64 {
        self.stds[feature]
    }

    pub fn n_features(&self) -> usize {
        self.means.len()
    }

    pub fn normalize_value(&self, feature: usize, x: f64) -> f64 {
        (x - self.means[feature]) / self.stds[feature]
    }

    pub fn denormalize_value(&self, feature: usize, z: f64) -> f64 {
        z * self.stds[feature] + self.means[feature]
    }

    /// Dataset copy with every feature z-scored.
    pub fn normalize_dataset(&self, ds: &CtsDataset) -> Result<CtsDataset, DataError> {
        if ds.f() != self.means.len() {
            return Err(inconsistent(format!(
                "normalizer fitted on {} features, dataset has {}",
                self.means.len(),
                ds.f()
            )));
        }
        let values = ds
            .values()
            .chunks(ds.f())
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(fe, &v)| self.normalize_value(fe, v))
            })
            .collect();
        CtsDataset::new(ds.n(), ds.t(), ds.f(), values, ds.adjacency().to_vec())
    }
}

// ── adjacency mask ───────────────────────────────────────────────────

/// Boolean attention mask derived from adjacency structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    mask: Vec<bool>,
}

impl MaskMatrix {
    /// Marks (i, j) reachable when the entrywise sum of all adjacency
    /// matrices exceeds `eps`; the diagonal is always reachable.
    pub fn from_adjacency(adjacency: &[Vec<f64>], n: usize, eps: f64) -> MaskMatrix {
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let total: f64 = adjacency.iter().map(|a| a[i * n + j]).sum();
                mask[i * n + j] = i == j || total > eps;
            }
        }
        MaskMatrix { n, mask }
    }

    /// Mask allowing every pair; attention under it is unrestricted.
    pub fn all_true(n: usize) -> MaskMatrix {
        MaskMatrix {
            n,
            mask: vec![true; n * n],
        }
    }

    /// Mask allowing only self-connections.
    pub fn identity(n: usize) -> MaskMatrix {
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        MaskMatrix { n, mask }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    /// Row-major flat view, for feeding masked score tensors.
    pub fn as_bools(&self) -> &[bool] {
        &self.mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> CtsDataset {
        // 2 series, 4 steps, 1 feature: series 0 counts up, series 1
        // counts down from 100.
        CtsDataset::new(
            2,
            4,
            1,
            vec![0.0, 1.0, 2.0, 3.0, 100.0, 99.0, 98.0, 97.0],
            vec![vec![0.0, 1.0, 0.0, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn new_rejects_wrong_value_count() {
        assert!(CtsDataset::new(2, 3, 1, vec![0.0; 5], vec![]).is_err());
    }

    #[test]
    fn new_rejects_non_square_adjacency() {
        assert!(CtsDataset::new(2, 2, 1, vec![0.0; 4], vec![vec![0.0; 3]]).is_err());
    }

    #[test]
    fn value_indexing_is_series_time_feature() {
        let ds = CtsDataset::new(
            2,
            2,
            2,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            vec![],
        )
        .unwrap();
        assert_eq!(ds.value(0, 0, 1), 2.0);
        assert_eq!(ds.value(0, 1, 0), 3.0);
        assert_eq!(ds.value(1, 0, 0), 5.0);
        assert_eq!(ds.value(1, 1, 1), 8.0);
    }

    #[test]
    fn time_slice_extracts_contiguous_steps() {
        let ds = tiny_dataset();
        let sl = ds.time_slice(1, 2).unwrap();
        assert_eq!(sl.t(), 2);
        assert_eq!(sl.values(), &[1.0, 2.0, 99.0, 98.0]);
        assert_eq!(sl.adjacency(), ds.adjacency());
    }

    #[test]
    fn windows_count_and_bounds() {
        let ds = tiny_dataset();
        let spec = WindowSpec {
            history_len: 2,
            horizon: 1,
            mode: TargetMode::MultiStep,
        };
        let ws = make_windows(&ds, &spec).unwrap();
        // T - P - Q + 1 = 4 - 2 - 1 + 1
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].history.shape(), &[2, 2, 1]);
        assert_eq!(ws[0].history.data(), &[0.0, 1.0, 100.0, 99.0]);
        assert_eq!(ws[0].target.data(), &[2.0, 98.0]);
        assert_eq!(ws[1].history.data(), &[1.0, 2.0, 99.0, 98.0]);
        assert_eq!(ws[1].target.data(), &[3.0, 97.0]);
    }

    #[test]
    fn single_step_target_is_final_horizon_step() {
        let ds = tiny_dataset();
        let spec = WindowSpec {
            history_len: 1,
            horizon: 2,
            mode: TargetMode::SingleStep,
        };
        let ws = make_windows(&ds, &spec).unwrap();
        assert_eq!(ws.len(), 2);
        // window 0: history t=0, target t = 0 + 1 + 2 - 1 = 2
        assert_eq!(ws[0].target.shape(), &[2, 1]);
        assert_eq!(ws[0].target.data(), &[2.0, 98.0]);
        assert_eq!(ws[1].target.data(), &[3.0, 97.0]);
    }

    #[test]
    fn windows_reject_short_series() {
        let ds = tiny_dataset();
        let spec = WindowSpec {
            history_len: 3,
            horizon: 2,
            mode: TargetMode::MultiStep,
        };
        assert!(make_windows(&ds, &spec).is_err());
    }

    #[test]
    fn split_uses_floor_and_remainder() {
        let ds = CtsDataset::new(1, 10, 1, (0..10).map(|v| v as f64).collect(), vec![]).unwrap();
        let (train, val, test) = split(
            &ds,
            &SplitSpec {
                train: 0.65,
                val: 0.15,
            },
        )
        .unwrap();
        // floor(10*0.65)=6, floor(10*0.15)=1, remainder 3
        assert_eq!(train.t(), 6);
        assert_eq!(val.t(), 1);
        assert_eq!(test.t(), 3);
        assert_eq!(train.values(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(val.values(), &[6.0]);
        assert_eq!(test.values(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = tiny_dataset();
        assert!(split(&ds, &SplitSpec { train: 0.0, val: 0.5 }).is_err());
        assert!(split(&ds, &SplitSpec { train: 0.8, val: 0.2 }).is_err());
    }

    #[test]
    fn normalizer_hand_computed_stats() {
        // Feature values 0,1,2,3,100,99,98,97: mean 50, population
        // variance mean(x^2) - mean^2.
        let ds = tiny_dataset();
        let norm = Normalizer::fit(&ds);
        assert_eq!(norm.mean(0), 50.0);
        let var = (0.0f64.powi(2)
            + 1.0f64.powi(2)
            + 2.0f64.powi(2)
            + 3.0f64.powi(2)
            + 100.0f64.powi(2)
            + 99.0f64.powi(2)
            + 98.0f64.powi(2)
            + 97.0f64.powi(2))
            / 8.0
            - 2500.0;
        assert!((norm.std(0) - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn normalizer_floors_constant_feature() {
        let ds = CtsDataset::new(1, 4, 1, vec![7.0; 4], vec![]).unwrap();
        let norm = Normalizer::fit(&ds);
        assert_eq!(norm.std(0), STD_FLOOR);
        assert_eq!(norm.normalize_value(0, 7.0), 0.0);
    }

    #[test]
    fn normalize_then_denormalize_roundtrips() {
        let ds = tiny_dataset();
        let norm = Normalizer::fit(&ds);
        for &v in ds.values() {
            let z = norm.normalize_value(0, v);
            assert!((norm.denormalize_value(0, z) - v).abs() < 1e-10);
        }
        let nd = norm.normalize_dataset(&ds).unwrap();
        let mean: f64 = nd.values().iter().sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn mask_diagonal_always_set() {
        let adj = vec![vec![0.0; 9]];
        let m = MaskMatrix::from_adjacency(&adj, 3, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), i == j);
            }
        }
    }

    #[test]
    fn mask_sums_multiple_adjacencies() {
        // Edge (0,1) only in the first matrix, (1,2) only in the second;
        // both must be reachable in the combined mask.
        let a1 = vec![0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let a2 = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.7, 0.0, 0.0, 0.0];
        let m = MaskMatrix::from_adjacency(&[a1, a2], 3, 0.0);
        assert!(m.get(0, 1));
        assert!(m.get(1, 2));
        assert!(!m.get(0, 2));
        assert!(!m.get(1, 0));
    }

    #[test]
    fn mask_threshold_respects_eps() {
        let a = vec![0.0, 0.3, 0.0, 0.0];
        let loose = MaskMatrix::from_adjacency(&[a.clone()], 2, 0.0);
        let tight = MaskMatrix::from_adjacency(&[a], 2, 0.5);
        assert!(loose.get(0, 1));
        assert!(!tight.get(0, 1));
    }

    #[test]
    fn identity_mask_isolates() {
        let m = MaskMatrix::identity(3);
        assert_eq!(
            m.as_bools(),
            &[true, false, false, false, true, false, false, false, true]
        );
    }
}
