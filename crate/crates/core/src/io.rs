//! Real-world dataset ingestion, fold splits and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::TabularDataset;
use crate::error::{ForgeError, Result};
use crate::metrics::{MetricsReport, AE_HISTOGRAM_BINS};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Binary,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// A cut point for a numeric target: a literal value, `"mean"` or `"median"`
/// of the observational column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Value(f64),
    Rule(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Observational CSV; relative paths resolve against the manifest.
    pub path: PathBuf,
    /// Column schema. Columns not listed are dropped; an empty list keeps
    /// every column and infers numeric versus categorical.
    #[serde(default)]
    pub columns: Vec<ColumnSpec>,
    pub protected: String,
    pub target: String,
    /// Protected value mapped to 1; defaults to the larger of the two.
    #[serde(default)]
    pub protected_positive: Option<String>,
    /// Binarizes a numeric target as `1(value ≥ threshold)`.
    #[serde(default)]
    pub target_threshold: Option<Threshold>,
    /// Row-aligned twin with the protected attribute flipped.
    #[serde(default)]
    pub counterfactual: Option<PathBuf>,
    /// Row-aligned numeric columns of fair noise terms.
    #[serde(default)]
    pub fair_noise: Option<PathBuf>,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

fn default_folds() -> usize {
    5
}

impl DatasetManifest {
    pub fn from_file(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub data: TabularDataset,
    pub counterfactual: Option<TabularDataset>,
    /// Names and values of the fair noise columns.
    pub fair_noise: Option<(Vec<String>, Array2<f64>)>,
    /// Raw protected values encoded as 0 and 1, in that order.
    pub protected_mapping: [String; 2],
    pub folds: usize,
    /// SHA-256 over the manifest and every file it references.
    pub digest: String,
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row: Vec<String> = rec.iter().map(|f| f.trim().to_string()).collect();
        if let Some(c) = row.iter().position(String::is_empty) {
            return Err(ForgeError::Schema(format!("missing value in row {} column `{}`", i + 1, header[c])));
        }
        rows.push(row);
    }
    Ok(RawTable { header, rows })
}

impl RawTable {
    fn column(&self, name: &str) -> Result<Vec<&str>> {
        let c = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ForgeError::Missing(format!("column `{name}`")))?;
        Ok(self.rows.iter().map(|r| r[c].as_str()).collect())
    }
}

fn parse_numeric(values: &[&str], name: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| v.parse::<f64>().map_err(|_| ForgeError::Schema(format!("non-numeric `{v}` in `{name}`"))))
        .collect()
}

/// Distinct values, numerically ordered when every value parses.
fn levels(values: &[&str]) -> Vec<String> {
    let mut out: Vec<String> = values.iter().map(|s| s.to_string()).collect();
    out.sort();
    out.dedup();
    if out.iter().all(|v| v.parse::<f64>().is_ok()) {
        out.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    out
}

fn binary_mapping(values: &[&str], name: &str, positive: Option<&str>) -> Result<[String; 2]> {
    let lv = levels(values);
    if lv.len() != 2 {
        return Err(ForgeError::Schema(format!("`{name}` has {} distinct values, expected 2", lv.len())));
    }
    match positive {
        Some(p) if lv[0] == p => Ok([lv[1].clone(), lv[0].clone()]),
        Some(p) if lv[1] != p => Err(ForgeError::Schema(format!("`{name}` has no value `{p}`"))),
        _ => Ok([lv[0].clone(), lv[1].clone()]),
    }
}

fn encode_binary(values: &[&str], mapping: &[String; 2], name: &str) -> Result<Vec<u8>> {
    values
        .iter()
        .map(|v| match v {
            v if *v == mapping[0] => Ok(0),
            v if *v == mapping[1] => Ok(1),
            other => Err(ForgeError::Schema(format!("`{name}` value `{other}` outside {mapping:?}"))),
        })
        .collect()
}

/// Fitted encoding, reused for the counterfactual file.
struct Encoder {
    columns: Vec<ColumnSpec>,
    binary: BTreeMap<String, [String; 2]>,
    categories: BTreeMap<String, Vec<String>>,
    protected: [String; 2],
    target: TargetEncoding,
}

enum TargetEncoding {
    Binary([String; 2]),
    Cut(f64),
}

impl Encoder {
    fn fit(m: &DatasetManifest, t: &RawTable) -> Result<Self> {
        let columns: Vec<ColumnSpec> = if m.columns.is_empty() {
            t.header
                .iter()
                .filter(|h| **h != m.protected && **h != m.target)
                .map(|h| {
                    let vals = t.column(h)?;
                    let kind = if parse_numeric(&vals, h).is_ok() { ColumnKind::Numeric } else { ColumnKind::Categorical };
                    Ok(ColumnSpec { name: h.clone(), kind })
                })
                .collect::<Result<_>>()?
        } else {
            m.columns.iter().filter(|c| c.name != m.protected && c.name != m.target).cloned().collect()
        };
        let mut binary = BTreeMap::new();
        let mut categories = BTreeMap::new();
        for c in &columns {
            let vals = t.column(&c.name)?;
            match c.kind {
                ColumnKind::Numeric => {
                    parse_numeric(&vals, &c.name)?;
                }
                ColumnKind::Binary => {
                    binary.insert(c.name.clone(), binary_mapping(&vals, &c.name, None)?);
                }
                ColumnKind::Categorical => {
                    categories.insert(c.name.clone(), levels(&vals));
                }
            }
        }
        let protected = binary_mapping(&t.column(&m.protected)?, &m.protected, m.protected_positive.as_deref())?;
        let target_vals = t.column(&m.target)?;
        let target = match &m.target_threshold {
            None => TargetEncoding::Binary(binary_mapping(&target_vals, &m.target, None)?),
            Some(th) => {
                let v = parse_numeric(&target_vals, &m.target)?;
                let cut = match th {
                    Threshold::Value(x) => *x,
                    Threshold::Rule(r) if r == "mean" => crate::stats::mean(&v),
                    Threshold::Rule(r) if r == "median" => crate::stats::median(&v),
                    Threshold::Rule(r) => return Err(ForgeError::Config(format!("unknown threshold rule `{r}`"))),
                };
                TargetEncoding::Cut(cut)
            }
        };
        Ok(Encoder { columns, binary, categories, protected, target })
    }

    fn feature_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.columns {
            match c.kind {
                ColumnKind::Categorical => out.extend(self.categories[&c.name].iter().map(|l| format!("{}={l}", c.name))),
                _ => out.push(c.name.clone()),
            }
        }
        out
    }

    fn encode(&self, m: &DatasetManifest, t: &RawTable) -> Result<TabularDataset> {
        let n = t.rows.len();
        let names = self.feature_names();
        let mut x = Array2::zeros((n, names.len()));
        let mut j = 0;
        for c in &self.columns {
            let vals = t.column(&c.name)?;
            match c.kind {
                ColumnKind::Numeric => {
                    for (i, v) in parse_numeric(&vals, &c.name)?.into_iter().enumerate() {
                        x[[i, j]] = v;
                    }
                    j += 1;
                }
                ColumnKind::Binary => {
                    for (i, v) in encode_binary(&vals, &self.binary[&c.name], &c.name)?.into_iter().enumerate() {
                        x[[i, j]] = f64::from(v);
                    }
                    j += 1;
                }
                ColumnKind::Categorical => {
                    let lv = &self.categories[&c.name];
                    for (i, v) in vals.iter().enumerate() {
                        let k = lv
                            .iter()
                            .position(|l| l == v)
                            .ok_or_else(|| ForgeError::Schema(format!("unknown level `{v}` in `{}`", c.name)))?;
                        x[[i, j + k]] = 1.0;
                    }
                    j += lv.len();
                }
            }
        }
        let a = encode_binary(&t.column(&m.protected)?, &self.protected, &m.protected)?;
        let target_vals = t.column(&m.target)?;
        let y = match &self.target {
            TargetEncoding::Binary(map) => encode_binary(&target_vals, map, &m.target)?,
            TargetEncoding::Cut(cut) => parse_numeric(&target_vals, &m.target)?.iter().map(|&v| u8::from(v >= *cut)).collect(),
        };
        let mut column_names = vec![m.protected.clone()];
        column_names.extend(names);
        TabularDataset::new(a, x, y)?.with_names(column_names, 0, &m.target)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest file and everything it references.
pub fn load_manifest(path: &Path) -> Result<LoadedDataset> {
    let (manifest, base) = DatasetManifest::from_file(path)?;
    let mut hasher = Sha256::new();
    hasher.update(fs::read(path)?);
    load_with(&manifest, &base, hasher)
}

/// Loads an in-memory manifest whose relative paths resolve against `base`.
pub fn load_dataset(manifest: &DatasetManifest, base: &Path) -> Result<LoadedDataset> {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(manifest)?);
    load_with(manifest, base, hasher)
}

fn load_with(m: &DatasetManifest, base: &Path, mut hasher: Sha256) -> Result<LoadedDataset> {
    if m.folds < 2 {
        return Err(ForgeError::Config("folds must be at least 2".into()));
    }
    let obs_path = resolve(base, &m.path);
    hasher.update(fs::read(&obs_path)?);
    let obs = read_table(&obs_path)?;
    let encoder = Encoder::fit(m, &obs)?;
    let data = encoder.encode(m, &obs)?;
    let counterfactual = match &m.counterfactual {
        Some(p) => {
            let p = resolve(base, p);
            hasher.update(fs::read(&p)?);
            let cf = encoder.encode(m, &read_table(&p)?)?;
            if cf.n_rows() != data.n_rows() {
                return Err(ForgeError::LengthMismatch { left: cf.n_rows(), right: data.n_rows() });
            }
            Some(cf)
        }
        None => None,
    };
    let fair_noise = match &m.fair_noise {
        Some(p) => {
            let p = resolve(base, p);
            hasher.update(fs::read(&p)?);
            let t = read_table(&p)?;
            if t.rows.len() != data.n_rows() {
                return Err(ForgeError::LengthMismatch { left: t.rows.len(), right: data.n_rows() });
            }
            let mut x = Array2::zeros((t.rows.len(), t.header.len()));
            for (j, h) in t.header.iter().enumerate() {
                for (i, v) in parse_numeric(&t.column(h)?, h)?.into_iter().enumerate() {
                    x[[i, j]] = v;
                }
            }
            Some((t.header.clone(), x))
        }
        None => None,
    };
    Ok(LoadedDataset {
        data,
        counterfactual,
        fair_noise,
        protected_mapping: encoder.protected,
        folds: m.folds,
        digest: hex::encode(hasher.finalize()),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Seeded `k`-fold partition; fold sizes differ by at most one.
pub fn kfold(n_rows: usize, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 || k > n_rows {
        return Err(ForgeError::Config(format!("cannot split {n_rows} rows into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(&mut stream(seed, 0xF01D));
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n_rows / k, (f + 1) * n_rows / k);
            let mut validation = order[lo..hi].to_vec();
            validation.sort_unstable();
            let mut train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
            train.sort_unstable();
            FoldSplit { fold: f, train, validation }
        })
        .collect())
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Writes serializable flat rows as CSV with a header.
pub fn write_csv_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(ForgeError::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub method: String,
    pub ate: Option<f64>,
    pub ae_median: Option<f64>,
    pub ae_mean: Option<f64>,
    pub ae_max: Option<f64>,
    pub dsp: f64,
    pub auc: Option<f64>,
    pub error: Option<f64>,
}

impl From<&MetricsReport> for MetricsRow {
    fn from(r: &MetricsReport) -> Self {
        MetricsRow {
            dataset: r.dataset.clone(),
            method: r.method.clone(),
            ate: r.ate,
            ae_median: r.ae_summary.as_ref().map(|s| s.median),
            ae_mean: r.ae_summary.as_ref().map(|s| s.mean),
            ae_max: r.ae_summary.as_ref().map(|s| s.max),
            dsp: r.dsp,
            auc: r.auc,
            error: r.error,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub dataset: String,
    pub method: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
}

/// Writes `<stem>.json` (the full reports) plus `<stem>_metrics.csv` and
/// `<stem>_ae_histogram.csv` next to it. Returns the paths written.
pub fn emit_report(reports: &[MetricsReport], path: &Path) -> Result<Vec<PathBuf>> {
    write_json(reports, path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let dir = path.parent().unwrap_or(Path::new("."));
    let metrics_path = dir.join(format!("{stem}_metrics.csv"));
    let rows: Vec<MetricsRow> = reports.iter().map(MetricsRow::from).collect();
    write_csv_rows(&rows, &metrics_path)?;
    let hist_path = dir.join(format!("{stem}_ae_histogram.csv"));
    let mut hist = Vec::new();
    for r in reports {
        if let Some(s) = &r.ae_summary {
            for (b, &count) in s.histogram.iter().enumerate() {
                hist.push(HistogramRow {
                    dataset: r.dataset.clone(),
                    method: r.method.clone(),
                    bin_lo: b as f64 / AE_HISTOGRAM_BINS as f64,
                    bin_hi: (b + 1) as f64 / AE_HISTOGRAM_BINS as f64,
                    count,
                });
            }
        }
    }
    write_csv_rows(&hist, &hist_path)?;
    Ok(vec![path.to_path_buf(), metrics_path, hist_path])
}
