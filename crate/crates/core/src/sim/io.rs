//! CSV persistence for datasets.
//!
//! One row per observation, plus one `truth` row per epoch when ground truth
//! is known:
//!
//! ```text
//! epoch,type,anchor_id,ax,ay,az,value_0,..,value_{D-1},cov_0,..,cov_{D(D+1)/2-1},outlier
//! ```
//!
//! `type` is one of `truth`, `prior`, `between`, `range`, `pseudorange`.
//! Covariances are the upper triangle in row-major order. Unused cells are
//! empty. `outlier` (optional) holds generator labels as 0/1. Metadata
//! lives in a JSON sidecar at `<stem>.meta.json`.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use super::{Dataset, DatasetMetadata, Epoch, LabeledDataset, Observation, ObservationKind};
use crate::error::{Error, Result};

const REQUIRED: [&str; 8] = ["epoch", "type", "anchor_id", "ax", "ay", "az", "value_0", "cov_0"];

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn upper(cov: &DMatrix<f64>) -> Vec<f64> {
    let n = cov.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(cov[(i, j)]);
        }
    }
    out
}

fn from_upper(n: usize, v: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}

fn cells(values: impl IntoIterator<Item = f64>, width: usize) -> Vec<String> {
    let mut out: Vec<String> = values.into_iter().map(|v| v.to_string()).collect();
    out.resize(width, String::new());
    out
}

/// Writes the CSV and its metadata sidecar.
pub fn save_dataset(data: &LabeledDataset, path: &Path) -> Result<()> {
    let ds = &data.dataset;
    let d = ds.state_dim;
    let nc = d * (d + 1) / 2;
    let mut header: Vec<String> = ["epoch", "type", "anchor_id", "ax", "ay", "az"].map(String::from).to_vec();
    header.extend((0..d).map(|i| format!("value_{i}")));
    header.extend((0..nc).map(|i| format!("cov_{i}")));
    header.push("outlier".into());

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(&header)?;
    for (t, epoch) in ds.epochs.iter().enumerate() {
        let ep = epoch.index.to_string();
        if let Some(x) = ds.truth.get(epoch.index) {
            let mut row = vec![ep.clone(), "truth".into(), String::new(), String::new(), String::new(), String::new()];
            row.extend(cells(x.iter().copied(), d));
            row.extend(cells([], nc));
            row.push(String::new());
            w.write_record(&row)?;
        }
        for (j, o) in epoch.observations.iter().enumerate() {
            let mut row = vec![ep.clone(), o.kind.as_str().into()];
            row.push(o.anchor_id.map(|a| a.to_string()).unwrap_or_default());
            row.extend(cells(o.anchor.iter().flat_map(|a| a.iter().copied()), 3));
            row.extend(cells(o.value.iter().copied(), d));
            row.extend(cells(upper(&o.cov), nc));
            let label = data.labels.get(t).and_then(|l| l.get(j)).copied().unwrap_or(false);
            row.push(if label { "1" } else { "0" }.into());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let meta = sidecar(path);
    let json = serde_json::to_string_pretty(&ds.metadata)?;
    std::fs::write(&meta, json).map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

struct Row<'a> {
    line: usize,
    record: &'a csv::StringRecord,
    columns: &'a HashMap<String, usize>,
}

impl Row<'_> {
    fn schema(&self, message: impl Into<String>) -> Error {
        Error::Schema {
            line: self.line,
            message: message.into(),
        }
    }

    fn cell(&self, name: &str) -> Option<&str> {
        let s = self.record.get(*self.columns.get(name)?)?.trim();
        (!s.is_empty()).then_some(s)
    }

    fn number(&self, name: &str) -> Result<Option<f64>> {
        self.cell(name)
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.schema(format!("column {name}: bad number {s:?}")))
            })
            .transpose()
    }

    fn series(&self, prefix: &str, width: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for i in 0..width {
            match self.number(&format!("{prefix}_{i}"))? {
                Some(v) if out.len() == i => out.push(v),
                Some(_) => return Err(self.schema(format!("gap before {prefix}_{i}"))),
                None => {}
            }
        }
        Ok(out)
    }
}

/// Reads a dataset written by [`save_dataset`] or by hand. The sidecar is
/// optional.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = r.headers()?.clone();
    let columns: HashMap<String, usize> = header.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
    for name in REQUIRED {
        if !columns.contains_key(name) {
            return Err(Error::Schema {
                line: 1,
                message: format!("missing column {name}"),
            });
        }
    }
    let width = |prefix: &str| (0..).take_while(|i| columns.contains_key(&format!("{prefix}_{i}"))).count();
    let (n_values, n_cov) = (width("value"), width("cov"));

    let mut epochs: Vec<Epoch> = Vec::new();
    let mut labels: Vec<Vec<bool>> = Vec::new();
    let mut truth: Vec<(usize, DVector<f64>)> = Vec::new();
    let mut state_dim: Option<usize> = None;
    let mut position_dim: Option<usize> = None;
    let mut has_clock = false;
    let mut record = csv::StringRecord::new();
    while r.read_record(&mut record)? {
        let row = Row {
            line: record.position().map_or(0, |p| p.line() as usize),
            record: &record,
            columns: &columns,
        };
        let epoch = row
            .cell("epoch")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| row.schema("column epoch: expected a nonnegative integer"))?;
        if epochs.last().is_some_and(|e| e.index > epoch) {
            return Err(row.schema(format!("epoch {epoch} out of order")));
        }
        if epochs.last().is_none_or(|e| e.index < epoch) {
            epochs.push(Epoch {
                index: epoch,
                observations: Vec::new(),
            });
            labels.push(Vec::new());
        }
        let ty = row.cell("type").ok_or_else(|| row.schema("column type: empty"))?;
        let values = row.series("value", n_values)?;
        if values.is_empty() {
            return Err(row.schema("no values"));
        }
        let agree = |slot: &mut Option<usize>, n: usize, what: &str| match *slot {
            Some(m) if m != n => Err(row.schema(format!("{what} dimension {n}, earlier rows use {m}"))),
            _ => {
                *slot = Some(n);
                Ok(())
            }
        };
        if ty == "truth" {
            agree(&mut state_dim, values.len(), "state")?;
            truth.push((epoch, DVector::from_vec(values)));
            continue;
        }
        let kind = ObservationKind::parse(ty).ok_or_else(|| row.schema(format!("column type: unknown {ty:?}")))?;
        let cov = row.series("cov", n_cov)?;
        let m = values.len();
        if cov.len() != m * (m + 1) / 2 {
            return Err(row.schema(format!(
                "{} covariance entries for {m} values, expected {}",
                cov.len(),
                m * (m + 1) / 2
            )));
        }
        let cov = from_upper(m, &cov);
        if cov.clone().cholesky().is_none() {
            return Err(row.schema("covariance is not positive definite"));
        }
        let anchor_id = row
            .cell("anchor_id")
            .map(|s| s.parse::<usize>().map_err(|_| row.schema(format!("column anchor_id: bad id {s:?}"))))
            .transpose()?;
        let coords: Vec<Option<f64>> = ["ax", "ay", "az"].iter().map(|c| row.number(c)).collect::<Result<_>>()?;
        let anchor = match kind {
            ObservationKind::Range | ObservationKind::Pseudorange => {
                if m != 1 {
                    return Err(row.schema("ranging rows carry one value"));
                }
                let a: Vec<f64> = match coords[..] {
                    [Some(x), Some(y), None] => vec![x, y],
                    [Some(x), Some(y), Some(z)] => vec![x, y, z],
                    _ => return Err(row.schema("ranging rows need ax and ay")),
                };
                agree(&mut position_dim, a.len(), "anchor")?;
                has_clock |= kind == ObservationKind::Pseudorange;
                Some(DVector::from_vec(a))
            }
            _ => {
                agree(&mut state_dim, m, "state")?;
                None
            }
        };
        let outlier = match row.cell("outlier") {
            None | Some("0") => false,
            Some("1") => true,
            Some(s) => return Err(row.schema(format!("column outlier: expected 0 or 1, got {s:?}"))),
        };
        epochs.last_mut().unwrap().observations.push(Observation {
            kind,
            anchor_id,
            anchor,
            value: DVector::from_vec(values),
            cov,
        });
        labels.last_mut().unwrap().push(outlier);
    }

    let state_dim = state_dim
        .or(position_dim.map(|p| p + usize::from(has_clock)))
        .ok_or_else(|| Error::Schema {
            line: 1,
            message: "no rows".into(),
        })?;
    let position_dim = position_dim.unwrap_or(state_dim - usize::from(has_clock));
    if position_dim + usize::from(has_clock) != state_dim {
        return Err(Error::Schema {
            line: 1,
            message: format!("state dimension {state_dim} does not fit {position_dim}D anchors"),
        });
    }
    let truth = if truth.len() == epochs.len() && truth.iter().enumerate().all(|(i, (e, _))| *e == i) {
        truth.into_iter().map(|(_, x)| x).collect()
    } else {
        Vec::new()
    };
    let meta = sidecar(path);
    let metadata = if meta.exists() {
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        serde_json::from_str(&text)?
    } else {
        DatasetMetadata::default()
    };
    Ok(LabeledDataset {
        dataset: Dataset {
            position_dim,
            state_dim,
            epochs,
            truth,
            metadata,
        },
        labels,
    })
}
