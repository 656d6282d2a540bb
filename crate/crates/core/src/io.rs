//! File formats: datasets as CSV, models and metadata as JSON.
//!
//! Dataset CSV has a `t` column followed by input columns (`u`, or `u0`, `u1`, ...)
//! and either real outputs (`y` / `y0`, ...) or a single integer bin column `z`.
//! Several equal-length records are stored back to back; a record starts
//! wherever `t` returns to 0.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::blocks::DynoNetModel;
use crate::error::{Error, Result};
use crate::optim::TraceRow;
use crate::pem::BodeRow;
use crate::quantized::Quantizer;
use crate::signal::Signal;
use crate::tf::TransferFunctionParams;

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Real(Signal),
    /// Bin indices, record-major, one per time step.
    Bins(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub u: Signal,
    pub target: Target,
}

impl Dataset {
    pub fn real(u: Signal, y: Signal) -> Result<Self> {
        if u.batch() != y.batch() || u.len() != y.len() {
            return Err(Error::Shape(format!(
                "input is {:?} but output is {:?}",
                u.shape(),
                y.shape()
            )));
        }
        Ok(Dataset { u, target: Target::Real(y) })
    }

    pub fn bins(u: Signal, z: Vec<usize>) -> Result<Self> {
        if u.batch() * u.len() != z.len() {
            return Err(Error::Shape(format!(
                "input has {} samples but z has {}",
                u.batch() * u.len(),
                z.len()
            )));
        }
        Ok(Dataset { u, target: Target::Bins(z) })
    }

    pub fn y(&self) -> Option<&Signal> {
        match &self.target {
            Target::Real(y) => Some(y),
            Target::Bins(_) => None,
        }
    }

    pub fn z(&self) -> Option<&[usize]> {
        match &self.target {
            Target::Real(_) => None,
            Target::Bins(z) => Some(z),
        }
    }

    pub fn rows(&self) -> usize {
        self.u.batch() * self.u.len()
    }
}

fn column_names(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![prefix.to_string()]
    } else {
        (0..n).map(|c| format!("{prefix}{c}")).collect()
    }
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let (batch, len, n_u) = data.u.shape();
    let mut header = vec!["t".to_string()];
    header.extend(column_names("u", n_u));
    match &data.target {
        Target::Real(y) => header.extend(column_names("y", y.channels())),
        Target::Bins(_) => header.push("z".into()),
    }
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for b in 0..batch {
        for t in 0..len {
            row.clear();
            row.push(t.to_string());
            for c in 0..n_u {
                row.push(data.u.get(b, t, c).to_string());
            }
            match &data.target {
                Target::Real(y) => {
                    for c in 0..y.channels() {
                        row.push(y.get(b, t, c).to_string());
                    }
                }
                Target::Bins(z) => row.push(z[b * len + t].to_string()),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn matches_prefix(name: &str, prefix: char) -> bool {
    let mut chars = name.chars();
    chars.next() == Some(prefix) && chars.all(|c| c.is_ascii_digit())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(Error::Format(format!("{}: first column must be `t`", path.display())));
    }
    let u_cols: Vec<usize> = (1..header.len()).filter(|&i| matches_prefix(&header[i], 'u')).collect();
    let y_cols: Vec<usize> = (1..header.len()).filter(|&i| matches_prefix(&header[i], 'y')).collect();
    let z_col = header.iter().position(|h| h == "z");
    let known = 1 + u_cols.len() + y_cols.len() + z_col.is_some() as usize;
    if u_cols.is_empty() || known != header.len() || y_cols.is_empty() == z_col.is_none() {
        return Err(Error::Format(format!(
            "{}: expected columns t, u.., then y.. or z; got {header:?}",
            path.display()
        )));
    }

    let mut records: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = Vec::new();
    let mut expected_t = 0usize;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Format(format!("{}: row {}: {what}", path.display(), line + 2));
        let field = |i: usize| rec.get(i).map(str::trim).ok_or_else(|| bad("missing field"));
        let t: usize = field(0)?.parse().map_err(|_| bad("t is not a non-negative integer"))?;
        if t == 0 {
            records.push(Default::default());
            expected_t = 0;
        }
        if t != expected_t || records.is_empty() {
            return Err(bad(&format!("t = {t}, expected {expected_t}")));
        }
        expected_t += 1;
        let cur = records.last_mut().expect("pushed above");
        for &i in &u_cols {
            let v: f64 = field(i)?.parse().map_err(|_| bad("input is not a number"))?;
            cur.0.push(v);
        }
        for &i in &y_cols {
            let v: f64 = field(i)?.parse().map_err(|_| bad("output is not a number"))?;
            cur.1.push(v);
        }
        if let Some(i) = z_col {
            let v: usize = field(i)?.parse().map_err(|_| bad("z is not a bin index"))?;
            cur.2.push(v);
        }
    }
    if records.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let len = records[0].0.len() / u_cols.len();
    if records.iter().any(|r| r.0.len() != len * u_cols.len()) {
        return Err(Error::Format(format!("{}: records have different lengths", path.display())));
    }
    let batch = records.len();
    let mut u = Vec::with_capacity(batch * len * u_cols.len());
    let mut y = Vec::with_capacity(batch * len * y_cols.len());
    let mut z = Vec::new();
    for (ru, ry, rz) in records {
        u.extend(ru);
        y.extend(ry);
        z.extend(rz);
    }
    let u = Signal::new(batch, len, u_cols.len(), u)?;
    if z_col.is_some() {
        Dataset::bins(u, z)
    } else {
        Dataset::real(u, Signal::new(batch, len, y_cols.len(), y)?)
    }
}

/// Per-channel affine scaling applied to data before it reaches the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn channel_stats(x: &Signal) -> (Vec<f64>, Vec<f64>) {
    let n = (x.batch() * x.len()) as f64;
    (0..x.channels())
        .map(|c| {
            let v = x.channel_concat(c);
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            // A constant channel is only centred.
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            (mean, std)
        })
        .unzip()
}

impl Normalization {
    pub fn identity(n_u: usize, n_y: usize) -> Self {
        Normalization {
            u_mean: vec![0.0; n_u],
            u_std: vec![1.0; n_u],
            y_mean: vec![0.0; n_y],
            y_std: vec![1.0; n_y],
        }
    }

    /// Statistics of `u` and, if given, `y`; without `y` the output side is the identity.
    pub fn fit(u: &Signal, y: Option<&Signal>, n_y: usize) -> Self {
        let (u_mean, u_std) = channel_stats(u);
        let (y_mean, y_std) = match y {
            Some(y) => channel_stats(y),
            None => (vec![0.0; n_y], vec![1.0; n_y]),
        };
        Normalization { u_mean, u_std, y_mean, y_std }
    }

    fn apply(x: &Signal, mean: &[f64], std: &[f64], invert: bool) -> Result<Signal> {
        if x.channels() != mean.len() {
            return Err(Error::Shape(format!(
                "normalization has {} channels, data has {}",
                mean.len(),
                x.channels()
            )));
        }
        let (batch, len, ch) = x.shape();
        let mut out = x.clone().into_vec();
        for (k, v) in out.iter_mut().enumerate() {
            let c = k % ch;
            *v = if invert { *v * std[c] + mean[c] } else { (*v - mean[c]) / std[c] };
        }
        Signal::new(batch, len, ch, out)
    }

    pub fn normalize_u(&self, u: &Signal) -> Result<Signal> {
        Self::apply(u, &self.u_mean, &self.u_std, false)
    }

    pub fn normalize_y(&self, y: &Signal) -> Result<Signal> {
        Self::apply(y, &self.y_mean, &self.y_std, false)
    }

    pub fn denormalize_y(&self, y: &Signal) -> Result<Signal> {
        Self::apply(y, &self.y_mean, &self.y_std, true)
    }

    /// Maps thresholds from output units into the normalized output scale.
    pub fn normalize_quantizer(&self, q: &Quantizer) -> Result<Quantizer> {
        if self.y_mean.len() != 1 {
            return Err(Error::Shape("quantized outputs must be single-channel".into()));
        }
        let (m, s) = (self.y_mean[0], self.y_std[0]);
        Quantizer::new(q.thresholds().iter().map(|t| (t - m) / s).collect())
    }
}

/// A fitted model as stored on disk. Everything the model sees is normalized; the
/// optional fields record how to get back to data units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub model: DynoNetModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_check: Option<TransferFunctionParams>,
    /// Output noise std, in normalized output units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_e: Option<f64>,
    /// Thresholds in data units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizer: Option<Quantizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

impl ModelFile {
    pub fn new(model: DynoNetModel) -> Self {
        ModelFile {
            version: MODEL_FILE_VERSION,
            model,
            h_check: None,
            sigma_e: None,
            quantizer: None,
            normalization: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::Format(format!(
                "model file version {} is not supported (expected {MODEL_FILE_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        if let Some(h) = &self.h_check {
            h.validate()?;
        }
        if let Some(n) = &self.normalization {
            let ok = n.u_mean.len() == self.model.in_channels()
                && n.u_std.len() == n.u_mean.len()
                && n.y_mean.len() == self.model.out_channels()
                && n.y_std.len() == n.y_mean.len()
                && n.u_std.iter().chain(&n.y_std).all(|s| *s > 0.0 && s.is_finite());
            if !ok {
                return Err(Error::Format("normalization does not match the model widths".into()));
            }
        }
        Ok(())
    }

    /// Open-loop simulation in data units.
    pub fn simulate(&self, u: &Signal) -> Result<Signal> {
        match &self.normalization {
            Some(n) => {
                let y = self.model.simulate(&n.normalize_u(u)?)?;
                n.denormalize_y(&y)
            }
            None => self.model.simulate(u),
        }
    }

    /// Noise std in data units.
    pub fn sigma_e_data_units(&self) -> Option<f64> {
        let s = self.sigma_e?;
        Some(match &self.normalization {
            Some(n) => s * n.y_std[0],
            None => s,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let m: ModelFile = read_json(path)?;
    m.validate()?;
    Ok(m)
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss", "wall_time_s"])?;
    for row in trace {
        w.write_record([row.iteration.to_string(), row.loss.to_string(), row.wall_time_s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bode(path: &Path, rows: &[BodeRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frequency", "magnitude_db", "true_magnitude_db"])?;
    for row in rows {
        let truth = row.true_magnitude_db.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([row.frequency.to_string(), row.magnitude_db.to_string(), truth])?;
    }
    w.flush()?;
    Ok(())
}
