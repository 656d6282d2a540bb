//! Fitting a dataset end to end and scoring a fitted model on held-out data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{build_pwh, build_wh, DynoNetModel, PwhConfig, WhConfig};
use crate::error::{Error, Result};
use crate::io::{Dataset, ModelFile, Normalization, Target};
use crate::metrics::{fit_index, rmse};
use crate::optim::{train, MseObjective, PemObjective, QuantizedObjective, TrainConfig, TrainOutcome};
use crate::pem::{PemModel, DEFAULT_NOISE_ORDER};
use crate::quantized::Quantizer;
use crate::signal::Signal;
use crate::tape::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean squared one-step prediction error with a learned noise model.
    Pem,
    /// Negative log-likelihood of binned observations.
    Quantized,
    /// Mean squared simulation error.
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Wh(WhConfig),
    Pwh(PwhConfig),
}

impl Architecture {
    pub fn build(&self, rng: &mut ChaCha8Rng) -> DynoNetModel {
        match self {
            Architecture::Wh(c) => build_wh(c, rng),
            Architecture::Pwh(c) => build_pwh(c, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSpec {
    pub loss: LossKind,
    pub architecture: Architecture,
    pub train: TrainConfig,
    /// Scale inputs (and real outputs) to zero mean, unit variance per channel.
    pub normalize: bool,
    /// Numerator and denominator orders of the noise model (PEM only).
    pub noise_order: (usize, usize),
    /// Thresholds in data units (quantized only).
    pub quantizer: Option<Quantizer>,
    /// Starting noise std in data units (quantized only).
    pub sigma_e_init: f64,
}

impl FitSpec {
    pub fn new(loss: LossKind, architecture: Architecture) -> Self {
        FitSpec {
            loss,
            architecture,
            train: TrainConfig::default(),
            normalize: true,
            noise_order: (DEFAULT_NOISE_ORDER, DEFAULT_NOISE_ORDER),
            quantizer: None,
            sigma_e_init: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub model: ModelFile,
    pub outcome: TrainOutcome,
    /// Samples whose likelihood hit the probability floor, summed over iterations.
    pub clamped_samples: usize,
}

/// Initializes the architecture from `spec.train.seed` and trains it on `data`.
pub fn fit(data: &Dataset, spec: &FitSpec) -> Result<FitResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.train.seed);
    let model = spec.architecture.build(&mut rng);
    if model.in_channels() != data.u.channels() {
        return Err(Error::Shape(format!(
            "architecture takes {} input channels, data has {}",
            model.in_channels(),
            data.u.channels()
        )));
    }
    let mut store = ParameterStore::new();
    match (spec.loss, &data.target) {
        (LossKind::Pem | LossKind::Mse, Target::Real(y)) => {
            if y.channels() != model.out_channels() {
                return Err(Error::Shape(format!(
                    "architecture has {} outputs, data has {}",
                    model.out_channels(),
                    y.channels()
                )));
            }
            let norm = if spec.normalize {
                Normalization::fit(&data.u, Some(y), y.channels())
            } else {
                Normalization::identity(data.u.channels(), y.channels())
            };
            let (u, y) = (norm.normalize_u(&data.u)?, norm.normalize_y(y)?);
            let mut file;
            let outcome;
            if spec.loss == LossKind::Pem {
                let pem = PemModel::with_zero_noise_model(model, spec.noise_order.0, spec.noise_order.1)?;
                let mut obj = PemObjective::new(pem, &mut store, u, y)?;
                outcome = train(&mut obj, &mut store, &spec.train)?;
                let fitted = obj.fitted(&store);
                if !fitted.noise_model_is_invertible() {
                    log::warn!("fitted inverse noise filter is not minimum phase");
                }
                file = ModelFile::new(fitted.model);
                file.h_check = Some(fitted.h_check);
            } else {
                let mut obj = MseObjective::new(model, &mut store, u, y)?;
                outcome = train(&mut obj, &mut store, &spec.train)?;
                file = ModelFile::new(obj.fitted(&store));
            }
            file.normalization = spec.normalize.then_some(norm);
            Ok(FitResult { model: file, outcome, clamped_samples: 0 })
        }
        (LossKind::Quantized, Target::Bins(z)) => {
            let q = spec
                .quantizer
                .clone()
                .ok_or_else(|| Error::InvalidParams("quantized training needs a quantizer".into()))?;
            if model.out_channels() != 1 {
                return Err(Error::Shape("quantized training needs a single-output model".into()));
            }
            // Outputs are only observed through bins, so only the input is scaled.
            let norm = if spec.normalize {
                Normalization::fit(&data.u, None, 1)
            } else {
                Normalization::identity(data.u.channels(), 1)
            };
            let u = norm.normalize_u(&data.u)?;
            let mut obj = QuantizedObjective::new(model, &mut store, u, z.clone(), q.clone(), spec.sigma_e_init)?;
            let outcome = train(&mut obj, &mut store, &spec.train)?;
            let (fitted, sigma) = obj.fitted(&store);
            let mut file = ModelFile::new(fitted);
            file.sigma_e = Some(sigma);
            file.quantizer = Some(q);
            file.normalization = spec.normalize.then_some(norm);
            Ok(FitResult { model: file, outcome, clamped_samples: obj.clamped_samples() })
        }
        (LossKind::Quantized, Target::Real(_)) => Err(Error::InvalidParams(
            "quantized training needs a bin column `z`".into(),
        )),
        (_, Target::Bins(_)) => Err(Error::InvalidParams(format!(
            "{:?} training needs real outputs, not bins",
            spec.loss
        ))),
    }
}

/// What the simulated output was compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Output,
    /// Bin midpoints, when only quantized observations are available.
    BinCenters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent; 100 is a perfect simulation.
    pub fit: f64,
    /// In output units.
    pub rmse: f64,
    pub samples: usize,
    pub reference: Reference,
    /// Per-record scores when the data holds several records.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<RecordMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub fit: f64,
    pub rmse: f64,
}

fn reference_signal(model: &ModelFile, data: &Dataset) -> Result<(Signal, Reference)> {
    match &data.target {
        Target::Real(y) => Ok((y.clone(), Reference::Output)),
        Target::Bins(z) => {
            let q = model
                .quantizer
                .as_ref()
                .ok_or_else(|| Error::InvalidParams("binned data needs a model with a quantizer".into()))?;
            if let Some(&m) = z.iter().find(|&&m| m >= q.bins()) {
                return Err(Error::InvalidParams(format!("bin {m} is outside the quantizer")));
            }
            let centers = z.iter().map(|&m| q.bin_center(m)).collect();
            Ok((Signal::new(data.u.batch(), data.u.len(), 1, centers)?, Reference::BinCenters))
        }
    }
}

/// Open-loop simulation of the model on `data.u`, scored against the data outputs.
pub fn evaluate(model: &ModelFile, data: &Dataset) -> Result<(Metrics, Signal)> {
    if model.model.in_channels() != data.u.channels() {
        return Err(Error::Shape(format!(
            "model takes {} input channels, data has {}",
            model.model.in_channels(),
            data.u.channels()
        )));
    }
    let (y, reference) = reference_signal(model, data)?;
    if y.channels() != model.model.out_channels() {
        return Err(Error::Shape(format!(
            "model has {} outputs, data has {}",
            model.model.out_channels(),
            y.channels()
        )));
    }
    let sim = model.simulate(&data.u)?;
    let records = if y.batch() > 1 {
        (0..y.batch())
            .map(|b| {
                let (yr, sr) = (y.select_batch(&[b]), sim.select_batch(&[b]));
                Ok(RecordMetrics {
                    fit: fit_index(yr.as_slice(), sr.as_slice())?,
                    rmse: rmse(yr.as_slice(), sr.as_slice())?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let metrics = Metrics {
        fit: fit_index(y.as_slice(), sim.as_slice())?,
        rmse: rmse(y.as_slice(), sim.as_slice())?,
        samples: y.as_slice().len(),
        reference,
        records,
    };
    Ok((metrics, sim))
}
