//! Prediction-error criterion with a trainable monic inverse noise filter.
//!
//! The inverse noise filter is `1 + Ȟ(q)` with `Ȟ = q^{-1} B̌(q) / Ǎ(q)`; the
//! single pure delay keeps the predictor from seeing the output it predicts.

use serde::{Deserialize, Serialize};

use crate::blocks::{DynoNetModel, ModelHandles};
use crate::error::{Error, Result};
use crate::signal::Signal;
use crate::tape::{GBlockShape, NodeId, ParamId, ParameterStore, Tape};
use crate::tf::{is_schur_stable, TransferFunctionParams};

/// Default numerator and denominator orders of `Ȟ`.
pub const DEFAULT_NOISE_ORDER: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PemModel {
    pub model: DynoNetModel,
    pub h_check: TransferFunctionParams,
}

/// Parameter ids of a registered [`PemModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct PemHandles {
    pub model: ModelHandles,
    pub noise_b: ParamId,
    pub noise_a: ParamId,
}

/// One row of a magnitude Bode export.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodeRow {
    pub frequency: f64,
    pub magnitude_db: f64,
    pub true_magnitude_db: Option<f64>,
}

impl PemModel {
    pub fn new(model: DynoNetModel, h_check: TransferFunctionParams) -> Result<Self> {
        let m = Self { model, h_check };
        m.validate()?;
        Ok(m)
    }

    /// `Ȟ = 0` of the given orders, i.e. white-noise assumption at the start.
    pub fn with_zero_noise_model(model: DynoNetModel, n_b: usize, n_a: usize) -> Result<Self> {
        Self::new(model, TransferFunctionParams::zeros(n_b, n_a, 1))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.h_check.validate()?;
        if self.h_check.n_k != 1 {
            return Err(Error::InvalidParams(format!(
                "noise block must have exactly one delay, got n_k = {}",
                self.h_check.n_k
            )));
        }
        if self.model.in_channels() != 1 || self.model.out_channels() != 1 {
            return Err(Error::Shape("prediction error needs a SISO simulation model".into()));
        }
        Ok(())
    }

    fn noise_shape(&self) -> GBlockShape {
        GBlockShape {
            in_channels: 1,
            out_channels: 1,
            n_b: self.h_check.n_b(),
            n_a: self.h_check.n_a(),
            n_k: 1,
        }
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<PemHandles> {
        let model = self.model.register(store, "model.")?;
        let noise_b = store.register("noise.b", self.h_check.b.clone())?;
        let noise_a = store.register("noise.a", self.h_check.a.clone())?;
        Ok(PemHandles {
            model,
            noise_b,
            noise_a,
        })
    }

    pub fn load(&mut self, store: &ParameterStore, handles: &PemHandles) {
        self.model.load(store, &handles.model);
        self.h_check.b.copy_from_slice(store.value(handles.noise_b));
        self.h_check.a.copy_from_slice(store.value(handles.noise_a));
    }

    /// Records `ε = r + Ȟ r` with `r = y - M(u)`; returns the node of `ε`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        handles: &PemHandles,
        u: NodeId,
        y: NodeId,
    ) -> Result<NodeId> {
        let sim = self.model.forward(tape, store, &handles.model, u)?;
        let r = tape.sub(y, sim)?;
        let (b, a) = (tape.param(store, handles.noise_b), tape.param(store, handles.noise_a));
        let filtered = tape.gblock(r, b, a, self.noise_shape())?;
        tape.add(r, filtered)
    }

    /// Mean squared prediction error on a tape.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        handles: &PemHandles,
        u: NodeId,
        y: NodeId,
    ) -> Result<NodeId> {
        let eps = self.forward(tape, store, handles, u, y)?;
        let sq = tape.square(eps);
        Ok(tape.mean(sq))
    }

    pub fn prediction_error(&self, u: &Signal, y: &Signal) -> Result<Signal> {
        let sim = self.model.simulate(u)?;
        y.check_same_shape(&sim)?;
        let r = y.zip_map(&sim, |y, s| y - s)?;
        let filtered = self.h_check.filter_forward(&r)?;
        r.zip_map(&filtered, |r, f| r + f)
    }

    /// `ŷ(t|t-1) = M(u) - Ȟ (y - M(u))`, which equals `y - ε`; evaluated in
    /// this form so that `ŷ(t)` reads `y` only through the delayed `Ȟ`.
    pub fn one_step_predictor(&self, u: &Signal, y: &Signal) -> Result<Signal> {
        let sim = self.model.simulate(u)?;
        y.check_same_shape(&sim)?;
        let r = y.zip_map(&sim, |y, s| y - s)?;
        let filtered = self.h_check.filter_forward(&r)?;
        sim.zip_map(&filtered, |s, f| s - f)
    }

    pub fn pem_loss(&self, u: &Signal, y: &Signal) -> Result<f64> {
        let eps = self.prediction_error(u, y)?;
        let d = eps.as_slice();
        Ok(d.iter().map(|e| e * e).sum::<f64>() / d.len().max(1) as f64)
    }

    /// `H^{-1} = (Ǎ + q^{-1} B̌) / Ǎ`, monic and without delay.
    pub fn inverse_noise_filter(&self) -> TransferFunctionParams {
        let (num, den) = self.noise_polynomials();
        TransferFunctionParams {
            b: num,
            a: den[1..].to_vec(),
            n_k: 0,
        }
    }

    /// `H = Ǎ / (Ǎ + q^{-1} B̌)`.
    pub fn estimated_noise_filter(&self) -> TransferFunctionParams {
        let (num, den) = self.noise_polynomials();
        let h = TransferFunctionParams {
            b: den,
            a: num[1..].to_vec(),
            n_k: 0,
        };
        if !h.is_stable() {
            log::warn!("estimated noise filter is unstable: 1 + Ȟ has zeros outside the unit circle");
        }
        h
    }

    /// Full coefficient lists (leading 1 included) of `Ǎ + q^{-1} B̌` and `Ǎ`.
    fn noise_polynomials(&self) -> (Vec<f64>, Vec<f64>) {
        let a = &self.h_check.a;
        let b = &self.h_check.b;
        let len = 1 + a.len().max(b.len());
        let mut num = vec![0.0; len];
        num[0] = 1.0;
        for (j, &aj) in a.iter().enumerate() {
            num[j + 1] += aj;
        }
        for (j, &bj) in b.iter().enumerate() {
            num[j + 1] += bj;
        }
        let mut den = vec![1.0];
        den.extend_from_slice(a);
        (num, den)
    }

    /// True when `1 + Ȟ` is minimum phase, i.e. the implied `H` is stable.
    pub fn noise_model_is_invertible(&self) -> bool {
        let (num, _) = self.noise_polynomials();
        is_schur_stable(&num[1..])
    }

    /// Magnitude of the estimated `H` (and of `truth`, when given) at each frequency.
    pub fn bode(&self, frequencies: &[f64], truth: Option<&TransferFunctionParams>) -> Vec<BodeRow> {
        let h = self.estimated_noise_filter();
        frequencies
            .iter()
            .map(|&f| BodeRow {
                frequency: f,
                magnitude_db: h.magnitude_db(f),
                true_magnitude_db: truth.map(|t| t.magnitude_db(f)),
            })
            .collect()
    }
}

/// `n` frequencies spaced logarithmically over `[lo, hi]` (cycles per sample).
pub fn log_frequencies(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    let (l, h) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (l + (h - l) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
