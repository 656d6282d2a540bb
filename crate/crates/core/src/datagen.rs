//! Synthetic identification problems with known ground truth.
//!
//! Every generator is a pure function of its seed. Independent random streams
//! of one ChaCha generator drive the truth, the excitation, the noise and the
//! held-out record, so changing e.g. the record length never changes the truth.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, DynoNetModel, MimoGBlock, SoftSaturation};
use crate::error::{Error, Result};
use crate::quantized::Quantizer;
use crate::signal::Signal;
use crate::tf::{monic_from_roots, TransferFunctionParams};

/// Poles of the ground-truth filters never exceed this modulus.
pub const TRUTH_MAX_POLE: f64 = 0.95;
/// Standard deviation of the colored output disturbance.
pub const COLORED_NOISE_STD: f64 = 0.1;
/// Input rms levels of the quantized benchmark, in output units.
pub const PWH_RMS_LEVELS: [f64; 5] = [0.1, 0.325, 0.55, 0.775, 1.0];

const TRUTH_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const TEST_STREAM: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// `H_o(q) = (1 - 1.568 q^-1 + 0.902 q^-2) / (1 - 1.901 q^-1 + 0.9409 q^-2)`.
pub fn reference_noise_filter() -> TransferFunctionParams {
    TransferFunctionParams {
        b: vec![1.0, -1.568, 0.902],
        a: vec![-1.901, 0.9409],
        n_k: 0,
    }
}

/// `sqrt(sum g_t^2)` over the first `len` impulse-response samples.
pub fn h2_norm(p: &TransferFunctionParams, len: usize) -> Result<f64> {
    Ok(p.impulse_response(len)?.iter().map(|g| g * g).sum::<f64>().sqrt())
}

/// Random filter whose poles have modulus in `[min_modulus, max_modulus]`
/// (complex pairs, plus one real pole for odd orders) and whose numerator
/// entries are standard normal.
pub fn random_stable_filter_in<R: Rng + ?Sized>(
    rng: &mut R,
    n_b: usize,
    n_a: usize,
    n_k: usize,
    min_modulus: f64,
    max_modulus: f64,
) -> TransferFunctionParams {
    let mut roots = Vec::with_capacity(n_a);
    for _ in 0..n_a / 2 {
        let r = rng.random_range(min_modulus..=max_modulus);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let z = Complex64::from_polar(r, theta);
        roots.push(z);
        roots.push(z.conj());
    }
    if n_a % 2 == 1 {
        let r = rng.random_range(min_modulus..=max_modulus);
        roots.push(Complex64::new(if rng.random() { r } else { -r }, 0.0));
    }
    let b = (0..=n_b).map(|_| StandardNormal.sample(rng)).collect();
    TransferFunctionParams {
        b,
        a: monic_from_roots(&roots),
        n_k,
    }
}

pub fn random_stable_filter<R: Rng + ?Sized>(
    rng: &mut R,
    n_b: usize,
    n_a: usize,
    n_k: usize,
    max_modulus: f64,
) -> TransferFunctionParams {
    random_stable_filter_in(rng, n_b, n_a, n_k, 0.0, max_modulus)
}

pub fn white_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

/// Tone layout of a random-phase multisine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultisineSpec {
    /// Highest excited frequency, cycles per sample.
    pub band: f64,
    /// Number of equal-amplitude tones spread evenly over the excited DFT bins;
    /// `None` excites every bin up to `band`.
    pub tones: Option<usize>,
}

impl Default for MultisineSpec {
    fn default() -> Self {
        Self {
            band: 0.25,
            tones: None,
        }
    }
}

/// Periodic multisine over `len` samples with equal tone amplitudes,
/// independent uniform phases and exactly the requested rms.
pub fn multisine<R: Rng + ?Sized>(rng: &mut R, len: usize, rms: f64, spec: &MultisineSpec) -> Result<Vec<f64>> {
    let top = ((spec.band.min(0.5) * len as f64).floor() as usize).min(len.saturating_sub(1) / 2);
    if top == 0 {
        return Err(Error::InvalidParams(format!(
            "band {} excites no DFT bin of a {len}-sample record",
            spec.band
        )));
    }
    let bins: Vec<usize> = match spec.tones {
        None => (1..=top).collect(),
        Some(n) => {
            let n = n.clamp(1, top);
            (0..n).map(|i| 1 + i * (top - 1) / (n - 1).max(1)).collect()
        }
    };
    let w = 2.0 * std::f64::consts::PI / len as f64;
    let mut x = vec![0.0; len];
    for &k in &bins {
        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        for (t, xt) in x.iter_mut().enumerate() {
            // exact integer reduction keeps the argument small for long records
            let arg = w * ((k * t) % len) as f64 + phase;
            *xt += arg.cos();
        }
    }
    let actual = (x.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= rms / actual);
    Ok(x)
}

/// Scales the numerator so the impulse response has the given l2 norm.
fn with_h2_norm(mut p: TransferFunctionParams, norm: f64) -> Result<TransferFunctionParams> {
    let n = h2_norm(&p, 4096)?;
    p.b.iter_mut().for_each(|v| *v *= norm / n);
    Ok(p)
}

/// How the synthetic data were excited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Excitation {
    WhiteNoise { std: f64 },
    Multisine {
        rms_levels: Vec<f64>,
        realizations: usize,
        spec: MultisineSpec,
    },
}

/// Ground truth of a synthetic problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSystem {
    pub model: DynoNetModel,
    /// Filter shaping the white disturbance; `None` means white.
    pub noise_filter: Option<TransferFunctionParams>,
    /// Standard deviation of the white driving noise `e`.
    pub noise_std: f64,
    pub quantizer: Option<Quantizer>,
    pub excitation: Excitation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhColoredOptions {
    /// Standard deviation of the colored disturbance `H_o e`.
    pub noise_std: f64,
    pub input_std: f64,
    /// Length of the noiseless held-out record (0 = same as training).
    pub test_len: usize,
}

impl Default for WhColoredOptions {
    fn default() -> Self {
        Self {
            noise_std: COLORED_NOISE_STD,
            input_std: 1.0,
            test_len: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WhColoredData {
    pub u: Vec<f64>,
    pub y_clean: Vec<f64>,
    pub y_noisy: Vec<f64>,
    pub u_test: Vec<f64>,
    pub y_test: Vec<f64>,
    pub truth: SyntheticSystem,
}

/// Seeded Wiener-Hammerstein truth: second-order filters with unit l2 gain
/// around a soft saturation, scaled so the output has a moderate amplitude.
pub fn wh_truth(seed: u64) -> Result<DynoNetModel> {
    let mut r = stream(seed, TRUTH_STREAM);
    let g1 = with_h2_norm(random_stable_filter_in(&mut r, 2, 2, 1, 0.5, 0.9), 1.0)?;
    let g2 = with_h2_norm(random_stable_filter_in(&mut r, 2, 2, 0, 0.5, 0.9), 0.3)?;
    DynoNetModel::new(vec![
        Block::Linear(MimoGBlock::from_siso(&g1)),
        Block::Saturation(SoftSaturation { limits: vec![2.0] }),
        Block::Linear(MimoGBlock::from_siso(&g2)),
    ])
}

fn simulate_siso(model: &DynoNetModel, u: &[f64]) -> Result<Vec<f64>> {
    Ok(model.simulate(&Signal::from_samples(u.to_vec())?)?.into_vec())
}

pub fn generate_wh_colored(seed: u64, len: usize) -> Result<WhColoredData> {
    generate_wh_colored_with(seed, len, &WhColoredOptions::default())
}

/// Training record `y = WH(u) + H_o e` plus a noiseless held-out record.
pub fn generate_wh_colored_with(seed: u64, len: usize, opts: &WhColoredOptions) -> Result<WhColoredData> {
    if len == 0 {
        return Err(Error::InvalidParams("record length must be positive".into()));
    }
    let model = wh_truth(seed)?;
    let h = reference_noise_filter();
    let sigma_e = opts.noise_std / h2_norm(&h, 20_000)?;
    let u = white_noise(&mut stream(seed, TRAIN_STREAM), len, opts.input_std);
    let y_clean = simulate_siso(&model, &u)?;
    let e = white_noise(&mut stream(seed, NOISE_STREAM), len, sigma_e);
    let v = h.filter(&e)?;
    let y_noisy = y_clean.iter().zip(&v).map(|(a, b)| a + b).collect();
    let test_len = if opts.test_len == 0 { len } else { opts.test_len };
    let u_test = white_noise(&mut stream(seed, TEST_STREAM), test_len, opts.input_std);
    let y_test = simulate_siso(&model, &u_test)?;
    Ok(WhColoredData {
        u,
        y_clean,
        y_noisy,
        u_test,
        y_test,
        truth: SyntheticSystem {
            model,
            noise_filter: Some(h),
            noise_std: sigma_e,
            quantizer: None,
            excitation: Excitation::WhiteNoise {
                std: opts.input_std,
            },
        },
    })
}

/// Twelve bins of width 1/6 over `[-1, 1]`.
pub fn pwh_quantizer() -> Quantizer {
    Quantizer::uniform(-1.0, 1.0, 12).expect("valid uniform quantizer")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PwhQuantizedOptions {
    pub rms_levels: Vec<f64>,
    pub realizations: usize,
    pub noise_std: f64,
    pub multisine: MultisineSpec,
    /// Held-out realizations per rms level.
    pub test_realizations: usize,
}

impl Default for PwhQuantizedOptions {
    fn default() -> Self {
        Self {
            rms_levels: PWH_RMS_LEVELS.to_vec(),
            realizations: 4,
            noise_std: 0.05,
            multisine: MultisineSpec::default(),
            test_realizations: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PwhQuantizedData {
    /// One sequence per (rms level, realization), level-major.
    pub u: Signal,
    pub y_latent: Signal,
    /// Observed bins in the same order as the samples of `u`.
    pub z: Vec<usize>,
    pub rms: Vec<f64>,
    pub u_test: Signal,
    pub y_test: Signal,
    pub rms_test: Vec<f64>,
    pub truth: SyntheticSystem,
}

/// Seeded parallel Wiener-Hammerstein truth with two branches.
pub fn pwh_truth(seed: u64) -> Result<DynoNetModel> {
    let mut r = stream(seed, TRUTH_STREAM);
    let mut front = Vec::new();
    for _ in 0..2 {
        front.push(vec![with_h2_norm(random_stable_filter_in(&mut r, 2, 2, 1, 0.5, 0.9), 1.0)?]);
    }
    let back = (0..2)
        .map(|_| with_h2_norm(random_stable_filter_in(&mut r, 2, 2, 1, 0.5, 0.9), 0.6))
        .collect::<Result<Vec<_>>>()?;
    DynoNetModel::new(vec![
        Block::Linear(MimoGBlock::from_cells(&front)?),
        Block::Saturation(SoftSaturation {
            limits: vec![0.8, 1.2],
        }),
        Block::Linear(MimoGBlock::from_cells(&[back])?),
    ])
}

fn multisine_batch(
    r: &mut ChaCha8Rng,
    levels: &[f64],
    realizations: usize,
    len: usize,
    spec: &MultisineSpec,
) -> Result<(Signal, Vec<f64>)> {
    let mut seqs = Vec::with_capacity(levels.len() * realizations);
    let mut rms = Vec::with_capacity(seqs.capacity());
    for &level in levels {
        for _ in 0..realizations {
            seqs.push(multisine(r, len, level, spec)?);
            rms.push(level);
        }
    }
    Ok((Signal::from_sequences(&seqs)?, rms))
}

pub fn generate_pwh_quantized(
    seed: u64,
    len: usize,
    rms_levels: &[f64],
    realizations: usize,
) -> Result<PwhQuantizedData> {
    let opts = PwhQuantizedOptions {
        rms_levels: rms_levels.to_vec(),
        realizations,
        ..PwhQuantizedOptions::default()
    };
    generate_pwh_quantized_with(seed, len, &opts)
}

/// Multisine records through the PWH truth, Gaussian noise, then 12-bin quantization.
pub fn generate_pwh_quantized_with(seed: u64, len: usize, opts: &PwhQuantizedOptions) -> Result<PwhQuantizedData> {
    if opts.rms_levels.is_empty() || opts.rms_levels.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::InvalidParams("rms levels must be positive".into()));
    }
    if opts.realizations == 0 || len == 0 {
        return Err(Error::InvalidParams("need at least one realization of positive length".into()));
    }
    let model = pwh_truth(seed)?;
    let quantizer = pwh_quantizer();
    let (u, rms) = multisine_batch(
        &mut stream(seed, TRAIN_STREAM),
        &opts.rms_levels,
        opts.realizations,
        len,
        &opts.multisine,
    )?;
    let y_latent = model.simulate(&u)?;
    let mut noise = stream(seed, NOISE_STREAM);
    let z = y_latent
        .as_slice()
        .iter()
        .map(|&y| {
            let e: f64 = StandardNormal.sample(&mut noise);
            quantizer.quantize_value(y + opts.noise_std * e)
        })
        .collect();
    let (u_test, rms_test) = multisine_batch(
        &mut stream(seed, TEST_STREAM),
        &opts.rms_levels,
        opts.test_realizations.max(1),
        len,
        &opts.multisine,
    )?;
    let y_test = model.simulate(&u_test)?;
    Ok(PwhQuantizedData {
        u,
        y_latent,
        z,
        rms,
        u_test,
        y_test,
        rms_test,
        truth: SyntheticSystem {
            model,
            noise_filter: None,
            noise_std: opts.noise_std,
            quantizer: Some(quantizer),
            excitation: Excitation::Multisine {
                rms_levels: opts.rms_levels.clone(),
                realizations: opts.realizations,
                spec: opts.multisine,
            },
        },
    })
}
