use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dynotf::blocks::{PwhConfig, WhConfig};
use dynotf::datagen::{
    generate_pwh_quantized_with, generate_wh_colored_with, Excitation, MultisineSpec, PwhQuantizedOptions,
    WhColoredOptions, COLORED_NOISE_STD,
};
use dynotf::gradcheck::{run_all, CheckRow, GradcheckConfig, DEFAULT_TOLERANCE};
use dynotf::io::{read_dataset, read_json, read_model, write_bode, write_dataset, write_json, write_trace, Dataset, ModelFile, Target};
use dynotf::metrics::autocorrelation;
use dynotf::optim::{AdamConfig, PlateauRule, TrainConfig};
use dynotf::pem::{log_frequencies, PemModel};
use dynotf::pipeline::{evaluate, fit, Architecture, FitSpec, LossKind, Metrics};
use dynotf::{Quantizer, Signal, TransferFunctionParams};

use crate::config::resolve;
use crate::{ArchArg, CliError, DataKind, EvalArgs, GenerateArgs, GradcheckArgs, LossArg, TrainArgs};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Residual autocorrelation lags reported after PEM training.
const WHITENESS_LAGS: usize = 20;

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn out_dir(dir: Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = dir.unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Writes to stdout; a closed pipe (`dynotf eval ... | head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    emit(&text);
    Ok(())
}

fn positive(name: &str, v: f64) -> CliResult<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(usage(format!("--{name} must be positive and finite, got {v}")))
    }
}

/// Ground truth written next to generated data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthMeta {
    pub schema_version: u32,
    pub kind: DataKind,
    pub seed: u64,
    pub samples_per_record: usize,
    pub train_records: usize,
    pub test_records: usize,
    /// Shaping filter of the output disturbance; absent for white noise.
    pub noise_filter: Option<TransferFunctionParams>,
    /// Std of the white noise driving the disturbance.
    pub noise_std: f64,
    pub quantizer: Option<Quantizer>,
    pub excitation: Excitation,
    /// Rms level of each training record, in file order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_rms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_rms: Vec<f64>,
}

#[derive(Serialize)]
struct Stats {
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
}

fn stats(x: &[f64]) -> Stats {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Stats {
        mean,
        std: var.sqrt(),
        min: x.iter().copied().fold(f64::INFINITY, f64::min),
        max: x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Serialize)]
struct GenerateSummary {
    kind: DataKind,
    seed: u64,
    files: Vec<PathBuf>,
    train_rows: usize,
    test_rows: usize,
    records: usize,
    input: Stats,
    #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<Stats>,
    /// Count of training samples per bin.
    #[serde(skip_serializing_if = "Option::is_none")]
    bin_counts: Option<Vec<usize>>,
}

pub fn generate(flags: GenerateArgs) -> CliResult<()> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let kind = a.kind.ok_or_else(|| usage("--kind is required"))?;
    let seed = a.seed.unwrap_or(1);
    if a.noise_std.is_some_and(|s| !(s.is_finite() && s >= 0.0)) {
        return Err(usage("--noise-std must be non-negative"));
    }
    let dir = out_dir(a.out.clone())?;
    let files: Vec<PathBuf> = ["train.csv", "test.csv", "truth_model.json", "truth_meta.json"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    let (train, test, meta, model) = match kind {
        DataKind::WhColored => {
            let pwh_only = [
                ("rms_levels", a.rms_levels.is_some()),
                ("realizations", a.realizations.is_some()),
                ("test_realizations", a.test_realizations.is_some()),
                ("band", a.band.is_some()),
                ("tones", a.tones.is_some()),
            ];
            if let Some((name, _)) = pwh_only.iter().find(|(_, set)| *set) {
                return Err(usage(format!("`{name}` only applies to --kind pwh-quantized")));
            }
            let len = a.samples.unwrap_or(20_000);
            let opts = WhColoredOptions {
                noise_std: a.noise_std.unwrap_or(COLORED_NOISE_STD),
                input_std: positive("input-std", a.input_std.unwrap_or(1.0))?,
                test_len: a.test_samples.unwrap_or(len),
            };
            let d = generate_wh_colored_with(seed, len, &opts)?;
            let train = Dataset::real(Signal::from_samples(d.u)?, Signal::from_samples(d.y_noisy)?)?;
            let test = Dataset::real(Signal::from_samples(d.u_test)?, Signal::from_samples(d.y_test)?)?;
            let meta = TruthMeta {
                schema_version: REPORT_SCHEMA_VERSION,
                kind,
                seed,
                samples_per_record: len,
                train_records: 1,
                test_records: 1,
                noise_filter: d.truth.noise_filter,
                noise_std: d.truth.noise_std,
                quantizer: None,
                excitation: d.truth.excitation,
                train_rms: vec![],
                test_rms: vec![],
            };
            (train, test, meta, d.truth.model)
        }
        DataKind::PwhQuantized => {
            if a.input_std.is_some() || a.test_samples.is_some() {
                return Err(usage("`input_std` and `test_T` only apply to --kind wh-colored"));
            }
            let defaults = PwhQuantizedOptions::default();
            let len = a.samples.unwrap_or(4096);
            let opts = PwhQuantizedOptions {
                rms_levels: a.rms_levels.clone().unwrap_or(defaults.rms_levels),
                realizations: a.realizations.unwrap_or(defaults.realizations),
                noise_std: a.noise_std.unwrap_or(defaults.noise_std),
                multisine: MultisineSpec {
                    band: a.band.unwrap_or(defaults.multisine.band),
                    tones: a.tones.or(defaults.multisine.tones),
                },
                test_realizations: a.test_realizations.unwrap_or(defaults.test_realizations),
            };
            let d = generate_pwh_quantized_with(seed, len, &opts)?;
            let meta = TruthMeta {
                schema_version: REPORT_SCHEMA_VERSION,
                kind,
                seed,
                samples_per_record: len,
                train_records: d.u.batch(),
                test_records: d.u_test.batch(),
                noise_filter: None,
                noise_std: d.truth.noise_std,
                quantizer: d.truth.quantizer.clone(),
                excitation: d.truth.excitation,
                train_rms: d.rms,
                test_rms: d.rms_test,
            };
            (Dataset::bins(d.u, d.z)?, Dataset::real(d.u_test, d.y_test)?, meta, d.truth.model)
        }
    };
    write_dataset(&files[0], &train)?;
    write_dataset(&files[1], &test)?;
    write_json(&files[2], &ModelFile::new(model))?;
    write_json(&files[3], &meta)?;
    let bin_counts = train.z().map(|z| {
        let bins = meta.quantizer.as_ref().map_or(0, Quantizer::bins);
        let mut counts = vec![0; bins];
        z.iter().for_each(|&m| counts[m] += 1);
        counts
    });
    print_json(&GenerateSummary {
        kind,
        seed,
        train_rows: train.rows(),
        test_rows: test.rows(),
        records: train.u.batch(),
        input: stats(train.u.as_slice()),
        output: train.y().map(|y| stats(y.as_slice())),
        bin_counts,
        files,
    })
}

/// Holds out the trailing `fraction` of records, or of samples for a single record.
fn split(data: Dataset, fraction: f64) -> CliResult<(Dataset, Dataset)> {
    let (batch, len, _) = data.u.shape();
    let keep_records = |idx: &[usize]| -> CliResult<Dataset> {
        let u = data.u.select_batch(idx);
        Ok(match &data.target {
            Target::Real(y) => Dataset::real(u, y.select_batch(idx))?,
            Target::Bins(z) => Dataset::bins(u, idx.iter().flat_map(|&b| z[b * len..(b + 1) * len].iter().copied()).collect())?,
        })
    };
    if batch > 1 {
        let n_test = ((batch as f64 * fraction).round() as usize).clamp(1, batch - 1);
        let train: Vec<usize> = (0..batch - n_test).collect();
        let test: Vec<usize> = (batch - n_test..batch).collect();
        return Ok((keep_records(&train)?, keep_records(&test)?));
    }
    let cut = len - ((len as f64 * fraction).round() as usize).clamp(1, len - 1);
    let part = |lo: usize, hi: usize| -> CliResult<Dataset> {
        let u = data.u.slice_time(lo, hi);
        Ok(match &data.target {
            Target::Real(y) => Dataset::real(u, y.slice_time(lo, hi))?,
            Target::Bins(z) => Dataset::bins(u, z[lo..hi].to_vec())?,
        })
    };
    Ok((part(0, cut)?, part(cut, len)?))
}

#[derive(Serialize)]
struct Whiteness {
    lags: usize,
    max_abs_autocorrelation: f64,
    /// `3 / sqrt(T)` for the training length `T`.
    bound: f64,
    within_bound: bool,
}

#[derive(Serialize)]
struct NoiseModelReport {
    b: Vec<f64>,
    a: Vec<f64>,
    invertible: bool,
}

#[derive(Serialize)]
struct TrainReport {
    schema_version: u32,
    command: &'static str,
    loss: LossKind,
    architecture: Architecture,
    parameters: usize,
    seed: u64,
    learning_rate: f64,
    final_learning_rate: f64,
    iterations_requested: usize,
    iterations: usize,
    stopped_on_plateau: bool,
    best_iteration: usize,
    best_loss: Option<f64>,
    recoveries: usize,
    skipped_steps: usize,
    wall_time_s: f64,
    normalized: bool,
    /// Where the held-out metrics come from: `test_file`, `holdout` or `train`.
    split: &'static str,
    train_samples: usize,
    metrics: Metrics,
    train_metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_e: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clamped_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_model: Option<NoiseModelReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    whiteness: Option<Whiteness>,
    files: Vec<PathBuf>,
}

fn architecture(a: &TrainArgs, kind: ArchArg) -> CliResult<Architecture> {
    Ok(match kind {
        ArchArg::Wh => {
            if a.n_k.is_some() || a.branches.is_some() {
                return Err(usage("`n_k` and `branches` only apply to --arch pwh"));
            }
            let d = WhConfig::default();
            Architecture::Wh(WhConfig {
                n_b: a.n_b.unwrap_or(d.n_b),
                n_a: a.n_a.unwrap_or(d.n_a),
                hidden: a.hidden.unwrap_or(d.hidden),
            })
        }
        ArchArg::Pwh => {
            let d = PwhConfig::default();
            Architecture::Pwh(PwhConfig {
                n_b: a.n_b.unwrap_or(d.n_b),
                n_a: a.n_a.unwrap_or(d.n_a),
                n_k: a.n_k.unwrap_or(d.n_k),
                hidden: a.hidden.unwrap_or(d.hidden),
                branches: a.branches.unwrap_or(d.branches),
            })
        }
    })
}

pub fn train(flags: TrainArgs) -> CliResult<()> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let data_path = a.data.clone().ok_or_else(|| usage("--data is required"))?;
    let data = read_dataset(&data_path)?;
    let loss = match a.loss.unwrap_or(if data.z().is_some() { LossArg::Quantized } else { LossArg::Pem }) {
        LossArg::Pem => LossKind::Pem,
        LossArg::Quantized => LossKind::Quantized,
        LossArg::Mse => LossKind::Mse,
    };
    let arch = architecture(&a, a.arch.unwrap_or(if loss == LossKind::Quantized { ArchArg::Pwh } else { ArchArg::Wh }))?;
    let hidden = match arch {
        Architecture::Wh(c) => c.hidden,
        Architecture::Pwh(c) => c.hidden,
    };
    if hidden == 0 || matches!(arch, Architecture::Pwh(c) if c.branches == 0) {
        return Err(usage("`hidden` and `branches` must be at least 1"));
    }
    if loss != LossKind::Pem && (a.noise_n_b.is_some() || a.noise_n_a.is_some()) {
        return Err(usage("noise-model orders only apply to --loss pem"));
    }
    if loss != LossKind::Quantized && (a.thresholds.is_some() || a.sigma_e_init.is_some()) {
        return Err(usage("`thresholds` and `sigma_e_init` only apply to --loss quantized"));
    }
    let quantized = loss == LossKind::Quantized;
    let lr = positive("lr", a.lr.unwrap_or(if quantized { 1e-3 } else { 1e-4 }))?;
    let iterations = a.iterations.unwrap_or(if quantized { 4000 } else { 40_000 });
    let holdout = a.holdout.unwrap_or(0.2);
    if !(0.0..1.0).contains(&holdout) {
        return Err(usage("--holdout must be in [0, 1)"));
    }
    let plateau = match (a.plateau_window, a.plateau_tol) {
        (Some(window), tol) => Some(PlateauRule { window, rel_tol: tol.unwrap_or(1e-6) }),
        (None, Some(_)) => return Err(usage("--plateau-tol needs --plateau-window")),
        (None, None) => None,
    };
    let quantizer = if quantized {
        Some(match a.thresholds.clone() {
            Some(t) => Quantizer::new(t)?,
            None => Quantizer::uniform(-1.0, 1.0, 12)?,
        })
    } else {
        None
    };
    let seed = a.seed.unwrap_or(0);
    let spec = FitSpec {
        loss,
        architecture: arch,
        train: TrainConfig {
            iterations,
            adam: AdamConfig { lr, ..AdamConfig::default() },
            minibatch: a.minibatch,
            seed,
            log_every: a.log_every.unwrap_or(1000),
            plateau,
        },
        normalize: a.normalize.unwrap_or(true),
        noise_order: (a.noise_n_b.unwrap_or(2), a.noise_n_a.unwrap_or(2)),
        quantizer,
        sigma_e_init: positive("sigma-e-init", a.sigma_e_init.unwrap_or(0.1))?,
    };

    let (train_data, test_data, split_kind) = match &a.test {
        Some(p) => (data, read_dataset(p)?, "test_file"),
        None if holdout == 0.0 => (data.clone(), data, "train"),
        None => {
            let (tr, te) = split(data, holdout)?;
            (tr, te, "holdout")
        }
    };
    let dir = out_dir(a.out.clone())?;
    let result = fit(&train_data, &spec)?;
    let model_path = dir.join("model.json");
    let trace_path = dir.join("loss_trace.csv");
    write_json(&model_path, &result.model)?;
    write_trace(&trace_path, &result.outcome.trace)?;
    let mut files = vec![model_path, trace_path];

    let (metrics, _) = evaluate(&result.model, &test_data)?;
    let (train_metrics, _) = evaluate(&result.model, &train_data)?;
    let mut noise_model = None;
    let mut whiteness = None;
    if let Some(h) = &result.model.h_check {
        let pem = PemModel::new(result.model.model.clone(), h.clone())?;
        noise_model = Some(NoiseModelReport { b: h.b.clone(), a: h.a.clone(), invertible: pem.noise_model_is_invertible() });
        let y = train_data.y().expect("pem trains on real outputs");
        let (u, y) = match &result.model.normalization {
            Some(n) => (n.normalize_u(&train_data.u)?, n.normalize_y(y)?),
            None => (train_data.u.clone(), y.clone()),
        };
        let eps = pem.prediction_error(&u, &y)?;
        let acf = autocorrelation(eps.as_slice(), WHITENESS_LAGS);
        let worst = acf.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let bound = 3.0 / (eps.as_slice().len() as f64).sqrt();
        whiteness = Some(Whiteness { lags: WHITENESS_LAGS, max_abs_autocorrelation: worst, bound, within_bound: worst <= bound });
        let bode_path = dir.join("bode.csv");
        write_bode(&bode_path, &pem.bode(&log_frequencies(1e-3, 0.5, 200), None))?;
        files.push(bode_path);
    }
    let report_path = dir.join("report.json");
    files.push(report_path.clone());
    let o = &result.outcome;
    let report = TrainReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "train",
        loss,
        architecture: arch,
        parameters: result.model.model.num_parameters(),
        seed,
        learning_rate: lr,
        final_learning_rate: o.final_lr,
        iterations_requested: iterations,
        iterations: o.trace.len(),
        stopped_on_plateau: o.stopped_on_plateau,
        best_iteration: o.best_iteration,
        best_loss: o.best_loss.is_finite().then_some(o.best_loss),
        recoveries: o.recoveries,
        skipped_steps: o.skipped_steps,
        wall_time_s: o.wall_time_s,
        normalized: spec.normalize,
        split: split_kind,
        train_samples: train_data.rows(),
        metrics,
        train_metrics,
        sigma_e: result.model.sigma_e_data_units(),
        clamped_samples: quantized.then_some(result.clamped_samples),
        noise_model,
        whiteness,
        files,
    };
    write_json(&report_path, &report)?;
    print_json(&report)
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    command: &'static str,
    model: PathBuf,
    data: PathBuf,
    metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_e: Option<f64>,
}

fn read_truth(path: &Path) -> CliResult<TruthMeta> {
    Ok(read_json(path)?)
}

pub fn eval(flags: EvalArgs) -> CliResult<()> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let model_path = a.model.clone().ok_or_else(|| usage("--model is required"))?;
    let data_path = a.data.clone().ok_or_else(|| usage("--data is required"))?;
    if a.truth.is_some() && a.bode.is_none() {
        return Err(usage("--truth is only used with --bode"));
    }
    let model = read_model(&model_path)?;
    let data = read_dataset(&data_path)?;
    let (metrics, sim) = evaluate(&model, &data)?;
    if let Some(p) = &a.simulation {
        write_dataset(p, &Dataset::real(data.u.clone(), sim)?)?;
    }
    if let Some(p) = &a.bode {
        let h = model
            .h_check
            .clone()
            .ok_or_else(|| usage("--bode needs a model trained with --loss pem"))?;
        let truth = match &a.truth {
            Some(t) => read_truth(t)?.noise_filter,
            None => None,
        };
        let points = a.bode_points.unwrap_or(200);
        if points < 2 {
            return Err(usage("--bode-points must be at least 2"));
        }
        let pem = PemModel::new(model.model.clone(), h)?;
        write_bode(p, &pem.bode(&log_frequencies(1e-3, 0.5, points), truth.as_ref()))?;
    }
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "eval",
        model: model_path,
        data: data_path,
        metrics,
        sigma_e: model.sigma_e_data_units(),
    };
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    print_json(&report)
}

#[derive(Serialize)]
struct GradcheckReport<'a> {
    schema_version: u32,
    command: &'static str,
    seed: u64,
    all_passed: bool,
    suites: &'a [CheckRow],
}

pub fn gradcheck(flags: GradcheckArgs) -> CliResult<()> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let defaults = GradcheckConfig::default();
    let cfg = GradcheckConfig {
        seed: a.seed.unwrap_or(defaults.seed),
        gblock_cases: a.cases.unwrap_or(defaults.gblock_cases),
        model_len: a.samples.unwrap_or(defaults.model_len),
        tolerance: positive("tolerance", a.tolerance.unwrap_or(DEFAULT_TOLERANCE))?,
        corrupt: a.corrupt_gradient.unwrap_or(false),
    };
    if cfg.gblock_cases == 0 || cfg.model_len == 0 {
        return Err(usage("--cases and --T must be positive"));
    }
    let rows = run_all(&cfg)?;
    let mut table = format!("{:<30} {:>8} {:>12} {:>10}  status", "suite", "checks", "max_rel_err", "tolerance");
    for r in &rows {
        table += &format!(
            "\n{:<30} {:>8} {:>12.3e} {:>10.1e}  {}",
            r.suite,
            r.checks,
            r.max_rel_err,
            r.tolerance,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    emit(&table);
    let failed = rows.iter().filter(|r| !r.pass).count();
    if let Some(p) = &a.out {
        write_json(p, &GradcheckReport { schema_version: REPORT_SCHEMA_VERSION, command: "gradcheck", seed: cfg.seed, all_passed: failed == 0, suites: &rows })?;
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} of {} gradient suites failed", rows.len())));
    }
    Ok(())
}
