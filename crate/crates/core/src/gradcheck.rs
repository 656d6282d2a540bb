//! Finite-difference checks of the analytic gradients.
//!
//! Each suite compares analytic adjoints against central differences and reports
//! the worst relative error. Runs are deterministic given the seed.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::blocks::{build_pwh, build_wh, Block, DynoNetModel, PwhConfig, WhConfig};
use crate::datagen::random_stable_filter;
use crate::error::Result;
use crate::grad;
use crate::pem::PemModel;
use crate::quantized::{quantized_loglik, NoiseScale, Quantizer};
use crate::signal::Signal;
use crate::tape::{NodeId, ParameterStore, Tape, Value};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Central difference with step `1e-6 * max(1, |theta|)`.
pub fn central_difference(theta: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = 1e-6 * theta.abs().max(1.0);
    let (hp, hm) = (theta + h, theta - h);
    (f(hp) - f(hm)) / (hp - hm)
}

/// [`central_difference`] with the loss accumulated in double-double precision,
/// so that the difference quotient carries no cancellation noise.
fn central_difference_dd(theta: f64, mut f: impl FnMut(f64) -> TwoFloat) -> f64 {
    let h = 1e-6 * theta.abs().max(1.0);
    let (hp, hm) = (theta + h, theta - h);
    f64::from((f(hp) - f(hm)) / (hp - hm))
}

/// `sum_t w_t y_t` for `y = q^-n_k B/A u`, by direct recursion in double-double.
fn weighted_output_dd(b: &[f64], a: &[f64], n_k: usize, u: &[f64], w: &[f64]) -> TwoFloat {
    let mut y: Vec<TwoFloat> = Vec::with_capacity(u.len());
    let mut total = TwoFloat::from(0.0);
    for t in 0..u.len() {
        let mut acc = TwoFloat::from(0.0);
        for (j, &bj) in b.iter().enumerate() {
            if t >= n_k + j {
                acc += TwoFloat::new_mul(bj, u[t - n_k - j]);
            }
        }
        for (i, &ai) in a.iter().enumerate() {
            if t > i {
                acc -= y[t - 1 - i] * ai;
            }
        }
        total += acc * w[t];
        y.push(acc);
    }
    total
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random filters in the G-block suites.
    pub gblock_cases: usize,
    /// Sequence length for the model-level suites.
    pub model_len: usize,
    pub tolerance: f64,
    /// Negative control: scales every analytic gradient by `1 + 1e-3` before comparing.
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            gblock_cases: 200,
            model_len: 64,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub suite: String,
    /// Number of scalar gradient entries compared.
    pub checks: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Default)]
struct Acc {
    checks: usize,
    worst: f64,
}

impl Acc {
    fn add(&mut self, analytic: f64, numeric: f64, corrupt: bool) {
        let a = if corrupt { analytic * (1.0 + 1e-3) } else { analytic };
        let e = rel_err(a, numeric);
        // NaN must fail the suite rather than vanish in `max`.
        self.worst = if e.is_nan() { f64::INFINITY } else { self.worst.max(e) };
        self.checks += 1;
    }

    fn row(&self, suite: &str, tolerance: f64) -> CheckRow {
        CheckRow {
            suite: suite.to_string(),
            checks: self.checks,
            max_rel_err: self.worst,
            tolerance,
            pass: self.checks > 0 && self.worst <= tolerance,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

const GBLOCK_LENGTHS: [usize; 3] = [8, 32, 128];

/// Single-filter adjoints of `L = sum_t w_t y_t` for random stable filters with
/// numerator and denominator orders up to 8.
///
/// The reference loss is an independent double-double recursion: resonant
/// high-order filters make the f64 difference quotient lose several digits to
/// cancellation, which would swamp the tolerance without saying anything about
/// the adjoints.
pub fn gblock_suites(cfg: &GradcheckConfig) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut b_acc, mut a_acc, mut u_acc) = (Acc::default(), Acc::default(), Acc::default());
    for case in 0..cfg.gblock_cases {
        let n_b = rng.random_range(0..=8);
        let n_a = rng.random_range(0..=8);
        let n_k = rng.random_range(0..=2);
        let len = GBLOCK_LENGTHS[case % GBLOCK_LENGTHS.len()];
        let p = random_stable_filter(&mut rng, n_b, n_a, n_k, 0.9);
        let u = normal_vec(&mut rng, len);
        let w = normal_vec(&mut rng, len);
        let y = p.filter(&u)?;
        let g = grad::backward(&p, &u, &y, &w)?;
        for j in 0..p.b.len() {
            let fd = central_difference_dd(p.b[j], |v| {
                let mut b = p.b.clone();
                b[j] = v;
                weighted_output_dd(&b, &p.a, n_k, &u, &w)
            });
            b_acc.add(g.b_bar[j], fd, cfg.corrupt);
        }
        for j in 0..p.a.len() {
            let fd = central_difference_dd(p.a[j], |v| {
                let mut a = p.a.clone();
                a[j] = v;
                weighted_output_dd(&p.b, &a, n_k, &u, &w)
            });
            a_acc.add(g.a_bar[j], fd, cfg.corrupt);
        }
        for t in 0..len {
            let fd = central_difference_dd(u[t], |v| {
                let mut x = u.clone();
                x[t] = v;
                weighted_output_dd(&p.b, &p.a, n_k, &x, &w)
            });
            u_acc.add(g.u_bar[t], fd, cfg.corrupt);
        }
    }
    Ok(vec![
        b_acc.row("g_block.b", cfg.tolerance),
        a_acc.row("g_block.a", cfg.tolerance),
        u_acc.row("g_block.u", cfg.tolerance),
    ])
}

/// Compares `backward_into` against central differences for every registered scalar.
fn check_store(
    store: &ParameterStore,
    build: impl Fn(&mut Tape, &ParameterStore) -> Result<NodeId>,
    acc: &mut Acc,
    corrupt: bool,
) -> Result<()> {
    let mut analytic = store.clone();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &analytic)?;
    tape.backward_into(loss, &mut analytic)?;
    let eval = |s: &ParameterStore| -> f64 {
        let mut tape = Tape::new();
        build(&mut tape, s).and_then(|l| tape.scalar(l)).unwrap_or(f64::NAN)
    };
    let mut probe = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for j in 0..store.value(id).len() {
            let theta = store.value(id)[j];
            let fd = central_difference(theta, |v| {
                probe.value_mut(id)[j] = v;
                eval(&probe)
            });
            probe.value_mut(id)[j] = theta;
            acc.add(analytic.grad(id)[j], fd, corrupt);
        }
    }
    Ok(())
}

/// Moves denominators off their all-zero initial value so recursions are exercised.
fn perturb(model: &mut DynoNetModel, rng: &mut ChaCha8Rng) {
    for block in &mut model.blocks {
        if let Block::Linear(g) = block {
            for c in 0..g.in_channels * g.out_channels {
                let p = random_stable_filter(rng, 0, g.n_a, 0, 0.9);
                g.a[c * g.n_a..(c + 1) * g.n_a].copy_from_slice(&p.a);
            }
            g.b.iter_mut().for_each(|v| *v *= 30.0);
        }
    }
}

fn model_suite(name: &str, model: &DynoNetModel, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckRow> {
    let len = cfg.model_len;
    let u = Signal::new(1, len, model.in_channels(), normal_vec(rng, len * model.in_channels()))?;
    let w = Signal::new(1, len, model.out_channels(), normal_vec(rng, len * model.out_channels()))?;
    let mut store = ParameterStore::new();
    let handles = model.register(&mut store, "")?;
    let mut acc = Acc::default();
    // Mean square of a weighted output keeps the loss nonlinear in the output.
    check_store(
        &store,
        |tape, s| {
            let x = tape.input(u.clone());
            let y = model.forward(tape, s, &handles, x)?;
            let wn = tape.constant(Value::Signal(w.clone()));
            let d = tape.sub(y, wn)?;
            let sq = tape.square(d);
            Ok(tape.mean(sq))
        },
        &mut acc,
        cfg.corrupt,
    )?;
    Ok(acc.row(name, cfg.tolerance))
}

fn pem_suite(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckRow> {
    let len = cfg.model_len;
    let mut model = build_wh(&WhConfig { n_b: 3, n_a: 3, hidden: 4 }, rng);
    perturb(&mut model, rng);
    let mut noise = random_stable_filter(rng, 1, 2, 1, 0.8);
    noise.b.iter_mut().for_each(|v| *v *= 0.3);
    let pem = PemModel::new(model, noise)?;
    let u = Signal::from_samples(normal_vec(rng, len))?;
    let y = Signal::from_samples(normal_vec(rng, len))?;
    let mut store = ParameterStore::new();
    let handles = pem.register(&mut store)?;
    let mut acc = Acc::default();
    check_store(
        &store,
        |tape, s| {
            let (un, yn) = (tape.input(u.clone()), tape.input(y.clone()));
            pem.forward_loss(tape, s, &handles, un, yn)
        },
        &mut acc,
        cfg.corrupt,
    )?;
    Ok(acc.row("pem", cfg.tolerance))
}

/// Gradient of the quantized log-likelihood in the simulated outputs and `log sigma_e`,
/// including samples far in the tails of their bins.
fn quantized_suite(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckRow> {
    let q = Quantizer::uniform(-1.0, 1.0, 12)?;
    let mut acc = Acc::default();
    for case in 0..20 {
        let len = 16;
        let spread = [0.5, 2.0, 6.0][case % 3];
        let y: Vec<f64> = normal_vec(rng, len).into_iter().map(|v| v * spread).collect();
        // Only bounded bins: deep inside an outer bin ln P ~ -1e-12, whose slope no
        // f64 difference quotient can resolve.
        let z: Vec<usize> = (0..len).map(|_| rng.random_range(1..q.bins() - 1)).collect();
        let sigma = [0.05, 0.2, 1.0][(case / 3) % 3];
        let noise = NoiseScale::from_sigma(sigma);
        let ll = quantized_loglik(&y, &z, noise, &q)?;
        let value = |y: &[f64], n: NoiseScale| quantized_loglik(y, &z, n, &q).map(|l| l.value).unwrap_or(f64::NAN);
        for t in 0..len {
            let fd = central_difference(y[t], |v| {
                let mut x = y.clone();
                x[t] = v;
                value(&x, noise)
            });
            acc.add(ll.d_y[t], fd, cfg.corrupt);
        }
        let fd = central_difference(noise.log_sigma_e, |v| value(&y, NoiseScale { log_sigma_e: v }));
        acc.add(ll.d_log_sigma, fd, cfg.corrupt);

        // The same loss recorded on a tape.
        let mut store = ParameterStore::new();
        store.register("y", y.clone())?;
        store.register("log_sigma_e", vec![noise.log_sigma_e])?;
        let zs: Arc<[usize]> = z.clone().into();
        check_store(
            &store,
            |tape, s| {
                let ids: Vec<_> = s.ids().collect();
                let yv = Signal::from_samples(s.value(ids[0]).to_vec())?;
                let yn = tape.input(yv);
                let pv = tape.param(s, ids[0]);
                // Route the parameter through the signal node via an exact identity.
                let yp = tape.custom(&[yn, pv], Box::new(VectorAsSignal))?;
                let ls = tape.param(s, ids[1]);
                tape.quantized_nll(yp, ls, &zs, &q)
            },
            &mut acc,
            cfg.corrupt,
        )?;
    }
    Ok(acc.row("quantized", cfg.tolerance))
}

/// Replaces the values of a signal by a parameter vector of the same size.
struct VectorAsSignal;

impl crate::tape::CustomOp for VectorAsSignal {
    fn name(&self) -> &str {
        "vector_as_signal"
    }

    fn forward(&self, inputs: &[&Value]) -> Result<Value> {
        let (Value::Signal(s), Value::Vector(v)) = (inputs[0], inputs[1]) else {
            return Err(crate::Error::Shape("expected a signal and a vector".into()));
        };
        let (b, t, c) = s.shape();
        Ok(Value::Signal(Signal::new(b, t, c, v.clone())?))
    }

    fn backward(&self, inputs: &[&Value], _output: &Value, out_adj: &Value) -> Result<Vec<Value>> {
        let (Value::Signal(s), Value::Signal(g)) = (inputs[0], out_adj) else {
            return Err(crate::Error::Shape("expected signal adjoint".into()));
        };
        let (b, t, c) = s.shape();
        Ok(vec![
            Value::Signal(Signal::zeros(b, t, c)),
            Value::Vector(g.as_slice().to_vec()),
        ])
    }
}

/// All suites: single G-blocks, the two network structures, the PEM criterion and
/// the quantized likelihood.
pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<CheckRow>> {
    let mut rows = gblock_suites(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut wh = build_wh(&WhConfig { n_b: 4, n_a: 4, hidden: 5 }, &mut rng);
    perturb(&mut wh, &mut rng);
    rows.push(model_suite("wiener_hammerstein", &wh, cfg, &mut rng)?);
    let mut pwh = build_pwh(
        &PwhConfig { n_b: 4, n_a: 4, n_k: 1, hidden: 4, branches: 2 },
        &mut rng,
    );
    perturb(&mut pwh, &mut rng);
    rows.push(model_suite("parallel_wiener_hammerstein", &pwh, cfg, &mut rng)?);
    rows.push(pem_suite(cfg, &mut rng)?);
    rows.push(quantized_suite(cfg, &mut rng)?);
    Ok(rows)
}
