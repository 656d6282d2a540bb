//! Adam and a full-batch training loop with divergence recovery.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{DynoNetModel, ModelHandles};
use crate::error::{Error, Result};
use crate::pem::{PemHandles, PemModel};
use crate::quantized::Quantizer;
use crate::signal::Signal;
use crate::tape::{ParamId, ParameterStore, Tape};

/// Halvings of the learning rate allowed before training gives up.
pub const MAX_RECOVERIES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates shaped like the parameters of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    skipped: usize,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Steps skipped because of non-finite gradients.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Applies one bias-corrected update from the gradients held in `store`.
    /// Returns false (leaving everything untouched) when a gradient is not finite.
    pub fn step(&mut self, store: &mut ParameterStore) -> bool {
        if !store.grads_finite() {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<ParamId>>() {
            let k = id.index();
            let g = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let theta = store.value_mut(id);
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                theta[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        true
    }
}

/// A scalar loss whose gradient can be written into a parameter store.
pub trait Objective {
    /// Loss at the current parameters; gradients are added into `store`.
    fn loss_and_grad(&mut self, store: &mut ParameterStore) -> Result<f64>;

    /// Number of independent sequences available for minibatching.
    fn sequences(&self) -> usize {
        1
    }

    /// Restricts the next evaluations to the given sequences (`None` = all).
    fn select(&mut self, _subset: Option<&[usize]>) {}
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Sequences per step; `None` trains on the whole dataset.
    pub minibatch: Option<usize>,
    pub seed: u64,
    /// Progress is logged every this many iterations (0 = never).
    pub log_every: usize,
    /// Optional early stop once the best loss stops improving.
    pub plateau: Option<PlateauRule>,
}

/// Stops when the best loss improved by at most `rel_tol * |best|` over the last `window` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauRule {
    pub window: usize,
    pub rel_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            adam: AdamConfig::default(),
            minibatch: None,
            seed: 0,
            log_every: 0,
            plateau: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub recoveries: usize,
    pub skipped_steps: usize,
    pub final_lr: f64,
    pub wall_time_s: f64,
    pub stopped_on_plateau: bool,
}

impl TrainOutcome {
    /// Running minimum of the trace.
    pub fn best_curve(&self) -> Vec<f64> {
        self.trace
            .iter()
            .scan(f64::INFINITY, |best, r| {
                *best = best.min(r.loss);
                Some(*best)
            })
            .collect()
    }
}

/// Minimizes `objective` with Adam, leaving the best parameters seen in `store`.
///
/// The loss recorded at iteration `i` is evaluated before the `i`-th update.
/// A divergent evaluation restores the last parameters (and optimizer state)
/// with a finite loss, halves the learning rate and retries, at most
/// [`MAX_RECOVERIES`] times.
pub fn train(
    objective: &mut dyn Objective,
    store: &mut ParameterStore,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut adam = AdamState::new(cfg.adam, store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (f64::INFINITY, 0, store.snapshot());
    let mut good = (store.snapshot(), adam.clone());
    let mut last_good_loss = f64::NAN;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut recoveries = 0;
    let mut lr = cfg.adam.lr;
    let mut iteration = 0;
    let mut best_so_far = Vec::with_capacity(cfg.iterations);
    let mut stopped_on_plateau = false;
    while iteration < cfg.iterations {
        if let Some(k) = cfg.minibatch {
            let n = objective.sequences();
            let mut idx = sample(&mut rng, n, k.clamp(1, n)).into_vec();
            idx.sort_unstable();
            objective.select(Some(&idx));
        }
        store.zero_grad();
        let loss = match objective.loss_and_grad(store) {
            Ok(l) if l.is_finite() => Ok(l),
            Ok(l) => Err(Error::NonFinite(format!("loss {l}"))),
            Err(e) => Err(e),
        };
        let loss = match loss {
            Ok(l) => l,
            Err(e) if e.is_numeric() => {
                if recoveries == MAX_RECOVERIES {
                    store.restore(&best.2);
                    return Err(Error::TrainingDiverged {
                        retries: recoveries,
                        iteration,
                        last_loss: last_good_loss,
                    });
                }
                recoveries += 1;
                lr *= 0.5;
                store.restore(&good.0);
                adam = good.1.clone();
                adam.config.lr = lr;
                log::warn!(
                    "iteration {iteration}: {e}; restored last finite state, learning rate now {:e}",
                    adam.config.lr
                );
                continue;
            }
            Err(e) => return Err(e),
        };
        good = (store.snapshot(), adam.clone());
        last_good_loss = loss;
        if loss < best.0 {
            best = (loss, iteration, good.0.clone());
        }
        trace.push(TraceRow {
            iteration,
            loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if cfg.log_every > 0 && iteration % cfg.log_every == 0 {
            log::info!("iteration {iteration}: loss {loss:.6e} (best {:.6e})", best.0);
        }
        best_so_far.push(best.0);
        if let Some(rule) = cfg.plateau {
            let n = best_so_far.len();
            if rule.window > 0 && n > rule.window && best_so_far[n - 1 - rule.window] - best.0 <= rule.rel_tol * best.0.abs() {
                log::info!("iteration {iteration}: loss plateau reached");
                stopped_on_plateau = true;
                break;
            }
        }
        adam.step(store);
        iteration += 1;
    }
    objective.select(None);
    store.restore(&best.2);
    Ok(TrainOutcome {
        trace,
        best_loss: best.0,
        best_iteration: best.1,
        recoveries,
        skipped_steps: adam.skipped(),
        final_lr: adam.config.lr,
        wall_time_s: start.elapsed().as_secs_f64(),
        stopped_on_plateau,
    })
}

/// Keeps the rows of the selected sequences of a batched signal.
fn subset(s: &Signal, idx: Option<&[usize]>) -> Signal {
    match idx {
        Some(i) => s.select_batch(i),
        None => s.clone(),
    }
}

/// Mean squared simulation error of a model.
pub struct MseObjective {
    pub model: DynoNetModel,
    pub handles: ModelHandles,
    u: Signal,
    y: Signal,
    active: Option<Vec<usize>>,
}

impl MseObjective {
    pub fn new(model: DynoNetModel, store: &mut ParameterStore, u: Signal, y: Signal) -> Result<Self> {
        if u.batch() != y.batch() || u.len() != y.len() {
            return Err(Error::Shape("input and output records differ in length".into()));
        }
        let handles = model.register(store, "model.")?;
        Ok(Self {
            model,
            handles,
            u,
            y,
            active: None,
        })
    }

    /// The model with the store's current parameters.
    pub fn fitted(&self, store: &ParameterStore) -> DynoNetModel {
        let mut m = self.model.clone();
        m.load(store, &self.handles);
        m
    }
}

impl Objective for MseObjective {
    fn loss_and_grad(&mut self, store: &mut ParameterStore) -> Result<f64> {
        let mut tape = Tape::new();
        let act = self.active.as_deref();
        let u = tape.input(subset(&self.u, act));
        let y = tape.input(subset(&self.y, act));
        let sim = self.model.forward(&mut tape, store, &self.handles, u)?;
        let e = tape.sub(sim, y)?;
        let sq = tape.square(e);
        let loss = tape.mean(sq);
        tape.backward_into(loss, store)?;
        tape.scalar(loss)
    }

    fn sequences(&self) -> usize {
        self.u.batch()
    }

    fn select(&mut self, subset: Option<&[usize]>) {
        self.active = subset.map(<[usize]>::to_vec);
    }
}

/// Mean squared one-step prediction error.
pub struct PemObjective {
    pub pem: PemModel,
    pub handles: PemHandles,
    u: Signal,
    y: Signal,
    active: Option<Vec<usize>>,
}

impl PemObjective {
    pub fn new(pem: PemModel, store: &mut ParameterStore, u: Signal, y: Signal) -> Result<Self> {
        u.check_same_shape(&y)?;
        let handles = pem.register(store)?;
        Ok(Self {
            pem,
            handles,
            u,
            y,
            active: None,
        })
    }

    pub fn fitted(&self, store: &ParameterStore) -> PemModel {
        let mut m = self.pem.clone();
        m.load(store, &self.handles);
        m
    }
}

impl Objective for PemObjective {
    fn loss_and_grad(&mut self, store: &mut ParameterStore) -> Result<f64> {
        let mut tape = Tape::new();
        let act = self.active.as_deref();
        let u = tape.input(subset(&self.u, act));
        let y = tape.input(subset(&self.y, act));
        let loss = self.pem.forward_loss(&mut tape, store, &self.handles, u, y)?;
        tape.backward_into(loss, store)?;
        tape.scalar(loss)
    }

    fn sequences(&self) -> usize {
        self.u.batch()
    }

    fn select(&mut self, subset: Option<&[usize]>) {
        self.active = subset.map(<[usize]>::to_vec);
    }
}

/// Negative mean log-likelihood of quantized outputs, with `ln sigma_e` trained jointly.
pub struct QuantizedObjective {
    pub model: DynoNetModel,
    pub handles: ModelHandles,
    pub log_sigma: ParamId,
    pub quantizer: Quantizer,
    u: Signal,
    z: Arc<[usize]>,
    active: Option<(Vec<usize>, Arc<[usize]>)>,
    clamped: usize,
}

impl QuantizedObjective {
    /// `z` holds one bin per sample of `u`, in the same batch-major order.
    pub fn new(
        model: DynoNetModel,
        store: &mut ParameterStore,
        u: Signal,
        z: Vec<usize>,
        quantizer: Quantizer,
        initial_sigma: f64,
    ) -> Result<Self> {
        if z.len() != u.batch() * u.len() {
            return Err(Error::Shape(format!(
                "{} quantized observations for {} input samples",
                z.len(),
                u.batch() * u.len()
            )));
        }
        if !(initial_sigma.is_finite() && initial_sigma > 0.0) {
            return Err(Error::InvalidParams("initial noise level must be positive".into()));
        }
        let handles = model.register(store, "model.")?;
        let log_sigma = store.register("log_sigma_e", vec![initial_sigma.ln()])?;
        Ok(Self {
            model,
            handles,
            log_sigma,
            quantizer,
            u,
            z: z.into(),
            active: None,
            clamped: 0,
        })
    }

    pub fn fitted(&self, store: &ParameterStore) -> (DynoNetModel, f64) {
        let mut m = self.model.clone();
        m.load(store, &self.handles);
        (m, store.value(self.log_sigma)[0].exp())
    }

    /// Samples clamped to the probability floor over all evaluations so far.
    pub fn clamped_samples(&self) -> usize {
        self.clamped
    }
}

impl Objective for QuantizedObjective {
    fn loss_and_grad(&mut self, store: &mut ParameterStore) -> Result<f64> {
        let mut tape = Tape::new();
        let (u, z) = match &self.active {
            Some((idx, z)) => (self.u.select_batch(idx), z.clone()),
            None => (self.u.clone(), self.z.clone()),
        };
        let u = tape.input(u);
        let sim = self.model.forward(&mut tape, store, &self.handles, u)?;
        let ls = tape.param(store, self.log_sigma);
        let loss = tape.quantized_nll(sim, ls, &z, &self.quantizer)?;
        tape.backward_into(loss, store)?;
        self.clamped += tape.clamped_samples();
        tape.scalar(loss)
    }

    fn sequences(&self) -> usize {
        self.u.batch()
    }

    fn select(&mut self, subset: Option<&[usize]>) {
        self.active = subset.map(|idx| {
            let t = self.u.len();
            let z: Vec<usize> = idx
                .iter()
                .flat_map(|&b| self.z[b * t..(b + 1) * t].iter().copied())
                .collect();
            (idx.to_vec(), z.into())
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{Block, MimoGBlock};
    use crate::testutil::rng;
    use rand::Rng;

    /// `0.5 (x - c)^T D (x - c)` with diagonal `D`.
    struct Bowl {
        id: ParamId,
        center: [f64; 2],
        curvature: [f64; 2],
    }

    impl Objective for Bowl {
        fn loss_and_grad(&mut self, store: &mut ParameterStore) -> Result<f64> {
            let x = store.value(self.id).to_vec();
            let mut loss = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                let d = xj - self.center[j];
                loss += 0.5 * self.curvature[j] * d * d;
                store.grad_mut(self.id)[j] += self.curvature[j] * d;
            }
            Ok(loss)
        }
    }

    fn bowl() -> (ParameterStore, Bowl) {
        let mut store = ParameterStore::new();
        let id = store.register("x", vec![2.0, -1.0]).unwrap();
        let b = Bowl {
            id,
            center: [0.3, 0.7],
            curvature: [1.0, 5.0],
        };
        (store, b)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParameterStore::new();
        let id = store.register("p", vec![1.0, -2.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        assert!(adam.step(&mut store));
        assert_eq!(store.value(id), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParameterStore::new();
        let id = store.register("p", vec![1.0, -2.0, 0.5]).unwrap();
        store.grad_mut(id).copy_from_slice(&[3.0, -0.2, 1e3]);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &store);
        adam.step(&mut store);
        let moved: Vec<f64> = store
            .value(id)
            .iter()
            .zip([1.0, -2.0, 0.5])
            .map(|(a, b)| a - b)
            .collect();
        for (d, s) in moved.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((d - 0.01 * s).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut store = ParameterStore::new();
        let id = store.register("p", vec![1.0]).unwrap();
        store.grad_mut(id)[0] = f64::NAN;
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        assert!(!adam.step(&mut store));
        assert_eq!((adam.skipped(), adam.steps()), (1, 0));
        assert_eq!(store.value(id), &[1.0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let (mut store, mut b) = bowl();
        let cfg = TrainConfig {
            iterations: 5000,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        train(&mut b, &mut store, &cfg).unwrap();
        let x = store.value(b.id);
        let dist = ((x[0] - 0.3).powi(2) + (x[1] - 0.7).powi(2)).sqrt();
        assert!(dist < 1e-4, "distance {dist}");
    }

    #[test]
    fn plateau_rule_stops_early() {
        let (mut store, mut b) = bowl();
        let cfg = TrainConfig {
            iterations: 50_000,
            adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            plateau: Some(PlateauRule { window: 200, rel_tol: 1e-3 }),
            ..TrainConfig::default()
        };
        let out = train(&mut b, &mut store, &cfg).unwrap();
        assert!(out.stopped_on_plateau);
        assert!(out.trace.len() < 50_000);
        let curve = out.best_curve();
        let n = curve.len();
        assert!(curve[n - 201] - curve[n - 1] <= 1e-3 * curve[n - 1]);
        assert!(curve[n - 202] - curve[n - 2] > 1e-3 * curve[n - 2]);
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (mut store, mut b) = bowl();
        let out = train(
            &mut b,
            &mut store,
            &TrainConfig {
                iterations: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(store.value(b.id), &[2.0, -1.0]);
    }

    #[test]
    fn identical_runs_give_identical_traces() {
        let run = || {
            let (mut store, mut b) = bowl();
            let out = train(&mut b, &mut store, &TrainConfig::default()).unwrap();
            out.trace.iter().map(|r| r.loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    /// Diverges whenever its parameter exceeds a threshold.
    struct Cliff {
        id: ParamId,
        calls: usize,
    }

    impl Objective for Cliff {
        fn loss_and_grad(&mut self, store: &mut ParameterStore) -> Result<f64> {
            self.calls += 1;
            let x = store.value(self.id)[0];
            if x > 0.5 {
                return Err(Error::Divergence { index: 3 });
            }
            store.grad_mut(self.id)[0] = -1.0;
            Ok(-x)
        }
    }

    #[test]
    fn divergence_halves_rate_then_aborts() {
        let mut store = ParameterStore::new();
        let id = store.register("x", vec![0.0]).unwrap();
        let mut c = Cliff { id, calls: 0 };
        let cfg = TrainConfig {
            iterations: 100,
            adam: AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let err = train(&mut c, &mut store, &cfg).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { retries: 5, .. }));
        assert!(store.value(id)[0] <= 0.5);

        // a mild cliff is survived by halving
        let mut store = ParameterStore::new();
        let id = store.register("x", vec![0.0]).unwrap();
        let mut c = Cliff { id, calls: 0 };
        let cfg = TrainConfig {
            iterations: 5,
            adam: AdamConfig {
                lr: 0.3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(&mut c, &mut store, &cfg).unwrap();
        assert_eq!(out.trace.len(), 5);
        assert!(out.recoveries >= 1 && out.final_lr < 0.3);
        let best = out.best_curve();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn minibatch_is_seeded() {
        let mut r = rng(1);
        let u = Signal::new(4, 30, 1, (0..120).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let y = u.map(|v| 0.5 * v);
        let model = DynoNetModel::new(vec![Block::Linear(MimoGBlock::zeros(1, 1, 1, 0, 0))]).unwrap();
        let run = || {
            let mut store = ParameterStore::new();
            let mut obj = MseObjective::new(model.clone(), &mut store, u.clone(), y.clone()).unwrap();
            let cfg = TrainConfig {
                iterations: 300,
                minibatch: Some(2),
                seed: 9,
                adam: AdamConfig {
                    lr: 1e-2,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            };
            let out = train(&mut obj, &mut store, &cfg).unwrap();
            (out.trace.iter().map(|r| r.loss).collect::<Vec<_>>(), obj.fitted(&store))
        };
        let (a, ma) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        let Block::Linear(g) = &ma.blocks[0] else { unreachable!() };
        assert!((g.b[0] - 0.5).abs() < 1e-2);
    }
}
