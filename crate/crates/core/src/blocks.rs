//! Model building blocks and the sequential dynoNet composition.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Signal;
use crate::tape::{CustomOp, GBlockShape, MlpShape, NodeId, ParamId, ParameterStore, Tape, Value};
use crate::tf::TransferFunctionParams;

/// Standard deviation of the initial numerator coefficients.
pub const INIT_B_STD: f64 = 0.1;

/// Grid of SISO filters with shared orders; output `o` sums `G_{o,i}` over inputs `i`.
///
/// Coefficients are flat and cell-major: cell `(o, i)` is cell index
/// `o * in_channels + i`, owning `n_b + 1` numerator and `n_a` denominator entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MimoGBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub n_b: usize,
    pub n_a: usize,
    pub n_k: usize,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl MimoGBlock {
    pub fn zeros(in_channels: usize, out_channels: usize, n_b: usize, n_a: usize, n_k: usize) -> Self {
        let cells = in_channels * out_channels;
        Self {
            in_channels,
            out_channels,
            n_b,
            n_a,
            n_k,
            b: vec![0.0; cells * (n_b + 1)],
            a: vec![0.0; cells * n_a],
        }
    }

    /// Numerators drawn from `N(0, INIT_B_STD^2)`, denominators zero (a stable FIR start).
    pub fn random_init<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        n_b: usize,
        n_a: usize,
        n_k: usize,
    ) -> Self {
        let mut g = Self::zeros(in_channels, out_channels, n_b, n_a, n_k);
        let normal = Normal::new(0.0, INIT_B_STD).expect("positive std");
        g.b.iter_mut().for_each(|v| *v = normal.sample(rng));
        g
    }

    /// Single-cell block wrapping one SISO filter.
    pub fn from_siso(p: &TransferFunctionParams) -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            n_b: p.n_b(),
            n_a: p.n_a(),
            n_k: p.n_k,
            b: p.b.clone(),
            a: p.a.clone(),
        }
    }

    /// Builds a grid from per-cell filters given row by row (`cells[o][i]`).
    pub fn from_cells(cells: &[Vec<TransferFunctionParams>]) -> Result<Self> {
        let first = cells
            .first()
            .and_then(|row| row.first())
            .ok_or_else(|| Error::Shape("empty filter grid".into()))?;
        let mut g = Self::zeros(cells[0].len(), cells.len(), first.n_b(), first.n_a(), first.n_k);
        g.b.clear();
        g.a.clear();
        for row in cells {
            if row.len() != g.in_channels {
                return Err(Error::Shape("ragged filter grid".into()));
            }
            for c in row {
                if c.n_b() != g.n_b || c.n_a() != g.n_a || c.n_k != g.n_k {
                    return Err(Error::Shape("filter grid cells must share orders".into()));
                }
                g.b.extend_from_slice(&c.b);
                g.a.extend_from_slice(&c.a);
            }
        }
        Ok(g)
    }

    pub fn shape(&self) -> GBlockShape {
        GBlockShape {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            n_b: self.n_b,
            n_a: self.n_a,
            n_k: self.n_k,
        }
    }

    pub fn cell(&self, out: usize, inp: usize) -> TransferFunctionParams {
        self.shape().cell(&self.b, &self.a, out, inp)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape();
        if s.cells() == 0 {
            return Err(Error::Shape("G-block needs at least one channel each way".into()));
        }
        if self.b.len() != s.b_len() || self.a.len() != s.a_len() {
            return Err(Error::Shape(format!(
                "G-block {}x{} with orders ({}, {}) needs {} + {} coefficients, has {} + {}",
                self.out_channels,
                self.in_channels,
                self.n_b,
                self.n_a,
                s.b_len(),
                s.a_len(),
                self.b.len(),
                self.a.len()
            )));
        }
        if self.b.iter().chain(&self.a).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("G-block coefficients".into()));
        }
        Ok(())
    }

    /// Direct evaluation without a tape.
    pub fn mimo_forward(&self, u: &Signal) -> Result<Signal> {
        if u.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "G-block expects {} input channels, got {}",
                self.in_channels,
                u.channels()
            )));
        }
        let mut y = Signal::zeros(u.batch(), u.len(), self.out_channels);
        for bi in 0..u.batch() {
            for i in 0..self.in_channels {
                let x = u.channel(bi, i);
                for o in 0..self.out_channels {
                    y.add_to_channel(bi, o, &self.cell(o, i).filter(&x)?);
                }
            }
        }
        Ok(y)
    }
}

/// `y_t = W2 tanh(W1 x_t + c1) + c2` with row-major weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpParams {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<f64>,
    pub c1: Vec<f64>,
    pub w2: Vec<f64>,
    pub c2: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            c1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            c2: vec![0.0; output],
        }
    }

    /// Every layer's weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn random_init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        let mut m = Self::zeros(input, hidden, output);
        let r1 = 1.0 / (input as f64).sqrt();
        let r2 = 1.0 / (hidden as f64).sqrt();
        for v in m.w1.iter_mut().chain(m.c1.iter_mut()) {
            *v = rng.random_range(-r1..r1);
        }
        for v in m.w2.iter_mut().chain(m.c2.iter_mut()) {
            *v = rng.random_range(-r2..r2);
        }
        m
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input: self.input,
            hidden: self.hidden,
            output: self.output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.output == 0 {
            return Err(Error::Shape("MLP widths must be positive".into()));
        }
        if self.w1.len() != self.hidden * self.input
            || self.c1.len() != self.hidden
            || self.w2.len() != self.output * self.hidden
            || self.c2.len() != self.output
        {
            return Err(Error::Shape(format!(
                "MLP {}-{}-{} weight lengths are inconsistent",
                self.input, self.hidden, self.output
            )));
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("MLP weights".into()));
        }
        Ok(())
    }

    fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.c1, &self.w2, &self.c2]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.c1, &mut self.w2, &mut self.c2]
    }

    /// Evaluates one time step.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..self.hidden)
            .map(|k| {
                let row = &self.w1[k * self.input..(k + 1) * self.input];
                (self.c1[k] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()).tanh()
            })
            .collect();
        (0..self.output)
            .map(|o| {
                let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                self.c2[o] + row.iter().zip(&h).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect()
    }

    /// Direct per-sample evaluation without a tape.
    pub fn mlp_forward(&self, x: &Signal) -> Result<Signal> {
        if x.channels() != self.input {
            return Err(Error::Shape(format!(
                "MLP expects {} input channels, got {}",
                self.input,
                x.channels()
            )));
        }
        let data = x.as_slice().chunks(self.input).flat_map(|f| self.eval(f)).collect();
        Ok(Signal::from_raw(x.batch(), x.len(), self.output, data))
    }
}

/// Fixed smooth saturation `limit * p(x / limit)` per channel, with
/// `p(s) = 1.5 s - 0.5 s^3` on `|s| <= 1` and `sign(s)` beyond (continuously
/// differentiable, unit slope at the origin). Not trainable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftSaturation {
    pub limits: Vec<f64>,
}

impl SoftSaturation {
    pub fn validate(&self) -> Result<()> {
        if self.limits.is_empty() || self.limits.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidParams("saturation limits must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(limit: f64, x: f64) -> f64 {
        let s = x / limit;
        if s.abs() >= 1.0 {
            limit * s.signum()
        } else {
            limit * (1.5 * s - 0.5 * s * s * s)
        }
    }

    pub fn slope(limit: f64, x: f64) -> f64 {
        let s = x / limit;
        if s.abs() >= 1.0 {
            0.0
        } else {
            1.5 * (1.0 - s * s)
        }
    }
}

struct SaturationOp(Vec<f64>);

impl CustomOp for SaturationOp {
    fn name(&self) -> &str {
        "soft_saturation"
    }

    fn forward(&self, inputs: &[&Value]) -> Result<Value> {
        let x = input_signal(inputs)?;
        let c = self.0.len();
        let data = x
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| SoftSaturation::apply(self.0[i % c], v))
            .collect();
        Ok(Value::Signal(Signal::from_raw(x.batch(), x.len(), c, data)))
    }

    fn backward(&self, inputs: &[&Value], _output: &Value, out_adj: &Value) -> Result<Vec<Value>> {
        let x = input_signal(inputs)?;
        let g = out_adj
            .as_signal()
            .ok_or_else(|| Error::Shape("saturation adjoint must be a signal".into()))?;
        let c = self.0.len();
        let data = x
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .enumerate()
            .map(|(i, (&v, &g))| g * SoftSaturation::slope(self.0[i % c], v))
            .collect();
        Ok(vec![Value::Signal(Signal::from_raw(x.batch(), x.len(), c, data))])
    }
}

fn input_signal<'a>(inputs: &[&'a Value]) -> Result<&'a Signal> {
    inputs
        .first()
        .and_then(|v| v.as_signal())
        .ok_or_else(|| Error::Shape("expected a signal input".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    Linear(MimoGBlock),
    Mlp(MlpParams),
    /// One network per channel, each mapping its channel to one output channel.
    ParallelMlp { branches: Vec<MlpParams> },
    Saturation(SoftSaturation),
}

impl Block {
    pub fn in_channels(&self) -> usize {
        match self {
            Block::Linear(g) => g.in_channels,
            Block::Mlp(m) => m.input,
            Block::ParallelMlp { branches } => branches.iter().map(|m| m.input).sum(),
            Block::Saturation(s) => s.limits.len(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Linear(g) => g.out_channels,
            Block::Mlp(m) => m.output,
            Block::ParallelMlp { branches } => branches.iter().map(|m| m.output).sum(),
            Block::Saturation(s) => s.limits.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Block::Linear(g) => g.validate(),
            Block::Mlp(m) => m.validate(),
            Block::ParallelMlp { branches } => {
                if branches.is_empty() {
                    return Err(Error::Shape("parallel block without branches".into()));
                }
                branches.iter().try_for_each(MlpParams::validate)
            }
            Block::Saturation(s) => s.validate(),
        }
    }

    /// Trainable tensors in registration order.
    fn tensors(&self) -> Vec<(&'static str, &Vec<f64>)> {
        match self {
            Block::Linear(g) => vec![("b", &g.b), ("a", &g.a)],
            Block::Mlp(m) => ["w1", "c1", "w2", "c2"].into_iter().zip(m.tensors()).collect(),
            Block::ParallelMlp { branches } => branches
                .iter()
                .flat_map(|m| ["w1", "c1", "w2", "c2"].into_iter().zip(m.tensors()))
                .collect(),
            Block::Saturation(_) => vec![],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Block::Linear(g) => vec![&mut g.b, &mut g.a],
            Block::Mlp(m) => m.tensors_mut().into_iter().collect(),
            Block::ParallelMlp { branches } => {
                branches.iter_mut().flat_map(|m| m.tensors_mut()).collect()
            }
            Block::Saturation(_) => vec![],
        }
    }
}

/// Parameter ids of a model registered in a [`ParameterStore`], per block.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHandles {
    blocks: Vec<Vec<ParamId>>,
}

impl ModelHandles {
    pub fn all(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks.iter().flatten().copied()
    }
}

/// Blocks applied in sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynoNetModel {
    pub blocks: Vec<Block>,
}

impl DynoNetModel {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let m = Self { blocks };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Shape("model without blocks".into()));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        for (i, pair) in self.blocks.windows(2).enumerate() {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(Error::Shape(format!(
                    "block {i} emits {} channels but block {} expects {}",
                    pair[0].out_channels(),
                    i + 1,
                    pair[1].in_channels()
                )));
            }
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.blocks.first().map_or(0, Block::in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, Block::out_channels)
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.tensors())
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Adds every trainable tensor to `store` under `prefix`.
    pub fn register(&self, store: &mut ParameterStore, prefix: &str) -> Result<ModelHandles> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let ids = b
                .tensors()
                .into_iter()
                .enumerate()
                .map(|(k, (name, t))| store.register(format!("{prefix}{i}.{k}.{name}"), t.clone()))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(ids);
        }
        Ok(ModelHandles { blocks })
    }

    /// Copies trained values back from `store`.
    pub fn load(&mut self, store: &ParameterStore, handles: &ModelHandles) {
        for (b, ids) in self.blocks.iter_mut().zip(&handles.blocks) {
            for (t, &id) in b.tensors_mut().into_iter().zip(ids) {
                t.copy_from_slice(store.value(id));
            }
        }
    }

    /// Records the model on `tape` with parameters read from `store`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        handles: &ModelHandles,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        for (b, ids) in self.blocks.iter().zip(&handles.blocks) {
            h = match b {
                Block::Linear(g) => {
                    let (bn, an) = (tape.param(store, ids[0]), tape.param(store, ids[1]));
                    tape.gblock(h, bn, an, g.shape())?
                }
                Block::Mlp(m) => {
                    let p = [0, 1, 2, 3].map(|k| tape.param(store, ids[k]));
                    tape.mlp(h, p, m.shape())?
                }
                Block::ParallelMlp { branches } => {
                    let mut outs = Vec::with_capacity(branches.len());
                    let mut start = 0;
                    for (j, m) in branches.iter().enumerate() {
                        let xj = tape.select_channels(h, start, m.input)?;
                        start += m.input;
                        let p = [0, 1, 2, 3].map(|k| tape.param(store, ids[4 * j + k]));
                        outs.push(tape.mlp(xj, p, m.shape())?);
                    }
                    tape.concat(&outs)?
                }
                Block::Saturation(s) => {
                    tape.custom(&[h], Box::new(SaturationOp(s.limits.clone())))?
                }
            };
        }
        Ok(h)
    }

    /// Open-loop simulation.
    pub fn simulate(&self, u: &Signal) -> Result<Signal> {
        let mut store = ParameterStore::new();
        let handles = self.register(&mut store, "")?;
        let mut tape = Tape::new();
        let x = tape.input(u.clone());
        let y = self.forward(&mut tape, &store, &handles, x)?;
        Ok(tape.signal(y)?.clone())
    }
}

/// Orders of the Wiener-Hammerstein architecture `G -> MLP -> G`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhConfig {
    pub n_b: usize,
    pub n_a: usize,
    pub hidden: usize,
}

impl Default for WhConfig {
    fn default() -> Self {
        Self {
            n_b: 8,
            n_a: 8,
            hidden: 10,
        }
    }
}

/// `G(n_k = 1) -> MLP(1, hidden, 1) -> G(n_k = 0)`.
pub fn build_wh<R: Rng + ?Sized>(cfg: &WhConfig, rng: &mut R) -> DynoNetModel {
    DynoNetModel {
        blocks: vec![
            Block::Linear(MimoGBlock::random_init(rng, 1, 1, cfg.n_b, cfg.n_a, 1)),
            Block::Mlp(MlpParams::random_init(rng, 1, cfg.hidden, 1)),
            Block::Linear(MimoGBlock::random_init(rng, 1, 1, cfg.n_b, cfg.n_a, 0)),
        ],
    }
}

/// Orders of the parallel Wiener-Hammerstein architecture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PwhConfig {
    pub n_b: usize,
    pub n_a: usize,
    pub n_k: usize,
    pub hidden: usize,
    pub branches: usize,
}

impl Default for PwhConfig {
    fn default() -> Self {
        Self {
            n_b: 12,
            n_a: 12,
            n_k: 1,
            hidden: 10,
            branches: 2,
        }
    }
}

/// `G(1 -> branches) -> per-branch MLP(1, hidden, 1) -> G(branches -> 1)`.
pub fn build_pwh<R: Rng + ?Sized>(cfg: &PwhConfig, rng: &mut R) -> DynoNetModel {
    let first = MimoGBlock::random_init(rng, 1, cfg.branches, cfg.n_b, cfg.n_a, cfg.n_k);
    let branches = (0..cfg.branches)
        .map(|_| MlpParams::random_init(rng, 1, cfg.hidden, 1))
        .collect();
    let last = MimoGBlock::random_init(rng, cfg.branches, 1, cfg.n_b, cfg.n_a, cfg.n_k);
    DynoNetModel {
        blocks: vec![
            Block::Linear(first),
            Block::ParallelMlp { branches },
            Block::Linear(last),
        ],
    }
}
