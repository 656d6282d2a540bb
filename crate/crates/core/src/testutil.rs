use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{CustomOp, Value};
use crate::tf::TransferFunctionParams;

pub use crate::gradcheck::{central_difference, rel_err};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random filter with all poles of modulus at most 0.9.
pub fn random_stable_tf(
    r: &mut ChaCha8Rng,
    n_b: usize,
    n_a: usize,
    n_k: usize,
) -> TransferFunctionParams {
    crate::datagen::random_stable_filter(r, n_b, n_a, n_k, 0.9)
}

/// `max |got - want| / max |want|`.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    got.iter()
        .zip(want)
        .fold(0.0_f64, |m, (g, w)| m.max((g - w).abs()))
        / scale
}

/// Elementwise product of two signals of equal shape.
pub struct Mul;

impl CustomOp for Mul {
    fn name(&self) -> &str {
        "mul"
    }

    fn forward(&self, inputs: &[&Value]) -> Result<Value> {
        let (Value::Signal(a), Value::Signal(b)) = (inputs[0], inputs[1]) else {
            unreachable!("mul is only used on signals in tests")
        };
        Ok(Value::Signal(a.zip_map(b, |x, y| x * y)?))
    }

    fn backward(&self, inputs: &[&Value], _output: &Value, out_adj: &Value) -> Result<Vec<Value>> {
        let (Value::Signal(a), Value::Signal(b), Value::Signal(g)) = (inputs[0], inputs[1], out_adj)
        else {
            unreachable!()
        };
        Ok(vec![
            Value::Signal(g.zip_map(b, |g, y| g * y)?),
            Value::Signal(g.zip_map(a, |g, x| g * x)?),
        ])
    }
}
