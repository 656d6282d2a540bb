//! Batched multi-channel time series.
//!
//! A [`Signal`] holds `batch` independent sequences of `len` samples with
//! `channels` values per sample, stored contiguously as `[batch][len][channels]`.
//! Every sequence is implicitly zero for negative time.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    batch: usize,
    len: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Signal {
    /// Builds a signal, rejecting wrong lengths and non-finite samples.
    pub fn new(batch: usize, len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * len * channels {
            return Err(Error::Shape(format!(
                "signal data has {} values, expected {batch}x{len}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("signal sample {i}")));
        }
        Ok(Self {
            batch,
            len,
            channels,
            data,
        })
    }

    pub(crate) fn from_raw(batch: usize, len: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), batch * len * channels);
        Self {
            batch,
            len,
            channels,
            data,
        }
    }

    pub fn zeros(batch: usize, len: usize, channels: usize) -> Self {
        Self::from_raw(batch, len, channels, vec![0.0; batch * len * channels])
    }

    /// A single-sequence, single-channel signal.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        let len = samples.len();
        Self::new(1, len, 1, samples)
    }

    /// Stacks equal-length single-channel sequences into a batch.
    pub fn from_sequences(seqs: &[Vec<f64>]) -> Result<Self> {
        let len = seqs.first().map_or(0, Vec::len);
        if seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("sequences in a batch must have equal length".into()));
        }
        Self::new(seqs.len(), len, 1, seqs.concat())
    }

    /// Interleaves per-channel sequences of one batch element.
    pub fn from_channels(channels: &[Vec<f64>]) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("channels must have equal length".into()));
        }
        let mut data = Vec::with_capacity(len * channels.len());
        for t in 0..len {
            data.extend(channels.iter().map(|c| c[t]));
        }
        Self::new(1, len, channels.len(), data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.len, self.channels)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, t: usize, c: usize) -> f64 {
        self.data[(b * self.len + t) * self.channels + c]
    }

    /// Copies out one channel of one batch element.
    pub fn channel(&self, b: usize, c: usize) -> Vec<f64> {
        let base = b * self.len * self.channels;
        (0..self.len)
            .map(|t| self.data[base + t * self.channels + c])
            .collect()
    }

    pub(crate) fn add_to_channel(&mut self, b: usize, c: usize, values: &[f64]) {
        let base = b * self.len * self.channels;
        for (t, v) in values.iter().enumerate() {
            self.data[base + t * self.channels + c] += *v;
        }
    }

    /// All samples of one channel across the batch, sequence after sequence.
    pub fn channel_concat(&self, c: usize) -> Vec<f64> {
        (0..self.batch).flat_map(|b| self.channel(b, c)).collect()
    }

    /// Time reversal of every sequence: `out[t] = x[len - 1 - t]`.
    pub fn flip(&self) -> Signal {
        let mut out = Vec::with_capacity(self.data.len());
        for b in 0..self.batch {
            let seq = &self.data[b * self.len * self.channels..(b + 1) * self.len * self.channels];
            for frame in seq.chunks(self.channels.max(1)).rev() {
                out.extend_from_slice(frame);
            }
        }
        Signal::from_raw(self.batch, self.len, self.channels, out)
    }

    /// Selects a subset of batch elements.
    pub fn select_batch(&self, indices: &[usize]) -> Signal {
        let stride = self.len * self.channels;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &b in indices {
            data.extend_from_slice(&self.data[b * stride..(b + 1) * stride]);
        }
        Signal::from_raw(indices.len(), self.len, self.channels, data)
    }

    /// Keeps samples `start..end` of every sequence.
    pub fn slice_time(&self, start: usize, end: usize) -> Signal {
        assert!(start <= end && end <= self.len);
        let mut data = Vec::with_capacity(self.batch * (end - start) * self.channels);
        for b in 0..self.batch {
            let base = b * self.len * self.channels;
            data.extend_from_slice(
                &self.data[base + start * self.channels..base + end * self.channels],
            );
        }
        Signal::from_raw(self.batch, end - start, self.channels, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Signal {
        Signal::from_raw(
            self.batch,
            self.len,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub(crate) fn zip_map(&self, other: &Signal, f: impl Fn(f64, f64) -> f64) -> Result<Signal> {
        self.check_same_shape(other)?;
        Ok(Signal::from_raw(
            self.batch,
            self.len,
            self.channels,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub(crate) fn check_same_shape(&self, other: &Signal) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Time reversal of a plain sequence.
pub fn flip(x: &[f64]) -> Vec<f64> {
    x.iter().rev().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_examples() {
        assert_eq!(flip(&[1.0, 2.0, 3.0]), vec![3.0, 2.0, 1.0]);
        assert_eq!(flip(&[4.0]), vec![4.0]);
        let x = vec![0.3, -1.2, 7.0, 2.5];
        assert_eq!(flip(&flip(&x)), x);
    }

    #[test]
    fn flip_signal_keeps_channels_and_batches_apart() {
        let s = Signal::new(2, 3, 2, (0..12).map(f64::from).collect()).unwrap();
        let f = s.flip();
        assert_eq!(f.channel(0, 0), vec![4.0, 2.0, 0.0]);
        assert_eq!(f.channel(1, 1), vec![11.0, 9.0, 7.0]);
        assert_eq!(f.flip(), s);
    }

    #[test]
    fn rejects_nan_and_bad_shape() {
        assert!(Signal::new(1, 2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(Signal::new(1, 3, 1, vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn channel_roundtrip() {
        let s = Signal::from_channels(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.channel(0, 1), vec![3.0, 4.0]);
    }
}
