//! Per-channel standardization statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and standard deviation for each channel of a feature block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance was zero and whose std was set to 1.
    #[serde(default)]
    pub degenerate: Vec<usize>,
}

impl ChannelStats {
    pub fn identity(width: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; width],
            std: vec![1.0; width],
            degenerate: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Statistics over row-major `data` of the given width.
    pub fn fit(data: &[f64], width: usize) -> Result<Self> {
        let mut acc = StatsAccumulator::new(width);
        acc.push_rows(data)?;
        acc.finish()
    }

    pub fn normalize_in_place(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }

    pub fn normalize(&self, data: &[f64]) -> Vec<f64> {
        let w = self.width().max(1);
        let mut out = data.to_vec();
        out.chunks_mut(w).for_each(|r| self.normalize_in_place(r));
        out
    }

    pub fn denormalize(&self, data: &[f64]) -> Vec<f64> {
        let w = self.width().max(1);
        let mut out = data.to_vec();
        for row in out.chunks_mut(w) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
        out
    }
}

/// Streaming per-channel mean and variance (Welford updates).
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    width: usize,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(width: usize) -> Self {
        StatsAccumulator {
            width,
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn push_rows(&mut self, rows: &[f64]) -> Result<()> {
        if self.width == 0 {
            return Ok(());
        }
        if !rows.len().is_multiple_of(self.width) {
            return Err(Error::Data(format!(
                "{} values do not form rows of width {}",
                rows.len(),
                self.width
            )));
        }
        for row in rows.chunks(self.width) {
            self.count += 1;
            let n = self.count as f64;
            for j in 0..self.width {
                let d = row[j] - self.mean[j];
                self.mean[j] += d / n;
                self.m2[j] += d * (row[j] - self.mean[j]);
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<ChannelStats> {
        if self.width == 0 {
            return Ok(ChannelStats::identity(0));
        }
        if self.count == 0 {
            return Err(Error::Data("cannot fit statistics on zero rows".into()));
        }
        let mut degenerate = Vec::new();
        let n = self.count as f64;
        let std = self
            .m2
            .iter()
            .enumerate()
            .map(|(j, m2)| {
                let s = (m2 / n).sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    degenerate.push(j);
                    1.0
                }
            })
            .collect();
        Ok(ChannelStats { mean: self.mean, std, degenerate })
    }
}
