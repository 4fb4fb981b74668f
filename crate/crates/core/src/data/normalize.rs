use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }
}

impl ChannelStats {
    /// Standardizes one `[3, h, w]` patch in place.
    pub fn apply(&self, patch: &mut [f32]) {
        let plane = patch.len() / 3;
        for (c, chunk) in patch.chunks_mut(plane.max(1)).enumerate().take(3) {
            let (m, s) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
        }
    }
}

/// Input standardization of both domains, estimated on a training split and
/// stored with the checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub rgb: ChannelStats,
    pub lwir: ChannelStats,
}

/// Streaming per-channel moments over `[3, h, w]` patches.
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator {
    sum: [f64; 3],
    sum_sq: [f64; 3],
    count: u64,
}

impl StatsAccumulator {
    pub fn add(&mut self, patch: &[f32]) {
        let plane = patch.len() / 3;
        for c in 0..3 {
            for v in &patch[c * plane..(c + 1) * plane] {
                let v = *v as f64;
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.count += plane as u64;
    }

    pub fn finish(&self) -> Result<ChannelStats> {
        if self.count == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = self.count as f64;
        let mut out = ChannelStats::default();
        for c in 0..3 {
            let m = self.sum[c] / n;
            let var = (self.sum_sq[c] / n - m * m).max(0.0);
            out.mean[c] = m;
            // Flat channels (e.g. an all-black synthetic modality) keep unit scale.
            out.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulated_stats_standardize() {
        let patches: Vec<Vec<f32>> = (0..4).map(|i| (0..12).map(|j| (i * 12 + j) as f32 / 50.0).collect()).collect();
        let mut acc = StatsAccumulator::default();
        patches.iter().for_each(|p| acc.add(p));
        let stats = acc.finish().unwrap();
        let mut all: Vec<f32> = Vec::new();
        for p in &patches {
            let mut p = p.clone();
            stats.apply(&mut p);
            all.extend_from_slice(&p[0..4]);
        }
        let m = all.iter().map(|v| *v as f64).sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|x| (*x as f64 - m).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-5, "{m} {v}");
    }

    #[test]
    fn empty_accumulator_errors() {
        assert!(StatsAccumulator::default().finish().is_err());
    }
}
