//! The three views of a sensor window: raw samples, one-sided DFT magnitude
//! spectra and per-channel summary statistics.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{MvftError, Result};
use crate::tensor::Tensor;

/// Number of rows in a [`StatView`].
pub const N_STATS: usize = 6;

/// Row labels of a [`StatView`], in storage order.
pub const STAT_NAMES: [&str; N_STATS] = ["mean", "variance", "median", "max", "min", "peaks"];

/// One labeled `T × C` slice of a sensor stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorWindow {
    /// Row-major `T × C` readings.
    pub samples: Vec<Vec<f64>>,
    pub timestamps: Vec<i64>,
    pub label: usize,
    /// Subject the window was recorded from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<u64>,
}

impl SensorWindow {
    pub fn new(
        samples: Vec<Vec<f64>>,
        timestamps: Vec<i64>,
        label: usize,
        user: Option<u64>,
    ) -> Result<Self> {
        let w = SensorWindow {
            samples,
            timestamps,
            label,
            user,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.samples.len();
        if t < 2 {
            return Err(MvftError::contract(format!("window length {t} < 2")));
        }
        let c = self.samples[0].len();
        if c == 0 || self.samples.iter().any(|r| r.len() != c) {
            return Err(MvftError::contract("window rows must share a positive channel count"));
        }
        if self.timestamps.len() != t {
            return Err(MvftError::shape("window", &[t, c], &[self.timestamps.len()]));
        }
        if self.timestamps.windows(2).any(|p| p[1] < p[0]) {
            return Err(MvftError::contract("window timestamps must be non-decreasing"));
        }
        if self.samples.iter().flatten().any(|x| !x.is_finite()) {
            return Err(MvftError::contract("window contains non-finite samples"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples.iter().map(|row| row[c]).collect()
    }
}

/// `(⌊T/2⌋ + 1) × C` one-sided magnitude spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralView(pub Tensor);

/// `6 × C` statistics, rows ordered as [`STAT_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct StatView(pub Tensor);

/// The three token sequences derived from one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    /// `T × C` raw samples.
    pub temporal: Tensor,
    pub frequent: SpectralView,
    pub statistic: StatView,
    pub timestamps: Vec<i64>,
    pub label: usize,
}

impl ViewBundle {
    pub fn channels(&self) -> usize {
        self.temporal.last_dim()
    }

    pub fn window_len(&self) -> usize {
        self.temporal.shape()[0]
    }
}

/// Slices a labeled stream into fixed-length windows starting at
/// `0, stride, 2·stride, …`; a trailing partial window is dropped.
///
/// Each window takes the majority label of its samples, ties going to the
/// smaller class index.
pub fn window_stream(
    samples: &[Vec<f64>],
    timestamps: &[i64],
    labels: &[usize],
    window: usize,
    stride: usize,
) -> Result<Vec<SensorWindow>> {
    if window < 2 || stride == 0 {
        return Err(MvftError::config(format!(
            "window length must be >= 2 and stride >= 1 (got {window}, {stride})"
        )));
    }
    let n = samples.len();
    if timestamps.len() != n || labels.len() != n {
        return Err(MvftError::shape(
            "window_stream",
            &[n],
            &[timestamps.len(), labels.len()],
        ));
    }
    if n < window {
        return Err(MvftError::Empty(format!(
            "stream of {n} samples is shorter than window length {window}"
        )));
    }
    (0..=(n - window) / stride)
        .map(|i| {
            let start = i * stride;
            let end = start + window;
            SensorWindow::new(
                samples[start..end].to_vec(),
                timestamps[start..end].to_vec(),
                majority_label(&labels[start..end]),
                None,
            )
        })
        .collect()
}

fn majority_label(labels: &[usize]) -> usize {
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    // first index with the maximal count wins ties
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// `|Σₙ x[n]·e^(−i2πkn/T)|` for `k = 0..=⌊T/2⌋`.
pub fn dft_magnitude(x: &[f64]) -> Result<Vec<f64>> {
    dft_magnitude_with(&mut FftPlanner::new(), x)
}

fn dft_magnitude_with(planner: &mut FftPlanner<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let t = x.len();
    if t < 2 {
        return Err(MvftError::contract(format!("dft needs at least 2 samples, got {t}")));
    }
    let fft = planner.plan_fft_forward(t);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    Ok(buf[..t / 2 + 1].iter().map(|c| c.norm()).collect())
}

/// Mean, population variance, median, max, min and strict peak count.
pub fn compute_stats(x: &[f64]) -> Result<[f64; N_STATS]> {
    let t = x.len();
    if t < 2 {
        return Err(MvftError::contract(format!("stats need at least 2 samples, got {t}")));
    }
    let n = t as f64;
    let mean = x.iter().sum::<f64>() / n;
    let variance = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if t % 2 == 1 {
        sorted[t / 2]
    } else {
        0.5 * (sorted[t / 2 - 1] + sorted[t / 2])
    };
    let peaks = x
        .windows(3)
        .filter(|w| w[0] < w[1] && w[1] > w[2])
        .count();
    Ok([mean, variance, median, sorted[t - 1], sorted[0], peaks as f64])
}

/// Derives all three views from a window.
pub fn build_views(w: &SensorWindow) -> Result<ViewBundle> {
    w.validate()?;
    let (t, c) = (w.len(), w.channels());
    let bins = t / 2 + 1;
    let mut planner = FftPlanner::new();
    let mut spectrum = Tensor::zeros(&[bins, c]);
    let mut stats = Tensor::zeros(&[N_STATS, c]);
    for ch in 0..c {
        let x = w.channel(ch);
        for (k, m) in dft_magnitude_with(&mut planner, &x)?.into_iter().enumerate() {
            spectrum.set(&[k, ch], m);
        }
        for (r, s) in compute_stats(&x)?.into_iter().enumerate() {
            stats.set(&[r, ch], s);
        }
    }
    Ok(ViewBundle {
        temporal: Tensor::from_rows(&w.samples)?,
        frequent: SpectralView(spectrum),
        statistic: StatView(stats),
        timestamps: w.timestamps.clone(),
        label: w.label,
    })
}

/// Per-channel mean and standard deviation of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

impl ChannelStats {
    fn fit<'a>(views: impl Iterator<Item = &'a Tensor>) -> Self {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let views: Vec<&Tensor> = views.collect();
        for v in &views {
            let c = v.last_dim();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            }
            for row in v.data().chunks(c) {
                for (s, x) in sum.iter_mut().zip(row) {
                    *s += x;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for v in &views {
            for row in v.data().chunks(v.last_dim()) {
                for ((q, x), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *q += (x - m).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .map(|q| (q / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        ChannelStats { mean, std }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.last_dim();
        if c != self.mean.len() {
            return Err(MvftError::shape("normalize", x.shape(), &[self.mean.len()]));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Z-score statistics for each view, fitted on training windows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewNormalizer {
    pub temporal: ChannelStats,
    pub frequent: ChannelStats,
    pub statistic: ChannelStats,
}

pub fn fit_normalizer(train: &[ViewBundle]) -> Result<ViewNormalizer> {
    if train.is_empty() {
        return Err(MvftError::Empty("cannot fit a normalizer on zero windows".into()));
    }
    let c = train[0].channels();
    if train.iter().any(|b| b.channels() != c) {
        return Err(MvftError::contract("training windows disagree on channel count"));
    }
    Ok(ViewNormalizer {
        temporal: ChannelStats::fit(train.iter().map(|b| &b.temporal)),
        frequent: ChannelStats::fit(train.iter().map(|b| &b.frequent.0)),
        statistic: ChannelStats::fit(train.iter().map(|b| &b.statistic.0)),
    })
}

impl ViewNormalizer {
    pub fn apply(&self, bundle: &ViewBundle) -> Result<ViewBundle> {
        Ok(ViewBundle {
            temporal: self.temporal.apply(&bundle.temporal)?,
            frequent: SpectralView(self.frequent.apply(&bundle.frequent.0)?),
            statistic: StatView(self.statistic.apply(&bundle.statistic.0)?),
            timestamps: bundle.timestamps.clone(),
            label: bundle.label,
        })
    }
}

pub fn apply_normalizer(norm: &ViewNormalizer, bundle: &ViewBundle) -> Result<ViewBundle> {
    norm.apply(bundle)
}
