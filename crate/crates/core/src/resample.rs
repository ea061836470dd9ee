//! Latent-rarity resampling.
//!
//! Each epoch, the encoder's posterior means over the training faces are
//! histogrammed independently per latent dimension. A face whose mean falls in
//! rarely-populated bins is given a larger selection probability:
//!
//! ```text
//! w(x) = prod_d 1 / (Q_d(bin_d(mu_d(x))) + alpha),   W(x) = w(x) / sum_x' w(x')
//! ```
//!
//! `alpha > 0` bounds the boost of near-empty bins: as `alpha` grows the
//! weights approach uniform. The epoch's faces are then drawn i.i.d. with
//! replacement from `W`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::data::GroupTag;
use crate::error::{Error, Result};
use crate::models::EncoderParams;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Per-dimension histograms of latent means.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramSet {
    bins: usize,
    /// `edges[d]` has `bins + 1` strictly increasing entries.
    edges: Vec<Vec<f64>>,
    /// `probs[d]` has `bins` entries summing to one.
    probs: Vec<Vec<f64>>,
    /// Dimensions whose observed means were all equal; they get a uniform
    /// histogram and contribute the same factor to every weight.
    degenerate: Vec<bool>,
}

impl HistogramSet {
    /// Builds histograms from `[M, k]` latent means with `bins` equal-width
    /// bins spanning each dimension's observed range.
    pub fn from_means(mus: &Tensor, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
        }
        let (m, k) = match *mus.shape() {
            [m, k] => (m, k),
            ref s => return Err(Error::shape("estimate_histograms", format!("need [M,k], got {s:?}"))),
        };
        if m == 0 {
            return Err(Error::Dataset("cannot estimate histograms from an empty face set".into()));
        }
        if !mus.all_finite() {
            return Err(Error::NonFinite("latent means".into()));
        }
        let mut hist = HistogramSet {
            bins,
            edges: Vec::with_capacity(k),
            probs: Vec::with_capacity(k),
            degenerate: Vec::with_capacity(k),
        };
        for d in 0..k {
            let column = (0..m).map(|i| mus.data()[i * k + d]);
            let (lo, hi) = column
                .clone()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi <= lo {
                hist.edges
                    .push((0..=bins).map(|b| lo - 0.5 + b as f64 / bins as f64).collect());
                hist.probs.push(vec![1.0 / bins as f64; bins]);
                hist.degenerate.push(true);
                continue;
            }
            let edges: Vec<f64> = (0..=bins)
                .map(|b| lo + (hi - lo) * b as f64 / bins as f64)
                .collect();
            let mut counts = vec![0usize; bins];
            for v in column {
                counts[bin_index(lo, hi, bins, v)] += 1;
            }
            hist.edges.push(edges);
            hist.probs
                .push(counts.iter().map(|&c| c as f64 / m as f64).collect());
            hist.degenerate.push(false);
        }
        Ok(hist)
    }

    pub fn latent_dim(&self) -> usize {
        self.probs.len()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn edges(&self, dim: usize) -> &[f64] {
        &self.edges[dim]
    }

    pub fn probs(&self, dim: usize) -> &[f64] {
        &self.probs[dim]
    }

    pub fn is_degenerate(&self, dim: usize) -> bool {
        self.degenerate[dim]
    }

    /// Bin of `value` in dimension `dim`; values outside the observed range
    /// land in the nearest end bin.
    pub fn bin_of(&self, dim: usize, value: f64) -> usize {
        let e = &self.edges[dim];
        bin_index(e[0], e[self.bins], self.bins, value)
    }
}

fn bin_index(lo: f64, hi: f64, bins: usize, v: f64) -> usize {
    let t = (v - lo) / (hi - lo) * bins as f64;
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

/// Encodes `faces` (`[M, C, 64, 64]`) and histograms the posterior means.
/// Returns the histograms together with the means they were built from.
pub fn estimate_histograms(
    encoder: &EncoderParams,
    faces: &Tensor,
    bins: usize,
) -> Result<(HistogramSet, Tensor)> {
    if faces.ndim() == 0 || faces.dim(0) == 0 {
        return Err(Error::Dataset("cannot estimate histograms from an empty face set".into()));
    }
    let stats = encoder.forward_chunked(faces, 64)?;
    let hist = HistogramSet::from_means(&stats.mu, bins)?;
    Ok((hist, stats.mu))
}

/// Normalized per-face selection probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub weights: Vec<f64>,
    pub alpha: f64,
    /// Number of completed training epochs when these weights were computed.
    pub epoch: Option<usize>,
}

impl SampleWeights {
    pub fn uniform(m: usize) -> Self {
        SampleWeights {
            weights: vec![1.0 / m as f64; m],
            alpha: f64::INFINITY,
            epoch: None,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Inverse-frequency weights with smoothing `alpha`, combined across latent
/// dimensions by product (summed in log space) and normalized to one.
pub fn compute_weights(hist: &HistogramSet, mus: &Tensor, alpha: f64) -> Result<SampleWeights> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    let k = hist.latent_dim();
    let m = match *mus.shape() {
        [m, kk] if kk == k => m,
        ref s => {
            return Err(Error::shape(
                "compute_weights",
                format!("means must be [M,{k}], got {s:?}"),
            ))
        }
    };
    if m == 0 {
        return Err(Error::Dataset("no examples to weight".into()));
    }
    let log_w: Vec<f64> = (0..m)
        .map(|i| {
            (0..k)
                .map(|d| {
                    let q = hist.probs[d][hist.bin_of(d, mus.data()[i * k + d])];
                    -(q + alpha).ln()
                })
                .sum()
        })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(SampleWeights {
        weights: unnorm.into_iter().map(|w| w / total).collect(),
        alpha,
        epoch: None,
    })
}

/// `n` i.i.d. draws with replacement from the categorical distribution `weights`.
pub fn resample_indices(weights: &SampleWeights, n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(&weights.weights)
        .map_err(|e| Error::InvalidArgument(format!("sample weights: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng.inner())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub dim: usize,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub probability: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeRow {
    /// `top` (largest weights) or `bottom` (smallest).
    pub kind: String,
    pub rank: usize,
    /// Position within the weighted face subset.
    pub index: usize,
    pub weight: f64,
    pub group: Option<GroupTag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectionReport {
    pub histograms: Vec<HistogramRow>,
    pub extremes: Vec<ExtremeRow>,
}

pub const EXTREME_ROWS: usize = 10;

impl InspectionReport {
    pub fn top(&self) -> impl Iterator<Item = &ExtremeRow> {
        self.extremes.iter().filter(|r| r.kind == "top")
    }

    pub fn bottom(&self) -> impl Iterator<Item = &ExtremeRow> {
        self.extremes.iter().filter(|r| r.kind == "bottom")
    }

    pub fn histograms_csv(&self, header: Option<&str>) -> Result<String> {
        crate::report::to_csv_with_header(&self.histograms, header)
    }

    pub fn extremes_csv(&self, header: Option<&str>) -> Result<String> {
        crate::report::to_csv_with_header(&self.extremes, header)
    }

    pub fn from_csv(histograms: &str, extremes: &str) -> Result<Self> {
        Ok(InspectionReport {
            histograms: crate::report::from_csv(histograms)?,
            extremes: crate::report::from_csv(extremes)?,
        })
    }
}

/// Tabulates every histogram and the `min(10, M)` highest- and lowest-weighted
/// faces. `groups[i]` is the group of the face weighted by `weights.weights[i]`.
pub fn inspect(
    hist: &HistogramSet,
    weights: &SampleWeights,
    groups: &[Option<GroupTag>],
) -> Result<InspectionReport> {
    if groups.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} group tags for {} weights",
            groups.len(),
            weights.len()
        )));
    }
    let mut histograms = Vec::with_capacity(hist.latent_dim() * hist.bins());
    for dim in 0..hist.latent_dim() {
        for bin in 0..hist.bins() {
            histograms.push(HistogramRow {
                dim,
                bin,
                lower: hist.edges[dim][bin],
                upper: hist.edges[dim][bin + 1],
                probability: hist.probs[dim][bin],
                degenerate: hist.degenerate[dim],
            });
        }
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights.weights[b].total_cmp(&weights.weights[a]).then(a.cmp(&b)));
    let rows = EXTREME_ROWS.min(weights.len());
    let row = |kind: &str, rank: usize, index: usize| ExtremeRow {
        kind: kind.into(),
        rank,
        index,
        weight: weights.weights[index],
        group: groups[index],
    };
    let mut extremes: Vec<ExtremeRow> = order[..rows]
        .iter()
        .enumerate()
        .map(|(r, &i)| row("top", r + 1, i))
        .collect();
    extremes.extend(
        order
            .iter()
            .rev()
            .take(rows)
            .enumerate()
            .map(|(r, &i)| row("bottom", r + 1, i)),
    );
    Ok(InspectionReport {
        histograms,
        extremes,
    })
}
