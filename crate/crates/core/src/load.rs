//! Hourly load profiles, their clustering into discrete load levels, and
//! inverse-CDF sampling of those levels.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Profile entries may exceed 1 by this much (rounding in published tables).
pub const PROFILE_SLACK_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("profile row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("profile: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid load model: {0}")]
    InvalidModel(String),
    #[error("k = {k} exceeds the {distinct} distinct profile values")]
    TooManyClusters { k: usize, distinct: usize },
}

/// Hourly system load as a fraction of the annual peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub hourly: Vec<f64>,
    /// MW
    pub peak_mw: f64,
}

impl LoadProfile {
    pub fn new(hourly: Vec<f64>, peak_mw: f64) -> Result<Self, LoadError> {
        if hourly.is_empty() {
            return Err(LoadError::InvalidProfile("no entries".into()));
        }
        if !(peak_mw.is_finite() && peak_mw > 0.0) {
            return Err(LoadError::InvalidProfile(format!(
                "peak must be positive, got {peak_mw}"
            )));
        }
        for (i, v) in hourly.iter().enumerate() {
            if !(v.is_finite() && *v > 0.0 && *v <= 1.0 + PROFILE_SLACK_TOL) {
                return Err(LoadError::Row {
                    row: i + 1,
                    message: format!("load fraction {v} outside (0, 1]"),
                });
            }
        }
        Ok(Self { hourly, peak_mw })
    }

    /// Reads a one-column CSV with header `load_fraction`.
    pub fn from_csv<R: Read>(reader: R, peak_mw: f64) -> Result<Self, LoadError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 1 || &headers[0] != "load_fraction" {
            return Err(LoadError::InvalidProfile(format!(
                "expected a single `load_fraction` column, found {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut hourly = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = rec.get(0).unwrap_or("");
            let v: f64 = field.parse().map_err(|_| LoadError::Row {
                row: i + 1,
                message: format!("not a number: {field:?}"),
            })?;
            hourly.push(v);
        }
        Self::new(hourly, peak_mw)
    }

    pub fn read_csv(path: &Path, peak_mw: f64) -> Result<Self, LoadError> {
        let f = std::fs::File::open(path).map_err(|source| LoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv(std::io::BufReader::new(f), peak_mw)
    }

    pub fn mean(&self) -> f64 {
        self.hourly.iter().sum::<f64>() / self.hourly.len() as f64
    }

    fn distinct_weighted(&self) -> (Vec<f64>, Vec<u64>) {
        let mut v = self.hourly.clone();
        v.sort_by(f64::total_cmp);
        let mut vals: Vec<f64> = Vec::new();
        let mut counts: Vec<u64> = Vec::new();
        for x in v {
            match vals.last() {
                Some(&last) if last == x => *counts.last_mut().unwrap() += 1,
                _ => {
                    vals.push(x);
                    counts.push(1);
                }
            }
        }
        (vals, counts)
    }
}

/// Discrete distribution of system load factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadModel {
    /// Strictly increasing load factors.
    pub levels: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Running sum of `probabilities`; the last entry is exactly 1.
    pub cdf: Vec<f64>,
}

impl LoadModel {
    /// Builds a model from levels and (unnormalised) nonnegative weights.
    pub fn new(levels: Vec<f64>, weights: Vec<f64>) -> Result<Self, LoadError> {
        if levels.is_empty() || levels.len() != weights.len() {
            return Err(LoadError::InvalidModel(
                "levels and weights must be non-empty and of equal length".into(),
            ));
        }
        if levels.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(LoadError::InvalidModel("levels must be positive".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LoadError::InvalidModel(
                "levels must be strictly increasing".into(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(LoadError::InvalidModel("weights must be positive".into()));
        }
        let mut acc = Vec::with_capacity(weights.len());
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for w in &weights {
            // Kahan
            let y = w - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
            acc.push(sum);
        }
        let probabilities = weights.iter().map(|w| w / sum).collect();
        let mut cdf: Vec<f64> = acc.iter().map(|a| a / sum).collect();
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self {
            levels,
            probabilities,
            cdf,
        })
    }

    /// A single level with probability 1.
    pub fn constant(level: f64) -> Result<Self, LoadError> {
        Self::new(vec![level], vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.levels
            .iter()
            .zip(&self.probabilities)
            .map(|(l, p)| l * p)
            .sum()
    }

    pub fn min_level(&self) -> f64 {
        self.levels[0]
    }

    pub fn max_level(&self) -> f64 {
        *self.levels.last().unwrap()
    }

    /// Index of the smallest `i` with `u < cdf[i]`.
    pub fn sample_index(&self, u: f64) -> usize {
        self.cdf.partition_point(|c| *c <= u).min(self.levels.len() - 1)
    }

    pub fn sample_level(&self, u: f64) -> f64 {
        self.levels[self.sample_index(u)]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), LoadError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["level", "probability", "cdf"])?;
        for i in 0..self.len() {
            wtr.write_record([
                self.levels[i].to_string(),
                self.probabilities[i].to_string(),
                self.cdf[i].to_string(),
            ])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn sample_level(model: &LoadModel, u: f64) -> f64 {
    model.sample_level(u)
}

/// 1-D k-means over the hourly values.
///
/// Clusters are kept as contiguous runs of the sorted distinct values (the
/// optimal 1-D partition is always contiguous), seeded at weighted
/// quantiles and refined by Lloyd iterations until the boundaries stop
/// moving. Every cluster stays non-empty, so exactly `k` levels come back.
pub fn cluster_profile(profile: &LoadProfile, k: usize) -> Result<LoadModel, LoadError> {
    if k == 0 {
        return Err(LoadError::InvalidModel("k must be at least 1".into()));
    }
    let (vals, counts) = profile.distinct_weighted();
    let m = vals.len();
    if k > m {
        return Err(LoadError::TooManyClusters { k, distinct: m });
    }
    let total: u64 = counts.iter().sum();
    let mut cum = Vec::with_capacity(m);
    let mut run = 0u64;
    for c in &counts {
        run += c;
        cum.push(run);
    }

    // seed centroids at weighted quantiles (j + 1/2)/k, forced onto distinct values
    let mut seed = vec![0usize; k];
    for (j, s) in seed.iter_mut().enumerate() {
        let target = ((2 * j + 1) as f64 * total as f64 / (2 * k) as f64).ceil() as u64;
        *s = cum.partition_point(|c| *c < target.max(1)).min(m - 1);
    }
    for j in 1..k {
        seed[j] = seed[j].max(seed[j - 1] + 1);
    }
    for j in (0..k).rev() {
        seed[j] = seed[j].min(m - (k - j));
        if j + 1 < k {
            seed[j] = seed[j].min(seed[j + 1] - 1);
        }
    }
    let mut centroids: Vec<f64> = seed.iter().map(|&i| vals[i]).collect();

    // starts[j] = first distinct-value index of cluster j
    let mut starts = boundaries(&vals, &centroids, k);
    for _ in 0..10_000 {
        centroids = segment_means(&vals, &counts, &starts);
        let next = boundaries(&vals, &centroids, k);
        if next == starts {
            break;
        }
        starts = next;
    }
    let weights: Vec<f64> = (0..k)
        .map(|j| {
            let end = if j + 1 < k { starts[j + 1] } else { m };
            counts[starts[j]..end].iter().sum::<u64>() as f64
        })
        .collect();
    LoadModel::new(segment_means(&vals, &counts, &starts), weights)
}

fn boundaries(vals: &[f64], centroids: &[f64], k: usize) -> Vec<usize> {
    let m = vals.len();
    let mut starts = vec![0usize; k];
    for j in 1..k {
        let mid = 0.5 * (centroids[j - 1] + centroids[j]);
        starts[j] = vals.partition_point(|v| *v <= mid);
    }
    for j in 1..k {
        starts[j] = starts[j].max(starts[j - 1] + 1);
    }
    for j in (1..k).rev() {
        starts[j] = starts[j].min(m - (k - j));
        if j + 1 < k {
            starts[j] = starts[j].min(starts[j + 1] - 1);
        }
    }
    starts
}

fn segment_means(vals: &[f64], counts: &[u64], starts: &[usize]) -> Vec<f64> {
    let k = starts.len();
    (0..k)
        .map(|j| {
            let end = if j + 1 < k { starts[j + 1] } else { vals.len() };
            let (s, n) = (starts[j]..end).fold((0.0, 0u64), |(s, n), i| {
                (s + vals[i] * counts[i] as f64, n + counts[i])
            });
            s / n as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RTS: &str = include_str!("../fixtures/rts_load_profile.csv");

    fn two_valued() -> LoadProfile {
        let mut h = vec![0.5; 4380];
        h.extend(vec![1.0; 4380]);
        LoadProfile::new(h, 100.0).unwrap()
    }

    #[test]
    fn constant_profile_single_level() {
        let p = LoadProfile::new(vec![0.8; 8760], 100.0).unwrap();
        let m = cluster_profile(&p, 1).unwrap();
        assert_eq!(m.levels, vec![0.8]);
        assert_eq!(m.probabilities, vec![1.0]);
        assert_eq!(m.cdf, vec![1.0]);
    }

    #[test]
    fn two_valued_profile_separates() {
        let m = cluster_profile(&two_valued(), 2).unwrap();
        assert_eq!(m.levels, vec![0.5, 1.0]);
        assert_eq!(m.probabilities, vec![0.5, 0.5]);
        assert_eq!(m.sample_level(0.25), 0.5);
        assert_eq!(m.sample_level(0.75), 1.0);
        assert_eq!(m.sample_level(0.5), 1.0);
        assert_eq!(m.sample_level(0.0), 0.5);
    }

    #[test]
    fn too_many_clusters() {
        assert!(matches!(
            cluster_profile(&two_valued(), 3),
            Err(LoadError::TooManyClusters { k: 3, distinct: 2 })
        ));
    }

    #[test]
    fn rts_profile_clusters_preserve_mean() {
        let p = LoadProfile::from_csv(RTS.as_bytes(), 2850.0).unwrap();
        assert_eq!(p.hourly.len(), 8760);
        let m = cluster_profile(&p, 50).unwrap();
        assert_eq!(m.len(), 50);
        assert!(m.levels.windows(2).all(|w| w[0] < w[1]));
        assert!((m.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(*m.cdf.last().unwrap(), 1.0);
        assert!(m.cdf.windows(2).all(|w| w[0] <= w[1]));
        let direct = p.mean();
        assert!((m.mean() - direct).abs() / direct < 0.005);
        // deterministic
        assert_eq!(cluster_profile(&p, 50).unwrap(), m);
    }

    fn sse(hours: &[f64], levels: &[f64]) -> f64 {
        hours
            .iter()
            .map(|h| {
                levels
                    .iter()
                    .map(|l| (l - h).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    }

    #[test]
    fn kmeans_beats_equal_width_bins() {
        let p = LoadProfile::from_csv(RTS.as_bytes(), 2850.0).unwrap();
        let k = 10;
        let m = cluster_profile(&p, k).unwrap();
        let (lo, hi) = (0.3388, 1.0);
        let w = (hi - lo) / k as f64;
        let mut sums = vec![(0.0, 0usize); k];
        for h in &p.hourly {
            let b = (((h - lo) / w) as usize).min(k - 1);
            sums[b].0 += h;
            sums[b].1 += 1;
        }
        let bins: Vec<f64> = sums
            .iter()
            .filter(|s| s.1 > 0)
            .map(|s| s.0 / s.1 as f64)
            .collect();
        assert!(sse(&p.hourly, &m.levels) <= sse(&p.hourly, &bins));
    }

    #[test]
    fn sampling_frequencies_follow_probabilities() {
        let m = LoadModel::new(vec![0.4, 0.7, 1.0], vec![0.2, 0.5, 0.3]).unwrap();
        let n = 1_000_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = [0usize; 3];
        for _ in 0..n {
            hits[m.sample_index(rng.gen::<f64>())] += 1;
        }
        let mut chi2 = 0.0;
        for (h, p) in hits.iter().zip(&m.probabilities) {
            let e = p * n as f64;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*h as f64 - e).abs() < 3.0 * sd, "{hits:?}");
            chi2 += (*h as f64 - e).powi(2) / e;
        }
        // chi-square, 2 degrees of freedom, 99%
        assert!(chi2 < 9.21, "{chi2}");
    }

    #[test]
    fn csv_errors_name_the_row() {
        let e = LoadProfile::from_csv("load_fraction\n0.5\nabc\n".as_bytes(), 1.0).unwrap_err();
        assert!(matches!(e, LoadError::Row { row: 2, .. }), "{e}");
        let e = LoadProfile::from_csv("load_fraction\n0.5\n1.5\n".as_bytes(), 1.0).unwrap_err();
        assert!(matches!(e, LoadError::Row { row: 2, .. }), "{e}");
        let e = LoadProfile::from_csv("fraction\n0.5\n".as_bytes(), 1.0).unwrap_err();
        assert!(matches!(e, LoadError::InvalidProfile(_)), "{e}");
    }

    #[test]
    fn model_validation() {
        assert!(LoadModel::new(vec![1.0, 0.5], vec![1.0, 1.0]).is_err());
        assert!(LoadModel::new(vec![0.5], vec![0.0]).is_err());
        let m = LoadModel::new(vec![0.5, 1.0], vec![3.0, 1.0]).unwrap();
        assert_eq!(m.probabilities, vec![0.75, 0.25]);
        assert_eq!(m.cdf, vec![0.75, 1.0]);
    }

    #[test]
    fn model_csv() {
        let m = cluster_profile(&two_valued(), 2).unwrap();
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "level,probability,cdf\n0.5,0.5,0.5\n1,0.5,1\n"
        );
    }
}
