use itertools::Itertools;

/// Largest category count accepted by [`permutation_score`].
pub const MAX_PERMUTATION_CATEGORIES: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("correlation undefined: zero variance")]
    Undefined,
    #[error("no samples")]
    Empty,
    #[error("{0} categories exceed the enumeration limit of {MAX_PERMUTATION_CATEGORIES}")]
    TooManyCategories(usize),
}

/// Off-diagonal entries of a row-major `n x n` matrix.
pub fn off_diagonal(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push(m[i * n + j]);
            }
        }
    }
    out
}

/// Pearson correlation of two equally long series.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Constant series leave only round-off after centring.
    let floor = |x: &[f64]| {
        let m = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        n * (4.0 * f64::EPSILON * m).powi(2)
    };
    if saa <= floor(a) || sbb <= floor(b) {
        return Err(MetricError::Undefined);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation over the `n (n - 1)` off-diagonal entries.
pub fn pearson_offdiag(a: &[f64], k: &[f64], n: usize) -> Result<f64, MetricError> {
    if a.len() != n * n || k.len() != n * n {
        return Err(MetricError::Shape(format!("expected {n}x{n} matrices")));
    }
    pearson(&off_diagonal(a, n), &off_diagonal(k, n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize, values: &[f64]) -> Self {
        let mut counts = vec![0; bins];
        let w = (hi - lo) / bins as f64;
        for &v in values {
            let b = (((v - lo) / w).floor() as isize).clamp(0, bins as isize - 1);
            counts[b as usize] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn edges(&self) -> Vec<(f64, f64)> {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (0..self.counts.len())
            .map(|b| (self.lo + b as f64 * w, self.lo + (b + 1) as f64 * w))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub rho_tot: f64,
    /// Mean of the defined per-sample correlations; NaN when none is defined.
    pub rho_sample_mean: f64,
    pub rho_samples: Vec<Option<f64>>,
    pub rho_sample_histogram: Histogram,
    pub n_pairs_used: usize,
    /// Samples whose correlation is undefined and left out of the mean.
    pub n_undefined: usize,
}

/// Pooled and per-sample correlations between estimated and true graphs.
pub fn correlation_report(
    alphas: &[Vec<f64>],
    truths: &[Vec<f64>],
    n: usize,
) -> Result<CorrelationReport, MetricError> {
    if alphas.is_empty() {
        return Err(MetricError::Empty);
    }
    if alphas.len() != truths.len() {
        return Err(MetricError::Shape(format!(
            "{} estimates for {} truths",
            alphas.len(),
            truths.len()
        )));
    }
    let mut pooled_a = Vec::new();
    let mut pooled_k = Vec::new();
    let mut rho_samples = Vec::with_capacity(alphas.len());
    for (a, k) in alphas.iter().zip(truths) {
        if a.len() != n * n || k.len() != n * n {
            return Err(MetricError::Shape(format!("expected {n}x{n} matrices")));
        }
        let (oa, ok) = (off_diagonal(a, n), off_diagonal(k, n));
        rho_samples.push(pearson(&oa, &ok).ok());
        pooled_a.extend(oa);
        pooled_k.extend(ok);
    }
    let defined: Vec<f64> = rho_samples.iter().flatten().copied().collect();
    let rho_sample_mean = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(CorrelationReport {
        rho_tot: pearson(&pooled_a, &pooled_k)?,
        rho_sample_mean,
        n_undefined: rho_samples.len() - defined.len(),
        rho_sample_histogram: Histogram::new(-1.0, 1.0, 20, &defined),
        rho_samples,
        n_pairs_used: pooled_a.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationScore {
    pub correlation: f64,
    /// `weights[c]` is the strength given to category `c`.
    pub weights: Vec<f64>,
}

/// Scores a discrete edge labelling: every assignment of the evenly spaced
/// strengths `0, 1/(n-1), ..., 1` to the `n` categories is tried and the best
/// off-diagonal correlation with `truth` is returned. Labels are per-sample
/// `agents x agents` matrices; diagonal labels are ignored.
pub fn permutation_score(
    labels: &[Vec<usize>],
    truths: &[Vec<f64>],
    agents: usize,
    categories: usize,
) -> Result<PermutationScore, MetricError> {
    if categories > MAX_PERMUTATION_CATEGORIES {
        return Err(MetricError::TooManyCategories(categories));
    }
    if categories < 2 {
        return Err(MetricError::Undefined);
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    if labels.len() != truths.len() {
        return Err(MetricError::Shape(format!(
            "{} labellings for {} truths",
            labels.len(),
            truths.len()
        )));
    }
    let mut flat_labels = Vec::new();
    let mut flat_truth = Vec::new();
    for (l, k) in labels.iter().zip(truths) {
        if l.len() != agents * agents || k.len() != agents * agents {
            return Err(MetricError::Shape(format!("expected {agents}x{agents} matrices")));
        }
        if let Some(&bad) = l.iter().find(|&&c| c >= categories) {
            return Err(MetricError::Shape(format!("label {bad} outside 0..{categories}")));
        }
        for i in 0..agents {
            for j in 0..agents {
                if i != j {
                    flat_labels.push(l[i * agents + j]);
                    flat_truth.push(k[i * agents + j]);
                }
            }
        }
    }
    let levels: Vec<f64> = (0..categories).map(|c| c as f64 / (categories - 1) as f64).collect();
    let mut best: Option<PermutationScore> = None;
    let mut est = vec![0.0; flat_labels.len()];
    for perm in levels.iter().copied().permutations(categories) {
        for (e, &l) in est.iter_mut().zip(&flat_labels) {
            *e = perm[l];
        }
        let r = match pearson(&est, &flat_truth) {
            Ok(r) => r,
            Err(MetricError::Undefined) => continue,
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|b| r > b.correlation) {
            best = Some(PermutationScore {
                correlation: r,
                weights: perm,
            });
        }
    }
    best.ok_or(MetricError::Undefined)
}

/// Mean squared error over the first `h` predicted steps for each horizon `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonMse {
    pub horizons: Vec<usize>,
    pub mse: Vec<f64>,
}

impl HorizonMse {
    pub fn at(&self, h: usize) -> Option<f64> {
        self.horizons.iter().position(|&x| x == h).map(|i| self.mse[i])
    }
}

pub const STANDARD_HORIZONS: [usize; 3] = [10, 30, 50];

/// `pred` and `truth` are `[samples, steps, values_per_step]` row-major; the
/// error at horizon `h` averages samples, agents and variables over steps `0..h`.
pub fn horizon_mse(
    pred: &[f64],
    truth: &[f64],
    samples: usize,
    steps: usize,
    horizons: &[usize],
) -> Result<HorizonMse, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if samples == 0 || steps == 0 {
        return Err(MetricError::Empty);
    }
    if !pred.len().is_multiple_of(samples * steps) {
        return Err(MetricError::Shape(format!(
            "{} values do not split into {samples}x{steps}",
            pred.len()
        )));
    }
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > steps) {
        return Err(MetricError::Shape(format!("horizon {h} outside 1..={steps}")));
    }
    let per_step = pred.len() / (samples * steps);
    let mut step_sq = vec![0.0; steps];
    for s in 0..samples {
        for (t, acc) in step_sq.iter_mut().enumerate() {
            let off = (s * steps + t) * per_step;
            for k in off..off + per_step {
                let d = pred[k] - truth[k];
                *acc += d * d;
            }
        }
    }
    let mse = horizons
        .iter()
        .map(|&h| step_sq[..h].iter().sum::<f64>() / (h * samples * per_step) as f64)
        .collect();
    Ok(HorizonMse {
        horizons: horizons.to_vec(),
        mse,
    })
}
