//! Transductive label smoothing over query embeddings.
//!
//! A Gaussian affinity graph is built over the embedded queries, symmetrically
//! normalized, and the one-hot pseudo-labels are smoothed either by iterating
//! `F <- alpha * A_hat * F + (1 - alpha) * Y_bar` or by the closed-form
//! pseudo-inverse solution `(I - alpha * A_hat)^+ Y_bar`. The two routes agree
//! up to the scalar factor `1 - alpha` (the iteration's fixed point carries
//! it), which argmax discards.
//!
//! No query ground truth enters anywhere: predictions depend only on
//! embeddings and classifier logits.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// Use the configured constant bandwidth.
    Fixed,
    /// Use the standard deviation of the embedded points.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagationMode {
    Closed,
    Iterative,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelPropConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub sigma: f64,
    pub sigma_mode: SigmaMode,
    pub rcond: f64,
    pub include_support: bool,
    pub mode: PropagationMode,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LabelPropConfig {
    fn default() -> Self {
        LabelPropConfig {
            enabled: true,
            alpha: 0.99,
            sigma: 50.0,
            sigma_mode: SigmaMode::Fixed,
            rcond: 0.1,
            include_support: false,
            mode: PropagationMode::Closed,
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

/// Gaussian affinity over embeddings with its symmetric normalization.
#[derive(Clone, Debug)]
pub struct AffinityGraph {
    /// `a[i][j] = exp(-|z_i - z_j|^2 / (2 sigma^2))`, zero diagonal.
    pub affinity: DMatrix<f64>,
    /// `D^{-1/2} A D^{-1/2}`; rows with zero degree stay zero.
    pub normalized: DMatrix<f64>,
    pub sigma: f64,
}

pub fn build_affinity(embeddings: &[Vec<f64>], sigma: f64) -> Result<AffinityGraph> {
    if sigma <= 0.0 {
        return Err(Error::Parameter(format!("affinity bandwidth must be > 0, got {sigma}")));
    }
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Contract(format!("affinity graph needs >= 2 embeddings, got {n}")));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Shape("embeddings have inconsistent widths".into()));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut affinity = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 =
                embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            let a = (-d2 * inv).exp();
            affinity[(i, j)] = a;
            affinity[(j, i)] = a;
        }
    }
    let normalized = normalize_affinity(&affinity);
    Ok(AffinityGraph { affinity, normalized, sigma })
}

/// `D^{-1/2} A D^{-1/2}` with zero-degree rows (all neighbors out of reach)
/// zeroed instead of dividing by zero, so their labels stay at `Y_bar`.
pub fn normalize_affinity(affinity: &DMatrix<f64>) -> DMatrix<f64> {
    let n = affinity.nrows();
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = affinity.row(i).iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| affinity[(i, j)] * inv_sqrt_deg[i] * inv_sqrt_deg[j])
}

/// One-hot rows from labels.
pub fn one_hot_rows(labels: &[usize], n_classes: usize) -> Result<DMatrix<f64>> {
    if labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::Contract(format!("label out of range for {n_classes} classes")));
    }
    let mut y = DMatrix::zeros(labels.len(), n_classes);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    Ok(y)
}

pub fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.nrows())
        .map(|i| {
            let mut best = 0;
            for j in 1..m.ncols() {
                if m[(i, j)] > m[(i, best)] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha == 1.0 {
        return Err(Error::Contract(
            "alpha = 1 leaves the propagation without a contraction; use alpha < 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    Ok(())
}

/// Damped fixed-point iteration `F <- alpha A_hat F + (1 - alpha) Y_bar`
/// starting from `Y_bar`, stopped at `tol` max-abs change or `max_iter`.
pub fn propagate_iterative(
    graph: &AffinityGraph,
    y_bar: &DMatrix<f64>,
    alpha: f64,
    max_iter: usize,
    tol: f64,
) -> Result<DMatrix<f64>> {
    check_alpha(alpha)?;
    if y_bar.nrows() != graph.normalized.nrows() {
        return Err(Error::Shape(format!(
            "assignment has {} rows for a {}-node graph",
            y_bar.nrows(),
            graph.normalized.nrows()
        )));
    }
    let mut f = y_bar.clone();
    let damped = y_bar * (1.0 - alpha);
    for _ in 0..max_iter {
        let next = &graph.normalized * &f * alpha + &damped;
        let delta = (&next - &f).abs().max();
        f = next;
        if delta < tol {
            break;
        }
    }
    Ok(f)
}

/// Closed-form solution `(I - alpha A_hat)^+ Y_bar` through an SVD
/// pseudo-inverse; singular values below `rcond * sigma_max` are zeroed.
pub fn propagate_closed(
    graph: &AffinityGraph,
    y_bar: &DMatrix<f64>,
    alpha: f64,
    rcond: f64,
) -> Result<DMatrix<f64>> {
    check_alpha(alpha)?;
    if rcond < 0.0 {
        return Err(Error::Parameter(format!("rcond must be >= 0, got {rcond}")));
    }
    let n = graph.normalized.nrows();
    if y_bar.nrows() != n {
        return Err(Error::Shape(format!(
            "assignment has {} rows for a {n}-node graph",
            y_bar.nrows()
        )));
    }
    let system = DMatrix::identity(n, n) - &graph.normalized * alpha;
    let svd = system.clone().try_svd(true, true, f64::EPSILON, 0).ok_or_else(|| {
        Error::Numeric(format!(
            "SVD of the {n}x{n} propagation system failed to converge; max |entry| = {:.3e}",
            system.abs().max()
        ))
    })?;
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let smax = svd.singular_values.max();
    let cutoff = rcond * smax;
    let inv_sigma: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    // pinv(M) y = V diag(1/s) U^T y
    let uty = u.transpose() * y_bar;
    let mut scaled = uty;
    for (i, inv) in inv_sigma.iter().enumerate() {
        for j in 0..scaled.ncols() {
            scaled[(i, j)] *= inv;
        }
    }
    Ok(v_t.transpose() * scaled)
}

/// Support rows that can be prepended to the graph: their labels are known,
/// so their assignment rows are exact one-hots. They are dropped from the
/// returned predictions.
pub struct SupportSet<'a> {
    pub embeddings: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

/// Smooth classifier decisions over the query set. `Y_bar` is the one-hot
/// argmax of the logits (scale-invariant), the graph covers query embeddings
/// only unless `include_support` is set, and the final labels are the argmax
/// rows of the propagated assignment. Fewer than two queries bypass the graph.
pub fn smooth_predictions(
    query_embeddings: &[Vec<f64>],
    classifier_logits: &[Vec<f64>],
    cfg: &LabelPropConfig,
    support: Option<SupportSet<'_>>,
) -> Result<Vec<usize>> {
    if query_embeddings.len() != classifier_logits.len() {
        return Err(Error::Contract(format!(
            "{} embeddings vs {} logit rows",
            query_embeddings.len(),
            classifier_logits.len()
        )));
    }
    if classifier_logits.is_empty() {
        return Ok(Vec::new());
    }
    let n_classes = classifier_logits[0].len();
    let raw: Vec<usize> = classifier_logits
        .iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    if query_embeddings.len() < 2 || !cfg.enabled {
        return Ok(raw);
    }

    let mut embeddings: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut n_support = 0;
    if cfg.include_support {
        if let Some(s) = &support {
            if s.embeddings.len() != s.labels.len() {
                return Err(Error::Contract("support embeddings/labels length mismatch".into()));
            }
            embeddings.extend(s.embeddings.iter().cloned());
            labels.extend_from_slice(s.labels);
            n_support = s.labels.len();
        }
    }
    embeddings.extend(query_embeddings.iter().cloned());
    labels.extend(raw.iter().copied());

    let sigma = match cfg.sigma_mode {
        SigmaMode::Fixed => cfg.sigma,
        SigmaMode::Auto => embedding_std(&embeddings),
    };
    let graph = build_affinity(&embeddings, sigma)?;
    let y_bar = one_hot_rows(&labels, n_classes)?;
    let f = match cfg.mode {
        PropagationMode::Closed => propagate_closed(&graph, &y_bar, cfg.alpha, cfg.rcond)?,
        PropagationMode::Iterative => {
            propagate_iterative(&graph, &y_bar, cfg.alpha, cfg.max_iter, cfg.tol)?
        }
    };
    // A row can come back with no mass: the rcond cutoff may truncate the
    // graph's consensus direction entirely (with alpha = 0.99 any cutoff above
    // 1 - alpha does). Such rows carry no evidence, so they keep their
    // pseudo-label, like zero-degree nodes do.
    let all = argmax_rows(&f);
    let out = (0..query_embeddings.len())
        .map(|q| {
            let row = f.row(n_support + q);
            if row.iter().map(|v| v.abs()).fold(0.0, f64::max) <= 1e-12 {
                raw[q]
            } else {
                all[n_support + q]
            }
        })
        .collect();
    Ok(out)
}

/// Standard deviation of the embedded points: root mean squared distance to
/// their centroid.
pub fn embedding_std(embeddings: &[Vec<f64>]) -> f64 {
    let n = embeddings.len();
    if n == 0 {
        return 0.0;
    }
    let dim = embeddings[0].len();
    let mut centroid = vec![0.0; dim];
    for e in embeddings {
        for (c, v) in centroid.iter_mut().zip(e) {
            *c += v / n as f64;
        }
    }
    let msd: f64 = embeddings
        .iter()
        .map(|e| e.iter().zip(&centroid).map(|(v, c)| (v - c) * (v - c)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    msd.sqrt().max(f64::MIN_POSITIVE)
}
