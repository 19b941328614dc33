//! Novelty detection over embeddings: PCA / LDA projection to a few
//! dimensions and a radius/count outlier rule with threshold tuning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, jacobi_eigh, solve_lower, solve_lower_transpose};

/// Ridge added to the within-class scatter so its Cholesky factor exists.
pub const LDA_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Pca,
    Lda,
}

/// A fitted linear projection: rows of `directions` are unit-length
/// projection axes applied to mean-centered vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionModel {
    pub kind: ProjectionKind,
    pub mean: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
}

impl ProjectionModel {
    pub fn dims(&self) -> usize {
        self.directions.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "vector length {} does not match fitted dimension {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(self
            .directions
            .iter()
            .map(|d| {
                d.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(w, (v, m))| w * (v - m))
                    .sum()
            })
            .collect())
    }

    pub fn project_all(&self, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        data.iter().map(|x| self.project(x)).collect()
    }
}

fn mean_vector(data: &[Vec<f64>]) -> Vec<f64> {
    let d = data[0].len();
    let mut mean = vec![0.0; d];
    for row in data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= data.len() as f64;
    }
    mean
}

fn check_data(data: &[Vec<f64>], min_rows: usize) -> Result<usize> {
    if data.len() < min_rows {
        return Err(Error::Data(format!(
            "need at least {min_rows} vectors, got {}",
            data.len()
        )));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|row| row.len() != d) {
        return Err(Error::Shape(
            "vectors must be non-empty and equal-length".into(),
        ));
    }
    Ok(d)
}

/// Fixes the overall sign of a direction so its largest-magnitude component
/// is positive, then normalizes to unit length.
fn canonicalize(direction: &mut [f64]) -> Result<()> {
    let norm: f64 = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-300 {
        return Err(Error::Numeric("degenerate projection direction".into()));
    }
    let lead = direction
        .iter()
        .cloned()
        .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
        .unwrap();
    let sign = if lead < 0.0 { -1.0 } else { 1.0 };
    for v in direction.iter_mut() {
        *v *= sign / norm;
    }
    Ok(())
}

/// Principal component analysis: eigenvectors of the sample covariance
/// (denominator n - 1) in decreasing eigenvalue order.
pub fn fit_pca(data: &[Vec<f64>], dims: usize) -> Result<ProjectionModel> {
    let d = check_data(data, 2)?;
    if dims == 0 || dims > d {
        return Err(Error::Data(format!("pca dims {dims} must lie in 1..={d}")));
    }
    let mean = mean_vector(data);
    let mut cov = vec![0.0; d * d];
    for row in data {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (row[j] - mean[j]);
            }
        }
    }
    let denom = (data.len() - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (_, vectors) = jacobi_eigh(&cov, d)?;
    let mut directions: Vec<Vec<f64>> = vectors.into_iter().take(dims).collect();
    for dir in &mut directions {
        canonicalize(dir)?;
    }
    Ok(ProjectionModel {
        kind: ProjectionKind::Pca,
        mean,
        directions,
    })
}

/// Fisher discriminant analysis. Solves the generalized eigenproblem
/// S_b w = lambda S_w w by Cholesky whitening of the (ridge-regularized)
/// within-class scatter; at most C - 1 discriminant directions exist.
pub fn fit_lda(
    data: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    dims: usize,
) -> Result<ProjectionModel> {
    let d = check_data(data, 2)?;
    if labels.len() != data.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} vectors",
            labels.len(),
            data.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::Data("lda needs at least two classes".into()));
    }
    if dims == 0 || dims > num_classes - 1 {
        return Err(Error::Data(format!(
            "lda dims {dims} must lie in 1..={} (classes - 1)",
            num_classes - 1
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{num_classes}")));
    }
    let mean = mean_vector(data);
    let mut class_means = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (row, &label) in data.iter().zip(labels) {
        counts[label] += 1;
        for (m, v) in class_means[label].iter_mut().zip(row) {
            *m += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {empty} has no vectors")));
    }
    for (cm, &count) in class_means.iter_mut().zip(&counts) {
        for m in cm.iter_mut() {
            *m /= count as f64;
        }
    }
    let mut sw = vec![0.0; d * d];
    let mut sb = vec![0.0; d * d];
    for (row, &label) in data.iter().zip(labels) {
        let cm = &class_means[label];
        for i in 0..d {
            let ci = row[i] - cm[i];
            for j in i..d {
                sw[i * d + j] += ci * (row[j] - cm[j]);
            }
        }
    }
    for (cm, &count) in class_means.iter().zip(&counts) {
        for i in 0..d {
            let bi = cm[i] - mean[i];
            for j in i..d {
                sb[i * d + j] += count as f64 * bi * (cm[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        sw[i * d + i] += LDA_RIDGE;
        for j in i..d {
            sw[j * d + i] = sw[i * d + j];
            sb[j * d + i] = sb[i * d + j];
        }
    }
    // Whiten: with S_w = L L^T, the problem becomes an ordinary symmetric
    // eigenproblem for M = L^-1 S_b L^-T; directions map back via L^-T u.
    let l = cholesky(&sw, d)?;
    // B = L^-1 S_b, column by column.
    let mut b = vec![0.0; d * d];
    for col in 0..d {
        let rhs: Vec<f64> = (0..d).map(|row| sb[row * d + col]).collect();
        let x = solve_lower(&l, d, &rhs);
        for row in 0..d {
            b[row * d + col] = x[row];
        }
    }
    // M = B L^-T, computed row-wise: row i of M solves L m_i = row i of B.
    let mut m = vec![0.0; d * d];
    for row in 0..d {
        let x = solve_lower(&l, d, &b[row * d..(row + 1) * d]);
        m[row * d..(row + 1) * d].copy_from_slice(&x);
    }
    // Symmetrize away round-off before the Jacobi sweep.
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = avg;
            m[j * d + i] = avg;
        }
    }
    let (_, vectors) = jacobi_eigh(&m, d)?;
    let mut directions: Vec<Vec<f64>> = vectors
        .into_iter()
        .take(dims)
        .map(|u| solve_lower_transpose(&l, d, &u))
        .collect();
    // The mapped directions are S_w-orthogonal, not orthogonal; Gram-Schmidt
    // gives an orthonormal basis of the same discriminant subspace.
    for k in 0..directions.len() {
        for j in 0..k {
            let dot: f64 = directions[k]
                .iter()
                .zip(&directions[j])
                .map(|(a, b)| a * b)
                .sum();
            let prev = directions[j].clone();
            for (v, p) in directions[k].iter_mut().zip(&prev) {
                *v -= dot * p;
            }
        }
        canonicalize(&mut directions[k])?;
    }
    Ok(ProjectionModel {
        kind: ProjectionKind::Lda,
        mean,
        directions,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Number of reference points within radius `x` of the query.
pub fn neighbors_within(reference: &[Vec<f64>], query: &[f64], x: f64) -> usize {
    reference.iter().filter(|r| euclid(r, query) <= x).count()
}

/// Radius/count rule: a query is an outlier when fewer than `y` reference
/// points lie within distance `x` of it.
pub fn detect_outliers(
    reference: &[Vec<f64>],
    queries: &[Vec<f64>],
    x: f64,
    y: usize,
) -> Vec<bool> {
    queries
        .iter()
        .map(|q| neighbors_within(reference, q, x) < y)
        .collect()
}

/// Confusion counts with novel-material items as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    /// True-positive rate (sensitivity) in percent.
    pub fn tp_rate(&self) -> f64 {
        let pos = self.tp + self.fn_;
        if pos == 0 {
            return f64::NAN;
        }
        100.0 * self.tp as f64 / pos as f64
    }

    /// False-positive rate in percent.
    pub fn fp_rate(&self) -> f64 {
        let neg = self.fp + self.tn;
        if neg == 0 {
            return f64::NAN;
        }
        100.0 * self.fp as f64 / neg as f64
    }

    /// Youden's J statistic (TPR - FPR, as fractions).
    pub fn youden_j(&self) -> f64 {
        (self.tp_rate() - self.fp_rate()) / 100.0
    }
}

/// Tallies the detector's flags against ground truth (`is_new[i]` true for
/// genuinely novel items).
pub fn confusion(flags: &[bool], is_new: &[bool]) -> Result<ConfusionCounts> {
    if flags.len() != is_new.len() {
        return Err(Error::Shape(format!(
            "{} flags for {} truth labels",
            flags.len(),
            is_new.len()
        )));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&flag, &truth) in flags.iter().zip(is_new) {
        match (flag, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// The tuned rule parameters and the counts they achieved on the tuning set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunedRule {
    pub x: f64,
    pub y: usize,
    pub counts: ConfusionCounts,
}

/// Grid-searches (x, y) maximizing Youden's J on a labeled tuning set.
/// Grids are scanned in ascending order with strict improvement required,
/// so ties resolve to the smallest x, then the smallest y.
pub fn tune_params(
    reference: &[Vec<f64>],
    tuning: &[Vec<f64>],
    is_new: &[bool],
    x_grid: &[f64],
    y_grid: &[usize],
) -> Result<TunedRule> {
    if tuning.len() != is_new.len() {
        return Err(Error::Shape(format!(
            "{} tuning vectors for {} labels",
            tuning.len(),
            is_new.len()
        )));
    }
    if x_grid.is_empty() || y_grid.is_empty() {
        return Err(Error::Data("empty tuning grid".into()));
    }
    if !is_new.iter().any(|&v| v) || !is_new.iter().any(|&v| !v) {
        return Err(Error::Data(
            "tuning set must contain both known and novel items".into(),
        ));
    }
    let mut xs = x_grid.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut ys = y_grid.to_vec();
    ys.sort_unstable();
    let mut best: Option<(f64, TunedRule)> = None;
    for &x in &xs {
        if !(x.is_finite() && x >= 0.0) {
            return Err(Error::Data(format!("invalid radius {x} in grid")));
        }
        // Neighbor counts depend only on x; reuse them across y values.
        let counts_within: Vec<usize> = tuning
            .iter()
            .map(|q| neighbors_within(reference, q, x))
            .collect();
        for &y in &ys {
            if y == 0 {
                return Err(Error::Data("count threshold y must be positive".into()));
            }
            let flags: Vec<bool> = counts_within.iter().map(|&c| c < y).collect();
            let counts = confusion(&flags, is_new)?;
            let j = counts.youden_j();
            if best.is_none_or(|(bj, _)| j > bj) {
                best = Some((j, TunedRule { x, y, counts }));
            }
        }
    }
    Ok(best.expect("grids checked non-empty").1)
}

/// Candidate radii: `count` evenly spaced quantiles of the pairwise
/// distances among the reference points.
pub fn default_x_grid(reference: &[Vec<f64>], count: usize) -> Result<Vec<f64>> {
    if reference.len() < 2 {
        return Err(Error::Data("need at least two reference points".into()));
    }
    if count == 0 {
        return Err(Error::Data("grid size must be positive".into()));
    }
    let mut dists = Vec::with_capacity(reference.len() * (reference.len() - 1) / 2);
    for i in 0..reference.len() {
        for j in (i + 1)..reference.len() {
            dists.push(euclid(&reference[i], &reference[j]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut grid: Vec<f64> = (1..=count)
        .map(|k| {
            let q = k as f64 / (count + 1) as f64;
            let idx = ((dists.len() - 1) as f64 * q).round() as usize;
            dists[idx]
        })
        .collect();
    grid.dedup();
    Ok(grid)
}

/// One evaluated pool item in the projection export.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedItem {
    pub id: String,
    pub label: String,
    pub is_new: bool,
    pub coords: Vec<f64>,
}

/// CSV with header `id,label,is_new,c1..cD`.
pub fn export_projection_csv(items: &[ProjectedItem]) -> Result<String> {
    if items.is_empty() {
        return Err(Error::Data("nothing to export".into()));
    }
    let dims = items[0].coords.len();
    if items.iter().any(|it| it.coords.len() != dims) {
        return Err(Error::Shape("inconsistent projection widths".into()));
    }
    let mut out = String::from("id,label,is_new");
    for c in 1..=dims {
        out.push_str(&format!(",c{c}"));
    }
    out.push('\n');
    for it in items {
        out.push_str(&format!("{},{},{}", it.id, it.label, u8::from(it.is_new)));
        for v in &it.coords {
            out.push_str(&format!(",{v:.17e}"));
        }
        out.push('\n');
    }
    Ok(out)
}
