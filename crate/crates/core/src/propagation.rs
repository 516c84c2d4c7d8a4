//! Graph label propagation over network features.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linear::{LinearClassifier, LinearConfig};
use crate::tensor::{gemm, Tensor};

pub const SIGMA_GRID: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0];

/// Largest sample count for which dense `N x N` graphs are built.
pub const DENSE_CAP: usize = 20_000;

/// Largest unlabeled count whose fixed point is solved directly when refreshing.
pub const DIRECT_SOLVE_CAP: usize = 4096;

/// Anchor weight of the damped solve used when the direct system is singular.
pub const DAMPING: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct LpConfig {
    pub sigma: f64,
    pub sigma_grid: Vec<f64>,
    pub max_iter: usize,
    /// Max-abs change between iterations at convergence.
    pub tolerance: f64,
    pub max_rounds: usize,
    pub folds: usize,
}

impl Default for LpConfig {
    fn default() -> Self {
        LpConfig {
            sigma: 1.0,
            sigma_grid: SIGMA_GRID.to_vec(),
            max_iter: 10_000,
            tolerance: 1e-8,
            max_rounds: 4,
            folds: 5,
        }
    }
}

impl LpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma {} must be positive", self.sigma)));
        }
        if self.sigma_grid.is_empty() || self.sigma_grid.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter("sigma grid must be non-empty and positive".into()));
        }
        if !(self.tolerance > 0.0) || self.max_iter == 0 || self.max_rounds == 0 || self.folds < 2 {
            return Err(Error::Parameter(
                "propagation needs positive tolerance, max_iter, rounds and at least two folds".into(),
            ));
        }
        Ok(())
    }
}

/// Gaussian kernel `S_ij = exp(-|x_i - x_j|^2 / sigma^2)`.
///
/// Entries that would underflow are floored at the smallest normal double so
/// the graph stays strictly positive.
pub fn similarity_matrix(features: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma {sigma} must be positive")));
    }
    let (n, f) = features.rows_cols();
    if n == 0 || features.rank() != 2 {
        return Err(Error::Contract(format!(
            "similarity needs a non-empty feature matrix, got shape {:?}",
            features.shape()
        )));
    }
    if n > DENSE_CAP {
        return Err(Error::Parameter(format!(
            "{n} samples exceed the dense graph cap of {DENSE_CAP}; subsample first"
        )));
    }
    let x = features.data();
    let inv = 1.0 / (sigma * sigma);
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x[i * f..(i + 1) * f];
            (i + 1..n)
                .map(|j| {
                    let d2: f64 = xi
                        .iter()
                        .zip(&x[j * f..(j + 1) * f])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (-d2 * inv).exp().max(f64::MIN_POSITIVE)
                })
                .collect()
        })
        .collect();
    let mut s = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        s[i * n + i] = 1.0;
        for (k, &v) in row.iter().enumerate() {
            let j = i + 1 + k;
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    Tensor::new(vec![n, n], s)
}

/// Row-normalised similarity.
pub fn transfer_matrix(s: &Tensor) -> Result<Tensor> {
    let (n, m) = s.rows_cols();
    if n != m || s.rank() != 2 {
        return Err(Error::dim("transfer_matrix", s.shape(), &[n, n]));
    }
    let mut p = s.clone();
    for (i, row) in p.data_mut().chunks_mut(n.max(1)).enumerate() {
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate(format!("similarity row {i} sums to {total}")));
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    pub y: Tensor,
    pub iterations: usize,
    pub last_delta: f64,
}

fn check_labels(p: &Tensor, y0: &Tensor, m: usize) -> Result<(usize, usize)> {
    let (n, c) = y0.rows_cols();
    if p.shape() != [n, n] {
        return Err(Error::dim("propagate", p.shape(), y0.shape()));
    }
    if m > n {
        return Err(Error::Contract(format!("{m} labeled rows out of {n}")));
    }
    for i in 0..n {
        let s: f64 = y0.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("label row {i} sums to {s}")));
        }
    }
    Ok((n, c))
}

/// Clamped iteration `Y <- P Y`, labeled rows reset after every step.
///
/// The observer sees the full label matrix after every iteration.
pub fn propagate(
    p: &Tensor,
    y0: &Tensor,
    m: usize,
    cfg: &LpConfig,
    mut observer: Option<&mut dyn FnMut(usize, &Tensor)>,
) -> Result<Propagation> {
    let (n, c) = check_labels(p, y0, m)?;
    let mut y = y0.clone();
    if m == n {
        return Ok(Propagation {
            y,
            iterations: 0,
            last_delta: 0.0,
        });
    }
    let u = n - m;
    let p_u = &p.data()[m * n..];
    let mut next = vec![0.0; u * c];
    let mut deltas: Vec<f64> = Vec::new();
    for it in 1..=cfg.max_iter {
        gemm(u, n, c, p_u, false, y.data(), false, &mut next, false);
        let tail = &mut y.data_mut()[m * c..];
        let mut delta: f64 = 0.0;
        for (old, new) in tail.iter_mut().zip(&next) {
            delta = delta.max((*old - new).abs());
            *old = *new;
        }
        if !delta.is_finite() {
            return Err(Error::Numeric {
                op: "label propagation".into(),
            });
        }
        if let Some(obs) = observer.as_mut() {
            obs(it, &y);
        }
        deltas.push(delta);
        if converged(&deltas, cfg.tolerance) {
            return Ok(Propagation {
                y,
                iterations: it,
                last_delta: delta,
            });
        }
    }
    Err(Error::Convergence {
        iterations: cfg.max_iter,
        last_delta: deltas.last().copied().unwrap_or(f64::NAN),
    })
}

/// Small step and small geometric tail estimate of the remaining distance.
fn converged(deltas: &[f64], tol: f64) -> bool {
    let d = match deltas.last() {
        Some(&d) => d,
        None => return false,
    };
    if d == 0.0 {
        return true;
    }
    if d >= tol || deltas.len() < 3 {
        return false;
    }
    let k = deltas.len();
    let ratio = |a: f64, b: f64| if a > 0.0 { b / a } else { 0.0 };
    let r = ratio(deltas[k - 2], deltas[k - 1]).max(ratio(deltas[k - 3], deltas[k - 2]));
    r < 1.0 && d * r / (1.0 - r) < tol
}

/// `Y_u = (I - P_uu)^{-1} P_ul Y_l` by dense LU with partial pivoting.
pub fn closed_form(p: &Tensor, y_l: &Tensor, m: usize) -> Result<Tensor> {
    solve_fixed_point(p, y_l, m, None)
}

/// Closed form damped towards `anchor`: `(I - P_uu + eps I) Y_u = P_ul Y_l + eps anchor`.
/// Unlabeled nodes cut off from every labeled node keep their anchor rows.
pub fn damped_closed_form(p: &Tensor, y_l: &Tensor, m: usize, anchor: &Tensor, eps: f64) -> Result<Tensor> {
    solve_fixed_point(p, y_l, m, Some((anchor, eps)))
}

fn solve_fixed_point(p: &Tensor, y_l: &Tensor, m: usize, anchor: Option<(&Tensor, f64)>) -> Result<Tensor> {
    let (n, _) = p.rows_cols();
    let (ml, c) = y_l.rows_cols();
    if ml != m || p.shape() != [n, n] || m > n {
        return Err(Error::dim("closed_form", p.shape(), y_l.shape()));
    }
    let u = n - m;
    if let Some((a, _)) = anchor {
        if a.shape() != [u, c] {
            return Err(Error::dim("closed_form anchor", a.shape(), &[u, c]));
        }
    }
    let eps = anchor.map_or(0.0, |(_, e)| e);
    let pd = p.data();
    let mut a = vec![0.0; u * u];
    let mut b = anchor.map_or_else(|| vec![0.0; u * c], |(y, e)| y.data().iter().map(|v| e * v).collect());
    for i in 0..u {
        for j in 0..u {
            let v = pd[(m + i) * n + m + j];
            a[i * u + j] = if i == j { (1.0 - v) + eps } else { -v };
        }
    }
    let p_ul: Vec<f64> = (0..u).flat_map(|i| pd[(m + i) * n..(m + i) * n + m].to_vec()).collect();
    gemm(u, m, c, &p_ul, false, y_l.data(), false, &mut b, true);
    lu_solve(&mut a, &mut b, u, c)?;
    Tensor::new(vec![u, c], b)
}

fn lu_solve(a: &mut [f64], b: &mut [f64], n: usize, c: usize) -> Result<()> {
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
            .unwrap_or(k);
        if a[piv * n + k].abs() < 1e-300 {
            return Err(Error::Degenerate("singular propagation system".into()));
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            for j in 0..c {
                b.swap(k * c + j, piv * c + j);
            }
        }
        let d = a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] / d;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
            for j in 0..c {
                b[i * c + j] -= f * b[k * c + j];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..c {
            let mut s = b[k * c + j];
            for i in k + 1..n {
                s -= a[k * n + i] * b[i * c + j];
            }
            b[k * c + j] = s / a[k * n + k];
        }
    }
    Ok(())
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        t.data_mut()[i * classes + c] = 1.0;
    }
    t
}

/// Labeled rows first, then `unlabeled` rows set to `fill`.
/// Clamps negatives and rescales rows to sum to 1; empty rows become uniform.
fn renormalize_rows(mut y: Tensor) -> Tensor {
    let (r, c) = y.rows_cols();
    for i in 0..r {
        let row = y.row_mut(i);
        for v in row.iter_mut() {
            *v = v.max(0.0);
        }
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v = if total > 1e-12 { *v / total } else { 1.0 / c as f64 };
        }
    }
    y
}

fn stack_labels(y_l: &Tensor, fill: &Tensor) -> Tensor {
    let (_, c) = y_l.rows_cols();
    let rows = y_l.shape()[0] + fill.shape()[0];
    let mut data = y_l.data().to_vec();
    data.extend_from_slice(fill.data());
    Tensor::new(vec![rows, c], data).expect("label stack")
}

/// k-fold holdout accuracy of propagation over the labeled set for every grid
/// value; the best wins, ties going to the smaller sigma. Held-out rows are
/// scored at the propagation fixed point, solved directly.
pub fn select_sigma(features: &Tensor, labels: &[usize], classes: usize, cfg: &LpConfig) -> Result<f64> {
    let (n, _) = features.rows_cols();
    if n != labels.len() {
        return Err(Error::Contract(format!("{n} feature rows for {} labels", labels.len())));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Degenerate("sigma selection needs at least two classes".into()));
    }
    let mut grid = cfg.sigma_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let folds = cfg.folds.min(n);
    let mut best = (grid[0], -1.0);
    for &sigma in &grid {
        let mut correct = 0usize;
        for fold in 0..folds {
            let held: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
            let kept: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
            let order: Vec<usize> = kept.iter().chain(&held).copied().collect();
            let x = features.select_rows(&order);
            let y_l = one_hot(&kept.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes);
            let p = transfer_matrix(&similarity_matrix(&x, sigma)?)?;
            let y = match closed_form(&p, &y_l, kept.len()) {
                Ok(y) => y,
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            };
            let pred = y.argmax_rows();
            correct += held
                .iter()
                .enumerate()
                .filter(|(k, &i)| pred[*k] == labels[i])
                .count();
        }
        let acc = correct as f64 / n as f64;
        if acc > best.1 {
            best = (sigma, acc);
        }
    }
    Ok(best.0)
}

/// One-hot predictions of a linear softmax classifier fit on the labeled rows.
pub fn initial_pseudo_labels(
    features_l: &Tensor,
    labels: &[usize],
    classes: usize,
    features_u: &Tensor,
) -> Result<Tensor> {
    let model = LinearClassifier::fit(features_l, labels, classes, &LinearConfig::default())?;
    if features_u.shape().first() == Some(&0) {
        return Ok(Tensor::zeros(&[0, classes]));
    }
    Ok(one_hot(&model.predict(features_u)?, classes))
}

/// Soft labels for `N = M + U` samples and the graph that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelState {
    pub y: Tensor,
    pub labeled: usize,
    pub sigma: f64,
    pub s: Option<Tensor>,
    pub p: Option<Tensor>,
    pub round: usize,
    pub last_iterations: usize,
}

impl PseudoLabelState {
    /// `y_l` one-hot labeled rows, `y_u` initial unlabeled rows.
    pub fn new(y_l: &Tensor, y_u: &Tensor, sigma: f64) -> Result<Self> {
        if y_l.shape().get(1) != y_u.shape().get(1) {
            return Err(Error::dim("pseudo-label state", y_l.shape(), y_u.shape()));
        }
        Ok(PseudoLabelState {
            y: stack_labels(y_l, y_u),
            labeled: y_l.shape()[0],
            sigma,
            s: None,
            p: None,
            round: 0,
            last_iterations: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn labeled_rows(&self) -> Tensor {
        self.y.select_rows(&(0..self.labeled).collect::<Vec<_>>())
    }

    pub fn unlabeled_rows(&self) -> Tensor {
        self.y.select_rows(&(self.labeled..self.len()).collect::<Vec<_>>())
    }
}

/// Rebuilds the graph on `features`, re-propagates from the current labels and
/// returns how many unlabeled argmaxes changed.
///
/// Up to [`DIRECT_SOLVE_CAP`] unlabeled rows the propagation fixed point is
/// solved directly; poorly mixing graphs can need far more than `max_iter`
/// clamped iterations to reach it, and its rows are renormalised against
/// round-off. A singular system, left by nodes cut off from every labeled
/// node, is solved damped towards the current rows instead. Larger sets iterate.
pub fn refresh_pseudo_labels(
    state: &mut PseudoLabelState,
    features: &Tensor,
    cfg: &LpConfig,
) -> Result<usize> {
    let (n, _) = features.rows_cols();
    if n != state.len() {
        return Err(Error::Contract(format!(
            "{n} feature rows for {} pseudo-label rows",
            state.len()
        )));
    }
    let s = similarity_matrix(features, state.sigma)?;
    let p = transfer_matrix(&s)?;
    let before = state.y.argmax_rows();
    let m = state.labeled;
    let unlabeled = state.len() - m;
    let direct = if unlabeled <= DIRECT_SOLVE_CAP {
        let y_l = state.labeled_rows();
        let y_u = match closed_form(&p, &y_l, m) {
            Err(Error::Degenerate(_)) => damped_closed_form(&p, &y_l, m, &state.unlabeled_rows(), DAMPING),
            other => other,
        };
        match y_u {
            Ok(y_u) => Some(stack_labels(&y_l, &renormalize_rows(y_u))),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let result = match direct {
        Some(y) => Propagation {
            y,
            iterations: 0,
            last_delta: 0.0,
        },
        None => propagate(&p, &state.y, m, cfg, None)?,
    };
    let after = result.y.argmax_rows();
    let changed = before[state.labeled..]
        .iter()
        .zip(&after[state.labeled..])
        .filter(|(a, b)| a != b)
        .count();
    state.y = result.y;
    state.s = Some(s);
    state.p = Some(p);
    state.round += 1;
    state.last_iterations = result.iterations;
    Ok(changed)
}
