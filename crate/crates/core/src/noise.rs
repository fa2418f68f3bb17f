//! Categorical Markov noise: cosine schedule, marginal transition kernels,
//! forward noising, and the exact Bayes posterior used in reverse sampling.
//!
//! Kernels have the closed form `Q = a*I + (1-a)*1*m'` where `m'` is the
//! training-set marginal. The schedule stores the cumulative coefficients;
//! the single-step kernel at t uses the ratio abar[t]/abar[t-1], which makes
//! the semigroup identity `Qbar[t-1] * Q[t] = Qbar[t]` exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{CellGraph, EDGE_ABSENT};
use crate::error::CoreError;
use crate::tensor::Matrix;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub s: f64,
    /// abar[t] for t = 0..=T, normalized so abar[0] = 1 exactly.
    pub abar: Vec<f64>,
}

/// Cosine schedule, normalized by its t=0 value so that the cumulative
/// kernel at t=0 is exactly the identity.
pub fn build_schedule(t_max: usize, s: f64) -> Result<DiffusionSchedule, CoreError> {
    if t_max < 1 {
        return Err(CoreError::InvalidSchedule("T must be >= 1".into()));
    }
    if !(0.0 < s && s < 0.1) {
        return Err(CoreError::InvalidSchedule(format!(
            "offset s={s} outside (0, 0.1)"
        )));
    }
    let raw = |t: f64| {
        let x = 0.5 * std::f64::consts::PI * (t / t_max as f64 + s) / (1.0 + s);
        x.cos().powi(2)
    };
    let base = raw(0.0);
    let abar: Vec<f64> = (0..=t_max).map(|t| raw(t as f64) / base).collect();
    Ok(DiffusionSchedule { t_max, s, abar })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Marginals {
    pub m_x: Vec<f64>,
    pub m_e: Vec<f64>,
}

impl Marginals {
    pub fn check(&self) -> Result<(), CoreError> {
        for (name, m) in [("mX", &self.m_x), ("mE", &self.m_e)] {
            if m.iter().any(|&v| v < 0.0) {
                return Err(CoreError::InvalidSchedule(format!("{name} has negative entries")));
            }
            let sum: f64 = m.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CoreError::InvalidSchedule(format!("{name} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Empirical node / upper-triangle edge category frequencies of a dataset.
pub fn empirical_marginals(
    cells: &[CellGraph],
    n_ops: usize,
    n_edge_cats: usize,
) -> Result<Marginals, CoreError> {
    if cells.is_empty() {
        return Err(CoreError::EmptyInput("dataset for marginals".into()));
    }
    let mut m_x = vec![0.0; n_ops];
    let mut m_e = vec![0.0; n_edge_cats];
    for cell in cells {
        for &op in &cell.x {
            m_x[op] += 1.0;
        }
        let n = cell.n_nodes();
        for i in 0..n {
            for j in i + 1..n {
                m_e[cell.e[i][j]] += 1.0;
            }
        }
    }
    let sx: f64 = m_x.iter().sum();
    let se: f64 = m_e.iter().sum();
    for v in &mut m_x {
        *v /= sx;
    }
    for v in &mut m_e {
        *v /= se;
    }
    Ok(Marginals { m_x, m_e })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelLevel {
    /// Q-bar: cumulative transition from step 0 to t.
    Cumulative,
    /// Q: transition from step t-1 to t.
    SingleStep,
}

#[derive(Clone, Debug)]
pub struct TransitionKernel {
    pub q_x: Matrix,
    pub q_e: Matrix,
    pub level: KernelLevel,
}

/// The rank-one-plus-identity kernel `a*I + (1-a)*1*m`.
pub fn marginal_kernel(a: f64, m: &[f64]) -> Matrix {
    let k = m.len();
    Matrix::from_fn(k, k, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        a * id + (1.0 - a) * m[j]
    })
}

pub fn kernel_at(
    schedule: &DiffusionSchedule,
    marginals: &Marginals,
    t: usize,
    level: KernelLevel,
) -> Result<TransitionKernel, CoreError> {
    if t < 1 || t > schedule.t_max {
        return Err(CoreError::StepOutOfRange {
            t,
            max: schedule.t_max,
        });
    }
    let a = match level {
        KernelLevel::Cumulative => schedule.abar[t],
        KernelLevel::SingleStep => {
            let prev = schedule.abar[t - 1];
            if prev == 0.0 {
                return Err(CoreError::DegenerateRatio { t });
            }
            schedule.abar[t] / prev
        }
    };
    Ok(TransitionKernel {
        q_x: marginal_kernel(a, &marginals.m_x),
        q_e: marginal_kernel(a, &marginals.m_e),
        level,
    })
}

/// A noisy categorical graph state at some timestep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoisyGraph {
    pub x: Vec<usize>,
    /// n x n edge categories; diagonal and lower triangle stay absent.
    pub e: Vec<Vec<usize>>,
}

pub fn sample_categorical(row: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = row.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &p) in row.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    row.len() - 1
}

/// Forward corruption: each node and each strict upper-triangle edge is
/// resampled from its row of the cumulative kernel at t. Diagonal and
/// lower-triangle entries are frozen at "absent" so every noisy state stays
/// acyclic.
pub fn apply_noise(
    cell: &CellGraph,
    t: usize,
    schedule: &DiffusionSchedule,
    marginals: &Marginals,
    rng: &mut impl Rng,
) -> Result<NoisyGraph, CoreError> {
    let kernel = kernel_at(schedule, marginals, t, KernelLevel::Cumulative)?;
    let n = cell.n_nodes();
    let x = cell
        .x
        .iter()
        .map(|&op| sample_categorical(kernel.q_x.row(op), rng))
        .collect();
    let mut e = vec![vec![EDGE_ABSENT; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            e[i][j] = sample_categorical(kernel.q_e.row(cell.e[i][j]), rng);
        }
    }
    Ok(NoisyGraph { x, e })
}

/// Exact one-step Bayes posterior for a single categorical position:
/// given the network's clean-category distribution `phat` and the observed
/// noisy category at t, returns the distribution over categories at t-1.
pub fn posterior_row(
    phat: &[f64],
    observed: usize,
    t: usize,
    schedule: &DiffusionSchedule,
    m: &[f64],
    kind: &'static str,
    index: usize,
) -> Result<Vec<f64>, CoreError> {
    let k = m.len();
    let a_prev = schedule.abar[t - 1];
    if a_prev == 0.0 {
        return Err(CoreError::DegenerateRatio { t });
    }
    let r = schedule.abar[t] / a_prev;
    let q_step = marginal_kernel(r, m);
    let q_bar_prev = marginal_kernel(a_prev, m);

    let mut out = vec![0.0; k];
    for (x0, &w) in phat.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        // p(x^{t-1}=j | x^0=x0, x^t=observed) ∝ Q^t[j, obs] * Qbar^{t-1}[x0, j]
        let mut row = vec![0.0; k];
        let mut norm = 0.0;
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = q_step.get(j, observed) * q_bar_prev.get(x0, j);
            norm += *slot;
        }
        if norm == 0.0 {
            return Err(CoreError::ZeroNormalizer {
                kind,
                index,
                t,
                category: observed,
            });
        }
        for (o, v) in out.iter_mut().zip(&row) {
            *o += w * v / norm;
        }
    }
    let total: f64 = out.iter().sum();
    if total == 0.0 {
        return Err(CoreError::ZeroNormalizer {
            kind,
            index,
            t,
            category: observed,
        });
    }
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Per-node and per-edge posterior distributions at t-1 for a whole graph.
/// `phat_x` is n x K, `phat_e` is (n*n) x K' row-major over (i, j); only
/// strict upper-triangle edge rows are populated in the result.
pub struct PosteriorStep {
    pub p_x: Matrix,
    pub p_e: Matrix,
}

pub fn posterior_step(
    phat_x: &Matrix,
    phat_e: &Matrix,
    noisy: &NoisyGraph,
    t: usize,
    schedule: &DiffusionSchedule,
    marginals: &Marginals,
) -> Result<PosteriorStep, CoreError> {
    if t < 1 || t > schedule.t_max {
        return Err(CoreError::StepOutOfRange {
            t,
            max: schedule.t_max,
        });
    }
    let n = noisy.x.len();
    let mut p_x = Matrix::zeros(n, marginals.m_x.len());
    for i in 0..n {
        let row = posterior_row(
            phat_x.row(i),
            noisy.x[i],
            t,
            schedule,
            &marginals.m_x,
            "node",
            i,
        )?;
        p_x.row_mut(i).copy_from_slice(&row);
    }
    let mut p_e = Matrix::zeros(n * n, marginals.m_e.len());
    for i in 0..n {
        for j in i + 1..n {
            let row = posterior_row(
                phat_e.row(i * n + j),
                noisy.e[i][j],
                t,
                schedule,
                &marginals.m_e,
                "edge",
                i * n + j,
            )?;
            p_e.row_mut(i * n + j).copy_from_slice(&row);
        }
    }
    Ok(PosteriorStep { p_x, p_e })
}
