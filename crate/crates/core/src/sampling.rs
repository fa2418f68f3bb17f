//! Guided reverse diffusion: draw a terminal state from the marginals, then
//! walk t = T..1 taking two denoiser passes per step (unconditional and
//! conditional), combining them with classifier-free guidance, and drawing
//! the t-1 state from the exact posterior. Structurally invalid samples are
//! filtered out under a bounded retry budget.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{validate_cell, CellGraph, Provenance, SearchSpaceSpec, EDGE_ABSENT};
use crate::conditioning::{combine_rows, CombineSpace, ConditionVector};
use crate::denoiser::{forward, DenoiserConfig, DenoiserDims, ParamSet};
use crate::error::CoreError;
use crate::noise::{posterior_step, sample_categorical, DiffusionSchedule, Marginals, NoisyGraph};

/// Retry budget multiplier: at most this many attempts per requested cell.
pub const RETRY_FACTOR: usize = 10;

/// Borrowed view of everything a sampler needs from a trained model.
pub struct SamplerModel<'a> {
    pub params: &'a ParamSet,
    pub dcfg: &'a DenoiserConfig,
    pub dims: &'a DenoiserDims,
    pub schedule: &'a DiffusionSchedule,
    pub marginals: &'a Marginals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub count: usize,
    pub gamma: f64,
    pub combine_space: CombineSpace,
    pub cond: ConditionVector,
    pub seed: u64,
    /// When false, every decoded sample is emitted (count is exact);
    /// when true, invalid cells are discarded and resampled under the
    /// retry budget.
    pub filter_valid: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleOutput {
    pub cells: Vec<CellGraph>,
    pub attempts: usize,
    pub validity_rate: f64,
    /// Total denoiser forward passes; exactly 2 * T per attempt.
    pub forward_calls: u64,
    /// Probability-space guidance flooring events (0 in log space).
    pub floored: u64,
    /// True when validity filtering ran out of retries; `cells` then holds
    /// a partial result.
    pub budget_exhausted: bool,
    pub elapsed_secs: f64,
    /// Cells per wall-clock second, over valid cells produced.
    pub sample_rate: f64,
}

/// Terminal-state prior: every node and strict-upper-triangle edge drawn
/// independently from the training marginals.
pub fn sample_prior(n: usize, marginals: &Marginals, rng: &mut ChaCha8Rng) -> NoisyGraph {
    let x = (0..n)
        .map(|_| sample_categorical(&marginals.m_x, rng))
        .collect();
    let mut e = vec![vec![EDGE_ABSENT; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            e[i][j] = sample_categorical(&marginals.m_e, rng);
        }
    }
    NoisyGraph { x, e }
}

/// One full reverse trajectory; returns the decoded cell plus the number of
/// forward passes taken and probability-space flooring events.
pub fn sample_one(
    model: &SamplerModel,
    request: &SampleRequest,
    rng: &mut ChaCha8Rng,
) -> Result<(CellGraph, u64, u64), CoreError> {
    let n = model.dims.n_nodes;
    let t_max = model.schedule.t_max;
    let null = ConditionVector::all_null(request.cond.classes.len());
    let mut state = sample_prior(n, model.marginals, rng);
    let mut forward_calls = 0u64;
    let mut floored = 0u64;
    for t in (1..=t_max).rev() {
        let p_u = forward(model.params, model.dcfg, model.dims, &state, t, t_max, &null);
        let p_c = forward(
            model.params,
            model.dcfg,
            model.dims,
            &state,
            t,
            t_max,
            &request.cond,
        );
        forward_calls += 2;
        let (phat_x, fx) = combine_rows(&p_u.p_x, &p_c.p_x, request.gamma, request.combine_space)?;
        let (phat_e, fe) = combine_rows(&p_u.p_e, &p_c.p_e, request.gamma, request.combine_space)?;
        floored += fx + fe;
        let post = posterior_step(&phat_x, &phat_e, &state, t, model.schedule, model.marginals)?;
        let mut next = NoisyGraph {
            x: vec![0; n],
            e: vec![vec![EDGE_ABSENT; n]; n],
        };
        for i in 0..n {
            next.x[i] = sample_categorical(post.p_x.row(i), rng);
        }
        for i in 0..n {
            for j in i + 1..n {
                next.e[i][j] = sample_categorical(post.p_e.row(i * n + j), rng);
            }
        }
        state = next;
    }
    let mut cell = CellGraph::new(state.x, state.e);
    cell.provenance = Some(Provenance::Generated);
    Ok((cell, forward_calls, floored))
}

/// Draw `request.count` structurally valid cells. Attempt k uses RNG stream
/// k of the request seed, so each sample is reproducible independently of
/// how many retries earlier samples needed.
pub fn sample(
    model: &SamplerModel,
    space: &SearchSpaceSpec,
    request: &SampleRequest,
) -> Result<SampleOutput, CoreError> {
    if request.count == 0 {
        return Err(CoreError::InvalidConfig {
            field: "count".into(),
            reason: "must be >= 1".into(),
        });
    }
    assert_eq!(
        request.cond.classes.len(),
        model.dims.cond_card.len(),
        "condition vector arity must match the trained schema"
    );
    let started = Instant::now();
    let budget = if request.filter_valid {
        RETRY_FACTOR * request.count
    } else {
        request.count
    };
    let mut cells = Vec::with_capacity(request.count);
    let mut attempts = 0usize;
    let mut valid = 0usize;
    let mut forward_calls = 0u64;
    let mut floored = 0u64;
    while cells.len() < request.count && attempts < budget {
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        rng.set_stream(attempts as u64);
        attempts += 1;
        let (cell, fw, fl) = sample_one(model, request, &mut rng)?;
        forward_calls += fw;
        floored += fl;
        let is_valid = validate_cell(&cell, space)?.is_valid;
        if is_valid {
            valid += 1;
        }
        if is_valid || !request.filter_valid {
            cells.push(cell);
        }
    }
    let validity_rate = valid as f64 / attempts as f64;
    let elapsed_secs = started.elapsed().as_secs_f64();
    Ok(SampleOutput {
        sample_rate: cells.len() as f64 / elapsed_secs.max(1e-9),
        budget_exhausted: cells.len() < request.count,
        cells,
        attempts,
        validity_rate,
        forward_calls,
        floored,
        elapsed_secs,
    })
}
