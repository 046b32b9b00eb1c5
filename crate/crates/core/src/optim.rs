//! Monotone gradient ascent with Barzilai-Borwein step proposals and Armijo
//! backtracking. Used for marginal-likelihood and ELBO maximization.

use std::ops::Range;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

#[derive(Clone, Debug)]
pub struct AscentConfig {
    /// Total number of accepted-or-attempted steps over all blocks.
    pub max_steps: usize,
    /// Stop once the objective improves by less than this (relative) over a full sweep.
    pub rel_tol: f64,
    /// Largest change of any coordinate in a single step.
    pub max_coord_step: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            max_steps: 500,
            rel_tol: 1e-9,
            max_coord_step: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AscentResult<T> {
    pub x: DVector<T>,
    pub value: T,
    /// Objective after initialization and after every accepted step.
    pub trace: Vec<T>,
    pub steps: usize,
}

struct BlockState<T> {
    range: Range<usize>,
    step: T,
    prev: Option<(DVector<T>, DVector<T>)>,
}

/// Maximizes `f` by cycling over coordinate blocks, taking one backtracked
/// gradient step per block. `f` returns the value and the full gradient; an
/// `Err` at a trial point is treated as a rejected step.
pub fn maximize_blocks<T, F>(
    x0: DVector<T>,
    blocks: &[Range<usize>],
    cfg: &AscentConfig,
    mut f: F,
) -> Result<AscentResult<T>>
where
    T: Real,
    F: FnMut(&DVector<T>) -> Result<(T, DVector<T>)>,
{
    let (mut value, mut grad) = f(&x0)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("objective at starting point"));
    }
    let mut x = x0;
    let mut trace = vec![value];
    let mut states: Vec<BlockState<T>> = blocks
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| BlockState {
            range: r.clone(),
            step: T::zero(),
            prev: None,
        })
        .collect();
    if states.is_empty() {
        return Ok(AscentResult { x, value, trace, steps: 0 });
    }
    let armijo: T = lit(1e-4);
    let max_coord: T = lit(cfg.max_coord_step);
    let nblocks = states.len();
    let mut steps = 0usize;
    let mut stalled_blocks = 0usize;
    let mut sweep_start = value;
    let mut flat_sweeps = 0usize;
    'outer: while steps < cfg.max_steps {
        for b in states.iter_mut() {
            if steps >= cfg.max_steps {
                break 'outer;
            }
            steps += 1;
            let g = grad.rows_range(b.range.clone()).into_owned();
            let gnorm2 = g.norm_squared();
            if gnorm2 == T::zero() || !gnorm2.is_finite() {
                stalled_blocks += 1;
                continue;
            }
            // Barzilai-Borwein proposal from the previous step of this block.
            let xb = x.rows_range(b.range.clone()).into_owned();
            let mut step = match &b.prev {
                Some((px, pg)) => {
                    let s = &xb - px;
                    let y = &g - pg;
                    let sy = s.dot(&y);
                    if sy < T::zero() {
                        s.norm_squared() / (-sy)
                    } else {
                        b.step * lit(2.0)
                    }
                }
                None => T::one() / gnorm2.sqrt(),
            };
            let gmax = g.amax();
            if step * gmax > max_coord {
                step = max_coord / gmax;
            }
            let mut accepted = false;
            for _ in 0..40 {
                let mut trial = x.clone();
                for (i, idx) in b.range.clone().enumerate() {
                    trial[idx] += step * g[i];
                }
                if let Ok((v, gr)) = f(&trial) {
                    if v.is_finite() && v >= value + armijo * step * gnorm2 {
                        b.prev = Some((xb.clone(), g.clone()));
                        b.step = step;
                        x = trial;
                        value = v;
                        grad = gr;
                        trace.push(value);
                        accepted = true;
                        break;
                    }
                }
                step *= lit(0.5);
            }
            if accepted {
                stalled_blocks = 0;
            } else {
                b.prev = None;
                stalled_blocks += 1;
            }
            if stalled_blocks >= nblocks * 2 {
                break 'outer;
            }
        }
        let gain = value - sweep_start;
        if gain <= lit::<T>(cfg.rel_tol) * (T::one() + value.abs()) && stalled_blocks == 0 {
            flat_sweeps += 1;
            if flat_sweeps >= 3 {
                break;
            }
        } else {
            flat_sweeps = 0;
        }
        sweep_start = value;
    }
    Ok(AscentResult { x, value, trace, steps })
}

/// Single-block convenience wrapper.
pub fn maximize<T, F>(x0: DVector<T>, cfg: &AscentConfig, f: F) -> Result<AscentResult<T>>
where
    T: Real,
    F: FnMut(&DVector<T>) -> Result<(T, DVector<T>)>,
{
    let n = x0.len();
    maximize_blocks(x0, &[0..n], cfg, f)
}
