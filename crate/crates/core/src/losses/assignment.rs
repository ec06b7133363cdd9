//! Exact and approximate solvers for the square assignment problem, used by
//! the matched-distance loss and metric. The Hungarian solver is the exact
//! reference; the auction solver trades a certified cost gap for speed on
//! large instances.

use std::collections::VecDeque;

use crate::diffcore::Tensor;
use crate::scalar::{real, Real};

use super::LossError;

/// Result of an assignment solve: `row_to_col[i]` is the column matched to
/// row `i`, and `total_cost` the sum of matched entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<F> {
    pub row_to_col: Vec<usize>,
    pub total_cost: F,
}

fn check_square<F: Real>(op: &'static str, cost: &Tensor<F>) -> Result<usize, LossError> {
    if cost.rows() != cost.cols() {
        return Err(LossError::NotSquare {
            op,
            rows: cost.rows(),
            cols: cost.cols(),
        });
    }
    if !cost.all_finite() {
        return Err(LossError::NonFiniteCost { op });
    }
    Ok(cost.rows())
}

fn total_of<F: Real>(cost: &Tensor<F>, row_to_col: &[usize]) -> F {
    row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.at(i, j))
        .sum()
}

/// Exact minimum-cost assignment via shortest augmenting paths with row and
/// column potentials. O(n^3); deterministic, ties resolved toward the lower
/// column index.
pub fn hungarian<F: Real>(cost: &Tensor<F>) -> Result<Assignment<F>, LossError> {
    let n = check_square("hungarian", cost)?;
    // Column n is a virtual slot holding the row currently being inserted.
    let mut u = vec![F::zero(); n];
    let mut v = vec![F::zero(); n + 1];
    let mut match_col = vec![usize::MAX; n + 1];
    let mut minv = vec![F::zero(); n + 1];
    let mut way = vec![n; n + 1];
    let mut used = vec![false; n + 1];
    for i in 0..n {
        match_col[n] = i;
        minv.iter_mut().for_each(|m| *m = F::infinity());
        way.iter_mut().for_each(|w| *w = n);
        used.iter_mut().for_each(|u| *u = false);
        let mut j0 = n;
        loop {
            used[j0] = true;
            let i0 = match_col[j0];
            let mut delta = F::infinity();
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[match_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if match_col[j0] == usize::MAX {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            match_col[j0] = match_col[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for (j, &i) in match_col[..n].iter().enumerate() {
        row_to_col[i] = j;
    }
    Ok(Assignment {
        total_cost: total_of(cost, &row_to_col),
        row_to_col,
    })
}

/// Auction assignment with epsilon scaling. The returned cost is certified
/// to be within `rel_tol` of optimal whenever the certified lower bound is
/// positive; otherwise scaling continues until epsilon is negligible
/// against the cost spread, which makes integer-valued instances exact.
pub fn auction<F: Real>(cost: &Tensor<F>, rel_tol: F) -> Result<Assignment<F>, LossError> {
    let n = check_square("auction", cost)?;
    if n == 1 {
        return Ok(Assignment {
            row_to_col: vec![0],
            total_cost: cost.at(0, 0),
        });
    }
    let mut lo = cost.at(0, 0);
    let mut hi = lo;
    for &c in cost.data() {
        if c < lo {
            lo = c;
        }
        if c > hi {
            hi = c;
        }
    }
    let span = hi - lo;
    if span == F::zero() {
        // Every assignment has the same total.
        let row_to_col: Vec<usize> = (0..n).collect();
        return Ok(Assignment {
            total_cost: total_of(cost, &row_to_col),
            row_to_col,
        });
    }
    let n_f = real::<F>(n as f64);
    let eps_floor = span * real::<F>(1e-12);
    let mut eps = span * real::<F>(0.5);
    let mut prices = vec![F::zero(); n];
    loop {
        let row_to_col = auction_phase(cost, eps, &mut prices);
        let total = total_of(cost, &row_to_col);
        let gap = n_f * eps;
        // total <= optimal + gap, so (total - gap) is a lower bound on the
        // optimum and certifies the relative error when positive.
        let lower = total - gap;
        if (lower > F::zero() && gap <= rel_tol * lower) || eps <= eps_floor {
            return Ok(Assignment { row_to_col, total_cost: total });
        }
        eps = (eps * real::<F>(0.2)).max(eps_floor);
    }
}

/// One complete forward auction at a fixed epsilon. Prices persist across
/// phases; the assignment is rebuilt from scratch.
fn auction_phase<F: Real>(cost: &Tensor<F>, eps: F, prices: &mut [F]) -> Vec<usize> {
    let n = cost.rows();
    let mut owner = vec![usize::MAX; n];
    let mut person_obj = vec![usize::MAX; n];
    let mut queue: VecDeque<usize> = (0..n).collect();
    while let Some(i) = queue.pop_front() {
        // Benefit of object j for person i is -cost(i, j).
        let mut best_j = 0;
        let mut best_v = F::neg_infinity();
        let mut second_v = F::neg_infinity();
        for j in 0..n {
            let v = -cost.at(i, j) - prices[j];
            if v > best_v {
                second_v = best_v;
                best_v = v;
                best_j = j;
            } else if v > second_v {
                second_v = v;
            }
        }
        prices[best_j] += best_v - second_v + eps;
        let prev = owner[best_j];
        if prev != usize::MAX {
            person_obj[prev] = usize::MAX;
            queue.push_back(prev);
        }
        owner[best_j] = i;
        person_obj[i] = best_j;
    }
    person_obj
}
