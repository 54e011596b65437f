//! Dense linear assignment by shortest augmenting paths with dual potentials
//! (the Jonker-Volgenant / Hungarian family), `O(n^3)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Minimum-cost perfect matching for a square cost matrix.
/// Returns `assign` with row `i` matched to column `assign[i]`.
pub fn linear_assignment(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::config("assignment needs a square cost matrix"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::config("assignment cost matrix has non-finite entries"));
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let reduced = cost[(r - 1, c - 1)] - u[r] - v[c];
                if reduced < min_slack[c] {
                    min_slack[c] = reduced;
                    way[c] = col0;
                }
                if min_slack[c] < delta {
                    delta = min_slack[c];
                    col1 = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    min_slack[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        // Flip the augmenting path.
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for c in 1..=n {
        assign[owner[c] - 1] = c - 1;
    }
    Ok(assign)
}
