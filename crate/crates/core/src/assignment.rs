//! Dense linear assignment by shortest augmenting paths with dual potentials
//! (Jonker–Volgenant style, `O(n³)`).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[i]` is the column assigned to row `i`.
    pub row_to_col: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching for a square row-major cost matrix.
pub fn solve(n: usize, cost: &[f64]) -> Result<Assignment> {
    if cost.len() != n * n {
        return Err(Error::Shape(format!("cost matrix has {} entries, expected {n}²", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment costs must be finite".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            row_to_col: vec![],
            cost: 0.0,
        });
    }
    // 1-based arrays; column 0 is the virtual root of each search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    let total = row_to_col.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(Assignment {
        row_to_col,
        cost: total,
    })
}

/// Squared Euclidean cost matrix between two equally sized point sets.
pub fn squared_cost(a: &crate::points::Points, b: &crate::points::Points) -> Vec<f64> {
    let n = a.len();
    let mut c = Vec::with_capacity(n * b.len());
    for ra in a.rows() {
        for rb in b.rows() {
            c.push(crate::points::sq_dist(ra, rb));
        }
    }
    c
}

#[cfg(test)]
pub(crate) fn brute_force(n: usize, cost: &[f64]) -> f64 {
    fn rec(n: usize, cost: &[f64], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                rec(n, cost, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(n, cost, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..60 {
            let n = 1 + trial % 7;
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = solve(n, &cost).unwrap();
            let mut seen = a.row_to_col.clone();
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert!((a.cost - brute_force(n, &cost)).abs() < 1e-9);
        }
    }

    #[test]
    fn trivial_and_invalid() {
        assert_eq!(solve(1, &[4.0]).unwrap().row_to_col, vec![0]);
        assert!(solve(2, &[1.0; 3]).is_err());
        assert!(solve(1, &[f64::NAN]).is_err());
    }
}
