//! Dense linear assignment by shortest augmenting paths with dual potentials
//! (the O(n³) Hungarian method).

/// Minimum-cost perfect matching on a row-major `n x n` cost matrix.
/// Returns `perm` with row `i` assigned to column `perm[i]`.
pub fn solve_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    let c = |i: usize, j: usize| cost[(i - 1) * n + (j - 1)];
    // 1-based with a virtual column 0 holding the row being inserted.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[col_row[j] - 1] = j - 1;
    }
    perm
}

/// Sum of `cost[i][perm[i]]` in row order.
pub fn assignment_cost(n: usize, cost: &[f64], perm: &[usize]) -> f64 {
    (0..n).map(|i| cost[i * n + perm[i]]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_known_matrix() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let p = solve_assignment(3, &cost);
        assert_eq!(assignment_cost(3, &cost, &p), 5.0);
        let mut seen = p.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn identity_is_optimal_for_diagonal_zero() {
        let n = 5;
        let cost: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 + (k % 7) as f64 }).collect();
        assert_eq!(solve_assignment(n, &cost), vec![0, 1, 2, 3, 4]);
    }
}
