use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row.
    pub rows: Vec<Option<usize>>,
    pub cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs by shortest augmenting
/// paths with dual potentials, O(n²m). Entries must be finite. Rows are
/// inserted in index order and ties between columns go to the lowest index.
pub fn hungarian(cost: &DMatrix<f64>) -> Assignment {
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return Assignment {
            rows: vec![None; r],
            cost: 0.0,
        };
    }
    if r > c {
        let t = hungarian(&cost.transpose());
        let mut rows = vec![None; r];
        for (col, row) in t.pairs() {
            rows[row] = Some(col);
        }
        return Assignment { rows, cost: t.cost };
    }
    // 1-based arrays; column 0 is the virtual start.
    let (n, m) = (r, c);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            rows[owner[j] - 1] = Some(j - 1);
        }
    }
    let total = rows
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[(i, j)]))
        .sum();
    Assignment { rows, cost: total }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_entry() {
        let a = hungarian(&DMatrix::from_element(1, 1, 7.0));
        assert_eq!(a.rows, vec![Some(0)]);
        assert_eq!(a.cost, 7.0);
    }

    #[test]
    fn dominant_diagonal() {
        let a = hungarian(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert_eq!(a.rows, vec![Some(0), Some(1)]);
        assert_eq!(a.cost, 2.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let wide = DMatrix::from_row_slice(2, 3, &[5.0, 1.0, 9.0, 4.0, 2.0, 8.0]);
        let a = hungarian(&wide);
        assert_eq!(a.cost, 5.0);
        assert_eq!(a.rows, vec![Some(1), Some(0)]);
        let tall = hungarian(&wide.transpose());
        assert_eq!(tall.cost, 5.0);
        assert_eq!(tall.rows, vec![Some(1), Some(0), None]);
    }

    #[test]
    fn empty() {
        assert_eq!(
            hungarian(&DMatrix::zeros(0, 3)).rows,
            Vec::<Option<usize>>::new()
        );
        assert_eq!(hungarian(&DMatrix::zeros(2, 0)).rows, vec![None, None]);
    }
}
