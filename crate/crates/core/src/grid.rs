//! Corner and grid enumeration over boxes of free coordinates.

/// Calls `visit` on every corner of the axes, then on a uniform grid with
/// `points` per axis (endpoints included). The per-axis count is reduced so
/// the grid stays within `budget` evaluations.
pub(crate) fn for_each_point<F: FnMut(&[f64])>(axes: &[(f64, f64)], points: usize, budget: usize, mut visit: F) {
    let n = axes.len();
    if n == 0 {
        visit(&[]);
        return;
    }
    let mut pt = vec![0.0; n];
    for mask in 0..(1usize << n) {
        for (i, &(lo, hi)) in axes.iter().enumerate() {
            pt[i] = if mask >> i & 1 == 1 { hi } else { lo };
        }
        visit(&pt);
    }
    let per_axis = points_within_budget(n, points, budget);
    if per_axis <= 2 {
        return;
    }
    let mut idx = vec![0usize; n];
    loop {
        let interior = idx.iter().any(|&i| i != 0 && i != per_axis - 1);
        if interior {
            for (i, &(lo, hi)) in axes.iter().enumerate() {
                pt[i] = lo + (hi - lo) * idx[i] as f64 / (per_axis - 1) as f64;
            }
            visit(&pt);
        }
        let mut d = 0;
        loop {
            if d == n {
                return;
            }
            idx[d] += 1;
            if idx[d] < per_axis {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

pub(crate) fn points_within_budget(axes: usize, points: usize, budget: usize) -> usize {
    let mut per = points.max(2);
    while per > 2 && (per as f64).powi(axes as i32) > budget as f64 {
        per -= 1;
    }
    per
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corners_and_grid() {
        let mut seen = Vec::new();
        for_each_point(&[(0.0, 1.0)], 3, 100, |p| seen.push(p[0]));
        assert_eq!(seen, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn empty_axes_visit_once() {
        let mut n = 0;
        for_each_point(&[], 9, 100, |_| n += 1);
        assert_eq!(n, 1);
    }

    #[test]
    fn budget_limits_grid() {
        let mut n = 0;
        for_each_point(&[(0.0, 1.0); 3], 9, 30, |_| n += 1);
        // 3 points per axis: 27 grid points, 8 of them corners
        assert_eq!(n, 8 + 27 - 8);
    }
}
