//! Dominance and hypervolume for two minimised objectives.

use super::{ParetoFront, PlanPoint};

/// `a` dominates `b`: no worse in both objectives, strictly better in one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

/// Nondominated subset sorted by `(f1, f2, assignment)`; duplicates of one
/// objective vector collapse onto the lexicographically smallest assignment.
pub fn nondominated(mut points: Vec<PlanPoint>) -> ParetoFront {
    points.sort_by(|a, b| a.lex_cmp(b));
    let mut out: Vec<PlanPoint> = Vec::new();
    for p in points {
        if out.last().is_none_or(|last| p.f2 < last.f2) {
            out.push(p);
        }
    }
    ParetoFront { points: out }
}

/// Area dominated by `points` and bounded by `reference`.
pub fn hypervolume(points: &[(f64, f64)], reference: (f64, f64)) -> f64 {
    let mut inside: Vec<(f64, f64)> =
        points.iter().copied().filter(|&(a, b)| a < reference.0 && b < reference.1).collect();
    inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    let mut ceiling = reference.1;
    for (f1, f2) in inside {
        if f2 < ceiling {
            area += (reference.0 - f1) * (ceiling - f2);
            ceiling = f2;
        }
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::Assignment;

    #[test]
    fn dominance() {
        assert!(dominates((1.0, 1.0), (1.0, 2.0)));
        assert!(!dominates((1.0, 1.0), (1.0, 1.0)));
        assert!(!dominates((0.0, 3.0), (1.0, 2.0)));
    }

    #[test]
    fn filter_keeps_first_of_equal_points() {
        let p = |f1, f2, a| PlanPoint { assignment: Assignment(vec![a]), f1, f2 };
        let front = nondominated(vec![p(2.0, 2.0, 3), p(1.0, 5.0, 0), p(2.0, 2.0, 1), p(3.0, 2.0, 2), p(1.0, 6.0, 4)]);
        let got: Vec<_> = front.points.iter().map(|q| (q.f1, q.f2, q.assignment.0[0])).collect();
        assert_eq!(got, vec![(1.0, 5.0, 0), (2.0, 2.0, 1)]);
    }

    #[test]
    fn hypervolume_by_grid_count() {
        let pts = [(1.0, 4.0), (2.0, 2.0), (4.0, 1.0), (3.0, 3.0)];
        let hv = hypervolume(&pts, (5.0, 5.0));
        // count unit cells dominated by some point
        let cells = (0..5)
            .flat_map(|x| (0..5).map(move |y| (x as f64 + 0.5, y as f64 + 0.5)))
            .filter(|&(x, y)| pts.iter().any(|&(a, b)| a <= x && b <= y))
            .count();
        assert_eq!(hv, cells as f64);
        assert_eq!(hypervolume(&[(6.0, 1.0)], (5.0, 5.0)), 0.0);
    }
}
