//! Dense two-phase primal simplex with Bland's rule.
//!
//! Sized for occupation-measure programs: a few hundred variables, a hundred
//!-odd rows. Bland's pivoting rules out cycling; the iteration cap is a
//! backstop against numerical stalls.

use crate::error::{E4Error, Result};

const EPS: f64 = 1e-9;
const PIVOT_CAP: usize = 200_000;

/// Solution of a linear program in standard inequality/equality form.
#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Basic variables sitting at zero in the final basis; a nonzero count
    /// flags degeneracy.
    pub degenerate_basics: usize,
}

struct Tableau {
    rows: usize,
    cols: usize, // variables + rhs
    a: Vec<f64>,
    obj: Vec<f64>, // reduced-cost row, length cols
    basis: Vec<usize>,
}

impl Tableau {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.a[r * self.cols + c]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let cols = self.cols;
        let piv = self.a[r * cols + c];
        for j in 0..cols {
            self.a[r * cols + j] /= piv;
        }
        for i in 0..self.rows {
            if i == r {
                continue;
            }
            let factor = self.a[i * cols + c];
            if factor != 0.0 {
                for j in 0..cols {
                    self.a[i * cols + j] -= factor * self.a[r * cols + j];
                }
            }
        }
        let factor = self.obj[c];
        if factor != 0.0 {
            for j in 0..cols {
                self.obj[j] -= factor * self.a[r * cols + j];
            }
        }
        self.basis[r] = c;
    }

    /// Minimises the current objective row over columns where `allowed`.
    /// Bland's rule: lowest-index entering column with a negative reduced
    /// cost, lowest basis index breaking ratio ties.
    fn run<F: Fn(usize) -> bool>(&mut self, allowed: F) -> Result<()> {
        let nvars = self.cols - 1;
        for _ in 0..PIVOT_CAP {
            let mut entering = None;
            for j in 0..nvars {
                if allowed(j) && self.obj[j] < -EPS {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let coef = self.at(i, col);
                if coef > EPS {
                    let ratio = self.at(i, nvars) / coef;
                    let better = match leave {
                        None => true,
                        Some((li, lr)) => {
                            ratio < lr - 1e-12
                                || (ratio < lr + 1e-12 && self.basis[i] < self.basis[li])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Err(E4Error::LpUnbounded { var: col });
            };
            self.pivot(row, col);
        }
        Err(E4Error::SolverDiverged {
            iteration: PIVOT_CAP,
            what: "simplex pivot cap reached".into(),
        })
    }
}

/// Maximises `objective . x` subject to `a_eq x = b_eq`, `a_ub x <= b_ub`,
/// `x >= 0`.
pub fn solve_lp(
    objective: &[f64],
    a_eq: &[Vec<f64>],
    b_eq: &[f64],
    a_ub: &[Vec<f64>],
    b_ub: &[f64],
) -> Result<LpSolution> {
    let n = objective.len();
    let m_eq = a_eq.len();
    let m_ub = a_ub.len();
    let rows = m_eq + m_ub;
    if b_eq.len() != m_eq || b_ub.len() != m_ub {
        return Err(E4Error::ShapeMismatch {
            expected: format!("{m_eq} eq rhs, {m_ub} ub rhs"),
            got: format!("{} / {}", b_eq.len(), b_ub.len()),
        });
    }

    // Variable layout: original | slacks (one per ub row) | artificials.
    let n_slack = m_ub;
    let n_total = n + n_slack + rows;
    let cols = n_total + 1;
    let mut a = vec![0.0; rows * cols];
    let mut basis = vec![0usize; rows];

    for (i, (row, &rhs)) in a_eq.iter().zip(b_eq).chain(a_ub.iter().zip(b_ub)).enumerate() {
        if row.len() != n {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{n} coefficients"),
                got: format!("{}", row.len()),
            });
        }
        let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
        for (j, &v) in row.iter().enumerate() {
            a[i * cols + j] = sign * v;
        }
        if i >= m_eq {
            // Slack for the inequality row (flips with the row sign).
            a[i * cols + n + (i - m_eq)] = sign;
        }
        a[i * cols + n_total - rows + i] = 1.0;
        a[i * cols + n_total] = sign * rhs;
        basis[i] = n_total - rows + i;
    }

    // Phase 1: minimise the artificial sum. Reduced costs start as the
    // negated column sums over all rows (artificials are basic).
    let mut obj = vec![0.0; cols];
    for j in 0..cols {
        if (n_total - rows..n_total).contains(&j) {
            continue;
        }
        let mut s = 0.0;
        for i in 0..rows {
            s += a[i * cols + j];
        }
        obj[j] = -s;
    }
    let mut t = Tableau { rows, cols, a, obj, basis };
    t.run(|_| true)?;
    let residual = -t.obj[n_total];
    if residual > 1e-7 {
        return Err(E4Error::LpInfeasible { residual });
    }

    // Drive any zero-level artificials out of the basis where possible.
    for i in 0..rows {
        if t.basis[i] >= n_total - rows {
            let col = (0..n + n_slack).find(|&j| t.at(i, j).abs() > EPS);
            if let Some(c) = col {
                t.pivot(i, c);
            }
        }
    }

    // Phase 2: maximise the real objective (minimise its negation).
    let mut obj = vec![0.0; cols];
    for (j, &c) in objective.iter().enumerate() {
        obj[j] = -c;
    }
    for i in 0..rows {
        let b = t.basis[i];
        let factor = obj[b];
        if factor != 0.0 {
            for j in 0..cols {
                obj[j] -= factor * t.a[i * cols + j];
            }
        }
    }
    t.obj = obj;
    let artificial_floor = n_total - rows;
    t.run(|j| j < artificial_floor)?;

    let mut x = vec![0.0; n];
    let mut degenerate = 0;
    for i in 0..rows {
        let b = t.basis[i];
        let val = t.at(i, n_total);
        if val.abs() < 1e-10 {
            degenerate += 1;
        }
        if b >= artificial_floor && val > 1e-7 {
            // A redundant row's artificial crept back up: the basis no longer
            // represents a feasible point of the original program.
            return Err(E4Error::LpInfeasible { residual: val });
        }
        if b < n {
            x[b] = val.max(0.0);
        }
    }
    let objective_value: f64 = objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution {
        x,
        objective: objective_value,
        degenerate_basics: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_bounded_max() {
        // max x + y st x + y <= 1, x <= 0.6
        let sol = solve_lp(
            &[1.0, 1.0],
            &[],
            &[],
            &[vec![1.0, 1.0], vec![1.0, 0.0]],
            &[1.0, 0.6],
        )
        .unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn equality_and_budget() {
        // max 2x + y st x + y = 1, x <= 0.3
        let sol = solve_lp(&[2.0, 1.0], &[vec![1.0, 1.0]], &[1.0], &[vec![1.0, 0.0]], &[0.3])
            .unwrap();
        assert!((sol.x[0] - 0.3).abs() < 1e-9);
        assert!((sol.x[1] - 0.7).abs() < 1e-9);
        assert!((sol.objective - 1.3).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible() {
        // x = -1 with x >= 0 cannot hold.
        let err = solve_lp(&[1.0], &[vec![1.0]], &[-1.0], &[vec![1.0]], &[-2.0]).unwrap_err();
        matches!(err, E4Error::LpInfeasible { .. })
            .then_some(())
            .expect("expected infeasibility");
    }

    #[test]
    fn detects_unbounded() {
        let err = solve_lp(&[1.0], &[], &[], &[], &[]).unwrap_err();
        assert!(matches!(err, E4Error::LpUnbounded { .. }));
    }

    #[test]
    fn negative_rhs_rows_normalise() {
        // max y st -x - y <= -1 (i.e. x + y >= 1), x + y <= 2
        let sol = solve_lp(
            &[0.0, 1.0],
            &[],
            &[],
            &[vec![-1.0, -1.0], vec![1.0, 1.0]],
            &[-1.0, 2.0],
        )
        .unwrap();
        assert!((sol.objective - 2.0).abs() < 1e-9);
    }
}
