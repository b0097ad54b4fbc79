//! Self-contained dense linear programming kernel.
//!
//! Solves minimization problems with bounded variables and mixed
//! inequality/equality rows via a two-phase revised simplex
//! (see [`simplex`]). The solver reports primal values, one dual value
//! per row with the marginal interpretation `d(objective)/d(rhs)`, and
//! pivots deterministically: same program, same basis, same duals.

mod simplex;

use std::fmt::Write as _;
use thiserror::Error;

/// Feasibility tolerance: a solution is accepted when every row residual
/// and bound violation is below this (absolute).
pub const FEASIBILITY_TOL: f64 = 1e-7;

/// Reduced-cost threshold below which a column is considered priced out.
pub const OPTIMALITY_TOL: f64 = 1e-9;

/// Handle to a column of a [`LinearProgram`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct Col(pub usize);

impl Col {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a row of a [`LinearProgram`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct Row(pub usize);

impl Row {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row comparison sense.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Cmp {
    Le,
    Eq,
    Ge,
}

#[derive(Clone, Debug)]
struct RowData {
    coeffs: Vec<(usize, f64)>,
    cmp: Cmp,
    rhs: f64,
}

/// A linear program in minimization form.
#[derive(Clone, Debug, Default)]
pub struct LinearProgram {
    objective: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rows: Vec<RowData>,
    offset: f64,
}

#[derive(Error, Debug)]
pub enum LpError {
    #[error("column {col} has non-finite objective coefficient {value}")]
    BadObjective { col: usize, value: f64 },
    #[error("column {col} has empty bound interval [{lower}, {upper}]")]
    BadBounds { col: usize, lower: f64, upper: f64 },
    #[error("row {row} references column {col} out of range")]
    BadRowRef { row: usize, col: usize },
    #[error("pivot limit {limit} exceeded without convergence")]
    IterationLimit { limit: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Terminal status of a solve.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Result of [`LinearProgram::solve`].
#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: LpStatus,
    /// One value per column; empty unless status is `Optimal`.
    pub primal: Vec<f64>,
    /// One value per row with the `d(objective)/d(rhs)` sign convention;
    /// empty unless status is `Optimal`.
    pub duals: Vec<f64>,
    pub objective: f64,
}

impl LpSolution {
    pub fn value(&self, col: Col) -> f64 {
        self.primal[col.0]
    }

    pub fn dual(&self, row: Row) -> f64 {
        self.duals[row.0]
    }
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a column with objective coefficient `obj` and bounds
    /// `[lower, upper]`; infinities mark a missing bound.
    pub fn add_column(&mut self, obj: f64, lower: f64, upper: f64) -> Col {
        self.objective.push(obj);
        self.lower.push(lower);
        self.upper.push(upper);
        Col(self.objective.len() - 1)
    }

    /// Adds a row `coeffs (cmp) rhs`. Coefficients on the same column are
    /// accumulated.
    pub fn add_row(&mut self, cmp: Cmp, rhs: f64, coeffs: &[(Col, f64)]) -> Row {
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(coeffs.len());
        for &(col, a) in coeffs {
            if a == 0.0 {
                continue;
            }
            match merged.iter_mut().find(|(c, _)| *c == col.0) {
                Some((_, acc)) => *acc += a,
                None => merged.push((col.0, a)),
            }
        }
        self.rows.push(RowData {
            coeffs: merged,
            cmp,
            rhs,
        });
        Row(self.rows.len() - 1)
    }

    /// Constant added to the objective value (does not affect the argmin).
    pub fn set_objective_offset(&mut self, offset: f64) {
        self.offset = offset;
    }

    pub fn set_objective_coefficient(&mut self, col: Col, value: f64) {
        self.objective[col.0] = value;
    }

    pub fn rhs(&self, row: Row) -> f64 {
        self.rows[row.0].rhs
    }

    pub fn set_rhs(&mut self, row: Row, rhs: f64) {
        self.rows[row.0].rhs = rhs;
    }

    pub fn objective_offset(&self) -> f64 {
        self.offset
    }

    pub fn num_columns(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn objective_coefficient(&self, col: Col) -> f64 {
        self.objective[col.0]
    }

    pub fn bounds(&self, col: Col) -> (f64, f64) {
        (self.lower[col.0], self.upper[col.0])
    }

    fn check(&self) -> Result<(), LpError> {
        for (j, &c) in self.objective.iter().enumerate() {
            if !c.is_finite() {
                return Err(LpError::BadObjective { col: j, value: c });
            }
            if self.lower[j] > self.upper[j] + 1e-12 || self.lower[j].is_nan() || self.upper[j].is_nan()
            {
                return Err(LpError::BadBounds {
                    col: j,
                    lower: self.lower[j],
                    upper: self.upper[j],
                });
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            for &(col, _) in &row.coeffs {
                if col >= self.objective.len() {
                    return Err(LpError::BadRowRef { row: i, col });
                }
            }
        }
        Ok(())
    }

    /// Solves the program. Infeasible and unbounded programs are reported
    /// through [`LpSolution::status`]; errors are reserved for ill-formed
    /// input and numerical breakdown.
    pub fn solve(&self) -> Result<LpSolution, LpError> {
        self.check()?;
        simplex::solve(self)
    }

    /// Serializes the program in the textual LP file layout, for debugging.
    pub fn to_lp_format(&self) -> String {
        let mut out = String::new();
        out.push_str("Minimize\n obj:");
        let mut first = true;
        for (j, &c) in self.objective.iter().enumerate() {
            if c != 0.0 {
                let _ = write!(out, " {} {} x{}", sign_str(c, first), c.abs(), j);
                first = false;
            }
        }
        if first {
            out.push_str(" 0 x0");
        }
        out.push_str("\nSubject To\n");
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, " r{}:", i);
            let mut first = true;
            for &(col, a) in &row.coeffs {
                let _ = write!(out, " {} {} x{}", sign_str(a, first), a.abs(), col);
                first = false;
            }
            if first {
                out.push_str(" 0 x0");
            }
            let op = match row.cmp {
                Cmp::Le => "<=",
                Cmp::Eq => "=",
                Cmp::Ge => ">=",
            };
            let _ = writeln!(out, " {} {}", op, row.rhs);
        }
        out.push_str("Bounds\n");
        for j in 0..self.objective.len() {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
                let _ = writeln!(out, " x{} free", j);
            } else if hi == f64::INFINITY {
                let _ = writeln!(out, " x{} >= {}", j, lo);
            } else if lo == f64::NEG_INFINITY {
                let _ = writeln!(out, " x{} <= {}", j, hi);
            } else {
                let _ = writeln!(out, " {} <= x{} <= {}", lo, j, hi);
            }
        }
        out.push_str("End\n");
        out
    }

    pub(crate) fn objective_slice(&self) -> &[f64] {
        &self.objective
    }

    pub(crate) fn lower_slice(&self) -> &[f64] {
        &self.lower
    }

    pub(crate) fn upper_slice(&self) -> &[f64] {
        &self.upper
    }

    pub(crate) fn row_data(&self, i: usize) -> (&[(usize, f64)], Cmp, f64) {
        let r = &self.rows[i];
        (&r.coeffs, r.cmp, r.rhs)
    }
}

fn sign_str(v: f64, first: bool) -> &'static str {
    match (v < 0.0, first) {
        (true, _) => "-",
        (false, true) => "",
        (false, false) => "+",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bound_row() {
        // min x s.t. x >= 1
        let mut lp = LinearProgram::new();
        let x = lp.add_column(1.0, f64::NEG_INFINITY, f64::INFINITY);
        let r = lp.add_row(Cmp::Ge, 1.0, &[(x, 1.0)]);
        let sol = lp.solve().unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.value(x) - 1.0).abs() < 1e-9);
        assert!((sol.dual(r) - 1.0).abs() < 1e-9);
        assert!((sol.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn contradictory_equalities_are_infeasible() {
        let mut lp = LinearProgram::new();
        let x = lp.add_column(0.0, f64::NEG_INFINITY, f64::INFINITY);
        lp.add_row(Cmp::Eq, 1.0, &[(x, 1.0)]);
        lp.add_row(Cmp::Eq, 2.0, &[(x, 1.0)]);
        let sol = lp.solve().unwrap();
        assert_eq!(sol.status, LpStatus::Infeasible);
    }

    #[test]
    fn unbounded_below() {
        let mut lp = LinearProgram::new();
        let x = lp.add_column(-1.0, 0.0, f64::INFINITY);
        lp.add_row(Cmp::Ge, 0.0, &[(x, 1.0)]);
        let sol = lp.solve().unwrap();
        assert_eq!(sol.status, LpStatus::Unbounded);
    }

    #[test]
    fn equality_dual_matches_marginal_cost() {
        // min 5 g s.t. g = 10, 0 <= g <= 20: dual of the balance row is 5.
        let mut lp = LinearProgram::new();
        let g = lp.add_column(5.0, 0.0, 20.0);
        let r = lp.add_row(Cmp::Eq, 10.0, &[(g, 1.0)]);
        let sol = lp.solve().unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.value(g) - 10.0).abs() < 1e-9);
        assert!((sol.dual(r) - 5.0).abs() < 1e-9);
        assert!((sol.objective - 50.0).abs() < 1e-9);
    }

    #[test]
    fn objective_offset_shifts_value_only() {
        let mut lp = LinearProgram::new();
        let x = lp.add_column(1.0, 0.0, 10.0);
        lp.add_row(Cmp::Ge, 3.0, &[(x, 1.0)]);
        lp.set_objective_offset(100.0);
        let sol = lp.solve().unwrap();
        assert!((sol.value(x) - 3.0).abs() < 1e-9);
        assert!((sol.objective - 103.0).abs() < 1e-9);
    }

    #[test]
    fn le_row_dual_is_nonpositive() {
        // min -x s.t. x <= 4: binding capacity has dual -1 (relaxing the
        // cap by one unit lowers the objective by one).
        let mut lp = LinearProgram::new();
        let x = lp.add_column(-1.0, 0.0, f64::INFINITY);
        let r = lp.add_row(Cmp::Le, 4.0, &[(x, 1.0)]);
        let sol = lp.solve().unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.value(x) - 4.0).abs() < 1e-9);
        assert!((sol.dual(r) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn lp_format_dump_contains_rows_and_bounds() {
        let mut lp = LinearProgram::new();
        let x = lp.add_column(2.0, 0.0, 5.0);
        let y = lp.add_column(-1.0, f64::NEG_INFINITY, f64::INFINITY);
        lp.add_row(Cmp::Le, 7.0, &[(x, 1.0), (y, 3.0)]);
        let text = lp.to_lp_format();
        assert!(text.contains("Minimize"));
        assert!(text.contains("r0:"));
        assert!(text.contains("<= 7"));
        assert!(text.contains("x1 free"));
    }
}
