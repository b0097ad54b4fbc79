//! Two-phase revised simplex for bounded variables.
//!
//! Every row is converted to an equality with a slack column whose bounds
//! encode the comparison sense, plus one artificial column that forms the
//! initial basis. Phase 1 minimizes the artificial mass; phase 2 pins the
//! artificials to zero and minimizes the true objective.
//!
//! Pivot rules are fully deterministic:
//! - entering: largest reduced-cost violation, ties broken by lowest
//!   column index; after a degeneracy stall the rule switches to Bland's
//!   (lowest eligible index) permanently, which guarantees termination;
//! - ratio test: exact minimum ratio; a tie between a leaving row and the
//!   entering column's own bound flip resolves to the row; among tied
//!   rows, the largest pivot magnitude wins, then the lowest basic
//!   variable index.
//!
//! The basis inverse is kept explicitly and refreshed from scratch at a
//! fixed cadence; a failed refresh or a violated post-solve check
//! surfaces as an error, never as a silent wrong answer.

use super::{Cmp, LinearProgram, LpError, LpSolution, LpStatus, FEASIBILITY_TOL, OPTIMALITY_TOL};

const PIVOT_TOL: f64 = 1e-9;
const STALL_LIMIT: usize = 64;
const REFACTOR_EVERY: usize = 100;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum VarState {
    Basic(usize),
    AtLower,
    AtUpper,
    FreeAtZero,
}

struct Tableau {
    m: usize,
    /// Total variables: structural, then one slack and one artificial per row.
    n_total: usize,
    n_struct: usize,
    cols: Vec<Vec<(usize, f64)>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
    cost: Vec<f64>,
    basis: Vec<usize>,
    state: Vec<VarState>,
    /// Row-major m x m basis inverse.
    binv: Vec<f64>,
    /// Basic variable values, indexed by basis position.
    xb: Vec<f64>,
    bland: bool,
    stall: usize,
    pivots: usize,
}

enum StepOutcome {
    Optimal,
    Unbounded,
    Progress,
}

pub(super) fn solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    let mut t = Tableau::build(lp);
    let limit = 10_000 + 200 * (t.n_total + t.m);

    // Phase 1: minimize total artificial mass.
    let mut phase1_cost = vec![0.0; t.n_total];
    for k in 0..t.m {
        phase1_cost[t.n_struct + t.m + k] = 1.0;
    }
    t.cost = phase1_cost;
    match t.run(limit)? {
        StepOutcome::Unbounded => {
            return Err(LpError::Numerical(
                "phase 1 reported an unbounded direction".into(),
            ))
        }
        _ => {}
    }
    let infeasibility: f64 = (0..t.m)
        .map(|k| t.value_of(t.n_struct + t.m + k).abs())
        .sum();
    let scale = 1.0 + t.rhs.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if infeasibility > FEASIBILITY_TOL * scale {
        return Ok(LpSolution {
            status: LpStatus::Infeasible,
            primal: Vec::new(),
            duals: Vec::new(),
            objective: f64::INFINITY,
        });
    }

    // Phase 2: artificials pinned at zero, true costs in effect.
    for k in 0..t.m {
        let a = t.n_struct + t.m + k;
        t.upper[a] = 0.0;
        if let VarState::AtUpper = t.state[a] {
            t.state[a] = VarState::AtLower;
        }
    }
    let mut phase2_cost = vec![0.0; t.n_total];
    phase2_cost[..t.n_struct].copy_from_slice(lp.objective_slice());
    t.cost = phase2_cost;
    t.bland = false;
    t.stall = 0;
    match t.run(limit)? {
        StepOutcome::Unbounded => {
            return Ok(LpSolution {
                status: LpStatus::Unbounded,
                primal: Vec::new(),
                duals: Vec::new(),
                objective: f64::NEG_INFINITY,
            });
        }
        _ => {}
    }

    t.refactorize()?;
    let primal: Vec<f64> = (0..t.n_struct).map(|j| t.value_of(j)).collect();
    let duals = t.dual_values();
    let objective: f64 = primal
        .iter()
        .zip(lp.objective_slice())
        .map(|(x, c)| x * c)
        .sum::<f64>()
        + lp.objective_offset();

    t.verify(lp, &primal, &duals, objective)?;

    Ok(LpSolution {
        status: LpStatus::Optimal,
        primal,
        duals,
        objective,
    })
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let m = lp.num_rows();
        let n_struct = lp.num_columns();
        let n_total = n_struct + 2 * m;

        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_total];
        let mut lower = vec![0.0; n_total];
        let mut upper = vec![0.0; n_total];
        lower[..n_struct].copy_from_slice(lp.lower_slice());
        upper[..n_struct].copy_from_slice(lp.upper_slice());

        let mut rhs = vec![0.0; m];
        for i in 0..m {
            let (coeffs, cmp, b) = lp.row_data(i);
            rhs[i] = b;
            for &(col, a) in coeffs {
                cols[col].push((i, a));
            }
            let slack = n_struct + i;
            cols[slack].push((i, 1.0));
            let (slo, shi) = match cmp {
                Cmp::Le => (0.0, f64::INFINITY),
                Cmp::Ge => (f64::NEG_INFINITY, 0.0),
                Cmp::Eq => (0.0, 0.0),
            };
            lower[slack] = slo;
            upper[slack] = shi;
        }

        let mut state = vec![VarState::AtLower; n_total];
        for j in 0..n_struct + m {
            state[j] = initial_state(lower[j], upper[j]);
        }

        // Initial residuals decide each artificial's column sign so the
        // starting basis is feasible with artificials >= 0.
        let mut residual = rhs.clone();
        for j in 0..n_struct + m {
            let v = nonbasic_value(state[j], lower[j], upper[j]);
            if v != 0.0 {
                for &(i, a) in &cols[j] {
                    residual[i] -= a * v;
                }
            }
        }

        let mut basis = vec![0usize; m];
        let mut binv = vec![0.0; m * m];
        let mut xb = vec![0.0; m];
        for i in 0..m {
            let art = n_struct + m + i;
            let sgn = if residual[i] < 0.0 { -1.0 } else { 1.0 };
            cols[art].push((i, sgn));
            lower[art] = 0.0;
            upper[art] = f64::INFINITY;
            state[art] = VarState::Basic(i);
            basis[i] = art;
            binv[i * m + i] = sgn;
            xb[i] = residual[i].abs();
        }

        Self {
            m,
            n_total,
            n_struct,
            cols,
            lower,
            upper,
            rhs,
            cost: vec![0.0; n_total],
            basis,
            state,
            binv,
            xb,
            bland: false,
            stall: 0,
            pivots: 0,
        }
    }

    fn value_of(&self, j: usize) -> f64 {
        match self.state[j] {
            VarState::Basic(r) => self.xb[r],
            s => nonbasic_value(s, self.lower[j], self.upper[j]),
        }
    }

    fn run(&mut self, limit: usize) -> Result<StepOutcome, LpError> {
        for _ in 0..limit {
            match self.step()? {
                StepOutcome::Progress => continue,
                done => return Ok(done),
            }
        }
        Err(LpError::IterationLimit { limit })
    }

    fn step(&mut self) -> Result<StepOutcome, LpError> {
        let y = self.dual_values();

        // Entering column.
        let mut entering: Option<(f64, usize, f64)> = None;
        for j in 0..self.n_total {
            let st = self.state[j];
            if matches!(st, VarState::Basic(_)) || self.lower[j] == self.upper[j] {
                continue;
            }
            let mut d = self.cost[j];
            for &(i, a) in &self.cols[j] {
                d -= y[i] * a;
            }
            let (score, dir) = match st {
                VarState::AtLower if d < -OPTIMALITY_TOL => (-d, 1.0),
                VarState::AtUpper if d > OPTIMALITY_TOL => (d, -1.0),
                VarState::FreeAtZero if d.abs() > OPTIMALITY_TOL => {
                    (d.abs(), if d < 0.0 { 1.0 } else { -1.0 })
                }
                _ => continue,
            };
            if self.bland {
                entering = Some((score, j, dir));
                break;
            }
            match entering {
                Some((best, _, _)) if best >= score => {}
                _ => entering = Some((score, j, dir)),
            }
        }
        let Some((_, enter, dir)) = entering else {
            return Ok(StepOutcome::Optimal);
        };

        // Column in basis coordinates.
        let mut w = vec![0.0; self.m];
        for &(i, a) in &self.cols[enter] {
            for r in 0..self.m {
                w[r] += self.binv[r * self.m + i] * a;
            }
        }

        // Ratio test: the entering variable moves by theta along dir;
        // basic value r changes by -dir * theta * w[r].
        let own_span = if self.lower[enter].is_finite() && self.upper[enter].is_finite() {
            self.upper[enter] - self.lower[enter]
        } else {
            f64::INFINITY
        };
        let mut best_row: Option<(f64, f64, usize)> = None; // (theta, |pivot|, row)
        for r in 0..self.m {
            let rate = dir * w[r];
            if rate.abs() <= PIVOT_TOL {
                continue;
            }
            let k = self.basis[r];
            let theta = if rate > 0.0 {
                if self.lower[k] == f64::NEG_INFINITY {
                    continue;
                }
                ((self.xb[r] - self.lower[k]) / rate).max(0.0)
            } else {
                if self.upper[k] == f64::INFINITY {
                    continue;
                }
                ((self.upper[k] - self.xb[r]) / -rate).max(0.0)
            };
            let better = match best_row {
                None => true,
                Some((t, p, row)) => {
                    theta < t
                        || (theta == t
                            && (w[r].abs() > p || (w[r].abs() == p && self.basis[r] < self.basis[row])))
                }
            };
            if better {
                best_row = Some((theta, w[r].abs(), r));
            }
        }

        let row_theta = best_row.map(|(t, _, _)| t).unwrap_or(f64::INFINITY);
        if row_theta == f64::INFINITY && own_span == f64::INFINITY {
            return Ok(StepOutcome::Unbounded);
        }

        // A tie resolves toward the row leaving the basis.
        let theta = row_theta.min(own_span);
        self.stall = if theta <= 1e-12 { self.stall + 1 } else { 0 };
        if self.stall > STALL_LIMIT {
            self.bland = true;
        }

        if row_theta <= own_span {
            let (_, _, r_out) = best_row.expect("row_theta finite implies candidate");
            let leave = self.basis[r_out];
            let rate = dir * w[r_out];
            self.state[leave] = if rate > 0.0 {
                VarState::AtLower
            } else {
                VarState::AtUpper
            };
            let enter_val = match self.state[enter] {
                VarState::AtLower => self.lower[enter] + dir * theta,
                VarState::AtUpper => self.upper[enter] + dir * theta,
                VarState::FreeAtZero => dir * theta,
                VarState::Basic(_) => unreachable!(),
            };
            for r in 0..self.m {
                if r != r_out {
                    self.xb[r] -= dir * theta * w[r];
                }
            }
            // Pivot the explicit inverse.
            let piv = w[r_out];
            for c in 0..self.m {
                self.binv[r_out * self.m + c] /= piv;
            }
            for r in 0..self.m {
                if r == r_out || w[r] == 0.0 {
                    continue;
                }
                let f = w[r];
                for c in 0..self.m {
                    self.binv[r * self.m + c] -= f * self.binv[r_out * self.m + c];
                }
            }
            self.basis[r_out] = enter;
            self.state[enter] = VarState::Basic(r_out);
            self.xb[r_out] = enter_val;
            self.pivots += 1;
            if self.pivots % REFACTOR_EVERY == 0 {
                self.refactorize()?;
            }
        } else {
            // Bound flip: basis unchanged.
            self.state[enter] = match self.state[enter] {
                VarState::AtLower => VarState::AtUpper,
                VarState::AtUpper => VarState::AtLower,
                other => other,
            };
            for r in 0..self.m {
                self.xb[r] -= dir * theta * w[r];
            }
        }
        Ok(StepOutcome::Progress)
    }

    fn dual_values(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.m];
        for r in 0..self.m {
            let cb = self.cost[self.basis[r]];
            if cb != 0.0 {
                for i in 0..self.m {
                    y[i] += cb * self.binv[r * self.m + i];
                }
            }
        }
        y
    }

    /// Rebuilds the basis inverse from scratch (Gauss-Jordan with partial
    /// pivoting) and recomputes basic values.
    fn refactorize(&mut self) -> Result<(), LpError> {
        let m = self.m;
        if m == 0 {
            return Ok(());
        }
        let mut work = vec![0.0; m * m];
        for (r, &j) in self.basis.iter().enumerate() {
            for &(i, a) in &self.cols[j] {
                work[i * m + r] = a;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for col in 0..m {
            let mut piv_row = col;
            let mut piv_val = work[col * m + col].abs();
            for r in col + 1..m {
                let v = work[r * m + col].abs();
                if v > piv_val {
                    piv_val = v;
                    piv_row = r;
                }
            }
            if piv_val < 1e-12 {
                return Err(LpError::Numerical(format!(
                    "singular basis during refactorization (column {col})"
                )));
            }
            if piv_row != col {
                for c in 0..m {
                    work.swap(col * m + c, piv_row * m + c);
                    inv.swap(col * m + c, piv_row * m + c);
                }
            }
            let p = work[col * m + col];
            for c in 0..m {
                work[col * m + c] /= p;
                inv[col * m + c] /= p;
            }
            for r in 0..m {
                if r == col {
                    continue;
                }
                let f = work[r * m + col];
                if f == 0.0 {
                    continue;
                }
                for c in 0..m {
                    work[r * m + c] -= f * work[col * m + c];
                    inv[r * m + c] -= f * inv[col * m + c];
                }
            }
        }
        // Rows of inv are B^{-1} rows in basis order after the column-major
        // assembly above: work was B with columns per basis position, so
        // inv * B = I and xb = inv * (rhs - N x_N).
        self.binv = inv;
        let mut adjusted = self.rhs.clone();
        for j in 0..self.n_total {
            if matches!(self.state[j], VarState::Basic(_)) {
                continue;
            }
            let v = nonbasic_value(self.state[j], self.lower[j], self.upper[j]);
            if v != 0.0 {
                for &(i, a) in &self.cols[j] {
                    adjusted[i] -= a * v;
                }
            }
        }
        for r in 0..m {
            let mut acc = 0.0;
            for i in 0..m {
                acc += self.binv[r * m + i] * adjusted[i];
            }
            self.xb[r] = acc;
        }
        Ok(())
    }

    /// Post-solve feasibility and strong-duality checks.
    fn verify(
        &self,
        lp: &LinearProgram,
        primal: &[f64],
        duals: &[f64],
        objective: f64,
    ) -> Result<(), LpError> {
        for i in 0..self.m {
            let (coeffs, cmp, b) = lp.row_data(i);
            let lhs: f64 = coeffs.iter().map(|&(c, a)| a * primal[c]).sum();
            let viol = match cmp {
                Cmp::Le => (lhs - b).max(0.0),
                Cmp::Ge => (b - lhs).max(0.0),
                Cmp::Eq => (lhs - b).abs(),
            };
            if viol > FEASIBILITY_TOL * (1.0 + b.abs()) {
                return Err(LpError::Numerical(format!(
                    "row {i} residual {viol:.3e} exceeds tolerance"
                )));
            }
        }
        for j in 0..self.n_struct {
            let v = primal[j];
            if v < self.lower[j] - FEASIBILITY_TOL || v > self.upper[j] + FEASIBILITY_TOL {
                return Err(LpError::Numerical(format!(
                    "column {j} value {v} violates bounds"
                )));
            }
        }
        // Dual objective: y'b plus reduced costs times nonbasic bound values.
        let mut dual_obj: f64 = duals
            .iter()
            .zip(self.rhs.iter())
            .map(|(y, b)| y * b)
            .sum();
        for j in 0..self.n_total {
            if matches!(self.state[j], VarState::Basic(_)) {
                continue;
            }
            let v = nonbasic_value(self.state[j], self.lower[j], self.upper[j]);
            if v == 0.0 {
                continue;
            }
            let mut d = self.cost[j];
            for &(i, a) in &self.cols[j] {
                d -= duals[i] * a;
            }
            dual_obj += d * v;
        }
        let gap = (objective - lp.objective_offset() - dual_obj).abs();
        if gap > 1e-6 * (1.0 + objective.abs()) {
            return Err(LpError::Numerical(format!(
                "strong duality gap {gap:.3e} exceeds tolerance"
            )));
        }
        Ok(())
    }
}

fn initial_state(lower: f64, upper: f64) -> VarState {
    if lower.is_finite() {
        VarState::AtLower
    } else if upper.is_finite() {
        VarState::AtUpper
    } else {
        VarState::FreeAtZero
    }
}

fn nonbasic_value(state: VarState, lower: f64, upper: f64) -> f64 {
    match state {
        VarState::AtLower => lower,
        VarState::AtUpper => upper,
        VarState::FreeAtZero => 0.0,
        VarState::Basic(_) => unreachable!("nonbasic_value on basic variable"),
    }
}
