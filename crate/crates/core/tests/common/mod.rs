//! Shared test oracles: a brute-force merit-order clearing rule, an
//! independent full-tableau simplex, and deterministic-equivalent LP
//! builders for small multi-stage systems.

#![allow(dead_code)]

use hydromarket::lp::{Cmp, LinearProgram, LpStatus};
use hydromarket::market::Bid;

/// Merit-order dispatch with the fixed tie rule: ascending price, then
/// agent id, then input order. The spot price is the price of the bid
/// being consumed when cumulative acceptance reaches demand (the bid that
/// just filled, at exact boundaries).
pub fn merit_order_oracle(bids: &[Bid], demand: f64) -> Option<(Vec<f64>, f64)> {
    let mut order: Vec<usize> = (0..bids.len()).collect();
    order.sort_by(|&a, &b| {
        bids[a]
            .price
            .partial_cmp(&bids[b].price)
            .unwrap()
            .then(bids[a].agent.cmp(&bids[b].agent))
            .then(a.cmp(&b))
    });
    let mut accepted = vec![0.0; bids.len()];
    let mut remaining = demand;
    let mut marginal_price = None;
    for &i in &order {
        if bids[i].quantity == 0.0 {
            continue;
        }
        if marginal_price.is_none() {
            // Demand zero: the cheapest real bid is marginal.
            marginal_price = Some(bids[i].price);
        }
        if remaining <= 0.0 {
            break;
        }
        let take = remaining.min(bids[i].quantity);
        accepted[i] = take;
        remaining -= take;
        marginal_price = Some(bids[i].price);
    }
    if remaining > 1e-7 {
        return None;
    }
    Some((accepted, marginal_price.unwrap_or(0.0)))
}

/// Textbook two-phase dense-tableau simplex for `min c'x, Ax (cmp) b,
/// x >= 0`, with Bland's rule. Intentionally independent of the revised
/// bounded-variable implementation it checks.
pub mod tableau {
    #[derive(Clone, Copy, PartialEq, Eq, Debug)]
    pub enum Op {
        Le,
        Eq,
        Ge,
    }

    #[derive(Clone, Copy, PartialEq, Eq, Debug)]
    pub enum Outcome {
        Optimal,
        Infeasible,
        Unbounded,
    }

    pub struct Standard {
        pub objective: Vec<f64>,
        pub rows: Vec<(Vec<f64>, Op, f64)>,
    }

    pub fn solve(problem: &Standard) -> (Outcome, f64, Vec<f64>) {
        let n = problem.objective.len();
        let m = problem.rows.len();
        // Normalize rhs >= 0.
        let mut rows: Vec<(Vec<f64>, Op, f64)> = problem.rows.clone();
        for (coeffs, op, rhs) in rows.iter_mut() {
            if *rhs < 0.0 {
                for c in coeffs.iter_mut() {
                    *c = -*c;
                }
                *rhs = -*rhs;
                *op = match *op {
                    Op::Le => Op::Ge,
                    Op::Ge => Op::Le,
                    Op::Eq => Op::Eq,
                };
            }
        }
        let n_slack: usize = rows
            .iter()
            .filter(|(_, op, _)| *op != Op::Eq)
            .count();
        let total = n + n_slack + m; // one artificial per row
        let mut a = vec![vec![0.0; total]; m];
        let mut b = vec![0.0; m];
        let mut slack_idx = n;
        let mut basis = vec![0usize; m];
        for (i, (coeffs, op, rhs)) in rows.iter().enumerate() {
            a[i][..n].copy_from_slice(coeffs);
            b[i] = *rhs;
            match op {
                Op::Le => {
                    a[i][slack_idx] = 1.0;
                    slack_idx += 1;
                }
                Op::Ge => {
                    a[i][slack_idx] = -1.0;
                    slack_idx += 1;
                }
                Op::Eq => {}
            }
            let art = n + n_slack + i;
            a[i][art] = 1.0;
            basis[i] = art;
        }

        let phase1: Vec<f64> = (0..total)
            .map(|j| if j >= n + n_slack { 1.0 } else { 0.0 })
            .collect();
        if !iterate(&mut a, &mut b, &mut basis, &phase1, total) {
            return (Outcome::Unbounded, f64::NEG_INFINITY, vec![]);
        }
        let p1: f64 = basis
            .iter()
            .enumerate()
            .filter(|(_, &j)| j >= n + n_slack)
            .map(|(i, _)| b[i])
            .sum();
        if p1 > 1e-7 {
            return (Outcome::Infeasible, f64::INFINITY, vec![]);
        }
        // Drive leftover artificials out where possible; pivots with zero
        // rhs keep feasibility.
        for i in 0..m {
            if basis[i] >= n + n_slack {
                if let Some(j) = (0..n + n_slack).find(|&j| a[i][j].abs() > 1e-9) {
                    pivot(&mut a, &mut b, &mut basis, i, j);
                }
            }
        }
        let mut phase2 = vec![0.0; total];
        phase2[..n].copy_from_slice(&problem.objective);
        // Forbid artificials.
        for c in phase2.iter_mut().skip(n + n_slack) {
            *c = 1e30;
        }
        if !iterate(&mut a, &mut b, &mut basis, &phase2, n + n_slack) {
            return (Outcome::Unbounded, f64::NEG_INFINITY, vec![]);
        }
        let mut x = vec![0.0; n];
        for (i, &j) in basis.iter().enumerate() {
            if j < n {
                x[j] = b[i];
            }
        }
        let obj: f64 = x
            .iter()
            .zip(&problem.objective)
            .map(|(v, c)| v * c)
            .sum();
        (Outcome::Optimal, obj, x)
    }

    fn iterate(
        a: &mut [Vec<f64>],
        b: &mut [f64],
        basis: &mut [usize],
        cost: &[f64],
        allowed: usize,
    ) -> bool {
        let m = a.len();
        for _round in 0..20_000 {
            // Reduced costs via the current basis (dense recompute).
            let mut y = vec![0.0; m];
            for i in 0..m {
                y[i] = cost[basis[i]];
            }
            // Bland: first j with negative reduced cost.
            let mut entering = None;
            for j in 0..allowed {
                if basis.contains(&j) {
                    continue;
                }
                let mut d = cost[j];
                for i in 0..m {
                    d -= y[i] * a[i][j];
                }
                if d < -1e-9 {
                    entering = Some(j);
                    break;
                }
            }
            let Some(j) = entering else {
                return true;
            };
            let mut leave: Option<(f64, usize)> = None;
            for i in 0..m {
                if a[i][j] > 1e-9 {
                    let ratio = b[i] / a[i][j];
                    let better = match leave {
                        None => true,
                        // Bland tie: lowest basic variable index.
                        Some((r, li)) => {
                            ratio < r - 1e-12
                                || (ratio < r + 1e-12 && basis[i] < basis[li])
                        }
                    };
                    if better {
                        leave = Some((ratio, i));
                    }
                }
            }
            let Some((_, row)) = leave else {
                return false;
            };
            pivot(a, b, basis, row, j);
        }
        // Treat stalls as unbounded-class failure; callers compare
        // outcomes, so this never masks a wrong optimum.
        false
    }

    fn pivot(a: &mut [Vec<f64>], b: &mut [f64], basis: &mut [usize], row: usize, col: usize) {
        let m = a.len();
        let total = a[0].len();
        let p = a[row][col];
        for j in 0..total {
            a[row][j] /= p;
        }
        b[row] /= p;
        for i in 0..m {
            if i == row {
                continue;
            }
            let f = a[i][col];
            if f == 0.0 {
                continue;
            }
            for j in 0..total {
                a[i][j] -= f * a[row][j];
            }
            b[i] -= f * b[row];
        }
        basis[row] = col;
    }
}

/// Builds the deterministic equivalent of a small hydrothermal system as
/// one LP: per-stage dispatch columns chained by storage balances, with
/// known inflows per stage. Returns the optimal total cost.
pub fn hydrothermal_deterministic_equivalent(
    stages: usize,
    demand: &[f64],
    thermal: &[(f64, f64)],
    hydro: &[(f64, f64, f64)],
    inflows: &[Vec<f64>],
    deficit_cost: f64,
) -> f64 {
    // thermal: (cost, cap); hydro: (max_storage, max_turbine, initial).
    let mut lp = LinearProgram::new();
    let mut volume_prev: Vec<Option<hydromarket::lp::Col>> = vec![None; hydro.len()];
    for t in 0..stages {
        let mut balance = Vec::new();
        for (j, &(v_max, u_max, _)) in hydro.iter().enumerate() {
            let v_next = lp.add_column(0.0, 0.0, v_max);
            let u = lp.add_column(0.0, 0.0, u_max);
            let z = lp.add_column(0.0, 0.0, f64::INFINITY);
            balance.push((u, 1.0));
            let mut coeffs = vec![(v_next, 1.0), (u, 1.0), (z, 1.0)];
            let mut rhs = inflows[t][j];
            if let Some(prev) = volume_prev[j] {
                coeffs.push((prev, -1.0));
            } else {
                rhs += hydro[j].2;
            }
            lp.add_row(Cmp::Eq, rhs, &coeffs);
            volume_prev[j] = Some(v_next);
        }
        for &(cost, cap) in thermal {
            let g = lp.add_column(cost, 0.0, cap);
            balance.push((g, 1.0));
        }
        let deficit = lp.add_column(deficit_cost, 0.0, f64::INFINITY);
        balance.push((deficit, 1.0));
        lp.add_row(Cmp::Eq, demand[t], &balance);
    }
    let sol = lp.solve().unwrap();
    assert_eq!(sol.status, LpStatus::Optimal);
    sol.objective
}
