//! Bid-based market clearing and strategic revenue machinery.
//!
//! [`clear_market`] solves the uniform-price dispatch LP; because bid
//! columns are created in merit order (price, then agent id) and the LP
//! kernel pivots deterministically, the outcome coincides with merit-order
//! dispatch under the fixed tie rule, and the balance dual gives the spot
//! price with the cheaper side prevailing at exact breakpoints.
//!
//! [`revenue_curve`] builds the stage revenue of a strategic offer `e`
//! against rival bids (a discontinuous piecewise-affine function once a
//! forward contract is involved), [`concave_hull`] takes its concave
//! majorant, and [`RevenueHull::attach_to_lp`] emits the vertex-weight
//! columns and rows that embed the majorant in a stage problem.

use crate::lp::{Cmp, Col, LinearProgram, LpError, LpStatus, Row};
use crate::system::AgentId;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bid {
    pub agent: AgentId,
    /// $/MWh, nonnegative.
    pub price: f64,
    /// MWh offered, nonnegative.
    pub quantity: f64,
}

#[derive(Error, Debug)]
pub enum MarketError {
    #[error("total offered quantity {offered} cannot serve demand {demand}")]
    Unservable { offered: f64, demand: f64 },
    #[error("bid for agent {agent} has negative {field}")]
    NegativeBid { agent: AgentId, field: &'static str },
    #[error("hull construction needs at least 2 vertices, got {0}")]
    DegenerateHull(usize),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Price and quantity offers for every agent over stages x samples; the
/// medium exchanged by the equilibrium loop.
#[derive(Clone, Debug, PartialEq)]
pub struct BidSurface {
    /// Agent ids in ascending order, the system (deficit) agent included.
    pub agents: Vec<AgentId>,
    /// `[agent][stage][sample]`.
    pub prices: Vec<Vec<Vec<f64>>>,
    pub quantities: Vec<Vec<Vec<f64>>>,
}

impl BidSurface {
    pub fn zeros(agents: Vec<AgentId>, stages: usize, samples: usize) -> Self {
        let n = agents.len();
        Self {
            agents,
            prices: vec![vec![vec![0.0; samples]; stages]; n],
            quantities: vec![vec![vec![0.0; samples]; stages]; n],
        }
    }

    pub fn agent_index(&self, agent: AgentId) -> usize {
        self.agents
            .iter()
            .position(|&a| a == agent)
            .expect("agent in surface")
    }

    /// All bids at one (stage, sample) point.
    pub fn bids_at(&self, stage: usize, sample: usize) -> Vec<Bid> {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, &agent)| Bid {
                agent,
                price: self.prices[i][stage][sample],
                quantity: self.quantities[i][stage][sample],
            })
            .collect()
    }

    /// Bids of everyone but `exclude` at one (stage, sample) point.
    pub fn rival_bids_at(&self, exclude: AgentId, stage: usize, sample: usize) -> Vec<Bid> {
        self.bids_at(stage, sample)
            .into_iter()
            .filter(|b| b.agent != exclude)
            .collect()
    }
}

/// Accepted quantities, the spot price, and the as-bid procurement cost.
#[derive(Clone, Debug)]
pub struct ClearingOutcome {
    /// One entry per input bid, same order.
    pub accepted: Vec<f64>,
    pub price: f64,
    pub total_cost: f64,
}

/// Uniform-price clearing of `bids` against an inelastic `demand`.
pub fn clear_market(bids: &[Bid], demand: f64) -> Result<ClearingOutcome, MarketError> {
    for b in bids {
        if b.price < 0.0 {
            return Err(MarketError::NegativeBid {
                agent: b.agent,
                field: "price",
            });
        }
        if b.quantity < 0.0 {
            return Err(MarketError::NegativeBid {
                agent: b.agent,
                field: "quantity",
            });
        }
    }
    let offered: f64 = bids.iter().map(|b| b.quantity).sum();
    if offered < demand - 1e-7 {
        return Err(MarketError::Unservable { offered, demand });
    }

    // Merit order fixes both the column order and the tie rule.
    let mut order: Vec<usize> = (0..bids.len()).collect();
    order.sort_by(|&a, &b| {
        bids[a]
            .price
            .partial_cmp(&bids[b].price)
            .unwrap()
            .then(bids[a].agent.cmp(&bids[b].agent))
            .then(a.cmp(&b))
    });

    let mut lp = LinearProgram::new();
    let cols: Vec<Col> = order
        .iter()
        .map(|&i| lp.add_column(bids[i].price, 0.0, bids[i].quantity))
        .collect();
    let balance_coeffs: Vec<(Col, f64)> = cols.iter().map(|&c| (c, 1.0)).collect();
    let balance = lp.add_row(Cmp::Eq, demand, &balance_coeffs);
    let sol = lp.solve()?;
    if sol.status != LpStatus::Optimal {
        return Err(MarketError::Unservable { offered, demand });
    }

    let mut accepted = vec![0.0; bids.len()];
    for (pos, &i) in order.iter().enumerate() {
        accepted[i] = sol.value(cols[pos]);
    }
    Ok(ClearingOutcome {
        accepted,
        price: sol.dual(balance),
        total_cost: sol.objective,
    })
}

/// One constant-price interval of a revenue curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    /// Residual-demand marginal price over [start, end).
    pub price: f64,
}

/// Stage revenue as a function of offered energy `e` on `[0, e_max]`:
/// piecewise, with price constant per segment and revenue affine per
/// segment including the contract terms.
#[derive(Clone, Debug)]
pub struct RevenueCurve {
    pub segments: Vec<Segment>,
    pub contract_price: f64,
    pub contract_quantity: f64,
    pub e_max: f64,
}

impl RevenueCurve {
    /// Spot price at `e` (right-continuous).
    pub fn price(&self, e: f64) -> f64 {
        for s in &self.segments {
            if e < s.end || (e == s.end && s.end == self.e_max) {
                if e >= s.start {
                    return s.price;
                }
            }
        }
        self.segments.last().map_or(0.0, |s| s.price)
    }

    /// Left limit of the spot price at `e`: the price a marginal offer
    /// achieves just below `e`. At a breakpoint this is the expensive
    /// side, which is the price the concave-hull vertex at that
    /// breakpoint stands for.
    pub fn price_left(&self, e: f64) -> f64 {
        if e <= 0.0 {
            return self.price(0.0);
        }
        for s in &self.segments {
            if e > s.start && e <= s.end {
                return s.price;
            }
        }
        self.segments.last().map_or(0.0, |s| s.price)
    }

    /// Revenue at `e`: contract income, contract delivery at spot, and
    /// spot sales.
    pub fn revenue(&self, e: f64) -> f64 {
        let pi = self.price(e);
        self.contract_price * self.contract_quantity - pi * self.contract_quantity + pi * e
    }
}

/// Builds the revenue curve of a strategic agent offering `e` at zero
/// price against `other_bids`, under contract `(contract_price,
/// contract_quantity)`. Breakpoints sit where the residual demand
/// exhausts a rival bid.
pub fn revenue_curve(
    other_bids: &[Bid],
    demand: f64,
    contract_price: f64,
    contract_quantity: f64,
    e_max: f64,
) -> RevenueCurve {
    assert!(e_max > 0.0, "e_max must be positive");
    let mut sorted: Vec<&Bid> = other_bids.iter().collect();
    sorted.sort_by(|a, b| {
        a.price
            .partial_cmp(&b.price)
            .unwrap()
            .then(a.agent.cmp(&b.agent))
    });

    // Cumulative rival quantity c_k; the marginal rival price for residual
    // demand r is the first bid with cumulative >= r. Candidate breakpoints
    // in e-space are D - c_k, plus 0, D (price falls to zero), and e_max.
    let mut cuts: Vec<f64> = vec![0.0, e_max];
    if demand > 0.0 && demand < e_max {
        cuts.push(demand);
    }
    let mut cumulative = 0.0;
    for b in &sorted {
        cumulative += b.quantity;
        let e = demand - cumulative;
        if e > 0.0 && e < e_max {
            cuts.push(e);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| *a == *b);

    let price_at = |e: f64| -> f64 {
        let residual = demand - e;
        if residual <= 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for b in &sorted {
            acc += b.quantity;
            if acc >= residual {
                return b.price;
            }
        }
        // Residual beyond the rival stack: the most expensive rival
        // (callers include the deficit bid, making this unreachable in
        // practice).
        sorted.last().map_or(0.0, |b| b.price)
    };

    let mut segments = Vec::with_capacity(cuts.len().max(1));
    for w in cuts.windows(2) {
        segments.push(Segment {
            start: w[0],
            end: w[1],
            price: price_at(w[0]),
        });
    }
    if segments.is_empty() {
        segments.push(Segment {
            start: 0.0,
            end: e_max,
            price: price_at(0.0),
        });
    }
    // Merge neighbors that share a price.
    let mut merged: Vec<Segment> = Vec::with_capacity(segments.len());
    for s in segments {
        match merged.last_mut() {
            Some(last) if last.price == s.price => last.end = s.end,
            _ => merged.push(s),
        }
    }

    RevenueCurve {
        segments: merged,
        contract_price,
        contract_quantity,
        e_max,
    }
}

/// Concave majorant of a revenue curve: vertices of the upper hull of the
/// hypograph, sorted by energy, slopes strictly decreasing.
#[derive(Clone, Debug)]
pub struct RevenueHull {
    /// (energy, revenue) pairs.
    pub vertices: Vec<(f64, f64)>,
}

/// Columns and rows produced by [`RevenueHull::attach_to_lp`].
#[derive(Clone, Debug)]
pub struct HullLpTerms {
    pub lambda: Vec<Col>,
    /// sum(lambda_j * E^Q_j) = e
    pub energy_row: Row,
    /// sum(lambda_j) = 1
    pub convexity_row: Row,
}

impl RevenueHull {
    /// Hull value at `e` by interpolation between bracketing vertices.
    /// Clamps outside the vertex range.
    pub fn value(&self, e: f64) -> f64 {
        let v = &self.vertices;
        if e <= v[0].0 {
            return v[0].1;
        }
        for w in v.windows(2) {
            if e <= w[1].0 {
                let t = (e - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        v[v.len() - 1].1
    }

    pub fn max_energy(&self) -> f64 {
        self.vertices.last().map_or(0.0, |v| v.0)
    }

    /// Adds one weight column per vertex plus the energy-matching and
    /// convexity rows; the weights carry `-revenue` in the objective so a
    /// minimization earns the hull value.
    pub fn attach_to_lp(&self, lp: &mut LinearProgram, e: Col) -> Result<HullLpTerms, MarketError> {
        if self.vertices.len() < 2 {
            return Err(MarketError::DegenerateHull(self.vertices.len()));
        }
        let lambda: Vec<Col> = self
            .vertices
            .iter()
            .map(|&(_, revenue)| lp.add_column(-revenue, 0.0, f64::INFINITY))
            .collect();
        let mut energy_coeffs: Vec<(Col, f64)> = lambda
            .iter()
            .zip(&self.vertices)
            .map(|(&c, &(q, _))| (c, q))
            .collect();
        energy_coeffs.push((e, -1.0));
        let energy_row = lp.add_row(Cmp::Eq, 0.0, &energy_coeffs);
        let ones: Vec<(Col, f64)> = lambda.iter().map(|&c| (c, 1.0)).collect();
        let convexity_row = lp.add_row(Cmp::Eq, 1.0, &ones);
        Ok(HullLpTerms {
            lambda,
            energy_row,
            convexity_row,
        })
    }
}

/// Upper concave hull of the curve's hypograph. Candidates are both
/// one-sided limits at every breakpoint plus the endpoints.
pub fn concave_hull(curve: &RevenueCurve) -> RevenueHull {
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(2 * curve.segments.len() + 2);
    let affine = |seg: &Segment, e: f64| -> f64 {
        curve.contract_price * curve.contract_quantity - seg.price * curve.contract_quantity
            + seg.price * e
    };
    for seg in &curve.segments {
        points.push((seg.start, affine(seg, seg.start)));
        points.push((seg.end, affine(seg, seg.end)));
    }
    upper_hull(points)
}

/// Monotone-chain upper hull over (x, y) points; keeps the leftmost
/// x-extremes, drops dominated and collinear interior points.
fn upper_hull(mut points: Vec<(f64, f64)>) -> RevenueHull {
    points.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(b.1.partial_cmp(&a.1).unwrap())
    });
    // For equal x keep only the highest y.
    points.dedup_by(|next, kept| next.0 == kept.0);

    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for p in points {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // Keep b only while the chain turns strictly downward at b.
            let cross = (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1);
            if cross >= -1e-12 * (1.0 + a.1.abs() + b.1.abs() + p.1.abs()) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    RevenueHull { vertices: hull }
}

/// Writes curve and hull samples as CSV rows `e,price,revenue,is_hull_vertex`.
pub fn curve_to_csv(curve: &RevenueCurve, hull: &RevenueHull) -> String {
    let mut out = String::from("e,price,revenue,is_hull_vertex\n");
    let is_vertex = |e: f64, r: f64| -> bool {
        hull.vertices
            .iter()
            .any(|&(q, v)| (q - e).abs() <= 1e-9 && (v - r).abs() <= 1e-9)
    };
    for seg in &curve.segments {
        let rev_start = curve.contract_price * curve.contract_quantity
            - seg.price * curve.contract_quantity
            + seg.price * seg.start;
        let rev_end = curve.contract_price * curve.contract_quantity
            - seg.price * curve.contract_quantity
            + seg.price * seg.end;
        out.push_str(&format!(
            "{},{},{},{}\n",
            seg.start,
            seg.price,
            rev_start,
            is_vertex(seg.start, rev_start) as u8
        ));
        out.push_str(&format!(
            "{},{},{},{}\n",
            seg.end,
            seg.price,
            rev_end,
            is_vertex(seg.end, rev_end) as u8
        ));
    }
    out
}
