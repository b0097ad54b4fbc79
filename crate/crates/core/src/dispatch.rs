//! Stage-problem builders: the centralized cost-minimizing dispatch and
//! the single-agent profit model with a pluggable revenue representation.
//!
//! Both share the physical structure per hydro plant (water balance,
//! inflow recursion, storage/turbine/spill bounds) and differ in the
//! objective: the centralized model minimizes thermal cost over the whole
//! system and tags the load-balance dual as the spot price; the agent
//! model maximizes revenue minus own cost, where revenue is either an
//! exogenous price times energy sold or the concave hull of the
//! residual-demand revenue, and forward contracts shift both.
//!
//! State vector layout (both models, restricted to owned plants for the
//! agent): reservoir volumes first, then the inflow lag window per hydro,
//! most recent lag first.

use crate::lp::{Cmp, Col, LinearProgram};
use crate::market::RevenueHull;
use crate::scenario::ScenarioSet;
use crate::sddp::{StageContext, StageLp, StageModelBuilder, StateSource};
use crate::system::{AgentId, Contract, SystemModel};

/// Breaks exact generate-vs-withhold ties toward generating, the way a
/// dispatched marginal unit behaves: own variable costs enter the agent
/// objective scaled by (1 - epsilon).
const MARGINAL_TIE_BREAK: f64 = 1e-9;

/// Column indices (into a stage solution) for the centralized model, one
/// entry per plant in system order; identical across stages.
#[derive(Clone, Debug)]
pub struct CentralizedLayout {
    pub hydro_volume_next: Vec<usize>,
    pub hydro_turbine: Vec<usize>,
    pub hydro_spill: Vec<usize>,
    pub hydro_inflow: Vec<usize>,
    pub thermal_generation: Vec<usize>,
    pub renewable_generation: Vec<usize>,
}

/// Centralized hydrothermal dispatch stage problems.
pub struct CentralizedBuilder<'a> {
    system: &'a SystemModel,
    scenarios: &'a ScenarioSet,
    layout: CentralizedLayout,
    lag_count: usize,
}

impl<'a> CentralizedBuilder<'a> {
    pub fn new(system: &'a SystemModel, scenarios: &'a ScenarioSet) -> Self {
        let nh = system.hydros.len();
        let mut next = 0;
        let mut take = |n: usize| -> Vec<usize> {
            let v = (next..next + n).collect();
            next += n;
            v
        };
        let layout = CentralizedLayout {
            hydro_volume_next: take(nh),
            hydro_turbine: take(nh),
            hydro_spill: take(nh),
            hydro_inflow: take(nh),
            thermal_generation: take(system.thermals.len()),
            renewable_generation: take(system.renewables.len()),
        };
        let lag_count = system.hydros.first().map_or(0, |h| h.ar_lags.len());
        Self {
            system,
            scenarios,
            layout,
            lag_count,
        }
    }

    pub fn layout(&self) -> &CentralizedLayout {
        &self.layout
    }

    fn volume_state(&self, hydro: usize) -> usize {
        hydro
    }

    fn lag_state(&self, hydro: usize, lag: usize) -> usize {
        self.system.hydros.len() + hydro * self.lag_count + lag
    }
}

impl StageModelBuilder for CentralizedBuilder<'_> {
    fn num_stages(&self) -> usize {
        self.system.stages
    }

    fn state_dimension(&self) -> usize {
        self.system.hydros.len() * (1 + self.lag_count)
    }

    fn initial_state(&self) -> Vec<f64> {
        initial_state_for(self.system.hydros.iter(), self.lag_count)
    }

    fn build(&self, ctx: StageContext<'_>) -> StageLp {
        let sys = self.system;
        let mut lp = LinearProgram::new();
        let nh = sys.hydros.len();

        let vol_next: Vec<Col> = sys
            .hydros
            .iter()
            .map(|h| lp.add_column(0.0, 0.0, h.max_storage))
            .collect();
        let turbine: Vec<Col> = sys
            .hydros
            .iter()
            .map(|h| lp.add_column(0.0, 0.0, h.max_turbine))
            .collect();
        let spill: Vec<Col> = (0..nh)
            .map(|_| lp.add_column(0.0, 0.0, f64::INFINITY))
            .collect();
        let inflow: Vec<Col> = (0..nh)
            .map(|_| lp.add_column(0.0, f64::NEG_INFINITY, f64::INFINITY))
            .collect();
        let thermal: Vec<Col> = sys
            .thermals
            .iter()
            .map(|t| lp.add_column(t.cost, 0.0, t.max_generation))
            .collect();
        let renewable: Vec<Col> = sys
            .renewables
            .iter()
            .enumerate()
            .map(|(k, _)| {
                lp.add_column(0.0, 0.0, self.scenarios.renewable_bound(ctx.stage, ctx.sample)[k])
            })
            .collect();

        // Load balance: all generation meets demand; its dual is the spot
        // price.
        let mut balance: Vec<(Col, f64)> = Vec::new();
        for (j, h) in sys.hydros.iter().enumerate() {
            balance.push((turbine[j], h.production_factor));
        }
        for &g in &thermal {
            balance.push((g, 1.0));
        }
        for &r in &renewable {
            balance.push((r, 1.0));
        }
        let load_row = lp.add_row(Cmp::Eq, sys.demand[ctx.stage], &balance);

        let mut next_state = vec![StateSource::Column(Col(0)); self.state_dimension()];
        let mut state_rhs = vec![Vec::new(); self.state_dimension()];

        for (j, h) in sys.hydros.iter().enumerate() {
            // Water balance: outgoing volume plus own outflow minus
            // upstream releases minus inflow equals the incoming volume.
            let mut coeffs = vec![(vol_next[j], 1.0), (turbine[j], 1.0), (spill[j], 1.0)];
            coeffs.push((inflow[j], -1.0));
            for up in &h.upstream_ids {
                let n = sys.hydros.iter().position(|o| o.id == *up).expect("validated");
                coeffs.push((turbine[n], -1.0));
                coeffs.push((spill[n], -1.0));
            }
            let water_row = lp.add_row(Cmp::Eq, ctx.incoming[self.volume_state(j)], &coeffs);
            next_state[self.volume_state(j)] = StateSource::Column(vol_next[j]);
            state_rhs[self.volume_state(j)].push((water_row, 1.0));

            // Inflow recursion: a = sum(phi_l * lag_l) + noise, lags fixed
            // from the incoming state.
            let mut rhs = self.scenarios.noise(ctx.stage, ctx.sample)[j];
            for (l, phi) in h.ar_lags.iter().enumerate() {
                rhs += phi * ctx.incoming[self.lag_state(j, l)];
            }
            let ar_row = lp.add_row(Cmp::Eq, rhs, &[(inflow[j], 1.0)]);
            for (l, phi) in h.ar_lags.iter().enumerate() {
                state_rhs[self.lag_state(j, l)].push((ar_row, *phi));
            }
            if self.lag_count > 0 {
                next_state[self.lag_state(j, 0)] = StateSource::Column(inflow[j]);
                for l in 1..self.lag_count {
                    next_state[self.lag_state(j, l)] =
                        StateSource::Incoming(self.lag_state(j, l - 1));
                }
            }
        }

        StageLp {
            lp,
            next_state,
            state_rhs,
            price_row: Some(load_row),
        }
    }
}

/// How an agent's revenue enters its stage objective.
pub enum RevenueRep {
    /// Exogenous spot price per `[stage][sample]`; revenue is affine in
    /// the energy sold, contract terms included.
    ExogenousPrice(Vec<Vec<f64>>),
    /// Concave revenue hull per `[stage][sample]`; contract terms must
    /// already be part of the hull values.
    Hull(Vec<Vec<RevenueHull>>),
}

/// Column indices for the agent model, per owned plant in id order.
#[derive(Clone, Debug)]
pub struct AgentLayout {
    pub energy: usize,
    pub hydro_volume_next: Vec<usize>,
    pub hydro_turbine: Vec<usize>,
    pub hydro_spill: Vec<usize>,
    pub hydro_inflow: Vec<usize>,
    pub thermal_generation: Vec<usize>,
    pub renewable_generation: Vec<usize>,
}

/// Single-agent stage problems over the agent's own plants.
pub struct AgentBuilder<'a> {
    system: &'a SystemModel,
    scenarios: &'a ScenarioSet,
    revenue: RevenueRep,
    contract: Contract,
    /// Indices into the system's plant vectors.
    hydro_idx: Vec<usize>,
    thermal_idx: Vec<usize>,
    renewable_idx: Vec<usize>,
    layout: AgentLayout,
    lag_count: usize,
}

impl<'a> AgentBuilder<'a> {
    pub fn new(
        system: &'a SystemModel,
        scenarios: &'a ScenarioSet,
        agent: AgentId,
        revenue: RevenueRep,
        contract: Contract,
    ) -> Self {
        let hydro_idx: Vec<usize> = system
            .hydros
            .iter()
            .enumerate()
            .filter(|(_, h)| h.owner_id == agent)
            .map(|(i, _)| i)
            .collect();
        let thermal_idx: Vec<usize> = system
            .thermals
            .iter()
            .enumerate()
            .filter(|(_, t)| t.owner_id == agent)
            .map(|(i, _)| i)
            .collect();
        let renewable_idx: Vec<usize> = system
            .renewables
            .iter()
            .enumerate()
            .filter(|(_, r)| r.owner_id == agent)
            .map(|(i, _)| i)
            .collect();
        let nh = hydro_idx.len();
        let mut next = 0;
        let mut take = |n: usize| -> Vec<usize> {
            let v = (next..next + n).collect();
            next += n;
            v
        };
        let energy = {
            let v = take(1);
            v[0]
        };
        let layout = AgentLayout {
            energy,
            hydro_volume_next: take(nh),
            hydro_turbine: take(nh),
            hydro_spill: take(nh),
            hydro_inflow: take(nh),
            thermal_generation: take(thermal_idx.len()),
            renewable_generation: take(renewable_idx.len()),
        };
        let lag_count = hydro_idx
            .first()
            .map_or(0, |&i| system.hydros[i].ar_lags.len());
        Self {
            system,
            scenarios,
            revenue,
            contract,
            hydro_idx,
            thermal_idx,
            renewable_idx,
            layout,
            lag_count,
        }
    }

    pub fn layout(&self) -> &AgentLayout {
        &self.layout
    }

    fn volume_state(&self, own_hydro: usize) -> usize {
        own_hydro
    }

    fn lag_state(&self, own_hydro: usize, lag: usize) -> usize {
        self.hydro_idx.len() + own_hydro * self.lag_count + lag
    }
}

impl StageModelBuilder for AgentBuilder<'_> {
    fn num_stages(&self) -> usize {
        self.system.stages
    }

    fn state_dimension(&self) -> usize {
        self.hydro_idx.len() * (1 + self.lag_count)
    }

    fn initial_state(&self) -> Vec<f64> {
        initial_state_for(
            self.hydro_idx.iter().map(|&i| &self.system.hydros[i]),
            self.lag_count,
        )
    }

    fn build(&self, ctx: StageContext<'_>) -> StageLp {
        let sys = self.system;
        let mut lp = LinearProgram::new();
        let nh = self.hydro_idx.len();

        let energy = lp.add_column(0.0, 0.0, f64::INFINITY);
        let vol_next: Vec<Col> = self
            .hydro_idx
            .iter()
            .map(|&i| lp.add_column(0.0, 0.0, sys.hydros[i].max_storage))
            .collect();
        let turbine: Vec<Col> = self
            .hydro_idx
            .iter()
            .map(|&i| lp.add_column(0.0, 0.0, sys.hydros[i].max_turbine))
            .collect();
        let spill: Vec<Col> = (0..nh)
            .map(|_| lp.add_column(0.0, 0.0, f64::INFINITY))
            .collect();
        let inflow: Vec<Col> = (0..nh)
            .map(|_| lp.add_column(0.0, f64::NEG_INFINITY, f64::INFINITY))
            .collect();
        let thermal: Vec<Col> = self
            .thermal_idx
            .iter()
            .map(|&i| {
                let t = &sys.thermals[i];
                lp.add_column(t.cost * (1.0 - MARGINAL_TIE_BREAK), 0.0, t.max_generation)
            })
            .collect();
        let renewable: Vec<Col> = self
            .renewable_idx
            .iter()
            .map(|&k| {
                lp.add_column(0.0, 0.0, self.scenarios.renewable_bound(ctx.stage, ctx.sample)[k])
            })
            .collect();

        // Energy sold equals total own generation.
        let mut gen: Vec<(Col, f64)> = vec![(energy, -1.0)];
        for (own, &i) in self.hydro_idx.iter().enumerate() {
            gen.push((turbine[own], sys.hydros[i].production_factor));
        }
        for &g in &thermal {
            gen.push((g, 1.0));
        }
        for &r in &renewable {
            gen.push((r, 1.0));
        }
        lp.add_row(Cmp::Eq, 0.0, &gen);

        // Revenue enters the minimization negated.
        let q_f = self.contract.quantities[ctx.stage];
        match &self.revenue {
            RevenueRep::ExogenousPrice(prices) => {
                let pi = prices[ctx.stage][ctx.sample];
                lp.set_objective_coefficient(energy, -pi);
                lp.set_objective_offset(-self.contract.price * q_f + pi * q_f);
            }
            RevenueRep::Hull(hulls) => {
                let hull = &hulls[ctx.stage][ctx.sample];
                hull.attach_to_lp(&mut lp, energy)
                    .expect("hull with at least 2 vertices");
            }
        }

        let mut next_state = vec![StateSource::Column(Col(0)); self.state_dimension()];
        let mut state_rhs = vec![Vec::new(); self.state_dimension()];

        for (own, &i) in self.hydro_idx.iter().enumerate() {
            let h = &sys.hydros[i];
            let mut coeffs = vec![(vol_next[own], 1.0), (turbine[own], 1.0), (spill[own], 1.0)];
            coeffs.push((inflow[own], -1.0));
            for up in &h.upstream_ids {
                // Cascades never span owners, so upstream plants are the
                // agent's own.
                let n = self
                    .hydro_idx
                    .iter()
                    .position(|&x| sys.hydros[x].id == *up)
                    .expect("validated single-owner cascade");
                coeffs.push((turbine[n], -1.0));
                coeffs.push((spill[n], -1.0));
            }
            let water_row = lp.add_row(Cmp::Eq, ctx.incoming[self.volume_state(own)], &coeffs);
            next_state[self.volume_state(own)] = StateSource::Column(vol_next[own]);
            state_rhs[self.volume_state(own)].push((water_row, 1.0));

            let mut rhs = self.scenarios.noise(ctx.stage, ctx.sample)[i];
            for (l, phi) in h.ar_lags.iter().enumerate() {
                rhs += phi * ctx.incoming[self.lag_state(own, l)];
            }
            let ar_row = lp.add_row(Cmp::Eq, rhs, &[(inflow[own], 1.0)]);
            for (l, phi) in h.ar_lags.iter().enumerate() {
                state_rhs[self.lag_state(own, l)].push((ar_row, *phi));
            }
            if self.lag_count > 0 {
                next_state[self.lag_state(own, 0)] = StateSource::Column(inflow[own]);
                for l in 1..self.lag_count {
                    next_state[self.lag_state(own, l)] =
                        StateSource::Incoming(self.lag_state(own, l - 1));
                }
            }
        }

        StageLp {
            lp,
            next_state,
            state_rhs,
            price_row: None,
        }
    }
}

fn initial_state_for<'h>(
    hydros: impl Iterator<Item = &'h crate::system::HydroPlant>,
    lag_count: usize,
) -> Vec<f64> {
    let hydros: Vec<_> = hydros.collect();
    let mut state = Vec::with_capacity(hydros.len() * (1 + lag_count));
    for h in &hydros {
        state.push(h.initial_storage);
    }
    for h in &hydros {
        for l in 0..lag_count {
            state.push(h.initial_lagged_inflows.get(l).copied().unwrap_or(0.0));
        }
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{concave_hull, revenue_curve, Bid};
    use crate::scenario::{generate, NoiseModel};
    use crate::sddp::{self, train_plain, CutPool, MarkovLattice, TrainOptions};
    use crate::system::SystemModel;

    fn thermal_system(cost: f64, cap: f64, demand: f64, stages: usize) -> SystemModel {
        let json = format!(
            r#"{{
            "stages": {stages},
            "demand": {demand},
            "deficit_cost": 1000.0,
            "thermals": [{{"id": 1, "owner_id": 1, "cost": {cost}, "max_generation": {cap}}}],
            "agents": [{{"id": 1, "kind": "price_taker"}}]
        }}"#
        );
        SystemModel::from_json(&json).unwrap()
    }

    fn empty_scenarios(system: &SystemModel, samples: usize) -> crate::scenario::ScenarioSet {
        let noise = NoiseModel::deterministic(&vec![vec![0.0]; system.hydros.len()]);
        generate(system, &noise, samples, 0).unwrap()
    }

    #[test]
    fn one_thermal_one_stage_prices_at_marginal_cost() {
        let sys = thermal_system(5.0, 20.0, 10.0, 1);
        let scen = empty_scenarios(&sys, 1);
        let builder = CentralizedBuilder::new(&sys, &scen);
        let lattice = MarkovLattice::single_state(1, 1);
        let cuts = CutPool::new(1, &lattice.state_counts);
        let node = sddp::forward_pass(&builder, &cuts, &lattice, 0.0, &[(0, 0)]).unwrap();
        assert!((node.total_cost - 50.0).abs() < 1e-9);
        // Spot price via a fresh solve of the same stage.
        let stage = builder.build(crate::sddp::StageContext {
            stage: 0,
            markov_state: 0,
            sample: 0,
            incoming: &[],
        });
        let sol = stage.lp.solve().unwrap();
        assert!((sol.dual(stage.price_row.unwrap()) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn excess_demand_dispatches_deficit_at_deficit_cost() {
        let sys = thermal_system(5.0, 20.0, 30.0, 1);
        let scen = empty_scenarios(&sys, 1);
        let builder = CentralizedBuilder::new(&sys, &scen);
        let stage = builder.build(crate::sddp::StageContext {
            stage: 0,
            markov_state: 0,
            sample: 0,
            incoming: &[],
        });
        let sol = stage.lp.solve().unwrap();
        assert!((sol.dual(stage.price_row.unwrap()) - 1000.0).abs() < 1e-9);
        // Deficit plant serves the residual 10.
        let deficit_pos = sys
            .thermals
            .iter()
            .position(|t| t.id == sys.deficit_thermal_id)
            .unwrap();
        let col = builder.layout().thermal_generation[deficit_pos];
        assert!((sol.primal[col] - 10.0).abs() < 1e-9);
    }

    fn hydro_thermal_system() -> SystemModel {
        let json = r#"{
            "stages": 2,
            "demand": 10.0,
            "deficit_cost": 1000.0,
            "hydros": [{"id": 1, "owner_id": 1, "max_storage": 10.0, "max_turbine": 10.0,
                        "production_factor": 1.0, "initial_storage": 0.0}],
            "thermals": [{"id": 1, "owner_id": 2, "cost": 5.0, "max_generation": 20.0}],
            "agents": [{"id": 1, "kind": "price_taker"}, {"id": 2, "kind": "price_taker"}]
        }"#;
        SystemModel::from_json(json).unwrap()
    }

    #[test]
    fn hydro_thermal_two_stage_water_value() {
        // Inflow 10 in stage 1 only: hydro covers one stage's demand,
        // thermal the other; total 50, stage-1 price equals the water
        // value 5.
        let sys = hydro_thermal_system();
        let noise = NoiseModel::deterministic(&[vec![10.0, 0.0]]);
        let scen = generate(&sys, &noise, 1, 0).unwrap();
        let builder = CentralizedBuilder::new(&sys, &scen);
        let policy = train_plain(
            &builder,
            1,
            &TrainOptions {
                max_iterations: 15,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert!((policy.lower_bound() - 50.0).abs() < 1e-6);
        let sim = sddp::simulate(&builder, &policy).unwrap();
        assert!((sim.mean_cost() - 50.0).abs() < 1e-6);
        assert!((sim.price[0][0].unwrap() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn price_taker_produces_when_price_beats_cost() {
        let sys = thermal_system(5.0, 10.0, 10.0, 1);
        let scen = empty_scenarios(&sys, 1);
        let builder = AgentBuilder::new(
            &sys,
            &scen,
            1,
            RevenueRep::ExogenousPrice(vec![vec![7.0]]),
            Contract::zero(1),
        );
        let stage = builder.build(crate::sddp::StageContext {
            stage: 0,
            markov_state: 0,
            sample: 0,
            incoming: &[],
        });
        let sol = stage.lp.solve().unwrap();
        let e = sol.primal[builder.layout().energy];
        assert!((e - 10.0).abs() < 1e-9);
        // Stage profit 20 (objective is negated profit).
        assert!((sol.objective + 20.0).abs() < 1e-6);
    }

    #[test]
    fn price_taker_withholds_when_price_below_cost() {
        let sys = thermal_system(5.0, 10.0, 10.0, 1);
        let scen = empty_scenarios(&sys, 1);
        let builder = AgentBuilder::new(
            &sys,
            &scen,
            1,
            RevenueRep::ExogenousPrice(vec![vec![3.0]]),
            Contract::zero(1),
        );
        let stage = builder.build(crate::sddp::StageContext {
            stage: 0,
            markov_state: 0,
            sample: 0,
            incoming: &[],
        });
        let sol = stage.lp.solve().unwrap();
        assert!(sol.primal[builder.layout().energy].abs() < 1e-9);
        assert!(sol.objective.abs() < 1e-9);
    }

    #[test]
    fn marginal_price_tie_resolves_toward_generating() {
        let sys = thermal_system(5.0, 10.0, 10.0, 1);
        let scen = empty_scenarios(&sys, 1);
        let builder = AgentBuilder::new(
            &sys,
            &scen,
            1,
            RevenueRep::ExogenousPrice(vec![vec![5.0]]),
            Contract::zero(1),
        );
        let stage = builder.build(crate::sddp::StageContext {
            stage: 0,
            markov_state: 0,
            sample: 0,
            incoming: &[],
        });
        let sol = stage.lp.solve().unwrap();
        assert!((sol.primal[builder.layout().energy] - 10.0).abs() < 1e-9);
    }

    fn seesaw_hull() -> RevenueHull {
        let others = vec![
            Bid { agent: 1, price: 3.0, quantity: 10.0 },
            Bid { agent: 2, price: 2.0, quantity: 15.0 },
            Bid { agent: 3, price: 1.0, quantity: 20.0 },
        ];
        concave_hull(&revenue_curve(&others, 40.0, 0.0, 0.0, 45.0))
    }

    #[test]
    fn price_maker_picks_the_hull_maximum() {
        // Big hydro with zero-cost energy 45 available: the maker sells on
        // the hull's flat top [20, 40] and earns its maximum 40.
        let json = r#"{
            "stages": 1,
            "demand": 40.0,
            "deficit_cost": 1000.0,
            "hydros": [{"id": 1, "owner_id": 1, "max_storage": 100.0, "max_turbine": 45.0,
                        "production_factor": 1.0, "initial_storage": 45.0}],
            "agents": [{"id": 1, "kind": "price_maker"}]
        }"#;
        let sys = SystemModel::from_json(json).unwrap();
        let noise = NoiseModel::deterministic(&[vec![0.0]]);
        let scen = generate(&sys, &noise, 1, 0).unwrap();
        let builder = AgentBuilder::new(
            &sys,
            &scen,
            1,
            RevenueRep::Hull(vec![vec![seesaw_hull()]]),
            Contract::zero(1),
        );
        let stage = builder.build(crate::sddp::StageContext {
            stage: 0,
            markov_state: 0,
            sample: 0,
            incoming: &[45.0],
        });
        let sol = stage.lp.solve().unwrap();
        let e = sol.primal[builder.layout().energy];
        assert!(e >= 20.0 - 1e-7 && e <= 40.0 + 1e-7, "e = {e}");
        assert!((sol.objective + 40.0).abs() < 1e-7);
        // No fixed e does better than the hull maximum.
        let hull = seesaw_hull();
        for i in 0..=45 {
            assert!(hull.value(i as f64) <= 40.0 + 1e-9);
        }
    }

    #[test]
    fn contract_price_shifts_objective_without_moving_decisions() {
        let sys = thermal_system(5.0, 10.0, 10.0, 1);
        let scen = empty_scenarios(&sys, 1);
        let solve_with = |p_f: f64| {
            let builder = AgentBuilder::new(
                &sys,
                &scen,
                1,
                RevenueRep::ExogenousPrice(vec![vec![7.0]]),
                Contract {
                    price: p_f,
                    quantities: vec![4.0],
                },
            );
            let stage = builder.build(crate::sddp::StageContext {
                stage: 0,
                markov_state: 0,
                sample: 0,
                incoming: &[],
            });
            stage.lp.solve().unwrap()
        };
        let a = solve_with(0.0);
        let b = solve_with(9.0);
        assert_eq!(a.primal, b.primal);
        // Objective shifts by exactly -dP * QF = -9 * 4.
        assert!(((b.objective - a.objective) + 36.0).abs() < 1e-9);
    }

    #[test]
    fn zero_contract_is_identical_to_no_contract() {
        let sys = thermal_system(5.0, 10.0, 10.0, 1);
        let scen = empty_scenarios(&sys, 1);
        let build = |contract: Contract| {
            let builder = AgentBuilder::new(
                &sys,
                &scen,
                1,
                RevenueRep::ExogenousPrice(vec![vec![7.0]]),
                contract,
            );
            builder
                .build(crate::sddp::StageContext {
                    stage: 0,
                    markov_state: 0,
                    sample: 0,
                    incoming: &[],
                })
                .lp
                .to_lp_format()
        };
        assert_eq!(build(Contract::zero(1)), build(Contract { price: 0.0, quantities: vec![0.0] }));
    }

    #[test]
    fn agent_constraints_partition_the_centralized_ones() {
        // Two owners, one hydro each plus thermals: the union of the
        // agents' water-balance and inflow rows matches the centralized
        // rows one-to-one on semantic signatures.
        let json = r#"{
            "stages": 1,
            "demand": 30.0,
            "deficit_cost": 1000.0,
            "hydros": [
                {"id": 1, "owner_id": 1, "max_storage": 20.0, "max_turbine": 10.0,
                 "production_factor": 1.5, "initial_storage": 5.0, "ar_lags": [0.5],
                 "initial_lagged_inflows": [2.0]},
                {"id": 2, "owner_id": 2, "max_storage": 30.0, "max_turbine": 8.0,
                 "production_factor": 0.8, "initial_storage": 7.0, "ar_lags": [0.3],
                 "initial_lagged_inflows": [1.0]}
            ],
            "thermals": [
                {"id": 1, "owner_id": 1, "cost": 4.0, "max_generation": 12.0},
                {"id": 2, "owner_id": 2, "cost": 9.0, "max_generation": 15.0}
            ],
            "agents": [{"id": 1, "kind": "price_taker"}, {"id": 2, "kind": "price_taker"}]
        }"#;
        let sys = SystemModel::from_json(json).unwrap();
        let noise = NoiseModel::deterministic(&[vec![3.0], vec![4.0]]);
        let scen = generate(&sys, &noise, 1, 0).unwrap();

        // Semantic signature: per hydro, (water rhs, inflow rhs, bounds of
        // volume/turbine columns, production factor on the balance).
        let centralized = CentralizedBuilder::new(&sys, &scen);
        let c_stage = centralized.build(crate::sddp::StageContext {
            stage: 0,
            markov_state: 0,
            sample: 0,
            incoming: &centralized.initial_state(),
        });
        let mut central_sigs: Vec<String> = sys
            .hydros
            .iter()
            .enumerate()
            .map(|(j, h)| {
                let vcol = Col(centralized.layout().hydro_volume_next[j]);
                let (lo, hi) = c_stage.lp.bounds(vcol);
                format!("{}:{}:{}:{}", h.id, lo, hi, scen.noise(0, 0)[j])
            })
            .collect();
        central_sigs.sort();

        let mut agent_sigs: Vec<String> = Vec::new();
        for agent in [1u32, 2u32] {
            let builder = AgentBuilder::new(
                &sys,
                &scen,
                agent,
                RevenueRep::ExogenousPrice(vec![vec![1.0]]),
                Contract::zero(1),
            );
            let stage = builder.build(crate::sddp::StageContext {
                stage: 0,
                markov_state: 0,
                sample: 0,
                incoming: &builder.initial_state(),
            });
            for (own, h) in sys.hydros_of(agent).iter().enumerate() {
                let vcol = Col(builder.layout().hydro_volume_next[own]);
                let (lo, hi) = stage.lp.bounds(vcol);
                let j = sys.hydros.iter().position(|x| x.id == h.id).unwrap();
                agent_sigs.push(format!("{}:{}:{}:{}", h.id, lo, hi, scen.noise(0, 0)[j]));
            }
        }
        agent_sigs.sort();
        assert_eq!(central_sigs, agent_sigs);
    }
}
