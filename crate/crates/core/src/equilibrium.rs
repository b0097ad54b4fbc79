//! Multi-agent equilibrium simulation by diagonalization.
//!
//! The loop starts from the centralized dispatch (its simulated outputs
//! seed every agent's price/quantity bids), then repeats: estimate Markov
//! chains from the current bid and price surfaces, let every price taker
//! re-optimize against the prices, let every price maker re-optimize
//! against the latest rival bids through its residual-demand revenue
//! hulls, clear the market per stage and sample, and test the bid drift
//! against the centralized scale. A fixed point of this map is an
//! approximate Nash equilibrium; non-convergence is reported, not raised.
//!
//! Update order is deterministic: takers then makers, each ascending by
//! agent id, with the deficit agent's bid pinned at (deficit cost, full
//! demand). All randomness derives from the run seed.

use crate::dispatch::{AgentBuilder, CentralizedBuilder, RevenueRep};
use crate::lp::LpError;
use crate::market::{
    clear_market, concave_hull, revenue_curve, BidSurface, MarketError, RevenueCurve,
    RevenueHull,
};
use crate::markov::{estimate_chain, FeatureMatrix, MarkovError};
use crate::scenario::ScenarioSet;
use crate::sddp::{self, MarkovLattice, SddpError, SimulationResult, TrainOptions};
use crate::system::{AgentId, Contract, SystemModel};
use rayon::prelude::*;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum EquilibriumError {
    #[error(transparent)]
    Sddp(#[from] SddpError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("centralized simulation produced no price for stage {0}")]
    MissingPrice(usize),
}

/// SDDP budget for every policy optimization inside the loop.
#[derive(Clone, Copy, Debug)]
pub struct SddpBudget {
    pub iterations: usize,
    pub forward_passes: usize,
}

impl Default for SddpBudget {
    fn default() -> Self {
        Self {
            iterations: 25,
            forward_passes: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EquilibriumOptions {
    pub max_outer_iterations: usize,
    /// Bid drift threshold relative to the centralized scale.
    pub tolerance: f64,
    pub k_markov: usize,
    pub seed: u64,
    /// When set, replaces all contracts with centralized-derived ones at
    /// this level.
    pub contract_level: Option<f64>,
    pub sddp: SddpBudget,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            max_outer_iterations: 10,
            tolerance: 0.01,
            k_markov: 3,
            seed: 0,
            contract_level: None,
            sddp: SddpBudget::default(),
        }
    }
}

/// Everything the centralized benchmark run produces.
pub struct CentralizedOutcome {
    /// Spot prices (load-balance duals) `[stage][sample]`.
    pub prices: Vec<Vec<f64>>,
    /// Initial bids: quantity = simulated generation, price = spot price.
    pub bids: BidSurface,
    pub simulation: SimulationResult,
    pub training_log: Vec<sddp::TrainingRecord>,
    pub mean_price: f64,
    /// Mean spill and storage across stages and samples, as fractions of
    /// total storable water.
    pub spillage_fraction: f64,
    pub storage_fraction: f64,
}

/// Per-agent physical aggregates from the agent's own last simulation.
#[derive(Clone, Copy, Debug, Default)]
pub struct AgentStats {
    /// Mean over stages and samples of spilled water, hm3.
    pub mean_spill: f64,
    /// Mean over stages and samples of stored water, hm3.
    pub mean_storage: f64,
}

#[derive(Clone, Debug)]
pub struct ConvergenceRecord {
    pub iteration: usize,
    pub max_rel_dprice: f64,
    pub max_rel_dquantity: f64,
}

pub struct EquilibriumReport {
    pub converged: bool,
    pub iterations: usize,
    pub convergence: Vec<ConvergenceRecord>,
    pub prices: Vec<Vec<f64>>,
    pub bids: BidSurface,
    /// Bid surfaces per iteration (iteration 0 = centralized seed).
    pub bid_history: Vec<BidSurface>,
    /// Accepted quantity per agent `[agent][stage][sample]`, aligned with
    /// `bids.agents`.
    pub dispatch: Vec<Vec<Vec<f64>>>,
    /// Mean contracted-plus-spot revenue per sample path, by agent.
    pub revenue: BTreeMap<AgentId, f64>,
    /// Revenue divided by energy sold, by agent ($/MWh).
    pub revenue_per_mwh: BTreeMap<AgentId, f64>,
    pub mean_price: f64,
    pub centralized_mean_price: f64,
    pub spillage_fraction: f64,
    pub storage_fraction: f64,
    pub centralized_spillage_fraction: f64,
    pub centralized_storage_fraction: f64,
    pub contracts: BTreeMap<AgentId, Contract>,
}

fn derive_seed(base: u64, tag: u64, iteration: u64, agent: u64) -> u64 {
    // splitmix-style mixing keeps streams distinct per purpose.
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(iteration.wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(agent.wrapping_mul(0x94D049BB133111EB));
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58476D1CE4E5B9);
    z ^= z >> 27;
    z
}

fn train_options(budget: SddpBudget, seed: u64, epigraph_floor: f64) -> TrainOptions {
    TrainOptions {
        max_iterations: budget.iterations,
        forward_passes: budget.forward_passes,
        seed,
        epigraph_floor,
        ..TrainOptions::default()
    }
}

fn mean2(table: &[Vec<f64>]) -> f64 {
    let n: usize = table.iter().map(|r| r.len()).sum();
    if n == 0 {
        return 0.0;
    }
    table.iter().flat_map(|r| r.iter()).sum::<f64>() / n as f64
}

/// Runs and simulates the centralized cost-based dispatch; its prices and
/// per-agent generation seed the bid surfaces.
pub fn centralized_operation(
    system: &SystemModel,
    scenarios: &ScenarioSet,
    budget: SddpBudget,
    seed: u64,
) -> Result<CentralizedOutcome, EquilibriumError> {
    let builder = CentralizedBuilder::new(system, scenarios);
    // Centralized stage costs are nonnegative, so zero floors the future
    // cost validly.
    let policy = sddp::train_plain(
        &builder,
        scenarios.samples,
        &train_options(budget, derive_seed(seed, 1, 0, 0), 0.0),
    )?;
    let simulation = sddp::simulate(&builder, &policy)?;

    let mut prices = vec![vec![0.0; scenarios.samples]; scenarios.stages];
    for t in 0..scenarios.stages {
        for s in 0..scenarios.samples {
            prices[t][s] = simulation.price[t][s].ok_or(EquilibriumError::MissingPrice(t))?;
        }
    }

    let agents: Vec<AgentId> = system.agents.iter().map(|a| a.id).collect();
    let mut bids = BidSurface::zeros(agents, scenarios.stages, scenarios.samples);
    let layout = builder.layout();
    for (i, &agent) in bids.agents.clone().iter().enumerate() {
        for t in 0..scenarios.stages {
            for s in 0..scenarios.samples {
                if agent == system.system_agent_id {
                    bids.prices[i][t][s] = system.deficit_cost;
                    bids.quantities[i][t][s] = system.demand[t];
                    continue;
                }
                let primal = &simulation.primal[t][s];
                let mut q = 0.0;
                for (j, h) in system.hydros.iter().enumerate() {
                    if h.owner_id == agent {
                        q += h.production_factor * primal[layout.hydro_turbine[j]];
                    }
                }
                for (j, th) in system.thermals.iter().enumerate() {
                    if th.owner_id == agent && th.id != system.deficit_thermal_id {
                        q += primal[layout.thermal_generation[j]];
                    }
                }
                for (j, r) in system.renewables.iter().enumerate() {
                    if r.owner_id == agent {
                        q += primal[layout.renewable_generation[j]];
                    }
                }
                bids.prices[i][t][s] = prices[t][s];
                bids.quantities[i][t][s] = q;
            }
        }
    }

    let total_storage = system.total_storage();
    let (mut spill_sum, mut storage_sum) = (0.0, 0.0);
    for t in 0..scenarios.stages {
        for s in 0..scenarios.samples {
            let primal = &simulation.primal[t][s];
            spill_sum += layout.hydro_spill.iter().map(|&c| primal[c]).sum::<f64>();
            storage_sum += layout
                .hydro_volume_next
                .iter()
                .map(|&c| primal[c])
                .sum::<f64>();
        }
    }
    let cells = (scenarios.stages * scenarios.samples) as f64;
    let mean_price = mean2(&prices);
    Ok(CentralizedOutcome {
        prices,
        bids,
        simulation,
        training_log: policy.log.clone(),
        mean_price,
        spillage_fraction: if total_storage > 0.0 {
            spill_sum / cells / total_storage
        } else {
            0.0
        },
        storage_fraction: if total_storage > 0.0 {
            storage_sum / cells / total_storage
        } else {
            0.0
        },
    })
}

/// Contracts derived from the centralized run: per-stage quantity is
/// `level` times the agent's mean generation, the price is the mean spot
/// price.
pub fn contract_from_centralized(
    system: &SystemModel,
    centralized: &CentralizedOutcome,
    level: f64,
) -> BTreeMap<AgentId, Contract> {
    let mean_price = centralized.mean_price;
    let mut contracts = BTreeMap::new();
    for agent in system.bidding_agents() {
        let i = centralized.bids.agent_index(agent.id);
        let quantities: Vec<f64> = centralized.bids.quantities[i]
            .iter()
            .map(|per_sample| level * per_sample.iter().sum::<f64>() / per_sample.len() as f64)
            .collect();
        contracts.insert(
            agent.id,
            Contract {
                price: mean_price,
                quantities,
            },
        );
    }
    contracts
}

/// Result of one agent's self-optimization: its new bids plus physical
/// aggregates.
pub struct AgentBidUpdate {
    pub prices: Vec<Vec<f64>>,
    pub quantities: Vec<Vec<f64>>,
    pub stats: AgentStats,
}

fn agent_stats(
    system: &SystemModel,
    builder: &AgentBuilder<'_>,
    sim: &SimulationResult,
) -> AgentStats {
    let layout = builder.layout();
    let cells = (sim.stages * sim.samples) as f64;
    let mut spill = 0.0;
    let mut storage = 0.0;
    for t in 0..sim.stages {
        for s in 0..sim.samples {
            let primal = &sim.primal[t][s];
            spill += layout.hydro_spill.iter().map(|&c| primal[c]).sum::<f64>();
            storage += layout
                .hydro_volume_next
                .iter()
                .map(|&c| primal[c])
                .sum::<f64>();
        }
    }
    let _ = system;
    AgentStats {
        mean_spill: spill / cells,
        mean_storage: storage / cells,
    }
}

/// Price-taker self-optimization: trains the agent against exogenous
/// prices on the given chain and bids (price, simulated energy).
pub fn price_taker_bid(
    system: &SystemModel,
    agent: AgentId,
    scenarios: &ScenarioSet,
    prices: &[Vec<f64>],
    chain: &MarkovLattice,
    contract: Contract,
    budget: SddpBudget,
    seed: u64,
) -> Result<AgentBidUpdate, EquilibriumError> {
    // Agent stage values are negated profits, so the future value is
    // negative; floor the epigraph at a conservative bound on the
    // remaining horizon's revenue.
    let max_price = prices
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |a, &p| a.max(p.abs()));
    let contract_gain = contract.price.abs()
        * contract
            .quantities
            .iter()
            .fold(0.0f64, |a, &q| a.max(q.abs()));
    let floor = -(system.stages as f64)
        * (max_price * system.capacity_of(agent) + contract_gain + 1.0);
    let builder = AgentBuilder::new(
        system,
        scenarios,
        agent,
        RevenueRep::ExogenousPrice(prices.to_vec()),
        contract,
    );
    let policy = sddp::train(&builder, chain.clone(), &train_options(budget, seed, floor))?;
    let sim = sddp::simulate(&builder, &policy)?;
    let energy_col = builder.layout().energy;
    let quantities: Vec<Vec<f64>> = (0..scenarios.stages)
        .map(|t| {
            (0..scenarios.samples)
                .map(|s| sim.primal[t][s][energy_col])
                .collect()
        })
        .collect();
    Ok(AgentBidUpdate {
        prices: prices.to_vec(),
        quantities,
        stats: agent_stats(system, &builder, &sim),
    })
}

/// Price-maker self-optimization: builds residual-demand revenue hulls
/// from the rivals' bids for every stage and sample, trains on the chain,
/// and prices the resulting offers endogenously through clearing.
pub fn strategic_bid(
    system: &SystemModel,
    agent: AgentId,
    scenarios: &ScenarioSet,
    rivals: &BidSurface,
    chain: &MarkovLattice,
    contract: Contract,
    budget: SddpBudget,
    seed: u64,
) -> Result<AgentBidUpdate, EquilibriumError> {
    let e_max = system.capacity_of(agent);
    let stages = scenarios.stages;
    let samples = scenarios.samples;

    if e_max <= 0.0 {
        // Nothing to offer; the price is whatever the rivals clear at.
        let mut prices = vec![vec![0.0; samples]; stages];
        for t in 0..stages {
            for s in 0..samples {
                let outcome = clear_market(&rivals.rival_bids_at(agent, t, s), system.demand[t])?;
                prices[t][s] = outcome.price;
            }
        }
        return Ok(AgentBidUpdate {
            prices,
            quantities: vec![vec![0.0; samples]; stages],
            stats: AgentStats::default(),
        });
    }

    let curves: Vec<Vec<RevenueCurve>> = (0..stages)
        .into_par_iter()
        .map(|t| {
            (0..samples)
                .map(|s| {
                    revenue_curve(
                        &rivals.rival_bids_at(agent, t, s),
                        system.demand[t],
                        contract.price,
                        contract.quantities[t],
                        e_max,
                    )
                })
                .collect()
        })
        .collect();
    let hulls: Vec<Vec<RevenueHull>> = curves
        .iter()
        .map(|row| row.iter().map(concave_hull).collect())
        .collect();

    // Future profits bound: the best stage revenue any hull offers.
    let max_revenue = hulls
        .iter()
        .flat_map(|row| row.iter())
        .flat_map(|h| h.vertices.iter())
        .fold(0.0f64, |a, v| a.max(v.1.abs()));
    let floor = -(system.stages as f64) * (max_revenue + 1.0);
    let builder = AgentBuilder::new(
        system,
        scenarios,
        agent,
        RevenueRep::Hull(hulls),
        contract.clone(),
    );
    let policy = sddp::train(&builder, chain.clone(), &train_options(budget, seed, floor))?;
    let sim = sddp::simulate(&builder, &policy)?;
    let energy_col = builder.layout().energy;

    // Offer price: the residual-demand price approached from below at
    // the simulated energy. The hull vertex at a displacement breakpoint
    // stands for offers just under it, and pricing the bid at the left
    // limit keeps realized revenue equal to the hull value the policy
    // optimized.
    let mut prices = vec![vec![0.0; samples]; stages];
    let mut quantities = vec![vec![0.0; samples]; stages];
    for t in 0..stages {
        for s in 0..samples {
            let e = sim.primal[t][s][energy_col];
            prices[t][s] = curves[t][s].price_left(e);
            quantities[t][s] = e;
        }
    }
    Ok(AgentBidUpdate {
        prices,
        quantities,
        stats: agent_stats(system, &builder, &sim),
    })
}

fn price_features(prices: &[Vec<f64>]) -> Result<FeatureMatrix, MarkovError> {
    let raw: Vec<Vec<Vec<f64>>> = prices
        .iter()
        .map(|per_sample| per_sample.iter().map(|&p| vec![p]).collect())
        .collect();
    FeatureMatrix::standardized(raw)
}

fn rival_bid_features(
    bids: &BidSurface,
    exclude: AgentId,
    stages: usize,
    samples: usize,
) -> Result<FeatureMatrix, MarkovError> {
    let raw: Vec<Vec<Vec<f64>>> = (0..stages)
        .map(|t| {
            (0..samples)
                .map(|s| {
                    let mut row = Vec::new();
                    for (i, &a) in bids.agents.iter().enumerate() {
                        if a == exclude {
                            continue;
                        }
                        row.push(bids.prices[i][t][s]);
                        row.push(bids.quantities[i][t][s]);
                    }
                    row
                })
                .collect()
        })
        .collect();
    FeatureMatrix::standardized(raw)
}

/// The full diagonalization loop.
pub fn run_equilibrium(
    system: &SystemModel,
    scenarios: &ScenarioSet,
    options: &EquilibriumOptions,
) -> Result<EquilibriumReport, EquilibriumError> {
    let stages = scenarios.stages;
    let samples = scenarios.samples;
    let centralized = centralized_operation(system, scenarios, options.sddp, options.seed)?;

    let contracts: BTreeMap<AgentId, Contract> = match options.contract_level {
        Some(level) => contract_from_centralized(system, &centralized, level),
        None => system
            .bidding_agents()
            .iter()
            .map(|a| (a.id, system.contract(a.id)))
            .collect(),
    };

    let mut bids = centralized.bids.clone();
    let mut prices = centralized.prices.clone();
    let mut bid_history = vec![bids.clone()];
    let mut convergence = Vec::new();
    let mut agent_stats_map: BTreeMap<AgentId, AgentStats> = BTreeMap::new();
    let mut converged = false;
    let mut iterations = 0;

    // Bid-drift denominators: centralized values floored at 1e-6 of the
    // system scale.
    let price_floor = 1e-6 * system.deficit_cost.max(1.0);
    let quantity_floor = 1e-6 * system.demand.iter().cloned().fold(1.0f64, f64::max);

    for iteration in 1..=options.max_outer_iterations {
        iterations = iteration;
        let previous = bids.clone();

        // Chains for this iteration, from the surfaces as they stand.
        let taker_chain = if system.price_takers().is_empty() {
            None
        } else {
            let features = price_features(&prices)?;
            let (lattice, _) = estimate_chain(
                &features,
                options.k_markov.min(samples),
                derive_seed(options.seed, 2, iteration as u64, 0),
            )?;
            Some(lattice)
        };
        let mut maker_chains: BTreeMap<AgentId, MarkovLattice> = BTreeMap::new();
        for maker in system.price_makers() {
            let features = rival_bid_features(&bids, maker.id, stages, samples)?;
            let (lattice, _) = estimate_chain(
                &features,
                options.k_markov.min(samples),
                derive_seed(options.seed, 3, iteration as u64, maker.id as u64),
            )?;
            maker_chains.insert(maker.id, lattice);
        }

        for taker in system.price_takers() {
            let update = price_taker_bid(
                system,
                taker.id,
                scenarios,
                &prices,
                taker_chain.as_ref().expect("takers imply a chain"),
                contracts
                    .get(&taker.id)
                    .cloned()
                    .unwrap_or_else(|| Contract::zero(stages)),
                options.sddp,
                derive_seed(options.seed, 4, iteration as u64, taker.id as u64),
            )?;
            let i = bids.agent_index(taker.id);
            bids.prices[i] = update.prices;
            bids.quantities[i] = update.quantities;
            agent_stats_map.insert(taker.id, update.stats);
        }

        for maker in system.price_makers() {
            let update = strategic_bid(
                system,
                maker.id,
                scenarios,
                &bids,
                &maker_chains[&maker.id],
                contracts
                    .get(&maker.id)
                    .cloned()
                    .unwrap_or_else(|| Contract::zero(stages)),
                options.sddp,
                derive_seed(options.seed, 5, iteration as u64, maker.id as u64),
            )?;
            let i = bids.agent_index(maker.id);
            bids.prices[i] = update.prices;
            bids.quantities[i] = update.quantities;
            agent_stats_map.insert(maker.id, update.stats);
        }

        // Market clearing per (stage, sample).
        for t in 0..stages {
            let cleared: Vec<f64> = (0..samples)
                .into_par_iter()
                .map(|s| clear_market(&bids.bids_at(t, s), system.demand[t]).map(|o| o.price))
                .collect::<Result<_, _>>()?;
            prices[t] = cleared;
        }

        // Drift against the previous iteration, scaled by the centralized
        // surface.
        let mut max_dp = 0.0f64;
        let mut max_dq = 0.0f64;
        for (i, _) in bids.agents.iter().enumerate() {
            for t in 0..stages {
                for s in 0..samples {
                    let dp = (bids.prices[i][t][s] - previous.prices[i][t][s]).abs()
                        / centralized.bids.prices[i][t][s].abs().max(price_floor);
                    let dq = (bids.quantities[i][t][s] - previous.quantities[i][t][s]).abs()
                        / centralized.bids.quantities[i][t][s]
                            .abs()
                            .max(quantity_floor);
                    max_dp = max_dp.max(dp);
                    max_dq = max_dq.max(dq);
                }
            }
        }
        convergence.push(ConvergenceRecord {
            iteration,
            max_rel_dprice: max_dp,
            max_rel_dquantity: max_dq,
        });
        bid_history.push(bids.clone());

        if max_dp <= options.tolerance && max_dq <= options.tolerance {
            converged = true;
            break;
        }
    }

    // Final dispatch and revenue accounting at the cleared prices.
    let n_agents = bids.agents.len();
    let mut dispatch = vec![vec![vec![0.0; samples]; stages]; n_agents];
    for t in 0..stages {
        let outcomes: Vec<Vec<f64>> = (0..samples)
            .into_par_iter()
            .map(|s| {
                clear_market(&bids.bids_at(t, s), system.demand[t]).map(|o| o.accepted)
            })
            .collect::<Result<_, _>>()?;
        for (s, accepted) in outcomes.into_iter().enumerate() {
            for i in 0..n_agents {
                dispatch[i][t][s] = accepted[i];
            }
        }
    }

    let mut revenue = BTreeMap::new();
    let mut revenue_per_mwh = BTreeMap::new();
    for agent in system.bidding_agents() {
        let i = bids.agent_index(agent.id);
        let contract = contracts
            .get(&agent.id)
            .cloned()
            .unwrap_or_else(|| Contract::zero(stages));
        let mut total = 0.0;
        let mut energy = 0.0;
        for t in 0..stages {
            for s in 0..samples {
                let pi = prices[t][s];
                let q = dispatch[i][t][s];
                let qf = contract.quantities[t];
                total += contract.price * qf - pi * qf + pi * q;
                energy += q;
            }
        }
        let per_sample = total / samples as f64;
        revenue.insert(agent.id, per_sample);
        revenue_per_mwh.insert(
            agent.id,
            if energy > 0.0 { total / energy } else { 0.0 },
        );
    }

    let total_storage = system.total_storage();
    let spill_sum: f64 = agent_stats_map.values().map(|s| s.mean_spill).sum();
    let storage_sum: f64 = agent_stats_map.values().map(|s| s.mean_storage).sum();

    let mean_price = mean2(&prices);
    Ok(EquilibriumReport {
        converged,
        iterations,
        convergence,
        prices,
        bids,
        bid_history,
        dispatch,
        revenue,
        revenue_per_mwh,
        mean_price,
        centralized_mean_price: centralized.mean_price,
        spillage_fraction: if total_storage > 0.0 {
            spill_sum / total_storage
        } else {
            0.0
        },
        storage_fraction: if total_storage > 0.0 {
            storage_sum / total_storage
        } else {
            0.0
        },
        centralized_spillage_fraction: centralized.spillage_fraction,
        centralized_storage_fraction: centralized.storage_fraction,
        contracts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate, NoiseModel};

    fn thermal_only_system() -> SystemModel {
        let json = r#"{
            "stages": 2,
            "demand": 30.0,
            "deficit_cost": 1000.0,
            "thermals": [
                {"id": 1, "owner_id": 1, "cost": 5.0, "max_generation": 20.0},
                {"id": 2, "owner_id": 2, "cost": 12.0, "max_generation": 25.0}
            ],
            "agents": [{"id": 1, "kind": "price_taker"}, {"id": 2, "kind": "price_taker"}]
        }"#;
        SystemModel::from_json(json).unwrap()
    }

    fn scenarios_for(system: &SystemModel, samples: usize) -> ScenarioSet {
        let noise = NoiseModel::deterministic(&vec![vec![0.0]; system.hydros.len()]);
        generate(system, &noise, samples, 0).unwrap()
    }

    #[test]
    fn centralized_seeds_bids_with_generation_and_prices() {
        let sys = thermal_only_system();
        let scen = scenarios_for(&sys, 2);
        let out = centralized_operation(&sys, &scen, SddpBudget::default(), 0).unwrap();
        // Marginal unit is thermal 2: spot 12 every stage and sample.
        for t in 0..2 {
            for s in 0..2 {
                assert!((out.prices[t][s] - 12.0).abs() < 1e-6);
            }
        }
        let a1 = out.bids.agent_index(1);
        let a2 = out.bids.agent_index(2);
        assert!((out.bids.quantities[a1][0][0] - 20.0).abs() < 1e-6);
        assert!((out.bids.quantities[a2][0][0] - 10.0).abs() < 1e-6);
        assert!((out.bids.prices[a1][0][0] - 12.0).abs() < 1e-6);
        // Deficit agent bids full demand at deficit cost.
        let sys_idx = out.bids.agent_index(sys.system_agent_id);
        assert!((out.bids.prices[sys_idx][0][0] - 1000.0).abs() < 1e-12);
        assert!((out.bids.quantities[sys_idx][0][0] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn zero_demand_system_clears_at_zero() {
        let json = r#"{
            "stages": 1,
            "demand": 0.0,
            "deficit_cost": 100.0,
            "thermals": [{"id": 1, "owner_id": 1, "cost": 5.0, "max_generation": 10.0}],
            "agents": [{"id": 1, "kind": "price_taker"}]
        }"#;
        let sys = SystemModel::from_json(json).unwrap();
        let scen = scenarios_for(&sys, 1);
        let out = centralized_operation(&sys, &scen, SddpBudget::default(), 0).unwrap();
        assert!(out.bids.quantities[out.bids.agent_index(1)][0][0].abs() < 1e-9);
    }

    #[test]
    fn taker_only_market_converges_fast() {
        let sys = thermal_only_system();
        let scen = scenarios_for(&sys, 2);
        let report = run_equilibrium(
            &sys,
            &scen,
            &EquilibriumOptions {
                max_outer_iterations: 4,
                seed: 7,
                ..EquilibriumOptions::default()
            },
        )
        .unwrap();
        assert!(report.converged, "should converge: {:?}", report.convergence);
        assert!(report.iterations <= 2);
        // Prices stay at the centralized marginal cost.
        assert!((report.mean_price - 12.0).abs() < 1e-6);
        // Dispatch covers demand exactly.
        for t in 0..2 {
            for s in 0..2 {
                let total: f64 = (0..report.bids.agents.len())
                    .map(|i| report.dispatch[i][t][s])
                    .sum();
                assert!((total - 30.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn contract_from_centralized_scales_linearly() {
        let sys = thermal_only_system();
        let scen = scenarios_for(&sys, 2);
        let out = centralized_operation(&sys, &scen, SddpBudget::default(), 0).unwrap();
        let zero = contract_from_centralized(&sys, &out, 0.0);
        assert!(zero.values().all(|c| c.is_zero()));
        let full = contract_from_centralized(&sys, &out, 1.0);
        let threequarter = contract_from_centralized(&sys, &out, 0.75);
        for id in [1u32, 2u32] {
            assert!((full[&id].quantities[0] * 0.75 - threequarter[&id].quantities[0]).abs() < 1e-12);
        }
        // Level 1 on a deterministic system equals the dispatched output.
        assert!((full[&1].quantities[0] - 20.0).abs() < 1e-6);
        assert!((full[&1].price - 12.0).abs() < 1e-6);
    }

    #[test]
    fn taker_bid_follows_price_signal() {
        let sys = thermal_only_system();
        let scen = scenarios_for(&sys, 1);
        let chain = MarkovLattice::single_state(2, 1);
        // Prices above cost: full output. Below cost: zero.
        let high = price_taker_bid(
            &sys,
            1,
            &scen,
            &vec![vec![50.0], vec![50.0]],
            &chain,
            Contract::zero(2),
            SddpBudget::default(),
            1,
        )
        .unwrap();
        assert!((high.quantities[0][0] - 20.0).abs() < 1e-6);
        let low = price_taker_bid(
            &sys,
            1,
            &scen,
            &vec![vec![1.0], vec![1.0]],
            &chain,
            Contract::zero(2),
            SddpBudget::default(),
            1,
        )
        .unwrap();
        assert!(low.quantities[0][0].abs() < 1e-6);
    }

    fn monopolist_system() -> SystemModel {
        // One strategic hydro with ample water against a fixed rival
        // stack; single stage.
        let json = r#"{
            "stages": 1,
            "demand": 40.0,
            "deficit_cost": 1000.0,
            "hydros": [{"id": 1, "owner_id": 1, "max_storage": 100.0, "max_turbine": 45.0,
                        "production_factor": 1.0, "initial_storage": 60.0}],
            "agents": [{"id": 1, "kind": "price_maker"}]
        }"#;
        SystemModel::from_json(json).unwrap()
    }

    fn rival_surface(sys: &SystemModel) -> BidSurface {
        // Three rival offers (3,10), (2,15), (1,20) plus the pinned
        // deficit bid, expressed as a bid surface.
        let mut agents: Vec<u32> = vec![1, 11, 12, 13];
        agents.push(sys.system_agent_id);
        agents.sort_unstable();
        let mut bids = BidSurface::zeros(agents, 1, 1);
        for (agent, price, quantity) in [
            (11u32, 3.0, 10.0),
            (12, 2.0, 15.0),
            (13, 1.0, 20.0),
            (sys.system_agent_id, 1000.0, 40.0),
        ] {
            let i = bids.agent_index(agent);
            bids.prices[i][0][0] = price;
            bids.quantities[i][0][0] = quantity;
        }
        bids
    }

    #[test]
    fn monopolist_offers_on_the_hull_maximum() {
        let sys = monopolist_system();
        let scen = scenarios_for(&sys, 1);
        let rivals = rival_surface(&sys);
        let chain = MarkovLattice::single_state(1, 1);
        let update = strategic_bid(
            &sys,
            1,
            &scen,
            &rivals,
            &chain,
            Contract::zero(1),
            SddpBudget::default(),
            2,
        )
        .unwrap();
        // Hull over the seesaw curve peaks at the displacement of the
        // cheapest rival block: revenue 40 anywhere on [20, 40]. The
        // vertex offer prices at the left limit of the step.
        let e = update.quantities[0][0];
        let pi = update.prices[0][0];
        assert!((20.0..=40.0).contains(&e), "e = {e}");
        assert!((pi * e - 40.0).abs() < 1e-6, "pi*e = {}", pi * e);
        // Beats any fixed price-taker-style offer at the rival stack:
        // enumerate revenue over breakpoint candidates.
        let best_fixed = [(5.0, 3.0), (20.0, 2.0), (40.0, 1.0), (45.0, 0.0)]
            .iter()
            .map(|(q, p)| q * p)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(pi * e >= best_fixed - 1e-9);
    }

    #[test]
    fn contracted_monopolist_offers_weakly_more_energy() {
        let sys = monopolist_system();
        let scen = scenarios_for(&sys, 1);
        let rivals = rival_surface(&sys);
        let chain = MarkovLattice::single_state(1, 1);
        let free = strategic_bid(
            &sys,
            1,
            &scen,
            &rivals,
            &chain,
            Contract::zero(1),
            SddpBudget::default(),
            2,
        )
        .unwrap();
        // Contracted at its uncontracted output with the stack's top
        // price: shorting the contract now costs money, so the offer
        // cannot shrink.
        let contracted = strategic_bid(
            &sys,
            1,
            &scen,
            &rivals,
            &chain,
            Contract {
                price: 3.0,
                quantities: vec![free.quantities[0][0]],
            },
            SddpBudget::default(),
            2,
        )
        .unwrap();
        assert!(
            contracted.quantities[0][0] >= free.quantities[0][0] - 1e-9,
            "contracted {} < free {}",
            contracted.quantities[0][0],
            free.quantities[0][0]
        );
    }

    #[test]
    fn reported_revenue_matches_contract_accounting() {
        let sys = thermal_only_system();
        let scen = scenarios_for(&sys, 2);
        let report = run_equilibrium(
            &sys,
            &scen,
            &EquilibriumOptions {
                max_outer_iterations: 3,
                seed: 11,
                contract_level: Some(0.75),
                ..EquilibriumOptions::default()
            },
        )
        .unwrap();
        for agent in sys.bidding_agents() {
            let i = report.bids.agent_index(agent.id);
            let contract = &report.contracts[&agent.id];
            let mut expected = 0.0;
            for t in 0..2 {
                for s in 0..2 {
                    let pi = report.prices[t][s];
                    let q = report.dispatch[i][t][s];
                    let qf = contract.quantities[t];
                    expected += contract.price * qf - pi * qf + pi * q;
                }
            }
            expected /= 2.0;
            let reported = report.revenue[&agent.id];
            assert!(
                (reported - expected).abs() <= 1e-6 * (1.0 + expected.abs()),
                "agent {}: {} vs {}",
                agent.id,
                reported,
                expected
            );
        }
    }

    #[test]
    fn hydro_taker_sells_into_the_high_price_stage() {
        // Prices high then low: all feasible energy goes to stage one.
        let json = r#"{
            "stages": 2,
            "demand": 10.0,
            "deficit_cost": 1000.0,
            "hydros": [{"id": 1, "owner_id": 1, "max_storage": 30.0, "max_turbine": 12.0,
                        "production_factor": 1.0, "initial_storage": 18.0}],
            "agents": [{"id": 1, "kind": "price_taker"}]
        }"#;
        let sys = SystemModel::from_json(json).unwrap();
        let noise = crate::scenario::NoiseModel::deterministic(&[vec![0.0]]);
        let scen = crate::scenario::generate(&sys, &noise, 1, 0).unwrap();
        let chain = MarkovLattice::single_state(2, 1);
        let update = price_taker_bid(
            &sys,
            1,
            &scen,
            &vec![vec![30.0], vec![5.0]],
            &chain,
            Contract::zero(2),
            SddpBudget::default(),
            4,
        )
        .unwrap();
        // Turbine-limited in the high stage, remainder in the low stage.
        assert!((update.quantities[0][0] - 12.0).abs() < 1e-6);
        assert!((update.quantities[1][0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn zero_capacity_maker_bids_rival_clearing_price() {
        let json = r#"{
            "stages": 1,
            "demand": 10.0,
            "deficit_cost": 500.0,
            "thermals": [{"id": 1, "owner_id": 1, "cost": 5.0, "max_generation": 20.0}],
            "agents": [{"id": 1, "kind": "price_taker"}, {"id": 2, "kind": "price_maker"}]
        }"#;
        let sys = SystemModel::from_json(json).unwrap();
        let scen = scenarios_for(&sys, 1);
        let mut bids = BidSurface::zeros(sys.agents.iter().map(|a| a.id).collect(), 1, 1);
        let i1 = bids.agent_index(1);
        bids.prices[i1][0][0] = 5.0;
        bids.quantities[i1][0][0] = 20.0;
        let isys = bids.agent_index(sys.system_agent_id);
        bids.prices[isys][0][0] = 500.0;
        bids.quantities[isys][0][0] = 10.0;
        let chain = MarkovLattice::single_state(1, 1);
        let update = strategic_bid(
            &sys,
            2,
            &scen,
            &bids,
            &chain,
            Contract::zero(1),
            SddpBudget::default(),
            3,
        )
        .unwrap();
        assert!(update.quantities[0][0].abs() < 1e-12);
        assert!((update.prices[0][0] - 5.0).abs() < 1e-9);
    }
}
