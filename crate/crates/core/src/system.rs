//! Physical and commercial description of the power system.
//!
//! A [`SystemModel`] is built from a JSON file (see `schema/system.schema.json`
//! and the samples under `data/`). Construction synthesizes a deficit plant:
//! an always-available thermal unit priced at the deficit cost and owned by a
//! dedicated system agent, so every dispatch problem stays feasible and load
//! shedding is priced explicitly.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

pub type PlantId = u32;
pub type AgentId = u32;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HydroPlant {
    pub id: PlantId,
    pub owner_id: AgentId,
    /// hm3
    pub max_storage: f64,
    /// hm3 per stage
    pub max_turbine: f64,
    /// MWh per hm3
    pub production_factor: f64,
    #[serde(default)]
    pub upstream_ids: Vec<PlantId>,
    /// Autoregressive coefficients, one per lag.
    #[serde(default)]
    pub ar_lags: Vec<f64>,
    pub initial_storage: f64,
    /// Observed inflows before the first stage, most recent first.
    #[serde(default)]
    pub initial_lagged_inflows: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThermalPlant {
    pub id: PlantId,
    pub owner_id: AgentId,
    /// $/MWh
    pub cost: f64,
    /// MWh per stage
    pub max_generation: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RenewablePlant {
    pub id: PlantId,
    pub owner_id: AgentId,
    /// MWh per stage; upper bound on any scenario availability.
    pub capacity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    PriceTaker,
    PriceMaker,
    /// Reserved for the synthesized deficit agent; never optimizes bids.
    System,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub id: AgentId,
    pub kind: AgentKind,
}

/// Forward contract: fixed price on a per-stage quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    /// $/MWh
    pub price: f64,
    /// MWh per stage.
    pub quantities: Vec<f64>,
}

impl Contract {
    pub fn zero(stages: usize) -> Self {
        Self {
            price: 0.0,
            quantities: vec![0.0; stages],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.quantities.iter().all(|&q| q == 0.0)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum DemandSpec {
    Uniform(f64),
    PerStage(Vec<f64>),
}

#[derive(Clone, Debug, Deserialize)]
struct ContractSpec {
    agent_id: AgentId,
    price: f64,
    quantity: QuantitySpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum QuantitySpec {
    Uniform(f64),
    PerStage(Vec<f64>),
}

/// On-disk layout of a system file.
#[derive(Clone, Debug, Deserialize)]
pub struct SystemFile {
    pub stages: usize,
    demand: DemandSpec,
    pub deficit_cost: f64,
    #[serde(default)]
    pub hydros: Vec<HydroPlant>,
    #[serde(default)]
    pub thermals: Vec<ThermalPlant>,
    #[serde(default)]
    pub renewables: Vec<RenewablePlant>,
    pub agents: Vec<Agent>,
    #[serde(default)]
    contracts: Vec<ContractSpec>,
}

#[derive(Error, Debug)]
pub enum SystemError {
    #[error("failed to read system file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse system file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("system is invalid:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
    #[error("shares sum to {0}, expected 1")]
    BadShares(f64),
}

/// A broken invariant, naming the entity and the rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

/// Validated system: plants, ownership, demand, contracts, plus the
/// synthesized deficit plant and its system agent.
#[derive(Clone, Debug)]
pub struct SystemModel {
    pub stages: usize,
    pub demand: Vec<f64>,
    pub deficit_cost: f64,
    pub hydros: Vec<HydroPlant>,
    pub thermals: Vec<ThermalPlant>,
    pub renewables: Vec<RenewablePlant>,
    pub agents: Vec<Agent>,
    pub contracts: BTreeMap<AgentId, Contract>,
    pub deficit_thermal_id: PlantId,
    pub system_agent_id: AgentId,
}

impl SystemModel {
    pub fn from_file(path: &Path) -> Result<Self, SystemError> {
        let text = std::fs::read_to_string(path).map_err(|source| SystemError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, SystemError> {
        let file: SystemFile = serde_json::from_str(text)?;
        Self::from_spec(file)
    }

    pub fn from_spec(file: SystemFile) -> Result<Self, SystemError> {
        let demand = match file.demand {
            DemandSpec::Uniform(d) => vec![d; file.stages],
            DemandSpec::PerStage(v) => v,
        };
        let system_agent_id = file.agents.iter().map(|a| a.id).max().unwrap_or(0) + 1;
        let deficit_thermal_id = file.thermals.iter().map(|t| t.id).max().unwrap_or(0) + 1;

        let mut agents = file.agents;
        agents.push(Agent {
            id: system_agent_id,
            kind: AgentKind::System,
        });
        agents.sort_by_key(|a| a.id);

        let mut thermals = file.thermals;
        thermals.push(ThermalPlant {
            id: deficit_thermal_id,
            owner_id: system_agent_id,
            cost: file.deficit_cost,
            max_generation: f64::INFINITY,
        });
        thermals.sort_by_key(|t| t.id);

        let mut hydros = file.hydros;
        hydros.sort_by_key(|h| h.id);
        let mut renewables = file.renewables;
        renewables.sort_by_key(|r| r.id);

        let mut contracts = BTreeMap::new();
        for spec in file.contracts {
            let quantities = match spec.quantity {
                QuantitySpec::Uniform(q) => vec![q; file.stages],
                QuantitySpec::PerStage(v) => v,
            };
            contracts.insert(
                spec.agent_id,
                Contract {
                    price: spec.price,
                    quantities,
                },
            );
        }

        let model = Self {
            stages: file.stages,
            demand,
            deficit_cost: file.deficit_cost,
            hydros,
            thermals,
            renewables,
            agents,
            contracts,
            deficit_thermal_id,
            system_agent_id,
        };
        let violations = model.validate();
        if violations.is_empty() {
            Ok(model)
        } else {
            Err(SystemError::Invalid(violations))
        }
    }

    /// Checks every model invariant; returns one entry per broken rule.
    /// Pure and idempotent.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut violate = |entity: String, rule: &str| {
            out.push(Violation {
                entity,
                rule: rule.to_string(),
            })
        };

        if self.stages == 0 {
            violate("system".into(), "stage count must be at least 1");
        }
        if self.demand.len() != self.stages {
            violate("demand".into(), "demand must have one value per stage");
        }
        for (t, &d) in self.demand.iter().enumerate() {
            if !(d >= 0.0) {
                violate(format!("demand[{t}]"), "demand must be nonnegative");
            }
        }
        let max_real_thermal_cost = self
            .thermals
            .iter()
            .filter(|t| t.id != self.deficit_thermal_id)
            .map(|t| t.cost)
            .fold(0.0f64, f64::max);
        if self.deficit_cost <= max_real_thermal_cost {
            violate(
                "deficit_cost".into(),
                "deficit cost must exceed every thermal cost",
            );
        }
        if self.hydros.is_empty() && self.renewables.is_empty() && !self.thermals.iter().any(|t| t.id != self.deficit_thermal_id) {
            violate("system".into(), "at least one generator is required");
        }

        let agent_ids: BTreeSet<AgentId> = self.agents.iter().map(|a| a.id).collect();
        if agent_ids.len() != self.agents.len() {
            violate("agents".into(), "agent ids must be unique");
        }

        let lag_count = self.hydros.first().map(|h| h.ar_lags.len());
        for h in &self.hydros {
            let ent = format!("hydro {}", h.id);
            if !(h.max_storage >= 0.0) {
                violate(ent.clone(), "max storage must be nonnegative");
            }
            if !(h.max_turbine >= 0.0) {
                violate(ent.clone(), "max turbine flow must be nonnegative");
            }
            if !(h.production_factor >= 0.0) {
                violate(ent.clone(), "production factor must be nonnegative");
            }
            if !(h.initial_storage >= 0.0 && h.initial_storage <= h.max_storage + 1e-9) {
                violate(ent.clone(), "initial storage must lie within [0, max storage]");
            }
            if Some(h.ar_lags.len()) != lag_count {
                violate(ent.clone(), "lag count must be uniform across hydro plants");
            }
            if h.initial_lagged_inflows.len() != h.ar_lags.len() {
                violate(
                    ent.clone(),
                    "initial lagged inflows must match the lag count",
                );
            }
            if !agent_ids.contains(&h.owner_id) {
                violate(ent.clone(), "owner id does not resolve to an agent");
            }
            for up in &h.upstream_ids {
                if !self.hydros.iter().any(|o| o.id == *up) {
                    violate(ent.clone(), "upstream id does not resolve to a hydro plant");
                }
            }
        }
        let hydro_ids: BTreeSet<PlantId> = self.hydros.iter().map(|h| h.id).collect();
        if hydro_ids.len() != self.hydros.len() {
            violate("hydros".into(), "hydro ids must be unique");
        }

        for t in &self.thermals {
            let ent = format!("thermal {}", t.id);
            if !(t.cost >= 0.0) {
                violate(ent.clone(), "cost must be nonnegative");
            }
            if !(t.max_generation >= 0.0) {
                violate(ent.clone(), "max generation must be nonnegative");
            }
            if !agent_ids.contains(&t.owner_id) {
                violate(ent.clone(), "owner id does not resolve to an agent");
            }
        }
        for r in &self.renewables {
            let ent = format!("renewable {}", r.id);
            if !(r.capacity >= 0.0) {
                violate(ent.clone(), "capacity must be nonnegative");
            }
            if !agent_ids.contains(&r.owner_id) {
                violate(ent.clone(), "owner id does not resolve to an agent");
            }
        }

        if self.cascade_has_cycle() {
            violate("hydros".into(), "cascade graph cyclic");
        } else {
            // Cascade connectivity only matters on an acyclic graph.
            for component in self.cascade_components() {
                let owners: BTreeSet<AgentId> = component
                    .iter()
                    .map(|id| self.hydro(*id).unwrap().owner_id)
                    .collect();
                if owners.len() > 1 {
                    let ids: Vec<String> = component.iter().map(|i| i.to_string()).collect();
                    violate(
                        format!("cascade {{{}}}", ids.join(", ")),
                        "shared cascade: all hydro plants in one cascade must have a single owner",
                    );
                }
            }
        }

        for (agent_id, contract) in &self.contracts {
            let ent = format!("contract for agent {agent_id}");
            if !agent_ids.contains(agent_id) {
                violate(ent.clone(), "agent id does not resolve");
            }
            if contract.quantities.len() != self.stages {
                violate(ent.clone(), "contract must carry one quantity per stage");
            }
            if contract.quantities.iter().any(|&q| !(q >= 0.0)) {
                violate(ent.clone(), "contract quantities must be nonnegative");
            }
        }

        out
    }

    fn cascade_has_cycle(&self) -> bool {
        // DFS over the upstream relation with three-color marking.
        let ids: Vec<PlantId> = self.hydros.iter().map(|h| h.id).collect();
        let mut color: BTreeMap<PlantId, u8> = ids.iter().map(|&i| (i, 0)).collect();
        fn visit(
            id: PlantId,
            sys: &SystemModel,
            color: &mut BTreeMap<PlantId, u8>,
        ) -> bool {
            match color.get(&id) {
                Some(1) => return true,
                Some(2) | None => return false,
                _ => {}
            }
            color.insert(id, 1);
            if let Some(h) = sys.hydro(id) {
                for &up in &h.upstream_ids {
                    if visit(up, sys, color) {
                        return true;
                    }
                }
            }
            color.insert(id, 2);
            false
        }
        ids.iter().any(|&i| visit(i, self, &mut color))
    }

    /// Connected components of the undirected cascade graph.
    fn cascade_components(&self) -> Vec<Vec<PlantId>> {
        let mut adjacency: BTreeMap<PlantId, Vec<PlantId>> = BTreeMap::new();
        for h in &self.hydros {
            adjacency.entry(h.id).or_default();
            for &up in &h.upstream_ids {
                if self.hydro(up).is_some() {
                    adjacency.entry(h.id).or_default().push(up);
                    adjacency.entry(up).or_default().push(h.id);
                }
            }
        }
        let mut seen: BTreeSet<PlantId> = BTreeSet::new();
        let mut components = Vec::new();
        for &start in adjacency.keys() {
            if seen.contains(&start) {
                continue;
            }
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(node) = stack.pop() {
                if !seen.insert(node) {
                    continue;
                }
                comp.push(node);
                for &next in &adjacency[&node] {
                    if !seen.contains(&next) {
                        stack.push(next);
                    }
                }
            }
            comp.sort_unstable();
            components.push(comp);
        }
        components
    }

    pub fn hydro(&self, id: PlantId) -> Option<&HydroPlant> {
        self.hydros.iter().find(|h| h.id == id)
    }

    pub fn agent(&self, id: AgentId) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn contract(&self, agent: AgentId) -> Contract {
        self.contracts
            .get(&agent)
            .cloned()
            .unwrap_or_else(|| Contract::zero(self.stages))
    }

    /// Hydro plants owned by `agent`, in id order.
    pub fn hydros_of(&self, agent: AgentId) -> Vec<&HydroPlant> {
        self.hydros.iter().filter(|h| h.owner_id == agent).collect()
    }

    pub fn thermals_of(&self, agent: AgentId) -> Vec<&ThermalPlant> {
        self.thermals
            .iter()
            .filter(|t| t.owner_id == agent)
            .collect()
    }

    pub fn renewables_of(&self, agent: AgentId) -> Vec<&RenewablePlant> {
        self.renewables
            .iter()
            .filter(|r| r.owner_id == agent)
            .collect()
    }

    /// Agents that place bids of their own volition (excludes the deficit
    /// system agent), in id order.
    pub fn bidding_agents(&self) -> Vec<&Agent> {
        self.agents
            .iter()
            .filter(|a| a.kind != AgentKind::System)
            .collect()
    }

    pub fn price_takers(&self) -> Vec<&Agent> {
        self.agents
            .iter()
            .filter(|a| a.kind == AgentKind::PriceTaker)
            .collect()
    }

    pub fn price_makers(&self) -> Vec<&Agent> {
        self.agents
            .iter()
            .filter(|a| a.kind == AgentKind::PriceMaker)
            .collect()
    }

    /// Total installed capacity of one agent in MWh per stage: thermal
    /// capacity plus full-turbine hydro energy plus renewable capacity.
    /// Used as the offer-quantity ceiling.
    pub fn capacity_of(&self, agent: AgentId) -> f64 {
        let thermal: f64 = self
            .thermals_of(agent)
            .iter()
            .filter(|t| t.id != self.deficit_thermal_id)
            .map(|t| t.max_generation)
            .sum();
        let hydro: f64 = self
            .hydros_of(agent)
            .iter()
            .map(|h| h.production_factor * h.max_turbine)
            .sum();
        let renewable: f64 = self.renewables_of(agent).iter().map(|r| r.capacity).sum();
        thermal + hydro + renewable
    }

    /// Total storable water across all reservoirs, in hm3.
    pub fn total_storage(&self) -> f64 {
        self.hydros.iter().map(|h| h.max_storage).sum()
    }
}

/// Herfindahl-Hirschman concentration index: the sum of squared shares.
/// Shares must sum to one within 1e-9.
pub fn herfindahl_index(shares: &[f64]) -> Result<f64, SystemError> {
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SystemError::BadShares(total));
    }
    Ok(shares.iter().map(|s| s * s).sum())
}
