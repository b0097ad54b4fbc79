//! Result-directory writers. Every file is written atomically (temp file
//! in the target directory, then rename), so an interrupted run never
//! leaves a half-written results directory.

use crate::equilibrium::EquilibriumReport;
use crate::market::BidSurface;
use crate::system::SystemModel;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// `stage,sample,price` with 1-based indices.
pub fn prices_csv(prices: &[Vec<f64>]) -> String {
    let mut out = String::from("stage,sample,price\n");
    for (t, per_sample) in prices.iter().enumerate() {
        for (s, p) in per_sample.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", t + 1, s + 1, p);
        }
    }
    out
}

/// `iteration,agent,stage,sample,price,quantity` over the bid history
/// (iteration 0 is the centralized seed).
pub fn bids_csv(history: &[BidSurface]) -> String {
    let mut out = String::from("iteration,agent,stage,sample,price,quantity\n");
    for (it, surface) in history.iter().enumerate() {
        for (i, &agent) in surface.agents.iter().enumerate() {
            for (t, per_sample) in surface.prices[i].iter().enumerate() {
                for (s, p) in per_sample.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        it,
                        agent,
                        t + 1,
                        s + 1,
                        p,
                        surface.quantities[i][t][s]
                    );
                }
            }
        }
    }
    out
}

/// `stage,sample,agent,quantity`.
pub fn dispatch_csv(agents: &[u32], dispatch: &[Vec<Vec<f64>>]) -> String {
    let mut out = String::from("stage,sample,agent,quantity\n");
    if let Some(first) = dispatch.first() {
        for t in 0..first.len() {
            for s in 0..first[t].len() {
                for (i, &agent) in agents.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{}", t + 1, s + 1, agent, dispatch[i][t][s]);
                }
            }
        }
    }
    out
}

/// `iteration,max_rel_dprice,max_rel_dquantity`.
pub fn convergence_csv(report: &EquilibriumReport) -> String {
    let mut out = String::from("iteration,max_rel_dprice,max_rel_dquantity\n");
    for r in &report.convergence {
        let _ = writeln!(out, "{},{},{}", r.iteration, r.max_rel_dprice, r.max_rel_dquantity);
    }
    out
}

/// Aggregate report as deterministic JSON.
pub fn report_json(system: &SystemModel, report: &EquilibriumReport) -> String {
    let mut root = serde_json::Map::new();
    root.insert("converged".into(), report.converged.into());
    root.insert("iterations".into(), report.iterations.into());
    root.insert("mean_price".into(), json_f64(report.mean_price));
    root.insert(
        "centralized_mean_price".into(),
        json_f64(report.centralized_mean_price),
    );
    root.insert(
        "mean_spillage_fraction".into(),
        json_f64(report.spillage_fraction),
    );
    root.insert(
        "mean_storage_fraction".into(),
        json_f64(report.storage_fraction),
    );
    root.insert(
        "centralized_mean_spillage_fraction".into(),
        json_f64(report.centralized_spillage_fraction),
    );
    root.insert(
        "centralized_mean_storage_fraction".into(),
        json_f64(report.centralized_storage_fraction),
    );
    let mut revenue = serde_json::Map::new();
    let mut captured = serde_json::Map::new();
    for (&agent, &v) in &report.revenue {
        revenue.insert(agent.to_string(), json_f64(v));
    }
    for (&agent, &v) in &report.revenue_per_mwh {
        captured.insert(agent.to_string(), json_f64(v));
    }
    root.insert("revenue_per_sample".into(), revenue.into());
    root.insert("revenue_per_mwh".into(), captured.into());
    let mut contracts = serde_json::Map::new();
    for (&agent, c) in &report.contracts {
        let mut entry = serde_json::Map::new();
        entry.insert("price".into(), json_f64(c.price));
        entry.insert(
            "quantities".into(),
            c.quantities.iter().map(|&q| json_f64(q)).collect::<Vec<_>>().into(),
        );
        contracts.insert(agent.to_string(), entry.into());
    }
    root.insert("contracts".into(), contracts.into());
    root.insert(
        "deficit_agent".into(),
        system.system_agent_id.to_string().into(),
    );
    serde_json::to_string_pretty(&serde_json::Value::Object(root)).expect("serializable") + "\n"
}

fn json_f64(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}
