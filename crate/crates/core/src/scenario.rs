//! Scenario generation and storage for the uncertain processes: inflows
//! through a periodic autoregressive model, stagewise-independent
//! renewable availability, and optional exogenous spot prices.
//!
//! Randomness comes from a single seeded ChaCha8 stream with a fixed draw
//! order (stage, then sample, then hydro noises, then renewable draws), so
//! a seed pins every scenario bit-for-bit on any platform.

use crate::system::SystemModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::Deserialize;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    /// Strictly positive noise; parameters are matched by moments.
    Lognormal,
    /// Gaussian noise; generated inflows are truncated at zero.
    Normal,
}

/// Noise parameters for one hydro plant and one stage of the year.
#[derive(Clone, Copy, Debug, Deserialize)]
pub struct NoiseParams {
    pub mean: f64,
    pub std_dev: f64,
    pub distribution: NoiseDistribution,
}

/// How renewable availability is drawn.
#[derive(Clone, Debug, Default)]
pub enum RenewableSpec {
    /// Uniform on [0, capacity] per plant and stage.
    #[default]
    UniformCapacity,
    /// Empirical per-stage values, cycled over samples: `[stage][row][plant]`.
    Table(Vec<Vec<Vec<f64>>>),
}

/// Inflow noise description: per hydro (system order), per stage-of-year.
/// The seasonal cycle repeats with the period given by the parameter rows.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub hydro_params: Vec<Vec<NoiseParams>>,
    pub renewables: RenewableSpec,
}

#[derive(Deserialize)]
struct NoiseFileEntry {
    hydro_id: u32,
    stages: Vec<NoiseParams>,
}

#[derive(Deserialize)]
struct NoiseFile {
    hydros: Vec<NoiseFileEntry>,
}

#[derive(Error, Debug)]
pub enum ScenarioError {
    #[error("lag vector length {got} does not match coefficient count {expected}")]
    LagMismatch { got: usize, expected: usize },
    #[error("noise model misses hydro {0}")]
    MissingHydro(u32),
    #[error("noise parameters invalid for hydro index {hydro}: {reason}")]
    BadParams { hydro: usize, reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse noise file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("scenario table is ragged or empty: {0}")]
    BadTable(String),
}

impl NoiseModel {
    /// Zero-noise model: inflows follow the deterministic seasonal means.
    pub fn deterministic(means_per_hydro: &[Vec<f64>]) -> Self {
        Self {
            hydro_params: means_per_hydro
                .iter()
                .map(|means| {
                    means
                        .iter()
                        .map(|&m| NoiseParams {
                            mean: m,
                            std_dev: 0.0,
                            distribution: NoiseDistribution::Normal,
                        })
                        .collect()
                })
                .collect(),
            renewables: RenewableSpec::UniformCapacity,
        }
    }

    /// Parses the JSON noise file, aligning entries with the system's
    /// hydro order.
    pub fn from_json(system: &SystemModel, text: &str) -> Result<Self, ScenarioError> {
        let file: NoiseFile = serde_json::from_str(text)?;
        let mut hydro_params = Vec::with_capacity(system.hydros.len());
        for h in &system.hydros {
            let entry = file
                .hydros
                .iter()
                .find(|e| e.hydro_id == h.id)
                .ok_or(ScenarioError::MissingHydro(h.id))?;
            hydro_params.push(entry.stages.clone());
        }
        Ok(Self {
            hydro_params,
            renewables: RenewableSpec::UniformCapacity,
        })
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        for (i, params) in self.hydro_params.iter().enumerate() {
            if params.is_empty() {
                return Err(ScenarioError::BadParams {
                    hydro: i,
                    reason: "no seasonal parameters".into(),
                });
            }
            for p in params {
                if p.std_dev < 0.0 {
                    return Err(ScenarioError::BadParams {
                        hydro: i,
                        reason: format!("negative standard deviation {}", p.std_dev),
                    });
                }
                if p.distribution == NoiseDistribution::Lognormal && p.std_dev > 0.0 && p.mean <= 0.0
                {
                    return Err(ScenarioError::BadParams {
                        hydro: i,
                        reason: "lognormal noise needs a positive mean".into(),
                    });
                }
            }
        }
        Ok(())
    }

    fn draw(&self, hydro: usize, stage: usize, rng: &mut ChaCha8Rng) -> f64 {
        let params = &self.hydro_params[hydro];
        let p = params[stage % params.len()];
        if p.std_dev == 0.0 {
            return p.mean;
        }
        match p.distribution {
            NoiseDistribution::Normal => {
                Normal::new(p.mean, p.std_dev).expect("validated").sample(rng)
            }
            NoiseDistribution::Lognormal => {
                // Moment matching: the sampled noise has the configured
                // mean and standard deviation.
                let m2 = p.mean * p.mean;
                let s2 = p.std_dev * p.std_dev;
                let sigma2 = (1.0 + s2 / m2).ln();
                let mu = p.mean.ln() - 0.5 * sigma2;
                LogNormal::new(mu, sigma2.sqrt()).expect("validated").sample(rng)
            }
        }
    }
}

/// One inflow step: autoregression over the previous observations plus
/// noise, truncated at zero from below.
pub fn sample_inflow(prev_lags: &[f64], ar_lags: &[f64], noise: f64) -> Result<f64, ScenarioError> {
    if prev_lags.len() != ar_lags.len() {
        return Err(ScenarioError::LagMismatch {
            got: prev_lags.len(),
            expected: ar_lags.len(),
        });
    }
    let value: f64 = ar_lags
        .iter()
        .zip(prev_lags)
        .map(|(phi, lag)| phi * lag)
        .sum::<f64>()
        + noise;
    Ok(value.max(0.0))
}

/// Jointly indexed realizations over stages x samples. Inflow noises are
/// stored as the residuals that reproduce the (truncated) inflow paths
/// through the stage recursion, which is what the stage problems consume.
#[derive(Clone, Debug)]
pub struct ScenarioSet {
    pub stages: usize,
    pub samples: usize,
    /// `[stage][sample][hydro]`, hm3.
    pub inflows: Vec<Vec<Vec<f64>>>,
    /// `[stage][sample][hydro]` residual noises.
    pub noises: Vec<Vec<Vec<f64>>>,
    /// `[stage][sample][renewable]`, MWh.
    pub renewables: Vec<Vec<Vec<f64>>>,
    /// Optional exogenous spot prices `[stage][sample]`.
    pub prices: Option<Vec<Vec<f64>>>,
    /// Optional exogenous bid surfaces, jointly indexed with the rest.
    pub bids: Option<crate::market::BidSurface>,
}

impl ScenarioSet {
    pub fn noise(&self, stage: usize, sample: usize) -> &[f64] {
        &self.noises[stage][sample]
    }

    pub fn renewable_bound(&self, stage: usize, sample: usize) -> &[f64] {
        &self.renewables[stage][sample]
    }
}

/// Generates a scenario set: PAR inflows (stagewise-independent noise,
/// lags recursed per sample) and independent renewable draws.
/// Deterministic for a fixed seed.
pub fn generate(
    system: &SystemModel,
    noise: &NoiseModel,
    samples: usize,
    seed: u64,
) -> Result<ScenarioSet, ScenarioError> {
    assert!(samples >= 1, "need at least one sample");
    noise.validate()?;
    let stages = system.stages;
    let n_hydro = system.hydros.len();
    let n_ren = system.renewables.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut inflows = vec![vec![vec![0.0; n_hydro]; samples]; stages];
    let mut noises = vec![vec![vec![0.0; n_hydro]; samples]; stages];
    let mut renewables = vec![vec![vec![0.0; n_ren]; samples]; stages];

    // Lag windows per sample per hydro, most recent first.
    let mut lags: Vec<Vec<Vec<f64>>> = (0..samples)
        .map(|_| {
            system
                .hydros
                .iter()
                .map(|h| h.initial_lagged_inflows.clone())
                .collect()
        })
        .collect();

    for t in 0..stages {
        for s in 0..samples {
            for (j, h) in system.hydros.iter().enumerate() {
                let eps = noise.draw(j, t, &mut rng);
                let a = sample_inflow(&lags[s][j], &h.ar_lags, eps)?;
                inflows[t][s][j] = a;
                // Residual consistent with the truncated path.
                let ar_part: f64 = h
                    .ar_lags
                    .iter()
                    .zip(&lags[s][j])
                    .map(|(phi, lag)| phi * lag)
                    .sum();
                noises[t][s][j] = a - ar_part;
                if !h.ar_lags.is_empty() {
                    lags[s][j].rotate_right(1);
                    lags[s][j][0] = a;
                }
            }
            for (k, r) in system.renewables.iter().enumerate() {
                renewables[t][s][k] = match &noise.renewables {
                    RenewableSpec::UniformCapacity => rng.random::<f64>() * r.capacity,
                    RenewableSpec::Table(table) => {
                        let rows = &table[t % table.len()];
                        rows[s % rows.len()][k].min(r.capacity)
                    }
                };
            }
        }
    }

    Ok(ScenarioSet {
        stages,
        samples,
        inflows,
        noises,
        renewables,
        prices: None,
        bids: None,
    })
}

/// Writes one process table as CSV rows `stage,sample,entity,value`.
/// Stages and samples are 1-based in the file.
pub fn table_to_csv<W: Write>(
    table: &[Vec<Vec<f64>>],
    entity_ids: &[u32],
    out: W,
) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "sample", "entity", "value"])?;
    for (t, per_sample) in table.iter().enumerate() {
        for (s, values) in per_sample.iter().enumerate() {
            for (j, v) in values.iter().enumerate() {
                w.write_record([
                    (t + 1).to_string(),
                    (s + 1).to_string(),
                    entity_ids[j].to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a `stage,sample,entity,value` CSV into `[stage][sample][entity]`,
/// with entities ordered by `entity_ids`.
pub fn table_from_csv<R: Read>(
    entity_ids: &[u32],
    input: R,
) -> Result<Vec<Vec<Vec<f64>>>, ScenarioError> {
    #[derive(Deserialize)]
    struct Record {
        stage: usize,
        sample: usize,
        entity: u32,
        value: f64,
    }
    let mut reader = csv::Reader::from_reader(input);
    let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
    let mut stages = 0;
    let mut samples = 0;
    for record in reader.deserialize() {
        let r: Record = record?;
        let entity_idx = entity_ids
            .iter()
            .position(|&id| id == r.entity)
            .ok_or_else(|| ScenarioError::BadTable(format!("unknown entity {}", r.entity)))?;
        if r.stage == 0 || r.sample == 0 {
            return Err(ScenarioError::BadTable(
                "stage and sample are 1-based".into(),
            ));
        }
        stages = stages.max(r.stage);
        samples = samples.max(r.sample);
        cells.push((r.stage - 1, r.sample - 1, entity_idx, r.value));
    }
    if stages == 0 {
        return Err(ScenarioError::BadTable("no rows".into()));
    }
    let mut table = vec![vec![vec![f64::NAN; entity_ids.len()]; samples]; stages];
    for (t, s, j, v) in cells {
        table[t][s][j] = v;
    }
    for (t, per_sample) in table.iter().enumerate() {
        for (s, values) in per_sample.iter().enumerate() {
            if values.iter().any(|v| v.is_nan()) {
                return Err(ScenarioError::BadTable(format!(
                    "missing value at stage {} sample {}",
                    t + 1,
                    s + 1
                )));
            }
        }
    }
    Ok(table)
}

/// Rebuilds a scenario set from imported inflow/renewable tables;
/// residual noises are recomputed against the imported paths.
pub fn from_tables(
    system: &SystemModel,
    inflows: Vec<Vec<Vec<f64>>>,
    renewables: Vec<Vec<Vec<f64>>>,
    prices: Option<Vec<Vec<f64>>>,
) -> Result<ScenarioSet, ScenarioError> {
    let stages = inflows.len();
    let samples = inflows.first().map_or(0, |s| s.len());
    if stages != system.stages || samples == 0 {
        return Err(ScenarioError::BadTable(format!(
            "expected {} stages with at least 1 sample, got {} x {}",
            system.stages, stages, samples
        )));
    }
    let mut noises = vec![vec![vec![0.0; system.hydros.len()]; samples]; stages];
    for s in 0..samples {
        let mut lags: Vec<Vec<f64>> = system
            .hydros
            .iter()
            .map(|h| h.initial_lagged_inflows.clone())
            .collect();
        for t in 0..stages {
            for (j, h) in system.hydros.iter().enumerate() {
                let ar_part: f64 = h
                    .ar_lags
                    .iter()
                    .zip(&lags[j])
                    .map(|(phi, lag)| phi * lag)
                    .sum();
                noises[t][s][j] = inflows[t][s][j] - ar_part;
                if !h.ar_lags.is_empty() {
                    lags[j].rotate_right(1);
                    lags[j][0] = inflows[t][s][j];
                }
            }
        }
    }
    Ok(ScenarioSet {
        stages,
        samples,
        inflows,
        noises,
        renewables,
        prices,
        bids: None,
    })
}
