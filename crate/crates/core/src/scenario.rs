//! A network drop together with everything derived from it.

use crate::error::Result;
use crate::estimation::{assign_pilots, estimation_statistics, EstimationStatistics, PilotAssignment, PilotPolicy};
use crate::model::{build_network, NetworkModel, PhaseStatistics, SystemConfig};

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: SystemConfig,
    pub net: NetworkModel,
    pub pilots: PilotAssignment,
    pub phases: PhaseStatistics,
    pub stats: EstimationStatistics,
}

impl Scenario {
    /// Draws the network from `config.seed` with round-robin pilots.
    pub fn build(config: &SystemConfig) -> Result<Self> {
        Self::build_with(config, PilotPolicy::RoundRobin)
    }

    pub fn build_with(config: &SystemConfig, policy: PilotPolicy) -> Result<Self> {
        let net = build_network(config)?;
        let pilots = assign_pilots(config.num_ues, config.tau_p, policy)?;
        let phases = PhaseStatistics::from_config(config);
        Self::from_parts(config.clone(), net, pilots, phases)
    }

    pub fn from_parts(
        config: SystemConfig,
        net: NetworkModel,
        pilots: PilotAssignment,
        phases: PhaseStatistics,
    ) -> Result<Self> {
        let stats = estimation_statistics(&net, &pilots, &phases, &config)?;
        Ok(Self { config, net, pilots, phases, stats })
    }

    /// Same drop with different phase statistics.
    pub fn with_phases(&self, phases: PhaseStatistics) -> Result<Self> {
        Self::from_parts(self.config.clone(), self.net.clone(), self.pilots.clone(), phases)
    }

    /// Same drop with the delay phases replaced.
    pub fn with_net(&self, net: NetworkModel) -> Result<Self> {
        Self::from_parts(self.config.clone(), net, self.pilots.clone(), self.phases)
    }

    pub fn lambda(&self) -> usize {
        self.config.lambda()
    }
}

/// Hex SHA-256 of the canonical JSON encoding of `config`.
pub fn config_hash(config: &SystemConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(config).expect("config serialises");
    hex::encode(Sha256::digest(json.as_bytes()))
}
