use std::fmt::Write as _;

use moe_workbench::routing::{
    expert_load_stats, gate_scores, plan_dispatch_with_capacity, DispatchPlan, LoadStats, RoutingConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::CliError;
use crate::output::{json, Format};

#[derive(Debug, Clone)]
pub struct RouteSim {
    pub experts: usize,
    pub tokens: usize,
    pub top_k: usize,
    /// Explicit per-expert capacity; otherwise derived from `capacity_factor`.
    pub capacity: Option<usize>,
    pub capacity_factor: f64,
    pub all_to_one: bool,
    pub recycle: bool,
    pub seed: u64,
}

/// Router logits for the simulation. `all_to_one` ranks expert 0 first for
/// every token; otherwise logits are uniform in `[-2, 2)` from `seed`.
fn logits(sim: &RouteSim) -> Vec<f64> {
    if sim.all_to_one {
        return (0..sim.tokens).flat_map(|_| (0..sim.experts).map(|e| -(e as f64))).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    (0..sim.tokens * sim.experts).map(|_| rng.random_range(-2.0..2.0)).collect()
}

pub fn route_sim(sim: &RouteSim, format: Format) -> Result<String, CliError> {
    let cfg = RoutingConfig {
        num_shared_experts: 1,
        num_specialized_experts: sim.experts,
        top_k: sim.top_k,
        capacity_factor: sim.capacity_factor,
        recycle_enabled: sim.recycle,
    };
    cfg.validate()?;
    if sim.tokens == 0 {
        return Err(CliError::Usage("--tokens must be at least 1".into()));
    }
    let gates = gate_scores(&logits(sim), &cfg)?;
    let capacity = sim.capacity.unwrap_or_else(|| cfg.capacity(sim.tokens));
    let plan = plan_dispatch_with_capacity(&gates, sim.tokens, &cfg, capacity, sim.seed)?;
    let stats = expert_load_stats(&plan);
    Ok(match format {
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                plan: &'a DispatchPlan,
                stats: &'a LoadStats,
            }
            json("route_sim", &Body { plan: &plan, stats: &stats })?
        }
        Format::Csv => crate::output::csv(
            &["expert", "primary", "recycled", "free_capacity"],
            stats.experts.iter().enumerate().map(|(e, l)| {
                [e.to_string(), l.primary_count.to_string(), l.recycled_count.to_string(), l.free_capacity.to_string()]
            }),
        ),
        Format::Human => {
            let mut s = format!(
                "{} tokens, {} experts, top-{}, capacity {}, recycle {}, seed {}\n",
                sim.tokens,
                sim.experts,
                sim.top_k,
                capacity,
                if sim.recycle { "on" } else { "off" },
                sim.seed
            );
            let _ = writeln!(
                s,
                "primary {}  recycled {}  dropped {}  (slots {})",
                stats.primary, stats.recycled, stats.dropped, stats.slots
            );
            let _ = writeln!(s, "{:>6} {:>8} {:>9} {:>5}", "expert", "primary", "recycled", "free");
            for (e, l) in stats.experts.iter().enumerate() {
                let _ = writeln!(s, "{e:>6} {:>8} {:>9} {:>5}", l.primary_count, l.recycled_count, l.free_capacity);
            }
            s
        }
    })
}
