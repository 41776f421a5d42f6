use std::fmt::Write as _;
use std::path::Path;

use moe_workbench::kv_attention::KVCache;
use moe_workbench::model::{
    build_model, load_checkpoint, save_checkpoint, train_step, Model, OptimizerState, StepReport,
};
use moe_workbench::routing::{expert_load_stats, LoadStats};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{csv, full, json, Format};

/// Random token sequences the demo memorises; seeded from the root seed.
pub fn demo_sequences(cfg: &RunConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    (0..cfg.train.sequences)
        .map(|_| (0..cfg.train.seq_len).map(|_| rng.random_range(0..cfg.model.vocab_size)).collect())
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<StepReport>,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let mut model = build_model(&cfg.model)?;
    let data = demo_sequences(cfg);
    let per_step = (data.len() * (cfg.train.seq_len - 1)) as f64;
    let total = cfg.lr.total_tokens.unwrap_or(per_step * cfg.train.steps as f64);
    let sched = cfg.lr.schedule(cfg.model.routing.num_specialized_experts, total)?;
    let mut state = OptimizerState::new(&model, cfg.optimizer)?;
    let mut reports = Vec::with_capacity(cfg.train.steps);
    for i in 0..cfg.train.steps {
        reports.push(train_step(&mut model, &data, &sched, &mut state, (i as f64 * per_step).min(total))?);
    }
    Ok(TrainOutcome { model, reports })
}

pub fn train_demo(cfg: &RunConfig, checkpoint: Option<&Path>, format: Format) -> Result<String, CliError> {
    let TrainOutcome { model, reports } = train(cfg)?;
    if let Some(path) = checkpoint {
        save_checkpoint(&model, reports.len() as u64, path)?;
    }
    let first = reports.first().map(|r| r.ce_loss).unwrap_or(f64::NAN);
    let last = reports.last().map(|r| r.ce_loss).unwrap_or(f64::NAN);
    Ok(match format {
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                seed: u64,
                parameters: usize,
                initial_ce_loss: f64,
                final_ce_loss: f64,
                steps: &'a [StepReport],
            }
            json(
                "train_demo",
                &Body {
                    seed: cfg.seed,
                    parameters: model.param_count(),
                    initial_ce_loss: first,
                    final_ce_loss: last,
                    steps: &reports,
                },
            )?
        }
        Format::Csv => csv(
            &[
                "step",
                "tokens_seen",
                "ce_loss",
                "balance_loss",
                "objective",
                "lr_shared",
                "lr_specialized",
                "lr_non_expert",
                "primary",
                "recycled",
                "dropped",
            ],
            reports.iter().map(|r| {
                [
                    r.step.to_string(),
                    full(r.tokens_seen),
                    full(r.ce_loss),
                    full(r.balance_loss),
                    full(r.objective),
                    full(r.lr.shared),
                    full(r.lr.specialized),
                    full(r.lr.non_expert),
                    r.routing.primary.to_string(),
                    r.routing.recycled.to_string(),
                    r.routing.dropped.to_string(),
                ]
            }),
        ),
        Format::Human => {
            let mut s = format!("{} parameters, {} steps, seed {}\n", model.param_count(), reports.len(), cfg.seed);
            let _ = writeln!(
                s,
                "{:>5} {:>10} {:>10} {:>11} {:>11} {:>9} {:>8}",
                "step", "ce_loss", "balance", "lr_shared", "lr_spec", "recycled", "dropped"
            );
            let every = (reports.len() / 10).max(1);
            for r in reports.iter().filter(|r| r.step == 1 || (r.step as usize).is_multiple_of(every)) {
                let _ = writeln!(
                    s,
                    "{:>5} {:>10.5} {:>10.5} {:>11.4e} {:>11.4e} {:>9} {:>8}",
                    r.step,
                    r.ce_loss,
                    r.balance_loss,
                    r.lr.shared,
                    r.lr.specialized,
                    r.routing.recycled,
                    r.routing.dropped
                );
            }
            let _ = writeln!(s, "ce_loss {first:.5} -> {last:.5}");
            if let Some(p) = checkpoint {
                let _ = writeln!(s, "checkpoint written to {}", p.display());
            }
            s
        }
    })
}

pub fn parse_prompt(prompt: &str) -> Result<Vec<usize>, CliError> {
    prompt
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("bad token id `{t}` in --prompt"))))
        .collect()
}

pub fn infer_demo(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    prompt: &[usize],
    generate: usize,
    format: Format,
) -> Result<String, CliError> {
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None => build_model(&cfg.model)?,
    };
    if prompt.is_empty() {
        return Err(CliError::Usage("--prompt needs at least one token".into()));
    }
    let layout = model.config().kv_layout();
    let mut cache = KVCache::new(layout, prompt.len() + generate)?;
    let vocab = model.config().vocab_size;
    let mut routing = LoadStats { experts: Vec::new(), primary: 0, recycled: 0, dropped: 0, slots: 0 };
    let mut out = model.forward(prompt, &mut cache)?;
    let mut generated = Vec::with_capacity(generate);
    for step in 0..generate {
        for plan in &out.plans {
            routing.merge(&expert_load_stats(plan));
        }
        let last = &out.logits[out.logits.len() - vocab..];
        let next = (0..vocab).fold(0, |best, i| if last[i] > last[best] { i } else { best });
        generated.push(next);
        if step + 1 < generate {
            out = model.forward(&[next], &mut cache)?;
        }
    }
    if generate == 0 {
        for plan in &out.plans {
            routing.merge(&expert_load_stats(plan));
        }
    }
    let positions = cache.len(0)?;
    let cache_bytes = cache.stored_bytes();
    Ok(match format {
        Format::Json | Format::Csv => {
            #[derive(Serialize)]
            struct Body<'a> {
                prompt: &'a [usize],
                generated: &'a [usize],
                cached_positions: usize,
                cache_bytes: u64,
                routing: &'a LoadStats,
            }
            json(
                "infer_demo",
                &Body { prompt, generated: &generated, cached_positions: positions, cache_bytes, routing: &routing },
            )?
        }
        Format::Human => {
            let mut s = format!("prompt    {prompt:?}\ngenerated {generated:?}\n");
            let _ = writeln!(s, "kv cache: {cache_bytes} bytes for {positions} positions");
            let _ = writeln!(
                s,
                "routing: primary {}  recycled {}  dropped {}",
                routing.primary, routing.recycled, routing.dropped
            );
            s
        }
    })
}
