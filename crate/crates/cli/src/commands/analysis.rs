//! kv-report, budget, fit, isoflop and lr-plan: closed-form or fitted
//! quantities, no model state.

use std::fmt::Write as _;
use std::path::Path;

use moe_workbench::expert_lr::{lr_at, ParamGroup};
use moe_workbench::kv_attention::{kv_bytes_per_token, KVCacheLayout, Mechanism};
use moe_workbench::scaling::{
    compute_budget, fit_power_law, isoflop_optima, min_budget_from_ratio, IsoFlopAxis, IsoFlopOptimum, IsoFlopPoint,
    PowerLawFit,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{csv, full, json, Format};

#[derive(Debug, Serialize)]
struct KvRow {
    mechanism: &'static str,
    bytes_per_token: u64,
    fraction_of_mha: f64,
    saving_vs_mha: f64,
}

pub fn kv_report(cfg: &RunConfig, format: Format) -> Result<String, CliError> {
    let layout = cfg.model.kv_layout();
    let mha = kv_bytes_per_token(&layout, Mechanism::Mha)?;
    let rows = Mechanism::ALL
        .iter()
        .map(|&m| {
            let bytes = kv_bytes_per_token(&layout, m)?;
            let fraction = bytes as f64 / mha as f64;
            Ok(KvRow {
                mechanism: m.name(),
                bytes_per_token: bytes,
                fraction_of_mha: fraction,
                saving_vs_mha: 1.0 - fraction,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(match format {
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                layout: KVCacheLayout,
                rows: &'a [KvRow],
            }
            json("kv_report", &Body { layout, rows: &rows })?
        }
        Format::Csv => csv(
            &["mechanism", "bytes_per_token", "fraction_of_mha", "saving_vs_mha"],
            rows.iter().map(|r| {
                [r.mechanism.to_string(), r.bytes_per_token.to_string(), full(r.fraction_of_mha), full(r.saving_vs_mha)]
            }),
        ),
        Format::Human => {
            let l = layout;
            let mut s = format!(
                "KV cache per token: {} layers, {} heads, {} kv groups, head dim {}, share period {}, {} bytes/element\n",
                l.layers, l.n_h, l.n_g, l.d_h, l.share_period, l.bytes_per_element
            );
            let _ = writeln!(s, "{:<10} {:>14} {:>9} {:>9}", "mechanism", "bytes/token", "vs MHA", "saving");
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{:<10} {:>14} {:>8.2}% {:>8.2}%",
                    r.mechanism,
                    r.bytes_per_token,
                    100.0 * r.fraction_of_mha,
                    100.0 * r.saving_vs_mha
                );
            }
            s
        }
    })
}

#[derive(Debug, Serialize)]
struct Budget {
    activated_params: f64,
    tokens: f64,
    budget: f64,
    batch_over_critical: Option<f64>,
    min_budget: Option<f64>,
}

pub fn budget(n: f64, d: f64, ratio: Option<f64>, format: Format) -> Result<String, CliError> {
    let c = compute_budget(n, d)?;
    let c_min = ratio.map(|r| min_budget_from_ratio(c, r)).transpose()?;
    let b = Budget { activated_params: n, tokens: d, budget: c, batch_over_critical: ratio, min_budget: c_min };
    Ok(match format {
        Format::Json => json("budget", &b)?,
        Format::Csv => {
            let opt = |v: Option<f64>| v.map(full).unwrap_or_default();
            csv(
                &["activated_params", "tokens", "budget", "batch_over_critical", "min_budget"],
                [[full(n), full(d), full(c), opt(ratio), opt(c_min)]],
            )
        }
        Format::Human => {
            let mut s = format!("C = {c:.5e} FLOPs  (N = {n:e}, D = {d:e})\n");
            if let (Some(r), Some(m)) = (ratio, c_min) {
                let _ = writeln!(s, "C_min = {m:.5e} FLOPs  (B/B_crit = {r})");
            }
            s
        }
    })
}

pub fn read_measurements(path: &Path) -> Result<Vec<IsoFlopPoint>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::io("io.read", path, e))?;
    let header = reader.headers().map_err(|e| CliError::io("io.parse", path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["c_min", "n", "d", "loss"] {
        return Err(CliError::io(
            "io.parse",
            path,
            format!("expected header c_min,n,d,loss, got {}", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    reader.deserialize().map(|r| r.map_err(|e| CliError::io("io.parse", path, e))).collect()
}

fn y_label(axis: IsoFlopAxis) -> &'static str {
    match axis {
        IsoFlopAxis::Params => "n_opt",
        IsoFlopAxis::Tokens => "d_opt",
    }
}

pub fn isoflop(points: &[IsoFlopPoint], axis: IsoFlopAxis, format: Format) -> Result<String, CliError> {
    let optima = isoflop_optima(points, axis)?;
    Ok(match format {
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                axis: IsoFlopAxis,
                optima: &'a [IsoFlopOptimum],
            }
            json("isoflop", &Body { axis, optima: &optima })?
        }
        Format::Csv => csv(
            &["c_min", "log10_opt", y_label(axis), "loss_opt", "samples", "extrapolated"],
            optima.iter().map(|o| {
                [
                    full(o.c_min),
                    full(o.log10_opt),
                    full(o.y_opt),
                    full(o.loss_opt),
                    o.samples.to_string(),
                    o.extrapolated.to_string(),
                ]
            }),
        ),
        Format::Human => {
            let mut s = format!("{:>12} {:>12} {:>10} {:>8}\n", "C_min", y_label(axis), "loss", "points");
            for o in &optima {
                let flag = if o.extrapolated { "  (vertex outside sampled range)" } else { "" };
                let _ =
                    writeln!(s, "{:>12.4e} {:>12.4e} {:>10.5} {:>8}{flag}", o.c_min, o.y_opt, o.loss_opt, o.samples);
            }
            s
        }
    })
}

/// isoFLOP minima per budget, then a power law through them. Always JSON.
pub fn fit(points: &[IsoFlopPoint], axis: IsoFlopAxis, include_optima: bool) -> Result<String, CliError> {
    let optima = isoflop_optima(points, axis)?;
    let pairs: Vec<(f64, f64)> = optima.iter().map(|o| (o.c_min, o.y_opt)).collect();
    let law = fit_power_law(&pairs)?;
    #[derive(Serialize)]
    struct Body<'a> {
        axis: IsoFlopAxis,
        #[serde(flatten)]
        law: PowerLawFit,
        budgets: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        optima: Option<&'a [IsoFlopOptimum]>,
    }
    json("fit", &Body { axis, law, budgets: optima.len(), optima: include_optima.then_some(optima.as_slice()) })
}

pub fn lr_plan(cfg: &RunConfig, total_tokens: f64, points: usize) -> Result<String, CliError> {
    if points < 2 {
        return Err(CliError::Usage("--points must be at least 2".into()));
    }
    let n = cfg.model.routing.num_specialized_experts;
    let sched = cfg.lr.schedule(n, total_tokens)?;
    let mut rows = Vec::with_capacity(points * ParamGroup::ALL.len());
    for i in 0..points {
        let t = if i + 1 == points { total_tokens } else { total_tokens * i as f64 / (points - 1) as f64 };
        for g in ParamGroup::ALL {
            rows.push([full(t), g.name().to_string(), full(lr_at(&sched, t, g)?)]);
        }
    }
    Ok(csv(&["tokens_seen", "group", "lr"], rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn kv_report_has_the_savings_row() {
        let s = kv_report(&preset("hunyuan-large").unwrap(), Format::Human).unwrap();
        let row = s.lines().find(|l| l.starts_with("GQA+CLA")).unwrap();
        assert!(row.contains("81920") && row.contains("95.00%"), "{row}");
        let csv = kv_report(&preset("hunyuan-large").unwrap(), Format::Csv).unwrap();
        assert!(csv.starts_with("mechanism,bytes_per_token,fraction_of_mha,saving_vs_mha\n"));
        assert!(csv.contains("MHA,1638400,"));
    }

    #[test]
    fn budget_prints_reference_value() {
        let s = budget(52e9, 7e12, None, Format::Human).unwrap();
        assert!(s.starts_with("C = 3.49237e24"), "{s}");
        let v: serde_json::Value = serde_json::from_str(&budget(52e9, 7e12, Some(0.1), Format::Json).unwrap()).unwrap();
        assert!((v["budget"].as_f64().unwrap() / 3.49237e24 - 1.0).abs() < 1e-12);
        assert!(v["min_budget"].as_f64().unwrap() < v["budget"].as_f64().unwrap());
    }

    #[test]
    fn lr_plan_lists_every_group() {
        let cfg = preset("hunyuan-large").unwrap();
        let s = lr_plan(&cfg, 7e12, 3).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "tokens_seen,group,lr");
        assert_eq!(lines.len(), 1 + 3 * 3);
        assert!(lines[1].starts_with("0.0000000000000000e0,shared,"));
    }
}
