use std::fs;
use std::path::Path;

use fedldp::accountants::{calibrate as run_calibration, CalibrationRequest};
use fedldp::fedsgd_sim::{run_simulation, SimConfig};
use fedldp::tradeoff::{
    epsilon_grid, homogeneous_aggregate, rate_upper_bound, reference_comparison, reference_ordering_matches,
    sweep as run_sweep, utility_lower_bound, validity_caps, LossRegularity, SweepConfig, TradeoffPoint,
    REFERENCE_CAPS, REFERENCE_EPSILON, REFERENCE_ROUNDS,
};
use fedldp::validation::run_all;
use fedldp::PrivacyBudget;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::output::{g17, opt_bool, opt_g17, OutputDir};
use crate::svg::{HLine, LinePlot, Series};
use crate::{CalibrateArgs, CliError, ModelArgs, PlotArgs, SimulateArgs, SweepArgs, ValidateArgs};

pub const SWEEP_COLUMNS: [&str; 11] = [
    "method",
    "T",
    "epsilon",
    "sigma_k_sq",
    "sigma_agg_sq",
    "utility_lb",
    "rate_ub_bits",
    "q_ok",
    "sigma_ok",
    "epsilon_ok",
    "error",
];

pub const TRAJECTORY_COLUMNS: [&str; 5] = ["round", "mean_loss_gap", "stderr_loss_gap", "mean_mse", "stderr_mse"];

fn regularity(m: &ModelArgs) -> Result<LossRegularity, CliError> {
    Ok(LossRegularity::new(m.mu, m.lambda, m.grad_bound, m.clip, m.dim)?)
}

fn model_json(m: &ModelArgs) -> serde_json::Value {
    json!({
        "users": m.users,
        "dim": m.dim,
        "clip": m.clip,
        "grad_bound": m.grad_bound,
        "lambda": m.lambda,
        "mu": m.mu,
    })
}

pub fn calibrate(a: CalibrateArgs) -> Result<(), CliError> {
    let reg = regularity(&a.model)?;
    if a.model.users == 0 {
        return Err(CliError::domain("--users must be at least 1"));
    }
    let budget = PrivacyBudget::new(a.epsilon, a.delta)?;
    let req = CalibrationRequest::new(a.method, budget, a.q, a.rounds)?.with_delta_tilde(a.delta_tilde);
    let res = run_calibration(&req)?;
    let sigma_agg_sq = homogeneous_aggregate(a.model.users, a.q, res.sigma());
    let record = json!({
        "method": res.method,
        "epsilon": a.epsilon,
        "delta": a.delta,
        "q": a.q,
        "rounds": a.rounds,
        "sigma_sq": res.sigma_sq,
        "sigma": res.sigma(),
        "validity": res.validity,
        "per_round": res.per_round,
        "sigma_agg_sq": sigma_agg_sq,
        "utility_lb": utility_lower_bound(a.rounds, &reg, sigma_agg_sq),
        "rate_ub_bits": rate_upper_bound(&reg, res.sigma()),
    });
    println!("{}", serde_json::to_string_pretty(&record).expect("serializable"));
    if let Some(out) = &a.out {
        let mut dir = OutputDir::create(out)?;
        dir.write_json("calibration.json", &record)?;
        let mut params = json!({
            "epsilon": a.epsilon,
            "delta": a.delta,
            "q": a.q,
            "rounds": a.rounds,
            "method": a.method,
            "delta_tilde": a.delta_tilde,
        });
        params["model"] = model_json(&a.model);
        dir.finish("calibrate", None, params)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CapRecord {
    pub rounds: u64,
    pub sigma_sq_cap: f64,
    pub utility_cap: f64,
    pub rate_cap: f64,
}

fn sweep_csv(rows: &[TradeoffPoint]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let internal = |e: csv::Error| CliError::Internal(e.to_string());
    w.write_record(SWEEP_COLUMNS).map_err(internal)?;
    for r in rows {
        let v = r.validity;
        w.write_record([
            r.method.as_str().to_string(),
            r.rounds.to_string(),
            g17(r.epsilon),
            opt_g17(r.sigma_k_sq),
            opt_g17(r.sigma_agg_sq),
            opt_g17(r.utility_lb),
            opt_g17(r.rate_ub),
            opt_bool(v.map(|v| v.q_ok)),
            opt_bool(v.map(|v| v.sigma_ok)),
            opt_bool(v.map(|v| v.epsilon_ok)),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(internal)?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

pub fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let epsilons = if a.epsilon.is_empty() {
        epsilon_grid(a.eps_start, a.eps_stop, a.eps_step)
    } else {
        a.epsilon.clone()
    };
    let mut methods = a.method.clone();
    methods.dedup();
    let cfg = SweepConfig {
        methods,
        epsilons,
        delta: a.delta,
        q: a.q,
        rounds: a.rounds.clone(),
        users: a.model.users,
        regularity: regularity(&a.model)?,
        delta_tilde: a.delta_tilde,
    };
    if cfg.users == 0 {
        return Err(CliError::domain("--users must be at least 1"));
    }
    if !(cfg.q > 0.0 && cfg.q < 1.0) {
        return Err(CliError::domain(format!("--q must lie in (0, 1), got {}", cfg.q)));
    }
    let rows = run_sweep(&cfg)?;
    let caps: Vec<CapRecord> = cfg
        .rounds
        .iter()
        .map(|&t| {
            let c = validity_caps(cfg.q, t, &cfg.regularity, cfg.users);
            CapRecord {
                rounds: t,
                sigma_sq_cap: c.sigma_sq_cap,
                utility_cap: c.utility_cap,
                rate_cap: c.rate_cap,
            }
        })
        .collect();
    let comparisons = reference_comparison(&rows);
    let report = json!({
        "config": cfg,
        "rows": rows.len(),
        "valid_rows": rows.iter().filter(|r| r.is_valid()).count(),
        "error_rows": rows.iter().filter(|r| r.error.is_some()).count(),
        "caps": caps,
        "published_caps": {
            "sigma_sq": REFERENCE_CAPS.0,
            "utility": REFERENCE_CAPS.1,
            "rate_bits": REFERENCE_CAPS.2,
        },
        "reference_annotations": {
            "informational": true,
            "epsilon": REFERENCE_EPSILON,
            "rounds": REFERENCE_ROUNDS,
            "comparisons": comparisons,
            "ordering_matches": reference_ordering_matches(&comparisons),
        },
    });

    let mut dir = OutputDir::create(&a.out)?;
    dir.write("sweep.csv", &sweep_csv(&rows)?)?;
    dir.write_json("sweep_report.json", &report)?;
    if a.plot {
        let plot_rows: Vec<PlotRow> = rows.iter().map(PlotRow::from).collect();
        for (name, svg) in sweep_panels(&plot_rows, &caps, a.log_y) {
            dir.write(name, svg.as_bytes())?;
        }
    }
    let mut params = json!({
        "methods": cfg.methods,
        "epsilons": cfg.epsilons,
        "rounds": cfg.rounds,
        "delta": cfg.delta,
        "q": cfg.q,
        "delta_tilde": cfg.delta_tilde,
        "plot": a.plot,
        "log_y": a.log_y,
    });
    params["model"] = model_json(&a.model);
    dir.finish("sweep", None, params)?;
    eprintln!("{} rows written to {}", rows.len(), a.out.join("sweep.csv").display());
    Ok(())
}

/// The columns of a sweep row needed for plotting.
#[derive(Debug, Clone, Deserialize)]
pub struct PlotRow {
    pub method: String,
    #[serde(rename = "T")]
    pub rounds: u64,
    pub epsilon: f64,
    pub sigma_k_sq: Option<f64>,
    pub utility_lb: Option<f64>,
    #[serde(rename = "rate_ub_bits")]
    pub rate_ub: Option<f64>,
}

impl From<&TradeoffPoint> for PlotRow {
    fn from(p: &TradeoffPoint) -> Self {
        Self {
            method: p.method.to_string(),
            rounds: p.rounds,
            epsilon: p.epsilon,
            sigma_k_sq: p.sigma_k_sq,
            utility_lb: p.utility_lb,
            rate_ub: p.rate_ub,
        }
    }
}

fn series(rows: &[PlotRow], pick: impl Fn(&PlotRow) -> Option<f64>) -> Vec<Series> {
    let mut keys: Vec<(String, u64)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.rounds);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(m, t)| Series {
            name: format!("{m} T={t}"),
            points: rows
                .iter()
                .filter(|r| r.method == m && r.rounds == t)
                .filter_map(|r| pick(r).map(|y| (r.epsilon, y)))
                .collect(),
        })
        .collect()
}

pub fn sweep_panels(rows: &[PlotRow], caps: &[CapRecord], log_y: bool) -> Vec<(&'static str, String)> {
    let mut sigma_caps: Vec<HLine> = Vec::new();
    if let Some(c) = caps.first() {
        sigma_caps.push(HLine {
            label: "sigma^2 cap".into(),
            y: c.sigma_sq_cap,
        });
    }
    let utility_caps = caps
        .iter()
        .map(|c| HLine {
            label: format!("cap T={}", c.rounds),
            y: c.utility_cap,
        })
        .collect();
    let rate_caps = caps
        .first()
        .map(|c| HLine {
            label: "rate cap".into(),
            y: c.rate_cap,
        })
        .into_iter()
        .collect();
    let panel = |title: &str, y_label: &str, s: Vec<Series>, caps: Vec<HLine>| {
        LinePlot {
            title: title.into(),
            x_label: "epsilon".into(),
            y_label: y_label.into(),
            log_y,
            series: s,
            caps,
        }
        .render()
    };
    vec![
        ("noise.svg", panel("Noise variance per user", "sigma_k^2", series(rows, |r| r.sigma_k_sq), sigma_caps)),
        ("utility.svg", panel("Utility lower bound", "utility", series(rows, |r| r.utility_lb), utility_caps)),
        ("rate.svg", panel("Rate upper bound", "bits", series(rows, |r| r.rate_ub), rate_caps)),
    ]
}

pub fn plot(a: PlotArgs) -> Result<(), CliError> {
    let mut reader = csv::Reader::from_path(&a.input).map_err(|e| CliError::domain(format!("{}: {e}", a.input.display())))?;
    let headers = reader.headers().map_err(|e| CliError::domain(e.to_string()))?.clone();
    if headers.iter().ne(SWEEP_COLUMNS) {
        return Err(CliError::domain(format!(
            "{}: expected columns {}",
            a.input.display(),
            SWEEP_COLUMNS.join(",")
        )));
    }
    let rows: Vec<PlotRow> = reader
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::domain(format!("{}: {e}", a.input.display())))?;
    let caps: Vec<CapRecord> = match &a.report {
        Some(path) => {
            let text = read_input(path)?;
            let report: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
            serde_json::from_value(report["caps"].clone())
                .map_err(|e| CliError::domain(format!("{}: caps: {e}", path.display())))?
        }
        None => Vec::new(),
    };
    let mut dir = OutputDir::create(&a.out)?;
    for (name, svg) in sweep_panels(&rows, &caps, a.log_y) {
        dir.write(name, svg.as_bytes())?;
    }
    Ok(())
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))
}

/// Field named in a serde "missing field `x`" / "unknown field `x`" message.
fn named_field(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

/// Loads the config file (if any), applies flag overrides and validates.
pub fn load_sim_config(a: &SimulateArgs) -> Result<SimConfig, CliError> {
    let mut value = match &a.config {
        Some(path) => serde_json::from_str(&read_input(path)?)
            .map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?,
        None => json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::domain("config must be a JSON object"))?;
    let mut set = |key: &str, v: Option<serde_json::Value>| {
        if let Some(v) = v {
            obj.insert(key.to_string(), v);
        }
    };
    set("users", a.users.map(|v| json!(v)));
    set("dim", a.dim.map(|v| json!(v)));
    set("per_user_data", a.per_user_data.map(|v| json!(v)));
    set("q", a.q.map(|v| json!(v)));
    set("sigma", a.sigma.map(|v| json!(v)));
    set("clip", a.clip.map(|v| json!(v)));
    set("grad_bound", a.grad_bound.map(|v| json!(v)));
    set("lambda", a.lambda.map(|v| json!(v)));
    set("mu", a.mu.map(|v| json!(v)));
    set("rounds", a.rounds.map(|v| json!(v)));
    set("seed", a.seed.map(|v| json!(v)));
    set("repetitions", a.repetitions.map(|v| json!(v)));
    let cfg: SimConfig = serde_json::from_value(value).map_err(|e| {
        let message = format!("invalid config: {e}");
        CliError::Domain {
            record: Some(json!({
                "error": "invalid_config",
                "field": named_field(&message),
                "message": message,
            })),
            message,
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let cfg = load_sim_config(&a)?;
    let result = run_simulation(&cfg)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let internal = |e: csv::Error| CliError::Internal(e.to_string());
    w.write_record(TRAJECTORY_COLUMNS).map_err(internal)?;
    for i in 0..result.loss_gap_trajectory.len() {
        w.write_record([
            (i + 1).to_string(),
            g17(result.loss_gap_trajectory[i]),
            g17(result.loss_gap_stderr[i]),
            g17(result.mse_trajectory[i]),
            g17(result.mse_stderr[i]),
        ])
        .map_err(internal)?;
    }
    let csv_bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;

    let summary = json!({
        "rounds": result.rounds,
        "repetitions": result.repetitions,
        "empirical_utility": result.empirical_utility,
        "utility_bound": result.utility_bound,
        "margin": result.empirical_utility - result.utility_bound,
        "meets_bound": result.empirical_utility >= result.utility_bound,
        "fraction_runs_meeting_bound": result.fraction_meeting_bound(),
        "sigma_agg_sq": result.sigma_agg_sq,
        "realized_grad_norm_max": result.realized_grad_norm_max,
        "grad_bound": cfg.grad_bound,
        "grad_bound_exceeded": result.grad_bound_exceeded,
        "final_loss_gaps": result.final_loss_gaps,
    });

    let mut dir = OutputDir::create(&a.out)?;
    dir.write("trajectory.csv", &csv_bytes)?;
    dir.write_json("summary.json", &summary)?;
    if a.plot {
        let points = |v: &[f64]| v.iter().enumerate().map(|(i, &y)| ((i + 1) as f64, y)).collect();
        let svg = LinePlot {
            title: "Mean optimality gap".into(),
            x_label: "round".into(),
            y_label: "loss gap".into(),
            log_y: true,
            series: vec![Series {
                name: "mean gap".into(),
                points: points(&result.loss_gap_trajectory),
            }],
            caps: vec![HLine {
                label: "1 / utility bound".into(),
                y: 1.0 / result.utility_bound,
            }],
        }
        .render();
        dir.write("loss_gap.svg", svg.as_bytes())?;
    }
    let params = serde_json::to_value(&cfg).map_err(|e| CliError::Internal(e.to_string()))?;
    dir.finish("simulate", Some(cfg.seed), params)?;
    println!("{}", serde_json::to_string_pretty(&summary_head(&summary)).expect("serializable"));
    Ok(())
}

/// Summary without the per-repetition vector, for the terminal.
fn summary_head(summary: &serde_json::Value) -> serde_json::Value {
    let mut head = summary.clone();
    if let Some(obj) = head.as_object_mut() {
        obj.remove("final_loss_gaps");
    }
    head
}

pub fn validate(a: ValidateArgs) -> Result<(), CliError> {
    let checks = run_all();
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!(
            "{}  {:width$}  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail,
            width = width
        );
    }
    if let Some(out) = &a.out {
        let mut dir = OutputDir::create(out)?;
        dir.write_json("validation.json", &checks)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::domain(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}
