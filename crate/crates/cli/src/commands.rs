use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

use repmut::asymptotics::{analytic_sweep, asymptotics_report, matched_pair, sweep_csv};
use repmut::densitypde::{self, delta_convergence, run_figure1, snapshot_csv, ConvergenceConfig, Figure1Config};
use repmut::ensemble::{run_ensemble, unbiasedness_test, DriveSeries, EnsembleState, UnbiasednessConfig, Variant};
use repmut::experiments::{self, Horizon, MseConfig, ReferenceMode, TriangleConfig};
use repmut::io::{write_atomic, CsvTable};
use repmut::model::FIGURE1_X0;
use repmut::moments::{integrate_ito, integrate_smooth};
use repmut::pathgen::{self, InitialState};
use repmut::tempering::{gaussian_tempering_problem, tempering_run};
use repmut::{svg, RsPair, TimeGrid};

use crate::config::{usage, RunConfig};

pub struct Ctx {
    pub out: PathBuf,
}

impl Ctx {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }

    fn csv(&self, name: &str, t: &CsvTable) -> Result<()> {
        self.write(name, &t.to_bytes()?)
    }

    fn json<T: Serialize>(&self, name: &str, v: &T) -> Result<String> {
        let text = serde_json::to_string_pretty(v)? + "\n";
        self.write(name, text.as_bytes())?;
        Ok(text)
    }

    /// Resolved config written next to the outputs of `cmd`.
    fn echo(&self, cmd: &str, cfg: &RunConfig) -> Result<()> {
        self.json(&format!("{cmd}_config.json"), cfg).map(|_| ())
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if !(v > 0.0 && v.is_finite()) {
        return usage(format!("{name} must be positive, got {v}"));
    }
    Ok(v)
}

/// `δ_d / dt` as an integer step count.
fn ratio(delta_d: f64, dt: f64) -> Result<usize> {
    let k = (delta_d / dt).round();
    if k < 1.0 || ((delta_d / dt) - k).abs() > 1e-6 * k {
        return usage(format!("delta_d = {delta_d} must be a positive integer multiple of dt = {dt}"));
    }
    Ok(k as usize)
}

fn rs_pair(r: f64, s: f64) -> Result<RsPair> {
    RsPair::new(r, s).map_err(|e| crate::config::Usage(e.to_string()).into())
}

pub fn figure1(ctx: &Ctx, mut cfg: RunConfig) -> Result<bool> {
    let model = cfg.resolve_model("figure1")?;
    let dt = positive("dt", *cfg.dt.get_or_insert(1e-4))?;
    let delta_d = *cfg.delta_d.get_or_insert(500.0 * dt);
    let run = Figure1Config {
        t_end: positive("t_end", *cfg.t_end.get_or_insert(1.0))?,
        dt,
        delta_ratio: ratio(delta_d, dt)?,
        nx: *cfg.nx.get_or_insert(1601),
        x0_star: FIGURE1_X0,
        seed: *cfg.seed.get_or_insert(0),
        ..Default::default()
    };
    ctx.echo("figure1", &cfg)?;
    let res = run_figure1(&model, &run)?;
    ctx.csv("figure1_ck.csv", &snapshot_csv(&res.ck)?)?;
    ctx.csv("figure1_zakai_ito.csv", &snapshot_csv(&res.zakai_ito)?)?;
    ctx.csv("figure1_zakai_strat.csv", &snapshot_csv(&res.zakai_strat)?)?;
    let summary = ctx.json("figure1_summary.json", &res.summary()?)?;
    let series = |g: &densitypde::DensityGrid| -> Result<Vec<(f64, f64)>> {
        let (n, _) = densitypde::normalize(g)?;
        Ok(n.xs().into_iter().zip(n.values.iter().copied()).collect())
    };
    let plot = svg::line_plot(
        &format!("densities at t = {}", res.ck.time),
        "x",
        "density",
        &[("crow-kimura", series(&res.ck)?), ("zakai ito", series(&res.zakai_ito)?), ("zakai stratonovich", series(&res.zakai_strat)?)],
    );
    ctx.write("figure1.svg", plot.as_bytes())?;
    print!("{summary}");
    Ok(true)
}

pub fn convergence(ctx: &Ctx, mut cfg: RunConfig) -> Result<bool> {
    let model = cfg.resolve_model("figure1")?;
    let dt0 = positive("dt", *cfg.dt.get_or_insert(1e-4))?;
    let delta_d = *cfg.delta_d.get_or_insert(500.0 * dt0);
    let seed = *cfg.seed.get_or_insert(0);
    let n_seeds = *cfg.ns.get_or_insert(10);
    let run = ConvergenceConfig {
        t_end: positive("t_end", *cfg.t_end.get_or_insert(0.5))?,
        dt0,
        delta_ratio: ratio(delta_d, dt0)?,
        nx: *cfg.nx.get_or_insert(801),
        seeds: (seed..seed + n_seeds as u64).collect(),
        ..Default::default()
    };
    ctx.echo("convergence", &cfg)?;
    let study = delta_convergence(&model, &run)?;
    ctx.csv("convergence.csv", &study.to_csv())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        study: &'a densitypde::ConvergenceStudy,
        non_monotone_steps: usize,
    }
    let text = ctx.json("convergence.json", &Summary { study: &study, non_monotone_steps: study.non_monotone_steps() })?;
    let pts = study.levels.iter().map(|l| (l.delta_d.log10(), l.mean_gap.log10())).collect();
    ctx.write("convergence.svg", svg::line_plot("CK vs Stratonovich gap", "log10 delta_d", "log10 gap", &[("mean gap", pts)]).as_bytes())?;
    print!("{text}");
    Ok(true)
}

fn mse_config(cfg: &mut RunConfig, default_ns: usize) -> Result<MseConfig> {
    let dt = positive("dt", *cfg.dt.get_or_insert(1e-4))?;
    let delta_d = *cfg.delta_d.get_or_insert(1e-3);
    ratio(delta_d, dt)?;
    let horizon = match cfg.t_end {
        Some(t) => Horizon::Fixed { t: positive("t_end", t)? },
        None => Horizon::Adaptive { t_max: positive("t_max", *cfg.t_max.get_or_insert(4.0))? },
    };
    let n_s = *cfg.ns.get_or_insert(default_ns);
    if n_s < 2 {
        return usage("--ns must be at least 2");
    }
    Ok(MseConfig {
        n_s,
        dt,
        delta_d,
        horizon,
        reference: *cfg.reference.get_or_insert(ReferenceMode::Frozen),
        checkpoints: 20,
        seed: *cfg.seed.get_or_insert(0),
    })
}

pub fn sweep(ctx: &Ctx, mut cfg: RunConfig, analytic_only: bool) -> Result<bool> {
    let model = cfg.resolve_model("system1")?;
    let r_grid = cfg.r_grid.get_or_insert_with(|| crate::config::parse_grid("log:0.05:2:12").unwrap()).clone();
    let s_grid = cfg.s_grid.get_or_insert_with(|| crate::config::parse_grid("lin:-4:0:9").unwrap()).clone();
    if r_grid.iter().any(|r| *r <= 0.0) {
        return usage("r grid values must be positive");
    }
    let mse = mse_config(&mut cfg, 1000)?;
    ctx.echo("sweep", &cfg)?;
    let rows = analytic_sweep(&model, &r_grid, &s_grid)?;
    ctx.csv("sweep_analytic.csv", &sweep_csv(&rows))?;
    let grid_of = |f: &dyn Fn(usize) -> Option<f64>| -> Vec<Vec<Option<f64>>> {
        (0..r_grid.len()).map(|i| (0..s_grid.len()).map(|j| f(i * s_grid.len() + j)).collect()).collect()
    };
    let analytic = grid_of(&|k| rows[k].stable.then_some(rows[k].e_inf));
    ctx.write("sweep_analytic.svg", svg::heatmap("analytic asymptotic MSE", "r", "s", &r_grid, &s_grid, &analytic, true).as_bytes())?;
    if analytic_only {
        return Ok(true);
    }
    let sweep = experiments::rs_heatmap(&model, &r_grid, &s_grid, &mse)?;
    ctx.csv("sweep_empirical.csv", &sweep.to_csv())?;
    let empirical = grid_of(&|k| sweep.cells[k].stable.then_some(sweep.cells[k].e_emp));
    ctx.write("sweep_empirical.svg", svg::heatmap("empirical MSE", "r", "s", &r_grid, &s_grid, &empirical, true).as_bytes())?;
    #[derive(Serialize)]
    struct Summary {
        masked_fraction: f64,
        tracking_fraction: f64,
        s_l: Option<f64>,
        columns: Vec<experiments::ColumnArgmin>,
    }
    let text = ctx.json(
        "sweep_argmin.json",
        &Summary { masked_fraction: sweep.masked_fraction(), tracking_fraction: sweep.tracking_fraction(), s_l: sweep.s_l, columns: sweep.column_argmins() },
    )?;
    print!("{text}");
    Ok(true)
}

pub fn asymptotics(ctx: &Ctx, mut cfg: RunConfig) -> Result<bool> {
    let model = cfg.resolve_model("system1")?;
    let r_samples = cfg.r_grid.get_or_insert_with(|| crate::config::parse_grid("log:0.01:10:30").unwrap()).clone();
    let s_samples = cfg.s_grid.get_or_insert_with(|| vec![-2.0, -1.0, -0.5, -0.1, 0.0]).clone();
    ctx.echo("asymptotics", &cfg)?;
    let report = asymptotics_report(&model, &r_samples, &s_samples)?;
    let text = ctx.json("asymptotics.json", &report)?;
    print!("{text}");
    Ok(true)
}

pub fn enkbf(ctx: &Ctx, mut cfg: RunConfig, unbiasedness: bool) -> Result<bool> {
    let model = cfg.resolve_model("system1")?;
    let name = cfg.variant.get_or_insert_with(|| "stoch".into()).clone();
    let eps = *cfg.eps.get_or_insert(0.1);
    let variant = Variant::parse(&name, eps).map_err(|e| crate::config::Usage(e.to_string()))?;
    let rs = rs_pair(*cfg.r.get_or_insert(1.0), *cfg.s.get_or_insert(0.0))?;
    let dt = positive("dt", *cfg.dt.get_or_insert(1e-3))?;
    let t_end = positive("t_end", *cfg.t_end.get_or_insert(1.0))?;
    let n = *cfg.n_particles.get_or_insert(1024);
    if n < 2 {
        return usage("--particles must be at least 2");
    }
    let seed = *cfg.seed.get_or_insert(0);
    if unbiasedness {
        let runs = *cfg.ns.get_or_insert(200);
        ctx.echo("enkbf", &cfg)?;
        let ucfg = UnbiasednessConfig { n_particles: n, n_runs: runs, horizon: t_end, dt, checkpoints: 20, seed };
        let report = unbiasedness_test(&model, variant, rs, &ucfg)?;
        let text = ctx.json("enkbf_unbiasedness.json", &report)?;
        print!("{text}");
        return Ok(report.passed);
    }
    let delta_d = *cfg.delta_d.get_or_insert(10.0 * dt);
    let k = ratio(delta_d, dt)?;
    ctx.echo("enkbf", &cfg)?;
    let grid = TimeGrid::from_counts(dt, k, ((t_end / delta_d).round() as usize).max(1))?;
    let reference = pathgen::reference_trajectory(&model, &grid, seed, &InitialState::Sample)?;
    let obs = pathgen::coupled_observations(&model, &reference, &grid, seed)?;
    let filter = model.without_bias();
    let mut state = EnsembleState::sample(&filter, n, variant, rs, seed, 0)?;
    let every = (grid.n_steps() / 100).max(1);
    let smooth = variant.wants_rate() == Some(true);
    let (traj, ode) = if smooth {
        let t = run_ensemble(&mut state, &filter, DriveSeries::Rates { rates: &obs.rates, dt, steps_per_knot: k }, every)?;
        (t, integrate_smooth(&filter, &rs, filter.m0(), filter.c0(), &obs.rates, dt, k, every)?)
    } else {
        let t = run_ensemble(&mut state, &filter, DriveSeries::Increments(&obs.dz), every)?;
        (t, integrate_ito(&filter, &rs, filter.m0(), filter.c0(), &obs.dz, every)?)
    };
    let m = filter.dims().0;
    let mut header = vec!["t".to_string()];
    for pre in ["ens", "ode"] {
        header.extend((0..m).map(|i| format!("{pre}_m{i}")));
        header.extend((0..m * m).map(|i| format!("{pre}_C{}{}", i % m, i / m)));
    }
    let mut table = CsvTable::new(&header);
    for i in 0..traj.times.len().min(ode.times.len()) {
        let mut row = vec![traj.times[i]];
        row.extend(traj.means[i].iter());
        row.extend(traj.covariances[i].iter());
        row.extend(ode.means[i].iter());
        row.extend(ode.covariances[i].iter());
        table.push_floats(&row);
    }
    ctx.csv("enkbf_trajectory.csv", &table)?;
    ctx.csv("enkbf_particles.csv", &state.to_csv())?;
    let truth: Vec<(f64, f64)> = (0..=grid.n_steps()).step_by(every).map(|i| (grid.time(i), reference.state(i)[0])).collect();
    let ens: Vec<(f64, f64)> = traj.times.iter().zip(&traj.means).map(|(t, m)| (*t, m[0])).collect();
    let ode_pts: Vec<(f64, f64)> = ode.times.iter().zip(&ode.means).map(|(t, m)| (*t, m[0])).collect();
    ctx.write("enkbf.svg", svg::line_plot("ensemble mean", "t", "x0", &[("signal", truth), ("ensemble", ens), ("moment ODE", ode_pts)]).as_bytes())?;
    #[derive(Serialize)]
    struct Summary {
        variant: Variant,
        r: f64,
        s: f64,
        n_particles: usize,
        final_mean: Vec<f64>,
        final_cov: Vec<f64>,
        ode_final_mean: Vec<f64>,
        ode_final_cov: Vec<f64>,
    }
    let last = traj.times.len().min(ode.times.len()) - 1;
    let text = ctx.json(
        "enkbf_summary.json",
        &Summary {
            variant,
            r: rs.r(),
            s: rs.s(),
            n_particles: n,
            final_mean: traj.means[last].iter().copied().collect(),
            final_cov: traj.covariances[last].iter().copied().collect(),
            ode_final_mean: ode.means[last].iter().copied().collect(),
            ode_final_cov: ode.covariances[last].iter().copied().collect(),
        },
    )?;
    print!("{text}");
    Ok(true)
}

pub struct TemperArgs {
    pub y: f64,
    pub h: f64,
    pub xi: f64,
    pub p0: f64,
    pub m0: f64,
    pub half_width: f64,
}

pub fn temper(ctx: &Ctx, mut cfg: RunConfig, a: TemperArgs) -> Result<bool> {
    let n = *cfg.nx.get_or_insert(201);
    let dt = positive("dt", *cfg.dt.get_or_insert(1e-4))?;
    let t_end = positive("t_end", *cfg.t_end.get_or_insert(1.0))?;
    if n < 2 {
        return usage("--nx must be at least 2");
    }
    ctx.echo("temper", &cfg)?;
    let prior = gaussian_tempering_problem(n, positive("half_width", a.half_width)?, a.m0, positive("p0", a.p0)?, a.h, a.y, positive("xi", a.xi)?)?;
    let run = tempering_run(&prior, t_end, dt, 10)?;
    ctx.csv("tempering.csv", &run.to_csv())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        times: &'a [f64],
        deviations: &'a [f64],
        max_deviation: f64,
    }
    let text = ctx.json("tempering.json", &Summary { times: &run.times, deviations: &run.deviations, max_deviation: run.max_deviation })?;
    let series: Vec<(String, Vec<(f64, f64)>)> = run
        .times
        .iter()
        .zip(&run.probs)
        .step_by(5)
        .map(|(t, p)| (format!("t = {t}"), run.grid.iter().copied().zip(p.iter().copied()).collect()))
        .collect();
    let named: Vec<(&str, Vec<(f64, f64)>)> = series.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
    ctx.write("tempering.svg", svg::line_plot("replicator flow", "trait", "probability", &named).as_bytes())?;
    print!("{text}");
    Ok(true)
}

pub fn mse(ctx: &Ctx, mut cfg: RunConfig) -> Result<bool> {
    let model = cfg.resolve_model("system1")?;
    let rs = rs_pair(*cfg.r.get_or_insert(1.0), *cfg.s.get_or_insert(0.0))?;
    let mse = mse_config(&mut cfg, 1000)?;
    ctx.echo("mse", &cfg)?;
    let curve = experiments::empirical_mse(&model, &rs, &mse)?;
    ctx.csv("mse.csv", &curve.to_csv())?;
    let pts = curve.times.iter().copied().zip(curve.e.iter().copied()).collect();
    let flat = curve.times.iter().map(|t| (*t, curve.e_inf)).collect();
    ctx.write("mse.svg", svg::line_plot("empirical MSE", "t", "E_t", &[("empirical", pts), ("asymptotic", flat)]).as_bytes())?;
    let text = ctx.json("mse.json", &curve)?;
    print!("{text}");
    Ok(true)
}

pub fn calibrate(ctx: &Ctx, mut cfg: RunConfig) -> Result<bool> {
    let model = cfg.resolve_model("system1")?;
    let mut pairs = Vec::new();
    if model.is_scalar() {
        let mp = matched_pair(&model)?;
        pairs.push(rs_pair(mp.r, mp.s)?);
    }
    pairs.push(rs_pair(1.0, 0.0)?);
    if let (Some(r), Some(s)) = (cfg.r, cfg.s) {
        pairs.push(rs_pair(r, s)?);
    }
    let mse = mse_config(&mut cfg, 1000)?;
    ctx.echo("calibrate", &cfg)?;
    let rows = experiments::covariance_calibration(&model, &pairs, &mse)?;
    ctx.csv("calibration.csv", &experiments::calibration_csv(&rows))?;
    let text = ctx.json("calibration.json", &rows)?;
    print!("{text}");
    Ok(true)
}

pub fn triangle(ctx: &Ctx, mut cfg: RunConfig) -> Result<bool> {
    let model = cfg.resolve_model("system1")?;
    let rs = rs_pair(*cfg.r.get_or_insert(1.0), *cfg.s.get_or_insert(0.0))?;
    let d = TriangleConfig::default();
    let dt = positive("dt", *cfg.dt.get_or_insert(d.dt))?;
    let delta_d = *cfg.delta_d.get_or_insert(dt * d.steps_per_knot as f64);
    let tcfg = TriangleConfig {
        t_end: positive("t_end", *cfg.t_end.get_or_insert(d.t_end))?,
        dt,
        steps_per_knot: ratio(delta_d, dt)?,
        nx: *cfg.nx.get_or_insert(d.nx),
        n_particles: *cfg.n_particles.get_or_insert(d.n_particles),
        checkpoints: d.checkpoints,
        seed: *cfg.seed.get_or_insert(d.seed),
    };
    ctx.echo("triangle", &cfg)?;
    let report = experiments::moment_triangle(&model, &rs, &tcfg)?;
    ctx.csv("triangle.csv", &report.to_csv())?;
    let text = ctx.json("triangle.json", &report)?;
    print!("{text}");
    Ok(true)
}
