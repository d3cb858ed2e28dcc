use std::fmt::Write as _;
use std::path::PathBuf;

use ldtail::adjoint::directional_check;
use ldtail::estimators::*;
use ldtail::ldt::*;
use ldtail::source_model::slips_to_csv;
use ldtail::Error;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::*;
use crate::error::CliError;
use crate::manifest::RunContext;
use crate::model::Model;

fn tolerances(cfg: &RunConfig) -> Tolerances {
    Tolerances { gradient: cfg.sweep.gradient_tol, max_iter: cfg.sweep.max_iter, ..Default::default() }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

pub fn solve(ctx: &mut RunContext) -> Result<(), CliError> {
    let model = Model::build(&ctx.cfg)?;
    let tm = model.tsunami().ok_or_else(|| CliError::Config("`solve` needs model = \"tsunami\"".into()))?;
    let stride = ctx.cfg.solve.as_ref().map_or(50, |s| s.trajectory_stride).max(1);
    let spec = ctx.cfg.solve.as_ref().map_or(SlipSpec::Named("zero".into()), |s| s.slips.clone());
    let slips = match spec {
        SlipSpec::Named(n) if n == "zero" => DVector::zeros(tm.dim()),
        SlipSpec::Named(n) if n == "sample" => tm.prior.measure().sample(ctx.seed, 1).remove(0),
        SlipSpec::Named(n) => {
            return Err(CliError::Config(format!("solve.slips must be \"zero\", \"sample\" or a list, got \"{n}\"")))
        }
        SlipSpec::Values(v) if v.len() == tm.dim() => DVector::from_vec(v),
        SlipSpec::Values(v) => {
            return Err(CliError::Config(format!("solve.slips has {} values, the model has {} patches", v.len(), tm.dim())))
        }
    };
    let traj = tm.forward(&slips)?;
    ctx.write("slips.csv", &slips_to_csv(std::slice::from_ref(&slips)))?;

    let bathy = &traj.bathymetry;
    let mut s = String::from("x,b0,b,db\n");
    for (j, x) in tm.mesh.vertices().iter().enumerate() {
        let _ = writeln!(s, "{x},{},{},{}", bathy.b0[j], bathy.b[j], bathy.b[j] - bathy.b0[j]);
    }
    ctx.write("bathymetry.csv", &s)?;

    let series = traj.observable_series(&tm.window);
    let mut s = String::from("t,f\n");
    for (m, f) in series.iter().enumerate() {
        let _ = writeln!(s, "{},{f}", traj.time(m));
    }
    ctx.write("observable.csv", &s)?;

    let mut s = String::from("level,t,node,x,h,v\n");
    for m in (0..traj.levels.len()).step_by(stride) {
        let st = &traj.levels[m];
        for (i, (h, v)) in st.h().iter().zip(st.v()).enumerate() {
            let _ = writeln!(s, "{m},{},{i},{},{h},{v}", traj.time(m), tm.mesh.node_x(i));
        }
    }
    ctx.write("trajectory.csv", &s)?;

    let peak = series.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    println!("F = {:.6e}, max f = {peak:.6e} m over {} steps", tm.event_value(&slips)?, traj.grid.steps);
    ctx.finish("ok")?;
    Ok(())
}

pub fn gradcheck(ctx: &mut RunContext) -> Result<(), CliError> {
    let model = Model::build(&ctx.cfg)?;
    let gc = require(&ctx.cfg.gradcheck, "gradcheck")?.clone();
    let (event, measure) = (model.event(), model.measure());
    let lambda = gc.lambda;
    let points = measure.sample(ctx.seed, gc.directions);
    let mut rng = ChaCha8Rng::seed_from_u64(partition_seed(ctx.seed, 0));
    let mut table = String::from("direction,step,fd,adjoint,rel_error\n");
    let mut summary = String::from("direction,min_rel_error\n");
    let mut worst: f64 = 0.0;
    for (k, s) in points.iter().enumerate() {
        let d = ldtail::measures::standard_normal_vector(&mut rng, s.len()).normalize();
        let scale = if s.norm() > 0.0 { s.norm() } else { 1.0 };
        let steps: Vec<f64> = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7].iter().map(|h| h * scale).collect();
        let (_, gf) = event.value_grad(s)?;
        let g = measure.rate_grad(s)? - gf * lambda;
        let value = |x: &DVector<f64>| -> ldtail::Result<f64> { Ok(measure.rate(x)? - lambda * event.value(x)?) };
        let c = directional_check(value, &g, s, &d, &steps)?;
        for r in &c.rows {
            let _ = writeln!(table, "{k},{},{},{},{}", r.step, r.fd, r.adjoint, r.rel_error);
        }
        let _ = writeln!(summary, "{k},{}", c.min_rel_error);
        println!("direction {k}: min relative error {:.3e}", c.min_rel_error);
        worst = worst.max(c.min_rel_error);
    }
    ctx.write("gradcheck.csv", &table)?;
    ctx.write("gradcheck_summary.csv", &summary)?;
    if !(worst <= gc.tolerance) {
        ctx.note(format!("gradient check FAILED: worst min relative error {worst:e} > {:e}", gc.tolerance));
        ctx.finish("failed")?;
        return Err(CliError::Numerical(format!(
            "gradient check failed: worst min relative error {worst:e} exceeds {:e}",
            gc.tolerance
        )));
    }
    ctx.finish("ok")?;
    Ok(())
}

fn run_sweep(model: &Model, cfg: &RunConfig) -> Result<SweepResult, CliError> {
    let problem = Problem::new(model.measure(), model.event())?;
    let tol = tolerances(cfg);
    let lambdas = &cfg.sweep.lambdas;
    if let (Some(tm), Some(ObjectiveName::TimeOptimal)) = (model.tsunami(), cfg.objective.as_ref().map(|o| o.kind.clone())) {
        if lambdas.iter().any(|l| !(*l > 0.0)) || lambdas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CliError::Config("sweep.lambdas must be positive and strictly ascending".into()));
        }
        let center = model.measure().mean().clone();
        let mut start = center.clone();
        let mut entries = Vec::new();
        for &l in lambdas {
            let from = if cfg.sweep.warm { &start } else { &center };
            let warm_started = cfg.sweep.warm && start != center;
            match minimize_timeopt(&problem, tm, l, from, &tol) {
                Ok(r) => {
                    start = r.theta_vec();
                    entries.push(SweepEntry { lambda: l, record: Some(r), error: None, warm_started });
                }
                Err(e) => entries.push(SweepEntry { lambda: l, record: None, error: Some(e.to_string()), warm_started }),
            }
        }
        return Ok(SweepResult { entries, warm: cfg.sweep.warm });
    }
    Ok(sweep_lambda(&problem, lambdas, cfg.sweep.warm, &tol)?)
}

fn lowrank(model: &Model, rec: &OptimumRecord, rank: usize, tol: f64, seed: u64) -> ldtail::Result<(ProbabilityEstimate, SormSpectrum)> {
    let theta = rec.theta_vec();
    let event = model.event();
    let opts = LowRankOptions { rank, tol, seed, ..Default::default() };
    sorm_estimate_lowrank(rec, model.measure(), |v| event.hess_vec(&theta, v), &opts)
}

pub fn sweep(ctx: &mut RunContext) -> Result<(), CliError> {
    let model = Model::build(&ctx.cfg)?;
    let result = run_sweep(&model, &ctx.cfg)?;
    let mut table = String::from("lambda,z,rate,iterations,kkt_residual,converged,p_form,p_sorm_lowrank,n_eigs,error\n");
    let mut optimizers = String::new();
    let mut notes = Vec::new();
    for e in &result.entries {
        match &e.record {
            Some(r) => {
                let form = form_estimate(r, model.measure())?;
                let (so, n_eigs, err) = match lowrank(&model, r, ctx.cfg.sweep.rank, ctx.cfg.sweep.eig_tol, ctx.seed) {
                    Ok((p, s)) => (Some(p.p_hat), Some(s.retained), String::new()),
                    Err(err @ Error::SormPositivity { .. }) => (None, None, err.to_string()),
                    Err(err) => return Err(err.into()),
                };
                let msg = if !r.converged { r.message.clone().unwrap_or_else(|| "not converged".into()) } else { err };
                if !msg.is_empty() {
                    notes.push(format!("lambda {}: {msg}", e.lambda));
                }
                let _ = writeln!(
                    table,
                    "{},{},{},{},{},{},{},{},{},{}",
                    e.lambda,
                    r.z,
                    r.rate,
                    r.iterations,
                    r.kkt_residual,
                    r.converged,
                    form.p_hat,
                    fmt_opt(so),
                    n_eigs.map_or(String::new(), |n| n.to_string()),
                    csv_text(&msg)
                );
                let _ = writeln!(
                    optimizers,
                    "{},{}",
                    e.lambda,
                    r.theta.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
                );
            }
            None => {
                let msg = e.error.clone().unwrap_or_default();
                notes.push(format!("lambda {}: {msg}", e.lambda));
                let _ = writeln!(table, "{},,,,,false,,,,{}", e.lambda, csv_text(&msg));
            }
        }
    }
    let dim = model.measure().dim();
    let header: Vec<String> = (1..=dim).map(|i| format!("s_{i}")).collect();
    ctx.write("sweep.csv", &table)?;
    ctx.write("optimizers.csv", &format!("lambda,{}\n{optimizers}", header.join(",")))?;
    if let Some(tm) = model.tsunami() {
        let recs: Vec<&OptimumRecord> = result.records().collect();
        let mut s = String::from("x");
        for r in &recs {
            let _ = write!(s, ",db_lambda_{}", r.lambda);
        }
        s.push('\n');
        let cols: Vec<Vec<f64>> = recs.iter().map(|r| tm.bathymetry(&r.theta_vec()).map(|b| b.perturbation())).collect::<ldtail::Result<_>>()?;
        for (j, x) in tm.mesh.vertices().iter().enumerate() {
            let _ = write!(s, "{x}");
            for c in &cols {
                let _ = write!(s, ",{}", c[j]);
            }
            s.push('\n');
        }
        ctx.write("optimizer_bathymetry.csv", &s)?;
    }
    ctx.write("sweep.json", &(serde_json::to_string_pretty(&result).expect("sweep serializes") + "\n"))?;
    print!("{table}");
    for n in notes {
        ctx.note(n);
    }
    if result.records().next().is_none() {
        ctx.finish("failed")?;
        return Err(CliError::Numerical("no lambda in the sweep produced an optimizer".into()));
    }
    ctx.finish("ok")?;
    Ok(())
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn sweep_artifact_path(ctx: &RunContext) -> PathBuf {
    ctx.cfg.estimator.as_ref().and_then(|e| e.sweep.clone()).unwrap_or_else(|| ctx.path("sweep.json"))
}

fn load_sweep(ctx: &RunContext, why: &str) -> Result<SweepResult, CliError> {
    let p = sweep_artifact_path(ctx);
    let text = std::fs::read_to_string(&p).map_err(|_| {
        CliError::Config(format!(
            "{why} needs a sweep artifact, but {} does not exist; run `ldtail sweep` with the same config and --out first, or set estimator.sweep",
            p.display()
        ))
    })?;
    let s: SweepResult = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("cannot parse sweep artifact {}: {e}", p.display())))?;
    if s.records().next().is_none() {
        return Err(CliError::Config(format!("sweep artifact {} has no successful optimizers", p.display())));
    }
    Ok(s)
}

/// ln p interpolated linearly in z between the points; `None` outside.
fn log_interp(points: &[(f64, f64)], z: f64) -> Option<f64> {
    if points.is_empty() || z < points[0].0 || z > points[points.len() - 1].0 {
        return None;
    }
    let j = points.partition_point(|p| p.0 < z);
    if j == 0 {
        return Some(points[0].1.ln());
    }
    let (a, b) = (points[j - 1], points[j]);
    if b.0 == a.0 {
        return Some(b.1.ln());
    }
    Some(a.1.ln() + (b.1.ln() - a.1.ln()) * (z - a.0) / (b.0 - a.0))
}

pub fn estimate(ctx: &mut RunContext) -> Result<(), CliError> {
    let model = Model::build(&ctx.cfg)?;
    let est = require(&ctx.cfg.estimator, "estimator")?.clone();
    let (event, measure) = (model.event(), model.measure());
    let zs = est.z_grid.points();
    let wants = |m: EstimatorMethod| est.methods.contains(&m);
    let ldt_method = est.methods.iter().find(|m| **m != EstimatorMethod::Mc);
    let sweep = match ldt_method {
        Some(m) => Some(load_sweep(ctx, &format!("method `{}`", method_name(*m)))?),
        None => None,
    };
    // column name -> estimates on the z-grid
    let mut columns: Vec<(&str, Vec<Option<ProbabilityEstimate>>)> = Vec::new();
    let mut prefactors = String::from("method,z,prefactor\n");
    let mut add_prefactor = |name: &str, curve: &[(f64, f64)], sweep: &SweepResult| {
        for (z, c) in prefactor_extract(curve, sweep) {
            let _ = writeln!(prefactors, "{name},{z},{c}");
        }
    };

    let mut mc_curve: Option<Vec<ProbabilityEstimate>> = None;
    if wants(EstimatorMethod::Mc) || wants(EstimatorMethod::Fit) {
        let batch = McBatch::draw(event, measure, est.samples, ctx.seed)?;
        if batch.failed > 0 {
            ctx.note(format!("{} of {} Monte Carlo solves failed and were excluded", batch.failed, est.samples));
        }
        mc_curve = Some(batch.curve(&zs));
    }
    if let Some(c) = &mc_curve {
        if wants(EstimatorMethod::Mc) {
            ctx.write("mc.csv", &curve_to_csv(c))?;
            columns.push(("mc", c.iter().cloned().map(Some).collect()));
            if let Some(s) = &sweep {
                add_prefactor("mc", &c.iter().filter(|e| e.p_hat > 0.0).map(|e| (e.z, e.p_hat)).collect::<Vec<_>>(), s);
            }
        }
    }
    if let Some(sweep) = &sweep {
        if wants(EstimatorMethod::Is) {
            let c = is_curve(event, measure, sweep, &zs, est.is_samples, ctx.seed)?;
            ctx.write("is.csv", &curve_to_csv(&c))?;
            add_prefactor("is", &c.iter().filter(|e| e.p_hat > 0.0).map(|e| (e.z, e.p_hat)).collect::<Vec<_>>(), sweep);
            columns.push(("is", c.into_iter().map(Some).collect()));
        }
        if wants(EstimatorMethod::Form) {
            let col: Vec<Option<ProbabilityEstimate>> = zs.iter().map(|&z| sweep.rate_at(z).map(|i| form_from_rate(z, i))).collect();
            let c: Vec<ProbabilityEstimate> = col.iter().flatten().cloned().collect();
            ctx.write("form.csv", &curve_to_csv(&c))?;
            add_prefactor("form", &c.iter().map(|e| (e.z, e.p_hat)).collect::<Vec<_>>(), sweep);
            columns.push(("form", col));
        }
        if wants(EstimatorMethod::Sorm) {
            let mut at_sweep = Vec::new();
            for r in sweep.records() {
                match lowrank(&model, r, ctx.cfg.sweep.rank, ctx.cfg.sweep.eig_tol, ctx.seed) {
                    Ok((p, _)) => at_sweep.push(p),
                    Err(e @ Error::SormPositivity { .. }) => ctx.note(format!("SORM skipped at lambda {}: {e}", r.lambda)),
                    Err(e) => return Err(e.into()),
                }
            }
            at_sweep.sort_by(|a, b| a.z.total_cmp(&b.z));
            ctx.write("sorm.csv", &curve_to_csv(&at_sweep))?;
            let pts: Vec<(f64, f64)> = at_sweep.iter().map(|e| (e.z, e.p_hat)).collect();
            add_prefactor("sorm", &pts, sweep);
            let col = zs
                .iter()
                .map(|&z| {
                    log_interp(&pts, z).map(|lp| {
                        let mut e = at_sweep[0].clone();
                        e.z = z;
                        e.p_hat = lp.exp();
                        e.log10_p = lp / std::f64::consts::LN_10;
                        e.rate_star = sweep.rate_at(z);
                        e
                    })
                })
                .collect();
            columns.push(("sorm", col));
        }
        if wants(EstimatorMethod::Fit) {
            let mc = mc_curve.as_ref().expect("drawn above");
            let pts: Vec<(f64, f64)> = mc.iter().map(|e| (e.z, e.p_hat)).collect();
            let (c0, curve) = fit_constant_prefactor(&pts, sweep, (est.fit_window[0], est.fit_window[1]))?;
            let mut s = String::from("z,p,c0\n");
            for (z, p) in &curve {
                let _ = writeln!(s, "{z},{p},{c0}");
            }
            ctx.write("fit.csv", &s)?;
            ctx.notes.push(format!("fitted prefactor C0 = {c0}"));
            println!("fitted prefactor C0 = {c0:.6e} on z in [{}, {}]", est.fit_window[0], est.fit_window[1]);
            let col = zs.iter().map(|&z| log_interp(&curve, z).map(|lp| fit_estimate(z, lp.exp(), sweep.rate_at(z)))).collect();
            columns.push(("fit", col));
        }
    }

    let mut s = String::from("z");
    for (name, _) in &columns {
        let _ = write!(s, ",p_{name},ci_low_{name},ci_high_{name}");
    }
    s.push('\n');
    for (i, z) in zs.iter().enumerate() {
        let _ = write!(s, "{z}");
        for (_, col) in &columns {
            match &col[i] {
                Some(e) => {
                    let _ = write!(s, ",{},{},{}", e.p_hat, fmt_opt(e.ci_low), fmt_opt(e.ci_high));
                }
                None => s.push_str(",,,"),
            }
        }
        s.push('\n');
    }
    ctx.write("comparison.csv", &s)?;
    if sweep.is_some() {
        ctx.write("prefactor.csv", &prefactors)?;
    }
    print!("{s}");
    ctx.finish("ok")?;
    Ok(())
}

fn fit_estimate(z: f64, p: f64, rate: Option<f64>) -> ProbabilityEstimate {
    ProbabilityEstimate {
        z,
        p_hat: p,
        log10_p: p.log10(),
        ci_low: None,
        ci_high: None,
        method: Method::Fit,
        n_samples: None,
        n_eigs: None,
        rate_star: rate,
        aux: None,
        n_failed: 0,
    }
}

fn method_name(m: EstimatorMethod) -> &'static str {
    match m {
        EstimatorMethod::Mc => "mc",
        EstimatorMethod::Is => "is",
        EstimatorMethod::Form => "form",
        EstimatorMethod::Sorm => "sorm",
        EstimatorMethod::Fit => "fit",
    }
}

pub fn eigs(ctx: &mut RunContext, lambda: f64, rank: Option<usize>) -> Result<(), CliError> {
    let model = Model::build(&ctx.cfg)?;
    let sweep = load_sweep(ctx, "`eigs`")?;
    let rec = sweep.records().find(|r| (r.lambda - lambda).abs() <= 1e-9 * lambda.abs().max(1.0)).ok_or_else(|| {
        let have: Vec<f64> = sweep.records().map(|r| r.lambda).collect();
        CliError::Config(format!("no optimizer for lambda = {lambda} in the sweep artifact; available: {have:?}"))
    })?;
    let rank = rank.unwrap_or(ctx.cfg.sweep.rank);
    let theta = rec.theta_vec();
    let event = model.event();
    let opts = LowRankOptions { rank, tol: ctx.cfg.sweep.eig_tol, seed: ctx.seed, ..Default::default() };
    let spec = lowrank_spectrum(rec, model.measure(), |v| event.hess_vec(&theta, v), &opts)?;
    let p = match sorm_from_spectrum(rec.z, model.measure().rate(&theta)?, &spec, Method::SormLowrank) {
        Ok(p) => Some(p),
        Err(e @ Error::SormPositivity { .. }) => {
            ctx.note(format!("spectrum written without a SORM estimate: {e}"));
            None
        }
        Err(e) => return Err(e.into()),
    };
    let name = format!("spectrum_lambda_{}.csv", rec.lambda);
    ctx.write(&name, &spec.to_csv())?;
    print!("{}", spec.to_csv());
    if let Some(p) = p {
        println!("P_SO = {:.6e} with {} retained eigenvalues", p.p_hat, spec.retained);
    }
    ctx.finish("ok")?;
    Ok(())
}
