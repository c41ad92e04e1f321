//! The five batch commands: simulate, fit, predict, cv, summary.
//!
//! Every artifact carries the config hash in a leading `#` comment line
//! (CSV) or a field (JSON); commands that consume artifacts refuse
//! mismatched hashes. No command mutates its inputs.

use crate::config::{PredictTarget, RunConfig, ScoreKind};
use crate::fitfile::{FitFile, Timings};
use anyhow::{anyhow, bail, Context, Result};
use occulgm_core::components::BoundModel;
use occulgm_core::data::{
    load_adjacency, load_geometry, load_observations, AdjacencyGraph, ColumnSchema,
    ObservationTable, SiteGeometry, SiteInfo,
};
use occulgm_core::eval;
use occulgm_core::inference::{
    hyper_marginals, latent_marginals, marginal_log_likelihood, optimize_and_explore,
};
use occulgm_core::model::{ComponentKind, SvcBase};
use occulgm_core::predict::{predict_rows, simulate_dataset, svc_significance, TrendLabel};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct LoadedData {
    pub table: ObservationTable,
    pub geometry: Option<SiteGeometry>,
    pub graph: Option<AdjacencyGraph>,
}

fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let data_path = cfg
        .paths
        .data
        .as_ref()
        .ok_or_else(|| anyhow!("config has no paths.data"))?;
    let mut table = load_observations(data_path, &ColumnSchema::default())?;
    for cov in &cfg.data_prep.standardize {
        table.standardize_covariate(cov)?;
    }
    let geometry = cfg
        .paths
        .geometry
        .as_ref()
        .map(|p| load_geometry(p))
        .transpose()?;
    let graph = cfg
        .paths
        .adjacency
        .as_ref()
        .map(|p| load_adjacency(p))
        .transpose()?;
    Ok(LoadedData {
        table,
        geometry,
        graph,
    })
}

fn out_file(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(name)
}

fn create(out_dir: &Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_file(out_dir, name);
    Ok(std::io::BufWriter::new(std::fs::File::create(&path).with_context(
        || format!("cannot create `{}`", path.display()),
    )?))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    seed: u64,
    tool_version: &'a str,
    format_version: u32,
    files: Vec<String>,
}

fn write_manifest(out_dir: &Path, hash: &str, seed: u64, files: &[&str]) -> Result<()> {
    let mut w = create(out_dir, "manifest.json")?;
    let manifest = Manifest {
        config_hash: hash,
        seed,
        tool_version: env!("CARGO_PKG_VERSION"),
        format_version: crate::fitfile::FIT_FORMAT_VERSION,
        files: files.iter().map(|s| s.to_string()).collect(),
    };
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    Ok(())
}

/// Simulate a data set and write observations, geometry, per-row truth and
/// per-node truth fields.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| anyhow!("config has no simulate block"))?;
    let hash = cfg.config_hash();
    let seed = cfg.inference.seed;
    // A grid-region placement defines its own adjacency; otherwise the
    // graph comes from the configured file.
    let graph = if let occulgm_core::predict::SitePlacement::UniformGridRegions { rx, ry, .. } =
        &sim.layout.placement
    {
        Some(occulgm_core::predict::grid_region_graph(*rx, *ry))
    } else {
        cfg.paths
            .adjacency
            .as_ref()
            .map(|p| load_adjacency(p))
            .transpose()?
    };
    let (table, geometry, truth) =
        simulate_dataset(&cfg.model, &sim.layout, &sim.truth, graph.as_ref(), seed)?;
    let out = &cfg.paths.output;

    let mut w = create(out, "observations.csv")?;
    writeln!(w, "# config_hash={hash}")?;
    table.write_csv(&mut w)?;

    let mut w = create(out, "sites.csv")?;
    writeln!(w, "# config_hash={hash}")?;
    let has_points = geometry.sites.values().any(|l| l.point.is_some());
    let has_regions = geometry.sites.values().any(|l| l.region.is_some());
    let header = match (has_points, has_regions) {
        (true, true) => "site,x,y,region",
        (true, false) => "site,x,y",
        _ => "site,region",
    };
    writeln!(w, "{header}")?;
    for (site, info) in &geometry.sites {
        let mut cols = vec![site.clone()];
        if has_points {
            let (x, y) = info.point.unwrap_or((f64::NAN, f64::NAN));
            cols.push(x.to_string());
            cols.push(y.to_string());
        }
        if has_regions {
            cols.push(info.region.clone().unwrap_or_default());
        }
        writeln!(w, "{}", cols.join(","))?;
    }
    // Placements that define their own region grid also publish the
    // matching adjacency file.
    if let occulgm_core::predict::SitePlacement::UniformGridRegions { rx, ry, .. } =
        &sim.layout.placement
    {
        let graph = occulgm_core::predict::grid_region_graph(*rx, *ry);
        let mut w = create(out, "adjacency.txt")?;
        writeln!(w, "# config_hash={hash}")?;
        writeln!(w, "regions: {}", graph.n_regions())?;
        for &(a, b) in &graph.edges {
            writeln!(w, "{} {}", graph.labels[a], graph.labels[b])?;
        }
    }

    let mut w = create(out, "truth.csv")?;
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "site,period,eta,psi,p,z,y")?;
    for r in 0..table.n_rows() {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            table.site_ids[r],
            table.periods[r],
            truth.eta[r],
            truth.psi[r],
            truth.p[r],
            truth.z[r],
            table.y[r]
        )?;
    }

    let mut w = create(out, "truth_fields.csv")?;
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "node,label,value")?;
    for (i, label) in truth.node_labels.iter().enumerate() {
        writeln!(w, "{i},{label},{}", truth.x[i])?;
    }

    write_manifest(
        out,
        &hash,
        seed,
        &["observations.csv", "sites.csv", "truth.csv", "truth_fields.csv"],
    )?;
    log::info!("simulated {} rows into {}", table.n_rows(), out.display());
    Ok(())
}

/// Fit the model and write fit.json, summary.csv and scores.csv.
pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.config_hash();
    let seed = cfg.inference.seed;
    let out = &cfg.paths.output;
    let t_total = Instant::now();

    let t0 = Instant::now();
    let data = load_data(cfg)?;
    let bound = BoundModel::bind(
        &cfg.model,
        &data.table,
        data.geometry.as_ref(),
        data.graph.as_ref(),
    )?;
    let assemble_s = t0.elapsed().as_secs_f64();
    log::info!(
        "assembled model: {} observations, {} latent nodes, {} hyperparameters",
        bound.n_obs(),
        bound.n_latent,
        bound.hyper.dim()
    );

    let fit = optimize_and_explore(&bound, &cfg.inference.explore_options())?;
    for wmsg in &fit.warnings {
        log::warn!("{wmsg}");
    }
    log::info!(
        "explored {} hyperparameter points ({:?})",
        fit.points.len(),
        fit.strategy_used
    );

    // Scores off one shared sample set.
    let t0 = Instant::now();
    let wants = |k: ScoreKind| cfg.eval.scores.contains(&k);
    let samples = if wants(ScoreKind::Waic) || wants(ScoreKind::Dic) || wants(ScoreKind::Lgocv) {
        Some(eval::score_samples(&bound, &fit, cfg.eval.n_samples, seed)?)
    } else {
        None
    };
    let waic = samples
        .as_ref()
        .filter(|_| wants(ScoreKind::Waic))
        .map(|s| eval::waic_from_pointwise(&s.loglik));
    let dic = samples
        .as_ref()
        .filter(|_| wants(ScoreKind::Dic))
        .map(|s| eval::dic_from_samples(&bound, s))
        .transpose()?;
    let lgocv = samples
        .as_ref()
        .filter(|_| wants(ScoreKind::Lgocv))
        .map(|s| -> Result<_> {
            let groups = eval::lgocv_groups(s, cfg.eval.num_level_sets)?;
            Ok(eval::lgocv_logscore(s, &groups, cfg.eval.log_scores)?)
        })
        .transpose()?;
    let mlik = wants(ScoreKind::Mlik).then(|| marginal_log_likelihood(&fit));
    let sample_s = t0.elapsed().as_secs_f64();

    let timings = Timings {
        assemble_s,
        optimize_s: fit.timings.optimize_s,
        explore_s: fit.timings.explore_s,
        sample_s,
        total_s: t_total.elapsed().as_secs_f64(),
    };

    // fit.json
    let fitfile = FitFile::from_fit(&fit, &bound, &hash, seed, timings.clone());
    fitfile.write(&out_file_prepared(out, "fit.json")?)?;

    // summary.csv: fixed effects then hyperparameters.
    let marginals = latent_marginals(&fit);
    let mut w = create(out, "summary.csv")?;
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "parameter,kind,mean,sd,q025,q500,q975")?;
    for name in bound.fixed_effect_names() {
        let i = bound.block_range(&name)?.start;
        let m = &marginals[i];
        writeln!(
            w,
            "{name},fixed,{},{},{},{},{}",
            fmt(m.mean),
            fmt(m.sd),
            fmt(m.q025),
            fmt(m.q500),
            fmt(m.q975)
        )?;
    }
    for s in hyper_marginals(&fit, &bound.hyper) {
        writeln!(
            w,
            "{},hyper,{},{},{},{},{}",
            s.name,
            fmt(s.mean),
            fmt(s.sd),
            fmt(s.q025),
            fmt(s.q500),
            fmt(s.q975)
        )?;
    }
    drop(w);

    // scores.csv
    let mut w = create(out, "scores.csv")?;
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "name,value")?;
    if let Some(r) = &waic {
        writeln!(w, "waic,{}", r.waic)?;
        writeln!(w, "p_waic,{}", r.p_waic)?;
        writeln!(w, "lppd,{}", r.lppd)?;
    }
    if let Some(r) = &dic {
        writeln!(w, "dic,{}", r.dic)?;
        writeln!(w, "p_d,{}", r.p_d)?;
    }
    if let Some(v) = mlik {
        writeln!(w, "marginal_loglik,{v}")?;
    }
    if let Some(r) = &lgocv {
        writeln!(w, "lgocv_logscore,{}", r.score)?;
        if !r.low_ess.is_empty() {
            log::warn!(
                "LGOCV effective sample size below 50 for {} observations",
                r.low_ess.len()
            );
        }
    }
    writeln!(w, "time_assemble_s,{}", timings.assemble_s)?;
    writeln!(w, "time_optimize_s,{}", timings.optimize_s)?;
    writeln!(w, "time_explore_s,{}", timings.explore_s)?;
    writeln!(w, "time_sample_s,{}", timings.sample_s)?;
    writeln!(w, "time_total_s,{}", timings.total_s)?;
    drop(w);

    log::info!(
        "fit complete in {:.2}s; artifacts in {}",
        timings.total_s,
        out.display()
    );
    Ok(())
}

fn out_file_prepared(out: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    Ok(out_file(out, name))
}

fn load_fit(cfg: &RunConfig) -> Result<(LoadedData, BoundModel, occulgm_core::inference::LaplaceFit)> {
    let hash = cfg.config_hash();
    let file = FitFile::read(&out_file(&cfg.paths.output, "fit.json"))?;
    if file.config_hash != hash {
        bail!(
            "fit.json was produced by a different configuration (hash {} vs {}); refusing to mix artifacts",
            file.config_hash,
            hash
        );
    }
    let data = load_data(cfg)?;
    let bound = BoundModel::bind(
        &cfg.model,
        &data.table,
        data.geometry.as_ref(),
        data.graph.as_ref(),
    )?;
    let fit = file.rebuild(&bound)?;
    Ok((data, bound, fit))
}

/// Build the prediction table and geometry for the configured target.
fn prediction_target(
    cfg: &RunConfig,
    data: &LoadedData,
    bound: &BoundModel,
) -> Result<(ObservationTable, Option<SiteGeometry>, Vec<i64>)> {
    let pcfg = cfg
        .predict
        .as_ref()
        .ok_or_else(|| anyhow!("config has no predict block"))?;
    let periods = pcfg.periods.clone().unwrap_or_else(|| bound.periods());
    match pcfg.at {
        PredictTarget::Sites => Ok((data.table.clone(), data.geometry.clone(), periods)),
        PredictTarget::Table => {
            let path = pcfg
                .table
                .as_ref()
                .ok_or_else(|| anyhow!("predict.at = table needs predict.table"))?;
            let table = load_observations(path, &ColumnSchema::default())?;
            Ok((table, data.geometry.clone(), periods))
        }
        PredictTarget::Lattice => {
            let component = pcfg
                .component
                .as_ref()
                .ok_or_else(|| anyhow!("predict.at = lattice needs predict.component"))?;
            let def = cfg
                .model
                .components
                .iter()
                .find(|c| c.name == *component)
                .ok_or_else(|| anyhow!("no component named `{component}`"))?;
            let lattice = match &def.kind {
                ComponentKind::Matern { lattice } => *lattice,
                ComponentKind::SpaceTime { lattice, .. } => *lattice,
                ComponentKind::Svc {
                    base: SvcBase::Matern { lattice },
                    ..
                } => *lattice,
                _ => bail!("component `{component}` has no lattice"),
            };
            let fit_periods = bound.periods();
            let t_mean = (fit_periods.len() as f64 - 1.0) / 2.0;
            let mut geometry = SiteGeometry::default();
            let mut site_ids = Vec::new();
            let mut period_col = Vec::new();
            let mut t_col = Vec::new();
            let mut tc_col = Vec::new();
            // Cells inherit region labels when the simulation layout
            // defines the region grid; areal effects then project onto
            // prediction cells too.
            let region_of_xy: Option<Box<dyn Fn(f64, f64) -> String>> =
                match cfg.simulate.as_ref().map(|s| &s.layout.placement) {
                    Some(occulgm_core::predict::SitePlacement::UniformGridRegions {
                        x0,
                        y0,
                        x1,
                        y1,
                        rx,
                        ry,
                        ..
                    }) => {
                        let (x0, y0, x1, y1, rx, ry) = (*x0, *y0, *x1, *y1, *rx, *ry);
                        Some(Box::new(move |x: f64, y: f64| {
                            let ix = (((x - x0) / (x1 - x0) * rx as f64) as i64)
                                .clamp(0, rx as i64 - 1) as usize;
                            let iy = (((y - y0) / (y1 - y0) * ry as f64) as i64)
                                .clamp(0, ry as i64 - 1) as usize;
                            occulgm_core::predict::grid_region_label(ix, iy)
                        }))
                    }
                    _ => None,
                };
            for &period in &periods {
                let t_idx = fit_periods
                    .iter()
                    .position(|&p| p == period)
                    .ok_or_else(|| anyhow!("period {period} was not in the fitted data"))?
                    as f64;
                for iy in 0..lattice.ny {
                    for ix in 0..lattice.nx {
                        let id = format!("cell_{ix}_{iy}");
                        let cx = lattice.x0 + ix as f64 * lattice.spacing;
                        let cy = lattice.y0 + iy as f64 * lattice.spacing;
                        let mut info = SiteInfo::at(cx, cy);
                        if let Some(region_fn) = &region_of_xy {
                            info = info.with_region(&region_fn(cx, cy));
                        }
                        geometry.sites.entry(id.clone()).or_insert(info);
                        site_ids.push(id);
                        period_col.push(period);
                        t_col.push(t_idx);
                        tc_col.push(t_idx - t_mean);
                    }
                }
            }
            let n = site_ids.len();
            let mut covariates = indexmap::IndexMap::new();
            covariates.insert("_t".to_string(), t_col);
            covariates.insert("_t_centered".to_string(), tc_col);
            // Coordinate covariates declared by the simulation layout are
            // re-derivable at prediction cells.
            if let Some(sim) = &cfg.simulate {
                for cc in &sim.layout.coord_covariates {
                    let col: Vec<f64> = site_ids
                        .iter()
                        .map(|id| {
                            let (x, y) = geometry.sites[id].point.unwrap();
                            match cc.axis {
                                occulgm_core::predict::CoordAxis::X => x,
                                occulgm_core::predict::CoordAxis::Y => y,
                            }
                        })
                        .collect();
                    covariates.insert(cc.name.clone(), col);
                }
            }
            let table =
                ObservationTable::new(site_ids, period_col, vec![0; n], vec![1; n], covariates)?;
            Ok((table, Some(geometry), periods))
        }
    }
}

/// Predict probability surfaces (one CSV per period) and, when requested,
/// significance labels for a space-varying trend component.
pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.config_hash();
    let (data, bound, fit) = load_fit(cfg)?;
    let pcfg = cfg.predict.as_ref().unwrap();
    let n_samples = pcfg.n_samples.unwrap_or(cfg.eval.n_samples);
    let (ptable, pgeom, periods) = prediction_target(cfg, &data, &bound)?;
    let rows = predict_rows(
        &bound,
        &fit,
        &ptable,
        pgeom.as_ref(),
        data.graph.as_ref(),
        n_samples,
        cfg.inference.seed,
    )?;
    let out = &cfg.paths.output;
    for &period in &periods {
        let mut w = create(out, &format!("surface_{period}.csv"))?;
        writeln!(w, "# config_hash={hash}")?;
        writeln!(w, "period,cell_x,cell_y,mean,sd,q025,q500,q975,band,label")?;
        for r in rows.iter().filter(|r| r.period == period) {
            let label = if r.in_domain { "" } else { "outside" };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{label}",
                r.period,
                r.x.map(|v| v.to_string()).unwrap_or_default(),
                r.y.map(|v| v.to_string()).unwrap_or_default(),
                fmt(r.mean),
                fmt(r.sd),
                fmt(r.q025),
                fmt(r.q500),
                fmt(r.q975),
                fmt(r.band)
            )?;
        }
    }
    if let Some(component) = &pcfg.svc {
        let labels = svc_significance(&bound, &fit, component)?;
        let mut w = create(out, "svc_significance.csv")?;
        writeln!(w, "# config_hash={hash}")?;
        writeln!(w, "unit,cell_x,cell_y,mean,sd,q025,q500,q975,band,label")?;
        for s in &labels {
            let label = match s.label {
                TrendLabel::Negative => "negative",
                TrendLabel::None => "none",
                TrendLabel::Positive => "positive",
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{label}",
                s.unit,
                s.x.map(|v| v.to_string()).unwrap_or_default(),
                s.y.map(|v| v.to_string()).unwrap_or_default(),
                fmt(s.marginal.mean),
                fmt(s.marginal.sd),
                fmt(s.marginal.q025),
                fmt(s.marginal.q500),
                fmt(s.marginal.q975),
                fmt(s.marginal.q975 - s.marginal.q025)
            )?;
        }
    }
    log::info!("prediction surfaces written to {}", out.display());
    Ok(())
}

/// Pointwise leave-group-out cross-validation scores.
pub fn cmd_cv(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.config_hash();
    let (_data, bound, fit) = load_fit(cfg)?;
    let samples = eval::score_samples(&bound, &fit, cfg.eval.n_samples, cfg.inference.seed)?;
    let groups = eval::lgocv_groups(&samples, cfg.eval.num_level_sets)?;
    let result = eval::lgocv_logscore(&samples, &groups, cfg.eval.log_scores)?;
    let out = &cfg.paths.output;
    let mut w = create(out, "cv.csv")?;
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "site,period,group_size,pointwise_score,ess")?;
    for i in 0..bound.n_obs() {
        writeln!(
            w,
            "{},{},{},{},{}",
            bound_site(&bound, i),
            bound_period(&bound, i),
            groups.groups[i].len(),
            result.pointwise[i],
            result.ess[i]
        )?;
    }
    drop(w);
    println!("lgocv_score,{}", result.score);
    if !result.low_ess.is_empty() {
        log::warn!(
            "importance weights degraded (ESS < 50) for {} of {} observations",
            result.low_ess.len(),
            bound.n_obs()
        );
    }
    Ok(())
}

// Observation identity passthroughs (the bound model keeps the row order
// of its table).
fn bound_site(bound: &BoundModel, i: usize) -> String {
    bound.row_site(i)
}
fn bound_period(bound: &BoundModel, i: usize) -> i64 {
    bound.row_period(i)
}

/// Human-readable recap of a fit on stdout.
pub fn cmd_summary(cfg: &RunConfig) -> Result<()> {
    let (_data, bound, fit) = load_fit(cfg)?;
    let marginals = latent_marginals(&fit);
    println!("model: {} latent nodes, {} hyperparameters, {} explored points ({:?})",
        bound.n_latent, bound.hyper.dim(), fit.points.len(), fit.strategy_used);
    println!();
    println!("{:<24} {:>10} {:>10} {:>10} {:>10} {:>10}", "parameter", "mean", "sd", "q025", "q500", "q975");
    for name in bound.fixed_effect_names() {
        let i = bound.block_range(&name)?.start;
        let m = &marginals[i];
        println!(
            "{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            name, m.mean, m.sd, m.q025, m.q500, m.q975
        );
    }
    for s in hyper_marginals(&fit, &bound.hyper) {
        println!(
            "{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            s.name, s.mean, s.sd, s.q025, s.q500, s.q975
        );
    }
    // Scores, if the fit directory has them.
    let scores_path = out_file(&cfg.paths.output, "scores.csv");
    if scores_path.exists() {
        println!();
        let text = std::fs::read_to_string(&scores_path)?;
        for line in text.lines().skip(2) {
            if let Some((name, value)) = line.split_once(',') {
                if !name.starts_with("time_") {
                    println!("{name:<24} {value}");
                }
            }
        }
    }
    // Significance counts for every space-varying trend component.
    for def in &cfg.model.components {
        if matches!(def.kind, ComponentKind::Svc { .. }) {
            let labels = svc_significance(&bound, &fit, &def.name)?;
            let count = |l: TrendLabel| labels.iter().filter(|s| s.label == l).count();
            println!();
            println!(
                "trend `{}`: negative {}, none {}, positive {}",
                def.name,
                count(TrendLabel::Negative),
                count(TrendLabel::None),
                count(TrendLabel::Positive)
            );
        }
    }
    Ok(())
}
