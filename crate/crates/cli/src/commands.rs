use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde_json::json;
use spatial_lc::data::{default_age_grouping, load_adjacency, load_dataset, period_mapping, write_adjacency, MortalityDataset};
use spatial_lc::graph::SpatialGraph;
use spatial_lc::inference::{classic_lc_dataset, fit_dataset, mcmc_fit, FitSettings, McmcSettings};
use spatial_lc::model::{Hyperparameters, Model, ModelSpec, Variant};
use spatial_lc::outputs::{self, export_geojoin, Quantity, SummaryTable, DEFAULT_SELECTED_AGES};
use spatial_lc::simulate::{demographic_profile, simulate, write_truth, GraphSource, LatentSource, SimulationConfig};

use crate::config::RunConfig;
use crate::{ClassicArgs, Command, DataArgs, FitArgs, GeojoinArgs, McmcArgs, ModelArgs, SimulateArgs, SummarizeArgs};

type CmdResult = Result<u8, String>;

pub fn run(command: Command, config: &RunConfig) -> CmdResult {
    match command {
        Command::Fit(a) => cmd_fit(a, config),
        Command::Simulate(a) => cmd_simulate(a, config),
        Command::Mcmc(a) => cmd_mcmc(a, config),
        Command::Classic(a) => cmd_classic(a, config),
        Command::Summarize(a) => cmd_summarize(a),
        Command::Geojoin(a) => cmd_geojoin(a),
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf, String> {
    value.ok_or_else(|| format!("missing --{flag} (or the matching config key)"))
}

fn existing(path: &Path, what: &str) -> Result<(), String> {
    if path.is_file() {
        Ok(())
    } else {
        Err(format!("{what} file not found: {}", path.display()))
    }
}

fn create_dir(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create output directory {}: {e}", dir.display()))
}

struct Inputs {
    data: MortalityDataset,
    graph: SpatialGraph,
}

fn load_inputs(args: &DataArgs, config: &RunConfig) -> Result<Inputs, String> {
    let c = &config.data;
    let deaths = required(args.deaths.clone().or(c.deaths.clone()), "deaths")?;
    let exposures = required(args.exposures.clone().or(c.exposures.clone()), "exposures")?;
    let adjacency = required(args.adjacency.clone().or(c.adjacency.clone()), "adjacency")?;
    existing(&deaths, "deaths")?;
    existing(&exposures, "exposures")?;
    existing(&adjacency, "adjacency")?;
    let mut data = load_dataset(&deaths, &exposures).map_err(err)?;
    if let Some(g) = args.gender.clone().or(c.gender.clone()) {
        data = data.with_label(g);
    }
    let graph = load_adjacency(&adjacency, data.areas()).map_err(err)?;
    Ok(Inputs { data, graph })
}

fn model_spec(args: &ModelArgs, config: &RunConfig, data: &MortalityDataset) -> Result<ModelSpec, String> {
    let c = &config.model;
    let variant: Variant = args
        .variant
        .clone()
        .or(c.variant.clone())
        .unwrap_or_else(|| "static".into())
        .parse()
        .map_err(err)?;
    let cut = args.cut_year.or(c.cut_year);
    if variant == Variant::Period && cut.is_none() {
        return Err("the period variant needs --cut-year".into());
    }
    let cut = if variant == Variant::Static { None } else { cut };
    let grouping = default_age_grouping(data.ages()).map_err(err)?;
    let periods = period_mapping(data.years(), cut).map_err(err)?;
    let mut spec = ModelSpec::new(variant, grouping, periods).map_err(err)?;
    spec.share_spatial_hyper = args.share_spatial_hyper || c.share_spatial_hyper.unwrap_or(false);
    if let Some(p) = &config.priors {
        spec.priors = p.clone();
    }
    Ok(spec)
}

fn cmd_fit(a: FitArgs, config: &RunConfig) -> CmdResult {
    let out = required(a.out.clone().or(config.output.dir.clone()), "out")?;
    let geojson = a.geojson.clone().or(config.fit.geojson.clone());
    if let Some(g) = &geojson {
        existing(g, "GeoJSON")?;
    }
    let inputs = load_inputs(&a.data, config)?;
    let spec = model_spec(&a.model, config, &inputs.data)?;
    let mut settings = FitSettings::default();
    let f = &config.fit;
    if let Some(s) = a.seed.or(f.seed) {
        settings.seed = s;
    }
    if let Some(n) = a.samples.or(f.samples) {
        settings.n_samples = n;
    }
    let o = &config.optimizer;
    if let Some(n) = a.max_evaluations.or(o.max_evaluations) {
        settings.optimizer.max_evaluations = n;
    }
    if let Some(t) = a.tolerance.or(o.tolerance) {
        settings.optimizer.tolerance = t;
    }
    if let Some(s) = o.initial_step {
        settings.optimizer.initial_step = s;
    }
    let selected = a
        .selected_ages
        .clone()
        .or(f.selected_ages.clone())
        .unwrap_or_else(|| DEFAULT_SELECTED_AGES.to_vec());
    create_dir(&out)?;

    if a.dump_structure {
        let model = Model::new(&inputs.data, &inputs.graph, spec.clone()).map_err(err)?;
        let path = out.join("structure.txt");
        let file = fs::File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut w = BufWriter::new(file);
        model.spatial.structure.write_coordinates(&mut w).map_err(|e| format!("{}: {e}", path.display()))?;
        w.flush().map_err(|e| format!("{}: {e}", path.display()))?;
    }

    let start = Instant::now();
    let result = fit_dataset(&inputs.data, &inputs.graph, spec, &settings).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let tables = outputs::write_bundle(&out, &result, Some(&inputs.data), &selected, Some(secs)).map_err(err)?;
    if let Some(g) = geojson {
        let omega = tables.iter().find(|t| t.quantity == Quantity::Omega).expect("omega table");
        let report = export_geojoin(omega, &g, &out.join("omega_map.geojson")).map_err(err)?;
        info!("geojoin: {} features matched", report.matched);
    }
    info!("fit written to {} in {secs:.1} s", out.display());
    if result.convergence.converged() {
        Ok(0)
    } else {
        eprintln!("warning: the fit did not converge; outputs are flagged in convergence.json");
        Ok(2)
    }
}

fn cmd_simulate(a: SimulateArgs, config: &RunConfig) -> CmdResult {
    let c = &config.simulate;
    let out = required(a.out.clone().or(config.output.dir.clone()), "out")?;
    let ages = a.ages.or(c.ages).ok_or("missing --ages")?;
    let years = a.years.or(c.years).ok_or("missing --years")?;
    let graph_kind = a.graph.clone().or(c.graph.clone()).unwrap_or_else(|| "ring".into());
    let graph = match graph_kind.as_str() {
        "ring" => GraphSource::Ring(a.areas.or(c.areas).ok_or("missing --areas for the ring graph")?),
        "grid" => GraphSource::Grid(
            a.grid_rows.or(c.grid_rows).ok_or("missing --grid-rows")?,
            a.grid_cols.or(c.grid_cols).ok_or("missing --grid-cols")?,
        ),
        "file" => {
            let p = required(a.adjacency.clone().or(c.adjacency.clone()), "adjacency")?;
            existing(&p, "adjacency")?;
            GraphSource::File(p)
        }
        other => return Err(format!("unknown graph `{other}` (expected ring, grid or file)")),
    };
    let mut cfg = SimulationConfig::new(ages, years, graph);
    if let Some(v) = a.first_age.or(c.first_age) {
        cfg.first_age = v;
    }
    if let Some(v) = a.first_year.or(c.first_year) {
        cfg.first_year = v;
    }
    cfg.cut_year = a.cut_year.or(config.model.cut_year);
    if let Some(v) = a.sigma_z.or(c.sigma_z) {
        cfg.hyper.sigma_z = v;
    }
    if let Some(v) = a.sigma_kappa.or(c.sigma_kappa) {
        cfg.hyper.sigma_kappa = v;
    }
    if let Some(v) = a.sigma_omega.clone().or(c.sigma_omega.clone()) {
        cfg.hyper.sigma_omega = v;
    }
    if let Some(v) = a.phi.clone().or(c.phi.clone()) {
        cfg.hyper.phi = v;
    }
    if let Some(v) = a.exposure.or(c.exposure) {
        cfg.exposure = v;
    }
    if let Some(v) = a.seed.or(c.seed) {
        cfg.seed = v;
    }
    if let Some(trend) = a.trend.or(c.trend) {
        let age_list: Vec<u32> = (0..ages as u32).map(|x| cfg.first_age + x).collect();
        let (alpha, beta, kappa) = demographic_profile(&age_list, years, trend);
        cfg.latent = LatentSource::Supplied { alpha, beta, kappa };
    }
    let sim = simulate(&cfg).map_err(err)?;
    create_dir(&out)?;
    sim.data.write(&out.join("deaths.csv"), &out.join("exposures.csv")).map_err(err)?;
    write_adjacency(&out.join("adjacency.txt"), &sim.graph, sim.data.areas()).map_err(err)?;
    write_truth(&out.join("truth_latent.csv"), &sim.truth, &sim.hyper).map_err(err)?;
    info!("simulated {} cells into {}", sim.data.n_cells(), out.display());
    Ok(0)
}

fn cmd_mcmc(a: McmcArgs, config: &RunConfig) -> CmdResult {
    let c = &config.mcmc;
    let out = required(a.out.clone().or(config.output.dir.clone()), "out")?;
    let hyper_from = a.hyper_from.clone().or(c.hyper_from.clone());
    if let Some(p) = &hyper_from {
        existing(p, "fit result")?;
    }
    let inputs = load_inputs(&a.data, config)?;
    let spec = model_spec(&a.model, config, &inputs.data)?;
    let model = Model::new(&inputs.data, &inputs.graph, spec).map_err(err)?;
    let mut settings = McmcSettings::default();
    if let Some(v) = a.iters.or(c.iterations) {
        settings.iterations = v;
    }
    if let Some(v) = a.burn.or(c.burn_in) {
        settings.burn_in = v;
    }
    if let Some(v) = a.thin.or(c.thin) {
        settings.thin = v;
    }
    if let Some(v) = a.seed.or(c.seed) {
        settings.seed = v;
    }
    settings.fixed_hyper = a.fixed_hyper || c.fixed_hyper.unwrap_or(false);
    if let Some(p) = hyper_from {
        let fit = outputs::load_fit_result(&p).map_err(err)?;
        settings.hyper = Some(fit.hyper);
    }
    let chain = mcmc_fit(&model, &settings).map_err(err)?;
    create_dir(&out)?;
    chain.write_csv(&out.join("chain.csv")).map_err(err)?;
    let summary = json!({
        "seed": chain.seed,
        "iterations": chain.iterations,
        "burn_in": chain.burn_in,
        "thin": chain.thin,
        "fixed_hyper": settings.fixed_hyper,
        "hyper": settings.hyper.as_ref().map(hyper_json),
        "acceptance": chain.acceptance,
        "low_acceptance": chain.low_acceptance,
    });
    write_json(&out.join("mcmc.json"), &summary)?;
    Ok(0)
}

fn hyper_json(h: &Hyperparameters) -> serde_json::Value {
    serde_json::to_value(h).expect("hyperparameters serialise")
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), String> {
    let mut s = serde_json::to_string_pretty(value).map_err(err)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_estimates(path: &Path, key: &str, labels: &[String], values: &[f64]) -> Result<(), String> {
    let mut text = format!("{key},estimate\n");
    for (l, v) in labels.iter().zip(values) {
        text.push_str(&format!("{l},{}\n", outputs::format_number(*v)));
    }
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_classic(a: ClassicArgs, config: &RunConfig) -> CmdResult {
    let deaths = required(a.deaths.or(config.data.deaths.clone()), "deaths")?;
    let exposures = required(a.exposures.or(config.data.exposures.clone()), "exposures")?;
    let out = required(a.out.or(config.output.dir.clone()), "out")?;
    existing(&deaths, "deaths")?;
    existing(&exposures, "exposures")?;
    let data = load_dataset(&deaths, &exposures).map_err(err)?;
    let fit = classic_lc_dataset(&data).map_err(err)?;
    create_dir(&out)?;
    let ages: Vec<String> = data.ages().iter().map(u32::to_string).collect();
    let years: Vec<String> = data.years().iter().map(i32::to_string).collect();
    write_estimates(&out.join("alpha.csv"), "age", &ages, &fit.alpha)?;
    write_estimates(&out.join("beta.csv"), "age", &ages, &fit.beta)?;
    write_estimates(&out.join("kappa.csv"), "year", &years, &fit.kappa)?;
    let summary = json!({
        "singular_value": fit.singular_value,
        "explained": fit.explained,
        "degenerate": fit.degenerate,
    });
    write_json(&out.join("classic.json"), &summary)?;
    if fit.degenerate {
        eprintln!("warning: no time variation in the log rates; kappa set to zero and beta is not identified");
    }
    Ok(0)
}

fn cmd_summarize(a: SummarizeArgs) -> CmdResult {
    let path = a.bundle.join("fit_result.json");
    existing(&path, "fit result")?;
    let fit = outputs::load_fit_result(&path).map_err(err)?;
    let out = a.out.unwrap_or(a.bundle);
    create_dir(&out)?;
    let selected = a.selected_ages.unwrap_or_else(|| DEFAULT_SELECTED_AGES.to_vec());
    for t in outputs::summarize(&fit, &selected) {
        t.write_csv(&out.join(outputs::table_file_name(t.quantity))).map_err(err)?;
    }
    match (a.deaths, a.exposures) {
        (Some(d), Some(e)) => {
            existing(&d, "deaths")?;
            existing(&e, "exposures")?;
            let data = load_dataset(&d, &e).map_err(err)?;
            let diag = outputs::deviance(&fit, &data).map_err(err)?;
            write_json(&out.join("diagnostics.json"), &serde_json::to_value(diag).map_err(err)?)?;
        }
        (None, None) => {}
        _ => return Err("--deaths and --exposures must be given together".into()),
    }
    Ok(0)
}

fn cmd_geojoin(a: GeojoinArgs) -> CmdResult {
    existing(&a.omega, "omega table")?;
    existing(&a.geojson, "GeoJSON")?;
    let table = SummaryTable::read_csv(&a.omega, Quantity::Omega, &["area", "group", "period"]).map_err(err)?;
    let report = export_geojoin(&table, &a.geojson, &a.out).map_err(err)?;
    info!(
        "geojoin: {} matched, {} unmatched features, {} areas without a feature",
        report.matched,
        report.unmatched_features.len(),
        report.missing_areas.len()
    );
    Ok(0)
}
