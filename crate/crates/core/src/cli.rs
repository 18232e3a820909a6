//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when the input is invalid (the message names the
//! offending key), 2 when a computation fails. Partial outputs are flushed
//! before a failing `simulate` returns.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::dynamics::{detect_phase_times, run_training, Drive, Driver, TrainOutcome};
use crate::error::{Error, Result};
use crate::harness::{rises_during_plateau, run_generalization, run_sweep, run_xor_demo, summarize};
use crate::output::{self, real, write_csv, write_sidecar, Table};
use crate::stats::{build_correlations_allow_singular, effective_correlation_b, sample_dataset, CorrelationStats};
use crate::theory::{self, DepthSpec};

#[derive(Debug, Parser)]
#[command(name = "unibias", version, about = "Gradient-descent simulator and learning-time theory for two-modality fusion networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Correlation statistics, fixed points and preference of a dataset.
    Stats(CommonArgs),
    /// Train one network and write its trajectory.
    Simulate(CommonArgs),
    /// Analytic phase times and time ratio.
    Predict(CommonArgs),
    /// Sweep one axis over seeds, comparing simulation with theory.
    Sweep(CommonArgs),
    /// Finite-sample generalization run.
    Genexp(CommonArgs),
    /// ReLU networks on a linear plus XOR task.
    Xor(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set network.L_f=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for sampling and initialisation; replaces configured seed lists.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonArgs {
    fn load(&self) -> Result<Config> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::invalid("--config", format!("{}: {e}", path.display())))?;
                Config::parse(&text, &self.overrides)?
            }
            None => Config::parse("schema = 1", &self.overrides)?,
        };
        if let Some(seed) = self.seed {
            config.set_seed(seed);
        }
        Ok(config)
    }

    fn out_dir(&self, default: &str) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// Runs the command line and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Stats(a) => cmd_stats(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Genexp(a) => cmd_genexp(a),
        Command::Xor(a) => cmd_xor(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn population(config: &Config) -> Result<CorrelationStats> {
    let spec = config.dataset_spec()?;
    build_correlations_allow_singular(&spec).map_err(|e| match e {
        Error::NonPositiveDefinite { .. } => Error::invalid("dataset.sigma", e.to_string()),
        e => e,
    })
}

fn vector(v: &nalgebra::DVector<f64>) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", items.join(", "))
}

fn sidecar(path: &Path, command: &str, config: &Config, extra: toml::Table) -> Result<()> {
    let mut meta = toml::Table::new();
    meta.insert("command".into(), command.into());
    meta.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    meta.insert("config".into(), toml::Value::Table(config.to_table()));
    if !extra.is_empty() {
        meta.insert("results".into(), toml::Value::Table(extra));
    }
    write_sidecar(path, &meta)
}

fn base_table(table: Table, command: &str, config: &Config) -> Table {
    table
        .meta("command", command)
        .meta("schema", config.schema)
        .meta("version", env!("CARGO_PKG_VERSION"))
        .meta("seed", config.network.seed)
}

fn cmd_stats(args: &CommonArgs) -> Result<()> {
    let config = args.load()?;
    let stats = population(&config)?;
    println!("sigma_A {:?}", stats.sigma_a.as_slice());
    println!("sigma_B {:?}", stats.sigma_b.as_slice());
    println!("sigma_AB {:?}", stats.sigma_ab.as_slice());
    println!("sigma_yx_A {}", vector(&stats.sigma_yx_a));
    println!("sigma_yx_B {}", vector(&stats.sigma_yx_b));
    println!("y_sq {:?}", stats.y_sq);
    let (ga, gb) = stats.global_solution();
    println!("global_A {}", vector(&ga));
    println!("global_B {}", vector(&gb));
    if let Ok(eff) = effective_correlation_b(&stats) {
        println!("eff_corr_B {}", vector(&eff));
    }
    match theory::saddle_losses(&stats) {
        Ok((la, lb)) => println!("saddle_loss_A {la:?}\nsaddle_loss_B {lb:?}"),
        Err(e) => println!("saddle_loss unavailable: {e}"),
    }
    match theory::superficial_preference(&stats) {
        Ok(p) => println!("first {}\nsuperficial {}", p.first, p.superficial),
        Err(e) => println!("first tie ({e})"),
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let mut table = base_table(Table::new(&["quantity", "i", "j", "value"]), "stats", &config);
        let blocks = [
            ("sigma_A", &stats.sigma_a),
            ("sigma_B", &stats.sigma_b),
            ("sigma_AB", &stats.sigma_ab),
        ];
        for (name, m) in blocks {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    table.push(vec![name.into(), i.to_string(), j.to_string(), real(m[(i, j)])]);
                }
            }
        }
        for (name, v) in [("sigma_yx_A", &stats.sigma_yx_a), ("sigma_yx_B", &stats.sigma_yx_b)] {
            for (i, x) in v.iter().enumerate() {
                table.push(vec![name.into(), i.to_string(), String::new(), real(*x)]);
            }
        }
        table.push(vec!["y_sq".into(), String::new(), String::new(), real(stats.y_sq)]);
        let path = dir.join("stats.csv");
        write_csv(&table, &path)?;
        sidecar(&path, "stats", &config, toml::Table::new())?;
    }
    Ok(())
}

fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let config = args.load()?;
    let spec = config.dataset_spec()?;
    let fusion = config.fusion(spec.dims_a, spec.dims_b)?;
    let train = config.train()?;
    let dir = args.out_dir("out")?;
    let stats = population(&config)?;
    let mut net = crate::network::init_network(&fusion)?;
    let samples;
    let driver = match train.drive {
        Drive::Correlation => Driver::Stats(&stats),
        Drive::Samples => {
            samples = sample_dataset(&spec, config.training.samples, fusion.seed)?;
            Driver::Samples(&samples)
        }
    };
    let TrainOutcome { trajectory, error } = run_training(&mut net, driver, &train, None);
    let mut table = base_table(
        output::trajectory_table(&trajectory, config.training.record_maps),
        "simulate",
        &config,
    );
    if let Some(e) = &error {
        table = table.meta("status", format!("failed: {e}"));
    }
    let path = dir.join("trajectory.csv");
    write_csv(&table, &path)?;
    let mut results = toml::Table::new();
    results.insert("records".into(), (trajectory.len() as i64).into());
    if let Some(last) = trajectory.last() {
        results.insert("final_loss".into(), last.loss.into());
        println!("steps {}", last.step);
        println!("final_loss {:?}", last.loss);
        println!("norm_wA {:?}\nnorm_wB {:?}", last.norm_wtot_a, last.norm_wtot_b);
    }
    if net.is_linear() {
        if let Ok(p) = detect_phase_times(&trajectory, &stats) {
            println!("first_modality {}", p.first_modality);
            println!("t_first {:?}", p.t_first);
            match p.t_second {
                Some(t) => println!("t_second {t:?}\nsimulated_ratio {:?}", t / p.t_first),
                None => println!("t_second none"),
            }
        }
    }
    if train.record_first_layer {
        if let Some(last) = trajectory.last() {
            if let (Some(wa), Some(wb)) = (&last.first_layer_a, &last.first_layer_b) {
                let fl = first_layer_table(wa, wb);
                write_csv(&base_table(fl, "simulate", &config), &dir.join("first_layer.csv"))?;
            }
        }
    }
    sidecar(&path, "simulate", &config, results)?;
    match error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn first_layer_table(wa: &nalgebra::DMatrix<f64>, wb: &nalgebra::DMatrix<f64>) -> Table {
    let mut header = vec!["unit".to_string()];
    header.extend((0..wa.ncols()).map(|i| format!("wA_{i}")));
    header.extend((0..wb.ncols()).map(|i| format!("wB_{i}")));
    let mut table = Table::new(&header);
    for u in 0..wa.nrows().max(wb.nrows()) {
        let mut row = vec![u.to_string()];
        for (m, n) in [(wa, wa.ncols()), (wb, wb.ncols())] {
            for j in 0..n {
                row.push(if u < m.nrows() { real(m[(u, j)]) } else { String::new() });
            }
        }
        table.push(row);
    }
    table
}

fn cmd_predict(args: &CommonArgs) -> Result<()> {
    let config = args.load()?;
    let stats = population(&config)?;
    let fusion = config.fusion(stats.dims_a(), stats.dims_b())?;
    let depth = DepthSpec::new(fusion.l, fusion.l_f);
    let u0 = fusion.init.u0(fusion.width);
    let p = theory::predict(&stats, &depth, u0, 1.0).map_err(|e| match e {
        Error::BadDomain(msg) => Error::invalid("network.u0", msg),
        e => e,
    })?;
    println!("first_modality {}", p.first_modality);
    println!("t_A {:?}", p.t_a);
    println!("t_B {:?}", p.t_b);
    println!("ratio {:?}", p.ratio.value());
    println!("k {:?}", p.k);
    println!("eff_corr_norm {:?}", p.eff_corr_norm);
    println!("misattribution {}", vector(&p.misattribution));
    if let Some(i) = p.integral_value {
        println!("integral {i:?}");
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let mut table = base_table(
            Table::new(&["first_modality", "t_A", "t_B", "ratio", "k", "eff_corr_norm", "integral"]),
            "predict",
            &config,
        );
        table.push(vec![
            p.first_modality.to_string(),
            real(p.t_a),
            real(p.t_b),
            real(p.ratio.value()),
            real(p.k),
            real(p.eff_corr_norm),
            output::opt_real(p.integral_value),
        ]);
        let path = dir.join("predict.csv");
        write_csv(&table, &path)?;
        sidecar(&path, "predict", &config, toml::Table::new())?;
    }
    Ok(())
}

fn cmd_sweep(args: &CommonArgs) -> Result<()> {
    let config = args.load()?;
    let spec = config.sweep_spec()?;
    let dir = args.out_dir("out")?;
    let rows = run_sweep(&spec)?;
    let summary = summarize(&rows);
    let axis = spec.axis.name();
    let rows_path = dir.join("sweep.csv");
    write_csv(&base_table(output::sweep_table(&rows), "sweep", &config).meta("axis", axis), &rows_path)?;
    let summary_path = dir.join("sweep_summary.csv");
    write_csv(
        &base_table(output::summary_table(&summary), "sweep", &config).meta("axis", axis),
        &summary_path,
    )?;
    let mut results = toml::Table::new();
    results.insert(
        "seeds".into(),
        toml::Value::Array(spec.seeds.iter().map(|&s| toml::Value::Integer(s as i64)).collect()),
    );
    sidecar(&rows_path, "sweep", &config, results)?;
    println!("{axis} sim_mean sim_std predicted");
    for s in &summary {
        println!("{:?} {:?} {:?} {:?}", s.axis_value, s.sim_ratio_mean, s.sim_ratio_std, s.pred_ratio);
    }
    Ok(())
}

fn cmd_genexp(args: &CommonArgs) -> Result<()> {
    let config = args.load()?;
    let spec = config.genexp_spec()?;
    let dir = args.out_dir("out")?;
    let res = run_generalization(&spec)?;
    let path = dir.join("genexp.csv");
    write_csv(&base_table(output::trajectory_table(&res.trajectory, false), "genexp", &config), &path)?;
    let mut results = toml::Table::new();
    results.insert("t_opt_stop".into(), res.t_opt_stop.into());
    results.insert("gen_at_opt".into(), res.gen_at_opt.into());
    results.insert("final_gen".into(), res.final_gen.into());
    results.insert("unimodal_baseline".into(), res.unimodal_baseline.into());
    results.insert("unimodal_at_opt".into(), res.unimodal_at_opt.into());
    if let Some(t) = res.t_1 {
        results.insert("t_1".into(), t.into());
    }
    if let Some(t) = res.t_2 {
        results.insert("t_2".into(), t.into());
    }
    sidecar(&path, "genexp", &config, results)?;
    println!("first_modality {}", res.first_modality);
    println!("t_1 {:?}\nt_2 {:?}", res.t_1, res.t_2);
    println!("t_opt_stop {:?}\ngen_at_opt {:?}\nfinal_gen {:?}", res.t_opt_stop, res.gen_at_opt, res.final_gen);
    println!("unimodal_baseline {:?}", res.unimodal_baseline);
    println!("unimodal_at_opt {}", res.unimodal_at_opt);
    println!("rises_during_plateau {}", rises_during_plateau(&res));
    Ok(())
}

fn cmd_xor(args: &CommonArgs) -> Result<()> {
    let config = args.load()?;
    let specs = config.xor_specs()?;
    let dir = args.out_dir("out")?;
    let mut table = base_table(Table::new(&["seed", "final_loss", "steps"]), "xor", &config);
    for spec in &specs {
        let res = run_xor_demo(spec)?;
        let steps = res.trajectory.last().map_or(0, |s| s.step);
        println!("seed {} final_loss {:?}", spec.seed, res.final_loss);
        table.push(vec![spec.seed.to_string(), real(res.final_loss), steps.to_string()]);
        let fl = first_layer_table(&res.first_layer_a, &res.first_layer_b);
        write_csv(
            &base_table(fl, "xor", &config),
            &dir.join(format!("xor_first_layer_seed{}.csv", spec.seed)),
        )?;
    }
    let path = dir.join("xor.csv");
    write_csv(&table, &path)?;
    sidecar(&path, "xor", &config, toml::Table::new())?;
    Ok(())
}
