use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use msgw::config::{ConfigError, RunConfig};
use msgw::data::{assemble, format_time, load_station_csv, NUM_FEATURES, WIND_SPEED};
use msgw::graph::export_adjacency;
use msgw::model::Network;
use msgw::pipeline::{self, PipelineError};
use msgw::synthetic::{generate, planted_chain, SyntheticSpec};
use msgw::train::{evaluate, persistence_baseline, target_names, Checkpoint, EpochLog, FileStore, Metrics};
use msgw::Tensor;

use crate::{Cli, Command, Failure};

fn invalid(e: ConfigError) -> Failure {
    Failure::Invalid(e.to_string())
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(c) => invalid(c),
        other => Failure::Runtime(other.into()),
    }
}

fn read_config_file(cli: &Cli) -> Result<Option<String>, Failure> {
    cli.config
        .as_ref()
        .map(|p| fs::read_to_string(p).map_err(|e| Failure::Invalid(format!("{}: {e}", p.display()))))
        .transpose()
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut out = cli.set.clone();
    if let Some(seed) = cli.seed {
        out.push(format!("seed={seed}"));
    }
    out
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let text = read_config_file(cli)?;
    let config = RunConfig::load(text.as_deref(), &overrides(cli)).map_err(invalid)?;
    report_warnings(&config);
    Ok(config)
}

fn report_warnings(config: &RunConfig) {
    for w in config.warnings() {
        log::warn!("{w}");
    }
}

/// Checkpoint plus the run config it records, with user overrides on top.
/// The resulting model section must still describe the stored network.
fn load_checkpoint(cli: &Cli, path: &Path) -> Result<(Checkpoint, RunConfig, Network), Failure> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let text = read_config_file(cli)?;
    let config = pipeline::checkpoint_config(&ckpt, text.as_deref(), &overrides(cli)).map_err(invalid)?;
    let model = config.model_config().map_err(invalid)?;
    if model != ckpt.meta.model {
        return Err(Failure::Invalid(format!(
            "configuration describes a different model than {} (check model.* and data.* overrides)",
            path.display()
        )));
    }
    let net = pipeline::restore(&ckpt).map_err(pipeline_failure)?;
    Ok((ckpt, config, net))
}

fn output_dir(config: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config.to_toml()).with_context(|| format!("writing {}/config.toml", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train => train(cli),
        Command::Eval { checkpoint } => eval(cli, checkpoint),
        Command::Predict { checkpoint, input } => predict(cli, checkpoint, input),
        Command::ExportAdjacency { checkpoint, out } => adjacency(cli, checkpoint, out.as_deref()),
        Command::GenSynthetic {
            out,
            hours,
            noise,
            rho,
            self_weight,
        } => gen_synthetic(cli, out, *hours, *noise, *rho, *self_weight),
        Command::DumpPlotData { checkpoint } => dump_plot_data(cli, checkpoint),
    }
}

fn train(cli: &Cli) -> Result<(), Failure> {
    let config = load_config(cli)?;
    let raw = pipeline::load_raw(&config).map_err(pipeline_failure)?;
    let prepared = pipeline::prepare(&config, &raw, None).map_err(pipeline_failure)?;
    let dir = output_dir(&config)?;
    let ckpt_path = dir.join("checkpoint.stgw");
    if ckpt_path.exists() {
        fs::remove_file(&ckpt_path).with_context(|| format!("removing stale {}", ckpt_path.display()))?;
    }
    let mut store = FileStore::new(&ckpt_path);
    let mut log_rows = vec![EpochLog::HEADER.to_owned()];
    let result = pipeline::train_from_config(&config, &prepared, &mut store, |e| log_rows.push(e.to_row()));
    write(&dir.join("train_log.csv"), log_rows.join("\n") + "\n")?;
    let (_, outcome) = result.map_err(pipeline_failure)?;
    println!("checkpoint: {}", ckpt_path.display());
    println!("log: {}", dir.join("train_log.csv").display());
    println!(
        "best epoch {} of {}, validation mse {}",
        outcome.best.meta.epoch,
        outcome.log.len(),
        outcome.best.meta.val_loss
    );
    Ok(())
}

fn eval(cli: &Cli, path: &Path) -> Result<(), Failure> {
    let (ckpt, config, net) = load_checkpoint(cli, path)?;
    let raw = pipeline::load_raw(&config).map_err(pipeline_failure)?;
    let prepared = pipeline::prepare(&config, &raw, ckpt.meta.scaler.as_ref()).map_err(pipeline_failure)?;
    let (model, _) = evaluate(&net, &prepared.test)?;
    let baseline = persistence_baseline(&prepared.test)?;
    let dir = output_dir(&config)?;

    let mut rows = vec!["name,horizon,node,mae,mse".to_owned()];
    rows.extend(model.to_rows("model"));
    rows.extend(baseline.to_rows("persistence"));
    let table = rows.join("\n") + "\n";
    print!("{table}");
    let file = dir.join(format!("metrics_h{}.json", model.horizon));
    let doc = serde_json::json!({
        "checkpoint": path.display().to_string(),
        "config": config.to_flat(),
        "model": model,
        "persistence": baseline,
    });
    write(&file, serde_json::to_string_pretty(&doc).expect("json") + "\n")?;
    eprintln!("wrote {}", file.display());
    Ok(())
}

fn predict(cli: &Cli, path: &Path, input: &Path) -> Result<(), Failure> {
    let (ckpt, config, net) = load_checkpoint(cli, path)?;
    let model = &ckpt.meta.model;
    let scaler = ckpt
        .meta
        .scaler
        .as_ref()
        .ok_or_else(|| Failure::Runtime(anyhow::anyhow!("checkpoint has no scaler")))?;
    let series = config
        .data
        .node_order
        .iter()
        .map(|n| load_station_csv(&input.join(format!("{n}.csv")), config.data.max_gap_hours))
        .collect::<Result<Vec<_>, _>>()?;
    let raw = assemble(&series, &config.data.node_order)?;
    let w = model.window;
    if raw.len() < w {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "input covers {} common hours; the model needs a window of at least {w}",
            raw.len()
        )));
    }
    let recent = scaler.apply(&raw.slice(raw.len() - w, raw.len()))?;
    let n = recent.num_nodes();
    let mut x = vec![0.0; NUM_FEATURES * n * w];
    for d in 0..NUM_FEATURES {
        for j in 0..n {
            for t in 0..w {
                x[(d * n + j) * w + t] = recent.get(t, d, j);
            }
        }
    }
    let x = Tensor::new(vec![1, NUM_FEATURES, n, w], x)?;
    let y = net.predict(&x)?;
    let at = raw.timestamp(raw.len() - 1 + model.horizon);
    println!("node,timestamp,wind_speed");
    for (k, &j) in model.target_nodes.iter().enumerate() {
        let v = scaler.invert(y.data()[k], WIND_SPEED, j);
        println!("{},{},{v}", config.data.node_order[j], format_time(at));
    }
    Ok(())
}

fn adjacency(cli: &Cli, path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let (ckpt, config, net) = load_checkpoint(cli, path)?;
    let adj = net.learned_adjacency(&ckpt.meta.node_order)?;
    let target = match out {
        Some(p) => p.to_owned(),
        None => output_dir(&config)?.join("adjacency.csv"),
    };
    export_adjacency(&adj, &target)?;
    println!("{}", target.display());
    Ok(())
}

fn gen_synthetic(cli: &Cli, out: &Path, hours: usize, noise: f64, rho: f64, self_weight: f64) -> Result<(), Failure> {
    let config = load_config(cli)?;
    let n = config.data.node_order.len();
    if !(0.0..=1.0).contains(&self_weight) {
        return Err(Failure::Invalid(format!("self-weight {self_weight} must lie in [0, 1]")));
    }
    let spec = SyntheticSpec {
        node_names: config.data.node_order.clone(),
        true_adjacency: planted_chain(n.max(2), self_weight),
        ar_coefficient: rho,
        noise_std: noise,
        length: hours,
        seed: config.seed,
        ..SyntheticSpec::chain(hours, config.seed)
    };
    spec.validate().map_err(|e| Failure::Invalid(e.to_string()))?;
    let stations = generate(&spec).map_err(|e| Failure::Invalid(e.to_string()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for s in &stations {
        write(&out.join(format!("{}.csv", s.name)), s.to_csv())?;
    }
    let truth = out.join("truth.json");
    write(&truth, serde_json::to_string_pretty(&spec).expect("json") + "\n")?;
    println!("wrote {} stations of {hours} hours and {}", stations.len(), truth.display());
    Ok(())
}

fn dump_plot_data(cli: &Cli, path: &Path) -> Result<(), Failure> {
    let (ckpt, config, net) = load_checkpoint(cli, path)?;
    let raw = pipeline::load_raw(&config).map_err(pipeline_failure)?;
    let prepared = pipeline::prepare(&config, &raw, ckpt.meta.scaler.as_ref()).map_err(pipeline_failure)?;
    let test = &prepared.test;
    let (metrics, pred): (Metrics, Vec<f64>) = evaluate(&net, test)?;
    let dir = output_dir(&config)?;
    let names = target_names(test);
    let k = names.len();
    for (j, name) in names.iter().enumerate() {
        let mut rows = vec!["timestamp,actual,predicted".to_owned()];
        for s in 0..test.len() {
            rows.push(format!(
                "{},{},{}",
                format_time(test.target_time(s)),
                test.targets(s)[j],
                pred[s * k + j]
            ));
        }
        let file = dir.join(format!("plot_h{}_{name}.csv", metrics.horizon));
        write(&file, rows.join("\n") + "\n")?;
        println!("{}", file.display());
    }
    let adj_path = dir.join("adjacency.csv");
    export_adjacency(&net.learned_adjacency(&ckpt.meta.node_order)?, &adj_path)?;
    println!("{}", adj_path.display());
    Ok(())
}
