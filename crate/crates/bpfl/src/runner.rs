//! Experiment assembly and execution: synthesizes the federation from a
//! config, drives the round loop for the selected protocol, and writes the
//! run artifacts (metrics.csv, summary.json, run.log, final.ckpt).

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde_json::json;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{ExperimentConfig, Protocol, Regime};
use crate::data::{gen_blobs, partition_dirichlet, partition_uniform, resolution_shift};
use crate::error::{Error, Result};
use crate::nn::{init_mlp, ParamSet};
use crate::protocol::{
    baseline_local_only_round, broadcast_bypass, fedavg_finetune, fedavg_round,
    param_count_report, run_round, ClientState, GlobalBypass, ParamCountReport, RoundReport,
    Shard, TrainConfig,
};
use crate::util::{derive_seed, rng_from};

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub server: GlobalBypass,
    pub clients: Vec<ClientState>,
    pub start_round: usize,
}

pub fn train_config(cfg: &ExperimentConfig, threads: usize) -> TrainConfig {
    TrainConfig {
        epochs_local: cfg.epochs_local,
        epochs_global: cfg.epochs_global,
        batch_size: cfg.batch_size,
        loss_weights: cfg.loss_weights,
        ablation: cfg.ablation,
        seed: cfg.seed,
        uniform_aggregation: cfg.uniform_aggregation,
        finetune_epochs: cfg.finetune_epochs,
        threads,
    }
}

/// Synthesizes the dataset, partitions it, applies per-client resolution
/// shifts, splits each shard 80/20, and seeds every model. All randomness
/// derives from the config seed, so the same config always yields the same
/// federation.
pub fn build_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let ds = gen_blobs(
        cfg.samples,
        cfg.input_dim,
        cfg.classes,
        cfg.separation,
        derive_seed(&[cfg.seed, 0x64617461]),
    )?;
    let plan = match cfg.regime {
        Regime::LabelSkew => {
            partition_dirichlet(&ds, cfg.clients, cfg.alpha, derive_seed(&[cfg.seed, 0x70617274]))?
        }
        Regime::Resolution => {
            partition_uniform(&ds, cfg.clients, derive_seed(&[cfg.seed, 0x70617274]))?
        }
    };
    let mut clients = Vec::with_capacity(cfg.clients);
    for (id, idx) in plan.shards.iter().enumerate() {
        let mut sub = ds.subset(idx)?;
        if cfg.regime == Regime::Resolution {
            sub = resolution_shift(&sub, cfg.resolution_factors[id])?;
        }
        let shard = Shard::split(
            sub.features,
            sub.labels,
            derive_seed(&[cfg.seed, 0x73706c74, id as u64]),
        )?;
        let mut rng = rng_from(&[cfg.seed, 0x696e6974, id as u64]);
        clients.push(ClientState::new(
            id,
            cfg.input_dim,
            cfg.classes,
            &cfg.client_widths[id],
            &cfg.bypass_widths,
            cfg.optimizer,
            cfg.lr_local,
            cfg.lr_global,
            shard,
            &mut rng,
        )?);
    }
    // every client starts from the same broadcast bypass
    let mut srng = rng_from(&[cfg.seed, 0x73727672]);
    let server = GlobalBypass {
        body: init_mlp(&clients[0].bypass_body_spec, &mut srng)?,
        head: init_mlp(&clients[0].bypass_head_spec, &mut srng)?,
    };
    broadcast_bypass(&server, &mut clients);
    Ok(Experiment {
        cfg: cfg.clone(),
        server,
        clients,
        start_round: 0,
    })
}

pub fn run_one_round(exp: &mut Experiment, tc: &TrainConfig, round: usize) -> Result<RoundReport> {
    match exp.cfg.method {
        Protocol::MhPflgb => run_round(&mut exp.server, &mut exp.clients, tc, round),
        Protocol::LocalOnly => baseline_local_only_round(&mut exp.clients, tc, round),
        Protocol::FedAvg | Protocol::FedAvgFt => fedavg_round(&mut exp.clients, tc, round),
    }
}

/// Runs all remaining rounds (plus the fine-tuning pass for fedavg_ft),
/// invoking `on_round` after each.
pub fn run_protocol(
    exp: &mut Experiment,
    threads: usize,
    mut on_round: impl FnMut(&RoundReport) -> Result<()>,
) -> Result<Vec<RoundReport>> {
    let tc = train_config(&exp.cfg, threads);
    let mut reports = Vec::new();
    for round in exp.start_round..exp.cfg.rounds {
        let report = run_one_round(exp, &tc, round)?;
        on_round(&report)?;
        reports.push(report);
    }
    if exp.cfg.method == Protocol::FedAvgFt {
        let report = fedavg_finetune(&mut exp.clients, &tc, exp.cfg.rounds)?;
        on_round(&report)?;
        reports.push(report);
    }
    exp.start_round = exp.cfg.rounds;
    Ok(reports)
}

// -- checkpointing -----------------------------------------------------------

pub fn checkpoint_from(exp: &Experiment, next_round: usize) -> Checkpoint {
    let mut sets = IndexMap::new();
    sets.insert("server.body".to_string(), exp.server.body.clone());
    sets.insert("server.head".to_string(), exp.server.head.clone());
    for c in &exp.clients {
        let id = c.id;
        sets.insert(format!("client{id}.local_body"), c.local_body.clone());
        sets.insert(format!("client{id}.local_head"), c.local_head.clone());
        sets.insert(format!("client{id}.proj.up"), c.proj.up.clone());
        sets.insert(format!("client{id}.proj.down"), c.proj.down.clone());
        sets.insert(format!("client{id}.opt_local"), c.opt_local.to_paramset());
        sets.insert(format!("client{id}.opt_global"), c.opt_global.to_paramset());
    }
    Checkpoint {
        config_hash: exp.cfg.hash(),
        round: next_round,
        sets,
    }
}

fn copy_into(dst: &mut ParamSet, src: &ParamSet, what: &str) -> Result<()> {
    if !dst.compatible_with(src) {
        return Err(Error::Integrity(format!(
            "checkpoint set {what:?} does not match the configured model"
        )));
    }
    for ((_, d), (_, s)) in dst.iter_mut().zip(src.iter()) {
        d.value = s.value.clone();
    }
    Ok(())
}

/// Loads a checkpoint into a freshly built experiment. Datasets are not
/// stored; they regenerate from the config seed.
pub fn restore_into(exp: &mut Experiment, ckpt: &Checkpoint) -> Result<()> {
    copy_into(&mut exp.server.body, ckpt.set("server.body")?, "server.body")?;
    copy_into(&mut exp.server.head, ckpt.set("server.head")?, "server.head")?;
    for c in exp.clients.iter_mut() {
        let id = c.id;
        copy_into(
            &mut c.local_body,
            ckpt.set(&format!("client{id}.local_body"))?,
            "local_body",
        )?;
        copy_into(
            &mut c.local_head,
            ckpt.set(&format!("client{id}.local_head"))?,
            "local_head",
        )?;
        copy_into(&mut c.proj.up, ckpt.set(&format!("client{id}.proj.up"))?, "proj.up")?;
        copy_into(&mut c.proj.down, ckpt.set(&format!("client{id}.proj.down"))?, "proj.down")?;
        c.opt_local
            .restore_from_paramset(ckpt.set(&format!("client{id}.opt_local"))?)?;
        c.opt_global
            .restore_from_paramset(ckpt.set(&format!("client{id}.opt_global"))?)?;
    }
    broadcast_bypass(&exp.server, &mut exp.clients);
    exp.start_round = ckpt.round;
    Ok(())
}

// -- artifact writing --------------------------------------------------------

pub const CSV_HEADER: &str = "round,client_id,stage_a_loss,stage_b_loss,acc,mf1";

pub fn csv_rows(report: &RoundReport) -> String {
    let mut s = String::new();
    for c in &report.clients {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            report.round, c.client_id, c.stage_a_loss, c.stage_b_loss, c.acc, c.mf1
        ));
    }
    s
}

pub fn summary_json(
    cfg: &ExperimentConfig,
    last: &RoundReport,
    params: &ParamCountReport,
) -> serde_json::Value {
    let mut clients = serde_json::Map::new();
    for c in &last.clients {
        clients.insert(
            c.client_id.to_string(),
            json!({ "acc": c.acc, "mf1": c.mf1 }),
        );
    }
    clients.insert(
        "Average".to_string(),
        json!({ "acc": last.avg_acc(), "mf1": last.avg_mf1() }),
    );
    let mut counts = serde_json::Map::new();
    for row in &params.rows {
        counts.insert(row.model.clone(), json!(row.params));
    }
    json!({
        "method": cfg.method.as_str(),
        "regime": cfg.regime.as_str(),
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "final_round": last.round,
        "clients": serde_json::Value::Object(clients),
        "param_counts": serde_json::Value::Object(counts),
        "bypass_ratio": params.ratio(),
    })
}

/// Full experiment run with artifacts. Returns the summary document.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    threads: usize,
    quiet: bool,
) -> Result<serde_json::Value> {
    fs::create_dir_all(out_dir)?;
    let mut exp = build_experiment(cfg)?;

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("run.log"))?;
    let mut log2 = log.try_clone()?;
    let mut say = |line: &str| -> Result<()> {
        writeln!(log, "{line}")?;
        if !quiet {
            println!("{line}");
        }
        Ok(())
    };

    fs::write(out_dir.join("config.txt"), cfg.to_canonical_string())?;

    let csv_path = out_dir.join("metrics.csv");
    let mut resumed = false;
    if let Some(ckpt_path) = resume {
        let ckpt = checkpoint::load(ckpt_path)?;
        if ckpt.config_hash != cfg.hash() {
            say(&format!(
                "warning: checkpoint config hash {:#018x} differs from current {:#018x}; proceeding",
                ckpt.config_hash,
                cfg.hash()
            ))?;
        }
        restore_into(&mut exp, &ckpt)?;
        resumed = true;
        say(&format!("resumed from {} at round {}", ckpt_path.display(), exp.start_round))?;
    }

    let mut csv = if resumed && csv_path.exists() {
        fs::OpenOptions::new().append(true).open(&csv_path)?
    } else {
        let mut f = fs::File::create(&csv_path)?;
        writeln!(f, "{CSV_HEADER}")?;
        f
    };

    say(&format!(
        "{} | {} | seed {} | {} clients | rounds {}..{}",
        cfg.method.as_str(),
        cfg.regime.as_str(),
        cfg.seed,
        cfg.clients,
        exp.start_round,
        cfg.rounds
    ))?;

    let params = param_count_report(&exp.clients, &cfg.ablation);
    say(&format!("{params}"))?;

    let method = cfg.method;
    let rounds = cfg.rounds;
    let client_count = cfg.clients;
    let reports = run_protocol(&mut exp, threads, |report| {
        csv.write_all(csv_rows(report).as_bytes())?;
        // the fine-tuning pass after the last fedavg-ft round does not
        // aggregate, hence the round bound
        let agg_note = match method {
            Protocol::MhPflgb => "  aggregated bypass x",
            Protocol::FedAvg | Protocol::FedAvgFt if report.round < rounds => "  aggregated model x",
            _ => "",
        };
        let line = format!(
            "round {:>4}  loss_a {:.4}  loss_b {:.4}  acc {:.4}  mf1 {:.4}{}{}",
            report.round,
            report.avg_stage_a_loss(),
            report.avg_stage_b_loss(),
            report.avg_acc(),
            report.avg_mf1(),
            agg_note,
            if agg_note.is_empty() { String::new() } else { client_count.to_string() }
        );
        writeln!(log2, "{line}")?;
        if !quiet {
            println!("{line}");
        }
        Ok(())
    })?;
    csv.flush()?;

    checkpoint::save(&out_dir.join("final.ckpt"), &checkpoint_from(&exp, exp.start_round))?;

    let last = reports
        .last()
        .ok_or_else(|| Error::Usage("no rounds were run; is the checkpoint already final?".into()))?;
    let summary = summary_json(cfg, last, &params);
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    say(&format!(
        "final: acc {:.4}  mf1 {:.4}",
        last.avg_acc(),
        last.avg_mf1()
    ))?;
    Ok(summary)
}

/// Recomputes final-round per-client and average metrics from a metrics.csv.
pub fn report_from_csv(text: &str) -> Result<String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Usage("empty csv".into()))?;
    if header.trim() != CSV_HEADER {
        return Err(Error::Usage(format!(
            "unexpected csv header {header:?}; expected {CSV_HEADER:?}"
        )));
    }
    let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Usage(format!("csv line {}: expected 6 fields", i + 2)));
        }
        let parse_err = |what: &str| Error::Usage(format!("csv line {}: bad {what}", i + 2));
        rows.push((
            fields[0].parse().map_err(|_| parse_err("round"))?,
            fields[1].parse().map_err(|_| parse_err("client_id"))?,
            fields[4].parse().map_err(|_| parse_err("acc"))?,
            fields[5].parse().map_err(|_| parse_err("mf1"))?,
        ));
    }
    let last = rows
        .iter()
        .map(|r| r.0)
        .max()
        .ok_or_else(|| Error::Usage("csv has no data rows".into()))?;
    let mut out = String::new();
    out.push_str(&format!("{:<10} {:>8} {:>8}\n", "client", "acc", "mf1"));
    let (mut acc_sum, mut mf1_sum, mut n) = (0.0, 0.0, 0usize);
    for &(round, client, acc, mf1) in &rows {
        if round != last {
            continue;
        }
        out.push_str(&format!("{client:<10} {acc:>8.4} {mf1:>8.4}\n"));
        acc_sum += acc;
        mf1_sum += mf1;
        n += 1;
    }
    out.push_str(&format!(
        "{:<10} {:>8.4} {:>8.4}\n",
        "Average",
        acc_sum / n as f64,
        mf1_sum / n as f64
    ));
    Ok(out)
}
