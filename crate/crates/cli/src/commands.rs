use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use d2d_core::checkpoint::{self, Checkpoint};
use d2d_core::dataio::{
    format_sig9, load_table, synth_wafers, write_table, DatasetTable, GroupMoments, GroupStats, Label, TableFormat,
};
use d2d_core::{metrics, pipeline, scoring, trainer, Error, Result, RunConfig};

pub const TEST_SPLIT: &str = "test.csv";
pub const GROUP_STATS: &str = "group_stats.json";
pub const TRAIN_LOG: &str = "train.log";

#[derive(Serialize, Deserialize)]
struct StatsEntry {
    lot_key: String,
    wf_key: String,
    mean: Vec<f64>,
    std: Vec<f64>,
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("{cmd} needs --{flag}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn save_stats(path: &Path, stats: &GroupStats) -> Result<()> {
    let entries: Vec<StatsEntry> = stats
        .groups
        .iter()
        .map(|((lot, wf), m)| StatsEntry {
            lot_key: lot.clone(),
            wf_key: wf.clone(),
            mean: m.mean.clone(),
            std: m.std.clone(),
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&entries)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn load_stats(path: &Path) -> Result<GroupStats> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let entries: Vec<StatsEntry> = serde_json::from_str(&text)?;
    Ok(GroupStats {
        groups: entries
            .into_iter()
            .map(|e| ((e.lot_key, e.wf_key), GroupMoments { mean: e.mean, std: e.std }))
            .collect(),
    })
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.paths.out, "out", "synth")?;
    let table = synth_wafers(&cfg.synth)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    write_table(&table, out)?;
    eprintln!(
        "wrote {} devices ({} anomalous, {} features) to {}",
        table.len(),
        table.n_anomalous(),
        table.n_features(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let data = required(&cfg.paths.data, "data", "train")?;
    let dir = required(&cfg.paths.checkpoint, "checkpoint", "train")?;
    cfg.validate()?;
    let table = load_table(data, TableFormat::Csv)?;
    let prepared = pipeline::prepare(&table, &cfg.preprocess, cfg.train.seed)?;
    eprintln!(
        "training on {} normal devices, {} features; {} held out",
        prepared.train.len(),
        prepared.train.n_features(),
        prepared.test.len()
    );
    let (bundle, log) = trainer::fit(&prepared.train, &cfg.model, &cfg.train)?;
    checkpoint::save(dir, &bundle, &cfg.train, &cfg.preprocess)?;
    write_file(&dir.join(TRAIN_LOG), log.to_text().as_bytes())?;
    write_table(&prepared.test, &dir.join(TEST_SPLIT))?;
    save_stats(&dir.join(GROUP_STATS), &prepared.stats)?;
    eprintln!("checkpoint written to {}", dir.display());
    Ok(())
}

struct Scored {
    ckpt: Checkpoint,
    table: DatasetTable,
    stats: Option<GroupStats>,
    scores: Vec<f64>,
}

fn load_inputs(cfg: &RunConfig, raw: bool, cmd: &str) -> Result<(Checkpoint, DatasetTable, Option<GroupStats>)> {
    let dir = required(&cfg.paths.checkpoint, "checkpoint", cmd)?;
    let ckpt = checkpoint::load(dir)?;
    let stats_path = dir.join(GROUP_STATS);
    let (table, stats) = match (&cfg.paths.data, raw) {
        (Some(path), true) => {
            let (t, s) = pipeline::normalize(&load_table(path, TableFormat::Csv)?, &ckpt.preprocess)?;
            (t, Some(s))
        }
        (Some(path), false) => (load_table(path, TableFormat::Csv)?, None),
        (None, true) => return Err(Error::Config("--raw needs --data".into())),
        (None, false) => (load_table(&dir.join(TEST_SPLIT), TableFormat::Csv)?, None),
    };
    let stats = match stats {
        Some(s) => Some(s),
        None if stats_path.exists() => Some(load_stats(&stats_path)?),
        None => None,
    };
    if table.feature_names != ckpt.bundle.feature_names {
        return Err(Error::Schema(format!(
            "data has {} features that do not match the {} the checkpoint was trained on",
            table.n_features(),
            ckpt.bundle.n_features()
        )));
    }
    Ok((ckpt, table, stats))
}

fn score_inputs(cfg: &RunConfig, raw: bool, cmd: &str) -> Result<Scored> {
    let (ckpt, table, stats) = load_inputs(cfg, raw, cmd)?;
    cfg.eval.grid.validate(ckpt.bundle.schedule.steps())?;
    let scores = scoring::anomaly_scores(
        &ckpt.bundle,
        &table,
        &cfg.eval.grid.timesteps(),
        cfg.train.seed,
        cfg.eval.chunk_size,
    )?;
    Ok(Scored { ckpt, table, stats, scores })
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().from_writer(Vec::new())
}

fn id_fields(t: &DatasetTable, i: usize) -> Vec<String> {
    let r = &t.records[i];
    vec![
        r.lot_key.clone(),
        r.wf_key.clone(),
        r.die_x.to_string(),
        r.die_y.to_string(),
        r.label.as_code().to_string(),
    ]
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
pub fn emit(bytes: &[u8]) -> Result<()> {
    match std::io::stdout().write_all(bytes) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io { path: "<stdout>".into(), source: e }),
        _ => Ok(()),
    }
}

fn finish(w: csv::Writer<Vec<u8>>, out: Option<&Path>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::Schema(e.to_string()))?;
    match out {
        Some(p) => write_file(p, &bytes),
        None => emit(&bytes),
    }
}

pub fn score(cfg: &RunConfig, raw: bool) -> Result<()> {
    let s = score_inputs(cfg, raw, "score")?;
    let mut w = csv_writer();
    w.write_record(["lot_key", "wf_key", "die_x", "die_y", "label", "score"])?;
    for (i, v) in s.scores.iter().enumerate() {
        let mut row = id_fields(&s.table, i);
        row.push(format_sig9(*v));
        w.write_record(&row)?;
    }
    finish(w, cfg.paths.out.as_deref())
}

fn labels(t: &DatasetTable) -> Vec<Label> {
    t.records.iter().map(|r| r.label).collect()
}

pub fn eval(cfg: &RunConfig, raw: bool) -> Result<()> {
    let s = score_inputs(cfg, raw, "eval")?;
    let report = metrics::evaluate(&s.scores, &labels(&s.table), cfg.eval.yield_frac)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match cfg.paths.out.as_deref() {
        Some(p) => write_file(p, text.as_bytes()),
        None => emit(text.as_bytes()),
    }
}

pub fn explain(cfg: &RunConfig, raw: bool) -> Result<()> {
    let s = score_inputs(cfg, raw, "explain")?;
    let bundle = &s.ckpt.bundle;
    let explanations = scoring::explain(
        bundle,
        &s.table,
        cfg.eval.t_rec,
        cfg.train.seed,
        cfg.eval.subtract_pe,
        cfg.eval.chunk_size,
    )?;

    let mut w = csv_writer();
    let mut header: Vec<String> = ["lot_key", "wf_key", "die_x", "die_y", "label", "score"]
        .map(String::from)
        .to_vec();
    header.extend(bundle.program_blocks.iter().map(|b| b.name.clone()));
    w.write_record(&header)?;
    for (i, e) in explanations.iter().enumerate() {
        let mut row = id_fields(&s.table, i);
        row.push(format_sig9(s.scores[i]));
        row.extend(e.program_scores.iter().map(|v| format_sig9(*v)));
        w.write_record(&row)?;
    }
    finish(w, cfg.paths.out.as_deref())?;

    let labels = labels(&s.table);
    let threshold = if labels.iter().any(|l| !l.is_anomalous()) {
        Some(metrics::recall_at_yield(&s.scores, &labels, cfg.eval.yield_frac)?.1)
    } else {
        None
    };
    let mut text = String::new();
    for (i, e) in explanations.iter().enumerate() {
        if threshold.is_some_and(|th| s.scores[i] <= th) {
            continue;
        }
        let r = &s.table.records[i];
        let programs: Vec<String> = e
            .ranking()
            .into_iter()
            .take(cfg.eval.top_k)
            .map(|p| format!("{} {}", bundle.program_blocks[p].name, format_sig9(e.program_scores[p])))
            .collect();
        text.push_str(&format!(
            "{}/{} ({},{}) score {}: {}",
            r.lot_key,
            r.wf_key,
            r.die_x,
            r.die_y,
            format_sig9(s.scores[i]),
            programs.join(", ")
        ));
        let moments = s.stats.as_ref().and_then(|st| st.get(&r.lot_key, &r.wf_key));
        if let Some(f) = (0..e.residuals.len()).max_by(|&a, &b| e.residuals[a].total_cmp(&e.residuals[b])) {
            text.push_str(&format!(" | worst feature {} residual {}", bundle.feature_names[f], format_sig9(e.residuals[f])));
            if let Some(m) = moments {
                text.push_str(&format!(" (|dx| {} native units)", format_sig9(e.residuals[f].sqrt() * m.std[f])));
            }
        }
        text.push('\n');
    }
    if cfg.paths.out.is_some() {
        emit(text.as_bytes())
    } else {
        eprint!("{text}");
        Ok(())
    }
}
