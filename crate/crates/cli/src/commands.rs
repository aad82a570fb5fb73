//! The four artifact-producing commands: dataset generation, two-stage
//! training, retrieval evaluation, and run-directory summarization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use xmodal::data::{cluster_init, generate_dataset, load_dataset, save_dataset, Modality};
use xmodal::eval::{cmc_csv, report_json, Direction};
use xmodal::model::{encode, load_checkpoint, save_checkpoint, ModelDims};
use xmodal::trainer::{records_csv, train_stage1, train_stage2};
use xmodal::{ModalityDataset, ModelParams, ScoreHistogram};

use crate::config::RunConfig;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Generates the synthetic dataset pair and writes both modality files.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (data_v, data_r) = generate_dataset(&cfg.synth)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_dataset(&data_v, &out.join("visible.txt"))?;
    save_dataset(&data_r, &out.join("infrared.txt"))?;
    cfg.write_effective(out)?;
    println!(
        "wrote {} visible and {} infrared samples (dim {}) to {}",
        data_v.len(),
        data_r.len(),
        data_v.dim(),
        out.display()
    );
    Ok(())
}

fn load_pair(dir: &Path) -> Result<(ModalityDataset, ModalityDataset)> {
    let path_v = dir.join("visible.txt");
    let path_r = dir.join("infrared.txt");
    let data_v: ModalityDataset =
        load_dataset(&path_v).with_context(|| format!("loading {}", path_v.display()))?;
    let data_r: ModalityDataset =
        load_dataset(&path_r).with_context(|| format!("loading {}", path_r.display()))?;
    if data_v.modality != Modality::Visible {
        bail!("{} holds {} data, expected visible", path_v.display(), data_v.modality);
    }
    if data_r.modality != Modality::Infrared {
        bail!("{} holds {} data, expected infrared", path_r.display(), data_r.modality);
    }
    Ok((data_v, data_r))
}

fn histogram_csv(h: &ScoreHistogram) -> String {
    let mut out = String::from("bin_low,bin_high,count\n");
    for (i, &count) in h.counts.iter().enumerate() {
        let _ = writeln!(out, "{:.16e},{:.16e},{}", h.edges[i], h.edges[i + 1], count);
    }
    out
}

/// Runs pseudo-label initialization and both training stages, writing
/// checkpoints at the stage boundaries, the epoch log, and one score
/// histogram per stage-2 epoch.
pub fn train(cfg: &RunConfig, out: &Path, stage1_only: bool) -> Result<()> {
    let (data_v, data_r) = load_pair(&cfg.data_dir)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let labeling_v = cluster_init(
        data_v.features.view(),
        cfg.clusters_v(),
        cfg.train.seed,
        cfg.kmeans_max_iter,
    )?;
    let labeling_r = cluster_init(
        data_r.features.view(),
        cfg.clusters_r(),
        cfg.train.seed,
        cfg.kmeans_max_iter,
    )?;
    println!(
        "pseudo-labels: {} visible clusters, {} infrared clusters",
        labeling_v.num_clusters, labeling_r.num_clusters
    );

    let dims = ModelDims {
        d_in: data_v.dim(),
        hidden: cfg.hidden_dim,
        d_emb: cfg.embed_dim,
        c_v: labeling_v.num_clusters,
        c_r: labeling_r.num_clusters,
    };
    let mut model = ModelParams::init(dims, cfg.train.seed)?;

    let mut records =
        train_stage1(&mut model, &data_v, &data_r, &labeling_v, &labeling_r, &cfg.train)?;
    save_checkpoint(&model, &out.join("checkpoint_stage1.txt"))?;
    match records.last() {
        Some(last) => println!(
            "stage 1: {} epochs, final loss {:.6}",
            records.len(),
            last.loss_total
        ),
        None => println!("stage 1: 0 epochs"),
    }

    let mut histograms = 0usize;
    if !stage1_only {
        let (records2, states) =
            train_stage2(&mut model, &data_v, &data_r, &labeling_v, &labeling_r, &cfg.train)?;
        save_checkpoint(&model, &out.join("checkpoint_stage2.txt"))?;
        if !states.is_empty() {
            let hist_dir = out.join("histograms");
            fs::create_dir_all(&hist_dir)
                .with_context(|| format!("creating {}", hist_dir.display()))?;
            for (rec, state) in records2.iter().zip(&states) {
                let path = hist_dir.join(format!("epoch_{:03}.csv", rec.epoch));
                write_file(&path, &histogram_csv(&state.score_histogram))?;
                histograms += 1;
            }
        }
        match (records2.last(), states.last()) {
            (Some(last), Some(state)) => {
                println!(
                    "stage 2: {} epochs, final loss {:.6}, clean fraction {:.4}/{:.4}",
                    records2.len(),
                    last.loss_total,
                    state.partition_v.clean_fraction(),
                    state.partition_r.clean_fraction(),
                );
                if let Some(acc) = state.assign_accuracy {
                    println!("assignment accuracy {:.4}", acc);
                }
            }
            _ => println!("stage 2: 0 epochs"),
        }
        records.extend(records2);
    }

    write_file(&out.join("epochs.csv"), &records_csv(&records))?;
    cfg.write_effective(out)?;
    println!(
        "wrote checkpoints, epochs.csv, and {} histograms to {}",
        histograms,
        out.display()
    );
    Ok(())
}

/// Evaluates a checkpoint on cross-modality retrieval, one or both
/// directions, writing a JSON report and a CMC curve per direction.
pub fn evaluate(cfg: &RunConfig, out: &Path, direction: Option<Direction>) -> Result<()> {
    let ckpt = cfg.checkpoint_path();
    let model: ModelParams =
        load_checkpoint(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let (data_v, data_r) = load_pair(&cfg.data_dir)?;
    let ids_v = data_v.gt_ids.clone().ok_or_else(|| {
        anyhow!("{}: no ground-truth identities", cfg.data_dir.join("visible.txt").display())
    })?;
    let ids_r = data_r.gt_ids.clone().ok_or_else(|| {
        anyhow!("{}: no ground-truth identities", cfg.data_dir.join("infrared.txt").display())
    })?;

    let emb_v = encode(&model, data_v.features.view())?.embeddings;
    let emb_r = encode(&model, data_r.features.view())?.embeddings;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let directions = match direction {
        Some(d) => vec![d],
        None => vec![Direction::VisibleToInfrared, Direction::InfraredToVisible],
    };
    for dir in directions {
        let (qe, ge, qi, gi) = match dir {
            Direction::VisibleToInfrared => (&emb_v, &emb_r, &ids_v, &ids_r),
            Direction::InfraredToVisible => (&emb_r, &emb_v, &ids_r, &ids_v),
        };
        let report = xmodal::eval::evaluate(qe.view(), ge.view(), qi, gi, dir)?;
        write_file(&out.join(format!("report_{}.json", dir.as_str())), &report_json(&report))?;
        write_file(&out.join(format!("cmc_{}.csv", dir.as_str())), &cmc_csv(&report))?;
        println!(
            "{}: rank-1 {:.4} rank-5 {:.4} mAP {:.4} mINP {:.4} ({} queries)",
            dir,
            report.cmc_at(1),
            report.cmc_at(5),
            report.map,
            report.minp,
            report.num_queries
        );
    }
    cfg.write_effective(out)?;
    Ok(())
}

struct LoggedEpoch {
    stage: u8,
    loss_total: f64,
    loss_cv: f64,
    loss_cr: f64,
    loss_r: Option<f64>,
    clean_frac_v: Option<f64>,
    clean_frac_r: Option<f64>,
    assign_accuracy: Option<f64>,
}

fn parse_epoch_log(text: &str, path: &Path) -> Result<Vec<LoggedEpoch>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            bail!("{} line {}: expected 9 fields, got {}", path.display(), idx + 1, fields.len());
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| anyhow!("{} line {}: invalid number '{}'", path.display(), idx + 1, fields[i]))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if fields[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        rows.push(LoggedEpoch {
            stage: fields[1]
                .parse()
                .map_err(|_| anyhow!("{} line {}: invalid stage '{}'", path.display(), idx + 1, fields[1]))?,
            loss_total: num(2)?,
            loss_cv: num(3)?,
            loss_cr: num(4)?,
            loss_r: opt(5)?,
            clean_frac_v: opt(6)?,
            clean_frac_r: opt(7)?,
            assign_accuracy: opt(8)?,
        });
    }
    Ok(rows)
}

/// Prints a plain-text summary of a finished run directory.
pub fn report(dir: &Path) -> Result<()> {
    let log_path = dir.join("epochs.csv");
    let text = fs::read_to_string(&log_path)
        .with_context(|| format!("reading epoch log {}", log_path.display()))?;
    let rows = parse_epoch_log(&text, &log_path)?;
    let stage1: Vec<&LoggedEpoch> = rows.iter().filter(|r| r.stage == 1).collect();
    let stage2: Vec<&LoggedEpoch> = rows.iter().filter(|r| r.stage == 2).collect();

    println!("run directory: {}", dir.display());
    println!("epochs: {} stage-1, {} stage-2", stage1.len(), stage2.len());
    if let Some(last) = stage1.last() {
        println!(
            "stage 1 final loss: {:.6} (visible {:.6}, infrared {:.6})",
            last.loss_total, last.loss_cv, last.loss_cr
        );
    }
    if let Some(last) = stage2.last() {
        print!("stage 2 final loss: {:.6} (cv {:.6}, cr {:.6}", last.loss_total, last.loss_cv, last.loss_cr);
        if let Some(r) = last.loss_r {
            print!(", r {:.6}", r);
        }
        println!(")");
        if let (Some(cv), Some(cr)) = (last.clean_frac_v, last.clean_frac_r) {
            println!("final clean fractions: visible {:.4}, infrared {:.4}", cv, cr);
        }
        if let Some(acc) = last.assign_accuracy {
            println!("final assignment accuracy: {:.4}", acc);
        }
    }

    for name in ["checkpoint_stage1.txt", "checkpoint_stage2.txt"] {
        if dir.join(name).is_file() {
            println!("checkpoint: {name}");
        }
    }

    for tag in ["v2r", "r2v"] {
        let path = dir.join(format!("report_{tag}.json"));
        if !path.is_file() {
            continue;
        }
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        let num = |key: &str| value.get(key).and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
        println!(
            "evaluation {tag}: rank-1 {:.4} mAP {:.4} mINP {:.4} ({} queries)",
            num("r1"),
            num("map"),
            num("minp"),
            value.get("num_queries").and_then(|v| v.as_u64()).unwrap_or(0)
        );
    }

    let hist_dir = dir.join("histograms");
    if hist_dir.is_dir() {
        let count = fs::read_dir(&hist_dir)
            .with_context(|| format!("reading {}", hist_dir.display()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
            .count();
        println!("score histograms: {count}");
    }
    Ok(())
}
