use std::path::{Path, PathBuf};

use corelens::distiller::{basis_from_set, projector_with};
use corelens::embstore::{generate_synthetic, read_embeddings, split, write_embeddings_with, SyntheticConfig};
use corelens::metrics::{compare_reports, group_report, sweep_csv, sweep_report, GroupReport};
use corelens::probe::{predict, train_dfr, train_erm, zero_shot_matrix, LinearProbe, TrainConfig};
use corelens::promptcraft::{grid_job, invert, GridResult};
use corelens::refenc::{init_encoder, D_MODEL};
use corelens::simaudit::{similarities, similarities_csv, summarize};
use corelens::{EmbeddingSet, Error, Matrix, Result};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::artifact::{ensure_parent, member, read_json, write_json, write_text, Stamp};
use crate::config::{
    require_file, Audit, Compare, Distill, Eval, GenSynth, Invert, InvertGrid, Method, ProbeTrain, Split, Sweep,
};

fn write_set(set: &EmbeddingSet, path: &Path, provenance: Value) -> Result<()> {
    ensure_parent(path)?;
    write_embeddings_with(set, path, Some(provenance))
}

fn single_row(v: &[f64]) -> Result<EmbeddingSet> {
    EmbeddingSet::new(Matrix::from_vec(1, v.len(), v.to_vec()), vec![0], vec![0], 1, 1)
}

/// `synth.emb` -> `synth.<tag>.emb`
pub fn sibling(path: &Path, tag: &str) -> PathBuf {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("emb");
    path.with_extension(format!("{tag}.{ext}"))
}

pub fn gen_synth(cfg: &GenSynth) -> Result<()> {
    let stamp = Stamp::new("gen-synth", cfg, Some(cfg.seed))?;
    let data = generate_synthetic(&SyntheticConfig {
        group_counts: cfg.group_counts,
        dim: cfg.dim,
        beta_core: cfg.beta_core,
        beta_spur: cfg.beta_spur,
        sigma: cfg.sigma,
        seed: cfg.seed,
    })?;
    write_set(&data.set, &cfg.out, stamp.provenance())?;
    let spur = sibling(&cfg.out, "spur");
    let core = sibling(&cfg.out, "core");
    write_set(&single_row(&data.spur_dir)?, &spur, stamp.provenance())?;
    write_set(&single_row(&data.core_dir)?, &core, stamp.provenance())?;
    println!(
        "wrote {} ({} x {}), directions {} and {}",
        cfg.out.display(),
        data.set.len(),
        data.set.dim(),
        spur.display(),
        core.display()
    );
    Ok(())
}

pub fn split_cmd(cfg: &Split) -> Result<()> {
    require_file("input", &cfg.input)?;
    let stamp = Stamp::new("split", cfg, Some(cfg.seed))?;
    let set = read_embeddings(&cfg.input)?;
    let [ft, fv, fs] = cfg.fractions;
    let (train, val, test) = split(&set, (ft, fv, fs), cfg.seed)?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = cfg.out_dir.join(format!("{name}.emb"));
        write_set(part, &path, stamp.provenance())?;
        println!("wrote {} ({} rows)", path.display(), part.len());
    }
    Ok(())
}

pub fn probe_train(cfg: &ProbeTrain) -> Result<()> {
    let (probe, log, train_cfg) = match cfg.method {
        Method::Zeroshot => {
            let prompts = cfg
                .prompts
                .as_deref()
                .ok_or_else(|| Error::Config("prompts: required for the zeroshot method".into()))?;
            require_file("prompts", prompts)?;
            let set = read_embeddings(prompts)?;
            (zero_shot_matrix(set.rows())?, Value::Null, Value::Null)
        }
        Method::Erm | Method::Dfr => {
            let seed = cfg
                .seed
                .ok_or_else(|| Error::Config("seed: required for erm and dfr training".into()))?;
            let train_path = cfg.train.as_deref().ok_or_else(|| Error::Config("train: required".into()))?;
            let val_path = cfg.val.as_deref().ok_or_else(|| Error::Config("val: required".into()))?;
            require_file("train", train_path)?;
            require_file("val", val_path)?;
            let mut tc = if cfg.method == Method::Erm {
                TrainConfig::erm(seed)
            } else {
                TrainConfig::dfr(seed)
            };
            tc.learning_rate = cfg.learning_rate.unwrap_or(tc.learning_rate);
            tc.weight_decay = cfg.weight_decay.unwrap_or(tc.weight_decay);
            tc.epochs = cfg.epochs.unwrap_or(tc.epochs);
            tc.batch_size = cfg.batch_size.unwrap_or(tc.batch_size);
            tc.plateau_factor = cfg.plateau_factor.unwrap_or(tc.plateau_factor);
            tc.plateau_patience = cfg.plateau_patience.unwrap_or(tc.plateau_patience);
            tc.validate()?;
            let train = read_embeddings(train_path)?;
            let val = read_embeddings(val_path)?;
            let run = if cfg.method == Method::Erm {
                train_erm(&train, &val, &tc)?
            } else {
                train_dfr(&train, &val, &tc)?
            };
            println!(
                "selected epoch {} with validation WGA {:.4}",
                run.log.selected_epoch, run.log.selected_val_wga
            );
            (run.probe, serde_json::to_value(&run.log)?, serde_json::to_value(&tc)?)
        }
    };
    let stamp = Stamp::new("probe-train", cfg, cfg.seed)?;
    write_json(
        &cfg.out,
        &stamp,
        json!({ "method": cfg.method, "probe": probe.to_json_value(), "train_config": train_cfg, "training_log": log }),
    )?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}

pub fn distill(cfg: &Distill) -> Result<()> {
    require_file("input", &cfg.input)?;
    require_file("background", &cfg.background)?;
    let stamp = Stamp::new("distill", cfg, None)?;
    let set = read_embeddings(&cfg.input)?;
    let background = read_embeddings(&cfg.background)?;
    if background.dim() != set.dim() {
        return Err(Error::DimMismatch {
            expected: set.dim(),
            got: background.dim(),
        });
    }
    let basis = basis_from_set(&background, cfg.num_vectors, cfg.drop_tolerance)?;
    let projected = projector_with(&basis, cfg.method.into())?.apply_set(&set)?;
    let mut provenance = stamp.provenance();
    provenance["num_vectors"] = json!(basis.len());
    provenance["condition_estimate"] = json!(basis.condition_estimate());
    write_set(&projected, &cfg.out, provenance)?;
    println!(
        "projected {} rows against {} background vectors (condition {:.3e})",
        projected.len(),
        basis.len(),
        basis.condition_estimate()
    );
    Ok(())
}

fn load_probe(path: &Path) -> Result<LinearProbe> {
    let doc = read_json(path)?;
    LinearProbe::from_json_value(member(&doc, "probe", path)?)
}

fn load_report(path: &Path) -> Result<GroupReport> {
    let doc = read_json(path)?;
    serde_json::from_value(member(&doc, "report", path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn eval(cfg: &Eval) -> Result<()> {
    require_file("probe", &cfg.probe)?;
    require_file("input", &cfg.input)?;
    let stamp = Stamp::new("eval", cfg, None)?;
    let probe = load_probe(&cfg.probe)?;
    let set = read_embeddings(&cfg.input)?;
    if probe.dim() != set.dim() {
        return Err(Error::DimMismatch {
            expected: probe.dim(),
            got: set.dim(),
        });
    }
    let preds = predict(&probe, &set)?;
    let report = group_report(&preds.labels, &set)?;
    println!(
        "wga {:.4}  avg_group {:.4}  avg_sample {:.4}",
        report.wga, report.avg_group, report.avg_sample
    );
    if let Some(csv) = &cfg.csv_out {
        write_text(csv, report.to_csv().as_bytes())?;
    }
    write_json(
        &cfg.out,
        &stamp,
        json!({ "probe_digest": probe.config_digest(), "report": report }),
    )
}

pub fn compare(cfg: &Compare) -> Result<()> {
    require_file("before", &cfg.before)?;
    require_file("after", &cfg.after)?;
    let stamp = Stamp::new("compare", cfg, None)?;
    let table = compare_reports(&load_report(&cfg.before)?, &load_report(&cfg.after)?)?;
    println!("wga change {:+.4}", table.wga_delta);
    if let Some(csv) = &cfg.csv_out {
        write_text(csv, table.to_csv().as_bytes())?;
    }
    write_json(&cfg.out, &stamp, json!({ "delta": table }))
}

pub fn sweep(cfg: &Sweep) -> Result<()> {
    if cfg.reports.is_empty() {
        return Err(Error::Config("reports: at least one entry is required".into()));
    }
    for entry in &cfg.reports {
        require_file(&format!("reports.{}", entry.task), &entry.report)?;
    }
    let stamp = Stamp::new("sweep", cfg, None)?;
    let tasks = cfg
        .reports
        .iter()
        .map(|e| Ok((e.task.clone(), load_report(&e.report)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = sweep_report(&tasks);
    if let Some(csv) = &cfg.csv_out {
        write_text(csv, sweep_csv(&rows).as_bytes())?;
    }
    write_json(&cfg.out, &stamp, json!({ "rows": rows }))
}

pub fn audit(cfg: &Audit) -> Result<()> {
    require_file("query", &cfg.query)?;
    require_file("images", &cfg.images)?;
    let stamp = Stamp::new("audit", cfg, None)?;
    let queries = read_embeddings(&cfg.query)?;
    if cfg.query_row >= queries.len() {
        return Err(Error::Config(format!(
            "query_row: {} is out of range for {} rows",
            cfg.query_row,
            queries.len()
        )));
    }
    let images = read_embeddings(&cfg.images)?;
    let sims = similarities(queries.row(cfg.query_row), &images)?;
    let stats = summarize(&sims)?;
    println!("median {:.4}  IQR [{:.4}, {:.4}]", stats.median, stats.q1, stats.q3);
    if let Some(csv) = &cfg.similarities_out {
        write_text(csv, similarities_csv(&sims).as_bytes())?;
    }
    write_json(&cfg.out, &stamp, json!({ "stats": stats }))
}

pub fn invert_cmd(cfg: &Invert) -> Result<()> {
    let encoder = init_encoder(cfg.encoder_seed);
    let target = match (&cfg.target_text, &cfg.target_vector) {
        (Some(text), None) => corelens::refenc::encode_text(&encoder, text)?.vector,
        (None, Some(path)) => {
            require_file("target_vector", path)?;
            let set = read_embeddings(path)?;
            if set.dim() != D_MODEL {
                return Err(Error::DimMismatch {
                    expected: D_MODEL,
                    got: set.dim(),
                });
            }
            if cfg.target_row >= set.len() {
                return Err(Error::Config(format!("target_row: {} is out of range", cfg.target_row)));
            }
            set.row(cfg.target_row).to_vec()
        }
        _ => {
            return Err(Error::Config(
                "exactly one of target_text and target_vector must be given".into(),
            ))
        }
    };
    let stamp = Stamp::new("invert", cfg, Some(cfg.encoder_seed))?;
    let r = invert(&target, &cfg.initial_text, &cfg.inversion, &encoder, cfg.target_text.as_deref())?;
    println!("recovered {:?} (loss {:.6})", r.recovered_text, r.final_loss);
    let success = r.success.map_or(json!("n/a"), |s| json!(s));
    write_json(
        &cfg.out,
        &stamp,
        json!({
            "initial": cfg.initial_text,
            "target": cfg.target_text,
            "eot_index": r.eot_index,
            "initial_loss": r.initial_loss(),
            "final_loss": r.final_loss,
            "recovered_ids": r.recovered_ids,
            "recovered_text": r.recovered_text,
            "final_v_eot": r.final_v_eot,
            "loss_trace": r.loss_trace,
            "success": success,
        }),
    )
}

/// Worker count from `CORELENS_THREADS`, if set.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("CORELENS_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("CORELENS_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

pub fn invert_grid(cfg: &InvertGrid) -> Result<()> {
    if cfg.words.is_empty() {
        return Err(Error::Config("words: at least one word is required".into()));
    }
    let stamp = Stamp::new("invert-grid", cfg, Some(cfg.encoder_seed))?;
    let encoder = init_encoder(cfg.encoder_seed);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let pairs: Vec<(&String, &String)> = cfg
        .words
        .iter()
        .flat_map(|a| cfg.words.iter().map(move |b| (a, b)))
        .collect();
    let runs = pool.install(|| {
        pairs
            .par_iter()
            .map(|(a, b)| grid_job(a, b, &cfg.inversion, &encoder))
            .collect::<Result<Vec<_>>>()
    })?;
    let grid = GridResult {
        words: cfg.words.clone(),
        runs,
    };
    println!(
        "off-diagonal success {:.3} over {} words",
        grid.off_diagonal_success_rate(),
        grid.words.len()
    );
    write_text(&cfg.out, grid.to_csv().as_bytes())?;
    let runs_out = cfg
        .runs_out
        .clone()
        .unwrap_or_else(|| cfg.out.with_extension("runs.json"));
    write_json(
        &runs_out,
        &stamp,
        json!({ "off_diagonal_success_rate": grid.off_diagonal_success_rate(), "runs": grid.runs }),
    )
}
