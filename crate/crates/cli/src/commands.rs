use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use csmf::checkpoint;
use csmf::data::{count_events, generate, load_records, write_records, Dataset};
use csmf::eval::{sweep_tsv, sweep_weights, weight_grid, EvalSpec, RetrievalIndex};
use csmf::numerics::Matrix;
use csmf::pipeline::{resume, run as run_pipeline, sweep_tau, write_reports, Checkpoint, Corpus, Mode, Progress, Role, StageReport};
use csmf::stagenet::Stage;
use csmf::towers::{read_vectors, scale_user_vectors, write_vectors, ServingWeights, Side, TwoTowerModel};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};

#[derive(Serialize)]
struct Summary {
    seed: u64,
    train: csmf::data::EventCounts,
    test: csmf::data::EventCounts,
}

pub fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.paths.data.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let (ds, _) = generate(&cfg.generator)?;
    write_records(&dir.join("train.jsonl"), &ds.train)?;
    write_records(&dir.join("test.jsonl"), &ds.test)?;
    let summary = Summary { seed: cfg.generator.seed, train: count_events(&ds.train), test: count_events(&ds.test) };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    for (split, c) in [("train", summary.train), ("test", summary.test)] {
        println!("{split}\trequests {}\texposures {}\tclicks {}\tconversions {}", c.requests, c.exposures, c.clicks, c.conversions);
    }
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let (train, test) = (cfg.paths.train_file(), cfg.paths.test_file());
    if !train.exists() || !test.exists() {
        bail!("no dataset under {} (run gen-data first)", cfg.paths.data.display());
    }
    let ds = Dataset { train: load_records(&train)?, test: load_records(&test)? };
    Ok(Corpus::new(ds)?)
}

fn boundary_file(run_dir: &Path, progress: Progress) -> PathBuf {
    match progress {
        Progress::Fresh => run_dir.join("initial.ckpt"),
        Progress::Committed(s) => run_dir.join(format!("stage-{}.ckpt", s.label())),
        Progress::Complete => run_dir.join("final.ckpt"),
    }
}

pub fn train(mut cfg: RunConfig, mode: Option<&str>, resume_from: Option<PathBuf>) -> Result<()> {
    if let Some(m) = mode {
        cfg.pipeline.mode = Mode::parse(m).ok_or_else(|| ConfigError(format!("unknown mode {m:?}")))?;
    }
    let corpus = load_corpus(&cfg)?;
    let run_dir = cfg.paths.run.clone();
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let mut observer = |ck: &Checkpoint, reports: &[StageReport]| {
        for r in reports {
            log::info!("{} {}: epoch losses {:?}", r.model.label(), r.stage.objective(), r.epoch_losses);
        }
        checkpoint::save(ck, &boundary_file(&run_dir, ck.progress))
    };
    let out = match resume_from {
        Some(path) => {
            let ck = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if mode.is_some() && ck.config.mode != cfg.pipeline.mode {
                bail!(ConfigError("--mode differs from the mode stored in the checkpoint".into()));
            }
            resume(ck, &corpus, &mut observer)?
        }
        None => run_pipeline(&cfg.pipeline, &corpus, &mut observer)?,
    };
    write_reports(&run_dir.join("reports.jsonl"), &out.reports)?;
    let metrics = out.checkpoint.evaluate(&corpus, &cfg.eval)?;
    let tsv = metrics.to_tsv();
    std::fs::write(run_dir.join("metrics.tsv"), &tsv)?;
    println!("stages\t{}", out.reports.len());
    print!("{tsv}");
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: Option<PathBuf>) -> Result<Checkpoint> {
    let path = path.unwrap_or_else(|| cfg.paths.final_checkpoint());
    let ck = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if !ck.is_complete() {
        bail!("{} is a stage-boundary checkpoint; finish it with `train --resume`", path.display());
    }
    Ok(ck)
}

fn weights_or(cfg: &RunConfig, raw: Option<&str>) -> Result<ServingWeights> {
    Ok(match raw {
        Some(s) => ServingWeights::parse(s)?,
        None => cfg.eval.weights,
    })
}

pub fn eval(cfg: &RunConfig, ckpt: Option<PathBuf>, weights: Option<&str>) -> Result<()> {
    let ck = load_checkpoint(cfg, ckpt)?;
    let spec = EvalSpec { weights: weights_or(cfg, weights)?, ..cfg.eval.clone() };
    let corpus = load_corpus(cfg)?;
    print!("{}", ck.evaluate(&corpus, &spec)?.to_tsv());
    Ok(())
}

/// The model that answers retrieval requests and the weights it serves with.
/// Single-stage models have no segments, so they always use the full dot.
fn serving(ck: &Checkpoint, weights: ServingWeights) -> Result<(&TwoTowerModel, ServingWeights)> {
    let (model, role) = ck.serving_model(Stage::Conversion)?;
    if role == Role::Csmf {
        Ok((model, weights))
    } else {
        Ok((model, ServingWeights::single(Stage::Conversion)))
    }
}

pub fn export(cfg: &RunConfig, ckpt: Option<PathBuf>, weights: Option<&str>, out: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(cfg, ckpt)?;
    let corpus = load_corpus(cfg)?;
    let (model, w) = serving(&ck, weights_or(cfg, weights)?)?;
    let users: Vec<_> = corpus.catalog.users.values().collect();
    let items: Vec<_> = corpus.catalog.items.values().collect();
    let (u, i) = model.export_serving_vectors(&users, &items, w)?;
    let dir = out.unwrap_or_else(|| cfg.paths.run.join("vectors"));
    std::fs::create_dir_all(&dir)?;
    let layout = model.final_layout();
    let user_ids: Vec<u32> = corpus.catalog.users.keys().copied().collect();
    let item_ids: Vec<u32> = corpus.catalog.items.keys().copied().collect();
    write_vectors(&dir.join("users.vec"), layout, &user_ids, &u)?;
    write_vectors(&dir.join("items.vec"), layout, &item_ids, &i)?;
    println!("users\t{}\titems\t{}\tweights\t{},{},{}", user_ids.len(), item_ids.len(), w.k_d, w.k_o, w.k_r);
    Ok(())
}

pub fn retrieve(
    cfg: &RunConfig,
    ckpt: Option<PathBuf>,
    vectors: Option<PathBuf>,
    user_id: u32,
    k: usize,
    weights: Option<&str>,
) -> Result<()> {
    let (query, index) = match vectors {
        Some(dir) => {
            let (_, uids, users) = read_vectors(&dir.join("users.vec"))?;
            let (_, iids, items) = read_vectors(&dir.join("items.vec"))?;
            let row = uids.iter().position(|&u| u == user_id).with_context(|| format!("unknown user id {user_id}"))?;
            (users.row(row).to_vec(), RetrievalIndex::new(iids, items)?)
        }
        None => {
            let ck = load_checkpoint(cfg, ckpt)?;
            let corpus = load_corpus(cfg)?;
            let (model, w) = serving(&ck, weights_or(cfg, weights)?)?;
            let features = corpus.catalog.user(user_id)?;
            let raw = model.encode(Side::User, features, Stage::Conversion)?;
            let mut u = Matrix::from_vec(1, raw.len(), raw)?;
            scale_user_vectors(&mut u, model.final_layout(), w);
            let items: Vec<_> = corpus.catalog.items.values().collect();
            let ids = corpus.catalog.items.keys().copied().collect();
            (u.row(0).to_vec(), RetrievalIndex::new(ids, model.encode_many(Side::Item, &items, Stage::Conversion)?)?)
        }
    };
    let top = index.topk(&query, k)?;
    if top.truncated {
        log::warn!("k = {k} exceeds the catalog; returning all {} items", index.len());
    }
    let mut s = String::from("rank\titem\tscore\n");
    for (rank, (id, score)) in top.items.iter().enumerate() {
        writeln!(s, "{}\t{id}\t{score}", rank + 1)?;
    }
    print!("{s}");
    Ok(())
}

fn parse_list(name: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| ConfigError(format!("--{name}: {p:?}: {e}")).into()))
        .collect()
}

pub fn sweep(cfg: &RunConfig, ckpt: Option<PathBuf>, axes: [&str; 3], tau: Option<&str>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    if let Some(raw) = tau {
        let taus = parse_list("tau", raw)?;
        let mut s = String::from("tau\tobjective\tN\tmetric\tvalue\n");
        for (t, m) in sweep_tau(&cfg.pipeline, &corpus, &taus, &cfg.eval)? {
            for row in &m.rows {
                writeln!(s, "{t}\t{}\t{}\t{}\t{:.6}", row.objective.objective(), row.n, row.metric, row.value)?;
            }
        }
        print!("{s}");
        return Ok(());
    }
    let ck = load_checkpoint(cfg, ckpt)?;
    let model = ck.model(Role::Csmf).context("weight sweeps need a csmf checkpoint")?;
    let grid = weight_grid(&parse_list("kd", axes[0])?, &parse_list("ko", axes[1])?, &parse_list("kr", axes[2])?)?;
    let sweep = sweep_weights(model, &corpus.catalog, &corpus.test, &grid, &cfg.eval)?;
    print!("{}", sweep_tsv(&sweep.rows));
    let unchanged = sweep.digest_before == sweep.digest_after;
    eprintln!("points {}\texports {}\tparameters unchanged {unchanged}", sweep.rows.len(), sweep.exports);
    if !unchanged {
        bail!("parameters changed during the sweep");
    }
    Ok(())
}
