use std::fs;
use std::path::{Path, PathBuf};

use msd_core::bench::run_bench;
use msd_core::blocks::{Model, StageTrace};
use msd_core::checkpoint::{self, Checkpoint};
use msd_core::config::ModelConfig;
use msd_core::data::{
    embed_user, load_dataset, split_dataset, standardize_embedded, standardize_sequence, synth_generate, write_dataset,
    EmbeddingCache, HashEmbedder, StandardSequence, SynthParams, UserRecord,
};
use msd_core::training::{evaluate, measure_spu, train_loop, History, MetricsReport, SeedSummary, SpuReport, HEADLINE};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{BenchArgs, EmbedArgs, EvalArgs, InspectArgs, SplitSel, SynthArgs, TrainArgs};

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::write(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

/// Side index of an embedding cache data file.
pub fn cache_index(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".idx.jsonl");
    PathBuf::from(name)
}

fn headline(m: &MetricsReport) -> Value {
    HEADLINE
        .iter()
        .zip(m.headline())
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect()
}

/// Embeds (or looks up) and standardizes every record to length `l`.
fn sequences(records: &[UserRecord], cfg: &ModelConfig, cache: Option<&Path>) -> CliResult<Vec<StandardSequence<f32>>> {
    match cache {
        Some(path) => {
            let cache = EmbeddingCache::open(path, &cache_index(path))?;
            if cache.dim() != cfg.embed_dim {
                return Err(CliError::Mismatch(format!(
                    "embedding cache {} holds {}-dim vectors, model expects {}",
                    path.display(),
                    cache.dim(),
                    cfg.embed_dim
                )));
            }
            records
                .iter()
                .map(|r| Ok(standardize_embedded(&cache.user(r)?, cfg.seq_len)?))
                .collect()
        }
        None => {
            let p = HashEmbedder::new(cfg.embed_dim);
            records
                .iter()
                .map(|r| Ok(standardize_sequence(r, cfg.seq_len, &p)?))
                .collect()
        }
    }
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let params = SynthParams::new(a.users, a.l_mean, a.seed);
    let records = synth_generate(&params)?;
    create_dir(&a.out)?;
    let data = a.out.join("dataset.jsonl");
    write_dataset(&records, &data)?;
    let spammers = records.iter().filter(|r| r.label.index() == 1).count();
    let manifest = json!({
        "generator": "synth",
        "params": params,
        "users": records.len(),
        "spammers": spammers,
        "behaviors": records.iter().map(|r| r.behaviors.len()).sum::<usize>(),
        "dataset": "dataset.jsonl",
    });
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} users ({spammers} spammers) to {}",
        records.len(),
        data.display()
    );
    Ok(())
}

pub fn embed(a: EmbedArgs) -> CliResult<()> {
    let records = load_dataset(&a.dataset)?;
    let p = HashEmbedder::new(a.dim);
    let users = records
        .iter()
        .map(|r| embed_user(r, &p))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&a.out)?;
    let data = a.out.join("embeddings.msde");
    EmbeddingCache::write(&users, &data, &cache_index(&data))?;
    let count: usize = users.iter().map(|u| u.behaviors.len()).sum();
    println!("cached {count} behaviors ({}-dim) in {}", a.dim, data.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut c = RunConfig::load_or_default(a.config.as_deref())?;
    c.command = Some("train".into());
    c.train.seed = a.seed;
    let paths = &mut c.paths;
    paths.dataset = a.dataset.clone().or(paths.dataset.take());
    paths.cache = a.cache.clone().or(paths.cache.take());
    paths.out = a.out.clone().or(paths.out.take());
    c.model.variant = a.model.variant.unwrap_or(c.model.variant);
    c.model.seq_len = a.model.seq_len.unwrap_or(c.model.seq_len);
    c.model.embed_dim = a.model.embed_dim.or(c.model.embed_dim);
    let t = &mut c.train;
    t.lr = a.lr.unwrap_or(t.lr);
    t.max_epochs = a.epochs.unwrap_or(t.max_epochs);
    t.patience = a.patience.unwrap_or(t.patience);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.accumulate = a.accumulate.unwrap_or(t.accumulate);
    c.runs = a.runs.unwrap_or(c.runs);
    if c.runs == 0 {
        return Err(CliError::Input("--runs must be at least 1".into()));
    }
    Ok(c)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let run = train_config(&a)?;
    let out = run.out_dir()?.to_path_buf();
    let dataset = run
        .paths
        .dataset
        .clone()
        .ok_or_else(|| CliError::Input("no dataset; pass --dataset".into()))?;
    let cfg = run.model.resolve()?;
    let records = load_dataset(&dataset)?;
    let split = split_dataset(&records, run.split, run.train.seed)?;
    let cache = run.paths.cache.as_deref();
    let train = sequences(&split.train, &cfg, cache)?;
    let val = sequences(&split.validation, &cfg, cache)?;
    let test = sequences(&split.test, &cfg, cache)?;
    log::info!(
        "training on {} users ({} validation, {} test), l = {}",
        train.len(),
        val.len(),
        test.len(),
        cfg.seq_len
    );

    let mut reports = Vec::new();
    let mut first: Option<(Model<f32>, History)> = None;
    for r in 0..run.runs as u64 {
        let seed = run.train.seed + r;
        let mut model = Model::<f32>::new(cfg.clone(), seed)?;
        let tc = msd_core::training::TrainConfig {
            seed,
            ..run.train.clone()
        };
        let history = train_loop(&mut model, &train, &val, &tc)?;
        let report = evaluate(&model, &test)?;
        log::info!("seed {seed}: test accuracy {:.4}", report.accuracy);
        reports.push(report);
        first.get_or_insert((model, history));
    }
    let (model, history) = first.expect("at least one run");
    let report = reports[0];

    create_dir(&out)?;
    write(&out.join("config.json"), run.to_json() + "\n")?;
    checkpoint::save(&model, &out.join("model.msdc"))?;
    write(&out.join("history.csv"), history.to_csv())?;
    write_json(&out.join("history.json"), &history)?;
    let summary = (reports.len() > 1).then(|| SeedSummary::new(reports));
    let metrics = json!({
        "split": "test",
        "users": test.len(),
        "headline": headline(&report),
        "metrics": report,
        "summary": summary,
        "best_epoch": history.best_epoch,
        "best_val_acc": history.best_val_acc,
        "stopped_early": history.stopped_early,
        "param_count": model.param_count(),
        "trace": StageTrace::for_config(&cfg),
        "config": cfg,
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    print!("{}", report.table());
    if let Some(s) = &summary {
        print!("{}", s.table());
    }
    println!("artifacts written to {}", out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let model: Model<f32> = checkpoint::load(&a.checkpoint)?;
    let records = load_dataset(&a.dataset)?;
    let chosen = match (a.split, a.seed) {
        (SplitSel::All, _) => records,
        (_, None) => return Err(CliError::Input("--split other than `all` needs --seed".into())),
        (sel, Some(seed)) => {
            let s = split_dataset(&records, (0.7, 0.2, 0.1), seed)?;
            match sel {
                SplitSel::Train => s.train,
                SplitSel::Validation => s.validation,
                _ => s.test,
            }
        }
    };
    let seqs = sequences(&chosen, &model.cfg, a.cache.as_deref())?;
    let report = evaluate(&model, &seqs)?;
    let spu: Option<SpuReport> = if a.spu {
        Some(measure_spu(&model, &seqs, 3)?)
    } else {
        None
    };
    let split = format!("{:?}", a.split).to_lowercase();
    let metrics = json!({
        "split": split,
        "users": seqs.len(),
        "headline": headline(&report),
        "metrics": report,
        "spu": spu,
        "param_count": model.param_count(),
        "trace": StageTrace::for_config(&model.cfg),
    });
    print!("{}", report.table());
    if let Some(s) = &spu {
        println!("seconds per user {:.6} over {} users", s.seconds_per_user, s.users);
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("metrics.json"), &metrics)?;
    }
    Ok(())
}

fn bench_config(a: &BenchArgs) -> CliResult<RunConfig> {
    let mut c = RunConfig::load_or_default(a.config.as_deref())?;
    c.command = Some("bench-attn".into());
    c.paths.out = a.out.clone().or(c.paths.out.take());
    let g = &mut c.bench;
    if let Some(s) = &a.sizes {
        g.sizes = s.clone();
    }
    g.window = a.window.unwrap_or(g.window);
    g.stride = a.stride.unwrap_or(g.stride);
    g.width = a.width.unwrap_or(g.width);
    g.n_heads = a.heads.unwrap_or(g.n_heads);
    g.baseline &= !a.no_baseline;
    g.budget_bytes = a.budget_bytes.unwrap_or(g.budget_bytes);
    g.repeats = a.repeats.unwrap_or(g.repeats);
    g.seed = a.seed.unwrap_or(g.seed);
    Ok(c)
}

pub fn bench_attn(a: BenchArgs) -> CliResult<()> {
    let run = bench_config(&a)?;
    let report = run_bench::<f32>(&run.bench)?;
    print!("{}", report.table());
    if let Some(out) = &run.paths.out {
        create_dir(out)?;
        write(&out.join("bench.csv"), report.to_csv())?;
        write(&out.join("config.json"), run.to_json() + "\n")?;
    }
    if !report.any_feasible() {
        return Err(CliError::Budget(format!(
            "every cell exceeds the score budget of {} bytes",
            run.bench.budget_bytes
        )));
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> CliResult<()> {
    let (cfg, sections, version) = match &a.checkpoint {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
            let ck = Checkpoint::<f32>::parse(&bytes)?;
            (ck.config, Some(ck.sections), Some(ck.version))
        }
        None => {
            let v = a.variant.unwrap_or(msd_core::config::Variant::B);
            (ModelConfig::variant(v, a.seq_len.unwrap_or(16384))?, None, None)
        }
    };
    let trace = StageTrace::for_config(&cfg);
    let params = Model::<f32>::new(cfg.clone(), 0)?.param_count();
    if a.json {
        let v =
            json!({ "version": version, "config": cfg, "sections": sections, "trace": trace, "param_count": params });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    if let Some(v) = version {
        println!("checkpoint version {v}");
    }
    println!("config {}", cfg.to_json());
    println!("trainable parameters {params}");
    let pipeline: Vec<String> = trace.pipeline().iter().map(|[r, c]| format!("{r}×{c}")).collect();
    println!("stages {} (CLS width {})", pipeline.join(" → "), trace.cls_width);
    for s in sections.iter().flatten() {
        println!(
            "section {:<8} {:>4} tensors {:>12} bytes",
            s.name,
            s.tensors.len(),
            s.bytes
        );
    }
    Ok(())
}
