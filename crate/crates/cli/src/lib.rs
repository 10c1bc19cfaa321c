//! Subcommand implementations behind the `riskqueue` binary.

pub mod args;
mod io;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tracing::info;

use riskqueue::analysis::{compare_selected, depression_curve, Lexicon};
use riskqueue::corpus::{load_histories, save_histories, synth_generate, Dataset, SynthConfig, UserHistory};
use riskqueue::han::{grad_check, random_small_config, train, ModelConfig, ModelParams, TrainingExample};
use riskqueue::metrics::{evaluate, parse_thresholds, threshold_sweep};
use riskqueue::screening::{screen_history, ScoredRecord, Screener};
use riskqueue::stream::{inference_fraction, run_stream_with, StreamOptions, UserTrace};
use riskqueue::templates::{builtin_bank, preset, verify_builtin_bank, Scale};
use riskqueue::{Provider, Split};

use crate::args::*;
pub use crate::io::{read_jsonl, read_labels, sha256_file};
use crate::io::{create, write_json, write_jsonl, Manifest};

struct Ctx {
    jobs: usize,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, path: &Path) -> PathBuf {
        match &self.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }

    /// Maps `f` over items on the worker pool, preserving input order.
    fn par_map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
        if self.jobs <= 1 {
            return items.iter().map(f).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?;
        pool.install(|| items.par_iter().map(&f).collect())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let ctx = Ctx {
        jobs: cli.jobs,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Templates { action } => templates(action),
        Command::Synth(a) => synth(&ctx, a),
        Command::Screen(a) => screen(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Stream(a) => stream(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Lexical(a) => lexical(&ctx, a),
        Command::Curve(a) => curve(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
    }
}

fn templates(action: TemplatesAction) -> Result<()> {
    match action {
        TemplatesAction::List { set } => {
            for t in preset(&set)?.iter() {
                println!("{}\t{}\t{}\t{}", t.scale, t.id, t.dimension, t.text);
            }
        }
        TemplatesAction::Verify => {
            verify_builtin_bank()?;
            println!("template bank ok: {} templates", builtin_bank().len());
            for scale in Scale::ALL {
                println!("{}\t{}", scale.preset_name(), preset(scale.preset_name())?.len());
            }
            println!("full\t{}", preset("full")?.len());
        }
    }
    Ok(())
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let mut config: SynthConfig = match &a.config {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?)
            .with_context(|| format!("invalid synth config {}", p.display()))?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.users {
        config.n_users = v;
    }
    if let Some(v) = a.posts_per_user {
        config.posts_per_user = v;
    }
    if let Some(v) = a.positive_fraction {
        config.positive_fraction = v;
    }
    if let Some(v) = a.noise_rate {
        config.noise_rate = v;
    }
    let dataset = synth_generate(&config)?;
    let out = ctx.out(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_histories(&dataset, &out)?;
    let mut manifest = Manifest::new("synth", serde_json::to_value(&config)?).output(&out)?;
    if let Some(labels) = &a.labels {
        let labels = ctx.out(labels);
        let rows: Vec<_> = dataset
            .labels()
            .into_iter()
            .map(|(user_id, label)| json!({"user_id": user_id, "label": label}))
            .collect();
        write_jsonl(&labels, &rows)?;
        manifest = manifest.output(&labels)?;
    }
    manifest.write(&out)?;
    info!(users = dataset.users.len(), posts = dataset.num_posts(), out = %out.display(), "synthetic corpus written");
    Ok(())
}

fn open_provider(args: &ProviderArgs) -> Result<Provider> {
    let provider = Provider::new(args.config())?;
    if let Err(e) = provider.health() {
        bail!("embedding provider unavailable: {e}");
    }
    Ok(provider)
}

fn screen(ctx: &Ctx, a: ScreenArgs) -> Result<()> {
    if a.k == 0 {
        bail!("--k must be at least 1");
    }
    let dataset = load_histories(&a.input)?;
    let provider = open_provider(&a.provider)?;
    let screener = Screener::new(preset(&a.set)?, &provider)?;
    let per_user = ctx.par_map(&dataset.users, |h| {
        Ok(screen_history(&screener, h, dataset.split_of(&h.user_id), a.k, &provider)?)
    })?;
    let out = ctx.out(&a.out);
    write_jsonl(&out, per_user.iter().flatten())?;
    Manifest::new(
        "screen",
        json!({"set": a.set, "k": a.k, "provider": provider.config(), "fingerprint": provider.config().fingerprint()}),
    )
    .input(&a.input)?
    .output(&out)?
    .write(&out)?;
    info!(users = per_user.len(), posts = dataset.num_posts(), out = %out.display(), "screening written");
    Ok(())
}

/// Selected records per user, chronological, restricted to a split.
fn selected_by_user(records: Vec<ScoredRecord>, split: Option<Split>) -> BTreeMap<String, Vec<ScoredRecord>> {
    let mut users: BTreeMap<String, Vec<ScoredRecord>> = BTreeMap::new();
    for r in records {
        if !r.selected || split.is_some_and(|s| r.split.unwrap_or(Split::Train) != s) {
            continue;
        }
        users.entry(r.user_id.clone()).or_default().push(r);
    }
    for posts in users.values_mut() {
        posts.sort_by(|a, b| (a.timestamp, &a.post_id).cmp(&(b.timestamp, &b.post_id)));
    }
    users
}

fn load_model_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?)
            .with_context(|| format!("invalid model config {}", p.display())),
        None => Ok(ModelConfig::default()),
    }
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let mut config = load_model_config(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    let users = selected_by_user(read_jsonl(&a.screened)?, a.split.to_split());
    if users.is_empty() {
        bail!("{} has no selected posts in the requested split", a.screened.display());
    }
    let provider = open_provider(&a.provider)?;
    let texts: Vec<String> = users.values().flatten().map(|r| r.post().encoder_text()).collect();
    let mut vectors = provider.embed_batch(&texts)?.into_iter();

    let mut examples = Vec::with_capacity(users.len());
    for (user_id, records) in &users {
        let label = records[0]
            .label
            .with_context(|| format!("user {user_id:?} has no label in {}", a.screened.display()))?;
        if records.len() > config.max_posts {
            bail!(
                "user {user_id:?} has {} selected posts but max_posts is {}; raise max_posts or screen with a smaller --k",
                records.len(),
                config.max_posts
            );
        }
        examples.push(TrainingExample {
            user_id: user_id.clone(),
            posts: vectors.by_ref().take(records.len()).collect(),
            label,
        });
    }
    config.embed_dim = examples[0].posts[0].dim();

    let started = Instant::now();
    let report = train(&examples, &config)?;
    let positives = examples.iter().filter(|e| e.label == 1).count();
    info!(
        users = examples.len(),
        positives,
        parameters = report.params.num_parameters(),
        seconds = started.elapsed().as_secs_f64(),
        losses = ?report.epoch_losses,
        "training finished"
    );
    let out = ctx.out(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    report.params.save(&out)?;
    Manifest::new(
        "train",
        json!({
            "model": config,
            "split": format!("{:?}", a.split).to_lowercase(),
            "users": examples.len(),
            "positives": positives,
            "epoch_losses": report.epoch_losses,
            "fingerprint": provider.config().fingerprint(),
        }),
    )
    .input(&a.screened)?
    .output(&out)?
    .write(&out)?;
    Ok(())
}

fn users_in_split(dataset: &Dataset, split: SplitArg) -> Vec<&UserHistory> {
    dataset
        .users
        .iter()
        .filter(|h| split.to_split().map_or(true, |s| dataset.split_of(&h.user_id) == Some(s)))
        .collect()
}

#[derive(Debug, Serialize)]
struct StreamStats {
    users: usize,
    alerts: usize,
    posts_seen: usize,
    total_posts: usize,
    inferences: usize,
    inference_fraction: Option<f64>,
    k: usize,
    threshold: f64,
    timings_seconds: BTreeMap<&'static str, f64>,
}

fn stream(ctx: &Ctx, a: StreamArgs) -> Result<()> {
    let t0 = Instant::now();
    let model = ModelParams::load(&a.model)?;
    if a.k > model.config.max_posts {
        bail!("--k {} exceeds the model's max_posts {}", a.k, model.config.max_posts);
    }
    let dataset = load_histories(&a.input)?;
    let users = users_in_split(&dataset, a.split);
    let provider = open_provider(&a.provider)?;
    let screener = Screener::new(preset(&a.set)?, &provider)?;
    let options = StreamOptions {
        trace_after_alert: a.full_trace,
        ..StreamOptions::new(a.k, a.threshold)
    };
    options.validate()?;
    let setup = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let outcomes = ctx.par_map(&users, |h| Ok(run_stream_with(h, &model, &screener, &provider, &options)?))?;
    let streaming = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let out = ctx.out(&a.out);
    write_jsonl(&out, outcomes.iter().map(|o| &o.decision))?;
    let mut manifest = Manifest::new(
        "stream",
        json!({
            "set": a.set, "k": a.k, "threshold": a.threshold, "split": format!("{:?}", a.split).to_lowercase(),
            "full_trace": a.full_trace, "fingerprint": provider.config().fingerprint(),
        }),
    )
    .input(&a.model)?
    .input(&a.input)?
    .output(&out)?;
    if let Some(traces) = &a.traces {
        let traces = ctx.out(traces);
        write_jsonl(&traces, outcomes.iter().map(|o| &o.trace))?;
        manifest = manifest.output(&traces)?;
    }
    let decisions: Vec<_> = outcomes.iter().map(|o| o.decision.clone()).collect();
    let mut stats = StreamStats {
        users: decisions.len(),
        alerts: decisions.iter().filter(|d| d.alerted).count(),
        posts_seen: decisions.iter().map(|d| d.posts_seen).sum(),
        total_posts: users.iter().map(|h| h.posts.len()).sum(),
        inferences: decisions.iter().map(|d| d.inferences).sum(),
        inference_fraction: inference_fraction(&decisions).ok(),
        k: a.k,
        threshold: a.threshold,
        timings_seconds: BTreeMap::from([("setup", setup), ("stream", streaming)]),
    };
    if let Some(path) = &a.stats {
        let path = ctx.out(path);
        stats.timings_seconds.insert("write", t2.elapsed().as_secs_f64());
        write_json(&path, &stats)?;
    }
    manifest.write(&out)?;
    info!(
        users = stats.users,
        alerts = stats.alerts,
        inference_fraction = ?stats.inference_fraction,
        "stream finished"
    );
    Ok(())
}

const METRIC_NAMES: &[&str] = &[
    "erde5",
    "erde50",
    "precision",
    "recall",
    "f1",
    "auc",
    "mean_latency",
    "median_latency",
    "inference_fraction",
];

fn evaluate_cmd(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let wanted: Vec<&str> = a.metrics.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    if let Some(bad) = wanted.iter().find(|m| !METRIC_NAMES.contains(m)) {
        bail!("unknown metric {bad:?}; choose from {}", METRIC_NAMES.join(","));
    }
    let decisions: Vec<riskqueue::Decision> = read_jsonl(&a.decisions)?;
    let labels = read_labels(&a.labels)?;
    let report = serde_json::to_value(evaluate(&decisions, &labels, a.c_fp)?)?;
    let mut out_obj = serde_json::Map::new();
    for key in ["users", "counts", "zero_division"] {
        out_obj.insert(key.into(), report[key].clone());
    }
    for m in &wanted {
        out_obj.insert((*m).into(), report[*m].clone());
    }
    let out = ctx.out(&a.out);
    write_json(&out, &out_obj)?;
    Manifest::new("evaluate", json!({"metrics": wanted, "c_fp": a.c_fp}))
        .input(&a.decisions)?
        .input(&a.labels)?
        .output(&out)?
        .write(&out)?;
    info!(report = %serde_json::Value::Object(out_obj), "evaluation written");
    Ok(())
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    let traces: Vec<UserTrace> = read_jsonl(&a.traces)?;
    let labels = read_labels(&a.labels)?;
    let thresholds = parse_thresholds(&a.thresholds)?;
    let rows = threshold_sweep(&traces, &labels, &thresholds)?;
    let out = ctx.out(&a.out);
    let mut w = csv::Writer::from_writer(create(&out)?);
    w.write_record(["threshold", "erde5", "erde50", "f1"])?;
    for r in &rows {
        w.write_record([r.threshold, r.erde5, r.erde50, r.f1].map(|v| v.to_string()))?;
    }
    w.flush()?;
    drop(w);
    Manifest::new("sweep", json!({"thresholds": thresholds}))
        .input(&a.traces)?
        .input(&a.labels)?
        .output(&out)?
        .write(&out)?;
    Ok(())
}

fn lexical(ctx: &Ctx, a: LexicalArgs) -> Result<()> {
    let lexicon = match &a.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::builtin(),
    };
    let records: Vec<ScoredRecord> = read_jsonl(&a.scored)?;
    let comparisons = a
        .categories
        .split(',')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(|c| compare_selected(&records, &lexicon, c))
        .collect::<riskqueue::Result<Vec<_>>>()?;
    let out = ctx.out(&a.out);
    write_json(&out, &comparisons)?;
    let mut manifest = Manifest::new("lexical", json!({"categories": a.categories})).input(&a.scored)?;
    if let Some(p) = &a.lexicon {
        manifest = manifest.input(p)?;
    }
    manifest.output(&out)?.write(&out)?;
    for c in &comparisons {
        info!(
            category = %c.category,
            selected = c.selected.proportion,
            unselected = c.unselected.proportion,
            z = c.test.z,
            p = c.test.p_value,
            "lexical comparison"
        );
    }
    Ok(())
}

fn curve(ctx: &Ctx, a: CurveArgs) -> Result<()> {
    let model = ModelParams::load(&a.model)?;
    if a.k > model.config.max_posts {
        bail!("--k {} exceeds the model's max_posts {}", a.k, model.config.max_posts);
    }
    let dataset = load_histories(&a.input)?;
    let history = match (&a.user, dataset.users.as_slice()) {
        (Some(u), _) => dataset.user(u).with_context(|| format!("user {u:?} not in {}", a.input.display()))?,
        (None, [only]) => only,
        (None, _) => bail!("{} holds several users; pick one with --user", a.input.display()),
    };
    let provider = open_provider(&a.provider)?;
    let screener = Screener::new(preset(&a.set)?, &provider)?;
    let series = depression_curve(
        history,
        &model,
        &screener,
        &provider,
        a.k,
        a.interval_days,
        a.variant.into(),
    )?;
    let out = ctx.out(&a.out);
    let mut w = csv::Writer::from_writer(create(&out)?);
    w.write_record(["group_start", "pr", "s"])?;
    for g in &series.groups {
        w.write_record([g.group_start.to_string(), g.pr.to_string(), g.s.to_string()])?;
    }
    w.flush()?;
    drop(w);
    Manifest::new(
        "curve",
        json!({"user": history.user_id, "interval_days": a.interval_days, "set": a.set, "k": a.k,
               "variant": format!("{:?}", a.variant).to_lowercase(), "fingerprint": provider.config().fingerprint()}),
    )
    .input(&a.model)?
    .input(&a.input)?
    .output(&out)?
    .write(&out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradcheckRow {
    seed: u64,
    config: ModelConfig,
    max_rel_error: f64,
    worst_tensor: String,
    entries_checked: usize,
    passed: bool,
}

fn gradcheck(ctx: &Ctx, a: GradcheckArgs) -> Result<()> {
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + a.seeds).collect();
    let rows = ctx.par_map(&seeds, |&seed| {
        let config = random_small_config(seed);
        let r = grad_check(&config, a.tolerance)?;
        Ok(GradcheckRow {
            seed,
            config,
            max_rel_error: r.max_rel_error,
            worst_tensor: r.worst_tensor,
            entries_checked: r.entries_checked,
            passed: r.passed,
        })
    })?;
    for r in &rows {
        println!(
            "seed {:>3}  layers {} heads {} d {:>2}  max rel error {:.3e} ({})  {}",
            r.seed,
            r.config.num_layers,
            r.config.num_heads,
            r.config.model_dim,
            r.max_rel_error,
            r.worst_tensor,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(p) = &a.out {
        write_json(&ctx.out(p), &rows)?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} configurations exceed tolerance {}", rows.len(), a.tolerance);
    }
    Ok(())
}
