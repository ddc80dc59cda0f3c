//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};

use pushmix_core::eval::{
    context_curve, policy_compare, split_examples, weight_analysis, weight_analysis_csv, Policy,
    PolicySpec,
};
use pushmix_core::features::{
    read_examples, write_examples, CatalogRecord, DemographicsRecord, FeatureConfig,
    FeatureSchema, FeatureSetDef, FeatureSources,
};
use pushmix_core::graph::{NodeKind, ScoreSet};
use pushmix_core::ingest::{filter_window, parse_events, parse_impressions, InteractionEvent};
use pushmix_core::mixture::em::em_fit;
use pushmix_core::mixture::{load_model, log_likelihood, save_model, FitConfig};
use pushmix_core::rank::{batch_rank, PairRequest, SelectionConfig};
use pushmix_core::synth::{generate, SyntheticSpec};

fn reader(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn writer(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn load_events(path: &Path, strict: bool) -> anyhow::Result<Vec<InteractionEvent>> {
    let outcome = parse_events(reader(path)?, strict)?;
    if outcome.skipped > 0 {
        eprintln!("events: skipped {} malformed lines", outcome.skipped);
    }
    Ok(outcome.records)
}

fn load_catalog(path: Option<&Path>) -> anyhow::Result<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();
    if let Some(path) = path {
        for (idx, line) in reader(path)?.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CatalogRecord = serde_json::from_str(&line)
                .with_context(|| format!("catalog line {}", idx + 1))?;
            if !rec.price.is_finite() || rec.price < 0.0 {
                bail!("catalog line {}: invalid price {}", idx + 1, rec.price);
            }
            map.insert(rec.item_id, rec.price);
        }
    }
    Ok(map)
}

fn load_demographics(path: Option<&Path>) -> anyhow::Result<BTreeMap<String, (usize, usize)>> {
    let mut map = BTreeMap::new();
    if let Some(path) = path {
        for (idx, line) in reader(path)?.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DemographicsRecord = serde_json::from_str(&line)
                .with_context(|| format!("demographics line {}", idx + 1))?;
            map.insert(rec.user_id, (rec.age_bucket, rec.income_bucket));
        }
    }
    Ok(map)
}

fn load_schema(path: &Path) -> anyhow::Result<FeatureSchema> {
    FeatureSchema::from_reader(reader(path)?)
        .with_context(|| format!("cannot parse schema {}", path.display()))
}

pub fn ingest(events: &Path, impressions: &Path, strict: bool) -> anyhow::Result<()> {
    let ev = parse_events(reader(events)?, strict)?;
    let imp = parse_impressions(reader(impressions)?, strict)?;
    println!(
        "events: {} valid, {} skipped, {} lines",
        ev.records.len(),
        ev.skipped,
        ev.lines
    );
    println!(
        "impressions: {} valid, {} skipped, {} lines",
        imp.records.len(),
        imp.skipped,
        imp.lines
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn score(
    events_path: &Path,
    category_level: bool,
    out: &Path,
    min_s: Option<f64>,
    max_q: Option<f64>,
    window_start: Option<i64>,
    window_end: Option<i64>,
) -> anyhow::Result<()> {
    let mut events = load_events(events_path, false)?;
    if window_start.is_some() || window_end.is_some() {
        let start = window_start.unwrap_or(i64::MIN);
        let end = window_end.unwrap_or(i64::MAX);
        events = filter_window(&events, start, end)?;
    }
    let kind = if category_level {
        NodeKind::Category
    } else {
        NodeKind::Product
    };
    let mut set = ScoreSet::from_events(&events, kind)?;
    if min_s.is_some() || max_q.is_some() {
        set = filter_score_set(&set, min_s.unwrap_or(f64::NEG_INFINITY), max_q.unwrap_or(f64::INFINITY), kind)?;
    }
    let mut w = writer(out)?;
    set.write_csv(&mut w)?;
    w.flush()?;
    println!("wrote {} score rows to {}", set.s.len(), out.display());
    Ok(())
}

fn filter_score_set(
    set: &ScoreSet,
    min_s: f64,
    max_q: f64,
    kind: NodeKind,
) -> anyhow::Result<ScoreSet> {
    // round-trip through CSV rows to keep only pairs passing the thresholds
    let mut buf = Vec::new();
    set.write_csv(&mut buf)?;
    let text = String::from_utf8(buf).expect("csv is utf-8");
    let mut kept = String::from("i,j,p,q,s\n");
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let q: f64 = fields[3].parse().unwrap_or(0.0);
        let s: f64 = fields[4].parse().unwrap_or(0.0);
        if s >= min_s && q <= max_q {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(ScoreSet::read_csv(kept.as_bytes(), kind)?)
}

pub fn schema(clusters: usize, out: &Path) -> anyhow::Result<()> {
    let schema = FeatureSchema::default_schema(clusters);
    let mut w = writer(out)?;
    w.write_all(schema.to_json_pretty().as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    println!(
        "schema: m = {}, n = {}, hash = {}",
        schema.assignment_dims(),
        schema.prediction_dims(),
        schema.hash()
    );
    Ok(())
}

pub fn featurize(
    events_path: &Path,
    impressions_path: &Path,
    schema_path: &Path,
    ref_time: i64,
    out: &Path,
    catalog: Option<&Path>,
    users: Option<&Path>,
) -> anyhow::Result<()> {
    let events = load_events(events_path, false)?;
    let impressions = parse_impressions(reader(impressions_path)?, false)?;
    if impressions.skipped > 0 {
        eprintln!("impressions: skipped {} malformed lines", impressions.skipped);
    }
    let schema = load_schema(schema_path)?;
    let sources = FeatureSources::build(
        &events,
        &load_catalog(catalog)?,
        &load_demographics(users)?,
        ref_time,
        schema,
        &FeatureConfig::default(),
    )?;
    let (examples, drops) = sources.assemble_batch(&impressions.records)?;
    let mut w = writer(out)?;
    write_examples(&mut w, &examples)?;
    w.flush()?;
    println!("examples: {} written to {}", examples.len(), out.display());
    for (reason, count) in &drops {
        println!("dropped {count} impressions: {reason}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    examples_path: &Path,
    contexts: usize,
    tol: f64,
    max_iter: usize,
    restarts: usize,
    seed: u64,
    l2: f64,
    schema_path: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let examples = read_examples(reader(examples_path)?)?;
    let cfg = FitConfig {
        contexts,
        tol,
        max_iter,
        restarts,
        seed,
        l2,
        ..FitConfig::new(contexts)
    };
    let schema = schema_path.map(load_schema).transpose()?;
    if let (Some(schema), Some(first)) = (&schema, examples.first()) {
        if first.x_hat.len() != schema.assignment_dims()
            || first.x.len() != schema.prediction_dims()
        {
            bail!(
                "examples have dims ({}, {}) but schema expects ({}, {})",
                first.x_hat.len(),
                first.x.len(),
                schema.assignment_dims(),
                schema.prediction_dims()
            );
        }
    }
    let (mut params, trace) = em_fit(&examples, &cfg)?;
    if let Some(schema) = &schema {
        params = params.with_schema_hash(schema.hash());
    }
    let final_loglik = trace
        .iterations
        .last()
        .map(|it| it.mean_loglik)
        .unwrap_or(f64::NEG_INFINITY);
    let mut w = writer(out)?;
    save_model(&mut w, &params, &cfg, final_loglik)?;
    w.flush()?;
    println!(
        "trained M = {} on {} examples: loglik {:.6}, {} iterations, converged = {}, restart {}",
        contexts,
        examples.len(),
        final_loglik,
        trace.iterations.len(),
        trace.converged,
        trace.restart
    );
    if let Some(schema) = &schema {
        let rows = weight_analysis(&params, schema)?;
        if !rows.is_empty() {
            print!("{}", weight_analysis_csv(&rows));
        }
    }
    Ok(())
}

pub fn predict(model_path: &Path, examples_path: &Path, out: &Path) -> anyhow::Result<()> {
    let (params, _, _) = load_model(reader(model_path)?)?;
    let examples = read_examples(reader(examples_path)?)?;
    let mut w = writer(out)?;
    for ex in &examples {
        let rate = params.predict_open_rate(&ex.x_hat, &ex.x)?;
        let record = serde_json::json!({
            "user_id": ex.user_id,
            "anchor_item_id": ex.anchor_item_id,
            "pushed_item_id": ex.pushed_item_id,
            "predicted_open_rate": rate,
        });
        serde_json::to_writer(&mut w, &record)?;
        writeln!(w)?;
    }
    w.flush()?;
    if !examples.is_empty() {
        let ll = log_likelihood(&params, &examples)?;
        println!("scored {} examples, mean loglik {:.6}", examples.len(), ll);
    } else {
        println!("scored 0 examples");
    }
    Ok(())
}

pub struct RankArgs<'a> {
    pub model: &'a Path,
    pub scores: &'a Path,
    pub category_scores: Option<&'a Path>,
    pub pairs: &'a Path,
    pub events: &'a Path,
    pub schema: &'a Path,
    pub ref_time: i64,
    pub top_n: usize,
    pub max_per_user: Option<usize>,
    pub min_s: f64,
    pub max_q: f64,
    pub catalog: Option<&'a Path>,
    pub users: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn rank(args: RankArgs<'_>) -> anyhow::Result<()> {
    let (params, _, _) = load_model(reader(args.model)?)?;
    let events = load_events(args.events, false)?;
    let schema = load_schema(args.schema)?;
    let mut sources = FeatureSources::build(
        &events,
        &load_catalog(args.catalog)?,
        &load_demographics(args.users)?,
        args.ref_time,
        schema,
        &FeatureConfig::default(),
    )?;
    sources.product_scores = ScoreSet::read_csv(reader(args.scores)?, NodeKind::Product)?;
    if let Some(path) = args.category_scores {
        sources.category_scores = ScoreSet::read_csv(reader(path)?, NodeKind::Category)?;
    }
    let mut pairs = Vec::new();
    for (idx, line) in reader(args.pairs)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PairRequest =
            serde_json::from_str(&line).with_context(|| format!("pairs line {}", idx + 1))?;
        pairs.push(pair);
    }
    let selection = SelectionConfig {
        min_s: args.min_s,
        max_q: args.max_q,
        ..SelectionConfig::default()
    };
    let (records, errors) = batch_rank(
        &pairs,
        &params,
        &sources,
        &selection,
        args.top_n,
        args.max_per_user,
    )?;
    let mut w = writer(args.out)?;
    for rec in &records {
        serde_json::to_writer(&mut w, rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    println!(
        "ranked {} pairs: {} lines written to {}",
        pairs.len(),
        records.len(),
        args.out.display()
    );
    for e in &errors {
        eprintln!("pair {}: {}", e.index, e.message);
    }
    Ok(())
}

fn load_spec(path: Option<&Path>) -> anyhow::Result<SyntheticSpec> {
    match path {
        Some(path) => Ok(serde_json::from_reader(reader(path)?)
            .with_context(|| format!("cannot parse spec {}", path.display()))?),
        None => Ok(SyntheticSpec::default()),
    }
}

pub fn synth(spec_path: Option<&Path>, out_dir: &Path) -> anyhow::Result<()> {
    let spec = load_spec(spec_path)?;
    let data = generate(&spec)?;
    std::fs::create_dir_all(out_dir)?;
    let jsonl = |name: &str| writer(&out_dir.join(name));

    let mut w = jsonl("events.jsonl")?;
    for ev in &data.events {
        serde_json::to_writer(&mut w, ev)?;
        writeln!(w)?;
    }
    w.flush()?;
    let mut w = jsonl("impressions.jsonl")?;
    for imp in &data.impressions {
        serde_json::to_writer(&mut w, imp)?;
        writeln!(w)?;
    }
    w.flush()?;
    let mut w = jsonl("catalog.jsonl")?;
    for rec in &data.catalog {
        serde_json::to_writer(&mut w, rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    let mut w = jsonl("users.jsonl")?;
    for rec in &data.demographics {
        serde_json::to_writer(&mut w, rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    let mut w = jsonl("schema.json")?;
    w.write_all(data.truth.schema.to_json_pretty().as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut w = jsonl("examples.jsonl")?;
    write_examples(&mut w, &data.examples)?;
    w.flush()?;
    let mut w = jsonl("truth_model.json")?;
    save_model(
        &mut w,
        &data.truth.params,
        &FitConfig::new(spec.true_contexts).with_seed(spec.seed),
        log_likelihood(&data.truth.params, &data.examples)?,
    )?;
    w.flush()?;
    println!(
        "synthetic world in {}: {} events, {} impressions, {} users, {} items",
        out_dir.display(),
        data.events.len(),
        data.impressions.len(),
        spec.users,
        spec.items
    );
    Ok(())
}

pub fn eval_curve(
    examples_path: &Path,
    schema_path: Option<&Path>,
    kmax: usize,
    valid_frac: f64,
    seed: u64,
    restarts: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let examples = read_examples(reader(examples_path)?)?;
    let (train, valid) = split_examples(&examples, valid_frac, seed);
    let feature_sets = match schema_path {
        Some(path) => load_schema(path)?.feature_sets(),
        None => vec![FeatureSetDef {
            name: "full".into(),
            x_hat_indices: (0..examples.first().map(|e| e.x_hat.len()).unwrap_or(0)).collect(),
        }],
    };
    let cfg = FitConfig {
        restarts,
        seed,
        ..FitConfig::new(1)
    };
    let report = context_curve(&train, &valid, &feature_sets, kmax, &cfg)?;
    let mut w = writer(out)?;
    w.write_all(report.to_csv().as_bytes())?;
    w.flush()?;
    for cell in &report.cells {
        println!(
            "{:>13} k={}: valid loglik {:.5} (train {:.5}, {} iters, converged = {})",
            cell.feature_set,
            cell.contexts,
            cell.valid_loglik,
            cell.train_loglik,
            cell.iterations,
            cell.converged
        );
    }
    Ok(())
}

pub fn eval_policies(
    spec_path: Option<&Path>,
    sends: usize,
    seed: u64,
    k_hat: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let spec = load_spec(spec_path)?;
    let k_hat = k_hat.unwrap_or(spec.true_contexts).max(1);
    let data = generate(&spec)?;
    let cfg = FitConfig {
        restarts: 3,
        seed,
        ..FitConfig::new(1)
    };
    let (mm1, _) = em_fit(&data.examples, &FitConfig { contexts: 1, ..cfg.clone() })?;
    let (mmk, _) = em_fit(&data.examples, &FitConfig { contexts: k_hat, ..cfg })?;
    let policies = vec![
        PolicySpec {
            name: "popularity".into(),
            policy: Policy::Popularity,
        },
        PolicySpec {
            name: "ppr_proxy".into(),
            policy: Policy::PreferenceOnly,
        },
        PolicySpec {
            name: "cpr_rule".into(),
            policy: Policy::CprRule,
        },
        PolicySpec {
            name: "cpr_mm_k1".into(),
            policy: Policy::Mixture(mm1),
        },
        PolicySpec {
            name: format!("cpr_mm_k{k_hat}"),
            policy: Policy::Mixture(mmk),
        },
        PolicySpec {
            name: "oracle".into(),
            policy: Policy::Oracle,
        },
    ];
    let report = policy_compare(&data, &policies, sends, seed)?;
    let mut w = writer(out)?;
    w.write_all(report.to_csv().as_bytes())?;
    w.flush()?;
    println!("{:>12} {:>9} {:>10} {:>8} {:>10}", "policy", "opens", "open_rate", "rel", "p_vs_prev");
    for r in &report.rows {
        println!(
            "{:>12} {:>9} {:>10.5} {:>8.3} {:>10}",
            r.name,
            r.opens,
            r.open_rate,
            r.rel_to_baseline,
            r.p_vs_prev.map(|p| format!("{p:.2e}")).unwrap_or_default()
        );
    }
    if !report.checks_passed {
        bail!("embedded invariant checks failed");
    }
    Ok(())
}
