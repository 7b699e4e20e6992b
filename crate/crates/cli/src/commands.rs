use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cirbench_core::composers::checkpoint::Checkpoint;
use cirbench_core::composers::{Composer, ComposerConfig, ComposerKind, ProjectionMode};
use cirbench_core::dataset::{caption_length_stats, dataset_stats, read_dataset, write_dataset, DatasetFile};
use cirbench_core::eval::{compose_queries, evaluate, evaluate_split, retrieve, EmbeddedCorpus, RetrieveOptions};
use cirbench_core::features::{default_ids_path, load_feature_store, write_feature_store, FeatureStore};
use cirbench_core::metrics::{CompositeSpec, MetricKey, MetricReport};
use cirbench_core::miner::{mine_all, MinerConfig};
use cirbench_core::pairs::{assign_splits, draw_pairs, extract_dialogue_paths, PairKind, SplitRatios};
use cirbench_core::submission::Submission;
use cirbench_core::synthetic::{generate, SyntheticConfig};
use cirbench_core::text::Vocabulary;
use cirbench_core::trainer::gradcheck::grad_check;
use cirbench_core::trainer::{train_with, Fixture, NegativeMode, OptimizerKind, TrainConfig, TrainingSet};
use cirbench_core::{Error, ImageId, Split, Subset};
use cirbench_server::{ErrorBody, GoldSet, ServerConfig};
use serde::Serialize;

use crate::{
    ArchArgs, CaptionArgs, Command, DatasetArgs, EvalArgs, FeatureArgs, GradCheckArgs, MineArgs, ModelArgs,
    NegativeArg, NumericalFailure, OptimizerArg, PairsArgs, Preset, RetrieveArgs, ServeArgs, SplitArgs, StatsArgs,
    SubmitArgs, SynthArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Mine(a) => mine(a),
        Command::Pairs(a) => pairs(a),
        Command::Split(a) => split(a),
        Command::Stats(a) => stats(a),
        Command::AnalyzeCaptions(a) => analyze_captions(a),
        Command::Train(a) => train(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::Embed(a) => embed(a),
        Command::Retrieve(a) => retrieve_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Submit(a) => submit(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}

fn load_features(a: &FeatureArgs) -> Result<FeatureStore> {
    let ids = a.ids.clone().unwrap_or_else(|| default_ids_path(&a.features));
    load_feature_store(&a.features, &ids).with_context(|| format!("loading features {}", a.features.display()))
}

fn parse_split(s: Option<&str>) -> Result<Option<Split>> {
    Ok(s.map(str::parse).transpose()?)
}

fn load_dataset(path: &Path, split: Option<&str>) -> Result<DatasetFile> {
    let split = parse_split(split)?;
    read_dataset(path, split).with_context(|| format!("reading {}", path.display()))
}

fn load_dataset_args(a: &DatasetArgs) -> Result<DatasetFile> {
    load_dataset(&a.dataset, a.split.as_deref())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(Error::from).with_context(|| format!("parsing {}", path.display()))?)
}

fn mine(a: MineArgs) -> Result<()> {
    let store = load_features(&a.features)?;
    let cfg = MinerConfig {
        near_duplicate_threshold: a.near_duplicate_threshold,
        min_gap: a.min_gap,
        candidate_window: a.window,
        subset_size: a.size,
        overlap_limit: a.overlap_limit,
        rng_seed: a.seed,
    };
    let subsets = mine_all(&store, &cfg, a.count)?;
    if subsets.len() < a.count {
        log::warn!("corpus exhausted after {} of {} subsets", subsets.len(), a.count);
    }
    write_json(&subsets, &a.out)?;
    println!("mined {} subsets from {} images", subsets.len(), store.len());
    Ok(())
}

#[derive(Serialize)]
struct PairSkeleton<'a> {
    subset_id: u64,
    reference: &'a ImageId,
    target: &'a ImageId,
    reference_rank: usize,
    target_rank: usize,
    kind: PairKind,
}

fn pairs(a: PairsArgs) -> Result<()> {
    let subsets: Vec<Subset> = read_json(&a.subsets)?;
    let mut out = Vec::new();
    for s in &subsets {
        for p in draw_pairs(s) {
            out.push(PairSkeleton {
                subset_id: s.id,
                reference: &s.members[p.reference_rank],
                target: &s.members[p.target_rank],
                reference_rank: p.reference_rank,
                target_rank: p.target_rank,
                kind: p.kind,
            });
        }
    }
    write_json(&out, &a.out)?;
    println!("{} pairs from {} subsets", out.len(), subsets.len());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let subsets: Vec<Subset> = read_json(&a.subsets)?;
    let ratios: SplitRatios = a.ratios.parse()?;
    let assignment = assign_splits(&subsets, ratios, a.seed)?;
    write_json(&assignment, &a.out)?;
    for (split, n) in assignment.counts() {
        println!("{split:<5} {n:>7} subsets");
    }
    Ok(())
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn stats(a: StatsArgs) -> Result<()> {
    let files = a
        .files
        .iter()
        .map(|p| load_dataset(p, None))
        .collect::<Result<Vec<_>>>()?;
    let stats = dataset_stats(&files);
    let dialogue: Vec<_> = if a.dialogue {
        files.iter().map(|f| extract_dialogue_paths(&f.records)).collect()
    } else {
        Vec::new()
    };
    if a.json {
        #[derive(Serialize)]
        struct Row<'a> {
            #[serde(flatten)]
            stats: &'a cirbench_core::dataset::SplitStats,
            #[serde(skip_serializing_if = "Option::is_none")]
            closed_loop_fraction: Option<f64>,
            #[serde(skip_serializing_if = "Option::is_none")]
            longest_path: Option<usize>,
        }
        let rows: Vec<Row> = stats
            .iter()
            .enumerate()
            .map(|(i, s)| Row {
                stats: s,
                closed_loop_fraction: dialogue.get(i).map(|d| d.closed_loop_fraction()),
                longest_path: dialogue.get(i).map(|d| d.longest_path()),
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!(
        "{:<6} {:>9} {:>9} {:>11} {:>9} {:>6} {:>6} {:>6} {:>6}",
        "split", "subsets", "pairs", "pairs/set", "images", "Q1%", "Q2%", "Q3%", "Q4%"
    );
    for s in &stats {
        println!(
            "{:<6} {:>9} {:>9} {:>11.2} {:>9} {:>6.1} {:>6.1} {:>6.1} {:>6.1}",
            s.split.as_str(),
            thousands(s.subsets),
            thousands(s.pairs),
            s.pairs_per_subset,
            thousands(s.images),
            s.aux_applicable_pct[0],
            s.aux_applicable_pct[1],
            s.aux_applicable_pct[2],
            s.aux_applicable_pct[3],
        );
    }
    for (s, d) in stats.iter().zip(&dialogue) {
        println!(
            "{}: {} closed loops ({:.1}% of subsets), {} open paths, longest {} turns",
            s.split,
            d.cycles.len(),
            100.0 * d.closed_loop_fraction(),
            d.paths.len(),
            d.longest_path()
        );
    }
    Ok(())
}

fn analyze_captions(a: CaptionArgs) -> Result<()> {
    let files = a
        .files
        .iter()
        .map(|p| load_dataset(p, None))
        .collect::<Result<Vec<_>>>()?;
    let c = caption_length_stats(&files);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&c)?);
    } else {
        println!("captions {}", c.captions);
        println!("mean     {:.2}", c.mean);
        println!("median   {:.1}", c.median);
        println!("stddev   {:.2}", c.stddev);
    }
    Ok(())
}

fn composer_config(kind: ComposerKind, feature_dim: usize, vocab: usize, arch: &ArchArgs, seed: u64) -> ComposerConfig {
    ComposerConfig {
        d_model: arch.d_model,
        d_ff: arch.d_ff,
        layers: arch.layers,
        heads: arch.heads,
        max_tokens: arch.max_tokens,
        projection: if arch.identity_projection {
            ProjectionMode::Identity
        } else {
            ProjectionMode::Learned
        },
        init_seed: seed,
        ..ComposerConfig::desk(kind, feature_dim, vocab)
    }
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let base = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::full(),
    };
    TrainConfig {
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        epochs: a.epochs.unwrap_or(base.epochs),
        lr: a.lr.unwrap_or(base.lr),
        optimizer: match a.optimizer {
            Some(OptimizerArg::Adamw) => OptimizerKind::AdamW,
            Some(OptimizerArg::Sgd) => OptimizerKind::Sgd,
            None => base.optimizer,
        },
        weight_decay: a.weight_decay.unwrap_or(base.weight_decay),
        negatives: match a.negatives {
            Some(NegativeArg::Corpus) => NegativeMode::Corpus,
            Some(NegativeArg::InBatch) => NegativeMode::InBatch,
            None => base.negatives,
        },
        negatives_per_positive: a.negatives_per_positive.unwrap_or(base.negatives_per_positive),
        rng_seed: a.seed,
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let kind: ComposerKind = a.kind.parse()?;
    let store = load_features(&a.features)?;
    let train_file = load_dataset(&a.train, Some("train"))?;
    let val_file = a.val.as_deref().map(|p| load_dataset(p, Some("val"))).transpose()?;
    let vocab = Vocabulary::build(train_file.records.iter().map(|r| r.caption.as_str()));
    let cfg = composer_config(kind, store.dimension(), vocab.len(), &a.arch, a.seed);
    let mut composer = Composer::new(cfg)?;
    let set = TrainingSet::from_dataset(&train_file, &store, &vocab, kind, a.seed)?;
    let tcfg = train_config(&a);
    log::info!(
        "training {kind} ({} parameters) on {} pairs for {} epochs",
        composer.param_count(),
        set.examples.len(),
        tcfg.epochs
    );
    let opts = RetrieveOptions {
        depth: None,
        substitute_seed: a.seed,
    };
    let trace = train_with(&mut composer, &set, &tcfg, |epoch, c| {
        let Some(val) = &val_file else { return Ok(None) };
        let report = evaluate_split(c, &vocab, val, &store, opts)?;
        let r1 = report.get(MetricKey::RecallSubset(1));
        log::info!("epoch {epoch}: val R_Subset@1 {:.2}", r1.unwrap_or(f64::NAN));
        Ok(r1)
    })?;
    let checkpoint = Checkpoint { composer, vocabulary: vocab };
    checkpoint.save(&a.out)?;
    if let Some(path) = &a.trace {
        fs::write(path, trace.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    println!("final loss {:.6}", trace.final_loss().unwrap_or(f64::NAN));
    if let Some(m) = trace.epochs.last().and_then(|e| e.metric) {
        println!("val R_Subset@1 {m:.2}");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let kinds: Vec<ComposerKind> = if a.kind.is_empty() {
        ComposerKind::ALL.to_vec()
    } else {
        a.kind.iter().map(|k| k.parse()).collect::<cirbench_core::Result<_>>()?
    };
    let mut failed = Vec::new();
    println!("{:<18} {:<24} {:>7} {:>12} {:>8}", "kind", "group", "params", "max rel err", "refined");
    for kind in kinds {
        let cfg = ComposerConfig {
            d_model: a.d_model,
            d_ff: a.d_ff,
            layers: a.layers,
            heads: a.heads,
            max_tokens: a.tokens.max(1),
            init_seed: a.seed,
            ..ComposerConfig::desk(kind, a.feature_dim, a.vocab)
        };
        let composer = Composer::new(cfg)?;
        let fixture = Fixture::random(&composer, a.samples, a.tokens, a.seed);
        let report = grad_check(&composer, &fixture, a.step, a.tolerance)?;
        for g in &report.groups {
            println!(
                "{:<18} {:<24} {:>7} {:>12.3e} {:>8}",
                kind.as_str(),
                g.name,
                g.params,
                g.max_rel_error,
                g.refined
            );
        }
        if !report.passed() {
            failed.push(kind);
        }
    }
    if !failed.is_empty() {
        let names: Vec<&str> = failed.iter().map(|k| k.as_str()).collect();
        return Err(NumericalFailure(format!(
            "gradient check above tolerance {:e} for {}",
            a.tolerance,
            names.join(", ")
        ))
        .into());
    }
    println!("all groups below {:e}", a.tolerance);
    Ok(())
}

struct LoadedModel {
    checkpoint: Checkpoint,
    store: FeatureStore,
    file: DatasetFile,
}

fn load_model(a: &ModelArgs) -> Result<LoadedModel> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let store = load_features(&a.features)?;
    if checkpoint.composer.config.feature_dim != store.dimension() {
        return Err(Error::Consistency(format!(
            "checkpoint expects {}-dimensional features, store has {}",
            checkpoint.composer.config.feature_dim,
            store.dimension()
        ))
        .into());
    }
    let file = load_dataset_args(&a.dataset)?;
    Ok(LoadedModel { checkpoint, store, file })
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn embed(a: ModelArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        kind: &'static str,
        id: String,
        vector: &'a [f64],
    }
    let m = load_model(&a)?;
    let composer = &m.checkpoint.composer;
    let corpus = EmbeddedCorpus::new(composer, &m.store, m.file.images())?;
    let queries = compose_queries(composer, &m.checkpoint.vocabulary, &m.file, &corpus, a.substitute_seed)?;
    let mut w = output(a.out.as_ref())?;
    for (r, q) in m.file.records.iter().zip(&queries) {
        let line = Line {
            kind: "query",
            id: r.pair_id.to_string(),
            vector: q,
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    for (id, v) in corpus.ids.iter().zip(&corpus.projected) {
        let line = Line {
            kind: "image",
            id: id.to_string(),
            vector: v,
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}

fn retrieve_cmd(a: RetrieveArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let opts = RetrieveOptions {
        depth: Some(a.depth),
        substitute_seed: a.model.substitute_seed,
    };
    let rankings = retrieve(&m.checkpoint.composer, &m.checkpoint.vocabulary, &m.file, &m.store, opts)?;
    let sub = Submission::from_rankings(m.file.split, &rankings, a.depth);
    let mut w = output(a.model.out.as_ref())?;
    serde_json::to_writer(&mut w, &sub)?;
    writeln!(w)?;
    w.flush()?;
    log::info!("ranked {} queries", rankings.len());
    Ok(())
}

fn print_report(report: &MetricReport, json: bool) -> Result<()> {
    let report = report.rounded();
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let opts = RetrieveOptions {
        depth: None,
        substitute_seed: a.model.substitute_seed,
    };
    if m.file.labeled().count() != m.file.records.len() {
        bail!(Error::Data(format!(
            "{} split has unlabeled records; use retrieve and submit instead",
            m.file.split
        )));
    }
    let rankings = retrieve(&m.checkpoint.composer, &m.checkpoint.vocabulary, &m.file, &m.store, opts)?;
    let report = evaluate(&rankings, &CompositeSpec::cirr())?;
    if let Some(out) = &a.model.out {
        write_json(&report.rounded(), out)?;
    }
    print_report(&report, a.json)
}

fn submit(a: SubmitArgs) -> Result<()> {
    let sub: Submission = read_json(&a.submission)?;
    let report = if let Some(gold) = &a.gold {
        let gold = GoldSet::new(load_dataset(gold, Some(sub.split.as_str()))?)?;
        gold.score(&sub).map_err(|r| Error::Validation(r.problems.join("; ")))?
    } else {
        let base = a.server.as_deref().expect("clap enforces --server or --gold");
        let url = format!("{}/v1/submit", base.trim_end_matches('/'));
        let resp = reqwest::blocking::Client::new()
            .post(&url)
            .json(&sub)
            .send()
            .with_context(|| format!("posting to {url}"))?;
        let status = resp.status();
        let body = resp.bytes()?;
        if !status.is_success() {
            let detail = serde_json::from_slice::<ErrorBody>(&body)
                .map(|e| {
                    let mut s = e.error;
                    for p in e.problems {
                        s.push_str("\n  ");
                        s.push_str(&p);
                    }
                    s
                })
                .unwrap_or_else(|_| String::from_utf8_lossy(&body).into_owned());
            return Err(Error::Validation(format!("server returned {status}: {detail}")).into());
        }
        serde_json::from_slice(&body).map_err(Error::from)?
    };
    print_report(&report, a.json)
}

fn serve(a: ServeArgs) -> Result<()> {
    let file = load_dataset(&a.gold, a.split.as_deref())?;
    let gold = GoldSet::new(file)?;
    println!("fingerprint {}", gold.fingerprint());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(cirbench_server::serve(
        gold,
        a.addr,
        ServerConfig {
            body_limit: a.body_limit,
        },
    ))?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        images: a.images,
        noise: a.noise,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let bench = generate(&cfg)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let features = a.out_dir.join("features.cfv");
    write_feature_store(&bench.store, &features, &default_ids_path(&features))?;
    write_json(&bench.subsets, &a.out_dir.join("subsets.json"))?;
    for (split, file) in &bench.splits {
        let name = format!("cap.synth.{split}.json");
        if *split == Split::Test {
            write_dataset(file, &a.out_dir.join(format!("gold.synth.{split}.json")))?;
            let mut hidden = file.clone();
            for r in &mut hidden.records {
                r.target_hard = None;
                r.target_soft.clear();
                r.target_rank = None;
            }
            write_dataset(&hidden, &a.out_dir.join(name))?;
        } else {
            write_dataset(file, &a.out_dir.join(name))?;
        }
        println!("{split:<5} {:>5} pairs", file.records.len());
    }
    println!("wrote {} images to {}", bench.store.len(), a.out_dir.display());
    Ok(())
}
