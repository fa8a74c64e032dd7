use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use mcn::config::KeyValues;
use mcn::data::{
    generate_synthetic, load_annotations, read_features, read_index, Corpus, Split, SyntheticSpec,
};
use mcn::eval::{
    baseline_chance, baseline_moment_prior, baseline_upper_bound, evaluate, EvalReport, ModelRanker,
    DEFAULT_CHANCE_TRIALS,
};
use mcn::features::{Modality, Video};
use mcn::language::{tokenize, Query, Vocabulary};
use mcn::model::{
    localize_windows, read_checkpoint, run_grad_suite, train as train_model, write_checkpoint,
    GradSuiteConfig, ModelConfig, ModelParams, TrainingData,
};
use mcn::numerics::{GradCheckConfig, Tensor2};
use mcn::Execution;

use crate::settings::Settings;
use crate::{BaselineArgs, CliError, CorpusArgs, EvalArgs, GradcheckArgs, LocalizeArgs, ModelArgs, SynthArgs, TrainArgs};

const EXEC: Execution = Execution::Parallel;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn corpus_flags(s: &mut Settings, a: &CorpusArgs) {
    s.flag("data_dir", path_str(&a.data_dir));
    s.flag("annotations", path_str(&a.annotations));
    s.flag("index", path_str(&a.index));
    s.flag("splits", path_str(&a.splits));
    s.flag("embeddings", path_str(&a.embeddings));
    s.flag("aliases", a.aliases.clone());
}

fn model_flags(s: &mut Settings, a: &ModelArgs) {
    s.flag("eta", a.eta);
    s.flag("lambda", a.lambda);
    s.flag("margin", a.margin);
    s.flag("joint_dim", a.joint_dim);
    s.flag("visual_hidden", a.visual_hidden);
    s.flag("lstm_hidden", a.lstm_hidden);
    s.flag("use_global", a.use_global);
    s.flag("use_tef", a.use_tef);
    s.flag("modalities", a.modalities.clone());
    s.flag("language_free", a.language_free);
    s.flag("fine_tune_words", a.fine_tune_words);
}

fn open_corpus(s: &Settings) -> Result<Corpus, CliError> {
    let corpus = Corpus::open(&s.corpus_paths()?, &s.aliases()?)?;
    for (id, reason) in &corpus.ingest.rejected {
        warn!("annotation {id} rejected: {reason}");
    }
    Ok(corpus)
}

fn read_params(path: &Path) -> Result<(ModelParams, KeyValues), CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(read_checkpoint(&mut BufReader::new(file))?)
}

pub fn synth(mut s: Settings, a: SynthArgs) -> Result<(), CliError> {
    s.flag("seed", a.seed);
    s.flag("videos", a.videos);
    s.flag("val_fraction", a.val_fraction);
    s.flag("test_fraction", a.test_fraction);
    s.flag("dim", a.dim);
    s.flag("noise", a.noise);
    s.flag("queries_per_video", a.queries_per_video);
    s.flag("positional_rate", a.positional_rate);
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        seed: s.get_or("seed", d.seed)?,
        num_videos: s.get_or("videos", d.num_videos)?,
        val_fraction: s.get_or("val_fraction", d.val_fraction)?,
        test_fraction: s.get_or("test_fraction", d.test_fraction)?,
        dim: s.get_or("dim", d.dim)?,
        noise: s.get_or("noise", d.noise)?,
        queries_per_video: s.get_or("queries_per_video", d.queries_per_video)?,
        positional_rate: s.get_or("positional_rate", d.positional_rate)?,
        ..d
    };
    spec.validate()?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let summary = generate_synthetic(&spec, &a.out)?;
    let count = |sp| summary.videos.get(&sp).copied().unwrap_or(0);
    println!(
        "videos: train {} val {} test {}",
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    println!("queries: {} ({} positional)", summary.queries, summary.positional_queries);
    println!("vocabulary: {} words", summary.vocabulary);
    Ok(())
}

pub fn train(mut s: Settings, a: TrainArgs) -> Result<(), CliError> {
    corpus_flags(&mut s, &a.corpus);
    model_flags(&mut s, &a.model);
    s.flag("checkpoint", path_str(&a.checkpoint));
    s.flag("epochs", a.epochs);
    s.flag("batch_size", a.batch_size);
    s.flag("learning_rate", a.learning_rate);
    s.flag("seed", a.seed);
    s.flag("patience", a.patience);
    let checkpoint: PathBuf = s.require("checkpoint")?;
    let tc = s.train_config()?;

    let corpus = open_corpus(&s)?;
    let examples = corpus.examples(Split::Train);
    if examples.is_empty() {
        return Err(CliError::Usage("the train split has no annotations".into()));
    }
    let videos = corpus.load_videos(&[Split::Train, Split::Val], EXEC)?;
    let first = videos.values().next().expect("train videos loaded");
    let cfg = s.model_config(ModelConfig::new(
        first.modality(Modality::Rgb).dim(),
        first.modality(Modality::Flow).dim(),
        corpus.vocabulary.dim(),
    ))?;
    if tc.epochs == 0 {
        warn!("0 epochs: the checkpoint holds the initial weights");
    }
    let params = ModelParams::init(cfg, corpus.vocabulary.clone(), tc.seed)?;
    let data = TrainingData {
        examples,
        videos: &videos,
        validation: corpus.queries(Split::Val),
    };
    info!(
        "training on {} examples, validating on {} queries",
        data.examples.len(),
        data.validation.len()
    );
    let outcome = train_model(params, &data, &tc)?;

    let mut log = String::from("epoch\ttrain_loss\tintra\tinter\tval_r1\n");
    for e in &outcome.log {
        let val = e.val_r1.map_or("-".to_string(), |v| format!("{v:.4}"));
        log.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{val}\n",
            e.epoch, e.train_loss, e.intra, e.inter
        ));
    }
    print!("{log}");
    if let Some(path) = &a.log {
        write_text(path, &log)?;
    }
    println!(
        "kept epoch {} (val R@1 {})",
        outcome.best_epoch,
        outcome.best_val_r1.map_or("-".to_string(), |v| format!("{v:.4}"))
    );

    let mut extra = KeyValues::new();
    extra.set("epochs", tc.epochs);
    extra.set("batch_size", tc.batch_size);
    extra.set("learning_rate", format!("{:?}", tc.learning_rate));
    extra.set("seed", tc.seed);
    extra.set("patience", tc.patience.unwrap_or(0));
    extra.set("best_epoch", outcome.best_epoch);
    if let Some(v) = outcome.best_val_r1 {
        extra.set("best_val_r1", format!("{v:?}"));
    }
    let file = File::create(&checkpoint).map_err(io_err(&checkpoint))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, &outcome.params, &extra)?;
    w.flush().map_err(io_err(&checkpoint))?;
    Ok(())
}

fn emit(reports: &[(String, EvalReport)], json: Option<&Path>, table: Option<&Path>) -> Result<(), CliError> {
    let mut text = EvalReport::table_header();
    text.push('\n');
    for (name, r) in reports {
        text.push_str(&r.table_row(name));
        text.push('\n');
    }
    print!("{text}");
    if let Some(p) = table {
        write_text(p, &text)?;
    }
    if let Some(p) = json {
        let body = if let [(_, r)] = reports {
            r.to_json()
        } else {
            let map: BTreeMap<&str, &EvalReport> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
            serde_json::to_string_pretty(&map).expect("reports serialize")
        };
        write_text(p, &format!("{body}\n"))?;
    }
    Ok(())
}

pub fn eval(mut s: Settings, a: EvalArgs) -> Result<(), CliError> {
    corpus_flags(&mut s, &a.corpus);
    s.flag("checkpoint", path_str(&a.checkpoint));
    s.flag("baseline", a.baseline.clone());
    s.flag("split", a.split.clone());
    s.flag("trials", a.trials);
    s.flag("seed", a.seed);
    let split: Split = s.get_or("split", Split::Test)?;
    // A baseline flag beats a checkpoint named in the config file.
    let baseline: Option<String> = s.get("baseline")?;
    let checkpoint: Option<PathBuf> = if baseline.is_some() { None } else { s.get("checkpoint")? };
    if baseline.is_none() && checkpoint.is_none() {
        return Err(CliError::Usage("give --checkpoint or --baseline".into()));
    }
    let loaded = match &checkpoint {
        Some(p) => Some(read_params(p)?),
        None => None,
    };
    let corpus = open_corpus(&s)?;
    if corpus.records(split).is_empty() {
        return Err(CliError::Usage(format!("the {split} split has no annotations")));
    }
    let (name, mut report) = match (&loaded, baseline.as_deref()) {
        (Some((params, _)), _) => {
            let queries: Vec<Query> = corpus
                .records(split)
                .into_iter()
                .map(|r| r.to_query(&params.vocabulary))
                .collect();
            let videos = corpus.load_videos(&[split], EXEC)?;
            let report = evaluate(&ModelRanker::new(params), &queries, &videos, EXEC)?;
            ("mcn".to_string(), report)
        }
        (None, Some(b)) => {
            let queries = corpus.queries(split);
            let report = match b {
                "upper_bound" => baseline_upper_bound(&queries, EXEC)?,
                "chance" => baseline_chance(
                    &queries,
                    s.get_or("seed", 0)?,
                    s.get_or("trials", DEFAULT_CHANCE_TRIALS)?,
                    EXEC,
                )?,
                "prior" => baseline_moment_prior(&corpus.queries(Split::Train), &queries, EXEC)?,
                other => return Err(CliError::Usage(format!("unknown baseline `{other}`"))),
            };
            (b.to_string(), report)
        }
        (None, None) => unreachable!("checked above"),
    };
    report.config.insert("split".into(), split.to_string());
    if let Some(p) = &checkpoint {
        report.config.insert("checkpoint".into(), p.display().to_string());
    }
    emit(&[(name, report)], a.json.as_deref(), a.table.as_deref())
}

pub fn localize(mut s: Settings, a: LocalizeArgs) -> Result<(), CliError> {
    s.flag("checkpoint", path_str(&a.checkpoint));
    s.flag("index", path_str(&a.index));
    s.flag("data_dir", path_str(&a.data_dir));
    let checkpoint: PathBuf = s.require("checkpoint")?;
    let index = s
        .path("index")
        .or_else(|| s.path("data_dir").map(|d| d.join("index.tsv")))
        .ok_or_else(|| CliError::Usage("give --index or --data-dir".into()))?;
    let (params, _) = read_params(&checkpoint)?;
    let entry = read_index(&index)?
        .into_iter()
        .find(|e| e.video_id == a.video)
        .ok_or_else(|| CliError::Usage(format!("unknown video `{}`", a.video)))?;
    let rgb = read_features(&entry.rgb, &a.video, a.segments)?;
    let flow = read_features(&entry.flow, &a.video, a.segments)?;
    let video = Video::new(rgb, flow).map_err(|e| CliError::Usage(e.to_string()))?;
    let tokens = params.vocabulary.encode(&tokenize(&a.text));

    let mut out = String::new();
    if a.fine_grained {
        let window = a
            .window
            .unwrap_or_else(|| video.modality(Modality::Rgb).frames_per_segment());
        let stride = a.stride.unwrap_or(1);
        out.push_str("start_frame\tdistance\n");
        for w in localize_windows(&params, &tokens, &video, window, stride)? {
            out.push_str(&format!("{}\t{:.6}\n", w.start_frame, w.distance));
        }
    } else {
        let ranked = mcn::model::localize(&params, &tokens, &video)?;
        let top = a.top.unwrap_or(ranked.len());
        for (span, d) in ranked.into_iter().take(top) {
            out.push_str(&format!("{}\t{}\t{d:.6}\n", span.start, span.end));
        }
    }
    print!("{out}");
    Ok(())
}

fn annotation_queries(path: &Path, s: &Settings) -> Result<Vec<Query>, CliError> {
    let (records, ingest) = load_annotations(path, &s.aliases()?)?;
    for (id, reason) in &ingest.rejected {
        warn!("{}: annotation {id} rejected: {reason}", path.display());
    }
    // Baselines never read the words.
    let empty = Vocabulary::from_parts(Vec::new(), Tensor2::zeros(1, 1)).expect("unk row only");
    Ok(records.iter().map(|r| r.to_query(&empty)).collect())
}

pub fn baseline(mut s: Settings, a: BaselineArgs) -> Result<(), CliError> {
    s.flag("train_annotations", path_str(&a.train_annotations));
    s.flag("eval_annotations", path_str(&a.eval_annotations));
    s.flag("which", a.which.clone());
    s.flag("trials", a.trials);
    s.flag("seed", a.seed);
    s.flag("aliases", a.aliases.clone());
    let which: String = s.get_or("which", "all".to_string())?;
    let names: Vec<&str> = match which.as_str() {
        "all" => vec!["upper_bound", "chance", "prior"],
        n @ ("upper_bound" | "chance" | "prior") => vec![n],
        other => return Err(CliError::Usage(format!("unknown baseline `{other}`"))),
    };
    let eval_path: PathBuf = s.require("eval_annotations")?;
    let queries = annotation_queries(&eval_path, &s)?;
    let mut reports = Vec::new();
    for name in names {
        let report = match name {
            "upper_bound" => baseline_upper_bound(&queries, EXEC)?,
            "chance" => baseline_chance(
                &queries,
                s.get_or("seed", 0)?,
                s.get_or("trials", DEFAULT_CHANCE_TRIALS)?,
                EXEC,
            )?,
            _ => {
                let train_path: PathBuf = s.require("train_annotations")?;
                baseline_moment_prior(&annotation_queries(&train_path, &s)?, &queries, EXEC)?
            }
        };
        reports.push((name.to_string(), report));
    }
    emit(&reports, a.json.as_deref(), None)
}

pub fn gradcheck(mut s: Settings, a: GradcheckArgs) -> Result<(), CliError> {
    s.flag("instances", a.instances);
    s.flag("seed", a.seed);
    s.flag("tolerance", a.tolerance);
    s.flag("step", a.step);
    let d = GradCheckConfig::default();
    let config = GradSuiteConfig {
        instances: s.get_or("instances", 100)?,
        seed: s.get_or("seed", 0)?,
        check: GradCheckConfig {
            tolerance: s.get_or("tolerance", d.tolerance)?,
            step: s.get_or("step", d.step)?,
            ..d
        },
        fault: a.inject_fault.clone(),
        execution: EXEC,
    };
    if config.instances == 0 {
        return Err(CliError::Usage("--instances must be positive".into()));
    }
    if let Some(f) = &config.fault {
        if !mcn::model::GRAD_CHECKS.contains(&f.as_str()) {
            return Err(CliError::Usage(format!("unknown check `{f}`")));
        }
    }
    let checks = run_grad_suite(&config);
    println!(
        "{:<18} {:>9} {:>8} {:>8} {:>13}  result",
        "check", "instances", "checked", "exempt", "max rel err"
    );
    let mut failed = Vec::new();
    for c in &checks {
        let r = &c.report;
        println!(
            "{:<18} {:>9} {:>8} {:>8} {:>13.3e}  {}",
            c.name,
            c.instances,
            r.checked,
            r.exempt,
            r.max_relative_error,
            if r.passed { "pass" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(c);
        }
    }
    if let Some(p) = &a.json {
        write_text(p, &format!("{}\n", serde_json::to_string_pretty(&checks).expect("serializes")))?;
    }
    if failed.is_empty() {
        return Ok(());
    }
    for c in &failed {
        for w in &c.report.worst {
            println!(
                "  {} coordinate {}: analytic {:.6e}, numeric {:.6e}, relative error {:.3e}",
                c.name, w.index, w.analytic, w.numeric, w.relative_error
            );
        }
    }
    let names: Vec<&str> = failed.iter().map(|c| c.name.as_str()).collect();
    Err(CliError::Check(format!(
        "gradient check failed at tolerance {:e}: {}",
        config.check.tolerance,
        names.join(", ")
    )))
}
