use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use msasr::data::{
    corrupt_features, load_manifest, read_features, read_manifest, resolve_stream_path, synth_corpus, write_features,
    write_manifest, LabelSequence, ManifestEntry, SynthConfig, ToyGrammar, Vocabulary,
};
use msasr::eval::{align, format_text_file, read_text_file, score_corpus_with, Unit};
use msasr::lm::{lm_train, LmConfig, LmModel, LmTrainConfig};
use msasr::search::{recognize, Recognition, SearchConfig, DEFAULT_CTC_WEIGHT, DEFAULT_LM_WEIGHT};
use msasr::training::{load_checkpoint, save_checkpoint, OptimizerKind};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, CorruptArgs, DecodeArgs, ScoreArgs, SynthArgs, TrainArgs, TrainLmArgs};

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn worker_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = match jobs {
        Some(0) => return Err(usage("--jobs must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| usage(format!("cannot start {n} workers: {e}")))
}

/// Utterance id made safe for use as a file name.
fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn feature_path(id: &str, stream: usize) -> String {
    format!("feats/{}_s{stream}.fmat", file_stem(id))
}

fn is_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

/// `(id, text)` pairs from a text file or the transcripts of a manifest.
fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    if is_manifest(path) {
        Ok(read_manifest(path)?.into_iter().map(|e| (e.id, e.text)).collect())
    } else {
        Ok(read_text_file(path)?)
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.streams == 0 {
        return Err(usage("--streams must be at least 1"));
    }
    if a.utts == 0 {
        return Err(usage("--utts must be at least 1"));
    }
    let grammar = ToyGrammar::by_name(&a.task)?;
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_utts: a.utts,
        n_streams: a.streams,
        feature_dim: a.feature_dim,
        frames_per_token: a.frames_per_token,
        sigma: a.sigma,
        seed: a.seed,
        template_seed: a.template_seed.unwrap_or(defaults.template_seed),
        degrade_prob: a.degrade_prob,
        degrade_sigma: a.degrade_sigma,
        shared_templates: a.shared_templates,
        id_prefix: a.id_prefix.clone(),
    };
    let (vocab, utts) = synth_corpus(&grammar, &cfg)?;
    fs::create_dir_all(a.out.join("feats"))?;
    vocab.write(&a.out.join("vocab.txt"))?;
    let mut entries = Vec::with_capacity(utts.len());
    let mut texts = Vec::with_capacity(utts.len());
    for u in &utts {
        let mut streams = Vec::with_capacity(u.streams.len());
        for (i, x) in u.streams.iter().enumerate() {
            let rel = feature_path(&u.id, i);
            write_features(&a.out.join(&rel), x)?;
            streams.push(rel);
        }
        let text = vocab.decode_ids(u.transcript.ids());
        texts.push((u.id.clone(), text.clone()));
        entries.push(ManifestEntry { id: u.id.clone(), streams, text });
    }
    write_manifest(&a.out.join("manifest.jsonl"), &entries)?;
    fs::write(a.out.join("text"), format_text_file(&texts))?;
    eprintln!("wrote {} utterances x {} streams to {}", utts.len(), a.streams, a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut run = RunConfig::read(&a.config)?;
    let train_m = a
        .train
        .clone()
        .or(run.paths.train_manifest.clone())
        .ok_or_else(|| usage("no training manifest: pass --train or set paths.train_manifest"))?;
    let dev_m = a
        .dev
        .clone()
        .or(run.paths.dev_manifest.clone())
        .ok_or_else(|| usage("no dev manifest: pass --dev or set paths.dev_manifest"))?;
    let out = a
        .out
        .clone()
        .or(run.paths.out_dir.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set paths.out_dir"))?;
    let vocab_path = a
        .vocab
        .clone()
        .or(run.paths.vocab.clone())
        .unwrap_or_else(|| sibling(&train_m, "vocab.txt"));
    let vocab = Vocabulary::read(&vocab_path)?;
    let corpus = load_manifest(&train_m, &vocab)?;
    let dev = load_manifest(&dev_m, &vocab)?;

    fs::create_dir_all(&out)?;
    run.paths.train_manifest = Some(train_m);
    run.paths.dev_manifest = Some(dev_m);
    run.paths.vocab = Some(vocab_path);
    run.paths.out_dir = Some(out.clone());
    fs::write(out.join("run_config.json"), serde_json::to_string_pretty(&run)?)?;
    vocab.write(&out.join("vocab.txt"))?;

    let mut log = BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
    let (best_path, last_path) = (out.join("best.ckpt"), out.join("last.ckpt"));
    let outcome = msasr::training::train(&corpus, &dev, &vocab, &run.train, |r| {
        serde_json::to_writer(&mut log, r.log)?;
        log.write_all(b"\n")?;
        log.flush()?;
        save_checkpoint(r.model, &last_path)?;
        if r.is_best {
            save_checkpoint(r.model, &best_path)?;
        }
        eprintln!(
            "epoch {:>3}  train {:.4}  dev {:.4}  dev CER {:.4}  lr {:.3e}{}",
            r.log.epoch,
            r.log.train_loss,
            r.log.dev_loss,
            r.log.dev_cer,
            r.lr,
            if r.is_best { "  *" } else { "" }
        );
        Ok(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ msasr::Error::Divergence(_)) => {
            eprintln!("training diverged; the last good epoch is in {}", last_path.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&outcome.best, &best_path)?;
    save_checkpoint(&outcome.last, &last_path)?;
    if !outcome.unreachable_ctc.is_empty() {
        eprintln!(
            "warning: {} training utterances are too short for some CTC head: {:?}",
            outcome.unreachable_ctc.len(),
            outcome.unreachable_ctc
        );
    }
    eprintln!("best epoch {} -> {}", outcome.best_epoch, best_path.display());
    Ok(())
}

#[derive(Serialize)]
struct AttentionSummary {
    utterances: usize,
    steps: usize,
    /// Mean stream weight of each stream over every decoding step.
    mean_stream_attention: Vec<f64>,
}

fn summarize(results: &[Recognition], n_streams: usize) -> AttentionSummary {
    let mut sum = vec![0.0; n_streams];
    let mut steps = 0;
    for a in results.iter().filter_map(|r| r.attention.as_ref()) {
        for row in &a.stream_attention {
            for (s, w) in sum.iter_mut().zip(row) {
                *s += w;
            }
            steps += 1;
        }
    }
    AttentionSummary {
        utterances: results.len(),
        steps,
        mean_stream_attention: sum.iter().map(|s| s / steps.max(1) as f64).collect(),
    }
}

pub fn decode(a: &DecodeArgs) -> Result<()> {
    let run = a.config.as_deref().map(RunConfig::read).transpose()?;
    let cfg = SearchConfig {
        beam: a.beam.or(run.as_ref().map(|r| r.beam)).unwrap_or(4),
        ctc_weight: a
            .ctc_weight
            .or(run.as_ref().map(|r| r.lambda_decode))
            .unwrap_or(DEFAULT_CTC_WEIGHT),
        lm_weight: a.lm_weight.or(run.as_ref().map(|r| r.gamma)).unwrap_or(DEFAULT_LM_WEIGHT),
        max_len: a.max_len,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let pool = worker_pool(a.jobs)?;
    let model = load_checkpoint(&a.model)?;
    let lm = a.lm.as_deref().map(LmModel::load).transpose()?;
    let vocab = model.config.vocabulary()?;
    let utts = load_manifest(&a.manifest, &vocab)?;
    let dump = a.dump_attention.is_some();
    let results: Vec<Recognition> = pool.install(|| {
        utts.par_iter()
            .map(|u| recognize(&model, lm.as_ref(), u, &cfg, dump))
            .collect::<msasr::Result<_>>()
    })?;

    let hyps: Vec<(String, String)> = results.iter().map(|r| (r.id.clone(), r.text.clone())).collect();
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, format_text_file(&hyps))?;
    let truncated = results.iter().filter(|r| r.result.truncated).count();
    if truncated > 0 {
        eprintln!("warning: {truncated} hypotheses reached the length limit without ending");
    }
    if let Some(dir) = &a.dump_attention {
        fs::create_dir_all(dir)?;
        for r in &results {
            if let Some(att) = &r.attention {
                fs::write(dir.join(format!("{}.json", file_stem(&r.id))), serde_json::to_string(att)?)?;
            }
        }
        let summary = summarize(&results, model.config.n_streams());
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    eprintln!("decoded {} utterances -> {}", results.len(), a.out.display());
    Ok(())
}

pub fn score(a: &ScoreArgs) -> Result<()> {
    let unit: Unit = a.unit.parse().map_err(|e: msasr::Error| usage(e.to_string()))?;
    let pool = worker_pool(a.jobs)?;
    let refs = read_transcripts(&a.reference)?;
    let hyps = read_text_file(&a.hyp)?;
    let report = pool.install(|| {
        score_corpus_with(&refs, &hyps, unit, |pairs| pairs.par_iter().map(|(r, h)| align(r, h)).collect())
    })?;
    if !report.missing.is_empty() {
        eprintln!(
            "warning: {} reference utterances have no hypothesis and count as deletions: {:?}",
            report.missing.len(),
            report.missing
        );
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn corrupt(a: &CorruptArgs) -> Result<()> {
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(usage(format!("--sigma must be a nonnegative number, got {}", a.sigma)));
    }
    let entries = read_manifest(&a.manifest)?;
    if let Some(e) = entries.iter().find(|e| a.stream >= e.streams.len()) {
        return Err(usage(format!(
            "--stream {} out of range: utterance {} has {} streams",
            a.stream,
            e.id,
            e.streams.len()
        )));
    }
    fs::create_dir_all(a.out.join("feats"))?;
    let mut out_entries = Vec::with_capacity(entries.len());
    for e in &entries {
        let mut streams = Vec::with_capacity(e.streams.len());
        for (i, s) in e.streams.iter().enumerate() {
            let src = resolve_stream_path(&a.manifest, s);
            let rel = feature_path(&e.id, i);
            let dst = a.out.join(&rel);
            if i == a.stream {
                let x = read_features(&src)?;
                write_features(&dst, &corrupt_features(&x, &e.id, i, a.sigma, a.seed)?)?;
            } else {
                fs::copy(&src, &dst)?;
            }
            streams.push(rel);
        }
        out_entries.push(ManifestEntry { streams, ..e.clone() });
    }
    write_manifest(&a.out.join("manifest.jsonl"), &out_entries)?;
    for name in ["vocab.txt", "text"] {
        let src = sibling(&a.manifest, name);
        if src.is_file() {
            fs::copy(&src, a.out.join(name))?;
        }
    }
    eprintln!(
        "corrupted stream {} of {} utterances (sigma {}) -> {}",
        a.stream,
        entries.len(),
        a.sigma,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LmLogLine {
    epoch: usize,
    perplexity: f64,
}

pub fn train_lm(a: &TrainLmArgs) -> Result<()> {
    let vocab = Vocabulary::read(&a.vocab)?;
    let corpus = read_transcripts(&a.text)?
        .into_iter()
        .map(|(id, text)| {
            LabelSequence::new(vocab.encode_text(&text))
                .map_err(|e| CliError::Core(msasr::Error::Argument(format!("utterance {id}: {e}"))))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut config = LmConfig::new(&vocab);
    config.cells = a.cells;
    config.embedding_dim = a.embedding_dim;
    let cfg = LmTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        optimizer: OptimizerKind::Adam,
        ..LmTrainConfig::default()
    };
    let trained = lm_train(&corpus, config, &cfg)?;
    for (i, &p) in trained.perplexity.iter().enumerate() {
        println!("{}", serde_json::to_string(&LmLogLine { epoch: i + 1, perplexity: p })?);
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    trained.model.save(&a.out)?;
    Ok(())
}
