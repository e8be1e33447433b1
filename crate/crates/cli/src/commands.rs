use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use tcr_core::data_io::{load_manifest, synth_dataset, write_manifest, DatasetManifest, Split, SynthSpec, SynthTask};
use tcr_core::decoding::{DecodeMode, Decoder, GenerationResult};
use tcr_core::metrics::{evaluate_hypotheses, evaluate_lead3, evaluate_model, parallel_map, RougeUnit};
use tcr_core::model::checkpoint;
use tcr_core::model::train::train as run_training;
use tcr_core::model::{Ablation, Source};
use tcr_core::refinement::refine_loop;
use tcr_core::tokenization::Vocab;

use crate::config::RunConfig;
use crate::{AblationArgs, DecodeArgs, EvaluateArgs, GenerateArgs, RefineArgs, SynthArgs, TrainArgs, Usage};

/// One line of the generations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLine {
    pub id: String,
    pub title: String,
    pub log_prob: f64,
    pub cover_index: Option<usize>,
    pub frame_scores: Vec<f64>,
}

/// Vocabulary target used when scoring without a model vocabulary.
const SCORING_VOCAB: usize = 1 << 16;

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Usage(format!("missing {name} (flag or config paths)")).into())
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Usage(format!("output directory {} is not empty; pass --force", dir.display())).into());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn ablation(a: AblationArgs) -> Result<Ablation> {
    let ab = Ablation {
        no_text: a.no_text,
        no_visual: a.no_visual,
    };
    ab.validate()?;
    Ok(ab)
}

fn decode_mode(config: &RunConfig, a: DecodeArgs) -> Result<DecodeMode> {
    match (a.greedy, a.beam) {
        (true, _) => Ok(DecodeMode::Greedy),
        (false, Some(0)) => Err(Usage("--beam must be at least 1".into()).into()),
        (false, Some(width)) => Ok(DecodeMode::Beam { width }),
        (false, None) => Ok(config.decode),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Loads `path`, or builds a vocabulary of up to `target` tokens from the
/// training texts and titles.
fn obtain_vocab(path: Option<PathBuf>, data: &DatasetManifest, target: usize, separator: &str) -> Result<Vocab> {
    match path {
        Some(p) => Ok(Vocab::load(&p).with_context(|| format!("vocabulary {}", p.display()))?),
        None => {
            let corpus: Vec<String> = data
                .samples
                .iter()
                .flat_map(|s| [s.text(separator), s.title.clone()])
                .collect();
            Ok(Vocab::build(&corpus, target)?)
        }
    }
}

pub fn synth(config: &RunConfig, a: &SynthArgs) -> Result<()> {
    let task: SynthTask = a
        .task
        .parse()
        .map_err(|e| Usage(format!("{e}; expected copy-prefix or planted-cover")))?;
    if a.n == 0 {
        return Err(Usage("--n must be at least 1".into()).into());
    }
    let mut spec = match task {
        SynthTask::CopyPrefix => SynthSpec::copy_prefix(a.n),
        SynthTask::PlantedCover => SynthSpec::planted_cover(a.n),
    };
    if let Some(f) = a.frames {
        spec.frames = f;
    }
    prepare_out(&a.out, a.force)?;
    let side = (a.n / 4).max(1);
    let splits = [
        (Split::Train, "train.jsonl", "s", a.n),
        (Split::Valid, "valid.jsonl", "v", a.valid.unwrap_or(side)),
        (Split::Test, "test.jsonl", "t", a.test.unwrap_or(side)),
    ];
    for (k, (split, name, prefix, samples)) in splits.into_iter().enumerate() {
        let s = SynthSpec {
            samples,
            id_prefix: prefix.into(),
            ..spec.clone()
        };
        let data = synth_dataset(config.seed.wrapping_add(k as u64), &s, split)?;
        let path = write_manifest(&a.out, name, &data)?;
        info!("wrote {} samples to {}", data.len(), path.display());
    }
    Ok(())
}

pub fn train(config: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    let paths = config.paths.clone();
    let train_path = pick(&a.train, &paths.train, "--train")?;
    let out = pick(&a.out, &paths.output_dir, "--out")?;
    let train_set = load_manifest(&train_path, Split::Train)?;
    let valid = a
        .valid
        .clone()
        .or(paths.valid)
        .map(|p| load_manifest(&p, Split::Valid))
        .transpose()?;
    prepare_out(&out, a.force)?;
    let vocab = obtain_vocab(
        a.vocab.clone().or(paths.vocab),
        &train_set,
        config.model.vocab_size,
        &config.model.text_separator,
    )?;
    config.model.vocab_size = vocab.len();
    if let Some(e) = a.epochs {
        config.schedule.epochs = e;
    }
    config.validate()?;
    vocab.save(&out.join("vocab.txt"))?;
    fs::write(out.join("config.json"), config.to_json())?;

    let outcome = run_training(
        &train_set,
        valid.as_ref(),
        &vocab,
        &config.model,
        &config.schedule,
        Ablation::default(),
    )?;
    write_jsonl(&out.join("train_log.jsonl"), &outcome.log)?;
    checkpoint::save(&out.join("checkpoint.bin"), &config.model, &outcome.params)?;
    if let Some(msg) = outcome.aborted {
        return Err(tcr_core::Error::Divergence(msg).into());
    }
    match (outcome.best_epoch, outcome.best_val_rouge) {
        (Some(e), Some(r)) => info!("best epoch {e}, validation Rouge {r:.4}"),
        _ => info!("no validation split; kept the final epoch"),
    }
    Ok(())
}

fn generation_line(vocab: &Vocab, id: &str, r: &GenerationResult) -> Result<GenerationLine> {
    Ok(GenerationLine {
        id: id.to_string(),
        title: vocab.decode(&vocab.content_ids(&r.tokens))?,
        log_prob: r.log_prob,
        cover_index: r.cover_index,
        frame_scores: r.frame_scores(),
    })
}

/// File-name-safe form of a sample id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn attention_csv(r: &GenerationResult) -> String {
    let mut s = String::new();
    for row in &r.step_attention {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn generate(config: &RunConfig, explicit: bool, a: &GenerateArgs, threads: usize) -> Result<()> {
    let paths = &config.paths;
    let ckpt = pick(&a.checkpoint, &paths.checkpoint, "--checkpoint")?;
    let (model, params) = checkpoint::load(&ckpt).with_context(|| format!("checkpoint {}", ckpt.display()))?;
    if explicit {
        checkpoint::ensure_compatible(&config.model, &model)?;
    }
    let vocab = Vocab::load(&pick(&a.vocab, &paths.vocab, "--vocab")?)?;
    if vocab.len() != model.vocab_size {
        return Err(tcr_core::Error::ConfigMismatch("vocab_size".into()).into());
    }
    let manifest = load_manifest(&pick(&a.manifest, &paths.test, "--manifest")?, Split::Test)?;
    let ablation = ablation(a.ablation)?;
    let mode = decode_mode(config, a.decode)?;
    let out = match (&a.out, &paths.output_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("generations.jsonl"),
        (None, None) => return Err(Usage("missing --out (flag or config paths)".into()).into()),
    };

    let decoder = Decoder::new(&params, &model, &vocab).with_policy(config.attention);
    let results = parallel_map(&manifest.samples, threads, |s| {
        decoder.decode(&Source::from_sample(s, &vocab, &model, ablation), mode)
    })?;
    let lines = manifest
        .samples
        .iter()
        .zip(&results)
        .map(|(s, r)| generation_line(&vocab, &s.id, r))
        .collect::<Result<Vec<_>>>()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_jsonl(&out, &lines)?;
    info!("wrote {} generations to {}", lines.len(), out.display());

    if let Some(dir) = &a.attn_report {
        fs::create_dir_all(dir)?;
        for (s, r) in manifest.samples.iter().zip(&results) {
            fs::write(dir.join(format!("{}.csv", file_stem(&s.id))), attention_csv(r))?;
        }
    }
    Ok(())
}

pub fn refine(config: &mut RunConfig, a: &RefineArgs, threads: usize) -> Result<()> {
    let paths = config.paths.clone();
    let train_path = pick(&a.train, &paths.train, "--train")?;
    let out = pick(&a.out, &paths.output_dir, "--out")?;
    let train_set = load_manifest(&train_path, Split::Train)?;
    let valid = a
        .valid
        .clone()
        .or(paths.valid)
        .map(|p| load_manifest(&p, Split::Valid))
        .transpose()?;
    let r = &mut config.refinement;
    if let Some(k) = a.keep {
        r.keep = k;
    }
    if let Some(u) = a.u {
        r.u = u;
    }
    if let Some(v) = a.v {
        r.v = v;
    }
    if let Some(i) = a.iterations {
        r.iterations = i;
    }
    if let Some(e) = a.epochs {
        config.schedule.epochs = e;
    }
    prepare_out(&out, a.force)?;
    let vocab = obtain_vocab(
        a.vocab.clone().or(paths.vocab),
        &train_set,
        config.model.vocab_size,
        &config.model.text_separator,
    )?;
    config.model.vocab_size = vocab.len();
    config.validate()?;
    vocab.save(&out.join("vocab.txt"))?;
    fs::write(out.join("config.json"), config.to_json())?;

    let report_path = out.join("refine_report.json");
    let outcome = refine_loop(
        &train_set,
        valid.as_ref(),
        &vocab,
        &config.model,
        &config.schedule,
        &config.refinement,
        threads,
    )
    .with_context(|| format!("refinement failed; no report at {}", report_path.display()))?;
    for (k, it) in outcome.report.iterations.iter().enumerate() {
        write_json(&out.join(format!("refine_report_iter{k}.json")), it)?;
        write_jsonl(&out.join(format!("train_log_iter{k}.jsonl")), &outcome.trainings[k].log)?;
        write_manifest(&out, &format!("refined_iter{k}.jsonl"), &outcome.stages[k])?;
        info!(
            "iteration {k}: kept {}, dropped {}",
            it.kept_ids.len(),
            it.dropped_ids.len()
        );
    }
    write_json(&report_path, &outcome.report)?;
    checkpoint::save(&out.join("checkpoint.bin"), &config.model, &outcome.params)?;
    Ok(())
}

fn read_generations(path: &Path) -> Result<Vec<(String, String)>> {
    let reader = BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GenerationLine = serde_json::from_str(&line).map_err(|e| tcr_core::Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((g.id, g.title));
    }
    Ok(out)
}

pub fn evaluate(config: &RunConfig, explicit: bool, a: &EvaluateArgs, threads: usize) -> Result<()> {
    let paths = &config.paths;
    let ablation = ablation(a.ablation)?;
    let manifest = load_manifest(&pick(&a.manifest, &paths.test, "--manifest")?, Split::Test)?;
    let unit = if a.char { RougeUnit::Char } else { RougeUnit::Token };
    let vocab_path = a.vocab.clone().or_else(|| paths.vocab.clone());
    let scoring_vocab = || -> Result<Vocab> {
        if vocab_path.is_none() {
            warn!("no vocabulary given; scoring with one built from the manifest");
        }
        obtain_vocab(vocab_path.clone(), &manifest, SCORING_VOCAB, &config.model.text_separator)
    };

    let report = if let Some(g) = &a.generations {
        evaluate_hypotheses(&manifest, &read_generations(g)?, &scoring_vocab()?, unit)?
    } else if a.baseline.is_some() {
        evaluate_lead3(&manifest, &scoring_vocab()?, &config.model, unit)?
    } else {
        let ckpt = pick(&a.checkpoint, &paths.checkpoint, "--generations, --checkpoint or --baseline")?;
        let (model, params) = checkpoint::load(&ckpt).with_context(|| format!("checkpoint {}", ckpt.display()))?;
        if explicit {
            checkpoint::ensure_compatible(&config.model, &model)?;
        }
        let vocab = Vocab::load(&vocab_path.clone().ok_or_else(|| Usage("missing --vocab".into()))?)?;
        if vocab.len() != model.vocab_size {
            return Err(tcr_core::Error::ConfigMismatch("vocab_size".into()).into());
        }
        let decoder = Decoder::new(&params, &model, &vocab).with_policy(config.attention);
        evaluate_model(&decoder, &manifest, decode_mode(config, a.decode)?, ablation, unit, threads)?
    };
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{json}"),
    }
    info!("R-1 {:.4} R-2 {:.4} R-L {:.4} over {} samples", report.r1, report.r2, report.rl, report.n_samples);
    Ok(())
}
