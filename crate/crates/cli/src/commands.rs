use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use tpt_core::corpus::{load_corpus, synth_corpus, Corpus, Example, Modality, PairedExample, Vocab};
use tpt_core::diagnostics::{check_component, Component, TOLERANCE};
use tpt_core::eval::{
    decode_testset, evaluate_pipeline, measure_latency, mixing_sweep, pipeline_rows, sweep_rows, sweep_svg, write_csv,
    write_json, LatencySystem, RescorerSelector, Selector, SweepInputs,
};
use tpt_core::first_pass::{beam_search, train_first_pass, FirstPassModel, HAvgMode};
use tpt_core::numerics::checkpoint::H_AVG_NAME;
use tpt_core::numerics::Checkpoint;
use tpt_core::rescorer::{rescore_select, train_rescorer, Rescorer, TrainMode};
use tpt_core::RunConfig;

use crate::{Command, ConfigArg};

/// Sizes the global worker pool from `TPT_THREADS` when set.
pub fn configure_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var("TPT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("TPT_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    let mut config = match &arg.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = arg.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Re-validates after flag overrides so flags cannot bypass the checks.
fn validated(config: RunConfig) -> Result<RunConfig> {
    config.validate()?;
    Ok(config)
}

fn vocab(config: &RunConfig) -> Vocab {
    config.task.vocab()
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn load_corpus_dir(config: &RunConfig, dir: &Path) -> Result<Corpus> {
    require_exists(dir, "corpus directory")?;
    let corpus = Corpus::load_dir(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    check_corpus_shape(config, corpus.vocab.size, corpus.feature_dim)?;
    Ok(corpus)
}

fn check_corpus_shape(config: &RunConfig, vocab_size: u32, feature_dim: usize) -> Result<()> {
    if vocab_size != config.task.vocab_size || feature_dim != config.task.feature_dim {
        bail!(
            "corpus has vocab size {vocab_size} and feature dim {feature_dim}, but the configuration expects {} and {}",
            config.task.vocab_size,
            config.task.feature_dim
        );
    }
    Ok(())
}

/// Paired utterances from a corpus directory's test split or from a single corpus file.
fn load_utterances(config: &RunConfig, path: &Path) -> Result<Vec<PairedExample>> {
    require_exists(path, "test set")?;
    if path.is_dir() {
        return Ok(load_corpus_dir(config, path)?.test);
    }
    let file = load_corpus(path).with_context(|| format!("reading {}", path.display()))?;
    check_corpus_shape(config, file.header.vocab_size, file.header.feature_dim)?;
    file.examples
        .into_iter()
        .map(|e| match e {
            Example::Paired(p) => Ok(p),
            Example::Text(t) => bail!("{} holds text-only record {}; audio is required", path.display(), t.id),
        })
        .collect()
}

fn load_first_pass(config: &RunConfig, path: &Path) -> Result<FirstPassModel> {
    require_exists(path, "first-pass checkpoint")?;
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FirstPassModel::from_checkpoint(config.first_pass, vocab(config), &ckpt)
        .with_context(|| format!("loading first pass from {}", path.display()))?)
}

/// The rescorer and whether its checkpoint came from joint training.
fn load_rescorer(config: &RunConfig, path: &Path) -> Result<(Rescorer, bool)> {
    require_exists(path, "rescorer checkpoint")?;
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let rescorer = Rescorer::from_checkpoint(config.rescorer, vocab(config), &ckpt)
        .with_context(|| format!("loading rescorer from {}", path.display()))?;
    Ok((rescorer, ckpt.contains(H_AVG_NAME)))
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&load_config(&config)?, &out),
        Command::TrainRnnt {
            config,
            corpus,
            out_ckpt,
            epochs,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(e) = epochs {
                cfg.first_pass_train.epochs = e;
            }
            train_rnnt(&validated(cfg)?, &corpus, &out_ckpt)
        }
        Command::TrainRescorer {
            config,
            ckpt,
            corpus,
            joint,
            ratio,
            havg_mode,
            epochs,
            out_ckpt,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(r) = ratio {
                cfg.joint.ratio = r;
            }
            if let Some(m) = havg_mode {
                cfg.joint.h_avg_mode = m.parse::<HAvgMode>()?;
            }
            if let Some(e) = epochs {
                cfg.joint.epochs = e;
            }
            let mode = if joint { TrainMode::Joint } else { TrainMode::Standard };
            train_rescorer_cmd(&validated(cfg)?, &ckpt, &corpus, mode, &out_ckpt)
        }
        Command::Decode {
            config,
            ckpt,
            rescorer_ckpt,
            beam,
            lambda,
            input,
            out_nbest,
            out_emb,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(b) = beam {
                cfg.eval.beam.beam = b;
                cfg.eval.nbest = b;
            }
            if let Some(l) = lambda {
                cfg.eval.select.lambda = l;
            }
            decode(&validated(cfg)?, &ckpt, rescorer_ckpt.as_deref(), &input, &out_nbest, out_emb.as_deref())
        }
        Command::Eval {
            config,
            ckpt,
            rescorer_ckpt,
            testset,
            lambda,
            beam,
            out_report,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(l) = lambda {
                cfg.eval.select.lambda = l;
            }
            if let Some(b) = beam {
                cfg.eval.beam.beam = b;
            }
            eval(&validated(cfg)?, &ckpt, &rescorer_ckpt, &testset, &out_report)
        }
        Command::Sweep {
            config,
            ckpt,
            corpus,
            ratios,
            seeds,
            compare_empirical,
            out_report,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(r) = ratios {
                cfg.sweep.ratios = r;
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = s;
            }
            cfg.sweep.compare_empirical |= compare_empirical;
            let cfg = validated(cfg)?;
            let ckpt = ckpt.unwrap_or_else(|| cfg.paths.first_pass_ckpt.clone());
            let corpus = corpus.unwrap_or_else(|| cfg.paths.corpus.clone());
            sweep(&cfg, &ckpt, &corpus, &out_report)
        }
        Command::Latency {
            config,
            ckpt,
            rescorer_ckpt,
            joint_rescorer_ckpt,
            testset,
            reps,
            utterances,
            out_report,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(r) = reps {
                cfg.latency.repetitions = r;
            }
            if let Some(u) = utterances {
                cfg.latency.utterances = u;
            }
            let cfg = validated(cfg)?;
            let ckpt = ckpt.unwrap_or_else(|| cfg.paths.first_pass_ckpt.clone());
            let testset = testset.unwrap_or_else(|| cfg.paths.corpus.clone());
            latency(
                &cfg,
                &ckpt,
                rescorer_ckpt.as_deref(),
                joint_rescorer_ckpt.as_deref(),
                &testset,
                out_report.as_deref(),
            )
        }
        Command::GradCheck { component, seed } => grad_check(component.parse()?, seed),
    }
}

fn gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let corpus = synth_corpus(&config.task, &config.splits, config.seed)?;
    corpus.save_dir(out).with_context(|| format!("writing corpus to {}", out.display()))?;
    println!(
        "wrote {} paired, {} text-only and {} test utterances to {}",
        corpus.paired.len(),
        corpus.text.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn train_rnnt(config: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<()> {
    let corpus = load_corpus_dir(config, corpus_dir)?;
    let (ckpt, report) = train_first_pass(
        &corpus.paired,
        config.first_pass,
        corpus.vocab,
        &config.first_pass_train(),
        config.seed,
    )?;
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        eprintln!("epoch {:>3}  loss {loss:.4}", i + 1);
    }
    ensure_parent(out)?;
    ckpt.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote first-pass checkpoint {}", out.display());
    Ok(())
}

fn train_rescorer_cmd(config: &RunConfig, ckpt: &Path, corpus_dir: &Path, mode: TrainMode, out: &Path) -> Result<()> {
    let first_pass = load_first_pass(config, ckpt)?;
    let corpus = load_corpus_dir(config, corpus_dir)?;
    let (ckpt, report) = train_rescorer(
        &first_pass,
        &corpus.paired,
        &corpus.text,
        config.rescorer,
        &config.joint_train(),
        mode,
    )?;
    let tail = |v: Vec<f64>| {
        let k = v.len().min(50);
        (k > 0).then(|| v[v.len() - k..].iter().sum::<f64>() / k as f64)
    };
    if let Some(l) = tail(report.losses_of(Modality::Paired)) {
        eprintln!("final paired loss {l:.4}");
    }
    if let Some(l) = tail(report.losses_of(Modality::TextOnly)) {
        eprintln!("final text-only loss {l:.4}");
    }
    ensure_parent(out)?;
    ckpt.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote rescorer checkpoint {}", out.display());
    Ok(())
}

fn decode(
    config: &RunConfig,
    ckpt: &Path,
    rescorer_ckpt: Option<&Path>,
    input: &Path,
    out_nbest: &Path,
    out_emb: Option<&Path>,
) -> Result<()> {
    let first_pass = load_first_pass(config, ckpt)?;
    let rescorer = rescorer_ckpt.map(|p| load_rescorer(config, p)).transpose()?;
    let utts = load_utterances(config, input)?;
    ensure_parent(out_nbest)?;
    let mut w = BufWriter::new(File::create(out_nbest).with_context(|| format!("creating {}", out_nbest.display()))?);
    let mut embeddings = Checkpoint::new();
    for ex in &utts {
        let h = first_pass.encode(&ex.features)?;
        let list = beam_search(&first_pass, &h, config.eval.beam)?.truncated(config.eval.nbest);
        let mut entries: Vec<serde_json::Value> = list
            .iter()
            .map(|hyp| json!({"tokens": hyp.tokens.0, "logprob": hyp.first_pass_logprob}))
            .collect();
        let mut record = json!({"id": ex.id});
        if let Some((r, _)) = &rescorer {
            if !list.is_empty() {
                let sel = rescore_select(r, &h, &list, config.eval.select)?;
                for (entry, score) in entries.iter_mut().zip(&sel.scores) {
                    entry["rescorer_logprob"] = json!(score.total_logprob);
                }
                record["selected"] = json!(sel.rank);
            }
        }
        record["nbest"] = json!(entries);
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
        if out_emb.is_some() {
            embeddings.insert(format!("emb.{}", ex.id), &h);
        }
    }
    w.flush()?;
    if let Some(path) = out_emb {
        ensure_parent(path)?;
        embeddings.save(path).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("decoded {} utterances to {}", utts.len(), out_nbest.display());
    Ok(())
}

/// System names for each rescorer, suffixed when several share a kind.
fn system_names(kinds: &[bool]) -> Vec<String> {
    let base = |joint: bool| if joint { "BS+RS+Joint" } else { "BS+RS" };
    kinds
        .iter()
        .enumerate()
        .map(|(i, &joint)| {
            let same = kinds.iter().filter(|&&k| k == joint).count();
            let nth = kinds[..i].iter().filter(|&&k| k == joint).count() + 1;
            if same > 1 {
                format!("{}#{nth}", base(joint))
            } else {
                base(joint).to_string()
            }
        })
        .collect()
}

fn eval(config: &RunConfig, ckpt: &Path, rescorer_ckpts: &[PathBuf], testset: &Path, out: &Path) -> Result<()> {
    let first_pass = load_first_pass(config, ckpt)?;
    let rescorers: Vec<(Rescorer, bool)> =
        rescorer_ckpts.iter().map(|p| load_rescorer(config, p)).collect::<Result<_>>()?;
    let test = load_utterances(config, testset)?;
    let utts = decode_testset(&first_pass, &test, &config.eval)?;
    let names = system_names(&rescorers.iter().map(|(_, j)| *j).collect::<Vec<_>>());
    let selectors: Vec<RescorerSelector<'_>> = rescorers
        .iter()
        .map(|(r, _)| RescorerSelector {
            rescorer: r,
            config: config.eval.select,
        })
        .collect();
    let systems: Vec<(&str, &dyn Selector)> = names
        .iter()
        .map(String::as_str)
        .zip(selectors.iter().map(|s| s as &dyn Selector))
        .collect();
    let report = evaluate_pipeline(&utts, &systems)?;
    ensure_parent(out)?;
    write_json(out, &report)?;
    let rows = pipeline_rows(&report);
    write_csv(sibling(out, "csv"), &rows)?;
    for row in rows {
        let rel = row.rel_reduction.map_or(String::new(), |r| format!("  rel {r:+.1}%"));
        println!("{:<14} {:<4} WER {:.4}{rel}", row.system, row.domain, row.wer);
    }
    Ok(())
}

fn sweep(config: &RunConfig, ckpt: &Path, corpus_dir: &Path, out: &Path) -> Result<()> {
    let first_pass = load_first_pass(config, ckpt)?;
    let corpus = load_corpus_dir(config, corpus_dir)?;
    if corpus.test.is_empty() {
        bail!("corpus {} has no test split", corpus_dir.display());
    }
    let utts = decode_testset(&first_pass, &corpus.test, &config.eval)?;
    let train = config.joint_train();
    let inputs = SweepInputs {
        first_pass: &first_pass,
        paired: &corpus.paired,
        text: &corpus.text,
        rescorer: config.rescorer,
        train: &train,
        test: &utts,
        select: config.eval.select,
    };
    let report = mixing_sweep(&inputs, &config.sweep)?;
    ensure_parent(out)?;
    write_json(out, &report)?;
    write_csv(sibling(out, "csv"), &sweep_rows(&report))?;
    std::fs::write(sibling(out, "svg"), sweep_svg(&report))?;
    let d = Some(report.target_domain);
    for row in &report.rows {
        println!(
            "ratio {:<5} WER {:.4}  rel {:+.1}%",
            row.ratio,
            row.mean_wer.get(d).unwrap_or(f64::NAN),
            row.rel_reduction.get(d).unwrap_or(f64::NAN)
        );
    }
    println!(
        "best ratio {} (interior: {}); highest ratio underperforms r=0: {}",
        report.best_ratio,
        report.best_is_interior,
        report
            .highest_ratio_underperforms
            .map_or("n/a".to_string(), |b| b.to_string())
    );
    Ok(())
}

fn latency(
    config: &RunConfig,
    ckpt: &Path,
    standard: Option<&Path>,
    joint: Option<&Path>,
    testset: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let first_pass = load_first_pass(config, ckpt)?;
    let standard = standard.map(|p| load_rescorer(config, p)).transpose()?;
    let joint = joint.map(|p| load_rescorer(config, p)).transpose()?;
    let test = load_utterances(config, testset)?;
    let mut systems = vec![LatencySystem {
        name: "BS".into(),
        rescorer: None,
    }];
    if let Some((r, _)) = &standard {
        systems.push(LatencySystem {
            name: "BS+RS".into(),
            rescorer: Some(r),
        });
    }
    if let Some((r, _)) = &joint {
        systems.push(LatencySystem {
            name: "BS+RS+Joint".into(),
            rescorer: Some(r),
        });
    }
    let report = measure_latency(
        &first_pass,
        &systems,
        &test,
        config.eval.beam,
        config.eval.nbest,
        config.eval.select,
        &config.latency,
    )?;
    for s in &report.systems {
        println!(
            "{:<12} mean {:.3} ms  p50 {:.3} ms  p95 {:.3} ms",
            s.system, s.mean_ms, s.p50_ms, s.p95_ms
        );
    }
    if let Some(path) = out {
        ensure_parent(path)?;
        write_json(path, &report)?;
    }
    Ok(())
}

fn grad_check(component: Component, seed: u64) -> Result<()> {
    let report = check_component(component, seed)?;
    for p in &report.params {
        println!("{:<36} {:>6} elements  max rel err {:.2e}", p.name, p.elements, p.max_rel_error);
    }
    let worst = report.max_rel_error();
    if !report.passes(TOLERANCE) {
        bail!("{component}: max relative error {worst:.2e} exceeds {TOLERANCE:.0e}");
    }
    println!("{component}: max relative error {worst:.2e} <= {TOLERANCE:.0e}");
    Ok(())
}
