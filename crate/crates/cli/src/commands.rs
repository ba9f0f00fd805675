use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sherlock::checkpoint::Checkpoint;
use sherlock::config::RunConfig;
use sherlock::corpus::{generate_corpus, load_corpus, write_corpus, Corpus, CorpusConfig, GrayImage, Split};
use sherlock::energy::{apply_operator, save_emap};
use sherlock::pipeline::{self as pipe, LabeledSet, Probe, SweepKind, TrainState};

use crate::{exit, log, CliError, CliResult, ConfigArgs, CorpusArg, VERSION};

pub const CONFIG_ECHO: &str = "config.toml";
pub const MODEL_FILE: &str = "model.ckpt";
pub const PROBE_FILE: &str = "probe.ckpt";

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| sherlock::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| sherlock::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn echo(path: &Path, toml: &str) -> CliResult<()> {
    write_file(path, format!("# sherlock {VERSION}\n{toml}"))
}

/// `--config`, then config.toml beside `beside`, then the preset.
fn resolve_config(cfg: &ConfigArgs, beside: Option<&Path>) -> CliResult<RunConfig> {
    let path = cfg.config.clone().or_else(|| {
        beside
            .and_then(Path::parent)
            .map(|d| d.join(CONFIG_ECHO))
            .filter(|p| p.is_file())
    });
    let config = match path {
        Some(p) => {
            log("config", &[("path", &p.display())]);
            RunConfig::load(&p, cfg.preset)?
        }
        None => RunConfig::preset(cfg.preset),
    };
    Ok(config)
}

fn resolve_corpus(arg: &CorpusArg, config: &RunConfig) -> CliResult<(PathBuf, Corpus)> {
    let dir = arg
        .corpus
        .clone()
        .or_else(|| config.corpus.clone())
        .ok_or_else(|| CliError::Usage("missing --corpus (no corpus path given or configured)".into()))?;
    if !dir.join(sherlock::corpus::manifest::MANIFEST_FILE).is_file() {
        return Err(CliError::Usage(format!("--corpus {}: no corpus manifest there", dir.display())));
    }
    let corpus = load_corpus(&dir)?;
    log("corpus", &[("path", &dir.display()), ("pages", &corpus.pages.len())]);
    Ok((dir, corpus))
}

fn load_state(ckpt: &Path, config: &RunConfig) -> CliResult<TrainState> {
    let c = Checkpoint::load(ckpt)?;
    if c.config_digest != config.digest() {
        log("warning", &[("message", &"checkpoint was written under a different config")]);
    }
    Ok(TrainState::from_checkpoint(&c, config)?)
}

fn load_probe(path: &Path) -> CliResult<Probe> {
    Ok(Probe::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn output_dir(out: &Path, config: &RunConfig) -> CliResult<()> {
    create_dir(out)?;
    echo(&out.join(CONFIG_ECHO), &config.to_toml())
}

pub fn gen_corpus(config: &CorpusConfig, out: &Path) -> CliResult<i32> {
    let corpus = generate_corpus(config)?;
    create_dir(out)?;
    let manifest = write_corpus(&corpus, out)?;
    let toml = toml::to_string(config).map_err(|e| CliError::Usage(format!("corpus config: {e}")))?;
    echo(&out.join(CONFIG_ECHO), &toml)?;
    let forged = manifest.pages.iter().filter(|p| p.forged).count();
    log("corpus-written", &[("path", &out.display()), ("pages", &manifest.pages.len()), ("forged", &forged)]);
    Ok(exit::OK)
}

pub fn preprocess(input: &Path, operator: &Path, out: &Path, cfg: &ConfigArgs) -> CliResult<i32> {
    let config = resolve_config(cfg, Some(operator))?;
    let op = pipe::load_operator(&Checkpoint::load(operator)?, &config.operator)?;
    let (_, corpus) = resolve_corpus(
        &CorpusArg {
            corpus: Some(input.to_path_buf()),
        },
        &config,
    )?;
    let (energy_dir, denoised_dir) = (out.join("energy"), out.join("denoised"));
    create_dir(&energy_dir)?;
    create_dir(&denoised_dir)?;
    corpus.pages.par_iter().try_for_each(|p| -> CliResult<()> {
        let d = apply_operator(&p.page.image.to_unit(), &op, Some(p.id))?;
        let stem = format!("page_{:05}", p.id);
        save_emap(&d.energy, &energy_dir.join(format!("{stem}.emap")))?;
        GrayImage::from_unit(&d.energy)?.write_pgm(&energy_dir.join(format!("{stem}.pgm")))?;
        GrayImage::from_unit(&d.intensity)?.write_pgm(&denoised_dir.join(format!("{stem}.pgm")))?;
        Ok(())
    })?;
    output_dir(out, &config)?;
    log("preprocessed", &[("pages", &corpus.pages.len()), ("out", &out.display())]);
    Ok(exit::OK)
}

pub fn pretrain(corpus: &CorpusArg, out: &Path, resume: Option<&Path>, force: bool, cfg: &ConfigArgs) -> CliResult<i32> {
    let config = resolve_config(cfg, resume)?;
    let (_, corpus) = resolve_corpus(corpus, &config)?;
    let state = match resume {
        Some(path) => {
            let c = Checkpoint::load(path)?;
            if c.config_digest != config.digest() {
                if !force {
                    return Err(CliError::Usage(format!(
                        "{} was written under a different config; pass --force to resume anyway",
                        path.display()
                    )));
                }
                log("warning", &[("message", &"resuming across a config change")]);
            }
            let s = TrainState::from_checkpoint(&c, &config)?;
            log("resume", &[("path", &path.display()), ("epoch", &s.epoch)]);
            s
        }
        None => TrainState::new(&config, corpus.config.height, corpus.config.width)?,
    };
    output_dir(out, &config)?;
    let model_path = out.join(MODEL_FILE);
    let mut history = String::new();
    let outcome = pipe::pretrain_from(&config, &corpus, state, |s, e| {
        let op = e.operator_objective.map_or("-".to_string(), |v| format!("{v:.6}"));
        log(
            "epoch",
            &[
                ("epoch", &e.epoch),
                ("loss", &format!("{:.6}", e.loss)),
                ("contrastive", &format!("{:.6}", e.contrastive)),
                ("momentum", &format!("{:.6}", e.momentum)),
                ("operator", &op),
                ("removed", &e.removed_patches),
            ],
        );
        history.push_str(&serde_json::to_string(e).expect("epoch log serializes"));
        history.push('\n');
        s.to_checkpoint(&config).save(&model_path)
    })?;
    for d in &outcome.diagnostics {
        log("warning", &[("message", d)]);
    }
    // zero remaining epochs still leaves a checkpoint behind
    outcome.state.to_checkpoint(&config).save(&model_path)?;
    write_file(&out.join("history.jsonl"), history)?;
    log("pretrained", &[("epochs", &outcome.state.epoch), ("checkpoint", &model_path.display())]);
    Ok(exit::OK)
}

pub fn finetune(corpus: &CorpusArg, ckpt: &Path, out: &Path, cfg: &ConfigArgs) -> CliResult<i32> {
    let config = resolve_config(cfg, Some(ckpt))?;
    let (_, corpus) = resolve_corpus(corpus, &config)?;
    let state = load_state(ckpt, &config)?;
    let probe = pipe::finetune(&state, &config, &corpus)?;
    for w in &probe.warnings {
        log("warning", &[("message", w)]);
    }
    output_dir(out, &config)?;
    let path = out.join(PROBE_FILE);
    probe.to_checkpoint(config.digest()).save(&path)?;
    log("probe-written", &[("path", &path.display()), ("classes", &probe.classes())]);
    Ok(exit::OK)
}

fn write_report(out: &Path, stem: &str, json: &str, table: &str) -> CliResult<()> {
    write_file(&out.join(format!("{stem}.json")), format!("{json}\n"))?;
    write_file(&out.join(format!("{stem}.txt")), table)?;
    print!("{table}");
    Ok(())
}

pub fn evaluate(corpus: &CorpusArg, ckpt: &Path, probe: &Path, out: &Path, cfg: &ConfigArgs) -> CliResult<i32> {
    let config = resolve_config(cfg, Some(ckpt))?;
    let (_, corpus) = resolve_corpus(corpus, &config)?;
    let state = load_state(ckpt, &config)?;
    let probe = load_probe(probe)?;
    let report = pipe::evaluate(&state, &config, &probe, &corpus)?;
    output_dir(out, &config)?;
    write_report(out, "report", &report.to_json(), &report.to_table())?;
    Ok(exit::OK)
}

#[allow(clippy::too_many_arguments)]
pub fn sweep(
    corpus: &CorpusArg,
    ckpt: &Path,
    probe: &Path,
    kind: &str,
    levels: Option<Vec<f64>>,
    out: &Path,
    cfg: &ConfigArgs,
) -> CliResult<i32> {
    let kind = SweepKind::parse(kind).ok_or_else(|| CliError::Usage(format!("--kind {kind:?}: expected damage or forgery")))?;
    let config = resolve_config(cfg, Some(ckpt))?;
    let levels = levels.unwrap_or_else(|| match kind {
        SweepKind::Damage => config.sweep.damage_levels.clone(),
        SweepKind::Forgery => config.sweep.forgery_levels.clone(),
    });
    let (_, corpus) = resolve_corpus(corpus, &config)?;
    let state = load_state(ckpt, &config)?;
    let probe = load_probe(probe)?;
    let report = pipe::robustness_sweep(&state, &config, &probe, &corpus, kind, &levels)?;
    output_dir(out, &config)?;
    write_report(out, &format!("sweep-{}", kind.name()), &report.to_json(), &report.to_table())?;
    Ok(exit::OK)
}

pub fn ablate(corpus: &CorpusArg, out: &Path, seeds: &[u64], extractors: bool, cfg: &ConfigArgs) -> CliResult<i32> {
    let config = resolve_config(cfg, None)?;
    let (_, corpus) = resolve_corpus(corpus, &config)?;
    let report = pipe::ablate(&config, &corpus, &pipe::default_cases(extractors), seeds)?;
    for r in &report.regressions {
        log("regression", &[("message", r)]);
    }
    output_dir(out, &config)?;
    write_report(out, "ablation", &report.to_json(), &report.to_table())?;
    Ok(exit::OK)
}

pub fn grad_check(seed: u64, step: f64, tolerance: f64) -> CliResult<i32> {
    if !(step > 0.0 && tolerance > 0.0) {
        return Err(CliError::Usage("--step and --tolerance must be positive".into()));
    }
    let report = pipe::full_path_check(seed, step, tolerance)?;
    let kinks = report.coords.iter().filter(|c| c.kink).count();
    if kinks > 0 {
        log("kinks", &[("skipped", &kinks)]);
    }
    if !report.passed() {
        for d in &report.diagnostics {
            log("diagnostic", &[("message", d)]);
        }
    }
    println!(
        "max_rel_error={:e} mean_rel_error={:e} coordinates={} tolerance={:e}",
        report.max_rel_error,
        report.mean_rel_error,
        report.coords.len(),
        tolerance
    );
    Ok(if report.passed() { exit::OK } else { exit::NUMERICAL })
}

pub fn export_embeddings(corpus: &CorpusArg, ckpt: &Path, split: &str, out: &Path, cfg: &ConfigArgs) -> CliResult<i32> {
    let split = Split::parse(split)
        .ok_or_else(|| CliError::Usage(format!("--split {split:?}: expected pretrain, finetune or test")))?;
    let config = resolve_config(cfg, Some(ckpt))?;
    let (_, corpus) = resolve_corpus(corpus, &config)?;
    let state = load_state(ckpt, &config)?;
    let set = LabeledSet::from_split(&corpus, split);
    let features = pipe::embed_images(&state, &config, &set.images)?;
    let width = features.shape()[1];
    let mut csv = String::from("page_id,writer_id");
    for j in 0..width {
        let _ = write!(csv, ",e{j}");
    }
    csv.push('\n');
    for (i, (id, label)) in set.ids.iter().zip(&set.labels).enumerate() {
        let _ = write!(csv, "{id},{label}");
        for v in features.row(i) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, csv)?;
    echo(&out.with_extension("config.toml"), &config.to_toml())?;
    log("embeddings-written", &[("path", &out.display()), ("rows", &set.len()), ("dims", &width)]);
    Ok(exit::OK)
}
