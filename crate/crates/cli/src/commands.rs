use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use xlda_core::corpus::{byte_tokenizer, ingest, ingest_reader, CorpusStats, Document, IngestOptions};
use xlda_core::packer::{pack_all, queues_from_documents, read_packed_file, write_packed_file, PackedFile};
use xlda_core::quality_filter::{filter_by_language, quantile_filter, stage_preset};
use xlda_core::sampler::{language_distribution, parse_beta, MixturePlan, SamplerConfig};
use xlda_core::schedule::{compute_ratio, lr_scale_factor, vocab_scale_factor, BatchRamp};
use xlda_core::toy_model::{grad_check, train, transfer_experiment, write_metrics_csv, GradCheckConfig, OptimizerConfig, TrainOptions, TransferSpec};
use xlda_core::xlda_mask::DEFAULT_DENSE_CAP;
use xlda_core::{consistency, MaskSpec, Parameters, ScheduleConfig};

use crate::config::RunConfig;
use crate::{Cli, Command, Global};

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Filter(a) => filter(g, cfg, a),
        Command::Plan(a) => plan(g, cfg, a),
        Command::Pack(a) => pack(g, cfg, a),
        Command::Mask(a) => mask(g, cfg, a),
        Command::Schedule(a) => schedule(g, cfg, a),
        Command::Advise(a) => advise(g, a),
        Command::TrainToy(a) => train_toy(g, cfg, a),
        Command::GradCheck(a) => grad_check_cmd(g, cfg, a),
        Command::Transfer(a) => transfer(g, cfg, a),
        Command::EvalConsistency(a) => eval_consistency(g, a),
    }
}

fn echo(g: &Global, cfg: &RunConfig) -> Result<()> {
    if !g.quiet {
        eprint!("# effective config\n{}", cfg.to_toml()?);
    }
    Ok(())
}

fn emit<T: Serialize>(g: &Global, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    let mut out = std::io::stdout().lock();
    if g.json {
        serde_json::to_writer_pretty(&mut out, value)?;
        writeln!(out)?;
    } else {
        write!(out, "{}", text())?;
    }
    Ok(())
}

fn read_corpus(path: &Path, cfg: &RunConfig) -> Result<Vec<Document>> {
    let opts = IngestOptions { schema: cfg.schema.clone(), ..Default::default() };
    let tok: &(dyn Fn(&str) -> Vec<u32> + Sync) = &byte_tokenizer;
    let outcome = ingest(path, &opts, Some(tok)).with_context(|| format!("reading {}", path.display()))?;
    Ok(outcome.documents)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Applies flag overrides to the sampler section and resolves an empty
/// prior to uniform over the corpus languages.
fn sampler_config(cfg: &mut RunConfig, stats: &CorpusStats, alpha: Option<f64>, beta: Option<&str>, rho: Option<f64>) -> Result<SamplerConfig> {
    if let Some(a) = alpha {
        cfg.sampler.alpha_temp = a;
    }
    if let Some(b) = beta {
        cfg.sampler.beta = parse_beta(b)?;
    }
    if let Some(r) = rho {
        cfg.sampler.rho = r;
    }
    if cfg.sampler.beta.is_empty() {
        let n = stats.languages.len().max(1) as f64;
        cfg.sampler.beta = stats.languages.keys().map(|l| (l.clone(), 1.0 / n)).collect();
    }
    let s = &cfg.sampler;
    Ok(SamplerConfig::new(s.alpha_temp, s.beta.clone(), s.rho, cfg.seed)?)
}

fn filter(g: &Global, mut cfg: RunConfig, a: &crate::FilterArgs) -> Result<()> {
    if let Some(s) = a.stage {
        cfg.filter.stage = s;
    }
    if a.class.is_some() {
        cfg.filter.class = a.class;
    }
    if a.keep.is_some() {
        cfg.filter.keep_fraction = a.keep;
    }
    echo(g, &cfg)?;
    let docs = read_corpus(&a.input, &cfg)?;
    let f = &cfg.filter;
    let kept = match f.class {
        Some(class) => quantile_filter(&docs, f.keep_fraction.unwrap_or(stage_preset(f.stage, class)?))?,
        None => filter_by_language(&docs, f.stage, f.keep_fraction)?,
    };
    let mut out = create(&a.output)?;
    xlda_core::corpus::write_records(&mut out, &kept, &cfg.schema)?;

    let mut rows: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    docs.iter().for_each(|d| rows.entry(d.lang.code().to_owned()).or_default().0 += 1);
    kept.iter().for_each(|d| rows.entry(d.lang.code().to_owned()).or_default().1 += 1);
    let report = json!({
        "stage": f.stage,
        "input_documents": docs.len(),
        "kept_documents": kept.len(),
        "languages": rows.iter().map(|(l, (i, k))| (l.clone(), json!({"input": i, "kept": k}))).collect::<serde_json::Map<_, _>>(),
    });
    emit(g, &report, || {
        let mut s = format!("stage {:?}: kept {} of {} documents\n", f.stage, kept.len(), docs.len()).to_lowercase();
        for (l, (i, k)) in &rows {
            s.push_str(&format!("{l}\t{k}/{i}\n"));
        }
        s
    })
}

fn load_stats(path: &Path, cfg: &RunConfig) -> Result<CorpusStats> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(stats) = serde_json::from_str::<CorpusStats>(&text) {
        if !stats.is_consistent() {
            bail!("stats in {} do not sum to their totals", path.display());
        }
        return Ok(stats);
    }
    let opts = IngestOptions { schema: cfg.schema.clone(), ..Default::default() };
    let tok: &(dyn Fn(&str) -> Vec<u32> + Sync) = &byte_tokenizer;
    let docs = ingest_reader(text.as_bytes(), &opts, Some(tok)).with_context(|| format!("reading {}", path.display()))?;
    Ok(CorpusStats::from_documents(&docs.documents))
}

fn plan(g: &Global, mut cfg: RunConfig, a: &crate::PlanArgs) -> Result<()> {
    let stats = load_stats(&a.stats, &cfg)?;
    let sampler = sampler_config(&mut cfg, &stats, a.alpha, a.beta.as_deref(), a.rho)?;
    echo(g, &cfg)?;
    let dist = language_distribution(&sampler, &stats)?;
    let main = MixturePlan::from_distribution(&dist);
    let main_rows = main.report(&stats, a.budget);
    let anneal_rows = if a.anneal { Some(main.anneal()?.report(&stats, a.budget)) } else { None };
    let report = json!({
        "distribution": dist.probs(),
        "rho": sampler.rho,
        "mixture": main_rows,
        "anneal_mixture": anneal_rows,
    });
    emit(g, &report, || {
        let mut s = format!("rho {}\nlang\tnatural\ttarget\tupsampling\ttarget_tokens\tepochs\n", sampler.rho);
        let table = |s: &mut String, rows: &[xlda_core::sampler::MixtureRow]| {
            for r in rows {
                let tt = r.target_tokens.map_or("-".to_owned(), |t| t.to_string());
                let ep = r.epochs.map_or("-".to_owned(), |e| format!("{e:.3}"));
                s.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{:.3}\t{tt}\t{ep}\n",
                    r.lang, r.natural_share, r.target_share, r.upsampling
                ));
            }
        };
        table(&mut s, &main_rows);
        if let Some(rows) = &anneal_rows {
            s.push_str("anneal\n");
            table(&mut s, rows);
        }
        s
    })
}

fn pack(g: &Global, mut cfg: RunConfig, a: &crate::PackArgs) -> Result<()> {
    if let Some(n) = a.seq_len {
        cfg.packer.seq_len = n;
    }
    if let Some(p) = a.split {
        cfg.packer.split_policy = p;
    }
    let docs = read_corpus(&a.input, &cfg)?;
    let stats = CorpusStats::from_documents(&docs);
    let sampler = sampler_config(&mut cfg, &stats, a.alpha, a.beta.as_deref(), a.rho)?;
    echo(g, &cfg)?;
    let dist = language_distribution(&sampler, &stats)?;
    let (seqs, report) = pack_all(queues_from_documents(docs), &sampler, &dist, &cfg.packer)?;
    let file = PackedFile::new(cfg.packer.seq_len, seqs);
    write_packed_file(&a.output, &file)?;
    emit(g, &report, || {
        format!(
            "sequences {}\nmultilingual {}\nconstrained {}\nconsumed_tokens {}\npadding_tokens {}\ndropped_tokens {}\nleftover_tokens {}\nstopped_by_constraint {}\n",
            report.sequences,
            report.multilingual_sequences,
            report.constrained_sequences,
            report.consumed_tokens,
            report.padding_tokens,
            report.dropped_tokens,
            report.leftover_tokens,
            report.stopped_by_constraint
        )
    })
}

fn mask(g: &Global, cfg: RunConfig, a: &crate::MaskArgs) -> Result<()> {
    echo(g, &cfg)?;
    let file = read_packed_file(&a.from)?;
    let Some(seq) = file.sequences.get(a.index) else {
        bail!("index {} out of range: file holds {} sequences", a.index, file.sequences.len());
    };
    let spec = MaskSpec::for_sequence(a.policy, seq)?;
    if a.dense {
        let dense = spec.materialize_dense_capped(spec.seq_len(), DEFAULT_DENSE_CAP, a.force)?;
        print!("{}", dense.to_pbm());
        return Ok(());
    }
    let report = json!({
        "policy": a.policy,
        "seq_len": spec.seq_len(),
        "pad_start": spec.pad_start(),
        "spans": spec.spans(),
        "allowed_pairs": spec.allowed_pair_count(),
    });
    emit(g, &report, || spec.describe())
}

#[derive(Serialize)]
struct ScheduleRow {
    step: u64,
    phase: String,
    lr: f64,
    batch_tokens: u64,
    weight_decay: f64,
    mtp_alpha: f64,
}

fn schedule(g: &Global, mut cfg: RunConfig, a: &crate::ScheduleArgs) -> Result<()> {
    let mut s = cfg.schedule.unwrap_or_default();
    if let Some(t) = a.total {
        s.total_steps = t;
        s.batch_ramp = ScheduleConfig::reference(t).batch_ramp;
    }
    s.peak_lr = a.peak.unwrap_or(s.peak_lr);
    s.warmup_steps = a.warmup.unwrap_or(s.warmup_steps);
    s.decay_fraction = a.decay_frac.unwrap_or(s.decay_fraction);
    s.final_ratio = a.final_ratio.unwrap_or(s.final_ratio);
    s.validate()?;
    cfg.schedule = Some(s);
    echo(g, &cfg)?;

    let every = a.every.unwrap_or((s.total_steps / 20).max(1)).max(1);
    let marks = [0, s.warmup_steps, s.decay_start(), s.total_steps];
    let mut rows = Vec::new();
    let mut seen = 0u64;
    for step in 0..=s.total_steps {
        let batch = s.batch_size_at(seen);
        if step % every == 0 || marks.contains(&step) {
            let (wd, alpha) = s.anneal_params(s.stage_at(step));
            rows.push(ScheduleRow {
                step,
                phase: format!("{:?}", s.phase(step)).to_lowercase(),
                lr: s.lr_at(step)?,
                batch_tokens: batch,
                weight_decay: wd,
                mtp_alpha: alpha,
            });
        }
        seen += batch;
    }
    emit(g, &rows, || {
        let sep = if a.csv { "," } else { "\t" };
        let mut out = ["step", "phase", "lr", "batch_tokens", "weight_decay", "mtp_alpha"].join(sep) + "\n";
        for r in &rows {
            out.push_str(&format!(
                "{}{sep}{}{sep}{:e}{sep}{}{sep}{}{sep}{}\n",
                r.step, r.phase, r.lr, r.batch_tokens, r.weight_decay, r.mtp_alpha
            ));
        }
        out
    })
}

fn advise(g: &Global, a: &crate::AdviseArgs) -> Result<()> {
    let ratio = compute_ratio(a.params_from, a.tokens_from, a.params_to, a.tokens_to)?;
    let lr = lr_scale_factor(ratio)?;
    let vocab = vocab_scale_factor(ratio)?;
    let report = json!({ "compute_ratio": ratio, "lr_factor": lr, "vocab_factor": vocab });
    emit(g, &report, || format!("compute ratio {ratio:.4}\nlr factor {lr:.4}\nvocab factor {vocab:.4}\n"))
}

/// Schedule used by `train-toy` when the config has none: short warmup and
/// a constant batch of four sequences.
fn toy_schedule(steps: u64, seq_len: usize) -> ScheduleConfig {
    let batch = 4 * seq_len as u64;
    ScheduleConfig {
        peak_lr: 1e-3,
        warmup_steps: (steps / 10).max(1),
        total_steps: steps,
        batch_ramp: BatchRamp { start_tokens: batch, end_tokens: batch, ramp_tokens: 0, seq_len: seq_len as u64 },
        ..ScheduleConfig::reference(steps)
    }
}

fn write_params(path: &Path, p: &Parameters) -> Result<()> {
    let mut out = create(path)?;
    for x in &p.data {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn train_toy(g: &Global, mut cfg: RunConfig, a: &crate::TrainArgs) -> Result<()> {
    let file = read_packed_file(&a.packed)?;
    let steps = a.steps.or(cfg.schedule.map(|s| s.total_steps)).unwrap_or(100);
    let mut s = cfg.schedule.unwrap_or_else(|| toy_schedule(steps, file.seq_len));
    s.total_steps = steps;
    s.peak_lr = a.peak.unwrap_or(s.peak_lr);
    s.warmup_steps = a.warmup.unwrap_or(s.warmup_steps);
    cfg.schedule = Some(s);
    cfg.model.seed = cfg.seed;
    echo(g, &cfg)?;
    if let Some(t) = file.sequences.iter().flat_map(|q| q.tokens.iter()).find(|&&t| t as usize >= cfg.model.vocab_size) {
        bail!("token id {t} does not fit model.vocab_size = {}", cfg.model.vocab_size);
    }

    let params = Parameters::init(&cfg.model)?;
    let opts = TrainOptions { schedule: s, optimizer: OptimizerConfig::default(), policy: a.policy };
    let (trained, log) = train(params, &file.sequences, &opts)?;
    if let Some(path) = &a.metrics {
        let mut out = create(path)?;
        write_metrics_csv(&mut out, &log)?;
        out.flush()?;
    }
    if let Some(path) = &a.save {
        write_params(path, &trained)?;
    }
    let last = log.last();
    let report = json!({
        "steps": log.len(),
        "parameters": trained.len(),
        "checksum": format!("{:016x}", trained.checksum()),
        "final": last,
    });
    emit(g, &report, || {
        let mut s = format!("steps {}\nparameters {}\nchecksum {:016x}\n", log.len(), trained.len(), trained.checksum());
        if let Some(r) = last {
            s.push_str(&format!("final loss_ntp {} loss_mtp {} loss_total {}\n", r.loss_ntp, r.loss_mtp, r.loss_total));
        }
        s
    })
}

fn grad_check_cmd(g: &Global, mut cfg: RunConfig, a: &crate::GradCheckArgs) -> Result<()> {
    let mut gc = GradCheckConfig { policy: a.policy, mtp_alpha: a.alpha, samples_per_tensor: a.samples, seed: cfg.seed, ..Default::default() };
    gc.model.seed = cfg.seed;
    cfg.model = gc.model.clone();
    echo(g, &cfg)?;
    let report = grad_check(&gc, a.tolerance)?;
    emit(g, &report, || {
        let mut s = String::from("tensor\tchecked\tmax_rel_error\n");
        for t in &report.tensors {
            match &t.note {
                Some(n) => s.push_str(&format!("{}\t0\t{n}\n", t.name)),
                None => s.push_str(&format!("{}\t{}\t{:.3e}\n", t.name, t.checked, t.max_rel_error)),
            }
        }
        s.push_str(&format!(
            "parameters {}\nmax rel error {:.3e} (plain central {:.3e})\n",
            report.parameter_count, report.max_rel_error, report.max_rel_error_central
        ));
        s
    })?;
    if !report.passed {
        bail!("max relative error {:e} is not below {:e}", report.max_rel_error, a.tolerance);
    }
    Ok(())
}

fn transfer(g: &Global, mut cfg: RunConfig, a: &crate::TransferArgs) -> Result<()> {
    cfg.model.seed = cfg.seed;
    echo(g, &cfg)?;
    let mut spec = TransferSpec { model: cfg.model.clone(), seed: cfg.seed, ..Default::default() };
    if let Some(s) = a.steps {
        spec.steps = s;
    }
    let report = transfer_experiment(&spec)?;
    if let Some(path) = &a.report {
        let mut out = create(path)?;
        serde_json::to_writer_pretty(&mut out, &json!({ "spec": spec, "report": report }))?;
        writeln!(out)?;
        out.flush()?;
    }
    emit(g, &report, || {
        let mut s = format!("steps {} budget_tokens {}\npolicy\tlang\tinitial\theld_out\n", report.steps, report.budget_tokens);
        for (i, p) in report.policies.iter().enumerate() {
            for (lang, loss) in &report.loss[i] {
                s.push_str(&format!("{p}\t{lang}\t{:.4}\t{loss:.4}\n", report.initial_loss[i][lang]));
            }
        }
        s
    })
}

fn eval_consistency(g: &Global, a: &crate::ConsistencyArgs) -> Result<()> {
    let f = File::open(&a.pairs).with_context(|| format!("opening {}", a.pairs.display()))?;
    let pairs = consistency::read_pairs(BufReader::new(f))?;
    let report = consistency::consistency_metrics(&pairs)?;
    emit(g, &report, || report.to_text())
}
