//! The `sae-ensemble` command-line front end.
//!
//! Every command reads an experiment config (see [`config`]) and writes
//! below the output directory:
//!
//! ```text
//! data/     train and eval shards with manifests (gen-data)
//! models/   single-s{seed}.sae, {kind}-J{J}-s{seed}/ (train, bag, boost)
//! logs/     training log CSVs
//! results/  eval, stability, concept and scr CSV + JSON, report.csv
//! ```

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{generate_synthetic, load_manifest, write_dataset, ActivationDataset};
use crate::downstream::{
    concept_detection_eval, downstream_csv, generate_corpus, scr_eval, AblationSource, DownstreamRow,
    LabeledSequenceSet, ScrOptions,
};
use crate::ensemble::{bag_train, boost_train, EnsembleKind, Target};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, stability_all, EvalOptions};
use crate::rng::derive_seed;
use crate::sae::{save_checkpoint, train_sae, CheckpointMeta, TrainLog};

use config::{config_hash, CorpusSource, DatasetSection, LoadedConfig};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SAE_ENSEMBLE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sae-ensemble", version, about = "Train, ensemble and evaluate sparse autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train/eval shards.
    GenData(Common),
    /// Train a single SAE.
    Train(Common),
    /// Train a naive bagging ensemble.
    Bag {
        #[command(flatten)]
        common: Common,
        /// Members trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Train a boosting ensemble.
    Boost {
        #[command(flatten)]
        common: Common,
        /// Materialize each member's residual dataset instead of recomputing it per batch.
        #[arg(long)]
        cache_residuals: bool,
    },
    /// Intrinsic metrics on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoints or ensemble directories; defaults to everything under models/.
        targets: Vec<PathBuf>,
    },
    /// Feature stability across runs.
    Stability {
        #[command(flatten)]
        common: Common,
        /// At least two targets; defaults to models/ grouped by kind, J and m.
        targets: Vec<PathBuf>,
    },
    /// Concept detection accuracy.
    Concept {
        #[command(flatten)]
        common: Common,
        targets: Vec<PathBuf>,
    },
    /// Spurious-correlation removal sweep.
    Scr {
        #[command(flatten)]
        common: Common,
        targets: Vec<PathBuf>,
    },
    /// Aggregate result CSVs into means with 95% confidence intervals.
    Report {
        /// Optional config whose hash is recorded in the report.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory holding results/ (default: the config's, else `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory of result CSVs; defaults to `<out>/results`.
        dir: Option<PathBuf>,
    },
}

/// Resolved config, output directory and provenance hash for one command.
pub struct Context {
    pub cfg: LoadedConfig,
    pub out: PathBuf,
    pub hash: String,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self> {
        let mut cfg = LoadedConfig::read(&common.config)?;
        let mut hash = cfg.hash.clone();
        if let Some(seed) = common.seed {
            cfg.config.seed = seed;
            hash = config_hash(format!("{hash}\nseed={seed}").as_bytes());
            cfg.validate()?;
        }
        let out = match &common.out {
            Some(o) => o.clone(),
            None => cfg.resolve(&cfg.config.output_dir),
        };
        Ok(Self { cfg, out, hash })
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn seed(&self) -> u64 {
        self.cfg.config.seed
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    println!("{}", path.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

/// Effective worker count: `requested`, capped by [`THREADS_ENV`] when set.
pub fn thread_cap(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|v| *v > 0);
    requested.max(1).min(cap.unwrap_or(usize::MAX))
}

/// Train and eval datasets plus the eval split's name.
pub fn datasets(cfg: &LoadedConfig) -> Result<(ActivationDataset, ActivationDataset, &'static str)> {
    match &cfg.config.dataset {
        DatasetSection::Manifest { train, eval } => {
            let tr = load_manifest(&cfg.resolve(train))?;
            match eval {
                Some(e) => Ok((tr, load_manifest(&cfg.resolve(e))?, "eval")),
                None => Ok((tr.clone(), tr, "train")),
            }
        }
        DatasetSection::Synthetic { spec, n_train, n_eval, .. } => {
            let all = generate_synthetic(spec, n_train + n_eval)?.dataset;
            // same values as a shard round trip
            let all = ActivationDataset::new(all.into_array().mapv(|x| x as f32 as f64))?;
            Ok((all.slice(0, *n_train)?, all.slice(*n_train, n_train + n_eval)?, "eval"))
        }
    }
}

fn corpus(cfg: &LoadedConfig, source: &CorpusSource) -> Result<LabeledSequenceSet> {
    match source {
        CorpusSource::Path { sidecar } => LabeledSequenceSet::load(&cfg.resolve(sidecar)),
        CorpusSource::Synthetic { spec } => generate_corpus(spec),
    }
}

fn log_csv(logs: &[TrainLog], hash: &str) -> String {
    let mut out = String::from(
        "member,step,epoch,lambda,recon_loss,sparsity_term,ev_estimate,dead_features,input_energy,config_hash,version\n",
    );
    for (j, log) in logs.iter().enumerate() {
        for r in &log.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                j + 1,
                r.step,
                r.epoch,
                r.lambda,
                r.recon_loss,
                r.sparsity_term,
                r.ev_estimate,
                r.dead_features,
                r.input_energy,
                hash,
                crate::VERSION
            );
        }
    }
    out
}

pub fn cmd_gen_data(ctx: &Context) -> Result<Vec<PathBuf>> {
    let DatasetSection::Synthetic { samples_per_shard, .. } = &ctx.cfg.config.dataset else {
        return Err(Error::invalid("gen-data needs a synthetic dataset section"));
    };
    let (train, eval, _) = datasets(&ctx.cfg)?;
    let dir = ctx.dir("data");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths = Vec::new();
    for (stem, ds) in [("train", &train), ("eval", &eval)] {
        let p = write_dataset(ds, &dir, stem, *samples_per_shard, Some(&ctx.hash))?;
        println!("{}", p.display());
        paths.push(p);
    }
    Ok(paths)
}

fn single_id(seed: u64) -> String {
    format!("single-s{seed}")
}

fn ensemble_id(kind: EnsembleKind, j: usize, seed: u64) -> String {
    format!("{}-J{j}-s{seed}", kind.name())
}

pub fn cmd_train(ctx: &Context) -> Result<PathBuf> {
    let (train, _, _) = datasets(&ctx.cfg)?;
    let sae = &ctx.cfg.config.sae;
    let tc = ctx.cfg.train_config();
    let (params, log) = train_sae(&train, &tc, sae.activation, sae.dict_size, ctx.seed())?;
    let id = single_id(ctx.seed());
    let path = ctx.dir("models").join(format!("{id}.sae"));
    fs::create_dir_all(ctx.dir("models")).map_err(|e| Error::io(ctx.dir("models"), e))?;
    let meta = CheckpointMeta {
        init_seed: Some(ctx.seed()),
        data_seed: Some(tc.seed),
        train_config: Some(tc),
        config_hash: Some(ctx.hash.clone()),
    };
    save_checkpoint(&path, &params, &meta)?;
    println!("{}", path.display());
    write_file(&ctx.dir("logs").join(format!("{id}.csv")), log_csv(&[log], &ctx.hash))?;
    Ok(path)
}

fn ensemble_section(ctx: &Context, expect: EnsembleKind) -> Result<usize> {
    let e = ctx.cfg.config.ensemble.as_ref().ok_or_else(|| Error::invalid("config has no ensemble section"))?;
    if e.kind != expect {
        return Err(Error::invalid(format!(
            "config ensemble kind is {}, command trains {}",
            e.kind.name(),
            expect.name()
        )));
    }
    Ok(e.j)
}

pub fn cmd_ensemble(ctx: &Context, kind: EnsembleKind, parallel: usize, cache_residuals: bool) -> Result<PathBuf> {
    let j = ensemble_section(ctx, kind)?;
    let seeds = ctx.cfg.ensemble_seeds()?;
    let (train, _, _) = datasets(&ctx.cfg)?;
    let sae = &ctx.cfg.config.sae;
    let tc = ctx.cfg.train_config();
    let (ens, logs) = match kind {
        EnsembleKind::NaiveBagging => {
            bag_train(&train, &tc, sae.activation, sae.dict_size, &seeds, thread_cap(parallel))?
        }
        EnsembleKind::Boosting => boost_train(&train, &tc, sae.activation, sae.dict_size, &seeds, cache_residuals)?,
    };
    let id = ensemble_id(kind, j, ctx.seed());
    let dir = ctx.dir("models").join(&id);
    ens.save(&dir, Some(&tc), Some(&ctx.hash))?;
    println!("{}", dir.display());
    write_file(&ctx.dir("logs").join(format!("{id}.csv")), log_csv(&logs, &ctx.hash))?;
    Ok(dir)
}

fn target_id(path: &Path) -> String {
    let name = if path.is_dir() { path.file_name() } else { path.file_stem() };
    name.map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "target".into())
}

/// Explicit targets, or every model under `models/` sorted by name.
fn targets(ctx: &Context, explicit: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if !explicit.is_empty() {
        return Ok(explicit.to_vec());
    }
    let dir = ctx.dir("models");
    let mut found: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() || p.extension().is_some_and(|x| x == "sae"))
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Error::invalid(format!("no models under {}", dir.display())));
    }
    Ok(found)
}

pub fn cmd_eval(ctx: &Context, explicit: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let paths = targets(ctx, explicit)?;
    let (_, eval, split) = datasets(&ctx.cfg)?;
    let mut written = Vec::new();
    for p in &paths {
        let target = Target::load(p)?;
        let id = target_id(p);
        let opts = EvalOptions {
            target_id: id.clone(),
            taus: ctx.cfg.config.eval.taus.clone(),
            eval_split: split.into(),
            stability: None,
            config_hash: Some(ctx.hash.clone()),
        };
        let rep = evaluate(&target, &eval, &opts)?;
        let base = ctx.dir("results").join(format!("eval-{id}"));
        write_json(&base.with_extension("json"), &rep)?;
        write_file(&base.with_extension("csv"), rep.to_csv())?;
        written.push(base.with_extension("csv"));
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
struct StabilityRow {
    target_id: String,
    kind: String,
    #[serde(rename = "J")]
    j: usize,
    stability: f64,
}

pub fn cmd_stability(ctx: &Context, explicit: &[PathBuf]) -> Result<PathBuf> {
    let paths = targets(ctx, explicit)?;
    let loaded: Vec<(String, Target)> =
        paths.iter().map(|p| Ok((target_id(p), Target::load(p)?))).collect::<Result<_>>()?;
    let mut groups: BTreeMap<(String, usize, usize), Vec<usize>> = BTreeMap::new();
    if explicit.is_empty() {
        for (i, (_, t)) in loaded.iter().enumerate() {
            groups.entry((t.kind_name().into(), t.members(), t.feature_count())).or_default().push(i);
        }
        groups.retain(|_, v| v.len() >= 2);
    } else {
        groups.insert((String::new(), 0, 0), (0..loaded.len()).collect());
    }
    if groups.values().all(|v| v.len() < 2) {
        return Err(Error::invalid("stability needs at least two compatible runs"));
    }
    let mut rows = Vec::new();
    for idx in groups.values() {
        let features: Vec<_> = idx.iter().map(|&i| loaded[i].1.features()).collect();
        let views: Vec<_> = features.iter().map(|f| f.view()).collect();
        for (&i, s) in idx.iter().zip(stability_all(&views)?) {
            let (id, t) = &loaded[i];
            rows.push(StabilityRow { target_id: id.clone(), kind: t.kind_name().into(), j: t.members(), stability: s });
        }
    }
    let mut csv = String::from("target_id,kind,J,stability,config_hash,version\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.target_id, r.kind, r.j, r.stability, ctx.hash, crate::VERSION);
    }
    let path = ctx.dir("results").join("stability.csv");
    write_file(&path, csv)?;
    write_json(&path.with_extension("json"), &Provenanced::new(ctx, &rows))?;
    Ok(path)
}

/// JSON wrapper carrying provenance.
#[derive(Serialize)]
struct Provenanced<'a, T: Serialize> {
    config_hash: &'a str,
    version: &'static str,
    results: &'a T,
}

impl<'a, T: Serialize> Provenanced<'a, T> {
    fn new(ctx: &'a Context, results: &'a T) -> Self {
        Self { config_hash: &ctx.hash, version: crate::VERSION, results }
    }
}

pub fn cmd_concept(ctx: &Context, explicit: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let section = ctx
        .cfg
        .config
        .downstream
        .concept
        .as_ref()
        .ok_or_else(|| Error::invalid("config has no downstream.concept section"))?;
    let set = corpus(&ctx.cfg, &section.corpus)?;
    for label in &section.labels {
        set.label(label)?;
    }
    let paths = targets(ctx, explicit)?;
    let logistic = &ctx.cfg.config.downstream.logistic;
    let mut written = Vec::new();
    for p in &paths {
        let target = Target::load(p)?;
        let id = target_id(p);
        let mut rows = Vec::new();
        let mut details = BTreeMap::new();
        for label in &section.labels {
            let mut variants = vec![(label.clone(), set.clone())];
            if section.shuffled_control {
                variants.push((
                    format!("{label}_shuffled"),
                    set.with_shuffled_label(label, derive_seed(ctx.seed(), 0x5EED))?,
                ));
            }
            for (task, corpus) in &variants {
                for &l in &section.l_values {
                    let res = concept_detection_eval(&target, corpus, label, l, ctx.seed(), logistic)?;
                    rows.push(DownstreamRow {
                        target_id: id.clone(),
                        kind: target.kind_name().into(),
                        j: target.members(),
                        task: format!("concept:{task}"),
                        l,
                        metric: "accuracy".into(),
                        value: res.accuracy,
                        seed: ctx.seed(),
                    });
                    details.insert(format!("{task}@L={l}"), res);
                }
            }
        }
        let base = ctx.dir("results").join(format!("concept-{id}"));
        write_file(&base.with_extension("csv"), downstream_csv(&rows, Some(&ctx.hash))?)?;
        write_json(&base.with_extension("json"), &Provenanced::new(ctx, &details))?;
        written.push(base.with_extension("csv"));
    }
    Ok(written)
}

pub fn cmd_scr(ctx: &Context, explicit: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let section =
        ctx.cfg.config.downstream.scr.as_ref().ok_or_else(|| Error::invalid("config has no downstream.scr section"))?;
    let biased = corpus(&ctx.cfg, &section.biased)?;
    let balanced = corpus(&ctx.cfg, &section.balanced)?;
    let opts = ScrOptions {
        task_label: section.task_label.clone(),
        spurious_label: section.spurious_label.clone(),
        split_seed: ctx.seed(),
        rule: section.rule,
        source: section.source,
        logistic: ctx.cfg.config.downstream.logistic.clone(),
        ..ScrOptions::default()
    };
    let task = match section.source {
        AblationSource::Spurious => "scr",
        AblationSource::Task => "scr_control",
    };
    let paths = targets(ctx, explicit)?;
    let mut written = Vec::new();
    for p in &paths {
        let target = Target::load(p)?;
        let id = target_id(p);
        let res = scr_eval(&target, &biased, &balanced, &section.l_values, &opts)?;
        let rows: Vec<DownstreamRow> = res
            .points
            .iter()
            .map(|pt| DownstreamRow {
                target_id: id.clone(),
                kind: target.kind_name().into(),
                j: target.members(),
                task: task.into(),
                l: pt.l,
                metric: "s_shift".into(),
                value: pt.s_shift,
                seed: ctx.seed(),
            })
            .collect();
        let base = ctx.dir("results").join(format!("{task}-{id}"));
        write_file(&base.with_extension("csv"), downstream_csv(&rows, Some(&ctx.hash))?)?;
        write_json(&base.with_extension("json"), &Provenanced::new(ctx, &res))?;
        written.push(base.with_extension("csv"));
    }
    Ok(written)
}

pub fn cmd_report(config: Option<&Path>, out: Option<&Path>, dir: Option<&Path>) -> Result<PathBuf> {
    let cfg = config.map(LoadedConfig::read).transpose()?;
    let out_dir = match (out, &cfg) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(c)) => c.resolve(&c.config.output_dir),
        (None, None) => PathBuf::from("out"),
    };
    let results = dir.map(Path::to_path_buf).unwrap_or_else(|| out_dir.join("results"));
    let aggs = report::aggregate_dir(&results)?;
    let path = results.join("report.csv");
    write_file(&path, report::report_csv(&aggs, cfg.as_ref().map(|c| c.hash.as_str())))?;
    Ok(path)
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => cmd_gen_data(&Context::new(c)?).map(drop),
        Command::Train(c) => cmd_train(&Context::new(c)?).map(drop),
        Command::Bag { common, parallel } => {
            cmd_ensemble(&Context::new(common)?, EnsembleKind::NaiveBagging, *parallel, false).map(drop)
        }
        Command::Boost { common, cache_residuals } => {
            cmd_ensemble(&Context::new(common)?, EnsembleKind::Boosting, 1, *cache_residuals).map(drop)
        }
        Command::Eval { common, targets } => cmd_eval(&Context::new(common)?, targets).map(drop),
        Command::Stability { common, targets } => cmd_stability(&Context::new(common)?, targets).map(drop),
        Command::Concept { common, targets } => cmd_concept(&Context::new(common)?, targets).map(drop),
        Command::Scr { common, targets } => cmd_scr(&Context::new(common)?, targets).map(drop),
        Command::Report { config, out, dir } => cmd_report(config.as_deref(), out.as_deref(), dir.as_deref()).map(drop),
    }
}
