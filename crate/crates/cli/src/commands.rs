//! Subcommand implementations. Each writes only inside its output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use alter_core::config::ModelConfig;
use alter_core::data::{generate_cohort, load_cohort, save_cohort, split, Cohort, CohortSpec, Prepared, Split};
use alter_core::encoders::ExpressionBinner;
use alter_core::model::AlterModel;
use alter_core::numerics::Checkpoint;
use alter_core::pretrain::{LossRow, Pretrainer};
use alter_core::tasks::finetune::{evaluate, finetune, FinetuneConfig, Task};
use alter_core::tasks::survival::TimeBins;
use alter_core::tasks::PoolKind;
use alter_core::{Error, Result};
use clap::Args;

use crate::gradcheck::{run_suite, SuiteReport};
use crate::run_config::{format_ratios, parse_ratios, resolve_out_dir, RunConfig, DEFAULT_SPLIT_RATIOS};

pub const COHORT_FILE: &str = "cohort.alc";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TASK_CHECKPOINT_FILE: &str = "task.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.tsv";
pub const EPOCH_LOSS_FILE: &str = "epoch_loss.tsv";
pub const SCHEDULE_FILE: &str = "mlm_schedule.tsv";
pub const CONFIG_FILE: &str = "config.txt";
pub const SPLIT_FILE: &str = "split.txt";
pub const METRICS_STEM: &str = "metrics";

const META_BINNER: &str = "data.binner";
const META_SPLIT_SEED: &str = "split.seed";
const META_SPLIT_RATIOS: &str = "split.ratios";
const META_SPLIT_TRAIN: &str = "split.train";
const META_TASK: &str = "task.name";
const META_POOL: &str = "task.pool";
const META_MODALITIES: &str = "task.modalities";
const META_TIME_BINS: &str = "task.time_bins";
const META_FREEZE: &str = "task.freeze_fusion";

#[derive(Args, Debug, Clone, Default)]
pub struct GenArgs {
    /// Output directory (relative paths resolve under ALTER_OUT_ROOT when set).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub patch_dim: Option<usize>,
    #[arg(long)]
    pub genes: Option<usize>,
    #[arg(long)]
    pub pathway_size: Option<usize>,
    /// Text sequence length including the leading CLS.
    #[arg(long)]
    pub text_len: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Probability that a sample's slide is missing.
    #[arg(long)]
    pub missing_h: Option<f64>,
    #[arg(long)]
    pub missing_g: Option<f64>,
    #[arg(long)]
    pub missing_t: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub censor_rate: Option<f64>,
    #[arg(long)]
    pub risk_scale: Option<f64>,
    /// Latent coordinates spelled out in each report (0 = class words only).
    #[arg(long)]
    pub report_levels: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl GenArgs {
    pub fn spec(&self) -> CohortSpec {
        let mut s = CohortSpec::default();
        macro_rules! take {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        take! {
            n => s.n,
            classes => s.classes,
            latent_dim => s.latent_dim,
            patches => s.n_patches,
            patch_dim => s.patch_dim,
            genes => s.n_genes,
            pathway_size => s.pathway_size,
            text_len => s.text_len,
            vocab => s.vocab_size,
            missing_h => s.missing[0],
            missing_g => s.missing[1],
            missing_t => s.missing[2],
            noise => s.noise,
            censor_rate => s.censor_rate,
            risk_scale => s.risk_scale,
            report_levels => s.report_levels,
            seed => s.seed,
        }
        s
    }
}

/// `key = value` lines of every generator parameter plus realized counts.
pub fn manifest(cohort: &Cohort) -> String {
    let s = &cohort.spec;
    let mut m = String::new();
    let rows: [(&str, String); 17] = [
        ("n", s.n.to_string()),
        ("classes", s.classes.to_string()),
        ("latent_dim", s.latent_dim.to_string()),
        ("patches", s.n_patches.to_string()),
        ("patch_dim", s.patch_dim.to_string()),
        ("genes", s.n_genes.to_string()),
        ("pathway_size", s.pathway_size.to_string()),
        ("text_len", s.text_len.to_string()),
        ("vocab", s.vocab_size.to_string()),
        ("missing_h", format!("{:?}", s.missing[0])),
        ("missing_g", format!("{:?}", s.missing[1])),
        ("missing_t", format!("{:?}", s.missing[2])),
        ("noise", format!("{:?}", s.noise)),
        ("censor_rate", format!("{:?}", s.censor_rate)),
        ("risk_scale", format!("{:?}", s.risk_scale)),
        ("report_levels", s.report_levels.to_string()),
        ("seed", s.seed.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(m, "{k} = {v}");
    }
    let present = |i: usize| cohort.records.iter().filter(|r| r.present()[i]).count();
    let _ = writeln!(m, "# realized: slide {} genes {} text {} of {}", present(0), present(1), present(2), cohort.len());
    m
}

pub fn cmd_gen(args: &GenArgs) -> Result<PathBuf> {
    let cohort = generate_cohort(&args.spec())?;
    let out = resolve_out_dir(&args.out);
    fs::create_dir_all(&out)?;
    save_cohort(&cohort, out.join(COHORT_FILE))?;
    fs::write(out.join(MANIFEST_FILE), manifest(&cohort))?;
    log::info!("wrote {} samples to {}", cohort.len(), out.display());
    Ok(out)
}

#[derive(Args, Debug, Clone, Default)]
pub struct PretrainArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from a checkpoint written by an earlier run with the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Masked-modeling weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Contrastive weight.
    #[arg(long)]
    pub beta: Option<f64>,
}

impl PretrainArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::new(&self.out);
        if let Some(p) = &self.config {
            rc.apply_file(p)?;
        }
        for kv in &self.set {
            rc.apply_override(kv)?;
        }
        let flags = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                rc.set(k, &v)?;
            }
        }
        Ok(rc)
    }
}

fn binner_to_meta(b: &ExpressionBinner) -> String {
    let edges: Vec<String> = b.edges().iter().map(|e| format!("{e:?}")).collect();
    format!("{};{}", b.n_bins(), edges.join(","))
}

fn binner_from_meta(ck: &Checkpoint) -> Result<ExpressionBinner> {
    let v = meta(ck, META_BINNER)?;
    let (n, edges) = v.split_once(';').ok_or_else(|| Error::Format("bad expression binner in checkpoint".into()))?;
    let n = n.parse().map_err(|_| Error::Format("bad bin count in checkpoint".into()))?;
    let edges = if edges.is_empty() {
        Vec::new()
    } else {
        edges
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format("bad bin edge in checkpoint".into()))?
    };
    ExpressionBinner::from_edges(n, edges)
}

fn meta<'a>(ck: &'a Checkpoint, key: &str) -> Result<&'a str> {
    ck.meta
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))
}

fn index_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_index_list(v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.parse().map_err(|_| Error::Format(format!("bad index {s:?}")))).collect()
}

fn split_text(sp: &Split) -> String {
    format!("train {}\nval {}\ntest {}\n", index_list(&sp.train), index_list(&sp.val), index_list(&sp.test))
}

/// Descriptive error when a checkpoint's architecture does not fit a cohort.
pub fn check_compatible(model: &ModelConfig, cohort: &Cohort) -> Result<()> {
    let s = &cohort.spec;
    let pairs = [
        ("patch feature width", model.patch_dim, s.patch_dim),
        ("gene count", model.n_genes, s.n_genes),
        ("vocabulary size", model.vocab_size, s.vocab_size),
        ("text length", model.max_text_len, s.text_len),
        ("class count", model.n_classes, s.classes),
    ];
    let bad: Vec<String> = pairs
        .iter()
        .filter(|(_, m, c)| m != c)
        .map(|(what, m, c)| format!("{what}: checkpoint {m}, cohort {c}"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Shape(format!("checkpoint does not match the cohort ({})", bad.join("; "))))
    }
}

/// Model inputs for every record, binned with the pretraining binner.
fn prepare(cohort: &Cohort, binner: &ExpressionBinner) -> Result<Vec<Prepared>> {
    cohort.prepare(binner)
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<LossRow>,
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<PretrainOutcome> {
    let cohort = load_cohort(&args.cohort)?;
    let mut rc = args.run_config()?;
    rc.fit_cohort(&cohort)?;
    let sp = split(&cohort.classes(), rc.split_ratios, rc.split_seed)?;
    let binner = cohort.fit_binner(&sp.train, rc.config.model.n_bins)?;
    let data = prepare(&cohort, &binner)?;
    let train_cfg = rc.config.train.clone();
    let model = AlterModel::new(rc.config.model.clone(), cohort.partition.clone(), train_cfg.tau_init, train_cfg.seed)?;
    let mut pt = Pretrainer::new(model, train_cfg, &data, sp.train.clone())?;
    if let Some(path) = &args.resume {
        let ck = Checkpoint::load(path)?;
        if binner_from_meta(&ck)?.edges() != binner.edges() {
            return Err(Error::Input("resume checkpoint was trained on a different cohort or split".into()));
        }
        pt.resume(&ck)?;
        log::info!("resuming at epoch {} batch {}", pt.epoch, pt.batch);
    }
    fs::create_dir_all(&rc.out_dir)?;
    let rows = pt.run(|r| {
        if r.batch == 0 {
            log::info!("epoch {} (masked modality {})", r.epoch, r.mlm_modality);
        }
        log::debug!("{}", r.to_tsv());
    })?;

    let out = &rc.out_dir;
    let mut log_text = format!("{}\n", LossRow::HEADER);
    for r in &rows {
        log_text.push_str(&r.to_tsv());
        log_text.push('\n');
    }
    fs::write(out.join(LOSS_LOG_FILE), log_text)?;
    fs::write(out.join(EPOCH_LOSS_FILE), epoch_means(&rows))?;
    let mut schedule = String::from("epoch\tmlm_modality\n");
    for e in 0..pt.cfg.epochs {
        let _ = writeln!(schedule, "{e}\t{}", pt.mlm_modality(e));
    }
    fs::write(out.join(SCHEDULE_FILE), schedule)?;
    fs::write(out.join(CONFIG_FILE), rc.to_text())?;
    fs::write(out.join(SPLIT_FILE), split_text(&sp))?;

    let mut ck = pt.checkpoint();
    ck.meta.insert(META_BINNER.into(), binner_to_meta(&binner));
    ck.meta.insert(META_SPLIT_SEED.into(), rc.split_seed.to_string());
    ck.meta.insert(META_SPLIT_RATIOS.into(), format_ratios(rc.split_ratios));
    ck.save(out.join(CHECKPOINT_FILE))?;
    Ok(PretrainOutcome { out_dir: out.clone(), rows })
}

/// Per-epoch means of the component losses.
fn epoch_means(rows: &[LossRow]) -> String {
    let mut s = String::from("epoch\tmlm\tclip\ttriplet\ttotal\n");
    let mut i = 0;
    while i < rows.len() {
        let e = rows[i].epoch;
        let group: Vec<&LossRow> = rows[i..].iter().take_while(|r| r.epoch == e).filter(|r| !r.skipped).collect();
        let span = rows[i..].iter().take_while(|r| r.epoch == e).count();
        let n = group.len().max(1) as f64;
        let mean = |f: fn(&LossRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
        let _ = writeln!(
            s,
            "{e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}",
            mean(|r| r.mlm),
            mean(|r| r.clip),
            mean(|r| r.triplet),
            mean(|r| r.total)
        );
        i += span;
    }
    s
}

#[derive(Args, Debug, Clone)]
pub struct FinetuneArgs {
    /// survival-nll | survival-cox | subtype | mutation | report
    #[arg(long)]
    pub task: Task,
    /// Pretraining checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep encoder and fusion parameters fixed; only the task head trains.
    #[arg(long)]
    pub freeze_fusion: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Patient pooling: multimodal | cls
    #[arg(long)]
    pub pool: Option<PoolKind>,
    /// Input modalities as letters, e.g. `hg` (h slide, g genes, t text).
    #[arg(long)]
    pub modalities: Option<String>,
    /// Defaults to the split stored with the pretraining checkpoint.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, value_name = "TRAIN,VAL,TEST")]
    pub split_ratios: Option<String>,
}

impl FinetuneArgs {
    pub fn new(task: Task, checkpoint: PathBuf, cohort: PathBuf, out: PathBuf) -> Self {
        FinetuneArgs {
            task,
            checkpoint,
            cohort,
            out,
            freeze_fusion: false,
            epochs: None,
            lr: None,
            batch_size: None,
            seed: None,
            pool: None,
            modalities: None,
            split_seed: None,
            split_ratios: None,
        }
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        let mut c = FinetuneConfig::new(self.task);
        c.freeze_fusion = self.freeze_fusion;
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.pool {
            c.pool = v;
        }
        if let Some(m) = &self.modalities {
            c.modalities = parse_modalities(m)?;
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn parse_modalities(s: &str) -> Result<[bool; 3]> {
    let mut keep = [false; 3];
    for ch in s.chars() {
        match ch {
            'h' => keep[0] = true,
            'g' => keep[1] = true,
            't' => keep[2] = true,
            _ => return Err(Error::Config(format!("unknown modality letter {ch:?} in {s:?} (h, g, t)"))),
        }
    }
    Ok(keep)
}

fn modalities_text(keep: [bool; 3]) -> String {
    "hgt".chars().zip(keep).filter(|(_, k)| *k).map(|(c, _)| c).collect()
}

fn pool_text(p: PoolKind) -> &'static str {
    match p {
        PoolKind::Multimodal => "multimodal",
        PoolKind::Cls => "cls",
    }
}

fn split_from(ck: &Checkpoint, cohort: &Cohort, seed: Option<u64>, ratios: Option<&str>) -> Result<(Split, u64, [f64; 3])> {
    let seed = match seed {
        Some(s) => s,
        None => ck.meta.get(META_SPLIT_SEED).map_or(Ok(0), |v| v.parse().map_err(|_| Error::Format("bad split seed".into())))?,
    };
    let ratios = match ratios.or(ck.meta.get(META_SPLIT_RATIOS).map(String::as_str)) {
        Some(r) => parse_ratios(r)?,
        None => DEFAULT_SPLIT_RATIOS,
    };
    Ok((split(&cohort.classes(), ratios, seed)?, seed, ratios))
}

#[derive(Debug)]
pub struct FinetuneRun {
    pub out_dir: PathBuf,
    pub model: AlterModel,
    pub metrics: alter_core::metrics::MetricsReport,
    pub epoch_loss: Vec<f64>,
}

/// Trains the task head on the train split and reports metrics on the
/// validation split.
pub fn cmd_finetune(args: &FinetuneArgs) -> Result<FinetuneRun> {
    let fc = args.finetune_config()?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cohort = load_cohort(&args.cohort)?;
    let mut model = AlterModel::from_checkpoint(&ck)?;
    check_compatible(&model.config, &cohort)?;
    let binner = binner_from_meta(&ck)?;
    let data = prepare(&cohort, &binner)?;
    let (sp, split_seed, ratios) = split_from(&ck, &cohort, args.split_seed, args.split_ratios.as_deref())?;
    let outcome = finetune(&mut model, &data, &sp.train, &fc)?;
    let mut metrics = evaluate(&model, &data, &sp.val, &fc, outcome.time_bins.as_ref())?;
    metrics.label("split", "val");

    let out = resolve_out_dir(&args.out);
    fs::create_dir_all(&out)?;
    let mut task_ck = model.to_checkpoint();
    let m = &mut task_ck.meta;
    m.insert(META_TASK.into(), fc.task.name().into());
    m.insert(META_POOL.into(), pool_text(fc.pool).into());
    m.insert(META_MODALITIES.into(), modalities_text(fc.modalities));
    m.insert(META_FREEZE.into(), fc.freeze_fusion.to_string());
    if let Some(b) = &outcome.time_bins {
        m.insert(META_TIME_BINS.into(), b.edges.iter().map(|e| format!("{e:?}")).collect::<Vec<_>>().join(","));
    }
    m.insert(META_BINNER.into(), binner_to_meta(&binner));
    m.insert(META_SPLIT_SEED.into(), split_seed.to_string());
    m.insert(META_SPLIT_RATIOS.into(), format_ratios(ratios));
    m.insert(META_SPLIT_TRAIN.into(), index_list(&sp.train));
    task_ck.save(out.join(TASK_CHECKPOINT_FILE))?;
    metrics.write(&out, METRICS_STEM)?;
    let mut loss = String::from("epoch\tloss\n");
    for (e, l) in outcome.epoch_loss.iter().enumerate() {
        let _ = writeln!(loss, "{e}\t{l:.17e}");
    }
    fs::write(out.join(EPOCH_LOSS_FILE), loss)?;
    fs::write(out.join(SPLIT_FILE), split_text(&sp))?;
    Ok(FinetuneRun { out_dir: out, model, metrics, epoch_loss: outcome.epoch_loss })
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Task checkpoint written by `finetune`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Deterministic evaluation of a task checkpoint on one split.
pub fn cmd_eval(args: &EvalArgs) -> Result<alter_core::metrics::MetricsReport> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let task: Task = meta(&ck, META_TASK)
        .map_err(|_| Error::Input(format!("{} is not a task checkpoint", args.checkpoint.display())))?
        .parse()?;
    let model = AlterModel::from_checkpoint(&ck)?;
    let cohort = load_cohort(&args.cohort)?;
    check_compatible(&model.config, &cohort)?;
    let binner = binner_from_meta(&ck)?;
    let data = prepare(&cohort, &binner)?;

    let (sp, _, _) = split_from(&ck, &cohort, None, None)?;
    let stored_train = parse_index_list(meta(&ck, META_SPLIT_TRAIN)?)?;
    let indices = sp.get(&args.split)?;
    let trained: std::collections::HashSet<usize> = stored_train.iter().copied().collect();
    if args.split != "train" && indices.iter().any(|i| trained.contains(i)) {
        return Err(Error::Verification(format!("{} split overlaps the training samples", args.split)));
    }
    if stored_train != sp.train {
        return Err(Error::Input("cohort does not reproduce the training split stored in the checkpoint".into()));
    }

    let mut fc = FinetuneConfig::new(task);
    fc.pool = meta(&ck, META_POOL)?.parse()?;
    fc.modalities = parse_modalities(meta(&ck, META_MODALITIES)?)?;
    let bins = match ck.meta.get(META_TIME_BINS) {
        Some(v) => Some(TimeBins {
            edges: v
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format("bad time bin edge in checkpoint".into()))?,
        }),
        None => None,
    };
    let mut report = evaluate(&model, &data, indices, &fc, bins.as_ref())?;
    report.label("split", args.split.clone());
    let out = resolve_out_dir(&args.out);
    fs::create_dir_all(&out)?;
    report.write(&out, METRICS_STEM)?;
    Ok(report)
}

#[derive(Args, Debug, Clone, Default)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negates every tape gradient; the check must then fail.
    #[arg(long, hide = true)]
    pub inject_wrong_sign: bool,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<SuiteReport> {
    let report = run_suite(args.seed, args.inject_wrong_sign)?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(report)
    } else {
        Err(Error::Verification("gradient check exceeded tolerance".into()))
    }
}

/// Saves an in-memory cohort and its manifest into `dir`, as `gen` does.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(COHORT_FILE);
    save_cohort(cohort, &path)?;
    fs::write(dir.join(MANIFEST_FILE), manifest(cohort))?;
    Ok(path)
}
