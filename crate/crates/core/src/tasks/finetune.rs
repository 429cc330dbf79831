//! Fine-tuning and evaluation of the downstream heads.

use rand::seq::SliceRandom;

use super::heads::PoolKind;
use super::survival::{bin_times, cox_loss, hazard_risk, nll_survival_loss, SurvivalLabel, TimeBins};
use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::fusion::Modality;
use crate::metrics::{self, MetricsReport};
use crate::model::{prefix, AlterModel};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Var};
use crate::pretrain::trainer::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    SurvivalNll,
    SurvivalCox,
    Subtype,
    Mutation,
    Report,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::SurvivalNll, Task::SurvivalCox, Task::Subtype, Task::Mutation, Task::Report];

    pub fn name(self) -> &'static str {
        match self {
            Task::SurvivalNll => "survival-nll",
            Task::SurvivalCox => "survival-cox",
            Task::Subtype => "subtype",
            Task::Mutation => "mutation",
            Task::Report => "report",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::input(format!("unknown task {s:?} (survival-nll|survival-cox|subtype|mutation|report)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Encoders and fusion blocks receive no updates.
    pub freeze_fusion: bool,
    pub pool: PoolKind,
    /// Input modalities (slide, genes, text) fed to the model.
    pub modalities: [bool; 3],
}

impl FinetuneConfig {
    pub fn new(task: Task) -> Self {
        FinetuneConfig {
            task,
            epochs: 20,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            freeze_fusion: false,
            pool: PoolKind::Multimodal,
            modalities: if task == Task::Report { [true, false, false] } else { [true; 3] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::config("fine-tuning needs positive epochs, batch size and learning rate"));
        }
        let n = self.modalities.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::config("no input modality selected"));
        }
        let survival = matches!(self.task, Task::SurvivalNll | Task::SurvivalCox);
        if survival && self.pool == PoolKind::Multimodal && n < 2 {
            return Err(Error::config("the multimodal survival head needs at least two input modalities"));
        }
        if self.task == Task::Report && !self.modalities[0] {
            return Err(Error::config("report generation reads slide tokens; enable the slide modality"));
        }
        Ok(())
    }

    /// Whether a sample can take part in this task.
    fn usable(&self, s: &Prepared) -> bool {
        let p = s.present();
        match self.task {
            Task::Report => p[0] && !s.report.is_empty(),
            _ => (0..3).any(|m| p[m] && self.modalities[m]),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FinetuneOutcome {
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub time_bins: Option<TimeBins>,
}

/// Parameter fingerprint of the encoders and fusion blocks.
pub fn backbone_fingerprint(model: &AlterModel) -> u32 {
    model.store.fingerprint(&[prefix::SLIDE, prefix::GENES, prefix::TEXT, prefix::FUSION])
}

fn set_backbone_frozen(model: &mut AlterModel, frozen: bool) {
    for p in [prefix::SLIDE, prefix::GENES, prefix::TEXT, prefix::FUSION] {
        model.store.freeze_prefix(p, frozen);
    }
}

struct Forward {
    patient: Option<Var>,
    memory: Option<Var>,
}

fn forward(g: &mut Graph<'_>, model: &AlterModel, s: &Prepared, cfg: &FinetuneConfig) -> Result<Forward> {
    let input = s.input(cfg.modalities);
    let out = model.forward(g, &input, true)?;
    let fused = out.fused.expect("fused output requested");
    if cfg.task == Task::Report {
        return Ok(Forward { patient: None, memory: fused.span_tokens(g, Modality::Slide) });
    }
    Ok(Forward { patient: Some(model.heads.pool.forward(g, &fused, cfg.pool)), memory: None })
}

fn batch_loss(g: &mut Graph<'_>, model: &AlterModel, data: &[Prepared], batch: &[usize], cfg: &FinetuneConfig, bins: Option<&TimeBins>) -> Result<Option<Var>> {
    let mut patients = Vec::new();
    let mut report_terms = Vec::new();
    for &i in batch {
        let f = forward(g, model, &data[i], cfg)?;
        if let Some(mem) = f.memory {
            report_terms.push(model.decoder.teacher_forced_loss(g, mem, &data[i].report)?);
        }
        patients.extend(f.patient);
    }
    if cfg.task == Task::Report {
        let (&first, rest) = match report_terms.split_first() {
            Some(x) => x,
            None => return Ok(None),
        };
        let sum = rest.iter().fold(first, |a, &b| g.add(a, b));
        return Ok(Some(g.scale(sum, 1.0 / report_terms.len() as f64)));
    }
    let p = g.concat_rows(&patients);
    let labels: Vec<SurvivalLabel> = batch.iter().map(|&i| data[i].survival).collect();
    Ok(Some(match cfg.task {
        Task::SurvivalCox => {
            if labels.iter().all(|l| l.censored) {
                return Ok(None);
            }
            let risk = model.heads.cox.forward(g, p);
            cox_loss(g, risk, &labels)?
        }
        Task::SurvivalNll => {
            let bins = bins.expect("time bins fitted before training");
            let y: Vec<usize> = labels.iter().map(|l| bins.bin(l.time)).collect();
            let c: Vec<bool> = labels.iter().map(|l| l.censored).collect();
            let logits = model.heads.hazard.forward(g, p);
            nll_survival_loss(g, logits, &y, &c)?
        }
        Task::Subtype => {
            let logits = model.heads.subtype.forward(g, p);
            super::cross_entropy(g, logits, &batch.iter().map(|&i| data[i].class).collect::<Vec<_>>())
        }
        Task::Mutation => {
            let logits = model.heads.mutation.forward(g, p);
            super::cross_entropy(g, logits, &batch.iter().map(|&i| usize::from(data[i].mutation)).collect::<Vec<_>>())
        }
        Task::Report => unreachable!(),
    }))
}

/// Trains the task head (and, unless frozen, the backbone) on `train`.
/// With `freeze_fusion` the backbone fingerprint is checked unchanged.
pub fn finetune(model: &mut AlterModel, data: &[Prepared], train: &[usize], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let train: Vec<usize> = train.iter().copied().filter(|&i| cfg.usable(&data[i])).collect();
    if train.is_empty() {
        return Err(Error::input(format!("no training sample usable for task {}", cfg.task)));
    }
    let time_bins = match cfg.task {
        Task::SurvivalNll => {
            let labels: Vec<SurvivalLabel> = train.iter().map(|&i| data[i].survival).collect();
            Some(bin_times(&labels, model.config.n_time_bins)?)
        }
        _ => None,
    };
    let before = backbone_fingerprint(model);
    set_backbone_frozen(model, cfg.freeze_fusion);
    let mut adam = AdamState::new(&model.store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut outcome = FinetuneOutcome { epoch_loss: Vec::new(), time_bins };
    let result = (|| -> Result<()> {
        for epoch in 0..cfg.epochs {
            let mut order = train.clone();
            order.shuffle(&mut stream_rng(cfg.seed, 5, epoch as u64, 0));
            let (mut sum, mut count) = (0.0, 0);
            for batch in order.chunks(cfg.batch_size) {
                let mut g = Graph::with_params(&model.store);
                let Some(loss) = batch_loss(&mut g, model, data, batch, cfg, outcome.time_bins.as_ref())? else {
                    log::warn!("{} epoch {epoch}: batch without usable labels skipped", cfg.task);
                    continue;
                };
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{} loss", cfg.task)));
                }
                sum += v;
                count += 1;
                let grads = g.backward(loss);
                let pg = g.param_grads(&grads);
                drop(g);
                adam_step(&mut model.store, &pg, &mut adam)?;
            }
            outcome.epoch_loss.push(if count > 0 { sum / count as f64 } else { f64::NAN });
        }
        Ok(())
    })();
    set_backbone_frozen(model, false);
    result?;
    if cfg.freeze_fusion && backbone_fingerprint(model) != before {
        return Err(Error::Verification("frozen backbone parameters changed during fine-tuning".into()));
    }
    Ok(outcome)
}

/// Per-sample task predictions on `indices`, plus task metrics.
pub fn evaluate(model: &AlterModel, data: &[Prepared], indices: &[usize], cfg: &FinetuneConfig, bins: Option<&TimeBins>) -> Result<MetricsReport> {
    cfg.validate()?;
    let idx: Vec<usize> = indices.iter().copied().filter(|&i| cfg.usable(&data[i])).collect();
    if idx.is_empty() {
        return Err(Error::input(format!("no evaluation sample usable for task {}", cfg.task)));
    }
    let mut report = MetricsReport::default();
    report.label("task", cfg.task.name());
    report.set("n", idx.len() as f64);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut generated: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for &i in &idx {
        let mut g = Graph::with_params(&model.store);
        let f = forward(&mut g, model, &data[i], cfg)?;
        match cfg.task {
            Task::Report => {
                let mem = g.value(f.memory.expect("slide present")).clone();
                drop(g);
                let hyp = model.decoder.generate(&model.store, &mem, model.config.max_text_len - 1)?;
                generated.push((hyp, data[i].report.clone()));
            }
            _ => {
                let p = f.patient.expect("patient embedding");
                let out = match cfg.task {
                    Task::SurvivalCox => model.heads.cox.forward(&mut g, p),
                    Task::SurvivalNll => model.heads.hazard.forward(&mut g, p),
                    Task::Subtype => model.heads.subtype.forward(&mut g, p),
                    Task::Mutation => model.heads.mutation.forward(&mut g, p),
                    Task::Report => unreachable!(),
                };
                rows.push(g.value(out).data().to_vec());
            }
        }
    }
    let labels: Vec<SurvivalLabel> = idx.iter().map(|&i| data[i].survival).collect();
    match cfg.task {
        Task::SurvivalCox => {
            let risk: Vec<f64> = rows.iter().map(|r| r[0]).collect();
            report.set("c_index", metrics::concordance_index(&risk, &labels)?);
        }
        Task::SurvivalNll => {
            let risk: Vec<f64> = rows.iter().map(|r| hazard_risk(r)).collect();
            report.set("c_index", metrics::concordance_index(&risk, &labels)?);
            if let Some(b) = bins {
                let mut g = Graph::new();
                let x = g.constant(crate::numerics::Tensor::from_rows(&rows)?);
                let y: Vec<usize> = labels.iter().map(|l| b.bin(l.time)).collect();
                let c: Vec<bool> = labels.iter().map(|l| l.censored).collect();
                let l = nll_survival_loss(&mut g, x, &y, &c)?;
                report.set("nll", g.value(l).item());
            }
        }
        Task::Subtype | Task::Mutation => {
            let (truth, k): (Vec<usize>, usize) = if cfg.task == Task::Subtype {
                (idx.iter().map(|&i| data[i].class).collect(), model.config.n_classes)
            } else {
                (idx.iter().map(|&i| usize::from(data[i].mutation)).collect(), 2)
            };
            let preds: Vec<usize> = rows.iter().map(|r| super::decoder::argmax(r)).collect();
            report.set("accuracy", metrics::accuracy(&preds, &truth));
            report.set("f1_macro", metrics::f1_macro(&preds, &truth, k)?);
            match metrics::auc_ovr_macro(&rows, &truth, k) {
                Ok(a) => {
                    report.set("auc", a);
                }
                Err(e) => log::warn!("AUC undefined on this split: {e}"),
            }
        }
        Task::Report => {
            for n in 1..=4 {
                report.set(&format!("bleu_{n}"), metrics::bleu_corpus(&generated, n));
            }
            let rouge = generated.iter().map(|(h, r)| metrics::rouge_l(h, r)).sum::<f64>() / generated.len() as f64;
            report.set("rouge_l", rouge);
            let exact = generated.iter().filter(|(h, r)| h == r).count() as f64 / generated.len() as f64;
            report.set("exact_match", exact);
        }
    }
    Ok(report)
}
