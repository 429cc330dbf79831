//! The pretraining loop.
//!
//! Every random choice is drawn from a stream keyed by (seed, purpose,
//! epoch or window, batch, sample), so a run restored from a checkpoint at
//! any step boundary continues bit-identically.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::masking::{mask_genes, mask_text, mask_wsi, GeneMask, SlideMask, TextMask};
use super::objectives::{
    clip_total, gene_mlm_loss, inverse_temperature, mine_triplets, slide_mlm_loss, text_mlm_loss, total_loss, triplet_loss,
};
use crate::config::TrainConfig;
use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::fusion::Modality;
use crate::model::AlterModel;
use crate::numerics::{adam_step, AdamConfig, AdamState, Checkpoint, Graph, Tensor, Var};

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Shuffle = 1,
    Schedule = 2,
    Mask = 3,
    Triplet = 4,
}

pub(crate) fn stream_rng(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 56) ^ (a << 28) ^ b);
    rng
}

fn rng_for(seed: u64, s: Stream, a: usize, b: usize) -> ChaCha8Rng {
    stream_rng(seed, s as u64, a as u64, b as u64)
}

/// One optimizer step's losses. Raw components are logged next to the
/// weighted total so a zero weight still shows the unweighted value.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub batch: usize,
    pub mlm_modality: Modality,
    pub mlm: f64,
    pub clip: f64,
    pub triplet: f64,
    pub weighted_mlm: f64,
    pub weighted_clip: f64,
    pub total: f64,
    pub skipped: bool,
}

impl LossRow {
    pub const HEADER: &'static str = "epoch\tbatch\tmlm_modality\tmlm\tclip\ttriplet\tweighted_mlm\tweighted_clip\ttotal\tskipped";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{}",
            self.epoch,
            self.batch,
            self.mlm_modality,
            self.mlm,
            self.clip,
            self.triplet,
            self.weighted_mlm,
            self.weighted_clip,
            self.total,
            u8::from(self.skipped)
        )
    }
}

enum MaskPlan {
    Slide(SlideMask),
    Genes(GeneMask),
    Text(TextMask),
}

pub struct Pretrainer<'d> {
    pub model: AlterModel,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    data: &'d [Prepared],
    indices: Vec<usize>,
    /// Modalities present in at least one training sample.
    available: Vec<Modality>,
    pub epoch: usize,
    pub batch: usize,
}

const META_EPOCH: &str = "pretrain.epoch";
const META_BATCH: &str = "pretrain.batch";
const META_STEP: &str = "adam.step";

impl<'d> Pretrainer<'d> {
    pub fn new(model: AlterModel, cfg: TrainConfig, data: &'d [Prepared], indices: Vec<usize>) -> Result<Self> {
        cfg.validate()?;
        if indices.is_empty() {
            return Err(Error::input("pretraining needs at least one sample"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::input(format!("sample index {i} outside a cohort of {}", data.len())));
        }
        let available = Modality::ALL
            .into_iter()
            .filter(|m| indices.iter().any(|&i| data[i].present()[m.index()]))
            .collect();
        let adam = AdamState::new(
            &model.store,
            AdamConfig { lr: cfg.lr, max_grad_norm: cfg.max_grad_norm, ..AdamConfig::default() },
        );
        Ok(Pretrainer { model, adam, cfg, data, indices, available, epoch: 0, batch: 0 })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len().div_ceil(self.cfg.batch_size)
    }

    /// The masked-modeling modality for an epoch: drawn uniformly among the
    /// available modalities once per `mlm_switch_period` epochs.
    pub fn mlm_modality(&self, epoch: usize) -> Modality {
        let window = epoch / self.cfg.mlm_switch_period;
        let mut rng = rng_for(self.cfg.seed, Stream::Schedule, window, 0);
        self.available[rng.random_range(0..self.available.len())]
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order = self.indices.clone();
        order.shuffle(&mut rng_for(self.cfg.seed, Stream::Shuffle, epoch, 0));
        order
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Runs the next optimizer step and advances the position.
    pub fn step(&mut self) -> Result<LossRow> {
        let order = self.epoch_order(self.epoch);
        let bs = self.cfg.batch_size;
        let batch: Vec<usize> = order[self.batch * bs..((self.batch + 1) * bs).min(order.len())].to_vec();
        let row = self.train_batch(&batch)?;
        self.batch += 1;
        if self.batch == self.batches_per_epoch() {
            self.batch = 0;
            self.epoch += 1;
        }
        Ok(row)
    }

    /// Runs steps until `cfg.epochs` epochs are complete.
    pub fn run(&mut self, mut on_row: impl FnMut(&LossRow)) -> Result<Vec<LossRow>> {
        let mut rows = Vec::new();
        while !self.done() {
            let row = self.step()?;
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    fn plan(&self, modality: Modality, sample: &Prepared, slot: usize) -> Result<Option<MaskPlan>> {
        let mut rng = rng_for(self.cfg.seed, Stream::Mask, self.epoch * self.batches_per_epoch() + self.batch, slot);
        let ratio = self.cfg.mask_ratio;
        Ok(match modality {
            Modality::Slide => match &sample.bag {
                Some(bag) => {
                    let layout = self.model.region_layout(bag.n_patches())?;
                    Some(MaskPlan::Slide(mask_wsi(bag, &layout, ratio, &mut rng)?))
                }
                None => None,
            },
            Modality::Genes => match &sample.bins {
                Some(bins) => Some(MaskPlan::Genes(mask_genes(
                    bins,
                    self.model.pathways(),
                    self.model.genes.mask_bin(),
                    ratio,
                    &mut rng,
                )?)),
                None => None,
            },
            Modality::Text => match &sample.text {
                Some(seq) if seq.n_real() > 1 => {
                    Some(MaskPlan::Text(mask_text(seq, ratio, self.model.config.vocab_size, &mut rng)?))
                }
                _ => None,
            },
        })
    }

    fn train_batch(&mut self, batch: &[usize]) -> Result<LossRow> {
        let modality = self.mlm_modality(self.epoch);
        let plans: Vec<Option<MaskPlan>> =
            batch.iter().enumerate().map(|(slot, &i)| self.plan(modality, &self.data[i], slot)).collect::<Result<_>>()?;
        let classes: Vec<usize> = batch.iter().map(|&i| self.data[i].class).collect();
        let triplets = mine_triplets(&classes, self.cfg.max_triplets, &mut rng_for(self.cfg.seed, Stream::Triplet, self.epoch, self.batch));

        let model = &self.model;
        let mut g = Graph::with_params(&model.store);
        let mut cls = Vec::with_capacity(batch.len());
        let mut embeddings = Vec::with_capacity(batch.len());
        let mut mlm_terms = Vec::new();
        for (&i, plan) in batch.iter().zip(&plans) {
            let s = &self.data[i];
            let mut input = s.full_input();
            match plan {
                Some(MaskPlan::Slide(m)) => input.slide_mask = Some(m.patch_mask.clone()),
                Some(MaskPlan::Genes(m)) => input.gene_bins = Some(m.masked_bins.clone()),
                Some(MaskPlan::Text(m)) => input.text = Some(m.masked.clone()),
                None => {}
            }
            let out = model.forward(&mut g, &input, true)?;
            let fused = out.fused.expect("fused output requested");
            cls.push(out.encoder_cls);
            embeddings.push(model.sample_embedding(&mut g, &fused));
            let term = match plan {
                Some(MaskPlan::Slide(m)) => Some(slide_mlm_loss(&mut g, model, &fused, m)?),
                Some(MaskPlan::Genes(m)) => Some(gene_mlm_loss(&mut g, model, &fused, m)?),
                Some(MaskPlan::Text(m)) => Some(text_mlm_loss(&mut g, model, &fused, m)?),
                None => None,
            };
            mlm_terms.extend(term);
        }
        let mlm = mean_of(&mut g, &mlm_terms);
        let inv_tau = inverse_temperature(&mut g, model.log_tau);
        let clip = clip_total(&mut g, &cls, inv_tau);
        let triplet = if triplets.is_empty() {
            None
        } else {
            let emb = g.concat_rows(&embeddings);
            Some(triplet_loss(&mut g, emb, &triplets, self.cfg.margin)?)
        };
        let (alpha, beta) = (self.cfg.alpha, self.cfg.beta);
        let value = |g: &Graph<'_>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let mut row = LossRow {
            epoch: self.epoch,
            batch: self.batch,
            mlm_modality: modality,
            mlm: value(&g, mlm),
            clip: value(&g, clip),
            triplet: value(&g, triplet),
            weighted_mlm: 0.0,
            weighted_clip: 0.0,
            total: 0.0,
            skipped: false,
        };
        row.weighted_mlm = alpha * row.mlm;
        row.weighted_clip = beta * row.clip;
        let Some(total) = total_loss(&mut g, mlm, clip, triplet, alpha, beta) else {
            log::warn!("epoch {} batch {}: no pair, triplet or maskable token; batch skipped", self.epoch, self.batch);
            row.skipped = true;
            return Ok(row);
        };
        row.total = g.value(total).item();
        if !row.total.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at epoch {} batch {}", self.epoch, self.batch)));
        }
        let grads = g.backward(total);
        let pg = g.param_grads(&grads);
        drop(g);
        adam_step(&mut self.model.store, &pg, &mut self.adam)?;
        Ok(row)
    }

    /// Model parameters, Adam moments and the loop position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        for (id, name, _) in self.model.store.iter() {
            ck.push(format!("adam.m.{name}"), self.adam.m[id.index()].clone());
            ck.push(format!("adam.v.{name}"), self.adam.v[id.index()].clone());
        }
        ck.meta.insert(META_STEP.into(), self.adam.step.to_string());
        ck.meta.insert(META_EPOCH.into(), self.epoch.to_string());
        ck.meta.insert(META_BATCH.into(), self.batch.to_string());
        ck
    }

    /// Restores parameters, optimizer moments and position from a
    /// checkpoint written by [`Pretrainer::checkpoint`].
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore_into(&mut self.model.store)?;
        let meta = |k: &str| -> Result<usize> {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad {k} in checkpoint")))
        };
        self.epoch = meta(META_EPOCH)?;
        self.batch = meta(META_BATCH)?;
        self.adam.step = meta(META_STEP)? as u64;
        let names: Vec<(usize, String)> = self.model.store.iter().map(|(id, n, _)| (id.index(), n.to_string())).collect();
        for (i, name) in names {
            let get = |k: String| -> Result<Tensor> {
                ck.get(&k).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer state {k}")))
            };
            self.adam.m[i] = get(format!("adam.m.{name}"))?;
            self.adam.v[i] = get(format!("adam.v.{name}"))?;
        }
        Ok(())
    }
}

fn mean_of(g: &mut Graph<'_>, terms: &[Var]) -> Option<Var> {
    let (&first, rest) = terms.split_first()?;
    let sum = rest.iter().fold(first, |acc, &v| g.add(acc, v));
    Some(g.scale(sum, 1.0 / terms.len() as f64))
}
