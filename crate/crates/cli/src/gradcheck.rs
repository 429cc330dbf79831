//! Central-difference verification of every differentiable component on a
//! small model with nonzero residual initialization.

use std::fmt::Write as _;

use alter_core::config::ModelConfig;
use alter_core::encoders::text::TokenSequence;
use alter_core::encoders::{FeatureBag, PathwayPartition};
use alter_core::fusion::Modality;
use alter_core::model::{prefix, AlterModel, SampleInput};
use alter_core::numerics::{param_grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use alter_core::pretrain::masking::{mask_genes, mask_text, mask_wsi};
use alter_core::pretrain::objectives::{
    clip_total, gene_mlm_loss, inverse_temperature, slide_mlm_loss, text_mlm_loss, triplet_loss,
};
use alter_core::tasks::survival::{cox_gradient_check, cox_loss, nll_survival_loss, SurvivalLabel};
use alter_core::tasks::{cross_entropy, PoolKind};
use alter_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const TOLERANCE: f64 = 1e-4;
pub const COX_TOLERANCE: f64 = 1e-8;
pub const COX_INSTANCES: usize = 50;
const COX_PATIENTS: usize = 10;
const COORDS_PER_PARAM: usize = 4;

#[derive(Clone, Debug)]
pub struct Component {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub components: Vec<Component>,
    /// Max absolute deviation between tape and closed-form Cox gradients.
    pub cox_closed_form: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.report.max_rel_error < TOLERANCE) && self.cox_closed_form <= COX_TOLERANCE
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("component\tmax_rel_error\tcoords\tstatus\n");
        for c in &self.components {
            let ok = c.report.max_rel_error < TOLERANCE;
            let _ = writeln!(
                s,
                "{}\t{:.3e}\t{}\t{}",
                c.name,
                c.report.max_rel_error,
                c.report.coords_checked,
                if ok { "ok" } else { "FAIL" }
            );
        }
        let ok = self.cox_closed_form <= COX_TOLERANCE;
        let _ = writeln!(
            s,
            "\ncox_closed_form\tmax_abs_dev {:.3e} over {COX_INSTANCES} instances\t{}",
            self.cox_closed_form,
            if ok { "ok" } else { "FAIL" }
        );
        s
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        heads: 2,
        encoder_depth: 1,
        n_blocks: 2,
        patch_dim: 5,
        n_genes: 8,
        n_bins: 5,
        vocab_size: 24,
        max_text_len: 7,
        region_a: 2,
        region_b: 2,
        type_embeddings: true,
        // Zero-initialized residual branches would hide half the gradients.
        zero_init_residual: false,
        n_classes: 3,
        n_time_bins: 4,
        decoder_depth: 1,
    }
}

struct Sample {
    bag: FeatureBag,
    bins: Vec<usize>,
    text: TokenSequence,
    report: Vec<usize>,
}

impl Sample {
    fn input(&self, keep: [bool; 3]) -> SampleInput<'_> {
        SampleInput {
            slide: Some(&self.bag).filter(|_| keep[0]),
            slide_mask: None,
            gene_bins: Some(self.bins.clone()).filter(|_| keep[1]),
            text: Some(self.text.clone()).filter(|_| keep[2]),
        }
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape matches data")
}

fn random_sample(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Result<Sample> {
    let bag = FeatureBag::new(normal_tensor(rng, &[9, c.patch_dim]))?;
    let bins = (0..c.n_genes).map(|_| rng.random_range(0..c.n_bins)).collect();
    let words: Vec<usize> = (0..4).map(|_| rng.random_range(4..c.vocab_size)).collect();
    let text = TokenSequence::from_words(&words, c.max_text_len)?;
    Ok(Sample { bag, bins, text, report: words })
}

/// `Σ W ⊙ x` with a fixed random `W`, a generic scalar readout of a tensor.
fn readout(g: &mut Graph<'_>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = normal_tensor(&mut rng, g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

/// Same value, negated gradient: exercises the verifier's failure path.
fn negate_gradient(g: &mut Graph<'_>, y: Var) -> Var {
    let v = g.value(y).item();
    let twice = g.scalar(2.0 * v);
    g.sub(twice, y)
}

fn subset_name(keep: [bool; 3]) -> String {
    Modality::ALL.iter().filter(|m| keep[m.index()]).map(|m| m.letter()).collect()
}

/// Runs the full suite. `wrong_sign` flips the tape gradient of every
/// component while leaving loss values untouched.
pub fn run_suite(seed: u64, wrong_sign: bool) -> Result<SuiteReport> {
    let cfg = small_config();
    let partition = PathwayPartition::contiguous(cfg.n_genes, 3)?;
    let model = AlterModel::new(cfg.clone(), partition, 0.5, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let samples: Vec<Sample> = (0..4).map(|_| random_sample(&mut rng, &cfg)).collect::<Result<_>>()?;
    let opts = |prefixes: &[&str]| GradCheckOptions {
        prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
        max_coords_per_param: Some(COORDS_PER_PARAM),
        seed,
        ..GradCheckOptions::default()
    };
    let mut components = Vec::new();
    let mut check = |name: String, prefixes: &[&str], f: &dyn Fn(&mut Graph<'_>) -> Result<Var>| -> Result<()> {
        let loss = |g: &mut Graph<'_>| -> Result<Var> {
            let y = f(g)?;
            Ok(if wrong_sign { negate_gradient(g, y) } else { y })
        };
        let report = param_grad_check(&model.store, loss, &opts(prefixes))?;
        log::info!("{name}: {:.3e}", report.max_rel_error);
        components.push(Component { name, report });
        Ok(())
    };
    let s0 = &samples[0];

    for m in Modality::ALL {
        let mut keep = [false; 3];
        keep[m.index()] = true;
        check(format!("encoder.{m}"), &[prefix::encoder(m)], &|g| {
            let out = model.forward(g, &s0.input(keep), false)?;
            let cls = out.encoder_cls[m.index()].expect("present modality has a CLS");
            Ok(readout(g, cls, 11))
        })?;
    }

    for mask in 1u8..8 {
        let keep = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
        let mut prefixes = vec![prefix::FUSION];
        prefixes.extend(Modality::ALL.iter().filter(|m| keep[m.index()]).map(|&m| prefix::encoder(m)));
        check(format!("fusion.{}", subset_name(keep)), &prefixes, &|g| {
            let out = model.forward(g, &s0.input(keep), true)?;
            let fused = out.fused.expect("fusion requested");
            Ok(readout(g, fused.tokens, 12 + u64::from(mask)))
        })?;
    }

    let layout = model.region_layout(s0.bag.n_patches())?;
    let slide_mask = mask_wsi(&s0.bag, &layout, 0.5, &mut ChaCha8Rng::seed_from_u64(seed))?;
    check("loss.mlm.slide".into(), &[prefix::MLM, prefix::FUSION, prefix::SLIDE], &|g| {
        let mut input = s0.input([true; 3]);
        input.slide_mask = Some(slide_mask.patch_mask.clone());
        let out = model.forward(g, &input, true)?;
        slide_mlm_loss(g, &model, out.fused.as_ref().expect("fused"), &slide_mask)
    })?;
    let gene_mask = mask_genes(&s0.bins, model.pathways(), model.genes.mask_bin(), 0.5, &mut ChaCha8Rng::seed_from_u64(seed))?;
    check("loss.mlm.genes".into(), &[prefix::MLM, prefix::FUSION, prefix::GENES], &|g| {
        let mut input = s0.input([true; 3]);
        input.gene_bins = Some(gene_mask.masked_bins.clone());
        let out = model.forward(g, &input, true)?;
        gene_mlm_loss(g, &model, out.fused.as_ref().expect("fused"), &gene_mask)
    })?;
    let text_mask = mask_text(&s0.text, 0.5, cfg.vocab_size, &mut ChaCha8Rng::seed_from_u64(seed))?;
    check("loss.mlm.text".into(), &[prefix::MLM, prefix::FUSION, prefix::TEXT], &|g| {
        let mut input = s0.input([true; 3]);
        input.text = Some(text_mask.masked.clone());
        let out = model.forward(g, &input, true)?;
        text_mlm_loss(g, &model, out.fused.as_ref().expect("fused"), &text_mask)
    })?;

    // One sample lacks text so the pair losses see a partial batch.
    let keeps = [[true; 3], [true; 3], [true, true, false], [true; 3]];
    check("loss.clip".into(), &[prefix::CLIP, prefix::SLIDE, prefix::GENES, prefix::TEXT], &|g| {
        let mut cls = Vec::new();
        for (s, &keep) in samples.iter().zip(&keeps) {
            cls.push(model.forward(g, &s.input(keep), false)?.encoder_cls);
        }
        let inv_tau = inverse_temperature(g, model.log_tau);
        Ok(clip_total(g, &cls, inv_tau).expect("every pair has two samples"))
    })?;

    let fused_rows = |g: &mut Graph<'_>, pool: Option<PoolKind>| -> Result<Var> {
        let mut rows = Vec::new();
        for (s, &keep) in samples.iter().zip(&keeps) {
            let out = model.forward(g, &s.input(keep), true)?;
            let fused = out.fused.expect("fused");
            rows.push(match pool {
                Some(kind) => model.heads.pool.forward(g, &fused, kind),
                None => model.sample_embedding(g, &fused),
            });
        }
        Ok(g.concat_rows(&rows))
    };
    check("loss.triplet".into(), &[prefix::FUSION], &|g| {
        let emb = fused_rows(g, None)?;
        triplet_loss(g, emb, &[(0, 1, 2), (1, 0, 3), (2, 3, 0), (3, 2, 1)], 1.0)
    })?;

    let labels = [
        SurvivalLabel { time: 1.0, censored: false },
        SurvivalLabel { time: 2.5, censored: true },
        SurvivalLabel { time: 0.7, censored: false },
        SurvivalLabel { time: 3.1, censored: false },
    ];
    check("loss.survival_cox".into(), &[prefix::HEADS], &|g| {
        let p = fused_rows(g, Some(PoolKind::Multimodal))?;
        let risk = model.heads.cox.forward(g, p);
        cox_loss(g, risk, &labels)
    })?;
    check("loss.survival_nll".into(), &[prefix::HEADS], &|g| {
        let p = fused_rows(g, Some(PoolKind::Multimodal))?;
        let logits = model.heads.hazard.forward(g, p);
        nll_survival_loss(g, logits, &[1, 0, 3, 2], &[false, true, false, true])
    })?;
    check("head.pool.cls".into(), &[prefix::HEADS], &|g| {
        let p = fused_rows(g, Some(PoolKind::Cls))?;
        Ok(readout(g, p, 21))
    })?;
    check("head.subtype".into(), &[prefix::HEADS], &|g| {
        let p = fused_rows(g, Some(PoolKind::Multimodal))?;
        let logits = model.heads.subtype.forward(g, p);
        Ok(cross_entropy(g, logits, &[0, 2, 1, 2]))
    })?;
    check("head.mutation".into(), &[prefix::HEADS], &|g| {
        let p = fused_rows(g, Some(PoolKind::Multimodal))?;
        let logits = model.heads.mutation.forward(g, p);
        Ok(cross_entropy(g, logits, &[1, 0, 0, 1]))
    })?;
    check("head.report_decoder".into(), &[prefix::DECODER], &|g| {
        let out = model.forward(g, &s0.input([true, false, false]), true)?;
        let fused = out.fused.expect("fused");
        let memory = fused.span_tokens(g, Modality::Slide).expect("slide present");
        model.decoder.teacher_forced_loss(g, memory, &s0.report)
    })?;

    Ok(SuiteReport { components, cox_closed_form: cox_closed_form_deviation(seed)? })
}

/// Worst deviation over random instances of embeddings, coefficients and
/// labels (ties and censoring included).
pub fn cox_closed_form_deviation(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0c5);
    let mut worst = 0.0f64;
    for _ in 0..COX_INSTANCES {
        let p = rng.random_range(1..6);
        let x = normal_tensor(&mut rng, &[COX_PATIENTS, p]);
        let theta: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut labels: Vec<SurvivalLabel> = (0..COX_PATIENTS)
            .map(|_| SurvivalLabel { time: f64::from(rng.random_range(1..8u8)), censored: rng.random_bool(0.3) })
            .collect();
        labels[0].censored = false;
        worst = worst.max(cox_gradient_check(&x, &theta, &labels)?);
    }
    Ok(worst)
}
