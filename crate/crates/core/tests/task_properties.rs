//! Head-level contracts and the learnability checks that need a short run.

use alter_core::data::{generate_cohort, Cohort, CohortSpec, Prepared};
use alter_core::fusion::{FusedState, ModalitySet};
use alter_core::model::prefix;
use alter_core::numerics::{param_grad_check, GradCheckOptions, Graph, Tensor, Var};
use alter_core::pretrain::objectives::clip_total;
use alter_core::pretrain::Pretrainer;
use alter_core::tasks::finetune::{evaluate, finetune, FinetuneConfig, Task};
use alter_core::tasks::PoolKind;
use alter_core::{AlterModel, ModelConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn model(c: &Cohort, width: usize, zero_init_residual: bool, seed: u64) -> AlterModel {
    let s = &c.spec;
    let cfg = ModelConfig {
        hidden_dim: width,
        heads: 2,
        encoder_depth: 1,
        n_blocks: 2,
        patch_dim: s.patch_dim,
        n_genes: s.n_genes,
        n_bins: 5,
        vocab_size: s.vocab_size,
        max_text_len: s.text_len,
        n_classes: s.classes,
        decoder_depth: 1,
        zero_init_residual,
        ..ModelConfig::default()
    };
    AlterModel::new(cfg, c.partition.clone(), 0.07, seed).unwrap()
}

fn prepared(c: &Cohort, train: &[usize]) -> Vec<Prepared> {
    c.prepare(&c.fit_binner(train, 5).unwrap()).unwrap()
}

#[test]
fn contrastive_total_is_symmetric_under_modality_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let per_sample: Vec<[Tensor; 3]> = (0..6).map(|_| [0, 1, 2].map(|_| random(&mut rng, 1, 5))).collect();
    let total = |order: [usize; 3]| {
        let mut g = Graph::new();
        let cls: Vec<[Option<Var>; 3]> = per_sample
            .iter()
            .enumerate()
            .map(|(i, s)| {
                // Sample 0 lacks its third slot so pair subsets differ.
                order.map(|k| if i == 0 && k == 2 { None } else { Some(g.constant(s[k].clone())) })
            })
            .collect();
        let it = g.constant(Tensor::scalar(1.0 / 0.3));
        let l = clip_total(&mut g, &cls, it).unwrap();
        g.value(l).item()
    };
    let base = total([0, 1, 2]);
    for order in [[1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0], [2, 0, 1]] {
        assert!((total(order) - base).abs() < 1e-12, "{order:?}");
    }
}

#[test]
fn multimodal_pooling_ignores_token_order_within_a_modality() {
    let c = generate_cohort(&CohortSpec { n: 1, n_patches: 9, patch_dim: 6, n_genes: 10, ..CohortSpec::default() }).unwrap();
    let m = model(&c, 8, false, 1);
    let lengths = [Some(4), Some(5), Some(3)];
    let set = ModalitySet::from_lengths(lengths).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = random(&mut rng, set.len(), 8);
    let pooled = |t: &Tensor| {
        let mut g = Graph::with_params(&m.store);
        let v = g.constant(t.clone());
        let fused = FusedState { tokens: v, set: set.clone(), real: vec![true; set.len()] };
        let out = m.heads.pool.forward(&mut g, &fused, PoolKind::Multimodal);
        g.value(out).data().to_vec()
    };
    let base = pooled(&tokens);
    // Reverse the non-CLS rows of every span.
    let mut order: Vec<usize> = (0..set.len()).collect();
    for mo in alter_core::Modality::ALL {
        let (s, l) = set.span(mo).unwrap();
        order[s + 1..s + l].reverse();
    }
    let data: Vec<f64> = order.iter().flat_map(|&r| tokens.row(r).to_vec()).collect();
    let permuted = pooled(&Tensor::new(&[set.len(), 8], data).unwrap());
    for (a, b) in base.iter().zip(&permuted) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn classification_heads_pass_tight_gradient_check() {
    let c = generate_cohort(&CohortSpec { n: 1, n_patches: 9, patch_dim: 6, n_genes: 10, ..CohortSpec::default() }).unwrap();
    let m = model(&c, 8, false, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for head in [&m.heads.subtype, &m.heads.mutation] {
        let x = random(&mut rng, 2, head.mlp.fc1.fan_in);
        let w = random(&mut rng, 2, head.classes);
        let name = m.store.name(head.mlp.fc1.weight).trim_end_matches("fc1.w").to_string();
        let report = param_grad_check(
            &m.store,
            |g| {
                let xv = g.constant(x.clone());
                let logits = head.forward(g, xv);
                let wv = g.constant(w.clone());
                let p = g.mul(logits, wv);
                Ok(g.sum(p))
            },
            &GradCheckOptions { prefixes: vec![name.clone()], ..GradCheckOptions::default() },
        )
        .unwrap();
        assert!(report.coords_checked > 100);
        assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
    }
    assert!(m.store.name(m.heads.subtype.mlp.fc1.weight).starts_with(prefix::HEADS));
}

#[test]
fn pretraining_loss_falls_over_the_first_epochs() {
    let mut falling = 0;
    let mut notes = Vec::new();
    for seed in 0..5 {
        let c = generate_cohort(&CohortSpec { n: 128, seed, ..CohortSpec::default() }).unwrap();
        let train: Vec<usize> = (0..c.len()).collect();
        let data = prepared(&c, &train);
        let tc = TrainConfig { epochs: 5, seed, ..TrainConfig::default() };
        let mut pt = Pretrainer::new(model(&c, 16, true, seed), tc, &data, train).unwrap();
        let rows = pt.run(|_| {}).unwrap();
        let means: Vec<f64> = (0..5)
            .map(|e| {
                let r: Vec<f64> = rows.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
                r.iter().sum::<f64>() / r.len() as f64
            })
            .collect();
        let ok = means.windows(2).all(|w| w[1] < w[0]);
        falling += usize::from(ok);
        notes.push(format!("seed {seed}: {means:.3?}"));
    }
    assert!(falling >= 4, "{}", notes.join("; "));
}

#[test]
fn decoder_reproduces_class_template_reports() {
    let c = generate_cohort(&CohortSpec { n: 576, report_levels: 0, ..CohortSpec::default() }).unwrap();
    let train: Vec<usize> = (0..512).collect();
    let test: Vec<usize> = (512..576).collect();
    let data = prepared(&c, &train);
    let mut m = model(&c, 16, true, 0);
    let cfg = FinetuneConfig { epochs: 15, lr: 3e-3, ..FinetuneConfig::new(Task::Report) };
    finetune(&mut m, &data, &train, &cfg).unwrap();
    let metrics = evaluate(&m, &data, &test, &cfg, None).unwrap();
    let exact = metrics.get("exact_match").unwrap();
    assert!(exact >= 0.9, "exact match {exact}");
}
