//! Acceptance suite. Each criterion prints one PASS/FAIL line; the binary
//! exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use alter_cli::commands::{
    cmd_finetune, cmd_pretrain, write_cohort, FinetuneArgs, PretrainArgs, CHECKPOINT_FILE, TASK_CHECKPOINT_FILE,
};
use alter_cli::gradcheck::{run_suite, COX_TOLERANCE, TOLERANCE};
use alter_core::config::{ModelConfig, TrainConfig};
use alter_core::data::{generate_cohort, CohortSpec, Prepared};
use alter_core::encoders::text::TokenSequence;
use alter_core::encoders::{region_aggregate, FeatureBag, PathwayPartition, RegionLayout};
use alter_core::fusion::Modality;
use alter_core::metrics::{auc_roc, bleu_corpus, bleu_sentence, concordance_index, rouge_l};
use alter_core::model::{prefix, AlterModel};
use alter_core::numerics::{Checkpoint, Graph, Tensor};
use alter_core::pretrain::objectives::{clip_pair_loss, triplet_loss};
use alter_core::pretrain::Pretrainer;
use alter_core::tasks::finetune::{evaluate, finetune, FinetuneConfig, Task};
use alter_core::tasks::probe::{LinearProbe, ProbeOptions};
use alter_core::tasks::survival::{cox_loss_value, nll_survival_loss, SurvivalLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const TRAIN_N: usize = 512;
const HELD_OUT_N: usize = 128;
const RETRIEVAL_BATCH: usize = 32;
const PRETRAIN_EPOCHS: usize = 30;
const ALIGNMENT_SEEDS: u64 = 5;
const SURVIVAL_SEEDS: u64 = 3;
const COX_EPOCHS: usize = 10;

type Outcome = Result<String, String>;

fn desk_model(spec: &CohortSpec) -> ModelConfig {
    ModelConfig {
        hidden_dim: 32,
        heads: 4,
        encoder_depth: 2,
        n_blocks: 2,
        patch_dim: spec.patch_dim,
        n_genes: spec.n_genes,
        vocab_size: spec.vocab_size,
        max_text_len: spec.text_len,
        n_classes: spec.classes,
        ..ModelConfig::default()
    }
}

/// A model pretrained on the first 512 samples of a planted cohort, plus
/// 128 further samples from the same generator held out.
struct Pretrained {
    model: AlterModel,
    data: Vec<Prepared>,
    seconds: f64,
}

impl Pretrained {
    fn train(&self) -> std::ops::Range<usize> {
        0..TRAIN_N
    }

    fn held_out(&self) -> std::ops::Range<usize> {
        TRAIN_N..TRAIN_N + HELD_OUT_N
    }
}

fn pretrain_seed(seed: u64) -> Pretrained {
    let t0 = Instant::now();
    let spec = CohortSpec { n: TRAIN_N + HELD_OUT_N, seed, ..CohortSpec::default() };
    let cohort = generate_cohort(&spec).unwrap();
    let train: Vec<usize> = (0..TRAIN_N).collect();
    let mc = desk_model(&spec);
    let binner = cohort.fit_binner(&train, mc.n_bins).unwrap();
    let data = cohort.prepare(&binner).unwrap();
    let tc = TrainConfig { epochs: PRETRAIN_EPOCHS, seed, ..TrainConfig::default() };
    let model = AlterModel::new(mc, cohort.partition.clone(), tc.tau_init, seed).unwrap();
    let mut pt = Pretrainer::new(model, tc, &data, train).unwrap();
    pt.run(|_| {}).unwrap();
    let model = pt.model;
    Pretrained { model, data, seconds: t0.elapsed().as_secs_f64() }
}

fn pretrained() -> &'static [Pretrained] {
    static CACHE: OnceLock<Vec<Pretrained>> = OnceLock::new();
    CACHE.get_or_init(|| (0..ALIGNMENT_SEEDS).map(pretrain_seed).collect())
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Fraction of rows of `a` whose most cosine-similar row of `b` is its partner.
fn top1(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let hits = a
        .iter()
        .enumerate()
        .filter(|(i, x)| {
            let sims: Vec<f64> = b.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect();
            let best = (0..sims.len()).max_by(|&p, &q| sims[p].total_cmp(&sims[q])).unwrap();
            best == *i
        })
        .count();
    hits as f64 / a.len() as f64
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut cox = 0.0f64;
    let mut failures = Vec::new();
    for seed in [0u64, 0x9e37_79b9] {
        let r = run_suite(seed, false).map_err(|e| e.to_string())?;
        for c in &r.components {
            worst = worst.max(c.report.max_rel_error);
            if c.report.max_rel_error >= TOLERANCE {
                failures.push(format!("{} ({:.2e})", c.name, c.report.max_rel_error));
            }
        }
        cox = cox.max(r.cox_closed_form);
    }
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!("max rel error {worst:.2e} (< {TOLERANCE:e}), Cox closed-form deviation {cox:.2e} (<= {COX_TOLERANCE:e}), {secs:.1}s");
    if failures.is_empty() && cox <= COX_TOLERANCE && secs < 300.0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {}", failures.join(", ")))
    }
}

fn soundness_model(seed: u64) -> AlterModel {
    let cfg = ModelConfig {
        hidden_dim: 8,
        heads: 2,
        encoder_depth: 1,
        n_blocks: 2,
        patch_dim: 6,
        n_genes: 10,
        n_bins: 5,
        vocab_size: 20,
        max_text_len: 8,
        zero_init_residual: false,
        ..ModelConfig::default()
    };
    AlterModel::new(cfg, PathwayPartition::contiguous(10, 4).unwrap(), 0.5, seed).unwrap()
}

fn random_prepared(rng: &mut ChaCha8Rng, m: &ModelConfig) -> Prepared {
    let n = rng.random_range(3..20);
    let feats: Vec<f64> = (0..n * m.patch_dim).map(|_| StandardNormal.sample(rng)).collect();
    let words: Vec<usize> = (0..rng.random_range(1..m.max_text_len)).map(|_| rng.random_range(4..m.vocab_size)).collect();
    Prepared {
        bag: Some(FeatureBag::new(Tensor::matrix(n, m.patch_dim, feats).unwrap()).unwrap()),
        bins: Some((0..m.n_genes).map(|_| rng.random_range(0..m.n_bins)).collect()),
        text: Some(TokenSequence::from_words(&words, m.max_text_len).unwrap()),
        report: words,
        class: 0,
        mutation: false,
        survival: SurvivalLabel { time: 1.0, censored: false },
        latent: Vec::new(),
    }
}

fn criterion_2() -> Outcome {
    let mut cases = 0;
    for seed in 0..10u64 {
        let model = soundness_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_prepared(&mut rng, &model.config);
        let b = random_prepared(&mut rng, &model.config);
        for mask in 1u8..8 {
            let keep = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
            // Same present-modality data as `a`, different data in the others.
            let mixed = Prepared {
                bag: if keep[0] { a.bag.clone() } else { b.bag.clone() },
                bins: if keep[1] { a.bins.clone() } else { b.bins.clone() },
                text: if keep[2] { a.text.clone() } else { b.text.clone() },
                ..a.clone()
            };
            let mut g1 = Graph::with_params(&model.store);
            let out1 = model.forward(&mut g1, &a.input(keep), true).map_err(|e| e.to_string())?;
            let t1 = g1.value(out1.fused.unwrap().tokens).clone();

            // Same subset evaluated after an unrelated full sample on one tape.
            let mut g2 = Graph::with_params(&model.store);
            model.forward(&mut g2, &b.full_input(), true).map_err(|e| e.to_string())?;
            let out2 = model.forward(&mut g2, &mixed.input(keep), true).map_err(|e| e.to_string())?;
            let fused2 = out2.fused.unwrap();
            let t2 = g2.value(fused2.tokens).clone();
            let same = t1.shape() == t2.shape() && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(format!("seed {seed} subset {mask:03b}: fused tokens depend on absent-modality data"));
            }

            let w = g2.constant(Tensor::full(t2.shape(), 0.37));
            let p = g2.mul(fused2.tokens, w);
            let y = g2.sum(p);
            let grads = g2.backward(y);
            let pg = g2.param_grads(&grads);
            for m in Modality::ALL.into_iter().filter(|m| !keep[m.index()]) {
                let tag = prefix::expert_tag(m);
                for (id, name, _) in model.store.iter() {
                    let owned = name.starts_with(prefix::encoder(m)) || name.contains(&tag);
                    if owned && pg.get(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)) {
                        return Err(format!("seed {seed} subset {mask:03b}: nonzero gradient reaches {name}"));
                    }
                }
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} (seed, subset) cases bit-identical with exactly zero absent-modality gradients"))
}

fn criterion_3() -> Outcome {
    let mut checks = Vec::new();
    let mut record = |name: &str, got: f64, want: f64, tol: f64| {
        checks.push((name.to_string(), got, want, (got - want).abs() <= tol));
    };
    for n in [2usize, 8, 32] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[n, 4], 0.5));
        let y = g.constant(Tensor::full(&[n, 4], -1.5));
        let inv_tau = g.scalar(1.0 / 0.07);
        let l = clip_pair_loss(&mut g, x, y, inv_tau);
        record(&format!("contrastive equal similarities N={n}"), g.value(l).item(), (n as f64).ln(), 1e-9);
    }
    {
        let mut g = Graph::new();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = g.constant(eye.clone());
        let y = g.constant(eye);
        let inv_tau = g.scalar(1.0);
        let l = clip_pair_loss(&mut g, x, y, inv_tau);
        record("contrastive identity similarities N=2", g.value(l).item(), (1.0 + (-1.0f64).exp()).ln(), 1e-9);
    }
    {
        let mut g = Graph::new();
        let emb = g.constant(Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let margin = 0.75;
        let l = triplet_loss(&mut g, emb, &[(0, 1, 2)], margin).map_err(|e| e.to_string())?;
        record("triplet equal distances", g.value(l).item(), margin, 0.0);
    }
    let cox = cox_loss_value(
        &[0.4, 0.4],
        &[SurvivalLabel { time: 1.0, censored: false }, SurvivalLabel { time: 2.0, censored: true }],
    )
    .map_err(|e| e.to_string())?;
    record("Cox two patients equal scores", cox, 2f64.ln(), 1e-12);
    {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 4]));
        let l = nll_survival_loss(&mut g, logits, &[1], &[false]).map_err(|e| e.to_string())?;
        record("hazard 0.5 event in second bin", g.value(l).item(), 2.0 * 2f64.ln(), 1e-12);
    }
    let bad: Vec<String> = checks
        .iter()
        .filter(|c| !c.3)
        .map(|(n, got, want, _)| format!("{n}: {got:.17e} vs {want:.17e}"))
        .collect();
    if bad.is_empty() {
        Ok(format!("{} closed-form cases within tolerance", checks.len()))
    } else {
        Err(bad.join("; "))
    }
}

fn criterion_4() -> Outcome {
    let runs = pretrained();
    // Pretraining is timed per run; the clock here covers evaluation only.
    let t0 = Instant::now();
    let mut passing = 0;
    let mut rows = Vec::new();
    for (seed, p) in runs.iter().enumerate() {
        let batch: Vec<usize> = p.held_out().take(RETRIEVAL_BATCH).collect();
        let mut emb: [Vec<Vec<f64>>; 3] = Default::default();
        for &i in &batch {
            let cls = p.model.encoder_cls_values(&p.data[i].full_input()).map_err(|e| e.to_string())?;
            for m in 0..3 {
                emb[m].push(unit(cls[m].as_ref().expect("tri-modal sample")));
            }
        }
        let acc = [top1(&emb[0], &emb[1]), top1(&emb[1], &emb[0]), top1(&emb[0], &emb[2]), top1(&emb[2], &emb[0])];
        let ok = acc.iter().all(|&a| a >= 0.85);
        passing += usize::from(ok);
        rows.push(format!(
            "seed {seed}: h>g {:.3} g>h {:.3} h>t {:.3} t>h {:.3}{}",
            acc[0],
            acc[1],
            acc[2],
            acc[3],
            if ok { "" } else { " (below 0.85)" }
        ));
    }
    let secs = runs.iter().map(|p| p.seconds).sum::<f64>() + t0.elapsed().as_secs_f64();
    let detail = format!("{passing}/{} seeds at >= 0.85 after {PRETRAIN_EPOCHS} epochs, {secs:.0}s; {}", runs.len(), rows.join("; "));
    if passing >= 4 && secs < 900.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn probe_accuracy(model: &AlterModel, p: &Pretrained) -> Result<f64, String> {
    let emb = |i: usize| model.sample_embedding_values(&p.data[i].full_input()).map_err(|e| e.to_string());
    let xtr: Vec<Vec<f64>> = p.train().map(emb).collect::<Result<_, _>>()?;
    let ytr: Vec<usize> = p.train().map(|i| p.data[i].class).collect();
    let xte: Vec<Vec<f64>> = p.held_out().map(emb).collect::<Result<_, _>>()?;
    let yte: Vec<usize> = p.held_out().map(|i| p.data[i].class).collect();
    let probe = LinearProbe::fit(&xtr, &ytr, model.config.n_classes, ProbeOptions::default()).map_err(|e| e.to_string())?;
    Ok(probe.accuracy(&xte, &yte))
}

fn criterion_5() -> Outcome {
    let mut rows = Vec::new();
    let mut ok = true;
    for (seed, p) in pretrained().iter().enumerate() {
        let trained = probe_accuracy(&p.model, p)?;
        let fresh_model =
            AlterModel::new(p.model.config.clone(), p.model.partition.clone(), 0.07, 1000 + seed as u64).map_err(|e| e.to_string())?;
        let fresh = probe_accuracy(&fresh_model, p)?;
        ok &= trained >= 0.9 && fresh <= 0.35;
        rows.push(format!("seed {seed}: pretrained {trained:.3}, untrained {fresh:.3}"));
    }
    let detail = format!("held-out probe accuracy (need >= 0.9 vs <= 0.35); {}", rows.join("; "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Outcome {
    let mut rows = Vec::new();
    let mut ok = true;
    for (seed, p) in pretrained().iter().take(SURVIVAL_SEEDS as usize).enumerate() {
        let mut model = p.model.clone();
        let mut cfg = FinetuneConfig::new(Task::SurvivalCox);
        cfg.epochs = COX_EPOCHS;
        cfg.seed = seed as u64;
        let train: Vec<usize> = p.train().collect();
        let test: Vec<usize> = p.held_out().collect();
        finetune(&mut model, &p.data, &train, &cfg).map_err(|e| e.to_string())?;
        let c = evaluate(&model, &p.data, &test, &cfg, None).map_err(|e| e.to_string())?.get("c_index").unwrap();
        let labels: Vec<SurvivalLabel> = test.iter().map(|&i| p.data[i].survival).collect();
        let oracle_risk: Vec<f64> = test.iter().map(|&i| p.data[i].latent[0]).collect();
        let oracle = concordance_index(&oracle_risk, &labels).map_err(|e| e.to_string())?;
        let ratio = c / oracle;
        ok &= ratio >= 0.9;
        rows.push(format!("seed {seed}: C {c:.3} oracle {oracle:.3} ratio {ratio:.3}"));
    }
    let detail = format!("held-out Cox C-index vs generator oracle (need ratio >= 0.9); {}", rows.join("; "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn write_desk_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("desk.cfg");
    std::fs::write(&path, "hidden_dim = 16\nheads = 2\nencoder_depth = 1\nn_blocks = 1\nbatch_size = 16\n").unwrap();
    path
}

fn backbone_bytes(ck: &Checkpoint) -> Vec<(String, Vec<u64>)> {
    let backbone = [prefix::SLIDE, prefix::GENES, prefix::TEXT, prefix::FUSION];
    ck.tensors
        .iter()
        .filter(|(n, _)| backbone.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cohort = generate_cohort(&CohortSpec { n: 96, seed: 3, ..CohortSpec::default() }).map_err(|e| e.to_string())?;
    let cohort_path = write_cohort(&cohort, &dir.path().join("cohort")).map_err(|e| e.to_string())?;
    let pre = PretrainArgs {
        cohort: cohort_path.clone(),
        out: dir.path().join("pre"),
        config: Some(write_desk_config(dir.path())),
        epochs: Some(1),
        ..PretrainArgs::default()
    };
    cmd_pretrain(&pre).map_err(|e| e.to_string())?;
    let ck_path = dir.path().join("pre").join(CHECKPOINT_FILE);
    let before = backbone_bytes(&Checkpoint::load(&ck_path).map_err(|e| e.to_string())?);
    let mut unchanged = [false; 2];
    for (k, freeze) in [true, false].into_iter().enumerate() {
        let mut args = FinetuneArgs::new(Task::Subtype, ck_path.clone(), cohort_path.clone(), dir.path().join(format!("ft{k}")));
        args.freeze_fusion = freeze;
        args.epochs = Some(2);
        let run = cmd_finetune(&args).map_err(|e| e.to_string())?;
        let after = backbone_bytes(&Checkpoint::load(run.out_dir.join(TASK_CHECKPOINT_FILE)).map_err(|e| e.to_string())?);
        unchanged[k] = after == before;
    }
    let detail = format!(
        "{} backbone tensors; frozen run unchanged: {}, unfrozen run unchanged: {}",
        before.len(),
        unchanged[0],
        unchanged[1]
    );
    if unchanged[0] && !unchanged[1] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Mann-Whitney pair count: positives ranked above negatives, ties half.
fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn lcs_brute(a: &[usize], b: &[usize]) -> usize {
    let is_subseq = |s: &[usize]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .map(|bits| (0..a.len()).filter(|i| bits >> i & 1 == 1).map(|i| a[i]).collect::<Vec<_>>())
        .filter(|s| is_subseq(s))
        .map(|s| s.len())
        .max()
        .unwrap_or(0)
}

fn rouge_brute(h: &[usize], r: &[usize]) -> f64 {
    let l = lcs_brute(h, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / h.len() as f64, l / r.len() as f64);
    let beta2 = 1.2f64 * 1.2;
    (1.0 + beta2) * p * rec / (rec + beta2 * p)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_auc = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..40);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..12u8)) / 4.0).collect();
        let got = auc_roc(&scores, &labels).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((got - auc_pairwise(&scores, &labels)).abs());
    }
    let mut worst_rouge = 0.0f64;
    for _ in 0..300 {
        let h: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..4)).collect();
        let r: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..4)).collect();
        worst_rouge = worst_rouge.max((rouge_l(&h, &r) - rouge_brute(&h, &r)).abs());
    }
    // Every n-gram matches; brevity penalty exp(1 - 4/2).
    let bp = bleu_corpus(&[(vec![5, 6], vec![5, 6, 7, 8])], 2);
    let bp_sentence = bleu_sentence(&[5, 6], &[5, 6, 7, 8], 1);
    let e_inv = (-1.0f64).exp();

    let obs = |t: f64| SurvivalLabel { time: t, censored: false };
    let cens = |t: f64| SurvivalLabel { time: t, censored: true };
    let c = |r: &[f64], l: &[SurvivalLabel]| concordance_index(r, l).unwrap();
    let fixtures = [
        // risk ties score one half
        (c(&[1.0, 1.0], &[obs(1.0), obs(2.0)]), 0.5),
        // tied event times form no comparable pair; only (0,2) and (1,2) count
        (c(&[3.0, 1.0, 2.0], &[obs(1.0), obs(1.0), obs(5.0)]), 0.5),
        // censored earlier patient anchors nothing
        (c(&[0.0, 1.0, 2.0], &[cens(1.0), obs(2.0), obs(3.0)]), 0.0),
        // an event tied with a later censoring time is not comparable
        (c(&[2.0, 1.0, 0.0], &[obs(2.0), cens(2.0), cens(3.0)]), 1.0),
    ];
    let c_ok = fixtures.iter().all(|(got, want)| got == want);
    let no_pairs = concordance_index(&[1.0, 2.0], &[cens(1.0), cens(2.0)]).is_err();

    let ok = worst_auc <= 1e-12 && worst_rouge <= 1e-12 && (bp - e_inv).abs() <= 1e-9 && (bp_sentence - e_inv).abs() <= 1e-9 && c_ok && no_pairs;
    let detail = format!(
        "AUC vs pair count max dev {worst_auc:.1e}; ROUGE-L vs enumeration max dev {worst_rouge:.1e}; brevity case {bp:.12} (e^-1 {e_inv:.12}); C-index tie fixtures {}",
        if c_ok && no_pairs { "ok" } else { "mismatch" }
    );
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 8;
    let mut identity_cases = 0;
    let mut non_square = 0;
    for draw in 0..1000 {
        let n_h = if draw < 10 { [1, 2, 3, 5, 7, 10, 99, 101, 399, 400][draw] } else { rng.random_range(1..=400) };
        let side = alter_core::encoders::slide::grid_side(n_h);
        let (a, b) = if draw % 10 == 0 {
            (1, 1)
        } else {
            loop {
                let a = rng.random_range(1..=side.min(4));
                let b = rng.random_range(1..=side.min(4));
                if a * b <= n_h {
                    break (a, b);
                }
            }
        };
        let n_g = rng.random_range(1..=200);
        let mut genes: Vec<usize> = (0..n_g).filter(|_| rng.random_bool(0.8)).collect();
        genes.sort_unstable();
        let mut groups = Vec::new();
        while !genes.is_empty() {
            let k = rng.random_range(1..=genes.len().min(12));
            groups.push(genes.drain(..k).collect::<Vec<_>>());
        }
        let partition = PathwayPartition::new(n_g, groups).map_err(|e| e.to_string())?;
        let n_t = rng.random_range(2..=16);
        let cfg = ModelConfig {
            hidden_dim: d,
            heads: 2,
            encoder_depth: 1,
            n_blocks: 1,
            patch_dim: 3,
            n_genes: n_g,
            n_bins: 4,
            vocab_size: 12,
            max_text_len: n_t,
            region_a: a,
            region_b: b,
            ..ModelConfig::default()
        };
        let model = AlterModel::new(cfg, partition.clone(), 0.07, draw as u64).map_err(|e| e.to_string())?;
        let bag = FeatureBag::new(Tensor::matrix(n_h, 3, (0..n_h * 3).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap())
            .map_err(|e| e.to_string())?;
        let layout = RegionLayout::new(n_h, a, b).map_err(|e| e.to_string())?;
        let mut g = Graph::with_params(&model.store);
        let enc = model.slide.forward(&mut g, &bag, &layout, None).map_err(|e| e.to_string())?;
        let want_regions = n_h / (a * b);
        let shapes_ok = g.shape(enc.cls) == [1, d]
            && g.shape(enc.patches) == [n_h, d]
            && g.shape(enc.regions) == [want_regions, d]
            && g.shape(enc.sequence) == [want_regions + 1, d];
        if !shapes_ok {
            return Err(format!("draw {draw}: slide shapes wrong for N_h={n_h}, a={a}, b={b}"));
        }
        let agg = region_aggregate(g.value(enc.cls), g.value(enc.patches), a, b).map_err(|e| e.to_string())?;
        if agg.shape() != [want_regions + 1, d] {
            return Err(format!("draw {draw}: region aggregate shape {:?}", agg.shape()));
        }
        if (a, b) == (1, 1) {
            identity_cases += 1;
            if g.value(enc.regions).data() != g.value(enc.patches).data() {
                return Err(format!("draw {draw}: 1x1 regions differ from the patch tokens"));
            }
        }
        if side * side != n_h {
            non_square += 1;
        }
        let bins: Vec<usize> = (0..n_g).map(|_| rng.random_range(0..4)).collect();
        let genes = model.genes.forward(&mut g, &bins, &partition.pooling_groups()).map_err(|e| e.to_string())?;
        let n_p = partition.pooling_groups().len();
        if g.shape(genes.genes) != [n_g, d] || g.shape(genes.pathways) != [n_p, d] || g.shape(genes.sequence) != [n_p + 1, d] {
            return Err(format!("draw {draw}: gene shapes wrong for N_g={n_g}, {n_p} pathways"));
        }
        let words: Vec<usize> = (0..rng.random_range(0..n_t)).map(|_| rng.random_range(4..12)).collect();
        let seq = TokenSequence::from_words(&words, n_t).map_err(|e| e.to_string())?;
        let t = model.text.forward(&mut g, &seq).map_err(|e| e.to_string())?;
        if g.shape(t) != [n_t, d] {
            return Err(format!("draw {draw}: text shape {:?} for length {n_t}", g.shape(t)));
        }
    }
    Ok(format!("1000 draws ({identity_cases} with 1x1 regions, {non_square} with non-square patch counts)"))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cohort = generate_cohort(&CohortSpec { n: 64, seed: 10, ..CohortSpec::default() }).map_err(|e| e.to_string())?;
    let cohort_path = write_cohort(&cohort, &dir.path().join("cohort")).map_err(|e| e.to_string())?;
    let config = write_desk_config(dir.path());
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let args = PretrainArgs {
            cohort: cohort_path.clone(),
            out: dir.path().join(run),
            config: Some(config.clone()),
            epochs: Some(2),
            seed: Some(5),
            ..PretrainArgs::default()
        };
        cmd_pretrain(&args).map_err(|e| e.to_string())?;
        outputs.push(std::fs::read(dir.path().join(run).join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?);
    }
    let identical_runs = outputs[0] == outputs[1];

    let ck = Checkpoint::read_from(outputs[0].as_slice()).map_err(|e| e.to_string())?;
    let mut rewritten = Vec::new();
    ck.write_to(&mut rewritten).map_err(|e| e.to_string())?;
    let model = AlterModel::from_checkpoint(&ck).map_err(|e| e.to_string())?;
    let params_exact = model.store.iter().all(|(_, name, t)| {
        ck.get(name).is_some_and(|c| c.shape() == t.shape() && c.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    });
    let again = AlterModel::from_checkpoint(&model.to_checkpoint()).map_err(|e| e.to_string())?;
    let model_round_trip = again.to_checkpoint() == model.to_checkpoint();
    let detail = format!(
        "two runs byte-identical: {identical_runs}; rewrite byte-identical: {}; restored parameters bit-exact: {params_exact}; model round trip: {model_round_trip}",
        rewritten == outputs[0]
    );
    if identical_runs && rewritten == outputs[0] && params_exact && model_round_trip {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient integrity", criterion_1),
        (2, "missing-modality soundness", criterion_2),
        (3, "closed-form losses", criterion_3),
        (4, "contrastive alignment", criterion_4),
        (5, "triplet clustering", criterion_5),
        (6, "survival ordering", criterion_6),
        (7, "freeze semantics", criterion_7),
        (8, "metric oracles", criterion_8),
        (9, "shape contracts", criterion_9),
        (10, "reproducibility", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|s| name.contains(s.as_str()) || s == &id.to_string()) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {id:>2} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("acceptance {id:>2} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
