use std::fs;
use std::path::{Path, PathBuf};

use alter_cli::commands::{
    cmd_eval, cmd_finetune, cmd_pretrain, EvalArgs, FinetuneArgs, PretrainArgs, CHECKPOINT_FILE, COHORT_FILE,
    LOSS_LOG_FILE, MANIFEST_FILE, SCHEDULE_FILE, TASK_CHECKPOINT_FILE,
};
use alter_cli::{run_from, Failure};
use alter_core::numerics::Checkpoint;
use alter_core::tasks::finetune::Task;
use tempfile::TempDir;

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["alter".to_string(), "gen".into(), "--out".into(), s(&out)];
    args.extend(extra.iter().map(|a| a.to_string()));
    run_from(args).unwrap();
    out.join(COHORT_FILE)
}

fn desk_config(dir: &Path) -> PathBuf {
    let p = dir.join("desk.cfg");
    fs::write(&p, "# small model\nhidden_dim = 16\nheads = 2\nencoder_depth = 1\nn_blocks = 1\n").unwrap();
    p
}

fn pretrain_args(dir: &Path, cohort: &Path, out: &str, epochs: usize) -> PretrainArgs {
    PretrainArgs {
        cohort: cohort.to_path_buf(),
        out: dir.join(out),
        config: Some(desk_config(dir)),
        epochs: Some(epochs),
        ..PretrainArgs::default()
    }
}

fn columns(log: &str, name: &str) -> Vec<f64> {
    let mut lines = log.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split('\t').nth(k).unwrap().parse().unwrap()).collect()
}

#[test]
fn gen_is_deterministic_and_records_missing_rates() {
    let dir = TempDir::new().unwrap();
    let a = gen(dir.path(), "a", &["--n", "200", "--classes", "4", "--seed", "7", "--missing-h", "0.3"]);
    let b = gen(dir.path(), "b", &["--n", "200", "--classes", "4", "--seed", "7", "--missing-h", "0.3"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let manifest = fs::read_to_string(a.with_file_name(MANIFEST_FILE)).unwrap();
    assert!(manifest.lines().any(|l| l == "missing_h = 0.3"), "{manifest}");
}

#[test]
fn usage_errors_exit_with_code_one() {
    let dir = TempDir::new().unwrap();
    let out = s(&dir.path().join("x"));
    let e = run_from(["alter", "gen", "--n", "0", "--out", &out]).unwrap_err();
    assert_eq!(e.kind, Failure::Usage);
    assert_eq!(e.kind.exit_code(), 1);
    assert_eq!(run_from(["alter", "gen", "--bogus"]).unwrap_err().kind, Failure::Usage);
    assert_eq!(run_from(["alter", "finetune", "--task", "nope"]).unwrap_err().kind, Failure::Usage);
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["gen", "pretrain", "finetune", "eval", "gradcheck"] {
        run_from(["alter", sub, "--help"]).unwrap();
    }
}

#[test]
fn pretrain_log_has_one_row_per_step_and_zero_alpha_keeps_raw_mlm() {
    let dir = TempDir::new().unwrap();
    let cohort = gen(dir.path(), "c", &["--n", "40", "--seed", "1"]);
    let mut args = pretrain_args(dir.path(), &cohort, "p", 3);
    args.alpha = Some(0.0);
    args.batch_size = Some(8);
    let out = cmd_pretrain(&args).unwrap();
    let log = fs::read_to_string(out.out_dir.join(LOSS_LOG_FILE)).unwrap();
    // 40 samples, 70% train = 28, batches of 8 → 4 per epoch.
    assert_eq!(log.lines().count() - 1, 3 * 4);
    assert!(columns(&log, "weighted_mlm").iter().all(|&v| v == 0.0));
    assert!(columns(&log, "mlm").iter().all(|&v| v > 0.0));
    let schedule = fs::read_to_string(out.out_dir.join(SCHEDULE_FILE)).unwrap();
    assert_eq!(schedule.lines().count(), 1 + 3);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cohort = gen(dir.path(), "c", &["--n", "20"]);
    let mut args = pretrain_args(dir.path(), &cohort, "p", 1);
    args.set = vec!["hiden_dim=4".into()];
    let e = alter_cli::CliError::from(cmd_pretrain(&args).unwrap_err());
    assert_eq!(e.kind, Failure::Usage);
}

#[test]
fn resumed_run_matches_uninterrupted_run_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let cohort = gen(dir.path(), "c", &["--n", "48", "--seed", "2"]);
    let full = cmd_pretrain(&pretrain_args(dir.path(), &cohort, "full", 3)).unwrap();
    cmd_pretrain(&pretrain_args(dir.path(), &cohort, "first", 1)).unwrap();
    let mut rest = pretrain_args(dir.path(), &cohort, "rest", 3);
    rest.resume = Some(dir.path().join("first").join(CHECKPOINT_FILE));
    let resumed = cmd_pretrain(&rest).unwrap();
    assert_eq!(
        fs::read(full.out_dir.join(CHECKPOINT_FILE)).unwrap(),
        fs::read(resumed.out_dir.join(CHECKPOINT_FILE)).unwrap()
    );
    let tail: Vec<_> = full.rows.iter().filter(|r| r.epoch >= 1).cloned().collect();
    assert_eq!(tail, resumed.rows);
}

struct Trained {
    dir: TempDir,
    cohort: PathBuf,
    checkpoint: PathBuf,
}

fn pretrained(n: &str, extra: &[&str]) -> Trained {
    let dir = TempDir::new().unwrap();
    let mut flags = vec!["--n", n, "--seed", "4"];
    flags.extend_from_slice(extra);
    let cohort = gen(dir.path(), "c", &flags);
    cmd_pretrain(&pretrain_args(dir.path(), &cohort, "p", 1)).unwrap();
    let checkpoint = dir.path().join("p").join(CHECKPOINT_FILE);
    Trained { dir, cohort, checkpoint }
}

fn finetune_args(t: &Trained, task: Task, out: &str) -> FinetuneArgs {
    let mut a = FinetuneArgs::new(task, t.checkpoint.clone(), t.cohort.clone(), t.dir.path().join(out));
    a.epochs = Some(1);
    a
}

#[test]
fn task_metrics_and_deterministic_eval() {
    let t = pretrained("80", &[]);
    let sub = cmd_finetune(&finetune_args(&t, Task::Subtype, "sub")).unwrap();
    for k in ["auc", "f1_macro", "accuracy"] {
        assert!(sub.metrics.get(k).is_some(), "subtype lacks {k}");
    }
    let rep = cmd_finetune(&finetune_args(&t, Task::Report, "rep")).unwrap();
    for k in ["bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l"] {
        assert!(rep.metrics.get(k).is_some(), "report lacks {k}");
    }
    let nll = cmd_finetune(&finetune_args(&t, Task::SurvivalNll, "nll")).unwrap();
    assert!(nll.metrics.get("c_index").is_some() && nll.metrics.get("nll").is_some());

    let eval = |out: &str| {
        let args = EvalArgs {
            checkpoint: nll.out_dir.join(TASK_CHECKPOINT_FILE),
            cohort: t.cohort.clone(),
            split: "test".into(),
            out: t.dir.path().join(out),
        };
        cmd_eval(&args).unwrap();
        fs::read(t.dir.path().join(out).join("metrics.txt")).unwrap()
    };
    assert_eq!(eval("e1"), eval("e2"));
}

#[test]
fn multimodal_survival_head_needs_two_modalities() {
    let t = pretrained("40", &[]);
    let mut a = finetune_args(&t, Task::SurvivalCox, "x");
    a.modalities = Some("g".into());
    let e = alter_cli::CliError::from(cmd_finetune(&a).unwrap_err());
    assert_eq!(e.kind, Failure::Usage);
    a.pool = Some(alter_core::tasks::PoolKind::Cls);
    cmd_finetune(&a).unwrap();
}

#[test]
fn frozen_backbone_keeps_its_fingerprint() {
    let t = pretrained("40", &[]);
    let mut a = finetune_args(&t, Task::Mutation, "frozen");
    a.freeze_fusion = true;
    let run = cmd_finetune(&a).unwrap();
    let before = AlterModelPrint::of(&t.checkpoint);
    let after = AlterModelPrint::of(&run.out_dir.join(TASK_CHECKPOINT_FILE));
    assert_eq!(before.backbone, after.backbone);
    assert_ne!(before.heads, after.heads);
}

struct AlterModelPrint {
    backbone: u32,
    heads: u32,
}

impl AlterModelPrint {
    fn of(path: &Path) -> Self {
        let m = alter_core::AlterModel::from_checkpoint(&Checkpoint::load(path).unwrap()).unwrap();
        AlterModelPrint {
            backbone: alter_core::tasks::finetune::backbone_fingerprint(&m),
            heads: m.store.fingerprint(&["head.mutation."]),
        }
    }
}

#[test]
fn eval_routes_missing_modalities_and_rejects_mismatches() {
    let t = pretrained("120", &["--missing-h", "0.5", "--missing-g", "0.5", "--missing-t", "0.5"]);
    let run = cmd_finetune(&finetune_args(&t, Task::Subtype, "ft")).unwrap();
    let task_ck = run.out_dir.join(TASK_CHECKPOINT_FILE);
    let args = |cohort: PathBuf, split: &str, out: &str| EvalArgs {
        checkpoint: task_ck.clone(),
        cohort,
        split: split.into(),
        out: t.dir.path().join(out),
    };
    let m = cmd_eval(&args(t.cohort.clone(), "test", "e")).unwrap();
    assert_eq!(m.get("n"), Some(18.0));

    let other = gen(t.dir.path(), "other", &["--n", "30", "--genes", "12", "--pathway-size", "3"]);
    let e = alter_cli::CliError::from(cmd_eval(&args(other, "test", "e2")).unwrap_err());
    assert_eq!(e.kind, Failure::Data);
    assert!(e.message.contains("gene count"), "{}", e.message);

    // A checkpoint claiming a test sample was trained on fails verification.
    let mut ck = Checkpoint::load(&task_ck).unwrap();
    let test_split = fs::read_to_string(run.out_dir.join("split.txt")).unwrap();
    let first_test = test_split.lines().find_map(|l| l.strip_prefix("test ")).unwrap().split(',').next().unwrap().to_string();
    let train = ck.meta.get_mut("split.train").unwrap();
    train.push(',');
    train.push_str(&first_test);
    let tampered = t.dir.path().join("tampered.ckpt");
    ck.save(&tampered).unwrap();
    let e = alter_cli::CliError::from(
        cmd_eval(&EvalArgs { checkpoint: tampered, ..args(t.cohort.clone(), "test", "e3") }).unwrap_err(),
    );
    assert_eq!(e.kind, Failure::Verification);
    assert_eq!(e.kind.exit_code(), 3);
}

#[test]
fn wrong_sign_gradients_fail_verification() {
    let e = run_from(["alter", "gradcheck", "--inject-wrong-sign"]).unwrap_err();
    assert_eq!(e.kind, Failure::Verification);
    run_from(["alter", "gradcheck", "--seed", "17"]).unwrap();
}

#[test]
fn relative_outputs_resolve_under_the_output_root() {
    let root = TempDir::new().unwrap();
    std::env::set_var(alter_cli::run_config::OUT_ROOT_ENV, root.path());
    let r = run_from(["alter", "gen", "--n", "10", "--out", "rel"]);
    std::env::remove_var(alter_cli::run_config::OUT_ROOT_ENV);
    r.unwrap();
    assert!(root.path().join("rel").join(COHORT_FILE).exists());
}
