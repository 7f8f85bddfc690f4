use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rlm_core::config::ExperimentConfig;
use rlm_core::infer::read_predictions;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn smoke() -> String {
    configs().join("smoke.toml").display().to_string()
}

fn rlm(args: &[&str], out: &Path) {
    let mut all = vec!["rlm"];
    all.extend_from_slice(args);
    let cfg = smoke();
    all.extend_from_slice(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    rlm_core::cli::run(all).unwrap_or_else(|e| panic!("{args:?}: {e}"));
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn shipped_default_config_matches_builtin_defaults() {
    assert_eq!(ExperimentConfig::load(&configs().join("default.toml")).unwrap(), ExperimentConfig::default());
    ExperimentConfig::load(&configs().join("smoke.toml")).unwrap();
}

#[test]
fn full_pipeline_writes_every_interface_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in ["gen-data", "pretrain", "finetune", "predict", "evaluate"] {
        rlm(&[cmd], out);
    }
    for t in ["C1_JUN", "C2_JUN", "C3_JUN"] {
        assert!(out.join(format!("data/{t}.jsonl")).exists());
        assert!(out.join(format!("data/{t}.task.toml")).exists());
    }
    assert!(out.join("data/vocab.txt").exists());
    for n in [1, 2] {
        assert!(out.join(format!("ckpts/pretrain_n{n}/best/manifest")).exists());
        assert!(out.join(format!("ckpts/pretrain_n{n}/step_000006/tensors.bin")).exists());
        assert_eq!(header(&out.join(format!("reports/pretrain_n{n}_log.csv"))), "step,split,loss,lr");
    }
    let r = out.join("reports");
    assert_eq!(
        header(&r.join("predictions_C3_JUN.csv")),
        "task_id,example_id,y_true,point_mean,point_median,sample_variance,nll,filtered_count"
    );
    assert_eq!(rows(&r.join("predictions_C3_JUN.csv")), 6);
    assert_eq!(header(&r.join("samples_C3_JUN.csv")), "example_id,sample_index,y_sample");
    assert_eq!(rows(&r.join("samples_C3_JUN.csv")), 6 * 4);
    assert_eq!(
        header(&r.join("eval_report.csv")),
        "task_id,n_test,mse,spearman_rho,tv_null,tv_hyperparams,tv_full,r2_ev,r2_nll,mean_nll"
    );
    assert_eq!(header(&r.join("residual_hist_C3_JUN.csv")), "bin_low,bin_high,count");
    // grid of 2 example counts × 2 seeds
    assert_eq!(
        header(&r.join("finetune.csv")),
        "task_id,examples,seed,pretrained_val_loss,pretrained_mse,pretrained_spearman,random_val_loss,random_mse,random_spearman"
    );
    assert_eq!(rows(&r.join("finetune.csv")), 4);
    assert!(out.join("ckpts/finetune_C3_JUN_s0/manifest").exists());
    assert_eq!(read_predictions(&r.join("predictions_C3_JUN.csv")).unwrap()[0].task_id, "C3_JUN");

    // a null model enables R²_NLL
    rlm(&["pretrain", "--mask", "null"], out);
    let null = out.join("ckpts/pretrain_n2_null/best");
    rlm(&["evaluate", "--null-checkpoint", null.to_str().unwrap()], out);
    let rep = fs::read_to_string(r.join("eval_report.csv")).unwrap();
    assert!(!rep.lines().nth(1).unwrap().contains("NaN"), "{rep}");
}

#[test]
fn ablation_grids_write_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    rlm(&["gen-data"], out);
    rlm(&["ablate"], out);
    for kind in ["arch", "size", "seqlen", "features", "lr", "ckpt"] {
        let p = out.join(format!("reports/ablate_{kind}.csv"));
        assert_eq!(header(&p), "grid,value,params,best_step,min_val_loss,test_mse");
        assert_eq!(rows(&p), 2, "{kind}");
    }
    let ckpt = fs::read_to_string(out.join("reports/ablate_ckpt.csv")).unwrap();
    assert!(ckpt.contains("ckpt,3,") && ckpt.contains("ckpt,6,"));
    let arch = fs::read_to_string(out.join("reports/ablate_arch.csv")).unwrap();
    assert!(arch.contains("arch,0E2D,") && arch.contains("arch,1E1D,"));
}

#[test]
fn reruns_are_byte_identical_and_seed_sensitive() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [a.path(), b.path()] {
        for cmd in ["gen-data", "pretrain", "predict"] {
            rlm(&[cmd], out);
        }
    }
    for f in [
        "data/C1_JUN.jsonl",
        "reports/pretrain_n2_log.csv",
        "ckpts/pretrain_n2/best/tensors.bin",
        "reports/predictions_C3_JUN.csv",
        "reports/samples_C3_JUN.csv",
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    rlm(&["pretrain", "--seed", "9"], b.path());
    assert_ne!(
        fs::read(a.path().join("reports/pretrain_n2_log.csv")).unwrap(),
        fs::read(b.path().join("reports/pretrain_n2_log.csv")).unwrap()
    );
}

#[test]
fn resumed_pretraining_reproduces_the_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    rlm(&["gen-data"], full.path());
    rlm(&["pretrain"], full.path());

    let part = tempfile::tempdir().unwrap();
    rlm(&["gen-data"], part.path());
    let cfg = fs::read_to_string(smoke()).unwrap().replacen("max_steps = 6", "max_steps = 3", 1);
    let short = part.path().join("short.toml");
    fs::write(&short, cfg).unwrap();
    let out = part.path().to_str().unwrap();
    rlm_core::cli::run(["rlm", "pretrain", "--config", short.to_str().unwrap(), "--out", out]).unwrap();
    assert!(!part.path().join("ckpts/pretrain_n2/step_000006").exists());
    rlm(&["pretrain", "--resume"], part.path());
    for f in ["ckpts/pretrain_n2/step_000006/tensors.bin", "ckpts/pretrain_n2/best/manifest", "reports/pretrain_n2_log.csv"] {
        assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(part.path().join(f)).unwrap(), "{f}");
    }
}

fn binary(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rlm")).args(args).output().unwrap()
}

#[test]
fn failures_exit_nonzero_with_a_one_line_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = binary(&["pretrain", "--config", &smoke(), "--out", out]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("gen-data"), "{err}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nmax_stepz = 3\n").unwrap();
    let o = binary(&["gen-data", "--config", bad.to_str().unwrap(), "--out", out]);
    assert!(!o.status.success());
    assert_eq!(String::from_utf8(o.stderr).unwrap().lines().count(), 1);

    let o = binary(&["predict", "--config", &smoke(), "--out", out, "--checkpoint", "/nonexistent"]);
    assert!(!o.status.success());
    let o = binary(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(binary(&["--help"]).status.success());
}
