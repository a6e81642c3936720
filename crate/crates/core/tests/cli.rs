use std::fs;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_visreason"));
    c.env_remove("VISREASON_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["gen", "--count", "x", "--out", "f"]).status.code(), Some(2));
    let o = run(&["sft", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    assert_eq!(run(&["ablate", "--variants", "mystery"]).status.code(), Some(2));
    assert_eq!(run(&["sft", "--config", "/nonexistent/run.cfg"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let o = run(&["eval", "--checkpoint", missing.to_str().unwrap(), "--set", &format!("out_dir={}", dir.path().display())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    let o = run(&["gen", "--count", "12", "--split", "eval", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = visreason::tasks::load_dataset(&out).unwrap();
    assert_eq!(recs.len(), 12);
    assert!(recs.iter().all(|r| r.split == visreason::tasks::Split::Eval));
}

#[test]
fn oracle_reports_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tv.csv");
    let o = run(&["oracle", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("trajectories 259") && s.contains(" converged"), "{s}");
    assert!(fs::read_to_string(&out).unwrap().starts_with("step,tv\n"));
}

#[test]
fn sft_gfn_eval_and_plotdata_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "d_model = 16\nd_vis = 8\nn_heads = 2\nffn_width = 24\nlvip_hidden = 12\n\
         train_count = 10\neval_count = 5\ngfn_count = 5\nepochs = 1\nbatch_size = 5\n\
         gfn_steps = 2\nm = 2\nmap_n = 2\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let out_dir = dir.path().join("runs");
    let sft = bin().args(["sft", "--config", c]).env("VISREASON_OUT_DIR", &out_dir).output().unwrap();
    assert!(sft.status.success(), "{}", String::from_utf8_lossy(&sft.stderr));
    let sft_dir = out_dir.join("sft_sft_lvip_seed0");
    for f in ["config.txt", "sft_metrics.csv", "model.ckpt", "eval_report.json", "lvip_retrieval.json"] {
        assert!(sft_dir.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(sft_dir.join("sft_metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,ce,mse,total,eval_accuracy,eval_mse\n"));
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = sft_dir.join("model.ckpt");
    let od = format!("out_dir={}", out_dir.display());
    let gfn = run(&["gfn", "--config", c, "--set", &od, "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(gfn.status.success(), "{}", String::from_utf8_lossy(&gfn.stderr));
    let log = fs::read_to_string(out_dir.join("gfn_sft_lvip_gfn_seed0/gfn_log.csv")).unwrap();
    assert!(log.starts_with("step,accept_rate,mean_R,mean_r_ans,mean_r_lvip,subtb_loss,delta_s,skipped\n"), "{log}");

    let ev = run(&["eval", "--config", c, "--set", &od, "--set", "eval_mode=map", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&ev)).unwrap();
    assert_eq!(report["n"], 5);

    let plot = dir.path().join("plot.csv");
    let p = run(&[
        "plotdata",
        "--out",
        plot.to_str().unwrap(),
        sft_dir.to_str().unwrap(),
        out_dir.join("gfn_sft_lvip_gfn_seed0").to_str().unwrap(),
    ]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let text = fs::read_to_string(&plot).unwrap();
    assert!(text.contains("gfn_sft_lvip_gfn_seed0/gfn_log,1,mean_R,"));
    assert!(text.contains("sft_sft_lvip_seed0/sft_metrics,0,ce,"));
}
