//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `VISREASON_ACCEPT_ONLY=1,3,9` restricts the run to the listed criteria.
//! `VISREASON_ACCEPT_STRICT=1` makes any FAIL exit with status 1; by default
//! the suite reports and exits 0 so that a missed empirical target does not
//! mask the rest of `cargo test`.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visreason::gfn::*;
use visreason::harness::*;
use visreason::model::*;
use visreason::numerics::check_gradient;
use visreason::sft::*;
use visreason::tasks::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Outcome = Result<Verdict, String>;

fn tiny_config() -> ModelConfig {
    ModelConfig { d_vis: 8, d_model: 16, n_heads: 2, ffn_width: 24, lvip_hidden: 12, ..ModelConfig::default() }
}

fn task() -> TaskConfig {
    RunConfig::default().task
}

fn puzzles(n: usize, seed: u64, split: Split) -> Vec<Puzzle> {
    generate_suite(n, seed, split, &task()).unwrap().into_iter().map(|r| r.puzzle).collect()
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|v| v.to_bits()).collect()
}

fn e(err: visreason::Error) -> String {
    err.to_string()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let m = ModelState::init(&cfg, 101).map_err(e)?;
    let batch = puzzles(2, 102, Split::Train);
    let targets = lvip_targets(&m, &batch).map_err(e)?;
    let (_, grads) = sft_gradients(&m, &batch, &targets, 1.0).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut worst, mut worst_name, mut checked) = (0.0f64, String::new(), 0usize);
    let mut failures = Vec::new();
    for (k, name) in m.names().iter().enumerate() {
        let n = m.params()[k].len();
        let g = grads[k].data();
        // small groups are checked in full, large ones on a random sample plus their largest entry
        let mut idx: Vec<usize> = if n <= 64 { (0..n).collect() } else { (0..48).map(|_| rng.gen_range(0..n)).collect() };
        idx.push(g.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0);
        idx.sort_unstable();
        idx.dedup();
        checked += idx.len();
        let report = check_gradient(
            g,
            &m.params()[k],
            |p| {
                let mut probe = m.clone();
                probe.params_mut()[k] = p.clone();
                Ok(sft_loss_with_targets(&probe, &batch, &targets, 1.0)?.total)
            },
            1e-5,
            1e-4,
            Some(&idx),
        )
        .map_err(e)?;
        if report.max_rel_error > worst {
            worst = report.max_rel_error;
            worst_name = name.clone();
        }
        if !report.passed() {
            failures.push(name.clone());
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(60);
    Ok(verdict(
        pass,
        format!(
            "{} groups, {checked} entries, max rel error {worst:.2e} ({worst_name}), failing groups {failures:?}, {:.1}s",
            m.names().len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn posterior_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = OracleConfig::default();
    let out = run_oracle(&cfg).map_err(e)?;
    let elapsed = start.elapsed();
    let mass: f64 = out.posterior.probs.iter().sum();
    let pass = out.converged
        && out.tv <= cfg.tv_target
        && out.steps <= 20_000
        && (mass - 1.0).abs() <= 1e-10
        && out.posterior.trajectories.len() == 259
        && elapsed < Duration::from_secs(300);
    Ok(verdict(
        pass,
        format!(
            "{} trajectories, mass-1 {:.1e}, tv {:.4} after {} steps, {:.1}s",
            out.posterior.trajectories.len(),
            mass - 1.0,
            out.tv,
            out.steps,
            elapsed.as_secs_f64()
        ),
    ))
}

fn densification_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let (mut anchor_ok, mut worst) = (true, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(0..=64usize);
        let lambda = rng.gen_range(1..=16usize);
        let table: Vec<f64> = (0..=n).map(|_| rng.gen_range(-40.0..5.0)).collect();
        let z: Vec<Token> = (0..n).map(|_| Token(rng.gen_range(1..52))).collect();
        let d = densify_prefix_rewards(&z, lambda, |p| {
            let r = table[p.len()];
            Ok(RewardBreakdown { r_ans: r, r_lvip: 0.0, combined: r })
        })
        .map_err(e)?;
        let mut anchors: Vec<usize> = (0..n).filter(|t| t % lambda == 0).collect();
        anchors.push(n);
        if d.anchors != anchors || d.values.len() != n + 1 {
            anchor_ok = false;
            continue;
        }
        for &a in &anchors {
            anchor_ok &= d.values[a].to_bits() == table[a].to_bits();
        }
        for w in anchors.windows(2) {
            let (a, b) = (w[0], w[1]);
            for t in a + 1..b {
                let want = ((b - t) as f64 * table[a] + (t - a) as f64 * table[b]) / (b - a) as f64;
                worst = worst.max((d.values[t] - want).abs());
            }
        }
    }
    Ok(verdict(anchor_ok && worst <= 1e-12, format!("1000 pairs, anchors bitwise {anchor_ok}, max interior deviation {worst:.1e}")))
}

fn random_rationale(rng: &mut ChaCha8Rng, max: usize) -> Vec<Token> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| Token(rng.gen_range(1..52))).collect()
}

fn acceptance_semantics() -> Outcome {
    let m = ModelState::init(&tiny_config(), 401).map_err(e)?;
    let policy = ModelPolicy { model: m.clone() };
    let reward = ModelReward { scorer: freeze_scorer(&m), weights: RewardWeights::default(), backbone: LvipBackbone::Frozen };
    let pool = puzzles(200, 402, Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(403);
    let mut self_accepted = 0usize;
    for i in 0..1000 {
        let p = &pool[i % pool.len()];
        // even instances use the stored rationale, odd ones random tokens
        let z_ref = if i % 2 == 0 { p.rationale.clone() } else { random_rationale(&mut rng, 40) };
        self_accepted += accept(&reward, &policy, p, p.answer_index, &z_ref, &z_ref, 1.0).map_err(e)? as usize;
    }
    let grid: Vec<f64> = (0..10).map(|k| 10f64.powf(-(k as f64) / 3.0)).collect();
    let mut violations = 0usize;
    let mut sizes = vec![0usize; grid.len()];
    for p in pool.iter().take(100) {
        let candidates: Vec<Vec<Token>> = (0..8).map(|_| random_rationale(&mut rng, 40)).collect();
        let mut prev: Option<BTreeSet<usize>> = None;
        for (k, &delta) in grid.iter().enumerate() {
            let mut set = BTreeSet::new();
            for (j, c) in candidates.iter().enumerate() {
                if accept(&reward, &policy, p, p.answer_index, c, &p.rationale, delta).map_err(e)? {
                    set.insert(j);
                }
            }
            sizes[k] += set.len();
            if prev.as_ref().is_some_and(|q| !q.is_subset(&set)) {
                violations += 1;
            }
            prev = Some(set);
        }
    }
    Ok(verdict(
        self_accepted == 1000 && violations == 0,
        format!("self-acceptance {self_accepted}/1000, monotonicity violations {violations} over 100 pools, accepted per delta {sizes:?}"),
    ))
}

fn frozen_scorer_stationarity() -> Outcome {
    let start = Instant::now();
    let m = ModelState::init(&tiny_config(), 501).map_err(e)?;
    let scorer = freeze_scorer(&m);
    let probes = puzzles(20, 502, Split::Eval);
    let snapshot = |s: &Scorer| -> Result<Vec<u64>, String> {
        let mut out = Vec::new();
        for p in &probes {
            let prompt = prompt_for(p.rule.category);
            let input = ModelInput::new(p, &prompt);
            for cut in [0, p.rationale.len() / 2, p.rationale.len()] {
                out.extend(bits(&s.answer_log_probs(&input, &p.rationale[..cut]).map_err(e)?));
            }
            out.extend(bits(&s.model().forward(&input, &[]).map_err(e)?.lvip));
        }
        Ok(out)
    };
    let before = snapshot(&scorer)?;
    let cfg = GfnConfig { m: 2, steps: 500, learning_rate: 1e-3, ..GfnConfig::default() };
    let out = train_gfn(&cfg, &m, &scorer, &puzzles(50, 503, Split::Train)).map_err(e)?;
    let after = snapshot(&scorer)?;
    let updates = out.run.log.iter().filter(|r| !r.skipped).count();
    let moved = out.model.params() != m.params();
    Ok(verdict(
        before == after && moved && out.run.log.len() == 500,
        format!(
            "{} probe values bitwise equal: {}, {updates}/500 steps updated the policy, policy moved {moved}, {:.1}s",
            before.len(),
            before == after,
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn ablation(cfg: &RunConfig) -> (AblationResult, Duration) {
    let start = Instant::now();
    let variants = [Variant::SftNoLvip, Variant::SftLvip, Variant::SftLvipGfn];
    let res = run_ablation(cfg, &[0, 1, 2, 3, 4], &variants, |msg| eprintln!("  [ablation] {msg}"));
    (res, start.elapsed())
}

fn directional_ablation(res: &AblationResult, elapsed: Duration, cfg: &RunConfig) -> Outcome {
    for r in &res.rows {
        let f = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.3}"));
        println!(
            "    {:<13} seed {} overall {} fluid {} cryst {} visuo {} mental {} routines {} retrieval {}{}",
            r.variant.name(),
            r.seed,
            f(r.overall),
            f(r.fluid),
            f(r.crystallized),
            f(r.visuospatial),
            f(r.mental_simulation),
            f(r.visual_routines),
            f(r.lvip_retrieval),
            r.failure.as_ref().map_or(String::new(), |m| format!(" FAILED {m}"))
        );
    }
    let summary: Vec<String> = res
        .aggregates
        .iter()
        .map(|a| {
            format!(
                "{} {:.4}±{:.4} (n={})",
                a.variant.name(),
                a.mean.unwrap_or(f64::NAN),
                a.std.unwrap_or(f64::NAN),
                a.n_seeds
            )
        })
        .collect();
    let ordering: Vec<String> = res.ordering.iter().map(|o| format!("{}>={}-1pp:{:?}", o.better, o.worse, o.holds)).collect();
    let complete = res.aggregates.iter().all(|a| a.n_seeds == 5);
    let pass = complete
        && cfg.eval_count >= 500
        && res.ordering.len() == 2
        && res.ordering.iter().all(|o| o.holds == Some(true))
        && elapsed < Duration::from_secs(7200);
    Ok(verdict(
        pass,
        format!("{}; {}; {} eval puzzles, {:.0}s", summary.join(", "), ordering.join(", "), cfg.eval_count, elapsed.as_secs_f64()),
    ))
}

fn lvip_grounding(res: Option<&AblationResult>, cfg: &RunConfig) -> Outcome {
    let chance = 1.0 / RunConfig::default().task.num_options as f64;
    let scores: Vec<f64> = match res {
        Some(r) => r.rows.iter().filter(|r| r.variant == Variant::SftLvip).filter_map(|r| r.lvip_retrieval).collect(),
        None => {
            let data = build_datasets(cfg).map_err(e)?;
            let m = run_sft(cfg, 1.0, &data).map_err(e)?.model;
            vec![lvip_retrieval(&m, &data.eval).map_err(e)?]
        }
    };
    if scores.is_empty() {
        return Ok(verdict(false, "no completed SFT+LVIP run"));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let per_seed: Vec<String> = scores.iter().map(|s| format!("{s:.3}")).collect();
    Ok(verdict(
        cfg.eval_count >= 300 && mean > 1.5 * chance,
        format!(
            "retrieval {mean:.4} vs threshold {:.4} (chance {chance:.2}); per seed [{}] on {} held-out puzzles",
            1.5 * chance,
            per_seed.join(", "),
            cfg.eval_count
        ),
    ))
}

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|x| x.to_string())?;
    let mut cfg = RunConfig { train_count: 40, eval_count: 20, gfn_count: 10, ..RunConfig::default() };
    cfg.model = tiny_config();
    cfg.sft.epochs = 2;
    cfg.gfn.steps = 5;
    cfg.gfn.m = 2;
    cfg.map_n = 2;
    cfg.out_dir = dir.path().to_path_buf();
    let run = |cfg: &RunConfig| -> Result<(Vec<u64>, ModelState), String> {
        let data = build_datasets(cfg).map_err(e)?;
        let sft = run_sft(cfg, 1.0, &data).map_err(e)?;
        let gfn = run_gfn(cfg, &sft.model, &data).map_err(e)?;
        let report = evaluate_variant(cfg, Variant::SftLvipGfn, &gfn.model, &sft.model, &data.eval).map_err(e)?;
        let text = format!("{:?}{:?}{}", sft.history, gfn.run.log, serde_json::to_string(&report).unwrap());
        let mut v: Vec<u64> = text.bytes().map(u64::from).collect();
        for h in &sft.history {
            v.extend(bits(&[h.ce, h.mse, h.total, h.eval_accuracy, h.eval_mse]));
        }
        for l in &gfn.run.log {
            v.extend(bits(&[l.accept_rate, l.mean_r, l.mean_r_ans, l.mean_r_lvip, l.subtb_loss, l.delta_s]));
        }
        Ok((v, gfn.model))
    };
    let (a, model) = run(&cfg)?;
    let (b, _) = run(&cfg)?;
    let metrics_equal = a == b;

    let path = dir.path().join("model.ckpt");
    model.save(&path).map_err(e)?;
    let loaded = ModelState::load(&path).map_err(e)?;
    let mut forward_equal = true;
    for p in puzzles(10, 801, Split::Eval) {
        let prompt = prompt_for(p.rule.category);
        let input = ModelInput::new(&p, &prompt);
        let (x, y) = (model.forward(&input, &p.rationale).map_err(e)?, loaded.forward(&input, &p.rationale).map_err(e)?);
        forward_equal &= bits(x.logits.data()) == bits(y.logits.data())
            && bits(x.hidden.data()) == bits(y.hidden.data())
            && bits(&x.lvip) == bits(&y.lvip)
            && bits(&x.pooled_option) == bits(&y.pooled_option);
    }

    let records = generate_suite(10_000, 802, Split::Train, &task()).map_err(e)?;
    let data_path = dir.path().join("suite.jsonl");
    serialize_dataset(&records, &data_path).map_err(e)?;
    let back = load_dataset(&data_path).map_err(e)?;
    let dataset_equal = back == records;
    Ok(verdict(
        metrics_equal && forward_equal && dataset_equal,
        format!(
            "metrics bitwise {metrics_equal}, checkpoint forward bitwise {forward_equal}, {} records lossless {dataset_equal}",
            records.len()
        ),
    ))
}

fn map_reduction() -> Outcome {
    let m = ModelState::init(&tiny_config(), 901).map_err(e)?;
    let scorer = freeze_scorer(&m);
    let probes = puzzles(500, 902, Split::Eval);
    let single = SampleAnswerer { model: &m, max_len: 40, temperature: 1.0, seed: 903 };
    let map = MapAnswerer { model: &m, scorer: &scorer, n: 1, max_len: 40, temperature: 1.0, seed: 903 };
    let mut same = 0usize;
    for (i, p) in probes.iter().enumerate() {
        same += (single.answer(p, i).map_err(e)? == map.answer(p, i).map_err(e)?) as usize;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(904);
    let mut invariant = 0usize;
    for p in probes.iter().take(100) {
        let prompt = prompt_for(p.rule.category);
        let input = ModelInput::new(p, &prompt);
        let cands = sample_rationales(&m, &input, 8, 1.0, 40, &mut rng).map_err(e)?;
        let choice = map_select(&scorer, &input, &cands).map_err(e)?;
        let c = rng.gen_range(-100.0..100.0);
        let shifted: Vec<f64> = choice.scores.iter().map(|s| s + c).collect();
        invariant += (select_index(&shifted).map_err(e)? == choice.index) as usize;
    }
    Ok(verdict(
        same == 500 && invariant == 100,
        format!("N=1 agrees with single-sample decoding on {same}/500 probes; argmax unchanged by a common shift on {invariant}/100 candidate sets"),
    ))
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("VISREASON_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("VISREASON_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let wanted = |k: usize| only.as_ref().is_none_or(|s| s.contains(&k));

    let cfg = RunConfig::default();
    let ablation_result = (wanted(6) || wanted(7)).then(|| {
        eprintln!("running the 5-seed ablation; this takes a while");
        ablation(&cfg)
    });

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "gradient fidelity", Box::new(gradient_fidelity)),
        (2, "posterior oracle", Box::new(posterior_oracle)),
        (3, "densification exactness", Box::new(densification_exactness)),
        (4, "acceptance semantics", Box::new(acceptance_semantics)),
        (5, "frozen scorer stationarity", Box::new(frozen_scorer_stationarity)),
        (
            6,
            "directional ablation",
            Box::new(|| {
                let (res, t) = ablation_result.as_ref().unwrap();
                directional_ablation(res, *t, &cfg)
            }),
        ),
        (7, "LVIP grounding", Box::new(|| lvip_grounding(ablation_result.as_ref().map(|r| &r.0), &cfg))),
        (8, "determinism and persistence", Box::new(determinism_and_persistence)),
        (9, "MAP reduction", Box::new(map_reduction)),
    ];

    let mut failed = 0usize;
    for (k, name, check) in &criteria {
        if !wanted(*k) {
            continue;
        }
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(msg) => (false, format!("error: {msg}")),
        };
        failed += !pass as usize;
        println!("criterion {k} ({name}): {} | {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {failed} criteria failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
