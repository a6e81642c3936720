use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visreason::model::*;
use visreason::numerics::{check_gradient, Tensor};
use visreason::sft::*;
use visreason::tasks::*;
use visreason::Error;

fn tiny_config() -> ModelConfig {
    ModelConfig { d_vis: 8, d_model: 16, n_heads: 2, ffn_width: 24, lvip_hidden: 12, ..ModelConfig::default() }
}

fn task() -> TaskConfig {
    TaskConfig { bongard_side: 2, transform_side: 2, odd_side: 2, ..TaskConfig::default() }
}

fn puzzles(n: usize, seed: u64) -> Vec<Puzzle> {
    generate_suite(n, seed, Split::Train, &task()).unwrap().into_iter().map(|r| r.puzzle).collect()
}

fn bits(ts: &[Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn beta_zero_is_pure_cross_entropy() {
    let m = ModelState::init(&tiny_config(), 1).unwrap();
    let batch = puzzles(5, 2);
    let l = sft_loss(&m, &batch, 0.0).unwrap();
    assert!(l.ce > 0.0 && l.mse > 0.0);
    assert!((l.total - l.ce).abs() <= 1e-12 * l.ce, "{l:?}");
}

#[test]
fn perfect_lvip_prediction_adds_nothing() {
    let m = ModelState::init(&tiny_config(), 3).unwrap();
    let batch = puzzles(4, 4);
    let targets: Vec<Vec<f64>> = batch
        .iter()
        .map(|p| {
            let prompt = prompt_for(p.rule.category);
            m.forward(&ModelInput::new(p, &prompt), &[]).unwrap().lvip
        })
        .collect();
    let l = sft_loss_with_targets(&m, &batch, &targets, 1.0).unwrap();
    assert!(l.mse < 1e-28, "{l:?}");
    assert!((l.total - l.ce).abs() <= 1e-12 * l.ce);
}

#[test]
fn loss_is_ce_plus_beta_mse_and_monotone_in_beta() {
    let m = ModelState::init(&tiny_config(), 5).unwrap();
    let batch = puzzles(3, 6);
    let mut prev = f64::NEG_INFINITY;
    for beta in [0.0, 0.1, 0.5, 1.0, 2.0, 10.0] {
        let l = sft_loss(&m, &batch, beta).unwrap();
        assert!((l.total - (l.ce + beta * l.mse)).abs() <= 1e-12 * l.total, "beta {beta}: {l:?}");
        assert!(l.total >= prev);
        prev = l.total;
    }
}

#[test]
fn cross_entropy_matches_an_independent_sum_of_token_log_probs() {
    let m = ModelState::init(&tiny_config(), 7).unwrap();
    let p = puzzles(1, 8).remove(0);
    let prompt = prompt_for(p.rule.category);
    let input = ModelInput::new(&p, &prompt);
    let text = target_sequence(&p).unwrap();
    // next_token_log_probs recomputes the whole forward pass per prefix
    let mut want = 0.0;
    for j in 0..text.len() {
        want -= m.next_token_log_probs(&input, &text[..j]).unwrap()[text[j].id()];
    }
    let l = sft_loss(&m, std::slice::from_ref(&p), 0.0).unwrap();
    assert!((l.ce - want).abs() < 1e-10 * want, "{} vs {want}", l.ce);
}

#[test]
fn gradients_match_finite_differences_for_every_group() {
    let m = ModelState::init(&tiny_config(), 9).unwrap();
    let batch = puzzles(2, 10);
    let targets = lvip_targets(&m, &batch).unwrap();
    let (_, grads) = sft_gradients(&m, &batch, &targets, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (k, name) in m.names().iter().enumerate() {
        let n = m.params()[k].len();
        let mut idx: Vec<usize> = (0..3).map(|_| rng.gen_range(0..n)).collect();
        idx.push(grads[k].data().iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0);
        let report = check_gradient(
            grads[k].data(),
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
        .unwrap();
        assert!(report.passed(), "{name}: max rel {:e} at {:?}", report.max_rel_error, report.violations);
    }
}

#[test]
fn gradients_at_beta_zero_ignore_the_targets() {
    let m = ModelState::init(&tiny_config(), 12).unwrap();
    let batch = puzzles(3, 13);
    let t1 = lvip_targets(&m, &batch).unwrap();
    let t2: Vec<Vec<f64>> = t1.iter().map(|t| t.iter().map(|v| v * 3.0 - 1.0).collect()).collect();
    let (l1, g1) = sft_gradients(&m, &batch, &t1, 0.0).unwrap();
    let (l2, g2) = sft_gradients(&m, &batch, &t2, 0.0).unwrap();
    assert_eq!(l1.total.to_bits(), l2.total.to_bits());
    assert_eq!(bits(&g1), bits(&g2));
    for (k, name) in m.names().iter().enumerate() {
        if name.starts_with("lvip.") {
            assert!(g1[k].data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn single_puzzle_is_memorized() {
    let p = puzzles(1, 14);
    let cfg = SftConfig { epochs: 150, batch_size: 1, learning_rate: 1e-2, ..SftConfig::default() };
    let out = train_sft(&cfg, ModelState::init(&tiny_config(), 15).unwrap(), &p, &p).unwrap();
    let last = out.history.last().unwrap();
    assert!(last.total < 0.05, "{last:?}");
    assert_eq!(last.eval_accuracy, 1.0);
    assert_eq!(out.history.len(), cfg.epochs + 1);
    assert!(out.history[0].total > 1.0);
}

#[test]
fn training_is_deterministic() {
    let train = puzzles(12, 16);
    let eval = puzzles(4, 17);
    let cfg = SftConfig { epochs: 2, batch_size: 4, seed: 3, ..SftConfig::default() };
    let run = || train_sft(&cfg, ModelState::init(&tiny_config(), 18).unwrap(), &train, &eval).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(bits(a.model.params()), bits(b.model.params()));
    let c = train_sft(&SftConfig { seed: 4, ..cfg.clone() }, ModelState::init(&tiny_config(), 18).unwrap(), &train, &eval)
        .unwrap();
    assert_ne!(bits(a.model.params()), bits(c.model.params()));
}

#[test]
fn lvip_term_lowers_held_out_mse() {
    let train = puzzles(60, 19);
    let eval = puzzles(20, 20);
    let cfg = SftConfig { epochs: 4, batch_size: 4, ..SftConfig::default() };
    let out = train_sft(&cfg, ModelState::init(&tiny_config(), 21).unwrap(), &train, &eval).unwrap();
    let (first, last) = (out.history[0], *out.history.last().unwrap());
    assert!(last.eval_mse < first.eval_mse, "{first:?} -> {last:?}");
    assert!(last.ce < first.ce);
}

#[test]
fn frozen_visual_encoder_does_not_move() {
    let train = puzzles(8, 22);
    let init = ModelState::init(&tiny_config(), 23).unwrap();
    let cfg = SftConfig { epochs: 1, batch_size: 4, freeze_visual_encoder: true, ..SftConfig::default() };
    let out = train_sft(&cfg, init.clone(), &train, &train).unwrap();
    for name in init.visual_encoder_names() {
        assert_eq!(init.param(name), out.model.param(name), "{name}");
    }
    assert_ne!(init.param("head.w"), out.model.param("head.w"));
    let all = sft_trainable(&init, false);
    assert_eq!(all.len(), init.names().len());
    assert_eq!(sft_trainable(&init, true).len(), all.len() - init.visual_encoder_names().len());
}

#[test]
fn scorer_is_a_snapshot() {
    let p = puzzles(1, 24).remove(0);
    let prompt = prompt_for(p.rule.category);
    let input = ModelInput::new(&p, &prompt);
    let mut m = ModelState::init(&tiny_config(), 25).unwrap();
    let scorer = freeze_scorer(&m);
    let before = scorer.answer_log_probs(&input, &p.rationale).unwrap();
    for t in m.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    let after = scorer.answer_log_probs(&input, &p.rationale).unwrap();
    assert_eq!(before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), after.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_ne!(m.answer_log_probs(&input, &p.rationale).unwrap(), before);
    assert_eq!(scorer.log_prob(&input, &p.rationale, 2).unwrap(), before[2]);
    assert!(matches!(scorer.log_prob(&input, &p.rationale, 4), Err(Error::Argument(_))));
    assert_eq!(scorer.decode(&input, &p.rationale).unwrap(), argmax(&before));
}

#[test]
fn bad_inputs_are_rejected() {
    let m = ModelState::init(&tiny_config(), 26).unwrap();
    let train = puzzles(2, 27);
    for cfg in [
        SftConfig { beta: -1.0, ..SftConfig::default() },
        SftConfig { beta: f64::NAN, ..SftConfig::default() },
        SftConfig { learning_rate: 0.0, ..SftConfig::default() },
        SftConfig { batch_size: 0, ..SftConfig::default() },
        SftConfig { max_rationale_len: 0, ..SftConfig::default() },
    ] {
        assert!(matches!(train_sft(&cfg, m.clone(), &train, &train), Err(Error::Config(_))), "{cfg:?}");
    }
    assert!(train_sft(&SftConfig::default(), m.clone(), &[], &train).is_err());
    assert!(matches!(sft_loss(&m, &[], 1.0), Err(Error::Argument(_))));

    let mut bad = train.clone();
    let pick = bad[0].rationale.len() - 1;
    let wrong = (bad[0].answer_index + 1) % bad[0].num_options();
    bad[0].rationale[pick] = Token::option(wrong).unwrap();
    assert!(matches!(train_sft(&SftConfig::default(), m.clone(), &bad, &train), Err(Error::Argument(_))));

    let t = lvip_targets(&m, &train).unwrap();
    assert!(matches!(sft_loss_with_targets(&m, &train, &t[..1], 1.0), Err(Error::Dimension(_))));
}

#[test]
fn target_sequence_appends_end_and_answer() {
    for p in puzzles(10, 28) {
        let x = target_sequence(&p).unwrap();
        assert_eq!(&x[..p.rationale.len()], &p.rationale[..]);
        assert_eq!(x[x.len() - 2], Token::END);
        assert_eq!(x[x.len() - 1].as_option(), Some(p.answer_index));
    }
}

#[test]
fn cosine_schedule_runs_from_full_to_final_fraction() {
    assert_eq!(cosine_lr(2e-3, 0.1, 0, 101), 2e-3);
    assert!((cosine_lr(2e-3, 0.1, 50, 101) - 1.1e-3).abs() < 1e-15);
    assert!((cosine_lr(2e-3, 0.1, 100, 101) - 2e-4).abs() < 1e-18);
    assert_eq!(cosine_lr(2e-3, 1.0, 37, 101), 2e-3);
    assert_eq!(cosine_lr(2e-3, 0.1, 0, 1), 2e-3);
    let xs: Vec<f64> = (0..101).map(|s| cosine_lr(1.0, 0.0, s, 101)).collect();
    assert!(xs.windows(2).all(|w| w[1] <= w[0]));
    assert!(matches!(
        train_sft(&SftConfig { final_lr_fraction: 1.5, ..SftConfig::default() }, ModelState::init(&tiny_config(), 29).unwrap(), &puzzles(2, 30), &[]),
        Err(Error::Config(_))
    ));
}
