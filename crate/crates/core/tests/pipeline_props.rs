use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sherlock::config::RunConfig;
use sherlock::corpus::{generate_corpus, Corpus, CorpusConfig};
use sherlock::pipeline::*;
use sherlock::{Error, Tensor};

fn small_corpus() -> Corpus {
    generate_corpus(&CorpusConfig {
        writers: 4,
        pages_per_writer: 10,
        height: 32,
        width: 32,
        seed: 5,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn small_config(epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.patch = 8;
    c.model.embed_dim = 8;
    c.model.out_dim = 6;
    c.model.conv_channels = vec![3, 4, 6];
    c.schedule.epochs = epochs;
    c.schedule.batch_size = 8;
    c.schedule.operator_every = 2;
    c.schedule.operator_warmup_epochs = 1;
    c.matching.boost_every = 2;
    c.matching.prune_every = 3;
    c.probe.steps = 30;
    c.seed = 11;
    c
}

#[test]
fn zero_epochs_keeps_the_initialization() {
    let corpus = small_corpus();
    let c = small_config(0);
    let out = pretrain(&c, &corpus).unwrap();
    assert!(out.history.is_empty());
    let init = TrainState::new(&c, 32, 32).unwrap();
    assert_eq!(out.state.to_checkpoint(&c).encode(), init.to_checkpoint(&c).encode());
}

#[test]
fn identical_runs_are_bit_identical() {
    let corpus = small_corpus();
    let c = small_config(2);
    let a = run_once(&c, &corpus).unwrap();
    let b = run_once(&c, &corpus).unwrap();
    assert_eq!(a.state.to_checkpoint(&c).encode(), b.state.to_checkpoint(&c).encode());
    assert_eq!(a.probe, b.probe);
    assert_eq!(a.report.without_timing(), b.report.without_timing());
    assert_eq!(a.history, b.history);
    let mut other = c.clone();
    other.seed += 1;
    let d = pretrain(&other, &corpus).unwrap();
    assert_ne!(d.state.to_checkpoint(&c).encode(), a.state.to_checkpoint(&c).encode());
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let corpus = small_corpus();
    let mut c = small_config(3);
    c.toggles.adaptive_matching = false;
    let full = pretrain(&c, &corpus).unwrap();

    let mut first = c.clone();
    first.schedule.epochs = 1;
    let part = pretrain(&first, &corpus).unwrap();
    let ck = part.state.to_checkpoint(&c);
    let restored = TrainState::from_checkpoint(&sherlock::checkpoint::Checkpoint::decode(&ck.encode()).unwrap(), &c).unwrap();
    let mut seen = Vec::new();
    let rest = pretrain_from(&c, &corpus, restored, |s, log| {
        seen.push((s.epoch, log.epoch));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![(2, 2), (3, 3)]);
    assert_eq!(rest.state, full.state);
    assert_eq!(rest.history[..], full.history[1..]);
}

#[test]
fn every_epoch_reports_finite_terms() {
    let corpus = small_corpus();
    let out = pretrain(&small_config(3), &corpus).unwrap();
    assert_eq!(out.history.len(), 3);
    for log in &out.history {
        assert!(log.loss.is_finite() && log.contrastive.is_finite() && log.momentum.is_finite());
        assert!(log.operator_objective.is_some_and(f64::is_finite));
    }
    assert!(out.state.model.is_finite());
}

#[test]
fn finetune_and_evaluate_leave_the_model_alone() {
    let corpus = small_corpus();
    let c = small_config(1);
    let state = pretrain(&c, &corpus).unwrap().state;
    let before = state.to_checkpoint(&c).encode();
    let probe = finetune(&state, &c, &corpus).unwrap();
    let report = evaluate(&state, &c, &probe, &corpus).unwrap();
    robustness_sweep(&state, &c, &probe, &corpus, SweepKind::Forgery, &[0.5]).unwrap();
    assert_eq!(state.to_checkpoint(&c).encode(), before);
    let m = report.rows[0].metrics;
    assert!(m.top5 >= m.top1 && (0.0..=1.0).contains(&m.top1) && (0.0..=1.0).contains(&m.top5));
    assert!(m.risk >= 0.0);
    assert!(report.rows.iter().all(|r| r.seed == c.seed && r.config_digest == report.config_digest));
}

#[test]
fn sweep_level_zero_is_the_clean_result() {
    let corpus = small_corpus();
    let c = small_config(1);
    let state = pretrain(&c, &corpus).unwrap().state;
    let probe = finetune(&state, &c, &corpus).unwrap();
    let clean = evaluate(&state, &c, &probe, &corpus).unwrap();
    for kind in [SweepKind::Damage, SweepKind::Forgery] {
        let swept = robustness_sweep(&state, &c, &probe, &corpus, kind, &[0.0]).unwrap();
        assert_eq!(swept.rows[0].metrics, clean.rows[0].metrics);
    }
    let e = robustness_sweep(&state, &c, &probe, &corpus, SweepKind::Damage, &[0.95]).unwrap_err();
    assert!(matches!(e, Error::InvalidArgument(_)));
}

#[test]
fn perturbations_touch_the_expected_pages() {
    let corpus = small_corpus();
    let clean = perturb_test_pages(&corpus, SweepKind::Damage, 0.0, 3).unwrap();
    let forged = perturb_test_pages(&corpus, SweepKind::Forgery, 0.5, 3).unwrap();
    let changed = clean.images.iter().zip(&forged.images).filter(|(a, b)| a != b).count();
    assert_eq!(changed, (0.5 * clean.len() as f64).round() as usize);
    assert_eq!(forged.labels, clean.labels);

    let damaged = perturb_test_pages(&corpus, SweepKind::Damage, 0.3, 3).unwrap();
    assert!(clean.images.iter().zip(&damaged.images).all(|(a, b)| a != b));
    assert_eq!(damaged, perturb_test_pages(&corpus, SweepKind::Damage, 0.3, 3).unwrap());
}

#[test]
fn separable_embeddings_are_learned_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (classes, per, d) = (6, 5, 8);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for k in 0..classes {
        for _ in 0..per {
            let mut row: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect();
            row[k] += 1.0;
            data.extend(row);
            labels.push(k);
        }
    }
    let f = Tensor::new(&[classes * per, d], data).unwrap();
    let probe = fit_probe(&f, &labels, classes, &Default::default()).unwrap();
    let m = score_logits(&probe.logits(&f).unwrap(), &labels).unwrap();
    assert_eq!(m.top1, 1.0);
    assert!(probe.masked.is_empty());
}

#[test]
fn top_k_matches_a_hand_count() {
    // true-class ranks 0, 4, 5, 6 and 2; the last row loses its tie to indices 0 and 1
    let rows = [
        ([5.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0),
        ([6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0], 4),
        ([6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0], 5),
        ([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, -1.0], 6),
        ([1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0], 2),
    ];
    let data: Vec<f64> = rows.iter().flat_map(|(r, _)| r.to_vec()).collect();
    let labels: Vec<usize> = rows.iter().map(|(_, y)| *y).collect();
    let m = score_logits(&Tensor::new(&[5, 7], data).unwrap(), &labels).unwrap();
    assert_eq!(m.top1, 1.0 / 5.0);
    assert_eq!(m.top5, 3.0 / 5.0);
    assert_eq!(m.pages, 5);
}

#[test]
fn uniform_logits_hit_chance_under_the_tie_rule() {
    let labels: Vec<usize> = (0..10).collect();
    let m = score_logits(&Tensor::zeros(&[10, 10]), &labels).unwrap();
    assert_eq!(m.top1, 0.1);
    assert_eq!(m.top5, 0.5);
    assert!((m.risk - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_one_hot_risk_vanishes() {
    let labels = [1usize, 3, 0];
    let mut last = f64::INFINITY;
    for scale in [1.0, 5.0, 25.0] {
        let mut data = vec![0.0; 12];
        for (i, &y) in labels.iter().enumerate() {
            data[i * 4 + y] = scale;
        }
        let m = score_logits(&Tensor::new(&[3, 4], data).unwrap(), &labels).unwrap();
        assert_eq!((m.top1, m.top5), (1.0, 1.0));
        assert!(m.risk < last);
        last = m.risk;
    }
    assert!(last < 1e-9);
}

#[test]
fn full_case_of_an_ablation_is_the_default_path() {
    let corpus = small_corpus();
    let c = small_config(1);
    let direct = run_once(&c, &corpus).unwrap();
    let cases = default_cases(false);
    assert_eq!(cases.len(), 4);
    let report = ablate(&c, &corpus, &cases[..1], &[c.seed]).unwrap();
    assert_eq!(report.rows[0].top1, vec![direct.report.rows[0].metrics.top1]);
    assert_eq!(report.rows[0].median_risk, direct.report.rows[0].metrics.risk);
    assert!(report.regressions.is_empty());
}

#[test]
fn regressions_are_flagged() {
    let corpus = small_corpus();
    let c = small_config(1);
    let report = ablate(&c, &corpus, &default_cases(false), &[1, 2]).unwrap();
    let full = report.row("full").unwrap().median_top1;
    for r in &report.rows {
        let flagged = report.regressions.iter().any(|g| g.starts_with(&format!("{} ", r.case.name)));
        assert_eq!(flagged, r.median_top1 > full, "{}", r.case.name);
    }
    assert!(report.to_table().lines().count() >= 5);
}

#[test]
fn full_path_gradients_match_finite_differences() {
    let r = full_path_check(2, 1e-6, 1e-4).unwrap();
    assert!(r.passed(), "max rel error {:e}: {:?}", r.max_rel_error, r.diagnostics);
}
