use proptest::prelude::*;

use super::*;
use crate::autodiff::Tape;
use crate::controller::{ModelFamily, StackOptions};
use crate::tasks::corpus::{batchify, Vocabulary};
use crate::tasks::{build_task_grammar, Dataset, Task, TaskGrammar, TaskParams};
use crate::tensor::Tensor;

fn marked(lo: usize, hi: usize) -> TaskGrammar {
    build_task_grammar(Task::MarkedReversal, TaskParams::new(lo, hi)).unwrap()
}

fn small_cfg(family: ModelFamily) -> TrainConfig {
    let mut cfg = TrainConfig::cfl(family);
    cfg.hidden = 6;
    cfg.stack.m = 3;
    cfg.max_epochs = 2;
    cfg.batch_size = 4;
    cfg
}

fn zero_params(model: &mut Model) {
    for (_, t) in model.params.iter_mut() {
        t.data_mut().fill(0.0);
    }
}

#[test]
fn zero_epochs_return_the_initialization() {
    let g = marked(3, 9);
    let (train, valid) = (g.sample(20, 1).unwrap(), g.sample(10, 2).unwrap());
    let mut cfg = small_cfg(ModelFamily::NsSU);
    cfg.max_epochs = 0;
    let out = train_cfl(&cfg, &train, &valid).unwrap();
    let init = Model::for_task(&cfg, &train.vocab).unwrap();
    assert_eq!(out.model.params, init.params);
    assert_eq!(out.epochs_run, 0);
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn oracle_model_has_zero_gap_in_every_bin() {
    for task in Task::ALL {
        let g = build_task_grammar(task, TaskParams::new(4, 14)).unwrap();
        let ds = g.sample(60, 3).unwrap();
        let r = evaluate(&g, &ds, Some(&g), true).unwrap();
        assert_eq!(r.gap, Some(0.0), "{task}");
        assert!(r.bins.iter().all(|b| b.gap == Some(0.0)));
    }
}

#[test]
fn uniform_model_cross_entropy() {
    let g = marked(3, 11);
    let ds = g.sample(30, 4).unwrap();
    let u = UniformModel {
        terminals: g.vocab().to_vec(),
    };
    let r = evaluate(&u, &ds, None, false).unwrap();
    assert!((r.cross_entropy - 4f64.ln()).abs() < 1e-12);
    // a zero-weight network is uniform as well
    let mut m = Model::for_task(&small_cfg(ModelFamily::Lstm), g.vocab()).unwrap();
    zero_params(&mut m);
    let r = evaluate(&m, &ds, None, false).unwrap();
    assert!((r.cross_entropy - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn gap_is_invariant_to_duplication() {
    let g = marked(3, 11);
    let ds = g.sample(25, 5).unwrap();
    let m = Model::for_task(&small_cfg(ModelFamily::Jm), g.vocab()).unwrap();
    let once = evaluate(&m, &ds, Some(&g), false).unwrap().gap.unwrap();
    let mut twice = ds.clone();
    twice.strings.extend(ds.strings.clone());
    let again = evaluate(&m, &twice, Some(&g), false).unwrap().gap.unwrap();
    assert!((once - again).abs() < 1e-12);
}

#[test]
fn evaluation_rejects_foreign_vocabulary() {
    let g = marked(3, 9);
    let d = build_task_grammar(Task::Dyck2, TaskParams::new(2, 8)).unwrap();
    let ds = d.sample(5, 1).unwrap();
    let m = Model::for_task(&small_cfg(ModelFamily::Lstm), g.vocab()).unwrap();
    assert_eq!(evaluate(&m, &ds, None, false).unwrap_err().exit_code(), 1);
}

#[test]
fn batched_log_probs_match_single_sequences() {
    let g = marked(3, 9);
    let ds = g.sample(12, 6).unwrap();
    for fam in [ModelFamily::Lstm, ModelFamily::NsS] {
        let m = Model::for_task(&small_cfg(fam), g.vocab()).unwrap();
        let batched = m.log_probs(&ds.strings).unwrap();
        for (w, lp) in ds.strings.iter().zip(batched) {
            assert!((m.log_prob(w).unwrap() - lp).abs() < 1e-10);
        }
    }
}

#[test]
fn training_is_deterministic_and_improves() {
    let g = marked(3, 9);
    let (train, valid) = (g.sample(60, 1).unwrap(), g.sample(20, 2).unwrap());
    let mut cfg = small_cfg(ModelFamily::Lstm);
    cfg.max_epochs = 4;
    cfg.learning_rate = 0.01;
    let a = train_cfl(&cfg, &train, &valid).unwrap();
    let b = train_cfl(&cfg, &train, &valid).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.params, b.model.params);
    let gaps = a.log.series("valid", "gap");
    assert!(a.best_gap < gaps[0].1);
    assert_eq!(a.best_gap, gaps.iter().map(|g| g.1).fold(f64::INFINITY, f64::min));
}

#[test]
fn early_stop_below_gap() {
    let g = marked(3, 9);
    let (train, valid) = (g.sample(20, 1).unwrap(), g.sample(10, 2).unwrap());
    let mut cfg = small_cfg(ModelFamily::Lstm);
    cfg.max_epochs = 5;
    cfg.stop_below_gap = Some(f64::INFINITY);
    let out = train_cfl(&cfg, &train, &valid).unwrap();
    assert_eq!(out.epochs_run, 0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let g = marked(3, 9);
    let (train, valid) = (g.sample(20, 1).unwrap(), g.sample(10, 2).unwrap());
    for fam in ModelFamily::ALL {
        let cfg = small_cfg(fam);
        let out = train_cfl(&cfg, &train, &valid).unwrap();
        let ck = Checkpoint::from_model(&out.model, &cfg, Some(&out.optimizer));
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SWFA");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let before = evaluate(&out.model, &valid, Some(&g), true).unwrap();
        let after = evaluate(&back.model().unwrap(), &valid, Some(&g), true).unwrap();
        assert_eq!(before, after);
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let m = Model::for_task(&small_cfg(ModelFamily::Lstm), marked(3, 5).vocab()).unwrap();
    let ck = Checkpoint::from_model(&m, &small_cfg(ModelFamily::Lstm), None);
    let mut bytes = ck.to_bytes().unwrap();
    assert_eq!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3])
            .unwrap_err()
            .exit_code(),
        2
    );
    bytes[0] = b'X';
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap_err().exit_code(), 2);
    let dir = tempfile::tempdir().unwrap();
    let e = Checkpoint::load(&dir.path().join("none.ckpt")).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn metrics_log_round_trip() {
    let mut log = MetricsLog::default();
    log.push(0, "valid", "gap", 0.125);
    log.push(1, "train", "perplexity", f64::INFINITY);
    log.push(2, "valid", "gap", 1.0 / 3.0);
    assert_eq!(MetricsLog::parse(&log.to_text()).unwrap(), log);
    assert!(MetricsLog::parse("epoch=1 split=x").is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.log");
    log.append_to(&p).unwrap();
    log.append_to(&p).unwrap();
    let back = MetricsLog::parse(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(back.records.len(), 6);
}

fn toy_corpus() -> CorpusData {
    let train = "the cat sat on the mat\nthe dog sat on the log\na cat saw a dog\nthe dog saw the cat\n".repeat(6);
    let valid = "the cat sat on the log\na dog saw the mat\n";
    let vocab = Vocabulary::from_text(&train).unwrap();
    CorpusData {
        train: vocab.encode(&train),
        valid: vocab.encode(valid),
        test: Some(vocab.encode(valid)),
        vocab,
    }
}

fn corpus_cfg(family: ModelFamily) -> TrainConfig {
    let mut cfg = TrainConfig::corpus(family);
    cfg.hidden = 8;
    cfg.batch_size = 3;
    cfg.chunk_len = 7;
    cfg.max_epochs = 3;
    cfg.stack = StackOptions {
        states: 1,
        symbols: 2,
        m: 4,
        band: Some(5),
        push_hidden: false,
        max_depth: Some(4),
    };
    cfg
}

#[test]
fn uniform_logits_give_vocabulary_perplexity() {
    let data = toy_corpus();
    let mut m = Model::for_corpus(&corpus_cfg(ModelFamily::NsSU), &data.vocab).unwrap();
    zero_params(&mut m);
    let ppl = corpus_perplexity(&m, &data.train, 3, 7).unwrap();
    assert!((ppl - data.vocab.len() as f64).abs() < 1e-9 * ppl);
}

#[test]
fn single_chunk_gradients_equal_full_backprop() {
    let data = toy_corpus();
    let stream = &data.train[..20];
    let m = Model::for_corpus(&corpus_cfg(ModelFamily::NsSU), &data.vocab).unwrap();
    let chunks = batchify(stream, 1, 1, 100).unwrap();
    assert_eq!(chunks.len(), 1);
    let mut tape = Tape::new();
    let mut st = m.controller.start(&mut tape, 1).unwrap();
    let c = &chunks[0];
    let nll = m
        .controller
        .score_chunk(&mut tape, &m.params, &mut st, &c.inputs, &c.targets, &c.weights)
        .unwrap();
    let g_chunk = tape.backward(nll, &m.params).unwrap();
    // the same sequence scored token by token on one tape
    let mut tape = Tape::new();
    let mut st = m.controller.start(&mut tape, 1).unwrap();
    let mut prev = 1;
    let mut total = None;
    for &t in stream {
        let out = m
            .controller
            .step(
                &mut tape,
                &m.params,
                &mut st,
                crate::controller::StepInput::Tokens(&[prev]),
                true,
            )
            .unwrap();
        let lp = tape.log_softmax(out.logits);
        let p = tape.pick(lp, &[t]).unwrap();
        let s = tape.sum(p);
        total = Some(match total {
            None => s,
            Some(a) => tape.add(a, s).unwrap(),
        });
        prev = t;
    }
    let loss = tape.scale(total.unwrap(), -1.0);
    let g_full = tape.backward(loss, &m.params).unwrap();
    for (name, a) in g_chunk.iter() {
        let b = g_full.get(name).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{name}");
        }
    }
}

#[test]
fn detach_at_chunk_boundary_preserves_forward_values() {
    let data = toy_corpus();
    for fam in [ModelFamily::Lstm, ModelFamily::Jm, ModelFamily::NsSU] {
        let m = Model::for_corpus(&corpus_cfg(fam), &data.vocab).unwrap();
        let chunks = batchify(&data.train[..40], 1, 2, 10).unwrap();
        assert_eq!(chunks.len(), 2);
        // carried and detached
        let split = corpus_perplexity(&m, &data.train[..40], 2, 10).unwrap();
        // one tape, no detach
        let mut tape = Tape::new();
        let mut st = m.controller.start(&mut tape, 2).unwrap();
        let mut nll = 0.0;
        for c in &chunks {
            let v = m
                .controller
                .score_chunk(&mut tape, &m.params, &mut st, &c.inputs, &c.targets, &c.weights)
                .unwrap();
            nll += tape.value(v).item();
        }
        let joined = (nll / 40.0).exp();
        assert_eq!(split.to_bits(), joined.to_bits(), "{fam}");
    }
}

#[test]
fn corpus_training_improves_and_resumes_bit_identically() {
    let data = toy_corpus();
    let cfg = corpus_cfg(ModelFamily::NsSU);
    let full = train_corpus(&cfg, &data, CorpusRun::default()).unwrap();
    assert!(full.finished);
    let ppl = full.log.series("valid", "perplexity");
    assert!(ppl[1].1 < ppl[0].1);
    let n_chunks = batchify(&data.train, 1, 3, 7).unwrap().len();
    let halted = train_corpus(
        &cfg,
        &data,
        CorpusRun {
            resume: None,
            halt_after_chunks: Some(n_chunks + 2),
        },
    )
    .unwrap();
    assert!(!halted.finished);
    let bytes = halted.checkpoint.to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(ck.carry.is_some());
    let resumed = train_corpus(
        &cfg,
        &data,
        CorpusRun {
            resume: Some(ck),
            halt_after_chunks: None,
        },
    )
    .unwrap();
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    assert_eq!(resumed.log, full.log);
    assert_eq!(resumed.test_ppl.unwrap().to_bits(), full.test_ppl.unwrap().to_bits());
}

#[test]
fn gref_is_rejected_in_corpus_mode() {
    let data = toy_corpus();
    let e = train_corpus(&corpus_cfg(ModelFamily::Gref), &data, CorpusRun::default()).unwrap_err();
    assert_eq!(e.exit_code(), 1);
}

fn fake_trainer(cfg: &TrainConfig) -> crate::Result<(u64, f64)> {
    // deterministic metric from the trial's hyperparameters
    let m = (cfg.learning_rate.ln() + 5.0).abs() + (cfg.seed % 97) as f64 * 1e-3;
    Ok((cfg.seed, m))
}

#[test]
fn single_point_search_returns_that_trial() {
    let base = small_cfg(ModelFamily::Lstm);
    let opts = SearchOptions::grid(&[0.01], 1, 7);
    let out = search(&base, &opts, fake_trainer).unwrap();
    assert_eq!(out.trials.len(), 1);
    assert_eq!(out.best_index, 0);
    assert_eq!(out.best, out.trials[0].seed);
}

#[test]
fn search_is_deterministic_and_selects_the_minimum() {
    let base = small_cfg(ModelFamily::Lstm);
    for opts in [
        SearchOptions::grid(&CFL_LEARNING_RATES, 5, 3),
        SearchOptions::random(10, 3),
    ] {
        let a = search(&base, &opts, fake_trainer).unwrap();
        let b = search(&base, &opts, fake_trainer).unwrap();
        assert_eq!(a.trials, b.trials);
        let scan = a
            .trials
            .iter()
            .min_by(|x, y| x.metric.unwrap().total_cmp(&y.metric.unwrap()))
            .unwrap();
        assert_eq!(scan.index, a.best_index);
        assert_eq!(a.best, scan.seed);
    }
}

#[test]
fn random_search_draws_within_ranges() {
    let base = TrainConfig::corpus(ModelFamily::Lstm);
    let plan = SearchOptions::random(200, 11).plan(&base).unwrap();
    assert_eq!(plan.len(), 200);
    for (t, cfg) in &plan {
        assert!((1.0..=100.0).contains(&t.learning_rate));
        assert!((1e-5..=1e-3).contains(&t.clip.unwrap()));
        assert_eq!(cfg.learning_rate, t.learning_rate);
    }
    let below_10 = plan.iter().filter(|(t, _)| t.learning_rate < 10.0).count();
    assert!((70..=130).contains(&below_10), "log-uniform median is 10: {below_10}");
}

#[test]
fn search_stops_early_and_reports_divergence() {
    let base = small_cfg(ModelFamily::Lstm);
    let mut opts = SearchOptions::grid(&CFL_LEARNING_RATES, 2, 1);
    opts.stop_below = Some(f64::INFINITY);
    let out = search(&base, &opts, fake_trainer).unwrap();
    assert_eq!(out.trials.len(), 1);
    let diverge = |_: &TrainConfig| -> crate::Result<((), f64)> { Err(crate::Error::numerical("loss blew up")) };
    let e = search(&base, &SearchOptions::grid(&[0.1, 0.2], 1, 0), diverge).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("#0") && e.to_string().contains("#1"));
    let usage = |_: &TrainConfig| -> crate::Result<((), f64)> { Err(crate::Error::usage("bad")) };
    assert_eq!(search(&base, &opts, usage).unwrap_err().exit_code(), 1);
    assert!(SearchOptions::grid(&[], 5, 0).plan(&base).is_err());
}

#[test]
fn uniform_actions_give_one_third() {
    let g = marked(3, 9);
    let mut m = Model::for_task(&small_cfg(ModelFamily::NsSU), g.vocab()).unwrap();
    zero_params(&mut m);
    let ds = g.sample(5, 2).unwrap();
    let rows = action_heatmap(&m, &ds.strings, &|w| marked_reversal_labels(w, 2)).unwrap();
    for (row, w) in rows.iter().zip(&ds.strings) {
        assert_eq!(row.len(), w.len() - 1);
        for &x in row {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }
    let lstm = Model::for_task(&small_cfg(ModelFamily::Lstm), g.vocab()).unwrap();
    let e = action_heatmap(&lstm, &ds.strings, &|w| marked_reversal_labels(w, 2)).unwrap_err();
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn marked_labels_follow_the_marker() {
    use ActionType::*;
    assert_eq!(
        marked_reversal_labels(&[0, 1, 2, 1, 0], 2),
        vec![Push, Push, Replace, Pop, Pop]
    );
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut p = crate::autodiff::ParamStore::new();
    p.insert("x", Tensor::from_vec(vec![3.0, -2.0]));
    let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
    for _ in 0..2000 {
        let mut g = p.zeros_like();
        let x = p.get("x").unwrap().data().to_vec();
        g.get_mut("x")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[2.0 * (x[0] - 1.0), 2.0 * x[1]]);
        opt.update(&mut p, &g, 0.01).unwrap();
    }
    let x = p.get("x").unwrap().data();
    assert!((x[0] - 1.0).abs() < 1e-3 && x[1].abs() < 1e-3);
}

proptest! {
    #[test]
    fn clipping_bounds_the_norm(v in proptest::collection::vec(-10.0f64..10.0, 1..20), c in 0.01f64..5.0) {
        let mut g = crate::autodiff::ParamStore::new();
        g.insert("a", Tensor::from_vec(v.clone()));
        let before = clip_grad_norm(&mut g, c);
        let after = g.norm();
        prop_assert!(after <= c * (1.0 + 1e-12) || after <= before);
        if before <= c {
            prop_assert_eq!(g.get("a").unwrap().data(), v.as_slice());
        } else {
            prop_assert!((after - c).abs() < 1e-9 * c.max(1.0));
        }
    }
}

#[test]
fn dataset_provenance_rebuilds_the_grammar() {
    let g = build_task_grammar(
        Task::PaddedReversal,
        TaskParams {
            continuation: Some(0.7),
            ..TaskParams::new(5, 9)
        },
    )
    .unwrap();
    let ds = g.sample(4, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.txt");
    ds.write(&p).unwrap();
    let back = crate::tasks::grammar_for_dataset(&Dataset::read(&p).unwrap()).unwrap();
    for w in &ds.strings {
        assert_eq!(back.log_prob_with_eos(w), g.log_prob_with_eos(w));
    }
}
