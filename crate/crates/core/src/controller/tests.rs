use super::*;
use crate::autodiff::check_gradients_sampled;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn family_controller(f: ModelFamily, vocab: usize, hidden: usize) -> Controller {
    let stack = f.stack(&StackOptions::default()).unwrap();
    Controller::new(ControllerConfig {
        input_size: vocab,
        output_size: vocab + 1,
        hidden,
        stack,
    })
    .unwrap()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Textbook LSTM step on plain vectors.
fn reference_step(p: &ParamStore<f64>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let w = p.get("lstm.weight").unwrap();
    let b = p.get("lstm.bias").unwrap().data();
    let hs = h.len();
    let inp: Vec<f64> = x.iter().chain(h).copied().collect();
    let z: Vec<f64> = (0..4 * hs)
        .map(|o| {
            let row = &w.data()[o * inp.len()..(o + 1) * inp.len()];
            let mut acc = 0.0;
            for k in 0..inp.len() {
                acc += inp[k] * row[k];
            }
            acc + b[o]
        })
        .collect();
    let mut hn = vec![0.0; hs];
    let mut cn = vec![0.0; hs];
    for j in 0..hs {
        let (i, f, g, o) = (
            sigmoid(z[j]),
            sigmoid(z[hs + j]),
            z[2 * hs + j].tanh(),
            sigmoid(z[3 * hs + j]),
        );
        cn[j] = f * c[j] + i * g;
        hn[j] = o * cn[j].tanh();
    }
    let ow = p.get("out.weight").unwrap();
    let ob = p.get("out.bias").unwrap().data();
    let y = (0..ob.len())
        .map(|o| {
            let row = &ow.data()[o * hs..(o + 1) * hs];
            let mut acc = 0.0;
            for k in 0..hs {
                acc += hn[k] * row[k];
            }
            acc + ob[o]
        })
        .collect();
    (hn, cn, y)
}

#[test]
fn zero_weights_give_uniform_prediction() {
    let ctl = family_controller(ModelFamily::NsSU, 2, 4);
    let mut p: ParamStore<f64> = ctl.init_params(0.1, &mut ChaCha8Rng::seed_from_u64(0));
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut tape = Tape::new();
    let mut st = ctl.start(&mut tape, 1).unwrap();
    let out = ctl.step(&mut tape, &p, &mut st, StepInput::Tokens(&[1]), true).unwrap();
    assert!(tape.value(st.h).data().iter().all(|&x| x == 0.0));
    assert!(tape.value(out.logits).data().iter().all(|&x| x == 0.0));
    let ll = ctl.log_likelihood(&p, &[0, 1, 1], 2).unwrap();
    assert!((-ll / 4.0 - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn null_stack_is_plain_lstm() {
    let ctl = family_controller(ModelFamily::Lstm, 3, 5);
    let p: ParamStore<f64> = ctl.init_params(0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let toks = [2usize, 0, 1, 1];
    let mut tape = Tape::new();
    let run = ctl.score_batch(&mut tape, &p, &[&toks], 3).unwrap();
    let (mut h, mut c) = (vec![0.0; 5], vec![0.0; 5]);
    for k in 0..=toks.len() {
        let x = if k == 0 {
            p.get("start").unwrap().data().to_vec()
        } else {
            let mut v = vec![0.0; 3];
            v[toks[k - 1]] = 1.0;
            v
        };
        let (hn, cn, y) = reference_step(&p, &x, &h, &c);
        assert_eq!(tape.value(run.steps[k].logits).data(), y.as_slice(), "step {k}");
        h = hn;
        c = cn;
    }
}

#[test]
fn empty_string_scores_eos() {
    let ctl = family_controller(ModelFamily::Ns, 2, 4);
    let p: ParamStore<f64> = ctl.init_params(0.3, &mut ChaCha8Rng::seed_from_u64(2));
    let mut tape = Tape::new();
    let mut st = ctl.start(&mut tape, 1).unwrap();
    let out = ctl.step(&mut tape, &p, &mut st, StepInput::Start, false).unwrap();
    let lp = tape.log_softmax(out.logits);
    let want = tape.value(lp).data()[2];
    assert_eq!(ctl.log_likelihood(&p, &[], 2).unwrap(), want);
}

#[test]
fn replay_matches_total_and_is_causal() {
    for fam in ModelFamily::ALL {
        let ctl = family_controller(fam, 2, 4);
        let p: ParamStore<f64> = ctl.init_params(0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let toks = [0usize, 1, 1, 0, 1];
        let total = ctl.log_likelihood(&p, &toks, 2).unwrap();
        assert!(total <= 0.0);
        let mut tape = Tape::new();
        let mut st = ctl.start(&mut tape, 1).unwrap();
        let mut sum = 0.0;
        let mut logits = Vec::new();
        for k in 0..=toks.len() {
            let input = if k == 0 {
                StepInput::Start
            } else {
                StepInput::Tokens(&toks[k - 1..k])
            };
            let out = ctl.step(&mut tape, &p, &mut st, input, k < toks.len()).unwrap();
            let lp = tape.log_softmax(out.logits);
            sum += tape.value(lp).data()[if k < toks.len() { toks[k] } else { 2 }];
            logits.push(tape.value(out.logits).clone());
        }
        assert!((sum - total).abs() < 1e-12, "{fam}");

        let mut other = toks;
        other[3] = 1;
        let mut tape = Tape::new();
        let run = ctl.score_batch(&mut tape, &p, &[&other], 2).unwrap();
        for k in 0..=3 {
            assert_eq!(tape.value(run.steps[k].logits), &logits[k], "{fam} step {k}");
        }
        assert_ne!(tape.value(run.steps[4].logits), &logits[4], "{fam}");
    }
}

#[test]
fn all_families_pass_gradient_checks() {
    let batch: [&[usize]; 2] = [&[0, 1, 1, 0, 2, 1], &[1, 1, 0, 2, 0, 0]];
    for fam in ModelFamily::ALL {
        let ctl = family_controller(fam, 3, 4);
        let p: ParamStore<f64> = ctl.init_params(0.5, &mut ChaCha8Rng::seed_from_u64(7));
        let f = |tape: &mut Tape<f64>, p: &ParamStore<f64>| Ok(ctl.score_batch(tape, p, &batch, 3)?.nll);
        let rep = check_gradients_sampled(f, &p, 1e-5, Some(12), 1).unwrap();
        assert!(rep.max_error < 1e-4, "{fam}: {rep:?}");
    }
}

#[test]
fn rejects_bad_tokens_and_shapes() {
    let ctl = family_controller(ModelFamily::Gref, 2, 3);
    let p: ParamStore<f64> = ctl.init_params(0.1, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(ctl.log_likelihood(&p, &[0, 5], 2), Err(Error::Usage(_))));
    let mut tape = Tape::<f64>::new();
    assert!(matches!(
        ctl.score_batch(&mut tape, &p, &[&[0], &[0, 1]], 2),
        Err(Error::Usage(_))
    ));
    ctl.check_params(&p).unwrap();
    let other = family_controller(ModelFamily::Jm, 2, 3);
    assert!(other.check_params(&p).is_err());
}

#[test]
fn family_names_round_trip() {
    for f in ModelFamily::ALL {
        assert_eq!(f.name().parse::<ModelFamily>().unwrap(), f);
    }
    assert_eq!("NS+S+U".parse::<ModelFamily>().unwrap(), ModelFamily::NsSU);
    assert!(matches!("gru".parse::<ModelFamily>(), Err(Error::Usage(_))));
}

#[test]
fn carried_state_continues_exactly() {
    for fam in [ModelFamily::Lstm, ModelFamily::Jm, ModelFamily::NsSU] {
        let mut opts = StackOptions::default();
        opts.band = Some(3);
        opts.max_depth = Some(4);
        let ctl = Controller::new(ControllerConfig {
            input_size: 3,
            output_size: 3,
            hidden: 4,
            stack: fam.stack(&opts).unwrap(),
        })
        .unwrap();
        let p: ParamStore<f64> = ctl.init_params(0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let stream: Vec<Vec<usize>> = (0..9).map(|k| vec![k % 3, (k * 2 + 1) % 3]).collect();
        let tg: Vec<Vec<usize>> = (0..9).map(|k| vec![(k + 1) % 3, (k * 2 + 3) % 3]).collect();
        let w = vec![vec![1.0, 1.0]; 9];
        let mut tape = Tape::new();
        let mut st = ctl.start(&mut tape, 2).unwrap();
        let whole = ctl.score_chunk(&mut tape, &p, &mut st, &stream, &tg, &w).unwrap();
        let whole = tape.value(whole).item();

        let mut tape = Tape::new();
        let mut st = ctl.start(&mut tape, 2).unwrap();
        let a = ctl
            .score_chunk(&mut tape, &p, &mut st, &stream[..5], &tg[..5], &w[..5])
            .unwrap();
        let a = tape.value(a).item();
        let carry = st.carry(&tape).unwrap();
        let mut tape = Tape::new();
        let mut st = ctl.resume(&mut tape, &carry).unwrap();
        let b = ctl
            .score_chunk(&mut tape, &p, &mut st, &stream[5..], &tg[5..], &w[5..])
            .unwrap();
        let b = tape.value(b).item();
        assert!((whole - (a + b)).abs() < 1e-12, "{fam}");
    }
}
