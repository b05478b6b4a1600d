use super::*;
use crate::autodiff::gradcheck::{check_gradients, GradCheckReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn store(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, shape, data) in entries {
        s.insert(*n, Tensor::new(shape.clone(), data.clone()).unwrap());
    }
    s
}

fn random_store(rng: &mut ChaCha8Rng, entries: &[(&str, Vec<usize>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, shape) in entries {
        let k: usize = shape.iter().product();
        let data = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        s.insert(*n, Tensor::new(shape.clone(), data).unwrap());
    }
    s
}

#[test]
fn gradient_of_sum_is_all_ones() {
    let p = store(&[("p", vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0])]);
    let mut tape = Tape::new();
    let v = tape.param("p", &p).unwrap();
    let s = tape.sum(v);
    let g = tape.backward(s, &p).unwrap();
    assert_eq!(g.get("p").unwrap().data(), &[1.0; 6]);
}

#[test]
fn gradient_of_logsumexp_at_uniform_is_half() {
    let p = store(&[("p", vec![2], vec![0.0, 0.0])]);
    let mut tape = Tape::new();
    let v = tape.param("p", &p).unwrap();
    let l = tape.logsumexp(v, 0).unwrap();
    let g = tape.backward(l, &p).unwrap();
    assert_eq!(g.get("p").unwrap().data(), &[0.5, 0.5]);
}

#[test]
fn untouched_parameters_get_zero_gradients() {
    let p = store(&[("a", vec![2], vec![1.0, 2.0]), ("b", vec![3], vec![1.0, 1.0, 1.0])]);
    let mut tape = Tape::new();
    let a = tape.param("a", &p).unwrap();
    let s = tape.sum(a);
    let g = tape.backward(s, &p).unwrap();
    assert_eq!(g.get("b").unwrap().data(), &[0.0; 3]);
}

#[test]
fn logsumexp_gradient_at_empty_support_is_zero() {
    let p = store(&[("p", vec![2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY])]);
    let mut tape = Tape::new();
    let v = tape.param("p", &p).unwrap();
    let l = tape.logsumexp(v, 0).unwrap();
    assert_eq!(tape.value(l).item(), f64::NEG_INFINITY);
    let sm = tape.softmax(v);
    assert_eq!(tape.value(sm).data(), &[0.5, 0.5]);
    let r = tape.reshape(sm, &[1, 2]).unwrap();
    let picked = tape.pick(r, &[0]).unwrap();
    let s = tape.sum(picked);
    let g = tape.backward(s, &p).unwrap();
    assert_eq!(g.get("p").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn non_finite_loss_names_the_offending_operation() {
    let p = store(&[("p", vec![1], vec![0.0])]);
    let mut tape = Tape::new();
    let v = tape.param("p", &p).unwrap();
    let e = tape.exp(v);
    let big = tape.scale(e, f64::INFINITY);
    let s = tape.sum(big);
    let err = tape.backward(s, &p).unwrap_err();
    match err {
        Error::Numerical(msg) => assert!(msg.contains("scale"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn shape_mismatch_is_usage_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, b), Err(Error::Usage(_))));
    assert!(matches!(tape.slice(a, 1, 2), Err(Error::Usage(_))));
}

#[test]
fn detached_values_carry_no_gradient() {
    let p = store(&[("p", vec![2], vec![0.3, -0.4])]);
    let mut tape = Tape::new();
    let v = tape.param("p", &p).unwrap();
    let t = tape.tanh(v);
    let d = tape.detach(t);
    assert_eq!(tape.value(d), tape.value(t));
    let s = tape.sum(d);
    let g = tape.backward(s, &p).unwrap();
    assert_eq!(g.get("p").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn check_gradients_linear_is_exact() {
    let p = store(&[("x", vec![1, 3], vec![0.1, -0.7, 2.0])]);
    let r = check_gradients(
        |tape: &mut Tape<f64>, ps: &ParamStore<f64>| {
            let x = tape.param("x", ps)?;
            let y = tape.scale(x, 3.5);
            Ok(tape.sum(y))
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(r.max_error <= 1e-10, "{r:?}");
}

#[test]
fn check_gradients_constant_function_is_zero() {
    let p = store(&[("x", vec![2], vec![0.1, -0.7])]);
    let r = check_gradients(
        |tape: &mut Tape<f64>, _ps: &ParamStore<f64>| Ok(tape.constant(Tensor::scalar(4.0))),
        &p,
        1e-5,
    )
    .unwrap();
    assert_eq!(r.max_error, 0.0);
}

#[test]
fn check_gradients_logsumexp_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let p = random_store(&mut rng, &[("x", vec![5])]);
        let r = check_gradients(
            |tape: &mut Tape<f64>, ps: &ParamStore<f64>| {
                let x = tape.param("x", ps)?;
                tape.logsumexp(x, 0)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_error <= 1e-6, "{r:?}");
    }
}

#[test]
fn check_gradients_rejects_bad_step_and_nonfinite_probe() {
    let p = store(&[("x", vec![1], vec![0.0])]);
    let f = |tape: &mut Tape<f64>, ps: &ParamStore<f64>| {
        let x = tape.param("x", ps)?;
        Ok(tape.sum(x))
    };
    assert!(matches!(check_gradients(f, &p, 0.0), Err(Error::Usage(_))));
    let g = |tape: &mut Tape<f64>, _ps: &ParamStore<f64>| Ok(tape.constant(Tensor::scalar(f64::NAN)));
    assert!(check_gradients(g, &p, 1e-5).is_err());
}

fn fd(f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>, p: &ParamStore<f64>) -> GradCheckReport {
    check_gradients(f, p, 1e-5).unwrap()
}

#[test]
fn three_layer_random_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let p = random_store(
            &mut rng,
            &[
                ("x", vec![2, 4]),
                ("w1", vec![5, 4]),
                ("b1", vec![5]),
                ("w2", vec![3, 5]),
                ("b2", vec![3]),
                ("w3", vec![4, 3]),
            ],
        );
        let r = fd(
            |tape, ps| {
                let x = tape.param("x", ps)?;
                let w1 = tape.param("w1", ps)?;
                let b1 = tape.param("b1", ps)?;
                let h1 = tape.affine(x, w1, Some(b1))?;
                let h1 = tape.sigmoid(h1);
                let w2 = tape.param("w2", ps)?;
                let b2 = tape.param("b2", ps)?;
                let h2 = tape.affine(h1, w2, Some(b2))?;
                let h2 = tape.tanh(h2);
                let w3 = tape.param("w3", ps)?;
                let h3 = tape.affine(h2, w3, None)?;
                let l = tape.logsumexp(h3, 1)?;
                Ok(tape.sum(l))
            },
            &p,
        );
        assert!(r.max_error <= 1e-4, "trial {trial}: {r:?}");
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let p = random_store(&mut rng, &[("a", vec![3, 4]), ("b", vec![3, 4]), ("s", vec![3])]);
        let r = fd(
            |tape, ps| {
                let a = tape.param("a", ps)?;
                let b = tape.param("b", ps)?;
                let s = tape.param("s", ps)?;
                let sm = tape.softmax(a);
                let ls = tape.log_softmax(b);
                let e = tape.exp(a);
                let m = tape.mul(sm, ls)?;
                let d = tape.sub(m, e)?;
                let c = tape.concat(&[d, a])?;
                let sl = tape.slice(c, 2, 5)?;
                let sr = tape.scale_rows(sl, s)?;
                let mn = tape.min(a, b)?;
                let rl = tape.relu(mn);
                let ad = tape.add(rl, b)?;
                let lse = tape.logsumexp(ad, 0)?;
                let r1 = tape.reshape(sr, &[15])?;
                let s1 = tape.sum(r1);
                let s2 = tape.sum(lse);
                let pk = tape.pick(sm, &[0, 3, 1])?;
                let s3 = tape.sum(pk);
                let tot = tape.add(s1, s2)?;
                tape.add(tot, s3)
            },
            &p,
        );
        assert!(r.max_error <= 1e-4, "{r:?}");
    }
}
