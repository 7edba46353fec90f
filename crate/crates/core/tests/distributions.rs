use covae::diffmath::{gradient_check, DifferentiableGraph, ParamStore, Tensor};
use covae::distributions::*;
use covae::rng::{normals, stream, Stream};
use covae::schema::{CovariateColumn, CovariateSchema, MaskedTable};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn mvn_log_density(z: &DVector<f64>, mu: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let d = z - mu;
    let w = l.solve_lower_triangular(&d).unwrap();
    let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (z.len() as f64 * LN_2PI + logdet + w.norm_squared())
}

#[test]
fn full_kl_matches_monte_carlo() {
    let mut rng = stream(31, Stream::Eval);
    let random_pd = |rng: &mut covae::rng::Generator| {
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(3, 3) * 0.3
    };
    let s1 = random_pd(&mut rng);
    let s0 = random_pd(&mut rng);
    let m1 = DVector::from_vec(vec![0.2, -0.5, 1.0]);
    let m0 = DVector::from_vec(vec![-0.3, 0.1, 0.4]);
    let to_t = |m: &DMatrix<f64>| Tensor::from_fn(3, 3, |i, j| m[(i, j)]);
    let exact = kl_full_gaussian(m1.as_slice(), &to_t(&s1), m0.as_slice(), &to_t(&s0)).unwrap();
    let l1 = s1.clone().cholesky().unwrap().l();
    let l0 = s0.clone().cholesky().unwrap().l();
    let n = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let e = DVector::from_vec(normals(&mut rng, 3));
        let z = &m1 + &l1 * e;
        let d = mvn_log_density(&z, &m1, &l1) - mvn_log_density(&z, &m0, &l0);
        s += d;
        s2 += d * d;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
}

#[test]
fn full_kl_rejects_indefinite() {
    let bad = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
    let good = Tensor::identity(2);
    assert!(kl_full_gaussian(&[0.0, 0.0], &good, &[0.0, 0.0], &bad).is_err());
}

#[test]
fn categorical_kl_matches_direct_sum() {
    let mut rng = stream(32, Stream::Eval);
    for _ in 0..20 {
        let mut q: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut p: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..1.0)).collect();
        q[rng.random_range(0..5)] = 0.0;
        let sq: f64 = q.iter().sum();
        let sp: f64 = p.iter().sum();
        q.iter_mut().for_each(|v| *v /= sq);
        p.iter_mut().for_each(|v| *v /= sp);
        let mut oracle = 0.0;
        for k in 0..5 {
            if q[k] > 0.0 {
                oracle += q[k] * (q[k].ln() - p[k].ln());
            }
        }
        assert!((kl_categorical(&q, &p).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn batch_log_density_matches_loop() {
    let mut rng = stream(33, Stream::Eval);
    let y = normals(&mut rng, 7);
    let mu = normals(&mut rng, 7);
    let var: Vec<f64> = (0..7).map(|_| rng.random_range(0.1..3.0)).collect();
    let mut oracle = 0.0;
    for k in 0..7 {
        oracle += -0.5 * ((2.0 * std::f64::consts::PI).ln() + var[k].ln() + (y[k] - mu[k]).powi(2) / var[k]);
    }
    assert!((gaussian_log_density(&y, &mu, &var).unwrap() - oracle).abs() < 1e-12);
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut p = ParamStore::new();
    for (n, t) in entries {
        p.insert(*n, t.clone());
    }
    p
}

#[test]
fn taped_densities_have_correct_gradients() {
    let mut rng = stream(34, Stream::Eval);
    let y = Tensor::from_vec(3, 2, normals(&mut rng, 6));
    let params = store(&[
        ("mu", Tensor::from_vec(3, 2, normals(&mut rng, 6))),
        ("lv", Tensor::from_vec(1, 2, vec![0.3, -0.7])),
        ("mp", Tensor::from_vec(3, 2, normals(&mut rng, 6))),
        ("lvp", Tensor::from_vec(3, 2, normals(&mut rng, 6))),
        ("logits_q", Tensor::from_vec(3, 4, normals(&mut rng, 12))),
        ("logits_p", Tensor::from_vec(1, 4, normals(&mut rng, 4))),
    ]);
    let graph = DifferentiableGraph::new(params, |t, v| {
        let yv = t.constant(y.clone());
        let (mu, lv, mp, lvp) = (v.get("mu")?, v.get("lv")?, v.get("mp")?, v.get("lvp")?);
        let ld = gaussian_log_density_var(t, yv, mu, lv);
        let a = t.sum(ld);
        let kl = kl_gaussian_var(t, mu, lvp, mp, lv);
        let b = t.sum(kl);
        let lq = v.get("logits_q")?;
        let lq = t.log_softmax_rows(lq);
        let lp = v.get("logits_p")?;
        let lp = t.log_softmax_rows(lp);
        let kc = kl_categorical_var(t, lq, lp);
        let c = t.sum(kc);
        let s = t.add(a, b);
        Ok(t.add(s, c))
    });
    let err = gradient_check(&graph, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

fn schema() -> CovariateSchema {
    CovariateSchema::new(vec![
        CovariateColumn::continuous("a"),
        CovariateColumn::categorical("b", 3),
        CovariateColumn::continuous("c"),
    ])
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prior_fit_ignores_masked_values(
        seed in 0u64..1000,
        garbage in prop::collection::vec(-1e3f64..1e3, 30),
    ) {
        let mut rng = stream(seed, Stream::Data);
        let vals = Tensor::from_fn(10, 3, |_, j| if j == 1 { rng.random_range(0..3) as f64 } else { rng.random_range(-2.0..2.0) });
        let mask: Vec<bool> = (0..30).map(|_| rng.random_bool(0.6)).collect();
        let a = MaskedTable::new(vals.clone(), mask.clone()).unwrap();
        let mut b = a.clone();
        for (k, v) in b.values.data_mut().iter_mut().enumerate() {
            if !mask[k] {
                *v = if k % 3 == 1 { (garbage[k].abs() as usize % 3) as f64 } else { garbage[k] };
            }
        }
        let s = schema();
        let pa = fit_covariate_prior(&a, &s);
        prop_assert_eq!(&pa, &fit_covariate_prior(&b, &s));
        pa.validate(&s).unwrap();
    }

    #[test]
    fn kls_are_non_negative(
        mq in prop::collection::vec(-3.0f64..3.0, 3),
        mp in prop::collection::vec(-3.0f64..3.0, 3),
        vq in prop::collection::vec(0.05f64..5.0, 3),
        vp in prop::collection::vec(0.05f64..5.0, 3),
        q in prop::collection::vec(0.0f64..1.0, 4),
        p in prop::collection::vec(0.01f64..1.0, 4),
    ) {
        prop_assert!(kl_diag_gaussian(&mq, &vq, &mp, &vp).unwrap() >= 0.0);
        prop_assert!(kl_diag_gaussian(&mq, &vq, &mq, &vq).unwrap().abs() < 1e-10);
        let sq: f64 = q.iter().sum::<f64>() + 1e-9;
        let sp: f64 = p.iter().sum();
        let q: Vec<f64> = q.iter().map(|v| (v + 1e-9 / 4.0) / sq).collect();
        let p: Vec<f64> = p.iter().map(|v| v / sp).collect();
        prop_assert!(kl_categorical(&q, &p).unwrap() >= -1e-12);
        prop_assert!(kl_categorical(&p, &p).unwrap().abs() < 1e-10);
    }
}
