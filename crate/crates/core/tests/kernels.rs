mod common;

use common::*;
use covae::diffmath::{gradient_check, logdet_from_factor, DifferentiableGraph, ParamStore, Tape, Tensor};
use covae::kernels::*;
use covae::rng::{stream, Stream};
use covae::schema::{CovariateColumn, CovariateSchema};
use nalgebra::DMatrix;

fn to_dense(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_fn(t.rows(), t.cols(), |i, j| t.get(i, j))
}

#[test]
fn gram_matches_pairwise_oracle() {
    let s = mixed_schema();
    let mut rng = stream(1, Stream::Data);
    for _ in 0..20 {
        let spec = random_spec(&mut rng, 2);
        let x = random_rows(&mut rng, 6);
        for l in 0..2 {
            let k = gram(&spec, &s, l, &x, None, false).unwrap();
            let d = dense_gram(&spec, &s, l, 0..spec.components.len(), &x, &x);
            for i in 0..6 {
                for j in 0..6 {
                    assert!((k.get(i, j) - d[(i, j)]).abs() < 1e-12);
                    assert!((k.get(i, j) - k.get(j, i)).abs() < 1e-12);
                }
            }
            let kn = gram(&spec, &s, l, &x, None, true).unwrap();
            assert!(covae::diffmath::cholesky_factor(&kn, 1e-6).is_ok());
        }
    }
}

#[test]
fn gram_is_positive_semidefinite() {
    let s = mixed_schema();
    let mut rng = stream(2, Stream::Data);
    for n in 1..=12 {
        let spec = random_spec(&mut rng, 1);
        let x = random_rows(&mut rng, n);
        let k = to_dense(&gram(&spec, &s, 0, &x, None, false).unwrap());
        let min = k.symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-8, "min eigenvalue {min}");
    }
}

#[test]
fn gram_is_additive_over_components() {
    let s = mixed_schema();
    let mut rng = stream(3, Stream::Data);
    let spec = loop {
        let sp = random_spec(&mut rng, 1);
        if sp.components.len() > 1 {
            break sp;
        }
    };
    let x = random_rows(&mut rng, 5);
    let full = gram(&spec, &s, 0, &x, None, false).unwrap();
    let mut sum = Tensor::zeros(5, 5);
    for r in 0..spec.components.len() {
        let mut one = KernelSpec::with_components(1, vec![spec.components[r].clone()], false);
        one.params[0][0] = spec.params[0][r].clone();
        sum.add_assign(&gram(&one, &s, 0, &x, None, false).unwrap());
    }
    assert!(full.max_abs_diff(&sum) < 1e-12);
}

#[test]
fn product_kernel_is_se_or_zero() {
    let s = mixed_schema();
    let spec = KernelSpec::with_components(
        1,
        vec![KernelComponent {
            continuous: vec![0, 1],
            categorical: vec![2],
        }],
        false,
    );
    let a = Tensor::from_rows(&[vec![0.1, 0.4, 2.0]]);
    let b_same = Tensor::from_rows(&[vec![-0.3, 1.0, 2.0]]);
    let b_diff = Tensor::from_rows(&[vec![-0.3, 1.0, 1.0]]);
    let se = se_kernel(&[0.1, 0.4], &[-0.3, 1.0], &[0.0, 0.0], 0.0).unwrap();
    assert!((gram(&spec, &s, 0, &a, Some(&b_same), false).unwrap().item() - se).abs() < 1e-15);
    assert_eq!(gram(&spec, &s, 0, &a, Some(&b_diff), false).unwrap().item(), 0.0);
}

#[test]
fn nystrom_cases() {
    let s = mixed_schema();
    let mut rng = stream(4, Stream::Data);
    for _ in 0..10 {
        let spec = random_spec(&mut rng, 1);
        let x = random_rows(&mut rng, 7);
        // exact interpolation
        let b = gram_bundle(&spec, &s, 0, &x, &x, 1e-10).unwrap();
        assert!(b.nystrom_diag_raw.iter().all(|v| *v <= 1e-6), "{:?}", b.nystrom_diag_raw);
        assert!(b.nystrom_diag.iter().all(|v| *v >= 0.0));
        // dense oracle and dominance
        let z = random_rows(&mut rng, 3);
        let b = gram_bundle(&spec, &s, 0, &x, &z, 0.0).unwrap();
        let kxs = dense_gram(&spec, &s, 0, 0..spec.components.len(), &x, &z);
        let kss = dense_gram(&spec, &s, 0, 0..spec.components.len(), &z, &z);
        let kxx = dense_gram(&spec, &s, 0, 0..spec.components.len(), &x, &x);
        assert!((to_dense(&b.k_ss) - &kss).abs().max() < 1e-12);
        let (lss, _) = covae::diffmath::cholesky_with_jitter(&b.k_ss, 0.0).unwrap();
        let lss = to_dense(&lss);
        let kinv = {
            let li = lss.try_inverse().unwrap();
            li.transpose() * li
        };
        let q = &kxs * kinv * kxs.transpose();
        for i in 0..7 {
            assert!((b.nystrom_diag_raw[i] - (kxx[(i, i)] - q[(i, i)])).abs() < 1e-8);
            assert!(b.nystrom_diag[i] <= b.k_xx_diag[i] + 1e-8);
        }
    }
}

#[test]
fn far_inducing_point_leaves_prior_variance() {
    let s = mixed_schema();
    let spec = KernelSpec::with_components(
        1,
        vec![KernelComponent {
            continuous: vec![0, 1],
            categorical: vec![],
        }],
        false,
    );
    let x = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.5, -0.5, 1.0]]);
    let far = Tensor::from_rows(&[vec![40.0, 40.0, 0.0]]);
    let b = gram_bundle(&spec, &s, 0, &x, &far, 1e-6).unwrap();
    for i in 0..2 {
        assert!((b.nystrom_diag[i] - b.k_xx_diag[i]).abs() < 1e-12);
    }
}

#[test]
fn hyperparameter_gradients() {
    let s = mixed_schema();
    let mut rng = stream(5, Stream::Data);
    let spec = random_spec(&mut rng, 1);
    let x = random_rows(&mut rng, 5);
    let mut params = ParamStore::new();
    spec.store_params(&mut params);
    let graph = DifferentiableGraph::new(params, |tape: &mut Tape, vars| {
        let kv = KernelVars::from_params(&spec, vars)?;
        let xv = tape.constant(x.clone());
        let k = gram_var(tape, &spec, &kv, 0, xv, xv, true);
        let l = tape.cholesky(k, 0.0)?;
        let ld = tape.logdet_from_factor(l);
        let t = tape.sum_squares(k);
        Ok(tape.add(ld, t))
    });
    let err = gradient_check(&graph, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
    let _ = s;
}

fn longitudinal_schema() -> CovariateSchema {
    CovariateSchema::new(vec![CovariateColumn::time("t"), CovariateColumn::instance("id", 2)]).unwrap()
}

#[test]
fn single_instance_without_shared_components() {
    let s = longitudinal_schema();
    let spec = KernelSpec::with_components(
        1,
        vec![KernelComponent {
            continuous: vec![0],
            categorical: vec![1],
        }],
        true,
    );
    let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.4, 0.0], vec![1.3, 0.0]]);
    let idx = LongitudinalIndex::single(3);
    let blocks = longitudinal_blocks(&spec, &s, 0, &idx, &x, &x, 1e-6).unwrap();
    assert!(blocks.k_xs_shared.is_none() && blocks.k_ss_shared.is_none());
    let f = &blocks.sigma_factors[0];
    let sig = f.matmul(&f.transpose());
    let full = gram(&spec, &s, 0, &x, None, true).unwrap();
    assert!(sig.max_abs_diff(&full) < 1e-12);
}

#[test]
fn two_instances_assemble_block_diagonal() {
    let s = longitudinal_schema();
    let mut spec = KernelSpec::longitudinal(&s, 1).unwrap();
    spec.params[0][1].log_variance = 0.3;
    let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.7, 0.0], vec![0.2, 1.0], vec![0.9, 1.0], vec![1.5, 1.0]]);
    let idx = LongitudinalIndex::from_ids(&[0, 0, 1, 1, 1]).unwrap();
    let z = Tensor::from_rows(&[vec![0.1, 0.0], vec![1.0, 0.0]]);
    let blocks = longitudinal_blocks(&spec, &s, 0, &idx, &x, &z, 1e-6).unwrap();
    let mut inst = KernelSpec::with_components(1, vec![spec.components[1].clone()], false);
    inst.params[0][0] = spec.params[0][1].clone();
    inst.log_noise = spec.log_noise.clone();
    let dense = gram(&inst, &s, 0, &x, None, true).unwrap();
    let mut assembled = Tensor::zeros(5, 5);
    let mut logdets = 0.0;
    for (p, r) in idx.ranges.iter().enumerate() {
        let f = &blocks.sigma_factors[p];
        let b = f.matmul(&f.transpose());
        for i in 0..r.len() {
            for j in 0..r.len() {
                assembled.set(r.start + i, r.start + j, b.get(i, j));
            }
        }
        logdets += logdet_from_factor(f).unwrap();
    }
    assert!(assembled.max_abs_diff(&dense) < 1e-12);
    let direct = to_dense(&dense).determinant().ln();
    assert!((logdets - direct).abs() < 1e-10);
    let shared = KernelSpec {
        components: vec![spec.components[0].clone()],
        params: vec![vec![spec.params[0][0].clone()]],
        last_is_instance: false,
        ..spec.clone()
    };
    assert!(blocks.k_xs_shared.unwrap().max_abs_diff(&gram(&shared, &s, 0, &x, Some(&z), false).unwrap()) < 1e-15);
    assert!(blocks.k_ss_shared.unwrap().max_abs_diff(&gram(&shared, &s, 0, &z, None, false).unwrap()) < 1e-15);
}

#[test]
fn spec_serialises() {
    let s = mixed_schema();
    let spec = KernelSpec::regression(&s, 2);
    let text = serde_json::to_string(&spec).unwrap();
    let back: KernelSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(spec, back);
    back.validate(&s).unwrap();
}
