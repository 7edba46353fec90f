#![allow(dead_code)]

use covae::diffmath::Tensor;
use covae::elbo::InducingState;
use covae::kernels::{categorical_kernel, se_kernel, KernelComponent, KernelSpec};
use covae::networks::EncoderOutput;
use covae::rng::{normals, Generator};
use covae::schema::{CovariateColumn, CovariateSchema};
use nalgebra::DMatrix;
use rand::Rng;

/// Two continuous columns and one categorical column of cardinality 3.
pub fn mixed_schema() -> CovariateSchema {
    CovariateSchema::new(vec![
        CovariateColumn::continuous("a"),
        CovariateColumn::continuous("b"),
        CovariateColumn::categorical("c", 3),
    ])
    .unwrap()
}

pub fn random_rows(rng: &mut Generator, n: usize) -> Tensor {
    Tensor::from_fn(n, 3, |_, j| if j < 2 { rng.random_range(-2.0..2.0) } else { rng.random_range(0..3) as f64 })
}

pub fn random_spec(rng: &mut Generator, latent_dims: usize) -> KernelSpec {
    let r = rng.random_range(1..=3);
    let mut comps = Vec::new();
    for _ in 0..r {
        let mut continuous: Vec<usize> = (0..2).filter(|_| rng.random_bool(0.6)).collect();
        let categorical: Vec<usize> = if rng.random_bool(0.4) { vec![2] } else { vec![] };
        if continuous.is_empty() && categorical.is_empty() {
            continuous.push(0);
        }
        comps.push(KernelComponent { continuous, categorical });
    }
    let mut spec = KernelSpec::with_components(latent_dims, comps, false);
    randomise_params(rng, &mut spec);
    spec
}

pub fn randomise_params(rng: &mut Generator, spec: &mut KernelSpec) {
    for l in 0..spec.latent_dims {
        for p in spec.params[l].iter_mut() {
            for v in p.log_lengthscales.iter_mut() {
                *v = rng.random_range(-0.7..0.7);
            }
            p.log_variance = rng.random_range(-1.0..1.0);
        }
        spec.log_noise[l] = rng.random_range(-3.0..0.0);
    }
}

pub fn random_encoder(rng: &mut Generator, n: usize, l: usize) -> EncoderOutput {
    EncoderOutput {
        mean: Tensor::from_vec(n, l, normals(rng, n * l)),
        variance: Tensor::from_fn(n, l, |_, _| rng.random_range(-2.5f64..1.0).exp()),
    }
}

/// Random inducing locations, means and factors (not tied to `K_SS`).
pub fn random_inducing(rng: &mut Generator, m: usize, latent_dims: usize) -> InducingState {
    let s = random_rows(rng, m);
    let means = (0..latent_dims).map(|_| Tensor::from_vec(m, 1, normals(rng, m))).collect();
    let factors = (0..latent_dims)
        .map(|_| {
            Tensor::from_fn(m, m, |i, j| {
                if j < i {
                    rng.random_range(-0.5..0.5)
                } else if i == j {
                    rng.random_range(-1.5f64..0.5).exp()
                } else {
                    0.0
                }
            })
        })
        .collect();
    InducingState { s, m: means, h_factor: factors }
}

/// Kernel value by direct calls to the elementary kernels.
pub fn kernel_entry(spec: &KernelSpec, l: usize, comps: std::ops::Range<usize>, a: &[f64], b: &[f64], card: &dyn Fn(usize) -> usize) -> f64 {
    let mut k = 0.0;
    for r in comps {
        let c = &spec.components[r];
        let p = &spec.params[l][r];
        let xa: Vec<f64> = c.continuous.iter().map(|&j| a[j]).collect();
        let xb: Vec<f64> = c.continuous.iter().map(|&j| b[j]).collect();
        let mut v = se_kernel(&xa, &xb, &p.log_lengthscales, p.log_variance).unwrap();
        for &j in &c.categorical {
            v *= categorical_kernel(a[j] as usize, b[j] as usize, card(j)).unwrap();
        }
        k += v;
    }
    k
}

pub fn dense_gram(spec: &KernelSpec, schema: &CovariateSchema, l: usize, comps: std::ops::Range<usize>, a: &Tensor, b: &Tensor) -> DMatrix<f64> {
    let card = |j: usize| schema.column(j).cardinality().unwrap();
    DMatrix::from_fn(a.rows(), b.rows(), |i, j| kernel_entry(spec, l, comps.clone(), a.row_slice(i), b.row_slice(j), &card))
}

/// `KL(N(μ, diag v) ‖ N(0, K))` by explicit inverse and determinant.
pub fn dense_kl(mu: &[f64], var: &[f64], k: &DMatrix<f64>) -> f64 {
    let n = mu.len();
    let chol = k.clone().cholesky().expect("PD covariance");
    let kinv = chol.inverse();
    let m = nalgebra::DVector::from_column_slice(mu);
    let quad = (m.transpose() * &kinv * &m)[(0, 0)];
    let tr: f64 = (0..n).map(|i| kinv[(i, i)] * var[i]).sum();
    let logdet = k.determinant().ln();
    0.5 * (tr + quad - n as f64 + logdet - var.iter().map(|v| v.ln()).sum::<f64>())
}

/// Exact KL summed over latent dimensions with the dense oracle.
pub fn dense_exact_kl(spec: &KernelSpec, schema: &CovariateSchema, x: &Tensor, enc: &EncoderOutput) -> f64 {
    let n = x.rows();
    (0..spec.latent_dims)
        .map(|l| {
            let mut k = dense_gram(spec, schema, l, 0..spec.components.len(), x, x);
            for i in 0..n {
                k[(i, i)] += spec.log_noise[l].exp();
            }
            let mu: Vec<f64> = (0..n).map(|i| enc.mean.get(i, l)).collect();
            let var: Vec<f64> = (0..n).map(|i| enc.variance.get(i, l)).collect();
            dense_kl(&mu, &var, &k)
        })
        .sum()
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
