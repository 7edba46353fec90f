//! End-to-end acceptance checks. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use covae::data::*;
use covae::diffmath::{gradient_check, DifferentiableGraph, ParamStore, Tensor};
use covae::distributions::{ColumnPrior, CovariatePosterior, CovariatePrior, EntryDistribution};
use covae::elbo::*;
use covae::kernels::{KernelComponent, KernelSpec, LongitudinalIndex};
use covae::models::*;
use covae::networks::{Activation, EncoderOutput, MlpConfig, Networks};
use covae::rng::{normals, stream, Generator, Stream};
use covae::schema::{CovariateColumn, CovariateSchema, MaskedTable};
use nalgebra::DMatrix;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- helpers

fn longitudinal_schema(p: usize) -> CovariateSchema {
    CovariateSchema::new(vec![
        CovariateColumn::time("t"),
        CovariateColumn::continuous("u"),
        CovariateColumn::instance("id", p),
    ])
    .unwrap()
}

/// Shared SE over `(t, u)` plus an instance component over `id × t`.
fn longitudinal_spec(rng: &mut Generator, l: usize) -> KernelSpec {
    let mut spec = KernelSpec::with_components(
        l,
        vec![
            KernelComponent {
                continuous: vec![0, 1],
                categorical: vec![],
            },
            KernelComponent {
                continuous: vec![0],
                categorical: vec![2],
            },
        ],
        true,
    );
    for l in 0..l {
        for p in spec.params[l].iter_mut() {
            for v in p.log_lengthscales.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            p.log_variance = rng.random_range(-1.0..0.5);
        }
        spec.log_noise[l] = rng.random_range(-2.0..-0.5);
    }
    spec
}

fn longitudinal_rows(rng: &mut Generator, sizes: &[usize]) -> (Tensor, LongitudinalIndex) {
    let ids: Vec<usize> = sizes.iter().enumerate().flat_map(|(p, &n)| std::iter::repeat(p).take(n)).collect();
    let x = Tensor::from_fn(ids.len(), 3, |i, j| match j {
        0 => rng.random_range(0.0..3.0),
        1 => rng.random_range(-1.0..1.0),
        _ => ids[i] as f64,
    });
    (x, LongitudinalIndex::from_ids(&ids).unwrap())
}

fn longitudinal_inducing(rng: &mut Generator, m: usize, l: usize) -> InducingState {
    let mut ind = random_inducing(rng, m, l);
    ind.s = Tensor::from_fn(m, 3, |_, j| if j < 2 { rng.random_range(-1.0..3.0) } else { 0.0 });
    ind
}

// ---------------------------------------------------------------- criteria

fn bound_dominance() -> Outcome {
    let s = mixed_schema();
    let mut rng = stream(1001, Stream::Data);
    let (mut gap3, mut gap4) = (f64::INFINITY, f64::INFINITY);
    for cfg in 0..50 {
        let l = rng.random_range(1..=3);
        let spec = random_spec(&mut rng, l);
        let n = rng.random_range(2..=64);
        let m = rng.random_range(1..=16);
        let x = random_rows(&mut rng, n);
        let enc = random_encoder(&mut rng, n, l);
        // half the configs use prior-matched inducing states at data rows,
        // where the bound is close to tight
        let ind = if cfg % 2 == 0 {
            let rows: Vec<usize> = (0..m.min(n)).collect();
            InducingState::with_locations(&spec, &s, x.select_rows(&rows), 1e-6).map_err(e2s)?
        } else {
            random_inducing(&mut rng, m, l)
        };
        let all: Vec<usize> = (0..n).collect();
        let bound = kl_gp_bound_minibatch(&all, &enc, &ind, &spec, &s, &x, n, 1e-6).map_err(e2s)?;
        let exact = dense_exact_kl(&spec, &s, &x, &enc);
        ensure(bound >= exact - 1e-6, format!("config {cfg}: D3 {bound} < exact {exact} (N={n}, M={m}, L={l})"))?;
        gap3 = gap3.min(bound - exact);

        let p = rng.random_range(2..=5);
        let sizes: Vec<usize> = (0..p).map(|_| rng.random_range(1..=32 / p)).collect();
        let ls = longitudinal_schema(p);
        let lspec = longitudinal_spec(&mut rng, l);
        let (lx, idx) = longitudinal_rows(&mut rng, &sizes);
        let ln = lx.rows();
        let lenc = random_encoder(&mut rng, ln, l);
        let lm = rng.random_range(1..=16);
        let lind = longitudinal_inducing(&mut rng, lm, l);
        let insts: Vec<usize> = (0..p).collect();
        let b4 = kl_longitudinal_bound(&insts, &lenc, Some(&lind), &lspec, &ls, &idx, &lx, 1e-6).map_err(e2s)?;
        let e4 = dense_exact_kl(&lspec, &ls, &lx, &lenc);
        ensure(b4 >= e4, format!("config {cfg}: D4 {b4} < exact {e4} (N={ln}, P={p}, M={lm})"))?;
        gap4 = gap4.min(b4 - e4);
    }
    Ok(format!("50 configs, min gap D3 {gap3:.3e}, D4 {gap4:.3e}"))
}

fn minibatch_unbiasedness() -> Outcome {
    let s = mixed_schema();
    let mut rng = stream(1002, Stream::Data);
    let spec = random_spec(&mut rng, 2);
    let x = random_rows(&mut rng, 8);
    let enc = random_encoder(&mut rng, 8, 2);
    let ind = random_inducing(&mut rng, 3, 2);
    let all: Vec<usize> = (0..8).collect();
    let subs = subsets(8, 4);
    ensure(subs.len() == 70, "expected 70 batches")?;

    let full3 = kl_gp_bound_minibatch(&all, &enc, &ind, &spec, &s, &x, 8, 1e-6).map_err(e2s)?;
    let mut mean3 = 0.0;
    for b in &subs {
        mean3 += kl_gp_bound_minibatch(b, &enc, &ind, &spec, &s, &x, 8, 1e-6).map_err(e2s)? / 70.0;
    }
    let err3 = rel_err(mean3, full3);

    let prior = CovariatePrior::fallback(&s);
    let gauss = |mean: f64, variance: f64| Some(EntryDistribution::Gaussian { mean, variance });
    let mut rows = vec![vec![None; 3]; 8];
    rows[1][0] = gauss(0.3, 0.5);
    rows[4][2] = Some(EntryDistribution::Categorical { probs: vec![0.2, 0.5, 0.3] });
    rows[6][1] = gauss(-1.0, 2.0);
    rows[6][2] = Some(EntryDistribution::Categorical { probs: vec![0.6, 0.1, 0.3] });
    let post = CovariatePosterior { rows };
    let fullc = kl_cvae(&all, &enc, &post, &prior, 8).map_err(e2s)?;
    let mut meanc = 0.0;
    for b in &subs {
        meanc += kl_cvae(b, &enc, &post, &prior, 8).map_err(e2s)? / 70.0;
    }
    let errc = rel_err(meanc, fullc);

    let ls = longitudinal_schema(3);
    let lspec = longitudinal_spec(&mut rng, 2);
    let (lx, idx) = longitudinal_rows(&mut rng, &[2, 3, 4]);
    let lenc = random_encoder(&mut rng, 9, 2);
    let lind = longitudinal_inducing(&mut rng, 3, 2);
    let full4 = kl_longitudinal_bound(&[0, 1, 2], &lenc, Some(&lind), &lspec, &ls, &idx, &lx, 1e-6).map_err(e2s)?;
    let mut mean4 = 0.0;
    for p in 0..3 {
        mean4 += kl_longitudinal_bound(&[p], &lenc, Some(&lind), &lspec, &ls, &idx, &lx, 1e-6).map_err(e2s)? / 3.0;
    }
    let err4 = rel_err(mean4, full4);

    let detail = format!("rel err D3 {err3:.1e}, D4 {err4:.1e}, cvae {errc:.1e}");
    ensure(err3 < 1e-10 && err4 < 1e-10 && errc < 1e-10, detail.clone())?;
    Ok(detail)
}

fn kl_decomposition() -> Outcome {
    let s = mixed_schema();
    let mut rng = stream(1003, Stream::Data);
    let spec = KernelSpec {
        params: vec![vec![
            covae::kernels::ComponentParams {
                log_lengthscales: vec![0.2, -0.3],
                log_variance: 0.4,
            },
            covae::kernels::ComponentParams {
                log_lengthscales: vec![0.1],
                log_variance: -0.5,
            },
        ]],
        ..KernelSpec::with_components(
            1,
            vec![
                KernelComponent {
                    continuous: vec![0, 1],
                    categorical: vec![2],
                },
                KernelComponent {
                    continuous: vec![0],
                    categorical: vec![],
                },
            ],
            false,
        )
    };
    let mut values = random_rows(&mut rng, 3);
    values.set(1, 2, 0.0);
    let mut mask = vec![true; 9];
    mask[5] = false;
    let x = MaskedTable::new(values.clone(), mask).map_err(e2s)?;
    let q = [0.2, 0.5, 0.3];
    let p = [0.5, 0.3, 0.2];
    let post = CovariatePosterior {
        rows: vec![
            vec![None; 3],
            vec![None, None, Some(EntryDistribution::Categorical { probs: q.to_vec() })],
            vec![None; 3],
        ],
    };
    let mut prior = CovariatePrior::fallback(&s);
    prior.columns[2] = ColumnPrior::Categorical { probs: p.to_vec() };
    // the latent posterior depends on the instantiated category
    let base = random_encoder(&mut rng, 3, 1);
    let enc_for = |cat: f64| EncoderOutput {
        mean: Tensor::from_fn(3, 1, |i, _| base.mean.get(i, 0) + 0.4 * cat),
        variance: Tensor::from_fn(3, 1, |i, _| base.variance.get(i, 0) * (1.0 + 0.3 * cat)),
    };

    let plan = MissingExpectationPlan::new(&x, &s, 64, 1).map_err(e2s)?;
    let expected = expect_over_missing_covariates(&x, &post, &plan, &mut rng, |inst| {
        kl_gp_exact(&enc_for(inst.get(1, 2)), &spec, &s, inst, 0.0)
    })
    .map_err(e2s)?;
    let got = expected + covariate_kl_term(&post, &prior, &s, 1.0).map_err(e2s)?;

    let mut oracle = 0.0;
    for k in 0..3 {
        let mut xk = values.clone();
        xk.set(1, 2, k as f64);
        oracle += q[k] * ((q[k] / p[k]).ln() + dense_exact_kl(&spec, &s, &xk, &enc_for(k as f64)));
    }
    let diff = (got - oracle).abs();
    ensure(diff < 1e-8, format!("library {got} vs enumeration {oracle}"))?;
    Ok(format!("|diff| {diff:.1e}"))
}

fn gradient_integrity() -> Outcome {
    let s = mixed_schema();
    let mut rng = stream(1004, Stream::Data);
    let cfg = MlpConfig {
        hidden: vec![3],
        activation: Activation::Tanh,
    };
    let (n, l, d) = (2, 2, 3);
    let nets = Networks::new(&s, d, l, &cfg, false, true);
    let mut params = ParamStore::new();
    nets.init(&mut params, &mut rng);
    // categorical coordinates of S are ids, so the kernel stays on the
    // continuous columns for finite differences to be meaningful
    let mut spec = KernelSpec::with_components(
        l,
        vec![
            KernelComponent {
                continuous: vec![0, 1],
                categorical: vec![],
            },
            KernelComponent {
                continuous: vec![1],
                categorical: vec![],
            },
        ],
        false,
    );
    randomise_params(&mut rng, &mut spec);
    spec.store_params(&mut params);
    let x = MaskedTable::new(random_rows(&mut rng, n), vec![false, true, true, true, true, false]).map_err(e2s)?;
    let prior = CovariatePrior::fallback(&s);
    let ind = InducingState::init(&spec, &s, &x, &prior, 2, 1e-6, &mut rng).map_err(e2s)?;
    ind.store_params(&mut params);
    let y = MaskedTable::new(Tensor::from_vec(n, d, normals(&mut rng, n * d)), vec![true, false, true, true, true, false]).map_err(e2s)?;
    let opts = ElboOptions::default();
    let model = ElboModel {
        family: Family::RegressionGp,
        schema: &s,
        networks: &nets,
        kernel: Some(&spec),
        prior: &prior,
        options: &opts,
    };
    let batch = Batch::full(&y, &x);
    let graph = DifferentiableGraph::new(params, |tape, vars| {
        let e = elbo_graph(tape, &model, vars, &batch, 2, &mut stream(3, Stream::Training))?;
        Ok(e.total)
    });
    let err = gradient_check(&graph, 1e-5).map_err(e2s)?;
    ensure(err < 1e-4, format!("max relative error {err:.2e}"))?;
    Ok(format!("max relative error {err:.2e}"))
}

fn linear_gaussian_sanity() -> Outcome {
    let n = 200;
    let mut rng = stream(1005, Stream::Data);
    let x = Tensor::from_vec(n, 1, normals(&mut rng, n));
    let y = Tensor::from_fn(n, 2, |i, j| {
        let z = covae::rng::standard_normal(&mut rng);
        let e = covae::rng::standard_normal(&mut rng);
        let xi = x.get(i, 0);
        [0.1 + 1.0 * z + 0.3 * xi + 0.45 * e, 0.2 + 0.5 * z - 0.2 * xi + 0.55 * e][j]
    });

    // closed-form optimum: OLS on [1, x], MLE residual covariance
    let a = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x.get(i, 0) });
    let yb = DMatrix::from_fn(n, 2, |i, j| y.get(i, j));
    let beta = (a.transpose() * &a).try_inverse().ok_or("singular design")? * a.transpose() * &yb;
    let r = &yb - &a * beta;
    let cov = r.transpose() * &r / n as f64;
    let optimum = -(n as f64) / 2.0 * (2.0 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + 2.0);

    let schema = CovariateSchema::new(vec![CovariateColumn::continuous("x")]).map_err(e2s)?;
    let data = Dataset::new(
        schema,
        vec!["y0".into(), "y1".into()],
        MaskedTable::fully_observed(y),
        MaskedTable::fully_observed(x),
    )
    .map_err(e2s)?;
    let mut mc = ModelConfig::new(Family::Cvae);
    mc.latent_dims = 1;
    mc.network = MlpConfig {
        hidden: vec![],
        ..MlpConfig::default()
    };
    let tc = TrainConfig {
        learning_rate: 1e-2,
        batch_size: Some(50),
        max_epochs: 1500,
        patience: 100,
        validation_mc: 20,
        seed: 7,
        ..TrainConfig::default()
    };
    let model = train(&mc, &data, &data, &tc).map_err(e2s)?;
    let elbo = elbo_step(
        &model.elbo_model(),
        &model.params,
        &Batch::full(&data.y, &data.x),
        500,
        &mut stream(9, Stream::Eval),
    )
    .map_err(e2s)?
    .total;
    let gap = (optimum - elbo) / optimum.abs();
    let detail = format!("ELBO {elbo:.2}, optimum {optimum:.2}, shortfall {:.2}%", 100.0 * gap);
    ensure(gap < 0.05, detail.clone())?;
    Ok(detail)
}

fn ordering_reproduction() -> Outcome {
    let mut data = RotatedDigitsConfig::new(DigitsVariant::Dataset2, 1000, 200, 1000);
    data.side = 12;
    let mut model = ModelConfig::new(Family::Cvae);
    model.network.hidden = vec![64];
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: Some(50),
        max_epochs: 500,
        patience: 10,
        validation_mc: 5,
        ..TrainConfig::default()
    };
    let ec = EvalConfig::default();
    let mut counts = [0usize; 4];
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let sets = masked_digits(&data, 0.2, seed).map_err(e2s)?;
        let mut nll = std::collections::HashMap::new();
        let mut mse = std::collections::HashMap::new();
        for m in Method::ALL {
            let r = run_cell(&sets, m, &model, &tc, &ec, DEFAULT_K, 0.2, seed).map_err(e2s)?;
            nll.insert(m, r.metrics.nll);
            mse.insert(m, r.metrics.covariate_mse);
        }
        let ours = nll[&Method::Ours];
        counts[0] += usize::from(ours < nll[&Method::Mean]);
        counts[1] += usize::from(ours < nll[&Method::Zero]);
        counts[2] += usize::from(nll[&Method::Oracle] <= ours);
        if let (Some(a), Some(b)) = (mse[&Method::Ours], mse[&Method::Mean]) {
            counts[3] += usize::from(a < b);
        }
        rows.push(format!(
            "seed {seed}: ours {ours:.1} mean {:.1} knn {:.1} zero {:.1} oracle {:.1}",
            nll[&Method::Mean],
            nll[&Method::Knn],
            nll[&Method::Zero],
            nll[&Method::Oracle]
        ));
    }
    for r in &rows {
        eprintln!("  {r}");
    }
    let detail = format!(
        "seeds with NLL ours<mean {}/5, ours<zero {}/5, oracle<=ours {}/5, MSE ours<mean {}/5",
        counts[0], counts[1], counts[2], counts[3]
    );
    ensure(counts.iter().all(|&c| c >= 4), detail.clone())?;
    Ok(detail)
}

fn mcar_calibration() -> Outcome {
    let (n, d) = (5000, 200);
    let schema = CovariateSchema::new(vec![CovariateColumn::continuous("a")]).map_err(e2s)?;
    let data = Dataset::new(
        schema,
        (0..d).map(|j| format!("y{j}")).collect(),
        MaskedTable::fully_observed(Tensor::filled(n, d, 1.0)),
        MaskedTable::fully_observed(Tensor::filled(n, 1, 2.0)),
    )
    .map_err(e2s)?;
    let t = Instant::now();
    let masked = inject_mcar(&data, 0.2, 0.2, 1007).map_err(e2s)?;
    let secs = t.elapsed().as_secs_f64();
    let total = n * (d + 1);
    let hidden = masked.y.missing_count() + masked.x.missing_count();
    let frac = hidden as f64 / total as f64;
    let detail = format!("{total} entries, masked fraction {frac:.5} (target 0.2), {secs:.2}s");
    ensure((frac - 0.2).abs() <= 0.002, detail.clone())?;
    ensure(secs < 1.0, detail.clone())?;
    Ok(detail)
}

fn determinism_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut cfg = RotatedDigitsConfig::new(DigitsVariant::Dataset2, 60, 20, 20);
    cfg.side = 8;
    cfg.seed = 11;
    let build = || -> Result<Dataset, String> {
        let (tr, _, _) = generate_rotated_digits(&cfg).map_err(e2s)?;
        inject_mcar(&tr, 0.2, 0.2, 5).map_err(e2s)
    };
    let write = |d: &Dataset, tag: &str| -> Result<Vec<Vec<u8>>, String> {
        let paths = ["csv", "json", "truth.csv"].map(|e| dir.path().join(format!("{tag}.{e}")));
        write_dataset_csv(d, &paths[0], Some(&paths[1])).map_err(e2s)?;
        write_truth_csv(d, &paths[2]).map_err(e2s)?;
        paths.iter().map(|p| std::fs::read(p).map_err(e2s)).collect()
    };
    let (a, b) = (build()?, build()?);
    ensure(write(&a, "a")? == write(&b, "b")?, "dataset files differ between identical runs")?;
    let (mut back, _) = load_csv(&dir.path().join("a.csv"), &dir.path().join("a.json"), None).map_err(e2s)?;
    read_truth_csv(&mut back, &dir.path().join("a.truth.csv")).map_err(e2s)?;
    ensure(back == a, "dataset CSV round-trip is not exact")?;

    let (tr, va, te) = generate_rotated_digits(&cfg).map_err(e2s)?;
    let (tr, va, te) = (
        inject_mcar(&tr, 0.2, 0.2, 1).map_err(e2s)?,
        inject_mcar(&va, 0.2, 0.2, 2).map_err(e2s)?,
        inject_mcar(&te, 0.2, 0.2, 3).map_err(e2s)?,
    );
    let tc = TrainConfig {
        max_epochs: 3,
        batch_size: Some(20),
        validation_mc: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let ec = EvalConfig {
        latent_draws: 10,
        covariate_samples: 3,
        seed: 2,
    };
    for fam in [Family::Cvae, Family::RegressionGp] {
        let mut mc = ModelConfig::new(fam);
        mc.network.hidden = vec![16];
        mc.inducing_points = 8;
        let m1 = train(&mc, &tr, &va, &tc).map_err(e2s)?;
        let m2 = train(&mc, &tr, &va, &tc).map_err(e2s)?;
        let (p1, p2) = (dir.path().join("m1.json"), dir.path().join("m2.json"));
        m1.save(&p1).map_err(e2s)?;
        m2.save(&p2).map_err(e2s)?;
        ensure(
            std::fs::read(&p1).map_err(e2s)? == std::fs::read(&p2).map_err(e2s)?,
            format!("{fam:?}: saved models differ"),
        )?;
        let loaded = TrainedModel::load(&p1).map_err(e2s)?;
        ensure(loaded == m1, format!("{fam:?}: model round-trip is not exact"))?;
        let j1 = serde_json::to_string(&evaluate(&m1, &te, None, &ec).map_err(e2s)?).map_err(e2s)?;
        let j2 = serde_json::to_string(&evaluate(&m2, &te, None, &ec).map_err(e2s)?).map_err(e2s)?;
        let j3 = serde_json::to_string(&evaluate(&loaded, &te, None, &ec).map_err(e2s)?).map_err(e2s)?;
        ensure(j1 == j2 && j1 == j3, format!("{fam:?}: metrics differ"))?;
    }
    Ok("datasets, models and metrics byte-identical; round-trips exact".into())
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("bound dominance", Duration::from_secs(60), bound_dominance),
        ("mini-batch unbiasedness", Duration::from_secs(10), minibatch_unbiasedness),
        ("KL decomposition identity", Duration::from_secs(1), kl_decomposition),
        ("gradient integrity", Duration::from_secs(30), gradient_integrity),
        ("linear-Gaussian training", Duration::from_secs(120), linear_gaussian_sanity),
        ("method ordering on rotated digits", Duration::from_secs(20 * 60), ordering_reproduction),
        ("MCAR calibration", Duration::from_secs(1), mcar_calibration),
        ("determinism and round-trips", Duration::from_secs(60), determinism_round_trips),
    ];
    let mut failed = 0;
    for (k, (name, budget, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed();
        let out = match out {
            Ok(d) if secs > *budget => Err(format!("{d}; over time budget {budget:?}")),
            o => o,
        };
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if out.is_err() {
            failed += 1;
        }
        println!("criterion {} {tag} {name} ({:.1}s): {detail}", k + 1, secs.as_secs_f64());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
