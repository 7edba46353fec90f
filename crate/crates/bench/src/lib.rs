//! Fixtures shared by the benchmarks.

use covae::diffmath::Tensor;
use covae::distributions::CovariatePrior;
use covae::elbo::{Batch, ElboOptions, InducingState};
use covae::kernels::KernelSpec;
use covae::networks::{EncoderOutput, MlpConfig, Networks};
use covae::rng::{normals, stream, Generator, Stream};
use covae::{CovariateColumn, CovariateSchema, MaskedTable, ParamStore};

/// Two continuous columns and a three-level categorical.
pub fn schema() -> CovariateSchema {
    CovariateSchema::new(vec![
        CovariateColumn::continuous("a"),
        CovariateColumn::continuous("b"),
        CovariateColumn::categorical("c", 3),
    ])
    .expect("valid schema")
}

pub fn rng(seed: u64) -> Generator {
    stream(seed, Stream::Data)
}

/// `n` instantiated rows for [`schema`].
pub fn rows(rng: &mut Generator, n: usize) -> Tensor {
    let z = normals(rng, 2 * n);
    Tensor::from_fn(n, 3, |i, j| if j < 2 { z[2 * i + j] } else { (i % 3) as f64 })
}

pub fn encoder(rng: &mut Generator, n: usize, l: usize) -> EncoderOutput {
    EncoderOutput {
        mean: Tensor::from_vec(n, l, normals(rng, n * l)),
        variance: Tensor::filled(n, l, 0.3),
    }
}

pub fn kernel(l: usize) -> KernelSpec {
    KernelSpec::regression(&schema(), l)
}

/// Inducing points at the first `m` rows of a fresh draw.
pub fn inducing(rng: &mut Generator, spec: &KernelSpec, m: usize) -> InducingState {
    InducingState::with_locations(spec, &schema(), rows(rng, m), 1e-6).expect("inducing state")
}

/// Everything a CVAE objective needs, owned so the borrowing model can be
/// built inside a benchmark.
pub struct CvaeFixture {
    pub schema: CovariateSchema,
    pub networks: Networks,
    pub params: ParamStore,
    pub prior: CovariatePrior,
    pub options: ElboOptions,
    pub y: MaskedTable,
    pub x: MaskedTable,
}

impl CvaeFixture {
    /// `n` rows of `d` observations; every fifth covariate entry is missing.
    pub fn new(n: usize, d: usize, latent: usize, hidden: Vec<usize>) -> Self {
        let mut r = rng(3);
        let schema = schema();
        let cfg = MlpConfig {
            hidden,
            ..MlpConfig::default()
        };
        let networks = Networks::new(&schema, d, latent, &cfg, true, false);
        let mut params = ParamStore::new();
        networks.init(&mut params, &mut r);
        let y = MaskedTable::fully_observed(Tensor::from_vec(n, d, normals(&mut r, n * d)));
        let mut x = MaskedTable::fully_observed(rows(&mut r, n));
        for k in (0..n * 3).step_by(5) {
            x.set_observed(k / 3, k % 3, false);
        }
        Self {
            prior: CovariatePrior::fallback(&schema),
            schema,
            networks,
            params,
            options: ElboOptions::default(),
            y,
            x,
        }
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch::rows(&self.y, &self.x, rows)
    }
}
