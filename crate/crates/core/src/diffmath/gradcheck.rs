use super::params::{ParamStore, ParamVars};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Named parameters plus a closure that records a scalar computation of them.
///
/// The closure must be deterministic: any randomness it needs has to be drawn
/// from state it owns and resets on every call, so that evaluating twice with
/// identical parameters gives identical outputs.
pub struct DifferentiableGraph<F> {
    pub params: ParamStore,
    build: F,
}

impl<F> DifferentiableGraph<F>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    pub fn new(params: ParamStore, build: F) -> Self {
        Self { params, build }
    }

    fn run(&self, params: &ParamStore) -> Result<(Tape, ParamVars, Var)> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let out = (self.build)(&mut tape, &vars)?;
        if tape.dims(out) != (1, 1) {
            return Err(Error::DimensionMismatch(format!(
                "graph output must be scalar, got {:?}",
                tape.dims(out)
            )));
        }
        Ok((tape, vars, out))
    }

    pub fn evaluate_with(&self, params: &ParamStore) -> Result<f64> {
        let (tape, _, out) = self.run(params)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFiniteOutput);
        }
        Ok(v)
    }

    pub fn evaluate(&self) -> Result<f64> {
        self.evaluate_with(&self.params)
    }

    /// Output value and reverse-mode gradient for every parameter.
    pub fn value_and_grad(&self) -> Result<(f64, ParamStore)> {
        let (tape, vars, out) = self.run(&self.params)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFiniteOutput);
        }
        let grads = tape.backward(out);
        Ok((v, vars.gradients(&grads, &self.params)))
    }
}

/// Largest relative disagreement between reverse-mode and central-difference
/// derivatives over every parameter entry:
/// `|a − c| / (|a| + |c| + 1e-12)`.
pub fn gradient_check<F>(graph: &DifferentiableGraph<F>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    if !graph.params.all_finite() {
        return Err(Error::NonFiniteOutput);
    }
    let (_, analytic) = graph.value_and_grad()?;
    let mut worst = 0.0f64;
    let mut probe = graph.params.clone();
    let names: Vec<String> = graph.params.names().map(str::to_string).collect();
    for name in &names {
        let n = graph.params.get(name).map_or(0, |t| t.len());
        for k in 0..n {
            let orig = graph.params.get(name).unwrap().data()[k];
            probe.get_mut(name).unwrap().data_mut()[k] = orig + epsilon;
            let up = graph.evaluate_with(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig - epsilon;
            let down = graph.evaluate_with(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig;
            let central = (up - down) / (2.0 * epsilon);
            let a = analytic.get(name).unwrap().data()[k];
            let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
