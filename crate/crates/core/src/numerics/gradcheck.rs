//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::Rng;

use super::{NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that gradients near zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Label of the coordinate with the largest relative error.
    pub worst: String,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    fn record(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = rel.max(self.max_rel_err);
            self.worst = label();
        }
    }

    fn new(tol: f64) -> Self {
        Self {
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: String::new(),
            tol,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_scalar<F, E>(f: &F, x: &Tensor<f64>) -> Result<f64, E>
where
    F: Fn(&mut Tape<'static, f64>, Var) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item())
}

/// Compare the tape gradient of scalar `f` at `x` with central differences
/// over every coordinate of `x`.
pub fn grad_check<F, E>(f: F, x: &Tensor<f64>, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<'static, f64>, Var) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut report = GradCheckReport::new(tol);
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        report.record(analytic.data()[i], numeric, || format!("x[{i}]"));
    }
    Ok(report)
}

/// Gradient check against parameters: up to `per_param` random coordinates
/// of every tensor in `store` are perturbed in place and restored.
pub fn grad_check_params<F, R, E>(
    store: &mut ParamStore<f64>,
    f: F,
    per_param: usize,
    rng: &mut R,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, E>,
    R: Rng + ?Sized,
    E: From<NumericsError>,
{
    grad_check_params_where(store, f, |_| true, per_param, rng, tol)
}

/// [`grad_check_params`] restricted to the tensors whose name passes `select`.
pub fn grad_check_params_where<F, R, E>(
    store: &mut ParamStore<f64>,
    f: F,
    select: impl Fn(&str) -> bool,
    per_param: usize,
    rng: &mut R,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, E>,
    R: Rng + ?Sized,
    E: From<NumericsError>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64, E> {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport::new(tol);
    let ids: Vec<ParamId> = store.ids().filter(|&id| select(store.name(id))).collect();
    for id in ids {
        let n = store.get(id).numel();
        let picks = sample(rng, n, per_param.min(n));
        for i in picks.iter() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            report.record(analytic, numeric, || format!("{}[{i}]", store.name(id)));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
        let report = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 12);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly its kink has a one-sided derivative that central
        // differences average: 0 analytic vs 0.5 numeric.
        let x = Tensor::<f64>::from_f64([1], &[0.0]).unwrap();
        let report = grad_check(
            |t, x| {
                let r = t.relu(x)?;
                t.sum(r)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_intermediate_is_an_error() {
        let x = Tensor::<f64>::from_f64([1], &[1e300]).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &x,
            1e-4,
        );
        assert!(err.is_err());
    }
}
