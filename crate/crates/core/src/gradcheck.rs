//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

/// Smallest magnitude used as the relative-error denominator. Gradient
/// entries below it are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Entries checked per parameter, taken at an even stride.
    pub max_entries: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            tol: 1e-4,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !p.passed).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    Ok(tape.scalar(loss))
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheck {
            eps,
            tol,
            ..Default::default()
        }
    }

    /// Compares backward-pass gradients of the scalar built by `f` against
    /// central differences for every listed parameter.
    ///
    /// `f` must be deterministic: a tape that recorded training-mode
    /// dropout, or two evaluations that disagree, abort the check.
    pub fn run<F>(
        &self,
        store: &mut ParamStore,
        params: &[ParamId],
        mut f: F,
    ) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Tape) -> Result<Var>,
    {
        let grads = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape)?;
            if tape.is_stochastic() {
                return Err(Error::InvalidCheck(
                    "function applies training-mode dropout".into(),
                ));
            }
            tape.backward(loss)?
        };
        let base = eval(store, &mut f)?;
        if base.to_bits() != eval(store, &mut f)?.to_bits() {
            return Err(Error::InvalidCheck("function is not deterministic".into()));
        }

        let mut report = Vec::with_capacity(params.len());
        for &id in params {
            let numel = store.get(id).numel();
            let analytic = grads
                .param(id)
                .map(|g| g.to_dense(numel))
                .unwrap_or_else(|| vec![0.0; numel]);
            let stride = numel.div_ceil(self.max_entries.max(1)).max(1);
            let mut check = ParamCheck {
                name: store.name(id).to_string(),
                checked: 0,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                passed: true,
            };
            for i in (0..numel).step_by(stride) {
                let orig = store.get(id).data[i];
                store.get_mut(id).data[i] = orig + self.eps;
                let plus = eval(store, &mut f);
                store.get_mut(id).data[i] = orig - self.eps;
                let minus = eval(store, &mut f);
                store.get_mut(id).data[i] = orig;
                let numeric = (plus? - minus?) / (2.0 * self.eps);
                let rel = relative_error(analytic[i], numeric);
                check.max_rel_err = check.max_rel_err.max(rel);
                check.max_abs_err = check.max_abs_err.max((analytic[i] - numeric).abs());
                check.checked += 1;
            }
            check.passed = check.max_rel_err < self.tol;
            report.push(check);
        }
        Ok(GradCheckReport { params: report })
    }
}
