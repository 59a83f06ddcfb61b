use super::{Bound, ParamSet, Tape, TensorError, Var};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
    /// Whether any analytic entry in the group is nonzero.
    pub nonzero: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    pub fn group(&self, name: &str) -> Option<&GroupError> {
        self.groups.iter().find(|g| g.name == name)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences `(f(x + h) - f(x - h)) / 2h`, entry by entry, for every
/// parameter in `params`.
///
/// `f` must be deterministic: it is rebuilt on a fresh tape for every probe.
pub fn finite_difference_check<F, E>(
    params: &ParamSet,
    mut f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &Bound) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    let analytic = bound.collect_grads(&tape, &grads);

    let mut eval = |p: &ParamSet| -> Result<f64, E> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = f(&mut tape, &bound)?;
        Ok(tape.value(out).item())
    };

    let mut probe = params.clone();
    let mut groups = Vec::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = analytic.get(&name)?.clone();
        let mut worst = GroupError {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            entries: g.len(),
            nonzero: g.data().iter().any(|&v| v != 0.0),
        };
        for i in 0..g.len() {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let err = rel_error(g.data()[i], numeric);
            if err > worst.max_rel_error || i == 0 {
                worst.max_rel_error = err;
                worst.worst_index = i;
                worst.analytic = g.data()[i];
                worst.numeric = numeric;
            }
        }
        groups.push(worst);
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        h,
        tol,
        max_rel_error,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![3.0]));
        let report = finite_difference_check::<_, TensorError>(
            &p,
            |t, b| {
                let x = b.var("x")?;
                let y = t.mul(x, x)?;
                Ok(t.sum(y))
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        let g = report.group("x").unwrap();
        assert_eq!(g.analytic, 6.0);
        assert!((g.numeric - 6.0).abs() < 1e-8);
        assert!(report.passed());
    }

    #[test]
    fn detects_wrong_gradient() {
        // |x| at 0 has a kink: autodiff says 0 (norm rule), differences say 0 too,
        // but at a shifted point a wrong closure is caught.
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![1.0]));
        let mut calls = 0;
        let report = finite_difference_check::<_, TensorError>(
            &p,
            |t, b| {
                calls += 1;
                let x = b.var("x")?;
                // first build (the analytic one) is x, later builds are 2x
                let y = if calls == 1 { x } else { t.scale(x, 2.0) };
                Ok(t.sum(y))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }
}
