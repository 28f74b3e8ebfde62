//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamStore, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are zero
    /// up to rounding do not produce spurious failures.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub values: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// False when two evaluations at the same point disagreed; no gradient
    /// comparison is made in that case.
    pub deterministic: bool,
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.deterministic && self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn scalar(g: &Graph, v: Var) -> Result<f64, TensorError> {
    let t = g.value(v);
    t.item().ok_or_else(|| TensorError::NonScalarLoss(t.shape().to_vec()))
}

/// Compares backward-pass gradients of every parameter in `store` against
/// central differences of `forward`, which builds a fresh graph and returns
/// the scalar loss node.
pub fn grad_check<F>(
    mut forward: F,
    store: &mut ParamStore,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var), TensorError>,
{
    let (mut g, loss) = forward(store)?;
    let (g2, loss2) = forward(store)?;
    if scalar(&g, loss)?.to_bits() != scalar(&g2, loss2)?.to_bits() {
        return Ok(GradCheckReport {
            deterministic: false,
            params: Vec::new(),
            tolerance: cfg.tolerance,
        });
    }
    g.backward(loss)?;
    let analytic = g.collect_param_grads(store);

    let mut params = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.len();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            values: n,
        };
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + cfg.step;
            let (gp, lp) = forward(store)?;
            let fp = scalar(&gp, lp)?;
            store.get_mut(id).value.data_mut()[i] = orig - cfg.step;
            let (gm, lm) = forward(store)?;
            let fm = scalar(&gm, lm)?;
            store.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[id.index()][i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        deterministic: true,
        params,
        tolerance: cfg.tolerance,
    })
}
