//! Central finite-difference verification of analytic gradients.

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{prediction_loss, total_loss, Batch, WorldModel};
use crate::params::ParamStore;

/// Name used for the codebook in reports.
pub const CODEBOOK_GROUP: &str = "codebook.codes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn check_tensor(
    name: &str,
    base: &Array2<f64>,
    analytic: Option<&Array2<f64>>,
    h: f64,
    mut eval: impl FnMut(&Array2<f64>) -> f64,
) -> GroupCheck {
    let mut work = base.clone();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for idx in 0..base.len() {
        let (r, c) = (idx / base.ncols(), idx % base.ncols());
        let x = base[[r, c]];
        work[[r, c]] = x + h;
        let up = eval(&work);
        work[[r, c]] = x - h;
        let down = eval(&work);
        work[[r, c]] = x;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.map_or(0.0, |g| g[[r, c]]);
        max_rel = max_rel.max(relative_error(a, numeric));
        max_abs = max_abs.max((a - numeric).abs());
    }
    GroupCheck { name: name.to_string(), entries: base.len(), max_rel, max_abs }
}

fn report(groups: Vec<GroupCheck>) -> GradCheckReport {
    let max_rel = groups.iter().map(|g| g.max_rel).fold(0.0, f64::max);
    GradCheckReport { groups, max_rel }
}

/// Checks every tensor of `store` against `analytic` (missing entries count as zero).
pub fn check_store(
    store: &ParamStore,
    analytic: &IndexMap<String, Array2<f64>>,
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut groups = Vec::new();
    for (name, base) in store.iter() {
        let mut probe = store.clone();
        groups.push(check_tensor(name, base, analytic.get(name), h, |w| {
            *probe.get_mut(name).expect("present") = w.clone();
            loss(&probe)
        }));
    }
    report(groups)
}

/// Gradient check of the total loss on one batch, in evaluation mode, over every
/// parameter group including the codebook. Nearest-code targets are held at the
/// unperturbed codes.
pub fn model_grad_check(model: &WorldModel, batch: &Batch, target: &Array2<f64>, lambda: f64, h: f64) -> Result<GradCheckReport> {
    let frozen = model.codebook.codes.clone();
    let loss_of = |m: &WorldModel| -> Result<f64> {
        let mut fwd = m.forward(batch, None, Some(&frozen))?;
        let p = prediction_loss(&mut fwd.tape, fwd.prediction, target.clone())?;
        let l = total_loss(&mut fwd.tape, p, fwd.vq_loss, lambda);
        Ok(fwd.tape.scalar(l))
    };
    loss_of(model)?;

    let mut fwd = model.forward(batch, None, Some(&frozen))?;
    let p = prediction_loss(&mut fwd.tape, fwd.prediction, target.clone())?;
    let l = total_loss(&mut fwd.tape, p, fwd.vq_loss, lambda);
    let mut grads = fwd.tape.backward(l);
    let mut analytic = IndexMap::new();
    for (name, var) in fwd.binder.bound() {
        if let Some(g) = grads.take(var) {
            analytic.insert(name.to_string(), g);
        }
    }
    let code_grad = fwd.codes.and_then(|c| grads.take(c));
    drop(fwd);

    let mut probe = model.clone();
    let mut groups = check_store(&model.params, &analytic, h, |store| {
        probe.params = store.clone();
        loss_of(&probe).expect("forward succeeded once")
    })
    .groups;
    if model.config.ablations.uses_codebook() {
        let mut probe = model.clone();
        groups.push(check_tensor(CODEBOOK_GROUP, &model.codebook.codes, code_grad.as_ref(), h, |w| {
            probe.codebook.codes = w.clone();
            loss_of(&probe).expect("forward succeeded once")
        }));
    }
    Ok(report(groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", array![[0.3, -1.2], [2.0, 0.5]]);
        let loss = |s: &ParamStore| s.expect("w").iter().map(|v| 0.5 * v * v + 2.0 * v).sum::<f64>();
        let mut analytic = IndexMap::new();
        analytic.insert("w".to_string(), store.expect("w").mapv(|v| v + 2.0));
        let r = check_store(&store, &analytic, 1e-5, loss);
        assert!(r.max_rel < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParamStore::new();
        store.insert("w", array![[1.0]]);
        let mut analytic = IndexMap::new();
        analytic.insert("w".to_string(), array![[3.0]]);
        let r = check_store(&store, &analytic, 1e-5, |s| s.expect("w")[[0, 0]].powi(2));
        assert!((r.max_rel - 1.0 / 3.0).abs() < 1e-6);
    }
}
