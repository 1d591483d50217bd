//! Central finite-difference checks of analytic gradients in f64.

use std::fmt;

use genvit_autograd::{Graph, ParamStore, Var};
use rand::Rng as _;
use serde::Serialize;

use super::features::FeatureCache;
use super::instruct::instruct_loss;
use crate::data::InstructionRecord;
use crate::error::Result;
use crate::model::diffusion::DiffusionDraws;
use crate::model::{Model, INSTRUCT_COMPONENTS};
use crate::rng;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
/// Selector for the diffusion loss alone, checked on LM and head parameters.
pub const DIFFUSION_PATH: &str = "diffusion_path";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ComponentStatus {
    Checked,
    SkippedFrozen,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub status: ComponentStatus,
    pub checks: Vec<ScalarCheck>,
}

impl ComponentReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.checks.iter().map(|c| (c.analytic - c.numeric).abs()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.status != ComponentStatus::Checked || self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub components: Vec<ComponentReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed())
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.components {
            match c.status {
                ComponentStatus::SkippedFrozen => writeln!(f, "{:<16} skipped (frozen)", c.component)?,
                ComponentStatus::Missing => writeln!(f, "{:<16} no parameters", c.component)?,
                ComponentStatus::Checked => {
                    let ok = c.checks.iter().filter(|s| s.passed).count();
                    writeln!(
                        f,
                        "{:<16} {}/{} passed, max rel err {:.3e}, max abs err {:.3e}",
                        c.component,
                        ok,
                        c.checks.len(),
                        c.max_rel_err(),
                        c.max_abs_err()
                    )?
                }
            }
        }
        Ok(())
    }
}

pub fn compare(analytic: f64, numeric: f64) -> (f64, bool) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = if scale > 0.0 { diff / scale } else { 0.0 };
    (rel, diff < ABS_TOL || rel < REL_TOL)
}

/// Checks `d loss / d store[name][index]` for each pick.
pub fn check_scalars<F>(store: &ParamStore<f64>, picks: &[(String, usize)], loss: F) -> Result<Vec<ScalarCheck>>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        let grads = g.backward(l);
        g.param_grads(&grads)
    };
    let mut work = store.clone();
    let eval = |work: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(work).no_grad();
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut out = Vec::with_capacity(picks.len());
    for (name, i) in picks {
        let orig = work.get(name).expect("picked parameter exists").data()[*i];
        work.get_mut(name).unwrap().data_mut()[*i] = orig + FD_STEP;
        let up = eval(&work)?;
        work.get_mut(name).unwrap().data_mut()[*i] = orig - FD_STEP;
        let down = eval(&work)?;
        work.get_mut(name).unwrap().data_mut()[*i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.get(name).map(|t| t.data()[*i]).unwrap_or(0.0);
        let (rel_err, passed) = compare(a, numeric);
        out.push(ScalarCheck { param: name.clone(), index: *i, analytic: a, numeric, rel_err, passed });
    }
    Ok(out)
}

/// Attention key biases: softmax is shift-invariant, so their gradient is exactly zero.
fn zero_gradient_by_construction(name: &str) -> bool {
    name.ends_with("/k/b")
}

/// `n` random (tensor, index) picks among the unfrozen tensors of `components`.
pub fn pick_scalars(store: &ParamStore<f64>, components: &[&str], n: usize, seed: u64, label: &str) -> Vec<(String, usize)> {
    let names: Vec<(String, usize)> = store
        .iter()
        .filter(|(name, e)| {
            !e.frozen && components.contains(&genvit_autograd::component_of(name)) && !zero_gradient_by_construction(name)
        })
        .map(|(name, e)| (name.to_string(), e.tensor.numel()))
        .collect();
    if names.is_empty() {
        return Vec::new();
    }
    let mut r = rng::stream(seed, label, 0);
    (0..n)
        .map(|_| {
            let (name, len) = &names[r.random_range(0..names.len())];
            (name.clone(), r.random_range(0..*len))
        })
        .collect()
}

/// Checks the composite instruction-tuning loss on `batch` for each selector:
/// a component name, or [`DIFFUSION_PATH`] for the diffusion term alone.
pub fn grad_check(
    model: &Model,
    selectors: &[&str],
    batch: &[&InstructionRecord],
    cache: &FeatureCache,
    per_component: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut m = model.clone();
    m.train_only(&INSTRUCT_COMPONENTS);
    let store = m.params.cast::<f64>();
    let c = &m.config;
    let n_gen = super::instruct::generating(batch).len();
    let s = c.latent_side();
    let draws = DiffusionDraws::sample(
        &mut rng::stream(seed, "gradcheck/noise", 0),
        n_gen,
        &[s, s, c.latent_channels],
        c.diffusion_steps,
        0.0,
    );
    let present = m.params.components();
    let mut components = Vec::new();
    for &sel in selectors {
        let (comps, lambda_lm): (Vec<&str>, f64) =
            if sel == DIFFUSION_PATH { (vec!["lm", "gen_head"], 0.0) } else { (vec![sel], 1.0) };
        if !comps.iter().all(|k| present.iter().any(|p| p == k)) {
            components.push(ComponentReport { component: sel.into(), status: ComponentStatus::Missing, checks: vec![] });
            continue;
        }
        let picks = pick_scalars(&store, &comps, per_component, seed, &format!("gradcheck/{sel}"));
        if picks.is_empty() {
            components.push(ComponentReport { component: sel.into(), status: ComponentStatus::SkippedFrozen, checks: vec![] });
            continue;
        }
        let checks = check_scalars(&store, &picks, |g| {
            Ok(instruct_loss(g, c, batch, cache, &draws, 1, lambda_lm, 1.0)?.total)
        })?;
        components.push(ComponentReport { component: sel.into(), status: ComponentStatus::Checked, checks });
    }
    Ok(GradCheckReport { components })
}
