//! Central-difference verification of [`backward`].

use crate::error::Result;
use crate::model::MoeModel;

use super::backward::{backward, forward, GradientSet};
use super::{CachedSample, TrainingConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate with the largest error, as `block[index]`.
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose perturbation changed a routing selection, a top-1
    /// assignment or a ReLU activation pattern.
    pub skipped: usize,
}

/// Piecewise-constant state of the objective: selections, top-1 experts and
/// hidden-unit activity. Finite differences are meaningful only while it is
/// unchanged.
fn regime(model: &MoeModel, batch: &[&CachedSample], config: &TrainingConfig) -> Result<(f64, Vec<u64>)> {
    let (outcome, traces) = forward(model, batch, config)?;
    let mut sig = Vec::new();
    for t in &traces {
        sig.extend(t.decision.selected.iter().map(|&(e, _)| e as u64));
        sig.push(u64::MAX);
        sig.push(t.decision.top1() as u64);
        sig.extend(t.pre.iter().map(|&a| u64::from(a > 0.0)));
    }
    Ok((outcome.loss, sig))
}

fn with_coordinate<F>(model: &mut MoeModel, block: usize, index: usize, f: F)
where
    F: FnOnce(&mut f64),
{
    let n = model.projections.weights.len();
    let slot: &mut f64 = match block {
        0 => &mut model.router.weight.as_mut_slice()[index],
        1 => &mut model.router.bias[index],
        b if b < 2 + n => &mut model.projections.weights[b - 2].as_mut_slice()[index],
        b if b < 2 + 2 * n => &mut model.projections.biases[b - 2 - n][index],
        b if b == 2 + 2 * n => &mut model.head.w_p.as_mut_slice()[index],
        b if b == 3 + 2 * n => &mut model.head.b_p[index],
        b if b == 4 + 2 * n => &mut model.head.w_c[index],
        _ => &mut model.head.b_c,
    };
    f(slot);
}

fn blocks(g: &GradientSet) -> Vec<(String, Vec<f64>)> {
    let mut out = vec![
        ("router.weight".to_string(), g.router.weight.as_slice().to_vec()),
        ("router.bias".to_string(), g.router.bias.clone()),
    ];
    for (e, w) in g.projections.weights.iter().enumerate() {
        out.push((format!("projections.weight[{e}]"), w.as_slice().to_vec()));
    }
    for (e, b) in g.projections.biases.iter().enumerate() {
        out.push((format!("projections.bias[{e}]"), b.clone()));
    }
    out.push(("head.w_p".into(), g.head.w_p.as_slice().to_vec()));
    out.push(("head.b_p".into(), g.head.b_p.clone()));
    out.push(("head.w_c".into(), g.head.w_c.clone()));
    out.push(("head.b_c".into(), vec![g.head.b_c]));
    out
}

/// Compares the analytic gradient with `(L(θ+ε) − L(θ−ε)) / 2ε` on every
/// trainable coordinate, using the relative error
/// `|g_a − g_n| / max(1e-8, |g_a| + |g_n|)`.
///
/// Router coordinates are included only for strategies that train the
/// router end to end.
pub fn finite_diff_check(
    model: &MoeModel,
    batch: &[&CachedSample],
    config: &TrainingConfig,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = backward(model, batch, config)?;
    let (_, base_sig) = regime(model, batch, config)?;
    let train_router = super::backward::router_trainable(model.settings.strategy);
    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    for (block, (name, grads)) in blocks(&analytic).into_iter().enumerate() {
        if block < 2 && !train_router {
            continue;
        }
        for (index, &ga) in grads.iter().enumerate() {
            let mut original = 0.0;
            with_coordinate(&mut work, block, index, |v| {
                original = *v;
                *v = original + eps;
            });
            let (plus, sig_plus) = regime(&work, batch, config)?;
            with_coordinate(&mut work, block, index, |v| *v = original - eps);
            let (minus, sig_minus) = regime(&work, batch, config)?;
            with_coordinate(&mut work, block, index, |v| *v = original);
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped += 1;
                continue;
            }
            let gn = (plus - minus) / (2.0 * eps);
            let err = (ga - gn).abs() / (ga.abs() + gn.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = format!("{name}[{index}]");
            }
        }
    }
    Ok(report)
}
