//! Central-difference verification of recorded gradients.
//!
//! `gradcheck` runs a tensor program twice: once on the graph to collect
//! analytic gradients, then once per sampled parameter entry with `±h`
//! perturbations to form `(f(θ+h) - f(θ-h)) / 2h`. The relative error uses
//! `|a - n| / max(|a|, |n|, 1)` so near-zero gradients are compared on an
//! absolute scale.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Entries sampled per parameter; 0 checks every entry.
    pub max_entries_per_param: usize,
    /// Seed for entry sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-3,
            tol: 1e-4,
            max_entries_per_param: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err > self.tol)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "gradcheck: {} (max rel err {:.3e}, tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tol
        )?;
        for p in &self.params {
            writeln!(
                f,
                "  {:<40} {:>11.3e}  ({} entries)",
                p.name, p.max_rel_err, p.entries_checked
            )?;
        }
        Ok(())
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Verify the gradients of `build` with respect to every tensor in `params`.
///
/// `build` receives the parameter leaves (bound by name, in order) and must
/// return a scalar loss. It is re-invoked on fresh graphs for the numeric
/// evaluations, so it has to be deterministic.
pub fn gradcheck<F>(
    build: F,
    params: &[(String, Tensor)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[(String, Tensor)]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|(n, t)| g.param(n, t)).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "gradcheck loss must be scalar, got {:?}",
                g.shape(loss)
            )));
        }
        Ok(g.data(loss)[0])
    };

    // analytic pass
    let mut g = Graph::new();
    let tracked: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.clone().with_grad()))
        .collect();
    let ids: Vec<NodeId> = tracked.iter().map(|(n, t)| g.param(n, t)).collect();
    let loss = build(&mut g, &ids)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::contract(format!(
            "gradcheck loss must be scalar, got {:?}",
            g.shape(loss)
        )));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, (_, t))| g.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base: Vec<(String, Tensor)> = params.to_vec();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        tol: cfg.tol,
    };

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let numel = tensor.numel();
        let indices: Vec<usize> =
            if cfg.max_entries_per_param == 0 || numel <= cfg.max_entries_per_param {
                (0..numel).collect()
            } else {
                sample(&mut rng, numel, cfg.max_entries_per_param).into_vec()
            };
        let mut worst = 0.0f64;
        for &ei in &indices {
            let mut plus = base.clone();
            plus[pi].1.data_mut()[ei] += cfg.h;
            let lp = eval(&plus)?;
            let mut minus = base.clone();
            minus[pi].1.data_mut()[ei] -= cfg.h;
            let lm = eval(&minus)?;
            let numeric = (lp - lm) / (2.0 * cfg.h);
            worst = worst.max(rel_err(analytic[pi][ei], numeric));
        }
        report.params.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
            entries_checked: indices.len(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(name: &str, data: Vec<f64>, shape: &[usize]) -> (String, Tensor) {
        (name.to_string(), Tensor::new(data, shape).unwrap())
    }

    #[test]
    fn passes_on_simple_composite() {
        // loss = mean(sigmoid(x*w))
        let params = vec![
            named("x", vec![0.3, -0.7, 1.2, 0.05], &[2, 2]),
            named("w", vec![0.9, -1.1, 0.2, 0.4], &[2, 2]),
        ];
        let report = gradcheck(
            |g, ids| {
                let p = g.mul(ids[0], ids[1])?;
                let s = g.sigmoid(p);
                Ok(g.mean_all(s))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn detects_corrupted_backward_rule() {
        // forward computes sigmoid but the recorded rule is relu
        let params = vec![named("x", vec![0.4, -0.3, 0.8], &[1, 3])];
        let report = gradcheck(
            |g, ids| {
                let data: Vec<f64> = g
                    .data(ids[0])
                    .iter()
                    .map(|&v| 1.0 / (1.0 + (-v).exp()))
                    .collect();
                let t = Tensor::new(data, &[1, 3])?.with_grad();
                let corrupted = g.push_raw_for_test(t, ids[0]);
                Ok(g.mean_all(corrupted))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed(), "corrupted rule must be reported: {report}");
    }

    #[test]
    fn sampling_caps_entry_count() {
        let params = vec![named("x", (0..100).map(|i| i as f64 * 0.01).collect(), &[10, 10])];
        let cfg = GradCheckConfig {
            max_entries_per_param: 7,
            ..Default::default()
        };
        let report = gradcheck(
            |g, ids| {
                let s = g.sigmoid(ids[0]);
                Ok(g.mean_all(s))
            },
            &params,
            &cfg,
        )
        .unwrap();
        assert_eq!(report.params[0].entries_checked, 7);
        assert!(report.passed());
    }
}
