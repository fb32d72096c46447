//! Central finite-difference verification of tape gradients.
//!
//! The numeric side runs the graph on the `f64` reference backend, so it
//! shares neither kernels nor precision with the analytic side. Probes whose
//! `+eps` and `-eps` evaluations fall on different linear pieces of a ReLU or
//! abs (or on a different piece than the traced point) are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{forward_traced, Exec, Graph, Reduced, Reduction};
use crate::error::{config_err, Error, Result};
use crate::params::ParamStore;
use crate::reference::ReferenceExec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub epsilon: f64,
    pub probes: usize,
    pub seed: u64,
    pub reduction: Reduction,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            probes: 64,
            seed: 0,
            reduction: Reduction::Projection(0x5eed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<ProbeResult>,
    /// Draws rejected for straddling a kink.
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn reference_loss<G: Graph>(
    graph: &G,
    inputs: &[Tensor],
    params: &ParamStore,
    probe: Option<(&str, usize, f64)>,
) -> Result<(f64, Vec<i8>)> {
    let mut ex = match probe {
        Some((name, idx, delta)) => {
            ReferenceExec::<f64>::with_perturbation(params, name, idx, delta)
        }
        None => ReferenceExec::<f64>::new(params),
    };
    let vals: Vec<_> = inputs.iter().map(|t| ex.constant(t.clone())).collect();
    let out = graph.forward(&mut ex, &vals)?;
    let loss = match out.as_slice() {
        [l] if l.data.len() == 1 => l.data[0],
        _ => return Err(config_err("gradcheck graph must reduce to one scalar")),
    };
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {loss} during gradcheck"
        )));
    }
    Ok((loss, ex.kink_signature().to_vec()))
}

/// Compares tape gradients of `reduction(graph(inputs))` against central
/// differences at `probes` random parameter coordinates and returns the
/// worst relative error, with denominator `max(|analytic|, |numeric|, 1e-6)`.
pub fn fd_gradcheck<G: Graph>(
    graph: &G,
    inputs: &[Tensor],
    params: &ParamStore,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    if !(1e-4..=1e-2).contains(&cfg.epsilon) {
        return Err(config_err(format!(
            "gradcheck epsilon {} outside [1e-4, 1e-2]",
            cfg.epsilon
        )));
    }
    if cfg.probes == 0 {
        return Err(config_err("gradcheck needs at least one probe"));
    }
    let names: Vec<&String> = params.names().collect();
    if names.is_empty() {
        return Err(config_err("gradcheck needs at least one parameter"));
    }

    let reduced = Reduced {
        graph,
        reduction: cfg.reduction,
    };
    let traced = forward_traced(&reduced, inputs, params)?;
    let loss = traced.output(0).data()[0];
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite traced loss {loss}")));
    }
    let grads = traced.backward()?;
    let base_sig = traced.tape.kink_signature();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probes = Vec::with_capacity(cfg.probes);
    let mut skipped = 0;
    let max_draws = cfg.probes * 20;
    let mut draws = 0;
    while probes.len() < cfg.probes {
        if draws == max_draws {
            return Err(Error::Numerical(format!(
                "gradcheck: only {} of {} probes avoided kinks after {draws} draws",
                probes.len(),
                cfg.probes
            )));
        }
        draws += 1;
        let name = names[rng.random_range(0..names.len())];
        let index = rng.random_range(0..params.require(name)?.numel());
        let (plus, sig_plus) =
            reference_loss(&reduced, inputs, params, Some((name, index, cfg.epsilon)))?;
        let (minus, sig_minus) =
            reference_loss(&reduced, inputs, params, Some((name, index, -cfg.epsilon)))?;
        if sig_plus != sig_minus || sig_plus != base_sig {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let analytic = grads
            .get(name)
            .expect("gradient for every parameter")
            .data()[index] as f64;
        probes.push(ProbeResult {
            name: name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_error,
        probes,
        skipped,
    })
}

/// Loss of `reduction(graph(inputs))` evaluated in `f64` on the reference
/// backend.
pub fn reference_objective<G: Graph>(
    graph: &G,
    inputs: &[Tensor],
    params: &ParamStore,
    reduction: Reduction,
) -> Result<f64> {
    let reduced = Reduced { graph, reduction };
    reference_loss(&reduced, inputs, params, None).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;

    /// loss = sum(w * x)
    struct Linear;
    impl Graph for Linear {
        fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
            let w = ex.param("w")?;
            Ok(vec![ex.mul(&w, &inputs[0])?])
        }
    }

    struct Wiggle;
    impl Graph for Wiggle {
        fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
            let w = ex.param("w")?;
            let y = ex.mul(&w, &inputs[0])?;
            let y = ex.activation(&y, Activation::Sigmoid)?;
            let z = ex.softmax_lastdim(&y)?;
            Ok(vec![ex.mul(&z, &y)?])
        }
    }

    fn setup() -> (Vec<Tensor>, ParamStore) {
        let x = Tensor::from_fn([1, 2, 3, 4], |_, j, y, x| {
            0.3 * j as f32 - 0.2 * y as f32 + 0.1 * x as f32
        });
        let mut p = ParamStore::new();
        p.insert(
            "w",
            Tensor::from_fn([1, 2, 3, 4], |_, j, y, x| 0.5 - 0.1 * (j + y + x) as f32),
        );
        (vec![x], p)
    }

    #[test]
    fn linear_graph_is_exact() {
        let (x, p) = setup();
        let cfg = GradcheckConfig {
            reduction: Reduction::Sum,
            probes: 16,
            ..Default::default()
        };
        let r = fd_gradcheck(&Linear, &x, &p, &cfg).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{:?}", r.worst());
    }

    #[test]
    fn smooth_graph_passes() {
        let (x, p) = setup();
        let r = fd_gradcheck(&Wiggle, &x, &p, &GradcheckConfig::default()).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{:?}", r.worst());
    }

    #[test]
    fn epsilon_range_enforced() {
        let (x, p) = setup();
        let cfg = GradcheckConfig {
            epsilon: 0.5,
            ..Default::default()
        };
        assert!(fd_gradcheck(&Linear, &x, &p, &cfg).is_err());
    }
}
