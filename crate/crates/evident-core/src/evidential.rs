//! Normal-Inverse-Gamma evidential regression: evidence heads, dual
//! uncertainty extraction, the evidential losses, evidence-guided Bayesian
//! fusion, and Student-t predictive intervals.
//!
//! Every formula exists twice: as plain `f64` math on [`NigParams`] for
//! inference and reporting, and as tape ops on [`NigNodes`] for training.
//! The two are cross-checked in tests.

use crate::matrix::Matrix;
use crate::nn::{Binding, Linear, ParamStore};
use crate::student_t;
use crate::tape::{NodeId, Tape};
use crate::{EvidentError, Result};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// Domain floor added after each softplus so the NIG constraints hold
/// strictly.
pub const NIG_EPS: f64 = 1e-6;

/// Evidence 4-tuple of one branch: predicted score `delta`, virtual
/// observation count `gamma` (> 0), shape `alpha` (> 1), scale `beta` (> 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub delta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(delta: f64, gamma: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = NigParams {
            delta,
            gamma,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.delta.is_finite()
            && self.gamma.is_finite()
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.gamma > 0.0
            && self.alpha > 1.0
            && self.beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(EvidentError::Numerical(format!(
                "invalid NIG parameters: delta={} gamma={} alpha={} beta={}",
                self.delta, self.gamma, self.alpha, self.beta
            )))
        }
    }

    /// (aleatoric, epistemic) = (beta/(alpha-1), beta/(gamma(alpha-1))).
    pub fn uncertainties(&self) -> (f64, f64) {
        assert!(self.alpha > 1.0, "uncertainties need alpha > 1");
        let au = self.beta / (self.alpha - 1.0);
        let eu = au / self.gamma;
        (au, eu)
    }

    /// Holistic evidence strength gamma + 2 alpha.
    pub fn evidence_strength(&self) -> f64 {
        self.gamma + 2.0 * self.alpha
    }

    /// Scale of the Student-t posterior predictive.
    pub fn predictive_scale(&self) -> f64 {
        (self.beta * (1.0 + self.gamma) / (self.gamma * self.alpha)).sqrt()
    }

    /// Negative log-likelihood of the posterior predictive at label `y`.
    pub fn nll(&self, y: f64) -> f64 {
        let omega = 2.0 * self.beta * (1.0 + self.gamma);
        0.5 * (std::f64::consts::PI / self.gamma).ln() - self.alpha * omega.ln()
            + ln_gamma(self.alpha)
            - ln_gamma(self.alpha + 0.5)
            + (self.alpha + 0.5) * (self.gamma * (y - self.delta).powi(2) + omega).ln()
    }

    /// Evidence regularizer |y - delta| (2 gamma + alpha).
    pub fn reg(&self, y: f64) -> f64 {
        (y - self.delta).abs() * (2.0 * self.gamma + self.alpha)
    }

    pub fn edl_loss(&self, y: f64, lambda_r: f64) -> f64 {
        self.nll(y) + lambda_r * self.reg(y)
    }

    /// Symmetric predictive interval at the given coverage level, from the
    /// exact Student-t posterior predictive (nu = 2 alpha).
    pub fn predictive_interval(&self, coverage: f64) -> Result<(f64, f64)> {
        if !(0.0 < coverage && coverage < 1.0) {
            return Err(EvidentError::Config(format!(
                "coverage must be in (0,1), got {coverage}"
            )));
        }
        let nu = 2.0 * self.alpha;
        let q = student_t::quantile((1.0 + coverage) / 2.0, nu)?;
        let s = self.predictive_scale();
        Ok((self.delta - q * s, self.delta + q * s))
    }

    /// Posterior predictive density at `y`.
    pub fn predictive_density(&self, y: f64) -> f64 {
        let s = self.predictive_scale();
        (student_t::ln_pdf((y - self.delta) / s, 2.0 * self.alpha) - s.ln()).exp()
    }
}

/// Evidence-guided Bayesian fusion of K >= 1 branches.
///
/// Weights w_k = gamma_k + 2 alpha_k; the fused mean is the
/// evidence-weighted average, counts and shapes accumulate, and the
/// quadratic dispersion term in beta acts as a conflict penalty.
pub fn fuse(branches: &[NigParams]) -> Result<NigParams> {
    if branches.is_empty() {
        return Err(EvidentError::EmptyInput("fuse of zero branches".into()));
    }
    for b in branches {
        b.validate()?;
    }
    let weights: Vec<f64> = branches.iter().map(NigParams::evidence_strength).collect();
    let wsum: f64 = weights.iter().sum();
    let delta_f = branches
        .iter()
        .zip(&weights)
        .map(|(b, w)| w * b.delta)
        .sum::<f64>()
        / wsum;
    let gamma_f: f64 = branches.iter().map(|b| b.gamma).sum();
    let alpha_f: f64 =
        branches.iter().map(|b| b.alpha).sum::<f64>() + (branches.len() as f64 - 1.0) / 2.0;
    let dispersion: f64 = branches
        .iter()
        .map(|b| b.gamma * (b.delta - delta_f).powi(2))
        .sum();
    let beta_f = branches.iter().map(|b| b.beta).sum::<f64>() + 0.5 * dispersion;
    NigParams::new(delta_f, gamma_f, alpha_f, beta_f)
}

/// The three evidence branches plus their fusion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchEvidence {
    pub shared: NigParams,
    pub private_v: NigParams,
    pub private_a: NigParams,
    pub fused: NigParams,
    pub weights: [f64; 3],
}

impl BranchEvidence {
    pub fn from_branches(
        shared: NigParams,
        private_v: NigParams,
        private_a: NigParams,
    ) -> Result<Self> {
        let fused = fuse(&[shared, private_v, private_a])?;
        Ok(BranchEvidence {
            shared,
            private_v,
            private_a,
            fused,
            weights: [
                shared.evidence_strength(),
                private_v.evidence_strength(),
                private_a.evidence_strength(),
            ],
        })
    }
}

/// Point prediction with decomposed uncertainties and a symmetric
/// predictive interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub score: f64,
    pub au: f64,
    pub eu: f64,
    pub interval_low: f64,
    pub interval_high: f64,
    pub coverage_level: f64,
}

impl UncertaintyReport {
    pub fn from_params(p: &NigParams, coverage: f64) -> Result<Self> {
        let (au, eu) = p.uncertainties();
        let (lo, hi) = p.predictive_interval(coverage)?;
        Ok(UncertaintyReport {
            score: p.delta,
            au,
            eu,
            interval_low: lo,
            interval_high: hi,
            coverage_level: coverage,
        })
    }
}

/// Tape-resident NIG parameters (each node is 1x1).
#[derive(Debug, Clone, Copy)]
pub struct NigNodes {
    pub delta: NodeId,
    pub gamma: NodeId,
    pub alpha: NodeId,
    pub beta: NodeId,
}

impl NigNodes {
    /// Snapshot current values into plain parameters.
    pub fn values(&self, tape: &Tape) -> NigParams {
        NigParams {
            delta: tape.item(self.delta),
            gamma: tape.item(self.gamma),
            alpha: tape.item(self.alpha),
            beta: tape.item(self.beta),
        }
    }
}

/// Bias preset such that a zero input yields gamma ~ 1, alpha ~ 2,
/// beta ~ 1 (softplus(v) = 1 at v = ln(e - 1)); avoids the evidential
/// cold-start collapse.
pub fn head_bias_preset() -> [f64; 4] {
    let v = (std::f64::consts::E - 1.0).ln();
    [0.0, v, v, v]
}

/// Linear head projecting a feature row into the four raw NIG values,
/// followed by the domain-enforcing activations.
#[derive(Debug, Clone)]
pub struct EvidenceHead {
    pub lin: Linear,
}

impl EvidenceHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, d_in: usize) -> Self {
        EvidenceHead {
            lin: Linear::with_bias(store, rng, name, d_in, &head_bias_preset()),
        }
    }

    /// Map a 1xD feature node to constrained NIG parameter nodes:
    /// delta = v1, gamma = softplus(v2) + eps, alpha = softplus(v3) + 1 + eps,
    /// beta = softplus(v4) + eps.
    pub fn forward(&self, bind: &Binding, z: NodeId) -> NigNodes {
        let t = bind.tape;
        let raw = self.lin.forward(bind, z);
        let v1 = t.slice_cols(raw, 0, 1);
        let v2 = t.slice_cols(raw, 1, 1);
        let v3 = t.slice_cols(raw, 2, 1);
        let v4 = t.slice_cols(raw, 3, 1);
        NigNodes {
            delta: v1,
            gamma: t.add_scalar(t.softplus(v2), NIG_EPS),
            alpha: t.add_scalar(t.softplus(v3), 1.0 + NIG_EPS),
            beta: t.add_scalar(t.softplus(v4), NIG_EPS),
        }
    }
}

/// Raw 4-vector to constrained parameters, without a tape. Mirrors
/// [`EvidenceHead::forward`].
pub fn activate_raw(raw: [f64; 4]) -> NigParams {
    NigParams {
        delta: raw[0],
        gamma: crate::tape::softplus_stable(raw[1]) + NIG_EPS,
        alpha: crate::tape::softplus_stable(raw[2]) + 1.0 + NIG_EPS,
        beta: crate::tape::softplus_stable(raw[3]) + NIG_EPS,
    }
}

/// NLL of the posterior predictive as a graph node.
pub fn nll_graph(tape: &Tape, p: &NigNodes, y: f64) -> NodeId {
    let t = tape;
    let omega = t.scale(t.mul(p.beta, t.add_scalar(p.gamma, 1.0)), 2.0);
    // 0.5 ln(pi/gamma)
    let term1 = t.scale(
        t.add_scalar(t.scale(t.ln(p.gamma), -1.0), std::f64::consts::PI.ln()),
        0.5,
    );
    let term2 = t.scale(t.mul(p.alpha, t.ln(omega)), -1.0);
    let c_alpha = t.sub(t.ln_gamma(p.alpha), t.ln_gamma(t.add_scalar(p.alpha, 0.5)));
    let resid = t.add(t.mul(p.gamma, t.square(t.add_scalar(p.delta, -y))), omega);
    let term4 = t.mul(t.add_scalar(p.alpha, 0.5), t.ln(resid));
    t.add(t.add(term1, term2), t.add(c_alpha, term4))
}

/// Evidence regularizer |y - delta| (2 gamma + alpha) as a graph node.
pub fn reg_graph(tape: &Tape, p: &NigNodes, y: f64) -> NodeId {
    let t = tape;
    let err = t.abs(t.add_scalar(t.scale(p.delta, -1.0), y));
    t.mul(err, t.add(t.scale(p.gamma, 2.0), p.alpha))
}

/// Total per-branch evidential loss nll + lambda_r * reg.
pub fn edl_graph(tape: &Tape, p: &NigNodes, y: f64, lambda_r: f64) -> NodeId {
    let nll = nll_graph(tape, p, y);
    if lambda_r == 0.0 {
        nll
    } else {
        tape.add(nll, tape.scale(reg_graph(tape, p, y), lambda_r))
    }
}

/// Evidence-guided Bayesian fusion inside the gradient graph; gradients
/// flow through the weights, the dispersion term, everything.
pub fn fuse_graph(tape: &Tape, branches: &[NigNodes]) -> NigNodes {
    assert!(!branches.is_empty(), "fuse_graph of zero branches");
    let t = tape;
    let weights: Vec<NodeId> = branches
        .iter()
        .map(|b| t.add(b.gamma, t.scale(b.alpha, 2.0)))
        .collect();
    let wsum = weights
        .iter()
        .copied()
        .reduce(|acc, w| t.add(acc, w))
        .unwrap();
    let weighted = branches
        .iter()
        .zip(&weights)
        .map(|(b, w)| t.mul(*w, b.delta))
        .reduce(|acc, x| t.add(acc, x))
        .unwrap();
    let delta_f = t.div(weighted, wsum);
    let gamma_f = branches
        .iter()
        .map(|b| b.gamma)
        .reduce(|acc, x| t.add(acc, x))
        .unwrap();
    let alpha_sum = branches
        .iter()
        .map(|b| b.alpha)
        .reduce(|acc, x| t.add(acc, x))
        .unwrap();
    let alpha_f = t.add_scalar(alpha_sum, (branches.len() as f64 - 1.0) / 2.0);
    let dispersion = branches
        .iter()
        .map(|b| t.mul(b.gamma, t.square(t.sub(b.delta, delta_f))))
        .reduce(|acc, x| t.add(acc, x))
        .unwrap();
    let beta_sum = branches
        .iter()
        .map(|b| b.beta)
        .reduce(|acc, x| t.add(acc, x))
        .unwrap();
    let beta_f = t.add(beta_sum, t.scale(dispersion, 0.5));
    NigNodes {
        delta: delta_f,
        gamma: gamma_f,
        alpha: alpha_f,
        beta: beta_f,
    }
}
