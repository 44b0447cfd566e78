//! The six terms of the training objective, built as graph nodes:
//! factual-outcome regression, treatment classification, group discrepancy,
//! covariate reconstruction, weight-contribution orthogonality, and L2
//! regularization of the four heads. The total is
//! `L_reg + alpha*L_class + beta*L_disc + gamma*L_recons + lambda*L_orth + mu*Reg`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::networks::TapeBinding;
use crate::tensor::Tensor;

/// Predicted probabilities are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]`
/// before the log so binary cross-entropy gradients stay finite.
pub const CLAMP_EPS: f64 = 1e-7;

/// Scalar multipliers of the objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Treatment classification.
    pub alpha: f64,
    /// Group discrepancy on the adjustment embedding.
    pub beta: f64,
    /// Covariate reconstruction.
    pub gamma: f64,
    /// Weight-contribution orthogonality.
    pub lambda: f64,
    /// L2 on the four heads.
    pub mu: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.lambda, self.mu];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Entropic-regularized optimal transport settings. The ground cost is
/// always squared Euclidean distance between embedding rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 1.0,
            iterations: 10,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig("sinkhorn epsilon must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("sinkhorn iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean squared error between observed outcomes and the head matching each
/// unit's observed treatment; the counterfactual head receives no gradient.
///
/// `y` and `t_mask` are `n x 1` nodes, `t_mask` holding 0/1 indicators.
pub fn regression_loss(
    g: &mut Graph,
    y: NodeId,
    t_mask: NodeId,
    y0_hat: NodeId,
    y1_hat: NodeId,
) -> Result<NodeId> {
    if g.value(y).rows() == 0 {
        return Err(Error::EmptyBatch("regression_loss"));
    }
    let treated = g.mul(t_mask, y1_hat)?;
    let control_mask = g.affine_scalar(t_mask, -1.0, 1.0)?;
    let control = g.mul(control_mask, y0_hat)?;
    let factual = g.add(treated, control)?;
    let diff = g.sub(factual, y)?;
    let sq = g.square(diff)?;
    g.mean_all(sq)
}

/// Mean binary cross-entropy of predicted treatment probabilities.
pub fn classification_loss(g: &mut Graph, t_mask: NodeId, t_hat: NodeId) -> Result<NodeId> {
    if g.value(t_hat).rows() == 0 {
        return Err(Error::EmptyBatch("classification_loss"));
    }
    let p = g.clamp(t_hat, CLAMP_EPS, 1.0 - CLAMP_EPS)?;
    let log_p = g.log(p)?;
    let pos = g.mul(t_mask, log_p)?;
    let one_minus_p = g.affine_scalar(p, -1.0, 1.0)?;
    let log_q = g.log(one_minus_p)?;
    let neg_mask = g.affine_scalar(t_mask, -1.0, 1.0)?;
    let negt = g.mul(neg_mask, log_q)?;
    let ll = g.add(pos, negt)?;
    let mean = g.mean_all(ll)?;
    g.neg(mean)
}

/// Entropic OT cost between two point clouds with uniform marginals,
/// differentiable through the unrolled iterations.
///
/// Uses the symmetric damped update `f <- (f + F(g))/2`, `g <- (g + G(f))/2`
/// with both halves computed from the previous iterate: this is exactly
/// equivariant under swapping the two inputs (plain alternation is not at a
/// finite iteration count) and damps the period-2 oscillation the undamped
/// parallel update exhibits. The log-domain form stays stable at small
/// epsilon.
pub fn sinkhorn_cost(g: &mut Graph, a: NodeId, b: NodeId, cfg: &SinkhornConfig) -> Result<NodeId> {
    cfg.validate()?;
    let n0 = g.value(a).rows();
    let n1 = g.value(b).rows();
    let eps = cfg.epsilon;
    let log_a = (1.0 / n0 as f64).ln();
    let log_b = (1.0 / n1 as f64).ln();

    let cost = g.pairwise_sqdist(a, b)?; // n0 x n1
    let scaled = g.scale(cost, -1.0 / eps)?;

    let mut f = g.constant(Tensor::zeros(n0, 1))?;
    let mut g_pot = g.constant(Tensor::zeros(1, n1))?;
    for _ in 0..cfg.iterations {
        let g_over_eps = g.scale(g_pot, 1.0 / eps)?;
        let row_arg = g.add_row_vec(scaled, g_over_eps)?;
        let row_lse = g.logsumexp_rows(row_arg)?;
        let f_update = g.affine_scalar(row_lse, -eps, eps * log_a)?;
        let f_sum = g.add(f, f_update)?;
        let f_next = g.scale(f_sum, 0.5)?;

        let f_over_eps = g.scale(f, 1.0 / eps)?;
        let col_arg = g.add_col_vec(scaled, f_over_eps)?;
        let col_lse = g.logsumexp_cols(col_arg)?;
        let g_update = g.affine_scalar(col_lse, -eps, eps * log_b)?;
        let g_sum = g.add(g_pot, g_update)?;
        let g_next = g.scale(g_sum, 0.5)?;

        f = f_next;
        g_pot = g_next;
    }

    // P_ij = exp((f_i + g_j - C_ij) / eps); transport cost = <P, C>.
    let g_over_eps = g.scale(g_pot, 1.0 / eps)?;
    let with_g = g.add_row_vec(scaled, g_over_eps)?;
    let f_over_eps = g.scale(f, 1.0 / eps)?;
    let log_plan = g.add_col_vec(with_g, f_over_eps)?;
    let plan = g.exp(log_plan)?;
    g.dot(plan, cost)
}

/// Split embedding rows by treatment, then entropic OT between the two
/// empirical distributions. Fails on a single-group batch; callers that want
/// the zero-contribution convention use [`discrepancy_or_zero`].
pub fn discrepancy_loss(
    g: &mut Graph,
    embedding: NodeId,
    t: &[u8],
    cfg: &SinkhornConfig,
) -> Result<NodeId> {
    let n = g.value(embedding).rows();
    if t.len() != n {
        return Err(Error::LengthMismatch {
            context: "discrepancy_loss",
            left: t.len(),
            right: n,
        });
    }
    let control: Vec<usize> = (0..n).filter(|&i| t[i] == 0).collect();
    let treated: Vec<usize> = (0..n).filter(|&i| t[i] == 1).collect();
    if treated.is_empty() {
        return Err(Error::SingleTreatmentGroup {
            context: "discrepancy_loss",
            group: 0,
        });
    }
    if control.is_empty() {
        return Err(Error::SingleTreatmentGroup {
            context: "discrepancy_loss",
            group: 1,
        });
    }
    let rows0 = g.gather_rows(embedding, &control)?;
    let rows1 = g.gather_rows(embedding, &treated)?;
    sinkhorn_cost(g, rows0, rows1, cfg)
}

/// Discrepancy, or an exact-zero constant when the batch holds only one
/// treatment group (the minibatch convention used in training).
pub fn discrepancy_or_zero(
    g: &mut Graph,
    embedding: NodeId,
    t: &[u8],
    cfg: &SinkhornConfig,
) -> Result<NodeId> {
    match discrepancy_loss(g, embedding, t, cfg) {
        Ok(id) => Ok(id),
        Err(Error::SingleTreatmentGroup { .. }) => g.scalar_const(0.0),
        Err(e) => Err(e),
    }
}

/// Column-wise z-score of a batch on the tape (mean and variance are part of
/// the differentiable computation). Used to put embeddings on a comparable
/// scale before the discrepancy term.
pub fn standardize_columns(g: &mut Graph, a: NodeId) -> Result<NodeId> {
    let mu = g.mean_cols(a)?;
    let neg_mu = g.neg(mu)?;
    let centered = g.add_row_vec(a, neg_mu)?;
    let sq = g.square(centered)?;
    let var = g.mean_cols(sq)?;
    let var_eps = g.add_scalar(var, 1e-8)?;
    let std = g.sqrt(var_eps)?;
    let inv = g.recip(std)?;
    g.mul_row_vec(centered, inv)
}

/// Mean squared reconstruction error over batch and feature dimensions.
pub fn reconstruction_loss(g: &mut Graph, x: NodeId, x_recon: NodeId) -> Result<NodeId> {
    let diff = g.sub(x_recon, x)?;
    let sq = g.square(diff)?;
    g.mean_all(sq)
}

/// Sum of the six pairwise dot products between the four weight-contribution
/// vectors: (gamma,delta), (delta,upsilon), (upsilon,gamma) and omega against
/// each of the other three.
pub fn orthogonality_loss(g: &mut Graph, wbars: [NodeId; 4]) -> Result<NodeId> {
    let [wg, wd, wu, wo] = wbars;
    let k = g.value(wg).rows();
    for &id in &[wd, wu, wo] {
        if g.value(id).rows() != k || g.value(id).cols() != 1 {
            return Err(Error::LengthMismatch {
                context: "orthogonality_loss",
                left: k,
                right: g.value(id).rows(),
            });
        }
    }
    let pairs = [(wg, wd), (wd, wu), (wu, wg), (wo, wg), (wo, wd), (wo, wu)];
    let mut acc = None;
    for (a, b) in pairs {
        let d = g.dot(a, b)?;
        acc = Some(match acc {
            None => d,
            Some(prev) => g.add(prev, d)?,
        });
    }
    Ok(acc.expect("six pairs"))
}

/// L2 penalty over the weights (biases excluded) of the two outcome heads,
/// the treatment classifier, and the decoder — the four functions named in
/// the objective. Encoder parameters are not penalized here.
pub fn parameter_regularization(g: &mut Graph, binding: &TapeBinding) -> Result<NodeId> {
    let mut acc = g.scalar_const(0.0)?;
    for id in binding.head_weight_ids() {
        let sq = g.dot(id, id)?;
        acc = g.add(acc, sq)?;
    }
    Ok(acc)
}

/// The six scalar loss nodes combined by [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub regression: NodeId,
    pub classification: NodeId,
    pub discrepancy: NodeId,
    pub reconstruction: NodeId,
    pub orthogonality: NodeId,
    pub parameter_reg: NodeId,
}

pub fn total_loss(g: &mut Graph, parts: &LossParts, weights: &LossWeights) -> Result<NodeId> {
    weights.validate()?;
    let mut acc = parts.regression;
    for (w, id) in [
        (weights.alpha, parts.classification),
        (weights.beta, parts.discrepancy),
        (weights.gamma, parts.reconstruction),
        (weights.lambda, parts.orthogonality),
        (weights.mu, parts.parameter_reg),
    ] {
        let scaled = g.scale(id, w)?;
        acc = g.add(acc, scaled)?;
    }
    Ok(acc)
}
