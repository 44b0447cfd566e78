//! Metrics and identification analyses: PEHE, policy risk, permutation
//! feature importance, and weight-contribution group means.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{Dataset, FeatureRole};
use crate::error::{Error, Result};
use crate::networks::{FactorNetworks, WeightContribution};
use crate::tensor::Tensor;
use crate::trainer::Predictor;

/// Root mean squared error between predicted and true individual effects.
pub fn pehe(e_hat: &[f64], e_true: &[f64]) -> Result<f64> {
    if e_hat.is_empty() {
        return Err(Error::EmptyBatch("pehe"));
    }
    if e_hat.len() != e_true.len() {
        return Err(Error::LengthMismatch {
            context: "pehe",
            left: e_hat.len(),
            right: e_true.len(),
        });
    }
    let mse = e_hat
        .iter()
        .zip(e_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / e_hat.len() as f64;
    Ok(mse.sqrt())
}

/// Policy evaluation settings: treat when the predicted effect exceeds the
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub threshold: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { threshold: 0.0 }
    }
}

/// Factual-agreement policy risk. A term whose policy share is positive but
/// has no factual support contributes zero and drops its `*_supported` flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyRisk {
    pub value: f64,
    pub treated_term_supported: bool,
    pub control_term_supported: bool,
}

/// Average value lost when treating according to the model-induced policy:
/// `1 - (E[Y1 | pi=1] p(pi=1) + E[Y0 | pi=0] p(pi=0))`, with each
/// conditional mean estimated from units whose observed treatment agrees
/// with the policy.
pub fn policy_risk(
    t: &[u8],
    y: &[f64],
    predicted_effect: &[f64],
    cfg: &PolicyConfig,
) -> Result<PolicyRisk> {
    let n = t.len();
    if n == 0 {
        return Err(Error::EmptyBatch("policy_risk"));
    }
    if y.len() != n || predicted_effect.len() != n {
        return Err(Error::LengthMismatch {
            context: "policy_risk",
            left: y.len().min(predicted_effect.len()),
            right: n,
        });
    }
    if !cfg.threshold.is_finite() {
        return Err(Error::InvalidConfig("policy threshold must be finite".into()));
    }

    let policy: Vec<bool> = predicted_effect.iter().map(|&e| e > cfg.threshold).collect();
    let n_treat_policy = policy.iter().filter(|&&p| p).count();
    let p_treat = n_treat_policy as f64 / n as f64;
    let p_control = 1.0 - p_treat;

    let mut value = 0.0;
    let mut treated_supported = true;
    let mut control_supported = true;

    if n_treat_policy > 0 {
        let support: Vec<f64> = (0..n)
            .filter(|&i| policy[i] && t[i] == 1)
            .map(|i| y[i])
            .collect();
        if support.is_empty() {
            treated_supported = false;
        } else {
            value += support.iter().sum::<f64>() / support.len() as f64 * p_treat;
        }
    }
    if n_treat_policy < n {
        let support: Vec<f64> = (0..n)
            .filter(|&i| !policy[i] && t[i] == 0)
            .map(|i| y[i])
            .collect();
        if support.is_empty() {
            control_supported = false;
        } else {
            value += support.iter().sum::<f64>() / support.len() as f64 * p_control;
        }
    }

    Ok(PolicyRisk {
        value: 1.0 - value,
        treated_term_supported: treated_supported,
        control_term_supported: control_supported,
    })
}

// ---- permutation feature importance ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMetric {
    /// Treatment-classification cross-entropy.
    Bce,
    /// Factual-outcome mean squared error.
    Mse,
    /// Effect RMSE against the noiseless truth (needs mu0/mu1).
    Pehe,
}

fn bce_metric(probs: &[f64], t: &[u8]) -> f64 {
    let eps = crate::losses::CLAMP_EPS;
    let mut acc = 0.0;
    for (&p, &ti) in probs.iter().zip(t) {
        let p = p.clamp(eps, 1.0 - eps);
        acc -= if ti == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    acc / probs.len() as f64
}

fn metric_value(predictor: &Predictor, x: &Tensor, data: &Dataset, metric: ImportanceMetric) -> Result<f64> {
    match metric {
        ImportanceMetric::Bce => Ok(bce_metric(&predictor.predict_treatment(x)?, &data.t)),
        ImportanceMetric::Mse => {
            let pred = predictor.predict_factual(x, &data.t)?;
            let mse = pred
                .iter()
                .zip(&data.y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / pred.len() as f64;
            Ok(mse)
        }
        ImportanceMetric::Pehe => {
            let truth = data.true_effects().ok_or_else(|| {
                Error::InvalidConfig(
                    "pehe importance requires noiseless potential outcomes (mu0/mu1)".into(),
                )
            })?;
            let predicted = predictor.predict_ite(x)?.effect;
            pehe(&predicted, &truth)
        }
    }
}

fn with_permuted_column(x: &Tensor, column: usize, perm: &[usize]) -> Tensor {
    let mut out = x.clone();
    for (i, &src) in perm.iter().enumerate() {
        out.set(i, column, x.get(src, column));
    }
    out
}

/// Metric increase when one column is replaced by a fixed permutation of
/// itself. The identity permutation yields exactly zero.
pub fn importance_with_permutation(
    predictor: &Predictor,
    data: &Dataset,
    column: usize,
    perm: &[usize],
    metric: ImportanceMetric,
) -> Result<f64> {
    let baseline = metric_value(predictor, &data.x, data, metric)?;
    let permuted = with_permuted_column(&data.x, column, perm);
    Ok(metric_value(predictor, &permuted, data, metric)? - baseline)
}

/// Mean metric increase per feature over `repeats` random row permutations.
/// Covariates must be in the model's (standardized) space.
pub fn permutation_importance(
    predictor: &Predictor,
    data: &Dataset,
    metric: ImportanceMetric,
    repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("importance repeats must be >= 1".into()));
    }
    let baseline = metric_value(predictor, &data.x, data, metric)?;
    let n = data.n();
    let mut importances = Vec::with_capacity(data.k());
    for column in 0..data.k() {
        let mut acc = 0.0;
        for repeat in 0..repeats {
            let stream = (column as u64) << 20 | repeat as u64;
            let mut rng =
                ChaCha8Rng::seed_from_u64(crate::trainer::derive_seed(seed, 0xFEA7 ^ stream));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted = with_permuted_column(&data.x, column, &perm);
            acc += metric_value(predictor, &permuted, data, metric)? - baseline;
        }
        importances.push(acc / repeats as f64);
    }
    Ok(importances)
}

// ---- identification ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    /// Mean weight contribution over the features this encoder should read.
    pub in_group: f64,
    /// Mean over all other features.
    pub out_group: f64,
}

/// Per-encoder in-group vs out-group weight-contribution means. High
/// in-group and low out-group means indicate the encoder identified its
/// latent factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub gamma: GroupMeans,
    pub delta: GroupMeans,
    pub upsilon: GroupMeans,
    pub omega: GroupMeans,
}

impl IdentificationReport {
    pub fn encoders(&self) -> [(&'static str, GroupMeans); 4] {
        [
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("upsilon", self.upsilon),
            ("omega", self.omega),
        ]
    }
}

fn group_means(wbar: &[f64], roles: &[FeatureRole], target: FeatureRole) -> GroupMeans {
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
    for (v, role) in wbar.iter().zip(roles) {
        if *role == target {
            in_sum += v;
            in_n += 1;
        } else {
            out_sum += v;
            out_n += 1;
        }
    }
    GroupMeans {
        in_group: if in_n == 0 { 0.0 } else { in_sum / in_n as f64 },
        out_group: if out_n == 0 { 0.0 } else { out_sum / out_n as f64 },
    }
}

/// Partition each encoder's weight-contribution vector by whether a feature
/// belongs to that encoder's factor. Requires known roles.
pub fn identification_report(
    nets: &FactorNetworks,
    roles: &[FeatureRole],
) -> Result<IdentificationReport> {
    if let Some(idx) = roles.iter().position(|r| *r == FeatureRole::Unknown) {
        return Err(Error::UnknownRole(idx));
    }
    if roles.len() != nets.covariate_dim() {
        return Err(Error::LengthMismatch {
            context: "identification_report",
            left: roles.len(),
            right: nets.covariate_dim(),
        });
    }
    let wc = nets.weight_contribution();
    Ok(IdentificationReport {
        gamma: group_means(&wc.gamma, roles, FeatureRole::Gamma),
        delta: group_means(&wc.delta, roles, FeatureRole::Delta),
        upsilon: group_means(&wc.upsilon, roles, FeatureRole::Upsilon),
        omega: group_means(&wc.omega, roles, FeatureRole::Omega),
    })
}

// ---- report assembly ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
}

/// Everything one trained model's evaluation produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// RMSE of predicted vs true effects, when the dataset carries truth.
    pub pehe: Option<f64>,
    pub policy_risk: Option<PolicyRisk>,
    pub importance_bce: Vec<f64>,
    pub importance_mse: Vec<f64>,
    pub importance_pehe: Option<Vec<f64>>,
    pub wbar: WeightContribution,
    pub group_means: Option<IdentificationReport>,
    pub meta: ReportMeta,
}

fn role_name(role: FeatureRole) -> &'static str {
    match role {
        FeatureRole::Gamma => "gamma",
        FeatureRole::Delta => "delta",
        FeatureRole::Upsilon => "upsilon",
        FeatureRole::Omega => "omega",
        FeatureRole::Unknown => "unknown",
    }
}

/// Tidy per-feature CSV: `feature_index,role,metric,value` covering the
/// importance vectors and the four weight-contribution vectors.
pub fn write_tidy_csv(report: &EvaluationReport, roles: &[FeatureRole], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "feature_index,role,metric,value")?;
    let mut write_vec = |metric: &str, values: &[f64]| -> Result<()> {
        for (j, v) in values.iter().enumerate() {
            let role = roles.get(j).copied().unwrap_or(FeatureRole::Unknown);
            writeln!(out, "{j},{},{metric},{v}", role_name(role))?;
        }
        Ok(())
    };
    write_vec("importance_bce", &report.importance_bce)?;
    write_vec("importance_mse", &report.importance_mse)?;
    if let Some(imp) = &report.importance_pehe {
        write_vec("importance_pehe", imp)?;
    }
    write_vec("wbar_gamma", &report.wbar.gamma)?;
    write_vec("wbar_delta", &report.wbar.delta)?;
    write_vec("wbar_upsilon", &report.wbar.upsilon)?;
    write_vec("wbar_omega", &report.wbar.omega)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OutcomeScaler;
    use crate::networks::NetworkShape;
    use rand::Rng;

    // ---- pehe ----

    #[test]
    fn pehe_examples() {
        assert_eq!(pehe(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        assert_eq!(pehe(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        let v = pehe(&[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((v - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pehe_invariant_under_common_permutation() {
        let e_hat = [0.5, -1.0, 2.0, 0.1];
        let e_true = [0.4, -0.8, 1.5, 0.0];
        let base = pehe(&e_hat, &e_true).unwrap();
        let perm = [2usize, 0, 3, 1];
        let ph: Vec<f64> = perm.iter().map(|&i| e_hat[i]).collect();
        let pt: Vec<f64> = perm.iter().map(|&i| e_true[i]).collect();
        assert!((pehe(&ph, &pt).unwrap() - base).abs() < 1e-15);
    }

    #[test]
    fn pehe_rejects_empty_and_mismatched() {
        assert!(matches!(pehe(&[], &[]), Err(Error::EmptyBatch(_))));
        assert!(matches!(
            pehe(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    // ---- policy risk ----

    #[test]
    fn policy_risk_all_treated_unit_value() {
        let t = [1, 1, 1];
        let y = [1.0, 1.0, 1.0];
        let e = [0.5, 0.2, 0.9];
        let r = policy_risk(&t, &y, &e, &PolicyConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.treated_term_supported && r.control_term_supported);
    }

    #[test]
    fn policy_risk_treat_everyone_mean_point_six() {
        let t = [1, 1, 0, 1];
        let y = [0.5, 0.7, 9.0, 0.6];
        let e = [1.0, 1.0, 1.0, 1.0];
        let r = policy_risk(&t, &y, &e, &PolicyConfig::default()).unwrap();
        assert!((r.value - 0.4).abs() < 1e-12);
    }

    #[test]
    fn policy_risk_eight_unit_enumeration() {
        // Hand-enumerated: policy treats {0,2,4,6,7}; E[Y1|pi=1] over units
        // {0,4,6} is 2/3; E[Y0|pi=0] over units {3,5} is 0.15.
        let t = [1, 1, 0, 0, 1, 0, 1, 0];
        let y = [1.0, 0.8, 0.3, 0.2, 0.6, 0.1, 0.4, 0.9];
        let e = [0.5, -0.2, 0.7, -0.1, 0.9, -0.3, 0.1, 0.05];
        let r = policy_risk(&t, &y, &e, &PolicyConfig::default()).unwrap();
        let expected = 1.0 - ((2.0 / 3.0) * (5.0 / 8.0) + 0.15 * (3.0 / 8.0));
        assert!((r.value - expected).abs() < 1e-12);
        assert!(r.treated_term_supported && r.control_term_supported);
    }

    #[test]
    fn policy_risk_disagreeing_unit_moves_only_shares() {
        // Four units with full support.
        let t = [1, 0, 1, 0];
        let y = [0.9, 0.4, 0.7, 0.6];
        let e = [1.0, -1.0, 1.0, -1.0];
        let base = policy_risk(&t, &y, &e, &PolicyConfig::default()).unwrap();
        let e_y1 = (0.9 + 0.7) / 2.0;
        let e_y0 = (0.4 + 0.6) / 2.0;
        assert!((base.value - (1.0 - (e_y1 * 0.5 + e_y0 * 0.5))).abs() < 1e-12);

        // Add a unit with t=1 but pi=0: both conditional means stay fixed,
        // only the policy shares move to 2/5 and 3/5.
        let t2 = [1, 0, 1, 0, 1];
        let y2 = [0.9, 0.4, 0.7, 0.6, 123.0];
        let e2 = [1.0, -1.0, 1.0, -1.0, -5.0];
        let with_extra = policy_risk(&t2, &y2, &e2, &PolicyConfig::default()).unwrap();
        assert!((with_extra.value - (1.0 - (e_y1 * 0.4 + e_y0 * 0.6))).abs() < 1e-12);
    }

    #[test]
    fn policy_risk_unsupported_term_flagged() {
        // Policy wants to treat unit 0, but no treated unit agrees.
        let t = [0, 0];
        let y = [0.5, 0.5];
        let e = [1.0, -1.0];
        let r = policy_risk(&t, &y, &e, &PolicyConfig::default()).unwrap();
        assert!(!r.treated_term_supported);
        assert!(r.control_term_supported);
        // Only the control term contributes: 1 - 0.5 * 0.5.
        assert!((r.value - 0.75).abs() < 1e-12);
    }

    #[test]
    fn policy_risk_threshold_shifts_policy() {
        let t = [1, 0];
        let y = [1.0, 0.0];
        let e = [0.4, 0.2];
        let low = policy_risk(&t, &y, &e, &PolicyConfig { threshold: 0.0 }).unwrap();
        let high = policy_risk(&t, &y, &e, &PolicyConfig { threshold: 0.5 }).unwrap();
        assert!(low.value < high.value);
    }

    // ---- permutation importance ----

    fn predictor_with_seed(k: usize, seed: u64) -> Predictor {
        let nets = FactorNetworks::init(
            &NetworkShape {
                covariate_dim: k,
                latent_dim: 3,
                encoder_layers: 2,
                head_hidden: 6,
                head_layers: 2,
            },
            seed,
        )
        .unwrap();
        Predictor {
            nets,
            y_scaler: OutcomeScaler {
                mean: 0.0,
                std: 1.0,
            },
        }
    }

    fn importance_dataset(k: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(n, k, |_, _| rng.gen_range(-1.5..1.5));
        let t: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mu0: Vec<f64> = (0..n).map(|i| 0.1 * i as f64).collect();
        let mu1: Vec<f64> = mu0.iter().map(|v| v + 1.0).collect();
        Dataset {
            x,
            t,
            y,
            y_cf: None,
            mu0: Some(mu0),
            mu1: Some(mu1),
            roles: vec![FeatureRole::Unknown; k],
        }
    }

    #[test]
    fn identity_permutation_importance_is_exactly_zero() {
        let data = importance_dataset(4, 20, 3);
        let predictor = predictor_with_seed(4, 1);
        let identity: Vec<usize> = (0..data.n()).collect();
        for metric in [
            ImportanceMetric::Bce,
            ImportanceMetric::Mse,
            ImportanceMetric::Pehe,
        ] {
            let v =
                importance_with_permutation(&predictor, &data, 2, &identity, metric).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn unread_column_has_zero_importance_for_all_metrics() {
        let k = 5;
        let dead = 3;
        let data = importance_dataset(k, 24, 9);
        let mut predictor = predictor_with_seed(k, 2);
        for enc in [
            &mut predictor.nets.encoder_gamma,
            &mut predictor.nets.encoder_delta,
            &mut predictor.nets.encoder_upsilon,
            &mut predictor.nets.encoder_omega,
        ] {
            let w = &mut enc.layers[0].weight;
            for j in 0..w.cols() {
                w.set(dead, j, 0.0);
            }
        }
        for metric in [
            ImportanceMetric::Bce,
            ImportanceMetric::Mse,
            ImportanceMetric::Pehe,
        ] {
            let imp = permutation_importance(&predictor, &data, metric, 3, 7).unwrap();
            assert_eq!(imp[dead], 0.0, "metric {metric:?}");
            assert_eq!(imp.len(), k);
        }
    }

    #[test]
    fn outcome_disconnected_column_has_zero_pehe_importance() {
        // Column read by the treatment path (gamma) but zeroed in both
        // outcome-path encoders: effect predictions cannot depend on it.
        let k = 4;
        let col = 1;
        let data = importance_dataset(k, 30, 5);
        let mut predictor = predictor_with_seed(k, 3);
        for enc in [
            &mut predictor.nets.encoder_delta,
            &mut predictor.nets.encoder_upsilon,
        ] {
            let w = &mut enc.layers[0].weight;
            for j in 0..w.cols() {
                w.set(col, j, 0.0);
            }
        }
        let imp_pehe =
            permutation_importance(&predictor, &data, ImportanceMetric::Pehe, 4, 11).unwrap();
        assert_eq!(imp_pehe[col], 0.0);
        // The BCE path still reads it through the gamma encoder.
        let imp_bce =
            permutation_importance(&predictor, &data, ImportanceMetric::Bce, 4, 11).unwrap();
        assert!(imp_bce[col].abs() > 0.0);
    }

    #[test]
    fn pehe_importance_requires_truth() {
        let mut data = importance_dataset(3, 10, 1);
        data.mu0 = None;
        data.mu1 = None;
        let predictor = predictor_with_seed(3, 1);
        assert!(
            permutation_importance(&predictor, &data, ImportanceMetric::Pehe, 2, 0).is_err()
        );
    }

    #[test]
    fn importance_deterministic_per_seed() {
        let data = importance_dataset(4, 25, 2);
        let predictor = predictor_with_seed(4, 5);
        let a = permutation_importance(&predictor, &data, ImportanceMetric::Mse, 3, 123).unwrap();
        let b = permutation_importance(&predictor, &data, ImportanceMetric::Mse, 3, 123).unwrap();
        assert_eq!(a, b);
    }

    // ---- identification ----

    fn roles_8_8_8(omega: usize) -> Vec<FeatureRole> {
        let mut roles = Vec::new();
        roles.extend(std::iter::repeat(FeatureRole::Gamma).take(8));
        roles.extend(std::iter::repeat(FeatureRole::Delta).take(8));
        roles.extend(std::iter::repeat(FeatureRole::Upsilon).take(8));
        roles.extend(std::iter::repeat(FeatureRole::Omega).take(omega));
        roles
    }

    #[test]
    fn encoder_reading_only_own_columns_has_zero_out_group() {
        let roles = roles_8_8_8(4);
        let k = roles.len();
        let mut nets = FactorNetworks::init(
            &NetworkShape {
                covariate_dim: k,
                latent_dim: 3,
                encoder_layers: 2,
                head_hidden: 4,
                head_layers: 2,
            },
            1,
        )
        .unwrap();
        // Zero every first-layer row of the gamma encoder except its own
        // features (columns 0..8).
        let w = &mut nets.encoder_gamma.layers[0].weight;
        for row in 8..k {
            for col in 0..w.cols() {
                w.set(row, col, 0.0);
            }
        }
        let report = identification_report(&nets, &roles).unwrap();
        assert_eq!(report.gamma.out_group, 0.0);
        assert!(report.gamma.in_group > 0.0);
    }

    #[test]
    fn random_initialization_has_balanced_group_means() {
        // Monte-Carlo: untrained encoders show no preference for their own
        // features; the in/out ratio stays within [0.5, 2].
        let roles = roles_8_8_8(8);
        let k = roles.len();
        let mut within = 0;
        let total = 100;
        for seed in 0..total {
            let nets = FactorNetworks::init(
                &NetworkShape {
                    covariate_dim: k,
                    latent_dim: 3,
                    encoder_layers: 3,
                    head_hidden: 4,
                    head_layers: 2,
                },
                seed,
            )
            .unwrap();
            let report = identification_report(&nets, &roles).unwrap();
            let ok = report.encoders().iter().all(|(_, gm)| {
                let ratio = gm.in_group / gm.out_group;
                (0.5..=2.0).contains(&ratio)
            });
            if ok {
                within += 1;
            }
        }
        assert!(
            within >= 95,
            "only {within}/{total} random initializations balanced"
        );
    }

    #[test]
    fn unknown_roles_rejected() {
        let mut roles = roles_8_8_8(4);
        roles[5] = FeatureRole::Unknown;
        let nets = FactorNetworks::init(
            &NetworkShape {
                covariate_dim: roles.len(),
                latent_dim: 2,
                encoder_layers: 2,
                head_hidden: 4,
                head_layers: 2,
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            identification_report(&nets, &roles),
            Err(Error::UnknownRole(5))
        ));
    }

    #[test]
    fn identification_deterministic_in_parameters() {
        let roles = roles_8_8_8(4);
        let nets = FactorNetworks::init(
            &NetworkShape {
                covariate_dim: roles.len(),
                latent_dim: 3,
                encoder_layers: 2,
                head_hidden: 4,
                head_layers: 2,
            },
            9,
        )
        .unwrap();
        let a = identification_report(&nets, &roles).unwrap();
        let b = identification_report(&nets, &roles).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tidy_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tidy.csv");
        let report = EvaluationReport {
            pehe: Some(0.5),
            policy_risk: None,
            importance_bce: vec![0.1, 0.2],
            importance_mse: vec![0.3, 0.4],
            importance_pehe: Some(vec![0.5, 0.6]),
            wbar: WeightContribution {
                gamma: vec![1.0, 2.0],
                delta: vec![3.0, 4.0],
                upsilon: vec![5.0, 6.0],
                omega: vec![7.0, 8.0],
            },
            group_means: None,
            meta: ReportMeta {
                seed: 1,
                config_hash: "abc".into(),
            },
        };
        let roles = vec![FeatureRole::Gamma, FeatureRole::Omega];
        write_tidy_csv(&report, &roles, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "feature_index,role,metric,value");
        // 7 metrics x 2 features.
        assert_eq!(lines.len(), 1 + 14);
        assert!(lines.contains(&"0,gamma,importance_bce,0.1"));
        assert!(lines.contains(&"1,omega,wbar_omega,8"));
    }
}
