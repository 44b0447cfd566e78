//! Minibatch training of the factor networks.
//!
//! Each epoch shuffles the training split with an epoch-derived RNG stream,
//! builds one tape per minibatch covering all objective terms, and applies
//! Adam. Every `eval_every` epochs the nearest-neighbor PEHE surrogate on a
//! held-out validation split decides whether to checkpoint; the best
//! checkpoint is returned.
//!
//! Covariates are expected standardized before training (training-split
//! statistics, handled by the experiment pipeline). Outcomes are z-scored
//! internally on the training portion and un-scaled for every reported
//! prediction and metric.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{split_fractions, Dataset, OutcomeScaler, Standardizer};
use crate::error::{Error, Result};
use crate::evaluation::pehe;
use crate::graph::Graph;
use crate::losses::{
    classification_loss, discrepancy_or_zero, orthogonality_loss, parameter_regularization,
    reconstruction_loss, regression_loss, standardize_columns, total_loss, LossParts, LossWeights,
    SinkhornConfig,
};
use crate::networks::{
    bind_params, forward_all, wbar_node, EncoderKind, FactorNetworks, NetworkShape, NetworksJson,
    TapeBinding,
};
use crate::tensor::Tensor;

/// Network dimensions that do not depend on the dataset; the covariate
/// dimension is read off the data at training time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub head_hidden: usize,
    pub head_layers: usize,
}

impl ModelConfig {
    pub fn shape_for(&self, covariate_dim: usize) -> NetworkShape {
        NetworkShape {
            covariate_dim,
            latent_dim: self.latent_dim,
            encoder_layers: self.encoder_layers,
            head_hidden: self.head_hidden,
            head_layers: self.head_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Validation evaluation (and checkpointing) cadence in epochs.
    pub eval_every: usize,
    pub seed: u64,
    pub sinkhorn: SinkhornConfig,
    /// Fraction of the training data held out for model selection.
    pub validation_fraction: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.sinkhorn.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "validation_fraction must be inside (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

// Deterministic sub-streams of the master seed.
const STREAM_INIT: u64 = 1;
const STREAM_VAL_SPLIT: u64 = 2;
const STREAM_EPOCH_BASE: u64 = 0x1000;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// ---- Adam ----

/// Adam moment estimates, one pair per parameter tensor in canonical order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    #[cfg(test)]
    fn second_moment(&self, idx: usize) -> &Tensor {
        &self.v[idx]
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for idx in 0..grad.len() {
            let g = grad.data()[idx];
            let mi = state.beta1 * m.data()[idx] + (1.0 - state.beta1) * g;
            let vi = state.beta2 * v.data()[idx] + (1.0 - state.beta2) * g * g;
            m.data_mut()[idx] = mi;
            v.data_mut()[idx] = vi;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            param.data_mut()[idx] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}

// ---- prediction ----

/// Trained networks plus the outcome scaler needed to report predictions on
/// the original outcome scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub nets: FactorNetworks,
    pub y_scaler: OutcomeScaler,
}

/// Per-unit potential-outcome and effect predictions, un-standardized.
#[derive(Debug, Clone)]
pub struct ItePredictions {
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub effect: Vec<f64>,
}

impl Predictor {
    fn outcome_inputs(&self, x: &Tensor) -> Tensor {
        let delta = self.nets.encoder_delta.forward_plain(x);
        let upsilon = self.nets.encoder_upsilon.forward_plain(x);
        concat_cols(&[&delta, &upsilon])
    }

    pub fn predict_ite(&self, x: &Tensor) -> Result<ItePredictions> {
        if x.cols() != self.nets.covariate_dim() {
            return Err(Error::SchemaMismatch(format!(
                "covariates have {} columns, model expects {}",
                x.cols(),
                self.nets.covariate_dim()
            )));
        }
        let inputs = self.outcome_inputs(x);
        let z1 = self.nets.head_y1.forward_plain(&inputs);
        let z0 = self.nets.head_y0.forward_plain(&inputs);
        let y1: Vec<f64> = z1.data().iter().map(|&z| self.y_scaler.unscale(z)).collect();
        let y0: Vec<f64> = z0.data().iter().map(|&z| self.y_scaler.unscale(z)).collect();
        let effect = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
        Ok(ItePredictions { y1, y0, effect })
    }

    /// Factual outcome prediction per unit, on the original scale.
    pub fn predict_factual(&self, x: &Tensor, t: &[u8]) -> Result<Vec<f64>> {
        let preds = self.predict_ite(x)?;
        Ok(t.iter()
            .enumerate()
            .map(|(i, &ti)| if ti == 1 { preds.y1[i] } else { preds.y0[i] })
            .collect())
    }

    /// Treatment probability per unit.
    pub fn predict_treatment(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.nets.covariate_dim() {
            return Err(Error::SchemaMismatch(format!(
                "covariates have {} columns, model expects {}",
                x.cols(),
                self.nets.covariate_dim()
            )));
        }
        let gamma = self.nets.encoder_gamma.forward_plain(x);
        let delta = self.nets.encoder_delta.forward_plain(x);
        let inputs = concat_cols(&[&gamma, &delta]);
        Ok(self.nets.head_treat.forward_plain(&inputs).into_data())
    }
}

fn concat_cols(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let cols = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        let mut offset = 0;
        for p in parts {
            out.row_mut(i)[offset..offset + p.cols()].copy_from_slice(p.row(i));
            offset += p.cols();
        }
    }
    out
}

// ---- nearest-neighbor PEHE surrogate ----

/// Surrogate effects for a split without counterfactual truth: each unit's
/// counterfactual outcome is approximated by the factual outcome of its
/// nearest opposite-group neighbor (Euclidean distance in the standardized
/// covariates; ties break toward the lowest index).
pub fn nn_surrogate_effects(data: &Dataset) -> Result<Vec<f64>> {
    if !data.has_both_groups() {
        let group = if data.treated_count() == 0 { 0 } else { 1 };
        return Err(Error::SingleTreatmentGroup {
            context: "nn_surrogate_effects",
            group,
        });
    }
    let n = data.n();
    let mut by_group = [Vec::new(), Vec::new()];
    for i in 0..n {
        by_group[data.t[i] as usize].push(i);
    }
    let mut effects = Vec::with_capacity(n);
    for i in 0..n {
        let opposite = &by_group[1 - data.t[i] as usize];
        let mut best = opposite[0];
        let mut best_d = f64::INFINITY;
        for &j in opposite {
            let mut d = 0.0;
            for (a, b) in data.x.row(i).iter().zip(data.x.row(j)) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        let e = if data.t[i] == 1 {
            data.y[i] - data.y[best]
        } else {
            data.y[best] - data.y[i]
        };
        effects.push(e);
    }
    Ok(effects)
}

/// Nearest-neighbor PEHE of a model on a validation split.
pub fn pehe_nn(predictor: &Predictor, validation: &Dataset) -> Result<f64> {
    let surrogate = nn_surrogate_effects(validation)?;
    let predicted = predictor.predict_ite(&validation.x)?.effect;
    pehe(&predicted, &surrogate)
}

// ---- training ----

/// Unweighted loss components of one epoch (batch means) plus the weighted
/// total; validation score present on evaluation epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l_reg: f64,
    pub l_class: f64,
    pub l_disc: f64,
    pub l_recons: f64,
    pub l_orth: f64,
    pub reg_term: f64,
    pub total: f64,
    pub pehe_nn: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub predictor: Predictor,
    pub history: Vec<HistoryRow>,
    /// Best validation nearest-neighbor PEHE seen; equals the minimum over
    /// the history.
    pub selection_score: f64,
    pub best_epoch: usize,
}

struct StepOutcome {
    grads: Vec<Tensor>,
    comps: [f64; 7],
}

fn train_step(
    nets: &FactorNetworks,
    cfg: &TrainConfig,
    x: Tensor,
    t: &[u8],
    y_scaled: &[f64],
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let binding: TapeBinding = bind_params(&mut g, nets)?;
    let x_id = g.input(x)?;
    let outs = forward_all(&mut g, nets, &binding, x_id)?;

    let t_vals: Vec<f64> = t.iter().map(|&v| f64::from(v)).collect();
    let t_mask = g.constant(Tensor::column(&t_vals))?;
    let y_id = g.constant(Tensor::column(y_scaled))?;

    let l_reg = regression_loss(&mut g, y_id, t_mask, outs.y0_hat, outs.y1_hat)?;
    let l_class = classification_loss(&mut g, t_mask, outs.t_hat)?;
    let l_disc = if cfg.weights.beta > 0.0 {
        let standardized = standardize_columns(&mut g, outs.upsilon)?;
        discrepancy_or_zero(&mut g, standardized, t, &cfg.sinkhorn)?
    } else {
        g.scalar_const(0.0)?
    };
    let l_recons = reconstruction_loss(&mut g, x_id, outs.x_recon)?;
    let wbars = [
        wbar_node(&mut g, &binding, EncoderKind::Gamma)?,
        wbar_node(&mut g, &binding, EncoderKind::Delta)?,
        wbar_node(&mut g, &binding, EncoderKind::Upsilon)?,
        wbar_node(&mut g, &binding, EncoderKind::Omega)?,
    ];
    let l_orth = orthogonality_loss(&mut g, [wbars[0], wbars[1], wbars[2], wbars[3]])?;
    let reg_term = parameter_regularization(&mut g, &binding)?;

    let parts = LossParts {
        regression: l_reg,
        classification: l_class,
        discrepancy: l_disc,
        reconstruction: l_recons,
        orthogonality: l_orth,
        parameter_reg: reg_term,
    };
    let total = total_loss(&mut g, &parts, &cfg.weights)?;
    g.backward(total)?;

    Ok(StepOutcome {
        grads: binding.collect_grads(&g),
        comps: [
            g.scalar_value(l_reg),
            g.scalar_value(l_class),
            g.scalar_value(l_disc),
            g.scalar_value(l_recons),
            g.scalar_value(l_orth),
            g.scalar_value(reg_term),
            g.scalar_value(total),
        ],
    })
}

/// Run the full training loop and return the best checkpoint.
///
/// `data` is the training data (covariates already standardized); a
/// stratified `validation_fraction` share is carved out internally for
/// model selection and never trained on.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    data.validate()?;
    if !data.has_both_groups() {
        let group = if data.treated_count() == 0 { 0 } else { 1 };
        return Err(Error::SingleTreatmentGroup {
            context: "train",
            group,
        });
    }

    let parts = split_fractions(
        data,
        &[1.0 - cfg.validation_fraction, cfg.validation_fraction],
        derive_seed(cfg.seed, STREAM_VAL_SPLIT),
        true,
    )?;
    let train_split = &parts[0];
    let val_split = &parts[1];

    let y_scaler = OutcomeScaler::fit(&train_split.y);
    let y_scaled: Vec<f64> = train_split.y.iter().map(|&v| y_scaler.scale(v)).collect();

    // Neighbor structure depends only on covariates; compute once.
    let val_surrogate = nn_surrogate_effects(val_split)?;

    let mut nets = FactorNetworks::init(
        &cfg.model.shape_for(data.k()),
        derive_seed(cfg.seed, STREAM_INIT),
    )?;
    let mut adam = AdamState::new(
        &nets.param_tensors(),
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );

    let n_train = train_split.n();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best_score = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_nets = nets.clone();

    for epoch in 1..=cfg.max_epochs {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut epoch_rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            STREAM_EPOCH_BASE + epoch as u64,
        ));
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut epoch_rng);

        let mut sums = [0.0; 7];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_split.x.select_rows(chunk);
            let t: Vec<u8> = chunk.iter().map(|&i| train_split.t[i]).collect();
            let yb: Vec<f64> = chunk.iter().map(|&i| y_scaled[i]).collect();
            let step = train_step(&nets, cfg, x, &t, &yb).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch },
                other => other,
            })?;
            if !step.comps[6].is_finite() {
                return Err(Error::Divergence { epoch });
            }
            {
                let mut params = nets.param_tensors_mut();
                adam_step(&mut params, &step.grads, &mut adam, cfg.learning_rate);
            }
            for (s, c) in sums.iter_mut().zip(step.comps) {
                *s += c;
            }
            batches += 1;
        }
        let mean = |i: usize| sums[i] / batches as f64;

        let score = if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let predicted = Predictor {
                nets: nets.clone(),
                y_scaler,
            }
            .predict_ite(&val_split.x)?
            .effect;
            let s = pehe(&predicted, &val_surrogate)?;
            if s < best_score {
                best_score = s;
                best_epoch = epoch;
                best_nets = nets.clone();
            }
            Some(s)
        } else {
            None
        };

        history.push(HistoryRow {
            epoch,
            l_reg: mean(0),
            l_class: mean(1),
            l_disc: mean(2),
            l_recons: mean(3),
            l_orth: mean(4),
            reg_term: mean(5),
            total: mean(6),
            pehe_nn: score,
        });
    }

    Ok(TrainedModel {
        predictor: Predictor {
            nets: best_nets,
            y_scaler,
        },
        history,
        selection_score: best_score,
        best_epoch,
    })
}

// ---- checkpoint and history files ----

/// On-disk checkpoint: parameters in the networks document format plus the
/// config echo and the scalers needed to reproduce predictions exactly.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub networks: NetworksJson,
    pub config: TrainConfig,
    pub covariate_standardizer: Standardizer,
    pub y_scaler: OutcomeScaler,
    pub selection_score: f64,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn new(model: &TrainedModel, cfg: &TrainConfig, standardizer: &Standardizer) -> Self {
        Checkpoint {
            networks: model.predictor.nets.to_json(),
            config: cfg.clone(),
            covariate_standardizer: standardizer.clone(),
            y_scaler: model.predictor.y_scaler,
            selection_score: model.selection_score,
            best_epoch: model.best_epoch,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn predictor(&self) -> Result<Predictor> {
        Ok(Predictor {
            nets: FactorNetworks::from_json(&self.networks)?,
            y_scaler: self.y_scaler,
        })
    }
}

/// History CSV: epoch, loss components, weighted total, validation score.
pub fn write_history_csv(history: &[HistoryRow], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "epoch,l_reg,l_class,l_disc,l_recons,l_orth,reg,total,pehe_nn"
    )?;
    for row in history {
        let score = row.pehe_nn.map(|v| format!("{v}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            row.epoch,
            row.l_reg,
            row.l_class,
            row.l_disc,
            row.l_recons,
            row.l_orth,
            row.reg_term,
            row.total,
            score
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, FactorDims, FeatureRole, SyntheticSpec};

    fn zero_weights() -> LossWeights {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            mu: 0.0,
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            latent_dim: 3,
            encoder_layers: 2,
            head_hidden: 8,
            head_layers: 2,
        }
    }

    fn base_config(seed: u64) -> TrainConfig {
        TrainConfig {
            weights: zero_weights(),
            model: tiny_model(),
            batch_size: 32,
            max_epochs: 10,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 5,
            seed,
            sinkhorn: SinkhornConfig::default(),
            validation_fraction: 0.2,
        }
    }

    // ---- Adam ----

    #[test]
    fn adam_zero_gradient_leaves_params_and_decays_moments() {
        let mut p = Tensor::scalar(1.5);
        let g_nonzero = [Tensor::scalar(0.8)];
        let g_zero = [Tensor::scalar(0.0)];
        let mut state = AdamState::new(&[&p], 0.9, 0.999, 1e-8);

        let mut params = [&mut p];
        adam_step(&mut params, &g_nonzero, &mut state, 0.01);
        let v_after_first = state.second_moment(0).get(0, 0);
        let p_after_first = params[0].get(0, 0);

        adam_step(&mut params, &g_zero, &mut state, 0.01);
        let moved = (params[0].get(0, 0) - p_after_first).abs();
        // First moment still carries momentum, so motion is allowed, but the
        // second moment must decay exactly by beta2.
        assert!((state.second_moment(0).get(0, 0) - 0.999 * v_after_first).abs() < 1e-15);
        assert!(moved < 0.011);

        // A fresh state with a zero gradient moves nothing at all.
        let mut q = Tensor::scalar(-0.3);
        let mut fresh = AdamState::new(&[&q], 0.9, 0.999, 1e-8);
        let mut qp = [&mut q];
        adam_step(&mut qp, &g_zero, &mut fresh, 0.05);
        assert_eq!(qp[0].get(0, 0), -0.3);
    }

    #[test]
    fn adam_first_step_magnitude_bounded_by_lr() {
        for &g in &[1e-3, 0.5, 7.0] {
            let mut p = Tensor::scalar(0.0);
            let mut state = AdamState::new(&[&p], 0.9, 0.999, 1e-8);
            let mut params = [&mut p];
            adam_step(&mut params, &[Tensor::scalar(g)], &mut state, 0.01);
            let delta = params[0].get(0, 0).abs();
            assert!(delta <= 0.01 * 1.0001, "first step {delta} exceeds lr");
            assert!(delta >= 0.01 * 0.99, "first step {delta} far below lr");
        }
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        // 100 simulated steps against a constant positive gradient.
        let mut p = Tensor::scalar(2.0);
        let mut state = AdamState::new(&[&p], 0.9, 0.999, 1e-8);
        let grad = [Tensor::scalar(1.0)];
        let mut prev = 2.0;
        for _ in 0..100 {
            let mut params = [&mut p];
            adam_step(&mut params, &grad, &mut state, 0.01);
            let cur = params[0].get(0, 0);
            assert!(cur < prev, "parameter failed to decrease: {cur} vs {prev}");
            prev = cur;
        }
    }

    // ---- nearest-neighbor surrogate ----

    fn twin_dataset(effects: &[f64]) -> Dataset {
        // One exact-duplicate covariate pair per effect, opposite treatments,
        // noise-free outcomes.
        let n = effects.len() * 2;
        let k = 3;
        let mut x = Tensor::zeros(n, k);
        let mut t = Vec::new();
        let mut y = Vec::new();
        let mut mu0 = Vec::new();
        let mut mu1 = Vec::new();
        for (p, &c) in effects.iter().enumerate() {
            for unit in 0..2 {
                let i = 2 * p + unit;
                for j in 0..k {
                    x.set(i, j, p as f64 * 10.0 + j as f64);
                }
                let base = 0.5 * p as f64;
                t.push(unit as u8);
                y.push(if unit == 1 { base + c } else { base });
                mu0.push(base);
                mu1.push(base + c);
            }
        }
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

    fn constant_effect_predictor(k: usize, c: f64) -> Predictor {
        let shape = tiny_model().shape_for(k);
        let mut nets = FactorNetworks::init(&shape, 0).unwrap();
        for p in nets.param_tensors_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let last = nets.head_y1.layers.len() - 1;
        nets.head_y1.layers[last].bias.set(0, 0, c);
        Predictor {
            nets,
            y_scaler: OutcomeScaler {
                mean: 0.0,
                std: 1.0,
            },
        }
    }

    #[test]
    fn pehe_nn_equals_true_pehe_on_twin_fixture() {
        let data = twin_dataset(&[1.0, -0.5, 2.5]);
        let truth = data.true_effects().unwrap();
        let surrogate = nn_surrogate_effects(&data).unwrap();
        assert_eq!(surrogate, truth);

        // Any predictor then scores identically against surrogate and truth.
        let predictor = constant_effect_predictor(data.k(), 0.7);
        let nn_score = pehe_nn(&predictor, &data).unwrap();
        let predicted = predictor.predict_ite(&data.x).unwrap().effect;
        let true_score = pehe(&predicted, &truth).unwrap();
        assert!((nn_score - true_score).abs() < 1e-12);
    }

    #[test]
    fn pehe_nn_zero_for_perfect_model_on_twins() {
        let c = 1.25;
        let data = twin_dataset(&[c, c, c, c]);
        let predictor = constant_effect_predictor(data.k(), c);
        let score = pehe_nn(&predictor, &data).unwrap();
        assert!(score < 1e-12, "perfect twin model scored {score}");
    }

    #[test]
    fn pehe_nn_six_unit_hand_check() {
        // Units at x = 0, 1, 4 (control) and 0.4, 2.9, 5 (treated), 1-D.
        // Nearest opposite neighbors, by squared distance:
        //   control 0   -> treated 0.4; control 1 -> treated 0.4;
        //   control 4   -> treated 5 (distance 1 vs 1.21 to 2.9);
        //   treated 0.4 -> control 0 (0.16 vs 0.36 to 1);
        //   treated 2.9 -> control 4 (1.21 vs 3.61 to 1);
        //   treated 5   -> control 4.
        let mut x = Tensor::zeros(6, 1);
        for (i, &v) in [0.0, 1.0, 4.0, 0.4, 2.9, 5.0].iter().enumerate() {
            x.set(i, 0, v);
        }
        let data = Dataset {
            x,
            t: vec![0, 0, 0, 1, 1, 1],
            y: vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0],
            y_cf: None,
            mu0: None,
            mu1: None,
            roles: vec![FeatureRole::Unknown],
        };
        let surrogate = nn_surrogate_effects(&data).unwrap();
        let expected = [
            10.0 - 1.0, // control 0 vs treated@0.4
            10.0 - 2.0, // control 1 vs treated@0.4
            30.0 - 3.0, // control 4 vs treated@5
            10.0 - 1.0, // treated 0.4 vs control@0
            20.0 - 3.0, // treated 2.9 vs control@4
            30.0 - 3.0, // treated 5 vs control@4
        ];
        assert_eq!(surrogate, expected);

        // Zero predictor: pehe_nn is the RMS of the surrogate effects.
        let predictor = constant_effect_predictor(1, 0.0);
        let score = pehe_nn(&predictor, &data).unwrap();
        let rms = (expected.iter().map(|e| e * e).sum::<f64>() / 6.0).sqrt();
        assert!((score - rms).abs() < 1e-12);
    }

    #[test]
    fn pehe_nn_single_group_rejected() {
        let mut data = twin_dataset(&[1.0]);
        data.t = vec![1, 1];
        let err = nn_surrogate_effects(&data).unwrap_err();
        assert!(matches!(err, Error::SingleTreatmentGroup { .. }));
    }

    // ---- training loop ----

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let spec = SyntheticSpec {
            noise_std: 0.01,
            effect_scale: 0.5,
            ..SyntheticSpec::with_defaults(
                n,
                FactorDims {
                    gamma: 2,
                    delta: 2,
                    upsilon: 2,
                    omega: 0,
                },
                seed,
            )
        };
        let data = generate_synthetic(&spec).unwrap().dataset;
        let std = Standardizer::fit(&data.x);
        std.apply_dataset(&data)
    }

    #[test]
    fn toy_regression_loss_drops_by_factor_ten() {
        let data = toy_dataset(200, 3);
        let mut cfg = base_config(9);
        cfg.max_epochs = 500;
        cfg.learning_rate = 1e-2;
        cfg.eval_every = 100;
        let model = train(&data, &cfg).unwrap();
        let first = model.history.first().unwrap().l_reg;
        let last = model.history.last().unwrap().l_reg;
        assert!(
            last < 0.1 * first,
            "factual loss did not shrink: {first} -> {last}"
        );
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = toy_dataset(120, 5);
        let mut cfg = base_config(17);
        cfg.max_epochs = 8;
        cfg.eval_every = 4;
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.predictor.nets, b.predictor.nets);
        assert_eq!(a.selection_score, b.selection_score);

        cfg.seed = 18;
        let c = train(&data, &cfg).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn selection_score_is_history_minimum_and_monotone() {
        let data = toy_dataset(150, 6);
        let mut cfg = base_config(2);
        cfg.max_epochs = 30;
        cfg.eval_every = 5;
        let model = train(&data, &cfg).unwrap();
        let scores: Vec<f64> = model.history.iter().filter_map(|r| r.pehe_nn).collect();
        assert!(!scores.is_empty());
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(model.selection_score, min);
    }

    #[test]
    fn invalid_configs_rejected() {
        let data = toy_dataset(60, 1);
        let mut cfg = base_config(0);
        cfg.max_epochs = 0;
        assert!(matches!(train(&data, &cfg), Err(Error::InvalidConfig(_))));

        let mut cfg = base_config(0);
        cfg.batch_size = 1;
        assert!(matches!(train(&data, &cfg), Err(Error::InvalidConfig(_))));

        let mut cfg = base_config(0);
        cfg.learning_rate = 0.0;
        assert!(matches!(train(&data, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn single_group_dataset_rejected() {
        let mut data = toy_dataset(60, 1);
        for t in data.t.iter_mut() {
            *t = 0;
        }
        assert!(matches!(
            train(&data, &base_config(0)),
            Err(Error::SingleTreatmentGroup { .. })
        ));
    }

    #[test]
    fn pure_regression_leaves_off_path_encoders_untouched() {
        // With every auxiliary weight zero, only the regression path can
        // receive gradient: the instrumental and irrelevant encoders must
        // hold exact zeros after a step.
        let data = toy_dataset(64, 8);
        let cfg = base_config(3);
        let nets = FactorNetworks::init(
            &cfg.model.shape_for(data.k()),
            derive_seed(cfg.seed, STREAM_INIT),
        )
        .unwrap();
        let t = data.t.clone();
        let y: Vec<f64> = data.y.clone();
        let step = train_step(&nets, &cfg, data.x.clone(), &t, &y).unwrap();

        // Canonical order: nets 0..8, each layer weight+bias. Gamma encoder
        // occupies the first encoder block, omega the fourth.
        let per_net = 2 * cfg.model.encoder_layers;
        let gamma_grads = &step.grads[..per_net];
        let omega_grads = &step.grads[3 * per_net..4 * per_net];
        for g in gamma_grads.iter().chain(omega_grads) {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
        // The confounding encoder is on the regression path.
        let delta_grads = &step.grads[per_net..2 * per_net];
        assert!(delta_grads
            .iter()
            .any(|g| g.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = toy_dataset(80, 4);
        let mut cfg = base_config(21);
        cfg.max_epochs = 4;
        cfg.eval_every = 2;
        let model = train(&data, &cfg).unwrap();
        let standardizer = Standardizer::fit(&data.x);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        Checkpoint::new(&model, &cfg, &standardizer)
            .save(&path)
            .unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let predictor = loaded.predictor().unwrap();
        assert_eq!(predictor.nets, model.predictor.nets);
        assert_eq!(loaded.selection_score, model.selection_score);

        let history_path = dir.path().join("history.csv");
        write_history_csv(&model.history, &history_path).unwrap();
        let text = std::fs::read_to_string(&history_path).unwrap();
        assert!(text.starts_with("epoch,l_reg,"));
        assert_eq!(text.lines().count(), 1 + model.history.len());
    }

    #[test]
    fn predict_ite_identical_heads_give_zero_effect() {
        let k = 5;
        let shape = tiny_model().shape_for(k);
        let mut nets = FactorNetworks::init(&shape, 7).unwrap();
        nets.head_y0 = nets.head_y1.clone();
        let predictor = Predictor {
            nets,
            y_scaler: OutcomeScaler {
                mean: 2.0,
                std: 3.0,
            },
        };
        let x = Tensor::from_fn(6, k, |i, j| ((i + j) as f64).cos());
        let preds = predictor.predict_ite(&x).unwrap();
        assert!(preds.effect.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn predict_ite_constant_head_offset() {
        let k = 4;
        let c = 0.6;
        let shape = tiny_model().shape_for(k);
        let mut nets = FactorNetworks::init(&shape, 7).unwrap();
        nets.head_y0 = nets.head_y1.clone();
        let last = nets.head_y1.layers.len() - 1;
        let bias = nets.head_y1.layers[last].bias.get(0, 0);
        nets.head_y1.layers[last].bias.set(0, 0, bias + c);
        let y_std = 2.0;
        let predictor = Predictor {
            nets,
            y_scaler: OutcomeScaler {
                mean: 1.0,
                std: y_std,
            },
        };
        let x = Tensor::from_fn(5, k, |i, j| (i as f64) * 0.2 - (j as f64) * 0.1);
        let preds = predictor.predict_ite(&x).unwrap();
        for &e in &preds.effect {
            assert!((e - c * y_std).abs() < 1e-12);
        }
    }
}
