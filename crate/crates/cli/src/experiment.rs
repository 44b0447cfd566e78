//! The shared experiment pipeline: resolve a dataset for one replication,
//! split it, standardize on the training split, train, and score the test
//! split. Every command (and the ablation sweep) goes through
//! [`run_replication`], so an orchestration layer never changes results.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dri_ite_core::data::{
    add_artificial_contrasts, generate_synthetic, load_csv, split_fractions, Dataset,
    DgpCoefficients, Standardizer,
};
use dri_ite_core::evaluation::{policy_risk, PolicyConfig, PolicyRisk};
use dri_ite_core::trainer::{train, TrainConfig, TrainedModel};

use crate::config::{DatasetSource, ResolvedConfig};
use crate::error::{CliError, CliResult};

// Split stream constant; keeps the test split independent of the training
// loop's internal derivations.
const STREAM_TEST_SPLIT: u64 = 0xD15C;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the train/test split for a given dataset seed; shared by the
/// pipeline and checkpoint evaluation so both land on the same test rows.
pub fn test_split_seed(data_seed: u64) -> u64 {
    splitmix64(data_seed ^ STREAM_TEST_SPLIT)
}

/// Dataset for one replication. Synthetic sources redraw with
/// `spec.seed + replication`; CSV sources substitute the replication index
/// into the path template and derive the contrast seed from it.
pub fn resolve_dataset(
    source: &DatasetSource,
    replication: usize,
) -> CliResult<(Dataset, Option<DgpCoefficients>, u64)> {
    match source {
        DatasetSource::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.seed = spec.seed.wrapping_add(replication as u64);
            let out = generate_synthetic(&spec)?;
            Ok((out.dataset, Some(out.coefficients), spec.seed))
        }
        DatasetSource::Csv(csv) => {
            let schema = csv.resolve_schema()?;
            let path = csv.path_for_replication(replication);
            let mut data = load_csv(&path, &schema)?;
            let data_seed = splitmix64(0xC5F_u64 ^ replication as u64);
            if csv.contrasts > 0 {
                data = add_artificial_contrasts(&data, csv.contrasts, data_seed)?;
            }
            Ok((data, None, data_seed))
        }
    }
}

/// Metrics of one trained replication on its held-out test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub replication: usize,
    pub seed: u64,
    pub selection_score: f64,
    pub best_epoch: usize,
    pub pehe: Option<f64>,
    pub policy_risk: Option<PolicyRisk>,
    pub test_size: usize,
}

/// Everything one replication produces.
pub struct RunArtifacts {
    pub model: TrainedModel,
    pub standardizer: Standardizer,
    /// Test split with raw covariates.
    pub test: Dataset,
    /// Test split in the model's standardized covariate space.
    pub test_standardized: Dataset,
    pub train_config: TrainConfig,
    pub metrics: RunMetrics,
}

/// Train and evaluate one replication end to end.
pub fn run_replication(config: &ResolvedConfig, replication: usize) -> CliResult<RunArtifacts> {
    let wrap = |e: CliError| CliError::Replication {
        replication,
        source: Box::new(e),
    };
    run_replication_inner(config, replication).map_err(wrap)
}

fn run_replication_inner(
    config: &ResolvedConfig,
    replication: usize,
) -> CliResult<RunArtifacts> {
    let (data, _coeffs, data_seed) = resolve_dataset(&config.dataset, replication)?;

    let split_seed = test_split_seed(data_seed);
    let parts = split_fractions(
        &data,
        &[1.0 - config.test_fraction, config.test_fraction],
        split_seed,
        true,
    )?;
    let train_raw = &parts[0];
    let test_raw = parts[1].clone();

    let standardizer = Standardizer::fit(&train_raw.x);
    let train_std = standardizer.apply_dataset(train_raw);
    let test_std = standardizer.apply_dataset(&test_raw);

    let train_config = config.train_config(replication);
    let model = train(&train_std, &train_config)?;

    let preds = model.predictor.predict_ite(&test_std.x)?;
    let pehe_value = match test_std.true_effects() {
        Some(truth) => Some(dri_ite_core::evaluation::pehe(&preds.effect, &truth)?),
        None => None,
    };
    let policy_outcome: Vec<f64> = if config.evaluation.binarize_outcome {
        test_raw.y.iter().map(|&y| f64::from(y > 0.0)).collect()
    } else {
        test_raw.y.clone()
    };
    let risk = policy_risk(
        &test_raw.t,
        &policy_outcome,
        &preds.effect,
        &PolicyConfig {
            threshold: config.evaluation.policy_threshold,
        },
    )?;

    let metrics = RunMetrics {
        replication,
        seed: train_config.seed,
        selection_score: model.selection_score,
        best_epoch: model.best_epoch,
        pehe: pehe_value,
        policy_risk: Some(risk),
        test_size: test_raw.n(),
    };

    Ok(RunArtifacts {
        model,
        standardizer,
        test: test_raw,
        test_standardized: test_std,
        train_config,
        metrics,
    })
}

/// Run every replication, up to `workers` concurrently. Results come back
/// ordered by replication index regardless of scheduling.
pub fn run_replications(
    config: &ResolvedConfig,
    workers: usize,
) -> Vec<CliResult<RunArtifacts>> {
    let count = config.replication.count;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|rep| run_replication(config, rep))
            .collect()
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
