//! Command implementations. Every command writes a `config_echo.json`
//! capturing the fully-resolved settings, so any output directory is enough
//! to replay the run exactly.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dri_ite_core::data::{write_dataset_csv, Dataset, DatasetManifest, FeatureRole};
use dri_ite_core::evaluation::{
    identification_report, permutation_importance, policy_risk, write_tidy_csv, EvaluationReport,
    IdentificationReport, ImportanceMetric, PolicyConfig, ReportMeta,
};
use dri_ite_core::trainer::{write_history_csv, Checkpoint, Predictor};
use dri_ite_core::Error as CoreError;

use crate::config::{DatasetSource, ResolvedConfig};
use crate::error::{CliError, CliResult};
use crate::experiment::{
    mean_std, resolve_dataset, run_replication, run_replications, RunMetrics,
};

/// Resolved settings plus invocation context shared by all commands.
pub struct CommandContext {
    pub resolved: ResolvedConfig,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl CommandContext {
    fn prepare(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let echo = serde_json::to_string_pretty(&self.resolved)?;
        std::fs::write(self.out_dir.join("config_echo.json"), echo)?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn write_manifest(
    data: &Dataset,
    seed: u64,
    dims: Option<dri_ite_core::data::FactorDims>,
    coefficients: Option<dri_ite_core::data::DgpCoefficients>,
    path: &Path,
) -> CliResult<()> {
    let manifest = DatasetManifest {
        n: data.n(),
        k: data.k(),
        seed,
        roles: data.roles.clone(),
        dims,
        coefficients,
        extra: Default::default(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Generate a synthetic dataset and write `data.csv` plus a manifest.
pub fn cmd_gen_data(ctx: &CommandContext) -> CliResult<()> {
    let spec = match &ctx.resolved.dataset {
        DatasetSource::Synthetic(spec) => spec.clone(),
        DatasetSource::Csv(_) => {
            return Err(CliError::Config(
                "gen-data requires a synthetic dataset section".into(),
            ))
        }
    };
    ctx.prepare()?;
    let (data, coefficients, seed) = resolve_dataset(&ctx.resolved.dataset, 0)?;
    write_dataset_csv(&data, &ctx.path("data.csv"))?;
    write_manifest(
        &data,
        seed,
        Some(spec.dims),
        coefficients,
        &ctx.path("manifest.json"),
    )?;
    Ok(())
}

/// Load a CSV dataset, append the configured artificial contrasts, and write
/// the augmented copy plus a manifest.
pub fn cmd_augment(ctx: &CommandContext) -> CliResult<()> {
    if !matches!(ctx.resolved.dataset, DatasetSource::Csv(_)) {
        return Err(CliError::Config(
            "augment requires a csv dataset section".into(),
        ));
    }
    ctx.prepare()?;
    let (data, _, seed) = resolve_dataset(&ctx.resolved.dataset, 0)?;
    write_dataset_csv(&data, &ctx.path("augmented.csv"))?;
    write_manifest(&data, seed, None, None, &ctx.path("manifest.json"))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub replications: usize,
    pub runs: Vec<RunMetrics>,
    pub selection_mean: f64,
    pub selection_std: f64,
    pub pehe_mean: Option<f64>,
    pub pehe_std: Option<f64>,
    pub policy_risk_mean: Option<f64>,
    pub policy_risk_std: Option<f64>,
}

pub fn summarize(runs: &[RunMetrics]) -> TrainSummary {
    let selection: Vec<f64> = runs.iter().map(|r| r.selection_score).collect();
    let (selection_mean, selection_std) = mean_std(&selection);
    let pehe: Vec<f64> = runs.iter().filter_map(|r| r.pehe).collect();
    let (pehe_mean, pehe_std) = if pehe.len() == runs.len() && !pehe.is_empty() {
        let (m, s) = mean_std(&pehe);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let risk: Vec<f64> = runs.iter().filter_map(|r| r.policy_risk.map(|p| p.value)).collect();
    let (policy_risk_mean, policy_risk_std) = if risk.len() == runs.len() && !risk.is_empty() {
        let (m, s) = mean_std(&risk);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    TrainSummary {
        replications: runs.len(),
        runs: runs.to_vec(),
        selection_mean,
        selection_std,
        pehe_mean,
        pehe_std,
        policy_risk_mean,
        policy_risk_std,
    }
}

/// Train every replication; write per-replication checkpoints and history
/// CSVs plus an aggregate `summary.json`. A failed replication aborts after
/// the sweep with its index attached.
pub fn cmd_train(ctx: &CommandContext) -> CliResult<()> {
    ctx.prepare()?;
    let results = run_replications(&ctx.resolved, ctx.workers);

    let mut metrics = Vec::new();
    let mut first_error = None;
    for (rep, result) in results.into_iter().enumerate() {
        match result {
            Ok(run) => {
                let checkpoint =
                    Checkpoint::new(&run.model, &run.train_config, &run.standardizer);
                checkpoint.save(&ctx.path(&format!("checkpoint_{rep:03}.json")))?;
                write_history_csv(
                    &run.model.history,
                    &ctx.path(&format!("history_{rep:03}.csv")),
                )?;
                metrics.push(run.metrics);
            }
            Err(err) => {
                if first_error.is_none() {
                    first_error = Some(err);
                }
            }
        }
    }
    let summary = summarize(&metrics);
    std::fs::write(
        ctx.path("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    match first_error {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

fn known_roles(roles: &[FeatureRole]) -> bool {
    roles.iter().all(|r| *r != FeatureRole::Unknown)
}

struct EvalInputs {
    predictor: Predictor,
    checkpoint: Checkpoint,
    test_raw: Dataset,
    test_std: Dataset,
}

/// Rebuild the replication's test split and load the checkpointed model.
fn eval_inputs(
    ctx: &CommandContext,
    checkpoint_path: &Path,
    replication: usize,
) -> CliResult<EvalInputs> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let predictor = checkpoint.predictor()?;
    let (data, _, data_seed) = resolve_dataset(&ctx.resolved.dataset, replication)?;
    if data.k() != predictor.nets.covariate_dim()
        || checkpoint.covariate_standardizer.means.len() != data.k()
    {
        return Err(CoreError::SchemaMismatch(format!(
            "dataset has {} covariates, checkpoint expects {}",
            data.k(),
            predictor.nets.covariate_dim()
        ))
        .into());
    }
    let split_seed = crate::experiment::test_split_seed(data_seed);
    let parts = dri_ite_core::data::split_fractions(
        &data,
        &[1.0 - ctx.resolved.test_fraction, ctx.resolved.test_fraction],
        split_seed,
        true,
    )?;
    let test_raw = parts[1].clone();
    let test_std = checkpoint.covariate_standardizer.apply_dataset(&test_raw);
    Ok(EvalInputs {
        predictor,
        checkpoint,
        test_raw,
        test_std,
    })
}

fn build_report(
    ctx: &CommandContext,
    inputs: &EvalInputs,
    with_importance: bool,
) -> CliResult<EvaluationReport> {
    let predictor = &inputs.predictor;
    let test_std = &inputs.test_std;
    let preds = predictor.predict_ite(&test_std.x)?;

    let pehe_value = match test_std.true_effects() {
        Some(truth) => Some(dri_ite_core::evaluation::pehe(&preds.effect, &truth)?),
        None => None,
    };
    let policy_outcome: Vec<f64> = if ctx.resolved.evaluation.binarize_outcome {
        inputs.test_raw.y.iter().map(|&y| f64::from(y > 0.0)).collect()
    } else {
        inputs.test_raw.y.clone()
    };
    let risk = policy_risk(
        &inputs.test_raw.t,
        &policy_outcome,
        &preds.effect,
        &PolicyConfig {
            threshold: ctx.resolved.evaluation.policy_threshold,
        },
    )?;

    let repeats = ctx.resolved.evaluation.importance_repeats;
    let seed = inputs.checkpoint.config.seed;
    let (importance_bce, importance_mse, importance_pehe) = if with_importance {
        let bce = permutation_importance(predictor, test_std, ImportanceMetric::Bce, repeats, seed)?;
        let mse = permutation_importance(predictor, test_std, ImportanceMetric::Mse, repeats, seed)?;
        let pehe_imp = if test_std.true_effects().is_some() {
            Some(permutation_importance(
                predictor,
                test_std,
                ImportanceMetric::Pehe,
                repeats,
                seed,
            )?)
        } else {
            None
        };
        (bce, mse, pehe_imp)
    } else {
        (Vec::new(), Vec::new(), None)
    };

    let group_means: Option<IdentificationReport> = if known_roles(&test_std.roles) {
        Some(identification_report(&predictor.nets, &test_std.roles)?)
    } else {
        None
    };

    Ok(EvaluationReport {
        pehe: pehe_value,
        policy_risk: Some(risk),
        importance_bce,
        importance_mse,
        importance_pehe,
        wbar: predictor.nets.weight_contribution(),
        group_means,
        meta: ReportMeta {
            seed,
            config_hash: ctx.resolved.hash(),
        },
    })
}

/// Evaluate a checkpoint on its replication's test split: metrics JSON plus
/// tidy per-feature CSV (importance and weight contributions).
pub fn cmd_eval(ctx: &CommandContext, checkpoint: &Path, replication: usize) -> CliResult<()> {
    ctx.prepare()?;
    let inputs = eval_inputs(ctx, checkpoint, replication)?;
    let report = build_report(ctx, &inputs, true)?;
    std::fs::write(
        ctx.path("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_tidy_csv(&report, &inputs.test_std.roles, &ctx.path("per_feature.csv"))?;
    Ok(())
}

/// Permutation feature importance only.
pub fn cmd_importance(ctx: &CommandContext, checkpoint: &Path, replication: usize) -> CliResult<()> {
    ctx.prepare()?;
    let inputs = eval_inputs(ctx, checkpoint, replication)?;
    let report = build_report(ctx, &inputs, true)?;
    write_tidy_csv(&report, &inputs.test_std.roles, &ctx.path("importance.csv"))?;
    Ok(())
}

/// Weight-contribution vectors and, when feature roles are known, the
/// in-group vs out-group means per encoder.
pub fn cmd_weights_report(
    ctx: &CommandContext,
    checkpoint: &Path,
    replication: usize,
) -> CliResult<()> {
    ctx.prepare()?;
    let inputs = eval_inputs(ctx, checkpoint, replication)?;
    let report = build_report(ctx, &inputs, false)?;
    write_tidy_csv(&report, &inputs.test_std.roles, &ctx.path("wbar.csv"))?;
    if let Some(groups) = &report.group_means {
        std::fs::write(
            ctx.path("group_means.json"),
            serde_json::to_string_pretty(groups)?,
        )?;
    }
    Ok(())
}

// ---- ablation ----

/// The three objective configurations of the ablation, applied on top of
/// the configured weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationLoss {
    /// Regression + classification + discrepancy.
    Base,
    /// Base plus orthogonality.
    Orth,
    /// Base plus orthogonality plus reconstruction.
    Full,
}

impl AblationLoss {
    pub const ALL: [AblationLoss; 3] = [AblationLoss::Base, AblationLoss::Orth, AblationLoss::Full];

    pub fn label(self) -> &'static str {
        match self {
            AblationLoss::Base => "reg+class+disc",
            AblationLoss::Orth => "reg+class+disc+orth",
            AblationLoss::Full => "reg+class+disc+orth+recons",
        }
    }

    pub fn apply(self, config: &ResolvedConfig) -> ResolvedConfig {
        let mut out = config.clone();
        match self {
            AblationLoss::Base => {
                out.weights.gamma = 0.0;
                out.weights.lambda = 0.0;
            }
            AblationLoss::Orth => {
                out.weights.gamma = 0.0;
            }
            AblationLoss::Full => {}
        }
        out
    }
}

pub const ABLATION_OMEGA_GRID: [usize; 5] = [5, 10, 15, 20, 25];

fn cell_config(base: &ResolvedConfig, loss: AblationLoss, omega: usize) -> CliResult<ResolvedConfig> {
    let mut cfg = loss.apply(base);
    match &mut cfg.dataset {
        DatasetSource::Synthetic(spec) => {
            spec.dims.omega = omega;
        }
        DatasetSource::Csv(_) => {
            return Err(CliError::Config(
                "ablation requires a synthetic dataset section".into(),
            ))
        }
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
struct AblationRawRow {
    loss: &'static str,
    omega: usize,
    replication: usize,
    seed: u64,
    pehe: Option<f64>,
    error: Option<String>,
}

/// Run the loss-configuration x irrelevant-dimension grid and write
/// `ablation_table.csv` (mean(std) per cell) plus `ablation_raw.csv`.
/// Per-cell failures are recorded and reported after the sweep completes.
pub fn cmd_ablation(ctx: &CommandContext) -> CliResult<()> {
    if !matches!(ctx.resolved.dataset, DatasetSource::Synthetic(_)) {
        return Err(CliError::Config(
            "ablation requires a synthetic dataset section".into(),
        ));
    }
    ctx.prepare()?;
    let reps = ctx.resolved.replication.count;

    // One job per (loss, omega, replication); aggregation is keyed, so the
    // schedule cannot change results.
    let mut jobs = Vec::new();
    for (li, loss) in AblationLoss::ALL.iter().enumerate() {
        for (oi, &omega) in ABLATION_OMEGA_GRID.iter().enumerate() {
            for rep in 0..reps {
                jobs.push((li, *loss, oi, omega, rep));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers.max(1))
        .build()
        .expect("thread pool");
    let outcomes: Vec<(usize, usize, usize, AblationRawRow)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(li, loss, oi, omega, rep)| {
                let row = match cell_config(&ctx.resolved, loss, omega)
                    .and_then(|cfg| run_replication(&cfg, rep).map(|run| (cfg, run)))
                {
                    Ok((cfg, run)) => AblationRawRow {
                        loss: loss.label(),
                        omega,
                        replication: rep,
                        seed: cfg.replication.base_seed + rep as u64,
                        pehe: run.metrics.pehe,
                        error: None,
                    },
                    Err(err) => AblationRawRow {
                        loss: loss.label(),
                        omega,
                        replication: rep,
                        seed: ctx.resolved.replication.base_seed + rep as u64,
                        pehe: None,
                        error: Some(err.to_string()),
                    },
                };
                (li, oi, rep, row)
            })
            .collect()
    });

    let mut rows = outcomes;
    rows.sort_by_key(|&(li, oi, rep, _)| (li, oi, rep));

    // Raw long-format CSV.
    {
        use std::io::Write;
        let mut out =
            std::io::BufWriter::new(std::fs::File::create(ctx.path("ablation_raw.csv"))?);
        writeln!(out, "loss,omega,replication,seed,pehe,error")?;
        for (_, _, _, row) in &rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                row.loss,
                row.omega,
                row.replication,
                row.seed,
                row.pehe.map(|v| format!("{v}")).unwrap_or_default(),
                row.error.clone().unwrap_or_default()
            )?;
        }
    }

    // Table: one row per loss configuration, one column per omega dimension.
    let mut first_error = None;
    {
        use std::io::Write;
        let mut out =
            std::io::BufWriter::new(std::fs::File::create(ctx.path("ablation_table.csv"))?);
        let header: Vec<String> = std::iter::once("loss".to_string())
            .chain(ABLATION_OMEGA_GRID.iter().map(|o| format!("omega_{o}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (li, loss) in AblationLoss::ALL.iter().enumerate() {
            let mut fields = vec![loss.label().to_string()];
            for (oi, _) in ABLATION_OMEGA_GRID.iter().enumerate() {
                let cell: Vec<&AblationRawRow> = rows
                    .iter()
                    .filter(|&&(l, o, _, _)| l == li && o == oi)
                    .map(|(_, _, _, r)| r)
                    .collect();
                let failed = cell.iter().any(|r| r.error.is_some());
                if failed {
                    if first_error.is_none() {
                        let msg = cell
                            .iter()
                            .find_map(|r| r.error.clone())
                            .unwrap_or_default();
                        first_error = Some(CliError::Config(msg));
                    }
                    fields.push("ERROR".to_string());
                } else {
                    let values: Vec<f64> = cell.iter().filter_map(|r| r.pehe).collect();
                    let (mean, std) = mean_std(&values);
                    fields.push(format!("{mean:.3}({std:.3})"));
                }
            }
            writeln!(out, "{}", fields.join(","))?;
        }
    }

    match first_error {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_loss_zeroing() {
        use crate::config::{ExperimentConfig, Profile, ReplicationSection};
        use dri_ite_core::data::{FactorDims, SyntheticSpec};
        let cfg = ExperimentConfig {
            dataset: DatasetSource::Synthetic(SyntheticSpec::with_defaults(
                100,
                FactorDims {
                    gamma: 2,
                    delta: 2,
                    upsilon: 2,
                    omega: 1,
                },
                0,
            )),
            model: Default::default(),
            training: Default::default(),
            evaluation: Default::default(),
            replication: ReplicationSection {
                count: 1,
                base_seed: 0,
            },
            output_dir: None,
        };
        let resolved = ResolvedConfig::from_file(&cfg, Profile::Desk, None);
        let base = AblationLoss::Base.apply(&resolved);
        assert_eq!(base.weights.gamma, 0.0);
        assert_eq!(base.weights.lambda, 0.0);
        assert!(base.weights.beta > 0.0);
        let orth = AblationLoss::Orth.apply(&resolved);
        assert_eq!(orth.weights.gamma, 0.0);
        assert!(orth.weights.lambda > 0.0);
        let full = AblationLoss::Full.apply(&resolved);
        assert_eq!(full.weights, resolved.weights);
    }
}
