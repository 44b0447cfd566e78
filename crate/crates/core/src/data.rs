//! Datasets: synthetic generation with known factor structure, artificial
//! contrasts for irrelevant columns, CSV ingestion, splitting, and
//! standardization.
//!
//! The synthetic generator draws instrumental, confounding, and adjustment
//! columns from per-factor multivariate normals. Treatment follows a
//! logistic model on the instrumental and confounding block, potential
//! outcomes a linear model on the confounding and adjustment block with a
//! squared heterogeneity term added under treatment. Irrelevant columns are
//! artificial contrasts: row permutations of randomly chosen relevant
//! columns, which preserves marginals while destroying association with
//! treatment and outcome.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::scalar::sigmoid;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureRole {
    Gamma,
    Delta,
    Upsilon,
    Omega,
    Unknown,
}

/// One observational dataset: covariates, binary treatments, factual
/// outcomes, and (for synthetic or semi-synthetic data) counterfactual and
/// noiseless potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub y_cf: Option<Vec<f64>>,
    pub mu0: Option<Vec<f64>>,
    pub mu1: Option<Vec<f64>>,
    pub roles: Vec<FeatureRole>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn k(&self) -> usize {
        self.x.cols()
    }

    /// Noiseless individual effects `mu1 - mu0`, when both are present.
    pub fn true_effects(&self) -> Option<Vec<f64>> {
        match (&self.mu0, &self.mu1) {
            (Some(m0), Some(m1)) => Some(m0.iter().zip(m1).map(|(a, b)| b - a).collect()),
            _ => None,
        }
    }

    pub fn treated_count(&self) -> usize {
        self.t.iter().filter(|&&t| t == 1).count()
    }

    pub fn has_both_groups(&self) -> bool {
        let treated = self.treated_count();
        treated > 0 && treated < self.n()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.t.len() != n {
            return Err(Error::LengthMismatch {
                context: "dataset treatments",
                left: self.t.len(),
                right: n,
            });
        }
        if self.y.len() != n {
            return Err(Error::LengthMismatch {
                context: "dataset outcomes",
                left: self.y.len(),
                right: n,
            });
        }
        for opt in [&self.y_cf, &self.mu0, &self.mu1] {
            if let Some(v) = opt {
                if v.len() != n {
                    return Err(Error::LengthMismatch {
                        context: "dataset optional outcome column",
                        left: v.len(),
                        right: n,
                    });
                }
            }
        }
        if self.roles.len() != self.k() {
            return Err(Error::LengthMismatch {
                context: "dataset feature roles",
                left: self.roles.len(),
                right: self.k(),
            });
        }
        if !self.x.all_finite() || self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("dataset holds non-finite values".into()));
        }
        if let Some((row, &t)) = self.t.iter().enumerate().find(|(_, &t)| t > 1) {
            return Err(Error::NonBinaryTreatment {
                row: row + 1,
                value: f64::from(t),
            });
        }
        Ok(())
    }

    /// Row subset in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |v: &Option<Vec<f64>>| -> Option<Vec<f64>> {
            v.as_ref().map(|vals| indices.iter().map(|&i| vals[i]).collect())
        };
        Dataset {
            x: self.x.select_rows(indices),
            t: indices.iter().map(|&i| self.t[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            y_cf: pick(&self.y_cf),
            mu0: pick(&self.mu0),
            mu1: pick(&self.mu1),
            roles: self.roles.clone(),
        }
    }
}

// ---- synthetic generation ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorDims {
    pub gamma: usize,
    pub delta: usize,
    pub upsilon: usize,
    pub omega: usize,
}

impl FactorDims {
    pub fn relevant(&self) -> usize {
        self.gamma + self.delta + self.upsilon
    }

    pub fn total(&self) -> usize {
        self.relevant() + self.omega
    }
}

/// Mean and covariance of one latent factor's multivariate normal. Defaults
/// to zero mean, identity covariance when omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FactorDistribution {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    /// Row-major square matrix; must be symmetric positive definite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dims: FactorDims,
    #[serde(default)]
    pub gamma_dist: FactorDistribution,
    #[serde(default)]
    pub delta_dist: FactorDistribution,
    #[serde(default)]
    pub upsilon_dist: FactorDistribution,
    /// Scale `a` of the treatment logit.
    pub treatment_scale: f64,
    /// Scale of the linear outcome coefficient draws.
    pub outcome_scale: f64,
    /// Scale of the squared heterogeneity coefficient draws.
    pub effect_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn with_defaults(n: usize, dims: FactorDims, seed: u64) -> Self {
        SyntheticSpec {
            n,
            dims,
            gamma_dist: FactorDistribution::default(),
            delta_dist: FactorDistribution::default(),
            upsilon_dist: FactorDistribution::default(),
            treatment_scale: 3.0,
            outcome_scale: 1.0,
            effect_scale: 1.0,
            noise_std: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidConfig("synthetic n must be >= 2".into()));
        }
        if self.dims.relevant() == 0 {
            return Err(Error::InvalidConfig(
                "at least one relevant latent dimension is required".into(),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Coefficients drawn once per dataset; exported in manifests so a run can
/// be replayed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpCoefficients {
    pub treatment: Vec<f64>,
    pub outcome_control: Vec<f64>,
    pub outcome_treated: Vec<f64>,
    pub effect: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub coefficients: DgpCoefficients,
}

/// Lower-triangular Cholesky factor; fails when the matrix is not SPD.
fn cholesky(matrix: &[Vec<f64>], factor: &'static str) -> Result<Vec<Vec<f64>>> {
    let d = matrix.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        if matrix[i].len() != d {
            return Err(Error::NotPositiveDefinite { factor });
        }
        for j in 0..=i {
            if (matrix[i][j] - matrix[j][i]).abs() > 1e-9 {
                return Err(Error::NotPositiveDefinite { factor });
            }
            let mut sum = matrix[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::NotPositiveDefinite { factor });
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draw an `n x d` block from the factor's multivariate normal.
fn sample_factor_block(
    n: usize,
    d: usize,
    dist: &FactorDistribution,
    factor: &'static str,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if d == 0 {
        return Ok(Tensor::zeros(n, 0));
    }
    let mean = match &dist.mean {
        Some(m) if m.len() != d => {
            return Err(Error::InvalidConfig(format!(
                "{factor} mean has length {}, expected {d}",
                m.len()
            )))
        }
        Some(m) => m.clone(),
        None => vec![0.0; d],
    };
    let chol = match &dist.covariance {
        Some(c) if c.len() != d => {
            return Err(Error::InvalidConfig(format!(
                "{factor} covariance is {}x?, expected {d}x{d}",
                c.len()
            )))
        }
        Some(c) => Some(cholesky(c, factor)?),
        None => None,
    };
    let mut out = Tensor::zeros(n, d);
    let mut z = vec![0.0; d];
    for i in 0..n {
        for zj in z.iter_mut() {
            *zj = standard_normal(rng);
        }
        let row = out.row_mut(i);
        match &chol {
            None => {
                for j in 0..d {
                    row[j] = mean[j] + z[j];
                }
            }
            Some(l) => {
                for j in 0..d {
                    let mut acc = mean[j];
                    for (k, lv) in l[j].iter().enumerate().take(j + 1) {
                        acc += lv * z[k];
                    }
                    row[j] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Generate a synthetic dataset with known factor structure. Columns are
/// laid out `[gamma | delta | upsilon]` followed by `dims.omega` artificial
/// contrasts; all randomness comes from `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let dims = spec.dims;

    let gamma = sample_factor_block(n, dims.gamma, &spec.gamma_dist, "gamma", &mut rng)?;
    let delta = sample_factor_block(n, dims.delta, &spec.delta_dist, "delta", &mut rng)?;
    let upsilon = sample_factor_block(n, dims.upsilon, &spec.upsilon_dist, "upsilon", &mut rng)?;

    let mut x = Tensor::zeros(n, dims.relevant());
    for i in 0..n {
        let row = x.row_mut(i);
        row[..dims.gamma].copy_from_slice(gamma.row(i));
        row[dims.gamma..dims.gamma + dims.delta].copy_from_slice(delta.row(i));
        row[dims.gamma + dims.delta..].copy_from_slice(upsilon.row(i));
    }

    // Coefficient draws, once per dataset.
    let tdim = dims.gamma + dims.delta;
    let odim = dims.delta + dims.upsilon;
    let w_t: Vec<f64> = (0..tdim).map(|_| standard_normal(&mut rng)).collect();
    let w_y0: Vec<f64> = (0..odim)
        .map(|_| spec.outcome_scale * standard_normal(&mut rng))
        .collect();
    let w_y1: Vec<f64> = (0..odim)
        .map(|_| spec.outcome_scale * standard_normal(&mut rng))
        .collect();
    let w_e: Vec<f64> = (0..odim)
        .map(|_| spec.effect_scale * standard_normal(&mut rng))
        .collect();

    let mut t = Vec::with_capacity(n);
    let mut mu0 = Vec::with_capacity(n);
    let mut mu1 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y_cf = Vec::with_capacity(n);

    for i in 0..n {
        let row = x.row(i);
        let treat_block = &row[..tdim];
        let outcome_block = &row[dims.gamma..];

        let logit = if tdim == 0 {
            0.0
        } else {
            spec.treatment_scale
                * treat_block
                    .iter()
                    .zip(&w_t)
                    .map(|(x, w)| x * w)
                    .sum::<f64>()
                / tdim as f64
        };
        let ti = u8::from(rng.gen_range(0.0..1.0) < sigmoid(logit));

        let dotn = |w: &[f64]| -> f64 {
            if odim == 0 {
                0.0
            } else {
                outcome_block.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / odim as f64
            }
        };
        let base0 = dotn(&w_y0);
        let base1 = dotn(&w_y1);
        let het = dotn(&w_e);
        let m0 = base0;
        let m1 = base1 + het * het;

        let noise_f = spec.noise_std * standard_normal(&mut rng);
        let noise_cf = spec.noise_std * standard_normal(&mut rng);
        let (yf, ycf) = if ti == 1 {
            (m1 + noise_f, m0 + noise_cf)
        } else {
            (m0 + noise_f, m1 + noise_cf)
        };

        t.push(ti);
        mu0.push(m0);
        mu1.push(m1);
        y.push(yf);
        y_cf.push(ycf);
    }

    let mut roles = Vec::with_capacity(dims.total());
    roles.extend(std::iter::repeat(FeatureRole::Gamma).take(dims.gamma));
    roles.extend(std::iter::repeat(FeatureRole::Delta).take(dims.delta));
    roles.extend(std::iter::repeat(FeatureRole::Upsilon).take(dims.upsilon));

    let mut dataset = Dataset {
        x,
        t,
        y,
        y_cf: Some(y_cf),
        mu0: Some(mu0),
        mu1: Some(mu1),
        roles,
    };
    if dims.omega > 0 {
        dataset = add_artificial_contrasts(&dataset, dims.omega, spec.seed ^ 0xC047_8A57)?;
    }
    dataset.validate()?;
    Ok(SyntheticData {
        dataset,
        coefficients: DgpCoefficients {
            treatment: w_t,
            outcome_control: w_y0,
            outcome_treated: w_y1,
            effect: w_e,
        },
    })
}

/// Append `count` irrelevant columns, each an independent row permutation of
/// a uniformly chosen relevant (non-omega) column. Treatments, outcomes, and
/// original columns are untouched; appended columns are labeled omega.
pub fn add_artificial_contrasts(data: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Ok(data.clone());
    }
    let sources: Vec<usize> = (0..data.k())
        .filter(|&j| data.roles[j] != FeatureRole::Omega)
        .collect();
    if sources.is_empty() {
        return Err(Error::InvalidConfig(
            "artificial contrasts need at least one relevant source column".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.n();
    let mut x = Tensor::zeros(n, data.k() + count);
    for i in 0..n {
        x.row_mut(i)[..data.k()].copy_from_slice(data.x.row(i));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for c in 0..count {
        let src = sources[rng.gen_range(0..sources.len())];
        perm.shuffle(&mut rng);
        for i in 0..n {
            x.set(i, data.k() + c, data.x.get(perm[i], src));
        }
    }
    let mut roles = data.roles.clone();
    roles.extend(std::iter::repeat(FeatureRole::Omega).take(count));
    Ok(Dataset {
        x,
        t: data.t.clone(),
        y: data.y.clone(),
        y_cf: data.y_cf.clone(),
        mu0: data.mu0.clone(),
        mu1: data.mu1.clone(),
        roles,
    })
}

// ---- CSV ingestion ----

/// Column declaration for loading a benchmark CSV. Column order in the file
/// is free; names must appear in the header row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub covariates: Vec<String>,
    pub treatment: String,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu0: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu1: Option<String>,
}

impl CsvSchema {
    /// Per-realization layout used by the infant-health benchmark:
    /// `treatment, y_factual, y_cfactual, mu0, mu1, x1..x25`.
    pub fn ihdp() -> Self {
        CsvSchema {
            covariates: (1..=25).map(|i| format!("x{i}")).collect(),
            treatment: "treatment".into(),
            outcome: "y_factual".into(),
            counterfactual: Some("y_cfactual".into()),
            mu0: Some("mu0".into()),
            mu1: Some("mu1".into()),
        }
    }

    /// Eight-covariate job-training layout with 1978 earnings as outcome.
    pub fn jobs() -> Self {
        CsvSchema {
            covariates: ["age", "educ", "black", "hisp", "married", "nodegr", "re74", "re75"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            treatment: "treatment".into(),
            outcome: "re78".into(),
            counterfactual: None,
            mu0: None,
            mu1: None,
        }
    }
}

/// Load a dataset from a headered CSV according to the schema. All loaded
/// columns get role `unknown`; treatment must be exactly 0 or 1.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let index_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let cov_idx: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| index_of(c))
        .collect::<Result<_>>()?;
    let t_idx = index_of(&schema.treatment)?;
    let y_idx = index_of(&schema.outcome)?;
    let cf_idx = schema.counterfactual.as_deref().map(index_of).transpose()?;
    let mu0_idx = schema.mu0.as_deref().map(index_of).transpose()?;
    let mu1_idx = schema.mu1.as_deref().map(index_of).transpose()?;

    let parse = |record: &csv::StringRecord, row: usize, idx: usize| -> Result<f64> {
        let raw = record.get(idx).unwrap_or("");
        raw.parse::<f64>().map_err(|_| Error::CsvCell {
            row,
            column: headers.get(idx).unwrap_or("?").to_string(),
            details: format!("cannot parse `{raw}` as a number"),
        })
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    let mut y_cf = cf_idx.map(|_| Vec::new());
    let mut mu0 = mu0_idx.map(|_| Vec::new());
    let mut mu1 = mu1_idx.map(|_| Vec::new());

    for (ri, record) in reader.records().enumerate() {
        let record = record?;
        let row = ri + 1;
        let tv = parse(&record, row, t_idx)?;
        if tv != 0.0 && tv != 1.0 {
            return Err(Error::NonBinaryTreatment { row, value: tv });
        }
        t.push(tv as u8);
        y.push(parse(&record, row, y_idx)?);
        if let (Some(idx), Some(buf)) = (cf_idx, y_cf.as_mut()) {
            buf.push(parse(&record, row, idx)?);
        }
        if let (Some(idx), Some(buf)) = (mu0_idx, mu0.as_mut()) {
            buf.push(parse(&record, row, idx)?);
        }
        if let (Some(idx), Some(buf)) = (mu1_idx, mu1.as_mut()) {
            buf.push(parse(&record, row, idx)?);
        }
        let mut xrow = Vec::with_capacity(cov_idx.len());
        for &ci in &cov_idx {
            xrow.push(parse(&record, row, ci)?);
        }
        rows.push(xrow);
    }

    let n = rows.len();
    let k = cov_idx.len();
    let mut x = Tensor::zeros(n, k);
    for (i, r) in rows.iter().enumerate() {
        x.row_mut(i).copy_from_slice(r);
    }
    let data = Dataset {
        x,
        t,
        y,
        y_cf,
        mu0,
        mu1,
        roles: vec![FeatureRole::Unknown; k],
    };
    data.validate()?;
    Ok(data)
}

// ---- splitting ----

/// Disjoint, exhaustive split into `fractions.len()` parts. Within each
/// stratum the shuffle is seed-driven and sizes follow largest remainders,
/// so group proportions stay within one unit of exact when stratifying.
pub fn split_fractions(
    data: &Dataset,
    fractions: &[f64],
    seed: u64,
    stratify_by_treatment: bool,
) -> Result<Vec<Dataset>> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::BadFractions(total));
    }
    let parts = fractions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let strata: Vec<Vec<usize>> = if stratify_by_treatment {
        let mut by_group = vec![Vec::new(), Vec::new()];
        for (i, &t) in data.t.iter().enumerate() {
            by_group[t as usize].push(i);
        }
        by_group
    } else {
        vec![(0..data.n()).collect()]
    };

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); parts];
    for mut stratum in strata {
        stratum.shuffle(&mut rng);
        let counts = largest_remainder_counts(stratum.len(), fractions);
        let mut offset = 0;
        for (p, &c) in counts.iter().enumerate() {
            assigned[p].extend_from_slice(&stratum[offset..offset + c]);
            offset += c;
        }
    }

    let mut out = Vec::with_capacity(parts);
    for (p, part) in assigned.iter_mut().enumerate() {
        part.sort_unstable();
        let subset = data.subset(part);
        if stratify_by_treatment && !subset.has_both_groups() {
            let group = if subset.treated_count() == 0 { 1 } else { 0 };
            return Err(Error::EmptySplitGroup { part: p, group });
        }
        out.push(subset);
    }
    Ok(out)
}

/// Three-way convenience wrapper: (train, validation, test).
pub fn split3(
    data: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
    stratify_by_treatment: bool,
) -> Result<(Dataset, Dataset, Dataset)> {
    let parts = split_fractions(
        data,
        &[fractions.0, fractions.1, fractions.2],
        seed,
        stratify_by_treatment,
    )?;
    let mut it = parts.into_iter();
    Ok((
        it.next().expect("train"),
        it.next().expect("validation"),
        it.next().expect("test"),
    ))
}

fn largest_remainder_counts(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = fractions[a] * n as f64 - (fractions[a] * n as f64).floor();
        let rb = fractions[b] * n as f64 - (fractions[b] * n as f64).floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &p in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[p] += 1;
        leftover -= 1;
    }
    counts
}

// ---- standardization ----

/// Per-column z-scoring fit on one split (training) and applied everywhere.
/// Constant columns keep scale 1 so they pass through centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Standardizer {
        let n = x.rows().max(1) as f64;
        let k = x.cols();
        let mut means = vec![0.0; k];
        for i in 0..x.rows() {
            for (m, &v) in means.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        for m in means.iter_mut() {
            *m /= n;
        }
        let mut vars = vec![0.0; k];
        for i in 0..x.rows() {
            for j in 0..k {
                let d = x.get(i, j) - means[j];
                vars[j] += d * d;
            }
        }
        let stds = vars
            .iter()
            .map(|&v| {
                let s = (v / n).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Standardizer { means, stds }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.means[j]) / self.stds[j]
        })
    }

    pub fn apply_dataset(&self, data: &Dataset) -> Dataset {
        Dataset {
            x: self.apply(&data.x),
            ..data.clone()
        }
    }
}

/// z-scoring for a single outcome column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScaler {
    pub mean: f64,
    pub std: f64,
}

impl OutcomeScaler {
    pub fn fit(y: &[f64]) -> OutcomeScaler {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        OutcomeScaler {
            mean,
            std: if std < 1e-12 { 1.0 } else { std },
        }
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn unscale(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Effects are differences, so only the scale applies.
    pub fn unscale_effect(&self, z: f64) -> f64 {
        z * self.std
    }
}

// ---- CSV / manifest output ----

/// Write a dataset as CSV with columns `x1..xK, t, y[, mu0, mu1]`.
pub fn write_dataset_csv(data: &Dataset, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = (1..=data.k()).map(|j| format!("x{j}")).collect();
    header.push("t".into());
    header.push("y".into());
    if data.mu0.is_some() {
        header.push("mu0".into());
    }
    if data.mu1.is_some() {
        header.push("mu1".into());
    }
    writeln!(out, "{}", header.join(","))?;
    for i in 0..data.n() {
        let mut fields: Vec<String> = data.x.row(i).iter().map(|v| format!("{v}")).collect();
        fields.push(format!("{}", data.t[i]));
        fields.push(format!("{}", data.y[i]));
        if let Some(mu0) = &data.mu0 {
            fields.push(format!("{}", mu0[i]));
        }
        if let Some(mu1) = &data.mu1 {
            fields.push(format!("{}", mu1[i]));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Schema matching [`write_dataset_csv`] output, for reading generated data
/// back.
pub fn generated_csv_schema(k: usize, with_mu: bool) -> CsvSchema {
    CsvSchema {
        covariates: (1..=k).map(|j| format!("x{j}")).collect(),
        treatment: "t".into(),
        outcome: "y".into(),
        counterfactual: None,
        mu0: with_mu.then(|| "mu0".into()),
        mu1: with_mu.then(|| "mu1".into()),
    }
}

/// Sidecar manifest describing a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub roles: Vec<FeatureRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<FactorDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<DgpCoefficients>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}
