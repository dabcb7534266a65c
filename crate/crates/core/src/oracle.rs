//! Brute-force references for the closed-form quantities: tensor-grid
//! quadrature of the conditional integrated likelihood, exact enumeration of
//! the conditional model posterior, and a generator that simulates the model
//! itself.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TbmaError};
use crate::model::{
    complete_data_log_density_unchecked, CoefVector, ModelIndicator, PriorSpec, SigmaParams,
    TobitDataset,
};
use crate::search::{conditional_log_marginal, rss_form_log_marginal, ModelPrior};
use crate::conditionals::ConditionalMoments;

/// Largest active dimension the tensor grid accepts.
pub const MAX_QUADRATURE_DIM: usize = 3;

/// Largest number of free bits enumeration accepts (4096 models).
pub const MAX_ENUMERATION_BITS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureSpec {
    pub nodes_per_axis: usize,
    /// Half-width of each axis in prior standard deviations around the prior mean.
    pub half_width_sd: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            nodes_per_axis: 201,
            half_width_sd: 10.0,
        }
    }
}

/// Streaming log-sum-exp accumulator.
#[derive(Clone, Copy, Debug)]
struct LogSum {
    max: f64,
    scaled: f64,
}

impl LogSum {
    fn new() -> Self {
        LogSum {
            max: f64::NEG_INFINITY,
            scaled: 0.0,
        }
    }

    fn add(&mut self, v: f64) {
        if v <= self.max {
            self.scaled += (v - self.max).exp();
        } else {
            self.scaled = self.scaled * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    fn value(&self) -> f64 {
        self.max + self.scaled.ln()
    }
}

/// `log integral exp(complete_data_log_density(psi)) N(psi_M; psi0_M, Psi0_M) dpsi_M`
/// by the trapezoid rule on a tensor grid.
///
/// The likelihood kernel keeps the same dropped constants as
/// [`complete_data_log_density`](crate::model::complete_data_log_density), so
/// this equals the conditional log marginal plus
/// [`ConditionalMoments::data_log_constant`]; ratios between models compare
/// directly with exponentiated conditional log Bayes factors.
pub fn quadrature_log_marginal(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    model: &ModelIndicator,
    sp: SigmaParams,
    prior: &PriorSpec,
    spec: QuadratureSpec,
) -> Result<f64> {
    sp.validate()?;
    dataset.check_latent(z)?;
    prior.check_dims(dataset)?;
    let active = model.active_indices();
    let d = active.len();
    if d > MAX_QUADRATURE_DIM {
        return Err(TbmaError::Dimension(format!(
            "quadrature supports at most {MAX_QUADRATURE_DIM} active coefficients, model has {d}"
        )));
    }
    if spec.nodes_per_axis < 2 {
        return Err(TbmaError::InvalidParameter("need at least two nodes per axis".into()));
    }
    let p = dataset.p();
    let mut psi = CoefVector::zeros(p, dataset.q());
    if d == 0 {
        return Ok(complete_data_log_density_unchecked(dataset, z, &psi, sp));
    }

    let full_mean = prior.stacked_mean();
    let full_cov = prior.stacked_cov();
    let mean = DVector::from_fn(d, |r, _| full_mean[active[r]]);
    let cov = DMatrix::from_fn(d, d, |r, c| full_cov[(active[r], active[c])]);
    let cov_det = cov.determinant();
    let precision = cov
        .try_inverse()
        .ok_or_else(|| TbmaError::Numerical("prior covariance is singular".into()))?;
    let log_norm = -0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * cov_det.ln();

    let nodes = spec.nodes_per_axis;
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let sd = full_cov[(active[a], active[a])].sqrt();
            let lo = mean[a] - spec.half_width_sd * sd;
            let step = 2.0 * spec.half_width_sd * sd / (nodes - 1) as f64;
            (0..nodes).map(|j| lo + step * j as f64).collect()
        })
        .collect();
    let log_weight = |a: usize, j: usize| {
        let step = axes[a][1] - axes[a][0];
        if j == 0 || j == nodes - 1 {
            (0.5 * step).ln()
        } else {
            step.ln()
        }
    };

    let mut acc = LogSum::new();
    let mut idx = vec![0usize; d];
    let mut offset = DVector::zeros(d);
    loop {
        let mut lw = 0.0;
        for a in 0..d {
            let v = axes[a][idx[a]];
            offset[a] = v - mean[a];
            let k = active[a];
            if k < p {
                psi.theta[k] = v;
            } else {
                psi.beta[k - p] = v;
            }
            lw += log_weight(a, idx[a]);
        }
        let log_prior = log_norm - 0.5 * offset.dot(&(&precision * &offset));
        acc.add(lw + log_prior + complete_data_log_density_unchecked(dataset, z, &psi, sp));

        let mut a = 0;
        loop {
            idx[a] += 1;
            if idx[a] < nodes {
                break;
            }
            idx[a] = 0;
            a += 1;
            if a == d {
                return Ok(acc.value());
            }
        }
    }
}

/// Every model compatible with the forced bits.
pub fn all_models(template: &ModelIndicator) -> Result<Vec<ModelIndicator>> {
    let free = template.free_positions();
    if free.len() > MAX_ENUMERATION_BITS {
        return Err(TbmaError::Dimension(format!(
            "{} free covariates exceed the enumeration limit of {MAX_ENUMERATION_BITS}",
            free.len()
        )));
    }
    let mut base = template.clone();
    for &k in &free {
        if base.bit(k) {
            base = base.toggled(k)?;
        }
    }
    (0..1usize << free.len())
        .map(|mask| {
            let mut m = base.clone();
            for (b, &k) in free.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    m = m.toggled(k)?;
                }
            }
            Ok(m)
        })
        .collect()
}

/// Exact conditional posterior over the model space at fixed `(z, Sigma)`.
pub fn enumerate_model_posterior(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    sp: SigmaParams,
    prior: &PriorSpec,
    model_prior: ModelPrior,
) -> Result<Vec<(ModelIndicator, f64)>> {
    let moments = ConditionalMoments::new(dataset, z, sp)?;
    let models = all_models(&dataset.null_model())?;
    let log_weights = models
        .iter()
        .map(|m| Ok(moments.log_marginal(m, prior)?.log_conditional_marginal + model_prior.log_prior(m)))
        .collect::<Result<Vec<f64>>>()?;
    let mut acc = LogSum::new();
    for &v in &log_weights {
        acc.add(v);
    }
    let norm = acc.value();
    Ok(models
        .into_iter()
        .zip(log_weights)
        .map(|(m, v)| (m, (v - norm).exp()))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CovariateDistribution {
    StandardNormal,
    Uniform { low: f64, high: f64 },
}

impl CovariateDistribution {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateDistribution::StandardNormal => rng.sample(StandardNormal),
            CovariateDistribution::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }
}

/// Generator settings. When `intercept` is set, the first entry of each
/// coefficient vector belongs to a constant column that is forced into every model.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub true_theta: Vec<f64>,
    pub true_beta: Vec<f64>,
    pub gamma: f64,
    pub phi: f64,
    pub covariates: CovariateDistribution,
    pub intercept: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: TobitDataset,
    /// Latent selection values that produced the censoring pattern.
    pub z: DVector<f64>,
    /// Uncensored outcomes, observed or not.
    pub y_star: DVector<f64>,
    pub truth: CoefVector,
    pub sigma: SigmaParams,
    pub censoring_fraction: f64,
}

pub const INTERCEPT_NAME: &str = "(Intercept)";

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let sigma = SigmaParams::new(spec.gamma, spec.phi)?;
    let (n, p, q) = (spec.n, spec.true_theta.len(), spec.true_beta.len());
    if spec.intercept && (p == 0 || q == 0) {
        return Err(TbmaError::InvalidParameter(
            "an intercept needs a coefficient in each equation".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lead = spec.intercept as usize;
    let mut w = DMatrix::zeros(n, p);
    let mut x = DMatrix::zeros(n, q);
    let mut z = DVector::zeros(n);
    let mut y_star = DVector::zeros(n);
    let mut censored = vec![false; n];
    let theta = DVector::from_column_slice(&spec.true_theta);
    let beta = DVector::from_column_slice(&spec.true_beta);
    let noise_sd = spec.phi.sqrt();
    for i in 0..n {
        for k in 0..p {
            w[(i, k)] = if k < lead { 1.0 } else { spec.covariates.sample(&mut rng) };
        }
        for k in 0..q {
            x[(i, k)] = if k < lead { 1.0 } else { spec.covariates.sample(&mut rng) };
        }
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let eps = e1;
        let eta = spec.gamma * e1 + noise_sd * e2;
        z[i] = w.row(i).transpose().dot(&theta) + eps;
        y_star[i] = x.row(i).transpose().dot(&beta) + eta;
        censored[i] = z[i] < 0.0;
    }
    let y = DVector::from_fn(n, |i, _| if censored[i] { 0.0 } else { y_star[i] });
    let name = |prefix: &str, k: usize| {
        if k < lead {
            INTERCEPT_NAME.to_string()
        } else {
            format!("{prefix}{}", k + 1 - lead)
        }
    };
    let names_w = (0..p).map(|k| name("w", k)).collect();
    let names_x = (0..q).map(|k| name("x", k)).collect();
    let censoring_fraction = censored.iter().filter(|&&c| c).count() as f64 / n.max(1) as f64;
    let forced_w = (0..p).map(|k| k < lead).collect();
    let forced_x = (0..q).map(|k| k < lead).collect();
    let dataset = TobitDataset::new(w, x, y, censored, names_w, names_x)?.with_forced(forced_w, forced_x)?;
    Ok(SyntheticData {
        dataset,
        z,
        y_star,
        truth: CoefVector { theta, beta },
        sigma,
        censoring_fraction,
    })
}

/// A fixed `(z, Sigma)` problem and a pair of adjacent models to compare.
#[derive(Clone, Debug)]
pub struct CbfFixture {
    pub name: String,
    pub dataset: TobitDataset,
    pub z: DVector<f64>,
    pub sigma: SigmaParams,
    pub prior_var: f64,
    pub from: ModelIndicator,
    pub to: ModelIndicator,
}

impl CbfFixture {
    pub fn prior(&self) -> PriorSpec {
        PriorSpec::isotropic(self.dataset.p(), self.dataset.q(), self.prior_var)
    }
}

const FIXTURE_ROWS: usize = 15;

/// Model pairs `(from, to)` as bit strings over `(w1, w2 | x1)` or `(w1 | x1, x2)`.
const FIXTURE_PAIRS: [(usize, &str, &str); 10] = [
    (2, "00|0", "10|0"),
    (2, "10|0", "10|1"),
    (2, "11|0", "11|1"),
    (2, "01|1", "11|1"),
    (2, "10|1", "00|1"),
    (1, "0|00", "0|01"),
    (1, "1|10", "1|11"),
    (1, "1|01", "0|01"),
    (1, "0|11", "1|11"),
    (1, "1|00", "1|10"),
];

fn parse_bits(s: &str, p: usize, q: usize) -> Result<ModelIndicator> {
    let (sel, out) = s
        .split_once('|')
        .ok_or_else(|| TbmaError::Config(format!("model `{s}` lacks a `|` separator")))?;
    let bits = |t: &str| t.chars().map(|c| c == '1').collect::<Vec<bool>>();
    let (w, x) = (bits(sel), bits(out));
    if w.len() != p || x.len() != q || !s.chars().all(|c| "01|".contains(c)) {
        return Err(TbmaError::Config(format!("model `{s}` does not fit p={p}, q={q}")));
    }
    Ok(ModelIndicator::unforced(w, x))
}

/// Deterministic construction of the committed fixture `index` (0..10).
pub fn build_cbf_fixture(index: usize) -> Result<CbfFixture> {
    let (p, from, to) = FIXTURE_PAIRS
        .get(index)
        .copied()
        .ok_or_else(|| TbmaError::InvalidParameter(format!("no fixture {index}")))?;
    let q = 3 - p;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + index as u64);
    let coef = |rng: &mut ChaCha8Rng| (rng.random::<f64>() * 2.0 - 1.0) * 1.2;
    let spec = SyntheticSpec {
        n: FIXTURE_ROWS,
        true_theta: (0..p).map(|_| coef(&mut rng)).collect(),
        true_beta: (0..q).map(|_| coef(&mut rng)).collect(),
        gamma: 0.8 * (rng.random::<f64>() * 2.0 - 1.0),
        phi: 0.5 + rng.random::<f64>(),
        covariates: CovariateDistribution::StandardNormal,
        intercept: false,
        seed: 2000 + index as u64,
    };
    let data = generate_synthetic(&spec)?;
    Ok(CbfFixture {
        name: format!("cbf_{index:02}"),
        sigma: data.sigma,
        z: data.z,
        dataset: data.dataset,
        prior_var: 1.0,
        from: parse_bits(from, p, q)?,
        to: parse_bits(to, p, q)?,
    })
}

pub const FIXTURE_COUNT: usize = FIXTURE_PAIRS.len();

/// Writes `<name>.csv` (data plus a `z` column) and `<name>.cfg` (key = value).
pub fn write_cbf_fixture(fixture: &CbfFixture, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ds = &fixture.dataset;
    let mut wtr = csv::Writer::from_path(dir.join(format!("{}.csv", fixture.name)))?;
    let mut header: Vec<String> = ds.names_w().to_vec();
    header.extend(ds.names_x().iter().cloned());
    header.extend(["y".into(), "censored".into(), "z".into()]);
    wtr.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.w().row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.extend(ds.x().row(i).iter().map(|v| format!("{v:?}")));
        rec.push(format!("{:?}", ds.y()[i]));
        rec.push(if ds.censored()[i] { "1" } else { "0" }.into());
        rec.push(format!("{:?}", fixture.z[i]));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    let cfg = format!(
        "# conditional Bayes factor fixture\nselection = {}\noutcome = {}\nresponse = y\ncensored = censored\nlatent = z\ngamma = {:?}\nphi = {:?}\nprior_var = {:?}\nmodel_from = {}\nmodel_to = {}\n",
        ds.names_w().join(","),
        ds.names_x().join(","),
        fixture.sigma.gamma,
        fixture.sigma.phi,
        fixture.prior_var,
        fixture.from.bit_string(),
        fixture.to.bit_string(),
    );
    fs::write(dir.join(format!("{}.cfg", fixture.name)), cfg)?;
    Ok(())
}

pub fn read_cbf_fixture(dir: &Path, name: &str) -> Result<CbfFixture> {
    let cfg_text = fs::read_to_string(dir.join(format!("{name}.cfg")))?;
    let cfg = crate::io::parse_key_values(&cfg_text)?;
    let get = |k: &str| -> Result<&String> {
        cfg.get(k).ok_or_else(|| TbmaError::Config(format!("fixture {name} lacks `{k}`")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse::<f64>()
            .map_err(|e| TbmaError::Config(format!("fixture {name}: `{k}`: {e}")))
    };
    let schema = crate::io::DataSchema {
        response: get("response")?.clone(),
        censored: Some(get("censored")?.clone()),
        selection: get("selection")?.split(',').map(str::to_string).collect(),
        outcome: get("outcome")?.split(',').map(str::to_string).collect(),
        add_intercept_selection: false,
        add_intercept_outcome: false,
        standardize: false,
    };
    let csv_path = dir.join(format!("{name}.csv"));
    let loaded = crate::io::load_csv(&csv_path, &schema)?;
    let extra = crate::io::read_numeric_column(&csv_path, get("latent")?)?;
    let dataset = loaded.dataset;
    let z = DVector::from_vec(extra);
    dataset.check_latent(&z)?;
    Ok(CbfFixture {
        name: name.to_string(),
        sigma: SigmaParams::new(num("gamma")?, num("phi")?)?,
        prior_var: num("prior_var")?,
        from: parse_bits(get("model_from")?, dataset.p(), dataset.q())?,
        to: parse_bits(get("model_to")?, dataset.p(), dataset.q())?,
        z,
        dataset,
    })
}

/// Rewrites all committed fixtures into `dir`.
pub fn regenerate_fixtures(dir: &Path) -> Result<()> {
    for i in 0..FIXTURE_COUNT {
        write_cbf_fixture(&build_cbf_fixture(i)?, dir)?;
    }
    Ok(())
}

/// Reads every `*.cfg` fixture in `dir`, sorted by name.
pub fn read_cbf_fixtures(dir: &Path) -> Result<Vec<CbfFixture>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let path = e.path();
            if path.extension()? != "cfg" {
                return None;
            }
            Some(path.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names.iter().map(|n| read_cbf_fixture(dir, n)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: String, value: f64, tolerance: f64) -> Self {
        CheckResult {
            name,
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
        }
    }
}

/// Relative tolerance for closed-form against quadrature Bayes factors.
pub const CBF_QUADRATURE_RTOL: f64 = 1e-3;
/// Absolute tolerance between determinant and residual forms of log Bayes factors.
pub const CBF_RSS_ATOL: f64 = 1e-9;

/// Closed form against quadrature, and determinant form against residual form,
/// for one fixture.
pub fn check_cbf_fixture(fixture: &CbfFixture, spec: QuadratureSpec) -> Result<Vec<CheckResult>> {
    let prior = fixture.prior();
    let (ds, z, sp) = (&fixture.dataset, &fixture.z, fixture.sigma);
    let lm = |m: &ModelIndicator| -> Result<f64> {
        Ok(conditional_log_marginal(ds, z, m, sp, &prior)?.log_conditional_marginal)
    };
    let log_cbf = lm(&fixture.to)? - lm(&fixture.from)?;
    let quad_from = quadrature_log_marginal(ds, z, &fixture.from, sp, &prior, spec)?;
    let quad_to = quadrature_log_marginal(ds, z, &fixture.to, sp, &prior, spec)?;
    let quad_ratio = (quad_to - quad_from).exp();
    let rel = (log_cbf.exp() - quad_ratio).abs() / quad_ratio;

    let rss_cbf = rss_form_log_marginal(ds, z, &fixture.to, sp, &prior)?
        - rss_form_log_marginal(ds, z, &fixture.from, sp, &prior)?;
    Ok(vec![
        CheckResult::new(
            format!("{}: closed-form vs quadrature Bayes factor (relative)", fixture.name),
            rel,
            CBF_QUADRATURE_RTOL,
        ),
        CheckResult::new(
            format!("{}: determinant vs residual form log Bayes factor (absolute)", fixture.name),
            (log_cbf - rss_cbf).abs(),
            CBF_RSS_ATOL,
        ),
    ])
}

/// Largest absolute gap between MC3 visit frequencies at fixed `(z, Sigma)`
/// and the enumerated conditional posterior.
pub fn mc3_frequency_gap(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    sp: SigmaParams,
    prior: &PriorSpec,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let exact = enumerate_model_posterior(dataset, z, sp, prior, prior.model_prior)?;
    let moments = ConditionalMoments::new(dataset, z, sp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visits: BTreeMap<String, usize> = BTreeMap::new();
    let mut model = dataset.null_model();
    for _ in 0..steps {
        model = crate::search::mc3_steps(&moments, &model, prior, prior.model_prior, 1, &mut rng)?.model;
        *visits.entry(model.bit_string()).or_default() += 1;
    }
    Ok(exact
        .iter()
        .map(|(m, prob)| {
            let freq = visits.get(&m.bit_string()).copied().unwrap_or(0) as f64 / steps as f64;
            (freq - prob).abs()
        })
        .fold(0.0, f64::max))
}

/// Visit-frequency tolerance for MC3 against enumeration.
pub const MC3_FREQUENCY_ATOL: f64 = 0.02;
/// Steps used for the visit-frequency check.
pub const MC3_CHECK_STEPS: usize = 1_000_000;

/// Every fixture check, plus MC3 against enumeration on the first fixture.
pub fn validation_suite(dir: &Path) -> Result<Vec<CheckResult>> {
    let fixtures = read_cbf_fixtures(dir)?;
    if fixtures.is_empty() {
        return Err(TbmaError::Config(format!("no fixtures in {}", dir.display())));
    }
    let mut results = Vec::new();
    for f in &fixtures {
        results.extend(check_cbf_fixture(f, QuadratureSpec::default())?);
    }
    let f = &fixtures[0];
    let gap = mc3_frequency_gap(&f.dataset, &f.z, f.sigma, &f.prior(), MC3_CHECK_STEPS, 17)?;
    results.push(CheckResult::new(
        format!("{}: MC3 visit frequencies vs enumeration (max abs)", f.name),
        gap,
        MC3_FREQUENCY_ATOL,
    ));
    Ok(results)
}
