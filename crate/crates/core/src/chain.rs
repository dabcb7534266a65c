//! The sampling loop and its post-processing.
//!
//! One sweep updates, in order: latent `z`, `gamma`, `phi`, the model (one or
//! more MC3 proposals at fixed `z` and `Sigma`), then `psi` from the
//! coefficient posterior of the retained model.

use std::thread;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::conditionals::{
    draw_gamma, draw_phi, draw_psi, sample_latent, sample_latent_with, ConditionalMoments,
    GammaPosterior, LinearPredictors, PhiPosterior, ResidualSums,
};
use crate::error::{Result, TbmaError};
use crate::model::{CoefVector, Equation, ModelIndicator, PriorSpec, SigmaParams, TobitDataset};
use crate::search::{mc3_move, ModelPrior};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStrategy {
    /// Model from the model prior; `psi`, `gamma`, `phi` from their priors.
    PriorDraw,
    /// Model from the model prior; `psi = 0`, `gamma = 0`, `phi = 1`.
    ZeroCoefficients,
    /// Every covariate included; `psi = 0`, `gamma = 0`, `phi = 1`.
    FullModel,
    /// Forced covariates only; `psi = 0`, `gamma = 0`, `phi = 1`.
    NullModel,
}

impl InitStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prior-draw" => Ok(InitStrategy::PriorDraw),
            "zero-coefficients" => Ok(InitStrategy::ZeroCoefficients),
            "full-model" => Ok(InitStrategy::FullModel),
            "null-model" => Ok(InitStrategy::NullModel),
            other => Err(TbmaError::Config(format!("unknown init strategy `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InitStrategy::PriorDraw => "prior-draw",
            InitStrategy::ZeroCoefficients => "zero-coefficients",
            InitStrategy::FullModel => "full-model",
            InitStrategy::NullModel => "null-model",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub chains: usize,
    pub thin: usize,
    /// MC3 proposals per sweep.
    pub inner_moves: usize,
    pub init: InitStrategy,
    /// Keep (flagged) burn-in records so diagnostics can start at sweep 1.
    pub retain_burn_in: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 100_000,
            burn_in: 10_000,
            seed: 0,
            chains: 2,
            thin: 1,
            inner_moves: 1,
            init: InitStrategy::NullModel,
            retain_burn_in: true,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(TbmaError::Config(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 || self.chains == 0 || self.inner_moves == 0 {
            return Err(TbmaError::Config(
                "thin, chains and inner_moves must all be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Number of post-burn-in records a chain stores.
    pub fn stored_count(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    fn keeps(&self, sweep: usize) -> bool {
        let offset = sweep as i64 - self.burn_in as i64;
        if offset.rem_euclid(self.thin as i64) != 0 {
            return false;
        }
        offset > 0 || self.retain_burn_in
    }

    fn fingerprint(&self) -> String {
        let canonical = format!(
            "iterations={};burn_in={};seed={};thin={};inner_moves={};init={};retain_burn_in={}",
            self.iterations,
            self.burn_in,
            self.seed,
            self.thin,
            self.inner_moves,
            self.init.as_str(),
            self.retain_burn_in
        );
        hex_digest(canonical.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// SHA-256 prefix over the dataset contents, names and forced masks.
pub fn dataset_fingerprint(dataset: &TobitDataset) -> String {
    let mut h = Sha256::new();
    h.update((dataset.n() as u64).to_le_bytes());
    h.update((dataset.p() as u64).to_le_bytes());
    h.update((dataset.q() as u64).to_le_bytes());
    for v in dataset.w().iter().chain(dataset.x().iter()).chain(dataset.y().iter()) {
        h.update(v.to_le_bytes());
    }
    for &c in dataset.censored().iter().chain(dataset.forced_w()).chain(dataset.forced_x()) {
        h.update([c as u8]);
    }
    for name in dataset.names_w().iter().chain(dataset.names_x()) {
        h.update(name.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Deterministic per-chain generator: one ChaCha stream per chain id.
pub fn chain_rng(seed: u64, chain_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain_id);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub z: DVector<f64>,
    pub psi: CoefVector,
    pub sigma: SigmaParams,
    pub model: ModelIndicator,
    pub sweep_index: usize,
}

fn draw_from_model_prior<R: Rng + ?Sized>(
    dataset: &TobitDataset,
    model_prior: ModelPrior,
    rng: &mut R,
) -> Result<ModelIndicator> {
    let pi = match model_prior {
        ModelPrior::Flat => 0.5,
        ModelPrior::Bernoulli(pi) => pi,
    };
    let mut model = dataset.null_model();
    for k in model.free_positions() {
        if rng.random::<f64>() < pi {
            model = model.toggled(k)?;
        }
    }
    Ok(model)
}

/// Starting state; `z` is drawn from its full conditional given the start.
pub fn initial_state<R: Rng + ?Sized>(
    dataset: &TobitDataset,
    prior: &PriorSpec,
    init: InitStrategy,
    rng: &mut R,
) -> Result<ChainState> {
    let (p, q) = (dataset.p(), dataset.q());
    let unit = SigmaParams { gamma: 0.0, phi: 1.0 };
    let (model, psi, sigma) = match init {
        InitStrategy::NullModel => (dataset.null_model(), CoefVector::zeros(p, q), unit),
        InitStrategy::FullModel => (dataset.full_model(), CoefVector::zeros(p, q), unit),
        InitStrategy::ZeroCoefficients => (
            draw_from_model_prior(dataset, prior.model_prior, rng)?,
            CoefVector::zeros(p, q),
            unit,
        ),
        InitStrategy::PriorDraw => {
            let model = draw_from_model_prior(dataset, prior.model_prior, rng)?;
            let chol = prior.stacked_cov().cholesky().ok_or_else(|| {
                TbmaError::InvalidParameter("prior covariance is not positive definite".into())
            })?;
            let eps = DVector::from_fn(p + q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut stacked = prior.stacked_mean() + chol.l() * eps;
            for k in 0..p + q {
                if !model.bit(k) {
                    stacked[k] = 0.0;
                }
            }
            let gamma = draw_gamma(
                &GammaPosterior {
                    mean: prior.gamma0,
                    var: prior.gamma_var,
                },
                rng,
            );
            let phi = draw_phi(
                &PhiPosterior {
                    s1: prior.s0,
                    big_s1: prior.big_s0,
                },
                rng,
            )?;
            (model, CoefVector::from_stacked(&stacked, p), SigmaParams { gamma, phi })
        }
    };
    let z = sample_latent(dataset, &psi, sigma, rng)?;
    Ok(ChainState {
        z,
        psi,
        sigma,
        model,
        sweep_index: 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepStep {
    Latent,
    Gamma,
    Phi,
    ModelMove,
    Psi,
}

/// Hook into the sweep. Observers see the state but never touch the generator.
pub trait SweepObserver {
    fn on_step(&mut self, _sweep: usize, _step: SweepStep) {}
    fn on_sweep(&mut self, _state: &ChainState, _accepted: bool) {}
}

impl SweepObserver for () {}

/// One full sweep. Returns whether any model move was accepted.
pub fn gibbs_sweep<R: Rng + ?Sized, O: SweepObserver + ?Sized>(
    dataset: &TobitDataset,
    prior: &PriorSpec,
    state: &mut ChainState,
    inner_moves: usize,
    rng: &mut R,
    observer: &mut O,
) -> Result<bool> {
    let sweep = state.sweep_index + 1;
    let lp = LinearPredictors::new(dataset, &state.psi)?;

    state.z = sample_latent_with(dataset, &lp, state.sigma, rng)?;
    observer.on_step(sweep, SweepStep::Latent);

    let sums = ResidualSums::new(dataset, &state.z, &lp);
    state.sigma.gamma = draw_gamma(&sums.gamma_posterior(state.sigma.phi, prior), rng);
    observer.on_step(sweep, SweepStep::Gamma);

    state.sigma.phi = draw_phi(
        &sums.phi_posterior(state.sigma.gamma, dataset.n_uncensored(), prior),
        rng,
    )?;
    observer.on_step(sweep, SweepStep::Phi);

    let moments = ConditionalMoments::new(dataset, &state.z, state.sigma)?;
    let mut model = state.model.clone();
    let mut current = moments.log_marginal(&model, prior)?;
    let mut accepted = false;
    for _ in 0..inner_moves {
        let (m, c, a) = mc3_move(&moments, model, current, prior, prior.model_prior, rng)?;
        model = m;
        current = c;
        accepted |= a;
        observer.on_step(sweep, SweepStep::ModelMove);
    }
    state.model = model;

    state.psi = draw_psi(&current.psi_posterior, rng);
    observer.on_step(sweep, SweepStep::Psi);

    state.sweep_index = sweep;
    observer.on_sweep(state, accepted);
    Ok(accepted)
}

/// Columnar record of one chain. Row `r` of `inclusion` and `coefs` spans
/// `p + q` entries in stacked `(selection, outcome)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutput {
    pub chain_id: u64,
    pub names_w: Vec<String>,
    pub names_x: Vec<String>,
    pub forced_w: Vec<bool>,
    pub forced_x: Vec<bool>,
    pub sweeps: Vec<usize>,
    pub burn_in: Vec<bool>,
    pub accepted: Vec<bool>,
    pub gamma: Vec<f64>,
    pub phi: Vec<f64>,
    pub inclusion: Vec<bool>,
    pub coefs: Vec<f64>,
    pub dataset_fingerprint: String,
    pub config_fingerprint: String,
}

impl ChainOutput {
    pub fn empty(dataset: &TobitDataset, chain_id: u64) -> Self {
        ChainOutput {
            chain_id,
            names_w: dataset.names_w().to_vec(),
            names_x: dataset.names_x().to_vec(),
            forced_w: dataset.forced_w().to_vec(),
            forced_x: dataset.forced_x().to_vec(),
            sweeps: Vec::new(),
            burn_in: Vec::new(),
            accepted: Vec::new(),
            gamma: Vec::new(),
            phi: Vec::new(),
            inclusion: Vec::new(),
            coefs: Vec::new(),
            dataset_fingerprint: dataset_fingerprint(dataset),
            config_fingerprint: String::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.names_w.len()
    }

    pub fn q(&self) -> usize {
        self.names_x.len()
    }

    pub fn width(&self) -> usize {
        self.p() + self.q()
    }

    /// Records held, burn-in included.
    pub fn len(&self) -> usize {
        self.sweeps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sweeps.is_empty()
    }

    pub fn push(&mut self, sweep: usize, burn_in: bool, accepted: bool, state: &ChainState) {
        self.sweeps.push(sweep);
        self.burn_in.push(burn_in);
        self.accepted.push(accepted);
        self.gamma.push(state.sigma.gamma);
        self.phi.push(state.sigma.phi);
        let m = &state.model;
        self.inclusion.extend((0..m.p() + m.q()).map(|k| m.bit(k)));
        self.coefs.extend(state.psi.theta.iter().chain(state.psi.beta.iter()));
    }

    pub fn inclusion_row(&self, r: usize) -> &[bool] {
        let w = self.width();
        &self.inclusion[r * w..(r + 1) * w]
    }

    pub fn coef_row(&self, r: usize) -> &[f64] {
        let w = self.width();
        &self.coefs[r * w..(r + 1) * w]
    }

    /// Indices of post-burn-in records.
    pub fn stored(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&r| !self.burn_in[r])
    }

    pub fn stored_count(&self) -> usize {
        self.burn_in.iter().filter(|&&b| !b).count()
    }

    pub fn model_size(&self, r: usize, equation: Equation) -> usize {
        let row = self.inclusion_row(r);
        let range = match equation {
            Equation::Selection => &row[..self.p()],
            Equation::Outcome => &row[self.p()..],
        };
        range.iter().filter(|&&b| b).count()
    }

    /// Covariate label and equation of stacked position `k`.
    pub fn column(&self, k: usize) -> (&str, Equation) {
        if k < self.p() {
            (&self.names_w[k], Equation::Selection)
        } else {
            (&self.names_x[k - self.p()], Equation::Outcome)
        }
    }
}

pub fn run_chain(
    dataset: &TobitDataset,
    prior: &PriorSpec,
    config: &ChainConfig,
    chain_id: u64,
) -> Result<ChainOutput> {
    run_chain_observed(dataset, prior, config, chain_id, &mut ())
}

pub fn run_chain_observed<O: SweepObserver + ?Sized>(
    dataset: &TobitDataset,
    prior: &PriorSpec,
    config: &ChainConfig,
    chain_id: u64,
    observer: &mut O,
) -> Result<ChainOutput> {
    config.validate()?;
    prior.validate()?;
    prior.check_dims(dataset)?;
    let fail = |sweep: usize, e: TbmaError| TbmaError::ChainFailed {
        chain: chain_id,
        sweep,
        source: Box::new(e),
    };

    let mut rng = chain_rng(config.seed, chain_id);
    let mut state = initial_state(dataset, prior, config.init, &mut rng).map_err(|e| fail(0, e))?;
    let mut out = ChainOutput::empty(dataset, chain_id);
    out.config_fingerprint = config.fingerprint();
    for sweep in 1..=config.iterations {
        let accepted = gibbs_sweep(dataset, prior, &mut state, config.inner_moves, &mut rng, observer)
            .map_err(|e| fail(sweep, e))?;
        if config.keeps(sweep) {
            out.push(sweep, sweep <= config.burn_in, accepted, &state);
        }
    }
    Ok(out)
}

/// Runs `config.chains` chains (ids `0..chains`) on scoped threads.
pub fn run_chains(
    dataset: &TobitDataset,
    prior: &PriorSpec,
    config: &ChainConfig,
) -> Result<Vec<ChainOutput>> {
    config.validate()?;
    thread::scope(|s| {
        let handles: Vec<_> = (0..config.chains as u64)
            .map(|id| s.spawn(move || run_chain(dataset, prior, config, id)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    })
}

fn check_pool(outputs: &[ChainOutput]) -> Result<&ChainOutput> {
    let first = outputs.first().ok_or(TbmaError::EmptyChain)?;
    for o in outputs {
        if o.names_w != first.names_w || o.names_x != first.names_x {
            return Err(TbmaError::InvalidParameter(
                "pooled chains were run on different covariate sets".into(),
            ));
        }
    }
    if outputs.iter().all(|o| o.stored_count() == 0) {
        return Err(TbmaError::EmptyChain);
    }
    Ok(first)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InclusionProbabilities {
    pub selection: Vec<f64>,
    pub outcome: Vec<f64>,
}

/// Fraction of post-burn-in records including each covariate, pooled over chains.
pub fn inclusion_probabilities(outputs: &[ChainOutput]) -> Result<InclusionProbabilities> {
    let first = check_pool(outputs)?;
    let (p, width) = (first.p(), first.width());
    let mut counts = vec![0usize; width];
    let mut total = 0usize;
    for o in outputs {
        for r in o.stored() {
            total += 1;
            for (c, &b) in counts.iter_mut().zip(o.inclusion_row(r)) {
                *c += b as usize;
            }
        }
    }
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(InclusionProbabilities {
        selection: probs[..p].to_vec(),
        outcome: probs[p..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub covariate: String,
    pub equation: Equation,
    pub incl_prob: f64,
    /// Model-averaged mean; excluded sweeps count as 0.
    pub post_mean: f64,
    pub post_sd: f64,
    /// Mean over sweeps that include the covariate; `None` if it never was.
    pub cond_mean: Option<f64>,
    /// `None` when fewer than two sweeps include the covariate.
    pub cond_sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub rows: Vec<SummaryRow>,
    pub samples: usize,
    pub jump_rate: f64,
}

fn sample_sd(sum_sq_dev: f64, n: usize) -> Option<f64> {
    (n >= 2).then(|| (sum_sq_dev / (n - 1) as f64).sqrt())
}

/// Table of inclusion probabilities and model-averaged moments, ordered by
/// descending outcome-equation inclusion probability of each covariate name.
pub fn posterior_summaries(outputs: &[ChainOutput]) -> Result<PosteriorSummary> {
    let first = check_pool(outputs)?;
    let width = first.width();
    let rows_of = || outputs.iter().flat_map(|o| o.stored().map(move |r| (o, r)));
    let total = rows_of().count();

    let mut sum = vec![0.0; width];
    let mut included = vec![0usize; width];
    for (o, r) in rows_of() {
        for (k, (&c, &b)) in o.coef_row(r).iter().zip(o.inclusion_row(r)).enumerate() {
            sum[k] += c;
            included[k] += b as usize;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / total as f64).collect();
    let cond_mean: Vec<Option<f64>> = (0..width)
        .map(|k| (included[k] > 0).then(|| sum[k] / included[k] as f64))
        .collect();

    let mut sq = vec![0.0; width];
    let mut cond_sq = vec![0.0; width];
    for (o, r) in rows_of() {
        for (k, (&c, &b)) in o.coef_row(r).iter().zip(o.inclusion_row(r)).enumerate() {
            sq[k] += (c - mean[k]).powi(2);
            if let (true, Some(m)) = (b, cond_mean[k]) {
                cond_sq[k] += (c - m).powi(2);
            }
        }
    }

    let rows: Vec<SummaryRow> = (0..width)
        .map(|k| {
            let (name, equation) = first.column(k);
            SummaryRow {
                covariate: name.to_string(),
                equation,
                incl_prob: included[k] as f64 / total as f64,
                post_mean: mean[k],
                post_sd: sample_sd(sq[k], total).unwrap_or(0.0),
                cond_mean: cond_mean[k],
                cond_sd: sample_sd(cond_sq[k], included[k]),
            }
        })
        .collect();

    let outcome_prob = |name: &str| {
        rows.iter()
            .find(|r| r.equation == Equation::Outcome && r.covariate == name)
            .map(|r| r.incl_prob)
    };
    let keys: Vec<f64> = rows
        .iter()
        .map(|r| outcome_prob(&r.covariate).unwrap_or(r.incl_prob))
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        keys[b]
            .total_cmp(&keys[a])
            .then(rows[b].equation.cmp(&rows[a].equation))
    });
    let sorted = order.into_iter().map(|i| rows[i].clone()).collect();

    Ok(PosteriorSummary {
        rows: sorted,
        samples: total,
        jump_rate: jump_rate(outputs)?,
    })
}

/// Fraction of post-burn-in sweeps whose model move was accepted.
pub fn jump_rate(outputs: &[ChainOutput]) -> Result<f64> {
    check_pool(outputs)?;
    let (mut jumps, mut total) = (0usize, 0usize);
    for o in outputs {
        for r in o.stored() {
            total += 1;
            jumps += o.accepted[r] as usize;
        }
    }
    Ok(jumps as f64 / total as f64)
}

fn cumulative_mean(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            acc / (i + 1) as f64
        })
        .collect()
}

/// Running average of the number of included covariates, over every record
/// held (burn-in included when retained).
pub fn running_model_size(output: &ChainOutput, equation: Equation) -> Result<Vec<f64>> {
    if output.is_empty() {
        return Err(TbmaError::EmptyChain);
    }
    Ok(cumulative_mean(
        (0..output.len()).map(|r| output.model_size(r, equation) as f64),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticSeries {
    pub sweep: Vec<usize>,
    pub running_size_selection: Vec<f64>,
    pub running_size_outcome: Vec<f64>,
    pub cumulative_jump_rate: Vec<f64>,
}

pub fn diagnostic_series(output: &ChainOutput) -> Result<DiagnosticSeries> {
    Ok(DiagnosticSeries {
        sweep: output.sweeps.clone(),
        running_size_selection: running_model_size(output, Equation::Selection)?,
        running_size_outcome: running_model_size(output, Equation::Outcome)?,
        cumulative_jump_rate: cumulative_mean(output.accepted.iter().map(|&a| a as u8 as f64)),
    })
}
