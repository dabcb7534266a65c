//! Model moves nested in the Gibbs sweep.
//!
//! With `Sigma` held at its current draw the coefficients integrate out in
//! closed form:
//!
//! ```text
//! log pr(D | M, Sigma) = 1/2 log|Psi1_M| - 1/2 log|Psi0_M|
//!                        - 1/2 psi0_M' Psi0_M^{-1} psi0_M
//!                        + 1/2 psi1_M' Psi1_M^{-1} psi1_M  + const
//! ```
//!
//! where the constant depends on `(z, Sigma, data)` only. Differences between
//! models are therefore exact log conditional Bayes factors, and MC3 with a
//! symmetric single-toggle proposal accepts with `min(1, CBF * prior odds)`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::Open01;

use crate::conditionals::{ConditionalMoments, PsiPosterior};
use crate::error::{Result, TbmaError};
use crate::model::{augmented_design, ModelIndicator, PriorSpec, SigmaParams, TobitDataset};

/// Prior over the model space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelPrior {
    /// `pr(M)` constant.
    Flat,
    /// Each non-forced covariate included independently with this probability.
    Bernoulli(f64),
}

impl ModelPrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelPrior::Flat => Ok(()),
            ModelPrior::Bernoulli(pi) if pi > 0.0 && pi < 1.0 => Ok(()),
            ModelPrior::Bernoulli(pi) => Err(TbmaError::InvalidParameter(format!(
                "Bernoulli inclusion probability must lie in (0, 1), got {pi}"
            ))),
        }
    }

    /// Unnormalized log prior; forced bits contribute nothing.
    pub fn log_prior(&self, model: &ModelIndicator) -> f64 {
        match *self {
            ModelPrior::Flat => 0.0,
            ModelPrior::Bernoulli(pi) => {
                let free = model.free_positions();
                let k = free.iter().filter(|&&b| model.bit(b)).count() as f64;
                k * pi.ln() + (free.len() as f64 - k) * (1.0 - pi).ln()
            }
        }
    }

    /// `log pr(to) - log pr(from)`.
    pub fn log_prior_ratio(&self, from: &ModelIndicator, to: &ModelIndicator) -> f64 {
        match *self {
            ModelPrior::Flat => 0.0,
            ModelPrior::Bernoulli(pi) => {
                let added = to.free_included() as f64 - from.free_included() as f64;
                added * (pi / (1.0 - pi)).ln()
            }
        }
    }
}

/// Conditional log marginal of one model, with the coefficient posterior it produced.
#[derive(Clone, Debug)]
pub struct CbfResult {
    pub log_conditional_marginal: f64,
    pub psi_posterior: PsiPosterior,
}

impl ConditionalMoments {
    pub fn log_marginal(&self, model: &ModelIndicator, prior: &PriorSpec) -> Result<CbfResult> {
        let a = self.assemble(model, prior)?;
        let value = 0.5 * a.posterior.log_det_cov() - 0.5 * a.prior_log_det - 0.5 * a.prior_quad
            + 0.5 * a.posterior_quad;
        if !value.is_finite() {
            return Err(TbmaError::Numerical(format!(
                "conditional log marginal is {value} for model {}",
                model.bit_string()
            )));
        }
        Ok(CbfResult {
            log_conditional_marginal: value,
            psi_posterior: a.posterior,
        })
    }
}

/// Log integrated likelihood of `model` at fixed `(z, Sigma)`, up to a
/// model-independent constant.
pub fn conditional_log_marginal(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    model: &ModelIndicator,
    sp: SigmaParams,
    prior: &PriorSpec,
) -> Result<CbfResult> {
    ConditionalMoments::new(dataset, z, sp)?.log_marginal(model, prior)
}

/// The same quantity written as a penalized residual sum of squares of the
/// decorrelated equations at the posterior mean:
///
/// ```text
/// 1/2 log|Psi1| - 1/2 log|Psi0|
///   - 1/2 [ sum_cens r'r + sum_uncens r' Sigma^{-1} r + (psi0 - psi1)' Psi0^{-1} (psi0 - psi1) ]
/// ```
///
/// with `r = y~ - X~ psi1`. It differs from [`conditional_log_marginal`] by a
/// model-independent constant, so log Bayes factors from the two agree.
/// Residuals are accumulated row by row from the augmented design.
pub fn rss_form_log_marginal(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    model: &ModelIndicator,
    sp: SigmaParams,
    prior: &PriorSpec,
) -> Result<f64> {
    let post = conditional_log_marginal(dataset, z, model, sp, prior)?.psi_posterior;
    let active = model.active_indices();
    let sigma_inv = sp.precision();

    let mut rss = 0.0;
    for i in 0..dataset.n() {
        let (y_tilde, design) = augmented_design(dataset, i, model, z[i]);
        let r = if active.is_empty() {
            y_tilde
        } else {
            let fitted = &design * post.mean();
            y_tilde - nalgebra::Vector2::new(fitted[0], fitted[1])
        };
        rss += if dataset.censored()[i] {
            r.dot(&r)
        } else {
            (r.transpose() * sigma_inv * r)[0]
        };
    }

    if active.is_empty() {
        return Ok(-0.5 * rss);
    }
    let prior_mean = prior.stacked_mean().select_rows(&active);
    let full_cov = prior.stacked_cov();
    let prior_cov = nalgebra::DMatrix::from_fn(active.len(), active.len(), |r, c| {
        full_cov[(active[r], active[c])]
    });
    let lu = prior_cov.clone().lu();
    let diff = &prior_mean - post.mean();
    let penalty = diff.dot(
        &lu.solve(&diff)
            .ok_or_else(|| TbmaError::Numerical("singular prior covariance".into()))?,
    );
    let prior_log_det = lu.determinant().ln();
    Ok(0.5 * post.log_det_cov() - 0.5 * prior_log_det - 0.5 * (rss + penalty))
}

/// Metropolis acceptance probability for a log target ratio.
pub fn acceptance_probability(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

/// Toggles one non-forced bit chosen uniformly over both equations.
pub fn propose_neighbor<R: Rng + ?Sized>(model: &ModelIndicator, rng: &mut R) -> Result<ModelIndicator> {
    let free = model.free_positions();
    if free.is_empty() {
        return Err(TbmaError::NoMoveAvailable);
    }
    let k = free[rng.random_range(0..free.len())];
    model.toggled(k)
}

#[derive(Clone, Debug)]
pub struct Mc3Outcome {
    pub model: ModelIndicator,
    pub accepted: bool,
    pub psi_posterior: PsiPosterior,
    /// Conditional log marginal of the retained model.
    pub log_conditional_marginal: f64,
}

/// One proposal against `current`, whose evaluation is reused.
pub(crate) fn mc3_move<R: Rng + ?Sized>(
    moments: &ConditionalMoments,
    current_model: ModelIndicator,
    current: CbfResult,
    prior: &PriorSpec,
    model_prior: ModelPrior,
    rng: &mut R,
) -> Result<(ModelIndicator, CbfResult, bool)> {
    let proposal = match propose_neighbor(&current_model, rng) {
        Ok(m) => m,
        Err(TbmaError::NoMoveAvailable) => return Ok((current_model, current, false)),
        Err(e) => return Err(e),
    };
    let candidate = moments.log_marginal(&proposal, prior)?;
    let log_ratio = candidate.log_conditional_marginal - current.log_conditional_marginal
        + model_prior.log_prior_ratio(&current_model, &proposal);
    let u: f64 = rng.sample(Open01);
    if u < acceptance_probability(log_ratio) {
        Ok((proposal, candidate, true))
    } else {
        Ok((current_model, current, false))
    }
}

/// `moves` successive MC3 proposals at fixed `(z, Sigma)`.
pub fn mc3_steps<R: Rng + ?Sized>(
    moments: &ConditionalMoments,
    model: &ModelIndicator,
    prior: &PriorSpec,
    model_prior: ModelPrior,
    moves: usize,
    rng: &mut R,
) -> Result<Mc3Outcome> {
    let mut current_model = model.clone();
    let mut current = moments.log_marginal(model, prior)?;
    let mut accepted = false;
    for _ in 0..moves {
        let (m, c, a) = mc3_move(moments, current_model, current, prior, model_prior, rng)?;
        current_model = m;
        current = c;
        accepted |= a;
    }
    Ok(Mc3Outcome {
        model: current_model,
        accepted,
        log_conditional_marginal: current.log_conditional_marginal,
        psi_posterior: current.psi_posterior,
    })
}

/// A single MC3 proposal and accept/reject. If every bit is forced the input
/// model is returned unchanged with `accepted = false`.
pub fn mc3_step<R: Rng + ?Sized>(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    model: &ModelIndicator,
    sp: SigmaParams,
    prior: &PriorSpec,
    model_prior: ModelPrior,
    rng: &mut R,
) -> Result<Mc3Outcome> {
    let moments = ConditionalMoments::new(dataset, z, sp)?;
    mc3_steps(&moments, model, prior, model_prior, 1, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (TobitDataset, DVector<f64>, SigmaParams, PriorSpec) {
        let n = 8;
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.6).collect();
        let x: Vec<f64> = (0..n).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.4).collect();
        let cens: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let y: Vec<f64> = (0..n).map(|i| 0.5 + 0.8 * x[i] + 0.1 * i as f64).collect();
        let z = DVector::from_iterator(n, (0..n).map(|i| if cens[i] { -0.3 - 0.1 * i as f64 } else { 0.2 + 0.15 * i as f64 }));
        let mut wm = DMatrix::from_element(n, 2, 1.0);
        let mut xm = DMatrix::from_element(n, 2, 1.0);
        for i in 0..n {
            wm[(i, 1)] = w[i];
            xm[(i, 1)] = x[i];
        }
        let ds = TobitDataset::new(
            wm,
            xm,
            DVector::from_vec(y),
            cens,
            vec!["c".into(), "w".into()],
            vec!["c".into(), "x".into()],
        )
        .unwrap();
        (ds, z, SigmaParams { gamma: 0.4, phi: 0.9 }, PriorSpec::isotropic(2, 2, 2.0))
    }

    fn all_models(p: usize, q: usize) -> Vec<ModelIndicator> {
        (0..1u32 << (p + q))
            .map(|mask| {
                let bits: Vec<bool> = (0..p + q).map(|k| mask >> k & 1 == 1).collect();
                ModelIndicator::unforced(bits[..p].to_vec(), bits[p..].to_vec())
            })
            .collect()
    }

    #[test]
    fn self_bayes_factor_is_one() {
        let (ds, z, sp, prior) = fixture();
        for m in all_models(2, 2) {
            let a = conditional_log_marginal(&ds, &z, &m, sp, &prior).unwrap();
            let b = conditional_log_marginal(&ds, &z, &m, sp, &prior).unwrap();
            assert_eq!((a.log_conditional_marginal - b.log_conditional_marginal).exp(), 1.0);
        }
    }

    #[test]
    fn rss_form_matches_determinant_form() {
        let (ds, z, sp, prior) = fixture();
        let models = all_models(2, 2);
        let base = &models[0];
        let det0 = conditional_log_marginal(&ds, &z, base, sp, &prior).unwrap().log_conditional_marginal;
        let rss0 = rss_form_log_marginal(&ds, &z, base, sp, &prior).unwrap();
        for m in &models {
            let det = conditional_log_marginal(&ds, &z, m, sp, &prior).unwrap().log_conditional_marginal;
            let rss = rss_form_log_marginal(&ds, &z, m, sp, &prior).unwrap();
            assert!(((det - det0) - (rss - rss0)).abs() < 1e-9, "model {}", m.bit_string());
        }
    }

    #[test]
    fn cbf_posterior_is_identical_to_direct_call() {
        let (ds, z, sp, prior) = fixture();
        let m = ModelIndicator::unforced(vec![true, false], vec![true, true]);
        let cbf = conditional_log_marginal(&ds, &z, &m, sp, &prior).unwrap();
        let direct = crate::conditionals::psi_posterior_params(&ds, &z, &m, sp, &prior).unwrap();
        assert_eq!(cbf.psi_posterior, direct);
    }

    #[test]
    fn empty_model_is_finite() {
        let (ds, z, sp, prior) = fixture();
        let empty = ModelIndicator::unforced(vec![false; 2], vec![false; 2]);
        let r = conditional_log_marginal(&ds, &z, &empty, sp, &prior).unwrap();
        assert_eq!(r.log_conditional_marginal, 0.0);
        assert_eq!(r.psi_posterior.dim(), 0);
    }

    #[test]
    fn proposal_flips_exactly_one_free_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ModelIndicator::new(
            vec![true, false, true],
            vec![true, true],
            vec![true, false, false],
            vec![false, false],
        )
        .unwrap();
        for _ in 0..1000 {
            let next = propose_neighbor(&m, &mut rng).unwrap();
            let hamming = (0..5).filter(|&k| next.bit(k) != m.bit(k)).count();
            assert_eq!(hamming, 1);
            assert!(next.bit(0));
        }
    }

    #[test]
    fn proposal_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = ModelIndicator::new(
            vec![true, false, true, false, false, true, true],
            vec![true, true, false, false, true, false, true],
            vec![true, false, false, false, false, false, false],
            vec![true, false, false, false, false, false, false],
        )
        .unwrap();
        let free = m.free_positions();
        assert_eq!(free.len(), 12);
        let draws = 100_000;
        let mut counts = [0usize; 14];
        for _ in 0..draws {
            let next = propose_neighbor(&m, &mut rng).unwrap();
            let k = (0..14).find(|&k| next.bit(k) != m.bit(k)).unwrap();
            counts[k] += 1;
        }
        let expected = draws as f64 / 12.0;
        let mut chi2 = 0.0;
        for &k in &free {
            let freq = counts[k] as f64 / draws as f64;
            assert!((freq - 1.0 / 12.0).abs() < 0.01);
            chi2 += (counts[k] as f64 - expected).powi(2) / expected;
        }
        // 11 degrees of freedom, upper 0.001 quantile
        assert!(chi2 < 31.26, "chi2 {chi2}");
    }

    #[test]
    fn all_forced_has_no_move() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ModelIndicator::new(vec![true], vec![true], vec![true], vec![true]).unwrap();
        assert!(matches!(propose_neighbor(&m, &mut rng), Err(TbmaError::NoMoveAvailable)));
        let (ds, z, sp, prior) = fixture();
        let m = ModelIndicator::new(vec![true; 2], vec![true; 2], vec![true; 2], vec![true; 2]).unwrap();
        let out = mc3_step(&ds, &z, &m, sp, &prior, ModelPrior::Flat, &mut rng).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.model, m);
    }

    #[test]
    fn favourable_move_always_accepted() {
        assert_eq!(acceptance_probability(0.0), 1.0);
        assert_eq!(acceptance_probability(3.5), 1.0);
        assert!((acceptance_probability(-1.0) - (-1.0f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn half_bernoulli_prior_matches_flat() {
        let (ds, z, sp, prior) = fixture();
        let moments = ConditionalMoments::new(&ds, &z, sp).unwrap();
        let start = ModelIndicator::unforced(vec![true, false], vec![false, true]);
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let mut m1 = start.clone();
        let mut m2 = start;
        for _ in 0..2000 {
            let a = mc3_steps(&moments, &m1, &prior, ModelPrior::Flat, 1, &mut r1).unwrap();
            let b = mc3_steps(&moments, &m2, &prior, ModelPrior::Bernoulli(0.5), 1, &mut r2).unwrap();
            assert_eq!(a.accepted, b.accepted);
            m1 = a.model;
            m2 = b.model;
            assert_eq!(m1, m2);
        }
    }

    #[test]
    fn bernoulli_prior_ratio() {
        let prior = ModelPrior::Bernoulli(0.2);
        let a = ModelIndicator::unforced(vec![false, false], vec![true]);
        let b = a.toggled(0).unwrap();
        let expected = (0.2f64 / 0.8).ln();
        assert!((prior.log_prior_ratio(&a, &b) - expected).abs() < 1e-15);
        assert!((prior.log_prior(&b) - prior.log_prior(&a) - expected).abs() < 1e-12);
        assert!(ModelPrior::Bernoulli(1.0).validate().is_err());
    }

    #[test]
    fn shift_invariance_of_acceptance() {
        for (a, b) in [(-3.0, -4.5), (10.0, 9.0), (0.0, 2.0)] {
            for shift in [-1e3, 0.5, 250.0] {
                let p1 = acceptance_probability(b - a);
                let p2 = acceptance_probability((b + shift) - (a + shift));
                assert!((p1 - p2).abs() < 1e-12);
            }
        }
    }
}
