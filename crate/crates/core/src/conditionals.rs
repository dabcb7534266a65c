//! Full conditional distributions of the Gibbs sweep.
//!
//! Latent `z_i` are truncated normals; `psi = (theta', beta')'` is multivariate
//! normal on the active set of the current model; `gamma` is normal and `phi`
//! inverse gamma. The coefficient posterior is assembled from cached Gram
//! blocks so a sweep costs `O(n (p + q))` plus `O(d^3)` per model evaluated.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Open01, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Result, TbmaError};
use crate::model::{CoefVector, ModelIndicator, PriorSpec, SigmaParams, TobitDataset};

/// Standardized truncation depth beyond which the exponential rejection
/// sampler replaces the inverse CDF.
const TAIL_SWITCH: f64 = 5.0;

/// Attempts before giving up on a sign-consistent draw and returning the boundary.
const MAX_SIGN_RETRIES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TruncationSide {
    /// Support `(-inf, 0)`.
    Negative,
    /// Support `[0, inf)`.
    NonNegative,
}

impl TruncationSide {
    pub fn admits(self, v: f64) -> bool {
        match self {
            TruncationSide::Negative => v < 0.0,
            TruncationSide::NonNegative => v >= 0.0,
        }
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Standard normal conditioned on `x > a` for large `a`, using an
/// exponential proposal with the optimal rate.
fn std_tail_above<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let x = a + exp.sample(rng);
        let u: f64 = rng.sample(Open01);
        if u.ln() <= -0.5 * (x - rate) * (x - rate) {
            return x;
        }
    }
}

/// Standard normal conditioned on `x < b`.
fn std_below<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    if b < -TAIL_SWITCH {
        return -std_tail_above(-b, rng);
    }
    let mass = std_normal_cdf(b);
    loop {
        let u: f64 = rng.sample(Open01);
        let x = std_normal_quantile(u * mass);
        if x < b {
            return x;
        }
    }
}

/// One draw from `N(mu, var)` restricted to the given side of zero.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mu: f64,
    var: f64,
    side: TruncationSide,
    rng: &mut R,
) -> Result<f64> {
    if var <= 0.0 || !var.is_finite() || !mu.is_finite() {
        return Err(TbmaError::InvalidParameter(format!(
            "truncated normal needs finite mu and var > 0, got mu={mu}, var={var}"
        )));
    }
    let sd = var.sqrt();
    let bound = -mu / sd;
    for _ in 0..MAX_SIGN_RETRIES {
        let v = match side {
            TruncationSide::Negative => mu + sd * std_below(bound, rng),
            TruncationSide::NonNegative => mu - sd * std_below(-bound, rng),
        };
        if side.admits(v) {
            return Ok(v);
        }
    }
    // Only reachable when |mu| / sd is so large that mu + sd * x rounds across zero.
    Ok(match side {
        TruncationSide::Negative => -f64::MIN_POSITIVE,
        TruncationSide::NonNegative => 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentParams {
    pub mean: f64,
    pub var: f64,
    pub side: TruncationSide,
}

fn latent_params_from(
    censored: bool,
    wtheta: f64,
    y_resid: f64,
    sp: SigmaParams,
) -> LatentParams {
    if censored {
        LatentParams {
            mean: wtheta,
            var: 1.0,
            side: TruncationSide::Negative,
        }
    } else {
        let denom = sp.phi + sp.gamma * sp.gamma;
        LatentParams {
            mean: wtheta + sp.gamma / denom * y_resid,
            // 1 - g^2/(phi+g^2) written so it stays positive for tiny phi
            var: sp.phi / denom,
            side: TruncationSide::NonNegative,
        }
    }
}

/// Mean, variance and support of `z_i` given everything else.
pub fn latent_conditional_params(
    dataset: &TobitDataset,
    row: usize,
    psi: &CoefVector,
    sp: SigmaParams,
) -> Result<LatentParams> {
    sp.validate()?;
    if row >= dataset.n() {
        return Err(TbmaError::Dimension(format!("row {row} out of range")));
    }
    let wtheta = dataset.w().row(row).transpose().dot(&psi.theta);
    let xbeta = dataset.x().row(row).transpose().dot(&psi.beta);
    Ok(latent_params_from(
        dataset.censored()[row],
        wtheta,
        dataset.y()[row] - xbeta,
        sp,
    ))
}

/// Linear predictors `W theta` and `X beta`, shared by steps that hold `psi` fixed.
#[derive(Clone, Debug)]
pub(crate) struct LinearPredictors {
    pub wtheta: DVector<f64>,
    pub xbeta: DVector<f64>,
}

impl LinearPredictors {
    pub fn new(dataset: &TobitDataset, psi: &CoefVector) -> Result<Self> {
        if psi.theta.len() != dataset.p() || psi.beta.len() != dataset.q() {
            return Err(TbmaError::Dimension("coefficient vector does not match dataset".into()));
        }
        Ok(LinearPredictors {
            wtheta: dataset.w() * &psi.theta,
            xbeta: dataset.x() * &psi.beta,
        })
    }
}

pub(crate) fn sample_latent_with<R: Rng + ?Sized>(
    dataset: &TobitDataset,
    lp: &LinearPredictors,
    sp: SigmaParams,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mut z = DVector::zeros(dataset.n());
    for i in 0..dataset.n() {
        let lat = latent_params_from(
            dataset.censored()[i],
            lp.wtheta[i],
            dataset.y()[i] - lp.xbeta[i],
            sp,
        );
        z[i] = sample_truncated_normal(lat.mean, lat.var, lat.side, rng)?;
    }
    Ok(z)
}

/// Draws the whole latent vector; signs always match the censoring pattern.
pub fn sample_latent<R: Rng + ?Sized>(
    dataset: &TobitDataset,
    psi: &CoefVector,
    sp: SigmaParams,
    rng: &mut R,
) -> Result<DVector<f64>> {
    sp.validate()?;
    let lp = LinearPredictors::new(dataset, psi)?;
    sample_latent_with(dataset, &lp, sp, rng)
}

/// Gaussian conditional of the active coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiPosterior {
    p: usize,
    q: usize,
    active: Vec<usize>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
    chol_precision: DMatrix<f64>,
    log_det_cov: f64,
}

impl PsiPosterior {
    /// Posterior mean `psi1` on the active set.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Posterior covariance `Psi1` on the active set.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// The assembled precision `Psi1^{-1}`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn dim(&self) -> usize {
        self.active.len()
    }

    pub fn log_det_cov(&self) -> f64 {
        self.log_det_cov
    }

    /// Posterior mean embedded into the full `p + q` vector.
    pub fn mean_embedded(&self) -> CoefVector {
        self.embed(&self.mean)
    }

    fn embed(&self, active_values: &DVector<f64>) -> CoefVector {
        let mut full = DVector::zeros(self.p + self.q);
        for (&k, &v) in self.active.iter().zip(active_values.iter()) {
            full[k] = v;
        }
        CoefVector::from_stacked(&full, self.p)
    }
}

/// Pieces of the coefficient posterior that the conditional marginal needs.
#[derive(Clone, Debug)]
pub(crate) struct AssembledPosterior {
    pub posterior: PsiPosterior,
    pub prior_log_det: f64,
    /// `psi0' Psi0^{-1} psi0` on the active set
    pub prior_quad: f64,
    /// `psi1' Psi1^{-1} psi1`
    pub posterior_quad: f64,
}

/// Everything the coefficient posterior needs from `(dataset, z, Sigma)`,
/// over all `p + q` coordinates. Restricting to a model is a submatrix pick.
#[derive(Clone, Debug)]
pub struct ConditionalMoments {
    p: usize,
    q: usize,
    precision_data: DMatrix<f64>,
    shift_data: DVector<f64>,
    data_quad: f64,
    n_uncensored: usize,
    log_phi: f64,
}

impl ConditionalMoments {
    pub fn new(dataset: &TobitDataset, z: &DVector<f64>, sp: SigmaParams) -> Result<Self> {
        sp.validate()?;
        dataset.check_latent(z)?;
        let (p, q) = (dataset.p(), dataset.q());
        let s = sp.precision();
        let (s11, s12, s22) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
        let g = dataset.gram();

        let mut zo = z.clone();
        let mut zc = z.clone();
        for (i, &c) in dataset.censored().iter().enumerate() {
            if c {
                zo[i] = 0.0;
            } else {
                zc[i] = 0.0;
            }
        }
        let w_zo = dataset.w().tr_mul(&zo);
        let w_zc = dataset.w().tr_mul(&zc);
        let x_zo = dataset.x().tr_mul(&zo);

        let mut precision_data = DMatrix::zeros(p + q, p + q);
        precision_data
            .view_mut((0, 0), (p, p))
            .copy_from(&(&g.wo_wo * s11 + &g.wc_wc));
        precision_data
            .view_mut((0, p), (p, q))
            .copy_from(&(&g.wo_xo * s12));
        precision_data
            .view_mut((p, 0), (q, p))
            .copy_from(&(g.wo_xo.transpose() * s12));
        precision_data
            .view_mut((p, p), (q, q))
            .copy_from(&(&g.xo_xo * s22));

        let mut shift_data = DVector::zeros(p + q);
        shift_data
            .rows_mut(0, p)
            .copy_from(&(&w_zo * s11 + &g.wo_yo * s12 + &w_zc));
        shift_data
            .rows_mut(p, q)
            .copy_from(&(&x_zo * s12 + &g.xo_yo * s22));

        let data_quad = s11 * zo.dot(&zo) + 2.0 * s12 * zo.dot(dataset.y()) + s22 * g.yo_yo + zc.dot(&zc);

        Ok(ConditionalMoments {
            p,
            q,
            precision_data,
            shift_data,
            data_quad,
            n_uncensored: dataset.n_uncensored(),
            log_phi: sp.phi.ln(),
        })
    }

    /// `-(n_o/2) log phi - 1/2 [sum_uncens y~' Sigma^{-1} y~ + sum_cens z^2]`.
    ///
    /// Adding this to a conditional log marginal gives the log of the integral
    /// of `exp(complete_data_log_density)` against the normalized coefficient prior.
    pub fn data_log_constant(&self) -> f64 {
        -0.5 * self.n_uncensored as f64 * self.log_phi - 0.5 * self.data_quad
    }

    pub(crate) fn assemble(
        &self,
        model: &ModelIndicator,
        prior: &PriorSpec,
    ) -> Result<AssembledPosterior> {
        if model.p() != self.p || model.q() != self.q || prior.p() != self.p || prior.q() != self.q {
            return Err(TbmaError::Dimension("model or prior does not match dataset".into()));
        }
        let active = model.active_indices();
        let d = active.len();
        if d == 0 {
            return Ok(AssembledPosterior {
                posterior: PsiPosterior {
                    p: self.p,
                    q: self.q,
                    active,
                    mean: DVector::zeros(0),
                    cov: DMatrix::zeros(0, 0),
                    precision: DMatrix::zeros(0, 0),
                    chol_precision: DMatrix::zeros(0, 0),
                    log_det_cov: 0.0,
                },
                prior_log_det: 0.0,
                prior_quad: 0.0,
                posterior_quad: 0.0,
            });
        }

        let prior_mean = prior.stacked_mean().select_rows(&active);
        let prior_cov = restrict_square(&prior.stacked_cov(), &active);
        let prior_chol = Cholesky::new(prior_cov).ok_or_else(|| {
            TbmaError::Numerical("restricted prior covariance is not positive definite".into())
        })?;
        let prior_precision = prior_chol.inverse();
        let prior_log_det = log_det_from_chol(prior_chol.l_dirty());
        let prior_shift = &prior_precision * &prior_mean;
        let prior_quad = prior_mean.dot(&prior_shift);

        let precision = prior_precision + restrict_square(&self.precision_data, &active);
        let shift = prior_shift + self.shift_data.select_rows(&active);
        if precision.iter().chain(shift.iter()).any(|v| !v.is_finite()) {
            return Err(TbmaError::Numerical("non-finite entries in posterior precision".into()));
        }
        let chol = Cholesky::new(precision.clone()).ok_or_else(|| {
            TbmaError::Numerical("posterior precision is not positive definite".into())
        })?;
        let mean = chol.solve(&shift);
        let cov = chol.inverse();
        let log_det_cov = -log_det_from_chol(chol.l_dirty());
        let posterior_quad = mean.dot(&shift);

        Ok(AssembledPosterior {
            posterior: PsiPosterior {
                p: self.p,
                q: self.q,
                active,
                mean,
                cov,
                precision,
                chol_precision: chol.unpack(),
                log_det_cov,
            },
            prior_log_det,
            prior_quad,
            posterior_quad,
        })
    }

    pub fn psi_posterior(&self, model: &ModelIndicator, prior: &PriorSpec) -> Result<PsiPosterior> {
        self.assemble(model, prior).map(|a| a.posterior)
    }
}

fn restrict_square(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

/// `log |A|` from the lower Cholesky factor of `A`.
fn log_det_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Posterior mean and covariance of the active coefficients.
pub fn psi_posterior_params(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    model: &ModelIndicator,
    sp: SigmaParams,
    prior: &PriorSpec,
) -> Result<PsiPosterior> {
    ConditionalMoments::new(dataset, z, sp)?.psi_posterior(model, prior)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaPosterior {
    pub mean: f64,
    pub var: f64,
}

/// `s1 = s0 + n_o`, `S1 = S0 + sum (gamma e_z - e_y)^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhiPosterior {
    pub s1: f64,
    pub big_s1: f64,
}

/// Residual cross products over uncensored rows.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct ResidualSums {
    pub ez_ez: f64,
    pub ez_ey: f64,
    pub ey_ey: f64,
}

impl ResidualSums {
    pub fn new(dataset: &TobitDataset, z: &DVector<f64>, lp: &LinearPredictors) -> Self {
        let mut sums = ResidualSums::default();
        for i in 0..dataset.n() {
            if dataset.censored()[i] {
                continue;
            }
            let ez = z[i] - lp.wtheta[i];
            let ey = dataset.y()[i] - lp.xbeta[i];
            sums.ez_ez += ez * ez;
            sums.ez_ey += ez * ey;
            sums.ey_ey += ey * ey;
        }
        sums
    }

    pub fn gamma_posterior(&self, phi: f64, prior: &PriorSpec) -> GammaPosterior {
        let precision = 1.0 / prior.gamma_var + self.ez_ez / phi;
        let var = 1.0 / precision;
        GammaPosterior {
            mean: var * (prior.gamma0 / prior.gamma_var + self.ez_ey / phi),
            var,
        }
    }

    pub fn phi_posterior(&self, gamma: f64, n_uncensored: usize, prior: &PriorSpec) -> PhiPosterior {
        PhiPosterior {
            s1: prior.s0 + n_uncensored as f64,
            big_s1: prior.big_s0 + gamma * gamma * self.ez_ez - 2.0 * gamma * self.ez_ey + self.ey_ey,
        }
    }
}

pub fn gamma_posterior_params(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    psi: &CoefVector,
    phi: f64,
    prior: &PriorSpec,
) -> Result<GammaPosterior> {
    if phi.is_nan() || phi <= 0.0 {
        return Err(TbmaError::InvalidParameter(format!("phi must be positive, got {phi}")));
    }
    dataset.check_latent(z)?;
    let lp = LinearPredictors::new(dataset, psi)?;
    Ok(ResidualSums::new(dataset, z, &lp).gamma_posterior(phi, prior))
}

pub fn phi_posterior_params(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    psi: &CoefVector,
    gamma: f64,
    prior: &PriorSpec,
) -> Result<PhiPosterior> {
    dataset.check_latent(z)?;
    let lp = LinearPredictors::new(dataset, psi)?;
    Ok(ResidualSums::new(dataset, z, &lp).phi_posterior(gamma, dataset.n_uncensored(), prior))
}

/// Multivariate normal draw on the active set, zero elsewhere.
pub fn draw_psi<R: Rng + ?Sized>(post: &PsiPosterior, rng: &mut R) -> CoefVector {
    let d = post.dim();
    if d == 0 {
        return post.embed(&DVector::zeros(0));
    }
    let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    // precision = L L', so L'^{-1} eps has covariance precision^{-1}
    let offset = post
        .chol_precision
        .transpose()
        .solve_upper_triangular(&eps)
        .expect("Cholesky factor has a positive diagonal");
    post.embed(&(&post.mean + offset))
}

pub fn draw_gamma<R: Rng + ?Sized>(post: &GammaPosterior, rng: &mut R) -> f64 {
    post.mean + post.var.sqrt() * rng.sample::<f64, _>(StandardNormal)
}

/// Inverse gamma `IG(s1/2, S1/2)` draw, density proportional to `x^(-a-1) exp(-b/x)`.
pub fn draw_phi<R: Rng + ?Sized>(post: &PhiPosterior, rng: &mut R) -> Result<f64> {
    let gamma = Gamma::new(0.5 * post.s1, 2.0 / post.big_s1).map_err(|e| {
        TbmaError::InvalidParameter(format!(
            "inverse gamma with s1={}, S1={}: {e}",
            post.s1, post.big_s1
        ))
    })?;
    let v = 1.0 / gamma.sample(rng);
    if !(v > 0.0 && v.is_finite()) {
        return Err(TbmaError::Numerical(format!("phi draw {v} is not a positive real")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn dataset(censored: Vec<bool>, w: &[f64], x: &[f64], y: &[f64]) -> TobitDataset {
        let n = censored.len();
        let p = w.len().checked_div(n).unwrap_or(1);
        let q = x.len().checked_div(n).unwrap_or(1);
        TobitDataset::new(
            DMatrix::from_row_slice(n, p, w),
            DMatrix::from_row_slice(n, q, x),
            DVector::from_column_slice(y),
            censored,
            (0..p).map(|k| format!("w{k}")).collect(),
            (0..q).map(|k| format!("x{k}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn truncated_normal_rejects_bad_variance() {
        let mut r = rng();
        for var in [0.0, -1.0, f64::NAN] {
            assert!(sample_truncated_normal(0.0, var, TruncationSide::Negative, &mut r).is_err());
        }
    }

    #[test]
    fn truncated_normal_respects_sign() {
        let mut r = rng();
        for &mu in &[-50.0, -8.0, -1.0, 0.0, 1.0, 8.0, 50.0] {
            for _ in 0..2000 {
                let a = sample_truncated_normal(mu, 1.0, TruncationSide::Negative, &mut r).unwrap();
                assert!(a < 0.0, "mu={mu} gave {a}");
                let b = sample_truncated_normal(mu, 1.0, TruncationSide::NonNegative, &mut r).unwrap();
                assert!(b >= 0.0, "mu={mu} gave {b}");
            }
        }
    }

    #[test]
    fn truncated_normal_negative_half_mean() {
        // analytic: -sqrt(2/pi) = -0.797885
        let mut r = rng();
        let n = 1_000_000;
        let mean = (0..n)
            .map(|_| sample_truncated_normal(0.0, 1.0, TruncationSide::Negative, &mut r).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean + 0.797_884_560_802_865_4).abs() < 0.003, "mean {mean}");
    }

    #[test]
    fn truncated_normal_far_from_bound() {
        let mut r = rng();
        let n = 1_000_000;
        let mean = (0..n)
            .map(|_| sample_truncated_normal(8.0, 1.0, TruncationSide::NonNegative, &mut r).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 8.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn latent_params_examples() {
        let ds = dataset(vec![true, false, false], &[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], &[0.0, 3.0, 2.0]);
        let zero = CoefVector::zeros(1, 1);
        let lat = latent_conditional_params(&ds, 0, &zero, SigmaParams { gamma: 0.5, phi: 2.0 }).unwrap();
        assert_eq!(lat, LatentParams { mean: 0.0, var: 1.0, side: TruncationSide::Negative });

        let psi = CoefVector { theta: DVector::from_element(1, 0.7), beta: DVector::from_element(1, 1.0) };
        let lat = latent_conditional_params(&ds, 1, &psi, SigmaParams { gamma: 0.0, phi: 2.0 }).unwrap();
        assert_eq!(lat, LatentParams { mean: 0.7, var: 1.0, side: TruncationSide::NonNegative });

        // w'theta = 0, y - x'beta = 2, gamma = phi = 1
        let lat = latent_conditional_params(&ds, 2, &zero, SigmaParams { gamma: 1.0, phi: 1.0 }).unwrap();
        assert!((lat.mean - 1.0).abs() < 1e-15);
        assert!((lat.var - 0.5).abs() < 1e-15);
        assert_eq!(lat.side, TruncationSide::NonNegative);
    }

    #[test]
    fn sample_latent_signs_and_empty() {
        let mut r = rng();
        let empty = dataset(vec![], &[], &[], &[]);
        let z = sample_latent(&empty, &CoefVector::zeros(1, 1), SigmaParams { gamma: 0.0, phi: 1.0 }, &mut r).unwrap();
        assert_eq!(z.len(), 0);

        let cens = vec![true, false, true, false, false, true];
        let ds = dataset(cens.clone(), &[1.0; 6], &[0.5; 6], &[0.0, 1.0, 0.0, -2.0, 3.0, 0.0]);
        let psi = CoefVector { theta: DVector::from_element(1, 3.0), beta: DVector::from_element(1, 1.0) };
        for _ in 0..500 {
            let z = sample_latent(&ds, &psi, SigmaParams { gamma: 0.9, phi: 0.3 }, &mut r).unwrap();
            ds.check_latent(&z).unwrap();
        }
    }

    #[test]
    fn sample_latent_all_censored_mean() {
        let mut r = rng();
        let n = 200_000;
        let ds = dataset(vec![true; n], &vec![1.0; n], &vec![1.0; n], &vec![0.0; n]);
        let z = sample_latent(&ds, &CoefVector::zeros(1, 1), SigmaParams { gamma: 0.0, phi: 1.0 }, &mut r).unwrap();
        assert!((z.mean() + 0.797_884_56).abs() < 0.01);
    }

    fn fixture() -> (TobitDataset, DVector<f64>) {
        let cens = vec![false, true, false, false, true, false];
        let w = [1.0, 0.3, 1.0, -1.2, 1.0, 0.8, 1.0, 2.0, 1.0, -0.4, 1.0, 0.1];
        let x = [1.0, 1.5, 1.0, 0.2, 1.0, -0.7, 1.0, 0.9, 1.0, 1.1, 1.0, -2.0];
        let y = [2.0, 0.0, 0.5, 1.7, 0.0, -1.0];
        let z = DVector::from_column_slice(&[0.4, -0.3, 1.2, 0.05, -2.0, 0.9]);
        (dataset(cens, &w, &x, &y), z)
    }

    #[test]
    fn psi_posterior_inverse_contract() {
        let (ds, z) = fixture();
        let prior = PriorSpec::isotropic(2, 2, 3.0);
        let post = psi_posterior_params(&ds, &z, &ds.full_model(), SigmaParams { gamma: 0.6, phi: 0.8 }, &prior).unwrap();
        let eye = post.cov() * post.precision();
        let rel = (eye - DMatrix::identity(4, 4)).amax();
        assert!(rel < 1e-10, "residual {rel}");
        assert!((post.cov() - post.cov().transpose()).amax() < 1e-12);
    }

    #[test]
    fn psi_posterior_without_data_is_prior() {
        let ds = dataset(vec![], &[], &[], &[]);
        let mut prior = PriorSpec::isotropic(1, 1, 2.0);
        prior.theta0[0] = 0.5;
        prior.beta0[0] = -1.5;
        let post = psi_posterior_params(&ds, &DVector::zeros(0), &ds.full_model(), SigmaParams { gamma: 0.1, phi: 1.0 }, &prior).unwrap();
        assert!((post.mean() - DVector::from_column_slice(&[0.5, -1.5])).amax() < 1e-14);
        assert!((post.cov() - DMatrix::identity(2, 2) * 2.0).amax() < 1e-14);
    }

    #[test]
    fn all_censored_leaves_beta_block_at_prior() {
        let ds = dataset(vec![true; 3], &[1.0, 2.0, -1.0], &[4.0, 5.0, 6.0], &[0.0; 3]);
        let mut prior = PriorSpec::isotropic(1, 1, 2.0);
        prior.beta0[0] = 0.25;
        let z = DVector::from_column_slice(&[-0.1, -1.0, -0.5]);
        let post = psi_posterior_params(&ds, &z, &ds.full_model(), SigmaParams { gamma: 0.7, phi: 1.3 }, &prior).unwrap();
        assert!((post.mean()[1] - 0.25).abs() < 1e-14);
        assert!((post.cov()[(1, 1)] - 2.0).abs() < 1e-14);
        assert!(post.cov()[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn gamma_zero_uncensored_matches_separate_regressions() {
        // independent conjugate oracle: (Prior^-1 + X'X/s2)^-1 (Prior^-1 m + X'y/s2)
        let (ds0, _) = fixture();
        let cens = vec![false; 6];
        let ds = TobitDataset::new(ds0.w().clone(), ds0.x().clone(), DVector::from_column_slice(&[2.0, 0.3, 0.5, 1.7, -0.2, -1.0]), cens, ds0.names_w().to_vec(), ds0.names_x().to_vec()).unwrap();
        let z = DVector::from_column_slice(&[0.4, 0.3, 1.2, 0.05, 2.0, 0.9]);
        let phi = 0.7;
        let mut prior = PriorSpec::isotropic(2, 2, 4.0);
        prior.theta0[1] = 0.2;
        prior.beta0[0] = -0.3;
        let post = psi_posterior_params(&ds, &z, &ds.full_model(), SigmaParams { gamma: 0.0, phi }, &prior).unwrap();

        let conj = |design: &DMatrix<f64>, resp: &DVector<f64>, noise: f64, m: &DVector<f64>, v: f64| {
            let prec = DMatrix::identity(2, 2) / v + design.transpose() * design / noise;
            let cov = prec.try_inverse().unwrap();
            let mean = &cov * (m / v + design.transpose() * resp / noise);
            (mean, cov)
        };
        let (mt, ct) = conj(ds.w(), &z, 1.0, &prior.theta0, 4.0);
        let (mb, cb) = conj(ds.x(), ds.y(), phi, &prior.beta0, 4.0);
        assert!((post.mean().rows(0, 2) - mt).amax() < 1e-12);
        assert!((post.mean().rows(2, 2) - mb).amax() < 1e-12);
        assert!((post.cov().view((0, 0), (2, 2)) - ct).amax() < 1e-12);
        assert!((post.cov().view((2, 2), (2, 2)) - cb).amax() < 1e-12);
        assert!(post.cov().view((0, 2), (2, 2)).amax() < 1e-15);
    }

    #[test]
    fn gamma_posterior_examples() {
        let ds = dataset(vec![true, true], &[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]);
        let z = DVector::from_column_slice(&[-1.0, -2.0]);
        let mut prior = PriorSpec::default_for(1, 1);
        prior.gamma0 = 0.3;
        prior.gamma_var = 7.0;
        let g = gamma_posterior_params(&ds, &z, &CoefVector::zeros(1, 1), 1.0, &prior).unwrap();
        assert_eq!(g, GammaPosterior { mean: 0.3, var: 7.0 });

        let one = dataset(vec![false], &[1.0], &[1.0], &[2.0]);
        prior.gamma0 = 0.0;
        prior.gamma_var = 1e6;
        let g = gamma_posterior_params(&one, &DVector::from_element(1, 1.0), &CoefVector::zeros(1, 1), 1.0, &prior).unwrap();
        assert!((g.mean - 2.0).abs() < 2e-3 * 2.0);
        assert!((g.var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn phi_posterior_examples() {
        let (ds, z) = fixture();
        let prior = PriorSpec::default_for(2, 2);
        let psi = CoefVector { theta: DVector::from_column_slice(&[0.1, 0.2]), beta: DVector::from_column_slice(&[0.3, -0.4]) };
        let post = phi_posterior_params(&ds, &z, &psi, 0.0, &prior).unwrap();
        let ey2: f64 = (0..6)
            .filter(|&i| !ds.censored()[i])
            .map(|i| (ds.y()[i] - ds.x().row(i).transpose().dot(&psi.beta)).powi(2))
            .sum();
        assert_eq!(post.s1, prior.s0 + 4.0);
        assert!((post.big_s1 - prior.big_s0 - ey2).abs() < 1e-12);

        let all_cens = dataset(vec![true], &[1.0], &[1.0], &[0.0]);
        let post = phi_posterior_params(&all_cens, &DVector::from_element(1, -1.0), &CoefVector::zeros(1, 1), 3.0, &prior).unwrap();
        assert_eq!((post.s1, post.big_s1), (prior.s0, prior.big_s0));
    }

    proptest::proptest! {
        #[test]
        fn phi_scale_increment_is_square(gamma in -5.0f64..5.0, e in proptest::collection::vec((0.0f64..3.0, -3.0f64..3.0), 1..10)) {
            let n = e.len();
            let ds = dataset(vec![false; n], &vec![0.0; n], &vec![0.0; n], &e.iter().map(|r| r.1).collect::<Vec<_>>());
            let z = DVector::from_iterator(n, e.iter().map(|r| r.0));
            let prior = PriorSpec::default_for(1, 1);
            let post = phi_posterior_params(&ds, &z, &CoefVector::zeros(1, 1), gamma, &prior).unwrap();
            let direct: f64 = e.iter().map(|(ez, ey)| (gamma * ez - ey).powi(2)).sum();
            proptest::prop_assert!((post.big_s1 - prior.big_s0 - direct).abs() < 1e-9 * (1.0 + direct));
            proptest::prop_assert!(post.big_s1 >= prior.big_s0);
            let g = gamma_posterior_params(&ds, &z, &CoefVector::zeros(1, 1), 0.5, &prior).unwrap();
            proptest::prop_assert!(g.var <= prior.gamma_var);
        }
    }

    #[test]
    fn inverse_gamma_mean() {
        let mut r = rng();
        let post = PhiPosterior { s1: 4.0, big_s1: 4.0 };
        // IG(2, 2): mean b/(a-1) = 2, infinite variance, so check the median too
        let n = 1_000_000;
        let mut draws: Vec<f64> = (0..n).map(|_| draw_phi(&post, &mut r).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.02, "mean {mean}");
        draws.sort_by(f64::total_cmp);
        // median of IG(2,2) = 2 / median(Gamma(2,1)) = 2 / 1.678347
        assert!((draws[n / 2] - 2.0 / 1.678_346_99).abs() < 0.01);
    }

    #[test]
    fn draw_psi_covariance_and_embedding() {
        let (ds, z) = fixture();
        let prior = PriorSpec::isotropic(2, 2, 3.0);
        let model = ModelIndicator::unforced(vec![true, false], vec![true, true]);
        let post = psi_posterior_params(&ds, &z, &model, SigmaParams { gamma: 0.6, phi: 0.8 }, &prior).unwrap();
        let mut r = rng();
        let n = 1_000_000;
        let mut sum = DVector::<f64>::zeros(3);
        let mut sq = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let draw = draw_psi(&post, &mut r);
            assert_eq!(draw.theta[1], 0.0);
            let v = DVector::from_column_slice(&[draw.theta[0], draw.beta[0], draw.beta[1]]);
            sum += &v;
            sq += &v * v.transpose();
        }
        let mean = sum / n as f64;
        let cov = sq / n as f64 - &mean * mean.transpose();
        for r in 0..3 {
            for c in 0..3 {
                let scale = (post.cov()[(r, r)] * post.cov()[(c, c)]).sqrt();
                assert!((cov[(r, c)] - post.cov()[(r, c)]).abs() < 0.01 * scale, "entry ({r},{c})");
            }
        }
    }
}
