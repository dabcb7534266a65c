//! Domain types for the two-equation sample-selection model.
//!
//! ```text
//! z_i  = w_i' theta + eps_i          (selection)
//! y*_i = x_i' beta  + eta_i          (outcome)
//! y_i  = y*_i  observed iff z_i >= 0
//! (eps_i, eta_i) ~ N(0, Sigma),  Sigma = [[1, gamma], [gamma, phi + gamma^2]]
//! ```
//!
//! The latent `z` is never stored in the dataset. Censored rows carry a zero
//! in `y` and are marginalized over by the sampler.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Result, TbmaError};
use crate::search::ModelPrior;

/// Which of the two regression equations a covariate belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Equation {
    Selection,
    Outcome,
}

impl Equation {
    pub fn as_str(self) -> &'static str {
        match self {
            Equation::Selection => "selection",
            Equation::Outcome => "outcome",
        }
    }
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cross products of the design that do not depend on the latent `z`.
///
/// The censoring pattern is fixed for a dataset, so every Gram block the
/// coefficient posterior needs can be formed once at construction.
#[derive(Clone, Debug)]
pub(crate) struct GramCache {
    /// sum over uncensored rows of w w'
    pub wo_wo: DMatrix<f64>,
    /// sum over censored rows of w w'
    pub wc_wc: DMatrix<f64>,
    /// sum over uncensored rows of w x'
    pub wo_xo: DMatrix<f64>,
    /// sum over uncensored rows of x x'
    pub xo_xo: DMatrix<f64>,
    pub wo_yo: DVector<f64>,
    pub xo_yo: DVector<f64>,
    pub yo_yo: f64,
}

impl GramCache {
    fn new(w: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>, censored: &[bool]) -> Self {
        let uncensored_mask =
            DVector::from_iterator(censored.len(), censored.iter().map(|&c| if c { 0.0 } else { 1.0 }));
        let censored_mask = uncensored_mask.map(|m| 1.0 - m);
        let wo = scale_rows(w, &uncensored_mask);
        let wc = scale_rows(w, &censored_mask);
        let xo = scale_rows(x, &uncensored_mask);
        // y is zero at censored rows, so full products already restrict to uncensored rows.
        GramCache {
            wo_wo: wo.transpose() * &wo,
            wc_wc: wc.transpose() * &wc,
            wo_xo: wo.transpose() * &xo,
            xo_xo: xo.transpose() * &xo,
            wo_yo: wo.transpose() * y,
            xo_yo: xo.transpose() * y,
            yo_yo: y.dot(y),
        }
    }
}

fn scale_rows(m: &DMatrix<f64>, mask: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut row, &s) in out.row_iter_mut().zip(mask.iter()) {
        row *= s;
    }
    out
}

/// Immutable table of observations for both equations.
#[derive(Clone, Debug)]
pub struct TobitDataset {
    w: DMatrix<f64>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    censored: Vec<bool>,
    names_w: Vec<String>,
    names_x: Vec<String>,
    forced_w: Vec<bool>,
    forced_x: Vec<bool>,
    n_uncensored: usize,
    gram: GramCache,
}

impl TobitDataset {
    /// Builds a dataset, checking shapes, name uniqueness and finiteness.
    /// Outcome values at censored rows are replaced by 0.
    pub fn new(
        w: DMatrix<f64>,
        x: DMatrix<f64>,
        y: DVector<f64>,
        censored: Vec<bool>,
        names_w: Vec<String>,
        names_x: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if w.nrows() != n || x.nrows() != n || censored.len() != n {
            return Err(TbmaError::Dimension(format!(
                "row counts disagree: W has {}, X has {}, y has {}, censored has {}",
                w.nrows(),
                x.nrows(),
                n,
                censored.len()
            )));
        }
        if names_w.len() != w.ncols() || names_x.len() != x.ncols() {
            return Err(TbmaError::Dimension(
                "column name count does not match design width".into(),
            ));
        }
        check_unique(&names_w, Equation::Selection)?;
        check_unique(&names_x, Equation::Outcome)?;
        if w.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(TbmaError::InvalidParameter(
                "design matrices contain non-finite values".into(),
            ));
        }
        let mut y = y;
        for (yi, &c) in y.iter_mut().zip(&censored) {
            if c {
                *yi = 0.0;
            } else if !yi.is_finite() {
                return Err(TbmaError::InvalidParameter(
                    "non-finite outcome at an uncensored row".into(),
                ));
            }
        }
        let n_uncensored = censored.iter().filter(|&&c| !c).count();
        let gram = GramCache::new(&w, &x, &y, &censored);
        let (p, q) = (w.ncols(), x.ncols());
        Ok(TobitDataset {
            w,
            x,
            y,
            censored,
            names_w,
            names_x,
            forced_w: vec![false; p],
            forced_x: vec![false; q],
            n_uncensored,
            gram,
        })
    }

    /// Marks columns (typically intercepts) that every model must include.
    pub fn with_forced(mut self, forced_w: Vec<bool>, forced_x: Vec<bool>) -> Result<Self> {
        if forced_w.len() != self.p() || forced_x.len() != self.q() {
            return Err(TbmaError::Dimension("forced mask length mismatch".into()));
        }
        self.forced_w = forced_w;
        self.forced_x = forced_x;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_uncensored(&self) -> usize {
        self.n_uncensored
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn censored(&self) -> &[bool] {
        &self.censored
    }

    pub fn names_w(&self) -> &[String] {
        &self.names_w
    }

    pub fn names_x(&self) -> &[String] {
        &self.names_x
    }

    pub fn forced_w(&self) -> &[bool] {
        &self.forced_w
    }

    pub fn forced_x(&self) -> &[bool] {
        &self.forced_x
    }

    pub(crate) fn gram(&self) -> &GramCache {
        &self.gram
    }

    /// Checks that `z` has one entry per row and that `z_i < 0` exactly at censored rows.
    pub fn check_latent(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.n() {
            return Err(TbmaError::Dimension(format!(
                "latent vector has length {}, expected {}",
                z.len(),
                self.n()
            )));
        }
        for (i, (&zi, &c)) in z.iter().zip(&self.censored).enumerate() {
            if !zi.is_finite() || (zi < 0.0) != c {
                return Err(TbmaError::InvalidState(format!(
                    "latent z[{i}] = {zi} inconsistent with censoring flag {c}"
                )));
            }
        }
        Ok(())
    }

    /// Model containing only the forced columns.
    pub fn null_model(&self) -> ModelIndicator {
        ModelIndicator {
            include_w: self.forced_w.clone(),
            include_x: self.forced_x.clone(),
            forced_w: self.forced_w.clone(),
            forced_x: self.forced_x.clone(),
        }
    }

    pub fn full_model(&self) -> ModelIndicator {
        ModelIndicator {
            include_w: vec![true; self.p()],
            include_x: vec![true; self.q()],
            forced_w: self.forced_w.clone(),
            forced_x: self.forced_x.clone(),
        }
    }
}

fn check_unique(names: &[String], eq: Equation) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(TbmaError::InvalidParameter(format!(
                "duplicate column `{name}` in {eq} equation"
            )));
        }
    }
    Ok(())
}

/// Covariance parameters `(gamma, phi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaParams {
    pub gamma: f64,
    pub phi: f64,
}

impl SigmaParams {
    pub fn new(gamma: f64, phi: f64) -> Result<Self> {
        let sp = SigmaParams { gamma, phi };
        sp.validate()?;
        Ok(sp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi <= 0.0 || !self.phi.is_finite() || !self.gamma.is_finite() {
            return Err(TbmaError::InvalidParameter(format!(
                "covariance requires finite gamma and phi > 0, got gamma={}, phi={}",
                self.gamma, self.phi
            )));
        }
        Ok(())
    }

    /// Closed-form inverse `(1/phi) [[phi + gamma^2, -gamma], [-gamma, 1]]`.
    pub fn precision(&self) -> Matrix2<f64> {
        let (g, f) = (self.gamma, self.phi);
        Matrix2::new((f + g * g) / f, -g / f, -g / f, 1.0 / f)
    }
}

/// Error covariance `[[1, gamma], [gamma, phi + gamma^2]]`; its determinant is `phi`.
pub fn build_sigma(sp: SigmaParams) -> Result<Matrix2<f64>> {
    sp.validate()?;
    let (g, f) = (sp.gamma, sp.phi);
    Ok(Matrix2::new(1.0, g, g, f + g * g))
}

/// Selection and outcome coefficients; stacked as `(theta', beta')'`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefVector {
    pub theta: DVector<f64>,
    pub beta: DVector<f64>,
}

impl CoefVector {
    pub fn zeros(p: usize, q: usize) -> Self {
        CoefVector {
            theta: DVector::zeros(p),
            beta: DVector::zeros(q),
        }
    }

    pub fn from_stacked(stacked: &DVector<f64>, p: usize) -> Self {
        let q = stacked.len() - p;
        CoefVector {
            theta: stacked.rows(0, p).into_owned(),
            beta: stacked.rows(p, q).into_owned(),
        }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let p = self.theta.len();
        let mut out = DVector::zeros(p + self.beta.len());
        out.rows_mut(0, p).copy_from(&self.theta);
        out.rows_mut(p, self.beta.len()).copy_from(&self.beta);
        out
    }
}

/// Inclusion bits for both equations plus the always-included masks.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelIndicator {
    include_w: Vec<bool>,
    include_x: Vec<bool>,
    forced_w: Vec<bool>,
    forced_x: Vec<bool>,
}

impl ModelIndicator {
    pub fn new(
        include_w: Vec<bool>,
        include_x: Vec<bool>,
        forced_w: Vec<bool>,
        forced_x: Vec<bool>,
    ) -> Result<Self> {
        if include_w.len() != forced_w.len() || include_x.len() != forced_x.len() {
            return Err(TbmaError::Dimension("inclusion and forced masks differ in length".into()));
        }
        let forced_ok = forced_w.iter().zip(&include_w).all(|(&f, &i)| !f || i)
            && forced_x.iter().zip(&include_x).all(|(&f, &i)| !f || i);
        if !forced_ok {
            return Err(TbmaError::InvalidParameter(
                "forced covariate missing from inclusion vector".into(),
            ));
        }
        Ok(ModelIndicator {
            include_w,
            include_x,
            forced_w,
            forced_x,
        })
    }

    /// Model with no forced columns.
    pub fn unforced(include_w: Vec<bool>, include_x: Vec<bool>) -> Self {
        let (p, q) = (include_w.len(), include_x.len());
        ModelIndicator {
            include_w,
            include_x,
            forced_w: vec![false; p],
            forced_x: vec![false; q],
        }
    }

    pub fn p(&self) -> usize {
        self.include_w.len()
    }

    pub fn q(&self) -> usize {
        self.include_x.len()
    }

    pub fn include_w(&self) -> &[bool] {
        &self.include_w
    }

    pub fn include_x(&self) -> &[bool] {
        &self.include_x
    }

    pub fn forced_w(&self) -> &[bool] {
        &self.forced_w
    }

    pub fn forced_x(&self) -> &[bool] {
        &self.forced_x
    }

    /// Bit at position `k` of the concatenated `(selection, outcome)` vector.
    pub fn bit(&self, k: usize) -> bool {
        if k < self.p() {
            self.include_w[k]
        } else {
            self.include_x[k - self.p()]
        }
    }

    pub fn is_forced(&self, k: usize) -> bool {
        if k < self.p() {
            self.forced_w[k]
        } else {
            self.forced_x[k - self.p()]
        }
    }

    /// Flips the bit at concatenated position `k`. Forced bits are rejected.
    pub fn toggled(&self, k: usize) -> Result<Self> {
        if k >= self.p() + self.q() {
            return Err(TbmaError::Dimension(format!("bit {k} out of range")));
        }
        if self.is_forced(k) {
            return Err(TbmaError::InvalidParameter(format!("bit {k} is forced")));
        }
        let mut out = self.clone();
        if k < self.p() {
            out.include_w[k] = !out.include_w[k];
        } else {
            out.include_x[k - self.p()] = !out.include_x[k - self.p()];
        }
        Ok(out)
    }

    /// Concatenated positions that may be toggled.
    pub fn free_positions(&self) -> Vec<usize> {
        (0..self.p() + self.q()).filter(|&k| !self.is_forced(k)).collect()
    }

    /// Active positions in stacked `(theta, beta)` coordinates.
    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.p() + self.q()).filter(|&k| self.bit(k)).collect()
    }

    pub fn size_w(&self) -> usize {
        self.include_w.iter().filter(|&&b| b).count()
    }

    pub fn size_x(&self) -> usize {
        self.include_x.iter().filter(|&&b| b).count()
    }

    /// Active dimension `d(M)`.
    pub fn dim(&self) -> usize {
        self.size_w() + self.size_x()
    }

    /// Number of included non-forced covariates.
    pub fn free_included(&self) -> usize {
        self.free_positions().into_iter().filter(|&k| self.bit(k)).count()
    }

    /// Compact bit string, selection bits then `|` then outcome bits.
    pub fn bit_string(&self) -> String {
        let bits = |v: &[bool]| v.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>();
        format!("{}|{}", bits(&self.include_w), bits(&self.include_x))
    }
}

/// Proper priors on every parameter plus the model-space prior.
///
/// `theta ~ N(theta0, theta_cov)`, `beta ~ N(beta0, beta_cov)`,
/// `gamma ~ N(gamma0, gamma_var)`, `phi ~ IG(s0/2, big_s0/2)` with density
/// proportional to `x^(-a-1) exp(-b/x)`.
#[derive(Clone, Debug)]
pub struct PriorSpec {
    pub theta0: DVector<f64>,
    pub theta_cov: DMatrix<f64>,
    pub beta0: DVector<f64>,
    pub beta_cov: DMatrix<f64>,
    pub gamma0: f64,
    pub gamma_var: f64,
    pub s0: f64,
    pub big_s0: f64,
    pub model_prior: ModelPrior,
}

impl PriorSpec {
    /// Weakly informative defaults: zero means, `100 I` coefficient covariances,
    /// `gamma ~ N(0, 100)`, `phi ~ IG(5/2, 5/2)`, flat model prior.
    pub fn default_for(p: usize, q: usize) -> Self {
        PriorSpec {
            theta0: DVector::zeros(p),
            theta_cov: DMatrix::identity(p, p) * 100.0,
            beta0: DVector::zeros(q),
            beta_cov: DMatrix::identity(q, q) * 100.0,
            gamma0: 0.0,
            gamma_var: 100.0,
            s0: 5.0,
            big_s0: 5.0,
            model_prior: ModelPrior::Flat,
        }
    }

    /// Independent `N(0, var)` coefficient priors with the remaining defaults.
    pub fn isotropic(p: usize, q: usize, var: f64) -> Self {
        PriorSpec {
            theta_cov: DMatrix::identity(p, p) * var,
            beta_cov: DMatrix::identity(q, q) * var,
            ..Self::default_for(p, q)
        }
    }

    pub fn p(&self) -> usize {
        self.theta0.len()
    }

    pub fn q(&self) -> usize {
        self.beta0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (p, q) = (self.p(), self.q());
        if self.theta_cov.shape() != (p, p) || self.beta_cov.shape() != (q, q) {
            return Err(TbmaError::Dimension("prior covariance shape mismatch".into()));
        }
        for (name, m) in [("theta", &self.theta_cov), ("beta", &self.beta_cov)] {
            let sym = (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
            if !sym || (m.nrows() > 0 && Cholesky::new(m.clone()).is_none()) {
                return Err(TbmaError::InvalidParameter(format!(
                    "{name} prior covariance is not symmetric positive definite"
                )));
            }
        }
        let positive = [
            ("gamma_var", self.gamma_var),
            ("s0", self.s0),
            ("S0", self.big_s0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TbmaError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.gamma0.is_finite() || self.theta0.iter().chain(self.beta0.iter()).any(|v| !v.is_finite()) {
            return Err(TbmaError::InvalidParameter("prior means must be finite".into()));
        }
        self.model_prior.validate()
    }

    pub fn check_dims(&self, dataset: &TobitDataset) -> Result<()> {
        if self.p() != dataset.p() || self.q() != dataset.q() {
            return Err(TbmaError::Dimension(format!(
                "prior is for p={}, q={} but dataset has p={}, q={}",
                self.p(),
                self.q(),
                dataset.p(),
                dataset.q()
            )));
        }
        Ok(())
    }

    /// `psi0 = (theta0', beta0')'`.
    pub fn stacked_mean(&self) -> DVector<f64> {
        CoefVector {
            theta: self.theta0.clone(),
            beta: self.beta0.clone(),
        }
        .stacked()
    }

    /// `Psi0 = diag(theta_cov, beta_cov)`.
    pub fn stacked_cov(&self) -> DMatrix<f64> {
        let (p, q) = (self.p(), self.q());
        let mut out = DMatrix::zeros(p + q, p + q);
        out.view_mut((0, 0), (p, p)).copy_from(&self.theta_cov);
        out.view_mut((p, p), (q, q)).copy_from(&self.beta_cov);
        out
    }
}

/// Augmented response and design for one row restricted to the active set of `model`.
///
/// Uncensored: `y~ = (z, y)'`, `X~ = [[w', 0'], [0', x']]`.
/// Censored: `y~ = (z, 0)'` and the second row of `X~` is zero.
pub fn augmented_design(
    dataset: &TobitDataset,
    row: usize,
    model: &ModelIndicator,
    z_value: f64,
) -> (Vector2<f64>, DMatrix<f64>) {
    let p = dataset.p();
    let active = model.active_indices();
    let censored = dataset.censored()[row];
    let mut design = DMatrix::zeros(2, active.len());
    for (col, &k) in active.iter().enumerate() {
        if k < p {
            design[(0, col)] = dataset.w()[(row, k)];
        } else if !censored {
            design[(1, col)] = dataset.x()[(row, k - p)];
        }
    }
    let y_tilde = Vector2::new(z_value, if censored { 0.0 } else { dataset.y()[row] });
    (y_tilde, design)
}

/// Log of the complete-data density of `(z, y_o)` up to additive constants:
///
/// ```text
/// -(n_o/2) log phi - 1/2 [ sum_cens e_z^2
///     + sum_uncens (1 + g^2/phi) e_z^2 - 2 (g/phi) e_z e_y + e_y^2 / phi ]
/// ```
pub fn complete_data_log_density(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    psi: &CoefVector,
    sp: SigmaParams,
) -> Result<f64> {
    sp.validate()?;
    dataset.check_latent(z)?;
    if psi.theta.len() != dataset.p() || psi.beta.len() != dataset.q() {
        return Err(TbmaError::Dimension("coefficient vector does not match dataset".into()));
    }
    Ok(complete_data_log_density_unchecked(dataset, z, psi, sp))
}

/// [`complete_data_log_density`] without the input checks, for inner loops
/// whose inputs were validated once up front.
pub(crate) fn complete_data_log_density_unchecked(
    dataset: &TobitDataset,
    z: &DVector<f64>,
    psi: &CoefVector,
    sp: SigmaParams,
) -> f64 {
    let (g, f) = (sp.gamma, sp.phi);
    let (w, x, y) = (dataset.w(), dataset.x(), dataset.y());
    let mut quad = 0.0;
    for i in 0..dataset.n() {
        let mut wt = 0.0;
        for k in 0..dataset.p() {
            wt += w[(i, k)] * psi.theta[k];
        }
        let ez = z[i] - wt;
        if dataset.censored()[i] {
            quad += ez * ez;
        } else {
            let mut xb = 0.0;
            for k in 0..dataset.q() {
                xb += x[(i, k)] * psi.beta[k];
            }
            let ey = y[i] - xb;
            quad += (1.0 + g * g / f) * ez * ez - 2.0 * (g / f) * ez * ey + ey * ey / f;
        }
    }
    -0.5 * dataset.n_uncensored() as f64 * f.ln() - 0.5 * quad
}
