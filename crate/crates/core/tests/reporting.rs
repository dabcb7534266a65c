use std::fs;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use tbma::chain::{inclusion_probabilities, posterior_summaries, run_chain, ChainConfig, ChainState};
use tbma::io::{self, DataSchema};
use tbma::oracle::{generate_synthetic, CovariateDistribution, SyntheticSpec};
use tbma::{ChainOutput, CoefVector, ModelIndicator, PriorSpec, SigmaParams, TobitDataset, TbmaError};

fn one_covariate_output(draws: &[f64]) -> ChainOutput {
    let ds = TobitDataset::new(
        DMatrix::from_element(2, 1, 1.0),
        DMatrix::from_element(2, 1, 1.0),
        DVector::zeros(2),
        vec![true; 2],
        vec!["a".into()],
        vec!["a".into()],
    )
    .unwrap();
    let mut out = ChainOutput::empty(&ds, 0);
    for (i, &b) in draws.iter().enumerate() {
        let state = ChainState {
            z: DVector::zeros(2),
            psi: CoefVector { theta: DVector::from_element(1, 0.5 * b), beta: DVector::from_element(1, b) },
            sigma: SigmaParams { gamma: 0.0, phi: 1.0 },
            model: ModelIndicator::unforced(vec![true], vec![true]),
            sweep_index: i + 1,
        };
        out.push(i + 1, false, false, &state);
    }
    out
}

#[test]
fn summary_example_and_determinism() {
    let out = one_covariate_output(&[1.0, 2.0, 3.0]);
    let summary = posterior_summaries(&[out]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    io::write_summary(&summary, &a).unwrap();
    io::write_summary(&summary, &b).unwrap();
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(text.lines().next().unwrap(), "covariate,equation,incl_prob,post_mean,post_sd,cond_mean,cond_sd");
    assert_eq!(text.lines().nth(1).unwrap(), "a,outcome,1.000000,2.000000,1.000000,2.000000,1.000000");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn empty_inputs_are_errors_not_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let empty = tbma::PosteriorSummary { rows: vec![], samples: 0, jump_rate: 0.0 };
    assert!(io::write_summary(&empty, &path).is_err());
    assert!(!path.exists());
    let out = one_covariate_output(&[]);
    assert!(matches!(posterior_summaries(std::slice::from_ref(&out)), Err(TbmaError::EmptyChain)));
    assert!(io::write_trace(&out, &path).is_err());
}

#[test]
fn unwritable_path_is_an_io_error() {
    let summary = posterior_summaries(&[one_covariate_output(&[1.0])]).unwrap();
    let err = io::write_summary(&summary, std::path::Path::new("/nonexistent-dir/x/summary.csv")).unwrap_err();
    assert!(matches!(err, TbmaError::Io(_) | TbmaError::Csv(_)), "{err:?}");
}

fn small_data(seed: u64) -> tbma::oracle::SyntheticData {
    generate_synthetic(&SyntheticSpec {
        n: 400,
        true_theta: vec![0.1, 0.9, 0.0, -0.6],
        true_beta: vec![1.0, 0.0, 0.7, 0.0],
        gamma: 0.5,
        phi: 1.0,
        covariates: CovariateDistribution::StandardNormal,
        intercept: true,
        seed,
    })
    .unwrap()
}

#[test]
fn trace_round_trips_and_summary_has_one_row_per_column() {
    let data = small_data(1);
    let ds = &data.dataset;
    let config = ChainConfig { iterations: 400, burn_in: 100, seed: 1, chains: 1, thin: 3, ..ChainConfig::default() };
    let out = run_chain(ds, &PriorSpec::default_for(ds.p(), ds.q()), &config, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    io::write_trace(&out, &path).unwrap();
    assert_eq!(io::read_trace(&path).unwrap(), out);

    let summary = posterior_summaries(&[out]).unwrap();
    assert_eq!(summary.rows.len(), ds.p() + ds.q());
    let keys: Vec<f64> = summary
        .rows
        .iter()
        .map(|r| {
            summary
                .rows
                .iter()
                .find(|o| o.equation == tbma::Equation::Outcome && o.covariate == r.covariate)
                .map_or(r.incl_prob, |o| o.incl_prob)
        })
        .collect();
    assert!(keys.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn dataset_csv_round_trips_exactly() {
    let data = small_data(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let schema = io::write_dataset_csv(&data.dataset, &path).unwrap();
    let back = io::load_csv(&path, &schema).unwrap().dataset;
    let ds = &data.dataset;
    assert_eq!(back.w(), ds.w());
    assert_eq!(back.x(), ds.x());
    assert_eq!(back.y(), ds.y());
    assert_eq!(back.censored(), ds.censored());
    assert_eq!(back.names_w(), ds.names_w());
    assert_eq!(back.forced_x(), ds.forced_x());
}

#[test]
fn standardization_with_matched_priors_keeps_inclusion_probabilities() {
    let data = small_data(3);
    let ds = &data.dataset;
    // rescale and shift the raw covariates and response so standardization matters
    let scales = [0.0, 10.0, 0.2, 3.0];
    let mut w = ds.w().clone();
    let mut x = ds.x().clone();
    for (k, &c) in scales.iter().enumerate().skip(1) {
        w.column_mut(k).iter_mut().for_each(|v| *v = *v * c + 5.0);
        x.column_mut(k).iter_mut().for_each(|v| *v = *v * c - 1.0);
    }
    let (y_scale, y_shift) = (4.0, 20.0);
    let y = ds.y().map(|v| v * y_scale + y_shift);
    let raw = TobitDataset::new(w, x, y, ds.censored().to_vec(), ds.names_w().to_vec(), ds.names_x().to_vec())
        .unwrap()
        .with_forced(ds.forced_w().to_vec(), ds.forced_x().to_vec())
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.csv");
    let mut schema: DataSchema = io::write_dataset_csv(&raw, &path).unwrap();
    let plain = io::load_csv(&path, &schema).unwrap();
    schema.standardize = true;
    let std = io::load_csv(&path, &schema).unwrap();
    let t = &std.standardization;

    let std_prior = PriorSpec::isotropic(4, 4, 1.0);
    // the same prior expressed on the raw scale
    let mut raw_prior = std_prior.clone();
    let sy = t.response.sd;
    for k in 0..4 {
        raw_prior.theta_cov[(k, k)] = if k == 0 { 100.0 } else { 1.0 / t.selection[k].sd.powi(2) };
        raw_prior.beta_cov[(k, k)] = if k == 0 { 100.0 * sy * sy } else { sy * sy / t.outcome[k].sd.powi(2) };
    }
    let mut std_prior = std_prior;
    std_prior.theta_cov[(0, 0)] = 100.0;
    std_prior.beta_cov[(0, 0)] = 100.0;
    raw_prior.gamma_var = std_prior.gamma_var * sy * sy;
    raw_prior.big_s0 = std_prior.big_s0 * sy * sy;

    let config = ChainConfig { iterations: 6_000, burn_in: 1_000, seed: 11, chains: 1, ..ChainConfig::default() };
    let a = inclusion_probabilities(&[run_chain(&plain.dataset, &raw_prior, &config, 0).unwrap()]).unwrap();
    let b = inclusion_probabilities(&[run_chain(&std.dataset, &std_prior, &config, 0).unwrap()]).unwrap();
    for (u, v) in a.selection.iter().chain(&a.outcome).zip(b.selection.iter().chain(&b.outcome)) {
        assert!((u - v).abs() < 0.05, "{a:?} vs {b:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn estimator_identity_holds_per_row(bits in prop::collection::vec(any::<bool>(), 1..40), seed in 0u64..1000) {
        let ds = TobitDataset::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            vec![true],
            vec!["a".into()],
            vec!["b".into()],
        ).unwrap();
        let mut out = ChainOutput::empty(&ds, 0);
        for (i, &b) in bits.iter().enumerate() {
            let v = if b { ((seed + i as u64) % 17) as f64 - 8.0 } else { 0.0 };
            let state = ChainState {
                z: DVector::zeros(1),
                psi: CoefVector { theta: DVector::from_element(1, v), beta: DVector::from_element(1, -v) },
                sigma: SigmaParams { gamma: 0.0, phi: 1.0 },
                model: ModelIndicator::unforced(vec![b], vec![b]),
                sweep_index: i + 1,
            };
            out.push(i + 1, false, b, &state);
        }
        let summary = posterior_summaries(&[out]).unwrap();
        for r in &summary.rows {
            let implied = r.incl_prob * r.cond_mean.unwrap_or(0.0);
            prop_assert!((r.post_mean - implied).abs() <= 1e-12 * (1.0 + implied.abs()));
        }
    }
}
