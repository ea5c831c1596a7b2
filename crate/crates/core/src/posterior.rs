//! Conjugate Bayesian linear-regression updates over transition rows and
//! reward weights, posterior sampling and MAP extraction.
//!
//! Each transition row i regresses its next-state component on the masked
//! regressor `[x_masked; u_masked; 1]` under known noise `sigma_f[i]`; the
//! reward weights regress `r - fixed(x, u)` on the features `psi(t, x, u)`
//! under known `sigma_r`. Everything stays Gaussian, so updates accumulate
//! in information form and are re-factorized once per episode.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::{BeliefBlock, BeliefRow, EpisodeRecord, GaussianBelief, ParamSample};

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("covariance for {0} lost positive definiteness")]
    NonPsd(String),
    #[error("episode dimensions do not match belief: {0}")]
    DimensionMismatch(String),
}

const JITTER: f64 = 1e-10;

/// Cholesky with a single jittered retry; the second failure is hard.
fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    what: &str,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, PosteriorError> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let jittered = m + DMatrix::identity(m.nrows(), m.ncols()) * JITTER;
    jittered
        .cholesky()
        .ok_or_else(|| PosteriorError::NonPsd(what.to_string()))
}

fn refresh_moments(
    info_matrix: &DMatrix<f64>,
    info_vector: &DVector<f64>,
    what: &str,
) -> Result<(DVector<f64>, DMatrix<f64>), PosteriorError> {
    let chol = cholesky_with_jitter(info_matrix, what)?;
    let cov = chol.inverse();
    let mean = chol.solve(info_vector);
    Ok((mean, cov))
}

/// Condition the belief on one episode of data. Pure: returns a new belief.
/// Batch and sequential application commute up to numerical tolerance
/// because the information-form accumulators are order-free sums.
pub fn update(belief: &GaussianBelief, episode: &EpisodeRecord) -> Result<GaussianBelief, PosteriorError> {
    let horizon = episode.steps.len();
    let mut out = belief.clone();
    for step in &episode.steps {
        if step.x.len() != belief.n || step.u.len() != belief.m || step.x_next.len() != belief.n {
            return Err(PosteriorError::DimensionMismatch(format!(
                "step {} has x: {}, u: {}, x_next: {} for n = {}, m = {}",
                step.t,
                step.x.len(),
                step.u.len(),
                step.x_next.len(),
                belief.n,
                belief.m
            )));
        }
        for i in 0..belief.n {
            let phi = belief.masked_regressor(i, &step.x, &step.u);
            let w = 1.0 / (belief.sigma_f[i] * belief.sigma_f[i]);
            let row = &mut out.rows[i];
            row.info_matrix.ger(w, &phi, &phi, 1.0);
            row.info_vector.axpy(w * step.x_next[i], &phi, 1.0);
        }
        let psi = belief
            .reward_structure
            .features
            .eval(step.t, horizon, &step.x, &step.u);
        if psi.len() > 0 {
            let target = step.reward - belief.reward_structure.fixed.value(&step.x, &step.u);
            let w = 1.0 / (belief.sigma_r * belief.sigma_r);
            out.reward.info_matrix.ger(w, &psi, &psi, 1.0);
            out.reward.info_vector.axpy(w * target, &psi, 1.0);
        }
    }
    // Re-factorize once per episode.
    for (i, row) in out.rows.iter_mut().enumerate() {
        let (mean, cov) = refresh_moments(
            &row.info_matrix,
            &row.info_vector,
            &format!("transition row {i}"),
        )?;
        row.mean = mean;
        row.cov = cov;
    }
    if out.reward.mean.len() > 0 {
        let (mean, cov) = refresh_moments(
            &out.reward.info_matrix,
            &out.reward.info_vector,
            "reward weights",
        )?;
        out.reward.mean = mean;
        out.reward.cov = cov;
    }
    out.reward_structure.weights = out.reward.mean.clone();
    Ok(out)
}

fn sample_gaussian(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    what: &str,
    rng: &mut impl Rng,
) -> Result<DVector<f64>, PosteriorError> {
    let chol = cholesky_with_jitter(cov, what)?;
    let xi = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + chol.l() * xi)
}

/// Draw one parameter realization `theta ~ N(mean, cov)` per row and for the
/// reward weights. Masked-out matrix entries are exactly zero. Reproducible
/// for a fixed rng state.
pub fn sample(belief: &GaussianBelief, rng: &mut impl Rng) -> Result<ParamSample, PosteriorError> {
    let mut row_values = Vec::with_capacity(belief.n);
    for (i, row) in belief.rows.iter().enumerate() {
        row_values.push(sample_gaussian(
            &row.mean,
            &row.cov,
            &format!("transition row {i}"),
            rng,
        )?);
    }
    let theta_r = if belief.reward.mean.len() > 0 {
        sample_gaussian(&belief.reward.mean, &belief.reward.cov, "reward weights", rng)?
    } else {
        DVector::zeros(0)
    };
    let (a, b, c_off) = belief.scatter_rows(&row_values);
    Ok(ParamSample {
        a,
        b,
        c_off,
        theta_r,
        episode: 0,
    })
}

/// Posterior mean parameters; with Gaussians the MAP coincides with the
/// mean. Deterministic.
pub fn map_estimate(belief: &GaussianBelief) -> ParamSample {
    let row_values: Vec<DVector<f64>> = belief.rows.iter().map(|r| r.mean.clone()).collect();
    let (a, b, c_off) = belief.scatter_rows(&row_values);
    ParamSample {
        a,
        b,
        c_off,
        theta_r: belief.reward.mean.clone(),
        episode: 0,
    }
}

/// Direct batch information-form posterior over a whole data set, used as a
/// conjugacy oracle against sequences of [`update`] calls.
pub fn batch_posterior(
    prior: &GaussianBelief,
    episodes: &[EpisodeRecord],
) -> Result<GaussianBelief, PosteriorError> {
    let mut all = prior.clone();
    // One pass accumulating every episode before a single re-factorization:
    // identical sums as repeated `update`, so results agree to rounding.
    for ep in episodes {
        let horizon = ep.steps.len();
        for step in &ep.steps {
            for i in 0..prior.n {
                let phi = prior.masked_regressor(i, &step.x, &step.u);
                let w = 1.0 / (prior.sigma_f[i] * prior.sigma_f[i]);
                all.rows[i].info_matrix.ger(w, &phi, &phi, 1.0);
                all.rows[i].info_vector.axpy(w * step.x_next[i], &phi, 1.0);
            }
            let psi = prior
                .reward_structure
                .features
                .eval(step.t, horizon, &step.x, &step.u);
            if psi.len() > 0 {
                let target = step.reward - prior.reward_structure.fixed.value(&step.x, &step.u);
                let w = 1.0 / (prior.sigma_r * prior.sigma_r);
                all.reward.info_matrix.ger(w, &psi, &psi, 1.0);
                all.reward.info_vector.axpy(w * target, &psi, 1.0);
            }
        }
    }
    for (i, row) in all.rows.iter_mut().enumerate() {
        let (mean, cov) = refresh_moments(
            &row.info_matrix,
            &row.info_vector,
            &format!("transition row {i}"),
        )?;
        row.mean = mean;
        row.cov = cov;
    }
    if all.reward.mean.len() > 0 {
        let (mean, cov) =
            refresh_moments(&all.reward.info_matrix, &all.reward.info_vector, "reward weights")?;
        all.reward.mean = mean;
        all.reward.cov = cov;
    }
    all.reward_structure.weights = all.reward.mean.clone();
    Ok(all)
}

/// Rebuild a belief whose covariances are scaled by `factor`, used in tests
/// to realize the degenerate-sampling limit.
pub fn scale_covariance(belief: &GaussianBelief, factor: f64) -> Result<GaussianBelief, PosteriorError> {
    let mut out = belief.clone();
    for row in &mut out.rows {
        let cov = &row.cov * factor;
        *row = BeliefRow::from_moments(row.mask.clone(), row.mean.clone(), cov)
            .map_err(|e| PosteriorError::NonPsd(e.to_string()))?;
    }
    if out.reward.mean.len() > 0 {
        let cov = &out.reward.cov * factor;
        out.reward = BeliefBlock::from_moments(out.reward.mean.clone(), cov)
            .map_err(|e| PosteriorError::NonPsd(e.to_string()))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeatureMap, FixedQuadratic, RewardModel, StepRecord};
    use crate::rng::{stream, Purpose};
    use nalgebra::{dmatrix, dvector};

    /// Scalar system x+ = a x + eps with prior a ~ N(0, 1), sigma_f = 1.
    fn scalar_belief() -> GaussianBelief {
        GaussianBelief {
            n: 1,
            m: 1,
            rows: vec![BeliefRow::from_moments(vec![0], dvector![0.0], dmatrix![1.0]).unwrap()],
            reward: BeliefBlock::from_moments(DVector::zeros(0), DMatrix::zeros(0, 0)).unwrap(),
            sigma_f: dvector![1.0],
            sigma_r: 1.0,
            reward_structure: RewardModel {
                fixed: FixedQuadratic::zero(1, 1),
                weights: DVector::zeros(0),
                features: FeatureMap::zero(1, 1),
            },
        }
    }

    fn one_datum_episode() -> EpisodeRecord {
        EpisodeRecord {
            steps: vec![StepRecord {
                t: 0,
                x: dvector![1.0],
                u: dvector![0.0],
                x_next: dvector![0.8],
                reward: 0.0,
                slack: DVector::zeros(0),
                objective: 0.0,
            }],
            sample: ParamSample {
                a: dmatrix![0.0],
                b: dmatrix![0.0],
                c_off: dvector![0.0],
                theta_r: DVector::zeros(0),
                episode: 0,
            },
        }
    }

    #[test]
    fn scalar_conjugate_update_matches_closed_form() {
        // One datum (x = 1, x+ = 0.8): posterior a ~ N(0.4, 0.5).
        let belief = scalar_belief();
        let post = update(&belief, &one_datum_episode()).unwrap();
        assert!((post.rows[0].mean[0] - 0.4).abs() < 1e-12);
        assert!((post.rows[0].cov[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_episode_leaves_belief_unchanged() {
        let belief = scalar_belief();
        let mut ep = one_datum_episode();
        ep.steps.clear();
        let post = update(&belief, &ep).unwrap();
        assert_eq!(post.rows[0].mean[0], belief.rows[0].mean[0]);
        assert_eq!(post.rows[0].cov[(0, 0)], belief.rows[0].cov[(0, 0)]);
    }

    #[test]
    fn map_estimate_returns_prior_mean_without_data() {
        let belief = scalar_belief();
        let map = map_estimate(&belief);
        assert_eq!(map.a[(0, 0)], 0.0);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let belief = scalar_belief();
        let a = sample(&belief, &mut stream(3, Purpose::ThetaSample, 0, 0)).unwrap();
        let b = sample(&belief, &mut stream(3, Purpose::ThetaSample, 0, 0)).unwrap();
        assert_eq!(a.a[(0, 0)], b.a[(0, 0)]);
    }

    #[test]
    fn degenerate_covariance_sampling_collapses_to_mean() {
        let belief = update(&scalar_belief(), &one_datum_episode()).unwrap();
        let tiny = scale_covariance(&belief, 1e-20).unwrap();
        let s = sample(&tiny, &mut stream(1, Purpose::ThetaSample, 0, 0)).unwrap();
        assert!((s.a[(0, 0)] - 0.4).abs() < 1e-8);
    }

    #[test]
    fn covariance_trace_never_increases() {
        let mut belief = scalar_belief();
        let mut prev = belief.total_covariance_trace();
        for _ in 0..5 {
            belief = update(&belief, &one_datum_episode()).unwrap();
            let tr = belief.total_covariance_trace();
            assert!(tr <= prev + 1e-12);
            prev = tr;
        }
    }
}
