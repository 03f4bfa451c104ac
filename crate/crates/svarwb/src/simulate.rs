//! Forward simulation of the model with standard-normal structural shocks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::RegimeModel;

/// Simulate `t_total` rows. The first regime runs a discarded burn-in from
/// zero initial conditions; regime switches happen at the model's break
/// rows. Returns the sample and any warnings (a non-stationary regime does
/// not abort the simulation).
pub fn simulate<R: Rng + ?Sized>(
    model: &RegimeModel,
    t_total: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = model.dims.n;
    let l = model.dims.l;
    if t_total < l + 1 {
        return Err(Error::Dims("sample too short for the lag order".into()));
    }
    for b in model.break_dates() {
        if *b == 0 || *b >= t_total {
            return Err(Error::Dims(format!(
                "break row {b} outside the sample of length {t_total}"
            )));
        }
    }
    let mut warnings = Vec::new();
    for (p, regime) in model.regimes().iter().enumerate() {
        if !regime.is_stationary() {
            warnings.push(format!(
                "regime {} is non-stationary; simulated paths may diverge",
                p + 1
            ));
        }
    }

    let regime_of = |t: usize| -> usize {
        model
            .break_dates()
            .iter()
            .take_while(|&&b| b <= t)
            .count()
    };

    let mut history: Vec<DVector<f64>> = vec![DVector::zeros(n); l];
    let mut out = DMatrix::zeros(t_total, n);
    let total = burn_in + t_total;
    for step in 0..total {
        let p = if step < burn_in {
            0
        } else {
            regime_of(step - burn_in)
        };
        let regime = model.regime(p);
        let mut y = regime.intercept().clone();
        for (i, b) in regime.lag_coeffs().iter().enumerate() {
            y += b * &history[history.len() - 1 - i];
        }
        let eps = DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(rng) });
        y += regime.sigma_tr() * eps;
        if step >= burn_in {
            for c in 0..n {
                out[(step - burn_in, c)] = y[c];
            }
        }
        history.push(y);
        if history.len() > l {
            history.remove(0);
        }
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReducedFormRegime;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sample_covariance_matches_identity_dgp() {
        let regime = ReducedFormRegime::new(
            DVector::zeros(2),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let model = RegimeModel::synthetic(vec![regime]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (obs, warnings) = simulate(&model, 10_000, 100, &mut rng).unwrap();
        assert!(warnings.is_empty());
        let t = obs.nrows() as f64;
        for i in 0..2 {
            for j in 0..2 {
                let cov: f64 = (0..obs.nrows()).map(|r| obs[(r, i)] * obs[(r, j)]).sum::<f64>() / t;
                let target = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov - target).abs() < 0.05,
                    "sample covariance ({i},{j}) = {cov}"
                );
            }
        }
    }

    #[test]
    fn variance_break_shows_up_per_segment() {
        let quiet = ReducedFormRegime::new(
            DVector::zeros(2),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::identity(2, 2) * 0.5,
        )
        .unwrap();
        let loud = ReducedFormRegime::new(
            DVector::zeros(2),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::identity(2, 2) * 3.0,
        )
        .unwrap();
        let model = RegimeModel::new(vec![quiet, loud], vec![4000]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (obs, _) = simulate(&model, 8000, 100, &mut rng).unwrap();
        let var_of = |lo: usize, hi: usize| -> f64 {
            (lo..hi).map(|r| obs[(r, 0)] * obs[(r, 0)]).sum::<f64>() / (hi - lo) as f64
        };
        let v1 = var_of(0, 4000);
        let v2 = var_of(4000, 8000);
        assert!((v1 - 0.5).abs() < 0.1, "first segment variance {v1}");
        assert!((v2 - 3.0).abs() < 0.3, "second segment variance {v2}");
    }

    #[test]
    fn identical_seeds_give_identical_samples() {
        let regime = ReducedFormRegime::new(
            DVector::zeros(2),
            vec![DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.0, 0.3])],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let model = RegimeModel::synthetic(vec![regime]).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let (a, _) = simulate(&model, 500, 50, &mut r1).unwrap();
        let (b, _) = simulate(&model, 500, 50, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonstationary_dgp_warns() {
        let regime = ReducedFormRegime::new(
            DVector::zeros(2),
            vec![DMatrix::identity(2, 2) * 1.01],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let model = RegimeModel::synthetic(vec![regime]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, warnings) = simulate(&model, 50, 0, &mut rng).unwrap();
        assert_eq!(warnings.len(), 1);
    }
}
