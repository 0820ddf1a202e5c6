mod common;

use common::{from_na, random_spd, to_na};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use subnet_laplace::laplace::{exact_marginal_variances, GgnMatrix};
use subnet_laplace::linalg::DenseMatrix;
use subnet_laplace::rng;
use subnet_laplace::select::{
    residual_variance, select_random, select_top_s, wasserstein_sq_exact, SelectionScores, SelectionStrategy,
    SubnetworkMask,
};

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between two zero-mean Gaussians.
fn w2_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let rb = psd_sqrt(b);
    let inner = &rb * a * &rb;
    let inner = (&inner + inner.transpose()) * 0.5;
    (a.trace() + b.trace() - 2.0 * psd_sqrt(&inner).trace()).max(0.0)
}

fn random_mask<R: Rng>(r: &mut R, d: usize) -> SubnetworkMask {
    loop {
        let sel: Vec<usize> = (0..d).filter(|_| r.random_bool(0.5)).collect();
        if !sel.is_empty() {
            return SubnetworkMask::new(sel, d).unwrap();
        }
    }
}

#[test]
fn diagonal_covariance_reduces_to_residual_variance() {
    let mut r = rng::stream(1, "tests/diag-pairs");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = r.random_range(1..=10);
        let var: Vec<f64> = (0..d).map(|_| r.random_range(1e-3..3.0)).collect();
        let mask = random_mask(&mut r, d);
        let w2 = wasserstein_sq_exact(&DenseMatrix::from_diag(&var), &mask).unwrap();
        let expected: f64 = var.iter().zip(mask.indicator()).map(|(v, m)| v * (1.0 - m)).sum();
        assert!((residual_variance(&var, &mask).unwrap() - expected).abs() < 1e-12);
        worst = worst.max((w2 - expected).abs());
    }
    assert!(worst < 1e-9, "worst gap {worst:e}");
}

// Masking keeps Σ_SS, so the cross term collapses to tr Σ_SS and the
// distance is the complement's marginal variance even with correlations.
// The square roots of the singular masked matrix limit agreement to about
// sqrt(machine epsilon).
#[test]
fn exact_wasserstein_matches_eigen_oracle_on_correlated_covariances() {
    let mut r = rng::stream(2, "tests/w2");
    for _ in 0..100 {
        let d = r.random_range(2..=8);
        let cov = random_spd(&mut r, d, d, 0.1);
        let mask = random_mask(&mut r, d);
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(mask.indicator()));
        let masked = &m * &cov * &m;
        let ours = wasserstein_sq_exact(&from_na(&cov), &mask).unwrap();
        let oracle = w2_oracle(&cov, &masked);
        let closed: f64 = mask.complement().iter().map(|&i| cov[(i, i)]).sum();
        assert!((oracle - closed).abs() < 1e-6 * closed.max(1.0), "{oracle} vs {closed}");
        assert!((ours - closed).abs() < 1e-6 * closed.max(1.0), "{ours} vs {closed}");
    }
}

#[test]
fn exact_marginal_variances_match_dense_inverse() {
    let mut r = rng::stream(3, "tests/marg");
    for _ in 0..20 {
        let d = r.random_range(2..=15);
        let h = random_spd(&mut r, d, 3, 0.0);
        let lambda = r.random_range(0.1..5.0);
        let ggn = GgnMatrix::full(from_na(&h), lambda, (0..d).collect()).unwrap();
        let ours = exact_marginal_variances(&ggn).unwrap();
        let inv = (h + DMatrix::identity(d, d) * lambda).try_inverse().unwrap();
        for (i, v) in ours.iter().enumerate() {
            assert!((v - inv[(i, i)]).abs() < 1e-10 * inv[(i, i)].abs().max(1.0));
        }
    }
}

/// Best mask of size `s` under the diagonal objective, by enumerating every
/// subset. Returns the mask and its residual variance.
fn exhaustive_best(var: &[f64], s: usize) -> (Vec<usize>, f64) {
    let d = var.len();
    let mut best = (Vec::new(), f64::INFINITY);
    for bits in 0u32..(1 << d) {
        if bits.count_ones() as usize != s {
            continue;
        }
        let sel: Vec<usize> = (0..d).filter(|i| bits & (1 << i) != 0).collect();
        let res: f64 = (0..d).filter(|i| bits & (1 << i) == 0).map(|i| var[i]).sum();
        if res < best.1 {
            best = (sel, res);
        }
    }
    best
}

#[test]
fn top_s_matches_exhaustive_enumeration() {
    let mut r = rng::stream(4, "tests/exhaustive");
    for trial in 0..40 {
        let d = r.random_range(2..=15);
        let rank = r.random_range(1..=d);
        let h = random_spd(&mut r, d, rank, 0.0);
        let ggn = GgnMatrix::full(from_na(&h), r.random_range(0.1..3.0), (0..d).collect()).unwrap();
        let var = exact_marginal_variances(&ggn).unwrap();
        let scores = SelectionScores {
            strategy: SelectionStrategy::WassersteinExact,
            score_per_weight: var.clone(),
        };
        for s in 1..=d {
            let mask = select_top_s(&scores, s).unwrap();
            let (best, best_res) = exhaustive_best(&var, s);
            let ours = residual_variance(&var, &mask).unwrap();
            assert!((ours - best_res).abs() <= 1e-12 * best_res.max(1.0), "trial {trial} s {s}");
            assert_eq!(mask.selected(), &best[..], "trial {trial} s {s}");
        }
    }
}

#[test]
fn nalgebra_round_trip_is_exact() {
    let mut r = rng::stream(5, "tests/rt");
    let m = random_spd(&mut r, 4, 2, 1.0);
    assert_eq!(to_na(&from_na(&m)), m);
}

proptest! {
    #[test]
    fn top_s_is_sorted_and_sized(scores in prop::collection::vec(0.0f64..10.0, 1..60), frac in 0.0f64..=1.0) {
        let s = (((scores.len() as f64) * frac).floor() as usize).max(1);
        let mask = select_top_s(&SelectionScores { strategy: SelectionStrategy::WassersteinDiag, score_per_weight: scores.clone() }, s).unwrap();
        prop_assert_eq!(mask.len(), s);
        prop_assert!(mask.selected().windows(2).all(|w| w[0] < w[1]));
        let min_in = mask.selected().iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let max_out = mask.complement().iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s == scores.len() || min_in >= max_out);
    }

    #[test]
    fn residual_variance_shrinks_as_the_mask_grows(var in prop::collection::vec(0.0f64..5.0, 1..40), seed in 0u64..1000) {
        let d = var.len();
        let mut prev = f64::INFINITY;
        for s in 1..=d {
            let mask = select_random(d, s, seed).unwrap();
            let res = residual_variance(&var, &mask).unwrap();
            let smaller = select_top_s(&SelectionScores { strategy: SelectionStrategy::WassersteinDiag, score_per_weight: var.clone() }, s).unwrap();
            prop_assert!(residual_variance(&var, &smaller).unwrap() <= res + 1e-12);
            if s == d { prop_assert!(res.abs() < 1e-12); }
            prev = prev.min(res);
        }
        prop_assert!(prev >= -1e-12);
    }

    #[test]
    fn random_selection_is_reproducible(d in 1usize..200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let s = (((d as f64) * frac) as usize).max(1);
        let a = select_random(d, s, seed).unwrap();
        prop_assert_eq!(a.clone(), select_random(d, s, seed).unwrap());
        prop_assert_eq!(a.len(), s);
    }

    #[test]
    fn mask_json_round_trips(d in 1usize..100, seed in any::<u64>()) {
        let m = select_random(d, d.div_ceil(2), seed).unwrap();
        prop_assert_eq!(SubnetworkMask::from_json(&m.to_json().unwrap()).unwrap(), m);
    }
}
