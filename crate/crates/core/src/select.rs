//! Subnetwork selection.
//!
//! Variance-based selection keeps the `S` weights with the largest marginal
//! posterior variance, which minimizes the diagonal approximation of the
//! squared 2-Wasserstein distance between the full-network posterior and the
//! subnetwork posterior: `Σ_d σ_d² (1 − m_d)`. The exact distance is
//! available in [`wasserstein_sq_exact`] for validating that approximation on
//! small problems.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{diag_marginal_variances, exact_marginal_variances, GgnKind, GgnMatrix};
use crate::linalg::{matrix_sqrt_psd, DenseMatrix};
use crate::net::MlpArchitecture;
use crate::rng;

/// Sorted set of selected parameter indices out of `total`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskDocument", into = "MaskDocument")]
pub struct SubnetworkMask {
    selected: Vec<usize>,
    total: usize,
}

#[derive(Serialize, Deserialize)]
struct MaskDocument {
    total: usize,
    selected: Vec<usize>,
}

impl TryFrom<MaskDocument> for SubnetworkMask {
    type Error = Error;

    fn try_from(doc: MaskDocument) -> Result<Self> {
        SubnetworkMask::new(doc.selected, doc.total)
    }
}

impl From<SubnetworkMask> for MaskDocument {
    fn from(m: SubnetworkMask) -> Self {
        MaskDocument {
            total: m.total,
            selected: m.selected,
        }
    }
}

impl SubnetworkMask {
    pub fn new(mut selected: Vec<usize>, total: usize) -> Result<Self> {
        selected.sort_unstable();
        if selected.is_empty() || selected.len() > total {
            return Err(Error::InvalidSize(format!(
                "mask must select between 1 and {total} indices, got {}",
                selected.len()
            )));
        }
        if selected.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSize("mask indices must be unique".into()));
        }
        if let Some(&last) = selected.last() {
            if last >= total {
                return Err(Error::InvalidSize(format!(
                    "mask index {last} out of range for {total} parameters"
                )));
            }
        }
        Ok(Self { selected, total })
    }

    pub fn full(total: usize) -> Self {
        Self {
            selected: (0..total).collect(),
            total,
        }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.selected.len() == self.total
    }

    pub fn contains(&self, index: usize) -> bool {
        self.selected.binary_search(&index).is_ok()
    }

    /// Indices in `0..total` not selected.
    pub fn complement(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total - self.selected.len());
        let mut it = self.selected.iter().peekable();
        for i in 0..self.total {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    /// 0/1 indicator per index.
    pub fn indicator(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.total];
        for &i in &self.selected {
            m[i] = 1.0;
        }
        m
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectionStrategy {
    #[serde(rename = "wass-exact")]
    WassersteinExact,
    #[serde(rename = "wass-diag")]
    WassersteinDiag,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "final-layer")]
    FinalLayer,
    #[serde(rename = "magnitude")]
    Magnitude,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 5] = [
        SelectionStrategy::WassersteinExact,
        SelectionStrategy::WassersteinDiag,
        SelectionStrategy::Random,
        SelectionStrategy::FinalLayer,
        SelectionStrategy::Magnitude,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::WassersteinExact => "wass-exact",
            SelectionStrategy::WassersteinDiag => "wass-diag",
            SelectionStrategy::Random => "random",
            SelectionStrategy::FinalLayer => "final-layer",
            SelectionStrategy::Magnitude => "magnitude",
        }
    }

    pub fn is_score_based(self) -> bool {
        !matches!(self, SelectionStrategy::Random | SelectionStrategy::FinalLayer)
    }

    pub fn is_variance_based(self) -> bool {
        matches!(
            self,
            SelectionStrategy::WassersteinExact | SelectionStrategy::WassersteinDiag
        )
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown selection strategy {s:?}")))
    }
}

/// Per-weight scores; empty for the strategies that do not rank weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionScores {
    pub strategy: SelectionStrategy,
    pub score_per_weight: Vec<f64>,
}

/// Computes the ranking scores for `strategy`.
///
/// `map_weights` holds the inference-eligible MAP parameters (length `D`).
/// `ggn` must be a full GGN for `wass-exact`; `wass-diag` takes a diagonal
/// GGN, or the diagonal of a full one.
pub fn score_weights(
    strategy: SelectionStrategy,
    map_weights: &[f64],
    ggn: Option<&GgnMatrix>,
) -> Result<SelectionScores> {
    let score_per_weight = match strategy {
        SelectionStrategy::WassersteinExact => match ggn {
            Some(g) if g.kind() == GgnKind::Full => exact_marginal_variances(g)?,
            _ => return Err(Error::MissingCurvature("wass-exact")),
        },
        SelectionStrategy::WassersteinDiag => match ggn {
            Some(g) if g.kind() == GgnKind::Diagonal => diag_marginal_variances(g)?,
            Some(g) if g.kind() == GgnKind::Full => diag_marginal_variances(&g.to_diagonal())?,
            _ => return Err(Error::MissingCurvature("wass-diag")),
        },
        SelectionStrategy::Magnitude => map_weights.iter().map(|w| w.abs()).collect(),
        SelectionStrategy::Random | SelectionStrategy::FinalLayer => Vec::new(),
    };
    if let Some(g) = ggn {
        if strategy.is_variance_based() && g.dim() != map_weights.len() {
            return Err(Error::dim("selection scores", map_weights.len(), g.dim()));
        }
    }
    if score_per_weight.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite selection score".into()));
    }
    Ok(SelectionScores {
        strategy,
        score_per_weight,
    })
}

/// Keeps the `s` highest scores; ties go to the lower index.
pub fn select_top_s(scores: &SelectionScores, s: usize) -> Result<SubnetworkMask> {
    select_top_s_excluding(scores, s, &[])
}

/// As [`select_top_s`], never picking an index in `excluded`.
pub fn select_top_s_excluding(
    scores: &SelectionScores,
    s: usize,
    excluded: &[usize],
) -> Result<SubnetworkMask> {
    if !scores.strategy.is_score_based() {
        return Err(Error::InvalidConfig(format!(
            "strategy {} does not rank weights",
            scores.strategy
        )));
    }
    let d = scores.score_per_weight.len();
    let mut banned = vec![false; d];
    for &i in excluded {
        if i < d {
            banned[i] = true;
        }
    }
    let mut candidates: Vec<usize> = (0..d).filter(|&i| !banned[i]).collect();
    if s == 0 || s > candidates.len() {
        return Err(Error::InvalidSize(format!(
            "cannot select {s} of {} candidate weights",
            candidates.len()
        )));
    }
    let v = &scores.score_per_weight;
    candidates.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    candidates.truncate(s);
    SubnetworkMask::new(candidates, d)
}

/// `s` indices drawn uniformly without replacement out of `total`.
pub fn select_random(total: usize, s: usize, seed: u64) -> Result<SubnetworkMask> {
    if s == 0 || s > total {
        return Err(Error::InvalidSize(format!("cannot select {s} of {total} weights")));
    }
    let mut rng = rng::stream(seed, "select/random");
    SubnetworkMask::new(sample(&mut rng, total, s).into_vec(), total)
}

/// The output layer's weights (and biases when they are inference-eligible).
pub fn select_final_layer(arch: &MlpArchitecture, include_biases: bool) -> SubnetworkMask {
    SubnetworkMask::new(
        arch.final_layer_indices(include_biases),
        arch.eligible_count(include_biases),
    )
    .expect("final layer is a valid non-empty index set")
}

/// Mask size for a fraction of `total`, rounded to nearest and at least 1.
pub fn size_from_fraction(total: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidSize(format!("fraction {fraction} not in (0, 1]")));
    }
    Ok(((total as f64 * fraction).round() as usize).clamp(1, total))
}

/// Residual objective `Σ_d σ_d² (1 − m_d)`.
pub fn residual_variance(variances: &[f64], mask: &SubnetworkMask) -> Result<f64> {
    if variances.len() != mask.total() {
        return Err(Error::dim("residual_variance", mask.total(), variances.len()));
    }
    let m = mask.indicator();
    Ok(variances.iter().zip(m).map(|(v, mi)| v * (1.0 - mi)).sum())
}

/// Exact squared 2-Wasserstein distance between `N(ŵ, Σ)` and the same
/// Gaussian with the rows and columns outside `mask` zeroed:
/// `Tr(Σ + Σ_S − 2 (Σ_S^{1/2} Σ Σ_S^{1/2})^{1/2})`.
pub fn wasserstein_sq_exact(cov_full: &DenseMatrix, mask: &SubnetworkMask) -> Result<f64> {
    if !cov_full.is_square() || cov_full.rows() != mask.total() {
        return Err(Error::dim("wasserstein_sq_exact", mask.total(), cov_full.rows()));
    }
    let m = mask.indicator();
    let n = cov_full.rows();
    let mut masked = cov_full.clone();
    for i in 0..n {
        for j in 0..n {
            masked[(i, j)] *= m[i] * m[j];
        }
    }
    let root_masked = matrix_sqrt_psd(&masked)?;
    let inner = root_masked.matmul(cov_full)?.matmul(&root_masked)?.symmetrized();
    let cross = matrix_sqrt_psd(&inner)?;
    let w2 = cov_full.trace() + masked.trace() - 2.0 * cross.trace();
    Ok(w2.max(0.0))
}

/// Indices whose data-term GGN diagonal (before the prior) is at most
/// `threshold`: weights the training data never moves, such as those
/// attached to dead ReLU units.
pub fn dead_weight_filter(ggn_diag_data_term: &[f64], threshold: f64) -> Vec<usize> {
    ggn_diag_data_term
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= threshold)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var_scores(v: &[f64]) -> SelectionScores {
        SelectionScores {
            strategy: SelectionStrategy::WassersteinDiag,
            score_per_weight: v.to_vec(),
        }
    }

    #[test]
    fn mask_validation() {
        assert!(SubnetworkMask::new(vec![], 3).is_err());
        assert!(SubnetworkMask::new(vec![1, 1], 3).is_err());
        assert!(SubnetworkMask::new(vec![3], 3).is_err());
        let m = SubnetworkMask::new(vec![2, 0], 4).unwrap();
        assert_eq!(m.selected(), &[0, 2]);
        assert_eq!(m.complement(), vec![1, 3]);
        assert!(m.contains(2) && !m.contains(1));
    }

    #[test]
    fn mask_json_round_trip_and_validation() {
        let m = SubnetworkMask::new(vec![0, 5, 7], 10).unwrap();
        let back = SubnetworkMask::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(SubnetworkMask::from_json(r#"{"total":2,"selected":[4]}"#).is_err());
    }

    #[test]
    fn top_s_by_inspection() {
        let scores = var_scores(&[3.0, 1.0, 2.0]);
        let m = select_top_s(&scores, 2).unwrap();
        assert_eq!(m.selected(), &[0, 2]);
        assert_eq!(residual_variance(&scores.score_per_weight, &m).unwrap(), 1.0);
        let all = select_top_s(&scores, 3).unwrap();
        assert!(all.is_full());
        assert_eq!(residual_variance(&scores.score_per_weight, &all).unwrap(), 0.0);
    }

    #[test]
    fn top_s_ties_prefer_low_index() {
        let m = select_top_s(&var_scores(&[1.0, 2.0, 2.0, 2.0]), 2).unwrap();
        assert_eq!(m.selected(), &[1, 2]);
    }

    #[test]
    fn top_s_rejects_bad_sizes() {
        let scores = var_scores(&[1.0, 2.0]);
        assert!(matches!(select_top_s(&scores, 0), Err(Error::InvalidSize(_))));
        assert!(matches!(select_top_s(&scores, 3), Err(Error::InvalidSize(_))));
        assert!(select_top_s_excluding(&scores, 2, &[0]).is_err());
        let m = select_top_s_excluding(&scores, 1, &[1]).unwrap();
        assert_eq!(m.selected(), &[0]);
    }

    #[test]
    fn toy_fraction_sizes() {
        let d = 2600;
        let sizes: Vec<usize> = [0.5, 0.03, 0.01]
            .iter()
            .map(|&f| size_from_fraction(d, f).unwrap())
            .collect();
        assert_eq!(sizes, vec![1300, 78, 26]);
        assert!(size_from_fraction(d, 0.0).is_err());
        assert_eq!(size_from_fraction(10, 0.01).unwrap(), 1);
    }

    #[test]
    fn random_selection_is_seeded() {
        let a = select_random(100, 10, 1).unwrap();
        let b = select_random(100, 10, 1).unwrap();
        let c = select_random(100, 10, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 10);
        assert!(select_random(5, 6, 0).is_err());
    }

    #[test]
    fn final_layer_mask() {
        let arch = MlpArchitecture::uniform(1, 50, 2, 1).unwrap();
        let m = select_final_layer(&arch, false);
        assert_eq!(m.len(), 50);
        assert_eq!(m.total(), 2600);
        assert_eq!(m.selected()[0], 2550);
    }

    #[test]
    fn magnitude_scores() {
        let s = score_weights(SelectionStrategy::Magnitude, &[-3.0, 1.0], None).unwrap();
        assert_eq!(s.score_per_weight, vec![3.0, 1.0]);
    }

    #[test]
    fn variance_scores_need_curvature() {
        for st in [SelectionStrategy::WassersteinExact, SelectionStrategy::WassersteinDiag] {
            assert!(matches!(
                score_weights(st, &[1.0], None),
                Err(Error::MissingCurvature(_))
            ));
        }
        let diag = GgnMatrix::diagonal(vec![2.0, 4.0], 0.0, vec![0, 1]).unwrap();
        assert!(matches!(
            score_weights(SelectionStrategy::WassersteinExact, &[0.0, 0.0], Some(&diag)),
            Err(Error::MissingCurvature(_))
        ));
        let s = score_weights(SelectionStrategy::WassersteinDiag, &[0.0, 0.0], Some(&diag)).unwrap();
        assert_eq!(s.score_per_weight, vec![0.5, 0.25]);
    }

    #[test]
    fn exact_and_diag_rank_agree_on_diagonal_ggn() {
        let full = GgnMatrix::full(DenseMatrix::from_diag(&[2.0, 0.5, 4.0, 1.0]), 0.0, vec![0, 1, 2, 3])
            .unwrap();
        let w = [0.0; 4];
        let e = score_weights(SelectionStrategy::WassersteinExact, &w, Some(&full)).unwrap();
        let d = score_weights(SelectionStrategy::WassersteinDiag, &w, Some(&full.to_diagonal()))
            .unwrap();
        for s in 1..=4 {
            assert_eq!(select_top_s(&e, s).unwrap(), select_top_s(&d, s).unwrap());
        }
    }

    #[test]
    fn wasserstein_full_mask_is_zero() {
        let cov = DenseMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let w = wasserstein_sq_exact(&cov, &SubnetworkMask::full(2)).unwrap();
        assert!(w.abs() < 1e-12);
    }

    #[test]
    fn wasserstein_diagonal_reduction() {
        let cov = DenseMatrix::from_diag(&[3.0, 1.0, 2.0]);
        let mask = SubnetworkMask::new(vec![0, 2], 3).unwrap();
        assert!((wasserstein_sq_exact(&cov, &mask).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dead_filter_cases() {
        assert_eq!(dead_weight_filter(&[0.0, 0.0, 0.0], 0.0), vec![0, 1, 2]);
        assert!(dead_weight_filter(&[0.1, 2.0], 0.0).is_empty());
        assert_eq!(dead_weight_filter(&[0.1, 2.0, 1e-12], 1e-9), vec![2]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for st in SelectionStrategy::ALL {
            assert_eq!(st.name().parse::<SelectionStrategy>().unwrap(), st);
        }
        assert!("wass".parse::<SelectionStrategy>().is_err());
    }
}
