//! Contrastive objectives: negative assembly, sampled softmax, and the
//! cross-stage adaptive margin loss.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, CsmfError, Result};
use crate::numerics::RngStream;
use crate::stagenet::Stage;

/// Loss value and its gradient with respect to the raw scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub loss: f64,
    pub grad_pos: f64,
    pub grad_negs: Vec<f64>,
}

/// `-log(e^{s_pos} / (e^{s_pos} + Σ_j e^{s_j}))`, max-shifted.
pub fn softmax_loss(s_pos: f64, s_negs: &[f64]) -> Result<ScoreLoss> {
    if !s_pos.is_finite() || s_negs.iter().any(|s| !s.is_finite()) {
        return Err(CsmfError::Numeric("non-finite score in softmax loss".into()));
    }
    let max = s_negs.iter().copied().fold(s_pos, f64::max);
    let e_pos = (s_pos - max).exp();
    let e_negs: Vec<f64> = s_negs.iter().map(|s| (s - max).exp()).collect();
    let z = e_pos + e_negs.iter().sum::<f64>();
    Ok(ScoreLoss {
        loss: z.ln() - (s_pos - max),
        grad_pos: e_pos / z - 1.0,
        grad_negs: e_negs.iter().map(|e| e / z).collect(),
    })
}

/// How a margin enters the negative logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// `s_j + m_j`: the positive must beat each negative by its margin.
    #[default]
    RequiredSeparation,
    /// `s_j - m_j`, the sign as printed in the original loss.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    /// Minimum separation.
    pub sigma: f64,
    /// Amplification applied when upstream scores disagree with the label.
    pub eta: f64,
    pub mode: MarginMode,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { sigma: 0.1, eta: 1.8, mode: MarginMode::RequiredSeparation }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return config_err(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.eta >= 1.0) || !self.eta.is_finite() {
            return config_err(format!("eta must be >= 1, got {}", self.eta));
        }
        Ok(())
    }
}

/// Upstream score a stage compares against: `s_d` for the click stage, the
/// cascade product `s_d · s_o` for the conversion stage.
pub fn upstream_score(stage: Stage, s_d: f64, s_o: f64) -> f64 {
    match stage {
        Stage::Exposure | Stage::Click => s_d,
        Stage::Conversion => s_d * s_o,
    }
}

/// Adaptive margin between a positive and a negative given their upstream
/// scores. Always `>= sigma`.
pub fn aml_margin(upstream_pos: f64, upstream_neg: f64, cfg: &MarginConfig) -> f64 {
    if upstream_pos >= upstream_neg {
        upstream_pos - upstream_neg + cfg.sigma
    } else {
        (upstream_neg - upstream_pos) * cfg.eta + cfg.sigma
    }
}

/// Softmax loss with per-negative margins folded into the negative logits.
pub fn aml_loss(s_pos: f64, s_negs: &[f64], margins: &[f64], mode: MarginMode) -> Result<ScoreLoss> {
    if margins.len() != s_negs.len() {
        return shape_err(format!("{} margins for {} negatives", margins.len(), s_negs.len()));
    }
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(CsmfError::Numeric("non-finite margin".into()));
    }
    let adjusted: Vec<f64> = s_negs
        .iter()
        .zip(margins)
        .map(|(s, m)| match mode {
            MarginMode::RequiredSeparation => s + m,
            MarginMode::PaperLiteral => s - m,
        })
        .collect();
    // d(s_j ± m_j)/ds_j = 1, so the softmax gradient carries over unchanged.
    softmax_loss(s_pos, &adjusted)
}

/// One positive interaction offered to negative assembly.
#[derive(Debug, Clone, Copy)]
pub struct Positive<'a> {
    pub user_id: u32,
    pub item_id: u32,
    /// Candidates from the same request that were not exposed.
    pub unexposed: &'a [u32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveExample {
    /// Row in [`ContrastiveBatch::users`].
    pub user: usize,
    /// Index of the positive in [`ContrastiveBatch::items`].
    pub pos: usize,
    /// Indices of negatives in [`ContrastiveBatch::items`].
    pub negs: Vec<usize>,
}

/// Upstream scores per example, aligned with `pos` / `negs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    pub pos: Vec<f64>,
    pub negs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub stage: Stage,
    /// User id per example.
    pub users: Vec<u32>,
    /// Deduplicated item pool: positives first, in example order, then
    /// request-local candidates.
    pub items: Vec<u32>,
    pub examples: Vec<ContrastiveExample>,
    pub upstream: Option<Upstream>,
}

/// Builds negatives for a batch of positives.
///
/// The exposure stage uses the other examples' positives plus the example's
/// own unexposed candidates; later stages use in-batch positives only. Lists
/// longer than `max_negatives` are subsampled uniformly. Examples left without
/// any negative are dropped.
pub fn assemble_negatives(
    positives: &[Positive<'_>],
    stage: Stage,
    rng: &mut RngStream,
    max_negatives: usize,
) -> Result<ContrastiveBatch> {
    if max_negatives == 0 {
        return config_err("max_negatives must be at least 1");
    }
    let mut items: Vec<u32> = Vec::new();
    let mut slot = std::collections::HashMap::new();
    let mut intern = |id: u32, items: &mut Vec<u32>| -> usize {
        *slot.entry(id).or_insert_with(|| {
            items.push(id);
            items.len() - 1
        })
    };
    let pos_idx: Vec<usize> = positives.iter().map(|p| intern(p.item_id, &mut items)).collect();
    let local: Vec<Vec<usize>> = if stage == Stage::Exposure {
        positives
            .iter()
            .map(|p| p.unexposed.iter().map(|&id| intern(id, &mut items)).collect())
            .collect()
    } else {
        vec![Vec::new(); positives.len()]
    };

    let mut in_batch: Vec<usize> = pos_idx.clone();
    in_batch.sort_unstable();
    in_batch.dedup();

    let mut users = Vec::new();
    let mut examples = Vec::new();
    for (e, p) in positives.iter().enumerate() {
        let pos = pos_idx[e];
        let mut negs: Vec<usize> = in_batch.iter().copied().filter(|&i| i != pos).collect();
        for &i in &local[e] {
            if i != pos && !negs.contains(&i) {
                negs.push(i);
            }
        }
        if negs.len() > max_negatives {
            // partial Fisher-Yates
            for k in 0..max_negatives {
                let j = k + rng.below(negs.len() - k);
                negs.swap(k, j);
            }
            negs.truncate(max_negatives);
        }
        negs.sort_unstable();
        if negs.is_empty() {
            continue;
        }
        users.push(p.user_id);
        examples.push(ContrastiveExample { user: users.len() - 1, pos, negs });
    }
    if examples.is_empty() {
        return Err(CsmfError::Sampling(format!(
            "no example in a batch of {} has any negative",
            positives.len()
        )));
    }
    Ok(ContrastiveBatch { stage, users, items, examples, upstream: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use proptest::prelude::*;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn uniform_scores_give_ln3() {
        let l = softmax_loss(0.0, &[0.0, 0.0]).unwrap();
        assert!((l.loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_positive_has_vanishing_loss() {
        let l = softmax_loss(800.0, &[0.0, -3.0]).unwrap();
        assert!(l.loss < 1e-300 || l.loss == 0.0);
        assert!(l.loss.is_finite());
    }

    #[test]
    fn softmax_gradient_matches_fd() {
        let mut rng = RngStream::new(17);
        for _ in 0..100 {
            let s: Vec<f64> = (0..6).map(|_| rng.normal() * 2.0).collect();
            let l = softmax_loss(s[0], &s[1..]).unwrap();
            let fd = finite_diff_grad(|x| softmax_loss(x[0], &x[1..]).unwrap().loss, &s, 1e-5).unwrap();
            assert!((l.grad_pos - fd[0]).abs() < 1e-6);
            for (g, f) in l.grad_negs.iter().zip(&fd[1..]) {
                assert!((g - f).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(softmax_loss(f64::NAN, &[0.0]).is_err());
        assert!(softmax_loss(0.0, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn margin_agreement_branch() {
        let cfg = MarginConfig { sigma: 0.1, eta: 1.8, ..Default::default() };
        assert!((aml_margin(2.0, 1.0, &cfg) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn margin_disagreement_branch() {
        let cfg = MarginConfig { sigma: 0.1, eta: 1.8, ..Default::default() };
        assert!((aml_margin(1.0, 2.0, &cfg) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn margin_tie_is_sigma() {
        for eta in [1.0, 1.8, 5.0] {
            let cfg = MarginConfig { sigma: 0.3, eta, ..Default::default() };
            assert_eq!(aml_margin(0.7, 0.7, &cfg), 0.3);
        }
    }

    #[test]
    fn conversion_upstream_is_cascade_product() {
        assert_eq!(upstream_score(Stage::Conversion, 2.0, 3.0), 6.0);
        assert_eq!(upstream_score(Stage::Click, 2.0, 3.0), 2.0);
    }

    #[test]
    fn zero_margin_one_negative_is_ln2() {
        for mode in [MarginMode::RequiredSeparation, MarginMode::PaperLiteral] {
            let l = aml_loss(0.4, &[0.4], &[0.0], mode).unwrap();
            assert!((l.loss - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_margin_hand_values() {
        let req = aml_loss(1.0, &[1.0], &[1.0], MarginMode::RequiredSeparation).unwrap();
        assert!((req.loss - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((req.loss - 1.3133).abs() < 1e-4);
        let lit = aml_loss(1.0, &[1.0], &[1.0], MarginMode::PaperLiteral).unwrap();
        assert!((lit.loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn margin_length_mismatch() {
        assert!(matches!(aml_loss(0.0, &[0.0, 1.0], &[0.0], MarginMode::PaperLiteral), Err(CsmfError::Shape(_))));
    }

    #[test]
    fn margin_config_validation() {
        assert!(MarginConfig { eta: 0.5, ..Default::default() }.validate().is_err());
        assert!(MarginConfig { sigma: -0.1, ..Default::default() }.validate().is_err());
        assert!(MarginConfig::default().validate().is_ok());
    }

    #[test]
    fn aml_gradient_matches_fd_both_modes() {
        let mut rng = RngStream::new(23);
        for mode in [MarginMode::RequiredSeparation, MarginMode::PaperLiteral] {
            for _ in 0..100 {
                let n = 1 + rng.below(8);
                let s: Vec<f64> = (0..=n).map(|_| rng.normal() * 2.0).collect();
                let m: Vec<f64> = (0..n).map(|_| rng.uniform() * 2.0).collect();
                let l = aml_loss(s[0], &s[1..], &m, mode).unwrap();
                let fd = finite_diff_grad(|x| aml_loss(x[0], &x[1..], &m, mode).unwrap().loss, &s, 1e-5).unwrap();
                assert!(rel_close(l.grad_pos, fd[0], 1e-4));
                for (g, f) in l.grad_negs.iter().zip(&fd[1..]) {
                    assert!(rel_close(*g, *f, 1e-4), "{g} vs {f}");
                }
            }
        }
    }

    fn pos<'a>(user: u32, item: u32, unexposed: &'a [u32]) -> Positive<'a> {
        Positive { user_id: user, item_id: item, unexposed }
    }

    #[test]
    fn exposure_batch_counts() {
        let u = [[10u32, 11], [12, 13], [14, 15]];
        let ps = [pos(0, 1, &u[0]), pos(1, 2, &u[1]), pos(2, 3, &u[2])];
        let b = assemble_negatives(&ps, Stage::Exposure, &mut RngStream::new(0), 8).unwrap();
        assert!(b.examples.iter().all(|e| e.negs.len() == 4));
        assert_eq!(b.items.len(), 9);
    }

    #[test]
    fn click_batch_uses_in_batch_only() {
        let u = [99u32];
        let ps: Vec<_> = (0..4).map(|i| pos(i, i + 1, &u)).collect();
        let b = assemble_negatives(&ps, Stage::Click, &mut RngStream::new(0), 63).unwrap();
        assert!(b.examples.iter().all(|e| e.negs.len() == 3));
        assert!(!b.items.contains(&99));
        for e in &b.examples {
            assert!(!e.negs.contains(&e.pos));
        }
    }

    #[test]
    fn truncation_is_deterministic() {
        let ps: Vec<_> = (0..40).map(|i| pos(i, i, &[])).collect();
        let a = assemble_negatives(&ps, Stage::Click, &mut RngStream::new(5), 7).unwrap();
        let b = assemble_negatives(&ps, Stage::Click, &mut RngStream::new(5), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.examples.iter().all(|e| e.negs.len() == 7));
    }

    #[test]
    fn lone_example_without_candidates_fails() {
        let ps = [pos(0, 1, &[])];
        assert!(matches!(
            assemble_negatives(&ps, Stage::Exposure, &mut RngStream::new(0), 8),
            Err(CsmfError::Sampling(_))
        ));
    }

    #[test]
    fn duplicate_positive_items_are_not_self_negatives() {
        let ps = [pos(0, 5, &[]), pos(1, 5, &[]), pos(2, 6, &[])];
        let b = assemble_negatives(&ps, Stage::Click, &mut RngStream::new(0), 8).unwrap();
        assert_eq!(b.examples[0].negs, vec![1]);
        assert_eq!(b.examples[2].negs, vec![0]);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(s in proptest::collection::vec(-20.0f64..20.0, 2..10), c in -50.0f64..50.0) {
            let a = softmax_loss(s[0], &s[1..]).unwrap();
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let b = softmax_loss(shifted[0], &shifted[1..]).unwrap();
            prop_assert!((a.loss - b.loss).abs() <= 1e-9 * a.loss.abs().max(1.0));
        }

        #[test]
        fn zero_margins_equal_softmax(s in proptest::collection::vec(-20.0f64..20.0, 2..10)) {
            let zeros = vec![0.0; s.len() - 1];
            for mode in [MarginMode::RequiredSeparation, MarginMode::PaperLiteral] {
                let a = aml_loss(s[0], &s[1..], &zeros, mode).unwrap();
                prop_assert_eq!(a, softmax_loss(s[0], &s[1..]).unwrap());
            }
        }

        #[test]
        fn loss_monotone_in_margin(s in proptest::collection::vec(-5.0f64..5.0, 2..6), m in 0.0f64..3.0, bump in 0.0f64..2.0, k in 0usize..5) {
            let n = s.len() - 1;
            let k = k % n;
            let base = vec![m; n];
            let mut more = base.clone();
            more[k] += bump;
            let r0 = aml_loss(s[0], &s[1..], &base, MarginMode::RequiredSeparation).unwrap().loss;
            let r1 = aml_loss(s[0], &s[1..], &more, MarginMode::RequiredSeparation).unwrap().loss;
            prop_assert!(r1 >= r0);
            let p0 = aml_loss(s[0], &s[1..], &base, MarginMode::PaperLiteral).unwrap().loss;
            let p1 = aml_loss(s[0], &s[1..], &more, MarginMode::PaperLiteral).unwrap().loss;
            prop_assert!(p1 <= p0);
        }

        #[test]
        fn margin_at_least_sigma_and_continuous(a in -10.0f64..10.0, b in -10.0f64..10.0, sigma in 0.0f64..2.0, eta in 1.0f64..4.0) {
            let cfg = MarginConfig { sigma, eta, ..Default::default() };
            prop_assert!(aml_margin(a, b, &cfg) >= sigma);
            let h = 1e-9;
            prop_assert!((aml_margin(a, a - h, &cfg) - aml_margin(a, a + h, &cfg)).abs() < 1e-8 * eta.max(1.0) + 1e-12);
        }
    }
}
