//! The training objective: masked binary cross-entropy on the logit head,
//! an evidential term on the Dirichlet head, a Huber penalty on learned
//! tap displacements, and a Gram orthogonality penalty on the deformable
//! block output, combined with fixed weights.

use crate::config::LossWeights;
use crate::data::{LabelCode, LabelMatrix};
use crate::error::{Error, Result};
use crate::tensor::tape::Var;
use crate::tensor::Tensor;

/// Dirichlet quantities derived from raw evidence.
///
/// The last axis of `alpha` holds the negative concentration at index 0
/// and the positive at index 1. Every entry is at least 1, so `strength`
/// is at least 2 and `uncertainty` lies in (0, 1].
pub struct DirichletOutput<'t> {
    /// Concentration parameters, [B, C, 2].
    pub alpha: Var<'t>,
    /// Negative-class concentrations, [B, C].
    pub alpha_neg: Var<'t>,
    /// Positive-class concentrations, [B, C].
    pub alpha_pos: Var<'t>,
    /// Total evidence per entry, S = alpha_neg + alpha_pos, [B, C].
    pub strength: Var<'t>,
    /// Predictive uncertainty u = 2/S, [B, C].
    pub uncertainty: Var<'t>,
}

/// Maps raw evidence-head outputs [B, C, 2] through softplus to
/// non-negative evidence and shifts by one into concentration space.
pub fn evidence_to_alpha(evidence_raw: Var<'_>) -> DirichletOutput<'_> {
    let shape = evidence_raw.shape();
    assert_eq!(
        shape.len(),
        3,
        "evidence_to_alpha expects [B, C, 2], got {shape:?}"
    );
    assert_eq!(shape[2], 2, "evidence_to_alpha expects a trailing pair axis");
    let (b, c) = (shape[0], shape[1]);
    let alpha = evidence_raw.softplus().add_scalar(1.0);
    let alpha_neg = alpha.slice(vec![(0, b), (0, c), (0, 1)]).reshape(vec![b, c]);
    let alpha_pos = alpha.slice(vec![(0, b), (0, c), (1, 2)]).reshape(vec![b, c]);
    let strength = alpha_neg + alpha_pos;
    let uncertainty = evidence_raw.tape().scalar(2.0) / strength;
    DirichletOutput {
        alpha,
        alpha_neg,
        alpha_pos,
        strength,
        uncertainty,
    }
}

/// Masked binary cross-entropy and its bookkeeping.
pub struct MaskedBce<'t> {
    pub loss: Var<'t>,
    /// Number of definite (positive or negative) label entries.
    pub mask_count: usize,
    /// True when no entry was definite; the loss is then an exact,
    /// gradient-free zero.
    pub empty_mask: bool,
}

/// Binary cross-entropy over definite labels only. Uncertain and blank
/// entries get mask 0 and a remapped target of 0, so their logits cannot
/// influence the value or the gradient. Computed in the stable logits
/// form max(z, 0) - z*y + log(1 + exp(-|z|)) and averaged over the mask.
pub fn masked_bce<'t>(logits: Var<'t>, labels: &LabelMatrix) -> MaskedBce<'t> {
    let shape = logits.shape();
    let (n, c) = (labels.n(), labels.classes());
    assert_eq!(
        shape,
        vec![n, c],
        "masked_bce: logits {shape:?} vs labels [{n}, {c}]"
    );
    let mut y = vec![0.0; n * c];
    let mut m = vec![0.0; n * c];
    let mut count = 0usize;
    for (i, &code) in labels.codes().iter().enumerate() {
        match code {
            LabelCode::Pos => {
                y[i] = 1.0;
                m[i] = 1.0;
                count += 1;
            }
            LabelCode::Neg => {
                m[i] = 1.0;
                count += 1;
            }
            LabelCode::Unc | LabelCode::Blank => {}
        }
    }
    let tape = logits.tape();
    if count == 0 {
        return MaskedBce {
            loss: tape.scalar(0.0),
            mask_count: 0,
            empty_mask: true,
        };
    }
    let targets = tape.constant(Tensor::new(vec![n, c], y));
    let mask = tape.constant(Tensor::new(vec![n, c], m));
    let elem = logits.relu() - logits * targets + (-logits.abs_via_relu()).softplus();
    let loss = (elem * mask).sum().scale(1.0 / count as f64);
    MaskedBce {
        loss,
        mask_count: count,
        empty_mask: false,
    }
}

/// Evidential loss value plus its unnormalized counterpart for logging.
pub struct DirichletLoss<'t> {
    pub loss: Var<'t>,
    /// Plain sum of the three terms without per-term count division.
    pub raw: f64,
}

/// Evidential loss over the Dirichlet head. Positive labels pay
/// psi(S) - psi(alpha_pos), negative labels psi(S) - psi(alpha_neg), and
/// uncertain labels pay `lambda_unc` times their total evidence, pushing
/// the head toward low evidence where annotators hedged. Blank entries
/// contribute nothing. Each term is divided by its own entry count so the
/// weights stay batch-size independent; empty terms drop out.
pub fn dirichlet_loss<'t>(
    dout: &DirichletOutput<'t>,
    labels: &LabelMatrix,
    lambda_unc: f64,
) -> DirichletLoss<'t> {
    let shape = dout.strength.shape();
    let (n, c) = (labels.n(), labels.classes());
    assert_eq!(
        shape,
        vec![n, c],
        "dirichlet_loss: strength {shape:?} vs labels [{n}, {c}]"
    );
    let mut pos = vec![0.0; n * c];
    let mut neg = vec![0.0; n * c];
    let mut unc = vec![0.0; n * c];
    let (mut n_pos, mut n_neg, mut n_unc) = (0usize, 0usize, 0usize);
    for (i, &code) in labels.codes().iter().enumerate() {
        match code {
            LabelCode::Pos => {
                pos[i] = 1.0;
                n_pos += 1;
            }
            LabelCode::Neg => {
                neg[i] = 1.0;
                n_neg += 1;
            }
            LabelCode::Unc => {
                unc[i] = 1.0;
                n_unc += 1;
            }
            LabelCode::Blank => {}
        }
    }
    let tape = dout.strength.tape();
    let psi_s = dout.strength.digamma();
    let mut raw = 0.0;
    let mut loss: Option<Var<'t>> = None;
    let mut push = |term: Var<'t>| {
        loss = Some(match loss {
            Some(acc) => acc + term,
            None => term,
        });
    };
    if n_pos > 0 {
        let ind = tape.constant(Tensor::new(vec![n, c], pos));
        let fit = ((psi_s - dout.alpha_pos.digamma()) * ind).sum();
        raw += fit.item();
        push(fit.scale(1.0 / n_pos as f64));
    }
    if n_neg > 0 {
        let ind = tape.constant(Tensor::new(vec![n, c], neg));
        let fit = ((psi_s - dout.alpha_neg.digamma()) * ind).sum();
        raw += fit.item();
        push(fit.scale(1.0 / n_neg as f64));
    }
    if n_unc > 0 {
        let ind = tape.constant(Tensor::new(vec![n, c], unc));
        let pressure = (dout.strength * ind).sum();
        raw += lambda_unc * pressure.item();
        push(pressure.scale(lambda_unc / n_unc as f64));
    }
    DirichletLoss {
        loss: loss.unwrap_or_else(|| tape.scalar(0.0)),
        raw,
    }
}

/// Penalizes correlated channels in a feature map [B, C, H, W]: per
/// sample, the Gram matrix of HW-normalized channel inner products should
/// be the identity. Returns the squared Frobenius deviation averaged over
/// the batch; the combination weight is applied in [`total_loss`].
pub fn orthogonality_loss(features: Var<'_>) -> Var<'_> {
    let shape = features.shape();
    assert_eq!(
        shape.len(),
        4,
        "orthogonality_loss expects [B, C, H, W], got {shape:?}"
    );
    let (b, c) = (shape[0], shape[1]);
    let gram = features.gram();
    let mut eye = Tensor::zeros(vec![c, c]);
    for i in 0..c {
        eye.data_mut()[i * c + i] = 1.0;
    }
    let eye = features.tape().constant(eye);
    let dev = gram - eye;
    (dev * dev).sum().scale(1.0 / b as f64)
}

/// Element-mean Huber penalty pulling learned tap displacements toward
/// zero: quadratic inside `delta`, linear outside.
pub fn offset_loss(offsets: Var<'_>, delta: f64) -> Var<'_> {
    offsets.huber(delta).mean()
}

/// The four scalar components of one step's objective.
pub struct LossParts<'t> {
    pub bce: Var<'t>,
    pub dirichlet: Var<'t>,
    pub offset: Var<'t>,
    pub orth: Var<'t>,
}

/// Combines the parts into L = bce + lambda_dir*dirichlet + offset +
/// lambda_orth*orth, refusing to proceed if any part has gone non-finite.
pub fn total_loss<'t>(parts: &LossParts<'t>, w: &LossWeights) -> Result<Var<'t>> {
    for (name, var) in [
        ("bce", parts.bce),
        ("dirichlet", parts.dirichlet),
        ("offset", parts.offset),
        ("orth", parts.orth),
    ] {
        let value = var.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                part: name.into(),
                value,
            });
        }
    }
    Ok(parts.bce + w.lambda_dir * parts.dirichlet + parts.offset + w.lambda_orth * parts.orth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::tape::Tape;
    use proptest::prelude::any;
    use proptest::{prop_assert, proptest};

    fn matrix(codes: Vec<LabelCode>, classes: usize) -> LabelMatrix {
        let names = (0..classes).map(|c| format!("class_{c}")).collect();
        LabelMatrix::new(names, codes)
    }

    /// Builds a DirichletOutput from explicit (alpha_neg, alpha_pos)
    /// pairs, bypassing the softplus map.
    fn manual_dout<'t>(tape: &'t Tape, pairs: &[(f64, f64)]) -> DirichletOutput<'t> {
        let c = pairs.len();
        let mut flat = Vec::with_capacity(2 * c);
        for &(a0, a1) in pairs {
            flat.push(a0);
            flat.push(a1);
        }
        let alpha = tape.constant(Tensor::new(vec![1, c, 2], flat));
        let alpha_neg = tape.constant(Tensor::new(
            vec![1, c],
            pairs.iter().map(|p| p.0).collect(),
        ));
        let alpha_pos = tape.constant(Tensor::new(
            vec![1, c],
            pairs.iter().map(|p| p.1).collect(),
        ));
        let strength = alpha_neg + alpha_pos;
        let uncertainty = tape.scalar(2.0) / strength;
        DirichletOutput {
            alpha,
            alpha_neg,
            alpha_pos,
            strength,
            uncertainty,
        }
    }

    #[test]
    fn bce_single_positive_at_zero_logit_is_ln_two() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 1], vec![0.0]));
        let out = masked_bce(z, &matrix(vec![LabelCode::Pos], 1));
        assert!(!out.empty_mask);
        assert_eq!(out.mask_count, 1);
        assert!((out.loss.item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_all_uncertain_is_gradient_free_zero() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 3], vec![2.0, -1.0, 0.5]));
        let out = masked_bce(z, &matrix(vec![LabelCode::Unc; 3], 3));
        assert!(out.empty_mask);
        assert_eq!(out.mask_count, 0);
        assert_eq!(out.loss.item(), 0.0);
        assert!(!out.loss.requires_grad());
    }

    #[test]
    fn bce_ignores_masked_logits_bitwise() {
        let labels = matrix(
            vec![LabelCode::Pos, LabelCode::Unc, LabelCode::Neg, LabelCode::Blank],
            4,
        );
        let run = |hidden: f64, blank: f64| {
            let tape = Tape::new();
            let z = tape.leaf(Tensor::new(vec![1, 4], vec![2.0, hidden, -1.0, blank]));
            masked_bce(z, &labels).loss.item().to_bits()
        };
        let a = run(7.0, 0.0);
        assert_eq!(a, run(123.456, 0.0));
        assert_eq!(a, run(-40.0, 55.5));
    }

    #[test]
    fn bce_mask_count_averages_definite_entries_only() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 3.0, 0.0, -9.0]));
        let labels = matrix(
            vec![LabelCode::Pos, LabelCode::Unc, LabelCode::Neg, LabelCode::Blank],
            2,
        );
        let out = masked_bce(z, &labels);
        assert_eq!(out.mask_count, 2);
        // Both live entries sit at z = 0: ln 2 each, mean ln 2.
        assert!((out.loss.item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn evidence_map_saturates_to_maximal_uncertainty() {
        let tape = Tape::new();
        let raw = tape.leaf(Tensor::new(vec![1, 1, 2], vec![-50.0, -50.0]));
        let dout = evidence_to_alpha(raw);
        let u = dout.uncertainty.item();
        assert!((u - 1.0).abs() < 1e-8, "u = {u}");
        for &a in dout.alpha.value().data() {
            assert!(a >= 1.0);
        }
    }

    #[test]
    fn evidence_map_hits_gate_boundary_example() {
        // softplus(raw) = 3 for the positive slot gives alpha = (1, 4).
        let raw_pos = (3f64.exp() - 1.0).ln();
        let tape = Tape::new();
        let raw = tape.leaf(Tensor::new(vec![1, 1, 2], vec![-50.0, raw_pos]));
        let dout = evidence_to_alpha(raw);
        assert!((dout.strength.item() - 5.0).abs() < 1e-9);
        assert!((dout.uncertainty.item() - 0.4).abs() < 1e-9);
    }

    #[test]
    fn dirichlet_positive_label_with_unit_alphas_costs_one() {
        let tape = Tape::new();
        let dout = manual_dout(&tape, &[(1.0, 1.0)]);
        let out = dirichlet_loss(&dout, &matrix(vec![LabelCode::Pos], 1), 0.05);
        assert!((out.loss.item() - 1.0).abs() < 1e-12);
        assert!((out.raw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_confident_correct_evidence_costs_little() {
        let tape = Tape::new();
        let dout = manual_dout(&tape, &[(1.0, 100.0)]);
        let out = dirichlet_loss(&dout, &matrix(vec![LabelCode::Pos], 1), 0.05);
        assert!((out.loss.item() - 0.01).abs() < 1e-10);
    }

    #[test]
    fn dirichlet_uncertain_label_pays_scaled_strength() {
        let tape = Tape::new();
        let dout = manual_dout(&tape, &[(3.0, 4.0)]);
        let out = dirichlet_loss(&dout, &matrix(vec![LabelCode::Unc], 1), 0.05);
        assert!((out.loss.item() - 0.05 * 7.0).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_normalizes_each_term_by_its_count() {
        let tape = Tape::new();
        let dout = manual_dout(&tape, &[(1.0, 1.0), (1.0, 1.0), (3.0, 4.0)]);
        let labels = matrix(
            vec![LabelCode::Pos, LabelCode::Pos, LabelCode::Unc],
            3,
        );
        let out = dirichlet_loss(&dout, &labels, 0.05);
        // Two positive entries, each psi(2) - psi(1) = 1, averaged to 1;
        // one uncertain entry contributing 0.05 * 7.
        assert!((out.loss.item() - (1.0 + 0.35)).abs() < 1e-12);
        assert!((out.raw - (2.0 + 0.35)).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_blank_only_batch_costs_nothing() {
        let tape = Tape::new();
        let dout = manual_dout(&tape, &[(2.0, 3.0)]);
        let out = dirichlet_loss(&dout, &matrix(vec![LabelCode::Blank], 1), 0.05);
        assert_eq!(out.loss.item(), 0.0);
        assert_eq!(out.raw, 0.0);
    }

    #[test]
    fn dirichlet_uncertain_entries_receive_evidence_shrinking_gradient() {
        let tape = Tape::new();
        let raw = tape.leaf(Tensor::new(vec![1, 1, 2], vec![0.3, -0.7]));
        let dout = evidence_to_alpha(raw);
        let out = dirichlet_loss(&dout, &matrix(vec![LabelCode::Unc], 1), 0.05);
        tape.backward(out.loss).unwrap();
        let g = raw.grad().unwrap();
        for &v in g.data() {
            assert!(v > 0.0, "gradient should push evidence down, got {v}");
        }
    }

    #[test]
    fn orthogonal_rows_with_plane_norm_cost_nothing() {
        let tape = Tape::new();
        let f = tape.leaf(Tensor::new(
            vec![1, 2, 1, 4],
            vec![1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0],
        ));
        assert!(orthogonality_loss(f).item().abs() < 1e-12);
    }

    #[test]
    fn zero_features_cost_the_channel_count() {
        let tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(vec![2, 3, 2, 2]));
        assert!((orthogonality_loss(f).item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_matches_double_loop() {
        let mut rng = Rng::new(21);
        let t = Tensor::from_fn(vec![2, 3, 2, 4], |_| rng.normal());
        let tape = Tape::new();
        let loss = orthogonality_loss(tape.leaf(t.clone())).item();

        let (b, c, plane) = (2, 3, 8);
        let mut want = 0.0;
        for bi in 0..b {
            let f = &t.data()[bi * c * plane..][..c * plane];
            for i in 0..c {
                for j in 0..c {
                    let mut dot = 0.0;
                    for p in 0..plane {
                        dot += f[i * plane + p] * f[j * plane + p];
                    }
                    let g = dot / plane as f64;
                    let target = if i == j { 1.0 } else { 0.0 };
                    want += (g - target) * (g - target);
                }
            }
        }
        want /= b as f64;
        assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
    }

    #[test]
    fn offset_examples_cover_both_huber_branches() {
        let tape = Tape::new();
        let zero = tape.leaf(Tensor::zeros(vec![1, 2, 2, 2]));
        assert_eq!(offset_loss(zero, 1.0).item(), 0.0);

        let half = tape.leaf(Tensor::new(vec![1], vec![0.5]));
        assert!((offset_loss(half, 1.0).item() - 0.125).abs() < 1e-15);

        let two = tape.leaf(Tensor::new(vec![1], vec![2.0]));
        assert!((offset_loss(two, 1.0).item() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn total_combination_matches_hand_arithmetic() {
        let w = LossWeights::default();
        let tape = Tape::new();
        let ones = LossParts {
            bce: tape.scalar(1.0),
            dirichlet: tape.scalar(1.0),
            offset: tape.scalar(1.0),
            orth: tape.scalar(1.0),
        };
        assert!((total_loss(&ones, &w).unwrap().item() - 2.205).abs() < 1e-12);

        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let (a, b, c, d) = (rng.normal(), rng.normal(), rng.normal(), rng.normal());
            let parts = LossParts {
                bce: tape.scalar(a),
                dirichlet: tape.scalar(b),
                offset: tape.scalar(c),
                orth: tape.scalar(d),
            };
            let want = a + w.lambda_dir * b + c + w.lambda_orth * d;
            assert!((total_loss(&parts, &w).unwrap().item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_reduce_to_bce_plus_offset() {
        let w = LossWeights {
            lambda_dir: 0.0,
            lambda_orth: 0.0,
            ..LossWeights::default()
        };
        let tape = Tape::new();
        let parts = LossParts {
            bce: tape.scalar(0.7),
            dirichlet: tape.scalar(9.0),
            offset: tape.scalar(0.3),
            orth: tape.scalar(4.0),
        };
        assert!((total_loss(&parts, &w).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_part_is_named() {
        let tape = Tape::new();
        let parts = LossParts {
            bce: tape.scalar(1.0),
            dirichlet: tape.scalar(f64::NAN),
            offset: tape.scalar(0.0),
            orth: tape.scalar(0.0),
        };
        let err = total_loss(&parts, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("dirichlet"), "{err}");
    }

    proptest! {
        #[test]
        fn alpha_strength_and_uncertainty_invariants(
            raws in proptest::collection::vec(-30.0f64..30.0, 6)
        ) {
            let tape = Tape::new();
            let raw = tape.leaf(Tensor::new(vec![1, 3, 2], raws));
            let dout = evidence_to_alpha(raw);
            for &a in dout.alpha.value().data() {
                prop_assert!(a >= 1.0);
            }
            for &s in dout.strength.value().data() {
                prop_assert!(s >= 2.0);
            }
            for &u in dout.uncertainty.value().data() {
                prop_assert!(u > 0.0 && u <= 1.0);
            }
        }

        #[test]
        fn gate_boundary_algebra_is_exact(s_raw in 2.0f64..50.0) {
            let u = 2.0 / s_raw;
            prop_assert!((u > 0.4) == (s_raw < 5.0));
        }

        #[test]
        fn definite_fit_terms_are_nonnegative(
            raws in proptest::collection::vec(-10.0f64..10.0, 8),
            flips in proptest::collection::vec(any::<bool>(), 4)
        ) {
            let tape = Tape::new();
            let raw = tape.leaf(Tensor::new(vec![1, 4, 2], raws));
            let dout = evidence_to_alpha(raw);
            let codes: Vec<LabelCode> = flips
                .iter()
                .map(|&f| if f { LabelCode::Pos } else { LabelCode::Neg })
                .collect();
            let out = dirichlet_loss(&dout, &matrix(codes, 4), 0.0);
            prop_assert!(out.loss.item() >= 0.0);
        }
    }

    #[test]
    fn boundary_strength_never_abstains_at_matching_tau() {
        // u computed from S = 5 equals 0.4 exactly in binary floating
        // point, so a strict gate at tau = 0.4 keeps the prediction.
        let u = 2.0 / 5.0;
        assert!(!(u > 0.4));
    }
}
