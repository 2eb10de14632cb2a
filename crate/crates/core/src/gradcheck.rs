//! Central-difference verification of every analytic gradient: primitive
//! tape operations, each network layer, each loss term, and a miniature
//! end-to-end model. Inputs are drawn away from the kinks of relu, abs,
//! and bilinear sampling so the finite differences measure the smooth
//! piece the adjoints implement.

use crate::config::{LossWeights, NetworkConfig};
use crate::data::{LabelCode, LabelMatrix};
use crate::layers::{Mode, Model, ParamId, ParamStore};
use crate::losses;
use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Half-width of the central difference.
pub const STEP: f64 = 1e-5;
/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub comparisons: usize,
    pub passed: bool,
}

/// |a - n| over max(|a|, |n|, 1), so tiny derivatives are judged on an
/// absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares the recorded gradient of `f` against central differences,
/// perturbing every entry of every input. `f` must map leaves to a
/// scalar root and be deterministic.
pub fn check<F>(name: &str, inputs: Vec<Tensor>, f: F) -> CheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars);
    tape.backward(root).expect("gradcheck roots must be scalar");
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let value = |ins: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut work = inputs;
    let mut max_rel_err = 0.0f64;
    let mut comparisons = 0;
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let fp = value(&work);
            work[i].data_mut()[j] = orig - STEP;
            let fm = value(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            max_rel_err = max_rel_err.max(relative_error(grads[i].data()[j], numeric));
            comparisons += 1;
        }
    }
    CheckReport {
        name: name.into(),
        max_rel_err,
        comparisons,
        passed: max_rel_err < TOLERANCE,
    }
}

fn model_objective<'t>(
    tape: &'t Tape,
    model: &Model,
    store: &ParamStore,
    images: &Tensor,
    labels: &LabelMatrix,
    w: &LossWeights,
) -> (Var<'t>, Vec<(ParamId, Var<'t>)>) {
    let pass = model.forward(tape, store, images, Mode::Train);
    let bce = losses::masked_bce(pass.logits, labels);
    let dout = losses::evidence_to_alpha(pass.evidence_raw);
    let dir = losses::dirichlet_loss(&dout, labels, w.lambda_unc);
    let parts = losses::LossParts {
        bce: bce.loss,
        dirichlet: dir.loss,
        offset: losses::offset_loss(pass.offsets, w.huber_delta),
        orth: losses::orthogonality_loss(pass.block_features),
    };
    let total = losses::total_loss(&parts, w).expect("objective stays finite during checking");
    (total, pass.bound)
}

/// End-to-end check of a miniature network: every trainable parameter is
/// perturbed through the full objective. The offset branch and the heads
/// are re-randomized after init so sampling positions sit between lattice
/// points and the logits sit away from zero.
pub fn check_model(seed: u64) -> CheckReport {
    let cfg = NetworkConfig {
        input_size: 8,
        input_channels: 1,
        stem_channels: 4,
        dense_blocks: 1,
        layers_per_block: 1,
        growth_rate: 3,
        num_classes: 2,
        kernel_size: 3,
    };
    let mut rng = Rng::new(seed);
    let (model, mut store) = Model::build(&cfg, &mut rng).expect("miniature config is valid");
    store
        .assign_param(
            "deform.offset.weight",
            Tensor::from_fn(vec![18, 4, 3, 3], |_| rng.normal_with(0.0, 0.01)),
        )
        .unwrap();
    store
        .assign_param(
            "deform.offset.bias",
            Tensor::from_fn(vec![18], |_| 0.3 + 0.1 * rng.uniform()),
        )
        .unwrap();
    let f = model.feature_channels;
    store
        .assign_param(
            "head.bce.weight",
            Tensor::from_fn(vec![f, 2], |_| rng.normal_with(0.0, 0.3)),
        )
        .unwrap();
    store
        .assign_param(
            "head.evidence.weight",
            Tensor::from_fn(vec![f, 4], |_| rng.normal_with(0.0, 0.3)),
        )
        .unwrap();

    let images = Tensor::from_fn(vec![2, 1, 8, 8], |_| rng.uniform());
    let labels = LabelMatrix::new(
        vec!["a".into(), "b".into()],
        vec![
            LabelCode::Pos,
            LabelCode::Unc,
            LabelCode::Neg,
            LabelCode::Blank,
        ],
    );
    let w = LossWeights::default();

    let tape = Tape::new();
    let (root, bound) = model_objective(&tape, &model, &store, &images, &labels, &w);
    tape.backward(root).expect("objective is scalar");
    let grads: Vec<(ParamId, Tensor)> = bound
        .iter()
        .map(|(id, v)| (*id, v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()))))
        .collect();

    let value = |s: &ParamStore| {
        let tape = Tape::new();
        model_objective(&tape, &model, s, &images, &labels, &w).0.item()
    };

    let mut max_rel_err = 0.0f64;
    let mut comparisons = 0;
    for (id, g) in &grads {
        for j in 0..g.len() {
            let orig = store.param(*id).data()[j];
            store.param_mut(*id).data_mut()[j] = orig + STEP;
            let fp = value(&store);
            store.param_mut(*id).data_mut()[j] = orig - STEP;
            let fm = value(&store);
            store.param_mut(*id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            max_rel_err = max_rel_err.max(relative_error(g.data()[j], numeric));
            comparisons += 1;
        }
    }
    CheckReport {
        name: "model.end_to_end".into(),
        max_rel_err,
        comparisons,
        passed: max_rel_err < TOLERANCE,
    }
}

fn signed_in(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.uniform_in(lo, hi);
    if rng.chance(0.5) {
        m
    } else {
        -m
    }
}

/// Runs the whole battery with inputs drawn from `seed`.
pub fn run_all(seed: u64) -> Vec<CheckReport> {
    let mut rng = Rng::new(seed);
    let mut reports = Vec::new();

    let a = Tensor::from_fn(vec![2, 3], |_| signed_in(&mut rng, 0.2, 1.5));
    let b = Tensor::from_fn(vec![2, 3], |_| rng.uniform_in(0.8, 1.8));
    reports.push(check("op.elementwise", vec![a, b], |_, v| {
        let y = v[0] * v[1] + v[0] / v[1] - v[1] + (-v[0]).scale(0.5).add_scalar(0.25);
        (y * y).sum()
    }));

    let x = Tensor::from_fn(vec![2, 4], |_| rng.uniform_in(0.5, 3.5));
    reports.push(check("op.scalar_maps", vec![x], |_, v| {
        (v[0].exp().scale(0.05)
            + v[0].log().scale(0.3)
            + v[0].sigmoid()
            + v[0].softplus().scale(0.2)
            + v[0].digamma().scale(0.1))
        .sum()
    }));

    let x = Tensor::from_fn(vec![3, 3], |_| signed_in(&mut rng, 0.1, 1.5));
    reports.push(check("op.relu_abs", vec![x], |_, v| {
        (v[0].relu() + v[0].abs_via_relu().softplus()).sum()
    }));

    let x = Tensor::from_fn(vec![2, 8], |i| {
        if i % 2 == 0 {
            signed_in(&mut rng, 0.0, 0.7)
        } else {
            signed_in(&mut rng, 1.3, 2.2)
        }
    });
    reports.push(check("op.huber", vec![x], |_, v| v[0].huber(1.0).sum()));

    let a = Tensor::from_fn(vec![3, 4], |_| rng.normal());
    let b = Tensor::from_fn(vec![4, 2], |_| rng.normal());
    let c = Tensor::from_fn(vec![2, 3], |_| rng.normal());
    reports.push(check("op.matmul_transpose", vec![a, b, c], |_, v| {
        (v[0].matmul(v[1]).transpose() * v[2]).sum()
    }));

    let x = Tensor::from_fn(vec![2, 3, 4, 4], |_| rng.normal());
    let y = Tensor::from_fn(vec![2, 2, 4, 4], |_| rng.normal());
    reports.push(check("op.concat_slice_pad_reshape", vec![x, y], |_, v| {
        let z = v[0].concat_channels(v[1]);
        let s = z.slice(vec![(0, 2), (1, 4), (0, 4), (0, 4)]);
        let p = s.pad(vec![(0, 0), (0, 0), (1, 1), (1, 1)]);
        let r = p.reshape(vec![2, 108]);
        (r * r).sum()
    }));

    let x = Tensor::from_fn(vec![2, 3, 4, 4], |_| rng.normal());
    reports.push(check("op.pooling", vec![x], |_, v| {
        let p = v[0].avg_pool2();
        (p * p).global_avg_pool().sum()
    }));

    let x = Tensor::from_fn(vec![2, 3, 4, 4], |_| rng.normal());
    let s = Tensor::from_fn(vec![3, 1, 1], |_| rng.uniform_in(0.5, 1.5));
    let t = Tensor::from_fn(vec![3, 1, 1], |_| rng.normal());
    reports.push(check("op.broadcast_affine", vec![x, s, t], |_, v| {
        let y = v[0] * v[1] + v[2];
        (y * y).sum()
    }));

    let x = Tensor::from_fn(vec![2, 3, 2, 2], |_| rng.normal());
    reports.push(check("op.gram", vec![x], |_, v| v[0].gram().sum()));

    let x = Tensor::from_fn(vec![2, 2, 5, 5], |_| rng.normal());
    let w = Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.normal_with(0.0, 0.4));
    let b = Tensor::from_fn(vec![3], |_| rng.normal_with(0.0, 0.2));
    reports.push(check("layer.conv", vec![x, w, b], |_, v| {
        let y = v[0].conv2d(v[1], v[2], 1, 1);
        (y * y).sum()
    }));

    let x = Tensor::from_fn(vec![2, 2, 7, 7], |_| rng.normal());
    let w = Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.normal_with(0.0, 0.4));
    let b = Tensor::from_fn(vec![3], |_| rng.normal_with(0.0, 0.2));
    reports.push(check("layer.conv_strided", vec![x, w, b], |_, v| {
        let y = v[0].conv2d(v[1], v[2], 2, 0);
        (y * y).sum()
    }));

    let x = Tensor::from_fn(vec![1, 2, 5, 5], |_| rng.normal());
    let off = Tensor::from_fn(vec![1, 18, 5, 5], |_| signed_in(&mut rng, 0.25, 0.65));
    let w = Tensor::from_fn(vec![2, 2, 3, 3], |_| rng.normal_with(0.0, 0.4));
    let b = Tensor::from_fn(vec![2], |_| rng.normal_with(0.0, 0.2));
    reports.push(check("layer.deformable", vec![x, off, w, b], |_, v| {
        let y = v[0].deform_conv2d(v[1], v[2], v[3], 1);
        (y * y).sum()
    }));

    let x = Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.normal());
    let gamma = Tensor::from_fn(vec![2], |_| rng.uniform_in(0.8, 1.2));
    let beta = Tensor::from_fn(vec![2], |_| rng.normal_with(0.0, 0.2));
    reports.push(check("layer.batch_norm", vec![x, gamma, beta], |_, v| {
        let (y, _, _) = v[0].batch_norm_train(v[1], v[2], 1e-5);
        (y * y).sum()
    }));

    let x = Tensor::from_fn(vec![2, 4, 4, 4], |_| rng.normal());
    let gamma = Tensor::from_fn(vec![4], |_| rng.uniform_in(0.8, 1.2));
    let beta = Tensor::from_fn(vec![4], |_| rng.normal_with(0.0, 0.2));
    let w = Tensor::from_fn(vec![3, 4, 3, 3], |_| rng.normal_with(0.0, 0.3));
    let b = Tensor::from_fn(vec![3], |_| rng.normal_with(0.0, 0.2));
    reports.push(check("layer.dense", vec![x, gamma, beta, w, b], |_, v| {
        let (y, _, _) = v[0].batch_norm_train(v[1], v[2], 1e-5);
        let y = y.relu();
        let y = y.conv2d(v[3], v[4], 1, 1);
        let z = v[0].concat_channels(y);
        (z * z).sum()
    }));

    let pooled = Tensor::from_fn(vec![3, 5], |_| rng.normal());
    let wb = Tensor::from_fn(vec![5, 2], |_| rng.normal_with(0.0, 0.4));
    let bb = Tensor::from_fn(vec![2], |_| rng.normal_with(0.0, 0.2));
    let we = Tensor::from_fn(vec![5, 4], |_| rng.normal_with(0.0, 0.4));
    let be = Tensor::from_fn(vec![4], |_| rng.normal_with(0.0, 0.2));
    reports.push(check("layer.heads", vec![pooled, wb, bb, we, be], |_, v| {
        let logits = v[0].matmul(v[1]) + v[2];
        let evid = (v[0].matmul(v[3]) + v[4]).reshape(vec![3, 2, 2]);
        (logits * logits).sum() + (evid * evid).sum()
    }));

    let logits = Tensor::from_fn(vec![2, 3], |_| signed_in(&mut rng, 0.3, 2.0));
    let bce_labels = LabelMatrix::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![
            LabelCode::Pos,
            LabelCode::Unc,
            LabelCode::Neg,
            LabelCode::Blank,
            LabelCode::Pos,
            LabelCode::Neg,
        ],
    );
    reports.push(check("loss.masked_bce", vec![logits], move |_, v| {
        losses::masked_bce(v[0], &bce_labels).loss
    }));

    let raw = Tensor::from_fn(vec![2, 3, 2], |_| rng.uniform_in(-2.0, 2.0));
    let dir_labels = LabelMatrix::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![
            LabelCode::Pos,
            LabelCode::Unc,
            LabelCode::Neg,
            LabelCode::Unc,
            LabelCode::Pos,
            LabelCode::Blank,
        ],
    );
    reports.push(check("loss.dirichlet", vec![raw], move |_, v| {
        let dout = losses::evidence_to_alpha(v[0]);
        losses::dirichlet_loss(&dout, &dir_labels, 0.05).loss
    }));

    let feats = Tensor::from_fn(vec![2, 3, 3, 3], |_| rng.normal());
    reports.push(check("loss.orthogonality", vec![feats], |_, v| {
        losses::orthogonality_loss(v[0])
    }));

    let off = Tensor::from_fn(vec![1, 8, 2, 2], |i| {
        if i % 2 == 0 {
            signed_in(&mut rng, 0.0, 0.7)
        } else {
            signed_in(&mut rng, 1.3, 2.2)
        }
    });
    reports.push(check("loss.offset", vec![off], |_, v| {
        losses::offset_loss(v[0], 1.0)
    }));

    reports.push(check_model(seed.wrapping_add(1)));
    reports
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

/// One fixed-width line per check, suitable for terminal output.
pub fn table(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "{verdict}  {:<28} max_rel_err {:>10.3e}  ({} comparisons)\n",
            r.name, r.max_rel_err, r.comparisons
        ));
    }
    out
}
