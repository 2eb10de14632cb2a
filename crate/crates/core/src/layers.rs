//! Network assembly: stem convolution, the deformable convolution block,
//! densely connected blocks with transitions, global pooling, and the two
//! output heads. Parameters live in a flat named store so the optimizer
//! and the checkpoint format can treat them uniformly; a forward pass
//! binds them onto a tape and returns handles to everything the losses
//! consume.

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the store's insertion order, stable for the lifetime
    /// of the model; optimizer moments align on it.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a non-trainable running-statistics tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(usize);

/// Flat named storage for parameters and batch-norm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

impl ParamStore {
    fn add_param(&mut self, name: String, value: Tensor) -> ParamId {
        self.params.push((name, value));
        ParamId(self.params.len() - 1)
    }

    fn add_buffer(&mut self, name: String, value: Tensor) -> BufferId {
        self.buffers.push((name, value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Tensor) {
        assert_eq!(
            self.buffers[id.0].1.shape(),
            value.shape(),
            "buffer update shape mismatch for {}",
            self.buffers[id.0].0
        );
        self.buffers[id.0].1 = value;
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Overwrites a parameter by name, as checkpoint loading does.
    pub fn assign_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.iter_mut().find(|(n, _)| n == name) {
            Some((_, slot)) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some((_, slot)) => Err(Error::CorruptCheckpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            ))),
            None => Err(Error::CorruptCheckpoint(format!(
                "unknown parameter `{name}`"
            ))),
        }
    }

    /// Overwrites a running-statistics buffer by name.
    pub fn assign_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.buffers.iter_mut().find(|(n, _)| n == name) {
            Some((_, slot)) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some((_, slot)) => Err(Error::CorruptCheckpoint(format!(
                "buffer `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            ))),
            None => Err(Error::CorruptCheckpoint(format!("unknown buffer `{name}`"))),
        }
    }
}

/// Whether a forward pass records gradients and updates batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct ConvDesc {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct BnDesc {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Debug, Clone)]
struct DenseLayerDesc {
    bn: BnDesc,
    conv: ConvDesc,
}

#[derive(Debug, Clone)]
struct DenseBlockDesc {
    layers: Vec<DenseLayerDesc>,
    trans_bn: BnDesc,
    trans_conv: ConvDesc,
}

#[derive(Debug, Clone)]
struct LinearDesc {
    w: ParamId,
    b: ParamId,
}

/// The assembled network: descriptors into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    stem: ConvDesc,
    offset_conv: ConvDesc,
    main_w: ParamId,
    main_b: ParamId,
    deform_pad: usize,
    blocks: Vec<DenseBlockDesc>,
    bce_head: LinearDesc,
    evid_head: LinearDesc,
    /// Channel count entering global average pooling.
    pub feature_channels: usize,
}

/// (channels, spatial extent) of the map entering global average pooling.
pub fn feature_shape(cfg: &NetworkConfig) -> (usize, usize) {
    let mut channels = cfg.stem_channels;
    let mut size = cfg.input_size;
    for _ in 0..cfg.dense_blocks {
        channels = (channels + cfg.layers_per_block * cfg.growth_rate) / 2;
        size /= 2;
    }
    (channels, size)
}

fn conv_init(rng: &mut Rng, out_ch: usize, in_ch: usize, k: usize) -> Tensor {
    let std_dev = (2.0 / (in_ch * k * k) as f64).sqrt();
    Tensor::from_fn(vec![out_ch, in_ch, k, k], |_| rng.normal_with(0.0, std_dev))
}

/// Folds batch-norm parameters and running statistics into the per-channel
/// affine map y = scale·x + shift used at evaluation time.
pub fn bn_eval_transform(
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let scale: Vec<f64> = gamma
        .iter()
        .zip(var)
        .map(|(&g, &v)| g / (v + eps).sqrt())
        .collect();
    let shift: Vec<f64> = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    (scale, shift)
}

/// Everything one forward pass exposes to the objective and the trainer.
pub struct ForwardPass<'t> {
    /// BCE-head outputs, [B, C].
    pub logits: Var<'t>,
    /// Raw evidence outputs, [B, C, 2]; last index 0 holds negative
    /// evidence, 1 positive.
    pub evidence_raw: Var<'t>,
    /// Learned tap displacements from the deformable block, [B, 2k², H, W].
    pub offsets: Var<'t>,
    /// Deformable block output, the map the orthogonality penalty reads.
    pub block_features: Var<'t>,
    /// Tape handle per bound parameter, for gradient collection.
    pub bound: Vec<(ParamId, Var<'t>)>,
    /// Batch-norm running statistics to fold in after the step.
    pub buffer_updates: Vec<(BufferId, Tensor)>,
}

struct Binder<'a, 't> {
    tape: &'t Tape,
    store: &'a ParamStore,
    mode: Mode,
    bound: Vec<(ParamId, Var<'t>)>,
    updates: Vec<(BufferId, Tensor)>,
}

impl<'a, 't> Binder<'a, 't> {
    fn bind(&mut self, id: ParamId) -> Var<'t> {
        let value = self.store.param(id).clone();
        let var = match self.mode {
            Mode::Train => self.tape.leaf(value),
            Mode::Eval => self.tape.constant(value),
        };
        self.bound.push((id, var));
        var
    }

    fn conv(&mut self, x: Var<'t>, desc: &ConvDesc) -> Var<'t> {
        let w = self.bind(desc.w);
        let b = self.bind(desc.b);
        x.conv2d(w, b, desc.stride, desc.pad)
    }

    fn batch_norm(&mut self, x: Var<'t>, desc: &BnDesc) -> Var<'t> {
        match self.mode {
            Mode::Train => {
                let gamma = self.bind(desc.gamma);
                let beta = self.bind(desc.beta);
                let (y, mean, var) = x.batch_norm_train(gamma, beta, BN_EPS);
                let shape = x.shape();
                let n = (shape[0] * shape[2] * shape[3]) as f64;
                let unbias = n / (n - 1.0);
                let old_mean = self.store.buffer(desc.mean).data();
                let old_var = self.store.buffer(desc.var).data();
                let c = mean.len();
                let new_mean = Tensor::new(
                    vec![c],
                    mean.iter()
                        .zip(old_mean)
                        .map(|(&m, &o)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * m)
                        .collect(),
                );
                let new_var = Tensor::new(
                    vec![c],
                    var.iter()
                        .zip(old_var)
                        .map(|(&v, &o)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * v * unbias)
                        .collect(),
                );
                self.updates.push((desc.mean, new_mean));
                self.updates.push((desc.var, new_var));
                y
            }
            Mode::Eval => {
                let c = self.store.param(desc.gamma).len();
                let (scale, shift) = bn_eval_transform(
                    self.store.param(desc.gamma).data(),
                    self.store.param(desc.beta).data(),
                    self.store.buffer(desc.mean).data(),
                    self.store.buffer(desc.var).data(),
                    BN_EPS,
                );
                let s = self.tape.constant(Tensor::new(vec![c, 1, 1], scale));
                let t = self.tape.constant(Tensor::new(vec![c, 1, 1], shift));
                x * s + t
            }
        }
    }
}

impl Model {
    /// Builds the network for `cfg`, drawing fresh parameters from `rng`.
    /// Convolutions use fan-in-scaled normal init, the offset branch starts
    /// at exactly zero, and the heads start near zero.
    pub fn build(cfg: &NetworkConfig, rng: &mut Rng) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let k = cfg.kernel_size;
        let same_pad = (k - 1) / 2;

        let stem = ConvDesc {
            w: store.add_param(
                "stem.weight".into(),
                conv_init(rng, cfg.stem_channels, cfg.input_channels, k),
            ),
            b: store.add_param("stem.bias".into(), Tensor::zeros(vec![cfg.stem_channels])),
            stride: 1,
            pad: same_pad,
        };

        let offset_channels = 2 * k * k;
        let offset_conv = ConvDesc {
            w: store.add_param(
                "deform.offset.weight".into(),
                Tensor::zeros(vec![offset_channels, cfg.stem_channels, 3, 3]),
            ),
            b: store.add_param(
                "deform.offset.bias".into(),
                Tensor::zeros(vec![offset_channels]),
            ),
            stride: 1,
            pad: 1,
        };
        let main_w = store.add_param(
            "deform.main.weight".into(),
            conv_init(rng, cfg.stem_channels, cfg.stem_channels, k),
        );
        let main_b = store.add_param(
            "deform.main.bias".into(),
            Tensor::zeros(vec![cfg.stem_channels]),
        );

        let mut blocks = Vec::with_capacity(cfg.dense_blocks);
        let mut channels = cfg.stem_channels;
        for b in 0..cfg.dense_blocks {
            let mut layers = Vec::with_capacity(cfg.layers_per_block);
            for l in 0..cfg.layers_per_block {
                let prefix = format!("block{b}.layer{l}");
                let bn = add_bn(&mut store, &prefix, channels);
                let conv = ConvDesc {
                    w: store.add_param(
                        format!("{prefix}.conv.weight"),
                        conv_init(rng, cfg.growth_rate, channels, 3),
                    ),
                    b: store.add_param(
                        format!("{prefix}.conv.bias"),
                        Tensor::zeros(vec![cfg.growth_rate]),
                    ),
                    stride: 1,
                    pad: 1,
                };
                layers.push(DenseLayerDesc { bn, conv });
                channels += cfg.growth_rate;
            }
            let prefix = format!("block{b}.transition");
            let trans_bn = add_bn(&mut store, &prefix, channels);
            let out = channels / 2;
            let trans_conv = ConvDesc {
                w: store.add_param(
                    format!("{prefix}.conv.weight"),
                    conv_init(rng, out, channels, 1),
                ),
                b: store.add_param(format!("{prefix}.conv.bias"), Tensor::zeros(vec![out])),
                stride: 1,
                pad: 0,
            };
            blocks.push(DenseBlockDesc {
                layers,
                trans_bn,
                trans_conv,
            });
            channels = out;
        }

        let features = channels;
        let c = cfg.num_classes;
        let bce_head = LinearDesc {
            w: store.add_param(
                "head.bce.weight".into(),
                Tensor::from_fn(vec![features, c], |_| rng.normal_with(0.0, 0.01)),
            ),
            b: store.add_param("head.bce.bias".into(), Tensor::zeros(vec![c])),
        };
        let evid_head = LinearDesc {
            w: store.add_param(
                "head.evidence.weight".into(),
                Tensor::from_fn(vec![features, 2 * c], |_| rng.normal_with(0.0, 0.01)),
            ),
            b: store.add_param("head.evidence.bias".into(), Tensor::zeros(vec![2 * c])),
        };

        Ok((
            Model {
                config: cfg.clone(),
                stem,
                offset_conv,
                main_w,
                main_b,
                deform_pad: same_pad,
                blocks,
                bce_head,
                evid_head,
                feature_channels: features,
            },
            store,
        ))
    }

    /// Runs the network over `images` ([B, in_ch, S, S]), recording onto
    /// `tape`. Train mode binds parameters as differentiable leaves and
    /// reports running-statistics updates; eval mode binds constants and
    /// normalizes with the stored statistics.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        images: &Tensor,
        mode: Mode,
    ) -> ForwardPass<'t> {
        let s = images.shape();
        assert!(
            s.len() == 4
                && s[1] == self.config.input_channels
                && s[2] == self.config.input_size
                && s[3] == self.config.input_size,
            "forward: images {s:?} do not match configured input [B, {}, {}, {}]",
            self.config.input_channels,
            self.config.input_size,
            self.config.input_size
        );
        let batch = s[0];
        let mut ctx = Binder {
            tape,
            store,
            mode,
            bound: Vec::new(),
            updates: Vec::new(),
        };

        let x = tape.constant(images.clone());
        let stem_out = ctx.conv(x, &self.stem);

        let offsets = ctx.conv(stem_out, &self.offset_conv);
        let mw = ctx.bind(self.main_w);
        let mb = ctx.bind(self.main_b);
        let block_features = stem_out.deform_conv2d(offsets, mw, mb, self.deform_pad);

        let mut cur = block_features;
        for block in &self.blocks {
            for layer in &block.layers {
                let y = ctx.batch_norm(cur, &layer.bn).relu();
                let y = ctx.conv(y, &layer.conv);
                cur = cur.concat_channels(y);
            }
            let t = ctx.batch_norm(cur, &block.trans_bn).relu();
            let t = ctx.conv(t, &block.trans_conv);
            cur = t.avg_pool2();
        }

        let pooled = cur.global_avg_pool();
        let wb = ctx.bind(self.bce_head.w);
        let bb = ctx.bind(self.bce_head.b);
        let logits = pooled.matmul(wb) + bb;
        let we = ctx.bind(self.evid_head.w);
        let be = ctx.bind(self.evid_head.b);
        let evidence_raw =
            (pooled.matmul(we) + be).reshape(vec![batch, self.config.num_classes, 2]);

        ForwardPass {
            logits,
            evidence_raw,
            offsets,
            block_features,
            bound: ctx.bound,
            buffer_updates: ctx.updates,
        }
    }
}

fn add_bn(store: &mut ParamStore, prefix: &str, channels: usize) -> BnDesc {
    BnDesc {
        gamma: store.add_param(format!("{prefix}.bn.gamma"), Tensor::full(vec![channels], 1.0)),
        beta: store.add_param(format!("{prefix}.bn.beta"), Tensor::zeros(vec![channels])),
        mean: store.add_buffer(
            format!("{prefix}.bn.running_mean"),
            Tensor::zeros(vec![channels]),
        ),
        var: store.add_buffer(
            format!("{prefix}.bn.running_var"),
            Tensor::full(vec![channels], 1.0),
        ),
    }
}

/// Folds a step's batch-norm statistics into the store.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(BufferId, Tensor)>) {
    for (id, value) in updates {
        store.set_buffer(id, value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_cfg() -> NetworkConfig {
        NetworkConfig::default()
    }

    fn random_images(rng: &mut Rng, b: usize, cfg: &NetworkConfig) -> Tensor {
        Tensor::from_fn(
            vec![b, cfg.input_channels, cfg.input_size, cfg.input_size],
            |_| rng.uniform(),
        )
    }

    #[test]
    fn default_config_produces_expected_shapes() {
        let cfg = default_cfg();
        let mut rng = Rng::new(1);
        let (model, store) = Model::build(&cfg, &mut rng).unwrap();
        let images = random_images(&mut rng, 3, &cfg);
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &images, Mode::Train);
        assert_eq!(out.logits.shape(), vec![3, 5]);
        assert_eq!(out.evidence_raw.shape(), vec![3, 5, 2]);
        assert_eq!(out.offsets.shape(), vec![3, 18, 32, 32]);
        assert_eq!(out.block_features.shape(), vec![3, 16, 32, 32]);
        assert_eq!(feature_shape(&cfg), (28, 8));
        assert_eq!(model.feature_channels, 28);
    }

    #[test]
    fn wider_class_count_flows_through_heads() {
        let mut cfg = default_cfg();
        cfg.num_classes = 13;
        let mut rng = Rng::new(2);
        let (model, store) = Model::build(&cfg, &mut rng).unwrap();
        let images = random_images(&mut rng, 2, &cfg);
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &images, Mode::Eval);
        assert_eq!(out.logits.shape(), vec![2, 13]);
        assert_eq!(out.evidence_raw.shape(), vec![2, 13, 2]);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = default_cfg();
        let (_, store) = Model::build(&cfg, &mut Rng::new(3)).unwrap();

        // Independent accumulation, layer by layer.
        let k = cfg.kernel_size;
        let conv = |cin: usize, cout: usize, kk: usize| cout * cin * kk * kk + cout;
        let mut expected = conv(cfg.input_channels, cfg.stem_channels, k);
        expected += conv(cfg.stem_channels, 2 * k * k, 3);
        expected += conv(cfg.stem_channels, cfg.stem_channels, k);
        let mut ch = cfg.stem_channels;
        for _ in 0..cfg.dense_blocks {
            for _ in 0..cfg.layers_per_block {
                expected += 2 * ch + conv(ch, cfg.growth_rate, 3);
                ch += cfg.growth_rate;
            }
            expected += 2 * ch + conv(ch, ch / 2, 1);
            ch /= 2;
        }
        expected += ch * cfg.num_classes + cfg.num_classes;
        expected += ch * 2 * cfg.num_classes + 2 * cfg.num_classes;

        assert_eq!(store.scalar_count(), expected);
        assert_eq!(store.scalar_count(), 27513);
    }

    #[test]
    fn shape_calculator_matches_forward_for_other_configs() {
        for (blocks, layers, growth, stem, size) in
            [(1usize, 2usize, 4usize, 6usize, 16usize), (3, 1, 3, 8, 24), (2, 0, 8, 9, 12)]
        {
            let cfg = NetworkConfig {
                input_size: size,
                input_channels: 1,
                stem_channels: stem,
                dense_blocks: blocks,
                layers_per_block: layers,
                growth_rate: growth,
                num_classes: 2,
                kernel_size: 3,
            };
            cfg.validate().unwrap();
            let mut rng = Rng::new(7);
            let (model, store) = Model::build(&cfg, &mut rng).unwrap();
            let images = random_images(&mut rng, 2, &cfg);
            let tape = Tape::new();
            let out = model.forward(&tape, &store, &images, Mode::Train);
            let (ch, sp) = feature_shape(&cfg);
            assert_eq!(model.feature_channels, ch);
            assert_eq!(sp, size >> blocks);
            assert_eq!(out.logits.shape(), vec![2, 2]);
            assert_eq!(out.block_features.shape(), vec![2, stem, size, size]);
        }
    }

    #[test]
    fn empty_dense_block_is_transition_only() {
        let cfg = NetworkConfig {
            input_size: 16,
            input_channels: 1,
            stem_channels: 8,
            dense_blocks: 1,
            layers_per_block: 0,
            growth_rate: 4,
            num_classes: 2,
            kernel_size: 3,
        };
        assert_eq!(feature_shape(&cfg), (4, 8));
        let mut rng = Rng::new(4);
        let (model, store) = Model::build(&cfg, &mut rng).unwrap();
        let images = random_images(&mut rng, 1, &cfg);
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &images, Mode::Train);
        assert_eq!(out.logits.shape(), vec![1, 2]);
        assert_eq!(model.feature_channels, 4);
    }

    #[test]
    fn pre_transition_channels_follow_growth_rule() {
        // 8 input channels, 2 layers of growth 4 concatenate to 16.
        let cfg = NetworkConfig {
            input_size: 8,
            input_channels: 1,
            stem_channels: 8,
            dense_blocks: 1,
            layers_per_block: 2,
            growth_rate: 4,
            num_classes: 2,
            kernel_size: 3,
        };
        assert_eq!(feature_shape(&cfg), ((8 + 2 * 4) / 2, 4));
    }

    #[test]
    fn invalid_configs_name_the_offending_key() {
        let mut cfg = default_cfg();
        cfg.kernel_size = 4;
        let err = Model::build(&cfg, &mut Rng::new(1)).unwrap_err();
        assert!(err.to_string().contains("kernel_size"), "{err}");

        let mut cfg = default_cfg();
        cfg.input_size = 34;
        let err = Model::build(&cfg, &mut Rng::new(1)).unwrap_err();
        assert!(err.to_string().contains("input_size"), "{err}");
    }

    #[test]
    fn offset_branch_starts_at_exact_zero() {
        let (model, store) = Model::build(&default_cfg(), &mut Rng::new(5)).unwrap();
        assert!(store
            .param(model.offset_conv.w)
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(store
            .param(model.offset_conv.b)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn initial_block_output_equals_plain_convolution_bitwise() {
        let cfg = default_cfg();
        let mut rng = Rng::new(6);
        let (model, store) = Model::build(&cfg, &mut rng).unwrap();
        let images = random_images(&mut rng, 2, &cfg);
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &images, Mode::Train);
        assert!(out.offsets.value().data().iter().all(|&v| v == 0.0));

        let x = tape.constant(images);
        let sw = tape.constant(store.param(model.stem.w).clone());
        let sb = tape.constant(store.param(model.stem.b).clone());
        let stem_out = x.conv2d(sw, sb, 1, 1);
        let mw = tape.constant(store.param(model.main_w).clone());
        let mb = tape.constant(store.param(model.main_b).clone());
        let plain = stem_out.conv2d(mw, mb, 1, model.deform_pad);

        let got = out.block_features.value();
        let want = plain.value();
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zeroed_heads_output_zero() {
        let cfg = default_cfg();
        let mut rng = Rng::new(8);
        let (model, mut store) = Model::build(&cfg, &mut rng).unwrap();
        for id in [model.bce_head.w, model.bce_head.b, model.evid_head.w, model.evid_head.b] {
            let zero = Tensor::zeros(store.param(id).shape().to_vec());
            *store.param_mut(id) = zero;
        }
        let images = random_images(&mut rng, 2, &cfg);
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &images, Mode::Train);
        assert!(out.logits.value().data().iter().all(|&v| v == 0.0));
        assert!(out.evidence_raw.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_outputs_match_hand_linear_algebra() {
        let mut cfg = default_cfg();
        cfg.input_size = 8;
        cfg.stem_channels = 4;
        cfg.dense_blocks = 1;
        cfg.layers_per_block = 1;
        cfg.growth_rate = 4;
        cfg.num_classes = 2;
        let mut rng = Rng::new(9);
        let (model, mut store) = Model::build(&cfg, &mut rng).unwrap();
        let f = model.feature_channels;
        *store.param_mut(model.bce_head.w) =
            Tensor::from_fn(vec![f, 2], |i| 0.1 * i as f64 - 0.15);
        *store.param_mut(model.bce_head.b) = Tensor::new(vec![2], vec![0.3, -0.2]);

        let images = random_images(&mut rng, 1, &cfg);
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &images, Mode::Train);
        let z = out.logits.value();
        let w = store.param(model.bce_head.w).clone();
        let b = store.param(model.bce_head.b).clone();

        // The forward pass is deterministic in the inputs, so a one-hot
        // probe weight on a fresh tape reads out each pooled feature.
        let mut pooled = vec![0.0; f];
        for (j, slot) in pooled.iter_mut().enumerate() {
            let mut probe = store.clone();
            let mut w_j = Tensor::zeros(vec![f, 2]);
            w_j.data_mut()[j * 2] = 1.0;
            *probe.param_mut(model.bce_head.w) = w_j;
            *probe.param_mut(model.bce_head.b) = Tensor::zeros(vec![2]);
            let tp = Tape::new();
            *slot = model
                .forward(&tp, &probe, &images, Mode::Train)
                .logits
                .value()
                .data()[0];
        }
        for cidx in 0..2 {
            let mut want = b.data()[cidx];
            for (j, &p) in pooled.iter().enumerate() {
                want += p * w.data()[j * 2 + cidx];
            }
            let got = z.data()[cidx];
            assert!(
                (got - want).abs() < 1e-10,
                "class {cidx}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn train_mode_collects_batch_norm_updates() {
        let cfg = default_cfg();
        let mut rng = Rng::new(10);
        let (model, mut store) = Model::build(&cfg, &mut rng).unwrap();
        let images = random_images(&mut rng, 4, &cfg);
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &images, Mode::Train);
        // Two tensors per batch-norm site: blocks have one per layer plus
        // one per transition.
        let sites = cfg.dense_blocks * (cfg.layers_per_block + 1);
        assert_eq!(out.buffer_updates.len(), 2 * sites);
        apply_buffer_updates(&mut store, out.buffer_updates);

        let tape2 = Tape::new();
        let eval_out = model.forward(&tape2, &store, &images, Mode::Eval);
        assert_eq!(eval_out.buffer_updates.len(), 0);
        assert!(eval_out.logits.value().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bn_eval_transform_matches_direct_formula() {
        let gamma = [2.0, 1.0];
        let beta = [0.5, -1.0];
        let mean = [1.0, 3.0];
        let var = [4.0, 0.25];
        let (scale, shift) = bn_eval_transform(&gamma, &beta, &mean, &var, 0.0);
        assert!((scale[0] - 1.0).abs() < 1e-12);
        assert!((shift[0] - (0.5 - 1.0)).abs() < 1e-12);
        assert!((scale[1] - 2.0).abs() < 1e-12);
        assert!((shift[1] - (-1.0 - 6.0)).abs() < 1e-12);

        // x = 5 in channel 0: (5 - 1)/2 * 2 + 0.5 = 4.5.
        assert!(((5.0 * scale[0] + shift[0]) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn assign_param_round_trips_and_rejects_strangers() {
        let (_, mut store) = Model::build(&default_cfg(), &mut Rng::new(11)).unwrap();
        let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
        assert!(names.contains(&"stem.weight".to_string()));
        assert!(names.contains(&"head.evidence.bias".to_string()));
        let w = store.params().next().unwrap().1.clone();
        store.assign_param("stem.weight", w).unwrap();
        assert!(store.assign_param("stem.weight", Tensor::zeros(vec![1])).is_err());
        assert!(store.assign_param("nope", Tensor::zeros(vec![1])).is_err());
    }
}
