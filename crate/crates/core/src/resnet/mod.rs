//! The residual network family: construction, forward pass, freezing and
//! learning-rate groups.
//!
//! Layout: stem (7×7/2 conv, batch norm, relu, 3×3/2 max pool), four stages
//! of residual blocks (the first block of stages 3–5 downsamples by 2), global
//! average pooling and an affine head. Convolutions carry no bias; each is
//! followed by batch norm. Bottleneck blocks put their stride on the 3×3
//! convolution, and shortcuts become a 1×1 conv + batch norm whenever shape
//! changes.

mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{BatchNormMode, BatchStats, Element, Gradients, Param, Tensor, TensorError, Var};

pub use config::{BlockKind, NetworkConfig, DEFAULT_RESOLUTION, STANDARD_WIDTHS};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Number of learning-rate groups: stem + stages 2–3, stages 4–5, head.
pub const GROUP_COUNT: usize = 3;

#[derive(Debug, Error)]
pub enum ResnetError {
    #[error("unknown variant {0}; expected 34, 50, 101 or 152")]
    UnknownVariant(u32),
    #[error("the head needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("input batch has shape {got:?}, expected N×{channels}×{resolution}×{resolution}")]
    Resolution {
        got: Vec<usize>,
        channels: usize,
        resolution: usize,
    },
    #[error("no block {block} in stage {stage}")]
    NoSuchBlock { stage: usize, block: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ResnetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Only the head affine; backbone batch-norm statistics are frozen too.
    HeadOnly,
    All,
}

/// How fresh parameters are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// N(0, 2/fan_in) weights, γ = 1, β = 0, running statistics (0, 1).
    He { seed: u64 },
    /// Everything zero except running variances (1); used before loading weights.
    Zeros,
}

/// Non-trainable named state (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T: Element = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    stride: usize,
    pad: usize,
}

/// One residual unit: `relu(branch(x) + shortcut(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    branch: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn has_identity_shortcut(&self) -> bool {
        self.shortcut.is_none()
    }

    /// Output channels of each branch convolution, in order.
    pub fn branch_widths<T: Element>(&self, net: &Network<T>) -> Vec<usize> {
        self.branch
            .iter()
            .map(|l| net.params[l.weight].tensor.shape()[0])
            .collect()
    }
}

/// Spatial extents and widths observed during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageTrace {
    /// (channels, height, width) after the stem conv and after stages 2–5.
    pub stages: Vec<(usize, usize, usize)>,
    pub pooled_width: usize,
}

impl StageTrace {
    pub fn spatial_extents(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.1).collect()
    }
}

struct RunningUpdate<T: Element> {
    mean: usize,
    var: usize,
    stats: BatchStats<T>,
}

/// Result of [`Network::forward`]: logits plus what is needed to hand
/// gradients and batch statistics back to the network.
pub struct Forward<T: Element> {
    pub logits: Var<T>,
    pub trace: StageTrace,
    bindings: Vec<(usize, Var<T>)>,
    updates: Vec<RunningUpdate<T>>,
}

impl<T: Element> Forward<T> {
    /// The graph leaf standing for parameter `index` in this pass.
    pub fn param_var(&self, index: usize) -> Option<&Var<T>> {
        self.bindings.iter().find(|(i, _)| *i == index).map(|(_, v)| v)
    }
}

/// Parameter → learning-rate-group assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGroups {
    pub count: usize,
    /// Group of each parameter, indexed like [`Network::params`].
    pub assignment: Vec<usize>,
}

impl LayerGroups {
    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == group)
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Head {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
pub struct Network<T: Element = f32> {
    config: NetworkConfig,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    stem: ConvBn,
    stages: Vec<Vec<ResidualBlock>>,
    head: Head,
}

struct Builder<T: Element> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    init: Init,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    fn normal(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = match self.init {
            Init::He { .. } => {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut self.rng))).collect()
            }
            Init::Zeros => vec![T::zero(); n],
        };
        Tensor::new(shape, data).expect("nonzero extents")
    }

    fn constant(&self, len: usize, value: f64) -> Tensor<T> {
        Tensor::full(vec![len], T::from_f64_lossy(value)).expect("nonzero extent")
    }

    fn param(&mut self, name: String, tensor: Tensor<T>, group: usize) -> usize {
        self.params
            .push(Param::new(name, tensor.with_requires_grad(true), group));
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.buffers.push(Buffer { name, tensor });
        self.buffers.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        prefix: &str,
        conv: &str,
        bn: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        group: usize,
    ) -> ConvBn {
        let w = self.normal(vec![cout, cin, k, k], cin * k * k);
        let weight = self.param(format!("{prefix}.{conv}.weight"), w, group);
        let g = match self.init {
            Init::He { .. } => self.constant(cout, 1.0),
            Init::Zeros => self.constant(cout, 0.0),
        };
        let gamma = self.param(format!("{prefix}.{bn}.gamma"), g, group);
        let b = Tensor::zeros(vec![cout]).expect("nonzero");
        let beta = self.param(format!("{prefix}.{bn}.beta"), b, group);
        let running_mean = self.buffer(
            format!("{prefix}.{bn}.running_mean"),
            Tensor::zeros(vec![cout]).expect("nonzero"),
        );
        let running_var = self.buffer(format!("{prefix}.{bn}.running_var"), self.constant(cout, 1.0));
        ConvBn {
            weight,
            gamma,
            beta,
            running_mean,
            running_var,
            stride,
            pad: k / 2,
        }
    }
}

fn stage_group(stage: usize) -> usize {
    // stages are numbered 2..=5
    if stage <= 3 {
        0
    } else {
        1
    }
}

impl<T: Element> Network<T> {
    /// Builds the network described by `config`.
    pub fn build(config: NetworkConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let seed = match init {
            Init::He { seed } => seed,
            Init::Zeros => 0,
        };
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            init,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let stem = b.conv_bn("stem", "conv", "bn", config.input_channels, config.widths[0], 7, 2, 0);
        let stem = ConvBn { pad: 3, ..stem };

        let expansion = config.block.expansion();
        let mut in_ch = config.widths[0];
        let mut stages = Vec::with_capacity(4);
        for (s, (&count, &width)) in config.stage_blocks.iter().zip(&config.widths).enumerate() {
            let stage_no = s + 2;
            let group = stage_group(stage_no);
            let out_ch = width * expansion;
            let mut blocks = Vec::with_capacity(count);
            for i in 0..count {
                let stride = if i == 0 && s > 0 { 2 } else { 1 };
                let prefix = format!("stage{stage_no}.block{i}");
                let branch = match config.block {
                    BlockKind::Basic => vec![
                        b.conv_bn(&prefix, "conv1", "bn1", in_ch, width, 3, stride, group),
                        b.conv_bn(&prefix, "conv2", "bn2", width, width, 3, 1, group),
                    ],
                    BlockKind::Bottleneck => vec![
                        b.conv_bn(&prefix, "conv1", "bn1", in_ch, width, 1, 1, group),
                        b.conv_bn(&prefix, "conv2", "bn2", width, width, 3, stride, group),
                        b.conv_bn(&prefix, "conv3", "bn3", width, out_ch, 1, 1, group),
                    ],
                };
                let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
                    b.conv_bn(
                        &format!("{prefix}.shortcut"),
                        "conv",
                        "bn",
                        in_ch,
                        out_ch,
                        1,
                        stride,
                        group,
                    )
                });
                blocks.push(ResidualBlock {
                    kind: config.block,
                    in_channels: in_ch,
                    out_channels: out_ch,
                    stride,
                    branch,
                    shortcut,
                });
                in_ch = out_ch;
            }
            stages.push(blocks);
        }

        let features = config.feature_width();
        let w = b.normal(vec![features, config.num_classes], features);
        let weight = b.param("head.weight".into(), w, 2);
        let bias = b.param("head.bias".into(), Tensor::zeros(vec![config.num_classes])?, 2);

        Ok(Network {
            config,
            params: b.params,
            buffers: b.buffers,
            stem,
            stages,
            head: Head { weight, bias },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn head_indices(&self) -> [usize; 2] {
        [self.head.weight, self.head.bias]
    }

    pub fn block(&self, stage: usize, index: usize) -> Result<&ResidualBlock> {
        stage
            .checked_sub(2)
            .and_then(|s| self.stages.get(s))
            .and_then(|blocks| blocks.get(index))
            .ok_or(ResnetError::NoSuchBlock { stage, block: index })
    }

    /// Convolution and affine layers, excluding projection shortcuts.
    pub fn weight_layer_count(&self) -> usize {
        1 + self.stages.iter().flatten().map(|b| b.branch.len()).sum::<usize>() + 1
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).count()
    }

    pub fn set_trainable(&mut self, policy: FreezePolicy) {
        let head = self.head_indices();
        for (i, p) in self.params.iter_mut().enumerate() {
            let on = match policy {
                FreezePolicy::All => true,
                FreezePolicy::HeadOnly => head.contains(&i),
            };
            p.tensor.set_requires_grad(on);
        }
    }

    pub fn layer_groups(&self) -> LayerGroups {
        LayerGroups {
            count: GROUP_COUNT,
            assignment: self.params.iter().map(|p| p.group).collect(),
        }
    }

    /// Little-endian bytes of every backbone parameter and buffer, in order.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        let head = self.head_indices();
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            if !head.contains(&i) {
                out.extend(p.tensor.to_le_bytes());
            }
        }
        for b in &self.buffers {
            out.extend(b.tensor.to_le_bytes());
        }
        out
    }

    /// Bytes of every parameter and buffer.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = self.backbone_bytes();
        for i in self.head_indices() {
            out.extend(self.params[i].tensor.to_le_bytes());
        }
        out
    }

    /// Swaps in a freshly initialized head for `num_classes` outputs. Backbone
    /// tensors are left untouched; the head keeps its previous trainability.
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(ResnetError::TooFewClasses(num_classes));
        }
        let features = self.config.feature_width();
        let trainable = self.params[self.head.weight].trainable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, (2.0 / features as f64).sqrt()).expect("positive std");
        let w = Tensor::from_fn(vec![features, num_classes], |_| {
            T::from_f64_lossy(dist.sample(&mut rng))
        })?;
        self.params[self.head.weight].tensor = w.with_requires_grad(trainable);
        self.params[self.head.bias].tensor = Tensor::zeros(vec![num_classes])?.with_requires_grad(trainable);
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// Same network with every tensor converted to `U`.
    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param::new(p.name.clone(), p.tensor.cast(), p.group))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    tensor: b.tensor.cast(),
                })
                .collect(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            [n, ch, h, w] if *n > 0 && *ch == c.input_channels && *h == c.resolution && *w == c.resolution => Ok(()),
            _ => Err(ResnetError::Resolution {
                got: shape.to_vec(),
                channels: c.input_channels,
                resolution: c.resolution,
            }),
        }
    }

    /// Runs a batch (N×C×R×R) through the network.
    ///
    /// In [`Mode::Train`] batch norm layers whose parameters are trainable use
    /// batch statistics; frozen layers and [`Mode::Eval`] use running
    /// statistics. Pass the result to [`Network::finish_pass`] to record
    /// gradients and running-statistic updates.
    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
        self.check_input(input.shape())?;
        let mut pass = Pass::new(self, mode);
        let x = Var::constant(input);
        let mut trace = StageTrace::default();

        let x = pass.conv_bn(&x, &self.stem, true)?;
        let dims = x.shape().to_vec();
        trace.stages.push((dims[1], dims[2], dims[3]));
        let mut x = x.max_pool2d(3, 2, 1)?;
        for blocks in &self.stages {
            for block in blocks {
                x = pass.block(&x, block)?;
            }
            let d = x.shape().to_vec();
            trace.stages.push((d[1], d[2], d[3]));
        }
        let pooled = x.global_avg_pool2d()?;
        trace.pooled_width = pooled.shape()[1];
        let weight = pass.param(self.head.weight);
        let bias = pass.param(self.head.bias);
        let logits = pooled.affine(&weight, &bias)?;

        Ok(Forward {
            logits,
            trace,
            bindings: pass.bindings(),
            updates: pass.updates,
        })
    }

    /// Runs a single residual block on `input`. Running-statistic updates
    /// from a training-mode call are discarded.
    pub fn block_forward(&self, stage: usize, index: usize, input: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let block = self.block(stage, index)?;
        if input.value().dims4("block_forward")?[1] != block.in_channels {
            return Err(TensorError::ChannelMismatch {
                op: "block_forward",
                input: input.shape()[1],
                kernel: block.in_channels,
            }
            .into());
        }
        Pass::new(self, mode).block(input, block)
    }

    /// Stores this pass's parameter gradients on the parameters (clearing
    /// stale ones) and folds its batch statistics into the running estimates.
    pub fn finish_pass(&mut self, pass: Forward<T>, grads: Option<&Gradients<T>>) -> Result<()> {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
        if let Some(grads) = grads {
            for (i, var) in &pass.bindings {
                if let Some(g) = grads.get(var) {
                    self.params[*i].tensor.set_grad(g.data().to_vec())?;
                }
            }
        }
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for u in pass.updates {
            for (slot, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let running = self.buffers[slot].tensor.data_mut();
                running.iter_mut().zip(batch).for_each(|(r, &b)| *r = keep * *r + m * b);
            }
        }
        Ok(())
    }

    /// Class probabilities for a batch, in eval mode.
    pub fn predict_proba(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.forward(input, Mode::Eval)?;
        let [n, k] = f.logits.value().dims2("predict_proba")?;
        let (_, probs) = crate::tensor::kernels::softmax_cross_entropy(f.logits.value().data(), &vec![0; n], k);
        Ok(Tensor::new(vec![n, k], probs)?)
    }
}

struct Pass<'a, T: Element> {
    net: &'a Network<T>,
    mode: Mode,
    leaves: Vec<Option<Var<T>>>,
    updates: Vec<RunningUpdate<T>>,
}

impl<'a, T: Element> Pass<'a, T> {
    fn new(net: &'a Network<T>, mode: Mode) -> Self {
        Pass {
            net,
            mode,
            leaves: vec![None; net.params.len()],
            updates: Vec::new(),
        }
    }

    fn param(&mut self, index: usize) -> Var<T> {
        self.leaves[index]
            .get_or_insert_with(|| Var::leaf(&self.net.params[index].tensor))
            .clone()
    }

    fn bindings(&mut self) -> Vec<(usize, Var<T>)> {
        self.leaves
            .iter_mut()
            .enumerate()
            .filter_map(|(i, v)| v.take().map(|v| (i, v)))
            .collect()
    }

    fn conv_bn(&mut self, x: &Var<T>, layer: &ConvBn, relu: bool) -> Result<Var<T>> {
        let w = self.param(layer.weight);
        let y = x.conv2d(&w, None, layer.stride, layer.pad)?;
        let gamma = self.param(layer.gamma);
        let beta = self.param(layer.beta);
        let bn_mode = if self.mode == Mode::Train && self.net.params[layer.gamma].trainable() {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval
        };
        let (y, stats) = y.batch_norm2d(
            &gamma,
            &beta,
            &self.net.buffers[layer.running_mean].tensor,
            &self.net.buffers[layer.running_var].tensor,
            bn_mode,
            T::from_f64_lossy(BN_EPS),
        )?;
        if let Some(stats) = stats {
            self.updates.push(RunningUpdate {
                mean: layer.running_mean,
                var: layer.running_var,
                stats,
            });
        }
        Ok(if relu { y.relu()? } else { y })
    }

    fn block(&mut self, x: &Var<T>, block: &ResidualBlock) -> Result<Var<T>> {
        let mut y = x.clone();
        let last = block.branch.len() - 1;
        for (i, layer) in block.branch.iter().enumerate() {
            y = self.conv_bn(&y, layer, i < last)?;
        }
        let skip = match &block.shortcut {
            Some(layer) => self.conv_bn(x, layer, false)?,
            None => x.clone(),
        };
        Ok(y.add(&skip)?.relu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(block: BlockKind) -> Network<f64> {
        let cfg = NetworkConfig::custom(block, [1, 1, 1, 1], [4, 4, 8, 8], 2, 32).unwrap();
        Network::build(cfg, Init::He { seed: 1 }).unwrap()
    }

    #[test]
    fn layer_counts_follow_structure() {
        for depth in [34, 50] {
            let net = Network::<f32>::build(NetworkConfig::variant(depth, 2).unwrap(), Init::Zeros).unwrap();
            assert_eq!(net.weight_layer_count(), depth as usize);
        }
    }

    #[test]
    fn head_only_freezes_everything_but_the_head() {
        let mut net = tiny(BlockKind::Bottleneck);
        net.set_trainable(FreezePolicy::HeadOnly);
        assert_eq!(net.trainable_count(), 2);
        let names: Vec<_> = net
            .params()
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(names, ["head.weight", "head.bias"]);
        net.set_trainable(FreezePolicy::All);
        assert_eq!(net.trainable_count(), net.params().len());
    }

    #[test]
    fn groups_partition_parameters() {
        let net = tiny(BlockKind::Basic);
        let g = net.layer_groups();
        assert_eq!(g.count, 3);
        let total: usize = (0..3).map(|i| g.members(i).len()).sum();
        assert_eq!(total, net.params().len());
        assert_eq!(g.members(2), net.head_indices().to_vec());
        assert_eq!(g.assignment[net.param_index("stem.conv.weight").unwrap()], 0);
        assert_eq!(g.assignment[net.param_index("stage3.block0.conv1.weight").unwrap()], 0);
        assert_eq!(g.assignment[net.param_index("stage4.block0.conv1.weight").unwrap()], 1);
        assert_eq!(
            g.assignment[net.param_index("stage5.block0.shortcut.bn.beta").unwrap()],
            1
        );
    }

    #[test]
    fn wrong_resolution_rejected() {
        let net = tiny(BlockKind::Basic);
        let x = Tensor::<f64>::zeros(vec![1, 3, 64, 64]).unwrap();
        assert!(matches!(
            net.forward(&x, Mode::Eval),
            Err(ResnetError::Resolution { .. })
        ));
    }

    #[test]
    fn block_rejects_channel_mismatch() {
        let net = tiny(BlockKind::Basic);
        let x = Var::constant(&Tensor::<f64>::zeros(vec![1, 5, 8, 8]).unwrap());
        assert!(net.block_forward(2, 0, &x, Mode::Eval).is_err());
        assert!(matches!(net.block(6, 0), Err(ResnetError::NoSuchBlock { .. })));
    }

    #[test]
    fn replace_head_keeps_backbone() {
        let mut net = tiny(BlockKind::Basic);
        let before = net.backbone_bytes();
        net.replace_head(5, 9).unwrap();
        assert_eq!(net.backbone_bytes(), before);
        assert_eq!(net.config().num_classes, 5);
        let x = Tensor::<f64>::full(vec![2, 3, 32, 32], 0.5).unwrap();
        assert_eq!(net.forward(&x, Mode::Eval).unwrap().logits.shape(), &[2, 5]);
    }

    #[test]
    fn train_pass_updates_running_stats_unless_frozen() {
        let mut net = tiny(BlockKind::Basic);
        let x = Tensor::<f64>::from_fn(vec![2, 3, 32, 32], |i| ((i * 37) % 11) as f64 / 11.0).unwrap();
        let before = net.buffers()[0].tensor.clone();
        let f = net.forward(&x, Mode::Train).unwrap();
        net.finish_pass(f, None).unwrap();
        assert_ne!(net.buffers()[0].tensor, before);

        net.set_trainable(FreezePolicy::HeadOnly);
        let snapshot = net.backbone_bytes();
        let f = net.forward(&x, Mode::Train).unwrap();
        net.finish_pass(f, None).unwrap();
        assert_eq!(net.backbone_bytes(), snapshot);
    }
}
