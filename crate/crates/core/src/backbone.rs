//! U-Net style sequence-to-sequence backbone with either the two event heads
//! (center and duration) or a single epoch head.
//!
//! The stage list is given in table order: encoder stages with increasing
//! stride, the deepest stage (bottleneck), then decoder stages mirroring the
//! encoder strides. Encoder stages downsample with a strided convolution.
//! Decoder stages upsample the deeper features by nearest-neighbour repetition
//! and concatenate them after the skip features of the encoder stage with the
//! same stride. The bottleneck and decoder stages hold two blocks, optionally
//! separated by dropout. A block is conv → batch norm → ELU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Graph, Mode, NodeId, RunningStats, Tensor};
use crate::error::{Error, Result};
use crate::losses::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub filters: usize,
    pub kernel_size: usize,
    /// Total downsampling factor of the stage's output.
    pub stride_factor: usize,
}

impl StageSpec {
    pub const fn new(filters: usize, kernel_size: usize, stride_factor: usize) -> Self {
        Self { filters, kernel_size, stride_factor }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Event,
    Epoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Standard,
    /// Depthwise convolution followed by a pointwise one.
    Separable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    UNet,
    /// Channel-independent encoder with attention-gated skips. Only the stage
    /// table can be loaded; building it is not supported.
    ChannelAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stages: Vec<StageSpec>,
    pub head: HeadKind,
    pub head_kernel: usize,
    pub input_channels: usize,
    pub conv: ConvKind,
    /// Blocks per encoder stage after stage 0 (stage 0 always has one).
    pub encoder_blocks: usize,
    /// Whether stage 0 has batch normalization.
    pub stage0_norm: bool,
    /// Dropout rate between the two blocks of the bottleneck and decoder stages.
    pub dropout: f64,
    /// Initial center probability encoded in the center head bias.
    pub center_prior: Option<f64>,
    pub topology: Topology,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::simulated(HeadKind::Event)
    }
}

impl BackboneConfig {
    /// The simulated-events backbone: plain convolutions, 1/16 output rate.
    pub fn simulated(head: HeadKind) -> Self {
        let s = StageSpec::new;
        Self {
            stages: vec![
                s(32, 20, 1),
                s(64, 20, 4),
                s(64, 15, 16),
                s(64, 15, 64),
                s(64, 10, 256),
                s(64, 5, 1024),
                s(64, 10, 256),
                s(64, 15, 64),
                s(64, 15, 16),
            ],
            head,
            head_kernel: 7,
            input_channels: 1,
            conv: ConvKind::Standard,
            encoder_blocks: 1,
            stage0_norm: false,
            dropout: 0.0,
            center_prior: None,
            topology: Topology::UNet,
        }
    }

    /// The EEG-artefact backbone: separable convolutions, two blocks per
    /// stage after stage 0, dropout in the upward path, size-1 heads.
    pub fn eeg_artefact(head: HeadKind) -> Self {
        let s = StageSpec::new;
        Self {
            stages: vec![
                s(32, 20, 1),
                s(64, 20, 4),
                s(64, 15, 16),
                s(64, 15, 64),
                s(64, 10, 256),
                s(64, 5, 1024),
                s(64, 5, 4096),
                s(64, 5, 1024),
                s(64, 10, 256),
                s(64, 15, 64),
                s(64, 15, 16),
            ],
            head_kernel: 1,
            conv: ConvKind::Separable,
            encoder_blocks: 2,
            stage0_norm: true,
            dropout: 0.1,
            ..Self::simulated(head)
        }
    }

    /// The seizure backbone's stage table (1/256 output rate). [`Model::build`]
    /// rejects it.
    pub fn seizure(head: HeadKind) -> Self {
        let s = StageSpec::new;
        Self {
            stages: vec![
                s(16, 15, 1),
                s(32, 15, 4),
                s(64, 15, 16),
                s(64, 7, 64),
                s(128, 3, 256),
                s(128, 3, 1024),
                s(64, 3, 1024),
                s(64, 5, 256),
            ],
            topology: Topology::ChannelAttention,
            ..Self::simulated(head)
        }
    }

    /// Small network with the same 1/16 output rate, for tests and quick runs.
    /// The bottleneck sits at 1/256 so the receptive field (about 10 s at
    /// 256 Hz) still spans the longest events.
    pub fn tiny(head: HeadKind) -> Self {
        let s = StageSpec::new;
        Self {
            stages: vec![
                s(16, 9, 1),
                s(32, 9, 4),
                s(32, 7, 16),
                s(32, 7, 64),
                s(32, 5, 256),
                s(32, 7, 64),
                s(32, 7, 16),
            ],
            ..Self::simulated(head)
        }
    }

    /// Two stages with four filters; output at 1/4 of the input rate.
    pub fn gradient_probe(head: HeadKind) -> Self {
        let s = StageSpec::new;
        Self { stages: vec![s(4, 5, 1), s(4, 5, 4)], ..Self::simulated(head) }
    }

    fn bottleneck_index(&self) -> usize {
        let max = self.stages.iter().map(|s| s.stride_factor).max().unwrap_or(1);
        self.stages.iter().position(|s| s.stride_factor == max).unwrap_or(0)
    }

    /// Input lengths must be multiples of this.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride_factor).max().unwrap_or(1)
    }

    /// Downsampling factor of the head outputs.
    pub fn output_stride(&self) -> usize {
        self.stages.last().map_or(1, |s| s.stride_factor)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.stages.len() < 2 {
            return bad("at least two stages are required".into());
        }
        if self.stages.iter().any(|s| s.filters == 0 || s.kernel_size == 0 || s.stride_factor == 0) {
            return bad("filters, kernel sizes and stride factors must be positive".into());
        }
        if self.stages[0].stride_factor != 1 {
            return bad("stage 0 must have stride factor 1".into());
        }
        if self.input_channels == 0 || self.head_kernel == 0 || self.encoder_blocks == 0 {
            return bad("input_channels, head_kernel and encoder_blocks must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if let Some(p) = self.center_prior {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("center_prior must lie in (0, 1), got {p}"));
            }
        }
        let b = self.bottleneck_index();
        for w in self.stages[..=b].windows(2) {
            let (lo, hi) = (w[0].stride_factor, w[1].stride_factor);
            if hi <= lo || hi % lo != 0 {
                return bad(format!("encoder stride factors must grow by integer factors ({lo} -> {hi})"));
            }
        }
        let decoder = &self.stages[b + 1..];
        if decoder.len() > b {
            return bad("more decoder stages than encoder stages".into());
        }
        for (j, d) in decoder.iter().enumerate() {
            let skip = self.stages[b - 1 - j].stride_factor;
            if d.stride_factor != skip {
                return bad(format!(
                    "decoder stage {} has stride factor {} but its skip connection has {skip}",
                    b + 1 + j,
                    d.stride_factor
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum ConvParams {
    Standard { w: usize, b: Option<usize> },
    Separable { depthwise: usize, pointwise: usize, b: Option<usize> },
}

#[derive(Debug, Clone)]
struct Block {
    conv: ConvParams,
    stride: usize,
    /// `(gamma, beta, running-stats index)`
    norm: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<Block>,
    /// Upsampling factor and skip stage for decoder stages.
    decoder: Option<(usize, usize)>,
    dropout: bool,
}

#[derive(Debug, Clone)]
enum Head {
    Event { center: (usize, usize), duration: (usize, usize) },
    Epoch { logits: (usize, usize) },
}

/// Head outputs per batch item, at `1/output_stride` of the input rate.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelOutput {
    Event { center: Vec<Vec<f64>>, duration: Vec<Vec<f64>> },
    Epoch { logits: Vec<Vec<f64>> },
}

/// Head nodes of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadNodes {
    Event { center_logits: NodeId, duration: NodeId },
    Epoch { logits: NodeId },
}

/// A forward pass recorded on a graph, with the parameter leaves in
/// [`Model::params`] order.
pub struct Forward {
    pub graph: Graph,
    pub params: Vec<NodeId>,
    pub heads: HeadNodes,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: BackboneConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    stages: Vec<Stage>,
    head: Head,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.push(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    /// Conv weights use `U(±1/√fan_in)`.
    fn conv(&mut self, prefix: &str, kind: ConvKind, cin: usize, cout: usize, k: usize, bias: bool) -> ConvParams {
        match kind {
            ConvKind::Standard => {
                let w = self.uniform(format!("{prefix}.weight"), vec![cout, cin, k], 1.0 / ((cin * k) as f64).sqrt());
                let b =
                    bias.then(|| self.uniform(format!("{prefix}.bias"), vec![cout], 1.0 / ((cin * k) as f64).sqrt()));
                ConvParams::Standard { w, b }
            }
            ConvKind::Separable => {
                let depthwise = self.uniform(format!("{prefix}.depthwise"), vec![cin, 1, k], 1.0 / (k as f64).sqrt());
                let pointwise =
                    self.uniform(format!("{prefix}.pointwise"), vec![cout, cin, 1], 1.0 / (cin as f64).sqrt());
                let b = bias.then(|| self.uniform(format!("{prefix}.bias"), vec![cout], 1.0 / (cin as f64).sqrt()));
                ConvParams::Separable { depthwise, pointwise, b }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        prefix: String,
        kind: ConvKind,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        norm: bool,
    ) -> Block {
        let conv = self.conv(&format!("{prefix}.conv"), kind, cin, cout, k, !norm);
        let norm = norm.then(|| {
            let g = self.push(format!("{prefix}.norm.gamma"), Tensor::new(vec![cout], vec![1.0; cout]).unwrap());
            let b = self.push(format!("{prefix}.norm.beta"), Tensor::zeros(vec![cout]));
            self.stat_names.push(format!("{prefix}.norm"));
            self.stats.push(RunningStats::new(cout));
            (g, b, self.stats.len() - 1)
        });
        Block { conv, stride, norm }
    }

    fn head(&mut self, name: &str, cin: usize, k: usize, bias: f64) -> (usize, usize) {
        let w = self.uniform(format!("head.{name}.weight"), vec![1, cin, k], 1.0 / ((cin * k) as f64).sqrt());
        let b = self.push(format!("head.{name}.bias"), Tensor::new(vec![1], vec![bias]).unwrap());
        (w, b)
    }
}

impl Model {
    /// Builds a freshly initialized model; `seed` drives the initialization.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        if config.topology != Topology::UNet {
            return Err(Error::Unsupported(
                "the channel-independent attention-gated backbone can be configured but not built".into(),
            ));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bld = Builder { rng: &mut rng, names: vec![], params: vec![], stat_names: vec![], stats: vec![] };
        let b = config.bottleneck_index();
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut channels: Vec<usize> = Vec::with_capacity(config.stages.len());
        let mut cin = config.input_channels;
        let mut prev_stride = 1;
        for (i, spec) in config.stages.iter().enumerate() {
            let (n_blocks, decoder, stride) = if i == 0 {
                (1, None, 1)
            } else if i < b {
                (config.encoder_blocks, None, spec.stride_factor / prev_stride)
            } else if i == b {
                (2, None, spec.stride_factor / prev_stride)
            } else {
                let skip = 2 * b - i;
                cin += channels[skip];
                (2, Some((prev_stride / spec.stride_factor, skip)), 1)
            };
            let norm = i > 0 || config.stage0_norm;
            let blocks = (0..n_blocks)
                .map(|j| {
                    let (c, s) = if j == 0 { (cin, stride) } else { (spec.filters, 1) };
                    bld.block(format!("stage{i}.block{j}"), config.conv, c, spec.filters, spec.kernel_size, s, norm)
                })
                .collect();
            stages.push(Stage { blocks, decoder, dropout: i >= b && config.dropout > 0.0 });
            channels.push(spec.filters);
            cin = spec.filters;
            prev_stride = spec.stride_factor;
        }
        let k = config.head_kernel;
        let head = match config.head {
            HeadKind::Event => {
                let prior = config.center_prior.map_or(0.0, |p| (p / (1.0 - p)).ln());
                Head::Event { center: bld.head("center", cin, k, prior), duration: bld.head("duration", cin, k, 0.0) }
            }
            HeadKind::Epoch => Head::Epoch { logits: bld.head("logits", cin, k, 0.0) },
        };
        let Builder { names, params, stat_names, stats, .. } = bld;
        Ok(Self { config: config.clone(), names, params, stat_names, stats, stages, head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, l] = shape else {
            return Err(Error::Shape(format!("input must be [batch, channels, length], got {shape:?}")));
        };
        if *c != self.config.input_channels {
            return Err(Error::Shape(format!("model expects {} input channels, got {c}", self.config.input_channels)));
        }
        let total = self.config.total_stride();
        if *l == 0 || l % total != 0 {
            return Err(Error::Shape(format!("input length {l} is not a positive multiple of {total}")));
        }
        Ok(())
    }

    /// Records a forward pass of `batch` on a new graph. Training mode uses
    /// batch statistics (and updates the running ones) and enables dropout.
    pub fn forward(&mut self, batch: Tensor, mode: Mode, rng: &mut impl Rng) -> Result<Forward> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let train = mode == Mode::Train;
        let params: Vec<NodeId> = self.params.iter().map(|p| g.leaf(p.clone(), train)).collect();
        let x = g.leaf(batch, false);

        let mut skips: Vec<NodeId> = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for stage in &self.stages {
            if let Some((factor, skip)) = stage.decoder {
                let up = g.upsample_nearest(h, factor)?;
                h = g.concat_channels(skips[skip], up)?;
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                if j == 1 && stage.dropout {
                    h = g.dropout(h, self.config.dropout, mode, rng)?;
                }
                h = match block.conv {
                    ConvParams::Standard { w, b } => g.conv1d(h, params[w], b.map(|b| params[b]), block.stride, 1)?,
                    ConvParams::Separable { depthwise, pointwise, b } => {
                        let groups = g.value(h).shape()[1];
                        let d = g.conv1d(h, params[depthwise], None, block.stride, groups)?;
                        g.conv1d(d, params[pointwise], b.map(|b| params[b]), 1, 1)?
                    }
                };
                if let Some((gamma, beta, s)) = block.norm {
                    h = g.batchnorm1d(h, params[gamma], params[beta], &mut self.stats[s], mode)?;
                }
                h = g.elu(h);
            }
            skips.push(h);
        }

        let heads = match self.head {
            Head::Event { center, duration } => {
                let center_logits = g.conv1d(h, params[center.0], Some(params[center.1]), 1, 1)?;
                let d = g.conv1d(h, params[duration.0], Some(params[duration.1]), 1, 1)?;
                HeadNodes::Event { center_logits, duration: g.sigmoid(d) }
            }
            Head::Epoch { logits } => {
                HeadNodes::Epoch { logits: g.conv1d(h, params[logits.0], Some(params[logits.1]), 1, 1)? }
            }
        };
        Ok(Forward { graph: g, params, heads })
    }

    /// Eval-mode outputs; the model is left untouched.
    pub fn predict(&self, batch: Tensor) -> Result<ModelOutput> {
        let mut scratch = self.clone();
        let fwd = scratch.forward(batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(output_of(&fwd))
    }

    /// Parameters and running statistics plus `metadata` (the config is added
    /// under `"backbone"`).
    pub fn to_checkpoint(&self, mut metadata: serde_json::Value) -> Result<Checkpoint> {
        if !metadata.is_object() {
            metadata = serde_json::json!({ "info": metadata });
        }
        metadata["backbone"] = serde_json::to_value(&self.config)?;
        let mut tensors: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        for (name, s) in self.stat_names.iter().zip(&self.stats) {
            let c = s.mean.len();
            tensors.push((format!("{name}.running_mean"), Tensor::new(vec![c], s.mean.clone())?));
            tensors.push((format!("{name}.running_var"), Tensor::new(vec![c], s.var.clone())?));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt
            .metadata
            .get("backbone")
            .ok_or_else(|| Error::Config("checkpoint has no backbone configuration".into()))?;
        let config: BackboneConfig = serde_json::from_value(cfg.clone())?;
        let mut model = Self::build(&config, 0)?;
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = ckpt.get(name).ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Shape(format!("tensor {name}: expected {shape:?}, found {:?}", t.shape())));
            }
            Ok(t.clone())
        };
        for i in 0..model.params.len() {
            model.params[i] = fetch(&model.names[i], model.params[i].shape())?;
        }
        for (name, s) in model.stat_names.iter().zip(model.stats.iter_mut()) {
            let c = s.mean.len();
            s.mean = fetch(&format!("{name}.running_mean"), &[c])?.into_data();
            s.var = fetch(&format!("{name}.running_var"), &[c])?.into_data();
        }
        Ok(model)
    }
}

/// Reads the head values of a forward pass; the center goes through a sigmoid.
pub fn output_of(fwd: &Forward) -> ModelOutput {
    let rows = |id: NodeId, f: &dyn Fn(f64) -> f64| -> Vec<Vec<f64>> {
        let t = fwd.graph.value(id);
        let l = t.shape()[2];
        t.data().chunks(l).map(|r| r.iter().map(|&v| f(v)).collect()).collect()
    };
    match fwd.heads {
        HeadNodes::Event { center_logits, duration } => {
            ModelOutput::Event { center: rows(center_logits, &sigmoid), duration: rows(duration, &|v| v) }
        }
        HeadNodes::Epoch { logits } => ModelOutput::Epoch { logits: rows(logits, &|v| v) },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn noise(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_preset_matches_table() {
        let cfg = BackboneConfig::default();
        let filters: Vec<_> = cfg.stages.iter().map(|s| s.filters).collect();
        let kernels: Vec<_> = cfg.stages.iter().map(|s| s.kernel_size).collect();
        let strides: Vec<_> = cfg.stages.iter().map(|s| s.stride_factor).collect();
        assert_eq!(filters, [32, 64, 64, 64, 64, 64, 64, 64, 64]);
        assert_eq!(kernels, [20, 20, 15, 15, 10, 5, 10, 15, 15]);
        assert_eq!(strides, [1, 4, 16, 64, 256, 1024, 256, 64, 16]);
        assert_eq!(cfg.head_kernel, 7);
        assert_eq!(cfg.output_stride(), 16);
    }

    #[test]
    fn full_size_output_lengths() {
        for head in [HeadKind::Event, HeadKind::Epoch] {
            let model = Model::build(&BackboneConfig::simulated(head), 0).unwrap();
            let out = model.predict(noise(vec![1, 1, 5120], 2)).unwrap();
            match out {
                ModelOutput::Event { center, duration } => {
                    assert_eq!((center[0].len(), duration[0].len()), (320, 320));
                    assert!(center[0].iter().chain(&duration[0]).all(|&v| v > 0.0 && v < 1.0));
                }
                ModelOutput::Epoch { logits } => assert_eq!(logits[0].len(), 320),
            }
            assert!(matches!(model.predict(Tensor::zeros(vec![1, 1, 5121])), Err(Error::Shape(_))));
            assert!(matches!(model.predict(Tensor::zeros(vec![1, 2, 5120])), Err(Error::Shape(_))));
        }
    }

    #[test]
    fn separable_preset_builds() {
        let model = Model::build(&BackboneConfig::eeg_artefact(HeadKind::Event), 0).unwrap();
        let out = model.predict(noise(vec![1, 1, 4096], 3)).unwrap();
        let ModelOutput::Event { center, .. } = out else { panic!("event head expected") };
        assert_eq!(center[0].len(), 256);
        assert!(matches!(Model::build(&BackboneConfig::seizure(HeadKind::Event), 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn invalid_stage_lists() {
        let s = StageSpec::new;
        let mut cfg = BackboneConfig::tiny(HeadKind::Event);
        cfg.stages = vec![s(4, 3, 2), s(4, 3, 8)];
        assert!(Model::build(&cfg, 0).is_err());
        cfg.stages = vec![s(4, 3, 1), s(4, 3, 6), s(4, 3, 8)];
        assert!(Model::build(&cfg, 0).is_err());
        cfg.stages = vec![s(4, 3, 1), s(4, 3, 4), s(4, 3, 16), s(4, 3, 1)];
        assert!(Model::build(&cfg, 0).is_err());
        cfg.stages = vec![s(4, 3, 1)];
        assert!(Model::build(&cfg, 0).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_batch_independent() {
        let mut model = Model::build(&BackboneConfig::tiny(HeadKind::Event), 5).unwrap();
        // move the running statistics away from their initial values
        model.forward(noise(vec![2, 1, 1024], 9), Mode::Train, &mut rng()).unwrap();
        let x = noise(vec![2, 1, 1024], 4);
        let a = model.predict(x.clone()).unwrap();
        assert_eq!(a, model.predict(x.clone()).unwrap());
        let ModelOutput::Event { center, duration } = a else { panic!() };
        for i in 0..2 {
            let xi = Tensor::new(vec![1, 1, 1024], x.data()[i * 1024..(i + 1) * 1024].to_vec()).unwrap();
            let ModelOutput::Event { center: c, duration: d } = model.predict(xi).unwrap() else { panic!() };
            for (p, q) in c[0].iter().chain(&d[0]).zip(center[i].iter().chain(&duration[i])) {
                assert!((p - q).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut model = Model::build(&BackboneConfig::tiny(HeadKind::Epoch), 3).unwrap();
        model.forward(noise(vec![2, 1, 256], 1), Mode::Train, &mut rng()).unwrap();
        let ckpt = model.to_checkpoint(serde_json::json!({ "epoch": 1 })).unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        let loaded = Model::from_checkpoint(&back).unwrap();
        assert_eq!(loaded.config(), model.config());
        for (a, b) in loaded.params().iter().zip(model.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert_eq!(loaded.running_stats().len(), model.running_stats().len());

        let mut missing = back.clone();
        missing.tensors.pop();
        assert!(Model::from_checkpoint(&missing).is_err());
    }

    #[test]
    fn center_prior_sets_initial_output() {
        let cfg = BackboneConfig { center_prior: Some(0.01), ..BackboneConfig::tiny(HeadKind::Event) };
        let model = Model::build(&cfg, 0).unwrap();
        let ModelOutput::Event { center, .. } = model.predict(Tensor::zeros(vec![1, 1, 256])).unwrap() else {
            panic!()
        };
        let mean = center[0].iter().sum::<f64>() / center[0].len() as f64;
        assert!(mean < 0.1, "{mean}");
    }
}
