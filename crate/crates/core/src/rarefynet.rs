//! The refinement network: two inception blocks, global average pooling,
//! a dense head and a residual connection to the raw center pixel.
//!
//! ```text
//! input 3x3x2
//!   -> block 1: parallel conv branches -> batch norm -> ELU -> concat
//!   -> block 2: same pattern
//!   -> GAP -> dense(head_units) -> dropout -> dense(1) -> ELU
//!   -> + raw center pixel
//!   -> dense(1) -> ReLU
//! ```

use crate::error::{Error, Result};
use crate::nn::{
    self, batchnorm_backward, batchnorm_forward, concat_channels, conv2d, conv2d_backward, dense,
    dense_backward, elu, elu_grad, global_avg_pool, global_avg_pool_backward, relu, relu_grad,
    split_channels, BatchNormCache, Checkpoint, Gradients, LayerGrads, LayerKind, LayerParams, Mode,
    ParamStore, Tensor3,
};
use crate::patchset::{extract_tensor, PatchTensor};
use crate::raster::RasterGrid;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Samples per work unit when fanning out over a batch. Fixed so gradient
/// sums do not depend on the thread count.
const CHUNK: usize = 8;

/// Uniform init bound is `sqrt(INIT_SCALE / fan_in)`.
pub const INIT_SCALE: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub filter: usize,
    pub dilation: usize,
    /// Precede the convolution with a 1x1 convolution halving the channels.
    pub bottleneck: bool,
}

impl BranchSpec {
    pub const fn new(filter: usize, dilation: usize, bottleneck: bool) -> Self {
        Self { filter, dilation, bottleneck }
    }
}

fn default_branches() -> Vec<BranchSpec> {
    vec![
        BranchSpec::new(1, 1, false),
        BranchSpec::new(3, 1, true),
        BranchSpec::new(3, 1, false),
        BranchSpec::new(3, 2, false),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RarefyConfig {
    pub block1_branches: Vec<BranchSpec>,
    pub block2_branches: Vec<BranchSpec>,
    pub filters_per_branch_1: usize,
    pub filters_per_branch_2: usize,
    pub head_units: usize,
    pub dropout_p: f64,
}

impl Default for RarefyConfig {
    fn default() -> Self {
        Self {
            block1_branches: default_branches(),
            block2_branches: default_branches(),
            filters_per_branch_1: 8,
            filters_per_branch_2: 32,
            head_units: 32,
            dropout_p: 0.2,
        }
    }
}

impl RarefyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, branches) in [("block 1", &self.block1_branches), ("block 2", &self.block2_branches)] {
            if branches.is_empty() {
                return Err(Error::InvalidConfig(format!("{name} has no branches")));
            }
            let bottlenecks = branches.iter().filter(|b| b.bottleneck).count();
            if bottlenecks != 1 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must have exactly one bottleneck branch, found {bottlenecks}"
                )));
            }
            for b in branches.iter() {
                if b.filter == 0 || b.dilation == 0 {
                    return Err(Error::InvalidConfig(format!("{name}: zero filter or dilation")));
                }
                if ((b.filter - 1) * b.dilation) % 2 != 0 {
                    return Err(Error::UnsupportedSpan { filter: b.filter, dilation: b.dilation });
                }
            }
        }
        if self.filters_per_branch_1 == 0 || self.filters_per_branch_2 == 0 || self.head_units == 0 {
            return Err(Error::InvalidConfig("zero-width layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidProbability(self.dropout_p));
        }
        Ok(())
    }

    /// Layer sequence in parameter-store order.
    pub fn layer_kinds(&self) -> Result<Vec<LayerKind>> {
        Ok(Plan::new(self)?.kinds)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(nn::count_params(&self.layer_kinds()?))
    }
}

#[derive(Clone, Debug)]
struct BranchPlan {
    bottleneck: Option<usize>,
    conv: usize,
    norm: usize,
    channels: usize,
}

#[derive(Clone, Debug)]
struct Plan {
    blocks: [Vec<BranchPlan>; 2],
    hidden: usize,
    pre_residual: usize,
    output: usize,
    kinds: Vec<LayerKind>,
}

impl Plan {
    fn new(config: &RarefyConfig) -> Result<Self> {
        config.validate()?;
        let mut kinds = Vec::new();
        let mut push = |k: LayerKind| {
            kinds.push(k);
            kinds.len() - 1
        };
        let mut in_channels = 2;
        let mut blocks: [Vec<BranchPlan>; 2] = [Vec::new(), Vec::new()];
        let specs = [
            (&config.block1_branches, config.filters_per_branch_1),
            (&config.block2_branches, config.filters_per_branch_2),
        ];
        for (b, (branches, n)) in specs.into_iter().enumerate() {
            for br in branches {
                let (bottleneck, conv_in) = if br.bottleneck {
                    let half = (in_channels / 2).max(1);
                    let idx = push(LayerKind::Conv2d {
                        filter: 1,
                        dilation: 1,
                        in_channels,
                        out_channels: half,
                    });
                    (Some(idx), half)
                } else {
                    (None, in_channels)
                };
                let conv = push(LayerKind::Conv2d {
                    filter: br.filter,
                    dilation: br.dilation,
                    in_channels: conv_in,
                    out_channels: n,
                });
                let norm = push(LayerKind::BatchNorm { channels: n });
                blocks[b].push(BranchPlan { bottleneck, conv, norm, channels: n });
            }
            in_channels = n * branches.len();
        }
        let hidden = push(LayerKind::Dense { inputs: in_channels, outputs: config.head_units });
        let pre_residual = push(LayerKind::Dense { inputs: config.head_units, outputs: 1 });
        let output = push(LayerKind::Dense { inputs: 1, outputs: 1 });
        Ok(Self { blocks, hidden, pre_residual, output, kinds })
    }
}

#[derive(Clone, Debug)]
struct BranchTape {
    /// Bottleneck output (the convolution input) when the branch has one.
    mid: Option<Vec<Tensor3>>,
    norm: BatchNormCache,
    /// Batch-norm output, the ELU input.
    pre_act: Vec<Tensor3>,
}

#[derive(Clone, Debug)]
struct BlockTape {
    input: Vec<Tensor3>,
    branches: Vec<BranchTape>,
}

#[derive(Clone, Debug)]
struct HeadTape {
    pooled: Vec<f64>,
    dropout_scale: Vec<f64>,
    dropped: Vec<f64>,
    pre_residual: f64,
    residual: f64,
    output_pre: f64,
}

/// Activations recorded by a forward pass, consumed by [`RarefyModel::backward`].
#[derive(Clone, Debug, Default)]
pub struct GradTape {
    blocks: Vec<BlockTape>,
    heads: Vec<HeadTape>,
    /// Spatial size of the second block output, for the pooling backward.
    pooled_hw: (usize, usize),
}

impl GradTape {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.heads.len()
    }
}

/// A network configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RarefyModel {
    config: RarefyConfig,
    params: ParamStore,
    mode: Mode,
    seed: u64,
}

fn par_chunks_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    items.par_iter().with_min_len(CHUNK).map(f).collect()
}

/// Backward through one convolution over a batch. Per-chunk gradient sums
/// are reduced in chunk order.
fn conv_backward_batch(
    inputs: &[Tensor3],
    grads: &[Tensor3],
    layer: &LayerParams,
) -> Result<(Vec<Tensor3>, LayerGrads)> {
    let parts: Vec<(Vec<Tensor3>, LayerGrads)> = inputs
        .par_chunks(CHUNK)
        .zip(grads.par_chunks(CHUNK))
        .map(|(xs, gs)| {
            let mut lg = LayerGrads {
                weights: vec![0.0; layer.weights.len()],
                biases: vec![0.0; layer.biases.len()],
            };
            let gin = xs
                .iter()
                .zip(gs)
                .map(|(x, g)| conv2d_backward(x, g, layer, &mut lg.weights, &mut lg.biases))
                .collect::<Result<Vec<_>>>()?;
            Ok((gin, lg))
        })
        .collect::<Result<_>>()?;
    let mut total = LayerGrads {
        weights: vec![0.0; layer.weights.len()],
        biases: vec![0.0; layer.biases.len()],
    };
    let mut grad_in = Vec::with_capacity(inputs.len());
    for (gin, lg) in parts {
        total.weights.iter_mut().zip(&lg.weights).for_each(|(a, b)| *a += b);
        total.biases.iter_mut().zip(&lg.biases).for_each(|(a, b)| *a += b);
        grad_in.extend(gin);
    }
    Ok((grad_in, total))
}

fn add_into(acc: &mut [Tensor3], parts: Vec<Tensor3>) {
    for (a, p) in acc.iter_mut().zip(parts) {
        a.data.iter_mut().zip(&p.data).for_each(|(x, y)| *x += y);
    }
}

impl RarefyModel {
    /// Builds the network with uniform fan-in-scaled weights and zero biases.
    ///
    /// The output layer starts as the identity (weight 1, bias 0) so the
    /// untrained network passes the residual sum straight through.
    pub fn build(config: RarefyConfig, seed: u64) -> Result<Self> {
        let plan = Plan::new(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<LayerParams> = plan.kinds.iter().map(|&k| LayerParams::new(k)).collect();
        for (i, layer) in layers.iter_mut().enumerate() {
            if matches!(layer.kind, LayerKind::BatchNorm { .. }) {
                continue;
            }
            if i == plan.output {
                layer.weights[0] = 1.0;
                continue;
            }
            let bound = (INIT_SCALE / layer.kind.fan_in() as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            config,
            params: ParamStore { layers },
            mode: Mode::Eval,
            seed,
        })
    }

    pub fn config(&self) -> &RarefyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.total()
    }

    fn plan(&self) -> Plan {
        Plan::new(&self.config).expect("config validated at construction")
    }

    fn block_forward(
        &self,
        branches: &[BranchPlan],
        input: Vec<Tensor3>,
        mode: Mode,
    ) -> Result<(Vec<Tensor3>, BlockTape)> {
        let layers = &self.params.layers;
        let mut tapes = Vec::with_capacity(branches.len());
        let mut acts: Vec<Vec<Tensor3>> = Vec::with_capacity(branches.len());
        for br in branches {
            let mid = match br.bottleneck {
                Some(b) => Some(par_chunks_map(&input, |x| conv2d(x, &layers[b]))?),
                None => None,
            };
            let conv_in = mid.as_ref().unwrap_or(&input);
            let pre = par_chunks_map(conv_in, |x| conv2d(x, &layers[br.conv]))?;
            let (pre_act, norm) = batchnorm_forward(&pre, &layers[br.norm], mode)?;
            acts.push(pre_act.iter().map(|t| t.map(elu)).collect());
            tapes.push(BranchTape { mid, norm, pre_act });
        }
        let out = (0..input.len())
            .map(|i| {
                let parts: Vec<Tensor3> = acts.iter().map(|a| a[i].clone()).collect();
                concat_channels(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((out, BlockTape { input, branches: tapes }))
    }

    fn forward_impl(
        &self,
        inputs: &[Tensor3],
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Vec<f64>, GradTape)> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(bad) = inputs.iter().find(|t| (t.height, t.width, t.channels) != (3, 3, 2)) {
            return Err(Error::ShapeMismatch(format!(
                "expected 3x3x2 input, got {}x{}x{}",
                bad.height, bad.width, bad.channels
            )));
        }
        let plan = self.plan();
        let layers = &self.params.layers;
        let (b1, t1) = self.block_forward(&plan.blocks[0], inputs.to_vec(), mode)?;
        let (b2, t2) = self.block_forward(&plan.blocks[1], b1, mode)?;
        let pooled_hw = (b2[0].height, b2[0].width);

        let mut preds = Vec::with_capacity(inputs.len());
        let mut heads = Vec::with_capacity(inputs.len());
        for (x, feat) in inputs.iter().zip(&b2) {
            let pooled = global_avg_pool(feat);
            let hidden = dense(&pooled, &layers[plan.hidden])?;
            let (dropped, dropout_scale) = match rng.as_deref_mut() {
                Some(r) => nn::dropout(&hidden, self.config.dropout_p, mode, r)?,
                None => {
                    let n = hidden.len();
                    (hidden, vec![1.0; n])
                }
            };
            let pre_residual = dense(&dropped, &layers[plan.pre_residual])?[0];
            let residual = elu(pre_residual) + x.at(1, 1, 0);
            let output_pre = dense(&[residual], &layers[plan.output])?[0];
            preds.push(relu(output_pre));
            heads.push(HeadTape { pooled, dropout_scale, dropped, pre_residual, residual, output_pre });
        }
        Ok((preds, GradTape { blocks: vec![t1, t2], heads, pooled_hw }))
    }

    /// Train-mode forward pass: batch statistics and dropout drawn from `rng`.
    ///
    /// Running statistics are not updated here; see [`Self::commit_running_stats`].
    pub fn forward_train(&self, inputs: &[Tensor3], rng: &mut dyn RngCore) -> Result<(Vec<f64>, GradTape)> {
        self.forward_impl(inputs, Mode::Train, Some(rng))
    }

    pub fn forward_eval(&self, inputs: &[Tensor3]) -> Result<(Vec<f64>, GradTape)> {
        self.forward_impl(inputs, Mode::Eval, None)
    }

    /// Folds the batch moments recorded in a train-mode tape into the
    /// running statistics.
    pub fn commit_running_stats(&mut self, tape: &GradTape) {
        let plan = self.plan();
        for (block, bt) in plan.blocks.iter().zip(&tape.blocks) {
            for (br, t) in block.iter().zip(&bt.branches) {
                nn::update_running_stats(&mut self.params.layers[br.norm], &t.norm);
            }
        }
    }

    fn block_backward(
        &self,
        branches: &[BranchPlan],
        tape: &BlockTape,
        grad_out: &[Tensor3],
        grads: &mut Gradients,
    ) -> Result<Vec<Tensor3>> {
        let layers = &self.params.layers;
        let sizes: Vec<usize> = branches.iter().map(|b| b.channels).collect();
        let split: Vec<Vec<Tensor3>> = grad_out
            .iter()
            .map(|g| split_channels(g, &sizes))
            .collect::<Result<_>>()?;
        let mut grad_in: Vec<Tensor3> = tape
            .input
            .iter()
            .map(|t| Tensor3::zeros(t.height, t.width, t.channels))
            .collect();
        for (bi, (br, bt)) in branches.iter().zip(&tape.branches).enumerate() {
            let g_act: Vec<Tensor3> = split
                .iter()
                .zip(&bt.pre_act)
                .map(|(parts, z)| {
                    let mut g = parts[bi].clone();
                    g.data.iter_mut().zip(&z.data).for_each(|(gv, &zv)| *gv *= elu_grad(zv));
                    g
                })
                .collect();
            let lg = &mut grads.layers[br.norm];
            let g_pre = batchnorm_backward(&bt.norm, &g_act, &layers[br.norm], &mut lg.weights, &mut lg.biases)?;
            let conv_in = bt.mid.as_ref().unwrap_or(&tape.input);
            let (g_conv_in, cg) = conv_backward_batch(conv_in, &g_pre, &layers[br.conv])?;
            grads.layers[br.conv] = cg;
            let g_block_in = match br.bottleneck {
                Some(b) => {
                    let (g, bg) = conv_backward_batch(&tape.input, &g_conv_in, &layers[b])?;
                    grads.layers[b] = bg;
                    g
                }
                None => g_conv_in,
            };
            add_into(&mut grad_in, g_block_in);
        }
        Ok(grad_in)
    }

    /// Reverse-mode gradients of a scalar loss given `loss_grad[i] = dL/dy_i`.
    ///
    /// Returns parameter gradients and the gradient with respect to each input tensor.
    pub fn backward(&self, tape: &GradTape, loss_grad: &[f64]) -> Result<(Gradients, Vec<Tensor3>)> {
        if tape.is_empty() {
            return Err(Error::NoForwardPass);
        }
        if loss_grad.len() != tape.batch_size() {
            return Err(Error::LengthMismatch { left: loss_grad.len(), right: tape.batch_size() });
        }
        let plan = self.plan();
        let layers = &self.params.layers;
        let mut grads = Gradients::zeros_like(&self.params);
        let (h, w) = tape.pooled_hw;
        let mut residual_grads = Vec::with_capacity(tape.batch_size());
        let mut feat_grads = Vec::with_capacity(tape.batch_size());
        for (head, &g) in tape.heads.iter().zip(loss_grad) {
            let g_out_pre = g * relu_grad(head.output_pre);
            let lg = &mut grads.layers[plan.output];
            let g_res = dense_backward(&[head.residual], &[g_out_pre], &layers[plan.output], &mut lg.weights, &mut lg.biases)?[0];
            let g_pre_res = g_res * elu_grad(head.pre_residual);
            let lg = &mut grads.layers[plan.pre_residual];
            let g_dropped = dense_backward(&head.dropped, &[g_pre_res], &layers[plan.pre_residual], &mut lg.weights, &mut lg.biases)?;
            let g_hidden: Vec<f64> = g_dropped.iter().zip(&head.dropout_scale).map(|(a, s)| a * s).collect();
            let lg = &mut grads.layers[plan.hidden];
            let g_pooled = dense_backward(&head.pooled, &g_hidden, &layers[plan.hidden], &mut lg.weights, &mut lg.biases)?;
            feat_grads.push(global_avg_pool_backward(&g_pooled, h, w));
            residual_grads.push(g_res);
        }
        let g1 = self.block_backward(&plan.blocks[1], &tape.blocks[1], &feat_grads, &mut grads)?;
        let mut g_in = self.block_backward(&plan.blocks[0], &tape.blocks[0], &g1, &mut grads)?;
        for (g, r) in g_in.iter_mut().zip(residual_grads) {
            *g.at_mut(1, 1, 0) += r;
        }
        Ok((grads, g_in))
    }

    /// Eval-mode prediction for one patch; always non-negative.
    pub fn predict(&self, input: &PatchTensor) -> Result<f64> {
        Ok(self.predict_batch(std::slice::from_ref(input))?[0])
    }

    pub fn predict_batch(&self, inputs: &[PatchTensor]) -> Result<Vec<f64>> {
        let tensors = patches_to_tensors(inputs);
        Ok(self.forward_eval(&tensors)?.0)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(&self.config, self.seed, self.params.layers.clone())
    }

    /// Rebuilds a model from a checkpoint, checking the layer layout
    /// against the embedded configuration.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: RarefyConfig = serde_json::from_value(ck.config.clone())?;
        let plan = Plan::new(&config)?;
        let kinds: Vec<LayerKind> = ck.layers.iter().map(|l| l.kind).collect();
        if kinds != plan.kinds || ck.layers.iter().any(|l| !l.is_consistent()) {
            return Err(Error::ShapeMismatch("checkpoint layers do not match its configuration".into()));
        }
        Ok(Self {
            config,
            params: ParamStore { layers: ck.layers.clone() },
            mode: Mode::Eval,
            seed: ck.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn patch_to_tensor(p: &PatchTensor) -> Tensor3 {
    Tensor3 { height: 3, width: 3, channels: 2, data: p.to_hwc().to_vec() }
}

pub fn patches_to_tensors(ps: &[PatchTensor]) -> Vec<Tensor3> {
    ps.iter().map(patch_to_tensor).collect()
}

/// Replaces every valid pixel with the model prediction for its patch.
///
/// Predictions are capped at 1 to stay in the NDVI range; nodata stays nodata.
pub fn refine_map(model: &RarefyModel, sat: &RasterGrid) -> Result<RasterGrid> {
    let geometry = *sat.geometry();
    let valid: Vec<usize> = (0..geometry.len()).filter(|&i| sat.is_valid(i)).collect();
    let mut values = vec![sat.nodata(); geometry.len()];
    if !valid.is_empty() {
        let patches = valid
            .iter()
            .map(|&i| {
                let (r, c) = geometry.row_col(i);
                extract_tensor(sat, r, c)
            })
            .collect::<Result<Vec<_>>>()?;
        let preds = model.predict_batch(&patches)?;
        for (&i, p) in valid.iter().zip(preds) {
            values[i] = p.min(1.0);
        }
    }
    RasterGrid::with_mask(geometry, values, sat.mask().to_vec(), sat.nodata())
}
