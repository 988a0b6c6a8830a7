//! Lowering a layer graph onto the tape under an allocation strategy.
//!
//! Every strategy produces the *same* node sequence (so seeded dropout masks
//! and execution order match bit-for-bit); only storage placement differs:
//!
//! * `Reference`  — store everything, each value in fresh storage.
//! * `Naive`      — fresh memory per concatenation and per BN output, with
//!   in-place ReLU/dropout.
//! * `Shared`     — one pre-allocated buffer per dense block holds the block
//!   input and every layer output; concatenation is aliasing.
//! * `SharedRecompute` — additionally parks all BN/ReLU intermediates in one
//!   reused workspace and re-executes them on demand during backward.

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{BlockLayer, BnPlacement, Connectivity, LayerGraph, StemKind};
use crate::tape::{BnStateId, BufDecl, BufId, Mode, NodeId, Place, Tape};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Reference,
    Naive,
    Shared,
    SharedRecompute,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::Reference, Strategy::Naive, Strategy::Shared, Strategy::SharedRecompute];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Reference => "reference",
            Strategy::Naive => "naive",
            Strategy::Shared => "shared",
            Strategy::SharedRecompute => "shared-recompute",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Strategy::Reference),
            "naive" => Ok(Strategy::Naive),
            "shared" => Ok(Strategy::Shared),
            "shared-recompute" | "shared+recompute" => Ok(Strategy::SharedRecompute),
            other => Err(Error::config(format!(
                "unknown strategy '{other}' (reference | naive | shared | shared-recompute)"
            ))),
        }
    }

    fn buffered(&self) -> bool {
        matches!(self, Strategy::Shared | Strategy::SharedRecompute)
    }

    /// Concatenation is aliasing into a pre-allocated block buffer.
    pub fn uses_block_buffer(&self) -> bool {
        self.buffered()
    }

    fn workspace(&self) -> bool {
        matches!(self, Strategy::SharedRecompute)
    }

    fn inplace_activations(&self) -> bool {
        !matches!(self, Strategy::Reference)
    }
}

/// An executable network: the structural graph lowered onto a tape for a
/// fixed batch size and input extent.
pub struct Network<E: Element> {
    pub graph: LayerGraph,
    pub tape: Tape<E>,
    pub strategy: Strategy,
    pub batch: usize,
    pub input_hw: (usize, usize),
    pub input_id: NodeId,
    pub logits_id: NodeId,
    pub loss_id: NodeId,
    /// (name, node) for every learnable parameter, in graph order.
    pub params: Vec<(String, NodeId)>,
    /// (name, state) for every batch-norm site, in graph order.
    pub bn_sites: Vec<(String, BnStateId)>,
    /// Per block: buffer id when the strategy uses block buffers.
    pub block_bufs: Vec<Option<BufId>>,
    /// Workspace buffer under shared-recompute.
    pub workspace: Option<BufId>,
    /// Per block: [input feature, layer outputs...] as tape nodes.
    pub block_features: Vec<Vec<NodeId>>,
    /// Per block: the concatenated block output node.
    pub block_outputs: Vec<NodeId>,
}

struct Lowerer<E: Element> {
    strategy: Strategy,
    tape: Tape<E>,
    params: Vec<(String, NodeId)>,
    bn_sites: Vec<(String, BnStateId)>,
    bn_eps: f64,
    bn_momentum: f64,
    dropout: f64,
    /// Pooled variants of cross-block features (full dense): (node, pools) -> node.
    pool_cache: Vec<((usize, usize), NodeId)>,
}

impl<E: Element> Lowerer<E> {
    fn new(strategy: Strategy, seed: u64, bn_eps: f64, bn_momentum: f64, dropout: f64) -> Self {
        Lowerer {
            strategy,
            tape: Tape::staged(seed),
            params: Vec::new(),
            bn_sites: Vec::new(),
            bn_eps,
            bn_momentum,
            dropout,
            pool_cache: Vec::new(),
        }
    }

    fn param(&mut self, spec: &crate::graph::ParamSpec) -> NodeId {
        let id = self.tape.param(&spec.name, Tensor::zeros(spec.shape));
        self.params.push((spec.name.clone(), id));
        id
    }

    fn bn_state(&mut self, name: &str, channels: usize) -> Result<BnStateId> {
        let id = self.tape.add_bn_state(channels, self.bn_eps, self.bn_momentum)?;
        self.bn_sites.push((name.to_string(), id));
        Ok(id)
    }

    /// BN-ReLU pair with the given placement.
    fn bn_relu(
        &mut self,
        x: NodeId,
        gamma: &crate::graph::ParamSpec,
        beta: &crate::graph::ParamSpec,
        place: Place,
        recompute: bool,
    ) -> Result<NodeId> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let channels = self.tape.shape(x).c;
        let st = self.bn_state(&gamma.name, channels)?;
        let bn = self.tape.batch_norm_placed(x, g, b, st, place, recompute)?;
        let relu_place =
            if self.strategy.inplace_activations() { Place::SharesInput } else { Place::Fresh };
        self.tape.relu_placed(bn, relu_place, recompute)
    }

    fn dropout_after_conv(&mut self, conv: NodeId) -> Result<NodeId> {
        let rate = self.dropout;
        if rate == 0.0 {
            return Ok(conv);
        }
        let place =
            if self.strategy.inplace_activations() { Place::SharesInput } else { Place::Fresh };
        self.tape.dropout_placed(conv, rate, place)
    }

    /// The pre-activation composite of one basic layer, from its gathered
    /// input to its (possibly dropout-wrapped) output feature.
    fn basic_layer_pre(
        &mut self,
        l: &crate::graph::BasicLayer,
        cat: NodeId,
        conv_place: Place,
        workspace: Option<BufId>,
    ) -> Result<NodeId> {
        let recompute = self.strategy.workspace();
        let ws_place = match workspace {
            Some(ws) if recompute => Place::Buffer { buf: ws, c_off: 0, write: true },
            _ => Place::Fresh,
        };
        let mut x = cat;
        if let Some((g1, b1, w1)) = &l.bottleneck {
            let r1 = self.bn_relu(x, g1, b1, ws_place, recompute)?;
            let wid = self.param(&w1.clone());
            let z1 = self.tape.conv2d_placed(r1, wid, 1, 0, Place::Fresh, false)?;
            x = self.dropout_after_conv(z1)?;
        }
        let r2 = self.bn_relu(x, &l.bn.0.clone(), &l.bn.1.clone(), ws_place, recompute)?;
        let wid = self.param(&l.conv.clone());
        let y = self.tape.conv2d_placed(r2, wid, 1, 1, conv_place, false)?;
        self.dropout_after_conv(y)
    }

    fn pooled(&mut self, node: NodeId, pools: usize) -> Result<NodeId> {
        if pools == 0 {
            return Ok(node);
        }
        if let Some((_, cached)) = self.pool_cache.iter().find(|((n, p), _)| *n == node.0 && *p == pools)
        {
            return Ok(*cached);
        }
        let prev = self.pooled(node, pools - 1)?;
        let out = self.tape.avg_pool2_placed(prev, Place::Fresh)?;
        self.pool_cache.push(((node.0, pools), out));
        Ok(out)
    }
}

/// Lower `graph` for the given strategy, batch size, and input extent.
/// Parameters start at zero; initialize them with `crate::train::init_weights`.
pub fn lower<E: Element>(
    graph: &LayerGraph,
    strategy: Strategy,
    batch: usize,
    input_hw: (usize, usize),
    seed: u64,
) -> Result<Network<E>> {
    let spec = &graph.spec;
    if strategy != Strategy::Reference {
        let plannable = matches!(spec.connectivity, Connectivity::Dense)
            && matches!(spec.bn_placement, BnPlacement::Pre);
        if !plannable {
            return Err(Error::config(format!(
                "strategy '{}' supports dense pre-activation blocks only",
                strategy.name()
            )));
        }
    }
    if batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }

    let (in_h, in_w) = input_hw;
    // Geometry pass: spatial extent entering each block.
    let (mut h, mut w) = match spec.stem {
        StemKind::Cifar => (in_h, in_w),
        StemKind::ImageNet => {
            let ch = (in_h + 2 * 3 - 7) / 2 + 1;
            let cw = (in_w + 2 * 3 - 7) / 2 + 1;
            ((ch + 2 - 3) / 2 + 1, (cw + 2 - 3) / 2 + 1)
        }
    };
    let mut block_hw = Vec::with_capacity(spec.blocks.len());
    for _ in &spec.blocks {
        block_hw.push((h, w));
        h = (h - 2) / 2 + 1;
        w = (w - 2) / 2 + 1;
    }

    let mut lw = Lowerer::new(strategy, seed, spec.bn_eps, spec.bn_momentum, spec.dropout);

    // Block buffers and the recompute workspace are declared up front.
    let mut block_bufs: Vec<Option<BufId>> = vec![None; graph.blocks.len()];
    if strategy.buffered() {
        for (b, block) in graph.blocks.iter().enumerate() {
            let (bh, bw) = block_hw[b];
            block_bufs[b] = Some(lw.tape.declare_buffer(BufDecl {
                n: batch,
                channels: block.out_channels,
                h: bh,
                w: bw,
                exclusive: false,
            }));
        }
    }
    let mut workspace = None;
    if strategy.workspace() {
        // Largest BN/ReLU intermediate anywhere in the network.
        let mut best: Option<(usize, Shape)> = None;
        for (b, block) in graph.blocks.iter().enumerate() {
            let (bh, bw) = block_hw[b];
            for layer in &block.layers {
                if let BlockLayer::Basic(l) = layer {
                    for c in [l.in_channels, l.conv.shape.c] {
                        let s = Shape::new(batch, c, bh, bw);
                        if best.as_ref().map(|(n, _)| s.numel() > *n).unwrap_or(true) {
                            best = Some((s.numel(), s));
                        }
                    }
                }
            }
        }
        let (_, s) = best.expect("non-empty network");
        workspace = Some(lw.tape.declare_buffer(BufDecl {
            n: s.n,
            channels: s.c,
            h: s.h,
            w: s.w,
            exclusive: true,
        }));
    }

    // ---- stem ----
    let input_shape = Shape::new(batch, spec.image_channels, in_h, in_w);
    let input_id = lw.tape.input_placed(input_shape, Place::Fresh);
    let stem_place = |strategy: Strategy| -> Place {
        if strategy.buffered() {
            Place::Buffer { buf: block_bufs[0].unwrap(), c_off: 0, write: true }
        } else {
            Place::Fresh
        }
    };
    let stem_out = match graph.stem.kind {
        StemKind::Cifar => {
            let wconv = lw.param(&graph.stem.conv.clone());
            lw.tape.conv2d_placed(input_id, wconv, 1, 1, stem_place(strategy), false)?
        }
        StemKind::ImageNet => {
            let wconv = lw.param(&graph.stem.conv.clone());
            let c = lw.tape.conv2d_placed(input_id, wconv, 2, 3, Place::Fresh, false)?;
            let (gs, bs) = graph.stem.bn.clone().expect("imagenet stem has bn");
            let g = lw.param(&gs);
            let b = lw.param(&bs);
            let st = lw.bn_state(&gs.name, graph.stem.out_channels)?;
            let bn = lw.tape.batch_norm_placed(c, g, b, st, Place::Fresh, false)?;
            let relu_place =
                if strategy.inplace_activations() { Place::SharesInput } else { Place::Fresh };
            let r = lw.tape.relu_placed(bn, relu_place, false)?;
            // Max pool stages the result into the first block buffer.
            lw.tape.max_pool_placed(r, 3, 2, 1, stem_place(strategy))?
        }
    };

    // ---- blocks ----
    let full_dense = matches!(spec.connectivity, Connectivity::FullDense);
    let residual = matches!(spec.connectivity, Connectivity::Residual);
    let mut block_features: Vec<Vec<NodeId>> = Vec::new();
    let mut block_outputs: Vec<NodeId> = Vec::new();
    let mut block_input = stem_out;

    for (b, block) in graph.blocks.iter().enumerate() {
        let buf = block_bufs[b];
        let mut features: Vec<NodeId> = vec![block_input];
        let mut running = graph.blocks[b].in_channels;

        for (li, layer) in block.layers.iter().enumerate() {
            match layer {
                BlockLayer::Residual(r) => {
                    let prev = *features.last().unwrap();
                    let (gs, bs) = (r.bn.0.clone(), r.bn.1.clone());
                    let rl = lw.bn_relu(prev, &gs, &bs, Place::Fresh, false)?;
                    let wc = lw.param(&r.conv.clone());
                    let hconv = lw.tape.conv2d_placed(rl, wc, 1, 1, Place::Fresh, false)?;
                    let hd = lw.dropout_after_conv(hconv)?;
                    let out = lw.tape.add(hd, prev)?;
                    features.push(out);
                }
                BlockLayer::Basic(l) => {
                    // Gather source nodes in graph order.
                    let mut srcs = Vec::with_capacity(l.sources.len());
                    for s in &l.sources {
                        let node = if s.block == b {
                            features[s.local]
                        } else {
                            let f = block_features[s.block][s.local];
                            lw.pooled(f, s.pools)?
                        };
                        srcs.push(node);
                    }
                    let cat = if srcs.len() == 1 {
                        srcs[0]
                    } else if let Some(buf) = buf {
                        lw.tape.concat_placed(
                            &srcs,
                            Place::Buffer { buf, c_off: 0, write: false },
                        )?
                    } else {
                        lw.tape.concat_placed(&srcs, Place::Fresh)?
                    };

                    let conv_place = if let Some(buf) = buf {
                        Place::Buffer { buf, c_off: running, write: true }
                    } else {
                        Place::Fresh
                    };

                    let out = match spec.bn_placement {
                        BnPlacement::Pre => lw.basic_layer_pre(l, cat, conv_place, workspace)?,
                        BnPlacement::Post => {
                            // Conv-BN-ReLU ordering of the same parameters.
                            let mut x = cat;
                            if let Some((g1, b1, w1)) = &l.bottleneck {
                                let wid = lw.param(&w1.clone());
                                let z1 =
                                    lw.tape.conv2d_placed(x, wid, 1, 0, Place::Fresh, false)?;
                                let zd = lw.dropout_after_conv(z1)?;
                                x = lw.bn_relu(zd, g1, b1, Place::Fresh, false)?;
                            }
                            let wid = lw.param(&l.conv.clone());
                            let y = lw.tape.conv2d_placed(x, wid, 1, 1, Place::Fresh, false)?;
                            let yd = lw.dropout_after_conv(y)?;
                            lw.bn_relu(yd, &l.bn.0.clone(), &l.bn.1.clone(), Place::Fresh, false)?
                        }
                    };
                    features.push(out);
                }
            }
            running += block.layers[li].out_channels();
        }

        // Block output.
        let out_node = if residual {
            *features.last().unwrap()
        } else if full_dense {
            // The hand-off is virtual; the head gathers features directly.
            *features.last().unwrap()
        } else if let Some(buf) = buf {
            lw.tape.concat_placed(&features, Place::Buffer { buf, c_off: 0, write: false })?
        } else {
            lw.tape.concat_placed(&features, Place::Fresh)?
        };
        block_features.push(features);
        block_outputs.push(out_node);

        // Transition into the next block.
        if b + 1 < graph.blocks.len() {
            if full_dense {
                block_input = out_node; // unused by basic layers: sources are explicit
            } else {
                let t = &graph.transitions[b];
                let ((gs, bs), wc) = t.params.clone().expect("standard transition");
                let r = lw.bn_relu(out_node, &gs, &bs, Place::Fresh, false)?;
                let wid = lw.param(&wc);
                let c = lw.tape.conv2d_placed(r, wid, 1, 0, Place::Fresh, false)?;
                let next_place = if let Some(nb) = block_bufs[b + 1] {
                    Place::Buffer { buf: nb, c_off: 0, write: true }
                } else {
                    Place::Fresh
                };
                block_input = lw.tape.avg_pool2_placed(c, next_place)?;
            }
        }
    }

    // ---- head ----
    let head_in = if full_dense {
        // Concatenate every feature, pooled to the final resolution.
        let last = graph.blocks.len() - 1;
        // Block 0's feature list starts with the stem; later blocks' leading
        // entry is just the hand-off node, not a distinct feature.
        let mut srcs = Vec::new();
        for (b, feats) in block_features.iter().enumerate() {
            for (li, f) in feats.iter().enumerate() {
                if li == 0 && b > 0 {
                    continue;
                }
                srcs.push(lw.pooled(*f, last - b)?);
            }
        }
        lw.tape.concat_placed(&srcs, Place::Fresh)?
    } else {
        *block_outputs.last().unwrap()
    };
    let r = lw.bn_relu(head_in, &graph.head.bn.0.clone(), &graph.head.bn.1.clone(), Place::Fresh, false)?;
    let gap = lw.tape.global_avg_pool(r)?;
    let wfc = lw.param(&graph.head.weight.clone());
    let bfc = lw.param(&graph.head.bias.clone());
    let logits_id = lw.tape.linear(gap, wfc, bfc)?;
    let loss_id = lw.tape.softmax_xent_node(logits_id)?;

    Ok(Network {
        graph: graph.clone(),
        tape: lw.tape,
        strategy,
        batch,
        input_hw,
        input_id,
        logits_id,
        loss_id,
        params: lw.params,
        bn_sites: lw.bn_sites,
        block_bufs,
        workspace,
        block_features,
        block_outputs,
    })
}

impl<E: Element> Network<E> {
    /// Training-mode forward returning the scalar loss.
    pub fn forward_train(&mut self, images: &Tensor<E>, labels: &[usize]) -> Result<E> {
        self.tape.set_mode(Mode::Train);
        self.tape.set_input(self.input_id, images)?;
        self.tape.set_labels(labels.to_vec());
        self.tape.forward()?;
        Ok(self.tape.value(self.loss_id).data[0])
    }

    /// Eval-mode forward up to the logits (no labels required).
    pub fn forward_eval(&mut self, images: &Tensor<E>) -> Result<Tensor<E>> {
        self.tape.set_mode(Mode::Eval);
        self.tape.set_input(self.input_id, images)?;
        self.tape.forward_until(self.loss_id)?;
        Ok(self.tape.value(self.logits_id))
    }

    /// Eval-mode forward including the loss.
    pub fn forward_eval_loss(&mut self, images: &Tensor<E>, labels: &[usize]) -> Result<E> {
        self.tape.set_mode(Mode::Eval);
        self.tape.set_input(self.input_id, images)?;
        self.tape.set_labels(labels.to_vec());
        self.tape.forward()?;
        Ok(self.tape.value(self.loss_id).data[0])
    }

    pub fn backward(&mut self) -> Result<()> {
        self.tape.backward(self.loss_id)
    }

    /// Total parameter elements (cross-checked against the graph audit).
    pub fn param_elems(&self) -> usize {
        self.params.iter().map(|(_, id)| self.tape.shape(*id).numel()).sum()
    }
}

// ---------------------------------------------------------------------------
// Single-block fragments (the planner's unit of analysis)
// ---------------------------------------------------------------------------

/// Extents of one dense block to plan or execute in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    /// Basic layers in the block.
    pub m: usize,
    /// Growth rate.
    pub k: usize,
    /// Block input channels.
    pub k0: usize,
    /// Bottleneck multiplier (0 disables the 1x1 conv).
    pub mult: usize,
    pub h: usize,
    pub w: usize,
    pub batch: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.k0 == 0 {
            return Err(Error::config("block dims need m, k, k0 >= 1"));
        }
        if self.batch == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::config("block dims need positive batch and extent"));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.k0 + self.m * self.k
    }
}

/// A dense block lowered in isolation: input, M pre-activation layers, the
/// output concatenation, and a scalar sum so backward has a seed.
pub struct BlockNetwork<E: Element> {
    pub dims: BlockDims,
    pub strategy: Strategy,
    pub tape: Tape<E>,
    pub input_id: NodeId,
    pub output_id: NodeId,
    pub loss_id: NodeId,
    pub params: Vec<(String, NodeId)>,
    pub block_buf: Option<BufId>,
    pub workspace: Option<BufId>,
    /// [input, layer outputs...]
    pub features: Vec<NodeId>,
}

pub fn lower_block<E: Element>(
    dims: &BlockDims,
    strategy: Strategy,
    seed: u64,
) -> Result<BlockNetwork<E>> {
    dims.validate()?;
    let mut lw = Lowerer::<E>::new(strategy, seed, 1e-5, 0.1, 0.0);

    let block_buf = strategy.buffered().then(|| {
        lw.tape.declare_buffer(BufDecl {
            n: dims.batch,
            channels: dims.out_channels(),
            h: dims.h,
            w: dims.w,
            exclusive: false,
        })
    });
    let workspace = strategy.workspace().then(|| {
        let widest = crate::graph::input_channels(dims.k0, dims.k, dims.m)
            .max(if dims.mult > 0 { dims.mult * dims.k } else { 0 });
        lw.tape.declare_buffer(BufDecl {
            n: dims.batch,
            channels: widest,
            h: dims.h,
            w: dims.w,
            exclusive: true,
        })
    });

    let input_place = match block_buf {
        Some(buf) => Place::Buffer { buf, c_off: 0, write: true },
        None => Place::Fresh,
    };
    let input_id =
        lw.tape.input_placed(Shape::new(dims.batch, dims.k0, dims.h, dims.w), input_place);

    let mut features = vec![input_id];
    let mut running = dims.k0;
    for l in 1..=dims.m {
        let in_channels = crate::graph::input_channels(dims.k0, dims.k, l);
        let layer = crate::graph::BasicLayer::build(
            &format!("block1.layer{l}"),
            in_channels,
            dims.k,
            dims.mult,
            BnPlacement::Pre,
        );
        let cat = if features.len() == 1 {
            features[0]
        } else if let Some(buf) = block_buf {
            lw.tape.concat_placed(&features, Place::Buffer { buf, c_off: 0, write: false })?
        } else {
            lw.tape.concat_placed(&features, Place::Fresh)?
        };
        let conv_place = match block_buf {
            Some(buf) => Place::Buffer { buf, c_off: running, write: true },
            None => Place::Fresh,
        };
        let out = lw.basic_layer_pre(&layer, cat, conv_place, workspace)?;
        features.push(out);
        running += dims.k;
    }

    let output_id = if let Some(buf) = block_buf {
        lw.tape.concat_placed(&features, Place::Buffer { buf, c_off: 0, write: false })?
    } else {
        lw.tape.concat_placed(&features, Place::Fresh)?
    };
    let loss_id = lw.tape.sum(output_id)?;

    Ok(BlockNetwork {
        dims: *dims,
        strategy,
        tape: lw.tape,
        input_id,
        output_id,
        loss_id,
        params: lw.params,
        block_buf,
        workspace,
        features,
    })
}

impl<E: Element> BlockNetwork<E> {
    /// Deterministic parameter fill so fragments are runnable without a
    /// training harness; identical across strategies.
    pub fn fill_params(&mut self, seed: u64) {
        let ids: Vec<(bool, NodeId)> = self
            .params
            .iter()
            .map(|(name, id)| (name.contains("gamma"), *id))
            .collect();
        for (i, (is_gamma, id)) in ids.into_iter().enumerate() {
            let mut s = seed.wrapping_add(i as u64).wrapping_mul(0x9E3779B97F4A7C15) | 1;
            for v in self.tape.param_data_mut(id).iter_mut() {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                let u = (s >> 11) as f64 / (1u64 << 53) as f64;
                *v = E::from_f64(if is_gamma { 0.8 + 0.4 * u } else { (u - 0.5) * 0.5 });
            }
        }
    }

    /// Training-mode forward and backward; returns the scalar loss.
    pub fn forward_backward(&mut self, input: &Tensor<E>) -> Result<E> {
        self.tape.set_mode(Mode::Train);
        self.tape.set_input(self.input_id, input)?;
        self.tape.forward()?;
        let loss = self.tape.value(self.loss_id).data[0];
        self.tape.backward(self.loss_id)?;
        Ok(loss)
    }

    /// Inference-mode forward; returns the block output.
    pub fn forward_inference(&mut self, input: &Tensor<E>) -> Result<Tensor<E>> {
        self.tape.set_mode(Mode::Eval);
        self.tape.set_input(self.input_id, input)?;
        self.tape.forward_until(self.loss_id)?;
        Ok(self.tape.value(self.output_id))
    }

    pub fn grads(&self) -> Vec<(String, Tensor<E>)> {
        self.params
            .iter()
            .map(|(name, id)| (name.clone(), self.tape.grad(*id).expect("grad after backward")))
            .collect()
    }
}
