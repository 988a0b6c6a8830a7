//! Reverse-mode autodiff over an explicit, ordered record of primitive ops.
//!
//! A [`Tape`] is both the recorder and the executor. Built eagerly (every op
//! method runs its kernel immediately into fresh storage) it is the plain
//! autodiff API. The network lowering in [`crate::exec`] builds the same node
//! list with non-trivial storage placement instead: node outputs may alias a
//! shared block buffer, live in a reused workspace, or transform their input
//! in place. `forward`/`backward` interpret the node list identically in all
//! cases, which is what makes allocation strategies bit-exact against each
//! other.

mod run;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::conv::ConvGeom;
use crate::ops::pool::pool_out;
use crate::tensor::{Shape, Tensor, ViewInfo};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }

    /// Construct from a raw index; for iteration in tests and audits.
    pub fn test_id(i: usize) -> Self {
        NodeId(i)
    }
}

impl std::fmt::Debug for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnStateId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where a node's output value lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Place {
    /// Own freshly allocated storage.
    Fresh,
    /// A channel region of a declared buffer. `write: false` means the value
    /// is already present there (concatenation by aliasing).
    Buffer { buf: BufId, c_off: usize, write: bool },
    /// In-place transform of the first input's storage.
    SharesInput,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Param { name: String },
    Conv2d { stride: usize, pad: usize },
    BatchNorm { state: BnStateId },
    Relu,
    Concat,
    AvgPool2,
    MaxPool { k: usize, stride: usize, pad: usize },
    GlobalAvgPool,
    Dropout { rate: f64, salt: u64 },
    Linear,
    SoftmaxXent,
    Add,
    Sum,
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::Concat => "concat",
            Op::AvgPool2 => "avg_pool2",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Dropout { .. } => "dropout",
            Op::Linear => "linear",
            Op::SoftmaxXent => "softmax_xent",
            Op::Add => "add",
            Op::Sum => "sum",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
    pub place: Place,
    /// Dropped after its last forward use and re-executed during backward.
    pub recompute: bool,
}

/// A declared shared buffer: NCHW with `channels` total channels.
#[derive(Clone, Copy, Debug)]
pub struct BufDecl {
    pub n: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    /// Workspace semantics: later writers overwrite earlier values.
    pub exclusive: bool,
}

impl BufDecl {
    pub fn numel(&self) -> usize {
        self.n * self.channels * self.h * self.w
    }
}

/// Running statistics and hyperparameters for one batch-norm site.
/// The learnable scale/shift are ordinary `Param` nodes.
#[derive(Clone, Debug)]
pub struct BnState<E: Element> {
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub eps: f64,
    pub momentum: f64,
}

impl<E: Element> BnState<E> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::config("batch norm eps must be positive"));
        }
        if !(0.0 < momentum && momentum < 1.0) {
            return Err(Error::config("batch norm momentum must be in (0, 1)"));
        }
        Ok(BnState {
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            eps,
            momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Per-node saved context for backward.
#[derive(Clone, Debug)]
pub(crate) enum Aux<E: Element> {
    None,
    Bn { mean: Vec<E>, inv_std: Vec<E> },
    Mask(Vec<u8>),
    ArgMax(Vec<u32>),
    Probs(Vec<E>),
}

pub struct Tape<E: Element> {
    pub(crate) nodes: Vec<Node>,
    pub(crate) buf_decls: Vec<BufDecl>,
    pub(crate) bn_states: Vec<BnState<E>>,
    seed: u64,
    eager: bool,
    mode: Mode,

    pub(crate) vals: Vec<Option<Vec<E>>>,
    pub(crate) bufs: Vec<Option<Vec<E>>>,
    pub(crate) grad_vals: Vec<Option<Vec<E>>>,
    pub(crate) grad_bufs: Vec<Option<Vec<E>>>,
    pub(crate) aux: Vec<Aux<E>>,
    /// For exclusive buffers: node whose value currently occupies the storage.
    pub(crate) resident: Vec<Option<usize>>,
    pub(crate) grad_resident: Vec<Option<usize>>,
    pub(crate) recompute_runs: Vec<u32>,
    labels: Option<Vec<usize>>,
    forward_done: bool,
    /// Running stats update is suppressed while re-executing nodes in backward.
    pub(crate) in_recompute: bool,
}

impl<E: Element> Tape<E> {
    /// An eager tape: every op executes as it is recorded, into fresh storage.
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            buf_decls: Vec::new(),
            bn_states: Vec::new(),
            seed,
            eager: true,
            mode: Mode::Train,
            vals: Vec::new(),
            bufs: Vec::new(),
            grad_vals: Vec::new(),
            grad_bufs: Vec::new(),
            aux: Vec::new(),
            resident: Vec::new(),
            grad_resident: Vec::new(),
            recompute_runs: Vec::new(),
            labels: None,
            forward_done: false,
            in_recompute: false,
        }
    }

    /// A staged tape: ops are recorded with explicit placement and executed
    /// later by `forward`. Used by the network lowering.
    pub(crate) fn staged(seed: u64) -> Self {
        let mut t = Self::new(seed);
        t.eager = false;
        t
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn set_labels(&mut self, labels: Vec<usize>) {
        self.labels = Some(labels);
    }

    pub(crate) fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn recompute_runs(&self, id: NodeId) -> u32 {
        self.recompute_runs[id.0]
    }

    pub fn bn_state(&self, id: BnStateId) -> &BnState<E> {
        &self.bn_states[id.0]
    }

    pub fn bn_state_mut(&mut self, id: BnStateId) -> &mut BnState<E> {
        &mut self.bn_states[id.0]
    }

    pub fn add_bn_state(&mut self, channels: usize, eps: f64, momentum: f64) -> Result<BnStateId> {
        self.bn_states.push(BnState::new(channels, eps, momentum)?);
        Ok(BnStateId(self.bn_states.len() - 1))
    }

    pub(crate) fn declare_buffer(&mut self, decl: BufDecl) -> BufId {
        self.buf_decls.push(decl);
        self.bufs.push(None);
        self.grad_bufs.push(None);
        self.resident.push(None);
        self.grad_resident.push(None);
        BufId(self.buf_decls.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Shape, place: Place) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, shape, place, recompute: false });
        self.vals.push(None);
        self.grad_vals.push(None);
        self.aux.push(Aux::None);
        self.recompute_runs.push(0);
        if self.eager {
            self.run_node(id.0)?;
        }
        Ok(id)
    }

    pub(crate) fn push_placed(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Shape,
        place: Place,
        recompute: bool,
    ) -> Result<NodeId> {
        let id = self.push(op, inputs, shape, place)?;
        self.nodes[id.0].recompute = recompute;
        Ok(id)
    }

    // ---- leaf nodes ----

    pub fn input(&mut self, t: Tensor<E>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input,
            inputs: vec![],
            shape: t.shape,
            place: Place::Fresh,
            recompute: false,
        });
        self.vals.push(Some(t.data));
        self.grad_vals.push(None);
        self.aux.push(Aux::None);
        self.recompute_runs.push(0);
        id
    }

    pub(crate) fn input_placed(&mut self, shape: Shape, place: Place) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Input, inputs: vec![], shape, place, recompute: false });
        self.vals.push(None);
        self.grad_vals.push(None);
        self.aux.push(Aux::None);
        self.recompute_runs.push(0);
        id
    }

    pub fn param(&mut self, name: &str, t: Tensor<E>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param { name: name.to_string() },
            inputs: vec![],
            shape: t.shape,
            place: Place::Fresh,
            recompute: false,
        });
        self.vals.push(Some(t.data));
        self.grad_vals.push(None);
        self.aux.push(Aux::None);
        self.recompute_runs.push(0);
        id
    }

    pub fn param_data(&self, id: NodeId) -> &[E] {
        self.vals[id.0].as_deref().expect("param has data")
    }

    pub fn param_data_mut(&mut self, id: NodeId) -> &mut [E] {
        self.vals[id.0].as_deref_mut().expect("param has data")
    }

    /// Data of an `Input` or `Param` leaf.
    pub fn leaf_data(&self, id: NodeId) -> &[E] {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Input | Op::Param { .. }));
        self.vals[id.0].as_deref().expect("leaf has data")
    }

    pub fn leaf_data_mut(&mut self, id: NodeId) -> &mut [E] {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Input | Op::Param { .. }));
        self.vals[id.0].as_deref_mut().expect("leaf has data")
    }

    /// Replace the value of an `Input` node. Shape must match.
    pub fn set_input(&mut self, id: NodeId, t: &Tensor<E>) -> Result<()> {
        let node = &self.nodes[id.0];
        if !matches!(node.op, Op::Input) {
            return Err(Error::usage("set_input on a non-input node"));
        }
        if node.shape != t.shape {
            return Err(Error::config(format!(
                "input shape {} does not match declared {}",
                t.shape, node.shape
            )));
        }
        self.vals[id.0] = Some(t.data.clone());
        Ok(())
    }

    // ---- op recording (shape inference + validation) ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.conv2d_placed(x, w, stride, pad, Place::Fresh, false)
    }

    pub(crate) fn conv2d_placed(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        place: Place,
        recompute: bool,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        // Weight tensor is (Cout, Cin, kh, kw) carried in a Shape.
        let (cout, cin, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        if xs.c != cin {
            return Err(Error::config(format!(
                "conv input channels mismatch: input {} vs kernel {}",
                xs, ws
            )));
        }
        if !matches!(kh, 1 | 3 | 7) || kh != kw {
            return Err(Error::config(format!("unsupported conv kernel {}x{}", kh, kw)));
        }
        let geom = ConvGeom::new(cin, cout, xs.h, xs.w, kh, kw, stride, pad)?;
        let out = Shape::new(xs.n, cout, geom.out_h, geom.out_w);
        self.push_placed(Op::Conv2d { stride, pad }, vec![x, w], out, place, recompute)
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: BnStateId,
    ) -> Result<NodeId> {
        self.batch_norm_placed(x, gamma, beta, state, Place::Fresh, false)
    }

    pub(crate) fn batch_norm_placed(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: BnStateId,
        place: Place,
        recompute: bool,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let channels = self.bn_states[state.0].channels();
        if xs.c != channels {
            return Err(Error::config(format!(
                "batch norm expects {} channels, input is {}",
                channels, xs
            )));
        }
        if self.shape(gamma).numel() != channels || self.shape(beta).numel() != channels {
            return Err(Error::config("batch norm scale/shift length mismatch"));
        }
        self.push_placed(Op::BatchNorm { state }, vec![x, gamma, beta], xs, place, recompute)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.relu_placed(x, Place::Fresh, false)
    }

    pub(crate) fn relu_placed(
        &mut self,
        x: NodeId,
        place: Place,
        recompute: bool,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        self.push_placed(Op::Relu, vec![x], xs, place, recompute)
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.concat_placed(xs, Place::Fresh)
    }

    pub(crate) fn concat_placed(&mut self, xs: &[NodeId], place: Place) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::config("concat of an empty input list"));
        }
        let first = self.shape(xs[0]);
        let mut channels = 0;
        for (i, x) in xs.iter().enumerate() {
            let s = self.shape(*x);
            if !s.same_spatial(&first) {
                return Err(Error::config(format!(
                    "concat input {} has shape {} incompatible with {}",
                    i, s, first
                )));
            }
            channels += s.c;
        }
        let out = Shape::new(first.n, channels, first.h, first.w);
        self.push(Op::Concat, xs.to_vec(), out, place)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.avg_pool2_placed(x, Place::Fresh)
    }

    pub(crate) fn avg_pool2_placed(&mut self, x: NodeId, place: Place) -> Result<NodeId> {
        let xs = self.shape(x);
        let (oh, ow) = pool_out(xs.h, xs.w, 2, 2, 0)?;
        let out = Shape::new(xs.n, xs.c, oh, ow);
        self.push(Op::AvgPool2, vec![x], out, place)
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> Result<NodeId> {
        self.max_pool_placed(x, k, stride, pad, Place::Fresh)
    }

    pub(crate) fn max_pool_placed(
        &mut self,
        x: NodeId,
        k: usize,
        stride: usize,
        pad: usize,
        place: Place,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let (oh, ow) = pool_out(xs.h, xs.w, k, stride, pad)?;
        let out = Shape::new(xs.n, xs.c, oh, ow);
        self.push(Op::MaxPool { k, stride, pad }, vec![x], out, place)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let out = Shape::new(xs.n, xs.c, 1, 1);
        self.push(Op::GlobalAvgPool, vec![x], out, Place::Fresh)
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        self.dropout_placed(x, rate, Place::Fresh)
    }

    pub(crate) fn dropout_placed(&mut self, x: NodeId, rate: f64, place: Place) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let xs = self.shape(x);
        // Stable per-node salt so masks depend only on (seed, node index).
        let salt = (self.nodes.len() as u64).wrapping_mul(0x9E3779B97F4A7C15);
        self.push(Op::Dropout { rate, salt }, vec![x], xs, place)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.h != 1 || xs.w != 1 {
            return Err(Error::config(format!("linear expects (N,C,1,1) input, got {}", xs)));
        }
        let ws = self.shape(w);
        let (classes, cin) = (ws.n, ws.c);
        if cin != xs.c {
            return Err(Error::config(format!(
                "linear input features mismatch: input {} vs weight {}",
                xs, ws
            )));
        }
        if self.shape(b).numel() != classes {
            return Err(Error::config("linear bias length mismatch"));
        }
        let out = Shape::new(xs.n, classes, 1, 1);
        self.push(Op::Linear, vec![x, w, b], out, Place::Fresh)
    }

    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.set_labels(labels.to_vec());
        self.softmax_xent_node(logits)
    }

    pub(crate) fn softmax_xent_node(&mut self, logits: NodeId) -> Result<NodeId> {
        let ls = self.shape(logits);
        if ls.h != 1 || ls.w != 1 {
            return Err(Error::config(format!("softmax expects (N,C,1,1) logits, got {}", ls)));
        }
        self.push(Op::SoftmaxXent, vec![logits], Shape::new(1, 1, 1, 1), Place::Fresh)
    }

    /// Fully-connected layer into mean softmax cross-entropy, as one call.
    pub fn linear_softmax_xent(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        labels: &[usize],
    ) -> Result<NodeId> {
        let logits = self.linear(x, w, b)?;
        self.softmax_xent(logits, labels)
    }

    /// Elementwise sum of two equal-shape tensors (identity skip connections).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::config(format!("add shape mismatch: {} vs {}", sa, sb)));
        }
        self.push(Op::Add, vec![a, b], sa, Place::Fresh)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![x], Shape::new(1, 1, 1, 1), Place::Fresh)
    }

    // ---- storage resolution ----

    /// Follow `SharesInput` links to the node that owns the storage.
    pub(crate) fn storage_root(&self, id: usize) -> usize {
        let mut cur = id;
        while matches!(self.nodes[cur].place, Place::SharesInput) {
            cur = self.nodes[cur].inputs[0].0;
        }
        cur
    }

    /// (root node, view) describing where `id`'s value lives.
    ///
    /// Exclusive (workspace) buffers hold one resident value at a time in
    /// their prefix, so views into them are contiguous regardless of the
    /// declared capacity.
    pub(crate) fn resolve(&self, id: usize) -> (usize, ViewInfo) {
        let root = self.storage_root(id);
        let shape = self.nodes[id].shape;
        match self.nodes[root].place {
            Place::Fresh => (root, ViewInfo::contiguous(shape)),
            Place::Buffer { buf, c_off, .. } => {
                let decl = &self.buf_decls[buf.0];
                if decl.exclusive {
                    (root, ViewInfo::contiguous(shape))
                } else {
                    (
                        root,
                        ViewInfo {
                            n: shape.n,
                            c: shape.c,
                            h: shape.h,
                            w: shape.w,
                            c_off,
                            c_total: decl.channels,
                        },
                    )
                }
            }
            Place::SharesInput => unreachable!("root cannot share"),
        }
    }

    /// Materialize a node's current value as an owned tensor (copies views out).
    pub fn value(&self, id: NodeId) -> Tensor<E> {
        let (root, view) = self.resolve(id.0);
        let shape = self.nodes[id.0].shape;
        let data = match self.nodes[root].place {
            Place::Fresh => {
                let v = self.vals[root].as_ref().expect("value not computed");
                v.clone()
            }
            Place::Buffer { buf, .. } => {
                let storage = self.bufs[buf.0].as_ref().expect("buffer not allocated");
                let mut out = Vec::with_capacity(shape.numel());
                for n in 0..view.n {
                    out.extend_from_slice(view.slab(storage, n));
                }
                out
            }
            Place::SharesInput => unreachable!(),
        };
        Tensor { shape, data, grad: None }
    }

    /// The gradient of a node, if backward has produced one.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<E>> {
        let (root, view) = self.resolve(id.0);
        let shape = self.nodes[id.0].shape;
        let data = match self.nodes[root].place {
            Place::Fresh => self.grad_vals[root].as_ref()?.clone(),
            Place::Buffer { buf, .. } => {
                let storage = self.grad_bufs[buf.0].as_ref()?;
                let mut out = Vec::with_capacity(shape.numel());
                for n in 0..view.n {
                    out.extend_from_slice(view.slab(storage, n));
                }
                out
            }
            Place::SharesInput => unreachable!(),
        };
        Some(Tensor { shape, data, grad: None })
    }

    #[allow(dead_code)]
    pub(crate) fn forward_done(&self) -> bool {
        self.forward_done
    }

    pub(crate) fn set_forward_done(&mut self, v: bool) {
        self.forward_done = v;
    }
}
