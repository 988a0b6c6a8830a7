//! Explicit, auditable allocation plans for dense blocks.
//!
//! A plan is an ordered list of allocate/write/read/free/recompute steps over
//! abstract buffers, derived ahead of time from the same lowering the executor
//! uses. The verifier replays the steps with per-channel writer tracking, so a
//! read of a freed, never-written, or overwritten region is a hard error.

use crate::error::{Error, Result};
use crate::exec::{lower_block, BlockDims, BlockNetwork, Strategy};
use crate::graph::input_channels;
use crate::tape::{Op, Place, Tape};
use crate::tensor::Tensor;
use crate::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanMode {
    Inference,
    Training,
}

impl PlanMode {
    pub fn name(&self) -> &'static str {
        match self {
            PlanMode::Inference => "inference",
            PlanMode::Training => "training",
        }
    }
}

/// One planned storage unit. `chan_bytes` is the byte size of one channel
/// (batch * H * W * element width), so region arithmetic stays in channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanBuf {
    pub label: String,
    pub channels: usize,
    pub chan_bytes: usize,
    /// Pre-allocated for the whole pass (block buffer, workspace).
    pub preallocated: bool,
    /// Overwrite semantics (workspace).
    pub exclusive: bool,
    /// Holds a materialized concatenation.
    pub concat: bool,
}

impl PlanBuf {
    pub fn bytes(&self) -> usize {
        self.channels * self.chan_bytes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanStep {
    Alloc { buf: usize },
    Write { buf: usize, chan_off: usize, chans: usize, writer: usize },
    Read { buf: usize, chan_off: usize, chans: usize, expect: usize },
    Free { buf: usize },
    Recompute { node: usize },
}

#[derive(Clone, Debug)]
pub struct MemoryPlan {
    pub strategy: Strategy,
    pub mode: PlanMode,
    pub dims: BlockDims,
    pub elem_bytes: usize,
    pub bufs: Vec<PlanBuf>,
    pub steps: Vec<PlanStep>,
    /// Copies of each layer output that live in concatenation storage.
    pub copy_counts: Vec<usize>,
    pub concat_storage_bytes: usize,
    pub workspace_bytes: usize,
    pub param_elems: usize,
    /// Bytes still live when the forward pass completes (the hand-off).
    pub retained_bytes: usize,
}

/// Summary of one (strategy, block) pair across both modes.
#[derive(Clone, Debug)]
pub struct MemoryReport {
    pub strategy: Strategy,
    pub dims: BlockDims,
    pub elem_bytes: usize,
    pub param_elems: usize,
    /// Feature bytes retained at the end of an inference forward pass.
    pub feature_bytes_forward: usize,
    /// Peak live feature+workspace bytes of the inference plan.
    pub inference_peak_bytes: usize,
    /// Peak live feature+workspace bytes of the training plan.
    pub feature_bytes_training_peak: usize,
    pub copy_counts: Vec<usize>,
    pub concat_storage_bytes: usize,
    pub workspace_bytes: usize,
    /// Largest number of feature maps any single layer reads (inference
    /// storage bound, in maps of H x W).
    pub stored_map_bound: usize,
    pub wall_ms: Option<f64>,
}

impl MemoryReport {
    pub const CSV_HEADER: &'static str = "strategy,mode_basis,depth,k,k0,batch,h,w,elem_bytes,params,\
         feature_bytes_fwd,feature_bytes_train_peak,inference_peak_bytes,concat_storage_bytes,\
         workspace_bytes,stored_map_bound,copy_counts,wall_ms";

    pub fn csv_row(&self) -> String {
        let copies =
            self.copy_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.strategy.name(),
            "both",
            self.dims.m,
            self.dims.k,
            self.dims.k0,
            self.dims.batch,
            self.dims.h,
            self.dims.w,
            self.elem_bytes,
            self.param_elems,
            self.feature_bytes_forward,
            self.feature_bytes_training_peak,
            self.inference_peak_bytes,
            self.concat_storage_bytes,
            self.workspace_bytes,
            self.stored_map_bound,
            copies,
            self.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_else(|| "0".into()),
        )
    }
}

/// (plan buffer, channel offset, channels, node whose value is expected).
type Region = (usize, usize, usize, usize);

/// Which input values an op's backward re-reads (parameters aside).
fn backward_value_reads(op: &Op) -> &'static [usize] {
    match op {
        Op::Conv2d { .. } | Op::BatchNorm { .. } | Op::Linear => &[0],
        _ => &[],
    }
}

struct Deriver<'t, E: Element> {
    tape: &'t Tape<E>,
    elem_bytes: usize,
    /// Plan unit per tape node (its own Fresh unit), if any.
    node_unit: Vec<Option<usize>>,
    /// Plan unit per tape buffer.
    buf_unit: Vec<usize>,
    bufs: Vec<PlanBuf>,
    steps: Vec<PlanStep>,
    /// Workspace residency while deriving (mirrors the executor).
    ws_resident: Vec<Option<usize>>,
    recompute_counts: Vec<u32>,
}

impl<'t, E: Element> Deriver<'t, E> {
    fn new(tape: &'t Tape<E>, elem_bytes: usize) -> Self {
        let nodes = tape.node_count();
        let mut d = Deriver {
            tape,
            elem_bytes,
            node_unit: vec![None; nodes],
            buf_unit: Vec::new(),
            bufs: Vec::new(),
            steps: Vec::new(),
            ws_resident: Vec::new(),
            recompute_counts: vec![0; nodes],
        };
        for (i, decl) in tape.buf_decls.iter().enumerate() {
            d.buf_unit.push(d.bufs.len());
            d.bufs.push(PlanBuf {
                label: if decl.exclusive { format!("workspace{i}") } else { format!("block_buffer{i}") },
                channels: decl.channels,
                chan_bytes: decl.n * decl.h * decl.w * elem_bytes,
                preallocated: true,
                exclusive: decl.exclusive,
                concat: !decl.exclusive,
            });
            d.ws_resident.push(None);
        }
        d
    }

    /// The regions holding node `v`'s value: aliasing concatenations decompose
    /// into their sources' regions with the sources as expected writers.
    fn value_regions(&self, v: usize) -> Vec<Region> {
        let node = &self.tape.nodes[v];
        if matches!(node.op, Op::Concat)
            && matches!(node.place, Place::Buffer { write: false, .. })
        {
            return node
                .inputs
                .iter()
                .flat_map(|s| self.value_regions(s.index()))
                .collect();
        }
        let (root, view) = self.tape.resolve(v);
        match &self.tape.nodes[root].place {
            Place::Fresh => {
                let unit = self.node_unit[root].expect("fresh unit exists");
                vec![(unit, 0, view.c, v)]
            }
            Place::Buffer { buf, c_off, .. } => {
                let unit = self.buf_unit[buf.0];
                let off = if self.bufs[unit].exclusive { 0 } else { *c_off };
                vec![(unit, off, view.c, v)]
            }
            Place::SharesInput => unreachable!(),
        }
    }

    fn own_region(&self, v: usize) -> (usize, usize, usize) {
        let (root, view) = self.tape.resolve(v);
        match &self.tape.nodes[root].place {
            Place::Fresh => (self.node_unit[root].expect("unit"), 0, view.c),
            Place::Buffer { buf, c_off, .. } => {
                let unit = self.buf_unit[buf.0];
                let off = if self.bufs[unit].exclusive { 0 } else { *c_off };
                (unit, off, view.c)
            }
            Place::SharesInput => unreachable!(),
        }
    }

    fn emit_reads_of_inputs(&mut self, v: usize) {
        for input in self.tape.nodes[v].inputs.clone() {
            if matches!(&self.tape.nodes[input.index()].op, Op::Param { .. }) {
                continue;
            }
            for (buf, off, chans, expect) in self.value_regions(input.index()) {
                self.steps.push(PlanStep::Read { buf, chan_off: off, chans, expect });
            }
        }
    }

    /// Forward step emission for one node.
    fn forward_node(&mut self, v: usize) {
        let node = self.tape.nodes[v].clone();
        match node.place {
            Place::Fresh => {
                if matches!(node.op, Op::Param { .. }) {
                    return;
                }
                let unit = self.bufs.len();
                self.node_unit[v] = Some(unit);
                self.bufs.push(PlanBuf {
                    label: format!("n{v}:{}", node.op.kind_name()),
                    channels: node.shape.c,
                    chan_bytes: node.shape.n * node.shape.hw() * self.elem_bytes,
                    preallocated: false,
                    exclusive: false,
                    concat: matches!(node.op, Op::Concat),
                });
                self.steps.push(PlanStep::Alloc { buf: unit });
                self.emit_reads_of_inputs(v);
                self.steps.push(PlanStep::Write { buf: unit, chan_off: 0, chans: node.shape.c, writer: v });
            }
            Place::Buffer { buf, write, .. } => {
                if !write {
                    return; // aliasing concat: no data movement
                }
                if !matches!(node.op, Op::Input) {
                    self.emit_reads_of_inputs(v);
                }
                let (unit, off, chans) = self.own_region(v);
                self.steps.push(PlanStep::Write { buf: unit, chan_off: off, chans, writer: v });
                if self.bufs[self.buf_unit[buf.0]].exclusive {
                    self.ws_resident[buf.0] = Some(v);
                }
            }
            Place::SharesInput => {
                // In-place transform: read the input value, write over it.
                self.emit_reads_of_inputs(v);
                let (unit, off, chans) = self.own_region(v);
                self.steps.push(PlanStep::Write { buf: unit, chan_off: off, chans, writer: v });
                let (root, _) = self.tape.resolve(v);
                if let Place::Buffer { buf, .. } = &self.tape.nodes[root].place {
                    if self.bufs[self.buf_unit[buf.0]].exclusive {
                        self.ws_resident[buf.0] = Some(v);
                    }
                }
            }
        }
    }

    /// Mirror of the executor's materialization rule during backward.
    fn materialize(&mut self, v: usize) {
        let (root, _) = self.tape.resolve(v);
        let buf = match &self.tape.nodes[root].place {
            Place::Buffer { buf, .. } if self.tape.buf_decls[buf.0].exclusive => buf,
            _ => return,
        };
        let flagged = &self.tape.nodes[v].recompute;
        if self.ws_resident[buf.0] == Some(v) && (!flagged || self.recompute_counts[v] > 0) {
            return;
        }
        let mut chain = vec![v];
        let mut cur = v;
        while cur != root {
            cur = self.tape.nodes[cur].inputs[0].index();
            chain.push(cur);
        }
        chain.reverse();
        for c in chain {
            self.steps.push(PlanStep::Recompute { node: c });
            self.emit_reads_of_inputs(c);
            let (unit, off, chans) = self.own_region(c);
            self.steps.push(PlanStep::Write { buf: unit, chan_off: off, chans, writer: c });
            self.recompute_counts[c] += 1;
        }
        self.ws_resident[buf.0] = Some(v);
    }
}

/// Compute the allocation plan for one dense block.
pub fn plan(
    strategy: Strategy,
    dims: &BlockDims,
    mode: PlanMode,
    elem_bytes: usize,
) -> Result<MemoryPlan> {
    if !matches!(elem_bytes, 4 | 8) {
        return Err(Error::config("element width must be 4 or 8 bytes"));
    }
    let net: BlockNetwork<f64> = lower_block(dims, strategy, 0)?;
    let tape = &net.tape;
    let mut d = Deriver::new(tape, elem_bytes);

    for unit in 0..d.buf_unit.len() {
        let u = d.buf_unit[unit];
        d.steps.push(PlanStep::Alloc { buf: u });
    }

    // Inference walks stop after the block output; training includes the sum
    // loss and the whole reverse pass.
    let forward_end = match mode {
        PlanMode::Inference => net.output_id.index() + 1,
        PlanMode::Training => tape.node_count(),
    };
    for v in 0..forward_end {
        d.forward_node(v);
    }

    match mode {
        PlanMode::Inference => {
            // Free each transient unit after its last reader; the block output
            // storage is the hand-off and stays.
            let mut last_read_step: Vec<Option<usize>> = vec![None; d.bufs.len()];
            for (i, s) in d.steps.iter().enumerate() {
                if let PlanStep::Read { buf, .. } = s {
                    last_read_step[*buf] = Some(i);
                }
            }
            let (out_unit, _, _) = d.own_region(net.output_id.index());
            let mut frees: Vec<(usize, usize)> = Vec::new(); // (after step, unit)
            for (unit, lr) in last_read_step.iter().enumerate() {
                // The block output storage is the hand-off; pre-allocated
                // buffers (block buffer, workspace) are freed explicitly.
                if unit == out_unit || d.bufs[unit].preallocated {
                    continue;
                }
                if let Some(step) = lr {
                    frees.push((*step, unit));
                }
            }
            frees.sort_unstable();
            for (step, unit) in frees.into_iter().rev() {
                d.steps.insert(step + 1, PlanStep::Free { buf: unit });
            }
            // Workspace (if any) dies with the pass.
            for (b, decl) in tape.buf_decls.iter().enumerate() {
                if decl.exclusive {
                    d.steps.push(PlanStep::Free { buf: d.buf_unit[b] });
                }
            }
        }
        PlanMode::Training => {
            // Reverse pass: recompute materializations, value reads, and a
            // free once each node's own backward is done.
            for v in (0..tape.node_count()).rev() {
                let node = tape.nodes[v].clone();
                if matches!(node.op, Op::Param { .. }) {
                    continue;
                }
                if matches!(node.op, Op::Relu) {
                    self_materialize(&mut d, v);
                }
                for rel in backward_value_reads(&node.op) {
                    let input = node.inputs[*rel].index();
                    if matches!(&tape.nodes[input].op, Op::Param { .. }) {
                        continue;
                    }
                    d.materialize(input);
                    for (buf, off, chans, expect) in d.value_regions(input) {
                        d.steps.push(PlanStep::Read { buf, chan_off: off, chans, expect });
                    }
                }
                if let Some(unit) = d.node_unit[v] {
                    d.steps.push(PlanStep::Free { buf: unit });
                }
            }
            for b in 0..tape.buf_decls.len() {
                d.steps.push(PlanStep::Free { buf: d.buf_unit[b] });
            }
        }
    }

    // ---- structural metrics ----
    let out_unit = d.own_region(net.output_id.index()).0;
    let retained_bytes = match mode {
        PlanMode::Inference => d.bufs[out_unit].bytes(),
        PlanMode::Training => 0,
    };
    let concat_storage_bytes: usize =
        d.bufs.iter().filter(|b| b.concat).map(|b| b.bytes()).sum();
    let workspace_bytes: usize =
        d.bufs.iter().filter(|b| b.exclusive).map(|b| b.bytes()).sum();

    // Copies of each layer output that live in concatenation storage.
    let mut copy_counts = vec![0usize; dims.m];
    if strategy.uses_block_buffer() {
        copy_counts.iter_mut().for_each(|c| *c = 1);
    } else {
        for v in 0..tape.node_count() {
            let node = &tape.nodes[v];
            if matches!(node.op, Op::Concat) && matches!(node.place, Place::Fresh) {
                for src in &node.inputs {
                    if let Some(pos) =
                        net.features.iter().skip(1).position(|f| f == src)
                    {
                        copy_counts[pos] += 1;
                    }
                }
            }
        }
    }

    let param_elems = net.params.iter().map(|(_, id)| tape.shape(*id).numel()).sum();

    Ok(MemoryPlan {
        strategy,
        mode,
        dims: *dims,
        elem_bytes,
        bufs: d.bufs,
        steps: d.steps,
        copy_counts,
        concat_storage_bytes,
        workspace_bytes,
        param_elems,
        retained_bytes,
    })
}

fn self_materialize<E: Element>(d: &mut Deriver<'_, E>, v: usize) {
    d.materialize(v);
    for (buf, off, chans, expect) in d.value_regions(v) {
        d.steps.push(PlanStep::Read { buf, chan_off: off, chans, expect });
    }
}

/// Replay the plan, rejecting reads of freed, never-written, or overwritten
/// regions and malformed alloc/free pairing. Returns peak live bytes.
pub fn verify(plan: &MemoryPlan) -> Result<usize> {
    #[derive(Clone)]
    struct BufState {
        allocated: bool,
        freed: bool,
        writers: Vec<Option<usize>>,
    }
    let mut state: Vec<BufState> = plan
        .bufs
        .iter()
        .map(|b| BufState { allocated: false, freed: false, writers: vec![None; b.channels] })
        .collect();
    let mut live = 0usize;
    let mut peak = 0usize;
    for (i, step) in plan.steps.iter().enumerate() {
        match *step {
            PlanStep::Alloc { buf } => {
                let s = &mut state[buf];
                if s.allocated {
                    return Err(Error::plan_bug(i, format!("double alloc of {}", plan.bufs[buf].label)));
                }
                s.allocated = true;
                live += plan.bufs[buf].bytes();
                peak = peak.max(live);
            }
            PlanStep::Write { buf, chan_off, chans, writer } => {
                let s = &mut state[buf];
                if !s.allocated || s.freed {
                    return Err(Error::plan_bug(i, format!("write to unallocated {}", plan.bufs[buf].label)));
                }
                if chan_off + chans > plan.bufs[buf].channels {
                    return Err(Error::plan_bug(i, "write out of bounds"));
                }
                for c in chan_off..chan_off + chans {
                    s.writers[c] = Some(writer);
                }
            }
            PlanStep::Read { buf, chan_off, chans, expect } => {
                let s = &state[buf];
                if !s.allocated {
                    return Err(Error::plan_bug(i, format!("read of never-allocated {}", plan.bufs[buf].label)));
                }
                if s.freed {
                    return Err(Error::plan_bug(i, format!("read after free of {}", plan.bufs[buf].label)));
                }
                for c in chan_off..chan_off + chans {
                    match s.writers[c] {
                        None => {
                            return Err(Error::plan_bug(
                                i,
                                format!("read of never-written channel {c} of {}", plan.bufs[buf].label),
                            ))
                        }
                        Some(w) if w != expect => {
                            return Err(Error::plan_bug(
                                i,
                                format!(
                                    "stale read: channel {c} of {} holds n{w}, expected n{expect}",
                                    plan.bufs[buf].label
                                ),
                            ))
                        }
                        _ => {}
                    }
                }
            }
            PlanStep::Free { buf } => {
                let s = &mut state[buf];
                if !s.allocated || s.freed {
                    return Err(Error::plan_bug(i, format!("bad free of {}", plan.bufs[buf].label)));
                }
                s.freed = true;
                live -= plan.bufs[buf].bytes();
            }
            PlanStep::Recompute { .. } => {}
        }
    }
    Ok(peak)
}

/// Verify and summarize one plan: exact live-byte maximum plus the
/// structural counters carried on the plan.
pub fn audit_peak(plan: &MemoryPlan) -> Result<MemoryReport> {
    let peak = verify(plan)?;
    let (inference_peak, training_peak, fwd) = match plan.mode {
        PlanMode::Inference => (peak, 0, plan.retained_bytes),
        PlanMode::Training => (0, peak, 0),
    };
    Ok(MemoryReport {
        strategy: plan.strategy,
        dims: plan.dims,
        elem_bytes: plan.elem_bytes,
        param_elems: plan.param_elems,
        feature_bytes_forward: fwd,
        inference_peak_bytes: inference_peak,
        feature_bytes_training_peak: training_peak,
        copy_counts: plan.copy_counts.clone(),
        concat_storage_bytes: plan.concat_storage_bytes,
        workspace_bytes: plan.workspace_bytes,
        stored_map_bound: stored_map_bound(plan.dims.m, plan.dims.k, plan.dims.k0),
        wall_ms: None,
    })
}

/// Both modes of one (strategy, block), merged.
pub fn report(strategy: Strategy, dims: &BlockDims, elem_bytes: usize) -> Result<MemoryReport> {
    let inf = audit_peak(&plan(strategy, dims, PlanMode::Inference, elem_bytes)?)?;
    let tr = audit_peak(&plan(strategy, dims, PlanMode::Training, elem_bytes)?)?;
    Ok(MemoryReport {
        feature_bytes_training_peak: tr.feature_bytes_training_peak,
        ..inf
    })
}

/// Largest concatenation any single layer reads, in feature maps.
pub fn stored_map_bound(m: usize, k: usize, k0: usize) -> usize {
    input_channels(k0, k, m)
}

/// Run a block under a verified plan: lowers the fragment with the plan's
/// strategy, checks the plan matches the lowering, executes, and audits the
/// runtime recompute counters against the plan.
/// Block output, training loss (training mode only), and named parameter
/// gradients.
pub type ExecResult<E> = (Tensor<E>, Option<E>, Vec<(String, Tensor<E>)>);

pub fn execute_with_plan<E: Element>(
    the_plan: &MemoryPlan,
    input: &Tensor<E>,
    param_seed: u64,
) -> Result<ExecResult<E>> {
    verify(the_plan)?;
    let derived = plan(the_plan.strategy, &the_plan.dims, the_plan.mode, the_plan.elem_bytes)?;
    if derived.steps != the_plan.steps || derived.bufs != the_plan.bufs {
        return Err(Error::plan_bug(0, "plan does not match the lowered block"));
    }
    let mut net: BlockNetwork<E> = lower_block(&the_plan.dims, the_plan.strategy, 0)?;
    net.fill_params(param_seed);
    match the_plan.mode {
        PlanMode::Inference => {
            let out = net.forward_inference(input)?;
            Ok((out, None, Vec::new()))
        }
        PlanMode::Training => {
            let loss = net.forward_backward(input)?;
            // Runtime audit: each planned recompute ran exactly as planned.
            let mut planned: Vec<u32> = vec![0; net.tape.node_count()];
            for s in &the_plan.steps {
                if let PlanStep::Recompute { node } = s {
                    planned[*node] += 1;
                }
            }
            for (v, want) in planned.iter().enumerate() {
                let actual = net.tape.recompute_runs(crate::tape::NodeId::test_id(v));
                if actual != *want {
                    return Err(Error::plan_bug(
                        v,
                        format!("workspace conflict: node recomputed {actual}x, planned {want}x"),
                    ));
                }
            }
            let out = net.tape.value(net.output_id);
            Ok((out, Some(loss), net.grads()))
        }
    }
}
