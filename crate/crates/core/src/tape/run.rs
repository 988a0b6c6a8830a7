//! Forward and backward interpretation of the tape.
//!
//! Output storage is taken out of the tape, filled, and put back, so kernels
//! can read inputs through shared borrows. The one genuinely aliased case —
//! a convolution that reads the front of a block buffer and writes its own
//! region of the same buffer — is handled with per-batch `split_at_mut`.

use super::{Aux, BufId, Mode, NodeId, Op, Place, Tape};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvGeom};
use crate::ops::{head, misc, norm, pool};
use crate::par::for_each_chunk_mut;
use crate::tensor::ViewInfo;

/// Apply `f(n, slab)` over each batch slab of a view, in parallel.
fn for_view_slabs_mut<E, F>(storage: &mut [E], v: &ViewInfo, f: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Sync + Send,
{
    let hw = v.hw();
    if v.is_contiguous() {
        let lim = v.n * v.slab_len();
        for_each_chunk_mut(&mut storage[..lim], v.slab_len(), f);
    } else {
        for_each_chunk_mut(storage, v.c_total * hw, |n, chunk| {
            let start = v.c_off * hw;
            f(n, &mut chunk[start..start + v.slab_len()]);
        });
    }
}

enum OutKind {
    Fresh,
    Buf(BufId),
}

impl<E: Element> Tape<E> {
    fn decl_elems(&self, b: BufId) -> usize {
        self.buf_decls[b.0].numel()
    }

    fn take_buf(&mut self, b: BufId) -> Vec<E> {
        match self.bufs[b.0].take() {
            Some(v) => v,
            None => vec![E::zero(); self.decl_elems(b)],
        }
    }

    fn take_grad_buf(&mut self, b: BufId) -> Vec<E> {
        match self.grad_bufs[b.0].take() {
            Some(v) => v,
            None => vec![E::zero(); self.decl_elems(b)],
        }
    }

    /// Current value storage of a root node (must be materialized).
    fn data_of(&self, root: usize) -> &[E] {
        match self.nodes[root].place {
            Place::Fresh => self.vals[root].as_deref().expect("value missing"),
            Place::Buffer { buf, .. } => self.bufs[buf.0].as_deref().expect("buffer missing"),
            Place::SharesInput => unreachable!(),
        }
    }

    fn grad_data_of(&self, root: usize) -> Option<&[E]> {
        match self.nodes[root].place {
            Place::Fresh => self.grad_vals[root].as_deref(),
            Place::Buffer { buf, .. } => self.grad_bufs[buf.0].as_deref(),
            Place::SharesInput => unreachable!(),
        }
    }

    /// Take the output storage for node `id` (its own place, which is the
    /// storage root for any writing node).
    fn take_out(&mut self, id: usize) -> (Vec<E>, OutKind) {
        match self.nodes[id].place {
            Place::Fresh => {
                let n = self.nodes[id].shape.numel();
                let v = match self.vals[id].take() {
                    Some(mut old) if old.len() == n => {
                        for x in old.iter_mut() {
                            *x = E::zero();
                        }
                        old
                    }
                    _ => vec![E::zero(); n],
                };
                (v, OutKind::Fresh)
            }
            Place::Buffer { buf, .. } => (self.take_buf(buf), OutKind::Buf(buf)),
            Place::SharesInput => unreachable!("in-place ops take the root instead"),
        }
    }

    fn put_back(&mut self, id: usize, storage: Vec<E>, kind: OutKind) {
        match kind {
            OutKind::Fresh => self.vals[id] = Some(storage),
            OutKind::Buf(b) => {
                self.bufs[b.0] = Some(storage);
                if self.buf_decls[b.0].exclusive {
                    self.resident[b.0] = Some(id);
                }
            }
        }
    }

    /// Take the in-place storage root of `id` for mutation.
    fn take_root(&mut self, root: usize) -> (Vec<E>, OutKind) {
        match self.nodes[root].place {
            Place::Fresh => (self.vals[root].take().expect("in-place value missing"), OutKind::Fresh),
            Place::Buffer { buf, .. } => (self.take_buf(buf), OutKind::Buf(buf)),
            Place::SharesInput => unreachable!(),
        }
    }

    fn put_back_root(&mut self, root: usize, storage: Vec<E>, kind: OutKind, new_resident: usize) {
        match kind {
            OutKind::Fresh => self.vals[root] = Some(storage),
            OutKind::Buf(b) => {
                self.bufs[b.0] = Some(storage);
                if self.buf_decls[b.0].exclusive {
                    self.resident[b.0] = Some(new_resident);
                }
            }
        }
    }

    // ---------------------------------------------------------------- forward

    /// Re-execute every non-leaf node in recorded order.
    pub fn forward(&mut self) -> Result<()> {
        let n = self.nodes.len();
        self.forward_range(0, n)?;
        self.set_forward_done(true);
        Ok(())
    }

    /// Run nodes `[0, limit)` only — an eval pass can stop before the loss.
    pub fn forward_until(&mut self, limit: NodeId) -> Result<()> {
        self.forward_range(0, limit.0)
    }

    fn forward_range(&mut self, from: usize, to: usize) -> Result<()> {
        for i in from..to {
            match self.nodes[i].op {
                Op::Input => {
                    if self.vals[i].is_none() {
                        return Err(Error::usage("forward with an unset input value"));
                    }
                    self.run_node(i)?;
                }
                Op::Param { .. } => {
                    if self.vals[i].is_none() {
                        return Err(Error::usage("forward with an unset parameter"));
                    }
                }
                _ => self.run_node(i)?,
            }
        }
        Ok(())
    }

    pub(crate) fn run_node(&mut self, id: usize) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Input => self.run_input(id),
            Op::Param { .. } => Ok(()),
            Op::Conv2d { stride, pad } => self.run_conv(id, stride, pad),
            Op::BatchNorm { state } => self.run_bn(id, state),
            Op::Relu => self.run_relu(id),
            Op::Concat => self.run_concat(id),
            Op::AvgPool2 => self.run_avg_pool2(id),
            Op::MaxPool { k, stride, pad } => self.run_max_pool(id, k, stride, pad),
            Op::GlobalAvgPool => self.run_global_avg_pool(id),
            Op::Dropout { rate, salt } => self.run_dropout(id, rate, salt),
            Op::Linear => self.run_linear(id),
            Op::SoftmaxXent => self.run_softmax_xent(id),
            Op::Add => self.run_add(id),
            Op::Sum => self.run_sum(id),
        }
    }

    fn run_input(&mut self, id: usize) -> Result<()> {
        // Buffer-placed inputs stage their fed value into the buffer region.
        if let Place::Buffer { .. } = self.nodes[id].place {
            let feed = self.vals[id]
                .as_ref()
                .ok_or_else(|| Error::usage("forward with an unset input value"))?
                .clone();
            let (_, view) = self.resolve(id);
            let (mut storage, kind) = self.take_out(id);
            let slab = view.slab_len();
            for_view_slabs_mut(&mut storage, &view, |n, out| {
                out.copy_from_slice(&feed[n * slab..(n + 1) * slab]);
            });
            self.put_back(id, storage, kind);
        }
        Ok(())
    }

    fn conv_geom(&self, id: usize) -> ConvGeom {
        let n = &self.nodes[id];
        let (stride, pad) = match n.op {
            Op::Conv2d { stride, pad } => (stride, pad),
            _ => unreachable!(),
        };
        let xs = self.nodes[n.inputs[0].0].shape;
        let ws = self.nodes[n.inputs[1].0].shape;
        ConvGeom::new(ws.c, ws.n, xs.h, xs.w, ws.h, ws.w, stride, pad)
            .expect("validated at record time")
    }

    fn run_conv(&mut self, id: usize, _stride: usize, _pad: usize) -> Result<()> {
        let g = self.conv_geom(id);
        let x = self.nodes[id].inputs[0].0;
        let w = self.nodes[id].inputs[1].0;
        let (xroot, xview) = self.resolve(x);
        let (wroot, _) = self.resolve(w);

        let same_buf = match (self.nodes[xroot].place, self.nodes[id].place) {
            (Place::Buffer { buf: a, .. }, Place::Buffer { buf: b, .. }) => a == b,
            _ => false,
        };

        let out_slab = g.cout * g.out_h * g.out_w;
        if same_buf {
            // Read region must end at or before the write region.
            let (out_off, buf) = match self.nodes[id].place {
                Place::Buffer { buf, c_off, .. } => (c_off, buf),
                _ => unreachable!(),
            };
            assert!(xview.c_off + xview.c <= out_off, "conv write overlaps its read region");
            assert_eq!(g.out_h * g.out_w, xview.hw(), "in-buffer conv must preserve extent");
            let weight = self.vals[wroot].as_ref().expect("weight missing").clone();
            let mut storage = self.take_buf(buf);
            let hw = xview.hw();
            let chunk = xview.c_total * hw;
            for_each_chunk_mut(&mut storage, chunk, |_n, slabs| {
                let (lo, hi) = slabs.split_at_mut(out_off * hw);
                let x_slab = &lo[xview.c_off * hw..xview.c_off * hw + xview.slab_len()];
                conv::forward_one(x_slab, &weight, &g, &mut hi[..out_slab]);
            });
            self.bufs[buf.0] = Some(storage);
            Ok(())
        } else {
            let (mut out, kind) = self.take_out(id);
            let (_, oview) = self.resolve(id);
            {
                let xdata = self.data_of(xroot);
                let weight = self.data_of(wroot);
                for_view_slabs_mut(&mut out, &oview, |n, y| {
                    conv::forward_one(xview.slab(xdata, n), weight, &g, y);
                });
            }
            self.put_back(id, out, kind);
            Ok(())
        }
    }

    fn run_bn(&mut self, id: usize, state: super::BnStateId) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        let gamma = self.nodes[id].inputs[1].0;
        let beta = self.nodes[id].inputs[2].0;
        let (xroot, xview) = self.resolve(x);

        if !self.in_recompute {
            let (mean, var) = {
                let xdata = self.data_of(xroot);
                match self.mode() {
                    Mode::Train => {
                        if xview.n * xview.hw() < 2 {
                            return Err(Error::config(format!(
                                "degenerate batch: batch norm in training mode needs at least 2 \
                                 values per channel, got {}",
                                xview.n * xview.hw()
                            )));
                        }
                        norm::channel_stats(xdata, &xview)
                    }
                    Mode::Eval => {
                        let s = &self.bn_states[state.0];
                        (s.running_mean.clone(), s.running_var.clone())
                    }
                }
            };
            let eps = self.bn_states[state.0].eps;
            let inv_std: Vec<E> =
                var.iter().map(|v| E::one() / (*v + E::from_f64(eps)).sqrt()).collect();
            if matches!(self.mode(), Mode::Train) {
                // Exponential moving average with the unbiased batch variance.
                let m = (xview.n * xview.hw()) as f64;
                let unbias = E::from_f64(m / (m - 1.0));
                let s = &mut self.bn_states[state.0];
                let mom = E::from_f64(s.momentum);
                let keep = E::one() - mom;
                for c in 0..var.len() {
                    s.running_mean[c] = keep * s.running_mean[c] + mom * mean[c];
                    s.running_var[c] = keep * s.running_var[c] + mom * var[c] * unbias;
                }
            }
            self.aux[id] = Aux::Bn {
                mean,
                inv_std,
                // batch-statistics backward only applies in training mode
            };
        }
        let (mean, inv_std) = match &self.aux[id] {
            Aux::Bn { mean, inv_std } => (mean.clone(), inv_std.clone()),
            _ => unreachable!("bn aux saved above"),
        };

        let (mut out, kind) = self.take_out(id);
        let (_, oview) = self.resolve(id);
        debug_assert!(oview.is_contiguous(), "bn writes contiguous storage");
        {
            let xdata = self.data_of(xroot);
            let g = self.vals[self.storage_root(gamma)].as_ref().expect("gamma");
            let b = self.vals[self.storage_root(beta)].as_ref().expect("beta");
            let lim = oview.n * oview.slab_len();
            norm::normalize(xdata, &xview, &mean, &inv_std, g, b, &mut out[..lim]);
        }
        self.put_back(id, out, kind);
        Ok(())
    }

    fn run_relu(&mut self, id: usize) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        match self.nodes[id].place {
            Place::SharesInput => {
                let root = self.storage_root(id);
                let (_, view) = self.resolve(id);
                let (mut storage, kind) = self.take_root(root);
                for_view_slabs_mut(&mut storage, &view, |_n, slab| {
                    misc::relu_forward_inplace(slab);
                });
                self.put_back_root(root, storage, kind, id);
                Ok(())
            }
            _ => {
                let (xroot, xview) = self.resolve(x);
                let (mut out, kind) = self.take_out(id);
                let (_, oview) = self.resolve(id);
                {
                    let xdata = self.data_of(xroot);
                    for_view_slabs_mut(&mut out, &oview, |n, slab| {
                        misc::relu_forward(xview.slab(xdata, n), slab);
                    });
                }
                self.put_back(id, out, kind);
                Ok(())
            }
        }
    }

    fn run_concat(&mut self, id: usize) -> Result<()> {
        match self.nodes[id].place {
            Place::Buffer { buf, c_off, write: false } => {
                // Aliasing concatenation: verify the sources already occupy
                // consecutive regions of this buffer in order.
                let mut running = c_off;
                for (i, src) in self.nodes[id].inputs.clone().iter().enumerate() {
                    let (sroot, sview) = self.resolve(src.0);
                    let ok = match self.nodes[sroot].place {
                        Place::Buffer { buf: sb, c_off: so, .. } => sb == buf && so == running,
                        _ => false,
                    };
                    if !ok {
                        return Err(Error::plan_bug(
                            id,
                            format!("concat source {} is not aliased at channel {}", i, running),
                        ));
                    }
                    running += sview.c;
                }
                Ok(())
            }
            Place::Fresh => {
                let inputs = self.nodes[id].inputs.clone();
                let resolved: Vec<(usize, ViewInfo)> =
                    inputs.iter().map(|s| self.resolve(s.0)).collect();
                let (mut out, kind) = self.take_out(id);
                let (_, oview) = self.resolve(id);
                {
                    let datas: Vec<&[E]> = resolved.iter().map(|(r, _)| self.data_of(*r)).collect();
                    for_view_slabs_mut(&mut out, &oview, |n, slab| {
                        let mut at = 0;
                        for ((_, sv), data) in resolved.iter().zip(&datas) {
                            let src = sv.slab(data, n);
                            slab[at..at + src.len()].copy_from_slice(src);
                            at += src.len();
                        }
                    });
                }
                self.put_back(id, out, kind);
                Ok(())
            }
            _ => Err(Error::plan_bug(id, "concat cannot be placed in-place or buffer-writing")),
        }
    }

    fn run_avg_pool2(&mut self, id: usize) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        let (xroot, xview) = self.resolve(x);
        let (mut out, kind) = self.take_out(id);
        let (_, oview) = self.resolve(id);
        {
            let xdata = self.data_of(xroot);
            for_view_slabs_mut(&mut out, &oview, |n, slab| {
                pool::avg2_forward_one(xview.slab(xdata, n), xview.c, xview.h, xview.w, slab);
            });
        }
        self.put_back(id, out, kind);
        Ok(())
    }

    fn run_max_pool(&mut self, id: usize, k: usize, stride: usize, pad: usize) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        let (xroot, xview) = self.resolve(x);
        let shape = self.nodes[id].shape;
        let out_slab = shape.c * shape.hw();
        let mut argmax = vec![0u32; shape.numel()];
        let (mut out, kind) = self.take_out(id);
        let (_, oview) = self.resolve(id);
        {
            let xdata = self.data_of(xroot);
            // Sequential over batch: the argmax buffer is indexed per slab.
            for n in 0..oview.n {
                let start = oview.slab_start(n);
                pool::max_forward_one(
                    xview.slab(xdata, n),
                    xview.c,
                    xview.h,
                    xview.w,
                    k,
                    stride,
                    pad,
                    &mut out[start..start + oview.slab_len()],
                    &mut argmax[n * out_slab..(n + 1) * out_slab],
                );
            }
        }
        self.aux[id] = Aux::ArgMax(argmax);
        self.put_back(id, out, kind);
        Ok(())
    }

    fn run_global_avg_pool(&mut self, id: usize) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        let (xroot, xview) = self.resolve(x);
        let (mut out, kind) = self.take_out(id);
        let (_, oview) = self.resolve(id);
        {
            let xdata = self.data_of(xroot);
            for_view_slabs_mut(&mut out, &oview, |n, slab| {
                pool::global_avg_forward_one(xview.slab(xdata, n), xview.c, xview.hw(), slab);
            });
        }
        self.put_back(id, out, kind);
        Ok(())
    }

    fn run_dropout(&mut self, id: usize, rate: f64, salt: u64) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        let numel = self.nodes[id].shape.numel();
        let active = matches!(self.mode(), Mode::Train) && rate > 0.0;
        if active && !self.in_recompute {
            self.aux[id] = Aux::Mask(misc::dropout_mask(numel, rate, self.seed() ^ salt));
        } else if !active {
            self.aux[id] = Aux::None;
        }
        match self.nodes[id].place {
            Place::SharesInput => {
                if active {
                    let mask = match &self.aux[id] {
                        Aux::Mask(m) => m.clone(),
                        _ => unreachable!(),
                    };
                    let root = self.storage_root(id);
                    let (_, view) = self.resolve(id);
                    let slab = view.slab_len();
                    let (mut storage, kind) = self.take_root(root);
                    for_view_slabs_mut(&mut storage, &view, |n, s| {
                        misc::dropout_apply_inplace(s, &mask[n * slab..(n + 1) * slab], rate);
                    });
                    self.put_back_root(root, storage, kind, id);
                }
                Ok(())
            }
            _ => {
                let (xroot, xview) = self.resolve(x);
                let (mut out, kind) = self.take_out(id);
                let (_, oview) = self.resolve(id);
                {
                    let xdata = self.data_of(xroot);
                    let slab = oview.slab_len();
                    let mask = match &self.aux[id] {
                        Aux::Mask(m) => Some(m),
                        _ => None,
                    };
                    for_view_slabs_mut(&mut out, &oview, |n, s| {
                        s.copy_from_slice(xview.slab(xdata, n));
                        if let Some(m) = mask {
                            misc::dropout_apply_inplace(s, &m[n * slab..(n + 1) * slab], rate);
                        }
                    });
                }
                self.put_back(id, out, kind);
                Ok(())
            }
        }
    }

    fn run_linear(&mut self, id: usize) -> Result<()> {
        let [x, w, b] = [
            self.nodes[id].inputs[0].0,
            self.nodes[id].inputs[1].0,
            self.nodes[id].inputs[2].0,
        ];
        let (xroot, xview) = self.resolve(x);
        let (mut out, kind) = self.take_out(id);
        let (_, oview) = self.resolve(id);
        {
            let xdata = self.data_of(xroot);
            let wdata = self.data_of(self.storage_root(w));
            let bdata = self.data_of(self.storage_root(b));
            for_view_slabs_mut(&mut out, &oview, |n, slab| {
                head::linear_forward_one(xview.slab(xdata, n), wdata, bdata, slab);
            });
        }
        self.put_back(id, out, kind);
        Ok(())
    }

    fn run_softmax_xent(&mut self, id: usize) -> Result<()> {
        let logits = self.nodes[id].inputs[0].0;
        let shape = self.nodes[logits].shape;
        let labels = self
            .labels()
            .ok_or_else(|| Error::usage("softmax cross-entropy needs labels"))?
            .to_vec();
        let (loss, probs) = {
            let (lroot, _) = self.resolve(logits);
            let ldata = self.data_of(lroot);
            head::softmax_xent_forward(ldata, shape.n, shape.c, &labels)?
        };
        self.aux[id] = Aux::Probs(probs);
        self.vals[id] = Some(vec![loss]);
        Ok(())
    }

    fn run_add(&mut self, id: usize) -> Result<()> {
        let a = self.nodes[id].inputs[0].0;
        let b = self.nodes[id].inputs[1].0;
        let (aroot, aview) = self.resolve(a);
        let (broot, bview) = self.resolve(b);
        let (mut out, kind) = self.take_out(id);
        let (_, oview) = self.resolve(id);
        {
            let adata = self.data_of(aroot);
            let bdata = self.data_of(broot);
            for_view_slabs_mut(&mut out, &oview, |n, slab| {
                let asl = aview.slab(adata, n);
                let bsl = bview.slab(bdata, n);
                for ((o, x), y) in slab.iter_mut().zip(asl).zip(bsl) {
                    *o = *x + *y;
                }
            });
        }
        self.put_back(id, out, kind);
        Ok(())
    }

    fn run_sum(&mut self, id: usize) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        let (xroot, xview) = self.resolve(x);
        let total = {
            let xdata = self.data_of(xroot);
            let mut acc = E::zero();
            for n in 0..xview.n {
                for v in xview.slab(xdata, n) {
                    acc += *v;
                }
            }
            acc
        };
        self.vals[id] = Some(vec![total]);
        Ok(())
    }

    // --------------------------------------------------------------- backward

    /// Reverse pass from a scalar loss node. Fills gradients for every
    /// parameter and input on the path, honoring per-node recompute flags.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].shape.numel() != 1 {
            return Err(Error::usage("backward target must be a scalar"));
        }
        let have_loss = match self.nodes[loss.0].place {
            Place::Fresh => self.vals[loss.0].is_some(),
            _ => true,
        };
        if !have_loss {
            return Err(Error::usage("backward before forward"));
        }
        for g in self.grad_vals.iter_mut() {
            *g = None;
        }
        for g in self.grad_bufs.iter_mut() {
            *g = None;
        }
        for r in self.grad_resident.iter_mut() {
            *r = None;
        }
        for c in self.recompute_runs.iter_mut() {
            *c = 0;
        }
        self.ensure_grad(loss.0);
        match self.nodes[loss.0].place {
            Place::Fresh => {
                self.grad_vals[loss.0] = Some(vec![E::one()]);
            }
            _ => return Err(Error::usage("loss node must own its storage")),
        }
        for i in (0..self.nodes.len()).rev() {
            self.backward_node(i)?;
        }
        Ok(())
    }

    /// Allocate zeroed gradient storage for `id`'s storage root if absent.
    /// For exclusive buffers the prefix is re-zeroed when ownership changes.
    fn ensure_grad(&mut self, id: usize) -> usize {
        let root = self.storage_root(id);
        match self.nodes[root].place {
            Place::Fresh => {
                if self.grad_vals[root].is_none() {
                    self.grad_vals[root] = Some(vec![E::zero(); self.nodes[root].shape.numel()]);
                }
            }
            Place::Buffer { buf, .. } => {
                if self.grad_bufs[buf.0].is_none() {
                    let n = self.decl_elems(buf);
                    self.grad_bufs[buf.0] = Some(vec![E::zero(); n]);
                    self.grad_resident[buf.0] = None;
                }
                if self.buf_decls[buf.0].exclusive && self.grad_resident[buf.0] != Some(root) {
                    let lim = self.nodes[root].shape.numel();
                    let g = self.grad_bufs[buf.0].as_mut().unwrap();
                    for v in g[..lim].iter_mut() {
                        *v = E::zero();
                    }
                    self.grad_resident[buf.0] = Some(root);
                }
            }
            Place::SharesInput => unreachable!(),
        }
        root
    }

    /// Whether `id` has received any gradient.
    fn has_grad(&self, id: usize) -> bool {
        let root = self.storage_root(id);
        match self.nodes[root].place {
            Place::Fresh => self.grad_vals[root].is_some(),
            Place::Buffer { buf, .. } => {
                self.grad_bufs[buf.0].is_some()
                    && (!self.buf_decls[buf.0].exclusive
                        || self.grad_resident[buf.0] == Some(root))
            }
            Place::SharesInput => unreachable!(),
        }
    }

    /// Make sure node `v`'s forward value is resident, re-executing the
    /// recompute chain that produces it when a workspace has been overwritten.
    /// A flagged node is re-executed at least once per backward pass even if
    /// its value happens to still be resident (the last writer of a pass).
    fn materialize(&mut self, v: usize) -> Result<()> {
        let root = self.storage_root(v);
        let buf = match self.nodes[root].place {
            Place::Buffer { buf, .. } if self.buf_decls[buf.0].exclusive => buf,
            _ => return Ok(()), // non-workspace values are always retained
        };
        if self.resident[buf.0] == Some(v)
            && (!self.nodes[v].recompute || self.recompute_runs[v] > 0)
        {
            return Ok(());
        }
        // Chain: root, then the in-place descendants leading to v.
        let mut chain = vec![v];
        let mut cur = v;
        while cur != root {
            cur = self.nodes[cur].inputs[0].0;
            chain.push(cur);
        }
        chain.reverse();
        let prev = self.in_recompute;
        self.in_recompute = true;
        for node in chain {
            self.run_node(node)?;
            self.recompute_runs[node] += 1;
        }
        self.in_recompute = prev;
        debug_assert_eq!(self.resident[buf.0], Some(v));
        Ok(())
    }

    fn backward_node(&mut self, id: usize) -> Result<()> {
        if !self.has_grad(id) {
            return Ok(());
        }
        let op = self.nodes[id].op.clone();
        match op {
            Op::Input | Op::Param { .. } => Ok(()),
            Op::Conv2d { .. } => self.bw_conv(id),
            Op::BatchNorm { .. } => self.bw_bn(id),
            Op::Relu => self.bw_relu(id),
            Op::Concat => self.bw_concat(id),
            Op::AvgPool2 => self.bw_avg_pool2(id),
            Op::MaxPool { .. } => self.bw_max_pool(id),
            Op::GlobalAvgPool => self.bw_global_avg_pool(id),
            Op::Dropout { rate, .. } => self.bw_dropout(id, rate),
            Op::Linear => self.bw_linear(id),
            Op::SoftmaxXent => self.bw_softmax_xent(id),
            Op::Add => self.bw_add(id),
            Op::Sum => self.bw_sum(id),
        }
    }

    fn out_grad_view(&self, id: usize) -> (usize, ViewInfo) {
        self.resolve(id)
    }

    fn bw_sum(&mut self, id: usize) -> Result<()> {
        let g = self.grad_vals[id].as_ref().expect("sum grad")[0];
        let x = self.nodes[id].inputs[0].0;
        let xroot = self.ensure_grad(x);
        let (_, xview) = self.resolve(x);
        let (mut gx, kind) = self.take_grad_root(xroot);
        for_view_slabs_mut(&mut gx, &xview, |_n, slab| {
            for v in slab.iter_mut() {
                *v += g;
            }
        });
        self.put_back_grad_root(xroot, gx, kind);
        Ok(())
    }

    fn bw_softmax_xent(&mut self, id: usize) -> Result<()> {
        let g = self.grad_vals[id].as_ref().expect("loss grad")[0];
        let logits = self.nodes[id].inputs[0].0;
        let shape = self.nodes[logits].shape;
        let labels = self.labels().expect("labels set in forward").to_vec();
        let probs = match &self.aux[id] {
            Aux::Probs(p) => p.clone(),
            _ => unreachable!("probs saved in forward"),
        };
        let lroot = self.ensure_grad(logits);
        let (mut gl, kind) = self.take_grad_root(lroot);
        head::softmax_xent_backward(&probs, &labels, shape.n, shape.c, g, &mut gl);
        self.put_back_grad_root(lroot, gl, kind);
        Ok(())
    }

    fn bw_linear(&mut self, id: usize) -> Result<()> {
        let [x, w, b] = [
            self.nodes[id].inputs[0].0,
            self.nodes[id].inputs[1].0,
            self.nodes[id].inputs[2].0,
        ];
        self.materialize(x)?;
        let (xroot, xview) = self.resolve(x);
        let (groot, gview) = self.out_grad_view(id);
        let classes = self.nodes[id].shape.c;

        // dW and db accumulate sequentially over the batch.
        let wroot = self.ensure_grad(w);
        let broot = self.ensure_grad(b);
        let xgroot = self.ensure_grad(x);
        let (mut dw, wkind) = self.take_grad_root(wroot);
        let (mut db, bkind) = self.take_grad_root(broot);
        let (mut dx, xkind) = self.take_grad_root(xgroot);
        {
            let xdata = self.data_of(xroot);
            let wdata = self.data_of(self.storage_root(w));
            let gdata = self.grad_data_of(groot).expect("linear out grad");
            for n in 0..xview.n {
                let dy = &gdata[gview.slab_start(n)..gview.slab_start(n) + classes];
                let xs = xview.slab(xdata, n);
                let dx_slab_start = xview.slab_start(n);
                head::linear_backward_one(
                    xs,
                    wdata,
                    dy,
                    &mut dw,
                    &mut db,
                    &mut dx[dx_slab_start..dx_slab_start + xview.slab_len()],
                );
            }
        }
        self.put_back_grad_root(wroot, dw, wkind);
        self.put_back_grad_root(broot, db, bkind);
        self.put_back_grad_root(xgroot, dx, xkind);
        Ok(())
    }

    fn bw_add(&mut self, id: usize) -> Result<()> {
        let (groot, gview) = self.out_grad_view(id);
        for k in 0..2 {
            let inp = self.nodes[id].inputs[k].0;
            let iroot = self.ensure_grad(inp);
            let (_, iview) = self.resolve(inp);
            let (mut gi, kind) = self.take_grad_root(iroot);
            {
                let gdata = self.grad_data_of(groot).expect("add out grad");
                for_view_slabs_mut(&mut gi, &iview, |n, slab| {
                    let gs = gview.slab(gdata, n);
                    for (o, g) in slab.iter_mut().zip(gs) {
                        *o += *g;
                    }
                });
            }
            self.put_back_grad_root(iroot, gi, kind);
        }
        Ok(())
    }

    fn bw_dropout(&mut self, id: usize, rate: f64) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        let mask = match &self.aux[id] {
            Aux::Mask(m) => Some(m.clone()),
            _ => None,
        };
        match self.nodes[id].place {
            Place::SharesInput => {
                // Shared grad storage: transform in place.
                if let Some(mask) = mask {
                    let (groot, gview) = self.out_grad_view(id);
                    let slab = gview.slab_len();
                    let (mut g, kind) = self.take_grad_root(groot);
                    for_view_slabs_mut(&mut g, &gview, |n, s| {
                        misc::dropout_backward_inplace(s, &mask[n * slab..(n + 1) * slab], rate);
                    });
                    self.put_back_grad_root(groot, g, kind);
                }
                Ok(())
            }
            _ => {
                let (groot, gview) = self.out_grad_view(id);
                let xroot = self.ensure_grad(x);
                let (_, xview) = self.resolve(x);
                let slab = gview.slab_len();
                let scale = E::from_f64(1.0 / (1.0 - rate));
                let (mut gx, kind) = self.take_grad_root(xroot);
                {
                    let gdata = self.grad_data_of(groot).expect("dropout out grad");
                    for_view_slabs_mut(&mut gx, &xview, |n, s| {
                        let gs = gview.slab(gdata, n);
                        match &mask {
                            Some(m) => {
                                let ms = &m[n * slab..(n + 1) * slab];
                                for ((o, g), mk) in s.iter_mut().zip(gs).zip(ms) {
                                    if *mk != 0 {
                                        *o += *g * scale;
                                    }
                                }
                            }
                            None => {
                                for (o, g) in s.iter_mut().zip(gs) {
                                    *o += *g;
                                }
                            }
                        }
                    });
                }
                self.put_back_grad_root(xroot, gx, kind);
                Ok(())
            }
        }
    }

    fn bw_global_avg_pool(&mut self, id: usize) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        let (groot, gview) = self.out_grad_view(id);
        let xroot = self.ensure_grad(x);
        let (_, xview) = self.resolve(x);
        let (mut gx, kind) = self.take_grad_root(xroot);
        {
            let gdata = self.grad_data_of(groot).expect("gap out grad");
            for_view_slabs_mut(&mut gx, &xview, |n, slab| {
                let gs = gview.slab(gdata, n);
                pool::global_avg_backward_one(gs, xview.c, xview.hw(), slab);
            });
        }
        self.put_back_grad_root(xroot, gx, kind);
        Ok(())
    }

    fn bw_max_pool(&mut self, id: usize) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        let (groot, gview) = self.out_grad_view(id);
        let argmax = match &self.aux[id] {
            Aux::ArgMax(a) => a.clone(),
            _ => unreachable!("argmax saved in forward"),
        };
        let out_slab = gview.slab_len();
        let xroot = self.ensure_grad(x);
        let (_, xview) = self.resolve(x);
        let (mut gx, kind) = self.take_grad_root(xroot);
        {
            let gdata = self.grad_data_of(groot).expect("max pool out grad");
            for_view_slabs_mut(&mut gx, &xview, |n, slab| {
                let gs = gview.slab(gdata, n);
                pool::max_backward_one(gs, &argmax[n * out_slab..(n + 1) * out_slab], slab);
            });
        }
        self.put_back_grad_root(xroot, gx, kind);
        Ok(())
    }

    fn bw_avg_pool2(&mut self, id: usize) -> Result<()> {
        let x = self.nodes[id].inputs[0].0;
        let (groot, gview) = self.out_grad_view(id);
        let xroot = self.ensure_grad(x);
        let (_, xview) = self.resolve(x);
        let (mut gx, kind) = self.take_grad_root(xroot);
        {
            let gdata = self.grad_data_of(groot).expect("avg pool out grad");
            for_view_slabs_mut(&mut gx, &xview, |n, slab| {
                let gs = gview.slab(gdata, n);
                pool::avg2_backward_one(gs, xview.c, xview.h, xview.w, slab);
            });
        }
        self.put_back_grad_root(xroot, gx, kind);
        Ok(())
    }

    fn bw_concat(&mut self, id: usize) -> Result<()> {
        match self.nodes[id].place {
            Place::Buffer { write: false, .. } => Ok(()), // consumers wrote straight into the regions
            _ => {
                let (groot, gview) = self.out_grad_view(id);
                let inputs = self.nodes[id].inputs.clone();
                let mut at = 0usize;
                for src in inputs {
                    let (_, sview) = self.resolve(src.0);
                    let sroot = self.ensure_grad(src.0);
                    let (mut gs, kind) = self.take_grad_root(sroot);
                    {
                        let gdata = self.grad_data_of(groot).expect("concat out grad");
                        let hw = gview.hw();
                        let offset = at * hw;
                        for_view_slabs_mut(&mut gs, &sview, |n, slab| {
                            let full = gview.slab(gdata, n);
                            let len = slab.len();
                            for (o, g) in slab.iter_mut().zip(&full[offset..offset + len]) {
                                *o += *g;
                            }
                        });
                    }
                    self.put_back_grad_root(sroot, gs, kind);
                    at += sview.c;
                }
                Ok(())
            }
        }
    }

    fn bw_relu(&mut self, id: usize) -> Result<()> {
        // Needs its own output value for the mask.
        self.materialize(id)?;
        let x = self.nodes[id].inputs[0].0;
        match self.nodes[id].place {
            Place::SharesInput => {
                let (vroot, vview) = self.resolve(id);
                let (groot, gview) = self.out_grad_view(id);
                debug_assert_eq!(vroot, groot);
                let vdata_owned: Vec<E> = self.data_of(vroot).to_vec();
                let (mut g, kind) = self.take_grad_root(groot);
                for_view_slabs_mut(&mut g, &gview, |n, slab| {
                    let out = vview.slab(&vdata_owned, n);
                    misc::relu_backward_inplace(slab, out);
                });
                self.put_back_grad_root(groot, g, kind);
                Ok(())
            }
            _ => {
                let (vroot, vview) = self.resolve(id);
                let (groot, gview) = self.out_grad_view(id);
                let xroot = self.ensure_grad(x);
                let (_, xview) = self.resolve(x);
                let (mut gx, kind) = self.take_grad_root(xroot);
                {
                    let vdata = self.data_of(vroot);
                    let gdata = self.grad_data_of(groot).expect("relu out grad");
                    for_view_slabs_mut(&mut gx, &xview, |n, slab| {
                        let out = vview.slab(vdata, n);
                        let gs = gview.slab(gdata, n);
                        for ((o, v), g) in slab.iter_mut().zip(out).zip(gs) {
                            if *v > E::zero() {
                                *o += *g;
                            }
                        }
                    });
                }
                self.put_back_grad_root(xroot, gx, kind);
                Ok(())
            }
        }
    }

    fn bw_bn(&mut self, id: usize) -> Result<()> {
        let [x, gamma, beta] = [
            self.nodes[id].inputs[0].0,
            self.nodes[id].inputs[1].0,
            self.nodes[id].inputs[2].0,
        ];
        self.materialize(x)?;
        let (xroot, xview) = self.resolve(x);
        let (groot, gview) = self.out_grad_view(id);
        debug_assert!(gview.is_contiguous());
        let (mean, inv_std) = match &self.aux[id] {
            Aux::Bn { mean, inv_std } => (mean.clone(), inv_std.clone()),
            _ => unreachable!("bn aux saved in forward"),
        };
        let train = matches!(self.mode(), Mode::Train);

        let gammaroot = self.ensure_grad(gamma);
        let betaroot = self.ensure_grad(beta);
        let (mut dgamma, gk) = self.take_grad_root(gammaroot);
        let (mut dbeta, bk) = self.take_grad_root(betaroot);

        // dx lands either directly in the input's contiguous grad vec or in a
        // scratch that is scattered into a strided grad region afterwards.
        let xgroot = self.ensure_grad(x);
        let (_, xgview) = self.resolve(x);
        let direct = xgview.is_contiguous();
        let mut scratch = if direct { Vec::new() } else { vec![E::zero(); xview.shape().numel()] };
        let (mut dx_storage, xk) = self.take_grad_root(xgroot);
        {
            let xdata = self.data_of(xroot);
            let gdata = self.grad_data_of(groot).expect("bn out grad");
            let lim = gview.n * gview.slab_len();
            let gslice = &gdata[..lim];
            let gval = self.data_of(self.storage_root(gamma));
            let dx: &mut [E] = if direct {
                let lim = xgview.n * xgview.slab_len();
                &mut dx_storage[..lim]
            } else {
                &mut scratch
            };
            if train {
                norm::backward_train(
                    xdata, &xview, gslice, &mean, &inv_std, gval, &mut dgamma, &mut dbeta, dx,
                );
            } else {
                norm::backward_eval(
                    xdata, &xview, gslice, &mean, &inv_std, gval, &mut dgamma, &mut dbeta, dx,
                );
            }
        }
        if !direct {
            let slab = xgview.slab_len();
            for_view_slabs_mut(&mut dx_storage, &xgview, |n, s| {
                for (o, g) in s.iter_mut().zip(&scratch[n * slab..(n + 1) * slab]) {
                    *o += *g;
                }
            });
        }
        self.put_back_grad_root(xgroot, dx_storage, xk);
        self.put_back_grad_root(gammaroot, dgamma, gk);
        self.put_back_grad_root(betaroot, dbeta, bk);
        Ok(())
    }

    fn bw_conv(&mut self, id: usize) -> Result<()> {
        let g = self.conv_geom(id);
        let x = self.nodes[id].inputs[0].0;
        let w = self.nodes[id].inputs[1].0;
        self.materialize(x)?;
        let (xroot, xview) = self.resolve(x);
        let (groot, gview) = self.out_grad_view(id);
        let wdata_root = self.storage_root(w);

        // dW: sequential over the batch for a fixed accumulation order.
        let wgroot = self.ensure_grad(w);
        let (mut dw, wk) = self.take_grad_root(wgroot);
        {
            let xdata = self.data_of(xroot);
            let gdata = self.grad_data_of(groot).expect("conv out grad");
            for n in 0..xview.n {
                conv::backward_weight_one(xview.slab(xdata, n), gview.slab(gdata, n), &g, &mut dw);
            }
        }
        self.put_back_grad_root(wgroot, dw, wk);

        // dX: parallel over the batch. The grad of x and the grad of the
        // output may live in the same block gradient buffer.
        let xgroot = self.ensure_grad(x);
        let (_, xgview) = self.resolve(x);
        let same = match (self.grad_place_buf(xgroot), self.grad_place_buf(groot)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        };
        if same {
            let hw = xgview.hw();
            debug_assert!(xgview.c_off + xgview.c <= gview.c_off);
            let split = gview.c_off * hw;
            let weight = self.data_of(wdata_root).to_vec();
            let buf = self.grad_place_buf(xgroot).unwrap();
            let mut storage = self.take_grad_buf(buf);
            let chunk = xgview.c_total * hw;
            let out_slab = gview.slab_len();
            for_each_chunk_mut(&mut storage, chunk, |_n, slabs| {
                let (lo, hi) = slabs.split_at_mut(split);
                let dx = &mut lo[xgview.c_off * hw..xgview.c_off * hw + xgview.slab_len()];
                conv::backward_input_one(&hi[..out_slab], &weight, &g, dx);
            });
            self.grad_bufs[buf.0] = Some(storage);
        } else {
            let (mut dx, xk) = self.take_grad_root(xgroot);
            {
                let weight = self.data_of(wdata_root);
                let gdata = self.grad_data_of(groot).expect("conv out grad");
                for_view_slabs_mut(&mut dx, &xgview, |n, slab| {
                    conv::backward_input_one(gview.slab(gdata, n), weight, &g, slab);
                });
            }
            self.put_back_grad_root(xgroot, dx, xk);
        }
        Ok(())
    }

    fn grad_place_buf(&self, root: usize) -> Option<BufId> {
        match self.nodes[root].place {
            Place::Buffer { buf, .. } => Some(buf),
            _ => None,
        }
    }

    fn take_grad_root(&mut self, root: usize) -> (Vec<E>, OutKind) {
        match self.nodes[root].place {
            Place::Fresh => (
                self.grad_vals[root].take().expect("grad storage allocated by ensure_grad"),
                OutKind::Fresh,
            ),
            Place::Buffer { buf, .. } => (self.take_grad_buf(buf), OutKind::Buf(buf)),
            Place::SharesInput => unreachable!(),
        }
    }

    fn put_back_grad_root(&mut self, root: usize, storage: Vec<E>, kind: OutKind) {
        match kind {
            OutKind::Fresh => self.grad_vals[root] = Some(storage),
            OutKind::Buf(b) => self.grad_bufs[b.0] = Some(storage),
        }
    }
}
