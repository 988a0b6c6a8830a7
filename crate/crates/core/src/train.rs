//! Desk-scale training: He initialization, SGD with Nesterov momentum and
//! weight decay, the step learning-rate schedule, the training loop, and
//! versioned checkpoints.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{augment_sample, Dataset};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::exec::{lower, Network, Strategy};
use crate::graph::LayerGraph;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the epoch budget where the rate is divided by `lr_factor`.
    pub milestones: Vec<f64>,
    pub lr_factor: f64,
    /// Dropout applied to the network spec when augmentation is off.
    pub dropout: f64,
    pub augment: bool,
    pub pad: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![0.5, 0.75],
            lr_factor: 0.1,
            dropout: 0.2,
            augment: false,
            pad: 4,
            seed: 0,
        }
    }
}

/// Piecewise-constant schedule: divide by `lr_factor` at each milestone
/// fraction of the epoch budget.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.lr0;
    for frac in &cfg.milestones {
        if epoch >= (frac * cfg.epochs as f64).floor() as usize {
            lr *= cfg.lr_factor;
        }
    }
    lr
}

/// Fan-based normal initialization: conv weights ~ N(0, sqrt(2 / (Cout*kh*kw))),
/// BN scale 1 / shift 0, classifier weight ~ N(0, sqrt(2 / fan_in)), zero bias.
pub fn init_weights<E: Element>(net: &mut Network<E>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<(String, crate::tape::NodeId)> = net.params.clone();
    for (name, id) in ids {
        let shape = net.tape.shape(id);
        let data = net.tape.param_data_mut(id);
        if name.ends_with(".gamma") {
            data.fill(E::one());
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            data.fill(E::zero());
        } else if name.ends_with("fc.weight") {
            let std = (2.0 / shape.c as f64).sqrt();
            for v in data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = E::from_f64(z * std);
            }
        } else {
            // Convolution kernels, fan-out over (Cout, kh, kw).
            let fan = (shape.n * shape.h * shape.w) as f64;
            let std = (2.0 / fan).sqrt();
            for v in data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = E::from_f64(z * std);
            }
        }
    }
}

/// Per-parameter velocity for Nesterov momentum.
pub struct SgdState<E: Element> {
    velocity: Vec<Vec<E>>,
}

impl<E: Element> SgdState<E> {
    pub fn for_network(net: &Network<E>) -> Self {
        SgdState {
            velocity: net
                .params
                .iter()
                .map(|(_, id)| vec![E::zero(); net.tape.shape(*id).numel()])
                .collect(),
        }
    }
}

/// One Nesterov step without dampening over a single tensor:
/// v <- momentum*v + (g + wd*p); p <- p - lr*(g + wd*p + momentum*v)
pub fn sgd_nesterov_step<E: Element>(
    param: &mut [E],
    grad: &[E],
    velocity: &mut [E],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::config(format!(
            "sgd shape mismatch: param {}, grad {}, velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let lr = E::from_f64(lr);
    let mom = E::from_f64(momentum);
    let wd = E::from_f64(weight_decay);
    for i in 0..param.len() {
        let g = grad[i] + wd * param[i];
        velocity[i] = mom * velocity[i] + g;
        param[i] -= lr * (g + mom * velocity[i]);
    }
    Ok(())
}

fn apply_sgd<E: Element>(
    net: &mut Network<E>,
    state: &mut SgdState<E>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (i, (_, id)) in net.params.clone().iter().enumerate() {
        let grad = net.tape.grad(*id).ok_or_else(|| Error::usage("missing gradient"))?;
        sgd_nesterov_step(
            net.tape.param_data_mut(*id),
            &grad.data,
            &mut state.velocity[i],
            lr,
            momentum,
            weight_decay,
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub eval_err: f64,
    pub wall_ms: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,lr,train_loss,train_err,eval_err,wall_ms";

pub fn metrics_csv_row(m: &EpochMetrics) -> String {
    format!(
        "{},{:.6e},{:.6e},{:.6},{:.6},{:.3}",
        m.epoch, m.lr, m.train_loss, m.train_err, m.eval_err, m.wall_ms
    )
}

pub struct TrainOutcome<E: Element> {
    pub network: Network<E>,
    pub metrics: Vec<EpochMetrics>,
}

fn gather_batch<E: Element>(
    set: &Dataset<E>,
    idx: &[usize],
    augment: Option<(usize, &mut ChaCha8Rng)>,
) -> (Tensor<E>, Vec<usize>) {
    let s = set.images.shape;
    let slab = s.c * s.hw();
    let mut data = Vec::with_capacity(idx.len() * slab);
    let mut labels = Vec::with_capacity(idx.len());
    match augment {
        Some((pad, rng)) => {
            for &i in idx {
                data.extend(augment_sample(set.sample(i), s.c, s.h, s.w, pad, rng));
                labels.push(set.labels[i]);
            }
        }
        None => {
            for &i in idx {
                data.extend_from_slice(set.sample(i));
                labels.push(set.labels[i]);
            }
        }
    }
    (
        Tensor::from_vec(Shape::new(idx.len(), s.c, s.h, s.w), data).unwrap(),
        labels,
    )
}

fn error_rate<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> (usize, usize) {
    let classes = logits.shape.c;
    let mut wrong = 0;
    for (i, want) in labels.iter().enumerate() {
        let row = &logits.data[i * classes..(i + 1) * classes];
        let mut best = 0;
        for k in 1..classes {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best != *want {
            wrong += 1;
        }
    }
    (wrong, labels.len())
}

/// Eval-mode error over a whole set, batching with tail padding (the padded
/// duplicates' logits are ignored; eval mode has no cross-sample coupling).
pub fn evaluate<E: Element>(net: &mut Network<E>, set: &Dataset<E>) -> Result<f64> {
    let bs = net.batch;
    let mut wrong = 0usize;
    let mut total = 0usize;
    let mut at = 0;
    while at < set.len() {
        let end = (at + bs).min(set.len());
        let mut idx: Vec<usize> = (at..end).collect();
        let real = idx.len();
        while idx.len() < bs {
            idx.push(at); // pad; ignored below
        }
        let (images, labels) = gather_batch(set, &idx, None);
        let logits = net.forward_eval(&images)?;
        let (w, _) = error_rate(&logits, &labels[..real]);
        wrong += w;
        total += real;
        at = end;
    }
    Ok(wrong as f64 / total.max(1) as f64)
}

/// Train a lowered network on a dataset. Deterministic for a fixed seed:
/// shuffling, augmentation, dropout, and initialization all derive from it.
pub fn train<E: Element>(
    graph: &LayerGraph,
    train_set: &Dataset<E>,
    eval_set: &Dataset<E>,
    cfg: &TrainConfig,
    strategy: Strategy,
    input_hw: (usize, usize),
) -> Result<TrainOutcome<E>> {
    if train_set.len() < cfg.batch {
        return Err(Error::config(format!(
            "training set of {} samples is smaller than one batch of {}",
            train_set.len(),
            cfg.batch
        )));
    }
    let mut net: Network<E> = lower(graph, strategy, cfg.batch, input_hw, cfg.seed)?;
    init_weights(&mut net, cfg.seed);
    let mut sgd = SgdState::for_network(&net);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA06 ^ (epoch as u64));

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        let mut wrong = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < cfg.batch {
                break; // drop the remainder batch; eval covers every sample
            }
            let (images, labels) = gather_batch(
                train_set,
                chunk,
                cfg.augment.then_some((cfg.pad, &mut aug_rng)),
            );
            let loss = net.forward_train(&images, &labels)?.as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("loss became {loss} at batch {batches}"),
                });
            }
            let logits = net.tape.value(net.logits_id);
            let (w, t) = error_rate(&logits, &labels);
            wrong += w;
            seen += t;
            net.backward()?;
            apply_sgd(&mut net, &mut sgd, lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += loss;
            batches += 1;
        }

        let eval_err = evaluate(&mut net, eval_set)?;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            train_err: wrong as f64 / seen.max(1) as f64,
            eval_err,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome { network: net, metrics })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: [u8; 4] = *b"DKCP";
const CKPT_VERSION: u32 = 1;

/// FNV-1a over the canonical JSON encoding of the spec.
pub fn spec_hash(spec: &crate::graph::NetworkSpec) -> u64 {
    let s = serde_json::to_string(spec).expect("spec serializes");
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Everything needed to restore a trained network into a fresh lowering:
/// named parameters plus running statistics, in graph order.
pub struct NetState<E: Element> {
    pub spec_hash: u64,
    pub params: Vec<(String, Vec<E>)>,
    pub bn: Vec<(String, Vec<E>, Vec<E>)>,
}

pub fn export_state<E: Element>(net: &Network<E>) -> NetState<E> {
    NetState {
        spec_hash: spec_hash(&net.graph.spec),
        params: net
            .params
            .iter()
            .map(|(name, id)| (name.clone(), net.tape.param_data(*id).to_vec()))
            .collect(),
        bn: net
            .bn_sites
            .iter()
            .map(|(name, sid)| {
                let st = net.tape.bn_state(*sid);
                (name.clone(), st.running_mean.clone(), st.running_var.clone())
            })
            .collect(),
    }
}

pub fn import_state<E: Element>(net: &mut Network<E>, state: &NetState<E>) -> Result<()> {
    if state.spec_hash != spec_hash(&net.graph.spec) {
        return Err(Error::data("checkpoint was written for a different network spec"));
    }
    if state.params.len() != net.params.len() || state.bn.len() != net.bn_sites.len() {
        return Err(Error::data("checkpoint parameter layout mismatch"));
    }
    for ((name, id), (sname, data)) in net.params.clone().iter().zip(&state.params) {
        if name != sname || net.tape.param_data(*id).len() != data.len() {
            return Err(Error::data(format!("checkpoint mismatch at {sname}")));
        }
        net.tape.param_data_mut(*id).copy_from_slice(data);
    }
    for ((_, sid), (_, mean, var)) in net.bn_sites.clone().iter().zip(&state.bn) {
        let st = net.tape.bn_state_mut(*sid);
        if st.running_mean.len() != mean.len() {
            return Err(Error::data("checkpoint running-stat length mismatch"));
        }
        st.running_mean.copy_from_slice(mean);
        st.running_var.copy_from_slice(var);
    }
    Ok(())
}

fn push_named<E: Element>(out: &mut Vec<u8>, name: &str, data: &[E]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        v.write_le(out);
    }
}

/// Versioned little-endian binary: header (magic, version, spec hash, element
/// width), then named parameter tensors in graph order, then running stats.
pub fn save_checkpoint<E: Element>(net: &Network<E>, path: &Path) -> Result<()> {
    let state = export_state(net);
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.spec_hash.to_le_bytes());
    out.extend_from_slice(&(E::BYTES as u32).to_le_bytes());
    out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    out.extend_from_slice(&(state.bn.len() as u32).to_le_bytes());
    for (name, data) in &state.params {
        push_named(&mut out, name, data);
    }
    for (name, mean, var) in &state.bn {
        push_named(&mut out, name, mean);
        push_named(&mut out, name, var);
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::data("checkpoint truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    fn named<E: Element>(&mut self) -> Result<(String, Vec<E>)> {
        let nlen = self.u32()? as usize;
        let name = String::from_utf8(self.take(nlen)?.to_vec())
            .map_err(|_| Error::data("checkpoint name is not utf-8"))?;
        let dlen = self.u64()? as usize;
        let mut data = Vec::with_capacity(dlen);
        for _ in 0..dlen {
            data.push(E::read_le(self.take(E::BYTES)?));
        }
        Ok((name, data))
    }
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<NetState<E>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader { bytes: &bytes, at: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::data(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let hash = r.u64()?;
    let width = r.u32()? as usize;
    if width != E::BYTES {
        return Err(Error::data(format!(
            "checkpoint stores {width}-byte elements, expected {}",
            E::BYTES
        )));
    }
    let nparams = r.u32()? as usize;
    let nbn = r.u32()? as usize;
    let mut params = Vec::with_capacity(nparams);
    for _ in 0..nparams {
        params.push(r.named::<E>()?);
    }
    let mut bn = Vec::with_capacity(nbn);
    for _ in 0..nbn {
        let (name, mean) = r.named::<E>()?;
        let (_, var) = r.named::<E>()?;
        bn.push((name, mean, var));
    }
    Ok(NetState { spec_hash: hash, params, bn })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, ..TrainConfig::default() }
    }

    #[test]
    fn lr_schedule_milestones() {
        let c = cfg(300);
        assert_eq!(lr_at(0, &c), 0.1);
        assert_eq!(lr_at(149, &c), 0.1);
        assert!((lr_at(150, &c) - 0.01).abs() < 1e-12);
        assert!((lr_at(224, &c) - 0.01).abs() < 1e-12);
        assert!((lr_at(225, &c) - 0.001).abs() < 1e-12);

        let c40 = cfg(40);
        assert_eq!(lr_at(19, &c40), 0.1);
        assert!((lr_at(20, &c40) - 0.01).abs() < 1e-12);
        assert!((lr_at(30, &c40) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn nesterov_hand_step() {
        // f(p) = p^2/2, p0 = 1, lr = 0.1, momentum = 0.9: p1 = 0.81.
        let mut p = vec![1.0f64];
        let mut v = vec![0.0f64];
        sgd_nesterov_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.81).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn plain_sgd_reduction() {
        let mut p = vec![2.0f64];
        let mut v = vec![0.0f64];
        sgd_nesterov_step(&mut p, &[0.5], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0] - 1.95).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = vec![1.0f64];
        let mut v = vec![0.0f64];
        for _ in 0..200 {
            let g = p[0]; // grad of p^2/2
            sgd_nesterov_step(&mut p, &[g], &mut v, 0.1, 0.9, 0.0).unwrap();
        }
        assert!(p[0].abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut p = vec![1.0f64; 3];
        let mut v = vec![0.0f64; 3];
        assert!(sgd_nesterov_step(&mut p, &[1.0; 2], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn conv_init_std_is_on_target() {
        // A large 3x3 conv parameter set: empirical std within 5% of
        // sqrt(2 / (Cout*kh*kw)) over >= 1e5 samples.
        use crate::graph::{build, NetworkSpec};
        let spec = NetworkSpec::cifar(2, 24, 0.5, 4, 10);
        let graph = build(&spec).unwrap();
        let mut net: Network<f64> =
            lower(&graph, Strategy::Reference, 1, (16, 16), 0).unwrap();
        init_weights(&mut net, 11);
        let mut samples = Vec::new();
        let mut target = None;
        for (name, id) in net.params.clone() {
            if name.ends_with(".conv2") {
                let s = net.tape.shape(id);
                let want = (2.0 / (s.n * s.h * s.w) as f64).sqrt();
                if target.is_none() {
                    target = Some(want);
                }
                if (want - target.unwrap()).abs() < 1e-12 {
                    samples.extend_from_slice(net.tape.param_data(id));
                }
            }
        }
        // conv2 kernels share Cout=k=24 and 3x3 extent, so one target applies.
        assert!(samples.len() >= 100_000, "{}", samples.len());
        let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
        let var: f64 =
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        let std = var.sqrt();
        let want = target.unwrap();
        assert!((std - want).abs() / want < 0.05, "std {std} vs {want}");
    }

    #[test]
    fn init_is_seed_deterministic_and_bn_is_identity() {
        use crate::graph::{build, NetworkSpec};
        let graph = build(&NetworkSpec::cifar(2, 8, 0.5, 4, 10)).unwrap();
        let snap = |seed: u64| -> Vec<(String, Vec<f64>)> {
            let mut net: Network<f64> =
                lower(&graph, Strategy::Reference, 1, (16, 16), 0).unwrap();
            init_weights(&mut net, seed);
            net.params
                .iter()
                .map(|(n, id)| (n.clone(), net.tape.param_data(*id).to_vec()))
                .collect()
        };
        let a = snap(3);
        let b = snap(3);
        for ((n1, d1), (_, d2)) in a.iter().zip(&b) {
            assert!(d1.iter().zip(d2).all(|(x, y)| x.to_bits() == y.to_bits()), "{n1}");
        }
        for (name, data) in &a {
            if name.ends_with(".gamma") {
                assert!(data.iter().all(|v| *v == 1.0));
            }
            if name.ends_with(".beta") {
                assert!(data.iter().all(|v| *v == 0.0));
            }
        }
        let c = snap(4);
        assert!(a.iter().zip(&c).any(|((_, d1), (_, d2))| d1 != d2));
    }
}
