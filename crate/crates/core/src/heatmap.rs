//! Feature-reuse analysis: mean absolute first-convolution weight per
//! (source, target) pair, normalized by the source's channel count.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::exec::Network;
use crate::graph::Connectivity;

#[derive(Clone, Debug)]
pub struct HeatTarget {
    /// "layer1".."layerM", then "transition" (or "classifier" on the last block).
    pub name: String,
    /// Mean |w| per source 0..=s_max, where 0 is the block input; None for
    /// sources the target cannot see (later layers).
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct BlockHeatmap {
    pub block: usize,
    pub layers: usize,
    pub targets: Vec<HeatTarget>,
}

#[derive(Clone, Debug)]
pub struct HeatmapReport {
    pub blocks: Vec<BlockHeatmap>,
}

impl HeatmapReport {
    pub const CSV_HEADER: &'static str = "block,target_layer,source_layer,value";

    pub fn csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for b in &self.blocks {
            for t in &b.targets {
                for (s, v) in t.values.iter().enumerate() {
                    if let Some(v) = v {
                        out.push_str(&format!("{},{},{},{:.9e}\n", b.block + 1, t.name, s, v));
                    }
                }
            }
        }
        out
    }
}

fn slice_mean_abs<E: Element>(
    weights: &[E],
    cout: usize,
    cin: usize,
    khkw: usize,
    c_off: usize,
    c_len: usize,
) -> f64 {
    let mut sum = 0.0;
    for co in 0..cout {
        for ci in c_off..c_off + c_len {
            for p in 0..khkw {
                sum += weights[(co * cin + ci) * khkw + p].as_f64().abs();
            }
        }
    }
    sum / (cout * c_len * khkw) as f64
}

/// Per-block matrices of mean absolute first-conv weights, one column per
/// target layer plus the following transition (or the classifier after the
/// last block). Dense connectivity only: the per-source channel ranges of a
/// concatenated input are positional.
#[allow(clippy::needless_range_loop)] // source index drives the offset math
pub fn feature_reuse_heatmap<E: Element>(net: &Network<E>) -> Result<HeatmapReport> {
    if !matches!(net.graph.spec.connectivity, Connectivity::Dense) {
        return Err(Error::config(
            "feature-reuse heatmap supports dense connectivity only",
        ));
    }
    let lookup = |name: &str| -> Result<(&[E], crate::tensor::Shape)> {
        for (n, id) in &net.params {
            if n == name {
                return Ok((net.tape.param_data(*id), net.tape.shape(*id)));
            }
        }
        Err(Error::usage(format!("no parameter named {name}")))
    };

    let mut blocks = Vec::new();
    for (b, block) in net.graph.blocks.iter().enumerate() {
        let m = block.layers.len();
        let k0 = block.in_channels;
        let k = block.growth;
        let src_channels = |s: usize| if s == 0 { k0 } else { k };
        let src_offset = |s: usize| if s == 0 { 0 } else { k0 + (s - 1) * k };

        let mut targets = Vec::new();
        for l in 1..=m {
            // The first conv of the composite reads the concatenation.
            let conv_name = if net.graph.spec.bottleneck_mult > 0 {
                format!("block{}.layer{}.conv1", b + 1, l)
            } else {
                format!("block{}.layer{}.conv2", b + 1, l)
            };
            let (wdata, wshape) = lookup(&conv_name)?;
            let cin = wshape.c;
            let khkw = wshape.h * wshape.w;
            let mut values = vec![None; m + 1];
            for s in 0..l {
                values[s] = Some(slice_mean_abs(
                    wdata,
                    wshape.n,
                    cin,
                    khkw,
                    src_offset(s),
                    src_channels(s),
                ));
            }
            targets.push(HeatTarget { name: format!("layer{l}"), values });
        }

        // Transition column (or the classifier after the final block): these
        // read the full block concatenation, so every source is visible.
        let is_last = b + 1 == net.graph.blocks.len();
        let (name, wname) = if is_last {
            ("classifier".to_string(), "head.fc.weight".to_string())
        } else {
            ("transition".to_string(), format!("transition{}.conv", b + 1))
        };
        let (wdata, wshape) = lookup(&wname)?;
        let cin = wshape.c;
        let khkw = wshape.h * wshape.w;
        let mut values = vec![None; m + 1];
        for s in 0..=m {
            values[s] = Some(slice_mean_abs(
                wdata,
                wshape.n,
                cin,
                khkw,
                src_offset(s),
                src_channels(s),
            ));
        }
        targets.push(HeatTarget { name, values });

        blocks.push(BlockHeatmap { block: b, layers: m, targets });
    }
    Ok(HeatmapReport { blocks })
}
