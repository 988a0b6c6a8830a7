//! Declarative network specification and the layer graph built from it.
//!
//! The graph is structural: nodes carry parameter shapes and source lists but
//! no data. Execution storage and parameter values live in the lowering
//! (`crate::exec`), counting in `crate::cost`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Shape;

pub const SPEC_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthSchedule {
    /// The same number of feature maps added by every layer.
    Constant(usize),
    /// Doubles after each transition: block j (0-based) grows by base * 2^j.
    Exponential { base: usize },
}

impl GrowthSchedule {
    pub fn block_rate(&self, block: usize) -> usize {
        match self {
            GrowthSchedule::Constant(k) => *k,
            GrowthSchedule::Exponential { base } => base << block,
        }
    }

    pub fn base(&self) -> usize {
        match self {
            GrowthSchedule::Constant(k) => *k,
            GrowthSchedule::Exponential { base } => *base,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    /// Every layer reads the block input and all previous layer outputs.
    Dense,
    /// Like dense, but connections cross block boundaries through
    /// parameter-free pooling; transitions carry no convolution.
    FullDense,
    /// Each layer reads only the most recent `span` features.
    LastSpan(usize),
    /// Each layer reads features at an odd distance, plus its predecessor.
    Parity,
    /// Each layer reads features at distances 1, 2, 4, 8, ...
    PowerOfTwo,
    /// x + H(x) chain at constant width; the comparison baseline.
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPlacement {
    /// BN-ReLU-Conv composites.
    Pre,
    /// Conv-BN-ReLU composites.
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// 3x3 convolution with 2k filters, stride 1.
    Cifar,
    /// 7x7 stride-2 convolution with 2k filters (Conv-BN-ReLU order),
    /// then 3x3 max pool stride 2.
    ImageNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub spec_version: u32,
    /// Basic layers per block.
    pub blocks: Vec<usize>,
    pub growth: GrowthSchedule,
    /// Width of the 1x1 bottleneck as a multiple of the growth rate; 0 disables it.
    pub bottleneck_mult: usize,
    /// Fraction of channels kept by each transition, in (0, 1].
    pub compression: f64,
    pub connectivity: Connectivity,
    pub bn_placement: BnPlacement,
    pub stem: StemKind,
    pub classes: usize,
    pub dropout: f64,
    pub image_channels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl NetworkSpec {
    pub fn cifar(layers_per_block: usize, k: usize, theta: f64, mult: usize, classes: usize) -> Self {
        NetworkSpec {
            spec_version: SPEC_VERSION,
            blocks: vec![layers_per_block; 3],
            growth: GrowthSchedule::Constant(k),
            bottleneck_mult: mult,
            compression: theta,
            connectivity: Connectivity::Dense,
            bn_placement: BnPlacement::Pre,
            stem: StemKind::Cifar,
            classes,
            dropout: 0.0,
            image_channels: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// The four deep presets: 121, 169, 201, 265.
    pub fn imagenet(preset: u32) -> Result<Self> {
        let blocks = match preset {
            121 => vec![6, 12, 24, 16],
            169 => vec![6, 12, 32, 32],
            201 => vec![6, 12, 48, 32],
            265 => vec![6, 12, 64, 48],
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other}; expected one of 121, 169, 201, 265"
                )))
            }
        };
        Ok(Self::imagenet_custom(blocks, 32))
    }

    pub fn imagenet_custom(blocks: Vec<usize>, k: usize) -> Self {
        NetworkSpec {
            spec_version: SPEC_VERSION,
            blocks,
            growth: GrowthSchedule::Constant(k),
            bottleneck_mult: 4,
            compression: 0.5,
            connectivity: Connectivity::Dense,
            bn_placement: BnPlacement::Pre,
            stem: StemKind::ImageNet,
            classes: 1000,
            dropout: 0.0,
            image_channels: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("blocks must be non-empty"));
        }
        if self.blocks.contains(&0) {
            return Err(Error::config("every block needs at least one layer"));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::config(format!(
                "compression must be in (0, 1], got {}",
                self.compression
            )));
        }
        if self.growth.base() == 0 {
            return Err(Error::config("growth rate must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.image_channels == 0 {
            return Err(Error::config("image_channels must be positive"));
        }
        if self.bn_eps <= 0.0 {
            return Err(Error::config("bn_eps must be positive"));
        }
        if !(0.0 < self.bn_momentum && self.bn_momentum < 1.0) {
            return Err(Error::config("bn_momentum must be in (0, 1)"));
        }
        if let Connectivity::LastSpan(s) = self.connectivity {
            if s == 0 {
                return Err(Error::config("last-span connectivity needs span >= 1"));
            }
        }
        Ok(())
    }

    pub fn stem_channels(&self) -> usize {
        2 * self.growth.block_rate(0)
    }
}

/// k0 + k * (l - 1): input feature maps of layer `l` (1-based) under dense
/// connectivity with block input width k0 and growth rate k.
pub fn input_channels(k0: usize, k: usize, layer: usize) -> usize {
    debug_assert!(layer >= 1);
    k0 + k * (layer - 1)
}

/// Per-block edge set {(source s, target l)}, s < l, where s = 0 is the block
/// input and l in 1..=m are the layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectivityGraph {
    pub m: usize,
    pub edges: Vec<(usize, usize)>,
}

impl ConnectivityGraph {
    pub fn sources_of(&self, layer: usize) -> Vec<usize> {
        self.edges.iter().filter(|(_, l)| *l == layer).map(|(s, _)| *s).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// Enumerate the edges of one block for a connectivity pattern.
pub fn connectivity_edges(pattern: Connectivity, m: usize) -> Result<ConnectivityGraph> {
    if m == 0 {
        return Err(Error::config("connectivity over an empty block"));
    }
    let mut edges = Vec::new();
    for l in 1..=m {
        match pattern {
            Connectivity::Dense | Connectivity::FullDense => {
                for s in 0..l {
                    edges.push((s, l));
                }
            }
            Connectivity::LastSpan(span) => {
                let lo = l.saturating_sub(span);
                for s in lo..l {
                    edges.push((s, l));
                }
            }
            Connectivity::Parity => {
                // Opposite parity, plus the immediate predecessor (which is
                // itself at odd distance, so the union is a plain insert).
                for s in 0..l {
                    if (l - s) % 2 == 1 || s == l - 1 {
                        edges.push((s, l));
                    }
                }
            }
            Connectivity::PowerOfTwo => {
                let mut step = 1usize;
                while step <= l {
                    edges.push((l - step, l));
                    step *= 2;
                }
                edges.sort_unstable();
                edges.dedup();
            }
            Connectivity::Residual => edges.push((l - 1, l)),
        }
    }
    edges.sort_unstable_by_key(|(s, l)| (*l, *s));
    edges.dedup();
    Ok(ConnectivityGraph { m, edges })
}

// ---------------------------------------------------------------------------
// Layer graph
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
}

impl ParamSpec {
    fn conv(name: String, cout: usize, cin: usize, k: usize) -> Self {
        ParamSpec { name, shape: Shape::new(cout, cin, k, k) }
    }

    fn bn_pair(prefix: &str, channels: usize) -> (ParamSpec, ParamSpec) {
        (
            ParamSpec { name: format!("{prefix}.gamma"), shape: Shape::new(1, channels, 1, 1) },
            ParamSpec { name: format!("{prefix}.beta"), shape: Shape::new(1, channels, 1, 1) },
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// A reference to a feature read by a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceRef {
    /// Block the feature comes from.
    pub block: usize,
    /// 0 = that block's input, j = output of its j-th layer.
    pub local: usize,
    pub channels: usize,
    /// 2x2 average pools applied on the way (block boundaries crossed).
    pub pools: usize,
}

#[derive(Clone, Debug)]
pub struct BasicLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub sources: Vec<SourceRef>,
    /// (bn1 over in_channels, 1x1 conv to mult*k) when the bottleneck is on.
    pub bottleneck: Option<(ParamSpec, ParamSpec, ParamSpec)>,
    /// bn2 gamma/beta over the 3x3 conv's input width.
    pub bn: (ParamSpec, ParamSpec),
    pub conv: ParamSpec,
}

impl BasicLayer {
    /// Compose one basic layer. Pre-activation order is
    /// BN-ReLU-Conv(1x1)-BN-ReLU-Conv(3x3) producing k maps; the 1x1 step is
    /// dropped when `mult` is 0. The post-activation variant runs
    /// Conv-BN-ReLU composites, so its normalizations sit on the conv
    /// *outputs* and are sized accordingly.
    pub fn build(
        name: &str,
        in_channels: usize,
        k: usize,
        mult: usize,
        placement: BnPlacement,
    ) -> Self {
        let conv_in = if mult > 0 { mult * k } else { in_channels };
        let bottleneck = (mult > 0).then(|| {
            let bn1_ch = match placement {
                BnPlacement::Pre => in_channels,
                BnPlacement::Post => mult * k,
            };
            let (g1, b1) = ParamSpec::bn_pair(&format!("{name}.bn1"), bn1_ch);
            let w1 = ParamSpec::conv(format!("{name}.conv1"), mult * k, in_channels, 1);
            (g1, b1, w1)
        });
        let bn2_ch = match placement {
            BnPlacement::Pre => conv_in,
            BnPlacement::Post => k,
        };
        let bn = ParamSpec::bn_pair(&format!("{name}.bn2"), bn2_ch);
        let conv = ParamSpec::conv(format!("{name}.conv2"), k, conv_in, 3);
        BasicLayer { name: name.to_string(), in_channels, out_channels: k, sources: Vec::new(), bottleneck, bn, conv }
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.bn.0.shape.numel() + self.bn.1.shape.numel() + self.conv.shape.numel();
        if let Some((g, b, w)) = &self.bottleneck {
            n += g.shape.numel() + b.shape.numel() + w.shape.numel();
        }
        n
    }

    pub fn weighted_layers(&self) -> usize {
        if self.bottleneck.is_some() {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub name: String,
    pub channels: usize,
    pub bn: (ParamSpec, ParamSpec),
    pub conv: ParamSpec,
}

impl ResidualUnit {
    /// x + H(x) with H = BN-ReLU-Conv(3x3) at constant width.
    pub fn build(name: &str, channels: usize) -> Self {
        let bn = ParamSpec::bn_pair(&format!("{name}.bn"), channels);
        let conv = ParamSpec::conv(format!("{name}.conv"), channels, channels, 3);
        ResidualUnit { name: name.to_string(), channels, bn, conv }
    }
}

#[derive(Clone, Debug)]
pub enum BlockLayer {
    Basic(BasicLayer),
    Residual(ResidualUnit),
}

impl BlockLayer {
    pub fn out_channels(&self) -> usize {
        match self {
            BlockLayer::Basic(b) => b.out_channels,
            BlockLayer::Residual(r) => r.channels,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockNode {
    pub index: usize,
    pub in_channels: usize,
    pub growth: usize,
    pub layers: Vec<BlockLayer>,
    pub edges: ConnectivityGraph,
    /// Channel width handed to the transition / head.
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct TransitionNode {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// None for the parameter-free full-dense variant (pooling only).
    pub params: Option<((ParamSpec, ParamSpec), ParamSpec)>,
}

/// BN + ReLU + 1x1 conv to floor(theta * in) channels + 2x2 average pool.
pub fn build_transition(name: &str, in_channels: usize, theta: f64) -> Result<TransitionNode> {
    let out = (theta * in_channels as f64).floor() as usize;
    if out < 1 {
        return Err(Error::config(format!(
            "transition from {in_channels} channels at compression {theta} would have no outputs"
        )));
    }
    let bn = ParamSpec::bn_pair(&format!("{name}.bn"), in_channels);
    let conv = ParamSpec::conv(format!("{name}.conv"), out, in_channels, 1);
    Ok(TransitionNode {
        name: name.to_string(),
        in_channels,
        out_channels: out,
        params: Some((bn, conv)),
    })
}

#[derive(Clone, Debug)]
pub struct StemNode {
    pub out_channels: usize,
    pub conv: ParamSpec,
    /// Conv-BN-ReLU + 3x3/2 max pool for the 7x7 stem.
    pub bn: Option<(ParamSpec, ParamSpec)>,
    pub kind: StemKind,
}

#[derive(Clone, Debug)]
pub struct HeadNode {
    pub in_channels: usize,
    pub bn: (ParamSpec, ParamSpec),
    pub weight: ParamSpec,
    pub bias: ParamSpec,
}

#[derive(Clone, Debug)]
pub struct LayerGraph {
    pub spec: NetworkSpec,
    pub stem: StemNode,
    pub blocks: Vec<BlockNode>,
    pub transitions: Vec<TransitionNode>,
    pub head: HeadNode,
}

/// Build the layer graph for a validated specification.
pub fn build(spec: &NetworkSpec) -> Result<LayerGraph> {
    spec.validate()?;
    let stem_out = spec.stem_channels();
    let stem = match spec.stem {
        StemKind::Cifar => StemNode {
            out_channels: stem_out,
            conv: ParamSpec::conv("stem.conv".into(), stem_out, spec.image_channels, 3),
            bn: None,
            kind: StemKind::Cifar,
        },
        StemKind::ImageNet => StemNode {
            out_channels: stem_out,
            conv: ParamSpec {
                name: "stem.conv".into(),
                shape: Shape::new(stem_out, spec.image_channels, 7, 7),
            },
            bn: Some(ParamSpec::bn_pair("stem.bn", stem_out)),
            kind: StemKind::ImageNet,
        },
    };

    let full_dense = matches!(spec.connectivity, Connectivity::FullDense);
    let residual = matches!(spec.connectivity, Connectivity::Residual);

    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    // Earlier features for full-dense cross-block links: (block, local, channels).
    let mut past_features: Vec<(usize, usize, usize)> = vec![(0, 0, stem_out)];
    let mut in_ch = stem_out;

    for (b, &m) in spec.blocks.iter().enumerate() {
        let k = spec.growth.block_rate(b);
        let edges = connectivity_edges(spec.connectivity, m)?;
        let mut layers = Vec::new();
        let mut local_channels: Vec<usize> = vec![in_ch]; // s = 0 is the block input

        for l in 1..=m {
            let name = format!("block{}.layer{}", b + 1, l);
            if residual {
                layers.push(BlockLayer::Residual(ResidualUnit::build(&name, in_ch)));
                local_channels.push(in_ch);
                continue;
            }
            let mut sources: Vec<SourceRef> = edges
                .sources_of(l)
                .into_iter()
                .map(|s| SourceRef { block: b, local: s, channels: local_channels[s], pools: 0 })
                .collect();
            if full_dense && b > 0 {
                // All features of earlier blocks, pooled once per boundary.
                let ext: Vec<SourceRef> = past_features
                    .iter()
                    .filter(|(fb, _, _)| *fb < b)
                    .map(|(fb, fl, ch)| SourceRef {
                        block: *fb,
                        local: *fl,
                        channels: *ch,
                        pools: b - fb,
                    })
                    .collect();
                // The block "input" source (s = 0) does not exist separately
                // under full dense connectivity; drop it in favor of the
                // explicit cross-block references.
                sources.retain(|s| s.local != 0 || s.block != b);
                sources.splice(0..0, ext);
            }
            let in_channels: usize = sources.iter().map(|s| s.channels).sum();
            let mut layer = BasicLayer::build(&name, in_channels, k, spec.bottleneck_mult, spec.bn_placement);
            layer.sources = sources;
            layers.push(BlockLayer::Basic(layer));
            local_channels.push(k);
            if full_dense {
                past_features.push((b, l, k));
            }
        }

        let out_channels = if residual {
            in_ch
        } else if full_dense {
            // The next block reads individual features; the nominal output
            // width is everything visible at this resolution.
            past_features.iter().map(|(_, _, c)| *c).sum()
        } else {
            local_channels.iter().sum()
        };
        blocks.push(BlockNode { index: b, in_channels: in_ch, growth: k, layers, edges, out_channels });

        if b + 1 < spec.blocks.len() {
            if full_dense {
                transitions.push(TransitionNode {
                    name: format!("transition{}", b + 1),
                    in_channels: out_channels,
                    out_channels,
                    params: None,
                });
                in_ch = 0; // unused: next block reads past features directly
            } else {
                let t = build_transition(&format!("transition{}", b + 1), out_channels, spec.compression)?;
                in_ch = t.out_channels;
                transitions.push(t);
            }
        } else {
            in_ch = out_channels;
        }
    }

    let head_in = in_ch;
    let head = HeadNode {
        in_channels: head_in,
        bn: ParamSpec::bn_pair("head.bn", head_in),
        weight: ParamSpec {
            name: "head.fc.weight".into(),
            shape: Shape::new(spec.classes, head_in, 1, 1),
        },
        bias: ParamSpec { name: "head.fc.bias".into(), shape: Shape::new(spec.classes, 1, 1, 1) },
    };

    let g = LayerGraph { spec: spec.clone(), stem, blocks, transitions, head };
    g.audit_channels()?;
    Ok(g)
}

/// The 3-block layout: a 3x3 stem with 2k filters, three dense blocks of
/// `layers_per_block` bottlenecked layers, two transitions, and a classifier.
/// Reported depth is 6 * layers_per_block + 4.
pub fn build_cifar(
    layers_per_block: usize,
    k: usize,
    theta: f64,
    mult: usize,
    classes: usize,
) -> Result<LayerGraph> {
    build(&NetworkSpec::cifar(layers_per_block, k, theta, mult, classes))
}

/// One of the deep presets (121, 169, 201, 265) at growth rate 32.
pub fn build_imagenet(preset: u32) -> Result<LayerGraph> {
    build(&NetworkSpec::imagenet(preset)?)
}

impl LayerGraph {
    /// Number of weighted layers: convolutions and the fully-connected
    /// classifier. Normalization layers are not counted.
    pub fn depth(&self) -> usize {
        let mut d = 1; // stem conv
        for block in &self.blocks {
            for layer in &block.layers {
                d += match layer {
                    BlockLayer::Basic(b) => b.weighted_layers(),
                    BlockLayer::Residual(_) => 1,
                };
            }
        }
        d += self.transitions.iter().filter(|t| t.params.is_some()).count();
        d + 1 // classifier
    }

    /// Every learnable parameter, in execution order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        out.push(self.stem.conv.clone());
        if let Some((g, b)) = &self.stem.bn {
            out.push(g.clone());
            out.push(b.clone());
        }
        for (bi, block) in self.blocks.iter().enumerate() {
            for layer in &block.layers {
                match layer {
                    BlockLayer::Basic(l) => {
                        if let Some((g, b, w)) = &l.bottleneck {
                            out.push(g.clone());
                            out.push(b.clone());
                            out.push(w.clone());
                        }
                        out.push(l.bn.0.clone());
                        out.push(l.bn.1.clone());
                        out.push(l.conv.clone());
                    }
                    BlockLayer::Residual(r) => {
                        out.push(r.bn.0.clone());
                        out.push(r.bn.1.clone());
                        out.push(r.conv.clone());
                    }
                }
            }
            if bi < self.transitions.len() {
                if let Some(((g, b), w)) = &self.transitions[bi].params {
                    out.push(g.clone());
                    out.push(b.clone());
                    out.push(w.clone());
                }
            }
        }
        out.push(self.head.bn.0.clone());
        out.push(self.head.bn.1.clone());
        out.push(self.head.weight.clone());
        out.push(self.head.bias.clone());
        out
    }

    /// Total learnable parameter elements in the built graph.
    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.numel()).sum()
    }

    /// Check that every layer's declared input width equals the sum of its
    /// sources' output widths.
    pub fn audit_channels(&self) -> Result<()> {
        for block in &self.blocks {
            for layer in &block.layers {
                if let BlockLayer::Basic(l) = layer {
                    let total: usize = l.sources.iter().map(|s| s.channels).sum();
                    if total != l.in_channels {
                        return Err(Error::config(format!(
                            "channel audit failed at {}: declared {} vs sources {}",
                            l.name, l.in_channels, total
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Intra-block direct connections, summed over blocks.
    pub fn edge_count(&self) -> usize {
        self.blocks.iter().map(|b| b.edges.edge_count()).sum()
    }

    /// Audited concatenation width at layer `l` (1-based) of block `b` (0-based).
    pub fn concat_width(&self, b: usize, l: usize) -> usize {
        match &self.blocks[b].layers[l - 1] {
            BlockLayer::Basic(layer) => layer.in_channels,
            BlockLayer::Residual(r) => r.channels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_channels_formula() {
        assert_eq!(input_channels(24, 12, 1), 24);
        assert_eq!(input_channels(24, 12, 5), 72);
        assert_eq!(input_channels(64, 32, 7), 256);
    }

    #[test]
    fn imagenet121_block1_audit_matches_formula() {
        let g = build(&NetworkSpec::imagenet(121).unwrap()).unwrap();
        // Width consumed by the transition after block 1 equals the formula at l = M+1.
        assert_eq!(g.blocks[0].out_channels, input_channels(64, 32, 7));
        for l in 1..=6 {
            assert_eq!(g.concat_width(0, l), input_channels(64, 32, l));
        }
    }

    #[test]
    fn basic_layer_kernel_shapes() {
        let l = BasicLayer::build("t", 64, 32, 4, BnPlacement::Pre);
        let (_, _, w1) = l.bottleneck.as_ref().unwrap();
        assert_eq!(w1.shape, Shape::new(128, 64, 1, 1));
        assert_eq!(l.conv.shape, Shape::new(32, 128, 3, 3));

        let plain = BasicLayer::build("t", 64, 32, 0, BnPlacement::Pre);
        assert!(plain.bottleneck.is_none());
        assert_eq!(plain.conv.shape, Shape::new(32, 64, 3, 3));
    }

    #[test]
    fn basic_layer_param_count_hand_check() {
        // 64*128 + 128*32*9 + 2*64 + 2*128 = 45,440
        let l = BasicLayer::build("t", 64, 32, 4, BnPlacement::Pre);
        assert_eq!(l.param_count(), 45_440);
    }

    #[test]
    fn transition_floor_and_identity() {
        assert_eq!(build_transition("t", 448, 0.5).unwrap().out_channels, 224);
        assert_eq!(build_transition("t", 225, 0.5).unwrap().out_channels, 112);
        assert_eq!(build_transition("t", 300, 1.0).unwrap().out_channels, 300);
        assert!(build_transition("t", 1, 0.3).is_err());
    }

    #[test]
    fn cifar_depth_formula() {
        for (m, k, want) in [(16usize, 12usize, 100usize), (31, 40, 190), (41, 24, 250), (1, 8, 10)] {
            let g = build_cifar(m, k, 0.5, 4, 10).unwrap();
            assert_eq!(g.depth(), want, "M={m}");
            assert_eq!(g.depth(), 6 * m + 4);
        }
        // M=1 audit: exactly 10 weighted layers in the built graph.
        let g = build_cifar(1, 8, 0.5, 4, 10).unwrap();
        let mut weighted = 1; // stem
        for b in &g.blocks {
            for l in &b.layers {
                weighted += match l {
                    BlockLayer::Basic(bl) => bl.weighted_layers(),
                    BlockLayer::Residual(_) => 1,
                };
            }
        }
        weighted += g.transitions.iter().filter(|t| t.params.is_some()).count() + 1;
        assert_eq!(weighted, 10);
        assert_eq!(build_imagenet(121).unwrap().depth(), 121);
    }

    #[test]
    fn imagenet_preset_shapes() {
        for (p, blocks) in [
            (121u32, vec![6usize, 12, 24, 16]),
            (169, vec![6, 12, 32, 32]),
            (201, vec![6, 12, 48, 32]),
            (265, vec![6, 12, 64, 48]),
        ] {
            let spec = NetworkSpec::imagenet(p).unwrap();
            assert_eq!(spec.blocks, blocks);
            let g = build(&spec).unwrap();
            assert_eq!(g.depth(), p as usize);
        }
        assert!(NetworkSpec::imagenet(150).is_err());
    }

    #[test]
    fn power_of_two_sources_at_8() {
        let g = connectivity_edges(Connectivity::PowerOfTwo, 8).unwrap();
        let mut s = g.sources_of(8);
        s.sort_unstable();
        assert_eq!(s, vec![0, 4, 6, 7]);
    }

    #[test]
    fn dense_edge_count_is_triangular() {
        let g = connectivity_edges(Connectivity::Dense, 5).unwrap();
        assert_eq!(g.edge_count(), 15);
    }

    #[test]
    fn last_span_has_exactly_span_sources_past_warmup() {
        let g = connectivity_edges(Connectivity::LastSpan(4), 12).unwrap();
        for l in 5..=12 {
            assert_eq!(g.sources_of(l).len(), 4, "layer {l}");
        }
        // Brute-force comparison.
        for l in 1..=12usize {
            let mut want: Vec<usize> = (0..l).filter(|s| l - s <= 4).collect();
            want.sort_unstable();
            let mut got = g.sources_of(l);
            got.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn full_dense_cross_block_channels() {
        // 2 blocks of 2 layers: first layer of block 2 reads the block-1
        // input plus both block-1 outputs, each pooled once.
        let mut spec = NetworkSpec::cifar(2, 8, 0.5, 4, 10);
        spec.blocks = vec![2, 2];
        spec.connectivity = Connectivity::FullDense;
        let g = build(&spec).unwrap();
        let k0 = spec.stem_channels();
        let first = match &g.blocks[1].layers[0] {
            BlockLayer::Basic(l) => l,
            _ => panic!(),
        };
        assert_eq!(first.in_channels, k0 + 2 * 8);
        assert!(first.sources.iter().all(|s| s.block == 1 || s.pools == 1));

        // Total edges 1+2+3+4 = 10 per the global dense rule.
        let total: usize = g
            .blocks
            .iter()
            .flat_map(|b| b.layers.iter())
            .map(|l| match l {
                BlockLayer::Basic(bl) => bl.sources.len(),
                _ => 0,
            })
            .sum();
        assert_eq!(total, 10);

        // And the transitions carry no parameters.
        assert!(g.transitions.iter().all(|t| t.params.is_none()));
    }

    #[test]
    fn exponential_growth_doubles_per_block() {
        let mut spec = NetworkSpec::imagenet_custom(vec![2, 2, 2, 2], 8);
        spec.growth = GrowthSchedule::Exponential { base: 8 };
        let g = build(&spec).unwrap();
        for (j, b) in g.blocks.iter().enumerate() {
            assert_eq!(b.growth, 8 << j);
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = NetworkSpec::cifar(4, 12, 0.5, 4, 10);
        s.compression = 1.5;
        assert!(s.validate().is_err());
        s.compression = 0.0;
        assert!(s.validate().is_err());
        let mut s2 = NetworkSpec::cifar(4, 12, 0.5, 4, 10);
        s2.blocks = vec![];
        assert!(s2.validate().is_err());
        let mut s3 = NetworkSpec::cifar(4, 12, 0.5, 4, 10);
        s3.dropout = 1.0;
        assert!(s3.validate().is_err());
    }
}
