//! Network and run configuration files: line-oriented `key = value` with
//! `[section]` headers, or an equivalent JSON object. Unknown keys are
//! rejected by name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    BnPlacement, Connectivity, GrowthSchedule, NetworkSpec, StemKind, SPEC_VERSION,
};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Axis to vary: growth | bottleneck | compression | connectivity |
    /// growth_mode | bn_placement.
    pub axis: String,
    pub values: Vec<String>,
    /// Per-run block lists, e.g. "6-12-18-12".
    pub depths: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    /// blobs | shapes | a path to a binary dataset file.
    pub source: String,
    pub per_class: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub eval_every: usize,
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "blobs".into(),
            per_class: 64,
            image_size: 16,
            image_channels: 3,
            eval_every: 5,
            normalize: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sweep: Option<SweepConfig>,
    /// Input extent used for MAC counting and lowering.
    pub image_size: usize,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::config(format!("{key}: expected an integer, got '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::config(format!("{key}: expected a number, got '{v}'")))
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_usize(key, s))
        .collect()
}

pub fn parse_connectivity(v: &str) -> Result<Connectivity> {
    if let Some(rest) = v.strip_prefix("last:") {
        let span = parse_usize("connectivity", rest)?;
        return Ok(Connectivity::LastSpan(span));
    }
    match v {
        "dense" => Ok(Connectivity::Dense),
        "full-dense" | "fdc" => Ok(Connectivity::FullDense),
        "parity" => Ok(Connectivity::Parity),
        "pow2" | "power-of-two" => Ok(Connectivity::PowerOfTwo),
        "residual" => Ok(Connectivity::Residual),
        _ => Err(Error::config(format!(
            "connectivity: unknown pattern '{v}' (dense | full-dense | last:N | parity | pow2 | residual)"
        ))),
    }
}

pub fn connectivity_name(c: Connectivity) -> String {
    match c {
        Connectivity::Dense => "dense".into(),
        Connectivity::FullDense => "full-dense".into(),
        Connectivity::LastSpan(s) => format!("last:{s}"),
        Connectivity::Parity => "parity".into(),
        Connectivity::PowerOfTwo => "pow2".into(),
        Connectivity::Residual => "residual".into(),
    }
}

type Section = (String, Vec<(String, String)>);

/// Key-value pairs grouped by section, in file order.
fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = vec![(String::new(), Vec::new())];
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::config(format!("line {}: unterminated section header", lineno + 1)))?;
            sections.push((name.trim().to_string(), Vec::new()));
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        sections
            .last_mut()
            .unwrap()
            .1
            .push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(sections)
}

struct SectionMap {
    name: String,
    entries: BTreeMap<String, String>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl SectionMap {
    /// Later occurrences of a key override earlier ones, so command-line
    /// overrides can simply be appended to the file text.
    fn new(name: String, pairs: Vec<(String, String)>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, v) in pairs {
            entries.insert(k, v);
        }
        Ok(SectionMap { name, entries, used: Default::default() })
    }

    fn get(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key).map(String::as_str);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    fn finish(&self) -> Result<()> {
        for k in self.entries.keys() {
            if !self.used.borrow().contains(k) {
                return Err(Error::config(format!("unknown key '{k}' in [{}]", self.name)));
            }
        }
        Ok(())
    }
}

fn network_from_section(sec: &SectionMap) -> Result<(NetworkSpec, usize)> {
    // Presets give the baseline; explicit keys override.
    let mut image_size = 32usize;
    let mut spec = match sec.get("preset") {
        Some("cifar") | None => {
            let depth = sec.get("depth").map(|v| parse_usize("depth", v)).transpose()?;
            let growth = sec.get("growth").map(|v| parse_usize("growth", v)).transpose()?.unwrap_or(12);
            let m = match depth {
                Some(l) => {
                    if l < 10 || (l - 4) % 6 != 0 {
                        return Err(Error::config(format!(
                            "depth: {l} is not of the form 6*M+4 for the 3-block layout"
                        )));
                    }
                    (l - 4) / 6
                }
                None => 0,
            };
            let mut s = NetworkSpec::cifar(m.max(1), growth, 0.5, 4, 10);
            if let Some(blocks) = sec.get("blocks") {
                s.blocks = parse_usize_list("blocks", blocks)?;
            } else if depth.is_none() {
                return Err(Error::config("network needs 'depth' or 'blocks'"));
            }
            s
        }
        Some(p) if p.starts_with("densenet") => {
            let n: u32 = p["densenet".len()..]
                .parse()
                .map_err(|_| Error::config(format!("preset: unknown '{p}'")))?;
            image_size = 224;
            let mut s = NetworkSpec::imagenet(n)?;
            if let Some(blocks) = sec.get("blocks") {
                s.blocks = parse_usize_list("blocks", blocks)?;
            }
            if let Some(g) = sec.get("growth") {
                s.growth = GrowthSchedule::Constant(parse_usize("growth", g)?);
            }
            s
        }
        Some(other) => {
            return Err(Error::config(format!(
                "preset: unknown '{other}' (cifar | densenet121 | densenet169 | densenet201 | densenet265)"
            )))
        }
    };

    if let Some(v) = sec.get("spec_version") {
        let got = parse_usize("spec_version", v)? as u32;
        if got != SPEC_VERSION {
            return Err(Error::config(format!(
                "spec_version: file has {got}, this build reads {SPEC_VERSION}"
            )));
        }
    }
    if let Some(v) = sec.get("growth_mode") {
        spec.growth = match v {
            "constant" => GrowthSchedule::Constant(spec.growth.base()),
            "exponential" => GrowthSchedule::Exponential { base: spec.growth.base() },
            _ => return Err(Error::config(format!("growth_mode: '{v}' (constant | exponential)"))),
        };
    }
    if let Some(v) = sec.get("bottleneck") {
        spec.bottleneck_mult = parse_usize("bottleneck", v)?;
    }
    if let Some(v) = sec.get("compression") {
        spec.compression = parse_f64("compression", v)?;
    }
    if let Some(v) = sec.get("connectivity") {
        spec.connectivity = parse_connectivity(v)?;
    }
    if let Some(v) = sec.get("bn_placement") {
        spec.bn_placement = match v {
            "pre" => BnPlacement::Pre,
            "post" => BnPlacement::Post,
            _ => return Err(Error::config(format!("bn_placement: '{v}' (pre | post)"))),
        };
    }
    if let Some(v) = sec.get("stem") {
        spec.stem = match v {
            "cifar" => StemKind::Cifar,
            "imagenet" => StemKind::ImageNet,
            _ => return Err(Error::config(format!("stem: '{v}' (cifar | imagenet)"))),
        };
    }
    if let Some(v) = sec.get("classes") {
        spec.classes = parse_usize("classes", v)?;
    }
    if let Some(v) = sec.get("dropout") {
        spec.dropout = parse_f64("dropout", v)?;
    }
    if let Some(v) = sec.get("image_channels") {
        spec.image_channels = parse_usize("image_channels", v)?;
    }
    if let Some(v) = sec.get("bn_eps") {
        spec.bn_eps = parse_f64("bn_eps", v)?;
    }
    if let Some(v) = sec.get("bn_momentum") {
        spec.bn_momentum = parse_f64("bn_momentum", v)?;
    }
    if let Some(v) = sec.get("image_size") {
        image_size = parse_usize("image_size", v)?;
    }
    sec.finish()?;
    spec.validate()?;
    Ok((spec, image_size))
}

fn train_from_section(sec: &SectionMap) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(v) = sec.get("epochs") {
        cfg.epochs = parse_usize("epochs", v)?;
    }
    if let Some(v) = sec.get("batch") {
        cfg.batch = parse_usize("batch", v)?;
    }
    if let Some(v) = sec.get("lr0") {
        cfg.lr0 = parse_f64("lr0", v)?;
    }
    if let Some(v) = sec.get("momentum") {
        cfg.momentum = parse_f64("momentum", v)?;
    }
    if let Some(v) = sec.get("weight_decay") {
        cfg.weight_decay = parse_f64("weight_decay", v)?;
    }
    if let Some(v) = sec.get("milestones") {
        cfg.milestones = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_f64("milestones", s))
            .collect::<Result<_>>()?;
    }
    if let Some(v) = sec.get("lr_factor") {
        cfg.lr_factor = parse_f64("lr_factor", v)?;
    }
    if let Some(v) = sec.get("dropout") {
        cfg.dropout = parse_f64("dropout", v)?;
    }
    if let Some(v) = sec.get("augment") {
        cfg.augment = parse_bool("augment", v)?;
    }
    if let Some(v) = sec.get("pad") {
        cfg.pad = parse_usize("pad", v)?;
    }
    if let Some(v) = sec.get("seed") {
        cfg.seed = parse_usize("seed", v)? as u64;
    }
    sec.finish()?;
    Ok(cfg)
}

fn data_from_section(sec: &SectionMap) -> Result<DataConfig> {
    let mut cfg = DataConfig::default();
    if let Some(v) = sec.get("source") {
        cfg.source = v.to_string();
    }
    if let Some(v) = sec.get("per_class") {
        cfg.per_class = parse_usize("per_class", v)?;
    }
    if let Some(v) = sec.get("image_size") {
        cfg.image_size = parse_usize("image_size", v)?;
    }
    if let Some(v) = sec.get("image_channels") {
        cfg.image_channels = parse_usize("image_channels", v)?;
    }
    if let Some(v) = sec.get("eval_every") {
        cfg.eval_every = parse_usize("eval_every", v)?;
    }
    if let Some(v) = sec.get("normalize") {
        cfg.normalize = parse_bool("normalize", v)?;
    }
    sec.finish()?;
    Ok(cfg)
}

fn sweep_from_section(sec: &SectionMap) -> Result<SweepConfig> {
    let axis = sec
        .get("axis")
        .ok_or_else(|| Error::config("sweep needs 'axis'"))?
        .to_string();
    let values: Vec<String> = sec
        .get("values")
        .ok_or_else(|| Error::config("sweep needs 'values'"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let depths = match sec.get("depths") {
        Some(v) => v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|group| {
                group
                    .split('-')
                    .map(|x| parse_usize("depths", x.trim()))
                    .collect::<Result<Vec<usize>>>()
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    sec.finish()?;
    Ok(SweepConfig { axis, values, depths })
}

/// Parse the line-oriented format (or JSON when the file starts with `{`).
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    if text.trim_start().starts_with('{') {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("json config: {e}")))?;
        cfg.network.validate()?;
        return Ok(cfg);
    }
    let sections = split_sections(text)?;
    // Merge same-named sections so appended overrides take effect.
    let mut merged: Vec<(String, Vec<(String, String)>)> = Vec::new();
    for (name, pairs) in sections {
        if let Some((_, existing)) = merged.iter_mut().find(|(n, _)| *n == name) {
            existing.extend(pairs);
        } else {
            merged.push((name, pairs));
        }
    }
    let mut network = None;
    let mut train = TrainConfig::default();
    let mut data = DataConfig::default();
    let mut sweep = None;
    let mut image_size = 32;
    let mut root_version: Option<usize> = None;
    for (name, pairs) in merged {
        let sec = SectionMap::new(name.clone(), pairs)?;
        match name.as_str() {
            "" => {
                if let Some(v) = sec.get("spec_version") {
                    root_version = Some(parse_usize("spec_version", v)?);
                }
                sec.finish()?;
            }
            "network" => {
                let (spec, size) = network_from_section(&sec)?;
                network = Some(spec);
                image_size = size;
            }
            "train" => train = train_from_section(&sec)?,
            "data" => data = data_from_section(&sec)?,
            "sweep" => sweep = Some(sweep_from_section(&sec)?),
            other => return Err(Error::config(format!("unknown section [{other}]"))),
        }
    }
    if let Some(v) = root_version {
        if v as u32 != SPEC_VERSION {
            return Err(Error::config(format!(
                "spec_version: file has {v}, this build reads {SPEC_VERSION}"
            )));
        }
    }
    let network = network.ok_or_else(|| Error::config("config needs a [network] section"))?;
    Ok(RunConfig { network, train, data, sweep, image_size })
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    parse_run_config(&text)
}

/// Append `section.key=value` overrides to a config text; later keys win.
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    let mut out = text.to_string();
    for ov in overrides {
        let (key, value) = ov
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("override '{ov}' is not key=value")))?;
        let (section, k) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::usage(format!("override key '{key}' needs a section prefix, e.g. network.growth")))?;
        out.push_str(&format!("\n[{section}]\n{k} = {}\n", value.trim()));
    }
    Ok(out)
}

/// Default config text when no file is given.
pub fn default_config_text() -> &'static str {
    "[network]\ndepth = 16\ngrowth = 8\n\n[train]\nepochs = 10\nbatch = 16\n\n[data]\nsource = blobs\nper_class = 32\nimage_size = 16\n"
}

/// Human-readable key-value rendering of a network spec (round-trips through
/// the parser).
pub fn spec_to_config_string(spec: &NetworkSpec, image_size: usize) -> String {
    let growth_mode = match spec.growth {
        GrowthSchedule::Constant(_) => "constant",
        GrowthSchedule::Exponential { .. } => "exponential",
    };
    let placement = match spec.bn_placement {
        BnPlacement::Pre => "pre",
        BnPlacement::Post => "post",
    };
    let stem = match spec.stem {
        StemKind::Cifar => "cifar",
        StemKind::ImageNet => "imagenet",
    };
    format!(
        "spec_version = {}\n\n[network]\nblocks = {}\ngrowth = {}\ngrowth_mode = {}\n\
         bottleneck = {}\ncompression = {}\nconnectivity = {}\nbn_placement = {}\n\
         stem = {}\nclasses = {}\ndropout = {}\nimage_channels = {}\nbn_eps = {}\n\
         bn_momentum = {}\nimage_size = {}\n",
        SPEC_VERSION,
        spec.blocks.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        spec.growth.base(),
        growth_mode,
        spec.bottleneck_mult,
        spec.compression,
        connectivity_name(spec.connectivity),
        placement,
        stem,
        spec.classes,
        spec.dropout,
        spec.image_channels,
        spec.bn_eps,
        spec.bn_momentum,
        image_size,
    )
}
