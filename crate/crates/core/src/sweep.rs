//! Sweep runner: train one configuration per point of a single-axis sweep,
//! optionally crossed with a list of per-block depth layouts.

use serde::Serialize;

use crate::config::{connectivity_name, parse_connectivity, SweepConfig};
use crate::cost;
use crate::data::Dataset;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::exec::Strategy;
use crate::graph::{build, BnPlacement, Connectivity, GrowthSchedule, NetworkSpec};
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub label: String,
    pub spec: NetworkSpec,
}

/// Expand a sweep into concrete specs: one per (value, depth layout).
pub fn expand(base: &NetworkSpec, sweep: &SweepConfig) -> Result<Vec<SweepPoint>> {
    let depth_sets: Vec<Vec<usize>> = if sweep.depths.is_empty() {
        vec![base.blocks.clone()]
    } else {
        sweep.depths.clone()
    };
    let mut points = Vec::new();
    for value in &sweep.values {
        for blocks in &depth_sets {
            let mut spec = base.clone();
            spec.blocks = blocks.clone();
            let label_val = match sweep.axis.as_str() {
                "growth" => {
                    let k: usize = value
                        .parse()
                        .map_err(|_| Error::config(format!("sweep growth value '{value}'")))?;
                    spec.growth = GrowthSchedule::Constant(k);
                    format!("k={k}")
                }
                "bottleneck" => {
                    let m: usize = value
                        .parse()
                        .map_err(|_| Error::config(format!("sweep bottleneck value '{value}'")))?;
                    spec.bottleneck_mult = m;
                    format!("m={m}")
                }
                "compression" => {
                    let t: f64 = value
                        .parse()
                        .map_err(|_| Error::config(format!("sweep compression value '{value}'")))?;
                    spec.compression = t;
                    format!("theta={t}")
                }
                "connectivity" => {
                    spec.connectivity = parse_connectivity(value)?;
                    format!("conn={}", connectivity_name(spec.connectivity))
                }
                "growth_mode" => {
                    spec.growth = match value.as_str() {
                        "constant" => GrowthSchedule::Constant(spec.growth.base()),
                        "exponential" => {
                            GrowthSchedule::Exponential { base: spec.growth.base() }
                        }
                        other => {
                            return Err(Error::config(format!("sweep growth_mode '{other}'")))
                        }
                    };
                    format!("growth_mode={value}")
                }
                "bn_placement" => {
                    spec.bn_placement = match value.as_str() {
                        "pre" => BnPlacement::Pre,
                        "post" => BnPlacement::Post,
                        other => {
                            return Err(Error::config(format!("sweep bn_placement '{other}'")))
                        }
                    };
                    format!("bn={value}")
                }
                other => {
                    return Err(Error::config(format!(
                        "sweep axis '{other}' (growth | bottleneck | compression | connectivity | growth_mode | bn_placement)"
                    )))
                }
            };
            let blocks_label =
                blocks.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("-");
            spec.validate()?;
            // Semicolon-joined so the label stays a single CSV column.
            points.push(SweepPoint { label: format!("{label_val};blocks={blocks_label}"), spec });
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub config: String,
    pub params: u64,
    pub macs: u64,
    pub final_train_err: f64,
    pub final_eval_err: f64,
}

pub const SWEEP_CSV_HEADER: &str = "config,params,macs,final_train_err,final_eval_err";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.config, r.params, r.macs, r.final_train_err, r.final_eval_err
        ));
    }
    out
}

fn run_point<E: Element>(
    point: &SweepPoint,
    train_set: &Dataset<E>,
    eval_set: &Dataset<E>,
    cfg: &TrainConfig,
    strategy: Strategy,
    input_hw: (usize, usize),
) -> Result<SweepRow> {
    let graph = build(&point.spec)?;
    // Variant patterns fall back to the store-everything execution.
    let effective = if matches!(point.spec.connectivity, Connectivity::Dense)
        && matches!(point.spec.bn_placement, BnPlacement::Pre)
    {
        strategy
    } else {
        Strategy::Reference
    };
    let outcome = train(&graph, train_set, eval_set, cfg, effective, input_hw)?;
    let last = outcome.metrics.last().ok_or_else(|| Error::config("sweep with zero epochs"))?;
    Ok(SweepRow {
        config: point.label.clone(),
        params: cost::count_params(&point.spec)?,
        macs: cost::count_macs(&point.spec, input_hw)?,
        final_train_err: last.train_err,
        final_eval_err: last.eval_err,
    })
}

/// Train every point; independent runs execute in parallel, results keep the
/// expansion order.
pub fn run_sweep<E: Element>(
    points: &[SweepPoint],
    train_set: &Dataset<E>,
    eval_set: &Dataset<E>,
    cfg: &TrainConfig,
    strategy: Strategy,
    input_hw: (usize, usize),
) -> Result<Vec<SweepRow>> {
    let results = crate::par::map_indexed(points.len(), |i| {
        run_point(&points[i], train_set, eval_set, cfg, strategy, input_hw)
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expands_published_depth_set_verbatim() {
        let base = NetworkSpec::imagenet_custom(vec![6, 12, 24, 16], 16);
        let sweep = SweepConfig {
            axis: "growth".into(),
            values: vec!["8".into(), "16".into(), "24".into(), "32".into(), "40".into()],
            depths: vec![
                vec![6, 12, 18, 12],
                vec![6, 12, 24, 16],
                vec![6, 12, 32, 32],
                vec![6, 12, 48, 32],
                vec![6, 12, 64, 48],
                vec![6, 12, 80, 64],
            ],
        };
        let points = expand(&base, &sweep).unwrap();
        assert_eq!(points.len(), 30);
        assert!(points.iter().any(|p| p.spec.blocks == vec![6, 12, 80, 64]));
        assert!(points[0].label.contains("k=8"));
    }

    #[test]
    fn compression_axis_orders_parameter_counts() {
        let base = NetworkSpec::cifar(4, 8, 0.5, 4, 10);
        let sweep = SweepConfig {
            axis: "compression".into(),
            values: vec!["0.3".into(), "0.5".into(), "0.7".into()],
            depths: vec![],
        };
        let points = expand(&base, &sweep).unwrap();
        let params: Vec<u64> =
            points.iter().map(|p| cost::count_params(&p.spec).unwrap()).collect();
        assert!(params[0] < params[1] && params[1] < params[2]);
    }

    #[test]
    fn unknown_axis_is_rejected() {
        let base = NetworkSpec::cifar(4, 8, 0.5, 4, 10);
        let sweep =
            SweepConfig { axis: "nonsense".into(), values: vec!["1".into()], depths: vec![] };
        assert!(expand(&base, &sweep).is_err());
    }
}
