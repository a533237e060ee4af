use serde::{Deserialize, Serialize};

use super::config::{se_width, PyramidConfig, INITIAL_CHANNELS};
use super::graph::{GraphRole, ModelGraph, NamedLayer, Node, PyramidUnit};
use crate::error::{Error, Result};
use crate::layers::LayerSpec;

/// Where the backbone is cut and what crosses the cut.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub split_index: usize,
    pub split_channels: usize,
    /// `(H, W)` of the feature map leaving the front part.
    pub split_spatial: (usize, usize),
}

impl SplitPlan {
    pub fn feature_shape(&self) -> Vec<usize> {
        vec![self.split_channels, self.split_spatial.0, self.split_spatial.1]
    }
}

/// Builds one bottleneck unit:
/// `BN → 1×1 → BN → ReLU → 3×3(stride) → BN → ReLU → 1×1(×4) → BN`,
/// optionally followed by the excitation gate `GAP → FC → ReLU → FC → σ`.
pub fn build_unit(cfg: &PyramidConfig, k: usize, in_ch: usize) -> Result<PyramidUnit> {
    let depth = cfg.fmd(k)?;
    let stride = if cfg.is_downsampling(k) { 2 } else { 1 };
    let name = format!("unit{k}");
    let l = |suffix: &str, spec: LayerSpec| NamedLayer::new(format!("{name}.{suffix}"), spec);
    let main = vec![
        l("bn1", LayerSpec::BatchNorm { ch: in_ch }),
        l("conv1", LayerSpec::conv(in_ch, depth, 1, 1, 0, false)),
        l("bn2", LayerSpec::BatchNorm { ch: depth }),
        l("relu1", LayerSpec::ReLU),
        l("conv2", LayerSpec::conv(depth, depth, 3, stride, 1, false)),
        l("bn3", LayerSpec::BatchNorm { ch: depth }),
        l("relu2", LayerSpec::ReLU),
        l("conv3", LayerSpec::conv(depth, 4 * depth, 1, 1, 0, false)),
        l("bn4", LayerSpec::BatchNorm { ch: 4 * depth }),
    ];
    let se = if cfg.squeeze_excitation {
        let hidden = se_width(depth);
        vec![
            l("se.pool", LayerSpec::GlobalAvgPool),
            l("se.fc1", LayerSpec::dense(4 * depth, hidden, false)),
            l("se.relu", LayerSpec::ReLU),
            l("se.fc2", LayerSpec::dense(hidden, 4 * depth, false)),
            l("se.gate", LayerSpec::Sigmoid),
        ]
    } else {
        Vec::new()
    };
    Ok(PyramidUnit {
        name,
        index: k,
        in_ch,
        depth,
        stride,
        main,
        se,
    })
}

/// Stem, `R` bottleneck units and the classifier head.
pub fn build_model(cfg: &PyramidConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut nodes = vec![
        Node::Layer(NamedLayer::new(
            "stem.conv",
            LayerSpec::conv(cfg.input_channels, INITIAL_CHANNELS, 3, 1, 1, false),
        )),
        Node::Layer(NamedLayer::new("stem.bn", LayerSpec::BatchNorm { ch: INITIAL_CHANNELS })),
    ];
    let mut ch = INITIAL_CHANNELS;
    for k in 1..=cfg.units {
        let unit = build_unit(cfg, k, ch)?;
        ch = unit.out_ch();
        nodes.push(Node::Unit(unit));
    }
    nodes.extend([
        Node::Layer(NamedLayer::new("head.bn", LayerSpec::BatchNorm { ch })),
        Node::Layer(NamedLayer::new("head.relu", LayerSpec::ReLU)),
        Node::Layer(NamedLayer::new("head.pool", LayerSpec::GlobalAvgPool)),
        Node::Layer(NamedLayer::new("head.fc", LayerSpec::dense(ch, cfg.num_classes, true))),
    ]);
    Ok(ModelGraph::new(
        GraphRole::Full,
        vec![cfg.input_channels, cfg.input_size, cfg.input_size],
        nodes,
    ))
}

/// Cuts a full graph after unit `s`: the front keeps the stem and units
/// `1..=s`, the rest keeps units `s+1..=R` and the head.
pub fn split_model(graph: &ModelGraph, s: usize) -> Result<(ModelGraph, ModelGraph, SplitPlan)> {
    if graph.role != GraphRole::Full {
        return Err(Error::invalid(format!("can only split a full graph, got {:?}", graph.role)));
    }
    let r = graph.units().count();
    if s == 0 || s > r {
        return Err(Error::OutOfRange {
            what: "split index",
            detail: format!("s = {s} not in [1, {r}]"),
        });
    }
    let cut = graph
        .nodes
        .iter()
        .position(|n| matches!(n, Node::Unit(u) if u.index == s))
        .expect("unit present")
        + 1;
    let front = ModelGraph::new(GraphRole::Front, graph.input_shape.clone(), graph.nodes[..cut].to_vec());
    let feature = front.output_shape()?;
    let rest = ModelGraph::new(GraphRole::Rest, feature.clone(), graph.nodes[cut..].to_vec());
    let plan = SplitPlan {
        split_index: s,
        split_channels: feature[0],
        split_spatial: (feature[1], feature[2]),
    };
    Ok((front, rest, plan))
}

/// Split geometry without materializing the graphs.
pub fn split_plan(cfg: &PyramidConfig, s: usize) -> Result<SplitPlan> {
    cfg.validate()?;
    if s == 0 || s > cfg.units {
        return Err(Error::OutOfRange {
            what: "split index",
            detail: format!("s = {s} not in [1, {}]", cfg.units),
        });
    }
    let side = cfg.spatial_after(s);
    Ok(SplitPlan {
        split_index: s,
        split_channels: 4 * cfg.fmd(s)?,
        split_spatial: (side, side),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn toy() -> PyramidConfig {
        PyramidConfig {
            units: 3,
            widening: 9.0,
            num_classes: 5,
            input_size: 8,
            ..PyramidConfig::default()
        }
    }

    #[test]
    fn full_scale_geometry() {
        let g = build_model(&PyramidConfig::default()).unwrap();
        let first = g.units().next().unwrap();
        assert_eq!(first.in_ch, 16);
        assert_eq!(first.depth, 18);
        assert_eq!(
            first.main[1].spec,
            LayerSpec::conv(16, 18, 1, 1, 0, false)
        );
        let Node::Layer(fc) = g.nodes.last().unwrap() else { panic!() };
        assert_eq!(fc.spec, LayerSpec::dense(540, 100, true));
        assert_eq!(g.output_shape().unwrap(), vec![100]);
    }

    #[test]
    fn toy_depths() {
        let g = build_model(&toy()).unwrap();
        let d: Vec<usize> = g.units().map(|u| u.depth).collect();
        assert_eq!(d, vec![18, 21, 24]);
    }

    #[test]
    fn only_group_entries_downsample() {
        let cfg = PyramidConfig::new(9, 24.0, 10);
        let g = build_model(&cfg).unwrap();
        let strided: Vec<usize> = g.units().filter(|u| u.stride == 2).map(|u| u.index).collect();
        assert_eq!(strided, vec![4, 7]);
    }

    #[test]
    fn split_plan_at_45() {
        let cfg = PyramidConfig::default();
        let plan = split_plan(&cfg, 45).unwrap();
        assert_eq!(plan.split_channels, 460);
        assert_eq!(plan.split_spatial, (8, 8));
        let g = build_model(&cfg).unwrap();
        let (_, _, p2) = split_model(&g, 45).unwrap();
        assert_eq!(p2, plan);
    }

    #[test]
    fn degenerate_split_keeps_head_only() {
        let g = build_model(&toy()).unwrap();
        let (_, rest, _) = split_model(&g, 3).unwrap();
        assert!(rest.units().next().is_none());
        assert_eq!(rest.nodes.len(), 4);
        assert!(split_model(&g, 0).is_err());
        assert!(split_model(&g, 4).is_err());
        assert!(split_model(&rest, 1).is_err());
    }

    #[test]
    fn split_composition_is_exact() {
        let cfg = toy();
        let g = build_model(&cfg).unwrap();
        let mut params = g.init_params::<f32>(4).unwrap();
        // perturb running statistics so eval mode is not the identity
        let mut r = crate::rng::stream(9, &[]);
        for (k, p) in params.iter_mut() {
            if k.ends_with("running_var") {
                p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
            }
        }
        let x = Tensor::from_fn(vec![2, 3, 8, 8], |_| r.random_range(-1.0..1.0));
        let full = g.forward_eval(&params, &x).unwrap();
        for s in 1..=3 {
            let (front, rest, _) = split_model(&g, s).unwrap();
            let fp = front.select_params(&params).unwrap();
            let rp = rest.select_params(&params).unwrap();
            assert_eq!(fp.trainable_count() + rp.trainable_count(), params.trainable_count());
            let mid = front.forward_eval(&fp, &x).unwrap();
            let y = rest.forward_eval(&rp, &mid).unwrap();
            assert_eq!(y, full, "split at {s}");
        }
    }

    #[test]
    fn strided_units_halve_spatial() {
        let cfg = toy();
        let g = build_model(&cfg).unwrap();
        for site in g.sites().unwrap() {
            if site.name.ends_with("conv2") {
                let u: usize = site.name[4..site.name.find('.').unwrap()].parse().unwrap();
                let want = if cfg.is_downsampling(u) { site.input[1] / 2 } else { site.input[1] };
                assert_eq!(site.output[1], want);
            }
        }
    }
}
