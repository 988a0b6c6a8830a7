//! Property tests over randomly drawn shapes, patterns, and values.

use densekit::cost;
use densekit::exec::{BlockDims, Strategy};
use densekit::graph::{build, connectivity_edges, Connectivity, NetworkSpec};
use densekit::plan::{plan, verify, PlanMode};
use densekit::tape::Tape;
use densekit::tensor::{Shape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Concatenation followed by channel slicing at the recorded offsets is
    /// the identity, forward and backward.
    #[test]
    fn concat_slice_back_roundtrip(
        channels in prop::collection::vec(1usize..5, 1..5),
        n in 1usize..3,
        hw in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut t = Tape::<f64>::new(0);
        let mut s = seed | 1;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut ids = Vec::new();
        let mut originals = Vec::new();
        for c in &channels {
            let shape = Shape::new(n, *c, hw, hw);
            let data: Vec<f64> = (0..shape.numel()).map(|_| next()).collect();
            originals.push(data.clone());
            ids.push(t.input(Tensor::from_vec(shape, data).unwrap()));
        }
        let cat = t.concat_channels(&ids).unwrap();
        let v = t.value(cat);
        let mut off = 0usize;
        for (i, c) in channels.iter().enumerate() {
            for b in 0..n {
                for ch in 0..*c {
                    for p in 0..hw * hw {
                        let total_c: usize = channels.iter().sum();
                        let got = v.data[((b * total_c + off + ch) * hw * hw) + p];
                        let want = originals[i][((b * c + ch) * hw * hw) + p];
                        prop_assert_eq!(got.to_bits(), want.to_bits());
                    }
                }
            }
            off += c;
        }

        // Backward: grad of sum splits back to all-ones per source.
        let loss = t.sum(cat).unwrap();
        t.backward(loss).unwrap();
        for id in &ids {
            let g = t.grad(*id).unwrap();
            prop_assert!(g.data.iter().all(|v| *v == 1.0));
        }
    }

    /// Dense blocks have exactly M(M+1)/2 intra-block edges and every edge
    /// set matches its defining predicate.
    #[test]
    fn connectivity_patterns_match_predicates(m in 1usize..=16, span in 1usize..=8) {
        let dense = connectivity_edges(Connectivity::Dense, m).unwrap();
        prop_assert_eq!(dense.edge_count(), m * (m + 1) / 2);
        for (pattern, pred) in [
            (Connectivity::LastSpan(span), Box::new(move |s: usize, l: usize| l - s <= span) as Box<dyn Fn(usize, usize) -> bool>),
            (Connectivity::Parity, Box::new(|s: usize, l: usize| (l - s) % 2 == 1 || s + 1 == l)),
            (Connectivity::PowerOfTwo, Box::new(|s: usize, l: usize| (l - s).is_power_of_two())),
        ] {
            let got = connectivity_edges(pattern, m).unwrap();
            let mut want = Vec::new();
            for l in 1..=m {
                for s in 0..l {
                    if pred(s, l) {
                        want.push((s, l));
                    }
                }
            }
            want.sort_unstable_by_key(|(s, l)| (*l, *s));
            prop_assert_eq!(got.edges, want);
        }
    }

    /// Parameter counts rise monotonically in growth, bottleneck width,
    /// compression, and any block's layer count.
    #[test]
    fn parameter_monotonicity(
        m in 1usize..6,
        k in 4usize..20,
        mult in 1usize..5,
        theta_i in 0usize..3,
    ) {
        let theta = [0.4, 0.6, 0.8][theta_i];
        let base = NetworkSpec::cifar(m, k, theta, mult, 10);
        let p0 = cost::count_params(&base).unwrap();
        let bump = [
            NetworkSpec::cifar(m + 1, k, theta, mult, 10),
            NetworkSpec::cifar(m, k + 1, theta, mult, 10),
            NetworkSpec::cifar(m, k, theta, mult + 1, 10),
            NetworkSpec::cifar(m, k, (theta + 0.2).min(1.0), mult, 10),
        ];
        for b in bump {
            prop_assert!(cost::count_params(&b).unwrap() > p0, "{:?}", b);
        }
        // Closed form equals the graph audit on the drawn point.
        let g = build(&base).unwrap();
        prop_assert_eq!(p0, cost::params_from_graph(&g));
    }

    /// Every derivable plan verifies, and the input-channel law holds on the
    /// audited widths.
    #[test]
    fn plans_verify_for_random_blocks(
        m in 1usize..8,
        k in 2usize..10,
        k0_mult in 1usize..4,
        mult in 0usize..5,
        batch in 1usize..3,
    ) {
        let dims = BlockDims { m, k, k0: k0_mult * k, mult, h: 4, w: 4, batch };
        for strategy in Strategy::ALL {
            for mode in [PlanMode::Inference, PlanMode::Training] {
                let p = plan(strategy, &dims, mode, 4).unwrap();
                verify(&p).unwrap();
            }
        }
        let spec = {
            let mut s = NetworkSpec::cifar(m, k, 0.5, mult, 10);
            s.blocks = vec![m];
            s
        };
        let g = build(&spec).unwrap();
        for l in 1..=m {
            prop_assert_eq!(
                g.concat_width(0, l),
                densekit::graph::input_channels(2 * k, k, l)
            );
        }
    }
}
