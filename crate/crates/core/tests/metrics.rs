mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use whetstone::encoding::dead_output_classes;
use whetstone::metrics::{activity_profile, dead_node_census, gini, gini_pairwise, profiled_layers};
use whetstone::network::LayerSpec;
use whetstone::{Layer, NHotCode, Network, NetworkConfig, Tensor};

proptest! {
    #[test]
    fn sorted_gini_matches_double_sum(values in prop::collection::vec(0.0f64..10.0, 1..200)) {
        prop_assume!(values.iter().sum::<f64>() > 0.0);
        let a = gini(&values).unwrap();
        let b = gini_pairwise(&values).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn gini_is_scale_invariant(values in prop::collection::vec(0.0f64..10.0, 1..100), c in 1e-3f64..1e3) {
        prop_assume!(values.iter().sum::<f64>() > 0.0);
        let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
        prop_assert!((gini(&values).unwrap() - gini(&scaled).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn gini_ignores_order(mut values in prop::collection::vec(0.0f64..10.0, 2..50)) {
        prop_assume!(values.iter().sum::<f64>() > 0.0);
        let a = gini_pairwise(&values).unwrap();
        values.reverse();
        prop_assert!((a - gini_pairwise(&values).unwrap()).abs() <= 1e-12);
    }

    /// The population decoder picks the class a softmax over block sums
    /// would rank first.
    #[test]
    fn decoding_agrees_with_softmax_argmax(seed in any::<u64>(), classes in 2usize..12, n in 1usize..6) {
        let code = NHotCode::new(classes, n).unwrap();
        let mut r = rng(seed);
        let row: Vec<f32> = (0..code.width()).map(|_| r.random_range(-3.0..3.0)).collect();
        let sums: Vec<f64> = row.chunks(n).map(|b| b.iter().map(|&v| v as f64).sum()).collect();
        let max = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sums.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let best = (0..classes).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
        prop_assert_eq!(code.decode_row(&row), best);
    }
}

#[test]
fn single_holder_has_gini_three_quarters() {
    assert!((gini(&[1.0, 0.0, 0.0, 0.0]).unwrap() - 0.75).abs() < 1e-12);
    assert!((gini_pairwise(&[1.0, 0.0, 0.0, 0.0]).unwrap() - 0.75).abs() < 1e-12);
}

fn dense_net(seed: u64) -> Network {
    let config = NetworkConfig {
        input_shape: vec![12],
        layers: vec![
            LayerSpec::dense(16),
            LayerSpec::SpikingBrelu,
            LayerSpec::dense(9),
            LayerSpec::SpikingBrelu,
            LayerSpec::SoftmaxDecode { classes: 3 },
        ],
    };
    let mut net = Network::build(&config, seed).unwrap();
    let mut r = rng(seed);
    for l in net.layers_mut() {
        if let Layer::Dense { bias, .. } = l {
            for v in bias.data_mut() {
                *v = r.random_range(0.2..0.8);
            }
        }
    }
    net
}

fn set_bias(net: &mut Network, layer: usize, units: impl IntoIterator<Item = usize>, value: f32) {
    let Layer::Dense { bias, .. } = &mut net.layers_mut()[layer] else {
        panic!()
    };
    for u in units {
        bias.data_mut()[u] = value;
    }
}

#[test]
fn sharpened_means_are_spike_fractions() {
    let net = dense_net(3).fully_sharpened();
    let n = 37;
    let images = random_tensor(&mut rng(3), &[n, 12], 0.0, 1.0);
    let profile = activity_profile(&net, &images, 10).unwrap();
    assert_eq!(profile.samples, n);
    assert_eq!(
        profile.layers.iter().map(|l| l.layer).collect::<Vec<_>>(),
        profiled_layers(&net).iter().map(|p| p.0).collect::<Vec<_>>()
    );
    for m in profile.pooled() {
        let k = m * n as f64;
        assert!((k - k.round()).abs() < 1e-9, "{m} is not k/{n}");
    }
}

#[test]
fn profile_means_match_direct_average() {
    let net = dense_net(4);
    let images = random_tensor(&mut rng(4), &[25, 12], 0.0, 1.0);
    let profile = activity_profile(&net, &images, 7).unwrap();
    let acts = net.forward_inference(&images).unwrap();
    for layer in &profile.layers {
        let a: &Tensor = &acts[layer.layer];
        let width = layer.means.len();
        for (j, &m) in layer.means.iter().enumerate() {
            let direct: f64 = a.rows().map(|r| r[j] as f64).sum::<f64>() / 25.0;
            assert!((m - direct).abs() < 1e-6, "unit {j} of {width}");
        }
    }
}

#[test]
fn silenced_hidden_neuron_is_counted_dead() {
    let mut net = dense_net(5);
    let images = random_tensor(&mut rng(5), &[50, 12], 0.0, 1.0);
    let before = dead_node_census(&activity_profile(&net, &images, 50).unwrap());
    set_bias(&mut net, 0, [4, 11], -10.0);
    let after = dead_node_census(&activity_profile(&net, &images, 50).unwrap());
    assert_eq!(after[0], before[0] + 2);
}

#[test]
fn silenced_output_block_is_a_dead_class() {
    let mut net = dense_net(6).fully_sharpened();
    let images = random_tensor(&mut rng(6), &[50, 12], 0.0, 1.0);
    assert!(dead_output_classes(&net, &images, 16).unwrap().is_empty());
    set_bias(&mut net, 2, 3..6, -10.0);
    let dead = dead_output_classes(&net, &images, 16).unwrap();
    assert_eq!(dead.into_iter().collect::<Vec<_>>(), vec![1]);
}
