use whetstone::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use whetstone::Tensor;

const TARGET: [f32; 4] = [1.0, -2.0, 0.5, 3.0];
const CURVATURE: [f32; 4] = [1.0, 4.0, 0.5, 2.0];

/// `f(w) = ½ Σ c_i (w_i − t_i)²`
fn loss(w: &[f32]) -> f64 {
    w.iter()
        .zip(TARGET.iter().zip(&CURVATURE))
        .map(|(&w, (&t, &c))| 0.5 * c as f64 * ((w - t) as f64).powi(2))
        .sum()
}

fn minimise(kind: OptimizerKind, steps: usize) -> (Vec<f64>, Vec<f32>) {
    let mut opt = Optimizer::new(&OptimizerConfig::new(kind)).unwrap();
    let mut w = Tensor::zeros(&[4]);
    let mut trace = vec![loss(w.data())];
    for _ in 0..steps {
        let g: Vec<f32> = w
            .data()
            .iter()
            .zip(TARGET.iter().zip(&CURVATURE))
            .map(|(&w, (&t, &c))| c * (w - t))
            .collect();
        w.zero_grad();
        w.accumulate_grad(&g).unwrap();
        opt.step(vec![("w".into(), &mut w)]).unwrap();
        trace.push(loss(w.data()));
    }
    (trace, w.data().to_vec())
}

#[test]
fn every_optimizer_descends_a_convex_quadratic() {
    for kind in OptimizerKind::ALL {
        let (trace, _) = minimise(kind, 3000);
        let (first, last) = (trace[0], *trace.last().unwrap());
        assert!(last < 0.1 * first, "{kind}: {first} -> {last}");
        // the best loss seen in the last tenth never exceeds the early loss
        let tail = trace[2700..].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(tail <= trace[300], "{kind}");
    }
}

#[test]
fn sgd_converges_to_the_minimum() {
    let (_, w) = minimise(OptimizerKind::Sgd, 3000);
    for (a, b) in w.iter().zip(TARGET) {
        assert!((a - b).abs() < 1e-3, "{w:?}");
    }
}

#[test]
fn updates_are_deterministic() {
    for kind in OptimizerKind::ALL {
        let (a, wa) = minimise(kind, 200);
        let (b, wb) = minimise(kind, 200);
        assert_eq!(a, b);
        assert_eq!(
            wa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            wb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn config_round_trips_through_toml() {
    for kind in OptimizerKind::ALL {
        let c = OptimizerConfig::new(kind).with_learning_rate(0.5);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<OptimizerConfig>(&text).unwrap(), c);
        assert_eq!(kind.name().parse::<OptimizerKind>().unwrap(), kind);
    }
}
