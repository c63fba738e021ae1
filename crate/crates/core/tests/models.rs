mod common;

use common::*;
use mgslab::{
    anomaly_score, build, init, mgs_kernel, trace_metric, trace_metric_jacobian, train, ArchSpec, DataSource,
    ForwardContext, GraphBuilder, InitSpec, LossKind, ParamVector, Targets, Tensor, TrainConfig,
};

#[test]
fn linear_forward_is_a_dot_product() {
    let g = linear(2);
    let p = ParamVector::new(vec![2.0, -1.0], g.layout().to_vec()).unwrap();
    let x = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
    assert_eq!(g.forward(&p, &x, &ForwardContext::eval()).unwrap().data(), &[2.0]);
}

#[test]
fn mlp_forward_matches_a_hand_rolled_oracle() {
    let g = mlp(5, &[7], 3, 0.0);
    let mut r = rng(41);
    let p = random_params(&g, &mut r, 1.0);
    let x = random_batch(&g, &mut r, 4);
    let out = g.forward(&p, &x, &ForwardContext::eval()).unwrap();
    let (w1, b1, w2, b2) = (p.slot_values(0), p.slot_values(1), p.slot_values(2), p.slot_values(3));
    for i in 0..4 {
        let xi = x.row(i);
        let h: Vec<f64> = (0..7)
            .map(|j| {
                let z: f64 = (0..5).map(|k| xi[k] * w1[k * 7 + j]).sum::<f64>() + b1[j];
                z.max(0.0)
            })
            .collect();
        for c in 0..3 {
            let want: f64 = (0..7).map(|j| h[j] * w2[j * 3 + c]).sum::<f64>() + b2[c];
            let got = out.row(i)[c];
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn mse_closed_form_and_perfect_fit() {
    let g = linear(1);
    let ctx = ForwardContext::eval();
    let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let y = Targets::Values(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let p = ParamVector::new(vec![0.0], g.layout().to_vec()).unwrap();
    let (l, grad) = g.loss_and_grad(&p, &x, &y, LossKind::MeanSquaredError, &ctx).unwrap();
    assert_eq!((l, grad.values()[0]), (1.0, -2.0));

    let g = mlp(3, &[4], 2, 0.0);
    let mut r = rng(42);
    let p = random_params(&g, &mut r, 1.0);
    let x = random_batch(&g, &mut r, 5);
    let fit = Targets::Values(g.forward(&p, &x, &ctx).unwrap());
    let (l, grad) = g.loss_and_grad(&p, &x, &fit, LossKind::MeanSquaredError, &ctx).unwrap();
    assert_eq!(l, 0.0);
    assert!(grad.values().iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-12);
}

#[test]
fn fcn_parameter_counts() {
    assert_eq!(build(&ArchSpec::fcn(1, 4), &[2], 2).unwrap().num_params(), 22);
    let g = build(&ArchSpec::fcn(6, 300), &[784], 10).unwrap();
    let widths = [784, 300, 300, 300, 300, 300, 300, 10];
    let want: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    assert_eq!(g.num_params(), want);
    let from_layout: usize = g.layout().iter().map(|s| s.shape.iter().product::<usize>()).sum();
    assert_eq!(from_layout, want);
}

#[test]
fn he_init_has_the_target_spread() {
    let g = build(&ArchSpec::fcn(1, 250), &[400], 2).unwrap();
    let p = init(&g, InitSpec { seed: 3 }).unwrap();
    let w = p.slot_values(0);
    assert_eq!(w.len(), 100_000);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
    let target = (2.0f64 / 400.0).sqrt();
    assert!((std / target - 1.0).abs() < 0.05, "{std} vs {target}");
    assert!(p.slot_values(1).iter().all(|&b| b == 0.0));
}

#[test]
fn dropout_preserves_the_expected_output_of_a_linear_layer() {
    let g = GraphBuilder::new(&[6])
        .unwrap()
        .dense("h", 6)
        .unwrap()
        .dropout("h.drop", 0.4)
        .unwrap()
        .dense("out", 1)
        .unwrap()
        .build()
        .unwrap();
    let mut r = rng(43);
    let p = random_params(&g, &mut r, 1.0);
    let x = random_batch(&g, &mut r, 1);
    let clean = g.forward(&p, &x, &ForwardContext::eval()).unwrap().data()[0];
    let draws = 20_000;
    let outs: Vec<f64> = (0..draws)
        .map(|step| g.forward(&p, &x, &ForwardContext::train(9, step)).unwrap().data()[0])
        .collect();
    let mean = outs.iter().sum::<f64>() / draws as f64;
    let var = outs.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / (draws - 1) as f64;
    let se = (var / draws as f64).sqrt();
    assert!((mean - clean).abs() < 4.0 * se, "{mean} vs {clean} (se {se})");
}

#[test]
fn anomaly_score_is_the_eval_kernel_trace() {
    let g = mlp(2, &[6], 2, 0.3);
    let mut r = rng(44);
    let p = random_params(&g, &mut r, 1.0);
    let x = random_batch(&g, &mut r, 5);
    let s = anomaly_score(&g, &p, &x).unwrap();
    assert_eq!(s, anomaly_score(&g, &p, &x).unwrap());
    let j = g.per_sample_jacobian(&p, &x, &ForwardContext::eval()).unwrap();
    assert_eq!(s, trace_metric_jacobian(&j));
    let k = mgs_kernel(&j).unwrap();
    assert!((s - trace_metric(&k)).abs() <= 1e-12 * s);
}

#[test]
fn far_batches_score_higher_on_trained_two_circles() {
    let source = DataSource::two_circles();
    let mut higher = 0;
    for seed in 0..20 {
        let (tr, te) = source.load(400, 0.0, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            seed,
            arch: ArchSpec::fcn(2, 32),
            metric_samples: 5,
            ..TrainConfig::default()
        };
        let run = train(&cfg, &tr, &te).unwrap();
        let idx: Vec<usize> = (0..32).map(|i| i * 31).collect();
        let near = te.inputs.select_rows(&idx);
        let far_data: Vec<f64> = near.data().iter().map(|v| 10.0 * v).collect();
        let far = Tensor::new(near.shape().to_vec(), far_data).unwrap();
        let (g, p) = (&run.state.graph, &run.state.params);
        if anomaly_score(g, p, &far).unwrap() > anomaly_score(g, p, &near).unwrap() {
            higher += 1;
        }
    }
    assert!(higher >= 18, "{higher}/20");
}
