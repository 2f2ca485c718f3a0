use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn projection(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn conv_scaling_kernel() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]), false);
    let w = g.leaf(t(&[1, 1, 1], &[2.0]), false);
    let y = g.conv1d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);

    let id = g.leaf(t(&[1, 1, 1], &[1.0]), false);
    let y = g.conv1d(x, id, None, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let x8 = g.leaf(Tensor::zeros(vec![1, 1, 8]), false);
    let w3 = g.leaf(Tensor::zeros(vec![2, 1, 3]), false);
    let y = g.conv1d(x8, w3, None, 4, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2]);

    let bad = g.leaf(Tensor::zeros(vec![2, 3, 3]), false);
    assert!(matches!(g.conv1d(x8, bad, None, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn elementwise_values() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 3], &[0.0, -1e3, 2.0]), false);
    let e = g.elu(x);
    assert_eq!(g.value(e).data()[0], 0.0);
    assert!((g.value(e).data()[1] + 1.0).abs() < 1e-12);
    assert_eq!(g.value(e).data()[2], 2.0);
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data()[0], 0.5);
}

#[test]
fn shape_ops() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 3], &[1.0, 2.0, 3.0]), false);
    let u = g.upsample_nearest(x, 4).unwrap();
    assert_eq!(g.value(u).shape(), &[1, 1, 12]);
    assert_eq!(&g.value(u).data()[..5], &[1.0, 1.0, 1.0, 1.0, 2.0]);

    let a = g.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let b = g.leaf(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]), false);
    let c = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 3, 2]);
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
    assert!(g.add(a, b).is_err());
    let bad = g.leaf(Tensor::zeros(vec![2, 1, 3]), false);
    assert!(g.concat_channels(a, bad).is_err());
}

#[test]
fn batchnorm_constant_batch_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2, 2, 3], vec![3.0; 12]).unwrap(), false);
    let gamma = g.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), false);
    let beta = g.leaf(Tensor::zeros(vec![2]), false);
    let mut stats = RunningStats::new(2);
    let y = g.batchnorm1d(x, gamma, beta, &mut stats, Mode::Train).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    // momentum 0.1 toward the batch mean of 3
    assert!((stats.mean[0] - 0.3).abs() < 1e-12);
    assert!((stats.var[0] - 0.9).abs() < 1e-12);

    let y = g.batchnorm1d(x, gamma, beta, &mut stats, Mode::Eval).unwrap();
    let expect = (3.0 - 0.3) / (0.9f64 + BATCHNORM_EPS).sqrt();
    assert!((g.value(y).data()[0] - expect).abs() < 1e-12);
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 1, 1000], vec![1.0; 1000]).unwrap(), true);
    assert_eq!(g.dropout(x, 0.1, Mode::Eval, &mut rng).unwrap(), x);
    let y = g.dropout(x, 0.1, Mode::Train, &mut rng).unwrap();
    let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
    assert!((50..150).contains(&zeros));
    let s = g.weighted_sum(y, vec![1.0; 1000]).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), g.value(y).data());
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0), true);
    let s = g.sigmoid(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]), false);
    let w = g.leaf(t(&[1, 1, 3], &[0.1, 0.2, 0.3]), true);
    let y = g.conv1d(x, w, None, 1, 1).unwrap();
    let s = g.weighted_sum(y, vec![1.0; 4]).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).is_none());
    assert!(grads.get(w).is_some());
    assert_eq!(grads.len(), 1);
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2], &[1.0, 2.0]), true);
    let y = g.elu(x);
    assert!(matches!(g.backward(y), Err(Error::Shape(_))));
}

#[test]
fn conv_weight_gradient_on_small_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random(&[1, 1, 8], &mut rng), random(&[1, 1, 3], &mut rng)];
    let proj = projection(8, 7);
    let report = gradcheck::check(
        &inputs,
        |g, ids| {
            let y = g.conv1d(ids[0], ids[1], None, 1, 1)?;
            g.weighted_sum(y, proj.clone())
        },
        None,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

/// Every differentiable op against central differences over ten seeds.
#[test]
fn op_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let check =
            |name: &str, inputs: Vec<Tensor>, out_len: usize, f: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>| {
                let proj = projection(out_len, seed);
                let report = gradcheck::check(
                    &inputs,
                    |g, ids| {
                        let y = f(g, ids)?;
                        g.weighted_sum(y, proj.clone())
                    },
                    None,
                    1e-6,
                )
                .unwrap();
                assert!(report.max_rel_err < 1e-3, "{name} seed {seed}: {report:?}");
            };

        check(
            "conv1d stride 2 + bias",
            vec![random(&[2, 3, 11], &mut rng), random(&[4, 3, 5], &mut rng), random(&[4], &mut rng)],
            2 * 4 * 6,
            &|g, ids| g.conv1d(ids[0], ids[1], Some(ids[2]), 2, 1),
        );
        check(
            "conv1d depthwise",
            vec![random(&[2, 4, 9], &mut rng), random(&[4, 1, 4], &mut rng)],
            2 * 4 * 9,
            &|g, ids| g.conv1d(ids[0], ids[1], None, 1, 4),
        );
        check("elu", vec![random(&[2, 2, 6], &mut rng)], 24, &|g, ids| Ok(g.elu(ids[0])));
        check("sigmoid", vec![random(&[2, 2, 6], &mut rng)], 24, &|g, ids| Ok(g.sigmoid(ids[0])));
        check("add", vec![random(&[1, 2, 5], &mut rng), random(&[1, 2, 5], &mut rng)], 10, &|g, ids| {
            g.add(ids[0], ids[1])
        });
        check("concat", vec![random(&[2, 1, 4], &mut rng), random(&[2, 3, 4], &mut rng)], 32, &|g, ids| {
            g.concat_channels(ids[0], ids[1])
        });
        check("upsample", vec![random(&[2, 2, 3], &mut rng)], 48, &|g, ids| g.upsample_nearest(ids[0], 4));
        for mode in [Mode::Train, Mode::Eval] {
            check(
                "batchnorm",
                vec![random(&[3, 2, 5], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)],
                30,
                &|g, ids| {
                    let mut stats = RunningStats { mean: vec![0.1, -0.2], var: vec![0.8, 1.3], momentum: 0.1 };
                    g.batchnorm1d(ids[0], ids[1], ids[2], &mut stats, mode)
                },
            );
        }
        check(
            "conv-bn-elu block",
            vec![
                random(&[2, 2, 16], &mut rng),
                random(&[3, 2, 5], &mut rng),
                random(&[3], &mut rng),
                random(&[3], &mut rng),
            ],
            2 * 3 * 4,
            &|g, ids| {
                let mut stats = RunningStats::new(3);
                let c = g.conv1d(ids[0], ids[1], None, 4, 1)?;
                let b = g.batchnorm1d(c, ids[2], ids[3], &mut stats, Mode::Train)?;
                Ok(g.elu(b))
            },
        );
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 32], &mut rng);
    let w = random(&[5, 3, 7], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), false);
        let wi = g.leaf(w.clone(), false);
        let y = g.conv1d(xi, wi, None, 4, 1).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
