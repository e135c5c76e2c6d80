use nas_core::distill::LogitsBatch;
use nas_core::space::{load_space, sample_max, sample_min, sample_random};
use nas_core::supernet::{
    backward, forward, gen_dataset, init_supernet, make_view, slice_standalone, Batch,
    DatasetConfig, SupernetParams,
};
use nas_core::{Error, SpaceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough for a full central-difference sweep, but still exercising
/// every layer type: kernel 1 and 3 (cropped), SE, stride 2 with odd
/// lengths, residual and non-residual blocks.
const TINY: &str = r#"{
  "resolutions": [6, 8],
  "stem_widths": [2, 3],
  "stages": [
    { "widths": [2, 3], "depths": [1, 2], "kernels": [1, 3], "expands": [1, 2], "use_se": true, "stride": 2 },
    { "widths": [3, 4], "depths": [1, 2], "kernels": [3], "expands": [1, 2], "use_se": false, "stride": 1 }
  ],
  "head_widths": [4, 5],
  "n_classes": 3
}"#;

fn tiny() -> SpaceSpec {
    load_space(TINY).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, batch: usize, len: usize) -> Batch<f64> {
    Batch::new(
        (0..batch * len)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect(),
        batch,
        len,
    )
}

fn randomize(params: &mut SupernetParams<f64>, rng: &mut ChaCha8Rng) {
    // non-zero biases so that every bias gradient is exercised
    for v in params.data.iter_mut() {
        *v = rng.random_range(-0.8..0.8);
    }
}

fn weighted_sum(logits: &LogitsBatch<f64>, r: &[f64]) -> f64 {
    logits.values.iter().zip(r).map(|(a, b)| a * b).sum()
}

#[test]
fn tiny_space_is_small() {
    let spec = tiny();
    let p = init_supernet::<f64>(&spec, 0);
    assert!(p.param_count() <= 500, "{}", p.param_count());
}

#[test]
fn finite_difference_gradients() {
    let spec = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut params = init_supernet::<f64>(&spec, 0);
    let eps = 1e-6;
    let mut archs = vec![sample_min(&spec), sample_max(&spec)];
    archs.extend((0..6).map(|s| sample_random(&spec, s)));
    for arch in archs {
        let view = make_view(&spec, &params, &arch).unwrap();
        // keep every rectifier input clear of its kink
        let (batch, r) = loop {
            randomize(&mut params, &mut rng);
            let batch = random_batch(&mut rng, 3, view.resolution);
            let (_, cache) = forward(&params, &view, &batch).unwrap();
            if cache.min_abs_relu_input() > 1e-3 {
                let r: Vec<f64> = (0..3 * spec.n_classes)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                break (batch, r);
            }
        };
        let (logits, cache) = forward(&params, &view, &batch).unwrap();
        let grads = backward(
            &params,
            &view,
            &cache,
            &LogitsBatch::new(r.clone(), 3, spec.n_classes),
        )
        .unwrap();
        let mask = view.coordinate_mask();
        let mut probe = params.clone();
        let mut checked = 0;
        for i in 0..params.data.len() {
            if !mask[i] {
                assert_eq!(
                    grads.data[i], 0.0,
                    "{arch}: gradient outside the subnet at {i}"
                );
                continue;
            }
            let w = params.data[i];
            probe.data[i] = w + eps;
            let up = weighted_sum(&forward(&probe, &view, &batch).unwrap().0, &r);
            probe.data[i] = w - eps;
            let down = weighted_sum(&forward(&probe, &view, &batch).unwrap().0, &r);
            probe.data[i] = w;
            let num = (up - down) / (2.0 * eps);
            let ana = grads.data[i];
            let tol = 1e-4 * ana.abs().max(num.abs()) + 1e-7;
            assert!(
                (ana - num).abs() <= tol,
                "{arch} param {i}: analytic {ana} numeric {num}"
            );
            checked += 1;
        }
        assert_eq!(checked, view.param_count());
        assert!(weighted_sum(&logits, &r).is_finite());
    }
}

#[test]
fn shared_forward_matches_dense_copy() {
    let spec = SpaceSpec::desk();
    let params = init_supernet::<f64>(&spec, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for a in 0..100 {
        let arch = match a {
            0 => sample_min(&spec),
            1 => sample_max(&spec),
            _ => sample_random(&spec, 1000 + a),
        };
        let view = make_view(&spec, &params, &arch).unwrap();
        let dense = slice_standalone(&params, &view);
        assert_eq!(dense.param_count(), view.param_count());
        for _ in 0..10 {
            let batch = random_batch(&mut rng, 2, view.resolution);
            let (shared, _) = forward(&params, &view, &batch).unwrap();
            let reference = dense.forward(&batch).unwrap();
            for (s, d) in shared.values.iter().zip(&reference.values) {
                let err = (s - d).abs() / d.abs().max(1.0);
                worst = worst.max(err);
            }
        }
    }
    assert!(worst <= 1e-6, "max deviation {worst}");
}

#[test]
fn f32_and_f64_agree() {
    let spec = SpaceSpec::desk();
    let p64 = init_supernet::<f64>(&spec, 2);
    let p32: SupernetParams<f32> = p64.cast();
    let (_, val) = gen_dataset(&DatasetConfig {
        n_train: 8,
        n_val: 16,
        ..Default::default()
    })
    .unwrap();
    let idx: Vec<usize> = (0..16).collect();
    for arch in [sample_min(&spec), sample_max(&spec)] {
        let view = make_view(&spec, &p64, &arch).unwrap();
        let (a, _) = forward(&p64, &view, &val.batch(&idx, view.resolution)).unwrap();
        let (b, _) = forward(&p32, &view, &val.batch(&idx, view.resolution)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - *y as f64).abs() <= 1e-3 * x.abs().max(1.0));
        }
    }
}

#[test]
fn zero_input_gives_zero_logits_at_init() {
    let spec = SpaceSpec::desk();
    let params = init_supernet::<f32>(&spec, 0);
    for arch in [
        sample_min(&spec),
        sample_max(&spec),
        sample_random(&spec, 3),
    ] {
        let view = make_view(&spec, &params, &arch).unwrap();
        let (logits, _) = forward(
            &params,
            &view,
            &Batch::new(vec![0.0; 4 * view.resolution], 4, view.resolution),
        )
        .unwrap();
        assert!(logits.values.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn forward_is_deterministic() {
    let spec = SpaceSpec::desk();
    let params = init_supernet::<f32>(&spec, 0);
    let (_, val) = gen_dataset(&DatasetConfig {
        n_train: 8,
        n_val: 64,
        ..Default::default()
    })
    .unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let view = make_view(&spec, &params, &sample_random(&spec, 12)).unwrap();
    let batch = val.batch(&idx, view.resolution);
    let (a, _) = forward(&params, &view, &batch).unwrap();
    let (b, _) = forward(&params, &view, &batch).unwrap();
    assert_eq!(a, b);
}

#[test]
fn golden_logits() {
    let spec = SpaceSpec::desk();
    let params = init_supernet::<f64>(&spec, 0);
    let (_, val) = gen_dataset(&DatasetConfig {
        n_train: 8,
        n_val: 8,
        ..Default::default()
    })
    .unwrap();
    let view = make_view(&spec, &params, &sample_min(&spec)).unwrap();
    let (logits, _) = forward(&params, &view, &val.batch(&[0], view.resolution)).unwrap();
    let golden: [f64; 8] = [
        1.3777759213706589,
        -1.4521036631512958,
        -0.1717012654881641,
        0.2701367253510221,
        -1.244464754965843,
        0.015802143557903,
        0.1451642985094553,
        -0.34186921400093695,
    ];
    for (a, g) in logits.values.iter().zip(golden) {
        assert!((a - g).abs() < 1e-9, "{:?}", logits.values);
    }
}

#[test]
fn gradient_support_is_exactly_the_slice_plan() {
    let spec = SpaceSpec::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = init_supernet::<f64>(&spec, 1);
    // Strictly positive weights, biases and inputs keep every rectifier on,
    // so every coordinate the subnet reads must receive a non-zero gradient.
    for t in params.layout.clone().tensors.iter() {
        for v in &mut params.data[t.offset..t.offset + t.len()] {
            *v = if t.is_bias {
                0.1
            } else {
                rng.random_range(0.5..1.5) / t.fan_in as f64
            };
        }
    }
    for seed in 0..20 {
        let view = make_view(&spec, &params, &sample_random(&spec, seed)).unwrap();
        let batch = Batch::new(
            (0..4 * view.resolution)
                .map(|_| rng.random_range(0.1..1.0))
                .collect(),
            4,
            view.resolution,
        );
        let (_, cache) = forward(&params, &view, &batch).unwrap();
        assert!(cache.min_abs_relu_input() > 0.0);
        let r = LogitsBatch::new(
            (0..4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            4,
            8,
        );
        let support = backward(&params, &view, &cache, &r).unwrap().support();
        assert_eq!(support, view.coordinate_mask(), "arch seed {seed}");
    }
}

#[test]
fn cache_from_other_arch_is_stale() {
    let spec = SpaceSpec::desk();
    let params = init_supernet::<f32>(&spec, 1);
    let a = make_view(&spec, &params, &sample_min(&spec)).unwrap();
    let b = make_view(&spec, &params, &sample_max(&spec)).unwrap();
    let (_, cache) = forward(
        &params,
        &a,
        &Batch::new(vec![0.5; 2 * a.resolution], 2, a.resolution),
    )
    .unwrap();
    let err = backward(&params, &b, &cache, &LogitsBatch::zeros(2, 8)).unwrap_err();
    assert!(matches!(err, Error::StaleCache(_)));
}

#[test]
fn wrong_resolution_is_rejected() {
    let spec = SpaceSpec::desk();
    let params = init_supernet::<f32>(&spec, 1);
    let a = make_view(&spec, &params, &sample_min(&spec)).unwrap();
    assert!(forward(&params, &a, &Batch::new(vec![0.0; 7], 1, 7)).is_err());
}
