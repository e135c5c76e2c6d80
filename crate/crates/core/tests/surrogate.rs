use nas_core::latsim::{build_latency_dataset, DeviceProfile};
use nas_core::space::sample_random;
use nas_core::surrogate::{
    encode_features, evaluate, fit, rank_metrics, sample_efficiency_sweep, select_best,
    summarize_sweep, sweep_csv, DeviceData, FeatureVector, FittedSurrogate, ModelState, Node,
    SurrogateHyper, SurrogateKind,
};
use nas_core::SpaceSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nx_data(n: usize) -> DeviceData {
    let spec = SpaceSpec::desk();
    let rows = build_latency_dataset(&spec, n, &[DeviceProfile::nx()], 0).unwrap();
    DeviceData::from_samples(&spec, &rows, "nx").unwrap()
}

#[test]
fn rbf_recalls_its_training_points() {
    let d = nx_data(400);
    let m = fit(
        SurrogateKind::Rbf,
        &d.x,
        &d.y,
        &SurrogateHyper::default(),
        0,
        "nx",
    )
    .unwrap();
    let mean = d.y.iter().sum::<f64>() / d.len() as f64;
    for (x, y) in d.x.iter().zip(&d.y) {
        assert!((m.predict(x).unwrap() - y).abs() <= 1e-4 * mean);
    }
}

#[test]
fn constant_targets_give_constant_predictions() {
    let d = nx_data(60);
    let c = 7.25;
    let y = vec![c; d.len()];
    let probes: Vec<FeatureVector> = (0..20)
        .map(|i| d.x[i].iter().map(|v| (v + 0.37 * i as f64) % 1.0).collect())
        .collect();
    for kind in SurrogateKind::ALL {
        let m = fit(kind, &d.x, &y, &SurrogateHyper::default(), 3, "nx").unwrap();
        for p in probes.iter().chain(&d.x) {
            let v = m.predict(p).unwrap();
            assert!((v - c).abs() <= 1e-6, "{kind}: {v}");
        }
    }
}

#[test]
fn gp_fits_a_sine_curve() {
    // reference: tests/oracles/gp_sin.py (scikit-learn, same hyperparameter grid)
    let x: Vec<FeatureVector> = (0..20).map(|i| vec![i as f64 / 19.0]).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| (2.0 * std::f64::consts::PI * v[0]).sin())
        .collect();
    let m = fit(
        SurrogateKind::Gp,
        &x,
        &y,
        &SurrogateHyper::default(),
        0,
        "toy",
    )
    .unwrap();
    let ModelState::Gp(k) = &m.state else {
        panic!()
    };
    assert!((k.length_scale.unwrap() - 0.3157894736842105).abs() < 1e-12);
    assert_eq!(k.jitter, 1e-6);
    assert!((k.log_marginal_likelihood.unwrap() - 63.8102967321385).abs() < 1e-6);
    let xt: Vec<FeatureVector> = (0..19).map(|i| vec![(i as f64 + 0.5) / 19.0]).collect();
    let yt: Vec<f64> = xt
        .iter()
        .map(|v| (2.0 * std::f64::consts::PI * v[0]).sin())
        .collect();
    let pred = m.predict_many(&xt).unwrap();
    for (p, r) in pred
        .iter()
        .zip([0.164751598408248, 0.47596526187595284, 0.7356205301650733])
    {
        assert!((p - r).abs() < 1e-6);
    }
    let rmse = rank_metrics(&pred, &yt).unwrap().rmse;
    assert!(rmse < 0.05, "{rmse}");
}

#[test]
fn cart_predicts_its_leaf_mean() {
    let d = nx_data(300);
    let m = fit(
        SurrogateKind::Cart,
        &d.x,
        &d.y,
        &SurrogateHyper::default(),
        0,
        "nx",
    )
    .unwrap();
    let ModelState::Cart(tree) = &m.state else {
        panic!()
    };
    let leaf_of = |x: &[f64]| {
        let mut at = 0;
        loop {
            match tree.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    };
    let mut members: std::collections::HashMap<usize, Vec<f64>> = Default::default();
    for (x, y) in d.x.iter().zip(&d.y) {
        members.entry(leaf_of(x)).or_default().push(*y);
    }
    for (leaf, ys) in members {
        let Node::Leaf { value, count } = tree.nodes[leaf] else {
            unreachable!()
        };
        assert_eq!(count, ys.len());
        assert!(count >= 5);
        assert!((value - ys.iter().sum::<f64>() / count as f64).abs() < 1e-9);
    }
    assert!(tree.depth() <= 12);
}

#[test]
fn golden_predictions() {
    let spec = SpaceSpec::desk();
    let d = nx_data(300);
    let probe = encode_features(&spec, &sample_random(&spec, 4242));
    let golden = [
        (SurrogateKind::Mlp, 9.80834361672891),
        (SurrogateKind::Cart, 5.46704),
        (SurrogateKind::Rbf, 9.602703268692345),
        (SurrogateKind::Gp, 9.566213070097444),
    ];
    // frozen from the first run; the MLP tolerance absorbs SIMD-dependent rounding
    for (kind, want) in golden {
        let got = fit(kind, &d.x, &d.y, &SurrogateHyper::default(), 11, "nx")
            .unwrap()
            .predict(&probe)
            .unwrap();
        assert!((got - want).abs() <= 1e-6 * want, "{kind}: {got:?}");
    }
}

#[test]
fn refits_and_json_round_trips_are_identical() {
    let d = nx_data(200);
    for kind in SurrogateKind::ALL {
        let a = fit(kind, &d.x, &d.y, &SurrogateHyper::default(), 5, "nx").unwrap();
        let b = fit(kind, &d.x, &d.y, &SurrogateHyper::default(), 5, "nx").unwrap();
        assert_eq!(a, b);
        let c = FittedSurrogate::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a.predict_many(&d.x).unwrap(), c.predict_many(&d.x).unwrap());
        assert_eq!(c.meta.n, 200);
        assert_eq!(c.meta.device, "nx");
        assert_eq!(c.meta.data_hash.len(), 64);
    }
}

#[test]
fn predictions_are_invariant_to_batching() {
    let d = nx_data(120);
    for kind in SurrogateKind::ALL {
        let m = fit(kind, &d.x, &d.y, &SurrogateHyper::default(), 2, "nx").unwrap();
        let many = m.predict_many(&d.x).unwrap();
        for (x, p) in d.x.iter().zip(&many) {
            assert!((m.predict(x).unwrap() - p).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }
}

#[test]
fn rank_metrics_ignore_monotone_transforms_of_predictions() {
    let d = nx_data(300);
    let (train, test) = d.split(1);
    let m = fit(
        SurrogateKind::Cart,
        &train.x,
        &train.y,
        &SurrogateHyper::default(),
        0,
        "nx",
    )
    .unwrap();
    let p = m.predict_many(&test.x).unwrap();
    let e: Vec<f64> = p.iter().map(|v| (v / 10.0).exp()).collect();
    let (a, b) = (
        rank_metrics(&p, &test.y).unwrap(),
        rank_metrics(&e, &test.y).unwrap(),
    );
    assert_eq!((a.spearman, a.kendall), (b.spearman, b.kendall));
}

#[test]
fn sweep_table_shape_and_kernel_monotonicity() {
    let d = nx_data(3000);
    let (train, test) = d.split(0);
    let sizes = [100, 200, 500, 1000, 2400];
    let kinds = [SurrogateKind::Rbf, SurrogateKind::Gp];
    let rows =
        sample_efficiency_sweep(&train, &test, &kinds, &sizes, 3, &SurrogateHyper::default())
            .unwrap();
    assert_eq!(rows.len(), kinds.len() * sizes.len() * 3);
    assert_eq!(sweep_csv(&rows).lines().count(), rows.len() + 1);
    let summary = summarize_sweep(&rows);
    assert_eq!(summary.len(), kinds.len() * sizes.len());
    for kind in kinds {
        let curve: Vec<f64> = summary
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.rho_mean)
            .collect();
        for w in curve.windows(2) {
            assert!(w[1] >= w[0] - 0.01, "{kind}: {curve:?}");
        }
    }
    assert!(sample_efficiency_sweep(
        &train,
        &test,
        &kinds,
        &[2401],
        1,
        &SurrogateHyper::default()
    )
    .is_err());
}

#[test]
fn selection_on_a_linear_target() {
    // continuous features, so the target has no ties
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<FeatureVector> = (0..1000)
        .map(|_| (0..15).map(|_| rng.random::<f64>()).collect())
        .collect();
    let y: Vec<f64> = x.iter().map(|r| r[0]).collect();
    let lin = DeviceData {
        device: "synthetic".into(),
        x,
        y,
    };
    let (sel, model) = select_best(&lin, &SurrogateHyper::default(), 0).unwrap();
    for (kind, m) in &sel.scores {
        assert!(m.spearman >= 0.99, "{kind}: {m:?}");
    }
    assert_eq!(model.kind, sel.kind);
    let (again, _) = select_best(&lin, &SurrogateHyper::default(), 0).unwrap();
    assert_eq!(sel, again);
}

#[test]
fn selection_prefers_kernel_models_on_simulator_data() {
    let d = nx_data(3000);
    let (sel, model) = select_best(&d, &SurrogateHyper::default(), 0).unwrap();
    assert!(
        matches!(sel.kind, SurrogateKind::Rbf | SurrogateKind::Gp),
        "{sel:?}"
    );
    let (_, test) = d.split(0);
    assert!(evaluate(&model, &test).unwrap().spearman >= 0.95);
    assert!(select_best(&nx_data(99), &SurrogateHyper::default(), 0).is_err());
}

#[test]
fn dimension_mismatch_is_an_error() {
    let d = nx_data(50);
    let m = fit(
        SurrogateKind::Gp,
        &d.x,
        &d.y,
        &SurrogateHyper::default(),
        0,
        "nx",
    )
    .unwrap();
    assert!(m.predict(&[0.5; 3]).is_err());
    assert!(m.predict_many(&[vec![0.5; 16]]).is_err());
}
