use serde::Deserialize;
use std::collections::BTreeMap;
use xformlab_core::recon::{reconstruct, simulate_cauchy_data, DeskFixture, ReconstructOptions};

#[derive(Deserialize)]
struct Baseline {
    relative_l2_error: f64,
    threshold: f64,
}

fn baselines() -> BTreeMap<String, Baseline> {
    serde_json::from_str(include_str!("fixtures/reconstruction_baselines.json")).unwrap()
}

#[test]
fn desk_fixtures_meet_thresholds_and_baselines() {
    let stored = baselines();
    for fixture in DeskFixture::ALL {
        let result = fixture.run().unwrap();
        let err = result.relative_l2_error.unwrap();
        let base = &stored[fixture.name()];
        assert_eq!(base.threshold, fixture.threshold());
        assert!(err <= fixture.threshold(), "{} error {err}", fixture.name());
        assert!(
            err <= base.relative_l2_error * 1.1 + 1e-4,
            "{} regressed: {err} vs baseline {}",
            fixture.name(),
            base.relative_l2_error
        );
        assert!(result.objective_history.windows(2).all(|w| w[1] <= w[0]));
    }
}

fn roughness(p: &[f64], h: f64) -> f64 {
    p.windows(2).map(|w| (w[1] - w[0]).powi(2) / h).sum()
}

#[test]
fn stronger_regularization_gives_smoother_estimates() {
    let (spec, truth, init) = DeskFixture::PositiveInitial.build().unwrap();
    let data = simulate_cauchy_data(&spec, &truth).unwrap();
    let h = spec.sgrid().h();
    let mut previous = f64::INFINITY;
    for reg in [1e-11, 1e-9, 1e-7] {
        let options = ReconstructOptions {
            reg_weight: reg,
            max_iters: 600,
            ..ReconstructOptions::default()
        };
        let result = reconstruct(&data, &spec, &options, &init).unwrap();
        let r = roughness(result.p_estimate.values(), h);
        println!("reg {reg:e}: roughness {r:.6}");
        assert!(r <= previous * 1.02, "reg {reg}: roughness {r} vs {previous}");
        previous = r;
    }
}
