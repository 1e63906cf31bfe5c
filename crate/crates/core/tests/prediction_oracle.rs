mod common;

use common::scenarios::*;
use common::*;
use stnngp::predict::{LawTarget, PredictionRequest, Predictor};
use stnngp::stmodel::StModel;

#[test]
fn three_scenarios_match_dense_conditioning_per_draw() {
    let start = std::time::Instant::now();
    for (seed, n, days, init) in oracle_instances() {
        let err = max_scenario_error(seed, n, days, init);
        assert!(err < 1e-8, "instance {seed} (n = {n}, days = {days}): max gap {err:e}");
    }
    assert!(start.elapsed().as_secs() < 60);
}

/// The simulated draws follow the per-draw laws: a single repeated
/// parameter draw gives Monte Carlo moments close to the exact ones.
#[test]
fn simulated_draws_have_the_exact_moments() {
    let c = case(11, 5, 6);
    let reps = 4000;
    let samples = samples_from(vec![c.draws[0].clone(); reps], &c.panel, vec![c.imputed[0].clone(); reps]);
    let model = StModel::new(&c.domain, &c.design);
    let pred = Predictor::new(model, &samples, &c.panel).with_neighbors(5).with_seed(3);
    let req = PredictionRequest {
        new_sites: vec![c.site.clone()],
        horizon: HORIZON,
        future_design: Some(c.future.clone()),
    };
    let out = pred.run(&req).unwrap();
    let mut checks = vec![(LawTarget::Site(&c.site), "new", 2), (LawTarget::Site(&c.site), "new", 7)];
    checks.push((LawTarget::Station { index: 2, future_design: &c.future }, "", 7));
    for (target, id, day) in checks {
        let id = if id.is_empty() { c.domain.locations()[2].id.clone() } else { id.to_string() };
        let (m, v) = pred.draw_law(0, target, day).unwrap();
        let d = &out.get(&id, day).unwrap().draws;
        let se = (v / reps as f64).sqrt();
        assert!((d.summary.mean - m).abs() < 4.5 * se, "{id} day {day}: {} vs {m}", d.summary.mean);
        assert!((d.variance() / v - 1.0).abs() < 0.1, "{id} day {day}: {} vs {v}", d.variance());
    }
}
