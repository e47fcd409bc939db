use mtgc::analysis::MetricOptions;
use mtgc::engine::{apply_displacement, group_aggregate, train, CorrectionMode, Federation, TrainConfig};
use mtgc::param::ParamVector;
use mtgc::synth::{synth_heterogeneous_quadratics, SynthQuadratic};
use mtgc::task::NoiseSource;
use mtgc::topology::Topology;
use proptest::prelude::*;

fn vector(d: usize) -> impl Strategy<Value = ParamVector> {
    prop::collection::vec(-10.0f64..10.0, d).prop_map(ParamVector::from_vec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corrections_stay_balanced(
        groups in 1usize..4,
        clients in 1usize..4,
        e in 1usize..4,
        h in 1usize..4,
        seed in 0u64..100,
        shift in 0.0f64..5.0,
    ) {
        let topo = Topology::uniform(groups, clients).unwrap();
        let inst = synth_heterogeneous_quadratics(&topo, &SynthQuadratic::new(3, shift, shift, seed).with_spread(0.3).with_minibatch(1)).unwrap();
        let fed = Federation::new(topo, inst.tasks, NoiseSource::Minibatch).unwrap();
        let out = train(&fed, &TrainConfig::new(0.02, 5, e, h), seed, &ParamVector::zeros(3), &MetricOptions::default()).unwrap();
        for r in &out.trace.records {
            prop_assert!(r.z_sum_violation < 1e-12 && r.y_sum_violation < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn corrections_leave_the_average_unchanged_under_a_shared_hessian(
        groups in 1usize..4,
        clients in 1usize..4,
        seed in 0u64..100,
    ) {
        let topo = Topology::uniform(groups, clients).unwrap();
        let inst = synth_heterogeneous_quadratics(&topo, &SynthQuadratic::new(3, 2.0, 2.0, seed)).unwrap();
        let fed = Federation::new(topo, inst.tasks, NoiseSource::Gaussian { sigma: 0.2 }).unwrap();
        let cfg = TrainConfig::new(0.05, 4, 2, 3);
        let x0 = ParamVector::zeros(3);
        let full = train(&fed, &cfg, seed, &x0, &MetricOptions::default()).unwrap();
        let none = train(&fed, &cfg.with_mode(CorrectionMode::None), seed, &x0, &MetricOptions::default()).unwrap();
        prop_assert!(full.state.global.model.max_abs_diff(&none.state.global.model) < 1e-10);
    }

    #[test]
    fn displacement_sums_to_zero_around_the_mean(
        models in prop::collection::vec(vector(4), 1..6),
        period in 1usize..20,
        gamma in 1e-3f64..1.0,
    ) {
        let agg = group_aggregate(&models);
        let mut total = ParamVector::zeros(4);
        for m in &models {
            let mut c = ParamVector::zeros(4);
            apply_displacement(&mut c, m, &agg, period, gamma);
            total.add_assign(&c);
        }
        let scale = models.iter().map(|m| m.norm()).fold(1.0, f64::max) / (period as f64 * gamma);
        prop_assert!(total.norm() <= 1e-12 * scale * models.len() as f64);
    }
}
