use mtgc::analysis::MetricOptions;
use mtgc::engine::{train, Federation, TrainConfig};
use mtgc::multilevel::{events_to_csv, run_multilevel, MultilevelConfig};
use mtgc::param::ParamVector;
use mtgc::synth::{synth_heterogeneous_quadratics, synth_tree_quadratics, SynthQuadratic};
use mtgc::task::NoiseSource;
use mtgc::topology::{MultiLevelTopology, Topology};

#[test]
fn two_level_tree_reproduces_engine_state_bitwise() {
    for (groups, clients, e, h, noise) in [
        (2, 3, 2, 3, NoiseSource::Minibatch),
        (3, 2, 4, 1, NoiseSource::Gaussian { sigma: 0.3 }),
        (1, 4, 2, 5, NoiseSource::Minibatch),
    ] {
        let topo = Topology::uniform(groups, clients).unwrap();
        let inst =
            synth_heterogeneous_quadratics(&topo, &SynthQuadratic::new(4, 1.0, 2.0, 3).with_minibatch(1)).unwrap();
        let fed = Federation::new(topo, inst.tasks.clone(), noise).unwrap();
        let rounds = 6;
        let two = train(
            &fed,
            &TrainConfig::new(0.03, rounds, e, h),
            8,
            &ParamVector::zeros(4),
            &MetricOptions::default(),
        )
        .unwrap();
        let tree = MultiLevelTopology::new(vec![groups, clients], vec![e * h, h]).unwrap();
        let multi = run_multilevel(
            &tree,
            inst.tasks,
            noise,
            &MultilevelConfig::new(0.03, rounds * e * h),
            8,
            &ParamVector::zeros(4),
            &MetricOptions::default(),
        )
        .unwrap();
        for (a, b) in two.state.client_models().iter().zip(&multi.state.leaves) {
            assert!(a.bit_eq(b));
        }
        for (c, nu) in two.state.clients.iter().zip(&multi.state.nu[1]) {
            assert!(c.correction.bit_eq(nu));
        }
        for (g, nu) in two.state.groups.iter().zip(&multi.state.nu[0]) {
            assert!(g.correction.bit_eq(nu));
        }
        assert_eq!(two.trace.to_csv_string(), multi.trace.to_csv_string());
    }
}

#[test]
fn three_level_corrections_remove_heterogeneity_bias() {
    let tree = MultiLevelTopology::new(vec![2, 2, 2], vec![12, 6, 3]).unwrap();
    let inst = synth_tree_quadratics(
        &tree,
        &[2.0, 2.0, 2.0],
        &SynthQuadratic::new(3, 0.0, 0.0, 4).with_spread(0.3),
    )
    .unwrap();
    let run = |cfg: MultilevelConfig| {
        run_multilevel(
            &tree,
            inst.tasks.clone(),
            NoiseSource::Minibatch,
            &cfg,
            0,
            &ParamVector::zeros(3),
            &MetricOptions::default(),
        )
        .unwrap()
    };
    let with = run(MultilevelConfig::new(0.02, 12 * 400));
    let without = run(MultilevelConfig::new(0.02, 12 * 400).without_corrections());
    let a = with.trace.last().unwrap().grad_norm_sq;
    let b = without.trace.last().unwrap().grad_norm_sq;
    assert!(a < 1e-20, "{a}");
    assert!(b > 1e-6, "{b}");
    assert!(with.state.violations.iter().all(|&v| v < 1e-9));
}

#[test]
fn event_log_lists_every_aggregation() {
    let tree = MultiLevelTopology::new(vec![2, 3], vec![4, 2]).unwrap();
    let inst = synth_tree_quadratics(&tree, &[1.0, 1.0], &SynthQuadratic::new(2, 0.0, 0.0, 1)).unwrap();
    let out = run_multilevel(
        &tree,
        inst.tasks,
        NoiseSource::Minibatch,
        &MultilevelConfig::new(0.05, 8),
        0,
        &ParamVector::zeros(2),
        &MetricOptions::default(),
    )
    .unwrap();
    let csv = events_to_csv(&out.events);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    // level 2 fires at r = 1, 3, 5, 7 for both groups; level 1 at r = 3, 7
    assert_eq!(rows.len(), 4 * 2 + 2);
    assert_eq!(rows[0], "1,2,0");
    assert_eq!(rows[1], "1,2,1");
    assert!(rows.contains(&"3,1,root") && rows.contains(&"7,1,root"));
    // one metric row per deepest-level aggregation plus the start
    assert_eq!(out.trace.records.len(), 4 + 1);
}
