//! Reference values for hand-derived and cross-implementation checks, printed by
//! `mtgc oracle`.

use crate::analysis::{effective_client_count, scaffold_reference, stepsize_bound, MetricOptions};
use crate::engine::{train, CorrectionMode, Federation, TrainConfig};
use crate::error::Result;
use crate::multilevel::{run_multilevel, MultilevelConfig};
use crate::param::ParamVector;
use crate::partition::{partition_dataset, toy_clusters, PartitionPlan, Regime};
use crate::synth::{synth_heterogeneous_quadratics, SynthQuadratic};
use crate::task::{lipschitz_constant, DataShard, Example, NoiseSource, Task, TaskKind};
use crate::topology::{MultiLevelTopology, Topology};

/// Max absolute coordinate difference between two model sequences.
pub fn max_deviation(a: &[ParamVector], b: &[ParamVector]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

/// `(name, value)` pairs.
pub fn oracle_report() -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut put = |k: &str, v: String| out.push((k.to_string(), v));

    put(
        "stepsize_bound(L=1,E=1,H=1)",
        format!("{:e}", stepsize_bound(1.0, 1, 1)?),
    );
    put(
        "stepsize_bound(L=1,E=10,H=20)",
        format!("{:e}", stepsize_bound(1.0, 10, 20)?),
    );
    put(
        "effective_clients(N=10,n=10)",
        format!("{}", effective_client_count(&Topology::uniform(10, 10)?)),
    );
    put(
        "effective_clients(n=(1,3))",
        format!("{}", effective_client_count(&Topology::build(2, &[1, 3])?)),
    );

    let diag = DataShard::new(
        0,
        vec![Example::new(vec![2.0, 0.0], 0.0), Example::new(vec![0.0, 1.0], 0.0)],
    )?;
    put(
        "lipschitz(A=diag(2,1))",
        format!(
            "{:e}",
            lipschitz_constant(&Task::full_batch(TaskKind::Quadratic, diag)?)?
        ),
    );

    // flat topology: engine against the independent control-variate reference
    let topo = Topology::uniform(1, 8)?;
    let inst = synth_heterogeneous_quadratics(&topo, &SynthQuadratic::new(5, 0.0, 1.0, 7).with_minibatch(2))?;
    let fed = Federation::new(topo, inst.tasks, NoiseSource::Minibatch)?;
    let cfg = TrainConfig::new(0.01, 50, 1, 10);
    let x0 = ParamVector::zeros(5);
    let engine = train(&fed, &cfg, 3, &x0, &MetricOptions::default()).map_err(|a| a.error)?;
    let reference = scaffold_reference(&fed, &cfg, 3, &x0)?;
    let final_engine = &engine.state.global.model;
    let final_ref = reference.global_models.last().expect("final model");
    put(
        "scaffold_final_deviation",
        format!("{:e}", final_engine.max_abs_diff(final_ref)),
    );
    put("scaffold_final_bitwise", format!("{}", final_engine.bit_eq(final_ref)));

    // M = 2 tree against the two-level engine
    let topo = Topology::uniform(2, 2)?;
    let inst = synth_heterogeneous_quadratics(&topo, &SynthQuadratic::new(3, 1.0, 1.0, 2).with_minibatch(1))?;
    let fed = Federation::new(topo, inst.tasks.clone(), NoiseSource::Minibatch)?;
    let cfg = TrainConfig::new(0.02, 5, 2, 3);
    let two = train(&fed, &cfg, 9, &ParamVector::zeros(3), &MetricOptions::default()).map_err(|a| a.error)?;
    let tree = MultiLevelTopology::new(vec![2, 2], vec![6, 3])?;
    let multi = run_multilevel(
        &tree,
        inst.tasks,
        NoiseSource::Minibatch,
        &MultilevelConfig::new(0.02, 30),
        9,
        &ParamVector::zeros(3),
        &MetricOptions::default(),
    )
    .map_err(|a| a.error)?;
    put(
        "multilevel_m2_deviation",
        format!("{:e}", max_deviation(&two.state.client_models(), &multi.state.leaves)),
    );

    // corrections leave the virtual mean unchanged under a shared Hessian
    let topo = Topology::uniform(2, 3)?;
    let inst = synth_heterogeneous_quadratics(&topo, &SynthQuadratic::new(4, 1.0, 1.0, 5))?;
    let fed = Federation::new(topo, inst.tasks, NoiseSource::Gaussian { sigma: 0.1 })?;
    let cfg = TrainConfig::new(0.01, 20, 5, 4);
    let full = train(&fed, &cfg, 1, &ParamVector::zeros(4), &MetricOptions::default()).map_err(|a| a.error)?;
    let none = train(
        &fed,
        &cfg.clone().with_mode(CorrectionMode::None),
        1,
        &ParamVector::zeros(4),
        &MetricOptions::default(),
    )
    .map_err(|a| a.error)?;
    let loss_gap = full
        .trace
        .records
        .iter()
        .zip(&none.trace.records)
        .map(|(a, b)| (a.loss - b.loss).abs())
        .fold(0.0, f64::max);
    put("average_preservation_loss_gap", format!("{loss_gap:e}"));

    let data = toy_clusters(5, 4, 2, 0);
    let shards = partition_dataset(
        &data,
        &Topology::uniform(2, 2)?,
        &PartitionPlan::new(Regime::BothNoniid, 0.1, 42),
    )?;
    for (i, s) in shards.iter().enumerate() {
        put(&format!("partition_seed42_client{i}"), format!("{:?}", s.example_ids));
    }
    Ok(out)
}
