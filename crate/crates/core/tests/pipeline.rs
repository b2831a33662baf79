use shrinkfuse::causal::{
    build_fusion_input, diff_in_means, ensure_propensities, neyman_variance, read_csv, sipw,
    stratum_weights, write_csv, Adjustment, PropensityMode, StudyRole, VarianceNormalization,
};
use shrinkfuse::rng::stream;
use shrinkfuse::shrinkage::{estimate, EstimateOptions};
use shrinkfuse::simulation::{
    assign_observational, assign_rct, generate_populations, run_condition, SimConfig, StrataScheme,
};
use shrinkfuse::EstimatorId;

fn small_config() -> SimConfig {
    SimConfig {
        n_o: 1500,
        n_r: 300,
        k: 4,
        outer_reps: 3,
        inner_reps: 4,
        oracle_draws: 20,
        ..SimConfig::default()
    }
}

#[test]
fn csv_round_trip_feeds_the_estimators() {
    let config = SimConfig {
        adjustment: Adjustment::Sipw,
        ..small_config()
    };
    let mut rng = stream(5, &[0]);
    let (obs_pop, rct_pop, _) = generate_populations(&config, &mut rng).unwrap();
    let obs = obs_pop
        .observe(
            &assign_observational(&obs_pop, &mut rng),
            StudyRole::Observational,
            None,
            true,
        )
        .unwrap();
    let rct = rct_pop
        .observe(
            &assign_rct(&rct_pop, &mut rng),
            StudyRole::Randomized,
            None,
            false,
        )
        .unwrap();

    let mut obs_csv = Vec::new();
    write_csv(&obs, &mut obs_csv).unwrap();
    let mut rct_csv = Vec::new();
    write_csv(&rct, &mut rct_csv).unwrap();
    let obs_back = read_csv(obs_csv.as_slice(), StudyRole::Observational, None).unwrap();
    let rct_back = read_csv(rct_csv.as_slice(), StudyRole::Randomized, Some(4)).unwrap();
    assert_eq!(obs_back, obs);
    assert_eq!(rct_back, rct);

    let obs_fit = ensure_propensities(obs_back, PropensityMode::Shared).unwrap();
    let fusion = build_fusion_input(
        &obs_fit,
        &rct_back,
        Adjustment::Sipw,
        VarianceNormalization::Population,
    )
    .unwrap();
    assert_eq!(fusion.tau_r, diff_in_means(&rct).unwrap());
    assert_eq!(fusion.tau_o, sipw(&obs_fit).unwrap());
    assert_eq!(
        fusion.sigma_r2,
        neyman_variance(&rct, VarianceNormalization::Population).unwrap()
    );
    assert_eq!(fusion.weights, stratum_weights(&obs).unwrap());

    let opts = EstimateOptions::default();
    for id in EstimatorId::ALL
        .into_iter()
        .filter(|&id| id != EstimatorId::Oracle)
    {
        let out = estimate(id, &fusion, None, &opts).unwrap();
        assert_eq!(out.estimate.len(), 4);
        assert!(out.estimate.iter().all(|x| x.is_finite()), "{id}");
    }
}

#[test]
fn simulation_is_identical_across_thread_counts() {
    let config = SimConfig {
        adjustment: Adjustment::Sipw,
        strata_scheme: StrataScheme::Variable,
        ..small_config()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| run_condition(&config).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one.rows, three.rows);
    assert_eq!(one.losses, three.losses);
    let mut a = Vec::new();
    one.write_csv(&mut a).unwrap();
    let mut b = Vec::new();
    three.write_csv(&mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn proposed_estimators_improve_on_the_rct_in_quick_conditions() {
    for adjustment in [Adjustment::None, Adjustment::Sipw] {
        let config = SimConfig {
            adjustment,
            ..SimConfig::default().quick()
        };
        let table = run_condition(&config).unwrap();
        for id in EstimatorId::ALL.into_iter().filter(|id| id.is_proposed()) {
            let (diff, se) = table.paired_difference(id, EstimatorId::TauR).unwrap();
            assert!(diff <= 2.0 * se, "{} {id}: {diff} (se {se})", table.label);
        }
        assert_eq!(table.row(EstimatorId::TauR).unwrap().pct_reduction, 0.0);
    }
}
