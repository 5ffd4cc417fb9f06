//! Property tests of reporting, simulation, spec handling and sampler
//! invariants through the public API.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssvs_glmm::io;
use ssvs_glmm::model::ModelDims;
use ssvs_glmm::sampler::{
    check_constraints, gibbs_scan, initial_state, update_indicator, BlockDraw, ChainTrace, Draw, IndicatorTarget,
    TraceLayout,
};
use ssvs_glmm::select::{self, label_of_draw};
use ssvs_glmm::simulate::{self, Case, SimDesign};
use ssvs_glmm::{
    Dataset, FamilyKind, Hyperparameters, ModelSpec, RandomBlockSpec, RandomDesign, SamplerConfig, SelectionMode, Trace,
};

fn small_model() -> (ModelSpec, Dataset) {
    let n = 12;
    let x: Vec<f64> = (0..n)
        .flat_map(|i| [1.0, (i as f64 - 5.5) / 4.0, ((i * 7) % 5) as f64 / 3.0 - 0.6])
        .collect();
    let z: Vec<f64> = (0..n).flat_map(|i| [1.0, (i as f64 - 5.5) / 4.0]).collect();
    let y: Vec<f64> = (0..n).map(|i| ((i * 3) % 5) as f64).collect();
    let block = RandomDesign::new(z, 2, (0..n).map(|i| i / 3).collect(), None).unwrap();
    let data = Dataset::new(y, x, 3, vec![block], None).unwrap();
    let spec = ModelSpec::new(
        FamilyKind::Poisson,
        "y",
        &["(Intercept)", "x2", "x3"],
        vec![RandomBlockSpec {
            group: "g".into(),
            columns: vec!["(Intercept)".into(), "x2".into()],
        }],
    );
    (spec, data)
}

fn synthetic_trace(patterns: &[(Vec<bool>, Vec<bool>)], chains: usize) -> Trace {
    let (spec, data) = small_model();
    let per = patterns.len().div_ceil(chains);
    let chains = patterns
        .chunks(per)
        .enumerate()
        .map(|(c, chunk)| ChainTrace {
            chain: c,
            seed: c as u64,
            draws: chunk
                .iter()
                .enumerate()
                .map(|(t, (fixed, random))| Draw {
                    iteration: t,
                    log_likelihood: 0.0,
                    log_posterior: 0.0,
                    beta: fixed.iter().map(|&j| if j { 0.5 } else { 0.0 }).collect(),
                    fixed_included: fixed.clone(),
                    blocks: vec![BlockDraw {
                        lambda: random.iter().map(|&i| if i { 1.0 } else { 0.0 }).collect(),
                        included: random.clone(),
                        gamma: vec![0.0],
                        xi: vec![0.0; 8],
                        kappa: vec![1.0; 2],
                    }],
                    dispersion: None,
                })
                .collect(),
            stats: Default::default(),
        })
        .collect();
    Trace {
        layout: TraceLayout::new(&spec, &data),
        config: SamplerConfig::default(),
        chains,
    }
}

fn patterns() -> impl Strategy<Value = Vec<(Vec<bool>, Vec<bool>)>> {
    prop::collection::vec(
        (
            prop::collection::vec(any::<bool>(), 3),
            prop::collection::vec(any::<bool>(), 2),
        ),
        1..120,
    )
}

fn tiny_design(case: Case) -> SimDesign {
    SimDesign {
        n_subjects: 6,
        n_per_subject: 4,
        replicates: 3,
        ..SimDesign::scaled(case)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn label_counts_cover_the_trace(p in patterns(), chains in 1usize..4) {
        let trace = synthetic_trace(&p, chains);
        let report = select::top_models(&trace, usize::MAX).unwrap();
        let total: usize = report.models.iter().map(|m| m.count).sum();
        prop_assert_eq!(total, trace.len());
        prop_assert_eq!(report.total, trace.len());
        prop_assert_eq!(&report.modal, &report.models[0].label);
    }

    #[test]
    fn inclusion_is_the_label_weighted_marginal(p in patterns(), chains in 1usize..4) {
        let trace = synthetic_trace(&p, chains);
        let report = select::top_models(&trace, usize::MAX).unwrap();
        let n = trace.len() as f64;
        for k in 0..3 {
            let c: usize = report.models.iter().filter(|m| m.label.fixed[k]).map(|m| m.count).sum();
            prop_assert_eq!(report.inclusion.fixed[k], c as f64 / n);
        }
        for k in 0..2 {
            let c: usize = report.models.iter().filter(|m| m.label.random[0][k]).map(|m| m.count).sum();
            prop_assert_eq!(report.inclusion.random[0][k], c as f64 / n);
        }
    }

    #[test]
    fn reports_are_deterministic(p in patterns(), chains in 1usize..4, k in 1usize..6) {
        let trace = synthetic_trace(&p, chains);
        let a = select::top_models(&trace, k).unwrap();
        let b = select::top_models(&trace.clone(), k).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(
            a.records(&trace.layout),
            b.records(&trace.layout)
        );
        let labels: Vec<_> = trace.draws().map(label_of_draw).collect();
        prop_assert_eq!(select::label_counts(&labels)[0].0.clone(), a.modal);
    }

    #[test]
    fn label_codes_round_trip(fixed in prop::collection::vec(any::<bool>(), 1..8),
                              random in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..5), 0..3)) {
        let label = select::ModelLabel { fixed, random };
        prop_assert_eq!(select::ModelLabel::from_code(&label.code()).unwrap(), label);
    }

    #[test]
    fn spec_serialization_round_trips(h in 0.01f64..10.0, v in 0.01f64..10.0, nu in 0.01f64..10.0,
                                      g in 0.1f64..5.0, pi in 0.05f64..0.95, chains in 1usize..5,
                                      mode in 0usize..3, seed in any::<u64>()) {
        let (mut spec, _) = small_model();
        spec.hyper = Hyperparameters { h, v, nu, g_shrink: g, prior_inclusion: pi };
        spec.mode = [SelectionMode::NoSelection, SelectionMode::SsvsDiagonal, SelectionMode::SsvsFull][mode];
        spec.sampler.chains = chains;
        spec.sampler.seed = seed;
        let text = serde_json::to_string_pretty(&spec).unwrap();
        prop_assert_eq!(io::parse_spec_str(&text).unwrap(), spec);
    }

    #[test]
    fn simulation_is_reproducible(r in 0usize..40) {
        let design = tiny_design(Case::Sparse);
        let (a, ta) = simulate::simulate_dataset(&design, r).unwrap();
        let (b, tb) = simulate::simulate_dataset(&design, r).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
        prop_assert_eq!(ta, tb);
    }

    #[test]
    fn cases_differ_only_in_inactive_coefficients(r in 0usize..40) {
        let d1 = tiny_design(Case::Sparse);
        let d2 = tiny_design(Case::SmallSignal);
        let (a, ta) = simulate::simulate_dataset(&d1, r).unwrap();
        let (b, tb) = simulate::simulate_dataset(&d2, r).unwrap();
        for i in 0..a.n_obs() {
            prop_assert_eq!(a.x_row(i), b.x_row(i));
        }
        prop_assert_eq!(a.blocks(), b.blocks());
        prop_assert_eq!(simulate::draw_random_effects(&d1, r).unwrap(), simulate::draw_random_effects(&d2, r).unwrap());
        prop_assert_eq!(ta.label(), tb.label());
        for p in 0..d1.n_fixed {
            if p < d1.active_fixed {
                prop_assert_eq!(ta.beta[p], tb.beta[p]);
            } else {
                prop_assert_eq!(ta.beta[p], 0.0);
                prop_assert_eq!(tb.beta[p], d2.small_value);
            }
        }
    }

    #[test]
    fn scans_preserve_the_constraints(seed in any::<u64>(), full in any::<bool>()) {
        let (mut spec, data) = small_model();
        spec.mode = if full { SelectionMode::SsvsFull } else { SelectionMode::SsvsDiagonal };
        let dims = ModelDims::of(&spec, &data);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = initial_state(&spec, &data, &mut rng).unwrap();
        prop_assert!(state.check_dims(&dims).is_ok());
        for _ in 0..5 {
            state = gibbs_scan(&state, &spec, &data, &mut rng).unwrap();
            prop_assert!(check_constraints(&state, spec.mode).is_ok());
            let eff = state.blocks[0].effective(spec.mode);
            let omega = ssvs_glmm::reparam::assemble_covariance(&eff);
            for k in 0..2 {
                if !state.blocks[0].included[k] {
                    prop_assert!((0..2).all(|j| omega[k * 2 + j] == 0.0 && omega[j * 2 + k] == 0.0));
                }
            }
        }
    }
}

#[test]
fn overflowed_slab_value_is_never_switched_on() {
    let (mut spec, data) = small_model();
    spec.mode = SelectionMode::SsvsDiagonal;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let mut state = initial_state(&spec, &data, &mut rng).unwrap();
        state.blocks[0].included[1] = false;
        state.blocks[0].lambda[1] = f64::MAX;
        let target = IndicatorTarget::Random { block: 0, effect: 1 };
        let draw = update_indicator(target, &mut state, &spec, &data, &mut rng).unwrap();
        assert_eq!(draw.probability, 0.0);
        assert!(!state.blocks[0].included[1]);
    }
}
