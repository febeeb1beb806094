use proptest::prelude::*;
use repflow::autodiff::Tensor;
use repflow::data::DEFAULT_FRACTIONS;
use repflow::eval::*;
use repflow::flow::{FlowConfig, Variant};
use repflow::sampler::SampleSpec;

fn col(v: &[f64]) -> Tensor {
    Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
}

fn permute<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| v[i].clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rms_dominates_mean_error(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mean_err = (a.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / a.len() as f64).abs();
        prop_assert!(pehe_sqrt(&a, &b).unwrap() >= mean_err - 1e-12);
        prop_assert!((ate_error(&a, &b).unwrap() - mean_err).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_permutation_invariant(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..30), rot in 0usize..30) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let n = a.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let (pa, pb) = (permute(&a, &perm), permute(&b, &perm));
        prop_assert!((pehe_sqrt(&a, &b).unwrap() - pehe_sqrt(&pa, &pb).unwrap()).abs() < 1e-12);
        prop_assert!((ate_error(&a, &b).unwrap() - ate_error(&pa, &pb).unwrap()).abs() < 1e-12);
        prop_assert!((empirical_w1(&col(&a), &col(&b)).unwrap() - empirical_w1(&col(&pa), &col(&pb)).unwrap()).abs() < 1e-12);
        prop_assert!((sorted_w1(&a, &b).unwrap() - sorted_w1(&pa, &pb).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sorted_coupling_never_exceeds_index_pairing(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(sorted_w1(&a, &b).unwrap() <= empirical_w1(&col(&a), &col(&b)).unwrap() + 1e-12);
    }

    #[test]
    fn sorted_w1_vanishes_only_on_equal_multisets(a in prop::collection::vec(-5.0f64..5.0, 1..20), rot in 0usize..20) {
        let n = a.len();
        let b: Vec<f64> = (0..n).map(|i| a[(i + rot) % n]).collect();
        prop_assert_eq!(sorted_w1(&a, &b).unwrap(), 0.0);
        let mut c = b.clone();
        c[0] += 0.5;
        prop_assert!(sorted_w1(&a, &c).unwrap() > 0.0);
    }
}

#[test]
fn trivial_metric_values() {
    let tau = [0.3, -1.0, 2.0];
    assert_eq!(pehe_sqrt(&tau, &tau).unwrap(), 0.0);
    let plus: Vec<f64> = tau.iter().map(|t| t + 1.0).collect();
    assert!((pehe_sqrt(&plus, &tau).unwrap() - 1.0).abs() < 1e-15);
    assert!((pehe_sqrt(&[0.0, 2.0], &[0.0, 0.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(ate_error(&tau, &tau).unwrap(), 0.0);
    assert_eq!(ate_error(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 0.0);
    let shifted: Vec<f64> = tau.iter().map(|t| t + 0.3).collect();
    assert!((ate_error(&shifted, &tau).unwrap() - 0.3).abs() < 1e-15);
    let y = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(empirical_w1(&y, &y).unwrap(), 0.0);
    let off = Tensor::matrix(2, 3, y.values().iter().map(|v| v - 0.5).collect()).unwrap();
    assert!((empirical_w1(&off, &y).unwrap() - 0.5 * 3f64.sqrt()).abs() < 1e-15);
}

#[test]
fn mismatched_lengths_are_errors() {
    assert!(pehe_sqrt(&[1.0], &[1.0, 2.0]).is_err());
    assert!(ate_error(&[1.0], &[]).is_err());
    assert!(empirical_w1(&col(&[1.0]), &col(&[1.0, 2.0])).is_err());
}

fn smoke_config() -> ExperimentConfig {
    ExperimentConfig {
        source: DataSource::SettingA { n: 200, d: 5 },
        widths: Widths { latent_dim: 4, hidden: 8, time_embed: 4 },
        train: FlowConfig { steps: 5, batch_size: 32, ..FlowConfig::default() },
        sample: SampleSpec { draws: 2, ode_steps: 3 },
        fractions: DEFAULT_FRACTIONS,
    }
}

#[test]
fn single_replication_has_no_standard_error() {
    let r = run_experiment(&smoke_config(), Variant::LambdaZero, 1, 5, 1).unwrap();
    assert!(r.summary().iter().all(|s| s.stderr.is_none()));
    assert!(r.summary().len() >= 4);
    assert!(r.replications[0].entries().iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
}

#[test]
fn reports_are_reproducible_and_independent_of_jobs() {
    let cfg = smoke_config();
    let a = run_experiment(&cfg, Variant::Full, 2, 9, 1).unwrap().to_csv();
    let b = run_experiment(&cfg, Variant::Full, 2, 9, 2).unwrap().to_csv();
    assert_eq!(a, b);
    let se_rows = a.lines().filter(|l| l.contains(",stderr,")).count();
    assert!(se_rows > 0 && a.lines().filter(|l| l.contains(",stderr,")).all(|l| !l.ends_with(',')));
}

#[test]
fn every_variant_runs() {
    for v in Variant::ALL {
        let r = run_experiment(&smoke_config(), v, 1, 2, 1).unwrap();
        assert_eq!(r.variant, v);
    }
}

#[test]
fn sweep_grid_of_one_equals_the_experiment() {
    let cfg = smoke_config();
    let pts = sweep(SweepParam::Lambda, &[1.0], &cfg, Variant::Full, 1, 4, 1).unwrap();
    assert_eq!(pts.len(), 1);
    assert_eq!(pts[0].report, run_experiment(&cfg, Variant::Full, 1, 4, 1).unwrap());
    let pts = sweep(SweepParam::LatentDim, &[2.0, 4.0], &cfg, Variant::Full, 1, 4, 1).unwrap();
    assert!(pts.iter().all(|p| p.report.replications[0].entries().iter().all(|(_, v)| v.is_finite())));
    assert!(sweep(SweepParam::Lambda, &[], &cfg, Variant::Full, 1, 4, 1).is_err());
}

#[test]
fn bound_terms_are_finite_and_positive_before_training() {
    let cfg = smoke_config();
    let seeds = ReplicationSeeds::new(1, 0);
    let prep = Prepared::new(&cfg.source, cfg.fractions, 0, &seeds).unwrap();
    let model = repflow::flow::FlowModel::init(cfg.widths.dims(5), repflow::flow::Conditioning::Latent, 3).unwrap();
    let test = prep.data.subset(&prep.split.test);
    let b = bound_diagnostic(&model, &prep.standardizer, &test, 4, 8, &cfg.train.sinkhorn, 1).unwrap();
    for v in [b.factual_loss_control, b.factual_loss_treated, b.latent_distance] {
        assert!(v.is_finite() && v > 0.0, "{b:?}");
    }
}

#[test]
fn constant_encoder_has_no_latent_distance() {
    let cfg = smoke_config();
    let seeds = ReplicationSeeds::new(1, 0);
    let prep = Prepared::new(&cfg.source, cfg.fractions, 0, &seeds).unwrap();
    let mut model = repflow::flow::FlowModel::init(cfg.widths.dims(5), repflow::flow::Conditioning::Latent, 3).unwrap();
    let out = &mut model.encoder.out;
    out.w.values_mut().iter_mut().for_each(|v| *v = 0.0);
    out.b.values_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    let test = prep.data.subset(&prep.split.test);
    let b = bound_diagnostic(&model, &prep.standardizer, &test, 4, 8, &cfg.train.sinkhorn, 1).unwrap();
    assert!(b.latent_distance < 1e-9, "{}", b.latent_distance);
}

#[test]
fn ihdp_source_requires_ground_truth_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ihdp_files(dir.path()).is_err());
    assert!(ihdp_files(&dir.path().join("missing.csv")).is_err());
}
