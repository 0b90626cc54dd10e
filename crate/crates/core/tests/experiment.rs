use kfcollapse::cone::{random_spd, CovarianceMatrix};
use kfcollapse::experiment::{
    cross_check, execute, indexed_header, lyapunov_spectrum, num, parse_config, rank_law_holds, report_from_dir,
    sha256_hex, verify_manifest, write_experiment, Csv, ExperimentConfig, InitialRank, Manifest, OutputDir, Suite,
    Table, MANIFEST_NAME,
};
use kfcollapse::filter::{riccati_step, FactoredClosedForm};
use kfcollapse::models::{ModelStep, ObsMode};
use kfcollapse::rng::PRNG_IDENTITY;
use kfcollapse::symplectic::{oracle_distance, symplectic_trace};
use kfcollapse::Error;
use nalgebra::DMatrix;
use rand::SeedableRng;

fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn small(suite: Suite, n: usize, d: usize, steps: usize) -> ExperimentConfig {
    ExperimentConfig::from_pairs(&pairs(&[
        ("suite", suite.name()),
        ("n", &n.to_string()),
        ("d", &d.to_string()),
        ("steps", &steps.to_string()),
        ("seed", "5"),
    ]))
    .unwrap()
}

#[test]
fn config_file_parsing() {
    let text = "# comment\nsuite = exp3\n\n n=12 # trailing\nrank = 4\nrank2 = none\nobs = first\n";
    let p = parse_config(text).unwrap();
    assert_eq!(p, pairs(&[("suite", "exp3"), ("n", "12"), ("rank", "4"), ("rank2", "none"), ("obs", "first")]));
    let cfg = ExperimentConfig::from_pairs(&p).unwrap();
    assert_eq!((cfg.suite, cfg.n, cfg.d), (Suite::Exp3, 12, 15));
    assert_eq!(cfg.rank, InitialRank::Rank(4));
    assert_eq!(cfg.rank2, None);
    assert_eq!(cfg.obs, ObsMode::FirstComponent);
    assert!(matches!(parse_config("n 12"), Err(Error::Config(_))));
    assert!(matches!(parse_config("colour = red"), Err(Error::Config(_))));
}

#[test]
fn suite_defaults() {
    let exp3 = ExperimentConfig::defaults(Suite::Exp3);
    assert_eq!((exp3.n, exp3.d, exp3.forcing, exp3.dt), (40, 15, 8.0, 0.1));
    let exp1 = ExperimentConfig::defaults(Suite::Exp1);
    assert_eq!((exp1.n, exp1.d, exp1.steps), (30, 10, 5000));
    assert_eq!(exp1.rank, InitialRank::Full);
    let default_suite = ExperimentConfig::from_pairs(&[]).unwrap();
    assert_eq!(default_suite.suite, Suite::Exp2);
    let rescaled = ExperimentConfig::from_pairs(&pairs(&[("n", "10")])).unwrap();
    assert_ne!(rescaled.scale, default_suite.scale);
    let pinned = ExperimentConfig::from_pairs(&pairs(&[("n", "10"), ("scale", "0.5")])).unwrap();
    assert_eq!(pinned.scale, 0.5);
}

#[test]
fn config_round_trips_through_pairs_and_text() {
    let mut cfg = small(Suite::Exp1, 7, 3, 40);
    cfg.rank2 = Some(InitialRank::Rank(2));
    cfg.scale = 0.123456789;
    cfg.noise = 0.0;
    cfg.bounds = false;
    assert_eq!(ExperimentConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
    assert_eq!(ExperimentConfig::from_pairs(&parse_config(&cfg.to_text()).unwrap()).unwrap(), cfg);
}

#[test]
fn invalid_configs_are_config_errors() {
    for bad in [
        vec![("steps", "0")],
        vec![("n", "5"), ("rank", "0")],
        vec![("n", "5"), ("rank", "6")],
        vec![("n", "5"), ("rank2", "9")],
        vec![("transient", "1.0")],
        vec![("rank_threshold", "0")],
        vec![("suite", "exp9")],
        vec![("obs", "sparse")],
        vec![("bounds", "maybe")],
        vec![("n", "ten")],
        vec![("n", "5"), ("d", "6")],
        vec![("suite", "exp3"), ("n", "3")],
    ] {
        let r = ExperimentConfig::from_pairs(&pairs(&bad));
        assert!(matches!(r, Err(Error::Config(_))), "{bad:?} gave {r:?}");
    }
    assert_eq!("full".parse::<InitialRank>().unwrap(), InitialRank::Full);
    assert_eq!(InitialRank::Full.resolve(9), 9);
    assert!("-1".parse::<InitialRank>().is_err());
}

#[test]
fn sequence_length_covers_transients() {
    let cfg = small(Suite::Exp2, 6, 2, 100);
    let t = cfg.transient_steps();
    assert_eq!(t, (cfg.transient * 100.0).ceil() as usize);
    assert_eq!(cfg.sequence_config().steps, 100 + 1 + 2 * t);
}

#[test]
fn numbers_round_trip_bit_for_bit() {
    for v in [0.0, -0.0, 1.0, 1.0 / 3.0, -2.5e-300, 6.02e23, f64::MIN_POSITIVE, f64::MAX, f64::INFINITY, f64::NEG_INFINITY] {
        let back: f64 = num(v).parse().unwrap();
        assert_eq!(back.to_bits(), v.to_bits(), "{v}");
    }
    assert!(num(f64::NAN).parse::<f64>().unwrap().is_nan());
}

#[test]
fn csv_and_table_round_trip() {
    let header = indexed_header(&["k"], "sigma", 3);
    assert_eq!(header, vec!["k", "sigma_1", "sigma_2", "sigma_3"]);
    let mut csv = Csv::new("suite=exp2 seed=1", &header);
    csv.row(vec!["0".into(), num(1.5), num(0.25), num(1e-20)]);
    csv.row(vec!["1".into(), num(2.0), num(-0.5), num(0.0)]);
    let text = csv.into_string();
    assert!(text.starts_with("# suite=exp2 seed=1\nk,sigma_1"));
    let table = Table::parse(&text).unwrap();
    assert_eq!(table.header, header);
    assert_eq!(table.numeric_column("sigma_2").unwrap(), vec![0.25, -0.5]);
    assert_eq!(table.numeric_from(1).unwrap()[0], vec![1.5, 0.25, 1e-20]);
    assert!(table.column("missing").is_err());
    assert!(Table::parse("a,b\n1\n").is_err());
    assert!(Table::parse("# only a comment\n").is_err());
}

#[test]
fn manifest_records_and_verifies_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dir = OutputDir::create(tmp.path()).unwrap();
    dir.write("a.txt", b"alpha").unwrap();
    dir.write_json("b.json", &vec![1, 2, 3]).unwrap();
    let manifest = dir.finish("run", 42, pairs(&[("seed", "42")])).unwrap();
    assert_eq!(manifest.prng, PRNG_IDENTITY);
    assert_eq!(manifest.version, kfcollapse::VERSION);
    assert_eq!(manifest.files[0].sha256, sha256_hex(b"alpha"));
    assert_eq!(manifest.files[0].bytes, 5);
    assert_eq!(Manifest::read(&tmp.path().join(MANIFEST_NAME)).unwrap(), manifest);
    assert!(verify_manifest(tmp.path()).unwrap().is_empty());
    std::fs::write(tmp.path().join("a.txt"), b"beta").unwrap();
    assert_eq!(verify_manifest(tmp.path()).unwrap(), vec!["a.txt".to_string()]);
    assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

#[test]
fn rank_law_examples() {
    assert!(rank_law_holds(3, 3, 5));
    assert!(!rank_law_holds(4, 3, 5));
    assert!(rank_law_holds(5, 8, 5));
    assert!(rank_law_holds(4, 8, 5));
    assert!(!rank_law_holds(3, 8, 5));
    assert!(!rank_law_holds(6, 8, 5));
}

#[test]
fn cross_check_starts_exact_and_agrees() {
    let mut cfg = small(Suite::Exp2, 6, 2, 30);
    cfg.rank = InitialRank::Rank(3);
    let report = cross_check(&cfg).unwrap();
    assert_eq!(report.rows.len(), 31);
    let first = &report.rows[0];
    assert_eq!((first.riccati_closed, first.riccati_symplectic, first.closed_symplectic), (0.0, 0.0, 0.0));
    // The square-root route refactors P_0, which costs a rounding error.
    assert!(first.riccati_sqrt < 1e-14);
    assert!(report.max_deviation < 1e-8, "max deviation {:e}", report.max_deviation);
    assert!(report.rows.iter().all(|r| r.riccati_sqrt < 1e-8));
    cfg.noise = 0.1;
    assert!(matches!(cross_check(&cfg), Err(Error::Config(_))));
}

#[test]
fn without_observations_every_route_is_the_free_forecast() {
    let mut g = rand_chacha::ChaCha12Rng::seed_from_u64(3);
    let n = 5;
    let steps: Vec<_> = (0..20)
        .map(|_| {
            let m = kfcollapse::cone::standard_normal(&mut g, n, n) * 0.5 + DMatrix::identity(n, n);
            ModelStep::perfect(m, DMatrix::zeros(1, n), CovarianceMatrix::identity(1)).unwrap()
        })
        .collect();
    let p0 = random_spd(n, 2, 3).unwrap();
    let symp = symplectic_trace(&p0, &steps).unwrap();
    let mut closed = FactoredClosedForm::new(&p0).unwrap();
    let mut ric = p0.clone();
    let mut resolvent = DMatrix::<f64>::identity(n, n);
    for (k, step) in steps.iter().enumerate() {
        ric = riccati_step(&ric, step).unwrap();
        closed.push(step).unwrap();
        resolvent = step.propagator() * resolvent;
        let free = &resolvent * p0.matrix() * resolvent.transpose();
        assert!(oracle_distance(ric.matrix(), &free) < 1e-12, "step {}", k + 1);
        assert!(oracle_distance(closed.covariance().unwrap().matrix(), &free) < 1e-10, "step {}", k + 1);
        assert!(oracle_distance(symp[k + 1].matrix(), &free) < 1e-10, "step {}", k + 1);
    }
}

#[test]
fn spectrum_of_small_autonomous_suite() {
    let cfg = small(Suite::Exp1, 6, 2, 400);
    let report = lyapunov_spectrum(&cfg).unwrap();
    assert_eq!(report.exponents.len(), 6);
    assert!(report.exponents.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    assert_eq!(report.transient, cfg.transient_steps());
    assert_eq!(lyapunov_spectrum(&cfg).unwrap(), report);
}

#[test]
fn small_run_writes_a_consistent_directory() {
    let mut cfg = small(Suite::Exp2, 6, 2, 300);
    cfg.rank = InitialRank::Rank(2);
    cfg.rank2 = Some(InitialRank::Full);
    let exp = execute(&cfg).unwrap();
    assert_eq!(exp.runs.len(), 2);
    assert!(exp.pair_distance.is_some());
    let n0 = exp.prepared.lyapunov.n0();
    for run in &exp.summary.runs {
        assert!(run.rank_law, "rank law fails: {run:?}");
    }
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_experiment(&exp, tmp.path()).unwrap();
    assert_eq!(manifest.seed, 5);
    assert!(manifest.files.iter().any(|f| f.name == "summary.json"));
    assert!(verify_manifest(tmp.path()).unwrap().is_empty());
    let (back, stored) = report_from_dir(tmp.path()).unwrap();
    assert_eq!(back, exp.prepared.config);
    assert_eq!(stored.n0, n0);
    assert_eq!(stored.terminal_rank, exp.summary.runs[0].terminal_rank);
    assert_eq!(stored.rank_law, exp.summary.runs[0].rank_law);
    let again = execute(&cfg).unwrap();
    assert_eq!(again.summary, exp.summary);
}
