use std::fs;

use proptest::prelude::*;

use streamrec::experiment::{report, run_experiment};
use streamrec::ingest::{chronological_split, load_dataset};
use streamrec::models::{load_checkpoint, save_checkpoint};
use streamrec::synthetic::{generate, write_ratings, SyntheticConfig};
use streamrec::*;

fn quick(cfg: ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        num_models: 3,
        embedding_dim: 4,
        mlp_layer_widths: vec![8, 4],
        n_r: 100,
        n_p: 64,
        batch_size: 32,
        reservoir_capacity: 800,
        timings: false,
        ..cfg
    }
}

#[test]
fn f32_and_f64_systems_agree_on_shape() {
    let ds = generate(&SyntheticConfig::small(60, 120, 3000, 9)).unwrap();
    let (train, test) = chronological_split(&ds, 0.9).unwrap();
    let cfg = quick(ExperimentConfig::default());
    let mut a = System32::new(&cfg, ds.num_users, ds.num_items).unwrap();
    let mut b = System64::new(&cfg, ds.num_users, ds.num_items).unwrap();
    a.run_training_phase(train).unwrap();
    b.run_training_phase(train).unwrap();
    let ra = a.run_prequential_phase(test).unwrap();
    let rb = b.run_prequential_phase(test).unwrap();
    assert_eq!(ra.len(), rb.len());
    assert_eq!(ra.last().unwrap().n_seen, test.len());
    let hr = ra.last().unwrap().cumulative.hr();
    assert!((0.0..=1.0).contains(&hr));
    assert_eq!(a.reservoir().len(), b.reservoir().len());
}

#[test]
fn file_backed_experiment_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate(&SyntheticConfig::small(50, 100, 2500, 2)).unwrap();
    let ratings = tmp.path().join("ratings.dat");
    write_ratings(&ds, &ratings).unwrap();
    let loaded = load_dataset(&ratings, "::", None).unwrap();
    assert_eq!(loaded.len(), ds.len());

    let mut runs = Vec::new();
    for fuser in [FuserKind::Ael, FuserKind::Avg] {
        let spec = RunSpec {
            config: quick(ExperimentConfig {
                fuser_kind: fuser,
                ..Default::default()
            }),
            dataset: Some(ratings.clone()),
            out_dir: tmp.path().join(fuser.to_string()),
            label: fuser.to_string(),
            ..Default::default()
        };
        let out = run_experiment(&spec).unwrap();
        assert_eq!(out.len(), 1);
        runs.push(spec.out_dir);
    }
    let rep = report(&runs).unwrap();
    assert_eq!(rep.rows.len(), 2);
    assert!(rep.rows[1].hr_gain.is_some());

    // a config file written by a run reproduces the run
    let text = fs::read_to_string(runs[0].join("config.txt")).unwrap();
    let again = RunSpec::parse(&text).unwrap();
    assert_eq!(again.config.fuser_kind, FuserKind::Ael);
}

#[test]
fn failed_ingest_leaves_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.dat");
    fs::write(&bad, "1::2::5::100\nnot a rating line\n").unwrap();
    let spec = RunSpec {
        config: quick(ExperimentConfig::default()),
        dataset: Some(bad),
        out_dir: tmp.path().join("out"),
        ..Default::default()
    };
    assert!(run_experiment(&spec).is_err());
    let manifest = fs::read_to_string(tmp.path().join("out/MANIFEST")).unwrap();
    assert!(manifest.contains("status = failed"));
    assert!(manifest.contains("stage = ingest"));
}

#[test]
fn trained_model_checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate(&SyntheticConfig::small(40, 80, 1500, 5)).unwrap();
    let (train, _) = chronological_split(&ds, 0.9).unwrap();
    let cfg = quick(ExperimentConfig::default());
    let mut sys = System64::new(&cfg, ds.num_users, ds.num_items).unwrap();
    sys.run_training_phase(train).unwrap();
    let path = tmp.path().join("m0.ckpt");
    save_checkpoint(&sys.models()[0], &path).unwrap();
    let back: Model64 = load_checkpoint(&path).unwrap();
    for u in 0..5 {
        assert_eq!(back.predict(u, 3).unwrap(), sys.models()[0].predict(u, 3).unwrap());
    }
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        0.0..=1.0f64,
        1.0..1.5f64,
        1usize..9,
        1usize..512,
        prop::sample::select(vec![SamplerKind::Sts, SamplerKind::Ndo, SamplerKind::Rr, SamplerKind::Sw]),
        prop::sample::select(vec![FuserKind::Ael, FuserKind::Avg, FuserKind::AdaW]),
        any::<u64>(),
        prop::option::of(1usize..1000),
    )
        .prop_map(|(alpha, lambda, o, n_r, sampler, fuser, seed, window)| ExperimentConfig {
            alpha,
            lambda_new: lambda,
            num_models: o,
            n_r,
            sampler_kind: sampler,
            fuser_kind: fuser,
            rng_seed: seed,
            window_size: window,
            ..Default::default()
        })
}

proptest! {
    #[test]
    fn config_text_round_trip(cfg in arb_config(), label in "[a-z][a-z0-9_]{0,12}") {
        let spec = RunSpec { config: cfg, label, ..Default::default() };
        let back = RunSpec::parse(&spec.to_config_string()).unwrap();
        prop_assert_eq!(back, spec);
    }
}
