use std::path::Path;

use protofed::config::RunConfig;
use protofed::experiments::{self, Variant};
use protofed::par::Parallelism;
use protofed::theory::Corruption;

const TINY: &str = r#"
name = "tiny"
seed = 3

[world]
n_users = 40
n_items = 120
n_true_clusters = 3
n_slices = 3
interactions_per_user_per_slice = 6
history_len = 4

[backbone]
d = 8
negatives_per_positive = 19
loss = "bpr"

[prompt]
l_p = 2
eta_s = 0.5
eta_l = 0.1

[routing]
encoder = "mean_pool"
d_phi = 8
top_m = 2
similarity = "cosine"

[server]
K = 3
clip_radius = 4.0

[dp]
clip_radius = 4.0
upload_period = 3
compress_dim = 8

[federation]
rounds_per_slice = 3
client_fraction = 0.25
probe_users = 5
probe_steps = 10

[experiment]
seeds = [3, 4]

[theory]
regret_instances = 10
contraction_instances = 10
l1_instances = 10
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml_str(TINY).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn run_writes_every_output_and_reruns_byte_identically() {
    let cfg = tiny();
    let world = experiments::load_or_generate(&cfg, None).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    experiments::run_to_dir(&cfg, &world, a.path(), Parallelism::Rayon, false).unwrap();
    experiments::run_to_dir(&cfg, &world, b.path(), Parallelism::Sequential, false).unwrap();
    for f in ["config.toml", "slices.jsonl", "checkpoint.json", "metrics.csv", "report.json", "timing.json"] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    for f in ["slices.jsonl", "metrics.csv", "report.json", "checkpoint.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    assert_eq!(read(&a.path().join("slices.jsonl")).lines().count(), 3);
    assert_eq!(read(&a.path().join("metrics.csv")).lines().count(), 4);
    let written = RunConfig::from_toml_str(&read(&a.path().join("config.toml"))).unwrap();
    assert_eq!(written, cfg);
}

#[test]
fn world_files_round_trip_into_identical_runs() {
    let cfg = tiny();
    let world = experiments::load_or_generate(&cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.jsonl");
    protofed::world::write_world(&world, std::fs::File::create(&path).unwrap()).unwrap();
    let loaded = experiments::load_or_generate(&cfg, Some(&path)).unwrap();
    let a = experiments::simulate(&cfg, &world, Parallelism::Rayon).unwrap();
    let b = experiments::simulate(&cfg, &loaded, Parallelism::Rayon).unwrap();
    assert_eq!(a.report, b.report);
}

#[test]
fn resume_continues_a_partial_run() {
    let cfg = tiny();
    let world = experiments::load_or_generate(&cfg, None).unwrap();
    let full = tempfile::tempdir().unwrap();
    experiments::run_to_dir(&cfg, &world, full.path(), Parallelism::Rayon, false).unwrap();

    let part = tempfile::tempdir().unwrap();
    let sim = protofed::orchestrator::Simulation::new(&cfg, &world, Parallelism::Rayon).unwrap();
    let mut st = sim.initial_state().unwrap();
    sim.run_slice(&mut st).unwrap();
    st.save(&part.path().join(experiments::CHECKPOINT_FILE)).unwrap();
    experiments::run_to_dir(&cfg, &world, part.path(), Parallelism::Rayon, true).unwrap();
    for f in ["slices.jsonl", "metrics.csv", "report.json"] {
        assert_eq!(read(&full.path().join(f)), read(&part.path().join(f)), "{f}");
    }
}

#[test]
fn variants_change_exactly_one_switch() {
    let base = tiny();
    let full = toml::Table::try_from(&base).unwrap();
    for v in Variant::ALL {
        let t = toml::Table::try_from(v.apply(&base)).unwrap();
        let mut diffs = Vec::new();
        for (section, value) in &t {
            if let (Some(a), Some(b)) = (value.as_table(), full[section].as_table()) {
                diffs.extend(a.iter().filter(|(k, x)| b.get(*k) != Some(*x)).map(|(k, _)| format!("{section}.{k}")));
            } else if full[section] != *value {
                diffs.push(section.clone());
            }
        }
        let expected: &[&str] = match v {
            Variant::Full => &[],
            Variant::NoAlignment => &["ablation.alignment"],
            Variant::NoShortPrompt => &["ablation.short_prompt"],
            Variant::NoLongPrompt => &["ablation.long_prompt"],
            Variant::StaticPrototypes => &["ablation.static_prototypes"],
            Variant::MedianAggregator | Variant::BarycenterAggregator => &["server.aggregator"],
        };
        assert_eq!(diffs, expected, "{}", v.name());
    }
}

#[test]
fn ablation_table_has_seven_rows_and_is_deterministic() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let rows = experiments::ablate(&cfg, a.path(), Parallelism::Rayon).unwrap();
    experiments::ablate(&cfg, b.path(), Parallelism::Rayon).unwrap();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.seeds == 2));
    assert_eq!(rows[0].variant, "full");
    assert_eq!(read(&a.path().join("ablation.csv")).lines().count(), 8);
    assert_eq!(read(&a.path().join("ablation_seeds.csv")).lines().count(), 15);
    for f in ["ablation.csv", "ablation_seeds.csv"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn dp_sweep_rows_and_epsilon() {
    let mut cfg = tiny();
    cfg.experiment.seeds = vec![3];
    let dir = tempfile::tempdir().unwrap();
    let rows = experiments::dp_sweep(&cfg, dir.path(), Parallelism::Rayon).unwrap();
    assert_eq!(rows.iter().map(|r| r.sigma).collect::<Vec<_>>(), vec![0.0, 0.2, 0.4, 0.8]);
    assert!(rows[0].epsilon.is_infinite());
    assert!(rows.windows(2).all(|w| w[1].epsilon < w[0].epsilon));
    // Closed form: releases are period driven, so epsilon scales as 1/sigma.
    assert!((rows[1].epsilon / rows[3].epsilon - 4.0).abs() < 1e-12);

    let mut plain = cfg.clone();
    plain.dp.sigma = 0.0;
    let world = experiments::load_or_generate(&plain, None).unwrap();
    let run = experiments::simulate(&plain, &world, Parallelism::Rayon).unwrap();
    assert_eq!(rows[0].final_ndcg10.to_bits(), run.report.final_ndcg10.to_bits());
    assert_eq!(rows[0].af.to_bits(), run.report.af.to_bits());
    assert_eq!(read(&dir.path().join("dp_sweep.csv")).lines().count(), 5);
}

#[test]
fn certificates_pass_fail_and_round_trip() {
    let mut cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let cert = experiments::verify_theory(&cfg, dir.path(), Parallelism::Rayon).unwrap();
    assert!(cert.passed);
    let back = experiments::read_certificate(&dir.path().join(experiments::CERTIFICATE_FILE)).unwrap();
    assert_eq!(back, cert);

    cfg.theory.corruption = Corruption::FlipEtaSign;
    let bad = experiments::verify_theory(&cfg, dir.path(), Parallelism::Rayon).unwrap();
    assert!(!bad.passed);
}
