//! Commands behind the command-line driver. Every command writes plain files
//! into an output directory: CSV tables and line-JSON, so plots live elsewhere.
//!
//! Output of `run`:
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | resolved configuration |
//! | `slices.jsonl` | one [`SliceRecord`] per trained slice |
//! | `checkpoint.json` | [`RunState`] after the latest slice |
//! | `metrics.csv` | final-model ranking metrics per slice |
//! | `report.json` | the [`MetricsReport`] |
//! | `timing.json` | wall-clock seconds; the only nondeterministic file |

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::orchestrator::{RunOutput, RunState, Simulation, SliceRecord};
use crate::par::Parallelism;
use crate::server::AggregatorKind;
use crate::theory::{self, TheoryCertificate};
use crate::world::{self, World};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAlignment,
    NoShortPrompt,
    NoLongPrompt,
    StaticPrototypes,
    MedianAggregator,
    BarycenterAggregator,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoAlignment,
        Variant::NoShortPrompt,
        Variant::NoLongPrompt,
        Variant::StaticPrototypes,
        Variant::MedianAggregator,
        Variant::BarycenterAggregator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAlignment => "no_alignment",
            Variant::NoShortPrompt => "no_short_prompt",
            Variant::NoLongPrompt => "no_long_prompt",
            Variant::StaticPrototypes => "static_prototypes",
            Variant::MedianAggregator => "median_aggregator",
            Variant::BarycenterAggregator => "barycenter_aggregator",
        }
    }

    /// `cfg` with exactly one switch changed (none for `Full`).
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoAlignment => c.ablation.alignment = false,
            Variant::NoShortPrompt => c.ablation.short_prompt = false,
            Variant::NoLongPrompt => c.ablation.long_prompt = false,
            Variant::StaticPrototypes => c.ablation.static_prototypes = true,
            Variant::MedianAggregator => c.server.aggregator = AggregatorKind::Median,
            Variant::BarycenterAggregator => c.server.aggregator = AggregatorKind::Barycenter,
        }
        c
    }
}

/// Headline numbers of one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub final_ndcg10: f64,
    pub af: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub mean_steps_to_95: f64,
    pub uploads: u64,
}

impl RunSummary {
    pub fn new(seed: u64, r: &MetricsReport) -> Self {
        Self {
            seed,
            final_ndcg10: r.final_ndcg10,
            af: r.af,
            bwt: r.bwt,
            fwt: r.fwt,
            mean_steps_to_95: r.mean_steps_to_95,
            uploads: r.uploads,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a world file, or generate the world described by `cfg`.
pub fn load_or_generate(cfg: &RunConfig, path: Option<&Path>) -> Result<World> {
    match path {
        Some(p) => {
            let f = File::open(p).map_err(|e| Error::Config(format!("cannot open world {}: {e}", p.display())))?;
            world::read_world(BufReader::new(f))
        }
        None => world::generate_world(&cfg.world),
    }
}

/// Generate the configured world into `out/world.jsonl`.
pub fn write_world_file(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    let path = out.join("world.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    world::write_world(&world::generate_world(&cfg.world)?, &mut w)?;
    w.flush()?;
    Ok(path)
}

/// Run all slices in memory, without touching the file system.
pub fn simulate(cfg: &RunConfig, world: &World, mode: Parallelism) -> Result<RunOutput> {
    let sim = Simulation::new(cfg, world, mode)?;
    let state = sim.initial_state()?;
    sim.run(state, |_, _| Ok(()))
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    slice: usize,
    queries: usize,
    hr5: f64,
    hr10: f64,
    hr20: f64,
    ndcg5: f64,
    ndcg10: f64,
    ndcg20: f64,
    mrr5: f64,
    mrr10: f64,
    mrr20: f64,
    /// Accuracy of the model trained through this slice on this slice.
    ndcg10_at_training: f64,
    steps_to_95: u64,
}

fn metrics_rows(report: &MetricsReport, records: &[SliceRecord]) -> Vec<MetricsRow> {
    report
        .per_slice
        .iter()
        .zip(records)
        .enumerate()
        .map(|(t, (s, rec))| MetricsRow {
            slice: t,
            queries: s.queries,
            hr5: s.hr[0],
            hr10: s.hr[1],
            hr20: s.hr[2],
            ndcg5: s.ndcg[0],
            ndcg10: s.ndcg[1],
            ndcg20: s.ndcg[2],
            mrr5: s.mrr[0],
            mrr10: s.mrr[1],
            mrr20: s.mrr[2],
            ndcg10_at_training: rec.accuracy_row.last().copied().unwrap_or(0.0),
            steps_to_95: rec.steps_to_95,
        })
        .collect()
}

/// A run that writes its files into `out`. With `resume`, an existing
/// checkpoint in `out` is continued; it must carry the same configuration.
pub fn run_to_dir(cfg: &RunConfig, world: &World, out: &Path, mode: Parallelism, resume: bool) -> Result<RunOutput> {
    create_dir(out)?;
    let started = Instant::now();
    let sim = Simulation::new(cfg, world, mode)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let state = if resume && ckpt.exists() {
        let st = RunState::load(&ckpt)?;
        log::info!("resuming {} at slice {}", ckpt.display(), st.next_slice);
        st
    } else {
        sim.initial_state()?
    };
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let slices = out.join("slices.jsonl");
    write_jsonl(&slices, &state.records)?;
    let output = sim.run(state, |_, st| {
        write_jsonl(&slices, &st.records)?;
        st.save(&ckpt)
    })?;
    write_csv(&out.join("metrics.csv"), &metrics_rows(&output.report, &output.state.records))?;
    write_json_pretty(&out.join("report.json"), &output.report)?;
    write_json_pretty(&out.join("timing.json"), &serde_json::json!({ "seconds": started.elapsed().as_secs_f64() }))?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub summary: RunSummary,
}

/// Per-seed line of `ablation_seeds.csv` and `dp_sweep_seeds.csv`.
#[derive(Debug, Serialize)]
struct SeedRow {
    setting: String,
    seed: u64,
    final_ndcg10: f64,
    af: f64,
    bwt: f64,
    fwt: f64,
    mean_steps_to_95: f64,
    uploads: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
}

impl SeedRow {
    fn new(setting: String, s: &RunSummary, epsilon: Option<f64>) -> Self {
        Self {
            setting,
            seed: s.seed,
            final_ndcg10: s.final_ndcg10,
            af: s.af,
            bwt: s.bwt,
            fwt: s.fwt,
            mean_steps_to_95: s.mean_steps_to_95,
            uploads: s.uploads,
            epsilon,
        }
    }
}

/// One row of `ablation.csv`: means over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: usize,
    pub final_ndcg10: f64,
    pub af: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub mean_steps_to_95: f64,
}

/// `variants` on the world of `seed`, in order.
pub fn run_variants(cfg: &RunConfig, seed: u64, variants: &[Variant], mode: Parallelism) -> Result<Vec<VariantResult>> {
    let base = cfg.clone().with_seed(seed);
    let world = world::generate_world(&base.world)?;
    variants
        .iter()
        .map(|&v| {
            log::info!("seed {seed}: {}", v.name());
            let out = simulate(&v.apply(&base), &world, mode)?;
            Ok(VariantResult { variant: v, summary: RunSummary::new(seed, &out.report) })
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn ablation_table(results: &[VariantResult]) -> Vec<AblationRow> {
    Variant::ALL
        .iter()
        .filter_map(|&v| {
            let rs: Vec<&RunSummary> = results.iter().filter(|r| r.variant == v).map(|r| &r.summary).collect();
            (!rs.is_empty()).then(|| AblationRow {
                variant: v.name().into(),
                seeds: rs.len(),
                final_ndcg10: mean(rs.iter().map(|r| r.final_ndcg10)),
                af: mean(rs.iter().map(|r| r.af)),
                bwt: mean(rs.iter().map(|r| r.bwt)),
                fwt: mean(rs.iter().map(|r| r.fwt)),
                mean_steps_to_95: mean(rs.iter().map(|r| r.mean_steps_to_95)),
            })
        })
        .collect()
}

/// All seven variants on every configured seed. Writes `ablation.csv` (one
/// row per variant) and `ablation_seeds.csv` (one row per variant and seed).
pub fn ablate(cfg: &RunConfig, out: &Path, mode: Parallelism) -> Result<Vec<AblationRow>> {
    create_dir(out)?;
    let mut all = Vec::new();
    for &seed in &cfg.experiment.seeds {
        all.extend(run_variants(cfg, seed, &Variant::ALL, mode)?);
    }
    let table = ablation_table(&all);
    let rows: Vec<SeedRow> = all.iter().map(|r| SeedRow::new(r.variant.name().into(), &r.summary, None)).collect();
    write_csv(&out.join("ablation_seeds.csv"), &rows)?;
    write_csv(&out.join("ablation.csv"), &table)?;
    Ok(table)
}

/// One row of `dp_sweep.csv`. `epsilon` is infinite without noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub seeds: usize,
    pub final_ndcg10: f64,
    pub af: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub sigma: f64,
    pub epsilon: f64,
    pub summary: RunSummary,
}

/// Every sigma in `grid` on the world of `seed`; the world and all other
/// streams are shared across sigma.
pub fn run_sigmas(cfg: &RunConfig, seed: u64, grid: &[f64], mode: Parallelism) -> Result<Vec<SweepResult>> {
    let base = cfg.clone().with_seed(seed);
    let world = world::generate_world(&base.world)?;
    grid.iter()
        .map(|&sigma| {
            log::info!("seed {seed}: sigma {sigma}");
            let mut c = base.clone();
            c.dp.sigma = sigma;
            let out = simulate(&c, &world, mode)?;
            Ok(SweepResult {
                sigma,
                epsilon: out.report.epsilon.unwrap_or(f64::INFINITY),
                summary: RunSummary::new(seed, &out.report),
            })
        })
        .collect()
}

pub fn sweep_table(grid: &[f64], results: &[SweepResult]) -> Vec<SweepRow> {
    grid.iter()
        .map(|&sigma| {
            let rs: Vec<&SweepResult> = results.iter().filter(|r| r.sigma == sigma).collect();
            SweepRow {
                sigma,
                seeds: rs.len(),
                final_ndcg10: mean(rs.iter().map(|r| r.summary.final_ndcg10)),
                af: mean(rs.iter().map(|r| r.summary.af)),
                epsilon: mean(rs.iter().map(|r| r.epsilon)),
            }
        })
        .collect()
}

/// Writes `dp_sweep.csv` and `dp_sweep_seeds.csv`.
pub fn dp_sweep(cfg: &RunConfig, out: &Path, mode: Parallelism) -> Result<Vec<SweepRow>> {
    create_dir(out)?;
    let grid = &cfg.experiment.sigma_grid;
    let mut all = Vec::new();
    for &seed in &cfg.experiment.seeds {
        all.extend(run_sigmas(cfg, seed, grid, mode)?);
    }
    let table = sweep_table(grid, &all);
    let rows: Vec<SeedRow> = all.iter().map(|r| SeedRow::new(format!("sigma={}", r.sigma), &r.summary, Some(r.epsilon))).collect();
    write_csv(&out.join("dp_sweep_seeds.csv"), &rows)?;
    write_csv(&out.join("dp_sweep.csv"), &table)?;
    Ok(table)
}

/// Run the certification suites and write `certificate.json`.
pub fn verify_theory(cfg: &RunConfig, out: &Path, mode: Parallelism) -> Result<TheoryCertificate> {
    create_dir(out)?;
    let cert = theory::verify_theory(cfg.seed, &cfg.theory, mode)?;
    write_json_pretty(&out.join(CERTIFICATE_FILE), &cert)?;
    Ok(cert)
}

pub fn read_certificate(path: &Path) -> Result<TheoryCertificate> {
    let cert: TheoryCertificate = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if cert.format != theory::CERTIFICATE_FORMAT || cert.version != theory::CERTIFICATE_VERSION {
        return Err(Error::State(format!("{}: unsupported certificate {} v{}", path.display(), cert.format, cert.version)));
    }
    Ok(cert)
}
