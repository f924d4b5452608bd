//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! The property checks live in the core crate's integration tests as plain
//! functions, registered there as tests, and are pulled in here by path, so
//! both runs execute the same code.

// The oracle is also included by two of the shared test files.
#![allow(clippy::duplicate_mod)]

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

#[allow(dead_code)]
#[path = "../../core/tests/evaluation_fixture.rs"]
mod evaluation_fixture;
#[allow(dead_code)]
#[path = "../../core/tests/gradients.rs"]
mod gradients;
#[allow(dead_code)]
#[path = "../../core/tests/loss_oracle.rs"]
mod loss_oracle;
#[allow(dead_code)]
#[path = "../../core/tests/sampler_stats.rs"]
mod sampler_stats;
#[allow(dead_code)]
#[path = "../../core/tests/training.rs"]
mod training;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use candle_core::Tensor;
use cig_cli::{fuse_pairs, FusionSidecar, PairSummary, RunManifest};
use cig_cli::sweep::SweepRow;
use cig_core::config::{Ablation, Config, FusionMode};
use cig_core::data::{build_synthetic_dataset, split_folds, StructuralVariation, SyntheticSpec};
use cig_core::evaluation::{identify_minorities, PerCategoryReport};
use cig_core::fusion::{split_channels, Extractors};
use cig_core::losses::{reconstruction_loss, ssim_batch, Reduction, SsimParams};
use cig_core::nn::{device, Init, ParamGroup, ParamStore};
use cig_core::sampler::SamplerKind;
use cig_core::training::run_training;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

/// Runs one criterion, treating a panic inside the shared checks as a failure.
fn criterion(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(panic_message(p)));
    let elapsed = start.elapsed();
    let result = match (result, limit) {
        (Ok(_), Some(l)) if elapsed > l => Err(format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), l.as_secs())),
        (r, _) => r,
    };
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    println!("{tag} [{id:2}] {name} ({:.1}s): {detail}", elapsed.as_secs_f64());
    result.is_ok()
}

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(v, shape, &device()).unwrap()
}

fn loss_oracle() -> Check {
    loss_oracle::hundred_random_cases_match_straight_line_formulas();
    loss_oracle::batched_ssim_matches_per_image_formula();
    Ok("100 cases of L_SG, L_CG, L_RC, CE, L_G, L_C within 1e-10".into())
}

fn gradient_suite() -> Check {
    gradients::structural_loss_gradients_in_all_three_images();
    gradients::categorical_loss_gradients();
    gradients::cross_entropy_gradient();
    gradients::reconstruction_loss_gradients_in_features_and_extractors();
    gradients::generate_then_ssim_path_unet();
    gradients::generate_then_ssim_path_light_decoder();
    gradients::mean_generated_pixel_in_extractor_parameters();
    gradients::logits_in_input_pixels();
    Ok("losses < 1e-4, generate-then-SSIM path < 1e-3".into())
}

fn ssim_properties() -> Check {
    let p = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let shape = [50, 1, 8, 8];
    let x: Vec<f64> = (0..50 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = (0..50 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let (tx, ty) = (tensor(&x, &shape), tensor(&y, &shape));
    let same: Vec<f64> = ssim_batch(&tx, &tx, &p).unwrap().to_vec1().unwrap();
    let worst_identity = same.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    ensure(worst_identity <= 1e-9, format!("ssim(X, X) off by {worst_identity:e}"))?;
    let xy: Vec<f64> = ssim_batch(&tx, &ty, &p).unwrap().to_vec1().unwrap();
    let yx: Vec<f64> = ssim_batch(&ty, &tx, &p).unwrap().to_vec1().unwrap();
    let worst_sym = xy.iter().zip(&yx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst_sym <= 1e-12, format!("asymmetry {worst_sym:e}"))?;

    let zeros = tensor(&[0.0; 64], &[1, 1, 8, 8]);
    let ones = tensor(&[1.0; 64], &[1, 1, 8, 8]);
    let got = ssim_batch(&zeros, &ones, &p).unwrap().to_vec1::<f64>().unwrap()[0];
    let want = oracle::C1 / (1.0 + oracle::C1);
    ensure((got - want).abs() <= 1e-10, format!("ssim(0, 1) = {got}, want {want}"))?;
    Ok(format!("identity err {worst_identity:.1e}, 50 pairs symmetric, ssim(0, 1) = {got:.6e}"))
}

fn sampler_statistics() -> Check {
    let inv = sampler_stats::left_frequency(SamplerKind::InverseRatio, 1);
    ensure((0.18..=0.22).contains(&inv), format!("inverse-ratio left frequency {inv}"))?;
    let eq = sampler_stats::left_frequency(SamplerKind::Equal, 2);
    ensure((0.48..=0.52).contains(&eq), format!("equal left frequency {eq}"))?;
    sampler_stats::boundary_categories_emit_their_only_neighbour();
    Ok(format!("inverse-ratio {inv:.4}, equal {eq:.4}, boundaries exact"))
}

fn channel_split() -> Check {
    let s = split_channels(512, 0.2).map_err(|e| e.to_string())?;
    ensure(
        (s.c_structural, s.c_categorical) == (102, 410),
        format!("C=512 tau=0.2 gave ({}, {})", s.c_structural, s.c_categorical),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let c = rng.random_range(20..=1024usize);
        let tau = rng.random_range(0.05..0.95);
        let s = split_channels(c, tau).map_err(|e| format!("C={c} tau={tau}: {e}"))?;
        ensure(
            s.c_structural + s.c_categorical == c && s.c_structural == (tau * c as f64).floor() as usize,
            format!("C={c} tau={tau} gave ({}, {})", s.c_structural, s.c_categorical),
        )?;
    }
    Ok("(102, 410) and 50 random pairs".into())
}

fn reconstruction_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, c) = (2, 24);
    let f: Vec<f64> = (0..b * c * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let f = tensor(&f, &[b, c, 2, 2]);
    let split = split_channels(c, 0.25).unwrap();
    let selection = Extractors::channel_selection(c, split).unwrap();
    let l0 = reconstruction_loss(&f, &selection.separate(&f).unwrap(), Reduction::Sum)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    ensure(l0 == 0.0, format!("channel selection gave L_RC = {l0:e}"))?;
    let mut store = ParamStore::new();
    let random = Extractors::new(c, split, &mut Init::new(&mut store, &mut rng, ParamGroup::Generation)).unwrap();
    let l1 = reconstruction_loss(&f, &random.separate(&f).unwrap(), Reduction::Sum)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    ensure(l1 > 0.0, format!("random extractors gave L_RC = {l1}"))?;
    Ok(format!("selection 0, random {l1:.3}"))
}

fn training_invariants() -> Check {
    training::optimizer_partition_holds_at_every_step_of_a_50_step_run();
    training::continued_phase_freezes_generation_parameters();
    training::checkpoint_round_trip_and_resume_are_bitwise();
    Ok("partition over 50 steps, frozen generator in CT, bitwise resume".into())
}

fn evaluation_fixtures() -> Check {
    evaluation_fixture::twenty_record_fixture_matches_recount();
    evaluation_fixture::weighted_recombination_matches_overall();
    evaluation_fixture::dr_shaped_fixture_flags_the_four_weak_categories();
    Ok("20-record tally exact, recombination, gap-rule flags".into())
}

// Desk-scale toy experiment shared by criteria 8 to 10.
const TOY_SEEDS: u64 = 3;
const TOY_N: usize = 2000;
const TOY_CHANNELS: usize = 16;
const TOY_LR_ENCODER: f64 = 1e-3;
const CTRL_PAIRS: usize = 50;
const CTRL_SEED: u64 = 99;

struct SeedResult {
    base: PerCategoryReport,
    ig: PerCategoryReport,
    full: PerCategoryReport,
    minorities: BTreeSet<u32>,
    control: PairSummary,
}

fn toy_config(seed: u64, ablation: Ablation) -> Config {
    let mut cfg = Config::default();
    cfg.model.input_size = 16;
    cfg.model.channels = TOY_CHANNELS;
    cfg.train.lr_encoder = TOY_LR_ENCODER;
    cfg.train.seed = seed;
    cfg.apply_ablation(ablation);
    cfg.resolve().unwrap()
}

fn toy_experiment() -> Vec<SeedResult> {
    (0..TOY_SEEDS)
        .map(|seed| {
            let spec = SyntheticSpec {
                k: 5,
                proportions: SyntheticSpec::proportions_from_weights(&[74.0, 7.0, 15.0, 3.0, 2.0]),
                image_size: 16,
                overlap_sigma: 0.35,
                structural_variation: StructuralVariation::default(),
                seed,
            };
            let ds = build_synthetic_dataset(&spec, TOY_N).unwrap();
            let fold = split_folds(&ds, 5, seed).unwrap().folds.remove(0);
            let train = |a| {
                let cfg = toy_config(seed, a);
                (run_training(&cfg, &ds, &fold, None).unwrap(), cfg)
            };
            let (base, _) = train(Ablation::Base);
            let (ig, _) = train(Ablation::Ig);
            let (full, cfg) = train(Ablation::Full);
            let minorities = identify_minorities(&base.report, cfg.eval.gap_threshold);
            let mode = cfg.fusion.mode.unwrap_or(FusionMode::Sf);
            let (pairs, _) =
                fuse_pairs(&full.state.model, &cfg, &ds, &fold.validation, CTRL_PAIRS, CTRL_SEED, mode).unwrap();
            assert_eq!(pairs.len(), CTRL_PAIRS);
            let r = SeedResult {
                base: base.report,
                ig: ig.report,
                full: full.report,
                minorities,
                control: PairSummary::of(&pairs),
            };
            println!(
                "       seed {seed}: acc base {:.2} ig {:.2} full {:.2}; minorities {:?}; fused -> r {} -> m {}",
                r.base.overall.acc, r.ig.overall.acc, r.full.overall.acc, r.minorities, r.control.to_reference, r.control.to_main
            );
            r
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn minority_acc(report: &PerCategoryReport, labels: &BTreeSet<u32>) -> f64 {
    report.aggregate_over(labels).acc.unwrap_or(0.0)
}

fn imbalance_gain(results: &[SeedResult]) -> Check {
    let base_min = median(results.iter().map(|r| minority_acc(&r.base, &r.minorities)).collect());
    let full_min = median(results.iter().map(|r| minority_acc(&r.full, &r.minorities)).collect());
    let base_acc = median(results.iter().map(|r| r.base.overall.acc).collect());
    let full_acc = median(results.iter().map(|r| r.full.overall.acc).collect());
    let detail = format!(
        "median minority acc base {base_min:.2} full {full_min:.2} (gain {:+.2}); overall base {base_acc:.2} full {full_acc:.2}",
        full_min - base_min
    );
    ensure(full_min - base_min >= 3.0 && full_acc >= base_acc - 1.0, detail.clone())?;
    Ok(detail)
}

fn ablation_order(results: &[SeedResult]) -> Check {
    let base = median(results.iter().map(|r| r.base.overall.acc).collect());
    let ig = median(results.iter().map(|r| r.ig.overall.acc).collect());
    let full = median(results.iter().map(|r| r.full.overall.acc).collect());
    let detail = format!("median acc full {full:.2}, ig {ig:.2}, base {base:.2}");
    ensure(full >= ig && ig >= base, detail.clone())?;
    Ok(detail)
}

/// Passes when at least two of the three seeds meet both conditions.
fn controllability(results: &[SeedResult]) -> Check {
    let mut lines = Vec::new();
    let mut passing = 0;
    for (seed, r) in results.iter().enumerate() {
        let c = &r.control;
        let ok = c.to_reference > c.to_main && c.mean_ssim_main_fused > c.mean_ssim_ref_fused;
        passing += ok as usize;
        lines.push(format!(
            "seed {seed} r {} m {} ssim_m {:.3} ssim_r {:.3}",
            c.to_reference, c.to_main, c.mean_ssim_main_fused, c.mean_ssim_ref_fused
        ));
    }
    let detail = format!("{passing}/{} seeds pass; {}", results.len(), lines.join("; "));
    ensure(passing * 3 >= results.len() * 2, detail.clone())?;
    Ok(detail)
}

fn cig(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cig"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CIG_RUNS_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`cig {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn parse<T: for<'de> serde::Deserialize<'de>>(text: &str, what: &str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| format!("{what}: {e}"))
}

fn cli_pipeline() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let spec = SyntheticSpec {
        k: 5,
        proportions: SyntheticSpec::proportions_from_weights(&[74.0, 7.0, 15.0, 3.0, 2.0]),
        image_size: 16,
        overlap_sigma: 0.35,
        structural_variation: StructuralVariation::default(),
        seed: 0,
    };
    fs::write(dir.join("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    cig(&["synth", "spec.json", "--n-total", "500", "--out", "data"], dir)?;

    let mut cfg = toy_config(0, Ablation::Full);
    cfg.data.root = Some(dir.join("data"));
    cfg.train.joint_steps = 200;
    cfg.train.continued_training_batches = 20;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let run = cig(&["train", "--config", "config.json", "--name", "toy", "--out", "runs"], dir)?;
    let run = dir.join(run.trim());
    let manifest: RunManifest = parse(&fs::read_to_string(run.join("manifest.json")).unwrap(), "manifest")?;
    ensure(manifest.finished_at.is_some(), "manifest not finished")?;

    let report: PerCategoryReport = parse(&cig(&["report", run.to_str().unwrap()], dir)?, "report")?;
    ensure(report.per_category.len() == 5, "report does not cover K = 5")?;

    let ckpt = run.join(&manifest.artifacts["checkpoint"]);
    let ckpt = ckpt.to_str().unwrap();
    let pick = |c: &str| {
        let mut v: Vec<_> = fs::read_dir(dir.join("data").join(c)).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v.remove(0)
    };
    let (main, reference) = (pick("2"), pick("3"));
    let single: FusionSidecar = parse(
        &cig(
            &[
                "fuse", "--checkpoint", ckpt, "--main", main.to_str().unwrap(), "--ref", reference.to_str().unwrap(),
                "--out", "fused/one.png",
            ],
            dir,
        )?,
        "fuse sidecar",
    )?;
    ensure(dir.join("fused/one.png").is_file(), "fusion image not written")?;
    let batch: PairSummary = parse(
        &cig(&["fuse", "--checkpoint", ckpt, "--dataset", "data", "--pairs", "20", "--out", "fused/batch"], dir)?,
        "fuse summary",
    )?;
    ensure(batch.pairs == 20, format!("{} pairs fused", batch.pairs))?;

    let mut sweep_cfg = cfg.clone();
    sweep_cfg.train.joint_steps = 60;
    sweep_cfg.train.continued_training_batches = 10;
    fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&sweep_cfg).unwrap()).unwrap();
    let csv = cig(
        &["sweep", "--config", "sweep.json", "--param", "tau=0.1,0.2", "--max-folds", "2", "--out", "runs"],
        dir,
    )?;
    let csv = dir.join(csv.trim());
    let mut reader = csv::Reader::from_path(&csv).map_err(|e| e.to_string())?;
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    ensure(
        header == ["tau", "acc", "mae", "acc_spread", "mae_spread", "folds"],
        format!("sweep header {header:?}"),
    )?;
    let rows = reader.records().count();
    let json: Vec<SweepRow> = parse(&fs::read_to_string(csv.with_file_name("sweep.json")).unwrap(), "sweep rows")?;
    ensure(rows == 2 && json.len() == 2, format!("{rows} csv rows, {} json rows", json.len()))?;
    Ok(format!(
        "val acc {:.1}, single fuse ssim_m {:.3}, sweep acc {:.1}/{:.1}",
        report.overall.acc, single.ssim_main_fused, json[0].acc, json[1].acc
    ))
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let mut ok = vec![
        criterion(1, "loss formulas match the oracle", secs(10), loss_oracle),
        criterion(2, "gradient suite", secs(60), gradient_suite),
        criterion(3, "SSIM properties", None, ssim_properties),
        criterion(4, "sampler statistics", None, sampler_statistics),
        criterion(5, "channel split arithmetic", None, channel_split),
        criterion(6, "reconstruction identity", None, reconstruction_identity),
        criterion(7, "optimizer partition, freeze and resume", None, training_invariants),
    ];

    let start = Instant::now();
    let results = catch_unwind(toy_experiment).map_err(panic_message);
    let toy_time = start.elapsed();
    println!("       toy experiment took {:.0}s", toy_time.as_secs_f64());
    let with_results = |f: fn(&[SeedResult]) -> Check| {
        let r = results.as_ref().map_err(Clone::clone);
        move || r.and_then(|r| f(r))
    };
    ok.extend([
        criterion(8, "toy imbalance experiment", None, || {
            ensure(toy_time < Duration::from_secs(15 * 60), format!("experiment took {:.0}s", toy_time.as_secs_f64()))?;
            with_results(imbalance_gain)()
        }),
        criterion(9, "ablation ordering", None, with_results(ablation_order)),
        criterion(10, "fusion controllability", None, with_results(controllability)),
        criterion(11, "evaluation fixtures", None, evaluation_fixtures),
        criterion(12, "CLI synth, train, report, fuse, sweep", secs(20 * 60), cli_pipeline),
    ]);

    let passed = ok.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", ok.len());
    if passed == ok.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
