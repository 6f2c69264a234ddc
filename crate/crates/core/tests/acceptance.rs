//! Acceptance suite. One PASS/FAIL line per criterion; the process exits
//! non-zero if any fails, except for the known failures listed in
//! `KNOWN_FAILURES` (see README). `PATCHGD_ACCEPT=1,4,7` runs a subset.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use common::*;
use patchgd::commands::{cmd_generate, cmd_train, RunConfig, RunManifest, Split, TrainOptions};
use patchgd::commands::{BEST_CHECKPOINT, LAST_CHECKPOINT, RUNLOG_FILE, TRAIN_DIR, VAL_DIR};
use patchgd::memcost::{estimate_gd, estimate_patchgd, max_feasible_batch};
use patchgd::metrics::qwk;
use patchgd::model::{CompositeKind, CompositeModel, ModelConfig};
use patchgd::patching::{GridSpec, Image, SamplerState};
use patchgd::tensor::{DType, Optimizer, OptimizerKind, ParamStore};
use patchgd::trainer::{lr_schedule, Mode, Network, RunLog, TrainConfig, Trainer};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> std::result::Result<f64, String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()));
    }
    Ok(t.as_secs_f64())
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    for case in layer_cases() {
        let (e32, e64) = (case.check::<f32>(), case.check::<f64>());
        ensure!(e32 < 1e-3, "{} f32 rel err {e32:e}", case.name);
        ensure!(e64 < 1e-6, "{} f64 rel err {e64:e}", case.name);
        worst32 = worst32.max(e32);
        worst64 = worst64.max(e64);
    }
    for seed in 0..3 {
        let fx = InnerFixture::new(seed);
        let (e32, e64) = (inner_graph_check::<f32>(&fx), inner_graph_check::<f64>(&fx));
        ensure!(e32 < 1e-3, "inner iteration (fixture {seed}) f32 rel err {e32:e}");
        ensure!(e64 < 1e-6, "inner iteration (fixture {seed}) f64 rel err {e64:e}");
        worst32 = worst32.max(e32);
        worst64 = worst64.max(e64);
    }
    let t = within(Duration::from_secs(120), start)?;
    Ok(format!(
        "{} layers + inner iteration; max rel err f32 {worst32:.2e}, f64 {worst64:.2e} ({t:.1}s)",
        layer_cases().len()
    ))
}

fn snapshot(store: &ParamStore<f64>) -> BTreeMap<String, Vec<f64>> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().to_vec()))
        .collect()
}

fn gd_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        mode: Mode::Patchgd,
        patch_size: 16,
        patches_per_step: Some(16),
        inner_iterations: Some(1),
        grad_accum: 1,
        batch_size: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        embed_dim: 8,
        head_channels: 8,
        head_layers: 2,
        ..ModelConfig::default()
    };
    let mut pgd = Trainer::<f64>::new(cfg.clone(), model.clone()).map_err(|e| e.to_string())?;

    let mut store = ParamStore::<f64>::new();
    let composite = CompositeModel::build(
        CompositeKind::Patchwise,
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(1),
        &model,
        16,
    )
    .map_err(|e| e.to_string())?;
    ensure!(store.len() == pgd.store.len(), "parameter sets differ");
    for (_, p) in pgd.store.iter() {
        let id = store.id(&p.name).ok_or(format!("composite lacks {}", p.name))?;
        *store.value_mut(id) = p.value.clone();
    }
    let mut gd = Trainer::<f64>::new(
        TrainConfig {
            mode: Mode::Gd,
            ..cfg.clone()
        },
        model,
    )
    .map_err(|e| e.to_string())?;
    gd.opt = Optimizer::new(OptimizerKind::Adam, &store, cfg.adam);
    gd.store = store;
    gd.net = Network::Composite(composite);

    let mut r = ChaCha8Rng::seed_from_u64(2);
    let images: Vec<Image> = (0..2)
        .map(|_| Image::new(64, 64, 1, (0..64 * 64).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let refs: Vec<&Image> = images.iter().collect();
    let labels = [3, 8];

    let mut worst = 0.0f64;
    for it in 0..5 {
        let (a0, b0) = (snapshot(&pgd.store), snapshot(&gd.store));
        let stats = pgd
            .patchgd_outer_iteration(&refs, &labels, cfg.lr, &mut r)
            .map_err(|e| e.to_string())?;
        ensure!(
            stats.updates == 1,
            "expected one update per outer iteration, got {}",
            stats.updates
        );
        gd.gd_iteration(&refs, &labels, cfg.lr).map_err(|e| e.to_string())?;
        let (a1, b1) = (snapshot(&pgd.store), snapshot(&gd.store));
        let mut moved = 0.0f64;
        for name in a0.keys() {
            let da: Vec<f64> = a1[name].iter().zip(&a0[name]).map(|(x, y)| x - y).collect();
            let db: Vec<f64> = b1[name].iter().zip(&b0[name]).map(|(x, y)| x - y).collect();
            moved = moved.max(da.iter().fold(0.0, |m, v| m.max(v.abs())));
            let e = rel_err(&da, &db, 1e-9);
            ensure!(e < 1e-5, "iteration {it}: update of {name} differs by {e:e}");
            worst = worst.max(e);
        }
        ensure!(moved > 1e-5, "iteration {it} did not move the parameters");
    }
    let t = within(Duration::from_secs(60), start)?;
    Ok(format!("5 iterations, max rel update diff {worst:.2e} ({t:.1}s)"))
}

fn gradient_masking() -> Outcome {
    let start = Instant::now();
    for seed in 0..3 {
        let fx = InnerFixture::new(seed);
        let ids: Vec<_> = fx.store.ids().collect();
        let pos = |id| ids.iter().position(|x| *x == id).unwrap();
        let backbone = |g: &[Vec<f64>]| -> Vec<f64> {
            fx.extractor
                .param_ids()
                .iter()
                .flat_map(|&id| g[pos(id)].clone())
                .collect()
        };

        let mut z = fx.filled(&fx.store);
        let full = backbone(&fx.inner_gradients(&fx.store, &mut z));
        let isolated = flatten(&fx.isolated_backbone_gradients());
        let numeric = backbone(&fx.numeric_gradients());
        let e_iso = rel_err(&full, &isolated, 1e-4);
        let e_fd = rel_err(&isolated, &numeric, 1e-4);
        ensure!(
            e_iso < 1e-10,
            "fixture {seed}: full vs isolated graph rel err {e_iso:e}"
        );
        ensure!(
            e_fd < 1e-6,
            "fixture {seed}: isolated graph vs finite differences rel err {e_fd:e}"
        );

        // rewrite every pixel of every stale cell; the latent grid keeps the
        // values filled from the original images
        let mut other = InnerFixture::new(seed);
        for (i, img) in other.images.iter_mut().enumerate() {
            for a in 0..fx.grid.rows {
                for b in 0..fx.grid.cols {
                    if fx.cells[i].contains(&(a, b)) {
                        continue;
                    }
                    for r in a * 8..(a + 1) * 8 {
                        for c in b * 8..(b + 1) * 8 {
                            img.set(r, c, 0, 1.0 - img.get(r, c, 0));
                        }
                    }
                }
            }
        }
        let mut z = fx.filled(&fx.store);
        let perturbed = backbone(&other.inner_gradients(&other.store, &mut z));
        ensure!(
            perturbed == full,
            "fixture {seed}: stale pixels changed the backbone gradient"
        );
    }
    let t = within(Duration::from_secs(60), start)?;
    Ok(format!(
        "3 fixtures: matches isolated graph, finite differences and ignores stale cells ({t:.1}s)"
    ))
}

fn sampler_coverage() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (1usize..10, 1usize..10, any::<u64>(), prop::bool::ANY, 1usize..100);
    runner
        .run(&strategy, |(m, n, seed, half, kpick)| {
            let grid = GridSpec::new(m * 4, n * 4, 4).unwrap();
            let cells = m * n;
            let mu = if half { 0.5 } else { 1.0 };
            let want = if half { cells.div_ceil(2) } else { cells };
            let k = 1 + kpick % cells;
            let zeta = cells.div_ceil(k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = SamplerState::new(&grid, mu, &mut rng).unwrap();
            let mut seen = HashSet::new();
            for _ in 0..zeta {
                if let Some(batch) = s.next_cells(k) {
                    for &c in batch {
                        prop_assert!(c < cells);
                        prop_assert!(seen.insert(c), "cell {} sampled twice", c);
                    }
                }
            }
            prop_assert_eq!(seen.len(), want);
            prop_assert!(s.is_exhausted());
            prop_assert!(s.next_cells(k).is_none());
            Ok::<(), TestCaseError>(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "1000 randomized configs ({:.1}s)",
        start.elapsed().as_secs_f64()
    ))
}

fn memory_model() -> Outcome {
    let model = ModelConfig::default();
    let (p, k) = (64, 4);
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let extractor = model
        .build_extractor(&mut store, &mut rng, p)
        .map_err(|e| e.to_string())?;
    let head = model.build_head(&mut store, &mut rng).map_err(|e| e.to_string())?;
    let mut gd_store = ParamStore::<f32>::new();
    let gd = CompositeModel::build(CompositeKind::Gd, &mut gd_store, &mut rng, &model, p).map_err(|e| e.to_string())?;
    let (dt, opt) = (DType::F32, OptimizerKind::Adam);

    let sizes = [512, 1024, 2048];
    let mut act = Vec::new();
    let mut patch_act = Vec::new();
    for &s in &sizes {
        act.push(
            estimate_gd(&extractor, s, s, 1, dt, opt)
                .map_err(|e| e.to_string())?
                .activation_bytes,
        );
        patch_act.push(
            estimate_patchgd(&extractor, &head, s, s, k, 1, dt, opt)
                .map_err(|e| e.to_string())?
                .patch_activation_bytes,
        );
    }
    ensure!(
        act[1] == 4 * act[0] && act[2] == 4 * act[1],
        "GD activations {act:?} do not scale by 4"
    );
    ensure!(
        patch_act.iter().all(|&b| b == patch_act[0]),
        "patch activations vary: {patch_act:?}"
    );

    let big = 2048;
    let gd_report = |b: u64| estimate_gd(&gd, big, big, b, dt, opt);
    let pgd_report = |b: u64| estimate_patchgd(&extractor, &head, big, big, k, b, dt, opt);
    let budget = gd_report(2).map_err(|e| e.to_string())?.peak_bytes - 1;
    let gd_b = max_feasible_batch(gd_report, budget).map_err(|e| e.to_string())?;
    let pgd_b = max_feasible_batch(pgd_report, budget).map_err(|e| e.to_string())?;
    ensure!(gd_b == 1, "GD fits {gd_b} images in the budget, expected 1");
    ensure!(gd_b < pgd_b, "GD batch {gd_b} not below PatchGD batch {pgd_b}");
    Ok(format!(
        "GD activations {act:?} B; patch activations {} B at every size; feasible batch at {big}: GD {gd_b}, PatchGD {pgd_b}",
        patch_act[0]
    ))
}

/// Final-epoch validation accuracies of one desk configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DeskBaseline {
    gd_batch: usize,
    patchgd_batch: usize,
    gd: Vec<f64>,
    patchgd: Vec<f64>,
}

const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_TOLERANCE: f64 = 0.02;

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        embed_dim: 32,
        head_channels: 32,
        head_layers: 2,
        ..ModelConfig::default()
    };
    // At 1e-3 every head ReLU can die early and a run stalls at chance.
    cfg.train.lr = 3e-4;
    cfg.train.epochs = 30;
    cfg
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn desk_run(
    cfg: &RunConfig,
    mode: Mode,
    batch: usize,
    seed: u64,
    train: &Split,
    val: &Split,
) -> std::result::Result<f64, String> {
    let t = TrainConfig {
        mode,
        batch_size: batch,
        seed,
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::<f32>::new(t, cfg.model.clone()).map_err(|e| e.to_string())?;
    let mut log = RunLog::in_memory();
    let (tr, va) = (train.refs(), val.refs());
    trainer
        .fit((&tr, &train.labels), None, &mut log, None)
        .map_err(|e| e.to_string())?;
    Ok(trainer.evaluate(&va, &val.labels).map_err(|e| e.to_string())?.accuracy)
}

fn baseline_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/baselines/desk.json")
}

const PATCHGD_BELOW_GD: &str = "PatchGD below GD";

/// Criterion number and the exact, sole failure reason that is reported but
/// does not fail the process. Any other failure of that criterion still does.
const KNOWN_FAILURES: [(usize, &str); 1] = [(6, PATCHGD_BELOW_GD)];

fn desk_directional() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = desk_config();
    cfg.data.root = dir.path().to_path_buf();
    cmd_generate(&cfg, dir.path()).map_err(|e| e.to_string())?;
    let train = Split::load(&dir.path().join(TRAIN_DIR)).map_err(|e| e.to_string())?;
    let val = Split::load(&dir.path().join(VAL_DIR)).map_err(|e| e.to_string())?;
    let size = cfg.data.generator.image_size;

    let probe = |mode| {
        Trainer::<f32>::new(
            TrainConfig {
                mode,
                ..cfg.train.clone()
            },
            cfg.model.clone(),
        )
    };
    let gd = probe(Mode::Gd).map_err(|e| e.to_string())?;
    let pgd = probe(Mode::Patchgd).map_err(|e| e.to_string())?;
    let budget = gd.modeled_peak(size, size, 2).map_err(|e| e.to_string())? - 1;
    let feasible = |t: &Trainer<f32>| max_feasible_batch(|b| t.memory_report(size, size, b as usize), budget);
    let gd_b = feasible(&gd).map_err(|e| e.to_string())? as usize;
    let pgd_b = feasible(&pgd).map_err(|e| e.to_string())? as usize;
    ensure!(
        gd_b == 1 && pgd_b > 1,
        "budget {budget} gives GD batch {gd_b}, PatchGD batch {pgd_b}"
    );

    let mut run = DeskBaseline {
        gd_batch: gd_b,
        patchgd_batch: pgd_b,
        gd: Vec::new(),
        patchgd: Vec::new(),
    };
    for seed in DESK_SEEDS {
        run.patchgd
            .push(desk_run(&cfg, Mode::Patchgd, pgd_b, seed, &train, &val)?);
        run.gd.push(desk_run(&cfg, Mode::Gd, gd_b, seed, &train, &val)?);
        eprintln!(
            "  desk seed {seed}: patchgd {:.3}, gd {:.3}",
            run.patchgd.last().unwrap(),
            run.gd.last().unwrap()
        );
    }
    let (pm, pse) = mean_se(&run.patchgd);
    let (gm, gse) = mean_se(&run.gd);
    let secs = start.elapsed().as_secs_f64();
    let mut summary = format!(
        "PatchGD B={pgd_b} {pm:.3}±{pse:.3}, GD B={gd_b} {gm:.3}±{gse:.3} over {} seeds ({secs:.0}s)",
        DESK_SEEDS.len()
    );
    let mut failures = Vec::new();
    if pm - 0.1 < 5.0 * pse {
        failures.push("PatchGD less than 5 standard errors above chance".to_string());
    }
    if pm < gm {
        failures.push(PATCHGD_BELOW_GD.to_string());
    }
    if secs > 1800.0 {
        failures.push("over 30 minutes".to_string());
    }

    let path = baseline_path();
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let base: DeskBaseline = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let (bm, _) = mean_se(&base.patchgd);
        let (bg, _) = mean_se(&base.gd);
        if (base.gd_batch, base.patchgd_batch) != (gd_b, pgd_b) {
            failures.push(format!(
                "feasible batches changed from GD {} / PatchGD {}",
                base.gd_batch, base.patchgd_batch
            ));
        }
        if pm < bm - DESK_TOLERANCE {
            failures.push(format!("PatchGD regressed from recorded {bm:.3}"));
        }
        if pm - gm < bm - bg - DESK_TOLERANCE {
            failures.push(format!("PatchGD margin over GD regressed from recorded {:.3}", bm - bg));
        }
        summary += &format!("; recorded PatchGD {bm:.3}, GD {bg:.3}");
    } else {
        fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        let text = serde_json::to_string_pretty(&run).map_err(|e| e.to_string())?;
        fs::write(&path, text + "\n").map_err(|e| e.to_string())?;
        summary += &format!("; recorded to {}", path.display());
    }
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}: {}", failures.join("; ")))
    }
}

fn schedule_exactness() -> Outcome {
    let lr = |e: f64| lr_schedule(e, 1e-3, 2.0, 100.0);
    ensure!(lr(0.0) == 0.0, "lr(0) = {}", lr(0.0));
    ensure!(lr(2.0) == 1e-3, "lr(2) = {}", lr(2.0));
    ensure!(lr(100.0) == 5e-4, "lr(100) = {}", lr(100.0));
    let oracle = |e: f64| {
        if e < 2.0 {
            1e-3 * e / 2.0
        } else {
            1e-3 - 5e-4 * (e - 2.0) / 98.0
        }
    };
    let mut worst = 0.0f64;
    for i in 0..=1000 {
        let e = i as f64 * 0.1;
        worst = worst.max((lr(e) - oracle(e)).abs());
    }
    ensure!(
        worst < 1e-15,
        "max deviation from the piecewise-linear oracle {worst:e}"
    );
    Ok(format!(
        "anchors exact; 1001 points within {worst:.1e} of piecewise-linear"
    ))
}

/// `κ = 1 - Σ w·O / Σ w·E` with `w = (i-j)²/(c-1)²`, computed from the raw
/// label lists.
fn kappa_direct(labels: &[usize], preds: &[usize], c: usize) -> f64 {
    let n = labels.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64 - j as f64) / (c as f64 - 1.0)).powi(2);
            let o = labels.iter().zip(preds).filter(|&(&l, &p)| l == i && p == j).count() as f64;
            let r = labels.iter().filter(|&&l| l == i).count() as f64;
            let s = preds.iter().filter(|&&p| p == j).count() as f64;
            num += w * o;
            den += w * r * s / n;
        }
    }
    1.0 - num / den
}

fn qwk_values() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let labels: Vec<usize> = (0..200).map(|_| r.gen_range(0..10)).collect();
    let perfect = qwk(&labels, &labels, 10).map_err(|e| e.to_string())?;
    let constant = qwk(&vec![3; labels.len()], &labels, 10).map_err(|e| e.to_string())?;
    ensure!(perfect == 1.0, "perfect predictor gives {perfect}");
    ensure!(constant == 0.0, "constant predictor gives {constant}");
    let (l, p) = ([0, 1, 2, 2], [0, 2, 2, 1]);
    let got = qwk(&p, &l, 3).map_err(|e| e.to_string())?;
    let direct = kappa_direct(&l, &p, 3);
    ensure!((got - direct).abs() < 1e-12, "hand case {got} vs direct {direct}");
    ensure!((direct - 7.0 / 11.0).abs() < 1e-12, "direct formula {direct} vs 7/11");
    Ok(format!("perfect 1, constant 0, hand case {got:.12} = 7/11"))
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.data.root = dir.path().join("data");
    cfg.data.train_count = 16;
    cfg.data.val_count = 8;
    cfg.data.generator.image_size = 64;
    cfg.model = ModelConfig {
        embed_dim: 8,
        head_channels: 8,
        head_layers: 2,
        ..ModelConfig::default()
    };
    cfg.train.patch_size = 16;
    cfg.train.batch_size = 4;
    cfg.train.epochs = 3;
    cmd_generate(&cfg, &cfg.data.root).map_err(|e| e.to_string())?;

    let mut checked = Vec::new();
    for mode in [Mode::Patchgd, Mode::Gd] {
        cfg.train.mode = mode;
        let manifest = RunManifest::new(cfg.clone(), Some(dir.path().join(mode.name()))).map_err(|e| e.to_string())?;
        let files = [RUNLOG_FILE, LAST_CHECKPOINT, BEST_CHECKPOINT];
        let mut runs = Vec::new();
        for _ in 0..2 {
            let _ = fs::remove_dir_all(&manifest.out_dir);
            cmd_train(&manifest, &TrainOptions::default()).map_err(|e| e.to_string())?;
            let bytes: Vec<Vec<u8>> = files
                .iter()
                .map(|f| fs::read(manifest.out_dir.join(f)))
                .collect::<std::io::Result<_>>()
                .map_err(|e| e.to_string())?;
            runs.push(bytes);
        }
        for (i, f) in files.iter().enumerate() {
            ensure!(runs[0][i] == runs[1][i], "{mode}: {f} differs between runs");
        }
        checked.push(mode.name());
    }
    Ok(format!(
        "{} run logs and checkpoints byte-identical",
        checked.join(" and ")
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("GD equivalence", gd_equivalence),
        ("gradient masking", gradient_masking),
        ("sampler coverage", sampler_coverage),
        ("memory model", memory_model),
        ("desk-scale directional check", desk_directional),
        ("schedule exactness", schedule_exactness),
        ("QWK", qwk_values),
        ("reproducibility", reproducibility),
    ];
    let selected: Option<Vec<usize>> = std::env::var("PATCHGD_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(detail) => {
                let known = KNOWN_FAILURES
                    .iter()
                    .any(|&(k, reason)| k == n && detail.rsplit_once(": ").is_some_and(|(_, r)| r == reason));
                if known {
                    println!("FAIL {n} {name}: {detail} (known failure, not counted)");
                } else {
                    failed += 1;
                    println!("FAIL {n} {name}: {detail}");
                }
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
