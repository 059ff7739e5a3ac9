//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.
//!
//! The training criteria run the default configuration for the full
//! iteration budget on several seeds, so a complete pass takes over an hour
//! on a single core.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use apivr::data::{self, PairedDataset, SyntheticConfig};
use apivr::geometry::{self, TruncatedBag};
use apivr::losses::{self, Batch, BatchItem};
use apivr::model::{self, checkpoint, ModelState, ParamGroup, Weighting};
use apivr::numerics::{self, Matrix};
use apivr::retrieval::{map_at_k, Ranked, RankedResult};
use apivr::training;
use apivr_cli::commands::{CHECKPOINT_FILE, LOG_FILE};
use apivr_cli::{cmd_gradcheck, cmd_train, RunConfigFile};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATIONS: [&str; 6] = ["wo_tl", "wo_al", "wo_cl", "wo_ga", "wo_gmil", "wo_graph"];
const RUN_SECONDS_LIMIT: f64 = 300.0;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(g: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| g.random_range(-1.0..1.0))
}

fn random_vec(g: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| g.random_range(-1.0..1.0)).collect()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn default_dataset(seed: u64) -> PairedDataset {
    data::generate_synthetic(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn default_model(ds: &PairedDataset, seed: u64) -> ModelState {
    let cfg = RunConfigFile::default();
    model::init_params_glorot(&cfg.train.model_dims(ds), Weighting::Graph, seed).unwrap()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let variants = std::iter::once(None).chain(ABLATIONS.iter().copied().map(Some));
    for ablation in variants {
        let mut cfg = RunConfigFile::default();
        if let Some(name) = ablation {
            cfg.train.ablations.set(name).unwrap();
        }
        let report = cmd_gradcheck(&cfg, &mut Vec::new()).map_err(|e| format!("{}: {e}", ablation.unwrap_or("full")))?;
        let probed_triplet = report
            .entries
            .iter()
            .any(|e| e.loss == training::LossKind::Triplet && e.group == ParamGroup::Projection && !e.structural_zero);
        if !report.passed() || (ablation != Some("wo_tl") && !probed_triplet) {
            failures.push(ablation.unwrap_or("full"));
        }
        worst = worst.max(report.worst());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failures.is_empty() && worst <= 1e-5 && secs <= 60.0,
        format!("worst relative error {worst:.2e} over full + 6 ablations in {secs:.1}s; failing: {failures:?}"),
    )
}

fn bag(basis: Matrix) -> TruncatedBag {
    let indices = (0..basis.rows()).collect();
    TruncatedBag { basis, indices }
}

fn least_squares_distance(basis: &Matrix, u: &[f64]) -> f64 {
    let a = DMatrix::from_row_slice(basis.rows(), basis.cols(), basis.as_slice()).transpose();
    let target = DVector::from_column_slice(u);
    let c = a.clone().svd(true, true).solve(&target, 1e-14).unwrap();
    (target - a * c).norm_squared()
}

fn random_rotation(g: &mut ChaCha8Rng, r: usize) -> Matrix {
    let m = random_matrix(g, r, r);
    let q = DMatrix::from_row_slice(r, r, m.as_slice()).qr().q();
    Matrix::from_fn(r, r, |i, j| q[(i, j)])
}

fn geometry_identities() -> Verdict {
    const R: usize = 16;
    const RIDGE: f64 = 1e-10;
    let mut g = rng(2);
    let mut worst = [0.0f64; 5];
    let mut negative = 0;
    let mut non_monotone = 0;
    for _ in 0..1000 {
        let b = g.random_range(1..=8);
        let basis = random_matrix(&mut g, b, R);
        let u = random_vec(&mut g, R);
        let d = geometry::point_to_subspace_distance(&u, &bag(basis.clone()), RIDGE).unwrap();
        negative += usize::from(d < 0.0);

        let p = numerics::subspace_projector(&basis, RIDGE).unwrap();
        let vec_form = numerics::dot(&u, &u) - geometry::d_tilde(&u, &p).unwrap();
        worst[0] = worst[0].max((d - vec_form).abs());
        worst[1] = worst[1].max((d - least_squares_distance(&basis, &u)).abs());
        worst[2] = worst[2].max(p.matmul(&p).sub(&p).frobenius_norm());

        let q = random_rotation(&mut g, R);
        let dq = geometry::point_to_subspace_distance(&q.mat_vec(&u), &bag(basis.matmul_t(&q)), RIDGE).unwrap();
        worst[3] = worst[3].max((d - dq).abs());

        let mut rows: Vec<Vec<f64>> = (0..b).map(|i| basis.row(i).to_vec()).collect();
        rows.push(random_vec(&mut g, R));
        let bigger = geometry::point_to_subspace_distance(&u, &bag(Matrix::from_rows(&rows).unwrap()), RIDGE).unwrap();
        worst[4] = worst[4].max(bigger - d);
        non_monotone += usize::from(bigger > d + 1e-9);
    }
    check(
        negative == 0 && worst[0] <= 1e-9 && worst[1] <= 1e-8 && worst[2] <= 1e-8 && worst[3] <= 1e-9 && non_monotone == 0,
        format!(
            "1000 instances: negative {negative}, vec-form {:.2e}, least-squares {:.2e}, idempotence {:.2e}, rotation {:.2e}, largest increase on adding a column {:.2e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn permute_square(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(perm[i], perm[j]))
}

fn gmil_invariants() -> Verdict {
    let ds = default_dataset(0);
    let mut g = rng(3);
    let mut simplex = 0.0f64;
    let mut identity_mismatches = 0;
    let mut equivariance = 0.0f64;
    let mut single_ok = true;
    for trial in 0..200u64 {
        let model = default_model(&ds, trial);
        let att = &model.params.attention;
        let k = g.random_range(1..=10);
        let raw = random_matrix(&mut g, k, ds.d1);
        let projected = model::project_video(&raw, &model.params.projection).unwrap();
        let adj = numerics::normalize_adjacency(&numerics::cosine_similarity_graph(&raw).unwrap()).unwrap();
        let w = model::gmil_weights(&projected, &adj, att).unwrap();
        let plain = model::mil_weights(&projected, att).unwrap();
        simplex = simplex.max((w.iter().sum::<f64>() - 1.0).abs()).max((plain.iter().sum::<f64>() - 1.0).abs());
        if w.iter().any(|&x| x < 0.0) {
            simplex = f64::INFINITY;
        }
        identity_mismatches += usize::from(model::gmil_weights(&projected, &Matrix::identity(k), att).unwrap() != plain);
        if k == 1 {
            single_ok &= w == [1.0] && plain == [1.0];
        }

        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut g);
        let z = model::aggregate(&projected, &w).unwrap();
        let projected_p = model::project_video(&raw.select_rows(&perm), &model.params.projection).unwrap();
        let w_p = model::gmil_weights(&projected_p, &permute_square(&adj, &perm), att).unwrap();
        let z_p = model::aggregate(&projected_p, &w_p).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            equivariance = equivariance.max((w_p[i] - w[p]).abs());
        }
        for (a, b) in z.iter().zip(&z_p) {
            equivariance = equivariance.max((a - b).abs());
        }
    }
    let model = default_model(&ds, 0);
    let one = model::project_video(&ds.pairs[0].video.features().select_rows(&[0]), &model.params.projection).unwrap();
    single_ok &= model::gmil_weights(&one, &Matrix::identity(1), &model.params.attention).unwrap() == [1.0];
    check(
        simplex <= 1e-12 && identity_mismatches == 0 && equivariance <= 1e-12 && single_ok,
        format!(
            "200 bags: |sum-1| {simplex:.1e}, identity-adjacency mismatches {identity_mismatches}, permutation error {equivariance:.1e}, k=1 weight 1: {single_ok}"
        ),
    )
}

fn zero_group(model: &mut ModelState, group: ParamGroup) {
    let n = model.params.group_len(group);
    model.params.assign(group, &vec![0.0; n]);
}

fn loss_values() -> Verdict {
    let ds = default_dataset(0);
    let batch = training::grad_check_batch(&ds, 10, 0).unwrap();
    let c = ds.categories as f64;

    let mut m = default_model(&ds, 1);
    zero_group(&mut m, ParamGroup::Classifier);
    let cls = losses::classification_loss(&batch, &m).unwrap().0;

    let mut m = default_model(&ds, 2);
    zero_group(&mut m, ParamGroup::Discriminator);
    let adv = losses::adversarial_loss(&batch, &m).unwrap().0;

    let m = default_model(&ds, 3);
    let settings = RunConfigFile::default().train.loss_settings();
    let bag = &ds.pairs[0].video;
    let other = ds.pairs.iter().position(|p| p.label != ds.pairs[0].label).unwrap();
    let items = vec![
        BatchItem {
            bag,
            image: &ds.pairs[0].image,
            label: ds.pairs[0].label,
        },
        BatchItem {
            bag,
            image: &ds.pairs[other].image,
            label: ds.pairs[other].label,
        },
    ];
    let pair = Batch::new(items, ds.categories).unwrap();
    let per_anchor = losses::triplet_loss(&pair, &m, &settings).unwrap().0 / 2.0;

    let errs = [
        (cls - 2.0 * c.ln()).abs(),
        (adv - 2.0 * 2f64.ln()).abs(),
        (per_anchor - settings.margin).abs(),
    ];
    check(
        errs.iter().all(|&e| e <= 1e-9),
        format!(
            "L_class {cls:.12} (2 ln {c}), L_adv {adv:.12} (2 ln 2), per-anchor triplet {per_anchor:.12} (m = {})",
            settings.margin
        ),
    )
}

/// AP@K from the definition: precision at each relevant rank ≤ K, divided
/// by min(R, K).
fn brute_force_ap(relevance: &[bool], k: usize) -> f64 {
    let r = relevance.iter().filter(|&&x| x).count();
    let mut total = 0.0;
    for j in 1..=k.min(relevance.len()) {
        if relevance[j - 1] {
            total += relevance[..j].iter().filter(|&&x| x).count() as f64 / j as f64;
        }
    }
    total / r.min(k) as f64
}

fn ranked(relevance: &[bool]) -> RankedResult {
    RankedResult {
        query: 0,
        label: 0,
        ranking: relevance
            .iter()
            .enumerate()
            .map(|(i, &relevant)| Ranked {
                id: i,
                distance: i as f64,
                relevant,
            })
            .collect(),
    }
}

fn map_oracle() -> Verdict {
    let mut g = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let len = g.random_range(1..60);
        let mut rel: Vec<bool> = (0..len).map(|_| g.random_bool(0.3)).collect();
        let pos = g.random_range(0..len);
        rel[pos] = true;
        let k = g.random_range(1..=len + 5);
        let got = map_at_k(&[ranked(&rel)], k).unwrap();
        worst = worst.max((got - brute_force_ap(&rel, k)).abs());
    }
    let example = map_at_k(&[ranked(&[true, false, true])], 3).unwrap();
    check(
        worst <= 1e-12 && (example - 5.0 / 6.0).abs() <= 1e-12,
        format!("200 rankings: max difference {worst:.1e}; R=2 K=3 ranks {{1,3}} gives {example:.6}"),
    )
}

struct Run {
    map10: f64,
    clean_above_noisy: Option<f64>,
    seconds: f64,
    dir: PathBuf,
}

fn train_run(root: &Path, seed: u64, ablation: Option<&str>, tag: &str) -> Result<Run, String> {
    let data_dir = root.join(format!("data-{seed}"));
    if !data_dir.exists() {
        data::save_dataset(&default_dataset(seed), &data_dir).map_err(|e| e.to_string())?;
    }
    let mut cfg = RunConfigFile::default();
    cfg.train.seed = seed;
    if let Some(name) = ablation {
        cfg.train.ablations.set(name).map_err(|e| e.to_string())?;
    }
    let dir = root.join(format!("{tag}-{seed}"));
    let start = Instant::now();
    let summary = cmd_train(&cfg, &data_dir.join("manifest.json"), &dir, &mut Vec::new(), &mut Vec::new())
        .map_err(|e| format!("{tag} seed {seed}: {e}"))?;
    let seconds = start.elapsed().as_secs_f64();
    let map10 = summary.map_at(10).ok_or_else(|| format!("{tag} seed {seed}: no mAP@10"))?;
    eprintln!("  {tag} seed {seed}: mAP@10 {map10:.4}, clean>noisy {:?}, {seconds:.0}s", summary.clean_above_noisy);
    Ok(Run {
        map10,
        clean_above_noisy: summary.clean_above_noisy,
        seconds,
        dir,
    })
}

struct Sweep {
    full: Vec<Run>,
    without_gmil: Vec<Run>,
}

fn sweep(root: &Path) -> Result<Sweep, String> {
    let mut full = Vec::new();
    let mut without_gmil = Vec::new();
    for seed in SEEDS {
        full.push(train_run(root, seed, None, "full")?);
        without_gmil.push(train_run(root, seed, Some("wo_gmil"), "wo_gmil")?);
    }
    Ok(Sweep { full, without_gmil })
}

fn end_to_end(sweep: &Sweep) -> Verdict {
    let maps: Vec<f64> = sweep.full.iter().map(|r| r.map10).collect();
    let secs: Vec<f64> = sweep.full.iter().map(|r| r.seconds).collect();
    let slowest = secs.iter().copied().fold(0.0, f64::max);
    check(
        median(&maps) >= 0.90 && slowest <= RUN_SECONDS_LIMIT,
        format!(
            "median test mAP@10 {:.4} over seeds {maps:.4?}; slowest run {slowest:.0}s (median {:.0}s)",
            median(&maps),
            median(&secs)
        ),
    )
}

fn clean_attention(sweep: &Sweep) -> Verdict {
    let fractions: Vec<f64> = sweep.full.iter().map(|r| r.clean_above_noisy.unwrap_or(f64::NAN)).collect();
    let m = median(&fractions);
    check(m >= 0.90, format!("median fraction of test bags with clean > noisy weight {m:.3} over {fractions:.3?}"))
}

fn ablation_direction(root: &Path, sweep: &Sweep) -> Verdict {
    let full = median(&sweep.full.iter().map(|r| r.map10).collect::<Vec<_>>());
    let without = median(&sweep.without_gmil.iter().map(|r| r.map10).collect::<Vec<_>>());
    let mut emitted = vec![format!("wo_gmil {without:.4}")];
    for name in ABLATIONS.iter().filter(|&&n| n != "wo_gmil") {
        let run = train_run(root, SEEDS[0], Some(name), name)?;
        let has_metrics = run.map10.is_finite() && run.dir.join("summary.json").exists() && run.dir.join(LOG_FILE).exists();
        if !has_metrics {
            return Err(format!("{name} did not emit metrics"));
        }
        emitted.push(format!("{name} {:.4}", run.map10));
    }
    check(
        full >= without,
        format!("median mAP@10 full {full:.4} vs w/o GMIL {without:.4}; ablation runs: {}", emitted.join(", ")),
    )
}

fn determinism(root: &Path, sweep: &Sweep) -> Verdict {
    let again = train_run(root, SEEDS[0], None, "repeat")?;
    let first = &sweep.full[0].dir;
    let same = |name: &str| fs::read(first.join(name)).ok() == fs::read(again.dir.join(name)).ok();
    check(
        same(CHECKPOINT_FILE) && same(LOG_FILE),
        format!(
            "seed {} repeated: checkpoint identical {}, log identical {}",
            SEEDS[0],
            same(CHECKPOINT_FILE),
            same(LOG_FILE)
        ),
    )
}

fn round_trips(root: &Path, sweep: &Sweep) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for seed in SEEDS {
        let ds = default_dataset(seed);
        let dir = root.join(format!("roundtrip-{seed}"));
        let manifest = data::save_dataset(&ds, &dir).map_err(|e| e.to_string())?;
        let back = data::load_dataset(&manifest).map_err(|e| e.to_string())?;
        ok &= back == ds;
    }
    notes.push(format!("{} datasets reloaded equal: {ok}", SEEDS.len()));

    let mut ckpt_ok = true;
    for run in sweep.full.iter().chain(&sweep.without_gmil) {
        let path = run.dir.join(CHECKPOINT_FILE);
        let bytes = fs::read(&path).map_err(|e| e.to_string())?;
        let model = checkpoint::load(&path).map_err(|e| e.to_string())?;
        let copy = root.join("copy.apvr");
        checkpoint::save(&model, &copy).map_err(|e| e.to_string())?;
        ckpt_ok &= fs::read(&copy).ok() == Some(bytes) && checkpoint::load(&copy).ok() == Some(model);
    }
    let ds = default_dataset(0);
    let fresh = model::init_params(&RunConfigFile::default().train.model_dims(&ds), Weighting::Graph, 9).unwrap();
    ckpt_ok &= checkpoint::from_bytes(&checkpoint::to_bytes(&fresh), Path::new("memory")).ok() == Some(fresh);
    notes.push(format!("checkpoints re-saved byte-identical: {ckpt_ok}"));
    check(ok && ckpt_ok, notes.join("; "))
}

fn attempt(f: impl FnOnce() -> Verdict) -> Verdict {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let root = root.path();
    let mut verdicts: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name: &'static str, v: Verdict| {
        match &v {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => println!("FAIL {name}: {d}"),
        }
        verdicts.push((name, v));
    };

    report("1 gradient suite", attempt(gradient_suite));
    report("2 geometry identities", attempt(geometry_identities));
    report("3 GMIL invariants", attempt(gmil_invariants));
    report("4 analytic loss values", attempt(loss_values));
    report("5 mAP oracle", attempt(map_oracle));

    let sweep = panic::catch_unwind(AssertUnwindSafe(|| sweep(root)))
        .map_err(|_| "panicked".to_string())
        .and_then(|r| r);
    match &sweep {
        Ok(sweep) => {
            report("6 end-to-end run", attempt(|| end_to_end(sweep)));
            report("7 clean-proposal attention", attempt(|| clean_attention(sweep)));
            report("8 ablation direction", attempt(|| ablation_direction(root, sweep)));
            report("9 determinism", attempt(|| determinism(root, sweep)));
            report("10 format round trip", attempt(|| round_trips(root, sweep)));
        }
        Err(e) => {
            for name in ["6 end-to-end run", "7 clean-proposal attention", "8 ablation direction", "9 determinism", "10 format round trip"] {
                report(name, Err(format!("training sweep failed: {e}")));
            }
        }
    }

    let failed = verdicts.iter().filter(|(_, v)| v.is_err()).count();
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
