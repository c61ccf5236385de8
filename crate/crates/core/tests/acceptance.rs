//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Tolerances are pinned below.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3, Vector3};
use nrsfm::cli::{
    estimate_rotations, reconstruct, sweep_n, sweep_noise, PipelineConfig, ReconstructionOptions, RotationSource,
};
use nrsfm::measurements::{load_measurements, load_rotations, load_shapes, synthesize_sequence, Format, SyntheticModel};
use nrsfm::metrics::{aligned_e3d, rotation_error, AlignmentMode};
use nrsfm::rotation::{assemble_block_rotation, exp_so3, geodesic_distance, weiszfeld_sra};
use nrsfm::shape::{pinv_shape, psvt, reshape_tall, solve_x_subproblem, admm_shape, ShapeSolverConfig};

use common::{fd_gradient, jacobi_svd, psvt_oracle, Lcg};

const C1_SEEDS: u64 = 5;
const C1_E3D: f64 = 0.05;
const C1_SECONDS: f64 = 60.0;
const C2_ER: f64 = 1e-4;
const C2_E3D: f64 = 1e-6;
const C3_CASES: usize = 200;
const C3_TOL: f64 = 1e-10;
const C4_CASES: usize = 10;
const C4_GRID_STEP: f64 = 1e-5;
const C4_TOL: f64 = 1e-3;
const C5_CASES: usize = 20;
const C5_REL_TOL: f64 = 1e-6;
const C6_EPS: f64 = 1e-10;
const C7_SEEDS: u64 = 10;
const C8_SEEDS: u64 = 20;
const C8_RATE: f64 = 0.70;
const C9_DRINK: f64 = 0.0071;
const C9_PICKUP: f64 = 0.0152;
const C9_STRETCH: f64 = 0.0124;
const C9_E3D_REL: f64 = 0.25;
const C9_PI_DRINK: f64 = 0.2195;
const C9_PICKUP_ER: f64 = 0.1144;
const C9_AUX_REL: f64 = 0.15;
const C10_SIGMAS: [f64; 6] = [0.01, 0.05, 0.1, 0.15, 0.2, 0.25];
const C10_TRIALS: usize = 10;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c1_end_to_end() -> Outcome {
    let mut worst = 0.0f64;
    let mut slowest = 0.0f64;
    let mut monotone = true;
    for seed in 0..C1_SEEDS {
        let seq = synthesize_sequence(&SyntheticModel::random(50, 30, 3, 0.0, seed), seed).unwrap();
        let mut opts = ReconstructionOptions::new(3);
        opts.seed = seed;
        let start = Instant::now();
        let rec = match reconstruct(&seq.measurements, &opts) {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("seed {seed}: {e}")),
        };
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let fin = aligned_e3d(&rec.shape.x, &seq.shapes, AlignmentMode::GlobalRotation).unwrap().mean;
        let init = aligned_e3d(&rec.shape.x_init, &seq.shapes, AlignmentMode::GlobalRotation).unwrap().mean;
        worst = worst.max(fin);
        monotone &= fin <= init;
    }
    verdict(
        worst <= C1_E3D && monotone && slowest < C1_SECONDS,
        format!("max e3d {worst:.3e} (<= {C1_E3D}), final <= init on all seeds: {monotone}, slowest {slowest:.2}s"),
    )
}

fn c2_rigid() -> Outcome {
    let (mut er_max, mut e3d_max) = (0.0f64, 0.0f64);
    for seed in 0..3 {
        let seq = synthesize_sequence(&SyntheticModel::random(40, 25, 1, 0.0, 100 + seed), 100 + seed).unwrap();
        let mut opts = ReconstructionOptions::new(1);
        opts.seed = seed;
        let rec = match reconstruct(&seq.measurements, &opts) {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("seed {seed}: {e}")),
        };
        er_max = er_max.max(rotation_error(rec.frame_rotations(RotationSource::Averaged), &seq.rotations).unwrap().aligned);
        e3d_max = e3d_max.max(aligned_e3d(&rec.shape.x, &seq.shapes, AlignmentMode::GlobalRotation).unwrap().mean);
    }
    verdict(
        er_max < C2_ER && e3d_max < C2_E3D,
        format!("max eR {er_max:.3e} (< {C2_ER}), max e3d {e3d_max:.3e} (< {C2_E3D})"),
    )
}

fn c3_psvt() -> Outcome {
    let mut rng = Lcg(3);
    let (mut dev, mut pres) = (0.0f64, 0.0f64);
    for case in 0..C3_CASES {
        let m = 1 + (rng.next_f64() * 20.0) as usize;
        let n_cols = 1 + (rng.next_f64() * 30.0) as usize;
        let n = case % 3;
        let q = rng.matrix(m, n_cols) * rng.uniform(0.1, 10.0);
        let r = m.min(n_cols);
        let tau: Vec<f64> = (0..r.saturating_sub(n)).map(|_| rng.uniform(0.0, 3.0)).collect();
        let got = psvt(&q, n, &tau);
        let want = psvt_oracle(&q, n, &tau);
        dev = dev.max((&got - &want).amax());
        let (_, s_in, _) = jacobi_svd(&q);
        let (_, s_out, _) = jacobi_svd(&got);
        for i in 0..n.min(r) {
            pres = pres.max((s_in[i] - s_out[i]).abs());
        }
    }
    verdict(
        dev <= C3_TOL && pres <= C3_TOL,
        format!("{C3_CASES} cases, max deviation {dev:.3e}, max preserved-value drift {pres:.3e} (<= {C3_TOL})"),
    )
}

fn c4_sra() -> Outcome {
    let mut rng = Lcg(4);
    let (mut worst, mut monotone) = (0.0f64, true);
    for _ in 0..C4_CASES {
        let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
        let base = rng.uniform(-1.5, 1.5);
        let count = 2 * (2 + (rng.next_f64() * 8.0) as usize) + 1;
        let angles: Vec<f64> = (0..count).map(|_| base + rng.uniform(-1.0, 1.0)).collect();
        let samples: Vec<Matrix3<f64>> = angles.iter().map(|a| exp_so3(&(axis * *a))).collect();
        let res = weiszfeld_sra(&samples, 1e-9, 1000).unwrap();
        monotone &= res.objective.windows(2).all(|w| w[1] <= w[0]);

        let lo = angles.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = angles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let steps = ((hi - lo) / C4_GRID_STEP).ceil() as usize;
        let (mut best, mut best_cost) = (lo, f64::INFINITY);
        for i in 0..=steps {
            let t = lo + i as f64 * C4_GRID_STEP;
            let cost: f64 = angles.iter().map(|a| (t - a).abs()).sum();
            if cost < best_cost {
                best_cost = cost;
                best = t;
            }
        }
        worst = worst.max(geodesic_distance(&res.rotation, &exp_so3(&(axis * best))));
    }
    verdict(
        worst <= C4_TOL && monotone,
        format!("{C4_CASES} coaxial sets, max distance to grid median {worst:.3e} (<= {C4_TOL}), objective non-increasing: {monotone}"),
    )
}

fn c5_x_subproblem() -> Outcome {
    let mut rng = Lcg(5);
    let mut worst = 0.0f64;
    for _ in 0..C5_CASES {
        let frames = 2 + (rng.next_f64() * 8.0) as usize;
        let points = 3 + (rng.next_f64() * 12.0) as usize;
        let rots: Vec<Matrix3<f64>> = (0..frames).map(|_| rng.rotation()).collect();
        let block = assemble_block_rotation(&rots);
        let w = rng.matrix(2 * frames, points);
        let xs = rng.matrix(frames, 3 * points);
        let y = rng.matrix(frames, 3 * points);
        let rho = 10f64.powf(rng.uniform(-3.0, 2.0));
        let x = solve_x_subproblem(&w, &block, &xs, &y, rho).unwrap();
        let t = reshape_tall(&(&xs + &y / rho)).unwrap();
        let ra = block.assembled();
        let f = |x: &DMatrix<f64>| 0.5 * (&w - &ra * x).norm_squared() + 0.5 * rho * (x - &t).norm_squared();
        let g = fd_gradient(f, &x, 1e-4);
        worst = worst.max(g.amax() / w.norm());
    }
    verdict(
        worst < C5_REL_TOL,
        format!("{C5_CASES} instances, max |grad| / ||W|| {worst:.3e} (< {C5_REL_TOL})"),
    )
}

fn c6_exit_contract() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for (i, &(k, noise, n)) in [(1, 0.0, 1), (2, 0.0, 1), (3, 0.0, 0), (3, 0.0, 1), (3, 0.05, 1), (4, 0.1, 2), (2, 0.25, 1), (3, 0.01, 2)]
        .iter()
        .enumerate()
    {
        let seed = 600 + i as u64;
        let seq = synthesize_sequence(&SyntheticModel::random(30, 20, k, noise, seed), seed).unwrap();
        let cfg = ShapeSolverConfig { n, ..Default::default() };
        for rots in [seq.rotations.clone(), {
            let mut opts = ReconstructionOptions::new(k);
            opts.seed = seed;
            match estimate_rotations(&seq.measurements, &opts) {
                Ok(est) => est.averaged.rotations,
                Err(e) => return Outcome::Fail(format!("instance {i}: {e}")),
            }
        }] {
            let sol = admm_shape(seq.measurements.data(), &assemble_block_rotation(&rots), &cfg).unwrap();
            checked += 1;
            if !(sol.final_residual < C6_EPS || sol.rho_capped()) {
                bad.push(format!("instance {i}: residual {:.3e} exit {:?}", sol.final_residual, sol.exit));
            }
        }
    }
    verdict(bad.is_empty(), format!("{checked} solves, violations: {}", if bad.is_empty() { "none".into() } else { bad.join("; ") }))
}

fn c7_n_ablation() -> Outcome {
    let (mut n0, mut n1) = (Vec::new(), Vec::new());
    for seed in 0..C7_SEEDS {
        let seq = synthesize_sequence(&SyntheticModel::random(50, 30, 3, 0.0, 700 + seed), 700 + seed).unwrap();
        let cfg = PipelineConfig { k: 3, seed, ..Default::default() };
        let est = match estimate_rotations(&seq.measurements, &cfg.reconstruction_options()) {
            Ok(e) => e,
            Err(e) => return Outcome::Fail(format!("seed {seed}: {e}")),
        };
        let rows = sweep_n(&seq.measurements, est.rotations(RotationSource::Averaged), &seq.shapes, &cfg, &[0, 1]).unwrap();
        n0.push(rows[0].e3d);
        n1.push(rows[1].e3d);
    }
    let (m0, m1) = (median(&mut n0), median(&mut n1));
    verdict(m1 <= m0, format!("{C7_SEEDS} seeds, median e3d N=1 {m1:.3e} <= N=0 {m0:.3e}"))
}

fn c8_rotation_ablation() -> Outcome {
    let mut wins = 0;
    for seed in 0..C8_SEEDS {
        let seq = synthesize_sequence(&SyntheticModel::random(50, 100, 3, 0.01, seed), seed).unwrap();
        let mut opts = ReconstructionOptions::new(3);
        opts.seed = seed;
        let est = match estimate_rotations(&seq.measurements, &opts) {
            Ok(e) => e,
            Err(e) => return Outcome::Fail(format!("seed {seed}: {e}")),
        };
        let init_e3d = |src| {
            let x = pinv_shape(&assemble_block_rotation(est.rotations(src)), seq.measurements.data()).unwrap();
            aligned_e3d(&x, &seq.shapes, AlignmentMode::GlobalRotation).unwrap().mean
        };
        if init_e3d(RotationSource::Averaged) <= init_e3d(RotationSource::Reference) {
            wins += 1;
        }
    }
    let rate = wins as f64 / C8_SEEDS as f64;
    verdict(
        rate >= C8_RATE,
        format!("averaged e3d(X_init) <= reference on {wins}/{C8_SEEDS} seeds ({:.0}%, need >= {:.0}%)", 100.0 * rate, 100.0 * C8_RATE),
    )
}

fn find_measurements(dir: &Path) -> Option<PathBuf> {
    ["measurements.nrsm", "measurements.csv", "measurements.txt"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
}

fn c9_mocap() -> Outcome {
    let Some(root) = std::env::var_os("NRSFM_MOCAP_DIR").map(PathBuf::from) else {
        return Outcome::Skip("manual check; set NRSFM_MOCAP_DIR to run it".into());
    };
    let mut details = Vec::new();
    let mut ok = true;
    let within = |got: f64, want: f64, rel: f64| ((got - want) / want).abs() <= rel;
    for (name, k, target) in [("drink", 12, C9_DRINK), ("pickup", 12, C9_PICKUP), ("stretch", 11, C9_STRETCH)] {
        let dir = root.join(name);
        let Some(wpath) = find_measurements(&dir) else {
            ok = false;
            details.push(format!("{name}: no measurements file"));
            continue;
        };
        let w = load_measurements(&wpath, Format::from_path(&wpath)).and_then(|w| {
            if w.is_centered() { Ok(w) } else { nrsfm::measurements::mean_center(&w) }
        });
        let gt = load_shapes(&dir.join("shapes.nrsg")).map(|x| nrsfm::cli::center_shapes(&x));
        let (w, gt) = match (w, gt) {
            (Ok(w), Ok(gt)) => (w, gt),
            (Err(e), _) | (_, Err(e)) => {
                ok = false;
                details.push(format!("{name}: {e}"));
                continue;
            }
        };
        let rec = match reconstruct(&w, &ReconstructionOptions::new(k)) {
            Ok(r) => r,
            Err(e) => {
                ok = false;
                details.push(format!("{name}: {e}"));
                continue;
            }
        };
        let e = aligned_e3d(&rec.shape.x, &gt, AlignmentMode::GlobalRotation).unwrap().mean;
        ok &= within(e, target, C9_E3D_REL);
        details.push(format!("{name} e3d {e:.4} (target {target})"));
        if name == "drink" {
            let e = aligned_e3d(&rec.shape.x_init, &gt, AlignmentMode::GlobalRotation).unwrap().mean;
            ok &= within(e, C9_PI_DRINK, C9_AUX_REL);
            details.push(format!("drink pinv e3d {e:.4} (target {C9_PI_DRINK})"));
        }
        if name == "pickup" {
            if let Ok(gt_rot) = load_rotations(&dir.join("rotations.nrsr")) {
                let er = rotation_error(rec.frame_rotations(RotationSource::Averaged), &gt_rot).unwrap().aligned;
                ok &= within(er, C9_PICKUP_ER, C9_AUX_REL);
                details.push(format!("pickup eR {er:.4} (target {C9_PICKUP_ER})"));
            }
        }
    }
    verdict(ok, details.join(", "))
}

fn c10_noise_sweep() -> Outcome {
    let seq = synthesize_sequence(&SyntheticModel::random(50, 30, 3, 0.0, 1000), 1000).unwrap();
    let cfg = PipelineConfig { k: 3, seed: 10, ..Default::default() };
    let rows = match sweep_noise(&seq.measurements, &seq.shapes, Some(&seq.rotations), &cfg, &C10_SIGMAS, C10_TRIALS) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("sweep aborted: {e}")),
    };
    let finite = rows
        .iter()
        .all(|r| r.mean_e3d.is_finite() && r.mean_e_r.is_some_and(f64::is_finite));
    let (lo, hi) = (rows[0].mean_e3d, rows[rows.len() - 1].mean_e3d);
    let curve: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}", r.sigma, r.mean_e3d)).collect();
    verdict(
        finite && hi > lo,
        format!("all finite: {finite}, mean e3d by sigma [{}], {hi:.3e} at 0.25 > {lo:.3e} at 0.01", curve.join(" ")),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("synthetic end-to-end recovery (F=50, P=30, K=3)", c1_end_to_end),
        ("rigid sanity (K=1)", c2_rigid),
        ("PSVT matches SVD-reconstruction oracle", c3_psvt),
        ("Weiszfeld SRA matches grid L1 median", c4_sra),
        ("X-subproblem first-order optimality", c5_x_subproblem),
        ("ADMM exit contract", c6_exit_contract),
        ("N=1 median e3d <= N=0", c7_n_ablation),
        ("averaged rotations improve X_init", c8_rotation_ablation),
        ("MoCap benchmark reproduction", c9_mocap),
        ("noise sweep stability", c10_noise_sweep),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {}: {name}: {detail} [{secs:.1}s]", i + 1);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
