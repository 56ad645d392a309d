//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured numbers (visible with --nocapture).
//!
//! The heavy regressions (criteria 8 and 9) run the full synthetic
//! pipeline and take several minutes each; the rest are property checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadir_core::atlas::{
    atlas_energy, fit_atlas, grad_atlas, grad_velocity, AtlasConfig, AtlasState, DEFAULT_SIGMA,
};
use sadir_core::denoiser::{ConditioningPack, DenoiserParams, DenoiserShape};
use sadir_core::diffusion::{normal_field, NoiseSchedule, OracleEpsPredictor};
use sadir_core::geodesic::{shoot, shoot_vjp, ShootingConfig};
use sadir_core::grid::{warp, Axis, GridSpec, ScalarVolume, VectorField};
use sadir_core::io::{extract_slices, read_manifest, Split};
use sadir_core::metric::FluidMetric;
use sadir_core::metrics::{hard_dice, jaccard, rhd95};
use sadir_core::pipeline::{
    reconstruct, train, variational_reconstruct, ReconstructSettings, TrainConfig,
    TrainingSubject,
};
use sadir_core::synth::{
    make_template, random_smooth_velocity, synth_dataset, SynthConfig, TemplateKind,
};
use std::sync::Mutex;
use std::time::Instant;

/// The two long regressions hold this lock so their runtime budgets are
/// measured without contending with each other.
static HEAVY: Mutex<()> = Mutex::new(());

fn random_field(grid: GridSpec, seed: u64, scale: f64) -> VectorField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VectorField::from_vec(
        grid,
        (0..3 * grid.len())
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

fn smooth_field(metric: &FluidMetric<f64>, seed: u64, max_abs: f64) -> VectorField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_smooth_velocity(metric, max_abs, &mut rng).unwrap()
}

/// Deformed copies of a template with fold-free, integrable velocities.
fn synth_population(
    metric: &FluidMetric<f64>,
    template: &ScalarVolume<f64>,
    count: usize,
    deform: f64,
    seed: u64,
) -> Vec<ScalarVolume<f64>> {
    let shoot_cfg = ShootingConfig::default();
    (0..count)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64 + 1);
            let mut v0 = random_smooth_velocity(metric, deform, &mut rng).unwrap();
            let traj = loop {
                match shoot(metric, &v0, &shoot_cfg) {
                    Ok(t) if t.transform().is_orientation_preserving() => break t,
                    _ => v0 = v0.scaled(0.7),
                }
            };
            warp(template, traj.transform()).unwrap()
        })
        .collect()
}

#[test]
fn criterion_01_operator_inverse_identity() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for grid in [
        GridSpec::cubic(8).unwrap(),
        GridSpec::with_spacing([16, 12, 10], [1.0, 0.8, 1.5]).unwrap(),
        GridSpec::cubic(32).unwrap(),
    ] {
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let v = random_field(grid, 41, 1.0);
        let back = metric.apply_k(&metric.apply_l(&v).unwrap()).unwrap();
        let mut max_err: f64 = 0.0;
        let mut max_v: f64 = 0.0;
        for (a, b) in back.data().iter().zip(v.data()) {
            max_err = max_err.max((a - b).abs());
            max_v = max_v.max(b.abs());
        }
        worst = worst.max(max_err / max_v);
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst < 1e-10, "K(L(v)) relative error {worst}");
    assert!(secs < 1.0, "took {secs:.2}s (budget 1s)");
    println!("[criterion 1] PASS: K(L(v))=v to {worst:.2e} on 8^3..32^3 in {secs:.2}s");
}

#[test]
fn criterion_02_shooting_gradients() {
    let t0 = Instant::now();
    let grid = GridSpec::cubic(8).unwrap();
    let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
    let cfg = ShootingConfig::default();
    let v0 = smooth_field(&metric, 42, 0.4);
    let d_phi = random_field(grid, 43, 1.0);

    let scalarized = |v: &VectorField<f64>| -> f64 {
        let traj = shoot(&metric, v, &cfg).unwrap();
        traj.transform().displacement().dot(&d_phi)
    };
    let grad = shoot_vjp(&metric, &v0, &cfg, &d_phi).unwrap();

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for probe in 0..10 {
        let delta = smooth_field(&metric, 400 + probe, 1.0);
        let mut vp = v0.clone();
        vp.add_scaled(&delta, h);
        let mut vm = v0.clone();
        vm.add_scaled(&delta, -h);
        let fd = (scalarized(&vp) - scalarized(&vm)) / (2.0 * h);
        let an = grad.dot(&delta);
        worst = worst.max((fd - an).abs() / fd.abs().max(1e-12));
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst < 1e-4, "relative error {worst}");
    assert!(secs < 30.0, "took {secs:.1}s (budget 30s)");
    println!("[criterion 2] PASS: shoot_vjp matches finite differences to {worst:.2e} (10 probes, {secs:.1}s)");
}

#[test]
fn criterion_03_atlas_gradients() {
    let grid = GridSpec::cubic(8).unwrap();
    let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
    let shoot_cfg = ShootingConfig::default();
    let template = make_template::<f64>(TemplateKind::TwoLobeBump, grid);
    let ys = synth_population(&metric, &template, 2, 0.5, 44);

    let mut state = AtlasState::init(&ys, DEFAULT_SIGMA).unwrap();
    state.atlas = make_template::<f64>(TemplateKind::Ellipsoid, grid);
    // drifted smooth velocities keep warp sampling off the interpolation
    // kinks so central differences are clean
    for (n, v) in state.velocities.iter_mut().enumerate() {
        let mut f = smooth_field(&metric, 45 + n as u64, 0.25);
        for x in f.data_mut() {
            *x += 0.42;
        }
        *v = f;
    }

    let energy = |st: &AtlasState<f64>| atlas_energy(st, &ys, &metric, &shoot_cfg, 0.0).unwrap();

    // velocity gradient
    let gv = grad_velocity(&state, 0, &ys, &metric, &shoot_cfg).unwrap();
    let h = 1e-5;
    let mut worst_v: f64 = 0.0;
    for probe in 0..5 {
        let delta = smooth_field(&metric, 500 + probe, 1.0);
        let mut sp = state.clone();
        sp.velocities[0].add_scaled(&delta, h);
        let mut sm = state.clone();
        sm.velocities[0].add_scaled(&delta, -h);
        let fd = (energy(&sp) - energy(&sm)) / (2.0 * h);
        worst_v = worst_v.max((fd - gv.dot(&delta)).abs() / fd.abs().max(1e-12));
    }
    assert!(worst_v < 1e-4, "grad_velocity relative error {worst_v}");

    // atlas gradient
    let ga = grad_atlas(&state, &ys, &metric, &shoot_cfg, 0.0).unwrap();
    let mut worst_a: f64 = 0.0;
    for probe in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + probe);
        let delta: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut sp = state.clone();
        for (s, &d) in sp.atlas.data_mut().iter_mut().zip(&delta) {
            *s += 1e-6 * d;
        }
        let mut sm = state.clone();
        for (s, &d) in sm.atlas.data_mut().iter_mut().zip(&delta) {
            *s -= 1e-6 * d;
        }
        let fd = (energy(&sp) - energy(&sm)) / 2e-6;
        let an: f64 = ga.data().iter().zip(&delta).map(|(&a, &b)| a * b).sum();
        worst_a = worst_a.max((fd - an).abs() / fd.abs().max(1e-12));
    }
    assert!(worst_a < 1e-4, "grad_atlas relative error {worst_a}");

    // identity warps: optimal atlas is the voxelwise mean exactly
    let mean_state = AtlasState::init(&ys, DEFAULT_SIGMA).unwrap();
    let g0 = grad_atlas(&mean_state, &ys, &metric, &shoot_cfg, 0.0).unwrap();
    let gmax = g0.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    assert!(gmax < 1e-9, "gradient at the mean {gmax}");

    println!(
        "[criterion 3] PASS: grad_velocity {worst_v:.2e}, grad_atlas {worst_a:.2e}, mean-atlas stationarity {gmax:.2e}"
    );
}

#[test]
fn criterion_04_norm_conservation() {
    let grid = GridSpec::cubic(16).unwrap();
    let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
    let v0 = smooth_field(&metric, 46, 0.5);
    let traj = shoot(&metric, &v0, &ShootingConfig::default()).unwrap();
    let norm0 = metric.velocity_norm(&v0).unwrap();
    let mut worst: f64 = 0.0;
    for v in traj.velocities() {
        let n = metric.velocity_norm(v).unwrap();
        worst = worst.max((n - norm0).abs() / norm0);
    }
    assert!(worst < 0.05, "norm drift {worst}");
    println!("[criterion 4] PASS: velocity-norm drift {worst:.4} over 10 Euler steps at 16^3");
}

#[test]
fn criterion_05_diffusion_identities() {
    // (a) predict_x0 round trip at every tau, T = 10
    let grid = GridSpec::cubic(4).unwrap();
    let sched = NoiseSchedule::<f64>::scaled_linear(10).unwrap();
    let y0 = random_field(grid, 47, 1.0);
    let mut worst_rt: f64 = 0.0;
    for tau in 1..=10 {
        let eps = random_field(grid, 48 + tau as u64, 1.0);
        let y_tau = sched.forward_sample(&y0, tau, &eps).unwrap();
        let back = sched.predict_x0(&y_tau, tau, &eps).unwrap();
        for (a, b) in back.data().iter().zip(y0.data()) {
            worst_rt = worst_rt.max((a - b).abs());
        }
    }
    assert!(worst_rt < 1e-12, "round-trip error {worst_rt}");

    // (b) iterated forward matches the closed form in mean/std (10k draws)
    let small = GridSpec::new(2, 2, 2).unwrap();
    let y0v = 1.7;
    let y0 = {
        let mut f = VectorField::zeros(small);
        f.data_mut().iter_mut().for_each(|v| *v = y0v);
        f
    };
    let mut rng = ChaCha8Rng::seed_from_u64(49);
    let mut draws = Vec::new();
    while draws.len() < 10_000 {
        let mut y = y0.clone();
        for tau in 1..=sched.t_max() {
            let eps = normal_field::<f64, _>(small, 1.0, &mut rng);
            y = sched.forward_step(&y, tau, &eps).unwrap();
        }
        draws.extend_from_slice(y.data());
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let std = (draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let abar = sched.alpha_bar(sched.t_max());
    let expected_mean = abar.sqrt() * y0v;
    let expected_std = (1.0 - abar).sqrt();
    let se_mean = expected_std / n.sqrt();
    let se_std = expected_std / (2.0 * n).sqrt();
    let z_mean = (mean - expected_mean).abs() / se_mean;
    let z_std = (std - expected_std).abs() / se_std;
    assert!(z_mean < 4.0, "mean z-score {z_mean}");
    assert!(z_std < 4.0, "std z-score {z_std}");

    // (c) deterministic oracle reverse chain recovers y0
    let sched50 = NoiseSchedule::<f64>::scaled_linear(50).unwrap();
    let target = smooth_field(
        &FluidMetric::<f64>::with_defaults(grid).unwrap(),
        50,
        0.5,
    );
    let oracle = OracleEpsPredictor {
        target: &target,
        sched: &sched50,
    };
    let cond = ConditioningPack::new(
        ScalarVolume::zeros(grid),
        ScalarVolume::zeros(grid),
        ScalarVolume::zeros(grid),
    )
    .unwrap();
    let mut y = random_field(grid, 51, 1.0);
    for tau in (1..=sched50.t_max()).rev() {
        use sadir_core::denoiser::EpsPredictor;
        let eps_hat = oracle.predict(&y, tau, &cond).unwrap();
        y = sched50
            .reverse_step(&y, tau, &eps_hat, &VectorField::zeros(grid))
            .unwrap();
    }
    let mut max_err: f64 = 0.0;
    let mut max_t: f64 = 0.0;
    for (a, b) in y.data().iter().zip(target.data()) {
        max_err = max_err.max((a - b).abs());
        max_t = max_t.max(b.abs());
    }
    let rel = max_err / max_t;
    assert!(rel < 1e-6, "oracle chain endpoint error {rel}");

    println!(
        "[criterion 5] PASS: round trip {worst_rt:.2e}; moments z = ({z_mean:.2}, {z_std:.2}); oracle chain {rel:.2e}"
    );
}

#[test]
fn criterion_06_denoiser_gradients() {
    let grid = GridSpec::cubic(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let mut params = DenoiserParams::<f64>::init(DenoiserShape::default(), &mut rng).unwrap();
    // randomize the head too so every group carries gradient
    let head_start = params.len() - (3 * 16 * 27 + 3);
    for i in head_start..params.len() {
        params.data_mut()[i] = rng.random_range(-0.1..0.1);
    }

    let atlas = make_template::<f64>(TemplateKind::Ellipsoid, grid);
    let vol = make_template::<f64>(TemplateKind::TwoLobeBump, grid);
    let stack = extract_slices(&vol, Axis::Z, 4).unwrap();
    let (emb, mask) = sadir_core::io::embed_slices(&stack, &grid).unwrap();
    let cond = ConditioningPack::new(atlas, emb, mask).unwrap();
    let y = random_field(grid, 53, 0.5);
    let probe = random_field(grid, 54, 1.0);
    let tau = 5;

    let (_, trace) = params.forward_traced(&y, tau, &cond, true).unwrap();
    let (grads, _) = params.backward(&trace.unwrap(), &probe).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for slot in params.tensors() {
        for _ in 0..10 {
            let idx = slot.offset + rng.random_range(0..slot.len);
            let orig = params.data()[idx];
            params.data_mut()[idx] = orig + h;
            let fp = params.forward(&y, tau, &cond).unwrap().dot(&probe);
            params.data_mut()[idx] = orig - h;
            let fm = params.forward(&y, tau, &cond).unwrap().dot(&probe);
            params.data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
                worst_name = slot.name.clone();
            }
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst} in {worst_name}");
    println!("[criterion 6] PASS: all parameter groups match finite differences (worst {worst:.2e} in {worst_name})");
}

#[test]
fn criterion_07_metrics_oracle() {
    let grid = GridSpec::cubic(16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let blob = |rng: &mut ChaCha8Rng| -> ScalarVolume<f64> {
        let cx = rng.random_range(4.0..12.0);
        let cy = rng.random_range(4.0..12.0);
        let cz = rng.random_range(4.0..12.0);
        let r = rng.random_range(2.0..5.5);
        let mut v = ScalarVolume::zeros(grid);
        for (x, y, z) in grid.iter_voxels() {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) + (z as f64 - cz).powi(2))
                .sqrt();
            if d < r {
                v.set(x, y, z, 1.0);
            }
        }
        v
    };

    // brute-force surface-distance oracle
    let brute = |a: &ScalarVolume<f64>, b: &ScalarVolume<f64>| -> f64 {
        let surf = |v: &ScalarVolume<f64>| -> Vec<(i64, i64, i64)> {
            let mut out = Vec::new();
            let [nx, ny, nz] = grid.dims();
            for z in 0..nz as i64 {
                for y in 0..ny as i64 {
                    for x in 0..nx as i64 {
                        if v.at(x as usize, y as usize, z as usize) <= 0.5 {
                            continue;
                        }
                        let mut boundary = false;
                        for (dx, dy, dz) in
                            [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                        {
                            let (xx, yy, zz) = (x + dx, y + dy, z + dz);
                            if xx < 0
                                || yy < 0
                                || zz < 0
                                || xx >= nx as i64
                                || yy >= ny as i64
                                || zz >= nz as i64
                                || v.at(xx as usize, yy as usize, zz as usize) <= 0.5
                            {
                                boundary = true;
                                break;
                            }
                        }
                        if boundary {
                            out.push((x, y, z));
                        }
                    }
                }
            }
            out
        };
        let sa = surf(a);
        let sb = surf(b);
        let nearest = |p: (i64, i64, i64), set: &[(i64, i64, i64)]| -> f64 {
            set.iter()
                .map(|q| {
                    (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2) + (p.2 - q.2).pow(2)) as f64).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let mut pooled: Vec<f64> = sa.iter().map(|&p| nearest(p, &sb)).collect();
        pooled.extend(sb.iter().map(|&p| nearest(p, &sa)));
        pooled.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let rank = 0.95 * (pooled.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let frac = rank - lo as f64;
        if lo + 1 >= pooled.len() {
            pooled[pooled.len() - 1]
        } else {
            pooled[lo] * (1.0 - frac) + pooled[lo + 1] * frac
        }
    };

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a = blob(&mut rng);
        let b = blob(&mut rng);
        let fast = rhd95(&a, &b, 0.5).unwrap();
        let oracle = brute(&a, &b);
        worst = worst.max((fast - oracle).abs());

        // set identity J = D / (2 - D)
        let d = hard_dice(&a, &b, 0.5).unwrap();
        let j = jaccard(&a, &b, 0.5).unwrap();
        assert!((j - d / (2.0 - d)).abs() < 1e-14);
    }
    assert!(worst < 1e-9, "rhd95 vs brute force {worst}");

    // half-overlapping cubes: D = 0.5, J = 1/3
    let cube = |lo: [usize; 3], hi: [usize; 3]| -> ScalarVolume<f64> {
        let mut v = ScalarVolume::zeros(grid);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    v.set(x, y, z, 1.0);
                }
            }
        }
        v
    };
    let a = cube([0, 0, 0], [4, 4, 4]);
    let b = cube([2, 0, 0], [6, 4, 4]);
    assert!((hard_dice(&a, &b, 0.5).unwrap() - 0.5).abs() < 1e-15);
    assert!((jaccard(&a, &b, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);

    println!("[criterion 7] PASS: rhd95 matches the brute-force oracle on 20 instances (max diff {worst:.2e}); D/J identities hold");
}

#[test]
fn criterion_08_atlas_regression() {
    let _guard = HEAVY.lock().unwrap_or_else(std::sync::PoisonError::into_inner);
    let t0 = Instant::now();
    let grid = GridSpec::cubic(24).unwrap();
    let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
    let shoot_cfg = ShootingConfig::default();
    let template = make_template::<f64>(TemplateKind::TwoLobeBump, grid);
    let subjects = synth_population(&metric, &template, 8, 1.5, 56);

    let cfg = AtlasConfig {
        outer_iters: 25,
        velocity_steps: 3,
        atlas_steps: 2,
        lr_velocity: 5e-4,
        lr_atlas: 2e-5,
        reg_weight: 0.0,
    };
    let state = fit_atlas(&subjects, &metric, &cfg, &shoot_cfg, DEFAULT_SIGMA).unwrap();

    let trace = &state.energy_trace;
    let non_increasing = trace.windows(2).filter(|w| w[1] <= w[0]).count();
    let frac = non_increasing as f64 / (trace.len() - 1) as f64;
    let dsc = hard_dice(&state.atlas, &template, 0.5).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    assert!(frac >= 0.95, "energy non-increasing in only {frac:.2} of iterations");
    assert!(dsc >= 0.90, "atlas DSC vs true template {dsc}");
    assert!(secs < 600.0, "took {secs:.0}s (budget 10 min)");
    println!(
        "[criterion 8] PASS: energy {:.3e} -> {:.3e} (non-increasing {frac:.2}), atlas DSC {dsc:.4}, {secs:.0}s",
        trace[0],
        trace.last().unwrap()
    );
}

#[test]
fn criterion_09_end_to_end_reconstruction() {
    let _guard = HEAVY.lock().unwrap_or_else(std::sync::PoisonError::into_inner);
    let t0 = Instant::now();
    let grid = GridSpec::cubic(16).unwrap();
    let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
    let shoot_cfg = ShootingConfig::default();
    let template = make_template::<f64>(TemplateKind::TwoLobeBump, grid);
    let volumes = synth_population(&metric, &template, 32, 1.0, 7);
    let train_count = 22; // 70/15/15 split of 32
    let test_idx = [27usize, 29, 31];

    let train_subjects: Vec<TrainingSubject<f64>> = volumes[..train_count]
        .iter()
        .map(|v| TrainingSubject {
            volume: v.clone(),
            slices: extract_slices(v, Axis::Z, 8).unwrap(),
        })
        .collect();

    let warm_cfg = AtlasConfig {
        outer_iters: 40,
        lr_velocity: 1e-3,
        ..AtlasConfig::default()
    };
    let train_vols: Vec<_> = volumes[..train_count].to_vec();
    let mut state = fit_atlas(&train_vols, &metric, &warm_cfg, &shoot_cfg, DEFAULT_SIGMA).unwrap();

    let sched = NoiseSchedule::<f64>::scaled_linear(50).unwrap();
    let refine_cfg = AtlasConfig {
        outer_iters: 8,
        lr_velocity: 1e-3,
        ..AtlasConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 20,
        alternation_period: 3,
        seed: 7,
        lambda: 100.0,
        ..TrainConfig::default()
    };
    let (params, report) = train(
        &train_subjects,
        &mut state,
        &sched,
        &metric,
        &refine_cfg,
        &shoot_cfg,
        &cfg,
    )
    .unwrap();

    let settings = ReconstructSettings::default();
    let mut mean_recon = 0.0;
    let mut mean_atlas = 0.0;
    let mut all_positive = true;
    for &i in &test_idx {
        let slices = extract_slices(&volumes[i], Axis::Z, 8).unwrap();
        let r = reconstruct(
            &params,
            &state.atlas,
            &slices,
            &sched,
            &metric,
            &shoot_cfg,
            &settings,
            1000 + i as u64,
        )
        .unwrap();
        mean_recon += hard_dice(&r.volume, &volumes[i], 0.5).unwrap() / test_idx.len() as f64;
        mean_atlas += hard_dice(&state.atlas, &volumes[i], 0.5).unwrap() / test_idx.len() as f64;
        all_positive &= r.jacobian_positive;
    }
    let secs = t0.elapsed().as_secs_f64();

    assert!(mean_recon >= 0.85, "held-out reconstruction DSC {mean_recon:.4}");
    assert!(
        mean_recon > mean_atlas,
        "reconstruction {mean_recon:.4} does not beat the atlas-only baseline {mean_atlas:.4}"
    );
    assert!(all_positive, "a reconstruction had non-positive Jacobian determinant");
    assert!(secs < 1800.0, "took {secs:.0}s (budget 30 min)");
    println!(
        "[criterion 9] PASS: held-out DSC {mean_recon:.4} > atlas-only {mean_atlas:.4}, all Jacobians positive, {} image skips, {secs:.0}s",
        report.skipped_samples
    );
}

#[test]
fn criterion_10_variational_baseline() {
    let grid = GridSpec::cubic(16).unwrap();
    let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
    let shoot_cfg = ShootingConfig::default();
    let template = make_template::<f64>(TemplateKind::TwoLobeBump, grid);

    // degenerate case: slices of the atlas itself reconstruct the atlas
    let self_slices = extract_slices(&template, Axis::Z, 8).unwrap();
    let r0 = variational_reconstruct(&template, &self_slices, &metric, &shoot_cfg, 40, 2e-4, 0.5, 0.02)
        .unwrap();
    let self_dsc = hard_dice(&r0.volume, &template, 0.5).unwrap();
    assert!(self_dsc >= 0.99, "degenerate case DSC {self_dsc}");

    // full-volume recovery of a deformed subject from 8 slices
    let subjects = synth_population(&metric, &template, 3, 1.0, 57);
    let mut worst = 1.0f64;
    let mut worst_dec = 1.0f64;
    for subject in &subjects {
        let slices = extract_slices(subject, Axis::Z, 8).unwrap();
        let r = variational_reconstruct(&template, &slices, &metric, &shoot_cfg, 150, 2e-4, 0.5, 0.02)
            .unwrap();
        let dsc = hard_dice(&r.volume, subject, 0.5).unwrap();
        worst = worst.min(dsc);
        let dec = r.objective_trace.windows(2).filter(|w| w[1] <= w[0]).count();
        worst_dec = worst_dec.min(dec as f64 / (r.objective_trace.len() - 1) as f64);
    }
    assert!(worst >= 0.90, "variational DSC {worst}");
    assert!(worst_dec >= 0.95, "objective decreased in only {worst_dec:.2} of iterations");
    println!(
        "[criterion 10] PASS: degenerate DSC {self_dsc:.4}; full-volume DSC >= {worst:.4}; monotone fraction >= {worst_dec:.2}"
    );
}

#[test]
fn criterion_11_determinism() {
    let base = std::env::temp_dir().join(format!("sadir-accept-det-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);

    // synth twice
    let grid = GridSpec::cubic(10).unwrap();
    let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
    let shoot_cfg = ShootingConfig::default();
    let synth_cfg = SynthConfig {
        kind: TemplateKind::Torus,
        n_subjects: 3,
        grid,
        deform_scale: 0.6,
        slice_axis: Axis::Z,
        slice_count: 4,
        seed: 99,
    };
    for tag in ["a", "b"] {
        synth_dataset(&synth_cfg, &metric, &shoot_cfg, &base.join(tag)).unwrap();
    }
    let manifest = read_manifest(&base.join("a/manifest.txt")).unwrap();
    for entry in &manifest.subjects {
        for file in [Some(&entry.volume), entry.slices.as_ref(), entry.true_v0.as_ref()]
            .into_iter()
            .flatten()
        {
            let fa = std::fs::read(base.join("a").join(file)).unwrap();
            let fb = std::fs::read(base.join("b").join(file)).unwrap();
            assert_eq!(fa, fb, "{file} differs between identically seeded runs");
        }
    }
    assert_eq!(manifest.subjects_in(Split::Train).count(), 2);

    // train twice (tiny) and compare checkpoint bytes
    let volumes: Vec<ScalarVolume<f64>> = manifest
        .subjects
        .iter()
        .map(|s| sadir_core::io::read_volume(&base.join("a").join(&s.volume)).unwrap())
        .collect();
    let subjects: Vec<TrainingSubject<f64>> = volumes
        .iter()
        .map(|v| TrainingSubject {
            volume: v.clone(),
            slices: extract_slices(v, Axis::Z, 4).unwrap(),
        })
        .collect();
    let sched = NoiseSchedule::<f64>::scaled_linear(6).unwrap();
    let atlas_cfg = AtlasConfig {
        outer_iters: 2,
        ..AtlasConfig::default()
    };
    let tiny = TrainConfig {
        epochs: 2,
        alternation_period: 1,
        seed: 5,
        shape: DenoiserShape {
            channels: 4,
            blocks: 1,
            embed_dim: 8,
            se_reduction: 2,
        },
        ..TrainConfig::default()
    };
    for tag in ["t1", "t2"] {
        let mut st = AtlasState::init(&volumes, DEFAULT_SIGMA).unwrap();
        let (params, _) = train(&subjects, &mut st, &sched, &metric, &atlas_cfg, &shoot_cfg, &tiny)
            .unwrap();
        std::fs::create_dir_all(base.join(tag)).unwrap();
        sadir_core::io::save_denoiser(&base.join(tag).join("denoiser.tns"), &params).unwrap();

        // reconstruct with the fresh params and write the result
        let r = reconstruct(
            &params,
            &st.atlas,
            &subjects[0].slices,
            &sched,
            &metric,
            &shoot_cfg,
            &ReconstructSettings {
                x0_clamp: Some(0.5),
                ..ReconstructSettings::default()
            },
            31,
        )
        .unwrap();
        sadir_core::io::write_volume(&base.join(tag).join("recon.svol"), &r.volume).unwrap();
    }
    assert_eq!(
        std::fs::read(base.join("t1/denoiser.tns")).unwrap(),
        std::fs::read(base.join("t2/denoiser.tns")).unwrap(),
        "training checkpoints differ"
    );
    assert_eq!(
        std::fs::read(base.join("t1/recon.svol")).unwrap(),
        std::fs::read(base.join("t2/recon.svol")).unwrap(),
        "reconstructions differ"
    );
    println!("[criterion 11] PASS: synth/train/reconstruct outputs are bit-identical under a fixed seed");
}
