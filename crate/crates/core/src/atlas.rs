//! Variational atlas estimation: minimize the population energy
//!
//! ```text
//! E(S, {v_n}) = sum_n (1/sigma^2) ||S o phi(v_n) - Y_n||^2 + <L v_n, v_n>
//!               + reg_weight * <L S, S>
//! ```
//!
//! over the atlas `S` and the per-subject initial velocities, by
//! alternating gradient descent. Velocity updates use the metric-
//! preconditioned descent direction `K(grad)` (plain gradients are badly
//! conditioned by the stiff `L v` term); the reported gradients themselves
//! are the exact Euclidean gradients of the discrete energy.

use crate::error::{Error, Result};
use crate::geodesic::{shoot, shoot_vjp_from, ShootingConfig};
use crate::grid::{check_same_grid, warp, warp_adjoint, ScalarVolume, VectorField};
use crate::metric::FluidMetric;
use crate::Scalar;
use rayon::prelude::*;

/// Default noise standard deviation of the image term.
pub const DEFAULT_SIGMA: f64 = 0.02;

/// Atlas image, per-subject initial velocities, and the energy history.
#[derive(Debug, Clone)]
pub struct AtlasState<T: Scalar> {
    pub atlas: ScalarVolume<T>,
    pub velocities: Vec<VectorField<T>>,
    pub sigma: T,
    pub energy_trace: Vec<f64>,
}

impl<T: Scalar> AtlasState<T> {
    /// Unbiased start: voxelwise mean atlas, zero velocities.
    pub fn init(dataset: &[ScalarVolume<T>], sigma: f64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidParameter(
                "atlas building needs at least one subject".into(),
            ));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let grid = *dataset[0].grid();
        for (i, y) in dataset.iter().enumerate() {
            if y.grid() != &grid {
                return Err(Error::grid_mismatch("atlas dataset", &grid, y.grid()))
                    .map_err(|e| match e {
                        Error::GridMismatch { expected, found, .. } => Error::GridMismatch {
                            context: "atlas dataset",
                            expected,
                            found: format!("{found} (subject {i})"),
                        },
                        other => other,
                    });
            }
        }
        let inv_n = T::of_f64(1.0 / dataset.len() as f64);
        let mut atlas = ScalarVolume::zeros(grid);
        for y in dataset {
            for (a, &b) in atlas.data_mut().iter_mut().zip(y.data()) {
                *a = *a + b * inv_n;
            }
        }
        Ok(Self {
            atlas,
            velocities: vec![VectorField::zeros(grid); dataset.len()],
            sigma: T::of_f64(sigma),
            energy_trace: Vec::new(),
        })
    }
}

/// Optimization settings for [`fit_atlas`].
#[derive(Debug, Clone, Copy)]
pub struct AtlasConfig {
    pub outer_iters: usize,
    pub velocity_steps: usize,
    pub atlas_steps: usize,
    pub lr_velocity: f64,
    pub lr_atlas: f64,
    /// Weight of the optional smoothness penalty `<L S, S>` on the atlas.
    pub reg_weight: f64,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self {
            outer_iters: 50,
            velocity_steps: 3,
            atlas_steps: 2,
            lr_velocity: 2e-4,
            lr_atlas: 2e-5,
            reg_weight: 0.0,
        }
    }
}

impl AtlasConfig {
    fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.velocity_steps == 0 || self.atlas_steps == 0 {
            return Err(Error::InvalidParameter(
                "atlas iteration counts must be positive".into(),
            ));
        }
        if !(self.lr_velocity > 0.0) || !(self.lr_atlas > 0.0) {
            return Err(Error::InvalidParameter(
                "atlas learning rates must be positive".into(),
            ));
        }
        if self.reg_weight < 0.0 {
            return Err(Error::InvalidParameter(
                "reg_weight must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Sum of squared differences (plain, unweighted by voxel volume).
fn ssd<T: Scalar>(a: &ScalarVolume<T>, b: &ScalarVolume<T>) -> T {
    a.data()
        .iter()
        .zip(b.data())
        .fold(T::zero(), |acc, (&x, &y)| {
            let d = x - y;
            acc + d * d
        })
}

/// The population energy at the current state, including the optional
/// atlas smoothness penalty `reg_weight * <L S, S> * voxvol`.
pub fn atlas_energy<T: Scalar>(
    state: &AtlasState<T>,
    dataset: &[ScalarVolume<T>],
    metric: &FluidMetric<T>,
    shoot_cfg: &ShootingConfig,
    reg_weight: f64,
) -> Result<f64> {
    check_dataset(state, dataset)?;
    let inv_s2 = T::one() / (state.sigma * state.sigma);
    let mut energy = T::zero();
    for (y, v) in dataset.iter().zip(&state.velocities) {
        let traj = shoot(metric, v, shoot_cfg)?;
        let warped = warp(&state.atlas, traj.transform())?;
        energy = energy + inv_s2 * ssd(&warped, y) + metric.velocity_norm(v)?;
    }
    if reg_weight > 0.0 {
        let ls = metric.apply_l_scalar(&state.atlas)?;
        let quad = ls
            .data()
            .iter()
            .zip(state.atlas.data())
            .fold(T::zero(), |acc, (&l, &s)| acc + l * s);
        energy = energy + T::of_f64(reg_weight * metric.grid().voxel_volume()) * quad;
    }
    let energy = energy.into_f64();
    if !energy.is_finite() {
        return Err(Error::Divergence {
            step: state.energy_trace.len(),
            what: "atlas energy became non-finite".into(),
        });
    }
    Ok(energy)
}

/// Exact gradient of the energy w.r.t. subject `n`'s initial velocity.
pub fn grad_velocity<T: Scalar>(
    state: &AtlasState<T>,
    n: usize,
    dataset: &[ScalarVolume<T>],
    metric: &FluidMetric<T>,
    shoot_cfg: &ShootingConfig,
) -> Result<VectorField<T>> {
    check_dataset(state, dataset)?;
    if n >= dataset.len() {
        return Err(Error::IndexOutOfRange {
            index: n,
            len: dataset.len(),
        });
    }
    let v = &state.velocities[n];
    let mut cfg = *shoot_cfg;
    cfg.store_trajectory = true;
    let traj = shoot(metric, v, &cfg)?;
    let warped = warp(&state.atlas, traj.transform())?;

    // residual of the data term: 2/sigma^2 (S o phi - Y)
    let two_inv_s2 = T::of_f64(2.0) / (state.sigma * state.sigma);
    let mut residual = warped;
    for (r, &y) in residual.data_mut().iter_mut().zip(dataset[n].data()) {
        *r = (*r - y) * two_inv_s2;
    }
    let (_, d_u) = warp_adjoint(&residual, traj.transform(), &state.atlas)?;
    let mut grad = shoot_vjp_from(metric, &traj, &d_u)?;

    // + gradient of <L v, v> * voxvol
    let lv = metric.apply_l(v)?;
    grad.add_scaled(&lv, T::of_f64(2.0 * metric.grid().voxel_volume()));
    Ok(grad)
}

/// Exact gradient of the energy w.r.t. the atlas image.
pub fn grad_atlas<T: Scalar>(
    state: &AtlasState<T>,
    dataset: &[ScalarVolume<T>],
    metric: &FluidMetric<T>,
    shoot_cfg: &ShootingConfig,
    reg_weight: f64,
) -> Result<ScalarVolume<T>> {
    check_dataset(state, dataset)?;
    let grid = *state.atlas.grid();
    let two_inv_s2 = T::of_f64(2.0) / (state.sigma * state.sigma);

    let per_subject: Vec<Result<ScalarVolume<T>>> = dataset
        .par_iter()
        .zip(state.velocities.par_iter())
        .map(|(y, v)| {
            let traj = shoot(metric, v, shoot_cfg)?;
            let warped = warp(&state.atlas, traj.transform())?;
            let mut residual = warped;
            for (r, &yv) in residual.data_mut().iter_mut().zip(y.data()) {
                *r = (*r - yv) * two_inv_s2;
            }
            let (d_vol, _) = warp_adjoint(&residual, traj.transform(), &state.atlas)?;
            Ok(d_vol)
        })
        .collect();

    let mut grad = ScalarVolume::zeros(grid);
    for contrib in per_subject {
        let contrib = contrib?;
        for (g, &c) in grad.data_mut().iter_mut().zip(contrib.data()) {
            *g = *g + c;
        }
    }

    if reg_weight > 0.0 {
        let ls = metric.apply_l_scalar(&state.atlas)?;
        let w = T::of_f64(2.0 * reg_weight * grid.voxel_volume());
        for (g, &l) in grad.data_mut().iter_mut().zip(ls.data()) {
            *g = *g + w * l;
        }
    }
    Ok(grad)
}

fn check_dataset<T: Scalar>(state: &AtlasState<T>, dataset: &[ScalarVolume<T>]) -> Result<()> {
    if dataset.len() != state.velocities.len() {
        return Err(Error::InvalidParameter(format!(
            "state holds {} velocities but the dataset has {} subjects",
            state.velocities.len(),
            dataset.len()
        )));
    }
    for y in dataset {
        check_same_grid("atlas", state.atlas.grid(), y.grid())?;
    }
    Ok(())
}

/// Alternating minimization of the population energy.
///
/// Against the `reg_weight` from `cfg`; the energy recorded in the trace
/// includes the same penalty so the non-increase property is measured on
/// the true objective.
pub fn fit_atlas<T: Scalar>(
    dataset: &[ScalarVolume<T>],
    metric: &FluidMetric<T>,
    cfg: &AtlasConfig,
    shoot_cfg: &ShootingConfig,
    sigma: f64,
) -> Result<AtlasState<T>> {
    cfg.validate()?;
    let mut state = AtlasState::init(dataset, sigma)?;
    refine_atlas(&mut state, dataset, metric, cfg, shoot_cfg)?;
    Ok(state)
}

/// Run `cfg.outer_iters` alternations on an existing state (warm start).
pub fn refine_atlas<T: Scalar>(
    state: &mut AtlasState<T>,
    dataset: &[ScalarVolume<T>],
    metric: &FluidMetric<T>,
    cfg: &AtlasConfig,
    shoot_cfg: &ShootingConfig,
) -> Result<()> {
    cfg.validate()?;
    check_dataset(state, dataset)?;
    let mut lr_v = T::of_f64(cfg.lr_velocity);
    let mut lr_a = T::of_f64(cfg.lr_atlas);
    let mut prev_energy = f64::INFINITY;
    let mut consecutive_increases = 0usize;

    // cap on the per-step velocity change, in voxels; ordinary steps stay
    // far below it, runaway steps into the EPDiff blow-up region do not
    let step_cap = T::of_f64(0.5);

    for _outer in 0..cfg.outer_iters {
        // velocity block: per-subject descent along the K-preconditioned
        // gradient (independent subjects, parallel); a diverging step
        // reverts that subject to its last stable velocity
        let snapshot = state.clone();
        let updated: Vec<Result<VectorField<T>>> = (0..dataset.len())
            .into_par_iter()
            .map(|n| {
                let mut local = snapshot.clone();
                // the incoming velocity shot successfully during the last
                // energy evaluation; every gradient evaluation re-proves
                // stability of the current iterate before we step past it
                let mut last_good = local.velocities[n].clone();
                for _ in 0..cfg.velocity_steps {
                    let step = grad_velocity(&local, n, dataset, metric, shoot_cfg)
                        .and_then(|g| metric.apply_k(&g));
                    match step {
                        Ok(dir) => {
                            last_good = local.velocities[n].clone();
                            let peak = (dir.max_abs() * lr_v).max(T::epsilon());
                            let scale = if peak > step_cap { step_cap / peak } else { T::one() };
                            local.velocities[n].add_scaled(&dir, -lr_v * scale);
                        }
                        Err(Error::Divergence { .. }) => {
                            local.velocities[n] = last_good.clone();
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                // the final step was applied without a follow-up proof
                if shoot(metric, &local.velocities[n], shoot_cfg).is_err() {
                    local.velocities[n] = last_good;
                }
                Ok(local.velocities[n].clone())
            })
            .collect();
        for (n, v) in updated.into_iter().enumerate() {
            state.velocities[n] = v?;
        }

        // atlas block
        for _ in 0..cfg.atlas_steps {
            let g = grad_atlas(state, dataset, metric, shoot_cfg, cfg.reg_weight)?;
            for (s, &gv) in state.atlas.data_mut().iter_mut().zip(g.data()) {
                *s = *s - lr_a * gv;
            }
        }

        let energy = atlas_energy(state, dataset, metric, shoot_cfg, cfg.reg_weight)?;
        state.energy_trace.push(energy);
        if !energy.is_finite() {
            return Err(Error::Divergence {
                step: state.energy_trace.len(),
                what: format!("atlas energy diverged; trace {:?}", state.energy_trace),
            });
        }
        if energy > prev_energy {
            consecutive_increases += 1;
            if consecutive_increases >= 2 {
                lr_v = lr_v * T::of_f64(0.5);
                lr_a = lr_a * T::of_f64(0.5);
                consecutive_increases = 0;
            }
        } else {
            consecutive_increases = 0;
        }
        prev_energy = energy;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bump_volume(grid: GridSpec, cx: f64, cy: f64, cz: f64, r: f64) -> ScalarVolume<f64> {
        let mut v = ScalarVolume::zeros(grid);
        for (x, y, z) in grid.iter_voxels() {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) + (z as f64 - cz).powi(2))
                .sqrt();
            let val = 1.0 / (1.0 + ((d - r) / 0.8).exp());
            v.set(x, y, z, val);
        }
        v
    }

    fn random_volume(grid: GridSpec, seed: u64) -> ScalarVolume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarVolume::from_vec(
            grid,
            (0..grid.len()).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Smooth small velocity with a half-voxel drift: keeps warp sampling
    /// points away from the interpolation kinks at integer coordinates.
    fn offset_smooth_field(metric: &FluidMetric<f64>, seed: u64, amp: f64) -> VectorField<f64> {
        let grid = *metric.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = VectorField::from_vec(
            grid,
            (0..3 * grid.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let smooth = metric.apply_k(&noise).unwrap();
        let mut v = smooth.scaled(amp / smooth.max_abs());
        for x in v.data_mut() {
            *x += 0.42;
        }
        v
    }

    #[test]
    fn energy_zero_at_perfect_single_subject() {
        let grid = GridSpec::cubic(8).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let y = bump_volume(grid, 4.0, 4.0, 4.0, 2.0);
        let state = AtlasState::init(std::slice::from_ref(&y), DEFAULT_SIGMA).unwrap();
        let e = atlas_energy(&state, &[y], &metric, &ShootingConfig::default(), 0.0).unwrap();
        assert!(e.abs() < 1e-20, "{e}");
    }

    #[test]
    fn energy_is_scaled_ssd_under_identity_warp() {
        let grid = GridSpec::cubic(8).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let y = random_volume(grid, 130);
        let s = random_volume(grid, 131);
        let mut state = AtlasState::init(std::slice::from_ref(&y), 0.02).unwrap();
        state.atlas = s.clone();
        let e = atlas_energy(&state, std::slice::from_ref(&y), &metric, &ShootingConfig::default(), 0.0)
            .unwrap();
        let expected: f64 = s
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / (0.02 * 0.02);
        assert!((e - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn default_sigma_matches_reference_setting() {
        assert_eq!(DEFAULT_SIGMA, 0.02);
    }

    #[test]
    fn gradient_vanishes_at_subject_optimum() {
        let grid = GridSpec::cubic(8).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let y = bump_volume(grid, 4.0, 4.0, 4.0, 2.0);
        let state = AtlasState::init(std::slice::from_ref(&y), DEFAULT_SIGMA).unwrap();
        let g = grad_velocity(&state, 0, std::slice::from_ref(&y), &metric, &ShootingConfig::default())
            .unwrap();
        assert!(g.max_abs() < 1e-12, "{}", g.max_abs());
    }

    #[test]
    fn velocity_gradient_index_is_checked() {
        let grid = GridSpec::cubic(6).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let y = random_volume(grid, 132);
        let state = AtlasState::init(std::slice::from_ref(&y), 0.02).unwrap();
        assert!(matches!(
            grad_velocity(&state, 1, std::slice::from_ref(&y), &metric, &ShootingConfig::default()),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn regularizer_gradient_is_twice_l_v() {
        // with S == Y and phi near identity the data-term gradient vanishes,
        // leaving 2 L v (unit voxel volume)
        let grid = GridSpec::cubic(8).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let y = ScalarVolume::constant(grid, 0.5);
        let mut state = AtlasState::init(std::slice::from_ref(&y), 0.02).unwrap();
        state.velocities[0] = offset_smooth_field(&metric, 133, 0.3);
        let g = grad_velocity(&state, 0, std::slice::from_ref(&y), &metric, &ShootingConfig::default())
            .unwrap();
        let lv = metric.apply_l(&state.velocities[0]).unwrap();
        for (a, b) in g.data().iter().zip(lv.data()) {
            assert!((a - 2.0 * b).abs() < 1e-10, "{a} vs {}", 2.0 * b);
        }
    }

    #[test]
    fn velocity_gradient_matches_finite_differences() {
        let grid = GridSpec::cubic(8).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let shoot_cfg = ShootingConfig::default();
        let y = bump_volume(grid, 4.2, 3.8, 4.0, 2.2);
        let mut state = AtlasState::init(std::slice::from_ref(&y), 0.02).unwrap();
        state.atlas = bump_volume(grid, 3.8, 4.2, 4.0, 2.0);
        state.velocities[0] = offset_smooth_field(&metric, 134, 0.25);

        let grad =
            grad_velocity(&state, 0, std::slice::from_ref(&y), &metric, &shoot_cfg).unwrap();
        let energy = |state: &AtlasState<f64>| {
            atlas_energy(state, std::slice::from_ref(&y), &metric, &shoot_cfg, 0.0).unwrap()
        };
        let h = 1e-5;
        for probe in 0..5 {
            let delta = {
                let noise = offset_smooth_field(&metric, 200 + probe, 1.0);
                noise.scaled(1.0 / noise.max_abs())
            };
            let mut sp = state.clone();
            sp.velocities[0].add_scaled(&delta, h);
            let mut sm = state.clone();
            sm.velocities[0].add_scaled(&delta, -h);
            let fd = (energy(&sp) - energy(&sm)) / (2.0 * h);
            let an = grad.dot(&delta);
            let rel = (fd - an).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-4, "probe {probe}: fd {fd} vs {an} (rel {rel})");
        }
    }

    #[test]
    fn atlas_gradient_identity_warp_closed_form() {
        let grid = GridSpec::cubic(8).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let ys = vec![random_volume(grid, 135), random_volume(grid, 136)];
        let mut state = AtlasState::init(&ys, 0.02).unwrap();
        state.atlas = random_volume(grid, 137);
        let g = grad_atlas(&state, &ys, &metric, &ShootingConfig::default(), 0.0).unwrap();
        let inv = 2.0 / (0.02 * 0.02);
        for i in 0..grid.len() {
            let expected = inv
                * ((state.atlas.data()[i] - ys[0].data()[i])
                    + (state.atlas.data()[i] - ys[1].data()[i]));
            assert!((g.data()[i] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn atlas_gradient_zero_at_mean_with_identity_warps() {
        let grid = GridSpec::cubic(8).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let ys = vec![random_volume(grid, 138), random_volume(grid, 139)];
        let state = AtlasState::init(&ys, 0.02).unwrap(); // atlas = mean
        let g = grad_atlas(&state, &ys, &metric, &ShootingConfig::default(), 0.0).unwrap();
        let max = g.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max < 1e-9, "{max}");
    }

    #[test]
    fn atlas_gradient_matches_finite_differences() {
        let grid = GridSpec::cubic(8).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let shoot_cfg = ShootingConfig::default();
        let ys = vec![
            bump_volume(grid, 4.2, 3.8, 4.0, 2.2),
            bump_volume(grid, 3.6, 4.4, 4.2, 1.8),
        ];
        let mut state = AtlasState::init(&ys, 0.02).unwrap();
        state.velocities[0] = offset_smooth_field(&metric, 140, 0.2);
        state.velocities[1] = offset_smooth_field(&metric, 141, 0.2);

        let grad = grad_atlas(&state, &ys, &metric, &shoot_cfg, 0.0).unwrap();
        let energy =
            |state: &AtlasState<f64>| atlas_energy(state, &ys, &metric, &shoot_cfg, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(142);
        let h = 1e-6;
        for probe in 0..5 {
            let delta = random_volume(grid, 300 + probe);
            let _ = &mut rng;
            let mut sp = state.clone();
            for (s, &d) in sp.atlas.data_mut().iter_mut().zip(delta.data()) {
                *s += h * d;
            }
            let mut sm = state.clone();
            for (s, &d) in sm.atlas.data_mut().iter_mut().zip(delta.data()) {
                *s -= h * d;
            }
            let fd = (energy(&sp) - energy(&sm)) / (2.0 * h);
            let an: f64 = grad
                .data()
                .iter()
                .zip(delta.data())
                .map(|(&a, &b)| a * b)
                .sum();
            let rel = (fd - an).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-4, "probe {probe}: fd {fd} vs {an} (rel {rel})");
        }
    }

    #[test]
    fn single_subject_fit_recovers_the_subject() {
        let grid = GridSpec::cubic(8).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let y = bump_volume(grid, 4.0, 4.0, 4.0, 2.0);
        let cfg = AtlasConfig {
            outer_iters: 5,
            ..AtlasConfig::default()
        };
        let state = fit_atlas(
            std::slice::from_ref(&y),
            &metric,
            &cfg,
            &ShootingConfig::default(),
            DEFAULT_SIGMA,
        )
        .unwrap();
        // initialized at the optimum (atlas = the subject, v = 0) and must
        // stay there
        let final_energy = *state.energy_trace.last().unwrap();
        assert!(final_energy.abs() < 1e-3, "{final_energy}");
        assert_eq!(state.energy_trace.len(), 5);
    }

    #[test]
    fn identical_subjects_behave_like_one() {
        let grid = GridSpec::cubic(8).unwrap();
        let metric = FluidMetric::<f64>::with_defaults(grid).unwrap();
        let y = bump_volume(grid, 4.0, 4.0, 4.0, 2.0);
        let ys = vec![y.clone(), y.clone(), y];
        let cfg = AtlasConfig {
            outer_iters: 3,
            ..AtlasConfig::default()
        };
        let state = fit_atlas(&ys, &metric, &cfg, &ShootingConfig::default(), DEFAULT_SIGMA)
            .unwrap();
        assert!(state.energy_trace.last().unwrap().abs() < 1e-3);
        for v in &state.velocities {
            assert!(v.max_abs() < 1e-3);
        }
    }
}
