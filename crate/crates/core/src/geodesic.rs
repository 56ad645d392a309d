//! Geodesic shooting: forward-Euler integration of the EPDiff equation
//! from an initial velocity, co-integration of the transform flow, and the
//! exact reverse-mode derivative of the whole discrete integrator.
//!
//! The velocity evolves by
//!
//! ```text
//! dv/dt = -K[ (Dv)^T m + Dm v + m div(v) ],   m = L v,
//! ```
//!
//! and the transform `phi = id + u` flows by `du/dt = -(Du + I) v`.
//! Gradients differentiate the discrete forward Euler composition
//! (store-all, reverse sweep), so they are exact for the implemented
//! integrator and testable against finite differences.

use crate::error::{Error, Result};
use crate::grid::{
    check_same_grid, divergence, divergence_adjoint, jacobian, jacobian_adjoint, MatrixField,
    ScalarVolume, Transform, VectorField,
};
use crate::metric::FluidMetric;
use crate::Scalar;

/// Number of Euler steps used by default.
pub const DEFAULT_STEPS: usize = 10;

/// Configuration of the Euler integration over t in [0, 1].
#[derive(Debug, Clone, Copy)]
pub struct ShootingConfig {
    pub steps: usize,
    pub store_trajectory: bool,
    /// Divergence guard, in voxels: integration aborts once any velocity
    /// or displacement component exceeds this many multiples of the
    /// largest grid dimension. Euler EPDiff can blow up through very
    /// large finite values long before reaching infinity, so a pure
    /// non-finite check is not enough.
    pub blowup_factor: f64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            store_trajectory: true,
            blowup_factor: 1.0,
        }
    }
}

impl ShootingConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidParameter(
                "shooting needs at least one Euler step".into(),
            ));
        }
        if !(self.blowup_factor > 0.0) {
            return Err(Error::InvalidParameter(
                "blowup factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Result of a shoot: the velocity trajectory and the transform at t = 1.
#[derive(Debug, Clone)]
pub struct GeodesicTrajectory<T: Scalar> {
    velocities: Vec<VectorField<T>>,
    /// Displacements per step; present when the config asked to store them.
    displacements: Option<Vec<VectorField<T>>>,
    transform: Transform<T>,
    steps: usize,
}

impl<T: Scalar> GeodesicTrajectory<T> {
    /// Velocity fields v(t_i), i = 0..steps (length steps + 1).
    pub fn velocities(&self) -> &[VectorField<T>] {
        &self.velocities
    }

    pub fn initial_velocity(&self) -> &VectorField<T> {
        &self.velocities[0]
    }

    /// The transform phi at t = 1.
    pub fn transform(&self) -> &Transform<T> {
        &self.transform
    }

    pub fn into_transform(self) -> Transform<T> {
        self.transform
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Right-hand side of EPDiff: `-K[(Dv)^T m + Dm v + m div(v)]` with `m = Lv`.
pub fn epdiff_rhs<T: Scalar>(
    metric: &FluidMetric<T>,
    v: &VectorField<T>,
) -> Result<VectorField<T>> {
    check_same_grid("epdiff_rhs", metric.grid(), v.grid())?;
    let m = metric.apply_l(v)?;
    let bracket = epdiff_bracket(v, &m);
    let mut rhs = metric.apply_k(&bracket)?;
    for x in rhs.data_mut() {
        *x = -*x;
    }
    Ok(rhs)
}

/// The bracketed advection term `(Dv)^T m + Dm v + m div(v)`.
fn epdiff_bracket<T: Scalar>(v: &VectorField<T>, m: &VectorField<T>) -> VectorField<T> {
    let jv = jacobian(v);
    let jm = jacobian(m);
    let div_v = divergence(v);
    let mut out = jv.mat_t_vec(m);
    let adv = jm.mat_vec(v);
    for (o, &a) in out.data_mut().iter_mut().zip(adv.data()) {
        *o = *o + a;
    }
    for c in 0..3 {
        let mc = m.channel(c).to_vec();
        for ((o, &mi), &d) in out.channel_mut(c).iter_mut().zip(&mc).zip(div_v.data()) {
            *o = *o + mi * d;
        }
    }
    out
}

/// Cotangent of [`epdiff_rhs`] w.r.t. `v`: returns `(d rhs / d v)^T w`.
fn epdiff_rhs_vjp<T: Scalar>(
    metric: &FluidMetric<T>,
    v: &VectorField<T>,
    w: &VectorField<T>,
) -> Result<VectorField<T>> {
    let grid = *v.grid();
    // rhs = -K B(v, Lv); with K and L self-adjoint the cotangent is
    // -(B_v^T q + L B_m^T q) at q = K w.
    let q = metric.apply_k(w)?;
    let m = metric.apply_l(v)?;
    let jv = jacobian(v);
    let jm = jacobian(&m);
    let div_v = divergence(v);

    let mut d_v = VectorField::zeros(grid);
    let mut d_m = VectorField::zeros(grid);

    // b1 = (Dv)^T m:
    //   d_v_j += sum_i D_i^T (q_i * m_j);  d_m += (Dv) q
    for j in 0..3 {
        for i in 0..3 {
            let prod: Vec<T> = q
                .channel(i)
                .iter()
                .zip(m.channel(j))
                .map(|(&a, &b)| a * b)
                .collect();
            let adj = crate::grid::diff_axis_adjoint(&prod, &grid, i);
            for (o, a) in d_v.channel_mut(j).iter_mut().zip(adj) {
                *o = *o + a;
            }
        }
    }
    let jv_q = jv.mat_vec(&q);
    d_m.add_scaled(&jv_q, T::one());

    // b2 = (Dm) v:
    //   d_v += (Dm)^T q;  d_m_i += sum_j D_j^T (q_i * v_j)
    let jm_t_q = jm.mat_t_vec(&q);
    d_v.add_scaled(&jm_t_q, T::one());
    for i in 0..3 {
        for j in 0..3 {
            let prod: Vec<T> = q
                .channel(i)
                .iter()
                .zip(v.channel(j))
                .map(|(&a, &b)| a * b)
                .collect();
            let adj = crate::grid::diff_axis_adjoint(&prod, &grid, j);
            for (o, a) in d_m.channel_mut(i).iter_mut().zip(adj) {
                *o = *o + a;
            }
        }
    }

    // b3 = m div(v):
    //   d_v += div^T (sum_i q_i * m_i);  d_m_i += q_i * div(v)
    let mut s = ScalarVolume::zeros(grid);
    for i in 0..3 {
        for ((o, &a), &b) in s
            .data_mut()
            .iter_mut()
            .zip(q.channel(i))
            .zip(m.channel(i))
        {
            *o = *o + a * b;
        }
    }
    let div_adj = divergence_adjoint(&s);
    d_v.add_scaled(&div_adj, T::one());
    for i in 0..3 {
        let qi = q.channel(i).to_vec();
        for ((o, &a), &d) in d_m.channel_mut(i).iter_mut().zip(&qi).zip(div_v.data()) {
            *o = *o + a * d;
        }
    }

    // chain m = L v and the leading minus sign
    let l_dm = metric.apply_l(&d_m)?;
    let mut out = d_v;
    out.add_scaled(&l_dm, T::one());
    for x in out.data_mut() {
        *x = -*x;
    }
    Ok(out)
}

/// Integrate EPDiff and the transform flow from `v0` over t in [0, 1].
pub fn shoot<T: Scalar>(
    metric: &FluidMetric<T>,
    v0: &VectorField<T>,
    cfg: &ShootingConfig,
) -> Result<GeodesicTrajectory<T>> {
    cfg.validate()?;
    check_same_grid("shoot", metric.grid(), v0.grid())?;
    let grid = *v0.grid();
    let steps = cfg.steps;
    let delta = T::one() / T::of_f64(steps as f64);
    let bound = T::of_f64(cfg.blowup_factor * grid.dims().iter().copied().max().unwrap() as f64);

    let mut velocities = Vec::with_capacity(steps + 1);
    let mut displacements = Vec::with_capacity(steps + 1);
    velocities.push(v0.clone());
    displacements.push(VectorField::zeros(grid));

    for k in 0..steps {
        let v_k = &velocities[k];
        let rhs = epdiff_rhs(metric, v_k)?;
        let mut v_next = v_k.clone();
        v_next.add_scaled(&rhs, delta);
        if !v_next.is_finite() || v_next.max_abs() > bound {
            return Err(Error::Divergence {
                step: k,
                what: format!(
                    "EPDiff velocity diverged (peak {:e} voxels)",
                    v_next.max_abs().into_f64()
                ),
            });
        }

        let u_k = &displacements[k];
        let ju = jacobian(u_k);
        let mut du = ju.mat_vec(v_k);
        du.add_scaled(v_k, T::one());
        let mut u_next = u_k.clone();
        u_next.add_scaled(&du, -delta);
        if !u_next.is_finite() || u_next.max_abs() > bound {
            return Err(Error::Divergence {
                step: k,
                what: format!(
                    "transform displacement diverged (peak {:e} voxels)",
                    u_next.max_abs().into_f64()
                ),
            });
        }

        velocities.push(v_next);
        displacements.push(u_next);
    }

    let transform = Transform::from_displacement(displacements[steps].clone());
    Ok(GeodesicTrajectory {
        velocities,
        displacements: if cfg.store_trajectory {
            Some(displacements)
        } else {
            None
        },
        transform,
        steps,
    })
}

/// Reverse-mode derivative of [`shoot`]: pulls a cotangent on the final
/// displacement back to the initial velocity. Linear in `d_phi`.
pub fn shoot_vjp<T: Scalar>(
    metric: &FluidMetric<T>,
    v0: &VectorField<T>,
    cfg: &ShootingConfig,
    d_phi: &VectorField<T>,
) -> Result<VectorField<T>> {
    let mut cfg = *cfg;
    cfg.store_trajectory = true;
    let traj = shoot(metric, v0, &cfg)?;
    shoot_vjp_from(metric, &traj, d_phi)
}

/// As [`shoot_vjp`], reusing an already-computed trajectory.
pub fn shoot_vjp_from<T: Scalar>(
    metric: &FluidMetric<T>,
    traj: &GeodesicTrajectory<T>,
    d_phi: &VectorField<T>,
) -> Result<VectorField<T>> {
    check_same_grid("shoot_vjp", metric.grid(), d_phi.grid())?;
    let displacements = traj
        .displacements
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("shoot_vjp requires a stored trajectory".into()))?;
    let grid = *metric.grid();
    let steps = traj.steps;
    let delta = T::one() / T::of_f64(steps as f64);

    let mut d_u = d_phi.clone();
    let mut d_v_next = VectorField::zeros(grid);

    for k in (0..steps).rev() {
        let v_k = &traj.velocities[k];
        let u_k = &displacements[k];

        // u_{k+1} = u_k - delta * (Ju_k v_k + v_k)
        let ju = jacobian(u_k);
        let mut d_v_from_u = ju.mat_t_vec(&d_u);
        d_v_from_u.add_scaled(&d_u, T::one());
        // cotangent through Ju_k: entries (i, j) get -delta * d_u_i * v_j
        let mut cot_j = MatrixField::zeros(grid);
        for i in 0..3 {
            for j in 0..3 {
                let dui = d_u.channel(i).to_vec();
                for ((o, &a), &b) in cot_j
                    .channel_mut(3 * i + j)
                    .iter_mut()
                    .zip(&dui)
                    .zip(v_k.channel(j))
                {
                    *o = -delta * a * b;
                }
            }
        }
        let d_u_from_j = jacobian_adjoint(&cot_j);
        d_u.add_scaled(&d_u_from_j, T::one());

        // v_{k+1} = v_k + delta * rhs(v_k)
        let rhs_cot = epdiff_rhs_vjp(metric, v_k, &d_v_next)?;
        let mut d_v_k = d_v_next;
        d_v_k.add_scaled(&rhs_cot, delta);
        d_v_k.add_scaled(&d_v_from_u, -delta);
        d_v_next = d_v_k;
    }

    Ok(d_v_next)
}
