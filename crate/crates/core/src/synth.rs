//! Synthetic dataset generation with known ground truth: smooth soft-edged
//! templates, random diffeomorphic deformations of them, and the on-disk
//! dataset layout (volumes, true initial velocities, slice stacks, manifest).

use crate::error::{Error, Result};
use crate::geodesic::{shoot, ShootingConfig};
use crate::grid::{warp, Axis, GridSpec, ScalarVolume, VectorField};
use crate::io::{
    extract_slices, write_manifest, write_slice_stack, write_vector_field, write_volume,
    DatasetManifest, Split, SubjectEntry,
};
use crate::metric::FluidMetric;
use crate::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Template shapes for the synthetic suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    /// Two overlapping spherical lobes.
    TwoLobeBump,
    /// A solid ring.
    Torus,
    /// A single anisotropic blob.
    Ellipsoid,
}

impl TemplateKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two-lobe-bump" => Ok(TemplateKind::TwoLobeBump),
            "torus" => Ok(TemplateKind::Torus),
            "ellipsoid" => Ok(TemplateKind::Ellipsoid),
            other => Err(Error::Usage(format!(
                "unknown template {other:?} (expected two-lobe-bump, torus or ellipsoid)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::TwoLobeBump => "two-lobe-bump",
            TemplateKind::Torus => "torus",
            TemplateKind::Ellipsoid => "ellipsoid",
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth template with values in (0, 1); the edge softness is about one
/// voxel so image gradients stay informative.
pub fn make_template<T: Scalar>(kind: TemplateKind, grid: GridSpec) -> ScalarVolume<T> {
    let [nx, ny, nz] = grid.dims();
    let c = [
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    ];
    let n_min = nx.min(ny).min(nz) as f64;
    let edge = 0.8; // voxels
    let mut out = ScalarVolume::zeros(grid);
    let mut i = 0;
    for (x, y, z) in grid.iter_voxels() {
        let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
        let value = match kind {
            TemplateKind::TwoLobeBump => {
                let r = 0.18 * n_min;
                let off = 0.13 * n_min;
                let d1 = ((p[0] - off).powi(2) + p[1] * p[1] + p[2] * p[2]).sqrt();
                let d2 = ((p[0] + off).powi(2) + p[1] * p[1] + p[2] * p[2]).sqrt();
                let s1 = sigmoid((r - d1) / edge);
                let s2 = sigmoid((r - d2) / edge);
                s1 + s2 - s1 * s2 // smooth union
            }
            TemplateKind::Torus => {
                let major = 0.26 * n_min;
                let tube = 0.13 * n_min;
                let ring = ((p[0] * p[0] + p[1] * p[1]).sqrt() - major).powi(2) + p[2] * p[2];
                sigmoid((tube - ring.sqrt()) / edge)
            }
            TemplateKind::Ellipsoid => {
                let radii = [0.30 * n_min, 0.22 * n_min, 0.17 * n_min];
                let rho = ((p[0] / radii[0]).powi(2)
                    + (p[1] / radii[1]).powi(2)
                    + (p[2] / radii[2]).powi(2))
                .sqrt();
                let mean_r = (radii[0] * radii[1] * radii[2]).cbrt();
                sigmoid((1.0 - rho) * mean_r / edge)
            }
        };
        out.data_mut()[i] = T::of_f64(value);
        i += 1;
    }
    out
}

/// Settings for [`synth_dataset`].
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub kind: TemplateKind,
    pub n_subjects: usize,
    pub grid: GridSpec,
    /// Peak displacement velocity magnitude, in voxels.
    pub deform_scale: f64,
    pub slice_axis: Axis,
    pub slice_count: usize,
    pub seed: u64,
}

/// Smooth random velocity: white noise pushed through K, rescaled to the
/// requested peak magnitude.
pub fn random_smooth_velocity<T: Scalar, R: Rng + ?Sized>(
    metric: &FluidMetric<T>,
    max_abs: f64,
    rng: &mut R,
) -> Result<VectorField<T>> {
    let grid = *metric.grid();
    let mut noise = VectorField::zeros(grid);
    for v in noise.data_mut() {
        *v = T::standard_normal(rng);
    }
    let smooth = metric.apply_k(&noise)?;
    let peak = smooth.max_abs();
    if peak == T::zero() {
        return Ok(smooth);
    }
    Ok(smooth.scaled(T::of_f64(max_abs) / peak))
}

/// Generate a synthetic population (deformed copies of one template),
/// write every artifact under `out_dir`, and return the manifest.
///
/// Each subject keeps its true generating velocity on disk. Subjects whose
/// deformation folds (non-positive Jacobian determinant) are regenerated at
/// 0.7x scale; the retries are recorded in `synth.log`.
pub fn synth_dataset<T: Scalar>(
    cfg: &SynthConfig,
    metric: &FluidMetric<T>,
    shoot_cfg: &ShootingConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if cfg.n_subjects < 1 {
        return Err(Error::InvalidParameter(
            "synthetic dataset needs at least one subject".into(),
        ));
    }
    if cfg.grid != *metric.grid() {
        return Err(Error::grid_mismatch("synth_dataset", metric.grid(), &cfg.grid));
    }
    std::fs::create_dir_all(out_dir)?;
    let template = make_template::<T>(cfg.kind, cfg.grid);
    write_volume(&out_dir.join("template.svol"), &template)?;

    let n = cfg.n_subjects;
    let n_train = ((0.7 * n as f64).floor() as usize).max(1).min(n);
    let n_val = ((0.15 * n as f64).floor() as usize).min(n - n_train);
    let mut log = format!(
        "template={} grid={} subjects={} deform_scale={} seed={}\n",
        cfg.kind.name(),
        cfg.grid,
        n,
        cfg.deform_scale,
        cfg.seed
    );

    let mut manifest = DatasetManifest {
        template: Some("template.svol".into()),
        subjects: Vec::with_capacity(n),
    };

    for s in 0..n {
        // one RNG stream per subject: retries cannot shift other subjects
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s as u64 + 1);

        let mut scale = cfg.deform_scale;
        let mut v0 = random_smooth_velocity(metric, scale, &mut rng)?;
        let mut attempts = 0;
        let traj = loop {
            // unstable integration counts as a failed draw, like folding
            let outcome = match shoot(metric, &v0, shoot_cfg) {
                Ok(t) if t.transform().is_orientation_preserving() => Some(t),
                Ok(_) => None,
                Err(Error::Divergence { .. }) => None,
                Err(e) => return Err(e),
            };
            if let Some(t) = outcome {
                break t;
            }
            attempts += 1;
            if attempts > 8 {
                return Err(Error::Divergence {
                    step: s,
                    what: format!(
                        "subject {s}: could not find a stable fold-free deformation after {attempts} tries"
                    ),
                });
            }
            scale *= 0.7;
            log.push_str(&format!(
                "subject {s}: unstable or folded at scale {:.4}, regenerating at {scale:.4}\n",
                scale / 0.7
            ));
            v0 = v0.scaled(T::of_f64(0.7));
        };

        let volume = warp(&template, traj.transform())?;
        let stack = extract_slices(&volume, cfg.slice_axis, cfg.slice_count)?;

        let vol_name = format!("subject_{s:03}.svol");
        let v0_name = format!("subject_{s:03}_v0.svol");
        let sls_name = format!("subject_{s:03}.sls");
        write_volume(&out_dir.join(&vol_name), &volume)?;
        write_vector_field(&out_dir.join(&v0_name), &v0)?;
        write_slice_stack(&out_dir.join(&sls_name), &stack)?;

        let split = if s < n_train {
            Split::Train
        } else if s < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        manifest.subjects.push(SubjectEntry {
            volume: vol_name,
            slices: Some(sls_name),
            true_v0: Some(v0_name),
            split,
        });
    }

    write_manifest(&out_dir.join("manifest.txt"), &manifest)?;
    std::fs::write(out_dir.join("synth.log"), log)?;
    Ok(manifest)
}
