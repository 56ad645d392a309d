//! Scalar and vector fields on regular 3D grids: trilinear interpolation,
//! warping and its exact adjoint, and finite-difference operators.
//!
//! All coordinates are voxel-index coordinates; grid spacing enters only
//! the differential operators. Interpolation clamps to the boundary voxel,
//! finite differences use central stencils inside and one-sided stencils
//! at the boundary.

use crate::error::{Error, Result};
use crate::Scalar;
use std::fmt;

/// Axis of a 3D grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::InvalidParameter(format!("unknown axis {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// Discretization of the domain: grid dimensions and voxel spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl GridSpec {
    /// Isotropic unit-spacing grid.
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        Self::with_spacing([nx, ny, nz], [1.0; 3])
    }

    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidParameter(format!(
                "grid dims must all be >= 2, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Cubic grid of side `n`, unit spacing.
    pub fn cubic(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume of one voxel in world units.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Linear index of voxel (x, y, z); x-fastest ordering.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Strides per axis for the x-fastest layout.
    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        [1, self.dims[0], self.dims[0] * self.dims[1]]
    }

    /// Iterate voxel coordinates in storage order.
    pub fn iter_voxels(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| (x, y, z))))
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} (spacing {:.3},{:.3},{:.3})",
            self.dims[0], self.dims[1], self.dims[2], self.spacing[0], self.spacing[1], self.spacing[2]
        )
    }
}

pub(crate) fn check_same_grid(
    context: &'static str,
    expected: &GridSpec,
    found: &GridSpec,
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::grid_mismatch(context, expected, found))
    }
}

/// A scalar field sampled on a regular grid (image, atlas, mask).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume<T: Scalar> {
    grid: GridSpec,
    data: Vec<T>,
}

impl<T: Scalar> ScalarVolume<T> {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            data: vec![T::zero(); grid.len()],
        }
    }

    pub fn constant(grid: GridSpec, value: T) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_vec(grid: GridSpec, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "scalar volume data length {} does not match grid {grid}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "scalar volume contains non-finite values".into(),
            ));
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.grid.index(x, y, z);
        self.data[i] = value;
    }

    /// Map each value through `f`.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A 3-channel vector field (velocity, momentum, displacement).
///
/// Storage is channel-major: channel `c` occupies `data[c*n..(c+1)*n]`
/// with the same x-fastest voxel layout as [`ScalarVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField<T: Scalar> {
    grid: GridSpec,
    data: Vec<T>,
}

impl<T: Scalar> VectorField<T> {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            data: vec![T::zero(); 3 * grid.len()],
        }
    }

    pub fn from_vec(grid: GridSpec, data: Vec<T>) -> Result<Self> {
        if data.len() != 3 * grid.len() {
            return Err(Error::InvalidParameter(format!(
                "vector field data length {} does not match 3x grid {grid}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "vector field contains non-finite values".into(),
            ));
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Vector at voxel index `i`.
    #[inline]
    pub fn vector_at(&self, i: usize) -> [T; 3] {
        let n = self.grid.len();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    #[inline]
    pub fn set_vector(&mut self, i: usize, v: [T; 3]) {
        let n = self.grid.len();
        self.data[i] = v[0];
        self.data[n + i] = v[1];
        self.data[2 * n + i] = v[2];
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &VectorField<T>, s: T) {
        debug_assert_eq!(self.grid, other.grid);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b * s;
        }
    }

    /// Plain (unweighted) dot product over all channels and voxels.
    pub fn dot(&self, other: &VectorField<T>) -> T {
        debug_assert_eq!(self.grid, other.grid);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Componentwise clamp to `[-bound, bound]`.
    pub fn clamped(&self, bound: T) -> Self {
        Self {
            grid: self.grid,
            data: self
                .data
                .iter()
                .map(|&v| v.max(-bound).min(bound))
                .collect(),
        }
    }
}

/// A spatial transform represented as identity plus displacement:
/// `phi(x) = x + u(x)`, `u` in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform<T: Scalar> {
    displacement: VectorField<T>,
}

impl<T: Scalar> Transform<T> {
    pub fn identity(grid: GridSpec) -> Self {
        Self {
            displacement: VectorField::zeros(grid),
        }
    }

    pub fn from_displacement(displacement: VectorField<T>) -> Self {
        Self { displacement }
    }

    pub fn grid(&self) -> &GridSpec {
        self.displacement.grid()
    }

    pub fn displacement(&self) -> &VectorField<T> {
        &self.displacement
    }

    pub fn into_displacement(self) -> VectorField<T> {
        self.displacement
    }

    /// Voxelwise determinant of the Jacobian of `phi = id + u`.
    pub fn jacobian_determinant(&self) -> ScalarVolume<T> {
        let grid = *self.grid();
        let du = jacobian(&self.displacement);
        let mut out = ScalarVolume::zeros(grid);
        let one = T::one();
        for i in 0..grid.len() {
            let m = du.matrix_at(i);
            let a = [
                [m[0] + one, m[1], m[2]],
                [m[3], m[4] + one, m[5]],
                [m[6], m[7], m[8] + one],
            ];
            let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
            out.data_mut()[i] = det;
        }
        out
    }

    /// True when det(I + Du) > 0 at every voxel.
    pub fn is_orientation_preserving(&self) -> bool {
        self.jacobian_determinant()
            .data()
            .iter()
            .all(|&d| d > T::zero())
    }
}

/// A 9-channel field of per-voxel 3x3 matrices (row-major channels:
/// entry (i, j) lives in channel `3*i + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField<T: Scalar> {
    grid: GridSpec,
    data: Vec<T>,
}

impl<T: Scalar> MatrixField<T> {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            data: vec![T::zero(); 9 * grid.len()],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Row-major 3x3 matrix at voxel index `i`.
    #[inline]
    pub fn matrix_at(&self, i: usize) -> [T; 9] {
        let n = self.grid.len();
        let mut m = [T::zero(); 9];
        for (c, slot) in m.iter_mut().enumerate() {
            *slot = self.data[c * n + i];
        }
        m
    }

    /// Voxelwise matrix-vector product `M w`.
    pub fn mat_vec(&self, w: &VectorField<T>) -> VectorField<T> {
        let n = self.grid.len();
        let mut out = VectorField::zeros(self.grid);
        for i in 0..n {
            let m = self.matrix_at(i);
            let v = w.vector_at(i);
            out.set_vector(
                i,
                [
                    m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
                    m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
                    m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
                ],
            );
        }
        out
    }

    /// Voxelwise transposed product `M^T w`.
    pub fn mat_t_vec(&self, w: &VectorField<T>) -> VectorField<T> {
        let n = self.grid.len();
        let mut out = VectorField::zeros(self.grid);
        for i in 0..n {
            let m = self.matrix_at(i);
            let v = w.vector_at(i);
            out.set_vector(
                i,
                [
                    m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
                    m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
                    m[2] * v[0] + m[5] * v[1] + m[8] * v[2],
                ],
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Trilinear interpolation
// ---------------------------------------------------------------------------

/// Corner indices, weights and weight gradients of one trilinear query.
struct Cell<T> {
    // low/high voxel indices per axis
    ix: [usize; 2],
    iy: [usize; 2],
    iz: [usize; 2],
    // fractional offsets
    f: [T; 3],
    // clamp masks: 1 inside the open domain, 0 where clamping froze the axis
    g: [T; 3],
}

impl<T: Scalar> Cell<T> {
    #[inline]
    fn locate(grid: &GridSpec, q: [T; 3]) -> Self {
        let dims = grid.dims();
        let mut ix = [[0usize; 2]; 3];
        let mut f = [T::zero(); 3];
        let mut g = [T::zero(); 3];
        for a in 0..3 {
            let hi = T::of_f64((dims[a] - 1) as f64);
            let c = q[a].max(T::zero()).min(hi);
            let lo = c.floor();
            let i0 = lo.into_f64() as usize;
            let i1 = (i0 + 1).min(dims[a] - 1);
            ix[a] = [i0, i1];
            f[a] = c - lo;
            g[a] = if q[a] > T::zero() && q[a] < hi {
                T::one()
            } else {
                T::zero()
            };
        }
        Cell {
            ix: ix[0],
            iy: ix[1],
            iz: ix[2],
            f,
            g,
        }
    }

    /// The 8 corner linear indices and weights.
    #[inline]
    fn corners(&self, grid: &GridSpec) -> [(usize, T); 8] {
        let one = T::one();
        let wx = [one - self.f[0], self.f[0]];
        let wy = [one - self.f[1], self.f[1]];
        let wz = [one - self.f[2], self.f[2]];
        let mut out = [(0usize, T::zero()); 8];
        let mut k = 0;
        for (dz, &z) in self.iz.iter().enumerate() {
            for (dy, &y) in self.iy.iter().enumerate() {
                for (dx, &x) in self.ix.iter().enumerate() {
                    out[k] = (grid.index(x, y, z), wx[dx] * wy[dy] * wz[dz]);
                    k += 1;
                }
            }
        }
        out
    }

    #[inline]
    fn value(&self, grid: &GridSpec, data: &[T]) -> T {
        self.corners(grid)
            .iter()
            .fold(T::zero(), |acc, &(i, w)| acc + data[i] * w)
    }

    /// Gradient of the interpolated value w.r.t. the query coordinates,
    /// including the clamp masks. Exact linearization of `value`.
    #[inline]
    fn gradient(&self, grid: &GridSpec, data: &[T]) -> [T; 3] {
        let one = T::one();
        let wx = [one - self.f[0], self.f[0]];
        let wy = [one - self.f[1], self.f[1]];
        let wz = [one - self.f[2], self.f[2]];
        // dW/df per axis: low corner -1, high corner +1
        let mut grad = [T::zero(); 3];
        for (dz, &z) in self.iz.iter().enumerate() {
            for (dy, &y) in self.iy.iter().enumerate() {
                for (dx, &x) in self.ix.iter().enumerate() {
                    let v = data[grid.index(x, y, z)];
                    let sx = if dx == 0 { -one } else { one };
                    let sy = if dy == 0 { -one } else { one };
                    let sz = if dz == 0 { -one } else { one };
                    grad[0] = grad[0] + v * sx * wy[dy] * wz[dz];
                    grad[1] = grad[1] + v * wx[dx] * sy * wz[dz];
                    grad[2] = grad[2] + v * wx[dx] * wy[dy] * sz;
                }
            }
        }
        [grad[0] * self.g[0], grad[1] * self.g[1], grad[2] * self.g[2]]
    }
}

/// Trilinear interpolation of `vol` at the given voxel-coordinate points.
/// Out-of-bounds coordinates are clamped to the boundary voxel.
pub fn interpolate<T: Scalar>(vol: &ScalarVolume<T>, pts: &[[T; 3]]) -> Vec<T> {
    pts.iter()
        .map(|&q| Cell::locate(vol.grid(), q).value(vol.grid(), vol.data()))
        .collect()
}

/// Pull-back warp: `out(x) = vol(x + u(x))`.
pub fn warp<T: Scalar>(vol: &ScalarVolume<T>, phi: &Transform<T>) -> Result<ScalarVolume<T>> {
    check_same_grid("warp", vol.grid(), phi.grid())?;
    let grid = *vol.grid();
    let u = phi.displacement();
    let mut out = ScalarVolume::zeros(grid);
    let mut i = 0;
    for (x, y, z) in grid.iter_voxels() {
        let d = u.vector_at(i);
        let q = [
            T::of_f64(x as f64) + d[0],
            T::of_f64(y as f64) + d[1],
            T::of_f64(z as f64) + d[2],
        ];
        out.data_mut()[i] = Cell::locate(&grid, q).value(&grid, vol.data());
        i += 1;
    }
    Ok(out)
}

/// Directional derivative of `warp` at `(vol, phi)` along `(d_vol, d_u)`.
///
/// Used by tests to verify that [`warp_adjoint`] is the exact transpose.
pub fn warp_jvp<T: Scalar>(
    vol: &ScalarVolume<T>,
    phi: &Transform<T>,
    d_vol: &ScalarVolume<T>,
    d_u: &VectorField<T>,
) -> Result<ScalarVolume<T>> {
    check_same_grid("warp_jvp", vol.grid(), phi.grid())?;
    check_same_grid("warp_jvp", vol.grid(), d_vol.grid())?;
    check_same_grid("warp_jvp", vol.grid(), d_u.grid())?;
    let grid = *vol.grid();
    let u = phi.displacement();
    let mut out = ScalarVolume::zeros(grid);
    let mut i = 0;
    for (x, y, z) in grid.iter_voxels() {
        let d = u.vector_at(i);
        let q = [
            T::of_f64(x as f64) + d[0],
            T::of_f64(y as f64) + d[1],
            T::of_f64(z as f64) + d[2],
        ];
        let cell = Cell::locate(&grid, q);
        let dv = cell.value(&grid, d_vol.data());
        let grad = cell.gradient(&grid, vol.data());
        let du = d_u.vector_at(i);
        out.data_mut()[i] = dv + grad[0] * du[0] + grad[1] * du[1] + grad[2] * du[2];
        i += 1;
    }
    Ok(out)
}

/// Transpose of the warp linearization applied to `residual`.
///
/// Returns `(d_vol, d_u)`: `d_vol` is the interpolation matrix transpose
/// applied to `residual` (splatting); `d_u(x)` is `residual(x)` times the
/// gradient of the interpolant of `vol` at `x + u(x)`.
pub fn warp_adjoint<T: Scalar>(
    residual: &ScalarVolume<T>,
    phi: &Transform<T>,
    vol: &ScalarVolume<T>,
) -> Result<(ScalarVolume<T>, VectorField<T>)> {
    check_same_grid("warp_adjoint", vol.grid(), phi.grid())?;
    check_same_grid("warp_adjoint", vol.grid(), residual.grid())?;
    let grid = *vol.grid();
    let u = phi.displacement();
    let mut d_vol = ScalarVolume::zeros(grid);
    let mut d_u = VectorField::zeros(grid);
    let mut i = 0;
    for (x, y, z) in grid.iter_voxels() {
        let d = u.vector_at(i);
        let q = [
            T::of_f64(x as f64) + d[0],
            T::of_f64(y as f64) + d[1],
            T::of_f64(z as f64) + d[2],
        ];
        let cell = Cell::locate(&grid, q);
        let r = residual.data()[i];
        for (idx, w) in cell.corners(&grid) {
            d_vol.data_mut()[idx] = d_vol.data()[idx] + r * w;
        }
        let grad = cell.gradient(&grid, vol.data());
        d_u.set_vector(i, [r * grad[0], r * grad[1], r * grad[2]]);
        i += 1;
    }
    Ok((d_vol, d_u))
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Derivative of one channel along `axis`: central differences inside,
/// one-sided at the boundary, scaled by 1/spacing.
pub(crate) fn diff_axis<T: Scalar>(src: &[T], grid: &GridSpec, axis: usize) -> Vec<T> {
    let dims = grid.dims();
    let strides = grid.strides();
    let n = dims[axis];
    let stride = strides[axis];
    let h = T::of_f64(grid.spacing()[axis]);
    let inv_h = T::one() / h;
    let inv_2h = inv_h / T::of_f64(2.0);
    let mut out = vec![T::zero(); grid.len()];
    for_each_line(grid, axis, |base| {
        // one-sided at both ends, central inside
        out[base] = (src[base + stride] - src[base]) * inv_h;
        for k in 1..n - 1 {
            let i = base + k * stride;
            out[i] = (src[i + stride] - src[i - stride]) * inv_2h;
        }
        let last = base + (n - 1) * stride;
        out[last] = (src[last] - src[last - stride]) * inv_h;
    });
    out
}

/// Exact transpose of [`diff_axis`]: scatters each output coefficient back
/// onto the stencil inputs.
pub(crate) fn diff_axis_adjoint<T: Scalar>(cot: &[T], grid: &GridSpec, axis: usize) -> Vec<T> {
    let dims = grid.dims();
    let strides = grid.strides();
    let n = dims[axis];
    let stride = strides[axis];
    let h = T::of_f64(grid.spacing()[axis]);
    let inv_h = T::one() / h;
    let inv_2h = inv_h / T::of_f64(2.0);
    let mut out = vec![T::zero(); grid.len()];
    for_each_line(grid, axis, |base| {
        let w = cot[base];
        out[base + stride] = out[base + stride] + w * inv_h;
        out[base] = out[base] - w * inv_h;
        for k in 1..n - 1 {
            let i = base + k * stride;
            let w = cot[i];
            out[i + stride] = out[i + stride] + w * inv_2h;
            out[i - stride] = out[i - stride] - w * inv_2h;
        }
        let last = base + (n - 1) * stride;
        let w = cot[last];
        out[last] = out[last] + w * inv_h;
        out[last - stride] = out[last - stride] - w * inv_h;
    });
    out
}

/// Call `f` with the base linear index of every grid line along `axis`.
pub(crate) fn for_each_line(grid: &GridSpec, axis: usize, mut f: impl FnMut(usize)) {
    let dims = grid.dims();
    let strides = grid.strides();
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for j2 in 0..dims[a2] {
        for j1 in 0..dims[a1] {
            f(j1 * strides[a1] + j2 * strides[a2]);
        }
    }
}

/// Jacobian of a vector field: entry (i, j) = dv_i/dx_j.
pub fn jacobian<T: Scalar>(field: &VectorField<T>) -> MatrixField<T> {
    let grid = *field.grid();
    let mut out = MatrixField::zeros(grid);
    for i in 0..3 {
        for j in 0..3 {
            let d = diff_axis(field.channel(i), &grid, j);
            out.channel_mut(3 * i + j).copy_from_slice(&d);
        }
    }
    out
}

/// Adjoint of [`jacobian`]: accumulates the cotangent back onto the field.
pub(crate) fn jacobian_adjoint<T: Scalar>(cot: &MatrixField<T>) -> VectorField<T> {
    let grid = *cot.grid();
    let mut out = VectorField::zeros(grid);
    for i in 0..3 {
        for j in 0..3 {
            let d = diff_axis_adjoint(cot.channel(3 * i + j), &grid, j);
            for (o, v) in out.channel_mut(i).iter_mut().zip(d) {
                *o = *o + v;
            }
        }
    }
    out
}

/// Divergence of a vector field (trace of the Jacobian).
pub fn divergence<T: Scalar>(field: &VectorField<T>) -> ScalarVolume<T> {
    let grid = *field.grid();
    let mut out = ScalarVolume::zeros(grid);
    for j in 0..3 {
        let d = diff_axis(field.channel(j), &grid, j);
        for (o, v) in out.data_mut().iter_mut().zip(d) {
            *o = *o + v;
        }
    }
    out
}

/// Adjoint of [`divergence`].
pub(crate) fn divergence_adjoint<T: Scalar>(cot: &ScalarVolume<T>) -> VectorField<T> {
    let grid = *cot.grid();
    let mut out = VectorField::zeros(grid);
    for j in 0..3 {
        let d = diff_axis_adjoint(cot.data(), &grid, j);
        out.channel_mut(j).copy_from_slice(&d);
    }
    out
}
