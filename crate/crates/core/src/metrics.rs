//! Evaluation metrics: hard Dice, Jaccard, the 95th-percentile robust
//! Hausdorff distance over boundary voxels, voxelwise error maps, and the
//! aggregate report table.

use crate::error::{Error, Result};
use crate::grid::{check_same_grid, GridSpec, ScalarVolume};
use crate::Scalar;

/// Default binarization threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-subject evaluation record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub dsc: f64,
    pub jaccard: f64,
    pub rhd95: f64,
    pub mse: f64,
}

impl MetricRecord {
    /// Compute all four metrics between a prediction and its ground truth.
    pub fn compute<T: Scalar>(
        pred: &ScalarVolume<T>,
        truth: &ScalarVolume<T>,
        threshold: f64,
    ) -> Result<Self> {
        Ok(Self {
            dsc: hard_dice(pred, truth, threshold)?,
            jaccard: jaccard(pred, truth, threshold)?,
            rhd95: rhd95(pred, truth, threshold)?,
            mse: mse(pred, truth)?,
        })
    }

    /// Serialize as flat key=value lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "dsc={:.6}\njaccard={:.6}\nrhd95={:.6}\nmse={:.8}\n",
            self.dsc, self.jaccard, self.rhd95, self.mse
        )
    }

    /// Parse the key=value form produced by [`Self::to_key_values`].
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut dsc = None;
        let mut jac = None;
        let mut rhd = None;
        let mut mse_v = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("malformed metric line {line:?} (expected key=value)"))
            })?;
            let value: f64 = value.trim().parse().map_err(|_| {
                Error::Usage(format!("metric value for {key:?} is not a number"))
            })?;
            match key.trim() {
                "dsc" => dsc = Some(value),
                "jaccard" => jac = Some(value),
                "rhd95" => rhd = Some(value),
                "mse" => mse_v = Some(value),
                other => {
                    return Err(Error::Usage(format!("unknown metric key {other:?}")));
                }
            }
        }
        match (dsc, jac, rhd, mse_v) {
            (Some(dsc), Some(jaccard), Some(rhd95), Some(mse)) => Ok(Self {
                dsc,
                jaccard,
                rhd95,
                mse,
            }),
            _ => Err(Error::Usage("metric record is missing keys".into())),
        }
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(())
}

fn binarize<T: Scalar>(vol: &ScalarVolume<T>, threshold: f64) -> Vec<bool> {
    let t = T::of_f64(threshold);
    vol.data().iter().map(|&v| v > t).collect()
}

/// Dice coefficient of the binarized volumes; two empty masks count as a
/// perfect match.
pub fn hard_dice<T: Scalar>(
    a: &ScalarVolume<T>,
    b: &ScalarVolume<T>,
    threshold: f64,
) -> Result<f64> {
    check_same_grid("hard_dice", a.grid(), b.grid())?;
    check_threshold(threshold)?;
    let ba = binarize(a, threshold);
    let bb = binarize(b, threshold);
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in ba.iter().zip(&bb) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Jaccard index of the binarized volumes; 0/0 -> 1.
pub fn jaccard<T: Scalar>(a: &ScalarVolume<T>, b: &ScalarVolume<T>, threshold: f64) -> Result<f64> {
    check_same_grid("jaccard", a.grid(), b.grid())?;
    check_threshold(threshold)?;
    let ba = binarize(a, threshold);
    let bb = binarize(b, threshold);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in ba.iter().zip(&bb) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean squared error.
pub fn mse<T: Scalar>(a: &ScalarVolume<T>, b: &ScalarVolume<T>) -> Result<f64> {
    check_same_grid("mse", a.grid(), b.grid())?;
    let n = a.grid().len() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.into_f64() - y.into_f64();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Voxelwise absolute difference `|y_hat - y|`.
pub fn error_map<T: Scalar>(
    y_hat: &ScalarVolume<T>,
    y: &ScalarVolume<T>,
) -> Result<ScalarVolume<T>> {
    check_same_grid("error_map", y_hat.grid(), y.grid())?;
    let data = y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a - b).abs())
        .collect();
    ScalarVolume::from_vec(*y_hat.grid(), data)
}

/// Boundary voxels of a binary mask: foreground voxels with at least one
/// 6-connected background neighbor (outside the grid counts as background).
pub(crate) fn extract_boundary(mask: &[bool], grid: &GridSpec) -> Vec<(usize, usize, usize)> {
    let [nx, ny, nz] = grid.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[grid.index(x, y, z)] {
                    continue;
                }
                let neighbors = [
                    x.checked_sub(1).map(|x| (x, y, z)),
                    (x + 1 < nx).then_some((x + 1, y, z)),
                    y.checked_sub(1).map(|y| (x, y, z)),
                    (y + 1 < ny).then_some((x, y + 1, z)),
                    z.checked_sub(1).map(|z| (x, y, z)),
                    (z + 1 < nz).then_some((x, y, z + 1)),
                ];
                let is_boundary = neighbors.iter().any(|n| match n {
                    Some((ax, ay, az)) => !mask[grid.index(*ax, *ay, *az)],
                    None => true,
                });
                if is_boundary {
                    out.push((x, y, z));
                }
            }
        }
    }
    out
}

/// One pass of the exact squared Euclidean distance transform along one
/// axis (lower-envelope-of-parabolas construction).
fn edt_pass(f: &mut [f64], pos: &[f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut out = vec![0.0f64; n];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |x: f64| x * x;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            let denom = 2.0 * pos[q] - 2.0 * pos[p];
            let s = if f[p] == f64::INFINITY {
                f64::NEG_INFINITY
            } else {
                ((f[q] + sq(pos[q])) - (f[p] + sq(pos[p]))) / denom
            };
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < pos[q] {
            k += 1;
        }
        out[q] = if f[v[k]] == f64::INFINITY {
            f64::INFINITY
        } else {
            sq(pos[q] - pos[v[k]]) + f[v[k]]
        };
    }
    f.copy_from_slice(&out);
}

/// Exact squared Euclidean distance (in world units) from every voxel to
/// the nearest site, via three separable envelope passes.
fn distance_transform_sq(
    sites: &[(usize, usize, usize)],
    grid: &GridSpec,
) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims();
    let h = grid.spacing();
    let mut d = vec![f64::INFINITY; grid.len()];
    for &(x, y, z) in sites {
        d[grid.index(x, y, z)] = 0.0;
    }
    let positions: [Vec<f64>; 3] = [
        (0..nx).map(|i| i as f64 * h[0]).collect(),
        (0..ny).map(|i| i as f64 * h[1]).collect(),
        (0..nz).map(|i| i as f64 * h[2]).collect(),
    ];
    let strides = grid.strides();
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = grid.dims()[axis];
        let stride = strides[axis];
        crate::grid::for_each_line(grid, axis, |base| {
            line.clear();
            line.extend((0..n).map(|k| d[base + k * stride]));
            edt_pass(&mut line, &positions[axis]);
            for k in 0..n {
                d[base + k * stride] = line[k];
            }
        });
    }
    d
}

/// Linear-interpolation percentile of a sorted sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Robust Hausdorff distance at the 95th percentile: pool the directed
/// nearest-surface distances both ways between the boundary voxel sets and
/// take the interpolated percentile, in world units.
pub fn rhd95<T: Scalar>(a: &ScalarVolume<T>, b: &ScalarVolume<T>, threshold: f64) -> Result<f64> {
    check_same_grid("rhd95", a.grid(), b.grid())?;
    check_threshold(threshold)?;
    let grid = *a.grid();
    let ba = binarize(a, threshold);
    let bb = binarize(b, threshold);
    let surf_a = extract_boundary(&ba, &grid);
    let surf_b = extract_boundary(&bb, &grid);
    if surf_a.is_empty() || surf_b.is_empty() {
        return Err(Error::UndefinedMetric(
            "rhd95 needs at least one foreground voxel in both volumes".into(),
        ));
    }
    let dt_a = distance_transform_sq(&surf_a, &grid);
    let dt_b = distance_transform_sq(&surf_b, &grid);
    let mut pooled: Vec<f64> = Vec::with_capacity(surf_a.len() + surf_b.len());
    for &(x, y, z) in &surf_a {
        pooled.push(dt_b[grid.index(x, y, z)].sqrt());
    }
    for &(x, y, z) in &surf_b {
        pooled.push(dt_a[grid.index(x, y, z)].sqrt());
    }
    pooled.sort_by(|p, q| p.partial_cmp(q).unwrap());
    Ok(percentile(&pooled, 0.95))
}

/// Mean and standard deviation per metric over a set of records.
#[derive(Debug, Clone)]
pub struct AggregateTable {
    pub count: usize,
    pub dsc: (f64, f64),
    pub jaccard: (f64, f64),
    pub rhd95: (f64, f64),
    pub mse: (f64, f64),
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(records: &[MetricRecord]) -> Result<AggregateTable> {
    if records.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot aggregate an empty set of metric records".into(),
        ));
    }
    Ok(AggregateTable {
        count: records.len(),
        dsc: mean_std(&records.iter().map(|r| r.dsc).collect::<Vec<_>>()),
        jaccard: mean_std(&records.iter().map(|r| r.jaccard).collect::<Vec<_>>()),
        rhd95: mean_std(&records.iter().map(|r| r.rhd95).collect::<Vec<_>>()),
        mse: mean_std(&records.iter().map(|r| r.mse).collect::<Vec<_>>()),
    })
}

impl AggregateTable {
    /// Text table with one row per model label, mean +/- std per column.
    pub fn format(&self, label: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>17} {:>21} {:>17} {:>19}\n",
            "Model", "DSC \u{2191}", "Jaccard \u{2191}", "RHD95 \u{2193}", "MSE \u{2193}"
        ));
        out.push_str(&format!(
            "{:<14} {:>7.3} \u{00b1} {:>6.3} {:>11.3} \u{00b1} {:>6.3} {:>7.3} \u{00b1} {:>6.3} {:>8.5} \u{00b1} {:>7.5}\n",
            label,
            self.dsc.0,
            self.dsc.1,
            self.jaccard.0,
            self.jaccard.1,
            self.rhd95.0,
            self.rhd95.1,
            self.mse.0,
            self.mse.1
        ));
        out
    }
}
