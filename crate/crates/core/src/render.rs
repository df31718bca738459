//! EWA projection of 3D Gaussians and front-to-back alpha blending.
//!
//! Blending per pixel over depth-sorted contributions:
//!
//! ```text
//! C = Σ_n c_n α_n T_n + bg · T_final,   T_n = Π_{z<n} (1 − α_z)
//! α_n = min(clip, o_n · exp(−½ dᵀ Σ₂⁻¹ d)),  skipped when below `alpha_skip`
//! ```
//!
//! The sort is global (one depth per splat), as in the reference 3D-GS
//! rasterizer. Rasterization is per pixel over a 3σ bounding box.

use std::cmp::Ordering;

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::heads::{GaussianGrad, GaussianPrimitive};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterSettings {
    /// Added to both diagonal entries of every projected covariance (px²).
    pub dilation: f64,
    pub near: f64,
    pub alpha_clip: f64,
    pub alpha_skip: f64,
    /// Footprint radius in standard deviations.
    pub footprint_sigmas: f64,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            near: 0.01,
            alpha_clip: 0.999,
            alpha_skip: 1.0 / 255.0,
            footprint_sigmas: 3.0,
        }
    }
}

/// Screen-space Gaussian. `cov2d` is `(a, b, c)` for `[[a, b], [b, c]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splat2DGrad {
    pub mean2d: [f64; 2],
    /// `∂L/∂(a, b, c)` with `b` the shared off-diagonal value.
    pub cov2d: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

pub(crate) fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `∂L/∂R` back to the quaternion entries of [`quat_to_matrix`].
fn quat_matrix_backward(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// `Σ = R(q) diag(s)² R(q)ᵀ`. `q` is normalized first; a zero quaternion is rejected.
pub fn build_covariance_3d(q: [f64; 4], s: [f64; 3]) -> Result<Matrix3<f64>> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidInput("rotation quaternion must be non-zero".into()));
    }
    if s.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidInput("scales must be positive".into()));
    }
    let m = quat_to_matrix(q.map(|v| v / norm)) * Matrix3::from_diagonal(&Vector3::from(s));
    Ok(m * m.transpose())
}

/// Values saved by [`project_gaussian_recorded`].
#[derive(Clone, Debug)]
pub(crate) struct ProjectionRecord {
    cam_mean: Vector3<f64>,
    jw: Matrix2x3<f64>,
    rot: Matrix3<f64>,
    cov3d: Matrix3<f64>,
}

pub fn project_gaussian(g: &GaussianPrimitive, camera: &Camera, settings: &RasterSettings) -> Option<Splat2D> {
    project_gaussian_recorded(g, camera, settings).map(|(s, _)| s)
}

pub(crate) fn project_gaussian_recorded(
    g: &GaussianPrimitive,
    camera: &Camera,
    settings: &RasterSettings,
) -> Option<(Splat2D, ProjectionRecord)> {
    let t = camera.to_camera(&Vector3::from(g.position));
    if !(t.z > settings.near) {
        return None;
    }
    let (fx, fy) = (camera.fx, camera.fy);
    let inv_z = 1.0 / t.z;
    let mean2d = [fx * t.x * inv_z + camera.cx, fy * t.y * inv_z + camera.cy];
    let j = Matrix2x3::new(fx * inv_z, 0.0, -fx * t.x * inv_z * inv_z, 0.0, fy * inv_z, -fy * t.y * inv_z * inv_z);
    let jw = j * camera.rotation;
    let rot = quat_to_matrix(g.rotation);
    let m = rot * Matrix3::from_diagonal(&Vector3::from(g.scale));
    let cov3d = m * m.transpose();
    let cov = jw * cov3d * jw.transpose();
    let cov2d = [
        cov[(0, 0)] + settings.dilation,
        0.5 * (cov[(0, 1)] + cov[(1, 0)]),
        cov[(1, 1)] + settings.dilation,
    ];
    if cov2d.iter().any(|v| !v.is_finite()) || mean2d.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let radius = footprint_radius(&cov2d, settings)?;
    let (w, h) = (camera.width as f64, camera.height as f64);
    if mean2d[0] + radius < 0.0
        || mean2d[0] - radius > w - 1.0
        || mean2d[1] + radius < 0.0
        || mean2d[1] - radius > h - 1.0
    {
        return None;
    }
    let splat = Splat2D {
        mean2d,
        cov2d,
        depth: t.z,
        opacity: g.opacity,
        color: g.color,
    };
    Some((
        splat,
        ProjectionRecord {
            cam_mean: t,
            jw,
            rot,
            cov3d,
        },
    ))
}

fn footprint_radius(cov2d: &[f64; 3], settings: &RasterSettings) -> Option<f64> {
    let [a, b, c] = *cov2d;
    let det = a * c - b * b;
    if !(det > 0.0) || !(a > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda = mid + (mid * mid - det).max(0.0).sqrt();
    Some(settings.footprint_sigmas * lambda.sqrt())
}

pub(crate) fn project_gaussian_backward(
    g: &GaussianPrimitive,
    camera: &Camera,
    record: &ProjectionRecord,
    d: &Splat2DGrad,
) -> GaussianGrad {
    let t = record.cam_mean;
    let (fx, fy) = (camera.fx, camera.fy);
    let inv_z = 1.0 / t.z;
    let inv_z2 = inv_z * inv_z;

    let mut d_t = Vector3::new(
        d.mean2d[0] * fx * inv_z,
        d.mean2d[1] * fy * inv_z,
        -d.mean2d[0] * fx * t.x * inv_z2 - d.mean2d[1] * fy * t.y * inv_z2,
    );

    let g2 = nalgebra::Matrix2::new(d.cov2d[0], 0.5 * d.cov2d[1], 0.5 * d.cov2d[1], d.cov2d[2]);
    let d_jw = 2.0 * g2 * record.jw * record.cov3d;
    let d_cov3d = record.jw.transpose() * g2 * record.jw;
    let d_j = d_jw * camera.rotation.transpose();

    let inv_z3 = inv_z2 * inv_z;
    d_t.x += -fx * inv_z2 * d_j[(0, 2)];
    d_t.y += -fy * inv_z2 * d_j[(1, 2)];
    d_t.z += -fx * inv_z2 * d_j[(0, 0)] + 2.0 * fx * t.x * inv_z3 * d_j[(0, 2)] - fy * inv_z2 * d_j[(1, 1)]
        + 2.0 * fy * t.y * inv_z3 * d_j[(1, 2)];

    let d_p = camera.rotation.transpose() * d_t;

    let s = Vector3::from(g.scale);
    let m = record.rot * Matrix3::from_diagonal(&s);
    let d_m = 2.0 * d_cov3d * m;
    let mut d_scale = [0.0; 3];
    let mut d_rot = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            d_scale[j] += d_m[(i, j)] * record.rot[(i, j)];
            d_rot[(i, j)] = d_m[(i, j)] * s[j];
        }
    }
    GaussianGrad {
        position: [d_p.x, d_p.y, d_p.z],
        opacity: d.opacity,
        color: d.color,
        scale: d_scale,
        rotation: quat_matrix_backward(g.rotation, &d_rot),
    }
}

fn canonical_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&i, &j| compare_splats(&splats[i], &splats[j]).then(i.cmp(&j)));
    order
}

/// Depth first, then the remaining fields, so that permuting the input never
/// changes the blend order of distinguishable splats.
fn compare_splats(a: &Splat2D, b: &Splat2D) -> Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then_with(|| a.mean2d[0].total_cmp(&b.mean2d[0]))
        .then_with(|| a.mean2d[1].total_cmp(&b.mean2d[1]))
        .then_with(|| a.cov2d[0].total_cmp(&b.cov2d[0]))
        .then_with(|| a.cov2d[1].total_cmp(&b.cov2d[1]))
        .then_with(|| a.cov2d[2].total_cmp(&b.cov2d[2]))
        .then_with(|| a.opacity.total_cmp(&b.opacity))
        .then_with(|| a.color[0].total_cmp(&b.color[0]))
        .then_with(|| a.color[1].total_cmp(&b.color[1]))
        .then_with(|| a.color[2].total_cmp(&b.color[2]))
}

#[derive(Clone, Copy, Debug)]
struct Contribution {
    splat: u32,
    alpha: f64,
    transmittance: f64,
    clipped: bool,
}

/// Per-pixel blending trace kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RenderRecord {
    width: usize,
    height: usize,
    background: [f64; 3],
    /// `pixel_start[p]..pixel_start[p + 1]` indexes `contributions`.
    pixel_start: Vec<usize>,
    contributions: Vec<Contribution>,
    final_transmittance: Vec<f64>,
    conics: Vec<[f64; 3]>,
}

impl RenderRecord {
    /// Blending weights of one pixel: `α_n T_n` per contribution, then the background weight.
    pub fn pixel_weights(&self, row: usize, col: usize) -> Vec<f64> {
        let p = row * self.width + col;
        let mut w: Vec<f64> = self.contributions[self.pixel_start[p]..self.pixel_start[p + 1]]
            .iter()
            .map(|c| c.alpha * c.transmittance)
            .collect();
        w.push(self.final_transmittance[p]);
        w
    }

    /// Transmittance before each contribution of one pixel, then after the last.
    pub fn pixel_transmittance(&self, row: usize, col: usize) -> Vec<f64> {
        let p = row * self.width + col;
        let mut t: Vec<f64> = self.contributions[self.pixel_start[p]..self.pixel_start[p + 1]]
            .iter()
            .map(|c| c.transmittance)
            .collect();
        t.push(self.final_transmittance[p]);
        t
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    pub record: RenderRecord,
    /// Splats dropped for a non-invertible covariance.
    pub skipped_splats: usize,
}

pub fn render(splats: &[Splat2D], camera: &Camera, background: [f64; 3], settings: &RasterSettings) -> Image {
    render_recorded(splats, camera.width, camera.height, background, settings).image
}

pub fn render_recorded(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    background: [f64; 3],
    settings: &RasterSettings,
) -> RenderOutput {
    let order = canonical_order(splats);
    let mut skipped = 0;
    let mut conics = vec![[0.0; 3]; splats.len()];
    // Per row: (splat, col_lo, col_hi) in blend order.
    let mut row_spans: Vec<Vec<(u32, u32, u32)>> = vec![Vec::new(); height];
    for &i in &order {
        let s = &splats[i];
        let [a, b, c] = s.cov2d;
        let det = a * c - b * b;
        let radius = match footprint_radius(&s.cov2d, settings) {
            Some(r) if det.is_finite() && r.is_finite() => r,
            _ => {
                skipped += 1;
                continue;
            }
        };
        conics[i] = [c / det, -b / det, a / det];
        let col_lo = (s.mean2d[0] - radius).ceil().max(0.0);
        let col_hi = (s.mean2d[0] + radius).floor().min(width as f64 - 1.0);
        let row_lo = (s.mean2d[1] - radius).ceil().max(0.0);
        let row_hi = (s.mean2d[1] + radius).floor().min(height as f64 - 1.0);
        if col_lo > col_hi || row_lo > row_hi {
            continue;
        }
        for row in row_lo as usize..=row_hi as usize {
            row_spans[row].push((i as u32, col_lo as u32, col_hi as u32));
        }
    }

    let rows: Vec<(Vec<f64>, Vec<usize>, Vec<Contribution>, Vec<f64>)> = row_spans
        .par_iter()
        .enumerate()
        .map(|(row, spans)| {
            let mut colors = vec![0.0; width * 3];
            let mut counts = Vec::with_capacity(width);
            let mut contribs = Vec::new();
            let mut finals = Vec::with_capacity(width);
            for col in 0..width {
                let before = contribs.len();
                let mut t = 1.0;
                let mut rgb = [0.0; 3];
                for &(i, lo, hi) in spans {
                    if (col as u32) < lo || (col as u32) > hi {
                        continue;
                    }
                    let s = &splats[i as usize];
                    let k = conics[i as usize];
                    let dx = col as f64 - s.mean2d[0];
                    let dy = row as f64 - s.mean2d[1];
                    let power = -0.5 * (k[0] * dx * dx + 2.0 * k[1] * dx * dy + k[2] * dy * dy);
                    let raw = s.opacity * power.exp();
                    let clipped = raw > settings.alpha_clip;
                    let alpha = if clipped { settings.alpha_clip } else { raw };
                    if alpha < settings.alpha_skip {
                        continue;
                    }
                    for ch in 0..3 {
                        rgb[ch] += s.color[ch] * alpha * t;
                    }
                    contribs.push(Contribution {
                        splat: i,
                        alpha,
                        transmittance: t,
                        clipped,
                    });
                    t *= 1.0 - alpha;
                }
                for ch in 0..3 {
                    colors[col * 3 + ch] = rgb[ch] + background[ch] * t;
                }
                counts.push(contribs.len() - before);
                finals.push(t);
            }
            (colors, counts, contribs, finals)
        })
        .collect();

    let mut data = Vec::with_capacity(width * height * 3);
    let mut pixel_start = Vec::with_capacity(width * height + 1);
    let mut contributions = Vec::new();
    let mut final_transmittance = Vec::with_capacity(width * height);
    pixel_start.push(0);
    for (colors, counts, contribs, finals) in rows {
        data.extend_from_slice(&colors);
        for n in counts {
            let last = *pixel_start.last().unwrap();
            pixel_start.push(last + n);
        }
        contributions.extend(contribs);
        final_transmittance.extend(finals);
    }
    RenderOutput {
        image: Image::from_fn(width, height, |r, c, ch| data[(r * width + c) * 3 + ch]),
        record: RenderRecord {
            width,
            height,
            background,
            pixel_start,
            contributions,
            final_transmittance,
            conics,
        },
        skipped_splats: skipped,
    }
}

/// Gradients of a scalar loss with respect to every splat, given `∂L/∂image`.
///
/// Accumulation runs pixel by pixel in row-major order.
pub fn render_backward(splats: &[Splat2D], record: &RenderRecord, d_image: &[f64]) -> Vec<Splat2DGrad> {
    let mut grads = vec![Splat2DGrad::default(); splats.len()];
    let mut d_conic = vec![[0.0; 3]; splats.len()];
    let bg = record.background;
    for row in 0..record.height {
        for col in 0..record.width {
            let p = row * record.width + col;
            let d_c = [d_image[p * 3], d_image[p * 3 + 1], d_image[p * 3 + 2]];
            if d_c == [0.0; 3] {
                continue;
            }
            // Color seen behind the current contribution.
            let mut behind = bg;
            for c in record.contributions[record.pixel_start[p]..record.pixel_start[p + 1]].iter().rev() {
                let i = c.splat as usize;
                let s = &splats[i];
                let wt = c.alpha * c.transmittance;
                let g = &mut grads[i];
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    g.color[ch] += d_c[ch] * wt;
                    d_alpha += d_c[ch] * (s.color[ch] - behind[ch]);
                }
                d_alpha *= c.transmittance;
                for ch in 0..3 {
                    behind[ch] = s.color[ch] * c.alpha + (1.0 - c.alpha) * behind[ch];
                }
                if c.clipped {
                    continue;
                }
                let k = record.conics[i];
                let dx = col as f64 - s.mean2d[0];
                let dy = row as f64 - s.mean2d[1];
                let power = -0.5 * (k[0] * dx * dx + 2.0 * k[1] * dx * dy + k[2] * dy * dy);
                let gauss = power.exp();
                g.opacity += d_alpha * gauss;
                let d_power = d_alpha * c.alpha;
                let dk = &mut d_conic[i];
                dk[0] += -0.5 * dx * dx * d_power;
                dk[1] += -dx * dy * d_power;
                dk[2] += -0.5 * dy * dy * d_power;
                // ∂power/∂mean = +Σ⁻¹ d
                g.mean2d[0] += (k[0] * dx + k[1] * dy) * d_power;
                g.mean2d[1] += (k[1] * dx + k[2] * dy) * d_power;
            }
        }
    }
    for (i, g) in grads.iter_mut().enumerate() {
        let [ka, kb, kc] = record.conics[i];
        let [ga, gb, gc] = d_conic[i];
        if ga == 0.0 && gb == 0.0 && gc == 0.0 {
            continue;
        }
        // dL/dΣ = −K G K with G the symmetric conic gradient.
        let k = nalgebra::Matrix2::new(ka, kb, kb, kc);
        let gm = nalgebra::Matrix2::new(ga, 0.5 * gb, 0.5 * gb, gc);
        let ds = -(k * gm * k);
        g.cov2d = [ds[(0, 0)], ds[(0, 1)] + ds[(1, 0)], ds[(1, 1)]];
    }
    grads
}
