//! Gaussian attribute prediction from anchors.
//!
//! The head maps `[f^a, f^t_1..f^t_M, δ_ac, d_ac]` to `K` blocks of
//! `GAUSSIAN_OUTPUTS` raw values, squashed into valid attributes:
//!
//! | slot  | attribute | squash                                  |
//! |-------|-----------|-----------------------------------------|
//! | 0     | opacity   | sigmoid                                 |
//! | 1..4  | color     | sigmoid per channel                     |
//! | 4..7  | scale     | softplus, times the anchor scaling      |
//! | 7..11 | rotation  | `normalize(raw + (1, 0, 0, 0))`         |
//!
//! Positions follow `p_k = x_a + o_k ⊙ l^a`.

use nalgebra::Vector3;

use crate::anchor::{Anchor, AugmentedFeatures};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::mlp::{MlpParams, MlpRecord};

/// Raw head outputs consumed per Gaussian.
pub const GAUSSIAN_OUTPUTS: usize = 11;

const MIN_SCALE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub position: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
}

/// Per-anchor viewing quantities relative to the camera center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewContext {
    pub camera_position: [f64; 3],
    pub distance: f64,
    pub direction: [f64; 3],
}

impl ViewContext {
    pub fn new(anchor_position: [f64; 3], camera_position: [f64; 3]) -> Result<Self> {
        let delta = Vector3::from(anchor_position) - Vector3::from(camera_position);
        let distance = delta.norm();
        if !(distance > 0.0) || !distance.is_finite() {
            return Err(Error::InvalidInput("anchor coincides with the camera center".into()));
        }
        let dir = delta / distance;
        Ok(Self {
            camera_position,
            distance,
            direction: [dir.x, dir.y, dir.z],
        })
    }

    pub fn for_camera(anchor: &Anchor, camera: &Camera) -> Result<Self> {
        let c = camera.center();
        Self::new(anchor.position, [c.x, c.y, c.z])
    }
}

/// Length of the head input for feature size `d` and `m` texture vectors.
pub fn head_input_len(d: usize, m: usize) -> usize {
    (m + 1) * d + 4
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn head_input(anchor: &Anchor, aug: Option<&AugmentedFeatures>, view: &ViewContext) -> Vec<f64> {
    let m = aug.map_or(0, |a| a.textures.len());
    let mut input = Vec::with_capacity(head_input_len(anchor.feature.len(), m));
    input.extend_from_slice(&anchor.feature);
    if let Some(aug) = aug {
        for t in &aug.textures {
            input.extend_from_slice(t);
        }
    }
    input.push(view.distance);
    input.extend_from_slice(&view.direction);
    input
}

fn decode(anchor: &Anchor, raw: &[f64]) -> Result<Vec<GaussianPrimitive>> {
    if let Some(i) = raw.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("non-finite head output at slot {i}")));
    }
    let k = anchor.offsets.len();
    if raw.len() != k * GAUSSIAN_OUTPUTS {
        return Err(Error::Config(format!(
            "head emits {} values, expected {} for K = {k}",
            raw.len(),
            k * GAUSSIAN_OUTPUTS
        )));
    }
    let l = anchor.scaling;
    let x = anchor.position;
    Ok(anchor
        .offsets
        .iter()
        .zip(raw.chunks_exact(GAUSSIAN_OUTPUTS))
        .map(|(o, r)| {
            let u = [r[7] + 1.0, r[8], r[9], r[10]];
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rotation = if norm > 1e-12 {
                u.map(|v| v / norm)
            } else {
                [1.0, 0.0, 0.0, 0.0]
            };
            GaussianPrimitive {
                position: [x[0] + o[0] * l[0], x[1] + o[1] * l[1], x[2] + o[2] * l[2]],
                opacity: sigmoid(r[0]),
                color: [sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3])],
                scale: [
                    (softplus(r[4]) * l[0]).max(MIN_SCALE),
                    (softplus(r[5]) * l[1]).max(MIN_SCALE),
                    (softplus(r[6]) * l[2]).max(MIN_SCALE),
                ],
                rotation,
            }
        })
        .collect())
}

/// `K` Gaussians for one anchor. Pass `None` for `aug` in the base wiring
/// (head input `D + 4`).
pub fn predict_gaussians(
    anchor: &Anchor,
    aug: Option<&AugmentedFeatures>,
    view: &ViewContext,
    head: &MlpParams,
) -> Result<Vec<GaussianPrimitive>> {
    let raw = head.forward(&head_input(anchor, aug, view))?;
    decode(anchor, &raw)
}

#[derive(Clone, Debug)]
pub(crate) struct HeadRecord {
    mlp: MlpRecord,
    raw: Vec<f64>,
}

pub(crate) fn predict_gaussians_recorded(
    anchor: &Anchor,
    aug: Option<&AugmentedFeatures>,
    view: &ViewContext,
    head: &MlpParams,
) -> Result<(Vec<GaussianPrimitive>, HeadRecord)> {
    let (raw, mlp) = head.forward_recorded(&head_input(anchor, aug, view))?;
    let gaussians = decode(anchor, &raw)?;
    Ok((gaussians, HeadRecord { mlp, raw }))
}

/// Upstream gradient with respect to one predicted Gaussian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub scale: [f64; 3],
    /// With respect to the unit quaternion as used by the rotation matrix.
    pub rotation: [f64; 4],
}

/// Gradients flowing out of one anchor's head evaluation.
pub(crate) struct HeadBackward {
    pub d_feature: Vec<f64>,
    pub d_textures: Vec<Vec<f64>>,
    pub d_offsets: Vec<[f64; 3]>,
    pub d_scaling: [f64; 3],
}

pub(crate) fn predict_gaussians_backward(
    anchor: &Anchor,
    head: &MlpParams,
    record: &HeadRecord,
    m: usize,
    grads: &[GaussianGrad],
    head_grads: &mut MlpParams,
) -> HeadBackward {
    let l = anchor.scaling;
    let mut d_raw = vec![0.0; record.raw.len()];
    let mut d_offsets = vec![[0.0; 3]; anchor.offsets.len()];
    let mut d_scaling = [0.0; 3];
    for (k, g) in grads.iter().enumerate() {
        let r = &record.raw[k * GAUSSIAN_OUTPUTS..(k + 1) * GAUSSIAN_OUTPUTS];
        let dr = &mut d_raw[k * GAUSSIAN_OUTPUTS..(k + 1) * GAUSSIAN_OUTPUTS];

        let op = sigmoid(r[0]);
        dr[0] = g.opacity * op * (1.0 - op);
        for c in 0..3 {
            let s = sigmoid(r[1 + c]);
            dr[1 + c] = g.color[c] * s * (1.0 - s);
        }
        for j in 0..3 {
            let sp = softplus(r[4 + j]);
            if sp * l[j] > MIN_SCALE {
                dr[4 + j] = g.scale[j] * l[j] * sigmoid(r[4 + j]);
                d_scaling[j] += g.scale[j] * sp;
            }
        }
        let u = [r[7] + 1.0, r[8], r[9], r[10]];
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            let q = u.map(|v| v / norm);
            let dot: f64 = q.iter().zip(&g.rotation).map(|(a, b)| a * b).sum();
            for i in 0..4 {
                dr[7 + i] = (g.rotation[i] - q[i] * dot) / norm;
            }
        }

        let o = anchor.offsets[k];
        for j in 0..3 {
            d_offsets[k][j] = g.position[j] * l[j];
            d_scaling[j] += g.position[j] * o[j];
        }
    }

    let d_input = head.backward(&record.mlp, &d_raw, head_grads);
    let d = anchor.feature.len();
    let d_feature = d_input[..d].to_vec();
    let d_textures = (0..m)
        .map(|i| d_input[(i + 1) * d..(i + 2) * d].to_vec())
        .collect();
    HeadBackward {
        d_feature,
        d_textures,
        d_offsets,
        d_scaling,
    }
}
