//! The full differentiable pipeline: anchors → (augmentation) → head → projection → blending.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::anchor::{
    augment_anchor_backward, augment_anchor_recorded, voxelize_points, AnchorField, AugmentRecord, SecondOrderBasis,
};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::heads::{
    head_input_len, predict_gaussians_backward, predict_gaussians_recorded, GaussianGrad, GaussianPrimitive,
    HeadRecord, ViewContext, GAUSSIAN_OUTPUTS,
};
use crate::image::Image;
use crate::loss::{total_loss_backward, total_loss_with, LossReport, LossWeights, SelectiveWeights, SglVariant};
use crate::mlp::{Activation, MlpParams};
use crate::render::{
    project_gaussian_backward, project_gaussian_recorded, render_backward, render_recorded, ProjectionRecord,
    RasterSettings, RenderOutput, Splat2D,
};

/// Anchors handled per backward work unit. Fixed so the reduction order does
/// not depend on the thread count.
const BACKWARD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub m: usize,
    pub k: usize,
    pub hidden: usize,
    pub use_soa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            m: 2,
            k: 10,
            hidden: 32,
            use_soa: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.feature_dim < self.m {
            return Err(Error::Config(format!(
                "need D >= M >= 1, got D = {} and M = {}",
                self.feature_dim, self.m
            )));
        }
        if self.k < 1 || self.hidden < 1 {
            return Err(Error::Config("K and the hidden width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_input_len(&self) -> usize {
        if self.use_soa {
            head_input_len(self.feature_dim, self.m)
        } else {
            head_input_len(self.feature_dim, 0)
        }
    }
}

/// Learnable scene state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub field: AnchorField,
    /// One extractor per principal column; empty in the base wiring.
    pub extractors: Vec<MlpParams>,
    pub head: MlpParams,
    pub m: usize,
    pub settings: RasterSettings,
    pub background: [f64; 3],
}

/// The learnable groups, in flattening order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Features,
    Offsets,
    Scalings,
    Mlps,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Features,
        ParamGroup::Offsets,
        ParamGroup::Scalings,
        ParamGroup::Mlps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Features => "features",
            ParamGroup::Offsets => "offsets",
            ParamGroup::Scalings => "scalings",
            ParamGroup::Mlps => "mlps",
        }
    }
}

pub fn extractor_architecture(d: usize, hidden: usize, rng: &mut impl Rng) -> MlpParams {
    MlpParams::initialized(&[2 * d, hidden, d], &[Activation::Relu, Activation::None], rng)
}

pub fn head_architecture(input: usize, hidden: usize, k: usize, rng: &mut impl Rng) -> MlpParams {
    MlpParams::initialized(
        &[input, hidden, hidden, k * GAUSSIAN_OUTPUTS],
        &[Activation::Relu, Activation::Relu, Activation::None],
        rng,
    )
}

impl Model {
    /// Voxelizes `points` into anchors and draws features and network weights from `seed`.
    pub fn initialize(points: &[[f64; 3]], voxel_size: f64, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut field = voxelize_points(points, voxel_size, config.feature_dim, config.k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in &mut field.anchors {
            for f in &mut a.feature {
                *f = rng.gen_range(-0.01..=0.01);
            }
        }
        let extractors = if config.use_soa {
            (0..config.m)
                .map(|_| extractor_architecture(config.feature_dim, config.hidden, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let head = head_architecture(config.head_input_len(), config.hidden, config.k, &mut rng);
        Self::new(field, extractors, head, config.m)
    }

    pub fn new(field: AnchorField, extractors: Vec<MlpParams>, head: MlpParams, m: usize) -> Result<Self> {
        let model = Self {
            field,
            extractors,
            head,
            m,
            settings: RasterSettings::default(),
            background: [0.0; 3],
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        let d = self.field.feature_dim();
        let soa = self.use_soa();
        if soa && self.extractors.len() != self.m {
            return Err(Error::Config(format!(
                "{} extractors for M = {}",
                self.extractors.len(),
                self.m
            )));
        }
        let expected = if soa { head_input_len(d, self.m) } else { head_input_len(d, 0) };
        if self.head.input_len() != expected {
            return Err(Error::Config(format!(
                "head takes {} inputs, expected {expected}",
                self.head.input_len()
            )));
        }
        if self.head.output_len() != self.field.offsets_per_anchor() * GAUSSIAN_OUTPUTS {
            return Err(Error::Config(format!(
                "head emits {} values for K = {}",
                self.head.output_len(),
                self.field.offsets_per_anchor()
            )));
        }
        Ok(())
    }

    pub fn use_soa(&self) -> bool {
        !self.extractors.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.field.feature_dim()
    }

    pub fn k(&self) -> usize {
        self.field.offsets_per_anchor()
    }

    fn check_basis<'a>(&self, basis: Option<&'a SecondOrderBasis>) -> Result<Option<&'a SecondOrderBasis>> {
        match (self.use_soa(), basis) {
            (false, _) => Ok(None),
            (true, Some(b)) => Ok(Some(b)),
            (true, None) => Err(Error::Usage("second-order augmentation needs a basis".into())),
        }
    }

    /// Predicted Gaussians for every anchor as seen from `camera`, anchor by anchor.
    pub fn gaussians(&self, basis: Option<&SecondOrderBasis>, camera: &Camera) -> Result<Vec<GaussianPrimitive>> {
        Ok(self.predict(basis, camera)?.into_iter().flat_map(|a| a.gaussians).collect())
    }

    fn predict(&self, basis: Option<&SecondOrderBasis>, camera: &Camera) -> Result<Vec<AnchorPass>> {
        let basis = self.check_basis(basis)?;
        self.field
            .anchors
            .par_iter()
            .enumerate()
            .map(|(i, anchor)| {
                let view = ViewContext::for_camera(anchor, camera)?;
                let (aug, aug_record) = match basis {
                    Some(b) => {
                        let (aug, rec) = augment_anchor_recorded(&anchor.feature, b, &self.extractors)?;
                        (Some(aug), Some(rec))
                    }
                    None => (None, None),
                };
                let (gaussians, head_record) = predict_gaussians_recorded(anchor, aug.as_ref(), &view, &self.head)
                    .map_err(|e| match e {
                        Error::Numerical(msg) => Error::Numerical(format!("anchor {i}: {msg}")),
                        other => other,
                    })?;
                Ok(AnchorPass {
                    aug_record,
                    head_record,
                    gaussians,
                })
            })
            .collect()
    }

    pub fn render(&self, basis: Option<&SecondOrderBasis>, camera: &Camera) -> Result<Image> {
        Ok(self.forward(basis, camera)?.render.image)
    }

    /// Forward pass with everything the backward pass needs.
    pub fn forward(&self, basis: Option<&SecondOrderBasis>, camera: &Camera) -> Result<ForwardPass> {
        let anchors = self.predict(basis, camera)?;
        let mut splats = Vec::new();
        let mut projected = Vec::new();
        let mut flat = 0;
        for a in &anchors {
            for g in &a.gaussians {
                if let Some((s, rec)) = project_gaussian_recorded(g, camera, &self.settings) {
                    splats.push(s);
                    projected.push((flat, rec));
                }
                flat += 1;
            }
        }
        let render = render_recorded(&splats, camera.width, camera.height, self.background, &self.settings);
        Ok(ForwardPass {
            camera: camera.clone(),
            anchors,
            projected,
            splats,
            render,
        })
    }

    /// Gradients of a scalar loss given `∂L/∂image` and `∂L/∂s` per predicted Gaussian.
    pub fn backward(&self, pass: &ForwardPass, d_image: &[f64], d_scales: &[[f64; 3]]) -> Result<ModelGradients> {
        let total: usize = pass.anchors.iter().map(|a| a.gaussians.len()).sum();
        if d_image.len() != pass.render.image.data().len() {
            return Err(Error::Config(format!(
                "image gradient has {} entries, expected {}",
                d_image.len(),
                pass.render.image.data().len()
            )));
        }
        if !d_scales.is_empty() && d_scales.len() != total {
            return Err(Error::Config(format!(
                "{} scale gradients for {total} Gaussians",
                d_scales.len()
            )));
        }
        if pass.anchors.len() != self.field.len() {
            return Err(Error::Usage("forward pass belongs to a different model".into()));
        }

        let splat_grads = render_backward(&pass.splats, &pass.render.record, d_image);
        let mut g_grads = vec![GaussianGrad::default(); total];
        let flat_gaussians: Vec<&GaussianPrimitive> = pass.anchors.iter().flat_map(|a| &a.gaussians).collect();
        for ((gi, rec), sg) in pass.projected.iter().zip(&splat_grads) {
            g_grads[*gi] = project_gaussian_backward(flat_gaussians[*gi], &pass.camera, rec, sg);
        }
        for (g, ds) in g_grads.iter_mut().zip(d_scales) {
            for j in 0..3 {
                g.scale[j] += ds[j];
            }
        }

        let k = self.k();
        let m = if self.use_soa() { self.m } else { 0 };
        let n = self.field.len();
        let chunks: Vec<ChunkGrads> = (0..n.div_ceil(BACKWARD_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut head = self.head.zeros_like();
                let mut extractors: Vec<MlpParams> = self.extractors.iter().map(MlpParams::zeros_like).collect();
                let mut per_anchor = Vec::new();
                for i in c * BACKWARD_CHUNK..((c + 1) * BACKWARD_CHUNK).min(n) {
                    let anchor = &self.field.anchors[i];
                    let ap = &pass.anchors[i];
                    let hb = predict_gaussians_backward(
                        anchor,
                        &self.head,
                        &ap.head_record,
                        m,
                        &g_grads[i * k..(i + 1) * k],
                        &mut head,
                    );
                    let mut d_feature = hb.d_feature;
                    if let Some(rec) = &ap.aug_record {
                        augment_anchor_backward(&self.extractors, rec, &hb.d_textures, &mut extractors, &mut d_feature);
                    }
                    per_anchor.push((d_feature, hb.d_offsets, hb.d_scaling));
                }
                ChunkGrads {
                    head,
                    extractors,
                    per_anchor,
                }
            })
            .collect();

        let mut grads = ModelGradients {
            features: Vec::with_capacity(n),
            offsets: Vec::with_capacity(n),
            scalings: Vec::with_capacity(n),
            extractors: self.extractors.iter().map(MlpParams::zeros_like).collect(),
            head: self.head.zeros_like(),
        };
        for chunk in chunks {
            grads.head.accumulate(&chunk.head);
            for (a, b) in grads.extractors.iter_mut().zip(&chunk.extractors) {
                a.accumulate(b);
            }
            for (f, o, s) in chunk.per_anchor {
                grads.features.push(f);
                grads.offsets.push(o);
                grads.scalings.push(s);
            }
        }
        Ok(grads)
    }

    pub fn group_len(&self, group: ParamGroup) -> usize {
        let n = self.field.len();
        match group {
            ParamGroup::Features => n * self.feature_dim(),
            ParamGroup::Offsets => n * self.k() * 3,
            ParamGroup::Scalings => n * 3,
            ParamGroup::Mlps => {
                self.extractors.iter().map(MlpParams::param_count).sum::<usize>() + self.head.param_count()
            }
        }
    }

    pub fn param_count(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.group_len(g)).sum()
    }

    /// One group as a flat vector (scalings as stored, not in log space).
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.group_len(group));
        match group {
            ParamGroup::Features => self.field.anchors.iter().for_each(|a| out.extend_from_slice(&a.feature)),
            ParamGroup::Offsets => self
                .field
                .anchors
                .iter()
                .for_each(|a| a.offsets.iter().for_each(|o| out.extend_from_slice(o))),
            ParamGroup::Scalings => self.field.anchors.iter().for_each(|a| out.extend_from_slice(&a.scaling)),
            ParamGroup::Mlps => {
                self.extractors.iter().for_each(|e| e.flatten_into(&mut out));
                self.head.flatten_into(&mut out);
            }
        }
        out
    }

    pub fn set_group(&mut self, group: ParamGroup, values: &[f64]) -> Result<()> {
        if values.len() != self.group_len(group) {
            return Err(Error::Config(format!(
                "{} group has {} parameters, got {}",
                group.name(),
                self.group_len(group),
                values.len()
            )));
        }
        let d = self.feature_dim();
        let k = self.k();
        match group {
            ParamGroup::Features => {
                for (a, v) in self.field.anchors.iter_mut().zip(values.chunks_exact(d)) {
                    a.feature.copy_from_slice(v);
                }
            }
            ParamGroup::Offsets => {
                for (a, v) in self.field.anchors.iter_mut().zip(values.chunks_exact(3 * k)) {
                    for (o, w) in a.offsets.iter_mut().zip(v.chunks_exact(3)) {
                        o.copy_from_slice(w);
                    }
                }
            }
            ParamGroup::Scalings => {
                for (a, v) in self.field.anchors.iter_mut().zip(values.chunks_exact(3)) {
                    a.scaling.copy_from_slice(v);
                }
            }
            ParamGroup::Mlps => {
                let mut at = 0;
                for e in &mut self.extractors {
                    at += e.assign_from(&values[at..]);
                }
                self.head.assign_from(&values[at..]);
            }
        }
        Ok(())
    }

    /// All groups concatenated in [`ParamGroup::ALL`] order.
    pub fn flatten_params(&self) -> Vec<f64> {
        ParamGroup::ALL.iter().flat_map(|&g| self.group_values(g)).collect()
    }

    pub fn assign_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Config(format!(
                "model has {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut at = 0;
        for g in ParamGroup::ALL {
            let n = self.group_len(g);
            self.set_group(g, &values[at..at + n])?;
            at += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flatten_params().iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug)]
struct AnchorPass {
    aug_record: Option<AugmentRecord>,
    head_record: HeadRecord,
    gaussians: Vec<GaussianPrimitive>,
}

struct ChunkGrads {
    head: MlpParams,
    extractors: Vec<MlpParams>,
    per_anchor: Vec<(Vec<f64>, Vec<[f64; 3]>, [f64; 3])>,
}

/// Recorded forward pass for one view.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    camera: Camera,
    anchors: Vec<AnchorPass>,
    /// `(flat Gaussian index, projection record)` for every splat that survived culling.
    projected: Vec<(usize, ProjectionRecord)>,
    splats: Vec<Splat2D>,
    pub render: RenderOutput,
}

impl ForwardPass {
    pub fn image(&self) -> &Image {
        &self.render.image
    }

    pub fn gaussians(&self) -> impl Iterator<Item = &GaussianPrimitive> {
        self.anchors.iter().flat_map(|a| &a.gaussians)
    }

    pub fn scales(&self) -> Vec<[f64; 3]> {
        self.gaussians().map(|g| g.scale).collect()
    }

    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients {
    pub features: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<[f64; 3]>>,
    /// With respect to the anchor scaling `l` itself.
    pub scalings: Vec<[f64; 3]>,
    pub extractors: Vec<MlpParams>,
    pub head: MlpParams,
}

impl ModelGradients {
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        match group {
            ParamGroup::Features => self.features.iter().for_each(|f| out.extend_from_slice(f)),
            ParamGroup::Offsets => self
                .offsets
                .iter()
                .for_each(|a| a.iter().for_each(|o| out.extend_from_slice(o))),
            ParamGroup::Scalings => self.scalings.iter().for_each(|s| out.extend_from_slice(s)),
            ParamGroup::Mlps => {
                self.extractors.iter().for_each(|e| e.flatten_into(&mut out));
                self.head.flatten_into(&mut out);
            }
        }
        out
    }

    /// Same layout as [`Model::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        ParamGroup::ALL.iter().flat_map(|&g| self.group_values(g)).collect()
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &ModelGradients) {
        for (a, b) in self.features.iter_mut().zip(&other.features) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.offsets.iter_mut().zip(&other.offsets) {
            for (x, y) in a.iter_mut().zip(b) {
                (0..3).for_each(|j| x[j] += y[j]);
            }
        }
        for (x, y) in self.scalings.iter_mut().zip(&other.scalings) {
            (0..3).for_each(|j| x[j] += y[j]);
        }
        for (a, b) in self.extractors.iter_mut().zip(&other.extractors) {
            a.accumulate(b);
        }
        self.head.accumulate(&other.head);
    }
}

/// Forward/backward bookkeeping: a backward call must follow a forward call.
#[derive(Debug, Default)]
pub struct Tape {
    pass: Option<ForwardPass>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, model: &Model, basis: Option<&SecondOrderBasis>, camera: &Camera) -> Result<&ForwardPass> {
        self.pass = Some(model.forward(basis, camera)?);
        Ok(self.pass.as_ref().unwrap())
    }

    pub fn pass(&self) -> Option<&ForwardPass> {
        self.pass.as_ref()
    }

    /// Consumes the recorded pass.
    pub fn backward(&mut self, model: &Model, d_image: &[f64], d_scales: &[[f64; 3]]) -> Result<ModelGradients> {
        let pass = self
            .pass
            .take()
            .ok_or_else(|| Error::Usage("backward called without a recorded forward pass".into()))?;
        model.backward(&pass, d_image, d_scales)
    }
}

/// Loss and model gradients for one view. `frozen` pins the selective weight maps.
pub fn loss_and_gradients(
    model: &Model,
    basis: Option<&SecondOrderBasis>,
    camera: &Camera,
    truth: &Image,
    weights: &LossWeights,
    variant: SglVariant,
    frozen: Option<&SelectiveWeights>,
) -> Result<(LossReport, ModelGradients)> {
    let pass = model.forward(basis, camera)?;
    let scales = pass.scales();
    let report = total_loss_with(pass.image(), truth, &scales, weights, variant, frozen)?;
    let lg = total_loss_backward(pass.image(), truth, &scales, &report, variant);
    let grads = model.backward(&pass, &lg.d_rendered, &lg.d_scales)?;
    Ok((report, grads))
}

/// Loss only; see [`loss_and_gradients`].
pub fn view_loss(
    model: &Model,
    basis: Option<&SecondOrderBasis>,
    camera: &Camera,
    truth: &Image,
    weights: &LossWeights,
    variant: SglVariant,
    frozen: Option<&SelectiveWeights>,
) -> Result<LossReport> {
    let pass = model.forward(basis, camera)?;
    total_loss_with(pass.image(), truth, &pass.scales(), weights, variant, frozen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::refresh_basis;
    use nalgebra::Vector3;

    fn toy(use_soa: bool) -> (Model, Camera) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let points: Vec<[f64; 3]> = (0..12)
            .map(|_| [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)])
            .collect();
        let cfg = ModelConfig {
            feature_dim: 6,
            m: 2,
            k: 2,
            hidden: 8,
            use_soa,
        };
        let mut model = Model::initialize(&points, 0.4, &cfg, 5).unwrap();
        for a in &mut model.field.anchors {
            for f in &mut a.feature {
                *f = rng.gen_range(-1.0..1.0);
            }
            for o in &mut a.offsets {
                *o = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            }
        }
        let cam = Camera::look_at(
            16,
            16,
            16.0,
            Vector3::new(0.3, -0.4, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        (model, cam)
    }

    #[test]
    fn base_wiring_head_width() {
        let (model, _) = toy(false);
        assert_eq!(model.head.input_len(), 6 + 4);
        let (model, _) = toy(true);
        assert_eq!(model.head.input_len(), 3 * 6 + 4);
    }

    #[test]
    fn flatten_round_trip() {
        let (mut model, _) = toy(true);
        let v = model.flatten_params();
        assert_eq!(v.len(), model.param_count());
        let copy = model.clone();
        model.assign_params(&v).unwrap();
        assert_eq!(model, copy);
        assert!(model.assign_params(&v[1..]).is_err());
    }

    #[test]
    fn backward_without_forward_is_a_usage_error() {
        let (model, _) = toy(false);
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(&model, &[], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn soa_requires_basis() {
        let (model, cam) = toy(true);
        assert!(matches!(model.render(None, &cam), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (model, cam) = toy(true);
        let basis = refresh_basis(&model.field, 2, 0).unwrap();
        let pass = model.forward(Some(&basis), &cam).unwrap();
        let g = model
            .backward(&pass, &vec![0.0; pass.image().data().len()], &[])
            .unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_on_sample() {
        for soa in [false, true] {
            let (mut model, cam) = toy(soa);
            // The skip threshold is a jump; keep it out of the way of the difference quotient.
            model.settings.alpha_skip = 0.0;
            let basis = refresh_basis(&model.field, 2, 0).unwrap();
            let b = soa.then_some(&basis);
            let truth = Image::from_fn(16, 16, |r, c, ch| ((r * 7 + c * 3 + ch) % 11) as f64 / 10.0);
            let weights = LossWeights::default();
            let (report, grads) =
                loss_and_gradients(&model, b, &cam, &truth, &weights, SglVariant::PerPixel, None).unwrap();
            let frozen = report.selective.weights.clone();
            let analytic = grads.flatten();
            let mut x0 = model.flatten_params();
            let mut probe = model.clone();
            let mut f = |x: &[f64]| {
                probe.assign_params(x).unwrap();
                view_loss(&probe, b, &cam, &truth, &weights, SglVariant::PerPixel, Some(&frozen))
                    .unwrap()
                    .total
            };
            let mut checked = 0;
            let mut bad = 0;
            for i in (0..x0.len()).step_by(17) {
                let fd = crate::numerics::central_difference(&mut f, &mut x0, i, 1e-5).unwrap();
                let a = analytic[i];
                if a.abs() < 1e-8 && fd.abs() < 1e-8 {
                    continue;
                }
                checked += 1;
                if (a - fd).abs() / a.abs().max(fd.abs()) > 1e-3 {
                    bad += 1;
                }
            }
            assert!(checked > 10);
            assert!(bad * 50 <= checked, "soa={soa}: {bad}/{checked} mismatched");
        }
    }
}
