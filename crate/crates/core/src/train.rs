//! Optimization loop, evaluation and metrics logging.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchor::{refresh_basis, SecondOrderBasis};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::Checkpoint;
use crate::loss::{psnr, ssim, total_loss_backward, total_loss_with, LossReport, LossWeights, SglVariant};
use crate::model::{Model, ModelConfig, ModelGradients, ParamGroup};
use crate::optim::{adam_step, exponential_decay, AdamState};
use crate::scene::{Scene, SceneSpec, View};

pub const METRICS_HEADER: &str = "iteration,l1,ssim_term,vol,sgl,total,train_psnr,test_psnr,test_ssim,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub m: usize,
    pub k: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub lr_features: f64,
    pub lr_offsets: f64,
    pub lr_scalings: f64,
    pub lr_mlps: f64,
    /// Every rate decays exponentially to this fraction of its start value.
    pub lr_final_fraction: f64,
    pub basis_refresh_every: usize,
    pub eval_every: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub use_soa: bool,
    pub use_sgl: bool,
    pub sgl_variant: SglVariant,
    /// Use every train view per iteration instead of one sampled view.
    pub full_batch: bool,
    /// Treat the basis as a constant during backpropagation. Only `true` is supported.
    pub basis_stop_gradient: bool,
    /// Write 0 in the `seconds` column so logs compare byte for byte.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            m: 2,
            k: 10,
            hidden: 32,
            iterations: 3000,
            lr_features: 1e-2,
            lr_offsets: 1e-3,
            lr_scalings: 1e-3,
            lr_mlps: 2e-3,
            lr_final_fraction: 0.1,
            basis_refresh_every: 1,
            eval_every: 100,
            weights: LossWeights::default(),
            seed: 0,
            use_soa: true,
            use_sgl: true,
            sgl_variant: SglVariant::PerPixel,
            full_batch: false,
            basis_stop_gradient: true,
            deterministic: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{v}' for {key}"))),
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.dim,
            m: self.m,
            k: self.k,
            hidden: self.hidden,
            use_soa: self.use_soa,
        }
    }

    /// Loss weights with the selective term forced off when SGL is disabled.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.use_sgl {
            w.selective = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        let rates = [self.lr_features, self.lr_offsets, self.lr_scalings, self.lr_mlps];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::Config("lr_final_fraction must lie in (0, 1]".into()));
        }
        if self.basis_refresh_every < 1 || self.eval_every < 1 {
            return Err(Error::Config("basis_refresh_every and eval_every must be at least 1".into()));
        }
        if !self.basis_stop_gradient {
            return Err(Error::Config(
                "differentiating through the eigendecomposition is not supported; keep basis_stop_gradient = true".into(),
            ));
        }
        self.weights.validate()
    }

    pub fn rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Features => self.lr_features,
            ParamGroup::Offsets => self.lr_offsets,
            ParamGroup::Scalings => self.lr_scalings,
            ParamGroup::Mlps => self.lr_mlps,
        }
    }

    /// `key = value` lines; `deterministic` is an execution mode and is not echoed.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let pairs: Vec<(&str, String)> = vec![
            ("dim", self.dim.to_string()),
            ("m", self.m.to_string()),
            ("k", self.k.to_string()),
            ("hidden", self.hidden.to_string()),
            ("iters", self.iterations.to_string()),
            ("lr_features", self.lr_features.to_string()),
            ("lr_offsets", self.lr_offsets.to_string()),
            ("lr_scalings", self.lr_scalings.to_string()),
            ("lr_mlps", self.lr_mlps.to_string()),
            ("lr_final_fraction", self.lr_final_fraction.to_string()),
            ("refresh_every", self.basis_refresh_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("l1_weight", w.l1.to_string()),
            ("ssim_weight", w.ssim.to_string()),
            ("vol_weight", w.vol.to_string()),
            ("sgl_weight", w.selective.to_string()),
            ("seed", self.seed.to_string()),
            ("soa", self.use_soa.to_string()),
            ("sgl", self.use_sgl.to_string()),
            ("sgl_variant", self.sgl_variant.name().to_string()),
            ("full_batch", self.full_batch.to_string()),
            ("basis_stop_gradient", self.basis_stop_gradient.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Inverse of [`to_text`](Self::to_text). Lines with a `scene.` prefix are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.starts_with("scene.") {
                continue;
            }
            match k {
                "dim" => c.dim = parse_value(k, v)?,
                "m" => c.m = parse_value(k, v)?,
                "k" => c.k = parse_value(k, v)?,
                "hidden" => c.hidden = parse_value(k, v)?,
                "iters" => c.iterations = parse_value(k, v)?,
                "lr_features" => c.lr_features = parse_value(k, v)?,
                "lr_offsets" => c.lr_offsets = parse_value(k, v)?,
                "lr_scalings" => c.lr_scalings = parse_value(k, v)?,
                "lr_mlps" => c.lr_mlps = parse_value(k, v)?,
                "lr_final_fraction" => c.lr_final_fraction = parse_value(k, v)?,
                "refresh_every" => c.basis_refresh_every = parse_value(k, v)?,
                "eval_every" => c.eval_every = parse_value(k, v)?,
                "l1_weight" => c.weights.l1 = parse_value(k, v)?,
                "ssim_weight" => c.weights.ssim = parse_value(k, v)?,
                "vol_weight" => c.weights.vol = parse_value(k, v)?,
                "sgl_weight" => c.weights.selective = parse_value(k, v)?,
                "seed" => c.seed = parse_value(k, v)?,
                "soa" => c.use_soa = parse_bool(k, v)?,
                "sgl" => c.use_sgl = parse_bool(k, v)?,
                "sgl_variant" => {
                    c.sgl_variant =
                        SglVariant::parse(v).ok_or_else(|| Error::Config(format!("unknown sgl_variant '{v}'")))?
                }
                "full_batch" => c.full_batch = parse_bool(k, v)?,
                "basis_stop_gradient" => c.basis_stop_gradient = parse_bool(k, v)?,
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Training config followed by the scene spec under a `scene.` prefix.
pub fn config_echo(config: &TrainConfig, spec: &SceneSpec) -> String {
    let mut s = config.to_text();
    for line in spec.to_text().lines() {
        let _ = writeln!(s, "scene.{line}");
    }
    s
}

/// Splits a checkpoint config echo back into its two halves.
pub fn parse_config_echo(text: &str) -> Result<(TrainConfig, SceneSpec)> {
    let scene: String = text
        .lines()
        .filter_map(|l| l.trim().strip_prefix("scene."))
        .map(|l| format!("{l}\n"))
        .collect();
    Ok((TrainConfig::parse(text)?, SceneSpec::parse(&scene)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub l1: f64,
    pub ssim_term: f64,
    pub vol: f64,
    pub sgl: f64,
    pub total: f64,
    pub train_psnr: f64,
    pub test_psnr: f64,
    pub test_ssim: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.l1,
            self.ssim_term,
            self.vol,
            self.sgl,
            self.total,
            self.train_psnr,
            self.test_psnr,
            self.test_ssim,
            self.seconds
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalTable {
    pub fn from_views(views: Vec<ViewMetrics>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidInput("evaluation needs at least one view".into()));
        }
        let n = views.len() as f64;
        let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        Ok(Self {
            views,
            mean_psnr,
            mean_ssim,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim\n");
        for v in &self.views {
            let _ = writeln!(s, "{},{},{}", v.view, v.psnr, v.ssim);
        }
        let _ = writeln!(s, "mean,{},{}", self.mean_psnr, self.mean_ssim);
        s
    }
}

/// Per-view and mean PSNR/SSIM of `renders` against the views' images.
pub fn evaluate_images(renders: &[Image], views: &[&View]) -> Result<EvalTable> {
    if renders.len() != views.len() {
        return Err(Error::InvalidInput("one render per view is required".into()));
    }
    let rows = renders
        .iter()
        .zip(views)
        .enumerate()
        .map(|(i, (img, v))| {
            Ok(ViewMetrics {
                view: i,
                psnr: psnr(img, &v.image)?,
                ssim: ssim(img, &v.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalTable::from_views(rows)
}

/// Renders every view with the model and scores it.
pub fn evaluate(model: &Model, basis: Option<&SecondOrderBasis>, views: &[&View]) -> Result<EvalTable> {
    let renders = views
        .iter()
        .map(|v| model.render(basis, &v.camera))
        .collect::<Result<Vec<_>>>()?;
    evaluate_images(&renders, views)
}

/// Loss terms and gradients from one optimization step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub iteration: usize,
    pub views: Vec<usize>,
    pub report: LossReport,
    pub train_psnr: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub scene: Scene,
    pub model: Model,
    pub basis: Option<SecondOrderBasis>,
    pub optimizer: Vec<AdamState>,
    /// Completed iterations.
    pub iteration: usize,
    pub metrics: Vec<MetricsRow>,
    /// Total loss of every completed step, in order.
    pub loss_history: Vec<f64>,
    started: Instant,
}

impl Trainer {
    pub fn new(scene: Scene, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::initialize(&scene.init_points, scene.spec.voxel_size, &config.model_config(), config.seed)?;
        let optimizer = ParamGroup::ALL.iter().map(|&g| AdamState::new(model.group_len(g))).collect();
        Ok(Self {
            config,
            scene,
            model,
            basis: None,
            optimizer,
            iteration: 0,
            metrics: Vec::new(),
            loss_history: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn from_checkpoint(scene: Scene, config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let cfg = config.model_config();
        let model = ckpt.model;
        if model.feature_dim() != cfg.feature_dim || model.k() != cfg.k || model.use_soa() != cfg.use_soa {
            return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
        }
        if ckpt.optimizer.len() != ParamGroup::ALL.len()
            || ParamGroup::ALL
                .iter()
                .zip(&ckpt.optimizer)
                .any(|(&g, s)| s.len() != model.group_len(g) || s.v.len() != s.m.len())
        {
            return Err(Error::Config("optimizer state does not match the model".into()));
        }
        if config.use_soa && ckpt.iteration > 0 && ckpt.basis.is_none() {
            return Err(Error::Config("checkpoint lacks the basis snapshot".into()));
        }
        Ok(Self {
            config,
            scene,
            model,
            basis: ckpt.basis,
            optimizer: ckpt.optimizer,
            iteration: ckpt.iteration as usize,
            metrics: Vec::new(),
            loss_history: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration as u64,
            model: self.model.clone(),
            basis: self.basis.clone(),
            optimizer: self.optimizer.clone(),
            config: config_echo(&self.config, &self.scene.spec),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Basis to use for rendering right now (refreshed if none exists yet).
    pub fn current_basis(&self) -> Result<Option<SecondOrderBasis>> {
        if !self.config.use_soa {
            return Ok(None);
        }
        match &self.basis {
            Some(b) => Ok(Some(b.clone())),
            None => Ok(Some(refresh_basis(&self.model.field, self.config.m, self.iteration)?)),
        }
    }

    fn views_for(&self, iteration: usize) -> Vec<usize> {
        let n = self.scene.train.len();
        if self.config.full_batch {
            return (0..n).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iteration as u64);
        vec![rng.gen_range(0..n)]
    }

    /// One optimization step. On a non-finite loss or gradient the state is left untouched.
    pub fn step(&mut self) -> Result<StepReport> {
        let it = self.iteration;
        if self.config.use_soa && (self.basis.is_none() || it % self.config.basis_refresh_every == 0) {
            self.basis = Some(refresh_basis(&self.model.field, self.config.m, it)?);
        }
        let weights = self.config.effective_weights();
        let variant = self.config.sgl_variant;
        let views = self.views_for(it);

        let mut grads: Option<ModelGradients> = None;
        let mut reports = Vec::with_capacity(views.len());
        let mut psnrs = Vec::with_capacity(views.len());
        for &vi in &views {
            let view = &self.scene.train[vi];
            let pass = self.model.forward(self.basis.as_ref(), &view.camera)?;
            let scales = pass.scales();
            let report = total_loss_with(pass.image(), &view.image, &scales, &weights, variant, None)?;
            if !report.total.is_finite() {
                return Err(Error::Diverged { iteration: it });
            }
            let lg = total_loss_backward(pass.image(), &view.image, &scales, &report, variant);
            let g = self.model.backward(&pass, &lg.d_rendered, &lg.d_scales)?;
            psnrs.push(psnr(pass.image(), &view.image)?);
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.accumulate(&g),
            }
            reports.push(report);
        }
        let grads = grads.expect("at least one train view");
        let scale = 1.0 / views.len() as f64;

        let mut updates = Vec::with_capacity(ParamGroup::ALL.len());
        for (gi, &group) in ParamGroup::ALL.iter().enumerate() {
            let mut params = self.model.group_values(group);
            let mut g: Vec<f64> = grads.group_values(group).iter().map(|x| x * scale).collect();
            if group == ParamGroup::Scalings {
                // Optimized as log l.
                for (p, d) in params.iter_mut().zip(g.iter_mut()) {
                    *d *= *p;
                    *p = p.ln();
                }
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged { iteration: it });
            }
            let mut state = self.optimizer[gi].clone();
            let rate = exponential_decay(
                self.config.rate(group),
                self.config.lr_final_fraction,
                it,
                self.config.iterations,
            );
            adam_step(&mut params, &g, &mut state, rate)?;
            if group == ParamGroup::Scalings {
                params.iter_mut().for_each(|p| *p = p.exp());
            }
            if params.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged { iteration: it });
            }
            updates.push((group, params, state));
        }
        for (gi, (group, params, state)) in updates.into_iter().enumerate() {
            self.model.set_group(group, &params)?;
            self.optimizer[gi] = state;
        }
        self.iteration += 1;

        let report = average_reports(&reports, scale);
        let train_psnr = psnrs.iter().sum::<f64>() * scale;
        self.loss_history.push(report.total);
        Ok(StepReport {
            iteration: it,
            views,
            report,
            train_psnr,
        })
    }

    /// Mean PSNR/SSIM over the held-out views with the current parameters.
    pub fn evaluate_test(&self) -> Result<EvalTable> {
        let basis = self.current_basis()?;
        let views: Vec<&View> = self.scene.test.iter().collect();
        evaluate(&self.model, basis.as_ref(), &views)
    }

    /// Mean total loss over every train view (selective weights from each view).
    pub fn mean_train_loss(&self) -> Result<f64> {
        let basis = self.current_basis()?;
        let weights = self.config.effective_weights();
        let mut total = 0.0;
        for v in &self.scene.train {
            let img = self.model.render(basis.as_ref(), &v.camera)?;
            let scales: Vec<[f64; 3]> = self
                .model
                .gaussians(basis.as_ref(), &v.camera)?
                .iter()
                .map(|g| g.scale)
                .collect();
            total += total_loss_with(&img, &v.image, &scales, &weights, self.config.sgl_variant, None)?.total;
        }
        Ok(total / self.scene.train.len() as f64)
    }

    fn record(&mut self, step: &StepReport) -> Result<()> {
        let eval = self.evaluate_test()?;
        let r = &step.report;
        let row = MetricsRow {
            iteration: self.iteration,
            l1: r.l1_term,
            ssim_term: r.ssim_term,
            vol: r.vol_term,
            sgl: r.selective_term,
            total: r.total,
            train_psnr: step.train_psnr,
            test_psnr: eval.mean_psnr,
            test_ssim: eval.mean_ssim,
            seconds: if self.config.deterministic {
                0.0
            } else {
                self.started.elapsed().as_secs_f64()
            },
        };
        if let Some(last) = self.metrics.last() {
            debug_assert!(row.iteration > last.iteration);
        }
        self.metrics.push(row);
        Ok(())
    }

    /// Trains until `until` completed iterations (capped at the configured total).
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.config.iterations);
        while self.iteration < until {
            let step = self.step()?;
            if self.iteration % self.config.eval_every == 0 || self.iteration == self.config.iterations {
                self.record(&step)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.iterations)
    }
}

fn average_reports(reports: &[LossReport], scale: f64) -> LossReport {
    let mut r = reports[0].clone();
    if reports.len() > 1 {
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() * scale;
        r.l1_term = avg(|x| x.l1_term);
        r.ssim_term = avg(|x| x.ssim_term);
        r.vol_term = avg(|x| x.vol_term);
        r.selective_term = avg(|x| x.selective_term);
        r.total = avg(|x| x.total);
    }
    r
}

/// Convenience wrapper: trains from scratch and returns the final checkpoint and metrics.
pub fn train(scene: Scene, config: TrainConfig) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    let mut t = Trainer::new(scene, config)?;
    t.run()?;
    Ok((t.checkpoint(), t.metrics))
}

/// Camera for view `index` over train views followed by test views.
pub fn scene_camera(scene: &Scene, index: usize) -> Result<&Camera> {
    Ok(&scene.view(index)?.camera)
}
