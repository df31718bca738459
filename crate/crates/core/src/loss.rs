//! Training objectives and image metrics.
//!
//! The selective gradient loss compares Sobel gradient maps of the rendering
//! and the ground truth. Per pixel, the channel-averaged discrepancy
//! `δ_x = mean_c |G'_x − G_x|` (and likewise `δ_y`) is weighted by itself:
//!
//! ```text
//! L_s = (1/√(HW)) Σ_p (w_x δ_x + w_y δ_y),   w = δ (held constant)
//! ```
//!
//! `SglVariant::Literal` instead forms the scalar discrepancies
//! `l = (1/√(HW)) Σ δ` and multiplies them by the mean weight.

use crate::error::Result;
use crate::image::{ensure_same_shape, Image};


pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Reported PSNR when two images match exactly.
pub const PSNR_CAP: f64 = 100.0;

/// Per-channel Sobel responses, laid out like [`Image`] data.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMaps {
    pub width: usize,
    pub height: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

/// Source pixel index for offset `k ∈ {0, 1, 2}` (i.e. −1, 0, +1) with replicate padding.
#[inline]
fn clamp_off(i: usize, k: usize, len: usize) -> usize {
    (i + k).saturating_sub(1).min(len - 1)
}

/// Sobel responses written as smoothed central differences, so a constant
/// neighbourhood gives exactly zero.
fn sobel_planes(image: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (image.width(), image.height());
    let mut gx = vec![0.0; w * h * 3];
    let mut gy = vec![0.0; w * h * 3];
    for row in 0..h {
        let (up, down) = (clamp_off(row, 0, h), clamp_off(row, 2, h));
        for col in 0..w {
            let (left, right) = (clamp_off(col, 0, w), clamp_off(col, 2, w));
            for ch in 0..3 {
                let mut ax = 0.0;
                let mut ay = 0.0;
                for k in 0..3 {
                    let r = clamp_off(row, k, h);
                    let c = clamp_off(col, k, w);
                    ax += SMOOTH[k] * (image.get(r, right, ch) - image.get(r, left, ch));
                    ay += SMOOTH[k] * (image.get(down, c, ch) - image.get(up, c, ch));
                }
                let i = (row * w + col) * 3 + ch;
                gx[i] = ax;
                gy[i] = ay;
            }
        }
    }
    (gx, gy)
}

/// Adjoint of [`sobel_planes`]: scatters output gradients onto source pixels.
fn sobel_adjoint(d_gx: &[f64], d_gy: &[f64], width: usize, height: usize, d_image: &mut [f64]) {
    let at = |r: usize, c: usize, ch: usize| (r * width + c) * 3 + ch;
    for row in 0..height {
        let (up, down) = (clamp_off(row, 0, height), clamp_off(row, 2, height));
        for col in 0..width {
            let (left, right) = (clamp_off(col, 0, width), clamp_off(col, 2, width));
            for ch in 0..3 {
                let i = (row * width + col) * 3 + ch;
                let (gx, gy) = (d_gx[i], d_gy[i]);
                for k in 0..3 {
                    let r = clamp_off(row, k, height);
                    let c = clamp_off(col, k, width);
                    d_image[at(r, right, ch)] += SMOOTH[k] * gx;
                    d_image[at(r, left, ch)] -= SMOOTH[k] * gx;
                    d_image[at(down, c, ch)] += SMOOTH[k] * gy;
                    d_image[at(up, c, ch)] -= SMOOTH[k] * gy;
                }
            }
        }
    }
}

/// Sobel cross-correlation per channel with replicate padding.
pub fn sobel_gradients(image: &Image) -> GradientMaps {
    let (gx, gy) = sobel_planes(image);
    GradientMaps {
        width: image.width(),
        height: image.height(),
        gx,
        gy,
    }
}

impl GradientMaps {
    /// Per-pixel `sqrt(Σ_c g²) / norm` for the chosen direction, clamped to `[0, 1]`.
    pub fn magnitude_image(&self, horizontal: bool, norm: f64) -> Image {
        let src = if horizontal { &self.gx } else { &self.gy };
        Image::from_fn(self.width, self.height, |r, c, _| {
            let i = (r * self.width + c) * 3;
            let m = (src[i] * src[i] + src[i + 1] * src[i + 1] + src[i + 2] * src[i + 2]).sqrt();
            (m / norm).clamp(0.0, 1.0)
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SglVariant {
    /// Weight inside the pixel sum.
    #[default]
    PerPixel,
    /// Scalar discrepancy times the mean weight.
    Literal,
}

impl SglVariant {
    pub fn name(self) -> &'static str {
        match self {
            SglVariant::PerPixel => "per-pixel",
            SglVariant::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per-pixel" | "per_pixel" | "perpixel" => Some(SglVariant::PerPixel),
            "literal" => Some(SglVariant::Literal),
            _ => None,
        }
    }
}

/// Per-pixel weight maps `w_x`, `w_y` (channel-averaged discrepancies).
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveWeights {
    pub wx: Vec<f64>,
    pub wy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveLoss {
    pub value: f64,
    /// `(1/√(HW)) Σ δ_x`.
    pub l_x: f64,
    pub l_y: f64,
    pub weights: SelectiveWeights,
}

struct Discrepancy {
    dx: Vec<f64>,
    dy: Vec<f64>,
    /// Signs of `G' − G` per channel, for the backward pass.
    sx: Vec<f64>,
    sy: Vec<f64>,
}

fn discrepancy(rendered: &GradientMaps, truth: &GradientMaps) -> Discrepancy {
    let n = rendered.width * rendered.height;
    let mut d = Discrepancy {
        dx: vec![0.0; n],
        dy: vec![0.0; n],
        sx: vec![0.0; n * 3],
        sy: vec![0.0; n * 3],
    };
    for p in 0..n {
        let mut ax = 0.0;
        let mut ay = 0.0;
        for ch in 0..3 {
            let i = p * 3 + ch;
            let ex = rendered.gx[i] - truth.gx[i];
            let ey = rendered.gy[i] - truth.gy[i];
            ax += ex.abs();
            ay += ey.abs();
            d.sx[i] = sign(ex);
            d.sy[i] = sign(ey);
        }
        d.dx[p] = ax / 3.0;
        d.dy[p] = ay / 3.0;
    }
    d
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn selective_value(d: &Discrepancy, w: &SelectiveWeights, variant: SglVariant, n: usize) -> (f64, f64, f64) {
    let norm = 1.0 / (n as f64).sqrt();
    let l_x = norm * d.dx.iter().sum::<f64>();
    let l_y = norm * d.dy.iter().sum::<f64>();
    let value = match variant {
        SglVariant::PerPixel => {
            let sx: f64 = w.wx.iter().zip(&d.dx).map(|(a, b)| a * b).sum();
            let sy: f64 = w.wy.iter().zip(&d.dy).map(|(a, b)| a * b).sum();
            norm * (sx + sy)
        }
        SglVariant::Literal => {
            let mx = w.wx.iter().sum::<f64>() / n as f64;
            let my = w.wy.iter().sum::<f64>() / n as f64;
            mx * l_x + my * l_y
        }
    };
    (value, l_x, l_y)
}

/// Selective gradient loss with weights taken from the current discrepancy.
pub fn selective_gradient_loss(rendered: &Image, truth: &Image) -> Result<SelectiveLoss> {
    selective_gradient_loss_with(rendered, truth, SglVariant::PerPixel, None)
}

/// As [`selective_gradient_loss`], optionally with frozen weight maps.
pub fn selective_gradient_loss_with(
    rendered: &Image,
    truth: &Image,
    variant: SglVariant,
    frozen: Option<&SelectiveWeights>,
) -> Result<SelectiveLoss> {
    ensure_same_shape(rendered, truth)?;
    let d = discrepancy(&sobel_gradients(rendered), &sobel_gradients(truth));
    let weights = match frozen {
        Some(w) => w.clone(),
        None => SelectiveWeights {
            wx: d.dx.clone(),
            wy: d.dy.clone(),
        },
    };
    let (value, l_x, l_y) = selective_value(&d, &weights, variant, rendered.pixel_count());
    Ok(SelectiveLoss {
        value,
        l_x,
        l_y,
        weights,
    })
}

/// `∂L_s/∂rendered` with the weight maps treated as constants. Accumulates into `out`.
fn selective_backward(
    rendered: &Image,
    truth: &Image,
    weights: &SelectiveWeights,
    variant: SglVariant,
    scale: f64,
    out: &mut [f64],
) {
    let (w, h) = (rendered.width(), rendered.height());
    let n = w * h;
    let d = discrepancy(&sobel_gradients(rendered), &sobel_gradients(truth));
    let norm = 1.0 / (n as f64).sqrt();
    let (cx, cy) = match variant {
        SglVariant::PerPixel => (None, None),
        SglVariant::Literal => (
            Some(weights.wx.iter().sum::<f64>() / n as f64),
            Some(weights.wy.iter().sum::<f64>() / n as f64),
        ),
    };
    let mut g_x = vec![0.0; n * 3];
    let mut g_y = vec![0.0; n * 3];
    for p in 0..n {
        let wx = cx.unwrap_or(weights.wx[p]);
        let wy = cy.unwrap_or(weights.wy[p]);
        for ch in 0..3 {
            let i = p * 3 + ch;
            g_x[i] = scale * norm * wx * d.sx[i] / 3.0;
            g_y[i] = scale * norm * wy * d.sy[i] / 3.0;
        }
    }
    sobel_adjoint(&g_x, &g_y, w, h, out);
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let k = i as isize - half;
        *t = (-((k * k) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian window truncated at the border and renormalized per pixel.
struct Window {
    taps: [f64; SSIM_WINDOW],
    width: usize,
    height: usize,
    /// Retained tap mass per column / row.
    col_mass: Vec<f64>,
    row_mass: Vec<f64>,
}

impl Window {
    fn new(width: usize, height: usize) -> Self {
        let taps = gaussian_taps();
        let mass = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|i| {
                    let half = (SSIM_WINDOW / 2) as isize;
                    (0..SSIM_WINDOW)
                        .filter(|&t| {
                            let j = i as isize + t as isize - half;
                            j >= 0 && j < len as isize
                        })
                        .map(|t| taps[t])
                        .sum()
                })
                .collect()
        };
        Self {
            taps,
            width,
            height,
            col_mass: mass(width),
            row_mass: mass(height),
        }
    }

    /// Unnormalized separable convolution of a single-channel plane.
    fn convolve(&self, plane: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let half = (SSIM_WINDOW / 2) as isize;
        let mut tmp = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (t, &tap) in self.taps.iter().enumerate() {
                    let j = c as isize + t as isize - half;
                    if j >= 0 && j < w as isize {
                        acc += tap * plane[r * w + j as usize];
                    }
                }
                tmp[r * w + c] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (t, &tap) in self.taps.iter().enumerate() {
                    let i = r as isize + t as isize - half;
                    if i >= 0 && i < h as isize {
                        acc += tap * tmp[i as usize * w + c];
                    }
                }
                out[r * w + c] = acc;
            }
        }
        out
    }

    fn mass(&self, p: usize) -> f64 {
        self.row_mass[p / self.width] * self.col_mass[p % self.width]
    }

    /// Local weighted mean.
    fn filter(&self, plane: &[f64]) -> Vec<f64> {
        let mut out = self.convolve(plane);
        for (p, v) in out.iter_mut().enumerate() {
            *v /= self.mass(p);
        }
        out
    }

    /// Adjoint of [`filter`](Self::filter); the window is symmetric.
    fn filter_adjoint(&self, upstream: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = upstream.iter().enumerate().map(|(p, u)| u / self.mass(p)).collect();
        self.convolve(&scaled)
    }
}

fn channel_plane(image: &Image, ch: usize) -> Vec<f64> {
    image.data().iter().skip(ch).step_by(3).copied().collect()
}

struct SsimChannel {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    map: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn ssim_channel(window: &Window, x: &[f64], y: &[f64]) -> SsimChannel {
    let mu_x = window.filter(x);
    let mu_y = window.filter(y);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let e_xx = window.filter(&xx);
    let e_yy = window.filter(&yy);
    let e_xy = window.filter(&xy);
    let n = x.len();
    let mut out = SsimChannel {
        map: vec![0.0; n],
        a1: vec![0.0; n],
        a2: vec![0.0; n],
        b1: vec![0.0; n],
        b2: vec![0.0; n],
        mu_x,
        mu_y,
    };
    for p in 0..n {
        let (mx, my) = (out.mu_x[p], out.mu_y[p]);
        let var_x = e_xx[p] - mx * mx;
        let var_y = e_yy[p] - my * my;
        let cov = e_xy[p] - mx * my;
        out.a1[p] = 2.0 * mx * my + SSIM_C1;
        out.a2[p] = 2.0 * cov + SSIM_C2;
        out.b1[p] = mx * mx + my * my + SSIM_C1;
        out.b2[p] = var_x + var_y + SSIM_C2;
        out.map[p] = out.a1[p] * out.a2[p] / (out.b1[p] * out.b2[p]);
    }
    out
}

/// Mean SSIM over pixels and channels (11x11 Gaussian window, σ = 1.5).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_shape(a, b)?;
    let window = Window::new(a.width(), a.height());
    let mut total = 0.0;
    for ch in 0..3 {
        let c = ssim_channel(&window, &channel_plane(a, ch), &channel_plane(b, ch));
        total += c.map.iter().sum::<f64>();
    }
    Ok(total / (3 * a.pixel_count()) as f64)
}

/// `∂ssim(x, y)/∂x` scaled by `scale`, accumulated into `out`.
fn ssim_backward(x_img: &Image, y_img: &Image, scale: f64, out: &mut [f64]) {
    let window = Window::new(x_img.width(), x_img.height());
    let n = x_img.pixel_count();
    let upstream = scale / (3 * n) as f64;
    for ch in 0..3 {
        let x = channel_plane(x_img, ch);
        let y = channel_plane(y_img, ch);
        let c = ssim_channel(&window, &x, &y);
        let mut d_mu = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for p in 0..n {
            let (mx, my) = (c.mu_x[p], c.mu_y[p]);
            let s = c.map[p];
            let denom = c.b1[p] * c.b2[p];
            let ds_dmu = 2.0 * my * c.a2[p] / denom - s * 2.0 * mx / c.b1[p];
            let ds_dvar = -s / c.b2[p];
            let ds_dcov = 2.0 * c.a1[p] / denom;
            d_mu[p] = upstream * (ds_dmu - 2.0 * mx * ds_dvar - my * ds_dcov);
            d_exx[p] = upstream * ds_dvar;
            d_exy[p] = upstream * ds_dcov;
        }
        let g_mu = window.filter_adjoint(&d_mu);
        let g_xx = window.filter_adjoint(&d_exx);
        let g_xy = window.filter_adjoint(&d_exy);
        for p in 0..n {
            out[p * 3 + ch] += g_mu[p] + 2.0 * x[p] * g_xx[p] + y[p] * g_xy[p];
        }
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log₁₀(1 / MSE)` for signals in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

/// `Σ_g Π_axis s_g`.
pub fn volume_regularization(scales: &[[f64; 3]]) -> f64 {
    scales.iter().map(|s| s[0] * s[1] * s[2]).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub vol: f64,
    pub selective: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.8,
            ssim: 0.2,
            vol: 0.01,
            selective: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.vol, self.selective];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(crate::error::Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l1_term: f64,
    pub ssim_term: f64,
    pub vol_term: f64,
    pub selective_term: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub selective: SelectiveLoss,
}

/// Gradients of the total loss.
#[derive(Clone, Debug)]
pub struct LossGradients {
    /// `∂L/∂rendered`, laid out like [`Image`] data.
    pub d_rendered: Vec<f64>,
    /// `∂L/∂s_g` for each Gaussian's scale.
    pub d_scales: Vec<[f64; 3]>,
}

fn compose(weights: &LossWeights, l1: f64, ssim_term: f64, vol: f64, sel: f64) -> f64 {
    weights.l1 * l1 + weights.ssim * ssim_term + weights.vol * vol + weights.selective * sel
}

pub fn total_loss(
    rendered: &Image,
    truth: &Image,
    scales: &[[f64; 3]],
    weights: &LossWeights,
) -> Result<LossReport> {
    total_loss_with(rendered, truth, scales, weights, SglVariant::PerPixel, None)
}

pub fn total_loss_with(
    rendered: &Image,
    truth: &Image,
    scales: &[[f64; 3]],
    weights: &LossWeights,
    variant: SglVariant,
    frozen: Option<&SelectiveWeights>,
) -> Result<LossReport> {
    ensure_same_shape(rendered, truth)?;
    let l1_term = l1(rendered, truth)?;
    let ssim_term = 1.0 - ssim(rendered, truth)?;
    let vol_term = volume_regularization(scales);
    let selective = selective_gradient_loss_with(rendered, truth, variant, frozen)?;
    let total = compose(weights, l1_term, ssim_term, vol_term, selective.value);
    Ok(LossReport {
        l1_term,
        ssim_term,
        vol_term,
        selective_term: selective.value,
        total,
        weights: *weights,
        selective,
    })
}

/// Gradients of `report.total`, with the selective weight maps held at the
/// values recorded in `report`. A zero weight skips that term entirely.
pub fn total_loss_backward(
    rendered: &Image,
    truth: &Image,
    scales: &[[f64; 3]],
    report: &LossReport,
    variant: SglVariant,
) -> LossGradients {
    let w = &report.weights;
    let n = rendered.data().len();
    let mut d = vec![0.0; n];
    if w.l1 != 0.0 {
        let k = w.l1 / n as f64;
        for (g, (x, y)) in d.iter_mut().zip(rendered.data().iter().zip(truth.data())) {
            *g += k * sign(x - y);
        }
    }
    if w.ssim != 0.0 {
        ssim_backward(rendered, truth, -w.ssim, &mut d);
    }
    if w.selective != 0.0 {
        selective_backward(rendered, truth, &report.selective.weights, variant, w.selective, &mut d);
    }
    let d_scales = scales
        .iter()
        .map(|s| {
            if w.vol == 0.0 {
                [0.0; 3]
            } else {
                [w.vol * s[1] * s[2], w.vol * s[0] * s[2], w.vol * s[0] * s[1]]
            }
        })
        .collect();
    LossGradients {
        d_rendered: d,
        d_scales,
    }
}
