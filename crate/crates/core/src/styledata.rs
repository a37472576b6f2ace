//! Procedural style corpus and proxy alignment metrics.
//!
//! Content is the shape drawn in the middle of the canvas (a
//! fine-grained, high-frequency signal). Style is everything global: the
//! background color, the foreground palette, a linear illumination ramp and
//! the stroke thickness. All style cues live in the lowest spatial
//! frequencies.

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StyleDataError {
    #[error("no samples to score")]
    Empty,
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("image has {got} values, canvas expects {expected}")]
    ImageSize { got: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, StyleDataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 16,
            width: 16,
        }
    }
}

impl Canvas {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.pixels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: usize,
    pub name: String,
    pub background: [f64; 3],
    pub palette: [f64; 3],
    /// Unit direction of the illumination ramp in `(x, y)`.
    pub gradient_dir: [f64; 2],
    /// Ramp amplitude at the canvas edge, `<= 0.5`.
    pub gradient_amp: f64,
    pub stroke: usize,
}

impl StyleSpec {
    pub fn validate(&self) -> Result<()> {
        let in_range = |c: &[f64; 3]| c.iter().all(|v| (-1.0..=1.0).contains(v));
        if !in_range(&self.background) || !in_range(&self.palette) {
            return Err(StyleDataError::InvalidSpec(format!(
                "style {}: colors must lie in [-1, 1]",
                self.style_id
            )));
        }
        if !(0.0..=0.5).contains(&self.gradient_amp) {
            return Err(StyleDataError::InvalidSpec(format!(
                "style {}: gradient amplitude must lie in [0, 0.5]",
                self.style_id
            )));
        }
        let norm = self.gradient_dir[0].hypot(self.gradient_dir[1]);
        if (norm - 1.0).abs() > 1e-9 {
            return Err(StyleDataError::InvalidSpec(format!(
                "style {}: gradient direction must be a unit vector",
                self.style_id
            )));
        }
        if self.stroke == 0 {
            return Err(StyleDataError::InvalidSpec(format!(
                "style {}: stroke thickness must be >= 1",
                self.style_id
            )));
        }
        Ok(())
    }

    /// Background plus ramp everywhere, no shape.
    pub fn is_monochromatic(&self) -> bool {
        self.gradient_amp == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Diamond,
    ];

    /// Distance from `(dx, dy)` (relative to the center, in units of the
    /// shape radius) to the outline; positive inside.
    fn depth(self, dx: f64, dy: f64) -> f64 {
        match self {
            Shape::Circle => 1.0 - dx.hypot(dy),
            Shape::Square => {
                let a = 0.85;
                (a - dx.abs()).min(a - dy.abs())
            }
            Shape::Diamond => (1.0 - dx.abs() - dy.abs()) / std::f64::consts::SQRT_2,
            Shape::Cross => {
                let w = 0.38;
                let h = (1.0 - dx.abs()).min(w - dy.abs());
                let v = (w - dx.abs()).min(1.0 - dy.abs());
                h.max(v)
            }
            Shape::Triangle => {
                // apex up, y grows downward; inradius 0.5, circumradius 1
                let mut d = f64::INFINITY;
                for k in 0..3 {
                    let ang = -PI / 2.0 + k as f64 * 2.0 * PI / 3.0 + PI;
                    let (nx, ny) = (ang.cos(), ang.sin());
                    d = d.min(0.5 - (dx * nx + dy * ny));
                }
                d
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentSpec {
    pub content_id: usize,
    pub shape: Shape,
    /// Maximum center offset in pixels along each axis.
    pub center_jitter: f64,
    /// Maximum relative change of the radius.
    pub size_jitter: f64,
    /// Nominal radius as a fraction of the smaller canvas side.
    pub radius: f64,
}

impl ContentSpec {
    pub fn new(content_id: usize, shape: Shape) -> Self {
        Self {
            content_id,
            shape,
            center_jitter: 1.0,
            size_jitter: 0.1,
            radius: 0.3,
        }
    }

    /// Jitter-free copy.
    pub fn nominal(&self) -> Self {
        Self {
            center_jitter: 0.0,
            size_jitter: 0.0,
            ..*self
        }
    }

    /// Checks that the largest jittered shape stays one pixel away from the
    /// canvas border.
    pub fn validate(&self, canvas: &Canvas) -> Result<()> {
        let side = canvas.height.min(canvas.width) as f64;
        let reach = self.radius * side * (1.0 + self.size_jitter) + self.center_jitter;
        let half = (side - 1.0) / 2.0;
        if reach > half - 1.0 || self.radius <= 0.0 || self.size_jitter < 0.0 || self.center_jitter < 0.0 {
            return Err(StyleDataError::InvalidSpec(format!(
                "content {}: shape of reach {reach:.2} does not fit inside the canvas interior",
                self.content_id
            )));
        }
        Ok(())
    }
}

/// Shape mask after jitter; `true` marks stroke pixels.
pub fn shape_mask<R: Rng + ?Sized>(
    content: &ContentSpec,
    stroke: usize,
    canvas: &Canvas,
    rng: &mut R,
) -> Vec<bool> {
    let jx = rng.gen_range(-1.0..=1.0) * content.center_jitter;
    let jy = rng.gen_range(-1.0..=1.0) * content.center_jitter;
    let js = 1.0 + rng.gen_range(-1.0..=1.0) * content.size_jitter;
    mask_at(content.shape, content.radius * js, jx, jy, stroke, canvas)
}

fn mask_at(shape: Shape, radius_frac: f64, jx: f64, jy: f64, stroke: usize, canvas: &Canvas) -> Vec<bool> {
    let (h, w) = (canvas.height, canvas.width);
    let side = h.min(w) as f64;
    let r = radius_frac * side;
    let cx = (w as f64 - 1.0) / 2.0 + jx;
    let cy = (h as f64 - 1.0) / 2.0 + jy;
    let mut mask = vec![false; h * w];
    if r <= 0.0 {
        return mask;
    }
    for y in 0..h {
        for x in 0..w {
            let depth_px = shape.depth((x as f64 - cx) / r, (y as f64 - cy) / r) * r;
            mask[y * w + x] = depth_px >= 0.0 && depth_px < stroke as f64;
        }
    }
    mask
}

/// Illumination ramp value at every pixel; zero mean over the canvas.
pub fn ramp(style: &StyleSpec, canvas: &Canvas) -> Vec<f64> {
    let (h, w) = (canvas.height, canvas.width);
    let hx = ((w as f64 - 1.0) / 2.0).max(0.5);
    let hy = ((h as f64 - 1.0) / 2.0).max(0.5);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let qx = (x as f64 - (w as f64 - 1.0) / 2.0) / hx;
            let qy = (y as f64 - (h as f64 - 1.0) / 2.0) / hy;
            out.push(style.gradient_amp * (style.gradient_dir[0] * qx + style.gradient_dir[1] * qy));
        }
    }
    out
}

/// Composes background, shape and ramp into a channel-major image.
pub fn compose(style: &StyleSpec, mask: &[bool], canvas: &Canvas) -> Array1<f64> {
    let ramp = ramp(style, canvas);
    let n = canvas.pixels();
    let mut img = Array1::zeros(canvas.len());
    for c in 0..canvas.channels {
        let (bg, fg) = (style.background[c % 3], style.palette[c % 3]);
        for p in 0..n {
            let base = if mask[p] { fg } else { bg };
            img[c * n + p] = (base + ramp[p]).clamp(-1.0, 1.0);
        }
    }
    img
}

/// Renders one image, drawing jitter from `rng`.
pub fn render<R: Rng + ?Sized>(
    content: &ContentSpec,
    style: &StyleSpec,
    canvas: &Canvas,
    rng: &mut R,
) -> Array1<f64> {
    let mask = shape_mask(content, style.stroke, canvas, rng);
    compose(style, &mask, canvas)
}

/// The shipped style palette. Style 5 is reserved as the held-out
/// fine-tuning reference; it has a flat (monochromatic) background.
pub fn default_styles() -> Vec<StyleSpec> {
    let s = |id: usize, name: &str, bg: [f64; 3], fg: [f64; 3], dir: [f64; 2], amp: f64, stroke: usize| StyleSpec {
        style_id: id,
        name: name.to_string(),
        background: bg,
        palette: fg,
        gradient_dir: dir,
        gradient_amp: amp,
        stroke,
    };
    let diag = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        s(0, "paper", [0.7, 0.65, 0.5], [-0.7, -0.7, -0.6], [1.0, 0.0], 0.25, 1),
        s(1, "night", [-0.7, -0.7, -0.4], [0.7, 0.7, 0.2], [0.0, 1.0], 0.3, 2),
        s(2, "forest", [-0.4, 0.3, -0.4], [0.6, -0.3, 0.5], [diag, diag], 0.3, 3),
        s(3, "sunset", [0.55, -0.1, -0.5], [-0.3, 0.3, 0.6], [0.0, -1.0], 0.4, 2),
        s(4, "slate", [0.1, 0.45, 0.6], [0.8, -0.5, -0.6], [-diag, diag], 0.2, 16),
        s(5, "neon", [0.7, -0.7, 0.7], [-0.2, 0.8, -0.6], [1.0, 0.0], 0.0, 16),
    ]
}

pub const HELD_OUT_STYLE: usize = 5;

/// Uniformly drawn colours (kept inside `[-1, 1]` after the ramp), ramp
/// direction, ramp amplitude in `[0, 0.4)` and stroke from `{1, 2, 3, filled}`.
pub fn random_style<R: Rng + ?Sized>(style_id: usize, rng: &mut R) -> StyleSpec {
    let amp: f64 = rng.gen_range(0.0..0.4);
    let lim = 1.0 - amp;
    let mut color = || [rng.gen_range(-lim..lim), rng.gen_range(-lim..lim), rng.gen_range(-lim..lim)];
    let background = color();
    let palette = color();
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let stroke = [1, 2, 3, 16][rng.gen_range(0..4)];
    StyleSpec {
        style_id,
        name: format!("random{style_id}"),
        background,
        palette,
        gradient_dir: [angle.cos(), angle.sin()],
        gradient_amp: amp,
        stroke,
    }
}

pub fn default_contents() -> Vec<ContentSpec> {
    [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross]
        .into_iter()
        .enumerate()
        .map(|(i, s)| ContentSpec::new(i, s))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub x0: Array1<f64>,
    pub content_id: usize,
    /// `None` for images without a style label.
    pub style_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleCorpus {
    pub canvas: Canvas,
    pub contents: Vec<ContentSpec>,
    pub styles: Vec<StyleSpec>,
    /// Styles present in `images`.
    pub included_styles: Vec<usize>,
    pub per_pair: usize,
    pub seed: u64,
    pub images: Vec<DataPoint>,
}

impl StyleCorpus {
    /// `per_pair` renders of every (content, style) pair over
    /// `included_styles`, in content-major order. Image `i` draws its
    /// jitter from its own stream `i` of a generator seeded with `seed`.
    pub fn generate(
        canvas: Canvas,
        contents: Vec<ContentSpec>,
        styles: Vec<StyleSpec>,
        included_styles: &[usize],
        per_pair: usize,
        seed: u64,
    ) -> Result<Self> {
        if contents.is_empty() || included_styles.is_empty() || per_pair == 0 {
            return Err(StyleDataError::InvalidSpec(
                "need at least one content, one style and one image per pair".into(),
            ));
        }
        for c in &contents {
            c.validate(&canvas)?;
        }
        for s in &styles {
            s.validate()?;
        }
        for &s in included_styles {
            if s >= styles.len() {
                return Err(StyleDataError::InvalidSpec(format!("unknown style {s}")));
            }
        }
        let mut images = Vec::with_capacity(contents.len() * included_styles.len() * per_pair);
        for c in &contents {
            for &s in included_styles {
                for _ in 0..per_pair {
                    let mut rng = image_rng(seed, images.len() as u64);
                    images.push(DataPoint {
                        x0: render(c, &styles[s], &canvas, &mut rng),
                        content_id: c.content_id,
                        style_id: Some(s),
                    });
                }
            }
        }
        Ok(Self {
            canvas,
            contents,
            styles,
            included_styles: included_styles.to_vec(),
            per_pair,
            seed,
            images,
        })
    }

    /// Default contents and styles, every style except the held-out one.
    pub fn pretraining(per_pair: usize, seed: u64) -> Result<Self> {
        let styles = default_styles();
        let included: Vec<usize> = (0..styles.len()).filter(|&s| s != HELD_OUT_STYLE).collect();
        Self::generate(Canvas::default(), default_contents(), styles, &included, per_pair, seed)
    }

    /// References of a single style across all default contents.
    pub fn reference(style: usize, per_content: usize, seed: u64) -> Result<Self> {
        Self::generate(
            Canvas::default(),
            default_contents(),
            default_styles(),
            &[style],
            per_content,
            seed,
        )
    }

    /// One render per (content, random style) pair over `n_styles` styles
    /// drawn by [`random_style`] from `style_seed`, with the style label
    /// removed. Stands in for the uncaptioned bulk of a pretraining set.
    pub fn unlabeled(n_styles: usize, style_seed: u64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
        let styles: Vec<StyleSpec> = (0..n_styles).map(|i| random_style(i, &mut rng)).collect();
        let included: Vec<usize> = (0..n_styles).collect();
        let mut corpus = Self::generate(Canvas::default(), default_contents(), styles, &included, 1, seed)?;
        for d in corpus.images.iter_mut() {
            d.style_id = None;
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Generator for image `index` of a corpus seeded with `seed`.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Settings for [`style_score`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleMetric {
    /// Number of lowest non-DC Fourier frequencies per channel.
    pub k: usize,
    /// Renders per content in the reference set.
    pub refs_per_content: usize,
    pub color_weight: f64,
    pub color_scale: f64,
    pub spectrum_scale: f64,
    pub seed: u64,
}

impl Default for StyleMetric {
    fn default() -> Self {
        Self {
            k: 16,
            refs_per_content: 64,
            color_weight: 0.6,
            color_scale: 1.5,
            spectrum_scale: 1.0,
            seed: 0x5eed,
        }
    }
}

/// Lowest non-DC frequencies `(u, v)`, one per conjugate pair, ordered by
/// `u^2 + v^2` and then lexicographically.
pub fn low_frequencies(k: usize) -> Vec<(i64, i64)> {
    let mut f = Vec::new();
    let r = (k as f64).sqrt().ceil() as i64 + 2;
    for u in -r..=r {
        for v in -r..=r {
            // keep the half plane (v > 0) or (v == 0, u > 0)
            if v > 0 || (v == 0 && u > 0) {
                f.push((u, v));
            }
        }
    }
    f.sort_by_key(|&(u, v)| (u * u + v * v, u, v));
    f.truncate(k);
    f
}

/// Style features: border-ring mean color per channel followed by the
/// Fourier magnitudes (per channel, divided by the pixel count).
pub fn style_features(img: ArrayView1<f64>, canvas: &Canvas, k: usize) -> Vec<f64> {
    let (h, w, n) = (canvas.height, canvas.width, canvas.pixels());
    let freqs = low_frequencies(k);
    let mut feats = Vec::with_capacity(canvas.channels * (1 + k));
    for c in 0..canvas.channels {
        let ch = img.slice(ndarray::s![c * n..(c + 1) * n]);
        let (mut sum, mut cnt) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                    sum += ch[y * w + x];
                    cnt += 1;
                }
            }
        }
        feats.push(sum / cnt as f64);
    }
    for c in 0..canvas.channels {
        let ch = img.slice(ndarray::s![c * n..(c + 1) * n]);
        for &(u, v) in &freqs {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * PI * (u as f64 * x as f64 / w as f64 + v as f64 * y as f64 / h as f64);
                    let val = ch[y * w + x];
                    re += val * ang.cos();
                    im += val * ang.sin();
                }
            }
            feats.push(re.hypot(im) / n as f64);
        }
    }
    feats
}

/// Precomputed reference features of a style.
#[derive(Debug, Clone)]
pub struct StyleReference {
    pub canvas: Canvas,
    pub metric: StyleMetric,
    features: Vec<Vec<f64>>,
}

impl StyleReference {
    /// Renders the reference set: every default content, `refs_per_content`
    /// times each.
    pub fn new(style: &StyleSpec, canvas: Canvas, metric: StyleMetric) -> Self {
        let mut features = Vec::new();
        for (ci, content) in default_contents().iter().enumerate() {
            for j in 0..metric.refs_per_content {
                let mut rng = image_rng(metric.seed, (ci * metric.refs_per_content + j) as u64);
                let img = render(content, style, &canvas, &mut rng);
                features.push(style_features(img.view(), &canvas, metric.k));
            }
        }
        Self {
            canvas,
            metric,
            features,
        }
    }

    /// Normalized distance of one image to the nearest reference render.
    pub fn distance(&self, img: ArrayView1<f64>) -> f64 {
        let f = style_features(img, &self.canvas, self.metric.k);
        let nc = self.canvas.channels;
        let m = &self.metric;
        self.features
            .iter()
            .map(|r| {
                let dc = l2(&f[..nc], &r[..nc]) / m.color_scale;
                let ds = l2(&f[nc..], &r[nc..]) / m.spectrum_scale;
                m.color_weight * dc + (1.0 - m.color_weight) * ds
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Mean over samples of `1 - min(1, distance)`; in `[0, 1]`.
    pub fn score(&self, samples: &[ArrayView1<f64>]) -> Result<f64> {
        if samples.is_empty() {
            return Err(StyleDataError::Empty);
        }
        let expected = self.canvas.len();
        let mut total = 0.0;
        for s in samples {
            if s.len() != expected {
                return Err(StyleDataError::ImageSize {
                    got: s.len(),
                    expected,
                });
            }
            total += 1.0 - self.distance(*s).min(1.0);
        }
        Ok(total / samples.len() as f64)
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Style alignment of `samples` with `reference_style`, higher is better.
pub fn style_score(samples: &[ArrayView1<f64>], reference_style: &StyleSpec, canvas: &Canvas) -> Result<f64> {
    StyleReference::new(reference_style, *canvas, StyleMetric::default()).score(samples)
}

/// Template bank for shape classification.
#[derive(Debug, Clone)]
pub struct ContentClassifier {
    canvas: Canvas,
    /// `(shape, whitened unit-norm template)`
    templates: Vec<(Shape, Vec<f64>)>,
}

/// Removes the best-fit plane `a + b x + c y` from one channel.
fn remove_plane(ch: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = (h * w) as f64;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (mut mean, mut sx, mut sy, mut xx, mut yy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = ch[y * w + x];
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            mean += v;
            sx += v * dx;
            sy += v * dy;
            xx += dx * dx;
            yy += dy * dy;
        }
    }
    mean /= n;
    // centered coordinates on a full grid are orthogonal
    let (bx, by) = (sx / xx.max(1e-12), sy / yy.max(1e-12));
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(ch[y * w + x] - mean - bx * (x as f64 - cx) - by * (y as f64 - cy));
        }
    }
    out
}

impl ContentClassifier {
    /// Templates for every shape in `shapes` over a few strokes, radii and
    /// half-pixel shifts.
    pub fn new(shapes: &[Shape], canvas: Canvas) -> Self {
        let mut templates = Vec::new();
        let side = canvas.height.min(canvas.width);
        for &shape in shapes {
            for stroke in [1usize, 2, 3, side] {
                for radius in [0.27, 0.285, 0.3, 0.315, 0.33] {
                    for jy in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                        for jx in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                            let m = mask_at(shape, radius, jx, jy, stroke, &canvas);
                            let raw: Vec<f64> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                            let mut t = remove_plane(&raw, canvas.height, canvas.width);
                            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if norm > 0.0 {
                                t.iter_mut().for_each(|v| *v /= norm);
                                templates.push((shape, t));
                            }
                        }
                    }
                }
            }
        }
        Self { canvas, templates }
    }

    pub fn default_bank(canvas: Canvas) -> Self {
        let shapes: Vec<Shape> = default_contents().iter().map(|c| c.shape).collect();
        Self::new(&shapes, canvas)
    }

    /// Best-matching shape after per-channel plane removal, using the
    /// channel-pooled correlation `sqrt(sum_c <x_c, T>^2) / ||x||`.
    pub fn classify(&self, img: ArrayView1<f64>) -> Option<Shape> {
        let (h, w, n) = (self.canvas.height, self.canvas.width, self.canvas.pixels());
        let chans: Vec<Vec<f64>> = (0..self.canvas.channels)
            .map(|c| remove_plane(&img.slice(ndarray::s![c * n..(c + 1) * n]).to_vec(), h, w))
            .collect();
        let energy: f64 = chans.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if energy < 1e-9 {
            return None;
        }
        let mut best = (None, f64::NEG_INFINITY);
        for (shape, t) in &self.templates {
            let proj: f64 = chans
                .iter()
                .map(|ch| ch.iter().zip(t).map(|(a, b)| a * b).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt();
            let r = proj / energy;
            if r > best.1 {
                best = (Some(*shape), r);
            }
        }
        best.0
    }

    /// Fraction of samples classified as `expected`.
    pub fn score(&self, samples: &[ArrayView1<f64>], expected: Shape) -> Result<f64> {
        if samples.is_empty() {
            return Err(StyleDataError::Empty);
        }
        let hits = samples
            .iter()
            .filter(|s| self.classify(**s) == Some(expected))
            .count();
        Ok(hits as f64 / samples.len() as f64)
    }
}

/// Fraction of `samples` recognized as the shape of `expected_content`.
pub fn content_score(samples: &[ArrayView1<f64>], expected_content: &ContentSpec, canvas: &Canvas) -> Result<f64> {
    ContentClassifier::default_bank(*canvas).score(samples, expected_content.shape)
}
