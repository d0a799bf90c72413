//! Synthetic multimodal scenes: random ellipses/polygons/blobs over a
//! gradient background, an auxiliary modality rendered from the same
//! geometry (depth-like disparities or thermal-like temperatures), and
//! controllable degradation of the auxiliary channel (noise, speckle,
//! affine misalignment).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XmsError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
    Blob,
    /// Each object draws its family at random.
    #[default]
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    /// Per-object constant disparity over a background ramp.
    #[default]
    DepthLike,
    /// Per-object temperature, blurred.
    ThermalLike,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shape_family: ShapeFamily,
    pub texture_amplitude: f64,
    pub background_gradient: f64,
    pub aux_mode: AuxMode,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 3,
            shape_family: ShapeFamily::Mixed,
            texture_amplitude: 0.05,
            background_gradient: 0.25,
            aux_mode: AuxMode::DepthLike,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 {
            return Err(XmsError::Config(format!(
                "scene extents {}x{} must be positive multiples of 32",
                self.height, self.width
            )));
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return Err(XmsError::Config("object count range must be 1 <= min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AffineSpec {
    pub dx: f64,
    pub dy: f64,
    pub rotation_deg: f64,
    pub scale: f64,
}

impl Default for AffineSpec {
    fn default() -> Self {
        AffineSpec { dx: 0.0, dy: 0.0, rotation_deg: 0.0, scale: 1.0 }
    }
}

impl AffineSpec {
    pub fn is_identity(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.rotation_deg == 0.0 && self.scale == 1.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct DegradationSpec {
    pub noise_sigma: f64,
    pub speckle_sigma: f64,
    pub affine: AffineSpec,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 || self.speckle_sigma < 0.0 || self.affine.scale <= 0.0 {
            return Err(XmsError::Config(
                "noise/speckle sigmas must be >= 0 and affine scale > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One training/evaluation sample. All channels live in [0,1]; the mask is
/// strictly binary with 1%..60% foreground.
#[derive(Debug, Clone)]
pub struct Sample {
    pub rgb: Tensor<f64>,
    pub aux: Tensor<f64>,
    pub gt: Tensor<f64>,
    pub degradation: DegradationSpec,
    pub seed: u64,
}

enum ObjectShape {
    Ellipse { rx: f64, ry: f64, angle: f64 },
    Polygon { pts: Vec<(f64, f64)> },
    Blob { r: f64, m1: f64, m2: f64, p1: f64, p2: f64 },
}

struct SceneObject {
    cx: f64,
    cy: f64,
    shape: ObjectShape,
    color: [f64; 3],
    aux_value: f64,
}

impl SceneObject {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match &self.shape {
            ObjectShape::Ellipse { rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            ObjectShape::Polygon { pts } => {
                // convex polygon, vertices ordered by angle: inside iff the
                // point is on the same side of every edge
                let n = pts.len();
                for i in 0..n {
                    let (x0, y0) = pts[i];
                    let (x1, y1) = pts[(i + 1) % n];
                    let cross = (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0);
                    if cross < 0.0 {
                        return false;
                    }
                }
                true
            }
            ObjectShape::Blob { r, m1, m2, p1, p2 } => {
                let rho = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let boundary = r * (1.0 + m1 * (2.0 * theta + p1).sin() + m2 * (3.0 * theta + p2).sin());
                rho <= boundary
            }
        }
    }
}

fn draw_objects(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Vec<SceneObject> {
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let extent = spec.height.min(spec.width) as f64;
    (0..count)
        .map(|_| {
            let cx = rng.gen_range(0.2..0.8) * spec.width as f64;
            let cy = rng.gen_range(0.2..0.8) * spec.height as f64;
            let base_r = rng.gen_range(0.10..0.22) * extent;
            let family = match spec.shape_family {
                ShapeFamily::Mixed => match rng.gen_range(0..3) {
                    0 => ShapeFamily::Ellipse,
                    1 => ShapeFamily::Polygon,
                    _ => ShapeFamily::Blob,
                },
                f => f,
            };
            let shape = match family {
                ShapeFamily::Ellipse => ObjectShape::Ellipse {
                    rx: base_r * rng.gen_range(0.6..1.4),
                    ry: base_r * rng.gen_range(0.6..1.4),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                },
                ShapeFamily::Polygon => {
                    let k = rng.gen_range(3..=6);
                    let mut angles: Vec<f64> =
                        (0..k).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
                    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let pts = angles
                        .into_iter()
                        .map(|a| {
                            let rr = base_r * rng.gen_range(0.7..1.3);
                            (rr * a.cos(), rr * a.sin())
                        })
                        .collect();
                    ObjectShape::Polygon { pts }
                }
                ShapeFamily::Blob => ObjectShape::Blob {
                    r: base_r,
                    m1: rng.gen_range(0.0..0.28),
                    m2: rng.gen_range(0.0..0.2),
                    p1: rng.gen_range(0.0..std::f64::consts::TAU),
                    p2: rng.gen_range(0.0..std::f64::consts::TAU),
                },
                ShapeFamily::Mixed => unreachable!(),
            };
            SceneObject {
                cx,
                cy,
                shape,
                color: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                aux_value: rng.gen_range(0.55..0.95),
            }
        })
        .collect()
}

fn box_blur(data: &mut [f64], h: usize, w: usize) {
    let src = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += src[yy as usize * w + xx as usize];
                        cnt += 1.0;
                    }
                }
            }
            data[y * w + x] = acc / cnt;
        }
    }
}

/// Inverse-warp with bilinear sampling and border replication. The affine
/// is translation + rotation + scale about the image center.
pub fn misalign(aux: &Tensor<f64>, affine: &AffineSpec) -> Result<Tensor<f64>> {
    let (c, h, w) = aux.dims3()?;
    if affine.is_identity() {
        return Ok(aux.clone());
    }
    let theta = affine.rotation_deg.to_radians();
    let (s, co) = theta.sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f64; c * h * w];
    for y in 0..h {
        for x in 0..w {
            // invert: undo translation, then rotation/scale about center
            let px = x as f64 - cx - affine.dx;
            let py = y as f64 - cy - affine.dy;
            let sx = (co * px + s * py) / affine.scale + cx;
            let sy = (-s * px + co * py) / affine.scale + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = (sx - x0, sy - y0);
            let xi = |v: f64| -> usize { v.clamp(0.0, (w - 1) as f64) as usize };
            let yi = |v: f64| -> usize { v.clamp(0.0, (h - 1) as f64) as usize };
            let (x0c, x1c, y0c, y1c) = (xi(x0), xi(x0 + 1.0), yi(y0), yi(y0 + 1.0));
            for ch in 0..c {
                let base = ch * h * w;
                let d = aux.data();
                let v = (1.0 - fy) * ((1.0 - fx) * d[base + y0c * w + x0c] + fx * d[base + y0c * w + x1c])
                    + fy * ((1.0 - fx) * d[base + y1c * w + x0c] + fx * d[base + y1c * w + x1c]);
                out[ch * h * w + y * w + x] = v;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

fn render_attempt(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w) = (spec.height, spec.width);
    let n = h * w;

    // background: per-channel linear gradient
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (dir.cos(), dir.sin());
    let base: [f64; 3] = [
        rng.gen_range(0.2..0.7),
        rng.gen_range(0.2..0.7),
        rng.gen_range(0.2..0.7),
    ];
    let grad = spec.background_gradient;
    let objects = draw_objects(rng, spec);

    let mut rgb = vec![0.0f64; 3 * n];
    let mut gt = vec![0.0f64; n];
    let mut aux = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            let t = (gx * x as f64 / w as f64 + gy * y as f64 / h as f64 + 1.0) / 2.0;
            let idx = y * w + x;
            let mut color = [
                (base[0] + grad * (t - 0.5)).clamp(0.0, 1.0),
                (base[1] + grad * (t - 0.5)).clamp(0.0, 1.0),
                (base[2] + grad * (t - 0.5)).clamp(0.0, 1.0),
            ];
            // depth-like background: shallow vertical ramp well below the
            // object disparities; thermal-like: cool uniform background
            let mut av = match spec.aux_mode {
                AuxMode::DepthLike => 0.10 + 0.30 * y as f64 / h as f64,
                AuxMode::ThermalLike => 0.20 + 0.08 * t,
            };
            for obj in &objects {
                if obj.contains(x as f64, y as f64) {
                    color = obj.color;
                    av = obj.aux_value;
                    gt[idx] = 1.0;
                }
            }
            rgb[idx] = color[0];
            rgb[n + idx] = color[1];
            rgb[2 * n + idx] = color[2];
            aux[idx] = av;
        }
    }
    // texture on rgb only
    if spec.texture_amplitude > 0.0 {
        for v in rgb.iter_mut() {
            *v = (*v + spec.texture_amplitude * (rng.gen_range(0.0..1.0) - 0.5) * 2.0).clamp(0.0, 1.0);
        }
    }
    if matches!(spec.aux_mode, AuxMode::ThermalLike) {
        box_blur(&mut aux, h, w);
        box_blur(&mut aux, h, w);
    }
    (rgb, gt, aux)
}

/// Deterministic sample generation: same (seed, specs) always produce the
/// same bytes. Scenes whose foreground falls outside 1%..60% are redrawn
/// from a fresh stream, at most 100 times.
pub fn generate_sample(seed: u64, scene: &SceneSpec, degr: &DegradationSpec) -> Result<Sample> {
    scene.validate()?;
    degr.validate()?;
    let (h, w) = (scene.height, scene.width);
    let n = h * w;
    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let (rgb, gt, aux1) = render_attempt(&mut rng, scene);
        let fg = gt.iter().sum::<f64>() / n as f64;
        if !(0.01..=0.60).contains(&fg) {
            continue;
        }
        // degrade the single-channel aux: misalign, speckle, noise, clamp
        let aux_t = Tensor::new(vec![1, h, w], aux1)?;
        let mut aux = misalign(&aux_t, &degr.affine)?.into_data();
        if degr.speckle_sigma > 0.0 {
            let dist = Normal::new(0.0, degr.speckle_sigma).expect("sigma checked");
            for v in aux.iter_mut() {
                *v *= 1.0 + dist.sample(&mut rng);
            }
        }
        if degr.noise_sigma > 0.0 {
            let dist = Normal::new(0.0, degr.noise_sigma).expect("sigma checked");
            for v in aux.iter_mut() {
                *v += dist.sample(&mut rng);
            }
        }
        for v in aux.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        // replicate to three channels, matching the rgb layout
        let mut aux3 = Vec::with_capacity(3 * n);
        for _ in 0..3 {
            aux3.extend_from_slice(&aux);
        }
        return Ok(Sample {
            rgb: Tensor::new(vec![3, h, w], rgb)?,
            aux: Tensor::new(vec![3, h, w], aux3)?,
            gt: Tensor::new(vec![1, h, w], gt)?,
            degradation: degr.clone(),
            seed,
        });
    }
    Err(XmsError::Invalid(format!(
        "could not satisfy 1%..60% foreground within 100 attempts (seed {seed})"
    )))
}
