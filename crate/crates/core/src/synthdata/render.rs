use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Label};
use crate::rng;

/// Capture-device analogs, in leave-one-device-out order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeviceId {
    H100,
    #[serde(rename = "DALSA")]
    Dalsa,
    LG2200,
    AI1000,
    LG4000,
    AD100,
}

impl DeviceId {
    pub const ALL: [DeviceId; 6] =
        [DeviceId::H100, DeviceId::Dalsa, DeviceId::LG2200, DeviceId::AI1000, DeviceId::LG4000, DeviceId::AD100];

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceId::H100 => "H100",
            DeviceId::Dalsa => "DALSA",
            DeviceId::LG2200 => "LG2200",
            DeviceId::AI1000 => "AI1000",
            DeviceId::LG4000 => "LG4000",
            DeviceId::AD100 => "AD100",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Format { what: "device", detail: format!("unknown device `{s}`") })
    }

    pub fn profile(self) -> DeviceProfile {
        let p = |blur_sigma, gain, bias, noise_std, vignette| DeviceProfile {
            device: self,
            blur_sigma,
            gain,
            bias,
            noise_std,
            vignette,
        };
        match self {
            DeviceId::H100 => p(0.6, 1.0, 0.0, 0.02, 0.10),
            DeviceId::Dalsa => p(1.0, 0.9, 0.05, 0.03, 0.20),
            DeviceId::LG2200 => p(0.8, 1.1, -0.05, 0.04, 0.15),
            DeviceId::AI1000 => p(0.4, 0.95, 0.02, 0.015, 0.05),
            DeviceId::LG4000 => p(0.5, 1.05, 0.0, 0.025, 0.25),
            DeviceId::AD100 => p(1.2, 0.85, 0.08, 0.05, 0.30),
        }
    }
}

/// Optical and sensor character of a device, applied after the scene is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeviceProfile {
    pub device: DeviceId,
    /// Gaussian blur standard deviation, pixels.
    pub blur_sigma: f64,
    pub gain: f64,
    pub bias: f64,
    pub noise_std: f64,
    /// Relative darkening at the image corners, in [0, 1].
    pub vignette: f64,
}

/// Intermediate images of one render, in pipeline order.
#[derive(Clone, Debug)]
pub struct RenderStages {
    /// Scene before the lens overlay.
    pub eye: GrayImage,
    /// Scene with the lens overlay (equal to `eye` for real samples).
    pub scene: GrayImage,
    pub blurred: GrayImage,
    pub gained: GrayImage,
    pub noisy: GrayImage,
    /// Vignetted and clamped to [0, 1].
    pub output: GrayImage,
    /// Iris annulus, normalized to the image side.
    pub pupil_radius: f64,
    pub iris_radius: f64,
    pub center: (f64, f64),
}

/// Angular period count of the lens lattice.
const LATTICE_SPOKES: f64 = 10.0;

struct Wave {
    amp: f64,
    angular: f64,
    radial: f64,
    phase_a: f64,
    phase_r: f64,
}

struct Plane {
    amp: f64,
    kx: f64,
    ky: f64,
    phase: f64,
}

/// Deterministic iris-like image; see [`render_stages`].
pub fn render_iris(identity: u64, label: Label, group: u8, device: DeviceId, size: usize) -> Result<GrayImage> {
    Ok(render_stages(identity, label, group, device, size)?.output)
}

/// Renders every stage: dark pupil, textured iris, bright sclera; a regular
/// annular lattice over the iris for fakes; then device blur, gain/bias,
/// additive noise and vignette. Group 1 shifts the texture band upward.
pub fn render_stages(identity: u64, label: Label, group: u8, device: DeviceId, size: usize) -> Result<RenderStages> {
    if size < 32 || !size.is_multiple_of(2) {
        return Err(Error::Invalid(format!("image size must be even and at least 32, got {size}")));
    }
    if group > 1 {
        return Err(Error::Invalid(format!("group must be 0 or 1, got {group}")));
    }
    let s = size as f64;
    let mut r = rng::stream(identity, rng::key(&[0x1815]));
    let cx = 0.5 + r.random_range(-0.02..0.02);
    let cy = 0.5 + r.random_range(-0.02..0.02);
    let pupil = r.random_range(0.14..0.2);
    let iris = r.random_range(0.34..0.38);
    let sclera = r.random_range(0.78..0.9);
    let iris_base = r.random_range(0.35..0.55);
    let pupil_level = r.random_range(0.04..0.12);

    let (ang_lo, ang_hi, rad_lo, rad_hi) = if group == 0 { (2, 7, 0.5, 2.0) } else { (11, 17, 2.5, 4.5) };
    let waves: Vec<Wave> = (0..6)
        .map(|_| Wave {
            amp: r.random_range(0.02..0.06),
            angular: r.random_range(ang_lo..ang_hi) as f64,
            radial: r.random_range(rad_lo..rad_hi),
            phase_a: r.random_range(0.0..2.0 * PI),
            phase_r: r.random_range(0.0..2.0 * PI),
        })
        .collect();
    // band-limited noise: plane waves with wavelengths inside the group's band
    let (wl_lo, wl_hi) = if group == 0 { (0.12, 0.3) } else { (0.05, 0.1) };
    let planes: Vec<Plane> = (0..8)
        .map(|_| {
            let wl = r.random_range(wl_lo..wl_hi);
            let dir = r.random_range(0.0..2.0 * PI);
            Plane {
                amp: r.random_range(0.01..0.03),
                kx: 2.0 * PI / wl * dir.cos(),
                ky: 2.0 * PI / wl * dir.sin(),
                phase: r.random_range(0.0..2.0 * PI),
            }
        })
        .collect();
    let lens_strength = r.random_range(0.18..0.32);

    let mut eye = vec![0.0; size * size];
    let mut lens = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s;
            let v = (y as f64 + 0.5) / s;
            let (dx, dy) = (u - cx, v - cy);
            let rho = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let i = y * size + x;
            eye[i] = if rho < pupil {
                pupil_level
            } else if rho <= iris {
                let t = (rho - pupil) / (iris - pupil);
                let radial: f64 = waves
                    .iter()
                    .map(|w| w.amp * (w.angular * theta + w.phase_a).cos() * (2.0 * PI * w.radial * t + w.phase_r).cos())
                    .sum();
                let grain: f64 = planes.iter().map(|p| p.amp * (p.kx * u + p.ky * v + p.phase).cos()).sum();
                iris_base + radial + grain
            } else {
                sclera
            };
            if label == Label::Fake && rho >= pupil && rho <= iris {
                let t = (rho - pupil) / (iris - pupil);
                let spokes = 0.5 + 0.5 * (LATTICE_SPOKES * theta).cos();
                let rings = 0.5 - 0.5 * (2.0 * PI * 1.5 * t).cos();
                lens[i] = lens_strength * spokes * rings;
            }
        }
    }
    let scene: Vec<f64> = eye.iter().zip(&lens).map(|(a, b)| a + b).collect();

    let prof = device.profile();
    let blurred = gaussian_blur(&scene, size, prof.blur_sigma);
    let gained: Vec<f64> = blurred.iter().map(|v| v * prof.gain + prof.bias).collect();
    let mut nr = rng::stream(identity, rng::key(&[0x2015e, device as u64]));
    let normal = Normal::new(0.0, prof.noise_std).map_err(|e| Error::Invalid(e.to_string()))?;
    let noisy: Vec<f64> = gained.iter().map(|v| v + normal.sample(&mut nr)).collect();
    let half_diag2 = 0.5;
    let mut output = noisy.clone();
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s - 0.5;
            let v = (y as f64 + 0.5) / s - 0.5;
            let fall = 1.0 - prof.vignette * (u * u + v * v) / half_diag2;
            let i = y * size + x;
            output[i] = (output[i] * fall).clamp(0.0, 1.0);
        }
    }
    let img = |p: Vec<f64>| GrayImage { width: size, height: size, pixels: p };
    Ok(RenderStages {
        eye: img(eye),
        scene: img(scene),
        blurred: img(blurred),
        gained: img(gained),
        noisy: img(noisy),
        output: img(output),
        pupil_radius: pupil,
        iris_radius: iris,
        center: (cx, cy),
    })
}

/// Separable Gaussian blur with edge clamping; kernel radius ceil(3σ).
pub fn gaussian_blur(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clampi = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * src[y * size + clampi(x as isize + k as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clampi(y as isize + k as isize - radius) * size + x])
                .sum();
        }
    }
    out
}
