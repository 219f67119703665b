//! Procedural cartoon-face dataset: a deterministic, redistributable stand-in
//! for lab face databases, with controllable identities, K expression
//! classes, and continuous expression intensity.
//!
//! Each identity is a handful of seeded geometry parameters (head aspect, eye
//! spacing and size, brow baseline, skin tone). Each expression class is a
//! fixed direction in (mouth curvature, brow angle, eye openness) space,
//! scaled by an intensity in [0, 1]; intensity 0 is the class-independent
//! neutral face. Rendering is pure float math with signed-distance
//! anti-aliasing, so identical inputs give bit-identical images.

use crate::image::Image;
use crate::manifest::{DatasetManifest, ManifestEntry};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("unsupported image size {0} (expected 32, 64, or 128)")]
    BadSize(usize),
    #[error("expression class {0} out of range (at most 7 classes)")]
    BadClass(usize),
    #[error("intensity {0} outside [0, 1]")]
    BadIntensity(f32),
    #[error("need at least 1 identity and 2 classes")]
    DegenerateSpec,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
}

/// Seeded per-identity geometry. Ranges are chosen so every face stays inside
/// the frame at every supported size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyIdentity {
    /// Horizontal head radius as a fraction of the vertical one, 0.80..0.98.
    pub face_aspect: f32,
    /// Distance between eye centers in unit coordinates, 0.17..0.27.
    pub eye_spacing: f32,
    /// Eye radius in unit coordinates, 0.035..0.060.
    pub eye_size: f32,
    /// Resting brow tilt in radians, -0.15..0.15.
    pub brow_baseline: f32,
    /// Resting mouth curvature in expression units, -0.35..0.35.
    pub mouth_baseline: f32,
    /// Head fill value in [-1,1] pixel units, 0.10..0.55.
    pub skin_tone: f32,
}

impl ToyIdentity {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut draw = |lo: f64, hi: f64| (lo + (hi - lo) * rng.gen::<f64>()) as f32;
        Self {
            face_aspect: draw(0.80, 0.98),
            eye_spacing: draw(0.17, 0.27),
            eye_size: draw(0.035, 0.060),
            brow_baseline: draw(-0.15, 0.15),
            mouth_baseline: draw(-0.35, 0.35),
            skin_tone: draw(0.10, 0.55),
        }
    }
}

/// One expression at one intensity. The class fixes a direction; intensity
/// scales it, with 0 giving the neutral geometry for every class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyExpressionSpec {
    pub class_index: usize,
    pub mouth_curvature: f32,
    pub brow_angle: f32,
    pub eye_openness: f32,
    pub intensity: f32,
}

/// Per-class geometry directions: (mouth curvature, brow angle, eye
/// openness). Distinct directions keep up to 7 classes separable.
const CLASS_AXES: [(f32, f32, f32); 7] = [
    (1.0, 0.0, 0.0),    // corners up
    (-1.0, 0.0, 0.0),   // corners down
    (0.0, 1.0, 0.6),    // brows raised, eyes widened
    (0.0, -1.0, -0.4),  // brows lowered, eyes narrowed
    (0.7, -0.7, 0.0),   // grin with lowered brows
    (-0.7, 0.7, 0.3),   // grimace with raised brows
    (0.0, 0.0, -1.0),   // eyes nearly shut
];

impl ToyExpressionSpec {
    pub fn for_class(class_index: usize, intensity: f32) -> Result<Self, ToyError> {
        if class_index >= CLASS_AXES.len() {
            return Err(ToyError::BadClass(class_index));
        }
        if !(0.0..=1.0).contains(&intensity) {
            return Err(ToyError::BadIntensity(intensity));
        }
        let (m, b, e) = CLASS_AXES[class_index];
        Ok(Self {
            class_index,
            mouth_curvature: m * intensity,
            brow_angle: b * intensity,
            eye_openness: e * intensity,
            intensity,
        })
    }
}

/// Full description of a generated dataset.
#[derive(Debug, Clone)]
pub struct ToyDatasetSpec {
    pub n_identities: usize,
    pub class_count: usize,
    pub intensities: Vec<f32>,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
}

/// Smoothstep edge coverage from a signed distance, ~1 pixel of feathering.
#[inline]
fn coverage(signed_dist: f32, px: f32) -> f32 {
    let t = (0.5 - signed_dist / px).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[inline]
fn blend(base: f32, ink: f32, cov: f32) -> f32 {
    base + (ink - base) * cov
}

/// Approximate signed distance to an axis-aligned ellipse boundary.
#[inline]
fn ellipse_dist(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> f32 {
    let nx = (x - cx) / rx;
    let ny = (y - cy) / ry;
    let f = (nx * nx + ny * ny).sqrt();
    (f - 1.0) * rx.min(ry)
}

/// Distance from a point to a segment.
#[inline]
fn segment_dist(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (ax + t * dx - px, ay + t * dy - py);
    (ex * ex + ey * ey).sqrt()
}

const BACKGROUND: f32 = -0.85;
const FEATURE_INK: f32 = -0.75;
const MOUTH_SEGMENTS: usize = 24;

/// Rasterizes one face. Pure function: identical arguments give bit-identical
/// images.
pub fn render(
    identity: &ToyIdentity,
    expr: &ToyExpressionSpec,
    size: usize,
) -> Result<Image, ToyError> {
    if !matches!(size, 32 | 64 | 128) {
        return Err(ToyError::BadSize(size));
    }
    let px = 1.0 / size as f32;
    let mut pixels = Array3::<f32>::zeros((1, size, size));

    // Head.
    let (head_cx, head_cy) = (0.5, 0.52);
    let head_ry = 0.42;
    let head_rx = head_ry * identity.face_aspect;

    // Eyes. Openness scales the vertical radius, floored so eyes never vanish.
    let eye_y = 0.42;
    let eye_dx = identity.eye_spacing / 2.0;
    let eye_ry = identity.eye_size * (1.0 + 0.8 * expr.eye_openness).max(0.15);

    // Brows: short segments above the eyes; expression tilts the inner ends,
    // mirrored left/right.
    let brow_half = 0.045 + identity.eye_size * 0.6;
    let brow_y = eye_y - 0.085;
    let brow_thickness = 0.013;
    let brow_tilt = identity.brow_baseline + 0.35 * expr.brow_angle;

    // Mouth: polyline through a parabola; positive curvature lifts the
    // corners relative to the center.
    let (mouth_cx, mouth_cy) = (0.5, 0.70);
    let mouth_half_w = 0.14;
    let mouth_thickness = 0.016;
    let mouth_pts: Vec<(f32, f32)> = (0..=MOUTH_SEGMENTS)
        .map(|i| {
            let t = 2.0 * i as f32 / MOUTH_SEGMENTS as f32 - 1.0;
            let x = mouth_cx + t * mouth_half_w;
            let curve = identity.mouth_baseline + expr.mouth_curvature;
            let y = mouth_cy + 0.16 * curve * (0.5 - t * t);
            (x, y)
        })
        .collect();

    for row in 0..size {
        for col in 0..size {
            let x = (col as f32 + 0.5) * px;
            let y = (row as f32 + 0.5) * px;
            let mut v = BACKGROUND;

            let d_head = ellipse_dist(x, y, head_cx, head_cy, head_rx, head_ry);
            v = blend(v, identity.skin_tone, coverage(d_head, px));

            for side in [-1.0f32, 1.0] {
                let ex = head_cx + side * eye_dx;
                let d_eye = ellipse_dist(x, y, ex, eye_y, identity.eye_size, eye_ry);
                v = blend(v, -0.7, coverage(d_eye, px));

                let tilt = side * brow_tilt;
                let (dx, dy) = (tilt.cos() * brow_half, tilt.sin() * brow_half);
                let d_brow =
                    segment_dist(x, y, ex - dx, brow_y - dy, ex + dx, brow_y + dy)
                        - brow_thickness;
                v = blend(v, -0.8, coverage(d_brow, px));
            }

            let mut d_mouth = f32::INFINITY;
            for w in mouth_pts.windows(2) {
                let d = segment_dist(x, y, w[0].0, w[0].1, w[1].0, w[1].1);
                if d < d_mouth {
                    d_mouth = d;
                }
            }
            v = blend(v, FEATURE_INK, coverage(d_mouth - mouth_thickness, px));

            pixels[[0, row, col]] = v.clamp(-1.0, 1.0);
        }
    }
    Ok(Image::new(pixels)?)
}

fn gray_to_channels(gray: &Image, channels: usize) -> Result<Image, ToyError> {
    if channels == 1 {
        return Ok(gray.clone());
    }
    // A fixed warm tint keeps the three channels distinct but consistent.
    let g = gray.pixels();
    let (_, h, w) = g.dim();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let v = g[[0, y, x]];
            out[[0, y, x]] = (v + 0.06).clamp(-1.0, 1.0);
            out[[1, y, x]] = v;
            out[[2, y, x]] = (v - 0.06).clamp(-1.0, 1.0);
        }
    }
    Ok(Image::new(out)?)
}

/// Renders every (identity, class, intensity) combination, writes the image
/// files plus a manifest, and returns the manifest. Per-identity rng
/// substreams are derived from (seed, identity index), and per-image noise
/// (amplitude <= 0.02) keeps reconstruction from collapsing to memorization.
pub fn generate_dataset(spec: &ToyDatasetSpec, out_dir: &Path) -> Result<DatasetManifest, ToyError> {
    if spec.n_identities < 1 || spec.class_count < 2 {
        return Err(ToyError::DegenerateSpec);
    }
    if spec.class_count > CLASS_AXES.len() {
        return Err(ToyError::BadClass(spec.class_count - 1));
    }
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|source| ToyError::Io {
        path: image_dir.display().to_string(),
        source,
    })?;

    let mut entries = Vec::new();
    for id_index in 0..spec.n_identities {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + id_index as u64);
        let identity = ToyIdentity::sample(&mut rng);
        let subject_id = format!("id_{id_index:04}");

        for class in 0..spec.class_count {
            for (slot, &intensity) in spec.intensities.iter().enumerate() {
                let expr = ToyExpressionSpec::for_class(class, intensity)?;
                let clean = render(&identity, &expr, spec.size)?;
                let mut pixels = clean.pixels().to_owned();
                for v in pixels.iter_mut() {
                    *v = (*v + 0.02 * (2.0 * rng.gen::<f64>() - 1.0) as f32).clamp(-1.0, 1.0);
                }
                let noisy = gray_to_channels(&Image::new(pixels)?, spec.channels)?;

                let file = format!("images/{subject_id}_c{class}_i{slot}.png");
                noisy.save_png(&out_dir.join(&file))?;
                entries.push(ManifestEntry {
                    path: file,
                    subject_id: subject_id.clone(),
                    class_index: class,
                });
            }
        }
    }

    let manifest = DatasetManifest {
        class_count: spec.class_count,
        image_size: spec.size,
        channels: spec.channels,
        entries,
    };
    manifest
        .save(&out_dir.join("dataset.manifest"))
        .map_err(|e| ToyError::Io {
            path: out_dir.join("dataset.manifest").display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        })?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_for_test(seed: u64) -> ToyIdentity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToyIdentity::sample(&mut rng)
    }

    #[test]
    fn render_is_deterministic() {
        let id = identity_for_test(3);
        let expr = ToyExpressionSpec::for_class(0, 0.8).unwrap();
        let a = render(&id, &expr, 32).unwrap();
        let b = render(&id, &expr, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn neutral_face_is_class_independent() {
        let id = identity_for_test(5);
        let happy0 = render(&id, &ToyExpressionSpec::for_class(0, 0.0).unwrap(), 32).unwrap();
        let sad0 = render(&id, &ToyExpressionSpec::for_class(1, 0.0).unwrap(), 32).unwrap();
        assert_eq!(happy0, sad0);
    }

    #[test]
    fn opposite_classes_differ_in_the_mouth() {
        let id = identity_for_test(7);
        let happy = render(&id, &ToyExpressionSpec::for_class(0, 1.0).unwrap(), 32).unwrap();
        let sad = render(&id, &ToyExpressionSpec::for_class(1, 1.0).unwrap(), 32).unwrap();

        let l1 = happy
            .pixels()
            .iter()
            .zip(sad.pixels().iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / happy.pixels().len() as f32;
        assert!(l1 > 0.01, "mean L1 {l1}");

        // Mouth band: rows around y = 0.70.
        let band = |img: &Image| {
            let p = img.pixels().to_owned();
            let size = img.size();
            let (r0, r1) = ((size * 60) / 100, (size * 80) / 100);
            let mut sum = 0.0;
            let mut n = 0;
            for r in r0..r1 {
                for c in 0..size {
                    sum += p[[0, r, c]];
                    n += 1;
                }
            }
            sum / n as f32
        };
        assert!((band(&happy) - band(&sad)).abs() > 1e-3);
    }

    #[test]
    fn all_supported_sizes_render() {
        let id = identity_for_test(1);
        let expr = ToyExpressionSpec::for_class(2, 0.5).unwrap();
        for size in [32, 64, 128] {
            let img = render(&id, &expr, size).unwrap();
            assert_eq!(img.size(), size);
        }
        assert!(render(&id, &expr, 48).is_err());
    }

    #[test]
    fn identities_are_distinguishable() {
        let neutral = ToyExpressionSpec::for_class(0, 0.0).unwrap();
        let mut renders = Vec::new();
        for seed in 0..10 {
            renders.push(render(&identity_for_test(seed), &neutral, 32).unwrap());
        }
        for i in 0..renders.len() {
            for j in (i + 1)..renders.len() {
                let l1 = renders[i]
                    .pixels()
                    .iter()
                    .zip(renders[j].pixels().iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f32>();
                assert!(l1 > 0.0, "identities {i} and {j} render identically");
            }
        }
    }

    #[test]
    fn dataset_generation_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyDatasetSpec {
            n_identities: 4,
            class_count: 3,
            intensities: vec![0.6, 1.0],
            size: 32,
            channels: 1,
            seed: 11,
        };
        let m = generate_dataset(&spec, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 4 * 3 * 2);
        assert_eq!(m.class_histogram(), vec![8, 8, 8]);

        let dir2 = tempfile::tempdir().unwrap();
        let m2 = generate_dataset(&spec, dir2.path()).unwrap();
        assert_eq!(m, m2);
        for e in &m.entries {
            let a = std::fs::read(dir.path().join(&e.path)).unwrap();
            let b = std::fs::read(dir2.path().join(&e.path)).unwrap();
            assert_eq!(a, b, "{} differs between runs", e.path);
        }
    }

    #[test]
    fn rgb_dataset_has_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyDatasetSpec {
            n_identities: 1,
            class_count: 2,
            intensities: vec![1.0],
            size: 32,
            channels: 3,
            seed: 2,
        };
        let m = generate_dataset(&spec, dir.path()).unwrap();
        let img = Image::load_png(&dir.path().join(&m.entries[0].path), 32, 3).unwrap();
        assert_eq!(img.channels(), 3);
    }

    #[test]
    fn nearest_centroid_baseline_beats_chance_without_saturating() {
        // Classes must be learnable from pixels but not trivially so.
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyDatasetSpec {
            n_identities: 24,
            class_count: 4,
            intensities: vec![0.5, 1.0],
            size: 32,
            channels: 1,
            seed: 13,
        };
        let m = generate_dataset(&spec, dir.path()).unwrap();

        let load = |e: &ManifestEntry| {
            Image::load_png(&dir.path().join(&e.path), 32, 1)
                .unwrap()
                .pixels()
                .to_owned()
        };
        // Identity split: first 18 identities train, last 6 test.
        let is_train = |e: &ManifestEntry| e.subject_id.as_str() < "id_0018";

        let mut centroids = vec![Array3::<f32>::zeros((1, 32, 32)); 4];
        let mut counts = [0usize; 4];
        for e in m.entries.iter().filter(|e| is_train(e)) {
            centroids[e.class_index] = &centroids[e.class_index] + &load(e);
            counts[e.class_index] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            *c /= n as f32;
        }

        let test: Vec<_> = m.entries.iter().filter(|e| !is_train(e)).collect();
        let mut correct = 0;
        for e in &test {
            let img = load(e);
            let best = centroids
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let d: f32 = (&img - c).iter().map(|v| v * v).sum();
                    (k, d)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            if best == e.class_index {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.25, "baseline accuracy {acc} not above chance");
        assert!(acc < 1.0, "baseline accuracy saturated; task degenerate");
    }
}
