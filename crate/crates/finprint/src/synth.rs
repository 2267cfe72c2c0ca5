//! Synthetic spot-pattern dataset generation.
//!
//! Each identity is a constellation of dark spots on a bright head-shaped
//! ellipse; the constellation is the identity, the way natural melanin
//! patterns are for real fish. Identities are generated with a separability
//! guarantee (some spot of one identity lies farther than a spot diameter
//! from every spot of the other), rendered to grayscale canvases, then
//! expanded with the three dataset augmentations: tilting, vertical shift,
//! and brightness scaling. Train/test splitting happens per original image,
//! so an original and its augmented copies always land in the same split.
//!
//! Everything is driven by named RNG sub-streams, which makes a dataset
//! directory byte-reproducible from `(seed, params)` alone.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io;
use crate::rng::RngState;
use crate::types::{ManifestEntry, Sample, Split};

/// Head ellipse semi-axes in unit coordinates.
const ELLIPSE_A: f64 = 0.42;
const ELLIPSE_B: f64 = 0.34;
/// Canvas background outside the head.
const BACKGROUND: f64 = 0.06;
/// Softening band width of the ellipse boundary, in units of the
/// normalized ellipse equation.
const EDGE_SOFTNESS: f64 = 0.08;

/// One dark spot: center and radius in unit coordinates, darkening in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spot {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub intensity: f64,
}

/// A renderable identity: its spot constellation and head brightness.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub identity: u32,
    pub spots: Vec<Spot>,
    pub base_brightness: f64,
}

/// Knobs for dataset expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Maximum tilt (rotation about the image center), degrees.
    pub tilt_max_deg: f64,
    /// Maximum vertical shift as a fraction of image height.
    pub vshift_max_frac: f64,
    /// Multiplicative brightness range; must bracket 1.
    pub brightness_range: (f64, f64),
    /// Gaussian pixel noise applied at render time.
    pub noise_sigma: f64,
    /// Augmented copies per original image.
    pub copies_per_image: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            tilt_max_deg: 15.0,
            vshift_max_frac: 0.10,
            brightness_range: (0.7, 1.3),
            noise_sigma: 0.02,
            copies_per_image: 5,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.brightness_range;
        if !(lo <= 1.0 && 1.0 <= hi) {
            return Err(Error::Config(format!(
                "brightness range ({lo}, {hi}) must bracket 1"
            )));
        }
        if self.tilt_max_deg < 0.0 || self.vshift_max_frac < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("augmentation magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// Full dataset recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub n_identities: usize,
    pub imgs_per_id: usize,
    /// Canvas `(H, W)`; grayscale output.
    pub size: (usize, usize),
    pub spots_per_identity: usize,
    pub augment: AugmentParams,
    /// Fraction of original images (per identity) that go to the train split.
    pub split_frac: f64,
    /// Open-set protocol: split whole identities instead of images.
    pub split_by_identity: bool,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n_identities: 40,
            imgs_per_id: 30,
            size: (64, 64),
            spots_per_identity: 12,
            augment: AugmentParams::default(),
            split_frac: 0.9,
            split_by_identity: false,
        }
    }
}

/// Directed separation: how far the most isolated spot of `a` sits from all
/// spots of `b` (max over `a`'s spots of the min distance to `b`'s spots).
pub fn directed_separation(a: &IdentitySpec, b: &IdentitySpec) -> f64 {
    a.spots
        .iter()
        .map(|sa| {
            b.spots
                .iter()
                .map(|sb| ((sa.cx - sb.cx).powi(2) + (sa.cy - sb.cy).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Two specs are separable when either direction exceeds a spot diameter.
pub fn are_separable(a: &IdentitySpec, b: &IdentitySpec) -> bool {
    let rmax = a
        .spots
        .iter()
        .chain(&b.spots)
        .map(|s| s.r)
        .fold(0.0, f64::max);
    let thr = 2.0 * rmax;
    directed_separation(a, b) > thr || directed_separation(b, a) > thr
}

const GEN_MAX_ATTEMPTS: usize = 200;

/// Generate `n` identity specs satisfying the separability guarantee.
///
/// Deterministic in `rng`. Errors when an identity cannot be placed within
/// a bounded number of attempts.
pub fn gen_identities(n: usize, spots_per_identity: usize, rng: &RngState) -> Result<Vec<IdentitySpec>> {
    if n < 1 || spots_per_identity < 1 {
        return Err(Error::Config("need at least one identity and one spot".into()));
    }
    let mut specs: Vec<IdentitySpec> = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.stream(&format!("id/{i}")).rng();
        let mut placed = false;
        for _ in 0..GEN_MAX_ATTEMPTS {
            let spec = draw_spec(i as u32, spots_per_identity, &mut r);
            if specs.iter().all(|s| are_separable(s, &spec)) {
                specs.push(spec);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place a separable identity after {GEN_MAX_ATTEMPTS} attempts \
                 (identity {i}); use fewer spots per identity or fewer identities"
            )));
        }
    }
    Ok(specs)
}

fn draw_spec(identity: u32, n_spots: usize, r: &mut impl Rng) -> IdentitySpec {
    let base_brightness = r.random_range(0.65..0.85);
    let mut spots = Vec::with_capacity(n_spots);
    for _ in 0..n_spots {
        // Keep spot centers comfortably inside the head ellipse.
        let (cx, cy) = loop {
            let cx = r.random_range(0.5 - ELLIPSE_A..0.5 + ELLIPSE_A);
            let cy = r.random_range(0.5 - ELLIPSE_B..0.5 + ELLIPSE_B);
            let q = ((cx - 0.5) / (ELLIPSE_A * 0.85)).powi(2)
                + ((cy - 0.5) / (ELLIPSE_B * 0.85)).powi(2);
            if q <= 1.0 {
                break (cx, cy);
            }
        };
        let radius = 0.05 * r.random_range(0.8..1.2);
        let intensity = r.random_range(0.6..1.0);
        spots.push(Spot {
            cx,
            cy,
            r: radius,
            intensity,
        });
    }
    IdentitySpec {
        identity,
        spots,
        base_brightness,
    }
}

/// Render a spec to a grayscale `(H, W, 1)` canvas.
///
/// Anti-aliased dark spots on a bright head ellipse, plus Gaussian pixel
/// noise of the given sigma (skipped entirely when zero); values clamped to
/// `[0,1]`. The returned sample is tagged `Train`; dataset builders reassign
/// the split.
pub fn render(
    spec: &IdentitySpec,
    size: (usize, usize),
    noise_sigma: f64,
    sample_id: u64,
    rng: &RngState,
) -> Result<Sample> {
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("canvas {h}x{w} too small; need at least 16x16")));
    }
    let aa = 1.5 / (h.min(w) as f64); // ~1.5 px anti-alias band in unit coords
    let mut pixels = Array3::zeros((h, w, 1));
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let q = ((u - 0.5) / ELLIPSE_A).powi(2) + ((v - 0.5) / ELLIPSE_B).powi(2);
            let mask = ((1.0 - q) / EDGE_SOFTNESS).clamp(0.0, 1.0);
            let mut dark: f64 = 0.0;
            for s in &spec.spots {
                let d = ((u - s.cx).powi(2) + (v - s.cy).powi(2)).sqrt();
                let coverage = ((s.r - d) / aa + 0.5).clamp(0.0, 1.0);
                dark = dark.max(coverage * s.intensity);
            }
            pixels[(y, x, 0)] =
                BACKGROUND + (spec.base_brightness - BACKGROUND) * mask * (1.0 - dark);
        }
    }
    if noise_sigma > 0.0 {
        let mut r = rng.rng();
        for p in pixels.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut r);
            *p += noise_sigma * n;
        }
    }
    pixels.mapv_inplace(|p| p.clamp(0.0, 1.0));
    Ok(Sample {
        sample_id,
        identity: spec.identity,
        pixels,
        split: Split::Train,
        augmented_from: None,
    })
}

/// Tilt (rotation about the center), vertical shift, and brightness scaling
/// in one resampling pass. Bilinear interpolation with replicated edges;
/// the identity transform `(0, 0, 1)` reproduces the input bit-for-bit.
pub fn transform_image(
    pixels: &Array3<f64>,
    tilt_deg: f64,
    vshift_frac: f64,
    brightness: f64,
) -> Array3<f64> {
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let theta = tilt_deg.to_radians();
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let dy = vshift_frac * h as f64;
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            // Undo the shift, then the rotation, to find the source point.
            let ys = y as f64 - dy;
            let rx = x as f64 - cx;
            let ry = ys - cy;
            let sx = cx + cos_t * rx + sin_t * ry;
            let sy = cy - sin_t * rx + cos_t * ry;
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            let sy = sy.clamp(0.0, h as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ch in 0..c {
                let p00 = pixels[(y0, x0, ch)];
                let p10 = pixels[(y0, x1, ch)];
                let p01 = pixels[(y1, x0, ch)];
                let p11 = pixels[(y1, x1, ch)];
                let top = (1.0 - fx) * p00 + fx * p10;
                let bot = (1.0 - fx) * p01 + fx * p11;
                let v = ((1.0 - fy) * top + fy * bot) * brightness;
                out[(y, x, ch)] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Produce `copies_per_image` augmented samples of `s`.
///
/// Each copy draws one tilt, one vertical shift, and one brightness factor
/// from its own sub-stream of `rng`; ids are assigned sequentially from
/// `first_id`. Identity and split are preserved and `augmented_from` points
/// back at the source.
pub fn augment(s: &Sample, p: &AugmentParams, rng: &RngState, first_id: u64) -> Vec<Sample> {
    (0..p.copies_per_image)
        .map(|k| {
            let mut r = rng.stream(&format!("copy/{k}")).rng();
            let tilt = r.random_range(-p.tilt_max_deg..=p.tilt_max_deg);
            let vshift = r.random_range(-p.vshift_max_frac..=p.vshift_max_frac);
            let brightness = r.random_range(p.brightness_range.0..=p.brightness_range.1);
            Sample {
                sample_id: first_id + k as u64,
                identity: s.identity,
                pixels: transform_image(&s.pixels, tilt, vshift, brightness),
                split: s.split,
                augmented_from: Some(s.sample_id),
            }
        })
        .collect()
}

/// Generate, render, augment, split, and write a dataset.
///
/// Output layout: `out_dir/manifest.jsonl` plus one FNT1 tensor per sample
/// under `out_dir/tensors/`. Splitting is stratified per identity over
/// original images (augmented copies follow their original); with
/// `split_by_identity` whole identities are assigned instead.
pub fn build_dataset(
    params: &DatasetParams,
    out_dir: impl AsRef<Path>,
    rng: &RngState,
) -> Result<Vec<ManifestEntry>> {
    let out_dir = out_dir.as_ref();
    params.augment.validate()?;
    if !(params.split_frac > 0.0 && params.split_frac < 1.0) {
        return Err(Error::Config(format!(
            "split_frac must lie in (0,1), got {}",
            params.split_frac
        )));
    }
    if params.imgs_per_id < 1 {
        return Err(Error::Config("imgs_per_id must be at least 1".into()));
    }
    let specs = gen_identities(params.n_identities, params.spots_per_identity, &rng.stream("ids"))?;

    // Split decisions, stratified per identity over original images.
    let n = params.n_identities;
    let imgs = params.imgs_per_id;
    let train_ids: Vec<bool> = if params.split_by_identity {
        let n_train = ((n as f64 * params.split_frac).round() as usize).clamp(1, n.max(2) - 1);
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut rng.stream("split-ids").rng());
        let mut flags = vec![false; n];
        for &i in order.iter().take(n_train) {
            flags[i] = true;
        }
        flags
    } else {
        Vec::new()
    };
    let split_of = |identity: usize, img: usize| -> Split {
        if params.split_by_identity {
            if train_ids[identity] {
                Split::Train
            } else {
                Split::Test
            }
        } else {
            // Deterministic per-identity shuffle of original image indices.
            let mut order: Vec<usize> = (0..imgs).collect();
            shuffle(&mut order, &mut rng.stream(&format!("split/{identity}")).rng());
            let n_train = if imgs == 1 {
                1
            } else {
                ((imgs as f64 * params.split_frac).round() as usize).clamp(1, imgs - 1)
            };
            let rank = order.iter().position(|&o| o == img).unwrap();
            if rank < n_train {
                Split::Train
            } else {
                Split::Test
            }
        }
    };

    // Sample ids are a pure function of (identity, image, copy) so the
    // render/augment jobs can run in parallel without coordination.
    let block = 1 + params.augment.copies_per_image as u64;
    let jobs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..imgs).map(move |j| (i, j)))
        .collect();
    let rendered: Result<Vec<Vec<Sample>>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let orig_id = (i * imgs + j) as u64 * block;
            let mut orig = render(
                &specs[i],
                params.size,
                params.augment.noise_sigma,
                orig_id,
                &rng.stream(&format!("render/{i}/{j}")),
            )?;
            orig.split = split_of(i, j);
            let copies = augment(
                &orig,
                &params.augment,
                &rng.stream(&format!("aug/{orig_id}")),
                orig_id + 1,
            );
            let mut group = Vec::with_capacity(1 + copies.len());
            group.push(orig);
            group.extend(copies);
            Ok(group)
        })
        .collect();
    let rendered = rendered?;

    let tensors_dir = out_dir.join("tensors");
    std::fs::create_dir_all(&tensors_dir).map_err(|e| Error::io(&tensors_dir, e))?;
    let mut entries = Vec::new();
    for group in &rendered {
        for s in group {
            let rel = format!("tensors/{:06}.fnt", s.sample_id);
            io::write_sample_tensor(out_dir.join(&rel), s)?;
            entries.push(ManifestEntry {
                sample_id: s.sample_id,
                identity: s.identity,
                path: rel,
                split: s.split,
                augmented_from: s.augmented_from,
            });
        }
    }
    io::write_manifest(out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

/// Fisher-Yates with draws from the supplied generator.
fn shuffle<T>(xs: &mut [T], r: &mut impl Rng) {
    for i in (1..xs.len()).rev() {
        let j = r.random_range(0..=i);
        xs.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn one_identity_trivially_separable() {
        let specs = gen_identities(1, 8, &RngState::new(1).stream("synth")).unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].spots.len(), 8);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_identities(2, 10, &RngState::new(5).stream("synth")).unwrap();
        let b = gen_identities(2, 10, &RngState::new(5).stream("synth")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forty_identities_pairwise_separable() {
        let specs = gen_identities(40, 12, &RngState::new(7).stream("synth")).unwrap();
        for i in 0..specs.len() {
            for j in (i + 1)..specs.len() {
                assert!(
                    are_separable(&specs[i], &specs[j]),
                    "identities {i} and {j} not separable"
                );
            }
        }
    }

    #[test]
    fn render_deterministic_without_noise() {
        let spec = &gen_identities(1, 6, &RngState::new(2).stream("synth")).unwrap()[0];
        let r = RngState::new(2).stream("render");
        let a = render(spec, (32, 32), 0.0, 0, &r).unwrap();
        let b = render(spec, (32, 32), 0.0, 0, &r).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn zero_intensity_spots_render_blank_head() {
        let mut spec = gen_identities(1, 4, &RngState::new(3).stream("synth")).unwrap()[0].clone();
        for s in &mut spec.spots {
            s.intensity = 0.0;
        }
        let img = render(&spec, (32, 32), 0.0, 0, &RngState::new(0)).unwrap();
        let mut blank = spec.clone();
        blank.spots.clear();
        blank.spots.push(Spot {
            cx: 0.5,
            cy: 0.5,
            r: 0.0,
            intensity: 0.0,
        });
        let ref_img = render(&blank, (32, 32), 0.0, 0, &RngState::new(0)).unwrap();
        assert_eq!(img.pixels, ref_img.pixels);
    }

    #[test]
    fn mean_pixel_within_sanity_bounds() {
        let specs = gen_identities(10, 12, &RngState::new(11).stream("synth")).unwrap();
        let mut count = 0;
        for (i, spec) in specs.iter().enumerate() {
            for j in 0..10 {
                let s = render(
                    spec,
                    (64, 64),
                    AugmentParams::default().noise_sigma,
                    0,
                    &RngState::new(11).stream(&format!("noise/{i}/{j}")),
                )
                .unwrap();
                let mean = s.pixels.iter().sum::<f64>() / s.pixels.len() as f64;
                assert!(
                    (0.2..=0.9).contains(&mean),
                    "render {i}/{j} mean {mean} out of range"
                );
                assert!(s.pixels_in_range());
                count += 1;
            }
        }
        assert_eq!(count, 100);
    }

    #[test]
    fn augment_zero_copies_is_empty() {
        let spec = &gen_identities(1, 4, &RngState::new(4).stream("synth")).unwrap()[0];
        let s = render(spec, (32, 32), 0.0, 0, &RngState::new(4)).unwrap();
        let p = AugmentParams {
            copies_per_image: 0,
            ..AugmentParams::default()
        };
        assert!(augment(&s, &p, &RngState::new(4).stream("aug"), 1).is_empty());
    }

    #[test]
    fn identity_transform_is_exact() {
        let spec = &gen_identities(1, 4, &RngState::new(8).stream("synth")).unwrap()[0];
        let s = render(spec, (24, 24), 0.0, 0, &RngState::new(8)).unwrap();
        let t = transform_image(&s.pixels, 0.0, 0.0, 1.0);
        assert_eq!(t, s.pixels);
    }

    #[test]
    fn default_augment_preserves_identity_and_range() {
        let spec = &gen_identities(1, 6, &RngState::new(9).stream("synth")).unwrap()[0];
        let s = render(spec, (32, 32), 0.0, 7, &RngState::new(9)).unwrap();
        let copies = augment(&s, &AugmentParams::default(), &RngState::new(9).stream("aug"), 100);
        assert_eq!(copies.len(), 5);
        for (k, c) in copies.iter().enumerate() {
            assert_eq!(c.identity, s.identity);
            assert_eq!(c.augmented_from, Some(7));
            assert_eq!(c.sample_id, 100 + k as u64);
            assert!(c.pixels_in_range());
        }
    }

    #[test]
    fn dataset_counts_and_split_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let params = DatasetParams {
            n_identities: 10,
            imgs_per_id: 10,
            size: (16, 16),
            spots_per_identity: 6,
            augment: AugmentParams {
                noise_sigma: 0.0,
                ..AugmentParams::default()
            },
            split_frac: 0.9,
            split_by_identity: false,
        };
        let entries = build_dataset(&params, dir.path(), &RngState::new(13)).unwrap();
        assert_eq!(entries.len(), 600); // 10 ids x 10 imgs x (1 + 5)
        let train = entries.iter().filter(|e| e.split == Split::Train).count();
        let test = entries.iter().filter(|e| e.split == Split::Test).count();
        assert_eq!(train, 540);
        assert_eq!(test, 60);
        // Every identity appears in both splits.
        for id in 0..10u32 {
            assert!(entries.iter().any(|e| e.identity == id && e.split == Split::Train));
            assert!(entries.iter().any(|e| e.identity == id && e.split == Split::Test));
        }
        // Augmented samples inherit their original's split and identity.
        for e in &entries {
            if let Some(orig) = e.augmented_from {
                let o = entries.iter().find(|x| x.sample_id == orig).unwrap();
                assert_eq!(o.split, e.split);
                assert_eq!(o.identity, e.identity);
                assert_eq!(o.augmented_from, None);
            }
        }
    }

    #[test]
    fn dataset_directory_is_byte_reproducible() {
        let params = DatasetParams {
            n_identities: 2,
            imgs_per_id: 2,
            size: (16, 16),
            spots_per_identity: 4,
            augment: AugmentParams {
                copies_per_image: 2,
                ..AugmentParams::default()
            },
            split_frac: 0.5,
            split_by_identity: false,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_dataset(&params, d1.path(), &RngState::new(99)).unwrap();
        build_dataset(&params, d2.path(), &RngState::new(99)).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m1, m2);
        for entry in std::fs::read_dir(d1.path().join("tensors")).unwrap() {
            let p1 = entry.unwrap().path();
            let p2 = d2.path().join("tensors").join(p1.file_name().unwrap());
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap(), "{p1:?}");
        }
    }

    #[test]
    fn loaded_dataset_matches_written_one() {
        let dir = tempfile::tempdir().unwrap();
        let params = DatasetParams {
            n_identities: 2,
            imgs_per_id: 2,
            size: (16, 16),
            spots_per_identity: 4,
            augment: AugmentParams {
                copies_per_image: 1,
                noise_sigma: 0.0,
                ..AugmentParams::default()
            },
            split_frac: 0.5,
            split_by_identity: false,
        };
        let entries = build_dataset(&params, dir.path(), &RngState::new(3)).unwrap();
        let ds = crate::io::load_dataset(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ds.len(), entries.len());
        for (s, e) in ds.samples.iter().zip(&entries) {
            assert_eq!(s.sample_id, e.sample_id);
            assert_eq!(s.identity, e.identity);
            assert_eq!(s.split, e.split);
            assert_eq!(s.shape(), (16, 16, 1));
        }
    }
}
