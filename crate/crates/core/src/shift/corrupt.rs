use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{
    io_err, CorruptionKind, CorruptionSpec, GeneratedStudy, Image, ShiftError, StudyManifest,
    ELASTIC_SIGMA,
};
use crate::exec::Execution;
use crate::model::{Predicate, StudyKind};
use crate::rng;

/// Applies `spec` to `image`. The random field depends only on
/// `(spec.seed, image_id, spec.kind)`, so every level of one kind reuses the
/// same draw scaled by the level's parameter.
pub fn corrupt(image: &Image, spec: &CorruptionSpec, image_id: &str) -> Result<Image, ShiftError> {
    if image.channels != 1 && image.channels != 3 {
        return Err(ShiftError::UnsupportedImage {
            channels: image.channels,
        });
    }
    let p = spec.parameter();
    let kind_index = CorruptionKind::ALL
        .iter()
        .position(|k| *k == spec.kind)
        .expect("kind listed") as u64;
    let stream = || rng::stream(spec.seed, &[rng::fnv1a(image_id), kind_index]);
    let mut out = match spec.kind {
        CorruptionKind::BrightnessUp | CorruptionKind::BrightnessDown => {
            let mut o = image.clone();
            o.data.iter_mut().for_each(|v| *v += p as f32);
            o
        }
        CorruptionKind::GaussianNoise => {
            let mut g = stream();
            let mut o = image.clone();
            for v in &mut o.data {
                let z: f64 = g.sample(StandardNormal);
                *v = (f64::from(*v) + p * z) as f32;
            }
            o
        }
        CorruptionKind::MotionBlur => motion_blur(image, p as usize),
        CorruptionKind::Elastic => elastic(image, p, &mut stream()),
    };
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Averages `length` taps along the 45° diagonal through each pixel.
fn motion_blur(image: &Image, length: usize) -> Image {
    let half = (length as isize - 1) / 2;
    let w = 1.0 / length as f64;
    Image::from_fn(image.height, image.width, image.channels, |y, x, c| {
        let (y, x) = (y as isize, x as isize);
        let sum: f64 = (-half..=half)
            .map(|t| f64::from(image.at_clamped(y - t, x + t, c)))
            .sum();
        (sum * w) as f32
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian smoothing of an `h x w` field with edge replication.
fn smooth(field: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * field[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * rows[clamp(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn bilinear(image: &Image, y: f64, x: f64, c: usize) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let p = |dy: isize, dx: isize| f64::from(image.at_clamped(y0 + dy, x0 + dx, c));
    (1.0 - fy) * ((1.0 - fx) * p(0, 0) + fx * p(0, 1)) + fy * ((1.0 - fx) * p(1, 0) + fx * p(1, 1))
}

/// Elastic warp: a uniform `[-1, 1]` displacement field per axis, smoothed
/// with a unit-mass Gaussian, scaled by `alpha` and applied by bilinear
/// resampling.
fn elastic<R: Rng>(image: &Image, alpha: f64, g: &mut R) -> Image {
    let (h, w) = (image.height, image.width);
    let mut raw_y = Vec::with_capacity(h * w);
    let mut raw_x = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        raw_y.push(g.random_range(-1.0..=1.0));
        raw_x.push(g.random_range(-1.0..=1.0));
    }
    let kernel = gaussian_kernel(ELASTIC_SIGMA);
    let dy = smooth(&raw_y, h, w, &kernel);
    let dx = smooth(&raw_x, h, w, &kernel);
    Image::from_fn(h, w, image.channels, |y, x, c| {
        let i = y * w + x;
        bilinear(image, y as f64 + alpha * dy[i], x as f64 + alpha * dx[i], c) as f32
    })
}

/// Corrupts every `(image, spec)` pair. Output is indexed
/// `[image][spec]` and identical under either execution mode.
pub fn corrupt_batch(
    images: &[(String, Image)],
    specs: &[CorruptionSpec],
    exec: Execution,
) -> Result<Vec<Vec<Image>>, ShiftError> {
    let flat = exec.map_range(images.len() * specs.len(), |j| {
        let (id, img) = &images[j / specs.len()];
        corrupt(img, &specs[j % specs.len()], id)
    });
    let mut flat = flat.into_iter();
    (0..images.len())
        .map(|_| flat.by_ref().take(specs.len()).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptedImage {
    pub id: String,
    pub origin: String,
    pub kind: CorruptionKind,
    pub level: u8,
    pub path: PathBuf,
}

/// Variant id of `origin` under `(kind, level)`.
pub fn variant_id(origin: &str, kind: CorruptionKind, level: u8) -> String {
    format!("{origin}__{}_{level}", kind.as_str())
}

/// Corrupts every PNG in `input` (sorted by file name; the file stem is the
/// image id) at each `(kind, level)`, writes `<id>__<kind>_<level>.png` into
/// `output` and returns one study per `(kind, level)`.
pub fn corrupt_directory(
    input: &Path,
    kinds: &[CorruptionKind],
    levels: &[u8],
    seed: u64,
    output: &Path,
    exec: Execution,
) -> Result<(Vec<CorruptedImage>, StudyManifest), ShiftError> {
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(io_err(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let specs = kinds
        .iter()
        .flat_map(|&k| levels.iter().map(move |&l| CorruptionSpec::new(k, l, seed)))
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(output).map_err(io_err(output))?;

    let ids: Vec<String> = files
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let images = exec
        .map_slice(&files, |p| Image::load_png(p))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let jobs = files.len() * specs.len();
    let written = exec.map_range(jobs, |j| -> Result<CorruptedImage, ShiftError> {
        let (fi, si) = (j / specs.len(), j % specs.len());
        let spec = &specs[si];
        let out = corrupt(&images[fi], spec, &ids[fi])?;
        let id = variant_id(&ids[fi], spec.kind, spec.level);
        let path = output.join(format!("{id}.png"));
        out.save_png(&path)?;
        Ok(CorruptedImage {
            id,
            origin: ids[fi].clone(),
            kind: spec.kind,
            level: spec.level,
            path,
        })
    });
    let written: Vec<CorruptedImage> = written.into_iter().collect::<Result<_, _>>()?;

    let studies = specs
        .iter()
        .map(|spec| GeneratedStudy {
            name: spec.study_name(),
            kind: StudyKind::Cor,
            predicate: Predicate::and(vec![
                Predicate::eq("shift_kind", spec.kind.as_str()),
                Predicate::eq("intensity", spec.level.to_string()),
            ]),
            parameters: spec.parameters(),
            members: ids
                .iter()
                .map(|id| variant_id(id, spec.kind, spec.level))
                .collect(),
        })
        .collect();
    Ok((written, StudyManifest { studies }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: CorruptionKind, level: u8) -> CorruptionSpec {
        CorruptionSpec::new(kind, level, 11).unwrap()
    }

    fn textured(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |y, x, _| {
            0.5 + 0.3 * ((x as f32 * 0.7).sin() * (y as f32 * 0.45).cos())
        })
    }

    #[test]
    fn brightness_is_exact_before_clamping() {
        let img = Image::filled(16, 16, 3, 0.3);
        for level in 1..=5u8 {
            let beta = CorruptionKind::BrightnessUp.parameter(level).unwrap();
            let up = corrupt(&img, &spec(CorruptionKind::BrightnessUp, level), "a").unwrap();
            assert!((up.mean() - (0.3 + beta)).abs() < 1e-6);
            let down = corrupt(&img, &spec(CorruptionKind::BrightnessDown, level), "a").unwrap();
            assert!((down.mean() - (0.3 - beta).max(0.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn output_is_clamped() {
        let img = Image::filled(8, 8, 1, 0.9);
        let out = corrupt(&img, &spec(CorruptionKind::BrightnessUp, 5), "a").unwrap();
        assert!(out.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unsupported_channel_count() {
        let img = Image::filled(4, 4, 2, 0.5);
        assert!(matches!(
            corrupt(&img, &spec(CorruptionKind::Elastic, 1), "a"),
            Err(ShiftError::UnsupportedImage { channels: 2 })
        ));
    }

    #[test]
    fn blur_and_elastic_preserve_mean_of_padded_images() {
        let img = Image::from_fn(96, 96, 1, |y, x, _| {
            let inside = (24..72).contains(&y) && (24..72).contains(&x);
            if inside {
                0.5 + 0.4 * ((x + 2 * y) % 7) as f32 / 7.0
            } else {
                0.0
            }
        });
        for kind in [CorruptionKind::MotionBlur, CorruptionKind::Elastic] {
            for level in 1..=5 {
                let out = corrupt(&img, &spec(kind, level), "pad").unwrap();
                let rel = (out.mean() - img.mean()).abs() / img.mean();
                assert!(rel < 0.02, "{kind} level {level}: {rel}");
            }
        }
    }

    fn noise_image(h: usize, w: usize) -> Image {
        let mut g = rng::stream(99, &[]);
        let data = (0..h * w * 3).map(|_| rand::Rng::random::<f32>(&mut g)).collect();
        Image::new(h, w, 3, data)
    }

    fn blob(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |y, x, _| {
            let (dy, dx) = (y as f32 - h as f32 / 2.0, x as f32 - w as f32 / 3.0);
            0.1 + 0.8 * (-(dy * dy + dx * dx) / 120.0).exp()
        })
    }

    #[test]
    fn severity_is_monotone() {
        for img in [noise_image(48, 48), blob(64, 64)] {
            for kind in CorruptionKind::ALL {
                let changes: Vec<f64> = (1..=5)
                    .map(|l| corrupt(&img, &spec(kind, l), "m").unwrap().mean_abs_diff(&img))
                    .collect();
                assert!(
                    changes.windows(2).all(|w| w[0] <= w[1]),
                    "{kind}: {changes:?}"
                );
            }
        }
    }

    #[test]
    fn blur_of_diagonal_constant_lines_is_identity() {
        // Constant along the anti-diagonal direction the kernel averages over.
        let img = Image::from_fn(20, 20, 1, |y, x, _| ((x + y) % 5) as f32 / 5.0);
        let out = corrupt(&img, &spec(CorruptionKind::MotionBlur, 1), "d").unwrap();
        for y in 3..17 {
            for x in 3..17 {
                assert!((out.at(y, x, 0) - img.at(y, x, 0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_matches_serial_and_is_keyed_by_id() {
        let imgs: Vec<(String, Image)> = (0..4).map(|i| (format!("img{i}"), textured(24, 24))).collect();
        let specs: Vec<CorruptionSpec> = CorruptionKind::ALL.iter().map(|&k| spec(k, 3)).collect();
        let par = corrupt_batch(&imgs, &specs, Execution::Parallel).unwrap();
        let seq = corrupt_batch(&imgs, &specs, Execution::Sequential).unwrap();
        assert_eq!(par, seq);
        let rev: Vec<(String, Image)> = imgs.iter().rev().cloned().collect();
        let par_rev = corrupt_batch(&rev, &specs, Execution::Parallel).unwrap();
        assert_eq!(par_rev[0], par[3]);
        // Same pixels, different ids: noise differs.
        assert_ne!(par[0][4], par[1][4]);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        fs::create_dir_all(&input).unwrap();
        for i in 0..3 {
            textured(16, 16).save_png(&input.join(format!("case{i}.png"))).unwrap();
        }
        let out = dir.path().join("out");
        let (written, manifest) = corrupt_directory(
            &input,
            &[CorruptionKind::GaussianNoise, CorruptionKind::Elastic],
            &[1, 5],
            4,
            &out,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(written.len(), 12);
        assert!(out.join("case1__elastic_5.png").exists());
        assert_eq!(manifest.studies.len(), 4);
        assert_eq!(manifest.studies[0].name, "cor:gaussian_noise:1");
        assert_eq!(manifest.studies[0].members[2], "case2__gaussian_noise_1");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_shape_and_range(h in 1usize..20, w in 1usize..20, three in any::<bool>(),
                                k in 0usize..5, level in 1u8..=5, seed in any::<u64>()) {
            let c = if three { 3 } else { 1 };
            let img = Image::from_fn(h, w, c, |y, x, ch| ((y * 7 + x * 3 + ch) % 11) as f32 / 10.0);
            let s = CorruptionSpec::new(CorruptionKind::ALL[k], level, seed).unwrap();
            let out = corrupt(&img, &s, "p").unwrap();
            prop_assert_eq!((out.height, out.width, out.channels), (h, w, c));
            prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(&out, &corrupt(&img, &s, "p").unwrap());
        }
    }
}
