//! Dataset ingestion from labeled directories, deterministic splits,
//! baseline online augmentation, and the synthetic two-class generator
//! used by the desk-scale experiments.
//!
//! On-disk layout: `root/<class_name>/<id>.pgm` (binary 8-bit P5), with
//! optional split list files holding one id (`class_name/stem`) per line.

use std::path::{Path, PathBuf};

use crate::config::SplitConfig;
use crate::pnm::{read_p5, write_p5, PnmError};
use crate::raster::GrayImage;
use crate::rng::{fnv1a, Rng};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("class directory {path} holds no .pgm images")]
    EmptyClass { path: String },
    #[error("dataset root {path} has no class directories")]
    NoClasses { path: String },
    #[error("split list {list} names unknown sample '{id}'")]
    MissingId { list: String, id: String },
    #[error("invalid split: {0}")]
    BadSplit(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One labeled grayscale image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: GrayImage,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Load every class directory under `root`, scale pixels to [0, 1], resize
/// to `input_size`, and split per `split`.
pub fn load_dataset(
    root: &Path,
    split: &SplitConfig,
    seed: u64,
    input_size: usize,
) -> Result<Dataset, DataError> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses {
            path: root.display().to_string(),
        });
    }
    let classes: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().to_string())
        .collect();

    let mut per_class: Vec<Vec<Sample>> = Vec::with_capacity(classes.len());
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "pgm").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DataError::EmptyClass {
                path: dir.display().to_string(),
            });
        }
        let mut samples = Vec::with_capacity(files.len());
        for file in files {
            let (w, h, maxval, bytes) = read_p5(&file)?;
            let image = GrayImage::from_u8(w, h, &bytes, maxval).resize(input_size, input_size);
            let stem = file.file_stem().unwrap().to_string_lossy().to_string();
            samples.push(Sample {
                image,
                label,
                id: format!("{}/{}", classes[label], stem),
            });
        }
        per_class.push(samples);
    }

    match split {
        SplitConfig::Fraction { train_fraction } => {
            if !(0.0 < *train_fraction && *train_fraction < 1.0) {
                return Err(DataError::BadSplit(format!(
                    "train_fraction {train_fraction} outside (0, 1)"
                )));
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            // stratified: split each class at the rounded fraction
            for (label, mut samples) in per_class.into_iter().enumerate() {
                let mut rng = Rng::derive(seed, &[label as u64, 0x53504c4954u64]);
                rng.shuffle(&mut samples);
                let n_train = ((samples.len() as f64) * train_fraction).round() as usize;
                let n_train = n_train.min(samples.len());
                for (i, s) in samples.into_iter().enumerate() {
                    if i < n_train {
                        train.push(s);
                    } else {
                        test.push(s);
                    }
                }
            }
            train.sort_by(|a, b| a.id.cmp(&b.id));
            test.sort_by(|a, b| a.id.cmp(&b.id));
            Ok(Dataset {
                classes,
                train,
                test,
            })
        }
        SplitConfig::Lists {
            train: train_list,
            test: test_list,
        } => {
            let read_list = |name: &str| -> Result<Vec<String>, DataError> {
                let path = root.join(name);
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                Ok(text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(str::to_string)
                    .collect())
            };
            let train_ids = read_list(train_list)?;
            let test_ids = read_list(test_list)?;
            for id in &train_ids {
                if test_ids.contains(id) {
                    return Err(DataError::BadSplit(format!(
                        "sample '{id}' appears in both {train_list} and {test_list}"
                    )));
                }
            }
            let all: Vec<Sample> = per_class.into_iter().flatten().collect();
            let find = |list: &str, id: &str| -> Result<Sample, DataError> {
                all.iter()
                    .find(|s| s.id == id)
                    .cloned()
                    .ok_or_else(|| DataError::MissingId {
                        list: list.to_string(),
                        id: id.to_string(),
                    })
            };
            let train = train_ids
                .iter()
                .map(|id| find(train_list, id))
                .collect::<Result<Vec<_>, _>>()?;
            let test = test_ids
                .iter()
                .map(|id| find(test_list, id))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Dataset {
                classes,
                train,
                test,
            })
        }
    }
}

/// Online augmentation: horizontal flip (p = 0.5), rotation within ±10
/// degrees, and a random 90-100% area crop resized back. Deterministic per
/// (seed, sample id, epoch).
pub fn augment(image: &GrayImage, seed: u64, id: &str, epoch: usize) -> GrayImage {
    let mut rng = Rng::derive(seed, &[fnv1a(id.as_bytes()), epoch as u64]);
    let flip = rng.next_f64() < 0.5;
    let angle = rng.uniform(-10.0, 10.0);
    let area = rng.uniform(0.9, 1.0);
    let (w, h) = (image.width, image.height);
    let side = ((w.min(h) as f64) * area.sqrt()).round() as usize;
    let side = side.clamp(1, w.min(h));
    let r0 = rng.below(h - side + 1);
    let c0 = rng.below(w - side + 1);

    let img = if flip {
        image.flip_horizontal()
    } else {
        image.clone()
    };
    let img = img.rotate(angle);
    img.crop(r0, c0, r0 + side, c0 + side).resize(w, h)
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train_per_class: 400,
            test_per_class: 100,
            size: 96,
            seed: 17,
        }
    }
}

pub const NOISE_AMPLITUDE: f64 = 0.2;
pub const BLOB_AMPLITUDE: f64 = 0.8;
pub const STRIPE_AMPLITUDE: f64 = 0.5;

/// Whether an image coordinate lies in the peripheral band (outer quarter
/// on any side).
pub fn in_peripheral_band(row: usize, col: usize, size: usize) -> bool {
    let edge = row.min(col).min(size - 1 - row).min(size - 1 - col);
    edge < size / 4
}

/// Continuous peripheral-band test with an inclusive boundary, for checks
/// on derived points such as box centers.
pub fn in_peripheral_band_f(row: f64, col: f64, size: usize) -> bool {
    let s = size as f64;
    let edge = row.min(col).min(s - 1.0 - row).min(s - 1.0 - col);
    edge <= s / 4.0
}

/// Generate the two synthetic classes on disk, fully determined by the
/// seed. Class 0 is background noise plus one bright Gaussian blob whose
/// center lies in the peripheral band; class 1 is the same noise plus
/// horizontal sinusoidal stripes. Writes split list files alongside.
pub fn synth_generate(root: &Path, spec: &SynthSpec) -> Result<(), DataError> {
    if spec.size < 32 {
        return Err(DataError::BadSplit(format!(
            "synthetic image size {} below minimum 32",
            spec.size
        )));
    }
    let size = spec.size;
    let total = spec.train_per_class + spec.test_per_class;
    let mut rng = Rng::seed_from(spec.seed);
    let sigma = size as f64 / 12.0;
    let period = size as f64 / 8.0;

    for class in 0..2usize {
        let dir = root.join(format!("class_{class}"));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for idx in 0..total {
            let mut pixels = vec![0.0f64; size * size];
            let blob = if class == 0 {
                // rejection-sample an integer center inside the band
                loop {
                    let r = rng.below(size);
                    let c = rng.below(size);
                    if in_peripheral_band(r, c, size) {
                        break Some((r as f64, c as f64));
                    }
                }
            } else {
                None
            };
            for r in 0..size {
                for c in 0..size {
                    let mut v = NOISE_AMPLITUDE * rng.next_f64();
                    match blob {
                        Some((br, bc)) => {
                            let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
                            v += BLOB_AMPLITUDE * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                        None => {
                            let phase = 2.0 * std::f64::consts::PI * r as f64 / period;
                            v += STRIPE_AMPLITUDE * (0.5 + 0.5 * phase.sin());
                        }
                    }
                    pixels[r * size + c] = v.clamp(0.0, 1.0);
                }
            }
            let img = GrayImage::from_pixels(size, size, pixels);
            write_p5(&dir.join(format!("{idx:04}.pgm")), size, size, &img.to_u8())?;
        }
    }

    let mut train_lines = String::new();
    let mut test_lines = String::new();
    for class in 0..2usize {
        for idx in 0..total {
            let line = format!("class_{class}/{idx:04}\n");
            if idx < spec.train_per_class {
                train_lines.push_str(&line);
            } else {
                test_lines.push_str(&line);
            }
        }
    }
    let train_path = root.join("train.txt");
    std::fs::write(&train_path, train_lines).map_err(io_err(&train_path))?;
    let test_path = root.join("test.txt");
    std::fs::write(&test_path, test_lines).map_err(io_err(&test_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("decaps-dataio-{}-{name}", std::process::id()));
        p
    }

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            train_per_class: 4,
            test_per_class: 2,
            size: 96,
            seed,
        }
    }

    #[test]
    fn synth_is_byte_deterministic() {
        let a = tmp("synth-a");
        let b = tmp("synth-b");
        for d in [&a, &b] {
            std::fs::remove_dir_all(d).ok();
            synth_generate(d, &small_spec(7)).unwrap();
        }
        for rel in ["class_0/0000.pgm", "class_1/0003.pgm", "train.txt", "test.txt"] {
            let x = std::fs::read(a.join(rel)).unwrap();
            let y = std::fs::read(b.join(rel)).unwrap();
            assert_eq!(x, y, "{rel} differs between identical seeds");
        }
        std::fs::remove_dir_all(&a).ok();
        std::fs::remove_dir_all(&b).ok();
    }

    #[test]
    fn class0_maximum_stays_near_band() {
        // The blob center is in the band; noise can move the argmax at most
        // ~6 px (0.8 (1 - exp(-d^2 / (2 sigma^2))) > 0.2 beyond that), so
        // one sigma of slack over the band width always covers it.
        let root = tmp("synth-max");
        std::fs::remove_dir_all(&root).ok();
        synth_generate(&root, &small_spec(3)).unwrap();
        let ds = load_dataset(&root, &SplitConfig::default(), 0, 96).unwrap();
        let slack = 96 / 12;
        for s in ds.train.iter().chain(&ds.test).filter(|s| s.label == 0) {
            let (mut best, mut at) = (-1.0, (0usize, 0usize));
            for r in 0..96 {
                for c in 0..96 {
                    if s.image.get(r, c) > best {
                        best = s.image.get(r, c);
                        at = (r, c);
                    }
                }
            }
            let edge = at.0.min(at.1).min(95 - at.0).min(95 - at.1);
            assert!(
                edge < 96 / 4 + slack,
                "argmax {at:?} too far inside for {}",
                s.id
            );
        }
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn class1_brighter_than_background_noise() {
        let root = tmp("synth-mean");
        std::fs::remove_dir_all(&root).ok();
        synth_generate(&root, &small_spec(5)).unwrap();
        let ds = load_dataset(&root, &SplitConfig::default(), 0, 96).unwrap();
        for s in ds.train.iter().filter(|s| s.label == 1) {
            let mean: f64 = s.image.pixels.iter().sum::<f64>() / s.image.pixels.len() as f64;
            assert!(mean > 0.2, "stripes should add energy, got mean {mean}");
        }
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn pixel_scaling_follows_maxval() {
        let root = tmp("scale");
        std::fs::remove_dir_all(&root).ok();
        let dir = root.join("only");
        std::fs::create_dir_all(&dir).unwrap();
        crate::pnm::write_p5(&dir.join("img.pgm"), 2, 1, &[255, 0]).unwrap();
        let ds = load_dataset(
            &root,
            &SplitConfig::Fraction {
                train_fraction: 0.5,
            },
            1,
            2,
        );
        // single image: rounds to one side of the split
        let ds = ds.unwrap();
        let all: Vec<&Sample> = ds.train.iter().chain(&ds.test).collect();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].image.pixels[0], 1.0);
        assert_eq!(all[0].image.pixels[1], 0.0);
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn odd_sizes_resize_cleanly() {
        // extreme aspect ratio resized to the square network input
        let root = tmp("resize");
        std::fs::remove_dir_all(&root).ok();
        let dir = root.join("c");
        std::fs::create_dir_all(&dir).unwrap();
        let (w, h) = (124usize, 153usize);
        let bytes: Vec<u8> = (0..w * h).map(|i| (i % 251) as u8).collect();
        crate::pnm::write_p5(&dir.join("big.pgm"), w, h, &bytes).unwrap();
        std::fs::write(root.join("train.txt"), "c/big\n").unwrap();
        std::fs::write(root.join("test.txt"), "").unwrap();
        let ds = load_dataset(&root, &SplitConfig::default(), 0, 96).unwrap();
        assert_eq!(ds.train[0].image.width, 96);
        assert_eq!(ds.train[0].image.height, 96);
        assert!(ds.train[0].image.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn fraction_split_is_deterministic_and_stratified() {
        let root = tmp("split");
        std::fs::remove_dir_all(&root).ok();
        synth_generate(&root, &small_spec(11)).unwrap();
        let split = SplitConfig::Fraction {
            train_fraction: 0.67,
        };
        let a = load_dataset(&root, &split, 42, 32).unwrap();
        let b = load_dataset(&root, &split, 42, 32).unwrap();
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));
        // disjoint and exhaustive
        assert_eq!(a.train.len() + a.test.len(), 12);
        for t in &a.train {
            assert!(!a.test.iter().any(|s| s.id == t.id));
        }
        // stratified within one sample of the global fraction
        for class in 0..2 {
            let n = a.train.iter().filter(|s| s.label == class).count();
            assert!((n as f64 - 6.0 * 0.67).abs() <= 1.0);
        }
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn overlapping_lists_rejected() {
        let root = tmp("leak");
        std::fs::remove_dir_all(&root).ok();
        synth_generate(&root, &small_spec(2)).unwrap();
        std::fs::write(root.join("train.txt"), "class_0/0000\n").unwrap();
        std::fs::write(root.join("test.txt"), "class_0/0000\n").unwrap();
        assert!(matches!(
            load_dataset(&root, &SplitConfig::default(), 0, 32),
            Err(DataError::BadSplit(_))
        ));
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn missing_listed_id_rejected() {
        let root = tmp("missing");
        std::fs::remove_dir_all(&root).ok();
        synth_generate(&root, &small_spec(2)).unwrap();
        std::fs::write(root.join("train.txt"), "class_0/9999\n").unwrap();
        assert!(matches!(
            load_dataset(&root, &SplitConfig::default(), 0, 32),
            Err(DataError::MissingId { .. })
        ));
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn empty_class_dir_rejected() {
        let root = tmp("empty");
        std::fs::remove_dir_all(&root).ok();
        std::fs::create_dir_all(root.join("vacant")).unwrap();
        assert!(matches!(
            load_dataset(&root, &SplitConfig::default(), 0, 32),
            Err(DataError::EmptyClass { .. })
        ));
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn augmentation_is_deterministic_and_bounded() {
        let img = {
            let mut rng = Rng::seed_from(1);
            GrayImage::from_pixels(48, 48, (0..48 * 48).map(|_| rng.next_f64()).collect())
        };
        let a = augment(&img, 5, "class_0/0000", 3);
        let b = augment(&img, 5, "class_0/0000", 3);
        assert_eq!(a.pixels, b.pixels);
        let c = augment(&img, 5, "class_0/0000", 4);
        assert_ne!(a.pixels, c.pixels);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.width, 48);
        assert_eq!(a.height, 48);
    }
}
