//! Labeled image datasets: the on-disk index and a procedural generator.
//!
//! The index is UTF-8 text named `index.tsv` in the dataset root, one
//! `filename<TAB>label` line per image. Filenames are relative to the root.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image_io::{load_png, save_png};
use crate::rng::{derive_indexed, rng_from_seed, Rng};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub entries: Vec<(String, usize)>,
}

impl DatasetSpec {
    /// Read and check the index of `root`: every file exists and every label
    /// is below `num_labels`.
    pub fn open(root: &Path, num_labels: usize) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (file, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::Input(format!("{}:{}: expected filename<TAB>label", path.display(), n + 1)))?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("{}:{}: bad label {label:?}", path.display(), n + 1)))?;
            ensure!(label < num_labels, Input, "{}:{}: label {label} outside 0..{num_labels}", path.display(), n + 1);
            let f = root.join(file);
            ensure!(f.is_file(), Input, "{}:{}: missing image {}", path.display(), n + 1, f.display());
            entries.push((file.to_string(), label));
        }
        ensure!(!entries.is_empty(), Input, "dataset index {} is empty", path.display());
        Ok(DatasetSpec {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<Tensor<f32>> {
        load_png(&self.root.join(&self.entries[i].0))
    }

    pub fn label(&self, i: usize) -> usize {
        self.entries[i].1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 2,
            per_class: 500,
            sizes: vec![64, 128, 192],
            seed: 0,
        }
    }
}

/// Per-class color ramps: `rgb = lo + (hi − lo)·f` for a pattern value `f`.
/// Class `k` shifts the ramp so mean intensity grows with `k`.
fn palette(class: usize, classes: usize) -> ([f64; 3], [f64; 3]) {
    let u = if classes > 1 { class as f64 / (classes - 1) as f64 } else { 0.0 };
    let lo = [0.05 + 0.55 * u, 0.15 + 0.25 * u, 0.35 - 0.15 * u];
    let hi = [0.35 + 0.6 * u, 0.5 + 0.35 * u, 0.8 - 0.3 * u];
    (lo, hi)
}

/// A resolution-free pattern value in `[0, 1]` at normalized `(u, v)`.
enum Pattern {
    Gradient { dir: (f64, f64), phase: f64 },
    Checker { freq: f64, angle: f64, soft: f64 },
    Blobs(Vec<(f64, f64, f64, f64)>),
}

impl Pattern {
    fn draw(rng: &mut Rng) -> Self {
        match rng.random_range(0..3) {
            0 => {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Pattern::Gradient {
                    dir: (a.cos(), a.sin()),
                    phase: rng.random_range(0.0..1.0),
                }
            }
            1 => Pattern::Checker {
                freq: rng.random_range(2..7) as f64,
                angle: rng.random_range(-0.4..0.4),
                soft: rng.random_range(0.02..0.1),
            },
            _ => {
                let n = rng.random_range(3..6);
                Pattern::Blobs(
                    (0..n)
                        .map(|_| {
                            (
                                rng.random_range(0.1..0.9),
                                rng.random_range(0.1..0.9),
                                rng.random_range(0.08..0.25),
                                rng.random_range(0.5..1.0),
                            )
                        })
                        .collect(),
                )
            }
        }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            Pattern::Gradient { dir, phase } => {
                let s = (u - 0.5) * dir.0 + (v - 0.5) * dir.1;
                0.5 + 0.5 * (std::f64::consts::PI * (s + phase)).sin()
            }
            Pattern::Checker { freq, angle, soft } => {
                let (c, s) = (angle.cos(), angle.sin());
                let (ru, rv) = (c * u - s * v, s * u + c * v);
                let a = (std::f64::consts::PI * freq * ru).sin() * (std::f64::consts::PI * freq * rv).sin();
                0.5 + 0.5 * (a / soft).tanh()
            }
            Pattern::Blobs(b) => {
                let sum: f64 = b
                    .iter()
                    .map(|&(cx, cy, r, amp)| amp * (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * r * r)).exp())
                    .sum();
                sum.min(1.0)
            }
        }
    }
}

/// Render one image of class `class` at `size×size` from `seed`.
pub fn render(class: usize, classes: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = rng_from_seed(seed);
    let pattern = Pattern::draw(&mut rng);
    let (lo, hi) = palette(class, classes);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let f = pattern.eval((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            for ch in 0..3 {
                data.push((lo[ch] + (hi[ch] - lo[ch]) * f) as f32);
            }
        }
    }
    Tensor::new(&[size, size, 3], data)
}

/// Write `classes × per_class` PNGs plus the index into `out`.
///
/// Image `i` has class `i % classes`, size `sizes[(i / classes) % len]`, and
/// seed `derive_indexed(seed, "dataset.image", i)`.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, out: &Path) -> Result<DatasetSpec> {
    ensure!(spec.classes >= 1 && spec.per_class >= 1, Config, "dataset needs at least one class and one image per class");
    ensure!(!spec.sizes.is_empty() && spec.sizes.iter().all(|&s| s > 0), Config, "dataset sizes must be positive");
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let total = spec.classes * spec.per_class;
    let names: Vec<(String, usize)> = (0..total)
        .map(|i| (format!("img_{i:05}.png"), i % spec.classes))
        .collect();
    let results = crate::par::map_range(total, |i| {
        let class = i % spec.classes;
        let size = spec.sizes[(i / spec.classes) % spec.sizes.len()];
        let img = render(class, spec.classes, size, derive_indexed(spec.seed, "dataset.image", i as u64));
        save_png(&out.join(&names[i].0), &img)
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let path = out.join(INDEX_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for (name, label) in &names {
        writeln!(f, "{name}\t{label}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(DatasetSpec {
        root: out.to_path_buf(),
        entries: names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(t: &Tensor<f32>) -> f64 {
        t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64
    }

    #[test]
    fn class_means_are_separated() {
        // Calibration: average intensity per class over many draws.
        let mut m = [0.0f64; 2];
        for i in 0..200u64 {
            let c = (i % 2) as usize;
            m[c] += mean(&render(c, 2, 32, i)) / 100.0;
        }
        assert!(m[1] - m[0] >= 0.1, "{m:?}");
    }

    #[test]
    fn generation_is_reproducible_and_indexed() {
        let spec = SyntheticSpec {
            classes: 2,
            per_class: 3,
            sizes: vec![16, 32],
            seed: 4,
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let da = make_synthetic_dataset(&spec, a.path()).unwrap();
        make_synthetic_dataset(&spec, b.path()).unwrap();
        assert_eq!(da.len(), 6);
        for (name, _) in &da.entries {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let opened = DatasetSpec::open(a.path(), 2).unwrap();
        assert_eq!(opened.entries, da.entries);
        assert_eq!(opened.load(1).unwrap().shape(), &[16, 16, 3]);
        assert_eq!(opened.load(2).unwrap().shape(), &[32, 32, 3]);
        assert!(matches!(DatasetSpec::open(a.path(), 1), Err(Error::Input(_))));
    }

    #[test]
    fn bad_index_lines_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join(INDEX_FILE), "nolabel.png\n").unwrap();
        assert!(matches!(DatasetSpec::open(d.path(), 2), Err(Error::Input(_))));
        fs::write(d.path().join(INDEX_FILE), "missing.png\t0\n").unwrap();
        assert!(matches!(DatasetSpec::open(d.path(), 2), Err(Error::Input(_))));
    }
}
