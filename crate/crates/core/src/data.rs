//! Toy datasets and their on-disk format.
//!
//! A dataset file starts with ASCII header lines
//!
//! ```text
//! skiptune-dataset 1
//! dtype f64le
//! shape N C H W
//! labels u32le | none
//! end
//! ```
//!
//! followed by `N*C*H*W` little-endian f64 values and, when present, `N`
//! little-endian u32 labels.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "skiptune-dataset 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// 8x8 single-channel images of four shape classes.
    #[default]
    Shapes,
    /// A planar Gaussian mixture embedded in image space.
    Gmm,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generate(kind: DatasetKind, n: usize, seed: u64) -> Result<Self> {
        match kind {
            DatasetKind::Shapes => shapes(n, seed),
            DatasetKind::Gmm => gmm(n, seed),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let dims: Vec<String> = self.images.shape().iter().map(|d| d.to_string()).collect();
        writeln!(f, "{MAGIC}")?;
        writeln!(f, "dtype f64le")?;
        writeln!(f, "shape {}", dims.join(" "))?;
        writeln!(
            f,
            "labels {}",
            if self.labels.is_some() {
                "u32le"
            } else {
                "none"
            }
        )?;
        writeln!(f, "end")?;
        for v in self.images.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        if let Some(l) = &self.labels {
            for &v in l {
                let v = u32::try_from(v).map_err(|_| Error::Format("label exceeds u32".into()))?;
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        let mut next = |r: &mut BufReader<std::fs::File>| -> Result<String> {
            line.clear();
            r.read_line(&mut line)?;
            Ok(line.trim_end().to_string())
        };
        let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
        if next(&mut r)? != MAGIC {
            return Err(bad("not a skiptune dataset"));
        }
        if next(&mut r)? != "dtype f64le" {
            return Err(bad("unsupported dtype"));
        }
        let shape_line = next(&mut r)?;
        let shape: Vec<usize> = shape_line
            .strip_prefix("shape ")
            .ok_or_else(|| bad("missing shape"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?;
        let has_labels = match next(&mut r)?.as_str() {
            "labels u32le" => true,
            "labels none" => false,
            _ => return Err(bad("bad labels line")),
        };
        if next(&mut r)? != "end" {
            return Err(bad("missing header terminator"));
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| bad("truncated data"))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let images = Tensor::new(&shape, data)?;
        let labels = if has_labels {
            let mut lb = vec![0u8; images.batch() * 4];
            r.read_exact(&mut lb).map_err(|_| bad("truncated labels"))?;
            Some(
                lb.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
                    .collect(),
            )
        } else {
            None
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Dataset { images, labels })
    }

    pub fn labels_or_err(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Config("dataset has no labels".into()))
    }
}

pub const SHAPES_SIZE: usize = 8;
pub const SHAPES_CLASSES: usize = 4;

/// Horizontal bars, vertical bars, filled squares and diagonals on a
/// `-0.5` background with `+0.5` foreground and mild pixel noise.
pub fn shapes(n: usize, seed: u64) -> Result<Dataset> {
    let s = SHAPES_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("std");
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..SHAPES_CLASSES);
        let mut img = vec![-0.5; s * s];
        let mut on = |r: usize, c: usize| img[r * s + c] = 0.5;
        match class {
            0 => {
                let (r, c0) = (rng.gen_range(0..s - 1), rng.gen_range(0..3));
                let len = rng.gen_range(5..=s - c0);
                for c in c0..c0 + len {
                    on(r, c);
                    on(r + 1, c);
                }
            }
            1 => {
                let (c, r0) = (rng.gen_range(0..s - 1), rng.gen_range(0..3));
                let len = rng.gen_range(5..=s - r0);
                for r in r0..r0 + len {
                    on(r, c);
                    on(r, c + 1);
                }
            }
            2 => {
                let w = rng.gen_range(3..=4);
                let (r0, c0) = (rng.gen_range(0..=s - w), rng.gen_range(0..=s - w));
                for r in r0..r0 + w {
                    for c in c0..c0 + w {
                        on(r, c);
                    }
                }
            }
            _ => {
                let anti = rng.gen_bool(0.5);
                for i in 0..s {
                    on(i, if anti { s - 1 - i } else { i });
                }
            }
        }
        data.extend(img.into_iter().map(|v| v + noise.sample(&mut rng)));
        labels.push(class);
    }
    Ok(Dataset {
        images: Tensor::new(&[n, 1, s, s], data)?,
        labels: Some(labels),
    })
}

pub const GMM_COMPONENTS: usize = 8;
pub const GMM_RADIUS: f64 = 1.5;
pub const GMM_STD: f64 = 0.15;

/// Orthonormal pair of 8x8 images spanning the plane the mixture lives in.
pub fn gmm_basis() -> [Vec<f64>; 2] {
    let s = SHAPES_SIZE;
    let angle = |r: usize, c: usize| std::f64::consts::PI * (r as f64 + c as f64 + 1.0) / s as f64;
    let mut a: Vec<f64> = (0..s * s).map(|i| angle(i / s, i % s).cos()).collect();
    let mut b: Vec<f64> = (0..s * s).map(|i| angle(i / s, i % s).sin()).collect();
    let norm = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    norm(&mut a);
    let proj: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().zip(&a).for_each(|(y, x)| *y -= proj * x);
    norm(&mut b);
    [a, b]
}

/// Planar mixture of `GMM_COMPONENTS` isotropic Gaussians on a circle,
/// mapped into image space through [`gmm_basis`]. Labels are components.
pub fn gmm(n: usize, seed: u64) -> Result<Dataset> {
    let s = SHAPES_SIZE;
    let [e1, e2] = gmm_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, GMM_STD).expect("std");
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..GMM_COMPONENTS);
        let t = 2.0 * std::f64::consts::PI * k as f64 / GMM_COMPONENTS as f64;
        let u = GMM_RADIUS * t.cos() + noise.sample(&mut rng);
        let v = GMM_RADIUS * t.sin() + noise.sample(&mut rng);
        data.extend(e1.iter().zip(&e2).map(|(a, b)| u * a + v * b));
        labels.push(k);
    }
    Ok(Dataset {
        images: Tensor::new(&[n, 1, s, s], data)?,
        labels: Some(labels),
    })
}
