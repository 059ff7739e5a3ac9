//! Paired video/image datasets: in-memory model, the synthetic generator
//! and the on-disk format.
//!
//! A dataset directory holds a JSON manifest plus two feature containers.
//! Containers are little-endian binary files:
//!
//! ```text
//! "APVF"      magic
//! u32         version (1)
//! u64         row count
//! u64         row dimension
//! f64 × count·dim, row-major
//! ```
//!
//! `videos.apvf` stores every bag's proposals back to back (`k` rows per
//! bag) and `images.apvf` one row per image. The manifest references both
//! by relative path and SHA-256 and lists one record per pair.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};

/// One video: `k × d1` proposal features with the proposal similarity graph
/// computed from those raw features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalBag {
    features: Matrix,
    similarity: Matrix,
    adjacency: Matrix,
    clean: Option<Vec<bool>>,
}

impl ProposalBag {
    pub fn new(features: Matrix) -> Result<Self> {
        let similarity = numerics::cosine_similarity_graph(&features)?;
        let adjacency = numerics::normalize_adjacency(&similarity)?;
        Ok(ProposalBag {
            features,
            similarity,
            adjacency,
            clean: None,
        })
    }

    /// Marks which proposals are clean (synthetic data only).
    pub fn with_clean_flags(mut self, clean: Vec<bool>) -> Result<Self> {
        if clean.len() != self.len() {
            return Err(Error::dims("clean flags", self.len(), clean.len()));
        }
        self.clean = Some(clean);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Cosine similarity graph `S`.
    pub fn similarity(&self) -> &Matrix {
        &self.similarity
    }

    /// Normalised adjacency `S̄`.
    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn clean_flags(&self) -> Option<&[bool]> {
        self.clean.as_deref()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub video: ProposalBag,
    pub image: Vec<f64>,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub categories: usize,
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
    pub pairs: Vec<Pair>,
}

impl PairedDataset {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::InvalidConfig(format!("need at least two categories, got {}", self.categories)));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if p.label >= self.categories {
                return Err(Error::LabelOutOfRange {
                    label: p.label,
                    categories: self.categories,
                });
            }
            if p.video.features().shape() != (self.k, self.d1) {
                return Err(Error::dims(
                    "dataset bag",
                    format!("{}x{}", self.k, self.d1),
                    format!("pair {i}: {}x{}", p.video.len(), p.video.features().cols()),
                ));
            }
            if p.image.len() != self.d2 {
                return Err(Error::dims("dataset image", self.d2, format!("pair {i}: {}", p.image.len())));
            }
            if p.image.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset image"));
            }
        }
        Ok(())
    }

    /// Positions of the pairs in `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| self.pairs[i].split == split).collect()
    }

    pub fn distinct_labels(&self, indices: &[usize]) -> usize {
        let mut seen = vec![false; self.categories];
        for &i in indices {
            seen[self.pairs[i].label] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }
}

/// Generator settings for the bag-of-proposals surrogate data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub categories: usize,
    pub train_pairs_per_category: usize,
    pub test_pairs_per_category: usize,
    pub k: usize,
    pub clean_per_bag: usize,
    pub d1: usize,
    pub d2: usize,
    pub noise_sigma: f64,
    pub background_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            categories: 5,
            train_pairs_per_category: 40,
            test_pairs_per_category: 10,
            k: 8,
            clean_per_bag: 3,
            d1: 32,
            d2: 16,
            noise_sigma: 0.05,
            background_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.categories < 2 {
            return bad(format!("synthetic.categories must be >= 2, got {}", self.categories));
        }
        if self.k == 0 || self.clean_per_bag == 0 || self.clean_per_bag > self.k {
            return bad(format!(
                "synthetic.clean_per_bag must be in 1..=k (k = {}, clean_per_bag = {})",
                self.k, self.clean_per_bag
            ));
        }
        if self.d1 == 0 || self.d2 == 0 {
            return bad("synthetic feature dimensions must be positive".into());
        }
        if self.train_pairs_per_category + self.test_pairs_per_category == 0 {
            return bad("synthetic dataset would be empty".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("synthetic.noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.background_scale > 0.0 && self.background_scale.is_finite()) {
            return bad(format!("synthetic.background_scale must be finite and > 0, got {}", self.background_scale));
        }
        Ok(())
    }
}

/// Builds a dataset where each category has a unit prototype `g_c` in the
/// video feature space. Clean proposals are `g_c` plus small Gaussian noise,
/// noisy proposals are category-independent background draws, and images
/// are `M g_c` plus noise for a random linear map `M` shared by all
/// categories. Clean positions within a bag are random.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<PairedDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let prototypes: Vec<Vec<f64>> = (0..cfg.categories)
        .map(|_| loop {
            let g: Vec<f64> = (0..cfg.d1).map(|_| normal(&mut rng)).collect();
            let norm = numerics::dot(&g, &g).sqrt();
            if norm > 1e-12 {
                break g.into_iter().map(|v| v / norm).collect();
            }
        })
        .collect();
    let map_scale = 1.0 / (cfg.d1 as f64).sqrt();
    let map = Matrix::from_fn(cfg.d2, cfg.d1, |_, _| map_scale * normal(&mut rng));
    let image_means: Vec<Vec<f64>> = prototypes.iter().map(|g| map.mat_vec(g)).collect();

    let mut pairs = Vec::new();
    for (split, per_category) in [
        (Split::Train, cfg.train_pairs_per_category),
        (Split::Test, cfg.test_pairs_per_category),
    ] {
        for label in 0..cfg.categories {
            for _ in 0..per_category {
                let mut clean = vec![false; cfg.k];
                for pos in sample(&mut rng, cfg.k, cfg.clean_per_bag) {
                    clean[pos] = true;
                }
                let mut rows = Vec::with_capacity(cfg.k * cfg.d1);
                for &is_clean in &clean {
                    if is_clean {
                        rows.extend(prototypes[label].iter().map(|&g| g + cfg.noise_sigma * normal(&mut rng)));
                    } else {
                        rows.extend((0..cfg.d1).map(|_| cfg.background_scale * normal(&mut rng)));
                    }
                }
                let video = ProposalBag::new(Matrix::new(cfg.k, cfg.d1, rows)?)?.with_clean_flags(clean)?;
                let image = image_means[label]
                    .iter()
                    .map(|&m| m + cfg.noise_sigma * normal(&mut rng))
                    .collect();
                pairs.push(Pair {
                    video,
                    image,
                    label,
                    split,
                });
            }
        }
    }
    let dataset = PairedDataset {
        categories: cfg.categories,
        d1: cfg.d1,
        d2: cfg.d2,
        k: cfg.k,
        pairs,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub const CONTAINER_MAGIC: &[u8; 4] = b"APVF";
pub const CONTAINER_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const VIDEO_FILE: &str = "videos.apvf";
const IMAGE_FILE: &str = "images.apvf";
const CONTAINER_HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub split: Split,
    pub label: usize,
    /// Bag index into the video container (rows `video·k .. (video+1)·k`).
    pub video: usize,
    /// Row index into the image container.
    pub image: usize,
    /// Positions of clean proposals, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub categories: usize,
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
    pub videos: ContainerRef,
    pub images: ContainerRef,
    pub pairs: Vec<PairRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialises `rows` (each of length `dim`) into a feature container.
pub fn encode_container(dim: usize, rows: &[&[f64]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(CONTAINER_HEADER_LEN + rows.len() * dim * 8);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for row in rows {
        assert_eq!(row.len(), dim, "container row width");
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a feature container into `(count, dim, row-major values)`.
pub fn decode_container(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < CONTAINER_HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header: {} of {CONTAINER_HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[..4] != CONTAINER_MAGIC {
        return Err(fail(0, "bad magic, not an APVF container".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(fail(4, format!("unsupported container version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let payload = &bytes[CONTAINER_HEADER_LEN..];
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| fail(8, format!("header overflows: {count} rows of {dim}")))?;
    if payload.len() as u64 != expected {
        return Err(fail(
            CONTAINER_HEADER_LEN + payload.len().min(expected as usize),
            format!("payload is {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let mut values = Vec::with_capacity((count * dim) as usize);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(CONTAINER_HEADER_LEN + 8 * i, "non-finite feature value".into()));
        }
        values.push(v);
    }
    Ok((count as usize, dim as usize, values))
}

/// Writes the dataset as `manifest.json`, `videos.apvf` and `images.apvf`
/// under `dir` (created if missing). Output bytes depend only on the
/// dataset.
pub fn save_dataset(dataset: &PairedDataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let video_rows: Vec<&[f64]> = dataset
        .pairs
        .iter()
        .flat_map(|p| (0..p.video.len()).map(move |i| p.video.features().row(i)))
        .collect();
    let image_rows: Vec<&[f64]> = dataset.pairs.iter().map(|p| p.image.as_slice()).collect();
    let videos = encode_container(dataset.d1, &video_rows);
    let images = encode_container(dataset.d2, &image_rows);

    let pairs = dataset
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| PairRecord {
            split: p.split,
            label: p.label,
            video: i,
            image: i,
            clean: p
                .video
                .clean_flags()
                .map(|f| f.iter().enumerate().filter(|(_, &c)| c).map(|(j, _)| j).collect()),
        })
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        categories: dataset.categories,
        d1: dataset.d1,
        d2: dataset.d2,
        k: dataset.k,
        videos: ContainerRef {
            path: VIDEO_FILE.into(),
            sha256: sha256_hex(&videos),
        },
        images: ContainerRef {
            path: IMAGE_FILE.into(),
            sha256: sha256_hex(&images),
        },
        pairs,
    };
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    };
    write(VIDEO_FILE, &videos)?;
    write(IMAGE_FILE, &images)?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    text.push('\n');
    let manifest_path = dir.join(MANIFEST_FILE);
    write(MANIFEST_FILE, text.as_bytes())?;
    Ok(manifest_path)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: format!("invalid manifest: {e}"),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("unsupported manifest version {}", manifest.version),
        });
    }
    Ok(manifest)
}

fn load_container(base: &Path, reference: &ContainerRef, dim: usize) -> Result<(PathBuf, usize, Vec<f64>)> {
    let path = base.join(&reference.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (count, found_dim, values) = decode_container(&bytes, &path)?;
    if found_dim != dim {
        return Err(Error::dims("feature container", dim, format!("{found_dim} in {}", path.display())));
    }
    let digest = sha256_hex(&bytes);
    if digest != reference.sha256 {
        return Err(Error::Format {
            path,
            offset: 0,
            message: format!("checksum mismatch: manifest {}, file {digest}", reference.sha256),
        });
    }
    Ok((path, count, values))
}

/// Reads and validates a dataset, computing each bag's similarity graph.
pub fn load_dataset(manifest_path: &Path) -> Result<PairedDataset> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let (k, d1, d2) = (manifest.k, manifest.d1, manifest.d2);
    if k == 0 || d1 == 0 || d2 == 0 {
        return Err(Error::Format {
            path: manifest_path.to_path_buf(),
            offset: 0,
            message: "k, d1 and d2 must be positive".into(),
        });
    }
    let (video_path, video_rows, videos) = load_container(base, &manifest.videos, d1)?;
    let (image_path, image_rows, images) = load_container(base, &manifest.images, d2)?;
    if video_rows % k != 0 {
        return Err(Error::Format {
            path: video_path,
            offset: 0,
            message: format!("{video_rows} proposal rows is not a multiple of k = {k}"),
        });
    }
    let bag_count = video_rows / k;

    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for (i, rec) in manifest.pairs.iter().enumerate() {
        if rec.label >= manifest.categories {
            return Err(Error::LabelOutOfRange {
                label: rec.label,
                categories: manifest.categories,
            });
        }
        if rec.video >= bag_count {
            return Err(Error::Format {
                path: video_path.clone(),
                offset: 0,
                message: format!("pair {i} references bag {} of {bag_count}", rec.video),
            });
        }
        if rec.image >= image_rows {
            return Err(Error::Format {
                path: image_path.clone(),
                offset: 0,
                message: format!("pair {i} references image {} of {image_rows}", rec.image),
            });
        }
        let start = rec.video * k * d1;
        let features = Matrix::new(k, d1, videos[start..start + k * d1].to_vec())?;
        let mut video = ProposalBag::new(features)?;
        if let Some(clean) = &rec.clean {
            let mut flags = vec![false; k];
            for &j in clean {
                if j >= k {
                    return Err(Error::Format {
                        path: manifest_path.to_path_buf(),
                        offset: 0,
                        message: format!("pair {i}: clean position {j} outside bag of {k}"),
                    });
                }
                flags[j] = true;
            }
            video = video.with_clean_flags(flags)?;
        }
        pairs.push(Pair {
            video,
            image: images[rec.image * d2..(rec.image + 1) * d2].to_vec(),
            label: rec.label,
            split: rec.split,
        });
    }
    let dataset = PairedDataset {
        categories: manifest.categories,
        d1,
        d2,
        k,
        pairs,
    };
    dataset.validate()?;
    Ok(dataset)
}
