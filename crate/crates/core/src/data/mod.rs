//! Dataset ingestion, preprocessing, augmentation and batching.

mod augment;
mod ppm;
pub mod synthetic;

pub use augment::{augment, flip_horizontal, resize_bilinear, rotate, AugmentPolicy};
pub use ppm::{decode_ppm, encode_ppm};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// One labelled image, raw 0-255 values, `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub class_names: Vec<String>,
    /// Non-fatal ingestion notes (for example a single-class dataset).
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn new(items: Vec<Item>, class_names: Vec<String>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|i| i.label >= class_names.len()) {
            return Err(Error::InvalidConfig(format!(
                "item `{}` has label {} but only {} classes exist",
                bad.id,
                bad.label,
                class_names.len()
            )));
        }
        Ok(Dataset {
            items,
            class_names,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `H x W x C` of the images, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.items.first().map(|i| i.image.shape())
    }

    /// Items with the given indices, keeping class names.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
            warnings: self.warnings.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for item in &self.items {
            counts[item.label] += 1;
        }
        counts
    }
}

/// Scales raw 0-255 pixels into `[0, 1]`.
pub fn normalize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if let Some(&bad) = image.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::Range(bad));
    }
    Ok(image.map(|v| v / 255.0))
}

/// Loads `<root>/<class>/*.ppm`. Classes are the sorted subdirectory names;
/// items are ordered by (class, file name) and resized to `height x width`.
pub fn load_dataset(root: impl AsRef<Path>, height: usize, width: usize) -> Result<Dataset> {
    let root = root.as_ref();
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();

    let mut class_names = Vec::new();
    let mut files = Vec::new();
    for dir in &class_dirs {
        let mut ppms: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .is_some_and(|x| x.eq_ignore_ascii_case("ppm"))
            })
            .collect();
        if ppms.is_empty() {
            continue;
        }
        ppms.sort();
        let label = class_names.len();
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        files.extend(ppms.into_iter().map(|p| (p, label)));
    }
    if files.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }

    let decoded = par::map(&files, |(path, _)| -> std::result::Result<Tensor<f32>, String> {
        let bytes = fs::read(path).map_err(|e| e.to_string())?;
        let image = decode_ppm(&bytes).map_err(|e| e.to_string())?;
        Ok(resize_bilinear(&image, height, width))
    });
    let mut items = Vec::with_capacity(files.len());
    let mut failures = Vec::new();
    for ((path, label), result) in files.iter().zip(decoded) {
        match result {
            Ok(image) => items.push(Item {
                id: item_id(root, path),
                image,
                label: *label,
            }),
            Err(e) => failures.push((path.clone(), e)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Decode(failures));
    }
    let mut ds = Dataset::new(items, class_names)?;
    if ds.num_classes() == 1 {
        ds.warnings
            .push(format!("dataset at {} has a single class", root.display()));
    }
    Ok(ds)
}

fn item_id(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// SplitMix64 finaliser folded over `parts`; derives independent RNG seeds
/// for (seed, epoch, position) so batches do not depend on evaluation order.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// One-hot rows for `labels` over `classes`.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(vec![labels.len(), classes]);
    for (row, &l) in labels.iter().enumerate() {
        t.data_mut()[row * classes + l] = 1.0;
    }
    t
}

/// A prepared batch: normalised images `B x H x W x 3` and one-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Tensor<f32>,
    pub indices: Vec<usize>,
}

/// Deterministic per-epoch batch stream. The order and every augmentation
/// draw are functions of `(seed, epoch, position)` only; the remainder that
/// does not fill a batch is dropped.
pub struct BatchIterator<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    b_size: usize,
    next: usize,
    policy: AugmentPolicy,
    seed: u64,
    epoch: u64,
}

pub fn batch_iterator<'a>(
    ds: &'a Dataset,
    b_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
    policy: AugmentPolicy,
) -> Result<BatchIterator<'a>> {
    if b_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if b_size > ds.len() {
        return Err(Error::BatchTooLarge {
            b_size,
            len: ds.len(),
        });
    }
    policy.validate()?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, 0]));
        order.shuffle(&mut rng);
    }
    Ok(BatchIterator {
        ds,
        order,
        b_size,
        next: 0,
        policy,
        seed,
        epoch,
    })
}

impl BatchIterator<'_> {
    /// Full batches this epoch: `floor(N / b_size)`.
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.b_size
    }

    fn prepare(&self, position: usize) -> Result<Tensor<f32>> {
        let item = &self.ds.items[self.order[position]];
        let image = if self.policy.enabled {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, self.epoch, 1, position as u64]));
            augment(&item.image, &self.policy, &mut rng)
        } else {
            item.image.clone()
        };
        normalize(&image)
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.batches_per_epoch() {
            return None;
        }
        let start = self.next * self.b_size;
        self.next += 1;
        let positions: Vec<usize> = (start..start + self.b_size).collect();
        let images = par::map(&positions, |&p| self.prepare(p));
        let result = images
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .and_then(|imgs| Tensor::stack(&imgs))
            .map(|images| {
                let indices: Vec<usize> = positions.iter().map(|&p| self.order[p]).collect();
                let labels: Vec<usize> = indices.iter().map(|&i| self.ds.items[i].label).collect();
                Batch {
                    images,
                    labels: one_hot(&labels, self.ds.num_classes()),
                    indices,
                }
            });
        Some(result)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.batches_per_epoch() - self.next;
        (left, Some(left))
    }
}
