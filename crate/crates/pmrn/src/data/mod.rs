//! Dataset ingestion, split management, and episode sampling.

pub mod fsds;
pub mod partsworld;
pub mod ppm;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imgproc::{bilinear_resize, crop, hflip};
use crate::tensor::Tensor;
use fsds::{FsdsContents, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Novel,
}

/// One square RGB image, 8-bit interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub side: usize,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    /// Planar `[3,S,S]` float image in [0,1].
    pub fn to_tensor(&self) -> Tensor {
        let s = self.side;
        let mut data = vec![0.0; 3 * s * s];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * s * s + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![3, s, s], data).expect("image shape")
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub role: SplitRole,
    /// (class id, images), sorted by class id.
    pub classes: Vec<(u32, Vec<ImageU8>)>,
}

impl DatasetSplit {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn min_images_per_class(&self) -> usize {
        self.classes.iter().map(|(_, v)| v.len()).min().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub side: usize,
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub novel: DatasetSplit,
}

impl Dataset {
    pub fn split(&self, role: SplitRole) -> &DatasetSplit {
        match role {
            SplitRole::Train => &self.train,
            SplitRole::Val => &self.val,
            SplitRole::Novel => &self.novel,
        }
    }
}

/// Builds the split structure from parsed container + manifest, enforcing
/// the disjoint-label-space and full-coverage invariants.
pub fn assemble_dataset(contents: &FsdsContents, manifest: &Manifest) -> Result<Dataset> {
    if contents.channels != 3 {
        return Err(Error::Dataset(format!(
            "expected 3 channels, got {}",
            contents.channels
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<ImageU8>> = BTreeMap::new();
    for (class, pixels) in &contents.images {
        by_class.entry(*class).or_default().push(ImageU8 {
            side: contents.side,
            pixels: pixels.clone(),
        });
    }
    let mut claimed = std::collections::BTreeSet::new();
    let mut build = |role: SplitRole, ids: &[u32]| -> Result<DatasetSplit> {
        let mut classes = Vec::with_capacity(ids.len());
        for &id in ids {
            if !claimed.insert(id) {
                return Err(Error::Dataset(format!("class {id} assigned to two splits")));
            }
            let images = by_class
                .get(&id)
                .ok_or_else(|| Error::Dataset(format!("manifest names unknown class {id}")))?;
            classes.push((id, images.clone()));
        }
        classes.sort_by_key(|(id, _)| *id);
        Ok(DatasetSplit { role, classes })
    };
    let train = build(SplitRole::Train, &manifest.train)?;
    let val = build(SplitRole::Val, &manifest.val)?;
    let novel = build(SplitRole::Novel, &manifest.novel)?;
    for id in by_class.keys() {
        if !claimed.contains(id) {
            return Err(Error::Dataset(format!("class {id} missing from manifest")));
        }
    }
    Ok(Dataset {
        side: contents.side,
        train,
        val,
        novel,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(dir.join(fsds::DATA_FILE))?;
    let contents = fsds::parse(&bytes)?;
    let manifest_text = std::fs::read_to_string(dir.join(fsds::MANIFEST_FILE))?;
    let manifest = fsds::parse_manifest(&manifest_text)?;
    assemble_dataset(&contents, &manifest)
}

pub fn save_dataset(dir: &Path, contents: &FsdsContents, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(fsds::DATA_FILE), fsds::encode(contents))?;
    std::fs::write(dir.join(fsds::MANIFEST_FILE), manifest.to_text())?;
    Ok(())
}

/// Imports a directory of per-class subdirectories of P6 images. Class
/// directories are taken in sorted name order and assigned to train/val/
/// novel by the given counts; images must share one square size.
pub fn import_ppm_tree(
    src: &Path,
    classes_train: usize,
    classes_val: usize,
    classes_novel: usize,
) -> Result<(FsdsContents, Manifest)> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(src)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    let wanted = classes_train + classes_val + classes_novel;
    if class_dirs.len() < wanted {
        return Err(Error::Dataset(format!(
            "need {wanted} class directories, found {}",
            class_dirs.len()
        )));
    }
    let mut side = None;
    let mut images = Vec::new();
    for (class_id, dir) in class_dirs.iter().take(wanted).enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("no .ppm files in {}", dir.display())));
        }
        for file in files {
            let bytes = std::fs::read(&file)?;
            let (w, h, rgb) = ppm::decode_ppm(&bytes)
                .map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?;
            if w != h {
                return Err(Error::Dataset(format!(
                    "{}: images must be square, got {w}x{h}",
                    file.display()
                )));
            }
            match side {
                None => side = Some(w),
                Some(s) if s != w => {
                    return Err(Error::Dataset(format!(
                        "{}: side {w} differs from earlier {s}",
                        file.display()
                    )))
                }
                _ => {}
            }
            images.push((class_id as u32, rgb));
        }
    }
    let ids = |from: usize, count: usize| (from..from + count).map(|i| i as u32).collect();
    Ok((
        FsdsContents {
            side: side.unwrap(),
            channels: 3,
            images,
        },
        Manifest {
            train: ids(0, classes_train),
            val: ids(classes_train, classes_val),
            novel: ids(classes_train + classes_val, classes_novel),
        },
    ))
}

// ---- episodes -----------------------------------------------------------

/// One N-way K-shot task with M queries per class. Samples are stored as
/// (episode label, image index within that class), label-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Positions of the chosen classes within the split.
    pub classes: Vec<usize>,
    /// Dataset class ids, indexed by episode label.
    pub class_ids: Vec<u32>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

/// Draws N classes then K+M images per class, all without replacement.
pub fn sample_episode(
    split: &DatasetSplit,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if split.n_classes() < n_way {
        return Err(Error::Dataset(format!(
            "need {n_way} classes, split has {}",
            split.n_classes()
        )));
    }
    let per_class = k_shot + m_query;
    // Partial Fisher-Yates over class positions.
    let mut class_pool: Vec<usize> = (0..split.n_classes()).collect();
    for i in 0..n_way {
        let j = rng.random_range(i..class_pool.len());
        class_pool.swap(i, j);
    }
    let classes: Vec<usize> = class_pool[..n_way].to_vec();

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * m_query);
    let mut class_ids = Vec::with_capacity(n_way);
    for (label, &pos) in classes.iter().enumerate() {
        let (id, images) = &split.classes[pos];
        if images.len() < per_class {
            return Err(Error::Dataset(format!(
                "class {id} has {} images, episode needs {per_class}",
                images.len()
            )));
        }
        class_ids.push(*id);
        let mut img_pool: Vec<usize> = (0..images.len()).collect();
        for i in 0..per_class {
            let j = rng.random_range(i..img_pool.len());
            img_pool.swap(i, j);
        }
        for &idx in &img_pool[..k_shot] {
            support.push((label, idx));
        }
        for &idx in &img_pool[k_shot..per_class] {
            query.push((label, idx));
        }
    }
    Ok(Episode {
        classes,
        class_ids,
        support,
        query,
    })
}

/// Training-time augmentation: coin-flip mirror, then a random crop with
/// scale in [0.5, 1.0) resized back to the original side. Per image the rng
/// draws: flip, scale, y0, x0.
pub fn augment(img: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let s = img.shape()[1];
    let flipped;
    let img = if rng.random::<f64>() < 0.5 {
        flipped = hflip(img);
        &flipped
    } else {
        img
    };
    let u: f64 = rng.random_range(0.5..1.0);
    let side = ((s as f64 * u).round() as usize).clamp(1, s);
    let y0 = rng.random_range(0..=s - side);
    let x0 = rng.random_range(0..=s - side);
    bilinear_resize(&crop(img, y0, x0, side), s)
}
