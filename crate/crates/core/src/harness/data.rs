//! In-memory view of one split of a generated dataset.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, IoContext, Result};
use crate::ground_truth::TaskLabels;
use crate::model::{images_to_tensor, BatchInput};
use crate::numeric::Tensor;
use crate::scene::{decode_pgm, DatasetInfo, DatasetManifest, ManifestEntry, Split};

/// Images of one split as 8-bit pixels, with their manifest entries.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub split: Split,
    pub image_size: usize,
    pub entries: Vec<ManifestEntry>,
    pixels: Vec<u8>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_size * self.image_size;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<&TaskLabels> {
        idx.iter().map(|&i| &self.entries[i].labels).collect()
    }

    pub fn images(&self, idx: &[usize]) -> Result<Tensor> {
        let imgs: Vec<&[u8]> = idx.iter().map(|&i| self.image(i)).collect();
        images_to_tensor(&imgs, self.image_size)
    }

    pub fn input(&self, idx: &[usize]) -> Result<BatchInput> {
        self.images(idx).map(BatchInput::Images)
    }
}

/// All three splits of a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let info = DatasetInfo::load(dir)?;
        let manifest = DatasetManifest::load(dir)?;
        let load = |split| load_split(dir, &manifest, split, info.config.image_size);
        Ok(Dataset {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
            info,
        })
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split, size: usize) -> Result<SplitData> {
    let entries: Vec<ManifestEntry> = manifest.split(split).cloned().collect();
    if entries.is_empty() {
        return Err(Error::MissingData(format!("{} split of {} is empty", split.name(), dir.display())));
    }
    let images: Vec<Vec<u8>> = entries
        .par_iter()
        .map(|e| {
            let path = dir.join(e.image_path());
            if !path.exists() {
                return Err(Error::MissingData(format!("missing image {}", path.display())));
            }
            let (w, h, px) = decode_pgm(&std::fs::read(&path).at(&path)?)?;
            if w != size || h != size {
                return Err(Error::Data(format!("{} is {w}x{h}, expected {size}x{size}", path.display())));
            }
            Ok(px)
        })
        .collect::<Result<_>>()?;
    Ok(SplitData {
        split,
        image_size: size,
        entries,
        pixels: images.concat(),
    })
}
