use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, io_err};
use crate::grid::{pnm, DepthMap, RgbImage, ValidityMask};
use crate::synth::{Domain, Manifest};

/// One loaded sample with depths already multiplied by the handle's scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub scene_id: usize,
    pub domain: Domain,
    pub rgb: RgbImage,
    pub raw: DepthMap,
    pub mask: ValidityMask,
    pub gt: DepthMap,
}

/// A dataset directory plus the depth scale applied on load.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    root: PathBuf,
    manifest: Manifest,
    scale: f64,
}

impl DatasetHandle {
    /// Reads the manifest and checks that every referenced file exists.
    pub fn open(root: &Path) -> Result<Self, HarnessError> {
        let manifest = Manifest::load(root)?;
        if manifest.samples.is_empty() {
            return Err(HarnessError::EmptyDataset(root.display().to_string()));
        }
        for s in &manifest.samples {
            for f in [&s.rgb, &s.depth_raw, &s.depth_gt, &s.mask] {
                let p = root.join(f);
                if !p.is_file() {
                    return Err(io_err(&p, "referenced by the manifest but missing"));
                }
            }
        }
        Ok(Self { root: root.to_path_buf(), manifest, scale: 1.0 })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn domain(&self) -> Domain {
        self.manifest.domain
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.manifest.samples[i].id
    }

    /// Same data with depths multiplied by a further `factor` on load.
    pub fn scale_depth(&self, factor: f64) -> Result<Self, HarnessError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(HarnessError::BadFactor(factor));
        }
        Ok(Self { scale: self.scale * factor, ..self.clone() })
    }

    pub fn load(&self, i: usize) -> Result<Sample, HarnessError> {
        let e = &self.manifest.samples[i];
        let rgb = pnm::read_rgb(&self.root.join(&e.rgb))?;
        let mask = pnm::read_mask(&self.root.join(&e.mask))?;
        let raw = pnm::read_depth(&self.root.join(&e.depth_raw))?;
        let gt = pnm::read_depth(&self.root.join(&e.depth_gt))?;
        // a pixel is an input measurement only if both the mask and the depth say so
        let mask = mask.and(&raw.validity()).map_err(|err| io_err(&self.root.join(&e.mask), err))?;
        let raw = raw.masked(&mask).map_err(|err| io_err(&self.root.join(&e.depth_raw), err))?;
        Ok(Sample {
            id: e.id.clone(),
            scene_id: e.scene_id,
            domain: self.manifest.domain,
            rgb,
            raw: raw.scaled(self.scale),
            mask,
            gt: gt.scaled(self.scale),
        })
    }

    pub fn load_many(&self, indices: &[usize]) -> Result<Vec<Sample>, HarnessError> {
        indices.iter().map(|&i| self.load(i)).collect()
    }

    /// Holds out whole scenes, about `frac` of them, so no scene appears in
    /// both splits. A single-scene dataset falls back to holding out its last
    /// samples. Returns sorted `(train, held_out)` sample indices.
    pub fn holdout(&self, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let scenes: Vec<usize> = self.manifest.samples.iter().map(|s| s.scene_id).collect::<BTreeSet<_>>().into_iter().collect();
        if frac <= 0.0 {
            return ((0..n).collect(), Vec::new());
        }
        if scenes.len() < 2 {
            let k = ((frac * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
            return ((0..n - k).collect(), (n - k..n).collect());
        }
        let mut order = scenes.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let k = ((frac * scenes.len() as f64).round() as usize).clamp(1, scenes.len() - 1);
        let held: BTreeSet<usize> = order[..k].iter().copied().collect();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, s) in self.manifest.samples.iter().enumerate() {
            if held.contains(&s.scene_id) {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    }
}

/// Index of a sample in source 0 (primary) or 1 (secondary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub source: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixOptions {
    /// Fraction of training samples drawn from the primary dataset.
    pub ratio: f64,
    /// Fraction of validation samples drawn from the primary dataset.
    pub val_weight: f64,
    /// Fraction of scenes held out for validation, per dataset.
    pub holdout: f64,
}

impl Default for MixOptions {
    fn default() -> Self {
        Self { ratio: 0.5, val_weight: 0.85, holdout: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
}

fn refs(source: usize, idx: &[usize]) -> Vec<SampleRef> {
    idx.iter().map(|&index| SampleRef { source, index }).collect()
}

/// Merges two ordered lists so each is spread evenly over the result.
fn interleave(a: Vec<SampleRef>, b: Vec<SampleRef>) -> Vec<SampleRef> {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut keyed: Vec<(f64, usize, SampleRef)> = a
        .into_iter()
        .enumerate()
        .map(|(i, r)| ((i as f64 + 0.5) / na, 0, r))
        .chain(b.into_iter().enumerate().map(|(i, r)| ((i as f64 + 0.5) / nb, 1, r)))
        .collect();
    keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    keyed.into_iter().map(|k| k.2).collect()
}

/// Mixes pre-split index lists.
///
/// Training takes `ratio` from `a` and the rest from `b`, as many as the
/// smaller side allows (the larger list is truncated). Validation has
/// `|a_val| + |b_val|` entries, `round(val_weight * n)` from `a` and the rest
/// from `b`, cycling through each shuffled held-out list, so a held-out
/// sample may repeat. Training and validation never share a sample.
pub fn mix_splits(
    a_train: &[usize],
    a_val: &[usize],
    b_train: &[usize],
    b_val: &[usize],
    opts: &MixOptions,
    seed: u64,
) -> Result<Mix, HarnessError> {
    if !(0.0..=1.0).contains(&opts.ratio) || !(0.0..=1.0).contains(&opts.val_weight) {
        return Err(HarnessError::BadConfig(format!("mix ratios {:?} must lie in [0, 1]", opts)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shuffled = |v: &[usize], rng: &mut ChaCha8Rng| {
        let mut v = v.to_vec();
        v.shuffle(rng);
        v
    };
    let (at, bt) = (shuffled(a_train, &mut rng), shuffled(b_train, &mut rng));
    let r = opts.ratio;
    let total = match (r > 0.0, r < 1.0) {
        (true, true) => (at.len() as f64 / r).min(bt.len() as f64 / (1.0 - r)),
        (true, false) => at.len() as f64,
        (false, _) => bt.len() as f64,
    };
    let total = (total + 1e-9).floor() as usize;
    let na = ((total as f64 * r).round() as usize).min(at.len());
    let nb = (total - na).min(bt.len());
    let train = interleave(refs(0, &at[..na]), refs(1, &bt[..nb]));

    let (av, bv) = (shuffled(a_val, &mut rng), shuffled(b_val, &mut rng));
    let n_val = av.len() + bv.len();
    let mut va = ((n_val as f64 * opts.val_weight).round() as usize).min(n_val);
    if av.is_empty() {
        va = 0;
    }
    let vb = if bv.is_empty() { 0 } else { n_val - va };
    let val = interleave(
        (0..va).map(|k| SampleRef { source: 0, index: av[k % av.len()] }).collect(),
        (0..vb).map(|k| SampleRef { source: 1, index: bv[k % bv.len()] }).collect(),
    );
    if train.is_empty() {
        return Err(HarnessError::EmptyDataset("training split".into()));
    }
    Ok(Mix { train, val })
}

/// Per-scene holdout of each dataset, then [`mix_splits`]. Without `b`
/// the primary splits are used as they are.
pub fn mix_datasets(a: &DatasetHandle, b: Option<&DatasetHandle>, opts: &MixOptions, seed: u64) -> Result<Mix, HarnessError> {
    if a.is_empty() {
        return Err(HarnessError::EmptyDataset(a.root().display().to_string()));
    }
    let (a_train, a_val) = a.holdout(opts.holdout, seed);
    match b {
        None => {
            if a_train.is_empty() {
                return Err(HarnessError::EmptyDataset("training split".into()));
            }
            Ok(Mix { train: refs(0, &a_train), val: refs(0, &a_val) })
        }
        Some(b) => {
            if b.is_empty() {
                return Err(HarnessError::EmptyDataset(b.root().display().to_string()));
            }
            let (b_train, b_val) = b.holdout(opts.holdout, seed.wrapping_add(1));
            mix_splits(&a_train, &a_val, &b_train, &b_val, opts, seed)
        }
    }
}

/// The primary dataset and an optional secondary one (already scaled).
#[derive(Debug, Clone)]
pub struct Sources {
    pub primary: DatasetHandle,
    pub secondary: Option<DatasetHandle>,
}

impl Sources {
    pub fn handle(&self, source: usize) -> &DatasetHandle {
        match (source, &self.secondary) {
            (0, _) | (_, None) => &self.primary,
            (_, Some(b)) => b,
        }
    }

    pub fn load(&self, refs: &[SampleRef]) -> Result<Vec<Sample>, HarnessError> {
        refs.iter().map(|r| self.handle(r.source).load(r.index)).collect()
    }

    pub fn id(&self, r: SampleRef) -> String {
        let tag = if r.source == 0 { "a" } else { "b" };
        format!("{tag}:{}", self.handle(r.source).id(r.index))
    }
}
