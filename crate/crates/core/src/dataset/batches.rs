use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sample_silence, DatasetManifest, Split};
use crate::augment::{clip_rng, clip_seed, Augmenter, NoiseBank};
use crate::error::{KwsError, Result};
use crate::frontend::{AudioClip, MelFrontend, N_FRAMES, N_MELS};
use crate::tensor::Tensor;

/// Target share of `unknown` and `silence` items in a split's stream.
/// Ignored for classes the subtask does not have.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composition {
    pub unknown_fraction: f64,
    pub silence_fraction: f64,
}

impl Default for Composition {
    fn default() -> Self {
        Composition { unknown_fraction: 0.1, silence_fraction: 0.1 }
    }
}

impl Composition {
    pub fn validate(&self) -> Result<()> {
        let (u, s) = (self.unknown_fraction, self.silence_fraction);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&s) || u + s >= 1.0 {
            return Err(KwsError::config(format!(
                "unknown/silence fractions {u}/{s} must be non-negative and sum below 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipSource {
    /// Index into the manifest.
    Entry(usize),
    /// Background-noise crop drawn from this seed.
    Silence(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub source: ClipSource,
    pub label: usize,
    /// Stable per-clip id used to derive augmentation seeds.
    pub id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

const SILENCE_ID_BASE: u64 = 1 << 40;

/// Shuffled batches of one split for one epoch. Keyword entries are all
/// kept; `unknown` entries are drawn and `silence` items injected so that
/// each makes up its target share of the stream. The last batch may be
/// short.
pub fn make_batches(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    composition: Composition,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(KwsError::config("batch_size must be at least 1"));
    }
    composition.validate()?;
    let idx = manifest.indices(split);
    if idx.is_empty() {
        return Err(KwsError::Dataset { path: manifest.root.clone(), msg: format!("{split} split is empty") });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(seed, epoch, split as u64));
    let unknown = manifest.vocab.unknown_label();
    let (mut unk, known): (Vec<usize>, Vec<usize>) =
        idx.into_iter().partition(|&i| Some(manifest.entries[i].label) == unknown);

    let aux = if unknown.is_some() { composition.unknown_fraction } else { 0.0 }
        + manifest.vocab.silence_label().map_or(0.0, |_| composition.silence_fraction);
    let total = known.len() as f64 / (1.0 - aux);
    let mut items: Vec<BatchItem> = known
        .iter()
        .map(|&i| BatchItem { source: ClipSource::Entry(i), label: manifest.entries[i].label, id: i as u64 })
        .collect();
    if let Some(label) = unknown {
        // With no known keywords in the split, keep every unknown entry.
        let want = if known.is_empty() { unk.len() } else { (composition.unknown_fraction * total).round() as usize };
        unk.shuffle(&mut rng);
        items.extend(unk.iter().cycle().take(want).map(|&i| BatchItem {
            source: ClipSource::Entry(i),
            label,
            id: i as u64,
        }));
    }
    if let Some(label) = manifest.vocab.silence_label() {
        let want = (composition.silence_fraction * total).round() as usize;
        for k in 0..want as u64 {
            items.push(BatchItem { source: ClipSource::Silence(rng.gen()), label, id: SILENCE_ID_BASE + k });
        }
    }
    items.shuffle(&mut rng);
    Ok(items.chunks(batch_size).map(|c| Batch { items: c.to_vec() }).collect())
}

/// Turns batches into feature tensors, augmenting when an augmenter is set.
pub struct Loader<'a> {
    manifest: &'a DatasetManifest,
    noise: NoiseBank,
    augmenter: Option<Augmenter>,
    frontend: MelFrontend,
    seed: u64,
}

impl<'a> Loader<'a> {
    pub fn new(manifest: &'a DatasetManifest, noise: NoiseBank, augmenter: Option<Augmenter>, seed: u64) -> Self {
        Loader { manifest, noise, augmenter, frontend: MelFrontend::new(), seed }
    }

    pub fn noise(&self) -> &NoiseBank {
        &self.noise
    }

    pub fn clip(&self, item: &BatchItem) -> Result<AudioClip> {
        match item.source {
            ClipSource::Entry(i) => self.manifest.load_clip(i),
            ClipSource::Silence(s) => {
                Ok(sample_silence(&self.noise, &mut ChaCha8Rng::seed_from_u64(s))?.with_label(item.label))
            }
        }
    }

    /// `[B, 40, 100]` features and the labels. `augment` applies the
    /// augmenter (if any) with per-clip seeds derived from `epoch`.
    pub fn load(&self, batch: &Batch, epoch: u64, augment: bool) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(batch.items.len() * N_MELS * N_FRAMES);
        let mut labels = Vec::with_capacity(batch.items.len());
        for item in &batch.items {
            let mut clip = self.clip(item)?;
            if let (true, Some(a)) = (augment, &self.augmenter) {
                clip = a.augment(&clip, &mut clip_rng(self.seed, epoch, item.id))?;
            }
            data.extend_from_slice(self.frontend.features(&clip)?.data());
            labels.push(item.label);
        }
        Ok((Tensor::new([labels.len(), N_MELS, N_FRAMES], data)?, labels))
    }
}
