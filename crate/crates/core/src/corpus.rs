//! Unlabeled image collections, the synthetic swatch generator and the
//! pseudo-labeled manifest.
//!
//! A manifest stores distortion parameters, never pixels. Every image gets
//! one record per distortion kind, and pixels are rendered on demand by
//! [`materialize`]. All randomness is keyed by stable hashes of
//! `(seed, image_id, ...)`, so the result does not depend on the order in
//! which images were discovered.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distortion::{distort, sample_params, DistortionKind, DistortionParams, SamplerConfig};
use crate::error::{Error, Result};
use crate::numfmt::sig9;
use crate::pixel::{decode_ppm, encode_ppm, mix, quantize, ImageBuffer};
use crate::rng::{stable_hash, unit_interval, Stream};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Optional sidecar in a corpus directory mapping image ids to main-task
/// labels: one `image_id,label` pair per line after a header row.
pub const LABELS_FILE: &str = "labels.csv";

pub const MIN_SWATCH_SIZE: usize = 8;

/// Eight saturated colors; none of them is gray, so the color-balance
/// operator always has something to act on.
pub const PALETTE: [[f64; 3]; 8] = [
    [196.0, 30.0, 58.0],
    [25.0, 42.0, 86.0],
    [34.0, 120.0, 60.0],
    [222.0, 170.0, 40.0],
    [102.0, 51.0, 153.0],
    [0.0, 128.0, 128.0],
    [240.0, 128.0, 48.0],
    [230.0, 150.0, 180.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwatchFamily {
    Solid = 0,
    HorizontalStripes = 1,
    VerticalStripes = 2,
    Gradient = 3,
    Checker = 4,
}

impl SwatchFamily {
    pub const ALL: [SwatchFamily; 5] = [
        SwatchFamily::Solid,
        SwatchFamily::HorizontalStripes,
        SwatchFamily::VerticalStripes,
        SwatchFamily::Gradient,
        SwatchFamily::Checker,
    ];

    pub fn label(self) -> u8 {
        self as u8
    }
}

/// Everything needed to regenerate one synthetic swatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwatchRecipe {
    pub family: SwatchFamily,
    pub size: usize,
    pub primary: usize,
    pub secondary: usize,
    /// Stripe width, checker cell size, or (for gradients) 0 = horizontal,
    /// 1 = vertical.
    pub period: usize,
    pub phase: usize,
}

impl SwatchRecipe {
    pub fn render(&self) -> ImageBuffer {
        let c1 = PALETTE[self.primary];
        let c2 = PALETTE[self.secondary];
        let (period, phase) = (self.period.max(1), self.phase);
        let last = (self.size - 1) as f64;
        ImageBuffer::from_fn(self.size, self.size, |x, y| match self.family {
            SwatchFamily::Solid => c1,
            SwatchFamily::HorizontalStripes => pick(c1, c2, (y + phase) / period % 2 == 0),
            SwatchFamily::VerticalStripes => pick(c1, c2, (x + phase) / period % 2 == 0),
            SwatchFamily::Gradient => {
                let t = if self.period == 0 { x } else { y } as f64 / last;
                // Whole-number intensities so a swatch survives a PPM round trip.
                let ch = |c: usize| f64::from(quantize(mix(c1[c], c2[c], t)));
                [ch(0), ch(1), ch(2)]
            }
            SwatchFamily::Checker => pick(
                c1,
                c2,
                ((x + phase) / period + (y + phase) / period) % 2 == 0,
            ),
        })
        .expect("swatch size validated at construction")
    }
}

fn pick(a: [f64; 3], b: [f64; 3], first: bool) -> [f64; 3] {
    if first {
        a
    } else {
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ItemSource {
    File(PathBuf),
    Synthetic(SwatchRecipe),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub image_id: String,
    pub source: ItemSource,
    pub main_label: Option<u8>,
}

/// Result of scanning a directory.
#[derive(Debug)]
pub struct ScanReport {
    pub items: Vec<CorpusItem>,
    /// Files that were not `.ppm` images (the labels sidecar included).
    pub skipped: usize,
}

/// Lists every `.ppm` file below `directory`, sorted by id. The id is the
/// path relative to `directory` with `/` separators. Labels are taken from
/// a `labels.csv` sidecar when present.
pub fn scan_corpus(directory: &Path) -> Result<ScanReport> {
    let mut items = Vec::new();
    let mut skipped = 0;
    walk(directory, directory, &mut items, &mut skipped)?;
    if items.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .ppm images under {}",
            directory.display()
        )));
    }
    if skipped > 0 {
        log::warn!(
            "skipped {skipped} non-image files under {}",
            directory.display()
        );
    }
    let labels_path = directory.join(LABELS_FILE);
    if labels_path.is_file() {
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let labels = parse_labels(&text)?;
        for item in &mut items {
            item.main_label = labels.get(&item.image_id).copied();
        }
    }
    items.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(ScanReport { items, skipped })
}

fn walk(root: &Path, dir: &Path, items: &mut Vec<CorpusItem>, skipped: &mut usize) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let kind = entry.file_type().map_err(|e| Error::io(&path, e))?;
        if kind.is_dir() {
            walk(root, &path, items, skipped)?;
        } else if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
        {
            let rel = path.strip_prefix(root).expect("walk stays below root");
            let image_id = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            items.push(CorpusItem {
                image_id,
                source: ItemSource::File(path),
                main_label: None,
            });
        } else if !(dir == root && path.file_name().is_some_and(|n| n == LABELS_FILE)) {
            *skipped += 1;
        }
    }
    Ok(())
}

fn parse_labels(text: &str) -> Result<HashMap<String, u8>> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.rsplit_once(',').ok_or_else(|| {
            Error::InvalidArgument(format!("{LABELS_FILE}:{}: expected id,label", n + 1))
        })?;
        let label = label.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("{LABELS_FILE}:{}: bad label `{label}`", n + 1))
        })?;
        out.insert(id.to_owned(), label);
    }
    Ok(out)
}

/// Generates `count` swatches of `size × size` pixels. Item `i` belongs to
/// family `i mod 5`; colors and pattern geometry come from a stream keyed by
/// `(seed, i)`.
pub fn synth_corpus(
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(CorpusItem, ImageBuffer)>> {
    if count == 0 {
        return Err(Error::InvalidArgument("swatch count must be >= 1".into()));
    }
    if size < MIN_SWATCH_SIZE {
        return Err(Error::InvalidArgument(format!(
            "swatch size must be >= {MIN_SWATCH_SIZE}, got {size}"
        )));
    }
    Ok((0..count)
        .map(|i| {
            let recipe = swatch_recipe(i, size, seed);
            let item = CorpusItem {
                image_id: format!("swatch_{i:05}.ppm"),
                source: ItemSource::Synthetic(recipe),
                main_label: Some(recipe.family.label()),
            };
            (item, recipe.render())
        })
        .collect())
}

fn swatch_recipe(index: usize, size: usize, seed: u64) -> SwatchRecipe {
    let mut s = Stream::new(stable_hash(&[
        b"swatch",
        &seed.to_le_bytes(),
        &(index as u64).to_le_bytes(),
    ]));
    let family = SwatchFamily::ALL[index % SwatchFamily::ALL.len()];
    let primary = s.below(PALETTE.len() as u64) as usize;
    let secondary = (primary + 1 + s.below(PALETTE.len() as u64 - 1) as usize) % PALETTE.len();
    let period = match family {
        SwatchFamily::Gradient => s.below(2) as usize,
        SwatchFamily::Checker => 3 + s.below(8) as usize,
        _ => 2 + s.below(7) as usize,
    };
    let phase = s.below(16) as usize;
    SwatchRecipe {
        family,
        size,
        primary,
        secondary,
        period,
        phase,
    }
}

/// Writes swatches as PPM files plus the labels sidecar.
pub fn write_corpus(dir: &Path, swatches: &[(CorpusItem, ImageBuffer)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = String::from("image_id,main_label\n");
    for (item, img) in swatches {
        let path = dir.join(&item.image_id);
        fs::write(&path, encode_ppm(img)).map_err(|e| Error::io(&path, e))?;
        if let Some(label) = item.main_label {
            let _ = writeln!(labels, "{},{label}", item.image_id);
        }
    }
    let path = dir.join(LABELS_FILE);
    fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

/// Sorted, id-indexed set of images. Pixels are either held in memory or
/// read from disk on each access.
#[derive(Debug, Clone)]
pub struct Corpus {
    items: Vec<CorpusItem>,
    index: HashMap<String, usize>,
    resident: Vec<Option<Arc<ImageBuffer>>>,
}

impl Corpus {
    pub fn new(mut items: Vec<CorpusItem>) -> Result<Self> {
        items.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if index.insert(item.image_id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate image id `{}`",
                    item.image_id
                )));
            }
        }
        let resident = vec![None; items.len()];
        Ok(Self {
            items,
            index,
            resident,
        })
    }

    pub fn from_images(images: Vec<(CorpusItem, ImageBuffer)>) -> Result<Self> {
        let (items, pixels): (Vec<_>, Vec<_>) = images.into_iter().unzip();
        let by_id: HashMap<String, ImageBuffer> = items
            .iter()
            .map(|i| i.image_id.clone())
            .zip(pixels)
            .collect();
        let mut corpus = Self::new(items)?;
        for (slot, item) in corpus.resident.iter_mut().zip(&corpus.items) {
            *slot = by_id.get(&item.image_id).cloned().map(Arc::new);
        }
        Ok(corpus)
    }

    /// Scans `dir` and loads every image into memory.
    pub fn open_dir(dir: &Path) -> Result<Self> {
        Self::new(scan_corpus(dir)?.items)?.into_resident()
    }

    pub fn into_resident(mut self) -> Result<Self> {
        for i in 0..self.items.len() {
            if self.resident[i].is_none() {
                let img = load_item(&self.items[i])?;
                self.resident[i] = Some(Arc::new(img));
            }
        }
        Ok(self)
    }

    pub fn items(&self) -> &[CorpusItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&CorpusItem> {
        self.index.get(image_id).map(|&i| &self.items[i])
    }

    pub fn image(&self, image_id: &str) -> Result<Arc<ImageBuffer>> {
        let &i = self
            .index
            .get(image_id)
            .ok_or_else(|| Error::MissingImage(image_id.to_owned()))?;
        match &self.resident[i] {
            Some(img) => Ok(Arc::clone(img)),
            None => load_item(&self.items[i]).map(Arc::new),
        }
    }

    pub fn main_label(&self, image_id: &str) -> Result<u8> {
        self.get(image_id)
            .ok_or_else(|| Error::MissingImage(image_id.to_owned()))?
            .main_label
            .ok_or_else(|| Error::InvalidArgument(format!("image `{image_id}` has no main label")))
    }

    /// Hex digest over the sorted ids, main labels and canonical PPM bytes.
    pub fn content_hash(&self) -> Result<String> {
        let mut parts: Vec<Vec<u8>> = Vec::with_capacity(self.items.len() * 3);
        for item in &self.items {
            parts.push(item.image_id.as_bytes().to_vec());
            parts.push(vec![item.main_label.unwrap_or(u8::MAX)]);
            let img = self.image(&item.image_id)?;
            parts.push(encode_ppm(&img));
        }
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        Ok(format!("{:016x}", stable_hash(&refs)))
    }
}

fn load_item(item: &CorpusItem) -> Result<ImageBuffer> {
    match &item.source {
        ItemSource::File(path) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_ppm(&bytes)
        }
        ItemSource::Synthetic(recipe) => Ok(recipe.render()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split `{s}` (expected train|val|test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextSample {
    pub image_id: String,
    pub label: DistortionKind,
    pub alpha: f64,
    pub beta: f64,
    pub noise_seed: u64,
    pub split: Split,
}

impl PretextSample {
    pub fn params(&self) -> DistortionParams {
        DistortionParams {
            kind: self.label,
            alpha: self.alpha,
            beta: self.beta,
            noise_seed: self.noise_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be >= 0, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    fn assign(&self, u: f64) -> Split {
        if u < self.train {
            Split::Train
        } else if u < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub global_seed: u64,
    pub corpus_hash: String,
    pub image_count: usize,
    pub sampler: SamplerConfig,
    pub split_fractions: SplitFractions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub samples: Vec<PretextSample>,
}

/// The four records of one image, indexed by label.
#[derive(Debug, Clone, Copy)]
pub struct ImageGroup<'a> {
    pub image_id: &'a str,
    pub split: Split,
    pub samples: [&'a PretextSample; 4],
}

pub fn split_of(seed: u64, image_id: &str, fractions: &SplitFractions) -> Split {
    let h = stable_hash(&[b"split", &seed.to_le_bytes(), image_id.as_bytes()]);
    fractions.assign(unit_interval(h))
}

fn params_stream(seed: u64, image_id: &str, kind: DistortionKind) -> Stream {
    Stream::new(stable_hash(&[
        b"params",
        &seed.to_le_bytes(),
        image_id.as_bytes(),
        &[kind.code()],
    ]))
}

pub fn build_manifest(
    corpus: &Corpus,
    cfg: &SamplerConfig,
    fractions: &SplitFractions,
    seed: u64,
) -> Result<Manifest> {
    cfg.validate()?;
    fractions.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a manifest from an empty corpus".into(),
        ));
    }
    let mut samples = Vec::with_capacity(corpus.len() * 4);
    for item in corpus.items() {
        let split = split_of(seed, &item.image_id, fractions);
        for kind in DistortionKind::ALL {
            let p = sample_params(cfg, kind, &mut params_stream(seed, &item.image_id, kind))?;
            samples.push(PretextSample {
                image_id: item.image_id.clone(),
                label: kind,
                alpha: p.alpha,
                beta: p.beta,
                noise_seed: p.noise_seed,
                split,
            });
        }
    }
    Ok(Manifest {
        header: ManifestHeader {
            schema_version: MANIFEST_SCHEMA_VERSION,
            global_seed: seed,
            corpus_hash: corpus.content_hash()?,
            image_count: corpus.len(),
            sampler: *cfg,
            split_fractions: *fractions,
        },
        samples,
    })
}

impl Manifest {
    /// JSON Lines: the header object, then one record per line with keys in
    /// the fixed order `image_id, label, alpha, beta, noise_seed, split`.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            let id = serde_json::to_string(&s.image_id).expect("string serializes");
            let _ = writeln!(
                out,
                "{{\"image_id\":{id},\"label\":{},\"alpha\":{},\"beta\":{},\"noise_seed\":{},\"split\":\"{}\"}}",
                s.label.code(),
                sig9(s.alpha),
                sig9(s.beta),
                s.noise_seed,
                s.split.name()
            );
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Manifest("empty manifest".into()))?;
        let header: ManifestHeader = serde_json::from_str(first)
            .map_err(|e| Error::Manifest(format!("line 1: bad header: {e}")))?;
        if header.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported schema version {}",
                header.schema_version
            )));
        }
        let samples = lines
            .map(|(n, line)| {
                serde_json::from_str(line)
                    .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<PretextSample>>>()?;
        let manifest = Self { header, samples };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Checks that every image has exactly one record per kind, all in the
    /// same split.
    pub fn validate(&self) -> Result<()> {
        self.groups_where(|_| true).map(|_| ())
    }

    /// Groups of the given split, in image-id order.
    pub fn groups(&self, split: Split) -> Vec<ImageGroup<'_>> {
        self.groups_where(|s| s == split)
            .expect("manifest validated on construction")
    }

    pub fn image_ids(&self, split: Split) -> Vec<&str> {
        self.groups(split).into_iter().map(|g| g.image_id).collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for g in self.groups_where(|_| true).expect("manifest validated") {
            counts[g.split as usize] += 1;
        }
        counts
    }

    fn groups_where(&self, keep: impl Fn(Split) -> bool) -> Result<Vec<ImageGroup<'_>>> {
        let mut by_image: Vec<(&str, Split, [Option<&PretextSample>; 4])> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        for s in &self.samples {
            let slot = *index.entry(&s.image_id).or_insert_with(|| {
                by_image.push((&s.image_id, s.split, [None; 4]));
                by_image.len() - 1
            });
            let entry = &mut by_image[slot];
            if entry.1 != s.split {
                return Err(Error::Manifest(format!(
                    "image `{}` appears in more than one split",
                    s.image_id
                )));
            }
            if entry.2[s.label.index()].replace(s).is_some() {
                return Err(Error::Manifest(format!(
                    "image `{}` has more than one `{}` record",
                    s.image_id, s.label
                )));
            }
        }
        by_image.sort_by(|a, b| a.0.cmp(b.0));
        by_image
            .into_iter()
            .filter(|(_, split, _)| keep(*split))
            .map(|(image_id, split, slots)| {
                let mut samples = [&self.samples[0]; 4];
                for (k, slot) in slots.iter().enumerate() {
                    samples[k] = slot.ok_or_else(|| {
                        Error::Manifest(format!(
                            "image `{image_id}` is missing its `{}` record",
                            DistortionKind::ALL[k]
                        ))
                    })?;
                }
                Ok(ImageGroup {
                    image_id,
                    split,
                    samples,
                })
            })
            .collect()
    }
}

/// Renders one record: loads the source image and applies its distortion.
pub fn materialize(
    sample: &PretextSample,
    corpus: &Corpus,
) -> Result<(ImageBuffer, DistortionKind)> {
    let img = corpus.image(&sample.image_id)?;
    Ok((distort(&img, &sample.params())?, sample.label))
}
