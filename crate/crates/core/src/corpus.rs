//! Text pre-processing, vocabulary, on-disk formats and the synthetic toy world.
//!
//! # FVEC feature files
//!
//! ```text
//! magic    6 bytes  "FVEC1\0"
//! count    u32 LE   number of images
//! per image:
//!   id_len u32 LE, id UTF-8 bytes
//!   k      u32 LE   number of regions
//!   d      u32 LE   feature width
//!   data   k·d f64 LE, row-major
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::updown::RegionFeatureSet;
use crate::{Error, Result, TokenId, BOS, EOS, MAX_LEN, PAD, UNK};

pub const FVEC_MAGIC: &[u8; 6] = b"FVEC1\0";
pub const SPECIAL_TOKENS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Lowercases, splits on whitespace, strips trailing `.`/`,` and keeps at
/// most `max_len - 1` tokens so an EOS still fits.
pub fn tokenize(text: &str, max_len: usize) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.to_lowercase().trim_end_matches(['.', ',']).to_string())
        .filter(|w| !w.is_empty())
        .take(max_len.saturating_sub(1))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    min_count: usize,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Words seen at least `min_count` times get ids after the four specials,
    /// ordered by descending count, then lexicographically.
    pub fn build<'a, I, S>(captions: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for cap in captions {
            for w in cap {
                *counts.entry(w.as_ref()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !SPECIAL_TOKENS.contains(w))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens, min_count)
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            min_count,
            tokens,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIAL_TOKENS[UNK])
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Words up to (not including) the first EOS.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .take_while(|&&t| t != EOS)
            .map(|&t| self.word(t).to_string())
            .collect()
    }

    /// Hex SHA-256 of the token list; identifies the vocabulary in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Vocabulary = serde_json::from_str(&fs::read_to_string(path)?)?;
        if v.tokens.len() < SPECIAL_TOKENS.len()
            || v.tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS.map(String::from)
        {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        Ok(Self::from_tokens(v.tokens, v.min_count))
    }
}

/// A token sequence for one image. Ends with EOS when complete.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub image_id: String,
    pub tokens: Vec<TokenId>,
}

impl CaptionSample {
    pub fn new(image_id: impl Into<String>, tokens: Vec<TokenId>, vocab: usize, max_len: usize) -> Result<Self> {
        if tokens.len() > max_len {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: max_len,
            });
        }
        for &t in &tokens {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            if t == BOS || t == PAD {
                return Err(Error::Config("caption contains BOS or PAD".into()));
            }
        }
        Ok(CaptionSample {
            image_id: image_id.into(),
            tokens,
        })
    }

    /// Tokens before EOS.
    pub fn words(&self) -> &[TokenId] {
        strip_eos(&self.tokens)
    }
}

pub fn strip_eos(tokens: &[TokenId]) -> &[TokenId] {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    &tokens[..end]
}

// ---------------------------------------------------------------------------
// FVEC

fn fmt_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

/// Writes `sets` and returns the byte offset of each record.
pub fn write_fvec<W: Write>(mut w: W, sets: &[RegionFeatureSet]) -> Result<Vec<u64>> {
    let mut offset = FVEC_MAGIC.len() as u64 + 4;
    w.write_all(FVEC_MAGIC)?;
    w.write_all(&(sets.len() as u32).to_le_bytes())?;
    let mut offsets = Vec::with_capacity(sets.len());
    for s in sets {
        offsets.push(offset);
        let id = s.image_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(s.k() as u32).to_le_bytes())?;
        w.write_all(&(s.dim() as u32).to_le_bytes())?;
        for v in s.features().data() {
            w.write_all(&v.to_le_bytes())?;
        }
        offset += 12 + id.len() as u64 + 8 * s.features().len() as u64;
    }
    w.flush()?;
    Ok(offsets)
}

/// Streaming FVEC reader yielding `(record offset, features)`.
pub struct FvecReader<R> {
    inner: R,
    offset: u64,
    remaining: u32,
    failed: bool,
}

impl<R: Read> FvecReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        read_exact_at(&mut inner, &mut magic, 0)?;
        if &magic != FVEC_MAGIC {
            return Err(fmt_err(0, "bad magic"));
        }
        let mut n = [0u8; 4];
        read_exact_at(&mut inner, &mut n, 6)?;
        Ok(FvecReader {
            inner,
            offset: 10,
            remaining: u32::from_le_bytes(n),
            failed: false,
        })
    }

    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        read_exact_at(&mut self.inner, &mut b, self.offset)?;
        self.offset += 4;
        Ok(u32::from_le_bytes(b))
    }

    fn read_record(&mut self) -> Result<(u64, RegionFeatureSet)> {
        let start = self.offset;
        let id_len = self.read_u32()? as usize;
        let mut id = vec![0u8; id_len];
        read_exact_at(&mut self.inner, &mut id, self.offset)?;
        let id = String::from_utf8(id).map_err(|_| fmt_err(self.offset, "image id is not UTF-8"))?;
        self.offset += id_len as u64;
        let k = self.read_u32()? as usize;
        let d = self.read_u32()? as usize;
        if k == 0 || d == 0 {
            return Err(fmt_err(self.offset - 8, "k and d must be positive"));
        }
        let mut data = Vec::with_capacity(k * d);
        let mut b = [0u8; 8];
        for _ in 0..k * d {
            read_exact_at(&mut self.inner, &mut b, self.offset)?;
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(fmt_err(self.offset, "non-finite feature value"));
            }
            data.push(v);
            self.offset += 8;
        }
        Ok((start, RegionFeatureSet::new(id, k, d, data)?))
    }
}

impl<R: Read> Iterator for FvecReader<R> {
    type Item = Result<(u64, RegionFeatureSet)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.remaining == 0 {
            return None;
        }
        let r = self.read_record();
        match &r {
            Ok(_) => self.remaining -= 1,
            Err(_) => self.failed = true,
        }
        Some(r)
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => fmt_err(offset, "truncated file"),
        _ => Error::Io(e),
    })
}

/// Parses a whole FVEC buffer. Fails without returning partial data; all
/// records must share one feature width and no bytes may trail the last record.
pub fn read_fvec(bytes: &[u8]) -> Result<Vec<(u64, RegionFeatureSet)>> {
    let mut reader = FvecReader::new(bytes)?;
    let mut out = Vec::with_capacity(reader.remaining() as usize);
    for rec in reader.by_ref() {
        out.push(rec?);
    }
    if let Some((off, first)) = out.first() {
        let d = first.dim();
        if let Some((o, _)) = out.iter().find(|(_, s)| s.dim() != d) {
            return Err(fmt_err(*o, format!("feature width differs from record at {off}")));
        }
    }
    if reader.offset != bytes.len() as u64 {
        return Err(fmt_err(reader.offset, "trailing bytes"));
    }
    Ok(out)
}

pub fn load_features(path: &Path) -> Result<Vec<(u64, RegionFeatureSet)>> {
    read_fvec(&fs::read(path)?)
}

pub fn save_features(path: &Path, sets: &[RegionFeatureSet]) -> Result<Vec<u64>> {
    let f = io::BufWriter::new(fs::File::create(path)?);
    write_fvec(f, sets)
}

// ---------------------------------------------------------------------------
// Captions and manifest files

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionsFile {
    pub images: Vec<ImageCaptions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCaptions {
    pub id: String,
    pub captions: Vec<String>,
}

impl CaptionsFile {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub feature_offset: u64,
    /// Indices into this image's caption list.
    pub captions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[ManifestEntry]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("manifest has no split {name:?}")))
    }
}

/// One image with its features and tokenized references (no EOS).
#[derive(Clone, Debug)]
pub struct Example {
    pub features: RegionFeatureSet,
    pub refs: Vec<Vec<TokenId>>,
    pub ref_words: Vec<Vec<String>>,
}

impl Example {
    pub fn image_id(&self) -> &str {
        &self.features.image_id
    }

    /// Reference `i` as a teacher-forcing target, EOS appended.
    pub fn target(&self, i: usize) -> Vec<TokenId> {
        let mut t = self.refs[i].clone();
        t.push(EOS);
        t
    }
}

/// Joins features, captions and a manifest split, checking that every entry
/// resolves to exactly one feature record and at least one reference.
pub fn assemble_split(
    features: &[(u64, RegionFeatureSet)],
    captions: &CaptionsFile,
    manifest: &DatasetManifest,
    split: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example>> {
    let by_offset: HashMap<u64, &RegionFeatureSet> = features.iter().map(|(o, s)| (*o, s)).collect();
    let caps: HashMap<&str, &ImageCaptions> = captions.images.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut out = Vec::new();
    for e in manifest.split(split)? {
        let feats = by_offset
            .get(&e.feature_offset)
            .filter(|f| f.image_id == e.image_id)
            .ok_or_else(|| Error::Config(format!("{}: no feature record at offset {}", e.image_id, e.feature_offset)))?;
        let ic = caps
            .get(e.image_id.as_str())
            .ok_or_else(|| Error::Config(format!("{}: no captions", e.image_id)))?;
        if e.captions.is_empty() {
            return Err(Error::Config(format!("{}: no references", e.image_id)));
        }
        let mut ref_words = Vec::new();
        for &i in &e.captions {
            let text = ic
                .captions
                .get(i)
                .ok_or_else(|| Error::Config(format!("{}: caption index {i} out of range", e.image_id)))?;
            ref_words.push(tokenize(text, max_len));
        }
        let refs = ref_words.iter().map(|w| vocab.encode(w)).collect();
        out.push(Example {
            features: (*feats).clone(),
            refs,
            ref_words,
        });
    }
    Ok(out)
}

/// A dataset directory: `features.fvec`, `captions.json` and `manifest.json`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Vec<(u64, RegionFeatureSet)>,
    pub captions: CaptionsFile,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            features: load_features(&dir.join(FEATURES_FILE))?,
            captions: CaptionsFile::load(&dir.join(CAPTIONS_FILE))?,
            manifest: DatasetManifest::load(&dir.join(MANIFEST_FILE))?,
        })
    }

    pub fn examples(&self, split: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Example>> {
        assemble_split(&self.features, &self.captions, &self.manifest, split, vocab, max_len)
    }

    /// Tokenized reference captions of one split.
    pub fn tokenized(&self, split: &str, max_len: usize) -> Result<Vec<Vec<String>>> {
        let caps: HashMap<&str, &ImageCaptions> =
            self.captions.images.iter().map(|c| (c.id.as_str(), c)).collect();
        let mut out = Vec::new();
        for e in self.manifest.split(split)? {
            let ic = caps
                .get(e.image_id.as_str())
                .ok_or_else(|| Error::Config(format!("{}: no captions", e.image_id)))?;
            for &i in &e.captions {
                let text = ic
                    .captions
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("{}: caption index {i} out of range", e.image_id)))?;
                out.push(tokenize(text, max_len));
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Synthetic toy world

pub const ATTRIBUTES: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
pub const NOUNS: [&str; 10] = ["ball", "cube", "cup", "dog", "cat", "car", "box", "book", "chair", "lamp"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub max_objects: usize,
    pub noise_sigma: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            max_objects: 4,
            noise_sigma: 0.1,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// Feature width of the toy world: one-hot attribute followed by one-hot noun.
pub const SYNTH_FEATURE_DIM: usize = ATTRIBUTES.len() + NOUNS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ToyObject {
    pub noun: usize,
    pub attribute: usize,
}

/// The three reference captions of a set of objects, mentioned in canonical
/// (noun, attribute) order so the text is a function of the object set.
pub fn toy_captions(objects: &[ToyObject]) -> [String; 3] {
    let mut objs = objects.to_vec();
    objs.sort();
    let pairs: Vec<String> = objs
        .iter()
        .map(|o| format!("{} {}", ATTRIBUTES[o.attribute], NOUNS[o.noun]))
        .collect();
    let articled: Vec<String> = pairs.iter().map(|p| format!("a {p}")).collect();
    [
        articled.join(" and "),
        format!("there is {}", pairs.join(" and ")),
        format!("a photo of {}", pairs.join(" with ")),
    ]
}

/// Reads objects back from noise-free or noisy region features by picking
/// the strongest attribute and noun code in each region.
pub fn decode_regions(v: &RegionFeatureSet) -> Vec<ToyObject> {
    let argmax = |xs: &[f64]| {
        xs.iter()
            .enumerate()
            .fold(0, |best, (i, x)| if *x > xs[best] { i } else { best })
    };
    (0..v.k())
        .map(|i| {
            let r = v.region(i);
            ToyObject {
                attribute: argmax(&r[..ATTRIBUTES.len()]),
                noun: argmax(&r[ATTRIBUTES.len()..SYNTH_FEATURE_DIM]),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub features: Vec<RegionFeatureSet>,
    pub captions: CaptionsFile,
    /// Split name per image, in generation order.
    pub splits: Vec<&'static str>,
}

pub fn synth_generate(seed: u64, n_images: usize, cfg: &SynthConfig) -> Result<SynthData> {
    if n_images == 0 {
        return Err(Error::Empty("synthetic dataset"));
    }
    if cfg.max_objects == 0 || cfg.max_objects > 4 {
        return Err(Error::Config("max_objects must be in 1..=4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut all_objects: Vec<ToyObject> = (0..NOUNS.len())
        .flat_map(|noun| (0..ATTRIBUTES.len()).map(move |attribute| ToyObject { noun, attribute }))
        .collect();
    let mut features = Vec::with_capacity(n_images);
    let mut images = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let id = format!("img{i:05}");
        let n_obj = rng.gen_range(1..=cfg.max_objects);
        all_objects.shuffle(&mut rng);
        let objects = &all_objects[..n_obj];
        let mut data = Vec::with_capacity(n_obj * SYNTH_FEATURE_DIM);
        for o in objects {
            for j in 0..SYNTH_FEATURE_DIM {
                let hot = j == o.attribute || j == ATTRIBUTES.len() + o.noun;
                data.push(f64::from(u8::from(hot)) + noise.sample(&mut rng));
            }
        }
        features.push(RegionFeatureSet::new(id.clone(), n_obj, SYNTH_FEATURE_DIM, data)?);
        images.push(ImageCaptions {
            id,
            captions: toy_captions(objects).to_vec(),
        });
    }
    let n_test = (n_images as f64 * cfg.test_fraction).round() as usize;
    let n_val = (n_images as f64 * cfg.val_fraction).round() as usize;
    let n_train = n_images.saturating_sub(n_test + n_val);
    let splits = (0..n_images)
        .map(|i| match i {
            i if i < n_train => "train",
            i if i < n_train + n_val => "val",
            _ => "test",
        })
        .collect();
    Ok(SynthData {
        features,
        captions: CaptionsFile { images },
        splits,
    })
}

pub const FEATURES_FILE: &str = "features.fvec";
pub const CAPTIONS_FILE: &str = "captions.json";
pub const MANIFEST_FILE: &str = "manifest.json";

impl SynthData {
    /// Writes `features.fvec`, `captions.json` and `manifest.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir)?;
        let offsets = save_features(&dir.join(FEATURES_FILE), &self.features)?;
        self.captions.save(&dir.join(CAPTIONS_FILE))?;
        let mut splits: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
        for name in ["train", "val", "test"] {
            splits.insert(name.to_string(), Vec::new());
        }
        for ((f, off), split) in self.features.iter().zip(offsets).zip(&self.splits) {
            let n_caps = self
                .captions
                .images
                .iter()
                .find(|c| c.id == f.image_id)
                .map_or(0, |c| c.captions.len());
            splits.get_mut(*split).expect("known split").push(ManifestEntry {
                image_id: f.image_id.clone(),
                feature_offset: off,
                captions: (0..n_caps).collect(),
            });
        }
        let manifest = DatasetManifest { splits };
        manifest.save(&dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    /// In-memory examples for the images assigned to `split`.
    pub fn examples(&self, split: &str, vocab: &Vocabulary) -> Vec<Example> {
        self.features
            .iter()
            .zip(&self.captions.images)
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|((f, c), _)| {
                let ref_words: Vec<Vec<String>> = c.captions.iter().map(|t| tokenize(t, MAX_LEN)).collect();
                Example {
                    features: f.clone(),
                    refs: ref_words.iter().map(|w| vocab.encode(w)).collect(),
                    ref_words,
                }
            })
            .collect()
    }

    /// Tokenized captions of one split, for vocabulary building.
    pub fn tokenized(&self, split: &str) -> Vec<Vec<String>> {
        self.captions
            .images
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .flat_map(|(c, _)| c.captions.iter().map(|t| tokenize(t, MAX_LEN)))
            .collect()
    }
}
