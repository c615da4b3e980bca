//! Seeded synthetic corpus of paired (image, token sequence, label) documents.
//!
//! Each class owns an image template (one intensity level per patch) and a
//! disjoint block of content token ids. A record's image is its class template
//! plus clipped Gaussian pixel noise; its tokens are drawn from the class block,
//! each replaced by a uniformly random content id with the corruption
//! probability. A `weak_modality_rate` fraction of records has the class signal
//! removed from one of the two modalities (chosen uniformly), mimicking
//! documents whose text is unreadable or whose layout is uninformative.
//!
//! # File format
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic            4 bytes  "XCLC"
//! version          u16      1
//! spec             classes u32, samples_per_class u32, height u32, width u32,
//!                  channels u32, patch u32, vocab_size u32, n_max u32,
//!                  content_min u32, content_max u32, pixel_noise f64,
//!                  token_corruption f64, weak_modality_rate f64, seed u64
//! record count     u64
//! records          split u8 (0 train, 1 val, 2 test),
//!                  image f32 × (height·width·channels), HWC order,
//!                  token count u32, token ids u32 × count,
//!                  label u16
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::{DocumentImage, EncoderConfig, TokenSequence, FIRST_CONTENT_ID};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 4] = b"XCLC";
pub const CORPUS_VERSION: u16 = 1;

const LEVELS: [f32; 3] = [0.15, 0.5, 0.85];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub vocab_size: usize,
    pub n_max: usize,
    /// Inclusive range of content tokens per record before framing.
    pub content_min: usize,
    pub content_max: usize,
    pub pixel_noise: f64,
    pub token_corruption: f64,
    pub weak_modality_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples_per_class: 100,
            height: 16,
            width: 16,
            channels: 1,
            patch: 4,
            vocab_size: 64,
            n_max: 17,
            content_min: 6,
            content_max: 20,
            pixel_noise: 0.25,
            token_corruption: 0.3,
            weak_modality_rate: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn content_vocab(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT_ID as usize)
    }

    pub fn block_size(&self) -> usize {
        self.content_vocab() / self.classes.max(1)
    }

    pub fn num_patches(&self) -> usize {
        if self.patch == 0 {
            return 0;
        }
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(Error::Config(format!("need 2..=65535 classes, got {}", self.classes)));
        }
        if self.samples_per_class < 1 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) || self.channels == 0 {
            return Err(Error::Config(format!(
                "image {}x{}x{} does not tile into {}x{} patches",
                self.height, self.width, self.channels, self.patch, self.patch
            )));
        }
        for (name, v) in [
            ("pixel_noise", self.pixel_noise),
            ("token_corruption", self.token_corruption),
            ("weak_modality_rate", self.weak_modality_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.block_size() < 2 {
            return Err(Error::Config(format!(
                "vocab_size {} is too small for {} disjoint token blocks",
                self.vocab_size, self.classes
            )));
        }
        if self.n_max < 2 || self.content_min < 1 || self.content_min > self.content_max {
            return Err(Error::Config(format!(
                "bad token lengths: n_max {}, content {}..={}",
                self.n_max, self.content_min, self.content_max
            )));
        }
        if self.num_patches() < self.classes.ilog(LEVELS.len()) as usize + 1 {
            return Err(Error::Config("too few patches for distinct class templates".into()));
        }
        Ok(())
    }

    /// Encoder geometry matching this corpus for feature width `d_f`.
    pub fn encoder_config(&self, d_f: usize) -> EncoderConfig {
        EncoderConfig {
            patch: self.patch,
            height: self.height,
            width: self.width,
            channels: self.channels,
            vocab_size: self.vocab_size,
            n_max: self.n_max,
            d_f,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub image: DocumentImage,
    pub tokens: TokenSequence,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: SyntheticCorpusSpec,
    pub train: Vec<CorpusRecord>,
    pub val: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[CorpusRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One patch-level intensity grid per class, pairwise distinct.
pub fn class_templates(spec: &SyntheticCorpusSpec, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    let n = spec.num_patches();
    let mut templates: Vec<Vec<f32>> = Vec::with_capacity(spec.classes);
    while templates.len() < spec.classes {
        let t: Vec<f32> = (0..n).map(|_| LEVELS[rng.random_range(0..LEVELS.len())]).collect();
        if !templates.contains(&t) {
            templates.push(t);
        }
    }
    templates
}

/// Token id range `[lo, hi)` owned by `class`.
pub fn class_block(spec: &SyntheticCorpusSpec, class: usize) -> (u32, u32) {
    let lo = FIRST_CONTENT_ID as usize + class * spec.block_size();
    (lo as u32, (lo + spec.block_size()) as u32)
}

fn render_image(spec: &SyntheticCorpusSpec, template: Option<&[f32]>, noise: &Normal<f64>, rng: &mut impl Rng) -> Vec<f32> {
    let grid_w = spec.width / spec.patch;
    let mut px = Vec::with_capacity(spec.height * spec.width * spec.channels);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let base = template.map_or(0.5, |t| t[(y / spec.patch) * grid_w + x / spec.patch]) as f64;
            for _ in 0..spec.channels {
                let v = if spec.pixel_noise > 0.0 {
                    base + noise.sample(rng)
                } else {
                    base
                };
                px.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    px
}

fn draw_tokens(spec: &SyntheticCorpusSpec, block: Option<(u32, u32)>, rng: &mut impl Rng) -> Vec<u32> {
    let len = rng.random_range(spec.content_min..=spec.content_max);
    let any = (FIRST_CONTENT_ID, spec.vocab_size as u32);
    (0..len)
        .map(|_| {
            let (lo, hi) = match block {
                Some(b) if !rng.random_bool(spec.token_corruption) => b,
                _ => any,
            };
            rng.random_range(lo..hi)
        })
        .collect()
}

/// Deterministic 80/10/10 per-class split of a freshly generated corpus.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = class_templates(spec, &mut rng);
    let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("pixel noise: {e}")))?;
    let mut corpus = Corpus {
        spec: *spec,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in 0..spec.classes {
        let mut records = Vec::with_capacity(spec.samples_per_class);
        for _ in 0..spec.samples_per_class {
            let (mut image_signal, mut text_signal) = (true, true);
            if rng.random_bool(spec.weak_modality_rate) {
                if rng.random_bool(0.5) {
                    image_signal = false;
                } else {
                    text_signal = false;
                }
            }
            let template = image_signal.then(|| templates[class].as_slice());
            let pixels = render_image(spec, template, &noise, &mut rng);
            let block = text_signal.then(|| class_block(spec, class));
            let content = draw_tokens(spec, block, &mut rng);
            records.push(CorpusRecord {
                image: DocumentImage::new(spec.height, spec.width, spec.channels, pixels)?,
                tokens: TokenSequence::from_content(&content, spec.n_max)?,
                label: class,
            });
        }
        let n = records.len();
        let (n_val, n_test) = (n / 10, n / 10);
        let n_train = n - n_val - n_test;
        let mut it = records.into_iter();
        corpus.train.extend(it.by_ref().take(n_train));
        corpus.val.extend(it.by_ref().take(n_val));
        corpus.test.extend(it);
    }
    corpus.train.shuffle(&mut rng);
    corpus.val.shuffle(&mut rng);
    corpus.test.shuffle(&mut rng);
    Ok(corpus)
}

/// Class-balanced minibatch: `c = min(classes available, size / 2)` classes,
/// each contributing at least two records, so every anchor has a positive.
pub fn make_batch<'a>(records: &'a [CorpusRecord], size: usize, rng: &mut impl Rng) -> Result<Vec<&'a CorpusRecord>> {
    if size < 4 {
        return Err(Error::Config(format!("batch size must be at least 4, got {size}")));
    }
    let num_classes = records.iter().map(|r| r.label + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, r) in records.iter().enumerate() {
        by_class[r.label].push(i);
    }
    let mut available: Vec<usize> = (0..num_classes).filter(|&c| by_class[c].len() >= 2).collect();
    if available.len() < 2 {
        return Err(Error::Data("need at least two classes with two records each".into()));
    }
    available.shuffle(rng);
    let c = available.len().min(size / 2);
    let (base, extra) = (size / c, size % c);
    let mut batch = Vec::with_capacity(size);
    for (rank, &class) in available[..c].iter().enumerate() {
        let want = base + usize::from(rank < extra);
        let pool = &by_class[class];
        if pool.len() < want {
            return Err(Error::Data(format!(
                "class {class} has {} records, batch needs {want}",
                pool.len()
            )));
        }
        for i in rand::seq::index::sample(rng, pool.len(), want) {
            batch.push(&records[pool[i]]);
        }
    }
    Ok(batch)
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>> {
    let s = &corpus.spec;
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    put_u16(&mut out, CORPUS_VERSION);
    for v in [
        s.classes,
        s.samples_per_class,
        s.height,
        s.width,
        s.channels,
        s.patch,
        s.vocab_size,
        s.n_max,
        s.content_min,
        s.content_max,
    ] {
        put_u32(&mut out, v)?;
    }
    put_f64(&mut out, s.pixel_noise);
    put_f64(&mut out, s.token_corruption);
    put_f64(&mut out, s.weak_modality_rate);
    put_u64(&mut out, s.seed);
    put_u64(&mut out, corpus.len() as u64);
    for (tag, records) in [(0u8, &corpus.train), (1, &corpus.val), (2, &corpus.test)] {
        for r in records.iter() {
            out.push(tag);
            for px in r.image.pixels() {
                out.extend_from_slice(&px.to_le_bytes());
            }
            put_u32(&mut out, r.tokens.len())?;
            for &id in r.tokens.ids() {
                out.extend_from_slice(&id.to_le_bytes());
            }
            let label = u16::try_from(r.label).map_err(|_| Error::Data(format!("label {} exceeds u16", r.label)))?;
            put_u16(&mut out, label);
        }
    }
    Ok(out)
}

/// Little-endian reader that reports byte offsets on failure.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            detail: detail.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("unexpected end of data (needed {n} more bytes)")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4], version: u16) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let found = self.u16()?;
        if found != version {
            return Err(Error::UnsupportedVersion {
                found,
                expected: version,
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CORPUS_MAGIC, CORPUS_VERSION)?;
    let spec_at = r.offset();
    let spec = SyntheticCorpusSpec {
        classes: r.usize32()?,
        samples_per_class: r.usize32()?,
        height: r.usize32()?,
        width: r.usize32()?,
        channels: r.usize32()?,
        patch: r.usize32()?,
        vocab_size: r.usize32()?,
        n_max: r.usize32()?,
        content_min: r.usize32()?,
        content_max: r.usize32()?,
        pixel_noise: r.f64()?,
        token_corruption: r.f64()?,
        weak_modality_rate: r.f64()?,
        seed: r.u64()?,
    };
    spec.validate().map_err(|e| Error::Format {
        offset: spec_at,
        detail: format!("invalid spec: {e}"),
    })?;
    let count = r.u64()?;
    let pixels_per_image = spec.height * spec.width * spec.channels;
    let mut corpus = Corpus {
        spec,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for _ in 0..count {
        let at = r.offset();
        let bad = |e: Error| Error::Format {
            offset: at,
            detail: format!("invalid record: {e}"),
        };
        let tag = r.u8()?;
        let mut pixels = Vec::with_capacity(pixels_per_image);
        for _ in 0..pixels_per_image {
            pixels.push(r.f32()?);
        }
        let n = r.usize32()?;
        if n != spec.n_max {
            return Err(r.fail(format!("token count {n} differs from n_max {}", spec.n_max)));
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.u32()?);
        }
        let label = r.u16()? as usize;
        if label >= spec.classes {
            return Err(bad(Error::Data(format!("label {label} >= {} classes", spec.classes))));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= spec.vocab_size) {
            return Err(bad(Error::Data(format!("token id {id} outside vocabulary"))));
        }
        let record = CorpusRecord {
            image: DocumentImage::new(spec.height, spec.width, spec.channels, pixels).map_err(bad)?,
            tokens: TokenSequence::from_ids(ids).map_err(bad)?,
            label,
        };
        match tag {
            0 => corpus.train.push(record),
            1 => corpus.val.push(record),
            2 => corpus.test.push(record),
            t => return Err(bad(Error::Data(format!("unknown split tag {t}")))),
        }
    }
    r.finish()?;
    Ok(corpus)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    std::fs::write(path, encode_corpus(corpus)?)?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    decode_corpus(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            samples_per_class: 20,
            ..SyntheticCorpusSpec::default()
        }
    }

    #[test]
    fn default_split_sizes() {
        let c = generate_corpus(&SyntheticCorpusSpec::default()).unwrap();
        assert_eq!((c.train.len(), c.val.len(), c.test.len()), (320, 40, 40));
        for split in [&c.train, &c.val, &c.test] {
            for k in 0..4 {
                let n = split.iter().filter(|r| r.label == k).count();
                assert_eq!(n * 4, split.len());
            }
        }
    }

    #[test]
    fn noiseless_spec_is_degenerate() {
        let spec = SyntheticCorpusSpec {
            pixel_noise: 0.0,
            token_corruption: 0.0,
            weak_modality_rate: 0.0,
            ..small()
        };
        let c = generate_corpus(&spec).unwrap();
        let all: Vec<&CorpusRecord> = c.train.iter().chain(&c.val).chain(&c.test).collect();
        for k in 0..spec.classes {
            let (lo, hi) = class_block(&spec, k);
            let same: Vec<_> = all.iter().filter(|r| r.label == k).collect();
            for r in &same {
                assert_eq!(r.image, same[0].image);
                assert!(r.tokens.content().iter().all(|&id| (lo..hi).contains(&id)));
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = encode_corpus(&generate_corpus(&small()).unwrap()).unwrap();
        let b = encode_corpus(&generate_corpus(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SyntheticCorpusSpec { seed: 9, ..small() };
        assert_ne!(a, encode_corpus(&generate_corpus(&other).unwrap()).unwrap());
    }

    #[test]
    fn tiny_vocab_is_config_error() {
        let spec = SyntheticCorpusSpec {
            vocab_size: 10,
            ..small()
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn batch_is_class_balanced_and_reproducible() {
        let c = generate_corpus(&small()).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = make_batch(&c.train, 8, &mut r1).unwrap();
        let b = make_batch(&c.train, 8, &mut r2).unwrap();
        let labels = |v: &[&CorpusRecord]| v.iter().map(|r| r.label).collect::<Vec<_>>();
        assert_eq!(labels(&a), labels(&b));
        let mut counts = [0; 4];
        for r in &a {
            counts[r.label] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
        assert!(matches!(make_batch(&c.train, 3, &mut r1), Err(Error::Config(_))));
    }

    #[test]
    fn every_anchor_has_a_positive() {
        let c = generate_corpus(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for size in [4, 5, 7, 8, 12, 16] {
            let b = make_batch(&c.train, size, &mut rng).unwrap();
            assert_eq!(b.len(), size);
            for (i, r) in b.iter().enumerate() {
                assert!(b.iter().enumerate().any(|(j, s)| j != i && s.label == r.label));
            }
        }
    }

    #[test]
    fn corrupt_magic_and_version() {
        let mut bytes = encode_corpus(&generate_corpus(&small()).unwrap()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(decode_corpus(&bad), Err(Error::Format { offset: 0, .. })));
        bytes[4] = 2;
        assert!(matches!(
            decode_corpus(&bytes),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_corpus(&generate_corpus(&small()).unwrap()).unwrap();
        let cut = bytes.len() - 3;
        match decode_corpus(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0 && offset <= cut as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn both_modalities_carry_class_signal() {
        let spec = SyntheticCorpusSpec::default();
        let c = generate_corpus(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let templates = class_templates(&spec, &mut rng);
        let grid_w = spec.width / spec.patch;
        let mut img_hits = 0;
        let mut tok_hits = 0;
        for r in &c.test {
            let dist = |t: &[f32]| -> f64 {
                let mut d = 0.0;
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        let e = r.image.pixel(y, x, 0) as f64 - t[(y / spec.patch) * grid_w + x / spec.patch] as f64;
                        d += e * e;
                    }
                }
                d
            };
            let nearest = (0..spec.classes)
                .min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b])))
                .unwrap();
            img_hits += usize::from(nearest == r.label);
            let votes: Vec<usize> = (0..spec.classes)
                .map(|k| {
                    let (lo, hi) = class_block(&spec, k);
                    r.tokens.content().iter().filter(|&&id| (lo..hi).contains(&id)).count()
                })
                .collect();
            let best = (0..spec.classes).max_by_key(|&k| (votes[k], std::cmp::Reverse(k))).unwrap();
            tok_hits += usize::from(best == r.label);
        }
        let chance = c.test.len() / spec.classes;
        assert!(img_hits > chance, "image {img_hits}");
        assert!(tok_hits > chance, "tokens {tok_hits}");
    }
}
