//! Patch and token embedders producing equal-shape `(m, d_f)` feature
//! sequences for the two modalities.

use rand::Rng;

use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{xavier_uniform, Bound, KeyMask, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
/// First id available to ordinary tokens.
pub const FIRST_CONTENT_ID: u32 = 3;

/// `H × W × C` image with values in `[0, 1]`, stored row-major (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl DocumentImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || pixels.len() != height * width * channels {
            return Err(Error::Data(format!(
                "image {height}x{width}x{channels} cannot hold {} pixels",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("pixel {i} outside [0, 1]: {}", pixels[i])));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Flattened `P × P × C` patches in raster order of the patch grid.
    pub fn patches(&self, patch: usize) -> Result<Vec<f64>> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {patch}x{patch} patches",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(self.pixels.len());
        for gy in 0..self.height / patch {
            for gx in 0..self.width / patch {
                for py in 0..patch {
                    for px in 0..patch {
                        for c in 0..self.channels {
                            out.push(self.pixel(gy * patch + py, gx * patch + px, c) as f64);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fixed-length `[CLS] … [SEP] [PAD]*` id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    /// Wraps raw content ids, truncating or padding to exactly `n_max`.
    pub fn from_content(content: &[u32], n_max: usize) -> Result<Self> {
        if n_max < 2 {
            return Err(Error::Config(format!("n_max must be at least 2, got {n_max}")));
        }
        if let Some(&bad) = content.iter().find(|&&id| id < FIRST_CONTENT_ID) {
            return Err(Error::Data(format!("content id {bad} collides with a reserved id")));
        }
        let keep = content.len().min(n_max - 2);
        let mut ids = Vec::with_capacity(n_max);
        ids.push(CLS_ID);
        ids.extend_from_slice(&content[..keep]);
        ids.push(SEP_ID);
        ids.resize(n_max, PAD_ID);
        Ok(Self { ids })
    }

    /// Validates an already-framed sequence.
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        let real = ids.iter().take_while(|&&id| id != PAD_ID).count();
        let framed = ids.len() >= 2
            && ids[0] == CLS_ID
            && real >= 2
            && ids[real - 1] == SEP_ID
            && ids[1..real - 1].iter().all(|&id| id >= FIRST_CONTENT_ID)
            && ids[real..].iter().all(|&id| id == PAD_ID);
        if !framed {
            return Err(Error::Data("token ids are not a [CLS] .. [SEP] [PAD]* sequence".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `true` at real (non-padding) positions, including `[CLS]`/`[SEP]`.
    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }

    pub fn content(&self) -> &[u32] {
        let real = self.ids.iter().take_while(|&&id| id != PAD_ID).count();
        &self.ids[1..real - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub n_max: usize,
    pub d_f: usize,
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Shared sequence length of both modalities.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.channels == 0 || self.d_f == 0 {
            return Err(Error::Config("channels and d_f must be positive".into()));
        }
        if self.n_max != self.seq_len() {
            return Err(Error::Config(format!(
                "n_max {} must equal 1 + HW/P^2 = {}",
                self.n_max,
                self.seq_len()
            )));
        }
        if self.vocab_size <= FIRST_CONTENT_ID as usize {
            return Err(Error::Config(format!("vocab_size {} leaves no content ids", self.vocab_size)));
        }
        Ok(())
    }
}

/// Patch projection, learned `[CLS]` row and positional table.
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub cfg: EncoderConfig,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let patch_dim = cfg.patch * cfg.patch * cfg.channels;
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), patch_dim, cfg.d_f, rng),
            cls: store.add(format!("{name}.cls"), xavier_uniform(rng, 1, cfg.d_f).reshape(&[cfg.d_f])?),
            pos: store.add(format!("{name}.pos"), xavier_uniform(rng, cfg.seq_len(), cfg.d_f)),
            cfg,
        })
    }

    /// `[B, N+1, d_f]` features for a batch of images.
    pub fn forward<'t>(&self, p: &Bound<'t>, tape: &'t Tape, images: &[&DocumentImage]) -> Result<Var<'t>> {
        let c = &self.cfg;
        let b = images.len();
        let n = c.num_patches();
        let patch_dim = c.patch * c.patch * c.channels;
        let mut data = Vec::with_capacity(b * n * patch_dim);
        for img in images {
            if (img.height(), img.width(), img.channels()) != (c.height, c.width, c.channels) {
                return Err(Error::shape(
                    "patch_embed",
                    &[img.height(), img.width(), img.channels()],
                    &[c.height, c.width, c.channels],
                ));
            }
            data.extend(img.patches(c.patch)?);
        }
        let patches = tape.constant(Tensor::new(vec![b, n, patch_dim], data)?);
        let rows = self.proj.forward(p, patches)?;
        let cls = p[self.cls].reshape(&[1, 1, c.d_f])?.expand(&[b, 1, c.d_f])?;
        concat(&[cls, rows], 1)?.add(p[self.pos])
    }
}

/// Token table plus positional table.
#[derive(Debug, Clone, Copy)]
pub struct TokenEmbed {
    pub table: ParamId,
    pub pos: ParamId,
    pub cfg: EncoderConfig,
}

impl TokenEmbed {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            table: store.add(format!("{name}.table"), xavier_uniform(rng, cfg.vocab_size, cfg.d_f)),
            pos: store.add(format!("{name}.pos"), xavier_uniform(rng, cfg.n_max, cfg.d_f)),
            cfg,
        })
    }

    /// `[B, n_max, d_f]` features and the padding mask for attention.
    pub fn forward<'t>(&self, p: &Bound<'t>, toks: &[&TokenSequence]) -> Result<(Var<'t>, KeyMask)> {
        let c = &self.cfg;
        let mut ids = Vec::with_capacity(toks.len() * c.n_max);
        let mut mask = Vec::with_capacity(toks.len());
        for t in toks {
            if t.len() != c.n_max {
                return Err(Error::shape("token_embed", &[t.len()], &[c.n_max]));
            }
            if let Some(&bad) = t.ids().iter().find(|&&id| id as usize >= c.vocab_size) {
                return Err(Error::Data(format!(
                    "token id {bad} is outside the vocabulary of {}",
                    c.vocab_size
                )));
            }
            ids.extend(t.ids().iter().map(|&id| id as usize));
            mask.push(t.mask());
        }
        let rows = p[self.table]
            .gather_rows(&ids)?
            .reshape(&[toks.len(), c.n_max, c.d_f])?;
        Ok((rows.add(p[self.pos])?, KeyMask::new(&mask)?))
    }
}

/// Row 0 (the `[CLS]` position) of `[.., m, d]` features, as `[.., d]`.
pub fn pool_cls(features: Var<'_>) -> Result<Var<'_>> {
    let shape = features.shape();
    if shape.len() < 2 {
        return Err(Error::shape("pool_cls", &shape, &[]));
    }
    let axis = shape.len() - 2;
    let mut out = shape.clone();
    out.remove(axis);
    features.slice(axis, 0, 1)?.reshape(&out)
}
