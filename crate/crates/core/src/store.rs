//! On-disk formats for images, models, features and dataset manifests.
//!
//! All integers and floats are little-endian. Images (`TIMG`) are a bare
//! 8-byte header followed by pixels:
//!
//! ```text
//! "TIMG" | height u16 | width u16 | height*width f32
//! ```
//!
//! Models and feature files share a sealed container whose trailer is the
//! SHA-256 of every byte before it:
//!
//! ```text
//! magic [4] | version u16 | flags u16 | body_len u64 | body | sha256 [32]
//! ```
//!
//! `TFEA` body:
//!
//! ```text
//! count u32 | steps u16 | d_c u16 | height u16 | width u16
//! count x record:
//!   id_len u16 | id utf8 | label u8 | gen_len u16 | generator utf8
//!   origin u8 x steps | z_end timestep u16 | z_end f32 x height*width
//!   embeddings f32 x steps*d_c | final losses f32 x steps
//! ```
//!
//! `TDNZ` body:
//!
//! ```text
//! height u16 | width u16 | time_dim u16 | cond_dim u16 | hidden u32
//! hidden_layers u16 | network
//! ```
//!
//! `TMLP` body:
//!
//! ```text
//! dim u32 | mean f32 x dim | std f32 x dim | network
//! ```
//!
//! A network is `activation u16 | n_widths u16 | widths u32 x n_widths`
//! followed by each layer's row-major weight then bias.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::MlpModel;
use crate::datagen::{Corpus, CorpusItem, DatasetConfig, GeneratorSpec, Split};
use crate::denoiser::{ConditionEmbedding, DenoiserParams, DenoiserTopology, EmbeddingOrigin};
use crate::error::{Error, FormatError, Result};
use crate::nn::{Activation, Dense, Mlp};
use crate::tensor::{Image, Latent};
use crate::tofe::{Label, SourceInfo, TofeFeature};

pub const IMAGE_MAGIC: [u8; 4] = *b"TIMG";
pub const FEATURE_MAGIC: [u8; 4] = *b"TFEA";
pub const DENOISER_MAGIC: [u8; 4] = *b"TDNZ";
pub const CLASSIFIER_MAGIC: [u8; 4] = *b"TMLP";
pub const FEATURE_VERSION: u16 = 1;
pub const DENOISER_VERSION: u16 = 1;
pub const CLASSIFIER_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u32 = 1;

const SEAL_HEADER: usize = 16;
const DIGEST_LEN: usize = 32;

/// Lowercase hex SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temp file and renames it into place. Returns the
/// content hash.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(content_hash(bytes))
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(bytes) => Ok(bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingInput(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u16::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} exceeds u16")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u32(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} exceeds u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn str(&mut self, s: &str, what: &str) -> Result<()> {
        self.u16(s.len(), what)?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn f32s(&mut self, values: &[f32], what: &str) -> Result<()> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{what} contains non-finite value {v}")));
        }
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            FormatError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u16()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| FormatError::Malformed("string is not utf-8".into()).into())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::Malformed("float count overflows".into()))?;
        let raw = self.take(len)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Malformed("non-finite float".into()).into());
        }
        Ok(values)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            ))
            .into());
        }
        Ok(())
    }
}

fn seal(magic: [u8; 4], version: u16, flags: u16, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(SEAL_HEADER + body.len() + DIGEST_LEN);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Checks magic, version, declared length and digest, in that order.
fn unseal(bytes: &[u8], magic: [u8; 4], version: u16) -> Result<(u16, &[u8])> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { needed: SEAL_HEADER, available: bytes.len() }.into());
    }
    if bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: magic,
            found: bytes[..4].try_into().expect("4 bytes"),
        }
        .into());
    }
    if bytes.len() < SEAL_HEADER {
        return Err(FormatError::Truncated { needed: SEAL_HEADER, available: bytes.len() }.into());
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(FormatError::UnsupportedVersion { found, supported: version }.into());
    }
    let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let needed = usize::try_from(body_len)
        .ok()
        .and_then(|n| n.checked_add(SEAL_HEADER + DIGEST_LEN))
        .ok_or_else(|| FormatError::Malformed("declared length overflows".into()))?;
    if bytes.len() != needed {
        return Err(FormatError::Truncated { needed, available: bytes.len() }.into());
    }
    let (content, digest) = bytes.split_at(needed - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(FormatError::HashMismatch.into());
    }
    Ok((flags, &content[SEAL_HEADER..]))
}

pub fn encode_image(image: &Image) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(&IMAGE_MAGIC);
    w.u16(image.height, "image height")?;
    w.u16(image.width, "image width")?;
    w.f32s(&image.pixels, "image")?;
    Ok(w.buf)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != IMAGE_MAGIC {
        return Err(FormatError::BadMagic { expected: IMAGE_MAGIC, found: magic }.into());
    }
    let (h, w) = (r.u16()?, r.u16()?);
    let pixels = r.f32s(h * w)?;
    r.finish()?;
    Image::new(h, w, pixels)
}

pub fn write_image(path: &Path, image: &Image) -> Result<String> {
    atomic_write(path, &encode_image(image)?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&read_input(path)?)
}

fn put_network(w: &mut Writer, net: &Mlp) -> Result<()> {
    w.u16(net.activation.code() as usize, "activation")?;
    let widths = net.widths();
    w.u16(widths.len(), "layer count")?;
    for &width in &widths {
        w.u32(width, "layer width")?;
    }
    for layer in &net.layers {
        w.f32s(&layer.weight, "weights")?;
        w.f32s(&layer.bias, "biases")?;
    }
    Ok(())
}

fn get_network(r: &mut Reader) -> Result<Mlp> {
    let code = r.u16()?;
    let activation = Activation::from_code(code as u16)
        .ok_or_else(|| FormatError::Malformed(format!("unknown activation code {code}")))?;
    let n = r.u16()?;
    if n < 2 {
        return Err(FormatError::Malformed("network needs at least two widths".into()).into());
    }
    let widths: Vec<usize> = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(n - 1);
    for pair in widths.windows(2) {
        let (inputs, outputs) = (pair[0], pair[1]);
        let count = inputs
            .checked_mul(outputs)
            .ok_or_else(|| FormatError::Malformed("layer size overflows".into()))?;
        let weight = r.f32s(count)?;
        let bias = r.f32s(outputs)?;
        layers.push(Dense { inputs, outputs, weight, bias });
    }
    Ok(Mlp { layers, activation })
}

pub fn encode_denoiser(params: &DenoiserParams) -> Result<Vec<u8>> {
    let t = params.topology();
    let mut w = Writer::new();
    w.u16(t.height, "height")?;
    w.u16(t.width, "width")?;
    w.u16(t.time_dim, "time_dim")?;
    w.u16(t.cond_dim, "cond_dim")?;
    w.u32(t.hidden, "hidden")?;
    w.u16(t.hidden_layers, "hidden_layers")?;
    put_network(&mut w, params.net())?;
    Ok(seal(DENOISER_MAGIC, DENOISER_VERSION, 0, &w.buf))
}

pub fn decode_denoiser(bytes: &[u8]) -> Result<DenoiserParams> {
    let (_, body) = unseal(bytes, DENOISER_MAGIC, DENOISER_VERSION)?;
    let mut r = Reader::new(body);
    let (height, width, time_dim, cond_dim) = (r.u16()?, r.u16()?, r.u16()?, r.u16()?);
    let hidden = r.u32()?;
    let hidden_layers = r.u16()?;
    let net = get_network(&mut r)?;
    r.finish()?;
    let topology = DenoiserTopology {
        height,
        width,
        time_dim,
        cond_dim,
        hidden,
        hidden_layers,
        activation: net.activation,
    };
    DenoiserParams::from_parts(topology, net)
        .map_err(|e| FormatError::Malformed(format!("network does not match topology: {e}")).into())
}

pub fn write_denoiser(path: &Path, params: &DenoiserParams) -> Result<String> {
    atomic_write(path, &encode_denoiser(params)?)
}

pub fn read_denoiser(path: &Path) -> Result<DenoiserParams> {
    decode_denoiser(&read_input(path)?)
}

pub fn encode_classifier(model: &MlpModel) -> Result<Vec<u8>> {
    let dim = model.net.input_dim();
    if model.mean.len() != dim || model.std.len() != dim {
        return Err(Error::Contract("normalization length differs from input width".into()));
    }
    let mut w = Writer::new();
    w.u32(dim, "input dim")?;
    w.f32s(&model.mean, "mean")?;
    w.f32s(&model.std, "std")?;
    put_network(&mut w, &model.net)?;
    Ok(seal(CLASSIFIER_MAGIC, CLASSIFIER_VERSION, 0, &w.buf))
}

pub fn decode_classifier(bytes: &[u8]) -> Result<MlpModel> {
    let (_, body) = unseal(bytes, CLASSIFIER_MAGIC, CLASSIFIER_VERSION)?;
    let mut r = Reader::new(body);
    let dim = r.u32()?;
    let mean = r.f32s(dim)?;
    let std = r.f32s(dim)?;
    let net = get_network(&mut r)?;
    r.finish()?;
    if net.input_dim() != dim {
        return Err(FormatError::Malformed("network input width differs from header".into()).into());
    }
    Ok(MlpModel { net, mean, std })
}

pub fn write_classifier(path: &Path, model: &MlpModel) -> Result<String> {
    atomic_write(path, &encode_classifier(model)?)
}

pub fn read_classifier(path: &Path) -> Result<MlpModel> {
    decode_classifier(&read_input(path)?)
}

/// Serializes features. Every feature must share steps, embedding width and
/// latent shape.
pub fn encode_features(features: &[TofeFeature]) -> Result<Vec<u8>> {
    let (steps, d_c, h, wd) = match features.first() {
        Some(f) => (f.steps(), f.cond_dim(), f.z_end.height, f.z_end.width),
        None => (0, 0, 0, 0),
    };
    let mut w = Writer::new();
    w.u32(features.len(), "record count")?;
    w.u16(steps, "steps")?;
    w.u16(d_c, "d_c")?;
    w.u16(h, "height")?;
    w.u16(wd, "width")?;
    for f in features {
        if f.steps() != steps
            || f.embeddings.iter().any(|e| e.dim() != d_c)
            || f.per_step_final_loss.len() != steps
            || f.z_end.height != h
            || f.z_end.width != wd
        {
            return Err(Error::Contract(format!(
                "feature {} does not share the file's dimensions",
                f.source.id
            )));
        }
        w.str(&f.source.id, "source id length")?;
        w.u8(f.source.label.code());
        w.str(&f.source.generator, "generator tag length")?;
        for e in &f.embeddings {
            w.u8(e.origin.code());
        }
        w.u16(f.z_end.timestep, "timestep")?;
        w.f32s(&f.z_end.data, "z_end")?;
        for e in &f.embeddings {
            w.f32s(&e.values, "embedding")?;
        }
        w.f32s(&f.per_step_final_loss, "final losses")?;
    }
    Ok(seal(FEATURE_MAGIC, FEATURE_VERSION, 0, &w.buf))
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<TofeFeature>> {
    let (_, body) = unseal(bytes, FEATURE_MAGIC, FEATURE_VERSION)?;
    let mut r = Reader::new(body);
    let count = r.u32()?;
    let (steps, d_c, h, w) = (r.u16()?, r.u16()?, r.u16()?, r.u16()?);
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.str()?;
        let label_code = r.u8()?;
        let label = Label::from_code(label_code)
            .ok_or_else(|| FormatError::Malformed(format!("unknown label code {label_code}")))?;
        let generator = r.str()?;
        let origins: Vec<EmbeddingOrigin> = (0..steps)
            .map(|_| {
                let code = r.u8()?;
                EmbeddingOrigin::from_code(code)
                    .ok_or_else(|| FormatError::Malformed(format!("unknown origin code {code}")).into())
            })
            .collect::<Result<_>>()?;
        let timestep = r.u16()?;
        let z = r.f32s(h * w)?;
        let embeddings = origins
            .into_iter()
            .map(|origin| Ok(ConditionEmbedding { values: r.f32s(d_c)?, origin }))
            .collect::<Result<Vec<_>>>()?;
        let per_step_final_loss = r.f32s(steps)?;
        out.push(TofeFeature {
            source: SourceInfo { id, label, generator },
            embeddings,
            per_step_final_loss,
            z_end: Latent::new(h, w, z, timestep)?,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_feature_file(path: &Path, features: &[TofeFeature]) -> Result<String> {
    atomic_write(path, &encode_features(features)?)
}

pub fn read_feature_file(path: &Path) -> Result<Vec<TofeFeature>> {
    decode_features(&read_input(path)?)
}

/// Writes a JSON document with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_input(path)?)?)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORMALIZATION: &str = "pixels scaled to [-1, 1]";

/// One image file listed in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub generator: String,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train_real: usize,
    pub train_fake: usize,
    pub test_real: usize,
    pub test_fake: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub normalization: String,
    pub real_seed: u64,
    pub generators: Vec<GeneratorSpec>,
    pub train_generators: Vec<String>,
    pub test_generators: Vec<String>,
    pub counts: BTreeMap<String, SplitCounts>,
    pub items: Vec<ManifestEntry>,
    /// Digest over every entry's id and file hash.
    pub content_hash: String,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.items.iter().filter(move |e| e.split == split)
    }
}

fn manifest_digest(items: &[ManifestEntry]) -> String {
    let mut h = Sha256::new();
    for e in items {
        h.update(e.id.as_bytes());
        h.update([0]);
        h.update(e.hash.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

fn image_file_name(id: &str) -> String {
    format!("images/{}.timg", id.replace('/', "_"))
}

/// Writes every image of the corpus plus `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, corpus: &Corpus, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    let mut items = Vec::with_capacity(corpus.items.len());
    let mut counts: BTreeMap<String, SplitCounts> =
        corpus.generators.iter().map(|g| (g.id.clone(), SplitCounts::default())).collect();
    for item in &corpus.items {
        let rel = image_file_name(&item.source.id);
        let hash = write_image(&dir.join(&rel), &item.image)?;
        let c = counts.entry(item.source.generator.clone()).or_default();
        match (item.split, item.source.label) {
            (Split::Train, Label::Real) => c.train_real += 1,
            (Split::Train, Label::Fake) => c.train_fake += 1,
            (Split::Test, Label::Real) => c.test_real += 1,
            (Split::Test, Label::Fake) => c.test_fake += 1,
        }
        items.push(ManifestEntry {
            id: item.source.id.clone(),
            label: item.source.label,
            generator: item.source.generator.clone(),
            split: item.split,
            path: rel,
            hash,
        });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        height: cfg.image_size,
        width: cfg.image_size,
        normalization: NORMALIZATION.into(),
        real_seed: cfg.real_seed,
        generators: corpus.generators.clone(),
        train_generators: corpus.train_generators.clone(),
        test_generators: corpus.test_generators(),
        counts,
        content_hash: manifest_digest(&items),
        items,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a dataset and checks every file against the manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Corpus)> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: manifest.format_version.min(u16::MAX as u32) as u16,
            supported: MANIFEST_VERSION as u16,
        }
        .into());
    }
    let known: Vec<&str> = manifest.generators.iter().map(|g| g.id.as_str()).collect();
    if let Some(g) = manifest.train_generators.iter().find(|g| !known.contains(&g.as_str())) {
        return Err(Error::Config(format!("training generator {g:?} is not listed")));
    }
    if manifest_digest(&manifest.items) != manifest.content_hash {
        return Err(FormatError::HashMismatch.into());
    }
    let mut items = Vec::with_capacity(manifest.items.len());
    for e in &manifest.items {
        let path: PathBuf = dir.join(&e.path);
        let bytes = read_input(&path)?;
        if content_hash(&bytes) != e.hash {
            return Err(FormatError::HashMismatch.into());
        }
        items.push(CorpusItem {
            source: SourceInfo { id: e.id.clone(), label: e.label, generator: e.generator.clone() },
            split: e.split,
            image: decode_image(&bytes)?,
        });
    }
    let corpus = Corpus {
        generators: manifest.generators.clone(),
        train_generators: manifest.train_generators.clone(),
        items,
    };
    Ok((manifest, corpus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feature(id: &str, steps: usize, d_c: usize, seed: f32) -> TofeFeature {
        TofeFeature {
            source: SourceInfo { id: id.into(), label: Label::Fake, generator: "g01".into() },
            embeddings: (0..steps)
                .map(|s| ConditionEmbedding {
                    values: (0..d_c).map(|i| seed + (s * d_c + i) as f32 * 0.25).collect(),
                    origin: EmbeddingOrigin::Optimized,
                })
                .collect(),
            per_step_final_loss: (0..steps).map(|s| s as f32 * 0.1).collect(),
            z_end: Latent::new(2, 3, vec![seed; 6], 100).unwrap(),
        }
    }

    #[test]
    fn feature_round_trip_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tfea");
        let feats = vec![feature("a", 2, 4, 1.0), feature("b", 2, 4, -3.0)];
        let hash = write_feature_file(&path, &feats).unwrap();
        assert_eq!(hash, content_hash(&fs::read(&path).unwrap()));
        assert_eq!(read_feature_file(&path).unwrap(), feats);

        write_feature_file(&path, &[]).unwrap();
        assert!(read_feature_file(&path).unwrap().is_empty());
    }

    #[test]
    fn heterogeneous_features_rejected() {
        let feats = vec![feature("a", 2, 4, 1.0), feature("b", 3, 4, 1.0)];
        assert!(matches!(encode_features(&feats), Err(Error::Contract(_))));
        let feats = vec![feature("a", 2, 4, 1.0), feature("b", 2, 5, 1.0)];
        assert!(matches!(encode_features(&feats), Err(Error::Contract(_))));
    }

    #[test]
    fn every_flipped_byte_is_detected() {
        let bytes = encode_features(&[feature("a", 1, 3, 0.5)]).unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(decode_features(&bad).is_err(), "flip at {i} went unnoticed");
        }
        for i in SEAL_HEADER..bytes.len() - DIGEST_LEN {
            let mut bad = bytes.clone();
            bad[i] ^= 0x80;
            assert!(matches!(decode_features(&bad), Err(Error::Format(FormatError::HashMismatch))));
        }
    }

    #[test]
    fn four_distinct_read_errors() {
        let bytes = encode_features(&[feature("a", 1, 3, 0.5)]).unwrap();
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_features(&magic), Err(Error::Format(FormatError::BadMagic { .. }))));
        let mut version = bytes.clone();
        version[4] += 1;
        assert!(matches!(
            decode_features(&version),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 2, supported: 1 }))
        ));
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(
                decode_features(&bytes[..cut]),
                Err(Error::Format(FormatError::Truncated { .. }))
            ));
        }
        let mut hash = bytes.clone();
        let last = hash.len() - 1;
        hash[last] ^= 0xff;
        assert!(matches!(decode_features(&hash), Err(Error::Format(FormatError::HashMismatch))));
    }

    #[test]
    fn missing_file_is_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_feature_file(&dir.path().join("nope.tfea")),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn non_finite_values_refused() {
        let mut f = feature("a", 1, 2, 0.0);
        f.embeddings[0].values[1] = f32::NAN;
        assert!(matches!(encode_features(&[f]), Err(Error::Numeric(_))));
    }

    #[test]
    fn image_layout() {
        let img = Image::new(1, 2, vec![0.5, -1.0]).unwrap();
        let bytes = encode_image(&img).unwrap();
        assert_eq!(&bytes[..8], b"TIMG\x01\x00\x02\x00");
        assert_eq!(&bytes[8..12], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 16);
        assert_eq!(decode_image(&bytes).unwrap(), img);
        assert!(matches!(decode_image(&bytes[..15]), Err(Error::Format(FormatError::Truncated { .. }))));
    }

    #[test]
    fn denoiser_round_trip() {
        let topo = DenoiserTopology { height: 4, width: 4, hidden: 8, ..DenoiserTopology::default() };
        let params = DenoiserParams::init(topo, 5);
        let bytes = encode_denoiser(&params).unwrap();
        let back = decode_denoiser(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(encode_denoiser(&back).unwrap(), bytes);
        assert!(matches!(decode_classifier(&bytes), Err(Error::Format(FormatError::BadMagic { .. }))));
    }

    proptest! {
        #[test]
        fn features_round_trip_byte_identical(
            steps in 0usize..4,
            d_c in 0usize..6,
            n in 0usize..5,
            seed in -100.0f32..100.0,
            id in "[a-z0-9/_]{0,12}",
        ) {
            let feats: Vec<_> = (0..n).map(|i| feature(&format!("{id}{i}"), steps, d_c, seed + i as f32)).collect();
            let bytes = encode_features(&feats).unwrap();
            let back = decode_features(&bytes).unwrap();
            prop_assert_eq!(&back, &feats);
            prop_assert_eq!(encode_features(&back).unwrap(), bytes);
        }

        #[test]
        fn images_round_trip(h in 1usize..6, w in 1usize..6, v in -1.0f32..1.0) {
            let img = Image::new(h, w, (0..h * w).map(|i| v * i as f32).collect()).unwrap();
            prop_assert_eq!(decode_image(&encode_image(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn json_floats_round_trip_exactly(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("v.json");
            write_json(&path, &vec![v]).unwrap();
            let back: Vec<f64> = read_json(&path).unwrap();
            prop_assert_eq!(back[0].to_bits(), v.to_bits());
        }
    }
}
