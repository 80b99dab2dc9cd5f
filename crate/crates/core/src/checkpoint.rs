//! Checkpoint files and cross-encoder to dual-encoder weight infusion.
//!
//! A checkpoint is a tensor container:
//!
//! ```text
//! b"NTC1" | header length (u32 LE) | header (UTF-8) | f32 LE blobs
//! ```
//!
//! The header is line-oriented. `key=value` lines carry metadata; each tensor
//! is described by `tensor <name> f32 <rows>x<cols> <offset> <nbytes>` with
//! offsets relative to the start of the blob section, and `total_bytes=<n>`
//! gives the blob section size. Model checkpoints also get a `<path>.cfg`
//! sidecar of `key=value` lines holding the architecture, role and the
//! vocabulary path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{forward, EncoderWeights, ModelConfig, Role};
use crate::numkernel::Matrix;
use crate::tokenizer::{encode_single, Vocab};

const MAGIC: &[u8; 4] = b"NTC1";

/// Tensors and metadata read from a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self {
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        let mut offset = 0usize;
        let mut seen = std::collections::HashSet::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') || k.starts_with("tensor ") || k == "total_bytes" {
                return Err(Error::Format(format!("invalid metadata key or value `{k}`")));
            }
            writeln!(header, "{k}={v}").unwrap();
        }
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) || !seen.insert(name.as_str()) {
                return Err(Error::Format(format!("invalid or duplicate tensor name `{name}`")));
            }
            let nbytes = t.len() * 4;
            writeln!(header, "tensor {name} f32 {}x{} {offset} {nbytes}", t.rows(), t.cols()).unwrap();
            offset += nbytes;
        }
        writeln!(header, "total_bytes={offset}").unwrap();
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(msg.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing NTC1 magic"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header extends past end of file"))?;
        let header = std::str::from_utf8(&bytes[8..header_end]).map_err(|_| bad("header is not UTF-8"))?;
        let blobs = &bytes[header_end..];

        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        let mut total = None;
        for line in header.lines() {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 5 || parts[1] != "f32" {
                    return Err(Error::Format(format!("malformed tensor entry `{line}`")));
                }
                let (r, c) = parts[2]
                    .split_once('x')
                    .ok_or_else(|| Error::Format(format!("malformed shape in `{line}`")))?;
                let num = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Format(format!("malformed number in `{line}`")))
                };
                entries.push((parts[0].to_string(), num(r)?, num(c)?, num(parts[3])?, num(parts[4])?));
            } else if let Some(v) = line.strip_prefix("total_bytes=") {
                total = Some(v.parse::<usize>().map_err(|_| bad("malformed total_bytes"))?);
            } else if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            } else if !line.is_empty() {
                return Err(Error::Format(format!("unrecognized header line `{line}`")));
            }
        }
        let total = total.ok_or_else(|| bad("header lacks total_bytes"))?;
        if blobs.len() != total {
            return Err(Error::Format(format!(
                "blob section holds {} bytes, header declares {total}",
                blobs.len()
            )));
        }
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, rows, cols, offset, nbytes) in entries {
            if offset != expected_offset || nbytes != rows * cols * 4 || offset + nbytes > total {
                return Err(Error::Format(format!("tensor {name} has an inconsistent byte range")));
            }
            if tensors.iter().any(|(n, _): &(String, Matrix<f32>)| *n == name) {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            let data = blobs[offset..offset + nbytes]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
            expected_offset += nbytes;
        }
        if expected_offset != total {
            return Err(bad("tensor table does not cover the blob section"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Default for TensorContainer {
    fn default() -> Self {
        Self::new()
    }
}

/// Architecture and provenance stored next to a model checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub config: ModelConfig,
    pub role: Role,
    pub vocab_path: Option<PathBuf>,
}

/// `<checkpoint>.cfg`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Writes the weights and their `.cfg` sidecar.
pub fn save(weights: &EncoderWeights<f32>, path: impl AsRef<Path>, vocab_path: Option<&Path>) -> Result<()> {
    let path = path.as_ref();
    weights.validate()?;
    let mut container = TensorContainer::new();
    container.meta.insert("role".into(), weights.role.as_str().into());
    container.tensors = weights
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    container.save(path)?;

    let mut cfg = String::new();
    for (k, v) in weights.config.to_kv() {
        writeln!(cfg, "{k}={v}").unwrap();
    }
    writeln!(cfg, "role={}", weights.role.as_str()).unwrap();
    if let Some(v) = vocab_path {
        writeln!(cfg, "vocab={}", sidecar_vocab_ref(path, v).display()).unwrap();
    }
    let side = sidecar_path(path);
    std::fs::write(&side, cfg).map_err(|e| Error::io(&side, e))
}

/// The vocabulary as seen from the checkpoint's directory, so a run directory
/// stays self-contained and byte-identical wherever it lives.
fn sidecar_vocab_ref(checkpoint: &Path, vocab: &Path) -> PathBuf {
    let dir = checkpoint.parent().unwrap_or(Path::new(""));
    if let Ok(rel) = vocab.strip_prefix(dir) {
        if !dir.as_os_str().is_empty() || vocab.is_relative() {
            return rel.to_path_buf();
        }
    }
    std::fs::canonicalize(vocab).unwrap_or_else(|_| vocab.to_path_buf())
}

pub fn load_info(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let side = sidecar_path(path.as_ref());
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let map = parse_kv(&text)?;
    let config = ModelConfig::from_kv(|k| map.get(k).cloned())?;
    let role = Role::parse(
        map.get("role")
            .ok_or_else(|| Error::Format("config sidecar lacks `role`".into()))?,
    )?;
    Ok(CheckpointInfo {
        config,
        role,
        vocab_path: map.get("vocab").map(|v| {
            let v = PathBuf::from(v);
            match path.as_ref().parent() {
                Some(dir) if v.is_relative() => dir.join(v),
                _ => v,
            }
        }),
    })
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("expected key=value, got `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Loads weights and checks every tensor against the sidecar's architecture.
pub fn load(path: impl AsRef<Path>) -> Result<(EncoderWeights<f32>, CheckpointInfo)> {
    let path = path.as_ref();
    let info = load_info(path)?;
    let container = TensorContainer::load(path)?;
    if let Some(role) = container.meta.get("role") {
        if Role::parse(role)? != info.role {
            return Err(Error::Validation(format!(
                "checkpoint role {role} disagrees with sidecar role {}",
                info.role.as_str()
            )));
        }
    }
    let mut weights = EncoderWeights::zeros(&info.config, info.role);
    let expected = weights.named_tensors().len();
    if container.tensors.len() != expected {
        return Err(Error::Validation(format!(
            "checkpoint holds {} tensors, config implies {expected}",
            container.tensors.len()
        )));
    }
    for (name, dst) in weights.named_tensors_mut() {
        let src = container
            .get(&name)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor {name}")))?;
        if src.shape() != dst.shape() {
            return Err(Error::Validation(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    weights.validate()?;
    Ok((weights, info))
}

/// Builds a dual encoder of `de_num_layers` layers from a cross encoder.
///
/// Embedding tables, the embedding layer norm and encoder layers
/// `0..k_copy` are copied; the remaining layers come from a fresh seeded
/// initialization and the classification head is dropped.
pub fn infuse(
    ce: &EncoderWeights<f32>,
    de_num_layers: usize,
    k_copy: usize,
    seed: u64,
) -> Result<EncoderWeights<f32>> {
    infuse_into(ce, &ce.config.with_layers(de_num_layers), k_copy, seed)
}

/// As [`infuse`], with an explicit target architecture that must match the
/// source in every dimension except depth.
pub fn infuse_into(
    ce: &EncoderWeights<f32>,
    de_config: &ModelConfig,
    k_copy: usize,
    seed: u64,
) -> Result<EncoderWeights<f32>> {
    let src = &ce.config;
    if (src.hidden, src.heads, src.ff, src.vocab_size, src.max_positions, src.segment_types)
        != (
            de_config.hidden,
            de_config.heads,
            de_config.ff,
            de_config.vocab_size,
            de_config.max_positions,
            de_config.segment_types,
        )
    {
        return Err(Error::Shape(
            "source and target differ in a dimension other than depth".into(),
        ));
    }
    if k_copy > de_config.num_layers || k_copy > ce.layers.len() {
        return Err(Error::Config(format!(
            "cannot copy {k_copy} layers from a {}-layer source into a {}-layer target",
            ce.layers.len(),
            de_config.num_layers
        )));
    }
    let mut de = EncoderWeights::init_random(de_config, seed, Role::DualEncoder)?;
    de.config.layer_norm_eps = src.layer_norm_eps;
    de.word = ce.word.clone();
    de.position = ce.position.clone();
    de.segment = ce.segment.clone();
    de.emb_ln_gamma = ce.emb_ln_gamma.clone();
    de.emb_ln_beta = ce.emb_ln_beta.clone();
    for l in 0..k_copy {
        de.layers[l] = ce.layers[l].clone();
    }
    Ok(de)
}

/// Random seeded dual encoder with the same width as `like`; used for the
/// random-initialized baselines.
pub fn random_dual_encoder(like: &ModelConfig, num_layers: usize, seed: u64) -> Result<EncoderWeights<f32>> {
    EncoderWeights::init_random(&like.with_layers(num_layers), seed, Role::DualEncoder)
}

/// Layer-by-layer agreement between a source model and an infused copy.
#[derive(Debug, Clone, PartialEq)]
pub struct InfusionReport {
    pub k_copy: usize,
    /// Max absolute deviation of hidden-state index `i` over all probes,
    /// for `i` in `0..=min(L_src, L_dst)`.
    pub max_dev: Vec<f64>,
    /// Indices `≤ k_copy` whose deviation reaches the tolerance.
    pub flagged: Vec<usize>,
    pub tolerance: f64,
}

impl InfusionReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }

    /// Largest deviation over the copied prefix (indices `0..=k_copy`).
    pub fn prefix_max_dev(&self) -> f64 {
        self.max_dev
            .iter()
            .take(self.k_copy + 1)
            .cloned()
            .fold(0.0, f64::max)
    }
}

pub const INFUSION_TOLERANCE: f64 = 1e-6;

/// Feeds identical encodings of `probes` through both stacks and compares
/// hidden states index by index.
pub fn verify_infusion(
    src: &EncoderWeights<f32>,
    dst: &EncoderWeights<f32>,
    k_copy: usize,
    vocab: &Vocab,
    probes: &[&str],
    max_len: usize,
) -> Result<InfusionReport> {
    let depth = src.layers.len().min(dst.layers.len());
    let mut max_dev = vec![0.0f64; depth + 1];
    for probe in probes {
        let enc = encode_single(probe, vocab, max_len)?;
        let a = forward(src, &enc, true)?;
        let b = forward(dst, &enc, true)?;
        for (i, dev) in max_dev.iter_mut().enumerate() {
            *dev = dev.max(a.layers[i].max_abs_diff(&b.layers[i]) as f64);
        }
    }
    let flagged = (0..=k_copy.min(depth))
        .filter(|&i| !(max_dev[i] < INFUSION_TOLERANCE))
        .collect();
    Ok(InfusionReport {
        k_copy,
        max_dev,
        flagged,
        tolerance: INFUSION_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS, PAD, SEP, UNK};

    fn vocab() -> Vocab {
        let mut t: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        t.extend(["alpha", "beta", "gamma", "delta", "eps"].iter().map(|s| s.to_string()));
        Vocab::from_tokens(t).unwrap()
    }

    fn ce(layers: usize) -> EncoderWeights<f32> {
        let cfg = ModelConfig {
            num_layers: layers,
            hidden: 16,
            heads: 2,
            ff: 32,
            vocab_size: 9,
            max_positions: 16,
            ..ModelConfig::default()
        };
        EncoderWeights::init_random(&cfg, 11, Role::CrossEncoder).unwrap()
    }

    const PROBES: [&str; 3] = ["alpha beta", "gamma delta eps alpha", "beta"];

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for w in [ce(2), infuse(&ce(2), 2, 1, 3).unwrap()] {
            let path = dir.path().join("m.ntc");
            let vocab = dir.path().join("vocab.txt");
            save(&w, &path, Some(&vocab)).unwrap();
            let (back, info) = load(&path).unwrap();
            assert_eq!(back, w);
            assert_eq!(info.vocab_path, Some(vocab));
            let side = std::fs::read_to_string(sidecar_path(&path)).unwrap();
            assert!(side.contains("vocab=vocab.txt\n"), "sidecar stores a relative path: {side}");
            assert_eq!(info.role, w.role);
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ntc");
        save(&ce(1), &path, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load(&path), Err(Error::Format(_))), "cut at {cut}");
        }
    }

    #[test]
    fn shape_mismatch_against_config_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ntc");
        save(&ce(1), &path, None).unwrap();
        let side = sidecar_path(&path);
        let text = std::fs::read_to_string(&side).unwrap().replace("ff=32", "ff=48");
        std::fs::write(&side, text).unwrap();
        assert!(matches!(load(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn infusion_copies_prefix_and_drops_head() {
        let src = ce(4);
        let de = infuse(&src, 2, 1, 5).unwrap();
        assert_eq!(de.layers.len(), 2);
        assert!(de.head.is_none());
        assert_eq!(de.layers[0], src.layers[0]);
        assert_ne!(de.layers[1], src.layers[1]);
        assert_eq!(de.word, src.word);
        assert_eq!(infuse(&src, 2, 1, 5).unwrap(), de);

        let zero = infuse(&src, 2, 0, 5).unwrap();
        assert_eq!(zero.position, src.position);
        assert_ne!(zero.layers[0], src.layers[0]);
    }

    #[test]
    fn infusion_rejects_bad_requests() {
        let src = ce(2);
        assert!(matches!(infuse(&src, 2, 3, 0), Err(Error::Config(_))));
        assert!(matches!(infuse(&src, 4, 3, 0), Err(Error::Config(_))));
        let wide = ModelConfig { hidden: 32, ..src.config.clone() };
        assert!(matches!(infuse_into(&src, &wide, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn verification_passes_fresh_and_flags_perturbation() {
        let v = vocab();
        let src = ce(4);
        for (layers, k) in [(2, 1), (4, 4), (2, 0)] {
            let de = infuse(&src, layers, k, 1).unwrap();
            let r = verify_infusion(&src, &de, k, &v, &PROBES, 16).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.prefix_max_dev() < 1e-6);
        }
        let mut de = infuse(&src, 2, 1, 1).unwrap();
        de.layers[0].ffn_out_w.data_mut()[0] += 1e-3;
        let r = verify_infusion(&src, &de, 1, &v, &PROBES, 16).unwrap();
        assert_eq!(r.flagged, vec![1]);
        assert_eq!(r.max_dev[0], 0.0);
    }
}
