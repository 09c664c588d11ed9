//! Matcher parameters and the `MANW` archive format.
//!
//! Archive layout (little-endian): `b"MANW"`, `u32` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32`
//! dims and the `f32` payload.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{ConfidenceMode, MatcherConfig};

const MAGIC: &[u8; 4] = b"MANW";

/// Hidden layers in the keypoint encoder MLP.
pub const ENCODER_HIDDEN_LAYERS: usize = 3;

/// Self-similarity score of a unit descriptor under [`MatcherWeights::passthrough`].
pub const PASSTHROUGH_MATCH_SCORE: f64 = 20.0;

/// Dustbin score used by [`MatcherWeights::passthrough`].
pub const PASSTHROUGH_BIN_SCORE: f32 = 10.0;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, expected \"MANW\"")]
    BadMagic,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("archive truncated at byte {0}")]
    TruncatedFile(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
}

/// Dense layer `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// `gain * I`, zero bias.
    pub fn scaled_identity(dim: usize, gain: f32) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = gain;
        }
        l
    }

    fn uniform(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    /// Applies the layer to every row of `x` (`n x in` to `n x out`).
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(x.ncols(), self.in_dim);
        let w = DMatrix::from_row_iterator(
            self.out_dim,
            self.in_dim,
            self.weight.iter().map(|&v| v as f64),
        );
        let mut y = x * w.transpose();
        for (j, &b) in self.bias.iter().enumerate() {
            y.column_mut(j).add_scalar_mut(b as f64);
        }
        y
    }
}

/// One multi-head attention block with its message MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub merge: Linear,
    /// `2D -> 2D`, followed by ReLU.
    pub mlp_hidden: Linear,
    /// `2D -> D`.
    pub mlp_out: Linear,
}

impl AttentionBlock {
    fn uniform(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query: Linear::uniform(dim, dim, rng),
            key: Linear::uniform(dim, dim, rng),
            value: Linear::uniform(dim, dim, rng),
            merge: Linear::uniform(dim, dim, rng),
            mlp_hidden: Linear::uniform(2 * dim, 2 * dim, rng),
            mlp_out: Linear::uniform(2 * dim, dim, rng),
        }
    }

    fn parts(&self) -> [(&'static str, &Linear); 6] {
        [
            ("q", &self.query),
            ("k", &self.key),
            ("v", &self.value),
            ("merge", &self.merge),
            ("mlp0", &self.mlp_hidden),
            ("mlp1", &self.mlp_out),
        ]
    }
}

/// A self-attention block followed by a cross-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPair {
    pub self_attn: AttentionBlock,
    pub cross_attn: AttentionBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherWeights {
    /// Keypoint encoder MLP, input width 2 (oblivious) or 3 (legacy).
    pub encoder: Vec<Linear>,
    pub layers: Vec<LayerPair>,
    pub final_proj: Linear,
    /// Dustbin score.
    pub bin_score: f32,
}

impl MatcherWeights {
    pub fn dim(&self) -> usize {
        self.final_proj.out_dim
    }

    pub fn encoder_input(&self) -> usize {
        self.encoder.first().map_or(0, |l| l.in_dim)
    }

    /// Zero encoder, no attention layers and a scaled-identity projection:
    /// scores reduce to scaled descriptor inner products.
    pub fn passthrough(dim: usize, mode: ConfidenceMode) -> Self {
        let gain = (PASSTHROUGH_MATCH_SCORE * (dim as f64).sqrt()).sqrt() as f32;
        Self {
            encoder: encoder_shapes(dim, mode)
                .into_iter()
                .map(|(i, o)| Linear::zeros(i, o))
                .collect(),
            layers: Vec::new(),
            final_proj: Linear::scaled_identity(dim, gain),
            bin_score: PASSTHROUGH_BIN_SCORE,
        }
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn check(&self, config: &MatcherConfig) -> Result<(), WeightsError> {
        let dim = config.dim;
        let mismatch = |what: String| Err(WeightsError::ShapeMismatch(what));
        let expected = encoder_shapes(dim, config.confidence_mode);
        if self.encoder.len() != expected.len() {
            return mismatch(format!(
                "encoder has {} layers, expected {}",
                self.encoder.len(),
                expected.len()
            ));
        }
        for (i, (l, &(ei, eo))) in self.encoder.iter().zip(&expected).enumerate() {
            if (l.in_dim, l.out_dim) != (ei, eo) {
                return mismatch(format!(
                    "encoder layer {i} is {}->{}, expected {ei}->{eo}",
                    l.in_dim, l.out_dim
                ));
            }
        }
        if self.layers.len() != config.num_layers {
            return mismatch(format!(
                "{} attention layers, config expects {}",
                self.layers.len(),
                config.num_layers
            ));
        }
        for (l, pair) in self.layers.iter().enumerate() {
            for blk in [&pair.self_attn, &pair.cross_attn] {
                for (name, lin) in blk.parts() {
                    let want = match name {
                        "mlp0" => (2 * dim, 2 * dim),
                        "mlp1" => (2 * dim, dim),
                        _ => (dim, dim),
                    };
                    if (lin.in_dim, lin.out_dim) != want {
                        return mismatch(format!("layer {l} {name} has wrong shape"));
                    }
                }
            }
        }
        if (self.final_proj.in_dim, self.final_proj.out_dim) != (dim, dim) {
            return mismatch(format!(
                "final projection is {}->{}, config dim is {dim}",
                self.final_proj.in_dim, self.final_proj.out_dim
            ));
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, Vec<u32>, Vec<f32>)> {
        let mut out = Vec::new();
        let mut push_linear = |prefix: String, l: &Linear| {
            out.push((
                format!("{prefix}.weight"),
                vec![l.out_dim as u32, l.in_dim as u32],
                l.weight.clone(),
            ));
            out.push((format!("{prefix}.bias"), vec![l.out_dim as u32], l.bias.clone()));
        };
        for (i, l) in self.encoder.iter().enumerate() {
            push_linear(format!("kenc.{i}"), l);
        }
        for (i, pair) in self.layers.iter().enumerate() {
            for (kind, blk) in [("self", &pair.self_attn), ("cross", &pair.cross_attn)] {
                for (name, lin) in blk.parts() {
                    push_linear(format!("gnn.{i}.{kind}.{name}"), lin);
                }
            }
        }
        push_linear("final_proj".into(), &self.final_proj);
        out.push(("bin_score".into(), Vec::new(), vec![self.bin_score]));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.named_tensors();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(WeightsError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let count = r.u32()? as usize;
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| WeightsError::BadName)?
                .to_owned();
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| WeightsError::ShapeMismatch(format!("{name}: size overflow")))?;
            let payload = r.take(len.checked_mul(4).ok_or(WeightsError::TruncatedFile(r.pos))?)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(WeightsError::NonFinite(name));
            }
            if tensors.insert(name.clone(), (dims, data)).is_some() {
                return Err(WeightsError::ShapeMismatch(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(WeightsError::ShapeMismatch(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Assembler { tensors }.assemble()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightsError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightsError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `(in, out)` of every encoder layer.
fn encoder_shapes(dim: usize, mode: ConfidenceMode) -> Vec<(usize, usize)> {
    let input = match mode {
        ConfidenceMode::Oblivious => 2,
        ConfidenceMode::Legacy => 3,
    };
    std::iter::once((input, dim))
        .chain(std::iter::repeat_n((dim, dim), ENCODER_HIDDEN_LAYERS))
        .collect()
}

/// Seeded initialization, every weight and bias uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; dustbin score starts at 1.
pub fn random_weights(config: &MatcherConfig, seed: u64) -> MatcherWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = config.dim;
    let encoder = encoder_shapes(dim, config.confidence_mode)
        .into_iter()
        .map(|(i, o)| Linear::uniform(i, o, &mut rng))
        .collect();
    let layers = (0..config.num_layers)
        .map(|_| LayerPair {
            self_attn: AttentionBlock::uniform(dim, &mut rng),
            cross_attn: AttentionBlock::uniform(dim, &mut rng),
        })
        .collect();
    let final_proj = Linear::uniform(dim, dim, &mut rng);
    MatcherWeights {
        encoder,
        layers,
        final_proj,
        bin_score: 1.0,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(WeightsError::TruncatedFile(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightsError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct Assembler {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Assembler {
    fn linear(&mut self, prefix: &str) -> Result<Linear, WeightsError> {
        let missing = |n: &str| WeightsError::ShapeMismatch(format!("missing tensor {n}"));
        let wname = format!("{prefix}.weight");
        let bname = format!("{prefix}.bias");
        let (wdims, weight) = self.tensors.remove(&wname).ok_or_else(|| missing(&wname))?;
        let (bdims, bias) = self.tensors.remove(&bname).ok_or_else(|| missing(&bname))?;
        if wdims.len() != 2 || bdims != [wdims[0]] {
            return Err(WeightsError::ShapeMismatch(format!(
                "{prefix}: weight {wdims:?} and bias {bdims:?} disagree"
            )));
        }
        Ok(Linear {
            out_dim: wdims[0],
            in_dim: wdims[1],
            weight,
            bias,
        })
    }

    fn block(&mut self, prefix: &str) -> Result<AttentionBlock, WeightsError> {
        Ok(AttentionBlock {
            query: self.linear(&format!("{prefix}.q"))?,
            key: self.linear(&format!("{prefix}.k"))?,
            value: self.linear(&format!("{prefix}.v"))?,
            merge: self.linear(&format!("{prefix}.merge"))?,
            mlp_hidden: self.linear(&format!("{prefix}.mlp0"))?,
            mlp_out: self.linear(&format!("{prefix}.mlp1"))?,
        })
    }

    fn assemble(mut self) -> Result<MatcherWeights, WeightsError> {
        let encoder = (0..=ENCODER_HIDDEN_LAYERS)
            .map(|i| self.linear(&format!("kenc.{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let mut layers = Vec::new();
        while self.tensors.contains_key(&format!("gnn.{}.self.q.weight", layers.len())) {
            let i = layers.len();
            layers.push(LayerPair {
                self_attn: self.block(&format!("gnn.{i}.self"))?,
                cross_attn: self.block(&format!("gnn.{i}.cross"))?,
            });
        }
        let final_proj = self.linear("final_proj")?;
        let (bdims, bin) = self
            .tensors
            .remove("bin_score")
            .ok_or_else(|| WeightsError::ShapeMismatch("missing tensor bin_score".into()))?;
        if !bdims.is_empty() || bin.len() != 1 {
            return Err(WeightsError::ShapeMismatch("bin_score must be a scalar".into()));
        }
        if let Some(extra) = self.tensors.keys().next() {
            return Err(WeightsError::ShapeMismatch(format!("unexpected tensor {extra}")));
        }
        let weights = MatcherWeights {
            encoder,
            layers,
            final_proj,
            bin_score: bin[0],
        };
        let dim = weights.dim();
        let mode = match weights.encoder_input() {
            2 => ConfidenceMode::Oblivious,
            3 => ConfidenceMode::Legacy,
            n => {
                return Err(WeightsError::ShapeMismatch(format!(
                    "encoder input width {n}, expected 2 or 3"
                )))
            }
        };
        // internal consistency, independent of any caller config
        weights.check(&MatcherConfig {
            dim,
            num_layers: weights.layers.len(),
            confidence_mode: mode,
            ..MatcherConfig::default()
        })?;
        Ok(weights)
    }
}
