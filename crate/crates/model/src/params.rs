//! Named parameter registry and the full model skeleton.
//!
//! Every trainable tensor is registered once, in a fixed order, under a
//! hierarchical name ("query.block1.attn.q.w", …). The registry order drives
//! checkpoint layout, optimizer state alignment, and the flat-vector binding
//! used by finite-difference checks, so construction must stay deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vcmr_tensor::checkpoint::{self, Record};
use vcmr_tensor::{seed, Scalar, Tensor};

use crate::config::ModelConfig;
use crate::{ModelError, Result};

/// Handle to one registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Ids are dense indices into the registry; only crate code that walks
    /// the registry in order may fabricate them.
    pub(crate) fn from_index(i: usize) -> ParamId {
        ParamId(i)
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.iter().any(|n| *n == name) {
            return Err(ModelError::config(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// All parameters concatenated into one rank-1 tensor, registry order.
    pub fn flatten(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.scalar_count());
        for t in &self.tensors {
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(&[data.len()], data).expect("flatten length is consistent")
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Typed parameter handles
// ---------------------------------------------------------------------------

/// Affine map y = W·x + b with W: [out, in], b: [out].
#[derive(Debug, Clone, Copy)]
pub struct LinearP {
    pub w: ParamId,
    pub b: ParamId,
}

/// Per-feature gain and bias of a layer norm.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormP {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
}

/// One transformer block: attention + feed-forward, each followed by
/// residual add and layer norm.
#[derive(Debug, Clone, Copy)]
pub struct BlockP {
    pub attn: AttentionP,
    pub ln1: LayerNormP,
    pub ff1: LinearP,
    pub ff2: LinearP,
    pub ln2: LayerNormP,
}

/// Query encoder: projection, positional table, two shared blocks, one
/// additive-pooling weight and one re-projection per video stream.
#[derive(Debug, Clone, Copy)]
pub struct QueryEncoderP {
    pub proj: LinearP,
    pub pos: ParamId,
    pub block1: BlockP,
    pub block2: BlockP,
    pub pool_v: ParamId,
    pub pool_s: Option<ParamId>,
    pub reproj_v: LinearP,
    pub reproj_s: Option<LinearP>,
}

/// One stream (visual or subtitle) of the video encoder: projection,
/// positional table, self block, cross block, final refinement block.
#[derive(Debug, Clone, Copy)]
pub struct StreamP {
    pub proj: LinearP,
    pub pos: ParamId,
    pub self_block: BlockP,
    pub cross_block: BlockP,
    pub final_block: BlockP,
}

/// Video encoder; the subtitle stream exists only when configured.
#[derive(Debug, Clone, Copy)]
pub struct VideoEncoderP {
    pub visual: StreamP,
    pub subtitle: Option<StreamP>,
}

/// Heads of the contrastive objectives: f/g projections into a common
/// space, the bilinear discriminator, and per-stream pooling weights for
/// the video-level summary vector.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveP {
    pub f: LinearP,
    pub g: LinearP,
    pub disc: ParamId,
    pub pool_v: ParamId,
    pub pool_s: Option<ParamId>,
}

/// Objective heads: two boundary convolution kernels plus contrastive heads.
#[derive(Debug, Clone, Copy)]
pub struct HeadsP {
    pub conv_start: ParamId,
    pub conv_end: ParamId,
    pub contrastive: ContrastiveP,
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Samples in f64 and converts, so initialization is identical (up to
/// rounding) across scalar types given the same seed.
struct Init {
    base_seed: u64,
}

impl Init {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed::derive(self.base_seed, name, 0))
    }

    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    fn xavier<T: Scalar>(&self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let mut rng = self.rng(name);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.random_range(-a..a))).collect();
        Tensor::from_vec(shape, data).expect("shape/product consistent")
    }

    /// N(0, scale²) entries.
    fn normal<T: Scalar>(&self, name: &str, shape: &[usize], scale: f64) -> Tensor<T> {
        let mut rng = self.rng(name);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * scale)
            })
            .collect();
        Tensor::from_vec(shape, data).expect("shape/product consistent")
    }
}

fn add_linear<T: Scalar>(
    ps: &mut ParamSet<T>,
    init: &Init,
    name: &str,
    out_dim: usize,
    in_dim: usize,
) -> Result<LinearP> {
    let w = ps.add(format!("{name}.w"), init.xavier(&format!("{name}.w"), &[out_dim, in_dim], in_dim, out_dim))?;
    let b = ps.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
    Ok(LinearP { w, b })
}

fn add_layer_norm<T: Scalar>(ps: &mut ParamSet<T>, name: &str, d: usize) -> Result<LayerNormP> {
    let gain = ps.add(format!("{name}.gain"), Tensor::full(&[d], T::from_f64(1.0)))?;
    let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[d]))?;
    Ok(LayerNormP { gain, bias })
}

fn add_block<T: Scalar>(
    ps: &mut ParamSet<T>,
    init: &Init,
    name: &str,
    d: usize,
    d_ff: usize,
) -> Result<BlockP> {
    let attn = AttentionP {
        q: add_linear(ps, init, &format!("{name}.attn.q"), d, d)?,
        k: add_linear(ps, init, &format!("{name}.attn.k"), d, d)?,
        v: add_linear(ps, init, &format!("{name}.attn.v"), d, d)?,
        o: add_linear(ps, init, &format!("{name}.attn.o"), d, d)?,
    };
    let ln1 = add_layer_norm(ps, &format!("{name}.ln1"), d)?;
    let ff1 = add_linear(ps, init, &format!("{name}.ff1"), d_ff, d)?;
    let ff2 = add_linear(ps, init, &format!("{name}.ff2"), d, d_ff)?;
    let ln2 = add_layer_norm(ps, &format!("{name}.ln2"), d)?;
    Ok(BlockP { attn, ln1, ff1, ff2, ln2 })
}

fn add_pool<T: Scalar>(ps: &mut ParamSet<T>, init: &Init, name: &str, d: usize) -> Result<ParamId> {
    ps.add(name, init.xavier(name, &[1, d], d, 1))
}

fn add_stream<T: Scalar>(
    ps: &mut ParamSet<T>,
    init: &Init,
    name: &str,
    cfg: &ModelConfig,
    in_dim: usize,
) -> Result<StreamP> {
    Ok(StreamP {
        proj: add_linear(ps, init, &format!("{name}.proj"), cfg.d, in_dim)?,
        pos: ps.add(
            format!("{name}.pos"),
            init.normal(&format!("{name}.pos"), &[cfg.d, cfg.n_v_max], 0.02),
        )?,
        self_block: add_block(ps, init, &format!("{name}.self"), cfg.d, cfg.d_ff)?,
        cross_block: add_block(ps, init, &format!("{name}.cross"), cfg.d, cfg.d_ff)?,
        final_block: add_block(ps, init, &format!("{name}.final"), cfg.d, cfg.d_ff)?,
    })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// The complete model: configuration, parameter registry, and typed handles
/// into it.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    pub query: QueryEncoderP,
    pub video: VideoEncoderP,
    pub heads: HeadsP,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; deterministic in `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let init = Init { base_seed: cfg.seed };
        let mut ps = ParamSet::new();

        let query = QueryEncoderP {
            proj: add_linear(&mut ps, &init, "query.proj", cfg.d, cfg.d_w)?,
            pos: ps.add("query.pos", init.normal("query.pos", &[cfg.d, cfg.n_q_max], 0.02))?,
            block1: add_block(&mut ps, &init, "query.block1", cfg.d, cfg.d_ff)?,
            block2: add_block(&mut ps, &init, "query.block2", cfg.d, cfg.d_ff)?,
            pool_v: add_pool(&mut ps, &init, "query.pool.v", cfg.d)?,
            pool_s: if cfg.subtitles { Some(add_pool(&mut ps, &init, "query.pool.s", cfg.d)?) } else { None },
            reproj_v: add_linear(&mut ps, &init, "query.reproj.v", cfg.d, cfg.d)?,
            reproj_s: if cfg.subtitles {
                Some(add_linear(&mut ps, &init, "query.reproj.s", cfg.d, cfg.d)?)
            } else {
                None
            },
        };

        let video = VideoEncoderP {
            visual: add_stream(&mut ps, &init, "video.v", &cfg, cfg.d_v)?,
            subtitle: if cfg.subtitles {
                Some(add_stream(&mut ps, &init, "video.s", &cfg, cfg.d_w)?)
            } else {
                None
            },
        };

        let w = cfg.conv_width;
        let heads = HeadsP {
            conv_start: ps.add("heads.conv.start", init.xavier("heads.conv.start", &[1, 1, w], w, w))?,
            conv_end: ps.add("heads.conv.end", init.xavier("heads.conv.end", &[1, 1, w], w, w))?,
            contrastive: ContrastiveP {
                f: add_linear(&mut ps, &init, "heads.cl.f", cfg.d, cfg.d)?,
                g: add_linear(&mut ps, &init, "heads.cl.g", cfg.d, cfg.d)?,
                disc: ps.add("heads.cl.disc", init.xavier("heads.cl.disc", &[cfg.d, cfg.d], cfg.d, cfg.d))?,
                pool_v: add_pool(&mut ps, &init, "heads.cl.pool.v", cfg.d)?,
                pool_s: if cfg.subtitles {
                    Some(add_pool(&mut ps, &init, "heads.cl.pool.s", cfg.d)?)
                } else {
                    None
                },
            },
        };

        Ok(Model { cfg, params: ps, query, video, heads })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            query: self.query,
            video: self.video,
            heads: self.heads,
        }
    }
}

impl Model<f32> {
    /// Serializes config and all parameters; byte-exact and deterministic.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let config_json = serde_json::to_string(&self.cfg)
            .map_err(|e| ModelError::checkpoint(format!("config serialization failed: {e}")))?;
        let mut records = Vec::with_capacity(self.params.len());
        for i in 0..self.params.len() {
            let id = ParamId(i);
            let t = self.params.get(id);
            let extents = t.shape().iter().map(|&e| e as u32).collect();
            records.push(
                Record::new(self.params.name(id), extents, t.data().to_vec())
                    .map_err(ModelError::Tensor)?,
            );
        }
        Ok(checkpoint::to_bytes(&config_json, &records))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        std::fs::write(path, bytes).map_err(|e| ModelError::checkpoint(format!("write failed: {e}")))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (config_json, records) = checkpoint::from_bytes(bytes).map_err(ModelError::Tensor)?;
        let cfg: ModelConfig = serde_json::from_str(&config_json)
            .map_err(|e| ModelError::checkpoint(format!("bad config payload: {e}")))?;
        let mut model = Model::<f32>::new(cfg)?;
        if records.len() != model.params.len() {
            return Err(ModelError::checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                records.len(),
                model.params.len()
            )));
        }
        for (i, rec) in records.iter().enumerate() {
            let id = ParamId(i);
            if rec.name != model.params.name(id) {
                return Err(ModelError::checkpoint(format!(
                    "parameter {} named {:?} in checkpoint, expected {:?}",
                    i,
                    rec.name,
                    model.params.name(id)
                )));
            }
            let shape: Vec<usize> = rec.extents.iter().map(|&e| e as usize).collect();
            if shape != model.params.get(id).shape() {
                return Err(ModelError::checkpoint(format!(
                    "parameter {:?} has shape {:?} in checkpoint, expected {:?}",
                    rec.name,
                    shape,
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = Tensor::from_vec(&shape, rec.payload.clone())
                .map_err(ModelError::Tensor)?;
        }
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| ModelError::checkpoint(format!("read {path:?} failed: {e}")))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            d_v: 6,
            d_w: 5,
            heads: 2,
            d_ff: 16,
            n_v_max: 6,
            n_q_max: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn registry_rejects_duplicate_names() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(ps.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn construction_is_deterministic_in_seed() {
        let a = Model::<f32>::new(tiny_cfg()).unwrap();
        let b = Model::<f32>::new(tiny_cfg()).unwrap();
        assert_eq!(a.params.flatten().data(), b.params.flatten().data());
        let c = Model::<f32>::new(ModelConfig { seed: 14, ..tiny_cfg() }).unwrap();
        assert_ne!(a.params.flatten().data(), c.params.flatten().data());
    }

    #[test]
    fn subtitle_gating_changes_parameter_count() {
        let with = Model::<f32>::new(tiny_cfg()).unwrap();
        let without = Model::<f32>::new(ModelConfig { subtitles: false, ..tiny_cfg() }).unwrap();
        assert!(with.params.len() > without.params.len());
        assert!(without.query.pool_s.is_none());
        assert!(without.video.subtitle.is_none());
        assert!(without.heads.contrastive.pool_s.is_none());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = Model::<f32>::new(tiny_cfg()).unwrap();
        let bytes = model.to_checkpoint_bytes().unwrap();
        let back = Model::<f32>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.params.flatten().data(), model.params.flatten().data());
        // Byte-exact re-serialization.
        assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_rejects_wrong_shape() {
        let model = Model::<f32>::new(tiny_cfg()).unwrap();
        let bytes = model.to_checkpoint_bytes().unwrap();
        let other = Model::<f32>::new(ModelConfig { d: 16, ..tiny_cfg() }).unwrap();
        let other_bytes = other.to_checkpoint_bytes().unwrap();
        assert_ne!(bytes, other_bytes);
        // Loading bytes whose config disagrees with the stored tensors is
        // impossible by construction, but a truncated file must fail loudly.
        assert!(Model::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn f64_cast_preserves_values() {
        let model = Model::<f32>::new(tiny_cfg()).unwrap();
        let m64 = model.cast::<f64>();
        let a = model.params.flatten();
        let b = m64.params.flatten();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f64, *y);
        }
    }
}
