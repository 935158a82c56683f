//! Small frozen post-norm transformer encoder.
//!
//! Each block exposes one insertion point: the feed-forward output, before
//! the block's final residual add. Callers pass a hook that receives that
//! activation (`[batch·seq × hidden]`) and returns its replacement.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::codec::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{checksum_all, Tensor};

pub const BACKBONE_MAGIC: [u8; 4] = *b"XPBB";
pub const BACKBONE_VERSION: u32 = 1;
pub const LN_EPS: f64 = 1e-5;
/// Feed-forward width as a multiple of the hidden size.
pub const FFN_MULT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            vocab: 4096,
            max_seq: 64,
            seed: 42,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("backbone {name} must be at least 1")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn ffn(&self) -> usize {
        FFN_MULT * self.hidden
    }
}

#[derive(Clone, Debug)]
pub struct Block<S> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
}

impl<S> Block<S> {
    fn tensors(&self) -> [&Tensor<S>; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<S> {
    config: BackboneConfig,
    pub token_embedding: Tensor<S>,
    pub position_embedding: Tensor<S>,
    pub embedding_ln_gamma: Tensor<S>,
    pub embedding_ln_beta: Tensor<S>,
    pub blocks: Vec<Block<S>>,
}

/// Hook invoked once per block on the feed-forward output.
pub type AdapterHook<'a, S> = dyn FnMut(&mut Tape<S>, usize, Var) -> Result<Var> + 'a;

impl<S: Scalar> Backbone<S> {
    /// Deterministic random initialisation. All weights are frozen.
    pub fn build(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.hidden, config.ffn());
        let lin = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
        };
        let token_embedding = Tensor::randn(&[config.vocab, d], 1.0, &mut rng);
        let position_embedding = Tensor::randn(&[config.max_seq, d], 1.0, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| Block {
                wq: lin(&mut rng, d, d),
                bq: Tensor::zeros(&[d]),
                wk: lin(&mut rng, d, d),
                bk: Tensor::zeros(&[d]),
                wv: lin(&mut rng, d, d),
                bv: Tensor::zeros(&[d]),
                wo: lin(&mut rng, d, d),
                bo: Tensor::zeros(&[d]),
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                w1: lin(&mut rng, d, f),
                b1: Tensor::zeros(&[f]),
                w2: lin(&mut rng, f, d),
                b2: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Backbone {
            config,
            token_embedding,
            position_embedding,
            embedding_ln_gamma: Tensor::ones(&[d]),
            embedding_ln_beta: Tensor::zeros(&[d]),
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    /// All weights in declaration order (the order of the binary format).
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.embedding_ln_gamma,
            &self.embedding_ln_beta,
        ];
        for block in &self.blocks {
            out.extend(block.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embedding_ln_gamma,
            &mut self.embedding_ln_beta,
        ];
        for block in &mut self.blocks {
            out.extend(block.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn checksum(&self) -> String {
        checksum_all(self.tensors())
    }

    pub fn validate_tokens(&self, tokens: &[Vec<u32>]) -> Result<(usize, usize)> {
        let batch = tokens.len();
        let seq = tokens.first().map_or(0, Vec::len);
        if batch == 0 || seq == 0 || tokens.iter().any(|row| row.len() != seq) {
            return Err(Error::Malformed {
                what: "token batch",
                detail: "rows must be non-empty and of equal length".into(),
            });
        }
        if seq > self.config.max_seq {
            return Err(Error::config(format!(
                "sequence length {seq} exceeds max_seq {}",
                self.config.max_seq
            )));
        }
        for (row, ids) in tokens.iter().enumerate() {
            if let Some((col, &token)) = ids
                .iter()
                .enumerate()
                .find(|(_, &t)| t as usize >= self.config.vocab)
            {
                return Err(Error::TokenOutOfRange {
                    row,
                    col,
                    token,
                    vocab: self.config.vocab,
                });
            }
        }
        Ok((batch, seq))
    }

    /// Encodes `tokens` (`batch` rows of equal length) to `[batch×seq×hidden]`.
    pub fn forward(&self, tape: &mut Tape<S>, tokens: &[Vec<u32>], hook: &mut AdapterHook<'_, S>) -> Result<Var> {
        let (batch, seq) = self.validate_tokens(tokens)?;
        let d = self.config.hidden;
        let heads = self.config.heads;
        let head_dim = d / heads;

        // The embedding tables are frozen, so the gather happens off-tape.
        let mut embedded = Vec::with_capacity(batch * seq * d);
        for row in tokens {
            for (pos, &tok) in row.iter().enumerate() {
                let te = self.token_embedding.row(tok as usize);
                let pe = self.position_embedding.row(pos);
                embedded.extend(te.iter().zip(pe).map(|(&a, &b)| a + b));
            }
        }
        let x = tape.constant(vec![batch * seq, d], embedded)?;
        let g = tape.leaf(&self.embedding_ln_gamma);
        let b = tape.leaf(&self.embedding_ln_beta);
        let mut x = tape.layer_norm(x, g, b, S::lit(LN_EPS))?;

        let attn_scale = S::lit(1.0 / (head_dim as f64).sqrt());
        for (l, block) in self.blocks.iter().enumerate() {
            let linear = |tape: &mut Tape<S>, x: Var, w: &Tensor<S>, bias: &Tensor<S>| -> Result<Var> {
                let w = tape.leaf(w);
                let bias = tape.leaf(bias);
                let y = tape.matmul(x, w)?;
                tape.add_bias(y, bias)
            };
            let split = |tape: &mut Tape<S>, x: Var| -> Result<Var> {
                let x = tape.reshape(x, &[batch, seq, heads, head_dim])?;
                let x = tape.permute(x, [0, 2, 1, 3])?;
                tape.reshape(x, &[batch * heads, seq, head_dim])
            };

            let q = linear(tape, x, &block.wq, &block.bq)?;
            let k = linear(tape, x, &block.wk, &block.bk)?;
            let v = linear(tape, x, &block.wv, &block.bv)?;
            let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let kt = tape.transpose(k)?;
            let scores = tape.batched_matmul(q, kt)?;
            let scores = tape.scale(scores, attn_scale);
            let probs = tape.softmax(scores, 2)?;
            let ctx = tape.batched_matmul(probs, v)?;
            let ctx = tape.reshape(ctx, &[batch, heads, seq, head_dim])?;
            let ctx = tape.permute(ctx, [0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[batch * seq, d])?;
            let attn = linear(tape, ctx, &block.wo, &block.bo)?;

            let res = tape.add(x, attn)?;
            let g = tape.leaf(&block.ln1_gamma);
            let b = tape.leaf(&block.ln1_beta);
            let x1 = tape.layer_norm(res, g, b, S::lit(LN_EPS))?;

            let h = linear(tape, x1, &block.w1, &block.b1)?;
            let h = tape.relu(h);
            let h = linear(tape, h, &block.w2, &block.b2)?;
            let h = hook(tape, l, h)?;

            let res = tape.add(x1, h)?;
            let g = tape.leaf(&block.ln2_gamma);
            let b = tape.leaf(&block.ln2_beta);
            x = tape.layer_norm(res, g, b, S::lit(LN_EPS))?;
        }
        tape.reshape(x, &[batch, seq, d])
    }

    /// Writes the `XPBB` format: magic, version, config, then every weight
    /// as little-endian `f32` in declaration order.
    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = ByteWriter::new(out);
        w.bytes(&BACKBONE_MAGIC)?;
        w.u32(BACKBONE_VERSION)?;
        for v in [
            self.config.layers,
            self.config.hidden,
            self.config.heads,
            self.config.vocab,
            self.config.max_seq,
        ] {
            w.u32(v as u32)?;
        }
        w.u64(self.config.seed)?;
        for t in self.tensors() {
            w.f32s(t.data())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let mut r = ByteReader::new(&buf);
        r.magic(BACKBONE_MAGIC)?;
        let version = r.u32("version")?;
        if version != BACKBONE_VERSION {
            return Err(Error::Version(version));
        }
        let config = BackboneConfig {
            layers: r.u32("layers")? as usize,
            hidden: r.u32("hidden")? as usize,
            heads: r.u32("heads")? as usize,
            vocab: r.u32("vocab")? as usize,
            max_seq: r.u32("max_seq")? as usize,
            seed: r.u64("seed")?,
        };
        let mut backbone = Self::build(config)?;
        for t in backbone.tensors_mut() {
            let values = r.f32s("backbone weights", t.numel())?;
            for (dst, v) in t.data_mut().iter_mut().zip(values) {
                *dst = S::lit(v as f64);
            }
        }
        r.expect_end()?;
        Ok(backbone)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::codec::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Hook that leaves the feed-forward output untouched.
pub fn identity_hook<S: Scalar>(_: &mut Tape<S>, _: usize, h: Var) -> Result<Var> {
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            vocab: 1000,
            max_seq: 64,
            seed: 42,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Backbone::<f32>::build(small()).unwrap();
        let b = Backbone::<f32>::build(small()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = Backbone::<f32>::build(BackboneConfig { seed: 43, ..small() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn param_count_matches_declared_shapes() {
        let bb = Backbone::<f32>::build(small()).unwrap();
        let (v, p, d, f, l) = (1000, 64, 32, 128, 2);
        let embeddings = v * d + p * d + 2 * d;
        let attention = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norms = 4 * d;
        assert_eq!(bb.param_count(), embeddings + l * (attention + ffn + norms));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Backbone::<f32>::build(BackboneConfig { heads: 3, ..small() }).is_err());
        assert!(Backbone::<f32>::build(BackboneConfig { layers: 0, ..small() }).is_err());
        assert!(Backbone::<f32>::build(BackboneConfig { vocab: 0, ..small() }).is_err());
    }

    #[test]
    fn minimal_config_runs() {
        let cfg = BackboneConfig {
            layers: 1,
            ..small()
        };
        let bb = Backbone::<f32>::build(cfg).unwrap();
        let mut tape = Tape::new();
        let out = bb.forward(&mut tape, &[vec![7]], &mut identity_hook).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 32]);
    }

    #[test]
    fn token_out_of_range_reports_position() {
        let bb = Backbone::<f32>::build(small()).unwrap();
        let mut tape = Tape::new();
        let err = bb
            .forward(&mut tape, &[vec![1, 2], vec![3, 1000]], &mut identity_hook)
            .unwrap_err();
        match err {
            Error::TokenOutOfRange { row, col, token, .. } => assert_eq!((row, col, token), (1, 1, 1000)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn hook_sees_every_block_and_identity_is_neutral() {
        let bb = Backbone::<f32>::build(small()).unwrap();
        let tokens = vec![vec![1, 2, 3], vec![4, 5, 6]];
        let mut plain = Tape::new();
        let a = bb.forward(&mut plain, &tokens, &mut identity_hook).unwrap();

        let mut seen = Vec::new();
        let mut hooked = Tape::new();
        let b = bb
            .forward(&mut hooked, &tokens, &mut |_, l, h| {
                seen.push(l);
                Ok(h)
            })
            .unwrap();
        assert_eq!(seen, vec![0, 1]);
        assert_eq!(plain.value(a), hooked.value(b));
    }

    #[test]
    fn gradient_reaches_hook_parameters_only() {
        let bb = Backbone::<f32>::build(small()).unwrap();
        let mut tape = Tape::new();
        let shift = tape.variable(vec![32], vec![0.5; 32]).unwrap();
        let out = bb
            .forward(&mut tape, &[vec![1, 2, 3]], &mut |tape, _, h| tape.add_bias(h, shift))
            .unwrap();
        let pooled = tape.mean_pool(out).unwrap();
        let w = tape.constant(vec![32, 2], (0..64).map(|i| i as f32 * 0.01).collect()).unwrap();
        let logits = tape.matmul(pooled, w).unwrap();
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(shift).unwrap().iter().any(|g| *g != 0.0));
        // Leaves created for the frozen weights carry no gradient.
        for i in 0..tape.len() {
            let v = crate::autodiff::Var::from_index(i);
            if !tape.requires_grad(v) {
                assert!(tape.grad(v).is_none());
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let bb = Backbone::<f32>::build(BackboneConfig {
            vocab: 50,
            max_seq: 8,
            ..small()
        })
        .unwrap();
        let mut buf = Vec::new();
        bb.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"XPBB");
        assert_eq!(buf.len(), 4 + 4 + 5 * 4 + 8 + 4 * bb.param_count());
        let back = Backbone::<f32>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.checksum(), bb.checksum());

        buf.pop();
        assert!(Backbone::<f32>::read_from(buf.as_slice()).is_err());
    }
}
