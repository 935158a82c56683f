//! Frozen, shared collection of `N` bottleneck adapters per block.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{checksum_all, Tensor};

pub const BANK_MAGIC: [u8; 4] = *b"XPBK";
pub const BANK_VERSION: u32 = 1;
/// Standard deviation of randomly initialised adapter weights.
pub const BANK_INIT_STD: f64 = 0.02;

/// One bottleneck adapter: `down` is `A` (`b×d`), `up` is `B` (`d×b`).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair<S> {
    pub down: Tensor<S>,
    pub up: Tensor<S>,
}

impl<S: Scalar> AdapterPair<S> {
    pub fn random(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        AdapterPair {
            down: Tensor::randn(&[b, d], BANK_INIT_STD, rng),
            up: Tensor::randn(&[d, b], BANK_INIT_STD, rng),
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.down.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Random,
    Trained,
}

#[derive(Clone, Debug)]
pub struct AdapterBank<S> {
    n: usize,
    l: usize,
    b: usize,
    d: usize,
    seed: u64,
    provenance: Provenance,
    /// Per block, all `N` down-projections flattened: `[N × b·d]`.
    down: Vec<Tensor<S>>,
    /// Per block, all `N` up-projections flattened: `[N × d·b]`.
    up: Vec<Tensor<S>>,
}

fn check_dims(n: usize, l: usize, b: usize, d: usize) -> Result<()> {
    if n == 0 || l == 0 || b == 0 {
        return Err(Error::config(format!("bank needs N, L, b >= 1 (got N={n}, L={l}, b={b})")));
    }
    if b >= d {
        return Err(Error::config(format!("bottleneck b={b} must be smaller than d={d}")));
    }
    Ok(())
}

impl<S: Scalar> AdapterBank<S> {
    /// Seeded Gaussian bank. Entries are drawn one at a time (all blocks of
    /// entry 0, then entry 1, ...), so a smaller bank with the same seed is a
    /// prefix of a larger one.
    pub fn random(n: usize, l: usize, b: usize, d: usize, seed: u64) -> Result<Self> {
        check_dims(n, l, b, d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_entry: Vec<Vec<AdapterPair<S>>> = (0..n)
            .map(|_| (0..l).map(|_| AdapterPair::random(b, d, &mut rng)).collect())
            .collect();
        let blocks = (0..l)
            .map(|j| per_entry.iter().map(|e| e[j].clone()).collect())
            .collect();
        Self::assemble(blocks, seed, Provenance::Random)
    }

    /// Bank from per-profile trained adapters: `per_profile[i][l]` is the
    /// pair profile `i` trained for block `l`.
    pub fn from_trained(per_profile: &[Vec<AdapterPair<S>>], seed: u64) -> Result<Self> {
        let l = per_profile.first().map_or(0, Vec::len);
        if per_profile.iter().any(|p| p.len() != l) {
            return Err(Error::config("every trained profile must supply one adapter per block"));
        }
        let blocks = (0..l)
            .map(|layer| per_profile.iter().map(|p| p[layer].clone()).collect())
            .collect();
        Self::assemble(blocks, seed, Provenance::Trained)
    }

    /// `blocks[l][i]` is adapter `i` of block `l`.
    fn assemble(blocks: Vec<Vec<AdapterPair<S>>>, seed: u64, provenance: Provenance) -> Result<Self> {
        let l = blocks.len();
        let n = blocks.first().map_or(0, Vec::len);
        let first = blocks.first().and_then(|b| b.first()).ok_or_else(|| Error::config("empty bank"))?;
        let (b, d) = (first.bottleneck(), first.hidden());
        check_dims(n, l, b, d)?;
        let mut down = Vec::with_capacity(l);
        let mut up = Vec::with_capacity(l);
        for pairs in &blocks {
            let mut dd = Vec::with_capacity(n * b * d);
            let mut uu = Vec::with_capacity(n * b * d);
            for p in pairs {
                if p.down.shape() != [b, d] || p.up.shape() != [d, b] {
                    return Err(Error::shape("adapter bank", p.down.shape(), p.up.shape()));
                }
                dd.extend_from_slice(p.down.data());
                uu.extend_from_slice(p.up.data());
            }
            down.push(Tensor::new(vec![n, b * d], dd)?);
            up.push(Tensor::new(vec![n, d * b], uu)?);
        }
        Ok(AdapterBank {
            n,
            l,
            b,
            d,
            seed,
            provenance,
            down,
            up,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn layers(&self) -> usize {
        self.l
    }

    pub fn bottleneck(&self) -> usize {
        self.b
    }

    pub fn hidden(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// `[N × b·d]` stack of down-projections for block `l`.
    pub fn stacked_down(&self, l: usize) -> &Tensor<S> {
        &self.down[l]
    }

    /// `[N × d·b]` stack of up-projections for block `l`.
    pub fn stacked_up(&self, l: usize) -> &Tensor<S> {
        &self.up[l]
    }

    pub fn pair(&self, l: usize, i: usize) -> AdapterPair<S> {
        let (b, d) = (self.b, self.d);
        AdapterPair {
            down: Tensor::new(vec![b, d], self.down[l].row(i).to_vec()).expect("bank rows are b·d"),
            up: Tensor::new(vec![d, b], self.up[l].row(i).to_vec()).expect("bank rows are d·b"),
        }
    }

    pub fn element_count(&self) -> usize {
        self.down.iter().chain(&self.up).map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> String {
        let pairs: Vec<AdapterPair<S>> = (0..self.l)
            .flat_map(|l| (0..self.n).map(move |i| (l, i)))
            .map(|(l, i)| self.pair(l, i))
            .collect();
        checksum_all(pairs.iter().flat_map(|p| [&p.down, &p.up]))
    }

    /// `XPBK` layout: magic, version, N, L, b, d (u32), seed (u64),
    /// provenance byte, then `A` and `B` of every `(l, i)` as f32.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new(Vec::new());
        w.bytes(&BANK_MAGIC)?;
        w.u32(BANK_VERSION)?;
        for v in [self.n, self.l, self.b, self.d] {
            w.u32(v as u32)?;
        }
        w.u64(self.seed)?;
        w.u8(match self.provenance {
            Provenance::Random => 0,
            Provenance::Trained => 1,
        })?;
        for l in 0..self.l {
            for i in 0..self.n {
                w.f32s(self.down[l].row(i))?;
                w.f32s(self.up[l].row(i))?;
            }
        }
        Ok(w.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(BANK_MAGIC)?;
        let version = r.u32("version")?;
        if version != BANK_VERSION {
            return Err(Error::Version(version));
        }
        let n = r.u32("N")? as usize;
        let l = r.u32("L")? as usize;
        let b = r.u32("b")? as usize;
        let d = r.u32("d")? as usize;
        let seed = r.u64("seed")?;
        let provenance = match r.u8("provenance")? {
            0 => Provenance::Random,
            1 => Provenance::Trained,
            other => {
                return Err(Error::Malformed {
                    what: "bank provenance",
                    detail: format!("unknown byte {other}"),
                })
            }
        };
        check_dims(n, l, b, d)?;
        let mut blocks = Vec::with_capacity(l);
        for _ in 0..l {
            let mut pairs = Vec::with_capacity(n);
            for _ in 0..n {
                let down = r.f32s("adapter A", b * d)?;
                let up = r.f32s("adapter B", d * b)?;
                pairs.push(AdapterPair {
                    down: Tensor::new(vec![b, d], down.into_iter().map(|v| S::lit(v as f64)).collect())?,
                    up: Tensor::new(vec![d, b], up.into_iter().map(|v| S::lit(v as f64)).collect())?,
                });
            }
            blocks.push(pairs);
        }
        r.expect_end()?;
        Self::assemble(blocks, seed, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::codec::atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
