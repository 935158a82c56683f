//! Frozen backbone plus an adapter slot and a classification head.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::layer::{adapter_forward, aggregate, mean_aggregate, AdapterOptions, AdapterVars};
use crate::adapter::mask::{bit_weights, hard_row_weights, soft_row_weights, MaskSettings, MaskTensors, MaskVariant};
use crate::adapter::{AdapterBank, AdapterPair};
use crate::autodiff::{Tape, Var};
use crate::backbone::Backbone;
use crate::codec::bits::BitMatrix;
use crate::codec::bytes::{ByteReader, ByteWriter};
use crate::codec::profile::{HeadPayload, MaskMode, ProfileRecord};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{checksum_all, Tensor};

pub const HEAD_MAGIC: [u8; 4] = *b"XPHD";
pub const HEAD_VERSION: u32 = 1;

/// Linear classifier over mean-pooled hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<S> {
    /// `[d×c]`
    pub weight: Tensor<S>,
    /// `[c]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> Head<S> {
    pub fn random(d: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Head {
            weight: Tensor::randn(&[d, classes], 1.0 / (d as f64).sqrt(), &mut rng),
            bias: Tensor::zeros(&[classes]),
        })
    }

    pub fn hidden(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.weight.requires_grad = on;
        self.bias.requires_grad = on;
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn checksum(&self) -> String {
        checksum_all([&self.weight, &self.bias])
    }

    pub fn to_payload(&self) -> HeadPayload {
        let values = self
            .weight
            .data()
            .iter()
            .chain(self.bias.data())
            .map(|v| v.to_f32_lossy())
            .collect();
        HeadPayload {
            classes: self.classes(),
            values,
        }
    }

    pub fn from_payload(p: &HeadPayload) -> Result<Self> {
        let c = p.classes;
        if c == 0 || !p.values.len().is_multiple_of(c) || p.values.len() < 2 * c {
            return Err(Error::PayloadLength {
                what: "head",
                expected: c,
                actual: p.values.len(),
            });
        }
        let d = p.values.len() / c - 1;
        let vals: Vec<S> = p.values.iter().map(|&v| S::lit(v as f64)).collect();
        Ok(Head {
            weight: Tensor::new(vec![d, c], vals[..d * c].to_vec())?,
            bias: Tensor::new(vec![c], vals[d * c..].to_vec())?,
        })
    }

    /// `XPHD` layout: magic, version, d, c (u32), weight then bias as f32.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new(Vec::new());
        w.bytes(&HEAD_MAGIC)?;
        w.u32(HEAD_VERSION)?;
        w.u32(self.hidden() as u32)?;
        w.u32(self.classes() as u32)?;
        w.f32s(self.weight.data())?;
        w.f32s(self.bias.data())?;
        Ok(w.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(HEAD_MAGIC)?;
        let version = r.u32("version")?;
        if version != HEAD_VERSION {
            return Err(Error::Version(version));
        }
        let d = r.u32("d")? as usize;
        let c = r.u32("classes")? as usize;
        let weight = r.f32s("head weight", d * c)?;
        let bias = r.f32s("head bias", c)?;
        r.expect_end()?;
        let lift = |v: Vec<f32>| v.into_iter().map(|x| S::lit(x as f64)).collect();
        Ok(Head {
            weight: Tensor::new(vec![d, c], lift(weight))?,
            bias: Tensor::new(vec![c], lift(bias))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::codec::atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Stored hard masks: bits plus the LN affine, no logits.
#[derive(Clone, Debug)]
pub struct FrozenMasks<S> {
    pub bits_a: BitMatrix,
    pub bits_b: BitMatrix,
    pub k: usize,
    pub ln_gamma: Tensor<S>,
    pub ln_beta: Tensor<S>,
}

/// What sits in each block's adapter position.
#[derive(Clone, Debug)]
pub enum Slot<S> {
    /// No adapter: the head sees the plain backbone.
    Empty,
    /// One trainable adapter per block.
    Single(Vec<AdapterPair<S>>),
    /// Mask tensors over a shared frozen bank.
    Masked { bank: Arc<AdapterBank<S>>, masks: MaskTensors<S> },
    /// Binarised masks loaded from a profile record.
    Frozen { bank: Arc<AdapterBank<S>>, masks: FrozenMasks<S> },
}

/// How a forward pass treats stochastic mask selection.
pub enum Pass<'a> {
    /// Gumbel noise drawn from the given generator at the configured scale.
    Train(&'a mut ChaCha8Rng),
    /// Noise-free selection.
    Eval,
}

/// Logits plus the tape variables the parameters were bound to, in
/// [`Model::parameters`] order.
pub struct Forward {
    pub logits: Var,
    pub bound: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub backbone: Arc<Backbone<S>>,
    pub slot: Slot<S>,
    pub head: Head<S>,
    pub options: AdapterOptions,
}

impl<S: Scalar> Model<S> {
    pub fn new(backbone: Arc<Backbone<S>>, slot: Slot<S>, head: Head<S>, options: AdapterOptions) -> Result<Self> {
        let d = backbone.hidden();
        if head.hidden() != d {
            return Err(Error::shape("head", head.weight.shape(), &[d]));
        }
        let l = backbone.layers();
        match &slot {
            Slot::Empty => {}
            Slot::Single(pairs) => {
                if pairs.len() != l || pairs.iter().any(|p| p.hidden() != d) {
                    return Err(Error::config("single adapter must supply one d-wide pair per block"));
                }
            }
            Slot::Masked { bank, masks } => {
                check_bank(bank, l, d)?;
                if (masks.layers(), masks.n(), masks.bottleneck()) != (l, bank.n(), bank.bottleneck()) {
                    return Err(Error::shape(
                        "mask tensors",
                        &[masks.layers(), masks.n(), masks.bottleneck()],
                        &[l, bank.n(), bank.bottleneck()],
                    ));
                }
            }
            Slot::Frozen { bank, masks } => {
                check_bank(bank, l, d)?;
                if (masks.bits_a.rows(), masks.bits_a.cols()) != (l, bank.n()) {
                    return Err(Error::shape(
                        "stored masks",
                        &[masks.bits_a.rows(), masks.bits_a.cols()],
                        &[l, bank.n()],
                    ));
                }
            }
        }
        Ok(Model {
            backbone,
            slot,
            head,
            options,
        })
    }

    /// One fresh adapter per block, all drawn from `seed`.
    pub fn single_adapter(
        backbone: Arc<Backbone<S>>,
        b: usize,
        seed: u64,
        head: Head<S>,
        options: AdapterOptions,
    ) -> Result<Self> {
        let d = backbone.hidden();
        if b == 0 || b >= d {
            return Err(Error::config(format!("bottleneck b={b} must be in 1..{d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..backbone.layers()).map(|_| AdapterPair::random(b, d, &mut rng)).collect();
        Self::new(backbone, Slot::Single(pairs), head, options)
    }

    pub fn masked(
        backbone: Arc<Backbone<S>>,
        bank: Arc<AdapterBank<S>>,
        settings: MaskSettings,
        head: Head<S>,
        options: AdapterOptions,
    ) -> Result<Self> {
        let masks = MaskTensors::new(bank.layers(), bank.n(), bank.bottleneck(), settings)?;
        Self::new(backbone, Slot::Masked { bank, masks }, head, options)
    }

    /// Rebuilds a profile's model from its record. Hard records become
    /// [`Slot::Frozen`]; soft records restore their logits. A head stored in
    /// the record takes precedence over `shared_head`.
    pub fn from_record(
        backbone: Arc<Backbone<S>>,
        bank: Arc<AdapterBank<S>>,
        record: &ProfileRecord,
        shared_head: Option<&Head<S>>,
        options: AdapterOptions,
    ) -> Result<Self> {
        record.validate()?;
        if (record.n, record.l, record.b) != (bank.n(), bank.layers(), bank.bottleneck()) {
            return Err(Error::shape(
                "profile vs bank",
                &[record.n, record.l, record.b],
                &[bank.n(), bank.layers(), bank.bottleneck()],
            ));
        }
        let head = match (&record.head, shared_head) {
            (Some(p), _) => Head::from_payload(p)?,
            (None, Some(h)) => h.clone(),
            (None, None) => return Err(Error::config(format!("profile {} has no head", record.profile_id))),
        };
        let (l, b) = (record.l, record.b);
        let lift = |v: &[f32]| v.iter().map(|&x| S::lit(x as f64)).collect::<Vec<S>>();
        let ln_gamma = Tensor::new(vec![l, b], lift(&record.ln_affine[..l * b]))?;
        let ln_beta = Tensor::new(vec![l, b], lift(&record.ln_affine[l * b..]))?;
        let slot = match record.mode {
            MaskMode::Hard => {
                let (bits_a, bits_b) = record.bit_masks()?;
                Slot::Frozen {
                    bank,
                    masks: FrozenMasks {
                        bits_a,
                        bits_b,
                        k: record.k,
                        ln_gamma,
                        ln_beta,
                    },
                }
            }
            MaskMode::Soft => {
                let (a, bl) = record.soft_logits()?;
                let mut masks = MaskTensors::new(l, record.n, b, MaskSettings::soft())?;
                masks.logits_a = Tensor::new(vec![l, record.n], lift(&a))?;
                masks.logits_b = Tensor::new(vec![l, record.n], lift(&bl))?;
                masks.ln_gamma = ln_gamma;
                masks.ln_beta = ln_beta;
                masks.set_trainable(false);
                Slot::Masked { bank, masks }
            }
        };
        Self::new(backbone, slot, head, options)
    }

    /// Packs the current masks into a record. Hard masks are binarised.
    pub fn to_record(&self, profile_id: &str, include_head: bool) -> Result<ProfileRecord> {
        let Slot::Masked { masks, .. } = &self.slot else {
            return Err(Error::config("only mask-trained models produce profile records"));
        };
        let f32s = |t: &Tensor<S>| t.data().iter().map(|v| v.to_f32_lossy()).collect::<Vec<f32>>();
        let mut ln = f32s(&masks.ln_gamma);
        ln.extend(f32s(&masks.ln_beta));
        let head = include_head.then(|| self.head.to_payload());
        let (l, n, b) = (masks.layers(), masks.n(), masks.bottleneck());
        match masks.settings.mode {
            MaskMode::Hard => {
                let (a, bb) = masks.binarize()?;
                ProfileRecord::hard(profile_id, masks.settings.k, &a, &bb, b, ln, head)
            }
            MaskMode::Soft => ProfileRecord::soft(profile_id, n, l, &f32s(&masks.logits_a), &f32s(&masks.logits_b), b, ln, head),
        }
    }

    /// Slot tensors then head tensors, in a fixed order.
    pub fn parameters(&self) -> Vec<&Tensor<S>> {
        let mut out: Vec<&Tensor<S>> = match &self.slot {
            Slot::Empty => Vec::new(),
            Slot::Single(pairs) => pairs.iter().flat_map(|p| [&p.down, &p.up]).collect(),
            Slot::Masked { masks, .. } => masks.tensors().to_vec(),
            Slot::Frozen { masks, .. } => vec![&masks.ln_gamma, &masks.ln_beta],
        };
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = match &mut self.slot {
            Slot::Empty => Vec::new(),
            Slot::Single(pairs) => pairs.iter_mut().flat_map(|p| [&mut p.down, &mut p.up]).collect(),
            Slot::Masked { masks, .. } => vec![
                &mut masks.logits_a,
                &mut masks.logits_b,
                &mut masks.ln_gamma,
                &mut masks.ln_beta,
            ],
            Slot::Frozen { masks, .. } => vec![&mut masks.ln_gamma, &mut masks.ln_beta],
        };
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Trainable elements outside the head.
    pub fn slot_trainable_count(&self) -> usize {
        let params = self.parameters();
        params[..params.len() - 2]
            .iter()
            .filter(|t| t.requires_grad)
            .map(|t| t.numel())
            .sum()
    }

    /// Every trainable element, backbone and bank included.
    pub fn trainable_count(&self) -> usize {
        let frozen_parts: usize = self
            .backbone
            .tensors()
            .iter()
            .filter(|t| t.requires_grad)
            .map(|t| t.numel())
            .sum();
        let own: usize = self
            .parameters()
            .iter()
            .filter(|t| t.requires_grad)
            .map(|t| t.numel())
            .sum();
        frozen_parts + own
    }

    pub fn bank(&self) -> Option<&Arc<AdapterBank<S>>> {
        match &self.slot {
            Slot::Masked { bank, .. } | Slot::Frozen { bank, .. } => Some(bank),
            _ => None,
        }
    }

    /// Mean-pooled final hidden states, `[batch×d]`.
    pub fn features(&self, tape: &mut Tape<S>, tokens: &[Vec<u32>], pass: Pass<'_>) -> Result<(Var, Vec<Var>)> {
        let bound: Vec<Var> = self.parameters().into_iter().map(|t| tape.leaf(t)).collect();
        let adapters = self.bind_adapters(tape, &bound, pass)?;
        let opts = self.options;
        let hidden = match adapters {
            None => self.backbone.forward(tape, tokens, &mut crate::backbone::identity_hook)?,
            Some(vars) => self
                .backbone
                .forward(tape, tokens, &mut |tape, l, h| adapter_forward(tape, h, &vars[l], &opts))?,
        };
        Ok((tape.mean_pool(hidden)?, bound))
    }

    pub fn forward(&self, tape: &mut Tape<S>, tokens: &[Vec<u32>], pass: Pass<'_>) -> Result<Forward> {
        let (pooled, bound) = self.features(tape, tokens, pass)?;
        let n = bound.len();
        let logits = head_logits(tape, pooled, bound[n - 2], bound[n - 1])?;
        Ok(Forward { logits, bound })
    }

    /// Arg-max class per row.
    pub fn predict(&self, tokens: &[Vec<u32>]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, tokens, Pass::Eval)?;
        Ok(argmax_rows(tape.value(f.logits), self.head.classes()))
    }

    /// Per-block adapter variables for the current slot.
    fn bind_adapters(&self, tape: &mut Tape<S>, bound: &[Var], pass: Pass<'_>) -> Result<Option<Vec<AdapterVars>>> {
        let layers = self.backbone.layers();
        match &self.slot {
            Slot::Empty => Ok(None),
            Slot::Single(pairs) => {
                let b = pairs[0].bottleneck();
                let ones = tape.constant(vec![b], vec![S::one(); b])?;
                let zeros = tape.constant(vec![b], vec![S::zero(); b])?;
                Ok(Some(
                    (0..layers)
                        .map(|l| AdapterVars {
                            down: bound[2 * l],
                            up: bound[2 * l + 1],
                            ln_gamma: ones,
                            ln_beta: zeros,
                        })
                        .collect(),
                ))
            }
            Slot::Masked { bank, masks } => {
                let s = masks.settings;
                let (wa, wb) = match (s.mode, pass) {
                    (MaskMode::Soft, _) => (soft_row_weights(tape, bound[0])?, soft_row_weights(tape, bound[1])?),
                    (MaskMode::Hard, Pass::Train(rng)) => (
                        hard_row_weights(tape, bound[0], s.k, s.tau, s.nu, rng)?,
                        hard_row_weights(tape, bound[1], s.k, s.tau, s.nu, rng)?,
                    ),
                    (MaskMode::Hard, Pass::Eval) => {
                        let mut unused = ChaCha8Rng::seed_from_u64(0);
                        (
                            hard_row_weights(tape, bound[0], s.k, s.tau, 0.0, &mut unused)?,
                            hard_row_weights(tape, bound[1], s.k, s.tau, 0.0, &mut unused)?,
                        )
                    }
                };
                let up_only = s.variant == MaskVariant::UpOnly;
                bank_adapters(tape, bank, wa, wb, up_only, bound[2], bound[3]).map(Some)
            }
            Slot::Frozen { bank, masks } => {
                let wa = bit_weights::<S>(&masks.bits_a, masks.k);
                let wb = bit_weights::<S>(&masks.bits_b, masks.k);
                let wa = tape.leaf(&wa);
                let wb = tape.leaf(&wb);
                bank_adapters(tape, bank, wa, wb, false, bound[0], bound[1]).map(Some)
            }
        }
    }
}

fn check_bank<S: Scalar>(bank: &AdapterBank<S>, l: usize, d: usize) -> Result<()> {
    if (bank.layers(), bank.hidden()) != (l, d) {
        return Err(Error::shape("bank vs backbone", &[bank.layers(), bank.hidden()], &[l, d]));
    }
    Ok(())
}

/// Aggregates every block's adapter from `[L×N]` weight matrices.
fn bank_adapters<S: Scalar>(
    tape: &mut Tape<S>,
    bank: &AdapterBank<S>,
    wa: Var,
    wb: Var,
    up_only: bool,
    gamma: Var,
    beta: Var,
) -> Result<Vec<AdapterVars>> {
    let (b, d) = (bank.bottleneck(), bank.hidden());
    (0..bank.layers())
        .map(|l| {
            let down_stack = tape.leaf(bank.stacked_down(l));
            let up_stack = tape.leaf(bank.stacked_up(l));
            let down = if up_only {
                mean_aggregate(tape, down_stack, b, d)?
            } else {
                let row = tape.slice_rows(wa, l, 1)?;
                aggregate(tape, row, down_stack, b, d)?
            };
            let row = tape.slice_rows(wb, l, 1)?;
            let up = aggregate(tape, row, up_stack, d, b)?;
            let g = tape.slice_rows(gamma, l, 1)?;
            let bt = tape.slice_rows(beta, l, 1)?;
            Ok(AdapterVars {
                down,
                up,
                ln_gamma: tape.reshape(g, &[b])?,
                ln_beta: tape.reshape(bt, &[b])?,
            })
        })
        .collect()
}

/// `pooled · W + bias`.
pub fn head_logits<S: Scalar>(tape: &mut Tape<S>, pooled: Var, weight: Var, bias: Var) -> Result<Var> {
    let z = tape.matmul(pooled, weight)?;
    tape.add_bias(z, bias)
}

/// Index of the largest entry per row; the lowest index wins ties.
pub fn argmax_rows<S: Scalar>(values: &[S], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
