//! The `.xppr` per-profile record.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XPPR" | version u32 | id_len u32 | id bytes (UTF-8)
//! mode u8 (0 soft, 1 hard) | N u32 | L u32 | b u32 | k u32
//! M_A payload | M_B payload
//! ln_affine: L·b gamma then L·b beta, f32
//! has_head u8 | [classes u32 | len u32 | len × f32]
//! ```
//!
//! Hard payloads are [`BitMatrix`] rows of `ceil(N/8)` bytes; soft payloads
//! are `L·N` little-endian `f32` logits per mask.

use std::path::Path;

use crate::codec::bits::BitMatrix;
use crate::codec::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const PROFILE_MAGIC: [u8; 4] = *b"XPPR";
pub const PROFILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskMode {
    Soft,
    Hard,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Soft => "soft",
            MaskMode::Hard => "hard",
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(MaskMode::Soft),
            "hard" => Ok(MaskMode::Hard),
            other => Err(Error::config(format!("unknown mask mode {other:?} (expected soft|hard)"))),
        }
    }
}

/// Classification head weights: `hidden × classes` matrix then `classes` bias.
#[derive(Clone, Debug)]
pub struct HeadPayload {
    pub classes: usize,
    pub values: Vec<f32>,
}

impl PartialEq for HeadPayload {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes && bits_eq(&self.values, &other.values)
    }
}

#[derive(Clone, Debug)]
pub struct ProfileRecord {
    pub profile_id: String,
    pub mode: MaskMode,
    pub n: usize,
    pub l: usize,
    pub b: usize,
    /// Selected adapters per row; zero for soft records.
    pub k: usize,
    pub mask_payload: Vec<u8>,
    pub ln_affine: Vec<f32>,
    pub head: Option<HeadPayload>,
}

/// Equality is bitwise on the float payloads.
impl PartialEq for ProfileRecord {
    fn eq(&self, other: &Self) -> bool {
        self.profile_id == other.profile_id
            && self.mode == other.mode
            && (self.n, self.l, self.b, self.k) == (other.n, other.l, other.b, other.k)
            && self.mask_payload == other.mask_payload
            && bits_eq(&self.ln_affine, &other.ln_affine)
            && self.head == other.head
    }
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl ProfileRecord {
    /// Bytes of one mask's payload.
    pub fn mask_len(mode: MaskMode, n: usize, l: usize) -> usize {
        match mode {
            MaskMode::Hard => BitMatrix::payload_len(l, n),
            MaskMode::Soft => n * l * 4,
        }
    }

    /// Builds a hard record from two k-hot bit matrices.
    pub fn hard(
        profile_id: impl Into<String>,
        k: usize,
        bits_a: &BitMatrix,
        bits_b: &BitMatrix,
        b: usize,
        ln_affine: Vec<f32>,
        head: Option<HeadPayload>,
    ) -> Result<Self> {
        if (bits_a.rows(), bits_a.cols()) != (bits_b.rows(), bits_b.cols()) {
            return Err(Error::shape(
                "profile masks",
                &[bits_a.rows(), bits_a.cols()],
                &[bits_b.rows(), bits_b.cols()],
            ));
        }
        let mut payload = bits_a.as_bytes().to_vec();
        payload.extend_from_slice(bits_b.as_bytes());
        let rec = ProfileRecord {
            profile_id: profile_id.into(),
            mode: MaskMode::Hard,
            n: bits_a.cols(),
            l: bits_a.rows(),
            b,
            k,
            mask_payload: payload,
            ln_affine,
            head,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Builds a soft record from two `L×N` logit arrays.
    #[allow(clippy::too_many_arguments)]
    pub fn soft(
        profile_id: impl Into<String>,
        n: usize,
        l: usize,
        logits_a: &[f32],
        logits_b: &[f32],
        b: usize,
        ln_affine: Vec<f32>,
        head: Option<HeadPayload>,
    ) -> Result<Self> {
        let mut payload = Vec::with_capacity(2 * n * l * 4);
        for v in logits_a.iter().chain(logits_b) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let rec = ProfileRecord {
            profile_id: profile_id.into(),
            mode: MaskMode::Soft,
            n,
            l,
            b,
            k: 0,
            mask_payload: payload,
            ln_affine,
            head,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = 2 * Self::mask_len(self.mode, self.n, self.l);
        if self.mask_payload.len() != expected {
            return Err(Error::PayloadLength {
                what: "mask payload",
                expected,
                actual: self.mask_payload.len(),
            });
        }
        let expected = 2 * self.l * self.b;
        if self.ln_affine.len() != expected {
            return Err(Error::PayloadLength {
                what: "ln affine",
                expected,
                actual: self.ln_affine.len(),
            });
        }
        if let Some(head) = &self.head {
            if head.classes == 0 || head.values.is_empty() || head.values.len() % head.classes != 0 {
                return Err(Error::Malformed {
                    what: "profile head",
                    detail: format!("{} values for {} classes", head.values.len(), head.classes),
                });
            }
        }
        match self.mode {
            MaskMode::Hard => {
                if self.k == 0 || self.k > self.n {
                    return Err(Error::TopK { k: self.k, n: self.n });
                }
                let (a, b) = self.bit_masks_unchecked()?;
                a.check_k_hot("M_A", self.k)?;
                b.check_k_hot("M_B", self.k)?;
            }
            MaskMode::Soft => {
                if self.k != 0 {
                    return Err(Error::Malformed {
                        what: "soft profile",
                        detail: format!("k must be 0, got {}", self.k),
                    });
                }
            }
        }
        Ok(())
    }

    fn bit_masks_unchecked(&self) -> Result<(BitMatrix, BitMatrix)> {
        let half = self.mask_payload.len() / 2;
        Ok((
            BitMatrix::from_bytes(self.l, self.n, self.mask_payload[..half].to_vec())?,
            BitMatrix::from_bytes(self.l, self.n, self.mask_payload[half..].to_vec())?,
        ))
    }

    /// `(M_A, M_B)` bit matrices of a hard record.
    pub fn bit_masks(&self) -> Result<(BitMatrix, BitMatrix)> {
        if self.mode != MaskMode::Hard {
            return Err(Error::SoftMasks);
        }
        self.bit_masks_unchecked()
    }

    /// `(M_A, M_B)` logits of a soft record, each `L×N` row-major.
    pub fn soft_logits(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        if self.mode != MaskMode::Soft {
            return Err(Error::Malformed {
                what: "profile",
                detail: "hard records carry no logits".into(),
            });
        }
        let all: Vec<f32> = self
            .mask_payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let half = all.len() / 2;
        Ok((all[..half].to_vec(), all[half..].to_vec()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = ByteWriter::new(Vec::new());
        w.bytes(&PROFILE_MAGIC)?;
        w.u32(PROFILE_VERSION)?;
        w.u32(self.profile_id.len() as u32)?;
        w.bytes(self.profile_id.as_bytes())?;
        w.u8(match self.mode {
            MaskMode::Soft => 0,
            MaskMode::Hard => 1,
        })?;
        for v in [self.n, self.l, self.b, self.k] {
            w.u32(v as u32)?;
        }
        w.bytes(&self.mask_payload)?;
        w.f32s(&self.ln_affine)?;
        match &self.head {
            None => w.u8(0)?,
            Some(head) => {
                w.u8(1)?;
                w.u32(head.classes as u32)?;
                w.u32(head.values.len() as u32)?;
                w.f32s(&head.values)?;
            }
        }
        Ok(w.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(PROFILE_MAGIC)?;
        let version = r.u32("version")?;
        if version != PROFILE_VERSION {
            return Err(Error::Version(version));
        }
        let id_len = r.u32("profile id length")? as usize;
        let profile_id = String::from_utf8(r.take("profile id", id_len)?.to_vec()).map_err(|e| Error::Malformed {
            what: "profile id",
            detail: e.to_string(),
        })?;
        let mode = match r.u8("mode")? {
            0 => MaskMode::Soft,
            1 => MaskMode::Hard,
            other => {
                return Err(Error::Malformed {
                    what: "mode",
                    detail: format!("unknown mode byte {other}"),
                })
            }
        };
        let n = r.u32("N")? as usize;
        let l = r.u32("L")? as usize;
        let b = r.u32("b")? as usize;
        let k = r.u32("k")? as usize;
        let payload_len = 2 * Self::mask_len(mode, n, l);
        let mask_payload = r.take("mask payload", payload_len)?.to_vec();
        let ln_affine = r.f32s("ln affine", 2 * l * b)?;
        let head = match r.u8("head flag")? {
            0 => None,
            1 => {
                let classes = r.u32("head classes")? as usize;
                let len = r.u32("head length")? as usize;
                Some(HeadPayload {
                    classes,
                    values: r.f32s("head", len)?,
                })
            }
            other => {
                return Err(Error::Malformed {
                    what: "head flag",
                    detail: format!("unexpected byte {other}"),
                })
            }
        };
        r.expect_end()?;
        let rec = ProfileRecord {
            profile_id,
            mode,
            n,
            l,
            b,
            k,
            mask_payload,
            ln_affine,
            head,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::codec::atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard_record(n: usize, l: usize, k: usize) -> ProfileRecord {
        let rows: Vec<Vec<usize>> = (0..l).map(|r| (0..k).map(|i| (r + i) % n).collect()).collect();
        let bits = BitMatrix::from_rows(n, &rows);
        ProfileRecord::hard("author-1", k, &bits, &bits, 4, vec![0.5; 2 * l * 4], None).unwrap()
    }

    #[test]
    fn hard_payload_matches_table_size() {
        let rec = hard_record(100, 12, 50);
        assert_eq!(rec.mask_payload.len(), 312);
    }

    #[test]
    fn full_byte_mask() {
        let rec = hard_record(8, 1, 8);
        assert_eq!(&rec.mask_payload[..1], &[0xFF]);
    }

    #[test]
    fn round_trip() {
        let mut rec = hard_record(13, 3, 2);
        rec.head = Some(HeadPayload {
            classes: 3,
            values: vec![1.0, -0.0, f32::MIN_POSITIVE, 4.0, 5.0, 6.0],
        });
        let back = ProfileRecord::decode(&rec.encode().unwrap()).unwrap();
        assert_eq!(back, rec);

        let soft = ProfileRecord::soft("s", 3, 2, &[0.1; 6], &[-0.2; 6], 2, vec![1.0; 8], None).unwrap();
        assert_eq!(soft.mask_payload.len(), 2 * 3 * 2 * 4);
        assert_eq!(ProfileRecord::decode(&soft.encode().unwrap()).unwrap(), soft);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = hard_record(8, 2, 3).encode().unwrap();
        bytes[0] = b'Y';
        assert!(matches!(ProfileRecord::decode(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = hard_record(8, 2, 3).encode().unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                ProfileRecord::decode(&bytes[..cut]),
                Err(Error::Truncated { .. })
            ));
        }
    }

    #[test]
    fn row_with_missing_bit_rejected() {
        let rec = hard_record(8, 2, 3);
        let mut bytes = rec.encode().unwrap();
        let payload_at = 4 + 4 + 4 + rec.profile_id.len() + 1 + 16;
        // row 1 of M_A holds bits {1, 2, 3}; clear bit 3
        bytes[payload_at + 1] &= !(1 << 3);
        match ProfileRecord::decode(&bytes) {
            Err(Error::RowBitCount { mask, row, expected, found }) => {
                assert_eq!((mask, row, expected, found), ("M_A", 1, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encode_rejects_bad_payload_length() {
        let mut rec = hard_record(8, 2, 3);
        rec.mask_payload.pop();
        match rec.encode() {
            Err(Error::PayloadLength { expected, actual, .. }) => assert_eq!((expected, actual), (4, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
