//! On-disk collection of profile records and the mask distance analysis.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::bits::BitMatrix;
use crate::codec::profile::{MaskMode, ProfileRecord};
use crate::error::{Error, Result};
use crate::train::Metrics;

pub const INDEX_FILE: &str = "index.tsv";
const INDEX_HEADER: &str = "profile_id\tfile\tprovenance\tbank_checksum\taccuracy\tmacro_f1";

/// How a profile's parameters were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Trained its own adapter during the warm start; stored as a record
    /// that selects exactly that bank entry.
    WarmAdapter,
    MaskOnly,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::WarmAdapter => "warm_adapter",
            Provenance::MaskOnly => "mask_only",
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warm_adapter" => Ok(Provenance::WarmAdapter),
            "mask_only" => Ok(Provenance::MaskOnly),
            other => Err(Error::Malformed {
                what: "registry provenance",
                detail: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistryEntry {
    pub profile_id: String,
    /// Relative to the registry directory.
    pub file: String,
    pub provenance: Provenance,
    pub bank_checksum: String,
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug)]
pub struct ProfileRegistry {
    dir: PathBuf,
    entries: Vec<RegistryEntry>,
}

/// A record that reproduces warm profile `index` exactly: both masks pick
/// only bank entry `index` in every block, and the LN affine is the identity
/// the warm adapters were trained with.
pub fn warm_record(profile_id: &str, index: usize, n: usize, l: usize, b: usize) -> Result<ProfileRecord> {
    let rows: Vec<[usize; 1]> = vec![[index]; l];
    let bits = BitMatrix::from_rows(n, &rows);
    let mut ln = vec![1.0f32; l * b];
    ln.extend(std::iter::repeat_n(0.0f32, l * b));
    ProfileRecord::hard(profile_id, 1, &bits, &bits, b, ln, None)
}

impl ProfileRegistry {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(ProfileRegistry {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(INDEX_FILE))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| Error::Malformed {
                what: "registry index",
                detail: format!("line {}: {detail}", i + 1),
            };
            let f: Vec<&str> = line.split('\t').collect();
            let [id, file, prov, checksum, acc, f1] = f[..] else {
                return Err(bad(format!("expected 6 fields, found {}", f.len())));
            };
            let metrics = if acc.is_empty() {
                None
            } else {
                let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
                Some(Metrics {
                    accuracy: num(acc)?,
                    macro_f1: num(f1)?,
                })
            };
            entries.push(RegistryEntry {
                profile_id: id.into(),
                file: file.into(),
                provenance: prov.parse()?,
                bank_checksum: checksum.into(),
                metrics,
            });
        }
        Ok(ProfileRegistry {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    /// Writes the record file and adds (or replaces) its index entry.
    pub fn add(
        &mut self,
        record: &ProfileRecord,
        provenance: Provenance,
        bank_checksum: &str,
        metrics: Option<Metrics>,
    ) -> Result<()> {
        if let Some(other) = self.entries.iter().find(|e| e.bank_checksum != bank_checksum) {
            return Err(Error::config(format!(
                "profile {} was registered against a different bank than {}",
                other.profile_id, record.profile_id
            )));
        }
        let file = format!("{}.xppr", record.profile_id);
        record.save(&self.dir.join(&file))?;
        let entry = RegistryEntry {
            profile_id: record.profile_id.clone(),
            file,
            provenance,
            bank_checksum: bank_checksum.to_string(),
            metrics,
        };
        match self.entries.iter_mut().find(|e| e.profile_id == entry.profile_id) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
        self.save_index()
    }

    pub fn save_index(&self) -> Result<()> {
        let mut out = String::from(INDEX_HEADER);
        out.push('\n');
        for e in &self.entries {
            let (acc, f1) = e
                .metrics
                .map_or((String::new(), String::new()), |m| (m.accuracy.to_string(), m.macro_f1.to_string()));
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{acc}\t{f1}",
                e.profile_id,
                e.file,
                e.provenance.as_str(),
                e.bank_checksum
            )
            .expect("writing to a String");
        }
        crate::codec::atomic_write(&self.dir.join(INDEX_FILE), out.as_bytes())
    }

    pub fn load(&self, entry: &RegistryEntry) -> Result<ProfileRecord> {
        ProfileRecord::load(&self.dir.join(&entry.file))
    }

    pub fn load_all(&self) -> Result<Vec<ProfileRecord>> {
        self.entries.iter().map(|e| self.load(e)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceReport {
    pub ids: Vec<String>,
    /// Symmetric, zero diagonal.
    pub matrix: Vec<Vec<f64>>,
    /// Most distant pair; the earliest pair wins ties.
    pub farthest: (usize, usize),
}

/// Euclidean distance between the concatenated 0/1 bits of both masks.
pub fn mask_distances(records: &[&ProfileRecord]) -> Result<DistanceReport> {
    if records.len() < 2 {
        return Err(Error::config("mask distances need at least two hard profiles"));
    }
    let first = records[0];
    let mut flat = Vec::with_capacity(records.len());
    for r in records {
        if r.mode != MaskMode::Hard {
            return Err(Error::config(format!("profile {} is not a hard-mask profile", r.profile_id)));
        }
        if (r.n, r.l, r.k) != (first.n, first.l, first.k) {
            return Err(Error::config(format!(
                "profile {} has (N, L, k) = ({}, {}, {}), expected ({}, {}, {})",
                r.profile_id, r.n, r.l, r.k, first.n, first.l, first.k
            )));
        }
        let (a, b) = r.bit_masks()?;
        let mut v = a.to_f64s();
        v.extend(b.to_f64s());
        flat.push(v);
    }
    let p = records.len();
    let mut matrix = vec![vec![0.0; p]; p];
    let mut farthest = (0, 1);
    let mut best = -1.0;
    for i in 0..p {
        for j in i + 1..p {
            let d = flat[i].iter().zip(&flat[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            matrix[i][j] = d;
            matrix[j][i] = d;
            if d > best {
                best = d;
                farthest = (i, j);
            }
        }
    }
    Ok(DistanceReport {
        ids: records.iter().map(|r| r.profile_id.clone()).collect(),
        matrix,
        farthest,
    })
}

impl DistanceReport {
    pub fn matrix_csv(&self) -> String {
        let mut out = String::from("profile");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (id, row) in self.ids.iter().zip(&self.matrix) {
            out.push_str(id);
            for d in row {
                write!(out, ",{d}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}

/// One row per (mask, block) with the `N` bits as 0/1 columns.
pub fn bit_grid_csv(record: &ProfileRecord) -> Result<String> {
    let (a, b) = record.bit_masks()?;
    let mut out = String::from("mask,block");
    for i in 0..record.n {
        write!(out, ",a{i}").expect("writing to a String");
    }
    out.push('\n');
    for (name, m) in [("M_A", &a), ("M_B", &b)] {
        for row in 0..m.rows() {
            write!(out, "{name},{row}").expect("writing to a String");
            for col in 0..m.cols() {
                out.push_str(if m.get(row, col) { ",1" } else { ",0" });
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard(id: &str, rows: &[&[usize]], n: usize) -> ProfileRecord {
        let bits = BitMatrix::from_rows(n, rows);
        let l = rows.len();
        ProfileRecord::hard(id, rows[0].len(), &bits, &bits, 2, vec![0.0; 4 * l], None).unwrap()
    }

    #[test]
    fn identical_profiles_are_zero_apart() {
        let a = hard("a", &[&[0, 1]], 4);
        let b = hard("b", &[&[0, 1]], 4);
        let r = mask_distances(&[&a, &b]).unwrap();
        assert_eq!(r.matrix[0][1], 0.0);
    }

    #[test]
    fn disjoint_supports() {
        let a = hard("a", &[&[0, 1, 2, 3]], 8);
        let b = hard("b", &[&[4, 5, 6, 7]], 8);
        let r = mask_distances(&[&a, &b]).unwrap();
        assert_eq!(r.matrix[0][1], 4.0);
    }

    #[test]
    fn symmetric_with_zero_diagonal() {
        let recs = [
            hard("a", &[&[0], &[1]], 3),
            hard("b", &[&[1], &[1]], 3),
            hard("c", &[&[2], &[0]], 3),
        ];
        let refs: Vec<&ProfileRecord> = recs.iter().collect();
        let r = mask_distances(&refs).unwrap();
        for i in 0..3 {
            assert_eq!(r.matrix[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(r.matrix[i][j], r.matrix[j][i]);
            }
        }
        assert_eq!(r.farthest, (0, 2));
    }

    #[test]
    fn mixed_configs_rejected() {
        let a = hard("a", &[&[0]], 4);
        let b = hard("b", &[&[0, 1]], 4);
        assert!(mask_distances(&[&a, &b]).is_err());
    }

    #[test]
    fn registry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = ProfileRegistry::create(dir.path()).unwrap();
        let rec = warm_record("p0000", 2, 5, 3, 2).unwrap();
        let m = Metrics {
            accuracy: 0.75,
            macro_f1: 0.5,
        };
        reg.add(&rec, Provenance::WarmAdapter, "abc", Some(m)).unwrap();
        reg.add(&hard("p0001", &[&[0], &[1], &[2]], 5), Provenance::MaskOnly, "abc", None)
            .unwrap();
        assert!(reg.add(&rec, Provenance::MaskOnly, "other", None).is_err());
        let back = ProfileRegistry::open(dir.path()).unwrap();
        assert_eq!(back.entries(), reg.entries());
        assert_eq!(back.load(&back.entries()[0]).unwrap(), rec);
    }

    #[test]
    fn grid_has_one_row_per_mask_block() {
        let rec = warm_record("w", 1, 3, 2, 2).unwrap();
        let grid = bit_grid_csv(&rec).unwrap();
        assert_eq!(grid.lines().count(), 1 + 4);
        assert_eq!(grid.lines().nth(1).unwrap(), "M_A,0,0,1,0");
    }
}
