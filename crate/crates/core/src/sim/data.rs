//! Synthetic multi-profile classification data.
//!
//! Every token in a small active vocabulary carries a hidden feature vector.
//! A shared random linear rule scores the mean feature of a sequence; each
//! profile perturbs that rule slightly and relabels the winning category
//! through its own permutation, optionally drawn from a small shared pool. A fraction of labels is then resampled
//! uniformly as noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::train::Example;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub profiles: usize,
    pub classes: usize,
    pub samples: usize,
    pub seq_len: usize,
    /// Token ids are drawn from `0..active_vocab`.
    pub active_vocab: usize,
    /// Width of the hidden per-token feature vectors.
    pub features: usize,
    /// Scale of each profile's deviation from the shared rule.
    pub perturbation: f64,
    /// Probability that a label is replaced by a uniform draw.
    pub noise: f64,
    /// Size of the pool of category permutations profiles draw from; 0
    /// gives every profile an unrestricted random permutation.
    pub permutations: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            profiles: 50,
            classes: 3,
            samples: 60,
            seq_len: 12,
            active_vocab: 24,
            features: 8,
            perturbation: 0.3,
            noise: 0.05,
            permutations: 0,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.profiles == 0 {
            return Err(Error::config("profile count must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least 2 categories"));
        }
        if self.samples < 2 {
            return Err(Error::config("need at least 2 samples per profile"));
        }
        if self.seq_len == 0 || self.active_vocab == 0 || self.features == 0 {
            return Err(Error::config("seq_len, active_vocab and features must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(self.perturbation >= 0.0) {
            return Err(Error::config("noise must lie in [0, 1] and perturbation must be non-negative"));
        }
        Ok(())
    }

    /// Training share of each profile: `floor(0.7 · samples)`.
    pub fn train_len(&self) -> usize {
        self.samples * 7 / 10
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileData {
    pub id: String,
    pub train: Vec<Example>,
    pub holdout: Vec<Example>,
}

pub fn profile_id(index: usize) -> String {
    format!("p{index:04}")
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Profile `i` draws from its own generator stream, so its data does not
/// depend on how many profiles are generated.
pub fn generate_profiles(spec: &SyntheticSpec) -> Result<Vec<ProfileData>> {
    spec.validate()?;
    let (c, f) = (spec.classes, spec.features);
    let mut shared = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut token_features = gaussian(&mut shared, spec.active_vocab * f);
    // centre the features so that no category wins by default
    for j in 0..f {
        let mean = (0..spec.active_vocab).map(|t| token_features[t * f + j]).sum::<f64>() / spec.active_vocab as f64;
        for t in 0..spec.active_vocab {
            token_features[t * f + j] -= mean;
        }
    }
    let rule = gaussian(&mut shared, c * f);
    let pool: Vec<Vec<usize>> = (0..spec.permutations)
        .map(|j| {
            let mut perm: Vec<usize> = (0..c).collect();
            if j > 0 {
                perm.shuffle(&mut shared);
            }
            perm
        })
        .collect();

    let profiles = (0..spec.profiles)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let own: Vec<f64> = gaussian(&mut rng, c * f)
                .iter()
                .zip(&rule)
                .map(|(e, w)| w + spec.perturbation * e)
                .collect();
            let perm = if pool.is_empty() {
                let mut perm: Vec<usize> = (0..c).collect();
                perm.shuffle(&mut rng);
                perm
            } else {
                pool[rng.random_range(0..pool.len())].clone()
            };

            let examples: Vec<Example> = (0..spec.samples)
                .map(|_| {
                    let tokens: Vec<u32> = (0..spec.seq_len)
                        .map(|_| rng.random_range(0..spec.active_vocab) as u32)
                        .collect();
                    let mut mean = vec![0.0; f];
                    for &t in &tokens {
                        for (m, v) in mean.iter_mut().zip(&token_features[t as usize * f..(t as usize + 1) * f]) {
                            *m += v / spec.seq_len as f64;
                        }
                    }
                    let winner = (0..c)
                        .map(|k| own[k * f..(k + 1) * f].iter().zip(&mean).map(|(w, x)| w * x).sum::<f64>())
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (k, s)| if s > best.1 { (k, s) } else { best })
                        .0;
                    let label = if rng.random::<f64>() < spec.noise {
                        rng.random_range(0..c)
                    } else {
                        perm[winner]
                    };
                    Example { tokens, label }
                })
                .collect();
            let split = spec.train_len();
            ProfileData {
                id: profile_id(i),
                train: examples[..split].to_vec(),
                holdout: examples[split..].to_vec(),
            }
        })
        .collect();
    Ok(profiles)
}

fn tsv_line(out: &mut String, id: &str, e: &Example) {
    let tokens: Vec<String> = e.tokens.iter().map(u32::to_string).collect();
    writeln!(out, "{id}\t{}\t{}", tokens.join(" "), e.label).expect("writing to a String");
}

/// One record per line: `profile_id<TAB>space-separated tokens<TAB>label`.
pub fn to_tsv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a Example)>) -> String {
    let mut out = String::new();
    for (id, e) in rows {
        tsv_line(&mut out, id, e);
    }
    out
}

pub fn parse_tsv(text: &str) -> Result<Vec<(String, Example)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |detail: String| Error::Malformed {
                what: "dataset line",
                detail: format!("line {}: {detail}", i + 1),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, toks, label] = fields[..] else {
                return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
            };
            let tokens = toks
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|e| bad(format!("token {t:?}: {e}"))))
                .collect::<Result<Vec<u32>>>()?;
            let label = label
                .trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("label {label:?}: {e}")))?;
            Ok((id.to_string(), Example { tokens, label }))
        })
        .collect()
}

/// Groups records by profile id, keeping first-appearance order.
pub fn group(rows: Vec<(String, Example)>) -> Vec<(String, Vec<Example>)> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<Example>> = BTreeMap::new();
    for (id, e) in rows {
        by_id
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(e);
    }
    order
        .into_iter()
        .map(|id| {
            let v = by_id.remove(&id).unwrap_or_default();
            (id, v)
        })
        .collect()
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const HOLDOUT_FILE: &str = "holdout.tsv";

/// Writes `train.tsv` and `holdout.tsv` into `dir`.
pub fn write_dataset(dir: &Path, profiles: &[ProfileData]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let train = to_tsv(profiles.iter().flat_map(|p| p.train.iter().map(move |e| (p.id.as_str(), e))));
    let hold = to_tsv(profiles.iter().flat_map(|p| p.holdout.iter().map(move |e| (p.id.as_str(), e))));
    crate::codec::atomic_write(&dir.join(TRAIN_FILE), train.as_bytes())?;
    crate::codec::atomic_write(&dir.join(HOLDOUT_FILE), hold.as_bytes())
}

/// Reads a dataset directory back. Profiles that appear only in the holdout
/// file get an empty training split and vice versa.
pub fn read_dataset(dir: &Path) -> Result<Vec<ProfileData>> {
    let train = group(parse_tsv(&std::fs::read_to_string(dir.join(TRAIN_FILE))?)?);
    let hold_path = dir.join(HOLDOUT_FILE);
    let hold = if hold_path.exists() {
        group(parse_tsv(&std::fs::read_to_string(hold_path)?)?)
    } else {
        Vec::new()
    };
    let mut hold: BTreeMap<String, Vec<Example>> = hold.into_iter().collect();
    let mut out: Vec<ProfileData> = train
        .into_iter()
        .map(|(id, train)| {
            let holdout = hold.remove(&id).unwrap_or_default();
            ProfileData { id, train, holdout }
        })
        .collect();
    out.extend(hold.into_iter().map(|(id, holdout)| ProfileData {
        id,
        train: Vec::new(),
        holdout,
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(profiles: usize, samples: usize) -> SyntheticSpec {
        SyntheticSpec {
            profiles,
            samples,
            ..Default::default()
        }
    }

    #[test]
    fn split_arithmetic() {
        let p = generate_profiles(&spec(2, 10)).unwrap();
        let train: usize = p.iter().map(|p| p.train.len()).sum();
        let hold: usize = p.iter().map(|p| p.holdout.len()).sum();
        assert_eq!((train, hold), (14, 6));
    }

    #[test]
    fn seeded_generation_repeats() {
        assert_eq!(generate_profiles(&spec(3, 20)).unwrap(), generate_profiles(&spec(3, 20)).unwrap());
    }

    #[test]
    fn profile_data_independent_of_count() {
        let few = generate_profiles(&spec(2, 20)).unwrap();
        let many = generate_profiles(&spec(5, 20)).unwrap();
        assert_eq!(few[1], many[1]);
    }

    #[test]
    fn labels_cover_several_classes() {
        for p in generate_profiles(&spec(10, 20)).unwrap() {
            let mut seen = [false; 3];
            for e in p.train.iter().chain(&p.holdout) {
                seen[e.label] = true;
            }
            assert!(seen.iter().filter(|s| **s).count() >= 2, "{}", p.id);
        }
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let profiles = generate_profiles(&spec(3, 10)).unwrap();
        write_dataset(dir.path(), &profiles).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), profiles);
    }

    #[test]
    fn malformed_line_reports_position() {
        let err = parse_tsv("p0\t1 2\t0\np0\t1 x\t1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
