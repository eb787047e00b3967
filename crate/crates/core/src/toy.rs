//! The hierarchical toy distribution: six viewpoints, viewpoint `i` carrying
//! `2^i` equally likely rotation modes.
//!
//! Because training and evaluation draw from the same distribution, the
//! expectation of any per-sample quantity is a finite weighted average over
//! the 63 modes (see [`evaluation_set`]).

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binning::BinPartition;
use crate::density::log_dilution_term;
use crate::error::{Error, Result};
use crate::so3::{geodesic_distance, sample_uniform_rotation, UnitQuaternion};

pub const VIEWPOINTS: usize = 6;
const MIN_MODE_SEPARATION_DEG: f64 = 1.0;
const MAX_MODE_RETRIES: usize = 100;

/// Ground-truth modes per viewpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModeSet {
    seed: u64,
    modes: Vec<Vec<UnitQuaternion>>,
}

/// One draw from the hierarchical distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySample {
    pub viewpoint: usize,
    pub q: UnitQuaternion,
}

impl ToyModeSet {
    /// Rebuilds a mode set read from disk, checking its structure.
    pub fn from_modes(seed: u64, modes: Vec<Vec<UnitQuaternion>>) -> Result<Self> {
        if modes.len() != VIEWPOINTS {
            return Err(Error::ModeSet(format!(
                "expected {VIEWPOINTS} viewpoints, got {}",
                modes.len()
            )));
        }
        for (i, m) in modes.iter().enumerate() {
            if m.len() != 1 << i {
                return Err(Error::ModeSet(format!(
                    "viewpoint {i} has {} modes, expected {}",
                    m.len(),
                    1 << i
                )));
            }
        }
        Ok(Self { seed, modes })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn viewpoints(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self, viewpoint: usize) -> &[UnitQuaternion] {
        &self.modes[viewpoint]
    }

    pub fn total_modes(&self) -> usize {
        self.modes.iter().map(Vec::len).sum()
    }

    /// Index of, and distance (radians) to, the closest mode of `viewpoint`.
    pub fn nearest_mode(&self, viewpoint: usize, q: &UnitQuaternion) -> (usize, f64) {
        self.modes[viewpoint]
            .iter()
            .map(|m| geodesic_distance(m, q))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("every viewpoint has a mode")
    }

    pub fn sample_stream<R: Rng>(&self, rng: R) -> SampleStream<'_, R> {
        SampleStream { modes: self, rng }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ToySample {
        let viewpoint = rng.random_range(0..self.modes.len());
        let modes = &self.modes[viewpoint];
        let q = modes[rng.random_range(0..modes.len())];
        ToySample { viewpoint, q }
    }
}

/// Draws `2^i` Haar-uniform modes for each viewpoint `i`, redrawing any mode
/// within 1° of an earlier one.
pub fn generate_mode_set(seed: u64) -> Result<ToyModeSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_sep = MIN_MODE_SEPARATION_DEG.to_radians();
    let mut modes = Vec::with_capacity(VIEWPOINTS);
    for i in 0..VIEWPOINTS {
        let mut vp: Vec<UnitQuaternion> = Vec::with_capacity(1 << i);
        for _ in 0..1 << i {
            let mut attempts = 0;
            let q = loop {
                let q = sample_uniform_rotation(&mut rng);
                if vp.iter().all(|m| geodesic_distance(m, &q) > min_sep) {
                    break q;
                }
                attempts += 1;
                if attempts >= MAX_MODE_RETRIES {
                    return Err(Error::ModeSet(format!(
                        "could not place a distinct mode for viewpoint {i}"
                    )));
                }
            };
            vp.push(q);
        }
        modes.push(vp);
    }
    ToyModeSet::from_modes(seed, modes)
}

/// Unbounded stream of toy samples.
pub struct SampleStream<'a, R> {
    modes: &'a ToyModeSet,
    rng: R,
}

impl<R: Rng> Iterator for SampleStream<'_, R> {
    type Item = ToySample;

    fn next(&mut self) -> Option<ToySample> {
        Some(self.modes.sample(&mut self.rng))
    }
}

/// A mode of the evaluation set and how many copies of it the set holds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalEntry {
    pub viewpoint: usize,
    pub mode: usize,
    pub q: UnitQuaternion,
    pub multiplicity: usize,
}

/// Every `(viewpoint i, mode)` pair replicated `2^{5-i}` times: 192 entries,
/// 32 per viewpoint. Its mean equals the expectation under the stream.
pub fn evaluation_set(mode_set: &ToyModeSet) -> Vec<EvalEntry> {
    let top = mode_set.viewpoints() - 1;
    let mut out = Vec::with_capacity(mode_set.total_modes());
    for v in 0..mode_set.viewpoints() {
        for (j, q) in mode_set.modes(v).iter().enumerate() {
            out.push(EvalEntry {
                viewpoint: v,
                mode: j,
                q: *q,
                multiplicity: 1 << (top - v),
            });
        }
    }
    out
}

pub fn total_multiplicity(entries: &[EvalEntry]) -> usize {
    entries.iter().map(|e| e.multiplicity).sum()
}

/// Best achievable scores for a mode set at a given bin count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleScores {
    /// Minimum mean three-token cross-entropy (nats).
    pub classification_nll: f64,
    /// Maximum mean log-likelihood (nats).
    pub log_likelihood: f64,
}

/// Probability the Bayes-optimal scorer gives the sentence of `modes[idx]`
/// when the modes are equally likely: each step's label distribution is
/// conditioned on the exact values of the earlier components.
pub fn optimal_sentence_prob(modes: &[UnitQuaternion], idx: usize, partition: &BinPartition) -> f64 {
    let target = modes[idx].xyz();
    let labels = partition.sentence_of(&modes[idx]).0;
    let mut prob = 1.0;
    for step in 0..3 {
        let same_prefix: Vec<&UnitQuaternion> = modes
            .iter()
            .filter(|m| m.xyz()[..step].iter().zip(&target[..step]).all(|(a, b)| a.to_bits() == b.to_bits()))
            .collect();
        let same_label = same_prefix
            .iter()
            .filter(|m| partition.sentence_of(m).0[step] == labels[step])
            .count();
        prob *= same_label as f64 / same_prefix.len() as f64;
    }
    prob
}

/// Best achievable scores for a mode set at a given bin count.
pub fn theoretical_optimal(mode_set: &ToyModeSet, partition: &BinPartition) -> OracleScores {
    let entries = evaluation_set(mode_set);
    let total = total_multiplicity(&entries) as f64;
    let mut nll = 0.0;
    let mut ll = 0.0;
    for e in &entries {
        let share = optimal_sentence_prob(mode_set.modes(e.viewpoint), e.mode, partition);
        let w = e.multiplicity as f64 / total;
        nll -= w * share.ln();
        ll += w * (share.ln() + log_dilution_term(&e.q, partition));
    }
    OracleScores {
        classification_nll: nll,
        log_likelihood: ll,
    }
}

pub fn theoretical_optimal_ll(mode_set: &ToyModeSet, partition: &BinPartition) -> f64 {
    theoretical_optimal(mode_set, partition).log_likelihood
}

// ---- JSON-lines files ----

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    kind: String,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sample_seed: Option<u64>,
    modes: Vec<Vec<[f64; 4]>>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    viewpoint: usize,
    q: [f64; 4],
}

fn fmt_q(q: &UnitQuaternion) -> String {
    let [x, y, z, w] = q.components();
    format!("[{x:.16e},{y:.16e},{z:.16e},{w:.16e}]")
}

fn header_line(mode_set: &ToyModeSet, kind: &str, sample_seed: Option<u64>) -> String {
    let vps: Vec<String> = mode_set
        .modes
        .iter()
        .map(|vp| format!("[{}]", vp.iter().map(fmt_q).collect::<Vec<_>>().join(",")))
        .collect();
    let extra = sample_seed
        .map(|s| format!(",\"sample_seed\":{s}"))
        .unwrap_or_default();
    format!(
        "{{\"kind\":\"{kind}\",\"seed\":{}{extra},\"modes\":[{}]}}",
        mode_set.seed,
        vps.join(",")
    )
}

/// Writes a mode set as a single JSON header record.
pub fn write_mode_set<W: Write>(mut out: W, mode_set: &ToyModeSet) -> Result<()> {
    writeln!(out, "{}", header_line(mode_set, "mode_set", None))?;
    Ok(())
}

/// Writes a dataset: a header record with the mode set, then one record per sample.
pub fn write_samples<W: Write>(
    mut out: W,
    mode_set: &ToyModeSet,
    sample_seed: u64,
    samples: &[ToySample],
) -> Result<()> {
    writeln!(out, "{}", header_line(mode_set, "dataset", Some(sample_seed)))?;
    for s in samples {
        writeln!(out, "{{\"viewpoint\":{},\"q\":{}}}", s.viewpoint, fmt_q(&s.q))?;
    }
    Ok(())
}

fn parse_header(line: &str) -> Result<ToyModeSet> {
    let h: HeaderRecord = serde_json::from_str(line)?;
    if h.kind != "mode_set" && h.kind != "dataset" {
        return Err(Error::Format(format!("unexpected record kind {:?}", h.kind)));
    }
    let modes = h
        .modes
        .into_iter()
        .map(|vp| vp.into_iter().map(UnitQuaternion::try_from).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    ToyModeSet::from_modes(h.seed, modes)
}

/// Reads the mode set from the first record of a mode-set or dataset file.
pub fn read_mode_set<R: BufRead>(input: R) -> Result<ToyModeSet> {
    let line = input
        .lines()
        .next()
        .ok_or_else(|| Error::Format("empty file".into()))??;
    parse_header(&line)
}

/// Reads a dataset file written by [`write_samples`].
pub fn read_samples<R: BufRead>(input: R) -> Result<(ToyModeSet, Vec<ToySample>)> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty file".into()))??;
    let mode_set = parse_header(&header)?;
    let mut samples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        if rec.viewpoint >= mode_set.viewpoints() {
            return Err(Error::Format(format!("viewpoint {} out of range", rec.viewpoint)));
        }
        samples.push(ToySample {
            viewpoint: rec.viewpoint,
            q: UnitQuaternion::try_from(rec.q)?,
        });
    }
    Ok((mode_set, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mode_counts() {
        let m = generate_mode_set(0).unwrap();
        assert_eq!(m.total_modes(), 63);
        for i in 0..6 {
            assert_eq!(m.modes(i).len(), 1 << i);
            for a in m.modes(i) {
                assert!(a.w() >= 0.0);
                for b in m.modes(i) {
                    if a != b {
                        assert!(geodesic_distance(a, b).to_degrees() > 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn seeds_reproduce() {
        assert_eq!(generate_mode_set(9).unwrap(), generate_mode_set(9).unwrap());
        let a = generate_mode_set(1).unwrap();
        let b = generate_mode_set(2).unwrap();
        for v in 0..6 {
            for qa in a.modes(v) {
                for qb in b.modes(v) {
                    assert!(geodesic_distance(qa, qb) > 1e-6);
                }
            }
        }
    }

    #[test]
    fn stream_frequencies() {
        let m = generate_mode_set(3).unwrap();
        let n = 600_000;
        let mut vp = [0usize; 6];
        let mut top = [0usize; 32];
        for s in m.sample_stream(ChaCha8Rng::seed_from_u64(4)).take(n) {
            vp[s.viewpoint] += 1;
            if s.viewpoint == 5 {
                top[m.nearest_mode(5, &s.q).0] += 1;
            }
        }
        for c in vp {
            assert!((c as f64 / n as f64 - 1.0 / 6.0).abs() <= 0.005);
        }
        let n5 = vp[5] as f64;
        let p = 1.0 / 32.0;
        let sigma = (n5 * p * (1.0 - p)).sqrt();
        for c in top {
            assert!((c as f64 - n5 * p).abs() <= 3.0 * sigma + 1.0, "{c} vs {}", n5 * p);
        }
        let a: Vec<_> = m.sample_stream(ChaCha8Rng::seed_from_u64(4)).take(50).collect();
        let b: Vec<_> = m.sample_stream(ChaCha8Rng::seed_from_u64(4)).take(50).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_set_shape() {
        let m = generate_mode_set(5).unwrap();
        let e = evaluation_set(&m);
        assert_eq!(total_multiplicity(&e), 192);
        let v0: Vec<_> = e.iter().filter(|x| x.viewpoint == 0).collect();
        assert_eq!(v0.len(), 1);
        assert_eq!(v0[0].multiplicity, 32);
        for v in 0..6 {
            let w: usize = e.iter().filter(|x| x.viewpoint == v).map(|x| x.multiplicity).sum();
            assert_eq!(w, 32);
        }
    }

    #[test]
    fn oracle_without_collisions() {
        let p = BinPartition::new(4096).unwrap();
        // first seed whose modes never share a first-component bin
        let m = (0..)
            .map(|seed| generate_mode_set(seed).unwrap())
            .find(|m| {
                (0..6).all(|v| {
                    let mut bins: Vec<_> = m.modes(v).iter().map(|q| p.sentence_of(q).0[0]).collect();
                    bins.sort_unstable();
                    bins.windows(2).all(|w| w[0] != w[1])
                })
            })
            .unwrap();
        let o = theoretical_optimal(&m, &p);
        assert_abs_diff_eq!(o.classification_nll, 2.5 * 2f64.ln(), epsilon = 1e-12);
        // single-mode viewpoint contributes only its geometry term
        let q = m.modes(0)[0];
        let e = evaluation_set(&m);
        let mean_dilution: f64 = e
            .iter()
            .map(|x| x.multiplicity as f64 * log_dilution_term(&x.q, &p))
            .sum::<f64>()
            / 192.0;
        assert_abs_diff_eq!(o.log_likelihood, mean_dilution - 2.5 * 2f64.ln(), epsilon = 1e-9);
        assert!(log_dilution_term(&q, &p).is_finite());
        assert!(o.log_likelihood > (2_359_296f64 / (std::f64::consts::PI.powi(2))).ln());
    }

    #[test]
    fn oracle_conditions_on_exact_prefixes() {
        let p = BinPartition::new(20).unwrap();
        let q = |x: f64, y: f64, z: f64| UnitQuaternion::from_xyz(x, y, z).unwrap();
        // a and b share the first bin but not the first value; c and d share
        // the first two values and the full sentence
        let modes = [q(0.11, 0.2, 0.3), q(0.12, -0.5, 0.1), q(-0.5, 0.1, 0.21), q(-0.5, 0.1, 0.22)];
        assert_eq!(optimal_sentence_prob(&modes, 0, &p), 0.5);
        assert_eq!(optimal_sentence_prob(&modes, 1, &p), 0.5);
        assert_eq!(optimal_sentence_prob(&modes, 2, &p), 0.5);
        assert_eq!(optimal_sentence_prob(&modes, 3, &p), 0.5);
        let distinct = [q(0.11, 0.2, 0.3), q(0.5, -0.5, 0.1), q(-0.5, 0.1, 0.21), q(-0.3, 0.1, 0.22)];
        assert!((0..4).all(|i| optimal_sentence_prob(&distinct, i, &p) == 0.25));
    }

    #[test]
    fn oracle_counts_collisions() {
        let m = generate_mode_set(6).unwrap();
        let p = BinPartition::new(2).unwrap();
        let o = theoretical_optimal(&m, &p);
        assert!(o.classification_nll < 2.5 * 2f64.ln());
        assert!(o.classification_nll >= 0.0);
    }

    #[test]
    fn files_round_trip() {
        let m = generate_mode_set(10).unwrap();
        let mut buf = Vec::new();
        write_mode_set(&mut buf, &m).unwrap();
        assert_eq!(read_mode_set(&buf[..]).unwrap(), m);

        let samples: Vec<_> = m.sample_stream(ChaCha8Rng::seed_from_u64(1)).take(20).collect();
        let mut buf = Vec::new();
        write_samples(&mut buf, &m, 1, &samples).unwrap();
        let (m2, s2) = read_samples(&buf[..]).unwrap();
        assert_eq!(m2, m);
        assert_eq!(s2, samples);
        assert_eq!(read_mode_set(&buf[..]).unwrap(), m);
    }

    #[test]
    fn rejects_bad_structure() {
        assert!(ToyModeSet::from_modes(0, vec![vec![UnitQuaternion::IDENTITY]; 6]).is_err());
        assert!(read_mode_set(&b"{\"kind\":\"other\",\"seed\":0,\"modes\":[]}\n"[..]).is_err());
        assert!(read_mode_set(&b""[..]).is_err());
    }
}
