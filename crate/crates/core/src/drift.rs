//! Vocabulary drift between incoming messages and the training corpus,
//! measured in the classifier's own hashed feature space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::features::featurize;
use crate::exec::Exec;
use crate::ingest::Message;
use crate::time::Timestamp;

#[derive(Debug, Error, PartialEq)]
pub enum DriftError {
    #[error("profile has no tokens")]
    EmptyProfile,
    #[error("drift window has no messages")]
    EmptyWindow,
}

/// Unigram distribution over hash buckets, kept as raw counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusProfile {
    #[serde(with = "pairs")]
    counts: BTreeMap<u32, u64>,
    pub token_count: u64,
    pub built_from: String,
}

/// `[[bucket, count], ...]`: integer map keys do not survive serde's
/// buffering of tagged enums.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(counts: &BTreeMap<u32, u64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(counts.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, u64>, D::Error> {
        Ok(Vec::<(u32, u64)>::deserialize(d)?.into_iter().collect())
    }
}

impl CorpusProfile {
    pub fn from_counts(counts: impl IntoIterator<Item = (u32, u64)>) -> Self {
        let mut profile = CorpusProfile::default();
        for (bucket, c) in counts.into_iter().filter(|&(_, c)| c > 0) {
            *profile.counts.entry(bucket).or_insert(0) += c;
            profile.token_count += c;
        }
        profile
    }

    pub fn is_empty(&self) -> bool {
        self.token_count == 0
    }

    pub fn counts(&self) -> &BTreeMap<u32, u64> {
        &self.counts
    }

    pub fn contains(&self, bucket: u32) -> bool {
        self.counts.contains_key(&bucket)
    }

    pub fn probability(&self, bucket: u32) -> f64 {
        match self.counts.get(&bucket) {
            Some(&c) => c as f64 / self.token_count as f64,
            None => 0.0,
        }
    }

    /// Support and probabilities in bucket order.
    pub fn distribution(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        let total = self.token_count as f64;
        self.counts.iter().map(move |(&b, &c)| (b, c as f64 / total))
    }

    fn merge(&mut self, other: &BTreeMap<u32, u64>) {
        for (&b, &c) in other {
            *self.counts.entry(b).or_insert(0) += c;
            self.token_count += c;
        }
    }
}

/// Bag-of-words profile of `texts`, tokenized and hashed like the
/// classifier's features.
pub fn build_profile<S: AsRef<str> + Sync>(texts: &[S], exec: Exec) -> CorpusProfile {
    let per_text = exec.map(texts, |t| {
        featurize(t.as_ref()).entries().iter().map(|&(b, c)| (b, u64::from(c))).collect::<BTreeMap<_, _>>()
    });
    let mut profile = CorpusProfile::default();
    for counts in &per_text {
        profile.merge(counts);
    }
    profile
}

fn xlog2(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / m).log2()
    }
}

/// Base-2 Jensen-Shannon divergence over the union support.
pub fn js_divergence(p: &CorpusProfile, q: &CorpusProfile) -> Result<f64, DriftError> {
    if p.is_empty() || q.is_empty() {
        return Err(DriftError::EmptyProfile);
    }
    let (tp, tq) = (p.token_count as f64, q.token_count as f64);
    let mut a = p.counts.iter().peekable();
    let mut b = q.counts.iter().peekable();
    let mut total = 0.0;
    loop {
        let (pi, qi) = match (a.peek(), b.peek()) {
            (None, None) => break,
            (Some((ka, _)), Some((kb, _))) if ka == kb => {
                let (_, &ca) = a.next().unwrap();
                let (_, &cb) = b.next().unwrap();
                (ca as f64 / tp, cb as f64 / tq)
            }
            (Some((ka, _)), Some((kb, _))) if ka < kb => (*a.next().unwrap().1 as f64 / tp, 0.0),
            (Some(_), None) => (*a.next().unwrap().1 as f64 / tp, 0.0),
            _ => (0.0, *b.next().unwrap().1 as f64 / tq),
        };
        let m = (pi + qi) / 2.0;
        total += 0.5 * xlog2(pi, m) + 0.5 * xlog2(qi, m);
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Fraction of the window's token mass in buckets the reference never saw.
pub fn oov_rate(window: &CorpusProfile, reference: &CorpusProfile) -> Result<f64, DriftError> {
    if window.is_empty() {
        return Err(DriftError::EmptyProfile);
    }
    let unseen: u64 = window.counts.iter().filter(|(b, _)| !reference.contains(**b)).map(|(_, c)| c).sum();
    Ok(unseen as f64 / window.token_count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftThresholds {
    pub jsd: f64,
    pub oov: f64,
}

impl Default for DriftThresholds {
    fn default() -> Self {
        DriftThresholds { jsd: 0.2, oov: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowDescriptor {
    pub from: Timestamp,
    pub to: Timestamp,
    pub message_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub window: WindowDescriptor,
    pub jsd: f64,
    pub oov_rate: f64,
    pub thresholds: DriftThresholds,
    pub triggered: bool,
    pub computed_at: Timestamp,
    /// What the reference profile was built from.
    pub reference: String,
}

impl DriftReport {
    pub fn is_consistent(&self) -> bool {
        (0.0..=1.0).contains(&self.jsd)
            && (0.0..=1.0).contains(&self.oov_rate)
            && self.triggered == (self.jsd > self.thresholds.jsd || self.oov_rate > self.thresholds.oov)
    }
}

/// Compares the window against the reference profile. Triggered when
/// either score strictly exceeds its threshold.
pub fn check_drift(
    window: &[&Message],
    reference: &CorpusProfile,
    thresholds: DriftThresholds,
    computed_at: Timestamp,
    exec: Exec,
) -> Result<DriftReport, DriftError> {
    let (from, to) = match (window.iter().map(|m| m.posted_at).min(), window.iter().map(|m| m.posted_at).max()) {
        (Some(from), Some(to)) => (from, to),
        _ => return Err(DriftError::EmptyWindow),
    };
    let texts: Vec<&str> = window.iter().map(|m| m.text.as_str()).collect();
    let profile = build_profile(&texts, exec);
    let jsd = js_divergence(&profile, reference)?;
    let oov = oov_rate(&profile, reference)?;
    Ok(DriftReport {
        window: WindowDescriptor { from, to, message_count: window.len() },
        jsd,
        oov_rate: oov,
        thresholds,
        triggered: jsd > thresholds.jsd || oov > thresholds.oov,
        computed_at,
        reference: reference.built_from.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::features::bucket;

    fn profile(text: &str) -> CorpusProfile {
        build_profile(&[text], Exec::Sequential)
    }

    #[test]
    fn counts_tokens() {
        let p = profile("a a b");
        assert_eq!(p.token_count, 3);
        assert!((p.probability(bucket("a")) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probability(bucket("b")) - 1.0 / 3.0).abs() < 1e-15);
        let sum: f64 = p.distribution().map(|(_, x)| x).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(build_profile::<&str>(&[], Exec::Sequential).is_empty());
    }

    #[test]
    fn order_invariant() {
        let a = build_profile(&["x y", "z x"], Exec::Sequential);
        let b = build_profile(&["z x", "x y"], Exec::Parallel);
        assert_eq!(a, b);
        assert_eq!(a, profile("x y z x"));
    }

    #[test]
    fn jsd_fixed_points() {
        let p = profile("a b c");
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert!((js_divergence(&p, &profile("x y")).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(js_divergence(&p, &CorpusProfile::default()), Err(DriftError::EmptyProfile));
    }

    #[test]
    fn jsd_reference_value() {
        // P = {a: 1}, Q = {a: 0.5, b: 0.5}, M = {a: 0.75, b: 0.25}:
        // 0.5 * log2(1 / 0.75) + 0.5 * (0.5 * log2(0.5 / 0.75) + 0.5 * log2(0.5 / 0.25))
        let expected = 0.5 * (1.0f64 / 0.75).log2()
            + 0.5 * (0.5 * (0.5f64 / 0.75).log2() + 0.5 * (0.5f64 / 0.25).log2());
        let got = js_divergence(&profile("a"), &profile("a b")).unwrap();
        assert!((got - 0.311278).abs() < 1e-6, "{got}");
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn oov_mass() {
        assert_eq!(oov_rate(&profile("a b"), &profile("a b c")).unwrap(), 0.0);
        assert_eq!(oov_rate(&profile("a b"), &profile("c")).unwrap(), 1.0);
        assert!((oov_rate(&profile("x x y"), &profile("x")).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn drift_checks() {
        let msgs: Vec<Message> =
            ["buy bread milk", "bread prices rise", "milk and bread"].iter().enumerate()
                .map(|(i, t)| Message::new("c", i as u64, Timestamp(i as i64 * 10), t))
                .collect();
        let window: Vec<&Message> = msgs.iter().collect();
        let texts: Vec<&str> = msgs.iter().map(|m| m.text.as_str()).collect();
        let reference = build_profile(&texts, Exec::Sequential);

        let same = check_drift(&window, &reference, DriftThresholds::default(), Timestamp(99), Exec::Sequential).unwrap();
        assert_eq!(same.jsd, 0.0);
        assert!(!same.triggered);
        assert_eq!(same.window, WindowDescriptor { from: Timestamp(0), to: Timestamp(20), message_count: 3 });

        let other = [Message::new("c", 9, Timestamp(5), "lizard people control chemtrails")];
        let other: Vec<&Message> = other.iter().collect();
        let report = check_drift(&other, &reference, DriftThresholds::default(), Timestamp(99), Exec::Sequential).unwrap();
        assert!((report.jsd - 1.0).abs() < 1e-12);
        assert!(report.triggered && report.is_consistent());

        let never = DriftThresholds { jsd: 1.1, oov: 1.1 };
        assert!(!check_drift(&other, &reference, never, Timestamp(99), Exec::Sequential).unwrap().triggered);
        assert_eq!(check_drift(&[], &reference, never, Timestamp(0), Exec::Sequential), Err(DriftError::EmptyWindow));
    }
}
