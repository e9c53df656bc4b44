//! Learning-dynamics post-processing: per-modulus accuracy curves, grokking
//! onset detection, prime-family synchronization, and the deterministic
//! misprediction census.

use crate::numtheory::lowest_prime_factor;
use crate::sampler::ModExpInstance;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub epoch: u64,
    pub accuracy: f64,
    pub n_samples: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySeries {
    pub modulus: u64,
    pub points: Vec<AccuracyPoint>,
}

impl AccuracySeries {
    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if w[1].epoch <= w[0].epoch {
                return Err(Error::domain(format!(
                    "series for modulus {}: epochs must be strictly increasing",
                    self.modulus
                )));
            }
        }
        for p in &self.points {
            if p.n_samples == 0 {
                return Err(Error::domain(format!(
                    "series for modulus {}: zero samples at epoch {}",
                    self.modulus, p.epoch
                )));
            }
            if !(0.0..=1.0).contains(&p.accuracy) {
                return Err(Error::domain(format!(
                    "series for modulus {}: accuracy {} outside [0,1]",
                    self.modulus, p.accuracy
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrokEvent {
    pub modulus: u64,
    pub onset_epoch: u64,
    pub jump: f64,
    pub sustained: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrokParams {
    pub jump_threshold: f64,
    /// Jump measurement span, in series points.
    pub window: usize,
    /// Points the post-jump level must hold.
    pub sustain: usize,
}

impl Default for GrokParams {
    fn default() -> Self {
        GrokParams { jump_threshold: 0.4, window: 25, sustain: 50 }
    }
}

/// Detect sustained accuracy surges: an event at point t requires
/// accuracy(t+window) - accuracy(t) >= jump_threshold and accuracy staying
/// at or above accuracy(t) + 0.75 * jump_threshold for the following
/// `sustain` points. Overlapping detections merge to the earliest onset.
pub fn detect_grokking(series: &AccuracySeries, params: &GrokParams) -> Result<Vec<GrokEvent>> {
    series.validate()?;
    let n = series.points.len();
    let w = params.window;
    if n < w + params.sustain {
        return Err(Error::domain(format!(
            "series for modulus {} has {n} points, need at least {}",
            series.modulus,
            w + params.sustain
        )));
    }
    let acc = |i: usize| series.points[i].accuracy;
    let mut onsets: Vec<(usize, f64)> = Vec::new();
    for t in 0..n - w {
        let jump = acc(t + w) - acc(t);
        if jump < params.jump_threshold {
            continue;
        }
        let floor = acc(t) + 0.75 * params.jump_threshold;
        let hold_end = (t + w + params.sustain).min(n - 1);
        if (t + w..=hold_end).all(|i| acc(i) >= floor) {
            onsets.push((t, jump));
        }
    }
    let mut events = Vec::new();
    let mut i = 0;
    while i < onsets.len() {
        let start = onsets[i].0;
        let mut end = start;
        let mut jump = onsets[i].1;
        let mut j = i + 1;
        // merge candidates whose measurement windows overlap
        while j < onsets.len() && onsets[j].0 <= end + w {
            end = onsets[j].0;
            jump = jump.max(onsets[j].1);
            j += 1;
        }
        // onset = steepest single-point rise inside the merged region
        let lo = start;
        let hi = (end + w).min(n - 1);
        let mut best = lo;
        let mut best_delta = f64::NEG_INFINITY;
        for t in lo..hi {
            let delta = acc(t + 1) - acc(t);
            if delta > best_delta {
                best_delta = delta;
                best = t + 1;
            }
        }
        events.push(GrokEvent {
            modulus: series.modulus,
            onset_epoch: series.points[best].epoch,
            jump,
            sustained: true,
        });
        i = j;
    }
    Ok(events)
}

/// Per-modulus (correct, total) tallies; malformed predictions (None)
/// count as incorrect.
pub fn per_modulus_accuracy(
    predictions: &[(ModExpInstance, Option<u64>)],
) -> Result<BTreeMap<u64, (u64, u64)>> {
    if predictions.is_empty() {
        return Err(Error::domain("per_modulus_accuracy: no predictions"));
    }
    let mut map: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for (inst, pred) in predictions {
        let entry = map.entry(inst.c).or_insert((0, 0));
        entry.1 += 1;
        if *pred == Some(inst.d) {
            entry.0 += 1;
        }
    }
    Ok(map)
}

fn prime_factors(mut n: u64) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    while n > 1 {
        let p = lowest_prime_factor(n)?;
        out.push(p);
        while n.is_multiple_of(p) {
            n /= p;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub prime: u64,
    /// (modulus, onset epoch), ordered by modulus.
    pub members: Vec<(u64, u64)>,
    /// Max onset minus min onset.
    pub spread: u64,
}

/// Group grokking events into families of moduli that share a prime factor
/// and grokked within `sync_window` epochs of each other. A modulus can
/// appear under several primes; families with identical member sets keep
/// the smallest prime. Events synchronized with nobody become singletons.
pub fn family_sync_report(events: &[GrokEvent], sync_window: u64) -> Result<Vec<Family>> {
    let mut by_prime: BTreeMap<u64, Vec<&GrokEvent>> = BTreeMap::new();
    for ev in events {
        for p in prime_factors(ev.modulus)? {
            by_prime.entry(p).or_default().push(ev);
        }
    }
    let mut families: Vec<Family> = Vec::new();
    let mut grouped: std::collections::BTreeSet<u64> = std::collections::BTreeSet::new();
    for (prime, mut evs) in by_prime {
        evs.sort_by_key(|e| (e.onset_epoch, e.modulus));
        let mut i = 0;
        while i < evs.len() {
            let mut j = i + 1;
            while j < evs.len() && evs[j].onset_epoch - evs[i].onset_epoch <= sync_window {
                j += 1;
            }
            if j - i >= 2 {
                let mut members: Vec<(u64, u64)> =
                    evs[i..j].iter().map(|e| (e.modulus, e.onset_epoch)).collect();
                members.sort_unstable();
                let spread = evs[j - 1].onset_epoch - evs[i].onset_epoch;
                let dup = families
                    .iter()
                    .any(|f| f.members == members);
                if !dup {
                    families.push(Family { prime, members: members.clone(), spread });
                }
                for (m, _) in members {
                    grouped.insert(m);
                }
            }
            i = j;
        }
    }
    for ev in events {
        if !grouped.contains(&ev.modulus) {
            families.push(Family {
                prime: lowest_prime_factor(ev.modulus)?,
                members: vec![(ev.modulus, ev.onset_epoch)],
                spread: 0,
            });
        }
    }
    families.sort_by_key(|f| (f.members[0].1, f.prime));
    Ok(families)
}

/// One target value's confusion profile.
#[derive(Clone, Debug, PartialEq)]
pub struct CensusEntry {
    pub target: u64,
    /// All rows with this target, duplicates included.
    pub raw_total: u64,
    /// Distinct (a, b, c) tuples among those rows.
    pub distinct_total: u64,
    /// Predicted value -> raw count; None is a malformed decode.
    pub histogram: BTreeMap<Option<u64>, u64>,
    /// Most frequent wrong prediction and its share of raw rows.
    pub dominant_wrong: (Option<u64>, f64),
}

/// Confusion census over raw predictions: for every target value with at
/// least `min_support` rows and at least one error, the prediction
/// histogram, the dominant wrong answer, and the duplicate control (raw
/// row count vs distinct operand tuples).
pub fn misprediction_census(
    predictions: &[(ModExpInstance, Option<u64>)],
    min_support: u64,
) -> Vec<CensusEntry> {
    let mut by_target: BTreeMap<u64, Vec<&(ModExpInstance, Option<u64>)>> = BTreeMap::new();
    for row in predictions {
        by_target.entry(row.0.d).or_default().push(row);
    }
    let mut out = Vec::new();
    for (target, rows) in by_target {
        if (rows.len() as u64) < min_support {
            continue;
        }
        let mut histogram: BTreeMap<Option<u64>, u64> = BTreeMap::new();
        let mut distinct: std::collections::BTreeSet<(u64, u64, u64)> =
            std::collections::BTreeSet::new();
        for (inst, pred) in rows.iter() {
            *histogram.entry(*pred).or_insert(0) += 1;
            distinct.insert((inst.a, inst.b, inst.c));
        }
        let raw_total = rows.len() as u64;
        let dominant = histogram
            .iter()
            .filter(|(pred, _)| **pred != Some(target))
            .max_by_key(|(_, &count)| count)
            .map(|(pred, &count)| (*pred, count as f64 / raw_total as f64));
        if let Some(dominant_wrong) = dominant {
            out.push(CensusEntry {
                target,
                raw_total,
                distinct_total: distinct.len() as u64,
                histogram,
                dominant_wrong,
            });
        }
    }
    out
}

/// Parse `per_modulus.csv` rows for one split into per-modulus series.
pub fn read_per_modulus_csv(path: &Path, split: &str) -> Result<Vec<AccuracySeries>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_c: BTreeMap<u64, Vec<AccuracyPoint>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "epoch,split,modulus,correct,total" {
                return Err(Error::Format {
                    what: "per_modulus.csv",
                    detail: format!("unexpected header '{line}'"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format {
                what: "per_modulus.csv",
                detail: format!("{}:{}: expected 5 fields", path.display(), i + 1),
            });
        }
        if fields[1] != split {
            continue;
        }
        let parse = |s: &str, what: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Format {
                what: "per_modulus.csv",
                detail: format!("{}:{}: bad {what} '{s}'", path.display(), i + 1),
            })
        };
        let epoch = parse(fields[0], "epoch")?;
        let c = parse(fields[2], "modulus")?;
        let correct = parse(fields[3], "correct")?;
        let total = parse(fields[4], "total")?;
        if total == 0 {
            return Err(Error::Format {
                what: "per_modulus.csv",
                detail: format!("{}:{}: zero total", path.display(), i + 1),
            });
        }
        by_c.entry(c).or_default().push(AccuracyPoint {
            epoch,
            accuracy: correct as f64 / total as f64,
            n_samples: total,
        });
    }
    let out: Vec<AccuracySeries> = by_c
        .into_iter()
        .map(|(modulus, points)| AccuracySeries { modulus, points })
        .collect();
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

pub fn write_grok_events_csv(path: &Path, events: &[GrokEvent]) -> Result<()> {
    let mut out = String::from("modulus,onset_epoch,jump,sustained\n");
    for e in events {
        out.push_str(&format!("{},{},{},{}\n", e.modulus, e.onset_epoch, e.jump, e.sustained));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_families_csv(path: &Path, families: &[Family]) -> Result<()> {
    let mut out = String::from("prime,members,onsets,spread\n");
    for f in families {
        let members: Vec<String> = f.members.iter().map(|(m, _)| m.to_string()).collect();
        let onsets: Vec<String> = f.members.iter().map(|(_, o)| o.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            f.prime,
            members.join(";"),
            onsets.join(";"),
            f.spread
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_confusions_csv(path: &Path, census: &[CensusEntry]) -> Result<()> {
    let mut out = String::from("target,raw_total,distinct_total,dominant_prediction,share\n");
    for e in census {
        let pred = match e.dominant_wrong.0 {
            Some(v) => v.to_string(),
            None => "malformed".into(),
        };
        out.push_str(&format!(
            "{},{},{},{pred},{}\n",
            e.target, e.raw_total, e.distinct_total, e.dominant_wrong.1
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(modulus: u64, accs: &[f64]) -> AccuracySeries {
        AccuracySeries {
            modulus,
            points: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| AccuracyPoint { epoch: i as u64, accuracy: a, n_samples: 100 })
                .collect(),
        }
    }

    fn step_series(modulus: u64, len: usize, at: usize, lo: f64, hi: f64) -> AccuracySeries {
        series(
            modulus,
            &(0..len).map(|i| if i < at { lo } else { hi }).collect::<Vec<_>>(),
        )
    }

    #[test]
    fn step_curve_is_detected_near_truth() {
        let s = step_series(23, 300, 100, 0.2, 0.95);
        let events = detect_grokking(&s, &GrokParams::default()).unwrap();
        assert_eq!(events.len(), 1);
        let onset = events[0].onset_epoch;
        assert!((96..=104).contains(&onset), "onset {onset} not within [96, 104]");
        assert!(events[0].jump >= 0.4);
        assert!(events[0].sustained);
    }

    #[test]
    fn constant_and_short_series() {
        let s = series(7, &[0.5; 200]);
        assert!(detect_grokking(&s, &GrokParams::default()).unwrap().is_empty());
        let short = series(7, &[0.5; 30]);
        assert!(detect_grokking(&short, &GrokParams::default()).is_err());
    }

    #[test]
    fn unsustained_jump_is_ignored() {
        // spike up for a moment, then fall back
        let mut accs = vec![0.2; 300];
        for a in accs.iter_mut().take(140).skip(100) {
            *a = 0.9;
        }
        let events = detect_grokking(&series(5, &accs), &GrokParams::default()).unwrap();
        assert!(events.is_empty(), "transient spike must not count: {events:?}");
    }

    proptest! {
        #[test]
        fn detector_is_translation_invariant(shift in 0u64..5000, at in 80usize..150) {
            let mut s = step_series(23, 300, at, 0.1, 0.9);
            let base = detect_grokking(&s, &GrokParams::default()).unwrap();
            for p in s.points.iter_mut() {
                p.epoch += shift;
            }
            let moved = detect_grokking(&s, &GrokParams::default()).unwrap();
            prop_assert_eq!(base.len(), moved.len());
            for (a, b) in base.iter().zip(moved.iter()) {
                prop_assert_eq!(a.onset_epoch + shift, b.onset_epoch);
                prop_assert_eq!(a.jump, b.jump);
            }
        }

        #[test]
        fn raising_threshold_never_adds_events(
            lo in 0.0f64..0.3,
            hi in 0.6f64..1.0,
            at in 80usize..150,
        ) {
            let s = step_series(11, 300, at, lo, hi);
            let mut prev = usize::MAX;
            for thr in [0.2, 0.4, 0.6, 0.8] {
                let params = GrokParams { jump_threshold: thr, ..GrokParams::default() };
                let n = detect_grokking(&s, &params).unwrap().len();
                if prev != usize::MAX {
                    prop_assert!(n <= prev, "threshold {thr} added events");
                }
                prev = n;
            }
        }
    }

    fn inst(a: u64, b: u64, c: u64, d: u64) -> ModExpInstance {
        ModExpInstance { a, b, c, d }
    }

    #[test]
    fn per_modulus_tallies_are_exact() {
        // hand-tallied: c=5 gets 2/3, c=7 gets 0/1, c=9 gets 1/1
        let preds = vec![
            (inst(2, 3, 5, 3), Some(3)),
            (inst(4, 1, 5, 4), Some(4)),
            (inst(3, 2, 5, 4), Some(0)),
            (inst(2, 2, 7, 4), None),
            (inst(10, 1, 9, 1), Some(1)),
        ];
        let map = per_modulus_accuracy(&preds).unwrap();
        assert_eq!(map[&5], (2, 3));
        assert_eq!(map[&7], (0, 1));
        assert_eq!(map[&9], (1, 1));
        let all_right: Vec<_> =
            preds.iter().map(|(i, _)| (*i, Some(i.d))).collect();
        assert!(per_modulus_accuracy(&all_right).unwrap().values().all(|&(c, t)| c == t));
    }

    #[test]
    fn family_grouping_follows_shared_primes() {
        let ev = |m: u64, onset: u64| GrokEvent { modulus: m, onset_epoch: onset, jump: 0.5, sustained: true };
        // 23, 46, 69 share the prime factor 23 and grok together
        let fams = family_sync_report(&[ev(23, 1725), ev(46, 1730), ev(69, 1740)], 25).unwrap();
        assert_eq!(fams.len(), 1);
        assert_eq!(fams[0].prime, 23);
        assert_eq!(fams[0].members, vec![(23, 1725), (46, 1730), (69, 1740)]);
        assert_eq!(fams[0].spread, 15);

        // no shared prime, far apart: two singletons
        let fams = family_sync_report(&[ev(47, 500), ev(23, 1725)], 25).unwrap();
        assert_eq!(fams.len(), 2);
        assert!(fams.iter().all(|f| f.members.len() == 1));

        // 46 and 92 share prime 2 as well as 23: both families reported
        let evs = [ev(23, 100), ev(46, 105), ev(92, 110)];
        let fams = family_sync_report(&evs, 25).unwrap();
        let primes: Vec<u64> = fams.iter().map(|f| f.prime).collect();
        assert!(primes.contains(&2), "46/92 also form a family under prime 2: {fams:?}");
        assert!(primes.contains(&23));

        assert!(family_sync_report(&[], 25).unwrap().is_empty());
    }

    #[test]
    fn identical_member_sets_keep_smallest_prime() {
        let ev = |m: u64, onset: u64| GrokEvent { modulus: m, onset_epoch: onset, jump: 0.5, sustained: true };
        // 6 and 12 share both 2 and 3; only one family, indexed by 2
        let fams = family_sync_report(&[ev(6, 50), ev(12, 55)], 25).unwrap();
        assert_eq!(fams.len(), 1);
        assert_eq!(fams[0].prime, 2);
    }

    #[test]
    fn census_finds_dominant_confusion() {
        let mut preds = Vec::new();
        // target 91: 90% predicted 19, 10% correct, with duplicate rows
        for i in 0..90 {
            preds.push((inst(100 + (i % 30), 3, 95, 91), Some(19)));
        }
        for i in 0..10 {
            preds.push((inst(200 + i, 5, 95, 91), Some(91)));
        }
        // target 4: fully correct, must not appear
        for i in 0..20 {
            preds.push((inst(2, 2, 11, 4), Some(4)));
            let _ = i;
        }
        let census = misprediction_census(&preds, 10);
        assert_eq!(census.len(), 1);
        let e = &census[0];
        assert_eq!(e.target, 91);
        assert_eq!(e.raw_total, 100);
        assert_eq!(e.distinct_total, 40);
        assert_eq!(e.dominant_wrong, (Some(19), 0.9));
        let total: u64 = e.histogram.values().sum();
        assert_eq!(total, e.raw_total, "histogram must cover every raw row");
    }

    #[test]
    fn census_respects_min_support_and_correctness() {
        let preds = vec![(inst(1, 1, 5, 1), Some(2)); 5];
        assert!(misprediction_census(&preds, 10).is_empty());
        let ok = vec![(inst(1, 1, 5, 1), Some(1)); 50];
        assert!(misprediction_census(&ok, 10).is_empty());
    }

    #[test]
    fn per_modulus_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("per_modulus.csv");
        let mut text = String::from("epoch,split,modulus,correct,total\n");
        for epoch in 1..=4 {
            for c in [3u64, 5] {
                text.push_str(&format!("{epoch},valid,{c},{},100\n", epoch * 10 + c));
                text.push_str(&format!("{epoch},test,{c},1,100\n"));
            }
        }
        std::fs::write(&path, &text).unwrap();
        let series = read_per_modulus_csv(&path, "valid").unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].modulus, 3);
        assert_eq!(series[0].points.len(), 4);
        assert!((series[0].points[1].accuracy - 0.23).abs() < 1e-12);
        assert!(read_per_modulus_csv(&path, "unknown").unwrap().is_empty());
        std::fs::write(&path, "bad header\n").unwrap();
        assert!(read_per_modulus_csv(&path, "valid").is_err());
    }
}
