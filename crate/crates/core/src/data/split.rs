use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Rhythm, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0)
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::invalid(
                "split",
                format!("fractions must be non-negative and sum to 1, got {parts:?}"),
            ));
        }
        Ok(())
    }
}

/// Record indices grouped by rhythm class; unlabelled records form one group.
fn strata(
    ds: &Dataset,
    indices: impl IntoIterator<Item = usize>,
) -> BTreeMap<Option<Rhythm>, Vec<usize>> {
    let mut groups: BTreeMap<Option<Rhythm>, Vec<usize>> = BTreeMap::new();
    for i in indices {
        groups
            .entry(ds.records[i].labels.map(|l| l.rhythm))
            .or_default()
            .push(i);
    }
    groups
}

fn group_name(key: &Option<Rhythm>) -> String {
    key.map_or_else(|| "unlabelled".to_string(), |r| r.to_string())
}

/// Class-stratified shuffle split into train/val/test tags.
pub fn split_dataset(ds: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Dataset> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Split::Train; ds.len()];
    for (key, mut members) in strata(ds, 0..ds.len()) {
        let n = members.len();
        if n < 3 {
            return Err(Error::invalid(
                "split",
                format!(
                    "class {} has {n} records; at least 3 are needed",
                    group_name(&key)
                ),
            ));
        }
        members.shuffle(&mut rng);
        let take = |f: f64| {
            if f > 0.0 {
                ((f * n as f64).round() as usize).max(1)
            } else {
                0
            }
        };
        let n_val = take(fractions.val);
        let n_test = take(fractions.test).min(n - n_val - usize::from(fractions.train > 0.0));
        for (k, &i) in members.iter().enumerate() {
            tags[i] = if k < n_val {
                Split::Val
            } else if k < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    let mut out = ds.clone();
    out.splits = Some(tags);
    Ok(out)
}

/// Stratified subset of `pool` holding `round(fraction·|pool|)` records.
///
/// Records are ranked once per seed, so a smaller fraction always selects a
/// subset of a larger one. Every class keeps at least one record.
pub fn subsample_fraction(
    ds: &Dataset,
    pool: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(
            "subsample",
            format!("fraction must lie in (0, 1], got {fraction}"),
        ));
    }
    if pool.is_empty() {
        return Err(Error::invalid("subsample", "empty record pool"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = strata(ds, pool.iter().copied());
    // (position within class, tie-break, record, class rank)
    let mut ranked: Vec<(f64, f64, usize, usize)> = Vec::with_capacity(pool.len());
    for members in groups.values() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (rank, i) in members.into_iter().enumerate() {
            ranked.push(((rank as f64 + 0.5) / n, rng.random(), i, rank));
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let target = ((fraction * pool.len() as f64).round() as usize).clamp(1, pool.len());
    let mut chosen: std::collections::HashSet<usize> =
        ranked[..target].iter().map(|r| r.2).collect();
    for (key, members) in &groups {
        if !members.iter().any(|i| chosen.contains(i)) {
            let first = ranked
                .iter()
                .find(|r| r.3 == 0 && members.contains(&r.2))
                .expect("class has a first record");
            log::warn!(
                "fraction {fraction} leaves class {} empty; keeping one record",
                group_name(key)
            );
            chosen.insert(first.2);
        }
    }
    Ok(pool
        .iter()
        .copied()
        .filter(|i| chosen.contains(i))
        .collect())
}
