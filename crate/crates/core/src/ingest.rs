//! Rating-file parsing, implicit conversion, sparse-user filtering and the
//! chronological train/test split.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{Interaction, ItemId, UserId};
use crate::error::{Error, Result};

/// Users need strictly more than this many interactions to be kept.
pub const MIN_USER_INTERACTIONS: usize = 10;

/// One parsed line, raw identifiers kept as written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl RatingRecord {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        RatingRecord {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

/// Parses a single `user<d>item<d>rating<d>timestamp` line.
///
/// Returns `Ok(None)` for a non-positive rating (no interaction).
pub fn parse_line(line: &str, delimiter: &str) -> std::result::Result<Option<RatingRecord>, String> {
    let fields: Vec<&str> = line.split(delimiter).map(str::trim).collect();
    if fields.len() != 4 {
        return Err(format!(
            "expected 4 fields separated by `{delimiter}`, found {}",
            fields.len()
        ));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty user or item identifier".to_string());
    }
    let rating: f64 = fields[2]
        .parse()
        .map_err(|_| format!("invalid rating `{}`", fields[2]))?;
    let timestamp: i64 = fields[3]
        .parse()
        .map_err(|_| format!("invalid timestamp `{}`", fields[3]))?;
    if rating.is_nan() || rating <= 0.0 {
        return Ok(None);
    }
    Ok(Some(RatingRecord::new(fields[0], fields[1], timestamp)))
}

pub fn parse_ratings(path: impl AsRef<Path>, delimiter: &str) -> Result<Vec<RatingRecord>> {
    let path = path.as_ref();
    if delimiter.is_empty() {
        return Err(Error::invalid("delimiter", "must not be empty"));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut lines = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_line(&line, delimiter) {
            Ok(Some(r)) => records.push(r),
            Ok(None) => {}
            Err(msg) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg,
                })
            }
        }
    }
    if lines == 0 {
        return Err(Error::Empty(format!("{} has no records", path.display())));
    }
    Ok(records)
}

/// Keeps the records of `k` users chosen uniformly without replacement.
pub fn subsample_users(records: Vec<RatingRecord>, k: usize, seed: u64) -> Vec<RatingRecord> {
    let mut users: Vec<&str> = Vec::new();
    let mut seen = HashMap::new();
    for r in &records {
        if !seen.contains_key(r.user.as_str()) {
            seen.insert(r.user.as_str(), users.len());
            users.push(r.user.as_str());
        }
    }
    if k >= users.len() {
        return records;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: std::collections::HashSet<String> = index::sample(&mut rng, users.len(), k)
        .into_iter()
        .map(|i| users[i].to_string())
        .collect();
    records.into_iter().filter(|r| keep.contains(&r.user)).collect()
}

/// Chronologically ordered implicit interactions with dense identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    /// Dense user id -> raw identifier.
    pub user_labels: Vec<String>,
    /// Dense item id -> raw identifier.
    pub item_labels: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Back to raw records, in stream order.
    pub fn to_records(&self) -> Vec<RatingRecord> {
        self.interactions
            .iter()
            .map(|x| {
                RatingRecord::new(
                    self.user_labels[x.user as usize].clone(),
                    self.item_labels[x.item as usize].clone(),
                    x.timestamp,
                )
            })
            .collect()
    }

    /// Builds a dataset from interactions that already use dense ids and
    /// are in stream order. Labels are the decimal ids.
    pub fn from_dense(interactions: Vec<Interaction>, num_users: usize, num_items: usize) -> Result<Self> {
        for w in interactions.windows(2) {
            if w[1].seq <= w[0].seq {
                return Err(Error::OutOfOrder {
                    last: w[0].seq,
                    got: w[1].seq,
                });
            }
        }
        if let Some(x) = interactions
            .iter()
            .find(|x| x.user as usize >= num_users || x.item as usize >= num_items)
        {
            return Err(Error::invalid(
                "interactions",
                format!("id out of range in {x:?} for {num_users} users / {num_items} items"),
            ));
        }
        Ok(Dataset {
            interactions,
            num_users,
            num_items,
            user_labels: (0..num_users).map(|u| u.to_string()).collect(),
            item_labels: (0..num_items).map(|v| v.to_string()).collect(),
        })
    }
}

/// Filters users with at most [`MIN_USER_INTERACTIONS`] records, sorts by
/// timestamp (stable, so ties keep file order), remaps ids densely in order
/// of first appearance and assigns `seq = 0..N`.
pub fn preprocess(records: &[RatingRecord]) -> Result<Dataset> {
    if records.is_empty() {
        return Err(Error::Empty("no rating records".to_string()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.user.as_str()).or_default() += 1;
    }
    let mut kept: Vec<&RatingRecord> = records
        .iter()
        .filter(|r| counts[r.user.as_str()] > MIN_USER_INTERACTIONS)
        .collect();
    if kept.is_empty() {
        return Err(Error::Empty(format!(
            "every user has at most {MIN_USER_INTERACTIONS} interactions"
        )));
    }
    kept.sort_by_key(|r| r.timestamp);

    let mut user_ids: HashMap<&str, UserId> = HashMap::new();
    let mut item_ids: HashMap<&str, ItemId> = HashMap::new();
    let mut user_labels = Vec::new();
    let mut item_labels = Vec::new();
    let mut interactions = Vec::with_capacity(kept.len());
    for (seq, r) in kept.into_iter().enumerate() {
        let user = *user_ids.entry(r.user.as_str()).or_insert_with(|| {
            user_labels.push(r.user.clone());
            (user_labels.len() - 1) as UserId
        });
        let item = *item_ids.entry(r.item.as_str()).or_insert_with(|| {
            item_labels.push(r.item.clone());
            (item_labels.len() - 1) as ItemId
        });
        interactions.push(Interaction::new(user, item, r.timestamp, seq as u64));
    }
    Ok(Dataset {
        interactions,
        num_users: user_labels.len(),
        num_items: item_labels.len(),
        user_labels,
        item_labels,
    })
}

/// First `floor(N * train_fraction)` interactions train, the rest test.
pub fn chronological_split(ds: &Dataset, train_fraction: f64) -> Result<(&[Interaction], &[Interaction])> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction", "train_fraction ∈ (0,1)"));
    }
    let cut = (ds.len() as f64 * train_fraction).floor() as usize;
    Ok(ds.interactions.split_at(cut))
}

const CACHE_HEADER: &str = "num_users,num_items,n";

/// Writes the canonical CSV cache: a `num_users,num_items,n` header line,
/// its values, then one `user,item,timestamp` row per interaction.
pub fn write_cache(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{CACHE_HEADER}")?;
        writeln!(w, "{},{},{}", ds.num_users, ds.num_items, ds.len())?;
        for x in &ds.interactions {
            writeln!(w, "{},{},{}", x.user, x.item, x.timestamp)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

pub fn is_cache_file(path: impl AsRef<Path>) -> Result<bool> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    Ok(first.trim() == CACHE_HEADER)
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines();
    let mut next = |n: usize| -> Result<Option<String>> {
        lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))
            .map(|l| l.map(|s| s.trim().to_string()))
            .and_then(|l| match (n, l) {
                (1, Some(l)) if l != CACHE_HEADER => Err(parse_err(1, format!("bad cache header `{l}`"))),
                (_, l) => Ok(l),
            })
    };
    next(1)?.ok_or_else(|| Error::Empty(format!("{} is empty", path.display())))?;
    let dims = next(2)?.ok_or_else(|| parse_err(2, "missing dimensions".into()))?;
    let dims: Vec<usize> = dims
        .split(',')
        .map(|f| f.parse().map_err(|_| parse_err(2, format!("bad dimension `{f}`"))))
        .collect::<Result<_>>()?;
    let [num_users, num_items, n] = dims[..] else {
        return Err(parse_err(2, "expected num_users,num_items,n".into()));
    };
    let mut interactions = Vec::with_capacity(n);
    let mut line_no = 2;
    while let Some(line) = next(line_no + 1)? {
        line_no += 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(parse_err(line_no, "expected user,item,timestamp".into()));
        }
        let user: UserId = f[0].parse().map_err(|_| parse_err(line_no, format!("bad user `{}`", f[0])))?;
        let item: ItemId = f[1].parse().map_err(|_| parse_err(line_no, format!("bad item `{}`", f[1])))?;
        let ts: i64 = f[2].parse().map_err(|_| parse_err(line_no, format!("bad timestamp `{}`", f[2])))?;
        let seq = interactions.len() as u64;
        interactions.push(Interaction::new(user, item, ts, seq));
    }
    if interactions.len() != n {
        return Err(parse_err(
            line_no,
            format!("header promises {n} interactions, found {}", interactions.len()),
        ));
    }
    Dataset::from_dense(interactions, num_users, num_items)
}

/// Loads either a cache file or a delimited ratings file, optionally
/// subsampling users before the sparse-user filter.
pub fn load_dataset(
    path: impl AsRef<Path>,
    delimiter: &str,
    subsample: Option<(usize, u64)>,
) -> Result<Dataset> {
    let path = path.as_ref();
    if is_cache_file(path)? {
        return read_cache(path);
    }
    let mut records = parse_ratings(path, delimiter)?;
    if let Some((k, seed)) = subsample {
        records = subsample_users(records, k, seed);
    }
    preprocess(&records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn records_for(user: &str, n: usize, t0: i64) -> Vec<RatingRecord> {
        (0..n)
            .map(|i| RatingRecord::new(user, format!("i{i}"), t0 + i as i64))
            .collect()
    }

    #[test]
    fn movielens_line_parses() {
        let r = parse_line("1::1193::5::978300760", "::").unwrap().unwrap();
        assert_eq!(r, RatingRecord::new("1", "1193", 978300760));
        let r1 = parse_line("1::1193::1::978300760", "::").unwrap().unwrap();
        assert_eq!(r, r1);
        assert!(parse_line("1::1193::5", "::").is_err());
        assert!(parse_line("1::1193::x::5", "::").is_err());
        assert_eq!(parse_line("1,2,0,5", ",").unwrap(), None);
    }

    #[test]
    fn parse_error_reports_line_number() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1::10::5::100").unwrap();
        writeln!(f, "1::11::5").unwrap();
        let err = parse_ratings(f.path(), "::").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(parse_ratings(f.path(), "::"), Err(Error::Empty(_))));
    }

    #[test]
    fn filter_threshold_is_strict() {
        let mut recs = records_for("a", 11, 0);
        recs.extend(records_for("b", 5, 0));
        let ds = preprocess(&recs).unwrap();
        assert_eq!(ds.num_users, 1);
        assert_eq!(ds.len(), 11);
        assert_eq!(ds.user_labels, vec!["a".to_string()]);

        let recs = records_for("c", 10, 0);
        assert!(matches!(preprocess(&recs), Err(Error::Empty(_))));
        assert!(preprocess(&[]).is_err());
    }

    #[test]
    fn sorted_by_timestamp_with_stable_ties() {
        let mut recs = records_for("a", 11, 0);
        recs.reverse();
        recs.push(RatingRecord::new("a", "tie1", 5));
        recs.push(RatingRecord::new("a", "tie2", 5));
        let ds = preprocess(&recs).unwrap();
        assert!(ds.interactions.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert!(ds.interactions.iter().enumerate().all(|(i, x)| x.seq == i as u64));
        let labels: Vec<&str> = ds
            .interactions
            .iter()
            .filter(|x| x.timestamp == 5)
            .map(|x| ds.item_labels[x.item as usize].as_str())
            .collect();
        assert_eq!(labels, vec!["i5", "tie1", "tie2"]);
    }

    #[test]
    fn split_examples() {
        let ds = preprocess(&records_for("a", 100, 0)).unwrap();
        let (train, test) = chronological_split(&ds, 0.9).unwrap();
        assert_eq!((train.len(), test.len()), (90, 10));
        assert_eq!(test[0].seq, train.last().unwrap().seq + 1);

        let ds = preprocess(&records_for("a", 11, 0)).unwrap();
        let ds = Dataset {
            interactions: ds.interactions[..10].to_vec(),
            ..ds
        };
        let (train, test) = chronological_split(&ds, 0.85).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(chronological_split(&ds, 0.0).is_err());
        assert!(chronological_split(&ds, 1.0).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let mut recs = records_for("a", 12, 100);
        recs.extend(records_for("b", 15, 50));
        let ds = preprocess(&recs).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_cache(&ds, f.path()).unwrap();
        assert!(is_cache_file(f.path()).unwrap());
        let back = read_cache(f.path()).unwrap();
        assert_eq!(back.interactions, ds.interactions);
        assert_eq!((back.num_users, back.num_items), (ds.num_users, ds.num_items));
        let loaded = load_dataset(f.path(), "::", None).unwrap();
        assert_eq!(loaded.interactions, ds.interactions);
    }

    #[test]
    fn subsample_keeps_whole_users() {
        let mut recs = Vec::new();
        for u in 0..20 {
            recs.extend(records_for(&format!("u{u}"), 12, u));
        }
        let sub = subsample_users(recs.clone(), 5, 7);
        let users: std::collections::HashSet<_> = sub.iter().map(|r| r.user.clone()).collect();
        assert_eq!(users.len(), 5);
        assert_eq!(sub.len(), 5 * 12);
        assert_eq!(sub, subsample_users(recs.clone(), 5, 7));
        assert_eq!(subsample_users(recs.clone(), 50, 7).len(), recs.len());
    }

    /// Runs against a local MovieLens-1M `ratings.dat` when
    /// `STREAMREC_ML1M` points at it.
    #[test]
    #[ignore]
    fn movielens_1m_statistics() {
        let Ok(path) = std::env::var("STREAMREC_ML1M") else {
            return;
        };
        let ds = load_dataset(path, "::", None).unwrap();
        println!(
            "users={} items={} interactions={}",
            ds.num_users,
            ds.num_items,
            ds.len()
        );
        let mut counts = vec![0usize; ds.num_users];
        for x in &ds.interactions {
            counts[x.user as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > MIN_USER_INTERACTIONS));
    }

    fn arb_records() -> impl Strategy<Value = Vec<RatingRecord>> {
        proptest::collection::vec((0u8..12, 0u8..40, 0i64..50), 1..400).prop_map(|v| {
            v.into_iter()
                .map(|(u, i, t)| RatingRecord::new(format!("u{u}"), format!("i{i}"), t))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(recs in arb_records()) {
            if let Ok(ds) = preprocess(&recs) {
                let again = preprocess(&ds.to_records()).unwrap();
                prop_assert_eq!(again.to_records(), ds.to_records());
                let mut counts = vec![0usize; ds.num_users];
                for x in &ds.interactions {
                    counts[x.user as usize] += 1;
                }
                prop_assert!(counts.iter().all(|&c| c > MIN_USER_INTERACTIONS));
            }
        }

        #[test]
        fn split_concatenation_reconstructs(recs in arb_records(), frac in 0.01f64..0.99) {
            if let Ok(ds) = preprocess(&recs) {
                let (a, b) = chronological_split(&ds, frac).unwrap();
                let joined: Vec<_> = a.iter().chain(b).copied().collect();
                prop_assert_eq!(joined, ds.interactions.clone());
                prop_assert_eq!(a.len(), (ds.len() as f64 * frac).floor() as usize);
            }
        }
    }
}
