//! Interaction data: loading, 8:1:1 splitting, BPR sampling and popularity
//! grouping.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EgraError, Result};
use crate::sparse::SparseAdjacency;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
}

impl Interaction {
    pub fn new(user: usize, item: usize) -> Self {
        Interaction { user, item }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// A user-item interaction dataset with train/valid/test splits.
///
/// `r` is the binary `|U| x |I|` matrix of the train split only.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
    r: SparseAdjacency,
    train_items: Vec<Vec<usize>>,
}

impl InteractionDataset {
    /// Builds a dataset from already indexed splits. Duplicates inside a
    /// split are collapsed; overlapping splits or out-of-range ids are errors.
    pub fn from_splits(
        num_users: usize,
        num_items: usize,
        train: Vec<Interaction>,
        valid: Vec<Interaction>,
        test: Vec<Interaction>,
    ) -> Result<Self> {
        let user_tokens = (0..num_users).map(|u| u.to_string()).collect();
        let item_tokens = (0..num_items).map(|i| i.to_string()).collect();
        Self::with_tokens(user_tokens, item_tokens, train, valid, test)
    }

    fn with_tokens(
        user_tokens: Vec<String>,
        item_tokens: Vec<String>,
        train: Vec<Interaction>,
        valid: Vec<Interaction>,
        test: Vec<Interaction>,
    ) -> Result<Self> {
        let num_users = user_tokens.len();
        let num_items = item_tokens.len();
        let dedup = |mut v: Vec<Interaction>| {
            v.sort();
            v.dedup();
            v
        };
        let (train, valid, test) = (dedup(train), dedup(valid), dedup(test));
        for x in train.iter().chain(&valid).chain(&test) {
            if x.user >= num_users || x.item >= num_items {
                return Err(EgraError::Data(format!(
                    "interaction ({}, {}) out of range for {num_users} users / {num_items} items",
                    x.user, x.item
                )));
            }
        }
        let train_set: HashSet<_> = train.iter().copied().collect();
        let valid_set: HashSet<_> = valid.iter().copied().collect();
        if valid.iter().any(|x| train_set.contains(x))
            || test.iter().any(|x| train_set.contains(x) || valid_set.contains(x))
        {
            return Err(EgraError::Data("splits overlap".into()));
        }

        let mut train_items = vec![Vec::new(); num_users];
        for x in &train {
            train_items[x.user].push(x.item);
        }
        let r = SparseAdjacency::from_triplets(
            num_users,
            num_items,
            train.iter().map(|x| (x.user, x.item, 1.0)).collect(),
        )?;
        Ok(InteractionDataset {
            num_users,
            num_items,
            user_tokens,
            item_tokens,
            train,
            valid,
            test,
            r,
            train_items,
        })
    }

    /// Binary train interaction matrix.
    pub fn r(&self) -> &SparseAdjacency {
        &self.r
    }

    /// Sorted train items of user `u`.
    pub fn train_items(&self, u: usize) -> &[usize] {
        &self.train_items[u]
    }

    pub fn split(&self, which: Split) -> &[Interaction] {
        match which {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Train-split interaction count per item.
    pub fn item_frequencies(&self) -> Vec<usize> {
        let mut freq = vec![0; self.num_items];
        for x in &self.train {
            freq[x.item] += 1;
        }
        freq
    }

    /// Writes `user item split` lines using the original tokens.
    pub fn write_split_manifest(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| EgraError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for split in [Split::Train, Split::Valid, Split::Test] {
            for x in self.split(split) {
                writeln!(
                    w,
                    "{} {} {}",
                    self.user_tokens[x.user],
                    self.item_tokens[x.item],
                    split.tag()
                )
                .map_err(|e| EgraError::io(path, e))?;
            }
        }
        w.flush().map_err(|e| EgraError::io(path, e))
    }

    /// Reads a manifest written by [`write_split_manifest`](Self::write_split_manifest).
    pub fn read_split_manifest(path: &Path) -> Result<Self> {
        let mut index = Indexer::default();
        let mut splits: [Vec<Interaction>; 3] = Default::default();
        for (line_no, line) in read_lines(path)? {
            let mut cols = line.split_whitespace();
            let (Some(u), Some(i), Some(tag)) = (cols.next(), cols.next(), cols.next()) else {
                return Err(parse_err(path, line_no, "expected 'user item split'"));
            };
            let slot = match tag {
                "train" => 0,
                "valid" => 1,
                "test" => 2,
                other => {
                    return Err(parse_err(path, line_no, &format!("unknown split tag '{other}'")))
                }
            };
            let x = index.intern(u, i);
            splits[slot].push(x);
        }
        if index.users.is_empty() {
            return Err(EgraError::Data(format!("{}: empty manifest", path.display())));
        }
        let [train, valid, test] = splits;
        Self::with_tokens(index.users, index.items, train, valid, test)
    }
}

#[derive(Default)]
struct Indexer {
    user_ids: HashMap<String, usize>,
    item_ids: HashMap<String, usize>,
    users: Vec<String>,
    items: Vec<String>,
}

impl Indexer {
    fn intern(&mut self, user: &str, item: &str) -> Interaction {
        fn id(map: &mut HashMap<String, usize>, names: &mut Vec<String>, tok: &str) -> usize {
            *map.entry(tok.to_string()).or_insert_with(|| {
                names.push(tok.to_string());
                names.len() - 1
            })
        }
        Interaction::new(
            id(&mut self.user_ids, &mut self.users, user),
            id(&mut self.item_ids, &mut self.items, item),
        )
    }
}

fn parse_err(path: &Path, line: usize, msg: &str) -> EgraError {
    EgraError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| EgraError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EgraError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((n + 1, line));
    }
    Ok(out)
}

/// Loads whitespace-separated `user item` lines. Users and items are
/// re-indexed from 0 in order of first appearance, duplicates collapse and
/// extra columns are ignored. Every interaction lands in the train split.
pub fn load_interactions(path: &Path) -> Result<InteractionDataset> {
    let mut index = Indexer::default();
    let mut pairs = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let mut cols = line.split_whitespace();
        match (cols.next(), cols.next()) {
            (Some(u), Some(i)) => pairs.push(index.intern(u, i)),
            _ => return Err(parse_err(path, line_no, "expected 'user item'")),
        }
    }
    if pairs.is_empty() {
        return Err(EgraError::Data(format!("{}: no interactions", path.display())));
    }
    InteractionDataset::with_tokens(index.users, index.items, pairs, Vec::new(), Vec::new())
}

/// Per-user 8:1:1 split. Each user's interactions are shuffled by a seeded
/// generator; `floor(n/10)` go to test, `floor(n/10)` to valid, the rest to
/// train. Users with fewer than 3 interactions stay entirely in train.
pub fn split_8_1_1(ds: &InteractionDataset, seed: u64) -> Result<InteractionDataset> {
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); ds.num_users];
    for x in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
        by_user[x.user].push(x.item);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (u, items) in by_user.iter_mut().enumerate() {
        if items.is_empty() {
            return Err(EgraError::Data(format!("user {u} has no interactions")));
        }
        items.sort_unstable();
        items.dedup();
        let n = items.len();
        let (n_test, n_valid) = if n < 3 { (0, 0) } else { (n / 10, n / 10) };
        items.shuffle(&mut rng);
        for (k, &i) in items.iter().enumerate() {
            let x = Interaction::new(u, i);
            if k < n_test {
                test.push(x);
            } else if k < n_test + n_valid {
                valid.push(x);
            } else {
                train.push(x);
            }
        }
    }
    InteractionDataset::with_tokens(
        ds.user_tokens.clone(),
        ds.item_tokens.clone(),
        train,
        valid,
        test,
    )
}

/// `(user, positive item, negative item)`.
pub type Triple = (usize, usize, usize);

fn draw_negative<R: Rng + ?Sized>(ds: &InteractionDataset, u: usize, rng: &mut R) -> Result<usize> {
    let positives = ds.train_items(u);
    if positives.len() >= ds.num_items {
        return Err(EgraError::Sampling(format!(
            "user {u} interacted with every item; no negative exists"
        )));
    }
    let max_tries = 100 + 10 * ds.num_items;
    for _ in 0..max_tries {
        let j = rng.random_range(0..ds.num_items);
        if positives.binary_search(&j).is_err() {
            return Ok(j);
        }
    }
    Err(EgraError::Sampling(format!(
        "no negative found for user {u} after {max_tries} draws"
    )))
}

/// Draws `batch_size` triples: a uniformly random train interaction plus a
/// uniformly random non-interacted item (rejection sampling).
pub fn sample_bpr_triples<R: Rng + ?Sized>(
    ds: &InteractionDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    if ds.train.is_empty() {
        return Err(EgraError::Sampling("training split is empty".into()));
    }
    (0..batch_size)
        .map(|_| {
            let x = ds.train[rng.random_range(0..ds.train.len())];
            Ok((x.user, x.item, draw_negative(ds, x.user, rng)?))
        })
        .collect()
}

/// One epoch of triples: every train interaction exactly once, shuffled and
/// chunked into batches, with one sampled negative each.
pub fn epoch_batches<R: Rng + ?Sized>(
    ds: &InteractionDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Triple>>> {
    if ds.train.is_empty() {
        return Err(EgraError::Sampling("training split is empty".into()));
    }
    let mut order: Vec<Interaction> = ds.train.clone();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            chunk
                .iter()
                .map(|x| Ok((x.user, x.item, draw_negative(ds, x.user, rng)?)))
                .collect()
        })
        .collect()
}

pub const NUM_POPULARITY_GROUPS: usize = 5;

/// Items split into five popularity segments. Group ids run 1..=5 with 1 the
/// most popular (head) segment.
#[derive(Debug, Clone)]
pub struct PopularityGroups {
    pub group_of_item: Vec<u8>,
    pub group_test_sets: [Vec<Interaction>; NUM_POPULARITY_GROUPS],
}

impl PopularityGroups {
    pub fn group_size(&self, group: u8) -> usize {
        self.group_of_item.iter().filter(|&&g| g == group).count()
    }
}

/// Sorts items by descending train frequency (ties by ascending id) and cuts
/// the order into five equal segments, the last one taking the remainder.
pub fn assign_longtail_groups(ds: &InteractionDataset) -> PopularityGroups {
    let freq = ds.item_frequencies();
    let mut order: Vec<usize> = (0..ds.num_items).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    let base = ds.num_items / NUM_POPULARITY_GROUPS;
    let mut group_of_item = vec![0u8; ds.num_items];
    for (rank, &item) in order.iter().enumerate() {
        let g = if base == 0 {
            NUM_POPULARITY_GROUPS
        } else {
            (rank / base + 1).min(NUM_POPULARITY_GROUPS)
        };
        group_of_item[item] = g as u8;
    }
    let mut group_test_sets: [Vec<Interaction>; NUM_POPULARITY_GROUPS] = Default::default();
    for x in &ds.test {
        group_test_sets[group_of_item[x.item] as usize - 1].push(*x);
    }
    PopularityGroups {
        group_of_item,
        group_test_sets,
    }
}
