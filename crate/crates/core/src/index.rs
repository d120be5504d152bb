//! Reference database of labeled embeddings with exact Euclidean k-NN.
//!
//! This is the extensibility core: enrolling a user appends rows, nothing
//! else is touched and the model is never consulted. Search is an exact
//! linear scan over blocked rows; ties are broken by (distance, insertion
//! order) so results are fully deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::format::{write_atomic, Reader, Writer};

const MAGIC: [u8; 4] = *b"MKIX";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug)]
struct Entry {
    user: u32,
    offset: u32,
}

/// A k-NN hit: entry index, owning user, and Euclidean distance.
#[derive(Clone, Copy, Debug)]
pub struct Neighbor {
    pub entry: usize,
    pub user: usize,
    pub distance: f32,
}

#[derive(Clone, Debug)]
pub struct ReferenceIndex {
    dim: usize,
    data: Vec<f32>,
    entries: Vec<Entry>,
    users: Vec<String>,
    counts: Vec<usize>,
}

impl ReferenceIndex {
    pub fn new(dim: usize) -> ReferenceIndex {
        ReferenceIndex {
            dim,
            data: Vec::new(),
            entries: Vec::new(),
            users: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.users
            .iter()
            .zip(&self.counts)
            .filter(|(_, c)| **c > 0)
            .map(|(u, _)| u.as_str())
    }

    pub fn user_name(&self, user: usize) -> &str {
        &self.users[user]
    }

    /// User slot of entry `entry` (insertion order).
    pub fn entry_user(&self, entry: usize) -> usize {
        self.entries[entry].user as usize
    }

    pub fn count_for(&self, user_id: &str) -> usize {
        self.users
            .iter()
            .position(|u| u == user_id)
            .map_or(0, |i| self.counts[i])
    }

    fn user_slot(&mut self, user_id: &str) -> usize {
        if let Some(i) = self.users.iter().position(|u| u == user_id) {
            i
        } else {
            self.users.push(user_id.to_string());
            self.counts.push(0);
            self.users.len() - 1
        }
    }

    /// Appends `embeddings` rows labeled `user_id`; `offsets[i]` records the
    /// source window offset of row i. Cost is linear in the added rows.
    pub fn enroll(
        &mut self,
        user_id: &str,
        embeddings: ArrayView2<f32>,
        offsets: &[u32],
    ) -> Result<usize> {
        if embeddings.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "embedding dimension {} does not match index dimension {}",
                embeddings.ncols(),
                self.dim
            )));
        }
        if offsets.len() != embeddings.nrows() {
            return Err(Error::Shape(format!(
                "{} offsets for {} embeddings",
                offsets.len(),
                embeddings.nrows()
            )));
        }
        let slot = self.user_slot(user_id) as u32;
        self.data.reserve(embeddings.nrows() * self.dim);
        for (row, offset) in embeddings.rows().into_iter().zip(offsets) {
            self.data.extend(row.iter().copied());
            self.entries.push(Entry { user: slot, offset: *offset });
        }
        self.counts[slot as usize] += embeddings.nrows();
        Ok(embeddings.nrows())
    }

    /// Convenience for callers without source offsets: rows are numbered
    /// from the user's current entry count.
    pub fn enroll_unnumbered(&mut self, user_id: &str, embeddings: ArrayView2<f32>) -> Result<usize> {
        let start = self.count_for(user_id) as u32;
        let offsets: Vec<u32> = (0..embeddings.nrows() as u32).map(|i| start + i).collect();
        self.enroll(user_id, embeddings, &offsets)
    }

    /// Removes every entry of `user_id`, preserving the relative order of
    /// all other entries.
    pub fn remove_user(&mut self, user_id: &str) -> Result<usize> {
        let slot = self
            .users
            .iter()
            .position(|u| u == user_id)
            .filter(|i| self.counts[*i] > 0)
            .ok_or_else(|| Error::NotFound(format!("user {user_id:?} not in index")))?
            as u32;
        let dim = self.dim;
        let mut kept_data = Vec::with_capacity(self.data.len());
        let mut kept_entries = Vec::with_capacity(self.entries.len());
        let mut removed = 0usize;
        for (i, e) in self.entries.iter().enumerate() {
            if e.user == slot {
                removed += 1;
            } else {
                kept_data.extend_from_slice(&self.data[i * dim..(i + 1) * dim]);
                kept_entries.push(*e);
            }
        }
        self.data = kept_data;
        self.entries = kept_entries;
        self.counts[slot as usize] = 0;
        Ok(removed)
    }

    /// Exact k-NN by Euclidean distance, ascending; ties broken by insertion
    /// order. Returns min(k, len) neighbors.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        #[derive(PartialEq)]
        struct Candidate {
            d2: f32,
            entry: usize,
        }
        impl Eq for Candidate {}
        impl PartialOrd for Candidate {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Candidate {
            fn cmp(&self, other: &Self) -> Ordering {
                self.d2
                    .total_cmp(&other.d2)
                    .then(self.entry.cmp(&other.entry))
            }
        }

        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for (entry, row) in self.data.chunks_exact(self.dim).enumerate() {
            let mut d2 = 0.0f32;
            for (q, x) in query.iter().zip(row) {
                let diff = q - x;
                d2 += diff * diff;
            }
            if heap.len() < k {
                heap.push(Candidate { d2, entry });
            } else if let Some(worst) = heap.peek() {
                if (Candidate { d2, entry }) < *worst {
                    heap.pop();
                    heap.push(Candidate { d2, entry });
                }
            }
        }
        let mut hits = heap.into_vec();
        hits.sort_unstable();
        Ok(hits
            .into_iter()
            .map(|c| Neighbor {
                entry: c.entry,
                user: self.entries[c.entry].user as usize,
                distance: c.d2.sqrt(),
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.dim as u32);
        w.u64(self.entries.len() as u64);
        w.u32(self.users.len() as u32);
        for user in &self.users {
            w.u32(user.len() as u32);
            w.bytes(user.as_bytes());
        }
        for (i, e) in self.entries.iter().enumerate() {
            w.u32(e.user);
            w.u32(e.offset);
            w.f32_slice(self.data[i * self.dim..(i + 1) * self.dim].iter().copied());
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<ReferenceIndex> {
        let (mut r, _) = Reader::open(data, &MAGIC, VERSION, "index file")?;
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let num_users = r.u32()? as usize;
        let mut users = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            let len = r.u32()? as usize;
            users.push(r.utf8(len)?.to_string());
        }
        let mut entries = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * dim);
        let mut counts = vec![0usize; num_users];
        for _ in 0..n {
            let user = r.u32()?;
            let offset = r.u32()?;
            if user as usize >= num_users {
                return Err(Error::Validation(format!(
                    "entry references user slot {user} of {num_users}"
                )));
            }
            counts[user as usize] += 1;
            entries.push(Entry { user, offset });
            values.extend(r.f32_slice(dim)?);
        }
        r.verify_crc(r.pos())?;
        Ok(ReferenceIndex { dim, data: values, entries, users, counts })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<ReferenceIndex> {
        let bytes = std::fs::read(path)?;
        ReferenceIndex::from_bytes(&bytes)
    }
}
